//! Multi-head self-attention: an exact O(n²) reference and the Nyström
//! landmark approximation with a Newton–Schulz pseudo-inverse.

use rand::Rng;

use crate::autodiff::{concat_cols, Tape, Var};
use crate::error::{HagError, Result};
use crate::params::{fan_in_uniform, BoundParams, ParamId, ParamSet};
use crate::tensor::Tensor;

/// Projection weights of one attention layer, registered in a [`ParamSet`].
#[derive(Clone, Debug)]
pub struct AttentionLayer {
    pub dim: usize,
    pub heads: usize,
    pub landmarks: usize,
    pub pinv_iters: usize,
    pub dropout_p: f64,
    w_q: ParamId,
    w_k: ParamId,
    w_v: ParamId,
    w_o: ParamId,
    b_o: ParamId,
}

/// Tape-bound projections for a single forward pass.
#[derive(Clone, Copy, Debug)]
pub struct Projections<'t> {
    pub w_q: Var<'t>,
    pub w_k: Var<'t>,
    pub w_v: Var<'t>,
    pub w_o: Var<'t>,
    pub b_o: Var<'t>,
    pub heads: usize,
}

impl AttentionLayer {
    #[allow(clippy::too_many_arguments)]
    pub fn new<R: Rng + ?Sized>(
        params: &mut ParamSet,
        prefix: &str,
        dim: usize,
        heads: usize,
        landmarks: usize,
        pinv_iters: usize,
        dropout_p: f64,
        rng: &mut R,
    ) -> Result<Self> {
        if heads == 0 || !dim.is_multiple_of(heads) {
            return Err(HagError::Config(format!("dim {dim} not divisible by {heads} heads")));
        }
        if landmarks == 0 || pinv_iters == 0 {
            return Err(HagError::Config("landmarks and pinv_iters must be >= 1".into()));
        }
        Ok(Self {
            dim,
            heads,
            landmarks,
            pinv_iters,
            dropout_p,
            w_q: params.add(format!("{prefix}.w_q"), fan_in_uniform(rng, dim, dim)),
            w_k: params.add(format!("{prefix}.w_k"), fan_in_uniform(rng, dim, dim)),
            w_v: params.add(format!("{prefix}.w_v"), fan_in_uniform(rng, dim, dim)),
            w_o: params.add(format!("{prefix}.w_o"), fan_in_uniform(rng, dim, dim)),
            b_o: params.add(format!("{prefix}.b_o"), Tensor::zeros(1, dim)),
        })
    }

    pub fn output_ids(&self) -> (ParamId, ParamId) {
        (self.w_o, self.b_o)
    }

    pub fn bind<'t>(&self, params: &BoundParams<'t>) -> Projections<'t> {
        Projections {
            w_q: params[self.w_q],
            w_k: params[self.w_k],
            w_v: params[self.w_v],
            w_o: params[self.w_o],
            b_o: params[self.b_o],
            heads: self.heads,
        }
    }

    /// Nyström attention with landmarks capped at the token count.
    pub fn forward<'t>(&self, x: Var<'t>, params: &BoundParams<'t>) -> Result<Var<'t>> {
        nystrom_attention(x, &self.bind(params), self.landmarks, self.pinv_iters)
    }
}

struct HeadInputs<'t> {
    q: Vec<Var<'t>>,
    k: Vec<Var<'t>>,
    v: Vec<Var<'t>>,
    scale: f64,
}

fn split_heads<'t>(x: Var<'t>, p: &Projections<'t>) -> Result<HeadInputs<'t>> {
    let d = p.w_q.cols();
    if x.cols() != p.w_q.rows() {
        return Err(HagError::ShapeMismatch {
            op: "attention",
            left: x.shape(),
            right: p.w_q.shape(),
        });
    }
    let dh = d / p.heads;
    let q = x.matmul(p.w_q)?;
    let k = x.matmul(p.w_k)?;
    let v = x.matmul(p.w_v)?;
    let mut out = HeadInputs {
        q: Vec::with_capacity(p.heads),
        k: Vec::with_capacity(p.heads),
        v: Vec::with_capacity(p.heads),
        scale: 1.0 / (dh as f64).sqrt(),
    };
    for h in 0..p.heads {
        out.q.push(q.narrow_cols(h * dh, dh)?);
        out.k.push(k.narrow_cols(h * dh, dh)?);
        out.v.push(v.narrow_cols(h * dh, dh)?);
    }
    Ok(out)
}

fn merge_heads<'t>(heads: &[Var<'t>], p: &Projections<'t>) -> Result<Var<'t>> {
    concat_cols(heads)?.matmul(p.w_o)?.add_row(p.b_o)
}

/// `softmax(a bᵀ · scale)` row-wise.
fn kernel<'t>(a: Var<'t>, b: Var<'t>, scale: f64) -> Result<Var<'t>> {
    a.matmul(b.transpose()?)?.scale(scale)?.softmax_rows()
}

/// Multi-head `softmax(Q Kᵀ/√d_h) V` followed by the output projection.
pub fn exact_attention<'t>(x: Var<'t>, p: &Projections<'t>) -> Result<Var<'t>> {
    if x.rows() == 0 {
        return Err(HagError::Empty("attention input"));
    }
    let hi = split_heads(x, p)?;
    let outs = (0..p.heads)
        .map(|h| kernel(hi.q[h], hi.k[h], hi.scale)?.matmul(hi.v[h]))
        .collect::<Result<Vec<_>>>()?;
    merge_heads(&outs, p)
}

/// Segment-mean matrix `[m × n]`. Tokens are padded to `g·m` rows
/// (`g = ⌈n/m⌉`) by repeating the last row; padding only enters the means.
pub fn landmark_matrix(n: usize, m: usize) -> Tensor {
    let g = n.div_ceil(m);
    let mut data = vec![0.0; m * n];
    let w = 1.0 / g as f64;
    for seg in 0..m {
        for slot in 0..g {
            let src = (seg * g + slot).min(n - 1);
            data[seg * n + src] += w;
        }
    }
    Tensor::from_parts_unchecked(vec![m, n], data)
}

/// Nyström approximation of [`exact_attention`].
///
/// Per head: `softmax(Q K̃ᵀ) · pinv(softmax(Q̃ K̃ᵀ)) · softmax(Q̃ Kᵀ) V`, where
/// `Q̃`, `K̃` are segment means over `landmarks` groups. When
/// `landmarks >= n` the landmarks are the tokens themselves and the
/// reconstruction `A A⁺ A` equals `A`, so the exact kernel is used directly.
pub fn nystrom_attention<'t>(x: Var<'t>, p: &Projections<'t>, landmarks: usize, pinv_iters: usize) -> Result<Var<'t>> {
    let n = x.rows();
    if n == 0 {
        return Err(HagError::Empty("attention input"));
    }
    if landmarks == 0 || pinv_iters == 0 {
        return Err(HagError::InvalidArgument("landmarks and pinv_iters must be >= 1".into()));
    }
    if landmarks >= n {
        return exact_attention(x, p);
    }
    let tape = x.tape();
    let hi = split_heads(x, p)?;
    let seg = tape.constant(landmark_matrix(n, landmarks));
    let outs = (0..p.heads)
        .map(|h| {
            let (q, k, v) = (hi.q[h], hi.k[h], hi.v[h]);
            let q_l = seg.matmul(q)?;
            let k_l = seg.matmul(k)?;
            let f = kernel(q, k_l, hi.scale)?;
            let a = kernel(q_l, k_l, hi.scale)?;
            let b = kernel(q_l, k, hi.scale)?;
            let a_pinv = pinv_newton_schulz(a, pinv_iters)?;
            f.matmul(a_pinv)?.matmul(b.matmul(v)?)
        })
        .collect::<Result<Vec<_>>>()?;
    merge_heads(&outs, p)
}

/// Iterative Moore–Penrose pseudo-inverse:
/// `Z ← ¼ Z (13I − AZ(15I − AZ(7I − AZ)))`, starting from
/// `Z₀ = Aᵀ / (‖A‖₁ ‖A‖_∞)`. Differentiable end to end.
pub fn pinv_newton_schulz<'t>(a: Var<'t>, iters: usize) -> Result<Var<'t>> {
    if iters == 0 {
        return Err(HagError::InvalidArgument("pinv iterations must be >= 1".into()));
    }
    let m = a.rows();
    if a.cols() != m {
        return Err(HagError::ShapeMismatch {
            op: "pinv_newton_schulz",
            left: a.shape(),
            right: vec![m, m],
        });
    }
    let tape = a.tape();
    let ones_row = tape.constant(Tensor::filled(1, m, 1.0));
    let ones_col = tape.constant(Tensor::filled(m, 1, 1.0));
    // Inputs are nonnegative softmax kernels, so column/row sums are the norms.
    let max_col = ones_row.matmul(a)?.max()?;
    let max_row = a.matmul(ones_col)?.max()?;
    let norm = max_col.mul(max_row)?.recip()?;
    let mut z = a.transpose()?.mul_scalar(norm)?;
    let eye = |c: f64| tape.constant(scaled_identity(m, c));
    for _ in 0..iters {
        let az = a.matmul(z)?;
        let t = eye(7.0).sub(az)?;
        let t = eye(15.0).sub(az.matmul(t)?)?;
        let t = eye(13.0).sub(az.matmul(t)?)?;
        z = z.matmul(t)?.scale(0.25)?;
    }
    Ok(z)
}

fn scaled_identity(m: usize, c: f64) -> Tensor {
    let mut t = Tensor::identity(m);
    t.data_mut().iter_mut().for_each(|v| *v *= c);
    t
}

/// Plain-tensor form of [`pinv_newton_schulz`].
pub fn pinv_tensor(a: &Tensor, iters: usize) -> Result<Tensor> {
    let tape = Tape::new();
    let z = pinv_newton_schulz(tape.constant(a.clone()), iters)?;
    let out = z.to_tensor();
    Ok(out)
}
