//! Attention scoring and attention-weighted pooling of instance rows.
//!
//! The module is split into a scorer `s(H) -> a` and a pooling step
//! `g(a, H) -> h_b`. The gated scorer is
//! `a = (tanh(H V) ⊙ σ(H U)) w_a`; pooling uses `softmax(a)ᵀ H`, so `h_b` is
//! always a convex combination of the rows of `H`. Raw logits are returned
//! alongside for top-k ranking, which softmax does not change.

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::Var;
use crate::error::{HagError, Result};
use crate::params::{fan_in_uniform, BoundParams, ParamId, ParamSet};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AggregationVariant {
    #[default]
    Gated,
    Attention,
    Mean,
    Max,
}

impl FromStr for AggregationVariant {
    type Err = HagError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "gated" => Ok(Self::Gated),
            "attention" => Ok(Self::Attention),
            "mean" => Ok(Self::Mean),
            "max" => Ok(Self::Max),
            other => Err(HagError::Config(format!(
                "unknown aggregation variant {other:?} (expected gated|attention|mean|max)"
            ))),
        }
    }
}

impl fmt::Display for AggregationVariant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Gated => "gated",
            Self::Attention => "attention",
            Self::Mean => "mean",
            Self::Max => "max",
        })
    }
}

#[derive(Clone, Debug)]
pub struct AggregationHead {
    pub variant: AggregationVariant,
    pub dim: usize,
    pub hidden: usize,
    v: Option<ParamId>,
    u: Option<ParamId>,
    w_a: Option<ParamId>,
    pub dropout_p: f64,
}

impl AggregationHead {
    /// Registers the head's parameters (if any) in `params`.
    pub fn new<R: Rng + ?Sized>(
        params: &mut ParamSet,
        prefix: &str,
        variant: AggregationVariant,
        dim: usize,
        hidden: usize,
        dropout_p: f64,
        rng: &mut R,
    ) -> Self {
        let (v, u, w_a) = match variant {
            AggregationVariant::Gated => (
                Some(params.add(format!("{prefix}.V"), fan_in_uniform(rng, dim, hidden))),
                Some(params.add(format!("{prefix}.U"), fan_in_uniform(rng, dim, hidden))),
                Some(params.add(format!("{prefix}.w_a"), fan_in_uniform(rng, hidden, 1))),
            ),
            AggregationVariant::Attention => (
                Some(params.add(format!("{prefix}.V"), fan_in_uniform(rng, dim, hidden))),
                None,
                Some(params.add(format!("{prefix}.w_a"), fan_in_uniform(rng, hidden, 1))),
            ),
            AggregationVariant::Mean | AggregationVariant::Max => (None, None, None),
        };
        Self {
            variant,
            dim,
            hidden,
            v,
            u,
            w_a,
            dropout_p,
        }
    }

    pub fn param_ids(&self) -> (Option<ParamId>, Option<ParamId>, Option<ParamId>) {
        (self.v, self.u, self.w_a)
    }

    /// Logits `a` of shape `n×1`. Dropout (training only) hits the hidden
    /// `tanh`/`σ` activations.
    pub fn attention_scores<'t, R: Rng + ?Sized>(&self, h: Var<'t>, params: &BoundParams<'t>, mut rng: Option<&mut R>) -> Result<Var<'t>> {
        let n = h.rows();
        if n == 0 {
            return Err(HagError::Empty("aggregation input"));
        }
        if h.cols() != self.dim {
            return Err(HagError::ShapeMismatch {
                op: "attention_scores",
                left: h.shape(),
                right: vec![self.dim, self.hidden],
            });
        }
        match self.variant {
            AggregationVariant::Gated => {
                let v = params[self.v.expect("gated head has V")];
                let u = params[self.u.expect("gated head has U")];
                let w_a = params[self.w_a.expect("gated head has w_a")];
                let t = h.matmul(v)?.tanh()?.dropout(self.dropout_p, rng.as_deref_mut())?;
                let s = h.matmul(u)?.sigmoid()?.dropout(self.dropout_p, rng.as_deref_mut())?;
                t.mul(s)?.matmul(w_a)
            }
            AggregationVariant::Attention => {
                let v = params[self.v.expect("attention head has V")];
                let w_a = params[self.w_a.expect("attention head has w_a")];
                h.matmul(v)?.tanh()?.dropout(self.dropout_p, rng)?.matmul(w_a)
            }
            AggregationVariant::Mean => Ok(h.tape().constant(Tensor::zeros(n, 1))),
            AggregationVariant::Max => {
                let norms = {
                    let hv = h.value();
                    (0..n).map(|i| hv.row(i).iter().map(|x| x * x).sum::<f64>().sqrt()).collect()
                };
                Ok(h.tape().constant(Tensor::col_vector(norms)?))
            }
        }
    }

    /// `(a, h_b)` with `h_b = g(s(H), H)`.
    pub fn forward<'t, R: Rng + ?Sized>(&self, h: Var<'t>, params: &BoundParams<'t>, rng: Option<&mut R>) -> Result<(Var<'t>, Var<'t>)> {
        let a = self.attention_scores(h, params, rng)?;
        let h_b = match self.variant {
            AggregationVariant::Max => select_max(a, h)?,
            _ => aggregate(a, h)?,
        };
        Ok((a, h_b))
    }
}

/// `softmax(a)ᵀ H` for logits `a[n×1]` and instances `H[n×d]`.
pub fn aggregate<'t>(a: Var<'t>, h: Var<'t>) -> Result<Var<'t>> {
    if a.rows() != h.rows() || a.cols() != 1 {
        return Err(HagError::ShapeMismatch {
            op: "aggregate",
            left: a.shape(),
            right: h.shape(),
        });
    }
    a.transpose()?.softmax_rows()?.matmul(h)
}

/// Hard selection of the row with the largest logit.
fn select_max<'t>(a: Var<'t>, h: Var<'t>) -> Result<Var<'t>> {
    let best = crate::pyramid::top_k_positions(a.value().data(), 1)?[0];
    h.gather_rows(&[best])
}

/// Plain-tensor softmax pooling.
pub fn aggregate_tensor(a: &[f64], h: &Tensor) -> Result<Tensor> {
    if a.len() != h.rows() {
        return Err(HagError::ShapeMismatch {
            op: "aggregate",
            left: vec![a.len(), 1],
            right: h.shape().to_vec(),
        });
    }
    let w = Tensor::row_vector(crate::ops::softmax(a)?)?;
    w.matmul(h)
}
