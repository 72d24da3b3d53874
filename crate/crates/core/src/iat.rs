//! Integrated attention transformer.
//!
//! A model is a chain of integrated attention modules (IAMs). Each IAM runs
//! `GELU(LayerNorm(H W))`, a pre-norm residual Nyström attention layer, and an
//! aggregation head that yields per-instance logits plus a bag vector. Bag
//! vectors from all IAMs are projected to a common width and fused with
//! learned weights `w_b` before the bag classifier.

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::aggregation::{AggregationHead, AggregationVariant};
use crate::attention::AttentionLayer;
use crate::autodiff::{concat_rows, Tape, Var};
use crate::error::{HagError, Result};
use crate::ops::softmax;
use crate::params::{fan_in_uniform, BoundParams, ParamId, ParamSet};
use crate::rng::seeded;
use crate::tensor::Tensor;

/// Where each IAM's bag representation comes from.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BagSource {
    /// The aggregation head's pooled vector.
    #[default]
    Aggregation,
    /// A learned class token prepended after the first FNN. The aggregation
    /// heads still produce the instance logits.
    ClassToken,
}

impl FromStr for BagSource {
    type Err = HagError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "aggregation" => Ok(Self::Aggregation),
            "class_token" => Ok(Self::ClassToken),
            other => Err(HagError::Config(format!("unknown bag source {other:?}"))),
        }
    }
}

impl fmt::Display for BagSource {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Aggregation => "aggregation",
            Self::ClassToken => "class_token",
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct IatConfig {
    pub feature_dim: usize,
    /// Output width of each IAM's FNN; inputs chain from `feature_dim`.
    pub iam_dims: Vec<usize>,
    pub fusion_dim: usize,
    pub num_classes: usize,
    pub heads: usize,
    /// Landmark cap; the effective count is `min(n, landmarks)`.
    pub landmarks: usize,
    pub pinv_iters: usize,
    pub dropout_attn: f64,
    pub dropout_agg: f64,
    /// Hidden width of the attention scorer.
    pub attn_hidden: usize,
    pub aggregation: AggregationVariant,
    pub bag_source: BagSource,
    pub ln_eps: f64,
}

impl Default for IatConfig {
    /// Four IAMs with widths 1024, 1536, 512, 1024 over 1024-d features.
    fn default() -> Self {
        Self {
            feature_dim: 1024,
            iam_dims: vec![1024, 1536, 512, 1024],
            fusion_dim: 1024,
            num_classes: 2,
            heads: 8,
            landmarks: 64,
            pinv_iters: 6,
            dropout_attn: 0.3,
            dropout_agg: 0.25,
            attn_hidden: 384,
            aggregation: AggregationVariant::Gated,
            bag_source: BagSource::Aggregation,
            ln_eps: 1e-5,
        }
    }
}

/// Per-IAM view of an [`IatConfig`].
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct IamConfig {
    pub d_in: usize,
    pub d_out: usize,
    pub heads: usize,
    pub landmarks: usize,
    pub pinv_iters: usize,
    pub dropout_attn: f64,
}

impl IatConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(HagError::Config(msg));
        if self.iam_dims.is_empty() {
            return bad("iam_dims must name at least one module".into());
        }
        if self.feature_dim == 0 || self.fusion_dim == 0 || self.attn_hidden == 0 {
            return bad("dimensions must be positive".into());
        }
        if self.num_classes < 2 {
            return bad(format!("num_classes {} < 2", self.num_classes));
        }
        for &d in &self.iam_dims {
            if self.heads == 0 || d % self.heads != 0 {
                return bad(format!("IAM width {d} not divisible by {} heads", self.heads));
            }
        }
        if self.landmarks == 0 || self.pinv_iters == 0 {
            return bad("landmarks and pinv_iters must be >= 1".into());
        }
        for p in [self.dropout_attn, self.dropout_agg] {
            if !(0.0..1.0).contains(&p) {
                return bad(format!("dropout {p} outside [0, 1)"));
            }
        }
        Ok(())
    }

    pub fn iam_configs(&self) -> Vec<IamConfig> {
        let mut d_in = self.feature_dim;
        self.iam_dims
            .iter()
            .map(|&d_out| {
                let c = IamConfig {
                    d_in,
                    d_out,
                    heads: self.heads,
                    landmarks: self.landmarks,
                    pinv_iters: self.pinv_iters,
                    dropout_attn: self.dropout_attn,
                };
                d_in = d_out;
                c
            })
            .collect()
    }
}

/// `GELU(LayerNorm(H W))`; `W` has no bias.
pub fn fnn_forward<'t>(h: Var<'t>, w: Var<'t>, gamma: Var<'t>, beta: Var<'t>, eps: f64) -> Result<Var<'t>> {
    h.matmul(w)?.layer_norm(gamma, beta, eps)?.gelu()
}

#[derive(Clone, Debug)]
pub struct IamBlock {
    pub config: IamConfig,
    w_fnn: ParamId,
    fnn_gamma: ParamId,
    fnn_beta: ParamId,
    norm_gamma: ParamId,
    norm_beta: ParamId,
    pub attention: AttentionLayer,
    pub head: AggregationHead,
    bag_proj: ParamId,
}

/// Outputs of one IAM.
#[derive(Clone, Copy, Debug)]
pub struct AttentionOutput<'t> {
    /// Hidden rows, including the class token row when present.
    pub hidden: Var<'t>,
    /// Instance logits `n×1` (instances only).
    pub logits_a: Var<'t>,
    /// Projected bag vector `1×d_f`.
    pub bag: Var<'t>,
}

impl IamBlock {
    fn new<R: Rng + ?Sized>(params: &mut ParamSet, index: usize, cfg: IamConfig, model: &IatConfig, rng: &mut R) -> Result<Self> {
        let p = format!("iam{index}");
        let w_fnn = params.add(format!("{p}.fnn.w"), fan_in_uniform(rng, cfg.d_in, cfg.d_out));
        let fnn_gamma = params.add(format!("{p}.fnn.gamma"), Tensor::filled(1, cfg.d_out, 1.0));
        let fnn_beta = params.add(format!("{p}.fnn.beta"), Tensor::zeros(1, cfg.d_out));
        let norm_gamma = params.add(format!("{p}.attn_norm.gamma"), Tensor::filled(1, cfg.d_out, 1.0));
        let norm_beta = params.add(format!("{p}.attn_norm.beta"), Tensor::zeros(1, cfg.d_out));
        let attention = AttentionLayer::new(
            params,
            &format!("{p}.attn"),
            cfg.d_out,
            cfg.heads,
            cfg.landmarks,
            cfg.pinv_iters,
            cfg.dropout_attn,
            rng,
        )?;
        let head = AggregationHead::new(
            params,
            &format!("{p}.agg"),
            model.aggregation,
            cfg.d_out,
            model.attn_hidden,
            model.dropout_agg,
            rng,
        );
        let proj = if cfg.d_out == model.fusion_dim {
            Tensor::identity(cfg.d_out)
        } else {
            fan_in_uniform(rng, cfg.d_out, model.fusion_dim)
        };
        let bag_proj = params.add(format!("{p}.bag_proj"), proj);
        Ok(Self {
            config: cfg,
            w_fnn,
            fnn_gamma,
            fnn_beta,
            norm_gamma,
            norm_beta,
            attention,
            head,
            bag_proj,
        })
    }

    pub fn fnn<'t>(&self, h: Var<'t>, params: &BoundParams<'t>, eps: f64) -> Result<Var<'t>> {
        fnn_forward(h, params[self.w_fnn], params[self.fnn_gamma], params[self.fnn_beta], eps)
    }

    /// Runs the IAM. `class_token` (first IAM only) is prepended after the
    /// FNN; `has_class_row` says row 0 of the hidden state is a class token.
    fn forward<'t, R: Rng + ?Sized>(
        &self,
        h: Var<'t>,
        params: &BoundParams<'t>,
        eps: f64,
        class_token: Option<Var<'t>>,
        has_class_row: bool,
        mut rng: Option<&mut R>,
    ) -> Result<AttentionOutput<'t>> {
        if h.cols() != self.config.d_in {
            return Err(HagError::ShapeMismatch {
                op: "iam_forward",
                left: h.shape(),
                right: vec![self.config.d_in, self.config.d_out],
            });
        }
        let mut x = self.fnn(h, params, eps)?;
        if let Some(token) = class_token {
            x = concat_rows(&[token, x])?;
        }
        let normed = x.layer_norm(params[self.norm_gamma], params[self.norm_beta], eps)?;
        let attended = self
            .attention
            .forward(normed, params)?
            .dropout(self.attention.dropout_p, rng.as_deref_mut())?;
        let hidden = x.add(attended)?;

        let rows = hidden.rows();
        let instances = if has_class_row {
            hidden.gather_rows(&(1..rows).collect::<Vec<_>>())?
        } else {
            hidden
        };
        let (logits_a, pooled) = self.head.forward(instances, params, rng)?;
        let bag_raw = if has_class_row { hidden.gather_rows(&[0])? } else { pooled };
        let bag = bag_raw.matmul(params[self.bag_proj])?;
        Ok(AttentionOutput { hidden, logits_a, bag })
    }

    pub fn bag_proj_id(&self) -> ParamId {
        self.bag_proj
    }
}

#[derive(Clone, Debug)]
pub struct IatModel {
    pub config: IatConfig,
    pub params: ParamSet,
    pub iams: Vec<IamBlock>,
    w_b: ParamId,
    cls_w: ParamId,
    cls_b: ParamId,
    inst_w: ParamId,
    inst_b: ParamId,
    class_token: Option<ParamId>,
}

/// Outputs of a full forward pass.
#[derive(Clone, Debug)]
pub struct IatOutput<'t> {
    /// Last IAM's instance logits, `n×1`.
    pub attention: Var<'t>,
    /// Bag classifier logits, `1×C`.
    pub bag_logits: Var<'t>,
    /// Fused bag representation, `1×d_f`.
    pub h_bf: Var<'t>,
    /// Per-instance class logits from the last IAM's hidden rows, `n×C`.
    pub patch_logits: Var<'t>,
    pub iams: Vec<AttentionOutput<'t>>,
}

impl IatOutput<'_> {
    pub fn probs(&self) -> Vec<f64> {
        softmax(self.bag_logits.value().data()).expect("non-empty logits")
    }
}

/// Detached inference result.
#[derive(Clone, Debug, PartialEq)]
pub struct Prediction {
    pub attention: Vec<f64>,
    pub probs: Vec<f64>,
}

impl IatModel {
    pub fn new(config: IatConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = seeded(seed);
        let mut params = ParamSet::new();
        let iams = config
            .iam_configs()
            .into_iter()
            .enumerate()
            .map(|(i, c)| IamBlock::new(&mut params, i, c, &config, &mut rng))
            .collect::<Result<Vec<_>>>()?;
        let m = iams.len();
        let class_token = match config.bag_source {
            BagSource::ClassToken => {
                let d = config.iam_dims[0];
                Some(params.add("class_token", fan_in_uniform(&mut rng, 1, d)))
            }
            BagSource::Aggregation => None,
        };
        let w_b = params.add("w_b", Tensor::filled(m, 1, 1.0 / m as f64));
        let c = config.num_classes;
        let cls_w = params.add("classifier.w", fan_in_uniform(&mut rng, config.fusion_dim, c));
        let cls_b = params.add("classifier.b", Tensor::zeros(1, c));
        let last = *config.iam_dims.last().expect("validated non-empty");
        let inst_w = params.add("instance_classifier.w", fan_in_uniform(&mut rng, last, c));
        let inst_b = params.add("instance_classifier.b", Tensor::zeros(1, c));
        Ok(Self {
            config,
            params,
            iams,
            w_b,
            cls_w,
            cls_b,
            inst_w,
            inst_b,
            class_token,
        })
    }

    pub fn w_b_id(&self) -> ParamId {
        self.w_b
    }

    pub fn num_classes(&self) -> usize {
        self.config.num_classes
    }

    /// Full forward pass. `rng == None` runs in inference mode.
    pub fn forward<'t, R: Rng + ?Sized>(
        &self,
        features: Var<'t>,
        params: &BoundParams<'t>,
        mut rng: Option<&mut R>,
    ) -> Result<IatOutput<'t>> {
        if features.rows() == 0 {
            return Err(HagError::Empty("bag"));
        }
        let eps = self.config.ln_eps;
        let has_cls = self.class_token.is_some();
        let mut h = features;
        let mut outs = Vec::with_capacity(self.iams.len());
        for (i, iam) in self.iams.iter().enumerate() {
            let token = if i == 0 { self.class_token.map(|id| params[id]) } else { None };
            let out = iam.forward(h, params, eps, token, has_cls, rng.as_deref_mut())?;
            h = out.hidden;
            outs.push(out);
        }
        let stacked = concat_rows(&outs.iter().map(|o| o.bag).collect::<Vec<_>>())?;
        let h_bf = params[self.w_b].transpose()?.matmul(stacked)?;
        let bag_logits = h_bf.matmul(params[self.cls_w])?.add_row(params[self.cls_b])?;

        let last = outs.last().expect("at least one IAM");
        let instances = if has_cls {
            let rows = last.hidden.rows();
            last.hidden.gather_rows(&(1..rows).collect::<Vec<_>>())?
        } else {
            last.hidden
        };
        let patch_logits = instances.matmul(params[self.inst_w])?.add_row(params[self.inst_b])?;
        Ok(IatOutput {
            attention: last.logits_a,
            bag_logits,
            h_bf,
            patch_logits,
            iams: outs,
        })
    }

    /// Inference on a plain feature matrix.
    pub fn predict(&self, features: &Tensor) -> Result<Prediction> {
        let tape = Tape::new();
        let bound = self.params.bind(&tape);
        let x = tape.constant(features.clone());
        let out = self.forward(x, &bound, None::<&mut crate::rng::HagRng>)?;
        let attention = out.attention.to_tensor().into_data();
        Ok(Prediction {
            attention,
            probs: out.probs(),
        })
    }
}
