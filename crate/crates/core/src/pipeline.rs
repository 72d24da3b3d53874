//! Hierarchical cascade over pyramid levels.
//!
//! The coarsest level sees every tissue patch. Each finer level sees only
//! the quadtree children of the top-`k` patches ranked by the coarser
//! level's attention logits. Every level has its own model and optimizer;
//! selection is a hard index gather, so no gradient crosses levels.

use std::fs;
use std::io::Write;
use std::path::Path;
use std::thread;

use rand::seq::SliceRandom;
use rand::RngCore;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::checkpoint;
use crate::data::{Dataset, FeaturePyramid};
use crate::error::{HagError, Result};
use crate::iat::{IatConfig, IatModel};
use crate::metrics::auc_macro;
use crate::ops::softmax;
use crate::optim::AdamConfig;
use crate::params::{Optimizer, ParamSet};
use crate::pyramid::{distill_features, select_children, top_k_positions};
use crate::rng::{substream, HagRng};
use crate::tensor::Tensor;

pub const RUN_CONFIG_FILE: &str = "config.json";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct HagConfig {
    pub num_levels: usize,
    /// Selection budgets, coarsest level first: entry `i` is the number of
    /// parents kept at level `num_levels - 1 - i`.
    pub k_per_level: Vec<usize>,
    /// Weight of the patch-level term.
    pub lambda: f64,
    pub label_smoothing_low_res: f64,
    pub label_smoothing_finest: f64,
    /// Highest-attention instances fed to the patch-level term.
    pub k_loss: usize,
    pub svm_tau: f64,
    pub svm_alpha: f64,
    pub model: IatConfig,
}

impl Default for HagConfig {
    fn default() -> Self {
        Self {
            num_levels: 3,
            k_per_level: vec![4, 4],
            lambda: 1.0,
            label_smoothing_low_res: 0.1,
            label_smoothing_finest: 0.0,
            k_loss: 8,
            svm_tau: 1.0,
            svm_alpha: 1.0,
            model: IatConfig::default(),
        }
    }
}

impl HagConfig {
    /// Small model sized for CPU experiments on 64-d synthetic features.
    pub fn desk(feature_dim: usize) -> Self {
        Self {
            model: IatConfig {
                feature_dim,
                iam_dims: vec![32],
                fusion_dim: 32,
                heads: 2,
                attn_hidden: 16,
                ..IatConfig::default()
            },
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        if self.num_levels == 0 {
            return Err(HagError::Config("num_levels must be >= 1".into()));
        }
        if self.k_per_level.len() + 1 != self.num_levels {
            return Err(HagError::Config(format!(
                "{} levels need {} selection budgets, got {}",
                self.num_levels,
                self.num_levels - 1,
                self.k_per_level.len()
            )));
        }
        if self.k_per_level.contains(&0) || self.k_loss == 0 {
            return Err(HagError::Config("selection budgets and k_loss must be >= 1".into()));
        }
        if !(self.lambda >= 0.0) {
            return Err(HagError::Config(format!("lambda {} must be >= 0", self.lambda)));
        }
        for eps in [self.label_smoothing_low_res, self.label_smoothing_finest] {
            if !(0.0..1.0).contains(&eps) {
                return Err(HagError::Config(format!("label smoothing {eps} outside [0, 1)")));
            }
        }
        if !(self.svm_tau > 0.0 && self.svm_alpha >= 0.0) {
            return Err(HagError::Config("svm_tau must be > 0 and svm_alpha >= 0".into()));
        }
        Ok(())
    }

    /// Parents kept when leaving `level` (>= 1) for the next finer level.
    pub fn budget(&self, level: usize, k_override: Option<usize>) -> usize {
        k_override.unwrap_or(self.k_per_level[self.num_levels - 1 - level])
    }

    pub fn smoothing(&self, level: usize) -> f64 {
        if level == 0 {
            self.label_smoothing_finest
        } else {
            self.label_smoothing_low_res
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub max_epochs: usize,
    /// Epochs without a new best finest-level validation loss before stopping.
    pub patience: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub seed: u64,
    pub threads: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            max_epochs: 200,
            patience: 20,
            lr: 1e-5,
            weight_decay: 1e-5,
            seed: 0,
            threads: 1,
        }
    }
}

impl TrainConfig {
    /// Schedule paired with [`HagConfig::desk`]: a larger step size and a
    /// shorter epoch cap.
    pub fn desk(seed: u64) -> Self {
        Self {
            max_epochs: 150,
            lr: 1e-4,
            seed,
            ..Self::default()
        }
    }
}

/// What one level saw and selected.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LevelOutput {
    pub level: usize,
    /// Patch id at this level for each bag row.
    pub bag_ids: Vec<usize>,
    pub attention: Vec<f64>,
    pub probs: Vec<f64>,
    pub selected_parent_ids: Vec<usize>,
    pub distilled_child_ids: Vec<usize>,
}

/// Cascade result; `levels` runs coarsest first.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Inference {
    pub levels: Vec<LevelOutput>,
    pub probs: Vec<f64>,
}

impl Inference {
    pub fn level(&self, level: usize) -> Option<&LevelOutput> {
        self.levels.iter().find(|l| l.level == level)
    }
}

/// Top-`k_loss` instances by attention, each labelled with the bag label.
#[derive(Clone, Debug, PartialEq)]
pub struct PatchLossBatch {
    pub rows: Vec<usize>,
    pub patch_probs: Tensor,
    pub pseudo_labels: Vec<usize>,
}

pub fn patch_loss_batch(attention: &[f64], patch_logits: &Tensor, label: usize, k_loss: usize) -> Result<PatchLossBatch> {
    let rows = top_k_positions(attention, k_loss)?;
    let logits = patch_logits.gather_rows(&rows)?;
    let c = logits.cols();
    let mut probs = Vec::with_capacity(logits.len());
    for r in 0..logits.rows() {
        probs.extend(softmax(logits.row(r))?);
    }
    Ok(PatchLossBatch {
        pseudo_labels: vec![label; rows.len()],
        patch_probs: Tensor::matrix(rows.len(), c, probs)?,
        rows,
    })
}

/// Smoothed cross-entropy on the bag plus `lambda` times the mean smooth
/// SVM loss over the top-`k_loss` instances by attention.
pub fn level_loss<'t>(
    bag_logits: Var<'t>,
    attention: &[f64],
    patch_logits: Var<'t>,
    label: usize,
    cfg: &HagConfig,
    level: usize,
) -> Result<Var<'t>> {
    let ce = bag_logits.cross_entropy_smoothed(label, cfg.smoothing(level))?;
    if cfg.lambda == 0.0 {
        return Ok(ce);
    }
    let rows = top_k_positions(attention, cfg.k_loss)?;
    let mut total: Option<Var<'t>> = None;
    for &r in &rows {
        let term = patch_logits.gather_rows(&[r])?.smooth_top1_svm(label, cfg.svm_tau, cfg.svm_alpha)?;
        total = Some(match total {
            Some(t) => t.add(term)?,
            None => term,
        });
    }
    let mean = total.expect("top-k is non-empty").scale(1.0 / rows.len() as f64)?;
    ce.add(mean.scale(cfg.lambda)?)
}

/// Drives the level recursion. `run_level(level, bag, bag_ids)` returns the
/// level's attention logits and class probabilities.
pub fn cascade<F>(pyramid: &FeaturePyramid, cfg: &HagConfig, k_override: Option<usize>, mut run_level: F) -> Result<Inference>
where
    F: FnMut(usize, Tensor, &[usize]) -> Result<(Vec<f64>, Vec<f64>)>,
{
    let levels = cfg.num_levels;
    if pyramid.num_levels() != levels {
        return Err(HagError::InvalidArgument(format!(
            "slide {} has {} levels, model expects {levels}",
            pyramid.slide_id,
            pyramid.num_levels()
        )));
    }
    if k_override == Some(0) {
        return Err(HagError::InvalidArgument("k override must be >= 1".into()));
    }
    let mut bag_ids: Vec<usize> = (0..pyramid.index.count(levels - 1)).collect();
    let mut outs = Vec::with_capacity(levels);
    let mut probs = Vec::new();
    for level in (0..levels).rev() {
        if bag_ids.is_empty() {
            return Err(HagError::Empty("bag"));
        }
        let bag = distill_features(pyramid.level(level)?, &bag_ids)?;
        let (attention, p) = run_level(level, bag, &bag_ids)?;
        let (parents, children) = if level > 0 {
            select_children(&bag_ids, &attention, cfg.budget(level, k_override))?
        } else {
            (Vec::new(), Vec::new())
        };
        probs.clone_from(&p);
        outs.push(LevelOutput {
            level,
            bag_ids: std::mem::replace(&mut bag_ids, children.clone()),
            attention,
            probs: p,
            selected_parent_ids: parents,
            distilled_child_ids: children,
        });
    }
    Ok(Inference { levels: outs, probs })
}

/// One model per level, indexed by level (0 = finest).
#[derive(Clone, Debug)]
pub struct HagModel {
    pub config: HagConfig,
    pub levels: Vec<IatModel>,
}

impl HagModel {
    pub fn new(config: HagConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let levels = (0..config.num_levels)
            .map(|j| IatModel::new(config.model.clone(), substream(seed, 0x1E7E1 + j as u64).next_u64()))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { config, levels })
    }

    fn check_slide(&self, slide: &FeaturePyramid) -> Result<()> {
        if slide.feature_dim() != self.config.model.feature_dim {
            return Err(HagError::ShapeMismatch {
                op: "hag_forward",
                left: vec![slide.feature_dim()],
                right: vec![self.config.model.feature_dim],
            });
        }
        Ok(())
    }

    /// Deterministic inference (dropout off).
    pub fn infer(&self, slide: &FeaturePyramid, k_override: Option<usize>) -> Result<Inference> {
        self.check_slide(slide)?;
        cascade(slide, &self.config, k_override, |level, bag, _| {
            let p = self.levels[level].predict(&bag)?;
            Ok((p.attention, p.probs))
        })
    }

    /// Inference plus each level's loss, for validation.
    pub fn infer_with_loss(&self, slide: &FeaturePyramid) -> Result<(Inference, Vec<f64>)> {
        self.check_slide(slide)?;
        let mut losses = vec![0.0; self.config.num_levels];
        let inf = cascade(slide, &self.config, None, |level, bag, _| {
            let model = &self.levels[level];
            let tape = Tape::new();
            let bound = model.params.bind(&tape);
            let out = model.forward(tape.constant(bag), &bound, None::<&mut HagRng>)?;
            let attention = out.attention.to_tensor().into_data();
            let loss = level_loss(out.bag_logits, &attention, out.patch_logits, slide.label, &self.config, level)?;
            losses[level] = loss.to_tensor().item();
            Ok((attention, out.probs()))
        })?;
        Ok((inf, losses))
    }

    pub fn snapshot(&self) -> Vec<ParamSet> {
        self.levels.iter().map(|m| m.params.clone()).collect()
    }

    pub fn restore(&mut self, snapshot: Vec<ParamSet>) {
        for (m, p) in self.levels.iter_mut().zip(snapshot) {
            m.params = p;
        }
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| HagError::io(dir, e))?;
        let cfg_path = dir.join(RUN_CONFIG_FILE);
        fs::write(&cfg_path, serde_json::to_string_pretty(&self.config)?).map_err(|e| HagError::io(&cfg_path, e))?;
        for (j, m) in self.levels.iter().enumerate() {
            checkpoint::save(&dir.join(format!("level_{j}.ckpt")), &m.params)?;
        }
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let cfg_path = dir.join(RUN_CONFIG_FILE);
        let text = fs::read_to_string(&cfg_path).map_err(|e| HagError::io(&cfg_path, e))?;
        let config: HagConfig = serde_json::from_str(&text)?;
        let mut model = Self::new(config, 0)?;
        for (j, m) in model.levels.iter_mut().enumerate() {
            checkpoint::load_into(&dir.join(format!("level_{j}.ckpt")), &mut m.params)?;
        }
        Ok(model)
    }
}

/// One training step on one level: forward, loss, backward, Adam update.
fn train_level(
    model: &mut IatModel,
    opt: &mut Optimizer,
    cfg: &HagConfig,
    level: usize,
    bag: Tensor,
    label: usize,
    rng: &mut HagRng,
) -> Result<(Vec<f64>, Vec<f64>, f64)> {
    let (grads, attention, probs, loss) = {
        let tape = Tape::new();
        let bound = model.params.bind(&tape);
        let out = model.forward(tape.constant(bag), &bound, Some(rng))?;
        let attention = out.attention.to_tensor().into_data();
        let loss = level_loss(out.bag_logits, &attention, out.patch_logits, label, cfg, level)?;
        let grads = bound.gradients(&tape.backward(loss)?)?;
        (grads, attention, out.probs(), loss.to_tensor().item())
    };
    opt.step(&mut model.params, &grads)?;
    Ok((attention, probs, loss))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    /// Mean loss per level, indexed by level.
    pub train_loss: Vec<f64>,
    pub val_loss: Vec<f64>,
    pub val_auc: Option<f64>,
    pub seconds: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub epochs_run: usize,
    pub best_epoch: usize,
    pub best_val_loss: f64,
    pub log: Vec<EpochLog>,
}

/// Writes one JSON object per line.
pub fn write_log_line<W: Write>(w: &mut W, entry: &EpochLog) -> Result<()> {
    serde_json::to_writer(&mut *w, entry)?;
    w.write_all(b"\n").map_err(|e| HagError::io("<training log>", e))
}

/// Trains every level with per-slide cascaded updates and early stopping on
/// the finest level's validation loss. The best epoch's weights are restored
/// before returning. `on_epoch` sees each log entry as it is produced.
pub fn train<F>(model: &mut HagModel, data: &Dataset, tc: &TrainConfig, mut on_epoch: F) -> Result<TrainReport>
where
    F: FnMut(&EpochLog) -> Result<()>,
{
    if data.train.is_empty() {
        return Err(HagError::Empty("training split"));
    }
    if data.val.is_empty() {
        return Err(HagError::Empty("validation split"));
    }
    for s in data.train.iter().chain(&data.val) {
        model.check_slide(s)?;
    }
    let cfg = model.config.clone();
    let adam = AdamConfig {
        lr: tc.lr,
        weight_decay: tc.weight_decay,
        ..AdamConfig::default()
    };
    let mut opts: Vec<Optimizer> = model.levels.iter().map(|m| Optimizer::new(&m.params, adam)).collect();
    let mut best = (f64::INFINITY, 0usize, model.snapshot());
    let mut stale = 0;
    let mut log = Vec::new();
    for epoch in 0..tc.max_epochs {
        let started = EpochClock::start();
        let mut order: Vec<usize> = (0..data.train.len()).collect();
        order.shuffle(&mut substream(tc.seed, 0x5_0000 + epoch as u64));
        let mut dropout_rng = substream(tc.seed, 0xD_0000 + epoch as u64);
        let mut sums = vec![0.0; cfg.num_levels];
        for &i in &order {
            let slide = &data.train[i];
            let levels = &mut model.levels;
            cascade(slide, &cfg, None, |level, bag, _| {
                let (a, p, loss) = train_level(
                    &mut levels[level],
                    &mut opts[level],
                    &cfg,
                    level,
                    bag,
                    slide.label,
                    &mut dropout_rng,
                )
                .map_err(|e| HagError::Training {
                    slide: slide.slide_id.clone(),
                    level,
                    source: Box::new(e),
                })?;
                sums[level] += loss;
                Ok((a, p))
            })?;
        }
        let train_loss: Vec<f64> = sums.iter().map(|s| s / data.train.len() as f64).collect();

        let val = parallel_map(&data.val, tc.threads, |s| model.infer_with_loss(s))?;
        let mut val_loss = vec![0.0; cfg.num_levels];
        for (_, l) in &val {
            for (acc, v) in val_loss.iter_mut().zip(l) {
                *acc += v;
            }
        }
        val_loss.iter_mut().for_each(|v| *v /= data.val.len() as f64);
        if val_loss.iter().any(|v| !v.is_finite()) {
            return Err(HagError::NonFinite { op: "validation loss" });
        }
        let probs: Vec<Vec<f64>> = val.iter().map(|(inf, _)| inf.probs.clone()).collect();
        let labels: Vec<usize> = data.val.iter().map(|s| s.label).collect();
        let val_auc = auc_macro(&probs, &labels, cfg.model.num_classes).ok().map(|(a, _)| a);
        let entry = EpochLog {
            epoch,
            train_loss,
            val_loss,
            val_auc,
            seconds: started.seconds(),
        };
        on_epoch(&entry)?;
        let finest = entry.val_loss[0];
        log.push(entry);
        if finest < best.0 {
            best = (finest, epoch, model.snapshot());
            stale = 0;
        } else {
            stale += 1;
            if stale >= tc.patience {
                break;
            }
        }
    }
    let (best_val_loss, best_epoch, params) = best;
    model.restore(params);
    Ok(TrainReport {
        epochs_run: log.len(),
        best_epoch,
        best_val_loss,
        log,
    })
}

/// Wall-clock epoch timer; reads zero where the platform has no clock.
struct EpochClock(#[cfg(not(target_arch = "wasm32"))] std::time::Instant);

impl EpochClock {
    #[cfg(not(target_arch = "wasm32"))]
    fn start() -> Self {
        Self(std::time::Instant::now())
    }

    #[cfg(target_arch = "wasm32")]
    fn start() -> Self {
        Self()
    }

    #[cfg(not(target_arch = "wasm32"))]
    fn seconds(&self) -> f64 {
        self.0.elapsed().as_secs_f64()
    }

    #[cfg(target_arch = "wasm32")]
    fn seconds(&self) -> f64 {
        0.0
    }
}

/// Order-preserving map over `items` on up to `threads` scoped threads.
pub fn parallel_map<T, R, F>(items: &[T], threads: usize, f: F) -> Result<Vec<R>>
where
    T: Sync,
    R: Send,
    F: Fn(&T) -> Result<R> + Sync,
{
    let threads = threads.max(1).min(items.len().max(1));
    if threads == 1 {
        return items.iter().map(&f).collect();
    }
    let chunk = items.len().div_ceil(threads);
    let f = &f;
    thread::scope(|scope| {
        let handles: Vec<_> = items
            .chunks(chunk)
            .map(|part| scope.spawn(move || part.iter().map(f).collect::<Result<Vec<R>>>()))
            .collect();
        let mut out = Vec::with_capacity(items.len());
        for h in handles {
            out.extend(h.join().expect("evaluation thread panicked")?);
        }
        Ok(out)
    })
}

/// Per-slide evaluation result.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SlideResult {
    pub slide_id: String,
    pub label: usize,
    pub inference: Inference,
}

pub fn evaluate(model: &HagModel, slides: &[FeaturePyramid], k_override: Option<usize>, threads: usize) -> Result<Vec<SlideResult>> {
    parallel_map(slides, threads, |s| {
        Ok(SlideResult {
            slide_id: s.slide_id.clone(),
            label: s.label,
            inference: model.infer(s, k_override)?,
        })
    })
}

/// Planted-instance recall of the finest bag at its budget:
/// `(planted ids inside the bag, min(bag size, planted ids))`. A bag that
/// holds only planted patches scores full recall even when the lesion is
/// larger than the bag.
pub fn planted_recall(slide: &FeaturePyramid, inference: &Inference) -> (usize, usize) {
    let planted = slide.planted[0].len();
    match inference.level(0) {
        Some(l) => {
            let hits = l.bag_ids.iter().filter(|&&id| slide.is_planted(0, id)).count();
            (hits, planted.min(l.bag_ids.len()))
        }
        None => (0, planted),
    }
}

/// Plain planted-instance recall of the finest bag: `(planted ids inside
/// the bag, planted ids)`. Grows with the selection budget.
pub fn planted_coverage(slide: &FeaturePyramid, inference: &Inference) -> (usize, usize) {
    let planted = slide.planted[0].len();
    let hits = inference
        .level(0)
        .map_or(0, |l| l.bag_ids.iter().filter(|&&id| slide.is_planted(0, id)).count());
    (hits, planted)
}

/// Budgets `7, 1007, …` in steps of 1000, clamped to `max` and deduplicated.
pub fn k_sweep_grid(count: usize, max: usize) -> Vec<usize> {
    let mut ks: Vec<usize> = (0..count).map(|i| (7 + 1000 * i).min(max)).collect();
    ks.dedup();
    ks
}
