//! In-browser playground: generate synthetic slides, train a small cascade,
//! then inspect attention heatmaps and test metrics under different budgets.
//!
//! [`Session`] holds the logic and is usable natively; [`DemoSession`] is the
//! thin JavaScript-facing wrapper that returns JSON strings.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

use hagmil::data::manifest::DEFAULT_RATIOS;
use hagmil::data::{synth_generate, Dataset, FeaturePyramid, SynthConfig};
use hagmil::heatmap::HeatmapGrid;
use hagmil::iat::IatConfig;
use hagmil::metrics::{classify_metrics, EvalReport, ThresholdMode};
use hagmil::pipeline::{evaluate, planted_coverage, train, EpochLog, HagConfig, HagModel, TrainConfig};
use hagmil::{HagError, Result};
use serde::Serialize;
use wasm_bindgen::prelude::*;

const FEATURE_DIM: usize = 16;
const NUM_SLIDES: usize = 48;

#[derive(Debug, Serialize)]
pub struct TrainSummary {
    pub epochs: Vec<EpochLog>,
    pub total_epochs: usize,
}

#[derive(Debug, Serialize)]
pub struct HeatmapView {
    pub slide_id: String,
    pub label: usize,
    pub prob_positive: f64,
    pub level: usize,
    pub rows: usize,
    pub cols: usize,
    /// Row-major normalized attention; `None` for patches outside the bag.
    pub values: Vec<Option<f64>>,
    /// Row-major planted-lesion mask.
    pub planted: Vec<bool>,
}

#[derive(Debug, Serialize)]
pub struct EvalView {
    pub k: usize,
    pub report: EvalReport,
    /// Fraction of planted finest patches that survive selection.
    pub coverage: Option<f64>,
}

pub fn demo_synth(seed: u64, signal: f64) -> SynthConfig {
    let base = SynthConfig::default();
    SynthConfig {
        num_slides: NUM_SLIDES,
        coarse_grid: (4, 4),
        lesion_count: (1, 1),
        lesion_size: (1, 3),
        signal_strength: base.signal_strength.iter().map(|s| s * signal).collect(),
        feature_dim: FEATURE_DIM,
        seed,
        ..base
    }
}

pub fn demo_model_config() -> HagConfig {
    HagConfig {
        k_per_level: vec![3, 3],
        model: IatConfig {
            iam_dims: vec![16],
            fusion_dim: 16,
            attn_hidden: 8,
            ..HagConfig::desk(FEATURE_DIM).model
        },
        ..HagConfig::desk(FEATURE_DIM)
    }
}

pub struct Session {
    pub data: Dataset,
    pub model: HagModel,
    seed: u64,
    epochs_done: usize,
}

impl Session {
    pub fn new(seed: u64, signal: f64) -> Result<Self> {
        if !(signal >= 0.0) {
            return Err(HagError::Config(format!("signal {signal} must be >= 0")));
        }
        let slides = synth_generate(&demo_synth(seed, signal))?;
        Ok(Self {
            data: Dataset::from_slides(slides, 2, DEFAULT_RATIOS, seed)?,
            model: HagModel::new(demo_model_config(), seed)?,
            seed,
            epochs_done: 0,
        })
    }

    /// Continues training for up to `epochs` more epochs with early stopping.
    pub fn train(&mut self, epochs: usize, lr: f64) -> Result<TrainSummary> {
        let tc = TrainConfig {
            max_epochs: epochs,
            patience: epochs,
            lr,
            seed: self.seed.wrapping_add(self.epochs_done as u64),
            ..TrainConfig::desk(self.seed)
        };
        let report = train(&mut self.model, &self.data, &tc, |_| Ok(()))?;
        self.epochs_done += report.epochs_run;
        Ok(TrainSummary {
            epochs: report.log,
            total_epochs: self.epochs_done,
        })
    }

    pub fn test_slides(&self) -> &[FeaturePyramid] {
        &self.data.test
    }

    /// Attention map of test slide `slide` at `level` with every budget set to `k`.
    pub fn heatmap(&self, slide: usize, level: usize, k: usize) -> Result<HeatmapView> {
        let s = self.data.test.get(slide).ok_or(HagError::IndexOutOfRange {
            index: slide,
            len: self.data.test.len(),
        })?;
        let inference = self.model.infer(s, Some(k.max(1)))?;
        let out = inference.level(level).ok_or(HagError::IndexOutOfRange {
            index: level,
            len: s.num_levels(),
        })?;
        let grid = HeatmapGrid::from_level(out, &s.index)?;
        let mut values = vec![None; grid.rows * grid.cols];
        let mut planted = vec![false; grid.rows * grid.cols];
        for c in &grid.cells {
            let at = c.row * grid.cols + c.col;
            values[at] = c.raw.map(|_| c.normalized);
            planted[at] = s.is_planted(level, c.id);
        }
        Ok(HeatmapView {
            slide_id: s.slide_id.clone(),
            label: s.label,
            prob_positive: inference.probs[1],
            level,
            rows: grid.rows,
            cols: grid.cols,
            values,
            planted,
        })
    }

    /// Test-split metrics with every budget set to `k`.
    pub fn evaluate(&self, k: usize) -> Result<EvalView> {
        let k = k.max(1);
        let results = evaluate(&self.model, &self.data.test, Some(k), 1)?;
        let probs: Vec<Vec<f64>> = results.iter().map(|r| r.inference.probs.clone()).collect();
        let labels: Vec<usize> = results.iter().map(|r| r.label).collect();
        let (hits, total) = self
            .data
            .test
            .iter()
            .zip(&results)
            .map(|(s, r)| planted_coverage(s, &r.inference))
            .fold((0, 0), |(h, t), (a, b)| (h + a, t + b));
        Ok(EvalView {
            k,
            report: classify_metrics(&probs, &labels, ThresholdMode::Youden)?,
            coverage: (total > 0).then(|| hits as f64 / total as f64),
        })
    }
}

fn js_err(e: HagError) -> JsError {
    JsError::new(&e.to_string())
}

fn to_json<T: Serialize>(value: &T) -> std::result::Result<String, JsError> {
    serde_json::to_string(value).map_err(|e| JsError::new(&e.to_string()))
}

#[wasm_bindgen]
pub struct DemoSession {
    inner: Session,
}

#[wasm_bindgen]
impl DemoSession {
    #[wasm_bindgen(constructor)]
    pub fn new(seed: u32, signal: f64) -> std::result::Result<DemoSession, JsError> {
        Session::new(seed as u64, signal).map(|inner| DemoSession { inner }).map_err(js_err)
    }

    #[wasm_bindgen(js_name = testSlideCount)]
    pub fn test_slide_count(&self) -> usize {
        self.inner.test_slides().len()
    }

    #[wasm_bindgen(js_name = testLabels)]
    pub fn test_labels(&self) -> Vec<u32> {
        self.inner.test_slides().iter().map(|s| s.label as u32).collect()
    }

    /// JSON training summary.
    pub fn train(&mut self, epochs: usize, lr: f64) -> std::result::Result<String, JsError> {
        to_json(&self.inner.train(epochs, lr).map_err(js_err)?)
    }

    /// JSON heatmap view.
    pub fn heatmap(&self, slide: usize, level: usize, k: usize) -> std::result::Result<String, JsError> {
        to_json(&self.inner.heatmap(slide, level, k).map_err(js_err)?)
    }

    /// JSON metrics view.
    pub fn evaluate(&self, k: usize) -> std::result::Result<String, JsError> {
        to_json(&self.inner.evaluate(k).map_err(js_err)?)
    }
}
