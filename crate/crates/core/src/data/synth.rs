//! Synthetic multi-resolution bags with planted lesions.
//!
//! Finest-level features are isotropic Gaussian noise around the origin.
//! Each coarser feature is the mean of its four children plus a small amount
//! of fresh noise, so the pyramid is content-consistent. Positive slides get
//! one to a few contiguous lesions on the coarse grid. A lesion covers its
//! coarse patches completely: every descendant at every level is planted
//! and shifted along a fixed unit direction per class, scaled per level.

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::hagf::round_f32;
use super::{FeaturePyramid, Provenance};
use crate::error::{HagError, Result};
use crate::pyramid::{find_sub_patch_ids, QuadTreeIndex};
use crate::rng::{substream, HagRng};
use crate::tensor::Tensor;

const LABEL_STREAM: u64 = 0xA11_0CA7E;
const DIRECTION_STREAM: u64 = 0xD1_8EC7;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub num_slides: usize,
    pub class_count: usize,
    pub coarse_grid: (usize, usize),
    pub num_levels: usize,
    /// Fraction of slides with a nonzero label.
    pub tumor_rate: f64,
    /// Inclusive range for the number of separate lesions.
    pub lesion_count: (usize, usize),
    /// Inclusive range for the size of each lesion, in coarse patches.
    pub lesion_size: (usize, usize),
    /// Mean shift per level, ordered coarsest first.
    pub signal_strength: Vec<f64>,
    pub noise_sigma: f64,
    /// Fresh noise added on top of the child mean at coarser levels.
    pub coarse_noise_sigma: f64,
    pub feature_dim: usize,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            num_slides: 200,
            class_count: 2,
            coarse_grid: (8, 8),
            num_levels: 3,
            tumor_rate: 0.5,
            lesion_count: (1, 2),
            lesion_size: (1, 4),
            signal_strength: vec![0.5, 1.0, 2.0],
            noise_sigma: 1.0,
            coarse_noise_sigma: 0.25,
            feature_dim: 64,
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(HagError::Config(m));
        let cells = self.coarse_grid.0 * self.coarse_grid.1;
        if self.num_slides == 0 || cells == 0 || self.feature_dim == 0 || self.num_levels == 0 {
            return bad("num_slides, coarse_grid, feature_dim and num_levels must be positive".into());
        }
        if self.class_count < 2 {
            return bad(format!("class_count {} < 2", self.class_count));
        }
        if !(0.0..=1.0).contains(&self.tumor_rate) {
            return bad(format!("tumor_rate {} outside [0, 1]", self.tumor_rate));
        }
        let (c0, c1) = self.lesion_count;
        let (s0, s1) = self.lesion_size;
        if c0 == 0 || c0 > c1 || s0 == 0 || s0 > s1 {
            return bad("lesion ranges must be non-empty and start at >= 1".into());
        }
        if s1 * c1 > cells {
            return bad(format!("{c1} lesions of {s1} patches do not fit the {cells}-patch grid"));
        }
        if self.signal_strength.len() != self.num_levels {
            return bad(format!(
                "signal_strength has {} entries for {} levels",
                self.signal_strength.len(),
                self.num_levels
            ));
        }
        if self.signal_strength.iter().any(|s| !(s.is_finite() && *s >= 0.0)) {
            return bad("signal_strength must be finite and >= 0".into());
        }
        if self.signal_strength.windows(2).any(|w| w[0] > w[1]) {
            return bad("signal_strength must not increase toward coarser levels".into());
        }
        if !(self.noise_sigma >= 0.0 && self.coarse_noise_sigma >= 0.0) {
            return bad("noise levels must be >= 0".into());
        }
        Ok(())
    }

    /// Shift magnitude at `level` (0 = finest).
    pub fn signal_at(&self, level: usize) -> f64 {
        self.signal_strength[self.num_levels - 1 - level]
    }
}

fn unit_direction(rng: &mut HagRng, d: usize) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..d).map(|_| rng.sample(StandardNormal)).collect();
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 1e-6 {
            return v.into_iter().map(|x| x / norm).collect();
        }
    }
}

/// Class-specific unit directions; class 0 has none.
pub fn class_directions(cfg: &SynthConfig) -> Vec<Vec<f64>> {
    let mut rng = substream(cfg.seed, DIRECTION_STREAM);
    (0..cfg.class_count)
        .map(|c| {
            if c == 0 {
                vec![0.0; cfg.feature_dim]
            } else {
                unit_direction(&mut rng, cfg.feature_dim)
            }
        })
        .collect()
}

fn slide_labels(cfg: &SynthConfig) -> Vec<usize> {
    let positives = (cfg.num_slides as f64 * cfg.tumor_rate).round() as usize;
    let mut labels: Vec<usize> = (0..cfg.num_slides)
        .map(|i| if i < positives { 1 + i % (cfg.class_count - 1) } else { 0 })
        .collect();
    labels.shuffle(&mut substream(cfg.seed, LABEL_STREAM));
    labels
}

/// Grows contiguous 4-connected regions on the coarse grid, disjoint from
/// each other. Starts over whenever a region gets boxed in. Returns sorted
/// row-major cell indices.
fn grow_lesions(rng: &mut HagRng, grid: (usize, usize), sizes: &[usize]) -> Vec<usize> {
    'restart: loop {
        let mut taken = vec![false; grid.0 * grid.1];
        let mut cells = Vec::new();
        for &size in sizes {
            match grow_region(rng, grid, &taken, size) {
                Some(region) => {
                    for &c in &region {
                        taken[c] = true;
                    }
                    cells.extend(region);
                }
                None => continue 'restart,
            }
        }
        cells.sort_unstable();
        return cells;
    }
}

fn grow_region(rng: &mut HagRng, grid: (usize, usize), taken: &[bool], size: usize) -> Option<Vec<usize>> {
    let (rows, cols) = grid;
    let free: Vec<usize> = (0..rows * cols).filter(|&c| !taken[c]).collect();
    let mut region = vec![*free.choose(rng)?];
    while region.len() < size {
        let mut frontier: Vec<usize> = Vec::new();
        for &c in &region {
            let (r, k) = (c / cols, c % cols);
            let near = [
                (r > 0).then(|| c - cols),
                (r + 1 < rows).then(|| c + cols),
                (k > 0).then(|| c - 1),
                (k + 1 < cols).then(|| c + 1),
            ];
            for n in near.into_iter().flatten() {
                if !taken[n] && !region.contains(&n) && !frontier.contains(&n) {
                    frontier.push(n);
                }
            }
        }
        region.push(*frontier.choose(rng)?);
    }
    Some(region)
}

/// Planted ids per level: the touched coarsest-level ids and all their
/// descendants.
fn plant(num_levels: usize, touched: &[usize]) -> Vec<Vec<usize>> {
    let mut planted = vec![Vec::new(); num_levels];
    planted[num_levels - 1] = touched.to_vec();
    for level in (0..num_levels - 1).rev() {
        let mut ids: Vec<usize> = planted[level + 1].iter().flat_map(|&p| find_sub_patch_ids(p)).collect();
        ids.sort_unstable();
        planted[level] = ids;
    }
    planted
}

fn generate_slide(cfg: &SynthConfig, index: usize, label: usize, direction: &[f64]) -> Result<FeaturePyramid> {
    let mut rng = substream(cfg.seed, index as u64 + 1);
    let cells = cfg.coarse_grid.0 * cfg.coarse_grid.1;
    let qt = QuadTreeIndex::build(cfg.coarse_grid, cfg.num_levels, &vec![true; cells])?;
    let planted = if label == 0 {
        vec![Vec::new(); cfg.num_levels]
    } else {
        let count = rng.gen_range(cfg.lesion_count.0..=cfg.lesion_count.1);
        let sizes: Vec<usize> = (0..count).map(|_| rng.gen_range(cfg.lesion_size.0..=cfg.lesion_size.1)).collect();
        let touched = grow_lesions(&mut rng, cfg.coarse_grid, &sizes);
        plant(cfg.num_levels, &touched)
    };

    let d = cfg.feature_dim;
    let mut levels: Vec<Tensor> = Vec::with_capacity(cfg.num_levels);
    for level in 0..cfg.num_levels {
        let n = qt.count(level);
        let mut data = vec![0.0; n * d];
        let (sigma, shift) = if level == 0 {
            (cfg.noise_sigma, cfg.signal_at(0))
        } else {
            (cfg.coarse_noise_sigma, cfg.signal_at(level))
        };
        for i in 0..n {
            let row = &mut data[i * d..(i + 1) * d];
            if level > 0 {
                let finer = &levels[level - 1];
                for child in find_sub_patch_ids(i) {
                    for (x, c) in row.iter_mut().zip(finer.row(child)) {
                        *x += 0.25 * c;
                    }
                }
            }
            for x in row.iter_mut() {
                *x += sigma * rng.sample::<f64, _>(StandardNormal);
            }
            if planted[level].binary_search(&i).is_ok() {
                for (x, u) in row.iter_mut().zip(direction) {
                    *x += shift * u;
                }
            }
            for x in row.iter_mut() {
                *x = round_f32(*x);
            }
        }
        levels.push(Tensor::matrix(n, d, data)?);
    }
    FeaturePyramid::new(format!("slide_{index:04}"), label, levels, qt, Provenance::Synthetic, planted)
}

/// Generates `cfg.num_slides` pyramids. Deterministic in `cfg`.
pub fn synth_generate(cfg: &SynthConfig) -> Result<Vec<FeaturePyramid>> {
    cfg.validate()?;
    let labels = slide_labels(cfg);
    let dirs = class_directions(cfg);
    labels
        .iter()
        .enumerate()
        .map(|(i, &y)| generate_slide(cfg, i, y, &dirs[y]))
        .collect()
}
