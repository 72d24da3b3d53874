//! Dataset manifests, stratified splits and directory layout
//! `<root>/manifest.json` plus `<root>/<slide_id>/level_<j>.hagf`.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::hagf::{read_features, write_features};
use super::{FeaturePyramid, Provenance};
use crate::error::{HagError, Result};
use crate::pyramid::QuadTreeIndex;
use crate::rng::seeded;

pub const MANIFEST_VERSION: u32 = 1;
pub const MANIFEST_FILE: &str = "manifest.json";
pub const DEFAULT_RATIOS: [f64; 3] = [0.6, 0.15, 0.25];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl FromStr for Split {
    type Err = HagError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Self::Train),
            "val" => Ok(Self::Val),
            "test" => Ok(Self::Test),
            other => Err(HagError::Config(format!("unknown split {other:?} (expected train|val|test)"))),
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Train => "train",
            Self::Val => "val",
            Self::Test => "test",
        })
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitAssignment {
    pub train: Vec<String>,
    pub val: Vec<String>,
    pub test: Vec<String>,
}

impl SplitAssignment {
    pub fn ids(&self, split: Split) -> &[String] {
        match split {
            Split::Train => &self.train,
            Split::Val => &self.val,
            Split::Test => &self.test,
        }
    }

    pub fn sizes(&self) -> (usize, usize, usize) {
        (self.train.len(), self.val.len(), self.test.len())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SlideEntry {
    pub slide_id: String,
    pub label: usize,
    /// Paths relative to the dataset root, indexed by level (0 = finest).
    pub files: Vec<String>,
    pub coarse_grid: (usize, usize),
    /// Row-major over the coarse grid.
    pub tissue_mask: Vec<bool>,
    pub provenance: Provenance,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub planted: Vec<Vec<usize>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub version: u32,
    pub num_classes: usize,
    pub num_levels: usize,
    pub feature_dim: usize,
    pub ratios: [f64; 3],
    pub split_seed: u64,
    pub slides: Vec<SlideEntry>,
    pub splits: SplitAssignment,
}

fn check_ratios(ratios: [f64; 3]) -> Result<()> {
    if ratios.iter().any(|r| !(*r > 0.0)) || (ratios.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
        return Err(HagError::Config(format!("split ratios {ratios:?} must be positive and sum to 1")));
    }
    Ok(())
}

/// Largest-remainder apportionment of `n` items by `ratios`.
fn apportion(n: usize, ratios: [f64; 3]) -> [usize; 3] {
    let raw: Vec<f64> = ratios.iter().map(|r| r * n as f64).collect();
    let mut sizes = [0usize; 3];
    for (s, r) in sizes.iter_mut().zip(&raw) {
        *s = r.floor() as usize;
    }
    let mut order = [0, 1, 2];
    order.sort_by(|&a, &b| (raw[b] - raw[b].floor()).total_cmp(&(raw[a] - raw[a].floor())));
    let mut left = n - sizes.iter().sum::<usize>();
    for &i in order.iter().cycle() {
        if left == 0 {
            break;
        }
        sizes[i] += 1;
        left -= 1;
    }
    sizes
}

/// Rounds the class-by-split table `m_c * sizes_k / n` to integers so that
/// every cell is the floor or ceiling of its exact value, row `c` sums to
/// `class_sizes[c]` and column `k` sums to `sizes[k]`.
fn round_table(class_sizes: &[usize], sizes: [usize; 3]) -> Vec<[usize; 3]> {
    let n: usize = class_sizes.iter().sum();
    let mut table: Vec<[usize; 3]> = class_sizes.iter().map(|&m| sizes.map(|s| m * s / n)).collect();
    let rem: Vec<[usize; 3]> = class_sizes.iter().map(|&m| sizes.map(|s| m * s % n)).collect();
    let mut extra = vec![[false; 3]; class_sizes.len()];
    let mut free: Vec<usize> = (0..3).map(|k| sizes[k] - table.iter().map(|r| r[k]).sum::<usize>()).collect();

    // Adds one unit to row `c`, possibly moving other rows' units between
    // columns. Only cells with a fractional exact value may take a unit.
    fn augment(c: usize, rem: &[[usize; 3]], extra: &mut [[bool; 3]], free: &mut [usize], seen: &mut [bool; 3]) -> bool {
        let mut order = [0, 1, 2];
        order.sort_by_key(|&k| std::cmp::Reverse(rem[c][k]));
        for k in order {
            if rem[c][k] == 0 || extra[c][k] || seen[k] {
                continue;
            }
            seen[k] = true;
            if free[k] > 0 {
                free[k] -= 1;
                extra[c][k] = true;
                return true;
            }
            for other in 0..extra.len() {
                if extra[other][k] && augment(other, rem, extra, free, seen) {
                    extra[other][k] = false;
                    extra[c][k] = true;
                    return true;
                }
            }
        }
        false
    }

    for (c, &m) in class_sizes.iter().enumerate() {
        let deficit = m - table[c].iter().sum::<usize>();
        for _ in 0..deficit {
            let found = augment(c, &rem, &mut extra, &mut free, &mut [false; 3]);
            debug_assert!(found, "a consistent rounding always exists");
        }
    }
    for (row, flags) in table.iter_mut().zip(&extra) {
        for k in 0..3 {
            row[k] += flags[k] as usize;
        }
    }
    table
}

/// Seeded, label-stratified split of `(slide_id, label)` pairs.
///
/// Split sizes follow the ratios by largest remainder. Each class then gets
/// the floor or ceiling of its proportional share of every split, so no
/// class deviates from the global proportions by a full slide or more.
/// Members are drawn from a per-class seeded shuffle; each split lists its
/// slides in input order.
pub fn split(slides: &[(String, usize)], ratios: [f64; 3], seed: u64) -> Result<SplitAssignment> {
    check_ratios(ratios)?;
    let sizes = apportion(slides.len(), ratios);
    if sizes.contains(&0) {
        return Err(HagError::Config(format!(
            "{} slides cannot fill all three splits with ratios {ratios:?}",
            slides.len()
        )));
    }
    let mut rng = seeded(seed);
    let max_label = slides.iter().map(|s| s.1).max().unwrap_or(0);
    let members: Vec<Vec<usize>> = (0..=max_label)
        .map(|label| {
            let mut m: Vec<usize> = (0..slides.len()).filter(|&i| slides[i].1 == label).collect();
            m.shuffle(&mut rng);
            m
        })
        .collect();
    let table = round_table(&members.iter().map(Vec::len).collect::<Vec<_>>(), sizes);

    let mut part = vec![0u8; slides.len()];
    for (m, counts) in members.iter().zip(&table) {
        let mut rest = m.as_slice();
        for (k, &count) in counts.iter().enumerate() {
            let (take, tail) = rest.split_at(count);
            for &i in take {
                part[i] = k as u8;
            }
            rest = tail;
        }
    }
    let mut out = SplitAssignment::default();
    for (i, (id, _)) in slides.iter().enumerate() {
        match part[i] {
            0 => out.train.push(id.clone()),
            1 => out.val.push(id.clone()),
            _ => out.test.push(id.clone()),
        }
    }
    Ok(out)
}

impl DatasetManifest {
    pub fn entry(&self, slide_id: &str) -> Result<&SlideEntry> {
        self.slides
            .iter()
            .find(|s| s.slide_id == slide_id)
            .ok_or_else(|| HagError::InvalidArgument(format!("slide {slide_id:?} not in manifest")))
    }

    pub fn load(root: &Path) -> Result<Self> {
        let path = root.join(MANIFEST_FILE);
        let text = fs::read_to_string(&path).map_err(|e| HagError::io(&path, e))?;
        let m: Self = serde_json::from_str(&text)?;
        if m.version != MANIFEST_VERSION {
            return Err(HagError::VersionMismatch {
                found: m.version,
                expected: MANIFEST_VERSION,
            });
        }
        check_ratios(m.ratios)?;
        for s in &m.slides {
            for f in &s.files {
                let p = root.join(f);
                if !p.is_file() {
                    return Err(HagError::io(p, std::io::Error::from(std::io::ErrorKind::NotFound)));
                }
            }
        }
        Ok(m)
    }

    pub fn save(&self, root: &Path) -> Result<()> {
        let path = root.join(MANIFEST_FILE);
        let text = serde_json::to_string_pretty(self)?;
        fs::write(&path, text).map_err(|e| HagError::io(&path, e))
    }

    pub fn load_slide(&self, root: &Path, slide_id: &str) -> Result<FeaturePyramid> {
        let e = self.entry(slide_id)?;
        let index = QuadTreeIndex::build(e.coarse_grid, e.files.len(), &e.tissue_mask)?;
        let levels = e
            .files
            .iter()
            .enumerate()
            .map(|(j, f)| {
                let (h, t) = read_features(&root.join(f))?;
                if h.level as usize != j {
                    return Err(HagError::InvalidArgument(format!("{f}: header level {} != {j}", h.level)));
                }
                Ok(t)
            })
            .collect::<Result<Vec<_>>>()?;
        FeaturePyramid::new(e.slide_id.clone(), e.label, levels, index, e.provenance, e.planted.clone())
    }

    pub fn load_split(&self, root: &Path, which: Split) -> Result<Vec<FeaturePyramid>> {
        self.splits.ids(which).iter().map(|id| self.load_slide(root, id)).collect()
    }
}

fn slide_dir(root: &Path, slide_id: &str) -> PathBuf {
    root.join(slide_id)
}

/// Writes every pyramid plus a manifest with a stratified split.
pub fn write_dataset(
    root: &Path,
    slides: &[FeaturePyramid],
    num_classes: usize,
    ratios: [f64; 3],
    split_seed: u64,
) -> Result<DatasetManifest> {
    let first = slides.first().ok_or(HagError::Empty("dataset"))?;
    let (num_levels, feature_dim) = (first.num_levels(), first.feature_dim());
    let mut entries = Vec::with_capacity(slides.len());
    for s in slides {
        if s.num_levels() != num_levels || s.feature_dim() != feature_dim {
            return Err(HagError::InvalidArgument(format!(
                "slide {} has {} levels of width {}, expected {num_levels} of width {feature_dim}",
                s.slide_id,
                s.num_levels(),
                s.feature_dim()
            )));
        }
        if s.label >= num_classes {
            return Err(HagError::LabelOutOfRange {
                label: s.label,
                classes: num_classes,
            });
        }
        let dir = slide_dir(root, &s.slide_id);
        fs::create_dir_all(&dir).map_err(|e| HagError::io(&dir, e))?;
        let mut files = Vec::with_capacity(num_levels);
        for (j, t) in s.levels.iter().enumerate() {
            let rel = format!("{}/level_{j}.hagf", s.slide_id);
            write_features(&root.join(&rel), j as u32, t)?;
            files.push(rel);
        }
        let planted = if s.planted.iter().all(Vec::is_empty) {
            Vec::new()
        } else {
            s.planted.clone()
        };
        entries.push(SlideEntry {
            slide_id: s.slide_id.clone(),
            label: s.label,
            files,
            coarse_grid: s.index.coarse_grid(),
            tissue_mask: s.index.tissue_mask(),
            provenance: s.provenance,
            planted,
        });
    }
    let pairs: Vec<(String, usize)> = slides.iter().map(|s| (s.slide_id.clone(), s.label)).collect();
    let manifest = DatasetManifest {
        version: MANIFEST_VERSION,
        num_classes,
        num_levels,
        feature_dim,
        ratios,
        split_seed,
        slides: entries,
        splits: split(&pairs, ratios, split_seed)?,
    };
    manifest.save(root)?;
    Ok(manifest)
}

/// Train/val/test pyramids held in memory.
#[derive(Clone, Debug, Default)]
pub struct Dataset {
    pub num_classes: usize,
    pub train: Vec<FeaturePyramid>,
    pub val: Vec<FeaturePyramid>,
    pub test: Vec<FeaturePyramid>,
}

impl Dataset {
    /// Splits in-memory pyramids with the same rule as [`write_dataset`].
    pub fn from_slides(slides: Vec<FeaturePyramid>, num_classes: usize, ratios: [f64; 3], seed: u64) -> Result<Self> {
        let pairs: Vec<(String, usize)> = slides.iter().map(|s| (s.slide_id.clone(), s.label)).collect();
        let assignment = split(&pairs, ratios, seed)?;
        let mut ds = Dataset {
            num_classes,
            ..Dataset::default()
        };
        let mut by_id: std::collections::HashMap<String, FeaturePyramid> = slides.into_iter().map(|s| (s.slide_id.clone(), s)).collect();
        for (which, bucket) in [
            (Split::Train, &mut ds.train),
            (Split::Val, &mut ds.val),
            (Split::Test, &mut ds.test),
        ] {
            for id in assignment.ids(which) {
                bucket.push(
                    by_id
                        .remove(id)
                        .ok_or_else(|| HagError::InvalidArgument(format!("duplicate slide id {id}")))?,
                );
            }
        }
        Ok(ds)
    }

    pub fn split(&self, which: Split) -> &[FeaturePyramid] {
        match which {
            Split::Train => &self.train,
            Split::Val => &self.val,
            Split::Test => &self.test,
        }
    }
}

/// Loads the whole dataset under `root`.
pub fn load_dataset(root: &Path) -> Result<(DatasetManifest, Dataset)> {
    let m = DatasetManifest::load(root)?;
    let ds = Dataset {
        num_classes: m.num_classes,
        train: m.load_split(root, Split::Train)?,
        val: m.load_split(root, Split::Val)?,
        test: m.load_split(root, Split::Test)?,
    };
    Ok((m, ds))
}
