//! Patch-resolution attention heatmaps as CSV or binary PGM.

use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use crate::error::{HagError, Result};
use crate::pipeline::LevelOutput;
use crate::pyramid::QuadTreeIndex;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum HeatmapFormat {
    Csv,
    Pgm,
}

impl FromStr for HeatmapFormat {
    type Err = HagError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "csv" => Ok(Self::Csv),
            "pgm" => Ok(Self::Pgm),
            other => Err(HagError::Config(format!("unknown heatmap format {other:?} (expected csv|pgm)"))),
        }
    }
}

impl fmt::Display for HeatmapFormat {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Csv => "csv",
            Self::Pgm => "pgm",
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct HeatCell {
    pub id: usize,
    pub row: usize,
    pub col: usize,
    /// Raw attention logit; `None` when the patch never entered the bag.
    pub raw: Option<f64>,
    /// Min-max normalized attention in `[0, 1]`; 0 for pruned patches.
    pub normalized: f64,
    pub background: bool,
}

impl HeatCell {
    pub fn pruned(&self) -> bool {
        self.raw.is_none()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct HeatmapGrid {
    pub level: usize,
    pub rows: usize,
    pub cols: usize,
    /// One cell per indexed patch, by id.
    pub cells: Vec<HeatCell>,
}

impl HeatmapGrid {
    /// Builds the grid for one level. A bag whose logits are all equal
    /// (including a single patch) normalizes to 1 everywhere.
    pub fn from_level(out: &LevelOutput, index: &QuadTreeIndex) -> Result<Self> {
        if out.bag_ids.len() != out.attention.len() {
            return Err(HagError::ShapeMismatch {
                op: "heatmap",
                left: vec![out.bag_ids.len()],
                right: vec![out.attention.len()],
            });
        }
        if out.attention.is_empty() {
            return Err(HagError::Empty("attention"));
        }
        let level = out.level;
        let (rows, cols) = index.grid_dims(level);
        let mut raw = vec![None; index.count(level)];
        for (&id, &a) in out.bag_ids.iter().zip(&out.attention) {
            *raw.get_mut(id).ok_or(HagError::IndexOutOfRange {
                index: id,
                len: index.count(level),
            })? = Some(a);
        }
        let lo = out.attention.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = out.attention.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let cells = raw
            .into_iter()
            .enumerate()
            .map(|(id, r)| {
                let (row, col) = index.coords(level, id)?;
                let normalized = match r {
                    None => 0.0,
                    Some(_) if hi == lo => 1.0,
                    Some(a) => (a - lo) / (hi - lo),
                };
                Ok(HeatCell {
                    id,
                    row,
                    col,
                    raw: r,
                    normalized,
                    background: !index.is_tissue(level, id),
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { level, rows, cols, cells })
    }

    /// Mean normalized value over cells where `pick(id)` holds.
    pub fn mean_where(&self, pick: impl Fn(usize) -> bool) -> Option<f64> {
        let vals: Vec<f64> = self.cells.iter().filter(|c| pick(c.id)).map(|c| c.normalized).collect();
        (!vals.is_empty()).then(|| vals.iter().sum::<f64>() / vals.len() as f64)
    }

    /// 8-bit value of a cell: background and unindexed cells are 0.
    pub fn gray(cell: &HeatCell) -> u8 {
        if cell.background {
            0
        } else {
            (255.0 * cell.normalized).round() as u8
        }
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("level,id,row,col,raw_attention,normalized,pruned,background\n");
        for c in &self.cells {
            let raw = c.raw.map(|r| r.to_string()).unwrap_or_default();
            s.push_str(&format!(
                "{},{},{},{},{},{},{},{}\n",
                self.level,
                c.id,
                c.row,
                c.col,
                raw,
                c.normalized,
                c.pruned(),
                c.background
            ));
        }
        s
    }

    pub fn to_pgm(&self) -> Vec<u8> {
        let mut pixels = vec![0u8; self.rows * self.cols];
        for c in &self.cells {
            pixels[c.row * self.cols + c.col] = Self::gray(c);
        }
        let mut out = format!("P5\n{} {}\n255\n", self.cols, self.rows).into_bytes();
        out.extend(pixels);
        out
    }
}

pub fn export_heatmap(out: &LevelOutput, index: &QuadTreeIndex, format: HeatmapFormat, path: &Path) -> Result<HeatmapGrid> {
    let grid = HeatmapGrid::from_level(out, index)?;
    let bytes = match format {
        HeatmapFormat::Csv => grid.to_csv().into_bytes(),
        HeatmapFormat::Pgm => grid.to_pgm(),
    };
    fs::write(path, bytes).map_err(|e| HagError::io(path, e))?;
    Ok(grid)
}
