//! Feature pyramids: on-disk format, dataset manifests, splits and the
//! synthetic generator.

pub mod hagf;
pub mod manifest;
pub mod synth;

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{HagError, Result};
use crate::pyramid::QuadTreeIndex;
use crate::tensor::Tensor;

pub use hagf::{read_features, read_header, write_features, HagfHeader};
pub use manifest::{load_dataset, split, write_dataset, Dataset, DatasetManifest, SlideEntry, Split, SplitAssignment};
pub use synth::{synth_generate, SynthConfig};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Provenance {
    #[default]
    Synthetic,
    Ingested,
}

impl fmt::Display for Provenance {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Synthetic => "synthetic",
            Self::Ingested => "ingested",
        })
    }
}

impl FromStr for Provenance {
    type Err = HagError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "synthetic" => Ok(Self::Synthetic),
            "ingested" => Ok(Self::Ingested),
            other => Err(HagError::Config(format!("unknown provenance {other:?}"))),
        }
    }
}

/// All levels of one slide. `levels[0]` is the finest.
#[derive(Clone, Debug, PartialEq)]
pub struct FeaturePyramid {
    pub slide_id: String,
    pub label: usize,
    pub levels: Vec<Tensor>,
    pub index: QuadTreeIndex,
    pub provenance: Provenance,
    /// Ground-truth lesion ids per level; empty for negatives and ingested data.
    pub planted: Vec<Vec<usize>>,
}

impl FeaturePyramid {
    pub fn new(
        slide_id: String,
        label: usize,
        levels: Vec<Tensor>,
        index: QuadTreeIndex,
        provenance: Provenance,
        mut planted: Vec<Vec<usize>>,
    ) -> Result<Self> {
        if levels.len() != index.num_levels() {
            return Err(HagError::InvalidArgument(format!(
                "slide {slide_id}: {} feature levels for a {}-level index",
                levels.len(),
                index.num_levels()
            )));
        }
        let d = levels[0].cols();
        for (j, t) in levels.iter().enumerate() {
            if t.rows() != index.count(j) || t.cols() != d {
                return Err(HagError::ShapeMismatch {
                    op: "feature_pyramid",
                    left: t.shape().to_vec(),
                    right: vec![index.count(j), d],
                });
            }
        }
        if planted.is_empty() {
            planted = vec![Vec::new(); levels.len()];
        }
        if planted.len() != levels.len() {
            return Err(HagError::InvalidArgument(format!(
                "slide {slide_id}: planted ids need one list per level"
            )));
        }
        for (j, ids) in planted.iter_mut().enumerate() {
            ids.sort_unstable();
            ids.dedup();
            if let Some(&bad) = ids.iter().find(|&&i| i >= index.count(j)) {
                return Err(HagError::IndexOutOfRange {
                    index: bad,
                    len: index.count(j),
                });
            }
        }
        Ok(Self {
            slide_id,
            label,
            levels,
            index,
            provenance,
            planted,
        })
    }

    pub fn num_levels(&self) -> usize {
        self.levels.len()
    }

    pub fn feature_dim(&self) -> usize {
        self.levels[0].cols()
    }

    pub fn level(&self, j: usize) -> Result<&Tensor> {
        self.levels.get(j).ok_or(HagError::IndexOutOfRange {
            index: j,
            len: self.levels.len(),
        })
    }

    pub fn is_planted(&self, level: usize, id: usize) -> bool {
        self.planted.get(level).is_some_and(|ids| ids.binary_search(&id).is_ok())
    }
}
