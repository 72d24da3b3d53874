//! Quadtree index over a multi-resolution patch pyramid.
//!
//! Level 0 is the finest resolution; level `num_levels - 1` is the coarsest.
//! Coarsest-level tissue patches are numbered row-major over the coarse grid.
//! Every finer level stores the four children of each retained parent in
//! depth-first (Morton) order, so patch `i` at level `j + 1` owns exactly
//! `4i..4i+3` at level `j`. Child `c` sits at grid offset `(c / 2, c % 2)`
//! inside its parent's 2×2 block.

use serde::{Deserialize, Serialize};

use crate::error::{HagError, Result};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct QuadTreeIndex {
    num_levels: usize,
    coarse_grid: (usize, usize),
    /// Coarse-grid coordinates of each coarsest-level patch, by id.
    roots: Vec<(usize, usize)>,
    counts: Vec<usize>,
    /// `tissue_flags[j][i]` is false when patch `i` at level `j` is background only.
    tissue_flags: Vec<Vec<bool>>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct PatchRef {
    pub level: usize,
    pub id: usize,
    pub coords: (usize, usize),
}

/// Half-open box `[row0, row1) × [col0, col1)` in finest-level patch units.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct BoundingBox {
    pub row0: usize,
    pub col0: usize,
    pub row1: usize,
    pub col1: usize,
}

impl BoundingBox {
    pub fn area(&self) -> usize {
        (self.row1 - self.row0) * (self.col1 - self.col0)
    }

    pub fn intersects(&self, other: &BoundingBox) -> bool {
        self.row0 < other.row1 && other.row0 < self.row1 && self.col0 < other.col1 && other.col0 < self.col1
    }
}

pub fn find_sub_patch_ids(i: usize) -> [usize; 4] {
    [4 * i, 4 * i + 1, 4 * i + 2, 4 * i + 3]
}

/// Positions of the `min(k, len)` largest scores, descending, ties to the
/// lower position.
pub fn top_k_positions(scores: &[f64], k: usize) -> Result<Vec<usize>> {
    if scores.is_empty() {
        return Err(HagError::Empty("attention scores"));
    }
    if k == 0 {
        return Err(HagError::InvalidArgument("k must be >= 1".into()));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    // sort_by is stable, so equal scores keep ascending position order.
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    order.truncate(k.min(scores.len()));
    Ok(order)
}

/// Children at level `j` of the top-`k` patches at level `j + 1`: parents in
/// rank order, each parent's four children ascending.
pub fn find_topk_ids(scores: &[f64], k: usize) -> Result<Vec<usize>> {
    Ok(top_k_positions(scores, k)?.into_iter().flat_map(find_sub_patch_ids).collect())
}

/// Same as [`find_topk_ids`] for a distilled bag whose row `r` holds patch
/// `bag_ids[r]`. Returns `(selected parent ids, child ids)`.
pub fn select_children(bag_ids: &[usize], scores: &[f64], k: usize) -> Result<(Vec<usize>, Vec<usize>)> {
    if bag_ids.len() != scores.len() {
        return Err(HagError::ShapeMismatch {
            op: "select_children",
            left: vec![bag_ids.len()],
            right: vec![scores.len()],
        });
    }
    let parents: Vec<usize> = top_k_positions(scores, k)?.into_iter().map(|r| bag_ids[r]).collect();
    let children = parents.iter().copied().flat_map(find_sub_patch_ids).collect();
    Ok((parents, children))
}

/// Row gather `F[ids]`, preserving id order.
pub fn distill_features(features: &Tensor, ids: &[usize]) -> Result<Tensor> {
    features.gather_rows(ids)
}

impl QuadTreeIndex {
    /// Builds the index from a row-major tissue mask over the coarse grid.
    pub fn build(coarse_grid: (usize, usize), num_levels: usize, tissue_mask: &[bool]) -> Result<Self> {
        let (rows, cols) = coarse_grid;
        if rows * cols == 0 {
            return Err(HagError::InvalidArgument("coarse grid must be non-empty".into()));
        }
        if num_levels == 0 {
            return Err(HagError::InvalidArgument("num_levels must be >= 1".into()));
        }
        if tissue_mask.len() != rows * cols {
            return Err(HagError::ShapeMismatch {
                op: "build_quadtree",
                left: vec![rows, cols],
                right: vec![tissue_mask.len()],
            });
        }
        let roots: Vec<(usize, usize)> = (0..rows * cols).filter(|&i| tissue_mask[i]).map(|i| (i / cols, i % cols)).collect();
        if roots.is_empty() {
            return Err(HagError::Empty("tissue mask"));
        }
        let mut counts = vec![0; num_levels];
        counts[num_levels - 1] = roots.len();
        for j in (0..num_levels - 1).rev() {
            counts[j] = 4 * counts[j + 1];
        }
        let tissue_flags = counts.iter().map(|&n| vec![true; n]).collect();
        Ok(Self {
            num_levels,
            coarse_grid,
            roots,
            counts,
            tissue_flags,
        })
    }

    /// Marks patches as background-only. Their rows stay in the index so the
    /// `4i..4i+3` arithmetic holds.
    pub fn with_background(mut self, level: usize, ids: &[usize]) -> Result<Self> {
        if level >= self.num_levels {
            return Err(HagError::IndexOutOfRange {
                index: level,
                len: self.num_levels,
            });
        }
        for &i in ids {
            let n = self.counts[level];
            let flag = self.tissue_flags[level]
                .get_mut(i)
                .ok_or(HagError::IndexOutOfRange { index: i, len: n })?;
            *flag = false;
        }
        Ok(self)
    }

    pub fn num_levels(&self) -> usize {
        self.num_levels
    }

    pub fn coarsest(&self) -> usize {
        self.num_levels - 1
    }

    pub fn counts(&self) -> &[usize] {
        &self.counts
    }

    pub fn count(&self, level: usize) -> usize {
        self.counts[level]
    }

    pub fn coarse_grid(&self) -> (usize, usize) {
        self.coarse_grid
    }

    /// Grid dimensions at `level`: the coarse grid expanded 2× per finer level.
    pub fn grid_dims(&self, level: usize) -> (usize, usize) {
        let scale = 1 << (self.coarsest() - level);
        (self.coarse_grid.0 * scale, self.coarse_grid.1 * scale)
    }

    pub fn tissue_mask(&self) -> Vec<bool> {
        let (rows, cols) = self.coarse_grid;
        let mut mask = vec![false; rows * cols];
        for &(r, c) in &self.roots {
            mask[r * cols + c] = true;
        }
        mask
    }

    pub fn is_tissue(&self, level: usize, id: usize) -> bool {
        self.tissue_flags[level][id]
    }

    pub fn background_ids(&self, level: usize) -> Vec<usize> {
        (0..self.counts[level]).filter(|&i| !self.tissue_flags[level][i]).collect()
    }

    fn check(&self, level: usize, id: usize) -> Result<()> {
        if level >= self.num_levels {
            return Err(HagError::IndexOutOfRange {
                index: level,
                len: self.num_levels,
            });
        }
        if id >= self.counts[level] {
            return Err(HagError::IndexOutOfRange {
                index: id,
                len: self.counts[level],
            });
        }
        Ok(())
    }

    /// Grid coordinates of patch `id` at `level`.
    pub fn coords(&self, level: usize, id: usize) -> Result<(usize, usize)> {
        self.check(level, id)?;
        let depth = self.coarsest() - level;
        let root = id >> (2 * depth);
        let (mut r, mut c) = self.roots[root];
        for step in (0..depth).rev() {
            let child = (id >> (2 * step)) & 3;
            r = 2 * r + child / 2;
            c = 2 * c + child % 2;
        }
        Ok((r, c))
    }

    pub fn patch_ref(&self, level: usize, id: usize) -> Result<PatchRef> {
        Ok(PatchRef {
            level,
            id,
            coords: self.coords(level, id)?,
        })
    }

    pub fn children(&self, level: usize, id: usize) -> Result<[usize; 4]> {
        self.check(level, id)?;
        if level == 0 {
            return Err(HagError::InvalidArgument("finest level has no children".into()));
        }
        Ok(find_sub_patch_ids(id))
    }

    /// Box covered by `patch` in finest-level units: side `2^level`.
    pub fn resolve_coords(&self, patch: &PatchRef) -> Result<BoundingBox> {
        let expected = self.coords(patch.level, patch.id)?;
        if expected != patch.coords {
            return Err(HagError::InvalidArgument(format!(
                "patch {} at level {} has coords {:?}, not {:?}",
                patch.id, patch.level, expected, patch.coords
            )));
        }
        let side = 1 << patch.level;
        let (r, c) = patch.coords;
        Ok(BoundingBox {
            row0: r * side,
            col0: c * side,
            row1: r * side + side,
            col1: c * side + side,
        })
    }

    /// Ids at `level` whose boxes intersect the given finest-level box.
    pub fn ids_covering(&self, level: usize, bbox: &BoundingBox) -> Vec<usize> {
        (0..self.counts[level])
            .filter(|&i| {
                let p = self.patch_ref(level, i).expect("in range");
                self.resolve_coords(&p).expect("valid").intersects(bbox)
            })
            .collect()
    }
}
