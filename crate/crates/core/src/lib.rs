//! Hierarchical attention-guided multiple instance learning.
//!
//! Per-level transformer models read multi-resolution feature pyramids from
//! the coarsest level down. At each level the top-scoring patches pick which
//! quadtree children the next finer model sees, so bag size stays bounded
//! while the finest level keeps full detail.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod aggregation;
pub mod attention;
pub mod autodiff;
mod binio;
pub mod checkpoint;
pub mod data;
pub mod error;
pub mod heatmap;
pub mod iat;
pub mod metrics;
pub mod ops;
pub mod optim;
pub mod params;
pub mod pipeline;
pub mod pyramid;
pub mod rng;
pub mod tensor;

pub use error::{HagError, Result};
pub use tensor::Tensor;
