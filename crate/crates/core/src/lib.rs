//! Table structure recognition: separation-line regression with dynamic
//! queries, relation-network cell merging, synthetic data, and metrics.
//!
//! Pipeline: a CNN-FPN backbone feeds two axis branches (spatial-CNN
//! enhancement, reference-point detection, progressive line-regression
//! decoder) whose separators intersect into a cell grid; a relation
//! network merges adjacent cells into spanning cells. Training is staged;
//! evaluation reports cell-adjacency F1 and TEDS-Struct.

pub mod config;
pub mod dataset;
pub mod geometry;
pub mod infer;
pub mod losses;
pub mod matching;
pub mod metrics;
pub mod model;
pub mod raster;
pub mod synth;
pub mod train;
