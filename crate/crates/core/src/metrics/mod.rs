//! Evaluation metrics: cell adjacency relationships and TEDS-Struct.

pub mod adjacency;
pub mod teds;

pub use adjacency::{
    assign_text_to_cells, cell_adjacency_metric, convex_hull, polygon_area, polygon_iou,
    EvalCell, EvalTable, MatchMode, PrecisionRecall,
};
pub use teds::{table_tree, teds_struct, tree_edit_distance, NodeLabel, Tree};

use serde::{Deserialize, Serialize};

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct IouEntry {
    pub iou: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

/// Aggregate evaluation result for a dataset.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct EvalReport {
    pub samples: usize,
    pub limitation_threshold: f64,
    pub per_iou: Vec<IouEntry>,
    /// cTDaR aggregation: sum(iou * f1) / sum(iou).
    pub weighted_avg_f1: f64,
    pub teds_struct_mean: f64,
    pub teds_struct_per_sample: Vec<f64>,
    /// Content-equality mode scores (SciTSR-style).
    pub content_precision: f64,
    pub content_recall: f64,
    pub content_f1: f64,
}

impl EvalReport {
    pub fn weighted_avg(per_iou: &[IouEntry]) -> f64 {
        let wsum: f64 = per_iou.iter().map(|e| e.iou).sum();
        if wsum <= 0.0 {
            return 0.0;
        }
        per_iou.iter().map(|e| e.iou * e.f1).sum::<f64>() / wsum
    }
}
