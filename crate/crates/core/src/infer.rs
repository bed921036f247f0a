//! Inference pipeline and dataset evaluation.
//!
//! An image is rescaled (longer side to the configured size, aspect kept),
//! padded to /32, run through both axis branches, separators are pruned
//! and intersected into a grid, the merger resolves spanning cells, and
//! everything is mapped back to original pixel coordinates.

use crate::config::RunConfig;
use crate::geometry::{
    adjacency_pairs, build_grid, resolve_merges, sort_and_prune_separators, Axis, FinalCell,
    Point2D, Polyline, Quad, Separator, SeparatorSet, TableGrid,
};
use crate::metrics::{
    cell_adjacency_metric, table_tree, teds_struct, EvalReport, EvalTable, IouEntry, MatchMode,
    PrecisionRecall,
};
use crate::model::refdet::nms_and_select;
use crate::model::{AxisBranch, ModelError, TsrModel};
use crate::raster::GrayImage;
use crate::synth::AnnotatedSample;
use crate::train::{swap_separator_axes, x_tau_feature};
#[cfg(feature = "parallel")]
use rayon::prelude::*;
use tsrlab_nn::{NodeId, Tape};

pub struct InferOutput {
    pub grid: TableGrid,
    pub row_seps: SeparatorSet,
    pub col_seps: SeparatorSet,
    /// Merge probabilities per adjacency pair of the basic grid.
    pub merge_scores: Vec<f64>,
}

fn scale_polyline(l: &Polyline, sx: f64, sy: f64) -> Polyline {
    Polyline {
        points: l.points.iter().map(|p| Point2D::new(p.x * sx, p.y * sy)).collect(),
        axis: l.axis,
    }
}

fn scale_quad(q: &Quad, sx: f64, sy: f64) -> Quad {
    Quad(q.corners().map(|p| Point2D::new(p.x * sx, p.y * sy)))
}

fn scale_sep(s: &Separator, sx: f64, sy: f64) -> Separator {
    Separator {
        center: scale_polyline(&s.center, sx, sy),
        top: scale_polyline(&s.top, sx, sy),
        bottom: scale_polyline(&s.bottom, sx, sy),
        confidence: s.confidence,
    }
}

fn scale_grid(g: &TableGrid, sx: f64, sy: f64) -> TableGrid {
    TableGrid {
        n_rows: g.n_rows,
        n_cols: g.n_cols,
        cell_boxes: g.cell_boxes.iter().map(|q| scale_quad(q, sx, sy)).collect(),
        shrunk_boxes: g.shrunk_boxes.iter().map(|q| scale_quad(q, sx, sy)).collect(),
        merge_map: g.merge_map.clone(),
        final_cells: g
            .final_cells
            .iter()
            .map(|c| FinalCell { quad: scale_quad(&c.quad, sx, sy), ..*c })
            .collect(),
    }
}

fn branch_separators(
    t: &mut Tape,
    model: &TsrModel,
    branch: &AxisBranch,
    p2_axis: NodeId,
    frame: (usize, usize),
) -> Result<Vec<Separator>, ModelError> {
    let (wpar, hcross) = frame;
    let e = branch.scnn.forward(t, &model.store, p2_axis);
    let e1 = branch.proj_ref.forward(t, &model.store, e);
    let scores = branch.ref_head.score_reference_column(t, &model.store, e1, x_tau_feature(wpar))?;
    let score_vals = t.value(scores).data().to_vec();
    let selected = nms_and_select(
        &score_vals,
        model.config.nms_window,
        model.config.top_k,
        model.config.score_threshold,
    );
    let refs: Vec<usize> = selected.iter().map(|&(i, _)| i).collect();
    if refs.is_empty() {
        return Ok(Vec::new());
    }
    let e2 = branch.proj_attn.forward(t, &model.store, e);
    let decode =
        branch.decoder.decode(t, &model.store, e2, &refs, (wpar as f64, hcross as f64), None);
    Ok(branch.decoder.final_separators(t, &decode, model.config.class_threshold))
}

/// Run the full pipeline. Output geometry is in original image pixels.
pub fn infer_table(
    model: &TsrModel,
    image: &GrayImage,
    test_longer_side: usize,
) -> Result<InferOutput, ModelError> {
    let (w, h) = (image.w, image.h);
    let s = test_longer_side as f64 / w.max(h) as f64;
    let nw = ((w as f64 * s).round() as usize).max(32);
    let nh = ((h as f64 * s).round() as usize).max(32);
    let (sx, sy) = (nw as f64 / w as f64, nh as f64 / h as f64);
    let pw = nw.div_ceil(32) * 32;
    let ph = nh.div_ceil(32) * 32;
    let resized = image.resize(nw, nh).pad_to(pw, ph);

    let mut t = Tape::new();
    let img = t.constant(crate::model::backbone::image_to_tensor(&resized));
    let p2 = model.backbone.forward(&mut t, &model.store, img)?;

    let rows_raw = branch_separators(&mut t, model, &model.row_branch, p2, (pw, ph))?;
    let p2_t = t.transpose_hw(p2);
    let cols_raw_t = branch_separators(&mut t, model, &model.col_branch, p2_t, (ph, pw))?;
    let cols_raw: Vec<Separator> = cols_raw_t.iter().map(swap_separator_axes).collect();

    let row_seps = sort_and_prune_separators(rows_raw, Axis::Row, pw as f64);
    let col_seps = sort_and_prune_separators(cols_raw, Axis::Column, ph as f64);
    let grid_basic = build_grid(&row_seps, &col_seps, (pw, ph)).map_err(|_| {
        // pruning guarantees non-crossing; only degenerate sizes remain
        ModelError::BadInputSize(pw, ph)
    })?;

    let pairs = adjacency_pairs(&grid_basic);
    let (grid, merge_scores) = if pairs.is_empty() {
        (grid_basic.clone(), Vec::new())
    } else {
        let feats =
            model.merger.roi_cell_features(&mut t, &model.store, p2, &grid_basic.shrunk_boxes);
        let (n, m) = (grid_basic.n_rows, grid_basic.n_cols);
        let c = model.config.cell_dim;
        let as_map = t.reshape(feats, &[1, n * m, c]);
        let tr = t.transpose_hw(as_map);
        let f_cell = t.reshape(tr, &[c, n, m]);
        let enhanced = model.merger.grid_feature_enhance(&mut t, &model.store, f_cell);
        let spatial: Vec<[f64; crate::model::merger::SPATIAL_FEATURES]> = pairs
            .iter()
            .map(|&(a, b)| {
                crate::model::merger::spatial_compat_features(
                    grid_basic.cell_box(a.0, a.1),
                    grid_basic.cell_box(b.0, b.1),
                    (pw as f64, ph as f64),
                    a.0 == b.0,
                )
            })
            .collect();
        let (scores, _) =
            model.merger.classify_pairs(&mut t, &model.store, enhanced, &pairs, &spatial);
        let score_vals = t.value(scores).data().to_vec();
        let decisions: Vec<(((usize, usize), (usize, usize)), bool)> =
            pairs.iter().zip(&score_vals).map(|(&p, &s)| (p, s > 0.5)).collect();
        (resolve_merges(&grid_basic, &decisions), score_vals)
    };

    // back to original pixels; the padded margin clamps to the image rect
    let (ux, uy) = (1.0 / sx, 1.0 / sy);
    let clamp_grid = |g: &TableGrid| -> TableGrid {
        let mut out = g.clone();
        let fix = |q: &mut Quad| {
            for p in &mut q.0 {
                p.x = p.x.clamp(0.0, w as f64);
                p.y = p.y.clamp(0.0, h as f64);
            }
        };
        out.cell_boxes.iter_mut().for_each(&fix);
        out.shrunk_boxes.iter_mut().for_each(&fix);
        for c in &mut out.final_cells {
            fix(&mut c.quad);
        }
        out
    };
    let clamp_sep = |s: Separator| -> Separator {
        let fix = |l: Polyline| -> Polyline {
            Polyline {
                points: l
                    .points
                    .into_iter()
                    .map(|p| Point2D::new(p.x.clamp(0.0, w as f64), p.y.clamp(0.0, h as f64)))
                    .collect(),
                axis: l.axis,
            }
        };
        Separator {
            center: fix(s.center),
            top: fix(s.top),
            bottom: fix(s.bottom),
            confidence: s.confidence,
        }
    };
    Ok(InferOutput {
        grid: clamp_grid(&scale_grid(&grid, ux, uy)),
        row_seps: SeparatorSet {
            axis: Axis::Row,
            separators: row_seps
                .separators
                .iter()
                .map(|sp| clamp_sep(scale_sep(sp, ux, uy)))
                .collect(),
        },
        col_seps: SeparatorSet {
            axis: Axis::Column,
            separators: col_seps
                .separators
                .iter()
                .map(|sp| clamp_sep(scale_sep(sp, ux, uy)))
                .collect(),
        },
        merge_scores,
    })
}

/// Per-sample evaluation pieces, aggregated micro-style over a dataset.
struct SampleEval {
    per_iou: Vec<PrecisionRecall>,
    content: PrecisionRecall,
    teds: f64,
}

fn eval_one(
    model: &TsrModel,
    sample: &AnnotatedSample,
    limitation: f64,
    ious: &[f64],
    test_longer_side: usize,
) -> Result<SampleEval, ModelError> {
    let out = infer_table(model, &sample.image, test_longer_side)?;
    let texts: Vec<Quad> = sample.text_boxes.iter().map(|t| t.quad).collect();
    let pred = EvalTable::from_grid(&out.grid, &texts, limitation);
    let owned: Vec<(usize, usize)> =
        sample.text_boxes.iter().enumerate().map(|(ti, t)| (ti, t.cell)).collect();
    let gt = EvalTable::from_grid_with_content(&sample.gt_grid, &owned);
    let per_iou = ious
        .iter()
        .map(|&thr| cell_adjacency_metric(&pred, &gt, MatchMode::Iou, thr, &texts, &texts))
        .collect();
    let content = cell_adjacency_metric(&pred, &gt, MatchMode::Content, 0.0, &texts, &texts);
    let teds = teds_struct(&table_tree(&out.grid), &table_tree(&sample.gt_grid));
    Ok(SampleEval { per_iou, content, teds })
}

/// Evaluate a model over samples: cell adjacency P/R/F1 at each IoU
/// threshold (micro-averaged), the cTDaR weighted-average F1, the
/// content-equality scores, and mean TEDS-Struct.
pub fn evaluate(
    model: &TsrModel,
    samples: &[AnnotatedSample],
    limitation: f64,
    ious: &[f64],
    run: &RunConfig,
) -> Result<EvalReport, ModelError> {
    let evals: Vec<SampleEval> = {
        #[cfg(feature = "parallel")]
        {
            samples
                .par_iter()
                .map(|s| eval_one(model, s, limitation, ious, run.schedule.test_longer_side))
                .collect::<Result<_, _>>()?
        }
        #[cfg(not(feature = "parallel"))]
        {
            samples
                .iter()
                .map(|s| eval_one(model, s, limitation, ious, run.schedule.test_longer_side))
                .collect::<Result<_, _>>()?
        }
    };
    let micro = |take: &dyn Fn(&SampleEval) -> PrecisionRecall| -> PrecisionRecall {
        let (mut c, mut p, mut e) = (0usize, 0usize, 0usize);
        for ev in &evals {
            let m = take(ev);
            c += m.correct;
            p += m.predicted;
            e += m.expected;
        }
        let precision = if p == 0 { 0.0 } else { c as f64 / p as f64 };
        let recall = if e == 0 {
            if p == 0 {
                1.0
            } else {
                0.0
            }
        } else {
            c as f64 / e as f64
        };
        let f1 = if precision + recall <= 0.0 {
            0.0
        } else {
            2.0 * precision * recall / (precision + recall)
        };
        PrecisionRecall { precision, recall, f1, correct: c, predicted: p, expected: e }
    };
    let per_iou: Vec<IouEntry> = ious
        .iter()
        .enumerate()
        .map(|(i, &iou)| {
            let m = micro(&|ev: &SampleEval| ev.per_iou[i]);
            IouEntry { iou, precision: m.precision, recall: m.recall, f1: m.f1 }
        })
        .collect();
    let content = micro(&|ev: &SampleEval| ev.content);
    let teds: Vec<f64> = evals.iter().map(|e| e.teds).collect();
    let teds_mean = if teds.is_empty() { 0.0 } else { teds.iter().sum::<f64>() / teds.len() as f64 };
    Ok(EvalReport {
        samples: samples.len(),
        limitation_threshold: limitation,
        weighted_avg_f1: EvalReport::weighted_avg(&per_iou),
        per_iou,
        teds_struct_mean: teds_mean,
        teds_struct_per_sample: teds,
        content_precision: content.precision,
        content_recall: content.recall,
        content_f1: content.f1,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;

    fn tiny_model() -> TsrModel {
        TsrModel::new(
            ModelConfig {
                stem_channels: 4,
                stage_channels: [4, 6, 8, 8],
                blocks_per_stage: 1,
                p2_channels: 8,
                highres_channels: 8,
                dim: 16,
                heads: 2,
                ffn_dim: 32,
                cell_dim: 16,
                sampling_points: 2,
                ..ModelConfig::desk()
            },
            21,
        )
        .unwrap()
    }

    #[test]
    fn blank_image_yields_single_cell() {
        // untrained model with a high class threshold: no separators pass,
        // so the grid is the whole image
        let mut model = tiny_model();
        model.config.class_threshold = 1.01;
        let img = GrayImage::white(120, 90);
        let out = infer_table(&model, &img, 128).unwrap();
        assert_eq!((out.grid.n_rows, out.grid.n_cols), (1, 1));
        assert_eq!(out.grid.final_cells.len(), 1);
        let (x0, y0, x1, y1) = out.grid.final_cells[0].quad.bbox();
        assert!((x0 - 0.0).abs() < 1e-6 && (y0 - 0.0).abs() < 1e-6);
        // output geometry is clamped to the original image rect
        assert!((x1 - 120.0).abs() < 1e-6 && (y1 - 90.0).abs() < 1e-6, "{x1} {y1}");
    }

    #[test]
    fn rescaling_roundtrip_keeps_coordinates() {
        // run the same blank image at two test scales: the output grid is
        // expressed in original coordinates both times
        let mut model = tiny_model();
        model.config.class_threshold = 1.01;
        let img = GrayImage::white(100, 80);
        let a = infer_table(&model, &img, 128).unwrap();
        let b = infer_table(&model, &img, 256).unwrap();
        let (ax0, ay0, ax1, ay1) = a.grid.final_cells[0].quad.bbox();
        let (bx0, by0, bx1, by1) = b.grid.final_cells[0].quad.bbox();
        assert!((ax0 - bx0).abs() < 1e-6 && (ay0 - by0).abs() < 1e-6);
        assert!((ax1 - bx1).abs() < 1e-6 && (ay1 - by1).abs() < 1e-6);
    }
}
