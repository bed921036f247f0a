//! Staged training: (1) reference-point detection, (2) + separation-line
//! regression, (3) + cell merging. AdamW with polynomial decay,
//! multi-scale augmentation, OHEM pair sampling, per-stage checkpoints and
//! a CSV-able loss log. Batches are processed sample-parallel, each on its
//! own tape against the shared immutable parameters.

use crate::config::{save_checkpoint, RunConfig};
use crate::geometry::{
    adjacency_pairs, build_grid, resolve_merges, Axis, Point2D, Polyline, Separator, SeparatorSet,
    TableGrid,
};
use crate::losses::{LossComponents, LossConfig, Stage, PROB_EPS};
use crate::matching::{original_detr_match, prior_enhanced_match, GtBand, MatchingMode};
use crate::model::refdet::nms_and_select;
use crate::model::{AxisBranch, ModelError, TsrModel};
use crate::synth::AnnotatedSample;
use rand::rngs::StdRng;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
#[cfg(feature = "parallel")]
use rayon::prelude::*;
use std::collections::HashMap;
use std::path::PathBuf;
use thiserror::Error;
use tsrlab_nn::{poly_lr, AdamW, AdamWConfig, NodeId, ParamId, Tape, Tensor};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("dataset is empty")]
    EmptyDataset,
    #[error("model error: {0}")]
    Model(#[from] ModelError),
    #[error("loss diverged (NaN/inf) at stage {stage} step {step}")]
    Diverged { stage: u8, step: usize },
    #[error("checkpoint error: {0}")]
    Checkpoint(#[from] crate::config::ConfigError),
}

/// A training view of a sample: rescaled, padded to /32, ground truth in
/// the padded frame.
pub struct WorkSample {
    pub image: Tensor,
    /// Padded frame (W, H).
    pub frame: (usize, usize),
    pub row_seps: Vec<Separator>,
    /// Column separators already swapped into the transposed frame.
    pub col_seps_t: Vec<Separator>,
    pub grid_basic: TableGrid,
    pub grid_final: TableGrid,
}

fn scale_polyline(l: &Polyline, sx: f64, sy: f64) -> Polyline {
    Polyline {
        points: l.points.iter().map(|p| Point2D::new(p.x * sx, p.y * sy)).collect(),
        axis: l.axis,
    }
}

fn scale_separator(s: &Separator, sx: f64, sy: f64) -> Separator {
    Separator {
        center: scale_polyline(&s.center, sx, sy),
        top: scale_polyline(&s.top, sx, sy),
        bottom: scale_polyline(&s.bottom, sx, sy),
        confidence: s.confidence,
    }
}

pub fn swap_polyline_axes(l: &Polyline) -> Polyline {
    Polyline {
        points: l.points.iter().map(|p| Point2D::new(p.y, p.x)).collect(),
        axis: match l.axis {
            Axis::Row => Axis::Column,
            Axis::Column => Axis::Row,
        },
    }
}

pub fn swap_separator_axes(s: &Separator) -> Separator {
    Separator {
        center: swap_polyline_axes(&s.center),
        top: swap_polyline_axes(&s.top),
        bottom: swap_polyline_axes(&s.bottom),
        confidence: s.confidence,
    }
}

/// Merge decisions that reproduce a grid's final-cell structure.
fn merge_decisions_of(grid: &TableGrid) -> Vec<(((usize, usize), (usize, usize)), bool)> {
    adjacency_pairs(grid)
        .into_iter()
        .map(|(a, b)| ((a, b), grid.final_id(a.0, a.1) == grid.final_id(b.0, b.1)))
        .collect()
}

/// Rescale so the shorter side hits `shorter_side`, pad to multiples of 32.
pub fn prepare_work_sample(
    sample: &AnnotatedSample,
    shorter_side: usize,
) -> Result<WorkSample, TrainError> {
    let (w, h) = (sample.image.w, sample.image.h);
    let s = shorter_side as f64 / w.min(h) as f64;
    let nw = ((w as f64 * s).round() as usize).max(32);
    let nh = ((h as f64 * s).round() as usize).max(32);
    let (sx, sy) = (nw as f64 / w as f64, nh as f64 / h as f64);
    let pw = nw.div_ceil(32) * 32;
    let ph = nh.div_ceil(32) * 32;
    let resized = sample.image.resize(nw, nh).pad_to(pw, ph);
    let image = crate::model::backbone::image_to_tensor(&resized);

    let row_seps: Vec<Separator> =
        sample.gt_row_seps.separators.iter().map(|sep| scale_separator(sep, sx, sy)).collect();
    let col_seps: Vec<Separator> =
        sample.gt_col_seps.separators.iter().map(|sep| scale_separator(sep, sx, sy)).collect();
    let col_seps_t: Vec<Separator> = col_seps.iter().map(swap_separator_axes).collect();

    let rows = SeparatorSet { axis: Axis::Row, separators: row_seps.clone() };
    let cols = SeparatorSet { axis: Axis::Column, separators: col_seps };
    let grid_basic =
        build_grid(&rows, &cols, (pw, ph)).map_err(|e| TrainError::Model(ModelError::from_geom(e)))?;
    let grid_final = resolve_merges(&grid_basic, &merge_decisions_of(&sample.gt_grid));

    Ok(WorkSample { image, frame: (pw, ph), row_seps, col_seps_t, grid_basic, grid_final })
}

impl ModelError {
    fn from_geom(e: crate::geometry::GeometryError) -> ModelError {
        // geometry failures on GT separators mean malformed input sizes
        match e {
            crate::geometry::GeometryError::EmptyImage(w, h) => ModelError::BadInputSize(w, h),
            crate::geometry::GeometryError::CrossingSeparators(_, _) => {
                ModelError::BadInputSize(0, 0)
            }
        }
    }
}

// ---------------------------------------------------------------------------
// tape-side loss builders
// ---------------------------------------------------------------------------

/// Focal reference loss over a sigmoid score map node, mirroring
/// `losses::reference_point_loss`.
fn ref_loss_node(
    t: &mut Tape,
    logits: NodeId,
    targets: &[f64],
    n_separators: usize,
    cfg: &LossConfig,
) -> NodeId {
    if n_separators == 0 {
        return t.constant(Tensor::scalar_value(0.0));
    }
    let n = targets.len();
    let pos_mask =
        t.constant(Tensor::new(&[n, 1], targets.iter().map(|&v| if v >= 1.0 { 1.0 } else { 0.0 }).collect()));
    let neg_w = t.constant(Tensor::new(
        &[n, 1],
        targets.iter().map(|&v| if v >= 1.0 { 0.0 } else { (1.0 - v).powf(cfg.beta) }).collect(),
    ));
    // logit-space: ln p = -softplus(-z), ln(1-p) = -softplus(z); the
    // gradient never dies, even for saturated scores
    let (p, one_minus_p, log_p, log_1mp) = sigmoid_pieces(t, logits);
    let pow_1mp = t.powf_const(one_minus_p, cfg.alpha);
    let pow_p = t.powf_const(p, cfg.alpha);
    let pos_core = t.mul(pow_1mp, log_p);
    let pos_term = t.mul(pos_mask, pos_core);
    let neg_core = t.mul(pow_p, log_1mp);
    let neg_term = t.mul(neg_w, neg_core);
    let both = t.add(pos_term, neg_term);
    let total = t.sum(both);
    t.scale(total, -1.0 / n_separators as f64)
}

/// p, 1-p, ln p, ln(1-p) from logits, numerically stable.
fn sigmoid_pieces(t: &mut Tape, logits: NodeId) -> (NodeId, NodeId, NodeId, NodeId) {
    let p = t.sigmoid(logits);
    let neg_z = t.neg(logits);
    let one_minus_p = t.sigmoid(neg_z);
    let sp_negz = t.softplus(neg_z);
    let log_p = t.neg(sp_negz);
    let sp_z = t.softplus(logits);
    let log_1mp = t.neg(sp_z);
    (p, one_minus_p, log_p, log_1mp)
}

/// Binary focal classification over query logits.
fn focal_cls_node(t: &mut Tape, logits: NodeId, positives: &[bool], cfg: &LossConfig) -> NodeId {
    let n = positives.len();
    let pos_mask = t.constant(Tensor::new(
        &[n, 1],
        positives.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect(),
    ));
    let neg_mask = t.constant(Tensor::new(
        &[n, 1],
        positives.iter().map(|&b| if b { 0.0 } else { 1.0 }).collect(),
    ));
    let (p, one_minus_p, log_p, log_1mp) = sigmoid_pieces(t, logits);
    let pow_1mp = t.powf_const(one_minus_p, cfg.focal_gamma);
    let pow_p = t.powf_const(p, cfg.focal_gamma);
    let pos_core = t.mul(pow_1mp, log_p);
    let pos_masked = t.mul(pos_mask, pos_core);
    let pos_term = t.scale(pos_masked, -cfg.focal_alpha);
    let neg_core = t.mul(pow_p, log_1mp);
    let neg_masked = t.mul(neg_mask, neg_core);
    let neg_term = t.scale(neg_masked, -(1.0 - cfg.focal_alpha));
    let both = t.add(pos_term, neg_term);
    t.sum(both)
}

/// Mean BCE over selected pair logits.
fn bce_node(t: &mut Tape, logits: NodeId, labels: &[bool]) -> NodeId {
    let n = labels.len();
    assert!(n > 0);
    let y = t.constant(Tensor::new(
        &[n, 1],
        labels.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect(),
    ));
    let one_minus_y = t.constant(Tensor::new(
        &[n, 1],
        labels.iter().map(|&b| if b { 0.0 } else { 1.0 }).collect(),
    ));
    let (_, _, log_p, log_1mp) = sigmoid_pieces(t, logits);
    let pos = t.mul(y, log_p);
    let neg = t.mul(one_minus_y, log_1mp);
    let s = t.add(pos, neg);
    let total = t.sum(s);
    t.scale(total, -1.0 / n as f64)
}

pub struct AxisLoss {
    pub ref_loss: NodeId,
    pub line_loss: Option<NodeId>,
    pub n_refs: usize,
    pub n_matched: usize,
}

/// Reference coordinate: the feature column at half the downsampled width
/// (x_tau = floor(W/2) in image pixels).
pub fn x_tau_feature(frame_parallel: usize) -> usize {
    (frame_parallel / 8) / 2
}

#[allow(clippy::too_many_arguments)]
fn build_axis_loss(
    t: &mut Tape,
    model: &TsrModel,
    branch: &AxisBranch,
    p2_axis: NodeId,
    gt_seps: &[Separator],
    frame: (usize, usize), // (parallel, cross) of the working frame
    stage: Stage,
    cfg: &LossConfig,
) -> Result<AxisLoss, ModelError> {
    let (wpar, hcross) = frame;
    let e = branch.scnn.forward(t, &model.store, p2_axis);
    let e1 = branch.proj_ref.forward(t, &model.store, e);
    let x_tau_feat = x_tau_feature(wpar);
    let score_logits = branch.ref_head.column_logits(t, &model.store, e1, x_tau_feat)?;
    let scores = t.sigmoid(score_logits);
    let x_tau_img = (x_tau_feat * 8) as f64;

    let bands: Vec<GtBand> = gt_seps
        .iter()
        .map(|s| GtBand {
            center: s.center.eval(x_tau_img),
            top: s.top.eval(x_tau_img),
            bottom: s.bottom.eval(x_tau_img),
        })
        .collect();
    let gauss_input: Vec<(f64, f64)> =
        bands.iter().map(|b| (b.center, (b.bottom - b.top).max(1.0))).collect();
    let targets = crate::losses::gaussian_targets(&gauss_input, hcross);
    let ref_loss = ref_loss_node(t, score_logits, &targets, bands.len(), cfg);

    if stage < Stage::WithLines {
        return Ok(AxisLoss { ref_loss, line_loss: None, n_refs: 0, n_matched: 0 });
    }

    let score_vals = t.value(scores).data().to_vec();
    let selected = nms_and_select(
        &score_vals,
        model.config.nms_window,
        model.config.top_k,
        model.config.score_threshold,
    );
    let refs: Vec<usize> = selected.iter().map(|&(i, _)| i).collect();
    let ref_scores: Vec<f64> = selected.iter().map(|&(_, s)| s).collect();
    let positions: Vec<f64> = refs.iter().map(|&i| i as f64).collect();
    let matching = match cfg.matching {
        MatchingMode::PriorEnhanced => prior_enhanced_match(&positions, &bands),
        MatchingMode::OriginalDetr => {
            original_detr_match(&positions, &ref_scores, &bands, hcross as f64)
        }
    };

    let e2 = branch.proj_attn.forward(t, &model.store, e);
    let decode =
        branch.decoder.decode(t, &model.store, e2, &refs, (wpar as f64, hcross as f64), None);

    let mut line_total: Option<NodeId> = None;
    for layer in &decode.layers {
        let np = layer.np;
        let mut positives = vec![false; decode.n_sep * np];
        for &(s, _) in &matching.pairs {
            for slot in 0..np {
                positives[s * np + slot] = true;
            }
        }
        let cls = focal_cls_node(t, layer.class_logits, &positives, cfg);
        let cls = t.scale(cls, cfg.cls_weight);
        line_total = Some(match line_total {
            None => cls,
            Some(acc) => t.add(acc, cls),
        });

        if matching.pairs.is_empty() {
            continue;
        }
        // L1 on matched separators' center/top/bottom at this layer's points
        let rows: Vec<usize> = matching
            .pairs
            .iter()
            .flat_map(|&(s, _)| (s * np..(s + 1) * np).collect::<Vec<_>>())
            .collect();
        let mut gt_c = Vec::with_capacity(rows.len());
        let mut gt_t = Vec::with_capacity(rows.len());
        let mut gt_b = Vec::with_capacity(rows.len());
        for &(_, g) in &matching.pairs {
            let sep = &gt_seps[g];
            for &k in &layer.k_ids {
                let x = branch.decoder.point_x(k, wpar as f64);
                gt_c.push(sep.center.eval(x) / hcross as f64);
                gt_t.push(sep.top.eval(x) / hcross as f64);
                gt_b.push(sep.bottom.eval(x) / hcross as f64);
            }
        }
        let mut reg_sum: Option<NodeId> = None;
        for (pred, gt) in
            [(layer.center, gt_c), (layer.top, gt_t), (layer.bottom, gt_b)]
        {
            let sel = t.select_rows(pred, rows.clone());
            let gt_node = t.constant(Tensor::new(&[rows.len(), 1], gt));
            let diff = t.sub(sel, gt_node);
            let ab = t.abs(diff);
            let s = t.sum(ab);
            reg_sum = Some(match reg_sum {
                None => s,
                Some(acc) => t.add(acc, s),
            });
        }
        let reg = t.scale(reg_sum.unwrap(), cfg.reg_weight / (3.0 * np as f64));
        line_total = Some(t.add(line_total.unwrap(), reg));
    }
    let line_loss = line_total.or_else(|| Some(t.constant(Tensor::scalar_value(0.0))));
    Ok(AxisLoss { ref_loss, line_loss, n_refs: refs.len(), n_matched: matching.pairs.len() })
}

pub struct SampleLossGraph {
    pub total: NodeId,
    pub components: LossComponents,
}

/// Build the full per-sample loss graph for a stage. The merge branch uses
/// ground-truth separator geometry, so the graph has no gradient
/// stop-points anywhere.
pub fn build_sample_loss(
    t: &mut Tape,
    model: &TsrModel,
    ws: &WorkSample,
    stage: Stage,
    cfg: &LossConfig,
    ohem_cap: usize,
) -> Result<SampleLossGraph, ModelError> {
    let (pw, ph) = ws.frame;
    let img = t.constant(ws.image.clone());
    let p2 = model.backbone.forward(t, &model.store, img)?;

    let row =
        build_axis_loss(t, model, &model.row_branch, p2, &ws.row_seps, (pw, ph), stage, cfg)?;
    let p2_t = t.transpose_hw(p2);
    let col =
        build_axis_loss(t, model, &model.col_branch, p2_t, &ws.col_seps_t, (ph, pw), stage, cfg)?;

    let mut total = {
        let s = t.add(row.ref_loss, col.ref_loss);
        t.scale(s, cfg.lambda)
    };
    let mut comps = LossComponents {
        ref_row: t.value(row.ref_loss).scalar(),
        ref_col: t.value(col.ref_loss).scalar(),
        ..Default::default()
    };
    if stage >= Stage::WithLines {
        let lr = row.line_loss.unwrap();
        let lc = col.line_loss.unwrap();
        comps.line_row = t.value(lr).scalar();
        comps.line_col = t.value(lc).scalar();
        let lines = t.add(lr, lc);
        total = t.add(total, lines);
    }
    if stage >= Stage::Full {
        let merge = build_merge_loss(t, model, p2, ws, ohem_cap);
        comps.merge = t.value(merge).scalar();
        total = t.add(total, merge);
    }
    Ok(SampleLossGraph { total, components: comps })
}

fn build_merge_loss(
    t: &mut Tape,
    model: &TsrModel,
    p2: NodeId,
    ws: &WorkSample,
    ohem_cap: usize,
) -> NodeId {
    let grid = &ws.grid_basic;
    let pairs = adjacency_pairs(grid);
    let labels = crate::model::merger::merge_pair_labels(grid, &ws.grid_final, &pairs);
    let kept: Vec<(((usize, usize), (usize, usize)), bool)> = pairs
        .iter()
        .zip(&labels)
        .filter_map(|(&p, l)| l.map(|v| (p, v)))
        .collect();
    if kept.is_empty() {
        return t.constant(Tensor::scalar_value(0.0));
    }
    let feats = model.merger.roi_cell_features(t, &model.store, p2, &grid.shrunk_boxes);
    let (n, m) = (grid.n_rows, grid.n_cols);
    let c = model.config.cell_dim;
    let as_map = t.reshape(feats, &[1, n * m, c]);
    let tr = t.transpose_hw(as_map);
    let f_cell = t.reshape(tr, &[c, n, m]);
    let enhanced = model.merger.grid_feature_enhance(t, &model.store, f_cell);
    let image = (ws.frame.0 as f64, ws.frame.1 as f64);
    let spatial: Vec<[f64; crate::model::merger::SPATIAL_FEATURES]> = kept
        .iter()
        .map(|&((a, b), _)| {
            crate::model::merger::spatial_compat_features(
                grid.cell_box(a.0, a.1),
                grid.cell_box(b.0, b.1),
                image,
                a.0 == b.0,
            )
        })
        .collect();
    let pair_list: Vec<((usize, usize), (usize, usize))> = kept.iter().map(|&(p, _)| p).collect();
    let (scores, logits) =
        model.merger.classify_pairs(t, &model.store, enhanced, &pair_list, &spatial);

    // OHEM on the current BCE values
    let score_vals = t.value(scores).data().to_vec();
    let lab: Vec<bool> = kept.iter().map(|&(_, l)| l).collect();
    let pair_losses: Vec<f64> = score_vals
        .iter()
        .zip(&lab)
        .map(|(&p, &y)| {
            let pc = p.clamp(PROB_EPS, 1.0 - PROB_EPS);
            if y {
                -pc.ln()
            } else {
                -(1.0 - pc).ln()
            }
        })
        .collect();
    let sel = crate::losses::ohem_sample_pairs(&pair_losses, &lab, ohem_cap);
    let sel_logits = t.select_rows(logits, sel.clone());
    let sel_labels: Vec<bool> = sel.iter().map(|&i| lab[i]).collect();
    bce_node(t, sel_logits, &sel_labels)
}

// ---------------------------------------------------------------------------
// training loop
// ---------------------------------------------------------------------------

#[derive(Clone, Debug)]
pub struct LogRow {
    pub step: usize,
    pub stage: u8,
    pub total: f64,
    pub components: LossComponents,
}

impl LogRow {
    pub fn csv_header() -> &'static str {
        "step,stage,total,ref_row,ref_col,line_row,line_col,merge"
    }

    pub fn to_csv(&self) -> String {
        let c = &self.components;
        format!(
            "{},{},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6}",
            self.step, self.stage, self.total, c.ref_row, c.ref_col, c.line_row, c.line_col, c.merge
        )
    }
}

/// Periodic milestone probe: gets the model, the active stage, and the
/// global step; returning true stops training early.
pub type StopProbe = Box<dyn FnMut(&TsrModel, Stage, usize) -> bool + Send>;

pub struct TrainOptions {
    pub out_dir: Option<PathBuf>,
    pub quiet: bool,
    /// Callback period, in steps, for progress lines.
    pub log_every: usize,
    /// Probe period in steps (0 disables).
    pub probe_every: usize,
    pub stop_probe: Option<StopProbe>,
}

impl Default for TrainOptions {
    fn default() -> Self {
        Self { out_dir: None, quiet: true, log_every: 20, probe_every: 0, stop_probe: None }
    }
}

pub struct TrainResult {
    pub log: Vec<LogRow>,
    pub checkpoints: Vec<PathBuf>,
    /// Global step at which the probe stopped training, if it did.
    pub stopped_at: Option<usize>,
}

type SampleGrads = (HashMap<usize, Vec<f64>>, LossComponents, f64);

fn sample_grads(
    model: &TsrModel,
    ws: &WorkSample,
    stage: Stage,
    cfg: &LossConfig,
    ohem_cap: usize,
) -> Result<SampleGrads, TrainError> {
    let mut t = Tape::new();
    let graph = build_sample_loss(&mut t, model, ws, stage, cfg, ohem_cap)?;
    let total = t.value(graph.total).scalar();
    let grads = t.backward(graph.total);
    let mut by_param: HashMap<usize, Vec<f64>> = HashMap::new();
    for id in model.store.ids() {
        if let Some(g) = model.store.grad_of(&t, &grads, id) {
            by_param.insert(id.0, g.to_vec());
        }
    }
    Ok((by_param, graph.components, total))
}

pub fn staged_train(
    model: &mut TsrModel,
    run: &RunConfig,
    dataset: &[AnnotatedSample],
    mut opts: TrainOptions,
) -> Result<TrainResult, TrainError> {
    if dataset.is_empty() {
        return Err(TrainError::EmptyDataset);
    }
    let sched = &run.schedule;
    let mut opt = AdamW::new(AdamWConfig {
        lr: sched.lr,
        beta1: sched.betas.0,
        beta2: sched.betas.1,
        eps: sched.eps,
        weight_decay: sched.weight_decay,
    });
    let mut rng = StdRng::seed_from_u64(run.seed ^ 0x7E57_7E57);
    let mut log = Vec::new();
    let mut checkpoints = Vec::new();
    let mut global_step = 0usize;
    let mut stopped_at = None;
    let mut probe = opts.stop_probe.take();

    'stages: for (si, &stage) in
        [Stage::ReferenceOnly, Stage::WithLines, Stage::Full].iter().enumerate()
    {
        let epochs = sched.stage_epochs[si];
        if epochs == 0 {
            continue;
        }
        let active: std::collections::HashSet<usize> =
            model.stage_params(stage).iter().map(|p| p.0).collect();
        let steps_per_epoch = dataset.len().div_ceil(sched.batch_size);
        let total_steps = (epochs * steps_per_epoch) as u64;
        let mut order: Vec<usize> = (0..dataset.len()).collect();
        let mut stage_step = 0u64;
        for _epoch in 0..epochs {
            order.shuffle(&mut rng);
            for chunk in order.chunks(sched.batch_size) {
                let scale = sched.train_scales[rng.random_range(0..sched.train_scales.len())];
                let lr = poly_lr(sched.lr, stage_step, total_steps, sched.poly_power);
                let work: Vec<WorkSample> = {
                    #[cfg(feature = "parallel")]
                    {
                        chunk
                            .par_iter()
                            .map(|&i| prepare_work_sample(&dataset[i], scale))
                            .collect::<Result<_, _>>()?
                    }
                    #[cfg(not(feature = "parallel"))]
                    {
                        chunk
                            .iter()
                            .map(|&i| prepare_work_sample(&dataset[i], scale))
                            .collect::<Result<_, _>>()?
                    }
                };
                let per_sample: Vec<SampleGrads> = {
                    let m = &*model;
                    #[cfg(feature = "parallel")]
                    {
                        work.par_iter()
                            .map(|ws| sample_grads(m, ws, stage, &run.loss, sched.ohem_cap))
                            .collect::<Result<_, _>>()?
                    }
                    #[cfg(not(feature = "parallel"))]
                    {
                        work.iter()
                            .map(|ws| sample_grads(m, ws, stage, &run.loss, sched.ohem_cap))
                            .collect::<Result<_, _>>()?
                    }
                };
                let bn = per_sample.len() as f64;
                let mut summed: HashMap<usize, Vec<f64>> = HashMap::new();
                let mut comps = LossComponents::default();
                let mut total = 0.0;
                for (g, c, tv) in per_sample {
                    total += tv / bn;
                    comps.ref_row += c.ref_row / bn;
                    comps.ref_col += c.ref_col / bn;
                    comps.line_row += c.line_row / bn;
                    comps.line_col += c.line_col / bn;
                    comps.merge += c.merge / bn;
                    for (pid, gv) in g {
                        match summed.get_mut(&pid) {
                            Some(acc) => {
                                for (a, b) in acc.iter_mut().zip(&gv) {
                                    *a += b;
                                }
                            }
                            None => {
                                summed.insert(pid, gv);
                            }
                        }
                    }
                }
                if !total.is_finite() {
                    return Err(TrainError::Diverged {
                        stage: stage as u8,
                        step: global_step,
                    });
                }
                let lr = lr * ((stage_step + 1) as f64 / sched.warmup_steps.max(1) as f64).min(1.0);
                let mut updates: Vec<(usize, Vec<f64>)> = summed
                    .into_iter()
                    .filter(|(pid, _)| active.contains(pid))
                    .map(|(pid, mut g)| {
                        for v in &mut g {
                            *v /= bn;
                        }
                        (pid, g)
                    })
                    .collect();
                if sched.clip_norm > 0.0 {
                    let norm: f64 = updates
                        .iter()
                        .flat_map(|(_, g)| g.iter().map(|v| v * v))
                        .sum::<f64>()
                        .sqrt();
                    if norm > sched.clip_norm {
                        let scale = sched.clip_norm / norm;
                        for (_, g) in &mut updates {
                            for v in g {
                                *v *= scale;
                            }
                        }
                    }
                }
                for (pid, g) in updates {
                    opt.step_param(&mut model.store, ParamId(pid), &g, lr);
                }
                log.push(LogRow { step: global_step, stage: stage as u8, total, components: comps });
                if !opts.quiet && global_step % opts.log_every == 0 {
                    eprintln!(
                        "stage {} step {:>5} lr {:.2e} loss {:.4}",
                        stage as u8, global_step, lr, total
                    );
                }
                global_step += 1;
                stage_step += 1;
                if opts.probe_every > 0 && global_step % opts.probe_every == 0 {
                    if let Some(p) = probe.as_mut() {
                        if p(model, stage, global_step) {
                            stopped_at = Some(global_step);
                            break 'stages;
                        }
                    }
                }
            }
        }
        if let Some(dir) = &opts.out_dir {
            let path = dir.join(format!("stage{}.ckpt", stage as u8));
            save_checkpoint(model, run, &path)?;
            checkpoints.push(path);
        }
    }
    if let Some(dir) = &opts.out_dir {
        let path = dir.join("model.ckpt");
        save_checkpoint(model, run, &path)?;
        checkpoints.push(path);
        let csv: String = std::iter::once(LogRow::csv_header().to_string())
            .chain(log.iter().map(|r| r.to_csv()))
            .collect::<Vec<_>>()
            .join("\n");
        let log_path = dir.join("loss_log.csv");
        std::fs::write(&log_path, csv).map_err(|source| {
            TrainError::Checkpoint(crate::config::ConfigError::Io { path: log_path, source })
        })?;
    }
    Ok(TrainResult { log, checkpoints, stopped_at })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::losses;
    use crate::synth::{generate_sample, Difficulty, WarpLevel};

    fn tiny_model() -> TsrModel {
        TsrModel::new(
            crate::model::ModelConfig {
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
                ..crate::model::ModelConfig::desk()
            },
            11,
        )
        .unwrap()
    }

    #[test]
    fn work_samples_are_padded_and_scaled() {
        let s = generate_sample(3, Difficulty::Plain, WarpLevel::None).unwrap();
        let ws = prepare_work_sample(&s, 96).unwrap();
        assert_eq!(ws.frame.0 % 32, 0);
        assert_eq!(ws.frame.1 % 32, 0);
        assert_eq!(ws.grid_basic.n_rows, s.gt_grid.n_rows);
        assert_eq!(ws.grid_final.final_cells.len(), s.gt_grid.final_cells.len());
        // separators stay ordered after scaling
        for sep in &ws.row_seps {
            assert!(sep.is_ordered());
        }
    }

    fn logit(p: f64) -> f64 {
        (p / (1.0 - p)).ln()
    }

    #[test]
    fn tape_ref_loss_matches_pure_formula() {
        let mut t = Tape::new();
        let cfg = LossConfig::default();
        let p_vals = [0.2, 0.7, 0.95, 0.4, 0.5];
        let targets = [0.0, 0.3, 1.0, 0.8, 0.0];
        let z = t.constant(Tensor::new(&[5, 1], p_vals.iter().map(|&p| logit(p)).collect()));
        let node = ref_loss_node(&mut t, z, &targets, 2, &cfg);
        let pure = losses::reference_point_loss(&p_vals, &targets, 2, cfg.alpha, cfg.beta);
        assert!((t.value(node).scalar() - pure).abs() < 1e-9);
    }

    #[test]
    fn tape_focal_and_bce_match_pure() {
        let mut t = Tape::new();
        let cfg = LossConfig::default();
        let p_vals = [0.1, 0.6, 0.8, 0.33];
        let pos = [true, false, true, false];
        let z = t.constant(Tensor::new(&[4, 1], p_vals.iter().map(|&p| logit(p)).collect()));
        let node = focal_cls_node(&mut t, z, &pos, &cfg);
        let pure: f64 = p_vals
            .iter()
            .zip(&pos)
            .map(|(&p, &y)| losses::focal_binary(p, y, cfg.focal_gamma, cfg.focal_alpha))
            .sum();
        assert!((t.value(node).scalar() - pure).abs() < 1e-9);

        let z2 = t.constant(Tensor::new(&[4, 1], p_vals.iter().map(|&p| logit(p)).collect()));
        let bce = bce_node(&mut t, z2, &pos);
        let pure_bce = losses::merge_loss(&p_vals, &pos);
        assert!((t.value(bce).scalar() - pure_bce).abs() < 1e-9);
    }

    #[test]
    fn stage1_loss_graph_runs_and_backprops_to_backbone() {
        let model = tiny_model();
        let s = generate_sample(5, Difficulty::Plain, WarpLevel::None).unwrap();
        let ws = prepare_work_sample(&s, 96).unwrap();
        let mut t = Tape::new();
        let g = build_sample_loss(&mut t, &model, &ws, Stage::ReferenceOnly, &LossConfig::default(), 64)
            .unwrap();
        assert!(t.value(g.total).scalar().is_finite());
        let grads = t.backward(g.total);
        let stem_w = model.backbone_stem_weight();
        let gw = model.store.grad_of(&t, &grads, stem_w).expect("backbone got gradient");
        assert!(gw.iter().any(|v| v.abs() > 0.0));
    }

    #[test]
    fn full_stage_loss_graph_is_finite() {
        let model = tiny_model();
        let s = generate_sample(8, Difficulty::Spans, WarpLevel::Mild).unwrap();
        let ws = prepare_work_sample(&s, 96).unwrap();
        let mut t = Tape::new();
        let g = build_sample_loss(&mut t, &model, &ws, Stage::Full, &LossConfig::default(), 64)
            .unwrap();
        let v = t.value(g.total).scalar();
        assert!(v.is_finite(), "total {v}");
        assert!(g.components.merge >= 0.0);
    }

    #[test]
    fn stage1_short_training_leaves_decoder_untouched_and_descends() {
        let mut model = tiny_model();
        let before: Vec<f64> = model
            .stage_params(Stage::Full)
            .iter()
            .filter(|p| !model.stage_params(Stage::ReferenceOnly).contains(p))
            .map(|&p| model.store.get(p).data()[0])
            .collect();
        let dataset: Vec<_> = (0..4)
            .map(|i| generate_sample(i, Difficulty::Plain, WarpLevel::None).unwrap())
            .collect();
        let mut run = RunConfig::preset("desk").unwrap();
        run.model = model.config;
        run.schedule.stage_epochs = [4, 0, 0];
        run.schedule.batch_size = 2;
        run.schedule.train_scales = vec![96];
        let result = staged_train(&mut model, &run, &dataset, TrainOptions::default()).unwrap();
        let after: Vec<f64> = model
            .stage_params(Stage::Full)
            .iter()
            .filter(|p| !model.stage_params(Stage::ReferenceOnly).contains(p))
            .map(|&p| model.store.get(p).data()[0])
            .collect();
        assert_eq!(before, after, "decoder/merger parameters untouched in stage 1");
        let first = result.log.first().unwrap().total;
        let last = result.log.last().unwrap().total;
        assert!(last < first, "loss should drop: {first} -> {last}");
    }
}
