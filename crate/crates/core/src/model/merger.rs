//! Relation-network cell merger: RoI features per shrunk cell, grid
//! feature enhancement, and pairwise merge classification.

use super::ModelConfig;
use crate::geometry::{Quad, TableGrid};
use rand::rngs::StdRng;
use tsrlab_nn::{Conv2d, Mlp, NodeId, ParamStore, Tape};

pub struct EnhanceBlock {
    conv: Conv2d,
    fuse: Conv2d,
}

pub struct Merger {
    roi_mlp: Mlp,
    blocks: Vec<EnhanceBlock>,
    pair_mlp: Mlp,
    cell_dim: usize,
}

pub const ROI_BINS: usize = 7;
pub const SPATIAL_FEATURES: usize = 18;

impl Merger {
    pub fn new(store: &mut ParamStore, rng: &mut StdRng, name: &str, cfg: &ModelConfig) -> Self {
        let c = cfg.cell_dim;
        let roi_in = cfg.p2_channels * ROI_BINS * ROI_BINS;
        let blocks = (0..3)
            .map(|i| EnhanceBlock {
                conv: Conv2d::new(
                    store,
                    rng,
                    &format!("{name}.b{i}.conv"),
                    c,
                    c,
                    (3, 3),
                    (1, 1),
                    (1, 1),
                    true,
                ),
                fuse: Conv2d::new(
                    store,
                    rng,
                    &format!("{name}.b{i}.fuse"),
                    3 * c,
                    c,
                    (1, 1),
                    (1, 1),
                    (0, 0),
                    true,
                ),
            })
            .collect();
        Self {
            roi_mlp: Mlp::new(store, rng, &format!("{name}.roi"), &[roi_in, c, c]),
            blocks,
            pair_mlp: Mlp::new(store, rng, &format!("{name}.pair"), &[2 * c + SPATIAL_FEATURES, c, c, 1]),
            cell_dim: c,
        }
    }

    /// RoI-align each shrunk box on P2 and embed to a cell feature vector.
    /// Boxes are in image pixels; P2 has stride 4. Degenerate boxes sample
    /// a single point. Output [n_cells, cell_dim].
    pub fn roi_cell_features(
        &self,
        t: &mut Tape,
        store: &ParamStore,
        p2: NodeId,
        shrunk_boxes: &[Quad],
    ) -> NodeId {
        let boxes: Vec<[f64; 4]> = shrunk_boxes
            .iter()
            .map(|q| {
                let (x0, y0, x1, y1) = q.bbox();
                [x0 / 4.0, y0 / 4.0, x1 / 4.0, y1 / 4.0]
            })
            .collect();
        let roi = t.roi_align(p2, &boxes, ROI_BINS, ROI_BINS);
        self.roi_mlp.forward(t, store, roi)
    }

    /// Three enhancement blocks; each fuses row-wise max pooling,
    /// column-wise max pooling (both broadcast back to N x M) and a 3x3
    /// convolution, then reduces back to cell_dim with a 1x1 conv.
    pub fn grid_feature_enhance(
        &self,
        t: &mut Tape,
        store: &ParamStore,
        f_cell: NodeId,
    ) -> NodeId {
        let shape = t.value(f_cell).shape().to_vec();
        let (n, m) = (shape[1], shape[2]);
        let mut x = f_cell;
        for b in &self.blocks {
            let rowp = t.maxpool2d(x, (1, m), (1, m));
            let rowb = t.broadcast_w(rowp, m);
            let colp = t.maxpool2d(x, (n, 1), (n, 1));
            let colb = t.broadcast_h(colp, n);
            let conv = b.conv.forward(t, store, x);
            let conv = t.relu(conv);
            let cat = t.concat_c(&[rowb, colb, conv]);
            let fused = b.fuse.forward(t, store, cat);
            x = t.relu(fused);
        }
        x
    }

    /// Pair merge probabilities: concat(feature_a, feature_b, 18-d
    /// spatial) -> MLP -> sigmoid. `enhanced` is [cell_dim, N, M]; pairs
    /// index basic cells. Returns (scores, logits).
    pub fn classify_pairs(
        &self,
        t: &mut Tape,
        store: &ParamStore,
        enhanced: NodeId,
        pairs: &[((usize, usize), (usize, usize))],
        spatial: &[[f64; SPATIAL_FEATURES]],
    ) -> (NodeId, NodeId) {
        assert_eq!(pairs.len(), spatial.len());
        let shape = t.value(enhanced).shape().to_vec();
        let (c, n, m) = (shape[0], shape[1], shape[2]);
        debug_assert_eq!(c, self.cell_dim);
        // [C, N, M] -> [N*M, C]
        let flat = t.reshape(enhanced, &[1, c, n * m]);
        let tr = t.transpose_hw(flat);
        let feats = t.reshape(tr, &[n * m, c]);
        let rows_a: Vec<usize> = pairs.iter().map(|&((i, j), _)| i * m + j).collect();
        let rows_b: Vec<usize> = pairs.iter().map(|&(_, (i, j))| i * m + j).collect();
        let fa = t.select_rows(feats, rows_a);
        let fb = t.select_rows(feats, rows_b);
        let sp = t.constant(tsrlab_nn::Tensor::new(
            &[pairs.len(), SPATIAL_FEATURES],
            spatial.iter().flatten().copied().collect(),
        ));
        let cat = t.concat_cols(&[fa, fb, sp]);
        let logits = self.pair_mlp.forward(t, store, cat);
        (t.sigmoid(logits), logits)
    }
}

/// 18-d spatial compatibility vector for a canonical (left/top first)
/// adjacent cell pair: normalized centers, sizes, center delta, log size
/// ratios, IoU, intersection-over-min, union box size, axis one-hot.
pub fn spatial_compat_features(
    a: &Quad,
    b: &Quad,
    image: (f64, f64),
    horizontal: bool,
) -> [f64; SPATIAL_FEATURES] {
    let (w, h) = image;
    let (ax0, ay0, ax1, ay1) = a.bbox();
    let (bx0, by0, bx1, by1) = b.bbox();
    let (aw, ah) = ((ax1 - ax0).max(1e-6), (ay1 - ay0).max(1e-6));
    let (bw, bh) = ((bx1 - bx0).max(1e-6), (by1 - by0).max(1e-6));
    let (acx, acy) = ((ax0 + ax1) / 2.0, (ay0 + ay1) / 2.0);
    let (bcx, bcy) = ((bx0 + bx1) / 2.0, (by0 + by1) / 2.0);
    let ix = (ax1.min(bx1) - ax0.max(bx0)).max(0.0);
    let iy = (ay1.min(by1) - ay0.max(by0)).max(0.0);
    let inter = ix * iy;
    let aa = aw * ah;
    let ab = bw * bh;
    let iou = inter / (aa + ab - inter).max(1e-9);
    let iom = inter / aa.min(ab).max(1e-9);
    let (ux0, uy0, ux1, uy1) = (ax0.min(bx0), ay0.min(by0), ax1.max(bx1), ay1.max(by1));
    [
        acx / w,
        acy / h,
        bcx / w,
        bcy / h,
        aw / w,
        ah / h,
        bw / w,
        bh / h,
        (bcx - acx) / w,
        (bcy - acy) / h,
        (aw / bw).ln(),
        (ah / bh).ln(),
        iou,
        iom,
        (ux1 - ux0) / w,
        (uy1 - uy0) / h,
        if horizontal { 1.0 } else { 0.0 },
        if horizontal { 0.0 } else { 1.0 },
    ]
}

/// Training labels per the shrunk-box assignment rule: a detected basic
/// cell is assigned to the GT final cell whose box overlaps more than half
/// of the detected shrunk box; a pair is positive when both cells map to
/// the same GT cell, and negatives touching unassigned cells are dropped
/// (None).
pub fn merge_pair_labels(
    detected: &TableGrid,
    gt: &TableGrid,
    pairs: &[((usize, usize), (usize, usize))],
) -> Vec<Option<bool>> {
    use crate::metrics::adjacency::{intersection_area, polygon_area};
    let assign: Vec<Option<usize>> = (0..detected.n_rows * detected.n_cols)
        .map(|idx| {
            let shrunk = &detected.shrunk_boxes[idx];
            let sp = shrunk.corners().to_vec();
            let area = polygon_area(&sp);
            if area <= 0.0 {
                return None;
            }
            let mut best: Option<(usize, f64)> = None;
            for (gi, g) in gt.final_cells.iter().enumerate() {
                let frac = intersection_area(&sp, &g.quad.corners().to_vec()) / area;
                if frac > 0.5 && best.map_or(true, |(_, bf)| frac > bf) {
                    best = Some((gi, frac));
                }
            }
            best.map(|(gi, _)| gi)
        })
        .collect();
    pairs
        .iter()
        .map(|&((ai, aj), (bi, bj))| {
            let a = assign[ai * detected.n_cols + aj];
            let b = assign[bi * detected.n_cols + bj];
            match (a, b) {
                (Some(ga), Some(gb)) => Some(ga == gb),
                _ => None,
            }
        })
        .collect()
}
