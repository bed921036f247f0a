//! Raw compute kernels.
//!
//! Every kernel has a sequential implementation (`*_seq`); when the
//! `parallel` feature is enabled a rayon version is compiled alongside and
//! the un-suffixed dispatcher picks it. Benches call both directly.

#[cfg(feature = "parallel")]
use rayon::prelude::*;

/// Minimum output elements before the parallel path is worth the overhead.
#[cfg(feature = "parallel")]
const PAR_THRESHOLD: usize = 8192;

// ---------------------------------------------------------------------------
// matmul
// ---------------------------------------------------------------------------

/// C[m,n] = A[m,k] * B[k,n]
pub fn matmul_seq(a: &[f64], b: &[f64], m: usize, k: usize, n: usize, out: &mut [f64]) {
    debug_assert_eq!(out.len(), m * n);
    for row in 0..m {
        let or = &mut out[row * n..(row + 1) * n];
        or.fill(0.0);
        let ar = &a[row * k..(row + 1) * k];
        for (kk, &av) in ar.iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let br = &b[kk * n..(kk + 1) * n];
            for (o, &bv) in or.iter_mut().zip(br) {
                *o += av * bv;
            }
        }
    }
}

#[cfg(feature = "parallel")]
pub fn matmul_par(a: &[f64], b: &[f64], _m: usize, k: usize, n: usize, out: &mut [f64]) {
    out.par_chunks_mut(n).enumerate().for_each(|(row, or)| {
        or.fill(0.0);
        let ar = &a[row * k..(row + 1) * k];
        for (kk, &av) in ar.iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let br = &b[kk * n..(kk + 1) * n];
            for (o, &bv) in or.iter_mut().zip(br) {
                *o += av * bv;
            }
        }
    });
}

pub fn matmul(a: &[f64], b: &[f64], m: usize, k: usize, n: usize, out: &mut [f64]) {
    #[cfg(feature = "parallel")]
    if m * n >= PAR_THRESHOLD {
        return matmul_par(a, b, m, k, n, out);
    }
    matmul_seq(a, b, m, k, n, out)
}

/// C[m,n] = A[m,k] * B^T where B is [n,k]
pub fn matmul_nt_seq(a: &[f64], b: &[f64], m: usize, k: usize, n: usize, out: &mut [f64]) {
    for row in 0..m {
        let ar = &a[row * k..(row + 1) * k];
        for col in 0..n {
            let br = &b[col * k..(col + 1) * k];
            out[row * n + col] = ar.iter().zip(br).map(|(x, y)| x * y).sum();
        }
    }
}

#[cfg(feature = "parallel")]
pub fn matmul_nt_par(a: &[f64], b: &[f64], _m: usize, k: usize, n: usize, out: &mut [f64]) {
    out.par_chunks_mut(n).enumerate().for_each(|(row, or)| {
        let ar = &a[row * k..(row + 1) * k];
        for (col, o) in or.iter_mut().enumerate() {
            let br = &b[col * k..(col + 1) * k];
            *o = ar.iter().zip(br).map(|(x, y)| x * y).sum();
        }
    });
}

pub fn matmul_nt(a: &[f64], b: &[f64], m: usize, k: usize, n: usize, out: &mut [f64]) {
    #[cfg(feature = "parallel")]
    if m * n >= PAR_THRESHOLD {
        return matmul_nt_par(a, b, m, k, n, out);
    }
    matmul_nt_seq(a, b, m, k, n, out)
}

/// C[k,n] += A^T[m,k] * B[m,n] (A stored [m,k]); used for weight gradients.
pub fn matmul_tn_acc_seq(a: &[f64], b: &[f64], m: usize, k: usize, n: usize, out: &mut [f64]) {
    debug_assert_eq!(out.len(), k * n);
    for row in 0..m {
        let ar = &a[row * k..(row + 1) * k];
        let br = &b[row * n..(row + 1) * n];
        for (kk, &av) in ar.iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let or = &mut out[kk * n..(kk + 1) * n];
            for (o, &bv) in or.iter_mut().zip(br) {
                *o += av * bv;
            }
        }
    }
}

// ---------------------------------------------------------------------------
// conv2d (CHW, weight [O,C,kh,kw])
// ---------------------------------------------------------------------------

#[derive(Clone, Copy, Debug)]
pub struct ConvSpec {
    pub c_in: usize,
    pub c_out: usize,
    pub h: usize,
    pub w: usize,
    pub kh: usize,
    pub kw: usize,
    pub sy: usize,
    pub sx: usize,
    pub py: usize,
    pub px: usize,
}

impl ConvSpec {
    pub fn out_h(&self) -> usize {
        (self.h + 2 * self.py - self.kh) / self.sy + 1
    }
    pub fn out_w(&self) -> usize {
        (self.w + 2 * self.px - self.kw) / self.sx + 1
    }
}

/// Valid output-x range [lo, hi) for a kernel column: indices where
/// ix = ox*sx + kx - px stays inside [0, w).
#[inline]
fn ox_range(s: &ConvSpec, kx: usize) -> (usize, usize, isize) {
    let ow = s.out_w();
    let shift = kx as isize - s.px as isize;
    let lo = if shift >= 0 { 0 } else { (-shift as usize).div_ceil(s.sx) };
    // largest ox with ox*sx + shift <= w-1
    let hi_num = s.w as isize - 1 - shift;
    let hi = if hi_num < 0 { 0 } else { ((hi_num as usize) / s.sx + 1).min(ow) };
    (lo.min(ow), hi, shift)
}

fn conv2d_one_out_channel(
    x: &[f64],
    w: &[f64],
    bias: f64,
    s: &ConvSpec,
    o: usize,
    out: &mut [f64],
) {
    let (oh, ow) = (s.out_h(), s.out_w());
    out.fill(bias);
    let wo = &w[o * s.c_in * s.kh * s.kw..(o + 1) * s.c_in * s.kh * s.kw];
    for c in 0..s.c_in {
        let xc = &x[c * s.h * s.w..(c + 1) * s.h * s.w];
        let wc = &wo[c * s.kh * s.kw..(c + 1) * s.kh * s.kw];
        for ky in 0..s.kh {
            for kx in 0..s.kw {
                let wv = wc[ky * s.kw + kx];
                if wv == 0.0 {
                    continue;
                }
                let (lo, hi, shift) = ox_range(s, kx);
                if lo >= hi {
                    continue;
                }
                for oy in 0..oh {
                    let iy = (oy * s.sy + ky) as isize - s.py as isize;
                    if iy < 0 || iy >= s.h as isize {
                        continue;
                    }
                    let base = iy as usize * s.w;
                    let orow = &mut out[oy * ow + lo..oy * ow + hi];
                    if s.sx == 1 {
                        let x0 = (base as isize + lo as isize + shift) as usize;
                        let xrow = &xc[x0..x0 + (hi - lo)];
                        for (ov, xv) in orow.iter_mut().zip(xrow) {
                            *ov += wv * xv;
                        }
                    } else {
                        for (i, ov) in orow.iter_mut().enumerate() {
                            let ix = ((lo + i) * s.sx) as isize + shift;
                            *ov += wv * xc[base + ix as usize];
                        }
                    }
                }
            }
        }
    }
}

pub fn conv2d_seq(x: &[f64], w: &[f64], b: Option<&[f64]>, s: &ConvSpec, out: &mut [f64]) {
    let (oh, ow) = (s.out_h(), s.out_w());
    for o in 0..s.c_out {
        let bias = b.map_or(0.0, |b| b[o]);
        conv2d_one_out_channel(x, w, bias, s, o, &mut out[o * oh * ow..(o + 1) * oh * ow]);
    }
}

#[cfg(feature = "parallel")]
pub fn conv2d_par(x: &[f64], w: &[f64], b: Option<&[f64]>, s: &ConvSpec, out: &mut [f64]) {
    let (oh, ow) = (s.out_h(), s.out_w());
    out.par_chunks_mut(oh * ow).enumerate().for_each(|(o, oc)| {
        let bias = b.map_or(0.0, |b| b[o]);
        conv2d_one_out_channel(x, w, bias, s, o, oc);
    });
}

pub fn conv2d(x: &[f64], w: &[f64], b: Option<&[f64]>, s: &ConvSpec, out: &mut [f64]) {
    #[cfg(feature = "parallel")]
    if s.c_out * s.out_h() * s.out_w() >= PAR_THRESHOLD && s.c_out > 1 {
        return conv2d_par(x, w, b, s, out);
    }
    conv2d_seq(x, w, b, s, out)
}

/// Gradient w.r.t. the input. `gx` must be zeroed by the caller.
pub fn conv2d_bwd_input_seq(gout: &[f64], w: &[f64], s: &ConvSpec, gx: &mut [f64]) {
    let (oh, ow) = (s.out_h(), s.out_w());
    for o in 0..s.c_out {
        let go = &gout[o * oh * ow..(o + 1) * oh * ow];
        let wo = &w[o * s.c_in * s.kh * s.kw..(o + 1) * s.c_in * s.kh * s.kw];
        for c in 0..s.c_in {
            let gxc = &mut gx[c * s.h * s.w..(c + 1) * s.h * s.w];
            let wc = &wo[c * s.kh * s.kw..(c + 1) * s.kh * s.kw];
            for ky in 0..s.kh {
                for kx in 0..s.kw {
                    let wv = wc[ky * s.kw + kx];
                    if wv == 0.0 {
                        continue;
                    }
                    let (lo, hi, shift) = ox_range(s, kx);
                    if lo >= hi {
                        continue;
                    }
                    for oy in 0..oh {
                        let iy = (oy * s.sy + ky) as isize - s.py as isize;
                        if iy < 0 || iy >= s.h as isize {
                            continue;
                        }
                        let base = iy as usize * s.w;
                        let grow = &go[oy * ow + lo..oy * ow + hi];
                        if s.sx == 1 {
                            let x0 = (base as isize + lo as isize + shift) as usize;
                            let gxrow = &mut gxc[x0..x0 + (hi - lo)];
                            for (gxv, &gv) in gxrow.iter_mut().zip(grow) {
                                *gxv += wv * gv;
                            }
                        } else {
                            for (i, &gv) in grow.iter().enumerate() {
                                let ix = ((lo + i) * s.sx) as isize + shift;
                                gxc[base + ix as usize] += wv * gv;
                            }
                        }
                    }
                }
            }
        }
    }
}

#[cfg(feature = "parallel")]
pub fn conv2d_bwd_input_par(gout: &[f64], w: &[f64], s: &ConvSpec, gx: &mut [f64]) {
    let (oh, ow) = (s.out_h(), s.out_w());
    gx.par_chunks_mut(s.h * s.w).enumerate().for_each(|(c, gxc)| {
        for o in 0..s.c_out {
            let go = &gout[o * oh * ow..(o + 1) * oh * ow];
            let wc = &w[(o * s.c_in + c) * s.kh * s.kw..(o * s.c_in + c + 1) * s.kh * s.kw];
            for ky in 0..s.kh {
                for kx in 0..s.kw {
                    let wv = wc[ky * s.kw + kx];
                    if wv == 0.0 {
                        continue;
                    }
                    let (lo, hi, shift) = ox_range(s, kx);
                    if lo >= hi {
                        continue;
                    }
                    for oy in 0..oh {
                        let iy = (oy * s.sy + ky) as isize - s.py as isize;
                        if iy < 0 || iy >= s.h as isize {
                            continue;
                        }
                        let base = iy as usize * s.w;
                        let grow = &go[oy * ow + lo..oy * ow + hi];
                        if s.sx == 1 {
                            let x0 = (base as isize + lo as isize + shift) as usize;
                            let gxrow = &mut gxc[x0..x0 + (hi - lo)];
                            for (gxv, &gv) in gxrow.iter_mut().zip(grow) {
                                *gxv += wv * gv;
                            }
                        } else {
                            for (i, &gv) in grow.iter().enumerate() {
                                let ix = ((lo + i) * s.sx) as isize + shift;
                                gxc[base + ix as usize] += wv * gv;
                            }
                        }
                    }
                }
            }
        }
    });
}

pub fn conv2d_bwd_input(gout: &[f64], w: &[f64], s: &ConvSpec, gx: &mut [f64]) {
    #[cfg(feature = "parallel")]
    if s.c_in * s.h * s.w >= PAR_THRESHOLD && s.c_in > 1 {
        return conv2d_bwd_input_par(gout, w, s, gx);
    }
    conv2d_bwd_input_seq(gout, w, s, gx)
}

/// Gradients w.r.t. weights and bias. Buffers must be zeroed by the caller.
pub fn conv2d_bwd_weight_seq(
    x: &[f64],
    gout: &[f64],
    s: &ConvSpec,
    gw: &mut [f64],
    gb: Option<&mut [f64]>,
) {
    let (oh, ow) = (s.out_h(), s.out_w());
    if let Some(gb) = gb {
        for o in 0..s.c_out {
            gb[o] += gout[o * oh * ow..(o + 1) * oh * ow].iter().sum::<f64>();
        }
    }
    for o in 0..s.c_out {
        let go = &gout[o * oh * ow..(o + 1) * oh * ow];
        for c in 0..s.c_in {
            let xc = &x[c * s.h * s.w..(c + 1) * s.h * s.w];
            let gwc = &mut gw[(o * s.c_in + c) * s.kh * s.kw..(o * s.c_in + c + 1) * s.kh * s.kw];
            for ky in 0..s.kh {
                for kx in 0..s.kw {
                    let (lo, hi, shift) = ox_range(s, kx);
                    if lo >= hi {
                        continue;
                    }
                    let mut acc = 0.0;
                    for oy in 0..oh {
                        let iy = (oy * s.sy + ky) as isize - s.py as isize;
                        if iy < 0 || iy >= s.h as isize {
                            continue;
                        }
                        let base = iy as usize * s.w;
                        let grow = &go[oy * ow + lo..oy * ow + hi];
                        if s.sx == 1 {
                            let x0 = (base as isize + lo as isize + shift) as usize;
                            let xrow = &xc[x0..x0 + (hi - lo)];
                            acc += grow.iter().zip(xrow).map(|(g, xv)| g * xv).sum::<f64>();
                        } else {
                            for (i, &gv) in grow.iter().enumerate() {
                                let ix = ((lo + i) * s.sx) as isize + shift;
                                acc += gv * xc[base + ix as usize];
                            }
                        }
                    }
                    gwc[ky * s.kw + kx] += acc;
                }
            }
        }
    }
}

#[cfg(feature = "parallel")]
pub fn conv2d_bwd_weight_par(
    x: &[f64],
    gout: &[f64],
    s: &ConvSpec,
    gw: &mut [f64],
    gb: Option<&mut [f64]>,
) {
    let (oh, ow) = (s.out_h(), s.out_w());
    if let Some(gb) = gb {
        for o in 0..s.c_out {
            gb[o] += gout[o * oh * ow..(o + 1) * oh * ow].iter().sum::<f64>();
        }
    }
    let per_out = s.c_in * s.kh * s.kw;
    gw.par_chunks_mut(per_out).enumerate().for_each(|(o, gwo)| {
        let go = &gout[o * oh * ow..(o + 1) * oh * ow];
        for c in 0..s.c_in {
            let xc = &x[c * s.h * s.w..(c + 1) * s.h * s.w];
            let gwc = &mut gwo[c * s.kh * s.kw..(c + 1) * s.kh * s.kw];
            for ky in 0..s.kh {
                for kx in 0..s.kw {
                    let (lo, hi, shift) = ox_range(s, kx);
                    if lo >= hi {
                        continue;
                    }
                    let mut acc = 0.0;
                    for oy in 0..oh {
                        let iy = (oy * s.sy + ky) as isize - s.py as isize;
                        if iy < 0 || iy >= s.h as isize {
                            continue;
                        }
                        let base = iy as usize * s.w;
                        let grow = &go[oy * ow + lo..oy * ow + hi];
                        if s.sx == 1 {
                            let x0 = (base as isize + lo as isize + shift) as usize;
                            let xrow = &xc[x0..x0 + (hi - lo)];
                            acc += grow.iter().zip(xrow).map(|(g, xv)| g * xv).sum::<f64>();
                        } else {
                            for (i, &gv) in grow.iter().enumerate() {
                                let ix = ((lo + i) * s.sx) as isize + shift;
                                acc += gv * xc[base + ix as usize];
                            }
                        }
                    }
                    gwc[ky * s.kw + kx] += acc;
                }
            }
        }
    });
}

pub fn conv2d_bwd_weight(
    x: &[f64],
    gout: &[f64],
    s: &ConvSpec,
    gw: &mut [f64],
    gb: Option<&mut [f64]>,
) {
    #[cfg(feature = "parallel")]
    if s.c_out * s.c_in * s.kh * s.kw * s.out_h() * s.out_w() >= PAR_THRESHOLD * 8 && s.c_out > 1 {
        return conv2d_bwd_weight_par(x, gout, s, gw, gb);
    }
    conv2d_bwd_weight_seq(x, gout, s, gw, gb)
}

// ---------------------------------------------------------------------------
// bilinear sampling (zero padding outside the map)
// ---------------------------------------------------------------------------

/// Sample channel plane `xc` ([h,w]) at continuous (px, py). Returns the
/// value and (d/dx, d/dy). Texels outside the map contribute zeros.
pub fn bilinear_at(xc: &[f64], h: usize, w: usize, px: f64, py: f64) -> (f64, f64, f64) {
    let x0 = px.floor();
    let y0 = py.floor();
    let fx = px - x0;
    let fy = py - y0;
    let (x0, y0) = (x0 as isize, y0 as isize);
    let get = |yy: isize, xx: isize| -> f64 {
        if yy < 0 || xx < 0 || yy >= h as isize || xx >= w as isize {
            0.0
        } else {
            xc[yy as usize * w + xx as usize]
        }
    };
    let v00 = get(y0, x0);
    let v01 = get(y0, x0 + 1);
    let v10 = get(y0 + 1, x0);
    let v11 = get(y0 + 1, x0 + 1);
    let top = v00 + (v01 - v00) * fx;
    let bot = v10 + (v11 - v10) * fx;
    let val = top + (bot - top) * fy;
    let dx = (v01 - v00) * (1.0 - fy) + (v11 - v10) * fy;
    let dy = bot - top;
    (val, dx, dy)
}

/// Scatter `g` into the four texels around (px, py) of `gxc`.
pub fn bilinear_scatter(gxc: &mut [f64], h: usize, w: usize, px: f64, py: f64, g: f64) {
    let x0 = px.floor();
    let y0 = py.floor();
    let fx = px - x0;
    let fy = py - y0;
    let (x0, y0) = (x0 as isize, y0 as isize);
    let mut put = |yy: isize, xx: isize, v: f64| {
        if yy >= 0 && xx >= 0 && yy < h as isize && xx < w as isize {
            gxc[yy as usize * w + xx as usize] += v;
        }
    };
    put(y0, x0, g * (1.0 - fx) * (1.0 - fy));
    put(y0, x0 + 1, g * fx * (1.0 - fy));
    put(y0 + 1, x0, g * (1.0 - fx) * fy);
    put(y0 + 1, x0 + 1, g * fx * fy);
}

// ---------------------------------------------------------------------------
// bilinear upsample by integer factors (half-pixel alignment)
// ---------------------------------------------------------------------------

/// Mapping from output index to fractional source index, half-pixel centers.
#[inline]
pub fn upsample_src_pos(o: usize, scale: usize) -> f64 {
    (o as f64 + 0.5) / scale as f64 - 0.5
}

pub fn upsample_bilinear_seq(
    x: &[f64],
    c: usize,
    h: usize,
    w: usize,
    sy: usize,
    sx: usize,
    out: &mut [f64],
) {
    let (oh, ow) = (h * sy, w * sx);
    for ch in 0..c {
        let xc = &x[ch * h * w..(ch + 1) * h * w];
        let oc = &mut out[ch * oh * ow..(ch + 1) * oh * ow];
        for oy in 0..oh {
            let fy = upsample_src_pos(oy, sy).clamp(0.0, (h - 1) as f64);
            let y0 = fy.floor() as usize;
            let y1 = (y0 + 1).min(h - 1);
            let wy = fy - y0 as f64;
            for ox in 0..ow {
                let fx = upsample_src_pos(ox, sx).clamp(0.0, (w - 1) as f64);
                let x0 = fx.floor() as usize;
                let x1 = (x0 + 1).min(w - 1);
                let wx = fx - x0 as f64;
                let top = xc[y0 * w + x0] * (1.0 - wx) + xc[y0 * w + x1] * wx;
                let bot = xc[y1 * w + x0] * (1.0 - wx) + xc[y1 * w + x1] * wx;
                oc[oy * ow + ox] = top * (1.0 - wy) + bot * wy;
            }
        }
    }
}

#[cfg(feature = "parallel")]
pub fn upsample_bilinear_par(
    x: &[f64],
    _c: usize,
    h: usize,
    w: usize,
    sy: usize,
    sx: usize,
    out: &mut [f64],
) {
    let (oh, ow) = (h * sy, w * sx);
    out.par_chunks_mut(oh * ow).enumerate().for_each(|(ch, oc)| {
        let xc = &x[ch * h * w..(ch + 1) * h * w];
        for oy in 0..oh {
            let fy = upsample_src_pos(oy, sy).clamp(0.0, (h - 1) as f64);
            let y0 = fy.floor() as usize;
            let y1 = (y0 + 1).min(h - 1);
            let wy = fy - y0 as f64;
            for ox in 0..ow {
                let fx = upsample_src_pos(ox, sx).clamp(0.0, (w - 1) as f64);
                let x0 = fx.floor() as usize;
                let x1 = (x0 + 1).min(w - 1);
                let wx = fx - x0 as f64;
                let top = xc[y0 * w + x0] * (1.0 - wx) + xc[y0 * w + x1] * wx;
                let bot = xc[y1 * w + x0] * (1.0 - wx) + xc[y1 * w + x1] * wx;
                oc[oy * ow + ox] = top * (1.0 - wy) + bot * wy;
            }
        }
    });
}

pub fn upsample_bilinear(
    x: &[f64],
    c: usize,
    h: usize,
    w: usize,
    sy: usize,
    sx: usize,
    out: &mut [f64],
) {
    #[cfg(feature = "parallel")]
    if c * h * w * sy * sx >= PAR_THRESHOLD && c > 1 {
        return upsample_bilinear_par(x, c, h, w, sy, sx, out);
    }
    upsample_bilinear_seq(x, c, h, w, sy, sx, out)
}

pub fn upsample_bilinear_bwd(
    gout: &[f64],
    c: usize,
    h: usize,
    w: usize,
    sy: usize,
    sx: usize,
    gx: &mut [f64],
) {
    let (oh, ow) = (h * sy, w * sx);
    for ch in 0..c {
        let gc = &gout[ch * oh * ow..(ch + 1) * oh * ow];
        let gxc = &mut gx[ch * h * w..(ch + 1) * h * w];
        for oy in 0..oh {
            let fy = upsample_src_pos(oy, sy).clamp(0.0, (h - 1) as f64);
            let y0 = fy.floor() as usize;
            let y1 = (y0 + 1).min(h - 1);
            let wy = fy - y0 as f64;
            for ox in 0..ow {
                let fx = upsample_src_pos(ox, sx).clamp(0.0, (w - 1) as f64);
                let x0 = fx.floor() as usize;
                let x1 = (x0 + 1).min(w - 1);
                let wx = fx - x0 as f64;
                let g = gc[oy * ow + ox];
                gxc[y0 * w + x0] += g * (1.0 - wx) * (1.0 - wy);
                gxc[y0 * w + x1] += g * wx * (1.0 - wy);
                gxc[y1 * w + x0] += g * (1.0 - wx) * wy;
                gxc[y1 * w + x1] += g * wx * wy;
            }
        }
    }
}
