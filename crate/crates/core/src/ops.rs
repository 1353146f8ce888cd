//! Convolution, normalization and resampling primitives on 5D tensors.
//!
//! The `*_forward` / `*_backward` kernels work on raw slices and are shared by
//! the tensor-level functions here and the differentiable graph in
//! [`crate::grad`].

use rand::Rng;
use rayon::prelude::*;

use crate::error::{shape_err, Result};
use crate::layout::{gather, merge_map};
use crate::real::{gemm, Real, Strides};
use crate::tensor::{Array, Dims5, Tensor5D};

/// Stabilizer added to the variance in [`layer_norm`].
pub const LAYER_NORM_EPS: f64 = 1e-5;

/// Weights of a 3×3, stride 1, zero-pad 1 convolution.
#[derive(Clone, Debug, PartialEq)]
pub struct ConvWeights<T = f32> {
    /// `[C_out, C_in, 3, 3]`
    pub weight: Array<T>,
    /// `[C_out]`
    pub bias: Array<T>,
}

impl<T: Real> ConvWeights<T> {
    pub fn zeros(c_in: usize, c_out: usize) -> Self {
        ConvWeights { weight: Array::zeros(vec![c_out, c_in, 3, 3]), bias: Array::zeros(vec![c_out]) }
    }

    /// Center tap 1 on the diagonal: output channel `i` copies input channel `i`.
    pub fn identity(c: usize) -> Self {
        let mut w = Self::zeros(c, c);
        for i in 0..c {
            w.weight.data_mut()[(i * c + i) * 9 + 4] = T::one();
        }
        w
    }

    /// Uniform in `±1/√fan_in` for both weights and bias.
    pub fn init<R: Rng>(c_in: usize, c_out: usize, rng: &mut R) -> Self {
        let bound = 1.0 / ((c_in * 9) as f64).sqrt();
        let mut draw = |n: usize| -> Vec<T> {
            (0..n).map(|_| T::from_f64(rng.random_range(-bound..bound))).collect()
        };
        let weight = Array::new(vec![c_out, c_in, 3, 3], draw(c_out * c_in * 9)).unwrap();
        let bias = Array::new(vec![c_out], draw(c_out)).unwrap();
        ConvWeights { weight, bias }
    }

    pub fn c_in(&self) -> usize {
        self.weight.shape()[1]
    }

    pub fn c_out(&self) -> usize {
        self.weight.shape()[0]
    }
}

pub(crate) fn check_conv_shapes(dims: Dims5, w_shape: &[usize], b_len: usize) -> Result<usize> {
    match *w_shape {
        [c_out, c_in, 3, 3] if c_in == dims.c && b_len == c_out => Ok(c_out),
        [_, c_in, 3, 3] if c_in != dims.c => {
            Err(shape_err!("conv expects {c_in} input channels, tensor has {}", dims.c))
        }
        _ => Err(shape_err!("bad conv weight shape {w_shape:?} / bias length {b_len}")),
    }
}

/// Unfolds the 3×3 neighborhoods of one (batch, frame) into `[C_in·9, H·W]`.
fn im2col<T: Real>(x: &[T], d: Dims5, b: usize, f: usize, cols: &mut [T]) {
    im2col_rows(x, d, b, f, 0, d.h, cols)
}

/// Columns for output rows `y0..y1` only, laid out `[C_in·9, (y1−y0)·W]`.
fn im2col_rows<T: Real>(x: &[T], d: Dims5, b: usize, f: usize, y0: usize, y1: usize, cols: &mut [T]) {
    let (h, w) = (d.h, d.w);
    let n = (y1 - y0) * w;
    for ci in 0..d.c {
        let plane = &x[d.index(b, ci, f, 0, 0)..][..h * w];
        for ky in 0..3 {
            for kx in 0..3 {
                let row = &mut cols[((ci * 9) + ky * 3 + kx) * n..][..n];
                for y in y0..y1 {
                    let sy = y as isize + ky as isize - 1;
                    let dst = &mut row[(y - y0) * w..(y - y0 + 1) * w];
                    if sy < 0 || sy >= h as isize {
                        dst.fill(T::zero());
                        continue;
                    }
                    let src = &plane[sy as usize * w..(sy as usize + 1) * w];
                    for (x, o) in dst.iter_mut().enumerate() {
                        let sx = x as isize + kx as isize - 1;
                        *o = if sx < 0 || sx >= w as isize { T::zero() } else { src[sx as usize] };
                    }
                }
            }
        }
    }
}

/// Folds `[C_in·9, H·W]` column gradients back onto one frame (accumulating).
fn col2im<T: Real>(cols: &[T], c_in: usize, h: usize, w: usize, out: &mut [T]) {
    let hw = h * w;
    for ci in 0..c_in {
        let plane = &mut out[ci * hw..(ci + 1) * hw];
        for ky in 0..3 {
            for kx in 0..3 {
                let row = &cols[((ci * 9) + ky * 3 + kx) * hw..][..hw];
                for y in 0..h {
                    let sy = y as isize + ky as isize - 1;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    for x in 0..w {
                        let sx = x as isize + kx as isize - 1;
                        if sx >= 0 && sx < w as isize {
                            plane[sy as usize * w + sx as usize] =
                                plane[sy as usize * w + sx as usize] + row[y * w + x];
                        }
                    }
                }
            }
        }
    }
}

const CONV_BAND_PIXELS: usize = 1024;

pub(crate) fn conv2d_forward<T: Real>(x: &[T], d: Dims5, weight: &[T], bias: &[T], c_out: usize) -> Vec<T> {
    let hw = d.plane();
    let k = d.c * 9;
    let frames: Vec<(usize, usize)> = (0..d.b).flat_map(|b| (0..d.f).map(move |f| (b, f))).collect();
    let per_frame: Vec<Vec<T>> = frames
        .par_iter()
        .map(|&(b, f)| {
            let band = (CONV_BAND_PIXELS / d.w.max(1)).clamp(1, d.h.max(1));
            let mut cols = vec![T::zero(); k * band * d.w];
            let mut out = vec![T::zero(); c_out * hw];
            for (co, row) in out.chunks_mut(hw).enumerate() {
                row.fill(bias[co]);
            }
            for y0 in (0..d.h).step_by(band) {
                let y1 = (y0 + band).min(d.h);
                let n = (y1 - y0) * d.w;
                im2col_rows(x, d, b, f, y0, y1, &mut cols);
                gemm(
                    c_out,
                    k,
                    n,
                    T::one(),
                    weight,
                    Strides::row_major(0, k),
                    &cols,
                    Strides::row_major(0, n),
                    T::one(),
                    &mut out,
                    Strides::row_major(y0 * d.w, hw),
                );
            }
            out
        })
        .collect();
    let od = d.with_channels(c_out);
    let mut y = vec![T::zero(); od.numel()];
    for (&(b, f), out) in frames.iter().zip(per_frame) {
        for co in 0..c_out {
            y[od.index(b, co, f, 0, 0)..][..hw].copy_from_slice(&out[co * hw..(co + 1) * hw]);
        }
    }
    y
}

/// Gradients of a convolution: `(dx, dweight, dbias)`. Frame contributions to the
/// weight gradient are summed in a fixed order so results do not depend on the
/// thread count.
pub(crate) fn conv2d_backward<T: Real>(
    x: &[T],
    d: Dims5,
    weight: &[T],
    c_out: usize,
    dy: &[T],
) -> (Vec<T>, Vec<T>, Vec<T>) {
    let hw = d.plane();
    let k = d.c * 9;
    let od = d.with_channels(c_out);
    let frames: Vec<(usize, usize)> = (0..d.b).flat_map(|b| (0..d.f).map(move |f| (b, f))).collect();
    let parts: Vec<(Vec<T>, Vec<T>, Vec<T>)> = frames
        .par_iter()
        .map(|&(b, f)| {
            let mut cols = vec![T::zero(); k * hw];
            im2col(x, d, b, f, &mut cols);
            let dy_off = od.index(b, 0, f, 0, 0);
            let dy_rows = Strides { offset: dy_off, rs: d.f * hw, cs: 1 };
            let mut dw = vec![T::zero(); c_out * k];
            gemm(c_out, hw, k, T::one(), dy, dy_rows, &cols, Strides::col_major(0, hw), T::zero(), &mut dw, Strides::row_major(0, k));
            let mut dcols = vec![T::zero(); k * hw];
            gemm(k, c_out, hw, T::one(), weight, Strides::col_major(0, k), dy, dy_rows, T::zero(), &mut dcols, Strides::row_major(0, hw));
            let mut dx = vec![T::zero(); d.c * hw];
            col2im(&dcols, d.c, d.h, d.w, &mut dx);
            let db = (0..c_out).map(|co| dy[dy_off + co * d.f * hw..][..hw].iter().copied().sum()).collect();
            (dx, dw, db)
        })
        .collect();
    let mut dx = vec![T::zero(); d.numel()];
    let mut dw = vec![T::zero(); c_out * k];
    let mut db = vec![T::zero(); c_out];
    for (&(b, f), (pdx, pdw, pdb)) in frames.iter().zip(parts) {
        for ci in 0..d.c {
            dx[d.index(b, ci, f, 0, 0)..][..hw].copy_from_slice(&pdx[ci * hw..(ci + 1) * hw]);
        }
        for (a, v) in dw.iter_mut().zip(pdw) {
            *a = *a + v;
        }
        for (a, v) in db.iter_mut().zip(pdb) {
            *a = *a + v;
        }
    }
    (dx, dw, db)
}

/// Per-frame 3×3 convolution with stride 1 and zero padding 1.
pub fn conv2d<T: Real>(x: &Tensor5D<T>, w: &ConvWeights<T>) -> Result<Tensor5D<T>> {
    let c_out = check_conv_shapes(x.dims(), w.weight.shape(), w.bias.len())?;
    let y = conv2d_forward(x.data(), x.dims(), w.weight.data(), w.bias.data(), c_out);
    Tensor5D::new(x.dims().with_channels(c_out), y)
}

/// Per-(batch, frame) statistics over `(C, H, W)`: `(mean, 1/√(var + eps))`.
pub(crate) fn layer_norm_stats<T: Real>(x: &[T], d: Dims5, eps: f64) -> (Vec<f64>, Vec<f64>) {
    let hw = d.plane();
    let n = (d.c * hw) as f64;
    let mut means = Vec::with_capacity(d.b * d.f);
    let mut rstds = Vec::with_capacity(d.b * d.f);
    for b in 0..d.b {
        for f in 0..d.f {
            let mut sum = 0.0;
            for c in 0..d.c {
                sum += x[d.index(b, c, f, 0, 0)..][..hw].iter().map(|v| v.as_f64()).sum::<f64>();
            }
            let mean = sum / n;
            let mut ss = 0.0;
            for c in 0..d.c {
                ss += x[d.index(b, c, f, 0, 0)..][..hw]
                    .iter()
                    .map(|v| (v.as_f64() - mean).powi(2))
                    .sum::<f64>();
            }
            means.push(mean);
            rstds.push(1.0 / (ss / n + eps).sqrt());
        }
    }
    (means, rstds)
}

pub(crate) fn layer_norm_forward<T: Real>(
    x: &[T],
    d: Dims5,
    gain: &[T],
    offset: &[T],
    means: &[f64],
    rstds: &[f64],
) -> Vec<T> {
    let hw = d.plane();
    let mut y = vec![T::zero(); x.len()];
    for b in 0..d.b {
        for f in 0..d.f {
            let (mean, rstd) = (means[b * d.f + f], rstds[b * d.f + f]);
            for c in 0..d.c {
                let (g, o) = (gain[c].as_f64(), offset[c].as_f64());
                let base = d.index(b, c, f, 0, 0);
                for i in base..base + hw {
                    y[i] = T::from_f64((x[i].as_f64() - mean) * rstd * g + o);
                }
            }
        }
    }
    y
}

/// `(dx, dgain, doffset)` for [`layer_norm`].
pub(crate) fn layer_norm_backward<T: Real>(
    x: &[T],
    d: Dims5,
    gain: &[T],
    means: &[f64],
    rstds: &[f64],
    dy: &[T],
) -> (Vec<T>, Vec<T>, Vec<T>) {
    let hw = d.plane();
    let n = (d.c * hw) as f64;
    let mut dx = vec![T::zero(); x.len()];
    let mut dgain = vec![0.0f64; d.c];
    let mut doffset = vec![0.0f64; d.c];
    for b in 0..d.b {
        for f in 0..d.f {
            let (mean, rstd) = (means[b * d.f + f], rstds[b * d.f + f]);
            let mut sum_g = 0.0;
            let mut sum_gx = 0.0;
            for c in 0..d.c {
                let g = gain[c].as_f64();
                let base = d.index(b, c, f, 0, 0);
                for i in base..base + hw {
                    let xhat = (x[i].as_f64() - mean) * rstd;
                    let dyi = dy[i].as_f64();
                    dgain[c] += dyi * xhat;
                    doffset[c] += dyi;
                    sum_g += dyi * g;
                    sum_gx += dyi * g * xhat;
                }
            }
            let (mg, mgx) = (sum_g / n, sum_gx / n);
            for c in 0..d.c {
                let g = gain[c].as_f64();
                let base = d.index(b, c, f, 0, 0);
                for i in base..base + hw {
                    let xhat = (x[i].as_f64() - mean) * rstd;
                    dx[i] = T::from_f64(rstd * (dy[i].as_f64() * g - mg - xhat * mgx));
                }
            }
        }
    }
    let cast = |v: Vec<f64>| v.into_iter().map(T::from_f64).collect();
    (dx, cast(dgain), cast(doffset))
}

const ATTN_ROW_CHUNK: usize = 64;

/// Forward-only batched attention `softmax(q·kᵀ·s + bias)·v` over `[G, R, d]`
/// operands, computed a block of rows at a time. `bias` is `[H, R, R]` and
/// matrix `i` uses `bias[i % H]`.
pub fn fused_attention<T: Real>(q: &Array<T>, k: &Array<T>, v: &Array<T>, bias: Option<&Array<T>>, s: T) -> Result<Array<T>> {
    let (&[g, m, d], &[gk, n, dk], &[gv, nv, dv]) = (q.shape(), k.shape(), v.shape()) else {
        return Err(shape_err!("fused attention needs rank-3 operands"));
    };
    if g != gk || g != gv || d != dk || n != nv {
        return Err(shape_err!("fused attention: {:?} {:?} {:?}", q.shape(), k.shape(), v.shape()));
    }
    let heads = match bias {
        Some(b) => match b.shape() {
            &[h, bm, bn] if h > 0 && g % h == 0 && bm == m && bn == n => h,
            other => return Err(shape_err!("bias {other:?} for {g}×{m}×{n} logits")),
        },
        None => 1,
    };
    let mut out = vec![T::zero(); g * m * dv];
    if m == 0 || dv == 0 {
        return Array::new(vec![g, m, dv], out);
    }
    let failed = std::sync::atomic::AtomicBool::new(false);
    out.par_chunks_mut(m * dv).enumerate().for_each(|(gi, o)| {
        let mut logits = vec![T::zero(); ATTN_ROW_CHUNK.min(m) * n];
        for r0 in (0..m).step_by(ATTN_ROW_CHUNK) {
            let rows = ATTN_ROW_CHUNK.min(m - r0);
            let buf = &mut logits[..rows * n];
            gemm(rows, d, n, s, q.data(), Strides::row_major((gi * m + r0) * d, d), k.data(), Strides::col_major(gi * n * d, d), T::zero(), buf, Strides::row_major(0, n));
            if let Some(b) = bias {
                let off = ((gi % heads) * m + r0) * n;
                buf.iter_mut().zip(&b.data()[off..off + rows * n]).for_each(|(x, y)| *x = *x + *y);
            }
            for row in buf.chunks_mut(n.max(1)) {
                let max = row.iter().fold(T::neg_infinity(), |a, x| a.max(*x));
                if !max.is_finite() {
                    failed.store(true, std::sync::atomic::Ordering::Relaxed);
                    return;
                }
                let mut sum = 0.0f64;
                for x in row.iter_mut() {
                    let e = (*x - max).as_f64().exp();
                    sum += e;
                    *x = T::from_f64(e);
                }
                let inv = T::from_f64(1.0 / sum);
                row.iter_mut().for_each(|x| *x = *x * inv);
            }
            gemm(rows, n, dv, T::one(), buf, Strides::row_major(0, n), v.data(), Strides::row_major(gi * n * dv, dv), T::zero(), o, Strides::row_major(r0 * dv, dv));
        }
    });
    if failed.into_inner() {
        return Err(crate::error::Error::NonFinite("attention logits".into()));
    }
    Array::new(vec![g, m, dv], out)
}

/// Normalizes each (batch, frame) over `(C, H, W)` to zero mean and unit
/// variance, then applies a per-channel affine map.
pub fn layer_norm<T: Real>(x: &Tensor5D<T>, gain: &[T], offset: &[T], eps: f64) -> Result<Tensor5D<T>> {
    let d = x.dims();
    if gain.len() != d.c || offset.len() != d.c {
        return Err(shape_err!("layer norm affine has {}/{} entries for {} channels", gain.len(), offset.len(), d.c));
    }
    if !(eps > 0.0) {
        return Err(crate::Error::Config(format!("layer norm eps must be positive, got {eps}")));
    }
    let (means, rstds) = layer_norm_stats(x.data(), d, eps);
    Tensor5D::new(d, layer_norm_forward(x.data(), d, gain, offset, &means, &rstds))
}

pub(crate) fn prelu_forward<T: Real>(x: &[T], d: Dims5, slope: &[T]) -> Vec<T> {
    let block = d.f * d.plane();
    x.iter()
        .enumerate()
        .map(|(i, &v)| if v >= T::zero() { v } else { slope[(i / block) % d.c] * v })
        .collect()
}

/// `(dx, dslope)`; the kink at zero takes the identity branch.
pub(crate) fn prelu_backward<T: Real>(x: &[T], d: Dims5, slope: &[T], dy: &[T]) -> (Vec<T>, Vec<T>) {
    let block = d.f * d.plane();
    let mut dslope = vec![T::zero(); d.c];
    let dx = x
        .iter()
        .zip(dy)
        .enumerate()
        .map(|(i, (&v, &g))| {
            if v >= T::zero() {
                g
            } else {
                let c = (i / block) % d.c;
                dslope[c] = dslope[c] + g * v;
                slope[c] * g
            }
        })
        .collect();
    (dx, dslope)
}

/// `y = x` for `x ≥ 0`, `slope·x` otherwise, with one slope per channel.
pub fn prelu<T: Real>(x: &Tensor5D<T>, slope: &[T]) -> Result<Tensor5D<T>> {
    if slope.len() != x.dims().c {
        return Err(shape_err!("{} slopes for {} channels", slope.len(), x.dims().c));
    }
    Tensor5D::new(x.dims(), prelu_forward(x.data(), x.dims(), slope))
}

/// 2×2 neighborhoods stacked into channels: `(B, C, F, H, W) → (B, 4C, F, H/2, W/2)`.
pub fn space_to_depth<T: Real>(x: &Tensor5D<T>) -> Result<Tensor5D<T>> {
    let (map, out) = merge_map(x.dims())?;
    Tensor5D::new(out, gather(x.data(), &map))
}

/// Patch-merging downsample: [`space_to_depth`] followed by a 3×3 projection
/// (`4C → 2C` in the backbone).
pub fn patch_merge_down<T: Real>(x: &Tensor5D<T>, proj: &ConvWeights<T>) -> Result<Tensor5D<T>> {
    conv2d(&space_to_depth(x)?, proj)
}

/// Source taps for 2× linear upsampling along one axis (half-pixel centers,
/// clamped at the borders): `(i0, i1, weight of i1)`.
fn upsample_taps(n: usize) -> Vec<(usize, usize, f64)> {
    (0..2 * n)
        .map(|o| {
            let src = ((o as f64 + 0.5) / 2.0 - 0.5).clamp(0.0, (n - 1) as f64);
            let i0 = src.floor() as usize;
            let i1 = (i0 + 1).min(n - 1);
            (i0, i1, src - i0 as f64)
        })
        .collect()
}

pub(crate) fn upsample_forward<T: Real>(x: &[T], d: Dims5) -> Vec<T> {
    let ty = upsample_taps(d.h);
    let tx = upsample_taps(d.w);
    let mut y = Vec::with_capacity(d.numel() * 4);
    for plane in x.chunks(d.plane()) {
        for &(y0, y1, ly) in &ty {
            for &(x0, x1, lx) in &tx {
                let v = (1.0 - ly) * ((1.0 - lx) * plane[y0 * d.w + x0].as_f64() + lx * plane[y0 * d.w + x1].as_f64())
                    + ly * ((1.0 - lx) * plane[y1 * d.w + x0].as_f64() + lx * plane[y1 * d.w + x1].as_f64());
                y.push(T::from_f64(v));
            }
        }
    }
    y
}

pub(crate) fn upsample_backward<T: Real>(d: Dims5, dy: &[T]) -> Vec<T> {
    let ty = upsample_taps(d.h);
    let tx = upsample_taps(d.w);
    let ow = 2 * d.w;
    let mut dx = vec![0.0f64; d.numel()];
    for (g_plane, dx_plane) in dy.chunks(4 * d.plane()).zip(dx.chunks_mut(d.plane())) {
        for (oy, &(y0, y1, ly)) in ty.iter().enumerate() {
            for (ox, &(x0, x1, lx)) in tx.iter().enumerate() {
                let g = g_plane[oy * ow + ox].as_f64();
                dx_plane[y0 * d.w + x0] += g * (1.0 - ly) * (1.0 - lx);
                dx_plane[y0 * d.w + x1] += g * (1.0 - ly) * lx;
                dx_plane[y1 * d.w + x0] += g * ly * (1.0 - lx);
                dx_plane[y1 * d.w + x1] += g * ly * lx;
            }
        }
    }
    dx.into_iter().map(T::from_f64).collect()
}

/// Bilinear 2× upsampling of every frame.
pub fn bilinear_upsample2x<T: Real>(x: &Tensor5D<T>) -> Result<Tensor5D<T>> {
    let d = x.dims();
    if d.h == 0 || d.w == 0 {
        return Err(shape_err!("cannot upsample an empty frame"));
    }
    Tensor5D::new(Dims5 { h: 2 * d.h, w: 2 * d.w, ..d }, upsample_forward(x.data(), d))
}

/// Linear-interpolation upsample followed by a 3×3 projection.
pub fn upsample_linear<T: Real>(x: &Tensor5D<T>, proj: &ConvWeights<T>) -> Result<Tensor5D<T>> {
    conv2d(&bilinear_upsample2x(x)?, proj)
}
