//! Image-quality and agreement statistics on magnitude images.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};
use crate::real::Real;
use crate::tensor::{Dims5, Tensor5D};

/// Peak value used for PSNR and as the SSIM dynamic range.
pub const MAX_VALUE: f64 = 2048.0;
pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
pub const SSIM_K1: f64 = 0.01;
pub const SSIM_K2: f64 = 0.03;
/// Two-sided 90% normal quantile.
pub const Z90: f64 = 1.645;

/// `√(re² + im²)` of channels 0 and 1: `(B, C≥2, F, H, W) → (B, 1, F, H, W)`.
pub fn magnitude<T: Real>(x: &Tensor5D<T>) -> Result<Tensor5D<f64>> {
    let d = x.dims();
    if d.c < 2 {
        return Err(shape_err!("magnitude needs real and imaginary channels, got {d}"));
    }
    let block = d.f * d.plane();
    let mut out = Vec::with_capacity(d.b * block);
    for b in 0..d.b {
        let re = &x.data()[b * d.c * block..][..block];
        let im = &x.data()[(b * d.c + 1) * block..][..block];
        out.extend(re.iter().zip(im).map(|(r, i)| r.as_f64().hypot(i.as_f64())));
    }
    Tensor5D::new(d.with_channels(1), out)
}

fn same_dims(a: &Tensor5D<f64>, b: &Tensor5D<f64>) -> Result<Dims5> {
    if a.dims() != b.dims() {
        return Err(shape_err!("metric inputs differ: {} vs {}", a.dims(), b.dims()));
    }
    if a.data().is_empty() {
        return Err(Error::Empty("metric inputs are empty".into()));
    }
    Ok(a.dims())
}

/// `10·log₁₀(max²/MSE)`; identical images give `+∞`.
pub fn psnr(pred: &Tensor5D<f64>, gt: &Tensor5D<f64>, max_val: f64) -> Result<f64> {
    same_dims(pred, gt)?;
    if !(max_val > 0.0) {
        return Err(Error::Config(format!("PSNR peak must be positive, got {max_val}")));
    }
    let mse = pred.data().iter().zip(gt.data()).map(|(a, b)| (a - b).powi(2)).sum::<f64>() / pred.data().len() as f64;
    Ok(if mse == 0.0 { f64::INFINITY } else { 10.0 * (max_val * max_val / mse).log10() })
}

/// Normalized 1D Gaussian taps.
pub fn gaussian_taps(size: usize, sigma: f64) -> Vec<f64> {
    let c = (size as f64 - 1.0) / 2.0;
    let raw: Vec<f64> = (0..size).map(|i| (-(i as f64 - c).powi(2) / (2.0 * sigma * sigma)).exp()).collect();
    let s: f64 = raw.iter().sum();
    raw.into_iter().map(|v| v / s).collect()
}

/// Valid-region separable filter of one `h × w` plane.
fn filter_valid(plane: &[f64], h: usize, w: usize, taps: &[f64]) -> Vec<f64> {
    let k = taps.len();
    let (oh, ow) = (h - k + 1, w - k + 1);
    let mut rows = vec![0.0; h * ow];
    for y in 0..h {
        for x in 0..ow {
            rows[y * ow + x] = taps.iter().enumerate().map(|(i, t)| t * plane[y * w + x + i]).sum();
        }
    }
    let mut out = vec![0.0; oh * ow];
    for y in 0..oh {
        for x in 0..ow {
            out[y * ow + x] = taps.iter().enumerate().map(|(i, t)| t * rows[(y + i) * ow + x]).sum();
        }
    }
    out
}

/// Mean SSIM of one frame pair.
fn ssim_frame(a: &[f64], b: &[f64], h: usize, w: usize, range: f64, taps: &[f64]) -> f64 {
    let c1 = (SSIM_K1 * range).powi(2);
    let c2 = (SSIM_K2 * range).powi(2);
    let prod = |f: &dyn Fn(f64, f64) -> f64| -> Vec<f64> { a.iter().zip(b).map(|(x, y)| f(*x, *y)).collect() };
    let mx = filter_valid(a, h, w, taps);
    let my = filter_valid(b, h, w, taps);
    let mxx = filter_valid(&prod(&|x, _| x * x), h, w, taps);
    let myy = filter_valid(&prod(&|_, y| y * y), h, w, taps);
    let mxy = filter_valid(&prod(&|x, y| x * y), h, w, taps);
    let n = mx.len();
    (0..n)
        .map(|i| {
            let (ux, uy) = (mx[i], my[i]);
            let vx = mxx[i] - ux * ux;
            let vy = myy[i] - uy * uy;
            let cxy = mxy[i] - ux * uy;
            ((2.0 * ux * uy + c1) * (2.0 * cxy + c2)) / ((ux * ux + uy * uy + c1) * (vx + vy + c2))
        })
        .sum::<f64>()
        / n as f64
}

/// Gaussian-window SSIM (11×11, σ = 1.5) over the valid region, averaged
/// over every frame of every batch entry and channel.
pub fn ssim(pred: &Tensor5D<f64>, gt: &Tensor5D<f64>, dynamic_range: f64) -> Result<f64> {
    let d = same_dims(pred, gt)?;
    if d.h < SSIM_WINDOW || d.w < SSIM_WINDOW {
        return Err(shape_err!("SSIM needs frames of at least {SSIM_WINDOW}×{SSIM_WINDOW}, got {}×{}", d.h, d.w));
    }
    if !(dynamic_range > 0.0) {
        return Err(Error::Config(format!("SSIM dynamic range must be positive, got {dynamic_range}")));
    }
    let taps = gaussian_taps(SSIM_WINDOW, SSIM_SIGMA);
    let p = d.plane();
    let frames = pred.data().len() / p;
    let total: f64 = (0..frames)
        .map(|i| ssim_frame(&pred.data()[i * p..][..p], &gt.data()[i * p..][..p], d.h, d.w, dynamic_range, &taps))
        .sum();
    Ok(total / frames as f64)
}

/// Masked mean over pixels where `mask > 0.5`.
pub fn masked_mean(img: &Tensor5D<f64>, mask: &Tensor5D<f64>) -> Result<f64> {
    if img.dims() != mask.dims() {
        return Err(shape_err!("mask {} does not match image {}", mask.dims(), img.dims()));
    }
    let (s, n) = img
        .data()
        .iter()
        .zip(mask.data())
        .filter(|(_, m)| **m > 0.5)
        .fold((0.0, 0usize), |(s, n), (v, _)| (s + v, n + 1));
    if n == 0 {
        return Err(Error::Empty("mask selects no pixels".into()));
    }
    Ok(s / n as f64)
}

/// `(mean over blood − mean over myocardium)/σ`.
pub fn cnr(img: &Tensor5D<f64>, blood: &Tensor5D<f64>, myo: &Tensor5D<f64>, sigma: f64) -> Result<f64> {
    if !(sigma > 0.0) {
        return Err(Error::Config(format!("noise SD must be positive, got {sigma}")));
    }
    if blood.data().iter().zip(myo.data()).any(|(a, b)| *a > 0.5 && *b > 0.5) {
        return Err(Error::Config("blood and myocardium masks overlap".into()));
    }
    Ok((masked_mean(img, blood)? - masked_mean(img, myo)?) / sigma)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BlandAltman {
    pub mean_dev: f64,
    /// Width of `mean ± 1.645·SD`, sample SD.
    pub cr90: f64,
}

/// Mean of `a − b` and the 90% confidence-range width.
pub fn bland_altman(a: &[f64], b: &[f64]) -> Result<BlandAltman> {
    if a.len() != b.len() {
        return Err(shape_err!("paired lists differ in length: {} vs {}", a.len(), b.len()));
    }
    if a.len() < 2 {
        return Err(Error::Empty("Bland-Altman needs at least two pairs".into()));
    }
    let diffs: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    let n = diffs.len() as f64;
    let mean = diffs.iter().sum::<f64>() / n;
    let var = diffs.iter().map(|d| (d - mean).powi(2)).sum::<f64>() / (n - 1.0);
    Ok(BlandAltman { mean_dev: mean, cr90: 2.0 * Z90 * var.sqrt() })
}

/// One sweep row. `psnr_in_db` and `ssim_in` carry the noisy-input scores.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub case: String,
    pub target_snr: f64,
    pub psnr_db: f64,
    pub ssim: f64,
    pub cnr_in: f64,
    pub cnr_out: f64,
    pub cnr_gt: f64,
    pub psnr_in_db: f64,
    pub ssim_in: f64,
    pub bland_altman: Option<BlandAltman>,
}

pub const METRICS_HEADER: &str = "case,target_snr,psnr_db,ssim,cnr_in,cnr_out,cnr_gt,psnr_in_db,ssim_in";
pub const BLAND_ALTMAN_HEADER: &str = "sweep,mean_dev,cr90";

fn num(v: f64) -> String {
    if v == f64::INFINITY {
        "inf".into()
    } else {
        format!("{v}")
    }
}

pub fn write_metrics_csv<W: Write>(mut out: W, rows: &[MetricsReport]) -> Result<()> {
    writeln!(out, "{METRICS_HEADER}")?;
    for r in rows {
        if r.case.contains([',', '\n', '"']) {
            return Err(Error::Config(format!("case id {:?} cannot go in a CSV field", r.case)));
        }
        let vals = [r.target_snr, r.psnr_db, r.ssim, r.cnr_in, r.cnr_out, r.cnr_gt, r.psnr_in_db, r.ssim_in];
        writeln!(out, "{},{}", r.case, vals.map(num).join(","))?;
    }
    Ok(())
}

pub fn write_bland_altman_csv<W: Write>(mut out: W, rows: &[(String, BlandAltman)]) -> Result<()> {
    writeln!(out, "{BLAND_ALTMAN_HEADER}")?;
    for (name, ba) in rows {
        writeln!(out, "{name},{},{}", num(ba.mean_dev), num(ba.cr90))?;
    }
    Ok(())
}
