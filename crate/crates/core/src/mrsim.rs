//! Synthetic cine-like data: a beating disc-and-ring phantom, g-factor maps,
//! g-weighted complex Gaussian noise in SNR units and the SNR ladder.

use std::f64::consts::PI;

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};
use crate::tensor::{Dims5, Tensor5D};

/// Supersampling factor per axis for anti-aliased edges.
const SUPERSAMPLE: usize = 4;
/// Foreground threshold as a fraction of the maximum magnitude.
pub const FOREGROUND_FRACTION: f64 = 0.1;
/// Relative tolerance of the noise-level solver.
pub const SOLVE_TOLERANCE: f64 = 1e-9;

/// Complex image series as real and imaginary planes, each `(1, 1, F, H, W)`.
#[derive(Clone, Debug, PartialEq)]
pub struct ComplexSeries {
    pub re: Tensor5D<f64>,
    pub im: Tensor5D<f64>,
    /// Pixel spacing in mm; metadata only.
    pub spacing: f64,
}

impl ComplexSeries {
    pub fn new(re: Tensor5D<f64>, im: Tensor5D<f64>) -> Result<Self> {
        let d = re.dims();
        if d != im.dims() || d.b != 1 || d.c != 1 {
            return Err(shape_err!("complex planes must both be (1, 1, F, H, W), got {} and {}", d, im.dims()));
        }
        Ok(ComplexSeries { re, im, spacing: 1.0 })
    }

    pub fn dims(&self) -> Dims5 {
        self.re.dims()
    }

    pub fn frames(&self) -> usize {
        self.dims().f
    }

    pub fn magnitude(&self) -> Vec<f64> {
        self.re.data().iter().zip(self.im.data()).map(|(r, i)| r.hypot(*i)).collect()
    }

    /// `(1, 2, F, H, W)` with real then imaginary channel.
    pub fn to_channels(&self) -> Tensor5D<f64> {
        Tensor5D::concat_channels(&[&self.re, &self.im]).expect("planes share dims")
    }

    /// Inverse of [`ComplexSeries::to_channels`] for batch entry `b`.
    pub fn from_channels(x: &Tensor5D<f64>, b: usize) -> Result<Self> {
        let d = x.dims();
        if d.c < 2 || b >= d.b {
            return Err(shape_err!("need a 2-channel tensor with batch entry {b}, got {d}"));
        }
        let one = Dims5 { b: 1, c: 1, ..d };
        let block = d.f * d.plane();
        let plane = |c: usize| Tensor5D::new(one, x.data()[(b * d.c + c) * block..][..block].to_vec());
        ComplexSeries::new(plane(0)?, plane(1)?)
    }

    pub fn is_finite(&self) -> bool {
        self.re.is_finite() && self.im.is_finite()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PhantomSpec {
    pub height: usize,
    pub width: usize,
    pub frames: usize,
    pub blood: f64,
    pub myocardium: f64,
    pub background: f64,
    /// End-diastolic blood-pool radius as a fraction of `min(H, W)`.
    pub radius: f64,
    /// Myocardial wall thickness as a fraction of `min(H, W)`.
    pub thickness: f64,
    /// Peak fractional shrink of the blood pool over the beat.
    pub beat_amplitude: f64,
    /// Coefficient bound (radians) of the quadratic phase polynomial.
    pub phase_strength: f64,
    /// Random center shift and size change, as a fraction of `min(H, W)`.
    pub jitter: f64,
    pub seed: u64,
}

impl Default for PhantomSpec {
    fn default() -> Self {
        PhantomSpec {
            height: 32,
            width: 32,
            frames: 4,
            blood: 105.7,
            myocardium: 37.0,
            background: 5.0,
            radius: 0.2,
            thickness: 0.12,
            beat_amplitude: 0.25,
            phase_strength: 0.8,
            jitter: 0.0,
            seed: 0,
        }
    }
}

impl PhantomSpec {
    pub fn validate(&self) -> Result<()> {
        if self.height == 0 || self.width == 0 || self.frames == 0 {
            return Err(Error::Config("phantom dims must be positive".into()));
        }
        if !(self.blood > self.myocardium && self.myocardium > self.background && self.background >= 0.0) {
            return Err(Error::Config("phantom levels must satisfy blood > myocardium > background ≥ 0".into()));
        }
        if !(0.0..1.0).contains(&self.beat_amplitude) {
            return Err(Error::Config(format!("beat amplitude {} not in [0, 1)", self.beat_amplitude)));
        }
        if !(self.radius > 0.0 && self.thickness > 0.0 && self.jitter >= 0.0 && self.phase_strength >= 0.0) {
            return Err(Error::Config("phantom geometry parameters must be positive".into()));
        }
        Ok(())
    }
}

/// Ground truth plus interior masks, the masks shaped `(1, 1, F, H, W)`.
#[derive(Clone, Debug, PartialEq)]
pub struct Phantom {
    pub series: ComplexSeries,
    pub blood_mask: Tensor5D<f64>,
    pub myo_mask: Tensor5D<f64>,
}

/// Beating disc (blood) inside a ring (myocardium) on a dim background, with a
/// smooth quadratic phase.
pub fn gen_phantom(spec: &PhantomSpec) -> Result<Phantom> {
    spec.validate()?;
    let (h, w, nf) = (spec.height, spec.width, spec.frames);
    let side = h.min(w) as f64;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut unit = || rng.random_range(-1.0..1.0);
    let shift = [unit(), unit(), unit()];
    let coef: Vec<f64> = (0..6).map(|_| unit() * spec.phase_strength).collect();
    let cy = h as f64 / 2.0 + shift[0] * spec.jitter * side;
    let cx = w as f64 / 2.0 + shift[1] * spec.jitter * side;
    let size = 1.0 + shift[2] * spec.jitter;
    let r0 = spec.radius * side * size;
    let outer_max = r0 + spec.thickness * side * size;
    if cy - outer_max < 0.0 || cx - outer_max < 0.0 || cy + outer_max > h as f64 || cx + outer_max > w as f64 {
        return Err(Error::Config(format!("ring of radius {outer_max:.2} does not fit a {h}×{w} frame")));
    }

    let dims = Dims5::new(1, 1, nf, h, w);
    let mut mag = Tensor5D::zeros(dims);
    let mut blood_mask = Tensor5D::zeros(dims);
    let mut myo_mask = Tensor5D::zeros(dims);
    let n_sub = (SUPERSAMPLE * SUPERSAMPLE) as f64;
    for f in 0..nf {
        let beat = 0.5 * (1.0 - (2.0 * PI * f as f64 / nf as f64).cos());
        let r_in = r0 * (1.0 - spec.beat_amplitude * beat);
        // constant wall area: the wall thickens as the pool contracts
        let r_out = (r_in * r_in + (outer_max * outer_max - r0 * r0)).sqrt();
        for y in 0..h {
            for x in 0..w {
                let (mut sum, mut n_blood, mut n_myo) = (0.0, 0usize, 0usize);
                for sy in 0..SUPERSAMPLE {
                    for sx in 0..SUPERSAMPLE {
                        let py = y as f64 + (sy as f64 + 0.5) / SUPERSAMPLE as f64 - cy;
                        let px = x as f64 + (sx as f64 + 0.5) / SUPERSAMPLE as f64 - cx;
                        let r = py.hypot(px);
                        sum += if r < r_in {
                            n_blood += 1;
                            spec.blood
                        } else if r < r_out {
                            n_myo += 1;
                            spec.myocardium
                        } else {
                            spec.background
                        };
                    }
                }
                mag.set(0, 0, f, y, x, sum / n_sub);
                let full = SUPERSAMPLE * SUPERSAMPLE;
                blood_mask.set(0, 0, f, y, x, if n_blood == full { 1.0 } else { 0.0 });
                myo_mask.set(0, 0, f, y, x, if n_myo == full { 1.0 } else { 0.0 });
            }
        }
    }
    let phase = |y: usize, x: usize| {
        let u = 2.0 * (y as f64 + 0.5) / h as f64 - 1.0;
        let v = 2.0 * (x as f64 + 0.5) / w as f64 - 1.0;
        coef[0] + coef[1] * u + coef[2] * v + coef[3] * u * u + coef[4] * u * v + coef[5] * v * v
    };
    let re = Tensor5D::from_fn(dims, |_, _, f, y, x| mag.at(0, 0, f, y, x) * phase(y, x).cos());
    let im = Tensor5D::from_fn(dims, |_, _, f, y, x| mag.at(0, 0, f, y, x) * phase(y, x).sin());
    Ok(Phantom { series: ComplexSeries::new(re, im)?, blood_mask, myo_mask })
}

/// Spatial noise-amplification map.
#[derive(Clone, Debug, PartialEq)]
pub struct GFactorMap {
    pub g: Vec<f64>,
    pub r: f64,
    pub height: usize,
    pub width: usize,
}

impl GFactorMap {
    pub fn at(&self, y: usize, x: usize) -> f64 {
        self.g[y * self.width + x]
    }

    /// `(1, 1, 1, H, W)`.
    pub fn to_tensor(&self) -> Tensor5D<f64> {
        Tensor5D::new(Dims5::new(1, 1, 1, self.height, self.width), self.g.clone()).expect("map size")
    }

    pub fn from_tensor(t: &Tensor5D<f64>, r: f64) -> Result<Self> {
        let d = t.dims();
        if d.b != 1 || d.c != 1 || d.f != 1 {
            return Err(shape_err!("g-factor map must be (1, 1, 1, H, W), got {d}"));
        }
        if t.data().iter().any(|g| !(g.is_finite() && *g >= 1.0)) {
            return Err(Error::Config("g-factor values must be finite and ≥ 1".into()));
        }
        Ok(GFactorMap { g: t.data().to_vec(), r, height: d.h, width: d.w })
    }

    fn check(&self, d: Dims5) -> Result<()> {
        if (self.height, self.width) != (d.h, d.w) {
            return Err(shape_err!("g-factor map is {}×{}, series is {}×{}", self.height, self.width, d.h, d.w));
        }
        Ok(())
    }
}

/// `g = 1 + (R − 1)·exp(−r²/(2σ²))`, `σ = min(H, W)/4`, peaking at pixel `(H/2, W/2)`.
pub fn gen_gfactor(r: f64, height: usize, width: usize) -> Result<GFactorMap> {
    if !(r >= 1.0 && r.is_finite()) {
        return Err(Error::Config(format!("acceleration must be ≥ 1, got {r}")));
    }
    let sigma = height.min(width) as f64 / 4.0;
    let (cy, cx) = ((height / 2) as f64, (width / 2) as f64);
    let g = (0..height * width)
        .map(|i| {
            let (y, x) = ((i / width) as f64, (i % width) as f64);
            let d2 = (y - cy).powi(2) + (x - cx).powi(2);
            1.0 + (r - 1.0) * (-d2 / (2.0 * sigma * sigma)).exp()
        })
        .collect();
    Ok(GFactorMap { g, r, height, width })
}

/// Adds zero-mean Gaussian noise with SD `nn·g(y, x)` to both planes: the
/// whole real plane is drawn first, then the imaginary plane.
pub fn add_mr_noise(x: &ComplexSeries, nn: f64, g: &GFactorMap, seed: u64) -> Result<ComplexSeries> {
    if !(nn >= 0.0 && nn.is_finite()) {
        return Err(Error::Config(format!("noise SD must be ≥ 0, got {nn}")));
    }
    let d = x.dims();
    g.check(d)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let plane = d.plane();
    let mut noisy = |t: &Tensor5D<f64>| {
        let mut out = t.clone();
        for (i, v) in out.data_mut().iter_mut().enumerate() {
            let z: f64 = rng.sample(StandardNormal);
            *v += nn * g.g[i % plane] * z;
        }
        out
    };
    let re = noisy(&x.re);
    let im = noisy(&x.im);
    Ok(ComplexSeries { re, im, spacing: x.spacing })
}

/// Per-pixel `g` and `|x|` over foreground pixels of every frame.
fn foreground(x: &ComplexSeries, g: &GFactorMap) -> Result<Vec<(f64, f64)>> {
    let d = x.dims();
    g.check(d)?;
    let mag = x.magnitude();
    let max = mag.iter().cloned().fold(0.0, f64::max);
    let thr = FOREGROUND_FRACTION * max;
    let fg: Vec<(f64, f64)> =
        mag.iter().enumerate().filter(|(_, m)| **m > thr).map(|(i, m)| (*m, g.g[i % d.plane()])).collect();
    if fg.is_empty() {
        return Err(Error::Empty("no foreground pixels".into()));
    }
    Ok(fg)
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(|a, b| a.total_cmp(b));
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

fn median_snr_on(fg: &[(f64, f64)], nn: f64) -> f64 {
    median(fg.iter().map(|(m, g)| m / (1.0 + (nn * g).powi(2)).sqrt()).collect())
}

/// Median over foreground pixels and frames of `|x|/√(1 + (nn·g)²)`.
pub fn global_median_snr(x: &ComplexSeries, nn: f64, g: &GFactorMap) -> Result<f64> {
    if !(nn >= 0.0) {
        return Err(Error::Config(format!("noise SD must be ≥ 0, got {nn}")));
    }
    Ok(median_snr_on(&foreground(x, g)?, nn))
}

/// Noise SD that brings the global median SNR to `target`, by bisection.
pub fn solve_noise_sd(x: &ComplexSeries, g: &GFactorMap, target: f64) -> Result<f64> {
    if !(target > 0.0 && target.is_finite()) {
        return Err(Error::Config(format!("target SNR must be positive, got {target}")));
    }
    let fg = foreground(x, g)?;
    let current = median_snr_on(&fg, 0.0);
    if (target - current).abs() <= SOLVE_TOLERANCE * current {
        return Ok(0.0);
    }
    if target > current {
        return Err(Error::Infeasible(format!("target SNR {target} exceeds the clean median SNR {current:.4}")));
    }
    let mut hi = 1.0;
    while median_snr_on(&fg, hi) > target {
        hi *= 2.0;
        if !hi.is_finite() {
            return Err(Error::Infeasible(format!("no noise level reaches SNR {target}")));
        }
    }
    let mut lo = 0.0;
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if median_snr_on(&fg, mid) > target {
            lo = mid;
        } else {
            hi = mid;
        }
        if hi - lo <= SOLVE_TOLERANCE * hi {
            break;
        }
    }
    Ok(0.5 * (lo + hi))
}

/// Target SNR levels and the seed the per-level noise streams derive from.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NoiseLadder {
    pub targets: Vec<f64>,
    pub seed: u64,
}

/// The ten evaluation levels.
pub const DEFAULT_LADDER: [f64; 10] = [0.05, 0.1, 0.2, 0.5, 0.75, 1.0, 1.5, 2.0, 4.0, 8.0];

impl Default for NoiseLadder {
    fn default() -> Self {
        NoiseLadder { targets: DEFAULT_LADDER.to_vec(), seed: 0 }
    }
}

impl NoiseLadder {
    pub fn validate(&self) -> Result<()> {
        if self.targets.is_empty() {
            return Err(Error::Config("ladder has no levels".into()));
        }
        if self.targets.iter().any(|t| !(*t > 0.0 && t.is_finite())) {
            return Err(Error::Config("ladder targets must be positive".into()));
        }
        if self.targets.windows(2).any(|p| p[1] <= p[0]) {
            return Err(Error::Config("ladder targets must be strictly increasing".into()));
        }
        Ok(())
    }

    /// Independent noise seed for each level.
    pub fn level_seeds(&self) -> Vec<u64> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        self.targets.iter().map(|_| rng.next_u64()).collect()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LadderLevel {
    pub target: f64,
    pub nn: f64,
    pub seed: u64,
    /// Median SNR re-measured at the solved `nn`.
    pub measured: f64,
    pub noisy: ComplexSeries,
}

/// One corrupted copy of `x` per ladder target, in target order.
pub fn make_snr_ladder(x: &ComplexSeries, g: &GFactorMap, ladder: &NoiseLadder) -> Result<Vec<LadderLevel>> {
    ladder.validate()?;
    ladder
        .targets
        .iter()
        .zip(ladder.level_seeds())
        .map(|(&target, seed)| {
            let nn = solve_noise_sd(x, g, target)?;
            Ok(LadderLevel {
                target,
                nn,
                seed,
                measured: global_median_snr(x, nn, g)?,
                noisy: add_mr_noise(x, nn, g, seed)?,
            })
        })
        .collect()
}

/// Mean of `g` over the union of the given masks.
pub fn mean_g_over(g: &GFactorMap, masks: &[&Tensor5D<f64>]) -> Result<f64> {
    let mut sum = 0.0;
    let mut n = 0usize;
    for m in masks {
        g.check(m.dims())?;
        let plane = m.dims().plane();
        for (i, v) in m.data().iter().enumerate() {
            if *v > 0.5 {
                sum += g.g[i % plane];
                n += 1;
            }
        }
    }
    if n == 0 {
        return Err(Error::Empty("masks are empty".into()));
    }
    Ok(sum / n as f64)
}

/// Effective noise SD of a ladder level in SNR units: `√(1 + (nn·ḡ)²)`.
pub fn level_sigma(nn: f64, mean_g: f64) -> f64 {
    (1.0 + (nn * mean_g).powi(2)).sqrt()
}
