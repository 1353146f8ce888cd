//! Wall-time scaling of the attention mechanisms against a dense oracle.

use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::attention::{frame_attention, global_attention, local_attention, AttentionConfig, AttentionKind, AttentionParams};
use crate::error::{shape_err, Error, Result};
use crate::layout::WindowSpec;
use crate::real::{gemm, Strides};
use crate::tensor::{Dims5, Tensor5D};

/// Query rows processed per dense-attention chunk.
const DENSE_CHUNK: usize = 256;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BenchConfig {
    pub sizes: Vec<usize>,
    pub channels: usize,
    pub frames: usize,
    pub window: usize,
    pub patch: usize,
    pub heads: usize,
    /// Timed repetitions per point; the minimum is reported.
    pub repeats: usize,
}

impl Default for BenchConfig {
    fn default() -> Self {
        BenchConfig { sizes: vec![32, 64, 128, 256], channels: 64, frames: 1, window: 8, patch: 2, heads: 4, repeats: 3 }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Mechanism {
    #[serde(rename = "local")]
    Local,
    #[serde(rename = "global")]
    Global,
    #[serde(rename = "frame")]
    Frame,
    #[serde(rename = "dense")]
    Dense,
}

impl Mechanism {
    pub const ALL: [Mechanism; 4] = [Mechanism::Local, Mechanism::Global, Mechanism::Frame, Mechanism::Dense];

    pub fn name(self) -> &'static str {
        match self {
            Mechanism::Local => "local",
            Mechanism::Global => "global",
            Mechanism::Frame => "frame",
            Mechanism::Dense => "dense",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchRow {
    pub mechanism: Mechanism,
    pub size: usize,
    pub pixels: usize,
    pub seconds: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchReport {
    pub rows: Vec<BenchRow>,
    /// Exponent of local + global time against pixel count.
    pub decomposed_exponent: f64,
    pub dense_exponent: f64,
}

/// Least-squares slope of `ln y` on `ln x`.
pub fn fit_exponent(x: &[f64], y: &[f64]) -> Result<f64> {
    if x.len() != y.len() || x.len() < 2 {
        return Err(shape_err!("need at least two paired points, got {} and {}", x.len(), y.len()));
    }
    if x.iter().chain(y).any(|v| !(*v > 0.0)) {
        return Err(Error::Config("log-log fit needs positive values".into()));
    }
    let lx: Vec<f64> = x.iter().map(|v| v.ln()).collect();
    let ly: Vec<f64> = y.iter().map(|v| v.ln()).collect();
    let n = lx.len() as f64;
    let (mx, my) = (lx.iter().sum::<f64>() / n, ly.iter().sum::<f64>() / n);
    let sxx: f64 = lx.iter().map(|a| (a - mx).powi(2)).sum();
    if sxx == 0.0 {
        return Err(Error::Config("log-log fit needs distinct x values".into()));
    }
    let sxy: f64 = lx.iter().zip(&ly).map(|(a, b)| (a - mx) * (b - my)).sum();
    Ok(sxy / sxx)
}

/// Full attention among all `p × p` patches of each frame with `Q = K = V`
/// the patch vectors; the quadratic reference.
pub fn dense_attention(x: &Tensor5D<f32>, patch: usize) -> Result<Tensor5D<f32>> {
    let d = x.dims();
    if patch == 0 || d.h % patch != 0 || d.w % patch != 0 {
        return Err(shape_err!("patch {patch} does not tile {}×{}", d.h, d.w));
    }
    let (ph, pw) = (d.h / patch, d.w / patch);
    let n = ph * pw;
    let dim = d.c * patch * patch;
    let scale = 1.0 / (dim as f32).sqrt();
    let mut out = Tensor5D::zeros(d);
    let mut tokens = vec![0f32; n * dim];
    let mut logits = vec![0f32; DENSE_CHUNK * n];
    let mut res = vec![0f32; DENSE_CHUNK * dim];
    for b in 0..d.b {
        for f in 0..d.f {
            let to_token = |t: usize, k: usize| {
                let (c, r) = (k / (patch * patch), k % (patch * patch));
                (c, (t / pw) * patch + r / patch, (t % pw) * patch + r % patch)
            };
            for t in 0..n {
                for k in 0..dim {
                    let (c, y, xx) = to_token(t, k);
                    tokens[t * dim + k] = x.at(b, c, f, y, xx);
                }
            }
            for start in (0..n).step_by(DENSE_CHUNK) {
                let rows = DENSE_CHUNK.min(n - start);
                let q = Strides::row_major(start * dim, dim);
                gemm(rows, dim, n, scale, &tokens, q, &tokens, Strides::col_major(0, dim), 0.0, &mut logits, Strides::row_major(0, n));
                for row in logits[..rows * n].chunks_mut(n) {
                    let m = row.iter().cloned().fold(f32::NEG_INFINITY, f32::max);
                    let mut s = 0.0;
                    for v in row.iter_mut() {
                        *v = (*v - m).exp();
                        s += *v;
                    }
                    row.iter_mut().for_each(|v| *v /= s);
                }
                gemm(rows, n, dim, 1.0, &logits, Strides::row_major(0, n), &tokens, Strides::row_major(0, dim), 0.0, &mut res, Strides::row_major(0, dim));
                for r in 0..rows {
                    for k in 0..dim {
                        let (c, y, xx) = to_token(start + r, k);
                        out.set(b, c, f, y, xx, res[r * dim + k]);
                    }
                }
            }
        }
    }
    Ok(out)
}

fn time_min(repeats: usize, mut f: impl FnMut() -> Result<()>) -> Result<f64> {
    let mut best = f64::INFINITY;
    for _ in 0..repeats.max(1) {
        let t = Instant::now();
        f()?;
        best = best.min(t.elapsed().as_secs_f64());
    }
    Ok(best)
}

/// Times one mechanism at one frame size.
pub fn time_mechanism(cfg: &BenchConfig, mech: Mechanism, size: usize) -> Result<f64> {
    let ws = WindowSpec::new(cfg.window, cfg.patch)?;
    let x = Tensor5D::<f32>::randn(Dims5::new(1, cfg.channels, cfg.frames, size, size), size as u64);
    let kind = match mech {
        Mechanism::Local => AttentionKind::Local,
        Mechanism::Global => AttentionKind::Global,
        Mechanism::Frame => AttentionKind::Frame,
        Mechanism::Dense => return time_min(cfg.repeats, || dense_attention(&x, cfg.patch).map(drop)),
    };
    let grid = (size.div_ceil(cfg.window), size.div_ceil(cfg.window));
    let mut att = AttentionConfig::new(kind, ws, cfg.heads, cfg.channels).with_bias_grid(grid);
    if kind == AttentionKind::Frame {
        att = att.without_bias();
    }
    let params = AttentionParams::<f32>::init(&att, &mut ChaCha8Rng::seed_from_u64(0));
    let run = match kind {
        AttentionKind::Local => local_attention::<f32>,
        AttentionKind::Global => global_attention::<f32>,
        AttentionKind::Frame => frame_attention::<f32>,
    };
    time_min(cfg.repeats, || run(&x, &att, &params).map(drop))
}

/// Times every mechanism at every size and fits growth exponents.
pub fn run_bench(cfg: &BenchConfig, mut progress: impl FnMut(&BenchRow)) -> Result<BenchReport> {
    if cfg.sizes.len() < 2 {
        return Err(Error::Config("benchmark needs at least two sizes".into()));
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(1)
        .build()
        .map_err(|e| Error::Config(format!("benchmark thread pool: {e}")))?;
    let mut rows = vec![];
    for &size in &cfg.sizes {
        for mech in Mechanism::ALL {
            let seconds = pool.install(|| time_mechanism(cfg, mech, size))?;
            let row = BenchRow { mechanism: mech, size, pixels: size * size, seconds };
            progress(&row);
            rows.push(row);
        }
    }
    let pixels: Vec<f64> = cfg.sizes.iter().map(|s| (s * s) as f64).collect();
    let series = |pick: &dyn Fn(Mechanism) -> bool| -> Vec<f64> {
        cfg.sizes
            .iter()
            .map(|&s| rows.iter().filter(|r| r.size == s && pick(r.mechanism)).map(|r| r.seconds).sum())
            .collect()
    };
    let decomposed = series(&|m| matches!(m, Mechanism::Local | Mechanism::Global));
    let dense = series(&|m| m == Mechanism::Dense);
    Ok(BenchReport { decomposed_exponent: fit_exponent(&pixels, &decomposed)?, dense_exponent: fit_exponent(&pixels, &dense)?, rows })
}

pub fn write_bench_csv<W: std::io::Write>(mut out: W, report: &BenchReport) -> Result<()> {
    writeln!(out, "mechanism,size,pixels,seconds")?;
    for r in &report.rows {
        writeln!(out, "{},{},{},{}", r.mechanism.name(), r.size, r.pixels, r.seconds)?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::testutil::random_tensor;

    #[test]
    fn exponent_fit_recovers_powers() {
        let x = [1.0, 4.0, 16.0, 64.0];
        let lin: Vec<f64> = x.iter().map(|v| 3.0 * v).collect();
        let quad: Vec<f64> = x.iter().map(|v| 0.5 * v * v).collect();
        assert!((fit_exponent(&x, &lin).unwrap() - 1.0).abs() < 1e-12);
        assert!((fit_exponent(&x, &quad).unwrap() - 2.0).abs() < 1e-12);
        assert!(fit_exponent(&[1.0], &[1.0]).is_err());
        assert!(fit_exponent(&[1.0, 2.0], &[0.0, 1.0]).is_err());
    }

    #[test]
    fn dense_matches_direct_softmax() {
        let x = random_tensor::<f32>(Dims5::new(1, 2, 1, 4, 6), 1);
        let y = dense_attention(&x, 2).unwrap();
        let tok = |t: usize| -> Vec<f64> {
            let (ty, tx) = (t / 3, t % 3);
            let mut v = vec![];
            for c in 0..2 {
                for dy in 0..2 {
                    for dx in 0..2 {
                        v.push(x.at(0, c, 0, 2 * ty + dy, 2 * tx + dx) as f64);
                    }
                }
            }
            v
        };
        let toks: Vec<Vec<f64>> = (0..6).map(tok).collect();
        for i in 0..6 {
            let l: Vec<f64> = toks.iter().map(|t| t.iter().zip(&toks[i]).map(|(a, b)| a * b).sum::<f64>() / 8f64.sqrt()).collect();
            let m = l.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let e: Vec<f64> = l.iter().map(|v| (v - m).exp()).collect();
            let z: f64 = e.iter().sum();
            for k in 0..8 {
                let want: f64 = (0..6).map(|j| e[j] / z * toks[j][k]).sum();
                let (c, dy, dx) = (k / 4, (k % 4) / 2, k % 2);
                let got = y.at(0, c, 0, 2 * (i / 3) + dy, 2 * (i % 3) + dx) as f64;
                assert!((got - want).abs() < 1e-5);
            }
        }
    }

    #[test]
    fn small_bench_runs() {
        let cfg = BenchConfig { sizes: vec![16, 32], channels: 4, heads: 2, repeats: 1, ..BenchConfig::default() };
        let r = run_bench(&cfg, |_| {}).unwrap();
        assert_eq!(r.rows.len(), 8);
        let mut csv = vec![];
        write_bench_csv(&mut csv, &r).unwrap();
        assert_eq!(String::from_utf8(csv).unwrap().lines().count(), 9);
    }
}
