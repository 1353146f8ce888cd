//! Noisy/clean training pairs drawn from jittered phantoms.

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};
use crate::mrsim::{add_mr_noise, gen_gfactor, gen_phantom, solve_noise_sd, ComplexSeries, GFactorMap, PhantomSpec};
use crate::tensor::{Dims5, Tensor5D};

/// One network example in signal units: input `(1, 3, F, H, W)` holding
/// real, imaginary and g-factor channels, target `(1, 2, F, H, W)`.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub input: Tensor5D<f32>,
    pub target: Tensor5D<f32>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PairSpec {
    /// Base phantom; each pair reseeds it.
    pub phantom: PhantomSpec,
    pub count: usize,
    /// Target median SNR drawn uniformly from `[lo, hi]`.
    pub snr_range: (f64, f64),
    pub acceleration: f64,
    pub seed: u64,
}

impl Default for PairSpec {
    fn default() -> Self {
        PairSpec {
            phantom: PhantomSpec { jitter: 0.06, ..PhantomSpec::default() },
            count: 64,
            snr_range: (0.5, 2.0),
            acceleration: 4.0,
            seed: 0,
        }
    }
}

/// Stacks real, imaginary and the g-factor map replicated over frames.
pub fn model_input(noisy: &ComplexSeries, g: &GFactorMap) -> Result<Tensor5D<f32>> {
    let d = noisy.dims();
    if (g.height, g.width) != (d.h, d.w) {
        return Err(shape_err!("g-factor map {}×{} does not match series {}×{}", g.height, g.width, d.h, d.w));
    }
    let gplanes = Tensor5D::from_fn(d, |_, _, _, y, x| g.at(y, x));
    Ok(Tensor5D::concat_channels(&[&noisy.re, &noisy.im, &gplanes])?.cast())
}

pub fn target_of(clean: &ComplexSeries) -> Tensor5D<f32> {
    clean.to_channels().cast()
}

/// Seeded pairs; every pair has its own phantom, SNR and noise draw.
pub fn make_pairs(spec: &PairSpec) -> Result<Vec<Sample>> {
    let (lo, hi) = spec.snr_range;
    if !(lo > 0.0 && hi >= lo) {
        return Err(Error::Config(format!("SNR range ({lo}, {hi}) must be positive and ordered")));
    }
    if spec.count == 0 {
        return Err(Error::Empty("pair count is zero".into()));
    }
    let p = &spec.phantom;
    let g = gen_gfactor(spec.acceleration, p.height, p.width)?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    (0..spec.count)
        .map(|_| {
            let phantom = gen_phantom(&PhantomSpec { seed: rng.next_u64(), ..p.clone() })?;
            let target = if hi > lo { rng.random_range(lo..=hi) } else { lo };
            let nn = solve_noise_sd(&phantom.series, &g, target)?;
            let noisy = add_mr_noise(&phantom.series, nn, &g, rng.next_u64())?;
            Ok(Sample { input: model_input(&noisy, &g)?, target: target_of(&phantom.series) })
        })
        .collect()
}

/// Concatenates samples along the batch axis.
pub fn batch(samples: &[&Sample]) -> Result<(Tensor5D<f32>, Tensor5D<f32>)> {
    let inputs: Vec<&Tensor5D<f32>> = samples.iter().map(|s| &s.input).collect();
    let targets: Vec<&Tensor5D<f32>> = samples.iter().map(|s| &s.target).collect();
    Ok((Tensor5D::stack_batch(&inputs)?, Tensor5D::stack_batch(&targets)?))
}

/// Dims shared by every sample input, or an error.
pub fn common_dims(samples: &[Sample]) -> Result<Dims5> {
    let first = samples.first().ok_or_else(|| Error::Empty("dataset is empty".into()))?.input.dims();
    if samples.iter().any(|s| s.input.dims() != first || s.target.dims() != first.with_channels(2)) {
        return Err(shape_err!("samples differ in shape"));
    }
    Ok(first)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mrsim::global_median_snr;

    #[test]
    fn pairs_are_seeded_and_shaped() {
        let spec = PairSpec { count: 3, ..PairSpec::default() };
        let a = make_pairs(&spec).unwrap();
        assert_eq!(a, make_pairs(&spec).unwrap());
        assert_eq!(common_dims(&a).unwrap(), Dims5::new(1, 3, 4, 32, 32));
        assert_ne!(a[0].target, a[1].target);
        let (x, y) = batch(&[&a[0], &a[2]]).unwrap();
        assert_eq!((x.dims().b, y.dims().c), (2, 2));
        assert_eq!(x.at(0, 2, 3, 16, 16), 4.0);
        assert!(make_pairs(&PairSpec { count: 0, ..spec.clone() }).is_err());
        assert!(make_pairs(&PairSpec { snr_range: (2.0, 1.0), ..spec }).is_err());
    }

    #[test]
    fn pair_noise_lands_in_range() {
        let spec = PairSpec { count: 4, snr_range: (1.0, 1.0), ..PairSpec::default() };
        let g = gen_gfactor(4.0, 32, 32).unwrap();
        for s in make_pairs(&spec).unwrap() {
            let clean = ComplexSeries::from_channels(&s.target.cast(), 0).unwrap();
            let noisy = ComplexSeries::from_channels(&s.input.cast(), 0).unwrap();
            let nn = solve_noise_sd(&clean, &g, 1.0).unwrap();
            assert!((global_median_snr(&clean, nn, &g).unwrap() - 1.0).abs() < 1e-3);
            let resid: f64 = noisy.re.data().iter().zip(clean.re.data()).map(|(a, b)| (a - b).powi(2)).sum::<f64>()
                / clean.re.data().len() as f64;
            assert!(resid.sqrt() > nn);
        }
    }
}
