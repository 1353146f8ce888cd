//! Shared fixtures for the criterion benches.

use itx_core::{AttentionConfig, AttentionKind, AttentionParams, Dims5, Tensor5D, WindowSpec};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Random `(1, C, F, S, S)` input and seeded attention parameters.
pub fn attention_case(
    kind: AttentionKind,
    channels: usize,
    frames: usize,
    size: usize,
) -> (Tensor5D<f32>, AttentionConfig, AttentionParams<f32>) {
    let ws = WindowSpec::new(8, 2).expect("fixed window");
    let mut cfg = AttentionConfig::new(kind, ws, 2, channels).with_bias_grid((size.div_ceil(8), size.div_ceil(8)));
    if kind == AttentionKind::Frame {
        cfg = cfg.without_bias();
    }
    let params = AttentionParams::init(&cfg, &mut ChaCha8Rng::seed_from_u64(0));
    (Tensor5D::randn(Dims5::new(1, channels, frames, size, size), 1), cfg, params)
}
