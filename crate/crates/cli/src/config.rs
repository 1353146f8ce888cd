use std::path::{Path, PathBuf};

use itx_core::complexity::BenchConfig;
use itx_core::data::PairSpec;
use itx_core::mrsim::{NoiseLadder, PhantomSpec};
use itx_core::train::TrainConfig;
use itx_core::ModelConfig;
use serde::{Deserialize, Serialize};

/// Everything a run needs, read from one TOML file. Every key is required and
/// unknown keys are rejected.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    /// Seeds model initialization and training-pair generation.
    pub seed: u64,
    pub out: PathBuf,
    /// Parallel-imaging acceleration of the g-factor map.
    pub acceleration: f64,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub pairs: PairsConfig,
    pub phantom: PhantomSpec,
    pub ladder: NoiseLadder,
    pub bench: BenchConfig,
}

/// Training pairs: jittered copies of `phantom` at SNRs drawn from `snr_range`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PairsConfig {
    pub count: usize,
    pub snr_range: (f64, f64),
    pub jitter: f64,
}

/// Error for a config file that does not parse or validate.
#[derive(Debug)]
pub struct ConfigError(pub String);

impl std::fmt::Display for ConfigError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for ConfigError {}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self, ConfigError> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| ConfigError(e.message().to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> anyhow::Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| ConfigError(format!("cannot read {}: {e}", path.display())))?;
        Ok(Self::parse(&text).map_err(|e| ConfigError(format!("{}: {e}", path.display())))?)
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let wrap = |e: itx_core::Error| ConfigError(e.to_string());
        self.model.validate().map_err(wrap)?;
        self.train.validate().map_err(wrap)?;
        self.phantom.validate().map_err(wrap)?;
        self.ladder.validate().map_err(wrap)?;
        if !(self.acceleration >= 1.0 && self.acceleration.is_finite()) {
            return Err(ConfigError(format!("acceleration must be at least 1, got {}", self.acceleration)));
        }
        if (self.model.height, self.model.width) != (self.phantom.height, self.phantom.width) {
            return Err(ConfigError(format!(
                "model is sized {}×{} but phantoms are {}×{}",
                self.model.height, self.model.width, self.phantom.height, self.phantom.width
            )));
        }
        Ok(())
    }

    pub fn pair_spec(&self) -> PairSpec {
        PairSpec {
            phantom: PhantomSpec { jitter: self.pairs.jitter, ..self.phantom.clone() },
            count: self.pairs.count,
            snr_range: self.pairs.snr_range,
            acceleration: self.acceleration,
            seed: self.seed,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const DESK: &str = include_str!("../../../configs/desk.toml");

    #[test]
    fn desk_config_parses_and_roundtrips() {
        let cfg = RunConfig::parse(DESK).unwrap();
        assert_eq!(cfg.model.block_spec.to_string(), "FLG");
        assert_eq!(cfg.ladder.targets.len(), 10);
        let text = toml::to_string(&cfg).unwrap();
        assert_eq!(RunConfig::parse(&text).unwrap(), cfg);
    }

    #[test]
    fn missing_field_is_named() {
        let text = DESK.replace("heads = 2\n", "");
        let err = RunConfig::parse(&text).unwrap_err();
        assert!(err.0.contains("heads"), "{err}");
    }

    #[test]
    fn unknown_key_is_rejected() {
        let text = DESK.replace("[model]\n", "[model]\nwidht = 3\n");
        let err = RunConfig::parse(&text).unwrap_err();
        assert!(err.0.contains("widht"), "{err}");
    }

    #[test]
    fn bad_spec_string_and_size_mismatch() {
        assert!(RunConfig::parse(&DESK.replace("\"FLG\"", "\"FLQ\"")).is_err());
        let err = RunConfig::parse(&DESK.replace("height = 32\nwidth = 32\n\n[train]", "height = 16\nwidth = 16\n\n[train]"))
            .unwrap_err();
        assert!(err.0.contains("16×16"), "{err}");
    }
}
