//! The run configuration file and its resolved hash.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use tryon_core::keyframes::LongVideoConfig;
use tryon_toy::infer::InferConfig;
use tryon_toy::synth::MotionSpec;
use tryon_toy::train::TrainConfig;

use crate::error::CliError;

/// Synthetic clip produced by `gen-data` (and by `train-toy` without `--data`).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    pub frames: usize,
    pub height: usize,
    pub width: usize,
    pub motion: MotionSpec,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            frames: 8,
            height: 64,
            width: 48,
            motion: MotionSpec::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AblateConfig {
    /// Attention-loss weights; every value is run with consistency on and off.
    pub lambda_agn: Vec<f64>,
    /// Noise levels of the attention-mass probe.
    pub probe_sigmas: Vec<f64>,
}

impl Default for AblateConfig {
    fn default() -> Self {
        Self {
            lambda_agn: vec![0.0, 0.05, 0.1, 0.5],
            probe_sigmas: vec![0.5, 1.0, 2.0],
        }
    }
}

/// Every module's settings in one file. Unknown keys are rejected.
///
/// The top-level `seed` is copied into the training and sampling seeds on resolution,
/// so a resolved file is self-consistent.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    pub data: DataConfig,
    pub train: TrainConfig,
    pub infer: InferConfig,
    pub long: LongVideoConfig,
    pub ablate: AblateConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            data: DataConfig::default(),
            train: TrainConfig::default(),
            infer: InferConfig::default(),
            long: LongVideoConfig::default(),
            ablate: AblateConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::io(format!("cannot read config {}: {e}", path.display())))?;
        Self::parse(&text)
    }

    pub fn parse(text: &str) -> Result<Self, CliError> {
        toml::from_str(text).map_err(|e| CliError::usage(format!("bad config: {}", one_line(&e.to_string()))))
    }

    /// Propagates the top-level seed and checks every section.
    pub fn resolve(mut self) -> Result<Self, CliError> {
        self.train.seed = self.seed;
        self.infer.seed = self.seed;
        let usage = |e: String| CliError::usage(format!("bad config: {e}"));
        self.train.validate().map_err(|e| usage(e.to_string()))?;
        self.infer.schedule.validate().map_err(|e| usage(e.to_string()))?;
        if self.infer.window == 0 {
            return Err(usage("infer.window must be positive".into()));
        }
        if self.long.overlap >= self.long.window {
            return Err(usage(format!(
                "long.overlap {} must be below long.window {}",
                self.long.overlap, self.long.window
            )));
        }
        if !(self.long.d_pose > 0.0) || self.long.s_max == 0 {
            return Err(usage("long.d_pose and long.s_max must be positive".into()));
        }
        if self.data.frames == 0 {
            return Err(usage("data.frames must be positive".into()));
        }
        Ok(self)
    }

    pub fn to_toml(&self) -> Result<String, CliError> {
        toml::to_string(self).map_err(|e| CliError::runtime(format!("cannot serialise config: {e}")))
    }

    /// SHA-256 of the resolved TOML text, hex encoded.
    pub fn hash(&self) -> Result<String, CliError> {
        Ok(hex::encode(Sha256::digest(self.to_toml()?.as_bytes())))
    }
}

pub fn one_line(s: &str) -> String {
    s.split_whitespace().collect::<Vec<_>>().join(" ")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip_through_toml() {
        let c = RunConfig::default().resolve().unwrap();
        let back = RunConfig::parse(&c.to_toml().unwrap()).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.hash().unwrap(), c.hash().unwrap());
        assert_eq!(c.hash().unwrap().len(), 64);
    }

    #[test]
    fn unknown_keys_are_usage_errors() {
        for text in ["sed = 3", "[train]\nlearning_rat = 0.1", "[long]\nwindow = 8\nextra = 1"] {
            let err = RunConfig::parse(text).unwrap_err();
            assert_eq!(err.kind, crate::error::ErrorKind::Usage, "{text}");
        }
    }

    #[test]
    fn partial_files_keep_defaults_and_seed_propagates() {
        let c = RunConfig::parse("seed = 9\n[train]\nsteps = 3\n").unwrap().resolve().unwrap();
        assert_eq!(c.train.steps, 3);
        assert_eq!(c.train.learning_rate, 5e-5);
        assert_eq!((c.train.seed, c.infer.seed), (9, 9));
    }

    #[test]
    fn hash_changes_with_any_setting() {
        let a = RunConfig::default().resolve().unwrap();
        let mut b = a.clone();
        b.train.loss.lambda_n = 0.1;
        assert_ne!(a.hash().unwrap(), b.hash().unwrap());
    }

    #[test]
    fn invalid_values_are_rejected() {
        let bad = RunConfig::parse("[long]\nwindow = 4\noverlap = 4\n").unwrap().resolve();
        assert!(bad.is_err());
        let bad = RunConfig::parse("[train]\nlearning_rate = -1.0\n").unwrap().resolve();
        assert!(bad.is_err());
    }
}
