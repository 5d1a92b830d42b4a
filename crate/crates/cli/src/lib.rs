//! Command-line front end for the PET toolkit.

pub mod bench;
pub mod commands;

use std::path::Path;

use pet_core::embedding::{EmbeddingError, FeatureConfig};
use pet_core::training::{SyntheticTaskSpec, TrainConfig, TrainingError};
use pet_core::transducer::{ModelDims, TransducerError};
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use bench::{benchmark, BenchmarkReport, ConfigMean, RunResult};
pub use commands::{run, Cli};

#[derive(Debug, Error)]
pub enum CliError {
    #[error("usage: {0}")]
    Usage(String),
    #[error("data: {0}")]
    Data(String),
    #[error("numerical failure: {0}")]
    Numerical(String),
}

impl CliError {
    /// 1 usage error, 2 data error, 3 numerical failure.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 1,
            CliError::Data(_) => 2,
            CliError::Numerical(_) => 3,
        }
    }
}

impl From<TrainingError> for CliError {
    fn from(e: TrainingError) -> Self {
        match e {
            TrainingError::DivergenceDetected { .. }
            | TrainingError::Transducer(TransducerError::NumericalUnderflow(_)) => CliError::Numerical(e.to_string()),
            TrainingError::InvalidSpec(_) | TrainingError::InvalidConfig(_) => CliError::Usage(e.to_string()),
            _ => CliError::Data(e.to_string()),
        }
    }
}

impl From<EmbeddingError> for CliError {
    fn from(e: EmbeddingError) -> Self {
        CliError::Usage(e.to_string())
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Data(e.to_string())
    }
}

/// `"<decoder>[-<joiner>]"`, e.g. `"V"` or `"CV-CVTW"`; letters in any order,
/// joiner defaults to `W`. Tone letters need a tonal lexicon.
pub fn parse_feature_string(s: &str, tonal: bool) -> Result<FeatureConfig, EmbeddingError> {
    let cfg: FeatureConfig = s.parse()?;
    cfg.validate(tonal)?;
    Ok(cfg)
}

/// Structured-text (TOML) configuration shared by `train` and `benchmark`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    /// Feature string for `train`.
    pub features: String,
    /// Feature strings compared by `benchmark`.
    pub configs: Vec<String>,
    /// One run per config and seed in `benchmark`.
    pub seeds: Vec<u64>,
    pub n_train: usize,
    /// Held out for checkpoint selection.
    pub n_valid: usize,
    /// Held out for the error analysis in `benchmark`.
    pub n_eval: usize,
    pub dims: ModelDims,
    pub data: SyntheticTaskSpec,
    pub train: TrainConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            features: "W".into(),
            configs: vec!["W".into(), "V".into()],
            seeds: vec![0, 1, 2],
            n_train: 2000,
            n_valid: 200,
            n_eval: 1000,
            dims: ModelDims::default(),
            data: SyntheticTaskSpec::default(),
            train: TrainConfig {
                steps: 3000,
                learning_rate: 3e-3,
                n_checkpoints_to_average: 5,
                ..TrainConfig::default()
            },
        }
    }
}

impl ExperimentConfig {
    pub fn from_toml(src: &str) -> Result<Self, CliError> {
        let cfg: Self = toml::from_str(src).map_err(|e| CliError::Usage(format!("config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, CliError> {
        let src = std::fs::read_to_string(path).map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))?;
        Self::from_toml(&src)
    }

    pub fn validate(&self) -> Result<(), CliError> {
        self.data.validate()?;
        self.train.validate()?;
        if self.n_train == 0 || self.n_valid == 0 {
            return Err(CliError::Usage("n_train and n_valid must be positive".into()));
        }
        if self.dims.input_dim != self.data.feature_dim {
            return Err(CliError::Usage(format!(
                "dims.input_dim ({}) must equal data.feature_dim ({})",
                self.dims.input_dim, self.data.feature_dim
            )));
        }
        let d = self.dims;
        if d.encoder_dim == 0 || d.embed_dim == 0 || d.decoder_dim == 0 {
            return Err(CliError::Usage("model dimensions must be positive".into()));
        }
        let tonal = self.data.tone_count > 0;
        parse_feature_string(&self.features, tonal)?;
        for c in &self.configs {
            parse_feature_string(c, tonal)?;
        }
        Ok(())
    }
}
