use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::corpus::KbLevel;
use crate::encoder::EncoderConfig;
use crate::feedback::{FeedbackConfig, LossMode, NegativeSelectionConfig, Polarity, Strategy};
use crate::generator::llm::LlmConfig;
use crate::generator::OracleGenConfig;
use crate::pretrain::InfoNceConfig;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("invalid configuration: {0}")]
    Invalid(String),
    #[error("reading {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("parsing {path}: {source}")]
    Parse {
        path: String,
        source: toml::de::Error,
    },
}

/// Which entities a turn may retrieve from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RetrievalScope {
    /// The whole knowledge base.
    Dataset,
    /// Only the dialogue's own session entities.
    Session,
}

impl From<KbLevel> for RetrievalScope {
    fn from(level: KbLevel) -> Self {
        match level {
            KbLevel::Dataset => RetrievalScope::Dataset,
            KbLevel::Session => RetrievalScope::Session,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub k: usize,
    pub beam: usize,
    /// Fixed retriever learning rate.
    pub lr: f64,
    pub weight_decay: f64,
    /// Optimizer steps before the retriever starts updating.
    pub start_step: u64,
    /// Total optimizer steps, warm-up included.
    pub steps: u64,
    pub accumulation: usize,
    pub batch_size: usize,
    /// Full index re-encode cadence, in optimizer steps.
    pub refresh_every: u64,
    pub validate_every: u64,
    pub seed: u64,
    pub strategy: Strategy,
    pub polarity: Polarity,
    pub eta: f64,
    pub tau: f64,
    pub loss_mode: LossMode,
    /// Fraction of examples whose adapter calls may fail before the run
    /// aborts.
    pub max_failure_rate: f64,
    pub scope: RetrievalScope,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self::for_level(KbLevel::Dataset)
    }
}

impl TrainConfig {
    pub fn for_level(level: KbLevel) -> Self {
        let (k, start_step) = match level {
            KbLevel::Dataset => (10, 750),
            KbLevel::Session => (6, 625),
        };
        Self {
            k,
            beam: 5,
            lr: 2e-5,
            weight_decay: 0.0,
            start_step,
            steps: 1500,
            accumulation: 32,
            batch_size: 2,
            refresh_every: 100,
            validate_every: 250,
            seed: 0,
            strategy: Strategy::RankBleu,
            polarity: Polarity::default(),
            eta: 0.1,
            tau: 1.0,
            loss_mode: LossMode::Dual,
            max_failure_rate: 0.1,
            scope: level.into(),
        }
    }

    pub fn feedback(&self) -> FeedbackConfig {
        FeedbackConfig {
            tau: self.tau,
            eta: self.eta,
            mode: self.loss_mode,
            selection: NegativeSelectionConfig {
                strategy: self.strategy,
                beam: self.beam,
                polarity: self.polarity,
            },
        }
    }

    pub fn examples_per_step(&self) -> usize {
        self.accumulation * self.batch_size
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let bad = |m: &str| Err(ConfigError::Invalid(m.to_string()));
        if self.k == 0 {
            return bad("k must be at least 1");
        }
        if self.start_step > self.steps {
            return bad("start_step must not exceed steps");
        }
        if self.refresh_every == 0 || self.validate_every == 0 {
            return bad("refresh_every and validate_every must be at least 1");
        }
        if self.accumulation == 0 || self.batch_size == 0 {
            return bad("accumulation and batch_size must be at least 1");
        }
        if !(self.lr >= 0.0 && self.lr.is_finite()) || !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return bad("lr and weight_decay must be finite and non-negative");
        }
        if !(0.0..=1.0).contains(&self.max_failure_rate) {
            return bad("max_failure_rate must lie in [0, 1]");
        }
        self.feedback()
            .validate()
            .map_err(|e| ConfigError::Invalid(e.to_string()))
    }

    /// Hex SHA-256 of the canonical JSON form.
    pub fn hash(&self) -> String {
        let json = serde_json::to_vec(self).expect("config serializes");
        hex::encode(Sha256::digest(&json))
    }
}

/// Everything a run needs, loadable from one TOML document. Sections
/// that are absent keep their defaults.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub encoder: EncoderConfig,
    pub pretrain: InfoNceConfig,
    pub train: TrainConfig,
    pub oracle: OracleGenConfig,
    pub llm: LlmConfig,
}

impl RunConfig {
    pub fn from_toml_str(text: &str, origin: &str) -> Result<Self, ConfigError> {
        toml::from_str(text).map_err(|source| ConfigError::Parse {
            path: origin.to_string(),
            source,
        })
    }

    pub fn from_file(path: impl AsRef<Path>) -> Result<Self, ConfigError> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::from_toml_str(&text, &path.display().to_string())
    }

    /// Defaults for `level`, with the file applied on top.
    pub fn load(path: Option<&Path>, level: KbLevel) -> Result<Self, ConfigError> {
        let mut base = RunConfig {
            train: TrainConfig::for_level(level),
            ..RunConfig::default()
        };
        if let Some(path) = path {
            let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
                path: path.display().to_string(),
                source,
            })?;
            let mut doc: toml::Table = toml::from_str(&text).map_err(|source| ConfigError::Parse {
                path: path.display().to_string(),
                source,
            })?;
            // Level-specific train defaults first, then the file's keys.
            let mut train = toml::Table::try_from(base.train).expect("train config serializes");
            if let Some(toml::Value::Table(over)) = doc.remove("train") {
                train.extend(over);
            }
            doc.insert("train".into(), toml::Value::Table(train));
            base = toml::Value::Table(doc)
                .try_into()
                .map_err(|source| ConfigError::Parse {
                    path: path.display().to_string(),
                    source,
                })?;
        }
        Ok(base)
    }
}
