//! Optimization, training and evaluation drivers.

pub mod config;
pub mod eval;
pub mod optim;
pub mod train;

use thiserror::Error;

use crate::corpus::CorpusError;
use crate::encoder::EncoderError;
use crate::feedback::FeedbackError;
use crate::generator::AdapterError;
use crate::metrics::MetricsError;
use crate::retriever::RetrieverError;

pub use config::{ConfigError, RetrievalScope, RunConfig, TrainConfig};
pub use eval::{evaluate, sweep_k, sweep_table, EvalConfig, EvalOutput, EvalReport, SweepRow, TurnRecord};
pub use optim::{adam_step, lr_at, AdamState, OptimError, Schedule};
pub use train::{load_best, save_checkpoint_with_meta, trace_turn, train, Checkpoint, CheckpointMeta, TraceRecord, TrainOutcome};

#[derive(Debug, Error)]
pub enum RuntimeError {
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("invalid data: {0}")]
    Data(String),
    #[error("aborting: {failures} of {attempted} generator calls failed (last error: {last})")]
    TooManyFailures {
        failures: usize,
        attempted: usize,
        last: String,
    },
    #[error(transparent)]
    Corpus(#[from] CorpusError),
    #[error(transparent)]
    Encoder(#[from] EncoderError),
    #[error(transparent)]
    Retriever(#[from] RetrieverError),
    #[error(transparent)]
    Feedback(#[from] FeedbackError),
    #[error(transparent)]
    Adapter(#[from] AdapterError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error(transparent)]
    Optim(#[from] OptimError),
    #[error("i/o: {0}")]
    Io(#[from] std::io::Error),
}

impl From<ConfigError> for RuntimeError {
    fn from(e: ConfigError) -> Self {
        RuntimeError::Config(e.to_string())
    }
}
