//! Black-box generator contract and its implementations.

mod echo;
pub mod llm;
mod oracle;
pub mod transport;

pub use echo::EchoAdapter;
pub use oracle::{EntityWeighting, OracleGenConfig, OracleGenerator, TokenDist, MAX_SEARCH_SPACE};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{DialogueContext, Entity};

#[derive(Debug, Error)]
pub enum AdapterError {
    #[error("invalid generator input: {0}")]
    InvalidInput(String),
    #[error("transient generator failure: {0}")]
    Transient(String),
    #[error("unparseable generator output: {0}")]
    Parse(String),
    #[error("generator failed: {0}")]
    Hard(String),
}

impl AdapterError {
    pub fn is_retryable(&self) -> bool {
        matches!(self, AdapterError::Transient(_) | AdapterError::Parse(_))
    }
}

pub type Result<T, E = AdapterError> = std::result::Result<T, E>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Hypothesis {
    pub tokens: Vec<String>,
    /// Length-normalized log probability, or a self-reported confidence.
    pub log_score: f64,
}

impl Hypothesis {
    /// Tokens joined by spaces, without any end-of-sequence marker.
    pub fn text(&self, eos: &str) -> String {
        self.tokens
            .iter()
            .filter(|t| *t != eos)
            .cloned()
            .collect::<Vec<_>>()
            .join(" ")
    }
}

/// Up to M distinct hypotheses, best first.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct HypothesisSet {
    pub hypotheses: Vec<Hypothesis>,
    /// Fewer than the requested M distinct hypotheses existed.
    pub short: bool,
}

impl HypothesisSet {
    pub fn len(&self) -> usize {
        self.hypotheses.len()
    }

    pub fn is_empty(&self) -> bool {
        self.hypotheses.is_empty()
    }

    /// Sorts by score (ties: lexicographic tokens), drops duplicate token
    /// sequences and keeps the best `m`.
    pub fn from_candidates(mut candidates: Vec<Hypothesis>, m: usize) -> Self {
        candidates.sort_by(|a, b| {
            b.log_score
                .total_cmp(&a.log_score)
                .then_with(|| a.tokens.cmp(&b.tokens))
        });
        let mut seen = std::collections::HashSet::new();
        let hypotheses: Vec<Hypothesis> = candidates
            .into_iter()
            .filter(|h| seen.insert(h.tokens.clone()))
            .take(m)
            .collect();
        Self {
            short: hypotheses.len() < m,
            hypotheses,
        }
    }
}

/// A response generator used only through its scores and outputs.
pub trait GeneratorAdapter: Sync {
    /// Text used to strip end-of-sequence markers from hypotheses.
    fn eos(&self) -> &str {
        ""
    }

    /// Score of `response` given the context and a single entity.
    fn score_response(&self, ctx: &DialogueContext, entity: &Entity, response: &str) -> Result<f64>;

    /// One score per entity, in input order.
    fn score_entities(
        &self,
        ctx: &DialogueContext,
        entities: &[&Entity],
        response: &str,
    ) -> Result<Vec<f64>> {
        entities
            .iter()
            .map(|e| self.score_response(ctx, e, response))
            .collect()
    }

    /// The `m` best distinct responses given the context and entities.
    fn generate(&self, ctx: &DialogueContext, entities: &[&Entity], m: usize) -> Result<HypothesisSet>;
}

pub(crate) fn check_response(response: &str) -> Result<()> {
    if response.trim().is_empty() {
        return Err(AdapterError::InvalidInput("empty response".into()));
    }
    Ok(())
}
