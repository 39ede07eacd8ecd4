use std::collections::HashMap;

use super::{AdapterError, GeneratorAdapter, Hypothesis, HypothesisSet, OracleGenerator, Result};
use crate::corpus::{Dialogue, DialogueContext, Entity};
use crate::text;

/// Answers every known context with its reference response. Scoring is
/// delegated to an oracle generator. Useful as a metric ceiling.
#[derive(Debug, Clone)]
pub struct EchoAdapter {
    references: HashMap<String, String>,
    scorer: OracleGenerator,
}

impl EchoAdapter {
    pub fn new(dialogues: &[Dialogue], scorer: OracleGenerator) -> Self {
        let mut references = HashMap::new();
        for d in dialogues {
            for (i, turn) in d.turns.iter().enumerate() {
                if let Ok(ctx) = d.context(i + 1) {
                    references.insert(ctx.text(), turn.system.clone());
                }
            }
        }
        Self { references, scorer }
    }
}

impl GeneratorAdapter for EchoAdapter {
    fn score_response(&self, ctx: &DialogueContext, entity: &Entity, response: &str) -> Result<f64> {
        self.scorer.score_response(ctx, entity, response)
    }

    fn generate(&self, ctx: &DialogueContext, _entities: &[&Entity], m: usize) -> Result<HypothesisSet> {
        let reference = self
            .references
            .get(&ctx.text())
            .ok_or_else(|| AdapterError::InvalidInput("context has no stored reference".into()))?;
        let hyp = Hypothesis {
            tokens: text::normalize(reference),
            log_score: 0.0,
        };
        Ok(HypothesisSet::from_candidates(vec![hyp], m))
    }
}
