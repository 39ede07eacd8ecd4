//! Copy-mixture unigram generator whose probabilities are exactly
//! computable, so scoring and decoding can be checked by enumeration.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use super::{check_response, AdapterError, GeneratorAdapter, Hypothesis, HypothesisSet, Result};
use crate::corpus::{DialogueContext, Entity};
use crate::text;

/// Upper bound on `|support|^max_len` for exhaustive enumeration.
pub const MAX_SEARCH_SPACE: f64 = 1e6;

/// How the entity component splits its mass across several entities.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EntityWeighting {
    /// The entity at (1-based) position `i` gets weight proportional to `1/i`.
    #[default]
    ReciprocalRank,
    Uniform,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OracleGenConfig {
    pub lambda_entity: f64,
    pub lambda_context: f64,
    pub lambda_uniform: f64,
    pub base_vocab: Vec<String>,
    pub max_len: usize,
    pub eos: String,
    /// Forbid a token from appearing twice in one hypothesis.
    pub no_repeat: bool,
    /// Emit tokens in decreasing probability (ties by token), so each bag
    /// of tokens is decoded once instead of once per ordering. Implies
    /// `no_repeat`.
    pub canonical_order: bool,
    /// Log probability charged for response tokens outside the support.
    pub oov_log_prob: f64,
    pub entity_weighting: EntityWeighting,
}

impl Default for OracleGenConfig {
    fn default() -> Self {
        let words = [
            "the", "is", "a", "in", "at", "and", "you", "i", "it", "there", "located", "phone",
            "number", "area", "address", "price", "food", "name", "would", "like", "can", "have",
            "recommend", "how", "about", "serves", "place", "of", ".", ",", "?",
        ];
        let mut base_vocab: Vec<String> = words.iter().map(|w| w.to_string()).collect();
        base_vocab.push("<eos>".into());
        Self {
            lambda_entity: 0.6,
            lambda_context: 0.1,
            lambda_uniform: 0.3,
            base_vocab,
            max_len: 12,
            eos: "<eos>".into(),
            no_repeat: true,
            canonical_order: true,
            oov_log_prob: (1e-8f64).ln(),
            entity_weighting: EntityWeighting::default(),
        }
    }
}

impl OracleGenConfig {
    pub fn validate(&self) -> Result<()> {
        let ws = [self.lambda_entity, self.lambda_context, self.lambda_uniform];
        if ws.iter().any(|w| !w.is_finite() || *w < 0.0) {
            return Err(invalid("mixture weights must be finite and non-negative"));
        }
        if (ws.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return Err(invalid("mixture weights must sum to 1"));
        }
        if !self.base_vocab.contains(&self.eos) {
            return Err(invalid("base vocabulary must contain the end-of-sequence token"));
        }
        if self.max_len == 0 {
            return Err(invalid("max_len must be at least 1"));
        }
        if !self.oov_log_prob.is_finite() {
            return Err(invalid("oov_log_prob must be finite"));
        }
        Ok(())
    }
}

fn invalid(msg: &str) -> AdapterError {
    AdapterError::InvalidInput(msg.to_string())
}

/// A distribution over a lexicographically sorted support.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenDist {
    tokens: Vec<String>,
    probs: Vec<f64>,
}

impl TokenDist {
    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn probs(&self) -> &[f64] {
        &self.probs
    }

    pub fn prob(&self, token: &str) -> f64 {
        self.tokens
            .binary_search_by(|t| t.as_str().cmp(token))
            .map_or(0.0, |i| self.probs[i])
    }
}

#[derive(Debug, Clone)]
pub struct OracleGenerator {
    config: OracleGenConfig,
}

impl OracleGenerator {
    pub fn new(config: OracleGenConfig) -> Result<Self> {
        config.validate()?;
        Ok(Self { config })
    }

    pub fn config(&self) -> &OracleGenConfig {
        &self.config
    }

    /// `λ_e·U(entity values) + λ_c·U(context) + λ_u·U(base vocab)`; with
    /// several entities the entity part mixes their uniforms according to
    /// `entity_weighting`, in the given (retrieval) order. Empty components
    /// drop out and the remaining weights are renormalized.
    pub fn token_dist(&self, ctx: &DialogueContext, entities: &[&Entity]) -> Result<TokenDist> {
        let cfg = &self.config;
        let mut mass: BTreeMap<String, f64> = BTreeMap::new();
        let mut components: Vec<(f64, Vec<(BTreeSet<String>, f64)>)> = Vec::new();

        let per_entity: Vec<(BTreeSet<String>, f64)> = entities
            .iter()
            .enumerate()
            .map(|(i, e)| {
                let tokens = e
                    .value_pairs()
                    .flat_map(|(_, v)| v.split(' ').map(str::to_owned).collect::<Vec<_>>())
                    .collect::<BTreeSet<_>>();
                let w = match cfg.entity_weighting {
                    EntityWeighting::ReciprocalRank => 1.0 / (i + 1) as f64,
                    EntityWeighting::Uniform => 1.0,
                };
                (tokens, w)
            })
            .filter(|(s, _)| !s.is_empty())
            .collect();
        if !per_entity.is_empty() {
            let z: f64 = per_entity.iter().map(|(_, w)| w).sum();
            components.push((
                cfg.lambda_entity,
                per_entity.into_iter().map(|(s, w)| (s, w / z)).collect(),
            ));
        }
        let ctx_tokens: BTreeSet<String> = ctx.utterance_tokens().into_iter().collect();
        if !ctx_tokens.is_empty() {
            components.push((cfg.lambda_context, vec![(ctx_tokens, 1.0)]));
        }
        let base: BTreeSet<String> = cfg.base_vocab.iter().cloned().collect();
        if !base.is_empty() {
            components.push((cfg.lambda_uniform, vec![(base, 1.0)]));
        }

        let total: f64 = components.iter().map(|(w, _)| w).sum();
        if total <= 0.0 {
            return Err(invalid("empty token support"));
        }
        for (weight, parts) in &components {
            for (set, share) in parts {
                let p = weight / total * share / set.len() as f64;
                for t in set {
                    *mass.entry(t.clone()).or_insert(0.0) += p;
                }
            }
        }
        mass.retain(|_, p| *p > 0.0);
        if mass.is_empty() {
            return Err(invalid("empty token support"));
        }
        let (tokens, probs) = mass.into_iter().unzip();
        Ok(TokenDist { tokens, probs })
    }

    /// Mean per-token log probability of `response` under `dist`.
    pub fn score_under(&self, dist: &TokenDist, response: &str) -> Result<f64> {
        check_response(response)?;
        let tokens = text::normalize(response);
        let total: f64 = tokens
            .iter()
            .map(|t| match dist.prob(t) {
                p if p > 0.0 => p.ln(),
                _ => self.config.oov_log_prob,
            })
            .sum();
        Ok(total / tokens.len() as f64)
    }

    /// Beam search ranked by length-normalized log probability. A
    /// hypothesis ends at the end-of-sequence token or at `max_len`.
    pub fn beam_search(&self, dist: &TokenDist, m: usize, width: usize) -> HypothesisSet {
        let eos = self.eos_index(dist);
        let logp: Vec<f64> = dist.probs.iter().map(|p| p.ln()).collect();
        let admits = self.admissibility(dist, eos);
        let width = width.max(1);
        let mut alive: Vec<(Vec<u32>, f64)> = vec![(Vec::new(), 0.0)];
        let mut finished: Vec<(Vec<u32>, f64)> = Vec::new();
        // Extensions are (parent, token, total); sequences are only built
        // for the survivors. All parents have the same length, so comparing
        // parent then token is the lexicographic order of the extensions.
        for step in 1..=self.config.max_len {
            let by_rank = |a: &(usize, u32, f64), b: &(usize, u32, f64)| {
                b.2.total_cmp(&a.2)
                    .then_with(|| alive[a.0].0.cmp(&alive[b.0].0))
                    .then(a.1.cmp(&b.1))
            };
            let last = step == self.config.max_len;
            let mut next: Vec<(usize, u32, f64)> = Vec::new();
            let mut ended: Vec<(usize, u32, f64)> = Vec::new();
            for (p, (seq, total)) in alive.iter().enumerate() {
                for (t, lp) in logp.iter().enumerate() {
                    let t = t as u32;
                    if !admits(seq, t) {
                        continue;
                    }
                    if Some(t) == eos || last {
                        ended.push((p, t, total + lp));
                    } else {
                        next.push((p, t, total + lp));
                    }
                }
            }
            // Every sequence ending at this step has the same length, so
            // only the best `m` of them can reach the output. They are cut
            // on the normalized score the output is sorted by: totals one
            // ulp apart can normalize to a tie.
            let by_output = |a: &(usize, u32, f64), b: &(usize, u32, f64)| {
                (b.2 / step as f64)
                    .total_cmp(&(a.2 / step as f64))
                    .then_with(|| alive[a.0].0.cmp(&alive[b.0].0))
                    .then(a.1.cmp(&b.1))
            };
            if ended.len() > m {
                ended.select_nth_unstable_by(m - 1, by_output);
                ended.truncate(m);
            }
            let extend = |(p, t, total): (usize, u32, f64)| {
                let mut s = Vec::with_capacity(step);
                s.extend_from_slice(&alive[p].0);
                s.push(t);
                (s, total)
            };
            finished.extend(ended.into_iter().map(extend));
            if next.len() > width {
                next.select_nth_unstable_by(width - 1, by_rank);
                next.truncate(width);
            }
            next.sort_by(by_rank);
            let survivors: Vec<(Vec<u32>, f64)> = next.into_iter().map(extend).collect();
            alive = survivors;
            if alive.is_empty() {
                break;
            }
        }
        self.to_set(dist, finished, m)
    }

    /// Exact top-`m` by enumerating every admissible sequence.
    pub fn exhaustive_top_m(&self, dist: &TokenDist, m: usize) -> Result<HypothesisSet> {
        let v = dist.tokens.len() as f64;
        if v.powi(self.config.max_len as i32) > MAX_SEARCH_SPACE {
            return Err(invalid("search space exceeds exhaustive enumeration limit"));
        }
        let eos = self.eos_index(dist);
        let logp: Vec<f64> = dist.probs.iter().map(|p| p.ln()).collect();
        let admits = self.admissibility(dist, eos);
        let mut out = Vec::new();
        let mut stack = vec![(Vec::<u32>::new(), 0.0)];
        while let Some((seq, total)) = stack.pop() {
            for (t, lp) in logp.iter().enumerate() {
                let t = t as u32;
                if !admits(&seq, t) {
                    continue;
                }
                let mut s = seq.clone();
                s.push(t);
                if Some(t) == eos || s.len() == self.config.max_len {
                    out.push((s, total + lp));
                } else {
                    stack.push((s, total + lp));
                }
            }
        }
        Ok(self.to_set(dist, out, m))
    }

    /// Whether `t` may follow `seq`. Sequences never contain the
    /// end-of-sequence token before their last position.
    fn admissibility(&self, dist: &TokenDist, eos: Option<u32>) -> impl Fn(&[u32], u32) -> bool {
        let mut order: Vec<u32> = (0..dist.probs.len() as u32).collect();
        order.sort_by(|&a, &b| dist.probs[b as usize].total_cmp(&dist.probs[a as usize]).then(a.cmp(&b)));
        let mut rank = vec![0usize; order.len()];
        for (r, &t) in order.iter().enumerate() {
            rank[t as usize] = r;
        }
        let canonical = self.config.canonical_order;
        let no_repeat = self.config.no_repeat;
        move |seq: &[u32], t: u32| {
            if canonical {
                Some(t) == eos || seq.last().is_none_or(|&l| rank[t as usize] > rank[l as usize])
            } else {
                !(no_repeat && seq.contains(&t))
            }
        }
    }

    fn eos_index(&self, dist: &TokenDist) -> Option<u32> {
        dist.tokens
            .binary_search(&self.config.eos)
            .ok()
            .map(|i| i as u32)
    }

    fn to_set(&self, dist: &TokenDist, seqs: Vec<(Vec<u32>, f64)>, m: usize) -> HypothesisSet {
        let candidates = seqs
            .into_iter()
            .map(|(s, total)| Hypothesis {
                log_score: total / s.len() as f64,
                tokens: s.iter().map(|&i| dist.tokens[i as usize].clone()).collect(),
            })
            .collect();
        HypothesisSet::from_candidates(candidates, m)
    }
}

impl GeneratorAdapter for OracleGenerator {
    fn eos(&self) -> &str {
        &self.config.eos
    }

    fn score_response(&self, ctx: &DialogueContext, entity: &Entity, response: &str) -> Result<f64> {
        let dist = self.token_dist(ctx, &[entity])?;
        self.score_under(&dist, response)
    }

    fn generate(&self, ctx: &DialogueContext, entities: &[&Entity], m: usize) -> Result<HypothesisSet> {
        if m == 0 {
            return Err(invalid("M must be at least 1"));
        }
        let dist = self.token_dist(ctx, entities)?;
        Ok(self.beam_search(&dist, m, m))
    }
}
