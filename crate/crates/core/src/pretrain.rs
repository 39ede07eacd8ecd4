//! Distant-supervision pre-training: label each context with the entity
//! whose values occur most often in it, then train with InfoNCE using the
//! other labels in the batch as negatives.

use std::collections::{HashMap, HashSet, VecDeque};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{Dialogue, DialogueContext, KbLevel, KnowledgeBase};
use crate::encoder::{EncoderError, EncoderParams, Embedding, ParamGradients};
use crate::retriever::dot;
use crate::runtime::optim::{adam_step, lr_at, AdamState, OptimError, Schedule};
use crate::text;

#[derive(Debug, Error)]
pub enum PretrainError {
    #[error("batch size must be at least 2")]
    BatchTooSmall,
    #[error("{found} labeled pairs, need at least one batch of {needed}")]
    TooFewPairs { found: usize, needed: usize },
    #[error("entity {0} is the positive of two examples in one batch")]
    DuplicatePositive(String),
    #[error("{queries} queries for {positives} positives")]
    Misaligned { queries: usize, positives: usize },
    #[error("temperature must be positive")]
    InvalidTemperature,
    #[error(transparent)]
    Encoder(#[from] EncoderError),
    #[error(transparent)]
    Optim(#[from] OptimError),
}

pub type Result<T, E = PretrainError> = std::result::Result<T, E>;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DistantLabel {
    pub entity_id: String,
    pub match_count: usize,
}

/// Precomputed value lookup for [`distant_label`].
pub struct DistantLabeler<'a> {
    kb: &'a KnowledgeBase,
    // First token -> (value tokens, entity row), one entry per distinct
    // (entity, value).
    by_first: HashMap<String, Vec<(Vec<String>, usize)>>,
}

impl<'a> DistantLabeler<'a> {
    pub fn new(kb: &'a KnowledgeBase) -> Self {
        let mut by_first: HashMap<String, Vec<(Vec<String>, usize)>> = HashMap::new();
        for (row, e) in kb.entities().iter().enumerate() {
            let values: HashSet<String> = e.value_pairs().map(|(_, v)| v).collect();
            for v in values {
                let tokens: Vec<String> = v.split(' ').map(str::to_owned).collect();
                by_first.entry(tokens[0].clone()).or_default().push((tokens, row));
            }
        }
        Self { kb, by_first }
    }

    /// Occurrence counts of every entity's values in `tokens`.
    pub fn counts(&self, tokens: &[String]) -> Vec<usize> {
        let mut counts = vec![0; self.kb.len()];
        for (i, t) in tokens.iter().enumerate() {
            if let Some(cands) = self.by_first.get(t) {
                for (value, row) in cands {
                    if tokens[i..].starts_with(value) {
                        counts[*row] += 1;
                    }
                }
            }
        }
        counts
    }

    pub fn label(&self, ctx: &DialogueContext, response: &str) -> Option<DistantLabel> {
        let mut tokens = ctx.utterance_tokens();
        tokens.extend(text::normalize(response));
        let counts = self.counts(&tokens);
        let ents = self.kb.entities();
        let mut best: Option<usize> = None;
        for (row, &c) in counts.iter().enumerate() {
            if c == 0 {
                continue;
            }
            let better = match best {
                None => true,
                Some(b) => c > counts[b] || (c == counts[b] && ents[row].id() < ents[b].id()),
            };
            if better {
                best = Some(row);
            }
        }
        best.map(|row| DistantLabel {
            entity_id: ents[row].id().to_string(),
            match_count: counts[row],
        })
    }
}

/// The entity whose values occur most often in the context and response;
/// ties go to the smaller id.
pub fn distant_label(ctx: &DialogueContext, response: &str, kb: &KnowledgeBase) -> Option<DistantLabel> {
    DistantLabeler::new(kb).label(ctx, response)
}

#[derive(Debug, Clone, PartialEq)]
pub struct InfoNceOutput {
    pub loss: f64,
    pub grad_queries: Vec<Vec<f64>>,
    pub grad_positives: Vec<Vec<f64>>,
}

/// `-(1/B) Σ_j log softmax_k(q_j · p_k / tau)_j` with exact gradients.
pub fn infonce_loss(queries: &[Embedding], positives: &[Embedding], tau: f64) -> Result<InfoNceOutput> {
    let b = queries.len();
    if b != positives.len() {
        return Err(PretrainError::Misaligned {
            queries: b,
            positives: positives.len(),
        });
    }
    if b < 2 {
        return Err(PretrainError::BatchTooSmall);
    }
    if !(tau > 0.0) {
        return Err(PretrainError::InvalidTemperature);
    }
    let d = queries[0].dim();
    let mut loss = 0.0;
    let mut gq = vec![vec![0.0; d]; b];
    let mut gp = vec![vec![0.0; d]; b];
    for j in 0..b {
        let logits: Vec<f64> = positives
            .iter()
            .map(|p| dot(queries[j].as_slice(), p.as_slice()) / tau)
            .collect();
        let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let z: f64 = logits.iter().map(|l| (l - max).exp()).sum();
        loss -= logits[j] - max - z.ln();
        for k in 0..b {
            let coeff = ((logits[k] - max).exp() / z - if k == j { 1.0 } else { 0.0 }) / (b as f64 * tau);
            if coeff == 0.0 {
                continue;
            }
            for i in 0..d {
                gq[j][i] += coeff * positives[k].0[i];
                gp[k][i] += coeff * queries[j].0[i];
            }
        }
    }
    Ok(InfoNceOutput {
        loss: loss / b as f64,
        grad_queries: gq,
        grad_positives: gp,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabeledPair {
    pub query: String,
    pub entity_id: String,
}

/// Labels every turn of every dialogue; unlabeled turns are dropped.
pub fn label_corpus(dialogues: &[Dialogue], kb: &KnowledgeBase) -> Vec<LabeledPair> {
    let labeler = DistantLabeler::new(kb);
    let mut out = Vec::new();
    for d in dialogues {
        for (i, turn) in d.turns.iter().enumerate() {
            let Ok(ctx) = d.context(i + 1) else { continue };
            if let Some(label) = labeler.label(&ctx, &turn.system) {
                out.push(LabeledPair {
                    query: ctx.text(),
                    entity_id: label.entity_id,
                });
            }
        }
    }
    out
}

pub fn check_batch(batch: &[&LabeledPair]) -> Result<()> {
    let mut seen = HashSet::new();
    for p in batch {
        if !seen.insert(p.entity_id.as_str()) {
            return Err(PretrainError::DuplicatePositive(p.entity_id.clone()));
        }
    }
    Ok(())
}

/// Shuffles `pairs` with `rng` and packs them into batches of up to
/// `batch_size` with pairwise distinct positives. Items that would repeat
/// a positive wait for a later batch; batches smaller than two are dropped.
pub fn make_batches(pairs: &[LabeledPair], batch_size: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..pairs.len()).collect();
    order.shuffle(rng);
    let mut pending: VecDeque<usize> = order.into();
    let mut batches = Vec::new();
    while !pending.is_empty() {
        let mut batch = Vec::with_capacity(batch_size);
        let mut used = HashSet::new();
        let mut deferred = VecDeque::new();
        while let Some(i) = pending.pop_front() {
            if batch.len() == batch_size {
                deferred.push_back(i);
                continue;
            }
            if used.insert(pairs[i].entity_id.as_str()) {
                batch.push(i);
            } else {
                deferred.push_back(i);
            }
        }
        pending = deferred;
        if batch.len() < 2 {
            break;
        }
        batches.push(batch);
    }
    batches
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct InfoNceConfig {
    pub tau: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub seed: u64,
}

impl Default for InfoNceConfig {
    fn default() -> Self {
        Self {
            tau: 0.05,
            batch_size: 128,
            epochs: 10,
            lr: 5e-5,
            weight_decay: 0.01,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct PretrainReport {
    pub labeled_pairs: usize,
    pub steps: u64,
    /// Mean batch loss per epoch.
    pub epoch_losses: Vec<f64>,
    /// Session-level knowledge: nothing was trained.
    pub skipped: bool,
}

/// Runs InfoNCE pre-training and returns the trained parameters.
pub fn pretrain_loop(
    dialogues: &[Dialogue],
    kb: &KnowledgeBase,
    params: &EncoderParams,
    cfg: &InfoNceConfig,
) -> Result<(EncoderParams, PretrainReport)> {
    if kb.level() == KbLevel::Session {
        log::info!("session-level knowledge base: skipping pre-training");
        return Ok((
            params.clone(),
            PretrainReport {
                skipped: true,
                ..PretrainReport::default()
            },
        ));
    }
    if cfg.batch_size < 2 {
        return Err(PretrainError::BatchTooSmall);
    }
    let pairs = label_corpus(dialogues, kb);
    if pairs.len() < cfg.batch_size {
        return Err(PretrainError::TooFewPairs {
            found: pairs.len(),
            needed: cfg.batch_size,
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let epochs: Vec<Vec<Vec<usize>>> = (0..cfg.epochs)
        .map(|_| make_batches(&pairs, cfg.batch_size, &mut rng))
        .collect();
    let total: u64 = epochs.iter().map(|e| e.len() as u64).sum();
    let schedule = Schedule::Linear { lr: cfg.lr, total };

    let mut params = params.clone();
    let mut state = AdamState::new(&params);
    let mut grads = ParamGradients::zeros(params.config());
    let mut report = PretrainReport {
        labeled_pairs: pairs.len(),
        ..PretrainReport::default()
    };
    for batches in &epochs {
        let mut epoch_loss = 0.0;
        for batch in batches {
            let members: Vec<&LabeledPair> = batch.iter().map(|&i| &pairs[i]).collect();
            check_batch(&members)?;
            let q_caches = members
                .iter()
                .map(|p| params.forward(&params.tokenize(&p.query)))
                .collect::<Result<Vec<_>, _>>()?;
            let p_caches = members
                .iter()
                .map(|p| {
                    let e = kb.get(&p.entity_id).expect("labels come from the KB");
                    params.forward(&params.tokenize(&e.linearize()))
                })
                .collect::<Result<Vec<_>, _>>()?;
            let qs: Vec<Embedding> = q_caches.iter().map(|c| c.output.clone()).collect();
            let ps: Vec<Embedding> = p_caches.iter().map(|c| c.output.clone()).collect();
            let out = infonce_loss(&qs, &ps, cfg.tau)?;
            grads.clear();
            for (cache, g) in q_caches.iter().zip(&out.grad_queries) {
                params.accumulate(cache, g, &mut grads)?;
            }
            for (cache, g) in p_caches.iter().zip(&out.grad_positives) {
                params.accumulate(cache, g, &mut grads)?;
            }
            let lr = lr_at(report.steps, &schedule);
            adam_step(&mut params, &grads, &mut state, lr, cfg.weight_decay)?;
            report.steps += 1;
            epoch_loss += out.loss;
        }
        let mean = epoch_loss / batches.len().max(1) as f64;
        log::info!("pretrain epoch {}: loss {mean:.4}", report.epoch_losses.len() + 1);
        report.epoch_losses.push(mean);
    }
    Ok((params, report))
}
