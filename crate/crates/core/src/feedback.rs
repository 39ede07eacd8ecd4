//! Generator feedback for the retriever: entity scoring, KL distillation
//! toward the generator's entity preferences, negative-sample selection
//! and the margin loss that calibrates against the negative.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{DialogueContext, Entity};
use crate::encoder::{EncoderError, EncoderParams, ForwardCache, ParamGradients};
use crate::generator::{AdapterError, GeneratorAdapter, Hypothesis, HypothesisSet};
use crate::metrics::{entity_f1_single, sentence_bleu, BleuConfig, EntityLexicon};
use crate::retriever::TopKResult;
use crate::text;

#[derive(Debug, Error)]
pub enum FeedbackError {
    #[error("score vectors are not aligned on the same entity ids")]
    Misaligned,
    #[error("empty {0}")]
    Empty(&'static str),
    #[error("non-finite {0}")]
    NonFinite(&'static str),
    #[error("invalid feedback configuration: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Adapter(#[from] AdapterError),
    #[error(transparent)]
    Encoder(#[from] EncoderError),
}

pub type Result<T, E = FeedbackError> = std::result::Result<T, E>;

/// Generator-side entity scores, aligned with a retrieval result.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EntityScores {
    pub entity_ids: Vec<String>,
    pub scores: Vec<f64>,
}

/// Retriever inner products for the same entities.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetrievalScores {
    pub entity_ids: Vec<String>,
    pub scores: Vec<f64>,
}

impl RetrievalScores {
    pub fn from_topk(topk: &TopKResult) -> Self {
        Self {
            entity_ids: topk.entries.iter().map(|e| e.entity_id.clone()).collect(),
            scores: topk.entries.iter().map(|e| e.score).collect(),
        }
    }
}

fn check_aligned(a: &[String], b: &[String], what: &'static str) -> Result<()> {
    if a.is_empty() {
        return Err(FeedbackError::Empty(what));
    }
    if a != b {
        return Err(FeedbackError::Misaligned);
    }
    Ok(())
}

fn check_finite(x: &[f64], what: &'static str) -> Result<()> {
    if x.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(FeedbackError::NonFinite(what))
    }
}

/// `softmax(x / tau)`, shifted by the maximum for stability.
pub fn softmax(x: &[f64], tau: f64) -> Vec<f64> {
    let max = x.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = x.iter().map(|v| ((v - max) / tau).exp()).collect();
    let z: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / z).collect()
}

fn log_softmax(x: &[f64], tau: f64) -> Vec<f64> {
    let max = x.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = x.iter().map(|v| ((v - max) / tau).exp()).sum::<f64>().ln();
    x.iter().map(|v| (v - max) / tau - lse).collect()
}

/// `KL(softmax(p/tau) || softmax(q/tau))`.
pub fn kl_softmax(p: &[f64], q: &[f64], tau: f64) -> f64 {
    let lp = log_softmax(p, tau);
    let lq = log_softmax(q, tau);
    lp.iter()
        .zip(&lq)
        .map(|(a, b)| if a.is_finite() { a.exp() * (a - b) } else { 0.0 })
        .sum::<f64>()
        .max(0.0)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossGrad {
    pub loss: f64,
    /// Gradient with respect to the retrieval scores.
    pub grad: Vec<f64>,
}

/// Distillation of the generator's entity preference into the retriever.
/// The generator scores are a fixed target.
pub fn positive_loss(g: &EntityScores, s: &RetrievalScores, tau: f64) -> Result<LossGrad> {
    check_aligned(&g.entity_ids, &s.entity_ids, "entity scores")?;
    check_finite(&g.scores, "generator scores")?;
    check_finite(&s.scores, "retrieval scores")?;
    let gt = softmax(&g.scores, tau);
    let st = softmax(&s.scores, tau);
    Ok(LossGrad {
        loss: kl_softmax(&g.scores, &s.scores, tau),
        grad: st.iter().zip(&gt).map(|(a, b)| (a - b) / tau).collect(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MarginLoss {
    pub loss: f64,
    pub grad: Vec<f64>,
    pub active: bool,
}

/// Hinge `max(0, KL(G, S) - KL(G⁻, S) + eta)`.
pub fn negative_loss(
    g: &EntityScores,
    g_neg: &EntityScores,
    s: &RetrievalScores,
    tau: f64,
    eta: f64,
) -> Result<MarginLoss> {
    check_aligned(&g.entity_ids, &s.entity_ids, "entity scores")?;
    check_aligned(&g_neg.entity_ids, &s.entity_ids, "negative entity scores")?;
    check_finite(&g.scores, "generator scores")?;
    check_finite(&g_neg.scores, "negative generator scores")?;
    check_finite(&s.scores, "retrieval scores")?;
    let margin = kl_softmax(&g.scores, &s.scores, tau) - kl_softmax(&g_neg.scores, &s.scores, tau) + eta;
    if margin <= 0.0 {
        return Ok(MarginLoss {
            loss: 0.0,
            grad: vec![0.0; s.scores.len()],
            active: false,
        });
    }
    let gt = softmax(&g.scores, tau);
    let gn = softmax(&g_neg.scores, tau);
    Ok(MarginLoss {
        loss: margin,
        grad: gn.iter().zip(&gt).map(|(a, b)| (a - b) / tau).collect(),
        active: true,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Strategy {
    RankBleu,
    #[serde(rename = "rank_entityf1")]
    RankEntityF1,
    ArgminBleu,
    #[serde(rename = "argmin_entityf1")]
    ArgminEntityF1,
}

impl Strategy {
    pub const ALL: [Strategy; 4] = [
        Strategy::RankBleu,
        Strategy::RankEntityF1,
        Strategy::ArgminBleu,
        Strategy::ArgminEntityF1,
    ];

    pub fn is_rank(self) -> bool {
        matches!(self, Strategy::RankBleu | Strategy::RankEntityF1)
    }

    pub fn uses_entity_f1(self) -> bool {
        matches!(self, Strategy::RankEntityF1 | Strategy::ArgminEntityF1)
    }

    pub fn name(self) -> &'static str {
        match self {
            Strategy::RankBleu => "rank_bleu",
            Strategy::RankEntityF1 => "rank_entityf1",
            Strategy::ArgminBleu => "argmin_bleu",
            Strategy::ArgminEntityF1 => "argmin_entityf1",
        }
    }
}

impl std::str::FromStr for Strategy {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        Strategy::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| format!("unknown strategy {s:?}"))
    }
}

/// Which disagreement between probability and quality marks a negative.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Polarity {
    /// Likely under the generator but poor against the reference.
    #[default]
    HighProbabilityLowQuality,
    /// Unlikely under the generator but good against the reference.
    LowProbabilityHighQuality,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct NegativeSelectionConfig {
    pub strategy: Strategy,
    pub beam: usize,
    /// Only affects the rank strategies.
    pub polarity: Polarity,
}

impl Default for NegativeSelectionConfig {
    fn default() -> Self {
        Self {
            strategy: Strategy::RankBleu,
            beam: 5,
            polarity: Polarity::default(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Selection {
    pub index: usize,
    /// Every candidate tied under the selection rule.
    pub degenerate: bool,
}

/// Ordinal ranks, 1 = largest value, ties by input order.
pub fn descending_ranks(values: &[f64]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[b].total_cmp(&values[a]).then(a.cmp(&b)));
    let mut ranks = vec![0; values.len()];
    for (r, i) in order.into_iter().enumerate() {
        ranks[i] = r + 1;
    }
    ranks
}

/// Picks the negative from hypothesis scores and their oracle qualities.
pub fn select_from_scores(
    log_scores: &[f64],
    quality: &[f64],
    strategy: Strategy,
    polarity: Polarity,
) -> Result<Selection> {
    if log_scores.is_empty() {
        return Err(FeedbackError::Empty("hypothesis set"));
    }
    if log_scores.len() != quality.len() {
        return Err(FeedbackError::Misaligned);
    }
    if !strategy.is_rank() {
        let mut best = 0;
        for i in 1..quality.len() {
            if quality[i] < quality[best] {
                best = i;
            }
        }
        let degenerate = quality.iter().all(|&q| q == quality[0]);
        return Ok(Selection {
            index: best,
            degenerate,
        });
    }
    let rg = descending_ranks(log_scores);
    let ro = descending_ranks(quality);
    let (primary, secondary): (Vec<i64>, &[usize]) = match polarity {
        Polarity::HighProbabilityLowQuality => (
            rg.iter().zip(&ro).map(|(&g, &o)| g as i64 - o as i64).collect(),
            &rg,
        ),
        Polarity::LowProbabilityHighQuality => (
            ro.iter().zip(&rg).map(|(&o, &g)| o as i64 - g as i64).collect(),
            &ro,
        ),
    };
    let mut best = 0;
    for i in 1..primary.len() {
        if (primary[i], secondary[i]) < (primary[best], secondary[best]) {
            best = i;
        }
    }
    Ok(Selection {
        index: best,
        degenerate: primary.iter().all(|&d| d == 0),
    })
}

/// Reference-based quality of a hypothesis.
pub enum OracleFn<'a> {
    Bleu(BleuConfig),
    EntityF1(&'a EntityLexicon),
}

impl OracleFn<'_> {
    pub fn for_strategy(strategy: Strategy, lexicon: Option<&EntityLexicon>) -> Result<OracleFn<'_>> {
        if strategy.uses_entity_f1() {
            lexicon
                .map(OracleFn::EntityF1)
                .ok_or_else(|| FeedbackError::InvalidConfig("entity-F1 strategies need a lexicon".into()))
        } else {
            Ok(OracleFn::Bleu(BleuConfig::sentence()))
        }
    }

    pub fn score(&self, hyp_text: &str, reference: &str) -> f64 {
        match self {
            OracleFn::Bleu(cfg) => {
                sentence_bleu(&text::normalize(hyp_text), &text::normalize(reference), cfg)
            }
            OracleFn::EntityF1(lex) => entity_f1_single(hyp_text, reference, lex),
        }
    }
}

pub fn select_negative(
    hyps: &HypothesisSet,
    reference: &str,
    cfg: &NegativeSelectionConfig,
    oracle: &OracleFn,
    eos: &str,
) -> Result<Selection> {
    if reference.trim().is_empty() {
        return Err(FeedbackError::Empty("reference"));
    }
    let scores: Vec<f64> = hyps.hypotheses.iter().map(|h| h.log_score).collect();
    let quality: Vec<f64> = hyps
        .hypotheses
        .iter()
        .map(|h| oracle.score(&h.text(eos), reference))
        .collect();
    select_from_scores(&scores, &quality, cfg.strategy, cfg.polarity)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossMode {
    /// Positive and negative feedback.
    Dual,
    PositiveOnly,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FeedbackConfig {
    pub tau: f64,
    pub eta: f64,
    pub mode: LossMode,
    pub selection: NegativeSelectionConfig,
}

impl Default for FeedbackConfig {
    fn default() -> Self {
        Self {
            tau: 1.0,
            eta: 0.1,
            mode: LossMode::Dual,
            selection: NegativeSelectionConfig::default(),
        }
    }
}

impl FeedbackConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.tau > 0.0 && self.tau.is_finite()) {
            return Err(FeedbackError::InvalidConfig("tau must be positive".into()));
        }
        if !(self.eta >= 0.0 && self.eta.is_finite()) {
            return Err(FeedbackError::InvalidConfig("eta must be non-negative".into()));
        }
        if self.selection.beam == 0 || (self.selection.strategy.is_rank() && self.selection.beam < 2) {
            return Err(FeedbackError::InvalidConfig(
                "beam must be at least 2 for rank strategies".into(),
            ));
        }
        Ok(())
    }
}

pub fn score_entities(
    adapter: &dyn GeneratorAdapter,
    ctx: &DialogueContext,
    ids: &[String],
    entities: &[&Entity],
    response: &str,
) -> Result<EntityScores> {
    if entities.is_empty() {
        return Err(FeedbackError::Empty("retrieved entities"));
    }
    let scores = adapter.score_entities(ctx, entities, response)?;
    if scores.len() != entities.len() {
        return Err(FeedbackError::Misaligned);
    }
    Ok(EntityScores {
        entity_ids: ids.to_vec(),
        scores,
    })
}

/// Everything computed for one training example.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeedbackRecord {
    pub entity_ids: Vec<String>,
    pub retrieval_scores: Vec<f64>,
    pub generator_scores: Vec<f64>,
    pub negative_scores: Option<Vec<f64>>,
    pub hypotheses: Vec<Hypothesis>,
    pub negative_index: Option<usize>,
    pub negative_text: Option<String>,
    /// Why the margin loss was not applied, if it was not.
    pub negative_skipped: Option<String>,
    pub loss_pos: f64,
    pub loss_neg: f64,
    pub loss: f64,
    pub grad: Vec<f64>,
    pub grad_norm: f64,
}

/// Combined feedback loss for one context, with its gradient with respect
/// to the retrieval scores of `entities`.
#[allow(clippy::too_many_arguments)]
pub fn retriever_loss(
    adapter: &dyn GeneratorAdapter,
    ctx: &DialogueContext,
    entities: &[&Entity],
    s: &RetrievalScores,
    reference: &str,
    cfg: &FeedbackConfig,
    lexicon: Option<&EntityLexicon>,
) -> Result<FeedbackRecord> {
    cfg.validate()?;
    if entities.len() != s.entity_ids.len()
        || entities.iter().zip(&s.entity_ids).any(|(e, id)| e.id() != id)
    {
        return Err(FeedbackError::Misaligned);
    }
    let g = score_entities(adapter, ctx, &s.entity_ids, entities, reference)?;
    let pos = positive_loss(&g, s, cfg.tau)?;
    let mut record = FeedbackRecord {
        entity_ids: s.entity_ids.clone(),
        retrieval_scores: s.scores.clone(),
        generator_scores: g.scores.clone(),
        negative_scores: None,
        hypotheses: Vec::new(),
        negative_index: None,
        negative_text: None,
        negative_skipped: None,
        loss_pos: pos.loss,
        loss_neg: 0.0,
        loss: pos.loss,
        grad: pos.grad,
        grad_norm: 0.0,
    };
    if cfg.mode == LossMode::Dual {
        let oracle = OracleFn::for_strategy(cfg.selection.strategy, lexicon)?;
        let hyps = adapter.generate(ctx, entities, cfg.selection.beam)?;
        record.hypotheses = hyps.hypotheses.clone();
        match select_negative(&hyps, reference, &cfg.selection, &oracle, adapter.eos()) {
            Err(FeedbackError::Empty(what)) => record.negative_skipped = Some(format!("empty {what}")),
            Err(e) => return Err(e),
            Ok(sel) => {
                let neg_text = hyps.hypotheses[sel.index].text(adapter.eos());
                record.negative_index = Some(sel.index);
                record.negative_text = Some(neg_text.clone());
                if sel.degenerate {
                    record.negative_skipped = Some("degenerate hypothesis set".into());
                } else if text::normalize(&neg_text).is_empty() {
                    record.negative_skipped = Some("empty negative".into());
                } else if text::normalize(&neg_text) == text::normalize(reference) {
                    record.negative_skipped = Some("negative equals reference".into());
                } else {
                    let g_neg = score_entities(adapter, ctx, &s.entity_ids, entities, &neg_text)?;
                    let neg = negative_loss(&g, &g_neg, s, cfg.tau, cfg.eta)?;
                    record.negative_scores = Some(g_neg.scores);
                    record.loss_neg = neg.loss;
                    record.loss += neg.loss;
                    for (a, b) in record.grad.iter_mut().zip(&neg.grad) {
                        *a += b;
                    }
                }
            }
        }
        if let Some(reason) = &record.negative_skipped {
            log::debug!("margin loss skipped: {reason}");
        }
    }
    record.grad_norm = record.grad.iter().map(|x| x * x).sum::<f64>().sqrt();
    Ok(record)
}

/// Chains `dL/dS` into encoder gradients. Scores are `S_i = q · e_i`, so
/// the query receives `Σ_i dL/dS_i e_i` and entity `i` receives
/// `dL/dS_i q`.
pub fn backprop_scores(
    params: &EncoderParams,
    query: &ForwardCache,
    entities: &[ForwardCache],
    grad_s: &[f64],
    grads: &mut ParamGradients,
) -> Result<()> {
    if entities.len() != grad_s.len() {
        return Err(FeedbackError::Misaligned);
    }
    let d = params.dim();
    let mut up_q = vec![0.0; d];
    for (cache, &gs) in entities.iter().zip(grad_s) {
        for (u, e) in up_q.iter_mut().zip(cache.output.as_slice()) {
            *u += gs * e;
        }
    }
    params.accumulate(query, &up_q, grads)?;
    for (cache, &gs) in entities.iter().zip(grad_s) {
        let up: Vec<f64> = query.output.as_slice().iter().map(|q| gs * q).collect();
        params.accumulate(cache, &up, grads)?;
    }
    Ok(())
}
