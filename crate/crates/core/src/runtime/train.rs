use std::collections::BTreeMap;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{Dialogue, Entity, KnowledgeBase};
use crate::encoder::{load_checkpoint, save_checkpoint, EncoderParams, ParamGradients};
use crate::feedback::{backprop_scores, retriever_loss, FeedbackError, FeedbackRecord, RetrievalScores};
use crate::generator::{AdapterError, GeneratorAdapter};
use crate::metrics::EntityLexicon;
use crate::retriever::{build_index, dot, top_k, EntityIndex, ScoredEntity};

use super::config::{RetrievalScope, TrainConfig};
use super::eval::{evaluate_with_index, session_rows, EvalConfig, EvalReport};
use super::optim::{adam_step, AdamState};
use super::RuntimeError;

/// Below this many attempted examples the failure rate is not enforced.
const MIN_ATTEMPTS_FOR_ABORT: usize = 20;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    /// Optimizer steps completed when the parameters were captured.
    pub step: u64,
    pub entity_f1: f64,
    pub bleu: f64,
    pub recall: BTreeMap<usize, f64>,
    pub config_hash: String,
    pub seed: u64,
}

impl CheckpointMeta {
    fn from_report(step: u64, report: &EvalReport, cfg: &TrainConfig) -> Self {
        Self {
            step,
            entity_f1: report.entity_f1(),
            bleu: report.bleu(),
            recall: report.overall.recall.clone(),
            config_hash: cfg.hash(),
            seed: cfg.seed,
        }
    }

    /// Higher Entity-F1, then higher BLEU. Equal metrics never win, so the
    /// earlier checkpoint is kept.
    fn beats(&self, other: &CheckpointMeta) -> bool {
        self.entity_f1 > other.entity_f1 || (self.entity_f1 == other.entity_f1 && self.bleu > other.bleu)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub params: EncoderParams,
    pub meta: CheckpointMeta,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainStats {
    pub updates: u64,
    pub examples: usize,
    pub failures: usize,
    pub margin_applied: usize,
    pub margin_skipped: usize,
    /// Mean example loss of each optimizer update.
    pub losses: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub best: Checkpoint,
    pub last: EncoderParams,
    /// Every validated checkpoint, in step order.
    pub history: Vec<CheckpointMeta>,
    pub stats: TrainStats,
}

pub fn save_checkpoint_with_meta(ckpt: &Checkpoint, dir: impl AsRef<Path>) -> Result<(), RuntimeError> {
    let dir = dir.as_ref();
    std::fs::create_dir_all(dir)?;
    save_checkpoint(&ckpt.params, dir.join("encoder.ckpt"))?;
    let meta = serde_json::to_string_pretty(&ckpt.meta).expect("meta serializes");
    std::fs::write(dir.join("meta.json"), meta + "\n")?;
    Ok(())
}

pub fn load_best(dir: impl AsRef<Path>) -> Result<Checkpoint, RuntimeError> {
    let dir = dir.as_ref();
    let params = load_checkpoint(dir.join("encoder.ckpt"))?;
    let text = std::fs::read_to_string(dir.join("meta.json"))?;
    let meta = serde_json::from_str(&text).map_err(|e| RuntimeError::Data(format!("meta.json: {e}")))?;
    Ok(Checkpoint { params, meta })
}

fn validation_config(cfg: &TrainConfig) -> EvalConfig {
    let mut ks = vec![1, 3, cfg.k];
    ks.sort_unstable();
    ks.dedup();
    EvalConfig {
        ks,
        generation_k: cfg.k,
        retrieval_only: false,
        scope: cfg.scope,
        max_failure_rate: cfg.max_failure_rate,
    }
}

fn validate_params(
    validation: &[Dialogue],
    kb: &KnowledgeBase,
    params: &EncoderParams,
    adapter: &dyn GeneratorAdapter,
    cfg: &TrainConfig,
    step: u64,
) -> Result<CheckpointMeta, RuntimeError> {
    let index = build_index(kb, params)?;
    let out = evaluate_with_index(validation, kb, &index, params, adapter, &validation_config(cfg))?;
    let meta = CheckpointMeta::from_report(step, &out.report, cfg);
    log::info!(
        "step {step}: entity-f1 {:.4} bleu {:.4} recall {:?}",
        meta.entity_f1,
        meta.bleu,
        meta.recall
    );
    Ok(meta)
}

/// Forward passes and feedback for one turn, against `index` for candidate
/// selection and freshly encoded rows for the scores.
struct Example {
    query: crate::encoder::ForwardCache,
    entities: Vec<crate::encoder::ForwardCache>,
    retrieved: Vec<ScoredEntity>,
    record: FeedbackRecord,
}

#[allow(clippy::too_many_arguments)]
fn run_example(
    d: &Dialogue,
    t: usize,
    kb: &KnowledgeBase,
    index: &EntityIndex,
    candidates: Option<&[usize]>,
    params: &EncoderParams,
    adapter: &dyn GeneratorAdapter,
    cfg: &TrainConfig,
    lexicon: &EntityLexicon,
) -> Result<Example, RuntimeError> {
    let ctx = d.context(t + 1)?;
    let query = params.forward(&params.tokenize(&ctx.text()))?;
    let top = top_k(&query.output, index, cfg.k, candidates)?;
    let entities: Vec<&Entity> = top
        .ids()
        .map(|id| kb.get(id).ok_or_else(|| RuntimeError::Data(format!("index names unknown entity {id}"))))
        .collect::<Result<_, _>>()?;
    let caches = entities
        .iter()
        .map(|e| params.forward(&params.tokenize(&e.linearize())))
        .collect::<Result<Vec<_>, _>>()?;
    let scores = RetrievalScores {
        entity_ids: top.ids().map(str::to_string).collect(),
        scores: caches
            .iter()
            .map(|c| dot(query.output.as_slice(), c.output.as_slice()))
            .collect(),
    };
    let record = retriever_loss(
        adapter,
        &ctx,
        &entities,
        &scores,
        &d.turns[t].system,
        &cfg.feedback(),
        Some(lexicon),
    )?;
    Ok(Example {
        query,
        entities: caches,
        retrieved: top.entries,
        record,
    })
}

/// Trains the retriever from generator feedback and returns the best
/// validated checkpoint.
pub fn train(
    dialogues: &[Dialogue],
    validation: &[Dialogue],
    kb: &KnowledgeBase,
    adapter: &dyn GeneratorAdapter,
    params: &EncoderParams,
    cfg: &TrainConfig,
) -> Result<TrainOutcome, RuntimeError> {
    cfg.validate()?;
    if validation.is_empty() {
        return Err(RuntimeError::Data("no validation dialogues".into()));
    }
    let samples: Vec<(usize, usize)> = dialogues
        .iter()
        .enumerate()
        .flat_map(|(i, d)| (0..d.turns.len()).map(move |t| (i, t)))
        .collect();
    if samples.is_empty() {
        return Err(RuntimeError::Data("no training turns".into()));
    }
    let lexicon = EntityLexicon::from_kb(kb);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order = samples.clone();
    order.shuffle(&mut rng);
    let mut cursor = 0;
    let mut next_sample = || {
        if cursor == order.len() {
            order.shuffle(&mut rng);
            cursor = 0;
        }
        cursor += 1;
        order[cursor - 1]
    };

    let mut params = params.clone();
    let mut state = AdamState::new(&params);
    let mut grads = ParamGradients::zeros(params.config());
    let mut index = build_index(kb, &params)?;
    let session: Vec<Option<Vec<usize>>> = dialogues
        .iter()
        .map(|d| match cfg.scope {
            RetrievalScope::Dataset => Ok(None),
            RetrievalScope::Session => session_rows(&index, d).map(Some),
        })
        .collect::<Result<_, _>>()?;

    let mut stats = TrainStats::default();
    let mut history = Vec::new();
    let mut best: Option<Checkpoint> = None;
    let mut consider = |meta: CheckpointMeta, params: &EncoderParams, history: &mut Vec<CheckpointMeta>| {
        if best.as_ref().is_none_or(|b| meta.beats(&b.meta)) {
            best = Some(Checkpoint {
                params: params.clone(),
                meta: meta.clone(),
            });
        }
        history.push(meta);
    };

    let per_step = cfg.examples_per_step();
    for step in 0..cfg.steps {
        if step < cfg.start_step {
            for _ in 0..per_step {
                next_sample();
            }
            continue;
        }
        if step == cfg.start_step {
            let meta = validate_params(validation, kb, &params, adapter, cfg, step)?;
            consider(meta, &params, &mut history);
        }
        grads.clear();
        let mut used = 0usize;
        let mut loss_sum = 0.0;
        for _ in 0..per_step {
            let (di, t) = next_sample();
            stats.examples += 1;
            let ex = match run_example(
                &dialogues[di],
                t,
                kb,
                &index,
                session[di].as_deref(),
                &params,
                adapter,
                cfg,
                &lexicon,
            ) {
                Ok(ex) => ex,
                Err(RuntimeError::Feedback(FeedbackError::Adapter(e))) if !matches!(e, AdapterError::InvalidInput(_)) => {
                    stats.failures += 1;
                    log::warn!("feedback failed for {} turn {t}: {e}", dialogues[di].id);
                    if stats.examples >= MIN_ATTEMPTS_FOR_ABORT
                        && stats.failures as f64 > cfg.max_failure_rate * stats.examples as f64
                    {
                        return Err(RuntimeError::TooManyFailures {
                            failures: stats.failures,
                            attempted: stats.examples,
                            last: e.to_string(),
                        });
                    }
                    continue;
                }
                Err(e) => return Err(e),
            };
            for (entry, cache) in ex.retrieved.iter().zip(&ex.entities) {
                index.set_row(entry.position, cache.output.clone());
            }
            if ex.record.negative_scores.is_some() {
                stats.margin_applied += 1;
            } else if ex.record.negative_skipped.is_some() {
                stats.margin_skipped += 1;
            }
            backprop_scores(&params, &ex.query, &ex.entities, &ex.record.grad, &mut grads)?;
            loss_sum += ex.record.loss;
            used += 1;
        }
        if used > 0 {
            grads.scale(1.0 / used as f64);
            adam_step(&mut params, &grads, &mut state, cfg.lr, cfg.weight_decay)?;
            stats.updates += 1;
            stats.losses.push(loss_sum / used as f64);
        }
        let done = step + 1;
        if (done - cfg.start_step) % cfg.refresh_every == 0 {
            index = build_index(kb, &params)?;
        }
        if (done - cfg.start_step) % cfg.validate_every == 0 || done == cfg.steps {
            let meta = validate_params(validation, kb, &params, adapter, cfg, done)?;
            consider(meta, &params, &mut history);
        }
    }
    if cfg.start_step == cfg.steps {
        let meta = validate_params(validation, kb, &params, adapter, cfg, cfg.steps)?;
        consider(meta, &params, &mut history);
    }
    drop(consider);
    Ok(TrainOutcome {
        best: best.expect("at least one validation ran"),
        last: params,
        history,
        stats,
    })
}

/// The feedback computed for one turn, without updating anything.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceRecord {
    pub dialogue_id: String,
    /// Zero-based position in the dialogue.
    pub turn: usize,
    pub context: String,
    pub reference: String,
    pub retrieved: Vec<ScoredEntity>,
    pub feedback: FeedbackRecord,
}

pub fn trace_turn(
    dialogue: &Dialogue,
    turn: usize,
    kb: &KnowledgeBase,
    params: &EncoderParams,
    adapter: &dyn GeneratorAdapter,
    cfg: &TrainConfig,
) -> Result<TraceRecord, RuntimeError> {
    cfg.validate()?;
    if turn >= dialogue.turns.len() {
        return Err(RuntimeError::Data(format!(
            "dialogue {} has {} turns, asked for turn {turn}",
            dialogue.id,
            dialogue.turns.len()
        )));
    }
    let index = build_index(kb, params)?;
    let candidates = match cfg.scope {
        RetrievalScope::Dataset => None,
        RetrievalScope::Session => Some(session_rows(&index, dialogue)?),
    };
    let lexicon = EntityLexicon::from_kb(kb);
    let ex = run_example(dialogue, turn, kb, &index, candidates.as_deref(), params, adapter, cfg, &lexicon)?;
    Ok(TraceRecord {
        dialogue_id: dialogue.id.clone(),
        turn,
        context: dialogue.context(turn + 1)?.text(),
        reference: dialogue.turns[turn].system.clone(),
        retrieved: ex.retrieved,
        feedback: ex.record,
    })
}
