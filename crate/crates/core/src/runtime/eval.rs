use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::corpus::{extract_gold_values, Dialogue, Entity, KnowledgeBase};
use crate::encoder::EncoderParams;
use crate::generator::{AdapterError, GeneratorAdapter};
use crate::metrics::{corpus_bleu, entity_f1, mean_recall, recall_at_k, BleuConfig, EntityF1, EntityLexicon, Recall};
use crate::retriever::{build_index, retrieve, retrieve_among, EntityIndex, TopKResult};
use crate::text;

use super::config::RetrievalScope;
use super::RuntimeError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalConfig {
    /// Cut-offs for retrieval recall.
    pub ks: Vec<usize>,
    /// Entities handed to the generator.
    pub generation_k: usize,
    /// Skip response generation and report retrieval only.
    pub retrieval_only: bool,
    pub scope: RetrievalScope,
    pub max_failure_rate: f64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            ks: vec![1, 3, 5, 10],
            generation_k: 10,
            retrieval_only: false,
            scope: RetrievalScope::Dataset,
            max_failure_rate: 0.1,
        }
    }
}

/// One evaluated turn.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TurnRecord {
    pub dialogue_id: String,
    /// Zero-based position in the dialogue.
    pub turn: usize,
    pub domain: String,
    pub retrieved: Vec<String>,
    pub recall: BTreeMap<usize, f64>,
    /// No gold values: excluded from recall averages.
    pub vacuous: bool,
    pub response: Option<String>,
    pub reference: String,
    pub failed: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricSummary {
    pub turns: usize,
    pub recall: BTreeMap<usize, f64>,
    pub bleu: Option<f64>,
    pub entity_f1: Option<EntityF1>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub dialogues: usize,
    pub vacuous_turns: usize,
    pub failures: usize,
    pub overall: MetricSummary,
    pub per_domain: BTreeMap<String, MetricSummary>,
}

impl EvalReport {
    pub fn entity_f1(&self) -> f64 {
        self.overall.entity_f1.as_ref().map_or(0.0, |m| m.f1)
    }

    pub fn bleu(&self) -> f64 {
        self.overall.bleu.unwrap_or(0.0)
    }

    pub fn recall(&self, k: usize) -> Option<f64> {
        self.overall.recall.get(&k).copied()
    }

    pub fn to_table(&self) -> String {
        let ks: Vec<usize> = self.overall.recall.keys().copied().collect();
        let mut out = String::new();
        let mut header = format!("{:<16} {:>6} {:>7} {:>7} {:>7} {:>7}", "domain", "turns", "BLEU", "P", "R", "F1");
        for k in &ks {
            let _ = write!(header, " {:>7}", format!("Re@{k}"));
        }
        out.push_str(&header);
        out.push('\n');
        let mut row = |name: &str, m: &MetricSummary| {
            let f = |x: Option<f64>| x.map_or("-".to_string(), |v| format!("{:.4}", v));
            let ef = m.entity_f1.as_ref();
            let _ = write!(
                out,
                "{:<16} {:>6} {:>7} {:>7} {:>7} {:>7}",
                name,
                m.turns,
                f(m.bleu),
                f(ef.map(|e| e.precision)),
                f(ef.map(|e| e.recall)),
                f(ef.map(|e| e.f1)),
            );
            for k in &ks {
                let _ = write!(out, " {:>7}", f(m.recall.get(k).copied()));
            }
            out.push('\n');
        };
        for (domain, m) in &self.per_domain {
            row(domain, m);
        }
        row("all", &self.overall);
        let _ = writeln!(
            out,
            "dialogues {}  vacuous turns {}  adapter failures {}",
            self.dialogues, self.vacuous_turns, self.failures
        );
        out
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalOutput {
    pub report: EvalReport,
    pub turns: Vec<TurnRecord>,
}

impl EvalOutput {
    /// One JSON object per turn, then a summary line.
    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        for t in &self.turns {
            out.push_str(&serde_json::json!({ "kind": "turn", "record": t }).to_string());
            out.push('\n');
        }
        out.push_str(&serde_json::json!({ "kind": "summary", "report": self.report }).to_string());
        out.push('\n');
        out
    }
}

pub(crate) fn session_rows(index: &EntityIndex, d: &Dialogue) -> Result<Vec<usize>, RuntimeError> {
    d.session_entity_ids
        .iter()
        .map(|id| {
            index
                .position(id)
                .ok_or_else(|| RuntimeError::Data(format!("dialogue {} names unknown entity {id}", d.id)))
        })
        .collect()
}

fn retrieve_for(
    d: &Dialogue,
    t: usize,
    index: &EntityIndex,
    params: &EncoderParams,
    k: usize,
    scope: RetrievalScope,
) -> Result<TopKResult, RuntimeError> {
    let ctx = d.context(t + 1)?;
    Ok(match scope {
        RetrievalScope::Dataset => retrieve(&ctx, index, params, k)?,
        RetrievalScope::Session => retrieve_among(&ctx, index, params, k, &d.session_entity_ids)?,
    })
}

fn summarize(
    turns: &[&TurnRecord],
    ks: &[usize],
    lexicon: &EntityLexicon,
    with_generation: bool,
) -> Result<MetricSummary, RuntimeError> {
    let mut recall = BTreeMap::new();
    for &k in ks {
        let rs = turns.iter().map(|t| Recall {
            value: t.recall[&k],
            vacuous: t.vacuous,
        });
        if let Some(v) = mean_recall(rs) {
            recall.insert(k, v);
        }
    }
    let (bleu, ef1) = if with_generation && !turns.is_empty() {
        let preds: Vec<String> = turns.iter().map(|t| t.response.clone().unwrap_or_default()).collect();
        let refs: Vec<String> = turns.iter().map(|t| t.reference.clone()).collect();
        let pairs: Vec<(Vec<String>, Vec<String>)> = preds
            .iter()
            .zip(&refs)
            .map(|(p, r)| (text::normalize(p), text::normalize(r)))
            .collect();
        (
            Some(corpus_bleu(&pairs, &BleuConfig::corpus())?),
            Some(entity_f1(&preds, &refs, lexicon)?),
        )
    } else {
        (None, None)
    };
    Ok(MetricSummary {
        turns: turns.len(),
        recall,
        bleu,
        entity_f1: ef1,
    })
}

/// Retrieves, generates and scores every turn. Parameters are only read.
pub fn evaluate(
    dialogues: &[Dialogue],
    kb: &KnowledgeBase,
    params: &EncoderParams,
    adapter: &dyn GeneratorAdapter,
    cfg: &EvalConfig,
) -> Result<EvalOutput, RuntimeError> {
    if cfg.ks.is_empty() || cfg.ks.contains(&0) || cfg.generation_k == 0 {
        return Err(RuntimeError::Config("recall cut-offs and generation_k must be at least 1".into()));
    }
    let index = build_index(kb, params)?;
    evaluate_with_index(dialogues, kb, &index, params, adapter, cfg)
}

pub(crate) fn evaluate_with_index(
    dialogues: &[Dialogue],
    kb: &KnowledgeBase,
    index: &EntityIndex,
    params: &EncoderParams,
    adapter: &dyn GeneratorAdapter,
    cfg: &EvalConfig,
) -> Result<EvalOutput, RuntimeError> {
    let lexicon = EntityLexicon::from_kb(kb);
    let max_k = cfg.ks.iter().copied().max().unwrap_or(1).max(cfg.generation_k);
    let total_turns: usize = dialogues.iter().map(|d| d.turns.len()).sum();
    let mut turns = Vec::with_capacity(total_turns);
    let mut failures = 0;
    for d in dialogues {
        for (t, turn) in d.turns.iter().enumerate() {
            let top = retrieve_for(d, t, index, params, max_k, cfg.scope)?;
            let gold = extract_gold_values(turn, kb);
            let mut recall = BTreeMap::new();
            let mut vacuous = false;
            for &k in &cfg.ks {
                let r = recall_at_k(&top.prefix(k), &gold, kb);
                vacuous = r.vacuous;
                recall.insert(k, r.value);
            }
            let mut failed = false;
            let response = if cfg.retrieval_only {
                None
            } else {
                let ctx = d.context(t + 1)?;
                let chosen = top.prefix(cfg.generation_k);
                let entities: Vec<&Entity> = chosen.ids().filter_map(|id| kb.get(id)).collect();
                match adapter.generate(&ctx, &entities, 1) {
                    Ok(h) => Some(h.hypotheses.first().map(|h| h.text(adapter.eos())).unwrap_or_default()),
                    Err(e @ AdapterError::InvalidInput(_)) => return Err(e.into()),
                    Err(e) => {
                        log::warn!("generation failed for {} turn {t}: {e}", d.id);
                        failures += 1;
                        failed = true;
                        if failures as f64 > cfg.max_failure_rate * total_turns as f64 {
                            return Err(RuntimeError::TooManyFailures {
                                failures,
                                attempted: turns.len() + 1,
                                last: e.to_string(),
                            });
                        }
                        Some(String::new())
                    }
                }
            };
            turns.push(TurnRecord {
                dialogue_id: d.id.clone(),
                turn: t,
                domain: d.domain.clone(),
                retrieved: top.ids().map(str::to_string).collect(),
                recall,
                vacuous,
                response,
                reference: turn.system.clone(),
                failed,
            });
        }
    }
    let all: Vec<&TurnRecord> = turns.iter().collect();
    let overall = summarize(&all, &cfg.ks, &lexicon, !cfg.retrieval_only)?;
    let mut by_domain: BTreeMap<String, Vec<&TurnRecord>> = BTreeMap::new();
    for t in &turns {
        by_domain.entry(t.domain.clone()).or_default().push(t);
    }
    let per_domain = by_domain
        .into_iter()
        .map(|(dname, ts)| Ok((dname, summarize(&ts, &cfg.ks, &lexicon, !cfg.retrieval_only)?)))
        .collect::<Result<BTreeMap<_, _>, RuntimeError>>()?;
    Ok(EvalOutput {
        report: EvalReport {
            dialogues: dialogues.len(),
            vacuous_turns: turns.iter().filter(|t| t.vacuous).count(),
            failures,
            overall,
            per_domain,
        },
        turns,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub k: usize,
    pub recall: Option<f64>,
    pub bleu: Option<f64>,
    pub entity_f1: Option<f64>,
}

/// Evaluates once per K, handing the generator the top-K entities each time.
pub fn sweep_k(
    dialogues: &[Dialogue],
    kb: &KnowledgeBase,
    params: &EncoderParams,
    adapter: &dyn GeneratorAdapter,
    ks: &[usize],
    base: &EvalConfig,
) -> Result<Vec<SweepRow>, RuntimeError> {
    let index = build_index(kb, params)?;
    ks.iter()
        .map(|&k| {
            let cfg = EvalConfig {
                ks: vec![k],
                generation_k: k,
                ..base.clone()
            };
            if k == 0 {
                return Err(RuntimeError::Config("K must be at least 1".into()));
            }
            let out = evaluate_with_index(dialogues, kb, &index, params, adapter, &cfg)?;
            Ok(SweepRow {
                k,
                recall: out.report.recall(k),
                bleu: out.report.overall.bleu,
                entity_f1: out.report.overall.entity_f1.map(|m| m.f1),
            })
        })
        .collect()
}

pub fn sweep_table(rows: &[SweepRow]) -> String {
    let f = |x: Option<f64>| x.map_or("-".to_string(), |v| format!("{v:.4}"));
    let mut out = format!("{:>4} {:>8} {:>8} {:>10}\n", "K", "Re@K", "BLEU", "Entity-F1");
    for r in rows {
        let _ = writeln!(out, "{:>4} {:>8} {:>8} {:>10}", r.k, f(r.recall), f(r.bleu), f(r.entity_f1));
    }
    out
}
