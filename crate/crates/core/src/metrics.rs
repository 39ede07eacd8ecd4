//! BLEU, micro Entity-F1 and top-K value recall.

use std::collections::{BTreeMap, BTreeSet, HashMap};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{GoldValueSet, KnowledgeBase};
use crate::retriever::TopKResult;
use crate::text;

#[derive(Debug, Error, PartialEq)]
pub enum MetricsError {
    #[error("corpus BLEU needs at least one pair")]
    EmptyCorpus,
    #[error("{preds} predictions for {refs} references")]
    LengthMismatch { preds: usize, refs: usize },
    #[error("max_n must be at least 1")]
    InvalidOrder,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Smoothing {
    None,
    /// Adds one to matched and total counts of every order above unigrams.
    AddOne,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BleuConfig {
    pub max_n: usize,
    pub smoothing: Smoothing,
}

impl BleuConfig {
    pub fn sentence() -> Self {
        Self {
            max_n: 4,
            smoothing: Smoothing::AddOne,
        }
    }

    pub fn corpus() -> Self {
        Self {
            max_n: 4,
            smoothing: Smoothing::None,
        }
    }
}

impl Default for BleuConfig {
    fn default() -> Self {
        Self::sentence()
    }
}

/// Clipped n-gram matches and hypothesis n-gram totals per order, plus
/// both lengths.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct BleuStats {
    pub matches: Vec<usize>,
    pub totals: Vec<usize>,
    pub hyp_len: usize,
    pub ref_len: usize,
}

impl BleuStats {
    pub fn compute(hyp: &[String], reference: &[String], max_n: usize) -> Self {
        let mut matches = vec![0; max_n];
        let mut totals = vec![0; max_n];
        for n in 1..=max_n {
            let hyp_counts = ngram_counts(hyp, n);
            let ref_counts = ngram_counts(reference, n);
            matches[n - 1] = hyp_counts
                .iter()
                .map(|(g, &c)| c.min(ref_counts.get(g).copied().unwrap_or(0)))
                .sum();
            totals[n - 1] = hyp.len().saturating_sub(n - 1);
        }
        Self {
            matches,
            totals,
            hyp_len: hyp.len(),
            ref_len: reference.len(),
        }
    }

    fn add(&mut self, other: &BleuStats) {
        if self.matches.is_empty() {
            self.matches = vec![0; other.matches.len()];
            self.totals = vec![0; other.totals.len()];
        }
        for n in 0..other.matches.len() {
            self.matches[n] += other.matches[n];
            self.totals[n] += other.totals[n];
        }
        self.hyp_len += other.hyp_len;
        self.ref_len += other.ref_len;
    }

    pub fn score(&self, smoothing: Smoothing) -> f64 {
        if self.hyp_len == 0 {
            return 0.0;
        }
        let mut log_sum = 0.0;
        for (n, (&m, &t)) in self.matches.iter().zip(&self.totals).enumerate() {
            let (m, t) = match smoothing {
                Smoothing::AddOne if n > 0 => (m + 1, t + 1),
                _ => (m, t),
            };
            if m == 0 || t == 0 {
                return 0.0;
            }
            log_sum += (m as f64 / t as f64).ln();
        }
        let log_precision = log_sum / self.matches.len() as f64;
        (log_precision + log_brevity_penalty(self.hyp_len, self.ref_len)).exp()
    }
}

fn log_brevity_penalty(hyp_len: usize, ref_len: usize) -> f64 {
    if hyp_len >= ref_len {
        0.0
    } else {
        1.0 - ref_len as f64 / hyp_len as f64
    }
}

fn ngram_counts(tokens: &[String], n: usize) -> HashMap<&[String], usize> {
    let mut counts = HashMap::new();
    if tokens.len() >= n {
        for w in tokens.windows(n) {
            *counts.entry(w).or_insert(0) += 1;
        }
    }
    counts
}

/// BLEU of one hypothesis against one reference, both already tokenized.
pub fn sentence_bleu(hyp: &[String], reference: &[String], cfg: &BleuConfig) -> f64 {
    BleuStats::compute(hyp, reference, cfg.max_n).score(cfg.smoothing)
}

/// [`sentence_bleu`] on raw strings, tokenized with [`text::normalize`].
pub fn sentence_bleu_text(hyp: &str, reference: &str, cfg: &BleuConfig) -> f64 {
    sentence_bleu(&text::normalize(hyp), &text::normalize(reference), cfg)
}

/// BLEU over pooled n-gram statistics of all pairs.
pub fn corpus_bleu(pairs: &[(Vec<String>, Vec<String>)], cfg: &BleuConfig) -> Result<f64, MetricsError> {
    if cfg.max_n == 0 {
        return Err(MetricsError::InvalidOrder);
    }
    if pairs.is_empty() {
        return Err(MetricsError::EmptyCorpus);
    }
    let mut total = BleuStats::default();
    for (hyp, reference) in pairs {
        total.add(&BleuStats::compute(hyp, reference, cfg.max_n));
    }
    Ok(total.score(cfg.smoothing))
}

/// KB values keyed by canonical value string, each with the attributes it
/// appears under.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct EntityLexicon {
    values: BTreeMap<String, BTreeSet<String>>,
    // Longest first, then lexicographic.
    match_order: Vec<Vec<String>>,
}

impl EntityLexicon {
    pub fn from_kb(kb: &KnowledgeBase) -> Self {
        Self::from_pairs(kb.entities().iter().flat_map(|e| e.value_pairs()))
    }

    pub fn from_pairs(pairs: impl IntoIterator<Item = (String, String)>) -> Self {
        let mut values: BTreeMap<String, BTreeSet<String>> = BTreeMap::new();
        for (attr, value) in pairs {
            let value = text::canonical(&value);
            if !value.is_empty() {
                values.entry(value).or_default().insert(attr);
            }
        }
        let mut match_order: Vec<Vec<String>> = values
            .keys()
            .map(|v| v.split(' ').map(str::to_owned).collect())
            .collect();
        match_order.sort_by(|a, b| b.len().cmp(&a.len()).then_with(|| a.cmp(b)));
        Self {
            values,
            match_order,
        }
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn attributes_of(&self, value: &str) -> Option<&BTreeSet<String>> {
        self.values.get(value)
    }

    /// Distinct lexicon values found in `response`. Longer values claim
    /// their tokens first, so a value nested inside a longer matched value
    /// is not counted again.
    pub fn extract(&self, response: &str) -> BTreeSet<String> {
        let tokens = text::normalize(response);
        let mut taken = vec![false; tokens.len()];
        let mut found = BTreeSet::new();
        for value in &self.match_order {
            for start in text::find_all(&tokens, value) {
                let span = start..start + value.len();
                if taken[span.clone()].iter().any(|&t| t) {
                    continue;
                }
                taken[span].iter_mut().for_each(|t| *t = true);
                found.insert(value.join(" "));
            }
        }
        found
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EntityF1 {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub true_positives: usize,
    pub false_positives: usize,
    pub false_negatives: usize,
}

impl EntityF1 {
    pub fn from_counts(tp: usize, fp: usize, fn_: usize) -> Self {
        let ratio = |a: usize, b: usize| if b == 0 { 0.0 } else { a as f64 / b as f64 };
        let precision = ratio(tp, tp + fp);
        let recall = ratio(tp, tp + fn_);
        let f1 = if precision + recall == 0.0 {
            0.0
        } else {
            2.0 * precision * recall / (precision + recall)
        };
        Self {
            precision,
            recall,
            f1,
            true_positives: tp,
            false_positives: fp,
            false_negatives: fn_,
        }
    }
}

/// Micro-averaged Entity-F1 over aligned prediction/reference responses.
pub fn entity_f1(
    preds: &[String],
    refs: &[String],
    lexicon: &EntityLexicon,
) -> Result<EntityF1, MetricsError> {
    if preds.len() != refs.len() {
        return Err(MetricsError::LengthMismatch {
            preds: preds.len(),
            refs: refs.len(),
        });
    }
    let (mut tp, mut fp, mut fn_) = (0, 0, 0);
    for (p, r) in preds.iter().zip(refs) {
        let pv = lexicon.extract(p);
        let rv = lexicon.extract(r);
        let hit = pv.intersection(&rv).count();
        tp += hit;
        fp += pv.len() - hit;
        fn_ += rv.len() - hit;
    }
    Ok(EntityF1::from_counts(tp, fp, fn_))
}

/// Entity-F1 of a single response pair.
pub fn entity_f1_single(pred: &str, reference: &str, lexicon: &EntityLexicon) -> f64 {
    entity_f1(&[pred.to_string()], &[reference.to_string()], lexicon)
        .map(|m| m.f1)
        .unwrap_or(0.0)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Recall {
    pub value: f64,
    /// No gold values: the value is 1.0 by convention and should not enter
    /// corpus averages.
    pub vacuous: bool,
}

/// Fraction of gold `(attribute, value)` pairs covered by the union of
/// the retrieved entities' pairs.
pub fn recall_at_k(topk: &TopKResult, gold: &GoldValueSet, kb: &KnowledgeBase) -> Recall {
    if gold.is_empty() {
        return Recall {
            value: 1.0,
            vacuous: true,
        };
    }
    let covered: BTreeSet<(String, String)> = topk
        .ids()
        .filter_map(|id| kb.get(id))
        .flat_map(|e| e.value_pairs())
        .collect();
    let hit = gold.values.iter().filter(|v| covered.contains(*v)).count();
    Recall {
        value: hit as f64 / gold.len() as f64,
        vacuous: false,
    }
}

/// Mean over non-vacuous turns; `None` when every turn is vacuous.
pub fn mean_recall(recalls: impl IntoIterator<Item = Recall>) -> Option<f64> {
    let (sum, n) = recalls
        .into_iter()
        .filter(|r| !r.vacuous)
        .fold((0.0, 0usize), |(s, n), r| (s + r.value, n + 1));
    (n > 0).then(|| sum / n as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{Entity, KbLevel};
    use crate::retriever::ScoredEntity;
    use proptest::prelude::*;

    fn toks(s: &str) -> Vec<String> {
        text::normalize(s)
    }

    #[test]
    fn identical_sentences_score_one() {
        let x = toks("the golden house is in the centre");
        assert_eq!(sentence_bleu(&x, &x, &BleuConfig::sentence()), 1.0);
        assert_eq!(sentence_bleu(&x, &x, &BleuConfig::corpus()), 1.0);
    }

    #[test]
    fn no_overlap_is_zero() {
        let a = toks("a b c d");
        let b = toks("w x y z");
        assert_eq!(sentence_bleu(&a, &b, &BleuConfig::corpus()), 0.0);
        assert_eq!(sentence_bleu(&a, &b, &BleuConfig::sentence()), 0.0);
        assert_eq!(sentence_bleu(&[], &b, &BleuConfig::sentence()), 0.0);
    }

    #[test]
    fn hand_counted_pair() {
        // hyp: the cat sat on the mat (6), ref: the cat is on the mat (6)
        // unigrams 5/6, bigrams {the cat, on the, the mat} 3/5,
        // trigrams {on the mat} 1/4, 4-grams 0/3.
        let h = toks("the cat sat on the mat");
        let r = toks("the cat is on the mat");
        let smoothed = ((5.0f64 / 6.0) * (4.0 / 6.0) * (2.0 / 5.0) * (1.0 / 4.0)).powf(0.25);
        assert!((sentence_bleu(&h, &r, &BleuConfig::sentence()) - smoothed).abs() < 1e-12);
        assert_eq!(sentence_bleu(&h, &r, &BleuConfig::corpus()), 0.0);
    }

    #[test]
    fn brevity_penalty_applies() {
        // hyp 2 tokens vs ref 4, max_n 1: p1 = 1, BP = exp(1 - 4/2)
        let cfg = BleuConfig {
            max_n: 1,
            smoothing: Smoothing::None,
        };
        let v = sentence_bleu(&toks("a b"), &toks("a b c d"), &cfg);
        assert!((v - (-1.0f64).exp()).abs() < 1e-12);
    }

    #[test]
    fn corpus_single_pair_matches_sentence_unsmoothed() {
        let h = toks("the cat sat on the mat today");
        let r = toks("the cat sat on the mat");
        let s = sentence_bleu(&h, &r, &BleuConfig::corpus());
        assert!(s > 0.0);
        assert_eq!(corpus_bleu(&[(h, r)], &BleuConfig::corpus()).unwrap(), s);
        assert_eq!(corpus_bleu(&[], &BleuConfig::corpus()), Err(MetricsError::EmptyCorpus));
    }

    fn lexicon() -> EntityLexicon {
        EntityLexicon::from_pairs([
            ("area".to_string(), "centre".to_string()),
            ("area".to_string(), "city centre".to_string()),
            ("name".to_string(), "golden house".to_string()),
            ("food".to_string(), "chinese".to_string()),
        ])
    }

    #[test]
    fn longest_value_claims_tokens() {
        let lex = lexicon();
        let found = lex.extract("The Golden House is in the city centre.");
        let expected: BTreeSet<String> = ["city centre", "golden house"].iter().map(|s| s.to_string()).collect();
        assert_eq!(found, expected);
        let both = lex.extract("city centre or just centre");
        assert_eq!(both.len(), 2);
    }

    #[test]
    fn entity_f1_cases() {
        let lex = lexicon();
        let m = entity_f1(&["chinese in the centre".into()], &["golden house , chinese".into()], &lex).unwrap();
        assert_eq!((m.true_positives, m.false_positives, m.false_negatives), (1, 1, 1));
        assert_eq!((m.precision, m.recall, m.f1), (0.5, 0.5, 0.5));
        let none = entity_f1(&["hello".into()], &["chinese".into()], &lex).unwrap();
        assert_eq!((none.precision, none.recall, none.f1), (0.0, 0.0, 0.0));
        assert!(entity_f1(&["a".into()], &[], &lex).is_err());
    }

    fn recall_kb() -> KnowledgeBase {
        let e = |id: &str, a: &[(&str, &str)]| {
            Entity::new(id, a.iter().map(|(x, y)| (x.to_string(), y.to_string())).collect()).unwrap()
        };
        KnowledgeBase::new(
            vec![
                e("r1", &[("name", "alpha"), ("area", "north")]),
                e("r2", &[("name", "beta"), ("area", "south")]),
                e("r3", &[("name", "gamma"), ("area", "east")]),
            ],
            KbLevel::Dataset,
        )
        .unwrap()
    }

    fn topk(ids: &[&str]) -> TopKResult {
        TopKResult {
            entries: ids
                .iter()
                .enumerate()
                .map(|(i, id)| ScoredEntity {
                    entity_id: id.to_string(),
                    position: i,
                    score: -(i as f64),
                })
                .collect(),
            truncated: false,
        }
    }

    #[test]
    fn recall_counts() {
        let kb = recall_kb();
        let gold = GoldValueSet {
            values: [("name", "alpha"), ("area", "north"), ("name", "gamma"), ("area", "east")]
                .iter()
                .map(|(a, v)| (a.to_string(), v.to_string()))
                .collect(),
        };
        assert_eq!(recall_at_k(&topk(&["r1", "r2"]), &gold, &kb).value, 0.5);
        assert_eq!(recall_at_k(&topk(&["r1", "r2", "r3"]), &gold, &kb).value, 1.0);
        let vac = recall_at_k(&topk(&["r2"]), &GoldValueSet::default(), &kb);
        assert!(vac.vacuous && vac.value == 1.0);
        assert_eq!(
            mean_recall([vac, Recall { value: 0.5, vacuous: false }]),
            Some(0.5)
        );
        assert_eq!(mean_recall([vac]), None);
    }

    proptest! {
        #[test]
        fn bleu_bounded(h in prop::collection::vec(0u8..6, 0..12), r in prop::collection::vec(0u8..6, 1..12)) {
            let h: Vec<String> = h.iter().map(|x| x.to_string()).collect();
            let r: Vec<String> = r.iter().map(|x| x.to_string()).collect();
            for cfg in [BleuConfig::sentence(), BleuConfig::corpus()] {
                let v = sentence_bleu(&h, &r, &cfg);
                prop_assert!((0.0..=1.0 + 1e-12).contains(&v));
            }
            if r.len() >= 4 {
                prop_assert!((sentence_bleu(&r, &r, &BleuConfig::corpus()) - 1.0).abs() < 1e-12);
            }
        }

        #[test]
        fn f1_symmetric(p in prop::collection::vec("(chinese|centre|city centre|golden house|tea) ?", 1..6),
                        g in prop::collection::vec("(chinese|centre|city centre|golden house|tea) ?", 1..6)) {
            let lex = lexicon();
            let preds = vec![p.concat()];
            let refs = vec![g.concat()];
            let a = entity_f1(&preds, &refs, &lex).unwrap();
            let b = entity_f1(&refs, &preds, &lex).unwrap();
            prop_assert_eq!(a.precision, b.recall);
            prop_assert_eq!(a.recall, b.precision);
            prop_assert_eq!(a.f1, b.f1);
        }

        #[test]
        fn recall_monotone_in_k(order in Just(vec!["r1", "r2", "r3"]).prop_shuffle(), mask in prop::collection::vec(any::<bool>(), 6)) {
            let kb = recall_kb();
            let all: Vec<(String, String)> = kb.entities().iter().flat_map(|e| e.value_pairs()).collect();
            let gold = GoldValueSet {
                values: all.into_iter().zip(&mask).filter(|(_, m)| **m).map(|(v, _)| v).collect(),
            };
            let full = topk(&order);
            let mut prev = 0.0;
            for k in 1..=3 {
                let v = recall_at_k(&full.prefix(k), &gold, &kb).value;
                prop_assert!(v >= prev);
                prev = v;
            }
        }
    }
}
