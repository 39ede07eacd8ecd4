//! Prompt-based adapter for chat LLMs that expose text but no token
//! probabilities. Responses carry a self-reported confidence and entity
//! scores come from a relevance-scoring prompt.

use std::fs;
use std::path::Path;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Mutex;
use std::thread;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::transport::{ChatRequest, ChatTransport, TransportError};
use super::{check_response, AdapterError, GeneratorAdapter, Hypothesis, HypothesisSet, Result};
use crate::corpus::{render_segments, DialogueContext, Entity, Role};
use crate::text;

pub const RESPONSE_TEMPLATE: &str = "\
You are a task-oriented dialogue chatbot. Your initial priority is to understand the user's intent within the current user input, taking into account the dialogue history. Subsequently, you need to select the relevant information from the knowledge base that aligns with this intent. Finally, generate concise response by incorporating the current user input and the selected information from the knowledge base. Additionally, you need provide a confidence score for each response to indicate the level of certainty associated with it. The confidence score falls within the range of 0.0 to 1.0, denoted as a decimal. The output format of responses follows the structure:
Response: [Generated response]
Confidence: [Confidence score]
{examples}
Knowledge base
{knowledge_base}

Dialogue history
{dialogue_history}

User input
{user_input}

Response:
";

pub const SCORING_TEMPLATE: &str = "\
You are required to assign relevance scores to each entity-response pair in the input. These scores should range from 0.0 to 1.0 and maintain the order based on the input sequence and the total number of entities in the knowledge base. The output format should follow the pattern:
Score: [relevance-score1, relevance-score2, ...]

Knowledge base
{knowledge_base}

Response:
{response}

Score:
";

/// Demonstrations for the few-shot variant: a matching entity, a similar
/// entity to recommend, and no usable entity.
pub const DEFAULT_EXAMPLES: &str = "\
Example 1
Knowledge base
1. name curry garden, area centre, food indian, pricerange expensive.
User input
[user]: i want an expensive indian restaurant in the centre .
Response: curry garden serves expensive indian food in the centre .
Confidence: 0.9

Example 2
Knowledge base
1. name pizza hut city centre, area centre, food italian, pricerange cheap.
User input
[user]: is there a cheap spanish place in the centre ?
Response: there is no cheap spanish place in the centre , but pizza hut city centre serves cheap italian food . would that work ?
Confidence: 0.7

Example 3
Knowledge base
1. name the cow pizza kitchen and bar, area centre, food gastropub, pricerange moderate.
User input
[user]: i need a train to ely on sunday .
Response: i am sorry , i have no trains to ely on sunday . could another day work ?
Confidence: 0.6
";

const RESPONSE_REMINDER: &str =
    "\nAnswer with exactly two lines:\nResponse: <response>\nConfidence: <number between 0.0 and 1.0>\n";

fn score_reminder(k: usize) -> String {
    format!("\nAnswer with exactly one line containing {k} numbers between 0.0 and 1.0:\nScore: [s1, s2, ...]\n")
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PromptTemplates {
    pub response: String,
    pub scoring: String,
    /// Demonstrations for the few-shot variant; `None` is zero-shot.
    pub examples: Option<String>,
}

impl Default for PromptTemplates {
    fn default() -> Self {
        Self {
            response: RESPONSE_TEMPLATE.into(),
            scoring: SCORING_TEMPLATE.into(),
            examples: None,
        }
    }
}

impl PromptTemplates {
    pub fn few_shot() -> Self {
        Self {
            examples: Some(DEFAULT_EXAMPLES.into()),
            ..Self::default()
        }
    }

    /// Loads any of the three templates from files, defaulting the rest.
    pub fn from_files(
        response: Option<&Path>,
        scoring: Option<&Path>,
        examples: Option<&Path>,
    ) -> std::io::Result<Self> {
        let mut t = Self::default();
        if let Some(p) = response {
            t.response = fs::read_to_string(p)?;
        }
        if let Some(p) = scoring {
            t.scoring = fs::read_to_string(p)?;
        }
        if let Some(p) = examples {
            t.examples = Some(fs::read_to_string(p)?);
        }
        Ok(t)
    }

    pub fn render_response_prompt(&self, ctx: &DialogueContext, entities: &[&Entity]) -> Result<String> {
        let kb = knowledge_base_block(entities)?;
        let examples = match &self.examples {
            Some(ex) => format!("\nExamples\n{}\n", ex.trim_end()),
            None => String::new(),
        };
        let history = render_segments(ctx.history());
        let user = render_segments(&[(Role::User, ctx.current_user().to_string())]);
        Ok(fill(
            &self.response,
            &[
                ("examples", &examples),
                ("knowledge_base", &kb),
                ("dialogue_history", &history),
                ("user_input", &user),
            ],
        ))
    }

    pub fn render_scoring_prompt(&self, entities: &[&Entity], response: &str) -> Result<String> {
        let kb = knowledge_base_block(entities)?;
        Ok(fill(
            &self.scoring,
            &[("knowledge_base", &kb), ("response", response.trim())],
        ))
    }
}

fn knowledge_base_block(entities: &[&Entity]) -> Result<String> {
    if entities.is_empty() {
        return Err(AdapterError::InvalidInput("prompt needs at least one entity".into()));
    }
    Ok(entities
        .iter()
        .enumerate()
        .map(|(i, e)| format!("{}. {}.", i + 1, e.linearize()))
        .collect::<Vec<_>>()
        .join("\n"))
}

/// Single-pass `{name}` substitution; unknown names and substituted text
/// are left alone.
fn fill(template: &str, values: &[(&str, &str)]) -> String {
    let mut out = String::with_capacity(template.len() * 2);
    let mut rest = template;
    while let Some(open) = rest.find('{') {
        out.push_str(&rest[..open]);
        let after = &rest[open + 1..];
        let hit = after.find('}').and_then(|close| {
            let name = &after[..close];
            values
                .iter()
                .find(|(k, _)| *k == name)
                .map(|(_, v)| (close, *v))
        });
        match hit {
            Some((close, v)) => {
                out.push_str(v);
                rest = &after[close + 1..];
            }
            None => {
                out.push('{');
                rest = after;
            }
        }
    }
    out.push_str(rest);
    out
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ParseError {
    #[error("missing {0} field")]
    MissingField(&'static str),
    #[error("{0:?} is not a number")]
    NotANumber(String),
    #[error("expected {expected} scores, found {found}")]
    CountMismatch { expected: usize, found: usize },
}

impl From<ParseError> for AdapterError {
    fn from(e: ParseError) -> Self {
        AdapterError::Parse(e.to_string())
    }
}

fn clean(raw: &str) -> String {
    raw.lines()
        .filter(|l| !l.trim_start().starts_with("```"))
        .collect::<Vec<_>>()
        .join("\n")
        .replace("**", "")
}

fn find_label(haystack: &str, label: &str) -> Option<usize> {
    haystack.to_ascii_lowercase().find(label).map(|i| i + label.len())
}

fn parse_unit(raw: &str, what: &str) -> std::result::Result<f64, ParseError> {
    let token = raw.trim().trim_matches(|c| c == '"' || c == '\'');
    let number = token.trim_end_matches(|c: char| !c.is_ascii_digit());
    let v: f64 = number
        .parse()
        .map_err(|_| ParseError::NotANumber(token.to_string()))?;
    if !v.is_finite() {
        return Err(ParseError::NotANumber(token.to_string()));
    }
    if !(0.0..=1.0).contains(&v) {
        log::warn!("{what} {v} outside [0, 1], clamped");
    }
    Ok(v.clamp(0.0, 1.0))
}

/// Extracts `(response, confidence)` from a `Response: ... Confidence: ...`
/// answer.
pub fn parse_response_confidence(raw: &str) -> std::result::Result<(String, f64), ParseError> {
    let text = clean(raw);
    let start = find_label(&text, "response:").ok_or(ParseError::MissingField("Response"))?;
    let body = &text[start..];
    let conf = find_label(body, "confidence:").ok_or(ParseError::MissingField("Confidence"))?;
    let response = body[..conf - "confidence:".len()].trim();
    if response.is_empty() {
        return Err(ParseError::MissingField("Response"));
    }
    let value = body[conf..]
        .split_whitespace()
        .next()
        .ok_or(ParseError::MissingField("Confidence"))?;
    Ok((response.to_string(), parse_unit(value, "confidence")?))
}

/// Extracts exactly `expected` scores from a `Score: [s1, s2, ...]` answer.
pub fn parse_score_list(raw: &str, expected: usize) -> std::result::Result<Vec<f64>, ParseError> {
    let text = clean(raw);
    let lower = text.to_ascii_lowercase();
    let start = lower
        .rfind("score:")
        .map(|i| i + "score:".len())
        .ok_or(ParseError::MissingField("Score"))?;
    let rest = &text[start..];
    let list = match (rest.find('['), rest.find(']')) {
        (Some(open), Some(close)) if open < close => &rest[open + 1..close],
        _ => rest.lines().next().unwrap_or(""),
    };
    let items: Vec<&str> = list
        .split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .collect();
    if items.len() != expected {
        return Err(ParseError::CountMismatch {
            expected,
            found: items.len(),
        });
    }
    items.into_iter().map(|s| parse_unit(s, "score")).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LlmConfig {
    /// Falls back to the `LLM_API_ENDPOINT` environment variable.
    pub endpoint: Option<String>,
    pub model: String,
    pub temperature: f64,
    /// Softmax temperature used when these scores feed the feedback losses.
    pub rank_temperature: f64,
    pub max_tokens: u32,
    pub timeout_secs: u64,
    pub max_retries: u32,
    pub concurrency: usize,
    pub backoff_ms: u64,
    pub few_shot: bool,
}

impl Default for LlmConfig {
    fn default() -> Self {
        Self {
            endpoint: None,
            model: "gpt-3.5-turbo".into(),
            temperature: 1.0,
            rank_temperature: 0.1,
            max_tokens: 150,
            timeout_secs: 60,
            max_retries: 3,
            concurrency: 4,
            backoff_ms: 500,
            few_shot: false,
        }
    }
}

impl LlmConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.temperature > 0.0 && self.rank_temperature > 0.0) {
            return Err(AdapterError::InvalidInput("temperatures must be positive".into()));
        }
        if self.concurrency == 0 {
            return Err(AdapterError::InvalidInput("concurrency must be at least 1".into()));
        }
        Ok(())
    }
}

pub struct LlmAdapter<T: ChatTransport> {
    transport: T,
    config: LlmConfig,
    templates: PromptTemplates,
    next_id: AtomicU64,
}

impl<T: ChatTransport> LlmAdapter<T> {
    pub fn new(transport: T, config: LlmConfig, templates: PromptTemplates) -> Result<Self> {
        config.validate()?;
        Ok(Self {
            transport,
            config,
            templates,
            next_id: AtomicU64::new(1),
        })
    }

    pub fn config(&self) -> &LlmConfig {
        &self.config
    }

    pub fn templates(&self) -> &PromptTemplates {
        &self.templates
    }

    fn send(&self, prompt: &str) -> Result<String> {
        let request = ChatRequest {
            correlation_id: self.next_id.fetch_add(1, Ordering::Relaxed),
            model: self.config.model.clone(),
            prompt: prompt.to_string(),
            temperature: self.config.temperature,
            max_tokens: self.config.max_tokens,
        };
        let mut attempt = 0;
        loop {
            match self.transport.complete(&request) {
                Ok(text) => return Ok(text),
                Err(TransportError::Transient(msg)) if attempt < self.config.max_retries => {
                    let wait = self.config.backoff_ms.saturating_mul(1 << attempt.min(16));
                    log::warn!(
                        "request {} failed ({msg}), retrying in {wait} ms",
                        request.correlation_id
                    );
                    thread::sleep(Duration::from_millis(wait));
                    attempt += 1;
                }
                Err(TransportError::Transient(msg)) => {
                    return Err(AdapterError::Hard(format!(
                        "request {} failed after {} attempts: {msg}",
                        request.correlation_id,
                        attempt + 1
                    )))
                }
                Err(TransportError::Fatal(msg)) => {
                    return Err(AdapterError::Hard(format!("request {}: {msg}", request.correlation_id)))
                }
            }
        }
    }

    /// Sends `prompt`; on a parse failure re-prompts once with `reminder`.
    fn ask<R>(
        &self,
        prompt: &str,
        reminder: &str,
        parse: impl Fn(&str) -> std::result::Result<R, ParseError>,
    ) -> Result<R> {
        let first = self.send(prompt)?;
        match parse(&first) {
            Ok(r) => Ok(r),
            Err(e) => {
                log::warn!("unparseable answer ({e}), re-prompting with a format reminder");
                let second = self.send(&format!("{prompt}{reminder}"))?;
                parse(&second).map_err(|e| AdapterError::Hard(format!("unparseable answer after re-prompt: {e}")))
            }
        }
    }

    /// One sampled response with its confidence.
    pub fn sample_response(&self, ctx: &DialogueContext, entities: &[&Entity]) -> Result<(String, f64)> {
        let prompt = self.templates.render_response_prompt(ctx, entities)?;
        self.ask(&prompt, RESPONSE_REMINDER, parse_response_confidence)
    }
}

impl<T: ChatTransport> GeneratorAdapter for LlmAdapter<T> {
    fn score_response(&self, ctx: &DialogueContext, entity: &Entity, response: &str) -> Result<f64> {
        Ok(self.score_entities(ctx, &[entity], response)?[0])
    }

    fn score_entities(&self, _ctx: &DialogueContext, entities: &[&Entity], response: &str) -> Result<Vec<f64>> {
        check_response(response)?;
        let prompt = self.templates.render_scoring_prompt(entities, response)?;
        let k = entities.len();
        self.ask(&prompt, &score_reminder(k), |raw| parse_score_list(raw, k))
    }

    fn generate(&self, ctx: &DialogueContext, entities: &[&Entity], m: usize) -> Result<HypothesisSet> {
        if m == 0 {
            return Err(AdapterError::InvalidInput("M must be at least 1".into()));
        }
        let slots: Vec<Mutex<Option<Result<(String, f64)>>>> = (0..m).map(|_| Mutex::new(None)).collect();
        let cursor = AtomicU64::new(0);
        thread::scope(|s| {
            for _ in 0..self.config.concurrency.min(m) {
                s.spawn(|| loop {
                    let i = cursor.fetch_add(1, Ordering::Relaxed) as usize;
                    if i >= m {
                        break;
                    }
                    let r = self.sample_response(ctx, entities);
                    *slots[i].lock().unwrap() = Some(r);
                });
            }
        });
        let mut candidates = Vec::with_capacity(m);
        for slot in slots {
            let (response, confidence) = slot.into_inner().unwrap().expect("every slot is filled")?;
            let tokens = text::normalize(&response);
            if !tokens.is_empty() {
                candidates.push(Hypothesis {
                    tokens,
                    log_score: confidence,
                });
            }
        }
        Ok(HypothesisSet::from_candidates(candidates, m))
    }
}
