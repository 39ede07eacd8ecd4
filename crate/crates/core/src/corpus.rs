//! Knowledge bases, dialogues and the views derived from them.

use std::collections::{BTreeSet, HashMap, HashSet};
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::text;

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("failed to read {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("failed to parse {path}: {source}")]
    Parse {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },
    #[error("duplicate entity ids: {}", .0.join(", "))]
    DuplicateIds(Vec<String>),
    #[error("entity with empty id")]
    EmptyId,
    #[error("entity {0} has no attributes")]
    NoAttributes(String),
    #[error("entity {entity} repeats attribute {attribute}")]
    DuplicateAttribute { entity: String, attribute: String },
    #[error("knowledge base declares level {found:?} but {expected:?} was requested")]
    LevelMismatch { expected: KbLevel, found: KbLevel },
    #[error("dialogue {dialogue} references unknown entity {entity}")]
    DanglingReference { dialogue: String, entity: String },
    #[error("dialogue {0} has no turns")]
    NoTurns(String),
    #[error("dialogue {dialogue} turn {turn} has an empty {field} utterance")]
    EmptyUtterance {
        dialogue: String,
        turn: usize,
        field: &'static str,
    },
    #[error("turn {turn} out of range for dialogue {dialogue} with {len} turns")]
    TurnOutOfRange {
        dialogue: String,
        turn: usize,
        len: usize,
    },
    #[error("entity id {0} is used for entities with different attributes")]
    ConflictingEntity(String),
    #[error("{dialogues} dialogues but {sessions} session knowledge bases")]
    SessionCountMismatch { dialogues: usize, sessions: usize },
}

pub type Result<T, E = CorpusError> = std::result::Result<T, E>;

/// A KB record: an id plus attribute-value pairs in file order.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Entity {
    id: String,
    attributes: Vec<(String, String)>,
}

impl Entity {
    pub fn new(
        id: impl Into<String>,
        attributes: Vec<(String, String)>,
    ) -> Result<Self> {
        let id = id.into();
        if id.is_empty() {
            return Err(CorpusError::EmptyId);
        }
        if attributes.is_empty() {
            return Err(CorpusError::NoAttributes(id));
        }
        let mut seen = HashSet::new();
        for (name, _) in &attributes {
            if !seen.insert(name.as_str()) {
                return Err(CorpusError::DuplicateAttribute {
                    entity: id.clone(),
                    attribute: name.clone(),
                });
            }
        }
        Ok(Self { id, attributes })
    }

    pub fn id(&self) -> &str {
        &self.id
    }

    pub fn attributes(&self) -> &[(String, String)] {
        &self.attributes
    }

    /// "a1 v1, a2 v2, ..., aN vN", lowercased.
    pub fn linearize(&self) -> String {
        self.attributes
            .iter()
            .map(|(a, v)| format!("{} {}", a.trim(), v.trim()))
            .collect::<Vec<_>>()
            .join(", ")
            .to_lowercase()
    }

    /// `(attribute, canonical value)` pairs. The canonical value is the
    /// normalized token sequence joined by single spaces.
    pub fn value_pairs(&self) -> impl Iterator<Item = (String, String)> + '_ {
        self.attributes
            .iter()
            .map(|(a, v)| (a.to_lowercase(), text::canonical(v)))
            .filter(|(_, v)| !v.is_empty())
    }

    fn same_content(&self, other: &Entity) -> bool {
        self.attributes == other.attributes
    }
}

/// Free-function form of [`Entity::linearize`].
pub fn linearize_entity(entity: &Entity) -> String {
    entity.linearize()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum KbLevel {
    Session,
    Dataset,
}

impl fmt::Display for KbLevel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            KbLevel::Session => "session",
            KbLevel::Dataset => "dataset",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct KnowledgeBase {
    entities: Vec<Entity>,
    level: KbLevel,
    positions: HashMap<String, usize>,
}

impl KnowledgeBase {
    pub fn new(entities: Vec<Entity>, level: KbLevel) -> Result<Self> {
        let mut positions = HashMap::with_capacity(entities.len());
        let mut duplicates = BTreeSet::new();
        for (i, e) in entities.iter().enumerate() {
            if positions.insert(e.id.clone(), i).is_some() {
                duplicates.insert(e.id.clone());
            }
        }
        if !duplicates.is_empty() {
            return Err(CorpusError::DuplicateIds(duplicates.into_iter().collect()));
        }
        Ok(Self {
            entities,
            level,
            positions,
        })
    }

    pub fn level(&self) -> KbLevel {
        self.level
    }

    pub fn len(&self) -> usize {
        self.entities.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entities.is_empty()
    }

    pub fn entities(&self) -> &[Entity] {
        &self.entities
    }

    pub fn position(&self, id: &str) -> Option<usize> {
        self.positions.get(id).copied()
    }

    pub fn get(&self, id: &str) -> Option<&Entity> {
        self.position(id).map(|i| &self.entities[i])
    }

    /// The session-level KB of one dialogue, in the dialogue's id order.
    pub fn session_kb(&self, dialogue: &Dialogue) -> Result<KnowledgeBase> {
        let entities = dialogue
            .session_entity_ids
            .iter()
            .map(|id| {
                self.get(id)
                    .cloned()
                    .ok_or_else(|| CorpusError::DanglingReference {
                        dialogue: dialogue.id.clone(),
                        entity: id.clone(),
                    })
            })
            .collect::<Result<Vec<_>>>()?;
        KnowledgeBase::new(entities, KbLevel::Session)
    }

    pub fn to_file(&self) -> KbFile {
        KbFile {
            level: Some(self.level),
            entities: self
                .entities
                .iter()
                .map(|e| EntityRecord {
                    id: e.id.clone(),
                    attributes: e.attributes.clone(),
                })
                .collect(),
        }
    }
}

/// On-disk layout of a KB document.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct KbFile {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub level: Option<KbLevel>,
    pub entities: Vec<EntityRecord>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EntityRecord {
    pub id: String,
    pub attributes: Vec<(String, String)>,
}

impl KbFile {
    pub fn into_kb(self, level: KbLevel) -> Result<KnowledgeBase> {
        if let Some(found) = self.level {
            if found != level {
                return Err(CorpusError::LevelMismatch {
                    expected: level,
                    found,
                });
            }
        }
        let entities = self
            .entities
            .into_iter()
            .map(|r| Entity::new(r.id, r.attributes))
            .collect::<Result<Vec<_>>>()?;
        KnowledgeBase::new(entities, level)
    }
}

fn read(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|source| CorpusError::Io {
        path: path.to_path_buf(),
        source,
    })
}

pub fn load_kb(path: impl AsRef<Path>, level: KbLevel) -> Result<KnowledgeBase> {
    let path = path.as_ref();
    let file: KbFile = serde_json::from_str(&read(path)?).map_err(|source| CorpusError::Parse {
        path: path.to_path_buf(),
        source,
    })?;
    file.into_kb(level)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Turn {
    pub user: String,
    pub system: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gold_entity_ids: Option<Vec<String>>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Dialogue {
    pub id: String,
    #[serde(default)]
    pub domain: String,
    #[serde(default)]
    pub session_entity_ids: Vec<String>,
    pub turns: Vec<Turn>,
}

impl Dialogue {
    /// Checks turn and reference invariants against `kb`.
    pub fn validate(&self, kb: &KnowledgeBase) -> Result<()> {
        if self.turns.is_empty() {
            return Err(CorpusError::NoTurns(self.id.clone()));
        }
        for (i, turn) in self.turns.iter().enumerate() {
            for (field, text) in [("user", &turn.user), ("system", &turn.system)] {
                if text.trim().is_empty() {
                    return Err(CorpusError::EmptyUtterance {
                        dialogue: self.id.clone(),
                        turn: i + 1,
                        field,
                    });
                }
            }
        }
        let gold = self
            .turns
            .iter()
            .filter_map(|t| t.gold_entity_ids.as_ref())
            .flatten();
        for id in self.session_entity_ids.iter().chain(gold) {
            if kb.get(id).is_none() {
                return Err(CorpusError::DanglingReference {
                    dialogue: self.id.clone(),
                    entity: id.clone(),
                });
            }
        }
        Ok(())
    }

    /// Context of turn `t` (1-based): u_1, y_1, ..., u_{t-1}, y_{t-1}, u_t.
    pub fn context(&self, t: usize) -> Result<DialogueContext> {
        if t == 0 || t > self.turns.len() {
            return Err(CorpusError::TurnOutOfRange {
                dialogue: self.id.clone(),
                turn: t,
                len: self.turns.len(),
            });
        }
        let mut segments = Vec::with_capacity(2 * t - 1);
        for turn in &self.turns[..t - 1] {
            segments.push((Role::User, turn.user.clone()));
            segments.push((Role::Sys, turn.system.clone()));
        }
        segments.push((Role::User, self.turns[t - 1].user.clone()));
        Ok(DialogueContext {
            segments,
            turn_index: t,
        })
    }
}

pub fn build_context(dialogue: &Dialogue, t: usize) -> Result<DialogueContext> {
    dialogue.context(t)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DialogueFile {
    pub dialogues: Vec<Dialogue>,
}

pub fn load_dialogues(path: impl AsRef<Path>, kb: &KnowledgeBase) -> Result<Vec<Dialogue>> {
    let path = path.as_ref();
    let file: DialogueFile =
        serde_json::from_str(&read(path)?).map_err(|source| CorpusError::Parse {
            path: path.to_path_buf(),
            source,
        })?;
    for d in &file.dialogues {
        d.validate(kb)?;
    }
    Ok(file.dialogues)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    User,
    Sys,
}

impl Role {
    pub fn tag(self) -> &'static str {
        match self {
            Role::User => "[user]:",
            Role::Sys => "[sys]:",
        }
    }
}

/// c_t: the role-tagged utterances up to and including the current user turn.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DialogueContext {
    segments: Vec<(Role, String)>,
    turn_index: usize,
}

impl DialogueContext {
    /// A one-off context holding a single user utterance.
    pub fn from_user(text: impl Into<String>) -> Self {
        Self {
            segments: vec![(Role::User, text.into())],
            turn_index: 1,
        }
    }

    pub fn segments(&self) -> &[(Role, String)] {
        &self.segments
    }

    pub fn turn_index(&self) -> usize {
        self.turn_index
    }

    /// Flat rendering, one `[role]: text` line per segment.
    pub fn text(&self) -> String {
        render_segments(&self.segments)
    }

    /// Everything before the current user utterance.
    pub fn history(&self) -> &[(Role, String)] {
        &self.segments[..self.segments.len() - 1]
    }

    pub fn current_user(&self) -> &str {
        &self.segments[self.segments.len() - 1].1
    }

    /// Normalized tokens of the utterances, without role tags.
    pub fn utterance_tokens(&self) -> Vec<String> {
        self.segments
            .iter()
            .flat_map(|(_, s)| text::normalize(s))
            .collect()
    }
}

pub(crate) fn render_segments(segments: &[(Role, String)]) -> String {
    segments
        .iter()
        .map(|(role, s)| format!("{} {}", role.tag(), s.trim()))
        .collect::<Vec<_>>()
        .join("\n")
}

/// Gold `(attribute, canonical value)` pairs of one turn.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct GoldValueSet {
    pub values: BTreeSet<(String, String)>,
}

impl GoldValueSet {
    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }
}

/// Values of the turn's gold entities (all of `kb` when the turn carries
/// no annotation) that occur in the reference response.
pub fn extract_gold_values(turn: &Turn, kb: &KnowledgeBase) -> GoldValueSet {
    let response = text::normalize(&turn.system);
    let entities: Vec<&Entity> = match &turn.gold_entity_ids {
        Some(ids) => ids.iter().filter_map(|id| kb.get(id)).collect(),
        None => kb.entities().iter().collect(),
    };
    let values = entities
        .into_iter()
        .flat_map(|e| e.value_pairs())
        .filter(|(_, v)| {
            let needle: Vec<String> = v.split(' ').map(str::to_owned).collect();
            text::contains(&response, &needle)
        })
        .collect();
    GoldValueSet { values }
}

/// Result of merging session KBs: the dataset KB plus dialogues whose
/// session references were rewritten to the surviving ids.
#[derive(Debug, Clone)]
pub struct MergedCorpus {
    pub kb: KnowledgeBase,
    pub dialogues: Vec<Dialogue>,
}

/// Deduplicated union of per-dialogue session KBs. Dialogue `i` owns
/// `session_kbs[i]`; entities with identical attributes collapse onto the
/// first id seen.
pub fn merge_session_kbs(
    dialogues: &[Dialogue],
    session_kbs: &[KnowledgeBase],
) -> Result<MergedCorpus> {
    if dialogues.len() != session_kbs.len() {
        return Err(CorpusError::SessionCountMismatch {
            dialogues: dialogues.len(),
            sessions: session_kbs.len(),
        });
    }
    let mut merged: Vec<Entity> = Vec::new();
    let mut by_content: HashMap<&[(String, String)], usize> = HashMap::new();
    let mut by_id: HashMap<&str, usize> = HashMap::new();
    let mut out_dialogues = Vec::with_capacity(dialogues.len());

    for (dialogue, session) in dialogues.iter().zip(session_kbs) {
        let mut remap: HashMap<&str, String> = HashMap::new();
        for e in session.entities() {
            let slot = match by_content.get(e.attributes.as_slice()) {
                Some(&slot) => slot,
                None => {
                    if by_id.contains_key(e.id.as_str()) {
                        return Err(CorpusError::ConflictingEntity(e.id.clone()));
                    }
                    merged.push(e.clone());
                    let slot = merged.len() - 1;
                    by_content.insert(e.attributes.as_slice(), slot);
                    by_id.insert(e.id.as_str(), slot);
                    slot
                }
            };
            if let Some(&other) = by_id.get(e.id.as_str()) {
                if !merged[other].same_content(e) {
                    return Err(CorpusError::ConflictingEntity(e.id.clone()));
                }
            }
            remap.insert(e.id.as_str(), merged[slot].id.clone());
        }
        let mut d = dialogue.clone();
        let rewrite = |id: &String| remap.get(id.as_str()).cloned().unwrap_or_else(|| id.clone());
        d.session_entity_ids = if d.session_entity_ids.is_empty() {
            session.entities().iter().map(|e| rewrite(&e.id)).collect()
        } else {
            d.session_entity_ids.iter().map(rewrite).collect()
        };
        for turn in &mut d.turns {
            if let Some(ids) = &mut turn.gold_entity_ids {
                *ids = ids.iter().map(rewrite).collect();
            }
        }
        out_dialogues.push(d);
    }
    let kb = KnowledgeBase::new(merged, KbLevel::Dataset)?;
    Ok(MergedCorpus {
        kb,
        dialogues: out_dialogues,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn entity(id: &str, pairs: &[(&str, &str)]) -> Entity {
        Entity::new(
            id,
            pairs
                .iter()
                .map(|(a, v)| (a.to_string(), v.to_string()))
                .collect(),
        )
        .unwrap()
    }

    fn dialogue(id: &str, turns: &[(&str, &str)], session: &[&str]) -> Dialogue {
        Dialogue {
            id: id.into(),
            domain: "restaurant".into(),
            session_entity_ids: session.iter().map(|s| s.to_string()).collect(),
            turns: turns
                .iter()
                .map(|(u, s)| Turn {
                    user: u.to_string(),
                    system: s.to_string(),
                    gold_entity_ids: None,
                })
                .collect(),
        }
    }

    fn write_tmp(contents: &str) -> tempfile::NamedTempFile {
        use std::io::Write;
        let mut f = tempfile::NamedTempFile::new().unwrap();
        f.write_all(contents.as_bytes()).unwrap();
        f
    }

    #[test]
    fn load_minimal_kb() {
        let f = write_tmp(
            r#"{"level": "session", "entities": [
                {"id": "e1", "attributes": [["name", "charlie chan"], ["area", "centre"]]}
            ]}"#,
        );
        let kb = load_kb(f.path(), KbLevel::Session).unwrap();
        assert_eq!(kb.len(), 1);
        assert_eq!(kb.entities()[0].attributes()[1].0, "area");
    }

    #[test]
    fn duplicate_ids_are_listed() {
        let f = write_tmp(
            r#"{"entities": [
                {"id": "e1", "attributes": [["name", "a"]]},
                {"id": "e1", "attributes": [["name", "b"]]}
            ]}"#,
        );
        match load_kb(f.path(), KbLevel::Dataset) {
            Err(CorpusError::DuplicateIds(ids)) => assert_eq!(ids, vec!["e1"]),
            other => panic!("expected duplicate-id error, got {other:?}"),
        }
    }

    #[test]
    fn zero_attribute_entity_rejected() {
        let f = write_tmp(r#"{"entities": [{"id": "e1", "attributes": []}]}"#);
        assert!(matches!(
            load_kb(f.path(), KbLevel::Dataset),
            Err(CorpusError::NoAttributes(_))
        ));
    }

    #[test]
    fn level_mismatch_rejected() {
        let f = write_tmp(r#"{"level": "session", "entities": [{"id": "e1", "attributes": [["a", "b"]]}]}"#);
        assert!(matches!(
            load_kb(f.path(), KbLevel::Dataset),
            Err(CorpusError::LevelMismatch { .. })
        ));
    }

    #[test]
    fn session_file_with_seven_entities() {
        let entities: Vec<String> = (0..7)
            .map(|i| format!(r#"{{"id": "r{i}", "attributes": [["name", "place {i}"], ["area", "north"]]}}"#))
            .collect();
        let f = write_tmp(&format!(
            r#"{{"level": "session", "entities": [{}]}}"#,
            entities.join(",")
        ));
        assert_eq!(load_kb(f.path(), KbLevel::Session).unwrap().len(), 7);
    }

    #[test]
    fn dialogues_load_and_dangling_refs_fail() {
        let kb = KnowledgeBase::new(vec![entity("e1", &[("name", "x")])], KbLevel::Dataset).unwrap();
        let ok = write_tmp(
            r#"{"dialogues": [{"id": "d1", "domain": "hotel", "session_entity_ids": ["e1"],
                "turns": [{"user": "hi", "system": "hello"}, {"user": "x?", "system": "x it is", "gold_entity_ids": ["e1"]}]}]}"#,
        );
        let ds = load_dialogues(ok.path(), &kb).unwrap();
        assert_eq!(ds.len(), 1);
        assert_eq!(ds[0].turns.len(), 2);

        let bad = write_tmp(
            r#"{"dialogues": [{"id": "d9", "domain": "hotel", "session_entity_ids": ["zzz"],
                "turns": [{"user": "hi", "system": "hello"}]}]}"#,
        );
        match load_dialogues(bad.path(), &kb) {
            Err(CorpusError::DanglingReference { dialogue, entity }) => {
                assert_eq!(dialogue, "d9");
                assert_eq!(entity, "zzz");
            }
            other => panic!("expected dangling reference, got {other:?}"),
        }

        let empty = write_tmp(r#"{"dialogues": [{"id": "d2", "domain": "hotel", "turns": []}]}"#);
        assert!(matches!(load_dialogues(empty.path(), &kb), Err(CorpusError::NoTurns(_))));
    }

    #[test]
    fn dialogue_file_at_reported_scale() {
        // 2877 dialogues carrying 19870 utterances (9935 user/system pairs).
        let kb = KnowledgeBase::new(vec![entity("e1", &[("name", "x")])], KbLevel::Dataset).unwrap();
        let total_turns = 19870 / 2;
        let mut dialogues = Vec::new();
        for i in 0..2877 {
            let n = total_turns / 2877 + usize::from(i < total_turns % 2877);
            let turns: Vec<(&str, &str)> = vec![("hello", "hi"); n];
            dialogues.push(dialogue(&format!("d{i}"), &turns, &["e1"]));
        }
        let f = write_tmp(&serde_json::to_string(&DialogueFile { dialogues }).unwrap());
        let ds = load_dialogues(f.path(), &kb).unwrap();
        assert_eq!(ds.len(), 2877);
        let utterances: usize = ds.iter().map(|d| 2 * d.turns.len()).sum();
        assert_eq!(utterances, 19870);
    }

    #[test]
    fn linearization_matches_prompt_layout() {
        let e = entity(
            "e1",
            &[("name", "charlie chan"), ("address", "regent street city centre")],
        );
        assert_eq!(
            e.linearize(),
            "name charlie chan, address regent street city centre"
        );
        assert_eq!(entity("e2", &[("name", "x")]).linearize(), "name x");
        let reversed = entity(
            "e1",
            &[("address", "regent street city centre"), ("name", "charlie chan")],
        );
        assert_eq!(
            reversed.linearize(),
            "address regent street city centre, name charlie chan"
        );
    }

    #[test]
    fn context_construction() {
        let d = dialogue(
            "d",
            &[
                ("are there any restaurants that serve proper british food in town ?", "oh yes quite a few ."),
                ("west , if possible .", "sorry , none ."),
            ],
            &[],
        );
        let c1 = d.context(1).unwrap();
        assert_eq!(c1.segments().len(), 1);
        assert!(c1.text().starts_with("[user]: are there any restaurants"));
        let c2 = d.context(2).unwrap();
        assert_eq!(c2.segments().len(), 3);
        assert_eq!(c2.segments()[1].0, Role::Sys);
        assert_eq!(c2.current_user(), "west , if possible .");
        assert!(c2.text().starts_with(&c1.text()));
        assert!(matches!(d.context(0), Err(CorpusError::TurnOutOfRange { .. })));
        assert!(matches!(d.context(3), Err(CorpusError::TurnOutOfRange { .. })));
    }

    #[test]
    fn merge_shares_entities() {
        let a = entity("a", &[("name", "alpha")]);
        let b = entity("b", &[("name", "beta")]);
        let c = entity("c", &[("name", "gamma")]);
        let s1 = KnowledgeBase::new(vec![a.clone(), b.clone()], KbLevel::Session).unwrap();
        let s2 = KnowledgeBase::new(vec![b.clone(), c.clone()], KbLevel::Session).unwrap();
        let ds = vec![dialogue("d1", &[("u", "s")], &[]), dialogue("d2", &[("u", "s")], &[])];
        let merged = merge_session_kbs(&ds, &[s1.clone(), s2]).unwrap();
        assert_eq!(merged.kb.len(), 3);
        assert_eq!(merged.kb.level(), KbLevel::Dataset);
        let ids: Vec<&str> = merged.kb.entities().iter().map(Entity::id).collect();
        assert_eq!(ids, vec!["a", "b", "c"]);
        assert_eq!(merged.dialogues[1].session_entity_ids, vec!["b", "c"]);

        let same = merge_session_kbs(&ds, &[s1.clone(), s1.clone()]).unwrap();
        assert_eq!(same.kb.entities(), s1.entities());
    }

    #[test]
    fn merge_collapses_reused_content_and_rejects_conflicts() {
        let a1 = entity("x1", &[("name", "alpha")]);
        let a2 = entity("x7", &[("name", "alpha")]);
        let ds = vec![
            dialogue("d1", &[("u", "s")], &["x1"]),
            dialogue("d2", &[("u", "s")], &["x7"]),
        ];
        let s1 = KnowledgeBase::new(vec![a1], KbLevel::Session).unwrap();
        let s2 = KnowledgeBase::new(vec![a2], KbLevel::Session).unwrap();
        let merged = merge_session_kbs(&ds, &[s1.clone(), s2]).unwrap();
        assert_eq!(merged.kb.len(), 1);
        assert_eq!(merged.dialogues[1].session_entity_ids, vec!["x1"]);

        let clash = KnowledgeBase::new(vec![entity("x1", &[("name", "other")])], KbLevel::Session).unwrap();
        assert!(matches!(
            merge_session_kbs(&ds, &[s1, clash]),
            Err(CorpusError::ConflictingEntity(id)) if id == "x1"
        ));
    }

    #[test]
    fn dataset_rendering_is_longer_than_session_rendering() {
        // The merged KB rendered alongside a dialogue yields a longer input
        // than the dialogue's own session KB.
        let sessions: Vec<KnowledgeBase> = (0..4)
            .map(|i| {
                KnowledgeBase::new(
                    vec![entity(&format!("e{i}"), &[("name", &format!("place {i}")), ("area", "north")])],
                    KbLevel::Session,
                )
                .unwrap()
            })
            .collect();
        let ds: Vec<Dialogue> = (0..4).map(|i| dialogue(&format!("d{i}"), &[("u", "s")], &[])).collect();
        let merged = merge_session_kbs(&ds, &sessions).unwrap();
        let render = |kb: &KnowledgeBase| -> usize {
            kb.entities().iter().map(|e| text::normalize(&e.linearize()).len()).sum()
        };
        assert!(render(&merged.kb) > render(&sessions[0]));
        assert_eq!(render(&merged.kb), 4 * render(&sessions[0]));
    }

    #[test]
    fn gold_values_from_response() {
        let kb = KnowledgeBase::new(
            vec![
                entity(
                    "e1",
                    &[
                        ("name", "charlie chan"),
                        ("area", "centre"),
                        ("food", "chinese"),
                        ("phone", "01223361763"),
                        ("pricerange", "cheap"),
                    ],
                ),
                entity("e2", &[("name", "golden wok"), ("area", "north")]),
            ],
            KbLevel::Session,
        )
        .unwrap();
        let mut turn = Turn {
            user: "where?".into(),
            system: "charlie chan is in the centre".into(),
            gold_entity_ids: Some(vec!["e1".into()]),
        };
        // Exhaustive scan: name and area occur, food/phone/pricerange do not.
        let gold = extract_gold_values(&turn, &kb);
        assert_eq!(gold.len(), 2);
        assert!(gold.values.contains(&("name".into(), "charlie chan".into())));
        assert!(gold.values.contains(&("area".into(), "centre".into())));

        turn.system = "sorry, nothing matches".into();
        assert!(extract_gold_values(&turn, &kb).is_empty());

        turn.system = "golden wok is up north".into();
        turn.gold_entity_ids = None;
        assert_eq!(extract_gold_values(&turn, &kb).len(), 2);
    }

    fn arb_entity() -> impl Strategy<Value = Entity> {
        prop::collection::vec(("[a-c]{1,2}", "[a-c ]{1,4}"), 1..4).prop_filter_map(
            "unique names",
            |pairs| Entity::new("e", pairs).ok(),
        )
    }

    proptest! {
        #[test]
        fn linearization_injective(a in arb_entity(), b in arb_entity()) {
            // Injective on the attribute list modulo surrounding whitespace and case.
            let norm = |e: &Entity| e.attributes().iter()
                .map(|(x, y)| (x.trim().to_lowercase(), y.trim().to_lowercase()))
                .collect::<Vec<_>>();
            // Names carry no spaces and values no commas, so pairs split unambiguously.
            if norm(&a) != norm(&b) {
                prop_assert_ne!(a.linearize(), b.linearize());
            }
        }

        #[test]
        fn context_text_is_prefix(n in 1usize..6, seed in any::<u64>()) {
            let turns: Vec<(String, String)> = (0..n)
                .map(|i| (format!("u{i} {seed}"), format!("s{i}")))
                .collect();
            let d = Dialogue {
                id: "d".into(),
                domain: String::new(),
                session_entity_ids: vec![],
                turns: turns.iter().map(|(u, s)| Turn { user: u.clone(), system: s.clone(), gold_entity_ids: None }).collect(),
            };
            for t in 1..n {
                let a = d.context(t).unwrap().text();
                let b = d.context(t + 1).unwrap().text();
                prop_assert!(b.starts_with(&a));
                prop_assert_eq!(d.context(t).unwrap().segments().iter().filter(|s| s.0 == Role::User).count(), t);
            }
        }

        #[test]
        fn merge_properties(picks in prop::collection::vec(prop::collection::btree_set(0usize..6, 1..4), 1..5)) {
            let pool: Vec<Entity> = (0..6).map(|i| entity(&format!("e{i}"), &[("name", &format!("n{i}"))])).collect();
            let sessions: Vec<KnowledgeBase> = picks.iter()
                .map(|s| KnowledgeBase::new(s.iter().map(|&i| pool[i].clone()).collect(), KbLevel::Session).unwrap())
                .collect();
            let ds: Vec<Dialogue> = (0..sessions.len()).map(|i| dialogue(&format!("d{i}"), &[("u", "s")], &[])).collect();
            let merged = merge_session_kbs(&ds, &sessions).unwrap();
            let total: usize = sessions.iter().map(KnowledgeBase::len).sum();
            prop_assert!(merged.kb.len() <= total);
            let union: BTreeSet<usize> = picks.iter().flatten().copied().collect();
            prop_assert_eq!(merged.kb.len(), union.len());

            // Idempotent: merging the merged KB with itself changes nothing.
            let twice = merge_session_kbs(&ds[..1], &[merged.kb.clone()]).unwrap();
            prop_assert_eq!(twice.kb.entities(), merged.kb.entities());

            // Commutative up to order.
            let mut rev_sessions = sessions.clone();
            rev_sessions.reverse();
            let rev = merge_session_kbs(&ds, &rev_sessions).unwrap();
            let set = |kb: &KnowledgeBase| kb.entities().iter().map(|e| e.id().to_string()).collect::<BTreeSet<_>>();
            prop_assert_eq!(set(&rev.kb), set(&merged.kb));
        }

        #[test]
        fn gold_values_are_kb_pairs(words in prop::collection::vec("(alpha|beta|north|cheap|x)", 0..8)) {
            let kb = KnowledgeBase::new(vec![
                entity("e1", &[("name", "alpha"), ("area", "north")]),
                entity("e2", &[("name", "beta"), ("price", "cheap")]),
            ], KbLevel::Session).unwrap();
            let turn = Turn { user: "q".into(), system: words.join(" "), gold_entity_ids: None };
            let all: BTreeSet<(String, String)> = kb.entities().iter().flat_map(|e| e.value_pairs()).collect();
            for pair in extract_gold_values(&turn, &kb).values {
                prop_assert!(all.contains(&pair));
            }
        }
    }
}
