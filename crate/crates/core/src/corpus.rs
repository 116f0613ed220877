//! Passage collections, document chunking, and conversational datasets.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fmt;
use std::ops::Range;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::jsonl;

/// The retrievable unit.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Passage {
    pub id: String,
    pub text: String,
}

/// An ordered passage collection with id lookup.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Corpus {
    passages: Vec<Passage>,
    lookup: HashMap<String, usize>,
}

impl Corpus {
    pub fn new(passages: Vec<Passage>) -> Result<Self> {
        let mut lookup = HashMap::with_capacity(passages.len());
        for (pos, p) in passages.iter().enumerate() {
            if p.text.trim().is_empty() {
                return Err(Error::Validation(format!(
                    "passage {:?} has empty text",
                    p.id
                )));
            }
            if lookup.insert(p.id.clone(), pos).is_some() {
                return Err(Error::Validation(format!(
                    "duplicate passage id {:?}",
                    p.id
                )));
            }
        }
        Ok(Self { passages, lookup })
    }

    pub fn len(&self) -> usize {
        self.passages.len()
    }

    pub fn is_empty(&self) -> bool {
        self.passages.is_empty()
    }

    pub fn passages(&self) -> &[Passage] {
        &self.passages
    }

    pub fn position(&self, id: &str) -> Option<usize> {
        self.lookup.get(id).copied()
    }

    pub fn get(&self, id: &str) -> Option<&Passage> {
        self.position(id).map(|i| &self.passages[i])
    }

    pub fn contains(&self, id: &str) -> bool {
        self.lookup.contains_key(id)
    }

    pub fn iter(&self) -> impl Iterator<Item = &Passage> {
        self.passages.iter()
    }

    pub fn write_jsonl(&self, path: &Path) -> Result<()> {
        jsonl::write(path, &self.passages)
    }
}

/// Loads a passage file (`{"id", "text"}` per line).
pub fn load_passages(path: &Path) -> Result<Corpus> {
    let passages: Vec<Passage> = jsonl::read(path)?;
    Corpus::new(passages)
}

/// Character spans of overlapping windows over a text of `len` characters.
///
/// Windows start at multiples of `size - overlap`; the last window ends at `len`.
pub fn chunk_spans(len: usize, size: usize, overlap: usize) -> Result<Vec<Range<usize>>> {
    if size == 0 {
        return Err(Error::Parameter("chunk size must be positive".into()));
    }
    if overlap >= size {
        return Err(Error::Parameter(format!(
            "chunk overlap {overlap} must be smaller than chunk size {size}"
        )));
    }
    let stride = size - overlap;
    let mut spans = Vec::new();
    let mut start = 0;
    while start < len {
        let end = (start + size).min(len);
        spans.push(start..end);
        if end == len {
            break;
        }
        start += stride;
    }
    Ok(spans)
}

/// Splits `text` into overlapping character windows. Chunk ids are
/// `<parent_id>-<ordinal>` with a zero-padded ordinal.
pub fn chunk_text(
    parent_id: &str,
    text: &str,
    size: usize,
    overlap: usize,
) -> Result<Vec<Passage>> {
    if text.is_empty() {
        return Err(Error::Input(format!(
            "document {parent_id:?} has empty text"
        )));
    }
    let chars: Vec<char> = text.chars().collect();
    let spans = chunk_spans(chars.len(), size, overlap)?;
    let width = (spans.len().saturating_sub(1)).to_string().len().max(4);
    Ok(spans
        .into_iter()
        .enumerate()
        .map(|(i, span)| Passage {
            id: format!("{parent_id}-{i:0width$}"),
            text: chars[span].iter().collect(),
        })
        .collect())
}

/// Universal key for a conversational turn.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct TurnKey {
    pub session_id: String,
    pub turn: u32,
}

impl TurnKey {
    pub fn new(session_id: impl Into<String>, turn: u32) -> Self {
        Self {
            session_id: session_id.into(),
            turn,
        }
    }
}

impl fmt::Display for TurnKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}#{}", self.session_id, self.turn)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Turn {
    pub session_id: String,
    #[serde(rename = "turn")]
    pub turn_index: u32,
    pub query: String,
    pub response: String,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub gold_ref_ids: Vec<String>,
}

impl Turn {
    pub fn key(&self) -> TurnKey {
        TurnKey::new(self.session_id.clone(), self.turn_index)
    }
}

/// Conversation history before a turn plus that turn's query.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DialogueContext {
    pub history: Vec<(String, String)>,
    pub current_query: String,
}

impl DialogueContext {
    /// `Q: ...` / `A: ...` lines for every past turn, then `Q: <current query>`.
    pub fn serialize(&self) -> String {
        let mut out = String::new();
        for (q, a) in &self.history {
            out.push_str("Q: ");
            out.push_str(q);
            out.push_str("\nA: ");
            out.push_str(a);
            out.push('\n');
        }
        out.push_str("Q: ");
        out.push_str(&self.current_query);
        out
    }
}

/// Builds the context of turn `t` (1-based) of a session.
pub fn context(session: &[Turn], t: usize) -> Result<DialogueContext> {
    if t == 0 || t > session.len() {
        return Err(Error::Index(format!(
            "turn {t} outside session of {} turns",
            session.len()
        )));
    }
    Ok(DialogueContext {
        history: session[..t - 1]
            .iter()
            .map(|turn| (turn.query.clone(), turn.response.clone()))
            .collect(),
        current_query: session[t - 1].query.clone(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    #[default]
    Train,
    Test,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Session {
    pub id: String,
    pub turns: Vec<Turn>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Dataset {
    pub sessions: Vec<Session>,
    pub split: Split,
}

impl Dataset {
    /// Groups turns by session (first-appearance order) and validates indices and gold ids.
    pub fn from_turns(turns: Vec<Turn>, split: Split, corpus: Option<&Corpus>) -> Result<Self> {
        let mut order: Vec<String> = Vec::new();
        let mut grouped: HashMap<String, Vec<Turn>> = HashMap::new();
        for turn in turns {
            if turn.query.trim().is_empty() {
                return Err(Error::Validation(format!(
                    "turn {} has an empty query",
                    turn.key()
                )));
            }
            if turn.response.trim().is_empty() {
                return Err(Error::Validation(format!(
                    "turn {} has an empty response",
                    turn.key()
                )));
            }
            if let Some(corpus) = corpus {
                if let Some(missing) = turn.gold_ref_ids.iter().find(|id| !corpus.contains(id)) {
                    return Err(Error::Validation(format!(
                        "turn {} references unknown gold passage {missing:?}",
                        turn.key()
                    )));
                }
            }
            if !grouped.contains_key(&turn.session_id) {
                order.push(turn.session_id.clone());
            }
            grouped
                .entry(turn.session_id.clone())
                .or_default()
                .push(turn);
        }

        let mut sessions = Vec::with_capacity(order.len());
        for id in order {
            let mut turns = grouped.remove(&id).unwrap_or_default();
            turns.sort_by_key(|t| t.turn_index);
            let mut seen = HashSet::new();
            for (expected, turn) in (1u32..).zip(&turns) {
                if !seen.insert(turn.turn_index) {
                    return Err(Error::Validation(format!(
                        "session {id:?} has duplicate turn {}",
                        turn.turn_index
                    )));
                }
                if turn.turn_index != expected {
                    return Err(Error::Validation(format!(
                        "session {id:?} has a gap at t={expected}"
                    )));
                }
            }
            sessions.push(Session { id, turns });
        }
        Ok(Self { sessions, split })
    }

    pub fn turns(&self) -> impl Iterator<Item = &Turn> {
        self.sessions.iter().flat_map(|s| s.turns.iter())
    }

    pub fn turn_count(&self) -> usize {
        self.sessions.iter().map(|s| s.turns.len()).sum()
    }

    /// Every turn with its dialogue context, in session then turn order.
    pub fn contexts(&self) -> Vec<(&Turn, DialogueContext)> {
        let mut out = Vec::with_capacity(self.turn_count());
        for s in &self.sessions {
            for (i, turn) in s.turns.iter().enumerate() {
                let ctx = context(&s.turns, i + 1).expect("index within session");
                out.push((turn, ctx));
            }
        }
        out
    }

    /// Gold id sets keyed by turn, omitting turns without gold references.
    pub fn gold(&self) -> BTreeMap<TurnKey, Vec<String>> {
        self.turns()
            .filter(|t| !t.gold_ref_ids.is_empty())
            .map(|t| (t.key(), t.gold_ref_ids.clone()))
            .collect()
    }

    pub fn write_jsonl(&self, path: &Path) -> Result<()> {
        jsonl::write(path, self.turns())
    }
}

/// Loads a conversation file, verifying gold ids against `corpus` when given.
pub fn load_conversations(path: &Path, corpus: Option<&Corpus>, split: Split) -> Result<Dataset> {
    let turns: Vec<Turn> = jsonl::read(path)?;
    Dataset::from_turns(turns, split, corpus)
}
