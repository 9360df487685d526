//! Unified key-value task records.
//!
//! Every task instance, whatever its original structure, is an ordered list of
//! `(key, value)` feature pairs. At most one pair carries the output result
//! (the label); unlabeled records carry none. Records are rendered to and
//! parsed from a single canonical text grammar (see [`render`]).

mod error;
pub mod render;
mod schema;

use std::collections::HashSet;

use serde::{Deserialize, Serialize};

pub use error::RecordError;
pub use render::{
    fill_masks, parse_completion, parse_prompt, parse_rendered, render_record, substitute_targets,
    ParsedInput, RenderedPair,
};
pub use schema::{LengthClass, TaskSchema};

/// Terminates the target sequence.
pub const END_SENTINEL: &str = "<END>";
/// Bracket name that opens each demonstration block.
pub const EXAMPLE_MARKER: &str = "Example";
/// Bracket name that introduces the main record after demonstrations.
pub const TASK_MARKER: &str = "Task";

pub(crate) const RESERVED_NAMES: [&str; 2] = [EXAMPLE_MARKER, TASK_MARKER];

/// Sentinel for the `index`-th masked value, e.g. `<MASK_0>`.
pub fn sentinel(index: usize) -> String {
    format!("<MASK_{index}>")
}

/// A sentinel occurrence inside some text.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) struct SentinelHit {
    pub start: usize,
    pub end: usize,
    /// `None` for `<END>`.
    pub index: Option<usize>,
}

/// Finds the first sentinel (`<MASK_n>` or `<END>`) at or after byte `from`.
pub(crate) fn find_sentinel(text: &str, from: usize) -> Option<SentinelHit> {
    let bytes = text.as_bytes();
    let mut pos = from;
    while let Some(off) = text[pos..].find('<') {
        let start = pos + off;
        let rest = &text[start..];
        if rest.starts_with(END_SENTINEL) {
            return Some(SentinelHit {
                start,
                end: start + END_SENTINEL.len(),
                index: None,
            });
        }
        if let Some(digits) = rest.strip_prefix("<MASK_") {
            let n = digits.bytes().take_while(u8::is_ascii_digit).count();
            if n > 0 && bytes.get(start + 6 + n) == Some(&b'>') {
                if let Ok(index) = digits[..n].parse::<usize>() {
                    return Some(SentinelHit {
                        start,
                        end: start + 6 + n + 1,
                        index: Some(index),
                    });
                }
            }
        }
        pos = start + 1;
    }
    None
}

/// True if `text` contains `<END>` or any `<MASK_n>`.
pub fn contains_sentinel(text: &str) -> bool {
    find_sentinel(text, 0).is_some()
}

/// Whether a pair is an input feature or the output result.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    Input,
    Output,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct FieldKey {
    pub name: String,
    pub role: Role,
}

impl FieldKey {
    pub fn input(name: impl Into<String>) -> Self {
        Self {
            name: name.into(),
            role: Role::Input,
        }
    }

    pub fn output(name: impl Into<String>) -> Self {
        Self {
            name: name.into(),
            role: Role::Output,
        }
    }
}

/// Checks the naming rules shared by keys and task names.
pub(crate) fn check_name(name: &str) -> Result<(), String> {
    if name.trim().is_empty() {
        return Err("name is empty".into());
    }
    if name.contains('[') || name.contains(']') {
        return Err("name contains a square bracket".into());
    }
    if contains_sentinel(name) {
        return Err("name contains a sentinel marker".into());
    }
    if name != name.trim() {
        return Err("name has surrounding whitespace".into());
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct FieldValue {
    pub text: String,
    pub masked: bool,
}

impl FieldValue {
    pub fn new(text: impl Into<String>) -> Self {
        Self {
            text: text.into(),
            masked: false,
        }
    }

    pub fn masked() -> Self {
        Self {
            text: String::new(),
            masked: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct Pair {
    pub key: FieldKey,
    pub value: FieldValue,
}

impl Pair {
    pub fn new(key: FieldKey, text: impl Into<String>) -> Self {
        Self {
            key,
            value: FieldValue::new(text),
        }
    }
}

/// One task instance as an ordered list of feature pairs.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "RecordLine", into = "RecordLine")]
pub struct KeyValueRecord {
    task: String,
    pairs: Vec<Pair>,
}

impl KeyValueRecord {
    /// Builds a record, enforcing the structural invariants: non-empty, key
    /// names distinct and well-formed, at most one output pair.
    pub fn new(task: impl Into<String>, pairs: Vec<Pair>) -> Result<Self, RecordError> {
        let task = task.into();
        check_name(&task).map_err(|reason| RecordError::InvalidTaskName {
            name: task.clone(),
            reason,
        })?;
        if pairs.is_empty() {
            return Err(RecordError::EmptyRecord);
        }
        let mut seen = HashSet::new();
        let mut outputs = 0;
        for pair in &pairs {
            check_name(&pair.key.name).map_err(|reason| RecordError::InvalidKey {
                name: pair.key.name.clone(),
                reason,
            })?;
            if !seen.insert(pair.key.name.as_str()) {
                return Err(RecordError::DuplicateKey(pair.key.name.clone()));
            }
            if pair.key.role == Role::Output {
                outputs += 1;
            }
            if !pair.value.masked && contains_sentinel(&pair.value.text) {
                return Err(RecordError::SentinelInValue {
                    key: pair.key.name.clone(),
                });
            }
        }
        if outputs > 1 {
            return Err(RecordError::MultipleOutputs);
        }
        Ok(Self { task, pairs })
    }

    /// Convenience constructor from `(key, value)` string pairs; `output`
    /// names the output key, if any.
    pub fn from_strs(
        task: &str,
        pairs: &[(&str, &str)],
        output: Option<&str>,
    ) -> Result<Self, RecordError> {
        let pairs = pairs
            .iter()
            .map(|(k, v)| {
                let key = if Some(*k) == output {
                    FieldKey::output(*k)
                } else {
                    FieldKey::input(*k)
                };
                Pair::new(key, *v)
            })
            .collect();
        Self::new(task, pairs)
    }

    pub fn task(&self) -> &str {
        &self.task
    }

    pub fn pairs(&self) -> &[Pair] {
        &self.pairs
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    pub fn keys(&self) -> impl Iterator<Item = &str> {
        self.pairs.iter().map(|p| p.key.name.as_str())
    }

    pub fn position(&self, key: &str) -> Option<usize> {
        self.pairs.iter().position(|p| p.key.name == key)
    }

    /// Value text for `key` if present and not masked.
    pub fn get(&self, key: &str) -> Option<&str> {
        self.pairs
            .iter()
            .find(|p| p.key.name == key && !p.value.masked)
            .map(|p| p.value.text.as_str())
    }

    pub fn output(&self) -> Option<&Pair> {
        self.pairs.iter().find(|p| p.key.role == Role::Output)
    }

    pub fn masked_count(&self) -> usize {
        self.pairs.iter().filter(|p| p.value.masked).count()
    }

    /// Replaces (or unmasks) the value of an existing key.
    pub fn set(&mut self, key: &str, text: impl Into<String>) -> Result<(), RecordError> {
        let text = text.into();
        if contains_sentinel(&text) {
            return Err(RecordError::SentinelInValue { key: key.into() });
        }
        let pair = self
            .pairs
            .iter_mut()
            .find(|p| p.key.name == key)
            .ok_or_else(|| RecordError::UnknownKey {
                key: key.into(),
                task: self.task.clone(),
            })?;
        pair.value = FieldValue::new(text);
        Ok(())
    }

    /// Copy of this record with the pairs reordered by `order`, keeping
    /// only keys that appear in it.
    pub(crate) fn reordered(&self, order: &[String]) -> Self {
        let pairs = order
            .iter()
            .filter_map(|k| self.pairs.iter().find(|p| &p.key.name == k).cloned())
            .collect();
        Self {
            task: self.task.clone(),
            pairs,
        }
    }

    pub(crate) fn pairs_mut(&mut self) -> &mut [Pair] {
        &mut self.pairs
    }

    /// All unmasked values joined by single spaces.
    pub fn text(&self) -> String {
        self.pairs
            .iter()
            .filter(|p| !p.value.masked)
            .map(|p| p.value.text.as_str())
            .collect::<Vec<_>>()
            .join(" ")
    }
}

/// JSON Lines wire form of a record.
#[derive(Debug, Clone, Serialize, Deserialize)]
struct RecordLine {
    task: String,
    pairs: Vec<PairLine>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct PairLine {
    key: String,
    value: String,
    role: Role,
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    masked: bool,
}

impl TryFrom<RecordLine> for KeyValueRecord {
    type Error = RecordError;

    fn try_from(line: RecordLine) -> Result<Self, Self::Error> {
        let pairs = line
            .pairs
            .into_iter()
            .map(|p| Pair {
                key: FieldKey {
                    name: p.key,
                    role: p.role,
                },
                value: FieldValue {
                    text: p.value,
                    masked: p.masked,
                },
            })
            .collect();
        KeyValueRecord::new(line.task, pairs)
    }
}

impl From<KeyValueRecord> for RecordLine {
    fn from(r: KeyValueRecord) -> Self {
        RecordLine {
            task: r.task,
            pairs: r
                .pairs
                .into_iter()
                .map(|p| PairLine {
                    key: p.key.name,
                    value: p.value.text,
                    role: p.key.role,
                    masked: p.value.masked,
                })
                .collect(),
        }
    }
}
