use std::collections::{BTreeMap, BTreeSet, HashSet};

use serde::{Deserialize, Serialize};

use super::{check_name, contains_sentinel, KeyValueRecord, Pair, RecordError, Role};
use super::{FieldKey, RESERVED_NAMES};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LengthClass {
    #[default]
    Short,
    Long,
}

/// Declared structure of one task: its keys in canonical order, the output
/// key and, for closed label sets, the label vocabulary.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaskSchema {
    #[serde(alias = "task_name")]
    pub task: String,
    pub keys: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub output_key: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub label_vocab: Option<BTreeSet<String>>,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub length_class: BTreeMap<String, LengthClass>,
}

impl TaskSchema {
    pub fn new(task: impl Into<String>, keys: &[&str], output_key: Option<&str>) -> Self {
        Self {
            task: task.into(),
            keys: keys.iter().map(|k| k.to_string()).collect(),
            output_key: output_key.map(str::to_string),
            label_vocab: None,
            length_class: BTreeMap::new(),
        }
    }

    pub fn with_labels(mut self, labels: &[&str]) -> Self {
        self.label_vocab = Some(labels.iter().map(|l| l.to_string()).collect());
        self
    }

    pub fn with_length(mut self, key: &str, class: LengthClass) -> Self {
        self.length_class.insert(key.to_string(), class);
        self
    }

    /// Infers a schema from a single record: its key order, its output key,
    /// no label vocabulary.
    pub fn infer(record: &KeyValueRecord) -> Self {
        Self {
            task: record.task().to_string(),
            keys: record.keys().map(str::to_string).collect(),
            output_key: record.output().map(|p| p.key.name.clone()),
            label_vocab: None,
            length_class: BTreeMap::new(),
        }
    }

    /// Checks the schema's own invariants.
    pub fn validate(&self) -> Result<(), RecordError> {
        check_name(&self.task).map_err(|reason| RecordError::InvalidTaskName {
            name: self.task.clone(),
            reason,
        })?;
        if self.keys.is_empty() {
            return Err(RecordError::InvalidSchema("no keys declared".into()));
        }
        let mut seen = HashSet::new();
        for key in &self.keys {
            check_name(key).map_err(|reason| RecordError::InvalidKey {
                name: key.clone(),
                reason,
            })?;
            if RESERVED_NAMES.contains(&key.as_str()) {
                return Err(RecordError::InvalidKey {
                    name: key.clone(),
                    reason: "reserved marker name".into(),
                });
            }
            if !seen.insert(key.as_str()) {
                return Err(RecordError::DuplicateKey(key.clone()));
            }
        }
        if let Some(out) = &self.output_key {
            if !seen.contains(out.as_str()) {
                return Err(RecordError::InvalidSchema(format!(
                    "output key `{out}` is not among the keys"
                )));
            }
        }
        if let Some(vocab) = &self.label_vocab {
            if vocab.is_empty() {
                return Err(RecordError::InvalidSchema("empty label vocabulary".into()));
            }
            if self.output_key.is_none() {
                return Err(RecordError::InvalidSchema(
                    "label vocabulary without an output key".into(),
                ));
            }
        }
        for key in self.length_class.keys() {
            if !seen.contains(key.as_str()) {
                return Err(RecordError::InvalidSchema(format!(
                    "length class for undeclared key `{key}`"
                )));
            }
        }
        Ok(())
    }

    pub fn role_of(&self, key: &str) -> Role {
        if self.output_key.as_deref() == Some(key) {
            Role::Output
        } else {
            Role::Input
        }
    }

    pub fn field_key(&self, key: &str) -> FieldKey {
        FieldKey {
            name: key.to_string(),
            role: self.role_of(key),
        }
    }

    pub fn contains_key(&self, key: &str) -> bool {
        self.keys.iter().any(|k| k == key)
    }

    pub fn length_class_of(&self, key: &str) -> LengthClass {
        self.length_class.get(key).copied().unwrap_or_default()
    }

    /// Bracket names that are structural in this schema's grammar.
    pub(crate) fn marker_names(&self) -> impl Iterator<Item = &str> {
        self.keys
            .iter()
            .map(String::as_str)
            .chain(RESERVED_NAMES.iter().copied())
    }

    /// Validates a record against this schema. Masked pairs are allowed; their
    /// (empty) text is not checked.
    pub fn check(&self, record: &KeyValueRecord) -> Result<(), RecordError> {
        if record.task() != self.task {
            return Err(RecordError::TaskMismatch {
                expected: self.task.clone(),
                found: record.task().to_string(),
            });
        }
        for pair in record.pairs() {
            let name = &pair.key.name;
            if !self.contains_key(name) {
                return Err(RecordError::UnknownKey {
                    key: name.clone(),
                    task: self.task.clone(),
                });
            }
            let expected = self.role_of(name);
            if pair.key.role != expected {
                return Err(RecordError::RoleMismatch {
                    key: name.clone(),
                    expected,
                    found: pair.key.role,
                });
            }
            if pair.value.masked {
                continue;
            }
            self.check_value(name, &pair.value.text)?;
            if expected == Role::Output {
                if let Some(vocab) = &self.label_vocab {
                    if !vocab.contains(&pair.value.text) {
                        return Err(RecordError::LabelNotInVocab {
                            key: name.clone(),
                            value: pair.value.text.clone(),
                        });
                    }
                }
            }
        }
        Ok(())
    }

    /// Rejects values that would make the rendered grammar ambiguous.
    pub fn check_value(&self, key: &str, text: &str) -> Result<(), RecordError> {
        if contains_sentinel(text) {
            return Err(RecordError::SentinelInValue { key: key.into() });
        }
        if text.contains('[') {
            for marker in self.marker_names() {
                if text.contains(&format!("[{marker}]")) {
                    return Err(RecordError::MarkerInValue {
                        key: key.into(),
                        marker: marker.into(),
                    });
                }
            }
        }
        Ok(())
    }

    /// Checks and reorders a record into schema key order.
    pub fn canonicalize(&self, record: &KeyValueRecord) -> Result<KeyValueRecord, RecordError> {
        self.check(record)?;
        Ok(record.reordered(&self.keys))
    }

    /// Builds a record from raw `(key, value)` strings, assigning roles from
    /// the schema and ordering pairs canonically.
    pub fn record(&self, pairs: &[(&str, &str)]) -> Result<KeyValueRecord, RecordError> {
        let pairs = pairs
            .iter()
            .map(|(k, v)| Pair::new(self.field_key(k), *v))
            .collect();
        let rec = KeyValueRecord::new(self.task.clone(), pairs)?;
        self.canonicalize(&rec)
    }

    /// Projection onto `keys` (kept in schema order), optionally renaming one
    /// key. Used to build the per-stage prompt grammar of a pipeline.
    pub fn view(&self, keys: &[String], rename: Option<(&str, &str)>) -> TaskSchema {
        let renamed = |k: &str| match rename {
            Some((from, to)) if from == k => to.to_string(),
            _ => k.to_string(),
        };
        let kept: Vec<&String> = self.keys.iter().filter(|k| keys.contains(k)).collect();
        let output_key = self
            .output_key
            .as_ref()
            .filter(|o| keys.contains(o))
            .map(|o| renamed(o));
        TaskSchema {
            task: self.task.clone(),
            keys: kept.iter().map(|k| renamed(k)).collect(),
            label_vocab: output_key.as_ref().and(self.label_vocab.clone()),
            output_key,
            length_class: kept
                .iter()
                .filter_map(|k| self.length_class.get(*k).map(|c| (renamed(k), *c)))
                .collect(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cb() -> TaskSchema {
        TaskSchema::new("cb", &["Premise", "Hypothesis", "Tag"], Some("Tag"))
            .with_labels(&["entailment", "contradiction", "neutral"])
            .with_length("Premise", LengthClass::Long)
    }

    #[test]
    fn schema_validation() {
        assert!(cb().validate().is_ok());
        let mut bad = cb();
        bad.output_key = Some("Label".into());
        assert!(bad.validate().is_err());
        let reserved = TaskSchema::new("t", &["Example"], None);
        assert!(matches!(
            reserved.validate(),
            Err(RecordError::InvalidKey { .. })
        ));
        let mut empty_vocab = cb();
        empty_vocab.label_vocab = Some(BTreeSet::new());
        assert!(empty_vocab.validate().is_err());
    }

    #[test]
    fn canonical_order_and_checks() {
        let schema = cb();
        let rec = schema
            .record(&[("Tag", "neutral"), ("Premise", "p"), ("Hypothesis", "h")])
            .unwrap();
        assert_eq!(rec.keys().collect::<Vec<_>>(), ["Premise", "Hypothesis", "Tag"]);

        let bad_label = schema.record(&[("Premise", "p"), ("Tag", "maybe")]);
        assert!(matches!(bad_label, Err(RecordError::LabelNotInVocab { .. })));

        let marker = schema.record(&[("Premise", "see [Hypothesis] here")]);
        assert!(matches!(marker, Err(RecordError::MarkerInValue { .. })));

        // brackets that are not markers are fine
        assert!(schema.record(&[("Premise", "he said [sic] so")]).is_ok());

        let unknown = schema.record(&[("Question", "q")]);
        assert!(matches!(unknown, Err(RecordError::UnknownKey { .. })));
    }

    #[test]
    fn view_renames_and_projects() {
        let view = cb().view(&["Premise".to_string()], Some(("Premise", "Text")));
        assert_eq!(view.keys, ["Text"]);
        assert_eq!(view.output_key, None);
        assert_eq!(view.label_vocab, None);
        assert_eq!(view.length_class_of("Text"), LengthClass::Long);

        let label_view = cb().view(&["Hypothesis".to_string(), "Tag".to_string()], None);
        assert_eq!(label_view.output_key.as_deref(), Some("Tag"));
        assert!(label_view.label_vocab.is_some());
    }

    #[test]
    fn schema_json() {
        let json = r#"{"task":"cb","keys":["Premise","Hypothesis","Tag"],"output_key":"Tag","label_vocab":["contradiction","entailment","neutral"],"length_class":{"Premise":"long"}}"#;
        let schema: TaskSchema = serde_json::from_str(json).unwrap();
        assert_eq!(schema, cb());
        assert_eq!(serde_json::to_string(&schema).unwrap(), json);
    }
}
