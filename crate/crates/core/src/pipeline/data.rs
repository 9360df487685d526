//! Loading task training data from JSON Lines.

use std::collections::BTreeMap;
use std::path::Path;

use serde_json::Value;

use super::PipelineError;
use crate::record::{KeyValueRecord, TaskSchema};

/// Parses one line: either a record line `{"task", "pairs": [...]}` or a flat
/// object mapping schema keys to strings. Every schema key must be present.
pub fn parse_train_line(line: &str, schema: &TaskSchema) -> Result<KeyValueRecord, String> {
    let rec = parse_any(line, schema)?;
    if let Some(missing) = schema.keys.iter().find(|k| rec.get(k).is_none()) {
        return Err(format!("missing key {missing:?}"));
    }
    Ok(rec)
}

fn parse_any(line: &str, schema: &TaskSchema) -> Result<KeyValueRecord, String> {
    let value: Value = serde_json::from_str(line).map_err(|e| e.to_string())?;
    let obj = value.as_object().ok_or("expected a JSON object")?;
    if obj.contains_key("pairs") {
        let rec: KeyValueRecord = serde_json::from_value(value).map_err(|e| e.to_string())?;
        if rec.task() != schema.task {
            return Err(format!("record of task {:?}, expected {:?}", rec.task(), schema.task));
        }
        let raw: Vec<(&str, &str)> = rec
            .pairs()
            .iter()
            .map(|p| (p.key.name.as_str(), p.value.text.as_str()))
            .collect();
        return schema.record(&raw).map_err(|e| e.to_string());
    }
    let mut raw = BTreeMap::new();
    for (k, v) in obj {
        if !schema.contains_key(k) {
            return Err(format!("unknown key {k:?}"));
        }
        let text = v.as_str().ok_or_else(|| format!("value of {k:?} is not a string"))?;
        raw.insert(k.as_str(), text);
    }
    let pairs: Vec<(&str, &str)> = raw.into_iter().collect();
    schema.record(&pairs).map_err(|e| e.to_string())
}

pub fn parse_train_data(text: &str, schema: &TaskSchema) -> Result<Vec<KeyValueRecord>, PipelineError> {
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            parse_train_line(l, schema).map_err(|message| PipelineError::Parse { line: i + 1, message })
        })
        .collect()
}

pub fn read_train_data(path: &Path, schema: &TaskSchema) -> Result<Vec<KeyValueRecord>, PipelineError> {
    parse_train_data(&std::fs::read_to_string(path)?, schema)
}
