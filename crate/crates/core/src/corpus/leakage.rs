use std::path::Path;

use aho_corasick::AhoCorasick;

use super::CorpusError;
use crate::record::{KeyValueRecord, Role};

/// Lowercase with whitespace runs collapsed to one space and ends trimmed.
pub fn normalize_text(text: &str) -> String {
    text.split_whitespace().collect::<Vec<_>>().join(" ").to_lowercase()
}

/// Drops records in which any normalized forbidden value occurs as a
/// substring of a normalized field value.
#[derive(Debug, Clone)]
pub struct LeakageFilter {
    matcher: Option<AhoCorasick>,
    patterns: usize,
}

impl PartialEq for LeakageFilter {
    fn eq(&self, other: &Self) -> bool {
        self.patterns == other.patterns && self.matcher.is_some() == other.matcher.is_some()
    }
}

impl LeakageFilter {
    pub fn disabled() -> Self {
        Self {
            matcher: None,
            patterns: 0,
        }
    }

    pub fn new<S: AsRef<str>>(forbidden: &[S]) -> Result<Self, CorpusError> {
        let mut patterns: Vec<String> = forbidden
            .iter()
            .map(|s| normalize_text(s.as_ref()))
            .filter(|s| !s.is_empty())
            .collect();
        patterns.sort();
        patterns.dedup();
        if patterns.is_empty() {
            return Err(CorpusError::Config("leakage filter enabled with no forbidden values".into()));
        }
        let matcher = AhoCorasick::new(&patterns).map_err(|e| CorpusError::Config(e.to_string()))?;
        Ok(Self {
            patterns: patterns.len(),
            matcher: Some(matcher),
        })
    }

    pub fn enabled(&self) -> bool {
        self.matcher.is_some()
    }

    pub fn pattern_count(&self) -> usize {
        self.patterns
    }

    pub fn is_leaked(&self, record: &KeyValueRecord) -> bool {
        let Some(m) = &self.matcher else { return false };
        record
            .pairs()
            .iter()
            .any(|p| m.is_match(&normalize_text(&p.value.text)))
    }
}

/// Input feature values of every record in a JSONL record file.
pub(crate) fn values_in_file(path: &Path) -> Result<Vec<String>, CorpusError> {
    let text = std::fs::read_to_string(path).map_err(|e| CorpusError::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
        let rec: KeyValueRecord = serde_json::from_str(line).map_err(|e| CorpusError::Parse {
            path: path.to_path_buf(),
            line: i + 1,
            message: e.to_string(),
        })?;
        out.extend(
            rec.pairs()
                .iter()
                .filter(|p| p.key.role == Role::Input)
                .map(|p| p.value.text.clone()),
        );
    }
    Ok(out)
}
