use std::fs::File;
use std::io::{BufRead, BufReader};
use std::path::PathBuf;

use sha2::{Digest, Sha256};

use super::{CorpusError, DatasetSource};
use crate::record::{KeyValueRecord, TaskSchema};

/// Streaming reader over a source's JSONL records. Each item is validated
/// against the source schema and put in canonical key order. Blank lines are
/// skipped. The SHA-256 of the bytes read so far is available at any time.
pub struct Ingest {
    path: PathBuf,
    schema: TaskSchema,
    reader: BufReader<File>,
    line: usize,
    buf: Vec<u8>,
    hasher: Sha256,
    failed: bool,
}

pub fn ingest(source: &DatasetSource) -> Result<Ingest, CorpusError> {
    let file = File::open(&source.path).map_err(|e| CorpusError::io(&source.path, e))?;
    Ok(Ingest {
        path: source.path.clone(),
        schema: source.schema.clone(),
        reader: BufReader::new(file),
        line: 0,
        buf: Vec::new(),
        hasher: Sha256::new(),
        failed: false,
    })
}

impl Ingest {
    pub fn path(&self) -> &std::path::Path {
        &self.path
    }

    pub fn sha256(&self) -> String {
        hex::encode(self.hasher.clone().finalize())
    }

    fn parse(&self, text: &str) -> Result<KeyValueRecord, CorpusError> {
        let rec: KeyValueRecord = serde_json::from_str(text).map_err(|e| CorpusError::Parse {
            path: self.path.clone(),
            line: self.line,
            message: e.to_string(),
        })?;
        self.schema.canonicalize(&rec).map_err(|source| CorpusError::Schema {
            path: self.path.clone(),
            line: self.line,
            source,
        })
    }
}

impl Iterator for Ingest {
    type Item = Result<KeyValueRecord, CorpusError>;

    fn next(&mut self) -> Option<Self::Item> {
        if self.failed {
            return None;
        }
        loop {
            self.buf.clear();
            match self.reader.read_until(b'\n', &mut self.buf) {
                Ok(0) => return None,
                Ok(_) => {}
                Err(e) => {
                    self.failed = true;
                    return Some(Err(CorpusError::io(&self.path, e)));
                }
            }
            self.line += 1;
            self.hasher.update(&self.buf);
            let text = match std::str::from_utf8(&self.buf) {
                Ok(t) => t.trim(),
                Err(e) => {
                    self.failed = true;
                    return Some(Err(CorpusError::Parse {
                        path: self.path.clone(),
                        line: self.line,
                        message: e.to_string(),
                    }));
                }
            };
            if text.is_empty() {
                continue;
            }
            let item = self.parse(text);
            self.failed = item.is_err();
            return Some(item);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write;

    fn source(lines: &[&str]) -> (tempfile::NamedTempFile, DatasetSource) {
        let mut f = tempfile::NamedTempFile::new().unwrap();
        for l in lines {
            writeln!(f, "{l}").unwrap();
        }
        let src = DatasetSource {
            path: f.path().to_path_buf(),
            schema: TaskSchema::new("t", &["A", "B"], Some("B")),
            declared_size: lines.len(),
        };
        (f, src)
    }

    fn line(a: &str, b: &str) -> String {
        format!(
            r#"{{"task":"t","pairs":[{{"key":"B","value":"{b}","role":"output"}},{{"key":"A","value":"{a}","role":"input"}}]}}"#
        )
    }

    #[test]
    fn yields_records_in_order() {
        let lines = [line("x", "1"), line("y", "2"), line("z", "3")];
        let (_f, src) = source(&lines.iter().map(String::as_str).collect::<Vec<_>>());
        let recs: Vec<_> = ingest(&src).unwrap().map(Result::unwrap).collect();
        assert_eq!(recs.len(), 3);
        assert_eq!(recs[1].get("A"), Some("y"));
        assert_eq!(recs[0].keys().collect::<Vec<_>>(), vec!["A", "B"]);
    }

    #[test]
    fn error_at_duplicate_key_line() {
        let dup = r#"{"task":"t","pairs":[{"key":"A","value":"x","role":"input"},{"key":"A","value":"y","role":"input"}]}"#;
        let good = line("x", "1");
        let (_f, src) = source(&[&good, "", dup, &good]);
        let items: Vec<_> = ingest(&src).unwrap().collect();
        assert_eq!(items.len(), 2);
        assert!(items[0].is_ok());
        match &items[1] {
            Err(CorpusError::Parse { line, message, .. }) => {
                assert_eq!(*line, 3);
                assert!(message.contains("duplicate"), "{message}");
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn schema_violation_names_key() {
        let bad = r#"{"task":"t","pairs":[{"key":"C","value":"x","role":"input"}]}"#;
        let (_f, src) = source(&[bad]);
        let err = ingest(&src).unwrap().next().unwrap().unwrap_err();
        assert!(matches!(err, CorpusError::Schema { line: 1, .. }));
        assert!(err.to_string().contains("`C`"), "{err}");
    }
}
