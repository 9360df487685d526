//! Reading and writing tagged sentences.
//!
//! Column files have one `token<TAB>tag` per line (extra middle columns are
//! ignored, the last column is the tag) and a blank line between sentences.
//! JSONL files hold `{"tokens": [...], "tags": [...]}` per line.

use std::io::{BufRead, Write};

use serde::Serialize;

use super::{normalize_bio, EntityMention, SeqLabelError, TaggedSentence};

pub fn read_conll(reader: impl BufRead) -> Result<Vec<TaggedSentence>, SeqLabelError> {
    let mut out = Vec::new();
    let mut tokens = Vec::new();
    let mut tags = Vec::new();
    let mut flush = |tokens: &mut Vec<String>, tags: &mut Vec<String>, line: usize| {
        if tokens.is_empty() {
            return Ok(());
        }
        let fixed = normalize_bio(tags);
        let sentence = TaggedSentence::new(std::mem::take(tokens), fixed).map_err(|e| SeqLabelError::Parse {
            line,
            message: e.to_string(),
        })?;
        tags.clear();
        out.push(sentence);
        Ok::<_, SeqLabelError>(())
    };
    let mut n = 0;
    for line in reader.lines() {
        n += 1;
        let line = line?;
        let line = line.trim_end();
        if line.is_empty() {
            flush(&mut tokens, &mut tags, n)?;
            continue;
        }
        if line.starts_with("-DOCSTART-") {
            continue;
        }
        let cols: Vec<&str> = line.split(['\t', ' ']).filter(|c| !c.is_empty()).collect();
        if cols.len() < 2 {
            return Err(SeqLabelError::Parse {
                line: n,
                message: "expected token and tag columns".into(),
            });
        }
        tokens.push(cols[0].to_string());
        tags.push(cols[cols.len() - 1].to_string());
    }
    flush(&mut tokens, &mut tags, n)?;
    Ok(out)
}

pub fn read_jsonl(reader: impl BufRead) -> Result<Vec<TaggedSentence>, SeqLabelError> {
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let sentence = serde_json::from_str(&line).map_err(|e| SeqLabelError::Parse {
            line: i + 1,
            message: e.to_string(),
        })?;
        out.push(sentence);
    }
    Ok(out)
}

/// Picks the reader by extension: `.jsonl`/`.json` is JSONL, anything else
/// is read as column format.
pub fn read_path(path: &std::path::Path) -> Result<Vec<TaggedSentence>, SeqLabelError> {
    let file = std::io::BufReader::new(std::fs::File::open(path)?);
    match path.extension().and_then(|e| e.to_str()) {
        Some("jsonl") | Some("json") => read_jsonl(file),
        _ => read_conll(file),
    }
}

#[derive(Serialize)]
struct AnnotationLine<'a> {
    sentence: String,
    tokens: &'a [String],
    tags: &'a [String],
    entities: &'a [EntityMention],
}

/// One JSON object per sentence with its text, tokens, tags and mentions.
pub fn write_annotations(
    mut writer: impl Write,
    annotations: &[TaggedSentence],
    mentions: &[Vec<EntityMention>],
) -> std::io::Result<()> {
    for (sentence, entities) in annotations.iter().zip(mentions) {
        let line = AnnotationLine {
            sentence: sentence.text(),
            tokens: sentence.tokens(),
            tags: sentence.tags(),
            entities,
        };
        serde_json::to_writer(&mut writer, &line)?;
        writer.write_all(b"\n")?;
    }
    Ok(())
}

pub fn write_conll(mut writer: impl Write, sentences: &[TaggedSentence]) -> std::io::Result<()> {
    for s in sentences {
        for (tok, tag) in s.tokens().iter().zip(s.tags()) {
            writeln!(writer, "{tok}\t{tag}")?;
        }
        writeln!(writer)?;
    }
    Ok(())
}
