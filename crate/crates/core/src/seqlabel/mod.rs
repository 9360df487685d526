//! Two-stage sequence-labeling augmentation. Stage 1 writes a sentence for
//! a list of entity labels, stage 2 tags a given sentence with
//! `Label surface; Label surface.` strings, which are mapped back onto the
//! tokens as BIO tags.

pub mod conll;
mod selftrain;

use std::collections::BTreeSet;
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::backend::BackendError;
use crate::record::{render_record, RecordError, RenderedPair, TaskSchema};

pub use selftrain::{
    iterate_selftrain, sentences_jsonl, GenerationStats, IterationState, RoundManifest, RoundOutput, SelfTrainConfig,
};

pub const TAGS_KEY: &str = "Output Tags";
pub const SENTENCE_KEY: &str = "Sentence";

#[derive(Debug, Error)]
pub enum SeqLabelError {
    #[error("no entity labels given")]
    EmptyLabels,
    #[error("unknown entity label {0:?}")]
    UnknownLabel(String),
    #[error("unknown tag type {0:?}")]
    UnknownTag(String),
    #[error("empty sentence")]
    EmptySentence,
    #[error("{tokens} tokens but {tags} tags")]
    LengthMismatch { tokens: usize, tags: usize },
    #[error("invalid BIO sequence at position {position}: {tag:?}")]
    InvalidBio { position: usize, tag: String },
    #[error("seed data is empty")]
    NoSeedData,
    #[error("seed data has no sentence with an entity")]
    NoEntityConditions,
    #[error("rounds must be at least 1")]
    InvalidRounds,
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error(transparent)]
    Record(#[from] RecordError),
    #[error(transparent)]
    Backend(#[from] BackendError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Entity label names and their tag abbreviations, e.g. Person and PER.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabelSet {
    pub entries: Vec<LabelEntry>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabelEntry {
    pub name: String,
    pub tag: String,
}

impl LabelSet {
    pub fn new(entries: &[(&str, &str)]) -> Self {
        Self {
            entries: entries
                .iter()
                .map(|(name, tag)| LabelEntry {
                    name: name.to_string(),
                    tag: tag.to_string(),
                })
                .collect(),
        }
    }

    /// CoNLL'03 entity types.
    pub fn conll() -> Self {
        Self::new(&[
            ("Person", "PER"),
            ("Organization", "ORG"),
            ("Location", "LOC"),
            ("Miscellaneous", "MISC"),
        ])
    }

    pub fn tag_of(&self, name: &str) -> Option<&str> {
        self.entries.iter().find(|e| e.name == name).map(|e| e.tag.as_str())
    }

    pub fn name_of(&self, tag: &str) -> Option<&str> {
        self.entries.iter().find(|e| e.tag == tag).map(|e| e.name.as_str())
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|e| e.name.as_str())
    }
}

impl Default for LabelSet {
    fn default() -> Self {
        Self::conll()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct EntityMention {
    pub label: String,
    pub surface: String,
}

impl EntityMention {
    pub fn new(label: impl Into<String>, surface: impl Into<String>) -> Self {
        Self {
            label: label.into(),
            surface: surface.into(),
        }
    }
}

impl fmt::Display for EntityMention {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} {}", self.label, self.surface)
    }
}

/// Tokens with one BIO tag each.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "RawTagged")]
pub struct TaggedSentence {
    tokens: Vec<String>,
    tags: Vec<String>,
}

#[derive(Deserialize)]
struct RawTagged {
    tokens: Vec<String>,
    tags: Vec<String>,
}

impl TryFrom<RawTagged> for TaggedSentence {
    type Error = SeqLabelError;

    fn try_from(raw: RawTagged) -> Result<Self, Self::Error> {
        TaggedSentence::new(raw.tokens, raw.tags)
    }
}

/// Checks the BIO grammar: `O`, `B-X`, or `I-X` directly after `B-X`/`I-X`.
pub fn check_bio(tags: &[String]) -> Result<(), SeqLabelError> {
    let mut open: Option<&str> = None;
    for (position, tag) in tags.iter().enumerate() {
        let bad = || SeqLabelError::InvalidBio {
            position,
            tag: tag.clone(),
        };
        open = match tag.split_once('-') {
            None if tag == "O" => None,
            Some(("B", t)) if !t.is_empty() => Some(t),
            Some(("I", t)) if open == Some(t) => Some(t),
            _ => return Err(bad()),
        };
    }
    Ok(())
}

/// Rewrites IOB1-style tags (an `I-X` opening a span) into BIO.
pub fn normalize_bio(tags: &[String]) -> Vec<String> {
    let mut out: Vec<String> = Vec::with_capacity(tags.len());
    let mut prev: Option<&str> = None;
    for tag in tags {
        let fixed = match tag.split_once('-') {
            Some(("I", t)) if prev != Some(t) => format!("B-{t}"),
            _ => tag.clone(),
        };
        prev = match tag.split_once('-') {
            Some((_, t)) => Some(t),
            None => None,
        };
        out.push(fixed);
    }
    out
}

impl TaggedSentence {
    pub fn new(tokens: Vec<String>, tags: Vec<String>) -> Result<Self, SeqLabelError> {
        if tokens.len() != tags.len() {
            return Err(SeqLabelError::LengthMismatch {
                tokens: tokens.len(),
                tags: tags.len(),
            });
        }
        if tokens.is_empty() {
            return Err(SeqLabelError::EmptySentence);
        }
        check_bio(&tags)?;
        Ok(Self { tokens, tags })
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn tags(&self) -> &[String] {
        &self.tags
    }

    pub fn text(&self) -> String {
        self.tokens.join(" ")
    }

    /// Entity spans as `(start, end, tag type)`, end exclusive.
    pub fn spans(&self) -> Vec<(usize, usize, &str)> {
        let mut spans = Vec::new();
        for (i, tag) in self.tags.iter().enumerate() {
            match tag.split_once('-') {
                Some(("B", t)) => spans.push((i, i + 1, t)),
                Some(("I", _)) => {
                    if let Some(last) = spans.last_mut() {
                        last.1 = i + 1;
                    }
                }
                _ => {}
            }
        }
        spans
    }

    /// Mentions in sentence order, with label names from `labels`.
    pub fn mentions(&self, labels: &LabelSet) -> Result<Vec<EntityMention>, SeqLabelError> {
        self.spans()
            .into_iter()
            .map(|(s, e, t)| {
                let name = labels
                    .name_of(t)
                    .ok_or_else(|| SeqLabelError::UnknownTag(t.to_string()))?;
                Ok(EntityMention::new(name, self.tokens[s..e].join(" ")))
            })
            .collect()
    }
}

pub fn stage_schema(task: &str) -> TaskSchema {
    TaskSchema::new(task, &[TAGS_KEY, SENTENCE_KEY], Some(TAGS_KEY))
}

/// Sentence generation prompt/pair for the given entity labels.
pub fn stage1_pair(task: &str, labels: &[String], sentence: &str, known: &LabelSet) -> Result<RenderedPair, SeqLabelError> {
    if labels.is_empty() {
        return Err(SeqLabelError::EmptyLabels);
    }
    if let Some(bad) = labels.iter().find(|l| known.tag_of(l).is_none()) {
        return Err(SeqLabelError::UnknownLabel(bad.clone()));
    }
    let schema = stage_schema(task);
    let record = schema.record(&[(TAGS_KEY, &labels.join(" and ")), (SENTENCE_KEY, sentence)])?;
    Ok(render_record(&schema, &record, &BTreeSet::from([1]), &[])?)
}

/// Entity labeling prompt/pair for `sentence` with the given tag string.
pub fn stage2_pair(task: &str, sentence: &str, tags: &str) -> Result<RenderedPair, SeqLabelError> {
    if sentence.trim().is_empty() {
        return Err(SeqLabelError::EmptySentence);
    }
    let schema = stage_schema(task);
    let record = schema.record(&[(TAGS_KEY, tags), (SENTENCE_KEY, sentence)])?;
    Ok(render_record(&schema, &record, &BTreeSet::from([0]), &[])?)
}

/// `[Output Tags] <labels joined by " and "> [Sentence] <MASK_0>`
pub fn render_stage1(labels: &[String], known: &LabelSet) -> Result<String, SeqLabelError> {
    Ok(stage1_pair("ner", labels, "", known)?.input_text)
}

/// `[Output Tags] <MASK_0> [Sentence] <sentence>`
pub fn render_stage2(sentence: &str) -> Result<String, SeqLabelError> {
    Ok(stage2_pair("ner", sentence, "")?.input_text)
}

/// `Label surface; Label surface.`, or the empty string for no mentions.
pub fn format_mentions(mentions: &[EntityMention]) -> String {
    if mentions.is_empty() {
        return String::new();
    }
    let mut out = mentions.iter().map(ToString::to_string).collect::<Vec<_>>().join("; ");
    out.push('.');
    out
}

/// Parsed mentions plus the number of segments without a known label.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct ParsedMentions {
    pub mentions: Vec<EntityMention>,
    pub skipped: usize,
}

pub fn parse_entity_output(target: &str, labels: &LabelSet) -> ParsedMentions {
    let text = target.trim();
    let text = text.strip_suffix('.').unwrap_or(text);
    let mut parsed = ParsedMentions::default();
    for segment in text.split(';').map(str::trim).filter(|s| !s.is_empty()) {
        let label = labels
            .names()
            .filter(|name| {
                segment
                    .strip_prefix(name)
                    .is_some_and(|rest| rest.starts_with(' ') && !rest.trim().is_empty())
            })
            .max_by_key(|name| name.len());
        match label {
            Some(name) => parsed.mentions.push(EntityMention::new(name, segment[name.len()..].trim())),
            None => {
                log::debug!("no known label in segment {segment:?}");
                parsed.skipped += 1;
            }
        }
    }
    parsed
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Alignment {
    pub sentence: TaggedSentence,
    pub dropped: usize,
}

/// Places each mention, in order, on its leftmost whole-token occurrence
/// that does not overlap an earlier placement. Mentions with no such
/// occurrence or an unknown label are dropped.
pub fn align_entities(
    tokens: &[String],
    mentions: &[EntityMention],
    labels: &LabelSet,
) -> Result<Alignment, SeqLabelError> {
    if tokens.is_empty() {
        return Err(SeqLabelError::EmptySentence);
    }
    let mut tags = vec!["O".to_string(); tokens.len()];
    let mut dropped = 0;
    for m in mentions {
        let needle: Vec<&str> = m.surface.split_whitespace().collect();
        let Some(tag) = labels.tag_of(&m.label).filter(|_| !needle.is_empty()) else {
            dropped += 1;
            continue;
        };
        let n = needle.len();
        let free = |i: usize| tags[i..i + n].iter().all(|t| t == "O");
        let hit = (0..tokens.len().saturating_sub(n - 1))
            .find(|&i| tokens[i..i + n].iter().zip(&needle).all(|(a, b)| a == b) && free(i));
        match hit {
            Some(i) => {
                tags[i] = format!("B-{tag}");
                for t in &mut tags[i + 1..i + n] {
                    *t = format!("I-{tag}");
                }
            }
            None => dropped += 1,
        }
    }
    Ok(Alignment {
        sentence: TaggedSentence::new(tokens.to_vec(), tags)?,
        dropped,
    })
}

pub fn tokenize(sentence: &str) -> Vec<String> {
    sentence.split_whitespace().map(str::to_string).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    const BOSE: &str =
        "All Fishermen 's Association secretary N.J. Bose said the strike would continue indefinitely.";

    fn s(v: &[&str]) -> Vec<String> {
        v.iter().map(|x| x.to_string()).collect()
    }

    #[test]
    fn stage_prompts() {
        let l = LabelSet::conll();
        assert_eq!(
            render_stage1(&s(&["Organization", "Person"]), &l).unwrap(),
            "[Output Tags] Organization and Person [Sentence] <MASK_0>"
        );
        assert_eq!(
            render_stage1(&s(&["Person"]), &l).unwrap(),
            "[Output Tags] Person [Sentence] <MASK_0>"
        );
        assert!(matches!(render_stage1(&[], &l), Err(SeqLabelError::EmptyLabels)));
        assert!(matches!(
            render_stage1(&s(&["Animal"]), &l),
            Err(SeqLabelError::UnknownLabel(_))
        ));

        assert_eq!(
            render_stage2(BOSE).unwrap(),
            format!("[Output Tags] <MASK_0> [Sentence] {BOSE}")
        );
        assert_eq!(
            render_stage2("Rome is old").unwrap(),
            "[Output Tags] <MASK_0> [Sentence] Rome is old"
        );
        assert_eq!(render_stage2("x").unwrap(), "[Output Tags] <MASK_0> [Sentence] x");
        assert!(render_stage2("").is_err());
        assert!(render_stage2("a <MASK_0> b").is_err());
    }

    #[test]
    fn stage_pairs_match_training_format() {
        let l = LabelSet::conll();
        let p1 = stage1_pair("conll03", &s(&["Organization", "Person"]), BOSE, &l).unwrap();
        assert_eq!(p1.target_text, format!("<MASK_0> {BOSE} <END>"));
        let p2 = stage2_pair(
            "conll03",
            BOSE,
            "Organization All Fishermen 's Association; Person N.J. Bose.",
        )
        .unwrap();
        assert_eq!(
            p2.target_text,
            "<MASK_0> Organization All Fishermen 's Association; Person N.J. Bose. <END>"
        );
    }

    #[test]
    fn parse_entity_output_examples() {
        let l = LabelSet::conll();
        let p = parse_entity_output("Organization All Fishermen 's Association; Person N.J. Bose.", &l);
        assert_eq!(
            p.mentions,
            vec![
                EntityMention::new("Organization", "All Fishermen 's Association"),
                EntityMention::new("Person", "N.J. Bose")
            ]
        );
        assert_eq!(p.skipped, 0);
        assert_eq!(parse_entity_output("", &l), ParsedMentions::default());
        let p = parse_entity_output("Person John; Person John", &l);
        assert_eq!(p.mentions, vec![EntityMention::new("Person", "John"); 2]);
        let p = parse_entity_output("Animal Rex; Person Ann; Person", &l);
        assert_eq!(p.mentions, vec![EntityMention::new("Person", "Ann")]);
        assert_eq!(p.skipped, 2);
    }

    #[test]
    fn longest_label_prefix_wins() {
        let l = LabelSet::new(&[("Org", "O1"), ("Org Unit", "OU")]);
        let p = parse_entity_output("Org Unit Sales Team.", &l);
        assert_eq!(p.mentions, vec![EntityMention::new("Org Unit", "Sales Team")]);
    }

    #[test]
    fn align_golden() {
        let l = LabelSet::conll();
        let mentions = parse_entity_output("Organization All Fishermen 's Association; Person N.J. Bose.", &l).mentions;
        let a = align_entities(&tokenize(BOSE), &mentions, &l).unwrap();
        assert_eq!(
            a.sentence.tags().join(" "),
            "B-ORG I-ORG I-ORG I-ORG O B-PER I-PER O O O O O O"
        );
        assert_eq!(a.dropped, 0);
    }

    #[test]
    fn align_edge_cases() {
        let l = LabelSet::conll();
        let toks = tokenize("John met John Smith");
        let none = align_entities(&toks, &[], &l).unwrap();
        assert!(none.sentence.tags().iter().all(|t| t == "O"));
        let miss = align_entities(&toks, &[EntityMention::new("Person", "Mary")], &l).unwrap();
        assert!(miss.sentence.tags().iter().all(|t| t == "O"));
        assert_eq!(miss.dropped, 1);

        // first occurrence wins, the repeat takes the next free one
        let twice = vec![EntityMention::new("Person", "John"); 2];
        let a = align_entities(&toks, &twice, &l).unwrap();
        assert_eq!(a.sentence.tags(), &s(&["B-PER", "O", "B-PER", "O"])[..]);

        // overlapping mention dropped
        let ov = vec![
            EntityMention::new("Person", "John Smith"),
            EntityMention::new("Location", "Smith"),
        ];
        let a = align_entities(&toks, &ov, &l).unwrap();
        assert_eq!(a.sentence.tags(), &s(&["O", "O", "B-PER", "I-PER"])[..]);
        assert_eq!(a.dropped, 1);

        // token boundary only
        let a = align_entities(&tokenize("Johnson left"), &[EntityMention::new("Person", "John")], &l).unwrap();
        assert_eq!(a.dropped, 1);
        assert!(align_entities(&[], &[], &l).is_err());
    }

    #[test]
    fn bio_checks() {
        assert!(check_bio(&s(&["O", "B-PER", "I-PER", "B-LOC"])).is_ok());
        assert!(check_bio(&s(&["I-PER"])).is_err());
        assert!(check_bio(&s(&["B-PER", "I-LOC"])).is_err());
        assert!(check_bio(&s(&["X"])).is_err());
        assert_eq!(
            normalize_bio(&s(&["I-PER", "I-PER", "O", "I-LOC", "B-LOC", "I-LOC"])),
            s(&["B-PER", "I-PER", "O", "B-LOC", "B-LOC", "I-LOC"])
        );
        let t = TaggedSentence::new(s(&["A", "B", "c"]), s(&["B-ORG", "I-ORG", "O"])).unwrap();
        assert_eq!(
            t.mentions(&LabelSet::conll()).unwrap(),
            vec![EntityMention::new("Organization", "A B")]
        );
        assert!(TaggedSentence::new(s(&["a"]), vec![]).is_err());
    }

    fn label_name() -> impl Strategy<Value = String> {
        prop::sample::select(vec!["Person", "Organization", "Location", "Miscellaneous"]).prop_map(String::from)
    }

    proptest! {
        #[test]
        fn format_parse_identity(
            mentions in prop::collection::vec(
                (label_name(), "[A-Za-z.'][A-Za-z.']{0,6}( [A-Za-z.']{1,6}){0,2}"),
                0..5,
            )
        ) {
            let mentions: Vec<EntityMention> =
                mentions.into_iter().map(|(l, s)| EntityMention::new(l, s)).collect();
            let parsed = parse_entity_output(&format_mentions(&mentions), &LabelSet::conll());
            prop_assert_eq!(parsed.mentions, mentions);
            prop_assert_eq!(parsed.skipped, 0);
        }

        #[test]
        fn alignment_is_valid_bio_and_reproduces_surfaces(
            tokens in prop::collection::vec("[a-c]{1,2}", 1..12),
            picks in prop::collection::vec((label_name(), 0usize..12, 1usize..4), 0..5),
        ) {
            let labels = LabelSet::conll();
            let mentions: Vec<EntityMention> = picks
                .into_iter()
                .map(|(l, start, len)| {
                    let start = start % tokens.len();
                    let end = (start + len).min(tokens.len());
                    EntityMention::new(l, tokens[start..end].join(" "))
                })
                .collect();
            let a = align_entities(&tokens, &mentions, &labels).unwrap();
            prop_assert!(check_bio(a.sentence.tags()).is_ok());
            let found = a.sentence.mentions(&labels).unwrap();
            prop_assert_eq!(found.len() + a.dropped, mentions.len());
            for m in &found {
                prop_assert!(mentions.contains(m));
            }
        }
    }
}
