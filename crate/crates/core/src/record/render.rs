//! The canonical text grammar shared by training pairs and backend prompts.
//!
//! ```text
//! input   := demo* main
//! demo    := "[Example]" (" " pair)+ " "
//! main    := ("[Task] " task " ")? pair (" " pair)*      -- header iff demos
//! pair    := "[" key "] " value                            -- value verbatim
//! target  := ("<MASK_i> " value " ")* "<END>"              -- i = 0, 1, ...
//! ```
//!
//! Masked values in the main record are replaced by `<MASK_i>`, numbered by
//! order of appearance. Demonstrations are never masked.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use super::{
    check_name, find_sentinel, sentinel, FieldKey, FieldValue, KeyValueRecord, Pair, RecordError,
    Role, TaskSchema, END_SENTINEL, EXAMPLE_MARKER, TASK_MARKER,
};

/// A rendered denoising example.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct RenderedPair {
    pub input_text: String,
    pub target_text: String,
    pub mask_count: usize,
    pub demo_count: usize,
    /// Set when the record alone does not fit the token budget.
    #[serde(default)]
    pub truncated: bool,
}

fn push_pairs(out: &mut Vec<String>, record: &KeyValueRecord, mask: &BTreeSet<usize>) {
    let mut next = 0;
    for (i, pair) in record.pairs().iter().enumerate() {
        out.push(format!("[{}]", pair.key.name));
        if mask.contains(&i) {
            out.push(sentinel(next));
            next += 1;
        } else {
            out.push(pair.value.text.clone());
        }
    }
}

/// Renders `record` with the values at `mask` (indices into the
/// schema-ordered record) replaced by sentinels, preceded by the fully
/// unmasked `demonstrations`.
pub fn render_record(
    schema: &TaskSchema,
    record: &KeyValueRecord,
    mask: &BTreeSet<usize>,
    demonstrations: &[KeyValueRecord],
) -> Result<RenderedPair, RecordError> {
    if record.masked_count() > 0 {
        return Err(RecordError::AlreadyMasked);
    }
    let record = schema.canonicalize(record)?;
    if let Some(&index) = mask.iter().find(|&&i| i >= record.len()) {
        return Err(RecordError::MaskOutOfRange {
            index,
            len: record.len(),
        });
    }

    let mut parts = Vec::new();
    for demo in demonstrations {
        if demo.task() != record.task() {
            return Err(RecordError::TaskMismatch {
                expected: record.task().to_string(),
                found: demo.task().to_string(),
            });
        }
        if demo.masked_count() > 0 {
            return Err(RecordError::MaskedDemonstration);
        }
        let demo = schema.canonicalize(demo)?;
        parts.push(format!("[{EXAMPLE_MARKER}]"));
        push_pairs(&mut parts, &demo, &BTreeSet::new());
    }
    if !demonstrations.is_empty() {
        parts.push(format!("[{TASK_MARKER}]"));
        parts.push(record.task().to_string());
    }
    push_pairs(&mut parts, &record, mask);

    let mut target = Vec::with_capacity(2 * mask.len() + 1);
    for (n, &i) in mask.iter().enumerate() {
        target.push(sentinel(n));
        target.push(record.pairs()[i].value.text.clone());
    }
    target.push(END_SENTINEL.to_string());

    Ok(RenderedPair {
        input_text: parts.join(" "),
        target_text: target.join(" "),
        mask_count: mask.len(),
        demo_count: demonstrations.len(),
        truncated: false,
    })
}

/// Result of parsing a rendered input.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParsedInput {
    /// Main record; masked slots have `masked = true` and empty text.
    pub record: KeyValueRecord,
    pub demonstrations: Vec<KeyValueRecord>,
}

impl ParsedInput {
    pub fn demo_count(&self) -> usize {
        self.demonstrations.len()
    }

    pub fn mask_count(&self) -> usize {
        self.record.masked_count()
    }

    /// Keys of the masked slots, in sentinel order.
    pub fn masked_keys(&self) -> Vec<&str> {
        self.record
            .pairs()
            .iter()
            .filter(|p| p.value.masked)
            .map(|p| p.key.name.as_str())
            .collect()
    }
}

#[derive(Debug, Clone, Copy)]
struct Marker<'a> {
    name: &'a str,
    start: usize,
    end: usize,
}

/// Finds `[name]` markers sitting on token boundaries (start of text or a
/// preceding space, then a space or end of text).
fn scan_markers<'a>(text: &'a str, is_marker: &dyn Fn(&str) -> bool) -> Vec<Marker<'a>> {
    let bytes = text.as_bytes();
    let mut markers = Vec::new();
    let mut pos = 0;
    while let Some(off) = text[pos..].find('[') {
        let start = pos + off;
        pos = start + 1;
        if start > 0 && bytes[start - 1] != b' ' {
            continue;
        }
        let Some(close) = text[start + 1..].find(']') else {
            break;
        };
        let name = &text[start + 1..start + 1 + close];
        let end = start + 1 + close + 1;
        if name.contains('[') || (end < text.len() && bytes[end] != b' ') {
            continue;
        }
        if is_marker(name) {
            markers.push(Marker { name, start, end });
            pos = end;
        }
    }
    markers
}

fn malformed(msg: impl Into<String>) -> RecordError {
    RecordError::Malformed(msg.into())
}

fn parse_with(
    text: &str,
    is_marker: &dyn Fn(&str) -> bool,
    role_of: &dyn Fn(&str) -> Role,
    default_task: &str,
) -> Result<ParsedInput, RecordError> {
    let markers = scan_markers(text, is_marker);
    let Some(first) = markers.first() else {
        return Err(malformed("no key markers"));
    };
    if first.start != 0 {
        return Err(malformed("text before the first key marker"));
    }

    let mut demos: Vec<Vec<Pair>> = Vec::new();
    let mut current: Vec<Pair> = Vec::new();
    let mut in_demo = false;
    let mut task: Option<String> = None;
    let mut next_mask = 0;

    for (i, m) in markers.iter().enumerate() {
        let last = i + 1 == markers.len();
        let gap = &text[m.end..markers.get(i + 1).map_or(text.len(), |n| n.start)];

        if m.name == EXAMPLE_MARKER {
            if task.is_some() {
                return Err(malformed("[Example] after [Task]"));
            }
            if in_demo {
                if current.is_empty() {
                    return Err(malformed("empty demonstration"));
                }
                demos.push(std::mem::take(&mut current));
            } else if !current.is_empty() {
                return Err(malformed("[Example] after record pairs"));
            }
            if last || gap != " " {
                return Err(malformed("[Example] must be followed by a key"));
            }
            in_demo = true;
            continue;
        }

        let value = if last {
            gap.strip_prefix(' ')
                .ok_or_else(|| malformed(format!("missing space after [{}]", m.name)))?
        } else {
            if gap.len() < 2 || !gap.starts_with(' ') || !gap.ends_with(' ') {
                return Err(malformed(format!("bad spacing after [{}]", m.name)));
            }
            &gap[1..gap.len() - 1]
        };

        if m.name == TASK_MARKER {
            if task.is_some() {
                return Err(malformed("repeated [Task] header"));
            }
            if in_demo {
                if current.is_empty() {
                    return Err(malformed("empty demonstration"));
                }
                demos.push(std::mem::take(&mut current));
                in_demo = false;
            } else if !current.is_empty() {
                return Err(malformed("[Task] after record pairs"));
            }
            check_name(value).map_err(|reason| RecordError::InvalidTaskName {
                name: value.to_string(),
                reason,
            })?;
            if last {
                return Err(malformed("[Task] header without a record"));
            }
            task = Some(value.to_string());
            continue;
        }

        if current.iter().any(|p| p.key.name == m.name) {
            return Err(RecordError::DuplicateKey(m.name.to_string()));
        }
        let key = FieldKey {
            name: m.name.to_string(),
            role: role_of(m.name),
        };
        let field = match find_sentinel(value, 0) {
            None => FieldValue::new(value),
            Some(_) if in_demo => return Err(malformed("sentinel inside a demonstration")),
            Some(hit) => {
                let whole = hit.start == 0 && hit.end == value.len();
                match hit.index {
                    Some(found) if whole => {
                        if found != next_mask {
                            return Err(RecordError::SentinelGap {
                                expected: next_mask,
                                found,
                            });
                        }
                        next_mask += 1;
                        FieldValue::masked()
                    }
                    _ => return Err(malformed(format!("stray sentinel in [{}]", m.name))),
                }
            }
        };
        current.push(Pair { key, value: field });
    }

    if in_demo {
        return Err(malformed("demonstrations without a [Task] section"));
    }
    if current.is_empty() {
        return Err(malformed("no record pairs"));
    }
    let task = task.unwrap_or_else(|| default_task.to_string());
    let record = KeyValueRecord::new(task.clone(), current)?;
    let demonstrations = demos
        .into_iter()
        .map(|pairs| KeyValueRecord::new(task.clone(), pairs))
        .collect::<Result<Vec<_>, _>>()?;
    Ok(ParsedInput {
        record,
        demonstrations,
    })
}

/// Inverse of [`render_record`] under the same schema.
pub fn parse_rendered(input_text: &str, schema: &TaskSchema) -> Result<ParsedInput, RecordError> {
    let is_marker = |name: &str| schema.marker_names().any(|m| m == name);
    let role_of = |name: &str| schema.role_of(name);
    let parsed = parse_with(input_text, &is_marker, &role_of, &schema.task)?;
    if parsed.record.task() != schema.task {
        return Err(RecordError::TaskMismatch {
            expected: schema.task.clone(),
            found: parsed.record.task().to_string(),
        });
    }
    Ok(parsed)
}

/// Schema-free parse: any well-formed `[name]` on a token boundary is taken
/// as a key. Values that themselves contain bracketed words split there.
/// All keys get the input role; records without a `[Task]` header are
/// attributed to the task `prompt`.
pub fn parse_prompt(input_text: &str) -> Result<ParsedInput, RecordError> {
    let is_marker = |name: &str| check_name(name).is_ok();
    parse_with(input_text, &is_marker, &|_| Role::Input, "prompt")
}

fn strip_one_space(s: &str) -> &str {
    let s = s.strip_prefix(' ').unwrap_or(s);
    s.strip_suffix(' ').unwrap_or(s)
}

/// Splits a completion into the values for `<MASK_0>` .. `<MASK_{expected-1}>`.
/// Text before the first sentinel and after `<END>` is ignored.
pub fn parse_completion(completion: &str, expected: usize) -> Result<Vec<String>, RecordError> {
    let mut values = Vec::with_capacity(expected);
    let mut open: Option<usize> = None;
    let mut pos = 0;
    loop {
        let hit = find_sentinel(completion, pos);
        if let Some(start) = open.take() {
            let stop = hit.map_or(completion.len(), |h| h.start);
            values.push(strip_one_space(&completion[start..stop]).to_string());
        }
        let Some(hit) = hit else { break };
        let Some(found) = hit.index else { break };
        let next = values.len();
        if found == next && next < expected {
            open = Some(hit.end);
        } else if found < next {
            return Err(RecordError::SentinelOrder {
                expected: next,
                found,
            });
        } else if next < expected {
            return Err(RecordError::MissingSentinel(next));
        } else {
            return Err(malformed(format!("unexpected sentinel <MASK_{found}>")));
        }
        pos = hit.end;
    }
    if values.len() < expected {
        return Err(RecordError::MissingSentinel(values.len()));
    }
    Ok(values)
}

/// Installs the completion's segments into the masked slots of `record`.
pub fn fill_masks(record: &KeyValueRecord, completion: &str) -> Result<KeyValueRecord, RecordError> {
    let values = parse_completion(completion, record.masked_count())?;
    let mut filled = record.clone();
    let mut values = values.into_iter();
    for pair in filled.pairs_mut() {
        if pair.value.masked {
            pair.value = FieldValue::new(values.next().unwrap_or_default());
        }
    }
    Ok(filled)
}

/// Applies a model completion back onto the record rendered in `rendered`.
pub fn substitute_targets(
    schema: &TaskSchema,
    rendered: &RenderedPair,
    completion: &str,
) -> Result<KeyValueRecord, RecordError> {
    let parsed = parse_rendered(&rendered.input_text, schema)?;
    if parsed.mask_count() != rendered.mask_count {
        return Err(malformed(format!(
            "input carries {} sentinels, pair declares {}",
            parsed.mask_count(),
            rendered.mask_count
        )));
    }
    fill_masks(&parsed.record, completion)
}
