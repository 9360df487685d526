use std::collections::BTreeSet;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{PipelineError, SyntheticInstance};
use crate::backend::{Backend, LabelRequest};
use crate::record::{render_record, TaskSchema};

/// Trim, lowercase, collapse inner whitespace.
pub fn normalize_label(label: &str) -> String {
    label.split_whitespace().collect::<Vec<_>>().join(" ").to_lowercase()
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PlaceholderRewrite {
    pub query: String,
    /// The replaced entity. `None` when no entity occurs in the query.
    pub answer: Option<String>,
}

fn on_boundary(text: &str, start: usize, end: usize) -> bool {
    let before = text[..start].chars().next_back();
    let after = text[end..].chars().next();
    !before.is_some_and(char::is_alphanumeric) && !after.is_some_and(char::is_alphanumeric)
}

fn first_match(text: &str, needle: &str) -> Option<usize> {
    text.match_indices(needle)
        .map(|(i, _)| i)
        .find(|&i| on_boundary(text, i, i + needle.len()))
}

/// Replaces the longest entity (in characters) that occurs in `query` on word
/// boundaries by `placeholder`. Among equally long entities the one found
/// earliest in the query wins. Only the first occurrence is replaced.
pub fn record_placeholder_rewrite<S: AsRef<str>>(query: &str, entities: &[S], placeholder: &str) -> PlaceholderRewrite {
    let best = entities
        .iter()
        .map(|e| e.as_ref().trim())
        .filter(|e| !e.is_empty())
        .filter_map(|e| first_match(query, e).map(|at| (e, at)))
        .min_by_key(|(e, at)| (std::cmp::Reverse(e.chars().count()), *at));
    match best {
        Some((entity, at)) => PlaceholderRewrite {
            query: format!("{}{placeholder}{}", &query[..at], &query[at + entity.len()..]),
            answer: Some(entity.to_string()),
        },
        None => PlaceholderRewrite {
            query: query.to_string(),
            answer: None,
        },
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct FilterStats {
    pub checked: usize,
    pub kept: usize,
    pub filtered: usize,
}

/// Asks the classifier for the output of every instance, with the output
/// value masked, and flags instances whose generated output disagrees after
/// [`normalize_label`].
pub fn consistency_filter(
    instances: &mut [SyntheticInstance],
    schema: &TaskSchema,
    classifier: &dyn Backend,
    model_id: Option<&str>,
) -> Result<FilterStats, PipelineError> {
    let output = schema
        .output_key
        .as_deref()
        .ok_or_else(|| PipelineError::Config("consistency filter needs an output key".into()))?;
    let labels: Vec<String> = instances
        .par_iter()
        .map(|inst| {
            let record = schema.canonicalize(&inst.record)?;
            let at = record.position(output).expect("complete instance");
            let query = render_record(schema, &record, &BTreeSet::from([at]), &[])?;
            Ok(classifier.label(&LabelRequest {
                prompt: query.input_text,
                model_id: model_id.map(str::to_string),
            })?)
        })
        .collect::<Result<_, PipelineError>>()?;
    let mut stats = FilterStats::default();
    for (inst, label) in instances.iter_mut().zip(labels) {
        let generated = inst.record.get(output).unwrap_or_default();
        inst.filtered = normalize_label(&label) != normalize_label(generated);
        inst.classifier_label = Some(label);
        stats.checked += 1;
        if inst.filtered {
            stats.filtered += 1;
        } else {
            stats.kept += 1;
        }
    }
    Ok(stats)
}
