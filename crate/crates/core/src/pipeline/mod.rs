//! Feature-dependency generation pipelines. Each stage fills one or more
//! keys of a partial instance, conditioned on keys filled by earlier stages.

pub mod data;
mod filter;
mod run;

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::backend::{BackendError, FinetuneHyper, GenerationRole};
use crate::record::{RecordError, TaskSchema};

pub use filter::{
    consistency_filter, normalize_label, record_placeholder_rewrite, FilterStats, PlaceholderRewrite,
};
pub use run::{
    run_pipeline, run_stage, DropCounts, Partial, PipelineOutput, PromptLogEntry, Provenance, RunManifest, RunOptions,
    StageStats, SyntheticInstance,
};

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("invalid pipeline: {}", .0.iter().map(ToString::to_string).collect::<Vec<_>>().join("; "))]
    Invalid(Vec<ValidationError>),
    #[error("training data is empty")]
    EmptyTrainData,
    #[error("training record {index}: {source}")]
    TrainRecord { index: usize, source: RecordError },
    #[error("no complete instance after {attempted} attempts")]
    NoCompleteInstances { attempted: usize },
    #[error(transparent)]
    Record(#[from] RecordError),
    #[error(transparent)]
    Backend(#[from] BackendError),
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("config: {0}")]
    Config(String),
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ValidationError {
    #[error("schema: {0}")]
    Schema(String),
    #[error("stage {stage}: unknown key {key:?}")]
    UnknownKey { stage: String, key: String },
    #[error("stage {0}: no target key")]
    NoTarget(String),
    #[error("dependency cycle through stage {0}")]
    Cycle(String),
    #[error("stage {stage} reads {key:?}, which is produced by the later stage {producer}")]
    OutOfOrder {
        stage: String,
        key: String,
        producer: String,
    },
    #[error("key {0:?} is produced by no stage and is not a seed key")]
    Unproduced(String),
    #[error("key {key:?} is produced by both {first} and {second}")]
    DuplicateProducer {
        key: String,
        first: String,
        second: String,
    },
    #[error("stage {0} mixes the output key with input keys")]
    MixedRoles(String),
    #[error("stage {0}: key_template needs exactly one target key")]
    TemplateOnMultiTarget(String),
    #[error("duplicate stage name {0:?}")]
    DuplicateStage(String),
    #[error("consistency filter needs an output key")]
    FilterWithoutOutput,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StageMode {
    /// Base model with demonstrations, no fine-tuning.
    ZeroShot,
    /// A model fine-tuned on this stage's rendering of the training data.
    FineTune,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GenParams {
    pub max_tokens: u32,
    pub temperature: f64,
    pub num_samples: u32,
    /// Fixed base seed for this stage's requests. When unset the run seed is used.
    pub seed: Option<u64>,
}

impl Default for GenParams {
    fn default() -> Self {
        Self {
            max_tokens: 256,
            temperature: 1.0,
            num_samples: 1,
            seed: None,
        }
    }
}

/// Post-processing applied to a stage's output.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Rewrite {
    /// Replace the longest listed entity found in the generated query by a
    /// placeholder and record it as the answer. Training queries get the
    /// placeholder filled with their answer so the model learns full sentences.
    RecordPlaceholder {
        entities_key: String,
        answer_key: String,
        #[serde(default = "default_placeholder")]
        placeholder: String,
        #[serde(default = "default_separator")]
        separator: String,
    },
}

fn default_placeholder() -> String {
    "@placeholder".into()
}

fn default_separator() -> String {
    ";".into()
}

impl Rewrite {
    pub fn produces(&self) -> Option<&str> {
        match self {
            Rewrite::RecordPlaceholder { answer_key, .. } => Some(answer_key),
        }
    }

    fn reads(&self) -> Vec<&str> {
        match self {
            Rewrite::RecordPlaceholder { entities_key, .. } => vec![entities_key],
        }
    }
}

pub const DEFAULT_DEMO_COUNT: usize = 2;

#[derive(Debug, Clone, PartialEq, Deserialize)]
struct RawStage {
    name: String,
    #[serde(default)]
    target_key: Option<String>,
    #[serde(default)]
    target_keys: Vec<String>,
    #[serde(default)]
    depends_on: Vec<String>,
    mode: StageMode,
    #[serde(default)]
    demo_count: Option<usize>,
    #[serde(default)]
    key_template: Option<String>,
    #[serde(default)]
    gen_params: GenParams,
    #[serde(default)]
    rewrite: Option<Rewrite>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(from = "RawStage")]
pub struct StageSpec {
    pub name: String,
    pub target_keys: Vec<String>,
    pub depends_on: Vec<String>,
    pub mode: StageMode,
    /// Demonstrations in zero-shot prompts.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub demo_count: Option<usize>,
    /// Key name shown in the prompt in place of the target key.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub key_template: Option<String>,
    pub gen_params: GenParams,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub rewrite: Option<Rewrite>,
}

impl From<RawStage> for StageSpec {
    fn from(raw: RawStage) -> Self {
        let mut target_keys = raw.target_keys;
        if let Some(k) = raw.target_key {
            target_keys.insert(0, k);
        }
        StageSpec {
            name: raw.name,
            target_keys,
            depends_on: raw.depends_on,
            mode: raw.mode,
            demo_count: raw.demo_count,
            key_template: raw.key_template,
            gen_params: raw.gen_params,
            rewrite: raw.rewrite,
        }
    }
}

impl StageSpec {
    pub fn new(name: &str, targets: &[&str], depends_on: &[&str], mode: StageMode) -> Self {
        StageSpec {
            name: name.into(),
            target_keys: targets.iter().map(|s| s.to_string()).collect(),
            depends_on: depends_on.iter().map(|s| s.to_string()).collect(),
            mode,
            demo_count: None,
            key_template: None,
            gen_params: GenParams::default(),
            rewrite: None,
        }
    }

    /// Keys this stage writes, including rewrite outputs.
    pub fn produces(&self) -> Vec<&str> {
        let mut keys: Vec<&str> = self.target_keys.iter().map(String::as_str).collect();
        if let Some(k) = self.rewrite.as_ref().and_then(Rewrite::produces) {
            keys.push(k);
        }
        keys
    }

    pub fn role(&self, schema: &TaskSchema) -> GenerationRole {
        match &schema.output_key {
            Some(out) if self.target_keys.iter().any(|k| k == out) => GenerationRole::OutputGeneration,
            _ => GenerationRole::InputGeneration,
        }
    }

    /// Prompt grammar of the stage: its dependencies and targets in schema
    /// order, with the key template applied.
    pub fn view(&self, schema: &TaskSchema) -> TaskSchema {
        let mut keys = self.depends_on.clone();
        keys.extend(self.target_keys.iter().cloned());
        let rename = match (&self.key_template, self.target_keys.as_slice()) {
            (Some(t), [target]) => Some((target.as_str(), t.as_str())),
            _ => None,
        };
        schema.view(&keys, rename)
    }

    /// Name of `key` inside the stage view.
    pub fn view_name<'a>(&'a self, key: &'a str) -> &'a str {
        match (&self.key_template, self.target_keys.as_slice()) {
            (Some(t), [target]) if target == key => t,
            _ => key,
        }
    }

    pub fn effective_demo_count(&self, override_count: Option<usize>) -> usize {
        override_count.or(self.demo_count).unwrap_or(DEFAULT_DEMO_COUNT)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FilterPolicy {
    #[default]
    None,
    Consistency,
}

/// Structural checks on generated values.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ValueCheck {
    /// Exactly `count` spans delimited by `marker`, e.g. `*Toby*`.
    MarkedSpans {
        count: usize,
        #[serde(default = "default_marker")]
        marker: char,
    },
    /// Value contains this substring (case-insensitive), e.g. a WiC word.
    ContainsKey { key: String },
}

fn default_marker() -> char {
    '*'
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskPipeline {
    pub task: TaskSchema,
    /// Keys copied from a training record into each new instance.
    #[serde(default)]
    pub seed_keys: Vec<String>,
    pub stages: Vec<StageSpec>,
    #[serde(default)]
    pub filter: FilterPolicy,
    #[serde(default)]
    pub checks: BTreeMap<String, Vec<ValueCheck>>,
    #[serde(default)]
    pub finetune: FinetuneHyper,
    #[serde(default)]
    pub classifier: FinetuneHyper,
}

impl TaskPipeline {
    pub fn from_json(text: &str) -> Result<Self, PipelineError> {
        serde_json::from_str(text).map_err(|e| PipelineError::Config(e.to_string()))
    }

    pub fn validate(&self) -> Result<(), PipelineError> {
        let errors = validate_pipeline(self);
        if errors.is_empty() {
            Ok(())
        } else {
            Err(PipelineError::Invalid(errors))
        }
    }
}

/// Shipped configurations, one per FewGLUE task.
pub const SHIPPED: [(&str, &str); 8] = [
    ("boolq", include_str!("../../assets/pipelines/boolq.json")),
    ("cb", include_str!("../../assets/pipelines/cb.json")),
    ("copa", include_str!("../../assets/pipelines/copa.json")),
    ("multirc", include_str!("../../assets/pipelines/multirc.json")),
    ("record", include_str!("../../assets/pipelines/record.json")),
    ("rte", include_str!("../../assets/pipelines/rte.json")),
    ("wic", include_str!("../../assets/pipelines/wic.json")),
    ("wsc", include_str!("../../assets/pipelines/wsc.json")),
];

pub fn shipped(task: &str) -> Option<TaskPipeline> {
    SHIPPED
        .iter()
        .find(|(name, _)| *name == task)
        .map(|(_, text)| TaskPipeline::from_json(text).expect("shipped pipeline parses"))
}

/// Checks keys, producer coverage, acyclicity and stage ordering. Returns
/// every problem found.
pub fn validate_pipeline(p: &TaskPipeline) -> Vec<ValidationError> {
    let mut errors = Vec::new();
    if let Err(e) = p.task.validate() {
        errors.push(ValidationError::Schema(e.to_string()));
    }
    let known = |k: &str| p.task.contains_key(k);
    let mut names = BTreeSet::new();
    let mut producer: BTreeMap<&str, &str> = BTreeMap::new();
    for k in &p.seed_keys {
        if !known(k) {
            errors.push(ValidationError::UnknownKey {
                stage: "seed".into(),
                key: k.clone(),
            });
        } else if producer.insert(k, "seed").is_some() {
            errors.push(ValidationError::DuplicateProducer {
                key: k.clone(),
                first: "seed".into(),
                second: "seed".into(),
            });
        }
    }
    for s in &p.stages {
        if !names.insert(s.name.as_str()) {
            errors.push(ValidationError::DuplicateStage(s.name.clone()));
        }
        if s.target_keys.is_empty() {
            errors.push(ValidationError::NoTarget(s.name.clone()));
        }
        if s.key_template.is_some() && s.target_keys.len() != 1 {
            errors.push(ValidationError::TemplateOnMultiTarget(s.name.clone()));
        }
        if let Some(out) = &p.task.output_key {
            if s.target_keys.len() > 1 && s.target_keys.contains(out) {
                errors.push(ValidationError::MixedRoles(s.name.clone()));
            }
        }
        let mut referenced: Vec<&str> = s.depends_on.iter().map(String::as_str).collect();
        referenced.extend(s.produces());
        if let Some(r) = &s.rewrite {
            referenced.extend(r.reads());
        }
        for k in referenced {
            if !known(k) {
                errors.push(ValidationError::UnknownKey {
                    stage: s.name.clone(),
                    key: k.to_string(),
                });
            }
        }
        for k in s.produces() {
            if let Some(first) = producer.insert(k, &s.name) {
                errors.push(ValidationError::DuplicateProducer {
                    key: k.to_string(),
                    first: first.to_string(),
                    second: s.name.clone(),
                });
            }
        }
    }
    for k in &p.task.keys {
        if !producer.contains_key(k.as_str()) {
            errors.push(ValidationError::Unproduced(k.clone()));
        }
    }
    if p.filter == FilterPolicy::Consistency && p.task.output_key.is_none() {
        errors.push(ValidationError::FilterWithoutOutput);
    }
    for k in p.checks.keys() {
        if !known(k) {
            errors.push(ValidationError::UnknownKey {
                stage: "checks".into(),
                key: k.clone(),
            });
        }
    }

    // stage graph: edge s -> t when s reads a key t produces
    let index: BTreeMap<&str, usize> = p.stages.iter().enumerate().map(|(i, s)| (s.name.as_str(), i)).collect();
    let reads = |s: &StageSpec| {
        let mut r: Vec<String> = s.depends_on.clone();
        if let Some(rw) = &s.rewrite {
            r.extend(rw.reads().into_iter().map(String::from));
        }
        r
    };
    let deps: Vec<Vec<usize>> = p
        .stages
        .iter()
        .map(|s| {
            reads(s)
                .iter()
                .filter_map(|k| producer.get(k.as_str()))
                .filter_map(|who| index.get(who).copied())
                .collect()
        })
        .collect();
    if let Some(stage) = find_cycle(&deps) {
        errors.push(ValidationError::Cycle(p.stages[stage].name.clone()));
    } else {
        for (i, s) in p.stages.iter().enumerate() {
            for k in reads(s) {
                if let Some(&j) = producer.get(k.as_str()).and_then(|who| index.get(who)) {
                    if j >= i {
                        errors.push(ValidationError::OutOfOrder {
                            stage: s.name.clone(),
                            key: k.clone(),
                            producer: p.stages[j].name.clone(),
                        });
                    }
                }
            }
        }
    }
    errors
}

fn find_cycle(deps: &[Vec<usize>]) -> Option<usize> {
    // 0 = unvisited, 1 = on stack, 2 = done
    fn visit(v: usize, deps: &[Vec<usize>], state: &mut [u8]) -> Option<usize> {
        state[v] = 1;
        for &w in &deps[v] {
            match state[w] {
                1 => return Some(w),
                0 => {
                    if let Some(c) = visit(w, deps, state) {
                        return Some(c);
                    }
                }
                _ => {}
            }
        }
        state[v] = 2;
        None
    }
    let mut state = vec![0u8; deps.len()];
    (0..deps.len()).find_map(|v| if state[v] == 0 { visit(v, deps, &mut state) } else { None })
}
