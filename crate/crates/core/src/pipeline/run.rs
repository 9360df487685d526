use std::collections::{BTreeMap, BTreeSet};

use rand::seq::index::sample;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::filter::{consistency_filter, normalize_label, record_placeholder_rewrite, FilterStats};
use super::{FilterPolicy, PipelineError, Rewrite, StageMode, StageSpec, TaskPipeline, ValueCheck};
use crate::backend::{Backend, FinetuneExample, GenerateRequest, GenerationRole, ModelHandle};
use crate::record::{
    parse_completion, render_record, FieldKey, KeyValueRecord, Pair, RecordError, Role, TaskSchema,
};
use crate::seed::{derive_rng, derive_seed};

const SEED_STREAM: u64 = 1;
const DEMO_STREAM: u64 = 2;
const REQUEST_STREAM: u64 = 3;

pub const DEFAULT_ATTEMPT_FACTOR: usize = 8;

#[derive(Debug, Clone, PartialEq)]
pub struct RunOptions {
    pub n_target: usize,
    pub seed: u64,
    /// Overrides the demonstration count of every zero-shot stage.
    pub demo_count: Option<usize>,
    pub jobs: usize,
    pub log_prompts: bool,
    /// Partial instances started are capped at `n_target * attempt_factor`.
    pub attempt_factor: usize,
}

impl Default for RunOptions {
    fn default() -> Self {
        Self {
            n_target: 100,
            seed: 0,
            demo_count: None,
            jobs: 1,
            log_prompts: false,
            attempt_factor: DEFAULT_ATTEMPT_FACTOR,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Provenance {
    pub stage: String,
    pub backend: String,
    pub seed: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub model_id: Option<String>,
}

/// An instance under construction.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Partial {
    pub values: BTreeMap<String, String>,
    pub provenance: BTreeMap<String, Provenance>,
    /// Seed path: the instance index, plus the sample index at every branching stage.
    pub path: Vec<u64>,
}

impl Partial {
    pub fn new(index: u64) -> Self {
        Self {
            values: BTreeMap::new(),
            provenance: BTreeMap::new(),
            path: vec![index],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SyntheticInstance {
    pub record: KeyValueRecord,
    pub provenance: BTreeMap<String, Provenance>,
    pub filtered: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub classifier_label: Option<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct DropCounts {
    /// Completion does not follow the target grammar.
    pub grammar: usize,
    pub empty: usize,
    /// Output label outside the vocabulary.
    pub label: usize,
    /// A value check failed.
    pub check: usize,
    /// The rewrite found nothing to rewrite.
    pub rewrite: usize,
}

impl DropCounts {
    pub fn total(&self) -> usize {
        self.grammar + self.empty + self.label + self.check + self.rewrite
    }

    fn add(&mut self, other: &DropCounts) {
        self.grammar += other.grammar;
        self.empty += other.empty;
        self.label += other.label;
        self.check += other.check;
        self.rewrite += other.rewrite;
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageStats {
    pub name: String,
    pub mode: StageMode,
    pub role: GenerationRole,
    pub demo_count: usize,
    pub seed: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub model_id: Option<String>,
    pub requests: usize,
    pub completions: usize,
    pub accepted: usize,
    pub dropped: DropCounts,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptLogEntry {
    pub stage: String,
    pub path: Vec<u64>,
    pub role: GenerationRole,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub model_id: Option<String>,
    pub prompt: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub tool_version: String,
    pub task: String,
    pub pipeline: TaskPipeline,
    pub pipeline_sha256: String,
    pub train_records: usize,
    pub train_sha256: String,
    pub seed: u64,
    pub backend: String,
    pub n_target: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub demo_count: Option<usize>,
    pub attempt_factor: usize,
    pub attempted: usize,
    pub rounds: usize,
    pub complete: usize,
    pub shortfall: usize,
    pub stages: Vec<StageStats>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub filter: Option<FilterStats>,
    pub instances_sha256: String,
}

impl RunManifest {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = serde_json::to_vec_pretty(self).expect("manifest serializes");
        out.push(b'\n');
        out
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PipelineOutput {
    pub instances: Vec<SyntheticInstance>,
    pub manifest: RunManifest,
    pub prompt_log: Vec<PromptLogEntry>,
}

pub(crate) fn jsonl<T: Serialize>(items: &[T]) -> Vec<u8> {
    let mut out = Vec::new();
    for item in items {
        serde_json::to_writer(&mut out, item).expect("serializable");
        out.push(b'\n');
    }
    out
}

pub(crate) fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

impl PipelineOutput {
    pub fn instances_jsonl(&self) -> Vec<u8> {
        jsonl(&self.instances)
    }

    pub fn prompt_log_jsonl(&self) -> Vec<u8> {
        jsonl(&self.prompt_log)
    }

    /// Instances not flagged by the filter.
    pub fn kept(&self) -> impl Iterator<Item = &SyntheticInstance> {
        self.instances.iter().filter(|i| !i.filtered)
    }
}

/// Builds a record over `view` from named values. Keys absent from `values`
/// are about to be masked and get a schema-valid placeholder.
fn view_record(view: &TaskSchema, values: &BTreeMap<&str, &str>) -> Result<KeyValueRecord, RecordError> {
    let blank = |k: &str| match (&view.label_vocab, view.role_of(k)) {
        (Some(vocab), Role::Output) => vocab.first().map_or("", String::as_str),
        _ => "",
    };
    let pairs = view
        .keys
        .iter()
        .map(|k| {
            let key = match view.role_of(k) {
                Role::Output => FieldKey::output(k.clone()),
                Role::Input => FieldKey::input(k.clone()),
            };
            Pair::new(key, values.get(k.as_str()).copied().unwrap_or_else(|| blank(k)))
        })
        .collect();
    KeyValueRecord::new(view.task.clone(), pairs)
}

struct StageCtx<'a> {
    pipeline: &'a TaskPipeline,
    stage: &'a StageSpec,
    index: usize,
    view: TaskSchema,
    train: &'a [KeyValueRecord],
    backend: &'a dyn Backend,
    model_id: Option<ModelHandle>,
    demo_count: usize,
    seed: u64,
    run_seed: u64,
    log_prompts: bool,
}

impl StageCtx<'_> {
    fn new<'a>(
        pipeline: &'a TaskPipeline,
        index: usize,
        train: &'a [KeyValueRecord],
        backend: &'a dyn Backend,
        model_id: Option<ModelHandle>,
        opts: &RunOptions,
    ) -> StageCtx<'a> {
        let stage = &pipeline.stages[index];
        let demo_count = match stage.mode {
            StageMode::ZeroShot => stage.effective_demo_count(opts.demo_count),
            StageMode::FineTune => stage.demo_count.unwrap_or(0),
        };
        StageCtx {
            pipeline,
            stage,
            index,
            view: stage.view(&pipeline.task),
            train,
            backend,
            model_id,
            demo_count,
            seed: stage.gen_params.seed.unwrap_or(opts.seed),
            run_seed: opts.seed,
            log_prompts: opts.log_prompts,
        }
    }

    fn stats(&self) -> StageStats {
        StageStats {
            name: self.stage.name.clone(),
            mode: self.stage.mode,
            role: self.stage.role(&self.pipeline.task),
            demo_count: self.demo_count,
            seed: self.seed,
            model_id: self.model_id.clone(),
            requests: 0,
            completions: 0,
            accepted: 0,
            dropped: DropCounts::default(),
        }
    }

    fn mask(&self) -> BTreeSet<usize> {
        self.stage.target_keys.iter().map(|k| self.view_position(k)).collect()
    }

    fn view_position(&self, key: &str) -> usize {
        let name = self.stage.view_name(key);
        self.view.keys.iter().position(|v| v == name).expect("target in view")
    }

    /// Target keys in sentinel order.
    fn ordered_targets(&self) -> Vec<&String> {
        let mut targets: Vec<&String> = self.stage.target_keys.iter().collect();
        targets.sort_by_key(|k| self.view_position(k));
        targets
    }

    /// A full training record projected onto the stage view.
    fn train_view(&self, rec: &KeyValueRecord) -> Result<KeyValueRecord, RecordError> {
        let mut values: BTreeMap<&str, String> = BTreeMap::new();
        for k in self.stage.depends_on.iter().chain(&self.stage.target_keys) {
            values.insert(self.stage.view_name(k), rec.get(k).unwrap_or_default().to_string());
        }
        if let Some(Rewrite::RecordPlaceholder {
            answer_key,
            placeholder,
            ..
        }) = &self.stage.rewrite
        {
            let answer = rec.get(answer_key).unwrap_or_default();
            for k in &self.stage.target_keys {
                let name = self.stage.view_name(k);
                if let Some(v) = values.get_mut(name) {
                    *v = v.replace(placeholder.as_str(), answer);
                }
            }
        }
        let borrowed = values.iter().map(|(k, v)| (*k, v.as_str())).collect();
        view_record(&self.view, &borrowed)
    }

    fn finetune_examples(&self) -> Result<Vec<FinetuneExample>, PipelineError> {
        let mask = self.mask();
        self.train
            .iter()
            .map(|rec| {
                let pair = render_record(&self.view, &self.train_view(rec)?, &mask, &[])?;
                Ok(FinetuneExample {
                    input: pair.input_text,
                    target: pair.target_text,
                })
            })
            .collect()
    }

    fn prompt(&self, partial: &Partial) -> Result<String, PipelineError> {
        let values = self
            .stage
            .depends_on
            .iter()
            .map(|k| (k.as_str(), partial.values.get(k).map_or("", String::as_str)))
            .collect();
        let record = view_record(&self.view, &values)?;
        let k = self.demo_count.min(self.train.len());
        let demos = if k == 0 {
            Vec::new()
        } else {
            let path: Vec<u64> = [DEMO_STREAM, self.index as u64].iter().chain(&partial.path).copied().collect();
            let mut rng = derive_rng(self.run_seed, &path);
            sample(&mut rng, self.train.len(), k)
                .into_iter()
                .map(|i| self.train_view(&self.train[i]))
                .collect::<Result<Vec<_>, _>>()?
        };
        Ok(render_record(&self.view, &record, &self.mask(), &demos)?.input_text)
    }

    fn step(&self, partial: &Partial) -> Result<(Vec<Partial>, StageStats, Option<PromptLogEntry>), PipelineError> {
        let mut stats = self.stats();
        let prompt = self.prompt(partial)?;
        let path: Vec<u64> = [REQUEST_STREAM, self.index as u64].iter().chain(&partial.path).copied().collect();
        let request_seed = derive_seed(self.seed, &path);
        let role = self.stage.role(&self.pipeline.task);
        let params = &self.stage.gen_params;
        let log = self.log_prompts.then(|| PromptLogEntry {
            stage: self.stage.name.clone(),
            path: partial.path.clone(),
            role,
            model_id: self.model_id.clone(),
            prompt: prompt.clone(),
        });
        let resp = self.backend.generate(&GenerateRequest {
            prompt,
            role,
            model_id: self.model_id.clone(),
            max_tokens: params.max_tokens,
            temperature: params.temperature,
            num_samples: params.num_samples,
            seed: Some(request_seed),
        })?;
        stats.requests = 1;
        stats.completions = resp.completions.len();
        let provenance = Provenance {
            stage: self.stage.name.clone(),
            backend: self.backend.id(),
            seed: request_seed,
            model_id: self.model_id.clone(),
        };
        let mut out = Vec::new();
        for (j, completion) in resp.completions.iter().enumerate() {
            match self.accept(partial, completion) {
                Ok(values) => {
                    let mut next = partial.clone();
                    if params.num_samples > 1 {
                        next.path.push(j as u64);
                    }
                    for (k, v) in values {
                        next.provenance.insert(k.clone(), provenance.clone());
                        next.values.insert(k, v);
                    }
                    out.push(next);
                }
                Err(drop) => stats.dropped.add(&drop),
            }
        }
        stats.accepted = out.len();
        Ok((out, stats, log))
    }

    /// Values the completion adds to `partial`, or the reason it is dropped.
    fn accept(&self, partial: &Partial, completion: &str) -> Result<Vec<(String, String)>, DropCounts> {
        let schema = &self.pipeline.task;
        let targets = self.ordered_targets();
        let raw = parse_completion(completion, targets.len()).map_err(|_| DropCounts {
            grammar: 1,
            ..DropCounts::default()
        })?;
        let mut values: BTreeMap<String, String> = partial.values.clone();
        let mut added = Vec::new();
        for (&key, value) in targets.iter().zip(raw) {
            let mut value = value.trim().to_string();
            if value.is_empty() {
                return Err(DropCounts {
                    empty: 1,
                    ..DropCounts::default()
                });
            }
            if schema.check_value(key, &value).is_err()
                || self.view.check_value(self.stage.view_name(key), &value).is_err()
            {
                return Err(DropCounts {
                    grammar: 1,
                    ..DropCounts::default()
                });
            }
            if schema.role_of(key) == Role::Output {
                if let Some(vocab) = &schema.label_vocab {
                    let norm = normalize_label(&value);
                    value = vocab.iter().find(|l| normalize_label(l) == norm).cloned().ok_or(DropCounts {
                        label: 1,
                        ..DropCounts::default()
                    })?;
                }
            }
            values.insert(key.clone(), value.clone());
            added.push((key.clone(), value));
        }
        for &key in &targets {
            for check in self.pipeline.checks.get(key).map(Vec::as_slice).unwrap_or(&[]) {
                if !passes(check, &values[key], &values) {
                    return Err(DropCounts {
                        check: 1,
                        ..DropCounts::default()
                    });
                }
            }
        }
        if let Some(Rewrite::RecordPlaceholder {
            entities_key,
            answer_key,
            placeholder,
            separator,
        }) = &self.stage.rewrite
        {
            let entities: Vec<String> = values
                .get(entities_key)
                .map_or("", String::as_str)
                .split(separator.as_str())
                .map(str::to_string)
                .collect();
            for (key, value) in added.iter_mut() {
                let r = record_placeholder_rewrite(value, &entities, placeholder);
                let Some(answer) = r.answer else {
                    return Err(DropCounts {
                        rewrite: 1,
                        ..DropCounts::default()
                    });
                };
                *value = r.query;
                if schema.check_value(key, value).is_err() || schema.check_value(answer_key, &answer).is_err() {
                    return Err(DropCounts {
                        grammar: 1,
                        ..DropCounts::default()
                    });
                }
                values.insert(answer_key.clone(), answer);
            }
            added.push((answer_key.clone(), values[answer_key].clone()));
        }
        Ok(added)
    }

    fn run(
        &self,
        partials: Vec<Partial>,
        threads: &rayon::ThreadPool,
    ) -> Result<(Vec<Partial>, StageStats, Vec<PromptLogEntry>), PipelineError> {
        let results: Vec<_> = threads.install(|| partials.par_iter().map(|p| self.step(p)).collect());
        let mut stats = self.stats();
        let mut out = Vec::new();
        let mut log = Vec::new();
        for r in results {
            let (next, s, entry) = r?;
            stats.requests += s.requests;
            stats.completions += s.completions;
            stats.accepted += s.accepted;
            stats.dropped.add(&s.dropped);
            out.extend(next);
            log.extend(entry);
        }
        Ok((out, stats, log))
    }
}

fn passes(check: &ValueCheck, value: &str, values: &BTreeMap<String, String>) -> bool {
    match check {
        ValueCheck::MarkedSpans { count, marker } => {
            let parts: Vec<&str> = value.split(*marker).collect();
            parts.len() == 2 * count + 1 && parts.iter().skip(1).step_by(2).all(|s| !s.trim().is_empty())
        }
        ValueCheck::ContainsKey { key } => values
            .get(key)
            .is_some_and(|needle| value.to_lowercase().contains(&needle.to_lowercase())),
    }
}

fn pool(jobs: usize) -> rayon::ThreadPool {
    rayon::ThreadPoolBuilder::new()
        .num_threads(jobs.max(1))
        .build()
        .expect("thread pool")
}

fn check_train(pipeline: &TaskPipeline, train: &[KeyValueRecord]) -> Result<Vec<KeyValueRecord>, PipelineError> {
    if train.is_empty() {
        return Err(PipelineError::EmptyTrainData);
    }
    let schema = &pipeline.task;
    train
        .iter()
        .enumerate()
        .map(|(index, rec)| {
            let rec = schema
                .canonicalize(rec)
                .map_err(|source| PipelineError::TrainRecord { index, source })?;
            if let Some(k) = schema.keys.iter().find(|k| rec.get(k).is_none()) {
                return Err(PipelineError::TrainRecord {
                    index,
                    source: RecordError::UnknownKey {
                        key: k.clone(),
                        task: schema.task.clone(),
                    },
                });
            }
            Ok(rec)
        })
        .collect()
}

fn seed_partial(pipeline: &TaskPipeline, train: &[KeyValueRecord], seed: u64, index: u64) -> Partial {
    let mut partial = Partial::new(index);
    if !pipeline.seed_keys.is_empty() {
        let pick_seed = derive_seed(seed, &[SEED_STREAM, index]);
        let mut rng = derive_rng(pick_seed, &[]);
        let rec = &train[sample(&mut rng, train.len(), 1).index(0)];
        for k in &pipeline.seed_keys {
            partial
                .values
                .insert(k.clone(), rec.get(k).unwrap_or_default().to_string());
            partial.provenance.insert(
                k.clone(),
                Provenance {
                    stage: "seed".into(),
                    backend: "train".into(),
                    seed: pick_seed,
                    model_id: None,
                },
            );
        }
    }
    partial
}

struct Handles<'a> {
    backend: &'a dyn Backend,
    held: Vec<ModelHandle>,
}

impl Handles<'_> {
    fn finetune(&mut self, hyper: &crate::backend::FinetuneHyper, examples: Vec<FinetuneExample>) -> Result<ModelHandle, PipelineError> {
        let h = self.backend.finetune(&hyper.request(examples))?;
        self.held.push(h.clone());
        Ok(h)
    }
}

impl Drop for Handles<'_> {
    fn drop(&mut self) {
        let mut seen = BTreeSet::new();
        for h in &self.held {
            if seen.insert(h.clone()) {
                self.backend.release(h);
            }
        }
    }
}

/// Runs one stage over `partials`. A fine-tune stage trains its own model on
/// `train` and releases it afterwards.
pub fn run_stage(
    pipeline: &TaskPipeline,
    stage_index: usize,
    partials: Vec<Partial>,
    train: &[KeyValueRecord],
    backend: &dyn Backend,
    opts: &RunOptions,
) -> Result<(Vec<Partial>, StageStats), PipelineError> {
    let train = check_train(pipeline, train)?;
    let mut handles = Handles { backend, held: vec![] };
    let mut ctx = StageCtx::new(pipeline, stage_index, &train, backend, None, opts);
    if ctx.stage.mode == StageMode::FineTune {
        ctx.model_id = Some(handles.finetune(&pipeline.finetune, ctx.finetune_examples()?)?);
    }
    let (out, stats, _) = ctx.run(partials, &pool(opts.jobs))?;
    Ok((out, stats))
}

/// Generates up to `opts.n_target` complete instances. Rounds of fresh
/// partials run through every stage until enough complete instances exist or
/// `n_target * attempt_factor` partials have been started.
pub fn run_pipeline(
    pipeline: &TaskPipeline,
    train: &[KeyValueRecord],
    backend: &dyn Backend,
    opts: &RunOptions,
) -> Result<PipelineOutput, PipelineError> {
    pipeline.validate()?;
    let train = check_train(pipeline, train)?;
    let threads = pool(opts.jobs);
    let mut handles = Handles { backend, held: vec![] };

    let mut stages = Vec::new();
    for i in 0..pipeline.stages.len() {
        let mut ctx = StageCtx::new(pipeline, i, &train, backend, None, opts);
        if ctx.stage.mode == StageMode::FineTune && opts.n_target > 0 {
            ctx.model_id = Some(handles.finetune(&pipeline.finetune, ctx.finetune_examples()?)?);
        }
        stages.push(ctx);
    }
    let mut stats: Vec<StageStats> = stages.iter().map(StageCtx::stats).collect();
    let mut prompt_log = Vec::new();
    let mut complete: Vec<Partial> = Vec::new();
    let budget = opts.n_target.saturating_mul(opts.attempt_factor.max(1));
    let (mut attempted, mut rounds) = (0, 0);
    while complete.len() < opts.n_target && attempted < budget {
        let need = (opts.n_target - complete.len()).min(budget - attempted);
        let mut partials: Vec<Partial> = (attempted..attempted + need)
            .map(|i| seed_partial(pipeline, &train, opts.seed, i as u64))
            .collect();
        attempted += need;
        rounds += 1;
        for (ctx, total) in stages.iter().zip(stats.iter_mut()) {
            let (next, s, log) = ctx.run(partials, &threads)?;
            total.requests += s.requests;
            total.completions += s.completions;
            total.accepted += s.accepted;
            total.dropped.add(&s.dropped);
            prompt_log.extend(log);
            partials = next;
        }
        log::info!("round {rounds}: {} complete instances", complete.len() + partials.len());
        complete.extend(partials);
    }
    complete.truncate(opts.n_target);
    if opts.n_target > 0 && complete.is_empty() {
        return Err(PipelineError::NoCompleteInstances { attempted });
    }
    if complete.len() < opts.n_target {
        log::warn!("shortfall: {} of {} instances after {attempted} attempts", complete.len(), opts.n_target);
    }

    let schema = &pipeline.task;
    let mut instances = complete
        .into_iter()
        .map(|p| {
            let pairs: Vec<(&str, &str)> = p.values.iter().map(|(k, v)| (k.as_str(), v.as_str())).collect();
            Ok(SyntheticInstance {
                record: schema.record(&pairs)?,
                provenance: p.provenance,
                filtered: false,
                classifier_label: None,
            })
        })
        .collect::<Result<Vec<_>, PipelineError>>()?;

    let filter = if pipeline.filter == FilterPolicy::Consistency && !instances.is_empty() {
        let output = schema.output_key.as_deref().expect("validated");
        let at = schema.keys.iter().position(|k| k == output).expect("validated");
        let examples = train
            .iter()
            .map(|rec| {
                let pair = render_record(schema, rec, &BTreeSet::from([at]), &[])?;
                Ok(FinetuneExample {
                    input: pair.input_text,
                    target: pair.target_text,
                })
            })
            .collect::<Result<Vec<_>, PipelineError>>()?;
        let classifier = handles.finetune(&pipeline.classifier, examples)?;
        Some(threads.install(|| consistency_filter(&mut instances, schema, backend, Some(&classifier)))?)
    } else {
        None
    };
    drop(handles);

    let complete = instances.len();
    let manifest = RunManifest {
        tool_version: env!("CARGO_PKG_VERSION").into(),
        task: schema.task.clone(),
        pipeline: pipeline.clone(),
        pipeline_sha256: sha256_hex(&serde_json::to_vec(pipeline).expect("serializable")),
        train_records: train.len(),
        train_sha256: sha256_hex(&jsonl(&train)),
        seed: opts.seed,
        backend: backend.id(),
        n_target: opts.n_target,
        demo_count: opts.demo_count,
        attempt_factor: opts.attempt_factor,
        attempted,
        rounds,
        complete,
        shortfall: opts.n_target - complete,
        stages: stats,
        filter,
        instances_sha256: sha256_hex(&jsonl(&instances)),
    };
    Ok(PipelineOutput {
        instances,
        manifest,
        prompt_log,
    })
}
