//! Offline backend. Completions are recombinations of material the stub has
//! seen: demonstrations in the prompt and examples from earlier fine-tune
//! calls. Output is a pure function of the request and the stub seed.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::sync::{Arc, Mutex};

use rand::seq::SliceRandom;
use rand::Rng as _;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::wire::{FinetuneRequest, GenerateRequest, GenerateResponse, GenerationRole, LabelRequest};
use super::{Backend, BackendError, ModelHandle};
use crate::record::{contains_sentinel, fill_masks, parse_prompt, sentinel, KeyValueRecord, END_SENTINEL};
use crate::seed::{derive_rng, derive_seed, Rng};

/// How the stub fills a masked key.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ValueGenerator {
    /// Start from the source value whose context best matches the prompt and
    /// splice in lowercase n-grams from other source values.
    Recombine,
    /// Copy the whole source value whose context best matches the prompt.
    Nearest,
    /// Always the same text.
    Fixed { text: String },
    /// Tag known entity surfaces found in `sentence_key` as `Label surface; ...`.
    EntityTags { sentence_key: String },
}

const LEXICON: &[&str] = &[
    "the", "report", "said", "river", "company", "winter", "small", "city", "council", "new",
    "plan", "would", "open", "after", "several", "years", "of", "work", "local", "people",
    "market", "north", "station", "was", "built", "near", "old", "bridge", "and", "school",
];

const SWAP_PROB: f64 = 0.35;
const MAX_NGRAM: usize = 3;
/// Shorter values (words, labels, short phrases) are copied verbatim.
const MIN_RECOMBINE_TOKENS: usize = 4;

#[derive(Debug, Clone)]
struct Source {
    values: BTreeMap<String, String>,
}

#[derive(Debug)]
struct Model {
    sources: Vec<Source>,
}

pub struct StubBackend {
    seed: u64,
    templates: BTreeMap<String, ValueGenerator>,
    models: Mutex<HashMap<String, Arc<Model>>>,
}

fn hash64(bytes: &[u8]) -> u64 {
    let digest = Sha256::digest(bytes);
    u64::from_le_bytes(digest[..8].try_into().expect("digest is 32 bytes"))
}

fn word_set(text: &str) -> BTreeSet<String> {
    text.split(|c: char| !c.is_alphanumeric())
        .filter(|w| !w.is_empty())
        .map(str::to_lowercase)
        .collect()
}

fn jaccard(a: &BTreeSet<String>, b: &BTreeSet<String>) -> f64 {
    if a.is_empty() && b.is_empty() {
        return 0.0;
    }
    let inter = a.intersection(b).count();
    inter as f64 / (a.len() + b.len() - inter) as f64
}

/// Tokens the recombiner may replace. Capitalized words, numbers and tokens
/// carrying punctuation or markup are kept in place.
fn is_plain(token: &str) -> bool {
    !token.is_empty() && token.chars().all(|c| c.is_lowercase())
}

fn source_of(record: &KeyValueRecord) -> Source {
    Source {
        values: record
            .pairs()
            .iter()
            .filter(|p| !p.value.masked)
            .map(|p| (p.key.name.clone(), p.value.text.clone()))
            .collect(),
    }
}

fn parse_entity_tags(text: &str) -> Vec<(String, String)> {
    let text = text.trim();
    let text = text.strip_suffix('.').unwrap_or(text);
    text.split(';')
        .filter_map(|seg| {
            let seg = seg.trim();
            let (label, surface) = seg.split_once(' ')?;
            let surface = surface.trim();
            (!surface.is_empty()).then(|| (label.to_string(), surface.to_string()))
        })
        .collect()
}

fn contains_on_boundary(haystack: &[&str], needle: &[&str]) -> Option<usize> {
    if needle.is_empty() || needle.len() > haystack.len() {
        return None;
    }
    (0..=haystack.len() - needle.len()).find(|&i| haystack[i..i + needle.len()] == *needle)
}

impl StubBackend {
    /// A stub that tags entities for `Output Tags` keys and otherwise uses
    /// recombination for inputs and nearest-value copying for outputs.
    pub fn new(seed: u64) -> Self {
        let mut templates = BTreeMap::new();
        templates.insert(
            "Output Tags".to_string(),
            ValueGenerator::EntityTags {
                sentence_key: "Sentence".into(),
            },
        );
        Self {
            seed,
            templates,
            models: Mutex::new(HashMap::new()),
        }
    }

    /// Sets the generator for `key`, or for `task/key` to scope it to a task.
    pub fn with_template(mut self, key: impl Into<String>, generator: ValueGenerator) -> Self {
        self.templates.insert(key.into(), generator);
        self
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn model_count(&self) -> usize {
        self.models.lock().unwrap_or_else(|e| e.into_inner()).len()
    }

    fn generator(&self, task: &str, key: &str, role: GenerationRole) -> ValueGenerator {
        self.templates
            .get(&format!("{task}/{key}"))
            .or_else(|| self.templates.get(key))
            .cloned()
            .unwrap_or(match role {
                GenerationRole::InputGeneration => ValueGenerator::Recombine,
                GenerationRole::OutputGeneration => ValueGenerator::Nearest,
            })
    }

    fn sources(&self, model_id: Option<&str>, demos: &[KeyValueRecord]) -> Result<Vec<Source>, BackendError> {
        let mut sources = Vec::new();
        if let Some(id) = model_id {
            let models = self.models.lock().unwrap_or_else(|e| e.into_inner());
            let model = models
                .get(id)
                .ok_or_else(|| BackendError::Rejected(format!("unknown model {id:?}")))?;
            sources.extend(model.sources.iter().cloned());
        }
        sources.extend(demos.iter().map(source_of));
        Ok(sources)
    }

    /// Fills every masked slot of `prompt`, returning values in sentinel order.
    fn fill(
        &self,
        prompt: &str,
        role: GenerationRole,
        model_id: Option<&str>,
        max_tokens: u32,
        path: &[u64],
    ) -> Result<Vec<String>, BackendError> {
        let parsed = parse_prompt(prompt).map_err(|e| BackendError::Rejected(format!("unparsable prompt: {e}")))?;
        let sources = self.sources(model_id, &parsed.demonstrations)?;
        let record = &parsed.record;
        let known: Vec<(&str, &str)> = record
            .pairs()
            .iter()
            .filter(|p| !p.value.masked)
            .map(|p| (p.key.name.as_str(), p.value.text.as_str()))
            .collect();
        let context = word_set(&known.iter().map(|(_, v)| *v).collect::<Vec<_>>().join(" "));

        let mut values = Vec::new();
        for (slot, key) in parsed.masked_keys().into_iter().enumerate() {
            // the base source is drawn from a stream shared by all slots, so
            // slots with the same pool copy from the same source
            let mut base_rng = derive_rng(self.seed, path);
            let mut rng = derive_rng(self.seed, &[path, &[slot as u64]].concat());
            let pool: Vec<&Source> = sources.iter().filter(|s| s.values.contains_key(key)).collect();
            let value = match self.generator(record.task(), key, role) {
                ValueGenerator::Fixed { text } => text,
                ValueGenerator::EntityTags { sentence_key } => {
                    let sentence = known
                        .iter()
                        .find(|(k, _)| *k == sentence_key)
                        .map(|(_, v)| *v)
                        .unwrap_or("");
                    tag_entities(sentence, &pool, key)
                }
                _ if pool.is_empty() => lexicon_sentence(&mut rng),
                ValueGenerator::Nearest => nearest(&pool, &known, &context, &mut base_rng).values[key].clone(),
                ValueGenerator::Recombine => {
                    let base = nearest(&pool, &known, &context, &mut base_rng);
                    recombine(&base.values[key], &pool, key, &mut rng)
                }
            };
            if contains_sentinel(&value) {
                return Err(BackendError::Rejected(format!("value for {key:?} contains a sentinel")));
            }
            let words: Vec<&str> = value.split_whitespace().collect();
            let value = if words.len() > max_tokens as usize {
                words[..max_tokens as usize].join(" ")
            } else {
                value
            };
            values.push(value);
        }
        Ok(values)
    }
}

/// Source whose values for the prompt's known keys overlap most with the
/// prompt context. Ties are broken at random.
fn nearest<'a>(
    pool: &[&'a Source],
    known: &[(&str, &str)],
    context: &BTreeSet<String>,
    rng: &mut Rng,
) -> &'a Source {
    let scores: Vec<f64> = pool
        .iter()
        .map(|s| {
            let text: Vec<&str> = known
                .iter()
                .filter_map(|(k, _)| s.values.get(*k).map(String::as_str))
                .collect();
            jaccard(context, &word_set(&text.join(" ")))
        })
        .collect();
    let best = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let top: Vec<&Source> = pool
        .iter()
        .zip(&scores)
        .filter(|(_, &s)| s == best)
        .map(|(src, _)| *src)
        .collect();
    top.choose(rng).copied().expect("pool is non-empty")
}

fn recombine(base: &str, pool: &[&Source], key: &str, rng: &mut Rng) -> String {
    let donors: Vec<Vec<&str>> = pool
        .iter()
        .map(|s| s.values[key].split_whitespace().collect())
        .collect();
    let tokens: Vec<&str> = base.split_whitespace().collect();
    if tokens.len() < MIN_RECOMBINE_TOKENS {
        return base.to_string();
    }
    let mut out: Vec<&str> = Vec::with_capacity(tokens.len());
    let mut i = 0;
    while i < tokens.len() {
        let run = tokens[i..].iter().take_while(|t| is_plain(t)).count();
        if run == 0 || !rng.gen_bool(SWAP_PROB) {
            out.push(tokens[i]);
            i += 1;
            continue;
        }
        let n = rng.gen_range(1..=run.min(MAX_NGRAM));
        let donor = donors.choose(rng).expect("pool is non-empty");
        let windows: Vec<&[&str]> = donor.windows(n).filter(|w| w.iter().all(|t| is_plain(t))).collect();
        match windows.choose(rng) {
            Some(w) => out.extend_from_slice(w),
            None => out.extend_from_slice(&tokens[i..i + n]),
        }
        i += n;
    }
    out.join(" ")
}

fn lexicon_sentence(rng: &mut Rng) -> String {
    let len = rng.gen_range(6..=12);
    let words: Vec<&str> = (0..len).map(|_| *LEXICON.choose(rng).expect("lexicon")).collect();
    let mut s = words.join(" ");
    s.push('.');
    s
}

/// Labels every known surface in `sentence`, longest surfaces first,
/// without overlaps, reported in sentence order.
fn tag_entities(sentence: &str, pool: &[&Source], key: &str) -> String {
    let mut gazetteer: BTreeMap<String, String> = BTreeMap::new();
    for src in pool {
        for (label, surface) in parse_entity_tags(&src.values[key]) {
            gazetteer.entry(surface).or_insert(label);
        }
    }
    let mut entries: Vec<(&String, &String)> = gazetteer.iter().collect();
    entries.sort_by(|a, b| b.0.split(' ').count().cmp(&a.0.split(' ').count()).then(a.0.cmp(b.0)));
    let tokens: Vec<&str> = sentence.split_whitespace().collect();
    let mut taken = vec![false; tokens.len()];
    let mut found: Vec<(usize, String)> = Vec::new();
    for (surface, label) in entries {
        let needle: Vec<&str> = surface.split_whitespace().collect();
        let mut from = 0;
        while let Some(off) = contains_on_boundary(&tokens[from..], &needle) {
            let start = from + off;
            let span = start..start + needle.len();
            if taken[span.clone()].iter().all(|t| !t) {
                taken[span].iter_mut().for_each(|t| *t = true);
                found.push((start, format!("{label} {surface}")));
                break;
            }
            from = start + 1;
        }
    }
    found.sort();
    if found.is_empty() {
        return String::new();
    }
    let mut out = found.into_iter().map(|(_, s)| s).collect::<Vec<_>>().join("; ");
    out.push('.');
    out
}

impl Backend for StubBackend {
    fn id(&self) -> String {
        format!("stub:{}", self.seed)
    }

    fn generate(&self, req: &GenerateRequest) -> Result<GenerateResponse, BackendError> {
        let prompt_hash = hash64(req.prompt.as_bytes());
        let role = match req.role {
            GenerationRole::InputGeneration => 0,
            GenerationRole::OutputGeneration => 1,
        };
        let req_seed = req.seed.map_or(u64::MAX, |s| derive_seed(s, &[]));
        let completions = (0..req.num_samples as u64)
            .map(|sample| {
                let path = [prompt_hash, role, req_seed, sample];
                let values = self.fill(&req.prompt, req.role, req.model_id.as_deref(), req.max_tokens, &path)?;
                let mut out = String::new();
                for (i, v) in values.iter().enumerate() {
                    out.push_str(&sentinel(i));
                    out.push(' ');
                    out.push_str(v);
                    out.push(' ');
                }
                out.push_str(END_SENTINEL);
                Ok(out)
            })
            .collect::<Result<Vec<_>, BackendError>>()?;
        Ok(GenerateResponse {
            completions,
            deterministic: true,
        })
    }

    fn finetune(&self, req: &FinetuneRequest) -> Result<ModelHandle, BackendError> {
        if req.examples.is_empty() {
            return Err(BackendError::Rejected("no fine-tuning examples".into()));
        }
        let mut sources = Vec::with_capacity(req.examples.len());
        for ex in &req.examples {
            let parsed = parse_prompt(&ex.input)
                .map_err(|e| BackendError::Rejected(format!("unparsable example input: {e}")))?;
            let filled = fill_masks(&parsed.record, &ex.target)
                .map_err(|e| BackendError::Rejected(format!("unparsable example target: {e}")))?;
            sources.push(source_of(&filled));
        }
        let body = serde_json::to_vec(req).map_err(|e| BackendError::Protocol(e.to_string()))?;
        let handle = format!("stub-ft-{:016x}", derive_seed(self.seed, &[hash64(&body)]));
        self.models
            .lock()
            .unwrap_or_else(|e| e.into_inner())
            .insert(handle.clone(), Arc::new(Model { sources }));
        Ok(handle)
    }

    fn label(&self, req: &LabelRequest) -> Result<String, BackendError> {
        let path = [hash64(req.prompt.as_bytes()), 2];
        let values = self.fill(
            &req.prompt,
            GenerationRole::OutputGeneration,
            req.model_id.as_deref(),
            u32::MAX,
            &path,
        )?;
        values
            .into_iter()
            .next()
            .ok_or_else(|| BackendError::Rejected("label prompt has no masked slot".into()))
    }

    fn health(&self) -> Result<(), BackendError> {
        Ok(())
    }

    fn release(&self, model: &ModelHandle) {
        self.models.lock().unwrap_or_else(|e| e.into_inner()).remove(model);
    }
}
