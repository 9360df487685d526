use std::collections::HashSet;

use rand::seq::SliceRandom;
use rand::Rng as _;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::conll::write_annotations;
use super::{
    align_entities, format_mentions, parse_entity_output, stage1_pair, stage2_pair, tokenize, EntityMention,
    LabelSet, SeqLabelError, TaggedSentence,
};
use crate::backend::{
    Backend, BackendError, FinetuneExample, FinetuneHyper, GenerateRequest, GenerationRole, ModelHandle,
};
use crate::record::parse_completion;
use crate::seed::{derive_rng, derive_seed};

const GENERATION_STREAM: u64 = 0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SelfTrainConfig {
    pub task: String,
    /// Number of annotation passes over the frozen sentences.
    pub rounds: usize,
    pub n_sentences: usize,
    pub seed: u64,
    pub labels: LabelSet,
    pub generator: FinetuneHyper,
    pub labeler: FinetuneHyper,
    pub max_tokens: u32,
    pub temperature: f64,
    /// Generation attempts allowed per requested sentence.
    pub attempts_per_sentence: usize,
    pub jobs: usize,
}

impl Default for SelfTrainConfig {
    fn default() -> Self {
        Self {
            task: "conll03".into(),
            rounds: 4,
            n_sentences: 100,
            seed: 0,
            labels: LabelSet::conll(),
            generator: FinetuneHyper::FULL,
            labeler: FinetuneHyper::PROMPT_ONLY,
            max_tokens: 128,
            temperature: 1.0,
            attempts_per_sentence: 4,
            jobs: 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerationStats {
    pub requested: usize,
    pub generated: usize,
    pub attempts: usize,
    pub failed_completions: usize,
    pub duplicates: usize,
    pub conditions: usize,
    pub generator_hyper: FinetuneHyper,
    pub sentences_sha256: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundManifest {
    pub round: usize,
    pub rounds: usize,
    pub task: String,
    pub seed: u64,
    pub backend: String,
    pub labeler_hyper: FinetuneHyper,
    pub training_sentences: usize,
    pub sentences: usize,
    pub entities: usize,
    pub dropped_mentions: usize,
    pub skipped_segments: usize,
    pub failed_completions: usize,
    pub sentences_sha256: String,
    pub annotations_sha256: String,
    /// Hash of the previous round's manifest bytes.
    pub previous_sha256: Option<String>,
}

impl RoundManifest {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut bytes = serde_json::to_vec_pretty(self).expect("manifest serializes");
        bytes.push(b'\n');
        bytes
    }

    pub fn sha256(&self) -> String {
        hex::encode(Sha256::digest(self.to_bytes()))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RoundOutput {
    pub annotations: Vec<TaggedSentence>,
    pub mentions: Vec<Vec<EntityMention>>,
    pub manifest: RoundManifest,
}

impl RoundOutput {
    pub fn annotations_jsonl(&self) -> Vec<u8> {
        let mut buf = Vec::new();
        write_annotations(&mut buf, &self.annotations, &self.mentions).expect("writing to memory");
        buf
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct IterationState {
    /// Synthetic sentences, generated once and shared by every round.
    pub sentences: Vec<String>,
    pub generation: GenerationStats,
    pub rounds: Vec<RoundOutput>,
    /// Set when a round was aborted; earlier rounds are kept.
    pub failure: Option<String>,
}

/// One JSON string per line.
pub fn sentences_jsonl(sentences: &[String]) -> Vec<u8> {
    let mut buf = Vec::new();
    for s in sentences {
        buf.extend(serde_json::to_vec(s).expect("string serializes"));
        buf.push(b'\n');
    }
    buf
}

fn sha(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

fn pool(jobs: usize) -> rayon::ThreadPool {
    rayon::ThreadPoolBuilder::new()
        .num_threads(jobs.max(1))
        .build()
        .expect("thread pool")
}

fn finetune(
    backend: &dyn Backend,
    hyper: &FinetuneHyper,
    pairs: Vec<crate::record::RenderedPair>,
) -> Result<ModelHandle, BackendError> {
    let examples = pairs
        .into_iter()
        .map(|p| FinetuneExample {
            input: p.input_text,
            target: p.target_text,
        })
        .collect();
    backend.finetune(&hyper.request(examples))
}

fn labeler_pairs(task: &str, data: &[&TaggedSentence], labels: &LabelSet) -> Result<Vec<crate::record::RenderedPair>, SeqLabelError> {
    data.iter()
        .map(|s| stage2_pair(task, &s.text(), &format_mentions(&s.mentions(labels)?)))
        .collect()
}

/// Generates the sentence pool once, then runs `config.rounds` labeling
/// passes over it. Round 0 trains the labeler on the seed data alone; round
/// r trains on the seed data plus the annotations of round r - 1.
pub fn iterate_selftrain(
    seed_data: &[TaggedSentence],
    backend: &dyn Backend,
    config: &SelfTrainConfig,
) -> Result<IterationState, SeqLabelError> {
    if seed_data.is_empty() {
        return Err(SeqLabelError::NoSeedData);
    }
    if config.rounds == 0 {
        return Err(SeqLabelError::InvalidRounds);
    }
    let labels = &config.labels;
    let mut conditions = Vec::new();
    let mut stage1 = Vec::new();
    for s in seed_data {
        let mentions = s.mentions(labels)?;
        if mentions.is_empty() {
            continue;
        }
        let names: Vec<String> = mentions.into_iter().map(|m| m.label).collect();
        stage1.push(stage1_pair(&config.task, &names, &s.text(), labels)?);
        conditions.push(names);
    }
    if conditions.is_empty() {
        return Err(SeqLabelError::NoEntityConditions);
    }
    let threads = pool(config.jobs);

    let generator = finetune(backend, &config.generator, stage1)?;
    let generated = generate_sentences(backend, &generator, &conditions, config, &threads);
    backend.release(&generator);
    let (sentences, mut generation) = generated?;
    generation.conditions = conditions.len();
    log::info!("generated {} of {} sentences", sentences.len(), config.n_sentences);

    let mut state = IterationState {
        sentences,
        generation,
        rounds: Vec::new(),
        failure: None,
    };
    for round in 0..config.rounds {
        match label_round(seed_data, backend, config, &state, round, &threads) {
            Ok(out) => state.rounds.push(out),
            Err(e) => {
                log::error!("round {round} aborted: {e}");
                state.failure = Some(format!("round {round}: {e}"));
                break;
            }
        }
    }
    Ok(state)
}

fn generate_sentences(
    backend: &dyn Backend,
    generator: &ModelHandle,
    conditions: &[Vec<String>],
    config: &SelfTrainConfig,
    threads: &rayon::ThreadPool,
) -> Result<(Vec<String>, GenerationStats), SeqLabelError> {
    let max_attempts = config.n_sentences.saturating_mul(config.attempts_per_sentence.max(1));
    let mut sentences = Vec::with_capacity(config.n_sentences);
    let mut seen = HashSet::new();
    let mut stats = GenerationStats {
        requested: config.n_sentences,
        generated: 0,
        attempts: 0,
        failed_completions: 0,
        duplicates: 0,
        conditions: 0,
        generator_hyper: config.generator,
        sentences_sha256: String::new(),
    };
    while sentences.len() < config.n_sentences && stats.attempts < max_attempts {
        let batch = (config.n_sentences - sentences.len()).min(max_attempts - stats.attempts);
        let range = stats.attempts..stats.attempts + batch;
        let outcomes: Vec<Result<Option<String>, SeqLabelError>> = threads.install(|| {
            range
                .into_par_iter()
                .map(|attempt| {
                    let mut rng = derive_rng(config.seed, &[GENERATION_STREAM, attempt as u64]);
                    let condition = conditions.choose(&mut rng).expect("conditions non-empty");
                    let prompt = stage1_pair(&config.task, condition, "", &config.labels)?.input_text;
                    let resp = backend.generate(&GenerateRequest {
                        prompt,
                        role: GenerationRole::InputGeneration,
                        model_id: Some(generator.clone()),
                        max_tokens: config.max_tokens,
                        temperature: config.temperature,
                        num_samples: 1,
                        seed: Some(rng.gen()),
                    })?;
                    let sentence = resp
                        .completions
                        .first()
                        .and_then(|c| parse_completion(c, 1).ok())
                        .map(|mut v| v.remove(0))
                        .map(|s| tokenize(&s).join(" "))
                        .filter(|s| !s.is_empty() && stage2_pair(&config.task, s, "").is_ok());
                    Ok(sentence)
                })
                .collect()
        });
        stats.attempts += batch;
        for outcome in outcomes {
            match outcome? {
                None => stats.failed_completions += 1,
                Some(s) if !seen.insert(s.clone()) => stats.duplicates += 1,
                Some(s) if sentences.len() < config.n_sentences => sentences.push(s),
                Some(_) => {}
            }
        }
    }
    if sentences.len() < config.n_sentences {
        log::warn!(
            "only {} of {} sentences after {} attempts",
            sentences.len(),
            config.n_sentences,
            stats.attempts
        );
    }
    stats.generated = sentences.len();
    stats.sentences_sha256 = sha(&sentences_jsonl(&sentences));
    Ok((sentences, stats))
}

struct Labeled {
    sentence: TaggedSentence,
    mentions: Vec<EntityMention>,
    dropped: usize,
    skipped: usize,
    failed: bool,
}

fn label_round(
    seed_data: &[TaggedSentence],
    backend: &dyn Backend,
    config: &SelfTrainConfig,
    state: &IterationState,
    round: usize,
    threads: &rayon::ThreadPool,
) -> Result<RoundOutput, SeqLabelError> {
    let labels = &config.labels;
    let mut training: Vec<&TaggedSentence> = seed_data.iter().collect();
    if let Some(prev) = state.rounds.last() {
        training.extend(prev.annotations.iter());
    }
    let labeler = finetune(backend, &config.labeler, labeler_pairs(&config.task, &training, labels)?)?;

    let labeled: Result<Vec<Labeled>, SeqLabelError> = threads.install(|| {
        state
            .sentences
            .par_iter()
            .enumerate()
            .map(|(i, sentence)| {
                let prompt = stage2_pair(&config.task, sentence, "")?.input_text;
                let resp = backend.generate(&GenerateRequest {
                    prompt,
                    role: GenerationRole::OutputGeneration,
                    model_id: Some(labeler.clone()),
                    max_tokens: config.max_tokens,
                    temperature: config.temperature,
                    num_samples: 1,
                    seed: Some(derive_seed(config.seed, &[round as u64 + 1, i as u64])),
                })?;
                let tokens = tokenize(sentence);
                let target = resp.completions.first().and_then(|c| parse_completion(c, 1).ok());
                let failed = target.is_none();
                let parsed = target
                    .map(|mut v| parse_entity_output(&v.remove(0), labels))
                    .unwrap_or_default();
                let aligned = align_entities(&tokens, &parsed.mentions, labels)?;
                let mentions = aligned.sentence.mentions(labels)?;
                Ok(Labeled {
                    sentence: aligned.sentence,
                    mentions,
                    dropped: aligned.dropped,
                    skipped: parsed.skipped,
                    failed,
                })
            })
            .collect()
    });
    backend.release(&labeler);
    let labeled = labeled?;

    let mut out = RoundOutput {
        annotations: Vec::with_capacity(labeled.len()),
        mentions: Vec::with_capacity(labeled.len()),
        manifest: RoundManifest {
            round,
            rounds: config.rounds,
            task: config.task.clone(),
            seed: config.seed,
            backend: backend.id(),
            labeler_hyper: config.labeler,
            training_sentences: training.len(),
            sentences: labeled.len(),
            entities: 0,
            dropped_mentions: 0,
            skipped_segments: 0,
            failed_completions: 0,
            sentences_sha256: state.generation.sentences_sha256.clone(),
            annotations_sha256: String::new(),
            previous_sha256: state.rounds.last().map(|r| r.manifest.sha256()),
        },
    };
    for l in labeled {
        out.manifest.entities += l.mentions.len();
        out.manifest.dropped_mentions += l.dropped;
        out.manifest.skipped_segments += l.skipped;
        out.manifest.failed_completions += usize::from(l.failed);
        out.annotations.push(l.sentence);
        out.mentions.push(l.mentions);
    }
    out.manifest.annotations_sha256 = sha(&out.annotations_jsonl());
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backend::{FinetuneMode, FinetuneRequest, GenerateResponse, LabelRequest, StubBackend};
    use std::sync::Mutex;

    fn seed() -> Vec<TaggedSentence> {
        let text = "All\tB-ORG\nFishermen\tI-ORG\n's\tI-ORG\nAssociation\tI-ORG\nsecretary\tO\nN.J.\tB-PER\nBose\tI-PER\nsaid\tO\nthe\tO\nstrike\tO\nwould\tO\ncontinue\tO\nindefinitely.\tO\n\n\
Peter\tB-PER\nBlackburn\tI-PER\nvisited\tO\nthe\tO\nold\tO\nharbour\tO\nin\tO\nLondon\tB-LOC\n\n\
the\tO\nweather\tO\nwas\tO\ncold\tO\n\n\
Reuters\tB-ORG\nreported\tO\nthat\tO\nthe\tO\nmarket\tO\nin\tO\nParis\tB-LOC\nwas\tO\nquiet\tO\n";
        super::super::conll::read_conll(text.as_bytes()).unwrap()
    }

    fn config(rounds: usize) -> SelfTrainConfig {
        SelfTrainConfig {
            rounds,
            n_sentences: 12,
            seed: 5,
            ..SelfTrainConfig::default()
        }
    }

    #[test]
    fn frozen_sentences_across_rounds() {
        let stub = StubBackend::new(1);
        let state = iterate_selftrain(&seed(), &stub, &config(4)).unwrap();
        assert!(state.failure.is_none());
        assert_eq!(state.rounds.len(), 4);
        assert!(!state.sentences.is_empty());
        for (r, out) in state.rounds.iter().enumerate() {
            let texts: Vec<String> = out.annotations.iter().map(|a| a.text()).collect();
            assert_eq!(texts, state.sentences);
            assert_eq!(out.manifest.round, r);
            assert_eq!(out.manifest.labeler_hyper.mode, FinetuneMode::PromptOnly);
            assert_eq!(out.manifest.labeler_hyper.lr, 1e-3);
        }
        for pair in state.rounds.windows(2) {
            assert_eq!(pair[1].manifest.previous_sha256, Some(pair[0].manifest.sha256()));
        }
        assert!(state.rounds[0].manifest.entities > 0);
        assert_eq!(stub.model_count(), 0);
        assert_eq!(state.generation.generator_hyper.lr, 5e-6);
    }

    #[test]
    fn deterministic_and_parallel_invariant() {
        let a = iterate_selftrain(&seed(), &StubBackend::new(1), &config(2)).unwrap();
        let b = iterate_selftrain(&seed(), &StubBackend::new(1), &SelfTrainConfig { jobs: 4, ..config(2) }).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn degenerate_and_error_cases() {
        let stub = StubBackend::new(0);
        assert_eq!(iterate_selftrain(&seed(), &stub, &config(1)).unwrap().rounds.len(), 1);
        assert!(matches!(iterate_selftrain(&[], &stub, &config(1)), Err(SeqLabelError::NoSeedData)));
        assert!(matches!(iterate_selftrain(&seed(), &stub, &config(0)), Err(SeqLabelError::InvalidRounds)));
        let plain = vec![seed().remove(2)];
        assert!(matches!(
            iterate_selftrain(&plain, &stub, &config(1)),
            Err(SeqLabelError::NoEntityConditions)
        ));
    }

    /// Delegates to the stub but fails every call after the n-th fine-tune.
    struct FailAfter {
        inner: StubBackend,
        finetunes_left: Mutex<usize>,
    }

    impl Backend for FailAfter {
        fn id(&self) -> String {
            "fail-after".into()
        }
        fn generate(&self, req: &GenerateRequest) -> Result<GenerateResponse, BackendError> {
            self.inner.generate(req)
        }
        fn finetune(&self, req: &FinetuneRequest) -> Result<ModelHandle, BackendError> {
            let mut left = self.finetunes_left.lock().unwrap();
            if *left == 0 {
                return Err(BackendError::Timeout);
            }
            *left -= 1;
            self.inner.finetune(req)
        }
        fn label(&self, req: &LabelRequest) -> Result<String, BackendError> {
            self.inner.label(req)
        }
        fn health(&self) -> Result<(), BackendError> {
            Ok(())
        }
    }

    #[test]
    fn failure_keeps_prior_rounds() {
        // generator + 2 labelers succeed, the third labeler fails
        let backend = FailAfter {
            inner: StubBackend::new(1),
            finetunes_left: Mutex::new(3),
        };
        let state = iterate_selftrain(&seed(), &backend, &config(4)).unwrap();
        assert_eq!(state.rounds.len(), 2);
        assert!(state.failure.as_deref().unwrap().starts_with("round 2"));
    }
}
