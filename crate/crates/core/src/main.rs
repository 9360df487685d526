use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;

use clap::{Parser, Subcommand};
use serde::Serialize;
use serde_json::Value;
use sha2::{Digest, Sha256};

use komt::backend::serve::BackendServer;
use komt::backend::{from_spec, Backend, BackendError, HttpConfig, RetryPolicy, StubBackend, BACKEND_URL_ENV};
use komt::corpus::{build_corpus, CorpusConfig, CorpusError};
use komt::denoise::{make_training_example, DenoiseError, TokenBudget};
use komt::metrics::{metric_report, CapitalizedRuns, MetricError, ReportConfig, DEFAULT_MAX_NGRAM, DEFAULT_SAMPLE_SIZE};
use komt::pipeline::data::read_train_data;
use komt::pipeline::{run_pipeline, shipped, PipelineError, RunOptions, TaskPipeline};
use komt::record::{render_record, KeyValueRecord, RecordError, TaskSchema};
use komt::seqlabel::{conll, iterate_selftrain, sentences_jsonl, GenerationStats, SelfTrainConfig, SeqLabelError};
use komt::seed;

const EXIT_FAILURE: u8 = 1;
const EXIT_CONFIG: u8 = 2;
const EXIT_IO: u8 = 3;
const EXIT_EMPTY: u8 = 4;
const EXIT_UNREACHABLE: u8 = 5;

/// Denoising corpora, synthetic data pipelines and diversity metrics.
///
/// Exit codes: 0 success, 1 run failure, 2 usage or configuration error,
/// 3 I/O error, 4 empty corpus, 5 backend unreachable.
#[derive(Parser)]
#[command(name = "komt", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Build the mixed denoising corpus from a JSON config.
    BuildCorpus {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Overrides the seed in the config.
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, default_value_t = 1)]
        jobs: usize,
    },
    /// Generate synthetic instances with a task pipeline.
    Augment {
        /// Shipped pipeline name (boolq, cb, ...) or path to a pipeline JSON file.
        #[arg(long)]
        pipeline: String,
        #[arg(long)]
        train: PathBuf,
        #[arg(long, default_value_t = 100)]
        n: usize,
        /// `stub`, `stub:<seed>` or an http(s) URL.
        #[arg(long, env = BACKEND_URL_ENV, default_value = "stub")]
        backend: String,
        /// Demonstrations per zero-shot prompt.
        #[arg(long)]
        demo_count: Option<usize>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 1)]
        jobs: usize,
        #[arg(long)]
        log_prompts: bool,
    },
    /// Sequence-labeling augmentation with iterative relabeling.
    Seqlabel {
        /// Column format, or JSONL with `.jsonl`/`.json` extension.
        #[arg(long)]
        train: PathBuf,
        #[arg(long, default_value_t = 4)]
        rounds: usize,
        #[arg(long, default_value_t = 100)]
        n_sentences: usize,
        #[arg(long, env = BACKEND_URL_ENV, default_value = "stub")]
        backend: String,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value = "conll03")]
        task: String,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 1)]
        jobs: usize,
    },
    /// Self-BLEU and novel entity report.
    Metrics {
        /// Synthetic instances or records, JSONL.
        #[arg(long)]
        syn: PathBuf,
        /// Training records, JSONL.
        #[arg(long)]
        train: PathBuf,
        /// Task for flat training lines without one.
        #[arg(long)]
        task: Option<String>,
        #[arg(long, default_value_t = DEFAULT_SAMPLE_SIZE)]
        sample_size: usize,
        #[arg(long, default_value_t = DEFAULT_MAX_NGRAM)]
        max_ngram: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Print the rendered input and target for one record.
    Preview {
        /// File holding one record line.
        #[arg(long)]
        record: PathBuf,
        /// Comma-separated value indices to mask; sampled when absent.
        #[arg(long, value_delimiter = ',')]
        mask: Option<Vec<usize>>,
        /// JSONL demonstration records.
        #[arg(long)]
        demos: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 512)]
        max_tokens: usize,
        /// Print the pair as JSON.
        #[arg(long)]
        json: bool,
    },
    /// Serve the stub backend over HTTP.
    ServeStub {
        #[arg(long, default_value = "127.0.0.1:8080")]
        addr: String,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 4)]
        workers: usize,
    },
}

#[derive(Debug)]
struct Failure {
    code: u8,
    message: String,
}

impl Failure {
    fn new(code: u8, message: impl fmt::Display) -> Self {
        Self {
            code,
            message: message.to_string(),
        }
    }
}

type Result<T> = std::result::Result<T, Failure>;

fn backend_code(e: &BackendError) -> u8 {
    if e.is_unreachable() {
        EXIT_UNREACHABLE
    } else {
        EXIT_FAILURE
    }
}

impl From<CorpusError> for Failure {
    fn from(e: CorpusError) -> Self {
        let code = match &e {
            CorpusError::Io { .. } => EXIT_IO,
            CorpusError::EmptyCorpus | CorpusError::NoRecords => EXIT_EMPTY,
            _ => EXIT_CONFIG,
        };
        Failure::new(code, e)
    }
}

impl From<PipelineError> for Failure {
    fn from(e: PipelineError) -> Self {
        let code = match &e {
            PipelineError::Io(_) => EXIT_IO,
            PipelineError::Backend(b) => backend_code(b),
            PipelineError::NoCompleteInstances { .. } => EXIT_FAILURE,
            _ => EXIT_CONFIG,
        };
        Failure::new(code, e)
    }
}

impl From<SeqLabelError> for Failure {
    fn from(e: SeqLabelError) -> Self {
        let code = match &e {
            SeqLabelError::Io(_) => EXIT_IO,
            SeqLabelError::Backend(b) => backend_code(b),
            _ => EXIT_CONFIG,
        };
        Failure::new(code, e)
    }
}

impl From<BackendError> for Failure {
    fn from(e: BackendError) -> Self {
        Failure::new(backend_code(&e), e)
    }
}

impl From<RecordError> for Failure {
    fn from(e: RecordError) -> Self {
        Failure::new(EXIT_CONFIG, e)
    }
}

impl From<DenoiseError> for Failure {
    fn from(e: DenoiseError) -> Self {
        Failure::new(EXIT_CONFIG, e)
    }
}

impl From<MetricError> for Failure {
    fn from(e: MetricError) -> Self {
        Failure::new(EXIT_CONFIG, e)
    }
}

fn read_file(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Failure::new(EXIT_IO, format!("{}: {e}", path.display())))
}

fn read_text(path: &Path) -> Result<String> {
    String::from_utf8(read_file(path)?).map_err(|e| Failure::new(EXIT_CONFIG, format!("{}: {e}", path.display())))
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(|e| Failure::new(EXIT_IO, format!("{}: {e}", path.display())))
}

fn create_dir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).map_err(|e| Failure::new(EXIT_IO, format!("{}: {e}", path.display())))
}

fn pretty<T: Serialize>(value: &T) -> Vec<u8> {
    let mut bytes = serde_json::to_vec_pretty(value).expect("serializable");
    bytes.push(b'\n');
    bytes
}

fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Builds the backend and fails fast when it cannot be reached.
fn connect(spec: &str) -> Result<Box<dyn Backend>> {
    let probe_config = HttpConfig {
        retry: RetryPolicy::none(),
        ..HttpConfig::default()
    };
    let probe = from_spec(spec, probe_config).map_err(|e| Failure::new(EXIT_CONFIG, e))?;
    probe
        .health()
        .map_err(|e| Failure::new(backend_code(&e), format!("backend {spec}: {e}")))?;
    Ok(from_spec(spec, HttpConfig::default())?)
}

fn cmd_build_corpus(config: &Path, out: &Path, seed: Option<u64>, jobs: usize) -> Result<()> {
    if !config.is_file() {
        return Err(Failure::new(EXIT_CONFIG, format!("config not found: {}", config.display())));
    }
    let mut resolved = CorpusConfig::load(config)?;
    if let Some(seed) = seed {
        resolved.mixture.seed = seed;
        resolved.raw.mixture.seed = seed;
    }
    let manifest = build_corpus(&resolved, out, jobs)?;
    log::info!(
        "{} pairs in {} shards, {} dropped by the leakage filter",
        manifest.total,
        manifest.shards.len(),
        manifest.leakage.dropped
    );
    Ok(())
}

fn load_pipeline(arg: &str) -> Result<TaskPipeline> {
    if let Some(p) = shipped(arg) {
        return Ok(p);
    }
    let path = Path::new(arg);
    if !path.is_file() {
        return Err(Failure::new(EXIT_CONFIG, format!("no shipped pipeline or file named {arg:?}")));
    }
    Ok(TaskPipeline::from_json(&read_text(path)?)?)
}

#[allow(clippy::too_many_arguments)]
fn cmd_augment(
    pipeline: &str,
    train: &Path,
    n: usize,
    backend: &str,
    demo_count: Option<usize>,
    seed: u64,
    out: &Path,
    jobs: usize,
    log_prompts: bool,
) -> Result<()> {
    let pipeline = load_pipeline(pipeline)?;
    pipeline.validate()?;
    let train = read_train_data(train, &pipeline.task)?;
    let backend = connect(backend)?;
    let opts = RunOptions {
        n_target: n,
        seed,
        demo_count,
        jobs,
        log_prompts,
        ..RunOptions::default()
    };
    let output = run_pipeline(&pipeline, &train, backend.as_ref(), &opts)?;
    create_dir(out)?;
    write_file(&out.join("instances.jsonl"), &output.instances_jsonl())?;
    if log_prompts {
        write_file(&out.join("prompts.jsonl"), &output.prompt_log_jsonl())?;
    }
    write_file(&out.join("run-manifest.json"), &output.manifest.to_bytes())?;
    if output.manifest.shortfall > 0 {
        log::warn!(
            "{} of {} instances complete",
            output.manifest.complete,
            output.manifest.n_target
        );
    }
    Ok(())
}

#[derive(Serialize)]
struct SeqLabelManifest<'a> {
    tool_version: &'a str,
    train_sha256: String,
    backend: String,
    config: &'a SelfTrainConfig,
    generation: &'a GenerationStats,
    rounds_completed: usize,
    round_manifests_sha256: Vec<String>,
    failure: &'a Option<String>,
}

#[allow(clippy::too_many_arguments)]
fn cmd_seqlabel(
    train: &Path,
    rounds: usize,
    n_sentences: usize,
    backend: &str,
    seed: u64,
    task: &str,
    out: &Path,
    jobs: usize,
) -> Result<()> {
    if rounds == 0 {
        return Err(SeqLabelError::InvalidRounds.into());
    }
    let train_bytes = read_file(train)?;
    let seed_data = conll::read_path(train)?;
    let backend = connect(backend)?;
    let config = SelfTrainConfig {
        task: task.to_string(),
        rounds,
        n_sentences,
        seed,
        jobs,
        ..SelfTrainConfig::default()
    };
    let state = iterate_selftrain(&seed_data, backend.as_ref(), &config)?;
    create_dir(out)?;
    write_file(&out.join("sentences.jsonl"), &sentences_jsonl(&state.sentences))?;
    let mut hashes = Vec::new();
    for round in &state.rounds {
        let r = round.manifest.round;
        write_file(&out.join(format!("annotations-r{r}.jsonl")), &round.annotations_jsonl())?;
        write_file(&out.join(format!("manifest-r{r}.json")), &round.manifest.to_bytes())?;
        hashes.push(round.manifest.sha256());
    }
    let manifest = SeqLabelManifest {
        tool_version: env!("CARGO_PKG_VERSION"),
        train_sha256: sha256_hex(&train_bytes),
        backend: backend.id(),
        config: &config,
        generation: &state.generation,
        rounds_completed: state.rounds.len(),
        round_manifests_sha256: hashes,
        failure: &state.failure,
    };
    write_file(&out.join("manifest.json"), &pretty(&manifest))?;
    match &state.failure {
        Some(f) => Err(Failure::new(EXIT_FAILURE, f)),
        None => Ok(()),
    }
}

/// Texts per task from JSONL holding records, synthetic instances (filtered
/// ones skipped) or flat objects, which take `default_task`.
fn texts_by_task(path: &Path, default_task: Option<&str>) -> Result<BTreeMap<String, Vec<String>>> {
    let text = read_text(path)?;
    let mut out: BTreeMap<String, Vec<String>> = BTreeMap::new();
    for (i, line) in text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
        let bad = |m: String| Failure::new(EXIT_CONFIG, format!("{}:{}: {m}", path.display(), i + 1));
        let mut value: Value = serde_json::from_str(line).map_err(|e| bad(e.to_string()))?;
        if value.get("record").is_some() {
            if value.get("filtered").and_then(Value::as_bool) == Some(true) {
                continue;
            }
            value = value["record"].take();
        }
        let (task, text) = if value.get("pairs").is_some() {
            let rec: KeyValueRecord = serde_json::from_value(value).map_err(|e| bad(e.to_string()))?;
            (rec.task().to_string(), rec.text())
        } else {
            let obj = value.as_object().ok_or_else(|| bad("expected a JSON object".into()))?;
            let task = default_task.ok_or_else(|| bad("flat line needs --task".into()))?;
            let values: Vec<&str> = obj.values().filter_map(Value::as_str).collect();
            (task.to_string(), values.join(" "))
        };
        out.entry(task).or_default().push(text);
    }
    Ok(out)
}

#[derive(Serialize)]
struct MetricsManifest {
    tool_version: &'static str,
    syn_sha256: String,
    train_sha256: String,
    report_sha256: String,
}

fn cmd_metrics(syn: &Path, train: &Path, task: Option<&str>, config: ReportConfig, out: &Path) -> Result<()> {
    let synthetic = texts_by_task(syn, task)?;
    let only = (synthetic.len() == 1).then(|| synthetic.keys().next().unwrap().clone());
    let training = texts_by_task(train, task.or(only.as_deref()))?;
    let report = metric_report(&synthetic, &training, &CapitalizedRuns, &config)?;
    let bytes = pretty(&report);
    create_dir(out)?;
    write_file(&out.join("report.json"), &bytes)?;
    let manifest = MetricsManifest {
        tool_version: env!("CARGO_PKG_VERSION"),
        syn_sha256: sha256_hex(&read_file(syn)?),
        train_sha256: sha256_hex(&read_file(train)?),
        report_sha256: sha256_hex(&bytes),
    };
    write_file(&out.join("manifest.json"), &pretty(&manifest))?;
    Ok(())
}

fn parse_record_lines(path: &Path) -> Result<Vec<KeyValueRecord>> {
    read_text(path)?
        .lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str(l)
                .map_err(|e| Failure::new(EXIT_CONFIG, format!("{}:{}: {e}", path.display(), i + 1)))
        })
        .collect()
}

fn cmd_preview(
    record: &Path,
    mask: Option<Vec<usize>>,
    demos: Option<&Path>,
    seed: u64,
    max_tokens: usize,
    json: bool,
) -> Result<()> {
    let mut records = parse_record_lines(record)?;
    if records.len() != 1 {
        return Err(Failure::new(
            EXIT_CONFIG,
            format!("{}: expected one record, found {}", record.display(), records.len()),
        ));
    }
    let record = records.remove(0);
    let schema = TaskSchema::infer(&record);
    let demos = match demos {
        Some(p) => parse_record_lines(p)?,
        None => Vec::new(),
    };
    let pair = match mask {
        Some(mask) => {
            let mask: BTreeSet<usize> = mask.into_iter().collect();
            render_record(&schema, &record, &mask, &demos)?
        }
        None => {
            let budget = TokenBudget::new(max_tokens)?;
            make_training_example(&record, &schema, &demos, &budget, &mut seed::rng(seed))?
        }
    };
    if json {
        print!("{}", String::from_utf8(pretty(&pair)).expect("utf-8"));
    } else {
        println!("{}", pair.input_text);
        println!("{}", pair.target_text);
    }
    Ok(())
}

fn cmd_serve_stub(addr: &str, seed: u64, workers: usize) -> Result<()> {
    let server = BackendServer::start(Arc::new(StubBackend::new(seed)), addr, workers)
        .map_err(|e| Failure::new(EXIT_IO, format!("{addr}: {e}")))?;
    println!("{}", server.url());
    server.join();
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::BuildCorpus {
            config,
            out,
            seed,
            jobs,
        } => cmd_build_corpus(&config, &out, seed, jobs),
        Command::Augment {
            pipeline,
            train,
            n,
            backend,
            demo_count,
            seed,
            out,
            jobs,
            log_prompts,
        } => cmd_augment(&pipeline, &train, n, &backend, demo_count, seed, &out, jobs, log_prompts),
        Command::Seqlabel {
            train,
            rounds,
            n_sentences,
            backend,
            seed,
            task,
            out,
            jobs,
        } => cmd_seqlabel(&train, rounds, n_sentences, &backend, seed, &task, &out, jobs),
        Command::Metrics {
            syn,
            train,
            task,
            sample_size,
            max_ngram,
            seed,
            out,
        } => cmd_metrics(
            &syn,
            &train,
            task.as_deref(),
            ReportConfig {
                sample_size,
                max_ngram,
                seed,
            },
            &out,
        ),
        Command::Preview {
            record,
            mask,
            demos,
            seed,
            max_tokens,
            json,
        } => cmd_preview(&record, mask, demos.as_deref(), seed, max_tokens, json),
        Command::ServeStub { addr, seed, workers } => cmd_serve_stub(&addr, seed, workers),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}
