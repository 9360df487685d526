use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::Rng as _;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{apply_cap_and_mix, ingest, CorpusConfig, CorpusError, DatasetSource, LeakageFilter, MixPlan, ResolvedConfig};
use crate::denoise::{make_training_example, BudgetConfig, TokenBudget, MAX_DEMO_CANDIDATES};
use crate::record::KeyValueRecord;
use crate::seed::derive_rng;

const DEMO_STREAM: u64 = 13;
const RENDER_STREAM: u64 = 14;

/// Demonstration candidates per task.
pub type DemoIndex = BTreeMap<String, Vec<KeyValueRecord>>;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaskCounts {
    pub task: String,
    pub path: PathBuf,
    pub sha256: String,
    pub declared_size: usize,
    /// `min(declared_size, cap)`: records drawn before leakage filtering.
    pub contributed: usize,
    pub leakage_dropped: usize,
    pub emitted: usize,
    /// Emitted pairs whose masked record alone exceeds the token budget.
    pub truncated: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ShardInfo {
    pub file: String,
    pub lines: usize,
    pub sha256: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LeakageSummary {
    pub enabled: bool,
    pub patterns: usize,
    pub dropped: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorpusManifest {
    pub tool_version: String,
    pub seed: u64,
    pub config_sha256: String,
    pub config: CorpusConfig,
    pub budget: BudgetConfig,
    pub sources: Vec<TaskCounts>,
    pub leakage: LeakageSummary,
    pub total: usize,
    pub shards: Vec<ShardInfo>,
}

#[derive(Serialize)]
struct ShardLine<'a> {
    input: &'a str,
    target: &'a str,
    task: &'a str,
}

/// One pass over every source: checks the declared sizes, hashes the files
/// and reservoir-samples up to 16 non-leaked demonstration candidates per task.
pub fn build_demo_index(
    sources: &[DatasetSource],
    leakage: &LeakageFilter,
    seed: u64,
) -> Result<(DemoIndex, Vec<String>), CorpusError> {
    let mut index: BTreeMap<String, (Vec<KeyValueRecord>, usize)> = BTreeMap::new();
    let mut hashes = Vec::new();
    for (i, source) in sources.iter().enumerate() {
        let mut rng = derive_rng(seed, &[DEMO_STREAM, i as u64]);
        let mut stream = ingest(source)?;
        let mut found = 0;
        for rec in stream.by_ref() {
            let rec = rec?;
            found += 1;
            if leakage.is_leaked(&rec) {
                continue;
            }
            let (pool, seen) = index.entry(source.schema.task.clone()).or_default();
            *seen += 1;
            if pool.len() < MAX_DEMO_CANDIDATES {
                pool.push(rec);
            } else {
                let j = rng.gen_range(0..*seen);
                if j < MAX_DEMO_CANDIDATES {
                    pool[j] = rec;
                }
            }
        }
        if found != source.declared_size {
            return Err(CorpusError::SizeMismatch {
                path: source.path.clone(),
                declared: source.declared_size,
                found,
            });
        }
        hashes.push(stream.sha256());
    }
    Ok((index.into_iter().map(|(k, (pool, _))| (k, pool)).collect(), hashes))
}

fn shard_name(i: usize) -> String {
    format!("shard-{i:05}.jsonl")
}

fn is_shard_name(name: &str) -> bool {
    name.strip_prefix("shard-")
        .and_then(|r| r.strip_suffix(".jsonl"))
        .is_some_and(|d| d.len() >= 5 && d.bytes().all(|b| b.is_ascii_digit()))
}

struct ShardWriter<'a> {
    out_dir: &'a Path,
    written: Vec<ShardInfo>,
}

impl ShardWriter<'_> {
    fn write(&mut self, lines: &[u8], count: usize) -> Result<(), CorpusError> {
        let name = shard_name(self.written.len());
        let path = self.out_dir.join(&name);
        let mut f = fs::File::create(&path).map_err(|e| CorpusError::io(&path, e))?;
        self.written.push(ShardInfo {
            file: name,
            lines: count,
            sha256: hex::encode(Sha256::digest(lines)),
        });
        f.write_all(lines).map_err(|e| CorpusError::io(&path, e))
    }

    fn remove_all(&self) {
        for s in &self.written {
            let _ = fs::remove_file(self.out_dir.join(&s.file));
        }
    }
}

/// Builds the corpus into `out_dir`: `shard-00000.jsonl`, ... with lines
/// `{"input", "target", "task"}` and `manifest.json`. Output bytes depend only
/// on the config, never on `jobs`. Stale shard files in `out_dir` are removed
/// first; shards written by a failed run are removed again.
pub fn build_corpus(config: &ResolvedConfig, out_dir: &Path, jobs: usize) -> Result<CorpusManifest, CorpusError> {
    let mix = &config.mixture;
    let budget = TokenBudget::try_from(&mix.budget)?;
    let seed = mix.seed;
    let (demo_index, hashes) = build_demo_index(&config.sources, &config.leakage, seed)?;
    let stream = apply_cap_and_mix(&config.sources, mix)?;

    fs::create_dir_all(out_dir).map_err(|e| CorpusError::io(out_dir, e))?;
    for entry in fs::read_dir(out_dir).map_err(|e| CorpusError::io(out_dir, e))? {
        let entry = entry.map_err(|e| CorpusError::io(out_dir, e))?;
        if entry.file_name().to_str().is_some_and(is_shard_name) {
            fs::remove_file(entry.path()).map_err(|e| CorpusError::io(&entry.path(), e))?;
        }
    }
    let threads = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs.max(1))
        .build()
        .expect("thread pool");
    let mut writer = ShardWriter {
        out_dir,
        written: Vec::new(),
    };
    let contributions = MixPlan::contributions(&config.sources, mix.cap_per_dataset);
    let mut counts: Vec<TaskCounts> = config
        .sources
        .iter()
        .zip(&config.raw.sources)
        .zip(hashes)
        .zip(&contributions)
        .map(|(((s, raw), sha256), &contributed)| TaskCounts {
            task: s.schema.task.clone(),
            path: raw.path.clone(),
            sha256,
            declared_size: s.declared_size,
            contributed,
            leakage_dropped: 0,
            emitted: 0,
            truncated: 0,
        })
        .collect();

    let result = (|| {
        let mut stream = stream;
        let mut chunk: Vec<(usize, usize, KeyValueRecord)> = Vec::with_capacity(mix.shard_size);
        loop {
            let item = stream.next().transpose()?;
            let done = item.is_none();
            if let Some((src, pos, rec)) = item {
                if config.leakage.is_leaked(&rec) {
                    counts[src].leakage_dropped += 1;
                } else {
                    chunk.push((src, pos, rec));
                }
            }
            if chunk.len() == mix.shard_size || (done && !chunk.is_empty()) {
                let rendered: Vec<_> = threads.install(|| {
                    chunk
                        .par_iter()
                        .map(|(src, pos, rec)| {
                            let source = &config.sources[*src];
                            let pool = demo_index.get(&source.schema.task).map(Vec::as_slice).unwrap_or(&[]);
                            let mut rng = derive_rng(seed, &[RENDER_STREAM, *src as u64, *pos as u64]);
                            make_training_example(rec, &source.schema, pool, &budget, &mut rng)
                        })
                        .collect()
                });
                let mut bytes = Vec::new();
                for ((src, _, _), pair) in chunk.iter().zip(rendered) {
                    let pair = pair?;
                    counts[*src].emitted += 1;
                    counts[*src].truncated += pair.truncated as usize;
                    serde_json::to_writer(
                        &mut bytes,
                        &ShardLine {
                            input: &pair.input_text,
                            target: &pair.target_text,
                            task: &config.sources[*src].schema.task,
                        },
                    )
                    .expect("serializable");
                    bytes.push(b'\n');
                }
                writer.write(&bytes, chunk.len())?;
                chunk.clear();
            }
            if done {
                return Ok(());
            }
        }
    })();
    if let Err(e) = result {
        writer.remove_all();
        return Err(e);
    }

    let total: usize = counts.iter().map(|c| c.emitted).sum();
    if total == 0 {
        return Err(CorpusError::EmptyCorpus);
    }
    let manifest = CorpusManifest {
        tool_version: env!("CARGO_PKG_VERSION").into(),
        seed,
        config_sha256: hex::encode(Sha256::digest(serde_json::to_vec(&config.raw).expect("serializable"))),
        config: config.raw.clone(),
        budget: budget.config(),
        leakage: LeakageSummary {
            enabled: config.leakage.enabled(),
            patterns: config.leakage.pattern_count(),
            dropped: counts.iter().map(|c| c.leakage_dropped).sum(),
        },
        sources: counts,
        total,
        shards: writer.written.clone(),
    };
    let path = out_dir.join("manifest.json");
    let mut bytes = serde_json::to_vec_pretty(&manifest).expect("serializable");
    bytes.push(b'\n');
    if let Err(e) = fs::write(&path, bytes) {
        writer.remove_all();
        return Err(CorpusError::io(&path, e));
    }
    Ok(manifest)
}
