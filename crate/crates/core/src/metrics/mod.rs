//! Diversity metrics for synthetic corpora: Self-BLEU and Novel Entity.

mod entity;

use std::collections::{BTreeMap, HashMap};

use rand::seq::index::sample;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::seed::derive_rng;

pub use entity::{novel_entity_count, CapitalizedRuns, EntityExtractor};

pub const DEFAULT_MAX_NGRAM: usize = 4;
pub const DEFAULT_SAMPLE_SIZE: usize = 200;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum MetricError {
    #[error("Self-BLEU needs at least 2 samples, got {0}")]
    TooFewSamples(usize),
    #[error("max_ngram must be at least 1")]
    InvalidOrder,
    #[error("no task has at least 2 samples")]
    NoTasks,
}

type Counts<'a> = HashMap<&'a [&'a str], usize>;

fn ngram_counts<'a>(tokens: &'a [&'a str], n: usize) -> Counts<'a> {
    let mut counts = HashMap::new();
    if tokens.len() >= n {
        for g in tokens.windows(n) {
            *counts.entry(g).or_insert(0) += 1;
        }
    }
    counts
}

/// Sentence BLEU of `hyp` against `refs`, in [0, 1].
///
/// Unigram precision is unsmoothed. Orders n >= 2 use add-one smoothing on
/// matched and total counts, and are left out of the geometric mean when the
/// hypothesis has fewer than n tokens. The brevity penalty uses the
/// reference length closest to the hypothesis length (shorter on ties).
pub fn sentence_bleu(hyp: &[&str], refs: &[Vec<&str>], max_ngram: usize) -> f64 {
    if hyp.is_empty() || refs.is_empty() || max_ngram == 0 {
        return 0.0;
    }
    let mut log_sum = 0.0;
    let mut orders = 0;
    for n in 1..=max_ngram.min(hyp.len()) {
        let hyp_counts = ngram_counts(hyp, n);
        let mut max_ref: Counts = HashMap::new();
        for r in refs {
            for (g, c) in ngram_counts(r, n) {
                if hyp_counts.contains_key(g) {
                    let e = max_ref.entry(g).or_insert(0);
                    *e = (*e).max(c);
                }
            }
        }
        let matched: usize = hyp_counts
            .iter()
            .map(|(g, &c)| c.min(max_ref.get(g).copied().unwrap_or(0)))
            .sum();
        let total = hyp.len() + 1 - n;
        let p = if n == 1 {
            if matched == 0 {
                return 0.0;
            }
            matched as f64 / total as f64
        } else {
            (matched + 1) as f64 / (total + 1) as f64
        };
        log_sum += p.ln();
        orders += 1;
    }
    let c = hyp.len();
    let r = refs
        .iter()
        .map(|r| r.len())
        .min_by_key(|&len| (len.abs_diff(c), len))
        .expect("refs non-empty");
    let bp = if c > r { 1.0 } else { (1.0 - r as f64 / c as f64).exp() };
    bp * (log_sum / orders as f64).exp()
}

/// Mean over samples of BLEU(sample i, all other samples), times 100.
pub fn self_bleu<S: AsRef<str> + Sync>(samples: &[S], max_ngram: usize) -> Result<f64, MetricError> {
    if samples.len() < 2 {
        return Err(MetricError::TooFewSamples(samples.len()));
    }
    if max_ngram == 0 {
        return Err(MetricError::InvalidOrder);
    }
    let tokens: Vec<Vec<&str>> = samples
        .iter()
        .map(|s| s.as_ref().split_whitespace().collect())
        .collect();
    let scores: Vec<f64> = (0..tokens.len())
        .into_par_iter()
        .map(|i| {
            let refs: Vec<Vec<&str>> = tokens
                .iter()
                .enumerate()
                .filter(|(j, _)| *j != i)
                .map(|(_, t)| t.clone())
                .collect();
            sentence_bleu(&tokens[i], &refs, max_ngram)
        })
        .collect();
    Ok(100.0 * scores.iter().sum::<f64>() / scores.len() as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskMetrics {
    pub self_bleu: f64,
    pub novel_entity_count: usize,
    /// Samples scored after subsampling.
    pub sample_size: usize,
    pub available: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    /// Unweighted mean over included tasks.
    pub self_bleu: f64,
    pub novel_entity_count: f64,
    pub sample_size: usize,
    pub max_ngram: usize,
    pub seed: u64,
    pub per_task: BTreeMap<String, TaskMetrics>,
    pub excluded: Vec<String>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ReportConfig {
    pub sample_size: usize,
    pub max_ngram: usize,
    pub seed: u64,
}

impl Default for ReportConfig {
    fn default() -> Self {
        Self {
            sample_size: DEFAULT_SAMPLE_SIZE,
            max_ngram: DEFAULT_MAX_NGRAM,
            seed: 0,
        }
    }
}

fn task_stream(task: &str) -> u64 {
    task.bytes()
        .fold(0xcbf2_9ce4_8422_2325u64, |h, b| (h ^ b as u64).wrapping_mul(0x100_0000_01b3))
}

/// Per-task metrics on a seeded subsample of at most `sample_size` items,
/// plus their unweighted mean. Tasks with fewer than 2 samples are skipped.
pub fn metric_report(
    synthetic: &BTreeMap<String, Vec<String>>,
    training: &BTreeMap<String, Vec<String>>,
    extractor: &dyn EntityExtractor,
    config: &ReportConfig,
) -> Result<MetricReport, MetricError> {
    let mut per_task = BTreeMap::new();
    let mut excluded = Vec::new();
    for (task, samples) in synthetic {
        if samples.len() < 2 {
            log::warn!("task {task}: {} samples, excluded from the report", samples.len());
            excluded.push(task.clone());
            continue;
        }
        let picked: Vec<&String> = if samples.len() > config.sample_size {
            let mut rng = derive_rng(config.seed, &[task_stream(task)]);
            let mut ix = sample(&mut rng, samples.len(), config.sample_size).into_vec();
            ix.sort_unstable();
            ix.into_iter().map(|i| &samples[i]).collect()
        } else {
            samples.iter().collect()
        };
        let train = training.get(task).map(Vec::as_slice).unwrap_or(&[]);
        if train.is_empty() {
            log::warn!("task {task}: no training texts, every mention counts as novel");
        }
        let metrics = TaskMetrics {
            self_bleu: self_bleu(&picked, config.max_ngram)?,
            novel_entity_count: novel_entity_count(&picked, train, extractor),
            sample_size: picked.len(),
            available: samples.len(),
        };
        per_task.insert(task.clone(), metrics);
    }
    if per_task.is_empty() {
        return Err(MetricError::NoTasks);
    }
    let k = per_task.len() as f64;
    Ok(MetricReport {
        self_bleu: per_task.values().map(|m| m.self_bleu).sum::<f64>() / k,
        novel_entity_count: per_task.values().map(|m| m.novel_entity_count as f64).sum::<f64>() / k,
        sample_size: config.sample_size,
        max_ngram: config.max_ngram,
        seed: config.seed,
        per_task,
        excluded,
    })
}
