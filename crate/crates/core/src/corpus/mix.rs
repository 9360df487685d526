use rand::Rng as _;

use super::{ingest, CorpusError, DatasetSource, Ingest, MixtureConfig};
use crate::record::KeyValueRecord;
use crate::seed::{derive_rng, Rng};

const CAP_STREAM: u64 = 11;
const MIX_STREAM: u64 = 12;

/// Selection sampling: streams `size` items and keeps exactly `keep` of them,
/// every `keep`-subset being equally likely.
struct Capped {
    inner: Ingest,
    rng: Rng,
    keep: usize,
    left: usize,
    position: usize,
}

impl Capped {
    fn next(&mut self) -> Option<Result<(usize, KeyValueRecord), CorpusError>> {
        while self.keep > 0 {
            let rec = match self.inner.next()? {
                Ok(r) => r,
                Err(e) => return Some(Err(e)),
            };
            let position = self.position;
            self.position += 1;
            let take = self.left == 0 || self.rng.gen_range(0..self.left) < self.keep;
            self.left = self.left.saturating_sub(1);
            if take {
                self.keep -= 1;
                return Some(Ok((position, rec)));
            }
        }
        None
    }
}

/// Record positions a capped source contributes, for inspection and tests.
pub fn cap_indices(size: usize, cap: Option<usize>, seed: u64, source_index: usize) -> Vec<usize> {
    let mut rng = derive_rng(seed, &[CAP_STREAM, source_index as u64]);
    let mut keep = cap.map_or(size, |c| c.min(size));
    let mut out = Vec::with_capacity(keep);
    for (i, left) in (1..=size).rev().enumerate() {
        if keep == 0 {
            break;
        }
        if rng.gen_range(0..left) < keep {
            out.push(i);
            keep -= 1;
        }
    }
    out
}

/// Per-source contributions and the interleaving stream.
pub struct MixPlan {
    streams: Vec<Capped>,
    remaining: Vec<usize>,
    rng: Rng,
    temperature: f64,
}

impl MixPlan {
    pub fn contributions(sources: &[DatasetSource], cap: Option<usize>) -> Vec<usize> {
        sources
            .iter()
            .map(|s| cap.map_or(s.declared_size, |c| c.min(s.declared_size)))
            .collect()
    }

    fn pick(&mut self) -> Option<usize> {
        let total: usize = self.remaining.iter().sum();
        if total == 0 {
            return None;
        }
        if self.temperature == 1.0 {
            let mut r = self.rng.gen_range(0..total);
            for (i, &n) in self.remaining.iter().enumerate() {
                if r < n {
                    return Some(i);
                }
                r -= n;
            }
            unreachable!("r < total")
        }
        let weights: Vec<f64> = self
            .remaining
            .iter()
            .map(|&n| if n == 0 { 0.0 } else { (n as f64).powf(1.0 / self.temperature) })
            .collect();
        let mut r = self.rng.gen::<f64>() * weights.iter().sum::<f64>();
        let mut last = 0;
        for (i, w) in weights.iter().enumerate() {
            if *w == 0.0 {
                continue;
            }
            last = i;
            if r < *w {
                return Some(i);
            }
            r -= w;
        }
        Some(last)
    }
}

impl Iterator for MixPlan {
    /// `(source index, position in source file, record)`
    type Item = Result<(usize, usize, KeyValueRecord), CorpusError>;

    fn next(&mut self) -> Option<Self::Item> {
        let i = self.pick()?;
        self.remaining[i] -= 1;
        match self.streams[i].next() {
            Some(Ok((pos, rec))) => Some(Ok((i, pos, rec))),
            Some(Err(e)) => Some(Err(e)),
            None => Some(Err(CorpusError::SizeMismatch {
                path: self.streams[i].inner_path(),
                declared: self.streams[i].declared(),
                found: self.streams[i].position,
            })),
        }
    }
}

impl Capped {
    fn inner_path(&self) -> std::path::PathBuf {
        self.inner.path().to_path_buf()
    }

    fn declared(&self) -> usize {
        self.position + self.left
    }
}

/// Interleaves the capped sources. Source `i` contributes
/// `min(declared_size, cap)` records drawn uniformly without replacement;
/// the next record comes from source `i` with probability proportional to
/// its remaining contribution (raised to `1/temperature`).
pub fn apply_cap_and_mix(sources: &[DatasetSource], config: &MixtureConfig) -> Result<MixPlan, CorpusError> {
    if sources.is_empty() {
        return Err(CorpusError::Config("no sources".into()));
    }
    let remaining = MixPlan::contributions(sources, config.cap_per_dataset);
    if remaining.iter().all(|&n| n == 0) {
        return Err(CorpusError::NoRecords);
    }
    let streams = sources
        .iter()
        .zip(&remaining)
        .enumerate()
        .map(|(i, (s, &keep))| {
            Ok(Capped {
                inner: ingest(s)?,
                rng: derive_rng(config.seed, &[CAP_STREAM, i as u64]),
                keep,
                left: s.declared_size,
                position: 0,
            })
        })
        .collect::<Result<_, CorpusError>>()?;
    Ok(MixPlan {
        streams,
        remaining,
        rng: derive_rng(config.seed, &[MIX_STREAM]),
        temperature: config.temperature,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cap_indices_exact_and_uniform() {
        assert_eq!(cap_indices(15, Some(10), 1, 0).len(), 10);
        assert_eq!(cap_indices(5, Some(10), 1, 0), vec![0, 1, 2, 3, 4]);
        assert_eq!(cap_indices(7, None, 1, 0).len(), 7);
        // each of 4 items kept with probability 1/2
        let mut hits = [0usize; 4];
        for seed in 0..4000 {
            for i in cap_indices(4, Some(2), seed, 0) {
                hits[i] += 1;
            }
        }
        for h in hits {
            assert!((h as f64 / 4000.0 - 0.5).abs() < 0.04, "{hits:?}");
        }
    }
}
