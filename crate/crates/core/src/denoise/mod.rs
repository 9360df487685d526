//! Construction of denoising training examples.
//!
//! For a record with `n` pairs, the number of masked values `K` is drawn
//! uniformly from `1..=n` and the masked positions are a uniform `K`-subset.
//! Up to 16 same-task candidates are shuffled; `m` is the longest prefix of
//! them that fits in the token budget next to the masked record, and the
//! number of demonstrations actually prepended is uniform on `0..=m`.

mod budget;

use std::collections::BTreeSet;

use rand::seq::{index, SliceRandom};
use rand::Rng;
use thiserror::Error;

use crate::record::{render_record, KeyValueRecord, RecordError, RenderedPair, TaskSchema};

pub use budget::{
    counter_by_name, BudgetConfig, TokenBudget, TokenCounter, Whitespace, WhitespacePunct,
    DEFAULT_MAX_TOKENS,
};

/// Most demonstration candidates considered per example.
pub const MAX_DEMO_CANDIDATES: usize = 16;

#[derive(Debug, Error)]
pub enum DenoiseError {
    #[error("cannot mask an empty record")]
    EmptyRecord,
    #[error("{0} demonstration candidates given, at most {MAX_DEMO_CANDIDATES} allowed")]
    TooManyCandidates(usize),
    #[error("token budget must be positive")]
    InvalidBudget,
    #[error("unknown token counter `{0}`")]
    UnknownCounter(String),
    #[error(transparent)]
    Record(#[from] RecordError),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MaskPlan {
    pub n: usize,
    pub k: usize,
    pub indices: BTreeSet<usize>,
}

/// Draws `K ~ U{1..n}` and a uniform `K`-subset of `0..n`.
pub fn sample_mask<R: Rng + ?Sized>(n: usize, rng: &mut R) -> Result<MaskPlan, DenoiseError> {
    if n == 0 {
        return Err(DenoiseError::EmptyRecord);
    }
    let k = rng.gen_range(1..=n);
    let indices = index::sample(rng, n, k).into_iter().collect();
    Ok(MaskPlan { n, k, indices })
}

#[derive(Debug, Clone)]
pub struct DemoPlan {
    /// Candidates in shuffled order.
    pub candidates: Vec<KeyValueRecord>,
    /// `prefix_tokens[j]` is the input size with the first `j` candidates
    /// prepended; `prefix_tokens[0]` is the masked record alone.
    pub prefix_tokens: Vec<usize>,
    /// Longest prefix that fits the budget.
    pub max_fit: usize,
    /// Number of demonstrations chosen, uniform on `0..=max_fit`.
    pub selected: usize,
    pub budget_tokens: usize,
}

impl DemoPlan {
    pub fn demonstrations(&self) -> &[KeyValueRecord] {
        &self.candidates[..self.selected]
    }
}

fn demo_block(demo: &KeyValueRecord) -> String {
    let mut parts = vec!["[Example]".to_string()];
    for p in demo.pairs() {
        parts.push(format!("[{}]", p.key.name));
        parts.push(p.value.text.clone());
    }
    parts.join(" ")
}

/// Shuffles `candidates`, finds the longest prefix fitting next to a masked
/// record of `base_tokens`, and picks how many of them to use.
pub fn pack_demonstrations<R: Rng + ?Sized>(
    schema: &TaskSchema,
    candidates: &[KeyValueRecord],
    base_tokens: usize,
    budget: &TokenBudget,
    rng: &mut R,
) -> Result<DemoPlan, DenoiseError> {
    if candidates.len() > MAX_DEMO_CANDIDATES {
        return Err(DenoiseError::TooManyCandidates(candidates.len()));
    }
    let mut shuffled = candidates
        .iter()
        .map(|c| schema.canonicalize(c))
        .collect::<Result<Vec<_>, _>>()?;
    shuffled.shuffle(rng);

    let header = budget.count(&format!("[Task] {}", schema.task));
    let mut prefix_tokens = Vec::with_capacity(shuffled.len() + 1);
    prefix_tokens.push(base_tokens);
    let mut total = base_tokens + header;
    for demo in &shuffled {
        total += budget.count(&demo_block(demo));
        prefix_tokens.push(total);
    }
    let max_fit = prefix_tokens
        .iter()
        .take_while(|&&t| t <= budget.max_tokens())
        .count()
        .saturating_sub(1);
    let selected = rng.gen_range(0..=max_fit);

    Ok(DemoPlan {
        candidates: shuffled,
        prefix_tokens,
        max_fit,
        selected,
        budget_tokens: budget.max_tokens(),
    })
}

/// Masks `record`, packs demonstrations drawn from `demo_pool` and renders
/// the training pair. Records that exceed the budget on their own are
/// emitted without demonstrations and with `truncated` set.
pub fn make_training_example<R: Rng + ?Sized>(
    record: &KeyValueRecord,
    schema: &TaskSchema,
    demo_pool: &[KeyValueRecord],
    budget: &TokenBudget,
    rng: &mut R,
) -> Result<RenderedPair, DenoiseError> {
    let record = schema.canonicalize(record)?;
    let mask = sample_mask(record.len(), rng)?;
    let base = render_record(schema, &record, &mask.indices, &[])?;
    let base_tokens = budget.count(&base.input_text);
    if base_tokens > budget.max_tokens() {
        return Ok(RenderedPair {
            truncated: true,
            ..base
        });
    }

    let others: Vec<&KeyValueRecord> = demo_pool.iter().filter(|d| **d != record).collect();
    let take = others.len().min(MAX_DEMO_CANDIDATES);
    let candidates: Vec<KeyValueRecord> = index::sample(rng, others.len(), take)
        .into_iter()
        .map(|i| others[i].clone())
        .collect();
    let plan = pack_demonstrations(schema, &candidates, base_tokens, budget, rng)?;

    let mut used = plan.selected;
    loop {
        let pair = render_record(schema, &record, &mask.indices, &plan.candidates[..used])?;
        if used == 0 || budget.fits(&pair.input_text) {
            return Ok(pair);
        }
        used -= 1;
    }
}
