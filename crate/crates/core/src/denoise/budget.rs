use std::fmt;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use super::DenoiseError;

pub const DEFAULT_MAX_TOKENS: usize = 512;

/// Counts tokens in rendered text. Implementations should be additive over
/// single-space joins (`count(a + " " + b) == count(a) + count(b)`) for
/// demonstration packing to be exact; non-additive counters are still safe
/// because the final input is re-counted.
pub trait TokenCounter: Send + Sync {
    fn name(&self) -> &str;
    fn count(&self, text: &str) -> usize;
}

/// Every maximal alphanumeric run is one token, every other non-space
/// character is its own token. An upper-bound proxy for subword counts.
#[derive(Debug, Clone, Copy, Default)]
pub struct WhitespacePunct;

impl TokenCounter for WhitespacePunct {
    fn name(&self) -> &str {
        "whitespace_punct"
    }

    fn count(&self, text: &str) -> usize {
        let mut count = 0;
        let mut in_word = false;
        for c in text.chars() {
            if c.is_alphanumeric() || c == '_' {
                if !in_word {
                    count += 1;
                    in_word = true;
                }
            } else {
                in_word = false;
                if !c.is_whitespace() {
                    count += 1;
                }
            }
        }
        count
    }
}

#[derive(Debug, Clone, Copy, Default)]
pub struct Whitespace;

impl TokenCounter for Whitespace {
    fn name(&self) -> &str {
        "whitespace"
    }

    fn count(&self, text: &str) -> usize {
        text.split_whitespace().count()
    }
}

pub fn counter_by_name(name: &str) -> Option<Arc<dyn TokenCounter>> {
    match name {
        "whitespace_punct" => Some(Arc::new(WhitespacePunct)),
        "whitespace" => Some(Arc::new(Whitespace)),
        _ => None,
    }
}

#[derive(Clone)]
pub struct TokenBudget {
    max_tokens: usize,
    counter: Arc<dyn TokenCounter>,
}

impl TokenBudget {
    pub fn new(max_tokens: usize) -> Result<Self, DenoiseError> {
        Self::with_counter(max_tokens, Arc::new(WhitespacePunct))
    }

    pub fn with_counter(
        max_tokens: usize,
        counter: Arc<dyn TokenCounter>,
    ) -> Result<Self, DenoiseError> {
        if max_tokens == 0 {
            return Err(DenoiseError::InvalidBudget);
        }
        Ok(Self {
            max_tokens,
            counter,
        })
    }

    pub fn max_tokens(&self) -> usize {
        self.max_tokens
    }

    pub fn counter(&self) -> &dyn TokenCounter {
        self.counter.as_ref()
    }

    pub fn count(&self, text: &str) -> usize {
        self.counter.count(text)
    }

    pub fn fits(&self, text: &str) -> bool {
        self.count(text) <= self.max_tokens
    }

    pub fn config(&self) -> BudgetConfig {
        BudgetConfig {
            max_tokens: self.max_tokens,
            counter: self.counter.name().to_string(),
        }
    }
}

impl Default for TokenBudget {
    fn default() -> Self {
        Self {
            max_tokens: DEFAULT_MAX_TOKENS,
            counter: Arc::new(WhitespacePunct),
        }
    }
}

impl fmt::Debug for TokenBudget {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("TokenBudget")
            .field("max_tokens", &self.max_tokens)
            .field("counter", &self.counter.name())
            .finish()
    }
}

/// Serializable form of a [`TokenBudget`].
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BudgetConfig {
    #[serde(default = "default_max_tokens")]
    pub max_tokens: usize,
    #[serde(default = "default_counter")]
    pub counter: String,
}

fn default_max_tokens() -> usize {
    DEFAULT_MAX_TOKENS
}

fn default_counter() -> String {
    "whitespace_punct".into()
}

impl Default for BudgetConfig {
    fn default() -> Self {
        Self {
            max_tokens: DEFAULT_MAX_TOKENS,
            counter: default_counter(),
        }
    }
}

impl TryFrom<&BudgetConfig> for TokenBudget {
    type Error = DenoiseError;

    fn try_from(cfg: &BudgetConfig) -> Result<Self, Self::Error> {
        let counter = counter_by_name(&cfg.counter)
            .ok_or_else(|| DenoiseError::UnknownCounter(cfg.counter.clone()))?;
        TokenBudget::with_counter(cfg.max_tokens, counter)
    }
}
