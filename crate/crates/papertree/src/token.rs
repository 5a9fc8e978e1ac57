//! Pluggable token counting.
//!
//! Budgets in this crate (segment cap, retrieval budget, summary cap)
//! are all interpreted under one configured counter. The default counts
//! whitespace-delimited words; a subword counter can be swapped in
//! without touching any other module.

use std::fmt;
use std::sync::Arc;

/// A shareable token-counting function.
#[derive(Clone)]
pub struct TokenCounter {
    name: &'static str,
    count: Arc<dyn Fn(&str) -> usize + Send + Sync>,
}

impl TokenCounter {
    pub fn new(name: &'static str, count: impl Fn(&str) -> usize + Send + Sync + 'static) -> Self {
        Self {
            name,
            count: Arc::new(count),
        }
    }

    /// Whitespace-delimited word counting.
    pub fn whitespace() -> Self {
        Self::new("whitespace", |text| text.split_whitespace().count())
    }

    pub fn count(&self, text: &str) -> usize {
        (self.count)(text)
    }

    pub fn name(&self) -> &'static str {
        self.name
    }
}

impl Default for TokenCounter {
    fn default() -> Self {
        Self::whitespace()
    }
}

impl fmt::Debug for TokenCounter {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("TokenCounter")
            .field("name", &self.name)
            .finish()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn whitespace_counts_words() {
        let counter = TokenCounter::whitespace();
        assert_eq!(counter.count(""), 0);
        assert_eq!(counter.count("   "), 0);
        assert_eq!(counter.count("one two  three\nfour"), 4);
    }

    #[test]
    fn custom_counter_is_used() {
        let counter = TokenCounter::new("chars", |s| s.chars().count());
        assert_eq!(counter.count("abc"), 3);
        assert_eq!(counter.name(), "chars");
    }
}
