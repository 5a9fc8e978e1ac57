//! Run configuration shared by indexing, retrieval, and diagnostics.

use thiserror::Error;

use crate::token::TokenCounter;

/// Logarithm base for the entropy diagnostics.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LogBase {
    /// Natural log (nats), the default.
    E,
    /// Base-2 log (bits).
    Two,
}

impl LogBase {
    pub fn log(self, x: f64) -> f64 {
        match self {
            LogBase::E => x.ln(),
            LogBase::Two => x.log2(),
        }
    }
}

#[derive(Debug, Error, PartialEq)]
pub enum ConfigError {
    #[error("{name} must lie in [0, 1], got {value}")]
    WeightOutOfRange { name: &'static str, value: f64 },
    #[error("{name} must be at least {min}, got {value}")]
    TooSmall {
        name: &'static str,
        min: usize,
        value: usize,
    },
}

/// Tunable knobs for the whole pipeline.
///
/// `alpha` through `segment_cap` default to the reference configuration
/// of the method; the remaining fields are implementation choices and
/// documented as such on the CLI.
#[derive(Debug, Clone)]
pub struct RunConfig {
    /// Section-level fusion weight between semantic alignment and
    /// embedding similarity.
    pub alpha: f64,
    /// Segment-level fusion weight between raw-text and summary
    /// similarity channels.
    pub beta: f64,
    /// Number of candidate sections retained as retrieval scope (B).
    pub sections: usize,
    /// Number of root-to-leaf paths kept by density ranking (P).
    pub paths: usize,
    /// Maximum reasoning hops for multi-hop decomposition (H).
    pub hops: usize,
    /// Confidence floor for keeping extracted entities.
    pub entity_threshold: f64,
    /// Per-segment token cap (M).
    pub segment_cap: usize,
    /// Retrieval token budget per query.
    pub budget: usize,
    /// Token cap on generated summaries.
    pub summary_cap: usize,
    /// Confidence gate below which outline inference falls back to rules.
    pub confidence_threshold: f64,
    /// Whether summaries count against the retrieval budget.
    pub include_summary_cost: bool,
    /// Enable cross-encoder reranking of top-scored segments.
    pub rerank: bool,
    /// How many top segments the reranker rescored when enabled.
    pub rerank_top_k: usize,
    /// Log base for the entropy diagnostics.
    pub log_base: LogBase,
    /// Token counter every budget is interpreted under.
    pub counter: TokenCounter,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            alpha: 0.5,
            beta: 0.8,
            sections: 2,
            paths: 3,
            hops: 3,
            entity_threshold: 0.5,
            segment_cap: 512,
            budget: 2048,
            summary_cap: 128,
            confidence_threshold: 0.6,
            include_summary_cost: false,
            rerank: false,
            rerank_top_k: 10,
            log_base: LogBase::E,
            counter: TokenCounter::whitespace(),
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<(), ConfigError> {
        for (name, value) in [
            ("alpha", self.alpha),
            ("beta", self.beta),
            ("entity_threshold", self.entity_threshold),
            ("confidence_threshold", self.confidence_threshold),
        ] {
            if !(0.0..=1.0).contains(&value) || value.is_nan() {
                return Err(ConfigError::WeightOutOfRange { name, value });
            }
        }
        for (name, min, value) in [
            ("sections", 1, self.sections),
            ("paths", 1, self.paths),
            ("hops", 1, self.hops),
            ("segment_cap", 16, self.segment_cap),
            ("budget", 1, self.budget),
            ("summary_cap", 1, self.summary_cap),
        ] {
            if value < min {
                return Err(ConfigError::TooSmall { name, min, value });
            }
        }
        Ok(())
    }
}
