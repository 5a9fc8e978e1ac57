//! Entropy-based structural diagnostics: how concentrated the retrieved
//! context is across sections (Section Entropy) and how well the token
//! allocation matches annotated evidence (Evidence Alignment Cross
//! Entropy), plus token-level evidence F1 for the harness.

use std::collections::BTreeMap;

use thiserror::Error;

use crate::config::LogBase;
use crate::retrieval::RetrievalContext;
use crate::scoring::ScoredSegment;

pub const DEFAULT_EPSILON: f64 = 1e-12;

#[derive(Debug, Error, PartialEq)]
pub enum DiagnosticsError {
    #[error("cannot build a distribution from an empty context")]
    EmptyContext,
    #[error("cannot build a distribution with no positive mass")]
    EmptySupport,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DistributionKind {
    Retrieved,
    GroundTruth,
}

/// Normalized probability mass over section ids. Zero-mass sections are
/// omitted; the remaining masses are positive and sum to 1.
#[derive(Debug, Clone, PartialEq)]
pub struct SectionDistribution {
    pub kind: DistributionKind,
    masses: BTreeMap<usize, f64>,
}

impl SectionDistribution {
    pub fn from_masses(
        kind: DistributionKind,
        raw: BTreeMap<usize, f64>,
    ) -> Result<Self, DiagnosticsError> {
        let total: f64 = raw.values().filter(|m| **m > 0.0).sum();
        if total <= 0.0 || !total.is_finite() {
            return Err(DiagnosticsError::EmptySupport);
        }
        let masses = raw
            .into_iter()
            .filter(|(_, m)| *m > 0.0)
            .map(|(s, m)| (s, m / total))
            .collect();
        Ok(Self { kind, masses })
    }

    pub fn mass(&self, section: usize) -> f64 {
        self.masses.get(&section).copied().unwrap_or(0.0)
    }

    pub fn support(&self) -> impl Iterator<Item = (usize, f64)> + '_ {
        self.masses.iter().map(|(s, m)| (*s, *m))
    }

    pub fn support_len(&self) -> usize {
        self.masses.len()
    }

    /// Maximum absolute per-section difference between two distributions.
    pub fn max_divergence(&self, other: &Self) -> f64 {
        let mut sections: Vec<usize> = self.masses.keys().copied().collect();
        sections.extend(other.masses.keys().copied());
        sections
            .into_iter()
            .map(|s| (self.mass(s) - other.mass(s)).abs())
            .fold(0.0, f64::max)
    }
}

/// Distribution of the retrieved token mass over sections, weighted by
/// segment relevance: mass(s) = sum over selected leaves in s of
/// token_cost * max(score, 0). When every score is non-positive the
/// weighting degrades to plain token fractions with a warning.
pub fn retrieved_distribution(
    ctx: &RetrievalContext,
    scores: &BTreeMap<usize, ScoredSegment>,
) -> Result<SectionDistribution, DiagnosticsError> {
    if ctx.blocks.is_empty() {
        return Err(DiagnosticsError::EmptyContext);
    }
    let mut weighted: BTreeMap<usize, f64> = BTreeMap::new();
    let mut unweighted: BTreeMap<usize, f64> = BTreeMap::new();
    for block in &ctx.blocks {
        let Some(score) = scores.get(&block.order_index) else {
            continue;
        };
        let cost = score.token_cost as f64;
        *weighted.entry(score.section_id).or_insert(0.0) += cost * score.score.max(0.0);
        *unweighted.entry(score.section_id).or_insert(0.0) += cost;
    }
    match SectionDistribution::from_masses(DistributionKind::Retrieved, weighted) {
        Ok(distribution) => Ok(distribution),
        Err(DiagnosticsError::EmptySupport) => {
            log::warn!("all selected scores non-positive; falling back to token fractions");
            SectionDistribution::from_masses(DistributionKind::Retrieved, unweighted)
        }
        Err(e) => Err(e),
    }
}

/// Ground-truth distribution from annotated evidence spans given as
/// (section id, token count) pairs; zero-token spans are omitted.
pub fn ground_truth_distribution(
    evidence_spans: &[(usize, usize)],
) -> Result<SectionDistribution, DiagnosticsError> {
    if evidence_spans.is_empty() {
        return Err(DiagnosticsError::EmptyContext);
    }
    let mut masses: BTreeMap<usize, f64> = BTreeMap::new();
    for (section, tokens) in evidence_spans {
        *masses.entry(*section).or_insert(0.0) += *tokens as f64;
    }
    SectionDistribution::from_masses(DistributionKind::GroundTruth, masses)
}

/// Shannon entropy of the distribution, with 0 * log 0 = 0. Lower
/// values mean the retrieval budget concentrates in fewer sections.
pub fn section_entropy(r: &SectionDistribution, base: LogBase) -> f64 {
    -r.support()
        .map(|(_, m)| if m > 0.0 { m * base.log(m) } else { 0.0 })
        .sum::<f64>()
}

/// Cross entropy of the ground-truth distribution against the retrieved
/// one, with retrieved masses clamped at `epsilon` so the value stays
/// finite where the retrieval placed no mass. Lower values mean tokens
/// went to evidence-bearing sections.
pub fn evidence_alignment_cross_entropy(
    g: &SectionDistribution,
    r: &SectionDistribution,
    epsilon: f64,
    base: LogBase,
) -> f64 {
    assert!(epsilon > 0.0, "epsilon must be positive");
    -g.support()
        .map(|(section, mass)| mass * base.log(r.mass(section).max(epsilon)))
        .sum::<f64>()
}

/// Token-level precision/recall/F1 between two texts, over lowercased
/// whitespace-token multisets.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TokenF1 {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

/// Evidence F1: retrieved context tokens against the union of gold
/// evidence tokens.
pub fn evidence_f1(retrieved_text: &str, gold_spans: &[String]) -> TokenF1 {
    let retrieved = token_counts(retrieved_text);
    let mut gold: BTreeMap<String, usize> = BTreeMap::new();
    for span in gold_spans {
        for (token, count) in token_counts(span) {
            *gold.entry(token).or_insert(0) += count;
        }
    }
    let retrieved_total: usize = retrieved.values().sum();
    let gold_total: usize = gold.values().sum();
    let common: usize = retrieved
        .iter()
        .map(|(token, count)| count.min(gold.get(token).unwrap_or(&0)))
        .sum();
    let precision = if retrieved_total == 0 {
        0.0
    } else {
        common as f64 / retrieved_total as f64
    };
    let recall = if gold_total == 0 {
        0.0
    } else {
        common as f64 / gold_total as f64
    };
    let f1 = if precision + recall == 0.0 {
        0.0
    } else {
        2.0 * precision * recall / (precision + recall)
    };
    TokenF1 {
        precision,
        recall,
        f1,
    }
}

fn token_counts(text: &str) -> BTreeMap<String, usize> {
    let mut counts = BTreeMap::new();
    for token in text.split_whitespace() {
        *counts.entry(token.to_lowercase()).or_insert(0) += 1;
    }
    counts
}
