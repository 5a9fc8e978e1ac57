//! Query trace records for the evaluation harness: one JSON object per
//! line, appended per query, carrying everything the entropy and
//! evidence-F1 metrics need.

use std::fs::OpenOptions;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::config::LogBase;
use crate::diagnostics::{
    evidence_alignment_cross_entropy, evidence_f1, ground_truth_distribution, section_entropy,
    DiagnosticsError, DistributionKind, SectionDistribution,
};
use crate::par;
use crate::retrieval::RetrievalOutcome;

#[derive(Debug, Error)]
pub enum TraceError {
    #[error("cannot {action} {path}: {source}")]
    Io {
        action: &'static str,
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("bad trace record on line {line}: {message}")]
    Malformed { line: usize, message: String },
    #[error("no records")]
    Empty,
    #[error("record {query_id}: {source}")]
    Diagnostics {
        query_id: String,
        #[source]
        source: DiagnosticsError,
    },
}

/// Per-leaf scoring facts for one selected leaf.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceLeaf {
    pub section_id: usize,
    pub token_cost: usize,
    pub score: f64,
}

/// One annotated evidence span, optionally carrying its text for
/// token-level F1.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GoldSpan {
    pub section_id: usize,
    pub token_count: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub text: Option<String>,
}

/// One query's retrieval trace.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceRecord {
    pub query_id: String,
    pub query: String,
    /// Selected leaf ids in document order.
    pub selected: Vec<String>,
    /// Per-leaf (section, cost, score) aligned with `selected`.
    pub leaves: Vec<TraceLeaf>,
    #[serde(default)]
    pub gold_spans: Vec<GoldSpan>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gold_answer: Option<String>,
    /// Assembled context text, used for evidence F1.
    pub retrieved_text: String,
}

impl TraceRecord {
    pub fn from_outcome(
        query_id: impl Into<String>,
        query: impl Into<String>,
        outcome: &RetrievalOutcome,
        rendered: &str,
    ) -> Self {
        let leaves = outcome
            .context
            .blocks
            .iter()
            .map(
                |block| match outcome.segment_scores.get(&block.order_index) {
                    Some(s) => TraceLeaf {
                        section_id: s.section_id,
                        token_cost: s.token_cost,
                        score: s.score,
                    },
                    None => TraceLeaf {
                        section_id: 0,
                        token_cost: 0,
                        score: 0.0,
                    },
                },
            )
            .collect();
        Self {
            query_id: query_id.into(),
            query: query.into(),
            selected: outcome.context.selected.clone(),
            leaves,
            gold_spans: Vec::new(),
            gold_answer: None,
            retrieved_text: rendered.to_string(),
        }
    }
}

/// Append one record as a JSON line.
pub fn append_record(path: &Path, record: &TraceRecord) -> Result<(), TraceError> {
    let mut file = OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)
        .map_err(|source| TraceError::Io {
            action: "open",
            path: path.display().to_string(),
            source,
        })?;
    let line = serde_json::to_string(record).expect("trace record serializes");
    writeln!(file, "{line}").map_err(|source| TraceError::Io {
        action: "write",
        path: path.display().to_string(),
        source,
    })
}

pub fn read_trace(path: &Path) -> Result<Vec<TraceRecord>, TraceError> {
    let text = std::fs::read_to_string(path).map_err(|source| TraceError::Io {
        action: "read",
        path: path.display().to_string(),
        source,
    })?;
    let mut records = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let record = serde_json::from_str(line).map_err(|e| TraceError::Malformed {
            line: i + 1,
            message: e.to_string(),
        })?;
        records.push(record);
    }
    Ok(records)
}

/// Metrics for one trace record. EACE and F1 are present only when the
/// record carries gold annotations (spans, and span texts respectively).
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct QueryMetrics {
    pub query_id: String,
    pub section_entropy: f64,
    pub eace: Option<f64>,
    pub evidence_f1: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TraceReport {
    pub per_query: Vec<QueryMetrics>,
    pub mean_section_entropy: f64,
    pub mean_eace: Option<f64>,
    pub mean_evidence_f1: Option<f64>,
}

/// Evaluate every record: retrieved distribution from the per-leaf
/// facts, SE always, EACE and F1 where gold annotations exist.
pub fn evaluate_trace(
    records: &[TraceRecord],
    epsilon: f64,
    base: LogBase,
) -> Result<TraceReport, TraceError> {
    if records.is_empty() {
        return Err(TraceError::Empty);
    }
    let results = par::map_ordered(records, |record| evaluate_record(record, epsilon, base));
    let mut per_query = Vec::with_capacity(results.len());
    for result in results {
        per_query.push(result?);
    }
    let mean_section_entropy =
        per_query.iter().map(|m| m.section_entropy).sum::<f64>() / per_query.len() as f64;
    let eaces: Vec<f64> = per_query.iter().filter_map(|m| m.eace).collect();
    let f1s: Vec<f64> = per_query.iter().filter_map(|m| m.evidence_f1).collect();
    Ok(TraceReport {
        mean_section_entropy,
        mean_eace: mean_of(&eaces),
        mean_evidence_f1: mean_of(&f1s),
        per_query,
    })
}

fn mean_of(values: &[f64]) -> Option<f64> {
    if values.is_empty() {
        None
    } else {
        Some(values.iter().sum::<f64>() / values.len() as f64)
    }
}

fn evaluate_record(
    record: &TraceRecord,
    epsilon: f64,
    base: LogBase,
) -> Result<QueryMetrics, TraceError> {
    let wrap = |source| TraceError::Diagnostics {
        query_id: record.query_id.clone(),
        source,
    };
    // Rebuild the retrieved distribution straight from the per-leaf
    // facts: mass(s) = sum of cost * max(score, 0).
    let mut weighted = std::collections::BTreeMap::new();
    let mut unweighted = std::collections::BTreeMap::new();
    for leaf in &record.leaves {
        *weighted.entry(leaf.section_id).or_insert(0.0) +=
            leaf.token_cost as f64 * leaf.score.max(0.0);
        *unweighted.entry(leaf.section_id).or_insert(0.0) += leaf.token_cost as f64;
    }
    let retrieved = SectionDistribution::from_masses(DistributionKind::Retrieved, weighted)
        .or_else(|_| SectionDistribution::from_masses(DistributionKind::Retrieved, unweighted))
        .map_err(wrap)?;

    let se = section_entropy(&retrieved, base);
    let eace = if record.gold_spans.is_empty() {
        None
    } else {
        let spans: Vec<(usize, usize)> = record
            .gold_spans
            .iter()
            .map(|s| (s.section_id, s.token_count))
            .collect();
        let gold = ground_truth_distribution(&spans).map_err(wrap)?;
        Some(evidence_alignment_cross_entropy(
            &gold, &retrieved, epsilon, base,
        ))
    };
    let gold_texts: Vec<String> = record
        .gold_spans
        .iter()
        .filter_map(|s| s.text.clone())
        .collect();
    let f1 = if gold_texts.is_empty() {
        None
    } else {
        Some(evidence_f1(&record.retrieved_text, &gold_texts).f1)
    };
    Ok(QueryMetrics {
        query_id: record.query_id.clone(),
        section_entropy: se,
        eace,
        evidence_f1: f1,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn record(query_id: &str, leaves: Vec<TraceLeaf>, gold: Vec<GoldSpan>) -> TraceRecord {
        TraceRecord {
            query_id: query_id.into(),
            query: "q".into(),
            selected: (0..leaves.len()).map(|i| format!("l{i}")).collect(),
            leaves,
            gold_spans: gold,
            gold_answer: None,
            retrieved_text: "alpha beta".into(),
        }
    }

    #[test]
    fn round_trip_jsonl() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("trace.jsonl");
        let a = record(
            "q1",
            vec![TraceLeaf {
                section_id: 1,
                token_cost: 10,
                score: 0.5,
            }],
            vec![],
        );
        let b = record(
            "q2",
            vec![TraceLeaf {
                section_id: 2,
                token_cost: 5,
                score: 0.1,
            }],
            vec![],
        );
        append_record(&path, &a).unwrap();
        append_record(&path, &b).unwrap();
        let read = read_trace(&path).unwrap();
        assert_eq!(read, vec![a, b]);
    }

    #[test]
    fn malformed_line_is_reported_with_number() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("trace.jsonl");
        std::fs::write(&path, "{\"query_id\": \"q\"\n").unwrap();
        match read_trace(&path) {
            Err(TraceError::Malformed { line: 1, .. }) => {}
            other => panic!("unexpected: {other:?}"),
        }
    }

    #[test]
    fn evaluate_empty_trace_errors() {
        assert!(matches!(
            evaluate_trace(&[], 1e-12, LogBase::E),
            Err(TraceError::Empty)
        ));
    }

    #[test]
    fn evaluate_single_section_entropy_zero() {
        let records = vec![record(
            "q1",
            vec![TraceLeaf {
                section_id: 1,
                token_cost: 10,
                score: 0.9,
            }],
            vec![],
        )];
        let report = evaluate_trace(&records, 1e-12, LogBase::E).unwrap();
        assert_eq!(report.per_query[0].section_entropy, 0.0);
        assert!(report.per_query[0].eace.is_none());
    }

    #[test]
    fn evaluate_hand_computed_fixture() {
        // Retrieved mass: A: 100 * 0.8 = 80, B: 100 * 0.2 = 20 -> (0.8, 0.2).
        // Gold: all evidence in A.
        let records = vec![record(
            "q1",
            vec![
                TraceLeaf {
                    section_id: 1,
                    token_cost: 100,
                    score: 0.8,
                },
                TraceLeaf {
                    section_id: 2,
                    token_cost: 100,
                    score: 0.2,
                },
            ],
            vec![GoldSpan {
                section_id: 1,
                token_count: 30,
                text: Some("alpha beta".into()),
            }],
        )];
        let report = evaluate_trace(&records, 1e-12, LogBase::E).unwrap();
        let metrics = &report.per_query[0];
        assert!((metrics.section_entropy - 0.5004024).abs() < 1e-6);
        // EACE = -ln 0.8
        assert!((metrics.eace.unwrap() - (-(0.8f64).ln())).abs() < 1e-9);
        // Retrieved text equals the gold span text.
        assert!((metrics.evidence_f1.unwrap() - 1.0).abs() < 1e-12);
        assert!((report.mean_section_entropy - metrics.section_entropy).abs() < 1e-12);
    }
}
