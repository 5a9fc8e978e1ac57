//! Library-level integration: the whole flow from Markdown to a trace
//! report through persisted indexes, under the offline stubs.

use papertree::backends::stub::FailingReranker;
use papertree::backends::Backends;
use papertree::config::{LogBase, RunConfig};
use papertree::diagnostics::DEFAULT_EPSILON;
use papertree::index_io::{load_index, save_index};
use papertree::retrieval::{assemble_context, retrieve};
use papertree::trace::{append_record, evaluate_trace, read_trace, TraceRecord};
use papertree::tree::build_index;
use std::sync::Arc;

fn toy_markdown() -> String {
    std::fs::read_to_string(
        std::path::Path::new(env!("CARGO_MANIFEST_DIR")).join("assets/toy_paper.md"),
    )
    .unwrap()
}

fn config() -> RunConfig {
    RunConfig {
        segment_cap: 64,
        budget: 128,
        ..RunConfig::default()
    }
}

#[test]
fn index_persist_retrieve_trace_evaluate() {
    let backends = Backends::offline_stub();
    let config = config();
    let tree = build_index(&toy_markdown(), &config, &backends);
    tree.validate().unwrap();
    tree.check_cap(config.segment_cap).unwrap();

    let dir = tempfile::tempdir().unwrap();
    let index_path = dir.path().join("toy.index");
    save_index(&tree, &index_path).unwrap();
    let loaded = load_index(&index_path).unwrap();
    assert_eq!(tree, loaded);

    // Retrieval over the loaded index matches retrieval over the built one.
    let query = "How does drift detection trigger a re-sort?";
    let from_built = retrieve(query, &tree, &backends, &config).unwrap();
    let from_loaded = retrieve(query, &loaded, &backends, &config).unwrap();
    assert_eq!(from_built.context, from_loaded.context);
    assert!(!from_built.context.blocks.is_empty());
    from_built.context.validate(config.paths).unwrap();

    // Trace the query and evaluate the file end to end.
    let rendered = assemble_context(&from_built.context);
    let record = TraceRecord::from_outcome("q1", query, &from_built, &rendered);
    let trace_path = dir.path().join("trace.jsonl");
    append_record(&trace_path, &record).unwrap();
    let records = read_trace(&trace_path).unwrap();
    let report = evaluate_trace(&records, DEFAULT_EPSILON, LogBase::E).unwrap();
    assert_eq!(report.per_query.len(), 1);
    assert!(report.mean_section_entropy >= 0.0);
}

#[test]
fn rerank_enabled_pipeline_stays_feasible() {
    let backends = Backends::offline_stub();
    let config = RunConfig {
        rerank: true,
        rerank_top_k: 4,
        ..config()
    };
    let tree = build_index(&toy_markdown(), &config, &backends);
    let outcome = retrieve(
        "eviction churn on the bursty trace",
        &tree,
        &backends,
        &config,
    )
    .unwrap();
    outcome.context.validate(config.paths).unwrap();
    assert!(outcome.segment_scores.values().any(|s| s.reranked));
}

#[test]
fn rerank_failure_keeps_pipeline_running() {
    let config = RunConfig {
        rerank: true,
        ..config()
    };
    let backends = Backends {
        reranker: Some(Arc::new(FailingReranker)),
        ..Backends::offline_stub()
    };
    let tree = build_index(&toy_markdown(), &config, &backends);
    let outcome = retrieve("drift detection window", &tree, &backends, &config).unwrap();
    assert!(outcome.segment_scores.values().all(|s| !s.reranked));
    assert!(!outcome.context.blocks.is_empty());
}

#[test]
fn assembled_context_interleaves_paths_summaries_segments() {
    let backends = Backends::offline_stub();
    let config = config();
    let tree = build_index(&toy_markdown(), &config, &backends);
    let outcome = retrieve(
        "median reuse distance per window",
        &tree,
        &backends,
        &config,
    )
    .unwrap();
    let rendered = assemble_context(&outcome.context);
    // Every block renders its summary line, raw text, and provenance;
    // path headers appear at most once per consecutive run.
    let blocks = outcome.context.blocks.len();
    assert_eq!(rendered.matches("[summary] ").count(), blocks);
    assert_eq!(rendered.matches("[ref: ").count(), blocks);
    assert!(rendered.matches("> ").count() <= blocks);
    for block in &outcome.context.blocks {
        assert!(rendered.contains(&block.raw));
    }
}
