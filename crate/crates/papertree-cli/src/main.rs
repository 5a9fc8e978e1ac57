//! Command-line surface: `index` builds and persists a PaperTree,
//! `query` retrieves a budgeted context (single-shot, multi-hop, or
//! multi-document) and emits the answer plus a trace record, `eval`
//! turns a trace file into entropy and evidence-F1 reports, and
//! `inspect` prints the outline with leaf statistics.
//!
//! Exit codes: 0 success, 1 empty or degenerate input, 2 I/O or
//! configuration errors.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};

use papertree::backends::stub::tags;
use papertree::backends::Backends;
use papertree::config::{LogBase, RunConfig};
use papertree::diagnostics::DEFAULT_EPSILON;
use papertree::index_io::{load_index, save_index};
use papertree::multihop::{run_multidoc, run_multihop};
use papertree::retrieval::{assemble_context, retrieve, RetrievalOutcome};
use papertree::trace::{append_record, evaluate_trace, read_trace, TraceRecord};
use papertree::tree::{build_index, PaperTree};

#[derive(Parser, Debug)]
#[command(
    name = "papertree",
    version,
    about = "Hierarchy-preserving document index with path-guided, budget-constrained retrieval"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug)]
struct CommonOpts {
    /// Section fusion weight between semantic alignment and embedding
    /// similarity [provenance: reference configuration]
    #[arg(long, global = true, default_value_t = 0.5)]
    alpha: f64,

    /// Segment fusion weight between raw-text and summary channels
    /// [provenance: reference configuration]
    #[arg(long, global = true, default_value_t = 0.8)]
    beta: f64,

    /// Candidate sections retained as retrieval scope (B)
    /// [provenance: reference configuration]
    #[arg(long = "sections", global = true, default_value_t = 2)]
    sections: usize,

    /// Root-to-leaf paths kept by density (P)
    /// [provenance: reference configuration]
    #[arg(long = "paths", global = true, default_value_t = 3)]
    paths: usize,

    /// Maximum reasoning hops for --multihop (H)
    /// [provenance: reference configuration]
    #[arg(long = "hops", global = true, default_value_t = 3)]
    hops: usize,

    /// Confidence floor for accumulated entities
    /// [provenance: implementation default]
    #[arg(long = "entity-threshold", global = true, default_value_t = 0.5)]
    entity_threshold: f64,

    /// Per-segment token cap (M) [provenance: reference configuration]
    #[arg(long = "segment-cap", global = true, default_value_t = 512)]
    segment_cap: usize,

    /// Retrieval token budget (T) [provenance: implementation default]
    #[arg(long = "budget", global = true, default_value_t = 2048)]
    budget: usize,

    /// Logarithm base for entropy diagnostics
    /// [provenance: implementation default]
    #[arg(long = "log-base", global = true, default_value = "e",
          value_parser = ["e", "2"])]
    log_base: String,

    /// Rescore the top segments with the reranker backend
    #[arg(long, global = true)]
    rerank: bool,

    /// Count summary tokens against the retrieval budget
    /// [provenance: implementation default]
    #[arg(long = "include-summary-cost", global = true)]
    include_summary_cost: bool,

    /// Force the deterministic offline stub backends
    #[arg(long, global = true, conflicts_with = "live")]
    stub: bool,

    /// Require live endpoints from the environment
    #[arg(long, global = true)]
    live: bool,

    /// TOML file overriding backend endpoints from the environment
    #[arg(long = "backend-config", global = true)]
    backend_config: Option<PathBuf>,

    /// Trace file the query command appends to
    #[arg(long = "trace", global = true, default_value = "papertree-trace.jsonl")]
    trace: PathBuf,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Build a PaperTree index from a Markdown file
    Index {
        /// Input Markdown document
        input: PathBuf,
        /// Output index file
        output: PathBuf,
        #[command(flatten)]
        opts: CommonOpts,
    },
    /// Retrieve evidence for a question and generate the answer
    Query {
        /// Index file produced by `index`
        index: PathBuf,
        /// The question to answer
        question: String,
        /// Decompose the question into reasoning hops
        #[arg(long)]
        multihop: bool,
        /// Additional indexes for a multi-document query
        #[arg(long = "multidoc", num_args = 1..)]
        multidoc: Vec<PathBuf>,
        #[command(flatten)]
        opts: CommonOpts,
    },
    /// Report per-query and mean SE, EACE, and evidence F1 for a trace
    Eval {
        /// Trace file written by `query` (one JSON record per line)
        trace_file: PathBuf,
        /// Emit the machine-readable JSON report instead of the table
        #[arg(long)]
        json: bool,
        #[command(flatten)]
        opts: CommonOpts,
    },
    /// Print the outline and leaf statistics of an index
    Inspect {
        /// Index file produced by `index`
        index: PathBuf,
        #[command(flatten)]
        opts: CommonOpts,
    },
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}

fn run(cli: Cli) -> Result<ExitCode> {
    match cli.command {
        Command::Index {
            input,
            output,
            opts,
        } => cmd_index(&input, &output, &opts),
        Command::Query {
            index,
            question,
            multihop,
            multidoc,
            opts,
        } => cmd_query(&index, &question, multihop, &multidoc, &opts),
        Command::Eval {
            trace_file,
            json,
            opts,
        } => cmd_eval(&trace_file, json, &opts),
        Command::Inspect { index, opts } => cmd_inspect(&index, &opts),
    }
}

fn run_config(opts: &CommonOpts) -> Result<RunConfig> {
    let config = RunConfig {
        alpha: opts.alpha,
        beta: opts.beta,
        sections: opts.sections,
        paths: opts.paths,
        hops: opts.hops,
        entity_threshold: opts.entity_threshold,
        segment_cap: opts.segment_cap,
        budget: opts.budget,
        rerank: opts.rerank,
        include_summary_cost: opts.include_summary_cost,
        log_base: if opts.log_base == "2" {
            LogBase::Two
        } else {
            LogBase::E
        },
        ..RunConfig::default()
    };
    config.validate().context("invalid configuration")?;
    Ok(config)
}

/// Stub backends unless live endpoints are configured; `--stub` and
/// `--live` force either side.
fn resolve_backends(opts: &CommonOpts) -> Result<Backends> {
    if opts.stub {
        return Ok(Backends::offline_stub());
    }
    let env_present = Backends::env_has_endpoints() || opts.backend_config.is_some();
    if opts.live && !env_present {
        anyhow::bail!(
            "--live requires PAPERTREE_GEN_ENDPOINT / PAPERTREE_EMBED_ENDPOINT \
             (or --backend-config) to be set"
        );
    }
    if env_present {
        Backends::from_env(opts.backend_config.as_deref()).context("backend configuration")
    } else {
        Ok(Backends::offline_stub())
    }
}

fn load(path: &Path) -> Result<PaperTree> {
    load_index(path).with_context(|| format!("loading index {}", path.display()))
}

fn cmd_index(input: &Path, output: &Path, opts: &CommonOpts) -> Result<ExitCode> {
    let config = run_config(opts)?;
    let backends = resolve_backends(opts)?;
    let markdown = std::fs::read_to_string(input)
        .with_context(|| format!("reading input {}", input.display()))?;
    let tree = build_index(&markdown, &config, &backends);
    save_index(&tree, output).context("writing index")?;
    println!(
        "{} sections, {} leaves",
        tree.sections().len(),
        tree.leaves.len()
    );
    if tree.leaves.is_empty() {
        eprintln!("warning: document produced no leaves");
        return Ok(ExitCode::from(1));
    }
    Ok(ExitCode::SUCCESS)
}

/// Deterministic query id: a stable fingerprint of title and question.
fn query_id(doc_title: &str, question: &str) -> String {
    const OFFSET: u64 = 0xcbf29ce484222325;
    const PRIME: u64 = 0x100000001b3;
    let mut hash = OFFSET;
    for b in doc_title.bytes().chain([0u8]).chain(question.bytes()) {
        hash ^= u64::from(b);
        hash = hash.wrapping_mul(PRIME);
    }
    format!("q{hash:016x}")
}

fn answer_prompt(context: &str, question: &str) -> String {
    format!(
        "{tag}\nAnswer the question using only the provided context.\n\
         Context:\n{context}\nQuestion: {question}",
        tag = tags::ANSWER,
    )
}

fn cmd_query(
    index: &Path,
    question: &str,
    multihop: bool,
    multidoc: &[PathBuf],
    opts: &CommonOpts,
) -> Result<ExitCode> {
    let config = run_config(opts)?;
    let backends = resolve_backends(opts)?;

    if !multidoc.is_empty() {
        let mut trees = vec![load(index)?];
        for path in multidoc {
            trees.push(load(path)?);
        }
        let outcome =
            run_multidoc(question, &trees, &config, &backends).context("multi-document query")?;
        let answer = backends
            .generator
            .generate(&outcome.synthesis_prompt)
            .unwrap_or_else(|e| {
                log::warn!("answer generation failed ({e}); emitting the synthesis prompt");
                outcome.synthesis_prompt.clone()
            });
        println!("{answer}");
        for (i, doc) in outcome.per_document.iter().enumerate() {
            let doc_outcome = RetrievalOutcome {
                context: doc.context.clone(),
                section_scores: Vec::new(),
                segment_scores: doc.segment_scores.clone(),
            };
            let record = TraceRecord::from_outcome(
                format!("{}-d{}", query_id(&doc.doc_title, question), i + 1),
                question,
                &doc_outcome,
                &doc.rendered,
            );
            append_record(&opts.trace, &record).context("appending trace record")?;
        }
        return Ok(ExitCode::SUCCESS);
    }

    let tree = load(index)?;
    let (rendered, outcome) = if multihop {
        let outcome =
            run_multihop(question, &tree, &config, &backends).context("multi-hop query")?;
        let rendered = assemble_context(&outcome.merged);
        (
            rendered,
            RetrievalOutcome {
                context: outcome.merged,
                section_scores: Vec::new(),
                segment_scores: outcome.segment_scores,
            },
        )
    } else {
        let outcome = retrieve(question, &tree, &backends, &config).context("query")?;
        (assemble_context(&outcome.context), outcome)
    };

    if outcome.context.blocks.is_empty() {
        eprintln!("warning: empty context (budget {} tokens)", config.budget);
    }
    let answer = backends
        .generator
        .generate(&answer_prompt(&rendered, question))
        .unwrap_or_else(|e| {
            log::warn!("answer generation failed ({e}); emitting the context prompt");
            answer_prompt(&rendered, question)
        });
    println!("{answer}");

    let record = TraceRecord::from_outcome(
        query_id(&tree.doc_title, question),
        question,
        &outcome,
        &rendered,
    );
    append_record(&opts.trace, &record).context("appending trace record")?;
    Ok(ExitCode::SUCCESS)
}

fn cmd_eval(trace_file: &Path, json: bool, opts: &CommonOpts) -> Result<ExitCode> {
    let config = run_config(opts)?;
    let records = read_trace(trace_file).context("reading trace")?;
    if records.is_empty() {
        eprintln!("no records");
        return Ok(ExitCode::from(1));
    }
    let report =
        evaluate_trace(&records, DEFAULT_EPSILON, config.log_base).context("evaluating trace")?;

    if json {
        println!("{}", serde_json::to_string_pretty(&report)?);
        return Ok(ExitCode::SUCCESS);
    }
    println!(
        "{:<20} {:>10} {:>10} {:>12}",
        "query", "SE", "EACE", "evidence-F1"
    );
    for metrics in &report.per_query {
        println!(
            "{:<20} {:>10.4} {:>10} {:>12}",
            metrics.query_id,
            metrics.section_entropy,
            metrics
                .eace
                .map(|v| format!("{v:.4}"))
                .unwrap_or_else(|| "-".into()),
            metrics
                .evidence_f1
                .map(|v| format!("{v:.4}"))
                .unwrap_or_else(|| "-".into()),
        );
    }
    println!(
        "{:<20} {:>10.4} {:>10} {:>12}",
        "mean",
        report.mean_section_entropy,
        report
            .mean_eace
            .map(|v| format!("{v:.4}"))
            .unwrap_or_else(|| "-".into()),
        report
            .mean_evidence_f1
            .map(|v| format!("{v:.4}"))
            .unwrap_or_else(|| "-".into()),
    );
    Ok(ExitCode::SUCCESS)
}

fn cmd_inspect(index: &Path, _opts: &CommonOpts) -> Result<ExitCode> {
    let tree = load(index)?;
    println!("{}", tree.doc_title);
    for id in tree.outline.preorder() {
        if id == 0 {
            continue;
        }
        let node = &tree.outline.nodes[id];
        let leaves: Vec<usize> = tree.leaves_of(id).collect();
        let tokens: usize = leaves.iter().map(|i| tree.leaves[*i].token_cost).sum();
        println!(
            "{}{} [{} leaves, {} tokens]",
            "  ".repeat(node.depth),
            node.title,
            leaves.len(),
            tokens
        );
    }
    let total_tokens: usize = tree.leaves.iter().map(|l| l.token_cost).sum();
    println!(
        "total: {} sections, {} leaves, {} tokens",
        tree.sections().len(),
        tree.leaves.len(),
        total_tokens
    );
    if tree.leaves.is_empty() {
        return Ok(ExitCode::from(1));
    }
    Ok(ExitCode::SUCCESS)
}
