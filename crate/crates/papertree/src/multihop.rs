//! Optional extensions: multi-hop query decomposition with entity
//! feedback, and multi-document retrieval through query transformation
//! with per-document budgets and merged synthesis.

use std::collections::{BTreeMap, BTreeSet};

use crate::backends::stub::tags;
use crate::backends::{Backends, TextGenerator};
use crate::config::RunConfig;
use crate::par;
use crate::retrieval::{
    assemble_context, retrieve, ContextBlock, PathCandidate, RetrievalContext, RetrievalError,
};
use crate::scoring::ScoredSegment;
use crate::tree::PaperTree;

/// What one reasoning hop did.
#[derive(Debug, Clone)]
pub struct HopTrace {
    /// 1-based hop number.
    pub hop: usize,
    /// Subquery as issued, including any appended entity suffix.
    pub subquery: String,
    pub new_entities: Vec<String>,
    pub context: RetrievalContext,
}

#[derive(Debug, Clone)]
pub struct MultiHopOutcome {
    pub hops: Vec<HopTrace>,
    /// Deduplicated, document-ordered union of all hop evidence,
    /// re-trimmed to the global budget.
    pub merged: RetrievalContext,
    /// Scores backing the merged evidence (max over hops per leaf).
    pub segment_scores: BTreeMap<usize, ScoredSegment>,
}

/// Rewrite a query into up to `hops` subqueries, one per line. When
/// fewer than two subqueries parse, the complete reply is used as a
/// single subquery; a failed backend degrades to the original query.
/// `hops == 1` skips decomposition entirely.
pub fn decompose_query(query: &str, hops: usize, generator: &dyn TextGenerator) -> Vec<String> {
    assert!(hops >= 1, "hop limit must be at least 1");
    if hops == 1 {
        return vec![query.to_string()];
    }
    let prompt = format!(
        "{tag}\nRewrite the query into at most {hops} subqueries, one per line, \
         each a self-contained retrieval step.\nQuery: {query}",
        tag = tags::DECOMPOSE,
    );
    match generator.generate(&prompt) {
        Ok(reply) => {
            let parsed: Vec<String> = reply
                .lines()
                .map(strip_list_marker)
                .filter(|l| !l.is_empty())
                .map(str::to_string)
                .take(hops)
                .collect();
            if parsed.len() >= 2 {
                parsed
            } else if reply.trim().is_empty() {
                vec![query.to_string()]
            } else {
                // Fewer than two subqueries parsed: the complete output
                // is used directly for retrieval.
                vec![reply.trim().to_string()]
            }
        }
        Err(e) => {
            log::warn!("query decomposition failed ({e}); single hop on the original query");
            vec![query.to_string()]
        }
    }
}

fn strip_list_marker(line: &str) -> &str {
    let trimmed = line.trim();
    let without_bullet = trimmed
        .strip_prefix("- ")
        .or_else(|| trimmed.strip_prefix("* "))
        .unwrap_or(trimmed);
    let digits = without_bullet
        .chars()
        .take_while(|c| c.is_ascii_digit())
        .count();
    if digits > 0 {
        if let Some(rest) = without_bullet
            .get(digits..)
            .and_then(|r| r.strip_prefix(". ").or_else(|| r.strip_prefix(") ")))
        {
            return rest.trim();
        }
    }
    without_bullet.trim()
}

/// Extract entities with backend-reported confidence at or above the
/// threshold. Any failure (backend down, nothing parseable) yields the
/// empty set and the caller proceeds with the unmodified next query.
pub fn extract_entities(
    context: &str,
    threshold: f64,
    generator: &dyn TextGenerator,
) -> BTreeSet<String> {
    let prompt = format!(
        "{tag}\nList entities from the context that matter for follow-up retrieval, \
         one per line as Name|confidence with confidence in [0, 1].\nContext:\n{context}",
        tag = tags::ENTITIES,
    );
    let reply = match generator.generate(&prompt) {
        Ok(reply) => reply,
        Err(e) => {
            log::warn!("entity extraction failed ({e}); keeping the next query unchanged");
            return BTreeSet::new();
        }
    };
    let mut entities = BTreeSet::new();
    for line in reply.lines() {
        let Some((name, confidence)) = line.rsplit_once('|') else {
            continue;
        };
        let name = name.trim();
        let Ok(confidence) = confidence.trim().parse::<f64>() else {
            continue;
        };
        if !name.is_empty() && confidence >= threshold {
            entities.insert(name.to_string());
        }
    }
    entities
}

/// Multi-hop retrieval: decompose, retrieve per subquery with the
/// accumulated entities appended, and stop when no new entities emerge
/// for two consecutive hops or the hop limit is reached. Evidence from
/// all hops merges with deduplication in document order and is
/// re-trimmed to the global budget by marginal relevance per token.
pub fn run_multihop(
    query: &str,
    tree: &PaperTree,
    config: &RunConfig,
    backends: &Backends,
) -> Result<MultiHopOutcome, RetrievalError> {
    let subqueries = decompose_query(query, config.hops, backends.generator.as_ref());
    let mut entities: BTreeSet<String> = BTreeSet::new();
    let mut consecutive_no_new = 0u8;
    let mut hops = Vec::new();
    let mut merged_scores: BTreeMap<usize, ScoredSegment> = BTreeMap::new();
    let mut merged_leaves: BTreeSet<usize> = BTreeSet::new();
    let mut merged_paths: BTreeMap<usize, PathCandidate> = BTreeMap::new();

    for (index, subquery) in subqueries.iter().take(config.hops).enumerate() {
        let issued = if entities.is_empty() {
            subquery.clone()
        } else {
            let joined = entities.iter().cloned().collect::<Vec<_>>().join(", ");
            format!("{subquery} [context entities: {joined}]")
        };
        let outcome = retrieve(&issued, tree, backends, config)?;
        for block in &outcome.context.blocks {
            merged_leaves.insert(block.order_index);
        }
        for path in &outcome.context.paths {
            merged_paths
                .entry(path.anchor)
                .or_insert_with(|| path.clone());
        }
        for (leaf, score) in &outcome.segment_scores {
            merged_scores
                .entry(*leaf)
                .and_modify(|existing| {
                    if score.score > existing.score {
                        *existing = score.clone();
                    }
                })
                .or_insert_with(|| score.clone());
        }

        let rendered = assemble_context(&outcome.context);
        let extracted = extract_entities(
            &rendered,
            config.entity_threshold,
            backends.generator.as_ref(),
        );
        let new_entities: Vec<String> = extracted.difference(&entities).cloned().collect();
        if new_entities.is_empty() {
            consecutive_no_new += 1;
        } else {
            consecutive_no_new = 0;
            entities.extend(new_entities.iter().cloned());
        }
        hops.push(HopTrace {
            hop: index + 1,
            subquery: issued,
            new_entities,
            context: outcome.context,
        });
        if consecutive_no_new >= 2 {
            break;
        }
    }

    let merged = merge_evidence(
        tree,
        &merged_leaves,
        &merged_scores,
        merged_paths.into_values().collect(),
        config,
    );
    Ok(MultiHopOutcome {
        hops,
        merged,
        segment_scores: merged_scores,
    })
}

/// Deduplicated union in document order, re-trimmed to the global
/// budget by descending marginal relevance when it overflows.
fn merge_evidence(
    tree: &PaperTree,
    leaves: &BTreeSet<usize>,
    scores: &BTreeMap<usize, ScoredSegment>,
    paths: Vec<PathCandidate>,
    config: &RunConfig,
) -> RetrievalContext {
    let cost_of = |leaf: usize| -> usize {
        let l = &tree.leaves[leaf];
        if config.include_summary_cost {
            l.token_cost + config.counter.count(&l.summary)
        } else {
            l.token_cost
        }
    };
    let mut kept: Vec<usize> = leaves.iter().copied().collect();
    let total: usize = kept.iter().map(|l| cost_of(*l)).sum();
    if total > config.budget {
        let mut by_delta: Vec<usize> = kept.clone();
        by_delta.sort_by(|a, b| {
            let da = scores.get(a).map(|s| s.marginal_per_token()).unwrap_or(0.0);
            let db = scores.get(b).map(|s| s.marginal_per_token()).unwrap_or(0.0);
            db.partial_cmp(&da)
                .unwrap_or(std::cmp::Ordering::Equal)
                .then(a.cmp(b))
        });
        let mut remaining = config.budget;
        let mut trimmed = Vec::new();
        for leaf in by_delta {
            let cost = cost_of(leaf);
            if cost <= remaining {
                remaining -= cost;
                trimmed.push(leaf);
            }
        }
        trimmed.sort_unstable();
        kept = trimmed;
    }

    let blocks: Vec<ContextBlock> = kept
        .iter()
        .map(|&i| {
            let leaf = &tree.leaves[i];
            ContextBlock {
                path: leaf.path.join(" / "),
                summary: leaf.summary.clone(),
                raw: leaf.raw_text.clone(),
                leaf_id: leaf.id.clone(),
                order_index: leaf.order_index,
            }
        })
        .collect();
    RetrievalContext {
        selected: blocks.iter().map(|b| b.leaf_id.clone()).collect(),
        total_cost: kept.iter().map(|l| cost_of(*l)).sum(),
        budget: config.budget,
        paths,
        blocks,
    }
}

/// Rewrite a multi-document query into canonical single-document form.
/// The backend's complete reply serves verbatim; on failure the
/// original query passes through with a warning.
pub fn transform_multidoc_query(query: &str, generator: &dyn TextGenerator) -> String {
    let prompt = format!(
        "{tag}\nRewrite the multi-document query into a canonical single-document form.\nQuery: {query}",
        tag = tags::TRANSFORM,
    );
    match generator.generate(&prompt) {
        Ok(reply) if !reply.trim().is_empty() => reply.trim().to_string(),
        Ok(_) => query.to_string(),
        Err(e) => {
            log::warn!("query transformation failed ({e}); using the original query");
            query.to_string()
        }
    }
}

/// Evidence retrieved from one document of a multi-document query.
#[derive(Debug, Clone)]
pub struct DocEvidence {
    pub doc_title: String,
    pub context: RetrievalContext,
    pub rendered: String,
    pub segment_scores: BTreeMap<usize, ScoredSegment>,
}

#[derive(Debug, Clone)]
pub struct MultiDocOutcome {
    pub transformed_query: String,
    pub per_document: Vec<DocEvidence>,
    /// Original query plus all labeled evidence, ready for synthesis.
    pub synthesis_prompt: String,
}

/// Transform the query once, retrieve independently from every tree
/// under an equal share of the budget, and assemble the synthesis
/// prompt with one labeled evidence block per document.
pub fn run_multidoc(
    query: &str,
    trees: &[PaperTree],
    config: &RunConfig,
    backends: &Backends,
) -> Result<MultiDocOutcome, RetrievalError> {
    if trees.is_empty() {
        return Err(RetrievalError::NoDocuments);
    }
    let transformed = transform_multidoc_query(query, backends.generator.as_ref());
    let per_doc_config = RunConfig {
        budget: config.budget / trees.len(),
        ..config.clone()
    };
    let outcomes = par::map_ordered(&trees.iter().collect::<Vec<_>>(), |tree| {
        retrieve(&transformed, tree, backends, &per_doc_config)
    });
    let mut per_document = Vec::with_capacity(trees.len());
    for (tree, outcome) in trees.iter().zip(outcomes) {
        let outcome = outcome?;
        let rendered = assemble_context(&outcome.context);
        per_document.push(DocEvidence {
            doc_title: tree.doc_title.clone(),
            context: outcome.context,
            rendered,
            segment_scores: outcome.segment_scores,
        });
    }

    let mut synthesis_prompt = format!(
        "{tag}\nAnswer the question using the evidence from each document below.\nQuestion: {query}\n",
        tag = tags::ANSWER,
    );
    for (i, doc) in per_document.iter().enumerate() {
        synthesis_prompt.push_str(&format!(
            "\nDocument {}: {}\n{}",
            i + 1,
            doc.doc_title,
            doc.rendered
        ));
    }
    Ok(MultiDocOutcome {
        transformed_query: transformed,
        per_document,
        synthesis_prompt,
    })
}
