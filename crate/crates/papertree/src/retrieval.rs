//! Path-guided retrieval: rank sections, enumerate root-to-leaf paths
//! by relevance density, and assemble a budget-feasible context by
//! marginal relevance per token, emitted in document order.

use std::collections::{BTreeMap, BTreeSet};

use thiserror::Error;

use crate::backends::Backends;
use crate::config::RunConfig;
use crate::par;
use crate::scoring::{
    rerank, score_leaves, score_section_with_embedding, ScoredSegment, SectionScore,
};
use crate::token::TokenCounter;
use crate::tree::PaperTree;

#[derive(Debug, Error)]
pub enum RetrievalError {
    #[error("cannot retrieve from an index with no leaves")]
    EmptyTree,
    #[error("no documents given")]
    NoDocuments,
}

/// One coherent root-to-leaf discourse thread: the chain of outline
/// nodes down to a leaf-owning section, plus that section's leaves.
#[derive(Debug, Clone, PartialEq)]
pub struct PathCandidate {
    /// Node ids from the root down to the anchor section.
    pub nodes: Vec<usize>,
    /// The leaf-owning section anchoring this path.
    pub anchor: usize,
    /// Member leaves (positions in the tree's leaf list), contiguous in
    /// document order.
    pub leaf_indices: Vec<usize>,
    /// Sum of score per token over member leaves.
    pub density: f64,
    pub total_cost: usize,
}

/// One rendered evidence block: hierarchical path, summary, raw text.
#[derive(Debug, Clone, PartialEq)]
pub struct ContextBlock {
    pub path: String,
    pub summary: String,
    pub raw: String,
    pub leaf_id: String,
    pub order_index: usize,
}

/// Budget-feasible, document-ordered retrieval result.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct RetrievalContext {
    /// Selected leaf ids in document order.
    pub selected: Vec<String>,
    /// Retained paths; every selected leaf lies on one of them.
    pub paths: Vec<PathCandidate>,
    pub blocks: Vec<ContextBlock>,
    pub total_cost: usize,
    pub budget: usize,
}

impl RetrievalContext {
    /// Check the feasibility invariants for a per-query context
    /// produced with path limit `path_limit`.
    pub fn validate(&self, path_limit: usize) -> Result<(), String> {
        if self.total_cost > self.budget {
            return Err(format!(
                "total cost {} exceeds budget {}",
                self.total_cost, self.budget
            ));
        }
        if self.paths.len() > path_limit {
            return Err(format!(
                "{} paths retained, limit {path_limit}",
                self.paths.len()
            ));
        }
        let on_paths: BTreeSet<usize> = self
            .paths
            .iter()
            .flat_map(|p| p.leaf_indices.iter().copied())
            .collect();
        let mut last_order = None;
        for block in &self.blocks {
            if !on_paths.contains(&block.order_index) {
                return Err(format!(
                    "selected leaf {} lies on no retained path",
                    block.leaf_id
                ));
            }
            if let Some(last) = last_order {
                if block.order_index <= last {
                    return Err("blocks not in ascending document order".into());
                }
            }
            last_order = Some(block.order_index);
        }
        Ok(())
    }
}

/// Rank candidate sections and keep the top `limit`, ties broken by
/// document order. Errors on an index with no leaves at all.
pub fn select_sections(
    query: &str,
    tree: &PaperTree,
    backends: &Backends,
    alpha: f64,
    limit: usize,
) -> Result<Vec<SectionScore>, RetrievalError> {
    let query_embedding = crate::tree::embed_or_fallback(backends, &[query.to_string()])
        .pop()
        .unwrap_or_default();
    select_sections_with_embedding(query, &query_embedding, tree, backends, alpha, limit)
}

pub fn select_sections_with_embedding(
    query: &str,
    query_embedding: &[f64],
    tree: &PaperTree,
    backends: &Backends,
    alpha: f64,
    limit: usize,
) -> Result<Vec<SectionScore>, RetrievalError> {
    if tree.leaves.is_empty() {
        return Err(RetrievalError::EmptyTree);
    }
    let sections = tree.sections();
    let mut scores = par::map_ordered(&sections, |&section| {
        score_section_with_embedding(
            query,
            query_embedding,
            tree,
            section,
            Some(backends.generator.as_ref()),
            alpha,
        )
    });
    scores.sort_by(|a, b| {
        b.fused
            .partial_cmp(&a.fused)
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(a.section_id.cmp(&b.section_id))
    });
    scores.truncate(limit.min(scores.len()));
    Ok(scores)
}

/// One path per leaf-owning section in the selected sections' subtrees,
/// in document order. Densities come from the supplied segment scores.
pub fn enumerate_paths(
    tree: &PaperTree,
    selected: &[SectionScore],
    scores: &BTreeMap<usize, ScoredSegment>,
) -> Vec<PathCandidate> {
    let mut anchors: BTreeSet<usize> = BTreeSet::new();
    for section in selected {
        anchors.extend(tree.leaf_parents_under(section.section_id));
    }
    anchors
        .into_iter()
        .map(|anchor| {
            let leaf_indices: Vec<usize> = tree.leaves_of(anchor).collect();
            let density = leaf_indices
                .iter()
                .filter_map(|i| scores.get(i))
                .map(|s| s.marginal_per_token())
                .sum();
            let total_cost = leaf_indices
                .iter()
                .map(|i| tree.leaves[*i].token_cost)
                .sum();
            let mut nodes = Vec::new();
            let mut cursor = Some(anchor);
            while let Some(n) = cursor {
                nodes.push(n);
                cursor = tree.outline.nodes[n].parent;
            }
            nodes.reverse();
            PathCandidate {
                nodes,
                anchor,
                leaf_indices,
                density,
                total_cost,
            }
        })
        .collect()
}

/// Keep the top `path_limit` paths by density, then admit their leaves
/// greedily by marginal relevance per token until the budget exhausts,
/// skipping leaves that no longer fit. Selected blocks are emitted in
/// document order. The greedy solution is compared against the best
/// single feasible leaf, which pins the usual 1/2 approximation bound
/// for density-greedy knapsack.
pub fn select_under_budget(
    tree: &PaperTree,
    paths: Vec<PathCandidate>,
    scores: &BTreeMap<usize, ScoredSegment>,
    budget: usize,
    path_limit: usize,
    include_summary_cost: bool,
    counter: &TokenCounter,
) -> RetrievalContext {
    let mut ranked = paths;
    ranked.sort_by(|a, b| {
        b.density
            .partial_cmp(&a.density)
            .unwrap_or(std::cmp::Ordering::Equal)
            .then_with(|| {
                let a_first = a.leaf_indices.first().copied().unwrap_or(usize::MAX);
                let b_first = b.leaf_indices.first().copied().unwrap_or(usize::MAX);
                a_first.cmp(&b_first)
            })
    });
    ranked.truncate(path_limit.min(ranked.len()));

    let cost_of = |leaf_index: usize| -> usize {
        let leaf = &tree.leaves[leaf_index];
        if include_summary_cost {
            leaf.token_cost + counter.count(&leaf.summary)
        } else {
            leaf.token_cost
        }
    };

    let mut candidates: Vec<&ScoredSegment> = ranked
        .iter()
        .flat_map(|p| p.leaf_indices.iter())
        .filter_map(|i| scores.get(i))
        .filter(|s| s.score > 0.0)
        .collect();
    candidates.sort_by(|a, b| {
        b.marginal_per_token()
            .partial_cmp(&a.marginal_per_token())
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(a.order_index.cmp(&b.order_index))
    });

    let mut remaining = budget;
    let mut admitted: Vec<&ScoredSegment> = Vec::new();
    for segment in &candidates {
        let cost = cost_of(segment.leaf_index);
        if cost <= remaining {
            remaining -= cost;
            admitted.push(segment);
        }
    }

    // Density-greedy alone can be arbitrarily far from the optimum when
    // one large high-score leaf is crowded out; taking the better of the
    // greedy set and the best single feasible leaf restores the bound.
    let greedy_objective: f64 = admitted.iter().map(|s| s.score).sum();
    let best_single = candidates
        .iter()
        .filter(|s| cost_of(s.leaf_index) <= budget)
        .max_by(|a, b| {
            a.score
                .partial_cmp(&b.score)
                .unwrap_or(std::cmp::Ordering::Equal)
                .then(b.order_index.cmp(&a.order_index))
        });
    if let Some(single) = best_single {
        if single.score > greedy_objective {
            admitted = vec![single];
        }
    }

    admitted.sort_by_key(|s| s.order_index);
    let total_cost = admitted.iter().map(|s| cost_of(s.leaf_index)).sum();
    let blocks: Vec<ContextBlock> = admitted
        .iter()
        .map(|s| {
            let leaf = &tree.leaves[s.leaf_index];
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
        paths: ranked,
        blocks,
        total_cost,
        budget,
    }
}

/// Render the context: a `> path` header whenever the path changes,
/// then the `[summary]` line and the raw segment, with the leaf id as a
/// trailing provenance marker.
pub fn assemble_context(ctx: &RetrievalContext) -> String {
    let mut out = String::new();
    let mut previous_path: Option<&str> = None;
    for block in &ctx.blocks {
        if !out.is_empty() {
            out.push('\n');
        }
        if previous_path != Some(block.path.as_str()) {
            out.push_str("> ");
            out.push_str(&block.path);
            out.push('\n');
            previous_path = Some(block.path.as_str());
        }
        out.push_str("[summary] ");
        out.push_str(&block.summary);
        out.push('\n');
        out.push_str(&block.raw);
        out.push('\n');
        out.push_str(&format!("[ref: {}]\n", block.leaf_id));
    }
    out
}

/// Everything one query produced: the context plus the segment scores
/// used to build it (keyed by leaf position).
#[derive(Debug, Clone)]
pub struct RetrievalOutcome {
    pub context: RetrievalContext,
    pub section_scores: Vec<SectionScore>,
    pub segment_scores: BTreeMap<usize, ScoredSegment>,
}

/// Full single-query retrieval: select sections, score their leaves on
/// both channels (optionally reranked), enumerate paths, and pack the
/// budget.
pub fn retrieve(
    query: &str,
    tree: &PaperTree,
    backends: &Backends,
    config: &RunConfig,
) -> Result<RetrievalOutcome, RetrievalError> {
    let query_embedding = crate::tree::embed_or_fallback(backends, &[query.to_string()])
        .pop()
        .unwrap_or_default();
    let section_scores = select_sections_with_embedding(
        query,
        &query_embedding,
        tree,
        backends,
        config.alpha,
        config.sections,
    )?;

    let leaf_indices: BTreeSet<usize> = section_scores
        .iter()
        .flat_map(|s| tree.subtree_leaves(s.section_id))
        .collect();
    let leaf_indices: Vec<usize> = leaf_indices.into_iter().collect();
    let mut scored = score_leaves(&query_embedding, tree, &leaf_indices, config.beta);
    if config.rerank {
        scored = rerank(
            query,
            scored,
            config.rerank_top_k,
            tree,
            backends.reranker.as_deref(),
        );
    }
    let segment_scores: BTreeMap<usize, ScoredSegment> =
        scored.into_iter().map(|s| (s.leaf_index, s)).collect();

    let paths = enumerate_paths(tree, &section_scores, &segment_scores);
    let context = select_under_budget(
        tree,
        paths,
        &segment_scores,
        config.budget,
        config.paths,
        config.include_summary_cost,
        &config.counter,
    );
    Ok(RetrievalOutcome {
        context,
        section_scores,
        segment_scores,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scoring::score_segment;
    use crate::tree::build_index;

    fn stub() -> Backends {
        Backends::offline_stub()
    }

    /// Three flat sections, one leaf each, with planted 2-d embeddings
    /// so cosines against query [1, 0] equal the planted x component.
    fn planted_three_sections(similarities: [f64; 3]) -> PaperTree {
        let markdown =
            "# T\n\n## A\nalpha text body.\n\n## B\nbeta text body.\n\n## C\ngamma text body.";
        let mut tree = build_index(markdown, &RunConfig::default(), &stub());
        assert_eq!(tree.leaves.len(), 3);
        for (leaf, s) in tree.leaves.iter_mut().zip(similarities) {
            let y = (1.0 - s * s).max(0.0).sqrt();
            leaf.raw_embedding = Some(vec![s, y]);
            leaf.summary_embedding = Some(vec![s, y]);
        }
        tree
    }

    fn embedding_only_sections(tree: &PaperTree, limit: usize) -> Vec<SectionScore> {
        // Scores via the embedding channel only (semantic backend off).
        let mut scores: Vec<SectionScore> = tree
            .sections()
            .iter()
            .map(|&s| {
                crate::scoring::score_section_with_embedding("q", &[1.0, 0.0], tree, s, None, 0.5)
            })
            .collect();
        scores.sort_by(|a, b| {
            b.fused
                .partial_cmp(&a.fused)
                .unwrap()
                .then(a.section_id.cmp(&b.section_id))
        });
        scores.truncate(limit);
        scores
    }

    fn scores_from_embeddings(tree: &PaperTree) -> BTreeMap<usize, ScoredSegment> {
        (0..tree.leaves.len())
            .map(|i| (i, score_segment(&[1.0, 0.0], tree, i, 0.8)))
            .collect()
    }

    #[test]
    fn select_sections_tie_breaks_by_document_order() {
        let tree = planted_three_sections([0.9, 0.9, 0.1]);
        let top = embedding_only_sections(&tree, 2);
        assert_eq!(top.len(), 2);
        let titles: Vec<&str> = top
            .iter()
            .map(|s| tree.outline.nodes[s.section_id].title.as_str())
            .collect();
        assert_eq!(titles, vec!["A", "B"]);
    }

    #[test]
    fn select_sections_clamps_to_available() {
        let markdown = "# T\n\n## Only\nsole body text.";
        let tree = build_index(markdown, &RunConfig::default(), &stub());
        let top = select_sections("anything", &tree, &stub(), 0.5, 2).unwrap();
        assert_eq!(top.len(), 1);
    }

    #[test]
    fn select_sections_empty_tree_errors() {
        let tree = build_index("", &RunConfig::default(), &stub());
        assert!(matches!(
            select_sections("q", &tree, &stub(), 0.5, 2),
            Err(RetrievalError::EmptyTree)
        ));
    }

    #[test]
    fn enumerate_two_subsections_two_paths() {
        let markdown = "# T\n\n## S\n\n### S1\none body. two body.\n\nmore text here.\n\n### S2\nthree body. four body.\n\nclosing text words.";
        let config = RunConfig {
            segment_cap: 16,
            ..RunConfig::default()
        };
        let tree = build_index(markdown, &config, &stub());
        let scores = scores_from_embeddings(&tree);
        let s = tree
            .outline
            .nodes
            .iter()
            .position(|n| n.title == "S")
            .unwrap();
        let selected = vec![crate::scoring::SectionScore {
            section_id: s,
            semantic: 0.0,
            embedding: 0.0,
            fused: 0.0,
            fallback: false,
        }];
        let paths = enumerate_paths(&tree, &selected, &scores);
        assert_eq!(paths.len(), 2);
        for path in &paths {
            assert_eq!(path.nodes.first(), Some(&0));
            assert_eq!(path.nodes.last(), Some(&path.anchor));
            // Members contiguous in document order.
            for pair in path.leaf_indices.windows(2) {
                assert_eq!(pair[1], pair[0] + 1);
            }
        }
    }

    #[test]
    fn enumerate_empty_selection() {
        let tree = planted_three_sections([0.5, 0.5, 0.5]);
        let scores = scores_from_embeddings(&tree);
        assert!(enumerate_paths(&tree, &[], &scores).is_empty());
    }

    #[test]
    fn density_hand_value() {
        // One path, two leaves: scores [0.8, 0.4] at costs [100, 200]
        // give density 0.8/100 + 0.4/200 = 0.010.
        let (tree, mut scores) = single_path_tree(&[100, 200]);
        for (i, s) in [0.8, 0.4].iter().enumerate() {
            let entry = scores.get_mut(&i).unwrap();
            entry.score = *s;
            entry.token_cost = tree.leaves[i].token_cost;
        }
        let selected = embedding_only_sections(&tree, 1);
        let paths = enumerate_paths(&tree, &selected, &scores);
        assert_eq!(paths.len(), 1);
        assert!((paths[0].density - 0.010).abs() < 1e-12);
        assert_eq!(paths[0].total_cost, 300);
        // The stored density matches the sum of per-leaf marginals.
        let recomputed: f64 = paths[0]
            .leaf_indices
            .iter()
            .map(|i| scores[i].marginal_per_token())
            .sum();
        assert!((paths[0].density - recomputed).abs() < 1e-9);
    }

    fn single_path_tree(costs: &[usize]) -> (PaperTree, BTreeMap<usize, ScoredSegment>) {
        // Ten-token paragraphs so the 16-token cap keeps them separate.
        let markdown = format!(
            "# T\n\n## S\n{}",
            (0..costs.len())
                .map(|i| format!("one two three four five six seven eight paragraph {i}."))
                .collect::<Vec<_>>()
                .join("\n\n")
        );
        let config = RunConfig {
            segment_cap: 16,
            ..RunConfig::default()
        };
        let mut tree = build_index(&markdown, &config, &stub());
        assert_eq!(tree.leaves.len(), costs.len());
        for (leaf, cost) in tree.leaves.iter_mut().zip(costs) {
            leaf.token_cost = *cost;
            leaf.raw_embedding = Some(vec![0.8, 0.6]);
            leaf.summary_embedding = Some(vec![0.8, 0.6]);
        }
        let scores = scores_from_embeddings(&tree);
        (tree, scores)
    }

    #[test]
    fn budget_example_matches_exhaustive_optimum() {
        let (tree, mut scores) = single_path_tree(&[50, 50, 10]);
        for (i, s) in [0.9, 0.5, 0.4].iter().enumerate() {
            scores.get_mut(&i).unwrap().score = *s;
            scores.get_mut(&i).unwrap().token_cost = tree.leaves[i].token_cost;
        }
        let selected = embedding_only_sections(&tree, 1);
        let paths = enumerate_paths(&tree, &selected, &scores);
        assert_eq!(paths.len(), 1);
        let ctx = select_under_budget(
            &tree,
            paths,
            &scores,
            60,
            1,
            false,
            &TokenCounter::whitespace(),
        );
        ctx.validate(1).unwrap();
        assert_eq!(ctx.total_cost, 60);
        let ids: Vec<&str> = ctx.selected.iter().map(String::as_str).collect();
        assert_eq!(ids, vec!["n1s0", "n1s2"]);

        // Exhaustive check over all 8 subsets confirms optimality here.
        let items = [(0.9, 50), (0.5, 50), (0.4, 10)];
        let mut best = 0.0f64;
        for mask in 0u32..8 {
            let (mut s, mut c) = (0.0, 0usize);
            for (i, (score, cost)) in items.iter().enumerate() {
                if mask & (1 << i) != 0 {
                    s += score;
                    c += cost;
                }
            }
            if c <= 60 {
                best = best.max(s);
            }
        }
        assert!((best - (0.9 + 0.4)).abs() < 1e-12);
    }

    #[test]
    fn zero_budget_empty_context() {
        let (tree, scores) = single_path_tree(&[5, 5]);
        let selected = embedding_only_sections(&tree, 1);
        let paths = enumerate_paths(&tree, &selected, &scores);
        let ctx = select_under_budget(
            &tree,
            paths,
            &scores,
            0,
            3,
            false,
            &TokenCounter::whitespace(),
        );
        ctx.validate(3).unwrap();
        assert!(ctx.selected.is_empty());
        assert_eq!(ctx.total_cost, 0);
    }

    #[test]
    fn path_limit_is_enforced() {
        let markdown = "# T\n\n## A\nalpha body text.\n\n## B\nbeta body text.\n\n## C\ngamma body text.\n\n## D\ndelta body text.";
        let tree = build_index(markdown, &RunConfig::default(), &stub());
        let scores = scores_from_embeddings(&tree);
        let selected: Vec<SectionScore> = tree
            .sections()
            .iter()
            .map(|&s| SectionScore {
                section_id: s,
                semantic: 0.0,
                embedding: 0.0,
                fused: 0.0,
                fallback: false,
            })
            .collect();
        let paths = enumerate_paths(&tree, &selected, &scores);
        assert_eq!(paths.len(), 4);
        let ctx = select_under_budget(
            &tree,
            paths,
            &scores,
            10_000,
            2,
            false,
            &TokenCounter::whitespace(),
        );
        ctx.validate(2).unwrap();
        assert_eq!(ctx.paths.len(), 2);
    }

    #[test]
    fn summary_cost_flag_charges_summaries() {
        let (tree, scores) = single_path_tree(&[5, 5]);
        let counter = TokenCounter::whitespace();
        let selected = embedding_only_sections(&tree, 1);
        let paths = enumerate_paths(&tree, &selected, &scores);
        let without =
            select_under_budget(&tree, paths.clone(), &scores, 10_000, 3, false, &counter);
        let with = select_under_budget(&tree, paths, &scores, 10_000, 3, true, &counter);
        assert!(with.total_cost > without.total_cost);
    }

    #[test]
    fn assemble_dedups_path_headers() {
        let (tree, scores) = single_path_tree(&[5, 5]);
        let selected = embedding_only_sections(&tree, 1);
        let paths = enumerate_paths(&tree, &selected, &scores);
        let ctx = select_under_budget(
            &tree,
            paths,
            &scores,
            10_000,
            3,
            false,
            &TokenCounter::whitespace(),
        );
        assert_eq!(ctx.blocks.len(), 2);
        let rendered = assemble_context(&ctx);
        assert_eq!(rendered.matches("> ").count(), 1);
        assert_eq!(rendered.matches("[summary]").count(), 2);
        assert_eq!(rendered.matches("[ref: ").count(), 2);
    }

    #[test]
    fn assemble_empty_context() {
        assert_eq!(assemble_context(&RetrievalContext::default()), "");
    }

    #[test]
    fn assemble_two_sections_two_headers() {
        let tree = planted_three_sections([0.9, 0.8, 0.0]);
        let scores = scores_from_embeddings(&tree);
        let selected = embedding_only_sections(&tree, 2);
        let paths = enumerate_paths(&tree, &selected, &scores);
        let ctx = select_under_budget(
            &tree,
            paths,
            &scores,
            10_000,
            3,
            false,
            &TokenCounter::whitespace(),
        );
        assert_eq!(ctx.blocks.len(), 2);
        let rendered = assemble_context(&ctx);
        assert_eq!(rendered.matches("> ").count(), 2);
    }

    #[test]
    fn retrieve_end_to_end_with_stub() {
        let markdown = "# T\n\n## Methods\nThe estimator uses gradient clipping. It feeds the cache.\n\n## Results\nThroughput rises sharply. Latency falls.";
        let config = RunConfig {
            segment_cap: 16,
            budget: 64,
            ..RunConfig::default()
        };
        let tree = build_index(markdown, &config, &stub());
        let outcome = retrieve("gradient clipping estimator", &tree, &stub(), &config).unwrap();
        outcome.context.validate(config.paths).unwrap();
        assert!(!outcome.context.selected.is_empty());
        let rendered = assemble_context(&outcome.context);
        assert!(rendered.contains("> "));
        assert!(rendered.contains("[summary]"));
    }
}
