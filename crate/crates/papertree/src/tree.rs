//! The PaperTree index: outline nodes with body text attached, long
//! sections segmented into bounded leaves at rhetorical boundaries,
//! and a chained summary per leaf conditioned on the document title,
//! the hierarchical path, the segment, and the previous summary.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::backends::stub::{first_sentences, tags, HashEmbedder};
use crate::backends::{Backends, Embedder, TextGenerator};
use crate::config::RunConfig;
use crate::outline::{extract_heading_candidates, infer_outline, OutlineTree};
use crate::par;
use crate::token::TokenCounter;

/// Initialization token standing in for the previous summary at the
/// start of each section.
pub const SECTION_START_TOKEN: &str = "<SECTION-START>";

/// A bounded, contiguous text unit with its chained summary and
/// hierarchical provenance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LeafSegment {
    pub id: String,
    pub raw_text: String,
    pub summary: String,
    /// Ancestor titles from the document title down to the owning
    /// section.
    pub path: Vec<String>,
    pub token_cost: usize,
    /// Global document order, unique per leaf.
    pub order_index: usize,
    /// Outline node owning this leaf.
    pub section_id: usize,
    /// Set when a single sentence alone exceeded the segment cap.
    pub over_budget: bool,
    pub raw_embedding: Option<Vec<f64>>,
    pub summary_embedding: Option<Vec<f64>>,
}

/// Contiguous range of leaf positions owned by one section.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LeafRange {
    pub start: usize,
    pub end: usize,
}

/// The structure-fidelity index: outline plus ordered leaves.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PaperTree {
    pub outline: OutlineTree,
    pub doc_title: String,
    pub leaves: Vec<LeafSegment>,
    /// Section node id -> its leaf range in `leaves`.
    pub section_index: BTreeMap<usize, LeafRange>,
}

impl PaperTree {
    /// Leaf positions directly owned by `node`.
    pub fn leaves_of(&self, node: usize) -> impl Iterator<Item = usize> + '_ {
        let range = self
            .section_index
            .get(&node)
            .copied()
            .unwrap_or(LeafRange { start: 0, end: 0 });
        range.start..range.end
    }

    /// Leaf positions anywhere under `node`'s subtree, document order.
    pub fn subtree_leaves(&self, node: usize) -> Vec<usize> {
        let mut out: Vec<usize> = self
            .outline
            .subtree(node)
            .into_iter()
            .flat_map(|n| self.leaves_of(n))
            .collect();
        out.sort_unstable();
        out
    }

    /// Candidate retrieval sections: every non-root node, or the root
    /// alone when the outline has no real sections.
    pub fn sections(&self) -> Vec<usize> {
        if self.outline.nodes.len() == 1 {
            vec![OutlineTree::ROOT]
        } else {
            (1..self.outline.nodes.len()).collect()
        }
    }

    /// Nodes in `section`'s subtree that directly own leaves, document
    /// order. Each is the anchor of one root-to-leaf path.
    pub fn leaf_parents_under(&self, section: usize) -> Vec<usize> {
        self.outline
            .subtree(section)
            .into_iter()
            .filter(|n| self.leaves_of(*n).next().is_some())
            .collect()
    }

    /// Structural and numeric invariants; returns the first violation.
    pub fn validate(&self) -> Result<(), String> {
        self.outline.validate()?;
        if self.doc_title != self.outline.title() {
            return Err("doc_title does not match outline root".into());
        }
        let mut covered = 0usize;
        for (node, range) in &self.section_index {
            if *node >= self.outline.nodes.len() {
                return Err(format!("section_index references unknown node {node}"));
            }
            if range.start != covered {
                return Err(format!(
                    "leaf ranges not contiguous at node {node}: expected start {covered}, got {}",
                    range.start
                ));
            }
            if range.end < range.start || range.end > self.leaves.len() {
                return Err(format!("bad leaf range for node {node}"));
            }
            for i in range.start..range.end {
                if self.leaves[i].section_id != *node {
                    return Err(format!("leaf {i} section_id mismatch"));
                }
            }
            covered = range.end;
        }
        if covered != self.leaves.len() {
            return Err(format!(
                "section_index covers {covered} of {} leaves",
                self.leaves.len()
            ));
        }
        for (i, leaf) in self.leaves.iter().enumerate() {
            if leaf.order_index != i {
                return Err(format!(
                    "leaf {i} order_index {} out of order",
                    leaf.order_index
                ));
            }
            if leaf.token_cost == 0 {
                return Err(format!("leaf {} has zero token cost", leaf.id));
            }
            if leaf.path.first().map(String::as_str) != Some(self.doc_title.as_str()) {
                return Err(format!(
                    "leaf {} path does not begin with the title",
                    leaf.id
                ));
            }
            for (channel, embedding) in [
                ("raw", &leaf.raw_embedding),
                ("summary", &leaf.summary_embedding),
            ] {
                if let Some(v) = embedding {
                    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
                    if norm != 0.0 && (norm - 1.0).abs() > 1e-6 {
                        return Err(format!(
                            "leaf {} {channel} embedding norm {norm} not unit",
                            leaf.id
                        ));
                    }
                }
            }
        }
        Ok(())
    }

    /// Cap compliance: every leaf within `cap` unless flagged.
    pub fn check_cap(&self, cap: usize) -> Result<(), String> {
        for leaf in &self.leaves {
            if leaf.token_cost > cap && !leaf.over_budget {
                return Err(format!(
                    "leaf {} cost {} exceeds cap {cap} without flag",
                    leaf.id, leaf.token_cost
                ));
            }
        }
        Ok(())
    }
}

/// Own-text body of every outline node, indexed by node id. Lines flow
/// to the most recent heading; text before the first heading belongs to
/// the root; demoted heading candidates stay in the body stream.
pub fn section_bodies(markdown: &str, outline: &OutlineTree) -> Vec<String> {
    let heading_present = !extract_heading_candidates(markdown).is_empty();
    let mut line_to_node = BTreeMap::new();
    if heading_present {
        for (id, node) in outline.nodes.iter().enumerate() {
            line_to_node.insert(node.line_start, id);
        }
    }
    let mut bodies = vec![String::new(); outline.nodes.len()];
    let mut current = OutlineTree::ROOT;
    for (index, line) in markdown.lines().enumerate() {
        if let Some(node) = line_to_node.get(&index) {
            current = *node;
            continue;
        }
        bodies[current].push_str(line);
        bodies[current].push('\n');
    }
    bodies
}

/// Split a section body into segments of at most `max_tokens` tokens.
/// Splits happen only at sentence ends; paragraph and list-item
/// boundaries are never straddled unless one paragraph alone exceeds
/// the cap. A single over-long sentence becomes its own segment and is
/// reported by [`segment_flags`].
pub fn segment_section(body: &str, max_tokens: usize, counter: &TokenCounter) -> Vec<String> {
    assert!(max_tokens >= 16, "segment cap must be at least 16 tokens");
    let mut segments = Vec::new();
    let mut current = String::new();
    for block in split_blocks(body) {
        if counter.count(&block) > max_tokens {
            flush(&mut segments, &mut current);
            pack_sentences(&block, max_tokens, counter, &mut segments, &mut current);
            continue;
        }
        let candidate = join_blocks(&current, &block);
        if !current.is_empty() && counter.count(&candidate) > max_tokens {
            flush(&mut segments, &mut current);
            current = block;
        } else {
            current = candidate;
        }
    }
    flush(&mut segments, &mut current);
    segments
}

/// Over-budget flags aligned with [`segment_section`] output.
pub fn segment_flags(segments: &[String], max_tokens: usize, counter: &TokenCounter) -> Vec<bool> {
    segments
        .iter()
        .map(|s| {
            let over = counter.count(s) > max_tokens;
            if over {
                log::warn!(
                    "segment of {} tokens exceeds cap {max_tokens}: single over-long sentence",
                    counter.count(s)
                );
            }
            over
        })
        .collect()
}

fn flush(segments: &mut Vec<String>, current: &mut String) {
    if !current.trim().is_empty() {
        segments.push(std::mem::take(current));
    } else {
        current.clear();
    }
}

fn join_blocks(current: &str, block: &str) -> String {
    if current.is_empty() {
        block.to_string()
    } else {
        format!("{current}\n\n{block}")
    }
}

fn pack_sentences(
    block: &str,
    max_tokens: usize,
    counter: &TokenCounter,
    segments: &mut Vec<String>,
    current: &mut String,
) {
    for sentence in split_sentences(block) {
        if counter.count(&sentence) > max_tokens {
            // The one sanctioned cap violation: an indivisible sentence.
            flush(segments, current);
            segments.push(sentence);
            continue;
        }
        let candidate = if current.is_empty() {
            sentence.clone()
        } else {
            format!("{current} {sentence}")
        };
        if !current.is_empty() && counter.count(&candidate) > max_tokens {
            flush(segments, current);
            *current = sentence;
        } else {
            *current = candidate;
        }
    }
    flush(segments, current);
}

/// Paragraphs and individual list items, in order. A list item starts a
/// new block even without a blank line so item boundaries survive
/// packing.
fn split_blocks(body: &str) -> Vec<String> {
    let mut blocks = Vec::new();
    let mut current: Vec<&str> = Vec::new();
    let push_current = |current: &mut Vec<&str>, blocks: &mut Vec<String>| {
        if !current.is_empty() {
            blocks.push(current.join("\n"));
            current.clear();
        }
    };
    for line in body.lines() {
        if line.trim().is_empty() {
            push_current(&mut current, &mut blocks);
        } else if is_list_item(line) {
            push_current(&mut current, &mut blocks);
            current.push(line);
        } else {
            current.push(line);
        }
    }
    push_current(&mut current, &mut blocks);
    blocks
}

fn is_list_item(line: &str) -> bool {
    let trimmed = line.trim_start();
    if trimmed.starts_with("- ") || trimmed.starts_with("* ") || trimmed.starts_with("+ ") {
        return true;
    }
    let digits = trimmed.chars().take_while(|c| c.is_ascii_digit()).count();
    digits > 0
        && trimmed[digits..].starts_with(['.', ')'])
        && trimmed[digits + 1..].starts_with(' ')
}

/// Sentence-end splitting at `.` `!` `?` followed by whitespace.
pub fn split_sentences(text: &str) -> Vec<String> {
    let text = text.trim();
    let mut sentences = Vec::new();
    let bytes = text.as_bytes();
    let mut start = 0usize;
    for (i, b) in bytes.iter().enumerate() {
        if matches!(b, b'.' | b'!' | b'?')
            && bytes.get(i + 1).is_none_or(|c| c.is_ascii_whitespace())
        {
            let sentence = text[start..=i].trim();
            if !sentence.is_empty() {
                sentences.push(sentence.to_string());
            }
            start = i + 1;
        }
    }
    if start < text.len() {
        let tail = text[start..].trim();
        if !tail.is_empty() {
            sentences.push(tail.to_string());
        }
    }
    sentences
}

/// Generate the structure-anchored summary for one segment. The prompt
/// carries exactly four signals in fixed order: document title,
/// hierarchical path, previous summary (or the section-start token),
/// and the segment itself. On backend failure the summary degrades to
/// the segment's first two sentences; the result is always non-empty
/// and within `cap` tokens.
pub fn summarize_segment(
    doc_title: &str,
    path: &[String],
    segment: &str,
    previous_summary: &str,
    generator: &dyn TextGenerator,
    counter: &TokenCounter,
    cap: usize,
) -> String {
    let prompt = format!(
        "{tag}\nSummarize the segment below in at most {cap} tokens, staying \
         consistent with the previous summary.\n\
         Title: {doc_title}\nPath: {path}\nPrevious summary: {previous_summary}\nSegment:\n{segment}",
        tag = tags::SUMMARY,
        path = path.join(" / "),
    );
    let summary = match generator.generate(&prompt) {
        Ok(reply) if !reply.trim().is_empty() => reply.trim().to_string(),
        Ok(_) | Err(_) => {
            log::warn!("summary backend unavailable; extracting leading sentences");
            first_sentences(segment, 2)
        }
    };
    truncate_tokens(&summary, cap, counter)
}

/// Largest whole-word prefix within `cap` tokens (at least one word).
fn truncate_tokens(text: &str, cap: usize, counter: &TokenCounter) -> String {
    if counter.count(text) <= cap {
        return text.to_string();
    }
    let words: Vec<&str> = text.split_whitespace().collect();
    let mut lo = 1usize;
    let mut hi = words.len();
    while lo < hi {
        let mid = lo + (hi - lo).div_ceil(2);
        if counter.count(&words[..mid].join(" ")) <= cap {
            lo = mid;
        } else {
            hi = mid - 1;
        }
    }
    words[..lo.max(1)].join(" ")
}

/// Build the full index: infer the outline, attach bodies, segment,
/// summarize (parallel across sections, chained within), and embed both
/// channels eagerly so retrieval needs no embedding backend.
///
/// Nothing fatal propagates from backends: classification falls back to
/// rules, summaries to leading sentences, and embeddings to the
/// deterministic token-hash encoder.
pub fn build_index(markdown: &str, config: &RunConfig, backends: &Backends) -> PaperTree {
    let outline = infer_outline(
        markdown,
        backends.generator.as_ref(),
        config.confidence_threshold,
    );
    let bodies = section_bodies(markdown, &outline);
    let order = outline.preorder();

    let per_node: Vec<(Vec<String>, Vec<String>, Vec<bool>)> = par::map_ordered(&order, |&node| {
        let segments = segment_section(&bodies[node], config.segment_cap, &config.counter);
        let flags = segment_flags(&segments, config.segment_cap, &config.counter);
        let path = outline.path_titles(node);
        let mut summaries = Vec::with_capacity(segments.len());
        let mut previous = SECTION_START_TOKEN.to_string();
        for segment in &segments {
            let summary = summarize_segment(
                outline.title(),
                &path,
                segment,
                &previous,
                backends.generator.as_ref(),
                &config.counter,
                config.summary_cap,
            );
            previous.clone_from(&summary);
            summaries.push(summary);
        }
        (segments, summaries, flags)
    });

    let mut leaves = Vec::new();
    let mut section_index = BTreeMap::new();
    for (&node, (segments, summaries, flags)) in order.iter().zip(&per_node) {
        let start = leaves.len();
        let path = outline.path_titles(node);
        for (j, segment) in segments.iter().enumerate() {
            let order_index = leaves.len();
            leaves.push(LeafSegment {
                id: format!("n{node}s{j}"),
                raw_text: segment.clone(),
                summary: summaries[j].clone(),
                path: path.clone(),
                token_cost: config.counter.count(segment).max(1),
                order_index,
                section_id: node,
                over_budget: flags[j],
                raw_embedding: None,
                summary_embedding: None,
            });
        }
        section_index.insert(
            node,
            LeafRange {
                start,
                end: leaves.len(),
            },
        );
    }

    let raw_texts: Vec<String> = leaves.iter().map(|l| l.raw_text.clone()).collect();
    let summary_texts: Vec<String> = leaves.iter().map(|l| l.summary.clone()).collect();
    let raw_embeddings = embed_or_fallback(backends, &raw_texts);
    let summary_embeddings = embed_or_fallback(backends, &summary_texts);
    for ((leaf, raw), summary) in leaves
        .iter_mut()
        .zip(raw_embeddings)
        .zip(summary_embeddings)
    {
        leaf.raw_embedding = Some(raw);
        leaf.summary_embedding = Some(summary);
    }

    let doc_title = outline.title().to_string();
    PaperTree {
        outline,
        doc_title,
        leaves,
        section_index,
    }
}

/// Embed through the configured backend; on failure fall back to the
/// deterministic token-hash encoder so indexing always completes.
pub(crate) fn embed_or_fallback(backends: &Backends, texts: &[String]) -> Vec<Vec<f64>> {
    match backends.embedder.embed(texts) {
        Ok(vectors) => vectors,
        Err(e) => {
            log::warn!("embedding backend failed ({e}); using token-hash fallback");
            HashEmbedder::default()
                .embed(texts)
                .expect("hash embedder is infallible")
        }
    }
}
