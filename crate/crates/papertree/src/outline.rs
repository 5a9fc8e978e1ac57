//! Section-outline inference for Markdown documents.
//!
//! Hash-prefixed lines become heading candidates; every adjacent pair
//! is classified into one of four structural relations (child, sibling,
//! descendant of an earlier ancestor, not a heading); a reconciliation
//! pass turns the relation sequence into a valid rooted tree. Whenever
//! classifier confidence drops below the configured gate, deterministic
//! rules based on conventional section names, dotted numbering, and
//! hash depth assign the level instead, so outline inference succeeds
//! with no working classifier at all.

use serde::{Deserialize, Serialize};

use crate::backends::stub::{numbering_components, tags};
use crate::backends::TextGenerator;
use crate::par;

/// A hash-prefixed line that may be a real heading.
#[derive(Debug, Clone, PartialEq)]
pub struct HeadingCandidate {
    /// Heading line without the hash marks, trimmed.
    pub text: String,
    /// Count of leading `#` characters (not capped at 6).
    pub hash_depth: usize,
    /// Line position in the source document.
    pub line_index: usize,
    /// Classifier confidence, set during inference; 0 until classified.
    pub confidence: f64,
}

/// The four structural relations between adjacent heading candidates.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RelationKind {
    Child,
    Sibling,
    AncestorDescendant,
    NotAHeading,
}

impl RelationKind {
    pub const ALL: [RelationKind; 4] = [
        RelationKind::Child,
        RelationKind::Sibling,
        RelationKind::AncestorDescendant,
        RelationKind::NotAHeading,
    ];
}

/// Four-class probability distribution with the argmax selected.
/// Ties break in the declaration order of [`RelationKind::ALL`].
#[derive(Debug, Clone, PartialEq)]
pub struct RelationLabel {
    probs: [f64; 4],
    selected: RelationKind,
}

impl RelationLabel {
    /// Build from non-negative class weights; weights are normalized to
    /// sum to 1. Returns `None` for unusable inputs (negative, NaN, or
    /// all-zero weights).
    pub fn from_probs(raw: [f64; 4]) -> Option<Self> {
        if raw.iter().any(|p| !p.is_finite() || *p < 0.0) {
            return None;
        }
        let sum: f64 = raw.iter().sum();
        if sum <= 0.0 {
            return None;
        }
        let mut probs = raw;
        for p in probs.iter_mut() {
            *p /= sum;
        }
        let mut best = 0;
        for i in 1..4 {
            if probs[i] > probs[best] {
                best = i;
            }
        }
        Some(Self {
            probs,
            selected: RelationKind::ALL[best],
        })
    }

    /// Zero-confidence label used when the classifier reply cannot be
    /// parsed. Never marked `NotAHeading`, so a broken backend cannot
    /// delete headings.
    pub fn low_confidence() -> Self {
        Self {
            probs: [0.25; 4],
            selected: RelationKind::Child,
        }
    }

    pub fn selected(&self) -> RelationKind {
        self.selected
    }

    /// Probability of the selected class; 0 for unparsed replies.
    pub fn confidence(&self) -> f64 {
        if self.probs == [0.25; 4] {
            0.0
        } else {
            self.probs[RelationKind::ALL
                .iter()
                .position(|k| *k == self.selected)
                .expect("selected kind present")]
        }
    }

    pub fn probs(&self) -> &[f64; 4] {
        &self.probs
    }
}

/// One node of the inferred outline.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OutlineNode {
    pub title: String,
    /// Root is 0; every child is exactly one deeper than its parent.
    pub depth: usize,
    /// Source line of the heading (0 for a synthesized root).
    pub line_start: usize,
    /// Exclusive end of the node's own text block; the last node in
    /// document order extends to the end of the document.
    pub line_end: usize,
    pub parent: Option<usize>,
    pub children: Vec<usize>,
}

/// Rooted section tree in document order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OutlineTree {
    pub nodes: Vec<OutlineNode>,
}

impl OutlineTree {
    pub const ROOT: usize = 0;

    pub fn root(&self) -> &OutlineNode {
        &self.nodes[Self::ROOT]
    }

    pub fn title(&self) -> &str {
        &self.root().title
    }

    /// Node ids in document (pre-)order.
    pub fn preorder(&self) -> Vec<usize> {
        let mut out = Vec::with_capacity(self.nodes.len());
        let mut stack = vec![Self::ROOT];
        while let Some(id) = stack.pop() {
            out.push(id);
            for child in self.nodes[id].children.iter().rev() {
                stack.push(*child);
            }
        }
        out
    }

    /// Titles from the root down to `id`, inclusive.
    pub fn path_titles(&self, id: usize) -> Vec<String> {
        let mut path = Vec::new();
        let mut cursor = Some(id);
        while let Some(n) = cursor {
            path.push(self.nodes[n].title.clone());
            cursor = self.nodes[n].parent;
        }
        path.reverse();
        path
    }

    /// Node ids in the subtree rooted at `id`, document order.
    pub fn subtree(&self, id: usize) -> Vec<usize> {
        let mut out = Vec::new();
        let mut stack = vec![id];
        while let Some(n) = stack.pop() {
            out.push(n);
            for child in self.nodes[n].children.iter().rev() {
                stack.push(*child);
            }
        }
        out
    }

    /// Check the structural invariants: a single rooted tree, child
    /// depth = parent depth + 1, and line starts strictly increasing in
    /// document order.
    pub fn validate(&self) -> Result<(), String> {
        if self.nodes.is_empty() {
            return Err("outline has no nodes".into());
        }
        if self.nodes[Self::ROOT].parent.is_some() {
            return Err("root has a parent".into());
        }
        if self.nodes[Self::ROOT].depth != 0 {
            return Err("root depth is not 0".into());
        }
        for (id, node) in self.nodes.iter().enumerate() {
            if id != Self::ROOT {
                let Some(parent) = node.parent else {
                    return Err(format!("node {id} has no parent"));
                };
                let parent_node = self
                    .nodes
                    .get(parent)
                    .ok_or_else(|| format!("node {id} parent {parent} out of range"))?;
                if node.depth != parent_node.depth + 1 {
                    return Err(format!(
                        "node {id} depth {} != parent depth {} + 1",
                        node.depth, parent_node.depth
                    ));
                }
                if !parent_node.children.contains(&id) {
                    return Err(format!("node {id} missing from parent child list"));
                }
            }
        }
        let order = self.preorder();
        if order.len() != self.nodes.len() {
            return Err(format!(
                "tree is not connected: reached {} of {} nodes",
                order.len(),
                self.nodes.len()
            ));
        }
        for pair in order.windows(2) {
            let (a, b) = (&self.nodes[pair[0]], &self.nodes[pair[1]]);
            if b.line_start <= a.line_start {
                return Err(format!(
                    "line starts not increasing: {} then {}",
                    a.line_start, b.line_start
                ));
            }
        }
        Ok(())
    }
}

/// Extract heading candidates: every line whose first non-whitespace
/// character is `#`, skipping lines inside ``` fenced code blocks.
/// Lines with no text after the hashes are ignored.
pub fn extract_heading_candidates(markdown: &str) -> Vec<HeadingCandidate> {
    let mut candidates = Vec::new();
    let mut in_fence = false;
    for (line_index, line) in markdown.lines().enumerate() {
        let trimmed = line.trim_start();
        if trimmed.starts_with("```") {
            in_fence = !in_fence;
            continue;
        }
        if in_fence || !trimmed.starts_with('#') {
            continue;
        }
        let hash_depth = trimmed.chars().take_while(|c| *c == '#').count();
        let text = trimmed[hash_depth..].trim();
        if text.is_empty() {
            continue;
        }
        candidates.push(HeadingCandidate {
            text: text.to_string(),
            hash_depth,
            line_index,
            confidence: 0.0,
        });
    }
    candidates
}

/// Render candidates back to heading lines (used by tests to check
/// extraction is idempotent on its own output).
pub fn render_headings(candidates: &[HeadingCandidate]) -> String {
    candidates
        .iter()
        .map(|c| format!("{} {}", "#".repeat(c.hash_depth), c.text))
        .collect::<Vec<_>>()
        .join("\n")
}

/// Body excerpts shown to the relation classifier alongside the titles.
#[derive(Debug, Clone, Default)]
pub struct PairContext {
    pub after_prev: String,
    pub after_next: String,
}

/// Excerpt of up to `limit` characters following each candidate's
/// heading line.
pub fn pair_context(
    lines: &[&str],
    prev: &HeadingCandidate,
    next: &HeadingCandidate,
    limit: usize,
) -> PairContext {
    let excerpt = |start: usize| -> String {
        let mut out = String::new();
        for line in lines.iter().skip(start + 1) {
            if out.len() >= limit {
                break;
            }
            if !out.is_empty() {
                out.push(' ');
            }
            out.push_str(line.trim());
        }
        let mut cut = out.len().min(limit);
        while cut > 0 && !out.is_char_boundary(cut) {
            cut -= 1;
        }
        out.truncate(cut);
        out
    };
    PairContext {
        after_prev: excerpt(prev.line_index),
        after_next: excerpt(next.line_index),
    }
}

fn relation_prompt(
    prev: &HeadingCandidate,
    next: &HeadingCandidate,
    context: &PairContext,
) -> String {
    format!(
        "{tag}\nTwo consecutive heading candidates from one document.\n\
         Heading A: {a}\nHash depth A: {da}\nContext A: {ca}\n\
         Heading B: {b}\nHash depth B: {db}\nContext B: {cb}\n\
         Classify heading B relative to heading A. Reply with exactly four\n\
         probabilities in [0, 1] summing to 1, comma-separated, in this order:\n\
         child, sibling, ancestor_descendant, not_a_heading.",
        tag = tags::RELATION,
        a = prev.text,
        da = prev.hash_depth,
        ca = context.after_prev,
        b = next.text,
        db = next.hash_depth,
        cb = context.after_next,
    )
}

/// Parse a strict four-number probability vector from a classifier
/// reply. Anything else is a parse failure mapping to zero confidence,
/// never to a guessed label.
fn parse_relation_reply(reply: &str) -> Option<RelationLabel> {
    let numbers: Vec<f64> = reply
        .split(|c: char| c == ',' || c.is_whitespace())
        .filter(|t| !t.is_empty())
        .map(|t| t.parse::<f64>())
        .collect::<Result<_, _>>()
        .ok()?;
    if numbers.len() != 4 {
        return None;
    }
    RelationLabel::from_probs([numbers[0], numbers[1], numbers[2], numbers[3]])
}

/// Classify the structural relation of `next` relative to `prev`.
/// Backend failure or an unparseable reply yields a zero-confidence
/// label so the caller's rule fallback fires; the pipeline never aborts
/// here.
pub fn classify_adjacent_pair(
    prev: &HeadingCandidate,
    next: &HeadingCandidate,
    context: &PairContext,
    generator: &dyn TextGenerator,
) -> RelationLabel {
    let prompt = relation_prompt(prev, next, context);
    match generator.generate(&prompt) {
        Ok(reply) => parse_relation_reply(&reply).unwrap_or_else(|| {
            log::warn!("unparseable relation reply for '{}'", next.text);
            RelationLabel::low_confidence()
        }),
        Err(e) => {
            log::warn!("relation classifier failed for '{}': {e}", next.text);
            RelationLabel::low_confidence()
        }
    }
}

const CONVENTIONAL_SECTIONS: [&str; 16] = [
    "introduction",
    "related work",
    "background",
    "method",
    "methods",
    "methodology",
    "approach",
    "experiments",
    "results",
    "evaluation",
    "discussion",
    "conclusion",
    "conclusions",
    "references",
    "appendix",
    "abstract",
];

/// Rule-based depth assignment, used whenever classifier confidence is
/// below the gate. Conventional top-level section names pin depth 1,
/// dotted numbering gives its component count, and otherwise the hash
/// depth is clamped against the current ancestor stack. Non-title
/// candidates always land at depth >= 1, which realizes the ultimate
/// title-primary/rest-secondary degradation.
pub fn rule_fallback_level(candidate: &HeadingCandidate, current_stack: &[String]) -> usize {
    let lowered = candidate.text.trim().to_lowercase();
    if CONVENTIONAL_SECTIONS.contains(&lowered.as_str()) {
        return 1;
    }
    if let Some(components) = numbering_components(&candidate.text) {
        return components.len();
    }
    candidate.hash_depth.clamp(1, current_stack.len() + 1)
}

/// Rebuild a valid tree from candidates and adjacent-pair labels.
///
/// `relations[i]` labels `candidates[i + 1]` relative to `candidates[i]`.
/// The first candidate is the document title and becomes the root.
/// Candidates confidently labeled `NotAHeading` are dropped (their text
/// stays in the body stream); low-confidence candidates get their depth
/// from [`rule_fallback_level`]. With zero surviving candidates a root
/// titled "Document" is synthesized.
pub fn reconcile_hierarchy(
    candidates: &[HeadingCandidate],
    relations: &[RelationLabel],
    confidence_threshold: f64,
) -> OutlineTree {
    assert_eq!(
        relations.len(),
        candidates.len().saturating_sub(1),
        "one relation per adjacent candidate pair"
    );
    if candidates.is_empty() {
        return synthetic_document_tree();
    }

    let max_line = candidates.iter().map(|c| c.line_index).max().unwrap_or(0);
    let mut nodes = vec![OutlineNode {
        title: candidates[0].text.clone(),
        depth: 0,
        line_start: candidates[0].line_index,
        line_end: max_line + 1,
        parent: None,
        children: Vec::new(),
    }];
    // Stack of open ancestors, root at the bottom.
    let mut stack: Vec<usize> = vec![0];

    for (candidate, relation) in candidates[1..].iter().zip(relations) {
        let confident = candidate.confidence >= confidence_threshold;
        if confident && relation.selected() == RelationKind::NotAHeading {
            continue;
        }
        let current_depth = nodes[*stack.last().expect("stack non-empty")].depth;
        let target_depth = if confident {
            match relation.selected() {
                RelationKind::Child => current_depth + 1,
                RelationKind::Sibling => current_depth.max(1),
                // Attach as child of the ancestor two levels up: pop
                // exactly one level, clamped so the root stays unique.
                RelationKind::AncestorDescendant => current_depth.saturating_sub(1).max(1),
                RelationKind::NotAHeading => unreachable!("dropped above"),
            }
        } else {
            let titles: Vec<String> = stack.iter().map(|id| nodes[*id].title.clone()).collect();
            rule_fallback_level(candidate, &titles)
        };

        while stack.len() > 1 && nodes[*stack.last().expect("stack")].depth >= target_depth {
            stack.pop();
        }
        let parent = *stack.last().expect("root remains");
        // The stack may be shallower than requested after drops; the
        // node depth follows the actual parent to keep the tree valid.
        let depth = nodes[parent].depth + 1;
        let id = nodes.len();
        nodes.push(OutlineNode {
            title: candidate.text.clone(),
            depth,
            line_start: candidate.line_index,
            line_end: max_line + 1,
            parent: Some(parent),
            children: Vec::new(),
        });
        nodes[parent].children.push(id);
        stack.push(id);
    }

    // Own-text spans: each node's block ends where the next heading
    // (in document order) starts.
    let mut order: Vec<usize> = (0..nodes.len()).collect();
    order.sort_by_key(|id| nodes[*id].line_start);
    for pair in order.windows(2) {
        nodes[pair[0]].line_end = nodes[pair[1]].line_start;
    }

    OutlineTree { nodes }
}

fn synthetic_document_tree() -> OutlineTree {
    OutlineTree {
        nodes: vec![OutlineNode {
            title: "Document".to_string(),
            depth: 0,
            line_start: 0,
            line_end: usize::MAX,
            parent: None,
            children: Vec::new(),
        }],
    }
}

/// Full outline inference: extract candidates, classify adjacent pairs
/// (fanned out in parallel, each pair independent), then reconcile.
pub fn infer_outline(
    markdown: &str,
    generator: &dyn TextGenerator,
    confidence_threshold: f64,
) -> OutlineTree {
    let mut candidates = extract_heading_candidates(markdown);
    if candidates.is_empty() {
        return synthetic_document_tree();
    }
    let lines: Vec<&str> = markdown.lines().collect();
    let pairs: Vec<(HeadingCandidate, HeadingCandidate, PairContext)> = candidates
        .windows(2)
        .map(|w| {
            let context = pair_context(&lines, &w[0], &w[1], 200);
            (w[0].clone(), w[1].clone(), context)
        })
        .collect();
    let relations = par::map_ordered(&pairs, |(prev, next, context)| {
        classify_adjacent_pair(prev, next, context, generator)
    });
    for (candidate, relation) in candidates[1..].iter_mut().zip(&relations) {
        candidate.confidence = relation.confidence();
    }
    reconcile_hierarchy(&candidates, &relations, confidence_threshold)
}

/// Outline inference with the classifier bypassed entirely; every level
/// comes from [`rule_fallback_level`].
pub fn rule_based_outline(markdown: &str) -> OutlineTree {
    let candidates = extract_heading_candidates(markdown);
    if candidates.is_empty() {
        return synthetic_document_tree();
    }
    let relations = vec![RelationLabel::low_confidence(); candidates.len() - 1];
    reconcile_hierarchy(&candidates, &relations, 1.0)
}
