//! Deterministic offline backends.
//!
//! Every stub here is a pure function of its input, so the whole
//! pipeline (index, query, answer prompt) is bit-reproducible across
//! runs and platforms. The prompt built by each caller starts with a
//! routing tag line (see [`tags`]); [`PipelineStub`] dispatches on that
//! tag and produces a plausible machine-readable reply per task.

use std::collections::{BTreeSet, HashMap};
use std::sync::Mutex;

use super::{normalize_in_place, BackendError, Embedder, Reranker, TextGenerator};

/// First-line routing tags shared by prompt builders and stubs.
pub mod tags {
    pub const RELATION: &str = "[relation]";
    pub const SUMMARY: &str = "[summary]";
    pub const SECTION_RELEVANCE: &str = "[section-relevance]";
    pub const DECOMPOSE: &str = "[decompose]";
    pub const ENTITIES: &str = "[entities]";
    pub const TRANSFORM: &str = "[transform]";
    pub const ANSWER: &str = "[answer]";
}

/// Tag line of a prompt, if any.
pub fn prompt_tag(prompt: &str) -> &str {
    prompt.lines().next().unwrap_or("").trim()
}

/// Declarative stub selection, mostly useful for tests and fixtures.
#[derive(Debug, Clone)]
pub enum StubSpec {
    Echo,
    FixedMap(HashMap<String, String>),
    HashEmbedding { dim: usize },
}

impl StubSpec {
    pub fn build_generator(&self) -> Option<Box<dyn TextGenerator>> {
        match self {
            StubSpec::Echo => Some(Box::new(EchoGenerator)),
            StubSpec::FixedMap(map) => Some(Box::new(FixedMapGenerator::new(map.clone()))),
            StubSpec::HashEmbedding { .. } => None,
        }
    }

    pub fn build_embedder(&self) -> Option<Box<dyn Embedder>> {
        match self {
            StubSpec::HashEmbedding { dim } => Some(Box::new(HashEmbedder::new(*dim))),
            _ => None,
        }
    }
}

/// Replies with the prompt itself.
#[derive(Debug, Default, Clone)]
pub struct EchoGenerator;

impl TextGenerator for EchoGenerator {
    fn generate(&self, prompt: &str) -> Result<String, BackendError> {
        Ok(prompt.to_string())
    }
}

/// Table lookup; unknown prompts fail so caller fallbacks fire.
#[derive(Debug, Default, Clone)]
pub struct FixedMapGenerator {
    map: HashMap<String, String>,
}

impl FixedMapGenerator {
    pub fn new(map: HashMap<String, String>) -> Self {
        Self { map }
    }
}

impl TextGenerator for FixedMapGenerator {
    fn generate(&self, prompt: &str) -> Result<String, BackendError> {
        self.map
            .get(prompt)
            .cloned()
            .ok_or_else(|| BackendError::Failed("no fixture for prompt".into()))
    }
}

/// Always fails; drives fault-injection tests.
#[derive(Debug, Default, Clone)]
pub struct FailingGenerator;

impl TextGenerator for FailingGenerator {
    fn generate(&self, _prompt: &str) -> Result<String, BackendError> {
        Err(BackendError::Failed("generator forced down".into()))
    }
}

/// Replies with a stable fingerprint of the whole prompt. Lets tests
/// verify exactly which signals a prompt depends on.
#[derive(Debug, Default, Clone)]
pub struct HashingGenerator;

impl TextGenerator for HashingGenerator {
    fn generate(&self, prompt: &str) -> Result<String, BackendError> {
        Ok(format!("{:016x}", fnv1a64(prompt.as_bytes())))
    }
}

/// Pops scripted replies in order; an exhausted script fails.
#[derive(Debug, Default)]
pub struct ScriptedGenerator {
    replies: Mutex<Vec<Result<String, String>>>,
}

impl ScriptedGenerator {
    pub fn new(replies: Vec<Result<String, String>>) -> Self {
        let mut replies = replies;
        replies.reverse();
        Self {
            replies: Mutex::new(replies),
        }
    }
}

impl TextGenerator for ScriptedGenerator {
    fn generate(&self, _prompt: &str) -> Result<String, BackendError> {
        match self.replies.lock().expect("script lock").pop() {
            Some(Ok(text)) => Ok(text),
            Some(Err(msg)) => Err(BackendError::Failed(msg)),
            None => Err(BackendError::Failed("script exhausted".into())),
        }
    }
}

/// Routes prompts by tag line to per-task generators, falling back to a
/// default for everything unrouted. The building block for selective
/// fault injection.
pub struct RoutedGenerator {
    routes: HashMap<&'static str, Box<dyn TextGenerator>>,
    fallback: Box<dyn TextGenerator>,
}

impl RoutedGenerator {
    pub fn new(fallback: Box<dyn TextGenerator>) -> Self {
        Self {
            routes: HashMap::new(),
            fallback,
        }
    }

    pub fn route(mut self, tag: &'static str, generator: Box<dyn TextGenerator>) -> Self {
        self.routes.insert(tag, generator);
        self
    }

    /// Pipeline stub everywhere except `tag`, which always fails.
    pub fn failing_at(tag: &'static str) -> Self {
        Self::new(Box::new(PipelineStub)).route(tag, Box::new(FailingGenerator))
    }
}

impl TextGenerator for RoutedGenerator {
    fn generate(&self, prompt: &str) -> Result<String, BackendError> {
        match self.routes.get(prompt_tag(prompt)) {
            Some(generator) => generator.generate(prompt),
            None => self.fallback.generate(prompt),
        }
    }
}

/// Deterministic replacement for every LLM task in the pipeline.
///
/// Replies are derived only from the prompt text, so two runs over the
/// same document and query produce identical output.
#[derive(Debug, Default, Clone)]
pub struct PipelineStub;

impl TextGenerator for PipelineStub {
    fn generate(&self, prompt: &str) -> Result<String, BackendError> {
        let reply = match prompt_tag(prompt) {
            tags::RELATION => relation_reply(prompt),
            tags::SUMMARY => summary_reply(prompt),
            tags::SECTION_RELEVANCE => section_relevance_reply(prompt),
            tags::DECOMPOSE => decompose_reply(prompt),
            tags::ENTITIES => entities_reply(prompt),
            tags::TRANSFORM => field(prompt, "Query: ").unwrap_or(prompt).to_string(),
            // Answer generation is an echo in stub mode: the caller sees
            // its own assembled context prompt verbatim.
            tags::ANSWER => prompt.to_string(),
            _ => prompt.to_string(),
        };
        Ok(reply)
    }
}

fn field<'a>(prompt: &'a str, label: &str) -> Option<&'a str> {
    prompt
        .lines()
        .find_map(|line| line.strip_prefix(label))
        .map(str::trim)
}

/// Everything after the first line equal to `label`.
fn block_after<'a>(prompt: &'a str, label: &str) -> Option<&'a str> {
    let start = prompt.find(label)? + label.len();
    Some(prompt[start..].trim_start_matches(['\r', '\n']))
}

fn relation_reply(prompt: &str) -> String {
    let heading_a = field(prompt, "Heading A: ").unwrap_or("");
    let heading_b = field(prompt, "Heading B: ").unwrap_or("");
    let depth_a: usize = field(prompt, "Hash depth A: ")
        .and_then(|v| v.parse().ok())
        .unwrap_or(1);
    let depth_b: usize = field(prompt, "Hash depth B: ")
        .and_then(|v| v.parse().ok())
        .unwrap_or(1);

    // Index into (child, sibling, ancestor_descendant, not_a_heading).
    let selected = if looks_like_body_text(heading_b) {
        3
    } else {
        match (
            numbering_components(heading_a),
            numbering_components(heading_b),
        ) {
            (Some(a), Some(b)) => {
                if b.len() == a.len() + 1 && b[..a.len()] == a[..] {
                    0
                } else if b.len() == a.len() && b[..b.len() - 1] == a[..a.len() - 1] {
                    1
                } else {
                    2
                }
            }
            _ => match depth_b.cmp(&depth_a) {
                std::cmp::Ordering::Greater => 0,
                std::cmp::Ordering::Equal => 1,
                std::cmp::Ordering::Less => 2,
            },
        }
    };

    let mut probs = [0.03; 4];
    probs[selected] = 0.91;
    format!(
        "{:.2}, {:.2}, {:.2}, {:.2}",
        probs[0], probs[1], probs[2], probs[3]
    )
}

fn looks_like_body_text(text: &str) -> bool {
    text.chars().count() > 120 || (text.ends_with('.') && text.split_whitespace().count() > 12)
}

/// Leading dotted numbering of a title ("3.2.1 Details" -> [3, 2, 1]).
pub fn numbering_components(title: &str) -> Option<Vec<u32>> {
    let first = title.split_whitespace().next()?;
    let trimmed = first.trim_end_matches('.');
    if trimmed.is_empty() {
        return None;
    }
    let mut parts = Vec::new();
    for piece in trimmed.split('.') {
        if piece.is_empty() || !piece.chars().all(|c| c.is_ascii_digit()) {
            return None;
        }
        parts.push(piece.parse().ok()?);
    }
    Some(parts)
}

fn summary_reply(prompt: &str) -> String {
    let segment = block_after(prompt, "Segment:").unwrap_or(prompt);
    first_sentences(segment, 1)
}

/// Up to `n` leading sentences of `text`; falls back to the whole text
/// when no sentence boundary is found.
pub fn first_sentences(text: &str, n: usize) -> String {
    let text = text.trim();
    let mut taken = 0usize;
    let mut end = text.len();
    let bytes = text.as_bytes();
    for (i, b) in bytes.iter().enumerate() {
        if matches!(b, b'.' | b'!' | b'?') {
            let next = bytes.get(i + 1);
            if next.is_none() || next.is_some_and(|c| c.is_ascii_whitespace()) {
                taken += 1;
                if taken == n {
                    end = i + 1;
                    break;
                }
            }
        }
    }
    text[..end].trim().to_string()
}

fn section_relevance_reply(prompt: &str) -> String {
    let query = field(prompt, "Query: ").unwrap_or("");
    let section = field(prompt, "Section: ").unwrap_or("");
    let query_tokens: BTreeSet<String> = lower_tokens(query).collect();
    if query_tokens.is_empty() {
        return "0.0000".to_string();
    }
    let section_tokens: BTreeSet<String> = lower_tokens(section).collect();
    let shared = query_tokens.intersection(&section_tokens).count();
    format!("{:.4}", shared as f64 / query_tokens.len() as f64)
}

fn decompose_reply(prompt: &str) -> String {
    let query = field(prompt, "Query: ").unwrap_or("").trim();
    let mut parts: Vec<String> = Vec::new();
    for piece in query.split_inclusive('?') {
        let piece = piece.trim();
        if !piece.is_empty() {
            parts.push(piece.to_string());
        }
        if parts.len() == 3 {
            break;
        }
    }
    if parts.len() < 2 {
        query.to_string()
    } else {
        parts.join("\n")
    }
}

fn entities_reply(prompt: &str) -> String {
    let context = block_after(prompt, "Context:").unwrap_or("");
    let mut entities: BTreeSet<String> = BTreeSet::new();
    for token in context.split_whitespace() {
        let clean = token.trim_matches(|c: char| !c.is_alphanumeric());
        if clean.chars().count() >= 4
            && clean.chars().next().is_some_and(|c| c.is_uppercase())
            && clean.chars().all(|c| c.is_alphanumeric())
        {
            entities.insert(clean.to_string());
        }
    }
    entities
        .into_iter()
        .map(|e| format!("{e}|0.90"))
        .collect::<Vec<_>>()
        .join("\n")
}

fn lower_tokens(text: &str) -> impl Iterator<Item = String> + '_ {
    text.split_whitespace().map(|t| {
        t.trim_matches(|c: char| !c.is_alphanumeric())
            .to_lowercase()
    })
}

/// Token-hash bag-of-words embedding: every lowercased whitespace token
/// hashes into a fixed-dimension bucket, then the vector is normalized.
/// Identical text gives identical unit vectors with nontrivial cosine
/// structure between related texts.
#[derive(Debug, Clone)]
pub struct HashEmbedder {
    dim: usize,
}

impl HashEmbedder {
    pub fn new(dim: usize) -> Self {
        assert!(dim > 0, "embedding dimension must be positive");
        Self { dim }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn embed_one(&self, text: &str) -> Vec<f64> {
        let mut v = vec![0.0; self.dim];
        for token in lower_tokens(text) {
            if token.is_empty() {
                continue;
            }
            let bucket = (fnv1a64(token.as_bytes()) % self.dim as u64) as usize;
            v[bucket] += 1.0;
        }
        normalize_in_place(&mut v);
        v
    }
}

impl Default for HashEmbedder {
    fn default() -> Self {
        Self::new(256)
    }
}

impl Embedder for HashEmbedder {
    fn embed(&self, texts: &[String]) -> Result<Vec<Vec<f64>>, BackendError> {
        Ok(texts.iter().map(|t| self.embed_one(t)).collect())
    }
}

/// Always fails; drives fault-injection tests.
#[derive(Debug, Default, Clone)]
pub struct FailingEmbedder;

impl Embedder for FailingEmbedder {
    fn embed(&self, _texts: &[String]) -> Result<Vec<Vec<f64>>, BackendError> {
        Err(BackendError::Failed("embedder forced down".into()))
    }
}

/// Scores each text by its count of distinct tokens shared with the query.
#[derive(Debug, Default, Clone)]
pub struct OverlapReranker;

impl Reranker for OverlapReranker {
    fn rerank(&self, query: &str, texts: &[String]) -> Result<Vec<f64>, BackendError> {
        let query_tokens: BTreeSet<String> = lower_tokens(query).collect();
        Ok(texts
            .iter()
            .map(|t| {
                let text_tokens: BTreeSet<String> = lower_tokens(t).collect();
                query_tokens.intersection(&text_tokens).count() as f64
            })
            .collect())
    }
}

/// Returns a fixed score sequence regardless of input.
#[derive(Debug, Default, Clone)]
pub struct FixedScoreReranker {
    pub scores: Vec<f64>,
}

impl Reranker for FixedScoreReranker {
    fn rerank(&self, _query: &str, texts: &[String]) -> Result<Vec<f64>, BackendError> {
        Ok((0..texts.len())
            .map(|i| self.scores.get(i).copied().unwrap_or(0.0))
            .collect())
    }
}

/// Always fails; drives fault-injection tests.
#[derive(Debug, Default, Clone)]
pub struct FailingReranker;

impl Reranker for FailingReranker {
    fn rerank(&self, _query: &str, _texts: &[String]) -> Result<Vec<f64>, BackendError> {
        Err(BackendError::Failed("reranker forced down".into()))
    }
}

pub(crate) fn fnv1a64(bytes: &[u8]) -> u64 {
    const OFFSET: u64 = 0xcbf29ce484222325;
    const PRIME: u64 = 0x100000001b3;
    let mut hash = OFFSET;
    for b in bytes {
        hash ^= u64::from(*b);
        hash = hash.wrapping_mul(PRIME);
    }
    hash
}
