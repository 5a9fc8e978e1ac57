//! HTTP JSON clients for chat-completion, embedding, and rerank
//! endpoints, compatible with the widely deployed inference-server
//! request shapes. Requests retry with exponential backoff; an
//! in-process limiter bounds concurrent calls per service.

use std::sync::{Condvar, Mutex};
use std::time::Duration;

use serde_json::{json, Value};
use ureq::Agent;

use super::{normalize_in_place, BackendConfig, BackendError, Embedder, Reranker, TextGenerator};

const BACKOFF_BASE_MS: u64 = 200;
const BACKOFF_CAP_MS: u64 = 2_000;

/// Counting semaphore bounding in-flight requests.
struct Limiter {
    permits: Mutex<usize>,
    available: Condvar,
}

impl Limiter {
    fn new(permits: usize) -> Self {
        Self {
            permits: Mutex::new(permits),
            available: Condvar::new(),
        }
    }

    fn acquire(&self) -> LimiterGuard<'_> {
        let mut permits = self.permits.lock().expect("limiter lock");
        while *permits == 0 {
            permits = self.available.wait(permits).expect("limiter wait");
        }
        *permits -= 1;
        LimiterGuard { limiter: self }
    }
}

struct LimiterGuard<'a> {
    limiter: &'a Limiter,
}

impl Drop for LimiterGuard<'_> {
    fn drop(&mut self) {
        let mut permits = self.limiter.permits.lock().expect("limiter lock");
        *permits += 1;
        self.limiter.available.notify_one();
    }
}

/// Shared transport: agent, config, limiter, retry loop.
struct Transport {
    agent: Agent,
    config: BackendConfig,
    limiter: Limiter,
}

impl Transport {
    fn new(config: BackendConfig) -> Result<Self, BackendError> {
        config.validate()?;
        let agent: Agent = Agent::config_builder()
            .timeout_global(Some(Duration::from_secs_f64(config.timeout_secs)))
            .http_status_as_error(false)
            .build()
            .into();
        let limiter = Limiter::new(config.max_in_flight);
        Ok(Self {
            agent,
            config,
            limiter,
        })
    }

    fn url(&self, path: &str) -> String {
        format!("{}/{}", self.config.endpoint.trim_end_matches('/'), path)
    }

    /// POST `body` to `path`, retrying transient failures with
    /// exponential backoff. All calls are idempotent reads, so a retry
    /// never duplicates side effects.
    fn post_json(&self, path: &str, body: &Value) -> Result<Value, BackendError> {
        let url = self.url(path);
        let attempts = self.config.max_retries + 1;
        let mut last = String::new();
        for attempt in 0..attempts {
            if attempt > 0 {
                let backoff = BACKOFF_BASE_MS
                    .saturating_mul(1 << (attempt - 1).min(8))
                    .min(BACKOFF_CAP_MS);
                std::thread::sleep(Duration::from_millis(backoff));
            }
            let _permit = self.limiter.acquire();
            let mut request = self.agent.post(&url);
            if let Some(credential) = &self.config.credential {
                request = request.header("authorization", &format!("Bearer {credential}"));
            }
            match request.send_json(body) {
                Ok(mut response) => {
                    let status = response.status().as_u16();
                    if (200..300).contains(&status) {
                        return response
                            .body_mut()
                            .read_json::<Value>()
                            .map_err(|e| BackendError::Parse(format!("invalid JSON body: {e}")));
                    }
                    last = BackendError::Status { status }.to_string();
                }
                Err(e) => {
                    last = BackendError::Transport(e.to_string()).to_string();
                }
            }
        }
        Err(BackendError::Exhausted { attempts, last })
    }
}

pub struct HttpGenerator {
    transport: Transport,
}

impl HttpGenerator {
    pub fn new(config: BackendConfig) -> Result<Self, BackendError> {
        Ok(Self {
            transport: Transport::new(config)?,
        })
    }
}

impl TextGenerator for HttpGenerator {
    fn generate(&self, prompt: &str) -> Result<String, BackendError> {
        if prompt.is_empty() {
            return Err(BackendError::Config("empty prompt".into()));
        }
        let body = chat_request(&self.transport.config.model, prompt);
        let reply = self.transport.post_json("chat/completions", &body)?;
        parse_chat_reply(&reply)
    }
}

pub struct HttpEmbedder {
    transport: Transport,
}

impl HttpEmbedder {
    pub fn new(config: BackendConfig) -> Result<Self, BackendError> {
        Ok(Self {
            transport: Transport::new(config)?,
        })
    }
}

impl Embedder for HttpEmbedder {
    fn embed(&self, texts: &[String]) -> Result<Vec<Vec<f64>>, BackendError> {
        if texts.is_empty() {
            return Ok(Vec::new());
        }
        let body = embed_request(&self.transport.config.model, texts);
        let reply = self.transport.post_json("embeddings", &body)?;
        parse_embed_reply(&reply, texts.len())
    }
}

pub struct HttpReranker {
    transport: Transport,
}

impl HttpReranker {
    pub fn new(config: BackendConfig) -> Result<Self, BackendError> {
        Ok(Self {
            transport: Transport::new(config)?,
        })
    }
}

impl Reranker for HttpReranker {
    fn rerank(&self, query: &str, texts: &[String]) -> Result<Vec<f64>, BackendError> {
        if texts.is_empty() {
            return Ok(Vec::new());
        }
        let body = rerank_request(&self.transport.config.model, query, texts);
        let reply = self.transport.post_json("rerank", &body)?;
        parse_rerank_reply(&reply, texts.len())
    }
}

pub(crate) fn chat_request(model: &str, prompt: &str) -> Value {
    json!({
        "model": model,
        "messages": [{"role": "user", "content": prompt}],
        "temperature": 0,
    })
}

pub(crate) fn parse_chat_reply(reply: &Value) -> Result<String, BackendError> {
    reply["choices"][0]["message"]["content"]
        .as_str()
        .map(str::to_string)
        .ok_or_else(|| BackendError::Parse("missing choices[0].message.content".into()))
}

pub(crate) fn embed_request(model: &str, texts: &[String]) -> Value {
    json!({
        "model": model,
        "input": texts,
    })
}

pub(crate) fn parse_embed_reply(
    reply: &Value,
    expected: usize,
) -> Result<Vec<Vec<f64>>, BackendError> {
    let data = reply["data"]
        .as_array()
        .ok_or_else(|| BackendError::Parse("missing data array".into()))?;
    if data.len() != expected {
        return Err(BackendError::Parse(format!(
            "expected {expected} embeddings, got {}",
            data.len()
        )));
    }
    let mut out = vec![Vec::new(); expected];
    for (position, item) in data.iter().enumerate() {
        let index = item["index"]
            .as_u64()
            .map(|i| i as usize)
            .unwrap_or(position);
        if index >= expected {
            return Err(BackendError::Parse(format!(
                "embedding index {index} out of range"
            )));
        }
        let raw = item["embedding"]
            .as_array()
            .ok_or_else(|| BackendError::Parse("missing data[].embedding".into()))?;
        let mut vector = Vec::with_capacity(raw.len());
        for x in raw {
            vector.push(
                x.as_f64()
                    .ok_or_else(|| BackendError::Parse("non-numeric embedding entry".into()))?,
            );
        }
        normalize_in_place(&mut vector);
        out[index] = vector;
    }
    Ok(out)
}

pub(crate) fn rerank_request(model: &str, query: &str, texts: &[String]) -> Value {
    json!({
        "model": model,
        "query": query,
        "documents": texts,
    })
}

pub(crate) fn parse_rerank_reply(reply: &Value, expected: usize) -> Result<Vec<f64>, BackendError> {
    let results = reply["results"]
        .as_array()
        .ok_or_else(|| BackendError::Parse("missing results array".into()))?;
    let mut out = vec![0.0; expected];
    let mut seen = vec![false; expected];
    for item in results {
        let index = item["index"]
            .as_u64()
            .ok_or_else(|| BackendError::Parse("missing results[].index".into()))?
            as usize;
        if index >= expected {
            return Err(BackendError::Parse(format!(
                "rerank index {index} out of range"
            )));
        }
        out[index] = item["relevance_score"]
            .as_f64()
            .ok_or_else(|| BackendError::Parse("missing results[].relevance_score".into()))?;
        seen[index] = true;
    }
    if seen.iter().any(|s| !s) {
        return Err(BackendError::Parse("rerank reply missing entries".into()));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use std::io::{Read, Write};
    use std::net::TcpListener;
    use std::sync::atomic::{AtomicU32, Ordering};
    use std::sync::Arc;

    use super::*;

    // Request/response wire shapes are pinned to recorded fixtures so a
    // compatible server keeps working across refactors.

    #[test]
    fn chat_request_wire_shape() {
        let body = chat_request("m1", "hello");
        assert_eq!(
            body.to_string(),
            r#"{"messages":[{"content":"hello","role":"user"}],"model":"m1","temperature":0}"#
        );
    }

    #[test]
    fn embed_request_wire_shape() {
        let body = embed_request("e1", &["a".to_string(), "b".to_string()]);
        assert_eq!(body.to_string(), r#"{"input":["a","b"],"model":"e1"}"#);
    }

    #[test]
    fn rerank_request_wire_shape() {
        let body = rerank_request("r1", "q", &["d".to_string()]);
        assert_eq!(
            body.to_string(),
            r#"{"documents":["d"],"model":"r1","query":"q"}"#
        );
    }

    #[test]
    fn chat_reply_fixture_parses() {
        let reply: Value = serde_json::from_str(
            r#"{"id":"x","choices":[{"index":0,"message":{"role":"assistant","content":"fine"}}]}"#,
        )
        .unwrap();
        assert_eq!(parse_chat_reply(&reply).unwrap(), "fine");
        assert!(parse_chat_reply(&json!({"choices": []})).is_err());
    }

    #[test]
    fn embed_reply_fixture_parses_and_normalizes() {
        let reply: Value = serde_json::from_str(
            r#"{"data":[{"index":1,"embedding":[0.0,2.0]},{"index":0,"embedding":[3.0,4.0]}]}"#,
        )
        .unwrap();
        let vectors = parse_embed_reply(&reply, 2).unwrap();
        assert!((vectors[0][0] - 0.6).abs() < 1e-12);
        assert!((vectors[0][1] - 0.8).abs() < 1e-12);
        assert_eq!(vectors[1], vec![0.0, 1.0]);
    }

    #[test]
    fn rerank_reply_fixture_parses() {
        let reply: Value = serde_json::from_str(
            r#"{"results":[{"index":0,"relevance_score":0.9},{"index":1,"relevance_score":0.1}]}"#,
        )
        .unwrap();
        assert_eq!(parse_rerank_reply(&reply, 2).unwrap(), vec![0.9, 0.1]);
        assert!(parse_rerank_reply(&reply, 3).is_err());
    }

    /// Minimal HTTP responder that always returns 500 and counts hits.
    fn failing_server(hits: Arc<AtomicU32>) -> String {
        let listener = TcpListener::bind("127.0.0.1:0").unwrap();
        let addr = listener.local_addr().unwrap();
        std::thread::spawn(move || {
            for stream in listener.incoming() {
                let Ok(mut stream) = stream else { break };
                hits.fetch_add(1, Ordering::SeqCst);
                let mut buf = [0u8; 4096];
                let _ = stream.read(&mut buf);
                let _ = stream.write_all(
                    b"HTTP/1.1 500 Internal Server Error\r\ncontent-length: 0\r\nconnection: close\r\n\r\n",
                );
            }
        });
        format!("http://{addr}")
    }

    #[test]
    fn generate_retries_then_fails() {
        let hits = Arc::new(AtomicU32::new(0));
        let endpoint = failing_server(hits.clone());
        let mut config = BackendConfig::new(endpoint, "m");
        config.max_retries = 2;
        config.timeout_secs = 5.0;
        let generator = HttpGenerator::new(config).unwrap();
        let err = generator.generate("hi").unwrap_err();
        match err {
            BackendError::Exhausted { attempts, .. } => assert_eq!(attempts, 3),
            other => panic!("unexpected error: {other}"),
        }
        assert_eq!(hits.load(Ordering::SeqCst), 3);
    }

    #[test]
    fn unreachable_endpoint_is_transport_error() {
        let mut config = BackendConfig::new("http://127.0.0.1:1", "m");
        config.max_retries = 0;
        config.timeout_secs = 1.0;
        let generator = HttpGenerator::new(config).unwrap();
        assert!(generator.generate("hi").is_err());
    }

    /// One-shot responder that returns the given JSON body with 200 and
    /// captures the full request (headers plus content-length body).
    fn ok_server(body: &'static str, seen: Arc<std::sync::Mutex<String>>) -> String {
        let listener = TcpListener::bind("127.0.0.1:0").unwrap();
        let addr = listener.local_addr().unwrap();
        std::thread::spawn(move || {
            if let Ok((mut stream, _)) = listener.accept() {
                stream
                    .set_read_timeout(Some(std::time::Duration::from_millis(500)))
                    .ok();
                let mut data = Vec::new();
                let mut buf = [0u8; 4096];
                loop {
                    match stream.read(&mut buf) {
                        Ok(0) | Err(_) => break,
                        Ok(n) => data.extend_from_slice(&buf[..n]),
                    }
                    let Some(end) = data.windows(4).position(|w| w == b"\r\n\r\n") else {
                        continue;
                    };
                    let headers = String::from_utf8_lossy(&data[..end]).to_lowercase();
                    let content_length = headers
                        .lines()
                        .find_map(|l| l.strip_prefix("content-length:"))
                        .and_then(|v| v.trim().parse::<usize>().ok())
                        .unwrap_or(0);
                    if data.len() >= end + 4 + content_length {
                        break;
                    }
                }
                *seen.lock().unwrap() = String::from_utf8_lossy(&data).to_string();
                let response = format!(
                    "HTTP/1.1 200 OK\r\ncontent-type: application/json\r\ncontent-length: {}\r\nconnection: close\r\n\r\n{}",
                    body.len(),
                    body
                );
                let _ = stream.write_all(response.as_bytes());
            }
        });
        format!("http://{addr}")
    }

    #[test]
    fn generate_success_round_trip() {
        let seen = Arc::new(std::sync::Mutex::new(String::new()));
        let endpoint = ok_server(
            r#"{"choices":[{"message":{"role":"assistant","content":"fine"}}]}"#,
            seen.clone(),
        );
        let mut config = BackendConfig::new(endpoint, "m1");
        config.max_retries = 0;
        config.credential = Some("sekrit".to_string());
        let generator = HttpGenerator::new(config).unwrap();
        assert_eq!(generator.generate("hello").unwrap(), "fine");
        let request = seen.lock().unwrap().to_lowercase();
        assert!(request.starts_with("post /chat/completions"), "{request}");
        assert!(request.contains("authorization: bearer sekrit"));
        assert!(request.contains(r#""content": "hello""#), "{request}");
    }

    #[test]
    fn embed_success_round_trip() {
        let seen = Arc::new(std::sync::Mutex::new(String::new()));
        let endpoint = ok_server(
            r#"{"data":[{"index":0,"embedding":[3.0,4.0]}]}"#,
            seen.clone(),
        );
        let mut config = BackendConfig::new(endpoint, "e1");
        config.max_retries = 0;
        let embedder = HttpEmbedder::new(config).unwrap();
        let vectors = embedder.embed(&["text".to_string()]).unwrap();
        assert!((vectors[0][0] - 0.6).abs() < 1e-12);
        let request = seen.lock().unwrap().to_lowercase();
        assert!(request.starts_with("post /embeddings"), "{request}");
    }
}
