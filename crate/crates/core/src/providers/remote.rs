//! HTTP clients for OpenAI-compatible chat and embedding endpoints, plus
//! simple JSON reranker and NER services.

use std::time::Duration;

use reqwest::blocking::Client;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use super::{
    check_embed_inputs, resolve_overlaps, validate_messages, ChatMessage, ChatProvider, Decoding,
    Embedder, Embedding, EntityCategory, NamedEntity, NerProvider, ProviderError, Reranker,
};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RetryPolicy {
    pub attempts: u32,
    pub initial_backoff_ms: u64,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        RetryPolicy {
            attempts: 3,
            initial_backoff_ms: 500,
        }
    }
}

impl RetryPolicy {
    /// Delay before retry number `n` (1-based): initial · 2^(n-1).
    pub fn backoff(&self, n: u32) -> Duration {
        Duration::from_millis(
            self.initial_backoff_ms
                .saturating_mul(1u64 << (n.saturating_sub(1)).min(16)),
        )
    }

    pub fn run<T>(
        &self,
        mut op: impl FnMut() -> Result<T, ProviderError>,
    ) -> Result<T, ProviderError> {
        let attempts = self.attempts.max(1);
        let mut attempt = 1;
        loop {
            match op() {
                Err(e) if e.is_retryable() && attempt < attempts => {
                    log::warn!("provider call failed (attempt {attempt}/{attempts}): {e}");
                    std::thread::sleep(self.backoff(attempt));
                    attempt += 1;
                }
                other => return other,
            }
        }
    }
}

/// Endpoint settings shared by all HTTP providers. `base_url` includes any
/// version prefix, e.g. `http://localhost:8000/v1`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HttpConfig {
    pub base_url: String,
    pub model: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub api_key: Option<String>,
    pub timeout_secs: u64,
    #[serde(default)]
    pub retry: RetryPolicy,
}

impl HttpConfig {
    pub fn new(base_url: impl Into<String>, model: impl Into<String>) -> Self {
        HttpConfig {
            base_url: base_url.into(),
            model: model.into(),
            api_key: None,
            timeout_secs: 60,
            retry: RetryPolicy::default(),
        }
    }

    fn url(&self, path: &str) -> String {
        format!(
            "{}/{}",
            self.base_url.trim_end_matches('/'),
            path.trim_start_matches('/')
        )
    }
}

#[derive(Debug, Clone)]
struct JsonClient {
    cfg: HttpConfig,
    client: Client,
}

impl JsonClient {
    fn new(cfg: HttpConfig) -> Result<Self, ProviderError> {
        if cfg.base_url.trim().is_empty() {
            return Err(ProviderError::Config("base_url is empty".into()));
        }
        let client = Client::builder()
            .timeout(Duration::from_secs(cfg.timeout_secs.max(1)))
            .build()
            .map_err(|e| ProviderError::Config(format!("building HTTP client: {e}")))?;
        Ok(JsonClient { cfg, client })
    }

    fn post(&self, path: &str, body: &Value) -> Result<Value, ProviderError> {
        let url = self.cfg.url(path);
        self.cfg.retry.run(|| {
            let mut req = self.client.post(&url).json(body);
            if let Some(key) = &self.cfg.api_key {
                req = req.bearer_auth(key);
            }
            let resp = req
                .send()
                .map_err(|e| ProviderError::Transport(e.to_string()))?;
            let status = resp.status();
            let text = resp
                .text()
                .map_err(|e| ProviderError::Transport(e.to_string()))?;
            if !status.is_success() {
                return Err(ProviderError::Status {
                    status: status.as_u16(),
                    body: text,
                });
            }
            serde_json::from_str(&text).map_err(|e| ProviderError::Malformed(format!("{url}: {e}")))
        })
    }
}

/// `POST {base}/chat/completions`.
#[derive(Debug, Clone)]
pub struct OpenAiChat {
    http: JsonClient,
}

impl OpenAiChat {
    pub fn new(cfg: HttpConfig) -> Result<Self, ProviderError> {
        Ok(OpenAiChat {
            http: JsonClient::new(cfg)?,
        })
    }
}

impl ChatProvider for OpenAiChat {
    fn chat(&self, messages: &[ChatMessage], decoding: &Decoding) -> Result<String, ProviderError> {
        validate_messages(messages)?;
        let msgs: Vec<Value> = messages
            .iter()
            .map(|m| json!({"role": m.role.as_str(), "content": m.content}))
            .collect();
        let mut body = json!({
            "model": self.http.cfg.model,
            "messages": msgs,
            "max_tokens": decoding.max_tokens,
            "temperature": if decoding.greedy { 0.0 } else { decoding.temperature },
        });
        if decoding.greedy {
            body["top_p"] = json!(1.0);
        }
        let v = self.http.post("chat/completions", &body)?;
        v.pointer("/choices/0/message/content")
            .and_then(Value::as_str)
            .map(str::to_string)
            .ok_or_else(|| ProviderError::Malformed("missing choices[0].message.content".into()))
    }
}

/// `POST {base}/embeddings`. Returned vectors are re-normalized and their
/// dimension checked against the configured one.
#[derive(Debug, Clone)]
pub struct OpenAiEmbedder {
    http: JsonClient,
    dim: usize,
}

impl OpenAiEmbedder {
    pub fn new(cfg: HttpConfig, dim: usize) -> Result<Self, ProviderError> {
        Ok(OpenAiEmbedder {
            http: JsonClient::new(cfg)?,
            dim,
        })
    }
}

#[derive(Deserialize)]
struct EmbeddingDatum {
    index: Option<usize>,
    embedding: Vec<f64>,
}

#[derive(Deserialize)]
struct EmbeddingResponse {
    data: Vec<EmbeddingDatum>,
}

impl Embedder for OpenAiEmbedder {
    fn dim(&self) -> usize {
        self.dim
    }

    fn embed(&self, texts: &[&str]) -> Result<Vec<Embedding>, ProviderError> {
        check_embed_inputs(texts)?;
        let body = json!({"model": self.http.cfg.model, "input": texts});
        let v = self.http.post("embeddings", &body)?;
        let mut resp: EmbeddingResponse = serde_json::from_value(v)
            .map_err(|e| ProviderError::Malformed(format!("embeddings: {e}")))?;
        if resp.data.len() != texts.len() {
            return Err(ProviderError::Malformed(format!(
                "expected {} embeddings, got {}",
                texts.len(),
                resp.data.len()
            )));
        }
        resp.data.sort_by_key(|d| d.index.unwrap_or(usize::MAX));
        resp.data
            .into_iter()
            .map(|d| {
                if d.embedding.len() != self.dim {
                    return Err(ProviderError::Config(format!(
                        "embedding dimension {} does not match configured {}",
                        d.embedding.len(),
                        self.dim
                    )));
                }
                Ok(Embedding::normalized(d.embedding))
            })
            .collect()
    }
}

/// `POST {base}/rerank` with `{model, query, documents}`, expecting
/// `{results: [{index, relevance_score}]}`. Raw logits can be squashed with
/// `apply_sigmoid`.
#[derive(Debug, Clone)]
pub struct HttpReranker {
    http: JsonClient,
    pub apply_sigmoid: bool,
}

impl HttpReranker {
    pub fn new(cfg: HttpConfig, apply_sigmoid: bool) -> Result<Self, ProviderError> {
        Ok(HttpReranker {
            http: JsonClient::new(cfg)?,
            apply_sigmoid,
        })
    }
}

#[derive(Deserialize)]
struct RerankItem {
    index: usize,
    relevance_score: f64,
}

#[derive(Deserialize)]
struct RerankResponse {
    results: Vec<RerankItem>,
}

impl Reranker for HttpReranker {
    fn rerank(&self, query: &str, chunks: &[&str]) -> Result<Vec<f64>, ProviderError> {
        if chunks.is_empty() {
            return Err(ProviderError::InvalidInput(
                "rerank called with no chunks".into(),
            ));
        }
        let body = json!({"model": self.http.cfg.model, "query": query, "documents": chunks});
        let v = self.http.post("rerank", &body)?;
        let resp: RerankResponse = serde_json::from_value(v)
            .map_err(|e| ProviderError::Malformed(format!("rerank: {e}")))?;
        let mut scores = vec![None; chunks.len()];
        for item in resp.results {
            let slot = scores.get_mut(item.index).ok_or_else(|| {
                ProviderError::Malformed(format!("rerank index {} out of range", item.index))
            })?;
            let s = if self.apply_sigmoid {
                1.0 / (1.0 + (-item.relevance_score).exp())
            } else {
                item.relevance_score
            };
            *slot = Some(s.clamp(0.0, 1.0));
        }
        scores
            .into_iter()
            .enumerate()
            .map(|(i, s)| {
                s.ok_or_else(|| ProviderError::Malformed(format!("no rerank score for chunk {i}")))
            })
            .collect()
    }
}

/// `POST {base}/ner` with `{text}`, expecting
/// `{entities: [{text, label, start, end}]}` with character offsets.
/// Labels may be category names or spaCy-style tags.
#[derive(Debug, Clone)]
pub struct HttpNer {
    http: JsonClient,
}

impl HttpNer {
    pub fn new(cfg: HttpConfig) -> Result<Self, ProviderError> {
        Ok(HttpNer {
            http: JsonClient::new(cfg)?,
        })
    }
}

#[derive(Deserialize)]
struct NerItem {
    text: String,
    label: String,
    start: usize,
    end: usize,
}

#[derive(Deserialize)]
struct NerResponse {
    entities: Vec<NerItem>,
}

impl NerProvider for HttpNer {
    fn ner(&self, text: &str) -> Result<Vec<NamedEntity>, ProviderError> {
        if text.trim().is_empty() {
            return Ok(Vec::new());
        }
        let v = self.http.post("ner", &json!({"text": text}))?;
        let resp: NerResponse =
            serde_json::from_value(v).map_err(|e| ProviderError::Malformed(format!("ner: {e}")))?;
        let n_chars = text.chars().count();
        let ents = resp
            .entities
            .into_iter()
            .filter_map(|e| {
                let category = EntityCategory::from_label(&e.label)?;
                if e.start >= e.end || e.end > n_chars || !super::is_valid_entity(&e.text) {
                    return None;
                }
                Some(NamedEntity {
                    text: crate::text::char_slice(text, e.start, e.end),
                    category,
                    start: e.start,
                    end: e.end,
                })
            })
            .collect();
        Ok(resolve_overlaps(ents))
    }
}

#[cfg(test)]
pub(crate) mod mock {
    use std::io::{BufRead, BufReader, Read, Write};
    use std::net::TcpListener;
    use std::sync::{Arc, Mutex};
    use std::thread::JoinHandle;

    /// One-connection-per-response HTTP server. Returns the base URL, the
    /// captured request bodies, and the server thread.
    pub fn serve(
        responses: Vec<(u16, String)>,
    ) -> (String, Arc<Mutex<Vec<String>>>, JoinHandle<()>) {
        let listener = TcpListener::bind("127.0.0.1:0").unwrap();
        let addr = listener.local_addr().unwrap();
        let bodies = Arc::new(Mutex::new(Vec::new()));
        let captured = bodies.clone();
        let handle = std::thread::spawn(move || {
            for (status, body) in responses {
                let (mut stream, _) = listener.accept().unwrap();
                let mut reader = BufReader::new(stream.try_clone().unwrap());
                let mut len = 0usize;
                loop {
                    let mut line = String::new();
                    reader.read_line(&mut line).unwrap();
                    if line == "\r\n" || line.is_empty() {
                        break;
                    }
                    let lower = line.to_ascii_lowercase();
                    if let Some(v) = lower.strip_prefix("content-length:") {
                        len = v.trim().parse().unwrap();
                    }
                }
                let mut buf = vec![0u8; len];
                reader.read_exact(&mut buf).unwrap();
                captured
                    .lock()
                    .unwrap()
                    .push(String::from_utf8(buf).unwrap());
                let resp = format!(
                    "HTTP/1.1 {status} X\r\ncontent-type: application/json\r\ncontent-length: {}\r\nconnection: close\r\n\r\n{body}",
                    body.len()
                );
                stream.write_all(resp.as_bytes()).unwrap();
            }
        });
        (format!("http://{addr}/v1"), bodies, handle)
    }
}

#[cfg(test)]
mod tests {
    use super::mock::serve;
    use super::*;

    fn cfg(base: &str) -> HttpConfig {
        let mut c = HttpConfig::new(base, "m");
        c.retry = RetryPolicy {
            attempts: 3,
            initial_backoff_ms: 1,
        };
        c.timeout_secs = 5;
        c
    }

    #[test]
    fn backoff_doubles() {
        let p = RetryPolicy::default();
        assert_eq!(p.backoff(1), Duration::from_millis(500));
        assert_eq!(p.backoff(2), Duration::from_millis(1000));
        assert_eq!(p.backoff(3), Duration::from_millis(2000));
    }

    #[test]
    fn chat_retries_on_5xx_then_succeeds() {
        let ok = r#"{"choices":[{"message":{"role":"assistant","content":"hi"}}]}"#;
        let (base, bodies, h) = serve(vec![(503, "{}".into()), (200, ok.into())]);
        let chat = OpenAiChat::new(cfg(&base)).unwrap();
        let out = chat
            .chat(
                &[ChatMessage::system("s"), ChatMessage::user("u")],
                &Decoding::default(),
            )
            .unwrap();
        h.join().unwrap();
        assert_eq!(out, "hi");
        let sent: Value = serde_json::from_str(&bodies.lock().unwrap()[1]).unwrap();
        assert_eq!(sent["messages"][0]["role"], "system");
        assert_eq!(sent["temperature"], 0.0);
    }

    #[test]
    fn chat_4xx_is_not_retried() {
        let (base, bodies, h) = serve(vec![(401, r#"{"error":"nope"}"#.into())]);
        let chat = OpenAiChat::new(cfg(&base)).unwrap();
        let err = chat
            .chat(&[ChatMessage::user("u")], &Decoding::default())
            .unwrap_err();
        h.join().unwrap();
        assert!(matches!(err, ProviderError::Status { status: 401, .. }));
        assert_eq!(bodies.lock().unwrap().len(), 1);
    }

    #[test]
    fn retries_give_up_after_three_attempts() {
        let (base, bodies, h) = serve(vec![
            (500, "{}".into()),
            (502, "{}".into()),
            (500, "{}".into()),
        ]);
        let chat = OpenAiChat::new(cfg(&base)).unwrap();
        let err = chat
            .chat(&[ChatMessage::user("u")], &Decoding::default())
            .unwrap_err();
        h.join().unwrap();
        assert!(err.is_retryable());
        assert_eq!(bodies.lock().unwrap().len(), 3);
    }

    #[test]
    fn embeddings_normalized_and_dimension_checked() {
        let body = r#"{"data":[{"index":1,"embedding":[0,2]},{"index":0,"embedding":[3,4]}]}"#;
        let (base, _, h) = serve(vec![
            (200, body.into()),
            (200, r#"{"data":[{"index":0,"embedding":[1,2,3]}]}"#.into()),
        ]);
        let e = OpenAiEmbedder::new(cfg(&base), 2).unwrap();
        let v = e.embed(&["a", "b"]).unwrap();
        assert!((v[0].0[0] - 0.6).abs() < 1e-6 && (v[1].0[1] - 1.0).abs() < 1e-6);
        let err = e.embed(&["c"]).unwrap_err();
        h.join().unwrap();
        assert!(matches!(err, ProviderError::Config(_)));
    }

    #[test]
    fn rerank_and_ner_wire_formats() {
        let rr =
            r#"{"results":[{"index":1,"relevance_score":0.0},{"index":0,"relevance_score":2.0}]}"#;
        let ner = r#"{"entities":[{"text":"Bloc Party","label":"ORG","start":0,"end":10},{"text":"it","label":"MISC","start":20,"end":22}]}"#;
        let (base, _, h) = serve(vec![(200, rr.into()), (200, ner.into())]);
        let r = HttpReranker::new(cfg(&base), true).unwrap();
        let s = r.rerank("q", &["a", "b"]).unwrap();
        assert!((s[1] - 0.5).abs() < 1e-12 && s[0] > 0.85);
        let n = HttpNer::new(cfg(&base)).unwrap();
        let ents = n.ner("Bloc Party released it").unwrap();
        h.join().unwrap();
        assert_eq!(ents.len(), 1);
        assert_eq!(ents[0].category, EntityCategory::Organisation);
    }

    #[test]
    fn unreachable_endpoint_is_transport_error() {
        let listener = std::net::TcpListener::bind("127.0.0.1:0").unwrap();
        let addr = listener.local_addr().unwrap();
        drop(listener);
        let chat = OpenAiChat::new(cfg(&format!("http://{addr}/v1"))).unwrap();
        let err = chat
            .chat(&[ChatMessage::user("u")], &Decoding::default())
            .unwrap_err();
        assert!(matches!(err, ProviderError::Transport(_)));
    }
}
