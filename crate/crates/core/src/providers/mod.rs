//! Pluggable model back ends: chat completion, sentence embedding, named
//! entity recognition and cross-encoder reranking.
//!
//! Each capability is a trait with two families of implementations: remote
//! clients speaking an HTTP JSON protocol ([`remote`]) and deterministic
//! offline stand-ins for tests and `--offline` runs ([`offline`]).

mod limit;
pub mod offline;
pub mod remote;

use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::text::{is_pronoun, is_stopword, normalize_variable};

pub use limit::{Bounded, ConcurrencyLimit, DEFAULT_CONCURRENCY};
pub use offline::{HashEmbedder, LexiconNer, OverlapReranker, ScriptedChat};
pub use remote::{HttpConfig, HttpNer, HttpReranker, OpenAiChat, OpenAiEmbedder, RetryPolicy};

#[derive(Debug, Error)]
pub enum ProviderError {
    /// Network-level failure or 5xx; safe to retry.
    #[error("transport error: {0}")]
    Transport(String),
    #[error("provider returned HTTP {status}: {body}")]
    Status { status: u16, body: String },
    /// Misconfiguration such as an embedding dimension mismatch. Not retryable.
    #[error("configuration error: {0}")]
    Config(String),
    #[error("invalid input: {0}")]
    InvalidInput(String),
    #[error("malformed provider response: {0}")]
    Malformed(String),
    #[error("provider unavailable: {0}")]
    Unavailable(String),
}

impl ProviderError {
    pub fn is_retryable(&self) -> bool {
        match self {
            ProviderError::Transport(_) | ProviderError::Unavailable(_) => true,
            ProviderError::Status { status, .. } => *status >= 500,
            _ => false,
        }
    }
}

/// Unit-length sentence embedding.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Embedding(pub Vec<f32>);

impl Embedding {
    /// L2-normalizes `values`. An all-zero vector stays zero.
    pub fn normalized(values: Vec<f64>) -> Self {
        let norm = values.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm == 0.0 {
            return Embedding(values.into_iter().map(|v| v as f32).collect());
        }
        Embedding(values.into_iter().map(|v| (v / norm) as f32).collect())
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn norm(&self) -> f64 {
        self.0
            .iter()
            .map(|&v| (v as f64) * (v as f64))
            .sum::<f64>()
            .sqrt()
    }

    pub fn as_slice(&self) -> &[f32] {
        &self.0
    }
}

/// Cosine similarity, accumulated in f64. Zero vectors give 0.
pub fn cosine(a: &Embedding, b: &Embedding) -> f64 {
    let (mut dot, mut na, mut nb) = (0.0f64, 0.0f64, 0.0f64);
    for (&x, &y) in a.0.iter().zip(b.0.iter()) {
        let (x, y) = (x as f64, y as f64);
        dot += x * y;
        na += x * x;
        nb += y * y;
    }
    if na == 0.0 || nb == 0.0 {
        return 0.0;
    }
    dot / (na.sqrt() * nb.sqrt())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum EntityCategory {
    Person,
    Organisation,
    Location,
    Attribute,
    Work,
    Concept,
    Event,
}

impl EntityCategory {
    /// Maps both our own category names and common NER tag sets
    /// (`PERSON`, `ORG`, `GPE`, `WORK_OF_ART`, ...).
    pub fn from_label(label: &str) -> Option<Self> {
        let l = label.trim().to_ascii_uppercase();
        Some(match l.as_str() {
            "PERSON" | "PER" => EntityCategory::Person,
            "ORGANISATION" | "ORGANIZATION" | "ORG" => EntityCategory::Organisation,
            "LOCATION" | "LOC" | "GPE" | "FAC" => EntityCategory::Location,
            "ATTRIBUTE" | "DATE" | "TIME" | "MONEY" | "QUANTITY" | "PERCENT" | "CARDINAL"
            | "ORDINAL" => EntityCategory::Attribute,
            "WORK" | "WORK_OF_ART" | "PRODUCT" => EntityCategory::Work,
            "CONCEPT" | "NORP" | "LAW" | "LANGUAGE" | "MISC" => EntityCategory::Concept,
            "EVENT" => EntityCategory::Event,
            _ => return None,
        })
    }

    pub fn as_str(self) -> &'static str {
        match self {
            EntityCategory::Person => "Person",
            EntityCategory::Organisation => "Organisation",
            EntityCategory::Location => "Location",
            EntityCategory::Attribute => "Attribute",
            EntityCategory::Work => "Work",
            EntityCategory::Concept => "Concept",
            EntityCategory::Event => "Event",
        }
    }
}

impl FromStr for EntityCategory {
    type Err = ProviderError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        EntityCategory::from_label(s)
            .ok_or_else(|| ProviderError::InvalidInput(format!("unknown entity category {s:?}")))
    }
}

impl fmt::Display for EntityCategory {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct NamedEntity {
    pub text: String,
    pub category: EntityCategory,
    /// Character offsets `[start, end)` into the source text.
    pub start: usize,
    pub end: usize,
}

impl NamedEntity {
    pub fn normalized(&self) -> String {
        normalize_variable(&self.text)
    }
}

/// Hard validator for entity strings: rejects pronouns, stopwords, pure
/// numerics and anything shorter than three characters.
pub fn is_valid_entity(text: &str) -> bool {
    let norm = normalize_variable(text);
    if norm.chars().count() < 3 {
        return false;
    }
    if is_pronoun(&norm) || is_stopword(&norm) {
        return false;
    }
    let has_alpha = norm.chars().any(|c| c.is_alphabetic());
    has_alpha
}

/// Sorts by start and drops entities overlapping an earlier (or longer,
/// when starting at the same offset) one.
pub fn resolve_overlaps(mut ents: Vec<NamedEntity>) -> Vec<NamedEntity> {
    ents.sort_by(|a, b| a.start.cmp(&b.start).then(b.end.cmp(&a.end)));
    let mut out: Vec<NamedEntity> = Vec::with_capacity(ents.len());
    for e in ents {
        if out.last().is_some_and(|last| e.start < last.end) {
            continue;
        }
        out.push(e);
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ChatRole {
    System,
    User,
    Assistant,
}

impl ChatRole {
    pub fn as_str(self) -> &'static str {
        match self {
            ChatRole::System => "system",
            ChatRole::User => "user",
            ChatRole::Assistant => "assistant",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChatMessage {
    pub role: ChatRole,
    pub content: String,
}

impl ChatMessage {
    pub fn system(content: impl Into<String>) -> Self {
        ChatMessage {
            role: ChatRole::System,
            content: content.into(),
        }
    }

    pub fn user(content: impl Into<String>) -> Self {
        ChatMessage {
            role: ChatRole::User,
            content: content.into(),
        }
    }

    pub fn assistant(content: impl Into<String>) -> Self {
        ChatMessage {
            role: ChatRole::Assistant,
            content: content.into(),
        }
    }
}

/// Checks role ordering: optional leading system message, then strictly
/// alternating user/assistant turns starting with user. Content must be
/// non-empty.
pub fn validate_messages(messages: &[ChatMessage]) -> Result<(), ProviderError> {
    if messages.is_empty() {
        return Err(ProviderError::InvalidInput("no messages".into()));
    }
    let mut expected = ChatRole::User;
    for (i, m) in messages.iter().enumerate() {
        if m.content.trim().is_empty() {
            return Err(ProviderError::InvalidInput(format!(
                "message {i} has empty content"
            )));
        }
        if i == 0 && m.role == ChatRole::System {
            continue;
        }
        if m.role != expected {
            return Err(ProviderError::InvalidInput(format!(
                "message {i} has role {} but {} was expected",
                m.role.as_str(),
                expected.as_str()
            )));
        }
        expected = if expected == ChatRole::User {
            ChatRole::Assistant
        } else {
            ChatRole::User
        };
    }
    Ok(())
}

/// Canonical text form of a conversation; scripted fixtures key on its digest.
pub fn render_prompt(messages: &[ChatMessage]) -> String {
    messages
        .iter()
        .map(|m| format!("[{}]\n{}", m.role.as_str(), m.content))
        .collect::<Vec<_>>()
        .join("\n")
}

/// Hex SHA-256 of [`render_prompt`].
pub fn prompt_digest(messages: &[ChatMessage]) -> String {
    use sha2::{Digest, Sha256};
    hex::encode(Sha256::digest(render_prompt(messages).as_bytes()))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Decoding {
    pub temperature: f32,
    pub max_tokens: u32,
    pub greedy: bool,
}

impl Default for Decoding {
    fn default() -> Self {
        Decoding {
            temperature: 0.0,
            max_tokens: 512,
            greedy: true,
        }
    }
}

impl Decoding {
    pub fn max_tokens(max_tokens: u32) -> Self {
        Decoding {
            max_tokens,
            ..Decoding::default()
        }
    }
}

pub trait ChatProvider: Send + Sync {
    fn chat(&self, messages: &[ChatMessage], decoding: &Decoding) -> Result<String, ProviderError>;
}

pub trait Embedder: Send + Sync {
    fn dim(&self) -> usize;

    /// One unit vector per input. Inputs must be non-empty.
    fn embed(&self, texts: &[&str]) -> Result<Vec<Embedding>, ProviderError>;

    fn embed_one(&self, text: &str) -> Result<Embedding, ProviderError> {
        self.embed(&[text])?
            .pop()
            .ok_or_else(|| ProviderError::Malformed("embedder returned no vectors".into()))
    }
}

pub trait NerProvider: Send + Sync {
    /// Non-overlapping validated entities sorted by start offset.
    fn ner(&self, text: &str) -> Result<Vec<NamedEntity>, ProviderError>;
}

pub trait Reranker: Send + Sync {
    /// One score in `[0, 1]` per chunk.
    fn rerank(&self, query: &str, chunks: &[&str]) -> Result<Vec<f64>, ProviderError>;
}

pub(crate) fn check_embed_inputs(texts: &[&str]) -> Result<(), ProviderError> {
    if texts.is_empty() {
        return Err(ProviderError::InvalidInput(
            "embed called with no texts".into(),
        ));
    }
    if let Some(i) = texts.iter().position(|t| t.trim().is_empty()) {
        return Err(ProviderError::InvalidInput(format!("text {i} is empty")));
    }
    Ok(())
}

/// The full set of model back ends an engine run needs.
#[derive(Clone)]
pub struct Providers {
    pub chat: Arc<dyn ChatProvider>,
    pub embedder: Arc<dyn Embedder>,
    pub ner: Arc<dyn NerProvider>,
    pub reranker: Arc<dyn Reranker>,
}

impl fmt::Debug for Providers {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Providers").finish_non_exhaustive()
    }
}
