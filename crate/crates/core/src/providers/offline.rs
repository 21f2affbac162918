//! Deterministic, network-free providers.

use std::collections::{HashMap, VecDeque};
use std::path::Path;
use std::sync::Mutex;

use serde::{Deserialize, Serialize};

use super::{
    check_embed_inputs, is_valid_entity, prompt_digest, render_prompt, resolve_overlaps,
    validate_messages, ChatMessage, ChatProvider, Decoding, Embedder, Embedding, EntityCategory,
    NamedEntity, NerProvider, ProviderError, Reranker,
};
use crate::text::{content_terms, is_stopword, tokenize, tokenize_spanned};

pub const DEFAULT_EMBEDDING_DIM: usize = 384;

fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in bytes {
        h ^= *b as u64;
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    h
}

/// Hashed bag-of-words embedder.
///
/// Each non-stopword token is hashed into one of `dim` buckets; the bucket
/// counts are L2-normalized. Texts sharing content words get positive
/// cosine similarity, disjoint texts get (near) zero.
#[derive(Debug, Clone)]
pub struct HashEmbedder {
    dim: usize,
}

impl HashEmbedder {
    pub fn new(dim: usize) -> Self {
        assert!(dim > 0, "embedding dimension must be positive");
        HashEmbedder { dim }
    }

    fn vector(&self, text: &str) -> Embedding {
        let tokens = tokenize(text);
        let mut content: Vec<&String> = tokens.iter().filter(|t| !is_stopword(t)).collect();
        if content.is_empty() {
            content = tokens.iter().collect();
        }
        let mut v = vec![0.0f64; self.dim];
        if content.is_empty() {
            let idx = (fnv1a(text.trim().as_bytes()) % self.dim as u64) as usize;
            v[idx] = 1.0;
        }
        for t in content {
            let idx = (fnv1a(t.as_bytes()) % self.dim as u64) as usize;
            v[idx] += 1.0;
        }
        Embedding::normalized(v)
    }
}

impl Default for HashEmbedder {
    fn default() -> Self {
        HashEmbedder::new(DEFAULT_EMBEDDING_DIM)
    }
}

impl Embedder for HashEmbedder {
    fn dim(&self) -> usize {
        self.dim
    }

    fn embed(&self, texts: &[&str]) -> Result<Vec<Embedding>, ProviderError> {
        check_embed_inputs(texts)?;
        Ok(texts.iter().map(|t| self.vector(t)).collect())
    }
}

/// Longest-match lexicon lookup.
///
/// Surface forms are matched case-insensitively on whole alphanumeric
/// tokens; punctuation between tokens is ignored.
#[derive(Debug, Clone, Default)]
pub struct LexiconNer {
    entries: HashMap<String, EntityCategory>,
    max_tokens: usize,
}

impl LexiconNer {
    pub fn from_entries<I, S>(entries: I) -> Self
    where
        I: IntoIterator<Item = (S, EntityCategory)>,
        S: AsRef<str>,
    {
        let mut ner = LexiconNer::default();
        for (surface, cat) in entries {
            ner.insert(surface.as_ref(), cat);
        }
        ner
    }

    pub fn insert(&mut self, surface: &str, category: EntityCategory) {
        let toks = tokenize(surface);
        if toks.is_empty() {
            return;
        }
        self.max_tokens = self.max_tokens.max(toks.len());
        self.entries.insert(toks.join(" "), category);
    }

    /// Parses `surface<TAB>category` lines. Blank lines and `#` comments are
    /// skipped.
    pub fn from_tsv(content: &str) -> Result<Self, ProviderError> {
        let mut ner = LexiconNer::default();
        for (lineno, line) in content.lines().enumerate() {
            let line = line.trim_end_matches('\r');
            if line.trim().is_empty() || line.trim_start().starts_with('#') {
                continue;
            }
            let (surface, cat) = line.split_once('\t').ok_or_else(|| {
                ProviderError::Config(format!(
                    "lexicon line {}: expected surface<TAB>category",
                    lineno + 1
                ))
            })?;
            let category = EntityCategory::from_label(cat).ok_or_else(|| {
                ProviderError::Config(format!(
                    "lexicon line {}: unknown category {cat:?}",
                    lineno + 1
                ))
            })?;
            ner.insert(surface.trim(), category);
        }
        Ok(ner)
    }

    pub fn from_tsv_file(path: &Path) -> Result<Self, ProviderError> {
        let content = std::fs::read_to_string(path).map_err(|e| {
            ProviderError::Config(format!("reading lexicon {}: {e}", path.display()))
        })?;
        LexiconNer::from_tsv(&content)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

impl NerProvider for LexiconNer {
    fn ner(&self, text: &str) -> Result<Vec<NamedEntity>, ProviderError> {
        let toks = tokenize_spanned(text);
        let lowered: Vec<String> = toks.iter().map(|t| t.text.to_lowercase()).collect();
        let mut out = Vec::new();
        let mut i = 0;
        while i < toks.len() {
            let mut matched = None;
            let longest = self.max_tokens.min(toks.len() - i);
            for len in (1..=longest).rev() {
                let key = lowered[i..i + len].join(" ");
                if let Some(&cat) = self.entries.get(&key) {
                    let (start, end) = (toks[i].start, toks[i + len - 1].end);
                    let surface = crate::text::char_slice(text, start, end);
                    if is_valid_entity(&surface) {
                        matched = Some((
                            len,
                            NamedEntity {
                                text: surface,
                                category: cat,
                                start,
                                end,
                            },
                        ));
                        break;
                    }
                }
            }
            match matched {
                Some((len, ent)) => {
                    out.push(ent);
                    i += len;
                }
                None => i += 1,
            }
        }
        Ok(resolve_overlaps(out))
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ChatFixture {
    pub prompt_digest: String,
    pub completion: String,
}

/// Chat provider answering from fixtures.
///
/// Lookup order: exact prompt digest, then substring rules (first rule
/// whose needle occurs in the rendered prompt), then a queue of scripted
/// replies, then the fallback string. Every rendered prompt is logged.
#[derive(Debug, Default)]
pub struct ScriptedChat {
    fixtures: HashMap<String, String>,
    rules: Vec<(String, String)>,
    queue: Mutex<VecDeque<String>>,
    fallback: String,
    log: Mutex<Vec<String>>,
}

pub const SCRIPTED_FALLBACK: &str = "[no scripted completion]";

impl ScriptedChat {
    pub fn new() -> Self {
        ScriptedChat {
            fallback: SCRIPTED_FALLBACK.to_string(),
            ..Default::default()
        }
    }

    pub fn with_fallback(mut self, fallback: impl Into<String>) -> Self {
        self.fallback = fallback.into();
        self
    }

    pub fn with_fixture(
        mut self,
        digest: impl Into<String>,
        completion: impl Into<String>,
    ) -> Self {
        self.fixtures.insert(digest.into(), completion.into());
        self
    }

    /// Registers a completion for exactly this conversation.
    pub fn with_response_for(
        self,
        messages: &[ChatMessage],
        completion: impl Into<String>,
    ) -> Self {
        let digest = prompt_digest(messages);
        self.with_fixture(digest, completion)
    }

    pub fn with_rule(mut self, needle: impl Into<String>, completion: impl Into<String>) -> Self {
        self.rules.push((needle.into(), completion.into()));
        self
    }

    pub fn with_queue<I, S>(self, replies: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        self.queue
            .lock()
            .unwrap()
            .extend(replies.into_iter().map(Into::into));
        self
    }

    /// Loads `{prompt_digest, completion}` JSONL.
    pub fn load_fixtures(mut self, content: &str) -> Result<Self, ProviderError> {
        for (i, line) in content.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let f: ChatFixture = serde_json::from_str(line)
                .map_err(|e| ProviderError::Config(format!("fixture line {}: {e}", i + 1)))?;
            self.fixtures.insert(f.prompt_digest, f.completion);
        }
        Ok(self)
    }

    pub fn prompts(&self) -> Vec<String> {
        self.log.lock().unwrap().clone()
    }
}

impl ChatProvider for ScriptedChat {
    fn chat(
        &self,
        messages: &[ChatMessage],
        _decoding: &Decoding,
    ) -> Result<String, ProviderError> {
        validate_messages(messages)?;
        let rendered = render_prompt(messages);
        self.log.lock().unwrap().push(rendered.clone());
        if let Some(hit) = self.fixtures.get(&prompt_digest(messages)) {
            return Ok(hit.clone());
        }
        if let Some((_, completion)) = self
            .rules
            .iter()
            .find(|(needle, _)| rendered.contains(needle.as_str()))
        {
            return Ok(completion.clone());
        }
        if let Some(next) = self.queue.lock().unwrap().pop_front() {
            return Ok(next);
        }
        Ok(self.fallback.clone())
    }
}

/// Scores chunks by Jaccard overlap of content terms with the query, passed
/// through a steep logistic so the output behaves like a sigmoid-normalized
/// cross-encoder score.
#[derive(Debug, Clone)]
pub struct OverlapReranker {
    pub steepness: f64,
}

impl Default for OverlapReranker {
    fn default() -> Self {
        OverlapReranker { steepness: 12.0 }
    }
}

impl OverlapReranker {
    pub fn overlap(query: &str, chunk: &str) -> f64 {
        let q = content_terms(query);
        let c = content_terms(chunk);
        let union = q.union(&c).count();
        if q.is_empty() || union == 0 {
            return 0.0;
        }
        q.intersection(&c).count() as f64 / union as f64
    }
}

impl Reranker for OverlapReranker {
    fn rerank(&self, query: &str, chunks: &[&str]) -> Result<Vec<f64>, ProviderError> {
        if chunks.is_empty() {
            return Err(ProviderError::InvalidInput(
                "rerank called with no chunks".into(),
            ));
        }
        Ok(chunks
            .iter()
            .map(|c| {
                let x = self.steepness * (Self::overlap(query, c) - 0.5);
                1.0 / (1.0 + (-x).exp())
            })
            .collect())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::providers::cosine;
    use proptest::prelude::*;

    #[test]
    fn hash_embedder_is_deterministic_unit_norm() {
        let e = HashEmbedder::default();
        let a = e.embed(&["a"]).unwrap();
        let b = e.embed(&["a"]).unwrap();
        assert_eq!(a, b);
        assert_eq!(a[0].dim(), 384);
        assert!((a[0].norm() - 1.0).abs() < 1e-6);
        assert!((cosine(&a[0], &b[0]) - 1.0).abs() < 1e-6);
    }

    #[test]
    fn hash_embedder_shared_tokens_raise_similarity() {
        let e = HashEmbedder::default();
        let v = e
            .embed(&[
                "bloc party released silent alarm",
                "silent alarm album",
                "reykjavik weather",
            ])
            .unwrap();
        assert!(cosine(&v[0], &v[1]) > cosine(&v[0], &v[2]));
    }

    #[test]
    fn embed_rejects_empty_inputs() {
        let e = HashEmbedder::default();
        assert!(e.embed(&[]).is_err());
        assert!(e.embed(&["ok", ""]).is_err());
        assert!(e.embed(&["???"]).is_ok());
    }

    fn band_lexicon() -> LexiconNer {
        LexiconNer::from_tsv(
            "# demo\nBloc Party\tOrganisation\nSilent Alarm\tWork\nit\tConcept\nParty\tConcept\n",
        )
        .unwrap()
    }

    #[test]
    fn lexicon_ner_examples() {
        let ner = band_lexicon();
        let ents = ner.ner("Bloc Party released Silent Alarm").unwrap();
        let got: Vec<(&str, EntityCategory)> =
            ents.iter().map(|e| (e.text.as_str(), e.category)).collect();
        assert_eq!(
            got,
            vec![
                ("Bloc Party", EntityCategory::Organisation),
                ("Silent Alarm", EntityCategory::Work)
            ]
        );
        assert_eq!((ents[0].start, ents[0].end), (0, 10));
        assert!(ner.ner("").unwrap().is_empty());
        assert!(ner.ner("it was good").unwrap().is_empty());
    }

    #[test]
    fn lexicon_rejects_bad_lines() {
        assert!(LexiconNer::from_tsv("no tab here").is_err());
        assert!(LexiconNer::from_tsv("x\tPlanet").is_err());
    }

    #[test]
    fn scripted_chat_lookup_order() {
        let msgs = [ChatMessage::user("hello")];
        let chat = ScriptedChat::new()
            .with_response_for(&msgs, "fixture")
            .with_rule("needle", "ruled")
            .with_queue(["first"]);
        let d = Decoding::default();
        assert_eq!(chat.chat(&msgs, &d).unwrap(), "fixture");
        assert_eq!(
            chat.chat(&[ChatMessage::user("a needle here")], &d)
                .unwrap(),
            "ruled"
        );
        assert_eq!(
            chat.chat(&[ChatMessage::user("other")], &d).unwrap(),
            "first"
        );
        assert_eq!(
            chat.chat(&[ChatMessage::user("other")], &d).unwrap(),
            SCRIPTED_FALLBACK
        );
        assert_eq!(chat.prompts().len(), 4);
    }

    #[test]
    fn scripted_fixture_file() {
        let msgs = [ChatMessage::user("q")];
        let line = serde_json::to_string(&ChatFixture {
            prompt_digest: prompt_digest(&msgs),
            completion: "c".into(),
        })
        .unwrap();
        let chat = ScriptedChat::new().load_fixtures(&line).unwrap();
        assert_eq!(chat.chat(&msgs, &Decoding::default()).unwrap(), "c");
    }

    #[test]
    fn overlap_reranker_examples() {
        let r = OverlapReranker::default();
        let q = "statutory redundancy pay";
        let scores = r
            .rerank(
                q,
                &[
                    q,
                    "redundancy pay rules for employers",
                    "weather in reykjavik",
                ],
            )
            .unwrap();
        assert!(scores[0] > scores[1] && scores[1] > scores[2]);
        assert!(scores[2] < 0.01);
        assert!(scores.iter().all(|s| (0.0..=1.0).contains(s)));
        assert!(r.rerank(q, &[]).is_err());
    }

    proptest! {
        #[test]
        fn self_cosine_is_one(s in "[a-zA-Z0-9 ,.]{1,40}") {
            prop_assume!(!s.trim().is_empty());
            let e = HashEmbedder::default();
            let v = e.embed(&[&s, &s]).unwrap();
            prop_assert!((v[0].norm() - 1.0).abs() < 1e-6);
            prop_assert!((cosine(&v[0], &v[1]) - 1.0).abs() < 1e-6);
        }

        #[test]
        fn ner_spans_never_overlap(words in proptest::collection::vec(prop_oneof![
            Just("Bloc"), Just("Party"), Just("Silent"), Just("Alarm"), Just("it"), Just("the"), Just("released")
        ], 0..12)) {
            let text = words.join(" ");
            let ents = band_lexicon().ner(&text).unwrap();
            for w in ents.windows(2) {
                prop_assert!(w[0].end <= w[1].start);
            }
            for e in &ents {
                prop_assert!(is_valid_entity(&e.text));
                prop_assert_eq!(crate::text::char_slice(&text, e.start, e.end), e.text.clone());
            }
        }
    }
}
