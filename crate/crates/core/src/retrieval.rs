//! Source-aware chunking, BM25 + dense hybrid retrieval, reranking and
//! sentence-level context compression.

use std::collections::{BTreeMap, HashSet};
use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use md5::{Digest, Md5};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::providers::{
    cosine, ChatMessage, ChatProvider, Decoding, Embedder, Embedding, NerProvider, ProviderError,
    Reranker,
};
use crate::sample::{ContextDocument, Source};
use crate::text::{content_terms, split_sentences, tokenize, word_count};

pub const CHUNK_OVERLAP: usize = 50;
pub const RERANK_POOL: usize = 20;
const MATRIX_MAGIC: &[u8; 4] = b"PQIX";

#[derive(Debug, Error)]
pub enum RetrievalError {
    #[error(transparent)]
    Provider(#[from] ProviderError),
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("corrupt index file {path}: {message}")]
    Corrupt { path: String, message: String },
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> RetrievalError + '_ {
    move |source| RetrievalError::Io {
        path: path.display().to_string(),
        source,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Granularity {
    Coarse,
    Fine,
}

impl Granularity {
    pub fn as_str(self) -> &'static str {
        match self {
            Granularity::Coarse => "coarse",
            Granularity::Fine => "fine",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Chunk {
    pub chunk_id: String,
    pub doc_id: String,
    pub source: Source,
    pub text: String,
    pub word_count: usize,
    pub granularity: Granularity,
}

impl Chunk {
    pub fn digest(&self) -> String {
        hex::encode(Md5::digest(self.text.as_bytes()))
    }
}

/// Word-window size for a source, or `None` when documents stay whole.
pub fn window_for(source: Source) -> Option<usize> {
    match source {
        Source::ContractNli => Some(300),
        Source::Quac => Some(400),
        Source::Sharc | Source::HotpotQa => None,
    }
}

/// Start offsets of `window`-word windows overlapping by `overlap` words.
pub fn window_starts(n_words: usize, window: usize, overlap: usize) -> Vec<usize> {
    if n_words <= window {
        return vec![0];
    }
    let step = window - overlap;
    let mut starts = vec![0];
    let mut s = 0;
    while s + window < n_words {
        s += step;
        starts.push(s);
    }
    starts
}

pub fn coarse_chunk_id(doc_id: &str, i: usize) -> String {
    format!("{doc_id}#c{i}")
}

/// Splits a document into coarse chunks (and sentence chunks when `fine`).
pub fn chunk_document(doc: &ContextDocument, source: Source, fine: bool) -> Vec<Chunk> {
    let text = doc.text.trim();
    if text.is_empty() {
        return Vec::new();
    }
    let words: Vec<&str> = text.split_whitespace().collect();
    let mut out = Vec::new();
    let make = |id: String, text: String, granularity| Chunk {
        chunk_id: id,
        doc_id: doc.doc_id.clone(),
        source,
        word_count: word_count(&text),
        text,
        granularity,
    };
    match window_for(source) {
        Some(w) if words.len() > w => {
            for (i, s) in window_starts(words.len(), w, CHUNK_OVERLAP)
                .into_iter()
                .enumerate()
            {
                let end = (s + w).min(words.len());
                out.push(make(
                    coarse_chunk_id(&doc.doc_id, i),
                    words[s..end].join(" "),
                    Granularity::Coarse,
                ));
            }
        }
        _ => out.push(make(
            coarse_chunk_id(&doc.doc_id, 0),
            text.to_string(),
            Granularity::Coarse,
        )),
    }
    if fine {
        for (j, s) in split_sentences(text).into_iter().enumerate() {
            out.push(make(
                format!("{}#s{j}", doc.doc_id),
                s.to_string(),
                Granularity::Fine,
            ));
        }
    }
    out
}

/// Chunks every document in parallel and drops content-duplicate chunks,
/// keeping the first occurrence in input order.
pub fn chunk_corpus(docs: &[(ContextDocument, Source)], fine: bool) -> Vec<Chunk> {
    let per_doc: Vec<Vec<Chunk>> = docs
        .par_iter()
        .map(|(d, s)| chunk_document(d, *s, fine))
        .collect();
    let mut seen_digest = HashSet::new();
    let mut seen_id = HashSet::new();
    let mut out = Vec::new();
    for c in per_doc.into_iter().flatten() {
        if seen_digest.insert(c.digest()) && seen_id.insert(c.chunk_id.clone()) {
            out.push(c);
        }
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Bm25Params {
    pub k1: f64,
    pub b: f64,
}

impl Default for Bm25Params {
    fn default() -> Self {
        Bm25Params { k1: 1.2, b: 0.75 }
    }
}

/// Inverted index with per-document term frequencies.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Bm25 {
    pub params: Bm25Params,
    pub doc_len: Vec<u32>,
    pub avgdl: f64,
    /// term -> [(doc index, term frequency)], doc indices ascending.
    pub postings: BTreeMap<String, Vec<(u32, u32)>>,
}

impl Bm25 {
    pub fn build<S: AsRef<str>>(docs: &[S], params: Bm25Params) -> Self {
        let mut postings: BTreeMap<String, Vec<(u32, u32)>> = BTreeMap::new();
        let mut doc_len = Vec::with_capacity(docs.len());
        for (i, d) in docs.iter().enumerate() {
            let toks = tokenize(d.as_ref());
            doc_len.push(toks.len() as u32);
            let mut tf: BTreeMap<String, u32> = BTreeMap::new();
            for t in toks {
                *tf.entry(t).or_default() += 1;
            }
            for (t, f) in tf {
                postings.entry(t).or_default().push((i as u32, f));
            }
        }
        let avgdl = if doc_len.is_empty() {
            0.0
        } else {
            doc_len.iter().map(|&l| l as f64).sum::<f64>() / doc_len.len() as f64
        };
        Bm25 {
            params,
            doc_len,
            avgdl,
            postings,
        }
    }

    pub fn len(&self) -> usize {
        self.doc_len.len()
    }

    pub fn is_empty(&self) -> bool {
        self.doc_len.is_empty()
    }

    pub fn idf(&self, term: &str) -> f64 {
        let n = self.len() as f64;
        let df = self.postings.get(term).map_or(0, |p| p.len()) as f64;
        (1.0 + (n - df + 0.5) / (df + 0.5)).ln()
    }

    /// Scores for every document; the query is reduced to its distinct
    /// content terms.
    pub fn scores(&self, query: &str) -> Vec<f64> {
        let mut out = vec![0.0; self.len()];
        let Bm25Params { k1, b } = self.params;
        for term in content_terms(query) {
            let Some(posting) = self.postings.get(&term) else {
                continue;
            };
            let idf = self.idf(&term);
            for &(d, tf) in posting {
                let tf = tf as f64;
                let norm = if self.avgdl > 0.0 {
                    self.doc_len[d as usize] as f64 / self.avgdl
                } else {
                    1.0
                };
                out[d as usize] += idf * tf * (k1 + 1.0) / (tf + k1 * (1.0 - b + b * norm));
            }
        }
        out
    }
}

/// Min-max normalization to `[0, 1]`; constant inputs map to 0.5.
pub fn min_max(scores: &[f64]) -> Vec<f64> {
    let lo = scores.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if scores.is_empty() {
        return Vec::new();
    }
    if hi - lo <= f64::EPSILON * hi.abs().max(1.0) {
        return vec![0.5; scores.len()];
    }
    scores.iter().map(|s| (s - lo) / (hi - lo)).collect()
}

#[derive(Debug, Clone)]
pub struct Index {
    pub chunks: Vec<Chunk>,
    pub embeddings: Vec<Embedding>,
    pub bm25: Bm25,
}

const EMBED_BATCH: usize = 64;

impl Index {
    pub fn build(
        chunks: Vec<Chunk>,
        embedder: &dyn Embedder,
        bm25: Bm25Params,
    ) -> Result<Self, RetrievalError> {
        let texts: Vec<&str> = chunks.iter().map(|c| c.text.as_str()).collect();
        let mut embeddings = Vec::with_capacity(chunks.len());
        for batch in texts.chunks(EMBED_BATCH) {
            embeddings.extend(embedder.embed(batch)?);
        }
        let bm25 = Bm25::build(&texts, bm25);
        Ok(Index {
            chunks,
            embeddings,
            bm25,
        })
    }

    pub fn empty() -> Self {
        Index {
            chunks: Vec::new(),
            embeddings: Vec::new(),
            bm25: Bm25::build::<&str>(&[], Bm25Params::default()),
        }
    }

    pub fn len(&self) -> usize {
        self.chunks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.chunks.is_empty()
    }

    pub fn position(&self, chunk_id: &str) -> Option<usize> {
        self.chunks.iter().position(|c| c.chunk_id == chunk_id)
    }

    pub fn save(&self, dir: &Path) -> Result<(), RetrievalError> {
        fs::create_dir_all(dir).map_err(io_err(dir))?;
        let p = dir.join("chunks.jsonl");
        let mut w = BufWriter::new(fs::File::create(&p).map_err(io_err(&p))?);
        for c in &self.chunks {
            writeln!(w, "{}", serde_json::to_string(c).expect("chunk serializes"))
                .map_err(io_err(&p))?;
        }
        w.flush().map_err(io_err(&p))?;

        let p = dir.join("embeddings.bin");
        let dim = self.embeddings.first().map_or(0, Embedding::dim);
        let mut buf = Vec::with_capacity(12 + 4 * dim * self.embeddings.len());
        buf.extend_from_slice(MATRIX_MAGIC);
        buf.extend_from_slice(&(dim as u32).to_le_bytes());
        buf.extend_from_slice(&(self.embeddings.len() as u32).to_le_bytes());
        for e in &self.embeddings {
            for v in e.as_slice() {
                buf.extend_from_slice(&v.to_le_bytes());
            }
        }
        fs::write(&p, buf).map_err(io_err(&p))?;

        let p = dir.join("bm25.json");
        fs::write(&p, serde_json::to_vec(&self.bm25).expect("bm25 serializes"))
            .map_err(io_err(&p))?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self, RetrievalError> {
        let corrupt = |p: &Path, m: String| RetrievalError::Corrupt {
            path: p.display().to_string(),
            message: m,
        };
        let p = dir.join("chunks.jsonl");
        let reader = BufReader::new(fs::File::open(&p).map_err(io_err(&p))?);
        let mut chunks = Vec::new();
        for (i, line) in reader.lines().enumerate() {
            let line = line.map_err(io_err(&p))?;
            if line.trim().is_empty() {
                continue;
            }
            chunks.push(
                serde_json::from_str(&line)
                    .map_err(|e| corrupt(&p, format!("line {}: {e}", i + 1)))?,
            );
        }

        let p = dir.join("embeddings.bin");
        let mut raw = Vec::new();
        fs::File::open(&p)
            .map_err(io_err(&p))?
            .read_to_end(&mut raw)
            .map_err(io_err(&p))?;
        if raw.len() < 12 || &raw[..4] != MATRIX_MAGIC {
            return Err(corrupt(&p, "bad header".into()));
        }
        let dim = u32::from_le_bytes(raw[4..8].try_into().unwrap()) as usize;
        let count = u32::from_le_bytes(raw[8..12].try_into().unwrap()) as usize;
        if raw.len() != 12 + 4 * dim * count {
            return Err(corrupt(&p, format!("expected {count} x {dim} floats")));
        }
        let embeddings: Vec<Embedding> = raw[12..]
            .chunks_exact(4 * dim.max(1))
            .take(count)
            .map(|row| {
                Embedding(
                    row.chunks_exact(4)
                        .map(|b| f32::from_le_bytes(b.try_into().unwrap()))
                        .collect(),
                )
            })
            .collect();

        let p = dir.join("bm25.json");
        let bytes = fs::read(&p).map_err(io_err(&p))?;
        let bm25: Bm25 = serde_json::from_slice(&bytes).map_err(|e| corrupt(&p, e.to_string()))?;
        if embeddings.len() != chunks.len() || bm25.len() != chunks.len() {
            return Err(corrupt(
                dir,
                "chunk, embedding and postings counts differ".into(),
            ));
        }
        Ok(Index {
            chunks,
            embeddings,
            bm25,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetrievalResult {
    /// Position of the chunk in the index.
    pub chunk: usize,
    pub chunk_id: String,
    pub sparse_score: f64,
    pub dense_score: f64,
    pub fused_score: f64,
    pub rerank_score: Option<f64>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RetrievalOutcome {
    pub results: Vec<RetrievalResult>,
    pub empty_index: bool,
}

/// Fused scores for every chunk in index order.
pub fn fused_scores(
    index: &Index,
    query_embedding: &Embedding,
    query: &str,
    alpha: f64,
) -> Vec<(f64, f64, f64)> {
    let sparse = min_max(&index.bm25.scores(query));
    let dense_raw: Vec<f64> = index
        .embeddings
        .iter()
        .map(|e| cosine(e, query_embedding))
        .collect();
    let dense = min_max(&dense_raw);
    sparse
        .into_iter()
        .zip(dense)
        .map(|(s, d)| (s, d, alpha * d + (1.0 - alpha) * s))
        .collect()
}

/// Top-`k` chunks by `alpha * dense + (1 - alpha) * sparse`, ties broken by
/// chunk id.
pub fn hybrid_retrieve(
    index: &Index,
    embedder: &dyn Embedder,
    query: &str,
    k: usize,
    alpha: f64,
) -> Result<RetrievalOutcome, RetrievalError> {
    if index.is_empty() {
        log::warn!("retrieval against an empty index");
        return Ok(RetrievalOutcome {
            results: Vec::new(),
            empty_index: true,
        });
    }
    let q = embedder.embed_one(query)?;
    let mut results: Vec<RetrievalResult> = fused_scores(index, &q, query, alpha)
        .into_iter()
        .enumerate()
        .map(|(i, (s, d, f))| RetrievalResult {
            chunk: i,
            chunk_id: index.chunks[i].chunk_id.clone(),
            sparse_score: s,
            dense_score: d,
            fused_score: f,
            rerank_score: None,
        })
        .collect();
    results.sort_by(|a, b| {
        b.fused_score
            .total_cmp(&a.fused_score)
            .then_with(|| a.chunk_id.cmp(&b.chunk_id))
    });
    results.truncate(k.max(1));
    Ok(RetrievalOutcome {
        results,
        empty_index: false,
    })
}

fn keyword_overlap(query_terms: &std::collections::BTreeSet<String>, sentence: &str) -> usize {
    content_terms(sentence).intersection(query_terms).count()
}

/// Keeps sentences sharing at least one content term with the query, in
/// their original order. Falls back to the single best sentence.
pub fn compress(query: &str, text: &str) -> String {
    let q = content_terms(query);
    let sentences = split_sentences(text);
    if sentences.is_empty() {
        return text.trim().to_string();
    }
    let scored: Vec<(usize, &str)> = sentences
        .iter()
        .map(|s| (keyword_overlap(&q, s), *s))
        .collect();
    let kept: Vec<&str> = scored
        .iter()
        .filter(|(n, _)| *n > 0)
        .map(|(_, s)| *s)
        .collect();
    if !kept.is_empty() {
        return kept.join(" ");
    }
    // no overlap anywhere: every score is zero, keep the first sentence
    let best = scored
        .iter()
        .enumerate()
        .max_by(|a, b| a.1 .0.cmp(&b.1 .0).then(b.0.cmp(&a.0)))
        .map(|(_, s)| s.1);
    best.unwrap_or("").to_string()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompressedChunk {
    pub result: RetrievalResult,
    pub compressed_text: String,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct CompressOutcome {
    pub kept: Vec<CompressedChunk>,
    /// The reranker failed and fused order was used instead.
    pub rerank_failed: bool,
}

/// Reranks the top fused results, keeps `top_m`, and compresses each.
pub fn rerank_and_compress(
    index: &Index,
    reranker: &dyn Reranker,
    query: &str,
    results: &[RetrievalResult],
    top_m: usize,
) -> CompressOutcome {
    let mut pool: Vec<RetrievalResult> = results.iter().take(RERANK_POOL).cloned().collect();
    if pool.is_empty() {
        return CompressOutcome::default();
    }
    let texts: Vec<&str> = pool
        .iter()
        .map(|r| index.chunks[r.chunk].text.as_str())
        .collect();
    let rerank_failed = match reranker.rerank(query, &texts) {
        Ok(scores) if scores.len() == pool.len() => {
            for (r, s) in pool.iter_mut().zip(scores) {
                r.rerank_score = Some(s);
            }
            // stable: equal rerank scores keep fused order
            pool.sort_by(|a, b| {
                b.rerank_score
                    .unwrap_or(0.0)
                    .total_cmp(&a.rerank_score.unwrap_or(0.0))
            });
            false
        }
        Ok(_) => true,
        Err(e) => {
            log::warn!("reranker failed, keeping fused order: {e}");
            true
        }
    };
    pool.truncate(top_m);
    let kept = pool
        .into_iter()
        .map(|r| {
            let compressed_text = compress(query, &index.chunks[r.chunk].text);
            CompressedChunk {
                result: r,
                compressed_text,
            }
        })
        .collect();
    CompressOutcome {
        kept,
        rerank_failed,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Flagged<T> {
    pub value: T,
    /// The provider failed or returned nothing usable; `value` is the
    /// identity passthrough.
    pub fallback: bool,
}

pub(crate) const REWRITE_PROMPT: &str =
    "Rewrite the user's latest query as one self-contained search query. \
Resolve pronouns using the conversation. Reply with the rewritten query only.";

pub fn rewrite_query(query: &str, history: &[String], chat: &dyn ChatProvider) -> Flagged<String> {
    let mut user = String::new();
    if !history.is_empty() {
        user.push_str("Conversation:\n");
        for h in history {
            user.push_str(h);
            user.push('\n');
        }
        user.push('\n');
    }
    user.push_str(&format!("Query: {query}\n\nRewritten query:"));
    let msgs = [ChatMessage::system(REWRITE_PROMPT), ChatMessage::user(user)];
    match chat.chat(&msgs, &Decoding::max_tokens(64)) {
        Ok(out) => match out.lines().map(str::trim).find(|l| !l.is_empty()) {
            Some(line) => Flagged {
                value: line.trim_matches('"').to_string(),
                fallback: false,
            },
            None => Flagged {
                value: query.to_string(),
                fallback: true,
            },
        },
        Err(e) => {
            log::warn!("query rewrite failed: {e}");
            Flagged {
                value: query.to_string(),
                fallback: true,
            }
        }
    }
}

/// Cue words that, together with two or more entities, suggest the query
/// needs evidence from several documents.
pub const MULTIHOP_CUES: &[&str] = &[
    "both",
    "compare",
    "compared",
    "same",
    "different",
    "older",
    "younger",
    "earlier",
    "later",
    "first",
    "before",
    "after",
    "more",
    "less",
    "than",
    "whose",
    "also",
    "either",
    "neither",
    "between",
    "which",
];

pub fn multihop_triggered(query: &str, ner: &dyn NerProvider) -> Result<bool, ProviderError> {
    let ents = ner.ner(query)?;
    let toks = tokenize(query);
    Ok(ents.len() >= 2 && toks.iter().any(|t| MULTIHOP_CUES.contains(&t.as_str())))
}

pub(crate) const DECOMPOSE_PROMPT: &str =
    "Split the question into 2 or 3 simpler sub-questions that can each be \
answered from a single document. Write one sub-question per line and nothing else.";

/// Sub-queries for multi-hop questions, or `[query]` when the trigger does
/// not fire.
pub fn decompose_multihop(
    query: &str,
    ner: &dyn NerProvider,
    chat: &dyn ChatProvider,
) -> Flagged<Vec<String>> {
    let identity = |fallback| Flagged {
        value: vec![query.to_string()],
        fallback,
    };
    match multihop_triggered(query, ner) {
        Ok(false) => return identity(false),
        Ok(true) => {}
        Err(e) => {
            log::warn!("multi-hop trigger NER failed: {e}");
            return identity(true);
        }
    }
    let msgs = [
        ChatMessage::system(DECOMPOSE_PROMPT),
        ChatMessage::user(format!("Question: {query}")),
    ];
    let out = match chat.chat(&msgs, &Decoding::max_tokens(128)) {
        Ok(o) => o,
        Err(e) => {
            log::warn!("decomposition failed: {e}");
            return identity(true);
        }
    };
    let subs: Vec<String> = out
        .lines()
        .map(|l| {
            l.trim()
                .trim_start_matches(|c: char| {
                    c.is_ascii_digit() || matches!(c, '.' | ')' | '-' | '*')
                })
                .trim()
        })
        .filter(|l| !l.is_empty())
        .take(3)
        .map(str::to_string)
        .collect();
    if subs.len() < 2 {
        return identity(true);
    }
    Flagged {
        value: subs,
        fallback: false,
    }
}

pub(crate) const VERIFY_PROMPT: &str =
    "Check the answer against the context. Reply SUPPORTED if every claim in the \
answer is stated in the context, otherwise reply UNSUPPORTED.";

/// Optional self-check of a generated answer. `None` when the provider
/// fails or the reply has no verdict.
pub fn verify_answer(
    query: &str,
    context: &str,
    answer: &str,
    chat: &dyn ChatProvider,
) -> Option<bool> {
    let user = format!("Query: {query}\n\nContext:\n{context}\n\nAnswer: {answer}\n\nVerdict:");
    let out = chat
        .chat(
            &[ChatMessage::system(VERIFY_PROMPT), ChatMessage::user(user)],
            &Decoding::max_tokens(8),
        )
        .ok()?;
    let up = out.to_uppercase();
    if up.contains("UNSUPPORTED") {
        Some(false)
    } else if up.contains("SUPPORTED") {
        Some(true)
    } else {
        None
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::providers::{
        EntityCategory, HashEmbedder, LexiconNer, OverlapReranker, ScriptedChat,
    };
    use proptest::prelude::*;

    fn words(n: usize) -> String {
        (0..n)
            .map(|i| format!("w{i}"))
            .collect::<Vec<_>>()
            .join(" ")
    }

    #[test]
    fn chunking_thresholds() {
        let d = ContextDocument::whole("d", words(250));
        assert_eq!(chunk_document(&d, Source::ContractNli, false).len(), 1);
        let d = ContextDocument::whole("q", words(500));
        let c = chunk_document(&d, Source::Quac, false);
        assert_eq!(c.len(), 2);
        assert!(c[1].text.starts_with("w350 "));
        assert_eq!(c[0].word_count, 400);
        assert_eq!(c[1].word_count, 150);
        let d = ContextDocument::whole("s", words(900));
        assert_eq!(chunk_document(&d, Source::Sharc, false).len(), 1);
    }

    #[test]
    fn fine_chunks_are_sentences() {
        let d = ContextDocument::whole("d", "Alpha beta. Gamma delta! Epsilon?");
        let c = chunk_document(&d, Source::Sharc, true);
        assert_eq!(c.len(), 4);
        assert_eq!(c[2].text, "Gamma delta!");
        assert_eq!(c[2].granularity, Granularity::Fine);
    }

    #[test]
    fn corpus_dedups_by_content() {
        let docs = vec![
            (ContextDocument::whole("a", "same text"), Source::Sharc),
            (ContextDocument::whole("b", "same text"), Source::Sharc),
            (ContextDocument::whole("c", "other"), Source::Sharc),
        ];
        let c = chunk_corpus(&docs, false);
        assert_eq!(
            c.iter().map(|c| c.doc_id.as_str()).collect::<Vec<_>>(),
            ["a", "c"]
        );
    }

    #[test]
    fn min_max_degenerate() {
        assert_eq!(min_max(&[2.0, 2.0]), vec![0.5, 0.5]);
        assert_eq!(min_max(&[1.0, 3.0, 2.0]), vec![0.0, 1.0, 0.5]);
    }

    #[test]
    fn bm25_matches_hand_formula() {
        let docs = [
            "apple banana apple",
            "banana cherry",
            "cherry date elder fig",
        ];
        let bm = Bm25::build(&docs, Bm25Params::default());
        let n = 3.0f64;
        let avgdl = 9.0 / 3.0;
        let idf = |df: f64| (1.0 + (n - df + 0.5) / (df + 0.5)).ln();
        let term = |tf: f64, dl: f64, df: f64| {
            idf(df) * tf * 2.2 / (tf + 1.2 * (0.25 + 0.75 * dl / avgdl))
        };
        let s = bm.scores("apple cherry");
        assert!((s[0] - term(2.0, 3.0, 1.0)).abs() < 1e-12);
        assert!((s[1] - term(1.0, 2.0, 2.0)).abs() < 1e-12);
        assert!((s[2] - term(1.0, 4.0, 2.0)).abs() < 1e-12);
    }

    fn toy_index() -> (Index, HashEmbedder) {
        let e = HashEmbedder::default();
        let texts = [
            "Bloc Party released Silent Alarm in 2005.",
            "Silent Alarm was recorded in Copenhagen.",
            "Redundancy pay depends on years of service.",
            "The pension plan covers full-time employees.",
            "Reykjavik is the capital of Iceland.",
        ];
        let chunks = texts
            .iter()
            .enumerate()
            .map(|(i, t)| {
                chunk_document(
                    &ContextDocument::whole(format!("d{i}"), *t),
                    Source::HotpotQa,
                    false,
                )
                .remove(0)
            })
            .collect();
        (Index::build(chunks, &e, Bm25Params::default()).unwrap(), e)
    }

    #[test]
    fn hybrid_matches_brute_force_and_degenerate_alphas() {
        let (idx, e) = toy_index();
        let q = "when was silent alarm released";
        for alpha in [0.0, 0.5, 1.0] {
            let got = hybrid_retrieve(&idx, &e, q, 5, alpha).unwrap().results;
            // brute force
            let qv = e.embed_one(q).unwrap();
            let sp = min_max(&idx.bm25.scores(q));
            let de = min_max(
                &idx.embeddings
                    .iter()
                    .map(|v| cosine(v, &qv))
                    .collect::<Vec<_>>(),
            );
            let mut expect: Vec<(f64, String)> = (0..5)
                .map(|i| {
                    (
                        alpha * de[i] + (1.0 - alpha) * sp[i],
                        idx.chunks[i].chunk_id.clone(),
                    )
                })
                .collect();
            expect.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
            let ids: Vec<_> = got.iter().map(|r| r.chunk_id.clone()).collect();
            assert_eq!(ids, expect.iter().map(|x| x.1.clone()).collect::<Vec<_>>());
            if alpha == 1.0 {
                assert!(got.windows(2).all(|w| w[0].dense_score >= w[1].dense_score));
            }
            if alpha == 0.0 {
                assert!(got
                    .windows(2)
                    .all(|w| w[0].sparse_score >= w[1].sparse_score));
            }
        }
    }

    #[test]
    fn empty_index_flags() {
        let out = hybrid_retrieve(&Index::empty(), &HashEmbedder::default(), "q", 3, 0.5).unwrap();
        assert!(out.empty_index && out.results.is_empty());
    }

    #[test]
    fn compression_rules() {
        let t = "Silent Alarm sold well. The weather was cold. Alarm clocks ring.";
        assert_eq!(
            compress("silent alarm", t),
            "Silent Alarm sold well. Alarm clocks ring."
        );
        assert_eq!(
            compress("alarm", "Alarm one. Alarm two."),
            "Alarm one. Alarm two."
        );
        assert_eq!(
            compress("pension", "No match here. Nor here."),
            "No match here."
        );
    }

    #[test]
    fn rerank_keeps_top_m() {
        let (idx, e) = toy_index();
        let res = hybrid_retrieve(&idx, &e, "silent alarm", 5, 0.5)
            .unwrap()
            .results;
        let out = rerank_and_compress(&idx, &OverlapReranker::default(), "silent alarm", &res, 2);
        assert_eq!(out.kept.len(), 2);
        assert!(!out.rerank_failed);
        assert!(
            out.kept[0].result.rerank_score.unwrap() >= out.kept[1].result.rerank_score.unwrap()
        );
    }

    #[test]
    fn persistence_round_trip() {
        let (idx, _) = toy_index();
        let dir = tempfile::tempdir().unwrap();
        idx.save(dir.path()).unwrap();
        let back = Index::load(dir.path()).unwrap();
        assert_eq!(back.chunks, idx.chunks);
        assert_eq!(back.embeddings, idx.embeddings);
        assert_eq!(back.bm25, idx.bm25);
        let raw = fs::read(dir.path().join("embeddings.bin")).unwrap();
        assert_eq!(&raw[..4], b"PQIX");
        fs::write(dir.path().join("embeddings.bin"), &raw[..raw.len() - 3]).unwrap();
        assert!(matches!(
            Index::load(dir.path()),
            Err(RetrievalError::Corrupt { .. })
        ));
    }

    #[test]
    fn rewrite_and_decompose() {
        let chat = ScriptedChat::new().with_queue([
            "Silent Alarm release date",
            "Who founded A?\nWho founded B?",
        ]);
        assert_eq!(
            rewrite_query(
                "when was it released",
                &["User: Silent Alarm".into()],
                &chat
            )
            .value,
            "Silent Alarm release date"
        );
        let ner = LexiconNer::from_entries([
            ("Bloc Party", EntityCategory::Organisation),
            ("Kaiser Chiefs", EntityCategory::Organisation),
        ]);
        let single = decompose_multihop("Who is Bloc Party?", &ner, &chat);
        assert_eq!(single.value, vec!["Who is Bloc Party?"]);
        let multi = decompose_multihop(
            "Which formed first, Bloc Party or Kaiser Chiefs?",
            &ner,
            &chat,
        );
        assert_eq!(multi.value.len(), 2);
        assert!(!multi.fallback);
    }

    proptest! {
        #[test]
        fn windows_reconstruct_words(n in 1usize..1500) {
            let d = ContextDocument::whole("d", words(n));
            let chunks = chunk_document(&d, Source::Quac, false);
            let mut rebuilt: Vec<String> = Vec::new();
            for (i, c) in chunks.iter().enumerate() {
                let ws: Vec<String> = c.text.split_whitespace().map(str::to_string).collect();
                let skip = if i == 0 { 0 } else { CHUNK_OVERLAP };
                rebuilt.extend(ws.into_iter().skip(skip));
            }
            prop_assert_eq!(rebuilt.join(" "), words(n));
        }

        #[test]
        fn compression_is_verbatim(text in "[A-Z][a-z]{1,6}( [a-z]{1,6}){0,4}[.?!]( [A-Z][a-z]{1,6}( [a-z]{1,6}){0,4}[.?!]){0,4}",
                                   q in "[a-z]{1,6}( [a-z]{1,6}){0,2}") {
            let out = compress(&q, &text);
            prop_assert!(!out.is_empty());
            for s in split_sentences(&out) {
                prop_assert!(text.contains(s));
            }
        }
    }
}
