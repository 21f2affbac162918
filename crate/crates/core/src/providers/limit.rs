use std::sync::{Arc, Condvar, Mutex};

use super::{
    ChatMessage, ChatProvider, Decoding, Embedder, Embedding, NamedEntity, NerProvider,
    ProviderError, Reranker,
};

pub const DEFAULT_CONCURRENCY: usize = 5;

/// Counting semaphore bounding in-flight provider calls.
#[derive(Debug, Clone)]
pub struct ConcurrencyLimit {
    inner: Arc<(Mutex<usize>, Condvar)>,
    max: usize,
}

pub struct Permit<'a> {
    limit: &'a ConcurrencyLimit,
}

impl ConcurrencyLimit {
    pub fn new(max: usize) -> Self {
        let max = max.max(1);
        ConcurrencyLimit {
            inner: Arc::new((Mutex::new(0), Condvar::new())),
            max,
        }
    }

    pub fn max(&self) -> usize {
        self.max
    }

    pub fn in_flight(&self) -> usize {
        *self.inner.0.lock().unwrap()
    }

    pub fn acquire(&self) -> Permit<'_> {
        let (lock, cv) = &*self.inner;
        let mut n = lock.lock().unwrap();
        while *n >= self.max {
            n = cv.wait(n).unwrap();
        }
        *n += 1;
        Permit { limit: self }
    }
}

impl Default for ConcurrencyLimit {
    fn default() -> Self {
        ConcurrencyLimit::new(DEFAULT_CONCURRENCY)
    }
}

impl Drop for Permit<'_> {
    fn drop(&mut self) {
        let (lock, cv) = &*self.limit.inner;
        *lock.lock().unwrap() -= 1;
        cv.notify_one();
    }
}

/// Wraps a provider so every call holds a permit from a shared limit.
pub struct Bounded<P> {
    pub inner: P,
    limit: ConcurrencyLimit,
}

impl<P> Bounded<P> {
    pub fn new(inner: P, limit: ConcurrencyLimit) -> Self {
        Bounded { inner, limit }
    }
}

impl<P: ChatProvider> ChatProvider for Bounded<P> {
    fn chat(&self, messages: &[ChatMessage], decoding: &Decoding) -> Result<String, ProviderError> {
        let _p = self.limit.acquire();
        self.inner.chat(messages, decoding)
    }
}

impl<P: Embedder> Embedder for Bounded<P> {
    fn dim(&self) -> usize {
        self.inner.dim()
    }

    fn embed(&self, texts: &[&str]) -> Result<Vec<Embedding>, ProviderError> {
        let _p = self.limit.acquire();
        self.inner.embed(texts)
    }
}

impl<P: NerProvider> NerProvider for Bounded<P> {
    fn ner(&self, text: &str) -> Result<Vec<NamedEntity>, ProviderError> {
        let _p = self.limit.acquire();
        self.inner.ner(text)
    }
}

impl<P: Reranker> Reranker for Bounded<P> {
    fn rerank(&self, query: &str, chunks: &[&str]) -> Result<Vec<f64>, ProviderError> {
        let _p = self.limit.acquire();
        self.inner.rerank(query, chunks)
    }
}
