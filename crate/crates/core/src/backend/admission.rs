//! Per-backend admission control.

use std::sync::{Condvar, Mutex};

use super::{BackendError, Embedder, EmbeddingVector, Entailer, EntailmentJudgment, GenerationRequest, Generator};

/// Counting semaphore bounding concurrent requests to one backend.
#[derive(Debug)]
pub struct Admission {
    limit: usize,
    in_use: Mutex<usize>,
    freed: Condvar,
}

pub struct Permit<'a> {
    admission: &'a Admission,
}

impl Admission {
    pub fn new(limit: usize) -> Self {
        Admission { limit: limit.max(1), in_use: Mutex::new(0), freed: Condvar::new() }
    }

    pub fn limit(&self) -> usize {
        self.limit
    }

    pub fn acquire(&self) -> Permit<'_> {
        let mut in_use = self.in_use.lock().expect("admission lock");
        while *in_use >= self.limit {
            in_use = self.freed.wait(in_use).expect("admission lock");
        }
        *in_use += 1;
        Permit { admission: self }
    }
}

impl Drop for Permit<'_> {
    fn drop(&mut self) {
        let mut in_use = self.admission.in_use.lock().expect("admission lock");
        *in_use -= 1;
        self.admission.freed.notify_one();
    }
}

/// Wraps a backend so at most `limit` calls run at once.
pub struct Throttled<B> {
    inner: B,
    admission: Admission,
}

impl<B> Throttled<B> {
    pub fn new(inner: B, admission: Admission) -> Self {
        Throttled { inner, admission }
    }

    pub fn inner(&self) -> &B {
        &self.inner
    }
}

impl<B: Generator> Generator for Throttled<B> {
    fn generate(&self, req: &GenerationRequest) -> Result<String, BackendError> {
        let _permit = self.admission.acquire();
        self.inner.generate(req)
    }
}

impl<B: Embedder> Embedder for Throttled<B> {
    fn embed_batch(&self, texts: &[String]) -> Result<Vec<EmbeddingVector>, BackendError> {
        let _permit = self.admission.acquire();
        self.inner.embed_batch(texts)
    }

    fn max_batch(&self) -> usize {
        self.inner.max_batch()
    }

    fn multilingual(&self) -> bool {
        self.inner.multilingual()
    }
}

impl<B: Entailer> Entailer for Throttled<B> {
    fn entails(&self, premise: &str, hypothesis: &str) -> Result<EntailmentJudgment, BackendError> {
        let _permit = self.admission.acquire();
        self.inner.entails(premise, hypothesis)
    }
}
