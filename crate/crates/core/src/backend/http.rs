//! JSON-over-HTTP backends.
//!
//! * generation: OpenAI-compatible chat completions
//!   (`{"model","messages","top_p","temperature","max_tokens","seed"}` →
//!   `choices[0].message.content`)
//! * embedding: `{"model","texts":[...]}` → `{"embeddings":[[...]]}`
//! * entailment: `{"model","premise","hypothesis"}` →
//!   `{"probs":{"entailment","neutral","contradiction"}}`
//!
//! Transport errors, 429 and 5xx are retried with jittered exponential
//! backoff; 401/403 fail immediately as auth errors, and any other 4xx is
//! not retried.

use std::sync::OnceLock;
use std::time::Duration;

use rand::Rng;
use serde_json::{json, Value};

use super::{BackendError, Embedder, EmbeddingVector, Entailer, EntailmentJudgment, GenerationRequest, Generator};
use crate::domain::BackendDescriptor;

struct JsonClient {
    desc: BackendDescriptor,
    agent: ureq::Agent,
}

impl JsonClient {
    fn new(desc: BackendDescriptor) -> Self {
        let agent = ureq::AgentBuilder::new().timeout(Duration::from_millis(desc.timeout_ms)).build();
        JsonClient { desc, agent }
    }

    fn credential(&self) -> Result<Option<String>, BackendError> {
        match &self.desc.credential_env {
            None => Ok(None),
            Some(var) if var.is_empty() => Ok(None),
            Some(var) => std::env::var(var)
                .map(Some)
                .map_err(|_| BackendError::Auth(format!("environment variable {var} is not set"))),
        }
    }

    fn backoff(&self, attempt: u32) -> Duration {
        let base = self.desc.retry.base_backoff_ms as f64 * 2f64.powi(attempt.saturating_sub(1) as i32);
        let jitter: f64 = rand::thread_rng().gen_range(0.5..=1.0);
        Duration::from_millis((base * jitter) as u64)
    }

    fn post(&self, body: &Value) -> Result<Value, BackendError> {
        let token = self.credential()?;
        let max_attempts = self.desc.retry.max_attempts.max(1);
        let mut last = String::new();
        for attempt in 1..=max_attempts {
            log::debug!("POST {} (attempt {attempt}) body={body}", self.desc.endpoint_url);
            let mut req = self.agent.post(&self.desc.endpoint_url);
            if let Some(t) = &token {
                req = req.set("Authorization", &format!("Bearer {t}"));
            }
            match req.send_json(body) {
                Ok(resp) => {
                    let text = resp
                        .into_string()
                        .map_err(|e| BackendError::Malformed(format!("reading body: {e}")))?;
                    log::debug!("response from {}: {text}", self.desc.endpoint_url);
                    return serde_json::from_str(&text)
                        .map_err(|e| BackendError::Malformed(format!("invalid JSON: {e}")));
                }
                Err(ureq::Error::Status(code, resp)) => {
                    let body = resp.into_string().unwrap_or_default();
                    match code {
                        401 | 403 => return Err(BackendError::Auth(format!("HTTP {code}"))),
                        429 | 500..=599 => last = format!("HTTP {code}: {body}"),
                        _ => return Err(BackendError::Rejected { status: code, body }),
                    }
                }
                Err(ureq::Error::Transport(t)) => last = t.to_string(),
            }
            if attempt < max_attempts {
                std::thread::sleep(self.backoff(attempt));
            }
        }
        Err(BackendError::Unavailable { attempts: max_attempts, last })
    }
}

pub struct HttpGenerator {
    client: JsonClient,
}

impl HttpGenerator {
    pub fn new(desc: BackendDescriptor) -> Self {
        HttpGenerator { client: JsonClient::new(desc) }
    }
}

impl Generator for HttpGenerator {
    fn generate(&self, req: &GenerationRequest) -> Result<String, BackendError> {
        req.validate()?;
        let body = json!({
            "model": self.client.desc.model_name,
            "messages": [{"role": "user", "content": req.prompt}],
            "top_p": req.top_p,
            "temperature": req.temperature,
            "max_tokens": req.max_tokens,
            "seed": req.seed,
        });
        let resp = self.client.post(&body)?;
        match resp.pointer("/choices/0/message/content") {
            Some(Value::String(s)) => Ok(s.clone()),
            // providers return null content for empty completions
            Some(Value::Null) => Ok(String::new()),
            _ => Err(BackendError::Malformed("missing choices[0].message.content".into())),
        }
    }
}

pub struct HttpEmbedder {
    client: JsonClient,
    dim: OnceLock<usize>,
}

impl HttpEmbedder {
    pub fn new(desc: BackendDescriptor) -> Self {
        HttpEmbedder { client: JsonClient::new(desc), dim: OnceLock::new() }
    }
}

fn parse_vector(v: &Value) -> Result<Vec<f64>, BackendError> {
    v.as_array()
        .ok_or_else(|| BackendError::Malformed("embedding is not an array".into()))?
        .iter()
        .map(|x| x.as_f64().ok_or_else(|| BackendError::Malformed("non-numeric embedding value".into())))
        .collect()
}

impl Embedder for HttpEmbedder {
    fn embed_batch(&self, texts: &[String]) -> Result<Vec<EmbeddingVector>, BackendError> {
        if texts.is_empty() {
            return Err(BackendError::EmptyBatch);
        }
        if texts.len() > self.max_batch() {
            return Err(BackendError::BatchTooLarge { max: self.max_batch(), got: texts.len() });
        }
        let resp = self.client.post(&json!({"model": self.client.desc.model_name, "texts": texts}))?;
        let rows = resp
            .get("embeddings")
            .and_then(Value::as_array)
            .ok_or_else(|| BackendError::Malformed("missing `embeddings` array".into()))?;
        if rows.len() != texts.len() {
            return Err(BackendError::Malformed(format!("{} embeddings for {} texts", rows.len(), texts.len())));
        }
        let mut out = Vec::with_capacity(rows.len());
        for row in rows {
            let v = EmbeddingVector::normalized(parse_vector(row)?)?;
            let expected = *self.dim.get_or_init(|| v.dim());
            if v.dim() != expected {
                return Err(BackendError::DimMismatch { expected, got: v.dim() });
            }
            out.push(v);
        }
        Ok(out)
    }

    fn max_batch(&self) -> usize {
        self.client.desc.batch_size.max(1)
    }

    fn multilingual(&self) -> bool {
        self.client.desc.multilingual
    }
}

pub struct HttpEntailer {
    client: JsonClient,
}

impl HttpEntailer {
    pub fn new(desc: BackendDescriptor) -> Self {
        HttpEntailer { client: JsonClient::new(desc) }
    }
}

impl Entailer for HttpEntailer {
    fn entails(&self, premise: &str, hypothesis: &str) -> Result<EntailmentJudgment, BackendError> {
        if premise.trim().is_empty() || hypothesis.trim().is_empty() {
            return Err(BackendError::InvalidRequest("entailment inputs must be non-empty".into()));
        }
        let resp = self.client.post(&json!({
            "model": self.client.desc.model_name,
            "premise": premise,
            "hypothesis": hypothesis,
        }))?;
        let probs = resp.get("probs").unwrap_or(&resp);
        let get = |k: &str| {
            probs
                .get(k)
                .and_then(Value::as_f64)
                .ok_or_else(|| BackendError::Malformed(format!("missing probability `{k}`")))
        };
        EntailmentJudgment::from_scores(get("entailment")?, get("neutral")?, get("contradiction")?)
    }
}
