//! Search-baseline pages and retrieval-augmented prompt context.
//!
//! Pages arrive pre-fetched as `<search_dir>/<topic_id>/<n>.txt` with a
//! `<n>.meta.json` sidecar holding `{url, content_type}`.

use std::collections::HashSet;
use std::path::Path;
use std::sync::OnceLock;

use chrono::{DateTime, Utc};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::backend::{dot, BackendError, Embedder, EmbeddingVector, Generator};
use crate::corpus::{decompose_response, Decomposition, DecompositionPromptId};
use crate::domain::{GenerationSetting, ResponseRecord, Topic};
use crate::manifest::SEARCH_GENERATOR_ID;
use crate::seed;

#[derive(Debug, Error)]
pub enum RetrievalError {
    #[error("cannot read {path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("no paragraphs to build a context from")]
    NoParagraphs,
    #[error(transparent)]
    Backend(#[from] BackendError),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PageRecord {
    pub topic_id: String,
    /// The `<n>` of the page's file name.
    pub index: u32,
    pub url: String,
    pub content_type: String,
    pub text: String,
    pub char_count: usize,
}

impl PageRecord {
    pub fn page_ref(&self) -> String {
        format!("{}/{}", self.topic_id, self.index)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum RejectReason {
    TooShort,
    Pdf,
    SocialMedia,
    MetadataMissing,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RejectedPage {
    pub topic_id: String,
    pub index: u32,
    pub url: Option<String>,
    pub reason: RejectReason,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct PageIngest {
    pub kept: Vec<PageRecord>,
    pub rejected: Vec<RejectedPage>,
}

#[derive(Deserialize)]
struct PageMeta {
    url: String,
    content_type: String,
}

/// Social-media domains from the shipped blocklist.
pub fn social_domains() -> &'static HashSet<String> {
    static SET: OnceLock<HashSet<String>> = OnceLock::new();
    SET.get_or_init(|| {
        include_str!("../data/social_domains.txt")
            .lines()
            .map(str::trim)
            .filter(|l| !l.is_empty() && !l.starts_with('#'))
            .map(str::to_ascii_lowercase)
            .collect()
    })
}

fn is_social(url: &str) -> bool {
    let Some(host) = url::Url::parse(url).ok().and_then(|u| u.host_str().map(str::to_ascii_lowercase)) else {
        return false;
    };
    let blocked = social_domains();
    let mut h = host.as_str();
    loop {
        if blocked.contains(h) {
            return true;
        }
        match h.split_once('.') {
            Some((_, rest)) if rest.contains('.') => h = rest,
            _ => return false,
        }
    }
}

fn is_pdf(meta: &PageMeta) -> bool {
    meta.content_type.to_ascii_lowercase().contains("pdf")
        || url::Url::parse(&meta.url).is_ok_and(|u| u.path().to_ascii_lowercase().ends_with(".pdf"))
}

/// Loads and filters the pages of one topic. A missing topic directory
/// yields no pages.
pub fn ingest_pages(search_dir: &Path, topic_id: &str, min_chars: usize) -> Result<PageIngest, RetrievalError> {
    let dir = search_dir.join(topic_id);
    let io = |path: &Path| {
        let path = path.display().to_string();
        move |source| RetrievalError::Io { path, source }
    };
    let entries = match std::fs::read_dir(&dir) {
        Ok(e) => e,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(PageIngest::default()),
        Err(e) => return Err(io(&dir)(e)),
    };
    let mut indices = Vec::new();
    for entry in entries {
        let name = entry.map_err(io(&dir))?.file_name();
        let name = name.to_string_lossy();
        if let Some(n) = name.strip_suffix(".txt").and_then(|s| s.parse::<u32>().ok()) {
            indices.push(n);
        }
    }
    indices.sort_unstable();

    let mut out = PageIngest::default();
    for index in indices {
        let text_path = dir.join(format!("{index}.txt"));
        let text = std::fs::read_to_string(&text_path).map_err(io(&text_path))?;
        let meta_path = dir.join(format!("{index}.meta.json"));
        let meta: Option<PageMeta> =
            std::fs::read_to_string(&meta_path).ok().and_then(|m| serde_json::from_str(&m).ok());
        let reject = |url: Option<String>, reason| RejectedPage { topic_id: topic_id.into(), index, url, reason };
        let Some(meta) = meta else {
            log::warn!("{}: metadata missing or unreadable, page skipped", meta_path.display());
            out.rejected.push(reject(None, RejectReason::MetadataMissing));
            continue;
        };
        let char_count = text.chars().count();
        let reason = if is_pdf(&meta) {
            Some(RejectReason::Pdf)
        } else if is_social(&meta.url) {
            Some(RejectReason::SocialMedia)
        } else if char_count < min_chars {
            Some(RejectReason::TooShort)
        } else {
            None
        };
        match reason {
            Some(r) => out.rejected.push(reject(Some(meta.url), r)),
            None => out.kept.push(PageRecord {
                topic_id: topic_id.into(),
                index,
                url: meta.url,
                content_type: meta.content_type,
                text,
                char_count,
            }),
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Paragraph {
    pub id: String,
    pub page_ref: String,
    pub index: u32,
    pub text: String,
}

/// Splits on blank lines, trims, and drops paragraphs shorter than
/// `min_chars` characters.
pub fn split_paragraphs(page: &PageRecord, min_chars: usize) -> Vec<Paragraph> {
    let mut blocks: Vec<String> = Vec::new();
    let mut current = String::new();
    for line in page.text.lines() {
        if line.trim().is_empty() {
            if !current.is_empty() {
                blocks.push(std::mem::take(&mut current));
            }
        } else {
            if !current.is_empty() {
                current.push('\n');
            }
            current.push_str(line);
        }
    }
    if !current.is_empty() {
        blocks.push(current);
    }
    blocks
        .into_iter()
        .map(|b| b.trim().to_string())
        .filter(|b| b.chars().count() >= min_chars)
        .enumerate()
        .map(|(i, text)| Paragraph {
            id: format!("{}#{i}", page.page_ref()),
            page_ref: page.page_ref(),
            index: i as u32,
            text,
        })
        .collect()
}

/// Token count proxy: one token per four characters, rounded up.
pub fn estimate_tokens(text: &str) -> usize {
    text.chars().count().div_ceil(4)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RagContext {
    pub prompt_id: String,
    pub paragraph_ids: Vec<String>,
    pub token_estimate: usize,
    /// The selected paragraphs joined by blank lines.
    pub text: String,
    /// The only paragraph was cut to fit the budget.
    #[serde(default)]
    pub truncated: bool,
}

/// Order in which paragraphs are offered to the budget: above-floor
/// paragraphs in seeded random order, then the rest by descending
/// similarity. Returns indices into `sims`.
pub fn context_order(sims: &[f64], floor: f64, seed: u64) -> Vec<usize> {
    let mut ranked: Vec<usize> = (0..sims.len()).collect();
    ranked.sort_by(|&a, &b| sims[b].total_cmp(&sims[a]).then(a.cmp(&b)));
    let split = ranked.iter().position(|&i| sims[i] <= floor).unwrap_or(ranked.len());
    ranked[..split].shuffle(&mut seed::rng(seed));
    ranked
}

/// Fills the token budget first-fit from [`context_order`]: a paragraph
/// that does not fit is skipped and later, smaller ones may still enter.
/// The budget applies to the joined text, separators included.
/// When nothing fits, the first paragraph is cut to the budget.
pub fn assemble_context(
    prompt_id: &str,
    query: &EmbeddingVector,
    paragraphs: &[Paragraph],
    embeddings: &[EmbeddingVector],
    floor: f64,
    budget: usize,
    seed: u64,
) -> Result<RagContext, RetrievalError> {
    if paragraphs.is_empty() {
        return Err(RetrievalError::NoParagraphs);
    }
    let sims: Vec<f64> = embeddings.iter().map(|e| dot(query.values(), e.values())).collect();
    let order = context_order(&sims, floor, seed);
    let mut chosen = Vec::new();
    let mut chars = 0;
    for &i in &order {
        let sep = if chosen.is_empty() { 0 } else { 2 };
        let next = chars + sep + paragraphs[i].text.chars().count();
        if next.div_ceil(4) <= budget {
            chars = next;
            chosen.push(i);
        }
    }
    if chosen.is_empty() {
        let top = &paragraphs[order[0]];
        let text: String = top.text.chars().take(budget * 4).collect();
        return Ok(RagContext {
            prompt_id: prompt_id.into(),
            paragraph_ids: vec![top.id.clone()],
            token_estimate: estimate_tokens(&text),
            text,
            truncated: true,
        });
    }
    Ok(RagContext {
        prompt_id: prompt_id.into(),
        paragraph_ids: chosen.iter().map(|&i| paragraphs[i].id.clone()).collect(),
        token_estimate: chars.div_ceil(4),
        text: chosen.iter().map(|&i| paragraphs[i].text.as_str()).collect::<Vec<_>>().join("\n\n"),
        truncated: false,
    })
}

/// Embeds the prompt and assembles its context.
#[allow(clippy::too_many_arguments)]
pub fn build_rag_context(
    prompt_id: &str,
    prompt: &str,
    paragraphs: &[Paragraph],
    embeddings: &[EmbeddingVector],
    embedder: &dyn Embedder,
    floor: f64,
    budget: usize,
    seed: u64,
) -> Result<RagContext, RetrievalError> {
    if paragraphs.is_empty() {
        return Err(RetrievalError::NoParagraphs);
    }
    let query = embedder.embed_batch(&[prompt.to_string()])?.remove(0);
    assemble_context(prompt_id, &query, paragraphs, embeddings, floor, budget, seed)
}

/// Mean cosine similarity over every (prompt, paragraph) pair; the
/// `auto` similarity floor.
pub fn mean_similarity(prompts: &[EmbeddingVector], paragraphs: &[EmbeddingVector]) -> Option<f64> {
    if prompts.is_empty() || paragraphs.is_empty() {
        return None;
    }
    let total: f64 = prompts.iter().flat_map(|p| paragraphs.iter().map(move |q| p.cosine(q))).sum();
    Some(total / (prompts.len() * paragraphs.len()) as f64)
}

/// The prompt sent in a RAG cell.
pub fn rag_prompt(prompt: &str, context: &RagContext) -> String {
    format!("Use the following background material where relevant.\n\n{}\n\n{prompt}", context.text)
}

/// A kept page as a SEARCH pseudo-response, so it is chunked and
/// decomposed like generated text.
pub fn page_response(page: &PageRecord, created_at: DateTime<Utc>) -> ResponseRecord {
    ResponseRecord {
        generator_id: SEARCH_GENERATOR_ID.into(),
        topic_id: page.topic_id.clone(),
        prompt_id: None,
        setting: GenerationSetting::Search,
        text: page.text.clone(),
        context_ids: Vec::new(),
        seed: page.index as u64,
        created_at,
    }
}

/// Decomposes every kept page of a topic into SEARCH claims.
pub fn search_baseline_claims(
    pages: &[PageRecord],
    decomposer: &dyn Generator,
    topic: &Topic,
    prompt: DecompositionPromptId,
    seed: u64,
    created_at: DateTime<Utc>,
) -> Result<Decomposition, BackendError> {
    if pages.is_empty() {
        log::warn!("topic {}: no kept search pages, SEARCH baseline is empty", topic.id);
    }
    let mut out = Decomposition::default();
    for page in pages {
        let d = decompose_response(decomposer, &page_response(page, created_at), topic, prompt, seed)?;
        out.claims.extend(d.claims);
        out.degenerate_chunks.extend(d.degenerate_chunks);
    }
    Ok(out)
}
