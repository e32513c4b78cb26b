//! Claim decomposition prompts and completion parsing.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::{chunk_response, Chunk};
use crate::backend::{BackendError, GenerationRequest, Generator};
use crate::domain::{Claim, ResponseRecord, Topic};

/// Completions longer than this are flagged degenerate and truncated.
pub const MAX_CLAIM_LINES: usize = 200;

const P1: &str = include_str!("../../prompts/P1.txt");
const P2: &str = include_str!("../../prompts/P2.txt");
const P3: &str = include_str!("../../prompts/P3.txt");

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub enum DecompositionPromptId {
    P1,
    P2,
    #[default]
    P3,
}

impl DecompositionPromptId {
    pub fn template(self) -> &'static str {
        match self {
            DecompositionPromptId::P1 => P1,
            DecompositionPromptId::P2 => P2,
            DecompositionPromptId::P3 => P3,
        }
    }
}

impl fmt::Display for DecompositionPromptId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{self:?}")
    }
}

impl FromStr for DecompositionPromptId {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_uppercase().as_str() {
            "P1" => Ok(DecompositionPromptId::P1),
            "P2" => Ok(DecompositionPromptId::P2),
            "P3" => Ok(DecompositionPromptId::P3),
            other => Err(format!("unknown decomposition prompt `{other}` (expected P1, P2 or P3)")),
        }
    }
}

/// Fills `{issue}` and `{content}` in one pass, so placeholder-like text
/// inside the substituted values is left alone.
pub fn render_decomposition_prompt(id: DecompositionPromptId, issue: &str, content: &str) -> String {
    let template = id.template();
    let mut out = String::with_capacity(template.len() + content.len());
    let mut rest = template;
    while let Some(pos) = rest.find('{') {
        out.push_str(&rest[..pos]);
        let tail = &rest[pos..];
        if let Some(after) = tail.strip_prefix("{issue}") {
            out.push_str(issue);
            rest = after;
        } else if let Some(after) = tail.strip_prefix("{content}") {
            out.push_str(content);
            rest = after;
        } else {
            out.push('{');
            rest = &tail[1..];
        }
    }
    out.push_str(rest);
    out
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParsedLines {
    pub lines: Vec<String>,
    /// More than [`MAX_CLAIM_LINES`] lines were returned.
    pub degenerate: bool,
}

fn strip_marker(line: &str) -> &str {
    let line = line.trim();
    for bullet in ["-", "*", "•", "+"] {
        if let Some(rest) = line.strip_prefix(bullet) {
            return rest.trim_start();
        }
    }
    let inner = line.strip_prefix('(').unwrap_or(line);
    let digits = inner.chars().take_while(char::is_ascii_digit).count();
    if digits > 0 {
        let rest = &inner[digits..];
        if let Some(r) = rest.strip_prefix('.').or_else(|| rest.strip_prefix(')')) {
            if r.is_empty() || r.starts_with(char::is_whitespace) {
                return r.trim_start();
            }
        }
    }
    line
}

/// Splits a decomposition completion into claim lines.
pub fn parse_decomposition(completion: &str) -> ParsedLines {
    if completion.trim().eq_ignore_ascii_case("EMPTY") {
        return ParsedLines { lines: Vec::new(), degenerate: false };
    }
    let mut lines: Vec<String> = completion
        .lines()
        .map(strip_marker)
        .map(str::trim)
        .filter(|l| !l.is_empty())
        .map(str::to_string)
        .collect();
    let degenerate = lines.len() > MAX_CLAIM_LINES;
    lines.truncate(MAX_CLAIM_LINES);
    ParsedLines { lines, degenerate }
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct Decomposition {
    pub claims: Vec<Claim>,
    /// Chunk indices whose completion was truncated.
    pub degenerate_chunks: Vec<u32>,
}

/// Sampling settings for decomposition calls: greedy, deterministic.
fn decomposition_request(prompt: String, seed: u64) -> GenerationRequest {
    GenerationRequest { top_p: 1.0, temperature: 0.0, ..GenerationRequest::new(prompt, seed) }
}

pub fn decompose_chunk(
    backend: &dyn Generator,
    chunk: &Chunk,
    topic: &Topic,
    prompt: DecompositionPromptId,
    seed: u64,
) -> Result<Decomposition, BackendError> {
    let text = chunk.text();
    if text.trim().is_empty() {
        return Ok(Decomposition::default());
    }
    let rendered = render_decomposition_prompt(prompt, &topic.label, &text);
    let completion = backend.generate(&decomposition_request(rendered, seed))?;
    let parsed = parse_decomposition(&completion);
    if parsed.degenerate {
        log::warn!(
            "degenerate decomposition for chunk {} of {:?}; truncated to {MAX_CLAIM_LINES} lines",
            chunk.chunk_index,
            chunk.response_ref
        );
    }
    let claims = parsed
        .lines
        .into_iter()
        .enumerate()
        .map(|(i, line)| Claim {
            id: Claim::make_id(&chunk.topic_id, &chunk.response_ref, chunk.chunk_index, i as u32),
            topic_id: chunk.topic_id.clone(),
            response_ref: chunk.response_ref.clone(),
            chunk_index: chunk.chunk_index,
            line_index: i as u32,
            text: line,
        })
        .collect();
    Ok(Decomposition {
        claims,
        degenerate_chunks: if parsed.degenerate { vec![chunk.chunk_index] } else { vec![] },
    })
}

/// Chunks a response and decomposes every chunk, in order.
pub fn decompose_response(
    backend: &dyn Generator,
    resp: &ResponseRecord,
    topic: &Topic,
    prompt: DecompositionPromptId,
    seed: u64,
) -> Result<Decomposition, BackendError> {
    let mut out = Decomposition::default();
    for chunk in chunk_response(resp) {
        let d = decompose_chunk(backend, &chunk, topic, prompt, crate::seed::sub_seed(seed, chunk.chunk_index as u64))?;
        out.claims.extend(d.claims);
        out.degenerate_chunks.extend(d.degenerate_chunks);
    }
    Ok(out)
}
