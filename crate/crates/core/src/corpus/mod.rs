//! Response chunking and claim decomposition.

mod decompose;
mod sentences;

pub use decompose::{
    decompose_chunk, decompose_response, parse_decomposition, render_decomposition_prompt, Decomposition,
    DecompositionPromptId, ParsedLines, MAX_CLAIM_LINES,
};
pub use sentences::{abbreviations, split_sentences};

use serde::{Deserialize, Serialize};

use crate::domain::{ResponseRecord, ResponseRef};

pub const SENTENCES_PER_CHUNK: usize = 3;

/// Up to three consecutive sentences of one response.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Chunk {
    pub topic_id: String,
    pub response_ref: ResponseRef,
    pub chunk_index: u32,
    pub sentences: Vec<String>,
}

impl Chunk {
    pub fn text(&self) -> String {
        self.sentences.join(" ")
    }

    pub fn sentence_count(&self) -> usize {
        self.sentences.len()
    }
}

/// Groups the response's sentences three at a time, in order, without
/// overlap. The final chunk may hold one or two sentences.
pub fn chunk_response(resp: &ResponseRecord) -> Vec<Chunk> {
    let r = resp.response_ref();
    split_sentences(&resp.text)
        .chunks(SENTENCES_PER_CHUNK)
        .enumerate()
        .map(|(i, s)| Chunk {
            topic_id: resp.topic_id.clone(),
            response_ref: r.clone(),
            chunk_index: i as u32,
            sentences: s.to_vec(),
        })
        .collect()
}
