use std::collections::{BTreeMap, HashSet};

use serde::{Deserialize, Serialize};

use super::{Pipeline, PipelineError, SharedAppender, Stage, StageSummary, PAGES, PAGES_REJECTED, PARAGRAPHS, RAG_CONTEXTS, RESPONSES};
use crate::backend::{embed_all, EmbeddingVector, GenerationRequest};
use crate::domain::{cell_key, render_prompt, GenerationSetting, ResponseRecord, Topic};
use crate::io;
use crate::manifest::SimilarityFloor;
use crate::retrieval::{
    assemble_context, ingest_pages, mean_similarity, page_response, rag_prompt, split_paragraphs, Paragraph, PageRecord,
    RagContext, RejectedPage,
};
use crate::seed;

/// One line of `rag_contexts.jsonl`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RagContextRecord {
    pub generator_id: String,
    pub topic_id: String,
    pub seed: u64,
    #[serde(flatten)]
    pub context: RagContext,
}

struct Job<'a> {
    generator_id: &'a str,
    topic: &'a Topic,
    template_id: &'a str,
    prompt: String,
    setting: GenerationSetting,
    seed: u64,
}

impl Job<'_> {
    fn key(&self) -> String {
        cell_key(self.generator_id, &self.topic.id, Some(self.template_id), self.setting, self.seed)
    }

    fn label(&self) -> String {
        format!("{}/{}/{}/{}/{}", self.generator_id, self.topic.id, self.template_id, self.setting, self.seed)
    }
}

/// Paragraphs of one topic with their embeddings and the floor in force.
struct TopicCorpus {
    paragraphs: Vec<Paragraph>,
    embeddings: Vec<EmbeddingVector>,
    floor: f64,
}

impl Pipeline {
    pub(super) fn generate(&self, summary: &mut StageSummary) -> Result<(), PipelineError> {
        let m = &self.manifest;
        let created_at = self.now();
        let existing: HashSet<String> =
            io::read_jsonl::<ResponseRecord>(&self.path(RESPONSES))?.iter().map(ResponseRecord::key).collect();
        let responses = SharedAppender::open(&self.path(RESPONSES))?;

        let mut paragraphs: BTreeMap<&str, Vec<Paragraph>> = BTreeMap::new();
        if let Some(dir) = &m.retrieval.search_dir {
            let mut kept: Vec<PageRecord> = Vec::new();
            let mut rejected: Vec<RejectedPage> = Vec::new();
            for topic in &m.topics {
                match ingest_pages(dir, &topic.id, m.retrieval.min_page_chars) {
                    Ok(ingest) => {
                        let paras: Vec<Paragraph> = ingest
                            .kept
                            .iter()
                            .flat_map(|p| split_paragraphs(p, m.retrieval.min_paragraph_chars))
                            .collect();
                        paragraphs.insert(&topic.id, paras);
                        kept.extend(ingest.kept);
                        rejected.extend(ingest.rejected);
                    }
                    Err(e) => self.fail(Stage::Generate, &topic.id, "SearchIngest", e),
                }
            }
            let mut new_pages = 0;
            for page in &kept {
                let resp = page_response(page, created_at);
                if !existing.contains(&resp.key()) {
                    responses.append(&resp)?;
                    new_pages += 1;
                }
            }
            summary.row("search pages kept", kept.len());
            summary.row("search pages rejected", rejected.len());
            summary.row("search responses written", new_pages);
            io::write_jsonl(&self.path(PAGES), &kept)?;
            io::write_jsonl(&self.path(PAGES_REJECTED), &rejected)?;
            let all: Vec<&Paragraph> = paragraphs.values().flatten().collect();
            io::write_jsonl(&self.path(PARAGRAPHS), &all)?;
        }

        let mut jobs = Vec::new();
        for g in &m.generators {
            for topic in &m.topics {
                for template in &m.templates {
                    let prompt = match render_prompt(template, topic) {
                        Ok(p) => p,
                        Err(e) => {
                            self.fail(Stage::Generate, format!("{}/{}/{}", g.id, topic.id, template.id), "Prompt", e);
                            continue;
                        }
                    };
                    for &setting in &g.settings {
                        let cell = format!("{}/{}/{}/{}", g.id, topic.id, template.id, setting);
                        let base = self.cell_seed(Stage::Generate, &cell);
                        for sample in 0..m.samples_per_prompt {
                            jobs.push(Job {
                                generator_id: &g.id,
                                topic,
                                template_id: &template.id,
                                prompt: prompt.clone(),
                                setting,
                                seed: seed::sub_seed(base, sample as u64),
                            });
                        }
                    }
                }
            }
        }
        let total = jobs.len();
        jobs.retain(|j| !existing.contains(&j.key()));
        summary.row("generation cells", total);
        summary.row("already present", total - jobs.len());

        let corpora = self.topic_corpora(&jobs, &paragraphs)?;
        let contexts = SharedAppender::open(&self.path(RAG_CONTEXTS))?;
        let written = self.options.exec.map_slice(&jobs, |job| self.generate_one(job, &corpora, &responses, &contexts));
        let mut ok = 0;
        for r in written {
            ok += r? as usize;
        }
        summary.row("responses written", ok);

        io::normalize_jsonl(&self.path(RESPONSES), ResponseRecord::key)?;
        io::normalize_jsonl(&self.path(RAG_CONTEXTS), |r: &RagContextRecord| {
            (r.generator_id.clone(), r.topic_id.clone(), r.context.prompt_id.clone(), r.seed)
        })?;
        Ok(())
    }

    /// Embeds the paragraphs of every topic that still has RAG work.
    fn topic_corpora(
        &self,
        jobs: &[Job<'_>],
        paragraphs: &BTreeMap<&str, Vec<Paragraph>>,
    ) -> Result<BTreeMap<String, TopicCorpus>, PipelineError> {
        let m = &self.manifest;
        let floor_setting = self.options.similarity_floor.unwrap_or(m.retrieval.similarity_floor);
        let mut out = BTreeMap::new();
        let rag_topics: std::collections::BTreeSet<&str> =
            jobs.iter().filter(|j| j.setting == GenerationSetting::Rag).map(|j| j.topic.id.as_str()).collect();
        for topic_id in rag_topics {
            let paras = paragraphs.get(topic_id).cloned().unwrap_or_default();
            if paras.is_empty() {
                continue;
            }
            let texts: Vec<String> = paras.iter().map(|p| p.text.clone()).collect();
            let embeddings = match embed_all(self.backends.embedder.as_ref(), &texts) {
                Ok(e) => e,
                Err(e) => {
                    self.fail(Stage::Generate, topic_id, e.code(), e);
                    continue;
                }
            };
            let floor = match floor_setting {
                SimilarityFloor::Fixed(x) => x,
                SimilarityFloor::Auto(_) => {
                    let topic = m.topic(topic_id).expect("jobs come from manifest topics");
                    let prompts: Vec<String> =
                        m.templates.iter().filter_map(|t| render_prompt(t, topic).ok()).collect();
                    let queries = match embed_all(self.backends.embedder.as_ref(), &prompts) {
                        Ok(q) => q,
                        Err(e) => {
                            self.fail(Stage::Generate, topic_id, e.code(), e);
                            continue;
                        }
                    };
                    let floor = mean_similarity(&queries, &embeddings).unwrap_or(0.0);
                    log::info!("topic {topic_id}: automatic similarity floor {floor:.4}");
                    floor
                }
            };
            out.insert(topic_id.to_string(), TopicCorpus { paragraphs: paras, embeddings, floor });
        }
        Ok(out)
    }

    /// Ok(true) when a response was written; backend failures are recorded.
    fn generate_one(
        &self,
        job: &Job<'_>,
        corpora: &BTreeMap<String, TopicCorpus>,
        responses: &SharedAppender,
        contexts: &SharedAppender,
    ) -> Result<bool, PipelineError> {
        let generator = &self.backends.generators[job.generator_id];
        let mut prompt = job.prompt.clone();
        let mut context_ids = Vec::new();
        if job.setting == GenerationSetting::Rag {
            let Some(corpus) = corpora.get(&job.topic.id) else {
                self.fail(Stage::Generate, job.label(), "NoParagraphs", "topic has no usable search paragraphs");
                return Ok(false);
            };
            let query = match self.backends.embedder.embed_batch(std::slice::from_ref(&job.prompt)) {
                Ok(mut q) if q.len() == 1 => q.remove(0),
                Ok(q) => {
                    self.fail(Stage::Generate, job.label(), "Malformed", format!("{} embeddings for 1 text", q.len()));
                    return Ok(false);
                }
                Err(e) => {
                    self.fail(Stage::Generate, job.label(), e.code(), e);
                    return Ok(false);
                }
            };
            let context = match assemble_context(
                job.template_id,
                &query,
                &corpus.paragraphs,
                &corpus.embeddings,
                corpus.floor,
                self.manifest.retrieval.token_budget,
                job.seed,
            ) {
                Ok(c) => c,
                Err(e) => {
                    self.fail(Stage::Generate, job.label(), "Context", e);
                    return Ok(false);
                }
            };
            prompt = rag_prompt(&job.prompt, &context);
            context_ids = context.paragraph_ids.clone();
            contexts.append(&RagContextRecord {
                generator_id: job.generator_id.to_string(),
                topic_id: job.topic.id.clone(),
                seed: job.seed,
                context,
            })?;
        }
        match generator.generate(&GenerationRequest::new(prompt, job.seed)) {
            Ok(text) => {
                responses.append(&ResponseRecord {
                    generator_id: job.generator_id.to_string(),
                    topic_id: job.topic.id.clone(),
                    prompt_id: Some(job.template_id.to_string()),
                    setting: job.setting,
                    text,
                    context_ids,
                    seed: job.seed,
                    created_at: self.now(),
                })?;
                Ok(true)
            }
            Err(e) => {
                self.fail(Stage::Generate, job.label(), e.code(), e);
                Ok(false)
            }
        }
    }
}
