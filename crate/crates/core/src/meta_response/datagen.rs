//! Instruction-sample generation: ask an LLM for a user utterance plus its
//! meta-response under round-robin (emotion label, emotion type, scene)
//! targets, and keep only samples that parse and honour the target label.

use rand::seq::SliceRandom;
use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::parse::parse_meta_response;
use super::prompt::{build_prompt, PromptOptions};
use super::{render_meta_response, MetaResponse};
use crate::backends::{BackendError, BackendSet, CallLog};
use crate::taxonomy::Taxonomy;

/// Extra attempts per sample before it is skipped.
pub const DATAGEN_MAX_REGENERATIONS: u32 = 2;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatagenRequest {
    pub count: usize,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SampleTargets {
    pub emotion_label: String,
    pub emotion_type: String,
    pub scene: String,
}

/// One JSON Lines record.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct InstructionSample {
    pub prompt: String,
    pub meta_response: String,
    pub targets: SampleTargets,
    pub seed: u64,
    pub index: usize,
}

impl InstructionSample {
    pub fn to_json_line(&self) -> String {
        serde_json::to_string(self).expect("sample serializes")
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SkipRecord {
    pub index: usize,
    pub targets: SampleTargets,
    pub attempts: u32,
    pub reason: String,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum DatagenEvent {
    Sample(InstructionSample),
    Skipped(SkipRecord),
}

#[derive(Debug, Error)]
pub enum DatagenError {
    #[error("count must be at least 1")]
    InvalidCount,
    #[error("LLM backend unavailable: {0}")]
    BackendUnavailable(BackendError),
}

fn generation_prompt(targets: &SampleTargets, sample_seed: u64, attempt: u32) -> String {
    let style = if targets.emotion_type == "Implicit" {
        "The user must not name the feeling; it should only be inferable from the event."
    } else {
        "The user names the feeling directly."
    };
    let mut prompt = format!(
        "Write one message a user might send to an empathetic listener, then the meta-response \
         an expert empathetic listener would produce for it.\n\
         {style}\n\
         Target Emotion Label: {}\n\
         Target Emotion Type: {}\n\
         Target Scene: {}\n\
         Target Sample Seed: {sample_seed}\n\
         Start with a line \"<User Query> ...\" holding the message, followed by the tagged lines \
         <Emotion Label>, <Emotion Cause>, <Event Scenario>, <Rationale>, <Goal to Response>, \
         <Agent Timbre and Tone>, <Agent Gender>, <Agent Age> and <Empathetic Response>. \
         The <Emotion Label> must be the target emotion label.",
        targets.emotion_label, targets.emotion_type, targets.scene
    );
    if attempt > 0 {
        prompt.push_str(&format!(
            "\nAttempt {}: the previous answer was rejected. Follow the format exactly.",
            attempt + 1
        ));
    }
    prompt
}

/// Splits `<User Query> text` off the front of a generated answer.
fn split_query(raw: &str) -> Option<(String, &str)> {
    let start = raw.find("<User Query>")? + "<User Query>".len();
    let rest = &raw[start..];
    let end = rest.find("\n<").unwrap_or(rest.len());
    let query = rest[..end].trim().trim_start_matches(':').trim().to_string();
    (!query.is_empty()).then_some((query, &rest[end..]))
}

/// Lazily produces samples in index order. Dropping it cancels generation.
pub struct SampleGenerator<'a> {
    request: DatagenRequest,
    backends: &'a BackendSet,
    taxonomy: &'a Taxonomy,
    labels: Vec<String>,
    types: Vec<String>,
    scenes: Vec<String>,
    sample_seeds: Vec<u64>,
    next: usize,
}

impl<'a> SampleGenerator<'a> {
    pub fn new(
        request: DatagenRequest,
        backends: &'a BackendSet,
        taxonomy: &'a Taxonomy,
    ) -> Result<Self, DatagenError> {
        if request.count == 0 {
            return Err(DatagenError::InvalidCount);
        }
        let mut rng = ChaCha8Rng::seed_from_u64(request.seed);
        let mut scenes: Vec<String> = taxonomy.scene_catalog().map(|s| s.name.clone()).collect();
        scenes.shuffle(&mut rng);
        let sample_seeds = (0..request.count).map(|_| rng.next_u64()).collect();
        Ok(Self {
            request,
            backends,
            taxonomy,
            labels: taxonomy.emotion_labels().map(|l| l.to_string()).collect(),
            types: taxonomy.emotion_types().map(|t| t.to_string()).collect(),
            scenes,
            sample_seeds,
            next: 0,
        })
    }

    /// Targets for sample `i`: labels cycle fastest, the emotion type flips
    /// after each full pass over the labels, scenes cycle in seeded order.
    pub fn targets(&self, i: usize) -> SampleTargets {
        SampleTargets {
            emotion_label: self.labels[i % self.labels.len()].clone(),
            emotion_type: self.types[(i / self.labels.len()) % self.types.len()].clone(),
            scene: self.scenes[i % self.scenes.len()].clone(),
        }
    }

    fn check(&self, raw: &str, targets: &SampleTargets) -> Result<(String, MetaResponse), String> {
        let (query, _) = split_query(raw).ok_or("no <User Query> line")?;
        let meta = parse_meta_response(raw, self.taxonomy).map_err(|e| e.to_string())?;
        if meta.emotion.label.as_str() != targets.emotion_label {
            return Err(format!(
                "emotion label {} does not match target {}",
                meta.emotion.label, targets.emotion_label
            ));
        }
        Ok((query, meta))
    }

    pub async fn next_event(&mut self) -> Option<Result<DatagenEvent, DatagenError>> {
        if self.next >= self.request.count {
            return None;
        }
        let index = self.next;
        self.next += 1;
        let targets = self.targets(index);
        let log = CallLog::new();
        let mut reason = String::new();
        for attempt in 0..=DATAGEN_MAX_REGENERATIONS {
            let prompt = generation_prompt(&targets, self.sample_seeds[index], attempt);
            let raw = match self.backends.llm_complete(&prompt, &log).await {
                Ok(raw) => raw,
                Err(e) => return Some(Err(DatagenError::BackendUnavailable(e))),
            };
            match self.check(&raw, &targets) {
                Ok((query, meta)) => {
                    let bundle = build_prompt(&query, &[], &PromptOptions::default(), self.taxonomy)
                        .expect("query is non-empty");
                    return Some(Ok(DatagenEvent::Sample(InstructionSample {
                        prompt: bundle.rendered,
                        meta_response: render_meta_response(&meta),
                        targets,
                        seed: self.request.seed,
                        index,
                    })));
                }
                Err(why) => {
                    tracing::debug!(index, attempt, reason = %why, "sample rejected");
                    reason = why;
                }
            }
        }
        tracing::warn!(index, reason = %reason, "sample skipped");
        Some(Ok(DatagenEvent::Skipped(SkipRecord {
            index,
            targets,
            attempts: DATAGEN_MAX_REGENERATIONS + 1,
            reason,
        })))
    }
}

/// Runs a generator to completion.
pub async fn generate_instruction_samples(
    request: DatagenRequest,
    backends: &BackendSet,
    taxonomy: &Taxonomy,
) -> Result<Vec<DatagenEvent>, DatagenError> {
    let mut generator = SampleGenerator::new(request, backends, taxonomy)?;
    let mut events = Vec::with_capacity(request.count);
    while let Some(event) = generator.next_event().await {
        events.push(event?);
    }
    Ok(events)
}
