//! One user turn through the eight workflow steps: receive, encode context,
//! meta-response, speech retrieval, speech synthesis, face retrieval, face
//! animation, assembly. Speech and face failures degrade the turn; encoding
//! and meta-response failures fail it.

use std::fmt;
use std::sync::Arc;
use std::time::{Duration, Instant};

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::backends::{
    AudioArtifact, BackendError, BackendKind, BackendSet, CallLog, CallOutcome, CallRecord, Modality, VideoArtifact,
};
use crate::conversation::{
    history_window, InputDescriptor, MediaFormat, MediaRef, MediaStore, ResponseDescriptor, SessionError, SessionStore,
    TurnRecord,
};
use crate::meta_response::{
    build_prompt, corrective_prompt, parse_meta_response, repair_or_default, MetaField, MetaResponse, PromptOptions,
    PARSE_RETRIES,
};
use crate::retrieval::ReferenceIndex;
use crate::taxonomy::Taxonomy;

pub const STEP_COUNT: u8 = 8;

pub fn step_name(step: u8) -> &'static str {
    match step {
        1 => "receive input",
        2 => "encode context",
        3 => "generate meta-response",
        4 => "retrieve reference speech",
        5 => "synthesize speech",
        6 => "retrieve reference face",
        7 => "animate face",
        8 => "assemble response",
        _ => "unknown",
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct TurnInput {
    pub text: Option<String>,
    pub audio: Option<Vec<u8>>,
    pub video: Option<Vec<u8>>,
}

impl TurnInput {
    pub fn text(text: impl Into<String>) -> Self {
        Self {
            text: Some(text.into()),
            ..Self::default()
        }
    }

    pub fn audio(bytes: Vec<u8>) -> Self {
        Self {
            audio: Some(bytes),
            ..Self::default()
        }
    }

    pub fn video(bytes: Vec<u8>) -> Self {
        Self {
            video: Some(bytes),
            ..Self::default()
        }
    }

    /// Blank text and empty blobs count as absent.
    pub fn normalized(self) -> Self {
        Self {
            text: self.text.filter(|t| !t.trim().is_empty()),
            audio: self.audio.filter(|b| !b.is_empty()),
            video: self.video.filter(|b| !b.is_empty()),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.text.as_deref().is_none_or(|t| t.trim().is_empty())
            && self.audio.as_ref().is_none_or(|b| b.is_empty())
            && self.video.as_ref().is_none_or(|b| b.is_empty())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StepOutcome {
    Ok,
    Failed,
    Skipped,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepTrace {
    pub step: u8,
    pub name: String,
    pub started: DateTime<Utc>,
    pub ended: DateTime<Utc>,
    pub outcome: StepOutcome,
    pub detail: String,
}

/// Step timings plus every backend call made during the turn.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TurnTrace {
    pub steps: Vec<StepTrace>,
    pub calls: Vec<CallRecord>,
}

impl TurnTrace {
    pub fn step(&self, step: u8) -> Option<&StepTrace> {
        self.steps.iter().find(|s| s.step == step)
    }

    pub fn outcome(&self, step: u8) -> Option<StepOutcome> {
        self.step(step).map(|s| s.outcome)
    }

    /// The prompt sent to the LLM, kept in the context-encoding step.
    pub fn rendered_prompt(&self) -> Option<&str> {
        self.step(2).map(|s| s.detail.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MultimodalResponse {
    pub session_id: String,
    pub turn_index: usize,
    pub response_text: String,
    pub audio: Option<AudioArtifact>,
    pub video: Option<VideoArtifact>,
    pub meta: MetaResponse,
    pub trace: TurnTrace,
    pub degraded: bool,
}

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("session {0} not found")]
    SessionNotFound(String),
    #[error("turn input has no text, audio or video")]
    EmptyInput,
    #[error("turn failed at step {step} ({}): {cause}", step_name(*step))]
    TurnFailed {
        step: u8,
        cause: String,
        trace: Box<TurnTrace>,
    },
    #[error(transparent)]
    Storage(SessionError),
}

impl From<SessionError> for PipelineError {
    fn from(e: SessionError) -> Self {
        match e {
            SessionError::SessionNotFound(id) => PipelineError::SessionNotFound(id),
            other => PipelineError::Storage(other),
        }
    }
}

/// Wall-clock budget for each backend-facing step, retries included.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepBudgets {
    pub encode: Duration,
    pub llm: Duration,
    pub speech: Duration,
    pub face: Duration,
}

impl Default for StepBudgets {
    fn default() -> Self {
        Self {
            encode: Duration::from_secs(10),
            llm: Duration::from_secs(60),
            speech: Duration::from_secs(60),
            face: Duration::from_secs(120),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct PipelineConfig {
    pub prompt: PromptOptions,
    pub budgets: StepBudgets,
}

/// Shared, immutable turn dependencies.
#[derive(Clone)]
pub struct Pipeline {
    pub taxonomy: Arc<Taxonomy>,
    pub index: Arc<ReferenceIndex>,
    pub backends: BackendSet,
    pub sessions: SessionStore,
    pub media: MediaStore,
    pub config: PipelineConfig,
}

/// Monotone UTC timestamps: a wall-clock origin advanced by a steady clock.
struct Clock {
    origin: DateTime<Utc>,
    start: Instant,
}

impl Clock {
    fn new() -> Self {
        Self {
            origin: Utc::now(),
            start: Instant::now(),
        }
    }

    fn now(&self) -> DateTime<Utc> {
        self.origin + self.start.elapsed()
    }
}

struct Tracer {
    clock: Clock,
    steps: Vec<StepTrace>,
}

impl Tracer {
    fn start(&self) -> DateTime<Utc> {
        self.clock.now()
    }

    fn finish(&mut self, step: u8, started: DateTime<Utc>, outcome: StepOutcome, detail: impl Into<String>) {
        self.steps.push(StepTrace {
            step,
            name: step_name(step).to_string(),
            started,
            ended: self.clock.now(),
            outcome,
            detail: detail.into(),
        });
    }

    fn skip(&mut self, step: u8, detail: impl Into<String>) {
        let now = self.clock.now();
        self.finish(step, now, StepOutcome::Skipped, detail);
    }

    fn trace(&self, log: &CallLog) -> TurnTrace {
        TurnTrace {
            steps: self.steps.clone(),
            calls: log.records(),
        }
    }
}

async fn within<T>(
    budget: Duration,
    fut: impl std::future::Future<Output = Result<T, BackendError>>,
) -> Result<T, BackendError> {
    tokio::time::timeout(budget, fut)
        .await
        .unwrap_or_else(|_| Err(BackendError::Timeout(budget.as_secs_f64())))
}

fn mask_detail(parts: &[(&str, bool)]) -> String {
    let missed: Vec<_> = parts.iter().filter(|(_, m)| !m).map(|(n, _)| *n).collect();
    if missed.is_empty() {
        "full match".to_string()
    } else {
        format!("no match on {}", missed.join(", "))
    }
}

impl Pipeline {
    fn fail(
        step: u8,
        cause: impl fmt::Display,
        tracer: &mut Tracer,
        started: DateTime<Utc>,
        log: &CallLog,
    ) -> PipelineError {
        let cause = cause.to_string();
        tracer.finish(step, started, StepOutcome::Failed, cause.clone());
        PipelineError::TurnFailed {
            step,
            cause,
            trace: Box::new(tracer.trace(log)),
        }
    }

    /// Runs one turn and appends it to the session. Turns on one session run
    /// one at a time, in arrival order.
    pub async fn run_turn(&self, session_id: &str, input: TurnInput) -> Result<MultimodalResponse, PipelineError> {
        let input = input.normalized();
        if input.is_empty() {
            return Err(PipelineError::EmptyInput);
        }
        let guard = self.sessions.begin_turn(session_id).await?;
        let session = guard.session();
        let log = CallLog::new();
        let mut tracer = Tracer {
            clock: Clock::new(),
            steps: Vec::new(),
        };

        // 1: accept the input and store any media by content hash
        let t = tracer.start();
        let stored = |bytes: &Option<Vec<u8>>| -> Result<Option<MediaRef>, std::io::Error> {
            bytes
                .as_ref()
                .map(|b| {
                    let format = MediaFormat::sniff(b);
                    self.media
                        .put(b, format, None)
                        .map(|s| MediaRef { hash: s.hash, format })
                })
                .transpose()
        };
        let (audio_ref, video_ref) = match (stored(&input.audio), stored(&input.video)) {
            (Ok(a), Ok(v)) => (a, v),
            (Err(e), _) | (_, Err(e)) => {
                return Err(Self::fail(1, format!("storing input media: {e}"), &mut tracer, t, &log))
            }
        };
        let kinds: Vec<&str> = [
            input.text.as_ref().map(|_| "text"),
            audio_ref.as_ref().map(|_| "audio"),
            video_ref.as_ref().map(|_| "video"),
        ]
        .into_iter()
        .flatten()
        .collect();
        tracer.finish(1, t, StepOutcome::Ok, kinds.join(", "));

        // 2: textual surrogates for media, then the prompt over history
        let t = tracer.start();
        let mut query_lines: Vec<String> = input.text.iter().map(|s| s.trim().to_string()).collect();
        for (blob, modality) in [(&input.audio, Modality::Audio), (&input.video, Modality::Video)] {
            let Some(blob) = blob else { continue };
            match within(
                self.config.budgets.encode,
                self.backends.encode_input(blob, modality, &log),
            )
            .await
            {
                Ok(encoded) => query_lines.extend(encoded.prompt_lines()),
                Err(e) => {
                    return Err(Self::fail(
                        2,
                        format!("encoding {} input: {e}", modality.as_str()),
                        &mut tracer,
                        t,
                        &log,
                    ))
                }
            }
        }
        let query = query_lines.join("\n");
        let history = history_window(&session, self.config.prompt.history_window);
        let bundle = match build_prompt(&query, &history, &self.config.prompt, &self.taxonomy) {
            Ok(b) => b,
            Err(e) => return Err(Self::fail(2, e, &mut tracer, t, &log)),
        };
        tracer.finish(2, t, StepOutcome::Ok, bundle.rendered.clone());

        // 3: meta-response with corrective re-asks, then salvage
        let t = tracer.start();
        let deadline = Instant::now() + self.config.budgets.llm;
        let mut prompt = bundle.rendered.clone();
        let mut attempt = 0;
        let (meta, detail) = loop {
            let remaining = deadline.saturating_duration_since(Instant::now());
            let raw = match within(remaining, self.backends.llm_complete(&prompt, &log)).await {
                Ok(raw) => raw,
                Err(e) => return Err(Self::fail(3, e, &mut tracer, t, &log)),
            };
            match parse_meta_response(&raw, &self.taxonomy) {
                Ok(meta) => break (meta, format!("parsed on attempt {}", attempt + 1)),
                Err(e) if attempt < PARSE_RETRIES => {
                    tracing::debug!(attempt, error = %e, "meta-response rejected, re-asking");
                    attempt += 1;
                    prompt = corrective_prompt(&bundle);
                }
                Err(e) => {
                    let meta = repair_or_default(&raw, &e, &self.taxonomy);
                    let defaulted: Vec<_> = meta.provenance.defaulted().map(MetaField::key).collect();
                    break (
                        meta,
                        format!(
                            "repaired after {} attempts ({e}); defaulted: {}",
                            attempt + 1,
                            defaulted.join(", ")
                        ),
                    );
                }
            }
        };
        tracer.finish(3, t, StepOutcome::Ok, detail);

        let label = &meta.emotion.label;
        let profile = &meta.profile;

        // 4 + 5: reference voice and speech
        let t = tracer.start();
        let speech_ref = self
            .index
            .select_reference_speech(label, &profile.gender, &profile.timbre_tone)
            .map(|s| (s.entry.clone(), s.mask));
        let audio = match speech_ref {
            Err(e) => {
                tracer.finish(4, t, StepOutcome::Failed, e.to_string());
                tracer.skip(5, "no reference speech");
                None
            }
            Ok((entry, mask)) => {
                tracer.finish(
                    4,
                    t,
                    StepOutcome::Ok,
                    format!(
                        "{} ({})",
                        entry.id,
                        mask_detail(&[
                            ("emotion", mask.emotion),
                            ("gender", mask.gender),
                            ("timbre", mask.timbre)
                        ])
                    ),
                );
                let t = tracer.start();
                let result = match self.index.read_media(&entry.media_path) {
                    Err(e) => Err(BackendError::InvalidRequest(e.to_string())),
                    Ok(reference_audio) => {
                        within(
                            self.config.budgets.speech,
                            self.backends.synthesize_speech(
                                &meta.response_text,
                                label,
                                &entry,
                                &reference_audio,
                                &self.media,
                                &log,
                            ),
                        )
                        .await
                    }
                };
                match result {
                    Ok(a) => {
                        tracer.finish(5, t, StepOutcome::Ok, format!("{} ({:.2}s)", a.hash, a.duration_s));
                        Some(a)
                    }
                    Err(e) => {
                        tracer.finish(5, t, StepOutcome::Failed, e.to_string());
                        None
                    }
                }
            }
        };

        // 6 + 7: reference portrait and talking face, driven by the audio
        let video = match &audio {
            None => {
                tracer.skip(6, "no audio to animate");
                tracer.skip(7, "no audio to animate");
                None
            }
            Some(audio) => {
                let t = tracer.start();
                match self.index.select_reference_face(&profile.age_group, &profile.gender) {
                    Err(e) => {
                        tracer.finish(6, t, StepOutcome::Failed, e.to_string());
                        tracer.skip(7, "no reference face");
                        None
                    }
                    Ok(sel) => {
                        let entry = sel.entry.clone();
                        let m = sel.mask;
                        tracer.finish(
                            6,
                            t,
                            StepOutcome::Ok,
                            format!(
                                "{} ({}, age distance {})",
                                entry.id,
                                mask_detail(&[("gender", m.gender), ("age group", m.age_group)]),
                                m.age_distance
                            ),
                        );
                        let t = tracer.start();
                        let result = match (self.index.read_media(&entry.media_path), self.media.get(&audio.hash)) {
                            (Err(e), _) => Err(BackendError::InvalidRequest(e.to_string())),
                            (_, Err(e)) => Err(BackendError::Storage(e.to_string())),
                            (_, Ok(None)) => Err(BackendError::Storage(format!("audio {} missing", audio.hash))),
                            (Ok(image), Ok(Some((audio_bytes, _)))) => {
                                within(
                                    self.config.budgets.face,
                                    self.backends.animate_face(
                                        audio,
                                        &audio_bytes,
                                        label,
                                        &entry,
                                        &image,
                                        &self.media,
                                        &log,
                                    ),
                                )
                                .await
                            }
                        };
                        match result {
                            Ok(v) => {
                                tracer.finish(7, t, StepOutcome::Ok, format!("{} ({:.2}s)", v.hash, v.duration_s));
                                Some(v)
                            }
                            Err(e) => {
                                tracer.finish(7, t, StepOutcome::Failed, e.to_string());
                                None
                            }
                        }
                    }
                }
            }
        };

        // 8: assemble and persist
        let t = tracer.start();
        let degraded = audio.is_none() || video.is_none();
        let turn_index = guard.next_index();
        tracer.finish(
            8,
            t,
            StepOutcome::Ok,
            if degraded { "degraded response" } else { "full response" },
        );
        let trace = tracer.trace(&log);
        let record = TurnRecord {
            index: turn_index,
            input: InputDescriptor {
                text: input.text.clone(),
                audio: audio_ref,
                video: video_ref,
                surface: query,
            },
            response: ResponseDescriptor {
                response_text: meta.response_text.clone(),
                audio: audio.clone(),
                video: video.clone(),
                degraded,
            },
            meta: meta.clone(),
            trace: trace.clone(),
        };
        guard.append(record)?;
        Ok(MultimodalResponse {
            session_id: session_id.to_string(),
            turn_index,
            response_text: meta.response_text.clone(),
            audio,
            video,
            meta,
            trace,
            degraded,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConsistencyDiff {
    pub step: u8,
    pub what: String,
    pub expected: String,
    pub actual: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConsistencyReport {
    pub pass: bool,
    pub diffs: Vec<ConsistencyDiff>,
}

impl fmt::Display for ConsistencyReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.pass {
            return write!(f, "consistent");
        }
        for d in &self.diffs {
            writeln!(
                f,
                "step {}: {} expected {:?}, got {:?}",
                d.step, d.what, d.expected, d.actual
            )?;
        }
        Ok(())
    }
}

fn last_ok(trace: &TurnTrace, backend: BackendKind) -> Option<&CallRecord> {
    trace
        .calls
        .iter()
        .rev()
        .find(|c| c.backend == backend && c.outcome == CallOutcome::Ok)
}

/// Checks from the call log that speech and face received the meta-response's
/// emotion label, and that speech received its text byte-for-byte. Steps that
/// did not succeed are not checked.
pub fn consistency_check(trace: &TurnTrace, meta: &MetaResponse) -> ConsistencyReport {
    let mut diffs = Vec::new();
    let label = meta.emotion.label.as_str();
    let mut expect = |step: u8, what: &str, expected: &str, actual: Option<&str>| {
        if actual != Some(expected) {
            diffs.push(ConsistencyDiff {
                step,
                what: what.to_string(),
                expected: expected.to_string(),
                actual: actual.unwrap_or("(no call recorded)").to_string(),
            });
        }
    };
    if trace.outcome(5) == Some(StepOutcome::Ok) {
        let call = last_ok(trace, BackendKind::Speech);
        expect(
            5,
            "emotion label",
            label,
            call.and_then(|c| c.emotion.as_ref()).map(|e| e.as_str()),
        );
        expect(
            5,
            "synthesized text",
            &meta.response_text,
            call.and_then(|c| c.text.as_deref()),
        );
    }
    if trace.outcome(7) == Some(StepOutcome::Ok) {
        let call = last_ok(trace, BackendKind::Face);
        expect(
            7,
            "emotion label",
            label,
            call.and_then(|c| c.emotion.as_ref()).map(|e| e.as_str()),
        );
    }
    ConsistencyReport {
        pass: diffs.is_empty(),
        diffs,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backends::mock::{MockEncoder, MockFace, MockSpeech, RelabelingFace, ScriptedLlm, TRAFFIC_QUERY};
    use crate::taxonomy::EmotionLabel;
    use std::path::Path;

    fn demo() -> &'static Path {
        Path::new(crate::DEMO_ASSETS)
    }

    fn pipeline(dir: &Path, backends: BackendSet) -> Pipeline {
        let tax = Taxonomy::canonical();
        let index = ReferenceIndex::load(&demo().join("references.json"), demo(), tax).unwrap();
        Pipeline {
            taxonomy: Arc::new(tax.clone()),
            index: Arc::new(index),
            backends,
            sessions: SessionStore::open(dir).unwrap(),
            media: MediaStore::open(dir.join("media")).unwrap(),
            config: PipelineConfig::default(),
        }
    }

    fn steps(trace: &TurnTrace) -> Vec<(u8, StepOutcome)> {
        trace.steps.iter().map(|s| (s.step, s.outcome)).collect()
    }

    #[tokio::test]
    async fn traffic_text_turn() {
        let dir = tempfile::tempdir().unwrap();
        let p = pipeline(dir.path(), BackendSet::mock());
        let s = p.sessions.create_session().unwrap();
        let r = p.run_turn(&s.id, TurnInput::text(TRAFFIC_QUERY)).await.unwrap();
        assert_eq!(r.response_text, "I hate traffic too, it makes me crazy!");
        assert!(!r.degraded);
        let audio = r.audio.as_ref().unwrap();
        assert_eq!(audio.emotion.as_str(), "Angry");
        let video = r.video.as_ref().unwrap();
        let face = p.index.faces().iter().find(|f| f.id == video.face_id).unwrap();
        assert_eq!(face.gender.as_str(), "Female");
        assert_eq!(face.age_group.as_str(), "Young adults (25-40)");
        assert_eq!(
            steps(&r.trace).iter().map(|s| s.0).collect::<Vec<_>>(),
            (1..=8).collect::<Vec<_>>()
        );
        assert!(r.trace.steps.iter().all(|s| s.outcome == StepOutcome::Ok));
        for w in r.trace.steps.windows(2) {
            assert!(w[0].started <= w[0].ended && w[0].ended <= w[1].started);
        }
        assert!(consistency_check(&r.trace, &r.meta).pass);
        assert!(p.media.contains(&audio.hash) && p.media.contains(&video.hash));
        assert_eq!(p.sessions.get(&s.id).unwrap().turns.len(), 1);
    }

    #[tokio::test]
    async fn speech_failure_degrades() {
        let dir = tempfile::tempdir().unwrap();
        let backends = BackendSet {
            speech: Arc::new(MockSpeech::failing()),
            ..BackendSet::mock()
        };
        let p = pipeline(dir.path(), backends);
        let s = p.sessions.create_session().unwrap();
        let r = p.run_turn(&s.id, TurnInput::text(TRAFFIC_QUERY)).await.unwrap();
        assert!(r.degraded);
        assert!(r.audio.is_none() && r.video.is_none());
        assert_eq!(r.trace.outcome(5), Some(StepOutcome::Failed));
        assert_eq!(r.trace.outcome(7), Some(StepOutcome::Skipped));
        assert_eq!(r.response_text, "I hate traffic too, it makes me crazy!");
        assert!(consistency_check(&r.trace, &r.meta).pass);
    }

    #[tokio::test]
    async fn face_failure_keeps_audio() {
        let dir = tempfile::tempdir().unwrap();
        let backends = BackendSet {
            face: Arc::new(MockFace::failing()),
            ..BackendSet::mock()
        };
        let p = pipeline(dir.path(), backends);
        let s = p.sessions.create_session().unwrap();
        let r = p.run_turn(&s.id, TurnInput::text(TRAFFIC_QUERY)).await.unwrap();
        assert!(r.degraded && r.audio.is_some() && r.video.is_none());
        assert_eq!(r.trace.outcome(7), Some(StepOutcome::Failed));
    }

    #[tokio::test]
    async fn audio_input_uses_transcript() {
        let dir = tempfile::tempdir().unwrap();
        let encoder = MockEncoder::from_fixture_dir(&demo().join("inputs")).unwrap();
        let backends = BackendSet {
            encoder: Arc::new(encoder),
            ..BackendSet::mock()
        };
        let p = pipeline(dir.path(), backends);
        let s = p.sessions.create_session().unwrap();
        let wav = std::fs::read(demo().join("inputs/traffic_voice.wav")).unwrap();
        let transcript = std::fs::read_to_string(demo().join("inputs/traffic_voice.txt")).unwrap();
        let r = p.run_turn(&s.id, TurnInput::audio(wav)).await.unwrap();
        let prompt = r.trace.rendered_prompt().unwrap();
        assert!(prompt.contains(&format!("User (speech transcript): {}", transcript.trim())));
    }

    #[tokio::test]
    async fn llm_failure_fails_turn() {
        let dir = tempfile::tempdir().unwrap();
        let backends = BackendSet {
            llm: Arc::new(ScriptedLlm::new([Err(BackendError::BadStatus {
                code: 500,
                body: "x".into(),
            })])),
            ..BackendSet::mock()
        };
        let p = pipeline(dir.path(), backends);
        let s = p.sessions.create_session().unwrap();
        match p.run_turn(&s.id, TurnInput::text("hello")).await {
            Err(PipelineError::TurnFailed { step: 3, .. }) => {}
            other => panic!("{other:?}"),
        }
        assert!(p.sessions.get(&s.id).unwrap().turns.is_empty());
    }

    #[tokio::test]
    async fn garbage_is_reasked_then_repaired() {
        let dir = tempfile::tempdir().unwrap();
        let llm = Arc::new(ScriptedLlm::always("I can't do tags, sorry about the traffic."));
        let backends = BackendSet {
            llm: llm.clone(),
            ..BackendSet::mock()
        };
        let p = pipeline(dir.path(), backends);
        let s = p.sessions.create_session().unwrap();
        let r = p.run_turn(&s.id, TurnInput::text("hello")).await.unwrap();
        assert_eq!(llm.prompts().len(), 1 + PARSE_RETRIES as usize);
        assert!(r.meta.repaired());
        assert_eq!(r.response_text, "I can't do tags, sorry about the traffic.");
    }

    #[tokio::test]
    async fn tampered_face_label_is_caught() {
        let dir = tempfile::tempdir().unwrap();
        let backends = BackendSet {
            face: Arc::new(RelabelingFace {
                inner: MockFace::new(),
                label: EmotionLabel::new_unchecked("Joyful"),
            }),
            ..BackendSet::mock()
        };
        let p = pipeline(dir.path(), backends);
        let s = p.sessions.create_session().unwrap();
        let r = p.run_turn(&s.id, TurnInput::text(TRAFFIC_QUERY)).await.unwrap();
        let report = consistency_check(&r.trace, &r.meta);
        assert!(!report.pass);
        assert_eq!(report.diffs.len(), 1);
        assert_eq!(report.diffs[0].step, 7);
    }

    #[tokio::test]
    async fn history_grows_and_feeds_next_prompt() {
        let dir = tempfile::tempdir().unwrap();
        let p = pipeline(dir.path(), BackendSet::mock());
        let s = p.sessions.create_session().unwrap();
        p.run_turn(&s.id, TurnInput::text(TRAFFIC_QUERY)).await.unwrap();
        let r = p
            .run_turn(&s.id, TurnInput::text("And then my boss yelled at me."))
            .await
            .unwrap();
        assert_eq!(r.turn_index, 1);
        let prompt = r.trace.rendered_prompt().unwrap();
        assert!(prompt.contains(&format!("User: {TRAFFIC_QUERY}")));
        assert!(prompt.contains("System: I hate traffic too, it makes me crazy!"));
        assert_eq!(p.sessions.get(&s.id).unwrap().turns.len(), 2);
    }

    #[tokio::test]
    async fn replay_is_byte_identical() {
        let dir = tempfile::tempdir().unwrap();
        let p = pipeline(dir.path(), BackendSet::mock());
        let a = p.sessions.create_session().unwrap();
        let b = p.sessions.create_session().unwrap();
        let ra = p.run_turn(&a.id, TurnInput::text("My cat is sick.")).await.unwrap();
        let rb = p.run_turn(&b.id, TurnInput::text("My cat is sick.")).await.unwrap();
        assert_eq!(ra.audio.unwrap().hash, rb.audio.unwrap().hash);
        assert_eq!(ra.video.unwrap().hash, rb.video.unwrap().hash);
    }

    #[tokio::test]
    async fn empty_and_unknown() {
        let dir = tempfile::tempdir().unwrap();
        let p = pipeline(dir.path(), BackendSet::mock());
        let s = p.sessions.create_session().unwrap();
        assert!(matches!(
            p.run_turn(&s.id, TurnInput::text("   ")).await,
            Err(PipelineError::EmptyInput)
        ));
        assert!(matches!(
            p.run_turn("missing", TurnInput::text("hi")).await,
            Err(PipelineError::SessionNotFound(_))
        ));
    }
}
