//! Model-backend contracts (LLM, multimodal encoder, speech synthesis,
//! talking-face animation), the retrying client facade that records every
//! call, deterministic mocks, and HTTP clients for real inference servers.

pub mod http;
pub mod mock;

use std::fmt;
use std::sync::{Arc, Mutex};
use std::time::{Duration, Instant};

use async_trait::async_trait;
use serde::{Deserialize, Serialize};
use thiserror::Error;
use url::Url;

use crate::conversation::media::{MediaFormat, MediaStore};
use crate::retrieval::{ReferenceFace, ReferenceSpeech};
use crate::taxonomy::{sha256_hex, EmotionLabel};

/// Allowed gap between talking-face video and driving audio durations.
pub const LIP_SYNC_TOLERANCE_S: f64 = 0.25;

/// Upper bound on retries an endpoint may configure.
pub const MAX_RETRIES_LIMIT: u32 = 5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BackendKind {
    Llm,
    Encoder,
    Speech,
    Face,
}

impl BackendKind {
    pub const ALL: [BackendKind; 4] = [
        BackendKind::Llm,
        BackendKind::Encoder,
        BackendKind::Speech,
        BackendKind::Face,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            BackendKind::Llm => "llm",
            BackendKind::Encoder => "encoder",
            BackendKind::Speech => "speech",
            BackendKind::Face => "face",
        }
    }
}

impl fmt::Display for BackendKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum BackendError {
    #[error("timed out after {0:.2}s")]
    Timeout(f64),
    #[error("transport error: {0}")]
    Transport(String),
    #[error("backend answered with status {code}: {body}")]
    BadStatus { code: u16, body: String },
    #[error("unsupported modality {0}")]
    UnsupportedModality(String),
    #[error("generation failed: {0}")]
    GenerationFailed(String),
    #[error("invalid request: {0}")]
    InvalidRequest(String),
    #[error("storing artifact: {0}")]
    Storage(String),
    #[error("invalid endpoint configuration: {0}")]
    Config(String),
}

impl BackendError {
    /// Transport-level failures are retried; everything else is final.
    pub fn is_retryable(&self) -> bool {
        matches!(self, BackendError::Timeout(_) | BackendError::Transport(_))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BackendEndpoint {
    pub kind: BackendKind,
    pub base_url: Url,
    pub timeout_s: f64,
    pub max_retries: u32,
    /// First backoff delay; doubles on each retry.
    pub backoff_ms: u64,
}

impl BackendEndpoint {
    pub fn new(kind: BackendKind, base_url: Url) -> Self {
        Self {
            kind,
            base_url,
            timeout_s: 30.0,
            max_retries: 2,
            backoff_ms: 200,
        }
    }

    pub fn mock(kind: BackendKind) -> Self {
        Self::new(kind, Url::parse("mock://local").expect("static url"))
    }

    pub fn validate(&self) -> Result<(), BackendError> {
        if !(self.timeout_s.is_finite() && self.timeout_s > 0.0) {
            return Err(BackendError::Config(format!(
                "{} timeout_s must be positive",
                self.kind
            )));
        }
        if self.max_retries > MAX_RETRIES_LIMIT {
            return Err(BackendError::Config(format!(
                "{} max_retries {} exceeds {MAX_RETRIES_LIMIT}",
                self.kind, self.max_retries
            )));
        }
        Ok(())
    }

    pub fn is_mock(&self) -> bool {
        self.base_url.scheme() == "mock"
    }

    fn backoff(&self, retry: u32) -> Duration {
        Duration::from_millis(self.backoff_ms.saturating_mul(1u64 << retry.min(16)))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Modality {
    Audio,
    Video,
}

impl Modality {
    pub fn as_str(self) -> &'static str {
        match self {
            Modality::Audio => "audio",
            Modality::Video => "video",
        }
    }

    pub fn parse(raw: &str) -> Result<Self, BackendError> {
        match raw.trim().to_ascii_lowercase().as_str() {
            "audio" => Ok(Modality::Audio),
            "video" => Ok(Modality::Video),
            other => Err(BackendError::UnsupportedModality(other.to_string())),
        }
    }
}

/// Textual stand-in for non-text user input.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EncodedInput {
    pub transcript: String,
    pub affect_description: String,
    pub source_modality: Modality,
}

impl EncodedInput {
    pub fn is_empty(&self) -> bool {
        self.transcript.trim().is_empty() && self.affect_description.trim().is_empty()
    }

    /// Lines injected into the user query.
    pub fn prompt_lines(&self) -> Vec<String> {
        let mut lines = Vec::new();
        let source = match self.source_modality {
            Modality::Audio => "speech transcript",
            Modality::Video => "video transcript",
        };
        if !self.transcript.trim().is_empty() {
            lines.push(format!("User ({source}): {}", self.transcript.trim()));
        }
        if !self.affect_description.trim().is_empty() {
            lines.push(format!("Observed affect: {}", self.affect_description.trim()));
        }
        lines
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AudioArtifact {
    pub hash: String,
    /// Relative to the media store root.
    pub media_path: String,
    pub format: MediaFormat,
    pub duration_s: f64,
    pub emotion: EmotionLabel,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VideoArtifact {
    pub hash: String,
    pub media_path: String,
    pub format: MediaFormat,
    pub duration_s: f64,
    pub emotion: EmotionLabel,
    pub face_id: String,
}

/// Conditioning a generator actually received, as reported by the client
/// that talked to it.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Conditioning {
    pub emotion: EmotionLabel,
    pub text: Option<String>,
    pub reference_id: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GeneratedMedia {
    pub bytes: Vec<u8>,
    pub format: MediaFormat,
    pub duration_s: f64,
    pub conditioning: Conditioning,
    /// Extra facts recorded next to the stored artifact.
    pub metadata: serde_json::Value,
}

pub struct SpeechRequest<'a> {
    pub text: &'a str,
    pub emotion: &'a EmotionLabel,
    pub reference: &'a ReferenceSpeech,
    pub reference_audio: &'a [u8],
}

pub struct FaceRequest<'a> {
    pub audio: &'a [u8],
    pub audio_format: MediaFormat,
    pub audio_duration_s: f64,
    pub emotion: &'a EmotionLabel,
    pub reference: &'a ReferenceFace,
    pub reference_image: &'a [u8],
}

/// Single-attempt LLM completion.
#[async_trait]
pub trait LlmBackend: Send + Sync {
    async fn complete(&self, prompt: &str) -> Result<String, BackendError>;
}

#[async_trait]
pub trait EncoderBackend: Send + Sync {
    async fn encode(&self, media: &[u8], modality: Modality) -> Result<EncodedInput, BackendError>;
}

/// Text + emotion label + reference voice → speech.
#[async_trait]
pub trait SpeechBackend: Send + Sync {
    async fn synthesize(&self, request: &SpeechRequest<'_>) -> Result<GeneratedMedia, BackendError>;
}

/// Speech + emotion label + reference portrait → talking-face video.
#[async_trait]
pub trait FaceBackend: Send + Sync {
    async fn animate(&self, request: &FaceRequest<'_>) -> Result<GeneratedMedia, BackendError>;
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "status", rename_all = "snake_case")]
pub enum CallOutcome {
    Ok,
    Error { message: String },
}

/// One backend invocation (all attempts included).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CallRecord {
    pub backend: BackendKind,
    pub request_digest: String,
    pub emotion: Option<EmotionLabel>,
    /// Text sent for synthesis; only set on speech calls.
    pub text: Option<String>,
    pub reference_id: Option<String>,
    pub attempts: u32,
    pub latency_ms: f64,
    pub outcome: CallOutcome,
}

/// Append-only record of the backend calls made during one turn.
#[derive(Debug, Clone, Default)]
pub struct CallLog {
    records: Arc<Mutex<Vec<CallRecord>>>,
}

impl CallLog {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&self, record: CallRecord) {
        self.records.lock().expect("call log poisoned").push(record);
    }

    pub fn records(&self) -> Vec<CallRecord> {
        self.records.lock().expect("call log poisoned").clone()
    }

    pub fn len(&self) -> usize {
        self.records.lock().expect("call log poisoned").len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

fn digest_of(parts: &[&[u8]]) -> String {
    let mut joined = Vec::new();
    for p in parts {
        joined.extend_from_slice(&(p.len() as u64).to_le_bytes());
        joined.extend_from_slice(p);
    }
    sha256_hex(&joined)
}

/// The four backends plus their endpoint policies. Every call goes through
/// retry/timeout handling and lands in the caller's [`CallLog`].
#[derive(Clone)]
pub struct BackendSet {
    pub llm: Arc<dyn LlmBackend>,
    pub encoder: Arc<dyn EncoderBackend>,
    pub speech: Arc<dyn SpeechBackend>,
    pub face: Arc<dyn FaceBackend>,
    pub llm_endpoint: BackendEndpoint,
    pub encoder_endpoint: BackendEndpoint,
    pub speech_endpoint: BackendEndpoint,
    pub face_endpoint: BackendEndpoint,
}

impl BackendSet {
    /// All four backends mocked with fast endpoint policies.
    pub fn mock() -> Self {
        let quick = |kind| BackendEndpoint {
            timeout_s: 5.0,
            backoff_ms: 1,
            ..BackendEndpoint::mock(kind)
        };
        Self {
            llm: Arc::new(mock::MockLlm::new()),
            encoder: Arc::new(mock::MockEncoder::new()),
            speech: Arc::new(mock::MockSpeech::new()),
            face: Arc::new(mock::MockFace::new()),
            llm_endpoint: quick(BackendKind::Llm),
            encoder_endpoint: quick(BackendKind::Encoder),
            speech_endpoint: quick(BackendKind::Speech),
            face_endpoint: quick(BackendKind::Face),
        }
    }

    pub fn endpoint(&self, kind: BackendKind) -> &BackendEndpoint {
        match kind {
            BackendKind::Llm => &self.llm_endpoint,
            BackendKind::Encoder => &self.encoder_endpoint,
            BackendKind::Speech => &self.speech_endpoint,
            BackendKind::Face => &self.face_endpoint,
        }
    }

    pub fn validate(&self) -> Result<(), BackendError> {
        BackendKind::ALL.iter().try_for_each(|k| self.endpoint(*k).validate())
    }

    /// Runs `op` up to `max_retries + 1` times with a per-attempt timeout and
    /// exponential backoff between retryable failures.
    async fn with_retries<T, F, Fut>(endpoint: &BackendEndpoint, mut op: F) -> (Result<T, BackendError>, u32)
    where
        F: FnMut() -> Fut,
        Fut: std::future::Future<Output = Result<T, BackendError>>,
    {
        let timeout = Duration::from_secs_f64(endpoint.timeout_s);
        let mut attempts = 0;
        loop {
            attempts += 1;
            let result = match tokio::time::timeout(timeout, op()).await {
                Ok(r) => r,
                Err(_) => Err(BackendError::Timeout(endpoint.timeout_s)),
            };
            match result {
                Err(e) if e.is_retryable() && attempts <= endpoint.max_retries => {
                    tracing::warn!(backend = %endpoint.kind, attempt = attempts, error = %e, "retrying");
                    tokio::time::sleep(endpoint.backoff(attempts - 1)).await;
                }
                other => return (other, attempts),
            }
        }
    }

    fn record<T>(
        log: &CallLog,
        backend: BackendKind,
        request_digest: String,
        started: Instant,
        attempts: u32,
        result: &Result<T, BackendError>,
        conditioning: Option<Conditioning>,
    ) {
        let (emotion, text, reference_id) = match conditioning {
            Some(c) => (Some(c.emotion), c.text, Some(c.reference_id)),
            None => (None, None, None),
        };
        log.push(CallRecord {
            backend,
            request_digest,
            emotion,
            text,
            reference_id,
            attempts,
            latency_ms: started.elapsed().as_secs_f64() * 1e3,
            outcome: match result {
                Ok(_) => CallOutcome::Ok,
                Err(e) => CallOutcome::Error { message: e.to_string() },
            },
        });
    }

    pub async fn llm_complete(&self, prompt: &str, log: &CallLog) -> Result<String, BackendError> {
        if prompt.trim().is_empty() {
            return Err(BackendError::InvalidRequest("prompt is empty".into()));
        }
        let started = Instant::now();
        let (result, attempts) = Self::with_retries(&self.llm_endpoint, || self.llm.complete(prompt)).await;
        Self::record(
            log,
            BackendKind::Llm,
            digest_of(&[prompt.as_bytes()]),
            started,
            attempts,
            &result,
            None,
        );
        result
    }

    pub async fn encode_input(
        &self,
        media: &[u8],
        modality: Modality,
        log: &CallLog,
    ) -> Result<EncodedInput, BackendError> {
        if media.is_empty() {
            return Err(BackendError::InvalidRequest("media blob is empty".into()));
        }
        let started = Instant::now();
        let (result, attempts) =
            Self::with_retries(&self.encoder_endpoint, || self.encoder.encode(media, modality)).await;
        let result = result.and_then(|encoded| {
            if encoded.is_empty() {
                Err(BackendError::GenerationFailed(
                    "encoder returned neither transcript nor affect".into(),
                ))
            } else {
                Ok(encoded)
            }
        });
        Self::record(
            log,
            BackendKind::Encoder,
            digest_of(&[media, modality.as_str().as_bytes()]),
            started,
            attempts,
            &result,
            None,
        );
        result
    }

    /// Synthesizes speech and stores it in `store`. The artifact's emotion is
    /// the label the generator reports having received.
    pub async fn synthesize_speech(
        &self,
        text: &str,
        emotion: &EmotionLabel,
        reference: &ReferenceSpeech,
        reference_audio: &[u8],
        store: &MediaStore,
        log: &CallLog,
    ) -> Result<AudioArtifact, BackendError> {
        if text.trim().is_empty() {
            return Err(BackendError::InvalidRequest("text is empty".into()));
        }
        let request = SpeechRequest {
            text,
            emotion,
            reference,
            reference_audio,
        };
        let started = Instant::now();
        let (result, attempts) = Self::with_retries(&self.speech_endpoint, || self.speech.synthesize(&request)).await;
        let result = result.and_then(|media| {
            if media.bytes.is_empty() || !media.duration_s.is_finite() || media.duration_s <= 0.0 {
                return Err(BackendError::GenerationFailed(
                    "speech backend returned an empty artifact".into(),
                ));
            }
            Ok(media)
        });
        let conditioning = match &result {
            Ok(media) => media.conditioning.clone(),
            Err(_) => Conditioning {
                emotion: emotion.clone(),
                text: Some(text.to_string()),
                reference_id: reference.id.clone(),
            },
        };
        let digest = digest_of(&[text.as_bytes(), emotion.as_str().as_bytes(), reference.id.as_bytes()]);
        let stored = result.and_then(|media| {
            let meta = serde_json::json!({
                "conditioning": media.conditioning,
                "backend": media.metadata,
            });
            let s = store
                .put(&media.bytes, media.format, Some(&meta))
                .map_err(|e| BackendError::Storage(e.to_string()))?;
            Ok(AudioArtifact {
                media_path: store.relative_path(&s.hash),
                hash: s.hash,
                format: media.format,
                duration_s: media.duration_s,
                emotion: media.conditioning.emotion,
            })
        });
        Self::record(
            log,
            BackendKind::Speech,
            digest,
            started,
            attempts,
            &stored,
            Some(conditioning),
        );
        stored
    }

    /// Animates `reference` with the synthesized audio. Rejects videos whose
    /// length strays more than [`LIP_SYNC_TOLERANCE_S`] from the audio.
    #[allow(clippy::too_many_arguments)]
    pub async fn animate_face(
        &self,
        audio: &AudioArtifact,
        audio_bytes: &[u8],
        emotion: &EmotionLabel,
        reference: &ReferenceFace,
        reference_image: &[u8],
        store: &MediaStore,
        log: &CallLog,
    ) -> Result<VideoArtifact, BackendError> {
        let request = FaceRequest {
            audio: audio_bytes,
            audio_format: audio.format,
            audio_duration_s: audio.duration_s,
            emotion,
            reference,
            reference_image,
        };
        let started = Instant::now();
        let (result, attempts) = Self::with_retries(&self.face_endpoint, || self.face.animate(&request)).await;
        let result = result.and_then(|media| {
            if media.bytes.is_empty() {
                return Err(BackendError::GenerationFailed(
                    "face backend returned an empty artifact".into(),
                ));
            }
            if (media.duration_s - audio.duration_s).abs() > LIP_SYNC_TOLERANCE_S {
                return Err(BackendError::GenerationFailed(format!(
                    "video lasts {:.3}s but audio lasts {:.3}s",
                    media.duration_s, audio.duration_s
                )));
            }
            Ok(media)
        });
        let conditioning = match &result {
            Ok(media) => media.conditioning.clone(),
            Err(_) => Conditioning {
                emotion: emotion.clone(),
                text: None,
                reference_id: reference.id.clone(),
            },
        };
        let digest = digest_of(&[
            audio.hash.as_bytes(),
            emotion.as_str().as_bytes(),
            reference.id.as_bytes(),
        ]);
        let stored = result.and_then(|media| {
            let meta = serde_json::json!({
                "conditioning": media.conditioning,
                "backend": media.metadata,
            });
            let s = store
                .put(&media.bytes, media.format, Some(&meta))
                .map_err(|e| BackendError::Storage(e.to_string()))?;
            Ok(VideoArtifact {
                media_path: store.relative_path(&s.hash),
                hash: s.hash,
                format: media.format,
                duration_s: media.duration_s,
                emotion: media.conditioning.emotion,
                face_id: media.conditioning.reference_id,
            })
        });
        Self::record(
            log,
            BackendKind::Face,
            digest,
            started,
            attempts,
            &stored,
            Some(conditioning),
        );
        stored
    }
}
