//! Deterministic in-process backends. Outputs depend only on inputs and
//! bundled fixtures, so identical requests give byte-identical artifacts.

use std::collections::{HashMap, VecDeque};
use std::io::Cursor;
use std::path::Path;
use std::sync::{Arc, Mutex};
use std::time::Duration;

use async_trait::async_trait;
use image::codecs::gif::{GifEncoder, Repeat};
use image::{Delay, Frame, Rgba, RgbaImage};
use serde_json::json;

use super::{
    BackendError, Conditioning, EncodedInput, EncoderBackend, FaceBackend, FaceRequest, GeneratedMedia, LlmBackend,
    Modality, SpeechBackend, SpeechRequest,
};
use crate::conversation::media::MediaFormat;
use crate::meta_response::{
    render_meta_response, AgentProfile, EmotionBlock, MetaResponse, Provenance, SceneContextBlock,
};
use crate::taxonomy::{sha256_hex, Taxonomy};

/// Golden completion for the traffic example query.
pub const TRAFFIC_QUERY: &str = "Today traffic was horrible and was so frustrating!";
pub const TRAFFIC_COMPLETION: &str = include_str!("../../assets/golden/traffic_meta_response.txt");

/// Mock speech: seconds of audio per word.
pub const SECONDS_PER_WORD: f64 = 0.06;
pub const MOCK_SAMPLE_RATE: u32 = 16_000;

/// Mock affect description returned by [`MockEncoder`].
pub const MOCK_AFFECT: &str = "(mock affect)";

fn hash_u64(parts: &[&str]) -> u64 {
    let digest = sha256_hex(parts.join("\u{1f}").as_bytes());
    u64::from_str_radix(&digest[..16], 16).expect("hex digest")
}

/// Shared knobs for fault injection.
#[derive(Debug, Clone, Default)]
pub struct MockBehavior {
    pub delay: Duration,
    pub fail: bool,
}

impl MockBehavior {
    async fn apply(&self, what: &str) -> Result<(), BackendError> {
        if !self.delay.is_zero() {
            tokio::time::sleep(self.delay).await;
        }
        if self.fail {
            return Err(BackendError::GenerationFailed(format!("{what} mock forced to fail")));
        }
        Ok(())
    }
}

/// Extracts the user query section of a meta-response prompt.
pub fn prompt_user_query(prompt: &str) -> Option<&str> {
    let start = prompt.find("<User Query>\n")? + "<User Query>\n".len();
    let rest = &prompt[start..];
    let end = rest.find("\n\n<Conversation History>").unwrap_or(rest.len());
    Some(rest[..end].trim())
}

/// Datagen target line value, e.g. `Target Emotion Label: Angry`.
fn target_value<'a>(prompt: &'a str, name: &str) -> Option<&'a str> {
    let prefix = format!("Target {name}: ");
    prompt
        .lines()
        .find_map(|l| l.strip_prefix(prefix.as_str()))
        .map(str::trim)
}

/// LLM mock. Known queries get bundled golden completions keyed by the
/// SHA-256 of the query text; data-generation prompts get their requested
/// targets echoed back; anything else gets a meta-response derived from a
/// hash of the query.
#[derive(Debug, Clone)]
pub struct MockLlm {
    golden: HashMap<String, String>,
    taxonomy: Taxonomy,
    behavior: MockBehavior,
}

impl Default for MockLlm {
    fn default() -> Self {
        Self::new()
    }
}

impl MockLlm {
    pub fn new() -> Self {
        Self::with_taxonomy(Taxonomy::canonical().clone())
    }

    pub fn with_taxonomy(taxonomy: Taxonomy) -> Self {
        let mut golden = HashMap::new();
        golden.insert(sha256_hex(TRAFFIC_QUERY.as_bytes()), TRAFFIC_COMPLETION.to_string());
        Self {
            golden,
            taxonomy,
            behavior: MockBehavior::default(),
        }
    }

    pub fn with_behavior(mut self, behavior: MockBehavior) -> Self {
        self.behavior = behavior;
        self
    }

    pub fn insert_golden(&mut self, query: &str, completion: impl Into<String>) {
        self.golden.insert(sha256_hex(query.as_bytes()), completion.into());
    }

    fn pick(entries: &[String], seed: u64) -> &str {
        &entries[(seed % entries.len() as u64) as usize]
    }

    fn derived(&self, query: &str) -> String {
        use crate::taxonomy::VocabularyKind as K;
        let t = &self.taxonomy;
        let h = |salt: &str| hash_u64(&[salt, query]);
        let label = Self::pick(t.vocabulary(K::EmotionLabel).entries(), h("emotion"));
        let meta = MetaResponse {
            emotion: EmotionBlock {
                label: t.emotion_label(label).expect("own vocabulary").0,
                cause: format!("What the user described: {}", first_words(query, 8)),
            },
            scene: SceneContextBlock {
                event_scenario: t.scene(Self::pick(t.vocabulary(K::Scene).entries(), h("scene"))),
                rationale: "People react strongly when events like this touch what they care about.".into(),
                goal_to_response: "Acknowledge the feeling and offer support.".into(),
            },
            response_text: format!(
                "It sounds like you feel {} right now. I'm here with you.",
                label.to_lowercase()
            ),
            profile: AgentProfile {
                timbre_tone: t
                    .timbre_tone(Self::pick(t.vocabulary(K::TimbreTone).entries(), h("timbre")))
                    .expect("own vocabulary")
                    .0,
                gender: t
                    .gender(Self::pick(t.vocabulary(K::Gender).entries(), h("gender")))
                    .expect("own vocabulary")
                    .0,
                age_group: t
                    .age_group(Self::pick(t.vocabulary(K::AgeGroup).entries(), h("age")))
                    .expect("own vocabulary")
                    .0,
            },
            provenance: Provenance::canonical(),
        };
        render_meta_response(&meta)
    }

    fn datagen_answer(&self, prompt: &str) -> Option<String> {
        let label = target_value(prompt, "Emotion Label")?;
        let kind = target_value(prompt, "Emotion Type").unwrap_or("Explicit");
        let scene = target_value(prompt, "Scene").unwrap_or("Daily common conversation");
        let seed = target_value(prompt, "Sample Seed").unwrap_or("0");
        let query = if kind.eq_ignore_ascii_case("implicit") {
            format!(
                "Something happened today related to {}. (sample {seed})",
                scene.to_lowercase()
            )
        } else {
            format!(
                "I feel so {} about {}. (sample {seed})",
                label.to_lowercase(),
                scene.to_lowercase()
            )
        };
        let body = self.derived(&query);
        let body = body
            .lines()
            .map(|l| {
                if l.starts_with("<Emotion Label>") {
                    format!("<Emotion Label> {label}")
                } else if l.starts_with("<Event Scenario>") {
                    format!("<Event Scenario> {scene}")
                } else {
                    l.to_string()
                }
            })
            .collect::<Vec<_>>()
            .join("\n");
        Some(format!("<User Query> {query}\n{body}"))
    }
}

fn first_words(text: &str, n: usize) -> String {
    text.split_whitespace().take(n).collect::<Vec<_>>().join(" ")
}

#[async_trait]
impl LlmBackend for MockLlm {
    async fn complete(&self, prompt: &str) -> Result<String, BackendError> {
        self.behavior.apply("llm").await?;
        if let Some(answer) = self.datagen_answer(prompt) {
            return Ok(answer);
        }
        let query = prompt_user_query(prompt).unwrap_or(prompt);
        if let Some(golden) = self.golden.get(&sha256_hex(query.as_bytes())) {
            return Ok(golden.clone());
        }
        Ok(self.derived(query))
    }
}

/// Replays a fixed sequence of completions, then repeats the last one.
#[derive(Debug, Clone)]
pub struct ScriptedLlm {
    script: Arc<Mutex<VecDeque<Result<String, BackendError>>>>,
    prompts: Arc<Mutex<Vec<String>>>,
}

impl ScriptedLlm {
    pub fn new(script: impl IntoIterator<Item = Result<String, BackendError>>) -> Self {
        Self {
            script: Arc::new(Mutex::new(script.into_iter().collect())),
            prompts: Arc::default(),
        }
    }

    pub fn always(text: impl Into<String>) -> Self {
        Self::new([Ok(text.into())])
    }

    /// Prompts received so far.
    pub fn prompts(&self) -> Vec<String> {
        self.prompts.lock().expect("poisoned").clone()
    }
}

#[async_trait]
impl LlmBackend for ScriptedLlm {
    async fn complete(&self, prompt: &str) -> Result<String, BackendError> {
        self.prompts.lock().expect("poisoned").push(prompt.to_string());
        let mut script = self.script.lock().expect("poisoned");
        match script.len() {
            0 => Err(BackendError::Transport("script exhausted".into())),
            1 => script[0].clone(),
            _ => script.pop_front().expect("non-empty"),
        }
    }
}

/// Encoder mock: a blob whose bytes match a fixture file yields the text of
/// that fixture's `.txt` sidecar as its transcript.
#[derive(Debug, Clone, Default)]
pub struct MockEncoder {
    transcripts: HashMap<String, String>,
    behavior: MockBehavior,
}

impl MockEncoder {
    pub fn new() -> Self {
        Self::default()
    }

    /// Indexes every non-`.txt` file in `dir` that has a `.txt` sidecar.
    pub fn from_fixture_dir(dir: &Path) -> std::io::Result<Self> {
        let mut encoder = Self::new();
        for entry in std::fs::read_dir(dir)? {
            let path = entry?.path();
            if !path.is_file() || path.extension().is_some_and(|e| e == "txt") {
                continue;
            }
            let sidecar = path.with_extension("txt");
            if let Ok(text) = std::fs::read_to_string(&sidecar) {
                encoder.insert(&std::fs::read(&path)?, text.trim());
            }
        }
        Ok(encoder)
    }

    pub fn insert(&mut self, blob: &[u8], transcript: impl Into<String>) {
        self.transcripts.insert(sha256_hex(blob), transcript.into());
    }

    pub fn with_behavior(mut self, behavior: MockBehavior) -> Self {
        self.behavior = behavior;
        self
    }
}

#[async_trait]
impl EncoderBackend for MockEncoder {
    async fn encode(&self, media: &[u8], modality: Modality) -> Result<EncodedInput, BackendError> {
        self.behavior.apply("encoder").await?;
        Ok(EncodedInput {
            transcript: self.transcripts.get(&sha256_hex(media)).cloned().unwrap_or_default(),
            affect_description: MOCK_AFFECT.to_string(),
            source_modality: modality,
        })
    }
}

/// Speech mock: 16 kHz 16-bit mono WAV, [`SECONDS_PER_WORD`] per word, a sine
/// tone whose pitch is a fixed hash of (emotion, reference id).
#[derive(Debug, Clone, Default)]
pub struct MockSpeech {
    behavior: MockBehavior,
}

impl MockSpeech {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn failing() -> Self {
        Self::new().with_behavior(MockBehavior {
            fail: true,
            ..MockBehavior::default()
        })
    }

    pub fn with_behavior(mut self, behavior: MockBehavior) -> Self {
        self.behavior = behavior;
        self
    }

    pub fn tone_hz(emotion: &str, reference_id: &str) -> f64 {
        200.0 + (hash_u64(&[emotion, reference_id]) % 600) as f64
    }
}

pub fn word_count(text: &str) -> usize {
    text.split_whitespace().count()
}

fn sine_wav(freq: f64, samples: usize) -> Result<Vec<u8>, BackendError> {
    let spec = hound::WavSpec {
        channels: 1,
        sample_rate: MOCK_SAMPLE_RATE,
        bits_per_sample: 16,
        sample_format: hound::SampleFormat::Int,
    };
    let mut cursor = Cursor::new(Vec::new());
    let mut writer =
        hound::WavWriter::new(&mut cursor, spec).map_err(|e| BackendError::GenerationFailed(e.to_string()))?;
    for i in 0..samples {
        let t = i as f64 / f64::from(MOCK_SAMPLE_RATE);
        let v = (0.3 * (std::f64::consts::TAU * freq * t).sin() * f64::from(i16::MAX)) as i16;
        writer
            .write_sample(v)
            .map_err(|e| BackendError::GenerationFailed(e.to_string()))?;
    }
    writer
        .finalize()
        .map_err(|e| BackendError::GenerationFailed(e.to_string()))?;
    Ok(cursor.into_inner())
}

#[async_trait]
impl SpeechBackend for MockSpeech {
    async fn synthesize(&self, request: &SpeechRequest<'_>) -> Result<GeneratedMedia, BackendError> {
        self.behavior.apply("speech").await?;
        let words = word_count(request.text).max(1);
        let samples_per_word = (SECONDS_PER_WORD * f64::from(MOCK_SAMPLE_RATE)).round() as usize;
        let freq = Self::tone_hz(request.emotion.as_str(), &request.reference.id);
        let bytes = sine_wav(freq, words * samples_per_word)?;
        Ok(GeneratedMedia {
            bytes,
            format: MediaFormat::Wav,
            duration_s: SECONDS_PER_WORD * words as f64,
            conditioning: Conditioning {
                emotion: request.emotion.clone(),
                text: Some(request.text.to_string()),
                reference_id: request.reference.id.clone(),
            },
            metadata: json!({
                "mock": "speech",
                "words": words,
                "tone_hz": freq,
                "sample_rate": MOCK_SAMPLE_RATE,
            }),
        })
    }
}

/// Talking-face mock: an animated GIF placeholder whose running time matches
/// the driving audio to the centisecond.
#[derive(Debug, Clone, Default)]
pub struct MockFace {
    behavior: MockBehavior,
}

const FRAME_CS: u32 = 4;
const FRAME_SIDE: u32 = 16;

impl MockFace {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn failing() -> Self {
        Self::new().with_behavior(MockBehavior {
            fail: true,
            ..MockBehavior::default()
        })
    }

    pub fn with_behavior(mut self, behavior: MockBehavior) -> Self {
        self.behavior = behavior;
        self
    }

    /// Per-frame delays in centiseconds summing to the rounded duration.
    pub fn frame_delays(duration_s: f64) -> Vec<u32> {
        let total = ((duration_s * 100.0).round() as u32).max(1);
        let full = (total - 1) / FRAME_CS;
        let mut delays = vec![FRAME_CS; full as usize];
        delays.push(total - full * FRAME_CS);
        delays
    }
}

fn placeholder_gif(delays: &[u32], seed: u64) -> Result<Vec<u8>, BackendError> {
    let mut out = Vec::new();
    {
        let mut encoder = GifEncoder::new(&mut out);
        encoder
            .set_repeat(Repeat::Infinite)
            .map_err(|e| BackendError::GenerationFailed(e.to_string()))?;
        let base = seed.to_le_bytes();
        for (i, cs) in delays.iter().enumerate() {
            let shade = (i as u32 * 16 % 128) as u8;
            let image = RgbaImage::from_fn(FRAME_SIDE, FRAME_SIDE, |x, y| {
                let mouth = y > FRAME_SIDE / 2 && (x + i as u32) % 4 < 2;
                if mouth {
                    Rgba([shade, shade, shade, 255])
                } else {
                    Rgba([base[0], base[1], base[2], 255])
                }
            });
            let frame = Frame::from_parts(image, 0, 0, Delay::from_numer_denom_ms(cs * 10, 1));
            encoder
                .encode_frame(frame)
                .map_err(|e| BackendError::GenerationFailed(e.to_string()))?;
        }
    }
    Ok(out)
}

#[async_trait]
impl FaceBackend for MockFace {
    async fn animate(&self, request: &FaceRequest<'_>) -> Result<GeneratedMedia, BackendError> {
        self.behavior.apply("face").await?;
        let delays = Self::frame_delays(request.audio_duration_s);
        let seed = hash_u64(&[request.emotion.as_str(), &request.reference.id]);
        let bytes = placeholder_gif(&delays, seed)?;
        let total_cs: u32 = delays.iter().sum();
        Ok(GeneratedMedia {
            bytes,
            format: MediaFormat::Gif,
            duration_s: f64::from(total_cs) / 100.0,
            conditioning: Conditioning {
                emotion: request.emotion.clone(),
                text: None,
                reference_id: request.reference.id.clone(),
            },
            metadata: json!({
                "mock": "face",
                "frames": delays.len(),
                "emotion": request.emotion,
                "face_id": request.reference.id,
            }),
        })
    }
}

/// Forwards a fixed, wrong emotion label to the wrapped backend. Exists to
/// prove the consistency check catches label drift.
pub struct RelabelingFace<B> {
    pub inner: B,
    pub label: crate::taxonomy::EmotionLabel,
}

#[async_trait]
impl<B: FaceBackend> FaceBackend for RelabelingFace<B> {
    async fn animate(&self, request: &FaceRequest<'_>) -> Result<GeneratedMedia, BackendError> {
        let forwarded = FaceRequest {
            emotion: &self.label,
            ..*request
        };
        self.inner.animate(&forwarded).await
    }
}

/// Speech counterpart of [`RelabelingFace`].
pub struct RelabelingSpeech<B> {
    pub inner: B,
    pub label: crate::taxonomy::EmotionLabel,
}

#[async_trait]
impl<B: SpeechBackend> SpeechBackend for RelabelingSpeech<B> {
    async fn synthesize(&self, request: &SpeechRequest<'_>) -> Result<GeneratedMedia, BackendError> {
        let forwarded = SpeechRequest {
            emotion: &self.label,
            ..*request
        };
        self.inner.synthesize(&forwarded).await
    }
}
