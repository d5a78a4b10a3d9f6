//! HTTP clients for inference servers implementing the backend wire contracts:
//!
//! - `POST /v1/complete` JSON `{prompt}` → JSON `{text}`
//! - `POST /v1/encode` multipart (`media`, `modality`) → JSON `{transcript, affect}`
//! - `POST /v1/tts` multipart (`request` = JSON `{text, emotion, reference_id}`,
//!   `reference` = reference audio) → audio bytes, `X-Duration-S` header
//! - `POST /v1/talking-face` multipart (`audio`, `reference_image`, `emotion`)
//!   → video bytes, `X-Duration-S` header

use std::time::Duration;

use async_trait::async_trait;
use reqwest::multipart::{Form, Part};
use reqwest::{Client, Response};
use serde::{Deserialize, Serialize};

use super::{
    BackendEndpoint, BackendError, Conditioning, EncodedInput, EncoderBackend, FaceBackend, FaceRequest,
    GeneratedMedia, LlmBackend, Modality, SpeechBackend, SpeechRequest,
};
use crate::conversation::media::MediaFormat;

pub const DURATION_HEADER: &str = "X-Duration-S";

#[derive(Debug, Serialize, Deserialize)]
pub struct CompleteRequest {
    pub prompt: String,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct CompleteResponse {
    pub text: String,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct EncodeResponse {
    pub transcript: String,
    pub affect: String,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct TtsRequest {
    pub text: String,
    pub emotion: String,
    pub reference_id: String,
}

fn map_transport(e: reqwest::Error, timeout_s: f64) -> BackendError {
    if e.is_timeout() {
        BackendError::Timeout(timeout_s)
    } else {
        BackendError::Transport(e.to_string())
    }
}

#[derive(Debug, Clone)]
struct HttpClient {
    client: Client,
    endpoint: BackendEndpoint,
}

impl HttpClient {
    fn new(endpoint: BackendEndpoint) -> Result<Self, BackendError> {
        endpoint.validate()?;
        let client = Client::builder()
            .timeout(Duration::from_secs_f64(endpoint.timeout_s))
            .build()
            .map_err(|e| BackendError::Config(e.to_string()))?;
        Ok(Self { client, endpoint })
    }

    fn url(&self, path: &str) -> Result<url::Url, BackendError> {
        let mut base = self.endpoint.base_url.clone();
        if !base.path().ends_with('/') {
            let p = format!("{}/", base.path());
            base.set_path(&p);
        }
        base.join(path.trim_start_matches('/'))
            .map_err(|e| BackendError::Config(e.to_string()))
    }

    async fn send(&self, request: reqwest::RequestBuilder) -> Result<Response, BackendError> {
        let response = request
            .send()
            .await
            .map_err(|e| map_transport(e, self.endpoint.timeout_s))?;
        let status = response.status();
        if !status.is_success() {
            let body = response.text().await.unwrap_or_default();
            return Err(BackendError::BadStatus {
                code: status.as_u16(),
                body,
            });
        }
        Ok(response)
    }

    async fn media(&self, response: Response, conditioning: Conditioning) -> Result<GeneratedMedia, BackendError> {
        let duration_s = response
            .headers()
            .get(DURATION_HEADER)
            .and_then(|v| v.to_str().ok())
            .and_then(|v| v.trim().parse::<f64>().ok())
            .filter(|d| d.is_finite() && *d > 0.0)
            .ok_or_else(|| BackendError::GenerationFailed(format!("missing or invalid {DURATION_HEADER} header")))?;
        let content_type = response
            .headers()
            .get(reqwest::header::CONTENT_TYPE)
            .and_then(|v| v.to_str().ok())
            .map(str::to_string);
        let bytes = response
            .bytes()
            .await
            .map_err(|e| map_transport(e, self.endpoint.timeout_s))?
            .to_vec();
        let format = content_type
            .as_deref()
            .and_then(MediaFormat::from_content_type)
            .unwrap_or_else(|| MediaFormat::sniff(&bytes));
        Ok(GeneratedMedia {
            bytes,
            format,
            duration_s,
            conditioning,
            metadata: serde_json::json!({ "content_type": content_type }),
        })
    }
}

fn file_part(bytes: &[u8], name: &str, format: MediaFormat) -> Result<Part, BackendError> {
    Part::bytes(bytes.to_vec())
        .file_name(format!("{name}.{}", format.extension()))
        .mime_str(format.content_type())
        .map_err(|e| BackendError::InvalidRequest(e.to_string()))
}

#[derive(Debug, Clone)]
pub struct HttpLlm(HttpClient);

impl HttpLlm {
    pub fn new(endpoint: BackendEndpoint) -> Result<Self, BackendError> {
        HttpClient::new(endpoint).map(Self)
    }
}

#[async_trait]
impl LlmBackend for HttpLlm {
    async fn complete(&self, prompt: &str) -> Result<String, BackendError> {
        let request = self.0.client.post(self.0.url("v1/complete")?).json(&CompleteRequest {
            prompt: prompt.to_string(),
        });
        let response = self.0.send(request).await?;
        let body: CompleteResponse = response
            .json()
            .await
            .map_err(|e| BackendError::GenerationFailed(format!("bad completion body: {e}")))?;
        Ok(body.text)
    }
}

#[derive(Debug, Clone)]
pub struct HttpEncoder(HttpClient);

impl HttpEncoder {
    pub fn new(endpoint: BackendEndpoint) -> Result<Self, BackendError> {
        HttpClient::new(endpoint).map(Self)
    }
}

#[async_trait]
impl EncoderBackend for HttpEncoder {
    async fn encode(&self, media: &[u8], modality: Modality) -> Result<EncodedInput, BackendError> {
        let form = Form::new()
            .part("media", file_part(media, "media", MediaFormat::sniff(media))?)
            .text("modality", modality.as_str());
        let request = self.0.client.post(self.0.url("v1/encode")?).multipart(form);
        let response = self.0.send(request).await?;
        let body: EncodeResponse = response
            .json()
            .await
            .map_err(|e| BackendError::GenerationFailed(format!("bad encoder body: {e}")))?;
        Ok(EncodedInput {
            transcript: body.transcript,
            affect_description: body.affect,
            source_modality: modality,
        })
    }
}

#[derive(Debug, Clone)]
pub struct HttpSpeech(HttpClient);

impl HttpSpeech {
    pub fn new(endpoint: BackendEndpoint) -> Result<Self, BackendError> {
        HttpClient::new(endpoint).map(Self)
    }
}

#[async_trait]
impl SpeechBackend for HttpSpeech {
    async fn synthesize(&self, request: &SpeechRequest<'_>) -> Result<GeneratedMedia, BackendError> {
        let body = TtsRequest {
            text: request.text.to_string(),
            emotion: request.emotion.to_string(),
            reference_id: request.reference.id.clone(),
        };
        let json = serde_json::to_string(&body).map_err(|e| BackendError::InvalidRequest(e.to_string()))?;
        let request_part = Part::text(json)
            .mime_str("application/json")
            .map_err(|e| BackendError::InvalidRequest(e.to_string()))?;
        let form = Form::new().part("request", request_part).part(
            "reference",
            file_part(
                request.reference_audio,
                "reference",
                MediaFormat::sniff(request.reference_audio),
            )?,
        );
        let http = self.0.client.post(self.0.url("v1/tts")?).multipart(form);
        let response = self.0.send(http).await?;
        self.0
            .media(
                response,
                Conditioning {
                    emotion: request.emotion.clone(),
                    text: Some(request.text.to_string()),
                    reference_id: request.reference.id.clone(),
                },
            )
            .await
    }
}

#[derive(Debug, Clone)]
pub struct HttpFace(HttpClient);

impl HttpFace {
    pub fn new(endpoint: BackendEndpoint) -> Result<Self, BackendError> {
        HttpClient::new(endpoint).map(Self)
    }
}

#[async_trait]
impl FaceBackend for HttpFace {
    async fn animate(&self, request: &FaceRequest<'_>) -> Result<GeneratedMedia, BackendError> {
        let form = Form::new()
            .part("audio", file_part(request.audio, "audio", request.audio_format)?)
            .part(
                "reference_image",
                file_part(
                    request.reference_image,
                    "reference",
                    MediaFormat::sniff(request.reference_image),
                )?,
            )
            .text("emotion", request.emotion.to_string());
        let http = self.0.client.post(self.0.url("v1/talking-face")?).multipart(form);
        let response = self.0.send(http).await?;
        self.0
            .media(
                response,
                Conditioning {
                    emotion: request.emotion.clone(),
                    text: None,
                    reference_id: request.reference.id.clone(),
                },
            )
            .await
    }
}
