//! Turns a [`ServiceConfig`] into a ready [`Pipeline`].

use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Duration;

use empathyear_core::backends::http::{HttpEncoder, HttpFace, HttpLlm, HttpSpeech};
use empathyear_core::backends::mock::{MockBehavior, MockEncoder, MockFace, MockLlm, MockSpeech};
use empathyear_core::backends::{
    BackendEndpoint, BackendKind, BackendSet, EncoderBackend, FaceBackend, LlmBackend, SpeechBackend,
};
use empathyear_core::conversation::{MediaStore, SessionStore};
use empathyear_core::meta_response::PromptOptions;
use empathyear_core::pipeline::{Pipeline, PipelineConfig};
use empathyear_core::retrieval::{ReferenceIndex, RetrievalError};
use empathyear_core::taxonomy::{Taxonomy, TaxonomyError};
use thiserror::Error;

use crate::config::{ConfigError, ServiceConfig};

#[derive(Debug, Error)]
pub enum StartupError {
    /// Bad configuration, manifest or taxonomy.
    #[error("{0}")]
    Validation(String),
    /// Environment problems: unreadable files, storage, sockets.
    #[error("{0}")]
    Runtime(String),
}

impl From<ConfigError> for StartupError {
    fn from(e: ConfigError) -> Self {
        match e {
            ConfigError::Io { .. } => StartupError::Runtime(e.to_string()),
            _ => StartupError::Validation(e.to_string()),
        }
    }
}

pub fn load_taxonomy(config: &ServiceConfig) -> Result<Taxonomy, StartupError> {
    match &config.taxonomy {
        None => Ok(Taxonomy::canonical().clone()),
        Some(path) => Taxonomy::load(path, config.allow_custom_taxonomy).map_err(|e| match e {
            TaxonomyError::Io(_) => StartupError::Runtime(format!("taxonomy {}: {e}", path.display())),
            other => StartupError::Validation(format!("taxonomy {}: {other}", path.display())),
        }),
    }
}

pub fn manifest_paths(config: &ServiceConfig) -> Result<(PathBuf, PathBuf), StartupError> {
    let manifest = config
        .manifest
        .clone()
        .ok_or_else(|| StartupError::Validation("manifest is not configured".into()))?;
    let root = config.reference_root.clone().unwrap_or_else(|| {
        manifest
            .parent()
            .map(Path::to_path_buf)
            .unwrap_or_else(|| PathBuf::from("."))
    });
    Ok((manifest, root))
}

pub fn load_index(config: &ServiceConfig, taxonomy: &Taxonomy) -> Result<ReferenceIndex, StartupError> {
    let (manifest, root) = manifest_paths(config)?;
    ReferenceIndex::load(&manifest, &root, taxonomy).map_err(|e| match e {
        RetrievalError::ManifestIo { .. } | RetrievalError::MediaIo { .. } => StartupError::Runtime(e.to_string()),
        other => StartupError::Validation(other.to_string()),
    })
}

/// `mock://fail` (or `?fail=1`) always fails; `?delay_ms=N` sleeps first.
pub fn mock_behavior(endpoint: &BackendEndpoint) -> Result<MockBehavior, StartupError> {
    let url = &endpoint.base_url;
    let mut behavior = MockBehavior {
        fail: url.host_str() == Some("fail"),
        ..MockBehavior::default()
    };
    for (k, v) in url.query_pairs() {
        match k.as_ref() {
            "fail" => behavior.fail = matches!(v.as_ref(), "1" | "true" | "yes"),
            "delay_ms" => {
                let ms: u64 = v.parse().map_err(|_| {
                    StartupError::Validation(format!("{} mock delay_ms {v:?} is not an integer", endpoint.kind))
                })?;
                behavior.delay = Duration::from_millis(ms);
            }
            other => {
                return Err(StartupError::Validation(format!(
                    "{} mock url has unknown parameter {other:?}",
                    endpoint.kind
                )))
            }
        }
    }
    Ok(behavior)
}

fn http_err(kind: BackendKind, e: impl std::fmt::Display) -> StartupError {
    StartupError::Validation(format!("{kind} backend: {e}"))
}

pub fn build_backends(config: &ServiceConfig, taxonomy: &Taxonomy) -> Result<BackendSet, StartupError> {
    let llm_ep = config.endpoint(BackendKind::Llm)?;
    let encoder_ep = config.endpoint(BackendKind::Encoder)?;
    let speech_ep = config.endpoint(BackendKind::Speech)?;
    let face_ep = config.endpoint(BackendKind::Face)?;

    let llm: Arc<dyn LlmBackend> = if llm_ep.is_mock() {
        Arc::new(MockLlm::with_taxonomy(taxonomy.clone()).with_behavior(mock_behavior(&llm_ep)?))
    } else {
        Arc::new(HttpLlm::new(llm_ep.clone()).map_err(|e| http_err(BackendKind::Llm, e))?)
    };
    let encoder: Arc<dyn EncoderBackend> = if encoder_ep.is_mock() {
        let base = match &config.mock_encoder_fixtures {
            Some(dir) => MockEncoder::from_fixture_dir(dir)
                .map_err(|e| StartupError::Runtime(format!("mock encoder fixtures {}: {e}", dir.display())))?,
            None => MockEncoder::new(),
        };
        Arc::new(base.with_behavior(mock_behavior(&encoder_ep)?))
    } else {
        Arc::new(HttpEncoder::new(encoder_ep.clone()).map_err(|e| http_err(BackendKind::Encoder, e))?)
    };
    let speech: Arc<dyn SpeechBackend> = if speech_ep.is_mock() {
        Arc::new(MockSpeech::new().with_behavior(mock_behavior(&speech_ep)?))
    } else {
        Arc::new(HttpSpeech::new(speech_ep.clone()).map_err(|e| http_err(BackendKind::Speech, e))?)
    };
    let face: Arc<dyn FaceBackend> = if face_ep.is_mock() {
        Arc::new(MockFace::new().with_behavior(mock_behavior(&face_ep)?))
    } else {
        Arc::new(HttpFace::new(face_ep.clone()).map_err(|e| http_err(BackendKind::Face, e))?)
    };
    let set = BackendSet {
        llm,
        encoder,
        speech,
        face,
        llm_endpoint: llm_ep,
        encoder_endpoint: encoder_ep,
        speech_endpoint: speech_ep,
        face_endpoint: face_ep,
    };
    set.validate().map_err(|e| StartupError::Validation(e.to_string()))?;
    Ok(set)
}

pub fn build_pipeline(config: &ServiceConfig) -> Result<Pipeline, StartupError> {
    let taxonomy = load_taxonomy(config)?;
    let index = load_index(config, &taxonomy)?;
    let backends = build_backends(config, &taxonomy)?;
    let sessions = SessionStore::open(&config.storage_dir)
        .map_err(|e| StartupError::Runtime(format!("session store {}: {e}", config.storage_dir.display())))?;
    let media = MediaStore::open(config.storage_dir.join("media"))
        .map_err(|e| StartupError::Runtime(format!("media store: {e}")))?;
    Ok(Pipeline {
        taxonomy: Arc::new(taxonomy),
        index: Arc::new(index),
        backends,
        sessions,
        media,
        config: PipelineConfig {
            prompt: PromptOptions {
                history_window: config.history_window,
                vocabulary_hints: config.vocabulary_hints,
            },
            budgets: config.budgets(),
        },
    })
}
