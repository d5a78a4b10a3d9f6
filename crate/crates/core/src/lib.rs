//! Orchestration core for an avatar-based multimodal empathetic chatbot.
//!
//! A user turn (text, speech, or video) is turned into a structured
//! meta-response by an LLM backend, reference voice and face media are
//! retrieved to match it, and speech-synthesis and talking-face backends
//! produce the avatar reply.

pub mod backends;
pub mod conversation;
pub mod meta_response;
pub mod metrics;
pub mod pipeline;
pub mod retrieval;
pub mod taxonomy;

pub use taxonomy::{
    normalize_label, AgeGroup, EmotionLabel, EmotionType, Gender, MatchStage, Scene, Taxonomy, TaxonomyError,
    TimbreTone, Vocabulary, VocabularyKind,
};

/// Demo reference media, manifest and input fixtures shipped with the crate.
pub const DEMO_ASSETS: &str = concat!(env!("CARGO_MANIFEST_DIR"), "/assets/demo");
