//! HTTP API, configuration and command line for the empathyear orchestrator.

pub mod api;
pub mod app;
pub mod cli;
pub mod config;

pub use api::{router, AppState};
pub use config::ServiceConfig;

/// JSON Schema for the public API payloads.
pub const API_SCHEMA: &str = include_str!("../schema/api.schema.json");
