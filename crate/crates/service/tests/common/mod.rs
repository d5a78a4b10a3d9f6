#![allow(dead_code)]

use std::io::{BufRead, BufReader};
use std::path::{Path, PathBuf};
use std::process::{Child, Command, Stdio};
use std::sync::Arc;

use empathyear_service::api::{router, AppState};
use empathyear_service::app::build_pipeline;
use empathyear_service::{ServiceConfig, API_SCHEMA};
use serde_json::Value;

pub const TRAFFIC: &str = "Today traffic was horrible and was so frustrating!";

pub fn demo_dir() -> PathBuf {
    PathBuf::from(empathyear_core::DEMO_ASSETS)
}

pub fn demo_config(storage: &Path) -> ServiceConfig {
    ServiceConfig {
        storage_dir: storage.to_path_buf(),
        manifest: Some(demo_dir().join("references.json")),
        mock_encoder_fixtures: Some(demo_dir().join("inputs")),
        backoff_ms: 1,
        ..ServiceConfig::default()
    }
}

/// The router served in-process on an ephemeral port.
pub struct TestServer {
    pub base: String,
    pub client: reqwest::Client,
    task: tokio::task::JoinHandle<()>,
}

impl Drop for TestServer {
    fn drop(&mut self) {
        self.task.abort();
    }
}

impl TestServer {
    pub async fn start(config: ServiceConfig) -> Self {
        let pipeline = build_pipeline(&config).expect("pipeline");
        let state = AppState {
            pipeline,
            bearer_token: config.bearer_token.as_deref().map(Arc::from),
        };
        let app = router(state, config.static_dir.clone(), config.max_upload_mb * 1024 * 1024);
        let listener = tokio::net::TcpListener::bind("127.0.0.1:0").await.unwrap();
        let addr = listener.local_addr().unwrap();
        let task = tokio::spawn(async move {
            axum::serve(listener, app).await.unwrap();
        });
        Self {
            base: format!("http://{addr}"),
            client: reqwest::Client::new(),
            task,
        }
    }

    pub fn url(&self, path: &str) -> String {
        format!("{}{path}", self.base)
    }

    pub async fn create_session(&self) -> String {
        let r = self.client.post(self.url("/api/sessions")).send().await.unwrap();
        assert_eq!(r.status(), 201);
        let body: Value = r.json().await.unwrap();
        body["session_id"].as_str().unwrap().to_string()
    }

    pub async fn post_form(&self, session: &str, query: &str, form: reqwest::multipart::Form) -> reqwest::Response {
        self.client
            .post(self.url(&format!("/api/sessions/{session}/turns{query}")))
            .multipart(form)
            .send()
            .await
            .unwrap()
    }

    pub async fn post_text(&self, session: &str, text: &str) -> reqwest::Response {
        let form = reqwest::multipart::Form::new().text("text", text.to_string());
        self.post_form(session, "?trace=1", form).await
    }

    pub async fn transcript(&self, session: &str) -> Value {
        let r = self
            .client
            .get(self.url(&format!("/api/sessions/{session}")))
            .send()
            .await
            .unwrap();
        assert_eq!(r.status(), 200);
        r.json().await.unwrap()
    }
}

/// `empathyear serve` as a child process.
pub struct BinServer {
    pub base: String,
    child: Child,
}

impl BinServer {
    pub fn start(storage: &Path, env: &[(&str, &str)]) -> Self {
        let mut cmd = Command::new(env!("CARGO_BIN_EXE_empathyear"));
        cmd.arg("serve")
            .current_dir(storage)
            .env("EMPATHYEAR_STORAGE_DIR", storage)
            .env("EMPATHYEAR_LISTEN", "127.0.0.1:0")
            .env("EMPATHYEAR_MANIFEST", demo_dir().join("references.json"))
            .env("EMPATHYEAR_MOCK_ENCODER_FIXTURES", demo_dir().join("inputs"))
            .env("RUST_LOG", "warn")
            .stdout(Stdio::piped())
            .stderr(Stdio::null());
        for (k, v) in env {
            cmd.env(k, v);
        }
        let mut child = cmd.spawn().expect("spawn empathyear");
        let mut line = String::new();
        BufReader::new(child.stdout.take().unwrap())
            .read_line(&mut line)
            .unwrap();
        let base = line
            .trim()
            .strip_prefix("listening on ")
            .unwrap_or_else(|| panic!("unexpected first line {line:?}"))
            .to_string();
        Self { base, child }
    }

    /// SIGKILL on unix: no shutdown hooks run.
    pub fn kill(mut self) {
        self.child.kill().unwrap();
        self.child.wait().unwrap();
    }
}

impl Drop for BinServer {
    fn drop(&mut self) {
        let _ = self.child.kill();
        let _ = self.child.wait();
    }
}

pub fn schema() -> Value {
    serde_json::from_str(API_SCHEMA).expect("schema is JSON")
}

/// Validator for one `$defs` entry of the published schema.
pub fn validator(def: &str) -> jsonschema::Validator {
    let mut doc = schema();
    doc["$ref"] = Value::String(format!("#/$defs/{def}"));
    jsonschema::draft202012::new(&doc).expect("schema compiles")
}

pub fn assert_valid(def: &str, instance: &Value) {
    let v = validator(def);
    let errors: Vec<String> = v
        .iter_errors(instance)
        .map(|e| format!("{} at {}", e, e.instance_path))
        .collect();
    assert!(errors.is_empty(), "{def} violations: {errors:#?}\n{instance:#}");
}
