//! `empathyear.toml`: flat `key = value` pairs. Any key can be overridden by
//! an `EMPATHYEAR_<KEY>` environment variable. Relative paths in the file are
//! resolved against the file's directory; relative paths from the
//! environment against the working directory.

use std::collections::BTreeMap;
use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::time::Duration;

use empathyear_core::backends::{BackendEndpoint, BackendKind, MAX_RETRIES_LIMIT};
use empathyear_core::pipeline::StepBudgets;
use serde::{Deserialize, Serialize};
use thiserror::Error;
use url::Url;

pub const DEFAULT_CONFIG_FILE: &str = "empathyear.toml";
pub const ENV_PREFIX: &str = "EMPATHYEAR_";

const PATH_KEYS: [&str; 6] = [
    "storage_dir",
    "manifest",
    "reference_root",
    "taxonomy",
    "static_dir",
    "mock_encoder_fixtures",
];

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("reading config {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("parsing config {origin}: {message}")]
    Parse { origin: String, message: String },
    #[error("invalid config: {0}")]
    Invalid(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ServiceConfig {
    pub listen: String,
    /// Holds `sessions/` and `media/`.
    pub storage_dir: PathBuf,
    pub manifest: Option<PathBuf>,
    /// Root for manifest media paths; defaults to the manifest's directory.
    pub reference_root: Option<PathBuf>,
    pub taxonomy: Option<PathBuf>,
    pub allow_custom_taxonomy: bool,
    pub llm_url: String,
    pub encoder_url: String,
    pub tts_url: String,
    pub face_url: String,
    /// Transcript fixtures for a mock encoder (`<file>` + `<file>.txt`).
    pub mock_encoder_fixtures: Option<PathBuf>,
    pub history_window: usize,
    pub vocabulary_hints: bool,
    pub encode_timeout_s: f64,
    pub llm_timeout_s: f64,
    pub tts_timeout_s: f64,
    pub face_timeout_s: f64,
    pub max_retries: u32,
    pub backoff_ms: u64,
    pub bearer_token: Option<String>,
    pub static_dir: Option<PathBuf>,
    pub max_upload_mb: usize,
}

impl Default for ServiceConfig {
    fn default() -> Self {
        Self {
            listen: "127.0.0.1:8080".into(),
            storage_dir: PathBuf::from("data"),
            manifest: None,
            reference_root: None,
            taxonomy: None,
            allow_custom_taxonomy: false,
            llm_url: "mock://local".into(),
            encoder_url: "mock://local".into(),
            tts_url: "mock://local".into(),
            face_url: "mock://local".into(),
            mock_encoder_fixtures: None,
            history_window: 10,
            vocabulary_hints: false,
            encode_timeout_s: 10.0,
            llm_timeout_s: 60.0,
            tts_timeout_s: 60.0,
            face_timeout_s: 120.0,
            max_retries: 2,
            backoff_ms: 200,
            bearer_token: None,
            static_dir: None,
            max_upload_mb: 64,
        }
    }
}

fn known_keys() -> Vec<String> {
    match toml::Value::try_from(ServiceConfig::default()) {
        Ok(toml::Value::Table(t)) => t.keys().cloned().collect(),
        _ => Vec::new(),
    }
    .into_iter()
    .chain(
        // optional keys are absent from the serialized default
        [
            "manifest",
            "reference_root",
            "taxonomy",
            "mock_encoder_fixtures",
            "bearer_token",
            "static_dir",
        ]
        .map(String::from),
    )
    .collect()
}

/// Environment values are read as TOML scalars when they parse as one, and
/// as plain strings otherwise.
fn env_value(raw: &str) -> toml::Value {
    match format!("v = {raw}").parse::<toml::Table>() {
        Ok(mut t) => t.remove("v").unwrap_or_else(|| toml::Value::String(raw.into())),
        Err(_) => toml::Value::String(raw.into()),
    }
}

fn absolutize(table: &mut toml::Table, base: &Path) {
    for key in PATH_KEYS {
        if let Some(toml::Value::String(s)) = table.get_mut(key) {
            let p = Path::new(s.as_str());
            if p.is_relative() {
                *s = base.join(p).to_string_lossy().into_owned();
            }
        }
    }
}

impl ServiceConfig {
    /// Loads `path` (required to exist when given) or `./empathyear.toml`
    /// (optional), then applies overrides from `env`.
    pub fn load(path: Option<&Path>, env: impl IntoIterator<Item = (String, String)>) -> Result<Self, ConfigError> {
        let cwd = std::env::current_dir().map_err(|source| ConfigError::Io {
            path: PathBuf::from("."),
            source,
        })?;
        let (file, required) = match path {
            Some(p) => (p.to_path_buf(), true),
            None => (cwd.join(DEFAULT_CONFIG_FILE), false),
        };
        let mut table = toml::Table::new();
        if required || file.is_file() {
            let text = std::fs::read_to_string(&file).map_err(|source| ConfigError::Io {
                path: file.clone(),
                source,
            })?;
            table = text.parse::<toml::Table>().map_err(|e| ConfigError::Parse {
                origin: file.display().to_string(),
                message: e.to_string(),
            })?;
            let base = file.parent().map(Path::to_path_buf).unwrap_or_else(|| cwd.clone());
            let base = if base.as_os_str().is_empty() { cwd.clone() } else { base };
            absolutize(&mut table, &base);
        }
        let known = known_keys();
        let mut overrides = toml::Table::new();
        for (name, value) in env {
            let Some(key) = name.strip_prefix(ENV_PREFIX) else {
                continue;
            };
            let key = key.to_ascii_lowercase();
            if !known.contains(&key) {
                continue;
            }
            overrides.insert(key, env_value(&value));
        }
        absolutize(&mut overrides, &cwd);
        table.extend(overrides);
        let config: ServiceConfig = table.try_into().map_err(|e: toml::de::Error| ConfigError::Parse {
            origin: file.display().to_string(),
            message: e.to_string(),
        })?;
        config.validate()?;
        Ok(config)
    }

    /// `load` with the process environment.
    pub fn from_env(path: Option<&Path>) -> Result<Self, ConfigError> {
        Self::load(path, std::env::vars())
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        self.listen_addr()?;
        for (name, t) in [
            ("encode_timeout_s", self.encode_timeout_s),
            ("llm_timeout_s", self.llm_timeout_s),
            ("tts_timeout_s", self.tts_timeout_s),
            ("face_timeout_s", self.face_timeout_s),
        ] {
            if !(t.is_finite() && t > 0.0) {
                return Err(ConfigError::Invalid(format!(
                    "{name} must be a positive number of seconds"
                )));
            }
        }
        if self.max_retries > MAX_RETRIES_LIMIT {
            return Err(ConfigError::Invalid(format!(
                "max_retries may not exceed {MAX_RETRIES_LIMIT}"
            )));
        }
        if self.max_upload_mb == 0 {
            return Err(ConfigError::Invalid("max_upload_mb must be positive".into()));
        }
        if self.bearer_token.as_deref().is_some_and(|t| t.trim().is_empty()) {
            return Err(ConfigError::Invalid("bearer_token is empty".into()));
        }
        for kind in BackendKind::ALL {
            self.endpoint(kind)?;
        }
        Ok(())
    }

    pub fn listen_addr(&self) -> Result<SocketAddr, ConfigError> {
        self.listen
            .parse()
            .map_err(|e| ConfigError::Invalid(format!("listen {:?}: {e}", self.listen)))
    }

    pub fn backend_url(&self, kind: BackendKind) -> &str {
        match kind {
            BackendKind::Llm => &self.llm_url,
            BackendKind::Encoder => &self.encoder_url,
            BackendKind::Speech => &self.tts_url,
            BackendKind::Face => &self.face_url,
        }
    }

    pub fn step_timeout_s(&self, kind: BackendKind) -> f64 {
        match kind {
            BackendKind::Llm => self.llm_timeout_s,
            BackendKind::Encoder => self.encode_timeout_s,
            BackendKind::Speech => self.tts_timeout_s,
            BackendKind::Face => self.face_timeout_s,
        }
    }

    /// Endpoint policy for one backend. A single attempt may use the whole
    /// step budget.
    pub fn endpoint(&self, kind: BackendKind) -> Result<BackendEndpoint, ConfigError> {
        let raw = self.backend_url(kind);
        let url = Url::parse(raw).map_err(|e| ConfigError::Invalid(format!("{kind} url {raw:?}: {e}")))?;
        if !matches!(url.scheme(), "http" | "https" | "mock") {
            return Err(ConfigError::Invalid(format!(
                "{kind} url {raw:?}: scheme must be http, https or mock"
            )));
        }
        Ok(BackendEndpoint {
            timeout_s: self.step_timeout_s(kind),
            max_retries: self.max_retries,
            backoff_ms: self.backoff_ms,
            ..BackendEndpoint::new(kind, url)
        })
    }

    pub fn budgets(&self) -> StepBudgets {
        StepBudgets {
            encode: Duration::from_secs_f64(self.encode_timeout_s),
            llm: Duration::from_secs_f64(self.llm_timeout_s),
            speech: Duration::from_secs_f64(self.tts_timeout_s),
            face: Duration::from_secs_f64(self.face_timeout_s),
        }
    }

    /// Effective settings with the token masked.
    pub fn redacted(&self) -> BTreeMap<String, toml::Value> {
        let mut copy = self.clone();
        if copy.bearer_token.is_some() {
            copy.bearer_token = Some("***".into());
        }
        match toml::Value::try_from(copy) {
            Ok(toml::Value::Table(t)) => t.into_iter().collect(),
            _ => BTreeMap::new(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn env(pairs: &[(&str, &str)]) -> Vec<(String, String)> {
        pairs.iter().map(|(k, v)| (k.to_string(), v.to_string())).collect()
    }

    #[test]
    fn file_then_env() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("empathyear.toml");
        std::fs::write(
            &path,
            "listen = \"0.0.0.0:9000\"\nmanifest = \"refs/references.json\"\nhistory_window = 4\n",
        )
        .unwrap();
        let c = ServiceConfig::load(
            Some(&path),
            env(&[
                ("EMPATHYEAR_HISTORY_WINDOW", "7"),
                ("EMPATHYEAR_BEARER_TOKEN", "s3cret"),
                ("EMPATHYEAR_TTS_URL", "mock://fail"),
                ("EMPATHYEAR_UNKNOWN", "x"),
                ("PATH", "/bin"),
            ]),
        )
        .unwrap();
        assert_eq!(c.listen, "0.0.0.0:9000");
        assert_eq!(c.history_window, 7);
        assert_eq!(c.bearer_token.as_deref(), Some("s3cret"));
        assert_eq!(
            c.manifest.as_deref(),
            Some(dir.path().join("refs/references.json").as_path())
        );
        assert_eq!(c.tts_url, "mock://fail");
        assert_eq!(c.redacted()["bearer_token"].as_str(), Some("***"));
    }

    #[test]
    fn rejects_bad_values() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.toml");
        std::fs::write(&path, "listen = \"nope\"\n").unwrap();
        assert!(matches!(
            ServiceConfig::load(Some(&path), env(&[])),
            Err(ConfigError::Invalid(_))
        ));
        std::fs::write(&path, "colour = 1\n").unwrap();
        assert!(matches!(
            ServiceConfig::load(Some(&path), env(&[])),
            Err(ConfigError::Parse { .. })
        ));
        std::fs::write(&path, "").unwrap();
        assert!(ServiceConfig::load(Some(&path), env(&[("EMPATHYEAR_LLM_URL", "ftp://x")])).is_err());
        assert!(ServiceConfig::load(Some(&path), env(&[("EMPATHYEAR_LLM_TIMEOUT_S", "0")])).is_err());
        assert!(ServiceConfig::load(Some(&dir.path().join("missing.toml")), env(&[])).is_err());
    }

    #[test]
    fn env_scalars() {
        assert_eq!(env_value("3"), toml::Value::Integer(3));
        assert_eq!(env_value("true"), toml::Value::Boolean(true));
        assert_eq!(env_value("mock://local"), toml::Value::String("mock://local".into()));
        assert_eq!(env_value("\"quoted\""), toml::Value::String("quoted".into()));
    }

    #[test]
    fn endpoint_policy() {
        let c = ServiceConfig {
            face_timeout_s: 7.5,
            max_retries: 1,
            ..ServiceConfig::default()
        };
        let e = c.endpoint(BackendKind::Face).unwrap();
        assert_eq!(e.timeout_s, 7.5);
        assert_eq!(e.max_retries, 1);
        assert!(e.is_mock());
        assert_eq!(c.budgets().face, Duration::from_millis(7500));
    }
}
