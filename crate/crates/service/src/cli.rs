//! `empathyear` command line.

use std::ffi::OsString;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;

use clap::{Parser, Subcommand, ValueEnum};
use empathyear_core::meta_response::{DatagenEvent, DatagenRequest, SampleGenerator};
use empathyear_core::metrics::{eval_report, MetricsError};
use empathyear_core::retrieval::{ReferenceIndex, RetrievalError};
use tracing_subscriber::EnvFilter;

use crate::api::{router, AppState};
use crate::app::{build_backends, build_pipeline, load_taxonomy, manifest_paths, StartupError};
use crate::config::ServiceConfig;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Exit {
    Ok = 0,
    Usage = 1,
    Validation = 2,
    Runtime = 3,
}

impl From<Exit> for ExitCode {
    fn from(e: Exit) -> Self {
        ExitCode::from(e as u8)
    }
}

impl From<&StartupError> for Exit {
    fn from(e: &StartupError) -> Self {
        match e {
            StartupError::Validation(_) => Exit::Validation,
            StartupError::Runtime(_) => Exit::Runtime,
        }
    }
}

#[derive(Debug, Parser)]
#[command(
    name = "empathyear",
    version,
    about = "Avatar-based multimodal empathetic dialogue service"
)]
pub struct Cli {
    /// Config file (default: ./empathyear.toml when present).
    #[arg(long, global = true, value_name = "PATH")]
    pub config: Option<PathBuf>,
    /// More log output; repeat for more.
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    pub verbose: u8,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Run the HTTP API.
    Serve {
        #[arg(long, value_name = "ADDR")]
        listen: Option<String>,
        /// Accept a taxonomy file that differs from the bundled one.
        #[arg(long)]
        allow_custom_taxonomy: bool,
    },
    /// Reference index tools.
    Index {
        #[command(subcommand)]
        action: IndexCommand,
    },
    /// Generate instruction samples as JSON Lines.
    Datagen {
        #[arg(long)]
        count: usize,
        #[arg(long)]
        seed: u64,
        #[arg(long, value_name = "PATH")]
        out: PathBuf,
    },
    /// Score predictions against gold labels (Acc, Dist-1, Dist-2).
    Eval {
        #[arg(long, value_name = "PATH")]
        pred: PathBuf,
        #[arg(long, value_name = "PATH")]
        gold: PathBuf,
        #[arg(long, value_enum, default_value_t = Format::Table)]
        format: Format,
    },
}

#[derive(Debug, Subcommand)]
pub enum IndexCommand {
    /// Check a reference manifest and its media.
    Validate {
        #[arg(long, value_name = "PATH")]
        manifest: Option<PathBuf>,
        #[arg(long, value_name = "DIR")]
        media_root: Option<PathBuf>,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Format {
    Json,
    Table,
}

fn init_logging(verbose: u8, serve: bool) {
    let default = match (verbose, serve) {
        (0, true) => "info",
        (0, false) => "warn",
        (1, _) => "debug",
        _ => "trace",
    };
    let filter = EnvFilter::try_from_default_env().unwrap_or_else(|_| EnvFilter::new(default));
    let _ = tracing_subscriber::fmt()
        .with_env_filter(filter)
        .with_writer(std::io::stderr)
        .try_init();
}

fn fail(exit: Exit, message: impl std::fmt::Display) -> Exit {
    eprintln!("error: {message}");
    exit
}

/// Parses `args` and runs the command.
pub fn run<I, T>(args: I) -> Exit
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { Exit::Usage } else { Exit::Ok };
        }
    };
    init_logging(cli.verbose, matches!(cli.command, Command::Serve { .. }));
    let mut config = match ServiceConfig::from_env(cli.config.as_deref()) {
        Ok(c) => c,
        Err(e) => {
            let err = StartupError::from(e);
            return fail(Exit::from(&err), err);
        }
    };
    let runtime = match tokio::runtime::Builder::new_multi_thread().enable_all().build() {
        Ok(rt) => rt,
        Err(e) => return fail(Exit::Runtime, format!("starting runtime: {e}")),
    };
    match cli.command {
        Command::Serve {
            listen,
            allow_custom_taxonomy,
        } => {
            if let Some(listen) = listen {
                config.listen = listen;
            }
            config.allow_custom_taxonomy |= allow_custom_taxonomy;
            if let Err(e) = config.validate() {
                return fail(Exit::Validation, e);
            }
            runtime.block_on(serve(config))
        }
        Command::Index {
            action: IndexCommand::Validate { manifest, media_root },
        } => {
            if manifest.is_some() {
                config.manifest = manifest;
            }
            if media_root.is_some() {
                config.reference_root = media_root;
            }
            validate_index(&config)
        }
        Command::Datagen { count, seed, out } => runtime.block_on(datagen(&config, count, seed, &out)),
        Command::Eval { pred, gold, format } => eval(&config, &pred, &gold, format),
    }
}

async fn shutdown_signal() {
    let ctrl_c = async {
        let _ = tokio::signal::ctrl_c().await;
    };
    #[cfg(unix)]
    let term = async {
        match tokio::signal::unix::signal(tokio::signal::unix::SignalKind::terminate()) {
            Ok(mut s) => {
                s.recv().await;
            }
            Err(_) => std::future::pending().await,
        }
    };
    #[cfg(not(unix))]
    let term = std::future::pending::<()>();
    tokio::select! {
        _ = ctrl_c => {},
        _ = term => {},
    }
    tracing::info!("shutting down");
}

async fn serve(config: ServiceConfig) -> Exit {
    let pipeline = match build_pipeline(&config) {
        Ok(p) => p,
        Err(e) => return fail(Exit::from(&e), e),
    };
    let addr = match config.listen_addr() {
        Ok(a) => a,
        Err(e) => return fail(Exit::Validation, e),
    };
    let listener = match tokio::net::TcpListener::bind(addr).await {
        Ok(l) => l,
        Err(e) => return fail(Exit::Runtime, format!("binding {addr}: {e}")),
    };
    let local = listener
        .local_addr()
        .map(|a| a.to_string())
        .unwrap_or_else(|_| addr.to_string());
    tracing::info!(
        sessions = pipeline.sessions.session_ids().len(),
        speeches = pipeline.index.speeches().len(),
        faces = pipeline.index.faces().len(),
        "ready"
    );
    let state = AppState {
        pipeline,
        bearer_token: config.bearer_token.as_deref().map(Arc::from),
    };
    let app = router(state, config.static_dir.clone(), config.max_upload_mb * 1024 * 1024);
    // the one line on stdout, so callers can find an ephemeral port
    println!("listening on http://{local}");
    let _ = std::io::stdout().flush();
    match axum::serve(listener, app)
        .with_graceful_shutdown(shutdown_signal())
        .await
    {
        Ok(()) => Exit::Ok,
        Err(e) => fail(Exit::Runtime, format!("server: {e}")),
    }
}

fn validate_index(config: &ServiceConfig) -> Exit {
    let taxonomy = match load_taxonomy(config) {
        Ok(t) => t,
        Err(e) => return fail(Exit::from(&e), e),
    };
    let (manifest, root) = match manifest_paths(config) {
        Ok(p) => p,
        Err(e) => return fail(Exit::from(&e), e),
    };
    match ReferenceIndex::load(&manifest, &root, &taxonomy) {
        Ok(index) => {
            println!(
                "ok: {} speeches, {} faces (manifest sha256 {})",
                index.speeches().len(),
                index.faces().len(),
                index.manifest_hash()
            );
            Exit::Ok
        }
        Err(RetrievalError::ValidationFailed(report)) => {
            println!("{report}");
            fail(
                Exit::Validation,
                format!("{} has {} error(s)", manifest.display(), report.errors.len()),
            )
        }
        Err(e @ (RetrievalError::ManifestIo { .. } | RetrievalError::MediaIo { .. })) => fail(Exit::Runtime, e),
        Err(e) => fail(Exit::Validation, e),
    }
}

async fn datagen(config: &ServiceConfig, count: usize, seed: u64, out: &Path) -> Exit {
    if count == 0 {
        return fail(Exit::Usage, "--count must be at least 1");
    }
    let taxonomy = match load_taxonomy(config) {
        Ok(t) => t,
        Err(e) => return fail(Exit::from(&e), e),
    };
    let backends = match build_backends(config, &taxonomy) {
        Ok(b) => b,
        Err(e) => return fail(Exit::from(&e), e),
    };
    let mut generator = match SampleGenerator::new(DatagenRequest { count, seed }, &backends, &taxonomy) {
        Ok(g) => g,
        Err(e) => return fail(Exit::Usage, e),
    };
    let mut lines = String::new();
    let (mut written, mut skipped) = (0usize, 0usize);
    while let Some(event) = generator.next_event().await {
        match event {
            Ok(DatagenEvent::Sample(sample)) => {
                lines.push_str(&sample.to_json_line());
                lines.push('\n');
                written += 1;
            }
            Ok(DatagenEvent::Skipped(skip)) => {
                skipped += 1;
                eprintln!("skipped: {}", serde_json::to_string(&skip).unwrap_or_default());
            }
            Err(e) => return fail(Exit::Runtime, e),
        }
    }
    let tmp = out.with_extension("jsonl.partial");
    if let Err(e) = std::fs::write(&tmp, lines).and_then(|_| std::fs::rename(&tmp, out)) {
        return fail(Exit::Runtime, format!("writing {}: {e}", out.display()));
    }
    eprintln!("wrote {written} samples to {} ({skipped} skipped)", out.display());
    Exit::Ok
}

fn eval(config: &ServiceConfig, pred: &Path, gold: &Path, format: Format) -> Exit {
    let taxonomy = match load_taxonomy(config) {
        Ok(t) => t,
        Err(e) => return fail(Exit::from(&e), e),
    };
    match eval_report(pred, gold, &taxonomy) {
        Ok(report) => {
            match format {
                Format::Json => println!("{}", report.to_json()),
                Format::Table => println!("{}", report.to_table()),
            }
            Exit::Ok
        }
        Err(e @ MetricsError::Io { .. }) => fail(Exit::Runtime, e),
        Err(e) => fail(Exit::Validation, e),
    }
}
