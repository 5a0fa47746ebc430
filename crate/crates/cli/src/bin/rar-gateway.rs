use std::path::PathBuf;
use std::time::Duration;

use anyhow::Context;
use clap::Parser;
use rar_core::memory::MemoryStore;
use rar_core::model::RarConfig;
use rar_core::DeploymentSpec;
use tokio::net::TcpListener;

/// HTTP gateway routing requests between a weak and a strong model.
#[derive(Parser, Debug)]
#[command(version)]
struct Args {
    #[arg(long, env = "RAR_LISTEN", default_value = "127.0.0.1:8080")]
    listen: String,
    /// Engine configuration (JSON). Defaults apply when omitted.
    #[arg(long, env = "RAR_CONFIG")]
    config: Option<PathBuf>,
    /// Memory file: loaded at startup if it exists, written on shutdown.
    #[arg(long, env = "RAR_MEMORY")]
    memory: Option<PathBuf>,
    /// Backend description (JSON). Defaults to synthetic models.
    #[arg(long, env = "RAR_BACKENDS")]
    backends: Option<PathBuf>,
    /// Upper bound on how long /v1/drain and shutdown wait for shadow work.
    #[arg(long, env = "RAR_DRAIN_TIMEOUT_SECS", default_value_t = 30)]
    drain_timeout_secs: u64,
}

async fn shutdown_signal() {
    let ctrl_c = async {
        let _ = tokio::signal::ctrl_c().await;
    };
    #[cfg(unix)]
    let terminate = async {
        match tokio::signal::unix::signal(tokio::signal::unix::SignalKind::terminate()) {
            Ok(mut s) => {
                s.recv().await;
            }
            Err(_) => std::future::pending().await,
        }
    };
    #[cfg(not(unix))]
    let terminate = std::future::pending::<()>();
    tokio::select! {
        _ = ctrl_c => {}
        _ = terminate => {}
    }
}

#[tokio::main]
async fn main() -> anyhow::Result<()> {
    rar_cli::init_logging();
    let args = Args::parse();
    let config = match &args.config {
        Some(path) => RarConfig::load(path).with_context(|| format!("loading {}", path.display()))?,
        None => RarConfig::default(),
    };
    let deployment = match &args.backends {
        Some(path) => DeploymentSpec::load(path).with_context(|| format!("loading {}", path.display()))?,
        None => DeploymentSpec::default(),
    };
    let memory = match &args.memory {
        Some(path) if path.exists() => {
            Some(MemoryStore::load(config.embedding_dim, path).with_context(|| format!("loading {}", path.display()))?)
        }
        _ => None,
    };
    let engine = deployment.engine(config, memory)?;
    let listener = TcpListener::bind(&args.listen)
        .await
        .with_context(|| format!("binding {}", args.listen))?;
    tracing::info!(addr = %listener.local_addr()?, "listening");

    let drain_timeout = Duration::from_secs(args.drain_timeout_secs);
    rar_cli::gateway::serve(listener, engine.clone(), drain_timeout, shutdown_signal()).await?;

    if tokio::time::timeout(drain_timeout, engine.quiesce()).await.is_err() {
        tracing::warn!(
            pending = engine.pending_shadows(),
            "shutting down with shadow work pending"
        );
    }
    if let Some(path) = &args.memory {
        engine
            .memory_snapshot()
            .persist(path)
            .with_context(|| format!("writing {}", path.display()))?;
        tracing::info!(entries = engine.memory_len(), path = %path.display(), "memory saved");
    }
    Ok(())
}
