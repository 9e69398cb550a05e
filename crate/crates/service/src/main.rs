use std::net::SocketAddr;
use std::path::PathBuf;
use std::sync::Arc;
use std::time::Duration;

use anyhow::Context;
use clap::{Parser, Subcommand};
use imagetalk_core::metrics::load_embeddings;
use imagetalk_core::{GenerateMode, SessionStore};
use imagetalk_service::{cli, serve, AppState, BackendArgs};
use tracing_subscriber::EnvFilter;

#[derive(Parser)]
#[command(name = "imagetalk", version, about = "Photo-and-keyword story generation")]
struct Cli {
    /// Log filter, e.g. `info` or `imagetalk_core=debug`.
    #[arg(long, global = true, default_value = "warn")]
    log: String,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the HTTP API.
    Serve {
        #[arg(long, default_value_t = 8080)]
        port: u16,
        /// Directory for session documents and image payloads.
        #[arg(long, default_value = "imagetalk-store")]
        store: PathBuf,
        /// Word vectors used by the metrics endpoint.
        #[arg(long)]
        embeddings: Option<PathBuf>,
        #[command(flatten)]
        backends: BackendArgs,
    },
    /// Generate a story for a session file.
    Generate {
        #[arg(long)]
        session: PathBuf,
        #[arg(long)]
        mode: GenerateMode,
        #[command(flatten)]
        backends: BackendArgs,
    },
    /// Score a dataset of sessions.
    Eval {
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long)]
        embeddings: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Also write per-item rows as CSV.
        #[arg(long)]
        csv: Option<PathBuf>,
    },
}

async fn run(cli: Cli) -> anyhow::Result<()> {
    match cli.command {
        Command::Serve {
            port,
            store,
            embeddings,
            backends,
        } => {
            let engine = backends.build_engine()?;
            let store = SessionStore::open(&store)?;
            let embeddings = embeddings.map(|p| load_embeddings(&p)).transpose()?.map(Arc::new);
            let state = AppState::new(engine, store, embeddings, Duration::from_millis(backends.timeout_ms));
            let addr = SocketAddr::from(([0, 0, 0, 0], port));
            let listener = tokio::net::TcpListener::bind(addr)
                .await
                .with_context(|| format!("binding {addr}"))?;
            tracing::info!(%addr, "listening");
            serve(listener, state, async {
                let _ = tokio::signal::ctrl_c().await;
            })
            .await?;
        }
        Command::Generate {
            session,
            mode,
            backends,
        } => {
            let text = cli::generate(&session, mode, &backends).await?;
            println!("{text}");
        }
        Command::Eval {
            dataset,
            embeddings,
            out,
            csv,
        } => {
            print!("{}", cli::eval(&dataset, &embeddings, &out, csv.as_deref())?);
        }
    }
    Ok(())
}

#[tokio::main]
async fn main() {
    let cli = Cli::parse();
    let filter = EnvFilter::try_new(&cli.log).unwrap_or_else(|_| EnvFilter::new("warn"));
    tracing_subscriber::fmt().with_env_filter(filter).with_writer(std::io::stderr).init();
    if let Err(e) = run(cli).await {
        eprintln!("error: {e:#}");
        std::process::exit(1);
    }
}
