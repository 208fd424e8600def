//! `flintlet`: command-line client for the flintlet service.
//!
//! Every command except `serve` talks HTTP to a server. With no `--server`
//! (or `FLINTLET_URL`) the command starts a private server for its own
//! duration, backed by the on-disk store under `--data-dir`, so `gen`
//! followed by `run` works without a long-lived process.

use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};
use flintlet_client::{Client, URL_ENV};
use flintlet_core::api::{BenchRequest, ExplainRequest, GenRequest, Mode, Overrides, RunRequest};
use flintlet_core::harness::{FlintConfig, QueryId, Verdict};
use flintlet_core::store::ObjectStore;
use flintlet_server::AppState;

#[derive(Parser)]
#[command(
    name = "flintlet",
    version,
    about = "Serverless dataflow queries over a simulated cloud"
)]
struct Cli {
    /// Service base URL. When unset, a temporary local server is started.
    #[arg(long, env = URL_ENV, global = true)]
    server: Option<String>,

    /// Object store root for locally started servers.
    #[arg(long, default_value = ".flintlet", global = true)]
    data_dir: PathBuf,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic taxi dataset.
    Gen {
        #[arg(long, default_value_t = 100_000)]
        records: u64,
        #[arg(long, default_value_t = 42)]
        seed: u64,
        /// Destination, `bucket/prefix`.
        #[arg(long, default_value = "flint-data/taxi")]
        out: String,
        #[arg(long, default_value_t = 8)]
        parts: u32,
    },
    /// Run one query on the engine (checked against the oracle) or the oracle alone.
    Run {
        #[arg(long)]
        query: QueryId,
        #[arg(long, default_value = "flint")]
        mode: Mode,
        #[command(flatten)]
        common: Common,
        /// Write the JSON result here.
        #[arg(long)]
        report: Option<PathBuf>,
    },
    /// Run several queries and print the latency/cost table.
    Bench {
        /// Run Q0 through Q6 (the default when no --query is given).
        #[arg(long)]
        all: bool,
        #[arg(long = "query")]
        queries: Vec<QueryId>,
        #[command(flatten)]
        common: Common,
        /// Write the JSON report here.
        #[arg(long)]
        report: Option<PathBuf>,
    },
    /// Print a query's physical plan as JSON.
    Explain {
        #[arg(long)]
        query: QueryId,
        #[command(flatten)]
        common: Common,
    },
    /// Run the HTTP service in the foreground.
    Serve {
        #[arg(long, default_value = "127.0.0.1:8080")]
        addr: String,
        /// Server-wide default configuration.
        #[arg(long)]
        config: Option<PathBuf>,
    },
}

#[derive(Args)]
struct Common {
    /// Dataset location, `bucket/prefix`.
    #[arg(long)]
    input: Option<String>,
    /// Reduce fan-out for keyed queries.
    #[arg(long)]
    partitions: Option<u32>,
    /// JSON config with sections limits, queue, prices, harness.
    #[arg(long)]
    config: Option<PathBuf>,
}

impl Common {
    fn overrides(self) -> Result<Overrides> {
        Ok(Overrides {
            config: self.config.as_deref().map(load_config).transpose()?,
            input: self.input,
            partitions: self.partitions,
        })
    }
}

fn load_config(path: &Path) -> Result<FlintConfig> {
    FlintConfig::load(path).with_context(|| format!("loading {}", path.display()))
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let default_level = if matches!(cli.command, Command::Serve { .. }) {
        "info"
    } else {
        "warn"
    };
    tracing_subscriber::fmt()
        .with_env_filter(
            tracing_subscriber::EnvFilter::try_from_default_env()
                .unwrap_or_else(|_| tracing_subscriber::EnvFilter::new(default_level)),
        )
        .with_writer(std::io::stderr)
        .init();
    match real_main(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}

fn real_main(cli: Cli) -> Result<ExitCode> {
    if let Command::Serve { addr, config } = cli.command {
        let config = config
            .as_deref()
            .map(load_config)
            .transpose()?
            .unwrap_or_default();
        serve_foreground(&addr, &cli.data_dir, config)?;
        return Ok(ExitCode::SUCCESS);
    }

    let _local;
    let client = match cli.server {
        Some(url) => Client::new(url),
        None => {
            let server = LocalServer::start(&cli.data_dir)?;
            let client = Client::new(server.url.clone());
            _local = server;
            client
        }
    };

    match cli.command {
        Command::Gen {
            records,
            seed,
            out,
            parts,
        } => {
            let s = client.generate(&GenRequest {
                records,
                seed,
                out,
                parts,
            })?;
            println!(
                "wrote {} records ({} bytes) to {} in {} parts; weather table {}",
                s.records,
                s.bytes,
                s.location,
                s.parts.len(),
                s.weather
            );
            Ok(ExitCode::SUCCESS)
        }
        Command::Run {
            query,
            mode,
            common,
            report,
        } => {
            let r = client.run(&RunRequest {
                query,
                mode,
                overrides: common.overrides()?,
            })?;
            println!("{query} ({mode}): {}", query.title());
            println!("{}", serde_json::to_string_pretty(&r.answer)?);
            if let (Some(latency), Some(cost)) = (r.latency_s, &r.cost) {
                println!(
                    "latency {latency:.2} s, cost ${:.6}, {} invocations, {} queue calls",
                    cost.total, r.invocations, r.queue_calls
                );
            }
            if let Some(v) = r.verdict {
                match &r.first_difference {
                    Some(d) => println!("verdict {v}: {d}"),
                    None => println!("verdict {v}"),
                }
            }
            if let Some(path) = report {
                write_json(&path, &r)?;
            }
            Ok(exit_code([r.verdict.unwrap_or(Verdict::Ok)]))
        }
        Command::Bench {
            all,
            queries,
            common,
            report,
        } => {
            let queries = if all { QueryId::ALL.to_vec() } else { queries };
            let r = client.bench(&BenchRequest {
                queries,
                overrides: common.overrides()?,
            })?;
            print!("{}", r.render_table());
            if let Some(path) = report {
                write_json(&path, &r)?;
            }
            Ok(exit_code(r.queries.iter().map(|q| q.verdict)))
        }
        Command::Explain { query, common } => {
            let plan = client.explain(&ExplainRequest {
                query,
                overrides: common.overrides()?,
            })?;
            println!("{}", plan.to_json_pretty());
            Ok(ExitCode::SUCCESS)
        }
        Command::Serve { .. } => unreachable!(),
    }
}

fn exit_code(verdicts: impl IntoIterator<Item = Verdict>) -> ExitCode {
    if verdicts.into_iter().any(|v| v == Verdict::Mismatch) {
        ExitCode::from(1)
    } else {
        ExitCode::SUCCESS
    }
}

fn write_json(path: &Path, value: &impl serde::Serialize) -> Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    std::fs::write(path, text + "\n").with_context(|| format!("writing {}", path.display()))
}

fn state_for(data_dir: &Path, config: FlintConfig) -> Result<AppState> {
    let store = ObjectStore::on_disk(data_dir)
        .with_context(|| format!("opening store at {}", data_dir.display()))?;
    Ok(AppState::new(Arc::new(store), config))
}

fn serve_foreground(addr: &str, data_dir: &Path, config: FlintConfig) -> Result<()> {
    let state = state_for(data_dir, config)?;
    let rt = tokio::runtime::Runtime::new()?;
    rt.block_on(async {
        let listener = tokio::net::TcpListener::bind(addr)
            .await
            .with_context(|| format!("binding {addr}"))?;
        eprintln!("serving on http://{}", listener.local_addr()?);
        flintlet_server::serve(listener, state, async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await?;
        Ok(())
    })
}

/// A server on an ephemeral loopback port, stopped on drop.
struct LocalServer {
    url: String,
    stop: Option<tokio::sync::oneshot::Sender<()>>,
    thread: Option<std::thread::JoinHandle<()>>,
}

impl LocalServer {
    fn start(data_dir: &Path) -> Result<Self> {
        let state = state_for(data_dir, FlintConfig::default())?;
        let rt = tokio::runtime::Runtime::new()?;
        let listener = rt.block_on(tokio::net::TcpListener::bind("127.0.0.1:0"))?;
        let url = format!("http://{}", listener.local_addr()?);
        let (stop, stopped) = tokio::sync::oneshot::channel::<()>();
        let thread = std::thread::spawn(move || {
            let served = rt.block_on(flintlet_server::serve(listener, state, async {
                let _ = stopped.await;
            }));
            if let Err(e) = served {
                eprintln!("local server: {e}");
            }
        });
        Ok(LocalServer {
            url,
            stop: Some(stop),
            thread: Some(thread),
        })
    }
}

impl Drop for LocalServer {
    fn drop(&mut self) {
        if let Some(stop) = self.stop.take() {
            let _ = stop.send(());
        }
        if let Some(t) = self.thread.take() {
            let _ = t.join();
        }
    }
}
