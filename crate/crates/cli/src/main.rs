use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Context;
use clap::{Parser, Subcommand, ValueEnum};
use saeatlas_core::api::{ApiError, Explorer, ExplorerConfig, QueryRequest, QueryResponse};
use saeatlas_core::fixtures::{build_fixtures, DEFAULT_SEED};
use saeatlas_core::ingest::{ingest, IngestManifest};
use saeatlas_core::pack::load_packs;
use saeatlas_core::precompute::{precompute_pack, PrecomputeConfig};
use saeatlas_core::retrieval::LexiconRewriter;
use saeatlas_server::{AppState, ServeConfig};

#[derive(Parser)]
#[command(name = "saeatlas", version, about = "Explore sparse autoencoder features through explanations")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum Format {
    Json,
    Table,
}

#[derive(Subcommand)]
enum Command {
    /// Build the synthetic model, SAEs and packs used by the tests.
    Fixtures {
        #[arg(long, default_value = "fixtures")]
        out: PathBuf,
        #[arg(long, default_value_t = DEFAULT_SEED)]
        seed: u64,
    },
    /// Build a base pack from an ingest manifest.
    Ingest { manifest: PathBuf },
    /// Compute embeddings, layout, clusters and hexbins for a pack.
    Precompute {
        pack: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Rank SAEs and features for a free-text query.
    Query {
        #[arg(long, default_value = "packs")]
        packs: PathBuf,
        #[arg(long)]
        top_k: Option<usize>,
        #[arg(long, value_enum, default_value_t = Format::Json)]
        format: Format,
        #[arg(long)]
        use_suggestion: bool,
        text: String,
    },
    /// Serve the HTTP API.
    Serve {
        #[arg(long, default_value = "packs")]
        packs: PathBuf,
        #[arg(long, default_value = "127.0.0.1:8080")]
        bind: String,
        #[arg(long, default_value_t = 4)]
        workers: usize,
    },
    /// Answer one API request in-process and print the JSON response.
    Api {
        #[arg(long, default_value = "packs")]
        packs: PathBuf,
        method: String,
        /// Path with optional query string, e.g. /api/saes?q=plants
        target: String,
        #[arg(long)]
        body: Option<String>,
    },
}

enum Failure {
    Usage(String),
    Data(anyhow::Error),
}

impl From<anyhow::Error> for Failure {
    fn from(e: anyhow::Error) -> Self {
        Failure::Data(e)
    }
}

impl From<saeatlas_core::Error> for Failure {
    fn from(e: saeatlas_core::Error) -> Self {
        Failure::Data(e.into())
    }
}

fn main() -> ExitCode {
    tracing_subscriber::fmt()
        .with_env_filter(
            tracing_subscriber::EnvFilter::try_from_default_env().unwrap_or_else(|_| tracing_subscriber::EnvFilter::new("warn")),
        )
        .with_writer(std::io::stderr)
        .init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
        Err(Failure::Data(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}

fn explorer(packs: &PathBuf) -> Result<Explorer, Failure> {
    let registry = load_packs(packs).with_context(|| format!("loading packs from {}", packs.display()))?;
    for d in &registry.diagnostics {
        tracing::warn!("{d}");
    }
    Ok(Explorer::new(registry, Box::new(LexiconRewriter::bundled()), ExplorerConfig::default()))
}

fn print_json<T: serde::Serialize>(value: &T) -> Result<(), Failure> {
    println!("{}", serde_json::to_string_pretty(value).context("serializing output")?);
    Ok(())
}

fn api_failure(e: ApiError) -> Failure {
    let body = serde_json::to_string_pretty(&e.body).unwrap_or_default();
    if (400..500).contains(&e.status) {
        Failure::Usage(body)
    } else {
        Failure::Data(anyhow::anyhow!(body))
    }
}

fn run(command: Command) -> Result<(), Failure> {
    match command {
        Command::Fixtures { out, seed } => {
            let exp = build_fixtures(&out, seed).with_context(|| format!("building fixtures in {}", out.display()))?;
            print_json(&exp)
        }
        Command::Ingest { manifest } => {
            let m = IngestManifest::load(&manifest)?;
            print_json(&ingest(&m)?)
        }
        Command::Precompute { pack, seed } => {
            let config = PrecomputeConfig { seed, ..Default::default() };
            print_json(&precompute_pack(&pack, &config)?)
        }
        Command::Query { packs, top_k, format, use_suggestion, text } => {
            let ex = explorer(&packs)?;
            let resp = ex.query(&QueryRequest { text, use_suggestion, top_k }).map_err(api_failure)?;
            match format {
                Format::Json => print_json(&resp),
                Format::Table => {
                    print_table(&resp);
                    Ok(())
                }
            }
        }
        Command::Serve { packs, bind, workers } => {
            if workers == 0 {
                return Err(Failure::Usage("--workers must be at least 1".into()));
            }
            let ex = explorer(&packs)?;
            let rt = tokio::runtime::Runtime::new().context("starting runtime")?;
            rt.block_on(async move {
                let listener = saeatlas_server::bind(&bind).await.with_context(|| format!("cannot bind {bind}"))?;
                eprintln!("listening on {}", listener.local_addr().context("reading bound address")?);
                let state = AppState::new(ex, ServeConfig { workers });
                let shutdown = async {
                    let _ = tokio::signal::ctrl_c().await;
                };
                saeatlas_server::serve(listener, state, shutdown).await.context("server failed")?;
                Ok(())
            })
        }
        Command::Api { packs, method, target, body } => {
            let ex = explorer(&packs)?;
            let body = body.unwrap_or_default();
            let value = saeatlas_server::dispatch(&ex, &method, &target, body.as_bytes()).map_err(api_failure)?;
            print_json(&value)
        }
    }
}

fn print_table(resp: &QueryResponse) {
    println!("query: {}  (active: {})", resp.raw_text, resp.active_text);
    if resp.suggestion != resp.raw_text {
        println!("suggestion: {}", resp.suggestion);
    }
    println!();
    let ks: Vec<String> = resp.rankings.first().map(|r| r.per_k.iter().map(|p| format!("@{}", p.k)).collect()).unwrap_or_default();
    println!("{:<4} {:<16} {:>5} {:>8}  {}", "pos", "sae", "layer", "avg", ks.join(" "));
    for r in &resp.rankings {
        let cells: Vec<String> = r.per_k.iter().map(|p| format!("{}({})", p.count, p.rank)).collect();
        println!("{:<4} {:<16} {:>5} {:>8.3}  {}", r.position + 1, r.sae_id, r.layer_index, r.avg_rank, cells.join(" "));
    }
    println!();
    println!("{:<16} {:>7} {:>7}  {}", "sae", "feature", "score", "explanation");
    for h in &resp.top_hits {
        println!("{:<16} {:>7} {:>7.4}  {}", h.sae_id, h.feature_id, h.score, h.explanation);
    }
}
