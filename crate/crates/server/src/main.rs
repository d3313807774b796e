use std::net::SocketAddr;
use std::path::PathBuf;
use std::sync::Arc;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use prefcbf::campaign::CampaignConfig;
use prefcbf::grid::{Dimension, GridSpec};
use prefcbf::oracle::{
    campaign_plot_json, run_campaign, write_campaign_csv, SyntheticCampaignConfig,
};
use prefcbf::session::SessionStore;
use prefcbf::utility::{KernelConfig, LikelihoodConfig, ModelConfig};
use prefcbf_server::{router, DATA_DIR_ENV};
use tracing_subscriber::EnvFilter;

#[derive(Parser)]
#[command(
    name = "campaign",
    about = "Tune robust CBF parameters from preference feedback"
)]
struct Cli {
    /// Directory holding session folders.
    #[arg(long, global = true, env = DATA_DIR_ENV, default_value = "sessions")]
    data_dir: PathBuf,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Start a session from a config file and feed it automatically or over HTTP.
    Run(RunArgs),
    /// Serve existing sessions over HTTP.
    Serve {
        #[arg(long, default_value_t = 8080)]
        port: u16,
    },
    /// Write a session's dataset and report.
    Export {
        #[arg(long)]
        session: String,
        #[arg(long, value_enum, default_value_t = Format::Json)]
        format: Format,
        /// Output file; stdout when absent.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Synthetic-utility study comparing safety-aware and plain learners.
    Fig2(Fig2Args),
}

#[derive(Args)]
struct RunArgs {
    #[arg(long)]
    config: PathBuf,
    /// Answer every query with the configured automatic provider.
    #[arg(long, conflicts_with = "serve")]
    oracle: bool,
    /// Leave the session open for raters on this HTTP port.
    #[arg(long)]
    serve: bool,
    #[arg(long, default_value_t = 8080)]
    port: u16,
    /// Overrides the learner seed in the config.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct Fig2Args {
    /// Comma-separated ROI weights; `plain` runs without a region of interest.
    #[arg(
        long,
        value_delimiter = ',',
        allow_hyphen_values = true,
        default_value = "-0.5,plain"
    )]
    lambdas: Vec<String>,
    #[arg(long, default_value_t = 50)]
    runs: usize,
    #[arg(long, default_value_t = 30)]
    iterations: usize,
    /// Points per side of the square synthetic grid.
    #[arg(long, default_value_t = 30)]
    grid_size: usize,
    /// Kernel lengthscale in grid steps.
    #[arg(long, default_value_t = 1.0)]
    lengthscale: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Directory for `fig2.csv` and `fig2.json`.
    #[arg(long, default_value = "fig2")]
    out: PathBuf,
}

#[derive(Clone, Copy, ValueEnum)]
enum Format {
    Csv,
    Json,
}

#[tokio::main]
async fn main() -> Result<()> {
    tracing_subscriber::fmt()
        .with_env_filter(
            EnvFilter::try_from_default_env().unwrap_or_else(|_| EnvFilter::new("info")),
        )
        .with_writer(std::io::stderr)
        .init();
    let cli = Cli::parse();
    match cli.command {
        Command::Run(args) => run(&cli.data_dir, args).await,
        Command::Serve { port } => {
            let store = Arc::new(SessionStore::open(&cli.data_dir)?);
            serve(store, port).await
        }
        Command::Export {
            session,
            format,
            out,
        } => {
            let store = SessionStore::open(&cli.data_dir)?;
            let export = store.export(&session)?;
            let text = match format {
                Format::Json => serde_json::to_string_pretty(&export)?,
                Format::Csv => export.dataset_csv(),
            };
            match out {
                Some(path) => std::fs::write(&path, text)
                    .with_context(|| format!("writing {}", path.display()))?,
                None => print!("{text}"),
            }
            Ok(())
        }
        Command::Fig2(args) => tokio::task::spawn_blocking(move || fig2(args)).await?,
    }
}

async fn run(data_dir: &PathBuf, args: RunArgs) -> Result<()> {
    if !args.oracle && !args.serve {
        bail!("choose --oracle or --serve");
    }
    let text = std::fs::read_to_string(&args.config)
        .with_context(|| format!("reading {}", args.config.display()))?;
    let mut config = CampaignConfig::from_json(&text)?;
    if let Some(seed) = args.seed {
        config.learner.seed = seed;
    }
    let store = Arc::new(SessionStore::open(data_dir)?);
    let id = {
        let store = store.clone();
        tokio::task::spawn_blocking(move || store.create(config)).await??
    };
    eprintln!("session {id}");
    if args.serve {
        return serve(store, args.port).await;
    }
    let report = {
        let store = store.clone();
        let id = id.clone();
        tokio::task::spawn_blocking(move || store.drive(&id)).await??
    };
    let json = serde_json::to_string_pretty(&report)?;
    std::fs::write(store.session_dir(&id).join("report.json"), &json)?;
    println!("{json}");
    Ok(())
}

async fn serve(store: Arc<SessionStore>, port: u16) -> Result<()> {
    let addr = SocketAddr::from(([0, 0, 0, 0], port));
    let listener = tokio::net::TcpListener::bind(addr).await?;
    tracing::info!(%addr, data_dir = %store.root().display(), "listening");
    axum::serve(listener, router(store))
        .with_graceful_shutdown(async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await?;
    Ok(())
}

fn parse_lambda(s: &str) -> Result<Option<f64>> {
    match s.trim() {
        "plain" | "inf" | "+inf" => Ok(None),
        v => {
            let l: f64 = v.parse().with_context(|| format!("bad lambda `{v}`"))?;
            if l.is_nan() {
                bail!("bad lambda `{v}`");
            }
            Ok(Some(l))
        }
    }
}

fn fig2(args: Fig2Args) -> Result<()> {
    let mut lambdas = args
        .lambdas
        .iter()
        .map(|s| parse_lambda(s))
        .collect::<Result<Vec<_>>>()?;
    if !lambdas.contains(&None) {
        lambdas.push(None);
    }
    let n = args.grid_size;
    if n < 2 {
        bail!("grid size must be at least 2");
    }
    let cfg = SyntheticCampaignConfig {
        grid: GridSpec {
            dimensions: vec![
                Dimension::new("u", 0.0, (n - 1) as f64, 1.0),
                Dimension::new("w", 0.0, (n - 1) as f64, 1.0),
            ],
        },
        model: ModelConfig::new(
            KernelConfig::isotropic(2, args.lengthscale),
            LikelihoodConfig::default(),
        ),
        iterations: args.iterations,
        runs: args.runs,
        seed: args.seed,
        lambdas,
        ..SyntheticCampaignConfig::default()
    };
    let stats = run_campaign(&cfg)?;
    std::fs::create_dir_all(&args.out)?;
    write_campaign_csv(&stats, std::fs::File::create(args.out.join("fig2.csv"))?)?;
    std::fs::write(
        args.out.join("fig2.json"),
        serde_json::to_string_pretty(&campaign_plot_json(&stats))?,
    )?;
    println!("lambda      unsafe (mean ± se)    prediction error (mean ± se)");
    for s in &stats {
        let (Some(u), Some(e)) = (s.cumulative_unsafe.last(), s.prediction_error.last()) else {
            continue;
        };
        println!(
            "{:<10}  {:>7.2} ± {:<8.2}     {:>7.2} ± {:.2}",
            s.label(),
            u.mean,
            u.stderr,
            e.mean,
            e.stderr
        );
    }
    Ok(())
}
