use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use latentprobe::config::{OracleEndpoint, RunConfig, RUN_CONFIG_FILE};
use latentprobe::dataset::Dataset;
use latentprobe::oracle::server::{http_router, serve_lines};
use latentprobe::oracle::synthetic::{SyntheticWorld, DEFAULT_DISTANCE_NORMALIZER};
use latentprobe::pipeline;

#[derive(Parser)]
#[command(name = "latentprobe", version, about = "Probe a black-box decision model with latent-space samples and human ratings")]
struct Cli {
    #[command(flatten)]
    global: Global,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Global {
    /// Dataset root.
    #[arg(long, global = true)]
    dataset: Option<PathBuf>,
    /// Master seed for every random stream.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Use the built-in synthetic generator and decision models.
    #[arg(long, global = true)]
    synthetic: bool,
    /// Run configuration (JSON). Defaults to <dataset>/run_config.json when present.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Repeat for more log output.
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,
}

#[derive(Subcommand)]
enum Command {
    /// Plan, optimize and materialize batches. Resumes unfinished work.
    Generate {
        #[arg(long, default_value_t = 1)]
        batches: usize,
        /// Latent dimension (512 unless configured).
        #[arg(long)]
        dim: Option<usize>,
    },
    /// Score every pair with the configured decision models.
    Score {
        /// Comma-separated model names; defaults to the configured list.
        #[arg(long, value_delimiter = ',')]
        models: Vec<String>,
        /// Query again for pairs whose score is recorded as missing.
        #[arg(long)]
        retry_missing: bool,
        /// Merge an external pair_id,model_name,distance table instead.
        #[arg(long)]
        import: Option<PathBuf>,
    },
    /// Run the rating study service.
    Serve {
        #[arg(long)]
        host: Option<String>,
        #[arg(long)]
        port: Option<u16>,
        #[arg(long)]
        target_per_batch: Option<usize>,
        #[arg(long)]
        expiry_minutes: Option<i64>,
        /// Directory with the rating UI bundle.
        #[arg(long)]
        static_dir: Option<PathBuf>,
    },
    /// Rate the study with synthetic participants through its HTTP API.
    Simulate {
        #[arg(long, default_value_t = 10)]
        participants: usize,
        /// A running study service; by default one is started in-process.
        #[arg(long)]
        url: Option<String>,
        /// Perception noise as a fraction of the similarity scale.
        #[arg(long)]
        noise: Option<f64>,
    },
    /// Compute report.json and the distribution tables.
    Analyze {
        #[arg(long)]
        model: Option<String>,
        #[arg(long)]
        top_k: Option<usize>,
        /// Correlate individual ratings rather than per-pair means.
        #[arg(long)]
        per_rating: bool,
        #[arg(long, default_value = "report.json")]
        out: PathBuf,
    },
    /// Write canonical ratings.csv, scores.csv, pairs.csv and manifest.json.
    Export {
        #[arg(long)]
        out: PathBuf,
    },
    /// Host the synthetic oracle over stdio, or over HTTP with --http.
    #[command(hide = true)]
    Oracle {
        #[arg(long)]
        dim: Option<usize>,
        #[arg(long)]
        normalizer: Option<f64>,
        #[arg(long)]
        http: Option<SocketAddr>,
    },
}

/// Explicit --config, else the dataset's persisted config, else defaults.
/// The second value says whether the oracle came from a file.
fn load_config(g: &Global) -> Result<(RunConfig, bool)> {
    let dataset = g.dataset.clone().unwrap_or_else(|| RunConfig::default().dataset);
    let persisted = dataset.join(RUN_CONFIG_FILE);
    let source = match &g.config {
        Some(p) => Some(p.clone()),
        None if persisted.exists() => Some(persisted),
        None => None,
    };
    let (mut config, from_file) = match &source {
        Some(p) => {
            let text = std::fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
            let raw: serde_json::Value =
                serde_json::from_str(&text).with_context(|| format!("parsing {}", p.display()))?;
            let has_oracle = raw.get("oracle").is_some();
            (RunConfig::load(p)?, has_oracle)
        }
        None => (RunConfig::default(), false),
    };
    if g.dataset.is_some() || source.as_deref() != g.config.as_deref() {
        config.dataset = dataset;
    }
    if let Some(seed) = g.seed {
        config.seed = seed;
    }
    if g.synthetic && !config.oracle.is_synthetic() {
        config.oracle = OracleEndpoint::Synthetic { distance_normalizer: DEFAULT_DISTANCE_NORMALIZER };
    }
    Ok((config, from_file || g.synthetic))
}

fn require_oracle(config: &RunConfig, explicit: bool) -> Result<()> {
    if !explicit {
        bail!(
            "no oracle configured: pass --synthetic for the built-in models, or set \"oracle\" in a --config file \
             (kind \"process\" with a program, or kind \"http\" with a url)"
        );
    }
    config.validate().map_err(anyhow::Error::msg)
}

fn print_json(value: &impl serde::Serialize) {
    println!("{}", serde_json::to_string_pretty(value).expect("serializable"));
}

fn run(cli: Cli) -> Result<()> {
    let (mut config, explicit_oracle) = load_config(&cli.global)?;
    match cli.command {
        Command::Generate { batches, dim } => {
            if let Some(d) = dim {
                config.sampler.dim = d;
            }
            require_oracle(&config, explicit_oracle)?;
            let r = pipeline::generate(&config, batches)?;
            eprintln!("generated {} batches in {:.1}s", r.batches_generated, r.elapsed.as_secs_f64());
            print_json(&r);
        }
        Command::Score { models, retry_missing, import } => {
            if let Some(path) = import {
                let _lock = pipeline::lock_dataset(&config.dataset)?;
                let bytes = std::fs::read(&path).with_context(|| format!("reading {}", path.display()))?;
                let n = Dataset::open(&config.dataset)?.import_scores(&bytes, &path)?;
                println!("imported {n} score rows from {}", path.display());
                return Ok(());
            }
            require_oracle(&config, explicit_oracle)?;
            let models = if models.is_empty() { config.score_models.clone() } else { models };
            print_json(&pipeline::score(&config, &models, retry_missing)?);
        }
        Command::Serve { host, port, target_per_batch, expiry_minutes, static_dir } => {
            if let Some(n) = target_per_batch {
                config.study.target_per_batch = n;
            }
            if let Some(m) = expiry_minutes {
                config.study.expiry_minutes = m;
            }
            if static_dir.is_some() {
                config.study.static_dir = static_dir;
            }
            let port = port.unwrap_or(config.study.port);
            let host = host.unwrap_or_else(|| "127.0.0.1".into());
            let addr: SocketAddr =
                format!("{host}:{port}").parse().with_context(|| format!("invalid listen address {host}:{port}"))?;
            config.validate().map_err(anyhow::Error::msg)?;
            pipeline::serve(&config, addr)?;
        }
        Command::Simulate { participants, url, noise } => {
            if let Some(n) = noise {
                config.rater.noise_sd = n;
            }
            config.validate().map_err(anyhow::Error::msg)?;
            print_json(&pipeline::simulate(&config, participants, url.as_deref())?);
        }
        Command::Analyze { model, top_k, per_rating, out } => {
            if let Some(m) = model {
                config.analysis.model = m;
            }
            if let Some(k) = top_k {
                config.analysis.top_k = k;
            }
            config.analysis.per_rating |= per_rating;
            let result = pipeline::analyze(&config, &out)?;
            for f in &result.files {
                println!("wrote {}", f.display());
            }
            if let Some(e) = &result.report.disagreement.error {
                log::warn!("disagreement ranking skipped: {e}");
            }
        }
        Command::Export { out } => {
            for f in pipeline::export(&config, &out)? {
                println!("wrote {}", f.display());
            }
        }
        Command::Oracle { dim, normalizer, http } => oracle(&config, dim, normalizer, http)?,
    }
    Ok(())
}

fn oracle(config: &RunConfig, dim: Option<usize>, normalizer: Option<f64>, http: Option<SocketAddr>) -> Result<()> {
    let normalizer = normalizer.unwrap_or(match config.oracle {
        OracleEndpoint::Synthetic { distance_normalizer } => distance_normalizer,
        _ => DEFAULT_DISTANCE_NORMALIZER,
    });
    let root: &Path = &config.dataset;
    let world = SyntheticWorld::new(root, dim.unwrap_or(config.sampler.dim), normalizer);
    match http {
        None => {
            let stdin = std::io::stdin().lock();
            serve_lines(&world, stdin, std::io::stdout().lock())?;
        }
        Some(addr) => {
            let rt = tokio::runtime::Runtime::new()?;
            rt.block_on(async move {
                let listener = tokio::net::TcpListener::bind(addr).await?;
                eprintln!("oracle listening on http://{}", listener.local_addr()?);
                axum::serve(listener, http_router(Arc::new(world))).await
            })?;
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.global.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
