mod commands;

use std::path::PathBuf;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use cqr_core::pipeline::PipelineConfig;

/// Reference-free preference data pipeline for conversational query reformulation.
#[derive(Debug, Parser)]
#[command(name = "cqr", version)]
struct Cli {
    #[command(flatten)]
    global: Global,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args)]
struct Global {
    /// TOML file with pipeline configuration; flags override its values.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[command(flatten)]
    overrides: Overrides,
    #[command(flatten)]
    backend: BackendArgs,
}

#[derive(Debug, Default, Args)]
struct Overrides {
    #[arg(long, global = true)]
    n_iters: Option<usize>,
    #[arg(long, global = true)]
    k_pseudo: Option<usize>,
    #[arg(long, global = true)]
    top_n: Option<usize>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[arg(long, global = true)]
    beta: Option<f64>,
    #[arg(long, global = true)]
    k1: Option<f64>,
    #[arg(long, global = true)]
    b: Option<f64>,
    #[arg(long, global = true)]
    n_rewrite: Option<usize>,
    #[arg(long, global = true)]
    n_expand: Option<usize>,
    /// Initial reformulation model ref.
    #[arg(long, global = true)]
    model: Option<String>,
    #[arg(long, global = true)]
    regenerate_candidates: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Backend {
    Mock,
    Openai,
}

#[derive(Debug, Args)]
struct BackendArgs {
    #[arg(long, global = true, value_enum, default_value = "mock")]
    backend: Backend,
    /// Base URL of an OpenAI-compatible server.
    #[arg(long, global = true, default_value = "http://localhost:8000/v1")]
    base_url: String,
    /// Environment variable holding the API key.
    #[arg(long, global = true, default_value = cqr_core::lm_client::DEFAULT_KEY_VAR)]
    api_key_env: String,
    #[arg(long, global = true, default_value_t = 0)]
    mock_seed: u64,
    #[arg(long, global = true, default_value_t = 8)]
    max_in_flight: usize,
    /// Append every LM request and response to this JSONL file.
    #[arg(long, global = true)]
    request_log: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Split documents (`{"id", "text"}` JSONL) into overlapping character chunks.
    Chunk {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        output: PathBuf,
        #[arg(long, default_value_t = 500)]
        size: usize,
        #[arg(long, default_value_t = 100)]
        overlap: usize,
    },
    /// Build and save a BM25 index over a passage file.
    Index {
        #[arg(long)]
        passages: PathBuf,
        #[arg(long)]
        output: PathBuf,
    },
    /// Sample candidate reformulations for every turn.
    Candidates {
        #[command(flatten)]
        data: DataArgs,
        #[arg(long)]
        output: PathBuf,
    },
    /// Retrieve pseudo references from responses, optionally refined by a model.
    Pseudo {
        #[command(flatten)]
        data: DataArgs,
        /// Model used to refine responses; without it responses are used raw.
        #[arg(long)]
        refine_model: Option<String>,
        #[arg(long, default_value_t = 0)]
        iteration: usize,
        #[arg(long)]
        output: PathBuf,
    },
    /// Rank candidates against pseudo references into preference feedback.
    Prefs {
        #[command(flatten)]
        data: DataArgs,
        #[arg(long)]
        candidates: PathBuf,
        #[arg(long)]
        pseudo: PathBuf,
        #[arg(long)]
        output: PathBuf,
    },
    /// Write SFT and DPO files from preference feedback.
    Export {
        #[arg(long)]
        conversations: PathBuf,
        #[arg(long)]
        feedback: PathBuf,
        #[arg(long)]
        out_dir: PathBuf,
        #[arg(long, default_value_t = 0)]
        iteration: usize,
    },
    /// Run the full iterative loop into a fresh artifact directory.
    Run {
        #[command(flatten)]
        data: DataArgs,
        #[command(flatten)]
        trainer: TrainerArgs,
        #[arg(long)]
        out_dir: PathBuf,
    },
    /// Continue an interrupted run.
    Resume {
        #[command(flatten)]
        data: DataArgs,
        #[command(flatten)]
        trainer: TrainerArgs,
        #[arg(long)]
        out_dir: PathBuf,
    },
    /// Score reformulations (`{"session_id", "turn", "text"}` JSONL) against gold references.
    EvalRetrieval {
        #[command(flatten)]
        data: DataArgs,
        #[arg(long)]
        reformulations: PathBuf,
        /// Per-turn JSONL report.
        #[arg(long)]
        output: PathBuf,
        #[arg(long)]
        csv: Option<PathBuf>,
    },
    /// Pseudo reference accuracy per iteration of a run.
    EvalPseudo {
        #[arg(long)]
        conversations: PathBuf,
        #[arg(long)]
        passages: Option<PathBuf>,
        #[arg(long)]
        run_dir: PathBuf,
        #[arg(long)]
        csv: PathBuf,
    },
    /// Denoising simulation on synthetic expansion graphs, with the closed-form bounds.
    SimulateBounds {
        #[arg(long, default_value_t = 2000)]
        n: usize,
        #[arg(long, default_value_t = 6.0)]
        c: f64,
        #[arg(long, default_value_t = 0.01)]
        mu: f64,
        #[arg(long, default_value_t = 0.3)]
        err: f64,
        #[arg(long, default_value_t = 10)]
        labels: usize,
        #[arg(long, default_value_t = 30)]
        seeds: u64,
        #[arg(long, default_value_t = 0.0)]
        skew: f64,
        #[arg(long)]
        output: PathBuf,
    },
}

#[derive(Debug, Clone, Args)]
struct DataArgs {
    #[arg(long)]
    passages: PathBuf,
    #[arg(long)]
    conversations: PathBuf,
    /// Load a saved index instead of building one from the passages.
    #[arg(long)]
    index: Option<PathBuf>,
    /// Directory holding `rewrite.txt` and `expand.txt` prompt templates.
    #[arg(long)]
    prompts: Option<PathBuf>,
}

#[derive(Debug, Clone, Args)]
struct TrainerArgs {
    /// External trainer command; its arguments follow after `--trainer-arg`.
    /// Without it the model is left unchanged.
    #[arg(long)]
    trainer_cmd: Option<String>,
    #[arg(long = "trainer-arg", allow_hyphen_values = true)]
    trainer_args: Vec<String>,
}

fn load_config(global: &Global) -> Result<PipelineConfig> {
    let mut cfg = match &global.config {
        Some(path) => {
            let text = std::fs::read_to_string(path)
                .with_context(|| format!("reading {}", path.display()))?;
            toml::from_str(&text).with_context(|| format!("parsing {}", path.display()))?
        }
        None => PipelineConfig::default(),
    };
    let o = &global.overrides;
    if let Some(v) = o.n_iters {
        cfg.n_iters = v;
    }
    if let Some(v) = o.k_pseudo {
        cfg.k_pseudo = v;
    }
    if let Some(v) = o.top_n {
        cfg.top_n = v;
    }
    if let Some(v) = o.seed {
        cfg.seed = v;
    }
    if let Some(v) = o.beta {
        cfg.loss.beta = v;
    }
    if let Some(v) = o.k1 {
        cfg.index.k1 = v;
    }
    if let Some(v) = o.b {
        cfg.index.b = v;
    }
    if let Some(v) = o.n_rewrite {
        cfg.candidates.n_rewrite = v;
    }
    if let Some(v) = o.n_expand {
        cfg.candidates.n_expand = v;
    }
    if let Some(v) = &o.model {
        cfg.models.initial = v.clone();
    }
    if o.regenerate_candidates {
        cfg.regenerate_candidates = true;
    }
    if let Err(e) = cfg.validate() {
        bail!("invalid configuration: {e}");
    }
    Ok(cfg)
}

fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    if let Err(e) = commands::dispatch(cli) {
        eprintln!("error: {e:#}");
        std::process::exit(1);
    }
}
