use std::path::PathBuf;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};
use graphmot_cli::config::{Overrides, RunConfig};
use graphmot_cli::pipeline;

/// Online 3D multi-object tracking on synthetic scenes: a graph-transformer
/// tracker trained end to end, with a constant-velocity baseline and
/// CLEAR/AMOTA evaluation.
#[derive(Parser)]
#[command(name = "graphmot", version, max_term_width = 100)]
struct Cli {
    /// TOML run config; omitted sections use the benchmark preset.
    /// GRAPHMOT_SEED overrides its seed, GRAPHMOT_THREADS caps worker
    /// threads.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate a dataset: train/ and eval/ scene files plus a config echo.
    Simulate {
        /// Dataset directory to create.
        #[arg(long)]
        out: PathBuf,
        /// Overrides the config seed.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Train a tracker on a simulated dataset.
    Train {
        /// Dataset directory from `simulate`.
        #[arg(long)]
        data: PathBuf,
        /// Output directory: model.ckpt, train_log.csv, config echo.
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        flags: TrainFlags,
    },
    /// Run a tracker over detection files.
    Track {
        /// Checkpoint from `train`; the config it embeds drives the run.
        #[arg(long, required_unless_present = "baseline")]
        checkpoint: Option<PathBuf>,
        /// A *.det.jsonl file or a directory of them.
        #[arg(long)]
        detections: PathBuf,
        /// Output file (file input) or directory (directory input).
        #[arg(long)]
        out: PathBuf,
        /// Run the constant-velocity greedy baseline instead of a model.
        #[arg(long)]
        baseline: bool,
    },
    /// Score tracking output against ground truth.
    Eval {
        /// A *.trk.jsonl file or a directory of them.
        #[arg(long)]
        tracking: PathBuf,
        /// The matching *.gt.jsonl file or directory.
        #[arg(long)]
        gt: PathBuf,
        /// Output directory: metrics.json, curve CSVs and SVG charts.
        #[arg(long)]
        out: PathBuf,
    },
    /// Train and evaluate a grid of config variants on one dataset.
    Ablate {
        /// Grid TOML: [[variants]] with name and overrides.
        #[arg(long)]
        grid: PathBuf,
        /// Dataset directory from `simulate`.
        #[arg(long)]
        data: PathBuf,
        /// Output directory: ablation.csv plus per-cell artifacts.
        #[arg(long)]
        out: PathBuf,
    },
}

/// Config overrides exposed as flags; `--flag` sets true, `--flag false`
/// sets false, absence keeps the config value.
#[derive(Args)]
struct TrainFlags {
    /// Training seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Frames per training clip.
    #[arg(long)]
    clip_len: Option<usize>,
    /// Frames a track survives unmatched.
    #[arg(long)]
    max_age: Option<usize>,
    /// Hungarian assignment instead of greedy.
    #[arg(long, num_args = 0..=1, default_missing_value = "true")]
    hungarian: Option<bool>,
    /// Ground-truth-guided matching during training rollouts.
    #[arg(long, num_args = 0..=1, default_missing_value = "true")]
    gt_guided: Option<bool>,
    /// Reset track features instead of carrying them across frames.
    #[arg(long, num_args = 0..=1, default_missing_value = "true")]
    no_hidden_state: Option<bool>,
    /// Zero geometric edge features.
    #[arg(long, num_args = 0..=1, default_missing_value = "true")]
    zero_edge_features: Option<bool>,
    /// Fully connected association graph, ignoring gating radii.
    #[arg(long, num_args = 0..=1, default_missing_value = "true")]
    fully_connected: Option<bool>,
    /// Scale factor on all gating radii.
    #[arg(long)]
    radius_mult: Option<f64>,
    /// Velocity loss weight.
    #[arg(long)]
    lambda_v: Option<f64>,
    /// Decoder layers.
    #[arg(long)]
    layers: Option<usize>,
    /// Model width.
    #[arg(long)]
    dim: Option<usize>,
    /// Attention heads.
    #[arg(long)]
    heads: Option<usize>,
}

impl TrainFlags {
    fn overrides(&self) -> Overrides {
        Overrides {
            clip_len: self.clip_len,
            max_age: self.max_age,
            hungarian: self.hungarian,
            gt_guided: self.gt_guided,
            no_hidden_state: self.no_hidden_state,
            zero_edge_features: self.zero_edge_features,
            fully_connected: self.fully_connected,
            radius_mult: self.radius_mult,
            lambda_v: self.lambda_v,
            layers: self.layers,
            dim: self.dim,
            heads: self.heads,
            seed: self.seed,
        }
    }
}

fn load_config(path: &Option<PathBuf>) -> Result<Option<RunConfig>> {
    let mut cfg = match path {
        Some(p) => Some(RunConfig::load(p)?),
        None => None,
    };
    if let Some(c) = &mut cfg {
        c.apply_env()?;
    } else if std::env::var_os("GRAPHMOT_SEED").is_some() {
        let mut c = RunConfig::default();
        c.apply_env()?;
        cfg = Some(c);
    }
    Ok(cfg)
}

fn run() -> Result<()> {
    if let Ok(v) = std::env::var("GRAPHMOT_THREADS") {
        let n: usize = v
            .parse()
            .with_context(|| format!("GRAPHMOT_THREADS {v:?} is not a thread count"))?;
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .context("rayon pool")?;
    }
    let cli = Cli::parse();
    let cfg = load_config(&cli.config)?;

    match cli.cmd {
        Cmd::Simulate { out, seed } => {
            let mut cfg = cfg.unwrap_or_default();
            if let Some(s) = seed {
                cfg.seed = s;
            }
            let cfg = cfg.resolved(&Overrides::default())?;
            pipeline::cmd_simulate(&cfg, &out)?;
        }
        Cmd::Train { data, out, flags } => {
            let cfg = cfg.unwrap_or_default().resolved(&flags.overrides())?;
            pipeline::cmd_train(&cfg, &data, &out)?;
        }
        Cmd::Track {
            checkpoint,
            detections,
            out,
            baseline,
        } => {
            pipeline::cmd_track(cfg, checkpoint.as_deref(), &detections, &out, baseline)?;
        }
        Cmd::Eval { tracking, gt, out } => {
            let cfg = cfg.unwrap_or_default().resolved(&Overrides::default())?;
            let report = pipeline::cmd_eval(&cfg, &tracking, &gt, &out)?;
            println!("AMOTA {:.4}  AMOTP {:.4}", report.amota, report.amotp);
        }
        Cmd::Ablate { grid, data, out } => {
            let cfg = cfg.unwrap_or_default();
            pipeline::cmd_ablate(&cfg, &grid, &data, &out)?;
        }
    }
    Ok(())
}

fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .init();
    if let Err(e) = run() {
        eprintln!("error: {e:#}");
        std::process::exit(1);
    }
}
