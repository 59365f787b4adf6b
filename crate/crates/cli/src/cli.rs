//! Command-line surface. Flags override values from the config file.

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};
use crossview_heat::eval::Modality;

use crate::config::RunConfig;
use crate::error::{CliError, Result};
use crate::pipeline::{Pipeline, RunManifest, Stage, StageOutput};
use crate::stages::associate_files;

#[derive(Debug, Parser)]
#[command(name = "crossview-heat", version, about = "Cross-view building attributes and their thermal association")]
pub struct Cli {
    #[command(flatten)]
    pub global: GlobalArgs,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct GlobalArgs {
    /// TOML run configuration.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Upper bound on worker threads.
    #[arg(long, global = true)]
    pub jobs: Option<usize>,
    /// Single-threaded, seed-determined execution.
    #[arg(long, global = true)]
    pub deterministic: bool,
    /// Output directory (overrides `output_dir`).
    #[arg(long, global = true)]
    pub out_dir: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic scene under `<output_dir>/scene`.
    Synth,
    /// Match captures, test visibility and cut chip pairs.
    Pair {
        #[arg(long)]
        max_distance: Option<f64>,
        #[arg(long)]
        pad_deg: Option<f64>,
    },
    /// Brightness, neighbour distance and zonal TIR per pair.
    Features,
    /// Spatial cross-validation of every modality.
    Train {
        /// multi, sv or uav; repeatable.
        #[arg(long = "modality", value_parser = parse_modality)]
        modalities: Vec<Modality>,
        #[arg(long)]
        folds: Option<usize>,
    },
    /// Re-score held-out folds from saved checkpoints.
    Eval {
        #[arg(long)]
        checkpoints: Option<PathBuf>,
    },
    /// Statistical tests of predicted attributes against TIR.
    Associate {
        /// Feature table (`features.csv`); with `--predictions` runs standalone.
        #[arg(long, requires = "predictions")]
        manifest: Option<PathBuf>,
        #[arg(long, requires = "manifest")]
        predictions: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Every stage in order.
    RunAll,
}

fn parse_modality(s: &str) -> std::result::Result<Modality, String> {
    Modality::from_key(s).ok_or_else(|| format!("unknown modality `{s}` (expected multi, sv or uav)"))
}

impl Command {
    pub fn name(&self) -> &'static str {
        match self {
            Command::Synth => "synth",
            Command::Pair { .. } => "pair",
            Command::Features => "features",
            Command::Train { .. } => "train",
            Command::Eval { .. } => "eval",
            Command::Associate { .. } => "associate",
            Command::RunAll => "run-all",
        }
    }

    fn last_stage(&self) -> Stage {
        match self {
            Command::Synth => Stage::Synth,
            Command::Pair { .. } => Stage::Pair,
            Command::Features => Stage::Features,
            Command::Train { .. } => Stage::Train,
            Command::Eval { .. } => Stage::Eval,
            Command::Associate { .. } | Command::RunAll => Stage::Associate,
        }
    }
}

/// Resolved configuration: the file (or defaults) with flag overrides applied.
pub fn resolve_config(cli: &Cli) -> Result<RunConfig> {
    let mut cfg = match &cli.global.config {
        Some(path) => RunConfig::load(path)?,
        None => {
            let mut c = RunConfig::default();
            let cwd = std::env::current_dir().map_err(|e| CliError::io(".", e))?;
            c.resolve_paths(&cwd);
            c
        }
    };
    let g = &cli.global;
    if let Some(s) = g.seed {
        cfg.seed = s;
    }
    if let Some(j) = g.jobs {
        cfg.jobs = j.max(1);
    }
    if g.deterministic {
        cfg.deterministic = true;
    }
    if cfg.deterministic {
        cfg.jobs = 1;
    }
    if let Some(o) = &g.out_dir {
        cfg.output_dir = o.clone();
    }
    match &cli.command {
        Command::Synth if cfg.synth.is_none() => cfg.synth = Some(Default::default()),
        Command::Pair { max_distance, pad_deg } => {
            if let Some(d) = max_distance {
                cfg.pairing.max_match_distance = *d;
            }
            if let Some(p) = pad_deg {
                cfg.pairing.pad_deg = *p;
            }
        }
        Command::Train { modalities, folds } => {
            if !modalities.is_empty() {
                cfg.train.modalities = modalities.clone();
            }
            if let Some(k) = folds {
                cfg.train.folds = *k;
            }
        }
        _ => {}
    }
    Ok(cfg)
}

pub enum Outcome {
    Pipeline(RunManifest),
    Standalone(StageOutput),
}

/// Run a parsed command line.
pub fn execute(cli: &Cli) -> Result<Outcome> {
    let cfg = resolve_config(cli)?;
    if cfg.deterministic {
        // takes effect only before the global thread pool first starts
        std::env::set_var("RAYON_NUM_THREADS", "1");
    }
    if let Command::Associate {
        manifest: Some(features),
        predictions: Some(predictions),
        out,
    } = &cli.command
    {
        let out = out.clone().unwrap_or_else(|| cfg.output_dir.join("associate"));
        return associate_files(features, predictions, &out, &cfg.associate).map(Outcome::Standalone);
    }
    let mut pipeline = Pipeline::new(cfg, cli.command.name())?;
    if let Command::Eval { checkpoints } = &cli.command {
        pipeline.checkpoints = checkpoints.clone();
    }
    let manifest = pipeline.run_through(cli.command.last_stage())?;
    if let Command::Associate { out: Some(out), .. } = &cli.command {
        copy_dir(&pipeline.stage_dir(Stage::Associate), out)?;
    }
    Ok(Outcome::Pipeline(manifest))
}

fn copy_dir(from: &std::path::Path, to: &std::path::Path) -> Result<()> {
    std::fs::create_dir_all(to).map_err(|e| CliError::io(to, e))?;
    let entries = std::fs::read_dir(from).map_err(|e| CliError::io(from, e))?;
    for e in entries {
        let e = e.map_err(|err| CliError::io(from, err))?;
        let target = to.join(e.file_name());
        std::fs::copy(e.path(), &target).map_err(|err| CliError::io(&target, err))?;
    }
    Ok(())
}
