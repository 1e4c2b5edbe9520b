//! `scenic`: curate a corpus, aggregate ratings, train the assessor and rank
//! images, one subcommand per step. Every step reads the same config file.

mod artifacts;
mod config;
mod pipeline;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use scenic::model::Stage;
use scenic::scoring::Combine;
use scenic::Dimension;

use config::PipelineConfig;
use pipeline::Ctx;

#[derive(Parser)]
#[command(name = "scenic", version, about = "Beautifulness and happiness assessment pipeline")]
struct Cli {
    /// Pipeline config (TOML). Defaults apply when omitted.
    #[arg(short, long, global = true)]
    config: Option<PathBuf>,
    /// Override any config key, e.g. `--set train.global.epochs=20`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    set: Vec<String>,
    /// Work directory (paths.work).
    #[arg(long, global = true)]
    work: Option<PathBuf>,
    /// Master seed (seed).
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Filter the corpus by geometry and drop near-duplicates.
    Curate {
        /// Image directory (paths.corpus).
        #[arg(long)]
        corpus: Option<PathBuf>,
    },
    /// Validate raw ratings.
    Ingest {
        /// Rating table (paths.ratings).
        #[arg(long)]
        ratings: Option<PathBuf>,
    },
    /// Remove outlier ratings and average the rest into labels.
    Clean,
    /// Score distribution report, plus rater attribute breakdown when profiles are given.
    Stats {
        /// Score table to summarise instead of the cleaned labels (paths.scores).
        #[arg(long)]
        scores: Option<PathBuf>,
        /// Rater profile table (paths.profiles).
        #[arg(long)]
        profiles: Option<PathBuf>,
    },
    /// Draw reference and input splits.
    Split {
        /// scoring.dimension
        #[arg(long)]
        dimension: Option<Dimension>,
    },
    /// Build the reference retrieval index.
    Index {
        #[arg(long)]
        dimension: Option<Dimension>,
        /// Precomputed feature table (retrieval.features).
        #[arg(long)]
        features: Option<PathBuf>,
    },
    /// Train one stage: 1 global, 2 local, 3 emotion.
    Train {
        #[arg(long, value_parser = clap::value_parser!(u8).range(1..=3))]
        stage: u8,
        #[arg(long)]
        dimension: Option<Dimension>,
    },
    /// Score the input-test split and write metrics and the comparison table.
    Evaluate {
        #[arg(long)]
        dimension: Option<Dimension>,
        /// scoring.threshold
        #[arg(long)]
        threshold: Option<f64>,
    },
    /// Score individual images or directories.
    Score {
        #[arg(long)]
        dimension: Option<Dimension>,
        #[arg(required = true)]
        images: Vec<PathBuf>,
    },
    /// Rank every image in a directory.
    Rank {
        dir: PathBuf,
        /// scoring.top_k
        #[arg(short, long)]
        k: Option<usize>,
        /// scoring.combine: beauty, happy or both
        #[arg(long)]
        combine: Option<Combine>,
    },
}

fn path_value(p: &std::path::Path) -> toml::Value {
    toml::Value::String(p.display().to_string())
}

fn flag_overrides(cli: &Cli) -> Vec<(&'static str, toml::Value)> {
    let mut f: Vec<(&'static str, toml::Value)> = Vec::new();
    if let Some(w) = &cli.work {
        f.push(("paths.work", path_value(w)));
    }
    if let Some(s) = cli.seed {
        f.push(("seed", toml::Value::Integer(s as i64)));
    }
    let dim = |f: &mut Vec<_>, d: &Option<Dimension>| {
        if let Some(d) = d {
            f.push(("scoring.dimension", toml::Value::String(d.name().into())));
        }
    };
    match &cli.command {
        Command::Curate { corpus: Some(c) } => f.push(("paths.corpus", path_value(c))),
        Command::Ingest { ratings: Some(r) } => f.push(("paths.ratings", path_value(r))),
        Command::Stats { scores, profiles } => {
            if let Some(s) = scores {
                f.push(("paths.scores", path_value(s)));
            }
            if let Some(p) = profiles {
                f.push(("paths.profiles", path_value(p)));
            }
        }
        Command::Split { dimension } | Command::Train { dimension, .. } | Command::Score { dimension, .. } => {
            dim(&mut f, dimension)
        }
        Command::Index { dimension, features } => {
            dim(&mut f, dimension);
            if let Some(p) = features {
                f.push(("retrieval.features", path_value(p)));
            }
        }
        Command::Evaluate { dimension, threshold } => {
            dim(&mut f, dimension);
            if let Some(t) = threshold {
                f.push(("scoring.threshold", toml::Value::Float(*t)));
            }
        }
        Command::Rank { k, combine, .. } => {
            if let Some(k) = k {
                f.push(("scoring.top_k", toml::Value::Integer(*k as i64)));
            }
            if let Some(c) = combine {
                f.push(("scoring.combine", toml::Value::String(c.to_string())));
            }
        }
        _ => {}
    }
    f
}

fn run(cli: Cli) -> anyhow::Result<()> {
    let cfg = PipelineConfig::load_with(cli.config.as_deref(), &cli.set, flag_overrides(&cli))?;
    let ctx = Ctx::new(&cfg);
    match &cli.command {
        Command::Curate { .. } => pipeline::curate(&ctx),
        Command::Ingest { .. } => pipeline::ingest(&ctx),
        Command::Clean => pipeline::clean(&ctx),
        Command::Stats { .. } => pipeline::stats(&ctx),
        Command::Split { .. } => pipeline::split(&ctx),
        Command::Index { .. } => pipeline::index(&ctx),
        Command::Train { stage, .. } => pipeline::train(&ctx, Stage::try_from(*stage)?),
        Command::Evaluate { .. } => pipeline::evaluate(&ctx),
        Command::Score { images, .. } => pipeline::score(&ctx, images),
        Command::Rank { dir, .. } => pipeline::rank(&ctx, dir),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
