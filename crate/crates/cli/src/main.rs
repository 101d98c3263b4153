use std::path::PathBuf;

use anyhow::Result;
use clap::{Parser, Subcommand};

use nowcast_cli::config::{ExperimentConfig, Preset};
use nowcast_cli::models::{ModelTag, Stage};
use nowcast_cli::{data_cmd, evaluate, plot, train};

#[derive(Parser)]
#[command(name = "nowcast", version, about = "Ensemble precipitation nowcasting experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(clap::Args)]
struct Common {
    /// Experiment config (TOML), merged over the preset.
    #[arg(long)]
    config: PathBuf,
    #[arg(long, value_enum, default_value = "synth")]
    preset: Preset,
    /// Overrides the config seed.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Subcommand)]
enum Command {
    /// Preprocess HDF5 granules into the dataset container.
    Ingest(Common),
    /// Generate the synthetic advection dataset.
    Synth(Common),
    /// Train one stage.
    Train {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_enum)]
        stage: Stage,
        /// Continue from the stage's checkpoint.
        #[arg(long)]
        resume: bool,
    },
    /// Score models on the test split.
    Evaluate {
        #[command(flatten)]
        common: Common,
        /// Models to evaluate; all with checkpoints plus persistence by default.
        #[arg(long, value_enum, value_delimiter = ',')]
        models: Vec<ModelTag>,
    },
    /// Render forecast panels and metric curves.
    Plot {
        #[command(flatten)]
        common: Common,
        /// Index into the test split.
        #[arg(long, default_value_t = 0)]
        sample: usize,
    },
}

fn load(c: &Common) -> Result<ExperimentConfig> {
    ExperimentConfig::load(&c.config, c.preset, c.seed)
}

fn main() -> Result<()> {
    match Cli::parse().command {
        Command::Ingest(c) => {
            let s = data_cmd::ingest(&load(&c)?)?;
            println!(
                "ingested {} granules ({} gaps) into {} sequences at {}",
                s.granules,
                s.gaps,
                s.sequences,
                s.dataset.display()
            );
        }
        Command::Synth(c) => {
            let (n, path) = data_cmd::synth(&load(&c)?)?;
            println!("wrote {n} synthetic sequences to {}", path.display());
        }
        Command::Train { common, stage, resume } => {
            let cfg = load(&common)?;
            let out = train::train(&cfg, stage, resume)?;
            for (i, l) in out.losses.iter().enumerate() {
                println!("epoch {} loss {l:.6}", out.epochs_done - out.losses.len() + i);
            }
            println!("{} after {} epochs: {}", stage.name(), out.epochs_done, out.checkpoint.display());
        }
        Command::Evaluate { common, models } => {
            let cfg = load(&common)?;
            let out = evaluate::evaluate(&cfg, Some(&models))?;
            print!("{}", std::fs::read_to_string(&out.table)?);
        }
        Command::Plot { common, sample } => {
            for p in plot::plot(&load(&common)?, sample)? {
                println!("{}", p.display());
            }
        }
    }
    Ok(())
}
