//! Command-line interface.

use std::path::PathBuf;
use std::str::FromStr;

use clap::{Args, Parser, Subcommand};
use skipplan::metrics::Restriction;
use skipplan::model::Variant;
use skipplan::tensor::Precision;
use skipplan::{Error, Result};

use crate::commands;
use crate::config::{ArmConfig, ExperimentConfig};
use crate::registry::{self, Scale};
use crate::runner::threads_from_env;

#[derive(Debug, Parser)]
#[command(name = "planctl", version, about = "Generate data, train, evaluate and ablate skip-plan models")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate the synthetic corpus and write one dataset per horizon.
    Generate(GenerateArgs),
    /// Train one model on a generated dataset.
    Train(TrainArgs),
    /// Score a checkpoint on a dataset split.
    Eval(EvalArgs),
    /// Run a registry experiment over all its arms and seeds.
    Ablate(AblateArgs),
    /// Summarise every run record below a directory.
    Report(ReportArgs),
}

#[derive(Debug, Args)]
pub struct Common {
    /// Experiment configuration file (JSON).
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Size preset used when no config file is given.
    #[arg(long, default_value = "desk")]
    pub scale: String,
}

impl Common {
    fn experiment(&self, default_id: &str) -> Result<ExperimentConfig> {
        let mut config = match &self.config {
            Some(path) => ExperimentConfig::load(path)?,
            None => registry::experiment(default_id, Scale::from_str(&self.scale)?)?,
        };
        if let Ok(p) = std::env::var("PLANCTL_PRECISION") {
            config.set_precision(Precision::from_str(p.trim())?);
        }
        Ok(config)
    }
}

#[derive(Debug, Args)]
pub struct GenerateArgs {
    #[command(flatten)]
    pub common: Common,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Horizon to write; all of 3 to 6 when omitted.
    #[arg(long = "T")]
    pub horizon: Option<usize>,
    #[arg(long, default_value = "data")]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[command(flatten)]
    pub common: Common,
    /// Dataset directory, or a root holding `T<h>` datasets.
    #[arg(long, default_value = "data")]
    pub data: PathBuf,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long = "T", default_value_t = 3)]
    pub horizon: usize,
    #[arg(long, default_value = "skip-plan")]
    pub variant: String,
    #[arg(long)]
    pub gamma: Option<f64>,
    /// Also score this sub-chain, e.g. `1,3,5`.
    #[arg(long)]
    pub restriction: Option<String>,
    #[arg(long, default_value = "runs/train")]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    /// Run directory or checkpoint directory.
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long, default_value = "data")]
    pub data: PathBuf,
    #[arg(long, default_value = "test")]
    pub split: String,
    /// Comma-separated 1-based positions; the full plan when omitted.
    #[arg(long)]
    pub restriction: Option<String>,
    #[arg(long, default_value = "eval")]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct AblateArgs {
    /// Registry experiment id; ignored with `--config`.
    pub experiment: Option<String>,
    #[command(flatten)]
    pub common: Common,
    /// Comma-separated seeds overriding the configured ones.
    #[arg(long, value_delimiter = ',')]
    pub seeds: Option<Vec<u64>>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ReportArgs {
    #[arg(long, default_value = "runs")]
    pub out: PathBuf,
}

fn restriction(arg: Option<&str>) -> Result<Restriction> {
    arg.map_or(Ok(Restriction::Full), Restriction::from_str)
}

impl Cli {
    pub fn run(&self) -> Result<()> {
        match &self.command {
            Command::Generate(a) => {
                let config = a.common.experiment("fig3-error-profile")?;
                let horizons = a.horizon.map_or_else(|| vec![3, 4, 5, 6], |h| vec![h]);
                for g in commands::cmd_generate(&config.corpus, a.seed, &horizons, &a.out)? {
                    println!("T={}: {} train, {} test", g.horizon, g.train, g.test);
                }
                Ok(())
            }
            Command::Train(a) => {
                let mut config = a.common.experiment("fig3-error-profile")?;
                config.experiment = "train".into();
                config.restrictions = match &a.restriction {
                    Some(r) => vec![Restriction::from_str(r)?],
                    None => vec![],
                };
                let arm = ArmConfig {
                    gamma: a.gamma,
                    ..ArmConfig::new(a.variant.clone(), Variant::from_str(&a.variant)?)
                };
                let spec = config.run(a.horizon, &arm, a.seed);
                let record = commands::cmd_train(&spec, &a.data, &a.out)?;
                println!(
                    "{} T={} seed {}: SR {:.4} mAcc {:.4} mIoU {:.4} ({})",
                    record.arm,
                    record.horizon,
                    record.seed,
                    record.metrics.success_rate,
                    record.metrics.mean_accuracy,
                    record.metrics.mean_iou,
                    record.config_hash
                );
                Ok(())
            }
            Command::Eval(a) => {
                let r = restriction(a.restriction.as_deref())?;
                let out = commands::cmd_eval(&a.checkpoint, &a.data, &a.split, &r, &a.out)?;
                print!("{}", out.metrics_csv);
                Ok(())
            }
            Command::Ablate(a) => {
                let id = match (&a.experiment, &a.common.config) {
                    (Some(id), None) => id.clone(),
                    (_, Some(_)) => String::new(),
                    (None, None) => {
                        return Err(Error::Config(format!(
                            "name an experiment or pass --config; known: {}",
                            registry::EXPERIMENTS.join(", ")
                        )))
                    }
                };
                let mut config = a.common.experiment(&id)?;
                if let Some(seeds) = &a.seeds {
                    config.seeds = seeds.clone();
                }
                let out = a.out.clone().unwrap_or_else(|| config.out_dir.clone());
                let records = commands::cmd_ablate(&config, threads_from_env()?, &out)?;
                println!("{} runs written to {}", records.len(), out.display());
                Ok(())
            }
            Command::Report(a) => {
                print!("{}", commands::cmd_report(&a.out)?);
                Ok(())
            }
        }
    }
}
