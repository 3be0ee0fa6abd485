//! Named experiments and their default configurations.

use std::fmt;
use std::path::PathBuf;
use std::str::FromStr;

use skipplan::corpus::CorpusConfig;
use skipplan::metrics::Restriction;
use skipplan::model::{TimeLayerKind, Variant};
use skipplan::training::TrainConfig;
use skipplan::{Error, Result};

use crate::config::{ArmConfig, ExperimentConfig, ModelConfig};

pub const EXPERIMENTS: [&str; 7] = [
    "fig3-error-profile",
    "table3-subchain-reliability",
    "table4b-time-layers",
    "table4cde-decoupling",
    "table4f-gamma",
    "tableS2-failed-decoupling",
    "figS2-ar-vs-nar",
];

/// Size preset of an experiment.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum Scale {
    /// Width 128, 2000 videos, 100 epochs, 5 seeds.
    #[default]
    Desk,
    /// Width 32, 400 videos, 40 epochs, 5 seeds; minutes per experiment on one core.
    Acceptance,
}

impl fmt::Display for Scale {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Scale::Desk => "desk",
            Scale::Acceptance => "acceptance",
        })
    }
}

impl FromStr for Scale {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "desk" => Ok(Scale::Desk),
            "acceptance" => Ok(Scale::Acceptance),
            other => Err(Error::Config(format!("unknown scale `{other}` (expected desk or acceptance)"))),
        }
    }
}

/// Corpus used by every registry experiment: stronger within-block ramps and
/// lower noise than the generator defaults, and 14 actions per task.
pub fn synthetic_corpus(scale: Scale) -> CorpusConfig {
    let mut c = CorpusConfig::default();
    c.grammar.actions_per_task = 14;
    c.observation.noise_sigma = 0.5;
    c.observation.ramp_gain = 8.0;
    if scale == Scale::Acceptance {
        c.n_videos = 400;
    }
    c
}

pub fn model_config(scale: Scale) -> ModelConfig {
    let base = ModelConfig::default();
    match scale {
        Scale::Desk => base,
        Scale::Acceptance => ModelConfig {
            d_model: 32,
            n_heads: 4,
            memory_size: 16,
            feedforward_dim: 128,
            ..base
        },
    }
}

pub fn train_config(scale: Scale) -> TrainConfig {
    TrainConfig {
        epochs: match scale {
            Scale::Desk => 100,
            Scale::Acceptance => 40,
        },
        base_lr: 0.1,
        batch_size: 32,
        ..TrainConfig::default()
    }
}

fn standalone(positions: [usize; 3]) -> ArmConfig {
    let name = format!("sub-{}-{}-{}", positions[0], positions[1], positions[2]);
    ArmConfig {
        loss_positions: Some(positions.to_vec()),
        ..ArmConfig::new(name, Variant::NoDecouple)
    }
}

fn positions(p: &[usize]) -> Restriction {
    Restriction::Positions(p.to_vec())
}

/// Default configuration of a registry experiment.
pub fn experiment(id: &str, scale: Scale) -> Result<ExperimentConfig> {
    let whole = ArmConfig::new("whole-chain", Variant::NoDecouple);
    let (horizons, variants, restrictions) = match id {
        "fig3-error-profile" => (vec![3, 4, 5, 6], vec![ArmConfig::new("no-decouple", Variant::NoDecouple)], vec![]),
        "table3-subchain-reliability" => (
            vec![5],
            vec![whole, standalone([1, 2, 5]), standalone([1, 3, 5]), standalone([1, 4, 5])],
            vec![positions(&[1, 2, 5]), positions(&[1, 3, 5]), positions(&[1, 4, 5])],
        ),
        "table4b-time-layers" => (
            vec![3],
            TimeLayerKind::ALL
                .iter()
                .map(|&k| ArmConfig {
                    time_layer: Some(k),
                    ..ArmConfig::new(k.name(), Variant::SkipPlan)
                })
                .collect(),
            vec![],
        ),
        "table4cde-decoupling" => (
            vec![4, 5, 6],
            vec![
                ArmConfig::new("no-decouple", Variant::NoDecouple),
                ArmConfig::new("skip-plan", Variant::SkipPlan),
            ],
            vec![],
        ),
        "table4f-gamma" => {
            let mut arms = Vec::new();
            for (corpus, zipf) in [("zipf", None), ("balanced", Some(0.0))] {
                for gamma in [0.0, 1.0, 1.5, 2.0] {
                    arms.push(ArmConfig {
                        gamma: Some(gamma),
                        zipf_exponent: zipf,
                        ..ArmConfig::new(format!("{corpus}-g{gamma}"), Variant::SkipPlan)
                    });
                }
            }
            (vec![3], arms, vec![])
        }
        "tableS2-failed-decoupling" => (vec![5], vec![whole, standalone([1, 2, 3])], vec![positions(&[1, 2, 3])]),
        "figS2-ar-vs-nar" => (
            vec![5],
            vec![
                ArmConfig::new("autoregressive", Variant::Autoregressive),
                ArmConfig::new("non-autoregressive", Variant::NoDecouple),
            ],
            vec![],
        ),
        other => {
            return Err(Error::Config(format!(
                "unknown experiment `{other}`; known: {}",
                EXPERIMENTS.join(", ")
            )))
        }
    };
    Ok(ExperimentConfig {
        experiment: id.to_string(),
        horizons,
        variants,
        seeds: (0..5).collect(),
        restrictions,
        corpus: synthetic_corpus(scale),
        model: model_config(scale),
        train: train_config(scale),
        out_dir: PathBuf::from("runs").join(id),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_experiment_is_valid() {
        for id in EXPERIMENTS {
            for scale in [Scale::Desk, Scale::Acceptance] {
                experiment(id, scale).unwrap().validate().unwrap();
            }
        }
        assert!(experiment("table9", Scale::Desk).is_err());
    }

    #[test]
    fn gamma_sweep_covers_both_corpora() {
        let c = experiment("table4f-gamma", Scale::Desk).unwrap();
        let gammas: Vec<f64> = c.variants.iter().map(|a| a.gamma.unwrap()).collect();
        assert_eq!(gammas, [0.0, 1.0, 1.5, 2.0, 0.0, 1.0, 1.5, 2.0]);
        assert_eq!(c.variants.iter().filter(|a| a.zipf_exponent == Some(0.0)).count(), 4);
    }
}
