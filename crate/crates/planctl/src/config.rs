//! Experiment and run configuration files.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use skipplan::corpus::CorpusConfig;
use skipplan::metrics::Restriction;
use skipplan::model::{GoalSlot, SkipPlanConfig, TimeLayerKind, Variant};
use skipplan::tensor::Precision;
use skipplan::training::{LossConfig, TrainConfig};
use skipplan::{Error, Result};

/// Network hyper-parameters shared by every arm of an experiment.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub d_model: usize,
    pub n_heads: usize,
    pub n_layers: usize,
    pub memory_size: usize,
    pub feedforward_dim: usize,
    pub time_layer: TimeLayerKind,
    pub gamma: f64,
    pub goal_slot: GoalSlot,
}

impl Default for ModelConfig {
    fn default() -> Self {
        let desk = SkipPlanConfig::desk(3, 2, 1);
        Self {
            d_model: desk.d_model,
            n_heads: desk.n_heads,
            n_layers: desk.n_layers,
            memory_size: desk.memory_size,
            feedforward_dim: desk.feedforward_dim,
            time_layer: desk.time_layer,
            gamma: desk.gamma,
            goal_slot: desk.goal_slot,
        }
    }
}

/// One compared configuration of an experiment. Unset overrides fall back to
/// the experiment-wide settings.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ArmConfig {
    pub name: String,
    pub variant: Variant,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub time_layer: Option<TimeLayerKind>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gamma: Option<f64>,
    /// Supervised positions of a standalone head, e.g. `[1, 3, 5]`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub loss_positions: Option<Vec<usize>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub zipf_exponent: Option<f64>,
}

impl ArmConfig {
    pub fn new(name: impl Into<String>, variant: Variant) -> Self {
        Self {
            name: name.into(),
            variant,
            time_layer: None,
            gamma: None,
            loss_positions: None,
            zipf_exponent: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub experiment: String,
    pub horizons: Vec<usize>,
    pub variants: Vec<ArmConfig>,
    pub seeds: Vec<u64>,
    /// Scored in addition to the full plan.
    #[serde(default)]
    pub restrictions: Vec<Restriction>,
    pub corpus: CorpusConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub out_dir: PathBuf,
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

fn hash_json<T: Serialize>(value: &T) -> String {
    sha256_hex(&serde_json::to_vec(value).expect("config serialises"))
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)?;
        let config: Self = serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        config.validate()?;
        Ok(config)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serialises")
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        crate::io::write_atomic(path, self.to_json().as_bytes())
    }

    pub fn hash(&self) -> String {
        hash_json(self)
    }

    pub fn validate(&self) -> Result<()> {
        if self.horizons.is_empty() || self.variants.is_empty() || self.seeds.is_empty() {
            return Err(Error::Config("horizons, variants and seeds must be non-empty".into()));
        }
        let mut names: Vec<&str> = self.variants.iter().map(|a| a.name.as_str()).collect();
        names.sort_unstable();
        if names.windows(2).any(|w| w[0] == w[1]) {
            return Err(Error::Config("arm names must be unique".into()));
        }
        self.corpus.validate()?;
        self.train.validate()?;
        for spec in self.runs() {
            spec.model.validate()?;
            spec.loss.validate(spec.horizon)?;
            for r in &spec.restrictions {
                r.positions(spec.horizon)?;
            }
        }
        Ok(())
    }

    /// Every (horizon, arm, seed) run in a fixed order.
    pub fn runs(&self) -> Vec<RunSpec> {
        let mut out = Vec::new();
        for &horizon in &self.horizons {
            for arm in &self.variants {
                for &seed in &self.seeds {
                    out.push(self.run(horizon, arm, seed));
                }
            }
        }
        out
    }

    pub fn run(&self, horizon: usize, arm: &ArmConfig, seed: u64) -> RunSpec {
        let mut corpus = self.corpus.clone();
        corpus.seed = seed;
        if let Some(z) = arm.zipf_exponent {
            corpus.grammar.zipf_exponent = z;
        }
        let m = &self.model;
        let gamma = arm.gamma.unwrap_or(m.gamma);
        let model = SkipPlanConfig {
            horizon,
            n_actions: corpus.grammar.n_actions,
            feature_dim: corpus.feature_dim(),
            d_model: m.d_model,
            n_heads: m.n_heads,
            n_layers: m.n_layers,
            memory_size: m.memory_size,
            feedforward_dim: m.feedforward_dim,
            time_layer: arm.time_layer.unwrap_or(m.time_layer),
            variant: arm.variant,
            gamma,
            goal_slot: m.goal_slot,
            state_dim: if arm.variant == Variant::StateSupervised {
                corpus.signal_dim
            } else {
                0
            },
        };
        let loss = LossConfig {
            positions: arm.loss_positions.clone(),
            ..LossConfig::new(gamma)
        };
        RunSpec {
            experiment: self.experiment.clone(),
            arm: arm.name.clone(),
            seed,
            horizon,
            corpus,
            model,
            train: TrainConfig { seed, ..self.train.clone() },
            loss,
            restrictions: self.restrictions.clone(),
        }
    }

    pub fn set_precision(&mut self, precision: Precision) {
        self.train.precision = precision;
    }
}

/// Fully resolved settings of one training run; its hash tags every output row.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunSpec {
    pub experiment: String,
    pub arm: String,
    pub seed: u64,
    pub horizon: usize,
    pub corpus: CorpusConfig,
    pub model: SkipPlanConfig,
    pub train: TrainConfig,
    pub loss: LossConfig,
    pub restrictions: Vec<Restriction>,
}

impl RunSpec {
    pub fn hash(&self) -> String {
        hash_json(self)
    }

    pub fn dir_name(&self) -> String {
        format!("{}_T{}_s{}", self.arm, self.horizon, self.seed)
    }
}
