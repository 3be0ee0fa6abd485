use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// How the 3 frames of an observation are fused into one.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TimeLayerKind {
    /// Shared `[3 -> 6 -> 1]` perceptron over the time axis of each coordinate.
    Mlp,
    AvgPool,
    Linear,
    /// Width-2 convolution with 3 channels, ReLU, then a `6 -> 1` readout.
    Conv1d,
}

impl TimeLayerKind {
    pub const ALL: [TimeLayerKind; 4] = [
        TimeLayerKind::Mlp,
        TimeLayerKind::AvgPool,
        TimeLayerKind::Linear,
        TimeLayerKind::Conv1d,
    ];

    pub fn name(self) -> &'static str {
        match self {
            TimeLayerKind::Mlp => "mlp",
            TimeLayerKind::AvgPool => "avgpool",
            TimeLayerKind::Linear => "linear",
            TimeLayerKind::Conv1d => "conv1d",
        }
    }
}

impl fmt::Display for TimeLayerKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for TimeLayerKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::config(format!("unknown time layer `{s}`")))
    }
}

/// Network family.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Variant {
    /// One decoder per sub-chain plus the accumulator (a single decoder at T = 3).
    SkipPlan,
    /// A single decoder supervised on the complete chain.
    NoDecouple,
    /// Left-to-right decoder conditioned on the previous action.
    Autoregressive,
    /// `NoDecouple` plus a head regressing the intermediate latent states.
    StateSupervised,
}

impl Variant {
    pub const ALL: [Variant; 4] = [
        Variant::SkipPlan,
        Variant::NoDecouple,
        Variant::Autoregressive,
        Variant::StateSupervised,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Variant::SkipPlan => "skip-plan",
            Variant::NoDecouple => "no-decouple",
            Variant::Autoregressive => "autoregressive",
            Variant::StateSupervised => "state-supervised",
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| Error::config(format!("unknown variant `{s}`")))
    }
}

/// Where the goal feature enters the query sequence.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum GoalSlot {
    /// Added to the last action slot; the query has `T + 1` positions.
    #[default]
    LastAction,
    /// Its own trailing slot; the query has `T + 2` positions.
    Extra,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SkipPlanConfig {
    pub horizon: usize,
    pub n_actions: usize,
    pub feature_dim: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub n_layers: usize,
    pub memory_size: usize,
    pub feedforward_dim: usize,
    pub time_layer: TimeLayerKind,
    pub variant: Variant,
    pub gamma: f64,
    #[serde(default)]
    pub goal_slot: GoalSlot,
    /// Width of the regressed states; only read by `StateSupervised`.
    #[serde(default)]
    pub state_dim: usize,
}

impl SkipPlanConfig {
    /// Desk-scale defaults: width 128, 4 heads, memory 32, feed-forward 512.
    pub fn desk(horizon: usize, n_actions: usize, feature_dim: usize) -> Self {
        Self {
            horizon,
            n_actions,
            feature_dim,
            d_model: 128,
            n_heads: 4,
            n_layers: 1,
            memory_size: 32,
            feedforward_dim: 512,
            time_layer: TimeLayerKind::Mlp,
            variant: Variant::SkipPlan,
            gamma: 1.5,
            goal_slot: GoalSlot::LastAction,
            state_dim: 0,
        }
    }

    /// Full-size network: width 1024, 16 heads, memory 128.
    pub fn full_size(horizon: usize, n_actions: usize, feature_dim: usize) -> Self {
        Self {
            d_model: 1024,
            n_heads: 16,
            memory_size: 128,
            feedforward_dim: 4096,
            ..Self::desk(horizon, n_actions, feature_dim)
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.horizon < 3 {
            return Err(Error::config(format!("horizon {} below 3", self.horizon)));
        }
        if self.n_heads == 0 || self.d_model % self.n_heads != 0 {
            return Err(Error::config(format!(
                "d_model {} not divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        if self.n_actions < 2 || self.feature_dim == 0 || self.d_model < 2 {
            return Err(Error::config("n_actions >= 2, feature_dim >= 1 and d_model >= 2 required"));
        }
        if self.memory_size == 0 || self.n_layers == 0 || self.feedforward_dim == 0 {
            return Err(Error::config("memory_size, n_layers and feedforward_dim must be positive"));
        }
        if !(self.gamma >= 0.0 && self.gamma.is_finite()) {
            return Err(Error::config("gamma must be finite and >= 0"));
        }
        if self.variant == Variant::StateSupervised && self.state_dim == 0 {
            return Err(Error::config("state-supervised variant needs state_dim > 0"));
        }
        Ok(())
    }

    /// True when sub-chain decoders and the accumulator are used.
    pub fn decouple(&self) -> bool {
        self.variant == Variant::SkipPlan && self.horizon >= 4
    }

    pub fn decoder_count(&self) -> usize {
        if self.decouple() {
            self.horizon - 2
        } else {
            1
        }
    }

    pub fn query_len(&self) -> usize {
        match (self.variant, self.goal_slot) {
            (Variant::Autoregressive, _) | (_, GoalSlot::LastAction) => self.horizon + 1,
            (_, GoalSlot::Extra) => self.horizon + 2,
        }
    }

    /// `[T(T-2), 3T(T-2), T]`.
    pub fn accumulator_widths(&self) -> [usize; 3] {
        let t = self.horizon;
        [t * (t - 2), 3 * t * (t - 2), t]
    }
}

/// 1-based positions `{1, i + 1, T}` supervised by sub-chain decoder `i`.
pub fn subchain_positions(horizon: usize) -> Vec<[usize; 3]> {
    (1..=horizon.saturating_sub(2)).map(|i| [1, i + 1, horizon]).collect()
}
