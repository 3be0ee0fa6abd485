use rand::Rng;

use super::config::TimeLayerKind;
use crate::corpus::FRAMES;
use crate::error::{Error, Result};
use crate::nn::{Linear, Mlp};
use crate::tensor::{ParamId, ParamStore, Tape, Var};

const CONV_CHANNELS: usize = 3;
const CONV_KERNEL: usize = 2;

#[derive(Clone, Debug)]
enum TimeLayer {
    Mlp(Mlp),
    AvgPool,
    Linear(Linear),
    Conv1d { weight: ParamId, bias: ParamId, readout: Linear },
}

/// Fuses each 3-frame observation into one frame, then projects it to the
/// model width. Start and goal observations share every parameter.
#[derive(Clone, Debug)]
pub struct VisualInputModule {
    kind: TimeLayerKind,
    time: TimeLayer,
    projection: Linear,
    feature_dim: usize,
}

impl VisualInputModule {
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        kind: TimeLayerKind,
        feature_dim: usize,
        d_model: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let time = match kind {
            TimeLayerKind::Mlp => TimeLayer::Mlp(Mlp::new(store, "visual.time", [FRAMES, 2 * FRAMES, 1], rng)?),
            TimeLayerKind::AvgPool => TimeLayer::AvgPool,
            TimeLayerKind::Linear => TimeLayer::Linear(Linear::new(store, "visual.time", FRAMES, 1, rng)?),
            TimeLayerKind::Conv1d => {
                let weight = store.xavier(
                    "visual.time.conv.weight",
                    &[CONV_CHANNELS, 1, CONV_KERNEL],
                    CONV_KERNEL,
                    CONV_CHANNELS * CONV_KERNEL,
                    rng,
                )?;
                let bias = store.constant("visual.time.conv.bias", &[CONV_CHANNELS], 0.0)?;
                let width = CONV_CHANNELS * (FRAMES - CONV_KERNEL + 1);
                let readout = Linear::new(store, "visual.time.readout", width, 1, rng)?;
                TimeLayer::Conv1d { weight, bias, readout }
            }
        };
        Ok(Self {
            kind,
            time,
            projection: Linear::new(store, "visual.proj", feature_dim, d_model, rng)?,
            feature_dim,
        })
    }

    pub fn kind(&self) -> TimeLayerKind {
        self.kind
    }

    /// `[N, 3, F] -> [N, F]`.
    pub fn fuse(&self, tape: &mut Tape<'_>, obs: Var) -> Result<Var> {
        let shape = tape.shape(obs).to_vec();
        if shape.len() != 3 || shape[1] != FRAMES || shape[2] != self.feature_dim {
            return Err(Error::shape(
                "visual",
                format!("expected [N, {FRAMES}, {}], got {shape:?}", self.feature_dim),
            ));
        }
        let (n, f) = (shape[0], shape[2]);
        match &self.time {
            TimeLayer::AvgPool => tape.mean(obs, 1),
            TimeLayer::Mlp(mlp) => {
                let x = tape.transpose(obs, vec![0, 2, 1])?;
                let y = mlp.forward(tape, x)?;
                tape.reshape(y, vec![n, f])
            }
            TimeLayer::Linear(lin) => {
                let x = tape.transpose(obs, vec![0, 2, 1])?;
                let y = lin.forward(tape, x)?;
                tape.reshape(y, vec![n, f])
            }
            TimeLayer::Conv1d { weight, bias, readout } => {
                let x = tape.transpose(obs, vec![0, 2, 1])?;
                let x = tape.reshape(x, vec![n * f, 1, FRAMES])?;
                let w = tape.param(*weight);
                let b = tape.param(*bias);
                let y = tape.conv1d(x, w, b)?;
                let y = tape.relu(y)?;
                let y = tape.reshape(y, vec![n, f, readout.in_dim])?;
                let y = readout.forward(tape, y)?;
                tape.reshape(y, vec![n, f])
            }
        }
    }

    /// `[N, 3, F] -> [N, d_model]`.
    pub fn encode(&self, tape: &mut Tape<'_>, obs: Var) -> Result<Var> {
        let fused = self.fuse(tape, obs)?;
        self.projection.forward(tape, fused)
    }

    /// Encodes start and goal observations (`[B, 3, F]` each) with one pass.
    pub fn encode_pair(&self, tape: &mut Tape<'_>, v_start: Var, v_goal: Var) -> Result<(Var, Var)> {
        let b = tape.shape(v_start)[0];
        if tape.shape(v_goal)[0] != b {
            return Err(Error::shape("visual", "start and goal batch sizes differ"));
        }
        let both = tape.concat(&[v_start, v_goal], 0)?;
        let enc = self.encode(tape, both)?;
        let f_start = tape.slice(enc, 0, 0, b)?;
        let f_goal = tape.slice(enc, 0, b, b)?;
        Ok((f_start, f_goal))
    }
}
