use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::grammar::TaskGrammar;
use crate::error::{Error, Result};

/// Number of frames in one observation block.
pub const FRAMES: usize = 3;

/// Fixed random vectors that define latent states and observations.
#[derive(Clone, Debug, PartialEq)]
pub struct Embeddings {
    pub signal_dim: usize,
    /// One row per global action; cumulative sums of these form the state.
    pub action: Vec<Vec<f64>>,
    /// One row per global action; announces the upcoming action in a ramp.
    pub hint: Vec<Vec<f64>>,
    /// One row per task; the state before any action.
    pub context: Vec<Vec<f64>>,
}

fn gaussian_rows<R: Rng>(rows: usize, dim: usize, rng: &mut R) -> Vec<Vec<f64>> {
    (0..rows)
        .map(|_| (0..dim).map(|_| StandardNormal.sample(rng)).collect())
        .collect()
}

impl Embeddings {
    pub fn generate(n_actions: usize, n_tasks: usize, signal_dim: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(u64::MAX);
        Self {
            signal_dim,
            action: gaussian_rows(n_actions, signal_dim, &mut rng),
            hint: gaussian_rows(n_actions, signal_dim, &mut rng),
            context: gaussian_rows(n_tasks, signal_dim, &mut rng),
        }
    }

    /// `state(i)` for `i = 0..=len`: task context plus the running sum of
    /// the embeddings of the first `i` actions.
    pub fn states(&self, task: usize, actions: &[usize]) -> Vec<Vec<f64>> {
        let mut cur = self.context[task].clone();
        let mut out = Vec::with_capacity(actions.len() + 1);
        out.push(cur.clone());
        for &a in actions {
            for (c, e) in cur.iter_mut().zip(&self.action[a]) {
                *c += e;
            }
            out.push(cur.clone());
        }
        out
    }

    /// `state(t) - state(0)` of a plan for `t = 1..len`, i.e. the states a
    /// state-supervised model is asked to regress.
    pub fn relative_states(&self, actions: &[usize]) -> Vec<Vec<f64>> {
        let mut cur = vec![0.0; self.signal_dim];
        actions
            .iter()
            .map(|&a| {
                for (c, e) in cur.iter_mut().zip(&self.action[a]) {
                    *c += e;
                }
                cur.clone()
            })
            .collect()
    }
}

/// One synthetic instructional video.
#[derive(Clone, Debug, PartialEq)]
pub struct PlanVideo {
    pub id: usize,
    pub task: usize,
    pub actions: Vec<usize>,
    /// `actions.len() + 1` latent states.
    pub states: Vec<Vec<f64>>,
    /// `actions.len() + 1` blocks of `FRAMES x feature_dim` values
    /// (row-major, frame-major); empty until observations are synthesised.
    /// Block `i` sits on the boundary after action `i` (block 0 precedes action 1).
    pub observations: Vec<Vec<f32>>,
}

impl PlanVideo {
    pub fn len(&self) -> usize {
        self.actions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.actions.is_empty()
    }
}

/// Draws `length` actions: a random topological order of the whole grammar,
/// thinned to a random order-preserving subset.
pub fn sample_video<R: Rng>(
    grammar: &TaskGrammar,
    embeddings: &Embeddings,
    id: usize,
    length: usize,
    rng: &mut R,
) -> Result<PlanVideo> {
    if length == 0 || length > grammar.actions.len() {
        return Err(Error::config(format!(
            "video length {length} infeasible for a grammar of {} actions",
            grammar.actions.len()
        )));
    }
    let order = grammar.random_topological_order(rng);
    let mut keep = sample(rng, order.len(), length).into_vec();
    keep.sort_unstable();
    let actions: Vec<usize> = keep.into_iter().map(|i| order[i]).collect();
    let states = embeddings.states(grammar.task, &actions);
    Ok(PlanVideo {
        id,
        task: grammar.task,
        actions,
        states,
        observations: Vec::new(),
    })
}

/// Observation geometry of the synthetic corpus.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ObservationConfig {
    pub noise_sigma: f64,
    pub nuisance_dim: usize,
    /// Standard deviation of the nuisance coordinates.
    pub nuisance_scale: f64,
    /// Amplitude of the within-block ramp; 1 spans exactly `lo .. hi`.
    #[serde(default = "default_ramp_gain")]
    pub ramp_gain: f64,
}

fn default_ramp_gain() -> f64 {
    1.0
}

/// Fills `video.observations`.
///
/// Block `i` ramps from `lo = state(i-1)` towards `hi = state(i) + hint(a_{i+1})`
/// around the centre `(state(i-1) + state(i)) / 2`: frame `j` is
/// `centre + gain * (j - 1) * (hi - lo) / 2`. Frame 0 minus frame 2 therefore
/// equals `gain * (state(i-1) - state(i) - hint)`, while the frame mean is the
/// centre alone, so averaging over time erases both the ramp direction and
/// the hint.
pub fn synthesize_observations<R: Rng>(
    video: &mut PlanVideo,
    embeddings: &Embeddings,
    config: &ObservationConfig,
    rng: &mut R,
) -> Result<()> {
    if config.noise_sigma < 0.0 || config.nuisance_scale < 0.0 || !config.ramp_gain.is_finite() {
        return Err(Error::config("noise scales must be non-negative and the ramp gain finite"));
    }
    let sd = embeddings.signal_dim;
    let fd = sd + config.nuisance_dim;
    let n = video.len();
    let mut blocks = Vec::with_capacity(n + 1);
    for i in 0..=n {
        let lo = &video.states[i.saturating_sub(1)];
        let st = &video.states[i];
        let hint = video.actions.get(i).map(|&a| &embeddings.hint[a]);
        let mut block = vec![0f32; FRAMES * fd];
        for j in 0..FRAMES {
            let w = config.ramp_gain * (j as f64 - 1.0);
            for c in 0..sd {
                let centre = 0.5 * (lo[c] + st[c]);
                let half_ramp = 0.5 * (st[c] - lo[c] + hint.map_or(0.0, |h| h[c]));
                let noise: f64 = if config.noise_sigma > 0.0 {
                    let z: f64 = StandardNormal.sample(rng);
                    config.noise_sigma * z
                } else {
                    0.0
                };
                block[j * fd + c] = (centre + w * half_ramp + noise) as f32;
            }
            for c in sd..fd {
                let z: f64 = StandardNormal.sample(rng);
                block[j * fd + c] = (config.nuisance_scale * z) as f32;
            }
        }
        blocks.push(block);
    }
    video.observations = blocks;
    Ok(())
}
