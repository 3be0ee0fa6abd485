use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{subchain_positions, Batch, SkipPlanConfig, SkipPlanOutput};
use crate::tensor::{focal_term, Tape, Tensor, Var, PROB_FLOOR};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossConfig {
    /// Focal exponent; 0 is plain cross-entropy.
    pub gamma: f64,
    /// 1-based positions of the complete-chain loss; `None` supervises all
    /// of them. A standalone sub-chain head is a single decoder trained with
    /// e.g. `Some(vec![1, 3, 5])`.
    #[serde(default)]
    pub positions: Option<Vec<usize>>,
    /// Weight of the squared-error state term (state-supervised variant).
    #[serde(default = "default_state_weight")]
    pub state_weight: f64,
}

fn default_state_weight() -> f64 {
    1.0
}

impl LossConfig {
    pub fn new(gamma: f64) -> Self {
        Self {
            gamma,
            positions: None,
            state_weight: default_state_weight(),
        }
    }

    pub fn validate(&self, horizon: usize) -> Result<()> {
        if !(self.gamma >= 0.0 && self.gamma.is_finite()) {
            return Err(Error::config("gamma must be finite and >= 0"));
        }
        if let Some(p) = &self.positions {
            if p.is_empty() || p.iter().any(|&t| t == 0 || t > horizon) {
                return Err(Error::config(format!("loss positions {p:?} invalid for T = {horizon}")));
            }
        }
        Ok(())
    }
}

/// Focal loss on probability rows, averaged over rows; also returns how many
/// target probabilities were clamped at [`PROB_FLOOR`].
pub fn focal_loss_counted(probabilities: &[Vec<f64>], targets: &[usize], gamma: f64) -> Result<(f64, usize)> {
    if probabilities.len() != targets.len() {
        return Err(Error::LengthMismatch(format!(
            "{} rows vs {} targets",
            probabilities.len(),
            targets.len()
        )));
    }
    if probabilities.is_empty() {
        return Err(Error::Empty("no supervised positions".into()));
    }
    let mut clamps = 0;
    let mut total = 0.0;
    for (row, &y) in probabilities.iter().zip(targets) {
        let p = *row
            .get(y)
            .ok_or_else(|| Error::config(format!("target {y} outside a row of {}", row.len())))?;
        if p < PROB_FLOOR {
            clamps += 1;
        }
        total += focal_term(p, gamma);
    }
    if clamps > 0 {
        log::warn!("{clamps} target probabilities clamped at {PROB_FLOOR}");
    }
    Ok((total / probabilities.len() as f64, clamps))
}

/// `-mean_rows (1 - p_target)^gamma * ln p_target`.
pub fn focal_loss(probabilities: &[Vec<f64>], targets: &[usize], gamma: f64) -> Result<f64> {
    focal_loss_counted(probabilities, targets, gamma).map(|(v, _)| v)
}

/// Focal loss of `[B, T, n_a]` logits over the given 1-based positions of
/// every batch entry.
pub fn loss_chain(tape: &mut Tape<'_>, logits: Var, targets: &[usize], positions: &[usize], gamma: f64) -> Result<Var> {
    let shape = tape.shape(logits).to_vec();
    let (b, t) = (shape[0], shape[1]);
    if targets.len() != b * t {
        return Err(Error::LengthMismatch(format!("{} targets for {b} x {t} logits", targets.len())));
    }
    let mut rows = Vec::with_capacity(b * positions.len());
    let mut ys = Vec::with_capacity(rows.capacity());
    for s in 0..b {
        for &p in positions {
            rows.push(s * t + p - 1);
            ys.push(targets[s * t + p - 1]);
        }
    }
    tape.focal_loss(logits, ys, rows, gamma)
}

/// `L_N`: decoder `i` is supervised only on positions `{1, i + 1, T}`.
pub fn loss_subchains(
    tape: &mut Tape<'_>,
    config: &SkipPlanConfig,
    output: &SkipPlanOutput,
    targets: &[usize],
    gamma: f64,
) -> Result<Var> {
    if !config.decouple() {
        return Err(Error::config("sub-chain loss needs T >= 4 and decoupling"));
    }
    let positions = subchain_positions(config.horizon);
    if positions.len() != output.decoder_logits.len() {
        return Err(Error::LengthMismatch("decoder outputs do not match sub-chains".into()));
    }
    let mut total = None;
    for (&logits, pos) in output.decoder_logits.iter().zip(&positions) {
        let term = loss_chain(tape, logits, targets, pos, gamma)?;
        total = Some(match total {
            None => term,
            Some(acc) => tape.add(acc, term)?,
        });
    }
    Ok(total.expect("at least one sub-chain"))
}

/// Handles of the loss terms of one forward pass.
#[derive(Clone, Copy, Debug)]
pub struct LossTerms {
    /// Sub-chain term; for the state-supervised variant, its weighted state term.
    pub l_n: Option<Var>,
    pub l_t: Var,
    pub total: Var,
}

fn state_loss(tape: &mut Tape<'_>, predicted: Var, target: &Tensor) -> Result<Var> {
    let n = target.len() as f64;
    let target = tape.leaf(target.clone());
    let diff = tape.sub(predicted, target)?;
    let sq = tape.mul(diff, diff)?;
    let s = tape.sum(sq)?;
    tape.scale(s, 1.0 / n)
}

/// `L = L_N + L_T`; `L = L_T` when there are no sub-chain decoders.
pub fn loss_total(
    tape: &mut Tape<'_>,
    config: &SkipPlanConfig,
    output: &SkipPlanOutput,
    batch: &Batch,
    loss: &LossConfig,
) -> Result<LossTerms> {
    let t = config.horizon;
    loss.validate(t)?;
    let targets = batch.targets();
    let all: Vec<usize> = (1..=t).collect();
    let positions = loss.positions.as_deref().unwrap_or(&all);
    let l_t = loss_chain(tape, output.final_logits, &targets, positions, loss.gamma)?;
    let l_n = if config.decouple() {
        Some(loss_subchains(tape, config, output, &targets, loss.gamma)?)
    } else if let Some(pred) = output.states {
        let target = batch
            .states
            .as_ref()
            .ok_or_else(|| Error::config("state-supervised training needs state targets"))?;
        let mse = state_loss(tape, pred, target)?;
        Some(tape.scale(mse, loss.state_weight)?)
    } else {
        None
    };
    let total = match l_n {
        Some(n) => tape.add(n, l_t)?,
        None => l_t,
    };
    Ok(LossTerms { l_n, l_t, total })
}
