//! Central finite-difference checks of the analytic gradients.

use rand::Rng;

use super::tape::{OpKind, Tape};
use super::Tensor;
use crate::error::{Error, Result};

/// Inputs closer than this to a relu kink are rejected.
pub const KINK_MARGIN: f64 = 1e-3;

/// Resampling attempts for [`random_gradient_check`] before giving up.
pub const MAX_RESAMPLES: usize = 100;

fn readout_weights(n: usize) -> Vec<f64> {
    (0..n).map(|i| (1.3 * i as f64 + 0.7).cos()).collect()
}

fn readout(kind: &OpKind, inputs: &[Tensor]) -> Result<f64> {
    let mut tape = Tape::new();
    let vars: Vec<_> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
    let y = tape.apply(kind, &vars)?;
    let w = readout_weights(tape.value(y).len());
    Ok(tape.value(y).data().iter().zip(&w).map(|(a, b)| a * b).sum())
}

/// Max over all input coordinates of
/// `|analytic - central| / max(1e-8, |central|)` for the scalar readout
/// `sum_i w_i * op(inputs)_i` with fixed pseudo-random weights `w`.
pub fn gradient_check(kind: &OpKind, inputs: &[Tensor], epsilon: f64) -> Result<f64> {
    if matches!(kind, OpKind::Relu) && inputs[0].data().iter().any(|v| v.abs() < KINK_MARGIN) {
        return Err(Error::NonDifferentiable { op: kind.name() });
    }
    let mut tape = Tape::new();
    let vars: Vec<_> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
    let y = tape.apply(kind, &vars)?;
    let w = tape.leaf(Tensor::new(tape.shape(y).to_vec(), readout_weights(tape.value(y).len()))?);
    let prod = tape.mul(y, w)?;
    let loss = tape.sum(prod)?;
    let grads = tape.backward(loss)?;

    let mut worst: f64 = 0.0;
    let mut probe = inputs.to_vec();
    for (i, var) in vars.iter().enumerate() {
        let analytic = grads
            .get(*var)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(inputs[i].shape()));
        for j in 0..inputs[i].len() {
            let orig = inputs[i].data()[j];
            probe[i].data_mut()[j] = orig + epsilon;
            let up = readout(kind, &probe)?;
            probe[i].data_mut()[j] = orig - epsilon;
            let down = readout(kind, &probe)?;
            probe[i].data_mut()[j] = orig;
            let numeric = (up - down) / (2.0 * epsilon);
            let err = (analytic.data()[j] - numeric).abs() / numeric.abs().max(1e-8);
            worst = worst.max(err);
        }
    }
    Ok(worst)
}

/// Draws inputs uniformly in [-1, 1] for the given shapes and runs
/// [`gradient_check`], resampling points that sit on a kink.
pub fn random_gradient_check<R: Rng>(
    kind: &OpKind,
    shapes: &[Vec<usize>],
    epsilon: f64,
    rng: &mut R,
) -> Result<f64> {
    for _ in 0..MAX_RESAMPLES {
        let inputs = shapes
            .iter()
            .map(|s| {
                let n = s.iter().product();
                Tensor::new(s.clone(), (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect())
            })
            .collect::<Result<Vec<_>>>()?;
        match gradient_check(kind, &inputs, epsilon) {
            Err(Error::NonDifferentiable { .. }) => continue,
            other => return other,
        }
    }
    Err(Error::NonDifferentiable { op: kind.name() })
}
