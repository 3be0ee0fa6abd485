//! Focal-loss supervision and the SGD training loop.

mod loss;

use std::fmt::Write as _;
use std::fs;
use std::path::Path;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use loss::{focal_loss, focal_loss_counted, loss_chain, loss_subchains, loss_total, LossConfig, LossTerms};

use crate::corpus::{Embeddings, PlanInstance};
use crate::error::{Error, Result};
use crate::metrics::MetricsReport;
use crate::model::{Batch, SkipPlanModel, Variant};
use crate::tensor::{Precision, Tape};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub base_lr: f64,
    pub decay_factor: f64,
    pub decay_start: usize,
    pub decay_period: usize,
    pub lr_floor: f64,
    pub batch_size: usize,
    pub seed: u64,
    #[serde(default)]
    pub precision: Precision,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 500,
            base_lr: 0.02,
            decay_factor: 0.1,
            decay_start: 100,
            decay_period: 50,
            lr_floor: 1e-8,
            batch_size: 64,
            seed: 0,
            precision: Precision::F64,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.decay_period == 0 {
            return Err(Error::config("batch_size and decay_period must be positive"));
        }
        if !(self.base_lr >= 0.0 && self.base_lr.is_finite()) || !(0.0..=1.0).contains(&self.decay_factor) {
            return Err(Error::config("base_lr must be finite and >= 0, decay_factor in [0, 1]"));
        }
        Ok(())
    }
}

/// Step schedule: the rate is multiplied by `decay_factor` at `decay_start`
/// and every `decay_period` epochs after it, never dropping below `lr_floor`
/// (a zero base rate stays zero).
pub fn lr_at(epoch: usize, config: &TrainConfig) -> f64 {
    let decays = if epoch < config.decay_start {
        0
    } else {
        1 + (epoch - config.decay_start) / config.decay_period
    };
    let lr = config.base_lr * config.decay_factor.powi(decays as i32);
    lr.max(config.lr_floor).min(config.base_lr)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub l_n: f64,
    pub l_t: f64,
    pub l_total: f64,
    pub lr: f64,
    pub seconds: f64,
}

/// Per-epoch losses (batch means weighted by batch size). For the
/// state-supervised variant `l_n` holds the weighted state term.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub epochs: Vec<EpochLog>,
    pub clamp_events: usize,
    pub final_metrics: Option<MetricsReport>,
}

impl TrainLog {
    pub const CSV_HEADER: &'static str = "epoch,l_n,l_t,l_total,lr,seconds";

    pub fn to_csv(&self) -> String {
        let mut s = format!("{}\n", Self::CSV_HEADER);
        for e in &self.epochs {
            writeln!(s, "{},{},{},{},{},{:.3}", e.epoch, e.l_n, e.l_t, e.l_total, e.lr, e.seconds).unwrap();
        }
        s
    }

    /// CSV without the wall-clock column, which is the only nondeterministic field.
    pub fn deterministic_csv(&self) -> String {
        let mut s = String::from("epoch,l_n,l_t,l_total,lr\n");
        for e in &self.epochs {
            writeln!(s, "{},{},{},{},{}", e.epoch, e.l_n, e.l_t, e.l_total, e.lr).unwrap();
        }
        s
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let tmp = path.with_extension("tmp");
        fs::write(&tmp, self.to_csv())?;
        fs::rename(tmp, path)?;
        Ok(())
    }
}

/// Loss values summed over a set of instances.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossValues {
    pub l_n: f64,
    pub l_t: f64,
    pub total: f64,
}

fn make_batch(model: &SkipPlanModel, chunk: &[&PlanInstance], embeddings: Option<&Embeddings>) -> Result<Batch> {
    let batch = Batch::from_instances(chunk)?;
    if model.config().variant == Variant::StateSupervised {
        let emb = embeddings.ok_or_else(|| Error::config("state-supervised training needs the corpus embeddings"))?;
        return batch.with_states(emb);
    }
    Ok(batch)
}

/// Mean losses over `instances` without updating the model.
pub fn mean_loss(
    model: &SkipPlanModel,
    instances: &[PlanInstance],
    loss: &LossConfig,
    batch_size: usize,
    embeddings: Option<&Embeddings>,
) -> Result<LossValues> {
    if instances.is_empty() {
        return Err(Error::Empty("no instances".into()));
    }
    let mut acc = LossValues::default();
    for chunk in instances.chunks(batch_size.max(1)) {
        let refs: Vec<&PlanInstance> = chunk.iter().collect();
        let batch = make_batch(model, &refs, embeddings)?;
        let mut tape = Tape::with_params(&model.params);
        let out = model.forward(&mut tape, &batch)?;
        let terms = loss_total(&mut tape, model.config(), &out, &batch, loss)?;
        let w = chunk.len() as f64;
        acc.l_n += w * terms.l_n.map_or(0.0, |v| tape.value(v).item());
        acc.l_t += w * tape.value(terms.l_t).item();
        acc.total += w * tape.value(terms.total).item();
    }
    let n = instances.len() as f64;
    Ok(LossValues {
        l_n: acc.l_n / n,
        l_t: acc.l_t / n,
        total: acc.total / n,
    })
}

/// Mini-batch SGD without momentum. Epoch `e` visits the training set in an
/// order drawn from `(seed, e)`; a non-finite loss aborts with
/// [`Error::Divergence`].
pub fn train(
    model: &mut SkipPlanModel,
    instances: &[PlanInstance],
    config: &TrainConfig,
    loss: &LossConfig,
    embeddings: Option<&Embeddings>,
) -> Result<TrainLog> {
    config.validate()?;
    loss.validate(model.config().horizon)?;
    if instances.is_empty() {
        return Err(Error::Empty("no training instances".into()));
    }
    let mut log = TrainLog::default();
    let mut order: Vec<usize> = (0..instances.len()).collect();
    for epoch in 0..config.epochs {
        let started = Instant::now();
        let lr = lr_at(epoch, config);
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        rng.set_stream(epoch as u64);
        order.sort_unstable();
        order.shuffle(&mut rng);
        let mut sums = LossValues::default();
        for idx in order.chunks(config.batch_size) {
            let chunk: Vec<&PlanInstance> = idx.iter().map(|&i| &instances[i]).collect();
            let batch = make_batch(model, &chunk, embeddings)?;
            let diverged = |e: Error| match e {
                Error::NonFinite { .. } => Error::Divergence { epoch },
                other => other,
            };
            let grads = {
                let mut tape = Tape::with_params(&model.params);
                tape.set_precision(config.precision);
                let out = model.forward(&mut tape, &batch).map_err(diverged)?;
                let terms = loss_total(&mut tape, model.config(), &out, &batch, loss).map_err(diverged)?;
                let total = tape.value(terms.total).item();
                if !total.is_finite() {
                    return Err(Error::Divergence { epoch });
                }
                let w = chunk.len() as f64;
                sums.l_n += w * terms.l_n.map_or(0.0, |v| tape.value(v).item());
                sums.l_t += w * tape.value(terms.l_t).item();
                sums.total += w * total;
                log.clamp_events += tape.clamp_events();
                tape.backprop(terms.total)?
            };
            if lr > 0.0 {
                model.params.zero_grad();
                model.params.accumulate(&grads);
                model.params.sgd_step(lr);
                if config.precision == Precision::F32 {
                    model.params.round_to_f32();
                }
                if model.params.iter().any(|(_, p)| !p.value.all_finite()) {
                    return Err(Error::Divergence { epoch });
                }
            }
        }
        let n = instances.len() as f64;
        log.epochs.push(EpochLog {
            epoch,
            l_n: sums.l_n / n,
            l_t: sums.l_t / n,
            l_total: sums.total / n,
            lr,
            seconds: started.elapsed().as_secs_f64(),
        });
        log::debug!("epoch {epoch}: loss {:.5} lr {lr}", sums.total / n);
    }
    Ok(log)
}
