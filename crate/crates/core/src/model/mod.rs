//! The sub-chain planner: visual input module, a bank of independent
//! decoders with learnable memories, and the accumulator that fuses their
//! logits. The same network family also provides the single-decoder,
//! autoregressive and state-supervised baselines.

mod config;
mod decoder;
mod visual;

use std::fs;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub use config::{subchain_positions, GoalSlot, SkipPlanConfig, TimeLayerKind, Variant};
pub use decoder::{DecoderOutput, SubChainDecoder};
pub use visual::VisualInputModule;

use crate::corpus::{Embeddings, PlanInstance, FRAMES};
use crate::error::{Error, Result};
use crate::nn::{Linear, Mlp};
use crate::tensor::{checkpoint, ParamId, ParamStore, Precision, Tape, Tensor, Var};

pub const CHECKPOINT_FILE: &str = "model.skpl";
pub const CONFIG_FILE: &str = "config.json";

/// Added to attention scores of future positions in the autoregressive decoder.
const MASKED: f64 = -1e9;

/// A batch of planning problems in tensor form.
#[derive(Clone, Debug)]
pub struct Batch {
    /// `[B, 3, F]`.
    pub v_start: Tensor,
    pub v_goal: Tensor,
    pub actions: Vec<Vec<usize>>,
    /// `[B, T - 1, S]` relative latent states after actions `1..T-1`.
    pub states: Option<Tensor>,
}

impl Batch {
    pub fn from_instances(instances: &[&PlanInstance]) -> Result<Self> {
        let first = instances.first().ok_or_else(|| Error::Empty("empty batch".into()))?;
        let (t, f) = (first.horizon(), first.feature_dim());
        let mut start = Vec::with_capacity(instances.len() * FRAMES * f);
        let mut goal = Vec::with_capacity(instances.len() * FRAMES * f);
        for inst in instances {
            if inst.horizon() != t || inst.v_start.len() != FRAMES * f || inst.v_goal.len() != FRAMES * f {
                return Err(Error::LengthMismatch("batch mixes horizons or feature widths".into()));
            }
            start.extend(inst.v_start.iter().map(|&x| x as f64));
            goal.extend(inst.v_goal.iter().map(|&x| x as f64));
        }
        let b = instances.len();
        Ok(Self {
            v_start: Tensor::new(vec![b, FRAMES, f], start)?,
            v_goal: Tensor::new(vec![b, FRAMES, f], goal)?,
            actions: instances.iter().map(|i| i.actions.clone()).collect(),
            states: None,
        })
    }

    /// Attaches regression targets for the state-supervised variant.
    pub fn with_states(mut self, embeddings: &Embeddings) -> Result<Self> {
        let t = self.horizon();
        let s = embeddings.signal_dim;
        let mut data = Vec::with_capacity(self.len() * (t - 1) * s);
        for actions in &self.actions {
            for row in embeddings.relative_states(&actions[..t - 1]) {
                data.extend(row);
            }
        }
        self.states = Some(Tensor::new(vec![self.len(), t - 1, s], data)?);
        Ok(self)
    }

    pub fn len(&self) -> usize {
        self.actions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.actions.is_empty()
    }

    pub fn horizon(&self) -> usize {
        self.actions[0].len()
    }

    /// Ground-truth actions flattened as `b * T + t`.
    pub fn targets(&self) -> Vec<usize> {
        self.actions.iter().flatten().copied().collect()
    }
}

/// Tape handles produced by one forward pass.
#[derive(Clone, Debug)]
pub struct SkipPlanOutput {
    /// One `[B, T, n_actions]` tensor per decoder.
    pub decoder_logits: Vec<Var>,
    /// `[B, T, n_actions]`; the single decoder's logits when not decoupled.
    pub final_logits: Var,
    /// `[B, T - 1, S]` for the state-supervised variant.
    pub states: Option<Var>,
}

#[derive(Debug)]
pub struct SkipPlanModel {
    config: SkipPlanConfig,
    pub params: ParamStore,
    visual: VisualInputModule,
    decoders: Vec<SubChainDecoder>,
    accumulator: Option<Mlp>,
    /// Autoregressive only: `n_actions + 1` rows, the last one is the
    /// begin-of-plan token.
    action_embedding: Option<ParamId>,
    state_head: Option<Linear>,
}

impl SkipPlanModel {
    pub fn new(config: SkipPlanConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::new();
        let c = &config;
        let visual = VisualInputModule::new(&mut params, c.time_layer, c.feature_dim, c.d_model, &mut rng)?;
        let decoders = (1..=c.decoder_count())
            .map(|i| SubChainDecoder::new(&mut params, &format!("decoder{i}"), i, c, &mut rng))
            .collect::<Result<Vec<_>>>()?;
        let accumulator = if c.decouple() {
            Some(Mlp::new(&mut params, "accumulator", c.accumulator_widths(), &mut rng)?)
        } else {
            None
        };
        let action_embedding = if c.variant == Variant::Autoregressive {
            let n = c.n_actions + 1;
            Some(params.xavier("action_embedding", &[n, c.d_model], n, c.d_model, &mut rng)?)
        } else {
            None
        };
        let state_head = if c.variant == Variant::StateSupervised {
            Some(Linear::new(&mut params, "state_head", c.d_model, c.state_dim, &mut rng)?)
        } else {
            None
        };
        Ok(Self {
            config,
            params,
            visual,
            decoders,
            accumulator,
            action_embedding,
            state_head,
        })
    }

    pub fn config(&self) -> &SkipPlanConfig {
        &self.config
    }

    pub fn visual(&self) -> &VisualInputModule {
        &self.visual
    }

    pub fn decoders(&self) -> &[SubChainDecoder] {
        &self.decoders
    }

    pub fn accumulator(&self) -> Option<&Mlp> {
        self.accumulator.as_ref()
    }

    /// Parameter names owned by decoder `i` (1-based).
    pub fn decoder_param_names(&self, i: usize) -> Vec<String> {
        let prefix = format!("decoder{i}.");
        self.params.names().filter(|n| n.starts_with(&prefix)).map(String::from).collect()
    }

    fn check_batch(&self, batch: &Batch) -> Result<()> {
        if batch.is_empty() {
            return Err(Error::Empty("empty batch".into()));
        }
        if batch.horizon() != self.config.horizon {
            return Err(Error::config(format!(
                "instance horizon {} does not match model horizon {}",
                batch.horizon(),
                self.config.horizon
            )));
        }
        if let Some(&a) = batch.actions.iter().flatten().find(|&&a| a >= self.config.n_actions) {
            return Err(Error::config(format!("action {a} outside vocabulary")));
        }
        Ok(())
    }

    /// `(f_start, f_goal)`, each `[B, d_model]`.
    pub fn encode_visual(&self, tape: &mut Tape<'_>, batch: &Batch) -> Result<(Var, Var)> {
        let s = tape.leaf(batch.v_start.clone());
        let g = tape.leaf(batch.v_goal.clone());
        self.visual.encode_pair(tape, s, g)
    }

    /// `[B, L, d]` holding `f_start` on slot 0, `f_goal` on the goal slot and
    /// zeros elsewhere.
    fn slot_inputs(&self, tape: &mut Tape<'_>, f_start: Var, f_goal: Var) -> Result<Var> {
        let (b, d) = (tape.shape(f_start)[0], self.config.d_model);
        let l = self.config.query_len();
        let fs = tape.reshape(f_start, vec![b, 1, d])?;
        let fg = tape.reshape(f_goal, vec![b, 1, d])?;
        let gap = tape.leaf(Tensor::zeros(&[b, l - 2, d]));
        tape.concat(&[fs, gap, fg], 1)
    }

    /// Per-decoder query sequences (`[B, L, d]` each).
    pub fn build_queries(&self, tape: &mut Tape<'_>, f_start: Var, f_goal: Var) -> Result<Vec<Var>> {
        if self.config.variant == Variant::Autoregressive {
            return Err(Error::config("autoregressive queries depend on the action prefix"));
        }
        let inputs = self.slot_inputs(tape, f_start, f_goal)?;
        self.decoders.iter().map(|d| d.queries(tape, inputs)).collect()
    }

    /// Fuses the per-decoder logits (`[B, T, n_a]` each) class by class.
    pub fn accumulate(&self, tape: &mut Tape<'_>, bank: &[Var]) -> Result<Var> {
        let acc = self
            .accumulator
            .as_ref()
            .ok_or_else(|| Error::config("model has no accumulator"))?;
        let t = self.config.horizon;
        if bank.len() != t - 2 {
            return Err(Error::LengthMismatch(format!("expected {} decoder outputs, got {}", t - 2, bank.len())));
        }
        let stacked = tape.concat(bank, 1)?;
        let per_class = tape.transpose(stacked, vec![0, 2, 1])?;
        let fused = acc.forward(tape, per_class)?;
        tape.transpose(fused, vec![0, 2, 1])
    }

    /// Forward pass; the autoregressive variant is teacher-forced on
    /// `batch.actions`.
    pub fn forward(&self, tape: &mut Tape<'_>, batch: &Batch) -> Result<SkipPlanOutput> {
        self.check_batch(batch)?;
        if self.config.variant == Variant::Autoregressive {
            return self.forward_prefix(tape, batch, &batch.actions);
        }
        let (f_start, f_goal) = self.encode_visual(tape, batch)?;
        let queries = self.build_queries(tape, f_start, f_goal)?;
        let outs = self
            .decoders
            .iter()
            .zip(queries)
            .map(|(d, q)| d.forward(tape, q, None, None))
            .collect::<Result<Vec<_>>>()?;
        let decoder_logits: Vec<Var> = outs.iter().map(|o| o.logits).collect();
        let final_logits = if self.config.decouple() {
            self.accumulate(tape, &decoder_logits)?
        } else {
            decoder_logits[0]
        };
        let states = match &self.state_head {
            Some(head) => {
                let h = tape.slice(outs[0].hidden, 1, 0, self.config.horizon - 1)?;
                Some(head.forward(tape, h)?)
            }
            None => None,
        };
        Ok(SkipPlanOutput {
            decoder_logits,
            final_logits,
            states,
        })
    }

    fn causal_mask(&self) -> Tensor {
        let l = self.config.query_len();
        let data = (0..l * l).map(|k| if k % l > k / l { MASKED } else { 0.0 }).collect();
        Tensor::from_parts(vec![l, l], data)
    }

    /// Autoregressive pass where slot `t` sees the action before it (the
    /// begin token at `t = 1`) taken from `prefix`; only `prefix[b][..T-1]` is read.
    pub fn forward_prefix(&self, tape: &mut Tape<'_>, batch: &Batch, prefix: &[Vec<usize>]) -> Result<SkipPlanOutput> {
        let table_id = self
            .action_embedding
            .ok_or_else(|| Error::config("variant has no action embedding"))?;
        let (t, d, n_a) = (self.config.horizon, self.config.d_model, self.config.n_actions);
        let b = batch.len();
        if prefix.len() != b || prefix.iter().any(|p| p.len() + 1 < t) {
            return Err(Error::LengthMismatch("prefix does not cover T - 1 actions".into()));
        }
        let (f_start, f_goal) = self.encode_visual(tape, batch)?;
        let mut indices = Vec::with_capacity(b * t);
        for p in prefix {
            indices.push(n_a);
            indices.extend(&p[..t - 1]);
        }
        let table = tape.param(table_id);
        let prev = tape.gather(table, indices)?;
        let prev = tape.reshape(prev, vec![b, t, d])?;
        let fs = tape.reshape(f_start, vec![b, 1, d])?;
        let fg = tape.reshape(f_goal, vec![b, 1, d])?;
        let inputs = tape.concat(&[fs, prev], 1)?;
        let decoder = &self.decoders[0];
        let queries = decoder.queries(tape, inputs)?;
        let extra = tape.concat(&[fs, fg], 1)?;
        let mask = tape.leaf(self.causal_mask());
        let out = decoder.forward(tape, queries, Some(extra), Some(mask))?;
        Ok(SkipPlanOutput {
            decoder_logits: vec![out.logits],
            final_logits: out.logits,
            states: None,
        })
    }

    /// Final logits `[B, T, n_a]` (greedy decoding for the autoregressive variant).
    pub fn final_logits(&self, batch: &Batch, precision: Precision) -> Result<Tensor> {
        self.check_batch(batch)?;
        if self.config.variant != Variant::Autoregressive {
            let mut tape = Tape::with_params(&self.params);
            tape.set_precision(precision);
            let out = self.forward(&mut tape, batch)?;
            return Ok(tape.value(out.final_logits).clone());
        }
        let (t, n_a) = (self.config.horizon, self.config.n_actions);
        let mut prefix = vec![vec![0; t]; batch.len()];
        let mut logits = Tensor::zeros(&[batch.len(), t, n_a]);
        for step in 0..t {
            let mut tape = Tape::with_params(&self.params);
            tape.set_precision(precision);
            let out = self.forward_prefix(&mut tape, batch, &prefix)?;
            let value = tape.value(out.final_logits);
            for (b, p) in prefix.iter_mut().enumerate() {
                let row = (b * t + step) * n_a;
                let src = &value.data()[row..row + n_a];
                logits.data_mut()[row..row + n_a].copy_from_slice(src);
                p[step] = argmax(src);
            }
        }
        Ok(logits)
    }

    /// Per-timestep argmax of the final logits.
    pub fn predict(&self, batch: &Batch) -> Result<Vec<Vec<usize>>> {
        let logits = self.final_logits(batch, Precision::F64)?;
        Ok(argmax_rows(&logits))
    }

    pub fn predict_instances(&self, instances: &[PlanInstance], batch_size: usize) -> Result<Vec<Vec<usize>>> {
        let mut out = Vec::with_capacity(instances.len());
        for chunk in instances.chunks(batch_size.max(1)) {
            let refs: Vec<&PlanInstance> = chunk.iter().collect();
            out.extend(self.predict(&Batch::from_instances(&refs)?)?);
        }
        Ok(out)
    }

    /// Writes `model.skpl` and `config.json` into `dir`.
    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        checkpoint::save(&self.params, &dir.join(CHECKPOINT_FILE))?;
        let tmp = dir.join("config.json.tmp");
        fs::write(&tmp, serde_json::to_string_pretty(&self.config)?)?;
        fs::rename(tmp, dir.join(CONFIG_FILE))?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let config: SkipPlanConfig = serde_json::from_slice(&fs::read(dir.join(CONFIG_FILE))?)?;
        let mut model = Self::new(config, 0)?;
        checkpoint::load_into(&mut model.params, &dir.join(CHECKPOINT_FILE))?;
        Ok(model)
    }
}

/// Index of the largest entry; ties go to the smallest index.
pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Argmax over the last axis of `[B, T, C]`, grouped per batch entry.
pub fn argmax_rows(logits: &Tensor) -> Vec<Vec<usize>> {
    let shape = logits.shape();
    let (t, c) = (shape[shape.len() - 2], shape[shape.len() - 1]);
    logits
        .data()
        .chunks(t * c)
        .map(|seq| seq.chunks(c).map(argmax).collect())
        .collect()
}
