use rand::Rng;

use crate::error::{Error, Result};
use crate::nn::{LayerNorm, Mlp, MultiHeadAttention};
use crate::tensor::{ParamId, ParamStore, Tape, Tensor, Var};

use super::config::SkipPlanConfig;

/// Pre-norm block: self-attention, cross-attention to memory, feed-forward,
/// each wrapped in a residual connection.
#[derive(Clone, Debug)]
struct DecoderLayer {
    norm_self: LayerNorm,
    self_attn: MultiHeadAttention,
    norm_cross: LayerNorm,
    cross_attn: MultiHeadAttention,
    norm_ff: LayerNorm,
    ff: Mlp,
}

impl DecoderLayer {
    fn new<R: Rng>(store: &mut ParamStore, name: &str, c: &SkipPlanConfig, rng: &mut R) -> Result<Self> {
        let d = c.d_model;
        Ok(Self {
            norm_self: LayerNorm::new(store, &format!("{name}.norm_self"), d)?,
            self_attn: MultiHeadAttention::new(store, &format!("{name}.self_attn"), d, c.n_heads, rng)?,
            norm_cross: LayerNorm::new(store, &format!("{name}.norm_cross"), d)?,
            cross_attn: MultiHeadAttention::new(store, &format!("{name}.cross_attn"), d, c.n_heads, rng)?,
            norm_ff: LayerNorm::new(store, &format!("{name}.norm_ff"), d)?,
            ff: Mlp::new(store, &format!("{name}.ff"), [d, c.feedforward_dim, d], rng)?,
        })
    }

    fn forward(&self, tape: &mut Tape<'_>, x: Var, memory: Var, mask: Option<Var>) -> Result<Var> {
        let h = self.norm_self.forward(tape, x)?;
        let h = self.self_attn.forward(tape, h, h, h, mask)?;
        let x = tape.add(x, h)?;
        let h = self.norm_cross.forward(tape, x)?;
        let h = self.cross_attn.forward(tape, h, memory, memory, None)?;
        let x = tape.add(x, h)?;
        let h = self.norm_ff.forward(tape, x)?;
        let h = self.ff.forward(tape, h)?;
        tape.add(x, h)
    }
}

/// One transformer decoder with its own query embeddings, memory and
/// classifier. Nothing is shared with other decoders.
#[derive(Clone, Debug)]
pub struct SubChainDecoder {
    /// 1-based; decoder `i` supervises intermediate position `i + 1`.
    pub index: usize,
    pub query: ParamId,
    pub memory: ParamId,
    layers: Vec<DecoderLayer>,
    final_norm: LayerNorm,
    pub classifier: Mlp,
    horizon: usize,
}

/// Decoder outputs for the `T` action slots.
#[derive(Clone, Copy, Debug)]
pub struct DecoderOutput {
    /// `[B, T, d_model]` after the final normalisation.
    pub hidden: Var,
    /// `[B, T, n_actions]`.
    pub logits: Var,
}

impl SubChainDecoder {
    pub fn new<R: Rng>(store: &mut ParamStore, name: &str, index: usize, c: &SkipPlanConfig, rng: &mut R) -> Result<Self> {
        let d = c.d_model;
        let l = c.query_len();
        let query = store.xavier(format!("{name}.query"), &[l, d], l, d, rng)?;
        let memory = store.gaussian(format!("{name}.memory"), &[c.memory_size, d], 1.0 / (d as f64).sqrt(), rng)?;
        let layers = (0..c.n_layers)
            .map(|k| DecoderLayer::new(store, &format!("{name}.layer{k}"), c, rng))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            index,
            query,
            memory,
            layers,
            final_norm: LayerNorm::new(store, &format!("{name}.norm_out"), d)?,
            classifier: Mlp::new(store, &format!("{name}.classifier"), [d, (d / 2).max(1), c.n_actions], rng)?,
            horizon: c.horizon,
        })
    }

    /// Adds this decoder's query embeddings to `inputs` (`[B, L, d]`, the
    /// visual features already placed on their slots).
    pub fn queries(&self, tape: &mut Tape<'_>, inputs: Var) -> Result<Var> {
        let q = tape.param(self.query);
        if tape.shape(inputs)[1..] != *tape.shape(q) {
            return Err(Error::shape(
                "queries",
                format!("inputs {:?} vs query {:?}", tape.shape(inputs), tape.shape(q)),
            ));
        }
        tape.add(inputs, q)
    }

    /// Runs the decoder on a query sequence `[B, L, d]`. `extra_memory`
    /// (`[B, k, d]`) is appended to the learnable memory rows when given.
    pub fn forward(
        &self,
        tape: &mut Tape<'_>,
        queries: Var,
        extra_memory: Option<Var>,
        mask: Option<Var>,
    ) -> Result<DecoderOutput> {
        let memory = tape.param(self.memory);
        let memory = match extra_memory {
            None => memory,
            Some(extra) => {
                let b = tape.shape(extra)[0];
                let mshape = tape.shape(memory).to_vec();
                let zeros = tape.leaf(Tensor::zeros(&[b, mshape[0], mshape[1]]));
                let tiled = tape.add(zeros, memory)?;
                tape.concat(&[tiled, extra], 1)?
            }
        };
        let mut x = queries;
        for layer in &self.layers {
            x = layer.forward(tape, x, memory, mask)?;
        }
        let x = self.final_norm.forward(tape, x)?;
        // slot 0 is the start/context slot; slots 1..=T carry actions
        let hidden = tape.slice(x, 1, 1, self.horizon)?;
        let logits = self.classifier.forward(tape, hidden)?;
        Ok(DecoderOutput { hidden, logits })
    }
}
