//! Parameterised layers built on the tape.

use rand::Rng;

use crate::error::{Error, Result};
use crate::tensor::{ParamId, ParamStore, Tape, Var};

#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    pub fn new<R: Rng>(store: &mut ParamStore, name: &str, in_dim: usize, out_dim: usize, rng: &mut R) -> Result<Self> {
        let weight = store.xavier(format!("{name}.weight"), &[in_dim, out_dim], in_dim, out_dim, rng)?;
        let bias = store.constant(format!("{name}.bias"), &[out_dim], 0.0)?;
        Ok(Self {
            weight,
            bias,
            in_dim,
            out_dim,
        })
    }

    /// `x @ W + b` over the last axis of `x`.
    pub fn forward(&self, tape: &mut Tape<'_>, x: Var) -> Result<Var> {
        let w = tape.param(self.weight);
        let b = tape.param(self.bias);
        let y = tape.matmul(x, w)?;
        tape.add(y, b)
    }
}

/// Three-layer perceptron `[in -> hidden -> out]` with a ReLU hidden layer.
#[derive(Clone, Debug)]
pub struct Mlp {
    pub hidden: Linear,
    pub output: Linear,
}

impl Mlp {
    pub fn new<R: Rng>(store: &mut ParamStore, name: &str, dims: [usize; 3], rng: &mut R) -> Result<Self> {
        Ok(Self {
            hidden: Linear::new(store, &format!("{name}.0"), dims[0], dims[1], rng)?,
            output: Linear::new(store, &format!("{name}.1"), dims[1], dims[2], rng)?,
        })
    }

    pub fn widths(&self) -> [usize; 3] {
        [self.hidden.in_dim, self.hidden.out_dim, self.output.out_dim]
    }

    pub fn forward(&self, tape: &mut Tape<'_>, x: Var) -> Result<Var> {
        let h = self.hidden.forward(tape, x)?;
        let h = tape.relu(h)?;
        self.output.forward(tape, h)
    }
}

/// Layer normalisation over the last axis with learned gain and offset.
#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gain: ParamId,
    pub bias: ParamId,
}

impl LayerNorm {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize) -> Result<Self> {
        Ok(Self {
            gain: store.constant(format!("{name}.gain"), &[dim], 1.0)?,
            bias: store.constant(format!("{name}.bias"), &[dim], 0.0)?,
        })
    }

    pub fn forward(&self, tape: &mut Tape<'_>, x: Var) -> Result<Var> {
        let axis = tape.shape(x).len() - 1;
        let n = tape.layer_norm(x, axis)?;
        let g = tape.param(self.gain);
        let b = tape.param(self.bias);
        let y = tape.mul(n, g)?;
        tape.add(y, b)
    }
}

/// Scaled dot-product attention with per-head projections.
#[derive(Clone, Debug)]
pub struct MultiHeadAttention {
    pub query: Linear,
    pub key: Linear,
    pub value: Linear,
    pub output: Linear,
    pub n_heads: usize,
    pub d_model: usize,
}

impl MultiHeadAttention {
    pub fn new<R: Rng>(store: &mut ParamStore, name: &str, d_model: usize, n_heads: usize, rng: &mut R) -> Result<Self> {
        if n_heads == 0 || d_model % n_heads != 0 {
            return Err(Error::config(format!("d_model {d_model} not divisible by n_heads {n_heads}")));
        }
        Ok(Self {
            query: Linear::new(store, &format!("{name}.q"), d_model, d_model, rng)?,
            key: Linear::new(store, &format!("{name}.k"), d_model, d_model, rng)?,
            value: Linear::new(store, &format!("{name}.v"), d_model, d_model, rng)?,
            output: Linear::new(store, &format!("{name}.o"), d_model, d_model, rng)?,
            n_heads,
            d_model,
        })
    }

    /// `queries: [B, Lq, d]` (or `[Lq, d]`); `keys`/`values`: `[B, Lk, d]`, or
    /// `[Lk, d]` to share one key/value set across the batch. `mask` is added
    /// to the `[Lq, Lk]` scores before the softmax.
    pub fn forward(&self, tape: &mut Tape<'_>, queries: Var, keys: Var, values: Var, mask: Option<Var>) -> Result<Var> {
        let unbatched = tape.shape(queries).len() == 2;
        let queries = if unbatched {
            let s = tape.shape(queries).to_vec();
            tape.reshape(queries, vec![1, s[0], s[1]])?
        } else {
            queries
        };
        let (b, lq) = (tape.shape(queries)[0], tape.shape(queries)[1]);
        let (h, dh) = (self.n_heads, self.d_model / self.n_heads);

        let q = self.query.forward(tape, queries)?;
        let q = tape.reshape(q, vec![b, lq, h, dh])?;
        let q = tape.transpose(q, vec![0, 2, 1, 3])?;

        let k = self.key.forward(tape, keys)?;
        let v = self.value.forward(tape, values)?;
        let (k_t, v) = match tape.shape(k).len() {
            2 => {
                let lk = tape.shape(k)[0];
                let k = tape.reshape(k, vec![lk, h, dh])?;
                let k_t = tape.transpose(k, vec![1, 2, 0])?;
                let v = tape.reshape(v, vec![lk, h, dh])?;
                (k_t, tape.transpose(v, vec![1, 0, 2])?)
            }
            3 => {
                let lk = tape.shape(k)[1];
                let kb = tape.shape(k)[0];
                let k = tape.reshape(k, vec![kb, lk, h, dh])?;
                let k_t = tape.transpose(k, vec![0, 2, 3, 1])?;
                let v = tape.reshape(v, vec![kb, lk, h, dh])?;
                (k_t, tape.transpose(v, vec![0, 2, 1, 3])?)
            }
            _ => return Err(Error::shape("attention", "keys must be rank 2 or 3")),
        };

        let scores = tape.matmul(q, k_t)?;
        let mut scores = tape.scale(scores, 1.0 / (dh as f64).sqrt())?;
        if let Some(m) = mask {
            scores = tape.add(scores, m)?;
        }
        let attn = tape.softmax(scores, 3)?;
        let ctx = tape.matmul(attn, v)?;
        let ctx = tape.transpose(ctx, vec![0, 2, 1, 3])?;
        let ctx = tape.reshape(ctx, vec![b, lq, self.d_model])?;
        let out = self.output.forward(tape, ctx)?;
        if unbatched {
            tape.reshape(out, vec![lq, self.d_model])
        } else {
            Ok(out)
        }
    }
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::tensor::Tensor;

    /// Single-head attention whose four projections are the identity.
    fn identity_attention(d: usize) -> (ParamStore, MultiHeadAttention) {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mha = MultiHeadAttention::new(&mut store, "attn", d, 1, &mut rng).unwrap();
        for proj in ["q", "k", "v", "o"] {
            store.set_value(&format!("attn.{proj}.weight"), Tensor::eye(d)).unwrap();
        }
        (store, mha)
    }

    #[test]
    fn single_value_row_is_copied_to_every_output() {
        let (store, mha) = identity_attention(3);
        let mut tape = Tape::with_params(&store);
        let q = tape.leaf(Tensor::new(vec![4, 3], vec![0.3, -1.0, 2.0, 5.0, 0.0, 0.1, -2.0, 1.0, 1.0, 0.0, 0.0, 0.0]).unwrap());
        let kv = tape.leaf(Tensor::new(vec![1, 3], vec![0.7, -0.2, 1.9]).unwrap());
        let out = mha.forward(&mut tape, q, kv, kv, None).unwrap();
        for r in 0..4 {
            let row = tape.value(out).row(r).to_vec();
            for (a, b) in row.iter().zip([0.7, -0.2, 1.9]) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn aligned_key_dominates() {
        // query along key 1 with a large scale; key 2 orthogonal to the query
        let (store, mha) = identity_attention(2);
        let mut tape = Tape::with_params(&store);
        let q = tape.leaf(Tensor::new(vec![1, 2], vec![30.0, 0.0]).unwrap());
        let k = tape.leaf(Tensor::new(vec![2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap());
        let v = tape.leaf(Tensor::new(vec![2, 2], vec![1.0, 2.0, -3.0, 4.0]).unwrap());
        let out = mha.forward(&mut tape, q, k, v, None).unwrap();
        // weights: softmax([30/sqrt(2), 0]) -> w1 = 1/(1+exp(-21.21))
        let w1 = 1.0 / (1.0 + (-30.0 / 2f64.sqrt()).exp());
        let want = [w1 * 1.0 + (1.0 - w1) * -3.0, w1 * 2.0 + (1.0 - w1) * 4.0];
        let got = tape.value(out).data();
        for (a, b) in got.iter().zip(want) {
            assert!((a - b).abs() < 1e-9);
        }
        assert!((got[0] - 1.0).abs() < 1e-8 && (got[1] - 2.0).abs() < 1e-8);
    }

    #[test]
    fn outputs_stay_in_value_hull() {
        let (store, mha) = identity_attention(2);
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mut tape = Tape::with_params(&store);
        let rand = |rng: &mut ChaCha8Rng, n: usize| (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect::<Vec<f64>>();
        let q = tape.leaf(Tensor::new(vec![5, 2], rand(&mut rng, 10)).unwrap());
        let k = tape.leaf(Tensor::new(vec![3, 2], rand(&mut rng, 6)).unwrap());
        let v = tape.leaf(Tensor::new(vec![3, 2], rand(&mut rng, 6)).unwrap());
        let out = mha.forward(&mut tape, q, k, v, None).unwrap();
        let vals = tape.value(v).clone();
        for r in 0..5 {
            for c in 0..2 {
                let x = tape.value(out).row(r)[c];
                let lo = (0..3).map(|i| vals.row(i)[c]).fold(f64::INFINITY, f64::min);
                let hi = (0..3).map(|i| vals.row(i)[c]).fold(f64::NEG_INFINITY, f64::max);
                assert!(x >= lo - 1e-12 && x <= hi + 1e-12);
            }
        }
    }

    #[test]
    fn indivisible_heads_rejected() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(MultiHeadAttention::new(&mut store, "a", 10, 4, &mut rng).is_err());
    }

    #[test]
    fn batched_and_shared_keys_agree() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mha = MultiHeadAttention::new(&mut store, "a", 4, 2, &mut rng).unwrap();
        let data: Vec<f64> = (0..24).map(|i| ((i * 7) % 11) as f64 / 11.0 - 0.5).collect();
        let mem: Vec<f64> = (0..12).map(|i| ((i * 5) % 7) as f64 / 7.0 - 0.5).collect();
        let mut tape = Tape::with_params(&store);
        let q = tape.leaf(Tensor::new(vec![2, 3, 4], data).unwrap());
        let m = tape.leaf(Tensor::new(vec![3, 4], mem.clone()).unwrap());
        let shared = mha.forward(&mut tape, q, m, m, None).unwrap();
        let mut rep = mem.clone();
        rep.extend(mem);
        let mb = tape.leaf(Tensor::new(vec![2, 3, 4], rep).unwrap());
        let batched = mha.forward(&mut tape, q, mb, mb, None).unwrap();
        assert!(tape.value(shared).max_abs_diff(tape.value(batched)) < 1e-12);
    }
}
