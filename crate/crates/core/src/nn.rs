//! Parameter storage, transformer building blocks and the Adam optimizer.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{ParamGrads, Tape, Var};
use crate::error::{CatpError, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Identifier of a tensor inside a [`ParamStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamId(pub usize);

/// Named, ordered parameter tensors of one model.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParamStore<T> {
    names: Vec<String>,
    values: Vec<Tensor<T>>,
}

impl<T: Scalar> Default for ParamStore<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        Self {
            names: Vec::new(),
            values: Vec::new(),
        }
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor<T>) -> ParamId {
        self.names.push(name.into());
        self.values.push(value);
        ParamId(self.values.len() - 1)
    }

    /// Xavier-uniform initialised `fan_in × fan_out` matrix.
    pub fn add_xavier<R: Rng>(&mut self, name: &str, fan_in: usize, fan_out: usize, rng: &mut R) -> ParamId {
        let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
        let data = (0..fan_in * fan_out)
            .map(|_| T::lit(rng.gen_range(-bound..bound)))
            .collect();
        self.add(name, Tensor::from_vec(fan_in, fan_out, data))
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor<T> {
        &self.values[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.values[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    pub fn values(&self) -> &[Tensor<T>] {
        &self.values
    }

    pub fn num_scalars(&self) -> usize {
        self.values.iter().map(|v| v.data().len()).sum()
    }

    /// Puts every parameter on the tape; index `i` of the result is `ParamId(i)`.
    pub fn bind(&self, tape: &mut Tape<T>) -> Bound {
        Bound(
            self.values
                .iter()
                .enumerate()
                .map(|(i, v)| tape.param(i, v.clone()))
                .collect(),
        )
    }

    /// Flattened copy of all parameters, in store order.
    pub fn flatten(&self) -> Vec<T> {
        self.values.iter().flat_map(|v| v.data().iter().copied()).collect()
    }

    /// Inverse of [`ParamStore::flatten`].
    pub fn assign_flat(&mut self, flat: &[T]) -> Result<()> {
        if flat.len() != self.num_scalars() {
            return Err(CatpError::invalid(format!(
                "expected {} parameters, got {}",
                self.num_scalars(),
                flat.len()
            )));
        }
        let mut offset = 0;
        for v in &mut self.values {
            let n = v.data().len();
            v.data_mut().copy_from_slice(&flat[offset..offset + n]);
            offset += n;
        }
        Ok(())
    }

    /// Order-sensitive FNV-1a fingerprint of all parameter bits.
    pub fn fingerprint(&self) -> u64 {
        let mut h: u64 = 0xcbf29ce484222325;
        for v in &self.values {
            for &x in v.data() {
                for b in x.as_f64().to_bits().to_le_bytes() {
                    h ^= u64::from(b);
                    h = h.wrapping_mul(0x100000001b3);
                }
            }
        }
        h
    }
}

/// Parameters placed on a tape by [`ParamStore::bind`].
#[derive(Clone, Debug)]
pub struct Bound(Vec<Var>);

impl Bound {
    #[inline]
    pub fn var(&self, id: ParamId) -> Var {
        self.0[id.0]
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
    pub fan_in: usize,
    pub fan_out: usize,
}

impl Linear {
    pub fn new<T: Scalar, R: Rng>(store: &mut ParamStore<T>, name: &str, fan_in: usize, fan_out: usize, rng: &mut R) -> Self {
        let weight = store.add_xavier(&format!("{name}.weight"), fan_in, fan_out, rng);
        let bias = store.add(format!("{name}.bias"), Tensor::zeros(1, fan_out));
        Self {
            weight,
            bias,
            fan_in,
            fan_out,
        }
    }

    pub fn forward<T: Scalar>(&self, tape: &mut Tape<T>, p: &Bound, x: Var) -> Var {
        let y = tape.matmul(x, p.var(self.weight));
        tape.add_row(y, p.var(self.bias))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerNorm {
    pub gain: ParamId,
    pub bias: ParamId,
}

impl LayerNorm {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, name: &str, dim: usize) -> Self {
        Self {
            gain: store.add(format!("{name}.gain"), Tensor::filled(1, dim, T::one())),
            bias: store.add(format!("{name}.bias"), Tensor::zeros(1, dim)),
        }
    }

    pub fn forward<T: Scalar>(&self, tape: &mut Tape<T>, p: &Bound, x: Var) -> Var {
        tape.layer_norm(x, p.var(self.gain), p.var(self.bias), T::lit(1e-5))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MultiHeadAttention {
    pub query: Linear,
    pub key: Linear,
    pub value: Linear,
    pub output: Linear,
    pub heads: usize,
    pub dim: usize,
}

/// Projected keys and values of an attention memory, reusable across queries.
#[derive(Clone, Copy, Debug)]
pub struct KeyValue {
    pub keys: Var,
    pub values: Var,
}

impl MultiHeadAttention {
    pub fn new<T: Scalar, R: Rng>(store: &mut ParamStore<T>, name: &str, dim: usize, heads: usize, rng: &mut R) -> Result<Self> {
        if heads == 0 || dim % heads != 0 {
            return Err(CatpError::config(format!(
                "model width {dim} is not divisible by head count {heads}"
            )));
        }
        Ok(Self {
            query: Linear::new(store, &format!("{name}.q"), dim, dim, rng),
            key: Linear::new(store, &format!("{name}.k"), dim, dim, rng),
            value: Linear::new(store, &format!("{name}.v"), dim, dim, rng),
            output: Linear::new(store, &format!("{name}.o"), dim, dim, rng),
            heads,
            dim,
        })
    }

    pub fn project_memory<T: Scalar>(&self, tape: &mut Tape<T>, p: &Bound, memory: Var) -> KeyValue {
        KeyValue {
            keys: self.key.forward(tape, p, memory),
            values: self.value.forward(tape, p, memory),
        }
    }

    /// Attention of `queries` over `kv`; also returns the per-head weight matrices.
    pub fn attend<T: Scalar>(&self, tape: &mut Tape<T>, p: &Bound, queries: Var, kv: KeyValue, causal: bool) -> (Var, Vec<Var>) {
        let q = self.query.forward(tape, p, queries);
        let head_dim = self.dim / self.heads;
        let inv_sqrt = T::one() / T::from_usize_lossy(head_dim).sqrt();
        let mut outs = Vec::with_capacity(self.heads);
        let mut weights = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let start = h * head_dim;
            let (qh, kh, vh) = if self.heads == 1 {
                (q, kv.keys, kv.values)
            } else {
                (
                    tape.slice_cols(q, start, head_dim),
                    tape.slice_cols(kv.keys, start, head_dim),
                    tape.slice_cols(kv.values, start, head_dim),
                )
            };
            let scores = tape.matmul_bt(qh, kh);
            let scores = tape.scale(scores, inv_sqrt);
            let w = tape.softmax_rows(scores, causal);
            outs.push(tape.matmul(w, vh));
            weights.push(w);
        }
        let merged = if outs.len() == 1 { outs[0] } else { tape.concat_cols(&outs) };
        (self.output.forward(tape, p, merged), weights)
    }

    pub fn self_attend<T: Scalar>(&self, tape: &mut Tape<T>, p: &Bound, x: Var, causal: bool) -> (Var, Vec<Var>) {
        let kv = self.project_memory(tape, p, x);
        self.attend(tape, p, x, kv, causal)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FeedForward {
    pub inner: Linear,
    pub outer: Linear,
}

impl FeedForward {
    pub fn new<T: Scalar, R: Rng>(store: &mut ParamStore<T>, name: &str, dim: usize, hidden: usize, rng: &mut R) -> Self {
        Self {
            inner: Linear::new(store, &format!("{name}.ff1"), dim, hidden, rng),
            outer: Linear::new(store, &format!("{name}.ff2"), hidden, dim, rng),
        }
    }

    pub fn forward<T: Scalar>(&self, tape: &mut Tape<T>, p: &Bound, x: Var) -> Var {
        let h = self.inner.forward(tape, p, x);
        let h = tape.relu(h);
        self.outer.forward(tape, p, h)
    }
}

/// Pre-norm transformer encoder block.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EncoderBlock {
    pub norm_attn: LayerNorm,
    pub attn: MultiHeadAttention,
    pub norm_ff: LayerNorm,
    pub ff: FeedForward,
}

impl EncoderBlock {
    pub fn new<T: Scalar, R: Rng>(store: &mut ParamStore<T>, name: &str, dim: usize, heads: usize, hidden: usize, rng: &mut R) -> Result<Self> {
        Ok(Self {
            norm_attn: LayerNorm::new(store, &format!("{name}.ln1"), dim),
            attn: MultiHeadAttention::new(store, &format!("{name}.attn"), dim, heads, rng)?,
            norm_ff: LayerNorm::new(store, &format!("{name}.ln2"), dim),
            ff: FeedForward::new(store, name, dim, hidden, rng),
        })
    }

    pub fn forward<T: Scalar>(&self, tape: &mut Tape<T>, p: &Bound, x: Var) -> (Var, Vec<Var>) {
        let h = self.norm_attn.forward(tape, p, x);
        let (a, weights) = self.attn.self_attend(tape, p, h, false);
        let x = tape.add(x, a);
        let h = self.norm_ff.forward(tape, p, x);
        let f = self.ff.forward(tape, p, h);
        (tape.add(x, f), weights)
    }
}

/// Pre-norm transformer decoder block: causal self-attention, cross-attention, feed-forward.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DecoderBlock {
    pub norm_self: LayerNorm,
    pub self_attn: MultiHeadAttention,
    pub norm_cross: LayerNorm,
    pub cross_attn: MultiHeadAttention,
    pub norm_ff: LayerNorm,
    pub ff: FeedForward,
}

impl DecoderBlock {
    pub fn new<T: Scalar, R: Rng>(store: &mut ParamStore<T>, name: &str, dim: usize, heads: usize, hidden: usize, rng: &mut R) -> Result<Self> {
        Ok(Self {
            norm_self: LayerNorm::new(store, &format!("{name}.ln1"), dim),
            self_attn: MultiHeadAttention::new(store, &format!("{name}.self"), dim, heads, rng)?,
            norm_cross: LayerNorm::new(store, &format!("{name}.ln2"), dim),
            cross_attn: MultiHeadAttention::new(store, &format!("{name}.cross"), dim, heads, rng)?,
            norm_ff: LayerNorm::new(store, &format!("{name}.ln3"), dim),
            ff: FeedForward::new(store, name, dim, hidden, rng),
        })
    }

    pub fn forward<T: Scalar>(&self, tape: &mut Tape<T>, p: &Bound, x: Var, memory: KeyValue) -> Var {
        let h = self.norm_self.forward(tape, p, x);
        let (a, _) = self.self_attn.self_attend(tape, p, h, true);
        let x = tape.add(x, a);
        let h = self.norm_cross.forward(tape, p, x);
        let (c, _) = self.cross_attn.attend(tape, p, h, memory, false);
        let x = tape.add(x, c);
        let h = self.norm_ff.forward(tape, p, x);
        let f = self.ff.forward(tape, p, h);
        tape.add(x, f)
    }
}

/// Sinusoidal positional embedding table of shape `len × dim`.
pub fn sinusoidal_positions<T: Scalar>(len: usize, dim: usize) -> Tensor<T> {
    let mut t = Tensor::zeros(len, dim);
    for pos in 0..len {
        for i in 0..dim {
            let pair = (i / 2) as f64;
            let angle = pos as f64 / 10000f64.powf(2.0 * pair / dim as f64);
            let v = if i % 2 == 0 { angle.sin() } else { angle.cos() };
            t.set(pos, i, T::lit(v));
        }
    }
    t
}

/// Adam with global-norm gradient clipping.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Adam<T> {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub clip_norm: Option<f64>,
    step: u64,
    first: Vec<Tensor<T>>,
    second: Vec<Tensor<T>>,
}

impl<T: Scalar> Adam<T> {
    pub fn new(store: &ParamStore<T>, learning_rate: f64) -> Self {
        let zeros: Vec<Tensor<T>> = store
            .values()
            .iter()
            .map(|v| Tensor::zeros(v.rows(), v.cols()))
            .collect();
        Self {
            learning_rate,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            clip_norm: Some(1.0),
            step: 0,
            first: zeros.clone(),
            second: zeros,
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// Applies one update; parameters without a gradient are left untouched.
    pub fn step(&mut self, store: &mut ParamStore<T>, grads: &ParamGrads<T>) {
        self.step += 1;
        let clip = match self.clip_norm {
            Some(max) => {
                let norm = grads.norm().as_f64();
                if norm > max {
                    max / norm
                } else {
                    1.0
                }
            }
            None => 1.0,
        };
        let (b1, b2) = (self.beta1, self.beta2);
        let t = self.step as i32;
        let lr_t = self.learning_rate * (1.0 - b2.powi(t)).sqrt() / (1.0 - b1.powi(t));
        let (b1, b2, lr_t, eps, clip) = (T::lit(b1), T::lit(b2), T::lit(lr_t), T::lit(self.eps), T::lit(clip));
        for (i, value) in store.values.iter_mut().enumerate() {
            let Some(g) = grads.get(i) else { continue };
            let m = &mut self.first[i];
            let v = &mut self.second[i];
            for (((w, &gi), mi), vi) in value
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .zip(m.data_mut().iter_mut())
                .zip(v.data_mut().iter_mut())
            {
                let gi = gi * clip;
                *mi = b1 * *mi + (T::one() - b1) * gi;
                *vi = b2 * *vi + (T::one() - b2) * gi * gi;
                *w = *w - lr_t * *mi / (vi.sqrt() + eps);
            }
        }
    }
}
