use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{teacher_tokens, token_row, Decoding, Worker, WorkerInput};
use crate::autograd::{Tape, Var};
use crate::error::{CatpError, Result};
use crate::nn::{sinusoidal_positions, Bound, DecoderBlock, EncoderBlock, KeyValue, LayerNorm, Linear, ParamStore};
use crate::scalar::Scalar;
use crate::tensor::Tensor;
use crate::workers::ZERO_STEP_EPS;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TransformerWorkerConfig {
    pub d_model: usize,
    pub heads: usize,
    pub encoder_layers: usize,
    pub decoder_layers: usize,
    pub ff_hidden: usize,
    pub lx: usize,
    pub ly: usize,
    /// Number of units `|U|` in `TX`.
    pub units: usize,
    /// Maximum realised step length (world units).
    pub max_step: f64,
}

impl Default for TransformerWorkerConfig {
    fn default() -> Self {
        Self {
            d_model: 32,
            heads: 4,
            encoder_layers: 2,
            decoder_layers: 2,
            ff_hidden: 64,
            lx: 30,
            ly: 10,
            units: 1,
            max_step: 1.0,
        }
    }
}

/// Encoder-decoder attention worker.
///
/// The encoder reads the past trajectories with sinusoidal positions; the
/// decoder emits one raw displacement per future step from the start location
/// and the locations predicted so far, and each displacement passes through
/// the step constraint.
#[derive(Clone, Debug, PartialEq)]
pub struct TransformerWorker<T> {
    config: TransformerWorkerConfig,
    store: ParamStore<T>,
    input_proj: Linear,
    encoder: Vec<EncoderBlock>,
    encoder_norm: LayerNorm,
    token_proj: Linear,
    decoder: Vec<DecoderBlock>,
    decoder_norm: LayerNorm,
    head: Linear,
    enc_positions: Tensor<T>,
    dec_positions: Tensor<T>,
}

impl<T: Scalar> TransformerWorker<T> {
    pub fn new(config: TransformerWorkerConfig, seed: u64) -> Result<Self> {
        if config.lx == 0 || config.ly == 0 || config.units == 0 {
            return Err(CatpError::config("worker window lengths and unit count must be positive"));
        }
        if !(config.max_step.is_finite() && config.max_step > 0.0) {
            return Err(CatpError::config("worker max_step must be positive"));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let d = config.d_model;
        let input_proj = Linear::new(&mut store, "enc.input", 4 * config.units, d, &mut rng);
        let encoder = (0..config.encoder_layers)
            .map(|i| EncoderBlock::new(&mut store, &format!("enc.{i}"), d, config.heads, config.ff_hidden, &mut rng))
            .collect::<Result<Vec<_>>>()?;
        let encoder_norm = LayerNorm::new(&mut store, "enc.norm", d);
        let token_proj = Linear::new(&mut store, "dec.input", 4, d, &mut rng);
        let decoder = (0..config.decoder_layers)
            .map(|i| DecoderBlock::new(&mut store, &format!("dec.{i}"), d, config.heads, config.ff_hidden, &mut rng))
            .collect::<Result<Vec<_>>>()?;
        let decoder_norm = LayerNorm::new(&mut store, "dec.norm", d);
        let head = Linear::new(&mut store, "dec.head", d, 2, &mut rng);
        Ok(Self {
            enc_positions: sinusoidal_positions(config.lx, d),
            dec_positions: sinusoidal_positions(config.ly, d),
            config,
            store,
            input_proj,
            encoder,
            encoder_norm,
            token_proj,
            decoder,
            decoder_norm,
            head,
        })
    }

    pub fn from_parts(config: TransformerWorkerConfig, params: ParamStore<T>) -> Result<Self> {
        let mut w = Self::new(config, 0)?;
        check_layout(&w.store, &params)?;
        w.store = params;
        Ok(w)
    }

    pub fn config(&self) -> &TransformerWorkerConfig {
        &self.config
    }

    pub fn zero_head(&mut self) {
        let (wid, bid) = (self.head.weight, self.head.bias);
        self.store.get_mut(wid).data_mut().iter_mut().for_each(|x| *x = T::zero());
        self.store.get_mut(bid).data_mut().iter_mut().for_each(|x| *x = T::zero());
    }

    fn encode(&self, tape: &mut Tape<T>, p: &Bound, input: &WorkerInput<T>) -> Result<Vec<KeyValue>> {
        let (rows, cols) = input.features.shape();
        if rows != self.config.lx || cols != 4 * self.config.units {
            return Err(CatpError::invalid(format!(
                "worker expects TX of {} steps × {} units, got {rows} steps × {} units",
                self.config.lx,
                self.config.units,
                cols / 4
            )));
        }
        let x = tape.constant(input.features.clone());
        let x = self.input_proj.forward(tape, p, x);
        let pos = tape.constant(self.enc_positions.clone());
        let mut h = tape.add(x, pos);
        for block in &self.encoder {
            h = block.forward(tape, p, h).0;
        }
        let memory = self.encoder_norm.forward(tape, p, h);
        Ok(self
            .decoder
            .iter()
            .map(|b| b.cross_attn.project_memory(tape, p, memory))
            .collect())
    }

    /// Raw displacements for each decoder token (`n × 4` in, `n × 2` out).
    fn decode(&self, tape: &mut Tape<T>, p: &Bound, tokens: Var, memory: &[KeyValue]) -> Var {
        let n = tape.value(tokens).rows();
        let x = self.token_proj.forward(tape, p, tokens);
        let pos = if n == self.config.ly {
            self.dec_positions.clone()
        } else {
            Tensor::from_vec(n, self.config.d_model, self.dec_positions.data()[..n * self.config.d_model].to_vec())
        };
        let pos = tape.constant(pos);
        let mut h = tape.add(x, pos);
        for (block, kv) in self.decoder.iter().zip(memory) {
            h = block.forward(tape, p, h, *kv);
        }
        let h = self.decoder_norm.forward(tape, p, h);
        self.head.forward(tape, p, h)
    }
}

pub(crate) fn check_layout<T: Scalar>(expected: &ParamStore<T>, got: &ParamStore<T>) -> Result<()> {
    if expected.len() != got.len() {
        return Err(CatpError::invalid(format!(
            "parameter count mismatch: architecture has {}, checkpoint has {}",
            expected.len(),
            got.len()
        )));
    }
    for (i, (a, b)) in expected.values().iter().zip(got.values()).enumerate() {
        let id = crate::nn::ParamId(i);
        if expected.name(id) != got.name(id) || a.shape() != b.shape() {
            return Err(CatpError::invalid(format!(
                "parameter '{}' {:?} does not match checkpoint '{}' {:?}",
                expected.name(id),
                a.shape(),
                got.name(id),
                b.shape()
            )));
        }
    }
    Ok(())
}

impl<T: Scalar> Worker<T> for TransformerWorker<T> {
    fn params(&self) -> &ParamStore<T> {
        &self.store
    }

    fn params_mut(&mut self) -> &mut ParamStore<T> {
        &mut self.store
    }

    fn max_step(&self) -> T {
        T::lit(self.config.max_step)
    }

    fn horizon(&self) -> usize {
        self.config.ly
    }

    fn forward(&self, tape: &mut Tape<T>, p: &Bound, input: &WorkerInput<T>, decoding: Decoding) -> Result<Var> {
        let memory = self.encode(tape, p, input)?;
        let max_step = self.max_step();
        let eps = T::lit(ZERO_STEP_EPS);
        let ly = self.config.ly;
        match decoding {
            Decoding::TeacherForced => {
                let (tokens, origins) = teacher_tokens(input, ly, max_step)?;
                let tokens = tape.constant(tokens);
                let raw = self.decode(tape, p, tokens, &memory);
                let steps = tape.step_constraint(raw, max_step, eps);
                let origins = tape.constant(origins);
                Ok(tape.add(origins, steps))
            }
            Decoding::Rollout => {
                let pos_scale = T::one() / (max_step * T::from_usize_lossy(ly));
                let disp_scale = T::one() / max_step;
                let first = token_row([T::zero(); 2], input.last_displacement, pos_scale, disp_scale);
                let mut tokens = vec![tape.constant(Tensor::from_vec(1, 4, first.to_vec()))];
                let mut rel = tape.constant(Tensor::zeros(1, 2));
                let mut locs = Vec::with_capacity(ly);
                for i in 0..ly {
                    let seq = if tokens.len() == 1 { tokens[0] } else { tape.concat_rows(&tokens) };
                    let raw = self.decode(tape, p, seq, &memory);
                    let raw = tape.slice_rows(raw, i, 1);
                    let step = tape.step_constraint(raw, max_step, eps);
                    rel = tape.add(rel, step);
                    locs.push(rel);
                    if i + 1 < ly {
                        let a = tape.scale(rel, pos_scale);
                        let b = tape.scale(step, disp_scale);
                        tokens.push(tape.concat_cols(&[a, b]));
                    }
                }
                let path = tape.concat_rows(&locs);
                let start = tape.constant(Tensor::from_vec(1, 2, input.start.to_vec()));
                Ok(tape.add_row(path, start))
            }
        }
    }
}
