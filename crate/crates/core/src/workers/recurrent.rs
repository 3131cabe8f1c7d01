use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::transformer::check_layout;
use super::{teacher_tokens, token_row, Decoding, Worker, WorkerInput};
use crate::autograd::{Tape, Var};
use crate::error::{CatpError, Result};
use crate::nn::{Bound, Linear, ParamId, ParamStore};
use crate::scalar::Scalar;
use crate::tensor::Tensor;
use crate::workers::ZERO_STEP_EPS;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RecurrentWorkerConfig {
    pub hidden: usize,
    pub lx: usize,
    pub ly: usize,
    pub units: usize,
    pub max_step: f64,
}

impl Default for RecurrentWorkerConfig {
    fn default() -> Self {
        Self {
            hidden: 32,
            lx: 30,
            ly: 10,
            units: 1,
            max_step: 1.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
struct GruCell {
    input: [Linear; 3],
    recurrent: [ParamId; 3],
}

impl GruCell {
    fn new<T: Scalar>(store: &mut ParamStore<T>, name: &str, inputs: usize, hidden: usize, rng: &mut ChaCha8Rng) -> Self {
        let gate = |g: &str, store: &mut ParamStore<T>, rng: &mut ChaCha8Rng| {
            Linear::new(store, &format!("{name}.{g}.x"), inputs, hidden, rng)
        };
        let input = [gate("z", store, rng), gate("r", store, rng), gate("n", store, rng)];
        let recurrent = ["z", "r", "n"].map(|g| store.add_xavier(&format!("{name}.{g}.h"), hidden, hidden, rng));
        Self { input, recurrent }
    }

    fn step<T: Scalar>(&self, tape: &mut Tape<T>, p: &Bound, x: Var, h: Var) -> Var {
        let [xz, xr, xn] = &self.input;
        let xz = xz.forward(tape, p, x);
        let hz = tape.matmul(h, p.var(self.recurrent[0]));
        let z = tape.add(xz, hz);
        let z = tape.sigmoid(z);
        let xr = xr.forward(tape, p, x);
        let hr = tape.matmul(h, p.var(self.recurrent[1]));
        let r = tape.add(xr, hr);
        let r = tape.sigmoid(r);
        let xn = xn.forward(tape, p, x);
        let rh = tape.mul(r, h);
        let hn = tape.matmul(rh, p.var(self.recurrent[2]));
        let n = tape.add(xn, hn);
        let n = tape.tanh(n);
        // h' = n + z ⊙ (h − n)
        let d = tape.sub(h, n);
        let zd = tape.mul(z, d);
        tape.add(n, zd)
    }
}

/// Gated recurrent encoder-decoder worker.
#[derive(Clone, Debug, PartialEq)]
pub struct RecurrentWorker<T> {
    config: RecurrentWorkerConfig,
    store: ParamStore<T>,
    encoder: GruCell,
    decoder: GruCell,
    head: Linear,
}

impl<T: Scalar> RecurrentWorker<T> {
    pub fn new(config: RecurrentWorkerConfig, seed: u64) -> Result<Self> {
        if config.lx == 0 || config.ly == 0 || config.units == 0 || config.hidden == 0 {
            return Err(CatpError::config("recurrent worker sizes must be positive"));
        }
        if !(config.max_step.is_finite() && config.max_step > 0.0) {
            return Err(CatpError::config("worker max_step must be positive"));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let encoder = GruCell::new(&mut store, "enc", 4 * config.units, config.hidden, &mut rng);
        let decoder = GruCell::new(&mut store, "dec", 4, config.hidden, &mut rng);
        let head = Linear::new(&mut store, "head", config.hidden, 2, &mut rng);
        Ok(Self {
            config,
            store,
            encoder,
            decoder,
            head,
        })
    }

    pub fn from_parts(config: RecurrentWorkerConfig, params: ParamStore<T>) -> Result<Self> {
        let mut w = Self::new(config, 0)?;
        check_layout(&w.store, &params)?;
        w.store = params;
        Ok(w)
    }

    pub fn config(&self) -> &RecurrentWorkerConfig {
        &self.config
    }

    pub fn zero_head(&mut self) {
        for id in [self.head.weight, self.head.bias] {
            self.store.get_mut(id).data_mut().iter_mut().for_each(|x| *x = T::zero());
        }
    }

    fn encode(&self, tape: &mut Tape<T>, p: &Bound, input: &WorkerInput<T>) -> Result<Var> {
        let (rows, cols) = input.features.shape();
        if rows != self.config.lx || cols != 4 * self.config.units {
            return Err(CatpError::invalid(format!(
                "worker expects TX of {} steps × {} units, got {rows} steps × {} units",
                self.config.lx,
                self.config.units,
                cols / 4
            )));
        }
        let features = tape.constant(input.features.clone());
        let mut h = tape.constant(Tensor::zeros(1, self.config.hidden));
        for r in 0..rows {
            let x = tape.slice_rows(features, r, 1);
            h = self.encoder.step(tape, p, x, h);
        }
        Ok(h)
    }
}

impl<T: Scalar> Worker<T> for RecurrentWorker<T> {
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
        let mut h = self.encode(tape, p, input)?;
        let max_step = self.max_step();
        let eps = T::lit(ZERO_STEP_EPS);
        let ly = self.config.ly;
        match decoding {
            Decoding::TeacherForced => {
                let (tokens, origins) = teacher_tokens(input, ly, max_step)?;
                let tokens = tape.constant(tokens);
                let mut raws = Vec::with_capacity(ly);
                for j in 0..ly {
                    let x = tape.slice_rows(tokens, j, 1);
                    h = self.decoder.step(tape, p, x, h);
                    raws.push(self.head.forward(tape, p, h));
                }
                let raw = tape.concat_rows(&raws);
                let steps = tape.step_constraint(raw, max_step, eps);
                let origins = tape.constant(origins);
                Ok(tape.add(origins, steps))
            }
            Decoding::Rollout => {
                let pos_scale = T::one() / (max_step * T::from_usize_lossy(ly));
                let disp_scale = T::one() / max_step;
                let first = token_row([T::zero(); 2], input.last_displacement, pos_scale, disp_scale);
                let mut token = tape.constant(Tensor::from_vec(1, 4, first.to_vec()));
                let mut rel = tape.constant(Tensor::zeros(1, 2));
                let mut locs = Vec::with_capacity(ly);
                for _ in 0..ly {
                    h = self.decoder.step(tape, p, token, h);
                    let raw = self.head.forward(tape, p, h);
                    let step = tape.step_constraint(raw, max_step, eps);
                    rel = tape.add(rel, step);
                    locs.push(rel);
                    let a = tape.scale(rel, pos_scale);
                    let b = tape.scale(step, disp_scale);
                    token = tape.concat_cols(&[a, b]);
                }
                let path = tape.concat_rows(&locs);
                let start = tape.constant(Tensor::from_vec(1, 2, input.start.to_vec()));
                Ok(tape.add_row(path, start))
            }
        }
    }
}
