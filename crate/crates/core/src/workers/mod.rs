//! Worker models: sequence predictors mapping past trajectories `TX` to the
//! target unit's future trajectory under the step constraint.

mod constraint;
mod loss;
mod recurrent;
mod transformer;

use serde::{Deserialize, Serialize};

pub use constraint::{apply_step_constraint, ZERO_STEP_EPS};
pub use loss::{ade, fde, mse, WorkerLoss};
pub use recurrent::{RecurrentWorker, RecurrentWorkerConfig};
pub use transformer::{TransformerWorker, TransformerWorkerConfig};
pub(crate) use transformer::check_layout;

use crate::autograd::{ParamGrads, Tape, Var};
use crate::error::{CatpError, Result};
use crate::nn::{Bound, ParamStore};
use crate::sample::{DataSample, Point};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Decoding regime of a forward pass.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Decoding {
    /// Ground-truth previous locations feed each step.
    TeacherForced,
    /// Each step consumes the previously predicted locations.
    Rollout,
}

/// Model-ready view of one sample's trajectories.
///
/// Encoder features per past step and unit are the unit's location relative
/// to the target's current location (scaled by `1 / (max_step · LX)`) and its
/// displacement since the previous step (scaled by `1 / max_step`).
#[derive(Clone, Debug, PartialEq)]
pub struct WorkerInput<T> {
    pub features: Tensor<T>,
    pub start: Point<T>,
    pub last_displacement: Point<T>,
    /// `LY × 2` ground truth, when known.
    pub target: Option<Tensor<T>>,
}

impl<T: Scalar> WorkerInput<T> {
    pub fn from_sample(sample: &DataSample<T>, max_step: T) -> Result<Self> {
        let lx = sample.past.first().map_or(0, |t| t.len());
        if lx == 0 || sample.target_id >= sample.past.len() {
            return Err(CatpError::invalid("sample has no past trajectory for its target"));
        }
        if sample.past.iter().any(|t| t.len() != lx) {
            return Err(CatpError::invalid("past trajectories have unequal lengths"));
        }
        let start = sample.start_location();
        let pos_scale = T::one() / (max_step * T::from_usize_lossy(lx));
        let disp_scale = T::one() / max_step;
        let units = sample.past.len();
        let mut features = Tensor::zeros(lx, 4 * units);
        for (u, traj) in sample.past.iter().enumerate() {
            for (r, p) in traj.points.iter().enumerate() {
                let prev = if r == 0 { *p } else { traj.points[r - 1] };
                let row = features.row_mut(r);
                row[4 * u] = (p[0] - start[0]) * pos_scale;
                row[4 * u + 1] = (p[1] - start[1]) * pos_scale;
                row[4 * u + 2] = (p[0] - prev[0]) * disp_scale;
                row[4 * u + 3] = (p[1] - prev[1]) * disp_scale;
            }
        }
        let own = &sample.past[sample.target_id].points;
        let last_displacement = if own.len() >= 2 {
            let (a, b) = (own[own.len() - 2], own[own.len() - 1]);
            [b[0] - a[0], b[1] - a[1]]
        } else {
            [T::zero(), T::zero()]
        };
        Ok(Self {
            features,
            start,
            last_displacement,
            target: Some(sample.target_matrix()),
        })
    }

    pub fn past_len(&self) -> usize {
        self.features.rows()
    }

    pub fn units(&self) -> usize {
        self.features.cols() / 4
    }

    pub fn target_points(&self) -> Option<Vec<Point<T>>> {
        self.target
            .as_ref()
            .map(|t| (0..t.rows()).map(|r| [t.get(r, 0), t.get(r, 1)]).collect())
    }
}

/// Any sequence predictor usable as a worker.
pub trait Worker<T: Scalar> {
    fn params(&self) -> &ParamStore<T>;
    fn params_mut(&mut self) -> &mut ParamStore<T>;
    fn max_step(&self) -> T;
    /// Number of predicted points `LY`.
    fn horizon(&self) -> usize;
    /// Predicted absolute locations, `LY × 2`.
    fn forward(&self, tape: &mut Tape<T>, p: &Bound, input: &WorkerInput<T>, decoding: Decoding) -> Result<Var>;
}

/// Decoder token for a location relative to the start and the step that reached it.
pub(crate) fn token_row<T: Scalar>(rel: Point<T>, disp: Point<T>, pos_scale: T, disp_scale: T) -> [T; 4] {
    [rel[0] * pos_scale, rel[1] * pos_scale, disp[0] * disp_scale, disp[1] * disp_scale]
}

/// Teacher-forced decoder tokens (`LY × 4`) and the absolute locations each
/// prediction step starts from (`LY × 2`).
pub(crate) fn teacher_tokens<T: Scalar>(input: &WorkerInput<T>, horizon: usize, max_step: T) -> Result<(Tensor<T>, Tensor<T>)> {
    let target = input
        .target
        .as_ref()
        .ok_or_else(|| CatpError::invalid("teacher forcing needs the target trajectory"))?;
    if target.rows() != horizon {
        return Err(CatpError::invalid(format!("target has {} points, worker predicts {horizon}", target.rows())));
    }
    let pos_scale = T::one() / (max_step * T::from_usize_lossy(horizon));
    let disp_scale = T::one() / max_step;
    let mut tokens = Tensor::zeros(horizon, 4);
    let mut origins = Tensor::zeros(horizon, 2);
    let mut prev = input.start;
    let mut disp = input.last_displacement;
    for j in 0..horizon {
        let rel = [prev[0] - input.start[0], prev[1] - input.start[1]];
        tokens.row_mut(j).copy_from_slice(&token_row(rel, disp, pos_scale, disp_scale));
        origins.row_mut(j).copy_from_slice(&prev);
        let next = [target.get(j, 0), target.get(j, 1)];
        disp = [next[0] - prev[0], next[1] - prev[1]];
        prev = next;
    }
    Ok((tokens, origins))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum WorkerArch {
    Transformer(TransformerWorkerConfig),
    Recurrent(RecurrentWorkerConfig),
}

impl WorkerArch {
    pub fn horizon(&self) -> usize {
        match self {
            Self::Transformer(c) => c.ly,
            Self::Recurrent(c) => c.ly,
        }
    }
}

/// A worker of either built-in architecture.
#[derive(Clone, Debug, PartialEq)]
pub enum AnyWorker<T> {
    Transformer(TransformerWorker<T>),
    Recurrent(RecurrentWorker<T>),
}

impl<T: Scalar> AnyWorker<T> {
    pub fn new(arch: &WorkerArch, seed: u64) -> Result<Self> {
        Ok(match arch {
            WorkerArch::Transformer(c) => Self::Transformer(TransformerWorker::new(c.clone(), seed)?),
            WorkerArch::Recurrent(c) => Self::Recurrent(RecurrentWorker::new(c.clone(), seed)?),
        })
    }

    /// Rebuilds a worker from its architecture and saved parameters.
    pub fn from_parts(arch: &WorkerArch, params: ParamStore<T>) -> Result<Self> {
        Ok(match arch {
            WorkerArch::Transformer(c) => Self::Transformer(TransformerWorker::from_parts(c.clone(), params)?),
            WorkerArch::Recurrent(c) => Self::Recurrent(RecurrentWorker::from_parts(c.clone(), params)?),
        })
    }

    pub fn arch(&self) -> WorkerArch {
        match self {
            Self::Transformer(w) => WorkerArch::Transformer(w.config().clone()),
            Self::Recurrent(w) => WorkerArch::Recurrent(w.config().clone()),
        }
    }

    /// Zeroes the output head so every raw displacement is `(0, 0)`.
    pub fn zero_head(&mut self) {
        match self {
            Self::Transformer(w) => w.zero_head(),
            Self::Recurrent(w) => w.zero_head(),
        }
    }
}

impl<T: Scalar> Worker<T> for AnyWorker<T> {
    fn params(&self) -> &ParamStore<T> {
        match self {
            Self::Transformer(w) => w.params(),
            Self::Recurrent(w) => w.params(),
        }
    }

    fn params_mut(&mut self) -> &mut ParamStore<T> {
        match self {
            Self::Transformer(w) => w.params_mut(),
            Self::Recurrent(w) => w.params_mut(),
        }
    }

    fn max_step(&self) -> T {
        match self {
            Self::Transformer(w) => w.max_step(),
            Self::Recurrent(w) => w.max_step(),
        }
    }

    fn horizon(&self) -> usize {
        match self {
            Self::Transformer(w) => w.horizon(),
            Self::Recurrent(w) => w.horizon(),
        }
    }

    fn forward(&self, tape: &mut Tape<T>, p: &Bound, input: &WorkerInput<T>, decoding: Decoding) -> Result<Var> {
        match self {
            Self::Transformer(w) => w.forward(tape, p, input, decoding),
            Self::Recurrent(w) => w.forward(tape, p, input, decoding),
        }
    }
}

/// Autoregressive prediction of the target's next `LY` locations.
pub fn predict<T: Scalar, W: Worker<T> + ?Sized>(worker: &W, input: &WorkerInput<T>) -> Result<Vec<Point<T>>> {
    let mut tape = Tape::inference();
    let p = worker.params().bind(&mut tape);
    let out = worker.forward(&mut tape, &p, input, Decoding::Rollout)?;
    let m = tape.value(out);
    Ok((0..m.rows()).map(|r| [m.get(r, 0), m.get(r, 1)]).collect())
}

/// Loss of the rollout prediction against the input's target.
pub fn rollout_loss<T: Scalar, W: Worker<T> + ?Sized>(worker: &W, input: &WorkerInput<T>, loss: WorkerLoss) -> Result<T> {
    let truth = input
        .target_points()
        .ok_or_else(|| CatpError::invalid("sample has no target trajectory"))?;
    loss.eval(&truth, &predict(worker, input)?)
}

/// Mean loss over `inputs` and its parameter gradient.
pub fn loss_and_grad<T: Scalar, W: Worker<T> + ?Sized>(
    worker: &W,
    inputs: &[&WorkerInput<T>],
    loss: WorkerLoss,
    decoding: Decoding,
) -> Result<(T, ParamGrads<T>)> {
    if inputs.is_empty() {
        return Err(CatpError::invalid("empty sub-batch"));
    }
    let mut tape = Tape::new();
    let p = worker.params().bind(&mut tape);
    let mut losses = Vec::with_capacity(inputs.len());
    for input in inputs {
        let pred = worker.forward(&mut tape, &p, input, decoding)?;
        let truth = input
            .target
            .clone()
            .ok_or_else(|| CatpError::invalid("training sample has no target"))?;
        let truth = tape.constant(truth);
        losses.push(loss.on_tape(&mut tape, truth, pred));
    }
    let stacked = tape.concat_rows(&losses);
    let mean = tape.mean(stacked);
    let value = tape.scalar_value(mean);
    Ok((value, tape.backward(mean, worker.params().len())))
}

/// Per-sample losses of every worker: a `batch × K` matrix.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Scalar")]
pub struct PredictionLossReport<T> {
    pub per_sample: Vec<Vec<T>>,
    pub loss_kind: WorkerLoss,
}

impl<T: Scalar> PredictionLossReport<T> {
    /// Mean loss of each worker over the batch.
    pub fn worker_means(&self) -> Vec<T> {
        let k = self.per_sample.first().map_or(0, Vec::len);
        let n = T::from_usize_lossy(self.per_sample.len());
        (0..k)
            .map(|i| self.per_sample.iter().map(|row| row[i]).sum::<T>() / n)
            .collect()
    }
}

/// Rollout loss of each worker on each sample.
pub fn per_worker_losses<T: Scalar, W: Worker<T>>(
    workers: &[W],
    batch: &[&WorkerInput<T>],
    loss: WorkerLoss,
) -> Result<PredictionLossReport<T>> {
    if batch.is_empty() {
        return Err(CatpError::invalid("empty batch"));
    }
    let per_sample = batch
        .iter()
        .map(|input| workers.iter().map(|w| rollout_loss(w, input, loss)).collect::<Result<Vec<T>>>())
        .collect::<Result<Vec<_>>>()?;
    Ok(PredictionLossReport {
        per_sample,
        loss_kind: loss,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::context::ContextWindow;
    use crate::sample::Trajectory;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    pub(crate) fn toy_sample(seed: u64, lx: usize, ly: usize, units: usize) -> DataSample<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut walk = |id: usize, n: usize, start: [f64; 2]| {
            let mut p = start;
            let mut pts = Vec::with_capacity(n);
            for _ in 0..n {
                p = [p[0] + rng.gen_range(-0.5..0.5), p[1] + rng.gen_range(-0.5..0.5)];
                pts.push(p);
            }
            (format!("u{id}"), pts)
        };
        let mut past = Vec::new();
        for u in 0..units {
            let (id, pts) = walk(u, lx, [u as f64 * 3.0, 1.0]);
            past.push(Trajectory::new(pts, 1.0, id, 0.0).unwrap());
        }
        let (_, fut) = walk(0, ly, past[0].last());
        DataSample {
            context: ContextWindow { frames: vec![] },
            past,
            target: Trajectory::new(fut, 1.0, "u0", lx as f64).unwrap(),
            target_id: 0,
            pattern: None,
        }
    }

    fn tiny_arches(lx: usize, ly: usize, units: usize) -> Vec<WorkerArch> {
        vec![
            WorkerArch::Transformer(TransformerWorkerConfig {
                d_model: 8,
                heads: 2,
                encoder_layers: 1,
                decoder_layers: 1,
                ff_hidden: 16,
                lx,
                ly,
                units,
                max_step: 1.0,
            }),
            WorkerArch::Recurrent(RecurrentWorkerConfig {
                hidden: 8,
                lx,
                ly,
                units,
                max_step: 1.0,
            }),
        ]
    }

    #[test]
    fn prediction_shape_and_step_bound() {
        for arch in tiny_arches(6, 4, 2) {
            let w = AnyWorker::<f64>::new(&arch, 3).unwrap();
            let input = WorkerInput::from_sample(&toy_sample(1, 6, 4, 2), w.max_step()).unwrap();
            let pred = predict(&w, &input).unwrap();
            assert_eq!(pred.len(), 4);
            let mut prev = input.start;
            for p in &pred {
                let step = ((p[0] - prev[0]).powi(2) + (p[1] - prev[1]).powi(2)).sqrt();
                assert!(step < 1.0);
                prev = *p;
            }
            assert_eq!(pred, predict(&w, &input).unwrap());
        }
    }

    #[test]
    fn zero_head_stays_at_start() {
        for arch in tiny_arches(5, 3, 1) {
            let mut w = AnyWorker::<f64>::new(&arch, 9).unwrap();
            w.zero_head();
            let input = WorkerInput::from_sample(&toy_sample(2, 5, 3, 1), 1.0).unwrap();
            let pred = predict(&w, &input).unwrap();
            assert!(pred.iter().all(|&p| p == input.start));
        }
    }

    #[test]
    fn shape_mismatch_rejected() {
        for arch in tiny_arches(6, 4, 1) {
            let w = AnyWorker::<f64>::new(&arch, 3).unwrap();
            let wrong = WorkerInput::from_sample(&toy_sample(1, 7, 4, 1), 1.0).unwrap();
            assert!(predict(&w, &wrong).is_err());
            let wrong_units = WorkerInput::from_sample(&toy_sample(1, 6, 4, 2), 1.0).unwrap();
            assert!(predict(&w, &wrong_units).is_err());
        }
    }

    #[test]
    fn loss_matrix_matches_scalar_loop() {
        let arch = &tiny_arches(5, 3, 1)[0];
        let workers: Vec<AnyWorker<f64>> = (0..2).map(|s| AnyWorker::new(arch, s).unwrap()).collect();
        let inputs: Vec<WorkerInput<f64>> = (0..3)
            .map(|s| WorkerInput::from_sample(&toy_sample(10 + s, 5, 3, 1), 1.0).unwrap())
            .collect();
        let refs: Vec<&WorkerInput<f64>> = inputs.iter().collect();
        let report = per_worker_losses(&workers, &refs, WorkerLoss::Ade).unwrap();
        assert_eq!(report.per_sample.len(), 3);
        for (j, input) in inputs.iter().enumerate() {
            let truth = input.target_points().unwrap();
            for (i, w) in workers.iter().enumerate() {
                let looped = ade(&truth, &predict(w, input).unwrap()).unwrap();
                assert_eq!(report.per_sample[j][i], looped);
            }
        }
        let twins = vec![workers[0].clone(), workers[0].clone()];
        let r = per_worker_losses(&twins, &refs, WorkerLoss::Ade).unwrap();
        assert!(r.per_sample.iter().all(|row| row[0] == row[1]));
        let single = per_worker_losses(&workers[..1], &refs, WorkerLoss::Ade).unwrap();
        assert!(single.per_sample.iter().zip(&report.per_sample).all(|(a, b)| a[0] == b[0]));
    }

    #[test]
    fn training_reduces_teacher_forced_loss() {
        for arch in tiny_arches(5, 3, 1) {
            let mut w = AnyWorker::<f64>::new(&arch, 5).unwrap();
            let inputs: Vec<WorkerInput<f64>> = (0..4)
                .map(|s| WorkerInput::from_sample(&toy_sample(20 + s, 5, 3, 1), 1.0).unwrap())
                .collect();
            let refs: Vec<&WorkerInput<f64>> = inputs.iter().collect();
            let mut opt = crate::nn::Adam::new(w.params(), 1e-2);
            let (first, _) = loss_and_grad(&w, &refs, WorkerLoss::Ade, Decoding::TeacherForced).unwrap();
            for _ in 0..60 {
                let (_, g) = loss_and_grad(&w, &refs, WorkerLoss::Ade, Decoding::TeacherForced).unwrap();
                opt.step(w.params_mut(), &g);
            }
            let (last, _) = loss_and_grad(&w, &refs, WorkerLoss::Ade, Decoding::TeacherForced).unwrap();
            assert!(last < first, "{arch:?}: {last} !< {first}");
        }
    }
}
