//! Iterative competition-symbiosis training of the manager and its workers.

mod ablation;

use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::Tape;
use crate::config::{Hyperparameters, RouteBy, TrainerKind};
use crate::context::{encode_context_slots, ContextSpec, EncodedContext};
use crate::datasets::CorpusSplit;
use crate::error::{CatpError, Result};
use crate::evaluation::{diagnose_scores, score_samples, summarize, TrapDiagnostics, TrapFlag, TrapThresholds};
use crate::manager::{manager_forward, ManagerConfig, ManagerModel};
use crate::nn::{Adam, ParamStore};
use crate::sample::DataSample;
use crate::scalar::{argmax, argmin, Scalar};
use crate::tensor::Tensor;
use crate::workers::{loss_and_grad, per_worker_losses, AnyWorker, Decoding, Worker, WorkerInput};

pub use ablation::{ablation_matrix, AblationCell, AblationTable};

/// A sample with its worker input and encoded context precomputed.
#[derive(Clone, Debug, PartialEq)]
pub struct PreparedSample<T> {
    pub input: WorkerInput<T>,
    pub context: EncodedContext<T>,
    /// Ground-truth pattern, for oracle checks only.
    pub pattern: Option<usize>,
}

pub fn prepare<T: Scalar>(samples: &[DataSample<T>], schema: &ContextSpec, max_step: f64) -> Result<Vec<PreparedSample<T>>> {
    samples
        .iter()
        .map(|s| {
            Ok(PreparedSample {
                input: WorkerInput::from_sample(s, T::lit(max_step))?,
                context: encode_context_slots(&s.context, schema)?,
                pattern: s.pattern,
            })
        })
        .collect()
}

/// Prepares every split of `corpus`.
pub fn prepare_corpus<T: Scalar>(corpus: &CorpusSplit<T>) -> Result<[Vec<PreparedSample<T>>; 3]> {
    let p = |s: &[DataSample<T>]| prepare(s, &corpus.schema, corpus.max_step);
    Ok([p(&corpus.train)?, p(&corpus.val)?, p(&corpus.test)?])
}

/// Routes each batch position to its argmax worker (ties to the lowest
/// index). Returns, per worker, the batch positions it receives.
pub fn split_batch<T: Scalar>(p_hat: &[Vec<T>], workers: usize) -> Result<Vec<Vec<usize>>> {
    let mut subs = vec![Vec::new(); workers];
    for (j, row) in p_hat.iter().enumerate() {
        if row.len() != workers {
            return Err(CatpError::invalid(format!("row {j} has {} entries for {workers} workers", row.len())));
        }
        subs[argmax(row)].push(j);
    }
    Ok(subs)
}

/// Per-iteration metrics; one JSON line each in the metrics log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IterationRecord {
    pub iteration: usize,
    pub alpha: usize,
    /// Samples each worker trained on in this iteration's worker phase.
    pub routed: Vec<usize>,
    /// Mean teacher-forced training loss per worker; null when it got no samples.
    pub worker_loss: Vec<Option<f64>>,
    pub manager_loss: Option<f64>,
    pub volumes: Vec<f64>,
    pub selection_shares: Option<Vec<f64>>,
    pub manager_accuracy: Option<f64>,
    pub val_top1: Option<f64>,
    pub trap: Option<TrapFlag>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainingState {
    /// Samples used so far to train each worker.
    pub volumes: Vec<f64>,
    /// Completed iterations.
    pub iteration: usize,
    pub loss_history: Vec<IterationRecord>,
    pub rng_seed: u64,
}

/// Sub-batches of one worker step, as indices into the training split.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RoutedStep {
    pub batch: Vec<usize>,
    pub sub_batches: Vec<Vec<usize>>,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct WorkerPhaseReport {
    pub steps: Vec<RoutedStep>,
    pub volume_increments: Vec<f64>,
    pub mean_losses: Vec<Option<f64>>,
}

fn check_finite(value: f64, iteration: usize, what: &str) -> Result<()> {
    if value.is_finite() {
        Ok(())
    } else {
        Err(CatpError::Divergence {
            iteration,
            detail: format!("{what} is {value}"),
        })
    }
}

fn sample_batch(rng: &mut ChaCha8Rng, n: usize, batch: usize) -> Vec<usize> {
    index::sample(rng, n, batch.min(n)).into_vec()
}

/// `alpha` worker steps: sample a batch, route it, train each worker on its
/// sub-batch. The manager is only read.
#[allow(clippy::too_many_arguments)]
pub fn worker_phase<T: Scalar>(
    hp: &Hyperparameters,
    manager: &ManagerModel<T>,
    workers: &mut [AnyWorker<T>],
    optimizers: &mut [Adam<T>],
    data: &[PreparedSample<T>],
    alpha: usize,
    state: &mut TrainingState,
    rng: &mut ChaCha8Rng,
    assignment: Option<&[usize]>,
) -> Result<WorkerPhaseReport> {
    if data.is_empty() {
        return Err(CatpError::config("training split is empty"));
    }
    let k = workers.len();
    let mut report = WorkerPhaseReport {
        steps: Vec::with_capacity(alpha),
        volume_increments: vec![0.0; k],
        mean_losses: vec![None; k],
    };
    let mut loss_sums = vec![0.0; k];
    for _ in 0..alpha {
        let batch = sample_batch(rng, data.len(), hp.batch_size);
        let positions = if let Some(assign) = assignment {
            let mut subs = vec![Vec::new(); k];
            for (j, &i) in batch.iter().enumerate() {
                subs[assign[i]].push(j);
            }
            subs
        } else {
            match hp.route_by {
                RouteBy::Manager => {
                    let rows = batch
                        .iter()
                        .map(|&i| manager_forward(manager, &data[i].context))
                        .collect::<Result<Vec<_>>>()?;
                    split_batch(&rows, k)?
                }
                RouteBy::OracleLoss => {
                    let inputs: Vec<&WorkerInput<T>> = batch.iter().map(|&i| &data[i].input).collect();
                    let losses = per_worker_losses(workers, &inputs, hp.worker_loss)?;
                    let mut subs = vec![Vec::new(); k];
                    for (j, row) in losses.per_sample.iter().enumerate() {
                        subs[argmin(row)].push(j);
                    }
                    subs
                }
            }
        };
        let sub_batches: Vec<Vec<usize>> = positions.iter().map(|p| p.iter().map(|&j| batch[j]).collect()).collect();
        for (w, sub) in sub_batches.iter().enumerate() {
            if sub.is_empty() {
                continue;
            }
            let inputs: Vec<&WorkerInput<T>> = sub.iter().map(|&i| &data[i].input).collect();
            let (loss, grads) = loss_and_grad(&workers[w], &inputs, hp.worker_loss, Decoding::TeacherForced)?;
            check_finite(loss.as_f64(), state.iteration, &format!("worker {w} loss"))?;
            if !grads.is_finite() {
                return Err(CatpError::Divergence {
                    iteration: state.iteration,
                    detail: format!("worker {w} gradient is not finite"),
                });
            }
            optimizers[w].step(workers[w].params_mut(), &grads);
            let n = sub.len() as f64;
            state.volumes[w] += n;
            report.volume_increments[w] += n;
            loss_sums[w] += loss.as_f64() * n;
        }
        report.steps.push(RoutedStep { batch, sub_batches });
    }
    for w in 0..k {
        if report.volume_increments[w] > 0.0 {
            report.mean_losses[w] = Some(loss_sums[w] / report.volume_increments[w]);
        }
    }
    Ok(report)
}

/// Manager steps against per-sample targets built from the frozen workers'
/// rollout losses. Returns the mean manager loss of the last step.
pub fn manager_phase<T: Scalar>(
    hp: &Hyperparameters,
    manager: &mut ManagerModel<T>,
    optimizer: &mut Adam<T>,
    workers: &[AnyWorker<T>],
    data: &[PreparedSample<T>],
    state: &TrainingState,
    rng: &mut ChaCha8Rng,
) -> Result<f64> {
    if data.is_empty() {
        return Err(CatpError::config("training split is empty"));
    }
    let mut last = 0.0;
    for _ in 0..hp.manager_steps {
        let batch = sample_batch(rng, data.len(), hp.batch_size);
        if workers.len() == 1 {
            // a one-way softmax has no gradient
            last = 0.0;
            continue;
        }
        let inputs: Vec<&WorkerInput<T>> = batch.iter().map(|&i| &data[i].input).collect();
        let losses = per_worker_losses(workers, &inputs, hp.worker_loss)?;
        let mut tape = Tape::new();
        let p = manager.params().bind(&mut tape);
        let mut per_sample = Vec::with_capacity(batch.len());
        for (&i, row) in batch.iter().zip(&losses.per_sample) {
            let target = hp.target_rule.build(row, &state.volumes, hp.beta)?;
            let out = manager.forward(&mut tape, &p, &data[i].context)?;
            let target = tape.constant(Tensor::from_vec(1, target.probs.len(), target.probs));
            per_sample.push(hp.manager_loss.on_tape(hp.wasserstein_ground, &mut tape, out.probs, target));
        }
        let stacked = tape.concat_rows(&per_sample);
        let mean = tape.mean(stacked);
        last = tape.scalar_value(mean).as_f64();
        check_finite(last, state.iteration, "manager loss")?;
        let grads = tape.backward(mean, manager.params().len());
        if !grads.is_finite() {
            return Err(CatpError::Divergence {
                iteration: state.iteration,
                detail: "manager gradient is not finite".into(),
            });
        }
        optimizer.step(manager.params_mut(), &grads);
    }
    Ok(last)
}

/// Serializable position of a [`ChaCha8Rng`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RngState {
    pub seed: u64,
    pub word_pos: u128,
}

impl RngState {
    pub fn capture(seed: u64, rng: &ChaCha8Rng) -> Self {
        Self {
            seed,
            word_pos: rng.get_word_pos(),
        }
    }

    pub fn restore(self) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_word_pos(self.word_pos);
        rng
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Scalar")]
pub struct BestSnapshot<T> {
    pub iteration: usize,
    pub val_top1: f64,
    pub manager: ParamStore<T>,
    pub workers: Vec<ParamStore<T>>,
}

/// Everything needed to continue training exactly where it stopped.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Scalar")]
pub struct TrainerSnapshot<T> {
    pub hyper: Hyperparameters,
    pub manager_config: ManagerConfig,
    pub manager: ParamStore<T>,
    pub worker_arch: crate::workers::WorkerArch,
    pub workers: Vec<ParamStore<T>>,
    pub manager_opt: Adam<T>,
    pub worker_opts: Vec<Adam<T>>,
    pub state: TrainingState,
    pub rng: RngState,
    pub assignment: Option<Vec<usize>>,
    pub best: Option<BestSnapshot<T>>,
    pub stale_evals: usize,
    pub stopped: bool,
}

/// Result of a finished training run.
#[derive(Clone, Debug)]
pub struct TrainOutcome<T> {
    pub manager: ManagerModel<T>,
    pub workers: Vec<AnyWorker<T>>,
    pub state: TrainingState,
    pub diagnostics: Vec<(usize, TrapDiagnostics)>,
    /// Diagnostics of the returned models on the full validation split.
    pub final_diagnostics: Option<TrapDiagnostics>,
    pub best_iteration: Option<usize>,
}

/// Stepwise trainer; [`train`] runs it to completion.
pub struct Trainer<T: Scalar> {
    hp: Hyperparameters,
    manager: ManagerModel<T>,
    workers: Vec<AnyWorker<T>>,
    manager_opt: Adam<T>,
    worker_opts: Vec<Adam<T>>,
    state: TrainingState,
    rng: ChaCha8Rng,
    train: Vec<PreparedSample<T>>,
    val: Vec<PreparedSample<T>>,
    assignment: Option<Vec<usize>>,
    best: Option<BestSnapshot<T>>,
    stale_evals: usize,
    stopped: bool,
    diagnostics: Vec<(usize, TrapDiagnostics)>,
}

fn manager_config(hp: &Hyperparameters, schema: &ContextSpec) -> ManagerConfig {
    ManagerConfig {
        d_model: hp.manager.d_model,
        heads: hp.manager.heads,
        layers: hp.manager.layers,
        ff_hidden: hp.manager.ff_hidden,
        workers: hp.workers,
        lc: hp.lc,
        schema: schema.clone(),
    }
}

fn check_corpus<T: Scalar>(hp: &Hyperparameters, corpus: &CorpusSplit<T>) -> Result<()> {
    hp.validate()?;
    let s = corpus.shape;
    if (s.lc, s.lx, s.ly) != (hp.lc, hp.lx, hp.ly) {
        return Err(CatpError::config(format!(
            "corpus windows LC/LX/LY = {}/{}/{} but hyperparameters say {}/{}/{}",
            s.lc, s.lx, s.ly, hp.lc, hp.lx, hp.ly
        )));
    }
    if corpus.max_step != hp.max_step {
        return Err(CatpError::config("corpus max_step disagrees with hyperparameters"));
    }
    if corpus.train.is_empty() {
        return Err(CatpError::config("training split is empty"));
    }
    Ok(())
}

impl<T: Scalar> Trainer<T> {
    pub fn new(hp: &Hyperparameters, corpus: &CorpusSplit<T>) -> Result<Self> {
        check_corpus(hp, corpus)?;
        let units = corpus.train[0].units();
        let arch = hp.worker_arch(units);
        let mut manager = ManagerModel::new(manager_config(hp, &corpus.schema), hp.seed)?;
        if hp.manager.zero_head {
            manager.zero_head();
        }
        let workers = (0..hp.workers)
            .map(|i| AnyWorker::new(&arch, hp.seed.wrapping_mul(1000).wrapping_add(i as u64 + 1)))
            .collect::<Result<Vec<_>>>()?;
        let manager_opt = Adam::new(manager.params(), hp.manager_lr);
        let worker_opts = workers.iter().map(|w| Adam::new(w.params(), hp.worker_lr)).collect();
        let [train, val, _] = prepare_corpus(corpus)?;
        let rng_seed = hp.seed ^ 0x5eed_cafe;
        let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
        let assignment = match hp.trainer {
            TrainerKind::CompetitionSymbiosis => None,
            TrainerKind::IndependentSplit => {
                let order = index::sample(&mut rng, train.len(), train.len()).into_vec();
                let mut assign = vec![0; train.len()];
                for (pos, i) in order.into_iter().enumerate() {
                    assign[i] = pos % hp.workers;
                }
                Some(assign)
            }
        };
        Ok(Self {
            state: TrainingState {
                volumes: vec![0.0; hp.workers],
                iteration: 0,
                loss_history: Vec::new(),
                rng_seed,
            },
            hp: hp.clone(),
            manager,
            workers,
            manager_opt,
            worker_opts,
            rng,
            val: eval_subset(val, hp.eval_samples),
            train,
            assignment,
            best: None,
            stale_evals: 0,
            stopped: false,
            diagnostics: Vec::new(),
        })
    }

    pub fn snapshot(&self) -> TrainerSnapshot<T> {
        TrainerSnapshot {
            hyper: self.hp.clone(),
            manager_config: self.manager.config().clone(),
            manager: self.manager.params().clone(),
            worker_arch: self.workers[0].arch(),
            workers: self.workers.iter().map(|w| w.params().clone()).collect(),
            manager_opt: self.manager_opt.clone(),
            worker_opts: self.worker_opts.clone(),
            state: self.state.clone(),
            rng: RngState::capture(self.state.rng_seed, &self.rng),
            assignment: self.assignment.clone(),
            best: self.best.clone(),
            stale_evals: self.stale_evals,
            stopped: self.stopped,
        }
    }

    pub fn restore(snapshot: TrainerSnapshot<T>, corpus: &CorpusSplit<T>) -> Result<Self> {
        let hp = snapshot.hyper;
        check_corpus(&hp, corpus)?;
        let manager = ManagerModel::from_parts(snapshot.manager_config, snapshot.manager)?;
        let workers = snapshot
            .workers
            .into_iter()
            .map(|p| AnyWorker::from_parts(&snapshot.worker_arch, p))
            .collect::<Result<Vec<_>>>()?;
        if workers.len() != hp.workers || snapshot.state.volumes.len() != hp.workers {
            return Err(CatpError::invalid("checkpoint worker count disagrees with its hyperparameters"));
        }
        let [train, val, _] = prepare_corpus(corpus)?;
        if snapshot.assignment.as_ref().is_some_and(|a| a.len() != train.len()) {
            return Err(CatpError::invalid("checkpoint split assignment does not match the corpus"));
        }
        Ok(Self {
            manager,
            workers,
            manager_opt: snapshot.manager_opt,
            worker_opts: snapshot.worker_opts,
            rng: snapshot.rng.restore(),
            state: snapshot.state,
            val: eval_subset(val, hp.eval_samples),
            train,
            assignment: snapshot.assignment,
            best: snapshot.best,
            stale_evals: snapshot.stale_evals,
            stopped: snapshot.stopped,
            diagnostics: Vec::new(),
            hp,
        })
    }

    pub fn hyper(&self) -> &Hyperparameters {
        &self.hp
    }

    pub fn state(&self) -> &TrainingState {
        &self.state
    }

    pub fn manager(&self) -> &ManagerModel<T> {
        &self.manager
    }

    pub fn workers(&self) -> &[AnyWorker<T>] {
        &self.workers
    }

    /// Iterations in a full run; the independent-split control spends the
    /// second half fitting the manager.
    pub fn total_iterations(&self) -> usize {
        match self.hp.trainer {
            TrainerKind::CompetitionSymbiosis => self.hp.iterations,
            TrainerKind::IndependentSplit => 2 * self.hp.iterations,
        }
    }

    pub fn is_done(&self) -> bool {
        self.stopped || self.state.iteration >= self.total_iterations()
    }

    /// One iteration: a worker phase and a manager phase (or, for the
    /// control trainer, one of the two depending on the stage).
    pub fn step(&mut self) -> Result<(IterationRecord, WorkerPhaseReport)> {
        let it = self.state.iteration;
        let hp = &self.hp;
        let (train_workers, train_manager, alpha) = match hp.trainer {
            TrainerKind::CompetitionSymbiosis => (true, true, hp.alpha_at(it)),
            TrainerKind::IndependentSplit if it < hp.iterations => (true, false, hp.alpha_at(it)),
            TrainerKind::IndependentSplit => (false, true, 0),
        };
        let phase = if train_workers {
            worker_phase(
                hp,
                &self.manager,
                &mut self.workers,
                &mut self.worker_opts,
                &self.train,
                alpha,
                &mut self.state,
                &mut self.rng,
                self.assignment.as_deref(),
            )?
        } else {
            WorkerPhaseReport {
                volume_increments: vec![0.0; hp.workers],
                mean_losses: vec![None; hp.workers],
                ..Default::default()
            }
        };
        let manager_loss = if train_manager {
            Some(manager_phase(
                hp,
                &mut self.manager,
                &mut self.manager_opt,
                &self.workers,
                &self.train,
                &self.state,
                &mut self.rng,
            )?)
        } else {
            None
        };
        let mut record = IterationRecord {
            iteration: it,
            alpha,
            routed: phase.volume_increments.iter().map(|&v| v as usize).collect(),
            worker_loss: phase.mean_losses.clone(),
            manager_loss,
            volumes: self.state.volumes.clone(),
            selection_shares: None,
            manager_accuracy: None,
            val_top1: None,
            trap: None,
        };
        let last = it + 1 == self.total_iterations();
        if train_manager && !self.val.is_empty() && ((it + 1) % hp.eval_every == 0 || last) {
            self.evaluate(&mut record)?;
        }
        self.state.iteration += 1;
        self.state.loss_history.push(record.clone());
        Ok((record, phase))
    }

    fn evaluate(&mut self, record: &mut IterationRecord) -> Result<()> {
        let scores = score_samples(&self.manager, &self.workers, &self.val, self.hp.worker_loss)?;
        let diag = diagnose_scores(&scores, TrapThresholds::default())?;
        let top1 = summarize(&scores, 1)?.top1;
        check_finite(top1, record.iteration, "validation loss")?;
        record.selection_shares = Some(diag.selection_shares.clone());
        record.manager_accuracy = Some(diag.manager_accuracy);
        record.val_top1 = Some(top1);
        record.trap = diag.flag;
        self.diagnostics.push((record.iteration, diag));
        if self.hp.patience == 0 {
            return Ok(());
        }
        if self.best.as_ref().map_or(true, |b| top1 < b.val_top1) {
            self.best = Some(BestSnapshot {
                iteration: record.iteration,
                val_top1: top1,
                manager: self.manager.params().clone(),
                workers: self.workers.iter().map(|w| w.params().clone()).collect(),
            });
            self.stale_evals = 0;
        } else {
            self.stale_evals += 1;
            if self.stale_evals >= self.hp.patience {
                self.stopped = true;
            }
        }
        Ok(())
    }

    /// Runs until done, calling `observe` after every iteration.
    pub fn run(&mut self, mut observe: impl FnMut(&IterationRecord) -> Result<()>) -> Result<()> {
        while !self.is_done() {
            let (record, _) = self.step()?;
            observe(&record)?;
        }
        Ok(())
    }

    /// Restores the best validation snapshot (when early stopping is on)
    /// and diagnoses the result on the full validation split.
    pub fn finish(mut self, full_val: Option<&[PreparedSample<T>]>) -> Result<TrainOutcome<T>> {
        let mut best_iteration = None;
        if self.hp.patience > 0 {
            if let Some(best) = self.best.take() {
                *self.manager.params_mut() = best.manager;
                for (w, p) in self.workers.iter_mut().zip(best.workers) {
                    *w.params_mut() = p;
                }
                best_iteration = Some(best.iteration);
            }
        }
        let val = full_val.unwrap_or(&self.val);
        let final_diagnostics = if val.is_empty() {
            None
        } else {
            let scores = score_samples(&self.manager, &self.workers, val, self.hp.worker_loss)?;
            Some(diagnose_scores(&scores, TrapThresholds::default())?)
        };
        Ok(TrainOutcome {
            manager: self.manager,
            workers: self.workers,
            state: self.state,
            diagnostics: self.diagnostics,
            final_diagnostics,
            best_iteration,
        })
    }
}

fn eval_subset<T>(mut val: Vec<PreparedSample<T>>, cap: usize) -> Vec<PreparedSample<T>> {
    if cap > 0 {
        val.truncate(cap);
    }
    val
}

/// Trains to completion and diagnoses on the full validation split.
pub fn train<T: Scalar>(hp: &Hyperparameters, corpus: &CorpusSplit<T>) -> Result<TrainOutcome<T>> {
    train_with(hp, corpus, |_| Ok(()))
}

pub fn train_with<T: Scalar>(
    hp: &Hyperparameters,
    corpus: &CorpusSplit<T>,
    observe: impl FnMut(&IterationRecord) -> Result<()>,
) -> Result<TrainOutcome<T>> {
    let mut trainer = Trainer::new(hp, corpus)?;
    trainer.run(observe)?;
    let [_, val, _] = prepare_corpus(corpus)?;
    trainer.finish(Some(&val))
}
