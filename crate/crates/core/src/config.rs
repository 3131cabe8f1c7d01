//! Hyperparameters and experiment configuration files.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::datasets::{generate_synthetic, ingest_csv, read_archive, CorpusSplit, CsvSource, SplitMode, SyntheticSpec};
use crate::error::{CatpError, Result};
use crate::manager::{ManagerLoss, TargetRule, WassersteinGround};
use crate::scalar::Scalar;
use crate::workers::{RecurrentWorkerConfig, TransformerWorkerConfig, WorkerArch, WorkerLoss};

/// How α changes over training.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AlphaSchedule {
    Constant,
    /// Linear decay from `alpha` to 1 over the first half of the iterations.
    #[default]
    LinearDecay,
}

/// What decides which worker trains on a sample in the worker phase.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RouteBy {
    /// Argmax of the frozen manager's output.
    #[default]
    Manager,
    /// The worker with the lowest rollout loss on the sample.
    OracleLoss,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrainerKind {
    /// Alternating worker and manager phases.
    #[default]
    CompetitionSymbiosis,
    /// Control: a fixed random equal split of the training set, workers
    /// trained on their share only, the manager fitted afterwards.
    IndependentSplit,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum WorkerModel {
    Transformer {
        d_model: usize,
        heads: usize,
        encoder_layers: usize,
        decoder_layers: usize,
        ff_hidden: usize,
    },
    Recurrent {
        hidden: usize,
    },
}

impl Default for WorkerModel {
    fn default() -> Self {
        Self::Transformer {
            d_model: 32,
            heads: 4,
            encoder_layers: 2,
            decoder_layers: 2,
            ff_hidden: 64,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManagerSize {
    pub d_model: usize,
    pub heads: usize,
    pub layers: usize,
    pub ff_hidden: usize,
    /// Start from a uniform output (zeroed head) instead of a random one.
    #[serde(default = "yes")]
    pub zero_head: bool,
}

fn yes() -> bool {
    true
}

impl Default for ManagerSize {
    fn default() -> Self {
        Self {
            d_model: 32,
            heads: 4,
            layers: 2,
            ff_hidden: 64,
            zero_head: true,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Hyperparameters {
    /// Number of workers `K`.
    pub workers: usize,
    /// `k` of the top-k evaluation loss.
    pub top_k: usize,
    pub alpha: usize,
    pub alpha_schedule: AlphaSchedule,
    pub beta: f64,
    pub batch_size: usize,
    pub iterations: usize,
    /// Manager gradient steps per iteration.
    pub manager_steps: usize,
    pub lc: usize,
    pub lx: usize,
    pub ly: usize,
    pub dt: f64,
    pub max_step: f64,
    pub manager_loss: ManagerLoss,
    pub wasserstein_ground: WassersteinGround,
    pub worker_loss: WorkerLoss,
    pub target_rule: TargetRule,
    pub route_by: RouteBy,
    pub trainer: TrainerKind,
    pub worker_lr: f64,
    pub manager_lr: f64,
    /// Validation diagnostics every this many iterations.
    pub eval_every: usize,
    /// Evaluations without improvement before stopping; 0 trains all iterations.
    pub patience: usize,
    /// Validation samples used by the periodic diagnostics; 0 uses all.
    pub eval_samples: usize,
    pub worker: WorkerModel,
    pub manager: ManagerSize,
    pub seed: u64,
}

impl Default for Hyperparameters {
    fn default() -> Self {
        Self {
            workers: 20,
            top_k: 3,
            alpha: 4,
            alpha_schedule: AlphaSchedule::LinearDecay,
            beta: 0.5,
            batch_size: 32,
            iterations: 1000,
            manager_steps: 1,
            lc: 5,
            lx: 30,
            ly: 10,
            dt: 1.0,
            max_step: 1.0,
            manager_loss: ManagerLoss::Wasserstein,
            wasserstein_ground: WassersteinGround::Index,
            worker_loss: WorkerLoss::Ade,
            target_rule: TargetRule::Regularized,
            route_by: RouteBy::Manager,
            trainer: TrainerKind::CompetitionSymbiosis,
            worker_lr: 1e-3,
            manager_lr: 1e-3,
            eval_every: 50,
            patience: 5,
            eval_samples: 0,
            worker: WorkerModel::default(),
            manager: ManagerSize::default(),
            seed: 0,
        }
    }
}

impl Hyperparameters {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(CatpError::config(m));
        if self.workers == 0 {
            return fail("workers (K) must be at least 1".into());
        }
        if self.top_k == 0 || self.top_k > self.workers {
            return fail(format!("top_k must lie in 1..={}, got {}", self.workers, self.top_k));
        }
        if self.alpha == 0 {
            return fail("alpha must be at least 1".into());
        }
        if !(self.beta.is_finite() && self.beta >= 0.0) {
            return fail(format!("beta must be non-negative, got {}", self.beta));
        }
        if !(self.max_step.is_finite() && self.max_step > 0.0) {
            return fail(format!("max_step must be positive, got {}", self.max_step));
        }
        if !(self.dt.is_finite() && self.dt > 0.0) {
            return fail(format!("dt must be positive, got {}", self.dt));
        }
        if self.batch_size == 0 || self.manager_steps == 0 || self.eval_every == 0 {
            return fail("batch_size, manager_steps and eval_every must be positive".into());
        }
        if self.lc == 0 || self.lx == 0 || self.ly == 0 {
            return fail("window lengths lc, lx, ly must be positive".into());
        }
        if !(self.worker_lr > 0.0 && self.manager_lr > 0.0) {
            return fail("learning rates must be positive".into());
        }
        let heads_ok = |d: usize, h: usize| h > 0 && d % h == 0;
        if !heads_ok(self.manager.d_model, self.manager.heads) {
            return fail("manager d_model must be divisible by its head count".into());
        }
        if let WorkerModel::Transformer { d_model, heads, .. } = self.worker {
            if !heads_ok(d_model, heads) {
                return fail("worker d_model must be divisible by its head count".into());
            }
        }
        Ok(())
    }

    /// α used in the worker phase of `iteration` (0-based).
    pub fn alpha_at(&self, iteration: usize) -> usize {
        match self.alpha_schedule {
            AlphaSchedule::Constant => self.alpha,
            AlphaSchedule::LinearDecay => {
                let half = (self.iterations / 2).max(1);
                let frac = (iteration as f64 / half as f64).min(1.0);
                let a = self.alpha as f64 - (self.alpha as f64 - 1.0) * frac;
                (a.round() as usize).max(1)
            }
        }
    }

    pub fn worker_arch(&self, units: usize) -> WorkerArch {
        match self.worker {
            WorkerModel::Transformer {
                d_model,
                heads,
                encoder_layers,
                decoder_layers,
                ff_hidden,
            } => WorkerArch::Transformer(TransformerWorkerConfig {
                d_model,
                heads,
                encoder_layers,
                decoder_layers,
                ff_hidden,
                lx: self.lx,
                ly: self.ly,
                units,
                max_step: self.max_step,
            }),
            WorkerModel::Recurrent { hidden } => WorkerArch::Recurrent(RecurrentWorkerConfig {
                hidden,
                lx: self.lx,
                ly: self.ly,
                units,
                max_step: self.max_step,
            }),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DatasetSource {
    Synthetic(SyntheticSpec),
    Csv(CsvSource),
    Archive { path: PathBuf },
}

impl DatasetSource {
    /// Builds the corpus; relative paths resolve against `base`.
    pub fn load<T: Scalar>(&self, base: &Path) -> Result<CorpusSplit<T>> {
        let resolve = |p: &Path| if p.is_relative() { base.join(p) } else { p.to_path_buf() };
        match self {
            Self::Synthetic(spec) => generate_synthetic(spec),
            Self::Csv(src) => {
                let mut src = src.clone();
                src.paths = src.paths.iter().map(|p| resolve(p)).collect();
                src.schema = resolve(&src.schema);
                Ok(ingest_csv(&src)?.0)
            }
            Self::Archive { path } => read_archive(&resolve(path)),
        }
    }
}

/// Axes of an ablation grid; an empty axis keeps the base value.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AblationGrid {
    pub workers: Vec<usize>,
    pub alpha: Vec<usize>,
    pub beta: Vec<f64>,
    pub target_rule: Vec<TargetRule>,
    pub manager_loss: Vec<ManagerLoss>,
    pub worker_loss: Vec<WorkerLoss>,
    pub trainer: Vec<TrainerKind>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default)]
    pub hyper: Hyperparameters,
    pub dataset: DatasetSource,
    #[serde(default)]
    pub out_dir: Option<PathBuf>,
    #[serde(default = "ten")]
    pub rounds: usize,
    #[serde(default)]
    pub split_mode: SplitMode,
    #[serde(default)]
    pub ablation: AblationGrid,
}

fn ten() -> usize {
    10
}

impl ExperimentConfig {
    /// Reads a TOML (or JSON, by extension) file and applies `key=value`
    /// overrides on dotted paths before validation.
    pub fn load(path: &Path, overrides: &[String]) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| CatpError::config(format!("{}: {e}", path.display())))?;
        let mut value: Value = if path.extension().is_some_and(|e| e == "json") {
            serde_json::from_str(&text).map_err(|e| CatpError::config(format!("{}: {e}", path.display())))?
        } else {
            let t: toml::Value = toml::from_str(&text).map_err(|e| CatpError::config(format!("{}: {e}", path.display())))?;
            serde_json::to_value(t)?
        };
        for o in overrides {
            apply_override(&mut value, o)?;
        }
        let config: Self = serde_json::from_value(value).map_err(|e| CatpError::config(e.to_string()))?;
        config.validate()?;
        Ok(config)
    }

    pub fn validate(&self) -> Result<()> {
        let h = &self.hyper;
        h.validate()?;
        if self.rounds == 0 {
            return Err(CatpError::config("rounds must be at least 1"));
        }
        let mismatch = |what: &str| Err(CatpError::config(format!("dataset {what} disagrees with hyper")));
        match &self.dataset {
            DatasetSource::Synthetic(s) => {
                s.validate()?;
                if (s.lc, s.lx, s.ly) != (h.lc, h.lx, h.ly) {
                    return mismatch("window lengths");
                }
                if s.max_step != h.max_step || s.dt != h.dt {
                    return mismatch("max_step or dt");
                }
            }
            DatasetSource::Csv(c) => {
                if (c.lc, c.lx, c.ly) != (h.lc, h.lx, h.ly) {
                    return mismatch("window lengths");
                }
                if c.max_step != h.max_step || c.dt != h.dt {
                    return mismatch("max_step or dt");
                }
            }
            DatasetSource::Archive { .. } => {}
        }
        Ok(())
    }

    /// SHA-256 of the canonical JSON form.
    pub fn hash(&self) -> Result<String> {
        crate::datasets::spec_hash(self)
    }
}

/// Sets `a.b.c=value` inside `root`. The value is parsed as JSON when
/// possible and kept as a string otherwise.
pub fn apply_override(root: &mut Value, assignment: &str) -> Result<()> {
    let (path, raw) = assignment
        .split_once('=')
        .ok_or_else(|| CatpError::config(format!("override '{assignment}' is not key=value")))?;
    let value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
    let mut node = root;
    let keys: Vec<&str> = path.split('.').collect();
    for (i, key) in keys.iter().enumerate() {
        if key.is_empty() {
            return Err(CatpError::config(format!("override '{assignment}' has an empty key")));
        }
        let obj = node
            .as_object_mut()
            .ok_or_else(|| CatpError::config(format!("override '{path}': '{}' is not a table", keys[..i].join("."))))?;
        if i + 1 == keys.len() {
            obj.insert((*key).to_string(), value);
            return Ok(());
        }
        node = obj.entry((*key).to_string()).or_insert_with(|| Value::Object(Default::default()));
    }
    unreachable!("split yields at least one key")
}
