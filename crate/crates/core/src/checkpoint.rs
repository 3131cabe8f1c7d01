//! On-disk models and resumable trainer checkpoints.
//!
//! A model directory holds `manager.json` and one `worker_<i>.json` per
//! worker. A checkpoint adds `trainer.json` with optimiser, RNG and
//! early-stopping state.

use std::fs;
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::config::Hyperparameters;
use crate::error::{CatpError, Result};
use crate::manager::{ManagerConfig, ManagerModel};
use crate::nn::{Adam, ParamStore};
use crate::scalar::Scalar;
use crate::training::{BestSnapshot, RngState, TrainerSnapshot, TrainingState};
use crate::workers::{AnyWorker, Worker, WorkerArch};

#[derive(Serialize, Deserialize)]
#[serde(bound = "T: Scalar")]
struct ManagerFile<T> {
    config: ManagerConfig,
    params: ParamStore<T>,
}

#[derive(Serialize, Deserialize)]
#[serde(bound = "T: Scalar")]
struct WorkerFile<T> {
    arch: WorkerArch,
    params: ParamStore<T>,
}

#[derive(Serialize, Deserialize)]
#[serde(bound = "T: Scalar")]
struct TrainerFile<T> {
    hyper: Hyperparameters,
    manager_opt: Adam<T>,
    worker_opts: Vec<Adam<T>>,
    state: TrainingState,
    rng: RngState,
    assignment: Option<Vec<usize>>,
    best: Option<BestSnapshot<T>>,
    stale_evals: usize,
    stopped: bool,
}

fn write_json<S: Serialize>(path: &Path, value: &S) -> Result<()> {
    fs::write(path, serde_json::to_vec(value)?)?;
    Ok(())
}

fn read_json<D: DeserializeOwned>(path: &Path) -> Result<D> {
    let bytes = fs::read(path).map_err(|e| CatpError::data(format!("{}: {e}", path.display())))?;
    serde_json::from_slice(&bytes).map_err(|e| CatpError::data(format!("{}: {e}", path.display())))
}

fn worker_path(dir: &Path, i: usize) -> std::path::PathBuf {
    dir.join(format!("worker_{i}.json"))
}

pub fn save_models<T: Scalar>(dir: &Path, manager: &ManagerModel<T>, workers: &[AnyWorker<T>]) -> Result<()> {
    fs::create_dir_all(dir)?;
    write_json(
        &dir.join("manager.json"),
        &ManagerFile {
            config: manager.config().clone(),
            params: manager.params().clone(),
        },
    )?;
    for (i, w) in workers.iter().enumerate() {
        write_json(
            &worker_path(dir, i),
            &WorkerFile {
                arch: w.arch(),
                params: w.params().clone(),
            },
        )?;
    }
    Ok(())
}

pub fn load_models<T: Scalar>(dir: &Path) -> Result<(ManagerModel<T>, Vec<AnyWorker<T>>)> {
    let m: ManagerFile<T> = read_json(&dir.join("manager.json"))?;
    let k = m.config.workers;
    let manager = ManagerModel::from_parts(m.config, m.params)?;
    let workers = (0..k)
        .map(|i| {
            let w: WorkerFile<T> = read_json(&worker_path(dir, i))?;
            AnyWorker::from_parts(&w.arch, w.params)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok((manager, workers))
}

pub fn save_checkpoint<T: Scalar>(dir: &Path, snapshot: &TrainerSnapshot<T>) -> Result<()> {
    fs::create_dir_all(dir)?;
    write_json(
        &dir.join("manager.json"),
        &ManagerFile {
            config: snapshot.manager_config.clone(),
            params: snapshot.manager.clone(),
        },
    )?;
    for (i, p) in snapshot.workers.iter().enumerate() {
        write_json(
            &worker_path(dir, i),
            &WorkerFile {
                arch: snapshot.worker_arch.clone(),
                params: p.clone(),
            },
        )?;
    }
    write_json(
        &dir.join("trainer.json"),
        &TrainerFile {
            hyper: snapshot.hyper.clone(),
            manager_opt: snapshot.manager_opt.clone(),
            worker_opts: snapshot.worker_opts.clone(),
            state: snapshot.state.clone(),
            rng: snapshot.rng,
            assignment: snapshot.assignment.clone(),
            best: snapshot.best.clone(),
            stale_evals: snapshot.stale_evals,
            stopped: snapshot.stopped,
        },
    )
}

pub fn load_checkpoint<T: Scalar>(dir: &Path) -> Result<TrainerSnapshot<T>> {
    let t: TrainerFile<T> = read_json(&dir.join("trainer.json"))?;
    let m: ManagerFile<T> = read_json(&dir.join("manager.json"))?;
    let mut arch = None;
    let mut workers = Vec::with_capacity(t.hyper.workers);
    for i in 0..t.hyper.workers {
        let w: WorkerFile<T> = read_json(&worker_path(dir, i))?;
        if arch.as_ref().is_some_and(|a| a != &w.arch) {
            return Err(CatpError::data(format!("worker {i} has a different architecture")));
        }
        arch = Some(w.arch);
        workers.push(w.params);
    }
    let worker_arch = arch.ok_or_else(|| CatpError::data("checkpoint has no workers"))?;
    Ok(TrainerSnapshot {
        hyper: t.hyper,
        manager_config: m.config,
        manager: m.params,
        worker_arch,
        workers,
        manager_opt: t.manager_opt,
        worker_opts: t.worker_opts,
        state: t.state,
        rng: t.rng,
        assignment: t.assignment,
        best: t.best,
        stale_evals: t.stale_evals,
        stopped: t.stopped,
    })
}
