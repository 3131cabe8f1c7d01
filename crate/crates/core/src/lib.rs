//! Context-aware trajectory prediction: a manager routes each sample to
//! one of `K` worker predictors, trained together by competition.
//!
//! Numeric code is generic over [`scalar::Scalar`] (`f32` or `f64`); the
//! aliases below fix the scalar for common use.

pub mod autograd;
pub mod checkpoint;
pub mod config;
pub mod context;
pub mod datasets;
pub mod error;
pub mod evaluation;
pub mod manager;
pub mod nn;
pub mod sample;
pub mod scalar;
pub mod tensor;
pub mod training;
pub mod workers;

pub use error::{CatpError, Result};

pub type Manager = manager::ManagerModel<f64>;
pub type Worker = workers::AnyWorker<f64>;
pub type Corpus = datasets::CorpusSplit<f64>;
pub type Sample = sample::DataSample<f64>;
pub type Trainer = training::Trainer<f64>;

pub type ManagerF32 = manager::ManagerModel<f32>;
pub type WorkerF32 = workers::AnyWorker<f32>;
pub type CorpusF32 = datasets::CorpusSplit<f32>;
pub type SampleF32 = sample::DataSample<f32>;
pub type TrainerF32 = training::Trainer<f32>;
