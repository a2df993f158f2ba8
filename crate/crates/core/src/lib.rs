//! Distribution matching distillation at desk scale.
//!
//! Toy diffusion teachers are trained from scratch on analytic Gaussian
//! mixtures, sampled with deterministic probability-flow solvers, and
//! distilled into one-step generators by pairing a score-difference gradient
//! with a regression loss on precomputed noise/sample pairs.

pub mod autodiff;
pub mod diffusion;
pub mod dmd;
pub mod error;
pub mod eval;
pub mod sampler;
pub mod schedule;
pub mod toyworld;

pub use autodiff::{Activation, AdamW, AdamWConfig, Mlp, Tape, TensorBuf};
pub use diffusion::{
    train_teacher, Denoiser, DenoiserSpec, Guided, MeanPredictor, Role, TeacherConfig,
};
pub use dmd::{
    distill_affine_analytic, dmd_train, init_generator, AffineConfig, Distance, DmdConfig, DmdRun,
    Generator, LogRow, Weighting,
};
pub use error::{Error, Result};
pub use eval::{
    evaluate, mmd_rbf, mode_recall, sliced_wasserstein, Bandwidth, EvalConfig, MetricsReport,
};
pub use sampler::{generate_pairs, sample_flow, PairMeta, PairedDataset, Solver};
pub use schedule::{NoiseLevel, NoiseSchedule, PredictionType, ScheduleKind, ScheduleSpec};
pub use toyworld::{two_mode_benchmark, Component, TwoModeBenchmark, GaussianMixture};
