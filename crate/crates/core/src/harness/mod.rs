//! Synthetic data, training loop, experiment sweeps and reports.

pub mod checks;
pub mod config;
pub mod corpus;
pub mod optim;
pub mod report;
pub mod specaug;
pub mod sweep;
pub mod train;

pub use config::{ExperimentConfig, TrainParams};
pub use corpus::{generate_corpus, SyntheticTaskSpec, Utterance};
pub use optim::{lr_at, Adam};
pub use specaug::{spec_augment, SpecAugConfig};
pub use sweep::{sweep_left_context, sweep_reg, ContextSweep, RegPoint, SweepMode};
pub use train::{evaluate, train, EvalPoint, ExperimentReport, TrainOutcome};
