//! Desk-scale laboratory for query-efficient black-box transfer attacks.
//!
//! The crate trains a substitute classifier from mostly unlabeled data using
//! a single label-only query per sample against a budget-enforced target
//! oracle, crafts transferable adversarial examples with a family of
//! projected-gradient attacks, and measures attack success rate, query cost,
//! and substitute-target similarity.
//!
//! Start with the runnable examples:
//!
//! ```bash
//! cargo run --release -p advkit --example train_target
//! cargo run --release -p advkit --example substitute_training
//! cargo run --release -p advkit --example craft_adversarial
//! cargo run --release -p advkit --example budget_sweep
//! ```
//!
//! The `advkit` binary exposes the same pipeline as subcommands
//! (`train-target`, `attack`, `sweep`, `report`, `print-config`).

pub mod attack;
pub mod augment;
pub mod config;
pub mod data;
pub mod error;
pub mod eval;
pub mod model;
pub mod optim;
pub mod oracle;
pub mod runner;
pub mod semisup;
pub mod supervised;
pub mod tape;
pub mod tensor;

pub use attack::{
    AdversarialResult, AttackAlgorithm, AttackConfig, AttackMode, AttackSample, TargetClass,
};
pub use augment::Augmenter;
pub use config::RunConfig;
pub use data::{DataFormat, Dataset, SplitConfig};
pub use error::{Error, Result};
pub use eval::{CellConfig, ExperimentReport, TargetBundle};
pub use model::{ArchSpec, Model};
pub use optim::{Optimizer, OptimizerKind};
pub use oracle::{LabeledSample, Oracle};
pub use semisup::{SemiBatch, TrainConfig, TrainOutcome};
pub use tape::{Tape, Var};
pub use tensor::Tensor;
