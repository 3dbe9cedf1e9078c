//! Anytime neural networks built from recursively nested subnetworks, and the
//! orthogonalized SGD family of multitask optimizers used to train them.
//!
//! The crate is organized bottom-up:
//!
//! - [`tensor`] and [`graph`]: dense `f64` arithmetic and reverse-mode
//!   differentiation over a flat parameter vector.
//! - [`arch`]: width, depth and combined nesting plus the even-width and
//!   early-exit cascade baselines.
//! - [`optim`]: Greedy, SGD, NormSGD, OSGD and OSGD-Norm.
//! - [`data`], [`schedule`], [`train`]: datasets, learning-rate schedules and
//!   the seeded training/evaluation loop.
//! - [`runtime`]: deadline-driven inference simulation and accuracy–cost curves.
//! - [`checkpoint`]: versioned JSON checkpoints.

pub mod arch;
pub mod checkpoint;
pub mod data;
pub mod error;
pub mod graph;
pub mod optim;
pub mod output;
pub mod runtime;
pub mod schedule;
pub mod tensor;
pub mod train;
pub mod verify;

pub use arch::{NestedNetwork, NestingMode, StageMask, StagePlan, StandaloneNet};
pub use error::{Error, Result};
pub use checkpoint::Checkpoint;
pub use data::{gen_spiral, load_csv, load_idx, CsvSchema, Dataset, Split};
pub use graph::{finite_diff_against, finite_diff_check, Feeds, Graph, GraphBuilder, NodeId, Op, Trace};
pub use optim::{
    combine, normalize_gradient, orthogonalize, per_task_gradients, step, train_step,
    weighted_loss, CombineMode, OptimizerConfig, OptimizerState, PriorityOrder, Strategy,
    TaskGradient,
};
pub use runtime::{
    simulate_nested, simulate_oracle_all, simulate_oracle_each, sweep, tradeoff_curve,
    CostModel, DeadlineSweep, Independent, SimReport,
};
pub use schedule::LrSchedule;
pub use tensor::{matmul, relu, softmax_xent, Tensor};
pub use train::{evaluate, train, DataConfig, RunHistory, TrainConfig};
