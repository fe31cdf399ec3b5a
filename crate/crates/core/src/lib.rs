//! SketchySGD: stochastic gradient descent preconditioned by a randomized
//! Nyström approximation of a subsampled Hessian, with an automatically
//! estimated learning rate.
//!
//! The crate is organized bottom-up:
//!
//! - [`linalg`]: dense kernels on skinny matrices and the seeded sampler.
//! - [`oracles`]: ridge and logistic regression losses, minibatch gradients and
//!   Hessian-vector products over dense or sparse data.
//! - [`nystrom`]: the low-rank Hessian approximation and preconditioner solves.
//! - [`optimizer`]: SketchySGD (adaptive and staged), SGD and SVRG.
//! - [`data`]: libsvm parsing, preprocessing and random-feature maps.
//! - [`diagnostics`]: dense spectral checks of preconditioner quality.
//! - [`harness`]: the JSON-configured experiment driver behind the CLI.

// `!(x >= 0.0)` style checks are deliberate: they also reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod data;
pub mod diagnostics;
pub mod error;
pub mod harness;
pub mod linalg;
pub mod nystrom;
pub mod optimizer;
pub mod oracles;
pub mod synthetic;

pub use error::{Error, Result};
pub use linalg::{DenseMatrix, SeededRng};
pub use nystrom::NystromApprox;
pub use optimizer::{
    resolve_baseline, resolve_config, sgd_run, sketchysgd_run, sketchysgd_theoretical_run, svrg_run,
    BaselineConfig, EvalSchedule, Evaluation, MetricsRecord, ResolvedSketchyConfig, RunOutput,
    SketchyConfig,
};
pub use oracles::{Batch, DataMatrix, ProblemOracle, Task};
