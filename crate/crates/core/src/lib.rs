//! Stochastic optimization with biased gradient oracles.
//!
//! A biased oracle at level `l` returns an unbiased estimate `h` of the
//! gradient of a surrogate `F^l` together with a coupled estimate `H` of the
//! level difference `∇F^l − ∇F^{l−1}`. The estimators in [`estimators`]
//! combine levels (single-level, vanilla MLMC, randomized truncation,
//! randomized unbiased, Russian roulette), [`optimizers`] drives them through
//! plain SGD or a recursive variance-reduced loop, [`problems`] ships the
//! oracle instances and [`bench`] measures rates and cost-to-accuracy.

pub mod bench;
pub mod error;
pub mod estimators;
pub mod io;
pub mod optimizers;
pub mod oracle;
pub mod problems;
pub mod rng;
pub mod stats;

pub use error::{Error, Result};
pub use estimators::{Estimator, EstimatorConfig, EstimatorKind, GradientSample, LevelDistribution};
pub use optimizers::{Convexity, RunOptions, RunRecord, StepSchedule, VrConfig};
pub use oracle::{CostMeter, Oracle, OracleMeta, OracleOutput};
pub use rng::Stream;
