//! Shipped oracle instances.
//!
//! * [`cso`]: conditional stochastic optimization toys with closed forms.
//! * [`sinkhorn`]: Sinkhorn-regularized distributionally robust regression.
//! * [`queue`]: joint pricing and staffing of an M/G/1 queue.
//! * [`ubsr`]: utility-based shortfall risk of a Gaussian portfolio.
//! * [`quadratic`]: a noiseless quadratic used as a deterministic check.

pub mod cso;
pub mod quadratic;
pub mod queue;
pub mod sinkhorn;
pub mod ubsr;

use crate::error::{Error, Result};
use crate::oracle::Oracle;

pub use cso::{CsoToy, CsoVariant};
pub use quadratic::NoiselessQuadratic;
pub use queue::{QueueInstance, QueueState, ServiceLaw};
pub use sinkhorn::SinkhornDro;
pub use ubsr::UbsrToy;

/// Names accepted by [`by_name`].
pub const INSTANCE_NAMES: [&str; 7] =
    ["cso_toy", "cso_linear", "cso_nonconvex", "sinkhorn", "queue", "ubsr", "quadratic"];

/// Default-parameter instance by name.
pub fn by_name(name: &str) -> Result<Box<dyn Oracle>> {
    let norm = name.trim().to_ascii_lowercase().replace('-', "_");
    Ok(match norm.as_str() {
        "cso_toy" | "cso" => Box::new(CsoToy::general()),
        "cso_linear" | "linear_inner" => Box::new(CsoToy::linear_inner()),
        "cso_nonconvex" | "nonconvex" => Box::new(CsoToy::nonconvex()),
        "sinkhorn" => Box::new(SinkhornDro::synthetic(SinkhornDro::DEFAULT_SEED)),
        "queue" => Box::new(QueueInstance::exponential()),
        "ubsr" => Box::new(UbsrToy::default_toy()),
        "quadratic" => Box::new(NoiselessQuadratic::new(2)),
        _ => {
            return Err(Error::InvalidInput(format!(
                "unknown instance '{name}', expected one of {}",
                INSTANCE_NAMES.join(", ")
            )))
        }
    })
}
