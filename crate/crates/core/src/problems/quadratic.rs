//! `F(x) = ½‖x‖²` with an exact gradient at every level.

use crate::error::Result;
use crate::oracle::{Constants, Convexity, Oracle, OracleMeta, OracleOutput, DEFAULT_LEVEL_CAP};
use crate::rng::Stream;

#[derive(Debug, Clone)]
pub struct NoiselessQuadratic {
    meta: OracleMeta,
}

impl NoiselessQuadratic {
    pub fn new(d: usize) -> Self {
        // The declared constants are valid upper bounds for a noiseless oracle.
        let meta =
            OracleMeta { a: 1.0, b: 1.0, c: 1.0, m_a: 1.0, m_b: 1.0, m_c: 1.0, sigma_sq: 1.0, d, level_cap: DEFAULT_LEVEL_CAP };
        Self { meta }
    }
}

impl Oracle for NoiselessQuadratic {
    fn name(&self) -> &str {
        "quadratic"
    }

    fn meta(&self) -> &OracleMeta {
        &self.meta
    }

    fn convexity(&self) -> Convexity {
        Convexity::StronglyConvex
    }

    fn constants(&self) -> Constants {
        Constants { mu: Some(1.0), smoothness: 1.0, lipschitz: None }
    }

    fn level_cost(&self, level: u32) -> u64 {
        1u64 << level
    }

    fn sample(&self, level: u32, x: &[f64], _rng: &mut Stream) -> Result<OracleOutput> {
        let h = x.to_vec();
        let diff = if level == 0 { h.clone() } else { vec![0.0; x.len()] };
        Ok(OracleOutput { h, diff, cost: self.level_cost(level) })
    }

    fn default_start(&self) -> Vec<f64> {
        vec![1.0; self.meta.d]
    }

    fn objective(&self, x: &[f64]) -> Option<f64> {
        Some(0.5 * x.iter().map(|v| v * v).sum::<f64>())
    }

    fn gradient(&self, x: &[f64]) -> Option<Vec<f64>> {
        Some(x.to_vec())
    }

    fn level_gradient(&self, _level: u32, x: &[f64]) -> Option<Vec<f64>> {
        Some(x.to_vec())
    }

    fn minimizer(&self) -> Option<Vec<f64>> {
        Some(vec![0.0; self.meta.d])
    }
}
