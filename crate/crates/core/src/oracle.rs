//! The biased stochastic oracle abstraction and its cost meter.
//!
//! An oracle at level `l` returns `h`, unbiased for `∇F^l(x)`, and `diff`,
//! unbiased for `∇F^l(x) − ∇F^{l−1}(x)`, both computed from one realization.
//! At the instance's lowest level `diff == h`. Every random draw an oracle
//! makes must be independent of `x`; the variance-reduced optimizer relies on
//! this to evaluate one realization at two points by cloning the stream.

use std::sync::atomic::{AtomicU64, Ordering};

use crate::error::{Error, Result};
use crate::rng::Stream;

pub const DEFAULT_LEVEL_CAP: u32 = 30;

/// Convexity class of the objective, which picks level and output rules.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Convexity {
    StronglyConvex,
    Convex,
    Nonconvex,
}

/// Declared bias/variance/cost law `B_l = M_a 2^{-al}`, `V_l = M_b 2^{-bl}`,
/// `C_l = M_c 2^{cl}` plus the uniform variance bound of `h`.
#[derive(Debug, Clone, PartialEq)]
pub struct OracleMeta {
    pub a: f64,
    pub b: f64,
    pub c: f64,
    pub m_a: f64,
    pub m_b: f64,
    pub m_c: f64,
    pub sigma_sq: f64,
    pub d: usize,
    pub level_cap: u32,
}

impl OracleMeta {
    pub fn validate(&self) -> Result<()> {
        let named = [
            ("a", self.a),
            ("b", self.b),
            ("c", self.c),
            ("M_a", self.m_a),
            ("M_b", self.m_b),
            ("M_c", self.m_c),
            ("sigma_sq", self.sigma_sq),
        ];
        for (name, v) in named {
            if !(v.is_finite() && v > 0.0) {
                return Err(Error::InvalidInput(format!("{name} must be finite and positive, got {v}")));
            }
        }
        if self.d == 0 {
            return Err(Error::InvalidInput("dimension must be at least 1".into()));
        }
        Ok(())
    }

    pub fn bias_bound(&self, level: u32) -> f64 {
        self.m_a * (-self.a * level as f64).exp2()
    }

    pub fn variance_bound(&self, level: u32) -> f64 {
        self.m_b * (-self.b * level as f64).exp2()
    }

    pub fn cost_bound(&self, level: u32) -> f64 {
        self.m_c * (self.c * level as f64).exp2()
    }
}

/// Declared cost bound `M_c 2^{c·level}` in cost units.
pub fn cost_of_level(meta: &OracleMeta, level: u32) -> Result<f64> {
    let cost = meta.cost_bound(level);
    if !cost.is_finite() || cost >= u64::MAX as f64 {
        return Err(Error::BudgetOverflow(format!("cost of level {level} does not fit in u64")));
    }
    Ok(cost)
}

#[derive(Debug, Clone, PartialEq)]
pub struct OracleOutput {
    pub h: Vec<f64>,
    pub diff: Vec<f64>,
    pub cost: u64,
}

/// Problem constants the step-size rules need. They are documented per
/// instance and may be overridden from configuration.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Constants {
    /// Strong convexity (or PL) modulus, when it exists.
    pub mu: Option<f64>,
    /// Smoothness constant `S_F`.
    pub smoothness: f64,
    /// Lipschitz constant `L_F`, when it exists.
    pub lipschitz: Option<f64>,
}

pub trait Oracle: Send + Sync {
    fn name(&self) -> &str;

    fn meta(&self) -> &OracleMeta;

    fn convexity(&self) -> Convexity;

    fn constants(&self) -> Constants;

    /// Lowest level the instance can simulate. Its `diff` equals `h`.
    fn min_level(&self) -> u32 {
        0
    }

    /// Exact cost units charged by a query at `level`.
    fn level_cost(&self, level: u32) -> u64;

    /// Instance-specific domain check, called before every query.
    fn check_point(&self, _x: &[f64]) -> Result<()> {
        Ok(())
    }

    /// Map an iterate back into the instance's domain. Identity by default.
    fn project(&self, _x: &mut [f64]) {}

    /// Draw one realization and evaluate `(h, diff)`. Callers go through
    /// [`Oracle::query`], which validates the arguments first.
    fn sample(&self, level: u32, x: &[f64], rng: &mut Stream) -> Result<OracleOutput>;

    fn default_start(&self) -> Vec<f64>;

    /// True objective `F(x)`, when available in closed form.
    fn objective(&self, _x: &[f64]) -> Option<f64> {
        None
    }

    /// True gradient `∇F(x)`, when available in closed form.
    fn gradient(&self, _x: &[f64]) -> Option<Vec<f64>> {
        None
    }

    /// Surrogate gradient `∇F^l(x)`, when available in closed form.
    fn level_gradient(&self, _level: u32, _x: &[f64]) -> Option<Vec<f64>> {
        None
    }

    /// A minimizer of `F` (a reference stationary point for nonconvex toys).
    fn minimizer(&self) -> Option<Vec<f64>> {
        None
    }

    fn query(&self, level: u32, x: &[f64], rng: &mut Stream) -> Result<OracleOutput> {
        let meta = self.meta();
        if x.len() != meta.d {
            return Err(Error::InvalidInput(format!("expected a {}-vector, got length {}", meta.d, x.len())));
        }
        if x.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidInput("query point is not finite".into()));
        }
        if level > meta.level_cap {
            return Err(Error::LevelOverflow { level, cap: meta.level_cap });
        }
        if level < self.min_level() {
            return Err(Error::InvalidInput(format!(
                "level {level} is below the instance floor {}",
                self.min_level()
            )));
        }
        self.check_point(x)?;
        self.sample(level, x, rng)
    }
}

/// Thread-safe accumulator of oracle cost.
#[derive(Debug)]
pub struct CostMeter {
    total_cost: AtomicU64,
    total_queries: AtomicU64,
    per_level: Vec<AtomicU64>,
}

impl CostMeter {
    pub fn new(level_cap: u32) -> Self {
        Self {
            total_cost: AtomicU64::new(0),
            total_queries: AtomicU64::new(0),
            per_level: (0..=level_cap).map(|_| AtomicU64::new(0)).collect(),
        }
    }

    pub fn charge(&self, level: u32, cost: u64) -> Result<()> {
        self.total_cost
            .fetch_update(Ordering::Relaxed, Ordering::Relaxed, |t| t.checked_add(cost))
            .map_err(|_| Error::BudgetOverflow("cost meter overflow".into()))?;
        self.total_queries.fetch_add(1, Ordering::Relaxed);
        if let Some(slot) = self.per_level.get(level as usize) {
            slot.fetch_add(1, Ordering::Relaxed);
        }
        Ok(())
    }

    pub fn total_cost(&self) -> u64 {
        self.total_cost.load(Ordering::Relaxed)
    }

    pub fn total_queries(&self) -> u64 {
        self.total_queries.load(Ordering::Relaxed)
    }

    pub fn per_level_queries(&self) -> Vec<u64> {
        self.per_level.iter().map(|c| c.load(Ordering::Relaxed)).collect()
    }

    pub fn reset(&self) {
        self.total_cost.store(0, Ordering::Relaxed);
        self.total_queries.store(0, Ordering::Relaxed);
        self.per_level.iter().for_each(|c| c.store(0, Ordering::Relaxed));
    }
}

/// Query and charge the meter in one step.
pub fn query_metered(
    oracle: &dyn Oracle,
    level: u32,
    x: &[f64],
    rng: &mut Stream,
    meter: &CostMeter,
) -> Result<OracleOutput> {
    let out = oracle.query(level, x, rng)?;
    meter.charge(level, out.cost)?;
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn meta(m_c: f64, c: f64) -> OracleMeta {
        OracleMeta { a: 1.0, b: 1.0, c, m_a: 1.0, m_b: 1.0, m_c, sigma_sq: 1.0, d: 1, level_cap: 30 }
    }

    #[test]
    fn cost_of_level_examples() {
        assert_eq!(cost_of_level(&meta(1.0, 1.0), 10).unwrap(), 1024.0);
        assert_eq!(cost_of_level(&meta(2.0, 2.0), 3).unwrap(), 128.0);
        assert_eq!(cost_of_level(&meta(1.0, 1.0), 0).unwrap(), 1.0);
        assert!(matches!(cost_of_level(&meta(1.0, 70.0), 1), Err(Error::BudgetOverflow(_))));
    }

    #[test]
    fn meta_validation() {
        assert!(meta(1.0, 1.0).validate().is_ok());
        let mut m = meta(1.0, 1.0);
        m.b = 0.0;
        assert!(m.validate().is_err());
        let mut m = meta(1.0, 1.0);
        m.d = 0;
        assert!(m.validate().is_err());
    }

    #[test]
    fn meter_accumulates_and_resets() {
        let m = CostMeter::new(4);
        m.charge(2, 4).unwrap();
        m.charge(2, 4).unwrap();
        m.charge(0, 1).unwrap();
        assert_eq!(m.total_cost(), 9);
        assert_eq!(m.total_queries(), 3);
        assert_eq!(m.per_level_queries(), vec![1, 0, 2, 0, 0]);
        assert!(m.charge(1, u64::MAX).is_err());
        m.reset();
        assert_eq!(m.total_cost(), 0);
    }
}
