//! Gradient estimators built on a biased oracle.
//!
//! | kind    | estimate                                   | mean        |
//! |---------|--------------------------------------------|-------------|
//! | L-SGD   | mean of `n_L` draws of `h^L`               | `∇F^L`      |
//! | V-MLMC  | `Σ_l` mean of `n_l` draws of `H^l`         | `∇F^L`      |
//! | RT-MLMC | `H^ι / q_ι`, `ι` from a law truncated at L | `∇F^L`      |
//! | RU-MLMC | `H^ι / q_ι`, `ι` geometric                 | `∇F`        |
//! | RR-MLMC | `Σ_{l≤ι} p_l H^l`, `ι` geometric           | `∇F`        |
//!
//! Level masses are proportional to `2^{-(b+c)l/2}`. The geometric law needs
//! `b > c`; otherwise the unbiased estimators have unbounded variance or
//! expected cost and construction fails.
//!
//! Sampling happens in two steps: [`Estimator::plan`] draws the levels and
//! fixes the exact cost, then [`Estimator::execute`] queries the oracle. The
//! split lets optimizers check a budget before spending it and lets the
//! variance-reduced loop replay one plan at two points.

use std::fmt;
use std::str::FromStr;

use rand::Rng;

use crate::error::{Error, Result};
use crate::oracle::{Oracle, OracleMeta};
use crate::rng::Stream;

/// `Σ_{l=0}^{L} 2^{αl} = (1 − 2^{α(L+1)}) / (1 − 2^α)`.
pub fn r_sum(alpha: f64, level: u32) -> Result<f64> {
    if alpha == 0.0 || !alpha.is_finite() {
        return Err(Error::InvalidInput(format!("r_sum needs a finite nonzero exponent, got {alpha}")));
    }
    let num = -(alpha * (level as f64 + 1.0) * std::f64::consts::LN_2).exp_m1();
    let den = -(alpha * std::f64::consts::LN_2).exp_m1();
    Ok(num / den)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LevelLaw {
    Truncated,
    Geometric,
}

/// Level law `{q_l}` with survival weights `p_l = 1 / P(ι ≥ l)`.
///
/// Levels start at `base`, the oracle's floor; masses depend on `l − base`.
#[derive(Debug, Clone, PartialEq)]
pub struct LevelDistribution {
    law: LevelLaw,
    base: u32,
    rate: f64,
    q: Vec<f64>,
    cdf: Vec<f64>,
    tail: Vec<f64>,
}

impl LevelDistribution {
    /// `q_l ∝ 2^{-(b+c)l/2}` on `0..=top`.
    pub fn truncated(meta: &OracleMeta, top: u32) -> Self {
        Self::truncated_from(meta, 0, top).expect("base 0 never exceeds top")
    }

    pub fn truncated_from(meta: &OracleMeta, base: u32, top: u32) -> Result<Self> {
        if top < base {
            return Err(Error::InvalidInput(format!("truncation level {top} below base level {base}")));
        }
        let rate = 0.5 * (meta.b + meta.c);
        let raw: Vec<f64> = (0..=top - base).map(|k| (-rate * k as f64).exp2()).collect();
        let total: f64 = raw.iter().sum();
        let q: Vec<f64> = raw.iter().map(|v| v / total).collect();
        let mut cdf = Vec::with_capacity(q.len());
        let mut acc = 0.0;
        for v in &q {
            acc += v;
            cdf.push(acc);
        }
        *cdf.last_mut().expect("at least one level") = 1.0;
        let mut tail = vec![0.0; q.len()];
        let mut acc = 0.0;
        for k in (0..q.len()).rev() {
            acc += q[k];
            tail[k] = acc;
        }
        Ok(Self { law: LevelLaw::Truncated, base, rate, q, cdf, tail })
    }

    /// `q_l = 2^{-(b+c)l/2}(1 − 2^{-(b+c)/2})` on all `l ≥ 0`; needs `b > c`.
    pub fn geometric(meta: &OracleMeta) -> Result<Self> {
        Self::geometric_from(meta, 0)
    }

    pub fn geometric_from(meta: &OracleMeta, base: u32) -> Result<Self> {
        if meta.b <= meta.c {
            return Err(Error::Inapplicable {
                estimator: "geometric level law".into(),
                reason: format!("needs b > c, instance declares b = {} and c = {}", meta.b, meta.c),
            });
        }
        Ok(Self::geometric_unchecked(meta, base))
    }

    /// Geometric law without the `b > c` check. Outside that regime the
    /// unbiased estimators have no finite variance-cost guarantee.
    pub fn geometric_unchecked(meta: &OracleMeta, base: u32) -> Self {
        let rate = 0.5 * (meta.b + meta.c);
        Self { law: LevelLaw::Geometric, base, rate, q: Vec::new(), cdf: Vec::new(), tail: Vec::new() }
    }

    pub fn law(&self) -> LevelLaw {
        self.law
    }

    pub fn base(&self) -> u32 {
        self.base
    }

    /// Highest level with positive mass, `None` for the geometric law.
    pub fn top(&self) -> Option<u32> {
        match self.law {
            LevelLaw::Truncated => Some(self.base + self.q.len() as u32 - 1),
            LevelLaw::Geometric => None,
        }
    }

    /// Masses `q_base..=q_top` of a truncated law.
    pub fn masses(&self) -> &[f64] {
        &self.q
    }

    pub fn q(&self, level: u32) -> f64 {
        if level < self.base {
            return 0.0;
        }
        let k = (level - self.base) as usize;
        match self.law {
            LevelLaw::Truncated => self.q.get(k).copied().unwrap_or(0.0),
            LevelLaw::Geometric => (-self.rate * k as f64).exp2() * -(-self.rate * std::f64::consts::LN_2).exp_m1(),
        }
    }

    /// `P(ι ≥ level)`.
    pub fn survival(&self, level: u32) -> f64 {
        if level <= self.base {
            return 1.0;
        }
        let k = (level - self.base) as usize;
        match self.law {
            LevelLaw::Truncated => self.tail.get(k).copied().unwrap_or(0.0),
            LevelLaw::Geometric => (-self.rate * k as f64).exp2(),
        }
    }

    /// Russian-roulette weight `p_l = (1 − Σ_{l'<l} q_{l'})^{-1}`.
    pub fn p(&self, level: u32) -> f64 {
        1.0 / self.survival(level)
    }

    pub fn sample(&self, rng: &mut Stream) -> u32 {
        let u: f64 = rng.random();
        match self.law {
            LevelLaw::Truncated => {
                let k = self.cdf.iter().position(|&c| u < c).unwrap_or(self.cdf.len() - 1);
                self.base + k as u32
            }
            LevelLaw::Geometric => {
                // P(k ≥ j) = 2^{-rate·j}; invert with a uniform on (0, 1].
                let v = 1.0 - u;
                let k = (v.log2() / -self.rate).floor();
                self.base + k.min(u32::MAX as f64 / 2.0) as u32
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum EstimatorKind {
    LSgd,
    VMlmc,
    RtMlmc,
    RuMlmc,
    RrMlmc,
}

impl EstimatorKind {
    pub const ALL: [EstimatorKind; 5] =
        [EstimatorKind::LSgd, EstimatorKind::VMlmc, EstimatorKind::RtMlmc, EstimatorKind::RuMlmc, EstimatorKind::RrMlmc];

    pub fn as_str(&self) -> &'static str {
        match self {
            EstimatorKind::LSgd => "l-sgd",
            EstimatorKind::VMlmc => "v-mlmc",
            EstimatorKind::RtMlmc => "rt-mlmc",
            EstimatorKind::RuMlmc => "ru-mlmc",
            EstimatorKind::RrMlmc => "rr-mlmc",
        }
    }

    /// RU and RR target `∇F` itself and ignore the truncation level.
    pub fn is_unbiased(&self) -> bool {
        matches!(self, EstimatorKind::RuMlmc | EstimatorKind::RrMlmc)
    }
}

impl fmt::Display for EstimatorKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for EstimatorKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let norm = s.trim().to_ascii_lowercase().replace('_', "-");
        EstimatorKind::ALL
            .into_iter()
            .find(|k| k.as_str() == norm || k.as_str().replace('-', "") == norm)
            .ok_or_else(|| Error::InvalidInput(format!("unknown estimator '{s}'")))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EstimatorConfig {
    pub kind: EstimatorKind,
    /// Truncation level `L` (unused by RU/RR).
    pub level: u32,
    /// L-SGD batch `n_L`.
    pub n_top: usize,
    /// V-MLMC batch multiplier `N`.
    pub multiplier: f64,
    /// Build RU/RR even when `b ≤ c`.
    pub force: bool,
}

impl EstimatorConfig {
    pub fn new(kind: EstimatorKind, level: u32) -> Self {
        Self { kind, level, n_top: 1, multiplier: 1.0, force: false }
    }

    pub fn with_batch(mut self, n_top: usize) -> Self {
        self.n_top = n_top;
        self
    }

    pub fn with_multiplier(mut self, n: f64) -> Self {
        self.multiplier = n;
        self
    }

    pub fn forced(mut self, force: bool) -> Self {
        self.force = force;
        self
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradientSample {
    pub g: Vec<f64>,
    pub cost: u64,
    pub levels: Vec<u32>,
}

/// One group of identical queries inside a plan.
#[derive(Debug, Clone, PartialEq)]
struct PlanItem {
    level: u32,
    count: usize,
    weight: f64,
    use_h: bool,
}

/// Levels drawn for one estimate, with its exact cost.
#[derive(Debug, Clone, PartialEq)]
pub struct Plan {
    items: Vec<PlanItem>,
    cost: u64,
}

impl Plan {
    pub fn cost(&self) -> u64 {
        self.cost
    }

    pub fn levels(&self) -> Vec<u32> {
        self.items.iter().map(|i| i.level).collect()
    }
}

/// A configured estimator bound to an oracle's metadata.
#[derive(Debug, Clone)]
pub struct Estimator {
    cfg: EstimatorConfig,
    base: u32,
    batches: Vec<usize>,
    dist: Option<LevelDistribution>,
    level_costs: Vec<u64>,
    cap: u32,
}

impl Estimator {
    pub fn new(cfg: EstimatorConfig, oracle: &dyn Oracle) -> Result<Self> {
        let meta = oracle.meta();
        meta.validate()?;
        let base = oracle.min_level();
        let cap = meta.level_cap;
        if !cfg.kind.is_unbiased() {
            if cfg.level < base {
                return Err(Error::InvalidInput(format!(
                    "level {} is below the instance floor {base}",
                    cfg.level
                )));
            }
            if cfg.level > cap {
                return Err(Error::LevelOverflow { level: cfg.level, cap });
            }
        }
        let level_costs = (0..=cap).map(|l| oracle.level_cost(l)).collect();
        let mut batches = Vec::new();
        let mut dist = None;
        match cfg.kind {
            EstimatorKind::LSgd => {
                if cfg.n_top == 0 {
                    return Err(Error::InvalidInput("L-SGD batch must be at least 1".into()));
                }
            }
            EstimatorKind::VMlmc => {
                if !(cfg.multiplier.is_finite() && cfg.multiplier > 0.0) {
                    return Err(Error::InvalidInput("V-MLMC multiplier N must be positive".into()));
                }
                batches = vmlmc_batches(meta, base, cfg.level, cfg.multiplier);
            }
            EstimatorKind::RtMlmc => {
                dist = Some(LevelDistribution::truncated_from(meta, base, cfg.level)?);
            }
            EstimatorKind::RuMlmc | EstimatorKind::RrMlmc => {
                let law = if cfg.force {
                    LevelDistribution::geometric_unchecked(meta, base)
                } else {
                    LevelDistribution::geometric_from(meta, base).map_err(|_| Error::Inapplicable {
                        estimator: cfg.kind.to_string(),
                        reason: format!(
                            "{} declares b = {} ≤ c = {}; the geometric law has unbounded variance or cost",
                            oracle.name(),
                            meta.b,
                            meta.c
                        ),
                    })?
                };
                dist = Some(law);
            }
        }
        Ok(Self { cfg, base, batches, dist, level_costs, cap })
    }

    pub fn kind(&self) -> EstimatorKind {
        self.cfg.kind
    }

    pub fn config(&self) -> &EstimatorConfig {
        &self.cfg
    }

    pub fn level(&self) -> u32 {
        self.cfg.level
    }

    /// V-MLMC batch sizes `n_base..=n_L`.
    pub fn batches(&self) -> &[usize] {
        &self.batches
    }

    pub fn distribution(&self) -> Option<&LevelDistribution> {
        self.dist.as_ref()
    }

    fn cost_at(&self, level: u32) -> Result<u64> {
        self.level_costs.get(level as usize).copied().ok_or(Error::LevelOverflow { level, cap: self.cap })
    }

    /// Draw the levels of one estimate.
    pub fn plan(&self, rng: &mut Stream) -> Result<Plan> {
        let items = match self.cfg.kind {
            EstimatorKind::LSgd => {
                vec![PlanItem { level: self.cfg.level, count: self.cfg.n_top, weight: 1.0, use_h: true }]
            }
            EstimatorKind::VMlmc => self
                .batches
                .iter()
                .enumerate()
                .map(|(k, &n)| PlanItem { level: self.base + k as u32, count: n, weight: 1.0, use_h: false })
                .collect(),
            EstimatorKind::RtMlmc | EstimatorKind::RuMlmc => {
                let dist = self.dist.as_ref().expect("randomized estimator has a law");
                let level = dist.sample(rng);
                if level > self.cap {
                    return Err(Error::LevelOverflow { level, cap: self.cap });
                }
                vec![PlanItem { level, count: 1, weight: 1.0 / dist.q(level), use_h: false }]
            }
            EstimatorKind::RrMlmc => {
                let dist = self.dist.as_ref().expect("randomized estimator has a law");
                let top = dist.sample(rng);
                if top > self.cap {
                    return Err(Error::LevelOverflow { level: top, cap: self.cap });
                }
                (self.base..=top).map(|l| PlanItem { level: l, count: 1, weight: dist.p(l), use_h: false }).collect()
            }
        };
        let mut cost: u64 = 0;
        for it in &items {
            let c = self
                .cost_at(it.level)?
                .checked_mul(it.count as u64)
                .ok_or_else(|| Error::BudgetOverflow("estimate cost overflows u64".into()))?;
            cost = cost.checked_add(c).ok_or_else(|| Error::BudgetOverflow("estimate cost overflows u64".into()))?;
        }
        Ok(Plan { items, cost })
    }

    /// Query the oracle for a drawn plan.
    pub fn execute(&self, plan: &Plan, oracle: &dyn Oracle, x: &[f64], rng: &mut Stream) -> Result<GradientSample> {
        let mut g = vec![0.0; x.len()];
        let mut cost = 0u64;
        for it in &plan.items {
            let scale = it.weight / it.count as f64;
            for _ in 0..it.count {
                let out = oracle.query(it.level, x, rng)?;
                let v = if it.use_h { &out.h } else { &out.diff };
                for (gi, vi) in g.iter_mut().zip(v) {
                    *gi += scale * vi;
                }
                cost += out.cost;
            }
        }
        if cost != plan.cost {
            return Err(Error::Contract(format!(
                "{} charged {cost} units where its declared level costs give {}",
                oracle.name(),
                plan.cost
            )));
        }
        Ok(GradientSample { g, cost, levels: plan.levels() })
    }

    pub fn estimate(&self, oracle: &dyn Oracle, x: &[f64], rng: &mut Stream) -> Result<GradientSample> {
        let plan = self.plan(rng)?;
        self.execute(&plan, oracle, x, rng)
    }

    /// Evaluate one plan and one oracle realization at two points.
    ///
    /// Fails with a contract error when the oracle's random consumption
    /// depends on the query point, since then the realizations differ.
    pub fn execute_coupled(
        &self,
        plan: &Plan,
        oracle: &dyn Oracle,
        x_a: &[f64],
        x_b: &[f64],
        rng: &mut Stream,
    ) -> Result<(GradientSample, GradientSample)> {
        let mut replay = rng.clone();
        let a = self.execute(plan, oracle, x_a, rng)?;
        let b = self.execute(plan, oracle, x_b, &mut replay)?;
        if replay != *rng {
            return Err(Error::Contract(format!(
                "{} consumed a point-dependent amount of randomness",
                oracle.name()
            )));
        }
        Ok((a, b))
    }

    /// Largest cost a single estimate can incur, `None` when unbounded.
    pub fn max_cost(&self) -> Option<u64> {
        match self.cfg.kind {
            EstimatorKind::LSgd => Some(self.level_costs[self.cfg.level as usize] * self.cfg.n_top as u64),
            EstimatorKind::VMlmc => Some(
                self.batches
                    .iter()
                    .enumerate()
                    .map(|(k, &n)| self.level_costs[self.base as usize + k] * n as u64)
                    .sum(),
            ),
            EstimatorKind::RtMlmc => Some(self.level_costs[self.cfg.level as usize]),
            EstimatorKind::RuMlmc | EstimatorKind::RrMlmc => None,
        }
    }

    /// Expected cost of one estimate from the level law and exact level costs.
    /// Geometric laws are summed up to the hard cap.
    pub fn expected_cost(&self) -> f64 {
        let c = |l: u32| self.level_costs[l as usize] as f64;
        match self.cfg.kind {
            EstimatorKind::LSgd | EstimatorKind::VMlmc => self.max_cost().expect("bounded") as f64,
            EstimatorKind::RtMlmc => {
                let d = self.dist.as_ref().expect("law");
                (self.base..=self.cfg.level).map(|l| d.q(l) * c(l)).sum()
            }
            EstimatorKind::RuMlmc => {
                let d = self.dist.as_ref().expect("law");
                (self.base..=self.cap).map(|l| d.q(l) * c(l)).sum()
            }
            EstimatorKind::RrMlmc => {
                let d = self.dist.as_ref().expect("law");
                let mut cum = 0.0;
                let mut total = 0.0;
                for l in self.base..=self.cap {
                    cum += c(l);
                    total += d.q(l) * cum;
                }
                total
            }
        }
    }
}

/// `n_l = ceil(2^{-(b+c)(l−base)/2} N)` for `l = base..=top`.
pub fn vmlmc_batches(meta: &OracleMeta, base: u32, top: u32, multiplier: f64) -> Vec<usize> {
    let rate = 0.5 * (meta.b + meta.c);
    (0..=top.saturating_sub(base))
        .map(|k| {
            let n = ((-rate * k as f64).exp2() * multiplier).ceil();
            (n as usize).max(1)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;

    fn meta(b: f64, c: f64) -> OracleMeta {
        OracleMeta { a: 1.0, b, c, m_a: 1.0, m_b: 1.0, m_c: 1.0, sigma_sq: 1.0, d: 1, level_cap: 30 }
    }

    #[test]
    fn r_sum_examples() {
        assert!((r_sum(-1.0, 1).unwrap() - 1.5).abs() < 1e-15);
        assert!((r_sum(1.0, 2).unwrap() - 7.0).abs() < 1e-12);
        let direct: f64 = (0..=20).map(|l| (-1.5 * l as f64).exp2()).sum();
        assert!((r_sum(-1.5, 20).unwrap() - direct).abs() <= 1e-12 * direct);
        assert!(r_sum(0.0, 3).is_err());
    }

    #[test]
    fn truncated_examples() {
        let d = LevelDistribution::truncated(&meta(1.0, 1.0), 2);
        let q = d.masses();
        assert!((q[0] - 4.0 / 7.0).abs() < 1e-15);
        assert!((q[1] - 2.0 / 7.0).abs() < 1e-15);
        assert!((q[2] - 1.0 / 7.0).abs() < 1e-15);
        assert_eq!(LevelDistribution::truncated(&meta(1.0, 1.0), 0).masses(), &[1.0]);
        let d = LevelDistribution::truncated(&meta(2.0, 1.0), 3);
        let raw = [1.0, (-1.5f64).exp2(), (-3.0f64).exp2(), (-4.5f64).exp2()];
        let tot: f64 = raw.iter().sum();
        for (a, b) in d.masses().iter().zip(raw) {
            assert!((a - b / tot).abs() < 1e-15);
        }
        assert!((d.masses().iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn geometric_examples() {
        let d = LevelDistribution::geometric(&meta(2.0, 1.0)).unwrap();
        assert!((d.q(0) - (1.0 - (-1.5f64).exp2())).abs() < 1e-15);
        assert!((d.q(0) - 0.64645).abs() < 1e-5);
        assert!(matches!(LevelDistribution::geometric(&meta(1.0, 1.0)), Err(Error::Inapplicable { .. })));
        let total: f64 = (0..200).map(|l| d.q(l)).sum();
        assert!((total - 1.0).abs() < 1e-12);
    }

    #[test]
    fn roulette_weights() {
        let d = LevelDistribution::truncated(&meta(1.0, 1.0), 3);
        assert_eq!(d.p(0), 1.0);
        let mut prev = 1.0;
        for l in 1..=3 {
            assert!(d.p(l) >= prev);
            prev = d.p(l);
        }
        let g = LevelDistribution::geometric(&meta(2.0, 1.0)).unwrap();
        assert!((g.p(2) - 8.0).abs() < 1e-12);
    }

    #[test]
    fn vmlmc_batch_example() {
        assert_eq!(vmlmc_batches(&meta(1.0, 1.0), 0, 2, 8.0), vec![8, 4, 2]);
        assert_eq!(vmlmc_batches(&meta(1.0, 1.0), 0, 6, 8.0), vec![8, 4, 2, 1, 1, 1, 1]);
    }

    #[test]
    fn geometric_level_frequency() {
        let d = LevelDistribution::geometric(&meta(2.0, 1.0)).unwrap();
        let mut r = rng::stream(11);
        let n = 1_000_000;
        let zeros = (0..n).filter(|_| d.sample(&mut r) == 0).count() as f64;
        let p = 1.0 - (-1.5f64).exp2();
        let se = (p * (1.0 - p) / n as f64).sqrt();
        assert!((zeros / n as f64 - p).abs() < 3.0 * se);
    }

    #[test]
    fn kind_names_round_trip() {
        for k in EstimatorKind::ALL {
            assert_eq!(k.as_str().parse::<EstimatorKind>().unwrap(), k);
        }
        assert_eq!("RT_MLMC".parse::<EstimatorKind>().unwrap(), EstimatorKind::RtMlmc);
        assert!("mlmc".parse::<EstimatorKind>().is_err());
    }
}
