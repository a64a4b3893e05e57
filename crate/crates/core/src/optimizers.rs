//! SGD and recursive variance-reduced loops driven by an [`Estimator`].
//!
//! Trajectory row `t` holds the iterate after `t` updates (row 0 is the
//! start) and the cost spent so far. Strongly convex runs output the last
//! iterate; other classes output an iterate drawn uniformly from rows `1..=T`
//! with a dedicated stream, so the draw never perturbs the oracle stream.

use rand::Rng;

use crate::error::{Error, Result};
use crate::estimators::{Estimator, GradientSample};
pub use crate::oracle::Convexity;
use crate::oracle::{Oracle, OracleMeta};
use crate::rng::{self, Stream};
use crate::stats::{norm_sq, VecMoments};

/// Iterates with a norm above this are treated as divergence.
pub const DIVERGENCE_NORM: f64 = 1e8;

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum StepSchedule {
    /// `γ_t = scale / (μ (t + offset))`.
    Decay { mu: f64, offset: f64, scale: f64 },
    Constant(f64),
    /// `γ = 1/√(V̄ T)`.
    InverseSqrt { v_bar: f64, horizon: usize },
    /// `γ = 1/√((V̄ + L_F²) T)`.
    InverseSqrtLipschitz { v_bar: f64, lipschitz: f64, horizon: usize },
}

impl StepSchedule {
    /// `γ_t = 1/(μ(t + S_F²/μ²))`.
    pub fn strongly_convex(mu: f64, smoothness: f64) -> Self {
        StepSchedule::Decay { mu, offset: smoothness * smoothness / (mu * mu), scale: 1.0 }
    }

    /// `γ_t = 2/(μ(t + 2S_F/μ − 1))`.
    pub fn strongly_convex_shifted(mu: f64, smoothness: f64) -> Self {
        StepSchedule::Decay { mu, offset: 2.0 * smoothness / mu - 1.0, scale: 2.0 }
    }

    /// `γ_t = 1/(μ(t + 2S_F/μ²))`, the schedule paired with RU/RR.
    pub fn unbiased_decay(mu: f64, smoothness: f64) -> Self {
        StepSchedule::Decay { mu, offset: 2.0 * smoothness / (mu * mu), scale: 1.0 }
    }

    /// Step at iteration `t` (1-based).
    pub fn step(&self, t: usize) -> f64 {
        match *self {
            StepSchedule::Decay { mu, offset, scale } => scale / (mu * (t as f64 + offset)),
            StepSchedule::Constant(g) => g,
            StepSchedule::InverseSqrt { v_bar, horizon } => 1.0 / (v_bar * horizon as f64).sqrt(),
            StepSchedule::InverseSqrtLipschitz { v_bar, lipschitz, horizon } => {
                1.0 / ((v_bar + lipschitz * lipschitz) * horizon as f64).sqrt()
            }
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = match *self {
            StepSchedule::Decay { mu, offset, scale } => mu > 0.0 && scale > 0.0 && offset > -1.0,
            StepSchedule::Constant(g) => g >= 0.0 && g.is_finite(),
            StepSchedule::InverseSqrt { v_bar, horizon } => v_bar > 0.0 && horizon > 0,
            StepSchedule::InverseSqrtLipschitz { v_bar, lipschitz, horizon } => {
                v_bar + lipschitz * lipschitz > 0.0 && horizon > 0
            }
        };
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidInput(format!("invalid step schedule {self:?}")))
        }
    }
}

/// `L = ceil(log2(4 M_a/ε)/a)` for convex classes, with `ε²` for nonconvex.
pub fn select_level(meta: &OracleMeta, eps: f64, class: Convexity) -> Result<u32> {
    if !(eps > 0.0 && eps.is_finite()) {
        return Err(Error::InvalidInput(format!("target accuracy must be positive, got {eps}")));
    }
    let target = match class {
        Convexity::StronglyConvex | Convexity::Convex => eps,
        Convexity::Nonconvex => eps * eps,
    };
    let raw = ((4.0 * meta.m_a / target).log2() / meta.a).ceil().max(0.0);
    if raw > meta.level_cap as f64 {
        return Err(Error::LevelOverflow { level: raw.min(u32::MAX as f64) as u32, cap: meta.level_cap });
    }
    Ok(raw as u32)
}

/// Horizon for the `1/√(V̄T)` schedule on nonconvex problems: the smallest
/// `T` with `(2ΔF + S_F)√(V̄/T) ≤ ε²/2`.
pub fn nonconvex_horizon(eps: f64, delta_f: f64, smoothness: f64, v_bar: f64) -> usize {
    let k = 2.0 * delta_f.max(0.0) + smoothness;
    (4.0 * k * k * v_bar / eps.powi(4)).ceil().max(1.0) as usize
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct VrConfig {
    pub d1: usize,
    pub d2: usize,
    pub epoch: usize,
    pub step: f64,
}

impl VrConfig {
    pub fn validate(&self) -> Result<()> {
        if self.d2 == 0 || self.d1 < self.d2 || self.epoch == 0 || !(self.step > 0.0 && self.step.is_finite()) {
            return Err(Error::InvalidInput(format!("invalid VR configuration {self:?}")));
        }
        Ok(())
    }
}

/// Ground-truth target that ends a run early.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum StopRule {
    /// `F(x_t) − reference ≤ target`.
    Gap { target: f64, reference: f64 },
    /// Mean of `‖∇F(x_s)‖²` over rows `1..=t` at most `target`; this is the
    /// expected squared gradient at the uniformly drawn output.
    GradSq { target: f64 },
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunOptions {
    pub iterations: usize,
    pub budget: Option<u64>,
    pub stop: Option<StopRule>,
    pub seed: u64,
    /// Keep every iterate in [`RunRecord::iterates`].
    pub record_iterates: bool,
}

impl RunOptions {
    pub fn new(iterations: usize, seed: u64) -> Self {
        Self { iterations, budget: None, stop: None, seed, record_iterates: false }
    }

    pub fn with_budget(mut self, budget: u64) -> Self {
        self.budget = Some(budget);
        self
    }

    pub fn with_stop(mut self, stop: StopRule) -> Self {
        self.stop = Some(stop);
        self
    }

    pub fn recording(mut self) -> Self {
        self.record_iterates = true;
        self
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrajectoryPoint {
    pub t: usize,
    pub cum_cost: u64,
    pub objective: Option<f64>,
    pub grad_sq: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StopReason {
    Iterations,
    Budget,
    Target,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunRecord {
    pub trajectory: Vec<TrajectoryPoint>,
    pub output: Vec<f64>,
    pub output_index: usize,
    pub last: Vec<f64>,
    pub iterations: usize,
    pub total_cost: u64,
    /// Largest cost of one estimate, counting a refused final plan.
    pub max_estimate_cost: u64,
    pub stop: StopReason,
    pub seed: u64,
    /// Iterates by row, when requested.
    pub iterates: Vec<Vec<f64>>,
}

impl RunRecord {
    /// Rows `t,cum_cost,objective,grad_sq`; unknown values are left empty.
    pub fn trajectory_csv(&self) -> String {
        let mut out = String::from("t,cum_cost,objective,grad_sq\n");
        for p in &self.trajectory {
            out.push_str(&format!(
                "{},{},{},{}\n",
                p.t,
                p.cum_cost,
                crate::io::fmt_opt(p.objective),
                crate::io::fmt_opt(p.grad_sq)
            ));
        }
        out
    }

    /// First row meeting `rule`, as `(row, cumulative cost)`.
    pub fn crossing(&self, rule: &StopRule) -> Option<(usize, u64)> {
        let mut tracker = Tracker::new(Some(*rule));
        self.trajectory.iter().skip(1).find(|p| tracker.hit(p)).map(|p| (p.t, p.cum_cost))
    }
}

struct Tracker {
    rule: Option<StopRule>,
    grad_sum: f64,
    rows: usize,
}

impl Tracker {
    fn new(rule: Option<StopRule>) -> Self {
        Self { rule, grad_sum: 0.0, rows: 0 }
    }

    fn hit(&mut self, p: &TrajectoryPoint) -> bool {
        self.rows += 1;
        if let Some(g) = p.grad_sq {
            self.grad_sum += g;
        }
        match self.rule {
            None => false,
            Some(StopRule::Gap { target, reference }) => p.objective.is_some_and(|f| f - reference <= target),
            Some(StopRule::GradSq { target }) => p.grad_sq.is_some() && self.grad_sum / self.rows as f64 <= target,
        }
    }
}

struct Loop<'a> {
    oracle: &'a dyn Oracle,
    opts: &'a RunOptions,
    x: Vec<f64>,
    trajectory: Vec<TrajectoryPoint>,
    cost: u64,
    max_estimate_cost: u64,
    tracker: Tracker,
    output: Vec<f64>,
    output_index: usize,
    pick: Stream,
    uniform_output: bool,
    iterates: Vec<Vec<f64>>,
}

impl<'a> Loop<'a> {
    fn new(oracle: &'a dyn Oracle, opts: &'a RunOptions, x1: &[f64]) -> Result<Self> {
        if x1.len() != oracle.meta().d || x1.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidInput("start point must be a finite vector of the instance dimension".into()));
        }
        if opts.iterations == 0 {
            return Err(Error::InvalidInput("iteration count must be at least 1".into()));
        }
        if opts.budget == Some(0) {
            return Err(Error::InvalidInput("budget must be positive".into()));
        }
        let start = TrajectoryPoint { t: 0, cum_cost: 0, objective: oracle.objective(x1), grad_sq: grad_sq(oracle, x1) };
        Ok(Self {
            oracle,
            opts,
            x: x1.to_vec(),
            trajectory: vec![start],
            cost: 0,
            max_estimate_cost: 0,
            tracker: Tracker::new(opts.stop),
            output: x1.to_vec(),
            output_index: 0,
            pick: rng::derive(opts.seed, &[1]),
            uniform_output: oracle.convexity() != Convexity::StronglyConvex,
            iterates: if opts.record_iterates { vec![x1.to_vec()] } else { Vec::new() },
        })
    }

    /// True when `cost` more units would exceed the budget.
    fn refuses(&mut self, cost: u64) -> bool {
        match self.opts.budget {
            Some(b) if self.cost.saturating_add(cost) > b => {
                self.max_estimate_cost = self.max_estimate_cost.max(cost);
                true
            }
            _ => false,
        }
    }

    fn spend(&mut self, cost: u64) {
        self.cost += cost;
        self.max_estimate_cost = self.max_estimate_cost.max(cost);
    }

    /// Apply `x ← x − γ g`; returns true when the stop rule fires.
    fn update(&mut self, t: usize, gamma: f64, g: &[f64]) -> Result<bool> {
        let mut next: Vec<f64> = self.x.iter().zip(g).map(|(x, gi)| x - gamma * gi).collect();
        self.oracle.project(&mut next);
        if next.iter().any(|v| !v.is_finite()) || norm_sq(&next).sqrt() > DIVERGENCE_NORM {
            return Err(Error::Divergence { iteration: t, last_finite: self.x.clone() });
        }
        self.x = next;
        if self.opts.record_iterates {
            self.iterates.push(self.x.clone());
        }
        let p = TrajectoryPoint {
            t,
            cum_cost: self.cost,
            objective: self.oracle.objective(&self.x),
            grad_sq: grad_sq(self.oracle, &self.x),
        };
        self.trajectory.push(p);
        if self.uniform_output && self.pick.random_range(0..t) == 0 {
            self.output = self.x.clone();
            self.output_index = t;
        }
        Ok(self.tracker.hit(&p))
    }

    fn finish(self, stop: StopReason) -> RunRecord {
        let iterations = self.trajectory.len() - 1;
        let (output, output_index) =
            if self.uniform_output { (self.output, self.output_index) } else { (self.x.clone(), iterations) };
        RunRecord {
            trajectory: self.trajectory,
            output,
            output_index,
            last: self.x,
            iterations,
            total_cost: self.cost,
            max_estimate_cost: self.max_estimate_cost,
            stop,
            seed: self.opts.seed,
            iterates: self.iterates,
        }
    }
}

fn grad_sq(oracle: &dyn Oracle, x: &[f64]) -> Option<f64> {
    oracle.gradient(x).map(|g| norm_sq(&g))
}

/// Plain stochastic gradient loop `x_{t+1} = x_t − γ_t v(x_t)`.
///
/// The budget is checked before each estimate against its exact planned cost,
/// so a budget-stopped run never overspends and stops at most one estimate
/// short of the budget.
pub fn run_sgd(
    oracle: &dyn Oracle,
    estimator: &Estimator,
    schedule: &StepSchedule,
    opts: &RunOptions,
    x1: &[f64],
) -> Result<RunRecord> {
    schedule.validate()?;
    let mut state = Loop::new(oracle, opts, x1)?;
    let mut stream = rng::derive(opts.seed, &[0]);
    for t in 1..=opts.iterations {
        let plan = estimator.plan(&mut stream)?;
        if state.refuses(plan.cost()) {
            return Ok(state.finish(StopReason::Budget));
        }
        let v = estimator.execute(&plan, oracle, &state.x, &mut stream)?;
        state.spend(v.cost);
        if state.update(t, schedule.step(t), &v.g)? {
            return Ok(state.finish(StopReason::Target));
        }
    }
    Ok(state.finish(StopReason::Iterations))
}

fn batch_mean(samples: &[GradientSample], d: usize) -> Vec<f64> {
    let mut m = vec![0.0; d];
    for s in samples {
        for (a, b) in m.iter_mut().zip(&s.g) {
            *a += b;
        }
    }
    let n = samples.len() as f64;
    m.iter_mut().for_each(|a| *a /= n);
    m
}

/// Recursive variance-reduced loop. Row `t` with `t mod Q_E = 0` (0-based)
/// resets `m` to a `D1`-batch mean; other rows add the coupled correction
/// `mean_k [v_k(x_t) − v_k(x_{t−1})]` over `D2` plans, each evaluated at both
/// points with one oracle realization. Both evaluations are charged.
pub fn run_vr(
    oracle: &dyn Oracle,
    estimator: &Estimator,
    vr: &VrConfig,
    opts: &RunOptions,
    x1: &[f64],
) -> Result<RunRecord> {
    vr.validate()?;
    let d = oracle.meta().d;
    let mut state = Loop::new(oracle, opts, x1)?;
    let mut stream = rng::derive(opts.seed, &[0]);
    let mut m = vec![0.0; d];
    let mut prev = state.x.clone();
    for t in 0..opts.iterations {
        let reset = t % vr.epoch == 0;
        let n = if reset { vr.d1 } else { vr.d2 };
        let plans = (0..n).map(|_| estimator.plan(&mut stream)).collect::<Result<Vec<_>>>()?;
        let planned: u64 = plans.iter().map(|p| p.cost()).sum::<u64>() * if reset { 1 } else { 2 };
        if state.refuses(planned) {
            return Ok(state.finish(StopReason::Budget));
        }
        if reset {
            let samples =
                plans.iter().map(|p| estimator.execute(p, oracle, &state.x, &mut stream)).collect::<Result<Vec<_>>>()?;
            m = batch_mean(&samples, d);
        } else {
            let mut corr = vec![0.0; d];
            for p in &plans {
                let (old, new) = estimator.execute_coupled(p, oracle, &prev, &state.x, &mut stream)?;
                for ((c, a), b) in corr.iter_mut().zip(&new.g).zip(&old.g) {
                    *c += a - b;
                }
            }
            for (mi, c) in m.iter_mut().zip(&corr) {
                *mi += c / n as f64;
            }
        }
        state.spend(planned);
        prev = state.x.clone();
        if state.update(t + 1, vr.step, &m)? {
            return Ok(state.finish(StopReason::Target));
        }
    }
    Ok(state.finish(StopReason::Iterations))
}

/// Squared gradient norm at `x`: exact when the instance has a closed form,
/// otherwise a debiased Monte-Carlo estimate from pairs of independent
/// top-level `h` draws, `E[⟨h₁, h₂⟩] = ‖∇F^L‖²`. Returns `(value, SE)`.
pub fn grad_norm_probe(
    oracle: &dyn Oracle,
    x: &[f64],
    level: u32,
    replications: usize,
    rng: &mut Stream,
) -> Result<(f64, f64)> {
    if let Some(g) = oracle.gradient(x) {
        return Ok((norm_sq(&g), 0.0));
    }
    let mut m = crate::stats::Moments::default();
    for _ in 0..replications.max(1) {
        let a = oracle.query(level, x, rng)?;
        let b = oracle.query(level, x, rng)?;
        m.push(crate::stats::dot(&a.h, &b.h));
    }
    Ok((m.mean(), m.std_error()))
}

/// Pilot estimate of the estimator variance `V̄` at `x`: the trace of the
/// sample covariance over `replications` independent estimates.
pub fn pilot_variance(
    oracle: &dyn Oracle,
    estimator: &Estimator,
    x: &[f64],
    replications: usize,
    rng: &mut Stream,
) -> Result<f64> {
    let mut mom = VecMoments::new(x.len());
    for _ in 0..replications.max(2) {
        mom.push(&estimator.estimate(oracle, x, rng)?.g);
    }
    Ok(mom.trace_variance())
}
