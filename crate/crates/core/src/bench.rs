//! Experiment harness: rate probes, budgeted cost-to-accuracy sweeps and
//! paired comparisons.
//!
//! Every cell is an independent job with its own derived seed, so results do
//! not depend on the worker count or the order cells finish in. Crossing is
//! detected against instance ground truth, never against the optimizer's
//! own noisy estimates.

use std::fmt::Write as _;
use std::time::Instant;

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::estimators::{Estimator, EstimatorConfig, EstimatorKind};
use crate::io::{csv_field, fmt_opt};
use crate::optimizers::{
    nonconvex_horizon, pilot_variance, run_sgd, run_vr, select_level, RunOptions, RunRecord, StepSchedule, StopRule,
    VrConfig,
};
use crate::oracle::{Convexity, Oracle};
use crate::problems::{QueueInstance, UbsrToy};
use crate::rng;
use crate::stats::{fit_line, median, norm_sq, Line, Moments, VecMoments};

/// Minimum number of levels a rate fit needs.
pub const MIN_FIT_LEVELS: usize = 4;

/// Minimum replications per level for a variance probe.
pub const MIN_VARIANCE_REPS: usize = 10_000;

/// Log-log regression of a per-level statistic on the level.
#[derive(Debug, Clone, PartialEq)]
pub struct RateFit {
    pub levels: Vec<u32>,
    pub values: Vec<f64>,
    pub log2_values: Vec<f64>,
    pub slope: f64,
    pub intercept: f64,
    pub residual: f64,
    /// Every value was zero (a noiseless or exact instance); slope is 0.
    pub degenerate: bool,
}

impl RateFit {
    /// Fit `log2(value)` against the level over the positive finite values.
    pub fn fit(levels: &[u32], values: &[f64]) -> Result<Self> {
        if levels.len() != values.len() {
            return Err(Error::InvalidInput("levels and values differ in length".into()));
        }
        if !values.is_empty() && values.iter().all(|v| *v == 0.0) {
            return Ok(Self {
                levels: levels.to_vec(),
                values: values.to_vec(),
                log2_values: vec![f64::NEG_INFINITY; values.len()],
                slope: 0.0,
                intercept: 0.0,
                residual: 0.0,
                degenerate: true,
            });
        }
        let (xs, ys): (Vec<f64>, Vec<f64>) = levels
            .iter()
            .zip(values)
            .filter(|(_, v)| v.is_finite() && **v > 0.0)
            .map(|(l, v)| (*l as f64, v.log2()))
            .unzip();
        if xs.len() < MIN_FIT_LEVELS {
            return Err(Error::InsufficientData(format!(
                "{} usable levels, need at least {MIN_FIT_LEVELS}",
                xs.len()
            )));
        }
        let line = fit_line(&xs, &ys).ok_or_else(|| Error::InsufficientData("levels are not distinct".into()))?;
        Ok(Self {
            levels: levels.to_vec(),
            values: values.to_vec(),
            log2_values: values.iter().map(|v| v.log2()).collect(),
            slope: line.slope,
            intercept: line.intercept,
            residual: line.residual,
            degenerate: false,
        })
    }

    pub fn in_band(&self, low: f64, high: f64) -> bool {
        !self.degenerate && (low..=high).contains(&self.slope)
    }

    /// Rows `level,statistic,log2_value`.
    pub fn to_csv(&self, statistic: &str) -> String {
        let mut out = String::from("level,statistic,log2_value\n");
        for (l, v) in self.levels.iter().zip(&self.log2_values) {
            let _ = writeln!(out, "{l},{},{v}", csv_field(statistic));
        }
        out
    }
}

/// Regress `log2 ‖∇F^l(x) − ∇F(x)‖²` on `l`.
pub fn probe_bias(oracle: &dyn Oracle, x: &[f64], levels: &[u32]) -> Result<RateFit> {
    let g = oracle
        .gradient(x)
        .ok_or_else(|| Error::Unsupported(format!("{} has no closed-form gradient", oracle.name())))?;
    let values = levels
        .iter()
        .map(|&l| {
            oracle
                .level_gradient(l, x)
                .map(|gl| gl.iter().zip(&g).map(|(a, b)| (a - b) * (a - b)).sum::<f64>())
                .ok_or_else(|| Error::Unsupported(format!("{} has no closed-form level gradient", oracle.name())))
        })
        .collect::<Result<Vec<_>>>()?;
    RateFit::fit(levels, &values)
}

#[derive(Debug, Clone, PartialEq)]
pub struct VarianceProbe {
    /// Fit of `log2 tr Var(H^l)`.
    pub fit: RateFit,
    /// `tr Var(h^l)` per level.
    pub h_variance: Vec<f64>,
    /// Declared uniform bound on the variance of `h`.
    pub sigma_sq: f64,
}

impl VarianceProbe {
    /// Whether every measured `tr Var(h^l)` sits below the declared `σ²`.
    pub fn h_within_sigma(&self) -> bool {
        self.h_variance.iter().all(|v| *v <= self.sigma_sq)
    }
}

/// Regress `log2 tr Var(H^l)` on `l` from `replications` queries per level.
/// Levels run in parallel on streams derived from `(seed, level)`.
pub fn probe_variance(
    oracle: &dyn Oracle,
    x: &[f64],
    levels: &[u32],
    replications: usize,
    seed: u64,
) -> Result<VarianceProbe> {
    if replications < MIN_VARIANCE_REPS {
        return Err(Error::InvalidInput(format!(
            "variance probes need at least {MIN_VARIANCE_REPS} replications per level, got {replications}"
        )));
    }
    let d = x.len();
    let per_level = levels
        .par_iter()
        .map(|&l| {
            let mut stream = rng::derive(seed, &[l as u64]);
            let mut diff = VecMoments::new(d);
            let mut h = VecMoments::new(d);
            for _ in 0..replications {
                let out = oracle.query(l, x, &mut stream)?;
                diff.push(&out.diff);
                h.push(&out.h);
            }
            Ok((diff.trace_variance(), h.trace_variance()))
        })
        .collect::<Result<Vec<_>>>()?;
    let (var_diff, var_h): (Vec<f64>, Vec<f64>) = per_level.into_iter().unzip();
    Ok(VarianceProbe { fit: RateFit::fit(levels, &var_diff)?, h_variance: var_h, sigma_sq: oracle.meta().sigma_sq })
}

/// Per-level Monte-Carlo bias of the `2^l`-sample shortfall estimate.
#[derive(Debug, Clone, PartialEq)]
pub struct ShortfallBias {
    pub fit: RateFit,
    /// Signed bias `E t_l − SR` per level.
    pub bias: Vec<f64>,
    pub std_error: Vec<f64>,
}

/// Regress `log2 |E t_l − SR(θ)|` on `l` against the closed form.
pub fn probe_sr_bias(
    toy: &UbsrToy,
    theta: &[f64],
    levels: &[u32],
    replications: usize,
    seed: u64,
) -> Result<ShortfallBias> {
    let truth = toy.sr(theta);
    let rows = levels
        .par_iter()
        .map(|&l| {
            let mut stream = rng::derive(seed, &[l as u64]);
            let mut m = Moments::default();
            for _ in 0..replications {
                m.push(toy.sample_sr(theta, 1 << l, &mut stream)? - truth);
            }
            Ok((m.mean(), m.std_error()))
        })
        .collect::<Result<Vec<_>>>()?;
    let (bias, std_error): (Vec<f64>, Vec<f64>) = rows.into_iter().unzip();
    let abs: Vec<f64> = bias.iter().map(|b| b.abs()).collect();
    Ok(ShortfallBias { fit: RateFit::fit(levels, &abs)?, bias, std_error })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CostProbe {
    pub expected: f64,
    pub empirical: f64,
    pub draws: usize,
}

impl CostProbe {
    pub fn relative_error(&self) -> f64 {
        (self.empirical - self.expected).abs() / self.expected
    }
}

/// Mean planned cost of `draws` estimates against the analytic expectation.
/// Plans fix the exact cost an execution charges, so no oracle work is done.
pub fn probe_cost(estimator: &Estimator, draws: usize, seed: u64) -> Result<CostProbe> {
    let mut stream = rng::stream(seed);
    let mut total = 0.0;
    for _ in 0..draws.max(1) {
        total += estimator.plan(&mut stream)?.cost() as f64;
    }
    Ok(CostProbe { expected: estimator.expected_cost(), empirical: total / draws.max(1) as f64, draws: draws.max(1) })
}

/// Exhaustive grid minimum of the closed-form queue objective.
pub fn grid_search(queue: &QueueInstance, resolution: f64) -> Result<(f64, f64, f64)> {
    let (x, f) = queue.grid_search(resolution)?;
    Ok((x[0], x[1], f))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Framework {
    Sgd,
    Vr,
}

/// Step rule for the strongly convex SGD cells.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ScheduleChoice {
    /// `1/(μ(t + S_F²/μ²))`.
    Table,
    /// `2/(μ(t + 2S_F/μ − 1))`.
    Shifted,
    Constant(f64),
}

/// One estimator/framework combination in a sweep.
#[derive(Debug, Clone, PartialEq)]
pub struct MethodSpec {
    pub kind: EstimatorKind,
    pub framework: Framework,
    /// Fixed truncation level; `None` uses the accuracy-driven rule.
    pub level: Option<u32>,
    pub force: bool,
    pub schedule: ScheduleChoice,
    /// Overrides the variance-reduced step `1/(3 S_F)`.
    pub vr_step: Option<f64>,
    /// Overrides the variance-reduced batch sizes and epoch `(D1, D2, Q_E)`.
    pub vr_sizes: Option<(usize, usize, usize)>,
}

impl MethodSpec {
    pub fn new(kind: EstimatorKind) -> Self {
        Self {
            kind,
            framework: Framework::Sgd,
            level: None,
            force: false,
            schedule: ScheduleChoice::Table,
            vr_step: None,
            vr_sizes: None,
        }
    }

    pub fn vr(mut self) -> Self {
        self.framework = Framework::Vr;
        self
    }

    pub fn at_level(mut self, level: u32) -> Self {
        self.level = Some(level);
        self
    }

    pub fn forced(mut self, force: bool) -> Self {
        self.force = force;
        self
    }

    pub fn with_schedule(mut self, schedule: ScheduleChoice) -> Self {
        self.schedule = schedule;
        self
    }

    pub fn with_vr_step(mut self, step: f64) -> Self {
        self.vr_step = Some(step);
        self
    }

    pub fn with_vr_sizes(mut self, d1: usize, d2: usize, epoch: usize) -> Self {
        self.vr_sizes = Some((d1, d2, epoch));
        self
    }

    /// Display label such as `vr-rt-mlmc` or `l-sgd(L=12)`.
    pub fn label(&self) -> String {
        let mut s = String::new();
        if self.framework == Framework::Vr {
            s.push_str("vr-");
        }
        s.push_str(self.kind.as_str());
        if let Some(l) = self.level {
            let _ = write!(s, "(L={l})");
        }
        s
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Method {
    Sgd(StepSchedule),
    Vr(VrConfig),
}

/// A fully configured run for one `(method, ε)` cell.
#[derive(Debug, Clone)]
pub struct CellSetup {
    pub estimator: Estimator,
    pub method: Method,
    pub iterations: usize,
    pub x1: Vec<f64>,
    pub stop: StopRule,
}

impl CellSetup {
    pub fn run(&self, oracle: &dyn Oracle, seed: u64, budget: Option<u64>) -> Result<RunRecord> {
        let mut opts = RunOptions::new(self.iterations, seed).with_stop(self.stop);
        if let Some(b) = budget {
            opts = opts.with_budget(b);
        }
        match &self.method {
            Method::Sgd(s) => run_sgd(oracle, &self.estimator, s, &opts, &self.x1),
            Method::Vr(v) => run_vr(oracle, &self.estimator, v, &opts, &self.x1),
        }
    }

    pub fn with_stop(mut self, stop: StopRule) -> Self {
        self.stop = stop;
        self
    }
}

/// Reference optimum value from the instance's ground truth.
pub fn reference_value(oracle: &dyn Oracle) -> Result<f64> {
    oracle
        .minimizer()
        .and_then(|x| oracle.objective(&x))
        .ok_or_else(|| Error::Unsupported(format!("{} has no ground-truth optimum", oracle.name())))
}

/// Hyper-parameters for one cell, following the per-estimator rules:
///
/// * level `L = ⌈log2(4M_a/ε)/a⌉` (`ε²` for nonconvex), raised to the floor;
/// * strongly convex SGD: decaying step, RU/RR use `1/(μ(t + 2S_F/μ²))`;
/// * V-MLMC: step `1/S_F`, batch factor `N = 2M_b R/(με)` with `R = L+1`
///   when `b = c`, `1` when `b > c`, `2^{(c−b)(L+1)/2}` when `b < c`, and
///   `T = ⌈2 log(4ΔF/ε)/log(S_F/(S_F − μ))⌉`;
/// * nonconvex SGD: `γ = 1/√(V̄T)` with `V̄` from a pilot probe at the start;
/// * variance reduced: `γ = 1/(3S_F)`, `D1 = ⌈2V̄/ε²⌉`, `D2 = Q_E = ⌈1/ε⌉`.
///
/// Stationarity targets are `‖∇F‖² ≤ ε²`.
pub fn configure(
    oracle: &dyn Oracle,
    spec: &MethodSpec,
    eps: f64,
    max_iterations: usize,
    pilot_seed: u64,
) -> Result<CellSetup> {
    let meta = oracle.meta();
    let class = oracle.convexity();
    let consts = oracle.constants();
    let x1 = oracle.default_start();
    let level = match spec.level {
        Some(l) => l,
        None => select_level(meta, eps, class)?.max(oracle.min_level()),
    };
    let mut cfg = EstimatorConfig::new(spec.kind, level).forced(spec.force);
    let reference = reference_value(oracle);
    let delta_f = match (&reference, oracle.objective(&x1)) {
        (Ok(r), Some(f)) => (f - r).max(eps),
        _ => 1.0,
    };
    let stop = match class {
        Convexity::Nonconvex => StopRule::GradSq { target: eps * eps },
        _ => StopRule::Gap { target: eps, reference: reference? },
    };
    let mu = consts.mu;
    let smooth = consts.smoothness;
    if spec.kind == EstimatorKind::VMlmc {
        let mu = mu.unwrap_or(smooth);
        let spread = if meta.b > meta.c {
            1.0
        } else if meta.b == meta.c {
            (level - oracle.min_level().min(level) + 1) as f64
        } else {
            ((meta.c - meta.b) * (level + 1) as f64 / 2.0).exp2()
        };
        cfg = cfg.with_multiplier((2.0 * meta.m_b * spread / (mu * eps)).ceil());
    }
    let estimator = Estimator::new(cfg, oracle)?;
    let (method, iterations) = match (spec.framework, class) {
        (Framework::Vr, _) => {
            let v_bar = pilot(oracle, &estimator, &x1, pilot_seed)?;
            let (d1, d2, epoch) = spec.vr_sizes.unwrap_or_else(|| {
                let inv = (1.0 / eps).ceil() as usize;
                ((2.0 * v_bar / (eps * eps)).ceil().max(1.0) as usize, inv.max(1), inv.max(1))
            });
            let step = spec.vr_step.unwrap_or(1.0 / (3.0 * smooth));
            (Method::Vr(VrConfig { d1: d1.max(d2), d2, epoch, step }), max_iterations)
        }
        (Framework::Sgd, Convexity::Nonconvex) => {
            let v_bar = pilot(oracle, &estimator, &x1, pilot_seed)?;
            let horizon = nonconvex_horizon(eps, delta_f, smooth, v_bar).min(max_iterations);
            (Method::Sgd(StepSchedule::InverseSqrt { v_bar, horizon }), horizon)
        }
        (Framework::Sgd, _) if spec.kind == EstimatorKind::VMlmc => {
            let mu = mu.unwrap_or(smooth);
            let t = if smooth > mu {
                (2.0 * (4.0 * delta_f / eps).ln() / (smooth / (smooth - mu)).ln()).ceil().max(1.0) as usize
            } else {
                1
            };
            (Method::Sgd(StepSchedule::Constant(1.0 / smooth)), t.min(max_iterations))
        }
        (Framework::Sgd, _) => {
            let mu = mu.ok_or_else(|| {
                Error::Unsupported(format!("{} has no strong convexity modulus for the decaying step", oracle.name()))
            })?;
            let schedule = if spec.kind.is_unbiased() {
                StepSchedule::unbiased_decay(mu, smooth)
            } else {
                match spec.schedule {
                    ScheduleChoice::Table => StepSchedule::strongly_convex(mu, smooth),
                    ScheduleChoice::Shifted => StepSchedule::strongly_convex_shifted(mu, smooth),
                    ScheduleChoice::Constant(g) => StepSchedule::Constant(g),
                }
            };
            (Method::Sgd(schedule), max_iterations)
        }
    };
    Ok(CellSetup { estimator, method, iterations, x1, stop })
}

fn pilot(oracle: &dyn Oracle, estimator: &Estimator, x: &[f64], seed: u64) -> Result<f64> {
    let v = pilot_variance(oracle, estimator, x, 200, &mut rng::stream(seed))?;
    Ok(v.max(f64::MIN_POSITIVE))
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepSpec {
    pub instance: String,
    pub methods: Vec<MethodSpec>,
    /// Strictly decreasing accuracy targets.
    pub eps_grid: Vec<f64>,
    pub seeds: usize,
    pub root_seed: u64,
    pub budget: u64,
    pub max_iterations: usize,
    pub jobs: usize,
}

impl SweepSpec {
    pub fn validate(&self) -> Result<()> {
        if self.methods.is_empty() {
            return Err(Error::InvalidInput("sweep needs at least one estimator".into()));
        }
        if self.eps_grid.is_empty() || self.eps_grid.iter().any(|e| !(*e > 0.0 && e.is_finite())) {
            return Err(Error::InvalidInput("accuracy grid must be non-empty and positive".into()));
        }
        if self.eps_grid.windows(2).any(|w| w[1] >= w[0]) {
            return Err(Error::InvalidInput("accuracy grid must be strictly decreasing".into()));
        }
        if self.seeds < 5 {
            return Err(Error::InvalidInput(format!("need at least 5 seeds per cell, got {}", self.seeds)));
        }
        if self.budget == 0 || self.max_iterations == 0 {
            return Err(Error::InvalidInput("budget and iteration cap must be positive".into()));
        }
        Ok(())
    }

    /// Seed shared by every method at grid point `eps_index`, replicate `rep`,
    /// so methods are compared on paired streams.
    pub fn cell_seed(&self, eps_index: usize, rep: usize) -> u64 {
        rng::derive_seed(self.root_seed, &[eps_index as u64, rep as u64])
    }

    fn pilot_seed(&self, eps_index: usize) -> u64 {
        rng::derive_seed(self.root_seed, &[u64::MAX, eps_index as u64])
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum CellStatus {
    Crossed,
    /// Never crossed within the budget; cost recorded as the budget.
    Censored,
    Diverged(String),
    Inapplicable(String),
    Failed(String),
}

#[derive(Debug, Clone, PartialEq)]
pub struct CellRecord {
    pub instance: String,
    pub estimator: String,
    pub epsilon: f64,
    pub seed: u64,
    /// `None` when the cell never ran.
    pub cost_at_crossing: Option<u64>,
    pub censored: bool,
    /// Gap `F(x̂) − F*` (or `‖∇F(x̂)‖²` for nonconvex) at the output.
    pub final_gap: Option<f64>,
    pub iterations: usize,
    pub wall_ms: u128,
    pub status: CellStatus,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MethodSlope {
    pub estimator: String,
    /// `(ε, median cost, censored)` per grid point.
    pub points: Vec<(f64, Option<f64>, bool)>,
    /// Fit of `log2 cost` on `log2 ε` over uncensored points.
    pub fit: Option<Line>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepResult {
    pub cells: Vec<CellRecord>,
    pub slopes: Vec<MethodSlope>,
}

impl SweepResult {
    pub fn slope_of(&self, label: &str) -> Option<&MethodSlope> {
        self.slopes.iter().find(|s| s.estimator == label)
    }

    /// Rows `instance,estimator,epsilon,seed,cost_at_crossing,censored,final_gap,wall_ms`.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("instance,estimator,epsilon,seed,cost_at_crossing,censored,final_gap,wall_ms\n");
        for c in &self.cells {
            let _ = writeln!(
                out,
                "{},{},{},{},{},{},{},{}",
                csv_field(&c.instance),
                csv_field(&c.estimator),
                c.epsilon,
                c.seed,
                c.cost_at_crossing.map(|v| v.to_string()).unwrap_or_default(),
                c.censored,
                fmt_opt(c.final_gap),
                c.wall_ms
            );
        }
        out
    }
}

fn final_gap(oracle: &dyn Oracle, rec: &RunRecord, stop: &StopRule) -> Option<f64> {
    match stop {
        StopRule::Gap { reference, .. } => oracle.objective(&rec.output).map(|f| f - reference),
        StopRule::GradSq { .. } => oracle.gradient(&rec.output).map(|g| norm_sq(&g)),
    }
}

fn run_cell(
    oracle: &dyn Oracle,
    spec: &SweepSpec,
    setup: &std::result::Result<CellSetup, Error>,
    method: &MethodSpec,
    eps: f64,
    seed: u64,
) -> CellRecord {
    let start = Instant::now();
    let mut rec = CellRecord {
        instance: spec.instance.clone(),
        estimator: method.label(),
        epsilon: eps,
        seed,
        cost_at_crossing: None,
        censored: true,
        final_gap: None,
        iterations: 0,
        wall_ms: 0,
        status: CellStatus::Censored,
    };
    match setup {
        Err(Error::Inapplicable { reason, .. }) => rec.status = CellStatus::Inapplicable(reason.clone()),
        Err(e) => rec.status = CellStatus::Failed(e.to_string()),
        Ok(setup) => match setup.run(oracle, seed, Some(spec.budget)) {
            Ok(run) => {
                rec.final_gap = final_gap(oracle, &run, &setup.stop);
                rec.iterations = run.iterations;
                match run.crossing(&setup.stop) {
                    Some((_, cost)) => {
                        rec.cost_at_crossing = Some(cost);
                        rec.censored = false;
                        rec.status = CellStatus::Crossed;
                    }
                    None => rec.cost_at_crossing = Some(spec.budget),
                }
            }
            Err(Error::Divergence { iteration, .. }) => {
                rec.cost_at_crossing = Some(spec.budget);
                rec.iterations = iteration;
                rec.status = CellStatus::Diverged(format!("diverged at iteration {iteration}"));
            }
            Err(e) => rec.status = CellStatus::Failed(e.to_string()),
        },
    }
    rec.wall_ms = start.elapsed().as_millis();
    rec
}

/// Median cost per grid point and the log-log fit per method. A point is
/// censored when fewer than half of its seeds crossed; censored points are
/// left out of the fit.
pub fn fit_slopes(spec: &SweepSpec, cells: &[CellRecord]) -> Vec<MethodSlope> {
    spec.methods
        .iter()
        .map(|m| {
            let label = m.label();
            let points: Vec<(f64, Option<f64>, bool)> = spec
                .eps_grid
                .iter()
                .map(|&eps| {
                    let row: Vec<&CellRecord> =
                        cells.iter().filter(|c| c.estimator == label && c.epsilon == eps).collect();
                    let costs: Vec<f64> = row.iter().filter_map(|c| c.cost_at_crossing.map(|v| v as f64)).collect();
                    let crossed = row.iter().filter(|c| !c.censored).count();
                    (eps, median(&costs), 2 * crossed <= row.len())
                })
                .collect();
            let (xs, ys): (Vec<f64>, Vec<f64>) = points
                .iter()
                .filter(|(_, c, censored)| !censored && c.is_some_and(|v| v > 0.0))
                .map(|(e, c, _)| (e.log2(), c.unwrap().log2()))
                .unzip();
            let fit = if xs.len() >= 2 { fit_line(&xs, &ys) } else { None };
            MethodSlope { estimator: label, points, fit }
        })
        .collect()
}

/// Run every `(method, ε, seed)` cell on a pool of `spec.jobs` workers.
pub fn run_sweep(spec: &SweepSpec, oracle: &dyn Oracle) -> Result<SweepResult> {
    spec.validate()?;
    let setups: Vec<Vec<std::result::Result<CellSetup, Error>>> = spec
        .methods
        .iter()
        .map(|m| {
            spec.eps_grid
                .iter()
                .enumerate()
                .map(|(ei, &eps)| configure(oracle, m, eps, spec.max_iterations, spec.pilot_seed(ei)))
                .collect()
        })
        .collect();
    let mut jobs = Vec::new();
    for (mi, m) in spec.methods.iter().enumerate() {
        for (ei, &eps) in spec.eps_grid.iter().enumerate() {
            for rep in 0..spec.seeds {
                jobs.push((mi, m, ei, eps, spec.cell_seed(ei, rep)));
            }
        }
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(spec.jobs.max(1))
        .build()
        .map_err(|e| Error::InvalidInput(format!("cannot start worker pool: {e}")))?;
    let cells: Vec<CellRecord> = pool.install(|| {
        jobs.par_iter().map(|&(mi, m, ei, eps, seed)| run_cell(oracle, spec, &setups[mi][ei], m, eps, seed)).collect()
    });
    let slopes = fit_slopes(spec, &cells);
    Ok(SweepResult { cells, slopes })
}

#[derive(Debug, Clone, PartialEq)]
pub struct PairedSummary {
    /// `(cost_a, censored_a, cost_b, censored_b)` per seed.
    pub pairs: Vec<(u64, bool, u64, bool)>,
    /// Per-seed `cost_b / cost_a`.
    pub ratios: Vec<f64>,
    pub median_ratio: f64,
    /// Fraction of seeds where `a` crossed strictly cheaper than `b`.
    pub win_rate: f64,
    pub wins: usize,
}

/// Run both setups on the same seeds with a common stop rule and compare the
/// cost at crossing. Runs that never cross are charged the full budget.
pub fn paired_compare(
    oracle: &dyn Oracle,
    a: &CellSetup,
    b: &CellSetup,
    stop: StopRule,
    seeds: &[u64],
    budget: u64,
) -> Result<PairedSummary> {
    if seeds.is_empty() {
        return Err(Error::InvalidInput("paired comparison needs at least one seed".into()));
    }
    let a = a.clone().with_stop(stop);
    let b = b.clone().with_stop(stop);
    let cost = |s: &CellSetup, seed: u64| -> Result<(u64, bool)> {
        match s.run(oracle, seed, Some(budget)) {
            Ok(r) => Ok(r.crossing(&stop).map(|(_, c)| (c, false)).unwrap_or((budget, true))),
            Err(Error::Divergence { .. }) => Ok((budget, true)),
            Err(e) => Err(e),
        }
    };
    let pairs = seeds
        .par_iter()
        .map(|&seed| {
            let (ca, xa) = cost(&a, seed)?;
            let (cb, xb) = cost(&b, seed)?;
            Ok((ca, xa, cb, xb))
        })
        .collect::<Result<Vec<_>>>()?;
    let ratios: Vec<f64> = pairs.iter().map(|(ca, _, cb, _)| *cb as f64 / (*ca).max(1) as f64).collect();
    let wins = pairs.iter().filter(|(ca, xa, cb, _)| !xa && ca < cb).count();
    Ok(PairedSummary {
        median_ratio: median(&ratios).expect("non-empty"),
        win_rate: wins as f64 / pairs.len() as f64,
        wins,
        ratios,
        pairs,
    })
}

/// One row of `summary.csv`.
#[derive(Debug, Clone, PartialEq)]
pub struct SummaryRow {
    pub name: String,
    pub statistic: String,
    pub value: Option<f64>,
    pub low: f64,
    pub high: f64,
}

impl SummaryRow {
    pub fn new(name: impl Into<String>, statistic: impl Into<String>, value: Option<f64>, low: f64, high: f64) -> Self {
        Self { name: name.into(), statistic: statistic.into(), value, low, high }
    }

    pub fn pass(&self) -> bool {
        self.value.is_some_and(|v| v >= self.low && v <= self.high)
    }
}

/// Rows `name,statistic,value,low,high,pass`.
pub fn summary_csv(rows: &[SummaryRow]) -> String {
    let mut out = String::from("name,statistic,value,low,high,pass\n");
    for r in rows {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{}",
            csv_field(&r.name),
            csv_field(&r.statistic),
            fmt_opt(r.value),
            r.low,
            r.high,
            r.pass()
        );
    }
    out
}
