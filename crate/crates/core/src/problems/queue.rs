//! Joint pricing and staffing of a single-server queue.
//!
//! Decision `x = (μ, p)`: service capacity and price. Customers arrive at rate
//! `λ(p) = χ e^{a−p}/(1 + e^{a−p})` with exponential interarrivals; service
//! times are `V/μ` with `E V = 1`. The objective
//!
//! ```text
//! F(μ, p) = h_0 E[Q_∞(μ, p)] + c_0 μ² − p λ(p)
//! ```
//!
//! is closed form through the Pollaczek–Khinchine mean. The oracle simulates
//! one Lindley trajectory of `2^l` customers and plugs the trailing-window mean
//! of `W + X` into the steady-state gradient formula. Gradients are returned in
//! `(μ, p)` order.
//!
//! Levels start at `⌈log2 m⌉`; there the window only covers the full
//! trajectory and `diff = h`.

use std::sync::OnceLock;

use rand::Rng;
use rand_distr::Exp1;

use crate::error::{Error, Result};
use crate::oracle::{Constants, Convexity, Oracle, OracleMeta, OracleOutput, DEFAULT_LEVEL_CAP};
use crate::rng::Stream;

/// Normalized (mean one) service-time law.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ServiceLaw {
    Exponential,
    /// Erlang with `shape` phases, variance `1/shape`.
    Erlang { shape: u32 },
    /// Equal-weight mixture of `k` exponentials with rates `i²·base`, rescaled
    /// to mean one.
    HyperExponential { k: u32, base: f64 },
}

impl ServiceLaw {
    pub const ERLANG_F2: ServiceLaw = ServiceLaw::Erlang { shape: 10 };
    pub const HYPER_F2: ServiceLaw = ServiceLaw::HyperExponential { k: 10, base: 0.155 };

    pub fn parse(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "exponential" | "exp" => Ok(Self::Exponential),
            "erlang" => Ok(Self::ERLANG_F2),
            "hyperexponential" | "hyperexp" | "hyper" => Ok(Self::HYPER_F2),
            other => Err(Error::InvalidInput(format!(
                "unknown service law '{other}', expected exponential, erlang or hyperexponential"
            ))),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Self::Exponential => "exponential",
            Self::Erlang { .. } => "erlang",
            Self::HyperExponential { .. } => "hyperexponential",
        }
    }

    /// Component rates after rescaling (hyperexponential only).
    fn hyper_rates(k: u32, base: f64) -> Vec<f64> {
        let raw: Vec<f64> = (1..=k).map(|i| (i * i) as f64 * base).collect();
        let mean = raw.iter().map(|r| 1.0 / r).sum::<f64>() / k as f64;
        raw.iter().map(|r| r * mean).collect()
    }

    pub fn variance(&self) -> f64 {
        match *self {
            Self::Exponential => 1.0,
            Self::Erlang { shape } => 1.0 / shape as f64,
            Self::HyperExponential { k, base } => {
                let rates = Self::hyper_rates(k, base);
                rates.iter().map(|r| 2.0 / (r * r)).sum::<f64>() / k as f64 - 1.0
            }
        }
    }

    fn validate(&self) -> Result<()> {
        match *self {
            Self::Erlang { shape: 0 } | Self::HyperExponential { k: 0, .. } => {
                Err(Error::InvalidInput("service law needs at least one phase".into()))
            }
            Self::HyperExponential { base, .. } if !(base > 0.0 && base.is_finite()) => {
                Err(Error::InvalidInput("hyperexponential base rate must be positive".into()))
            }
            _ => Ok(()),
        }
    }
}

/// Service sampler with precomputed rates. Draw count per call is fixed.
#[derive(Debug, Clone)]
enum Sampler {
    Exponential,
    Erlang(u32),
    Hyper(Vec<f64>),
}

impl Sampler {
    fn new(law: ServiceLaw) -> Self {
        match law {
            ServiceLaw::Exponential => Self::Exponential,
            ServiceLaw::Erlang { shape } => Self::Erlang(shape),
            ServiceLaw::HyperExponential { k, base } => Self::Hyper(ServiceLaw::hyper_rates(k, base)),
        }
    }

    fn draw(&self, rng: &mut Stream) -> f64 {
        match self {
            Self::Exponential => rng.sample(Exp1),
            Self::Erlang(k) => (0..*k).map(|_| rng.sample::<f64, _>(Exp1)).sum::<f64>() / *k as f64,
            Self::Hyper(rates) => {
                let i = rng.random_range(0..rates.len());
                rng.sample::<f64, _>(Exp1) / rates[i]
            }
        }
    }
}

/// Lindley recursion state: waiting time, elapsed busy time, step count.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct QueueState {
    pub w: f64,
    pub x: f64,
    pub n: u64,
}

impl QueueState {
    /// One customer: `W' = (W + v/μ − u/λ)^+`, `X' = 1{W' > 0}(X + u/λ)`.
    pub fn step(self, mu: f64, lambda: f64, u: f64, v: f64) -> Self {
        let w = (self.w + v / mu - u / lambda).max(0.0);
        let x = if w > 0.0 { self.x + u / lambda } else { 0.0 };
        Self { w, x, n: self.n + 1 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct QueueParams {
    pub h0: f64,
    pub chi: f64,
    /// Demand location `a` in `λ(p)`.
    pub shift: f64,
    pub c0: f64,
    pub service: ServiceLaw,
    pub window: usize,
    pub mu_range: (f64, f64),
    pub p_range: (f64, f64),
    pub start: Vec<f64>,
}

impl Default for QueueParams {
    fn default() -> Self {
        Self {
            h0: 1.0,
            chi: 10.0,
            shift: 0.1,
            c0: 0.1,
            service: ServiceLaw::Exponential,
            window: 64,
            mu_range: (2.0, 10.0),
            p_range: (2.0, 10.0),
            start: vec![9.0, 9.0],
        }
    }
}

#[derive(Debug)]
pub struct QueueInstance {
    p: QueueParams,
    sampler: Sampler,
    service_var: f64,
    meta: OracleMeta,
    smoothness: f64,
    optimum: OnceLock<(Vec<f64>, f64)>,
}

impl Clone for QueueInstance {
    fn clone(&self) -> Self {
        Self::new(self.p.clone()).expect("validated parameters")
    }
}

impl QueueInstance {
    pub fn exponential() -> Self {
        Self::new(QueueParams::default()).expect("default queue parameters are valid")
    }

    pub fn with_service(service: ServiceLaw) -> Result<Self> {
        Self::new(QueueParams { service, ..QueueParams::default() })
    }

    pub fn new(p: QueueParams) -> Result<Self> {
        p.service.validate()?;
        let positive = [("h0", p.h0), ("chi", p.chi)];
        for (name, v) in positive {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::InvalidInput(format!("{name} must be positive, got {v}")));
            }
        }
        if !(p.c0 >= 0.0) || p.window == 0 {
            return Err(Error::InvalidInput("c0 must be nonnegative and the window positive".into()));
        }
        let ((mu_lo, mu_hi), (p_lo, p_hi)) = (p.mu_range, p.p_range);
        if !(0.0 < mu_lo && mu_lo < mu_hi && p_lo < p_hi) {
            return Err(Error::InvalidInput("domain box is empty".into()));
        }
        if p.start.len() != 2 {
            return Err(Error::InvalidInput("start must be (mu, p)".into()));
        }
        let inst = Self {
            sampler: Sampler::new(p.service),
            service_var: p.service.variance(),
            meta: OracleMeta {
                a: 1.0,
                b: 1.0,
                c: 1.0,
                m_a: 1.0,
                m_b: 1.0,
                m_c: 1.0,
                sigma_sq: 1.0,
                d: 2,
                level_cap: DEFAULT_LEVEL_CAP,
            },
            smoothness: 0.0,
            optimum: OnceLock::new(),
            p,
        };
        if inst.demand(inst.p.p_range.0) >= inst.p.mu_range.0 {
            return Err(Error::Unstable(format!(
                "lambda(p_min) = {} is not below mu_min = {}",
                inst.demand(inst.p.p_range.0),
                inst.p.mu_range.0
            )));
        }
        let mut inst = inst;
        inst.meta = inst.declared_meta();
        inst.smoothness = inst.box_smoothness();
        Ok(inst)
    }

    pub fn params(&self) -> &QueueParams {
        &self.p
    }

    pub fn service_variance(&self) -> f64 {
        self.service_var
    }

    pub fn demand(&self, p: f64) -> f64 {
        self.p.chi / (1.0 + (p - self.p.shift).exp())
    }

    pub fn demand_slope(&self, p: f64) -> f64 {
        let s = 1.0 / (1.0 + (p - self.p.shift).exp());
        -self.p.chi * s * (1.0 - s)
    }

    /// Pollaczek–Khinchine mean number in system at load `ρ`.
    pub fn mean_queue(&self, rho: f64) -> f64 {
        rho + rho * rho * (1.0 + self.service_var) / (2.0 * (1.0 - rho))
    }

    fn mean_queue_slope(&self, rho: f64) -> f64 {
        let k = (1.0 + self.service_var) / 2.0;
        1.0 + k * rho * (2.0 - rho) / ((1.0 - rho) * (1.0 - rho))
    }

    /// Closed-form objective; errors when the system is unstable.
    pub fn truth(&self, mu: f64, p: f64) -> Result<f64> {
        let lam = self.demand(p);
        let rho = lam / mu;
        if !(rho < 1.0) || mu <= 0.0 {
            return Err(Error::Unstable(format!("load lambda/mu = {rho} is not below one")));
        }
        Ok(self.p.h0 * self.mean_queue(rho) + self.p.c0 * mu * mu - p * lam)
    }

    /// Closed-form gradient in `(μ, p)` order.
    pub fn truth_gradient(&self, mu: f64, p: f64) -> Result<[f64; 2]> {
        let lam = self.demand(p);
        let rho = lam / mu;
        if !(rho < 1.0) || mu <= 0.0 {
            return Err(Error::Unstable(format!("load lambda/mu = {rho} is not below one")));
        }
        let q = self.p.h0 * self.mean_queue_slope(rho);
        let dlam = self.demand_slope(p);
        Ok([q * -lam / (mu * mu) + 2.0 * self.p.c0 * mu, q * dlam / mu - lam - p * dlam])
    }

    /// Exhaustive minimum of the closed form over the domain box grid.
    /// Unstable cells are skipped.
    pub fn grid_search(&self, resolution: f64) -> Result<(Vec<f64>, f64)> {
        if !(resolution > 0.0 && resolution.is_finite()) {
            return Err(Error::InvalidInput(format!("resolution must be positive, got {resolution}")));
        }
        let ((mu_lo, mu_hi), (p_lo, p_hi)) = (self.p.mu_range, self.p.p_range);
        let steps = |lo: f64, hi: f64| ((hi - lo) / resolution + 1e-9).floor() as usize;
        let (nm, np) = (steps(mu_lo, mu_hi), steps(p_lo, p_hi));
        let mut best = (vec![f64::NAN, f64::NAN], f64::INFINITY);
        for i in 0..=nm {
            let mu = mu_lo + i as f64 * resolution;
            for j in 0..=np {
                let p = p_lo + j as f64 * resolution;
                if let Ok(v) = self.truth(mu, p) {
                    if v < best.1 {
                        best = (vec![mu, p], v);
                    }
                }
            }
        }
        if !best.1.is_finite() {
            return Err(Error::Unstable("no stable grid cell".into()));
        }
        Ok(best)
    }

    /// Grid-search optimum at resolution 0.01, computed once.
    pub fn reference_optimum(&self) -> (Vec<f64>, f64) {
        self.optimum.get_or_init(|| self.grid_search(0.01).expect("stable box has a stable cell")).clone()
    }

    /// Simulate `n` customers and return the trailing `window` means of
    /// `W + X` ending at `n` and at `n/2` (the latter only when it fits).
    pub fn simulate_windows(&self, mu: f64, p: f64, n: usize, rng: &mut Stream) -> (f64, Option<f64>) {
        let m = self.p.window;
        let lam = self.demand(p);
        let half = n / 2;
        let coarse = half >= m;
        let (mut full, mut part) = (0.0, 0.0);
        let mut st = QueueState::default();
        for j in 1..=n {
            let u: f64 = rng.sample(Exp1);
            let v = self.sampler.draw(rng);
            st = st.step(mu, lam, u, v);
            if j + m > n {
                full += st.w + st.x;
            }
            if coarse && j <= half && j + m > half {
                part += st.w + st.x;
            }
        }
        let m = m as f64;
        (full / m, coarse.then_some(part / m))
    }

    fn floor_level(&self) -> u32 {
        self.p.window.next_power_of_two().trailing_zeros()
    }

    /// Largest Hessian eigenvalue magnitude of the closed form on a 0.1 grid
    /// over the box, by central differences.
    fn box_smoothness(&self) -> f64 {
        let ((mu_lo, mu_hi), (p_lo, p_hi)) = (self.p.mu_range, self.p.p_range);
        let h = 1e-4;
        let f = |mu: f64, p: f64| self.truth(mu, p).unwrap_or(f64::NAN);
        let n_mu = ((mu_hi - mu_lo) / 0.1).ceil() as usize;
        let n_p = ((p_hi - p_lo) / 0.1).ceil() as usize;
        let mut worst: f64 = 0.0;
        for i in 0..=n_mu {
            let mu = (mu_lo + 0.1 * i as f64).clamp(mu_lo + h, mu_hi - h);
            for j in 0..=n_p {
                let p = (p_lo + 0.1 * j as f64).clamp(p_lo + h, p_hi - h);
                let c = f(mu, p);
                let fxx = (f(mu + h, p) - 2.0 * c + f(mu - h, p)) / (h * h);
                let fyy = (f(mu, p + h) - 2.0 * c + f(mu, p - h)) / (h * h);
                let fxy = (f(mu + h, p + h) - f(mu + h, p - h) - f(mu - h, p + h) + f(mu - h, p - h)) / (4.0 * h * h);
                let mid = 0.5 * (fxx + fyy);
                let rad = (0.25 * (fxx - fyy).powi(2) + fxy * fxy).sqrt();
                worst = worst.max((mid + rad).abs()).max((mid - rad).abs());
            }
        }
        worst
    }

    /// Loose constants for the conservative `a = b = c = 1` law, from the
    /// closed-form load at the worst box corner.
    fn declared_meta(&self) -> OracleMeta {
        let ((mu_lo, _), (p_lo, _)) = (self.p.mu_range, self.p.p_range);
        let rho = self.demand(p_lo) / mu_lo;
        let sojourn = self.mean_queue(rho) / self.demand(p_lo);
        let slope = self.p.h0 * self.p.chi.max(self.p.chi / mu_lo);
        let scale = slope * slope * (1.0 + sojourn).powi(2);
        let m = self.p.window as f64;
        OracleMeta {
            a: 1.0,
            b: 1.0,
            c: 1.0,
            m_a: scale * m,
            m_b: 4.0 * scale * m,
            m_c: 1.0,
            sigma_sq: 4.0 * scale,
            d: 2,
            level_cap: DEFAULT_LEVEL_CAP,
        }
    }

    fn level_gradient_from(&self, mu: f64, p: f64, g: f64) -> [f64; 2] {
        let lam = self.demand(p);
        let dlam = self.demand_slope(p);
        let h0 = self.p.h0;
        [2.0 * self.p.c0 * mu - h0 * lam / mu * (g + 1.0 / mu), -lam - p * dlam + h0 * dlam * (g + 1.0 / mu)]
    }
}

impl Oracle for QueueInstance {
    fn name(&self) -> &str {
        "queue"
    }

    fn meta(&self) -> &OracleMeta {
        &self.meta
    }

    fn convexity(&self) -> Convexity {
        Convexity::Nonconvex
    }

    fn constants(&self) -> Constants {
        Constants { mu: None, smoothness: self.smoothness, lipschitz: None }
    }

    fn min_level(&self) -> u32 {
        self.floor_level()
    }

    fn level_cost(&self, level: u32) -> u64 {
        1u64 << level
    }

    fn check_point(&self, x: &[f64]) -> Result<()> {
        let ((mu_lo, mu_hi), (p_lo, p_hi)) = (self.p.mu_range, self.p.p_range);
        let (mu, p) = (x[0], x[1]);
        if !(mu_lo..=mu_hi).contains(&mu) || !(p_lo..=p_hi).contains(&p) {
            return Err(Error::InvalidInput(format!(
                "(mu, p) = ({mu}, {p}) outside [{mu_lo}, {mu_hi}] x [{p_lo}, {p_hi}]"
            )));
        }
        if self.demand(p) >= mu {
            return Err(Error::Unstable(format!("lambda({p}) = {} >= mu = {mu}", self.demand(p))));
        }
        Ok(())
    }

    fn project(&self, x: &mut [f64]) {
        x[0] = x[0].clamp(self.p.mu_range.0, self.p.mu_range.1);
        x[1] = x[1].clamp(self.p.p_range.0, self.p.p_range.1);
    }

    fn sample(&self, level: u32, x: &[f64], rng: &mut Stream) -> Result<OracleOutput> {
        let (mu, p) = (x[0], x[1]);
        let n = 1usize << level;
        let (g_full, g_half) = self.simulate_windows(mu, p, n, rng);
        let h = self.level_gradient_from(mu, p, g_full).to_vec();
        let diff = match g_half {
            Some(g_half) if level > self.floor_level() => {
                let delta = g_full - g_half;
                vec![-self.p.h0 * self.demand(p) / mu * delta, self.p.h0 * self.demand_slope(p) * delta]
            }
            _ => h.clone(),
        };
        Ok(OracleOutput { h, diff, cost: n as u64 })
    }

    fn default_start(&self) -> Vec<f64> {
        self.p.start.clone()
    }

    fn objective(&self, x: &[f64]) -> Option<f64> {
        self.truth(x[0], x[1]).ok()
    }

    fn gradient(&self, x: &[f64]) -> Option<Vec<f64>> {
        self.truth_gradient(x[0], x[1]).ok().map(|g| g.to_vec())
    }

    fn minimizer(&self) -> Option<Vec<f64>> {
        Some(self.reference_optimum().0)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;

    #[test]
    fn lindley_examples() {
        let s = QueueState { w: 0.0, x: 0.7, n: 3 }.step(2.0, 1.0, 1.0, 1.0);
        assert_eq!((s.w, s.x, s.n), (0.0, 0.0, 4));
        let s = QueueState { w: 1.0, x: 0.5, n: 0 }.step(2.0, 1.0, 0.5, 1.0);
        assert_eq!((s.w, s.x), (1.0, 1.0));
    }

    #[test]
    fn pk_examples() {
        let q = QueueInstance::exponential();
        assert!((q.mean_queue(0.5) - 1.0).abs() < 1e-15);
        assert!(q.mean_queue(1e-9) < 1e-8);
    }

    #[test]
    fn service_laws_have_unit_mean_and_stated_variance() {
        for (law, var) in [
            (ServiceLaw::Exponential, 1.0),
            (ServiceLaw::ERLANG_F2, 0.1),
            (ServiceLaw::HYPER_F2, ServiceLaw::HYPER_F2.variance()),
        ] {
            let s = Sampler::new(law);
            let mut r = rng::stream(7);
            let n = 400_000;
            let draws: Vec<f64> = (0..n).map(|_| s.draw(&mut r)).collect();
            let mean = draws.iter().sum::<f64>() / n as f64;
            let v = draws.iter().map(|d| (d - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
            let se = (v / n as f64).sqrt();
            assert!((mean - 1.0).abs() < 4.0 * se, "{}: mean {mean}", law.name());
            assert!((v - var).abs() < 0.05 * var.max(1.0), "{}: var {v} vs {var}", law.name());
        }
    }

    #[test]
    fn truth_gradient_matches_finite_differences() {
        let q = QueueInstance::with_service(ServiceLaw::HYPER_F2).unwrap();
        for (mu, p) in [(5.0, 3.0), (8.0, 2.0), (9.0, 9.0)] {
            let g = q.truth_gradient(mu, p).unwrap();
            let e = 1e-6;
            let fm = (q.truth(mu + e, p).unwrap() - q.truth(mu - e, p).unwrap()) / (2.0 * e);
            let fp = (q.truth(mu, p + e).unwrap() - q.truth(mu, p - e).unwrap()) / (2.0 * e);
            assert!((g[0] - fm).abs() < 1e-6 && (g[1] - fp).abs() < 1e-6);
        }
    }

    #[test]
    fn long_run_gradient_matches_closed_form() {
        // The steady-state formula with a long window should agree with the
        // chain rule through the Pollaczek–Khinchine mean.
        let q = QueueInstance::new(QueueParams { window: 1 << 14, ..QueueParams::default() }).unwrap();
        let (mu, p) = (3.0, 2.0);
        let mut r = rng::stream(11);
        let reps = 60;
        let mut acc = [0.0; 2];
        for _ in 0..reps {
            let out = q.query(17, &[mu, p], &mut r).unwrap();
            acc[0] += out.h[0] / reps as f64;
            acc[1] += out.h[1] / reps as f64;
        }
        let g = q.truth_gradient(mu, p).unwrap();
        assert!((acc[0] - g[0]).abs() < 0.05 * g[0].abs().max(1.0), "{acc:?} vs {g:?}");
        assert!((acc[1] - g[1]).abs() < 0.05 * g[1].abs().max(1.0), "{acc:?} vs {g:?}");
    }

    #[test]
    fn floor_level_and_domain() {
        let q = QueueInstance::exponential();
        assert_eq!(q.min_level(), 6);
        let mut r = rng::stream(1);
        assert!(matches!(q.query(5, &[9.0, 9.0], &mut r), Err(Error::InvalidInput(_))));
        assert!(matches!(q.query(8, &[11.0, 9.0], &mut r), Err(Error::InvalidInput(_))));
        let out = q.query(6, &[9.0, 9.0], &mut r).unwrap();
        assert_eq!(out.h, out.diff);
        assert_eq!(out.cost, 64);
        let mut x = [12.0, 0.0];
        q.project(&mut x);
        assert_eq!(x, [10.0, 2.0]);
    }

    #[test]
    fn price_component_has_deterministic_part() {
        let q = QueueInstance::exponential();
        let (mu, p) = (7.0, 4.0);
        let mut r = rng::stream(3);
        let out = q.query(8, &[mu, p], &mut r).unwrap();
        let mut r2 = rng::stream(3);
        let (g, _) = q.simulate_windows(mu, p, 256, &mut r2);
        let lam = q.demand(p);
        let dl = q.demand_slope(p);
        let expect = -lam - p * dl + dl * (g + 1.0 / mu);
        assert!((out.h[1] - expect).abs() < 1e-12);
    }

    #[test]
    fn unstable_box_is_rejected() {
        let bad = QueueParams { mu_range: (1.0, 10.0), ..QueueParams::default() };
        assert!(matches!(QueueInstance::new(bad), Err(Error::Unstable(_))));
    }

    #[test]
    fn monotone_queue_term_puts_optimum_at_top_capacity() {
        let q = QueueInstance::new(QueueParams { c0: 0.0, ..QueueParams::default() }).unwrap();
        // Zero out revenue by checking a fixed price slice.
        let p = 5.0;
        let best = (0..=80).map(|i| 2.0 + 0.1 * i as f64).map(|mu| (mu, q.truth(mu, p).unwrap())).fold(
            (0.0, f64::INFINITY),
            |acc, (mu, v)| if v < acc.1 { (mu, v) } else { acc },
        );
        assert!((best.0 - 10.0).abs() < 1e-9);
    }
}
