//! Utility-based shortfall risk of a Gaussian portfolio.
//!
//! Position `X(θ) = θᵀR` with returns `R ~ N(r, Σ)` and derivative samples
//! `X'(θ) = R`. With the exponential loss `ℓ(y) = e^{βy}` the shortfall risk
//! is closed form:
//!
//! ```text
//! SR(θ)  = −θᵀr + (β/2) θᵀΣθ − (1/β) log λ
//! ∇SR(θ) = −r + β Σθ
//! ```
//!
//! The level-`l` oracle draws `2^l` pairs `(X_i, X̃_i)` from two independent
//! streams, estimates `t` on each window from the `X̃`'s by bisection and
//! returns the plug-in ratio estimate of the gradient. Cost counts both
//! streams, `2·2^l` samples.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, RngCore};
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::oracle::{Constants, Convexity, Oracle, OracleMeta, OracleOutput, DEFAULT_LEVEL_CAP};
use crate::rng::{self, Stream};

const ROOT_TOL: f64 = 1e-10;
const MAX_DOUBLINGS: u32 = 6;
const MIN_DENOMINATOR: f64 = 1e-12;

/// Convex increasing loss `ℓ`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum RiskLoss {
    /// `ℓ(y) = e^{βy}`.
    Exponential { beta: f64 },
}

impl RiskLoss {
    pub fn value(&self, y: f64) -> f64 {
        match *self {
            Self::Exponential { beta } => (beta * y).exp(),
        }
    }

    pub fn slope(&self, y: f64) -> f64 {
        match *self {
            Self::Exponential { beta } => beta * (beta * y).exp(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct UbsrParams {
    pub mean: Vec<f64>,
    /// Row-major covariance.
    pub cov: Vec<Vec<f64>>,
    pub loss: RiskLoss,
    pub risk_level: f64,
    pub start: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct UbsrToy {
    p: UbsrParams,
    chol: DMatrix<f64>,
    cov: DMatrix<f64>,
    meta: OracleMeta,
    constants: Constants,
}

/// Root `t` of `(1/n) Σ ℓ(−x̃_i − t) = λ` by bracketed bisection.
///
/// The bracket starts at `±10(max|x̃| + 1)` and doubles up to six times.
pub fn sr_estimate(loss: &RiskLoss, risk_level: f64, samples: &[f64]) -> Result<f64> {
    if samples.is_empty() {
        return Err(Error::InsufficientData("shortfall estimate needs at least one sample".into()));
    }
    let n = samples.len() as f64;
    // The loss is separable in t for the exponential family, so each bisection
    // step is O(1) after one pass over the samples.
    let root_fn: Box<dyn Fn(f64) -> f64> = match *loss {
        RiskLoss::Exponential { beta } => {
            let shift = samples.iter().map(|x| -beta * x).fold(f64::NEG_INFINITY, f64::max);
            let s = samples.iter().map(|x| (-beta * x - shift).exp()).sum::<f64>() / n;
            Box::new(move |t: f64| (shift - beta * t).exp() * s - risk_level)
        }
    };
    let reach = samples.iter().fold(0.0f64, |m, x| m.max(x.abs()));
    let mut bound = 10.0 * (reach + 1.0);
    let mut doublings = 0;
    while !(root_fn(-bound) >= 0.0 && root_fn(bound) <= 0.0) {
        doublings += 1;
        if doublings > MAX_DOUBLINGS {
            return Err(Error::Bracket(format!("no sign change within [-{bound}, {bound}]")));
        }
        bound *= 2.0;
    }
    let (mut lo, mut hi) = (-bound, bound);
    while hi - lo > ROOT_TOL * (1.0 + lo.abs().max(hi.abs())) {
        let mid = 0.5 * (lo + hi);
        if mid == lo || mid == hi {
            break;
        }
        if root_fn(mid) > 0.0 {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Ok(0.5 * (lo + hi))
}

impl UbsrToy {
    pub fn default_toy() -> Self {
        Self::new(UbsrParams {
            mean: vec![1.0, 0.5],
            cov: vec![vec![1.0, 0.3], vec![0.3, 0.5]],
            loss: RiskLoss::Exponential { beta: 1.0 },
            risk_level: 0.5,
            start: vec![0.0, 0.0],
        })
        .expect("default toy is valid")
    }

    pub fn new(p: UbsrParams) -> Result<Self> {
        let d = p.mean.len();
        if d == 0 || p.cov.len() != d || p.cov.iter().any(|r| r.len() != d) || p.start.len() != d {
            return Err(Error::InvalidInput("mean, covariance and start dimensions disagree".into()));
        }
        if !(p.risk_level > 0.0) {
            return Err(Error::InvalidInput(format!("risk level must be positive, got {}", p.risk_level)));
        }
        let RiskLoss::Exponential { beta } = p.loss;
        if !(beta > 0.0 && beta.is_finite()) {
            return Err(Error::InvalidInput(format!("loss rate must be positive, got {beta}")));
        }
        let cov = DMatrix::from_fn(d, d, |i, j| p.cov[i][j]);
        let chol = cov
            .clone()
            .cholesky()
            .ok_or_else(|| Error::InvalidInput("covariance is not positive definite".into()))?
            .l();
        let eig = cov.clone().symmetric_eigen().eigenvalues;
        let (lo, hi) = eig.iter().fold((f64::INFINITY, 0.0f64), |(a, b), &e| (a.min(e), b.max(e)));
        let constants = Constants { mu: Some(beta * lo), smoothness: beta * hi, lipschitz: None };
        // Ratio-estimator bias and variance scale with the second moment of
        // the tilted returns; bounded on ‖θ‖ ≤ 3 via the tilt factor.
        let r2: f64 = p.mean.iter().map(|v| v * v).sum::<f64>() + cov.trace();
        let tilt = (beta * beta * hi * 9.0).exp();
        let meta = OracleMeta {
            a: 1.0,
            b: 1.0,
            c: 1.0,
            m_a: 4.0 * r2 * tilt,
            m_b: 8.0 * r2 * tilt,
            m_c: 2.0,
            sigma_sq: 4.0 * r2 * tilt,
            d,
            level_cap: DEFAULT_LEVEL_CAP,
        };
        Ok(Self { p, chol, cov, meta, constants })
    }

    pub fn params(&self) -> &UbsrParams {
        &self.p
    }

    fn beta(&self) -> f64 {
        let RiskLoss::Exponential { beta } = self.p.loss;
        beta
    }

    fn quad(&self, theta: &[f64]) -> f64 {
        let t = DVector::from_column_slice(theta);
        (t.transpose() * &self.cov * &t)[(0, 0)]
    }

    /// Closed-form shortfall risk.
    pub fn sr(&self, theta: &[f64]) -> f64 {
        let beta = self.beta();
        let mean: f64 = theta.iter().zip(&self.p.mean).map(|(a, b)| a * b).sum();
        -mean + 0.5 * beta * self.quad(theta) - self.p.risk_level.ln() / beta
    }

    pub fn sr_gradient(&self, theta: &[f64]) -> Vec<f64> {
        let t = DVector::from_column_slice(theta);
        let s = &self.cov * t;
        self.p.mean.iter().zip(s.iter()).map(|(r, v)| -r + self.beta() * v).collect()
    }

    /// Exact bias of the `n`-sample shortfall estimate to first order in `1/n`:
    /// `−(e^{β² θᵀΣθ} − 1)/(2βn)`.
    pub fn sr_bias_first_order(&self, theta: &[f64], n: usize) -> f64 {
        let beta = self.beta();
        -(beta * beta * self.quad(theta)).exp_m1() / (2.0 * beta * n as f64)
    }

    /// Draw `n` return vectors into `out` (flattened) and positions into `pos`.
    fn draw(&self, theta: &[f64], n: usize, rng: &mut Stream, out: &mut Vec<f64>, pos: &mut Vec<f64>) {
        let d = self.p.mean.len();
        out.clear();
        pos.clear();
        let mut z = vec![0.0; d];
        for _ in 0..n {
            z.iter_mut().for_each(|v| *v = rng.sample(StandardNormal));
            let mut x = 0.0;
            for i in 0..d {
                let mut r = self.p.mean[i];
                for (j, zj) in z.iter().enumerate().take(i + 1) {
                    r += self.chol[(i, j)] * zj;
                }
                x += theta[i] * r;
                out.push(r);
            }
            pos.push(x);
        }
    }

    /// Shortfall estimate from `n` fresh samples at `theta`.
    pub fn sample_sr(&self, theta: &[f64], n: usize, rng: &mut Stream) -> Result<f64> {
        let (mut r, mut x) = (Vec::new(), Vec::new());
        self.draw(theta, n, rng, &mut r, &mut x);
        sr_estimate(&self.p.loss, self.p.risk_level, &x)
    }

    /// Plug-in gradient on one window.
    fn window_grad(&self, returns: &[f64], pos: &[f64], tilde: &[f64]) -> Result<Vec<f64>> {
        let d = self.p.mean.len();
        let t = sr_estimate(&self.p.loss, self.p.risk_level, tilde)?;
        let n = pos.len() as f64;
        let mut num = vec![0.0; d];
        let mut den = 0.0;
        for (k, x) in pos.iter().enumerate() {
            let w = self.p.loss.slope(-x - t);
            den += w;
            for (acc, r) in num.iter_mut().zip(&returns[k * d..(k + 1) * d]) {
                *acc += w * r;
            }
        }
        den /= n;
        if !(den >= MIN_DENOMINATOR) {
            return Err(Error::DegenerateDenominator(format!("mean loss slope {den} below {MIN_DENOMINATOR}")));
        }
        Ok(num.iter().map(|v| -v / n / den).collect())
    }
}

impl Oracle for UbsrToy {
    fn name(&self) -> &str {
        "ubsr"
    }

    fn meta(&self) -> &OracleMeta {
        &self.meta
    }

    fn convexity(&self) -> Convexity {
        Convexity::StronglyConvex
    }

    fn constants(&self) -> Constants {
        self.constants
    }

    fn level_cost(&self, level: u32) -> u64 {
        2u64 << level
    }

    fn sample(&self, level: u32, theta: &[f64], rng: &mut Stream) -> Result<OracleOutput> {
        let seed = rng.next_u64();
        let mut main = rng::stream(rng::split(seed, 0));
        let mut shadow = rng::stream(rng::split(seed, 1));
        let n = 1usize << level;
        let d = self.p.mean.len();
        let (mut r, mut x) = (Vec::with_capacity(n * d), Vec::with_capacity(n));
        let (mut r_t, mut x_t) = (Vec::with_capacity(n * d), Vec::with_capacity(n));
        self.draw(theta, n, &mut main, &mut r, &mut x);
        self.draw(theta, n, &mut shadow, &mut r_t, &mut x_t);
        let h = self.window_grad(&r, &x, &x_t)?;
        let diff = if level == 0 {
            h.clone()
        } else {
            let m = n / 2;
            let g1 = self.window_grad(&r[..m * d], &x[..m], &x_t[..m])?;
            let g2 = self.window_grad(&r[m * d..], &x[m..], &x_t[m..])?;
            h.iter().zip(g1.iter().zip(&g2)).map(|(f, (a, b))| f - 0.5 * (a + b)).collect()
        };
        Ok(OracleOutput { h, diff, cost: 2 * n as u64 })
    }

    fn default_start(&self) -> Vec<f64> {
        self.p.start.clone()
    }

    fn objective(&self, theta: &[f64]) -> Option<f64> {
        Some(self.sr(theta))
    }

    fn gradient(&self, theta: &[f64]) -> Option<Vec<f64>> {
        Some(self.sr_gradient(theta))
    }

    fn minimizer(&self) -> Option<Vec<f64>> {
        let r = DVector::from_column_slice(&self.p.mean);
        let sol = self.cov.clone().cholesky()?.solve(&r) / self.beta();
        Some(sol.iter().cloned().collect())
    }
}
