//! Sinkhorn-regularized distributionally robust least squares.
//!
//! ```text
//! F(x) = (1/N) Σ_i λ log E_z[ exp(ℓ(x; z, b_i)/λ) ],   z ~ N(a_i, τ² I)
//! ℓ(x; z, b) = (xᵀz − b)²
//! ```
//!
//! A compositional problem with `f = λ log` and `g = exp(ℓ/λ)`. With
//! `s² = τ²‖x‖² < λ/2` the inner expectation is a Gaussian integral, so
//!
//! ```text
//! F(x) = (1/N) Σ_i λ [ −½ log(1 − 2s²/λ) + (xᵀa_i − b_i)² / (λ − 2s²) ].
//! ```
//!
//! The oracle uses the same antithetic split as the CSO toys. Inner means are
//! accumulated as log-mean-exp with a max shift.

use std::path::Path;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::oracle::{Constants, Convexity, Oracle, OracleMeta, OracleOutput, DEFAULT_LEVEL_CAP};
use crate::rng::Stream;

/// `log((1/n) Σ exp(v_i))` with a max shift.
pub fn log_mean_exp(values: &[f64]) -> f64 {
    let shift = values.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if !shift.is_finite() {
        return shift;
    }
    shift + (values.iter().map(|v| (v - shift).exp()).sum::<f64>() / values.len() as f64).ln()
}

#[derive(Debug, Clone)]
pub struct SinkhornDro {
    features: Vec<Vec<f64>>,
    labels: Vec<f64>,
    tau_sq: f64,
    lambda: f64,
    d: usize,
    meta: OracleMeta,
    constants: Constants,
    minimizer: Vec<f64>,
}

impl SinkhornDro {
    pub const DEFAULT_SEED: u64 = 20_240_611;
    pub const DEFAULT_TAU_SQ: f64 = 0.1;
    pub const DEFAULT_LAMBDA: f64 = 20.0;

    /// Housing-style synthetic regression: 64 points in 5 dimensions.
    pub fn synthetic(seed: u64) -> Self {
        let mut rng = Stream::seed_from_u64(seed);
        let (n, d) = (64, 5);
        let w: Vec<f64> = (0..d).map(|j| 1.0 - 0.4 * j as f64).collect();
        let mut features = Vec::with_capacity(n);
        let mut labels = Vec::with_capacity(n);
        for _ in 0..n {
            let a: Vec<f64> = (0..d).map(|_| rng.sample(StandardNormal)).collect();
            let noise: f64 = rng.sample(StandardNormal);
            labels.push(a.iter().zip(&w).map(|(x, y)| x * y).sum::<f64>() + 0.5 * noise);
            features.push(a);
        }
        Self::new(features, labels, Self::DEFAULT_TAU_SQ, Self::DEFAULT_LAMBDA).expect("synthetic data is valid")
    }

    /// Parse comma-separated rows of features followed by the label. A first
    /// line that does not parse as numbers is treated as a header.
    pub fn parse_csv(text: &str, tau_sq: f64, lambda: f64) -> Result<Self> {
        let mut features = Vec::new();
        let mut labels = Vec::new();
        for (lineno, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let parsed: std::result::Result<Vec<f64>, _> = line.split(',').map(|c| c.trim().parse::<f64>()).collect();
            let row = match parsed {
                Ok(r) => r,
                Err(_) if features.is_empty() && lineno == 0 => continue,
                Err(e) => return Err(Error::InvalidInput(format!("line {}: {e}", lineno + 1))),
            };
            if row.len() < 2 {
                return Err(Error::InvalidInput(format!("line {}: need features and a label", lineno + 1)));
            }
            let (feat, label) = row.split_at(row.len() - 1);
            features.push(feat.to_vec());
            labels.push(label[0]);
        }
        Self::new(features, labels, tau_sq, lambda)
    }

    pub fn from_csv(path: &Path, tau_sq: f64, lambda: f64) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::InvalidInput(format!("cannot read {}: {e}", path.display())))?;
        Self::parse_csv(&text, tau_sq, lambda)
    }

    pub fn new(features: Vec<Vec<f64>>, labels: Vec<f64>, tau_sq: f64, lambda: f64) -> Result<Self> {
        if features.is_empty() || features.len() != labels.len() {
            return Err(Error::InvalidInput("need at least one (features, label) row".into()));
        }
        let d = features[0].len();
        if d == 0 || features.iter().any(|f| f.len() != d) {
            return Err(Error::InvalidInput("ragged feature rows".into()));
        }
        if features.iter().flatten().chain(&labels).any(|v| !v.is_finite()) {
            return Err(Error::InvalidInput("data contains non-finite values".into()));
        }
        if !(tau_sq > 0.0 && lambda > 0.0) {
            return Err(Error::InvalidInput(format!("tau^2 and lambda must be positive, got {tau_sq}, {lambda}")));
        }
        let mut inst = Self {
            features,
            labels,
            tau_sq,
            lambda,
            d,
            meta: OracleMeta {
                a: 1.0,
                b: 1.0,
                c: 1.0,
                m_a: 1.0,
                m_b: 1.0,
                m_c: 1.0,
                sigma_sq: 1.0,
                d,
                level_cap: DEFAULT_LEVEL_CAP,
            },
            constants: Constants { mu: None, smoothness: 1.0, lipschitz: None },
            minimizer: vec![0.0; d],
        };
        inst.calibrate();
        Ok(inst)
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn tau_sq(&self) -> f64 {
        self.tau_sq
    }

    pub fn lambda(&self) -> f64 {
        self.lambda
    }

    pub fn features(&self) -> &[Vec<f64>] {
        &self.features
    }

    pub fn labels(&self) -> &[f64] {
        &self.labels
    }

    fn margin(&self, x: &[f64]) -> Option<f64> {
        let den = self.lambda - 2.0 * self.tau_sq * x.iter().map(|v| v * v).sum::<f64>();
        (den > 0.0).then_some(den)
    }

    /// Closed-form objective; `None` where the inner expectation diverges.
    pub fn closed_form(&self, x: &[f64]) -> Option<f64> {
        let den = self.margin(x)?;
        let lam = self.lambda;
        let log_term = -0.5 * lam * (den / lam).ln();
        let total: f64 = self
            .features
            .iter()
            .zip(&self.labels)
            .map(|(a, b)| {
                let m = a.iter().zip(x).map(|(p, q)| p * q).sum::<f64>() - b;
                log_term + lam * m * m / den
            })
            .sum();
        Some(total / self.len() as f64)
    }

    pub fn closed_form_gradient(&self, x: &[f64]) -> Option<Vec<f64>> {
        let den = self.margin(x)?;
        let (lam, t2) = (self.lambda, self.tau_sq);
        let mut g: Vec<f64> = x.iter().map(|v| 2.0 * t2 * lam * v / den).collect();
        let n = self.len() as f64;
        for (a, b) in self.features.iter().zip(&self.labels) {
            let m = a.iter().zip(x).map(|(p, q)| p * q).sum::<f64>() - b;
            for ((gj, aj), xj) in g.iter_mut().zip(a).zip(x) {
                *gj += (lam * 2.0 * m * aj / den + lam * m * m * 4.0 * t2 * xj / (den * den)) / n;
            }
        }
        Some(g)
    }

    fn hessian_fd(&self, x: &[f64]) -> DMatrix<f64> {
        let e = 1e-5;
        let mut h = DMatrix::zeros(self.d, self.d);
        for j in 0..self.d {
            let mut xp = x.to_vec();
            let mut xm = x.to_vec();
            xp[j] += e;
            xm[j] -= e;
            let gp = self.closed_form_gradient(&xp).expect("inside domain");
            let gm = self.closed_form_gradient(&xm).expect("inside domain");
            for i in 0..self.d {
                h[(i, j)] = (gp[i] - gm[i]) / (2.0 * e);
            }
        }
        0.5 * (&h + h.transpose())
    }

    /// Minimizer by Newton steps from the least-squares fit, curvature
    /// constants from the Hessian there, and loose oracle constants on the
    /// ball of twice the minimizer's radius.
    fn calibrate(&mut self) {
        let n = self.len();
        let a = DMatrix::from_fn(n, self.d, |i, j| self.features[i][j]);
        let b = DVector::from_column_slice(&self.labels);
        let ls = (a.transpose() * &a + DMatrix::identity(self.d, self.d) * 1e-9)
            .cholesky()
            .map(|c| c.solve(&(a.transpose() * &b)))
            .unwrap_or_else(|| DVector::zeros(self.d));
        let mut x: Vec<f64> = ls.iter().cloned().collect();
        if self.margin(&x).is_none() {
            x = vec![0.0; self.d];
        }
        for _ in 0..50 {
            let g = DVector::from_vec(self.closed_form_gradient(&x).expect("inside domain"));
            let Some(ch) = self.hessian_fd(&x).cholesky() else { break };
            let step = ch.solve(&g);
            let mut t = 1.0;
            let f0 = self.closed_form(&x).unwrap_or(f64::INFINITY);
            loop {
                let cand: Vec<f64> = x.iter().zip(step.iter()).map(|(xi, s)| xi - t * s).collect();
                if self.closed_form(&cand).is_some_and(|f| f <= f0) || t < 1e-8 {
                    x = cand;
                    break;
                }
                t *= 0.5;
            }
            if step.norm() * t < 1e-14 {
                break;
            }
        }
        let eig = self.hessian_fd(&x).symmetric_eigen().eigenvalues;
        let (lo, hi) = eig.iter().fold((f64::INFINITY, 0.0f64), |(p, q), &e| (p.min(e), q.max(e)));
        self.constants = Constants { mu: Some(0.5 * lo), smoothness: 2.0 * hi, lipschitz: None };
        let radius = 2.0 * x.iter().map(|v| v * v).sum::<f64>().sqrt() + 1.0;
        let reach = self.features.iter().map(|f| f.iter().map(|v| v * v).sum::<f64>().sqrt()).fold(0.0, f64::max)
            + 3.0 * (self.tau_sq * self.d as f64).sqrt();
        let bmax = self.labels.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        let g = 2.0 * (radius * reach + bmax) * reach;
        let sigma_sq = g * g;
        self.meta = OracleMeta {
            a: 1.0,
            b: 1.0,
            c: 1.0,
            m_a: sigma_sq,
            m_b: 4.0 * sigma_sq,
            m_c: 1.0,
            sigma_sq,
            d: self.d,
            level_cap: DEFAULT_LEVEL_CAP,
        };
        self.minimizer = x;
    }

    /// Softmax-weighted loss gradient of one window, `∇(λ log mean e^{ℓ/λ})`.
    fn window_grad(&self, scaled: &[f64], grads: &[f64], out: &mut [f64]) {
        let shift = scaled.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let d = self.d;
        out.iter_mut().for_each(|v| *v = 0.0);
        let mut total = 0.0;
        for (k, s) in scaled.iter().enumerate() {
            let w = (s - shift).exp();
            total += w;
            for (o, g) in out.iter_mut().zip(&grads[k * d..(k + 1) * d]) {
                *o += w * g;
            }
        }
        out.iter_mut().for_each(|v| *v /= total);
    }
}

impl Oracle for SinkhornDro {
    fn name(&self) -> &str {
        "sinkhorn"
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
        1u64 << level
    }

    fn sample(&self, level: u32, x: &[f64], rng: &mut Stream) -> Result<OracleOutput> {
        let i = rng.random_range(0..self.len());
        let (a, b) = (&self.features[i], self.labels[i]);
        let n = 1usize << level;
        let d = self.d;
        let tau = self.tau_sq.sqrt();
        let mut scaled = Vec::with_capacity(n);
        let mut grads = Vec::with_capacity(n * d);
        let mut z = vec![0.0; d];
        for _ in 0..n {
            for (zj, aj) in z.iter_mut().zip(a) {
                *zj = aj + tau * rng.sample::<f64, _>(StandardNormal);
            }
            let r = z.iter().zip(x).map(|(p, q)| p * q).sum::<f64>() - b;
            let loss = r * r;
            if !loss.is_finite() {
                return Err(Error::Numeric(format!("loss overflow at level {level}")));
            }
            scaled.push(loss / self.lambda);
            grads.extend(z.iter().map(|zj| 2.0 * r * zj));
        }
        let mut h = vec![0.0; d];
        self.window_grad(&scaled, &grads, &mut h);
        let diff = if level == 0 {
            h.clone()
        } else {
            let m = n / 2;
            let mut g1 = vec![0.0; d];
            let mut g2 = vec![0.0; d];
            self.window_grad(&scaled[..m], &grads[..m * d], &mut g1);
            self.window_grad(&scaled[m..], &grads[m * d..], &mut g2);
            h.iter().zip(g1.iter().zip(&g2)).map(|(f, (p, q))| f - 0.5 * (p + q)).collect()
        };
        if h.iter().chain(&diff).any(|v| !v.is_finite()) {
            return Err(Error::Numeric("non-finite gradient after stabilization".into()));
        }
        Ok(OracleOutput { h, diff, cost: n as u64 })
    }

    fn default_start(&self) -> Vec<f64> {
        vec![0.0; self.d]
    }

    fn objective(&self, x: &[f64]) -> Option<f64> {
        self.closed_form(x)
    }

    fn gradient(&self, x: &[f64]) -> Option<Vec<f64>> {
        self.closed_form_gradient(x)
    }

    fn minimizer(&self) -> Option<Vec<f64>> {
        Some(self.minimizer.clone())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;

    #[test]
    fn log_mean_exp_matches_naive() {
        let vals = [0.3, -2.0, 5.5, 1.25];
        let naive = (vals.iter().map(|v: &f64| v.exp()).sum::<f64>() / 4.0).ln();
        assert!((log_mean_exp(&vals) - naive).abs() <= 1e-10 * naive.abs());
        assert!(log_mean_exp(&[800.0, 800.0]).is_finite());
    }

    #[test]
    fn closed_form_gradient_matches_finite_differences() {
        let s = SinkhornDro::synthetic(SinkhornDro::DEFAULT_SEED);
        let x = [0.4, -0.2, 0.9, 0.0, 1.3];
        let g = s.closed_form_gradient(&x).unwrap();
        for j in 0..5 {
            let mut p = x;
            let mut m = x;
            p[j] += 1e-6;
            m[j] -= 1e-6;
            let fd = (s.closed_form(&p).unwrap() - s.closed_form(&m).unwrap()) / 2e-6;
            assert!((fd - g[j]).abs() < 1e-5 * (1.0 + g[j].abs()), "{fd} vs {}", g[j]);
        }
    }

    #[test]
    fn minimizer_is_stationary_and_curvature_positive() {
        let s = SinkhornDro::synthetic(SinkhornDro::DEFAULT_SEED);
        let g = s.gradient(&s.minimizer().unwrap()).unwrap();
        assert!(g.iter().all(|v| v.abs() < 1e-8), "{g:?}");
        assert!(s.constants().mu.unwrap() > 0.0);
    }

    #[test]
    fn point_mass_limit_recovers_empirical_loss() {
        let s = SinkhornDro::new(vec![vec![1.0, 2.0]], vec![0.5], 1e-12, 5.0).unwrap();
        let x = [0.3, 0.4];
        let emp = (0.3 + 0.8 - 0.5f64).powi(2);
        assert!((s.closed_form(&x).unwrap() - emp).abs() < 1e-9);
    }

    #[test]
    fn large_lambda_approaches_mean_loss() {
        let x = [0.5, -0.5];
        let data = vec![vec![1.0, 0.0], vec![0.0, 1.0]];
        let labels = vec![0.2, -0.1];
        let tau_sq = 0.3;
        let mean_loss = data
            .iter()
            .zip(&labels)
            .map(|(a, b)| {
                let m: f64 = a.iter().zip(&x).map(|(p, q)| p * q).sum::<f64>() - b;
                m * m + tau_sq * 0.5
            })
            .sum::<f64>()
            / 2.0;
        for lam in [1e2, 1e3, 1e4] {
            let s = SinkhornDro::new(data.clone(), labels.clone(), tau_sq, lam).unwrap();
            assert!((s.closed_form(&x).unwrap() - mean_loss).abs() < 1.0 / lam);
        }
    }

    #[test]
    fn csv_with_and_without_header() {
        let with = "f1,f2,y\n1,2,3\n4,5,6\n";
        let without = "1,2,3\n4,5,6\n";
        let a = SinkhornDro::parse_csv(with, 0.1, 20.0).unwrap();
        let b = SinkhornDro::parse_csv(without, 0.1, 20.0).unwrap();
        assert_eq!(a.len(), 2);
        assert_eq!(a.features, b.features);
        assert_eq!(a.labels, vec![3.0, 6.0]);
        assert!(SinkhornDro::parse_csv("1,2\n3,x\n", 0.1, 20.0).is_err());
    }

    #[test]
    fn level_zero_convention_and_cost() {
        let s = SinkhornDro::synthetic(1);
        let mut r = rng::stream(4);
        let out = s.query(0, &[0.0; 5], &mut r).unwrap();
        assert_eq!(out.h, out.diff);
        assert_eq!(s.query(4, &[0.0; 5], &mut r).unwrap().cost, 16);
    }
}
