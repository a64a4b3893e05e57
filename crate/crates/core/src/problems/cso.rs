//! Conditional stochastic optimization toys with closed-form ground truth.
//!
//! `F(x) = E_ξ f_ξ(E_{η|ξ} g_η(x, ξ))` with `ξ` uniform over a few atoms
//! `(A, b, w, c)` and, given `ξ`,
//!
//! ```text
//! g_η(x, ξ) = (A x − b + ε,  z·ψ(x)),   ψ(x) = √(1 + (wᵀx − c)²)
//! f(u, v)   = Σ_i φ_β(u_i) + κ|v|,       φ_β(t) = t²/2 + β(1 − e^{−t²/2})
//! ε ~ N(0, s² I),  z ~ N(0, 1)
//! ```
//!
//! Level `l` averages `2^l` inner draws. The inner mean of `z` is centred,
//! so the `κ|v|` term vanishes in the limit and contributes the level bias
//! `κ√(2/(π 2^l)) E∇ψ`; its antithetic difference has variance exactly
//! proportional to `2^{-l}`. Gaussian smoothing of `φ_β` is closed form, so
//! `F`, `∇F` and `∇F^l` are exact.
//!
//! Variants:
//! * `general` (`β = 0`, `κ = 1`): strongly convex, rates `a = b = c = 1`.
//! * `linear_inner` (`β = 1`, `κ = 0`): `g` affine in `x`, strongly convex,
//!   `b = 2 > c = 1`, so the unbiased estimators apply.
//! * `nonconvex` (`β = −3`, `κ = 1`): double-well outer function, `a = b = c = 1`.
//!
//! Declared `σ²` and `M_b` hold on the ball `‖x‖ ≤ 3`. `M_a` bounds the
//! squared gradient bias `‖∇F^l − ∇F‖²` (and the value bias for the linear
//! variant).

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::Result;
use crate::oracle::{Constants, Convexity, Oracle, OracleMeta, OracleOutput, DEFAULT_LEVEL_CAP};
use crate::rng::Stream;

const FRAC_2_PI: f64 = std::f64::consts::FRAC_2_PI;
const BALL_RADIUS: f64 = 3.0;

#[derive(Debug, Clone, PartialEq)]
pub struct CsoAtom {
    /// `k × d` matrix, row major.
    pub a: Vec<Vec<f64>>,
    pub b: Vec<f64>,
    pub w: Vec<f64>,
    pub c: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CsoVariant {
    General,
    LinearInner,
    Nonconvex,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CsoParams {
    pub variant: CsoVariant,
    pub atoms: Vec<CsoAtom>,
    pub noise_sd: f64,
    pub kink: f64,
    pub bump: f64,
    pub start: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct CsoToy {
    name: &'static str,
    p: CsoParams,
    d: usize,
    k: usize,
    meta: OracleMeta,
    constants: Constants,
    minimizer: Vec<f64>,
}

fn default_atoms() -> Vec<CsoAtom> {
    let atom = |a: [[f64; 2]; 2], b: [f64; 2], w: [f64; 2], c: f64| CsoAtom {
        a: a.iter().map(|r| r.to_vec()).collect(),
        b: b.to_vec(),
        w: w.to_vec(),
        c,
    };
    vec![
        atom([[1.0, 0.2], [0.0, 1.0]], [1.0, 0.0], [0.6, 0.3], 0.2),
        atom([[1.1, 0.0], [0.3, 0.9]], [0.0, 1.0], [-0.4, 0.5], -0.1),
        atom([[0.9, -0.3], [0.1, 1.2]], [-1.0, 0.5], [0.3, -0.6], 0.3),
        atom([[1.2, 0.1], [-0.2, 0.8]], [0.5, -1.0], [0.5, 0.4], 0.0),
    ]
}

fn phi(beta: f64, t: f64) -> f64 {
    0.5 * t * t + beta * -(-0.5 * t * t).exp_m1()
}

fn dphi(beta: f64, t: f64) -> f64 {
    t + beta * t * (-0.5 * t * t).exp()
}

fn ddphi(beta: f64, t: f64) -> f64 {
    1.0 + beta * (1.0 - t * t) * (-0.5 * t * t).exp()
}

/// `E φ_β(m + σZ)` with `var = σ²`.
fn smoothed_phi(beta: f64, m: f64, var: f64) -> f64 {
    let s = 1.0 + var;
    0.5 * (m * m + var) + beta * (1.0 - (-0.5 * m * m / s).exp() / s.sqrt())
}

/// `E φ'_β(m + σZ)` with `var = σ²`.
fn smoothed_dphi(beta: f64, m: f64, var: f64) -> f64 {
    let s = 1.0 + var;
    m + beta * m * (-0.5 * m * m / s).exp() / (s * s.sqrt())
}

fn sym_eigen_range(m: &DMatrix<f64>) -> (f64, f64) {
    let e = m.clone().symmetric_eigen();
    let min = e.eigenvalues.iter().cloned().fold(f64::INFINITY, f64::min);
    let max = e.eigenvalues.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    (min, max)
}

impl CsoToy {
    pub fn general() -> Self {
        Self::new(CsoParams {
            variant: CsoVariant::General,
            atoms: default_atoms(),
            noise_sd: 1.0,
            kink: 1.0,
            bump: 0.0,
            start: vec![0.6, 0.6],
        })
    }

    pub fn linear_inner() -> Self {
        Self::new(CsoParams {
            variant: CsoVariant::LinearInner,
            atoms: default_atoms(),
            noise_sd: 1.0,
            kink: 0.0,
            bump: 1.0,
            start: vec![2.0, -1.5],
        })
    }

    pub fn nonconvex() -> Self {
        Self::new(CsoParams {
            variant: CsoVariant::Nonconvex,
            atoms: default_atoms(),
            noise_sd: 1.0,
            kink: 1.0,
            bump: -3.0,
            start: vec![0.5, 0.5],
        })
    }

    pub fn new(p: CsoParams) -> Self {
        let d = p.atoms[0].w.len();
        let k = p.atoms[0].b.len();
        let n_atoms = p.atoms.len() as f64;
        let mut gram = DMatrix::<f64>::zeros(d, d);
        let mut wwt = DMatrix::<f64>::zeros(d, d);
        let mut a_norm_sq: f64 = 0.0;
        let mut b_norm: f64 = 0.0;
        let mut w_norm_sq: f64 = 0.0;
        for at in &p.atoms {
            let a = DMatrix::from_fn(k, d, |i, j| at.a[i][j]);
            let ata = a.transpose() * &a;
            a_norm_sq = a_norm_sq.max(sym_eigen_range(&ata).1);
            gram += ata / n_atoms;
            let w = DVector::from_column_slice(&at.w);
            wwt += &w * w.transpose() / n_atoms;
            b_norm = b_norm.max(at.b.iter().map(|v| v * v).sum::<f64>().sqrt());
            w_norm_sq = w_norm_sq.max(w.norm_squared());
        }
        let (g_min, g_max) = sym_eigen_range(&gram);
        let w_max = sym_eigen_range(&wwt).1;
        let (beta, kappa, s) = (p.bump, p.kink, p.noise_sd);
        let kink_curv = kappa * FRAC_2_PI.sqrt() * w_max;
        let e15 = (-1.5f64).exp();
        let (mu, smooth) = match p.variant {
            CsoVariant::General => (Some(g_min), g_max + kink_curv),
            CsoVariant::LinearInner => (Some((1.0 - 2.0 * beta * e15) * g_min), (1.0 + beta) * g_max),
            CsoVariant::Nonconvex => {
                let curv = (1.0 + beta).abs().max(1.0 + 2.0 * beta.abs() * e15);
                (None, curv * g_max + kink_curv)
            }
        };
        let kf = k as f64;
        let grad_bias = 2.0 * FRAC_2_PI * kappa * kappa * w_norm_sq + 2.0 * kf * a_norm_sq * 9.0 * beta * beta * s.powi(4);
        let value_bias = kf * (0.5 + beta.abs()) * s * s;
        let m_a = match p.variant {
            CsoVariant::LinearInner => grad_bias.max(value_bias),
            _ => grad_bias,
        };
        let m_reach = a_norm_sq.sqrt() * BALL_RADIUS + b_norm;
        let sigma_sq =
            2.0 * a_norm_sq * (1.0 + beta.abs()).powi(2) * (m_reach * m_reach + kf * s * s) + 2.0 * kappa * kappa * w_norm_sq;
        let third = 1.38 * beta.abs();
        let curvature_part = 2.0 * a_norm_sq * kf * third * third * 0.75 * s.powi(4);
        let kink_part = 2.0 * kappa * kappa * w_norm_sq * (1.0 - FRAC_2_PI);
        let (b_rate, m_b) = match p.variant {
            CsoVariant::LinearInner => (2.0, sigma_sq.max(curvature_part)),
            _ => (1.0, sigma_sq.max(kink_part + curvature_part)),
        };
        let meta = OracleMeta {
            a: 1.0,
            b: b_rate,
            c: 1.0,
            m_a,
            m_b,
            m_c: 1.0,
            sigma_sq,
            d,
            level_cap: DEFAULT_LEVEL_CAP,
        };
        let name = match p.variant {
            CsoVariant::General => "cso_toy",
            CsoVariant::LinearInner => "cso_linear",
            CsoVariant::Nonconvex => "cso_nonconvex",
        };
        let mut toy = Self {
            name,
            p,
            d,
            k,
            meta,
            constants: Constants { mu, smoothness: smooth, lipschitz: None },
            minimizer: Vec::new(),
        };
        toy.minimizer = toy.solve_stationary();
        toy
    }

    pub fn params(&self) -> &CsoParams {
        &self.p
    }

    fn residual(&self, at: &CsoAtom, x: &[f64]) -> Vec<f64> {
        at.a.iter().zip(&at.b).map(|(row, bi)| row.iter().zip(x).map(|(a, xi)| a * xi).sum::<f64>() - bi).collect()
    }

    fn psi_parts(at: &CsoAtom, x: &[f64]) -> (f64, Vec<f64>) {
        let r: f64 = at.w.iter().zip(x).map(|(w, xi)| w * xi).sum::<f64>() - at.c;
        let psi = (1.0 + r * r).sqrt();
        (psi, at.w.iter().map(|w| w * r / psi).collect())
    }

    fn add_at(&self, at: &CsoAtom, coef: &[f64], out: &mut [f64]) {
        for (row, ci) in at.a.iter().zip(coef) {
            for (o, a) in out.iter_mut().zip(row) {
                *o += a * ci;
            }
        }
    }

    /// `F^l(x)`; `level = None` gives `F`.
    pub fn level_objective(&self, level: Option<u32>, x: &[f64]) -> f64 {
        let (var, kink) = self.level_noise(level);
        let beta = self.p.bump;
        let total: f64 = self
            .p
            .atoms
            .iter()
            .map(|at| {
                let m = self.residual(at, x);
                let u: f64 = m.iter().map(|&mi| if var > 0.0 { smoothed_phi(beta, mi, var) } else { phi(beta, mi) }).sum();
                u + self.p.kink * kink * Self::psi_parts(at, x).0
            })
            .sum();
        total / self.p.atoms.len() as f64
    }

    /// `∇F^l(x)`; `level = None` gives `∇F`.
    pub fn level_grad(&self, level: Option<u32>, x: &[f64]) -> Vec<f64> {
        let (var, kink) = self.level_noise(level);
        let beta = self.p.bump;
        let mut g = vec![0.0; self.d];
        for at in &self.p.atoms {
            let m = self.residual(at, x);
            let coef: Vec<f64> =
                m.iter().map(|&mi| if var > 0.0 { smoothed_dphi(beta, mi, var) } else { dphi(beta, mi) }).collect();
            self.add_at(at, &coef, &mut g);
            if self.p.kink != 0.0 && kink > 0.0 {
                let (_, dpsi) = Self::psi_parts(at, x);
                for (gi, dp) in g.iter_mut().zip(dpsi) {
                    *gi += self.p.kink * kink * dp;
                }
            }
        }
        let n = self.p.atoms.len() as f64;
        g.iter_mut().for_each(|v| *v /= n);
        g
    }

    /// Inner-mean variance `s²/2^l` and `E|z̄| = √(2/(π 2^l))`.
    fn level_noise(&self, level: Option<u32>) -> (f64, f64) {
        match level {
            None => (0.0, 0.0),
            Some(l) => {
                let n = (l as f64).exp2();
                (self.p.noise_sd * self.p.noise_sd / n, (FRAC_2_PI / n).sqrt())
            }
        }
    }

    fn hessian(&self, x: &[f64]) -> DMatrix<f64> {
        let mut h = DMatrix::<f64>::zeros(self.d, self.d);
        for at in &self.p.atoms {
            let m = self.residual(at, x);
            let a = DMatrix::from_fn(self.k, self.d, |i, j| at.a[i][j]);
            let diag = DMatrix::from_diagonal(&DVector::from_iterator(self.k, m.iter().map(|&t| ddphi(self.p.bump, t))));
            h += a.transpose() * diag * a;
        }
        h / self.p.atoms.len() as f64
    }

    /// Minimizer of `F` (a local one for the nonconvex variant, reached by
    /// gradient descent from the default start and polished by Newton steps).
    fn solve_stationary(&self) -> Vec<f64> {
        let mut x = self.p.start.clone();
        let step = 1.0 / self.constants.smoothness;
        for _ in 0..20_000 {
            let g = self.level_grad(None, &x);
            if g.iter().map(|v| v * v).sum::<f64>() < 1e-24 {
                break;
            }
            x.iter_mut().zip(&g).for_each(|(xi, gi)| *xi -= step * gi);
        }
        for _ in 0..50 {
            let g = DVector::from_vec(self.level_grad(None, &x));
            let h = self.hessian(&x);
            match h.cholesky() {
                Some(ch) => {
                    let dx = ch.solve(&g);
                    x.iter_mut().zip(dx.iter()).for_each(|(xi, di)| *xi -= di);
                    if dx.norm() < 1e-15 {
                        break;
                    }
                }
                None => break,
            }
        }
        x
    }

    fn grad_at_mean(&self, at: &CsoAtom, u: &[f64], zbar: f64, dpsi: &[f64], out: &mut [f64]) {
        out.iter_mut().for_each(|v| *v = 0.0);
        let coef: Vec<f64> = u.iter().map(|&t| dphi(self.p.bump, t)).collect();
        self.add_at(at, &coef, out);
        if self.p.kink != 0.0 {
            let scale = self.p.kink * zbar.abs();
            for (o, dp) in out.iter_mut().zip(dpsi) {
                *o += scale * dp;
            }
        }
    }
}

impl Oracle for CsoToy {
    fn name(&self) -> &str {
        self.name
    }

    fn meta(&self) -> &OracleMeta {
        &self.meta
    }

    fn convexity(&self) -> Convexity {
        match self.p.variant {
            CsoVariant::Nonconvex => Convexity::Nonconvex,
            _ => Convexity::StronglyConvex,
        }
    }

    fn constants(&self) -> Constants {
        self.constants
    }

    fn level_cost(&self, level: u32) -> u64 {
        1u64 << level
    }

    fn sample(&self, level: u32, x: &[f64], rng: &mut Stream) -> Result<OracleOutput> {
        let at = &self.p.atoms[rng.random_range(0..self.p.atoms.len())];
        let n = 1usize << level;
        let half = (n / 2).max(1);
        let (k, s) = (self.k, self.p.noise_sd);
        let mut sums = [vec![0.0; k], vec![0.0; k]];
        let mut zs = [0.0f64; 2];
        let with_kink = self.p.kink != 0.0;
        for j in 0..n {
            let slot = usize::from(level > 0 && j >= half);
            for e in sums[slot].iter_mut() {
                *e += s * rng.sample::<f64, _>(StandardNormal);
            }
            if with_kink {
                zs[slot] += rng.sample::<f64, _>(StandardNormal);
            }
        }
        let m = self.residual(at, x);
        let (_, dpsi) = Self::psi_parts(at, x);
        let mut h = vec![0.0; self.d];
        if level == 0 {
            let u: Vec<f64> = m.iter().zip(&sums[0]).map(|(mi, e)| mi + e).collect();
            self.grad_at_mean(at, &u, zs[0], &dpsi, &mut h);
            return Ok(OracleOutput { diff: h.clone(), h, cost: 1 });
        }
        let hf = half as f64;
        let u1: Vec<f64> = m.iter().zip(&sums[0]).map(|(mi, e)| mi + e / hf).collect();
        let u2: Vec<f64> = m.iter().zip(&sums[1]).map(|(mi, e)| mi + e / hf).collect();
        let (z1, z2) = (zs[0] / hf, zs[1] / hf);
        let uf: Vec<f64> = u1.iter().zip(&u2).map(|(a, b)| 0.5 * (a + b)).collect();
        let zf = 0.5 * (z1 + z2);
        let mut g1 = vec![0.0; self.d];
        let mut g2 = vec![0.0; self.d];
        self.grad_at_mean(at, &uf, zf, &dpsi, &mut h);
        self.grad_at_mean(at, &u1, z1, &dpsi, &mut g1);
        self.grad_at_mean(at, &u2, z2, &dpsi, &mut g2);
        let diff = h.iter().zip(g1.iter().zip(&g2)).map(|(f, (a, b))| f - 0.5 * (a + b)).collect();
        Ok(OracleOutput { h, diff, cost: n as u64 })
    }

    fn default_start(&self) -> Vec<f64> {
        self.p.start.clone()
    }

    fn objective(&self, x: &[f64]) -> Option<f64> {
        Some(self.level_objective(None, x))
    }

    fn gradient(&self, x: &[f64]) -> Option<Vec<f64>> {
        Some(self.level_grad(None, x))
    }

    fn level_gradient(&self, level: u32, x: &[f64]) -> Option<Vec<f64>> {
        Some(self.level_grad(Some(level), x))
    }

    fn minimizer(&self) -> Option<Vec<f64>> {
        Some(self.minimizer.clone())
    }
}
