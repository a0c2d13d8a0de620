//! Transition matrices of `x' = A(t)x` and estimation of the contraction
//! constants `K`, `alpha` and the coefficient bound `M = sup ||A(t)||`.
//!
//! `Phi(t,s)` is computed by integrating the matrix initial value problem
//! `X' = A(r)X, X(s) = I` from `s` to `t`; results are memoized on the exact
//! `(t, s)` pair (no approximate cache hits, recomputation otherwise). The
//! fundamental solution `Psi = Phi(., 0)` is additionally kept as one dense
//! trajectory so that quadratures can evaluate `Phi(t,s) = Psi(t) Psi(s)^-1`
//! without re-integrating per sample.

use std::collections::HashMap;
use std::sync::{Arc, RwLock};

use nalgebra::{DMatrix, DVector};
use thiserror::Error;

use crate::dsl::{self, Env, Expr};
use crate::ode::{
    flatten_matrix, integrate_ivp, unflatten_matrix, IntegratorOptions, IvpProblem, OdeError, State,
    Trajectory,
};

pub type MatrixFn = Arc<dyn Fn(f64) -> DMatrix<f64> + Send + Sync>;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DichotomyError {
    #[error("flow is not contractive on the grid: fitted log-norm slope {slope} >= 0")]
    NotContractive { slope: f64 },
    #[error("pair grid spans no positive separations")]
    DegenerateGrid,
    #[error(transparent)]
    Ode(#[from] OdeError),
}

/// Empirical uniform-contraction constants: `||Phi(t,s)|| <= K e^{-alpha (t-s)}`
/// certified on `grid`.
#[derive(Clone, Debug)]
pub struct DichotomyEstimate {
    pub k_hat: f64,
    pub alpha_hat: f64,
    pub m_hat: f64,
    pub grid: Vec<(f64, f64)>,
    /// max over the grid of `||Phi(t,s)|| e^{alpha_hat (t-s)} / k_hat`; at most 1.
    pub residual: f64,
}

/// The linear part `x' = A(t)x` on the horizon `[0, T]`.
pub struct LinearSystem {
    n: usize,
    a: MatrixFn,
    horizon: f64,
    opts: IntegratorOptions,
    memo: RwLock<HashMap<(u64, u64), DMatrix<f64>>>,
    fundamental: RwLock<Option<Arc<Trajectory>>>,
}

impl LinearSystem {
    pub fn new(n: usize, a: MatrixFn, horizon: f64) -> Self {
        assert!(n >= 1, "dimension must be at least 1");
        assert!(horizon > 0.0, "horizon must be positive");
        Self {
            n,
            a,
            horizon,
            opts: IntegratorOptions::default(),
            memo: RwLock::new(HashMap::new()),
            fundamental: RwLock::new(None),
        }
    }

    /// Build `A(t)` from `n*n` row-major expression strings in `t` only.
    pub fn from_dsl(entries: &[String], n: usize, horizon: f64) -> Result<Self, dsl::ParseError> {
        assert_eq!(entries.len(), n * n, "expected {} entries for an {n}x{n} matrix", n * n);
        let mut parsed: Vec<Expr> = Vec::with_capacity(entries.len());
        for text in entries {
            parsed.push(dsl::parse_expr(text, 0)?);
        }
        let a: MatrixFn = Arc::new(move |t: f64| {
            DMatrix::from_fn(n, n, |i, j| {
                dsl::eval_expr(&parsed[i * n + j], &Env { t, x: &[] }).unwrap_or(f64::NAN)
            })
        });
        Ok(Self::new(n, a, horizon))
    }

    pub fn with_opts(mut self, opts: IntegratorOptions) -> Self {
        self.opts = opts;
        self
    }

    /// Same coefficients scaled by `c` (fresh caches).
    pub fn scaled(&self, c: f64) -> Self {
        let a = Arc::clone(&self.a);
        Self::new(self.n, Arc::new(move |t| a(t) * c), self.horizon).with_opts(self.opts.clone())
    }

    /// Same coefficients on a different horizon (fresh caches).
    pub fn with_horizon(&self, horizon: f64) -> Self {
        Self::new(self.n, Arc::clone(&self.a), horizon).with_opts(self.opts.clone())
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn horizon(&self) -> f64 {
        self.horizon
    }

    pub fn opts(&self) -> &IntegratorOptions {
        &self.opts
    }

    pub fn a(&self, t: f64) -> DMatrix<f64> {
        (self.a)(t)
    }

    /// `Phi(t, s)`, memoized on the exact pair.
    pub fn transition_matrix(&self, t: f64, s: f64) -> Result<DMatrix<f64>, OdeError> {
        let key = (t.to_bits(), s.to_bits());
        if let Some(m) = self.memo.read().unwrap().get(&key) {
            return Ok(m.clone());
        }
        let m = if t == s {
            DMatrix::identity(self.n, self.n)
        } else {
            let n = self.n;
            let a = &self.a;
            let field = move |r: f64, x: &State| -> State {
                let xm = unflatten_matrix(x, 0, n, n);
                flatten_matrix(&(a(r) * xm))
            };
            let problem = IvpProblem {
                field: &field,
                t0: s,
                state0: flatten_matrix(&DMatrix::identity(n, n)),
                t1: t,
            };
            let traj = integrate_ivp(&problem, &self.opts)?;
            unflatten_matrix(&traj.eval(t)?, 0, n, n)
        };
        self.memo.write().unwrap().insert(key, m.clone());
        Ok(m)
    }

    /// Dense fundamental solution `Psi = Phi(., 0)` on `[0, horizon]`.
    pub fn fundamental(&self) -> Result<Arc<Trajectory>, OdeError> {
        if let Some(t) = self.fundamental.read().unwrap().as_ref() {
            return Ok(Arc::clone(t));
        }
        let n = self.n;
        let a = &self.a;
        let field = move |r: f64, x: &State| -> State {
            let xm = unflatten_matrix(x, 0, n, n);
            flatten_matrix(&(a(r) * xm))
        };
        let problem = IvpProblem {
            field: &field,
            t0: 0.0,
            state0: flatten_matrix(&DMatrix::identity(n, n)),
            t1: self.horizon,
        };
        let traj = Arc::new(integrate_ivp(&problem, &self.opts)?);
        *self.fundamental.write().unwrap() = Some(Arc::clone(&traj));
        Ok(traj)
    }

    /// `Phi(t,s) = Psi(t) Psi(s)^-1` from the dense fundamental solution.
    /// Intended for quadrature loops; requires `t, s` within the horizon.
    pub fn phi_fundamental(&self, t: f64, s: f64) -> Result<DMatrix<f64>, OdeError> {
        let psi = self.fundamental()?;
        let psi_t = unflatten_matrix(&psi.eval(t)?, 0, self.n, self.n);
        let psi_s = unflatten_matrix(&psi.eval(s)?, 0, self.n, self.n);
        let inv = psi_s.try_inverse().ok_or(OdeError::NonFiniteState { t: s })?;
        Ok(psi_t * inv)
    }

    /// `||Phi(t,u)Phi(u,s) - Phi(t,s)||_2`, a solver health metric.
    pub fn cocycle_check(&self, t: f64, u: f64, s: f64) -> Result<f64, OdeError> {
        let a = self.transition_matrix(t, u)?;
        let b = self.transition_matrix(u, s)?;
        let c = self.transition_matrix(t, s)?;
        Ok(op_norm2(&(a * b - c)))
    }

    /// Solution of the linear system through `xi` at time `t`, evaluated at
    /// `s`: returns `Phi(s, t) xi`.
    pub fn linear_solution(&self, s: f64, t: f64, xi: &DVector<f64>) -> Result<DVector<f64>, OdeError> {
        Ok(self.transition_matrix(s, t)? * xi)
    }

    /// `max ||A(t)||_2` over the samples.
    pub fn estimate_bound_m(&self, t_samples: &[f64]) -> f64 {
        assert!(!t_samples.is_empty(), "need at least one sample");
        t_samples.iter().map(|&t| op_norm2(&self.a(t))).fold(0.0, f64::max)
    }

    /// Fit the steepest common decay rate of `ln ||Phi||` against `t - s`,
    /// then close the envelope constant `K`.
    pub fn estimate_dichotomy(&self, pair_grid: &[(f64, f64)]) -> Result<DichotomyEstimate, DichotomyError> {
        let m_hat = self.estimate_bound_m(&linspace(0.0, self.horizon, 201));

        let mut norms = Vec::with_capacity(pair_grid.len());
        for &(t, s) in pair_grid {
            debug_assert!(t >= s, "pair grid requires t >= s");
            norms.push(op_norm2(&self.transition_matrix(t, s)?));
        }

        // Least-squares slope of ln||Phi|| over positive separations.
        let mut sx = 0.0;
        let mut sy = 0.0;
        let mut sxx = 0.0;
        let mut sxy = 0.0;
        let mut count = 0.0;
        for (&(t, s), &nv) in pair_grid.iter().zip(&norms) {
            let sep = t - s;
            if sep > 0.0 && nv > 0.0 {
                let y = nv.ln();
                sx += sep;
                sy += y;
                sxx += sep * sep;
                sxy += sep * y;
                count += 1.0;
            }
        }
        if count < 2.0 {
            return Err(DichotomyError::DegenerateGrid);
        }
        let var = sxx - sx * sx / count;
        if var <= 0.0 {
            return Err(DichotomyError::DegenerateGrid);
        }
        let slope = (sxy - sx * sy / count) / var;
        if slope >= 0.0 {
            return Err(DichotomyError::NotContractive { slope });
        }
        let alpha_hat = (-slope).min(m_hat);

        let mut envelope: f64 = 0.0;
        for (&(t, s), &nv) in pair_grid.iter().zip(&norms) {
            envelope = envelope.max(nv * (alpha_hat * (t - s)).exp());
        }
        let k_hat = envelope.max(1.0);

        Ok(DichotomyEstimate {
            k_hat,
            alpha_hat,
            m_hat,
            grid: pair_grid.to_vec(),
            residual: envelope / k_hat,
        })
    }
}

/// Default `(t, s)` estimation grid: origins over `[0, T/2]` crossed with
/// separations over `[0, T/2]`, so separations span 0 to `T/2`.
pub fn dichotomy_grid(horizon: f64, n_origins: usize, n_seps: usize) -> Vec<(f64, f64)> {
    let origins = linspace(0.0, 0.5 * horizon, n_origins);
    let seps = linspace(0.0, 0.5 * horizon, n_seps);
    let mut grid = Vec::with_capacity(n_origins * n_seps);
    for &s in &origins {
        for &sep in &seps {
            grid.push((s + sep, s));
        }
    }
    grid
}

pub fn linspace(a: f64, b: f64, count: usize) -> Vec<f64> {
    assert!(count >= 2);
    let h = (b - a) / (count - 1) as f64;
    (0..count).map(|k| if k + 1 == count { b } else { a + k as f64 * h }).collect()
}

/// Operator 2-norm (largest singular value).
pub fn op_norm2(m: &DMatrix<f64>) -> f64 {
    m.clone().singular_values().iter().fold(0.0, |acc, &s| acc.max(s))
}
