//! Construction of the equivalence maps `H` and `G` and verification of the
//! conjugacy, inverse, growth, and continuity properties.
//!
//! `H(t, xi) = xi + z*(t; (t, xi))` where `z*` solves
//! `z' = A(t)z + f(t, x(t,tau,xi) + z), z(0) = 0`, and
//! `G(t, eta) = eta + w*(t; (t, eta))` where
//! `w' = A(t)w - f(t, y(t,tau,eta)), w(0) = 0`.
//!
//! Two independent evaluation routes are provided for `z*`:
//!
//! * the direct initial value problem above (`z_star_ivp`, the default), and
//! * the fixed-point iteration of the defining integral operator
//!   (`z_star_picard`), evaluated by adaptive Simpson quadrature over dense
//!   trajectories. Under the smallness condition `K gamma < alpha` the
//!   iteration contracts with factor at most `K gamma / alpha` and the two
//!   routes must agree; the iteration is kept as an independent oracle.
//!
//! All fixed points live on the finite horizon `[0, T]`; every certificate
//! records the horizon it was computed on.

use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use thiserror::Error;

use crate::cert::{Certificate, CertificateBuilder, Witness};
use crate::linear::LinearSystem;
use crate::ode::{integrate_ivp, IntegratorOptions, IvpProblem, OdeError, State, Trajectory};
use crate::perturbation::{AuditOptions, AuditReport, AuditStatus, HypothesisId, Perturbation};
use crate::quad::adaptive_simpson;

/// Default tolerances for the verification operations.
pub mod tol {
    pub const CONJ: f64 = 1e-5;
    pub const INV: f64 = 1e-6;
    pub const PICARD: f64 = 1e-8;
}

#[derive(Debug, Error)]
pub enum ConjugacyError {
    #[error(transparent)]
    Ode(#[from] OdeError),
    #[error("smallness violated: K*gamma = {k_gamma} >= alpha = {alpha}")]
    SmallnessViolated { k_gamma: f64, alpha: f64 },
    #[error("fixed-point iteration did not converge: increment {increment} > {tol} after {j} iterates")]
    NoConvergence { increment: f64, tol: f64, j: usize },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SolveMethod {
    Ivp,
    Picard,
}

/// Value of `H` or `G` at one point, with solver diagnostics.
#[derive(Clone, Debug)]
pub struct ConjugacyResult {
    pub value: DVector<f64>,
    pub method: SolveMethod,
    /// Iteration count (fixed-point route only).
    pub iterations: Option<usize>,
    /// Last sup-norm increment (fixed-point route) or the integrator's max
    /// local error estimate (direct route).
    pub residual: f64,
}

/// The constants the bound formulas run on.
#[derive(Clone, Copy, Debug)]
pub struct SystemConstants {
    pub k: f64,
    pub alpha: f64,
    pub m: f64,
    pub gamma: f64,
    pub mu: f64,
}

impl SystemConstants {
    pub fn smallness_margin(&self) -> f64 {
        self.alpha - self.k * self.gamma
    }

    pub fn contraction(&self) -> f64 {
        self.k * self.gamma / self.alpha
    }
}

/// The pair `(A, f)` with certified constants; the home of `H` and `G`.
pub struct CoupledSystem {
    lin: Arc<LinearSystem>,
    pert: Arc<Perturbation>,
    constants: SystemConstants,
    outside_theorem: bool,
}

impl CoupledSystem {
    /// Gate on the strict smallness comparison for the supplied constants.
    pub fn new(
        lin: Arc<LinearSystem>,
        pert: Arc<Perturbation>,
        constants: SystemConstants,
    ) -> Result<Self, ConjugacyError> {
        // Strict comparison; non-finite constants must not slip through.
        let k_gamma = constants.k * constants.gamma;
        if !(k_gamma.is_finite() && constants.alpha.is_finite() && k_gamma < constants.alpha) {
            return Err(ConjugacyError::SmallnessViolated { k_gamma, alpha: constants.alpha });
        }
        Ok(Self { lin, pert, constants, outside_theorem: false })
    }

    /// Skip the smallness gate for exploration; every certificate produced
    /// from this system is marked outside-theorem.
    pub fn new_unchecked(
        lin: Arc<LinearSystem>,
        pert: Arc<Perturbation>,
        constants: SystemConstants,
    ) -> Self {
        Self { lin, pert, constants, outside_theorem: true }
    }

    /// Run the full hypothesis audit, then construct with the audited
    /// constants (declared values take precedence where present).
    pub fn certify(
        lin: Arc<LinearSystem>,
        pert: Arc<Perturbation>,
        audit_opts: &AuditOptions,
    ) -> Result<(Self, AuditReport), ConjugacyError> {
        let report = crate::perturbation::audit_hypotheses(&lin, &pert, audit_opts)?;
        let est = match &report.dichotomy {
            Some(est) => est.clone(),
            None => {
                return Err(ConjugacyError::SmallnessViolated { k_gamma: f64::INFINITY, alpha: 0.0 })
            }
        };
        if report
            .record(HypothesisId::Smallness)
            .map(|r| r.status == AuditStatus::Violated)
            .unwrap_or(true)
        {
            return Err(ConjugacyError::SmallnessViolated {
                k_gamma: est.k_hat * report.gamma_hat,
                alpha: est.alpha_hat,
            });
        }
        let constants = SystemConstants {
            k: est.k_hat,
            alpha: est.alpha_hat,
            m: est.m_hat,
            gamma: report.gamma_used,
            mu: report.mu_used,
        };
        let cs = Self::new(lin, pert, constants)?;
        Ok((cs, report))
    }

    pub fn lin(&self) -> &LinearSystem {
        &self.lin
    }

    pub fn pert(&self) -> &Perturbation {
        &self.pert
    }

    pub fn constants(&self) -> &SystemConstants {
        &self.constants
    }

    pub fn horizon(&self) -> f64 {
        self.lin.horizon()
    }

    pub fn n(&self) -> usize {
        self.lin.n()
    }

    pub fn outside_theorem(&self) -> bool {
        self.outside_theorem
    }

    fn cert(&self, id: &str) -> CertificateBuilder {
        CertificateBuilder::new(id, self.horizon()).outside_theorem(self.outside_theorem)
    }

    /// Solution of the perturbed system through `eta` at time `t`, evaluated
    /// at `s` (backward when `s < t`).
    pub fn nonlinear_solution(&self, s: f64, t: f64, eta: &DVector<f64>) -> Result<DVector<f64>, OdeError> {
        if s == t {
            return Ok(eta.clone());
        }
        let traj = self.nonlinear_arc_dense(t, eta, s)?;
        traj.eval(s)
    }

    /// Dense perturbed solution anchored at `(t, eta)`, covering `[0, t]`.
    pub fn nonlinear_backward_dense(&self, t: f64, eta: &DVector<f64>) -> Result<Trajectory, OdeError> {
        self.nonlinear_arc_dense(t, eta, 0.0)
    }

    fn nonlinear_arc_dense(&self, t: f64, eta: &DVector<f64>, to: f64) -> Result<Trajectory, OdeError> {
        let lin = &self.lin;
        let pert = &self.pert;
        let field = move |r: f64, y: &State| -> State { lin.a(r) * y + pert.f(r, y) };
        integrate_ivp(&IvpProblem { field: &field, t0: t, state0: eta.clone(), t1: to }, self.lin.opts())
    }

    /// Dense linear solution anchored at `(tau, xi)`, covering `[0, tau]`.
    pub fn linear_backward_dense(&self, tau: f64, xi: &DVector<f64>) -> Result<Trajectory, OdeError> {
        let lin = &self.lin;
        let field = move |r: f64, x: &State| -> State { lin.a(r) * x };
        integrate_ivp(&IvpProblem { field: &field, t0: tau, state0: xi.clone(), t1: 0.0 }, self.lin.opts())
    }

    /// `z*(tau; (tau, xi))` by integrating the defining initial value
    /// problem: the linear backward solution is frozen as a dense trajectory,
    /// then `z' = A(t)z + f(t, x(t) + z)` runs forward from `z(0) = 0`.
    pub fn z_star_ivp(&self, tau: f64, xi: &DVector<f64>) -> Result<ConjugacyResult, OdeError> {
        self.z_star_ivp_opts(tau, xi, self.lin.opts())
    }

    fn z_star_ivp_opts(
        &self,
        tau: f64,
        xi: &DVector<f64>,
        opts: &IntegratorOptions,
    ) -> Result<ConjugacyResult, OdeError> {
        let traj = self.z_trajectory_opts(tau, xi, opts)?;
        let value = if tau == 0.0 { DVector::zeros(self.n()) } else { traj.eval(tau)? };
        Ok(ConjugacyResult {
            value,
            method: SolveMethod::Ivp,
            iterations: None,
            residual: traj.stats().max_local_error,
        })
    }

    /// Dense `z(.; (tau, xi))` on `[0, tau]` from the direct route.
    pub fn z_trajectory(&self, tau: f64, xi: &DVector<f64>) -> Result<Trajectory, OdeError> {
        self.z_trajectory_opts(tau, xi, self.lin.opts())
    }

    fn z_trajectory_opts(
        &self,
        tau: f64,
        xi: &DVector<f64>,
        opts: &IntegratorOptions,
    ) -> Result<Trajectory, OdeError> {
        let x_dense = if tau == 0.0 {
            None
        } else {
            Some(integrate_ivp(
                &IvpProblem {
                    field: &|r: f64, x: &State| self.lin.a(r) * x,
                    t0: tau,
                    state0: xi.clone(),
                    t1: 0.0,
                },
                opts,
            )?)
        };
        let lin = &self.lin;
        let pert = &self.pert;
        let field = move |r: f64, z: &State| -> State {
            let rc = r.clamp(0.0, tau);
            let x = match &x_dense {
                Some(traj) => traj.eval(rc).unwrap_or_else(|_| DVector::from_element(z.len(), f64::NAN)),
                None => xi.clone(),
            };
            lin.a(r) * z + pert.f(r, &(x + z))
        };
        integrate_ivp(
            &IvpProblem { field: &field, t0: 0.0, state0: DVector::zeros(self.n()), t1: tau },
            opts,
        )
    }

    /// `H(t, xi) = xi + z*(t; (t, xi))`.
    pub fn map_h(&self, t: f64, xi: &DVector<f64>, method: SolveMethod) -> Result<ConjugacyResult, ConjugacyError> {
        match method {
            SolveMethod::Ivp => {
                let mut r = self.z_star_ivp(t, xi)?;
                r.value += xi;
                Ok(r)
            }
            SolveMethod::Picard => {
                let (_, mut r) = self.z_star_picard(t, xi, &PicardOptions::default())?;
                r.value += xi;
                Ok(r)
            }
        }
    }

    /// Direct-route `H` under caller-supplied integrator options (used by the
    /// finite-difference stencils, which want tighter tolerances).
    pub fn map_h_with_opts(
        &self,
        t: f64,
        xi: &DVector<f64>,
        opts: &IntegratorOptions,
    ) -> Result<DVector<f64>, OdeError> {
        Ok(xi + self.z_star_ivp_opts(t, xi, opts)?.value)
    }

    /// `w*(t; (t, eta))`: the perturbed backward solution is frozen, then
    /// `w' = A(t)w - f(t, y(t))` runs forward from `w(0) = 0`.
    pub fn w_star(&self, t: f64, eta: &DVector<f64>) -> Result<ConjugacyResult, OdeError> {
        self.w_star_opts(t, eta, self.lin.opts())
    }

    fn w_star_opts(
        &self,
        t: f64,
        eta: &DVector<f64>,
        opts: &IntegratorOptions,
    ) -> Result<ConjugacyResult, OdeError> {
        if t == 0.0 {
            return Ok(ConjugacyResult {
                value: DVector::zeros(self.n()),
                method: SolveMethod::Ivp,
                iterations: None,
                residual: 0.0,
            });
        }
        let y_dense = integrate_ivp(
            &IvpProblem {
                field: &|r: f64, y: &State| self.lin.a(r) * y + self.pert.f(r, y),
                t0: t,
                state0: eta.clone(),
                t1: 0.0,
            },
            opts,
        )?;
        let lin = &self.lin;
        let pert = &self.pert;
        let field = move |r: f64, w: &State| -> State {
            let rc = r.clamp(0.0, t);
            let y = y_dense.eval(rc).unwrap_or_else(|_| DVector::from_element(w.len(), f64::NAN));
            lin.a(r) * w - pert.f(r, &y)
        };
        let traj = integrate_ivp(
            &IvpProblem { field: &field, t0: 0.0, state0: DVector::zeros(self.n()), t1: t },
            opts,
        )?;
        Ok(ConjugacyResult {
            value: traj.eval(t)?,
            method: SolveMethod::Ivp,
            iterations: None,
            residual: traj.stats().max_local_error,
        })
    }

    /// `G(t, eta) = eta + w*(t; (t, eta))`.
    pub fn map_g(&self, t: f64, eta: &DVector<f64>) -> Result<ConjugacyResult, OdeError> {
        let mut r = self.w_star(t, eta)?;
        r.value += eta;
        Ok(r)
    }

    pub fn map_g_with_opts(
        &self,
        t: f64,
        eta: &DVector<f64>,
        opts: &IntegratorOptions,
    ) -> Result<DVector<f64>, OdeError> {
        Ok(eta + self.w_star_opts(t, eta, opts)?.value)
    }

    /// Fixed-point iterates of the integral operator, stopping when the
    /// sup-norm increment drops below `opts.tol`. Returns the endpoint
    /// sequence `z_j(tau)` and the converged result.
    pub fn z_star_picard(
        &self,
        tau: f64,
        xi: &DVector<f64>,
        opts: &PicardOptions,
    ) -> Result<(Vec<DVector<f64>>, ConjugacyResult), ConjugacyError> {
        let run = picard_core(&self.lin, &self.pert, tau, xi, opts, StopRule::Converge)?;
        if !run.converged {
            return Err(ConjugacyError::NoConvergence {
                increment: *run.increments.last().unwrap_or(&f64::NAN),
                tol: opts.tol,
                j: run.iterates.len().saturating_sub(1),
            });
        }
        let endpoints = run.endpoints();
        let result = ConjugacyResult {
            value: endpoints.last().unwrap().clone(),
            method: SolveMethod::Picard,
            iterations: Some(run.iterates.len()),
            residual: *run.increments.last().unwrap(),
        };
        Ok((endpoints, result))
    }

    /// Fixed-point run with full iterate tables (for bound certificates).
    pub fn picard_run(&self, tau: f64, xi: &DVector<f64>, opts: &PicardOptions) -> Result<PicardRun, OdeError> {
        picard_core(&self.lin, &self.pert, tau, xi, opts, StopRule::Converge)
    }

    /// Residual of substituting the direct-route `z*` back into the integral
    /// operator: `|Gamma(z*)(tau) - z*(tau)|`.
    pub fn fixed_point_residual(&self, tau: f64, xi: &DVector<f64>) -> Result<f64, OdeError> {
        if tau == 0.0 {
            return Ok(0.0);
        }
        let z_traj = self.z_trajectory(tau, xi)?;
        let x_dense = self.linear_backward_dense(tau, xi)?;
        let z_at = |r: f64| z_traj.eval(r.clamp(0.0, tau)).unwrap_or_else(|_| DVector::from_element(self.n(), f64::NAN));
        let gamma_end = gamma_operator_endpoint(&self.lin, &self.pert, tau, &x_dense, &z_at, 1e-9)?;
        Ok((gamma_end - z_traj.eval(tau)?).norm())
    }

    /// Certificate for the two solution-carrying relations:
    /// `H[t, x(t,tau,xi)] = y(t,tau,H(tau,xi))` and
    /// `G[t, y(t,tau,eta)] = Phi(t,tau) G(tau,eta)` with `eta = xi`.
    pub fn verify_conjugacy(
        &self,
        tau: f64,
        xi: &DVector<f64>,
        t_grid: &[f64],
        tol_conj: f64,
    ) -> Result<Certificate, ConjugacyError> {
        let mut cert = self.cert("Def-3.1-conjugacy");
        let h_tau = self.map_h(tau, xi, SolveMethod::Ivp)?.value;
        let g_tau = self.map_g(tau, xi)?.value;
        for &t in t_grid {
            let x_t = self.lin.linear_solution(t, tau, xi)?;
            let lhs_h = self.map_h(t, &x_t, SolveMethod::Ivp)?.value;
            let rhs_h = self.nonlinear_solution(t, tau, &h_tau)?;
            let res_h = (&lhs_h - &rhs_h).norm();
            cert.check(
                res_h,
                tol_conj,
                Witness {
                    time: t,
                    second_time: Some(tau),
                    point: xi.iter().copied().collect(),
                    lhs: res_h,
                    rhs: tol_conj,
                },
            );

            let y_t = self.nonlinear_solution(t, tau, xi)?;
            let lhs_g = self.map_g(t, &y_t)?.value;
            let rhs_g = self.lin.transition_matrix(t, tau)? * &g_tau;
            let res_g = (&lhs_g - &rhs_g).norm();
            cert.check(
                res_g,
                tol_conj,
                Witness {
                    time: t,
                    second_time: Some(tau),
                    point: xi.iter().copied().collect(),
                    lhs: res_g,
                    rhs: tol_conj,
                },
            );
        }
        Ok(cert.finish())
    }

    /// Certificate for `G(t, H(t, .)) = id` and `H(t, G(t, .)) = id` on the
    /// sample points.
    pub fn verify_inverse(
        &self,
        t: f64,
        points: &[DVector<f64>],
        tol_inv: f64,
    ) -> Result<Certificate, ConjugacyError> {
        let mut cert = self.cert("Def-3.1-inverse");
        for p in points {
            let h = self.map_h(t, p, SolveMethod::Ivp)?.value;
            let round_gh = (self.map_g(t, &h)?.value - p).norm();
            cert.check(
                round_gh,
                tol_inv,
                Witness { time: t, second_time: None, point: p.iter().copied().collect(), lhs: round_gh, rhs: tol_inv },
            );
            let g = self.map_g(t, p)?.value;
            let round_hg = (self.map_h(t, &g, SolveMethod::Ivp)?.value - p).norm();
            cert.check(
                round_hg,
                tol_inv,
                Witness { time: t, second_time: None, point: p.iter().copied().collect(), lhs: round_hg, rhs: tol_inv },
            );
        }
        Ok(cert.finish())
    }

    /// Table of `|H|, |G|, |z*|` along the ray `r -> r * direction`, with a
    /// monotone-growth verdict per map (limit statement, probe semantics).
    pub fn growth_probe(
        &self,
        t: f64,
        direction: &DVector<f64>,
        radii: &[f64],
    ) -> Result<GrowthProbe, ConjugacyError> {
        assert!(radii.windows(2).all(|w| w[0] < w[1]), "radii must be strictly increasing");
        let u = direction / direction.norm();
        let mut rows = Vec::with_capacity(radii.len());
        for &r in radii {
            let p = &u * r;
            let z = self.z_star_ivp(t, &p)?;
            let h_norm = (&p + &z.value).norm();
            let g_norm = self.map_g(t, &p)?.value.norm();
            rows.push(GrowthRow { radius: r, h_norm, g_norm, zstar_norm: z.value.norm() });
        }
        let verdict = |vals: &dyn Fn(&GrowthRow) -> f64| -> AuditStatus {
            if rows.windows(2).all(|w| vals(&w[0]) < vals(&w[1])) {
                AuditStatus::ProbePassed
            } else {
                AuditStatus::ProbeInconclusive
            }
        };
        Ok(GrowthProbe {
            h_verdict: verdict(&|row| row.h_norm),
            g_verdict: verdict(&|row| row.g_norm),
            zstar_verdict: verdict(&|row| row.zstar_norm),
            rows,
        })
    }

    /// Observed modulus of joint continuity of `H` at `(t0, point0)`.
    pub fn continuity_probe(
        &self,
        t0: f64,
        point0: &DVector<f64>,
        deltas: &[f64],
    ) -> Result<ContinuityProbe, ConjugacyError> {
        let base = self.map_h(t0, point0, SolveMethod::Ivp)?.value;
        let u = DVector::from_element(self.n(), 1.0 / (self.n() as f64).sqrt());
        let mut rows = Vec::with_capacity(deltas.len());
        for &d in deltas {
            let mut candidates: Vec<(f64, DVector<f64>)> = vec![
                (t0 + d, point0.clone()),
                (t0, point0 + &u * d),
                (t0 + 0.5 * d, point0 + &u * (0.5 * d)),
            ];
            if t0 - d >= 0.0 {
                candidates.push((t0 - d, point0.clone()));
            }
            let mut max_diff = 0.0f64;
            for (t, p) in candidates {
                let v = self.map_h(t, &p, SolveMethod::Ivp)?.value;
                max_diff = max_diff.max((v - &base).norm());
            }
            rows.push((d, max_diff));
        }
        // Log-log slope of the observed modulus.
        let pts: Vec<(f64, f64)> = rows
            .iter()
            .filter(|(d, diff)| *d > 0.0 && *diff > 0.0)
            .map(|(d, diff)| (d.ln(), diff.ln()))
            .collect();
        let slope = if pts.len() >= 2 {
            let nn = pts.len() as f64;
            let sx: f64 = pts.iter().map(|p| p.0).sum();
            let sy: f64 = pts.iter().map(|p| p.1).sum();
            let sxx: f64 = pts.iter().map(|p| p.0 * p.0).sum();
            let sxy: f64 = pts.iter().map(|p| p.0 * p.1).sum();
            (sxy - sx * sy / nn) / (sxx - sx * sx / nn)
        } else {
            f64::NAN
        };
        let monotone = rows.windows(2).all(|w| w[0].1 >= w[1].1 || w[0].0 <= w[1].0);
        Ok(ContinuityProbe { rows, slope, monotone })
    }
}

#[derive(Clone, Debug)]
pub struct GrowthRow {
    pub radius: f64,
    pub h_norm: f64,
    pub g_norm: f64,
    pub zstar_norm: f64,
}

#[derive(Clone, Debug)]
pub struct GrowthProbe {
    pub rows: Vec<GrowthRow>,
    pub h_verdict: AuditStatus,
    pub g_verdict: AuditStatus,
    pub zstar_verdict: AuditStatus,
}

#[derive(Clone, Debug)]
pub struct ContinuityProbe {
    /// `(delta, max observed |H(t,xi) - H(t0,xi0)|)` rows.
    pub rows: Vec<(f64, f64)>,
    /// Log-log slope of the observed modulus (about 1 for C^1 maps).
    pub slope: f64,
    pub monotone: bool,
}

// ---------------------------------------------------------------------------
// Fixed-point machinery
// ---------------------------------------------------------------------------

#[derive(Clone, Debug)]
pub struct PicardOptions {
    pub j_max: usize,
    pub tol: f64,
    /// Grid resolution for the iterate functions on `[0, tau]`.
    pub panels_per_unit: f64,
    pub min_panels: usize,
    /// Per-iterate quadrature budget as a fraction of `tol`.
    pub quad_tol_factor: f64,
}

impl Default for PicardOptions {
    fn default() -> Self {
        Self { j_max: 25, tol: tol::PICARD, panels_per_unit: 48.0, min_panels: 32, quad_tol_factor: 0.25 }
    }
}

/// Iterate functions `z_j` tabulated on a uniform grid over `[0, tau]`.
pub struct PicardRun {
    grid: Vec<f64>,
    iterates: Vec<Vec<DVector<f64>>>,
    increments: Vec<f64>,
    x_dense: Trajectory,
    converged: bool,
}

impl PicardRun {
    pub fn grid(&self) -> &[f64] {
        &self.grid
    }

    /// Number of stored iterates (`z_0 .. z_{count-1}`).
    pub fn iterate_count(&self) -> usize {
        self.iterates.len()
    }

    pub fn increments(&self) -> &[f64] {
        &self.increments
    }

    pub fn converged(&self) -> bool {
        self.converged
    }

    pub fn x_dense(&self) -> &Trajectory {
        &self.x_dense
    }

    /// Endpoint values `z_j(tau)`.
    pub fn endpoints(&self) -> Vec<DVector<f64>> {
        self.iterates.iter().map(|zs| zs.last().unwrap().clone()).collect()
    }

    /// Successive increment ratios; under the contraction they are bounded
    /// by `K gamma / alpha`.
    pub fn ratios(&self) -> Vec<f64> {
        self.increments
            .windows(2)
            .map(|w| if w[0] > 0.0 { w[1] / w[0] } else { 0.0 })
            .collect()
    }

    /// Sup of `|z_j|` over the grid.
    pub fn sup_norm(&self, j: usize) -> f64 {
        self.iterates[j].iter().map(|z| z.norm()).fold(0.0, f64::max)
    }

    /// Cubic Lagrange interpolation of `z_j` at `s`.
    pub fn iterate_at(&self, j: usize, s: f64) -> DVector<f64> {
        interp_uniform(&self.grid, &self.iterates[j], s)
    }
}

enum StopRule {
    Converge,
    Exact { count: usize },
}

/// Raw fixed-point iterates without the smallness gate; `j_count` is the
/// highest iterate index to produce.
pub fn picard_iterates(
    lin: &LinearSystem,
    pert: &Perturbation,
    tau: f64,
    xi: &DVector<f64>,
    j_count: usize,
    opts: &PicardOptions,
) -> Result<PicardRun, OdeError> {
    picard_core(lin, pert, tau, xi, opts, StopRule::Exact { count: j_count })
}

fn picard_core(
    lin: &LinearSystem,
    pert: &Perturbation,
    tau: f64,
    xi: &DVector<f64>,
    opts: &PicardOptions,
    stop: StopRule,
) -> Result<PicardRun, OdeError> {
    let n = lin.n();
    assert!(tau >= 0.0 && tau <= lin.horizon() + 1e-12, "tau must lie within the horizon");

    let x_dense = integrate_ivp(
        &IvpProblem { field: &|r: f64, x: &State| lin.a(r) * x, t0: tau, state0: xi.clone(), t1: 0.0 },
        lin.opts(),
    )?;

    if tau == 0.0 {
        return Ok(PicardRun {
            grid: vec![0.0],
            iterates: vec![vec![DVector::zeros(n)]],
            increments: vec![0.0],
            x_dense,
            converged: true,
        });
    }

    let m = (opts.panels_per_unit * tau).ceil().max(opts.min_panels as f64) as usize;
    let grid: Vec<f64> = (0..=m).map(|k| tau * (k as f64 / m as f64)).collect();

    let psi = lin.fundamental()?;
    let psi_mat = |s: f64| -> Result<DMatrix<f64>, OdeError> {
        Ok(crate::ode::unflatten_matrix(&psi.eval(s.clamp(0.0, lin.horizon()))?, 0, n, n))
    };
    // Per-node factors for the panel recurrence.
    let mut psi_nodes = Vec::with_capacity(m + 1);
    let mut psi_inv_nodes = Vec::with_capacity(m + 1);
    for &s in &grid {
        let p = psi_mat(s)?;
        let inv = p.clone().try_inverse().ok_or(OdeError::NonFiniteState { t: s })?;
        psi_nodes.push(p);
        psi_inv_nodes.push(inv);
    }

    let x_at = |r: f64| -> DVector<f64> {
        x_dense.eval(r.clamp(0.0, tau)).unwrap_or_else(|_| DVector::from_element(n, f64::NAN))
    };

    // Quadrature budget scales with the trajectory magnitude so the error
    // estimates stay above the integrand's rounding floor at large |xi|.
    let scale = 1.0 + x_dense.states().iter().map(|s| s.norm()).fold(0.0, f64::max);
    let quad_tol = (opts.tol * opts.quad_tol_factor / m as f64).max(1e-14) * scale;
    let mut z_prev: Vec<DVector<f64>> = vec![DVector::zeros(n); m + 1];
    let mut iterates: Vec<Vec<DVector<f64>>> = Vec::new();
    let mut increments: Vec<f64> = Vec::new();
    let mut converged = false;

    let max_iters = match stop {
        StopRule::Converge => opts.j_max,
        StopRule::Exact { count } => count,
    };

    for _j in 0..=max_iters {
        let mut z_next: Vec<DVector<f64>> = Vec::with_capacity(m + 1);
        z_next.push(DVector::zeros(n));
        let mut w = DVector::zeros(n);
        for k in 0..m {
            let (a, b) = (grid[k], grid[k + 1]);
            let integrand = |r: f64| -> DVector<f64> {
                let x = x_at(r);
                let z = interp_uniform(&grid, &z_prev, r);
                let fv = pert.f(r, &(x + z));
                match psi_mat(r) {
                    Ok(p) => match p.try_inverse() {
                        Some(inv) => inv * fv,
                        None => DVector::from_element(n, f64::NAN),
                    },
                    Err(_) => DVector::from_element(n, f64::NAN),
                }
            };
            let integral = adaptive_simpson(&integrand, a, b, quad_tol);
            let panel = &psi_nodes[k + 1] * integral;
            let phi_local = &psi_nodes[k + 1] * &psi_inv_nodes[k];
            w = phi_local * w + panel;
            if !w.iter().all(|v| v.is_finite()) {
                return Err(OdeError::NonFiniteState { t: b });
            }
            z_next.push(w.clone());
        }

        let increment = z_next
            .iter()
            .zip(&z_prev)
            .map(|(a, b)| (a - b).amax())
            .fold(0.0, f64::max);
        increments.push(increment);
        iterates.push(z_next.clone());
        z_prev = z_next;

        match stop {
            StopRule::Converge => {
                if increment <= opts.tol {
                    converged = true;
                    break;
                }
            }
            StopRule::Exact { .. } => {}
        }
    }
    if matches!(stop, StopRule::Exact { .. }) {
        converged = true;
    }

    Ok(PicardRun { grid, iterates, increments, x_dense, converged })
}

/// Endpoint of the integral operator applied to a known function `z`:
/// `Gamma(z)(tau) = int_0^tau Phi(tau, r) f(r, x(r) + z(r)) dr`,
/// accumulated per panel through the local flow factors.
fn gamma_operator_endpoint(
    lin: &LinearSystem,
    pert: &Perturbation,
    tau: f64,
    x_dense: &Trajectory,
    z_at: &dyn Fn(f64) -> DVector<f64>,
    quad_tol: f64,
) -> Result<DVector<f64>, OdeError> {
    let n = lin.n();
    let m = (48.0 * tau).ceil().max(32.0) as usize;
    let grid: Vec<f64> = (0..=m).map(|k| tau * (k as f64 / m as f64)).collect();
    let psi = lin.fundamental()?;
    let psi_mat = |s: f64| -> Result<DMatrix<f64>, OdeError> {
        Ok(crate::ode::unflatten_matrix(&psi.eval(s.clamp(0.0, lin.horizon()))?, 0, n, n))
    };
    let scale = 1.0 + x_dense.states().iter().map(|s| s.norm()).fold(0.0, f64::max);
    let mut w = DVector::zeros(n);
    let mut psi_prev = psi_mat(grid[0])?;
    for k in 0..m {
        let (a, b) = (grid[k], grid[k + 1]);
        let integrand = |r: f64| -> DVector<f64> {
            let x = x_dense.eval(r.clamp(0.0, tau)).unwrap_or_else(|_| DVector::from_element(n, f64::NAN));
            let fv = pert.f(r, &(x + z_at(r)));
            match psi_mat(r) {
                Ok(p) => match p.try_inverse() {
                    Some(inv) => inv * fv,
                    None => DVector::from_element(n, f64::NAN),
                },
                Err(_) => DVector::from_element(n, f64::NAN),
            }
        };
        let integral = adaptive_simpson(&integrand, a, b, quad_tol * scale / m as f64);
        let psi_next = psi_mat(b)?;
        let phi_local = &psi_next
            * psi_prev.clone().try_inverse().ok_or(OdeError::NonFiniteState { t: a })?;
        w = phi_local * w + psi_next.clone() * integral;
        psi_prev = psi_next;
        if !w.iter().all(|v| v.is_finite()) {
            return Err(OdeError::NonFiniteState { t: b });
        }
    }
    Ok(w)
}

/// Piecewise cubic Lagrange interpolation on a uniform grid.
fn interp_uniform(grid: &[f64], values: &[DVector<f64>], s: f64) -> DVector<f64> {
    let m = grid.len() - 1;
    if m == 0 {
        return values[0].clone();
    }
    let h = grid[m] / m as f64;
    let pos = (s / h).clamp(0.0, m as f64);
    let k = (pos.floor() as usize).min(m - 1);
    if m < 3 {
        // Linear fallback for coarse grids.
        let th = pos - k as f64;
        return &values[k] * (1.0 - th) + &values[k + 1] * th;
    }
    let i0 = k.saturating_sub(1).min(m - 3);
    let u = pos - i0 as f64; // in [0, 3]
    let mut out = DVector::zeros(values[0].len());
    for (offset, node) in values[i0..i0 + 4].iter().enumerate() {
        let mut weight = 1.0;
        for other in 0..4 {
            if other != offset {
                weight *= (u - other as f64) / (offset as f64 - other as f64);
            }
        }
        out += node * weight;
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use nalgebra::DMatrix;

    fn scalar_system(c: f64) -> CoupledSystem {
        let lin = Arc::new(LinearSystem::new(
            1,
            Arc::new(|_t| DMatrix::from_element(1, 1, -1.0)),
            5.0,
        ));
        let pert = Arc::new(Perturbation::from_closures(
            1,
            Arc::new(move |_t, x: &DVector<f64>| x * c),
            Arc::new(move |_t, _x: &DVector<f64>| DMatrix::from_element(1, 1, c)),
            Arc::new(|_t, _x: &DVector<f64>| vec![DMatrix::zeros(1, 1)]),
        ));
        let constants = SystemConstants { k: 1.0, alpha: 1.0, m: 1.0, gamma: c, mu: 0.0 };
        CoupledSystem::new(lin, pert, constants).unwrap()
    }

    fn zero_system() -> CoupledSystem {
        let lin = Arc::new(LinearSystem::new(
            1,
            Arc::new(|_t| DMatrix::from_element(1, 1, -1.0)),
            5.0,
        ));
        let pert = Arc::new(Perturbation::from_closures(
            1,
            Arc::new(|_t, _x: &DVector<f64>| DVector::zeros(1)),
            Arc::new(|_t, _x: &DVector<f64>| DMatrix::zeros(1, 1)),
            Arc::new(|_t, _x: &DVector<f64>| vec![DMatrix::zeros(1, 1)]),
        ));
        let constants = SystemConstants { k: 1.0, alpha: 1.0, m: 1.0, gamma: 0.0, mu: 0.0 };
        CoupledSystem::new(lin, pert, constants).unwrap()
    }

    fn v(x: f64) -> DVector<f64> {
        DVector::from_element(1, x)
    }

    #[test]
    fn smallness_gate() {
        let lin = Arc::new(LinearSystem::new(
            1,
            Arc::new(|_t| DMatrix::from_element(1, 1, -1.0)),
            5.0,
        ));
        let pert = Arc::new(Perturbation::from_closures(
            1,
            Arc::new(|_t, x: &DVector<f64>| x * 2.0),
            Arc::new(|_t, _x: &DVector<f64>| DMatrix::from_element(1, 1, 2.0)),
            Arc::new(|_t, _x: &DVector<f64>| vec![DMatrix::zeros(1, 1)]),
        ));
        let constants = SystemConstants { k: 1.0, alpha: 1.0, m: 1.0, gamma: 2.0, mu: 0.0 };
        assert!(matches!(
            CoupledSystem::new(Arc::clone(&lin), Arc::clone(&pert), constants),
            Err(ConjugacyError::SmallnessViolated { .. })
        ));
        let unchecked = CoupledSystem::new_unchecked(lin, pert, constants);
        assert!(unchecked.outside_theorem());
    }

    #[test]
    fn nonlinear_solution_values() {
        let cs = scalar_system(0.25);
        assert_eq!(cs.nonlinear_solution(2.0, 2.0, &v(1.0)).unwrap()[0], 1.0);
        assert_relative_eq!(
            cs.nonlinear_solution(2.0, 0.0, &v(1.0)).unwrap()[0],
            (-1.5f64).exp(),
            max_relative = 1e-8
        );
        assert_relative_eq!(
            cs.nonlinear_solution(0.0, 2.0, &v(1.0)).unwrap()[0],
            1.5f64.exp(),
            max_relative = 1e-8
        );
    }

    #[test]
    fn z_star_closed_form() {
        let cs = scalar_system(0.25);
        // Vanishing perturbation.
        let zs = zero_system();
        assert_eq!(zs.z_star_ivp(1.3, &v(2.0)).unwrap().value[0], 0.0);
        // z*(tau; (tau, xi)) = xi (e^{0.25 tau} - 1) for the linear quarter.
        let z = cs.z_star_ivp(1.0, &v(2.0)).unwrap().value[0];
        assert_relative_eq!(z, 2.0 * (0.25f64.exp() - 1.0), max_relative = 1e-7);
        // Empty interval.
        assert_eq!(cs.z_star_ivp(0.0, &v(3.0)).unwrap().value[0], 0.0);
    }

    #[test]
    fn picard_first_iterate_and_contraction() {
        let cs = scalar_system(0.25);
        let run = cs.picard_run(1.0, &v(2.0), &PicardOptions::default()).unwrap();
        // z_0(tau) = 0.25 xi tau: the flow factors cancel the backward growth.
        let endpoints = run.endpoints();
        assert_relative_eq!(endpoints[0][0], 0.5, max_relative = 1e-7);
        assert!(run.converged());
        // Increment ratios bounded by the contraction constant plus slack.
        for (j, r) in run.ratios().iter().enumerate() {
            if j >= 1 && run.increments()[j + 1] > 1e-12 {
                assert!(*r <= 0.25 + 0.05, "ratio {r} at step {j}");
            }
        }
    }

    #[test]
    fn picard_of_zero_perturbation_is_zero() {
        let cs = zero_system();
        let run = cs.picard_run(1.0, &v(2.0), &PicardOptions::default()).unwrap();
        for j in 0..run.iterate_count() {
            assert_eq!(run.sup_norm(j), 0.0);
        }
    }

    #[test]
    fn picard_matches_ivp() {
        let cs = scalar_system(0.25);
        let (endpoints, result) = cs.z_star_picard(1.0, &v(2.0), &PicardOptions::default()).unwrap();
        let direct = cs.z_star_ivp(1.0, &v(2.0)).unwrap();
        assert!((result.value[0] - direct.value[0]).abs() <= 1e-7);
        assert!(endpoints.len() >= 2);
    }

    #[test]
    fn map_h_values() {
        let cs = scalar_system(0.25);
        assert_eq!(cs.map_h(0.0, &v(2.0), SolveMethod::Ivp).unwrap().value[0], 2.0);
        assert_relative_eq!(
            cs.map_h(1.0, &v(2.0), SolveMethod::Ivp).unwrap().value[0],
            2.0 * 0.25f64.exp(),
            max_relative = 1e-8
        );
        let zs = zero_system();
        assert_eq!(zs.map_h(2.0, &v(2.0), SolveMethod::Ivp).unwrap().value[0], 2.0);
    }

    #[test]
    fn map_g_values() {
        let cs = scalar_system(0.25);
        assert_eq!(cs.map_g(0.0, &v(2.0)).unwrap().value[0], 2.0);
        let eta = 2.0 * 0.25f64.exp();
        assert_relative_eq!(cs.map_g(1.0, &v(eta)).unwrap().value[0], 2.0, max_relative = 1e-8);
        let zs = zero_system();
        assert_eq!(zs.map_g(1.5, &v(2.0)).unwrap().value[0], 2.0);
    }

    #[test]
    fn conjugacy_certificates() {
        let zs = zero_system();
        let cert = zs.verify_conjugacy(1.0, &v(2.0), &[0.0, 0.5, 1.0, 2.0], 1e-6).unwrap();
        assert!(cert.pass, "zero perturbation residual {:?}", cert.worst_margin);

        let cs = scalar_system(0.25);
        let cert = cs.verify_conjugacy(1.0, &v(2.0), &[0.0, 0.5, 1.0, 2.0, 5.0], tol::CONJ).unwrap();
        assert!(cert.pass, "worst margin {}", cert.worst_margin);
    }

    #[test]
    fn inverse_certificates() {
        let cs = scalar_system(0.25);
        let cert = cs
            .verify_inverse(0.0, &[v(-3.0), v(0.0), v(3.0)], 1e-12)
            .unwrap();
        assert!(cert.pass);
        let pts: Vec<DVector<f64>> = [-3.0, -1.0, 0.0, 1.0, 3.0].iter().map(|&x| v(x)).collect();
        let cert = cs.verify_inverse(1.0, &pts, tol::INV).unwrap();
        assert!(cert.pass, "worst margin {}", cert.worst_margin);
    }

    #[test]
    fn growth_probe_linear() {
        let cs = scalar_system(0.25);
        let probe = cs.growth_probe(1.0, &v(1.0), &[1.0, 10.0, 100.0]).unwrap();
        assert_eq!(probe.h_verdict, AuditStatus::ProbePassed);
        assert_eq!(probe.g_verdict, AuditStatus::ProbePassed);
        assert_eq!(probe.zstar_verdict, AuditStatus::ProbePassed);
        // |H(1, r)| = r e^{0.25}.
        for row in &probe.rows {
            assert_relative_eq!(row.h_norm, row.radius * 0.25f64.exp(), max_relative = 1e-7);
        }
        let zs = zero_system();
        let probe = zs.growth_probe(1.0, &v(1.0), &[1.0, 10.0, 100.0]).unwrap();
        for row in &probe.rows {
            assert_relative_eq!(row.h_norm, row.radius, epsilon = 1e-12);
        }
    }

    #[test]
    fn continuity_probe_shrinks_linearly() {
        let cs = scalar_system(0.25);
        let deltas: Vec<f64> = (1..=8).map(|k| 0.5f64.powi(k)).collect();
        let probe = cs.continuity_probe(1.0, &v(2.0), &deltas).unwrap();
        assert!(probe.monotone);
        assert!((probe.slope - 1.0).abs() < 0.15, "slope {}", probe.slope);
        assert!(probe.rows.last().unwrap().1 < 1e-2);
        // Zero offset reproduces the base point exactly.
        let trivial = cs.continuity_probe(1.0, &v(2.0), &[0.0]).unwrap();
        assert_eq!(trivial.rows[0].1, 0.0);
    }

    #[test]
    fn continuity_probe_reaches_tolerance_on_softplus() {
        let lin = Arc::new(LinearSystem::new(
            1,
            Arc::new(|_t| DMatrix::from_element(1, 1, -1.0)),
            5.0,
        ));
        let pert = Arc::new(
            crate::perturbation::Perturbation::from_dsl(
                &["0.2*(sqrt(1+x1^2)+cos(t))".into()],
                1,
            )
            .unwrap(),
        );
        let cs = CoupledSystem::new(
            lin,
            pert,
            SystemConstants { k: 1.0, alpha: 1.0, m: 1.0, gamma: 0.2, mu: 0.4 },
        )
        .unwrap();
        let deltas: Vec<f64> = [4, 8, 12, 16, 22].iter().map(|&k| 0.5f64.powi(k)).collect();
        let probe = cs.continuity_probe(0.5, &v(1.0), &deltas).unwrap();
        assert!(probe.monotone);
        assert!(probe.rows.last().unwrap().1 <= 1e-6, "final diff {}", probe.rows.last().unwrap().1);
    }

    #[test]
    fn growth_probe_softplus_zstar_unbounded() {
        let lin = Arc::new(LinearSystem::new(
            1,
            Arc::new(|_t| DMatrix::from_element(1, 1, -1.0)),
            5.0,
        ));
        let pert = Arc::new(
            crate::perturbation::Perturbation::from_dsl(
                &["0.2*(sqrt(1+x1^2)+cos(t))".into()],
                1,
            )
            .unwrap(),
        );
        let cs = CoupledSystem::new(
            lin,
            pert,
            SystemConstants { k: 1.0, alpha: 1.0, m: 1.0, gamma: 0.2, mu: 0.4 },
        )
        .unwrap();
        let probe = cs.growth_probe(1.0, &v(1.0), &[1.0, 10.0, 100.0, 1000.0]).unwrap();
        assert_eq!(probe.zstar_verdict, AuditStatus::ProbePassed);
        assert_eq!(probe.h_verdict, AuditStatus::ProbePassed);
    }

    #[test]
    fn fixed_point_residual_is_small() {
        let cs = scalar_system(0.25);
        let res = cs.fixed_point_residual(1.0, &v(2.0)).unwrap();
        assert!(res <= 1e-7, "residual {res}");
        assert_eq!(cs.fixed_point_residual(0.0, &v(2.0)).unwrap(), 0.0);
    }

    #[test]
    fn no_convergence_outside_contraction() {
        let lin = Arc::new(LinearSystem::new(
            1,
            Arc::new(|_t| DMatrix::from_element(1, 1, -1.0)),
            5.0,
        ));
        let pert = Arc::new(Perturbation::from_closures(
            1,
            Arc::new(|_t, x: &DVector<f64>| x * 2.0),
            Arc::new(|_t, _x: &DVector<f64>| DMatrix::from_element(1, 1, 2.0)),
            Arc::new(|_t, _x: &DVector<f64>| vec![DMatrix::zeros(1, 1)]),
        ));
        let constants = SystemConstants { k: 1.0, alpha: 1.0, m: 1.0, gamma: 2.0, mu: 0.0 };
        let cs = CoupledSystem::new_unchecked(lin, pert, constants);
        let opts = PicardOptions { j_max: 8, ..PicardOptions::default() };
        assert!(matches!(
            cs.z_star_picard(3.0, &v(2.0), &opts),
            Err(ConjugacyError::NoConvergence { .. })
        ));
    }
}
