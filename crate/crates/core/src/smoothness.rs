//! Variational equations, Jacobians and Hessians of the equivalence maps,
//! and finite-difference validation.
//!
//! First variation: `Y(s) = dy(s,t,eta)/deta` solves
//! `Y' = {A(s) + Df(s, y)} Y, Y(t) = I`, integrated backward alongside `y`.
//! The Jacobian of `G` is evaluated by two routes that must agree:
//!
//! * `DG(t, eta) = Phi(t, 0) Y(0)` (endpoint form), and
//! * `DG(t, eta) = I - int_0^t Phi(t,s) Df(s, y) Y(s) ds` (integral form),
//!
//! their discrepancy is a solver health check. `DH(t, xi) = DG(t, H(t,xi))^-1`.
//!
//! Second variation: `W_{.;ji}' = {A + Df} W_{.;ji} + D2f (Y e_j)(Y e_i)`,
//! zero data at `s = t`, integrated in the same augmented pass; then
//! `D2G = Phi(t,0) W(0)` and `D2H` follows from differentiating the inverse
//! identity: `(D2H)_{i;jk} = - sum_{a,b,c} DH_{ia} (D2G)_{a;bc} DH_{bj} DH_{ck}`
//! with `D2G` taken at the image point. Tensor indices are
//! `(component; d eta_j, d eta_k)`, flattened row-major.
//!
//! Derivatives of order three and up follow the same recursion (differentiate
//! the variational system once more and contract through the inverse
//! identity); they are not implemented here.

use nalgebra::{DMatrix, DVector};
use thiserror::Error;

use crate::conjugacy::{ConjugacyError, CoupledSystem, SolveMethod};
use crate::ode::{integrate_ivp, unflatten_matrix, IntegratorOptions, IvpProblem, OdeError, State, Trajectory};
use crate::quad::adaptive_simpson;

#[derive(Debug, Error)]
pub enum SmoothnessError {
    #[error(transparent)]
    Ode(#[from] OdeError),
    #[error(transparent)]
    Conjugacy(#[from] ConjugacyError),
    #[error("{what} disagree by {error:.3e} (tolerance {tol:.3e})")]
    DerivativeMismatch { what: String, error: f64, tol: f64 },
    #[error("Jacobian determinant {det:.3e} at or below the positivity floor")]
    SingularJacobian { det: f64 },
}

#[derive(Clone, Debug)]
pub struct SmoothnessOptions {
    /// Quadrature tolerance for the integral-form Jacobian.
    pub quad_tol: f64,
    /// Allowed discrepancy between the two Jacobian routes.
    pub mismatch_tol: f64,
    pub fd_step_jacobian: f64,
    pub fd_step_hessian: f64,
    /// Integrator tolerance for finite-difference stencil evaluations
    /// (tighter than the default so stencil errors stay correlated).
    pub fd_integrator_tol: f64,
    pub det_floor: f64,
    /// Allowed relative disagreement between Hessians and second differences.
    pub hessian_fd_tol: f64,
}

impl Default for SmoothnessOptions {
    fn default() -> Self {
        Self {
            quad_tol: 1e-7,
            mismatch_tol: 1e-5,
            fd_step_jacobian: 1e-5,
            fd_step_hessian: 1e-3,
            fd_integrator_tol: 1e-11,
            det_floor: 1e-12,
            hessian_fd_tol: 1e-3,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MapKind {
    H,
    G,
}

#[derive(Clone, Debug, Default)]
pub struct CrossCheck {
    /// Endpoint-form vs integral-form Jacobian discrepancy.
    pub machine_vs_direct: Option<f64>,
    /// Normalized disagreement with the finite-difference stencil.
    pub fd_error: Option<f64>,
    pub det: Option<f64>,
    pub cond: Option<f64>,
    /// `||DH * DG(image) - I||` for bundles of `H`.
    pub identity_residual: Option<f64>,
    /// Max asymmetry of the Hessian in its trailing indices.
    pub symmetry_defect: Option<f64>,
}

/// Jacobian (order 1) or Jacobian plus Hessian (order 2) of `H` or `G`.
#[derive(Clone, Debug)]
pub struct DerivativeBundle {
    pub order: u8,
    pub jacobian: DMatrix<f64>,
    /// `hessian[a][(j, k)] = d^2 (component a) / d eta_j d eta_k`.
    pub hessian: Option<Vec<DMatrix<f64>>>,
    pub cross_check: CrossCheck,
}

/// Dense `(y, Y)` on `[0, t]`, anchored at `(t, eta)`.
pub struct VariationalFirst {
    traj: Trajectory,
    n: usize,
    pub anchor_t: f64,
}

impl VariationalFirst {
    pub fn y_at(&self, s: f64) -> Result<DVector<f64>, OdeError> {
        Ok(self.traj.eval(s)?.rows(0, self.n).into_owned())
    }

    pub fn jacobian_at(&self, s: f64) -> Result<DMatrix<f64>, OdeError> {
        Ok(unflatten_matrix(&self.traj.eval(s)?, self.n, self.n, self.n))
    }
}

/// Dense `(y, Y, W)` on `[0, t]`.
pub struct VariationalSecond {
    traj: Trajectory,
    n: usize,
    pub anchor_t: f64,
}

impl VariationalSecond {
    pub fn y_at(&self, s: f64) -> Result<DVector<f64>, OdeError> {
        Ok(self.traj.eval(s)?.rows(0, self.n).into_owned())
    }

    pub fn jacobian_at(&self, s: f64) -> Result<DMatrix<f64>, OdeError> {
        Ok(unflatten_matrix(&self.traj.eval(s)?, self.n, self.n, self.n))
    }

    /// Tensor at `s` as one matrix `(j, i)` per component `a`.
    pub fn second_at(&self, s: f64) -> Result<Vec<DMatrix<f64>>, OdeError> {
        let n = self.n;
        let state = self.traj.eval(s)?;
        let base = n + n * n;
        Ok((0..n)
            .map(|a| DMatrix::from_fn(n, n, |j, i| state[base + a * n * n + j * n + i]))
            .collect())
    }
}

/// Backward `(y, Y)` integration from `(t, eta)` down to 0.
pub fn variational_first(cs: &CoupledSystem, t: f64, eta: &DVector<f64>) -> Result<VariationalFirst, OdeError> {
    let n = cs.n();
    let lin = cs.lin();
    let pert = cs.pert();
    let field = move |r: f64, u: &State| -> State {
        let y = u.rows(0, n).into_owned();
        let jac = unflatten_matrix(u, n, n, n);
        let a = lin.a(r) + pert.df(r, &y);
        let dy = lin.a(r) * &y + pert.f(r, &y);
        let djac = a * jac;
        let mut out = DVector::zeros(n + n * n);
        out.rows_mut(0, n).copy_from(&dy);
        for i in 0..n {
            for j in 0..n {
                out[n + i * n + j] = djac[(i, j)];
            }
        }
        out
    };
    let mut state0 = DVector::zeros(n + n * n);
    state0.rows_mut(0, n).copy_from(eta);
    for i in 0..n {
        state0[n + i * n + i] = 1.0;
    }
    let traj = integrate_ivp(&IvpProblem { field: &field, t0: t, state0, t1: 0.0 }, lin.opts())?;
    Ok(VariationalFirst { traj, n, anchor_t: t })
}

/// Backward `(y, Y, W)` integration from `(t, eta)` down to 0 in one pass.
pub fn variational_second(cs: &CoupledSystem, t: f64, eta: &DVector<f64>) -> Result<VariationalSecond, OdeError> {
    let n = cs.n();
    let lin = cs.lin();
    let pert = cs.pert();
    let field = move |r: f64, u: &State| -> State {
        let y = u.rows(0, n).into_owned();
        let jac = unflatten_matrix(u, n, n, n);
        let a_eff = lin.a(r) + pert.df(r, &y);
        let d2 = pert.d2f(r, &y);
        let mut out = DVector::zeros(n + n * n + n * n * n);
        let dy = lin.a(r) * &y + pert.f(r, &y);
        out.rows_mut(0, n).copy_from(&dy);
        let djac = &a_eff * &jac;
        for i in 0..n {
            for j in 0..n {
                out[n + i * n + j] = djac[(i, j)];
            }
        }
        let base = n + n * n;
        for j in 0..n {
            for i in 0..n {
                // w_{.;ji} column vector.
                let mut w = DVector::zeros(n);
                for a in 0..n {
                    w[a] = u[base + a * n * n + j * n + i];
                }
                let mut dw = &a_eff * w;
                for a in 0..n {
                    let mut acc = 0.0;
                    for b in 0..n {
                        for c in 0..n {
                            acc += d2[a][(b, c)] * jac[(b, j)] * jac[(c, i)];
                        }
                    }
                    dw[a] += acc;
                }
                for a in 0..n {
                    out[base + a * n * n + j * n + i] = dw[a];
                }
            }
        }
        out
    };
    let mut state0 = DVector::zeros(n + n * n + n * n * n);
    state0.rows_mut(0, n).copy_from(eta);
    for i in 0..n {
        state0[n + i * n + i] = 1.0;
    }
    let traj = integrate_ivp(&IvpProblem { field: &field, t0: t, state0, t1: 0.0 }, lin.opts())?;
    Ok(VariationalSecond { traj, n, anchor_t: t })
}

/// Jacobian of `G` by both routes, with determinant positivity and a
/// finite-difference cross-check.
pub fn jacobian_g(
    cs: &CoupledSystem,
    t: f64,
    eta: &DVector<f64>,
    opts: &SmoothnessOptions,
) -> Result<DerivativeBundle, SmoothnessError> {
    let n = cs.n();
    let var = variational_first(cs, t, eta)?;
    let machine = cs.lin().transition_matrix(t, 0.0)? * var.jacobian_at(0.0)?;
    let direct = integral_form_jacobian(cs, t, &var, opts)?;
    let mismatch = (&machine - &direct).amax();
    if mismatch > opts.mismatch_tol {
        return Err(SmoothnessError::DerivativeMismatch {
            what: "endpoint-form and integral-form Jacobians".into(),
            error: mismatch,
            tol: opts.mismatch_tol,
        });
    }

    let det = machine.clone().lu().determinant();
    if det <= opts.det_floor {
        return Err(SmoothnessError::SingularJacobian { det });
    }

    let fd = fd_jacobian_of_map(cs, MapKind::G, t, eta, opts)?;
    let fd_error = (&machine - &fd).amax() / machine.amax().max(1.0);

    let sv = machine.clone().singular_values();
    let (smax, smin) = sv.iter().fold((0.0f64, f64::INFINITY), |(ma, mi), &s| (ma.max(s), mi.min(s)));

    let _ = n;
    Ok(DerivativeBundle {
        order: 1,
        jacobian: machine,
        hessian: None,
        cross_check: CrossCheck {
            machine_vs_direct: Some(mismatch),
            fd_error: Some(fd_error),
            det: Some(det),
            cond: Some(smax / smin),
            identity_residual: None,
            symmetry_defect: None,
        },
    })
}

/// Jacobian of `H` as the inverse of `DG` at the image point.
pub fn jacobian_h(
    cs: &CoupledSystem,
    t: f64,
    xi: &DVector<f64>,
    opts: &SmoothnessOptions,
) -> Result<DerivativeBundle, SmoothnessError> {
    let image = cs.map_h(t, xi, SolveMethod::Ivp)?.value;
    let g_bundle = jacobian_g(cs, t, &image, opts)?;
    let det = g_bundle.cross_check.det.unwrap();
    let dh = g_bundle
        .jacobian
        .clone()
        .try_inverse()
        .ok_or(SmoothnessError::SingularJacobian { det })?;
    let identity_residual = (&dh * &g_bundle.jacobian - DMatrix::identity(cs.n(), cs.n())).amax();

    let fd = fd_jacobian_of_map(cs, MapKind::H, t, xi, opts)?;
    let fd_error = (&dh - &fd).amax() / dh.amax().max(1.0);

    Ok(DerivativeBundle {
        order: 1,
        jacobian: dh,
        hessian: None,
        cross_check: CrossCheck {
            machine_vs_direct: g_bundle.cross_check.machine_vs_direct,
            fd_error: Some(fd_error),
            det: Some(det),
            cond: g_bundle.cross_check.cond,
            identity_residual: Some(identity_residual),
            symmetry_defect: None,
        },
    })
}

/// `D2G = Phi(t,0) W(0)` with a second-difference cross-check.
pub fn hessian_g(
    cs: &CoupledSystem,
    t: f64,
    eta: &DVector<f64>,
    opts: &SmoothnessOptions,
) -> Result<DerivativeBundle, SmoothnessError> {
    let n = cs.n();
    let var = variational_second(cs, t, eta)?;
    let phi = cs.lin().transition_matrix(t, 0.0)?;
    let jacobian = &phi * var.jacobian_at(0.0)?;
    let w0 = var.second_at(0.0)?;
    let hessian: Vec<DMatrix<f64>> = (0..n)
        .map(|a| {
            let mut h = DMatrix::zeros(n, n);
            for b in 0..n {
                h += &w0[b] * phi[(a, b)];
            }
            h
        })
        .collect();

    let symmetry_defect = hessian
        .iter()
        .map(|h| (h - h.transpose()).amax())
        .fold(0.0, f64::max);

    let fd = fd_hessian_of_map(cs, MapKind::G, t, eta, opts)?;
    let scale = hessian.iter().map(|h| h.amax()).fold(0.0f64, f64::max).max(1.0);
    let fd_error = hessian
        .iter()
        .zip(&fd)
        .map(|(a, b)| (a - b).amax())
        .fold(0.0, f64::max)
        / scale;
    if fd_error > opts.hessian_fd_tol {
        return Err(SmoothnessError::DerivativeMismatch {
            what: "Hessian and second central differences".into(),
            error: fd_error,
            tol: opts.hessian_fd_tol,
        });
    }

    let det = jacobian.clone().lu().determinant();
    Ok(DerivativeBundle {
        order: 2,
        jacobian,
        hessian: Some(hessian),
        cross_check: CrossCheck {
            machine_vs_direct: None,
            fd_error: Some(fd_error),
            det: Some(det),
            cond: None,
            identity_residual: None,
            symmetry_defect: Some(symmetry_defect),
        },
    })
}

/// `D2H` by contracting `D2G` at the image point through `DH`.
pub fn hessian_h(
    cs: &CoupledSystem,
    t: f64,
    xi: &DVector<f64>,
    opts: &SmoothnessOptions,
) -> Result<DerivativeBundle, SmoothnessError> {
    let n = cs.n();
    let image = cs.map_h(t, xi, SolveMethod::Ivp)?.value;
    let g2 = hessian_g(cs, t, &image, opts)?;
    let det = g2.cross_check.det.unwrap();
    let dh = g2
        .jacobian
        .clone()
        .try_inverse()
        .ok_or(SmoothnessError::SingularJacobian { det })?;
    let d2g = g2.hessian.as_ref().unwrap();

    let mut hessian = Vec::with_capacity(n);
    for i in 0..n {
        let mut h = DMatrix::zeros(n, n);
        for j in 0..n {
            for k in 0..n {
                let mut acc = 0.0;
                for a in 0..n {
                    for b in 0..n {
                        for c in 0..n {
                            acc += dh[(i, a)] * d2g[a][(b, c)] * dh[(b, j)] * dh[(c, k)];
                        }
                    }
                }
                h[(j, k)] = -acc;
            }
        }
        hessian.push(h);
    }

    let symmetry_defect = hessian
        .iter()
        .map(|h| (h - h.transpose()).amax())
        .fold(0.0, f64::max);

    let fd = fd_hessian_of_map(cs, MapKind::H, t, xi, opts)?;
    let scale = hessian.iter().map(|h| h.amax()).fold(0.0f64, f64::max).max(1.0);
    let fd_error = hessian
        .iter()
        .zip(&fd)
        .map(|(a, b)| (a - b).amax())
        .fold(0.0, f64::max)
        / scale;
    if fd_error > opts.hessian_fd_tol {
        return Err(SmoothnessError::DerivativeMismatch {
            what: "Hessian and second central differences".into(),
            error: fd_error,
            tol: opts.hessian_fd_tol,
        });
    }

    Ok(DerivativeBundle {
        order: 2,
        jacobian: dh,
        hessian: Some(hessian),
        cross_check: CrossCheck {
            machine_vs_direct: None,
            fd_error: Some(fd_error),
            det: Some(det),
            cond: None,
            identity_residual: None,
            symmetry_defect: Some(symmetry_defect),
        },
    })
}

/// Error-vs-step table of central differences against the analytic
/// derivatives, for each requested order.
pub fn fd_validate(
    map: MapKind,
    cs: &CoupledSystem,
    t: f64,
    point: &DVector<f64>,
    orders: &[u8],
    steps: &[f64],
    opts: &SmoothnessOptions,
) -> Result<FdReport, SmoothnessError> {
    assert!(steps.windows(2).all(|w| w[0] > w[1]), "steps must be strictly decreasing");
    let mut rows = Vec::new();
    let mut best = Vec::new();
    for &order in orders {
        let mut best_row: Option<FdRow> = None;
        match order {
            1 => {
                let analytic = match map {
                    MapKind::G => jacobian_g(cs, t, point, opts)?.jacobian,
                    MapKind::H => jacobian_h(cs, t, point, opts)?.jacobian,
                };
                let scale = analytic.amax().max(1.0);
                for &h in steps {
                    let o = SmoothnessOptions { fd_step_jacobian: h, ..opts.clone() };
                    let fd = fd_jacobian_of_map(cs, map, t, point, &o)?;
                    let error = (&analytic - &fd).amax() / scale;
                    let row = FdRow { order, step: h, error };
                    if best_row.as_ref().is_none_or(|b| error < b.error) {
                        best_row = Some(row.clone());
                    }
                    rows.push(row);
                }
            }
            2 => {
                let analytic = match map {
                    MapKind::G => hessian_g(cs, t, point, opts)?.hessian.unwrap(),
                    MapKind::H => hessian_h(cs, t, point, opts)?.hessian.unwrap(),
                };
                let scale = analytic.iter().map(|m| m.amax()).fold(0.0f64, f64::max).max(1.0);
                for &h in steps {
                    let o = SmoothnessOptions { fd_step_hessian: h, ..opts.clone() };
                    let fd = fd_hessian_of_map(cs, map, t, point, &o)?;
                    let error = analytic
                        .iter()
                        .zip(&fd)
                        .map(|(a, b)| (a - b).amax())
                        .fold(0.0, f64::max)
                        / scale;
                    let row = FdRow { order, step: h, error };
                    if best_row.as_ref().is_none_or(|b| error < b.error) {
                        best_row = Some(row.clone());
                    }
                    rows.push(row);
                }
            }
            other => panic!("unsupported derivative order {other}"),
        }
        best.push(best_row.unwrap());
    }
    Ok(FdReport { rows, best })
}

#[derive(Clone, Debug)]
pub struct FdRow {
    pub order: u8,
    pub step: f64,
    pub error: f64,
}

#[derive(Clone, Debug)]
pub struct FdReport {
    pub rows: Vec<FdRow>,
    /// Minimum-error row per requested order.
    pub best: Vec<FdRow>,
}

// ---------------------------------------------------------------------------
// Internals
// ---------------------------------------------------------------------------

fn integral_form_jacobian(
    cs: &CoupledSystem,
    t: f64,
    var: &VariationalFirst,
    opts: &SmoothnessOptions,
) -> Result<DMatrix<f64>, OdeError> {
    let n = cs.n();
    if t == 0.0 {
        return Ok(DMatrix::identity(n, n));
    }
    let lin = cs.lin();
    let psi = lin.fundamental()?;
    let psi_at = |s: f64| -> Result<DMatrix<f64>, OdeError> {
        Ok(unflatten_matrix(&psi.eval(s.clamp(0.0, lin.horizon()))?, 0, n, n))
    };
    let integrand = |s: f64| -> DVector<f64> {
        let sc = s.clamp(0.0, t);
        let inner = (|| -> Result<DMatrix<f64>, OdeError> {
            let y = var.y_at(sc)?;
            let yjac = var.jacobian_at(sc)?;
            let psi_inv = psi_at(sc)?
                .try_inverse()
                .ok_or(OdeError::NonFiniteState { t: sc })?;
            Ok(psi_inv * cs.pert().df(sc, &y) * yjac)
        })();
        match inner {
            Ok(m) => crate::ode::flatten_matrix(&m),
            Err(_) => DVector::from_element(n * n, f64::NAN),
        }
    };
    let integral = adaptive_simpson(&integrand, 0.0, t, opts.quad_tol);
    if !integral.iter().all(|v| v.is_finite()) {
        return Err(OdeError::NonFiniteState { t });
    }
    let integral_m = unflatten_matrix(&integral, 0, n, n);
    Ok(DMatrix::identity(n, n) - psi_at(t)? * integral_m)
}

fn eval_map(
    cs: &CoupledSystem,
    map: MapKind,
    t: f64,
    p: &DVector<f64>,
    iopts: &IntegratorOptions,
) -> Result<DVector<f64>, OdeError> {
    match map {
        MapKind::H => cs.map_h_with_opts(t, p, iopts),
        MapKind::G => cs.map_g_with_opts(t, p, iopts),
    }
}

fn stencil_opts(cs: &CoupledSystem, opts: &SmoothnessOptions) -> IntegratorOptions {
    IntegratorOptions {
        abs_tol: opts.fd_integrator_tol,
        rel_tol: opts.fd_integrator_tol,
        ..cs.lin().opts().clone()
    }
}

fn fd_jacobian_of_map(
    cs: &CoupledSystem,
    map: MapKind,
    t: f64,
    point: &DVector<f64>,
    opts: &SmoothnessOptions,
) -> Result<DMatrix<f64>, OdeError> {
    let n = cs.n();
    let h = opts.fd_step_jacobian;
    let iopts = stencil_opts(cs, opts);
    let mut cols = Vec::with_capacity(n);
    for j in 0..n {
        let mut pp = point.clone();
        let mut pm = point.clone();
        pp[j] += h;
        pm[j] -= h;
        let fp = eval_map(cs, map, t, &pp, &iopts)?;
        let fm = eval_map(cs, map, t, &pm, &iopts)?;
        cols.push((fp - fm) / (2.0 * h));
    }
    Ok(DMatrix::from_columns(&cols))
}

/// Second central differences: 5-point stencil on the diagonal, 4-point cross
/// stencil off the diagonal.
#[allow(clippy::needless_range_loop)]
fn fd_hessian_of_map(
    cs: &CoupledSystem,
    map: MapKind,
    t: f64,
    point: &DVector<f64>,
    opts: &SmoothnessOptions,
) -> Result<Vec<DMatrix<f64>>, OdeError> {
    let n = cs.n();
    let h = opts.fd_step_hessian;
    let iopts = stencil_opts(cs, opts);
    let base = eval_map(cs, map, t, point, &iopts)?;
    let shift = |offsets: &[(usize, f64)]| -> Result<DVector<f64>, OdeError> {
        let mut p = point.clone();
        for &(idx, d) in offsets {
            p[idx] += d;
        }
        eval_map(cs, map, t, &p, &iopts)
    };

    let mut per_pair = vec![vec![DVector::zeros(n); n]; n];
    for j in 0..n {
        let fp1 = shift(&[(j, h)])?;
        let fm1 = shift(&[(j, -h)])?;
        let fp2 = shift(&[(j, 2.0 * h)])?;
        let fm2 = shift(&[(j, -2.0 * h)])?;
        per_pair[j][j] = (-&fp2 + &fp1 * 16.0 - &base * 30.0 + &fm1 * 16.0 - &fm2) / (12.0 * h * h);
        for k in (j + 1)..n {
            let fpp = shift(&[(j, h), (k, h)])?;
            let fpm = shift(&[(j, h), (k, -h)])?;
            let fmp = shift(&[(j, -h), (k, h)])?;
            let fmm = shift(&[(j, -h), (k, -h)])?;
            let mixed = (fpp - fpm - fmp + fmm) / (4.0 * h * h);
            per_pair[j][k] = mixed.clone();
            per_pair[k][j] = mixed;
        }
    }

    Ok((0..n)
        .map(|a| DMatrix::from_fn(n, n, |j, k| per_pair[j][k][a]))
        .collect())
}
