//! Task execution. Frozen CSV column sets per task:
//!
//! * `map`       -> `map_points.csv`: t, x1..xn, h1..hn, g1..gn,
//!   h_residual, g_residual
//! * `verify`    -> `verify_points.csv`: tau, worst_conjugacy_residual,
//!   worst_inverse_residual
//! * `jacobian`  -> `jacobian_points.csv`: t, x1..xn, det, cond,
//!   machine_vs_direct, dg_fd_error, dh_fd_error, identity_residual
//! * `hessian`   -> `hessian_points.csv`: t, x1..xn, d2g_fd_error,
//!   d2h_fd_error, symmetry_defect, d2g_max_abs
//! * `bounds`    -> `bound_certificates.csv`: id, pass, worst_margin,
//!   worst_margin_normalized, witness_time
//! * `sweep`     -> `sweep.csv`: gamma, k_gamma_over_alpha, conj_residual,
//!   inv_residual, status
//!
//! Columns are append-only.

use std::sync::Arc;

use nalgebra::DVector;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use conjugacy_core::bounds::{check_gronwall, check_zj_bounds, gronwall_samples, modulus_check, ConstantSheet};
use conjugacy_core::cert::{Certificate, CertificateBuilder, Witness};
use conjugacy_core::conjugacy::{
    tol as core_tol, ConjugacyError, CoupledSystem, PicardOptions, SolveMethod, SystemConstants,
};
use conjugacy_core::gallery::{load_gallery, DeclaredConstants, GalleryId};
use conjugacy_core::linear::{dichotomy_grid, linspace, LinearSystem};
use conjugacy_core::perturbation::{audit_hypotheses, AuditOptions, Perturbation};
use conjugacy_core::smoothness::{hessian_g, hessian_h, jacobian_g, jacobian_h, SmoothnessOptions};

use crate::config::{RunConfig, TaskKind};
use crate::report::{Cell, ConstantsOut, Report, Table};
use crate::CliError;

pub struct SystemBundle {
    pub lin: Arc<LinearSystem>,
    pub pert: Arc<Perturbation>,
    pub declared: Option<DeclaredConstants>,
    pub n: usize,
    pub horizon: f64,
}

/// Effective task settings after defaults.
pub struct Settings {
    pub seed: u64,
    pub points: usize,
    pub radius: f64,
    pub t_grid: Vec<f64>,
    pub taus: Vec<f64>,
    pub eps: f64,
    pub j_max: usize,
    pub tol_conj: f64,
    pub tol_inv: f64,
    pub tol_picard: f64,
    pub picard: bool,
    pub eval_points: Option<Vec<DVector<f64>>>,
    pub unsafe_skip_smallness: bool,
}

impl Settings {
    pub fn resolve(cfg: &RunConfig, horizon: f64, unsafe_skip: bool, tol_override: Option<f64>) -> Self {
        let t = &cfg.task;
        Self {
            seed: t.seed.unwrap_or(42),
            points: t.points.unwrap_or(20),
            radius: t.radius.unwrap_or(5.0),
            t_grid: t.t_grid.clone().unwrap_or_else(|| vec![0.0, 0.5, 1.0, 2.0, horizon]),
            taus: t.taus.clone().unwrap_or_else(|| vec![0.0, 0.5, 1.0]),
            eps: t.eps.unwrap_or(0.1),
            j_max: t.j_max.unwrap_or(5),
            tol_conj: tol_override.or(t.tol_conj).unwrap_or(core_tol::CONJ),
            tol_inv: tol_override.or(t.tol_inv).unwrap_or(core_tol::INV),
            tol_picard: t.tol_picard.unwrap_or(core_tol::PICARD),
            picard: t.picard.unwrap_or(false),
            eval_points: t
                .eval_points
                .as_ref()
                .map(|pts| pts.iter().map(|p| DVector::from_vec(p.clone())).collect()),
            unsafe_skip_smallness: unsafe_skip,
        }
    }
}

pub fn build_system(cfg: &RunConfig) -> Result<SystemBundle, CliError> {
    if let Some(id) = &cfg.system.gallery {
        let id: GalleryId = id.parse().map_err(|e| CliError::Usage(format!("{e}")))?;
        let gs = load_gallery(id);
        let n = gs.lin.n();
        let horizon = gs.lin.horizon();
        return Ok(SystemBundle { lin: gs.lin, pert: gs.pert, declared: Some(gs.declared), n, horizon });
    }

    let n = cfg.system.n.expect("validated");
    let horizon = cfg.system.horizon.unwrap_or(5.0);
    let a_entries = cfg.system.a_entries.as_ref().expect("validated");
    let f_components = cfg.system.f.as_ref().expect("validated");
    let lin = LinearSystem::from_dsl(a_entries, n, horizon)
        .map_err(|e| CliError::Usage(format!("in `A`: {e}")))?;
    let mut pert = Perturbation::from_dsl(f_components, n)
        .map_err(|e| CliError::Usage(format!("in `f`: {e}")))?;
    let declared = match (cfg.system.k, cfg.system.alpha, cfg.system.m, cfg.system.gamma, cfg.system.mu) {
        (Some(k), Some(alpha), Some(m), Some(gamma), Some(mu)) => {
            pert = pert.with_declared(Some(gamma), Some(mu));
            Some(DeclaredConstants { k, alpha, m, gamma, mu })
        }
        _ => None,
    };
    Ok(SystemBundle { lin: Arc::new(lin), pert: Arc::new(pert), declared, n, horizon })
}

fn numerical<E: std::fmt::Display>(e: E) -> CliError {
    CliError::Numerical(e.to_string())
}

/// Declared constants when complete (cross-checked with light estimates),
/// estimated otherwise.
fn resolve_constants(
    bundle: &SystemBundle,
    seed: u64,
    warnings: &mut Vec<String>,
) -> Result<SystemConstants, CliError> {
    if let Some(d) = &bundle.declared {
        let est = bundle.pert.estimate_lipschitz(bundle.horizon, 5.0, 200, seed);
        if d.gamma > 0.0 && (est.gamma_hat - d.gamma).abs() / d.gamma >= 0.10 {
            warnings.push(format!(
                "declared gamma = {} differs from sampled estimate {} by 10% or more",
                d.gamma, est.gamma_hat
            ));
        }
        let mu_est = bundle.pert.estimate_mu(&linspace(0.0, bundle.horizon, 101));
        if d.mu > 0.0 && (mu_est.mu_hat - d.mu).abs() / d.mu >= 0.10 {
            warnings.push(format!(
                "declared mu = {} differs from sampled estimate {} by 10% or more",
                d.mu, mu_est.mu_hat
            ));
        }
        return Ok(d.to_system_constants());
    }
    let est = bundle
        .lin
        .estimate_dichotomy(&dichotomy_grid(bundle.horizon, 6, 11))
        .map_err(numerical)?;
    let lip = bundle.pert.estimate_lipschitz(bundle.horizon, 5.0, 400, seed);
    let mu = bundle.pert.estimate_mu(&linspace(0.0, bundle.horizon, 201));
    Ok(SystemConstants {
        k: est.k_hat,
        alpha: est.alpha_hat,
        m: est.m_hat,
        gamma: lip.gamma_hat,
        mu: mu.mu_hat,
    })
}

fn constants_out(c: &SystemConstants) -> ConstantsOut {
    ConstantsOut {
        k: c.k,
        alpha: c.alpha,
        m: c.m,
        gamma: c.gamma,
        mu: c.mu,
        k_gamma_over_alpha: c.k * c.gamma / c.alpha,
        smallness_margin: c.smallness_margin(),
    }
}

/// Smallness-gated construction. Without the unsafe flag a violation yields
/// a failed `smallness` certificate instead of a system.
fn build_coupled(
    bundle: &SystemBundle,
    constants: SystemConstants,
    settings: &Settings,
) -> Result<CoupledSystem, Box<Certificate>> {
    match CoupledSystem::new(Arc::clone(&bundle.lin), Arc::clone(&bundle.pert), constants) {
        Ok(cs) => Ok(cs),
        Err(_) if settings.unsafe_skip_smallness => Ok(CoupledSystem::new_unchecked(
            Arc::clone(&bundle.lin),
            Arc::clone(&bundle.pert),
            constants,
        )),
        Err(_) => {
            let mut cert = CertificateBuilder::new("smallness", bundle.horizon);
            cert.check(
                constants.k * constants.gamma,
                constants.alpha,
                Witness {
                    time: 0.0,
                    second_time: None,
                    point: vec![],
                    lhs: constants.k * constants.gamma,
                    rhs: constants.alpha,
                },
            );
            Err(Box::new(cert.finish()))
        }
    }
}

fn sample_points(n: usize, radius: f64, count: usize, seed: u64) -> Vec<DVector<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..count)
        .map(|_| {
            // Direction from a Gaussian, radius from u^(1/n): uniform in the ball.
            let dir = DVector::from_fn(n, |_, _| {
                // Box-Muller, keeps the dependency list short.
                let u1: f64 = rng.random::<f64>().max(f64::MIN_POSITIVE);
                let u2: f64 = rng.random();
                (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
            });
            let norm = dir.norm();
            let r = radius * rng.random::<f64>().powf(1.0 / n as f64);
            if norm == 0.0 {
                DVector::zeros(n)
            } else {
                dir * (r / norm)
            }
        })
        .collect()
}

fn default_base_point(n: usize) -> DVector<f64> {
    DVector::from_element(n, 2.0 / (n as f64).sqrt())
}

pub fn execute(kind: TaskKind, cfg: &RunConfig, settings: &Settings, report: &mut Report) -> Result<(), CliError> {
    let bundle = build_system(cfg)?;
    match kind {
        TaskKind::Audit => task_audit(&bundle, settings, report),
        TaskKind::Map => task_map(&bundle, settings, report),
        TaskKind::Verify => task_verify(&bundle, settings, report),
        TaskKind::Jacobian => task_jacobian(&bundle, settings, report),
        TaskKind::Hessian => task_hessian(&bundle, settings, report),
        TaskKind::Bounds => task_bounds(&bundle, settings, report),
        TaskKind::Sweep => task_sweep(cfg, &bundle, settings, report),
    }
}

fn task_audit(bundle: &SystemBundle, settings: &Settings, report: &mut Report) -> Result<(), CliError> {
    let opts = AuditOptions { seed: settings.seed, radius: settings.radius, ..AuditOptions::default() };
    let audit = audit_hypotheses(&bundle.lin, &bundle.pert, &opts).map_err(numerical)?;

    for record in &audit.records {
        let mut cert = CertificateBuilder::new(record.id.as_str(), bundle.horizon);
        let ok = !record.status.is_violation();
        // Margin encodes the verdict; evidence carries the measured value.
        cert.check(
            if ok { 0.0 } else { 1.0 },
            0.0,
            Witness {
                time: record.evidence.time,
                second_time: None,
                point: record.evidence.point.clone(),
                lhs: record.evidence.value,
                rhs: 0.0,
            },
        );
        report.certificates.push((&cert.finish()).into());
    }
    report.audit = Some(audit.records.iter().map(Into::into).collect());
    report.warnings.extend(audit.warnings.clone());
    if let Some(est) = &audit.dichotomy {
        report.constants = Some(constants_out(&SystemConstants {
            k: est.k_hat,
            alpha: est.alpha_hat,
            m: est.m_hat,
            gamma: audit.gamma_hat,
            mu: audit.mu_hat,
        }));
    }
    report.resolve_status(false);
    Ok(())
}

fn with_coupled(
    bundle: &SystemBundle,
    settings: &Settings,
    report: &mut Report,
    run: impl FnOnce(&CoupledSystem, &mut Report) -> Result<(), CliError>,
) -> Result<(), CliError> {
    let mut warnings = Vec::new();
    let constants = resolve_constants(bundle, settings.seed, &mut warnings)?;
    report.warnings.extend(warnings);
    report.constants = Some(constants_out(&constants));
    match build_coupled(bundle, constants, settings) {
        Ok(cs) => {
            run(&cs, report)?;
            report.resolve_status(cs.outside_theorem());
            Ok(())
        }
        Err(failed_gate) => {
            report.push_certificates([failed_gate.as_ref()]);
            report.resolve_status(false);
            Ok(())
        }
    }
}

fn task_map(bundle: &SystemBundle, settings: &Settings, report: &mut Report) -> Result<(), CliError> {
    with_coupled(bundle, settings, report, |cs, report| {
        let points = settings
            .eval_points
            .clone()
            .unwrap_or_else(|| sample_points(bundle.n, settings.radius, settings.points, settings.seed));
        let n = bundle.n;
        let mut columns = vec!["t".to_string()];
        columns.extend((1..=n).map(|i| format!("x{i}")));
        columns.extend((1..=n).map(|i| format!("h{i}")));
        columns.extend((1..=n).map(|i| format!("g{i}")));
        columns.push("h_residual".into());
        columns.push("g_residual".into());

        let mut rows = Vec::new();
        for &t in &settings.t_grid {
            for p in &points {
                let h = cs.map_h(t, p, SolveMethod::Ivp).map_err(numerical)?;
                let g = cs.map_g(t, p).map_err(numerical)?;
                let mut row: Vec<Cell> = vec![Cell::Num(t)];
                row.extend(p.iter().map(|&v| Cell::Num(v)));
                row.extend(h.value.iter().map(|&v| Cell::Num(v)));
                row.extend(g.value.iter().map(|&v| Cell::Num(v)));
                row.push(Cell::Num(h.residual));
                row.push(Cell::Num(g.residual));
                rows.push(row);
            }
        }
        report.tables.push(Table { name: "map_points".into(), columns, rows });
        Ok(())
    })
}

fn task_verify(bundle: &SystemBundle, settings: &Settings, report: &mut Report) -> Result<(), CliError> {
    with_coupled(bundle, settings, report, |cs, report| {
        let base = settings
            .eval_points
            .as_ref()
            .and_then(|p| p.first().cloned())
            .unwrap_or_else(|| default_base_point(bundle.n));

        let mut rows = Vec::new();
        for &tau in &settings.taus {
            let conj = cs
                .verify_conjugacy(tau, &base, &settings.t_grid, settings.tol_conj)
                .map_err(numerical)?;
            let conj_res = conj.witness.as_ref().map_or(0.0, |w| w.lhs);

            let mut points = sample_points(bundle.n, settings.radius, settings.points, settings.seed);
            points.push(base.clone());
            let inv = cs.verify_inverse(tau, &points, settings.tol_inv).map_err(numerical)?;
            let inv_res = inv.witness.as_ref().map_or(0.0, |w| w.lhs);

            rows.push(vec![Cell::Num(tau), Cell::Num(conj_res), Cell::Num(inv_res)]);
            report.push_certificates([&conj, &inv]);
        }
        report.tables.push(Table {
            name: "verify_points".into(),
            columns: vec!["tau".into(), "worst_conjugacy_residual".into(), "worst_inverse_residual".into()],
            rows,
        });

        if settings.picard {
            let popts = PicardOptions { tol: settings.tol_picard, ..PicardOptions::default() };
            let agreement_tol = 10.0 * (settings.tol_picard + cs.lin().opts().abs_tol);
            let mut agree = CertificateBuilder::new("Picard-IVP", bundle.horizon)
                .outside_theorem(cs.outside_theorem());
            let mut contraction = CertificateBuilder::new("Picard-contraction", bundle.horizon)
                .outside_theorem(cs.outside_theorem());
            let ratio_bound = cs.constants().contraction() + 0.05;
            let pts = sample_points(bundle.n, 3.0, 10, settings.seed ^ 0x9e37);
            let mut rng = ChaCha8Rng::seed_from_u64(settings.seed ^ 0x7f4a);
            for p in &pts {
                let t = 0.25 + rng.random::<f64>();
                let direct = cs.z_star_ivp(t, p).map_err(numerical)?;
                match cs.z_star_picard(t, p, &popts) {
                    Ok((_, picard)) => {
                        let diff = (&picard.value - &direct.value).norm();
                        agree.check(
                            diff,
                            agreement_tol,
                            Witness {
                                time: t,
                                second_time: None,
                                point: p.iter().copied().collect(),
                                lhs: diff,
                                rhs: agreement_tol,
                            },
                        );
                        let run = cs.picard_run(t, p, &popts).map_err(numerical)?;
                        let incs = run.increments();
                        for (j, r) in run.ratios().iter().enumerate() {
                            if j >= 1 && incs[j + 1] > 1e-12 {
                                contraction.check(
                                    *r,
                                    ratio_bound,
                                    Witness {
                                        time: t,
                                        second_time: None,
                                        point: p.iter().copied().collect(),
                                        lhs: *r,
                                        rhs: ratio_bound,
                                    },
                                );
                            }
                        }
                    }
                    Err(ConjugacyError::NoConvergence { increment, .. }) => {
                        agree.check(
                            increment,
                            agreement_tol,
                            Witness {
                                time: t,
                                second_time: None,
                                point: p.iter().copied().collect(),
                                lhs: increment,
                                rhs: agreement_tol,
                            },
                        );
                    }
                    Err(e) => return Err(numerical(e)),
                }
            }
            report.push_certificates([&agree.finish(), &contraction.finish()]);
        }
        Ok(())
    })
}

fn task_jacobian(bundle: &SystemBundle, settings: &Settings, report: &mut Report) -> Result<(), CliError> {
    with_coupled(bundle, settings, report, |cs, report| {
        let opts = SmoothnessOptions::default();
        let points = settings
            .eval_points
            .clone()
            .unwrap_or_else(|| sample_points(bundle.n, settings.radius, settings.points.min(8), settings.seed));
        let n = bundle.n;
        let outside = cs.outside_theorem();
        let mut consistency = CertificateBuilder::new("DG-consistency", bundle.horizon).outside_theorem(outside);
        let mut det_pos = CertificateBuilder::new("DG-det-positive", bundle.horizon).outside_theorem(outside);
        let mut fd = CertificateBuilder::new("DG-fd", bundle.horizon).outside_theorem(outside);
        let mut identity = CertificateBuilder::new("DH-DG-identity", bundle.horizon).outside_theorem(outside);

        let mut columns = vec!["t".to_string()];
        columns.extend((1..=n).map(|i| format!("x{i}")));
        columns.extend(
            ["det", "cond", "machine_vs_direct", "dg_fd_error", "dh_fd_error", "identity_residual"]
                .map(String::from),
        );
        let mut rows = Vec::new();

        for &t in &settings.t_grid {
            for p in &points {
                let g = jacobian_g(cs, t, p, &opts).map_err(numerical)?;
                let h = jacobian_h(cs, t, p, &opts).map_err(numerical)?;
                let witness = |lhs: f64, rhs: f64| Witness {
                    time: t,
                    second_time: None,
                    point: p.iter().copied().collect(),
                    lhs,
                    rhs,
                };
                let mismatch = g.cross_check.machine_vs_direct.unwrap();
                consistency.check(mismatch, opts.mismatch_tol, witness(mismatch, opts.mismatch_tol));
                let det = g.cross_check.det.unwrap();
                det_pos.check(opts.det_floor, det, witness(opts.det_floor, det));
                let dg_fd = g.cross_check.fd_error.unwrap();
                fd.check(dg_fd, 1e-5, witness(dg_fd, 1e-5));
                let id_res = h.cross_check.identity_residual.unwrap();
                identity.check(id_res, 1e-8, witness(id_res, 1e-8));

                let mut row: Vec<Cell> = vec![Cell::Num(t)];
                row.extend(p.iter().map(|&v| Cell::Num(v)));
                row.push(Cell::Num(det));
                row.push(Cell::Num(g.cross_check.cond.unwrap()));
                row.push(Cell::Num(mismatch));
                row.push(Cell::Num(dg_fd));
                row.push(Cell::Num(h.cross_check.fd_error.unwrap()));
                row.push(Cell::Num(id_res));
                rows.push(row);
            }
        }
        report.push_certificates([
            &consistency.finish(),
            &det_pos.finish(),
            &fd.finish(),
            &identity.finish(),
        ]);
        report.tables.push(Table { name: "jacobian_points".into(), columns, rows });
        Ok(())
    })
}

fn task_hessian(bundle: &SystemBundle, settings: &Settings, report: &mut Report) -> Result<(), CliError> {
    with_coupled(bundle, settings, report, |cs, report| {
        let opts = SmoothnessOptions::default();
        let points = settings
            .eval_points
            .clone()
            .unwrap_or_else(|| sample_points(bundle.n, 2.0, settings.points.min(4), settings.seed));
        let n = bundle.n;
        let outside = cs.outside_theorem();
        let mut fd = CertificateBuilder::new("D2G-fd", bundle.horizon).outside_theorem(outside);
        let mut sym = CertificateBuilder::new("D2-symmetry", bundle.horizon).outside_theorem(outside);

        let mut columns = vec!["t".to_string()];
        columns.extend((1..=n).map(|i| format!("x{i}")));
        columns.extend(["d2g_fd_error", "d2h_fd_error", "symmetry_defect", "d2g_max_abs"].map(String::from));
        let mut rows = Vec::new();

        for &t in &settings.t_grid {
            for p in &points {
                let g2 = hessian_g(cs, t, p, &opts).map_err(numerical)?;
                let h2 = hessian_h(cs, t, p, &opts).map_err(numerical)?;
                let witness = |lhs: f64, rhs: f64| Witness {
                    time: t,
                    second_time: None,
                    point: p.iter().copied().collect(),
                    lhs,
                    rhs,
                };
                let g2_fd = g2.cross_check.fd_error.unwrap();
                fd.check(g2_fd, opts.hessian_fd_tol, witness(g2_fd, opts.hessian_fd_tol));
                let defect = g2
                    .cross_check
                    .symmetry_defect
                    .unwrap()
                    .max(h2.cross_check.symmetry_defect.unwrap());
                sym.check(defect, 1e-8, witness(defect, 1e-8));

                let max_abs = g2.hessian.as_ref().unwrap().iter().map(|m| m.amax()).fold(0.0, f64::max);
                let mut row: Vec<Cell> = vec![Cell::Num(t)];
                row.extend(p.iter().map(|&v| Cell::Num(v)));
                row.push(Cell::Num(g2_fd));
                row.push(Cell::Num(h2.cross_check.fd_error.unwrap()));
                row.push(Cell::Num(defect));
                row.push(Cell::Num(max_abs));
                rows.push(row);
            }
        }
        report.push_certificates([&fd.finish(), &sym.finish()]);
        report.tables.push(Table { name: "hessian_points".into(), columns, rows });
        Ok(())
    })
}

fn task_bounds(bundle: &SystemBundle, settings: &Settings, report: &mut Report) -> Result<(), CliError> {
    with_coupled(bundle, settings, report, |cs, report| {
        let samples = gronwall_samples(bundle.n, bundle.horizon * 0.6, 30, 3.0, settings.seed);
        let gron = check_gronwall(cs, &samples).map_err(numerical)?;
        report.push_certificates(gron.iter());

        let base = settings
            .eval_points
            .as_ref()
            .and_then(|p| p.first().cloned())
            .unwrap_or_else(|| default_base_point(bundle.n));
        let zj = check_zj_bounds(cs, 1.0, &base, settings.j_max, &PicardOptions::default())
            .map_err(numerical)?;
        report.push_certificates([&zj]);

        let unit_points = sample_points(bundle.n, 1.0, settings.points, settings.seed ^ 0x6d0d);
        let pairs: Vec<_> = unit_points
            .chunks(2)
            .filter(|c| c.len() == 2)
            .map(|c| (c[0].clone(), c[1].clone()))
            .collect();
        let modulus = modulus_check(cs, &settings.t_grid, &pairs, settings.eps).map_err(numerical)?;
        report.push_certificates([&modulus]);

        let sheet = ConstantSheet::from(cs.constants());
        let mut rows = Vec::new();
        for cert in gron.iter().chain([&zj, &modulus]) {
            rows.push(vec![
                Cell::Text(cert.id.clone()),
                Cell::Text(cert.pass.to_string()),
                Cell::Num(cert.worst_margin),
                Cell::Num(cert.worst_margin_normalized),
                cert.witness.as_ref().map_or(Cell::Null, |w| Cell::Num(w.time)),
            ]);
        }
        report.tables.push(Table {
            name: "bound_certificates".into(),
            columns: ["id", "pass", "worst_margin", "worst_margin_normalized", "witness_time"]
                .map(String::from)
                .to_vec(),
            rows,
        });
        report.warnings.push(format!(
            "constant sheet: contraction K*gamma/alpha = {}, theta(2) = {}, theta0(2) = {}",
            sheet.contraction(),
            sheet.theta(2.0),
            sheet.theta0(2.0)
        ));
        Ok(())
    })
}

fn task_sweep(
    cfg: &RunConfig,
    bundle: &SystemBundle,
    settings: &Settings,
    report: &mut Report,
) -> Result<(), CliError> {
    let parameter = cfg
        .task
        .parameter
        .as_deref()
        .ok_or_else(|| CliError::Usage("sweep task needs `parameter`".into()))?;
    let values = cfg
        .task
        .values
        .as_ref()
        .ok_or_else(|| CliError::Usage("sweep task needs `values`".into()))?;

    let mut rows = Vec::new();
    let mut any_outside = false;
    for &value in values {
        let (lin, pert, horizon) = match parameter {
            "gamma-scale" => (Arc::clone(&bundle.lin), Arc::new(bundle.pert.scaled(value)), bundle.horizon),
            "alpha-scale" => (Arc::new(bundle.lin.scaled(value)), Arc::clone(&bundle.pert), bundle.horizon),
            "horizon" => {
                if !value.is_finite() || value <= 0.0 {
                    return Err(CliError::Usage("horizon values must be positive".into()));
                }
                (Arc::new(bundle.lin.with_horizon(value)), Arc::clone(&bundle.pert), value)
            }
            other => {
                return Err(CliError::Usage(format!(
                    "unknown sweep parameter `{other}` (expected gamma-scale|alpha-scale|horizon)"
                )))
            }
        };

        // Per-row constants: estimated unless declared values scale exactly.
        let est = lin.estimate_dichotomy(&dichotomy_grid(horizon, 4, 7)).ok();
        let gamma = pert
            .declared_gamma()
            .unwrap_or_else(|| pert.estimate_lipschitz(horizon, 5.0, 200, settings.seed).gamma_hat);
        let mu = pert
            .declared_mu()
            .unwrap_or_else(|| pert.estimate_mu(&linspace(0.0, horizon, 101)).mu_hat);

        let (status, row_cells) = match est {
            Some(est) => {
                let k_gamma_over_alpha = est.k_hat * gamma / est.alpha_hat;
                let inside = est.k_hat * gamma < est.alpha_hat;
                let constants = SystemConstants {
                    k: est.k_hat,
                    alpha: est.alpha_hat,
                    m: est.m_hat,
                    gamma,
                    mu,
                };
                let cs = if inside {
                    CoupledSystem::new(Arc::clone(&lin), Arc::clone(&pert), constants)
                        .expect("inside the smallness region")
                } else {
                    any_outside = true;
                    CoupledSystem::new_unchecked(Arc::clone(&lin), Arc::clone(&pert), constants)
                };
                let base = default_base_point(bundle.n);
                let tau = 1.0f64.min(horizon);
                let t_grid: Vec<f64> = settings.t_grid.iter().copied().filter(|&t| t <= horizon).collect();
                let conj = cs.verify_conjugacy(tau, &base, &t_grid, settings.tol_conj).map_err(numerical)?;
                let inv_pts = sample_points(bundle.n, settings.radius, 10, settings.seed);
                let inv = cs.verify_inverse(tau, &inv_pts, settings.tol_inv).map_err(numerical)?;
                report.push_certificates([&conj, &inv]);
                let status = if inside { "ok" } else { "outside-theorem" };
                (
                    status,
                    vec![
                        Cell::Num(gamma),
                        Cell::Num(k_gamma_over_alpha),
                        Cell::Num(conj.witness.as_ref().map_or(0.0, |w| w.lhs)),
                        Cell::Num(inv.witness.as_ref().map_or(0.0, |w| w.lhs)),
                        Cell::Text(status.into()),
                    ],
                )
            }
            None => {
                any_outside = true;
                (
                    "outside-theorem",
                    vec![
                        Cell::Num(gamma),
                        Cell::Null,
                        Cell::Null,
                        Cell::Null,
                        Cell::Text("outside-theorem".into()),
                    ],
                )
            }
        };
        let _ = status;
        rows.push(row_cells);
    }

    report.tables.push(Table {
        name: "sweep".into(),
        columns: ["gamma", "k_gamma_over_alpha", "conj_residual", "inv_residual", "status"]
            .map(String::from)
            .to_vec(),
        rows,
    });

    // Sweep rows are exploratory: residuals are recorded, not judged, so
    // certificate failures never fail the sweep itself.
    for cert in &mut report.certificates {
        cert.outside_theorem = true;
    }
    report.resolve_status(any_outside);
    if report.error.is_none() && report.status == crate::report::REPORT_STATUS_FAIL {
        report.status = crate::report::REPORT_STATUS_OUTSIDE.to_string();
    }
    Ok(())
}
