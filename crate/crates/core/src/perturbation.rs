//! The nonlinearity `f(t, x)`, its derivatives, and the hypothesis audit.
//!
//! A [`Perturbation`] carries `f` together with its Jacobian `Df` and second
//! derivative tensor `D2f`, either closed-form, symbolic (from DSL
//! expressions), or finite-difference fallbacks. The audit estimates the
//! Lipschitz constant `gamma` and offset bound `mu`, certifies the
//! contraction of the linear part, probes the growth hypotheses that are
//! limit statements (and therefore can only be probed, not grid-certified),
//! validates derivatives against finite differences, and checks the strict
//! smallness comparison `K gamma < alpha`.

use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::conjugacy::{picard_iterates, PicardOptions};
use crate::dsl::{self, DiffVar, Env, Expr};
use crate::linear::{dichotomy_grid, linspace, op_norm2, DichotomyError, DichotomyEstimate, LinearSystem};
use crate::ode::OdeError;

pub type VectorFn = Arc<dyn Fn(f64, &DVector<f64>) -> DVector<f64> + Send + Sync>;
pub type JacobianFn = Arc<dyn Fn(f64, &DVector<f64>) -> DMatrix<f64> + Send + Sync>;
pub type HessianFn = Arc<dyn Fn(f64, &DVector<f64>) -> Vec<DMatrix<f64>> + Send + Sync>;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DerivativeSource {
    ClosedForm,
    Symbolic,
    FiniteDifference,
}

pub struct Perturbation {
    n: usize,
    f: VectorFn,
    df: JacobianFn,
    d2f: HessianFn,
    source: DerivativeSource,
    declared_gamma: Option<f64>,
    declared_mu: Option<f64>,
}

impl Perturbation {
    pub fn from_closures(n: usize, f: VectorFn, df: JacobianFn, d2f: HessianFn) -> Self {
        Self { n, f, df, d2f, source: DerivativeSource::ClosedForm, declared_gamma: None, declared_mu: None }
    }

    /// Derivatives by central finite differences of `f` itself.
    pub fn from_fn_fd(n: usize, f: VectorFn) -> Self {
        let f_df = Arc::clone(&f);
        let df: JacobianFn = Arc::new(move |t, x| fd_jacobian(f_df.as_ref(), t, x));
        let f_d2 = Arc::clone(&f);
        let d2f: HessianFn = Arc::new(move |t, x| {
            let f_inner = Arc::clone(&f_d2);
            let jac = move |tt: f64, xx: &DVector<f64>| fd_jacobian(f_inner.as_ref(), tt, xx);
            fd_tensor(&jac, t, x)
        });
        Self { n, f, df, d2f, source: DerivativeSource::FiniteDifference, declared_gamma: None, declared_mu: None }
    }

    /// Build from `n` component expressions in `(t, x1..xn)` with symbolic
    /// derivatives. Falls back to finite differences when a component is not
    /// differentiable (contains `abs`).
    pub fn from_dsl(components: &[String], n: usize) -> Result<Self, dsl::ParseError> {
        assert_eq!(components.len(), n, "expected {n} component expressions");
        let mut parsed = Vec::with_capacity(n);
        for text in components {
            parsed.push(dsl::parse_expr(text, n)?);
        }

        let mut grad: Vec<Vec<Expr>> = Vec::with_capacity(n);
        let mut hess: Vec<Vec<Expr>> = Vec::with_capacity(n);
        let mut differentiable = true;
        'outer: for comp in &parsed {
            let mut row = Vec::with_capacity(n);
            let mut hrow = Vec::with_capacity(n * n);
            for j in 0..n {
                match dsl::diff_expr(comp, DiffVar::X(j)) {
                    Ok(d) => {
                        for k in 0..n {
                            match dsl::diff_expr(&d, DiffVar::X(k)) {
                                Ok(d2) => hrow.push(d2),
                                Err(_) => {
                                    differentiable = false;
                                    break 'outer;
                                }
                            }
                        }
                        row.push(d);
                    }
                    Err(_) => {
                        differentiable = false;
                        break 'outer;
                    }
                }
            }
            grad.push(row);
            hess.push(hrow);
        }

        let exprs = Arc::new(parsed);
        let f_exprs = Arc::clone(&exprs);
        let f: VectorFn = Arc::new(move |t, x| {
            DVector::from_fn(n, |i, _| {
                dsl::eval_expr(&f_exprs[i], &Env { t, x: x.as_slice() }).unwrap_or(f64::NAN)
            })
        });

        if !differentiable {
            return Ok(Self { source: DerivativeSource::FiniteDifference, ..Self::from_fn_fd(n, f) });
        }

        let grad = Arc::new(grad);
        let hess = Arc::new(hess);
        let df: JacobianFn = Arc::new(move |t, x| {
            DMatrix::from_fn(n, n, |i, j| {
                dsl::eval_expr(&grad[i][j], &Env { t, x: x.as_slice() }).unwrap_or(f64::NAN)
            })
        });
        let d2f: HessianFn = Arc::new(move |t, x| {
            (0..n)
                .map(|i| {
                    DMatrix::from_fn(n, n, |j, k| {
                        dsl::eval_expr(&hess[i][j * n + k], &Env { t, x: x.as_slice() })
                            .unwrap_or(f64::NAN)
                    })
                })
                .collect()
        });

        Ok(Self { n, f, df, d2f, source: DerivativeSource::Symbolic, declared_gamma: None, declared_mu: None })
    }

    pub fn with_declared(mut self, gamma: Option<f64>, mu: Option<f64>) -> Self {
        self.declared_gamma = gamma;
        self.declared_mu = mu;
        self
    }

    /// Same map scaled by `c` (constants scale with it).
    pub fn scaled(&self, c: f64) -> Self {
        let f = Arc::clone(&self.f);
        let df = Arc::clone(&self.df);
        let d2f = Arc::clone(&self.d2f);
        Self {
            n: self.n,
            f: Arc::new(move |t, x| f(t, x) * c),
            df: Arc::new(move |t, x| df(t, x) * c),
            d2f: Arc::new(move |t, x| d2f(t, x).into_iter().map(|m| m * c).collect()),
            source: self.source,
            declared_gamma: self.declared_gamma.map(|g| g * c.abs()),
            declared_mu: self.declared_mu.map(|m| m * c.abs()),
        }
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn source(&self) -> DerivativeSource {
        self.source
    }

    pub fn declared_gamma(&self) -> Option<f64> {
        self.declared_gamma
    }

    pub fn declared_mu(&self) -> Option<f64> {
        self.declared_mu
    }

    pub fn f(&self, t: f64, x: &DVector<f64>) -> DVector<f64> {
        (self.f)(t, x)
    }

    pub fn df(&self, t: f64, x: &DVector<f64>) -> DMatrix<f64> {
        (self.df)(t, x)
    }

    pub fn d2f(&self, t: f64, x: &DVector<f64>) -> Vec<DMatrix<f64>> {
        (self.d2f)(t, x)
    }

    /// Sampled Lipschitz estimate over the box `[-radius, radius]^n x [0, T]`:
    /// the larger of max sampled `||Df||_2` and the max sampled difference
    /// quotient. Nondecreasing in `samples` for a fixed seed.
    pub fn estimate_lipschitz(&self, horizon: f64, radius: f64, samples: usize, seed: u64) -> LipschitzEstimate {
        assert!(samples >= 2);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut best = LipschitzEstimate {
            gamma_hat: 0.0,
            derivative_based: 0.0,
            pair_based: 0.0,
            witness_t: 0.0,
            witness_x: vec![0.0; self.n],
        };
        for _ in 0..samples {
            let t = rng.random::<f64>() * horizon;
            let x = DVector::from_fn(self.n, |_, _| (rng.random::<f64>() * 2.0 - 1.0) * radius);
            let x_bar = DVector::from_fn(self.n, |_, _| (rng.random::<f64>() * 2.0 - 1.0) * radius);

            let d = op_norm2(&self.df(t, &x));
            if d > best.derivative_based {
                best.derivative_based = d;
            }
            if d > best.gamma_hat {
                best.gamma_hat = d;
                best.witness_t = t;
                best.witness_x = x.iter().copied().collect();
            }

            let dx = (&x - &x_bar).norm();
            if dx > 0.0 {
                let q = (self.f(t, &x) - self.f(t, &x_bar)).norm() / dx;
                if q > best.pair_based {
                    best.pair_based = q;
                }
                if q > best.gamma_hat {
                    best.gamma_hat = q;
                    best.witness_t = t;
                    best.witness_x = x.iter().copied().collect();
                }
            }
        }
        best
    }

    /// `max |f(t, 0)|` over the samples.
    pub fn estimate_mu(&self, t_samples: &[f64]) -> MuEstimate {
        let zero = DVector::zeros(self.n);
        let mut best = MuEstimate { mu_hat: 0.0, witness_t: t_samples[0] };
        for &t in t_samples {
            let v = self.f(t, &zero).norm();
            if v > best.mu_hat {
                best.mu_hat = v;
                best.witness_t = t;
            }
        }
        best
    }
}

#[derive(Clone, Debug)]
pub struct LipschitzEstimate {
    pub gamma_hat: f64,
    pub derivative_based: f64,
    pub pair_based: f64,
    pub witness_t: f64,
    pub witness_x: Vec<f64>,
}

#[derive(Clone, Copy, Debug)]
pub struct MuEstimate {
    pub mu_hat: f64,
    pub witness_t: f64,
}

fn fd_jacobian(f: &(dyn Fn(f64, &DVector<f64>) -> DVector<f64> + Send + Sync), t: f64, x: &DVector<f64>) -> DMatrix<f64> {
    let n = x.len();
    let mut cols = Vec::with_capacity(n);
    for j in 0..n {
        let h = 1e-6 * (1.0 + x[j].abs());
        let mut xp = x.clone();
        let mut xm = x.clone();
        xp[j] += h;
        xm[j] -= h;
        cols.push((f(t, &xp) - f(t, &xm)) / (2.0 * h));
    }
    DMatrix::from_columns(&cols)
}

fn fd_tensor(df: &dyn Fn(f64, &DVector<f64>) -> DMatrix<f64>, t: f64, x: &DVector<f64>) -> Vec<DMatrix<f64>> {
    let n = x.len();
    let mut per_dir = Vec::with_capacity(n);
    for k in 0..n {
        let h = 1e-5 * (1.0 + x[k].abs());
        let mut xp = x.clone();
        let mut xm = x.clone();
        xp[k] += h;
        xm[k] -= h;
        per_dir.push((df(t, &xp) - df(t, &xm)) / (2.0 * h));
    }
    // per_dir[k][(i, j)] = d^2 f_i / dx_j dx_k; regroup by component i.
    (0..n)
        .map(|i| DMatrix::from_fn(n, n, |j, k| per_dir[k][(i, j)]))
        .collect()
}

// ---------------------------------------------------------------------------
// Hypothesis audit
// ---------------------------------------------------------------------------

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum HypothesisId {
    P1,
    P2,
    P3,
    P4,
    P5,
    N,
    Smallness,
}

impl HypothesisId {
    pub fn as_str(&self) -> &'static str {
        match self {
            HypothesisId::P1 => "P1",
            HypothesisId::P2 => "P2",
            HypothesisId::P3 => "P3",
            HypothesisId::P4 => "P4",
            HypothesisId::P5 => "P5",
            HypothesisId::N => "N",
            HypothesisId::Smallness => "smallness",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AuditStatus {
    CertifiedOnGrid,
    Violated,
    ProbePassed,
    ProbeInconclusive,
}

impl AuditStatus {
    pub fn as_str(&self) -> &'static str {
        match self {
            AuditStatus::CertifiedOnGrid => "certified-on-grid",
            AuditStatus::Violated => "violated",
            AuditStatus::ProbePassed => "probe-passed",
            AuditStatus::ProbeInconclusive => "probe-inconclusive",
        }
    }

    pub fn is_violation(&self) -> bool {
        matches!(self, AuditStatus::Violated)
    }
}

#[derive(Clone, Debug)]
pub struct Evidence {
    pub time: f64,
    pub point: Vec<f64>,
    pub value: f64,
    pub note: Option<String>,
}

#[derive(Clone, Debug)]
pub struct HypothesisRecord {
    pub id: HypothesisId,
    pub status: AuditStatus,
    pub evidence: Evidence,
}

#[derive(Clone, Debug)]
pub struct AuditReport {
    pub records: Vec<HypothesisRecord>,
    pub dichotomy: Option<DichotomyEstimate>,
    pub gamma_hat: f64,
    pub mu_hat: f64,
    /// Declared values when present, estimates otherwise.
    pub gamma_used: f64,
    pub mu_used: f64,
    /// `alpha_hat - k_hat * gamma_hat` when the contraction was certified.
    pub smallness_margin: Option<f64>,
    pub warnings: Vec<String>,
}

impl AuditReport {
    pub fn record(&self, id: HypothesisId) -> Option<&HypothesisRecord> {
        self.records.iter().find(|r| r.id == id)
    }

    pub fn passed(&self) -> bool {
        self.records.iter().all(|r| !r.status.is_violation())
    }
}

#[derive(Clone, Debug)]
pub struct AuditOptions {
    /// Half-width of the state box sampled by the estimators.
    pub radius: f64,
    pub samples: usize,
    pub deriv_points: usize,
    pub t_points: usize,
    /// Logarithmically spaced radii for the growth probes.
    pub ray_radii: Vec<f64>,
    /// Iterate count for the fixed-point growth probe.
    pub n_jmax: usize,
    pub seed: u64,
    /// Declared-vs-estimated relative mismatch that triggers a warning.
    pub mismatch_warn: f64,
    pub df_tol: f64,
    pub d2f_tol: f64,
}

impl Default for AuditOptions {
    fn default() -> Self {
        Self {
            radius: 5.0,
            samples: 400,
            deriv_points: 200,
            t_points: 201,
            ray_radii: vec![1e1, 1e2, 1e3, 1e4],
            n_jmax: 3,
            seed: 42,
            mismatch_warn: 0.10,
            df_tol: 1e-6,
            d2f_tol: 1e-5,
        }
    }
}

/// Run the full hypothesis audit of the pair `(A, f)`.
pub fn audit_hypotheses(
    sys: &LinearSystem,
    p: &Perturbation,
    opts: &AuditOptions,
) -> Result<AuditReport, OdeError> {
    let horizon = sys.horizon();
    let mut records = Vec::new();
    let mut warnings = Vec::new();

    // (P1): contraction constants from the transition-matrix envelope.
    let dichotomy = match sys.estimate_dichotomy(&dichotomy_grid(horizon, 6, 11)) {
        Ok(est) => {
            records.push(HypothesisRecord {
                id: HypothesisId::P1,
                status: AuditStatus::CertifiedOnGrid,
                evidence: Evidence {
                    time: horizon,
                    point: vec![],
                    value: est.residual,
                    note: Some(format!("K = {}, alpha = {}", est.k_hat, est.alpha_hat)),
                },
            });
            Some(est)
        }
        Err(DichotomyError::Ode(e)) => return Err(e),
        Err(err) => {
            let slope = match err {
                DichotomyError::NotContractive { slope } => slope,
                _ => f64::NAN,
            };
            records.push(HypothesisRecord {
                id: HypothesisId::P1,
                status: AuditStatus::Violated,
                evidence: Evidence {
                    time: horizon,
                    point: vec![],
                    value: slope,
                    note: Some("fitted log-norm slope is nonnegative".into()),
                },
            });
            None
        }
    };

    // (P2): sampled Lipschitz constant.
    let lip = p.estimate_lipschitz(horizon, opts.radius, opts.samples, opts.seed);
    records.push(HypothesisRecord {
        id: HypothesisId::P2,
        status: AuditStatus::CertifiedOnGrid,
        evidence: Evidence {
            time: lip.witness_t,
            point: lip.witness_x.clone(),
            value: lip.gamma_hat,
            note: None,
        },
    });
    if let Some(declared) = p.declared_gamma() {
        let mismatch = (lip.gamma_hat - declared).abs() / declared.abs().max(1e-12);
        if mismatch >= opts.mismatch_warn {
            warnings.push(format!(
                "declared gamma = {declared} differs from estimate {} by {:.0}%",
                lip.gamma_hat,
                100.0 * mismatch
            ));
        }
    }

    // (P3): offset bound at the origin, plus boundedness in t at fixed points.
    let t_grid = linspace(0.0, horizon, opts.t_points);
    let mu = p.estimate_mu(&t_grid);
    let mut p3_status = AuditStatus::CertifiedOnGrid;
    let mut p3_note = None;
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed ^ 0x5eed_0003);
    'p3: for _ in 0..4 {
        let x = DVector::from_fn(p.n(), |_, _| (rng.random::<f64>() * 2.0 - 1.0) * opts.radius);
        for &t in &t_grid {
            let v = p.f(t, &x);
            if !v.iter().all(|c| c.is_finite()) {
                p3_status = AuditStatus::Violated;
                p3_note = Some(format!("f(t, x) non-finite at t = {t}"));
                break 'p3;
            }
        }
    }
    records.push(HypothesisRecord {
        id: HypothesisId::P3,
        status: p3_status,
        evidence: Evidence { time: mu.witness_t, point: vec![0.0; p.n()], value: mu.mu_hat, note: p3_note },
    });
    if let Some(declared) = p.declared_mu() {
        if declared.abs() > 1e-12 {
            let mismatch = (mu.mu_hat - declared).abs() / declared.abs();
            if mismatch >= opts.mismatch_warn {
                warnings.push(format!(
                    "declared mu = {declared} differs from estimate {} by {:.0}%",
                    mu.mu_hat,
                    100.0 * mismatch
                ));
            }
        }
    }

    // (P4): |f(t, r u)| must grow strictly along every probed ray. A limit
    // statement, so the statuses are probe-passed / probe-inconclusive.
    let probe_t = 0.5 * horizon;
    let dirs = probe_directions(p.n(), opts.seed);
    let mut p4 = AuditStatus::ProbePassed;
    let mut p4_evidence = Evidence { time: probe_t, point: vec![], value: 0.0, note: None };
    'p4: for u in &dirs {
        let mut prev = None;
        for &r in &opts.ray_radii {
            let v = p.f(probe_t, &(u * r)).norm();
            if let Some(prev_v) = prev {
                if v <= prev_v {
                    p4 = AuditStatus::ProbeInconclusive;
                    p4_evidence = Evidence {
                        time: probe_t,
                        point: (u * r).iter().copied().collect(),
                        value: v,
                        note: Some(format!("|f| plateaued: {prev_v} then {v} at radius {r}")),
                    };
                    break 'p4;
                }
            }
            prev = Some(v);
            p4_evidence.value = v;
            p4_evidence.point = (u * r).iter().copied().collect();
        }
    }
    records.push(HypothesisRecord { id: HypothesisId::P4, status: p4, evidence: p4_evidence });

    // (P5): declared derivatives against central finite differences.
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed ^ 0x5eed_0005);
    let mut worst_df = 0.0f64;
    let mut worst_d2f = 0.0f64;
    let mut p5_witness = Evidence { time: 0.0, point: vec![0.0; p.n()], value: 0.0, note: None };
    for _ in 0..opts.deriv_points {
        let t = rng.random::<f64>() * horizon;
        let x = DVector::from_fn(p.n(), |_, _| (rng.random::<f64>() * 2.0 - 1.0) * opts.radius);
        let sym = p.df(t, &x);
        let num = fd_jacobian(
            &|tt: f64, xx: &DVector<f64>| p.f(tt, xx),
            t,
            &x,
        );
        let scale = op_norm2(&sym).max(1.0);
        let err = op_norm2(&(&sym - &num)) / scale;
        if err > worst_df {
            worst_df = err;
            p5_witness = Evidence { time: t, point: x.iter().copied().collect(), value: err, note: None };
        }
        let sym2 = p.d2f(t, &x);
        let num2 = fd_tensor(&|tt: f64, xx: &DVector<f64>| p.df(tt, xx), t, &x);
        for (a, b) in sym2.iter().zip(&num2) {
            let scale = op_norm2(a).max(1.0);
            let err = op_norm2(&(a - b)) / scale;
            worst_d2f = worst_d2f.max(err);
        }
    }
    let p5_ok = worst_df <= opts.df_tol && worst_d2f <= opts.d2f_tol;
    let mut p5_note = Some(format!("max Df mismatch {worst_df:.3e}, max D2f mismatch {worst_d2f:.3e}"));
    if p.source() == DerivativeSource::FiniteDifference {
        p5_note = Some("derivatives are finite-difference fallbacks".into());
    }
    p5_witness.note = p5_note;
    records.push(HypothesisRecord {
        id: HypothesisId::P5,
        status: if p5_ok { AuditStatus::CertifiedOnGrid } else { AuditStatus::Violated },
        evidence: p5_witness,
    });

    // (N): |x(s,t,xi) + z_j(s)| must grow along rays for every j <= n_jmax.
    let n_probe = probe_growth_n(sys, p, &dirs, &opts.ray_radii, opts.n_jmax, probe_t)?;
    records.push(n_probe);

    // Smallness: strict comparison of the estimated constants.
    let (small_status, small_evidence, margin) = match &dichotomy {
        Some(est) => {
            let k_gamma = est.k_hat * lip.gamma_hat;
            let margin = est.alpha_hat - k_gamma;
            let status = if k_gamma < est.alpha_hat {
                AuditStatus::CertifiedOnGrid
            } else {
                AuditStatus::Violated
            };
            (
                status,
                Evidence {
                    time: 0.0,
                    point: vec![],
                    value: margin,
                    note: Some(format!("K*gamma = {k_gamma}, alpha = {}", est.alpha_hat)),
                },
                Some(margin),
            )
        }
        None => (
            AuditStatus::Violated,
            Evidence { time: 0.0, point: vec![], value: f64::NAN, note: Some("no contraction certified".into()) },
            None,
        ),
    };
    records.push(HypothesisRecord { id: HypothesisId::Smallness, status: small_status, evidence: small_evidence });

    Ok(AuditReport {
        records,
        dichotomy,
        gamma_hat: lip.gamma_hat,
        mu_hat: mu.mu_hat,
        gamma_used: p.declared_gamma().unwrap_or(lip.gamma_hat),
        mu_used: p.declared_mu().unwrap_or(mu.mu_hat),
        smallness_margin: margin,
        warnings,
    })
}

fn probe_directions(n: usize, seed: u64) -> Vec<DVector<f64>> {
    let mut dirs = Vec::new();
    for i in 0..n {
        let mut e = DVector::zeros(n);
        e[i] = 1.0;
        dirs.push(e.clone());
        dirs.push(-e);
    }
    if n > 1 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_00d1);
        for _ in 0..2 {
            let v = DVector::from_fn(n, |_, _| {
                rng.sample::<f64, _>(rand_distr::StandardNormal)
            });
            let norm = v.norm();
            if norm > 0.0 {
                dirs.push(v / norm);
            }
        }
    }
    dirs
}

fn probe_growth_n(
    sys: &LinearSystem,
    p: &Perturbation,
    dirs: &[DVector<f64>],
    radii: &[f64],
    j_max: usize,
    probe_t: f64,
) -> Result<HypothesisRecord, OdeError> {
    // The probe compares magnitudes across radius decades; a coarse
    // quadrature budget is plenty and keeps the large radii affordable.
    let popts = PicardOptions {
        tol: 1e-5,
        panels_per_unit: 24.0,
        min_panels: 24,
        ..PicardOptions::default()
    };
    let s_fracs = [0.0, 0.5, 1.0];
    let mut status = AuditStatus::ProbePassed;
    let mut evidence = Evidence { time: probe_t, point: vec![], value: 0.0, note: None };

    'outer: for u in dirs {
        // values[j][s_idx] per radius; require strict growth in the radius.
        let mut prev: Option<Vec<Vec<f64>>> = None;
        for &r in radii {
            let xi = u * r;
            let run = picard_iterates(sys, p, probe_t, &xi, j_max, &popts)?;
            let x_dense = run.x_dense();
            let mut vals = Vec::with_capacity(j_max + 1);
            for j in 0..=j_max {
                let mut per_s = Vec::with_capacity(s_fracs.len());
                for &fr in &s_fracs {
                    let s = fr * probe_t;
                    let x = x_dense.eval(s)?;
                    let z = run.iterate_at(j, s);
                    per_s.push((x + z).norm());
                }
                vals.push(per_s);
            }
            if let Some(prev_vals) = &prev {
                for j in 0..=j_max {
                    for (si, &v) in vals[j].iter().enumerate() {
                        if v <= prev_vals[j][si] {
                            status = AuditStatus::ProbeInconclusive;
                            evidence = Evidence {
                                time: s_fracs[si] * probe_t,
                                point: xi.iter().copied().collect(),
                                value: v,
                                note: Some(format!(
                                    "|x + z_{j}| plateaued at radius {r}: {} then {v}",
                                    prev_vals[j][si]
                                )),
                            };
                            break 'outer;
                        }
                    }
                }
            }
            evidence.value = vals[j_max][0];
            evidence.point = xi.iter().copied().collect();
            prev = Some(vals);
        }
    }

    Ok(HypothesisRecord { id: HypothesisId::N, status, evidence })
}
