//! Built-in example systems with known constants and closed-form oracles.
//!
//! # Oracle derivations
//!
//! **G1 "scalar-linear"** (`A = -1`, `f = c x` with `c = 0.25`, so the
//! perturbed flow is `y' = -(1-c) y`):
//!
//! * `Phi(t,s) = e^{-(t-s)}`, `x(s,t,xi) = xi e^{-(s-t)}`,
//!   `y(s,t,eta) = eta e^{-(1-c)(s-t)}`.
//! * `z(.; (tau,xi))` solves `z' = -z + c(x(t,tau,xi) + z)
//!   = -(1-c) z + c xi e^{tau - t}`, `z(0) = 0`. The integrating factor
//!   `e^{(1-c)t}` gives `z(t) = xi e^{tau}(e^{-(1-c)t} - e^{-t})`; at
//!   `t = tau` this collapses to `z*(tau;(tau,xi)) = xi (e^{c tau} - 1)`,
//!   hence `H(t, xi) = xi e^{c t}`.
//! * `w*(t;(t,eta)) = -int_0^t e^{-(t-s)} c eta e^{-(1-c)(s-t)} ds
//!   = eta (e^{-c t} - 1)`, hence `G(t, eta) = eta e^{-c t}` and
//!   `DG(t, .) = e^{-c t}`; `G(t, H(t, xi)) = xi` holds identically.
//!
//! **G2 "scalar-softplus"** (`A = -1`, `f = 0.2 (sqrt(1+x^2) + cos t)`): no
//! closed-form equivalence; `sup |df/dx| = 0.2` and `sup_t |f(t,0)| =
//! 0.2 (1 + cos 0) = 0.4`. `Phi` and `x` as in G1.
//!
//! **G3 "planar-rotating"** (`A(t) = -I + 0.5 cos(t) J` with
//! `J = [[0,1],[-1,0]]`, `f = 0.15 y + 0.1 (sin y2, sin y1)`): the family
//! `A(t)` commutes with itself, so `Phi(t,s) = exp(int_s^t A)` splits into
//! `e^{-(t-s)} exp(theta J)` with `theta = 0.5 (sin t - sin s)`; `exp(theta
//! J)` is the rotation `[[cos, sin], [-sin, cos]](theta)`, an isometry, so
//! `||Phi(t,s)||_2 = e^{-(t-s)}` and `K = 1, alpha = 1` exactly. `M =
//! sup ||A||_2 = sqrt(1 + 0.25)` since `A^T A = (1 + 0.25 cos^2 t) I` at the
//! extremes. `||Df||_2 <= 0.15 + 0.1 = 0.25`, attained at the origin.
//!
//! **X1 "smallness-violator"**: G1 with `f = 2x`; `K gamma = 2 > 1 = alpha`,
//! so the audit must reject it.

use std::str::FromStr;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use thiserror::Error;

use crate::conjugacy::{ConjugacyError, CoupledSystem, SystemConstants};
use crate::linear::LinearSystem;
use crate::perturbation::Perturbation;

pub const GALLERY_HORIZON: f64 = 5.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum GalleryId {
    G1,
    G2,
    G3,
    X1,
}

impl GalleryId {
    pub fn as_str(&self) -> &'static str {
        match self {
            GalleryId::G1 => "G1",
            GalleryId::G2 => "G2",
            GalleryId::G3 => "G3",
            GalleryId::X1 => "X1",
        }
    }

    pub fn all() -> [GalleryId; 4] {
        [GalleryId::G1, GalleryId::G2, GalleryId::G3, GalleryId::X1]
    }
}

impl FromStr for GalleryId {
    type Err = GalleryError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "G1" | "g1" => Ok(GalleryId::G1),
            "G2" | "g2" => Ok(GalleryId::G2),
            "G3" | "g3" => Ok(GalleryId::G3),
            "X1" | "x1" => Ok(GalleryId::X1),
            other => Err(GalleryError::UnknownGalleryId(other.to_string())),
        }
    }
}

#[derive(Debug, Error)]
pub enum GalleryError {
    #[error("unknown gallery id `{0}`")]
    UnknownGalleryId(String),
    #[error("oracle `{which}` not available for {id}")]
    OracleUnavailable { id: &'static str, which: &'static str },
}

#[derive(Clone, Copy, Debug)]
pub struct DeclaredConstants {
    pub k: f64,
    pub alpha: f64,
    pub m: f64,
    pub gamma: f64,
    pub mu: f64,
}

impl DeclaredConstants {
    pub fn to_system_constants(&self) -> SystemConstants {
        SystemConstants { k: self.k, alpha: self.alpha, m: self.m, gamma: self.gamma, mu: self.mu }
    }
}

type PhiOracle = Arc<dyn Fn(f64, f64) -> DMatrix<f64> + Send + Sync>;
type FlowOracle = Arc<dyn Fn(f64, f64, &DVector<f64>) -> DVector<f64> + Send + Sync>;
type MapOracle = Arc<dyn Fn(f64, &DVector<f64>) -> DVector<f64> + Send + Sync>;
type JacOracle = Arc<dyn Fn(f64, &DVector<f64>) -> DMatrix<f64> + Send + Sync>;

/// Closed-form references; absent entries mean validation falls back to
/// finite differences and round trips.
#[derive(Default, Clone)]
pub struct Oracles {
    pub phi: Option<PhiOracle>,
    /// `x(s, t, xi)`.
    pub x: Option<FlowOracle>,
    /// `y(s, t, eta)`.
    pub y: Option<FlowOracle>,
    /// `z*(t; (t, xi))`.
    pub zstar: Option<MapOracle>,
    pub h: Option<MapOracle>,
    pub g: Option<MapOracle>,
    pub dg: Option<JacOracle>,
}

pub struct GallerySystem {
    pub id: GalleryId,
    pub lin: Arc<LinearSystem>,
    pub pert: Arc<Perturbation>,
    pub declared: DeclaredConstants,
    pub oracles: Oracles,
}

impl GallerySystem {
    /// Coupled system under the declared constants (the smallness gate
    /// applies, so this fails for X1).
    pub fn coupled(&self) -> Result<CoupledSystem, ConjugacyError> {
        CoupledSystem::new(
            Arc::clone(&self.lin),
            Arc::clone(&self.pert),
            self.declared.to_system_constants(),
        )
    }

    pub fn coupled_unchecked(&self) -> CoupledSystem {
        CoupledSystem::new_unchecked(
            Arc::clone(&self.lin),
            Arc::clone(&self.pert),
            self.declared.to_system_constants(),
        )
    }
}

pub fn load_gallery(id: GalleryId) -> GallerySystem {
    match id {
        GalleryId::G1 => scalar_linear(0.25, GalleryId::G1),
        GalleryId::X1 => scalar_linear(2.0, GalleryId::X1),
        GalleryId::G2 => scalar_softplus(),
        GalleryId::G3 => planar_rotating(),
    }
}

fn scalar_contraction_lin() -> Arc<LinearSystem> {
    Arc::new(LinearSystem::new(
        1,
        Arc::new(|_t| DMatrix::from_element(1, 1, -1.0)),
        GALLERY_HORIZON,
    ))
}

fn scalar_linear(c: f64, id: GalleryId) -> GallerySystem {
    let lin = scalar_contraction_lin();
    let pert = Arc::new(
        Perturbation::from_closures(
            1,
            Arc::new(move |_t, x: &DVector<f64>| x * c),
            Arc::new(move |_t, _x: &DVector<f64>| DMatrix::from_element(1, 1, c)),
            Arc::new(|_t, _x: &DVector<f64>| vec![DMatrix::zeros(1, 1)]),
        )
        .with_declared(Some(c), Some(0.0)),
    );
    let oracles = Oracles {
        phi: Some(Arc::new(|t, s| DMatrix::from_element(1, 1, (-(t - s)).exp()))),
        x: Some(Arc::new(|s, t, xi: &DVector<f64>| xi * (-(s - t)).exp())),
        y: Some(Arc::new(move |s, t, eta: &DVector<f64>| eta * (-(1.0 - c) * (s - t)).exp())),
        zstar: Some(Arc::new(move |t, xi: &DVector<f64>| xi * ((c * t).exp() - 1.0))),
        h: Some(Arc::new(move |t, xi: &DVector<f64>| xi * (c * t).exp())),
        g: Some(Arc::new(move |t, eta: &DVector<f64>| eta * (-c * t).exp())),
        dg: Some(Arc::new(move |t, _eta: &DVector<f64>| DMatrix::from_element(1, 1, (-c * t).exp()))),
    };
    GallerySystem {
        id,
        lin,
        pert,
        declared: DeclaredConstants { k: 1.0, alpha: 1.0, m: 1.0, gamma: c, mu: 0.0 },
        oracles,
    }
}

fn scalar_softplus() -> GallerySystem {
    let lin = scalar_contraction_lin();
    let pert = Arc::new(
        Perturbation::from_dsl(&["0.2*(sqrt(1+x1^2)+cos(t))".into()], 1)
            .expect("gallery expression parses")
            .with_declared(Some(0.2), Some(0.4)),
    );
    let oracles = Oracles {
        phi: Some(Arc::new(|t, s| DMatrix::from_element(1, 1, (-(t - s)).exp()))),
        x: Some(Arc::new(|s, t, xi: &DVector<f64>| xi * (-(s - t)).exp())),
        ..Default::default()
    };
    GallerySystem {
        id: GalleryId::G2,
        lin,
        pert,
        declared: DeclaredConstants { k: 1.0, alpha: 1.0, m: 1.0, gamma: 0.2, mu: 0.4 },
        oracles,
    }
}

fn planar_rotating() -> GallerySystem {
    let lin = Arc::new(LinearSystem::new(
        2,
        Arc::new(|t: f64| {
            let c = 0.5 * t.cos();
            DMatrix::from_row_slice(2, 2, &[-1.0, c, -c, -1.0])
        }),
        GALLERY_HORIZON,
    ));
    let pert = Arc::new(
        Perturbation::from_dsl(
            &["0.15*x1+0.1*sin(x2)".into(), "0.15*x2+0.1*sin(x1)".into()],
            2,
        )
        .expect("gallery expression parses")
        .with_declared(Some(0.25), Some(0.0)),
    );
    let phi = |t: f64, s: f64| -> DMatrix<f64> {
        let theta = 0.5 * (t.sin() - s.sin());
        let scale = (-(t - s)).exp();
        DMatrix::from_row_slice(
            2,
            2,
            &[
                scale * theta.cos(),
                scale * theta.sin(),
                -scale * theta.sin(),
                scale * theta.cos(),
            ],
        )
    };
    let oracles = Oracles {
        phi: Some(Arc::new(phi)),
        x: Some(Arc::new(move |s, t, xi: &DVector<f64>| phi(s, t) * xi)),
        ..Default::default()
    };
    GallerySystem {
        id: GalleryId::G3,
        lin,
        pert,
        declared: DeclaredConstants { k: 1.0, alpha: 1.0, m: 1.25f64.sqrt(), gamma: 0.25, mu: 0.0 },
        oracles,
    }
}

/// Which oracle to evaluate through [`oracle_eval`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum OracleMap {
    Phi,
    X,
    Y,
    ZStar,
    H,
    G,
    Dg,
}

impl OracleMap {
    fn name(&self) -> &'static str {
        match self {
            OracleMap::Phi => "Phi",
            OracleMap::X => "x",
            OracleMap::Y => "y",
            OracleMap::ZStar => "zstar",
            OracleMap::H => "H",
            OracleMap::G => "G",
            OracleMap::Dg => "DG",
        }
    }
}

/// Arguments for [`oracle_eval`]: `time` is the evaluation time (`s` for the
/// flow oracles), `second_time` the anchor time where applicable, `point`
/// the state argument.
#[derive(Clone, Debug, Default)]
pub struct OracleArgs {
    pub time: f64,
    pub second_time: Option<f64>,
    pub point: Option<DVector<f64>>,
}

pub enum OracleValue {
    Vector(DVector<f64>),
    Matrix(DMatrix<f64>),
}

pub fn oracle_eval(gs: &GallerySystem, which: OracleMap, args: &OracleArgs) -> Result<OracleValue, GalleryError> {
    let missing = || GalleryError::OracleUnavailable { id: gs.id.as_str(), which: which.name() };
    let point = || args.point.clone().ok_or_else(missing);
    match which {
        OracleMap::Phi => {
            let f = gs.oracles.phi.as_ref().ok_or_else(missing)?;
            Ok(OracleValue::Matrix(f(args.time, args.second_time.unwrap_or(0.0))))
        }
        OracleMap::X => {
            let f = gs.oracles.x.as_ref().ok_or_else(missing)?;
            Ok(OracleValue::Vector(f(args.time, args.second_time.unwrap_or(0.0), &point()?)))
        }
        OracleMap::Y => {
            let f = gs.oracles.y.as_ref().ok_or_else(missing)?;
            Ok(OracleValue::Vector(f(args.time, args.second_time.unwrap_or(0.0), &point()?)))
        }
        OracleMap::ZStar => {
            let f = gs.oracles.zstar.as_ref().ok_or_else(missing)?;
            Ok(OracleValue::Vector(f(args.time, &point()?)))
        }
        OracleMap::H => {
            let f = gs.oracles.h.as_ref().ok_or_else(missing)?;
            Ok(OracleValue::Vector(f(args.time, &point()?)))
        }
        OracleMap::G => {
            let f = gs.oracles.g.as_ref().ok_or_else(missing)?;
            Ok(OracleValue::Vector(f(args.time, &point()?)))
        }
        OracleMap::Dg => {
            let f = gs.oracles.dg.as_ref().ok_or_else(missing)?;
            Ok(OracleValue::Matrix(f(args.time, &point()?)))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linear::{dichotomy_grid, op_norm2};
    use crate::perturbation::{audit_hypotheses, AuditOptions, AuditStatus, HypothesisId};
    use approx::assert_relative_eq;

    #[test]
    fn ids_parse_and_unknown_is_rejected() {
        assert_eq!("G1".parse::<GalleryId>().unwrap(), GalleryId::G1);
        assert_eq!("x1".parse::<GalleryId>().unwrap(), GalleryId::X1);
        assert!(matches!("G9".parse::<GalleryId>(), Err(GalleryError::UnknownGalleryId(_))));
    }

    #[test]
    fn oracle_self_consistency() {
        let gs = load_gallery(GalleryId::G1);
        let h = gs.oracles.h.as_ref().unwrap();
        let g = gs.oracles.g.as_ref().unwrap();
        for &t in &[0.0, 0.5, 1.0, 2.0, 5.0] {
            for &xi in &[-3.0, -1.0, 0.0, 1.0, 3.0] {
                let xiv = DVector::from_element(1, xi);
                let round = g(t, &h(t, &xiv));
                assert_relative_eq!(round[0], xi, epsilon = 1e-12);
            }
        }
    }

    #[test]
    fn oracle_spot_values() {
        let gs = load_gallery(GalleryId::G1);
        let h = gs.oracles.h.as_ref().unwrap();
        assert_relative_eq!(
            h(1.0, &DVector::from_element(1, 2.0))[0],
            2.0 * 0.25f64.exp(),
            epsilon = 1e-12
        );
        let g = gs.oracles.g.as_ref().unwrap();
        assert_relative_eq!(
            g(1.0, &DVector::from_element(1, 2.0 * 0.25f64.exp()))[0],
            2.0,
            epsilon = 1e-12
        );
        let z = gs.oracles.zstar.as_ref().unwrap();
        assert_eq!(z(0.0, &DVector::from_element(1, 4.0))[0], 0.0);
    }

    #[test]
    fn oracle_eval_dispatch() {
        let gs = load_gallery(GalleryId::G1);
        let v = oracle_eval(
            &gs,
            OracleMap::H,
            &OracleArgs { time: 1.0, second_time: None, point: Some(DVector::from_element(1, 2.0)) },
        )
        .unwrap();
        match v {
            OracleValue::Vector(v) => assert_relative_eq!(v[0], 2.0 * 0.25f64.exp(), epsilon = 1e-12),
            _ => panic!("expected vector"),
        }
        let gs2 = load_gallery(GalleryId::G2);
        assert!(matches!(
            oracle_eval(&gs2, OracleMap::H, &OracleArgs::default()),
            Err(GalleryError::OracleUnavailable { .. })
        ));
    }

    #[test]
    fn g3_phi_oracle_matches_integration() {
        let gs = load_gallery(GalleryId::G3);
        let phi_oracle = gs.oracles.phi.as_ref().unwrap();
        for &(t, s) in &[(1.0, 0.0), (3.2, 1.1), (5.0, 4.0)] {
            let numeric = gs.lin.transition_matrix(t, s).unwrap();
            let exact = phi_oracle(t, s);
            assert!(op_norm2(&(numeric - &exact)) <= 1e-8);
            assert_relative_eq!(op_norm2(&exact), (-(t - s)).exp(), epsilon = 1e-12);
        }
    }

    #[test]
    fn g1_audit_passes_with_declared_margin() {
        let gs = load_gallery(GalleryId::G1);
        let report = audit_hypotheses(&gs.lin, &gs.pert, &AuditOptions::default()).unwrap();
        assert!(report.passed());
        assert_relative_eq!(report.smallness_margin.unwrap(), 0.75, epsilon = 1e-6);
    }

    #[test]
    fn x1_fails_smallness_and_gate() {
        let gs = load_gallery(GalleryId::X1);
        let report = audit_hypotheses(&gs.lin, &gs.pert, &AuditOptions::default()).unwrap();
        assert_eq!(
            report.record(HypothesisId::Smallness).unwrap().status,
            AuditStatus::Violated
        );
        assert!(gs.coupled().is_err());
        assert!(gs.coupled_unchecked().outside_theorem());
    }

    #[test]
    fn g3_dichotomy_estimates() {
        let gs = load_gallery(GalleryId::G3);
        let est = gs.lin.estimate_dichotomy(&dichotomy_grid(GALLERY_HORIZON, 6, 11)).unwrap();
        assert_relative_eq!(est.k_hat, 1.0, epsilon = 1e-4);
        assert_relative_eq!(est.alpha_hat, 1.0, epsilon = 1e-4);
    }

    #[test]
    fn gallery_expressions_diff_matches_finite_differences() {
        use crate::dsl::{diff_expr, eval_expr, parse_expr, DiffVar, Env};
        use rand::{Rng, SeedableRng};
        let cases: [(&str, usize); 4] = [
            ("0.25*x1", 1),
            ("0.2*(sqrt(1+x1^2)+cos(t))", 1),
            ("0.15*x1+0.1*sin(x2)", 2),
            ("0.15*x2+0.1*sin(x1)", 2),
        ];
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(17);
        for (text, n) in cases {
            let e = parse_expr(text, n).unwrap();
            for var in 0..n {
                let d = diff_expr(&e, DiffVar::X(var)).unwrap();
                for _ in 0..100 {
                    let t = rng.random::<f64>() * 5.0;
                    let x: Vec<f64> =
                        (0..n).map(|_| (rng.random::<f64>() * 2.0 - 1.0) * 5.0).collect();
                    let sym = eval_expr(&d, &Env { t, x: &x }).unwrap();
                    let h = 1e-5;
                    let mut xp = x.clone();
                    let mut xm = x.clone();
                    xp[var] += h;
                    xm[var] -= h;
                    let fd = (eval_expr(&e, &Env { t, x: &xp }).unwrap()
                        - eval_expr(&e, &Env { t, x: &xm }).unwrap())
                        / (2.0 * h);
                    assert!(
                        (sym - fd).abs() / sym.abs().max(1.0) <= 1e-6,
                        "{text} d/dx{} at {x:?}: sym {sym} fd {fd}",
                        var + 1
                    );
                }
            }
        }
    }
}
