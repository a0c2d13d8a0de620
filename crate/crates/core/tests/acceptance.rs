//! Acceptance suite: one test per criterion, each printing a pass line.
//! Criterion 9 (command-line audit behavior) lives in the CLI crate's
//! acceptance suite next to the binary it exercises.

use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use conjugacy_core::bounds::{
    check_gronwall, check_zj_bounds, gronwall_samples, modulus_check, ConstantSheet,
};
use conjugacy_core::conjugacy::{CoupledSystem, PicardOptions, SolveMethod};
use conjugacy_core::gallery::{load_gallery, GalleryId, GallerySystem};
use conjugacy_core::ode::{integrate_ivp, IntegratorOptions, IvpProblem, Method, State};
use conjugacy_core::smoothness::{hessian_g, jacobian_g, jacobian_h, SmoothnessOptions};

const T_GRID: [f64; 5] = [0.0, 0.5, 1.0, 2.0, 5.0];
const XI_GRID: [f64; 5] = [-3.0, -1.0, 0.0, 1.0, 3.0];

fn pass(criterion: u8, name: &str) {
    println!("acceptance criterion {criterion:02} ({name}): PASS");
}

fn grid_points(gs: &GallerySystem) -> Vec<DVector<f64>> {
    let n = gs.lin.n();
    let u = DVector::from_element(n, 1.0 / (n as f64).sqrt());
    XI_GRID.iter().map(|&xi| &u * xi).collect()
}

fn ball_points(n: usize, radius: f64, count: usize, seed: u64) -> Vec<DVector<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..count)
        .map(|_| {
            let dir = DVector::from_fn(n, |_, _| {
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

fn coupled(id: GalleryId) -> CoupledSystem {
    load_gallery(id).coupled().expect("gallery passes the smallness gate")
}

#[test]
fn criterion_01_oracle_equivalence() {
    let cs = coupled(GalleryId::G1);
    let mut worst = 0.0f64;
    for &t in &T_GRID {
        for &xi in &XI_GRID {
            let xiv = DVector::from_element(1, xi);
            let h_oracle = xi * (0.25 * t).exp();
            let h = cs.map_h(t, &xiv, SolveMethod::Ivp).unwrap().value[0];
            worst = worst.max((h - h_oracle).abs() / (1.0 + h_oracle.abs()));

            let g_oracle = xi * (-0.25 * t).exp();
            let g = cs.map_g(t, &xiv).unwrap().value[0];
            worst = worst.max((g - g_oracle).abs() / (1.0 + g_oracle.abs()));
        }
    }
    assert!(worst <= 1e-6, "worst oracle deviation {worst}");
    pass(1, "oracle equivalence on the scalar-linear system");
}

#[test]
fn criterion_02_inverse_identity() {
    for (id, tol) in [(GalleryId::G1, 1e-6), (GalleryId::G2, 1e-5), (GalleryId::G3, 1e-5)] {
        let gs = load_gallery(id);
        let cs = gs.coupled().unwrap();
        let mut points = grid_points(&gs);
        points.extend(ball_points(gs.lin.n(), 5.0, 20, 2024));
        let mut worst = 0.0f64;
        for &t in &T_GRID {
            for p in &points {
                let h = cs.map_h(t, p, SolveMethod::Ivp).unwrap().value;
                worst = worst.max((cs.map_g(t, &h).unwrap().value - p).norm());
                let g = cs.map_g(t, p).unwrap().value;
                worst = worst.max((cs.map_h(t, &g, SolveMethod::Ivp).unwrap().value - p).norm());
            }
        }
        assert!(worst <= tol, "{id:?}: worst inverse residual {worst} > {tol}");
    }
    pass(2, "inverse identity on all gallery systems");
}

#[test]
fn criterion_03_conjugacy_identity() {
    for id in [GalleryId::G1, GalleryId::G2, GalleryId::G3] {
        let gs = load_gallery(id);
        let cs = gs.coupled().unwrap();
        let n = gs.lin.n();
        let base = DVector::from_element(n, 2.0 / (n as f64).sqrt());
        for &tau in &[0.0, 0.5, 1.0] {
            let cert = cs.verify_conjugacy(tau, &base, &T_GRID, 1e-5).unwrap();
            assert!(
                cert.pass,
                "{id:?} tau={tau}: worst residual {:?}",
                cert.witness.map(|w| w.lhs)
            );
        }
    }
    pass(3, "conjugacy relations hold along solutions");
}

#[test]
fn criterion_04_picard_ivp_agreement() {
    let popts = PicardOptions::default();
    for id in [GalleryId::G1, GalleryId::G2, GalleryId::G3] {
        let gs = load_gallery(id);
        let cs = gs.coupled().unwrap();
        let points = ball_points(gs.lin.n(), 3.0, 10, 77);
        let mut rng = ChaCha8Rng::seed_from_u64(78);
        for p in &points {
            let tau = 0.25 + rng.random::<f64>();
            let direct = cs.z_star_ivp(tau, p).unwrap();
            let (_, picard) = cs.z_star_picard(tau, p, &popts).unwrap();
            let diff = (&picard.value - &direct.value).norm();
            assert!(diff <= 1e-6, "{id:?} at tau={tau}: |picard - ivp| = {diff}");

            let run = cs.picard_run(tau, p, &popts).unwrap();
            let bound = cs.constants().contraction() + 0.05;
            let incs = run.increments();
            for (i, r) in run.ratios().iter().enumerate() {
                // Ratio index i compares increments i and i+1, i.e. iterate j = i+1.
                if i >= 1 && incs[i + 1] > 1e-12 {
                    assert!(*r <= bound, "{id:?}: ratio {r} > {bound} at iterate {}", i + 1);
                }
            }
        }
    }
    pass(4, "fixed-point and direct routes agree, iteration contracts");
}

#[test]
fn criterion_05_jacobian_identity() {
    let opts = SmoothnessOptions::default();
    for id in [GalleryId::G1, GalleryId::G2, GalleryId::G3] {
        let gs = load_gallery(id);
        let cs = gs.coupled().unwrap();
        let n = gs.lin.n();
        let mut points = vec![DVector::from_element(n, 1.0), DVector::from_element(n, -0.5)];
        points.extend(ball_points(n, 2.0, 2, 5005));
        for &t in &[0.5, 1.0, 2.0] {
            for p in &points {
                let g = jacobian_g(&cs, t, p, &opts).expect("route agreement within 1e-5");
                assert!(g.cross_check.machine_vs_direct.unwrap() <= 1e-5);
                assert!(g.cross_check.fd_error.unwrap() <= 1e-5, "{id:?}: DG fd error {}", g.cross_check.fd_error.unwrap());
                assert!(g.cross_check.det.unwrap() > 0.0);
                let h = jacobian_h(&cs, t, p, &opts).unwrap();
                assert!(h.cross_check.identity_residual.unwrap() <= 1e-8);
            }
        }
    }
    pass(5, "Jacobian routes agree, determinant positive, inverse identity");
}

#[test]
fn criterion_06_hessian() {
    let opts = SmoothnessOptions::default();

    // Linear perturbation: the second derivative vanishes identically.
    let cs1 = coupled(GalleryId::G1);
    for &t in &[0.5, 1.0, 2.0] {
        let b = hessian_g(&cs1, t, &DVector::from_element(1, 1.0), &opts).unwrap();
        assert!(b.hessian.unwrap()[0].amax() <= 1e-8);
    }

    for id in [GalleryId::G2, GalleryId::G3] {
        let gs = load_gallery(id);
        let cs = gs.coupled().unwrap();
        let n = gs.lin.n();
        for p in [DVector::from_element(n, 1.0), DVector::from_element(n, -0.75)] {
            let b = hessian_g(&cs, 1.0, &p, &opts).expect("second differences agree within 1e-3");
            assert!(b.cross_check.fd_error.unwrap() <= 1e-3);
            assert!(b.cross_check.symmetry_defect.unwrap() <= 1e-8);
        }
    }
    pass(6, "Hessians validated against second differences and symmetric");
}

#[test]
fn criterion_07_bound_certificates() {
    for id in [GalleryId::G1, GalleryId::G2, GalleryId::G3] {
        let gs = load_gallery(id);
        let cs = gs.coupled().unwrap();
        let n = gs.lin.n();

        let samples = gronwall_samples(n, 3.0, 30, 3.0, 4242);
        let [prop, cor, eq] = check_gronwall(&cs, &samples).unwrap();
        for cert in [&prop, &cor, &eq] {
            assert!(
                cert.pass,
                "{id:?} {}: worst normalized margin {}",
                cert.id, cert.worst_margin_normalized
            );
        }

        let base = DVector::from_element(n, 1.0);
        let zj = check_zj_bounds(&cs, 1.0, &base, 5, &PicardOptions::default()).unwrap();
        assert!(zj.pass, "{id:?} {}: worst {}", zj.id, zj.worst_margin_normalized);

        let pts = ball_points(n, 1.0, 40, 909);
        let pairs: Vec<_> = pts.chunks(2).map(|c| (c[0].clone(), c[1].clone())).collect();
        let modulus = modulus_check(&cs, &T_GRID, &pairs, 0.1).unwrap();
        assert!(modulus.pass, "{id:?} {}: worst {}", modulus.id, modulus.worst_margin_normalized);
    }
    pass(7, "all bound certificates pass with nonnegative margins");
}

#[test]
fn criterion_08_constant_formulas() {
    let sheet = ConstantSheet { k: 1.0, alpha: 1.0, m: 1.0, gamma: 0.25, mu: 0.0 };
    assert!((sheet.theta0(2.0) - 0.5).abs() <= 1e-12);
    assert!((sheet.theta(2.0) - 0.5f64.exp()).abs() <= 1e-12);
    let (l, _) = sheet.critical_times(0.1, 2.0);
    assert!((l - 10.0f64.ln()).abs() <= 1e-12);
    assert!((sheet.delta_increment(0.1, 0.5) - 0.075).abs() <= 1e-12);
    pass(8, "constant formulas reproduce their reference values exactly");
}

#[test]
fn criterion_10_ode_layer() {
    // Order-4 convergence under step halving on the exponential problem.
    let field = |_t: f64, x: &State| -x;
    let exact = (-1.0f64).exp();
    let mut errs = Vec::new();
    for h in [0.1, 0.05] {
        let opts = IntegratorOptions { method: Method::FixedRk4, initial_step: h, ..Default::default() };
        let traj = integrate_ivp(
            &IvpProblem { field: &field, t0: 0.0, state0: DVector::from_element(1, 1.0), t1: 1.0 },
            &opts,
        )
        .unwrap();
        errs.push((traj.eval(1.0).unwrap()[0] - exact).abs());
    }
    let factor = errs[0] / errs[1];
    assert!(factor >= 8.0, "convergence factor {factor}");

    // Reverse consistency within 10x the tolerance budget.
    let field = |t: f64, x: &State| {
        DVector::from_vec(vec![x[1], -x[0] + 0.1 * (0.7 * t).cos()])
    };
    let opts = IntegratorOptions::default();
    let state0 = DVector::from_vec(vec![1.0, 0.0]);
    let fwd = integrate_ivp(&IvpProblem { field: &field, t0: 0.0, state0: state0.clone(), t1: 4.0 }, &opts).unwrap();
    let end = fwd.eval(4.0).unwrap();
    let back = integrate_ivp(&IvpProblem { field: &field, t0: 4.0, state0: end, t1: 0.0 }, &opts).unwrap();
    let err = (back.eval(0.0).unwrap() - &state0).norm();
    assert!(err <= 10.0 * (opts.abs_tol + opts.rel_tol * state0.norm()), "reverse error {err}");

    pass(10, "integrator order and reverse consistency");
}

// The gallery invariant backing criteria 1-6: every numerical map matches
// the scalar-linear closed forms across the full grid.
#[test]
fn gallery_oracle_cross_check() {
    let gs = load_gallery(GalleryId::G1);
    let cs = gs.coupled().unwrap();
    let zstar = gs.oracles.zstar.as_ref().unwrap();
    let dg = gs.oracles.dg.as_ref().unwrap();
    let opts = SmoothnessOptions::default();
    let mut worst = 0.0f64;
    for &t in &T_GRID {
        for &xi in &XI_GRID {
            let p = DVector::from_element(1, xi);
            let z = cs.z_star_ivp(t, &p).unwrap().value;
            worst = worst.max((z - zstar(t, &p)).norm() / (1.0 + zstar(t, &p).norm()));
            let b = jacobian_g(&cs, t, &p, &opts).unwrap();
            worst = worst.max((b.jacobian[(0, 0)] - dg(t, &p)[(0, 0)]).abs());
        }
    }
    assert!(worst <= 1e-6, "worst oracle mismatch {worst}");

    // Arc-shared caches serve both the gallery handle and the coupled system.
    assert!(Arc::strong_count(&gs.lin) >= 2);
    let _ = DMatrix::<f64>::identity(1, 1);
}
