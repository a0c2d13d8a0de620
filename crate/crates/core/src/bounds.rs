//! Explicit constant formulas and inequality certificates.
//!
//! The constant sheet carries `K, alpha, M, gamma, mu` and evaluates the
//! auxiliary functions
//!
//! * `theta0(t) = K gamma t` when `alpha = M`, else
//!   `K gamma (e^{(M-alpha)t} - 1) / (M - alpha)`,
//! * `theta(t) = 1 + K gamma (e^{(M+gamma-alpha)t} - 1) / (M+gamma-alpha)`,
//!
//! together with the critical times `L*(eps) = ln(2 gamma omega K / (alpha
//! eps)) / alpha` and `L(eps)` (same formula with `beta`), their maxima
//! `Theta0* = theta0(L*)`, `theta* = theta(L)` (right-endpoint maxima since
//! both functions are nondecreasing), and the uniform-continuity seed
//! recursion `delta_{j+1}(eps) = min(delta_j(eps/2),
//! (eps / (2 Theta0*)) (1 - K gamma / alpha))` seeded with
//! `delta_0(eps) = eps / (2 Theta0*)`.
//!
//! The certificate operations check, on sample grids:
//!
//! * the two-sided Gronwall sandwich for forward differences of perturbed
//!   solutions (`Prop-2.3`),
//! * the coefficient-bound sandwich for linear solutions (`Cor-2.4`),
//! * the backward Gronwall bound `|y(s,t,eta) - y(s,t,eta')| <=
//!   |eta - eta'| e^{(M+gamma)(t-s)}` for `0 <= s <= t` (`Eq-400`),
//! * the fixed-point iterate bounds `|z_j| <= (K/alpha)(gamma |x +
//!   z_{j-1}|_inf + mu)` (`Lemma-3.4`), and
//! * the two-regime modulus of continuity of `G` (`Thm-3.6`).
//!
//! Sup norms are grid sups over the iterate grid plus midpoints; `omega` and
//! `beta` are computed from the actual trajectories on the truncated horizon
//! and recorded in the certificates, never assumed.

use nalgebra::DVector;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::cert::{Certificate, CertificateBuilder, Witness};
use crate::conjugacy::{ConjugacyError, CoupledSystem, PicardOptions, SystemConstants};
use crate::ode::OdeError;

pub const ANCHOR_PROP_2_3: &str = "Prop-2.3";
pub const ANCHOR_COR_2_4: &str = "Cor-2.4";
pub const ANCHOR_EQ_400: &str = "Eq-400";
pub const ANCHOR_LEMMA_3_4: &str = "Lemma-3.4";
pub const ANCHOR_THM_3_6: &str = "Thm-3.6";

/// Tolerance for detecting the `alpha = M` branch.
pub const BRANCH_TOL: f64 = 1e-9;

#[derive(Clone, Copy, Debug)]
pub struct ConstantSheet {
    pub k: f64,
    pub alpha: f64,
    pub m: f64,
    pub gamma: f64,
    pub mu: f64,
}

impl From<&SystemConstants> for ConstantSheet {
    fn from(c: &SystemConstants) -> Self {
        Self { k: c.k, alpha: c.alpha, m: c.m, gamma: c.gamma, mu: c.mu }
    }
}

impl ConstantSheet {
    pub fn contraction(&self) -> f64 {
        self.k * self.gamma / self.alpha
    }

    /// `theta0(t)`, branch selected by `|alpha - M| <= BRANCH_TOL`.
    pub fn theta0(&self, t: f64) -> f64 {
        let d = self.m - self.alpha;
        if d.abs() <= BRANCH_TOL {
            self.k * self.gamma * t
        } else {
            self.k * self.gamma * ((d * t).exp() - 1.0) / d
        }
    }

    /// `theta(t) = 1 + K gamma (e^{(M+gamma-alpha)t} - 1)/(M+gamma-alpha)`.
    pub fn theta(&self, t: f64) -> f64 {
        let d = self.m + self.gamma - self.alpha;
        if d.abs() <= BRANCH_TOL {
            1.0 + self.k * self.gamma * t
        } else {
            1.0 + self.k * self.gamma * ((d * t).exp() - 1.0) / d
        }
    }

    fn critical_time(&self, eps: f64, scale: f64) -> f64 {
        assert!(eps > 0.0, "eps must be positive");
        let arg = 2.0 * self.gamma * scale * self.k / (self.alpha * eps);
        if arg <= 1.0 {
            0.0
        } else {
            arg.ln() / self.alpha
        }
    }

    /// `(L*(eps), Theta0*)` from the sup constant `omega`. Both `theta0` and
    /// `theta` are nondecreasing, so the maxima sit at the right endpoint.
    pub fn critical_times_star(&self, eps: f64, omega: f64) -> (f64, f64) {
        let l_star = self.critical_time(eps, omega);
        (l_star, self.theta0(l_star))
    }

    /// `(L(eps), theta*)` from the sup constant `beta`.
    pub fn critical_times(&self, eps: f64, beta: f64) -> (f64, f64) {
        let l = self.critical_time(eps, beta);
        (l, self.theta(l))
    }

    /// The non-recursive term of the `delta` recursion.
    pub fn delta_increment(&self, eps: f64, theta0_star: f64) -> f64 {
        (eps / (2.0 * theta0_star)) * (1.0 - self.contraction())
    }

    /// `delta_j(eps)` unrolled: seeded with `eps / (2 Theta0*)`, then
    /// `delta_{j+1}(eps) = min(delta_j(eps/2), delta_increment(eps))`.
    pub fn delta_recursion(&self, eps: f64, j: usize, theta0_star: f64) -> f64 {
        assert!(self.contraction() < 1.0, "recursion requires the contraction");
        if j == 0 {
            eps / (2.0 * theta0_star)
        } else {
            self.delta_recursion(0.5 * eps, j - 1, theta0_star)
                .min(self.delta_increment(eps, theta0_star))
        }
    }
}

/// Sup constant `omega = sup_s |x(s) + z_j(s)|` from a fixed-point run. The
/// iterate index is not pinned by the defining display, so the sup is taken
/// over all iterates `j <= j_max` and that choice is recorded by the caller.
pub fn omega_from_iterates(run: &crate::conjugacy::PicardRun, j_max: usize) -> f64 {
    let mut omega: f64 = 0.0;
    for &s in run.grid() {
        let x = match run.x_dense().eval(s) {
            Ok(v) => v,
            Err(_) => continue,
        };
        for j in 0..=j_max.min(run.iterate_count().saturating_sub(1)) {
            omega = omega.max((&x + run.iterate_at(j, s)).norm());
        }
    }
    omega
}

/// One Gronwall sample: anchor times `t >= s` and a pair of initial points.
#[derive(Clone, Debug)]
pub struct GronwallSample {
    pub t: f64,
    pub s: f64,
    pub eta: DVector<f64>,
    pub eta_bar: DVector<f64>,
}

/// Seeded sample pairs with `t >= s` spanning the horizon.
pub fn gronwall_samples(n: usize, horizon: f64, count: usize, radius: f64, seed: u64) -> Vec<GronwallSample> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(count);
    for _ in 0..count {
        let a = rng.random::<f64>() * horizon;
        let b = rng.random::<f64>() * horizon;
        let (t, s) = if a >= b { (a, b) } else { (b, a) };
        let eta = DVector::from_fn(n, |_, _| (rng.random::<f64>() * 2.0 - 1.0) * radius);
        let eta_bar = DVector::from_fn(n, |_, _| (rng.random::<f64>() * 2.0 - 1.0) * radius);
        out.push(GronwallSample { t, s, eta, eta_bar });
    }
    out
}

/// The three Gronwall certificates evaluated on the sample pairs, in order
/// `[Prop-2.3, Cor-2.4, Eq-400]`.
pub fn check_gronwall(
    cs: &CoupledSystem,
    samples: &[GronwallSample],
) -> Result<[Certificate; 3], ConjugacyError> {
    let c = ConstantSheet::from(cs.constants());
    let horizon = cs.horizon();
    let mut prop = CertificateBuilder::new(ANCHOR_PROP_2_3, horizon).outside_theorem(cs.outside_theorem());
    let mut cor = CertificateBuilder::new(ANCHOR_COR_2_4, horizon).outside_theorem(cs.outside_theorem());
    let mut eq = CertificateBuilder::new(ANCHOR_EQ_400, horizon).outside_theorem(cs.outside_theorem());

    for sample in samples {
        let (t, s) = (sample.t, sample.s);
        debug_assert!(t >= s);
        let sep = t - s;
        let d_eta = (&sample.eta - &sample.eta_bar).norm();
        let witness = |lhs: f64, rhs: f64| Witness {
            time: t,
            second_time: Some(s),
            point: sample.eta.iter().copied().collect(),
            lhs,
            rhs,
        };

        // Forward two-sided sandwich for perturbed solutions.
        let y_fwd = cs.nonlinear_solution(t, s, &sample.eta)?;
        let y_fwd_bar = cs.nonlinear_solution(t, s, &sample.eta_bar)?;
        let dy_fwd = (&y_fwd - &y_fwd_bar).norm();
        let lower = d_eta / c.k * (-(c.alpha + c.k * c.gamma) * sep).exp();
        let upper = c.k * d_eta * ((-c.alpha + c.k * c.gamma) * sep).exp();
        prop.check(lower, dy_fwd, witness(lower, dy_fwd));
        prop.check(dy_fwd, upper, witness(dy_fwd, upper));

        // Coefficient-bound sandwich for the linear difference, which itself
        // solves the linear system.
        let d_xi = &sample.eta - &sample.eta_bar;
        let dx = cs.lin().linear_solution(t, s, &d_xi)?.norm();
        let lower = d_eta * (-c.m * sep).exp();
        let upper = d_eta * (c.m * sep).exp();
        cor.check(lower, dx, witness(lower, dx));
        cor.check(dx, upper, witness(dx, upper));

        // Backward bound: anchor at t, evaluate at s <= t.
        let y_back = cs.nonlinear_solution(s, t, &sample.eta)?;
        let y_back_bar = cs.nonlinear_solution(s, t, &sample.eta_bar)?;
        let dy_back = (&y_back - &y_back_bar).norm();
        let bound = d_eta * ((c.m + c.gamma) * sep).exp();
        eq.check(dy_back, bound, witness(dy_back, bound));
    }

    Ok([prop.finish(), cor.finish(), eq.finish()])
}

/// Per-iterate bounds `|z_j(s)| <= (K/alpha)(gamma |x + z_{j-1}|_inf + mu)`
/// for `j <= j_max` (the `j = 0` bound uses `|x|_inf` alone).
pub fn check_zj_bounds(
    cs: &CoupledSystem,
    tau: f64,
    xi: &DVector<f64>,
    j_max: usize,
    popts: &PicardOptions,
) -> Result<Certificate, OdeError> {
    let c = ConstantSheet::from(cs.constants());
    let run = crate::conjugacy::picard_iterates(cs.lin(), cs.pert(), tau, xi, j_max, popts)?;
    let mut cert =
        CertificateBuilder::new(ANCHOR_LEMMA_3_4, cs.horizon()).outside_theorem(cs.outside_theorem());
    cert.note(format!(
        "sup norms taken over the {}-point iterate grid plus midpoints on [0, {tau}]",
        run.grid().len()
    ));

    // Evaluation points: iterate grid plus midpoints.
    let grid = run.grid().to_vec();
    let mut points = grid.clone();
    for w in grid.windows(2) {
        points.push(0.5 * (w[0] + w[1]));
    }

    let x_at = |s: f64| run.x_dense().eval(s.clamp(0.0, tau));
    let x_sup = {
        let mut sup: f64 = 0.0;
        for &s in &points {
            sup = sup.max(x_at(s)?.norm());
        }
        sup
    };

    for j in 0..=j_max.min(run.iterate_count().saturating_sub(1)) {
        let rhs = if j == 0 {
            c.k / c.alpha * (c.gamma * x_sup + c.mu)
        } else {
            let mut sup: f64 = 0.0;
            for &s in &points {
                sup = sup.max((x_at(s)? + run.iterate_at(j - 1, s)).norm());
            }
            c.k / c.alpha * (c.gamma * sup + c.mu)
        };
        for &s in &points {
            let lhs = run.iterate_at(j, s).norm();
            cert.check(
                lhs,
                rhs,
                Witness {
                    time: s,
                    second_time: Some(tau),
                    point: xi.iter().copied().collect(),
                    lhs,
                    rhs,
                },
            );
        }
    }
    Ok(cert.finish())
}

/// Two-regime modulus certificate for `G`: `|G(t,eta) - G(t,eta')| <=
/// theta* |eta - eta'|` for `t <= L(eps)`, plus slack `eps/2` beyond.
/// `beta` is the sup of `|y|` over all trajectories actually used.
pub fn modulus_check(
    cs: &CoupledSystem,
    t_grid: &[f64],
    pairs: &[(DVector<f64>, DVector<f64>)],
    eps: f64,
) -> Result<Certificate, ConjugacyError> {
    let c = ConstantSheet::from(cs.constants());

    // First pass: evaluate the map differences and measure beta from the
    // dense trajectories (nodes plus midpoints).
    let mut rows: Vec<(f64, f64, f64, &DVector<f64>)> = Vec::new();
    let mut beta: f64 = 0.0;
    for (eta, eta_bar) in pairs {
        for &t in t_grid {
            let mut sup_pair: f64 = 0.0;
            for point in [eta, eta_bar] {
                if t == 0.0 {
                    sup_pair = sup_pair.max(point.norm());
                    continue;
                }
                let traj = cs.nonlinear_backward_dense(t, point)?;
                let times = traj.times().to_vec();
                for st in traj.states() {
                    sup_pair = sup_pair.max(st.norm());
                }
                for w in times.windows(2) {
                    sup_pair = sup_pair.max(traj.eval(0.5 * (w[0] + w[1]))?.norm());
                }
            }
            beta = beta.max(sup_pair);
            let g = cs.map_g(t, eta)?.value;
            let g_bar = cs.map_g(t, eta_bar)?.value;
            let dg = (g - g_bar).norm();
            let d_eta = (eta - eta_bar).norm();
            rows.push((t, dg, d_eta, eta));
        }
    }

    let (l, theta_star) = c.critical_times(eps, 2.0 * beta);
    let mut cert =
        CertificateBuilder::new(ANCHOR_THM_3_6, cs.horizon()).outside_theorem(cs.outside_theorem());
    cert.note(format!(
        "beta = {beta} measured from the sampled trajectories; eps = {eps}, L(eps) = {l}, theta* = {theta_star}"
    ));
    for (t, dg, d_eta, eta) in rows {
        let rhs = if t <= l { theta_star * d_eta } else { theta_star * d_eta + 0.5 * eps };
        cert.check(
            dg,
            rhs,
            Witness { time: t, second_time: None, point: eta.iter().copied().collect(), lhs: dg, rhs },
        );
    }
    Ok(cert.finish())
}
