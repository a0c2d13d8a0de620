//! Adaptive Simpson quadrature for vector-valued integrands.

use nalgebra::DVector;

const MAX_DEPTH: usize = 20;

/// Integrate `f` over `[a, b]` to the requested absolute tolerance.
///
/// Classic adaptive Simpson with Richardson extrapolation on accepted panels.
/// Deterministic: the refinement pattern depends only on the integrand values.
pub fn adaptive_simpson<F>(f: &F, a: f64, b: f64, tol: f64) -> DVector<f64>
where
    F: Fn(f64) -> DVector<f64>,
{
    let fa = f(a);
    if a == b {
        return DVector::zeros(fa.len());
    }
    let fb = f(b);
    let m = 0.5 * (a + b);
    let fm = f(m);
    let whole = simpson(a, b, &fa, &fm, &fb);
    recurse(f, a, &fa, m, &fm, b, &fb, &whole, tol, 0)
}

fn simpson(a: f64, b: f64, fa: &DVector<f64>, fm: &DVector<f64>, fb: &DVector<f64>) -> DVector<f64> {
    (fa + fm * 4.0 + fb) * ((b - a) / 6.0)
}

#[allow(clippy::too_many_arguments)]
fn recurse<F>(
    f: &F,
    a: f64,
    fa: &DVector<f64>,
    m: f64,
    fm: &DVector<f64>,
    b: f64,
    fb: &DVector<f64>,
    whole: &DVector<f64>,
    tol: f64,
    depth: usize,
) -> DVector<f64>
where
    F: Fn(f64) -> DVector<f64>,
{
    let ml = 0.5 * (a + m);
    let mr = 0.5 * (m + b);
    let fml = f(ml);
    let fmr = f(mr);
    let left = simpson(a, m, fa, &fml, fm);
    let right = simpson(m, b, fm, &fmr, fb);
    let both = &left + &right;
    let err = (&both - whole).amax();
    if err <= 15.0 * tol || depth >= MAX_DEPTH {
        let correction = (&both - whole) / 15.0;
        both + correction
    } else {
        recurse(f, a, fa, ml, &fml, m, fm, &left, 0.5 * tol, depth + 1)
            + recurse(f, m, fm, mr, &fmr, b, fb, &right, 0.5 * tol, depth + 1)
    }
}
