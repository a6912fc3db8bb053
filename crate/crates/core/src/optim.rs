//! BFGS with a strong-Wolfe line search.

use nalgebra::{DMatrix, DVector};

#[derive(Debug, Clone)]
pub struct MinimizeResult {
    pub x: Vec<f64>,
    pub value: f64,
    pub initial_value: f64,
    pub iterations: usize,
    pub evaluations: usize,
    pub converged: bool,
    pub message: String,
}

const C1: f64 = 1e-4;
const C2: f64 = 0.9;
/// Largest coordinate change allowed on a trial step.
const MAX_STEP: f64 = 2.0;
const GTOL: f64 = 1e-6;

struct Counted<F> {
    f: F,
    evaluations: usize,
}

impl<F: FnMut(&[f64]) -> Option<(f64, Vec<f64>)>> Counted<F> {
    fn eval(&mut self, x: &DVector<f64>) -> Option<(f64, DVector<f64>)> {
        self.evaluations += 1;
        let (v, g) = (self.f)(x.as_slice())?;
        if !v.is_finite() || g.iter().any(|v| !v.is_finite()) {
            return None;
        }
        Some((v, DVector::from_vec(g)))
    }
}

/// Minimizes `f`, which returns the value and gradient or `None` where the
/// objective is undefined. Stops when the relative decrease of one
/// iteration falls below `ftol`, when the gradient vanishes, or after
/// `max_iter` iterations (reported as not converged).
pub fn minimize_bfgs<F>(f: F, x0: &[f64], max_iter: usize, ftol: f64) -> Result<MinimizeResult, String>
where
    F: FnMut(&[f64]) -> Option<(f64, Vec<f64>)>,
{
    let mut obj = Counted { f, evaluations: 0 };
    let n = x0.len();
    let mut x = DVector::from_column_slice(x0);
    let (mut fx, mut g) = obj.eval(&x).ok_or("objective undefined at starting point")?;
    let initial_value = fx;
    let mut hinv = DMatrix::<f64>::identity(n, n);
    let mut fresh = true;
    let mut iterations = 0;
    let (converged, message) = loop {
        if g.amax() <= GTOL {
            break (true, "gradient below tolerance".to_string());
        }
        if iterations >= max_iter {
            break (false, format!("iteration limit {max_iter} reached"));
        }
        let mut p = -(&hinv * &g);
        let mut slope = g.dot(&p);
        if slope >= 0.0 {
            hinv = DMatrix::identity(n, n);
            fresh = true;
            p = -g.clone();
            slope = g.dot(&p);
        }
        let alpha0 = (MAX_STEP / p.amax()).min(1.0);
        let step = match line_search(&mut obj, &x, fx, &p, slope, alpha0) {
            Some(s) => s,
            None if !fresh => {
                hinv = DMatrix::identity(n, n);
                fresh = true;
                continue;
            }
            None => {
                let small = g.amax() <= 1e-3 * fx.abs().max(1.0);
                break (small, "line search failed".to_string());
            }
        };
        iterations += 1;
        let (x_new, f_new, g_new) = step;
        let s = &x_new - &x;
        let yv = &g_new - &g;
        let sy = s.dot(&yv);
        let rel = (fx - f_new) / fx.abs().max(f_new.abs()).max(1.0);
        x = x_new;
        fx = f_new;
        g = g_new;
        if sy > 1e-12 * s.norm() * yv.norm() {
            if fresh {
                hinv *= sy / yv.norm_squared();
                fresh = false;
            }
            let rho = 1.0 / sy;
            let hy = &hinv * &yv;
            let yhy = yv.dot(&hy);
            // H ← H − ρ(H y sᵀ + s yᵀ H) + (ρ² yᵀHy + ρ) s sᵀ
            hinv.ger(-rho, &hy, &s, 1.0);
            hinv.ger(-rho, &s, &hy, 1.0);
            hinv.ger(rho * rho * yhy + rho, &s, &s, 1.0);
        }
        if rel <= ftol {
            break (true, "relative improvement below tolerance".to_string());
        }
    };
    Ok(MinimizeResult {
        x: x.as_slice().to_vec(),
        value: fx,
        initial_value,
        iterations,
        evaluations: obj.evaluations,
        converged,
        message,
    })
}

type Step = (DVector<f64>, f64, DVector<f64>);

fn line_search<F: FnMut(&[f64]) -> Option<(f64, Vec<f64>)>>(
    obj: &mut Counted<F>,
    x: &DVector<f64>,
    f0: f64,
    p: &DVector<f64>,
    slope0: f64,
    alpha0: f64,
) -> Option<Step> {
    let try_at = |obj: &mut Counted<F>, a: f64| -> Option<Step> {
        let xa = x + p * a;
        obj.eval(&xa).map(|(v, g)| (xa, v, g))
    };
    let mut a_prev = 0.0;
    let mut f_prev = f0;
    let mut slope_prev = slope0;
    let mut a = alpha0;
    for i in 0..20 {
        let Some((xa, fa, ga)) = try_at(obj, a) else {
            // undefined region: shrink toward the last good point
            a = a_prev + 0.5 * (a - a_prev);
            if a - a_prev < 1e-12 {
                return None;
            }
            continue;
        };
        let slope = ga.dot(p);
        if fa > f0 + C1 * a * slope0 || (i > 0 && fa >= f_prev) {
            return zoom(obj, x, p, f0, slope0, (a_prev, f_prev, slope_prev), (a, fa, slope));
        }
        if slope.abs() <= -C2 * slope0 {
            return Some((xa, fa, ga));
        }
        if slope >= 0.0 {
            return zoom(obj, x, p, f0, slope0, (a, fa, slope), (a_prev, f_prev, slope_prev));
        }
        a_prev = a;
        f_prev = fa;
        slope_prev = slope;
        a *= 2.0;
    }
    None
}

fn zoom<F: FnMut(&[f64]) -> Option<(f64, Vec<f64>)>>(
    obj: &mut Counted<F>,
    x: &DVector<f64>,
    p: &DVector<f64>,
    f0: f64,
    slope0: f64,
    mut lo: (f64, f64, f64),
    mut hi: (f64, f64, f64),
) -> Option<Step> {
    let mut best: Option<Step> = None;
    for _ in 0..30 {
        let a = cubic_min(lo, hi).unwrap_or(0.5 * (lo.0 + hi.0));
        let (l, h) = (lo.0.min(hi.0), lo.0.max(hi.0));
        let a = if a <= l + 0.1 * (h - l) || a >= h - 0.1 * (h - l) { 0.5 * (lo.0 + hi.0) } else { a };
        let xa = x + p * a;
        let Some((fa, ga)) = obj.eval(&xa) else {
            hi = (a, f64::INFINITY, 0.0);
            continue;
        };
        let slope = ga.dot(p);
        if fa > f0 + C1 * a * slope0 || fa >= lo.1 {
            hi = (a, fa, slope);
        } else {
            if slope.abs() <= -C2 * slope0 {
                return Some((xa, fa, ga));
            }
            if slope * (hi.0 - lo.0) >= 0.0 {
                hi = lo;
            }
            lo = (a, fa, slope);
            best = Some((xa, fa, ga));
        }
        if (hi.0 - lo.0).abs() < 1e-14 {
            break;
        }
    }
    // accept a sufficient-decrease point even if curvature failed
    best.filter(|(_, fa, _)| *fa < f0)
}

/// Minimizer of the cubic interpolating two (step, value, slope) triples.
fn cubic_min(a: (f64, f64, f64), b: (f64, f64, f64)) -> Option<f64> {
    if !a.1.is_finite() || !b.1.is_finite() {
        return None;
    }
    let d1 = a.2 + b.2 - 3.0 * (a.1 - b.1) / (a.0 - b.0);
    let disc = d1 * d1 - a.2 * b.2;
    if disc < 0.0 {
        return None;
    }
    let d2 = (b.0 - a.0).signum() * disc.sqrt();
    let t = b.0 - (b.0 - a.0) * (b.2 + d2 - d1) / (b.2 - a.2 + 2.0 * d2);
    t.is_finite().then_some(t)
}
