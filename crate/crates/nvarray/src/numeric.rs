//! Shared numerical routines: adaptive Gauss-Legendre quadrature and simple
//! 1D root/peak finding used by the aberration and coherence modules.

use crate::error::{Error, Result};
use std::sync::OnceLock;

const GL_ORDER: usize = 20;

fn gl_nodes() -> &'static (Vec<f64>, Vec<f64>) {
    static NODES: OnceLock<(Vec<f64>, Vec<f64>)> = OnceLock::new();
    NODES.get_or_init(|| gauss_legendre(GL_ORDER))
}

/// Nodes and weights of the n-point Gauss-Legendre rule on [-1, 1],
/// via Newton iteration on the Legendre polynomial.
fn gauss_legendre(n: usize) -> (Vec<f64>, Vec<f64>) {
    let mut nodes = vec![0.0; n];
    let mut weights = vec![0.0; n];
    let m = n.div_ceil(2);
    for i in 0..m {
        // Chebyshev-based initial guess.
        let mut x = (std::f64::consts::PI * (i as f64 + 0.75) / (n as f64 + 0.5)).cos();
        let mut dp = 0.0;
        for _ in 0..100 {
            // Evaluate P_n(x) and P_n'(x) by recurrence.
            let mut p0 = 1.0;
            let mut p1 = x;
            for k in 2..=n {
                let kf = k as f64;
                let p2 = ((2.0 * kf - 1.0) * x * p1 - (kf - 1.0) * p0) / kf;
                p0 = p1;
                p1 = p2;
            }
            dp = n as f64 * (x * p1 - p0) / (x * x - 1.0);
            let dx = p1 / dp;
            x -= dx;
            if dx.abs() < 1e-15 {
                break;
            }
        }
        nodes[i] = -x;
        nodes[n - 1 - i] = x;
        let w = 2.0 / ((1.0 - x * x) * dp * dp);
        weights[i] = w;
        weights[n - 1 - i] = w;
    }
    (nodes, weights)
}

fn gl_panel(f: &mut impl FnMut(f64) -> f64, a: f64, b: f64) -> f64 {
    let (nodes, weights) = gl_nodes();
    let c = 0.5 * (a + b);
    let h = 0.5 * (b - a);
    let mut acc = 0.0;
    for (&x, &w) in nodes.iter().zip(weights) {
        acc += w * f(c + h * x);
    }
    acc * h
}

fn adaptive_panel(
    f: &mut impl FnMut(f64) -> f64,
    a: f64,
    b: f64,
    tol: f64,
    noise_floor: f64,
    depth: u32,
) -> Result<f64> {
    let whole = gl_panel(f, a, b);
    let m = 0.5 * (a + b);
    let left = gl_panel(f, a, m);
    let right = gl_panel(f, m, b);
    let refined = left + right;
    // The noise floor stops subdivision once the residual is round-off
    // relative to the whole integral.
    if (refined - whole).abs() <= tol.max(noise_floor) {
        return Ok(refined);
    }
    if depth == 0 {
        return Err(Error::Quadrature(format!(
            "panel [{a:.6e}, {b:.6e}] did not converge (residual {:.3e})",
            (refined - whole).abs()
        )));
    }
    let half_tol = 0.5 * tol;
    Ok(adaptive_panel(f, a, m, half_tol, noise_floor, depth - 1)?
        + adaptive_panel(f, m, b, half_tol, noise_floor, depth - 1)?)
}

/// Integrate `f` over the panels delimited by `breakpoints` (sorted,
/// deduplicated by the caller). Each panel is refined adaptively until the
/// local error estimate is below `rel_tol * scale + abs_floor`.
pub fn integrate_panels(
    mut f: impl FnMut(f64) -> f64,
    breakpoints: &[f64],
    rel_tol: f64,
    abs_floor: f64,
) -> Result<f64> {
    // First pass for a magnitude scale.
    let mut rough = 0.0;
    for w in breakpoints.windows(2) {
        rough += gl_panel(&mut f, w[0], w[1]).abs();
    }
    let scale = rough.max(abs_floor);
    let noise_floor = 16.0 * f64::EPSILON * scale;
    let n = (breakpoints.len() - 1).max(1) as f64;
    let mut total = 0.0;
    for w in breakpoints.windows(2) {
        let tol = (rel_tol * scale + abs_floor) / n;
        total += adaptive_panel(&mut f, w[0], w[1], tol, noise_floor, 28)?;
    }
    Ok(total)
}

/// Integrate over [a, b] with a single adaptive panel tree.
pub fn integrate(f: impl FnMut(f64) -> f64, a: f64, b: f64, rel_tol: f64) -> Result<f64> {
    integrate_panels(f, &[a, b], rel_tol, 1e-300)
}

/// Find `x` in [lo, hi] with `f(x) = target`, assuming `f` is monotone on the
/// bracket. Plain bisection; the callers only need ~1e-6 relative accuracy.
pub fn bisect(mut f: impl FnMut(f64) -> f64, lo: f64, hi: f64, target: f64, iters: u32) -> f64 {
    let mut lo = lo;
    let mut hi = hi;
    let rising = f(hi) > f(lo);
    for _ in 0..iters {
        let mid = 0.5 * (lo + hi);
        let v = f(mid);
        if (v > target) == rising {
            hi = mid;
        } else {
            lo = mid;
        }
    }
    0.5 * (lo + hi)
}

/// Golden-section maximisation of `f` on [a, b].
pub fn golden_max(mut f: impl FnMut(f64) -> f64, a: f64, b: f64, iters: u32) -> (f64, f64) {
    let inv_phi = 0.5 * (5.0f64.sqrt() - 1.0);
    let mut a = a;
    let mut b = b;
    let mut c = b - inv_phi * (b - a);
    let mut d = a + inv_phi * (b - a);
    let mut fc = f(c);
    let mut fd = f(d);
    for _ in 0..iters {
        if fc > fd {
            b = d;
            d = c;
            fd = fc;
            c = b - inv_phi * (b - a);
            fc = f(c);
        } else {
            a = c;
            c = d;
            fc = fd;
            d = a + inv_phi * (b - a);
            fd = f(d);
        }
    }
    let x = 0.5 * (a + b);
    let v = f(x);
    (x, v)
}

/// Mean and (sample) standard deviation.
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

/// Slope and intercept of the ordinary least-squares line y = slope*x + b.
pub fn linear_fit(xs: &[f64], ys: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let mut sxx = 0.0;
    let mut sxy = 0.0;
    for (x, y) in xs.iter().zip(ys) {
        sxx += (x - mx) * (x - mx);
        sxy += (x - mx) * (y - my);
    }
    let slope = sxy / sxx;
    (slope, my - slope * mx)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn gl_nodes_integrate_polynomials_exactly() {
        // GL-20 is exact through degree 39.
        let v = integrate(|x| x.powi(7) - 3.0 * x.powi(2) + 1.0, -1.0, 2.0, 1e-12).unwrap();
        // Antiderivative: x^8/8 - x^3 + x.
        let exact = (256.0 / 8.0 - 8.0 + 2.0) - (1.0 / 8.0 + 1.0 - 1.0);
        assert_relative_eq!(v, exact, max_relative = 1e-13);
    }

    #[test]
    fn adaptive_handles_oscillatory_integrands() {
        let v = integrate(|x| (40.0 * x).sin(), 0.0, 1.0, 1e-10).unwrap();
        let exact = (1.0 - (40.0f64).cos()) / 40.0;
        assert_relative_eq!(v, exact, max_relative = 1e-9);
    }

    #[test]
    fn bisect_finds_monotone_roots() {
        let x = bisect(|x| x * x, 0.0, 2.0, 2.0, 80);
        assert_relative_eq!(x, 2.0f64.sqrt(), max_relative = 1e-10);
    }

    #[test]
    fn golden_max_locates_peak() {
        let (x, v) = golden_max(|x| -(x - 0.3) * (x - 0.3), 0.0, 1.0, 80);
        assert_relative_eq!(x, 0.3, epsilon = 1e-8);
        assert!(v.abs() < 1e-15);
    }
}
