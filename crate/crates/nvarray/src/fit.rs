//! Weighted nonlinear least squares by damped normal equations
//! (Levenberg-Marquardt family), with covariance and bootstrap errors.
//!
//! Problems expose *weighted* residuals r_i = (model_i - y_i) / sigma_i, so
//! the engine minimises sum r_i^2 and the covariance at the solution is
//! chi2_reduced * (J^T J)^{-1} with J the weighted Jacobian. Positivity is
//! handled by log-reparameterisation at the caller; the engine itself is
//! unconstrained.

use crate::error::{Error, Result};
use nalgebra::{Cholesky, DMatrix, DVector};

/// A weighted least-squares problem.
pub trait LeastSquaresProblem {
    fn param_count(&self) -> usize;

    /// Weighted residual vector at `params`.
    fn residuals(&self, params: &[f64]) -> Vec<f64>;

    /// Analytic weighted Jacobian (n x p), if available. Returning `None`
    /// selects central finite differences.
    fn jacobian(&self, _params: &[f64]) -> Option<DMatrix<f64>> {
        None
    }
}

#[derive(Debug, Clone)]
pub struct FitOptions {
    pub max_iterations: usize,
    /// Converged when the relative step falls below this.
    pub step_tolerance: f64,
    /// Converged when the scaled gradient falls below this.
    pub gradient_tolerance: f64,
    /// Initial damping as a fraction of the mean normal-matrix diagonal.
    pub damping_init: f64,
    pub damping_up: f64,
    pub damping_down: f64,
    /// Relative step for finite-difference Jacobians.
    pub fd_relative_step: f64,
}

impl Default for FitOptions {
    fn default() -> Self {
        FitOptions {
            max_iterations: 200,
            step_tolerance: 1e-8,
            gradient_tolerance: 1e-10,
            damping_init: 1e-3,
            damping_up: 10.0,
            damping_down: 0.3,
            fd_relative_step: 1e-6,
        }
    }
}

#[derive(Debug, Clone)]
pub struct FitOutcome {
    pub params: Vec<f64>,
    /// chi2_reduced * (J^T J)^{-1} at the solution.
    pub covariance: DMatrix<f64>,
    pub chi2_reduced: f64,
    /// Accepted iterations.
    pub iterations: usize,
    pub converged: bool,
    pub message: String,
    /// Objective value after each accepted step, starting at the initial point.
    pub cost_history: Vec<f64>,
    pub n_residuals: usize,
}

impl FitOutcome {
    pub fn stderr(&self) -> Vec<f64> {
        (0..self.params.len())
            .map(|i| self.covariance[(i, i)].max(0.0).sqrt())
            .collect()
    }
}

fn cost_of(r: &[f64]) -> f64 {
    r.iter().map(|v| v * v).sum()
}

fn check_finite(r: &[f64], params: &[f64]) -> Result<()> {
    if r.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFiniteResidual {
            params: params.to_vec(),
        });
    }
    Ok(())
}

/// Central-difference Jacobian with per-parameter relative step.
pub fn finite_difference_jacobian(
    problem: &impl LeastSquaresProblem,
    params: &[f64],
    rel_step: f64,
) -> DMatrix<f64> {
    let p = params.len();
    let n = problem.residuals(params).len();
    let mut jac = DMatrix::zeros(n, p);
    let mut work = params.to_vec();
    for j in 0..p {
        let h = rel_step * params[j].abs().max(1.0);
        work[j] = params[j] + h;
        let plus = problem.residuals(&work);
        work[j] = params[j] - h;
        let minus = problem.residuals(&work);
        work[j] = params[j];
        for i in 0..n {
            jac[(i, j)] = (plus[i] - minus[i]) / (2.0 * h);
        }
    }
    jac
}

fn jacobian_of(
    problem: &impl LeastSquaresProblem,
    params: &[f64],
    opts: &FitOptions,
) -> DMatrix<f64> {
    problem
        .jacobian(params)
        .unwrap_or_else(|| finite_difference_jacobian(problem, params, opts.fd_relative_step))
}

/// Minimise the weighted sum of squared residuals from `initial`.
pub fn least_squares(
    problem: &impl LeastSquaresProblem,
    initial: &[f64],
    opts: &FitOptions,
) -> Result<FitOutcome> {
    let p = problem.param_count();
    if initial.len() != p {
        return Err(Error::LengthMismatch {
            what: "initial parameter vector",
            left: initial.len(),
            right: p,
        });
    }
    if initial.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFiniteResidual {
            params: initial.to_vec(),
        });
    }

    let mut x = DVector::from_column_slice(initial);
    let mut r = problem.residuals(x.as_slice());
    check_finite(&r, x.as_slice())?;
    let n = r.len();
    let mut cost = cost_of(&r);
    let mut history = vec![cost];

    let mut lambda = 0.0;
    let mut converged = false;
    let mut message = String::new();
    let mut iterations = 0;

    for iter in 0..opts.max_iterations {
        let jac = jacobian_of(problem, x.as_slice(), opts);
        let rv = DVector::from_column_slice(&r);
        let grad = jac.transpose() * &rv;
        let hess = jac.transpose() * &jac;

        if iter == 0 {
            let trace: f64 = (0..p).map(|i| hess[(i, i)]).sum();
            lambda = opts.damping_init * (trace / p as f64).max(f64::MIN_POSITIVE);
        }

        // Scaled gradient test; the floor keeps exact fits (cost -> 0) from
        // dividing by zero and lets them converge via the step test instead.
        let grad_scale = (0..p)
            .map(|i| grad[i].abs() * x[i].abs().max(1.0))
            .fold(0.0f64, f64::max);
        if grad_scale / cost.max(1e-280) < opts.gradient_tolerance {
            converged = true;
            message = "gradient below tolerance".to_string();
            break;
        }

        // Inner damping loop: retry with stiffer damping until a step is
        // accepted or the damping budget is exhausted.
        let mut accepted = false;
        let mut step_rel = 0.0;
        for _ in 0..64 {
            let mut damped = hess.clone();
            for i in 0..p {
                damped[(i, i)] += lambda;
            }
            let delta = match Cholesky::new(damped) {
                Some(ch) => ch.solve(&(-&grad)),
                None => {
                    lambda *= opts.damping_up;
                    continue;
                }
            };
            let x_new = &x + &delta;
            let r_new = problem.residuals(x_new.as_slice());
            check_finite(&r_new, x_new.as_slice())?;
            let cost_new = cost_of(&r_new);
            if cost_new <= cost {
                step_rel = delta.norm() / x.norm().max(1e-280);
                x = x_new;
                r = r_new;
                cost = cost_new;
                lambda *= opts.damping_down;
                accepted = true;
                break;
            }
            lambda *= opts.damping_up;
            if !lambda.is_finite() {
                break;
            }
        }

        if !accepted {
            message = "no acceptable step after maximum damping".to_string();
            break;
        }
        iterations = iter + 1;
        history.push(cost);

        if step_rel < opts.step_tolerance {
            converged = true;
            message = "step below tolerance".to_string();
            break;
        }
    }

    if !converged && message.is_empty() {
        message = format!("maximum iterations ({}) reached", opts.max_iterations);
    }

    let jac = jacobian_of(problem, x.as_slice(), opts);
    let hess = jac.transpose() * &jac;
    let chi2_reduced = if n > p {
        cost / (n - p) as f64
    } else {
        // No residual degrees of freedom; report the raw covariance scale.
        1.0
    };
    let covariance = invert_spd(&hess).map(|inv| inv * chi2_reduced).unwrap_or_else(|| {
        DMatrix::from_element(p, p, f64::NAN)
    });

    Ok(FitOutcome {
        params: x.as_slice().to_vec(),
        covariance,
        chi2_reduced,
        iterations,
        converged,
        message,
        cost_history: history,
        n_residuals: n,
    })
}

fn invert_spd(m: &DMatrix<f64>) -> Option<DMatrix<f64>> {
    if let Some(ch) = Cholesky::new(m.clone()) {
        return Some(ch.inverse());
    }
    // Near-singular information matrix: fall back to a pseudo-inverse.
    m.clone().pseudo_inverse(1e-12).ok()
}

#[derive(Debug, Clone)]
pub struct BootstrapErrors {
    pub stderr: Vec<f64>,
    pub n_converged: usize,
    pub n_resamples: usize,
    /// Set when more than 10% of resample fits failed to converge.
    pub unreliable: bool,
}

struct ResampledProblem<'a, P: LeastSquaresProblem> {
    inner: &'a P,
    base: Vec<f64>,
    replicate: Vec<f64>,
}

impl<P: LeastSquaresProblem> LeastSquaresProblem for ResampledProblem<'_, P> {
    fn param_count(&self) -> usize {
        self.inner.param_count()
    }
    fn residuals(&self, params: &[f64]) -> Vec<f64> {
        // Residual-resampling replicate: r*(theta) = r(theta) - r(theta_hat) - e*,
        // equivalent to refitting data y* = f(theta_hat) + sigma * e*.
        self.inner
            .residuals(params)
            .iter()
            .zip(self.base.iter().zip(&self.replicate))
            .map(|(r, (b, e))| r - b - e)
            .collect()
    }
    fn jacobian(&self, params: &[f64]) -> Option<DMatrix<f64>> {
        self.inner.jacobian(params)
    }
}

/// Residual-resampling bootstrap around a converged fit.
pub fn bootstrap_errors(
    problem: &impl LeastSquaresProblem,
    fit: &FitOutcome,
    n_resamples: usize,
    rng: &mut impl rand::Rng,
) -> Result<BootstrapErrors> {
    if !fit.converged {
        return Err(Error::NonConvergence(
            "bootstrap requires a converged fit".to_string(),
        ));
    }
    if n_resamples < 100 {
        return Err(Error::invalid("n_resamples", "must be >= 100"));
    }
    let base = problem.residuals(&fit.params);
    let n = base.len();
    let mean = base.iter().sum::<f64>() / n as f64;
    let centered: Vec<f64> = base.iter().map(|r| r - mean).collect();

    let p = problem.param_count();
    let opts = FitOptions::default();
    let mut samples: Vec<Vec<f64>> = Vec::with_capacity(n_resamples);
    for _ in 0..n_resamples {
        let replicate: Vec<f64> = (0..n).map(|_| centered[rng.gen_range(0..n)]).collect();
        let resampled = ResampledProblem {
            inner: problem,
            base: base.clone(),
            replicate,
        };
        if let Ok(out) = least_squares(&resampled, &fit.params, &opts) {
            if out.converged {
                samples.push(out.params);
            }
        }
    }

    let n_converged = samples.len();
    let unreliable = n_converged * 10 < n_resamples * 9;
    let mut stderr = vec![0.0; p];
    if n_converged >= 2 {
        for j in 0..p {
            let col: Vec<f64> = samples.iter().map(|s| s[j]).collect();
            let (_, sd) = crate::numeric::mean_std(&col);
            stderr[j] = sd;
        }
    }
    Ok(BootstrapErrors {
        stderr,
        n_converged,
        n_resamples,
        unreliable,
    })
}
