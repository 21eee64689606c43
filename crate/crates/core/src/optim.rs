//! BFGS maximizer and finite-difference derivatives.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

#[derive(Debug, Clone)]
pub struct BfgsOptions {
    pub max_iter: usize,
    /// Converged when max |gradient| falls below this...
    pub grad_tol: f64,
    /// ...and the relative objective change of the last step is below this.
    pub rel_tol: f64,
}

impl Default for BfgsOptions {
    fn default() -> Self {
        BfgsOptions {
            max_iter: 500,
            grad_tol: 1e-8,
            rel_tol: 1e-10,
        }
    }
}

#[derive(Debug, Clone)]
pub struct BfgsResult {
    pub theta: Vec<f64>,
    pub value: f64,
    pub gradient: Vec<f64>,
    pub iterations: usize,
    pub trace: Vec<String>,
}

pub fn max_abs(v: &[f64]) -> f64 {
    v.iter().fold(0.0, |m, x| m.max(x.abs()))
}

/// Relative objective change treated as rounding noise of a long sum.
const FLAT_TOLERANCE: f64 = 1e-12;

fn tail(trace: &[String], n: usize) -> String {
    trace[trace.len().saturating_sub(n)..].join("\n")
}

/// Maximizes `f` with BFGS and backtracking (Armijo) line search.
///
/// `inv_neg_hessian` is the starting approximation of `(-H)^-1`. Near the
/// optimum, where changes in `f` drown in rounding noise, a step is accepted
/// if it lowers the gradient norm.
pub fn maximize<F, G>(
    f: F,
    grad: G,
    theta0: &[f64],
    inv_neg_hessian: DMatrix<f64>,
    opts: &BfgsOptions,
) -> Result<BfgsResult>
where
    F: Fn(&[f64]) -> f64,
    G: Fn(&[f64]) -> Vec<f64>,
{
    let n = theta0.len();
    let h_start = inv_neg_hessian.clone();
    let mut h = inv_neg_hessian;
    let mut theta = DVector::from_column_slice(theta0);
    let mut value = f(theta.as_slice());
    if !value.is_finite() {
        return Err(Error::NonConvergence {
            iterations: 0,
            reason: "objective is not finite at the starting point".into(),
            trace: String::new(),
        });
    }
    let mut g = DVector::from_vec(grad(theta.as_slice()));
    let mut trace = vec![format!("iter 0: f={value:.12e} max|g|={:.3e}", g.amax())];
    let mut resets = 0;
    if n == 0 {
        return Ok(BfgsResult {
            theta: vec![],
            value,
            gradient: vec![],
            iterations: 0,
            trace,
        });
    }

    for iter in 1..=opts.max_iter {
        let mut dir = &h * &g;
        let mut slope = g.dot(&dir);
        if !(slope > 0.0) {
            h = h_start.clone();
            dir = &h * &g;
            slope = g.dot(&dir);
        }

        let mut t = 1.0;
        let mut accepted = None;
        for _ in 0..60 {
            let cand = &theta + &dir * t;
            let v = f(cand.as_slice());
            if v.is_finite() {
                if v > value && v >= value + 1e-4 * t * slope {
                    accepted = Some((cand, v, None));
                    break;
                }
                if (v - value).abs() <= FLAT_TOLERANCE * value.abs().max(1.0) {
                    let gc = DVector::from_vec(grad(cand.as_slice()));
                    if gc.amax() < g.amax() {
                        accepted = Some((cand, v, Some(gc)));
                        break;
                    }
                }
            }
            t *= 0.5;
        }

        let Some((cand, v, gc)) = accepted else {
            if g.amax() < opts.grad_tol {
                trace.push(format!("iter {iter}: line search exhausted at gradient tolerance"));
                return Ok(BfgsResult {
                    theta: theta.as_slice().to_vec(),
                    value,
                    gradient: g.as_slice().to_vec(),
                    iterations: iter,
                    trace,
                });
            }
            if resets < 2 {
                resets += 1;
                h = h_start.clone();
                trace.push(format!("iter {iter}: line search failed, resetting curvature"));
                continue;
            }
            return Err(Error::NonConvergence {
                iterations: iter,
                reason: format!("line search failed with max|gradient| = {:.3e}", g.amax()),
                trace: tail(&trace, 20),
            });
        };

        let g_new = gc.unwrap_or_else(|| DVector::from_vec(grad(cand.as_slice())));
        let s = &cand - &theta;
        // gradient difference of the minimized objective -f
        let y = &g - &g_new;
        let ys = y.dot(&s);
        if ys > 1e-12 * y.norm() * s.norm() {
            let rho = 1.0 / ys;
            let eye = DMatrix::<f64>::identity(n, n);
            let left = &eye - (&s * y.transpose()) * rho;
            let right = &eye - (&y * s.transpose()) * rho;
            h = &left * &h * &right + (&s * s.transpose()) * rho;
        }

        let rel = (v - value).abs() / value.abs().max(f64::MIN_POSITIVE);
        theta = cand;
        value = v;
        g = g_new;
        trace.push(format!(
            "iter {iter}: f={value:.12e} max|g|={:.3e} step={t:.3e} rel={rel:.3e}",
            g.amax()
        ));
        if g.amax() < opts.grad_tol && rel < opts.rel_tol {
            return Ok(BfgsResult {
                theta: theta.as_slice().to_vec(),
                value,
                gradient: g.as_slice().to_vec(),
                iterations: iter,
                trace,
            });
        }
    }
    Err(Error::NonConvergence {
        iterations: opts.max_iter,
        reason: format!("iteration cap reached with max|gradient| = {:.3e}", g.amax()),
        trace: tail(&trace, 20),
    })
}

/// Central-difference gradient with step `rel_step * max(|theta_j|, 1)`.
pub fn numerical_gradient<F: Fn(&[f64]) -> f64>(f: &F, theta: &[f64], rel_step: f64) -> Vec<f64> {
    let mut work = theta.to_vec();
    (0..theta.len())
        .map(|j| {
            let h = rel_step * theta[j].abs().max(1.0);
            work[j] = theta[j] + h;
            let up = f(&work);
            work[j] = theta[j] - h;
            let down = f(&work);
            work[j] = theta[j];
            (up - down) / (2.0 * h)
        })
        .collect()
}

/// Finite-difference Hessian from function values only.
pub fn numerical_hessian<F: Fn(&[f64]) -> f64>(f: &F, theta: &[f64], rel_step: f64) -> DMatrix<f64> {
    let n = theta.len();
    let steps: Vec<f64> = theta.iter().map(|t| rel_step * t.abs().max(1.0)).collect();
    let f0 = f(theta);
    let mut work = theta.to_vec();
    let mut eval = |deltas: &[(usize, f64)]| {
        for &(j, d) in deltas {
            work[j] += d;
        }
        let v = f(&work);
        for &(j, _) in deltas {
            work[j] = theta[j];
        }
        v
    };
    let mut hess = DMatrix::zeros(n, n);
    for j in 0..n {
        let hj = steps[j];
        let up = eval(&[(j, hj)]);
        let down = eval(&[(j, -hj)]);
        hess[(j, j)] = (up - 2.0 * f0 + down) / (hj * hj);
        for k in 0..j {
            let hk = steps[k];
            let pp = eval(&[(j, hj), (k, hk)]);
            let pm = eval(&[(j, hj), (k, -hk)]);
            let mp = eval(&[(j, -hj), (k, hk)]);
            let mm = eval(&[(j, -hj), (k, -hk)]);
            let v = (pp - pm - mp + mm) / (4.0 * hj * hk);
            hess[(j, k)] = v;
            hess[(k, j)] = v;
        }
    }
    hess
}

/// Finite-difference Hessian from an analytic gradient, symmetrized.
pub fn jacobian_of_gradient<G: Fn(&[f64]) -> Vec<f64>>(grad: &G, theta: &[f64], rel_step: f64) -> DMatrix<f64> {
    let n = theta.len();
    let mut work = theta.to_vec();
    let mut hess = DMatrix::zeros(n, n);
    for j in 0..n {
        let h = rel_step * theta[j].abs().max(1.0);
        work[j] = theta[j] + h;
        let up = grad(&work);
        work[j] = theta[j] - h;
        let down = grad(&work);
        work[j] = theta[j];
        for k in 0..n {
            hess[(k, j)] = (up[k] - down[k]) / (2.0 * h);
        }
    }
    (&hess + hess.transpose()) * 0.5
}
