use nalgebra::{DMatrix, DVector};
use statrs::function::factorial::ln_factorial;

use super::poisson::poisson_covariance;
use super::{fit_poisson, mcfadden_rho2, Coefficient, DesignMatrix, Dispersion, Family, FitOptions, ModelFit};
use crate::error::{Error, Result};
use crate::optim::{self, BfgsOptions};

/// Below this the dispersion is treated as zero.
const ALPHA_FLOOR: f64 = 1e-8;

fn obs_loglik(y: u64, mu: f64, alpha: f64) -> f64 {
    let yf = y as f64;
    let lf = ln_factorial(y);
    if alpha <= 0.0 {
        return yf * mu.ln() - mu - lf;
    }
    let gamma_ratio: f64 = (0..y).map(|j| (alpha * j as f64).ln_1p()).sum();
    gamma_ratio + yf * mu.ln() - (yf + 1.0 / alpha) * (alpha * mu).ln_1p() - lf
}

/// NB2 log-likelihood with mean `exp(X beta)` and dispersion `alpha`
/// (`alpha = 0` is the Poisson limit).
pub fn nb_loglik(design: &DesignMatrix, beta: &[f64], alpha: f64) -> f64 {
    let eta = design.x() * DVector::from_column_slice(beta);
    eta.iter()
        .zip(&design.response)
        .map(|(&e, &y)| obs_loglik(y, e.exp(), alpha))
        .sum()
}

/// Log-likelihood over `theta = (beta, ln alpha)`.
fn objective(design: &DesignMatrix, theta: &[f64]) -> f64 {
    let p = design.n_cols();
    nb_loglik(design, &theta[..p], theta[p].exp())
}

fn gradient(design: &DesignMatrix, theta: &[f64]) -> Vec<f64> {
    let p = design.n_cols();
    let alpha = theta[p].exp();
    let x = design.x();
    let eta = x * DVector::from_column_slice(&theta[..p]);
    let mut g = vec![0.0; p + 1];
    for (i, &y) in design.response.iter().enumerate() {
        let mu = eta[i].exp();
        let yf = y as f64;
        let denom = 1.0 + alpha * mu;
        let w = (yf - mu) / denom;
        for (j, gj) in g[..p].iter_mut().enumerate() {
            *gj += w * x[(i, j)];
        }
        let d_alpha: f64 = (0..y).map(|j| j as f64 / (1.0 + alpha * j as f64)).sum::<f64>()
            + (alpha * mu).ln_1p() / (alpha * alpha)
            - (yf + 1.0 / alpha) * mu / denom;
        g[p] += alpha * d_alpha;
    }
    g
}

/// NB2 regression over `(beta, ln alpha)` by BFGS.
///
/// The score for alpha at alpha = 0 is `sum((y - mu)^2 - y) / 2` evaluated at
/// the Poisson estimate. When it is not positive the likelihood is maximized
/// on the boundary and the Poisson fit is returned with
/// `collapsed_to_poisson` set.
pub fn fit_negative_binomial(design: &DesignMatrix, options: &FitOptions) -> Result<ModelFit> {
    let pois = fit_poisson(design, options)?;
    let loglik_zero = if design.n_cols() == 1 {
        None
    } else {
        Some(fit_negative_binomial(&design.constant_only(), options)?.loglik_conv)
    };
    let fit = fit_from_poisson(design, &pois, options)?;
    let loglik_zero = loglik_zero.unwrap_or(fit.loglik_conv);
    Ok(ModelFit {
        loglik_zero,
        mcfadden_rho2: mcfadden_rho2(loglik_zero, fit.loglik_conv).unwrap_or(0.0),
        ..fit
    })
}

fn fit_from_poisson(design: &DesignMatrix, pois: &ModelFit, options: &FitOptions) -> Result<ModelFit> {
    let p = design.n_cols();
    let beta0 = pois.estimates();
    let numerator: f64 = design
        .response
        .iter()
        .zip(&pois.fitted_lambda)
        .map(|(&y, &m)| (y as f64 - m).powi(2) - y as f64)
        .sum();
    if numerator <= 0.0 {
        return Ok(collapsed(pois));
    }

    let sum_mu2: f64 = pois.fitted_lambda.iter().map(|m| m * m).sum();
    let alpha0 = (numerator / sum_mu2).max(0.01);
    let mut theta0 = beta0.clone();
    theta0.push(alpha0.ln());
    let cov = poisson_covariance(design, &beta0).unwrap_or_else(|| DMatrix::identity(p, p));
    let mut h0 = DMatrix::identity(p + 1, p + 1);
    h0.view_mut((0, 0), (p, p)).copy_from(&cov);

    let bfgs = BfgsOptions {
        max_iter: 500,
        grad_tol: options.score_tol,
        rel_tol: options.rel_tol,
    };
    let res = optim::maximize(
        |t| objective(design, t),
        |t| gradient(design, t),
        &theta0,
        h0,
        &bfgs,
    );
    let res = match res {
        Ok(r) => r,
        // drifting towards alpha = 0 stalls the line search far out in ln(alpha)
        Err(Error::NonConvergence { .. }) if nb_drifts_to_boundary(design, &theta0) => return Ok(collapsed(pois)),
        Err(e) => return Err(e),
    };
    let alpha = res.theta[p].exp();
    if alpha < ALPHA_FLOOR {
        return Ok(collapsed(pois));
    }

    let hess = optim::jacobian_of_gradient(&|t: &[f64]| gradient(design, t), &res.theta, 1e-5);
    let cov = (-hess).try_inverse();
    let se = |j: usize| cov.as_ref().map(|c| c[(j, j)]).filter(|v| *v > 0.0).map(f64::sqrt);
    let coefficients = design
        .columns
        .iter()
        .enumerate()
        .map(|(j, c)| Coefficient::new(&c.name, res.theta[j], se(j)))
        .collect();
    let eta = design.x() * DVector::from_column_slice(&res.theta[..p]);
    Ok(ModelFit {
        family: Family::Negbin,
        coefficients,
        dispersion: Some(Dispersion {
            alpha,
            std_error: se(p).map(|s| s * alpha),
            collapsed_to_poisson: false,
        }),
        loglik_zero: f64::NAN,
        loglik_conv: res.value,
        mcfadden_rho2: f64::NAN,
        lm: pois.lm,
        observation_ids: design.ids.clone(),
        response: design.response.clone(),
        fitted_lambda: eta.iter().map(|e| e.exp()).collect(),
        converged: true,
        iterations: res.iterations,
    })
}

fn nb_drifts_to_boundary(design: &DesignMatrix, theta: &[f64]) -> bool {
    let p = design.n_cols();
    let mut t = theta.to_vec();
    t[p] = ALPHA_FLOOR.ln();
    objective(design, &t) >= objective(design, theta)
}

fn collapsed(pois: &ModelFit) -> ModelFit {
    ModelFit {
        family: Family::Negbin,
        dispersion: Some(Dispersion {
            alpha: 0.0,
            std_error: None,
            collapsed_to_poisson: true,
        }),
        ..pois.clone()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::countmodel::Transform;

    fn design(y: Vec<u64>, x: &[f64]) -> DesignMatrix {
        DesignMatrix::from_raw(
            (0..y.len()).map(|i| i.to_string()).collect(),
            y,
            &[("x".into(), Transform::Identity)],
            &x.iter().map(|&v| vec![v]).collect::<Vec<_>>(),
        )
        .unwrap()
    }

    #[test]
    fn alpha_zero_is_poisson() {
        let d = design(vec![0, 3, 1, 5], &[0.1, 0.7, 0.3, 0.9]);
        let b = [0.2, 0.8];
        let pois = crate::countmodel::poisson_loglik(&d, &b);
        assert!((nb_loglik(&d, &b, 0.0) - pois).abs() < 1e-12);
        assert!((nb_loglik(&d, &b, 1e-9) - pois).abs() < 1e-6);
    }

    #[test]
    fn nb_pmf_matches_gamma_form() {
        // direct Gamma-function form of the NB2 pmf
        let (y, mu, alpha) = (4u64, 2.5f64, 0.7f64);
        let r = 1.0 / alpha;
        let direct = statrs::function::gamma::ln_gamma(y as f64 + r)
            - statrs::function::gamma::ln_gamma(r)
            - ln_factorial(y)
            + r * (r / (r + mu)).ln()
            + y as f64 * (mu / (r + mu)).ln();
        assert!((obs_loglik(y, mu, alpha) - direct).abs() < 1e-12);
    }

    #[test]
    fn analytic_gradient_matches_finite_differences() {
        let d = design(vec![0, 3, 1, 5, 9, 2], &[0.1, 0.7, 0.3, 0.9, 1.4, 0.2]);
        let theta = [0.3, 0.6, (0.4f64).ln()];
        let g = gradient(&d, &theta);
        let fd = optim::numerical_gradient(&|t: &[f64]| objective(&d, t), &theta, 1e-6);
        for (a, b) in g.iter().zip(&fd) {
            assert!((a - b).abs() < 1e-6 * a.abs().max(1.0), "{a} vs {b}");
        }
    }

    #[test]
    fn underdispersed_data_collapses() {
        let d = design(vec![2, 2, 3, 2, 3, 3, 2, 3], &[0.0, 0.1, 0.9, 0.2, 1.0, 0.8, 0.3, 0.7]);
        let fit = fit_negative_binomial(&d, &FitOptions::default()).unwrap();
        let disp = fit.dispersion.unwrap();
        assert!(disp.collapsed_to_poisson);
        assert_eq!(disp.alpha, 0.0);
    }
}
