use nalgebra::{DMatrix, DVector};
use statrs::function::factorial::ln_factorial;

use super::{
    intercept_only_loglik, lagrange_multiplier_test, mcfadden_rho2, Coefficient, DesignMatrix, Family, FitOptions,
    ModelFit,
};
use crate::error::{Error, Result};

/// `sum_i [ y_i * eta_i - exp(eta_i) - ln(y_i!) ]` with `eta = X beta`.
pub fn poisson_loglik(design: &DesignMatrix, beta: &[f64]) -> f64 {
    let eta = design.x() * DVector::from_column_slice(beta);
    eta.iter()
        .zip(&design.response)
        .map(|(&e, &y)| y as f64 * e - e.exp() - ln_factorial(y))
        .sum()
}

/// Analytic score `X^T (y - lambda)`.
pub fn poisson_score(design: &DesignMatrix, beta: &[f64]) -> Vec<f64> {
    let lambda = (design.x() * DVector::from_column_slice(beta)).map(f64::exp);
    let resid = DVector::from_vec(design.response_f64()) - lambda;
    (design.x().transpose() * resid).as_slice().to_vec()
}

fn information(x: &DMatrix<f64>, lambda: &DVector<f64>) -> DMatrix<f64> {
    let mut weighted = x.clone();
    for (i, mut row) in weighted.row_iter_mut().enumerate() {
        row *= lambda[i];
    }
    x.transpose() * weighted
}

/// Fixed-parameter Poisson regression by Newton-Raphson with step halving.
///
/// Converges when max |score| < `score_tol` and the relative log-likelihood
/// change of the last step is below `rel_tol`. Standard errors come from the
/// inverse information `X^T W X` at the estimate.
pub fn fit_poisson(design: &DesignMatrix, options: &FitOptions) -> Result<ModelFit> {
    design.check_rank()?;
    let loglik_zero = intercept_only_loglik(&design.response)?;
    let x = design.x();
    let y = DVector::from_vec(design.response_f64());
    let p = design.n_cols();

    let mut beta = DVector::zeros(p);
    beta[0] = (y.sum() / y.len() as f64).ln();
    let mut ll = poisson_loglik(design, beta.as_slice());
    let mut trace = Vec::new();

    for iter in 1..=options.max_iter {
        let lambda = (x * &beta).map(f64::exp);
        let score = x.transpose() * (&y - &lambda);
        let info = information(x, &lambda);
        let Some(chol) = info.cholesky() else {
            return Err(Error::NonConvergence {
                iterations: iter,
                reason: "information matrix is not positive definite".into(),
                trace: trace.join("\n"),
            });
        };
        let step = chol.solve(&score);

        let mut t = 1.0;
        let mut next = None;
        for _ in 0..50 {
            let cand = &beta + &step * t;
            let cand_ll = poisson_loglik(design, cand.as_slice());
            if cand_ll.is_finite() && cand_ll >= ll - 1e-14 * ll.abs() {
                next = Some((cand, cand_ll));
                break;
            }
            t *= 0.5;
        }
        let Some((cand, cand_ll)) = next else {
            if score.amax() < options.score_tol {
                break;
            }
            return Err(Error::NonConvergence {
                iterations: iter,
                reason: format!("step halving failed with max|score| = {:.3e}", score.amax()),
                trace: trace.join("\n"),
            });
        };

        let rel = (cand_ll - ll).abs() / ll.abs().max(f64::MIN_POSITIVE);
        beta = cand;
        ll = cand_ll;
        let score_new = DVector::from_vec(poisson_score(design, beta.as_slice()));
        trace.push(format!(
            "iter {iter}: loglik={ll:.12e} max|score|={:.3e} halvings_t={t:.3e}",
            score_new.amax()
        ));
        if score_new.amax() < options.score_tol && rel < options.rel_tol {
            return finish(design, beta, ll, loglik_zero, iter, options);
        }
    }
    Err(Error::NonConvergence {
        iterations: options.max_iter,
        reason: "iteration cap reached".into(),
        trace: trace.join("\n"),
    })
}

fn finish(
    design: &DesignMatrix,
    beta: DVector<f64>,
    ll: f64,
    loglik_zero: f64,
    iterations: usize,
    options: &FitOptions,
) -> Result<ModelFit> {
    let lambda = (design.x() * &beta).map(f64::exp);
    let info = information(design.x(), &lambda);
    let cov = info
        .cholesky()
        .map(|c| c.inverse())
        .ok_or_else(|| Error::RankDeficient("information matrix is singular at the estimate".into()))?;
    let coefficients = design
        .columns
        .iter()
        .enumerate()
        .map(|(j, c)| Coefficient::new(&c.name, beta[j], Some(cov[(j, j)].sqrt())))
        .collect();
    let fitted: Vec<f64> = lambda.as_slice().to_vec();
    let lm = lagrange_multiplier_test(&design.response, &fitted, options.lm_critical)?;
    Ok(ModelFit {
        family: Family::Poisson,
        coefficients,
        dispersion: None,
        loglik_zero,
        loglik_conv: ll,
        mcfadden_rho2: mcfadden_rho2(loglik_zero, ll).unwrap_or(0.0),
        lm: Some(lm),
        observation_ids: design.ids.clone(),
        response: design.response.clone(),
        fitted_lambda: fitted,
        converged: true,
        iterations,
    })
}

/// Covariance `(X^T W X)^-1` at the given coefficients.
pub(crate) fn poisson_covariance(design: &DesignMatrix, beta: &[f64]) -> Option<DMatrix<f64>> {
    let lambda = (design.x() * DVector::from_column_slice(beta)).map(f64::exp);
    information(design.x(), &lambda).cholesky().map(|c| c.inverse())
}
