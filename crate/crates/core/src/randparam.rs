//! Random-parameter Poisson regression by maximum simulated likelihood.
//!
//! Selected coefficients vary across observations as `beta_k + sigma_k * z`
//! with `z ~ N(0, 1)`. The mixing integral is approximated with Halton
//! draws, shifted per observation (Cranley-Patterson rotation) from a fixed
//! seed so every observation sees its own set of draw vectors.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::function::factorial::ln_factorial;

use crate::countmodel::report::{MarginalEffect, SdRow};
use crate::countmodel::{fit_poisson, Coefficient, DesignMatrix, Family, FitOptions, ModelFit, CONSTANT};
use crate::error::{Error, Result};
use crate::optim::{self, BfgsOptions};
use crate::stats::{normal_quantile, pairwise_sum};

pub const DEFAULT_DRAWS: usize = 200;
pub const DEFAULT_HALTON_SKIP: usize = 10;
pub const MIN_DRAWS: usize = 25;
pub const GRADIENT_TOLERANCE: f64 = 1e-5;
const START_SIGMA: f64 = 0.1;
/// A random coefficient whose largest contribution `sigma * max|x|` falls
/// below this is reported as collapsed to fixed.
const COLLAPSE_TOLERANCE: f64 = 1e-4;

/// Elements `skip+1 ..= skip+n` of the radical-inverse sequence in `base`.
pub fn halton_sequence(base: u64, skip: usize, n: usize) -> Vec<f64> {
    assert!(base >= 2, "Halton base must be at least 2");
    (skip as u64 + 1..=(skip + n) as u64)
        .map(|mut i| {
            let (mut num, mut den) = (0u64, 1u64);
            while i > 0 {
                den *= base;
                num = num * base + i % base;
                i /= base;
            }
            num as f64 / den as f64
        })
        .collect()
}

/// The first `k` primes.
pub fn first_primes(k: usize) -> Vec<u64> {
    let mut primes: Vec<u64> = Vec::with_capacity(k);
    let mut c = 2u64;
    while primes.len() < k {
        if primes.iter().take_while(|&&p| p * p <= c).all(|&p| !c.is_multiple_of(p)) {
            primes.push(c);
        }
        c += 1;
    }
    primes
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RandomParamSpec {
    pub random_columns: Vec<String>,
    pub draws: usize,
    pub halton_primes: Vec<u64>,
    pub halton_skip: usize,
    pub seed: u64,
}

impl RandomParamSpec {
    /// Spec with primes 2, 3, 5, ... assigned in column order.
    pub fn new(random_columns: Vec<String>, draws: usize, halton_skip: usize, seed: u64) -> RandomParamSpec {
        let halton_primes = first_primes(random_columns.len());
        RandomParamSpec {
            random_columns,
            draws,
            halton_primes,
            halton_skip,
            seed,
        }
    }

    /// Checks the spec against a design and returns the random column indices.
    pub fn resolve(&self, design: &DesignMatrix) -> Result<Vec<usize>> {
        if self.draws < MIN_DRAWS {
            return Err(Error::Config(format!("draws must be at least {MIN_DRAWS}, got {}", self.draws)));
        }
        if self.halton_primes.len() != self.random_columns.len() {
            return Err(Error::Config(format!(
                "{} Halton primes for {} random columns",
                self.halton_primes.len(),
                self.random_columns.len()
            )));
        }
        for (i, p) in self.halton_primes.iter().enumerate() {
            if *p < 2 || (2..*p).take_while(|d| d * d <= *p).any(|d| p % d == 0) {
                return Err(Error::Config(format!("Halton base {p} is not prime")));
            }
            if self.halton_primes[..i].contains(p) {
                return Err(Error::Config(format!("Halton prime {p} assigned twice")));
            }
        }
        let mut idx = Vec::with_capacity(self.random_columns.len());
        for name in &self.random_columns {
            let j = design
                .column_index(name)
                .ok_or_else(|| Error::Config(format!("random column '{name}' is not in the design")))?;
            if idx.contains(&j) {
                return Err(Error::Config(format!("random column '{name}' listed twice")));
            }
            idx.push(j);
        }
        Ok(idx)
    }
}

/// Standard normal draws `z[i][r][k]` for every observation, draw and
/// random column.
#[derive(Debug, Clone)]
pub struct DrawSet {
    pub n_obs: usize,
    pub draws: usize,
    pub k: usize,
    z: Vec<f64>,
}

impl DrawSet {
    pub fn new(spec: &RandomParamSpec, n_obs: usize) -> DrawSet {
        let k = spec.halton_primes.len();
        let r = spec.draws;
        let seqs: Vec<Vec<f64>> = spec
            .halton_primes
            .iter()
            .map(|&p| halton_sequence(p, spec.halton_skip, r))
            .collect();
        let mut rng = ChaCha20Rng::seed_from_u64(spec.seed);
        let mut z = vec![0.0; n_obs * r * k];
        for i in 0..n_obs {
            for (c, seq) in seqs.iter().enumerate() {
                let shift: f64 = rng.random();
                for (d, &h) in seq.iter().enumerate() {
                    let mut u = (h + shift).fract();
                    if u <= 0.0 {
                        u = h;
                    }
                    z[(i * r + d) * k + c] = normal_quantile(u);
                }
            }
        }
        DrawSet { n_obs, draws: r, k, z }
    }

    /// Draws of observation `i`, `draws * k` values, draw-major.
    pub fn obs(&self, i: usize) -> &[f64] {
        let w = self.draws * self.k;
        &self.z[i * w..(i + 1) * w]
    }
}

/// Per-observation simulated log-likelihood terms at `(beta, sigma)`.
fn simulated_terms(design: &DesignMatrix, cols: &[usize], draws: &DrawSet, beta: &[f64], sigma: &[f64]) -> Vec<f64> {
    let x = design.x();
    let eta_fixed = x * DVector::from_column_slice(beta);
    let ln_r = (draws.draws as f64).ln();
    let k = cols.len();
    (0..design.n_obs())
        .into_par_iter()
        .map(|i| {
            let y = design.response[i] as f64;
            let lf = ln_factorial(design.response[i]);
            let scale: Vec<f64> = cols.iter().zip(sigma).map(|(&c, s)| s * x[(i, c)]).collect();
            let z = draws.obs(i);
            let mut m = f64::NEG_INFINITY;
            let mut s = 0.0;
            for r in 0..draws.draws {
                let zr = &z[r * k..(r + 1) * k];
                let eta = eta_fixed[i] + scale.iter().zip(zr).map(|(a, b)| a * b).sum::<f64>();
                let l = y * eta - eta.exp() - lf;
                if l > m {
                    s = s * (m - l).exp() + 1.0;
                    m = l;
                } else {
                    s += (l - m).exp();
                }
            }
            m + s.ln() - ln_r
        })
        .collect()
}

/// Simulated log-likelihood at coefficients `beta` and standard deviations
/// `sigma` (which may be zero). With no random columns this is the exact
/// Poisson log-likelihood.
pub fn simulated_loglik_at(
    design: &DesignMatrix,
    spec: &RandomParamSpec,
    draws: &DrawSet,
    beta: &[f64],
    sigma: &[f64],
) -> Result<f64> {
    let cols = spec.resolve(design)?;
    if cols.is_empty() {
        return Ok(crate::countmodel::poisson_loglik(design, beta));
    }
    Ok(pairwise_sum(&simulated_terms(design, &cols, draws, beta, sigma)))
}

struct Problem<'a> {
    design: &'a DesignMatrix,
    cols: Vec<usize>,
    draws: DrawSet,
}

impl Problem<'_> {
    fn p(&self) -> usize {
        self.design.n_cols()
    }

    /// Objective over `theta = (beta, ln sigma)`.
    fn loglik(&self, theta: &[f64]) -> f64 {
        let p = self.p();
        if self.cols.is_empty() {
            return crate::countmodel::poisson_loglik(self.design, theta);
        }
        let sigma: Vec<f64> = theta[p..].iter().map(|v| v.exp()).collect();
        pairwise_sum(&simulated_terms(self.design, &self.cols, &self.draws, &theta[..p], &sigma))
    }

    /// Mean over draws of `exp(beta_i' x_i)` per observation.
    fn mean_lambda(&self, beta: &[f64], sigma: &[f64]) -> Vec<f64> {
        let x = self.design.x();
        let eta_fixed = x * DVector::from_column_slice(beta);
        let k = self.cols.len();
        (0..self.design.n_obs())
            .map(|i| {
                if k == 0 {
                    return eta_fixed[i].exp();
                }
                let z = self.draws.obs(i);
                let vals: Vec<f64> = (0..self.draws.draws)
                    .map(|r| {
                        let zr = &z[r * k..(r + 1) * k];
                        let shift: f64 = self.cols.iter().zip(sigma).zip(zr).map(|((&c, s), zz)| s * zz * x[(i, c)]).sum();
                        (eta_fixed[i] + shift).exp()
                    })
                    .collect();
                pairwise_sum(&vals) / self.draws.draws as f64
            })
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RandomParamFit {
    /// Mean coefficients, fit statistics and `fitted_lambda` (the simulated
    /// mean of each observation's rate).
    pub base: ModelFit,
    pub sd_estimates: Vec<SdRow>,
    pub draws_used: usize,
    pub marginal_effects: Vec<MarginalEffect>,
    pub spec: RandomParamSpec,
}

impl RandomParamFit {
    pub fn sd(&self, column: &str) -> Option<&SdRow> {
        self.sd_estimates.iter().find(|s| s.column == column)
    }
}

/// Maximizes the simulated log-likelihood over `(beta, ln sigma)` by BFGS,
/// starting from the fixed-parameter Poisson estimates with `sigma = 0.1`.
pub fn fit_random_poisson(design: &DesignMatrix, spec: &RandomParamSpec, options: &FitOptions) -> Result<RandomParamFit> {
    let cols = spec.resolve(design)?;
    let pois = fit_poisson(design, options)?;
    let problem = Problem {
        design,
        cols,
        draws: DrawSet::new(spec, design.n_obs()),
    };
    let p = design.n_cols();
    let k = problem.cols.len();

    let mut theta0 = pois.estimates();
    theta0.extend(std::iter::repeat_n(START_SIGMA.ln(), k));
    let f = |t: &[f64]| problem.loglik(t);
    let grad = |t: &[f64]| optim::numerical_gradient(&f, t, 1e-6);
    let g0 = grad(&theta0);
    let mut h0 = DMatrix::identity(p + k, p + k);
    if let Some(cov) = crate::countmodel::poisson::poisson_covariance(design, &theta0[..p]) {
        h0.view_mut((0, 0), (p, p)).copy_from(&cov);
    }
    for j in p..p + k {
        h0[(j, j)] = 1.0 / g0[j].abs().max(1.0);
    }
    let opts = BfgsOptions {
        max_iter: 500,
        grad_tol: GRADIENT_TOLERANCE,
        rel_tol: options.rel_tol,
    };
    let res = optim::maximize(f, grad, &theta0, h0, &opts)?;
    let theta = res.theta;

    let sigma: Vec<f64> = theta[p..].iter().map(|v| v.exp()).collect();
    let collapsed: Vec<bool> = problem
        .cols
        .iter()
        .zip(&sigma)
        .map(|(&c, s)| {
            let xmax = design.x().column(c).amax();
            s * xmax < COLLAPSE_TOLERANCE
        })
        .collect();

    let se = standard_errors(&problem, &theta, &collapsed);
    let coefficients = design
        .columns
        .iter()
        .enumerate()
        .map(|(j, c)| Coefficient::new(&c.name, theta[j], se[j]))
        .collect();
    let sd_estimates = problem
        .cols
        .iter()
        .enumerate()
        .map(|(m, &c)| {
            let se_log = se[p + m];
            SdRow {
                column: design.columns[c].name.clone(),
                estimate: sigma[m],
                std_error: se_log.map(|s| s * sigma[m]),
                // delta method: t(sigma) = sigma / (sigma * se(ln sigma))
                t_stat: se_log.map(|s| 1.0 / s),
                collapsed_to_fixed: collapsed[m],
            }
        })
        .collect();

    let fitted = problem.mean_lambda(&theta[..p], &sigma);
    let marginal_effects = marginal_effects_from(design, &theta[..p], &fitted);
    let loglik_zero = pois.loglik_zero;
    let base = ModelFit {
        family: Family::RandomPoisson,
        coefficients,
        dispersion: None,
        loglik_zero,
        loglik_conv: res.value,
        mcfadden_rho2: crate::countmodel::mcfadden_rho2(loglik_zero, res.value).unwrap_or(0.0),
        lm: pois.lm,
        observation_ids: design.ids.clone(),
        response: design.response.clone(),
        fitted_lambda: fitted,
        converged: true,
        iterations: res.iterations,
    };
    Ok(RandomParamFit {
        base,
        sd_estimates,
        draws_used: spec.draws,
        marginal_effects,
        spec: spec.clone(),
    })
}

/// Standard errors on the `(beta, ln sigma)` scale from the numerical
/// Hessian. Collapsed standard deviations are held fixed; if the Hessian is
/// still not negative definite all `ln sigma` entries are dropped.
fn standard_errors(problem: &Problem, theta: &[f64], collapsed: &[bool]) -> Vec<Option<f64>> {
    let p = problem.p();
    let free: Vec<usize> = (0..theta.len()).filter(|&j| j < p || !collapsed[j - p]).collect();
    let attempt = |idx: &[usize]| -> Option<Vec<f64>> {
        let sub = |s: &[f64]| {
            let mut full = theta.to_vec();
            for (v, &j) in s.iter().zip(idx) {
                full[j] = *v;
            }
            problem.loglik(&full)
        };
        let start: Vec<f64> = idx.iter().map(|&j| theta[j]).collect();
        let h = optim::numerical_hessian(&sub, &start, 1e-4);
        let cov = (-h).cholesky()?.inverse();
        Some((0..idx.len()).map(|m| cov[(m, m)].sqrt()).collect())
    };
    let mut out = vec![None; theta.len()];
    let (idx, vals) = match attempt(&free) {
        Some(v) => (free, v),
        None => {
            let betas: Vec<usize> = (0..p).collect();
            match attempt(&betas) {
                Some(v) => (betas, v),
                None => return out,
            }
        }
    };
    for (j, v) in idx.into_iter().zip(vals) {
        out[j] = Some(v).filter(|s| s.is_finite());
    }
    out
}

fn marginal_effects_from(design: &DesignMatrix, beta: &[f64], lambda: &[f64]) -> Vec<MarginalEffect> {
    let mean_lambda = pairwise_sum(lambda) / lambda.len() as f64;
    design
        .columns
        .iter()
        .zip(beta)
        .filter(|(c, _)| c.name != CONSTANT)
        .map(|(c, b)| MarginalEffect {
            column: c.name.clone(),
            value: b * mean_lambda,
        })
        .collect()
}

/// `AME_k = beta_k * mean_i(lambda_bar_i)` for every non-constant column, with
/// `lambda_bar_i` recomputed from the fit's draws. Log-transformed columns
/// are per log-unit.
pub fn average_marginal_effects(fit: &RandomParamFit, design: &DesignMatrix) -> Result<Vec<MarginalEffect>> {
    let cols = fit.spec.resolve(design)?;
    let problem = Problem {
        design,
        cols,
        draws: DrawSet::new(&fit.spec, design.n_obs()),
    };
    let beta = fit.base.estimates();
    if beta.len() != design.n_cols() {
        return Err(Error::Invalid("fit and design have different columns".into()));
    }
    let sigma: Vec<f64> = fit.sd_estimates.iter().map(|s| s.estimate).collect();
    let lambda = problem.mean_lambda(&beta, &sigma);
    Ok(marginal_effects_from(design, &beta, &lambda))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn halton_golden_values() {
        assert_eq!(halton_sequence(2, 0, 4), vec![0.5, 0.25, 0.75, 0.125]);
        assert_eq!(halton_sequence(3, 0, 3), vec![1.0 / 3.0, 2.0 / 3.0, 1.0 / 9.0]);
        assert_eq!(halton_sequence(2, 2, 2), vec![0.75, 0.125]);
    }

    #[test]
    fn halton_elements_distinct_and_interior() {
        for base in [2u64, 3, 5, 7] {
            let n = base.pow(4) as usize;
            let mut seq = halton_sequence(base, 0, n);
            assert!(seq.iter().all(|&h| h > 0.0 && h < 1.0));
            seq.sort_by(f64::total_cmp);
            seq.dedup();
            assert_eq!(seq.len(), n);
        }
    }

    #[test]
    fn primes() {
        assert_eq!(first_primes(6), vec![2, 3, 5, 7, 11, 13]);
    }

    #[test]
    fn spec_validation() {
        let d = DesignMatrix::from_raw(
            vec!["a".into()],
            vec![1],
            &[("x".into(), crate::countmodel::Transform::Identity)],
            &[vec![1.0]],
        )
        .unwrap();
        let ok = RandomParamSpec::new(vec!["x".into()], 200, 10, 1);
        assert_eq!(ok.resolve(&d).unwrap(), vec![1]);
        let few = RandomParamSpec::new(vec!["x".into()], 10, 10, 1);
        assert!(few.resolve(&d).is_err());
        let missing = RandomParamSpec::new(vec!["nope".into()], 200, 10, 1);
        assert!(missing.resolve(&d).is_err());
        let mut dup = RandomParamSpec::new(vec!["x".into(), "constant".into()], 200, 10, 1);
        dup.halton_primes = vec![3, 3];
        assert!(dup.resolve(&d).is_err());
        dup.halton_primes = vec![3, 4];
        assert!(dup.resolve(&d).is_err());
    }

    #[test]
    fn shifted_draws_are_distinct_across_observations() {
        let spec = RandomParamSpec::new(vec!["x".into()], 50, 10, 7);
        let ds = DrawSet::new(&spec, 3);
        assert_ne!(ds.obs(0), ds.obs(1));
        assert!(ds.obs(2).iter().all(|z| z.is_finite()));
        let again = DrawSet::new(&spec, 3);
        assert_eq!(ds.obs(1), again.obs(1));
    }
}
