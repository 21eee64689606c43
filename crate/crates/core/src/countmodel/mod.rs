//! Crash-frequency count regression.
//!
//! Fixed-parameter Poisson by Newton-Raphson, the over-dispersion Lagrange
//! multiplier test, a negative binomial (NB2) fallback, and fit statistics.

mod negbin;
pub(crate) mod poisson;
pub mod report;
pub mod spec;

use std::collections::HashSet;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use negbin::{fit_negative_binomial, nb_loglik};
pub use poisson::{fit_poisson, poisson_loglik, poisson_score};

pub const CONSTANT: &str = "constant";
/// 95% critical value of a chi-square with one degree of freedom.
pub const LM_CRITICAL: f64 = 3.84;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Transform {
    #[default]
    Identity,
    #[serde(alias = "ln")]
    Log,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Column {
    /// Display name: the raw variable, or `ln(var)` when log-transformed.
    pub name: String,
    pub source: String,
    pub transform: Transform,
}

impl Column {
    pub fn new(source: &str, transform: Transform) -> Column {
        let name = match transform {
            Transform::Identity => source.to_string(),
            Transform::Log => format!("ln({source})"),
        };
        Column {
            name,
            source: source.to_string(),
            transform,
        }
    }

    fn constant() -> Column {
        Column::new(CONSTANT, Transform::Identity)
    }
}

/// Observations, counts and a dense design with a leading constant column.
#[derive(Debug, Clone, PartialEq)]
pub struct DesignMatrix {
    pub ids: Vec<String>,
    pub response: Vec<u64>,
    pub columns: Vec<Column>,
    values: DMatrix<f64>,
}

impl DesignMatrix {
    /// Builds a design from raw covariate rows (one inner vec per observation,
    /// ordered like `covariates`). Log transforms are applied here; the
    /// constant column is prepended.
    pub fn from_raw(
        ids: Vec<String>,
        response: Vec<u64>,
        covariates: &[(String, Transform)],
        raw: &[Vec<f64>],
    ) -> Result<DesignMatrix> {
        let n = ids.len();
        if response.len() != n || raw.len() != n {
            return Err(Error::Invalid(format!(
                "design has {n} ids, {} responses and {} covariate rows",
                response.len(),
                raw.len()
            )));
        }
        let mut columns = vec![Column::constant()];
        columns.extend(covariates.iter().map(|(s, t)| Column::new(s, *t)));
        let mut seen = HashSet::new();
        for c in &columns {
            if !seen.insert(c.name.as_str()) {
                return Err(Error::Invalid(format!("duplicate design column '{}'", c.name)));
            }
        }
        let p = columns.len();
        let mut values = DMatrix::zeros(n, p);
        for (i, row) in raw.iter().enumerate() {
            if row.len() != p - 1 {
                return Err(Error::Invalid(format!(
                    "observation '{}' has {} covariates, expected {}",
                    ids[i],
                    row.len(),
                    p - 1
                )));
            }
            values[(i, 0)] = 1.0;
            for (j, (&v, col)) in row.iter().zip(&columns[1..]).enumerate() {
                let x = match col.transform {
                    Transform::Identity => v,
                    Transform::Log if v > 0.0 => v.ln(),
                    Transform::Log => {
                        return Err(Error::Invalid(format!(
                            "log-transformed column '{}' needs a positive value, observation '{}' has {v}",
                            col.source, ids[i]
                        )))
                    }
                };
                if !x.is_finite() {
                    return Err(Error::Invalid(format!(
                        "non-finite value in column '{}' for observation '{}'",
                        col.name, ids[i]
                    )));
                }
                values[(i, j + 1)] = x;
            }
        }
        Ok(DesignMatrix {
            ids,
            response,
            columns,
            values,
        })
    }

    /// Builds a design from already-transformed columns (constant included).
    pub fn from_matrix(ids: Vec<String>, response: Vec<u64>, columns: Vec<Column>, values: DMatrix<f64>) -> Result<Self> {
        if values.nrows() != ids.len() || response.len() != ids.len() || values.ncols() != columns.len() {
            return Err(Error::Invalid("design dimensions do not agree".into()));
        }
        if columns.first().map(|c| c.name.as_str()) != Some(CONSTANT) {
            return Err(Error::Invalid("first design column must be the constant".into()));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::Invalid("design contains non-finite values".into()));
        }
        Ok(DesignMatrix {
            ids,
            response,
            columns,
            values,
        })
    }

    pub fn n_obs(&self) -> usize {
        self.values.nrows()
    }

    pub fn n_cols(&self) -> usize {
        self.values.ncols()
    }

    pub fn x(&self) -> &DMatrix<f64> {
        &self.values
    }

    pub fn names(&self) -> Vec<String> {
        self.columns.iter().map(|c| c.name.clone()).collect()
    }

    /// Index of a column by display name or by source variable name.
    pub fn column_index(&self, name: &str) -> Option<usize> {
        self.columns
            .iter()
            .position(|c| c.name == name)
            .or_else(|| self.columns.iter().position(|c| c.source == name))
    }

    pub fn response_f64(&self) -> Vec<f64> {
        self.response.iter().map(|&y| y as f64).collect()
    }

    /// Copy of the design with one column multiplied by `c`.
    pub fn scale_column(&self, j: usize, c: f64) -> DesignMatrix {
        let mut out = self.clone();
        out.values.column_mut(j).scale_mut(c);
        out
    }

    /// Intercept-only design on the same observations.
    pub fn constant_only(&self) -> DesignMatrix {
        DesignMatrix {
            ids: self.ids.clone(),
            response: self.response.clone(),
            columns: vec![Column::constant()],
            values: DMatrix::from_element(self.n_obs(), 1, 1.0),
        }
    }

    /// Rejects designs whose columns are (numerically) linearly dependent,
    /// naming the offending column and the columns it is a combination of.
    pub fn check_rank(&self) -> Result<()> {
        let n = self.n_obs();
        let p = self.n_cols();
        if n < p {
            return Err(Error::RankDeficient(format!("{n} observations for {p} columns")));
        }
        let mut basis: Vec<nalgebra::DVector<f64>> = Vec::new();
        let mut kept: Vec<usize> = Vec::new();
        for j in 0..p {
            let col = self.values.column(j).into_owned();
            let norm = col.norm();
            if norm == 0.0 {
                return Err(Error::RankDeficient(format!("column '{}' is identically zero", self.columns[j].name)));
            }
            let mut r = col / norm;
            for _ in 0..2 {
                for q in &basis {
                    let d = q.dot(&r);
                    r -= q * d;
                }
            }
            let rn = r.norm();
            if rn < 1e-8 {
                let partners = self.collinear_partners(j, &kept);
                return Err(Error::RankDeficient(format!(
                    "column '{}' is collinear with [{}]",
                    self.columns[j].name,
                    partners.join(", ")
                )));
            }
            basis.push(r / rn);
            kept.push(j);
        }
        Ok(())
    }

    fn collinear_partners(&self, j: usize, kept: &[usize]) -> Vec<String> {
        let sub = DMatrix::from_fn(self.n_obs(), kept.len(), |i, k| self.values[(i, kept[k])]);
        let target = self.values.column(j).into_owned();
        let svd = sub.clone().svd(true, true);
        let Ok(coef) = svd.solve(&target, 1e-12) else {
            return kept.iter().map(|&k| self.columns[k].name.clone()).collect();
        };
        let scale = target.norm();
        kept.iter()
            .enumerate()
            .filter(|&(idx, _)| coef[idx].abs() * sub.column(idx).norm() > 1e-6 * scale)
            .map(|(_, &k)| self.columns[k].name.clone())
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Family {
    Poisson,
    Negbin,
    RandomPoisson,
}

impl Family {
    pub fn as_str(self) -> &'static str {
        match self {
            Family::Poisson => "poisson",
            Family::Negbin => "negbin",
            Family::RandomPoisson => "random-poisson",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Coefficient {
    pub name: String,
    pub estimate: f64,
    pub std_error: Option<f64>,
    pub t_stat: Option<f64>,
}

impl Coefficient {
    pub fn new(name: &str, estimate: f64, std_error: Option<f64>) -> Coefficient {
        let std_error = std_error.filter(|s| s.is_finite() && *s > 0.0);
        Coefficient {
            name: name.to_string(),
            estimate,
            std_error,
            t_stat: std_error.map(|s| estimate / s),
        }
    }
}

/// NB2 dispersion: Var(y) = mu + alpha * mu^2.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dispersion {
    pub alpha: f64,
    pub std_error: Option<f64>,
    /// The likelihood is maximized on the alpha = 0 boundary (Poisson).
    pub collapsed_to_poisson: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LmDecision {
    PoissonOk,
    Overdispersed,
}

impl LmDecision {
    pub fn as_str(self) -> &'static str {
        match self {
            LmDecision::PoissonOk => "poisson_ok",
            LmDecision::Overdispersed => "overdispersed",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LmTest {
    pub statistic: f64,
    pub decision: LmDecision,
}

/// Lagrange multiplier statistic for over-dispersion,
/// `[sum((y - mu)^2 - y)]^2 / (2 sum mu^2)`, compared with `critical`.
pub fn lagrange_multiplier_test(response: &[u64], mu: &[f64], critical: f64) -> Result<LmTest> {
    if response.len() != mu.len() || mu.is_empty() {
        return Err(Error::Invalid("LM test needs matching, non-empty counts and means".into()));
    }
    let denom: f64 = 2.0 * mu.iter().map(|m| m * m).sum::<f64>();
    if !(denom > 0.0) {
        return Err(Error::Invalid("LM statistic undefined: all fitted means are zero".into()));
    }
    let num: f64 = response
        .iter()
        .zip(mu)
        .map(|(&y, &m)| {
            let y = y as f64;
            (y - m) * (y - m) - y
        })
        .sum();
    let statistic = num * num / denom;
    Ok(LmTest {
        statistic,
        decision: if statistic < critical {
            LmDecision::PoissonOk
        } else {
            LmDecision::Overdispersed
        },
    })
}

/// McFadden's pseudo R²: `1 - L(beta) / L(0)`.
pub fn mcfadden_rho2(loglik_zero: f64, loglik_conv: f64) -> Result<f64> {
    if !loglik_zero.is_finite() || !loglik_conv.is_finite() || loglik_zero >= 0.0 {
        return Err(Error::Invalid(format!(
            "McFadden rho² needs finite log-likelihoods with L(0) < 0 (got {loglik_zero}, {loglik_conv})"
        )));
    }
    Ok(1.0 - loglik_conv / loglik_zero)
}

#[derive(Debug, Clone)]
pub struct FitOptions {
    pub max_iter: usize,
    pub score_tol: f64,
    pub rel_tol: f64,
    pub lm_critical: f64,
}

impl Default for FitOptions {
    fn default() -> Self {
        FitOptions {
            max_iter: 100,
            score_tol: 1e-8,
            rel_tol: 1e-10,
            lm_critical: LM_CRITICAL,
        }
    }
}

/// Estimation output shared by every model family.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelFit {
    pub family: Family,
    pub coefficients: Vec<Coefficient>,
    pub dispersion: Option<Dispersion>,
    /// Intercept-only log-likelihood of the same family.
    pub loglik_zero: f64,
    pub loglik_conv: f64,
    pub mcfadden_rho2: f64,
    /// LM statistic of the fixed Poisson fit on the same design.
    pub lm: Option<LmTest>,
    pub observation_ids: Vec<String>,
    pub response: Vec<u64>,
    pub fitted_lambda: Vec<f64>,
    pub converged: bool,
    pub iterations: usize,
}

impl ModelFit {
    pub fn coefficient(&self, name: &str) -> Option<&Coefficient> {
        self.coefficients.iter().find(|c| c.name == name)
    }

    pub fn estimates(&self) -> Vec<f64> {
        self.coefficients.iter().map(|c| c.estimate).collect()
    }

    pub fn lm_stat(&self) -> Option<f64> {
        self.lm.map(|l| l.statistic)
    }
}

/// Poisson log-likelihood of the intercept-only model, closed form at
/// `beta0 = ln(mean(y))`.
pub fn intercept_only_loglik(response: &[u64]) -> Result<f64> {
    let n = response.len() as f64;
    let mean = response.iter().sum::<u64>() as f64 / n;
    if !(mean > 0.0) {
        return Err(Error::Invalid("response is all zero; the Poisson MLE does not exist".into()));
    }
    let lm = mean.ln();
    Ok(response
        .iter()
        .map(|&y| y as f64 * lm - mean - statrs::function::factorial::ln_factorial(y))
        .sum())
}
