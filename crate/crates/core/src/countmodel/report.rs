//! Model reports: a JSON document for machines and an aligned text table
//! laid out like a coefficient table (estimate, t-stat, marginal effect,
//! standard-deviation rows under random coefficients).

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Coefficient, LmDecision, ModelFit};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SdRow {
    /// Column the standard deviation belongs to.
    pub column: String,
    pub estimate: f64,
    pub std_error: Option<f64>,
    pub t_stat: Option<f64>,
    pub collapsed_to_fixed: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MarginalEffect {
    pub column: String,
    pub value: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelReport {
    pub name: String,
    pub stratum: String,
    /// Family named in the spec (`auto` resolves to the fitted one).
    pub requested_family: String,
    pub n_obs: usize,
    /// Sites dropped because a needed covariate was undefined.
    pub n_dropped: usize,
    pub fit: ModelFit,
    #[serde(default)]
    pub random_sd: Vec<SdRow>,
    #[serde(default)]
    pub marginal_effects: Vec<MarginalEffect>,
    #[serde(default)]
    pub draws: Option<usize>,
}

impl ModelReport {
    pub fn new(name: &str, stratum: &str, requested_family: &str, n_dropped: usize, fit: ModelFit) -> ModelReport {
        ModelReport {
            name: name.to_string(),
            stratum: stratum.to_string(),
            requested_family: requested_family.to_string(),
            n_obs: fit.response.len(),
            n_dropped,
            fit,
            random_sd: Vec::new(),
            marginal_effects: Vec::new(),
            draws: None,
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes") + "\n"
    }

    pub fn from_json(text: &str) -> Result<ModelReport> {
        serde_json::from_str(text).map_err(|e| Error::Invalid(format!("malformed model report: {e}")))
    }

    pub fn read(path: &Path) -> Result<ModelReport> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }

    /// Observed minus fitted count for each observation.
    pub fn residuals(&self) -> Vec<(String, f64)> {
        self.fit
            .observation_ids
            .iter()
            .zip(self.fit.response.iter().zip(&self.fit.fitted_lambda))
            .map(|(id, (&y, &l))| (id.clone(), y as f64 - l))
            .collect()
    }

    /// `site_id,observed,fitted` rows.
    pub fn predictions_csv(&self) -> String {
        let mut out = String::from("site_id,observed,fitted\n");
        for (id, (y, l)) in self
            .fit
            .observation_ids
            .iter()
            .zip(self.fit.response.iter().zip(&self.fit.fitted_lambda))
        {
            out.push_str(&format!("{id},{y},{l}\n"));
        }
        out
    }

    pub fn to_text(&self) -> String {
        let fit = &self.fit;
        let mut out = format!(
            "Model {} ({}, stratum {}, N = {})\n",
            self.name,
            fit.family.as_str(),
            self.stratum,
            self.n_obs
        );
        if self.n_dropped > 0 {
            out.push_str(&format!("{} sites dropped for undefined covariates\n", self.n_dropped));
        }
        let me_col = !self.marginal_effects.is_empty();
        let rule = "-".repeat(if me_col { 70 } else { 58 });
        out.push_str(&rule);
        out.push('\n');
        out.push_str(&format!("{:<30}{:>14}{:>14}", "Variable", "Estimate", "t-stat"));
        if me_col {
            out.push_str(&format!("{:>12}", "ME"));
        }
        out.push('\n');
        out.push_str(&rule);
        out.push('\n');
        for c in &fit.coefficients {
            out.push_str(&coef_line(c, me_col, self.me(&c.name)));
            if let Some(sd) = self.random_sd.iter().find(|s| s.column == c.name) {
                let t = if sd.collapsed_to_fixed {
                    "collapsed".to_string()
                } else {
                    opt(sd.t_stat, 3)
                };
                out.push_str(&format!("{:<30}{:>14}{:>14}", "  Standard deviation", num(sd.estimate, 4), t));
                if me_col {
                    out.push_str(&format!("{:>12}", "---"));
                }
                out.push('\n');
            }
        }
        if let Some(d) = &fit.dispersion {
            let t = if d.collapsed_to_poisson {
                "collapsed".to_string()
            } else {
                opt(d.std_error.map(|s| d.alpha / s), 3)
            };
            out.push_str(&format!("{:<30}{:>14}{:>14}\n", "Dispersion alpha", num(d.alpha, 4), t));
        }
        out.push_str(&rule);
        out.push('\n');
        out.push_str(&format!("{:<30}{:>14.2}\n", "Log-lik. at zero L(0)", fit.loglik_zero));
        out.push_str(&format!("{:<30}{:>14.2}\n", "Log-lik. at convergence L(b)", fit.loglik_conv));
        out.push_str(&format!("{:<30}{:>14.3}\n", "McFadden rho2", fit.mcfadden_rho2));
        if let Some(lm) = fit.lm {
            out.push_str(&format!("{:<30}{:>14.3}\n", "LM statistic", lm.statistic));
            let label = match lm.decision {
                LmDecision::PoissonOk => "poisson_ok",
                LmDecision::Overdispersed => "overdispersed",
            };
            out.push_str(&format!("{:<30}{:>14}\n", "LM decision", label));
        }
        if let Some(r) = self.draws {
            out.push_str(&format!("{:<30}{:>14}\n", "Halton draws", r));
        }
        out.push_str(&format!("{:<30}{:>14}\n", "Iterations", fit.iterations));
        out
    }

    fn me(&self, name: &str) -> Option<f64> {
        self.marginal_effects.iter().find(|m| m.column == name).map(|m| m.value)
    }
}

fn num(v: f64, digits: usize) -> String {
    format!("{v:.digits$}")
}

fn opt(v: Option<f64>, digits: usize) -> String {
    v.map(|x| num(x, digits)).unwrap_or_else(|| "---".into())
}

fn coef_line(c: &Coefficient, me_col: bool, me: Option<f64>) -> String {
    let mut line = format!("{:<30}{:>14}{:>14}", c.name, num(c.estimate, 4), opt(c.t_stat, 3));
    if me_col {
        line.push_str(&format!("{:>12}", opt(me, 3)));
    }
    line.push('\n');
    line
}
