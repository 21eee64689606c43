//! Model specifications: which response, covariates, transforms, stratum and
//! family to fit. Specs are TOML, either a single table or a `[[model]]`
//! array.
//!
//! ```toml
//! name = "all_fixed"
//! response = "crashes_5yr_total"
//! covariates = ["cv_al", "cv_dh", "aadt_major"]
//! transforms = { aadt_major = "log" }
//! stratum = "all"
//! family = "auto"
//! ```

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::report::ModelReport;
use super::{fit_negative_binomial, fit_poisson, DesignMatrix, FitOptions, LmDecision, Transform};
use crate::error::{Error, Result};
use crate::geomatch::IntersectionSite;
use crate::randparam::{self, RandomParamSpec, DEFAULT_DRAWS, DEFAULT_HALTON_SKIP};
use crate::volatility::{join_inventory, site_variable, LbvSummary, Stratum};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FamilyChoice {
    Poisson,
    Negbin,
    /// Poisson unless the LM test rejects equidispersion, then NB2.
    Auto,
    RandomPoisson,
}

impl FamilyChoice {
    pub fn as_str(self) -> &'static str {
        match self {
            FamilyChoice::Poisson => "poisson",
            FamilyChoice::Negbin => "negbin",
            FamilyChoice::Auto => "auto",
            FamilyChoice::RandomPoisson => "random-poisson",
        }
    }
}

fn default_family() -> FamilyChoice {
    FamilyChoice::Auto
}
fn default_stratum() -> Stratum {
    Stratum::All
}
fn default_draws() -> usize {
    DEFAULT_DRAWS
}
fn default_skip() -> usize {
    DEFAULT_HALTON_SKIP
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSpec {
    pub name: String,
    pub response: String,
    #[serde(default)]
    pub covariates: Vec<String>,
    #[serde(default)]
    pub transforms: BTreeMap<String, Transform>,
    #[serde(default = "default_stratum")]
    pub stratum: Stratum,
    #[serde(default = "default_family")]
    pub family: FamilyChoice,
    #[serde(default)]
    pub random_columns: Vec<String>,
    #[serde(default = "default_draws")]
    pub draws: usize,
    #[serde(default = "default_skip")]
    pub halton_skip: usize,
    #[serde(default)]
    pub seed: Option<u64>,
}

impl ModelSpec {
    pub fn parse_all(text: &str) -> Result<Vec<ModelSpec>> {
        let bad = |e: toml::de::Error| Error::Config(format!("model spec: {e}"));
        let mut table: toml::Table = toml::from_str(text).map_err(bad)?;
        let specs: Vec<ModelSpec> = match table.remove("model") {
            Some(list) if table.is_empty() => list.try_into().map_err(bad)?,
            Some(_) => return Err(Error::Config("model spec mixes [[model]] entries with top-level keys".into())),
            None => vec![table.try_into().map_err(bad)?],
        };
        if specs.is_empty() {
            return Err(Error::Config("model spec file lists no models".into()));
        }
        let mut names = std::collections::HashSet::new();
        for s in &specs {
            s.validate()?;
            if !names.insert(s.name.as_str()) {
                return Err(Error::Config(format!("model name '{}' used twice", s.name)));
            }
        }
        Ok(specs)
    }

    pub fn load_all(path: &Path) -> Result<Vec<ModelSpec>> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse_all(&text)
    }

    pub fn validate(&self) -> Result<()> {
        let err = |m: String| Err(Error::Config(format!("model '{}': {m}", self.name)));
        if self.name.is_empty() || !self.name.chars().all(|c| c.is_ascii_alphanumeric() || c == '_' || c == '-') {
            return err("name must be non-empty and use only letters, digits, '_' or '-'".into());
        }
        for key in self.transforms.keys() {
            if !self.covariates.contains(key) {
                return err(format!("transform given for '{key}', which is not a covariate"));
            }
        }
        if self.family != FamilyChoice::RandomPoisson && !self.random_columns.is_empty() {
            return err("random_columns require family = \"random-poisson\"".into());
        }
        Ok(())
    }

    fn covariate_list(&self) -> Vec<(String, Transform)> {
        self.covariates
            .iter()
            .map(|c| (c.clone(), self.transforms.get(c).copied().unwrap_or_default()))
            .collect()
    }

    /// Design over the sites of the spec's stratum. Sites with an undefined
    /// covariate (e.g. an insufficient CV quadrant) are dropped; the number
    /// dropped is returned alongside.
    pub fn build_design(&self, summaries: &[LbvSummary], sites: &[IntersectionSite]) -> Result<(DesignMatrix, usize)> {
        let joined = join_inventory(summaries, sites)?;
        let mut ids = Vec::new();
        let mut response = Vec::new();
        let mut raw = Vec::new();
        let mut dropped = 0;
        for (site, lbv) in joined.iter().filter(|(s, _)| self.stratum.contains(s.control)) {
            let y = site_variable(&self.response, site, Some(lbv)).ok_or_else(|| {
                Error::Config(format!("model '{}': unknown response '{}'", self.name, self.response))
            })?;
            if y < 0.0 || y.fract() != 0.0 {
                return Err(Error::Invalid(format!(
                    "response '{}' of site '{}' is not a count: {y}",
                    self.response, site.site_id
                )));
            }
            let mut row = Vec::with_capacity(self.covariates.len());
            for c in &self.covariates {
                if site_variable(c, site, None).is_none() && !is_lbv_variable(c) {
                    return Err(Error::Config(format!("model '{}': unknown covariate '{c}'", self.name)));
                }
                match site_variable(c, site, Some(lbv)) {
                    Some(v) => row.push(v),
                    None => break,
                }
            }
            if row.len() < self.covariates.len() {
                dropped += 1;
                continue;
            }
            ids.push(site.site_id.clone());
            response.push(y as u64);
            raw.push(row);
        }
        if ids.is_empty() {
            return Err(Error::Invalid(format!(
                "model '{}': no sites with complete data in stratum '{}'",
                self.name,
                self.stratum.as_str()
            )));
        }
        let design = DesignMatrix::from_raw(ids, response, &self.covariate_list(), &raw)?;
        Ok((design, dropped))
    }

    pub fn random_spec(&self, default_seed: u64) -> RandomParamSpec {
        let names = self
            .random_columns
            .iter()
            .map(|c| match self.transforms.get(c) {
                Some(Transform::Log) => format!("ln({c})"),
                _ => c.clone(),
            })
            .collect();
        RandomParamSpec::new(names, self.draws, self.halton_skip, self.seed.unwrap_or(default_seed))
    }

    /// Builds the design and fits the model, returning its report.
    pub fn run(
        &self,
        summaries: &[LbvSummary],
        sites: &[IntersectionSite],
        options: &FitOptions,
        default_seed: u64,
    ) -> Result<ModelReport> {
        let (design, dropped) = self.build_design(summaries, sites)?;
        if dropped > 0 {
            log::warn!("model '{}': {dropped} sites dropped for undefined covariates", self.name);
        }
        let report = |fit| ModelReport::new(&self.name, self.stratum.as_str(), self.family.as_str(), dropped, fit);
        match self.family {
            FamilyChoice::Poisson => Ok(report(fit_poisson(&design, options)?)),
            FamilyChoice::Negbin => Ok(report(fit_negative_binomial(&design, options)?)),
            FamilyChoice::Auto => {
                let pois = fit_poisson(&design, options)?;
                match pois.lm.map(|l| l.decision) {
                    Some(LmDecision::Overdispersed) => Ok(report(fit_negative_binomial(&design, options)?)),
                    _ => Ok(report(pois)),
                }
            }
            FamilyChoice::RandomPoisson => {
                let rp = randparam::fit_random_poisson(&design, &self.random_spec(default_seed), options)?;
                let mut r = report(rp.base);
                r.random_sd = rp.sd_estimates;
                r.marginal_effects = rp.marginal_effects;
                r.draws = Some(rp.draws_used);
                Ok(r)
            }
        }
    }
}

fn is_lbv_variable(name: &str) -> bool {
    matches!(name, "cv_al" | "cv_ah" | "cv_dl" | "cv_dh" | "mean_speed")
}
