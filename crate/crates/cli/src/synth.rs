//! `lbv synth`: synthetic sites, trajectories and count data from TOML configs.

use std::path::{Path, PathBuf};

use clap::ValueEnum;
use lbv_core::geomatch::{self, IntersectionSite};
use lbv_core::ingest;
use lbv_core::stats::stream_seed;
use lbv_core::synth::{self, Covariate, SiteProfile, TrajectoryProfile};
use lbv_core::{Error, Result};
use serde::Deserialize;

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum Kind {
    /// Intersection inventory.
    Sites,
    /// Message records for every site of an inventory.
    Trajectories,
    /// Poisson counts over a random design.
    Counts,
}

/// Trajectories around either an existing inventory or generated sites.
/// Each site gets its own stream of the profile seed.
#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct TrajectoryConfig {
    inventory: Option<PathBuf>,
    sites: Option<SiteProfile>,
    profile: TrajectoryProfile,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct CountConfig {
    n: usize,
    #[serde(default)]
    covariates: Vec<Covariate>,
    /// Intercept first.
    beta: Vec<f64>,
    /// Defaults to all zeros (fixed coefficients).
    sigma: Option<Vec<f64>>,
    seed: u64,
}

fn read_toml<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
}

fn trajectory_sites(cfg: &TrajectoryConfig, config_path: &Path) -> Result<Vec<IntersectionSite>> {
    match (&cfg.inventory, &cfg.sites) {
        (Some(p), None) => {
            let p = if p.is_absolute() {
                p.clone()
            } else {
                config_path.parent().unwrap_or(Path::new(".")).join(p)
            };
            geomatch::load_inventory(&p)
        }
        (None, Some(profile)) => synth::generate_sites(profile),
        _ => Err(Error::Config("trajectory config needs exactly one of 'inventory' or [sites]".into())),
    }
}

pub fn run(kind: Kind, config: &Path, out: &Path) -> Result<()> {
    match kind {
        Kind::Sites => {
            let profile: SiteProfile = read_toml(config)?;
            geomatch::write_inventory(out, &synth::generate_sites(&profile)?)
        }
        Kind::Trajectories => {
            let cfg: TrajectoryConfig = read_toml(config)?;
            let sites = trajectory_sites(&cfg, config)?;
            let mut records = Vec::new();
            for (i, site) in sites.iter().enumerate() {
                let profile = TrajectoryProfile {
                    seed: stream_seed(cfg.profile.seed, i as u64),
                    ..cfg.profile.clone()
                };
                records.extend(synth::generate_trajectories(site, &profile)?);
            }
            ingest::write_records(out, &records)
        }
        Kind::Counts => {
            let cfg: CountConfig = read_toml(config)?;
            let x = synth::generate_design(cfg.n, &cfg.covariates, cfg.seed)?;
            let sigma = cfg.sigma.unwrap_or_else(|| vec![0.0; x.ncols()]);
            let y = synth::generate_counts(&x, &cfg.beta, &sigma, stream_seed(cfg.seed, 0))?;
            let mut w = csv::Writer::from_path(out).map_err(|e| Error::csv(out, e))?;
            let mut header = vec!["id".to_string(), "y".to_string()];
            header.extend((1..x.ncols()).map(|j| format!("x{j}")));
            w.write_record(&header).map_err(|e| Error::csv(out, e))?;
            for (i, yi) in y.iter().enumerate() {
                let mut row = vec![i.to_string(), yi.to_string()];
                row.extend((1..x.ncols()).map(|j| x[(i, j)].to_string()));
                w.write_record(&row).map_err(|e| Error::csv(out, e))?;
            }
            w.flush().map_err(|e| Error::io(out, e))
        }
    }
}
