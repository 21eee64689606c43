//! Screening: compare each site's volatility percentile with its crash
//! percentile. Sites that are volatile but have few recorded crashes are
//! latent hotspots.

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::countmodel::report::ModelReport;
use crate::error::{Error, Result};
use crate::geomatch::{Control, IntersectionSite};
use crate::stats::average_ranks;
use crate::volatility::{join_inventory, LbvSummary};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Thresholds {
    /// Minimum discrepancy for a latent hotspot.
    pub latent_discrepancy: f64,
    /// Maximum crash percentile for a latent hotspot.
    pub latent_max_crash_percentile: f64,
    /// Minimum crash percentile for a known hotspot.
    pub known_min_crash_percentile: f64,
}

impl Default for Thresholds {
    fn default() -> Self {
        Thresholds {
            latent_discrepancy: 30.0,
            latent_max_crash_percentile: 50.0,
            known_min_crash_percentile: 80.0,
        }
    }
}

/// Weights of `cv_al, cv_ah, cv_dl, cv_dh` in the composite score.
pub const EQUAL_WEIGHTS: [f64; 4] = [1.0, 1.0, 1.0, 1.0];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Flag {
    KnownHotspot,
    LatentHotspot,
    Normal,
    InsufficientData,
}

impl fmt::Display for Flag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Flag::KnownHotspot => "known_hotspot",
            Flag::LatentHotspot => "latent_hotspot",
            Flag::Normal => "normal",
            Flag::InsufficientData => "insufficient_data",
        })
    }
}

/// Weighted mean of the defined CVs, weights renormalized over the defined
/// entries. `None` when no CV with positive weight is defined.
pub fn volatility_score(summary: &LbvSummary, weights: &[f64; 4]) -> Option<f64> {
    let (num, den) = summary
        .cvs()
        .iter()
        .zip(weights)
        .filter_map(|(cv, w)| cv.map(|c| (c * w, *w)))
        .fold((0.0, 0.0), |(n, d), (a, b)| (n + a, d + b));
    (den > 0.0).then(|| num / den)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HotspotRow {
    pub site_id: String,
    pub crashes_5yr: u64,
    pub crash_percentile: Option<f64>,
    pub volatility_score: Option<f64>,
    pub volatility_percentile: Option<f64>,
    pub discrepancy: Option<f64>,
    pub flag: Flag,
    /// Observed minus fitted crashes, when a model fit was supplied.
    pub model_residual: Option<f64>,
}

fn percentiles(values: &[f64]) -> Vec<f64> {
    let n = values.len() as f64;
    average_ranks(values).into_iter().map(|r| 100.0 * (r - 1.0) / (n - 1.0)).collect()
}

/// Ranks sites by `volatility_percentile - crash_percentile`, descending,
/// ties broken by `site_id`. Sites without sufficient volatility data are
/// kept out of the percentile pool and listed last.
pub fn rank_sites(
    summaries: &[LbvSummary],
    sites: &[IntersectionSite],
    weights: &[f64; 4],
    thresholds: &Thresholds,
) -> Result<Vec<HotspotRow>> {
    let joined = join_inventory(summaries, sites)?;
    let scored: Vec<(&IntersectionSite, Option<f64>)> = joined
        .iter()
        .map(|(s, l)| (*s, if l.sufficient { volatility_score(l, weights) } else { None }))
        .collect();
    let pool: Vec<(&IntersectionSite, f64)> = scored.iter().filter_map(|(s, v)| v.map(|v| (*s, v))).collect();
    if pool.len() < 2 {
        return Err(Error::Invalid(format!(
            "percentile ranking needs at least 2 sites with sufficient data, found {}",
            pool.len()
        )));
    }
    let crash_pct = percentiles(&pool.iter().map(|(s, _)| s.crashes_5yr_total as f64).collect::<Vec<_>>());
    let vol_pct = percentiles(&pool.iter().map(|(_, v)| *v).collect::<Vec<_>>());

    let mut ranked: Vec<HotspotRow> = pool
        .iter()
        .zip(crash_pct.iter().zip(&vol_pct))
        .map(|((site, score), (&cp, &vp))| {
            let d = vp - cp;
            let flag = if cp >= thresholds.known_min_crash_percentile {
                Flag::KnownHotspot
            } else if d >= thresholds.latent_discrepancy && cp <= thresholds.latent_max_crash_percentile {
                Flag::LatentHotspot
            } else {
                Flag::Normal
            };
            HotspotRow {
                site_id: site.site_id.clone(),
                crashes_5yr: site.crashes_5yr_total,
                crash_percentile: Some(cp),
                volatility_score: Some(*score),
                volatility_percentile: Some(vp),
                discrepancy: Some(d),
                flag,
                model_residual: None,
            }
        })
        .collect();
    ranked.sort_by(|a, b| {
            b.discrepancy
                .unwrap_or(f64::NEG_INFINITY)
                .total_cmp(&a.discrepancy.unwrap_or(f64::NEG_INFINITY))
                .then_with(|| a.site_id.cmp(&b.site_id))
        });

    let mut insufficient: Vec<HotspotRow> = scored
        .iter()
        .filter(|(_, v)| v.is_none())
        .map(|(s, _)| HotspotRow {
            site_id: s.site_id.clone(),
            crashes_5yr: s.crashes_5yr_total,
            crash_percentile: None,
            volatility_score: None,
            volatility_percentile: None,
            discrepancy: None,
            flag: Flag::InsufficientData,
            model_residual: None,
        })
        .collect();
    insufficient.sort_by(|a, b| a.site_id.cmp(&b.site_id));
    ranked.extend(insufficient);
    Ok(ranked)
}

/// Fills `model_residual` from a fitted model's observed and fitted counts.
pub fn attach_residuals(rows: &mut [HotspotRow], report: &ModelReport) {
    let resid: BTreeMap<String, f64> = report.residuals().into_iter().collect();
    for row in rows {
        row.model_residual = resid.get(&row.site_id).copied();
    }
}

fn cell(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

pub fn table_csv(rows: &[HotspotRow]) -> String {
    let with_resid = rows.iter().any(|r| r.model_residual.is_some());
    let mut out = String::from(
        "rank,site_id,crashes_5yr,crash_percentile,volatility_score,volatility_percentile,discrepancy,flag",
    );
    if with_resid {
        out.push_str(",model_residual");
    }
    out.push('\n');
    for (i, r) in rows.iter().enumerate() {
        out.push_str(&format!(
            "{},{},{},{},{},{},{},{}",
            i + 1,
            r.site_id,
            r.crashes_5yr,
            cell(r.crash_percentile),
            cell(r.volatility_score),
            cell(r.volatility_percentile),
            cell(r.discrepancy),
            r.flag
        ));
        if with_resid {
            out.push_str(&format!(",{}", cell(r.model_residual)));
        }
        out.push('\n');
    }
    out
}

pub fn write_table(path: &Path, rows: &[HotspotRow]) -> Result<()> {
    std::fs::write(path, table_csv(rows)).map_err(|e| Error::io(path, e))
}

/// Map-ready rows: position plus circle radii for crashes, `cv_al` and
/// `cv_dl`. Each radius is the value divided by the largest value among
/// sites with the same control type, so radii lie in `[0, 1]`.
pub fn plot_csv(summaries: &[LbvSummary], sites: &[IntersectionSite]) -> Result<String> {
    let joined = join_inventory(summaries, sites)?;
    let mut max: BTreeMap<Control, [f64; 3]> = BTreeMap::new();
    let values = |s: &IntersectionSite, l: &LbvSummary| [Some(s.crashes_5yr_total as f64), l.cv_al, l.cv_dl];
    for (s, l) in &joined {
        let m = max.entry(s.control).or_insert([0.0; 3]);
        for (slot, v) in m.iter_mut().zip(values(s, l)) {
            *slot = slot.max(v.unwrap_or(0.0));
        }
    }
    let mut out = String::from("site_id,control,lon,lat,crash_radius,cv_al_radius,cv_dl_radius\n");
    for (s, l) in &joined {
        let m = max[&s.control];
        let radii: Vec<String> = values(s, l)
            .iter()
            .zip(m)
            .map(|(v, mx)| cell(v.map(|v| if mx > 0.0 { v / mx } else { 0.0 })))
            .collect();
        out.push_str(&format!(
            "{},{},{},{},{}\n",
            s.site_id,
            s.control.as_str(),
            s.center_lon,
            s.center_lat,
            radii.join(",")
        ));
    }
    Ok(out)
}

pub fn write_plot_file(path: &Path, summaries: &[LbvSummary], sites: &[IntersectionSite]) -> Result<()> {
    std::fs::write(path, plot_csv(summaries, sites)?).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geomatch::tests::site;

    fn lbv(id: &str, cvs: [Option<f64>; 4]) -> LbvSummary {
        LbvSummary {
            site_id: id.into(),
            mean_speed: 10.0,
            n_points: 400,
            cv_al: cvs[0],
            cv_ah: cvs[1],
            cv_dl: cvs[2],
            cv_dh: cvs[3],
            n_al: 100,
            n_ah: 100,
            n_dl: 100,
            n_dh: 100,
            sufficient: cvs.iter().all(Option::is_some),
        }
    }

    #[test]
    fn score_examples() {
        assert_eq!(volatility_score(&lbv("a", [Some(100.0); 4]), &EQUAL_WEIGHTS), Some(100.0));
        let partial = lbv("a", [Some(120.0), None, Some(180.0), None]);
        assert_eq!(volatility_score(&partial, &EQUAL_WEIGHTS), Some(150.0));
        assert_eq!(volatility_score(&lbv("a", [None; 4]), &EQUAL_WEIGHTS), None);
        let weighted = volatility_score(&lbv("a", [Some(100.0), Some(200.0), None, None]), &[3.0, 1.0, 1.0, 1.0]);
        assert_eq!(weighted, Some(125.0));
    }

    fn with_crashes(id: &str, crashes: u64) -> IntersectionSite {
        let mut s = site(id, 42.0, -83.0);
        s.crashes_5yr_total = crashes;
        s
    }

    #[test]
    fn identical_sites_are_not_latent() {
        let sites: Vec<_> = ["a", "b", "c"].iter().map(|id| with_crashes(id, 5)).collect();
        let summaries: Vec<_> = ["a", "b", "c"].iter().map(|id| lbv(id, [Some(90.0); 4])).collect();
        let rows = rank_sites(&summaries, &sites, &EQUAL_WEIGHTS, &Thresholds::default()).unwrap();
        assert!(rows.iter().all(|r| r.discrepancy == Some(0.0)));
        assert!(rows.iter().all(|r| r.flag != Flag::LatentHotspot));
        assert_eq!(rows.iter().map(|r| r.site_id.as_str()).collect::<Vec<_>>(), ["a", "b", "c"]);
    }

    #[test]
    fn insufficient_sites_leave_the_pool() {
        let sites = vec![with_crashes("a", 0), with_crashes("b", 4), with_crashes("c", 9)];
        let summaries = vec![
            lbv("a", [Some(10.0); 4]),
            lbv("b", [Some(50.0), None, Some(50.0), Some(50.0)]),
            lbv("c", [Some(90.0); 4]),
        ];
        let rows = rank_sites(&summaries, &sites, &EQUAL_WEIGHTS, &Thresholds::default()).unwrap();
        assert_eq!(rows.last().unwrap().site_id, "b");
        assert_eq!(rows.last().unwrap().flag, Flag::InsufficientData);
        let c = rows.iter().find(|r| r.site_id == "c").unwrap();
        assert_eq!(c.crash_percentile, Some(100.0));
    }

    #[test]
    fn fewer_than_two_sites_is_an_error() {
        let sites = vec![with_crashes("a", 0)];
        let summaries = vec![lbv("a", [Some(10.0); 4])];
        assert!(rank_sites(&summaries, &sites, &EQUAL_WEIGHTS, &Thresholds::default()).is_err());
    }

    #[test]
    fn plot_radii_scale_to_stratum_max() {
        let sites = vec![with_crashes("a", 2), with_crashes("b", 8)];
        let summaries = vec![lbv("a", [Some(50.0); 4]), lbv("b", [Some(100.0), None, None, Some(1.0)])];
        let text = plot_csv(&summaries, &sites).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert!(lines[1].ends_with(",0.25,0.5,1"), "{}", lines[1]);
        assert!(lines[2].ends_with(",1,1,"), "{}", lines[2]);
    }
}
