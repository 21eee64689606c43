//! Location-based volatility: coefficients of variation of longitudinal
//! acceleration and deceleration magnitudes, split at the site's mean speed.
//!
//! ```text
//!              speed <= mean      speed > mean
//! accel > 0        AL                 AH
//! accel < 0        DL                 DH
//! ```
//!
//! Zero accelerations belong to no quadrant.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geomatch::{Control, IntersectionSite, MatchedPoint};
use crate::ingest::open_delimited;
use crate::stats;

pub const DEFAULT_MIN_QUADRANT_N: usize = 30;

#[derive(Debug, Clone, Copy, PartialEq, Eq, thiserror::Error)]
pub enum CvError {
    #[error("coefficient of variation of an empty sample is undefined")]
    Empty,
    #[error("coefficient of variation needs strictly positive magnitudes")]
    NonPositive,
}

/// `100 * s / m` with the sample standard deviation; a single value has
/// zero dispersion.
pub fn coefficient_of_variation(values: &[f64]) -> Result<f64, CvError> {
    if values.is_empty() {
        return Err(CvError::Empty);
    }
    if values.iter().any(|v| !(*v > 0.0)) {
        return Err(CvError::NonPositive);
    }
    if values.len() == 1 {
        return Ok(0.0);
    }
    let m = stats::mean(values).expect("non-empty");
    let s = stats::sample_sd(values).expect("two or more values");
    Ok(100.0 * s / m)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Quadrant {
    AccelLow,
    AccelHigh,
    DecelLow,
    DecelHigh,
}

impl Quadrant {
    pub const ALL: [Quadrant; 4] = [
        Quadrant::AccelLow,
        Quadrant::AccelHigh,
        Quadrant::DecelLow,
        Quadrant::DecelHigh,
    ];

    pub fn label(self) -> &'static str {
        match self {
            Quadrant::AccelLow => "cv_al",
            Quadrant::AccelHigh => "cv_ah",
            Quadrant::DecelLow => "cv_dl",
            Quadrant::DecelHigh => "cv_dh",
        }
    }

    /// Quadrant of a point given the site mean speed. Points with speed equal
    /// to the mean are in the low bin.
    pub fn classify(speed: f64, accel: f64, mean_speed: f64) -> Option<Quadrant> {
        let low = speed <= mean_speed;
        if accel > 0.0 {
            Some(if low { Quadrant::AccelLow } else { Quadrant::AccelHigh })
        } else if accel < 0.0 {
            Some(if low { Quadrant::DecelLow } else { Quadrant::DecelHigh })
        } else {
            None
        }
    }
}

/// Per-site volatility summary. CVs are in percent; `None` marks a quadrant
/// with too few samples.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LbvSummary {
    pub site_id: String,
    pub mean_speed: f64,
    pub n_points: usize,
    pub cv_al: Option<f64>,
    pub cv_ah: Option<f64>,
    pub cv_dl: Option<f64>,
    pub cv_dh: Option<f64>,
    pub n_al: usize,
    pub n_ah: usize,
    pub n_dl: usize,
    pub n_dh: usize,
    pub sufficient: bool,
}

impl LbvSummary {
    pub fn cv(&self, q: Quadrant) -> Option<f64> {
        match q {
            Quadrant::AccelLow => self.cv_al,
            Quadrant::AccelHigh => self.cv_ah,
            Quadrant::DecelLow => self.cv_dl,
            Quadrant::DecelHigh => self.cv_dh,
        }
    }

    pub fn count(&self, q: Quadrant) -> usize {
        match q {
            Quadrant::AccelLow => self.n_al,
            Quadrant::AccelHigh => self.n_ah,
            Quadrant::DecelLow => self.n_dl,
            Quadrant::DecelHigh => self.n_dh,
        }
    }

    pub fn cvs(&self) -> [Option<f64>; 4] {
        [self.cv_al, self.cv_ah, self.cv_dl, self.cv_dh]
    }
}

/// Computes the four quadrant CVs for the matched points of one site.
pub fn compute_lbv(points: &[MatchedPoint], min_quadrant_n: usize) -> Result<LbvSummary> {
    let Some(first) = points.first() else {
        return Err(Error::Invalid("cannot compute volatility from an empty point set".into()));
    };
    let site_id = &first.site_id;
    if let Some(other) = points.iter().find(|p| &p.site_id != site_id) {
        return Err(Error::Invalid(format!(
            "points from several sites passed together ({site_id}, {})",
            other.site_id
        )));
    }
    let speeds: Vec<f64> = points.iter().map(|p| p.speed).collect();
    let mean_speed = stats::mean(&speeds).expect("non-empty");

    let mut bins: [Vec<f64>; 4] = Default::default();
    for p in points {
        if let Some(q) = Quadrant::classify(p.speed, p.accel_long, mean_speed) {
            bins[q as usize].push(p.accel_long.abs());
        }
    }
    let cv = |values: &Vec<f64>| -> Option<f64> {
        if values.len() < min_quadrant_n.max(1) {
            None
        } else {
            coefficient_of_variation(values).ok()
        }
    };
    let cvs: Vec<Option<f64>> = bins.iter().map(cv).collect();
    Ok(LbvSummary {
        site_id: site_id.clone(),
        mean_speed,
        n_points: points.len(),
        cv_al: cvs[0],
        cv_ah: cvs[1],
        cv_dl: cvs[2],
        cv_dh: cvs[3],
        n_al: bins[0].len(),
        n_ah: bins[1].len(),
        n_dl: bins[2].len(),
        n_dh: bins[3].len(),
        sufficient: cvs.iter().all(Option::is_some),
    })
}

/// Groups matched points by site and computes every site in parallel.
/// Output is sorted by `site_id`.
pub fn compute_all(points: &[MatchedPoint], min_quadrant_n: usize) -> Result<Vec<LbvSummary>> {
    let mut by_site: BTreeMap<&str, Vec<MatchedPoint>> = BTreeMap::new();
    for p in points {
        by_site.entry(p.site_id.as_str()).or_default().push(p.clone());
    }
    by_site
        .into_par_iter()
        .map(|(_, pts)| compute_lbv(&pts, min_quadrant_n))
        .collect()
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

pub fn write_lbv(path: &Path, summaries: &[LbvSummary]) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    let io = |e| Error::io(path, e);
    writeln!(
        w,
        "site_id,mean_speed,n_points,cv_al,cv_ah,cv_dl,cv_dh,n_al,n_ah,n_dl,n_dh,sufficient"
    )
    .map_err(io)?;
    for s in summaries {
        writeln!(
            w,
            "{},{},{},{},{},{},{},{},{},{},{},{}",
            s.site_id,
            s.mean_speed,
            s.n_points,
            fmt_opt(s.cv_al),
            fmt_opt(s.cv_ah),
            fmt_opt(s.cv_dl),
            fmt_opt(s.cv_dh),
            s.n_al,
            s.n_ah,
            s.n_dl,
            s.n_dh,
            s.sufficient
        )
        .map_err(io)?;
    }
    w.flush().map_err(io)
}

pub fn read_lbv(path: &Path) -> Result<Vec<LbvSummary>> {
    let mut reader = open_delimited(path)?;
    reader
        .deserialize()
        .map(|r| r.map_err(|e| Error::csv(path, e)))
        .collect()
}

// ---------------------------------------------------------------------------
// Descriptive statistics table
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stratum {
    All,
    Signalized,
    Unsignalized,
}

impl Stratum {
    pub const ALL: [Stratum; 3] = [Stratum::All, Stratum::Signalized, Stratum::Unsignalized];

    pub fn contains(self, control: Control) -> bool {
        match self {
            Stratum::All => true,
            Stratum::Signalized => control == Control::Signalized,
            Stratum::Unsignalized => control == Control::Unsignalized,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Stratum::All => "all",
            Stratum::Signalized => "signalized",
            Stratum::Unsignalized => "unsignalized",
        }
    }
}

impl std::str::FromStr for Stratum {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "all" => Ok(Stratum::All),
            "signalized" => Ok(Stratum::Signalized),
            "unsignalized" => Ok(Stratum::Unsignalized),
            other => Err(Error::Config(format!("unknown stratum '{other}'"))),
        }
    }
}

/// Mean, sample SD, min and max of one variable in one stratum.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Descriptive {
    pub n: usize,
    pub mean: Option<f64>,
    pub sd: Option<f64>,
    pub min: Option<f64>,
    pub max: Option<f64>,
}

impl Descriptive {
    pub fn of(values: &[f64]) -> Descriptive {
        Descriptive {
            n: values.len(),
            mean: stats::mean(values),
            sd: stats::sample_sd(values),
            min: values.iter().copied().reduce(f64::min),
            max: values.iter().copied().reduce(f64::max),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub variable: String,
    /// indexed like [`Stratum::ALL`]
    pub strata: Vec<Descriptive>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryTable {
    pub site_counts: Vec<usize>,
    pub rows: Vec<SummaryRow>,
}

/// Variables of the descriptive table, in display order.
pub const SUMMARY_VARIABLES: [&str; 16] = [
    "crashes_5yr_total",
    "crashes_5yr_rearend",
    "cv_al",
    "cv_ah",
    "cv_dl",
    "cv_dh",
    "aadt_major",
    "aadt_minor",
    "ln_aadt_major",
    "ln_aadt_minor",
    "speed_limit_major",
    "speed_limit_minor",
    "four_legged",
    "through_lanes_total",
    "left_lanes_total",
    "right_lanes_total",
];

/// Looks up a site-level variable by name. CVs come from the volatility
/// summary, everything else from the inventory.
pub fn site_variable(name: &str, site: &IntersectionSite, lbv: Option<&LbvSummary>) -> Option<f64> {
    Some(match name {
        "crashes_5yr_total" => site.crashes_5yr_total as f64,
        "crashes_5yr_rearend" => site.crashes_5yr_rearend as f64,
        "cv_al" => return lbv?.cv_al,
        "cv_ah" => return lbv?.cv_ah,
        "cv_dl" => return lbv?.cv_dl,
        "cv_dh" => return lbv?.cv_dh,
        "mean_speed" => return lbv.map(|l| l.mean_speed),
        "aadt_major" => site.aadt_major,
        "aadt_minor" => site.aadt_minor,
        "ln_aadt_major" => site.aadt_major.ln(),
        "ln_aadt_minor" => site.aadt_minor.ln(),
        "speed_limit_major" => site.speed_limit_major,
        "speed_limit_minor" => site.speed_limit_minor,
        "legs" => site.legs as f64,
        "four_legged" => (site.legs == 4) as u8 as f64,
        "through_lanes_total" => site.through_lanes_total as f64,
        "left_lanes_total" => site.left_lanes_total as f64,
        "right_lanes_total" => site.right_lanes_total as f64,
        _ => return None,
    })
}

pub(crate) fn join_inventory<'a>(
    summaries: &'a [LbvSummary],
    sites: &'a [IntersectionSite],
) -> Result<Vec<(&'a IntersectionSite, &'a LbvSummary)>> {
    let index: BTreeMap<&str, &IntersectionSite> = sites.iter().map(|s| (s.site_id.as_str(), s)).collect();
    summaries
        .iter()
        .map(|l| {
            index
                .get(l.site_id.as_str())
                .map(|s| (*s, l))
                .ok_or_else(|| Error::Join(format!("site '{}' has volatility data but is not in the inventory", l.site_id)))
        })
        .collect()
}

/// Stratified descriptive statistics over the sites that have volatility
/// summaries. Undefined CVs are left out of their variable's statistics.
pub fn summarize_lbv(summaries: &[LbvSummary], sites: &[IntersectionSite]) -> Result<SummaryTable> {
    let joined = join_inventory(summaries, sites)?;
    let site_counts = Stratum::ALL
        .iter()
        .map(|st| joined.iter().filter(|(s, _)| st.contains(s.control)).count())
        .collect();
    let rows = SUMMARY_VARIABLES
        .iter()
        .map(|var| SummaryRow {
            variable: var.to_string(),
            strata: Stratum::ALL
                .iter()
                .map(|st| {
                    let values: Vec<f64> = joined
                        .iter()
                        .filter(|(s, _)| st.contains(s.control))
                        .filter_map(|(s, l)| site_variable(var, s, Some(l)))
                        .collect();
                    Descriptive::of(&values)
                })
                .collect(),
        })
        .collect();
    Ok(SummaryTable { site_counts, rows })
}

impl SummaryTable {
    /// Delimited rendering; undefined cells are empty.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("variable");
        for st in Stratum::ALL {
            for stat in ["n", "mean", "sd", "min", "max"] {
                out.push_str(&format!(",{}_{}", st.as_str(), stat));
            }
        }
        out.push('\n');
        for row in &self.rows {
            out.push_str(&row.variable);
            for d in &row.strata {
                out.push_str(&format!(
                    ",{},{},{},{},{}",
                    d.n,
                    fmt_opt(d.mean),
                    fmt_opt(d.sd),
                    fmt_opt(d.min),
                    fmt_opt(d.max)
                ));
            }
            out.push('\n');
        }
        out
    }

    /// Aligned text rendering; undefined cells print as `---`.
    pub fn to_text(&self) -> String {
        let cell = |v: Option<f64>| v.map(|x| format!("{x:.2}")).unwrap_or_else(|| "---".into());
        let mut out = format!("{:<22}", "Variable");
        for (st, n) in Stratum::ALL.iter().zip(&self.site_counts) {
            out.push_str(&format!("| {:<30}", format!("{} (N = {n})", st.as_str())));
        }
        out.push('\n');
        out.push_str(&format!("{:<22}", ""));
        for _ in Stratum::ALL {
            out.push_str(&format!("| {:>9} {:>9} {:>10}", "Mean", "SD", "Min/Max"));
        }
        out.push('\n');
        for row in &self.rows {
            out.push_str(&format!("{:<22}", row.variable));
            for d in &row.strata {
                let range = match (d.min, d.max) {
                    (Some(a), Some(b)) => format!("{}/{}", trim(a), trim(b)),
                    _ => "---".into(),
                };
                out.push_str(&format!("| {:>9} {:>9} {:>10}", cell(d.mean), cell(d.sd), range));
            }
            out.push('\n');
        }
        out
    }
}

fn trim(x: f64) -> String {
    if x.fract() == 0.0 {
        format!("{x:.0}")
    } else {
        format!("{x:.2}")
    }
}
