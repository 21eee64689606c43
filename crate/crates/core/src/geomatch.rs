//! Intersection inventory and point-to-intersection matching.

use std::collections::{HashMap, HashSet};
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ingest::{open_delimited, BsmRecord};

pub const EARTH_RADIUS_M: f64 = 6_371_000.0;
/// 150 ft.
pub const DEFAULT_RADIUS_M: f64 = 45.72;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Control {
    Signalized,
    Unsignalized,
}

impl Control {
    pub fn as_str(self) -> &'static str {
        match self {
            Control::Signalized => "signalized",
            Control::Unsignalized => "unsignalized",
        }
    }
}

/// One row of the intersection inventory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IntersectionSite {
    pub site_id: String,
    pub name: String,
    pub center_lat: f64,
    pub center_lon: f64,
    pub control: Control,
    pub legs: u8,
    pub aadt_major: f64,
    pub aadt_minor: f64,
    /// mph
    pub speed_limit_major: f64,
    /// mph
    pub speed_limit_minor: f64,
    pub through_lanes_total: u32,
    pub left_lanes_total: u32,
    pub right_lanes_total: u32,
    pub crashes_5yr_total: u64,
    pub crashes_5yr_rearend: u64,
}

impl IntersectionSite {
    pub fn validate(&self) -> Result<()> {
        let fail = |rule: &str| {
            Err(Error::Inventory {
                site_id: self.site_id.clone(),
                rule: rule.to_string(),
            })
        };
        if self.site_id.trim().is_empty() {
            return fail("site_id must be non-empty");
        }
        if !(-90.0..=90.0).contains(&self.center_lat) || !(-180.0..=180.0).contains(&self.center_lon) {
            return fail("center coordinates out of range");
        }
        if !(self.aadt_minor > 0.0) {
            return fail("aadt_minor must be > 0");
        }
        if self.aadt_major < self.aadt_minor {
            return fail("aadt_major must be >= aadt_minor");
        }
        if self.crashes_5yr_rearend > self.crashes_5yr_total {
            return fail("crashes_5yr_rearend must be <= crashes_5yr_total");
        }
        if self.legs != 3 && self.legs != 4 {
            return fail("legs must be 3 or 4");
        }
        Ok(())
    }
}

/// Loads and validates an inventory file. Duplicate `site_id`s are fatal.
pub fn load_inventory(path: &Path) -> Result<Vec<IntersectionSite>> {
    let mut reader = open_delimited(path)?;
    let mut sites = Vec::new();
    let mut seen = HashSet::new();
    for row in reader.deserialize::<IntersectionSite>() {
        let site = row.map_err(|e| Error::csv(path, e))?;
        site.validate()?;
        if !seen.insert(site.site_id.clone()) {
            return Err(Error::Inventory {
                site_id: site.site_id,
                rule: "duplicate site_id".into(),
            });
        }
        sites.push(site);
    }
    if sites.is_empty() {
        log::warn!("inventory {} contains no sites", path.display());
    }
    Ok(sites)
}

pub fn write_inventory(path: &Path, sites: &[IntersectionSite]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::csv(path, e))?;
    for s in sites {
        w.serialize(s).map_err(|e| Error::csv(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Haversine distance in meters on a sphere of radius 6,371,000 m.
pub fn great_circle_distance(a: (f64, f64), b: (f64, f64)) -> f64 {
    let (lat1, lon1) = (a.0.to_radians(), a.1.to_radians());
    let (lat2, lon2) = (b.0.to_radians(), b.1.to_radians());
    let s_lat = ((lat2 - lat1) / 2.0).sin();
    let s_lon = ((lon2 - lon1) / 2.0).sin();
    let h = s_lat * s_lat + lat1.cos() * lat2.cos() * s_lon * s_lon;
    2.0 * EARTH_RADIUS_M * h.min(1.0).sqrt().asin()
}

/// A BSM point assigned to an intersection.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MatchedPoint {
    pub site_id: String,
    pub device_id: String,
    pub timestamp: f64,
    pub speed: f64,
    pub accel_long: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MatchOutcome {
    pub points: Vec<MatchedPoint>,
    pub unmatched: usize,
}

/// Uniform lat/lon grid over site centers.
///
/// A query inspects every cell overlapping the exact bounding box of the
/// spherical cap of the search radius around the point, so candidates are a
/// superset of the sites within the radius. Caps touching a pole or crossing
/// the antimeridian fall back to a full scan.
pub struct SiteIndex<'a> {
    sites: &'a [IntersectionSite],
    radius_m: f64,
    cell_deg: f64,
    cells: HashMap<(i64, i64), Vec<usize>>,
}

impl<'a> SiteIndex<'a> {
    pub fn new(sites: &'a [IntersectionSite], radius_m: f64) -> Self {
        let cell_deg = (radius_m / EARTH_RADIUS_M).to_degrees().max(1e-6) * 2.0;
        let mut cells: HashMap<(i64, i64), Vec<usize>> = HashMap::new();
        for (i, s) in sites.iter().enumerate() {
            let key = (
                (s.center_lat / cell_deg).floor() as i64,
                (s.center_lon / cell_deg).floor() as i64,
            );
            cells.entry(key).or_default().push(i);
        }
        SiteIndex {
            sites,
            radius_m,
            cell_deg,
            cells,
        }
    }

    fn candidates(&self, lat: f64, lon: f64, out: &mut Vec<usize>) -> bool {
        out.clear();
        let delta = self.radius_m / EARTH_RADIUS_M;
        let slack = 1.0 + 1e-9;
        let dlat = delta.to_degrees() * slack + 1e-12;
        if lat.abs() + dlat >= 90.0 {
            return false;
        }
        let ratio = delta.sin() / lat.to_radians().cos();
        if ratio >= 1.0 {
            return false;
        }
        let dlon = ratio.asin().to_degrees() * slack + 1e-12;
        if lon - dlon < -180.0 || lon + dlon > 180.0 {
            return false;
        }
        let span = |lo: f64, hi: f64| {
            ((lo / self.cell_deg).floor() as i64)..=((hi / self.cell_deg).floor() as i64)
        };
        let lon_cells = span(lon - dlon, lon + dlon);
        if lon_cells.end() - lon_cells.start() > 4096 {
            return false;
        }
        for i in span(lat - dlat, lat + dlat) {
            for j in lon_cells.clone() {
                if let Some(ids) = self.cells.get(&(i, j)) {
                    out.extend_from_slice(ids);
                }
            }
        }
        true
    }

    /// Nearest site within the radius; equal distances go to the
    /// lexicographically smallest `site_id`.
    pub fn nearest(&self, lat: f64, lon: f64) -> Option<&'a IntersectionSite> {
        let mut buf = Vec::new();
        let pool: Box<dyn Iterator<Item = usize>> = if self.candidates(lat, lon, &mut buf) {
            Box::new(buf.iter().copied())
        } else {
            Box::new(0..self.sites.len())
        };
        let mut best: Option<(f64, &IntersectionSite)> = None;
        for i in pool {
            let site = &self.sites[i];
            let d = great_circle_distance((lat, lon), (site.center_lat, site.center_lon));
            if d > self.radius_m {
                continue;
            }
            best = match best {
                Some((bd, bs)) if bd < d || (bd == d && bs.site_id <= site.site_id) => Some((bd, bs)),
                _ => Some((d, site)),
            };
        }
        best.map(|(_, s)| s)
    }
}

/// Assigns each record to at most one site within `radius_m`.
///
/// Output follows input order; unmatched records are only counted.
pub fn match_points(records: &[BsmRecord], sites: &[IntersectionSite], radius_m: f64) -> Result<MatchOutcome> {
    if !(radius_m > 0.0) {
        return Err(Error::Invalid(format!("match radius must be > 0, got {radius_m}")));
    }
    let index = SiteIndex::new(sites, radius_m);
    let assigned: Vec<Option<MatchedPoint>> = records
        .par_iter()
        .map(|r| {
            index.nearest(r.latitude, r.longitude).map(|site| MatchedPoint {
                site_id: site.site_id.clone(),
                device_id: r.device_id.clone(),
                timestamp: r.timestamp,
                speed: r.speed,
                accel_long: r.accel_long,
            })
        })
        .collect();
    let unmatched = assigned.iter().filter(|p| p.is_none()).count();
    Ok(MatchOutcome {
        points: assigned.into_iter().flatten().collect(),
        unmatched,
    })
}

pub fn write_matched(path: &Path, points: &[MatchedPoint]) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    let io = |e| Error::io(path, e);
    writeln!(w, "site_id,device_id,timestamp,speed,accel_long").map_err(io)?;
    for p in points {
        writeln!(w, "{},{},{},{},{}", p.site_id, p.device_id, p.timestamp, p.speed, p.accel_long).map_err(io)?;
    }
    w.flush().map_err(io)
}

pub fn read_matched(path: &Path) -> Result<Vec<MatchedPoint>> {
    let mut reader = open_delimited(path)?;
    reader
        .deserialize()
        .map(|r| r.map_err(|e| Error::csv(path, e)))
        .collect()
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;

    pub(crate) fn site(id: &str, lat: f64, lon: f64) -> IntersectionSite {
        IntersectionSite {
            site_id: id.into(),
            name: format!("Site {id}"),
            center_lat: lat,
            center_lon: lon,
            control: Control::Signalized,
            legs: 4,
            aadt_major: 20000.0,
            aadt_minor: 9000.0,
            speed_limit_major: 35.0,
            speed_limit_minor: 30.0,
            through_lanes_total: 4,
            left_lanes_total: 2,
            right_lanes_total: 1,
            crashes_5yr_total: 8,
            crashes_5yr_rearend: 4,
        }
    }

    fn point(lat: f64, lon: f64) -> BsmRecord {
        BsmRecord {
            device_id: "d".into(),
            trip_id: "t".into(),
            timestamp: 0.0,
            latitude: lat,
            longitude: lon,
            speed: 5.0,
            heading: 0.0,
            accel_long: 0.5,
            accel_lat: None,
        }
    }

    // meters north of (lat, lon) along a meridian, inverted analytically
    fn north(lat: f64, meters: f64) -> f64 {
        lat + (meters / EARTH_RADIUS_M).to_degrees()
    }

    #[test]
    fn distance_identity_and_symmetry() {
        let a = (42.28, -83.74);
        let b = (42.2804049, -83.7400);
        assert_eq!(great_circle_distance(a, a), 0.0);
        assert_eq!(great_circle_distance(a, b), great_circle_distance(b, a));
    }

    #[test]
    fn distance_forty_five_meters() {
        // along a meridian the haversine reduces to R * dlat (radians)
        let expected = EARTH_RADIUS_M * (0.000_404_9f64).to_radians();
        let d = great_circle_distance((42.28, -83.74), (42.2804049, -83.74));
        assert!((d - expected).abs() < 1e-6);
        assert!((d - 45.0).abs() < 0.1, "{d}");
    }

    #[test]
    fn point_at_center_matches() {
        let sites = vec![site("A", 42.28, -83.74)];
        let out = match_points(&[point(42.28, -83.74)], &sites, DEFAULT_RADIUS_M).unwrap();
        assert_eq!(out.points.len(), 1);
        assert_eq!(out.points[0].site_id, "A");
    }

    #[test]
    fn fifty_meters_is_outside_default_radius() {
        let sites = vec![site("A", 42.28, -83.74)];
        let p45 = point(north(42.28, 45.0), -83.74);
        let p50 = point(north(42.28, 50.0), -83.74);
        let out = match_points(&[p45, p50], &sites, DEFAULT_RADIUS_M).unwrap();
        assert_eq!(out.points.len(), 1);
        assert_eq!(out.unmatched, 1);
    }

    #[test]
    fn nearest_of_two_overlapping_centers() {
        let a = site("A", 42.28, -83.74);
        let b = site("B", north(42.28, 60.0), -83.74);
        let p = point(north(42.28, 20.0), -83.74);
        let out = match_points(&[p], &[b, a], DEFAULT_RADIUS_M).unwrap();
        assert_eq!(out.points[0].site_id, "A");
    }

    #[test]
    fn equidistant_tie_goes_to_smaller_id() {
        let a = site("Z", north(42.28, -20.0), -83.74);
        let b = site("M", north(42.28, 20.0), -83.74);
        let c = site("K", a.center_lat, a.center_lon);
        let p = point(a.center_lat, a.center_lon);
        let out = match_points(&[p], &[a, b, c], DEFAULT_RADIUS_M).unwrap();
        assert_eq!(out.points[0].site_id, "K");
    }

    #[test]
    fn antimeridian_and_pole_fall_back_to_scan() {
        let sites = vec![site("E", 10.0, 179.9999), site("P", 89.99999, 0.0)];
        let out = match_points(
            &[point(10.0, -179.99995), point(89.99999, 120.0)],
            &sites,
            DEFAULT_RADIUS_M,
        )
        .unwrap();
        // (10, 179.9999) to (10, -179.99995) is ~16 m across the antimeridian
        assert_eq!(out.points.len(), 2);
        assert_eq!(out.points[0].site_id, "E");
        assert_eq!(out.points[1].site_id, "P");
    }

    #[test]
    fn bad_radius_rejected() {
        assert!(match_points(&[], &[], 0.0).is_err());
    }

    fn inventory_file(rows: &[&str]) -> tempfile::NamedTempFile {
        let mut f = tempfile::NamedTempFile::new().unwrap();
        writeln!(
            f,
            "site_id,name,center_lat,center_lon,control,legs,aadt_major,aadt_minor,speed_limit_major,speed_limit_minor,through_lanes_total,left_lanes_total,right_lanes_total,crashes_5yr_total,crashes_5yr_rearend"
        )
        .unwrap();
        for r in rows {
            writeln!(f, "{r}").unwrap();
        }
        f
    }

    #[test]
    fn inventory_loads() {
        let f = inventory_file(&[
            "S1,Main & 1st,42.28,-83.74,signalized,4,20000,9000,35,30,4,2,1,8,4",
            "S2,\"Elm, Oak\",42.29,-83.75,unsignalized,3,9000,9000,30,25,3,0,1,0,0",
        ]);
        let sites = load_inventory(f.path()).unwrap();
        assert_eq!(sites.len(), 2);
        assert_eq!(sites[1].name, "Elm, Oak");
        assert_eq!(sites[1].control, Control::Unsignalized);
    }

    #[test]
    fn rearend_above_total_is_fatal() {
        let f = inventory_file(&["S9,x,42.28,-83.74,signalized,4,20000,9000,35,30,4,2,1,5,9"]);
        match load_inventory(f.path()).unwrap_err() {
            Error::Inventory { site_id, rule } => {
                assert_eq!(site_id, "S9");
                assert!(rule.contains("rearend"));
            }
            other => panic!("unexpected {other}"),
        }
    }

    #[test]
    fn duplicate_and_bad_legs_are_fatal() {
        let f = inventory_file(&[
            "S1,x,42.28,-83.74,signalized,4,20000,9000,35,30,4,2,1,5,1",
            "S1,y,42.28,-83.74,signalized,4,20000,9000,35,30,4,2,1,5,1",
        ]);
        assert!(load_inventory(f.path()).unwrap_err().to_string().contains("duplicate"));
        let f = inventory_file(&["S1,x,42.28,-83.74,signalized,5,20000,9000,35,30,4,2,1,5,1"]);
        assert!(load_inventory(f.path()).unwrap_err().to_string().contains("legs"));
        let f = inventory_file(&["S1,x,42.28,-83.74,signalized,4,2000,9000,35,30,4,2,1,5,1"]);
        assert!(load_inventory(f.path()).unwrap_err().to_string().contains("aadt_major"));
    }

    #[test]
    fn empty_inventory_is_empty() {
        let f = tempfile::NamedTempFile::new().unwrap();
        assert!(load_inventory(f.path()).unwrap().is_empty());
        let f = inventory_file(&[]);
        assert!(load_inventory(f.path()).unwrap().is_empty());
    }
}
