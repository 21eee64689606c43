//! Synthetic data with known ground truth: intersection inventories,
//! 10 Hz trajectories through a site, and crash counts from a
//! (random-parameter) Poisson generator.
//!
//! Every generator is a pure function of its seed. Independent streams
//! (sites, vehicles, observations) get their own seed from the master seed
//! via [`stream_seed`], so results do not depend on thread scheduling.

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Poisson, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geomatch::{Control, IntersectionSite, DEFAULT_RADIUS_M, EARTH_RADIUS_M};
use crate::ingest::BsmRecord;
use crate::stats::stream_seed;

/// Sampling interval of a 10 Hz message stream, seconds.
pub const DT: f64 = 0.1;
/// Acceleration magnitudes are floored here so no sample is zero.
pub const MIN_MAGNITUDE: f64 = 0.05;

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Mean and standard deviation of acceleration magnitudes, m/s².
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Regime {
    pub mean: f64,
    pub sd: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryProfile {
    /// m/s; speeds are kept between half and one and a half times this.
    pub mean_speed: f64,
    pub accel: Regime,
    pub decel: Regime,
    pub vehicles: usize,
    /// Records generated per vehicle, split over as many passes as needed.
    pub points_per_vehicle: usize,
    /// Radius of the site's matching circle, meters.
    #[serde(default = "default_radius")]
    pub radius_m: f64,
    pub seed: u64,
}

fn default_radius() -> f64 {
    DEFAULT_RADIUS_M
}

impl TrajectoryProfile {
    pub fn validate(&self) -> Result<()> {
        let ok = self.mean_speed > 0.0
            && self.mean_speed.is_finite()
            && [self.accel, self.decel].iter().all(|r| r.mean > 0.0 && r.sd >= 0.0 && r.sd.is_finite())
            && self.vehicles > 0
            && self.points_per_vehicle >= 3
            && self.radius_m > 0.0;
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!("invalid trajectory profile: {self:?}")))
        }
    }
}

/// CV in percent of `max(Y, floor)` with `Y ~ N(mean, sd)`.
pub fn floored_normal_cv(mean: f64, sd: f64, floor: f64) -> f64 {
    use statrs::distribution::{Continuous, ContinuousCDF, Normal as StdNormal};
    if sd == 0.0 {
        return 0.0;
    }
    let n = StdNormal::standard();
    let a = (floor - mean) / sd;
    let (cdf, pdf) = (n.cdf(a), n.pdf(a));
    let m1 = floor * cdf + mean * (1.0 - cdf) + sd * pdf;
    let m2 = floor * floor * cdf + (mean * mean + sd * sd) * (1.0 - cdf) + sd * (mean + floor) * pdf;
    100.0 * (m2 - m1 * m1).max(0.0).sqrt() / m1
}

fn magnitude(r: &mut ChaCha8Rng, regime: Regime) -> f64 {
    let y = if regime.sd > 0.0 {
        Normal::new(regime.mean, regime.sd).expect("validated").sample(r)
    } else {
        regime.mean
    };
    y.max(MIN_MAGNITUDE)
}

/// Offsets (east, north) in meters to latitude/longitude around a center.
fn offset(lat0: f64, lon0: f64, east: f64, north: f64) -> (f64, f64) {
    let lat = lat0 + (north / EARTH_RADIUS_M).to_degrees();
    let lon = lon0 + (east / (EARTH_RADIUS_M * lat0.to_radians().cos())).to_degrees();
    (lat, lon)
}

/// One vehicle's passes through the site.
fn vehicle_records(site: &IntersectionSite, p: &TrajectoryProfile, vehicle: usize) -> Vec<BsmRecord> {
    let mut r = rng(stream_seed(p.seed, vehicle as u64));
    let device = format!("{}-v{vehicle}", site.site_id);
    let mut out = Vec::with_capacity(p.points_per_vehicle);
    let (lo, hi) = (0.5 * p.mean_speed, 1.5 * p.mean_speed);
    let mut pass = 0usize;
    let mut clock = 0u64;
    while out.len() < p.points_per_vehicle {
        // straight chord through the circle, well inside the radius
        let heading: f64 = r.random_range(0.0..360.0);
        let lateral = r.random_range(-0.5..0.5) * p.radius_m;
        let half = ((0.9 * p.radius_m).powi(2) - lateral * lateral).sqrt();
        let (sin_h, cos_h) = heading.to_radians().sin_cos();
        let trip = format!("{device}-p{pass}");

        let mut s = -half;
        let mut speeds = vec![r.random_range(0.8..1.2) * p.mean_speed];
        let mut held = 0.0;
        let mut k = 0usize;
        while s <= half && out.len() < p.points_per_vehicle {
            // magnitude and sign are held over pairs of samples, which keeps
            // the even and odd leapfrog chains together
            if k.is_multiple_of(2) {
                let v = speeds[k];
                let accelerate = if v < lo {
                    true
                } else if v > hi {
                    false
                } else {
                    r.random_bool(0.5)
                };
                held = if accelerate {
                    magnitude(&mut r, p.accel)
                } else {
                    -magnitude(&mut r, p.decel)
                };
            }
            let next = if k == 0 {
                speeds[0] + DT * held
            } else {
                speeds[k - 1] + 2.0 * DT * held
            };
            speeds.push(next);

            let east = s * sin_h + lateral * cos_h;
            let north = s * cos_h - lateral * sin_h;
            let (lat, lon) = offset(site.center_lat, site.center_lon, east, north);
            out.push(BsmRecord {
                device_id: device.clone(),
                trip_id: trip.clone(),
                timestamp: clock as f64 * DT,
                latitude: lat,
                longitude: lon,
                speed: speeds[k],
                heading,
                accel_long: held,
                accel_lat: Some(0.0),
            });
            s += speeds[k] * DT;
            clock += 1;
            k += 1;
        }
        // gap between passes
        clock += 600;
        pass += 1;
    }
    out
}

/// Kinematically consistent 10 Hz records through `site`.
///
/// Speed follows the leapfrog rule `v[k+1] = v[k-1] + 2 dt a[k]`, so the
/// central-difference acceleration at every interior sample equals the
/// reported one. Positions move along straight chords that stay within
/// 0.9 of the radius, so every record matches the site. Vehicles are
/// generated in parallel from per-vehicle seeds.
pub fn generate_trajectories(site: &IntersectionSite, profile: &TrajectoryProfile) -> Result<Vec<BsmRecord>> {
    profile.validate()?;
    let per_vehicle: Vec<Vec<BsmRecord>> = (0..profile.vehicles)
        .into_par_iter()
        .map(|v| vehicle_records(site, profile, v))
        .collect();
    Ok(per_vehicle.into_iter().flatten().collect())
}

/// Site generator settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SiteProfile {
    pub n_sites: usize,
    pub center_lat: f64,
    pub center_lon: f64,
    /// Grid spacing between sites, meters.
    pub spacing_m: f64,
    pub signalized_fraction: f64,
    /// Crash rate `exp(b0 + b1 ln(aadt_major) + b2 ln(aadt_minor))`.
    pub crash_beta: [f64; 3],
    pub seed: u64,
}

impl Default for SiteProfile {
    fn default() -> Self {
        SiteProfile {
            n_sites: 20,
            center_lat: 42.28,
            center_lon: -83.74,
            spacing_m: 400.0,
            signalized_fraction: 0.45,
            // about 7.5 crashes in five years at typical volumes
            crash_beta: [-5.74, 0.6, 0.2],
            seed: 1,
        }
    }
}

/// Random intersections on a jittered grid with Poisson crash counts.
pub fn generate_sites(profile: &SiteProfile) -> Result<Vec<IntersectionSite>> {
    if profile.n_sites == 0 || !(profile.spacing_m > 4.0 * DEFAULT_RADIUS_M) {
        return Err(Error::Config(format!(
            "site profile needs n_sites > 0 and spacing_m > {}",
            4.0 * DEFAULT_RADIUS_M
        )));
    }
    let cols = (profile.n_sites as f64).sqrt().ceil() as usize;
    let width = (profile.n_sites.to_string()).len();
    (0..profile.n_sites)
        .map(|i| {
            let mut r = rng(stream_seed(profile.seed, i as u64));
            let jitter = 0.1 * profile.spacing_m;
            let east = (i % cols) as f64 * profile.spacing_m + r.random_range(-jitter..jitter);
            let north = (i / cols) as f64 * profile.spacing_m + r.random_range(-jitter..jitter);
            let (lat, lon) = offset(profile.center_lat, profile.center_lon, east, north);
            let signalized = r.random_bool(profile.signalized_fraction.clamp(0.0, 1.0));
            let z: f64 = StandardNormal.sample(&mut r);
            let aadt_major = (9.8 + 0.45 * z).exp().round().max(500.0);
            let z: f64 = StandardNormal.sample(&mut r);
            let aadt_minor = (9.0 + 0.45 * z).exp().round().clamp(100.0, aadt_major);
            let b = profile.crash_beta;
            let lambda = (b[0] + b[1] * aadt_major.ln() + b[2] * aadt_minor.ln()).exp();
            let crashes = poisson(&mut r, lambda);
            let rearend = (0..crashes).filter(|_| r.random_bool(0.4)).count() as u64;
            let limits = [25.0, 30.0, 35.0, 40.0, 45.0];
            let major = limits[r.random_range(0..limits.len())];
            let minor = limits[r.random_range(0..=limits.iter().position(|&l| l == major).unwrap())];
            let legs = if r.random_bool(if signalized { 0.6 } else { 0.25 }) { 4 } else { 3 };
            Ok(IntersectionSite {
                site_id: format!("S{:0width$}", i + 1),
                name: format!("Synthetic intersection {}", i + 1),
                center_lat: lat,
                center_lon: lon,
                control: if signalized {
                    Control::Signalized
                } else {
                    Control::Unsignalized
                },
                legs,
                aadt_major,
                aadt_minor,
                speed_limit_major: major,
                speed_limit_minor: minor,
                through_lanes_total: r.random_range(2..=6),
                left_lanes_total: r.random_range(0..=3),
                right_lanes_total: r.random_range(0..=2),
                crashes_5yr_total: crashes,
                crashes_5yr_rearend: rearend,
            })
        })
        .collect()
}

fn poisson(r: &mut ChaCha8Rng, lambda: f64) -> u64 {
    if !(lambda > 0.0) {
        return 0;
    }
    // far beyond any crash count; keeps the sampler in range
    Poisson::new(lambda.min(1e15)).map(|d| d.sample(r) as u64).unwrap_or(0)
}

/// Poisson counts with `lambda_i = exp(beta_i' x_i)`, where
/// `beta_i = beta + sigma * z_i` and `z_i` is standard normal per
/// observation and column. Zero `sigma` entries give fixed coefficients.
pub fn generate_counts(x: &DMatrix<f64>, beta: &[f64], sigma: &[f64], seed: u64) -> Result<Vec<u64>> {
    if beta.len() != x.ncols() || sigma.len() != x.ncols() {
        return Err(Error::Invalid(format!(
            "{} columns but {} coefficients and {} standard deviations",
            x.ncols(),
            beta.len(),
            sigma.len()
        )));
    }
    if sigma.iter().any(|s| !(*s >= 0.0)) {
        return Err(Error::Invalid("standard deviations must be non-negative".into()));
    }
    Ok((0..x.nrows())
        .into_par_iter()
        .map(|i| {
            let mut r = rng(stream_seed(seed, i as u64));
            let eta: f64 = (0..x.ncols())
                .map(|j| {
                    let z: f64 = if sigma[j] > 0.0 { StandardNormal.sample(&mut r) } else { 0.0 };
                    (beta[j] + sigma[j] * z) * x[(i, j)]
                })
                .sum();
            poisson(&mut r, eta.exp())
        })
        .collect())
}

/// Covariate distribution for synthetic count designs.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "dist", rename_all = "lowercase")]
pub enum Covariate {
    Normal { mean: f64, sd: f64 },
    Uniform { low: f64, high: f64 },
}

/// Design with a constant column followed by one column per covariate.
pub fn generate_design(n: usize, covariates: &[Covariate], seed: u64) -> Result<DMatrix<f64>> {
    let mut x = DMatrix::from_element(n, covariates.len() + 1, 1.0);
    for (j, c) in covariates.iter().enumerate() {
        let mut r = rng(stream_seed(seed, u64::MAX - j as u64));
        for i in 0..n {
            x[(i, j + 1)] = match *c {
                Covariate::Normal { mean, sd } => {
                    let z: f64 = StandardNormal.sample(&mut r);
                    mean + sd * z
                }
                Covariate::Uniform { low, high } if low < high => r.random_range(low..high),
                Covariate::Uniform { .. } => {
                    return Err(Error::Config("uniform covariate needs low < high".into()));
                }
            };
        }
    }
    Ok(x)
}
