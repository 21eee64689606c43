//! Acceptance suite. Each test prints one `criterion N ... PASS|FAIL` line.

use std::collections::BTreeMap;
use std::io::Write as _;
use std::panic::{catch_unwind, resume_unwind, AssertUnwindSafe};
use std::path::Path;
use std::time::Instant;

use lbv_core::countmodel::{
    fit_poisson, lagrange_multiplier_test, mcfadden_rho2, poisson_loglik, poisson_score, DesignMatrix, FitOptions,
    LmDecision, Transform, LM_CRITICAL,
};
use lbv_core::geomatch::{match_points, Control, IntersectionSite, MatchedPoint, DEFAULT_RADIUS_M};
use lbv_core::hotspot::{rank_sites, Flag, Thresholds, EQUAL_WEIGHTS};
use lbv_core::ingest::{self, BsmRecord, Schema};
use lbv_core::pipeline::{run_pipeline, run_with_config, PipelineConfig};
use lbv_core::randparam::{fit_random_poisson, halton_sequence, RandomParamSpec};
use lbv_core::synth::{self, Regime, TrajectoryProfile};
use lbv_core::volatility::{coefficient_of_variation, compute_lbv, LbvSummary, Quadrant};
use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Gamma, Poisson, StandardNormal};

fn criterion(n: u32, name: &str, body: impl FnOnce()) {
    let start = Instant::now();
    let outcome = catch_unwind(AssertUnwindSafe(body));
    let verdict = if outcome.is_ok() { "PASS" } else { "FAIL" };
    let _ = writeln!(
        std::io::stderr(),
        "criterion {n:>2} {name:<42} {verdict} ({:.2} s)",
        start.elapsed().as_secs_f64()
    );
    if let Err(panic) = outcome {
        resume_unwind(panic);
    }
}

fn ids(n: usize) -> Vec<String> {
    (0..n).map(|i| format!("o{i:04}")).collect()
}

fn design_from(x: &DMatrix<f64>, y: Vec<u64>) -> DesignMatrix {
    let raw: Vec<Vec<f64>> = (0..x.nrows()).map(|i| (1..x.ncols()).map(|j| x[(i, j)]).collect()).collect();
    let cols: Vec<(String, Transform)> = (1..x.ncols()).map(|j| (format!("x{j}"), Transform::Identity)).collect();
    DesignMatrix::from_raw(ids(x.nrows()), y, &cols, &raw).unwrap()
}

fn normal_design(n: usize, k: usize, sd: f64, rng: &mut ChaCha8Rng) -> DMatrix<f64> {
    DMatrix::from_fn(n, k + 1, |_, j| {
        if j == 0 {
            1.0
        } else {
            let z: f64 = StandardNormal.sample(rng);
            sd * z
        }
    })
}

fn poisson_draw(rng: &mut ChaCha8Rng, lambda: f64) -> u64 {
    Poisson::new(lambda).unwrap().sample(rng) as u64
}

fn linear(x: &DMatrix<f64>, i: usize, beta: &[f64]) -> f64 {
    (0..x.ncols()).map(|j| x[(i, j)] * beta[j]).sum()
}

// ---------------------------------------------------------------------------

#[test]
fn c01_mcfadden_rho2() {
    criterion(1, "McFadden rho2 consistency", || {
        let all = mcfadden_rho2(-578.31, -336.72).unwrap();
        assert!((all - 0.418).abs() <= 0.002, "{all}");
        let sig = mcfadden_rho2(-226.73, -159.43).unwrap();
        assert!((sig - 0.297).abs() <= 0.003, "{sig}");
    });
}

#[test]
fn c02_lm_hand_case() {
    criterion(2, "LM statistic hand case", || {
        let t = lagrange_multiplier_test(&[1, 2], &[1.0, 2.0], LM_CRITICAL).unwrap();
        assert_eq!(t.statistic, 0.9);
        assert_eq!(t.decision, LmDecision::PoissonOk);
    });
}

#[test]
fn c03_lm_calibration() {
    criterion(3, "LM calibration (Poisson vs NB alpha=1)", || {
        let beta = [1.0, 0.3];
        let mut poisson_rejects = 0;
        let mut nb_rejects = 0;
        for rep in 0..50u64 {
            let mut rng = ChaCha8Rng::seed_from_u64(1000 + rep);
            let x = normal_design(1000, 1, 0.5, &mut rng);
            let lambda: Vec<f64> = (0..1000).map(|i| linear(&x, i, &beta).exp()).collect();

            let y: Vec<u64> = lambda.iter().map(|&l| poisson_draw(&mut rng, l)).collect();
            let fit = fit_poisson(&design_from(&x, y), &FitOptions::default()).unwrap();
            if fit.lm.unwrap().decision == LmDecision::Overdispersed {
                poisson_rejects += 1;
            }

            // NB2 as a gamma mixture: mean lambda, variance lambda + alpha lambda^2
            let gamma = Gamma::new(1.0, 1.0).unwrap();
            let y: Vec<u64> = lambda
                .iter()
                .map(|&l| {
                    let mix = gamma.sample(&mut rng);
                    poisson_draw(&mut rng, l * mix)
                })
                .collect();
            let fit = fit_poisson(&design_from(&x, y), &FitOptions::default()).unwrap();
            if fit.lm.unwrap().decision == LmDecision::Overdispersed {
                nb_rejects += 1;
            }
        }
        assert!(poisson_rejects <= 5, "equidispersed rejections {poisson_rejects}/50");
        assert!(nb_rejects >= 45, "overdispersed rejections {nb_rejects}/50");
    });
}

/// Maximizes by repeated grid refinement over [-2, 2]^p, independent of the
/// Newton solver.
fn grid_search(x: &DMatrix<f64>, y: &[u64]) -> Vec<f64> {
    let p = x.ncols();
    let ll = |b: &[f64]| -> f64 {
        (0..x.nrows())
            .map(|i| {
                let eta = linear(x, i, b);
                y[i] as f64 * eta - eta.exp()
            })
            .sum()
    };
    let mut center = vec![0.0; p];
    let mut half = 2.0;
    let steps = 20i64;
    while half > 1e-7 {
        let h = half / steps as f64;
        let mut best = (f64::NEG_INFINITY, center.clone());
        let total = (2 * steps + 1).pow(p as u32);
        for idx in 0..total {
            let mut rem = idx;
            let cand: Vec<f64> = (0..p)
                .map(|j| {
                    let k = rem % (2 * steps + 1) - steps;
                    rem /= 2 * steps + 1;
                    (center[j] + k as f64 * h).clamp(-2.0, 2.0)
                })
                .collect();
            let v = ll(&cand);
            if v > best.0 {
                best = (v, cand);
            }
        }
        center = best.1;
        half = 3.0 * h;
    }
    center
}

#[test]
fn c04_poisson_mle() {
    criterion(4, "Poisson MLE oracles", || {
        // intercept only
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let y: Vec<u64> = (0..200).map(|_| poisson_draw(&mut rng, 3.7)).collect();
        let ybar = y.iter().sum::<u64>() as f64 / y.len() as f64;
        let d = DesignMatrix::from_raw(ids(200), y, &[], &vec![vec![]; 200]).unwrap();
        let fit = fit_poisson(&d, &FitOptions::default()).unwrap();
        assert!((fit.coefficients[0].estimate - ybar.ln()).abs() < 1e-10);

        // two covariates against the grid-search maximizer
        let beta = [0.5, 0.3, -0.4];
        let x = normal_design(50, 2, 1.0, &mut rng);
        let y: Vec<u64> = (0..50).map(|i| poisson_draw(&mut rng, linear(&x, i, &beta).exp())).collect();
        let d = design_from(&x, y.clone());
        let fit = fit_poisson(&d, &FitOptions::default()).unwrap();
        let oracle = grid_search(&x, &y);
        for (c, o) in fit.coefficients.iter().zip(&oracle) {
            assert!((c.estimate - o).abs() < 1e-4, "{} vs grid {o}", c.estimate);
        }
        assert!(poisson_score(&d, &fit.estimates()).iter().all(|s| s.abs() < 1e-8));

        // analytic score against central differences of the log-likelihood
        for _ in 0..10 {
            let b: Vec<f64> = (0..3).map(|_| rng.random_range(-1.0..1.0)).collect();
            let g = poisson_score(&d, &b);
            for j in 0..3 {
                let h = 1e-5;
                let mut up = b.clone();
                up[j] += h;
                let mut down = b.clone();
                down[j] -= h;
                let fd = (poisson_loglik(&d, &up) - poisson_loglik(&d, &down)) / (2.0 * h);
                assert!((g[j] - fd).abs() <= 1e-6 * g[j].abs().max(1.0), "{} vs {fd}", g[j]);
            }
        }
    });
}

fn random_coefficient_data(seed: u64, sigma: f64) -> DesignMatrix {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = 1000;
    let x = DMatrix::from_fn(n, 2, |_, j| if j == 0 { 1.0 } else { rng.random_range(0.0..2.0) });
    let y = synth::generate_counts(&x, &[1.0, 0.5], &[0.0, sigma], seed ^ 0x5eed).unwrap();
    design_from(&x, y)
}

#[test]
fn c05_random_parameter_recovery() {
    criterion(5, "Random-parameter MSL recovery", || {
        let opts = FitOptions::default();
        for seed in 1..=5u64 {
            let d = random_coefficient_data(seed, 0.2);
            let spec = RandomParamSpec::new(vec!["x1".into()], 200, 10, seed);
            let fit = fit_random_poisson(&d, &spec, &opts).unwrap();
            let mean = fit.base.coefficient("x1").unwrap().estimate;
            let sd = fit.sd("x1").unwrap().estimate;
            let _ = writeln!(std::io::stderr(), "    seed {seed}: mean {mean:.4} sd {sd:.4}");
            assert!((mean - 0.5).abs() <= 0.1, "seed {seed}: mean {mean}");
            assert!((sd - 0.2).abs() <= 0.1, "seed {seed}: sd {sd}");
        }

        let mut insignificant = 0;
        for seed in 100..120u64 {
            let d = random_coefficient_data(seed, 0.0);
            let spec = RandomParamSpec::new(vec!["x1".into()], 200, 10, seed);
            let fit = fit_random_poisson(&d, &spec, &opts).unwrap();
            let t = fit.sd("x1").unwrap().t_stat;
            if t.is_none_or(|t| t.abs() < 1.96) {
                insignificant += 1;
            }
        }
        assert!(insignificant >= 16, "insignificant sigma in {insignificant}/20");

        let d = random_coefficient_data(7, 0.0);
        let spec = RandomParamSpec::new(vec![], 200, 10, 7);
        let msl = fit_random_poisson(&d, &spec, &opts).unwrap();
        let mle = fit_poisson(&d, &opts).unwrap();
        for (a, b) in msl.base.coefficients.iter().zip(&mle.coefficients) {
            assert!((a.estimate - b.estimate).abs() < 1e-6);
        }
    });
}

#[test]
fn c06_halton_golden() {
    criterion(6, "Halton golden values", || {
        assert_eq!(halton_sequence(2, 0, 4), vec![0.5, 0.25, 0.75, 0.125]);
        assert_eq!(halton_sequence(3, 0, 3), vec![1.0 / 3.0, 2.0 / 3.0, 1.0 / 9.0]);
    });
}

/// Independent recomputation of the four quadrant CVs.
fn brute_force_cvs(points: &[MatchedPoint], min_n: usize) -> [Option<f64>; 4] {
    let n = points.len() as f64;
    let mean_speed = points.iter().map(|p| p.speed).sum::<f64>() / n;
    let mut out = [None; 4];
    for (q, slot) in out.iter_mut().enumerate() {
        let vals: Vec<f64> = points
            .iter()
            .filter(|p| {
                let low = p.speed <= mean_speed;
                match q {
                    0 => p.accel_long > 0.0 && low,
                    1 => p.accel_long > 0.0 && !low,
                    2 => p.accel_long < 0.0 && low,
                    _ => p.accel_long < 0.0 && !low,
                }
            })
            .map(|p| p.accel_long.abs())
            .collect();
        if vals.len() >= min_n {
            let m = vals.iter().sum::<f64>() / vals.len() as f64;
            let ss = vals.iter().map(|v| (v - m).powi(2)).sum::<f64>();
            *slot = Some(100.0 * (ss / (vals.len() - 1) as f64).sqrt() / m);
        }
    }
    out
}

fn close(a: Option<f64>, b: Option<f64>, rel: f64) -> bool {
    match (a, b) {
        (None, None) => true,
        (Some(a), Some(b)) => (a - b).abs() <= rel * a.abs().max(b.abs()).max(1e-300),
        _ => false,
    }
}

#[test]
fn c07_cv_oracle() {
    criterion(7, "CV oracle equivalence", || {
        assert_eq!(coefficient_of_variation(&[0.5, 1.0, 1.5]), Ok(50.0));
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for site in 0..1000 {
            let n = rng.random_range(20..400);
            let mean_speed = rng.random_range(3.0..20.0);
            let points: Vec<MatchedPoint> = (0..n)
                .map(|_| {
                    let accel = match rng.random_range(0..10) {
                        0 => 0.0,
                        _ => rng.random_range(-4.0..4.0),
                    };
                    MatchedPoint {
                        site_id: format!("S{site}"),
                        device_id: "d".into(),
                        timestamp: 0.0,
                        speed: mean_speed * rng.random_range(0.2..1.8),
                        accel_long: accel,
                    }
                })
                .collect();
            let got = compute_lbv(&points, 30).unwrap();
            let want = brute_force_cvs(&points, 30);
            for (q, w) in Quadrant::ALL.iter().zip(want) {
                assert!(close(got.cv(*q), w, 1e-12), "site {site} {q:?}: {:?} vs {w:?}", got.cv(*q));
            }
            let scaled: Vec<MatchedPoint> = points
                .iter()
                .map(|p| MatchedPoint {
                    accel_long: p.accel_long * 7.3,
                    ..p.clone()
                })
                .collect();
            let s = compute_lbv(&scaled, 30).unwrap();
            for q in Quadrant::ALL {
                assert!(close(got.cv(q), s.cv(q), 1e-12), "scale invariance at site {site}");
            }
        }
    });
}

fn haversine(a: (f64, f64), b: (f64, f64)) -> f64 {
    let r = 6_371_000.0;
    let (p1, p2) = (a.0.to_radians(), b.0.to_radians());
    let dp = p2 - p1;
    let dl = (b.1 - a.1).to_radians();
    let h = (dp / 2.0).sin().powi(2) + p1.cos() * p2.cos() * (dl / 2.0).sin().powi(2);
    2.0 * r * h.sqrt().min(1.0).asin()
}

fn site_at(id: &str, lat: f64, lon: f64) -> IntersectionSite {
    IntersectionSite {
        site_id: id.into(),
        name: id.into(),
        center_lat: lat,
        center_lon: lon,
        control: Control::Signalized,
        legs: 4,
        aadt_major: 20000.0,
        aadt_minor: 8000.0,
        speed_limit_major: 35.0,
        speed_limit_minor: 30.0,
        through_lanes_total: 4,
        left_lanes_total: 2,
        right_lanes_total: 1,
        crashes_5yr_total: 5,
        crashes_5yr_rearend: 2,
    }
}

fn record_at(i: usize, lat: f64, lon: f64) -> BsmRecord {
    BsmRecord {
        device_id: format!("d{i}"),
        trip_id: format!("t{i}"),
        timestamp: i as f64,
        latitude: lat,
        longitude: lon,
        speed: 10.0,
        heading: 0.0,
        accel_long: 1.0,
        accel_lat: None,
    }
}

#[test]
fn c08_geomatch_oracle() {
    criterion(8, "Geomatch oracle equivalence", || {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let (lat0, lon0) = (42.25, -83.75);
        let sites: Vec<IntersectionSite> = (0..200)
            .map(|i| site_at(&format!("S{i:03}"), lat0 + rng.random_range(0.0..0.05), lon0 + rng.random_range(0.0..0.05)))
            .collect();
        let records: Vec<BsmRecord> = (0..100_000)
            .map(|i| {
                if i % 2 == 0 {
                    let s = &sites[rng.random_range(0..sites.len())];
                    let d = 0.0007;
                    record_at(
                        i,
                        s.center_lat + rng.random_range(-d..d),
                        s.center_lon + rng.random_range(-d..d),
                    )
                } else {
                    record_at(i, lat0 + rng.random_range(0.0..0.05), lon0 + rng.random_range(0.0..0.05))
                }
            })
            .collect();
        let got = match_points(&records, &sites, DEFAULT_RADIUS_M).unwrap();

        let mut want: Vec<(usize, &str)> = Vec::new();
        for (i, r) in records.iter().enumerate() {
            let mut best: Option<(f64, &str)> = None;
            for s in &sites {
                let d = haversine((r.latitude, r.longitude), (s.center_lat, s.center_lon));
                if d <= DEFAULT_RADIUS_M {
                    let better = match best {
                        None => true,
                        Some((bd, bid)) => d < bd || (d == bd && s.site_id.as_str() < bid),
                    };
                    if better {
                        best = Some((d, &s.site_id));
                    }
                }
            }
            if let Some((_, id)) = best {
                want.push((i, id));
            }
        }
        assert!(want.len() > 10_000, "too few matches to be a meaningful test");
        let mut got_pairs: Vec<(String, f64)> = got.points.iter().map(|p| (p.site_id.clone(), p.timestamp)).collect();
        let mut want_pairs: Vec<(String, f64)> = want.iter().map(|(i, id)| (id.to_string(), *i as f64)).collect();
        got_pairs.sort_by(|a, b| a.1.total_cmp(&b.1));
        want_pairs.sort_by(|a, b| a.1.total_cmp(&b.1));
        assert_eq!(got_pairs, want_pairs);
        assert_eq!(got.unmatched as usize, records.len() - want.len());

        // 45 m and 50 m north of a lone center
        let lone = [site_at("A", 42.0, -83.0)];
        let north = |m: f64| 42.0 + (m / 6_371_000.0f64).to_degrees();
        let pts = [record_at(0, north(45.0), -83.0), record_at(1, north(50.0), -83.0)];
        let out = match_points(&pts, &lone, DEFAULT_RADIUS_M).unwrap();
        assert_eq!(out.points.len(), 1);
        assert_eq!(out.points[0].timestamp, 0.0);
    });
}

#[test]
fn c09_volatility_recovery() {
    criterion(9, "End-to-end volatility recovery", || {
        let site = site_at("V1", 42.28, -83.74);
        let profile = TrajectoryProfile {
            mean_speed: 10.0,
            accel: Regime { mean: 1.0, sd: 0.5 },
            decel: Regime { mean: 1.0, sd: 0.5 },
            vehicles: 100,
            points_per_vehicle: 560,
            radius_m: DEFAULT_RADIUS_M,
            seed: 9,
        };
        let records = synth::generate_trajectories(&site, &profile).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bsm.csv");
        ingest::write_records(&path, &records).unwrap();
        let (parsed, audit) = ingest::parse_bsm_file(&path, &Schema::default()).unwrap();
        assert_eq!(audit.total_rejected(), 0);
        for trip in parsed.chunk_by(|a, b| a.trip_id == b.trip_id) {
            assert!(ingest::check_accel_consistency(trip, 0.1).is_empty());
        }
        let matched = match_points(&parsed, std::slice::from_ref(&site), DEFAULT_RADIUS_M).unwrap();
        assert_eq!(matched.points.len(), parsed.len());
        let lbv = compute_lbv(&matched.points, 30).unwrap();
        let target = synth::floored_normal_cv(1.0, 0.5, synth::MIN_MAGNITUDE);
        for q in Quadrant::ALL {
            let cv = lbv.cv(q).unwrap();
            let _ = writeln!(
                std::io::stderr(),
                "    {}: n = {}, cv = {cv:.2} (floored-normal target {target:.2})",
                q.label(),
                lbv.count(q)
            );
            assert!(lbv.count(q) >= 10_000, "{q:?} has {} points", lbv.count(q));
            assert!((cv - 50.0).abs() <= 3.0, "{q:?}: {cv}");
        }
    });
}

fn write_pipeline_inputs(dir: &Path) {
    let sites = synth::generate_sites(&synth::SiteProfile {
        n_sites: 20,
        seed: 10,
        ..Default::default()
    })
    .unwrap();
    lbv_core::geomatch::write_inventory(&dir.join("sites.csv"), &sites).unwrap();
    let mut records = Vec::new();
    for (i, s) in sites.iter().enumerate() {
        let spread = 0.3 + 0.05 * i as f64;
        let profile = TrajectoryProfile {
            mean_speed: 8.0 + (i % 5) as f64,
            accel: Regime { mean: 1.0, sd: spread },
            decel: Regime { mean: 1.2, sd: 1.2 * spread },
            vehicles: 50,
            points_per_vehicle: 200,
            radius_m: DEFAULT_RADIUS_M,
            seed: 1000 + i as u64,
        };
        records.extend(synth::generate_trajectories(s, &profile).unwrap());
    }
    let (a, b) = records.split_at(records.len() / 2);
    ingest::write_records(&dir.join("bsm_a.csv"), a).unwrap();
    ingest::write_records(&dir.join("bsm_b.csv"), b).unwrap();
    std::fs::write(
        dir.join("models.toml"),
        r#"
[[model]]
name = "all_auto"
response = "crashes_5yr_total"
covariates = ["aadt_major", "cv_dl"]
transforms = { aadt_major = "log" }
family = "auto"

[[model]]
name = "all_random"
response = "crashes_5yr_total"
covariates = ["aadt_major"]
transforms = { aadt_major = "log" }
family = "random-poisson"
random_columns = ["aadt_major"]
draws = 100
"#,
    )
    .unwrap();
}

fn pipeline_config(threads: usize) -> String {
    format!(
        r#"
seed = 2024
threads = {threads}

[ingest]
inputs = ["bsm_*.csv"]

[match]
inventory = "sites.csv"

[fit]
specs = "models.toml"

[rank]
residual_model = "all_auto"
"#
    )
}

fn read_tree(dir: &Path) -> BTreeMap<String, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for entry in std::fs::read_dir(&d).unwrap() {
            let p = entry.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                let rel = p.strip_prefix(dir).unwrap().to_string_lossy().into_owned();
                out.insert(rel, std::fs::read(&p).unwrap());
            }
        }
    }
    out
}

#[test]
fn c10_pipeline_determinism() {
    criterion(10, "Pipeline determinism", || {
        let dir = tempfile::tempdir().unwrap();
        write_pipeline_inputs(dir.path());
        let cfg_path = dir.path().join("run.toml");
        std::fs::write(&cfg_path, pipeline_config(2)).unwrap();
        let (cfg, bytes) = PipelineConfig::load(&cfg_path).unwrap();

        let mut bundles = Vec::new();
        for threads in [1, 4, 4] {
            let out = dir.path().join(format!("bundle_{}", bundles.len()));
            let cfg = PipelineConfig { threads, ..cfg.clone() };
            let manifest = run_with_config(&cfg, &bytes, &out).unwrap();
            assert!(manifest.complete);
            let ingest = manifest.stage("ingest").unwrap();
            let matched = manifest.stage("match").unwrap();
            let compute = manifest.stage("compute").unwrap();
            assert_eq!(ingest.rows_in, 200_000);
            assert_eq!(ingest.rows_out, matched.rows_in);
            assert_eq!(matched.rows_out, compute.rows_in);
            assert_eq!(compute.rows_out, 20);
            bundles.push(read_tree(&out));
        }
        assert!(bundles[0].len() >= 10);
        for b in &bundles[1..] {
            assert_eq!(bundles[0].keys().collect::<Vec<_>>(), b.keys().collect::<Vec<_>>());
            for (name, bytes) in &bundles[0] {
                assert!(bytes == &b[name], "{name} differs between runs");
            }
        }

        // the file-driven entry point gives the same bundle
        let via_path = dir.path().join("bundle_path");
        run_pipeline(&cfg_path, Some(&via_path)).unwrap();
        assert!(read_tree(&via_path) == bundles[0]);
    });
}

fn toy_lbv(id: &str, cv: f64) -> LbvSummary {
    LbvSummary {
        site_id: id.into(),
        mean_speed: 10.0,
        n_points: 400,
        cv_al: Some(cv),
        cv_ah: Some(cv),
        cv_dl: Some(cv),
        cv_dh: Some(cv),
        n_al: 100,
        n_ah: 100,
        n_dl: 100,
        n_dh: 100,
        sufficient: true,
    }
}

#[test]
fn c11_hotspot_toy() {
    criterion(11, "Hotspot toy ranking", || {
        let mut sites = vec![site_at("A", 42.0, -83.0), site_at("B", 42.1, -83.0), site_at("C", 42.2, -83.0)];
        for (s, c) in sites.iter_mut().zip([0, 10, 20]) {
            s.crashes_5yr_total = c;
            s.crashes_5yr_rearend = 0;
        }
        let lbv = vec![toy_lbv("A", 180.0), toy_lbv("B", 120.0), toy_lbv("C", 60.0)];
        let rows = rank_sites(&lbv, &sites, &EQUAL_WEIGHTS, &Thresholds::default()).unwrap();
        assert_eq!(rows[0].site_id, "A");
        assert_eq!(rows[0].flag, Flag::LatentHotspot);
        assert_eq!(rows[0].discrepancy, Some(100.0));
        let c = rows.iter().find(|r| r.site_id == "C").unwrap();
        assert_eq!(c.flag, Flag::KnownHotspot);
    });
}
