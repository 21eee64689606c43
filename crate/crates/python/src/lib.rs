//! Python module `lbv`.
//!
//! ```python
//! import lbv
//! fit = lbv.fit_poisson([1, 3, 2, 5], [[0.1], [0.7], [0.4], [1.2]], ["x"])
//! print(fit.coefficients, fit.mcfadden_rho2)
//! ```

use std::path::PathBuf;

use lbv_core::countmodel::{self, DesignMatrix, FitOptions, Transform, LM_CRITICAL};
use lbv_core::geomatch::{self, MatchedPoint, DEFAULT_RADIUS_M};
use lbv_core::hotspot::{self, Thresholds, EQUAL_WEIGHTS};
use lbv_core::ingest::{self, Schema};
use lbv_core::randparam::{self, RandomParamSpec, DEFAULT_DRAWS, DEFAULT_HALTON_SKIP};
use lbv_core::volatility::{self, DEFAULT_MIN_QUADRANT_N};
use lbv_core::{pipeline, stats, Error};
use pyo3::exceptions::{PyOSError, PyRuntimeError, PyValueError};
use pyo3::prelude::*;

fn to_py(e: Error) -> PyErr {
    match e.exit_code() {
        4 => PyOSError::new_err(e.to_string()),
        3 => PyRuntimeError::new_err(e.to_string()),
        _ => PyValueError::new_err(e.to_string()),
    }
}

fn design(
    y: Vec<u64>,
    x: Vec<Vec<f64>>,
    names: Vec<String>,
    transforms: Option<Vec<String>>,
) -> PyResult<DesignMatrix> {
    let transforms: Vec<Transform> = match transforms {
        None => vec![Transform::Identity; names.len()],
        Some(t) => t
            .iter()
            .map(|s| match s.as_str() {
                "identity" => Ok(Transform::Identity),
                "log" | "ln" => Ok(Transform::Log),
                other => Err(PyValueError::new_err(format!("unknown transform '{other}'"))),
            })
            .collect::<PyResult<_>>()?,
    };
    if transforms.len() != names.len() {
        return Err(PyValueError::new_err("one transform per column name"));
    }
    let ids = (0..y.len()).map(|i| i.to_string()).collect();
    let cols: Vec<(String, Transform)> = names.into_iter().zip(transforms).collect();
    DesignMatrix::from_raw(ids, y, &cols, &x).map_err(to_py)
}

fn options(max_iter: usize) -> FitOptions {
    FitOptions {
        max_iter,
        ..FitOptions::default()
    }
}

/// Fitted count model.
#[pyclass(name = "ModelFit", frozen, skip_from_py_object)]
struct PyModelFit {
    inner: countmodel::ModelFit,
}

#[pymethods]
impl PyModelFit {
    #[getter]
    fn family(&self) -> &'static str {
        self.inner.family.as_str()
    }

    /// `(name, estimate, std_error, t_stat)` per column, constant first.
    #[getter]
    fn coefficients(&self) -> Vec<(String, f64, Option<f64>, Option<f64>)> {
        self.inner
            .coefficients
            .iter()
            .map(|c| (c.name.clone(), c.estimate, c.std_error, c.t_stat))
            .collect()
    }

    #[getter]
    fn estimates(&self) -> Vec<f64> {
        self.inner.estimates()
    }

    /// NB2 dispersion, `None` for Poisson families.
    #[getter]
    fn alpha(&self) -> Option<f64> {
        self.inner.dispersion.as_ref().map(|d| d.alpha)
    }

    #[getter]
    fn collapsed_to_poisson(&self) -> bool {
        self.inner.dispersion.as_ref().is_some_and(|d| d.collapsed_to_poisson)
    }

    #[getter]
    fn loglik_zero(&self) -> f64 {
        self.inner.loglik_zero
    }

    #[getter]
    fn loglik(&self) -> f64 {
        self.inner.loglik_conv
    }

    #[getter]
    fn mcfadden_rho2(&self) -> f64 {
        self.inner.mcfadden_rho2
    }

    #[getter]
    fn lm_statistic(&self) -> Option<f64> {
        self.inner.lm_stat()
    }

    #[getter]
    fn lm_decision(&self) -> Option<&'static str> {
        self.inner.lm.map(|l| l.decision.as_str())
    }

    #[getter]
    fn fitted(&self) -> Vec<f64> {
        self.inner.fitted_lambda.clone()
    }

    #[getter]
    fn iterations(&self) -> usize {
        self.inner.iterations
    }

    fn __repr__(&self) -> String {
        format!(
            "ModelFit(family={}, loglik={:.4}, rho2={:.4})",
            self.family(),
            self.inner.loglik_conv,
            self.inner.mcfadden_rho2
        )
    }
}

type SdTuple = (String, f64, Option<f64>, Option<f64>, bool);

/// Random-parameter Poisson fit by simulated likelihood.
#[pyclass(name = "RandomParamFit", frozen, skip_from_py_object)]
struct PyRandomParamFit {
    inner: randparam::RandomParamFit,
}

#[pymethods]
impl PyRandomParamFit {
    #[getter]
    fn base(&self) -> PyModelFit {
        PyModelFit {
            inner: self.inner.base.clone(),
        }
    }

    /// `(column, sd, std_error, t_stat, collapsed_to_fixed)` per random column.
    #[getter]
    fn standard_deviations(&self) -> Vec<SdTuple> {
        self.inner
            .sd_estimates
            .iter()
            .map(|s| (s.column.clone(), s.estimate, s.std_error, s.t_stat, s.collapsed_to_fixed))
            .collect()
    }

    #[getter]
    fn marginal_effects(&self) -> Vec<(String, f64)> {
        self.inner.marginal_effects.iter().map(|m| (m.column.clone(), m.value)).collect()
    }

    #[getter]
    fn draws(&self) -> usize {
        self.inner.draws_used
    }
}

/// Quadrant volatility of one site. Undefined CVs are `None`.
#[pyclass(name = "LbvSummary", frozen, skip_from_py_object)]
struct PyLbvSummary {
    inner: volatility::LbvSummary,
}

#[pymethods]
impl PyLbvSummary {
    #[getter]
    fn site_id(&self) -> String {
        self.inner.site_id.clone()
    }
    #[getter]
    fn mean_speed(&self) -> f64 {
        self.inner.mean_speed
    }
    #[getter]
    fn n_points(&self) -> usize {
        self.inner.n_points
    }
    #[getter]
    fn cv_al(&self) -> Option<f64> {
        self.inner.cv_al
    }
    #[getter]
    fn cv_ah(&self) -> Option<f64> {
        self.inner.cv_ah
    }
    #[getter]
    fn cv_dl(&self) -> Option<f64> {
        self.inner.cv_dl
    }
    #[getter]
    fn cv_dh(&self) -> Option<f64> {
        self.inner.cv_dh
    }
    /// Points per quadrant in the order al, ah, dl, dh.
    #[getter]
    fn counts(&self) -> (usize, usize, usize, usize) {
        let l = &self.inner;
        (l.n_al, l.n_ah, l.n_dl, l.n_dh)
    }
    #[getter]
    fn sufficient(&self) -> bool {
        self.inner.sufficient
    }

    fn __repr__(&self) -> String {
        format!("LbvSummary(site_id={:?}, n_points={})", self.inner.site_id, self.inner.n_points)
    }
}

#[pyclass(name = "HotspotRow", frozen, skip_from_py_object)]
struct PyHotspotRow {
    inner: hotspot::HotspotRow,
}

#[pymethods]
impl PyHotspotRow {
    #[getter]
    fn site_id(&self) -> String {
        self.inner.site_id.clone()
    }
    #[getter]
    fn crashes(&self) -> u64 {
        self.inner.crashes_5yr
    }
    #[getter]
    fn crash_percentile(&self) -> Option<f64> {
        self.inner.crash_percentile
    }
    #[getter]
    fn volatility_score(&self) -> Option<f64> {
        self.inner.volatility_score
    }
    #[getter]
    fn volatility_percentile(&self) -> Option<f64> {
        self.inner.volatility_percentile
    }
    #[getter]
    fn discrepancy(&self) -> Option<f64> {
        self.inner.discrepancy
    }
    #[getter]
    fn flag(&self) -> String {
        self.inner.flag.to_string()
    }

    fn __repr__(&self) -> String {
        format!("HotspotRow(site_id={:?}, flag={})", self.inner.site_id, self.inner.flag)
    }
}

#[pyclass(name = "Manifest", frozen, skip_from_py_object)]
struct PyManifest {
    inner: pipeline::Manifest,
}

#[pymethods]
impl PyManifest {
    #[getter]
    fn complete(&self) -> bool {
        self.inner.complete
    }
    #[getter]
    fn config_sha256(&self) -> String {
        self.inner.config_sha256.clone()
    }
    #[getter]
    fn seed(&self) -> u64 {
        self.inner.seed
    }
    /// `(stage, rows_in, rows_out)`.
    #[getter]
    fn stages(&self) -> Vec<(String, u64, u64)> {
        self.inner.stages.iter().map(|s| (s.stage.clone(), s.rows_in, s.rows_out)).collect()
    }
    /// `(relative path, sha256)` of every bundle file.
    #[getter]
    fn files(&self) -> Vec<(String, String)> {
        self.inner.files.iter().map(|f| (f.name.clone(), f.sha256.clone())).collect()
    }
}

#[pyfunction]
#[pyo3(signature = (y, x, names, transforms=None, max_iter=100))]
fn fit_poisson(
    y: Vec<u64>,
    x: Vec<Vec<f64>>,
    names: Vec<String>,
    transforms: Option<Vec<String>>,
    max_iter: usize,
) -> PyResult<PyModelFit> {
    let d = design(y, x, names, transforms)?;
    let inner = countmodel::fit_poisson(&d, &options(max_iter)).map_err(to_py)?;
    Ok(PyModelFit { inner })
}

#[pyfunction]
#[pyo3(signature = (y, x, names, transforms=None, max_iter=100))]
fn fit_negative_binomial(
    y: Vec<u64>,
    x: Vec<Vec<f64>>,
    names: Vec<String>,
    transforms: Option<Vec<String>>,
    max_iter: usize,
) -> PyResult<PyModelFit> {
    let d = design(y, x, names, transforms)?;
    let inner = countmodel::fit_negative_binomial(&d, &options(max_iter)).map_err(to_py)?;
    Ok(PyModelFit { inner })
}

/// Random-coefficient Poisson. `random` names columns (after transforms,
/// e.g. `"ln(aadt)"`) whose coefficients get a normal distribution.
#[pyfunction]
#[pyo3(signature = (y, x, names, random, transforms=None, draws=DEFAULT_DRAWS, halton_skip=DEFAULT_HALTON_SKIP, seed=0, max_iter=100))]
#[allow(clippy::too_many_arguments)]
fn fit_random_poisson(
    py: Python<'_>,
    y: Vec<u64>,
    x: Vec<Vec<f64>>,
    names: Vec<String>,
    random: Vec<String>,
    transforms: Option<Vec<String>>,
    draws: usize,
    halton_skip: usize,
    seed: u64,
    max_iter: usize,
) -> PyResult<PyRandomParamFit> {
    let d = design(y, x, names, transforms)?;
    let spec = RandomParamSpec::new(random, draws, halton_skip, seed);
    let inner = py
        .detach(|| randparam::fit_random_poisson(&d, &spec, &options(max_iter)))
        .map_err(to_py)?;
    Ok(PyRandomParamFit { inner })
}

/// Over-dispersion LM statistic and decision for counts `y` and means `mu`.
#[pyfunction]
#[pyo3(signature = (y, mu, critical=LM_CRITICAL))]
fn lm_test(y: Vec<u64>, mu: Vec<f64>, critical: f64) -> PyResult<(f64, &'static str)> {
    let t = countmodel::lagrange_multiplier_test(&y, &mu, critical).map_err(to_py)?;
    Ok((t.statistic, t.decision.as_str()))
}

#[pyfunction]
fn mcfadden_rho2(loglik_zero: f64, loglik: f64) -> PyResult<f64> {
    countmodel::mcfadden_rho2(loglik_zero, loglik).map_err(to_py)
}

#[pyfunction]
#[pyo3(signature = (base, n, skip=0))]
fn halton_sequence(base: u64, n: usize, skip: usize) -> PyResult<Vec<f64>> {
    if base < 2 {
        return Err(PyValueError::new_err("base must be at least 2"));
    }
    Ok(randparam::halton_sequence(base, skip, n))
}

#[pyfunction]
fn normal_quantile(p: f64) -> f64 {
    stats::normal_quantile(p)
}

/// Haversine distance in meters.
#[pyfunction]
fn great_circle_distance(lat1: f64, lon1: f64, lat2: f64, lon2: f64) -> f64 {
    geomatch::great_circle_distance((lat1, lon1), (lat2, lon2))
}

/// `100 * sample sd / mean`.
#[pyfunction]
fn coefficient_of_variation(values: Vec<f64>) -> PyResult<f64> {
    volatility::coefficient_of_variation(&values).map_err(|e| PyValueError::new_err(e.to_string()))
}

/// Quadrant CVs for one site from parallel speed and acceleration lists.
#[pyfunction]
#[pyo3(signature = (speed, accel_long, min_quadrant_n=DEFAULT_MIN_QUADRANT_N, site_id="site"))]
fn compute_lbv(speed: Vec<f64>, accel_long: Vec<f64>, min_quadrant_n: usize, site_id: &str) -> PyResult<PyLbvSummary> {
    if speed.len() != accel_long.len() {
        return Err(PyValueError::new_err("speed and accel_long differ in length"));
    }
    let points: Vec<MatchedPoint> = speed
        .iter()
        .zip(&accel_long)
        .enumerate()
        .map(|(i, (&speed, &accel_long))| MatchedPoint {
            site_id: site_id.to_string(),
            device_id: String::new(),
            timestamp: i as f64,
            speed,
            accel_long,
        })
        .collect();
    let inner = volatility::compute_lbv(&points, min_quadrant_n).map_err(to_py)?;
    Ok(PyLbvSummary { inner })
}

/// Matches a canonical record file against an inventory and writes the
/// matched points. Returns `(matched, unmatched)`.
#[pyfunction]
#[pyo3(signature = (bsm, inventory, out, radius_m=DEFAULT_RADIUS_M))]
fn match_file(py: Python<'_>, bsm: PathBuf, inventory: PathBuf, out: PathBuf, radius_m: f64) -> PyResult<(usize, usize)> {
    py.detach(|| {
        let (records, _) = ingest::parse_bsm_file(&bsm, &Schema::default())?;
        let sites = geomatch::load_inventory(&inventory)?;
        let outcome = geomatch::match_points(&records, &sites, radius_m)?;
        geomatch::write_matched(&out, &outcome.points)?;
        Ok((outcome.points.len(), outcome.unmatched))
    })
    .map_err(to_py)
}

#[pyfunction]
fn read_lbv(path: PathBuf) -> PyResult<Vec<PyLbvSummary>> {
    let rows = volatility::read_lbv(&path).map_err(to_py)?;
    Ok(rows.into_iter().map(|inner| PyLbvSummary { inner }).collect())
}

/// Hotspot table from an lbv file and an inventory, best candidates first.
#[pyfunction]
#[pyo3(signature = (lbv, inventory, weights=None))]
fn rank_sites(lbv: PathBuf, inventory: PathBuf, weights: Option<[f64; 4]>) -> PyResult<Vec<PyHotspotRow>> {
    let summaries = volatility::read_lbv(&lbv).map_err(to_py)?;
    let sites = geomatch::load_inventory(&inventory).map_err(to_py)?;
    let rows = hotspot::rank_sites(&summaries, &sites, &weights.unwrap_or(EQUAL_WEIGHTS), &Thresholds::default())
        .map_err(to_py)?;
    Ok(rows.into_iter().map(|inner| PyHotspotRow { inner }).collect())
}

/// Runs the full pipeline from a TOML config.
#[pyfunction]
#[pyo3(signature = (config, out=None))]
fn run_pipeline(py: Python<'_>, config: PathBuf, out: Option<PathBuf>) -> PyResult<PyManifest> {
    let inner = py
        .detach(|| pipeline::run_pipeline(&config, out.as_deref()))
        .map_err(to_py)?;
    Ok(PyManifest { inner })
}

#[pymodule]
fn lbv(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyModelFit>()?;
    m.add_class::<PyRandomParamFit>()?;
    m.add_class::<PyLbvSummary>()?;
    m.add_class::<PyHotspotRow>()?;
    m.add_class::<PyManifest>()?;
    m.add_function(wrap_pyfunction!(fit_poisson, m)?)?;
    m.add_function(wrap_pyfunction!(fit_negative_binomial, m)?)?;
    m.add_function(wrap_pyfunction!(fit_random_poisson, m)?)?;
    m.add_function(wrap_pyfunction!(lm_test, m)?)?;
    m.add_function(wrap_pyfunction!(mcfadden_rho2, m)?)?;
    m.add_function(wrap_pyfunction!(halton_sequence, m)?)?;
    m.add_function(wrap_pyfunction!(normal_quantile, m)?)?;
    m.add_function(wrap_pyfunction!(great_circle_distance, m)?)?;
    m.add_function(wrap_pyfunction!(coefficient_of_variation, m)?)?;
    m.add_function(wrap_pyfunction!(compute_lbv, m)?)?;
    m.add_function(wrap_pyfunction!(match_file, m)?)?;
    m.add_function(wrap_pyfunction!(read_lbv, m)?)?;
    m.add_function(wrap_pyfunction!(rank_sites, m)?)?;
    m.add_function(wrap_pyfunction!(run_pipeline, m)?)?;
    Ok(())
}
