//! End-to-end run from one config file: ingest, match, compute, summarize,
//! fit and rank, writing every stage's output plus a manifest into an
//! output directory.
//!
//! ```toml
//! seed = 42
//! threads = 4
//! output_dir = "bundle"
//!
//! [ingest]
//! inputs = ["bsm/*.csv"]
//!
//! [match]
//! inventory = "sites.csv"
//!
//! [fit]
//! specs = "models.toml"
//! ```
//!
//! Relative paths are resolved against the config file's directory. The
//! bundle holds no timestamps or absolute paths, so identical inputs give
//! byte-identical bundles regardless of the thread count.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::countmodel::report::ModelReport;
use crate::countmodel::spec::ModelSpec;
use crate::countmodel::{FitOptions, LM_CRITICAL};
use crate::error::{Error, Result};
use crate::geomatch::{self, DEFAULT_RADIUS_M};
use crate::hotspot::{self, Thresholds, EQUAL_WEIGHTS};
use crate::ingest::{self, Schema, Units, DEFAULT_CONSISTENCY_TOLERANCE};
use crate::volatility::{self, DEFAULT_MIN_QUADRANT_N};

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct IngestConfig {
    #[serde(default)]
    pub inputs: Vec<String>,
    pub schema: Option<PathBuf>,
    pub units: Option<Units>,
    #[serde(default = "default_tolerance")]
    pub consistency_tolerance: f64,
    #[serde(default)]
    pub drop_flagged: bool,
}

fn default_tolerance() -> f64 {
    DEFAULT_CONSISTENCY_TOLERANCE
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MatchConfig {
    pub inventory: Option<PathBuf>,
    #[serde(default = "default_radius")]
    pub radius_m: f64,
}

fn default_radius() -> f64 {
    DEFAULT_RADIUS_M
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ComputeConfig {
    #[serde(default = "default_min_n")]
    pub min_quadrant_n: usize,
}

impl Default for ComputeConfig {
    fn default() -> Self {
        ComputeConfig {
            min_quadrant_n: DEFAULT_MIN_QUADRANT_N,
        }
    }
}

fn default_min_n() -> usize {
    DEFAULT_MIN_QUADRANT_N
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FitConfig {
    pub specs: Option<PathBuf>,
    #[serde(default = "default_lm")]
    pub lm_critical: f64,
    #[serde(default = "default_max_iter")]
    pub max_iter: usize,
}

impl Default for FitConfig {
    fn default() -> Self {
        FitConfig {
            specs: None,
            lm_critical: LM_CRITICAL,
            max_iter: 100,
        }
    }
}

fn default_lm() -> f64 {
    LM_CRITICAL
}
fn default_max_iter() -> usize {
    100
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RankConfig {
    #[serde(default = "default_weights")]
    pub weights: [f64; 4],
    #[serde(default = "default_latent")]
    pub latent_discrepancy: f64,
    #[serde(default = "default_latent_crash")]
    pub latent_max_crash_percentile: f64,
    #[serde(default = "default_known")]
    pub known_min_crash_percentile: f64,
    /// Model whose residuals are added to the hotspot table.
    pub residual_model: Option<String>,
}

impl Default for RankConfig {
    fn default() -> Self {
        let t = Thresholds::default();
        RankConfig {
            weights: EQUAL_WEIGHTS,
            latent_discrepancy: t.latent_discrepancy,
            latent_max_crash_percentile: t.latent_max_crash_percentile,
            known_min_crash_percentile: t.known_min_crash_percentile,
            residual_model: None,
        }
    }
}

fn default_weights() -> [f64; 4] {
    EQUAL_WEIGHTS
}
fn default_latent() -> f64 {
    Thresholds::default().latent_discrepancy
}
fn default_latent_crash() -> f64 {
    Thresholds::default().latent_max_crash_percentile
}
fn default_known() -> f64 {
    Thresholds::default().known_min_crash_percentile
}

impl RankConfig {
    pub fn thresholds(&self) -> Thresholds {
        Thresholds {
            latent_discrepancy: self.latent_discrepancy,
            latent_max_crash_percentile: self.latent_max_crash_percentile,
            known_min_crash_percentile: self.known_min_crash_percentile,
        }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PipelineConfig {
    #[serde(default)]
    pub seed: u64,
    /// Worker threads; 0 or absent means one per core.
    #[serde(default)]
    pub threads: usize,
    pub output_dir: Option<PathBuf>,
    #[serde(default)]
    pub ingest: IngestConfig,
    #[serde(default, rename = "match")]
    pub matching: MatchConfig,
    #[serde(default)]
    pub compute: ComputeConfig,
    #[serde(default)]
    pub fit: FitConfig,
    #[serde(default)]
    pub rank: RankConfig,
}

impl PipelineConfig {
    pub fn parse(text: &str) -> Result<PipelineConfig> {
        let cfg: PipelineConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        if cfg.ingest.inputs.is_empty() {
            return Err(Error::Config("missing required key 'ingest.inputs'".into()));
        }
        if cfg.matching.inventory.is_none() {
            return Err(Error::Config("missing required key 'match.inventory'".into()));
        }
        if !(cfg.matching.radius_m > 0.0) {
            return Err(Error::Config("'match.radius_m' must be positive".into()));
        }
        Ok(cfg)
    }

    /// Reads a config and resolves its relative paths against its directory.
    pub fn load(path: &Path) -> Result<(PipelineConfig, Vec<u8>)> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        let text = String::from_utf8(bytes.clone()).map_err(|_| Error::Config("config is not UTF-8".into()))?;
        let mut cfg = Self::parse(&text)?;
        let base = path.parent().unwrap_or(Path::new("."));
        let resolve = |p: &Path| if p.is_absolute() { p.to_path_buf() } else { base.join(p) };
        cfg.ingest.inputs = cfg
            .ingest
            .inputs
            .iter()
            .map(|p| resolve(Path::new(p)).to_string_lossy().into_owned())
            .collect();
        cfg.ingest.schema = cfg.ingest.schema.as_deref().map(resolve);
        cfg.matching.inventory = cfg.matching.inventory.as_deref().map(resolve);
        cfg.fit.specs = cfg.fit.specs.as_deref().map(resolve);
        cfg.output_dir = cfg.output_dir.as_deref().map(resolve);
        Ok((cfg, bytes))
    }

    /// `output_dir` if set, else `bundle` next to the config file.
    pub fn bundle_dir(&self, config_path: &Path) -> PathBuf {
        self.output_dir
            .clone()
            .unwrap_or_else(|| config_path.parent().unwrap_or(Path::new(".")).join("bundle"))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageRecord {
    pub stage: String,
    pub rows_in: u64,
    pub rows_out: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OutputFile {
    pub name: String,
    pub sha256: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub config_sha256: String,
    pub seed: u64,
    pub complete: bool,
    pub failed_stage: Option<String>,
    pub error: Option<String>,
    pub stages: Vec<StageRecord>,
    pub files: Vec<OutputFile>,
}

impl Manifest {
    pub fn stage(&self, name: &str) -> Option<&StageRecord> {
        self.stages.iter().find(|s| s.stage == name)
    }
}

struct Bundle {
    dir: PathBuf,
    manifest: Manifest,
}

impl Bundle {
    fn write(&mut self, name: &str, contents: &[u8]) -> Result<()> {
        let path = self.dir.join(name);
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
        fs::write(&path, contents).map_err(|e| Error::io(&path, e))?;
        self.manifest.files.push(OutputFile {
            name: name.to_string(),
            sha256: hex::encode(Sha256::digest(contents)),
        });
        Ok(())
    }

    fn write_via(&mut self, name: &str, f: impl FnOnce(&Path) -> Result<()>) -> Result<()> {
        let path = self.dir.join(name);
        f(&path)?;
        let bytes = fs::read(&path).map_err(|e| Error::io(&path, e))?;
        self.manifest.files.push(OutputFile {
            name: name.to_string(),
            sha256: hex::encode(Sha256::digest(&bytes)),
        });
        Ok(())
    }

    fn stage(&mut self, stage: &str, rows_in: u64, rows_out: u64) {
        self.manifest.stages.push(StageRecord {
            stage: stage.to_string(),
            rows_in,
            rows_out,
        });
    }

    fn save_manifest(&self) -> Result<()> {
        let path = self.dir.join("manifest.json");
        let text = serde_json::to_string_pretty(&self.manifest).expect("manifest serializes") + "\n";
        fs::write(&path, text).map_err(|e| Error::io(&path, e))
    }
}

fn staged<T>(stage: &str, r: Result<T>) -> Result<T> {
    r.map_err(|e| Error::Stage {
        stage: stage.to_string(),
        source: Box::new(e),
    })
}

/// Runs the pipeline from a config file. The output directory defaults to
/// `bundle` next to the config; `out_override` replaces it.
pub fn run_pipeline(config_path: &Path, out_override: Option<&Path>) -> Result<Manifest> {
    let (cfg, bytes) = staged("config", PipelineConfig::load(config_path))?;
    let dir = out_override.map_or_else(|| cfg.bundle_dir(config_path), Path::to_path_buf);
    run_with_config(&cfg, &bytes, &dir)
}

/// Runs the pipeline for an already parsed config. `config_bytes` only feeds
/// the manifest hash.
pub fn run_with_config(cfg: &PipelineConfig, config_bytes: &[u8], dir: &Path) -> Result<Manifest> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut bundle = Bundle {
        dir: dir.to_path_buf(),
        manifest: Manifest {
            config_sha256: hex::encode(Sha256::digest(config_bytes)),
            seed: cfg.seed,
            complete: false,
            failed_stage: None,
            error: None,
            stages: Vec::new(),
            files: Vec::new(),
        },
    };
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(cfg.threads)
        .build()
        .map_err(|e| Error::Config(format!("thread pool: {e}")))?;
    let outcome = pool.install(|| run_stages(cfg, &mut bundle));
    match outcome {
        Ok(()) => {
            bundle.manifest.complete = true;
            bundle.save_manifest()?;
            Ok(bundle.manifest)
        }
        Err(e) => {
            if let Error::Stage { stage, source } = &e {
                bundle.manifest.failed_stage = Some(stage.clone());
                bundle.manifest.error = Some(source.to_string());
            } else {
                bundle.manifest.error = Some(e.to_string());
            }
            // best effort: the original error matters more than a failed write
            let _ = bundle.save_manifest();
            Err(e)
        }
    }
}

fn run_stages(cfg: &PipelineConfig, bundle: &mut Bundle) -> Result<()> {
    // ingest
    let (records, audit) = staged("ingest", (|| {
        let mut schema = match &cfg.ingest.schema {
            Some(p) => Schema::load(p)?,
            None => Schema::default(),
        };
        if let Some(u) = cfg.ingest.units {
            schema.units = u;
        }
        let paths = ingest::expand_inputs(&cfg.ingest.inputs)?;
        let (records, mut audit) = ingest::parse_bsm_files(&paths, &schema)?;
        let records = ingest::apply_consistency_check(
            records,
            &mut audit,
            cfg.ingest.consistency_tolerance,
            cfg.ingest.drop_flagged,
        );
        Ok((records, audit))
    })())?;
    staged("ingest", bundle.write("audit.txt", audit.to_text().as_bytes()))?;
    staged("ingest", bundle.write("audit.json", audit.to_json().as_bytes()))?;
    bundle.stage("ingest", audit.records_read, records.len() as u64);

    // match
    let inventory_path = cfg.matching.inventory.as_ref().expect("validated at load");
    let sites = staged("match", geomatch::load_inventory(inventory_path))?;
    let outcome = staged("match", geomatch::match_points(&records, &sites, cfg.matching.radius_m))?;
    staged("match", bundle.write_via("matched.csv", |p| geomatch::write_matched(p, &outcome.points)))?;
    bundle.stage("match", records.len() as u64, outcome.points.len() as u64);
    drop(records);

    // compute
    let lbv = staged("compute", volatility::compute_all(&outcome.points, cfg.compute.min_quadrant_n))?;
    staged("compute", bundle.write_via("lbv.csv", |p| volatility::write_lbv(p, &lbv)))?;
    bundle.stage("compute", outcome.points.len() as u64, lbv.len() as u64);

    // summarize
    let table = staged("summarize", volatility::summarize_lbv(&lbv, &sites))?;
    staged("summarize", bundle.write("summary.csv", table.to_csv().as_bytes()))?;
    staged("summarize", bundle.write("summary.txt", table.to_text().as_bytes()))?;
    bundle.stage("summarize", lbv.len() as u64, table.rows.len() as u64);

    // fit
    let mut reports: Vec<ModelReport> = Vec::new();
    if let Some(spec_path) = &cfg.fit.specs {
        let specs = staged("fit", ModelSpec::load_all(spec_path))?;
        let options = FitOptions {
            max_iter: cfg.fit.max_iter,
            lm_critical: cfg.fit.lm_critical,
            ..FitOptions::default()
        };
        for spec in &specs {
            let report = staged("fit", spec.run(&lbv, &sites, &options, cfg.seed))?;
            let stem = format!("models/{}", spec.name);
            staged("fit", bundle.write(&format!("{stem}.json"), report.to_json().as_bytes()))?;
            staged("fit", bundle.write(&format!("{stem}.txt"), report.to_text().as_bytes()))?;
            staged(
                "fit",
                bundle.write(&format!("{stem}_predictions.csv"), report.predictions_csv().as_bytes()),
            )?;
            reports.push(report);
        }
        let n_obs: usize = reports.iter().map(|r| r.n_obs).sum();
        bundle.stage("fit", lbv.len() as u64, n_obs as u64);
    }

    // rank
    let mut rows = staged(
        "rank",
        hotspot::rank_sites(&lbv, &sites, &cfg.rank.weights, &cfg.rank.thresholds()),
    )?;
    if let Some(name) = &cfg.rank.residual_model {
        let report = staged(
            "rank",
            reports
                .iter()
                .find(|r| &r.name == name)
                .ok_or_else(|| Error::Config(format!("'rank.residual_model' names unknown model '{name}'"))),
        )?;
        hotspot::attach_residuals(&mut rows, report);
    }
    staged("rank", bundle.write("hotspots.csv", hotspot::table_csv(&rows).as_bytes()))?;
    let plot = staged("rank", hotspot::plot_csv(&lbv, &sites))?;
    staged("rank", bundle.write("hotspot_plot.csv", plot.as_bytes()))?;
    bundle.stage("rank", lbv.len() as u64, rows.len() as u64);
    Ok(())
}
