//! `lbv`: ingest connected-vehicle messages, compute location-based
//! volatility, fit crash-frequency models and rank hotspots.

mod synth;

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use lbv_core::countmodel::report::ModelReport;
use lbv_core::countmodel::spec::ModelSpec;
use lbv_core::countmodel::{FitOptions, LM_CRITICAL};
use lbv_core::geomatch::{self, DEFAULT_RADIUS_M};
use lbv_core::hotspot::{self, Thresholds, EQUAL_WEIGHTS};
use lbv_core::ingest::{self, Schema, Units, DEFAULT_CONSISTENCY_TOLERANCE};
use lbv_core::pipeline::{run_with_config, PipelineConfig};
use lbv_core::volatility::{self, DEFAULT_MIN_QUADRANT_N};
use lbv_core::{Error, Result};

#[derive(Parser)]
#[command(name = "lbv", version, about = "Location-based driving volatility and crash-frequency modeling")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Parse raw message files into the canonical record stream.
    Ingest {
        /// File or glob pattern; repeatable.
        #[arg(long = "input", required = true)]
        inputs: Vec<String>,
        #[arg(long)]
        schema: Option<PathBuf>,
        /// si (m/s, m/s²) or us (mph, ft/s²); overrides the schema.
        #[arg(long)]
        units: Option<Units>,
        #[arg(long, default_value_t = DEFAULT_CONSISTENCY_TOLERANCE)]
        consistency_tolerance: f64,
        /// Drop records failing the acceleration consistency check.
        #[arg(long)]
        drop_flagged: bool,
        /// Audit report; `.json` gets JSON, anything else text.
        #[arg(long)]
        audit_out: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Assign records to the nearest intersection within the radius.
    Match {
        #[arg(long)]
        bsm: PathBuf,
        #[arg(long)]
        inventory: PathBuf,
        #[arg(long, default_value_t = DEFAULT_RADIUS_M)]
        radius_m: f64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Per-site quadrant CVs from matched points.
    Compute {
        #[arg(long)]
        matched: PathBuf,
        #[arg(long, default_value_t = DEFAULT_MIN_QUADRANT_N)]
        min_quadrant_n: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Descriptive statistics by stratum; `.txt` output is a text table.
    Summarize {
        #[arg(long)]
        lbv: PathBuf,
        #[arg(long)]
        inventory: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Fit the models of a spec file. Writes `<name>.json`, `<name>.txt`
    /// and `<name>_predictions.csv` per model into the output directory.
    Fit {
        #[arg(long)]
        lbv: PathBuf,
        #[arg(long)]
        inventory: PathBuf,
        #[arg(long)]
        spec: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 100)]
        max_iter: usize,
        #[arg(long, default_value_t = LM_CRITICAL)]
        lm_critical: f64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Hotspot table ordered by volatility minus crash percentile.
    Rank {
        #[arg(long)]
        lbv: PathBuf,
        #[arg(long)]
        inventory: PathBuf,
        /// Model report (JSON) whose residuals are added to the table.
        #[arg(long)]
        fit: Option<PathBuf>,
        /// Weights of cv_al, cv_ah, cv_dl, cv_dh.
        #[arg(long, value_delimiter = ',')]
        weights: Option<Vec<f64>>,
        /// Per-site plot file with crash and CV marker radii.
        #[arg(long)]
        plot_out: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Synthetic data for testing.
    Synth {
        kind: synth::Kind,
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run every stage from one config and write the report bundle.
    Run {
        #[arg(long)]
        config: PathBuf,
        /// Bundle directory; defaults to the config's output_dir or `bundle`.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Overrides the config's thread count.
        #[arg(long)]
        threads: Option<usize>,
    },
}

fn write(path: &Path, text: &str) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn is_ext(path: &Path, ext: &str) -> bool {
    path.extension().is_some_and(|e| e.eq_ignore_ascii_case(ext))
}

fn execute(command: Command) -> Result<()> {
    match command {
        Command::Ingest {
            inputs,
            schema,
            units,
            consistency_tolerance,
            drop_flagged,
            audit_out,
            out,
        } => {
            let mut schema = match schema {
                Some(p) => Schema::load(&p)?,
                None => Schema::default(),
            };
            if let Some(u) = units {
                schema.units = u;
            }
            let paths = ingest::expand_inputs(&inputs)?;
            let (records, mut audit) = ingest::parse_bsm_files(&paths, &schema)?;
            let records = ingest::apply_consistency_check(records, &mut audit, consistency_tolerance, drop_flagged);
            ingest::write_records(&out, &records)?;
            match audit_out {
                Some(p) if is_ext(&p, "json") => write(&p, &audit.to_json())?,
                Some(p) => write(&p, &audit.to_text())?,
                None => eprint!("{}", audit.to_text()),
            }
            log::info!("{} records written to {}", records.len(), out.display());
        }
        Command::Match {
            bsm,
            inventory,
            radius_m,
            out,
        } => {
            let schema = Schema::default();
            let (records, _) = ingest::parse_bsm_file(&bsm, &schema)?;
            let sites = geomatch::load_inventory(&inventory)?;
            let outcome = geomatch::match_points(&records, &sites, radius_m)?;
            geomatch::write_matched(&out, &outcome.points)?;
            log::info!("{} matched, {} unmatched", outcome.points.len(), outcome.unmatched);
        }
        Command::Compute {
            matched,
            min_quadrant_n,
            out,
        } => {
            let points = geomatch::read_matched(&matched)?;
            let lbv = volatility::compute_all(&points, min_quadrant_n)?;
            volatility::write_lbv(&out, &lbv)?;
        }
        Command::Summarize { lbv, inventory, out } => {
            let lbv = volatility::read_lbv(&lbv)?;
            let sites = geomatch::load_inventory(&inventory)?;
            let table = volatility::summarize_lbv(&lbv, &sites)?;
            if is_ext(&out, "txt") {
                write(&out, &table.to_text())?;
            } else {
                write(&out, &table.to_csv())?;
            }
        }
        Command::Fit {
            lbv,
            inventory,
            spec,
            seed,
            max_iter,
            lm_critical,
            out,
        } => {
            let lbv = volatility::read_lbv(&lbv)?;
            let sites = geomatch::load_inventory(&inventory)?;
            let specs = ModelSpec::load_all(&spec)?;
            let options = FitOptions {
                max_iter,
                lm_critical,
                ..FitOptions::default()
            };
            for spec in &specs {
                let report = spec.run(&lbv, &sites, &options, seed)?;
                write(&out.join(format!("{}.json", spec.name)), &report.to_json())?;
                write(&out.join(format!("{}.txt", spec.name)), &report.to_text())?;
                write(&out.join(format!("{}_predictions.csv", spec.name)), &report.predictions_csv())?;
                print!("{}", report.to_text());
            }
        }
        Command::Rank {
            lbv,
            inventory,
            fit,
            weights,
            plot_out,
            out,
        } => {
            let lbv = volatility::read_lbv(&lbv)?;
            let sites = geomatch::load_inventory(&inventory)?;
            let weights = match weights.as_deref() {
                Some(&[a, b, c, d]) => [a, b, c, d],
                Some(_) => return Err(Error::Config("--weights takes four comma-separated values".into())),
                None => EQUAL_WEIGHTS,
            };
            if weights.iter().any(|w| w.is_nan() || *w < 0.0) {
                return Err(Error::Config("weights must be non-negative".into()));
            }
            let mut rows = hotspot::rank_sites(&lbv, &sites, &weights, &Thresholds::default())?;
            if let Some(path) = fit {
                hotspot::attach_residuals(&mut rows, &ModelReport::read(&path)?);
            }
            hotspot::write_table(&out, &rows)?;
            if let Some(p) = plot_out {
                hotspot::write_plot_file(&p, &lbv, &sites)?;
            }
        }
        Command::Synth { kind, config, out } => synth::run(kind, &config, &out)?,
        Command::Run { config, out, threads } => {
            let (mut cfg, bytes) = PipelineConfig::load(&config)?;
            if let Some(t) = threads {
                cfg.threads = t;
            }
            let dir = out.unwrap_or_else(|| cfg.bundle_dir(&config));
            let manifest = run_with_config(&cfg, &bytes, &dir)?;
            for s in &manifest.stages {
                log::info!("{:<10} {:>10} -> {:>10}", s.stage, s.rows_in, s.rows_out);
            }
            println!("{}", dir.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match execute(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
