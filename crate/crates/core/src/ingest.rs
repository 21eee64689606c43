//! Streaming, validation and auditing of raw Basic Safety Message logs.
//!
//! Every input row ends up either in the accepted record stream or counted
//! against exactly one reject rule. Lateral acceleration at or beyond the 2g
//! recording cap of the on-board radios is treated as saturated: the field is
//! nulled and counted, the message itself is kept.

use std::collections::{BTreeMap, HashMap};
use std::fs::File;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// |lateral acceleration| at or above this (2g, m/s²) is a saturated reading.
pub const LATERAL_SATURATION: f64 = 19.6;
/// |longitudinal acceleration| above this (m/s²) is physically implausible.
pub const MAX_ACCEL_LONG: f64 = 15.0;
pub const MAX_SPEED: f64 = 80.0;
pub const DEFAULT_CONSISTENCY_TOLERANCE: f64 = 1.0;

const MPH_TO_MPS: f64 = 0.44704;
const FTPS2_TO_MPS2: f64 = 0.3048;
const CHUNK_ROWS: usize = 1 << 16;

/// One 10 Hz message in canonical SI units.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BsmRecord {
    pub device_id: String,
    pub trip_id: String,
    pub timestamp: f64,
    pub latitude: f64,
    pub longitude: f64,
    pub speed: f64,
    pub heading: f64,
    pub accel_long: f64,
    pub accel_lat: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Units {
    /// speed m/s, acceleration m/s²
    #[default]
    Si,
    /// speed mph, acceleration ft/s²
    Us,
}

impl std::str::FromStr for Units {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "si" | "m-s" | "mps" => Ok(Units::Si),
            "us" | "mph" => Ok(Units::Us),
            other => Err(Error::Config(format!("unknown unit system '{other}' (expected si or us)"))),
        }
    }
}

/// Reasons a row can be rejected, checked in declaration order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum RejectRule {
    ParseError,
    LatitudeRange,
    LongitudeRange,
    SpeedNegative,
    SpeedExcessive,
    HeadingRange,
    AccelLongImplausible,
    TimestampRegression,
    AccelInconsistent,
}

impl RejectRule {
    pub const ALL: [RejectRule; 9] = [
        RejectRule::ParseError,
        RejectRule::LatitudeRange,
        RejectRule::LongitudeRange,
        RejectRule::SpeedNegative,
        RejectRule::SpeedExcessive,
        RejectRule::HeadingRange,
        RejectRule::AccelLongImplausible,
        RejectRule::TimestampRegression,
        RejectRule::AccelInconsistent,
    ];

    pub fn name(self) -> &'static str {
        match self {
            RejectRule::ParseError => "parse_error",
            RejectRule::LatitudeRange => "latitude_range",
            RejectRule::LongitudeRange => "longitude_range",
            RejectRule::SpeedNegative => "speed_negative",
            RejectRule::SpeedExcessive => "speed_excessive",
            RejectRule::HeadingRange => "heading_range",
            RejectRule::AccelLongImplausible => "accel_long_implausible",
            RejectRule::TimestampRegression => "timestamp_regression",
            RejectRule::AccelInconsistent => "accel_inconsistent",
        }
    }
}

/// Data-quality counters for one or more parsed files.
///
/// Audits merge by summation, so the result of parsing a set of files does
/// not depend on how the work was partitioned.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct IngestAudit {
    pub records_read: u64,
    pub records_accepted: u64,
    pub rejects_by_rule: BTreeMap<String, u64>,
    pub lateral_saturated: u64,
    /// Advisory finite-difference flags (kept unless configured otherwise).
    pub consistency_flagged: u64,
}

impl IngestAudit {
    pub fn lateral_saturated_fraction(&self) -> f64 {
        if self.records_read == 0 {
            0.0
        } else {
            self.lateral_saturated as f64 / self.records_read as f64
        }
    }

    pub fn total_rejected(&self) -> u64 {
        self.rejects_by_rule.values().sum()
    }

    pub fn reject_count(&self, rule: RejectRule) -> u64 {
        self.rejects_by_rule.get(rule.name()).copied().unwrap_or(0)
    }

    fn add_reject(&mut self, rule: RejectRule) {
        *self.rejects_by_rule.entry(rule.name().to_string()).or_insert(0) += 1;
    }

    pub fn merge(&mut self, other: &IngestAudit) {
        self.records_read += other.records_read;
        self.records_accepted += other.records_accepted;
        self.lateral_saturated += other.lateral_saturated;
        self.consistency_flagged += other.consistency_flagged;
        for (rule, n) in &other.rejects_by_rule {
            *self.rejects_by_rule.entry(rule.clone()).or_insert(0) += n;
        }
    }

    /// Flat `key=value` lines; every reject rule is listed, zeros included.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        out.push_str(&format!("records_read={}\n", self.records_read));
        out.push_str(&format!("records_accepted={}\n", self.records_accepted));
        for rule in RejectRule::ALL {
            out.push_str(&format!("reject.{}={}\n", rule.name(), self.reject_count(rule)));
        }
        out.push_str(&format!("lateral_saturated={}\n", self.lateral_saturated));
        out.push_str(&format!(
            "lateral_saturated_fraction={}\n",
            self.lateral_saturated_fraction()
        ));
        out.push_str(&format!("consistency_flagged={}\n", self.consistency_flagged));
        out
    }

    pub fn to_json(&self) -> String {
        let mut value = serde_json::to_value(self).expect("audit serializes");
        value["lateral_saturated_fraction"] = serde_json::json!(self.lateral_saturated_fraction());
        serde_json::to_string_pretty(&value).expect("audit serializes")
    }
}

/// Canonical field name → column header in the source file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Schema {
    #[serde(default)]
    pub units: Units,
    #[serde(default)]
    pub columns: BTreeMap<String, String>,
}

const REQUIRED_FIELDS: [&str; 8] = [
    "device_id",
    "trip_id",
    "timestamp",
    "latitude",
    "longitude",
    "speed",
    "heading",
    "accel_long",
];
const OPTIONAL_FIELDS: [&str; 2] = ["accel_lat", "elevation"];

impl Default for Schema {
    fn default() -> Self {
        Schema {
            units: Units::Si,
            columns: REQUIRED_FIELDS
                .iter()
                .chain(OPTIONAL_FIELDS.iter())
                .map(|f| (f.to_string(), f.to_string()))
                .collect(),
        }
    }
}

impl Schema {
    /// Reads a TOML schema (`units = "us"` plus a `[columns]` table).
    /// Canonical names missing from the table map to themselves.
    pub fn load(path: &Path) -> Result<Schema> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let parsed: Schema = toml::from_str(&text)
            .map_err(|e| Error::Schema(format!("{}: {e}", path.display())))?;
        for key in parsed.columns.keys() {
            if !REQUIRED_FIELDS.contains(&key.as_str()) && !OPTIONAL_FIELDS.contains(&key.as_str()) {
                return Err(Error::Schema(format!("unknown canonical field '{key}'")));
            }
        }
        let mut schema = Schema {
            units: parsed.units,
            ..Schema::default()
        };
        schema.columns.extend(parsed.columns);
        Ok(schema)
    }

    fn header_for<'a>(&'a self, field: &'a str) -> &'a str {
        self.columns.get(field).map(String::as_str).unwrap_or(field)
    }
}

struct ColumnIndex {
    device_id: usize,
    trip_id: usize,
    timestamp: usize,
    latitude: usize,
    longitude: usize,
    speed: usize,
    heading: usize,
    accel_long: usize,
    accel_lat: Option<usize>,
}

impl ColumnIndex {
    fn resolve(headers: &csv::StringRecord, schema: &Schema) -> Result<ColumnIndex> {
        let lookup: HashMap<&str, usize> = headers
            .iter()
            .enumerate()
            .map(|(i, h)| (h.trim(), i))
            .collect();
        let find = |field: &str| -> Result<usize> {
            let header = schema.header_for(field);
            lookup.get(header).copied().ok_or_else(|| {
                Error::Schema(format!("missing required column '{header}' (field {field})"))
            })
        };
        Ok(ColumnIndex {
            device_id: find("device_id")?,
            trip_id: find("trip_id")?,
            timestamp: find("timestamp")?,
            latitude: find("latitude")?,
            longitude: find("longitude")?,
            speed: find("speed")?,
            heading: find("heading")?,
            accel_long: find("accel_long")?,
            accel_lat: lookup.get(schema.header_for("accel_lat")).copied(),
        })
    }
}

/// Picks tab when the header line has more tabs than commas.
pub fn detect_delimiter(header_line: &str) -> u8 {
    let tabs = header_line.matches('\t').count();
    let commas = header_line.matches(',').count();
    if tabs > commas {
        b'\t'
    } else {
        b','
    }
}

pub(crate) fn open_delimited(path: &Path) -> Result<csv::Reader<BufReader<File>>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut reader = BufReader::new(file);
    let mut first = String::new();
    reader.read_line(&mut first).map_err(|e| Error::io(path, e))?;
    let delimiter = detect_delimiter(&first);
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    Ok(csv::ReaderBuilder::new()
        .delimiter(delimiter)
        .has_headers(true)
        .flexible(true)
        .trim(csv::Trim::All)
        .from_reader(BufReader::new(file)))
}

enum Parsed {
    Accepted { record: BsmRecord, saturated: bool },
    Rejected(RejectRule),
}

fn parse_number(cell: Option<&str>) -> Option<f64> {
    let v: f64 = cell?.trim().parse().ok()?;
    v.is_finite().then_some(v)
}

fn parse_nullable(cell: Option<&str>) -> std::result::Result<Option<f64>, ()> {
    match cell.map(str::trim) {
        None | Some("") => Ok(None),
        Some(s) if s.eq_ignore_ascii_case("na") || s.eq_ignore_ascii_case("null") => Ok(None),
        Some(s) => match s.parse::<f64>() {
            Ok(v) if v.is_finite() => Ok(Some(v)),
            _ => Err(()),
        },
    }
}

fn parse_row(row: &csv::StringRecord, cols: &ColumnIndex, units: Units) -> Parsed {
    use RejectRule::*;

    let text = |i: usize| row.get(i).map(str::trim).filter(|s| !s.is_empty());
    let (Some(device_id), Some(trip_id)) = (text(cols.device_id), text(cols.trip_id)) else {
        return Parsed::Rejected(ParseError);
    };
    let fields = (
        parse_number(row.get(cols.timestamp)),
        parse_number(row.get(cols.latitude)),
        parse_number(row.get(cols.longitude)),
        parse_number(row.get(cols.speed)),
        parse_number(row.get(cols.heading)),
        parse_number(row.get(cols.accel_long)),
    );
    let (Some(timestamp), Some(latitude), Some(longitude), Some(speed), Some(heading), Some(accel_long)) =
        fields
    else {
        return Parsed::Rejected(ParseError);
    };
    let Ok(accel_lat) = parse_nullable(cols.accel_lat.and_then(|i| row.get(i))) else {
        return Parsed::Rejected(ParseError);
    };

    let (speed, accel_long, accel_lat) = match units {
        Units::Si => (speed, accel_long, accel_lat),
        Units::Us => (
            speed * MPH_TO_MPS,
            accel_long * FTPS2_TO_MPS2,
            accel_lat.map(|a| a * FTPS2_TO_MPS2),
        ),
    };

    let rule = if !(-90.0..=90.0).contains(&latitude) {
        Some(LatitudeRange)
    } else if !(-180.0..=180.0).contains(&longitude) {
        Some(LongitudeRange)
    } else if speed < 0.0 {
        Some(SpeedNegative)
    } else if speed > MAX_SPEED {
        Some(SpeedExcessive)
    } else if !(0.0..360.0).contains(&heading) {
        Some(HeadingRange)
    } else if accel_long.abs() > MAX_ACCEL_LONG {
        Some(AccelLongImplausible)
    } else {
        None
    };
    if let Some(rule) = rule {
        return Parsed::Rejected(rule);
    }

    let saturated = accel_lat.is_some_and(|a| a.abs() >= LATERAL_SATURATION);
    Parsed::Accepted {
        record: BsmRecord {
            device_id: device_id.to_string(),
            trip_id: trip_id.to_string(),
            timestamp,
            latitude,
            longitude,
            speed,
            heading,
            accel_long,
            accel_lat: if saturated { None } else { accel_lat },
        },
        saturated,
    }
}

/// Row-local validation of one file; chunks of rows are validated in parallel
/// and re-assembled in file order. Saturation flags travel with the records
/// and are only counted once the record survives every rule.
fn parse_stateless(path: &Path, schema: &Schema) -> Result<(Vec<(BsmRecord, bool)>, IngestAudit)> {
    let mut reader = open_delimited(path)?;
    let headers = reader.headers().map_err(|e| Error::csv(path, e))?.clone();
    let cols = ColumnIndex::resolve(&headers, schema)?;

    let mut records = Vec::new();
    let mut audit = IngestAudit::default();
    let mut chunk = Vec::with_capacity(CHUNK_ROWS);
    let mut rows = reader.records();
    loop {
        chunk.clear();
        for row in rows.by_ref().take(CHUNK_ROWS) {
            chunk.push(row.map_err(|e| Error::csv(path, e))?);
        }
        if chunk.is_empty() {
            break;
        }
        let parsed: Vec<Parsed> = chunk
            .par_iter()
            .map(|row| parse_row(row, &cols, schema.units))
            .collect();
        for item in parsed {
            audit.records_read += 1;
            match item {
                Parsed::Accepted { record, saturated } => records.push((record, saturated)),
                Parsed::Rejected(rule) => audit.add_reject(rule),
            }
        }
    }
    Ok((records, audit))
}

/// Rejects records whose timestamp does not strictly exceed the last
/// accepted timestamp of the same trip. Sequential, in stream order.
fn reject_timestamp_regressions(
    records: Vec<(BsmRecord, bool)>,
    audit: &mut IngestAudit,
) -> Vec<BsmRecord> {
    let mut last: HashMap<String, f64> = HashMap::new();
    let mut kept = Vec::with_capacity(records.len());
    for (record, saturated) in records {
        match last.get_mut(&record.trip_id) {
            Some(prev) if record.timestamp <= *prev => {
                audit.add_reject(RejectRule::TimestampRegression);
                continue;
            }
            Some(prev) => *prev = record.timestamp,
            None => {
                last.insert(record.trip_id.clone(), record.timestamp);
            }
        }
        audit.records_accepted += 1;
        audit.lateral_saturated += saturated as u64;
        kept.push(record);
    }
    kept
}

/// Parses one delimited BSM file into canonical records plus its audit.
pub fn parse_bsm_file(path: &Path, schema: &Schema) -> Result<(Vec<BsmRecord>, IngestAudit)> {
    parse_bsm_files(&[path.to_path_buf()], schema)
}

/// Parses several files (in parallel) and concatenates them in the given
/// order. Trip timestamp ordering is enforced across the concatenated stream.
pub fn parse_bsm_files(paths: &[PathBuf], schema: &Schema) -> Result<(Vec<BsmRecord>, IngestAudit)> {
    let parts: Vec<(Vec<(BsmRecord, bool)>, IngestAudit)> = paths
        .par_iter()
        .map(|p| parse_stateless(p, schema))
        .collect::<Result<_>>()?;

    let mut audit = IngestAudit::default();
    let mut records = Vec::new();
    for (part, part_audit) in parts {
        audit.merge(&part_audit);
        records.extend(part);
    }
    let records = reject_timestamp_regressions(records, &mut audit);
    Ok((records, audit))
}

/// Expands shell-style globs into a sorted, de-duplicated file list.
pub fn expand_inputs(patterns: &[String]) -> Result<Vec<PathBuf>> {
    let mut out = Vec::new();
    for pattern in patterns {
        let matches = glob::glob(pattern)
            .map_err(|e| Error::Config(format!("bad input pattern '{pattern}': {e}")))?;
        let mut found = false;
        for entry in matches {
            let path = entry.map_err(|e| Error::io(e.path().to_path_buf(), e.into()))?;
            out.push(path);
            found = true;
        }
        if !found {
            return Err(Error::io(
                pattern,
                std::io::Error::new(std::io::ErrorKind::NotFound, "no files match"),
            ));
        }
    }
    out.sort();
    out.dedup();
    Ok(out)
}

/// Timestamps of interior records whose reported longitudinal acceleration
/// disagrees with the central finite difference of speed by more than
/// `tolerance` (m/s²). Trips shorter than three records yield no flags.
pub fn check_accel_consistency(trip: &[BsmRecord], tolerance: f64) -> Vec<f64> {
    consistency_flags(trip, tolerance)
        .into_iter()
        .map(|i| trip[i].timestamp)
        .collect()
}

fn consistency_flags(trip: &[BsmRecord], tolerance: f64) -> Vec<usize> {
    if trip.len() < 3 {
        return Vec::new();
    }
    trip.windows(3)
        .enumerate()
        .filter_map(|(i, w)| {
            let dt = w[2].timestamp - w[0].timestamp;
            let estimated = (w[2].speed - w[0].speed) / dt;
            ((estimated - w[1].accel_long).abs() > tolerance).then_some(i + 1)
        })
        .collect()
}

/// Runs the consistency check over every trip in a stream (trips are the
/// records sharing a `trip_id`, in stream order). Returns indices into
/// `records` of flagged rows, ascending.
pub fn flag_inconsistent(records: &[BsmRecord], tolerance: f64) -> Vec<usize> {
    let mut trips: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
    for (i, r) in records.iter().enumerate() {
        trips.entry(r.trip_id.as_str()).or_default().push(i);
    }
    let mut flagged: Vec<usize> = trips
        .into_par_iter()
        .flat_map_iter(|(_, idx)| {
            let trip: Vec<BsmRecord> = idx.iter().map(|&i| records[i].clone()).collect();
            consistency_flags(&trip, tolerance)
                .into_iter()
                .map(move |k| idx[k])
                .collect::<Vec<_>>()
        })
        .collect();
    flagged.sort_unstable();
    flagged
}

/// Applies the consistency check to an accepted stream, updating the audit.
/// With `drop_flagged`, flagged records move to the `accel_inconsistent`
/// reject rule; otherwise they are only counted.
pub fn apply_consistency_check(
    records: Vec<BsmRecord>,
    audit: &mut IngestAudit,
    tolerance: f64,
    drop_flagged: bool,
) -> Vec<BsmRecord> {
    let flagged = flag_inconsistent(&records, tolerance);
    audit.consistency_flagged += flagged.len() as u64;
    if !drop_flagged || flagged.is_empty() {
        return records;
    }
    let mut drop = vec![false; records.len()];
    for i in flagged {
        drop[i] = true;
    }
    records
        .into_iter()
        .zip(drop)
        .filter_map(|(r, d)| {
            if d {
                audit.records_accepted -= 1;
                audit.add_reject(RejectRule::AccelInconsistent);
                None
            } else {
                Some(r)
            }
        })
        .collect()
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

/// Writes the canonical record stream (comma-delimited, canonical headers).
pub fn write_records(path: &Path, records: &[BsmRecord]) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = std::io::BufWriter::new(file);
    let io = |e| Error::io(path, e);
    writeln!(
        w,
        "device_id,trip_id,timestamp,latitude,longitude,speed,heading,accel_long,accel_lat"
    )
    .map_err(io)?;
    for r in records {
        writeln!(
            w,
            "{},{},{},{},{},{},{},{},{}",
            r.device_id,
            r.trip_id,
            r.timestamp,
            r.latitude,
            r.longitude,
            r.speed,
            r.heading,
            r.accel_long,
            fmt_opt(r.accel_lat)
        )
        .map_err(io)?;
    }
    w.flush().map_err(io)
}
