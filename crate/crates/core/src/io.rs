//! Unit-record files (CSV and JSONL), analysis configuration and simulated
//! suite directories.
//!
//! CSV header, exact: `unit_id,variant,numerator,denominator,pre_numerator,
//! pre_denominator,f0,...,f{d-1}`. Missing pre-period values are empty cells.
//! JSONL uses the same names as object keys, with `null` for missing values.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use crate::data::{Experiment, UnitRecord};
use crate::error::{Error, Result};
use crate::ratio::RatioMetricSpec;
use crate::sim::{EffectDistribution, SimConfig, SimulatedExperiment};
use crate::vr::VrConfig;
use crate::{SCHEMA_MAJOR, SCHEMA_VERSION};

const BASE_COLUMNS: [&str; 6] = [
    "unit_id",
    "variant",
    "numerator",
    "denominator",
    "pre_numerator",
    "pre_denominator",
];

pub const DEFAULT_REJECT_THRESHOLD: f64 = 0.01;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum Format {
    Csv,
    Jsonl,
}

impl Format {
    pub fn from_path(path: &Path) -> Option<Self> {
        match path.extension()?.to_str()? {
            "csv" => Some(Format::Csv),
            "jsonl" | "ndjson" => Some(Format::Jsonl),
            _ => None,
        }
    }

    pub fn extension(self) -> &'static str {
        match self {
            Format::Csv => "csv",
            Format::Jsonl => "jsonl",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Rejection {
    pub line: usize,
    pub reason: String,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ValidationReport {
    pub rows_read: usize,
    pub rows_rejected: usize,
    pub rejections: Vec<Rejection>,
}

impl ValidationReport {
    fn reject(&mut self, line: usize, reason: impl Into<String>) {
        self.rows_rejected += 1;
        self.rejections.push(Rejection {
            line,
            reason: reason.into(),
        });
    }
}

#[derive(Debug, Clone)]
pub struct IngestOptions<'a> {
    /// Enforces the metric's per-unit component bound when given.
    pub metric: Option<&'a RatioMetricSpec>,
    /// Maximum tolerated share of rejected rows.
    pub reject_threshold: f64,
}

impl Default for IngestOptions<'_> {
    fn default() -> Self {
        Self {
            metric: None,
            reject_threshold: DEFAULT_REJECT_THRESHOLD,
        }
    }
}

#[derive(Debug, Clone)]
pub struct Ingested {
    pub records: Vec<UnitRecord>,
    pub report: ValidationReport,
}

fn parse_real(cell: &str, name: &str) -> std::result::Result<f64, String> {
    cell.trim()
        .parse::<f64>()
        .map_err(|_| format!("{name}: cannot parse '{cell}'"))
}

fn parse_optional(cell: &str, name: &str) -> std::result::Result<Option<f64>, String> {
    if cell.trim().is_empty() {
        Ok(None)
    } else {
        parse_real(cell, name).map(Some)
    }
}

fn csv_header(n_features: usize) -> Vec<String> {
    BASE_COLUMNS
        .iter()
        .map(|s| s.to_string())
        .chain((0..n_features).map(|j| format!("f{j}")))
        .collect()
}

fn csv_error(path: &Path, e: csv::Error) -> Error {
    Error::Format {
        path: path.to_path_buf(),
        message: e.to_string(),
    }
}

fn ingest_csv(path: &Path, opts: &IngestOptions<'_>, report: &mut ValidationReport) -> Result<Vec<UnitRecord>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut reader = csv::ReaderBuilder::new().flexible(true).from_reader(BufReader::new(file));
    let header = reader.headers().map_err(|e| csv_error(path, e))?.clone();
    let n_features = header.len().saturating_sub(BASE_COLUMNS.len());
    let expected = csv_header(n_features);
    if header.iter().ne(expected.iter().map(String::as_str)) {
        return Err(Error::Format {
            path: path.to_path_buf(),
            message: format!("header must be '{}'", expected.join(",")),
        });
    }

    let mut records = Vec::new();
    for (i, row) in reader.records().enumerate() {
        let line = i + 2;
        report.rows_read += 1;
        let row = match row {
            Ok(r) => r,
            Err(e) => {
                report.reject(line, e.to_string());
                continue;
            }
        };
        match csv_record(&row, n_features).and_then(|r| r.validate(opts.metric).map(|_| r)) {
            Ok(r) => records.push(r),
            Err(reason) => report.reject(line, reason),
        }
    }
    Ok(records)
}

fn csv_record(row: &csv::StringRecord, n_features: usize) -> std::result::Result<UnitRecord, String> {
    if row.len() != BASE_COLUMNS.len() + n_features {
        return Err(format!(
            "expected {} fields, found {}",
            BASE_COLUMNS.len() + n_features,
            row.len()
        ));
    }
    let features = (0..n_features)
        .map(|j| parse_real(&row[6 + j], &format!("f{j}")))
        .collect::<std::result::Result<Vec<_>, _>>()?;
    Ok(UnitRecord {
        unit_id: row[0].to_string(),
        variant: row[1].to_string(),
        numerator: parse_real(&row[2], "numerator")?,
        denominator: parse_real(&row[3], "denominator")?,
        pre_numerator: parse_optional(&row[4], "pre_numerator")?,
        pre_denominator: parse_optional(&row[5], "pre_denominator")?,
        features,
    })
}

fn json_record(value: &Value, n_features: &mut Option<usize>) -> std::result::Result<UnitRecord, String> {
    let obj = value.as_object().ok_or("not a JSON object")?;
    let string = |k: &str| -> std::result::Result<String, String> {
        obj.get(k)
            .and_then(Value::as_str)
            .map(str::to_string)
            .ok_or_else(|| format!("{k}: missing or not a string"))
    };
    let real = |k: &str| -> std::result::Result<f64, String> {
        obj.get(k)
            .and_then(Value::as_f64)
            .ok_or_else(|| format!("{k}: missing or not a number"))
    };
    let optional = |k: &str| -> std::result::Result<Option<f64>, String> {
        match obj.get(k) {
            None | Some(Value::Null) => Ok(None),
            Some(v) => v.as_f64().map(Some).ok_or_else(|| format!("{k}: not a number")),
        }
    };
    let d = obj.keys().filter(|k| feature_index(k).is_some()).count();
    match n_features {
        Some(expected) if *expected != d => {
            return Err(format!("expected {expected} features, found {d}"));
        }
        None => *n_features = Some(d),
        _ => {}
    }
    for k in obj.keys() {
        if !BASE_COLUMNS.contains(&k.as_str()) && feature_index(k).map_or(true, |j| j >= d) {
            return Err(format!("unexpected key '{k}'"));
        }
    }
    Ok(UnitRecord {
        unit_id: string("unit_id")?,
        variant: string("variant")?,
        numerator: real("numerator")?,
        denominator: real("denominator")?,
        pre_numerator: optional("pre_numerator")?,
        pre_denominator: optional("pre_denominator")?,
        features: (0..d).map(|j| real(&format!("f{j}"))).collect::<std::result::Result<_, _>>()?,
    })
}

fn feature_index(key: &str) -> Option<usize> {
    let digits = key.strip_prefix('f')?;
    if digits.is_empty() || !digits.bytes().all(|b| b.is_ascii_digit()) {
        return None;
    }
    digits.parse().ok()
}

fn ingest_jsonl(path: &Path, opts: &IngestOptions<'_>, report: &mut ValidationReport) -> Result<Vec<UnitRecord>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut records = Vec::new();
    let mut n_features = None;
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line_no = i + 1;
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        report.rows_read += 1;
        let parsed = serde_json::from_str::<Value>(&line)
            .map_err(|e| e.to_string())
            .and_then(|v| json_record(&v, &mut n_features))
            .and_then(|r| r.validate(opts.metric).map(|_| r));
        match parsed {
            Ok(r) => records.push(r),
            Err(reason) => report.reject(line_no, reason),
        }
    }
    Ok(records)
}

/// Reads and validates unit records. Malformed rows are rejected and
/// reported; the call fails when the rejected share exceeds the threshold.
pub fn ingest(path: &Path, format: Format, opts: &IngestOptions<'_>) -> Result<Ingested> {
    let mut report = ValidationReport::default();
    let records = match format {
        Format::Csv => ingest_csv(path, opts, &mut report)?,
        Format::Jsonl => ingest_jsonl(path, opts, &mut report)?,
    };
    if report.rows_read > 0 && report.rows_rejected as f64 > opts.reject_threshold * report.rows_read as f64 {
        return Err(Error::TooManyRejects {
            path: path.to_path_buf(),
            read: report.rows_read,
            rejected: report.rows_rejected,
            threshold: opts.reject_threshold,
        });
    }
    Ok(Ingested { records, report })
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

pub fn write_units(path: &Path, records: &[UnitRecord], format: Format) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut out = BufWriter::new(file);
    let d = records.first().map_or(0, |r| r.features.len());
    if records.iter().any(|r| r.features.len() != d) {
        return Err(Error::config("records disagree on the feature count"));
    }
    match format {
        Format::Csv => {
            let mut writer = csv::Writer::from_writer(out);
            writer.write_record(csv_header(d)).map_err(|e| csv_error(path, e))?;
            for r in records {
                let mut row = vec![
                    r.unit_id.clone(),
                    r.variant.clone(),
                    r.numerator.to_string(),
                    r.denominator.to_string(),
                    fmt_opt(r.pre_numerator),
                    fmt_opt(r.pre_denominator),
                ];
                row.extend(r.features.iter().map(f64::to_string));
                writer.write_record(&row).map_err(|e| csv_error(path, e))?;
            }
            writer.flush().map_err(|e| Error::io(path, e))?;
        }
        Format::Jsonl => {
            for r in records {
                let mut obj = Map::new();
                obj.insert("unit_id".into(), r.unit_id.clone().into());
                obj.insert("variant".into(), r.variant.clone().into());
                obj.insert("numerator".into(), r.numerator.into());
                obj.insert("denominator".into(), r.denominator.into());
                obj.insert("pre_numerator".into(), r.pre_numerator.map_or(Value::Null, Value::from));
                obj.insert("pre_denominator".into(), r.pre_denominator.map_or(Value::Null, Value::from));
                for (j, f) in r.features.iter().enumerate() {
                    obj.insert(format!("f{j}"), (*f).into());
                }
                serde_json::to_writer(&mut out, &Value::Object(obj))?;
                out.write_all(b"\n").map_err(|e| Error::io(path, e))?;
            }
            out.flush().map_err(|e| Error::io(path, e))?;
        }
    }
    Ok(())
}

/// Rejects documents whose `schema_version` has an unsupported major part.
pub fn check_schema_version(version: &str) -> Result<()> {
    let major = version.split('.').next().and_then(|m| m.parse::<u32>().ok());
    if major == Some(SCHEMA_MAJOR) {
        Ok(())
    } else {
        Err(Error::SchemaVersion {
            found: version.to_string(),
            supported: SCHEMA_MAJOR,
        })
    }
}

fn default_schema() -> String {
    SCHEMA_VERSION.to_string()
}

fn default_alpha() -> f64 {
    0.05
}

fn default_control() -> String {
    crate::sim::CONTROL.to_string()
}

fn default_threshold() -> f64 {
    DEFAULT_REJECT_THRESHOLD
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnalysisConfig {
    #[serde(default = "default_schema")]
    pub schema_version: String,
    #[serde(default = "RatioMetricSpec::retention")]
    pub metric: RatioMetricSpec,
    #[serde(default = "default_control")]
    pub control_variant: String,
    #[serde(default)]
    pub vr: VrConfig,
    #[serde(default = "default_alpha")]
    pub alpha: f64,
    #[serde(default)]
    pub input: Option<PathBuf>,
    #[serde(default)]
    pub format: Option<Format>,
    #[serde(default)]
    pub output: Option<PathBuf>,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_threshold")]
    pub reject_threshold: f64,
}

impl Default for AnalysisConfig {
    fn default() -> Self {
        Self {
            schema_version: default_schema(),
            metric: RatioMetricSpec::retention(),
            control_variant: default_control(),
            vr: VrConfig::default(),
            alpha: default_alpha(),
            input: None,
            format: None,
            output: None,
            seed: 0,
            reject_threshold: DEFAULT_REJECT_THRESHOLD,
        }
    }
}

impl AnalysisConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let config: AnalysisConfig = serde_json::from_str(&text)?;
        config.validate()?;
        Ok(config)
    }

    pub fn validate(&self) -> Result<()> {
        check_schema_version(&self.schema_version)?;
        if !(self.alpha > 0.0 && self.alpha < 1.0) {
            return Err(Error::config("alpha must lie in (0, 1)"));
        }
        if !(0.0..=1.0).contains(&self.reject_threshold) {
            return Err(Error::config("reject_threshold must lie in [0, 1]"));
        }
        if self.control_variant.is_empty() {
            return Err(Error::config("control_variant must be set"));
        }
        self.metric.validate()?;
        self.vr.validate()
    }
}

pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub id: String,
    pub file: String,
    pub seed: u64,
    pub true_effect: Option<f64>,
    pub control: String,
    pub treatment: String,
    pub clamped_units: usize,
}

/// Describes a directory of simulated experiment files.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SuiteManifest {
    pub schema_version: String,
    pub generator: SimConfig,
    pub effects: EffectDistribution,
    pub master_seed: u64,
    pub format: Format,
    pub experiments: Vec<ManifestEntry>,
}

pub fn write_suite(
    dir: &Path,
    suite: &[SimulatedExperiment],
    generator: &SimConfig,
    effects: EffectDistribution,
    master_seed: u64,
    format: Format,
) -> Result<SuiteManifest> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut experiments = Vec::with_capacity(suite.len());
    for sim in suite {
        let e = &sim.experiment;
        let file = format!("{}.{}", e.id, format.extension());
        write_units(&dir.join(&file), &e.units, format)?;
        experiments.push(ManifestEntry {
            id: e.id.clone(),
            file,
            seed: sim.seed,
            true_effect: e.true_effect,
            control: e.control.clone(),
            treatment: e.treatment.clone(),
            clamped_units: sim.clamped_units,
        });
    }
    let manifest = SuiteManifest {
        schema_version: SCHEMA_VERSION.to_string(),
        generator: SimConfig { seed: master_seed, ..generator.clone() },
        effects,
        master_seed,
        format,
        experiments,
    };
    let path = dir.join(MANIFEST_FILE);
    let mut text = serde_json::to_string_pretty(&manifest)?;
    text.push('\n');
    std::fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
    Ok(manifest)
}

/// Loads every experiment listed in a suite directory's manifest.
pub fn read_suite(dir: &Path, opts: &IngestOptions<'_>) -> Result<Vec<Experiment>> {
    let path = dir.join(MANIFEST_FILE);
    let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let manifest: SuiteManifest = serde_json::from_str(&text)?;
    check_schema_version(&manifest.schema_version)?;
    manifest
        .experiments
        .iter()
        .map(|entry| {
            let ingested = ingest(&dir.join(&entry.file), manifest.format, opts)?;
            let mut exp = Experiment::from_units(entry.id.clone(), ingested.records, &entry.control)?;
            exp.true_effect = entry.true_effect;
            Ok(exp)
        })
        .collect()
}

/// Reads a day-level activity file: `unit_id,variant,d0,...,d{n-1}` with
/// 0/1 flags.
pub fn read_activity(path: &Path) -> Result<Vec<(String, crate::ratio::DailyActivity)>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut reader = csv::Reader::from_reader(BufReader::new(file));
    let header = reader.headers().map_err(|e| csv_error(path, e))?.clone();
    let days = header.len().saturating_sub(2);
    let well_formed = header.get(0) == Some("unit_id")
        && header.get(1) == Some("variant")
        && (0..days).all(|j| header.get(2 + j) == Some(format!("d{j}").as_str()));
    if !well_formed {
        return Err(Error::Format {
            path: path.to_path_buf(),
            message: "header must be 'unit_id,variant,d0,...,d{n-1}'".into(),
        });
    }
    let mut out = Vec::new();
    for (i, row) in reader.records().enumerate() {
        let row = row.map_err(|e| csv_error(path, e))?;
        let active = (0..days)
            .map(|j| match row.get(2 + j).map(str::trim) {
                Some("1") => Ok(true),
                Some("0") => Ok(false),
                other => Err(Error::Format {
                    path: path.to_path_buf(),
                    message: format!("line {}: bad activity flag {:?}", i + 2, other),
                }),
            })
            .collect::<Result<Vec<bool>>>()?;
        out.push((
            row[1].to_string(),
            crate::ratio::DailyActivity {
                unit_id: row[0].to_string(),
                active,
            },
        ));
    }
    Ok(out)
}
