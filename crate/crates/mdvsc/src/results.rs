//! Result and baseline CSV files.
//!
//! Result rows follow `clip_id, gop_index, cbr, snr_db, psnr_db, ms_ssim,
//! ms_ssim_db, seed`. Infinite values are written as `inf`.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const RESULT_COLUMNS: [&str; 8] = ["clip_id", "gop_index", "cbr", "snr_db", "psnr_db", "ms_ssim", "ms_ssim_db", "seed"];
pub const BASELINE_COLUMNS: [&str; 5] = ["label", "cbr", "snr_db", "psnr_db", "ms_ssim"];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ResultRow {
    pub clip_id: String,
    pub gop_index: usize,
    pub cbr: f64,
    pub snr_db: f64,
    pub psnr_db: f64,
    pub ms_ssim: f64,
    pub ms_ssim_db: f64,
    pub seed: u64,
}

impl ResultRow {
    fn sort_key(&self) -> (f64, f64, u64, &str, usize) {
        (self.cbr, self.snr_db, self.seed, &self.clip_id, self.gop_index)
    }
}

/// Orders rows by `(cbr, snr_db, seed)`, then clip and GOP.
pub fn sort_rows(rows: &mut [ResultRow]) {
    rows.sort_by(|a, b| {
        let (ka, kb) = (a.sort_key(), b.sort_key());
        ka.0.total_cmp(&kb.0).then(ka.1.total_cmp(&kb.1)).then(ka.2.cmp(&kb.2)).then(ka.3.cmp(kb.3)).then(ka.4.cmp(&kb.4))
    });
}

fn csv_error(path: &Path) -> impl Fn(csv::Error) -> Error + '_ {
    move |e| Error::Csv { path: path.into(), message: e.to_string() }
}

pub fn write_rows<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(Error::io(dir))?;
    }
    let mut w = csv::Writer::from_path(path).map_err(csv_error(path))?;
    for r in rows {
        w.serialize(r).map_err(csv_error(path))?;
    }
    w.flush().map_err(Error::io(path))
}

fn check_columns(path: &Path, headers: &csv::StringRecord, expected: &[&str]) -> Result<()> {
    let present: Vec<&str> = headers.iter().map(str::trim).collect();
    let missing: Vec<&str> = expected.iter().copied().filter(|c| !present.contains(c)).collect();
    let unexpected: Vec<&str> = present.iter().copied().filter(|c| !expected.contains(c)).collect();
    if missing.is_empty() && unexpected.is_empty() {
        return Ok(());
    }
    let mut parts = Vec::new();
    if !missing.is_empty() {
        parts.push(format!("missing columns: {}", missing.join(", ")));
    }
    if !unexpected.is_empty() {
        parts.push(format!("unexpected columns: {}", unexpected.join(", ")));
    }
    Err(Error::Csv { path: path.into(), message: format!("schema mismatch; {}", parts.join("; ")) })
}

pub fn read_results(path: &Path) -> Result<Vec<ResultRow>> {
    let mut r = csv::ReaderBuilder::new().trim(csv::Trim::All).from_path(path).map_err(csv_error(path))?;
    check_columns(path, &r.headers().map_err(csv_error(path))?.clone(), &RESULT_COLUMNS)?;
    r.deserialize().collect::<Result<_, _>>().map_err(csv_error(path))
}

/// One point of an externally produced reference curve.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BaselinePoint {
    pub label: String,
    pub cbr: f64,
    pub snr_db: f64,
    pub psnr_db: f64,
    pub ms_ssim: f64,
}

impl BaselinePoint {
    fn validate(&self) -> std::result::Result<(), String> {
        if self.label.trim().is_empty() {
            return Err("empty label".into());
        }
        if !(self.cbr.is_finite() && self.cbr > 0.0) {
            return Err(format!("cbr must be positive, got {}", self.cbr));
        }
        if self.snr_db.is_nan() {
            return Err("snr_db is NaN".into());
        }
        if self.psnr_db.is_nan() {
            return Err("psnr_db is NaN".into());
        }
        if !(0.0..=1.0).contains(&self.ms_ssim) {
            return Err(format!("ms_ssim must lie in [0, 1], got {}", self.ms_ssim));
        }
        Ok(())
    }
}

/// Reads and validates a baseline CSV. Row numbers in errors count data
/// rows from 1.
pub fn read_baseline(path: &Path) -> Result<Vec<BaselinePoint>> {
    let mut r = csv::ReaderBuilder::new().trim(csv::Trim::All).from_path(path).map_err(csv_error(path))?;
    check_columns(path, &r.headers().map_err(csv_error(path))?.clone(), &BASELINE_COLUMNS)?;
    let mut points = Vec::new();
    for (i, rec) in r.deserialize::<BaselinePoint>().enumerate() {
        let row = i + 1;
        let p = rec.map_err(|e| Error::Csv { path: path.into(), message: format!("row {row}: {e}") })?;
        p.validate().map_err(|m| Error::Csv { path: path.into(), message: format!("row {row}: {m}") })?;
        points.push(p);
    }
    Ok(points)
}

/// Failed sweep cell.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FailureRow {
    pub cbr: f64,
    pub snr_db: f64,
    pub seed: u64,
    pub clip_id: String,
    pub error: String,
}
