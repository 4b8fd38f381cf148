use std::path::Path;
use std::str::FromStr;

use serde::Serialize;

use crate::error::{Error, Result};
use crate::eval::TransferCell;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReportFormat {
    Csv,
    Json,
}

impl FromStr for ReportFormat {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "csv" => Ok(ReportFormat::Csv),
            "json" => Ok(ReportFormat::Json),
            _ => Err(Error::invalid(format!("unknown report format {s:?} (expected csv or json)"))),
        }
    }
}

impl ReportFormat {
    pub fn extension(self) -> &'static str {
        match self {
            ReportFormat::Csv => "csv",
            ReportFormat::Json => "json",
        }
    }
}

/// A flat record with a fixed column order; `FIELDS` must match the
/// serialized field order.
pub trait ReportRecord: Serialize {
    const FIELDS: &'static [&'static str];
}

/// One transfer report row: a cell at one checkpoint.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TransferRow {
    pub surrogate: String,
    pub victim: String,
    pub attack: String,
    pub checkpoint: usize,
    pub tasr: f64,
    pub n_images: usize,
    pub seed: u64,
}

impl ReportRecord for TransferRow {
    const FIELDS: &'static [&'static str] = &["surrogate", "victim", "attack", "checkpoint", "tasr", "n_images", "seed"];
}

/// Expand cells into one row per checkpoint, keeping cell order.
pub fn transfer_rows(cells: &[TransferCell]) -> Vec<TransferRow> {
    cells
        .iter()
        .flat_map(|c| {
            c.checkpoints.iter().zip(&c.tasr).map(|(&checkpoint, &tasr)| TransferRow {
                surrogate: c.surrogate.clone(),
                victim: c.victim.clone(),
                attack: c.attack.clone(),
                checkpoint,
                tasr,
                n_images: c.n_images,
                seed: c.seed,
            })
        })
        .collect()
}

pub fn render_report<R: ReportRecord>(records: &[R], format: ReportFormat) -> Result<Vec<u8>> {
    match format {
        ReportFormat::Csv => {
            let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(Vec::new());
            let wrap = |e: csv::Error| Error::invalid(format!("CSV serialization failed: {e}"));
            w.write_record(R::FIELDS).map_err(wrap)?;
            for r in records {
                w.serialize(r).map_err(wrap)?;
            }
            w.into_inner().map_err(|e| Error::invalid(format!("CSV flush failed: {e}")))
        }
        ReportFormat::Json => {
            let mut out = serde_json::to_vec_pretty(records)
                .map_err(|e| Error::invalid(format!("JSON serialization failed: {e}")))?;
            out.push(b'\n');
            Ok(out)
        }
    }
}

/// Write records as CSV (header row, then one row per record) or as a JSON array.
pub fn emit_report<R: ReportRecord>(records: &[R], format: ReportFormat, path: &Path) -> Result<()> {
    let bytes = render_report(records, format)?;
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}
