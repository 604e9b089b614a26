//! CSV and JSON serialization of experiment traces.

use std::io::Write;

use crate::experiment::{ExperimentResult, HarnessError, TraceRecord};

pub const CSV_HEADER: [&str; 11] = [
    "variant",
    "seed",
    "stage",
    "grad_evals",
    "effective_passes",
    "train_objective",
    "test_error",
    "batch_size",
    "error_norm",
    "wall_time_ms",
    "status",
];

fn float(v: f64) -> String {
    format!("{v:.16e}")
}

fn optional(v: Option<f64>) -> String {
    v.map(float).unwrap_or_default()
}

fn csv_error(e: csv::Error) -> HarnessError {
    HarnessError::Output(e.to_string())
}

/// Writes one row per record. Floats use 17 significant digits, so the
/// text determines every value exactly; absent values are empty fields.
pub fn write_csv<W: Write>(records: &[TraceRecord], writer: W) -> Result<(), HarnessError> {
    if records.is_empty() {
        return Err(HarnessError::Output("no trace records to write".into()));
    }
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(CSV_HEADER).map_err(csv_error)?;
    for r in records {
        w.write_record([
            r.variant.clone(),
            r.seed.to_string(),
            r.stage.to_string(),
            r.grad_evals.to_string(),
            float(r.effective_passes),
            float(r.train_objective),
            optional(r.test_error),
            r.batch_size.to_string(),
            optional(r.error_norm),
            optional(r.wall_time_ms),
            r.status.as_str().to_string(),
        ])
        .map_err(csv_error)?;
    }
    w.flush()?;
    Ok(())
}

pub fn csv_string(records: &[TraceRecord]) -> Result<String, HarnessError> {
    let mut buf = Vec::new();
    write_csv(records, &mut buf)?;
    Ok(String::from_utf8(buf).expect("csv output is utf-8"))
}

pub fn write_json<W: Write>(result: &ExperimentResult, writer: W) -> Result<(), HarnessError> {
    if result.records.is_empty() {
        return Err(HarnessError::Output("no trace records to write".into()));
    }
    serde_json::to_writer_pretty(writer, result).map_err(|e| HarnessError::Output(e.to_string()))
}

pub fn json_string(result: &ExperimentResult) -> Result<String, HarnessError> {
    let mut buf = Vec::new();
    write_json(result, &mut buf)?;
    Ok(String::from_utf8(buf).expect("json output is utf-8"))
}

pub fn read_json(text: &str) -> Result<ExperimentResult, HarnessError> {
    serde_json::from_str(text).map_err(|e| HarnessError::Output(e.to_string()))
}
