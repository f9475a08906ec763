//! CSV reports with one row per (model, attack, setting, metric).

use std::path::Path;

use serde::Serialize;

use crate::error::{Error, Result};

pub const REPORT_HEADER: [&str; 5] = ["model", "attack", "setting", "metric", "value"];

#[derive(Debug, Clone, PartialEq)]
pub struct ReportRow {
    pub model: String,
    pub attack: String,
    pub setting: Option<f64>,
    pub metric: String,
    /// `None` is written as `NA`.
    pub value: Option<f64>,
}

impl ReportRow {
    pub fn new(
        model: impl Into<String>,
        attack: impl Into<String>,
        setting: Option<f64>,
        metric: impl Into<String>,
        value: Option<f64>,
    ) -> Self {
        Self {
            model: model.into(),
            attack: attack.into(),
            setting,
            metric: metric.into(),
            value,
        }
    }
}

fn cell(v: Option<f64>) -> String {
    match v {
        Some(v) if v.is_finite() => format!("{v}"),
        _ => "NA".to_string(),
    }
}

/// CSV text of `rows` in the given order.
pub fn report_csv(rows: &[ReportRow]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    let fail = |e: csv::Error| Error::InvalidArgument(format!("report encoding: {e}"));
    w.write_record(REPORT_HEADER).map_err(fail)?;
    for r in rows {
        w.write_record([
            r.model.as_str(),
            r.attack.as_str(),
            &cell(r.setting),
            r.metric.as_str(),
            &cell(r.value),
        ])
        .map_err(fail)?;
    }
    let bytes = w
        .into_inner()
        .map_err(|e| Error::InvalidArgument(format!("report encoding: {e}")))?;
    Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
}

pub fn write_report(path: &Path, rows: &[ReportRow]) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    std::fs::write(path, report_csv(rows)?).map_err(|e| Error::io(path, e))
}

/// Reads a report written by [`write_report`].
pub fn read_report(path: &Path) -> Result<Vec<ReportRow>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let bad = |reason: String| Error::Format {
        path: path.to_path_buf(),
        reason,
    };
    let mut r = csv::Reader::from_reader(text.as_bytes());
    let header = r.headers().map_err(|e| bad(e.to_string()))?.clone();
    if header.iter().ne(REPORT_HEADER) {
        return Err(bad(format!("unexpected header {header:?}")));
    }
    let parse = |s: &str| -> Result<Option<f64>> {
        if s == "NA" {
            Ok(None)
        } else {
            s.parse().map(Some).map_err(|_| bad(format!("bad number {s:?}")))
        }
    };
    r.records()
        .map(|rec| {
            let rec = rec.map_err(|e| bad(e.to_string()))?;
            Ok(ReportRow {
                model: rec[0].to_string(),
                attack: rec[1].to_string(),
                setting: parse(&rec[2])?,
                metric: rec[3].to_string(),
                value: parse(&rec[4])?,
            })
        })
        .collect()
}

/// Run metadata kept out of the CSV so reports stay byte-identical.
#[derive(Debug, Clone, Serialize)]
pub struct RunMetadata {
    pub tool_version: String,
    pub seed: u64,
    pub jobs: usize,
    pub elapsed_seconds: f64,
    pub artifacts: Vec<String>,
}

pub fn write_metadata(path: &Path, meta: &RunMetadata) -> Result<()> {
    let text = serde_json::to_string_pretty(meta)?;
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}
