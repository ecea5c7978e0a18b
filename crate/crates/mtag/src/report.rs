//! CSV and JSON emission of aggregate matrices and bar summaries.

use std::fs;
use std::io;
use std::path::{Path, PathBuf};

use mtag_core::analysis::{AggregateMatrix, BarSummary};

#[derive(Debug, thiserror::Error)]
pub enum ReportError {
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: io::Error,
    },
    #[error("{path}: {source}")]
    Csv {
        path: String,
        #[source]
        source: csv::Error,
    },
    #[error("{path}: {message}")]
    Format { path: String, message: String },
}

fn csv_err(path: &Path) -> impl Fn(csv::Error) -> ReportError + '_ {
    move |source| ReportError::Csv {
        path: path.display().to_string(),
        source,
    }
}

fn cell(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

/// Header `source,<targets...>`; one row per source; absent cells blank.
pub fn write_aggregate_csv(path: &Path, agg: &AggregateMatrix) -> Result<(), ReportError> {
    let mut w = csv::Writer::from_path(path).map_err(csv_err(path))?;
    let mut header = vec!["source".to_string()];
    header.extend(agg.datasets.iter().cloned());
    w.write_record(&header).map_err(csv_err(path))?;
    for (s, row) in agg.cells.iter().enumerate() {
        let mut rec = vec![agg.datasets[s].clone()];
        rec.extend(row.iter().map(|&v| cell(v)));
        w.write_record(&rec).map_err(csv_err(path))?;
    }
    w.flush().map_err(|source| ReportError::Io {
        path: path.display().to_string(),
        source,
    })
}

pub fn read_aggregate_csv(path: &Path) -> Result<AggregateMatrix, ReportError> {
    let format = |message: String| ReportError::Format {
        path: path.display().to_string(),
        message,
    };
    let mut r = csv::Reader::from_path(path).map_err(csv_err(path))?;
    let header = r.headers().map_err(csv_err(path))?.clone();
    let datasets: Vec<String> = header.iter().skip(1).map(str::to_string).collect();
    let mut cells = Vec::new();
    for (i, rec) in r.records().enumerate() {
        let rec = rec.map_err(csv_err(path))?;
        if rec.get(0) != datasets.get(i).map(String::as_str) {
            return Err(format(format!(
                "row {} is not source `{}`",
                i + 1,
                datasets.get(i).map_or("", |s| s)
            )));
        }
        let row = rec
            .iter()
            .skip(1)
            .map(|v| match v.trim() {
                "" => Ok(None),
                x => x
                    .parse::<f64>()
                    .map(Some)
                    .map_err(|e| format(format!("row {}: {e}", i + 1))),
            })
            .collect::<Result<Vec<_>, _>>()?;
        cells.push(row);
    }
    if cells.len() != datasets.len() {
        return Err(format(format!("{} rows for {} datasets", cells.len(), datasets.len())));
    }
    Ok(AggregateMatrix { datasets, cells })
}

/// Long format `target,source,score` plus a `single_domain` reference row
/// per target when available.
pub fn write_bars_csv(path: &Path, bars: &BarSummary) -> Result<(), ReportError> {
    let mut w = csv::Writer::from_path(path).map_err(csv_err(path))?;
    w.write_record(["target", "source", "score"]).map_err(csv_err(path))?;
    for (t, target) in bars.datasets.iter().enumerate() {
        for (s, source) in bars.datasets.iter().enumerate() {
            if let Some(v) = bars.bars[t][s] {
                w.write_record([target.as_str(), source.as_str(), &v.to_string()])
                    .map_err(csv_err(path))?;
            }
        }
        if let Some(v) = bars.single_domain[t] {
            w.write_record([target.as_str(), "single_domain", &v.to_string()])
                .map_err(csv_err(path))?;
        }
    }
    w.flush().map_err(|source| ReportError::Io {
        path: path.display().to_string(),
        source,
    })
}

/// Writes `aggregate_matrix.{csv,json}` and `bars_<policy>.{csv,json}` into
/// `dir`, returning the paths written.
pub fn emit_analysis(dir: &Path, agg: &AggregateMatrix, bars: &[BarSummary]) -> Result<Vec<PathBuf>, ReportError> {
    let io_err = |path: &Path| {
        let path = path.display().to_string();
        move |source| ReportError::Io { path, source }
    };
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    let mut written = Vec::new();
    let p = dir.join("aggregate_matrix.csv");
    write_aggregate_csv(&p, agg)?;
    written.push(p);
    let p = dir.join("aggregate_matrix.json");
    fs::write(&p, serde_json::to_vec_pretty(agg).expect("serializes")).map_err(io_err(&p))?;
    written.push(p);
    for b in bars {
        let p = dir.join(format!("bars_{}.csv", b.policy.name()));
        write_bars_csv(&p, b)?;
        written.push(p);
        let p = dir.join(format!("bars_{}.json", b.policy.name()));
        fs::write(&p, serde_json::to_vec_pretty(b).expect("serializes")).map_err(io_err(&p))?;
        written.push(p);
    }
    Ok(written)
}
