//! Manifest files: one JSON record per line, with CSV import.

use std::fs;
use std::io::{self, BufRead, Write};
use std::path::Path;

use mtag_core::datasets::{DatasetError, DatasetManifest, ManifestEntry, Split};
use serde::Deserialize;

#[derive(Debug, thiserror::Error)]
pub enum ManifestError {
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: io::Error,
    },
    #[error("{path}:{line}: {message}")]
    Line { path: String, line: usize, message: String },
    #[error("{path}: {source}")]
    Invalid {
        path: String,
        #[source]
        source: DatasetError,
    },
    #[error("{path}: unknown manifest extension (expected .jsonl or .csv)")]
    Extension { path: String },
}

/// Loads `.jsonl` (or `.json`) and `.csv` manifests. The dataset id defaults
/// to the file stem.
pub fn load_manifest(path: &Path, dataset_id: Option<&str>) -> Result<DatasetManifest, ManifestError> {
    let p = path.display().to_string();
    let id = dataset_id
        .map(str::to_string)
        .or_else(|| path.file_stem().map(|s| s.to_string_lossy().into_owned()))
        .unwrap_or_default();
    let ext = path.extension().map(|e| e.to_string_lossy().to_ascii_lowercase());
    let entries = match ext.as_deref() {
        Some("jsonl") | Some("json") => read_jsonl(path)?,
        Some("csv") => read_csv(path)?,
        _ => return Err(ManifestError::Extension { path: p }),
    };
    DatasetManifest::new(id, entries).map_err(|source| ManifestError::Invalid { path: p, source })
}

fn read_jsonl(path: &Path) -> Result<Vec<ManifestEntry>, ManifestError> {
    let p = path.display().to_string();
    let file = fs::File::open(path).map_err(|source| ManifestError::Io {
        path: p.clone(),
        source,
    })?;
    let mut out = Vec::new();
    for (i, line) in io::BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|source| ManifestError::Io {
            path: p.clone(),
            source,
        })?;
        if line.trim().is_empty() {
            continue;
        }
        let entry = serde_json::from_str(&line).map_err(|e| ManifestError::Line {
            path: p.clone(),
            line: i + 1,
            message: e.to_string(),
        })?;
        out.push(entry);
    }
    Ok(out)
}

#[derive(Deserialize)]
struct CsvRow {
    recording_id: String,
    audio_path: String,
    #[serde(default)]
    tags: String,
    #[serde(default)]
    split: String,
    duration_sec: f64,
}

/// CSV columns `recording_id,audio_path,tags,split,duration_sec`; tags are
/// `;`-separated and `split` may be blank.
fn read_csv(path: &Path) -> Result<Vec<ManifestEntry>, ManifestError> {
    let p = path.display().to_string();
    let mut reader = csv::Reader::from_path(path).map_err(|e| ManifestError::Line {
        path: p.clone(),
        line: 0,
        message: e.to_string(),
    })?;
    let mut out = Vec::new();
    for (i, row) in reader.deserialize::<CsvRow>().enumerate() {
        let line = i + 2;
        let bad = |message: String| ManifestError::Line {
            path: p.clone(),
            line,
            message,
        };
        let row = row.map_err(|e| bad(e.to_string()))?;
        let split = match row.split.trim() {
            "" => None,
            s => Some(Split::parse(s).ok_or_else(|| bad(format!("unknown split `{s}`")))?),
        };
        out.push(ManifestEntry {
            recording_id: row.recording_id,
            audio_path: row.audio_path,
            tags: row
                .tags
                .split(';')
                .map(str::trim)
                .filter(|t| !t.is_empty())
                .map(str::to_string)
                .collect(),
            split,
            duration_sec: row.duration_sec,
        });
    }
    Ok(out)
}

pub fn write_manifest(path: &Path, manifest: &DatasetManifest) -> Result<(), ManifestError> {
    let io_err = |source| ManifestError::Io {
        path: path.display().to_string(),
        source,
    };
    let mut buf = Vec::new();
    for e in &manifest.entries {
        serde_json::to_writer(&mut buf, e).expect("entry serializes");
        buf.push(b'\n');
    }
    let mut f = fs::File::create(path).map_err(io_err)?;
    f.write_all(&buf).map_err(io_err)
}
