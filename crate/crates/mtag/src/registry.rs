//! Append-only run registry: one JSON record per completed transfer cell.

use std::fs::{self, OpenOptions};
use std::io::{self, BufRead, Write};
use std::path::Path;

use mtag_core::transfer::RegistryRecord;

#[derive(Debug, thiserror::Error)]
pub enum RegistryError {
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: io::Error,
    },
    #[error("{path}:{line}: {message}")]
    Line { path: String, line: usize, message: String },
}

pub fn append_record(path: &Path, record: &RegistryRecord) -> Result<(), RegistryError> {
    let io_err = |source| RegistryError::Io {
        path: path.display().to_string(),
        source,
    };
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(io_err)?;
    }
    let mut line = serde_json::to_vec(record).expect("record serializes");
    line.push(b'\n');
    // One write call per record keeps concurrent appenders line-atomic.
    let mut f = OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)
        .map_err(io_err)?;
    f.write_all(&line).map_err(io_err)
}

pub fn read_registry(path: &Path) -> Result<Vec<RegistryRecord>, RegistryError> {
    let p = path.display().to_string();
    let file = fs::File::open(path).map_err(|source| RegistryError::Io {
        path: p.clone(),
        source,
    })?;
    let mut out = Vec::new();
    for (i, line) in io::BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|source| RegistryError::Io {
            path: p.clone(),
            source,
        })?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|e| RegistryError::Line {
            path: p.clone(),
            line: i + 1,
            message: e.to_string(),
        })?);
    }
    Ok(out)
}
