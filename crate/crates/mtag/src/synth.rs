//! Writes a synthetic corpus to disk as 16-bit WAVs plus a manifest.

use std::fs;
use std::path::{Path, PathBuf};

use mtag_core::datasets::{assign_splits, DatasetError, DatasetManifest, SplitRatios, SyntheticCorpus, SyntheticSpec};

use crate::audio::{write_wav16, AudioError};
use crate::manifest::{write_manifest, ManifestError};

#[derive(Debug, thiserror::Error)]
pub enum SynthError {
    #[error(transparent)]
    Dataset(#[from] DatasetError),
    #[error(transparent)]
    Audio(#[from] AudioError),
    #[error(transparent)]
    Manifest(#[from] ManifestError),
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

/// Renders every clip under `out/audio/`, assigns splits from the spec seed
/// and writes `out/<dataset_id>.jsonl`. Returns the manifest and its path.
pub fn write_synthetic(
    spec: &SyntheticSpec,
    ratios: SplitRatios,
    out: &Path,
) -> Result<(DatasetManifest, PathBuf), SynthError> {
    let corpus = SyntheticCorpus::new(spec)?;
    let audio_dir = out.join("audio");
    fs::create_dir_all(&audio_dir).map_err(|source| SynthError::Io {
        path: audio_dir.display().to_string(),
        source,
    })?;
    for (i, entry) in corpus.manifest.entries.iter().enumerate() {
        write_wav16(&out.join(&entry.audio_path), &corpus.render(i))?;
    }
    let manifest = assign_splits(&corpus.manifest, ratios, spec.seed)?;
    let path = out.join(format!("{}.jsonl", spec.dataset_id));
    write_manifest(&path, &manifest)?;
    Ok((manifest, path))
}
