//! On-disk log-mel cache keyed by DSP configuration, dataset and recording.

use std::fs;
use std::io::{self, Write};
use std::path::{Path, PathBuf};

use mtag_core::datasets::{DatasetManifest, ManifestEntry};
use mtag_core::dsp::{log_mel_with, mel_filterbank, resample, DspConfig, DspError, Filterbank, MelSpectrogram};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::audio::{read_wav, AudioError};

pub const MEL_MAGIC: &[u8; 4] = b"CCMS";
pub const MEL_VERSION: u32 = 1;
pub const CACHE_ENV: &str = "MTAG_CACHE";

#[derive(Debug, thiserror::Error)]
pub enum CacheError {
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: io::Error,
    },
    #[error("{path}: bad {field}: {message}")]
    Format {
        path: String,
        field: &'static str,
        message: String,
    },
    #[error(transparent)]
    Audio(#[from] AudioError),
    #[error("{recording}: {source}")]
    Dsp {
        recording: String,
        #[source]
        source: DspError,
    },
}

fn io_err(path: &Path) -> impl FnOnce(io::Error) -> CacheError + '_ {
    move |source| CacheError::Io {
        path: path.display().to_string(),
        source,
    }
}

pub fn encode_mel(mel: &MelSpectrogram) -> Vec<u8> {
    let mut out = Vec::with_capacity(16 + 4 * mel.values.len());
    out.extend_from_slice(MEL_MAGIC);
    out.extend_from_slice(&MEL_VERSION.to_le_bytes());
    out.extend_from_slice(&(mel.n_mels as u32).to_le_bytes());
    out.extend_from_slice(&(mel.n_frames as u32).to_le_bytes());
    for v in &mel.values {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

/// Parses a mel cache file; `frame_rate` is not stored and is supplied by the
/// caller.
pub fn decode_mel(bytes: &[u8], frame_rate: f64, path: &Path) -> Result<MelSpectrogram, CacheError> {
    let fmt = |field, message: String| CacheError::Format {
        path: path.display().to_string(),
        field,
        message,
    };
    if bytes.len() < 16 {
        return Err(fmt("header", format!("{} bytes, need 16", bytes.len())));
    }
    if &bytes[..4] != MEL_MAGIC {
        return Err(fmt("magic", format!("{:?}", &bytes[..4])));
    }
    let word = |i: usize| u32::from_le_bytes(bytes[i..i + 4].try_into().expect("4 bytes"));
    let version = word(4);
    if version != MEL_VERSION {
        return Err(fmt("version", format!("{version}, expected {MEL_VERSION}")));
    }
    let (n_mels, n_frames) = (word(8) as usize, word(12) as usize);
    let expected = n_mels
        .checked_mul(n_frames)
        .and_then(|n| n.checked_mul(4))
        .ok_or_else(|| fmt("n_frames", "size overflow".into()))?;
    let body = &bytes[16..];
    if body.len() != expected {
        return Err(fmt("values", format!("{} bytes, expected {expected}", body.len())));
    }
    let values = body
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
        .collect();
    Ok(MelSpectrogram {
        n_mels,
        n_frames,
        values,
        frame_rate,
    })
}

pub fn write_mel(path: &Path, mel: &MelSpectrogram) -> Result<(), CacheError> {
    write_atomic(path, &encode_mel(mel)).map_err(io_err(path))
}

pub fn read_mel(path: &Path, frame_rate: f64) -> Result<MelSpectrogram, CacheError> {
    let bytes = fs::read(path).map_err(io_err(path))?;
    decode_mel(&bytes, frame_rate, path)
}

/// Writes through a sibling temporary file so concurrent writers of the same
/// key leave one complete file behind.
pub(crate) fn write_atomic(path: &Path, bytes: &[u8]) -> io::Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir)?;
    }
    let tmp = path.with_extension(format!("tmp{}", std::process::id()));
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)
}

/// Hex SHA-256 of `bytes`.
pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

fn file_stem_for(recording_id: &str) -> String {
    let safe: String = recording_id
        .chars()
        .map(|c| {
            if c.is_ascii_alphanumeric() || "-_.".contains(c) {
                c
            } else {
                '_'
            }
        })
        .collect();
    if safe == recording_id {
        safe
    } else {
        format!("{safe}-{}", &sha256_hex(recording_id.as_bytes())[..8])
    }
}

pub struct MelCache {
    root: PathBuf,
    dsp: DspConfig,
    fingerprint: String,
    filterbank: Filterbank,
}

impl MelCache {
    pub fn new(root: impl Into<PathBuf>, dsp: DspConfig) -> Result<Self, CacheError> {
        let filterbank = mel_filterbank(&dsp).map_err(|source| CacheError::Dsp {
            recording: "<config>".into(),
            source,
        })?;
        let json = serde_json::to_vec(&dsp).expect("DspConfig serializes");
        Ok(Self {
            root: root.into(),
            dsp,
            fingerprint: sha256_hex(&json)[..16].to_string(),
            filterbank,
        })
    }

    pub fn dsp(&self) -> &DspConfig {
        &self.dsp
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn path_for(&self, dataset_id: &str, recording_id: &str) -> PathBuf {
        self.root
            .join(&self.fingerprint)
            .join(file_stem_for(dataset_id))
            .join(format!("{}.mel", file_stem_for(recording_id)))
    }

    /// A cached spectrogram, if present and well formed for this config.
    pub fn load(&self, dataset_id: &str, recording_id: &str) -> Option<MelSpectrogram> {
        let mel = read_mel(&self.path_for(dataset_id, recording_id), self.dsp.frame_rate()).ok()?;
        (mel.n_mels == self.dsp.n_mels && mel.n_frames > 0).then_some(mel)
    }

    pub fn compute(&self, audio_path: &Path, recording_id: &str) -> Result<MelSpectrogram, CacheError> {
        let clip = read_wav(audio_path)?;
        let dsp = |source| CacheError::Dsp {
            recording: recording_id.to_string(),
            source,
        };
        let clip = resample(&clip, self.dsp.target_sample_rate).map_err(dsp)?;
        log_mel_with(&clip, &self.dsp, &self.filterbank).map_err(dsp)
    }

    /// Returns the spectrogram and whether it had to be computed. Unreadable
    /// cache files are recomputed and overwritten.
    pub fn get_or_compute(
        &self,
        dataset_id: &str,
        entry: &ManifestEntry,
        base_dir: &Path,
    ) -> Result<(MelSpectrogram, bool), CacheError> {
        if let Some(mel) = self.load(dataset_id, &entry.recording_id) {
            return Ok((mel, false));
        }
        let mel = self.compute(&base_dir.join(&entry.audio_path), &entry.recording_id)?;
        write_mel(&self.path_for(dataset_id, &entry.recording_id), &mel)?;
        Ok((mel, true))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PreprocessFailure {
    pub recording_id: String,
    pub error: String,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct PreprocessReport {
    pub computed: usize,
    pub reused: usize,
    pub failures: Vec<PreprocessFailure>,
}

/// Populates the cache for every manifest entry, collecting per-file errors.
pub fn preprocess(manifest: &DatasetManifest, base_dir: &Path, cache: &MelCache) -> PreprocessReport {
    let mut report = PreprocessReport::default();
    for entry in &manifest.entries {
        match cache.get_or_compute(&manifest.dataset_id, entry, base_dir) {
            Ok((_, true)) => report.computed += 1,
            Ok((_, false)) => report.reused += 1,
            Err(e) => report.failures.push(PreprocessFailure {
                recording_id: entry.recording_id.clone(),
                error: e.to_string(),
            }),
        }
    }
    report
}

/// Keeps the frames lying entirely within the first `seconds` of audio.
pub fn truncate_mel(mel: &mut MelSpectrogram, seconds: f64, dsp: &DspConfig) {
    let samples = (seconds * dsp.target_sample_rate as f64).round() as usize;
    let keep = dsp.n_frames(samples).max(1);
    if keep >= mel.n_frames {
        return;
    }
    let values = (0..mel.n_mels)
        .flat_map(|r| mel.values[r * mel.n_frames..r * mel.n_frames + keep].to_vec())
        .collect();
    mel.values = values;
    mel.n_frames = keep;
}
