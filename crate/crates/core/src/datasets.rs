//! Dataset manifests, tag vocabularies, duration caps, splits and the
//! synthetic corpus generator.

use alloc::collections::{BTreeMap, BTreeSet};
use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;
use core::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::dsp::{AudioClip, Fft};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum DatasetError {
    #[error("manifest record {record}: {message}")]
    Manifest { record: usize, message: String },
    #[error("duplicate recording id `{id}` at record {record}")]
    DuplicateId { id: String, record: usize },
    #[error("only {available} distinct tags present, {requested} requested")]
    Vocabulary { available: usize, requested: usize },
    #[error("invalid dataset configuration: {0}")]
    Config(String),
    #[error("unsatisfiable synthetic spec: {0}")]
    Spec(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Valid,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Valid, Split::Test];

    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Valid => "valid",
            Split::Test => "test",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "train" => Some(Split::Train),
            "valid" | "validation" | "val" => Some(Split::Valid),
            "test" => Some(Split::Test),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub recording_id: String,
    pub audio_path: String,
    #[serde(default)]
    pub tags: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub split: Option<Split>,
    pub duration_sec: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub dataset_id: String,
    pub entries: Vec<ManifestEntry>,
}

impl DatasetManifest {
    /// Validates ids and durations; record numbers in errors count from 1.
    pub fn new(dataset_id: impl Into<String>, entries: Vec<ManifestEntry>) -> Result<Self, DatasetError> {
        let m = Self {
            dataset_id: dataset_id.into(),
            entries,
        };
        m.validate()?;
        Ok(m)
    }

    pub fn validate(&self) -> Result<(), DatasetError> {
        let mut seen = BTreeSet::new();
        for (i, e) in self.entries.iter().enumerate() {
            let record = i + 1;
            if e.recording_id.is_empty() {
                return Err(DatasetError::Manifest {
                    record,
                    message: "empty recording_id".into(),
                });
            }
            if !(e.duration_sec >= 0.0 && e.duration_sec.is_finite()) {
                return Err(DatasetError::Manifest {
                    record,
                    message: format!("invalid duration {}", e.duration_sec),
                });
            }
            if !seen.insert(e.recording_id.as_str()) {
                return Err(DatasetError::DuplicateId {
                    id: e.recording_id.clone(),
                    record,
                });
            }
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn split(&self, split: Split) -> impl Iterator<Item = &ManifestEntry> {
        self.entries.iter().filter(move |e| e.split == Some(split))
    }

    pub fn total_duration(&self) -> f64 {
        self.entries.iter().map(|e| e.duration_sec).sum()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DatasetConfig {
    pub top_k_tags: usize,
    #[serde(default)]
    pub max_duration_sec: Option<f64>,
}

impl DatasetConfig {
    pub fn validate(&self) -> Result<(), DatasetError> {
        if self.top_k_tags == 0 {
            return Err(DatasetError::Config("top_k_tags must be at least 1".into()));
        }
        if let Some(c) = self.max_duration_sec {
            if !(c > 0.0) {
                return Err(DatasetError::Config(format!("duration cap {c} must be positive")));
            }
        }
        Ok(())
    }
}

/// The six corpora and their vocabulary sizes and duration caps.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DatasetPreset {
    MagnaTagATune,
    FmaMedium,
    Lyra,
    TurkishMakam,
    Hindustani,
    Carnatic,
}

impl DatasetPreset {
    pub const ALL: [DatasetPreset; 6] = [
        DatasetPreset::MagnaTagATune,
        DatasetPreset::FmaMedium,
        DatasetPreset::Lyra,
        DatasetPreset::TurkishMakam,
        DatasetPreset::Hindustani,
        DatasetPreset::Carnatic,
    ];

    pub fn id(self) -> &'static str {
        match self {
            DatasetPreset::MagnaTagATune => "magnatagatune",
            DatasetPreset::FmaMedium => "fma",
            DatasetPreset::Lyra => "lyra",
            DatasetPreset::TurkishMakam => "makam",
            DatasetPreset::Hindustani => "hindustani",
            DatasetPreset::Carnatic => "carnatic",
        }
    }

    pub fn display_name(self) -> &'static str {
        match self {
            DatasetPreset::MagnaTagATune => "MagnaTagATune",
            DatasetPreset::FmaMedium => "FMA-medium",
            DatasetPreset::Lyra => "Lyra",
            DatasetPreset::TurkishMakam => "Turkish-makam",
            DatasetPreset::Hindustani => "Hindustani",
            DatasetPreset::Carnatic => "Carnatic",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        let key: String = s
            .chars()
            .filter(|c| c.is_ascii_alphanumeric())
            .collect::<String>()
            .to_ascii_lowercase();
        Self::ALL.into_iter().find(|p| {
            let name: String = p.display_name().chars().filter(|c| c.is_ascii_alphanumeric()).collect();
            key == p.id() || key == name.to_ascii_lowercase() || (key == "mtt" && *p == DatasetPreset::MagnaTagATune)
        })
    }

    pub fn config(self) -> DatasetConfig {
        let (top_k_tags, max_duration_sec) = match self {
            DatasetPreset::MagnaTagATune => (50, None),
            DatasetPreset::FmaMedium => (20, None),
            DatasetPreset::Lyra => (30, None),
            DatasetPreset::TurkishMakam => (30, Some(150.0)),
            DatasetPreset::Hindustani => (20, Some(780.0)),
            DatasetPreset::Carnatic => (20, Some(330.0)),
        };
        DatasetConfig {
            top_k_tags,
            max_duration_sec,
        }
    }
}

impl core::fmt::Display for DatasetPreset {
    fn fmt(&self, f: &mut core::fmt::Formatter<'_>) -> core::fmt::Result {
        f.write_str(self.display_name())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TagFrequency {
    pub tag: String,
    pub count: usize,
    /// Fraction of recordings carrying the tag.
    pub relative: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TagVocabulary {
    pub tags: Vec<String>,
    /// Relative frequency of each vocabulary tag, aligned with `tags`.
    pub frequencies: Vec<f64>,
}

impl TagVocabulary {
    pub fn len(&self) -> usize {
        self.tags.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tags.is_empty()
    }

    pub fn index_of(&self, tag: &str) -> Option<usize> {
        self.tags.iter().position(|t| t == tag)
    }
}

/// Every tag with its count, sorted by descending count then name. A tag
/// repeated within one entry counts once.
pub fn tag_frequencies(manifest: &DatasetManifest) -> Vec<TagFrequency> {
    let mut counts: BTreeMap<&str, usize> = BTreeMap::new();
    for e in &manifest.entries {
        let unique: BTreeSet<&str> = e.tags.iter().map(String::as_str).collect();
        for t in unique {
            *counts.entry(t).or_default() += 1;
        }
    }
    let n = manifest.entries.len().max(1) as f64;
    let mut out: Vec<TagFrequency> = counts
        .into_iter()
        .map(|(tag, count)| TagFrequency {
            tag: tag.to_string(),
            count,
            relative: count as f64 / n,
        })
        .collect();
    out.sort_by(|a, b| b.count.cmp(&a.count).then_with(|| a.tag.cmp(&b.tag)));
    out
}

/// The `top_k_tags` most frequent tags; equal counts are ordered by name.
pub fn build_vocabulary(manifest: &DatasetManifest, cfg: &DatasetConfig) -> Result<TagVocabulary, DatasetError> {
    cfg.validate()?;
    let freq = tag_frequencies(manifest);
    if freq.len() < cfg.top_k_tags {
        return Err(DatasetError::Vocabulary {
            available: freq.len(),
            requested: cfg.top_k_tags,
        });
    }
    let top = &freq[..cfg.top_k_tags];
    Ok(TagVocabulary {
        tags: top.iter().map(|f| f.tag.clone()).collect(),
        frequencies: top.iter().map(|f| f.relative).collect(),
    })
}

/// Clamps each entry's duration to the cap. Audio is truncated from the end
/// when loaded.
pub fn apply_duration_cap(manifest: &DatasetManifest, cfg: &DatasetConfig) -> DatasetManifest {
    let mut out = manifest.clone();
    if let Some(cap) = cfg.max_duration_sec {
        for e in &mut out.entries {
            e.duration_sec = e.duration_sec.min(cap);
        }
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SplitRatios {
    pub train: f64,
    pub valid: f64,
    pub test: f64,
}

impl Default for SplitRatios {
    fn default() -> Self {
        Self {
            train: 0.8,
            valid: 0.1,
            test: 0.1,
        }
    }
}

impl SplitRatios {
    pub fn validate(&self) -> Result<(), DatasetError> {
        let parts = [self.train, self.valid, self.test];
        if parts.iter().any(|&r| !(0.0..=1.0).contains(&r)) || (parts.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return Err(DatasetError::Config(format!(
                "split ratios {}/{}/{} must be in [0, 1] and sum to 1",
                self.train, self.valid, self.test
            )));
        }
        Ok(())
    }
}

/// Uniform value in `[0, 1)` from SHA-256 of the seed and recording id.
pub fn split_key(recording_id: &str, seed: u64) -> f64 {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update(recording_id.as_bytes());
    let d = h.finalize();
    let mut b = [0u8; 8];
    b.copy_from_slice(&d[..8]);
    (u64::from_le_bytes(b) >> 11) as f64 / (1u64 << 53) as f64
}

/// Gives every unsplit entry a split from its keyed hash; existing splits
/// are kept.
pub fn assign_splits(
    manifest: &DatasetManifest,
    ratios: SplitRatios,
    seed: u64,
) -> Result<DatasetManifest, DatasetError> {
    ratios.validate()?;
    let mut out = manifest.clone();
    for e in &mut out.entries {
        if e.split.is_none() {
            let u = split_key(&e.recording_id, seed);
            e.split = Some(if u < ratios.train {
                Split::Train
            } else if u < ratios.train + ratios.valid {
                Split::Valid
            } else {
                Split::Test
            });
        }
    }
    Ok(out)
}

/// Multi-hot target over the vocabulary; tags outside it are ignored.
pub fn encode_targets(entry: &ManifestEntry, vocab: &TagVocabulary) -> Vec<bool> {
    vocab.tags.iter().map(|t| entry.tags.iter().any(|e| e == t)).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum SignatureKind {
    /// Stationary noise confined to `[lo_hz, hi_hz]`.
    Band { lo_hz: f64, hi_hz: f64 },
    /// Band noise under a sinusoidal envelope at `rate_hz`.
    Modulated { lo_hz: f64, hi_hz: f64, rate_hz: f64 },
    /// Harmonic tone, partial `k` at `k·f0` with amplitude `1/k`.
    Harmonic { f0_hz: f64, partials: usize },
}

impl SignatureKind {
    /// Frequency range holding the signature's energy.
    pub fn band(&self) -> (f64, f64) {
        match *self {
            SignatureKind::Band { lo_hz, hi_hz } | SignatureKind::Modulated { lo_hz, hi_hz, .. } => (lo_hz, hi_hz),
            SignatureKind::Harmonic { f0_hz, partials } => (f0_hz, f0_hz * partials as f64),
        }
    }

    fn detuned(self, factor: f64) -> Self {
        match self {
            SignatureKind::Band { lo_hz, hi_hz } => SignatureKind::Band {
                lo_hz: lo_hz * factor,
                hi_hz: hi_hz * factor,
            },
            SignatureKind::Modulated { lo_hz, hi_hz, rate_hz } => SignatureKind::Modulated {
                lo_hz: lo_hz * factor,
                hi_hz: hi_hz * factor,
                rate_hz,
            },
            SignatureKind::Harmonic { f0_hz, partials } => SignatureKind::Harmonic {
                f0_hz: f0_hz * factor,
                partials,
            },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Signature {
    pub name: String,
    pub kind: SignatureKind,
}

/// Built-in signatures. The first [`DISJOINT_SIGNATURES`] occupy pairwise
/// disjoint frequency bands; the rest overlap them.
pub fn signature_catalog() -> Vec<Signature> {
    use SignatureKind::*;
    let band = |lo, hi| Band { lo_hz: lo, hi_hz: hi };
    let am = |lo, hi, rate| Modulated {
        lo_hz: lo,
        hi_hz: hi,
        rate_hz: rate,
    };
    let harm = |f0, partials| Harmonic { f0_hz: f0, partials };
    [
        ("band-250", band(200.0, 300.0)),
        ("band-500", band(430.0, 570.0)),
        ("am4-800", am(700.0, 900.0, 4.0)),
        ("band-1200", band(1080.0, 1320.0)),
        ("am8-1700", am(1550.0, 1850.0, 8.0)),
        ("band-2200", band(2000.0, 2400.0)),
        ("band-3k", band(2500.0, 3500.0)),
        ("am6-4500", am(4100.0, 4900.0, 6.0)),
        ("band-6k", band(5500.0, 6500.0)),
        ("harm-150", harm(150.0, 8)),
        ("harm-220", harm(220.0, 8)),
        ("band-1k-wide", band(600.0, 1600.0)),
        ("am3-2600", am(2300.0, 2900.0, 3.0)),
        ("harm-440", harm(440.0, 6)),
        ("band-4k", band(3500.0, 4500.0)),
        ("am12-7k", am(6500.0, 7500.0, 12.0)),
    ]
    .into_iter()
    .map(|(name, kind)| Signature {
        name: name.to_string(),
        kind,
    })
    .collect()
}

pub const DISJOINT_SIGNATURES: usize = 9;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub dataset_id: String,
    pub n_clips: usize,
    pub n_tags: usize,
    pub clip_seconds: f64,
    pub sample_rate: u32,
    pub seed: u64,
    /// Catalog index of each tag's signature; empty means `0..n_tags`.
    #[serde(default)]
    pub signatures: Vec<usize>,
    /// Multiplies every signature frequency.
    pub detune: f64,
    /// Independent probability that a clip carries each tag.
    pub tag_probability: f64,
    /// Ratio of nominal signature power to background noise power.
    pub snr_db: f64,
}

impl SyntheticSpec {
    pub fn new(dataset_id: impl Into<String>, n_clips: usize, n_tags: usize, seed: u64) -> Self {
        Self {
            dataset_id: dataset_id.into(),
            n_clips,
            n_tags,
            clip_seconds: 8.0,
            sample_rate: 16_000,
            seed,
            signatures: Vec::new(),
            detune: 1.0,
            tag_probability: 0.25,
            snr_db: 10.0,
        }
    }

    pub fn signature_indices(&self) -> Vec<usize> {
        if self.signatures.is_empty() {
            (0..self.n_tags).collect()
        } else {
            self.signatures.clone()
        }
    }

    /// Resolved tag signatures, checked against the catalog and the Nyquist
    /// limit.
    pub fn resolve(&self) -> Result<Vec<Signature>, DatasetError> {
        let catalog = signature_catalog();
        if self.n_tags == 0 || self.n_tags > catalog.len() {
            return Err(DatasetError::Spec(format!(
                "{} tags requested, catalog has {} distinct signatures",
                self.n_tags,
                catalog.len()
            )));
        }
        let idx = self.signature_indices();
        if idx.len() != self.n_tags {
            return Err(DatasetError::Spec(format!(
                "{} signatures for {} tags",
                idx.len(),
                self.n_tags
            )));
        }
        let unique: BTreeSet<usize> = idx.iter().copied().collect();
        if unique.len() != idx.len() || idx.iter().any(|&i| i >= catalog.len()) {
            return Err(DatasetError::Spec(
                "signature indices must be distinct catalog entries".into(),
            ));
        }
        if !(self.clip_seconds > 0.0) || self.sample_rate == 0 || self.n_clips == 0 {
            return Err(DatasetError::Spec("clips must be non-empty".into()));
        }
        if !(0.0..=1.0).contains(&self.tag_probability) || !(self.detune > 0.0) || !self.snr_db.is_finite() {
            return Err(DatasetError::Spec("invalid tag probability, detune or snr".into()));
        }
        let nyquist = self.sample_rate as f64 / 2.0;
        idx.iter()
            .map(|&i| {
                let s = &catalog[i];
                let kind = s.kind.detuned(self.detune);
                if kind.band().1 >= nyquist {
                    return Err(DatasetError::Spec(format!("signature {} exceeds Nyquist", s.name)));
                }
                Ok(Signature {
                    name: s.name.clone(),
                    kind,
                })
            })
            .collect()
    }

    pub fn n_samples(&self) -> usize {
        libm::round(self.clip_seconds * self.sample_rate as f64) as usize
    }
}

fn clip_seed(seed: u64, index: usize) -> u64 {
    let mut h = Sha256::new();
    h.update(b"clip");
    h.update(seed.to_le_bytes());
    h.update((index as u64).to_le_bytes());
    let d = h.finalize();
    let mut b = [0u8; 8];
    b.copy_from_slice(&d[..8]);
    u64::from_le_bytes(b)
}

/// A synthetic corpus: manifest plus on-demand deterministic rendering.
pub struct SyntheticCorpus {
    pub spec: SyntheticSpec,
    pub signatures: Vec<Signature>,
    pub manifest: DatasetManifest,
    /// Per clip, which tags are present.
    pub labels: Vec<Vec<bool>>,
    fft: Fft,
}

impl SyntheticCorpus {
    pub fn new(spec: &SyntheticSpec) -> Result<Self, DatasetError> {
        let signatures = spec.resolve()?;
        let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
        let mut labels = Vec::with_capacity(spec.n_clips);
        let mut entries = Vec::with_capacity(spec.n_clips);
        for i in 0..spec.n_clips {
            let present: Vec<bool> = (0..spec.n_tags)
                .map(|_| rng.random::<f64>() < spec.tag_probability)
                .collect();
            let id = format!("{}-{:05}", spec.dataset_id, i);
            entries.push(ManifestEntry {
                audio_path: format!("audio/{id}.wav"),
                recording_id: id,
                tags: signatures
                    .iter()
                    .zip(&present)
                    .filter(|(_, &p)| p)
                    .map(|(s, _)| s.name.clone())
                    .collect(),
                split: None,
                duration_sec: spec.n_samples() as f64 / spec.sample_rate as f64,
            });
            labels.push(present);
        }
        let manifest = DatasetManifest::new(spec.dataset_id.clone(), entries)?;
        let fft = Fft::new(spec.n_samples().next_power_of_two());
        Ok(Self {
            spec: spec.clone(),
            signatures,
            manifest,
            labels,
            fft,
        })
    }

    /// Renders clip `index`: background noise plus each present signature at
    /// a random gain, peak-limited below full scale.
    pub fn render(&self, index: usize) -> AudioClip {
        let spec = &self.spec;
        let n = spec.n_samples();
        let sr = spec.sample_rate as f64;
        let mut rng = ChaCha8Rng::seed_from_u64(clip_seed(spec.seed, index));
        const LEVEL: f64 = 0.08;
        let noise_rms = LEVEL * libm::pow(10.0, -spec.snr_db / 20.0);
        let normal = Normal::new(0.0, noise_rms).expect("finite std");
        let mut out: Vec<f64> = (0..n).map(|_| normal.sample(&mut rng)).collect();
        for (sig, &present) in self.signatures.iter().zip(&self.labels[index]) {
            if !present {
                continue;
            }
            let gain = LEVEL * rng.random_range(0.6..1.0);
            let wave = match sig.kind {
                SignatureKind::Band { lo_hz, hi_hz } => band_noise(&self.fft, n, sr, lo_hz, hi_hz, &mut rng),
                SignatureKind::Modulated { lo_hz, hi_hz, rate_hz } => {
                    let mut w = band_noise(&self.fft, n, sr, lo_hz, hi_hz, &mut rng);
                    let phase = rng.random_range(0.0..2.0 * PI);
                    for (t, v) in w.iter_mut().enumerate() {
                        *v *= 1.0 + 0.9 * libm::sin(2.0 * PI * rate_hz * t as f64 / sr + phase);
                    }
                    w
                }
                SignatureKind::Harmonic { f0_hz, partials } => {
                    let mut w = vec![0.0; n];
                    for k in 1..=partials {
                        let phase = rng.random_range(0.0..2.0 * PI);
                        let step = 2.0 * PI * f0_hz * k as f64 / sr;
                        let amp = 1.0 / k as f64;
                        for (t, v) in w.iter_mut().enumerate() {
                            *v += amp * libm::sin(step * t as f64 + phase);
                        }
                    }
                    w
                }
            };
            let rms = libm::sqrt(wave.iter().map(|v| v * v).sum::<f64>() / n as f64).max(1e-12);
            for (o, w) in out.iter_mut().zip(&wave) {
                *o += gain * w / rms;
            }
        }
        let peak = out.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        let scale = if peak > 0.95 { 0.95 / peak } else { 1.0 };
        AudioClip {
            samples: out.iter().map(|&v| (v * scale) as f32).collect(),
            sample_rate: spec.sample_rate,
        }
    }
}

/// Random-phase noise with a flat spectrum on `[lo, hi]`, via one inverse
/// FFT truncated to `n` samples.
fn band_noise(fft: &Fft, n: usize, sr: f64, lo: f64, hi: f64, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let size = fft.len();
    let mut buf = vec![(0.0, 0.0); size];
    let k_lo = libm::ceil(lo * size as f64 / sr) as usize;
    let k_hi = (libm::floor(hi * size as f64 / sr) as usize).min(size / 2 - 1);
    for k in k_lo.max(1)..=k_hi {
        let ph = rng.random_range(0.0..2.0 * PI);
        let (s, c) = (libm::sin(ph), libm::cos(ph));
        buf[k] = (c, s);
        buf[size - k] = (c, -s);
    }
    fft.process(&mut buf, true);
    buf.truncate(n);
    buf.into_iter().map(|(re, _)| re).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn entry(id: &str, tags: &[&str]) -> ManifestEntry {
        ManifestEntry {
            recording_id: id.into(),
            audio_path: format!("{id}.wav"),
            tags: tags.iter().map(|t| t.to_string()).collect(),
            split: None,
            duration_sec: 10.0,
        }
    }

    #[test]
    fn duplicate_ids_rejected() {
        let err = DatasetManifest::new("d", vec![entry("a", &[]), entry("a", &["x"])]).unwrap_err();
        assert_eq!(
            err,
            DatasetError::DuplicateId {
                id: "a".into(),
                record: 2
            }
        );
        assert!(DatasetManifest::new("d", vec![entry("a", &[])]).is_ok());
    }

    #[test]
    fn vocabulary_order_and_ties() {
        let m = DatasetManifest::new(
            "d",
            vec![
                entry("1", &["a", "b", "c"]),
                entry("2", &["a", "b"]),
                entry("3", &["a"]),
            ],
        )
        .unwrap();
        let cfg = |k| DatasetConfig {
            top_k_tags: k,
            max_duration_sec: None,
        };
        assert_eq!(build_vocabulary(&m, &cfg(2)).unwrap().tags, ["a", "b"]);
        let tie = DatasetManifest::new("d", vec![entry("1", &["b", "a"]), entry("2", &["a", "b"])]).unwrap();
        assert_eq!(build_vocabulary(&tie, &cfg(1)).unwrap().tags, ["a"]);
        assert_eq!(
            build_vocabulary(&m, &cfg(4)).unwrap_err(),
            DatasetError::Vocabulary {
                available: 3,
                requested: 4
            }
        );
    }

    #[test]
    fn carnatic_target_encoding() {
        let vocab = TagVocabulary {
            tags: vec!["voice".into(), "violin".into(), "ghatam".into()],
            frequencies: vec![0.0; 3],
        };
        assert_eq!(
            encode_targets(&entry("x", &["violin", "kriti"]), &vocab),
            [false, true, false]
        );
        assert_eq!(encode_targets(&entry("y", &["kriti"]), &vocab), [false; 3]);
    }

    #[test]
    fn caps_and_presets() {
        let mut e = entry("m", &[]);
        e.duration_sec = 200.0;
        let m = DatasetManifest::new("makam", vec![e]).unwrap();
        let capped = apply_duration_cap(&m, &DatasetPreset::TurkishMakam.config());
        assert_eq!(capped.entries[0].duration_sec, 150.0);
        let same = apply_duration_cap(&m, &DatasetPreset::MagnaTagATune.config());
        assert_eq!(same.entries[0].duration_sec, 200.0);
        let k: Vec<usize> = DatasetPreset::ALL.iter().map(|p| p.config().top_k_tags).collect();
        assert_eq!(k, [50, 20, 30, 30, 20, 20]);
        assert_eq!(DatasetPreset::Hindustani.config().max_duration_sec, Some(780.0));
        assert_eq!(DatasetPreset::Carnatic.config().max_duration_sec, Some(330.0));
        assert_eq!(DatasetPreset::parse("FMA-medium"), Some(DatasetPreset::FmaMedium));
        assert_eq!(DatasetPreset::parse("mtt"), Some(DatasetPreset::MagnaTagATune));
    }

    #[test]
    fn split_ratios_must_sum_to_one() {
        let m = DatasetManifest::new("d", vec![entry("a", &[])]).unwrap();
        let bad = SplitRatios {
            train: 0.5,
            valid: 0.1,
            test: 0.1,
        };
        assert!(matches!(assign_splits(&m, bad, 0), Err(DatasetError::Config(_))));
    }

    #[test]
    fn catalog_prefix_is_disjoint() {
        let cat = signature_catalog();
        assert_eq!(cat.len(), 16);
        for i in 0..DISJOINT_SIGNATURES {
            for j in 0..i {
                let (a, b) = (cat[i].kind.band(), cat[j].kind.band());
                assert!(a.0 > b.1 || b.0 > a.1, "{} overlaps {}", cat[i].name, cat[j].name);
            }
        }
        let names: BTreeSet<&str> = cat.iter().map(|s| s.name.as_str()).collect();
        assert_eq!(names.len(), cat.len());
    }

    #[test]
    fn too_many_tags_is_a_spec_error() {
        let spec = SyntheticSpec::new("s", 4, 17, 0);
        assert!(matches!(SyntheticCorpus::new(&spec), Err(DatasetError::Spec(_))));
    }
}
