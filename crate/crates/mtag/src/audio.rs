//! WAV decoding and encoding.

use std::path::Path;

use mtag_core::dsp::{AudioClip, DspError};

#[derive(Debug, thiserror::Error)]
pub enum AudioError {
    #[error("{path}: {source}")]
    Wav {
        path: String,
        #[source]
        source: hound::Error,
    },
    #[error("{path}: unsupported format ({detail})")]
    Unsupported { path: String, detail: String },
    #[error("{path}: {source}")]
    Dsp {
        path: String,
        #[source]
        source: DspError,
    },
}

/// Reads 16- or 32-bit PCM (or 32-bit float) WAV. Multi-channel audio is
/// averaged to mono.
pub fn read_wav(path: &Path) -> Result<AudioClip, AudioError> {
    let p = path.display().to_string();
    let wav = |source| AudioError::Wav {
        path: p.clone(),
        source,
    };
    let mut reader = hound::WavReader::open(path).map_err(wav)?;
    let spec = reader.spec();
    let channels = spec.channels as usize;
    if channels == 0 || channels > 2 {
        return Err(AudioError::Unsupported {
            path: p,
            detail: format!("{channels} channels"),
        });
    }
    let interleaved: Vec<f32> = match (spec.sample_format, spec.bits_per_sample) {
        (hound::SampleFormat::Int, 16) => reader
            .samples::<i16>()
            .map(|s| s.map(|v| v as f32 / 32768.0))
            .collect::<Result<_, _>>()
            .map_err(wav)?,
        (hound::SampleFormat::Int, 32) => reader
            .samples::<i32>()
            .map(|s| s.map(|v| (v as f64 / 2147483648.0) as f32))
            .collect::<Result<_, _>>()
            .map_err(wav)?,
        (hound::SampleFormat::Float, 32) => reader.samples::<f32>().collect::<Result<_, _>>().map_err(wav)?,
        (fmt, bits) => {
            return Err(AudioError::Unsupported {
                path: p,
                detail: format!("{bits}-bit {fmt:?}"),
            })
        }
    };
    let samples = if channels == 1 {
        interleaved
    } else {
        interleaved.chunks_exact(2).map(|f| 0.5 * (f[0] + f[1])).collect()
    };
    AudioClip::new(samples, spec.sample_rate).map_err(|source| AudioError::Dsp { path: p, source })
}

/// Writes mono 16-bit PCM, clamping to full scale.
pub fn write_wav16(path: &Path, clip: &AudioClip) -> Result<(), AudioError> {
    let wav = |source| AudioError::Wav {
        path: path.display().to_string(),
        source,
    };
    let spec = hound::WavSpec {
        channels: 1,
        sample_rate: clip.sample_rate,
        bits_per_sample: 16,
        sample_format: hound::SampleFormat::Int,
    };
    let mut w = hound::WavWriter::create(path, spec).map_err(wav)?;
    for &s in &clip.samples {
        let v = (s.clamp(-1.0, 1.0) * 32767.0).round() as i16;
        w.write_sample(v).map_err(wav)?;
    }
    w.finalize().map_err(wav)
}
