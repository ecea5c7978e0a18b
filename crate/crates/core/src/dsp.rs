//! Audio front end: resampling, STFT power spectra, mel filterbanks,
//! log-mel spectrograms and chunking.

use alloc::vec;
use alloc::vec::Vec;
use core::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum DspError {
    #[error("invalid audio: {0}")]
    InvalidAudio(&'static str),
    #[error("clip of {n_samples} samples is shorter than one {fft_size}-point frame")]
    TooShort { n_samples: usize, fft_size: usize },
    #[error("mel band {band} covers no FFT bin; lower n_mels or raise fft_size")]
    DegenerateFilterbank { band: usize },
    #[error("invalid DSP configuration: {0}")]
    InvalidConfig(&'static str),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MelScale {
    /// `2595·log10(1 + f/700)`.
    Htk,
    /// Linear below 1 kHz, logarithmic above.
    Slaney,
}

impl MelScale {
    pub fn hz_to_mel(self, f: f64) -> f64 {
        match self {
            MelScale::Htk => 2595.0 * libm::log10(1.0 + f / 700.0),
            MelScale::Slaney => {
                let f_sp = 200.0 / 3.0;
                let min_log_hz = 1000.0;
                let min_log_mel = min_log_hz / f_sp;
                let logstep = libm::log(6.4) / 27.0;
                if f >= min_log_hz {
                    min_log_mel + libm::log(f / min_log_hz) / logstep
                } else {
                    f / f_sp
                }
            }
        }
    }

    pub fn mel_to_hz(self, m: f64) -> f64 {
        match self {
            MelScale::Htk => 700.0 * (libm::pow(10.0, m / 2595.0) - 1.0),
            MelScale::Slaney => {
                let f_sp = 200.0 / 3.0;
                let min_log_hz = 1000.0;
                let min_log_mel = min_log_hz / f_sp;
                let logstep = libm::log(6.4) / 27.0;
                if m >= min_log_mel {
                    min_log_hz * libm::exp(logstep * (m - min_log_mel))
                } else {
                    f_sp * m
                }
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DspConfig {
    pub target_sample_rate: u32,
    pub fft_size: usize,
    pub hop_size: usize,
    pub n_mels: usize,
    pub f_min: f64,
    pub f_max: f64,
    pub log_floor: f64,
    pub mel_scale: MelScale,
}

impl Default for DspConfig {
    fn default() -> Self {
        Self {
            target_sample_rate: 16_000,
            fft_size: 512,
            hop_size: 256,
            n_mels: 128,
            f_min: 0.0,
            f_max: 8_000.0,
            log_floor: 1e-10,
            mel_scale: MelScale::Slaney,
        }
    }
}

impl DspConfig {
    pub fn validate(&self) -> Result<(), DspError> {
        if self.target_sample_rate == 0 {
            return Err(DspError::InvalidConfig("target_sample_rate must be positive"));
        }
        if self.fft_size < 2 || self.hop_size == 0 || self.hop_size > self.fft_size {
            return Err(DspError::InvalidConfig("need 0 < hop_size <= fft_size"));
        }
        if self.n_mels == 0 {
            return Err(DspError::InvalidConfig("n_mels must be at least 1"));
        }
        if !(self.f_min >= 0.0 && self.f_min < self.f_max && self.f_max <= self.target_sample_rate as f64 / 2.0) {
            return Err(DspError::InvalidConfig("need 0 <= f_min < f_max <= sample_rate / 2"));
        }
        if !(self.log_floor > 0.0) {
            return Err(DspError::InvalidConfig("log_floor must be positive"));
        }
        Ok(())
    }

    pub fn n_bins(&self) -> usize {
        self.fft_size / 2 + 1
    }

    /// Frames produced by `n_samples` samples (no centre padding).
    pub fn n_frames(&self, n_samples: usize) -> usize {
        if n_samples < self.fft_size {
            0
        } else {
            1 + (n_samples - self.fft_size) / self.hop_size
        }
    }

    pub fn frame_rate(&self) -> f64 {
        self.target_sample_rate as f64 / self.hop_size as f64
    }

    pub fn floor_value(&self) -> f32 {
        libm::log(self.log_floor) as f32
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AudioClip {
    pub samples: Vec<f32>,
    pub sample_rate: u32,
}

impl AudioClip {
    pub fn new(samples: Vec<f32>, sample_rate: u32) -> Result<Self, DspError> {
        let clip = Self { samples, sample_rate };
        clip.validate()?;
        Ok(clip)
    }

    pub fn validate(&self) -> Result<(), DspError> {
        if self.sample_rate == 0 {
            return Err(DspError::InvalidAudio("sample rate must be positive"));
        }
        if self.samples.is_empty() {
            return Err(DspError::InvalidAudio("no samples"));
        }
        if !self.samples.iter().all(|s| s.is_finite()) {
            return Err(DspError::InvalidAudio("non-finite sample"));
        }
        Ok(())
    }

    pub fn duration_sec(&self) -> f64 {
        self.samples.len() as f64 / self.sample_rate as f64
    }

    /// Keeps at most the first `seconds` of audio.
    pub fn truncate_seconds(&mut self, seconds: f64) {
        let keep = libm::round(seconds * self.sample_rate as f64) as usize;
        self.samples.truncate(keep.max(1));
    }
}

/// Row-major `[n_mels × n_frames]` log-mel values.
#[derive(Debug, Clone, PartialEq)]
pub struct MelSpectrogram {
    pub n_mels: usize,
    pub n_frames: usize,
    pub values: Vec<f32>,
    pub frame_rate: f64,
}

impl MelSpectrogram {
    pub fn at(&self, mel: usize, frame: usize) -> f32 {
        self.values[mel * self.n_frames + frame]
    }
}

// ---------------------------------------------------------------- FFT

/// In-place iterative radix-2 FFT over `(re, im)` pairs.
pub struct Fft {
    n: usize,
    twiddles: Vec<(f64, f64)>,
    bitrev: Vec<usize>,
}

impl Fft {
    pub fn new(n: usize) -> Self {
        assert!(n.is_power_of_two(), "FFT size must be a power of two");
        let bits = n.trailing_zeros();
        let bitrev = (0..n)
            .map(|i| {
                if bits == 0 {
                    0
                } else {
                    i.reverse_bits() >> (usize::BITS - bits)
                }
            })
            .collect();
        let twiddles = (0..n / 2)
            .map(|k| {
                let a = -2.0 * PI * k as f64 / n as f64;
                (libm::cos(a), libm::sin(a))
            })
            .collect();
        Self { n, twiddles, bitrev }
    }

    pub fn len(&self) -> usize {
        self.n
    }

    pub fn is_empty(&self) -> bool {
        self.n == 0
    }

    /// Forward transform; `inverse` conjugates twiddles and does not rescale.
    pub fn process(&self, buf: &mut [(f64, f64)], inverse: bool) {
        let n = self.n;
        debug_assert_eq!(buf.len(), n);
        for i in 0..n {
            let j = self.bitrev[i];
            if j > i {
                buf.swap(i, j);
            }
        }
        let mut len = 2;
        while len <= n {
            let half = len / 2;
            let stride = n / len;
            for start in (0..n).step_by(len) {
                for k in 0..half {
                    let (wr, wi) = self.twiddles[k * stride];
                    let wi = if inverse { -wi } else { wi };
                    let (ar, ai) = buf[start + k];
                    let (br, bi) = buf[start + k + half];
                    let tr = br * wr - bi * wi;
                    let ti = br * wi + bi * wr;
                    buf[start + k] = (ar + tr, ai + ti);
                    buf[start + k + half] = (ar - tr, ai - ti);
                }
            }
            len *= 2;
        }
    }
}

/// One-sided power spectrum of a real frame of any length (naive DFT when
/// the length is not a power of two).
fn power_spectrum(fft: Option<&Fft>, frame: &[f64], scratch: &mut Vec<(f64, f64)>, out: &mut [f64]) {
    let n = frame.len();
    match fft {
        Some(fft) => {
            scratch.clear();
            scratch.extend(frame.iter().map(|&x| (x, 0.0)));
            fft.process(scratch, false);
            for (o, &(re, im)) in out.iter_mut().zip(scratch.iter()) {
                *o = re * re + im * im;
            }
        }
        None => {
            for (k, o) in out.iter_mut().enumerate() {
                let (mut re, mut im) = (0.0, 0.0);
                for (t, &x) in frame.iter().enumerate() {
                    let a = -2.0 * PI * ((k * t) % n) as f64 / n as f64;
                    re += x * libm::cos(a);
                    im += x * libm::sin(a);
                }
                *o = re * re + im * im;
            }
        }
    }
}

/// Periodic Hann window.
pub fn hann(n: usize) -> Vec<f64> {
    (0..n)
        .map(|i| 0.5 - 0.5 * libm::cos(2.0 * PI * i as f64 / n as f64))
        .collect()
}

// ---------------------------------------------------------------- resampling

const TAPS: usize = 64;
const KAISER_BETA: f64 = 8.0;
const ROLLOFF: f64 = 0.945;
/// Larger phase counts compute coefficients on the fly.
const MAX_TABLE_PHASES: usize = 4096;

fn bessel_i0(x: f64) -> f64 {
    let mut sum = 1.0;
    let mut term = 1.0;
    let q = x * x / 4.0;
    for k in 1..64 {
        term *= q / (k * k) as f64;
        sum += term;
        if term < sum * 1e-17 {
            break;
        }
    }
    sum
}

fn gcd(a: u64, b: u64) -> u64 {
    if b == 0 {
        a
    } else {
        gcd(b, a % b)
    }
}

fn sinc(x: f64) -> f64 {
    if x == 0.0 {
        1.0
    } else {
        libm::sin(PI * x) / (PI * x)
    }
}

/// Taps for fractional offset `frac ∈ [0, 1)`, normalised to unit DC gain.
fn phase_taps(frac: f64, cutoff: f64, out: &mut [f64; TAPS]) {
    let half = (TAPS / 2) as f64;
    let i0b = bessel_i0(KAISER_BETA);
    let mut sum = 0.0;
    for (j, o) in out.iter_mut().enumerate() {
        // tap j reads input sample base + j − (TAPS/2 − 1)
        let t = j as f64 - (half - 1.0) - frac;
        let r = t / half;
        let w = if r.abs() >= 1.0 {
            0.0
        } else {
            bessel_i0(KAISER_BETA * libm::sqrt(1.0 - r * r)) / i0b
        };
        *o = cutoff * sinc(cutoff * t) * w;
        sum += *o;
    }
    out.iter_mut().for_each(|o| *o /= sum);
}

/// Band-limited polyphase resampling (Kaiser-windowed sinc, 64 taps per phase).
pub fn resample(clip: &AudioClip, target_rate: u32) -> Result<AudioClip, DspError> {
    clip.validate()?;
    if target_rate == 0 {
        return Err(DspError::InvalidConfig("target rate must be positive"));
    }
    if clip.sample_rate == target_rate {
        return Ok(clip.clone());
    }
    let g = gcd(clip.sample_rate as u64, target_rate as u64);
    let up = target_rate as u64 / g;
    let down = clip.sample_rate as u64 / g;
    let n_in = clip.samples.len();
    let n_out = libm::round(n_in as f64 * up as f64 / down as f64) as usize;
    let cutoff = ROLLOFF * (up as f64 / down as f64).min(1.0);
    let table: Option<Vec<[f64; TAPS]>> = (up as usize <= MAX_TABLE_PHASES).then(|| {
        (0..up)
            .map(|p| {
                let mut t = [0.0; TAPS];
                phase_taps(p as f64 / up as f64, cutoff, &mut t);
                t
            })
            .collect()
    });
    let x = &clip.samples;
    let mut out = Vec::with_capacity(n_out);
    let mut taps = [0.0; TAPS];
    for n in 0..n_out {
        let pos = n as u64 * down;
        let base = (pos / up) as isize;
        let phase = (pos % up) as usize;
        let h = match &table {
            Some(t) => &t[phase],
            None => {
                phase_taps(phase as f64 / up as f64, cutoff, &mut taps);
                &taps
            }
        };
        let first = base - (TAPS as isize / 2 - 1);
        let mut acc = 0.0f64;
        for (j, &c) in h.iter().enumerate() {
            let idx = first + j as isize;
            if idx >= 0 && (idx as usize) < n_in {
                acc += c * x[idx as usize] as f64;
            }
        }
        out.push(acc as f32);
    }
    Ok(AudioClip {
        samples: out,
        sample_rate: target_rate,
    })
}

// ---------------------------------------------------------------- spectra

/// Row-major `[n_bins × n_frames]` power spectrogram.
#[derive(Debug, Clone, PartialEq)]
pub struct PowerSpectrogram {
    pub n_bins: usize,
    pub n_frames: usize,
    pub values: Vec<f64>,
}

pub fn stft_power(clip: &AudioClip, cfg: &DspConfig) -> Result<PowerSpectrogram, DspError> {
    cfg.validate()?;
    clip.validate()?;
    if clip.sample_rate != cfg.target_sample_rate {
        return Err(DspError::InvalidAudio("sample rate differs from the DSP target rate"));
    }
    let n = clip.samples.len();
    if n < cfg.fft_size {
        return Err(DspError::TooShort {
            n_samples: n,
            fft_size: cfg.fft_size,
        });
    }
    let n_frames = cfg.n_frames(n);
    let n_bins = cfg.n_bins();
    let window = hann(cfg.fft_size);
    let fft = cfg.fft_size.is_power_of_two().then(|| Fft::new(cfg.fft_size));
    let mut values = vec![0.0; n_bins * n_frames];
    let mut frame = vec![0.0; cfg.fft_size];
    let mut spec = vec![0.0; n_bins];
    let mut scratch = Vec::with_capacity(cfg.fft_size);
    for t in 0..n_frames {
        let start = t * cfg.hop_size;
        for (i, f) in frame.iter_mut().enumerate() {
            *f = clip.samples[start + i] as f64 * window[i];
        }
        power_spectrum(fft.as_ref(), &frame, &mut scratch, &mut spec);
        for (b, &p) in spec.iter().enumerate() {
            values[b * n_frames + t] = p;
        }
    }
    Ok(PowerSpectrogram {
        n_bins,
        n_frames,
        values,
    })
}

/// Row-major `[n_mels × n_bins]` triangular filters with unit peaks.
#[derive(Debug, Clone, PartialEq)]
pub struct Filterbank {
    pub n_mels: usize,
    pub n_bins: usize,
    pub weights: Vec<f64>,
    pub centers_hz: Vec<f64>,
}

pub fn mel_filterbank(cfg: &DspConfig) -> Result<Filterbank, DspError> {
    cfg.validate()?;
    let scale = cfg.mel_scale;
    let n_bins = cfg.n_bins();
    let (lo, hi) = (scale.hz_to_mel(cfg.f_min), scale.hz_to_mel(cfg.f_max));
    let points: Vec<f64> = (0..cfg.n_mels + 2)
        .map(|i| scale.mel_to_hz(lo + (hi - lo) * i as f64 / (cfg.n_mels + 1) as f64))
        .collect();
    let bin_hz = cfg.target_sample_rate as f64 / cfg.fft_size as f64;
    let mut weights = vec![0.0; cfg.n_mels * n_bins];
    for m in 0..cfg.n_mels {
        let (left, center, right) = (points[m], points[m + 1], points[m + 2]);
        let row = &mut weights[m * n_bins..(m + 1) * n_bins];
        for (k, w) in row.iter_mut().enumerate() {
            let f = k as f64 * bin_hz;
            let up = (f - left) / (center - left);
            let down = (right - f) / (right - center);
            *w = up.min(down).max(0.0);
        }
        if row.iter().all(|&w| w == 0.0) {
            return Err(DspError::DegenerateFilterbank { band: m });
        }
    }
    Ok(Filterbank {
        n_mels: cfg.n_mels,
        n_bins,
        weights,
        centers_hz: points[1..=cfg.n_mels].to_vec(),
    })
}

/// Mel energies before log compression, `[n_mels × n_frames]`.
pub fn mel_power(power: &PowerSpectrogram, fb: &Filterbank) -> Vec<f64> {
    let nf = power.n_frames;
    let mut out = vec![0.0; fb.n_mels * nf];
    for m in 0..fb.n_mels {
        let row = &mut out[m * nf..(m + 1) * nf];
        for k in 0..fb.n_bins {
            let w = fb.weights[m * fb.n_bins + k];
            if w == 0.0 {
                continue;
            }
            let src = &power.values[k * nf..(k + 1) * nf];
            for (o, &p) in row.iter_mut().zip(src) {
                *o += w * p;
            }
        }
    }
    out
}

/// `ln(filterbank · |STFT|² + log_floor)`, resampling first when needed.
pub fn log_mel(clip: &AudioClip, cfg: &DspConfig) -> Result<MelSpectrogram, DspError> {
    let fb = mel_filterbank(cfg)?;
    log_mel_with(clip, cfg, &fb)
}

/// [`log_mel`] with a prebuilt filterbank.
pub fn log_mel_with(clip: &AudioClip, cfg: &DspConfig, fb: &Filterbank) -> Result<MelSpectrogram, DspError> {
    let resampled;
    let clip = if clip.sample_rate == cfg.target_sample_rate {
        clip
    } else {
        resampled = resample(clip, cfg.target_sample_rate)?;
        &resampled
    };
    let power = stft_power(clip, cfg)?;
    let mel = mel_power(&power, fb);
    Ok(MelSpectrogram {
        n_mels: fb.n_mels,
        n_frames: power.n_frames,
        values: mel.iter().map(|&v| libm::log(v + cfg.log_floor) as f32).collect(),
        frame_rate: cfg.frame_rate(),
    })
}

// ---------------------------------------------------------------- chunking

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ChunkSpec {
    pub duration_sec: f64,
    pub n_frames: usize,
}

impl ChunkSpec {
    pub fn from_duration(duration_sec: f64, cfg: &DspConfig) -> Self {
        let samples = libm::round(duration_sec * cfg.target_sample_rate as f64) as usize;
        Self {
            duration_sec,
            n_frames: cfg.n_frames(samples).max(1),
        }
    }

    pub fn vggish(cfg: &DspConfig) -> Self {
        Self::from_duration(3.69, cfg)
    }

    pub fn musicnn(cfg: &DspConfig) -> Self {
        Self::from_duration(3.0, cfg)
    }

    pub fn ast(cfg: &DspConfig) -> Self {
        Self::from_duration(8.0, cfg)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ChunkMode {
    /// One uniformly positioned chunk.
    TrainRandom(u64),
    /// Consecutive non-overlapping chunks; a trailing partial chunk is dropped.
    EvalSequential,
}

/// Slices `mel` into `[n_mels × spec.n_frames]` chunks. Recordings shorter
/// than one chunk are right-padded with `pad`.
pub fn chunk(spec: &ChunkSpec, mel: &MelSpectrogram, mode: ChunkMode, pad: f32) -> Vec<Vec<f32>> {
    let (m, n, c) = (mel.n_mels, mel.n_frames, spec.n_frames);
    let take = |start: usize| -> Vec<f32> {
        let mut out = Vec::with_capacity(m * c);
        for row in 0..m {
            let src = &mel.values[row * n..(row + 1) * n];
            let end = (start + c).min(n);
            out.extend_from_slice(&src[start..end]);
            out.extend(core::iter::repeat(pad).take(start + c - end));
        }
        out
    };
    if n < c {
        return vec![take(0)];
    }
    match mode {
        ChunkMode::TrainRandom(seed) => {
            let start = ChaCha8Rng::seed_from_u64(seed).random_range(0..=n - c);
            vec![take(start)]
        }
        ChunkMode::EvalSequential => (0..n / c).map(|k| take(k * c)).collect(),
    }
}
