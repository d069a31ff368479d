//! Acoustic front-end: 16 kHz PCM WAV in, 40-dimensional MFCC frames every
//! 10 ms out, with per-utterance cepstral mean normalization.
//!
//! The MFCC internals are fixed so golden tests stay stable: 25 ms window,
//! pre-emphasis 0.97, Hamming window, power spectrum, 40 mel filters over
//! 20-7600 Hz, log floor 1e-10, orthonormal DCT-II keeping all 40
//! coefficients, no dithering.

use crate::error::{Result, SluError};
use rustfft::num_complex::Complex;
use rustfft::FftPlanner;
use std::io::{Read, Write};
use std::path::Path;

pub const SAMPLE_RATE: u32 = 16_000;
pub const FRAME_LEN: usize = 400; // 25 ms
pub const FRAME_SHIFT: usize = 160; // 10 ms
pub const FFT_SIZE: usize = 512;
pub const NUM_FILTERS: usize = 40;
pub const NUM_CEPSTRA: usize = 40;
pub const PREEMPHASIS: f64 = 0.97;
pub const MEL_LOW_HZ: f64 = 20.0;
pub const MEL_HIGH_HZ: f64 = 7600.0;
pub const LOG_FLOOR: f64 = 1e-10;

const CACHE_MAGIC: &[u8; 4] = b"SLUF";
const CACHE_VERSION: u32 = 1;

#[derive(Debug, Clone)]
pub struct Waveform {
    pub samples: Vec<f32>,
    pub sample_rate: u32,
}

impl Waveform {
    pub fn new(samples: Vec<f32>, sample_rate: u32) -> Result<Self> {
        if samples.is_empty() {
            return Err(SluError::InvalidArgument("empty waveform".into()));
        }
        if samples.iter().any(|s| !s.is_finite()) {
            return Err(SluError::Numeric("non-finite sample in waveform".into()));
        }
        Ok(Waveform {
            samples,
            sample_rate,
        })
    }

    pub fn duration_secs(&self) -> f64 {
        self.samples.len() as f64 / self.sample_rate as f64
    }
}

/// CMN-normalizable MFCC frames, T×40 row-major.
#[derive(Debug, Clone)]
pub struct FeatureSequence {
    frames: Vec<f32>,
    num_frames: usize,
    dim: usize,
    pub frame_shift_secs: f64,
    pub cmn_applied: bool,
}

impl FeatureSequence {
    pub fn from_rows(rows: Vec<Vec<f32>>, cmn_applied: bool) -> Result<Self> {
        if rows.is_empty() {
            return Err(SluError::InvalidArgument("empty feature sequence".into()));
        }
        let dim = rows[0].len();
        let mut frames = Vec::with_capacity(rows.len() * dim);
        for r in &rows {
            if r.len() != dim {
                return Err(SluError::Shape("ragged feature rows".into()));
            }
            frames.extend_from_slice(r);
        }
        Ok(FeatureSequence {
            frames,
            num_frames: rows.len(),
            dim,
            frame_shift_secs: FRAME_SHIFT as f64 / SAMPLE_RATE as f64,
            cmn_applied,
        })
    }

    pub fn num_frames(&self) -> usize {
        self.num_frames
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn frame(&self, t: usize) -> &[f32] {
        &self.frames[t * self.dim..(t + 1) * self.dim]
    }

    pub fn data(&self) -> &[f32] {
        &self.frames
    }
}

/// Decode a 16-bit PCM WAV at 16 kHz; multichannel input is averaged to mono.
pub fn read_wav(path: &Path) -> Result<Waveform> {
    let reader = hound::WavReader::open(path)
        .map_err(|e| SluError::Format(format!("{}: {e}", path.display())))?;
    let spec = reader.spec();
    if spec.sample_rate != SAMPLE_RATE {
        return Err(SluError::UnsupportedRate {
            rate: spec.sample_rate,
        });
    }
    if spec.sample_format != hound::SampleFormat::Int || spec.bits_per_sample != 16 {
        return Err(SluError::Format(format!(
            "{}: only 16-bit integer PCM is supported",
            path.display()
        )));
    }
    let channels = spec.channels as usize;
    if channels == 0 {
        return Err(SluError::Format(format!(
            "{}: zero channels",
            path.display()
        )));
    }
    let raw: std::result::Result<Vec<i16>, _> = reader.into_samples::<i16>().collect();
    let raw = raw.map_err(|e| SluError::Format(format!("{}: {e}", path.display())))?;
    if raw.is_empty() {
        return Err(SluError::Format(format!(
            "{}: no audio samples",
            path.display()
        )));
    }
    let mut samples = Vec::with_capacity(raw.len() / channels);
    for frame in raw.chunks(channels) {
        let sum: f64 = frame.iter().map(|&s| s as f64 / 32768.0).sum();
        samples.push((sum / channels as f64) as f32);
    }
    Waveform::new(samples, SAMPLE_RATE)
}

/// Write mono 16-bit PCM at the waveform's rate, clamping to [-1, 1].
pub fn write_wav(path: &Path, w: &Waveform) -> Result<()> {
    let spec = hound::WavSpec {
        channels: 1,
        sample_rate: w.sample_rate,
        bits_per_sample: 16,
        sample_format: hound::SampleFormat::Int,
    };
    let mut writer = hound::WavWriter::create(path, spec)
        .map_err(|e| SluError::Format(format!("{}: {e}", path.display())))?;
    for &s in &w.samples {
        let v = (s.clamp(-1.0, 1.0) * 32767.0).round() as i16;
        writer
            .write_sample(v)
            .map_err(|e| SluError::Format(format!("{}: {e}", path.display())))?;
    }
    writer
        .finalize()
        .map_err(|e| SluError::Format(format!("{}: {e}", path.display())))?;
    Ok(())
}

/// Number of analysis frames for `n` samples: floor((n - 400)/160) + 1.
pub fn frame_count(n_samples: usize) -> Option<usize> {
    if n_samples < FRAME_LEN {
        None
    } else {
        Some((n_samples - FRAME_LEN) / FRAME_SHIFT + 1)
    }
}

fn hz_to_mel(hz: f64) -> f64 {
    1127.0 * (1.0 + hz / 700.0).ln()
}

fn mel_to_hz(mel: f64) -> f64 {
    700.0 * ((mel / 1127.0).exp() - 1.0)
}

/// Triangular mel filterbank over FFT bins 0..=FFT_SIZE/2.
/// Returns per-filter (bin, weight) lists plus the filter center frequencies.
pub struct MelBank {
    filters: Vec<Vec<(usize, f64)>>,
    /// (left, right) edge frequencies in Hz per filter.
    edges: Vec<(f64, f64)>,
}

impl MelBank {
    pub fn new() -> Self {
        let mel_lo = hz_to_mel(MEL_LOW_HZ);
        let mel_hi = hz_to_mel(MEL_HIGH_HZ);
        let points: Vec<f64> = (0..NUM_FILTERS + 2)
            .map(|i| mel_to_hz(mel_lo + (mel_hi - mel_lo) * i as f64 / (NUM_FILTERS + 1) as f64))
            .collect();
        let bin_hz = SAMPLE_RATE as f64 / FFT_SIZE as f64;
        let num_bins = FFT_SIZE / 2 + 1;
        let mut filters = Vec::with_capacity(NUM_FILTERS);
        let mut edges = Vec::with_capacity(NUM_FILTERS);
        for m in 0..NUM_FILTERS {
            let (left, center, right) = (points[m], points[m + 1], points[m + 2]);
            let mut taps = Vec::new();
            for bin in 0..num_bins {
                let f = bin as f64 * bin_hz;
                if f > left && f < right {
                    let w = if f <= center {
                        (f - left) / (center - left)
                    } else {
                        (right - f) / (right - center)
                    };
                    if w > 0.0 {
                        taps.push((bin, w));
                    }
                }
            }
            filters.push(taps);
            edges.push((left, right));
        }
        MelBank { filters, edges }
    }

    pub fn edges(&self) -> &[(f64, f64)] {
        &self.edges
    }

    /// Filterbank outputs for one power spectrum (FFT_SIZE/2 + 1 bins).
    pub fn apply(&self, power: &[f64]) -> Vec<f64> {
        self.filters
            .iter()
            .map(|taps| taps.iter().map(|&(bin, w)| power[bin] * w).sum())
            .collect()
    }
}

impl Default for MelBank {
    fn default() -> Self {
        Self::new()
    }
}

pub struct MfccExtractor {
    bank: MelBank,
    window: Vec<f64>,
    dct: Vec<f64>, // NUM_CEPSTRA × NUM_FILTERS row-major
    planner: FftPlanner<f64>,
}

impl MfccExtractor {
    pub fn new() -> Self {
        let window: Vec<f64> = (0..FRAME_LEN)
            .map(|n| {
                0.54 - 0.46
                    * (2.0 * std::f64::consts::PI * n as f64 / (FRAME_LEN - 1) as f64).cos()
            })
            .collect();
        let n = NUM_FILTERS as f64;
        let mut dct = Vec::with_capacity(NUM_CEPSTRA * NUM_FILTERS);
        for k in 0..NUM_CEPSTRA {
            let scale = if k == 0 {
                (1.0 / n).sqrt()
            } else {
                (2.0 / n).sqrt()
            };
            for i in 0..NUM_FILTERS {
                dct.push(
                    scale
                        * (std::f64::consts::PI * k as f64 * (i as f64 + 0.5) / n).cos(),
                );
            }
        }
        MfccExtractor {
            bank: MelBank::new(),
            window,
            dct,
            planner: FftPlanner::new(),
        }
    }

    pub fn mel_bank(&self) -> &MelBank {
        &self.bank
    }

    /// Power spectrum of one pre-emphasized, windowed frame.
    pub fn power_spectrum(&mut self, frame: &[f32]) -> Vec<f64> {
        debug_assert_eq!(frame.len(), FRAME_LEN);
        let mut buf: Vec<Complex<f64>> = Vec::with_capacity(FFT_SIZE);
        let mut prev = frame[0] as f64;
        for (n, &s) in frame.iter().enumerate() {
            let s = s as f64;
            let pre = s - PREEMPHASIS * prev;
            prev = s;
            buf.push(Complex::new(pre * self.window[n], 0.0));
        }
        buf.resize(FFT_SIZE, Complex::new(0.0, 0.0));
        let fft = self.planner.plan_fft_forward(FFT_SIZE);
        fft.process(&mut buf);
        buf[..FFT_SIZE / 2 + 1].iter().map(|c| c.norm_sqr()).collect()
    }

    /// Log mel filterbank energies of one frame (the pre-DCT stage).
    pub fn log_mel_energies(&mut self, frame: &[f32]) -> Vec<f64> {
        let power = self.power_spectrum(frame);
        self.bank
            .apply(&power)
            .iter()
            .map(|&e| e.max(LOG_FLOOR).ln())
            .collect()
    }

    fn cepstra(&mut self, frame: &[f32]) -> Vec<f32> {
        let log_mel = self.log_mel_energies(frame);
        (0..NUM_CEPSTRA)
            .map(|k| {
                let row = &self.dct[k * NUM_FILTERS..(k + 1) * NUM_FILTERS];
                row.iter()
                    .zip(&log_mel)
                    .map(|(&d, &e)| d * e)
                    .sum::<f64>() as f32
            })
            .collect()
    }
}

impl Default for MfccExtractor {
    fn default() -> Self {
        Self::new()
    }
}

/// 40-d MFCCs every 10 ms; `cmn_applied` is false on the result.
pub fn compute_mfcc(w: &Waveform) -> Result<FeatureSequence> {
    if w.sample_rate != SAMPLE_RATE {
        return Err(SluError::UnsupportedRate {
            rate: w.sample_rate,
        });
    }
    let t = frame_count(w.samples.len()).ok_or_else(|| {
        SluError::InvalidArgument(format!(
            "waveform of {} samples is shorter than one {}-sample window",
            w.samples.len(),
            FRAME_LEN
        ))
    })?;
    let mut extractor = MfccExtractor::new();
    let mut rows = Vec::with_capacity(t);
    for i in 0..t {
        let start = i * FRAME_SHIFT;
        rows.push(extractor.cepstra(&w.samples[start..start + FRAME_LEN]));
    }
    FeatureSequence::from_rows(rows, false)
}

/// Subtract the per-coefficient mean over all frames of this utterance.
pub fn apply_cmn(f: &FeatureSequence) -> Result<FeatureSequence> {
    if f.cmn_applied {
        return Err(SluError::InvalidState(
            "cepstral mean normalization already applied".into(),
        ));
    }
    let (t, d) = (f.num_frames, f.dim);
    let mut mean = vec![0.0f64; d];
    for i in 0..t {
        for (m, &v) in mean.iter_mut().zip(f.frame(i)) {
            *m += v as f64;
        }
    }
    for m in &mut mean {
        *m /= t as f64;
    }
    let mut out = f.clone();
    for i in 0..t {
        let row = &mut out.frames[i * d..(i + 1) * d];
        for (v, &m) in row.iter_mut().zip(&mean) {
            *v = (*v as f64 - m) as f32;
        }
    }
    out.cmn_applied = true;
    Ok(out)
}

/// Full front-end: read, MFCC, CMN.
pub fn extract_features(path: &Path) -> Result<FeatureSequence> {
    let w = read_wav(path)?;
    apply_cmn(&compute_mfcc(&w)?)
}

/// Write one utterance's features as a little-endian "SLUF" container.
pub fn write_feature_cache(path: &Path, f: &FeatureSequence) -> Result<()> {
    let mut buf = Vec::with_capacity(16 + f.frames.len() * 4);
    buf.extend_from_slice(CACHE_MAGIC);
    buf.extend_from_slice(&CACHE_VERSION.to_le_bytes());
    buf.extend_from_slice(&(f.num_frames as u32).to_le_bytes());
    buf.extend_from_slice(&(f.dim as u32).to_le_bytes());
    for &v in &f.frames {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    let mut file = std::fs::File::create(path).map_err(|e| SluError::io(path, e))?;
    file.write_all(&buf).map_err(|e| SluError::io(path, e))?;
    Ok(())
}

pub fn read_feature_cache(path: &Path) -> Result<FeatureSequence> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)
        .map_err(|e| SluError::io(path, e))?
        .read_to_end(&mut bytes)
        .map_err(|e| SluError::io(path, e))?;
    if bytes.len() < 16 || &bytes[0..4] != CACHE_MAGIC {
        return Err(SluError::Format(format!(
            "{}: not a feature cache file",
            path.display()
        )));
    }
    let word = |off: usize| u32::from_le_bytes(bytes[off..off + 4].try_into().unwrap());
    let version = word(4);
    if version != CACHE_VERSION {
        return Err(SluError::Format(format!(
            "{}: unsupported cache version {version}",
            path.display()
        )));
    }
    let t = word(8) as usize;
    let dim = word(12) as usize;
    let expected = 16 + t * dim * 4;
    if bytes.len() != expected {
        return Err(SluError::Format(format!(
            "{}: truncated cache ({} bytes, expected {expected})",
            path.display(),
            bytes.len()
        )));
    }
    let mut frames = Vec::with_capacity(t * dim);
    for i in 0..t * dim {
        let off = 16 + i * 4;
        frames.push(f32::from_le_bytes(bytes[off..off + 4].try_into().unwrap()));
    }
    Ok(FeatureSequence {
        frames,
        num_frames: t,
        dim,
        frame_shift_secs: FRAME_SHIFT as f64 / SAMPLE_RATE as f64,
        cmn_applied: true,
    })
}
