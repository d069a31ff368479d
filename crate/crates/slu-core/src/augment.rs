//! Audio augmentation: reverberation, music, babble and noise injection.
//! Each training utterance gains four corrupted copies (a 5x training set).
//!
//! Noise sources are synthetic so the toolkit is self-contained; a noise
//! directory of user WAVs can replace them for the additive kinds.

use crate::data::{Manifest, UtteranceRecord};
use crate::derive_seed;
use crate::error::{Result, SluError};
use crate::features::{read_wav, write_wav, Waveform, SAMPLE_RATE};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use rustfft::num_complex::Complex;
use rustfft::FftPlanner;
use std::path::{Path, PathBuf};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum AugmentKind {
    Reverb,
    Music,
    Babble,
    Noise,
}

impl AugmentKind {
    pub const ALL: [AugmentKind; 4] = [
        AugmentKind::Reverb,
        AugmentKind::Music,
        AugmentKind::Babble,
        AugmentKind::Noise,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            AugmentKind::Reverb => "reverb",
            AugmentKind::Music => "music",
            AugmentKind::Babble => "babble",
            AugmentKind::Noise => "noise",
        }
    }
}

/// One concrete corruption drawn for a record.
#[derive(Debug, Clone)]
pub struct AugmentSpec {
    pub kind: AugmentKind,
    pub snr_db: Option<f64>,
    pub rir: Option<Vec<f32>>,
    pub seed: u64,
}

/// SNR ranges and reverb strength for the pipeline. Defaults follow the
/// usual Kaldi-style augmentation ranges.
#[derive(Debug, Clone)]
pub struct AugmentConfig {
    pub seed: u64,
    pub noise_snr_db: (f64, f64),
    pub music_snr_db: (f64, f64),
    pub babble_snr_db: (f64, f64),
    pub babble_speakers: (usize, usize),
    pub rt60: (f64, f64),
    pub noise_dir: Option<PathBuf>,
}

impl AugmentConfig {
    pub fn new(seed: u64) -> Self {
        AugmentConfig {
            seed,
            noise_snr_db: (0.0, 15.0),
            music_snr_db: (5.0, 15.0),
            babble_snr_db: (13.0, 20.0),
            babble_speakers: (3, 7),
            rt60: (0.2, 0.8),
            noise_dir: None,
        }
    }
}

pub fn mean_power(samples: &[f32]) -> f64 {
    samples.iter().map(|&s| (s as f64) * (s as f64)).sum::<f64>() / samples.len() as f64
}

/// Exponentially decaying noise tail behind a unit direct-path impulse.
/// Amplitude decays so energy is 60 dB down at rt60; length ceil(rt60*rate).
pub fn synthesize_rir(rt60: f64, sample_rate: u32, seed: u64) -> Result<Vec<f32>> {
    if !(0.1..=1.0).contains(&rt60) {
        return Err(SluError::InvalidArgument(format!(
            "rt60 {rt60} outside [0.1, 1.0] s"
        )));
    }
    let len = (rt60 * sample_rate as f64).ceil() as usize;
    let mut rir = Vec::with_capacity(len.max(1));
    rir.push(1.0f32);
    if len <= 1 {
        return Ok(rir);
    }
    // 60 dB energy decay at rt60: amplitude envelope exp(-t * ln(1000)/rt60)
    let decay = (1000.0f64).ln() / rt60;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for n in 1..len {
        let t = n as f64 / sample_rate as f64;
        let g: f64 = StandardNormal.sample(&mut rng);
        rir.push((0.3 * g * (-decay * t).exp()) as f32);
    }
    Ok(rir)
}

/// Full convolution truncated to the input's length, peak-normalized to the
/// input's peak. Uses an FFT product; the naive O(N*K) form is the test oracle.
pub fn reverberate(w: &Waveform, rir: &[f32]) -> Result<Waveform> {
    if rir.is_empty() {
        return Err(SluError::InvalidArgument("empty impulse response".into()));
    }
    let n = w.samples.len();
    let k = rir.len();
    let full = n + k - 1;
    let size = full.next_power_of_two();
    let mut planner = FftPlanner::<f64>::new();
    let fft = planner.plan_fft_forward(size);
    let ifft = planner.plan_fft_inverse(size);

    let mut xa: Vec<Complex<f64>> = w
        .samples
        .iter()
        .map(|&s| Complex::new(s as f64, 0.0))
        .collect();
    xa.resize(size, Complex::new(0.0, 0.0));
    let mut ha: Vec<Complex<f64>> = rir.iter().map(|&s| Complex::new(s as f64, 0.0)).collect();
    ha.resize(size, Complex::new(0.0, 0.0));
    fft.process(&mut xa);
    fft.process(&mut ha);
    for (x, h) in xa.iter_mut().zip(&ha) {
        *x *= h;
    }
    ifft.process(&mut xa);
    let scale = 1.0 / size as f64;

    let in_peak = w.samples.iter().fold(0.0f64, |m, &s| m.max(s.abs() as f64));
    let raw: Vec<f64> = xa[..n].iter().map(|c| c.re * scale).collect();
    let out_peak = raw.iter().fold(0.0f64, |m, &s| m.max(s.abs()));
    let norm = if out_peak > 0.0 && in_peak > 0.0 {
        in_peak / out_peak
    } else {
        1.0
    };
    Waveform::new(raw.iter().map(|&s| (s * norm) as f32).collect(), w.sample_rate)
}

/// Loop or crop `noise` to the signal length, scale it so the mixture's
/// component powers sit at `snr_db`, and add.
pub fn add_noise_at_snr(w: &Waveform, noise: &Waveform, snr_db: f64) -> Result<Waveform> {
    if w.sample_rate != noise.sample_rate {
        return Err(SluError::InvalidArgument(format!(
            "sample rate mismatch: {} vs {}",
            w.sample_rate, noise.sample_rate
        )));
    }
    let n = w.samples.len();
    let mut fitted = Vec::with_capacity(n);
    while fitted.len() < n {
        let take = (n - fitted.len()).min(noise.samples.len());
        fitted.extend_from_slice(&noise.samples[..take]);
    }
    let p_signal = mean_power(&w.samples);
    let p_noise = mean_power(&fitted);
    if p_noise == 0.0 {
        return Err(SluError::InvalidArgument("zero-power noise".into()));
    }
    if p_signal == 0.0 {
        return Err(SluError::InvalidArgument("zero-power signal".into()));
    }
    let scale = (p_signal / (p_noise * 10f64.powf(snr_db / 10.0))).sqrt();
    let samples = w
        .samples
        .iter()
        .zip(&fitted)
        .map(|(&s, &v)| s + (v as f64 * scale) as f32)
        .collect();
    Waveform::new(samples, w.sample_rate)
}

fn normalize_rms(samples: &mut [f32], target_rms: f64) {
    let p = mean_power(samples);
    if p > 0.0 {
        let g = (target_rms * target_rms / p).sqrt() as f32;
        for s in samples.iter_mut() {
            *s *= g;
        }
    }
}

/// Band-limit white noise by zeroing FFT bins outside [lo, hi] Hz.
fn bandpass_noise(len: usize, lo: f64, hi: f64, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let size = len.next_power_of_two();
    let mut planner = FftPlanner::<f64>::new();
    let fft = planner.plan_fft_forward(size);
    let ifft = planner.plan_fft_inverse(size);
    let mut buf: Vec<Complex<f64>> = (0..size)
        .map(|_| Complex::new(StandardNormal.sample(rng), 0.0))
        .collect();
    fft.process(&mut buf);
    let bin_hz = SAMPLE_RATE as f64 / size as f64;
    for (i, v) in buf.iter_mut().enumerate() {
        let f = if i <= size / 2 {
            i as f64 * bin_hz
        } else {
            (size - i) as f64 * bin_hz
        };
        if f < lo || f > hi {
            *v = Complex::new(0.0, 0.0);
        }
    }
    ifft.process(&mut buf);
    let scale = 1.0 / size as f64;
    buf[..len].iter().map(|c| c.re * scale).collect()
}

/// Sum of amplitude-modulated band-limited noise streams, RMS-normalized.
/// Each stream mimics one background talker's syllabic envelope.
pub fn make_babble(num_speakers: usize, duration: f64, seed: u64) -> Result<Waveform> {
    if !(3..=7).contains(&num_speakers) {
        return Err(SluError::InvalidArgument(format!(
            "babble speakers {num_speakers} outside 3..=7"
        )));
    }
    let n = (duration * SAMPLE_RATE as f64) as usize;
    if n == 0 {
        return Err(SluError::InvalidArgument("zero-length babble".into()));
    }
    let mut mix = vec![0.0f64; n];
    for s in 0..num_speakers {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, s as u64));
        let carrier = bandpass_noise(n, 120.0, 4000.0, &mut rng);
        let rate = rng.random_range(2.0..6.0);
        let rate2 = rng.random_range(0.5..2.0);
        let phase = rng.random_range(0.0..std::f64::consts::TAU);
        let phase2 = rng.random_range(0.0..std::f64::consts::TAU);
        for (i, (&c, m)) in carrier.iter().zip(mix.iter_mut()).enumerate() {
            let t = i as f64 / SAMPLE_RATE as f64;
            let env = 0.5 * (1.0 + (std::f64::consts::TAU * rate * t + phase).sin())
                * 0.5
                * (1.0 + (std::f64::consts::TAU * rate2 * t + phase2).sin());
            *m += c * env * env;
        }
    }
    let mut samples: Vec<f32> = mix.iter().map(|&v| v as f32).collect();
    normalize_rms(&mut samples, 0.1);
    Waveform::new(samples, SAMPLE_RATE)
}

/// Synthetic music bed: a random pentatonic note sequence with harmonics.
pub fn make_music(duration: f64, seed: u64) -> Result<Waveform> {
    let n = (duration * SAMPLE_RATE as f64) as usize;
    if n == 0 {
        return Err(SluError::InvalidArgument("zero-length music".into()));
    }
    let degrees = [0, 3, 5, 7, 10, 12, 15, 17, 19, 22];
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut samples = vec![0.0f32; n];
    let mut pos = 0usize;
    while pos < n {
        let dur = (rng.random_range(0.2..0.45) * SAMPLE_RATE as f64) as usize;
        let deg = degrees[rng.random_range(0..degrees.len())];
        let freq = 220.0 * 2f64.powf(deg as f64 / 12.0);
        let amp = rng.random_range(0.3..0.6);
        let end = (pos + dur).min(n);
        let len = end - pos;
        for i in 0..len {
            let t = i as f64 / SAMPLE_RATE as f64;
            let env = (1.0 - i as f64 / len as f64).powf(0.5);
            let v = amp
                * env
                * ((std::f64::consts::TAU * freq * t).sin()
                    + 0.5 * (std::f64::consts::TAU * 2.0 * freq * t).sin()
                    + 0.25 * (std::f64::consts::TAU * 3.0 * freq * t).sin());
            samples[pos + i] += v as f32;
        }
        pos = end;
    }
    normalize_rms(&mut samples, 0.1);
    Waveform::new(samples, SAMPLE_RATE)
}

/// White Gaussian noise, RMS-normalized.
pub fn make_noise(duration: f64, seed: u64) -> Result<Waveform> {
    let n = (duration * SAMPLE_RATE as f64) as usize;
    if n == 0 {
        return Err(SluError::InvalidArgument("zero-length noise".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut samples: Vec<f32> = (0..n)
        .map(|_| {
            let g: f64 = StandardNormal.sample(&mut rng);
            g as f32
        })
        .collect();
    normalize_rms(&mut samples, 0.1);
    Waveform::new(samples, SAMPLE_RATE)
}

fn pick_noise_source(dir: &Path, rng: &mut ChaCha8Rng) -> Result<Waveform> {
    let mut files: Vec<PathBuf> = std::fs::read_dir(dir)
        .map_err(|e| SluError::io(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().map(|x| x == "wav").unwrap_or(false))
        .collect();
    files.sort();
    if files.is_empty() {
        return Err(SluError::Data(format!(
            "noise directory {} holds no .wav files",
            dir.display()
        )));
    }
    read_wav(&files[rng.random_range(0..files.len())])
}

/// Apply one corruption. The signal's sample count is preserved exactly.
pub fn apply_augmentation(
    w: &Waveform,
    spec: &AugmentSpec,
    config: &AugmentConfig,
) -> Result<Waveform> {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let duration = w.duration_secs();
    match spec.kind {
        AugmentKind::Reverb => {
            let rir = match &spec.rir {
                Some(r) => r.clone(),
                None => {
                    return Err(SluError::InvalidArgument(
                        "reverb spec without impulse response".into(),
                    ))
                }
            };
            reverberate(w, &rir)
        }
        AugmentKind::Music | AugmentKind::Noise | AugmentKind::Babble => {
            let snr = spec.snr_db.ok_or_else(|| {
                SluError::InvalidArgument("additive spec without SNR".into())
            })?;
            let source = if let Some(dir) = &config.noise_dir {
                pick_noise_source(dir, &mut rng)?
            } else {
                match spec.kind {
                    AugmentKind::Music => make_music(duration, derive_seed(spec.seed, 1))?,
                    AugmentKind::Noise => make_noise(duration, derive_seed(spec.seed, 2))?,
                    AugmentKind::Babble => {
                        let speakers = rng
                            .random_range(config.babble_speakers.0..=config.babble_speakers.1);
                        make_babble(speakers, duration, derive_seed(spec.seed, 3))?
                    }
                    AugmentKind::Reverb => unreachable!(),
                }
            };
            add_noise_at_snr(w, &source, snr)
        }
    }
}

/// Draw the per-record corruption specs deterministically from the config.
pub fn draw_specs(config: &AugmentConfig, record_index: usize) -> Result<Vec<AugmentSpec>> {
    let base = derive_seed(config.seed, record_index as u64);
    let mut specs = Vec::with_capacity(4);
    for (k, kind) in AugmentKind::ALL.into_iter().enumerate() {
        let seed = derive_seed(base, k as u64);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let spec = match kind {
            AugmentKind::Reverb => {
                let rt60 = rng.random_range(config.rt60.0..config.rt60.1);
                AugmentSpec {
                    kind,
                    snr_db: None,
                    rir: Some(synthesize_rir(rt60, SAMPLE_RATE, derive_seed(seed, 7))?),
                    seed,
                }
            }
            AugmentKind::Music => AugmentSpec {
                kind,
                snr_db: Some(rng.random_range(config.music_snr_db.0..config.music_snr_db.1)),
                rir: None,
                seed,
            },
            AugmentKind::Babble => AugmentSpec {
                kind,
                snr_db: Some(rng.random_range(config.babble_snr_db.0..config.babble_snr_db.1)),
                rir: None,
                seed,
            },
            AugmentKind::Noise => AugmentSpec {
                kind,
                snr_db: Some(rng.random_range(config.noise_snr_db.0..config.noise_snr_db.1)),
                rir: None,
                seed,
            },
        };
        specs.push(spec);
    }
    Ok(specs)
}

/// Produce the 5x manifest: every original record followed by its four
/// corrupted copies, written under `out_dir/audio`. Labels, wording and
/// speaker are copied verbatim. Any record-level failure fails the run.
pub fn augment_manifest(
    manifest: &[UtteranceRecord],
    config: &AugmentConfig,
    out_dir: &Path,
) -> Result<Manifest> {
    let audio_dir = out_dir.join("audio");
    std::fs::create_dir_all(&audio_dir).map_err(|e| SluError::io(&audio_dir, e))?;

    let results: Vec<Result<Vec<UtteranceRecord>>> = manifest
        .par_iter()
        .enumerate()
        .map(|(i, record)| augment_record(record, i, config, &audio_dir))
        .collect();

    let mut out = Vec::with_capacity(manifest.len() * 5);
    let mut failures = Vec::new();
    for (i, r) in results.into_iter().enumerate() {
        match r {
            Ok(records) => out.extend(records),
            Err(e) => failures.push(format!(
                "record {} ({}): {e}",
                i,
                manifest[i].audio_path.display()
            )),
        }
    }
    if !failures.is_empty() {
        return Err(SluError::Data(format!(
            "{} of {} records failed augmentation; first: {}",
            failures.len(),
            manifest.len(),
            failures[0]
        )));
    }
    Ok(out)
}

fn augment_record(
    record: &UtteranceRecord,
    index: usize,
    config: &AugmentConfig,
    audio_dir: &Path,
) -> Result<Vec<UtteranceRecord>> {
    let w = read_wav(&record.audio_path)?;
    let stem = record
        .audio_path
        .file_stem()
        .map(|s| s.to_string_lossy().to_string())
        .unwrap_or_else(|| format!("utt{index}"));
    let mut out = vec![record.clone()];
    for spec in draw_specs(config, index)? {
        let corrupted = apply_augmentation(&w, &spec, config)?;
        debug_assert_eq!(corrupted.samples.len(), w.samples.len());
        let path = audio_dir.join(format!("{stem}_{:05}_{}.wav", index, spec.kind.as_str()));
        write_wav(&path, &corrupted)?;
        let mut rec = record.clone();
        rec.audio_path = path;
        out.push(rec);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sine(freq: f64, secs: f64, amp: f32) -> Waveform {
        let n = (secs * SAMPLE_RATE as f64) as usize;
        let samples = (0..n)
            .map(|i| {
                amp * (std::f64::consts::TAU * freq * i as f64 / SAMPLE_RATE as f64).sin() as f32
            })
            .collect();
        Waveform::new(samples, SAMPLE_RATE).unwrap()
    }

    #[test]
    fn rir_length_and_decay() {
        let rir = synthesize_rir(0.5, 16_000, 42).unwrap();
        assert_eq!(rir.len(), 8000);
        assert_eq!(rir[0], 1.0, "unit direct path");
        let head = mean_power(&rir[..800]);
        let tail = mean_power(&rir[7200..]);
        let drop_db = 10.0 * (head / tail).log10();
        assert!(drop_db >= 50.0, "only {drop_db:.1} dB decay");
    }

    #[test]
    fn rir_degenerate_length_is_unit_impulse() {
        // 1 Hz sample rate makes ceil(rt60*rate) == 1
        let rir = synthesize_rir(0.5, 1, 0).unwrap();
        assert_eq!(rir, vec![1.0]);
    }

    #[test]
    fn rir_is_deterministic_and_validates_range() {
        let a = synthesize_rir(0.3, 16_000, 9).unwrap();
        let b = synthesize_rir(0.3, 16_000, 9).unwrap();
        assert_eq!(a, b);
        assert!(synthesize_rir(0.05, 16_000, 0).is_err());
        assert!(synthesize_rir(1.5, 16_000, 0).is_err());
    }

    #[test]
    fn reverb_with_unit_impulse_is_identity() {
        let w = sine(440.0, 0.1, 0.5);
        let y = reverberate(&w, &[1.0]).unwrap();
        assert_eq!(y.samples.len(), w.samples.len());
        for (a, b) in y.samples.iter().zip(&w.samples) {
            assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn reverb_with_delayed_impulse_shifts() {
        let w = sine(200.0, 0.05, 0.4);
        let k = 37;
        let mut rir = vec![0.0f32; k + 1];
        rir[k] = 1.0;
        let y = reverberate(&w, &rir).unwrap();
        assert_eq!(y.samples.len(), w.samples.len());
        // peak-normalized; shifted content matches up to the common gain
        let gain = y.samples[k + 100] / w.samples[100];
        for i in 0..w.samples.len() - k {
            let expect = w.samples[i] * gain;
            assert!(
                (y.samples[i + k] - expect).abs() < 1e-4,
                "i={i}: {} vs {}",
                y.samples[i + k],
                expect
            );
        }
        for s in &y.samples[..k] {
            assert!(s.abs() < 1e-6, "pre-delay samples must be silent");
        }
    }

    #[test]
    fn reverb_matches_naive_convolution_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let w = Waveform::new(
            (0..400).map(|_| rng.random_range(-0.5f32..0.5)).collect(),
            SAMPLE_RATE,
        )
        .unwrap();
        let rir: Vec<f32> = (0..31).map(|_| rng.random_range(-0.3f32..0.3)).collect();
        let y = reverberate(&w, &rir).unwrap();

        // naive O(N*K) convolution in f64, then the same truncation + peak norm
        let n = w.samples.len();
        let mut full = vec![0.0f64; n + rir.len() - 1];
        for (i, &x) in w.samples.iter().enumerate() {
            for (j, &h) in rir.iter().enumerate() {
                full[i + j] += x as f64 * h as f64;
            }
        }
        let in_peak = w.samples.iter().fold(0.0f64, |m, &s| m.max(s.abs() as f64));
        let out_peak = full[..n].iter().fold(0.0f64, |m, &s| m.max(s.abs()));
        let norm = in_peak / out_peak;
        for (a, &b) in y.samples.iter().zip(full[..n].iter()) {
            assert!((*a as f64 - b * norm).abs() < 1e-6);
        }
    }

    #[test]
    fn reverb_rejects_empty_rir() {
        let w = sine(100.0, 0.01, 0.1);
        assert!(reverberate(&w, &[]).is_err());
    }

    #[test]
    fn snr_zero_db_means_equal_power() {
        let w = sine(440.0, 0.25, 0.5);
        let noise = make_noise(0.25, 3).unwrap();
        let mix = add_noise_at_snr(&w, &noise, 0.0).unwrap();
        let scaled: Vec<f32> = mix
            .samples
            .iter()
            .zip(&w.samples)
            .map(|(&m, &s)| m - s)
            .collect();
        let measured = 10.0 * (mean_power(&w.samples) / mean_power(&scaled)).log10();
        assert!(measured.abs() < 0.1, "measured {measured:.3} dB");
    }

    #[test]
    fn snr_sixty_db_barely_changes_signal() {
        let w = sine(440.0, 0.25, 0.5);
        let noise = make_noise(0.25, 4).unwrap();
        let mix = add_noise_at_snr(&w, &noise, 60.0).unwrap();
        let diff: Vec<f32> = mix
            .samples
            .iter()
            .zip(&w.samples)
            .map(|(&m, &s)| m - s)
            .collect();
        // 60 dB down is a relative RMS of exactly 1e-3 by construction
        let rel = (mean_power(&diff) / mean_power(&w.samples)).sqrt();
        assert!(rel < 0.001 + 1e-6, "relative RMS {rel}");
    }

    #[test]
    fn snr_ten_db_remeasures_within_tenth_db() {
        let w = sine(523.0, 0.5, 0.4);
        let noise = make_noise(0.2, 5).unwrap(); // shorter: exercises looping
        let mix = add_noise_at_snr(&w, &noise, 10.0).unwrap();
        assert_eq!(mix.samples.len(), w.samples.len());
        let scaled: Vec<f32> = mix
            .samples
            .iter()
            .zip(&w.samples)
            .map(|(&m, &s)| m - s)
            .collect();
        let measured = 10.0 * (mean_power(&w.samples) / mean_power(&scaled)).log10();
        assert!((measured - 10.0).abs() < 0.1, "measured {measured:.3} dB");
    }

    #[test]
    fn snr_rejects_degenerate_powers() {
        let w = sine(440.0, 0.1, 0.5);
        let silent = Waveform::new(vec![0.0; 1600], SAMPLE_RATE).unwrap();
        assert!(add_noise_at_snr(&w, &silent, 10.0).is_err());
        assert!(add_noise_at_snr(&silent, &w, 10.0).is_err());
    }

    #[test]
    fn babble_length_rms_and_determinism() {
        let b = make_babble(3, 1.0, 17).unwrap();
        assert_eq!(b.samples.len(), 16_000);
        let rms = mean_power(&b.samples).sqrt();
        assert!((rms - 0.1).abs() < 0.001, "rms {rms}");
        let b2 = make_babble(3, 1.0, 17).unwrap();
        assert_eq!(b.samples, b2.samples);
        assert!(make_babble(2, 1.0, 0).is_err());
        assert!(make_babble(8, 1.0, 0).is_err());
    }

    fn excess_kurtosis(x: &[f32]) -> f64 {
        let n = x.len() as f64;
        let mean = x.iter().map(|&v| v as f64).sum::<f64>() / n;
        let m2 = x.iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / n;
        let m4 = x.iter().map(|&v| (v as f64 - mean).powi(4)).sum::<f64>() / n;
        m4 / (m2 * m2) - 3.0
    }

    #[test]
    fn more_babble_speakers_look_more_gaussian() {
        let mut k3 = 0.0;
        let mut k7 = 0.0;
        for seed in 0..10 {
            k3 += excess_kurtosis(&make_babble(3, 1.0, seed).unwrap().samples);
            k7 += excess_kurtosis(&make_babble(7, 1.0, seed).unwrap().samples);
        }
        assert!(
            k7 < k3,
            "7-speaker mean excess kurtosis {k7:.3} should be below 3-speaker {k3:.3}"
        );
    }

    #[test]
    fn augment_manifest_five_x_with_labels_preserved() {
        let dir = tempfile::tempdir().unwrap();
        let mut manifest = Vec::new();
        for i in 0..10 {
            let path = dir.path().join(format!("src{i}.wav"));
            write_wav(&path, &sine(300.0 + 40.0 * i as f64, 0.15, 0.4)).unwrap();
            manifest.push(UtteranceRecord {
                audio_path: path,
                speaker_id: format!("s{i}"),
                transcription: format!("wording {i}"),
                action: "inc".into(),
                object: format!("obj{}", i % 3),
                location: "none".into(),
            });
        }
        let config = AugmentConfig::new(77);
        let out_dir = dir.path().join("aug");
        let out = augment_manifest(&manifest, &config, &out_dir).unwrap();
        assert_eq!(out.len(), 50, "5x expansion");
        for (i, chunk) in out.chunks(5).enumerate() {
            assert_eq!(chunk[0], manifest[i], "original record kept verbatim");
            let w = read_wav(&manifest[i].audio_path).unwrap();
            for aug in &chunk[1..] {
                assert_eq!(aug.action, manifest[i].action);
                assert_eq!(aug.object, manifest[i].object);
                assert_eq!(aug.location, manifest[i].location);
                assert_eq!(aug.transcription, manifest[i].transcription);
                assert_eq!(aug.speaker_id, manifest[i].speaker_id);
                let a = read_wav(&aug.audio_path).unwrap();
                assert_eq!(a.samples.len(), w.samples.len(), "sample count preserved");
            }
        }
    }

    #[test]
    fn augment_manifest_is_deterministic() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("one.wav");
        write_wav(&path, &sine(500.0, 0.12, 0.45)).unwrap();
        let manifest = vec![UtteranceRecord {
            audio_path: path,
            speaker_id: "s".into(),
            transcription: "w".into(),
            action: "a".into(),
            object: "o".into(),
            location: "l".into(),
        }];
        let config = AugmentConfig::new(5);
        let out1 = augment_manifest(&manifest, &config, &dir.path().join("r1")).unwrap();
        let out2 = augment_manifest(&manifest, &config, &dir.path().join("r2")).unwrap();
        for (a, b) in out1.iter().zip(&out2).skip(1) {
            let ba = std::fs::read(&a.audio_path).unwrap();
            let bb = std::fs::read(&b.audio_path).unwrap();
            assert_eq!(ba, bb, "same seed must produce identical audio bytes");
        }
    }

    #[test]
    fn augment_manifest_fails_on_unreadable_audio() {
        let dir = tempfile::tempdir().unwrap();
        let manifest = vec![UtteranceRecord {
            audio_path: dir.path().join("missing.wav"),
            speaker_id: "s".into(),
            transcription: "w".into(),
            action: "a".into(),
            object: "o".into(),
            location: "l".into(),
        }];
        let config = AugmentConfig::new(1);
        let err = augment_manifest(&manifest, &config, &dir.path().join("out")).unwrap_err();
        assert!(err.to_string().contains("missing.wav"));
    }
}
