//! Audio frontend: raw samples to log-mel features.

pub mod wav;

use rustfft::{num_complex::Complex, FftPlanner};
use thiserror::Error;

pub const LOG_FLOOR: f64 = 1e-10;

#[derive(Debug, Error)]
pub enum DspError {
    #[error("audio is empty")]
    EmptyAudio,
    #[error("audio contains non-finite samples")]
    NonFiniteAudio,
    #[error("audio too short: {len} samples, need at least one window of {window}")]
    TooShort { len: usize, window: usize },
    #[error("invalid mel range: fmin {fmin} must be < fmax {fmax} <= sr/2 = {nyquist}")]
    BadMelRange { fmin: f64, fmax: f64, nyquist: f64 },
    #[error("mel filter {index} is empty: too many bands for the FFT resolution")]
    EmptyMelFilter { index: usize },
    #[error("sample rate mismatch: configured {expected} Hz, file has {got} Hz")]
    SampleRateMismatch { expected: u32, got: u32 },
    #[error("unsupported wav format: {0}")]
    UnsupportedFormat(String),
    #[error("wav error: {0}")]
    Wav(#[from] hound::Error),
}

/// Feature-extraction settings. The fingerprint travels with corpora and
/// checkpoints so mismatched features are rejected instead of silently
/// degrading metrics.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DspConfig {
    pub sample_rate: u32,
    pub window: usize,
    pub hop: usize,
    pub n_mels: usize,
}

impl Default for DspConfig {
    fn default() -> Self {
        Self { sample_rate: 32000, window: 2048, hop: 1024, n_mels: 64 }
    }
}

impl DspConfig {
    pub fn fingerprint(&self) -> String {
        format!(
            "stft{}/{}-mel{}htk-sr{}",
            self.window, self.hop, self.n_mels, self.sample_rate
        )
    }

    pub fn frames_for(&self, samples: usize) -> usize {
        if samples < self.window {
            0
        } else {
            1 + (samples - self.window) / self.hop
        }
    }
}

/// Mono audio, 64-bit samples nominally in [-1, 1].
#[derive(Debug, Clone, PartialEq)]
pub struct AudioBuffer {
    samples: Vec<f64>,
    sample_rate: u32,
}

impl AudioBuffer {
    pub fn new(samples: Vec<f64>, sample_rate: u32) -> Result<Self, DspError> {
        if samples.is_empty() {
            return Err(DspError::EmptyAudio);
        }
        if samples.iter().any(|s| !s.is_finite()) {
            return Err(DspError::NonFiniteAudio);
        }
        Ok(Self { samples, sample_rate })
    }

    pub fn samples(&self) -> &[f64] {
        &self.samples
    }

    pub fn samples_mut(&mut self) -> &mut [f64] {
        &mut self.samples
    }

    pub fn sample_rate(&self) -> u32 {
        self.sample_rate
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn duration_secs(&self) -> f64 {
        self.samples.len() as f64 / self.sample_rate as f64
    }

    /// Mean-square amplitude over the whole buffer.
    pub fn mean_square(&self) -> f64 {
        self.samples.iter().map(|s| s * s).sum::<f64>() / self.samples.len() as f64
    }

    pub fn rms(&self) -> f64 {
        self.mean_square().sqrt()
    }
}

/// Log-mel features, frame-major: `values[t * n_mels + m]`.
#[derive(Debug, Clone, PartialEq)]
pub struct LogMelSpectrogram {
    pub values: Vec<f64>,
    pub frames: usize,
    pub n_mels: usize,
    pub frame_rate: f64,
    pub fingerprint: String,
}

impl LogMelSpectrogram {
    pub fn frame(&self, t: usize) -> &[f64] {
        &self.values[t * self.n_mels..(t + 1) * self.n_mels]
    }
}

fn hann(window: usize) -> Vec<f64> {
    // periodic form
    (0..window)
        .map(|n| 0.5 * (1.0 - (2.0 * std::f64::consts::PI * n as f64 / window as f64).cos()))
        .collect()
}

/// Power spectrogram: Hann-windowed frames, magnitude-squared rFFT bins.
/// Frame t covers samples [t*hop, t*hop + window). Output is frame-major
/// with `window/2 + 1` bins per frame.
pub fn stft_magnitude(audio: &AudioBuffer, window: usize, hop: usize) -> Result<Vec<Vec<f64>>, DspError> {
    let samples = audio.samples();
    if samples.len() < window {
        return Err(DspError::TooShort { len: samples.len(), window });
    }
    let frames = 1 + (samples.len() - window) / hop;
    let bins = window / 2 + 1;
    let win = hann(window);
    let mut planner = FftPlanner::<f64>::new();
    let fft = planner.plan_fft_forward(window);
    let mut out = Vec::with_capacity(frames);
    let mut buf = vec![Complex::new(0.0, 0.0); window];
    for t in 0..frames {
        let start = t * hop;
        for (i, b) in buf.iter_mut().enumerate() {
            *b = Complex::new(samples[start + i] * win[i], 0.0);
        }
        fft.process(&mut buf);
        out.push(buf[..bins].iter().map(|c| c.norm_sqr()).collect());
    }
    Ok(out)
}

pub fn hz_to_mel(f: f64) -> f64 {
    2595.0 * (1.0 + f / 700.0).log10()
}

pub fn mel_to_hz(m: f64) -> f64 {
    700.0 * (10.0_f64.powf(m / 2595.0) - 1.0)
}

/// Triangular mel filters, HTK scale, peak 1. Row-major [n_mels, n_fft/2+1].
pub fn mel_filterbank(
    n_mels: usize,
    n_fft: usize,
    sample_rate: u32,
    fmin: f64,
    fmax: f64,
) -> Result<Vec<f64>, DspError> {
    let nyquist = sample_rate as f64 / 2.0;
    if !(fmin < fmax && fmax <= nyquist) {
        return Err(DspError::BadMelRange { fmin, fmax, nyquist });
    }
    let bins = n_fft / 2 + 1;
    let lo = hz_to_mel(fmin);
    let hi = hz_to_mel(fmax);
    let centers: Vec<f64> = (0..n_mels + 2)
        .map(|i| mel_to_hz(lo + (hi - lo) * i as f64 / (n_mels + 1) as f64))
        .collect();
    let mut bank = vec![0.0; n_mels * bins];
    for m in 0..n_mels {
        let (fl, fc, fr) = (centers[m], centers[m + 1], centers[m + 2]);
        let mut any = false;
        for k in 0..bins {
            let f = k as f64 * sample_rate as f64 / n_fft as f64;
            let w = ((f - fl) / (fc - fl)).min((fr - f) / (fr - fc)).max(0.0);
            if w > 0.0 {
                bank[m * bins + k] = w;
                any = true;
            }
        }
        if !any {
            return Err(DspError::EmptyMelFilter { index: m });
        }
    }
    Ok(bank)
}

/// Full frontend: power spectrogram through the mel bank, natural log with
/// a 1e-10 floor.
pub fn log_mel(audio: &AudioBuffer, config: &DspConfig) -> Result<LogMelSpectrogram, DspError> {
    if audio.sample_rate() != config.sample_rate {
        return Err(DspError::SampleRateMismatch {
            expected: config.sample_rate,
            got: audio.sample_rate(),
        });
    }
    let power = stft_magnitude(audio, config.window, config.hop)?;
    let bank = mel_filterbank(
        config.n_mels,
        config.window,
        config.sample_rate,
        0.0,
        config.sample_rate as f64 / 2.0,
    )?;
    let bins = config.window / 2 + 1;
    let frames = power.len();
    let mut values = vec![0.0; frames * config.n_mels];
    for (t, frame) in power.iter().enumerate() {
        for m in 0..config.n_mels {
            let row = &bank[m * bins..(m + 1) * bins];
            let e: f64 = row.iter().zip(frame).map(|(w, p)| w * p).sum();
            values[t * config.n_mels + m] = e.max(LOG_FLOOR).ln();
        }
    }
    Ok(LogMelSpectrogram {
        values,
        frames,
        n_mels: config.n_mels,
        frame_rate: config.sample_rate as f64 / config.hop as f64,
        fingerprint: config.fingerprint(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sine(freq: f64, secs: f64, sr: u32) -> AudioBuffer {
        let n = (secs * sr as f64) as usize;
        AudioBuffer::new(
            (0..n)
                .map(|i| 0.5 * (2.0 * std::f64::consts::PI * freq * i as f64 / sr as f64).sin())
                .collect(),
            sr,
        )
        .unwrap()
    }

    #[test]
    fn zero_audio_gives_zero_power() {
        let audio = AudioBuffer::new(vec![0.0; 5000], 32000).unwrap();
        let power = stft_magnitude(&audio, 2048, 1024).unwrap();
        assert_eq!(power.len(), 1 + (5000 - 2048) / 1024);
        for frame in &power {
            assert_eq!(frame.len(), 1025);
            assert!(frame.iter().all(|&p| p == 0.0));
        }
    }

    #[test]
    fn short_audio_rejected() {
        let audio = AudioBuffer::new(vec![0.1; 2047], 32000).unwrap();
        assert!(matches!(
            stft_magnitude(&audio, 2048, 1024),
            Err(DspError::TooShort { len: 2047, window: 2048 })
        ));
    }

    #[test]
    fn sine_peaks_at_expected_bin() {
        // 440 Hz at sr 32000: bin 440 * 2048 / 32000 = 28.16 -> argmax 28
        let audio = sine(440.0, 0.5, 32000);
        let power = stft_magnitude(&audio, 2048, 1024).unwrap();
        for frame in &power {
            let argmax = frame
                .iter()
                .enumerate()
                .max_by(|a, b| a.1.total_cmp(b.1))
                .unwrap()
                .0;
            assert_eq!(argmax, 28);
        }
    }

    #[test]
    fn sine_peak_matches_direct_dft_oracle() {
        // quadratic-time DFT of the first windowed frame
        let audio = sine(440.0, 0.2, 32000);
        let win = hann(2048);
        let frame: Vec<f64> = audio.samples()[..2048]
            .iter()
            .zip(&win)
            .map(|(s, w)| s * w)
            .collect();
        let mut oracle = vec![0.0; 1025];
        for (k, o) in oracle.iter_mut().enumerate() {
            let (mut re, mut im) = (0.0, 0.0);
            for (n, &x) in frame.iter().enumerate() {
                let ang = -2.0 * std::f64::consts::PI * k as f64 * n as f64 / 2048.0;
                re += x * ang.cos();
                im += x * ang.sin();
            }
            *o = re * re + im * im;
        }
        let power = stft_magnitude(&audio, 2048, 1024).unwrap();
        let scale = oracle.iter().cloned().fold(0.0, f64::max);
        for (a, b) in power[0].iter().zip(&oracle) {
            assert!((a - b).abs() < 1e-6 * scale, "fft {a} vs dft {b}");
        }
    }

    #[test]
    fn parseval_energy_identity() {
        let audio = sine(733.0, 0.25, 32000);
        let win = hann(2048);
        let windowed: Vec<f64> = audio.samples()[..2048]
            .iter()
            .zip(&win)
            .map(|(s, w)| s * w)
            .collect();
        let time_energy: f64 = windowed.iter().map(|x| x * x).sum();
        let power = stft_magnitude(&audio, 2048, 1024).unwrap();
        let f = &power[0];
        let spec_energy = (f[0] + f[1024] + 2.0 * f[1..1024].iter().sum::<f64>()) / 2048.0;
        let rel = (time_energy - spec_energy).abs() / time_energy;
        assert!(rel < 1e-9, "rel {rel}");
    }

    #[test]
    fn frame_shift_covariance() {
        let audio = sine(991.0, 0.5, 32000);
        let mut shifted = vec![0.0; 1024];
        shifted.extend_from_slice(audio.samples());
        let shifted = AudioBuffer::new(shifted, 32000).unwrap();
        let a = stft_magnitude(&audio, 2048, 1024).unwrap();
        let b = stft_magnitude(&shifted, 2048, 1024).unwrap();
        for t in 0..a.len() - 1 {
            assert_eq!(a[t], b[t + 1], "frame {t} not bit-identical after one-hop shift");
        }
    }

    #[test]
    fn mel_rows_nonempty_and_centers_match_formula() {
        let bank = mel_filterbank(64, 2048, 32000, 0.0, 16000.0).unwrap();
        let bins = 1025;
        for m in 0..64 {
            assert!(bank[m * bins..(m + 1) * bins].iter().any(|&w| w > 0.0));
        }
        // independent closed-form center check: peak weight lies at the bin
        // closest to the mel-spaced center frequency
        let lo = hz_to_mel(0.0);
        let hi = hz_to_mel(16000.0);
        for m in 0..64 {
            let fc = mel_to_hz(lo + (hi - lo) * (m + 1) as f64 / 65.0);
            let peak_bin = bank[m * bins..(m + 1) * bins]
                .iter()
                .enumerate()
                .max_by(|a, b| a.1.total_cmp(b.1))
                .unwrap()
                .0;
            let bin_hz = 32000.0 / 2048.0;
            assert!(
                (peak_bin as f64 * bin_hz - fc).abs() <= bin_hz,
                "filter {m}: peak bin {peak_bin} vs center {fc:.1} Hz"
            );
        }
    }

    #[test]
    fn mel_filter_sum_positive_in_interior() {
        let bank = mel_filterbank(64, 2048, 32000, 0.0, 16000.0).unwrap();
        let bins = 1025;
        let mut summed = vec![0.0; bins];
        for m in 0..64 {
            for k in 0..bins {
                summed[k] += bank[m * bins + k];
            }
        }
        // interior bins: strictly between the first and last filter centers
        for (k, &s) in summed.iter().enumerate().take(1020).skip(3) {
            assert!(s > 0.0, "bin {k} uncovered");
        }
    }

    #[test]
    fn too_many_mels_rejected() {
        assert!(matches!(
            mel_filterbank(64, 64, 32000, 0.0, 16000.0),
            Err(DspError::EmptyMelFilter { .. })
        ));
    }

    #[test]
    fn log_mel_floor_and_frame_count() {
        let config = DspConfig::default();
        let audio = AudioBuffer::new(vec![0.0; 320000], 32000).unwrap();
        let lm = log_mel(&audio, &config).unwrap();
        assert_eq!(lm.frames, 311);
        assert_eq!(lm.n_mels, 64);
        let floor = LOG_FLOOR.ln();
        assert!(lm.values.iter().all(|&v| (v - floor).abs() < 1e-12));
    }

    #[test]
    fn doubling_amplitude_shifts_by_ln4() {
        let config = DspConfig::default();
        let quiet = sine(440.0, 0.5, 32000);
        let loud = AudioBuffer::new(quiet.samples().iter().map(|s| s * 2.0).collect(), 32000).unwrap();
        let a = log_mel(&quiet, &config).unwrap();
        let b = log_mel(&loud, &config).unwrap();
        let ln4 = 4.0_f64.ln();
        let floor = LOG_FLOOR.ln();
        for (x, y) in a.values.iter().zip(&b.values) {
            if *x > floor + 1.5 && *y > floor + 1.5 {
                assert!((y - x - ln4).abs() < 1e-9, "{x} -> {y}");
            }
        }
    }

    #[test]
    fn log_mel_rejects_mismatched_rate() {
        let config = DspConfig::default();
        let audio = sine(440.0, 0.5, 16000);
        assert!(matches!(
            log_mel(&audio, &config),
            Err(DspError::SampleRateMismatch { expected: 32000, got: 16000 })
        ));
    }
}
