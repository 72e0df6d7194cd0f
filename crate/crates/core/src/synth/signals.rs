//! Toy signal generators. Each category owns a frequency band so a small
//! model can separate them; the bands and signal kinds are recorded in the
//! category table.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::{EventClip, SynthError};
use crate::dsp::AudioBuffer;

use std::f64::consts::PI;

const BAND_FLOOR_HZ: f64 = 300.0;
const FADE_SECS: f64 = 0.02;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ToyKind {
    ToneComplex,
    Chirp,
    AmNoise,
}

impl ToyKind {
    fn for_category(category: usize) -> Self {
        match category % 3 {
            0 => ToyKind::ToneComplex,
            1 => ToyKind::Chirp,
            _ => ToyKind::AmNoise,
        }
    }

    fn tag(&self) -> &'static str {
        match self {
            ToyKind::ToneComplex => "tones",
            ToyKind::Chirp => "chirp",
            ToyKind::AmNoise => "amnoise",
        }
    }
}

/// Geometrically spaced band edges between the floor and 0.45 * sr.
pub fn category_band(category: usize, n_categories: usize, sample_rate: u32) -> (f64, f64) {
    let fmax = 0.45 * sample_rate as f64;
    let ratio = fmax / BAND_FLOOR_HZ;
    let lo = BAND_FLOOR_HZ * ratio.powf(category as f64 / n_categories as f64);
    let hi = BAND_FLOOR_HZ * ratio.powf((category + 1) as f64 / n_categories as f64);
    (lo, hi)
}

pub(crate) fn toy_category_name(category: usize, n_categories: usize, sample_rate: u32) -> String {
    let (lo, hi) = category_band(category, n_categories, sample_rate);
    format!("{}_{:.0}-{:.0}hz", ToyKind::for_category(category).tag(), lo, hi)
}

/// Colored background noise: white noise through a one-pole lowpass,
/// scaled to 0.1 RMS, exactly 10 s.
pub fn toy_background(rng: &mut ChaCha8Rng, sample_rate: u32) -> Result<AudioBuffer, SynthError> {
    let n = (super::CLIP_SECONDS * sample_rate as f64).round() as usize;
    let mut samples = Vec::with_capacity(n);
    let mut state = 0.0;
    for _ in 0..n {
        let white: f64 = rng.gen_range(-1.0..1.0);
        state = 0.6 * state + 0.4 * white;
        samples.push(state);
    }
    let ms = samples.iter().map(|s| s * s).sum::<f64>() / n as f64;
    let scale = 0.1 / ms.sqrt();
    for s in &mut samples {
        *s *= scale;
    }
    Ok(AudioBuffer::new(samples, sample_rate)?)
}

/// One toy event of the category's kind, band-limited by construction,
/// unit RMS, with raised-cosine fades.
pub fn toy_event(
    category: usize,
    n_categories: usize,
    duration_secs: f64,
    sample_rate: u32,
    rng: &mut ChaCha8Rng,
) -> Result<EventClip, SynthError> {
    let (lo, hi) = category_band(category, n_categories, sample_rate);
    let n = (duration_secs * sample_rate as f64).round() as usize;
    let sr = sample_rate as f64;
    let mut samples = vec![0.0f64; n];
    match ToyKind::for_category(category) {
        ToyKind::ToneComplex => {
            for frac in [0.25, 0.5, 0.75] {
                let f = lo * (hi / lo).powf(frac);
                let phase: f64 = rng.gen_range(0.0..2.0 * PI);
                for (i, s) in samples.iter_mut().enumerate() {
                    *s += (2.0 * PI * f * i as f64 / sr + phase).sin();
                }
            }
        }
        ToyKind::Chirp => {
            let f0 = lo * 1.05;
            let f1 = hi * 0.95;
            let phase: f64 = rng.gen_range(0.0..2.0 * PI);
            let k = (f1 - f0) / duration_secs;
            for (i, s) in samples.iter_mut().enumerate() {
                let t = i as f64 / sr;
                *s = (2.0 * PI * (f0 * t + 0.5 * k * t * t) + phase).sin();
            }
        }
        ToyKind::AmNoise => {
            let mod_phase: f64 = rng.gen_range(0.0..2.0 * PI);
            let tones: Vec<(f64, f64)> = (0..24)
                .map(|_| (rng.gen_range(lo..hi), rng.gen_range(0.0..2.0 * PI)))
                .collect();
            for (i, s) in samples.iter_mut().enumerate() {
                let t = i as f64 / sr;
                let mut v = 0.0;
                for &(f, ph) in &tones {
                    v += (2.0 * PI * f * t + ph).sin();
                }
                let envelope = 0.5 * (1.0 + 0.9 * (2.0 * PI * 8.0 * t + mod_phase).sin());
                *s = v * envelope;
            }
        }
    }
    apply_fades(&mut samples, sample_rate);
    let ms = samples.iter().map(|s| s * s).sum::<f64>() / n as f64;
    let scale = 1.0 / ms.sqrt();
    for s in &mut samples {
        *s *= scale;
    }
    Ok(EventClip { audio: AudioBuffer::new(samples, sample_rate)?, category })
}

fn apply_fades(samples: &mut [f64], sample_rate: u32) {
    let fade = ((FADE_SECS * sample_rate as f64) as usize).min(samples.len() / 2);
    for i in 0..fade {
        let w = 0.5 * (1.0 - (PI * i as f64 / fade as f64).cos());
        samples[i] *= w;
        let j = samples.len() - 1 - i;
        samples[j] *= w;
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn bands_are_disjoint_and_ordered() {
        for c_total in [3usize, 8] {
            let mut prev_hi = 0.0;
            for c in 0..c_total {
                let (lo, hi) = category_band(c, c_total, 16000);
                assert!(lo < hi);
                assert!(lo >= prev_hi - 1e-9);
                assert!(hi <= 0.45 * 16000.0 + 1e-9);
                prev_hi = hi;
            }
        }
    }

    #[test]
    fn events_have_unit_rms() {
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        for c in 0..3 {
            let ev = toy_event(c, 3, 1.5, 16000, &mut rng).unwrap();
            assert!((ev.audio.rms() - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn event_energy_concentrates_in_band() {
        // direct Goertzel-style band energy on the raw waveform
        let mut rng = ChaCha8Rng::seed_from_u64(123);
        let sr = 16000;
        for c in 0..3 {
            let ev = toy_event(c, 3, 1.0, sr, &mut rng).unwrap();
            let spec = crate::dsp::stft_magnitude(
                &ev.audio,
                2048,
                1024,
            )
            .unwrap();
            let bin_hz = sr as f64 / 2048.0;
            let mut band_energy = vec![0.0; 3];
            for frame in &spec {
                for (k, &p) in frame.iter().enumerate() {
                    let f = k as f64 * bin_hz;
                    for cc in 0..3 {
                        let (lo, hi) = category_band(cc, 3, sr);
                        if f >= lo && f < hi {
                            band_energy[cc] += p;
                        }
                    }
                }
            }
            for other in 0..3 {
                if other != c {
                    assert!(
                        band_energy[c] > 2.0 * band_energy[other],
                        "category {c}: own {} vs {other} {}",
                        band_energy[c],
                        band_energy[other]
                    );
                }
            }
        }
    }

    #[test]
    fn background_is_reproducible() {
        let a = toy_background(&mut ChaCha8Rng::seed_from_u64(5), 8000).unwrap();
        let b = toy_background(&mut ChaCha8Rng::seed_from_u64(5), 8000).unwrap();
        assert_eq!(a.samples(), b.samples());
        assert!((a.rms() - 0.1).abs() < 1e-12);
    }
}
