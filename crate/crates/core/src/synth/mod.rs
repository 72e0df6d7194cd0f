//! Weak-label corpus construction: events mixed into backgrounds at exact
//! SNR, a fully synthetic toy corpus, and ingestion of external WAV trees.

mod manifest;
mod signals;

pub use manifest::{load_corpus, CorpusManifest, CorpusMeta, ManifestEntry};
pub use signals::{toy_background, toy_event, ToyKind};

use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::dsp::{wav, AudioBuffer, DspConfig, DspError};

pub const CLIP_SECONDS: f64 = 10.0;
pub const SNR_MIN_DB: f64 = -40.0;
pub const SNR_MAX_DB: f64 = 60.0;
pub const PEAK_LIMIT: f64 = 0.99;
pub const MAX_CATEGORIES: usize = 8;

#[derive(Debug, Error)]
pub enum SynthError {
    #[error("event of category {category} is silent (zero RMS)")]
    SilentEvent { category: usize },
    #[error("background is silent (zero RMS)")]
    SilentBackground,
    #[error("background too short: {got:.2} s, need {need:.2} s")]
    BackgroundTooShort { got: f64, need: f64 },
    #[error("event too long: {got:.2} s exceeds clip length {limit:.2} s ({name})")]
    EventTooLong { got: f64, limit: f64, name: String },
    #[error("snr {snr} dB outside supported range [{SNR_MIN_DB}, {SNR_MAX_DB}]")]
    SnrOutOfRange { snr: f64 },
    #[error("event category {category} out of range for {n_categories} categories")]
    BadCategory { category: usize, n_categories: usize },
    #[error("need at least 10 clips to split train/val/test, got {got}")]
    TooFewClips { got: usize },
    #[error("toy corpus supports at most {MAX_CATEGORIES} categories, got {got}")]
    TooManyCategories { got: usize },
    #[error("no usable files in {0}")]
    EmptyDir(PathBuf),
    #[error("corpus metadata: {0}")]
    BadMeta(String),
    #[error(transparent)]
    Dsp(#[from] DspError),
    #[error("io error on {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> SynthError + '_ {
    move |source| SynthError::Io { path: path.to_path_buf(), source }
}

/// One event waveform tagged with its category.
#[derive(Debug, Clone)]
pub struct EventClip {
    pub audio: AudioBuffer,
    pub category: usize,
}

/// Where an event landed and how it was scaled. Hidden ground truth:
/// training never sees this.
#[derive(Debug, Clone, PartialEq)]
pub struct Placement {
    pub category: usize,
    pub onset: usize,
    pub offset: usize,
    pub gain: f64,
}

/// A weak-label bag: 10 s of audio with a multi-hot clip-level label.
#[derive(Debug, Clone)]
pub struct MixedClip {
    pub audio: AudioBuffer,
    pub label: Vec<bool>,
    pub placements: Vec<Placement>,
    pub snr_db: f64,
    pub seed: u64,
    /// Gain applied to the whole mix by peak normalization.
    pub norm_gain: f64,
}

impl MixedClip {
    pub fn label_bits(&self) -> String {
        self.label.iter().map(|&b| if b { '1' } else { '0' }).collect()
    }
}

/// Mixes `events` into `background` so every event independently sits at
/// `snr_db` relative to the original background. Power is mean-square
/// amplitude; the event is measured over its own support, the background
/// over the full 10 s clip. Onsets are uniform over positions where the
/// event fits; overlaps are allowed. The sum is peak-normalized to 0.99
/// and the normalization gain recorded.
pub fn mix_at_snr(
    background: &AudioBuffer,
    events: &[EventClip],
    snr_db: f64,
    n_categories: usize,
    seed: u64,
    rng: &mut ChaCha8Rng,
) -> Result<MixedClip, SynthError> {
    if !(SNR_MIN_DB..=SNR_MAX_DB).contains(&snr_db) {
        return Err(SynthError::SnrOutOfRange { snr: snr_db });
    }
    let sr = background.sample_rate();
    let clip_len = (CLIP_SECONDS * sr as f64).round() as usize;
    if background.len() < clip_len {
        return Err(SynthError::BackgroundTooShort {
            got: background.duration_secs(),
            need: CLIP_SECONDS,
        });
    }
    let mut mix: Vec<f64> = background.samples()[..clip_len].to_vec();
    let bg_power = mix.iter().map(|s| s * s).sum::<f64>() / clip_len as f64;
    if bg_power == 0.0 {
        return Err(SynthError::SilentBackground);
    }
    let mut label = vec![false; n_categories];
    let mut placements = Vec::with_capacity(events.len());
    for ev in events {
        if ev.category >= n_categories {
            return Err(SynthError::BadCategory { category: ev.category, n_categories });
        }
        if ev.audio.len() > clip_len {
            return Err(SynthError::EventTooLong {
                got: ev.audio.duration_secs(),
                limit: CLIP_SECONDS,
                name: format!("category {}", ev.category),
            });
        }
        let ev_power = ev.audio.mean_square();
        if ev_power == 0.0 {
            return Err(SynthError::SilentEvent { category: ev.category });
        }
        let gain = (bg_power * 10f64.powf(snr_db / 10.0) / ev_power).sqrt();
        let onset = rng.gen_range(0..=clip_len - ev.audio.len());
        for (i, &s) in ev.audio.samples().iter().enumerate() {
            mix[onset + i] += gain * s;
        }
        label[ev.category] = true;
        placements.push(Placement {
            category: ev.category,
            onset,
            offset: onset + ev.audio.len(),
            gain,
        });
    }
    let peak = mix.iter().fold(0.0f64, |m, s| m.max(s.abs()));
    let norm_gain = if peak > PEAK_LIMIT { PEAK_LIMIT / peak } else { 1.0 };
    if norm_gain != 1.0 {
        for s in &mut mix {
            *s *= norm_gain;
        }
    }
    Ok(MixedClip {
        audio: AudioBuffer::new(mix, sr)?,
        label,
        placements,
        snr_db,
        seed,
        norm_gain,
    })
}

/// Re-measures the SNR of one placement against the original background,
/// from the pre-sum components. Used by verification, not by training.
pub fn measure_placement_snr(
    background: &AudioBuffer,
    event: &EventClip,
    placement: &Placement,
) -> f64 {
    let sr = background.sample_rate();
    let clip_len = (CLIP_SECONDS * sr as f64).round() as usize;
    let bg = &background.samples()[..clip_len.min(background.len())];
    let bg_power = bg.iter().map(|s| s * s).sum::<f64>() / bg.len() as f64;
    let ev_power = event
        .audio
        .samples()
        .iter()
        .map(|s| (placement.gain * s) * (placement.gain * s))
        .sum::<f64>()
        / event.audio.len() as f64;
    10.0 * (ev_power / bg_power).log10()
}

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E3779B97F4A7C15);
    let mut z = x;
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58476D1CE4E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D049BB133111EB);
    z ^ (z >> 31)
}

/// Per-clip RNG seed; independent of worker count or generation order.
pub fn clip_seed(corpus_seed: u64, clip_index: u64) -> u64 {
    splitmix64(corpus_seed ^ clip_index.wrapping_mul(0xA24BAED4963EE407))
}

#[derive(Debug, Clone)]
pub struct ToyParams {
    pub n_clips: usize,
    pub categories: usize,
    pub snr_db: f64,
    pub seed: u64,
    pub events_per_clip: usize,
    pub dsp: DspConfig,
}

impl Default for ToyParams {
    fn default() -> Self {
        // 8 kHz keeps a full train/eval cycle in desk time; the category
        // bands all sit below the 4 kHz Nyquist
        Self {
            n_clips: 200,
            categories: 3,
            snr_db: 20.0,
            seed: 7,
            events_per_clip: 3,
            dsp: DspConfig { sample_rate: 8000, ..DspConfig::default() },
        }
    }
}

/// Builds one toy clip without touching the filesystem.
pub fn make_toy_clip(params: &ToyParams, index: u64) -> Result<MixedClip, SynthError> {
    let seed = clip_seed(params.seed, index);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let sr = params.dsp.sample_rate;
    let background = toy_background(&mut rng, sr)?;
    let mut events = Vec::with_capacity(params.events_per_clip);
    for _ in 0..params.events_per_clip {
        let category = rng.gen_range(0..params.categories);
        let duration = rng.gen_range(1.0..3.0);
        events.push(toy_event(category, params.categories, duration, sr, &mut rng)?);
    }
    mix_at_snr(&background, &events, params.snr_db, params.categories, seed, &mut rng)
}

/// Generates the toy corpus under `out_dir`: WAV clips, split manifests,
/// category table and metadata. Fully determined by `params`.
pub fn make_toy_corpus(out_dir: &Path, params: &ToyParams) -> Result<CorpusManifest, SynthError> {
    if params.n_clips < 10 {
        return Err(SynthError::TooFewClips { got: params.n_clips });
    }
    if params.categories > MAX_CATEGORIES {
        return Err(SynthError::TooManyCategories { got: params.categories });
    }
    let categories: Vec<String> = (0..params.categories)
        .map(|c| signals::toy_category_name(c, params.categories, params.dsp.sample_rate))
        .collect();
    let clips_dir = out_dir.join("clips");
    std::fs::create_dir_all(&clips_dir).map_err(io_err(&clips_dir))?;
    let mut entries = Vec::with_capacity(params.n_clips);
    let mut placement_rows = Vec::new();
    for i in 0..params.n_clips {
        let clip = make_toy_clip(params, i as u64)?;
        let rel = format!("clips/clip_{i:05}.wav");
        wav::write_wav_16bit(&out_dir.join(&rel), &clip.audio)?;
        for p in &clip.placements {
            placement_rows.push((rel.clone(), p.clone()));
        }
        entries.push(ManifestEntry {
            path: rel,
            snr_db: clip.snr_db,
            seed: clip.seed,
            label: clip.label,
        });
    }
    let meta = CorpusMeta {
        kind: "toy".to_string(),
        dsp: params.dsp.clone(),
        categories,
        clip_seconds: CLIP_SECONDS,
        events_per_clip: params.events_per_clip,
        seed: params.seed,
        snr_db: params.snr_db,
        n_clips: params.n_clips,
    };
    let manifest = manifest::split_and_write(out_dir, meta, entries, &placement_rows)?;
    Ok(manifest)
}

#[derive(Debug, Clone)]
pub struct IngestParams {
    pub n_clips: usize,
    pub snr_db: f64,
    pub seed: u64,
    pub events_per_clip: usize,
    pub dsp: DspConfig,
}

/// Builds a corpus from directories of real audio. Event categories come
/// from the subdirectory names of `events_dir`; backgrounds are WAV files
/// directly under `backgrounds_dir`. Sample rates must match the config.
pub fn ingest_external(
    events_dir: &Path,
    backgrounds_dir: &Path,
    out_dir: &Path,
    params: &IngestParams,
) -> Result<CorpusManifest, SynthError> {
    if params.n_clips < 10 {
        return Err(SynthError::TooFewClips { got: params.n_clips });
    }
    let mut categories: Vec<(String, Vec<PathBuf>)> = Vec::new();
    let mut dir_entries: Vec<PathBuf> = std::fs::read_dir(events_dir)
        .map_err(io_err(events_dir))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_dir())
        .collect();
    dir_entries.sort();
    for dir in dir_entries {
        let files = wav_files(&dir)?;
        if files.is_empty() {
            continue;
        }
        let name = dir
            .file_name()
            .map(|n| n.to_string_lossy().into_owned())
            .unwrap_or_default();
        categories.push((name, files));
    }
    if categories.is_empty() {
        return Err(SynthError::EmptyDir(events_dir.to_path_buf()));
    }
    let backgrounds = wav_files(backgrounds_dir)?;
    if backgrounds.is_empty() {
        return Err(SynthError::EmptyDir(backgrounds_dir.to_path_buf()));
    }
    // flat list of (category id, file) so event draws are uniform over files
    let all_events: Vec<(usize, &PathBuf)> = categories
        .iter()
        .enumerate()
        .flat_map(|(ci, (_, files))| files.iter().map(move |f| (ci, f)))
        .collect();
    let n_categories = categories.len();
    let sr = params.dsp.sample_rate;
    let clip_len = (CLIP_SECONDS * sr as f64).round() as usize;

    let clips_dir = out_dir.join("clips");
    std::fs::create_dir_all(&clips_dir).map_err(io_err(&clips_dir))?;
    let mut entries = Vec::with_capacity(params.n_clips);
    let mut placement_rows = Vec::new();
    for i in 0..params.n_clips {
        let seed = clip_seed(params.seed, i as u64);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let bg_path = &backgrounds[rng.gen_range(0..backgrounds.len())];
        let bg_full = wav::read_wav_expecting(bg_path, sr)?;
        let background = if bg_full.len() > clip_len {
            let start = rng.gen_range(0..=bg_full.len() - clip_len);
            AudioBuffer::new(bg_full.samples()[start..start + clip_len].to_vec(), sr)?
        } else {
            bg_full
        };
        let mut events = Vec::with_capacity(params.events_per_clip);
        for _ in 0..params.events_per_clip {
            let (category, path) = all_events[rng.gen_range(0..all_events.len())];
            let audio = wav::read_wav_expecting(path, sr)?;
            if audio.len() > clip_len {
                return Err(SynthError::EventTooLong {
                    got: audio.duration_secs(),
                    limit: CLIP_SECONDS,
                    name: path.display().to_string(),
                });
            }
            events.push(EventClip { audio, category });
        }
        let clip = mix_at_snr(&background, &events, params.snr_db, n_categories, seed, &mut rng)?;
        let rel = format!("clips/clip_{i:05}.wav");
        wav::write_wav_16bit(&out_dir.join(&rel), &clip.audio)?;
        for p in &clip.placements {
            placement_rows.push((rel.clone(), p.clone()));
        }
        entries.push(ManifestEntry { path: rel, snr_db: clip.snr_db, seed, label: clip.label });
    }
    let meta = CorpusMeta {
        kind: "external".to_string(),
        dsp: params.dsp.clone(),
        categories: categories.into_iter().map(|(n, _)| n).collect(),
        clip_seconds: CLIP_SECONDS,
        events_per_clip: params.events_per_clip,
        seed: params.seed,
        snr_db: params.snr_db,
        n_clips: params.n_clips,
    };
    manifest::split_and_write(out_dir, meta, entries, &placement_rows)
}

fn wav_files(dir: &Path) -> Result<Vec<PathBuf>, SynthError> {
    let mut files: Vec<PathBuf> = std::fs::read_dir(dir)
        .map_err(io_err(dir))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().map(|e| e.eq_ignore_ascii_case("wav")).unwrap_or(false))
        .collect();
    files.sort();
    Ok(files)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn noise_bg(sr: u32, seed: u64) -> AudioBuffer {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = (CLIP_SECONDS * sr as f64) as usize;
        AudioBuffer::new((0..n).map(|_| rng.gen_range(-0.1..0.1)).collect(), sr).unwrap()
    }

    fn tone_event(sr: u32, category: usize, secs: f64) -> EventClip {
        let n = (secs * sr as f64) as usize;
        let audio = AudioBuffer::new(
            (0..n)
                .map(|i| (2.0 * std::f64::consts::PI * 500.0 * i as f64 / sr as f64).sin())
                .collect(),
            sr,
        )
        .unwrap();
        EventClip { audio, category }
    }

    #[test]
    fn placement_snr_matches_target() {
        let sr = 8000;
        let bg = noise_bg(sr, 1);
        let events = vec![tone_event(sr, 0, 2.0), tone_event(sr, 1, 1.5)];
        for &snr in &[0.0, 10.0, 20.0, -5.0] {
            let mut rng = ChaCha8Rng::seed_from_u64(42);
            let clip = mix_at_snr(&bg, &events, snr, 3, 42, &mut rng).unwrap();
            for (ev, p) in events.iter().zip(&clip.placements) {
                let measured = measure_placement_snr(&bg, ev, p);
                assert!((measured - snr).abs() < 0.1, "snr {snr}: measured {measured}");
            }
        }
    }

    #[test]
    fn empty_events_yield_background_and_zero_label() {
        let sr = 8000;
        let bg = noise_bg(sr, 2);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let clip = mix_at_snr(&bg, &[], 20.0, 4, 5, &mut rng).unwrap();
        assert_eq!(clip.label, vec![false; 4]);
        assert_eq!(clip.norm_gain, 1.0);
        assert_eq!(clip.audio.samples(), &bg.samples()[..clip.audio.len()]);
    }

    #[test]
    fn same_seed_is_bit_identical() {
        let sr = 8000;
        let bg = noise_bg(sr, 3);
        let events = vec![tone_event(sr, 0, 1.0)];
        let mut r1 = ChaCha8Rng::seed_from_u64(9);
        let mut r2 = ChaCha8Rng::seed_from_u64(9);
        let a = mix_at_snr(&bg, &events, 10.0, 2, 9, &mut r1).unwrap();
        let b = mix_at_snr(&bg, &events, 10.0, 2, 9, &mut r2).unwrap();
        assert_eq!(a.audio.samples(), b.audio.samples());
        assert_eq!(a.placements, b.placements);
    }

    #[test]
    fn silent_inputs_rejected() {
        let sr = 8000;
        let bg = noise_bg(sr, 4);
        let silent_bg =
            AudioBuffer::new(vec![0.0; (CLIP_SECONDS * sr as f64) as usize], sr).unwrap();
        let silent_ev = EventClip {
            audio: AudioBuffer::new(vec![0.0; 800], sr).unwrap(),
            category: 0,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        assert!(matches!(
            mix_at_snr(&silent_bg, &[], 20.0, 1, 1, &mut rng),
            Err(SynthError::SilentBackground)
        ));
        assert!(matches!(
            mix_at_snr(&bg, &[silent_ev], 20.0, 1, 1, &mut rng),
            Err(SynthError::SilentEvent { category: 0 })
        ));
    }

    #[test]
    fn snr_range_enforced() {
        let sr = 8000;
        let bg = noise_bg(sr, 6);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        assert!(matches!(
            mix_at_snr(&bg, &[], 61.0, 1, 1, &mut rng),
            Err(SynthError::SnrOutOfRange { .. })
        ));
        assert!(matches!(
            mix_at_snr(&bg, &[], -41.0, 1, 1, &mut rng),
            Err(SynthError::SnrOutOfRange { .. })
        ));
    }

    #[test]
    fn label_tracks_placements() {
        let sr = 8000;
        let bg = noise_bg(sr, 7);
        let events = vec![tone_event(sr, 2, 1.0), tone_event(sr, 2, 1.0), tone_event(sr, 0, 1.0)];
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let clip = mix_at_snr(&bg, &events, 20.0, 4, 11, &mut rng).unwrap();
        assert_eq!(clip.label, vec![true, false, true, false]);
        for c in 0..4 {
            let has = clip.placements.iter().any(|p| p.category == c);
            assert_eq!(clip.label[c], has);
        }
    }
}
