//! Corpus persistence: split manifests, category table, metadata and
//! hidden placements.
//!
//! Layout under the corpus root:
//!   meta.csv                key,value pairs including the dsp fingerprint
//!   categories.csv          id,name
//!   manifest_train.csv      path,snr_db,seed,label_bits
//!   manifest_val.csv
//!   manifest_test.csv
//!   placements.csv          hidden ground truth, not used by training
//!   clips/*.wav

use std::path::{Path, PathBuf};

use super::{io_err, Placement, SynthError};
use crate::dsp::DspConfig;

pub const SPLITS: [&str; 3] = ["train", "val", "test"];

#[derive(Debug, Clone, PartialEq)]
pub struct ManifestEntry {
    pub path: String,
    pub snr_db: f64,
    pub seed: u64,
    pub label: Vec<bool>,
}

impl ManifestEntry {
    pub fn label_bits(&self) -> String {
        self.label.iter().map(|&b| if b { '1' } else { '0' }).collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CorpusMeta {
    pub kind: String,
    pub dsp: DspConfig,
    pub categories: Vec<String>,
    pub clip_seconds: f64,
    pub events_per_clip: usize,
    pub seed: u64,
    pub snr_db: f64,
    pub n_clips: usize,
}

#[derive(Debug, Clone)]
pub struct CorpusManifest {
    pub root: PathBuf,
    pub meta: CorpusMeta,
    pub train: Vec<ManifestEntry>,
    pub val: Vec<ManifestEntry>,
    pub test: Vec<ManifestEntry>,
}

impl CorpusManifest {
    pub fn split(&self, name: &str) -> Option<&[ManifestEntry]> {
        match name {
            "train" => Some(&self.train),
            "val" => Some(&self.val),
            "test" => Some(&self.test),
            _ => None,
        }
    }

    pub fn n_categories(&self) -> usize {
        self.meta.categories.len()
    }

    /// Distinct SNR values present, in first-seen order.
    pub fn snr_values(&self) -> Vec<f64> {
        let mut seen = Vec::new();
        for e in self.train.iter().chain(&self.val).chain(&self.test) {
            if !seen.iter().any(|&s: &f64| s == e.snr_db) {
                seen.push(e.snr_db);
            }
        }
        seen
    }
}

/// 80/10/10 split in clip order, then all files written.
pub(crate) fn split_and_write(
    out_dir: &Path,
    meta: CorpusMeta,
    entries: Vec<ManifestEntry>,
    placements: &[(String, Placement)],
) -> Result<CorpusManifest, SynthError> {
    let n = entries.len();
    let n_train = n * 8 / 10;
    let n_val = n / 10;
    let mut it = entries.into_iter();
    let train: Vec<_> = it.by_ref().take(n_train).collect();
    let val: Vec<_> = it.by_ref().take(n_val).collect();
    let test: Vec<_> = it.collect();
    let manifest = CorpusManifest { root: out_dir.to_path_buf(), meta, train, val, test };
    write_corpus(&manifest, placements)?;
    Ok(manifest)
}

fn write_corpus(m: &CorpusManifest, placements: &[(String, Placement)]) -> Result<(), SynthError> {
    std::fs::create_dir_all(&m.root).map_err(io_err(&m.root))?;

    let meta_path = m.root.join("meta.csv");
    let mut w = csv::Writer::from_path(&meta_path)?;
    w.write_record(["key", "value"])?;
    let d = &m.meta.dsp;
    for (k, v) in [
        ("kind", m.meta.kind.clone()),
        ("sample_rate", d.sample_rate.to_string()),
        ("window", d.window.to_string()),
        ("hop", d.hop.to_string()),
        ("n_mels", d.n_mels.to_string()),
        ("fingerprint", d.fingerprint()),
        ("n_categories", m.meta.categories.len().to_string()),
        ("clip_seconds", format!("{}", m.meta.clip_seconds)),
        ("events_per_clip", m.meta.events_per_clip.to_string()),
        ("seed", m.meta.seed.to_string()),
        ("snr_db", format!("{}", m.meta.snr_db)),
        ("n_clips", m.meta.n_clips.to_string()),
    ] {
        w.write_record([k, &v])?;
    }
    w.flush().map_err(io_err(&meta_path))?;

    let cat_path = m.root.join("categories.csv");
    let mut w = csv::Writer::from_path(&cat_path)?;
    w.write_record(["id", "name"])?;
    for (i, name) in m.meta.categories.iter().enumerate() {
        w.write_record([&i.to_string(), name])?;
    }
    w.flush().map_err(io_err(&cat_path))?;

    for (name, entries) in [("train", &m.train), ("val", &m.val), ("test", &m.test)] {
        let path = m.root.join(format!("manifest_{name}.csv"));
        let mut w = csv::Writer::from_path(&path)?;
        w.write_record(["path", "snr_db", "seed", "label_bits"])?;
        for e in entries {
            w.write_record([
                e.path.as_str(),
                &format!("{}", e.snr_db),
                &e.seed.to_string(),
                &e.label_bits(),
            ])?;
        }
        w.flush().map_err(io_err(&path))?;
    }

    let p_path = m.root.join("placements.csv");
    let mut w = csv::Writer::from_path(&p_path)?;
    w.write_record(["path", "category", "onset_sample", "offset_sample", "gain"])?;
    for (path, p) in placements {
        w.write_record([
            path.as_str(),
            &p.category.to_string(),
            &p.onset.to_string(),
            &p.offset.to_string(),
            &format!("{:.12e}", p.gain),
        ])?;
    }
    w.flush().map_err(io_err(&p_path))?;
    Ok(())
}

fn meta_get<'a>(rows: &'a [(String, String)], key: &str) -> Result<&'a str, SynthError> {
    rows.iter()
        .find(|(k, _)| k == key)
        .map(|(_, v)| v.as_str())
        .ok_or_else(|| SynthError::BadMeta(format!("missing key {key}")))
}

fn parse<T: std::str::FromStr>(v: &str, key: &str) -> Result<T, SynthError> {
    v.parse().map_err(|_| SynthError::BadMeta(format!("bad value {v:?} for {key}")))
}

pub fn load_corpus(dir: &Path) -> Result<CorpusManifest, SynthError> {
    let meta_path = dir.join("meta.csv");
    let mut rdr = csv::Reader::from_path(&meta_path)?;
    let mut rows = Vec::new();
    for rec in rdr.records() {
        let rec = rec?;
        rows.push((rec[0].to_string(), rec[1].to_string()));
    }
    let dsp = DspConfig {
        sample_rate: parse(meta_get(&rows, "sample_rate")?, "sample_rate")?,
        window: parse(meta_get(&rows, "window")?, "window")?,
        hop: parse(meta_get(&rows, "hop")?, "hop")?,
        n_mels: parse(meta_get(&rows, "n_mels")?, "n_mels")?,
    };
    let n_categories: usize = parse(meta_get(&rows, "n_categories")?, "n_categories")?;

    let mut categories = vec![String::new(); n_categories];
    let mut rdr = csv::Reader::from_path(dir.join("categories.csv"))?;
    for rec in rdr.records() {
        let rec = rec?;
        let id: usize = parse(&rec[0], "category id")?;
        if id >= n_categories {
            return Err(SynthError::BadMeta(format!("category id {id} out of range")));
        }
        categories[id] = rec[1].to_string();
    }

    let meta = CorpusMeta {
        kind: meta_get(&rows, "kind")?.to_string(),
        dsp,
        categories,
        clip_seconds: parse(meta_get(&rows, "clip_seconds")?, "clip_seconds")?,
        events_per_clip: parse(meta_get(&rows, "events_per_clip")?, "events_per_clip")?,
        seed: parse(meta_get(&rows, "seed")?, "seed")?,
        snr_db: parse(meta_get(&rows, "snr_db")?, "snr_db")?,
        n_clips: parse(meta_get(&rows, "n_clips")?, "n_clips")?,
    };

    let mut splits = Vec::new();
    for name in SPLITS {
        let path = dir.join(format!("manifest_{name}.csv"));
        let mut rdr = csv::Reader::from_path(&path)?;
        let mut entries = Vec::new();
        for rec in rdr.records() {
            let rec = rec?;
            let bits = &rec[3];
            if bits.len() != n_categories {
                return Err(SynthError::BadMeta(format!(
                    "label {bits:?} does not have {n_categories} bits"
                )));
            }
            entries.push(ManifestEntry {
                path: rec[0].to_string(),
                snr_db: parse(&rec[1], "snr_db")?,
                seed: parse(&rec[2], "seed")?,
                label: bits.chars().map(|c| c == '1').collect(),
            });
        }
        splits.push(entries);
    }
    let test = splits.pop().expect("three splits");
    let val = splits.pop().expect("three splits");
    let train = splits.pop().expect("three splits");
    Ok(CorpusManifest { root: dir.to_path_buf(), meta, train, val, test })
}

#[cfg(test)]
mod tests {
    use super::super::{make_toy_corpus, ToyParams};
    use super::*;
    use crate::dsp::DspConfig;

    fn small_params(seed: u64) -> ToyParams {
        ToyParams {
            n_clips: 20,
            categories: 3,
            snr_db: 20.0,
            seed,
            events_per_clip: 3,
            dsp: DspConfig { sample_rate: 8000, ..DspConfig::default() },
        }
    }

    #[test]
    fn toy_corpus_splits_and_roundtrips() {
        let dir = tempfile::tempdir().unwrap();
        let m = make_toy_corpus(dir.path(), &small_params(7)).unwrap();
        assert_eq!(m.train.len(), 16);
        assert_eq!(m.val.len(), 2);
        assert_eq!(m.test.len(), 2);
        assert_eq!(m.n_categories(), 3);
        for e in m.train.iter().chain(&m.val).chain(&m.test) {
            assert!(dir.path().join(&e.path).exists());
            let set = e.label.iter().filter(|&&b| b).count();
            assert!(set >= 1 && set <= 3);
        }
        let loaded = load_corpus(dir.path()).unwrap();
        assert_eq!(loaded.train, m.train);
        assert_eq!(loaded.val, m.val);
        assert_eq!(loaded.test, m.test);
        assert_eq!(loaded.meta, m.meta);
    }

    #[test]
    fn same_seed_same_bytes_different_seed_same_structure() {
        let d1 = tempfile::tempdir().unwrap();
        let d2 = tempfile::tempdir().unwrap();
        let d3 = tempfile::tempdir().unwrap();
        make_toy_corpus(d1.path(), &small_params(7)).unwrap();
        make_toy_corpus(d2.path(), &small_params(7)).unwrap();
        make_toy_corpus(d3.path(), &small_params(8)).unwrap();
        for f in ["manifest_train.csv", "manifest_val.csv", "manifest_test.csv", "categories.csv", "meta.csv"] {
            let a = std::fs::read(d1.path().join(f)).unwrap();
            let b = std::fs::read(d2.path().join(f)).unwrap();
            assert_eq!(a, b, "file {f} differs between identical seeds");
        }
        let a = std::fs::read(d1.path().join("clips/clip_00000.wav")).unwrap();
        let b = std::fs::read(d2.path().join("clips/clip_00000.wav")).unwrap();
        let c = std::fs::read(d3.path().join("clips/clip_00000.wav")).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c, "different seeds should give different audio");
        // same structure: identical paths and row counts
        let m1 = load_corpus(d1.path()).unwrap();
        let m3 = load_corpus(d3.path()).unwrap();
        assert_eq!(m1.train.len(), m3.train.len());
        for (e1, e3) in m1.train.iter().zip(&m3.train) {
            assert_eq!(e1.path, e3.path);
        }
    }

    #[test]
    fn too_few_clips_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let mut p = small_params(1);
        p.n_clips = 9;
        assert!(matches!(
            make_toy_corpus(dir.path(), &p),
            Err(SynthError::TooFewClips { got: 9 })
        ));
    }
}
