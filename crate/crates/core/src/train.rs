//! Joint training of the detection head and the reconstruction decoder:
//! total loss = bce(P, y) + alpha * mse(reconstruction, input).
//!
//! Runs are fully determined by (seed, corpus, config): the master RNG
//! seeds the model init and drives the per-epoch shuffle, and its state is
//! checkpointed so resumed runs replay the uninterrupted loss stream.

use std::path::Path;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::autograd::{Adam, AdamConfig, AutogradError, BnMode, Graph, Tensor, TensorId};
use crate::checkpoint::{Checkpoint, CheckpointError};
use crate::dsp::{log_mel, wav, DspConfig, DspError};
use crate::metrics::{evaluate, EvalBatch, MetricReport, MetricsError, DEFAULT_THRESHOLD};
use crate::model::{ModelConfig, ModelError, ParamStore, SedModel};
use crate::pooling::{
    extract_trace, init_two_step_params, pooling_probabilities, AttentionTrace, PoolError,
    PoolingKind,
};
use crate::synth::{CorpusManifest, ManifestEntry, SynthError};

pub const DEFAULT_GWRP_DECAY: f64 = 0.9995;
const STD_FLOOR: f64 = 1e-6;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("feature fingerprint mismatch: checkpoint {ckpt}, corpus {corpus}")]
    FingerprintMismatch { ckpt: String, corpus: String },
    #[error("corpus split {split} is empty")]
    EmptySplit { split: String },
    #[error("clips disagree in frame count: {a} vs {b} ({path})")]
    FrameMismatch { a: usize, b: usize, path: String },
    #[error("nan loss at epoch {epoch} batch {batch}{detail}")]
    NanLoss { epoch: usize, batch: usize, detail: String },
    #[error("model profile expects {want} categories, corpus has {got}")]
    CategoryMismatch { want: usize, got: usize },
    #[error("pooling {0} records no attention trace")]
    NoTrace(&'static str),
    #[error("checkpoint does not match this build: {0}")]
    BadCheckpoint(String),
    #[error("alpha list is empty")]
    EmptyAlphas,
    #[error(transparent)]
    Synth(#[from] SynthError),
    #[error(transparent)]
    Dsp(#[from] DspError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Pool(#[from] PoolError),
    #[error(transparent)]
    Autograd(#[from] AutogradError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub alpha: f64,
    pub lr: f64,
    pub batch: usize,
    pub epochs: usize,
    pub seed: u64,
    pub pooling: PoolingKind,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            alpha: 0.001,
            lr: 1e-3,
            batch: 8,
            epochs: 20,
            seed: 7,
            pooling: PoolingKind::TwoStep,
        }
    }
}

impl TrainConfig {
    pub fn gwrp_decay(&self) -> f64 {
        match self.pooling {
            PoolingKind::Gwrp { decay } => decay,
            _ => DEFAULT_GWRP_DECAY,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochReport {
    pub epoch: usize,
    pub l1: f64,
    pub l2: f64,
    pub total: f64,
    pub seconds: f64,
    pub val_micro_p: Option<f64>,
    pub val_macro_p: Option<f64>,
    pub val_auc: Option<f64>,
    pub val_recon_mse: f64,
}

/// CSV stream of epoch reports. All columns except `seconds` are
/// deterministic under a fixed seed.
pub fn epoch_reports_csv(reports: &[EpochReport]) -> String {
    let mut out = String::from("epoch,l1,l2,total,seconds,val_micro_p,val_macro_p,val_auc\n");
    for r in reports {
        out.push_str(&format!(
            "{},{:.6},{:.6},{:.6},{:.3},{},{},{}\n",
            r.epoch,
            r.l1,
            r.l2,
            r.total,
            r.seconds,
            crate::metrics::format_metric(r.val_micro_p),
            crate::metrics::format_metric(r.val_macro_p),
            crate::metrics::format_metric(r.val_auc),
        ));
    }
    out
}

/// Standardized features for one split: per-clip [F0, T_pad] blocks, mel
/// bins as rows, padded time columns zero (the per-bin mean before
/// standardization).
pub struct Dataset {
    features: Vec<Vec<f64>>,
    labels: Vec<Vec<bool>>,
    pub f0: usize,
    pub t_pad: usize,
    pub entries: Vec<ManifestEntry>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.features.len()
    }

    pub fn is_empty(&self) -> bool {
        self.features.is_empty()
    }

    pub fn labels(&self) -> &[Vec<bool>] {
        &self.labels
    }
}

fn pad16(t: usize) -> usize {
    t.div_ceil(16) * 16
}

fn load_raw_split(
    corpus: &CorpusManifest,
    split: &str,
) -> Result<Vec<(crate::dsp::LogMelSpectrogram, ManifestEntry)>, TrainError> {
    let entries = corpus
        .split(split)
        .unwrap_or_else(|| panic!("unknown split {split}"));
    if entries.is_empty() {
        return Err(TrainError::EmptySplit { split: split.to_string() });
    }
    let dsp = &corpus.meta.dsp;
    let mut out = Vec::with_capacity(entries.len());
    for entry in entries {
        let audio = wav::read_wav_expecting(&corpus.root.join(&entry.path), dsp.sample_rate)?;
        let lm = log_mel(&audio, dsp)?;
        if let Some((first, _)) = out.first() {
            let first: &crate::dsp::LogMelSpectrogram = first;
            if first.frames != lm.frames {
                return Err(TrainError::FrameMismatch {
                    a: first.frames,
                    b: lm.frames,
                    path: entry.path.clone(),
                });
            }
        }
        out.push((lm, entry.clone()));
    }
    Ok(out)
}

/// Per-bin mean and std over every frame of the given raw features.
fn compute_norm(raw: &[(crate::dsp::LogMelSpectrogram, ManifestEntry)]) -> (Vec<f64>, Vec<f64>) {
    let f0 = raw[0].0.n_mels;
    let mut mean = vec![0.0; f0];
    let mut count = 0usize;
    for (lm, _) in raw {
        for t in 0..lm.frames {
            for (m, v) in lm.frame(t).iter().enumerate() {
                mean[m] += v;
            }
        }
        count += lm.frames;
    }
    for m in mean.iter_mut() {
        *m /= count as f64;
    }
    let mut var = vec![0.0; f0];
    for (lm, _) in raw {
        for t in 0..lm.frames {
            for (m, v) in lm.frame(t).iter().enumerate() {
                let d = v - mean[m];
                var[m] += d * d;
            }
        }
    }
    let std = var
        .iter()
        .map(|v| (v / count as f64).sqrt().max(STD_FLOOR))
        .collect();
    (mean, std)
}

fn standardize_split(
    raw: Vec<(crate::dsp::LogMelSpectrogram, ManifestEntry)>,
    mean: &[f64],
    std: &[f64],
) -> Dataset {
    let f0 = raw[0].0.n_mels;
    let t = raw[0].0.frames;
    let t_pad = pad16(t);
    let mut features = Vec::with_capacity(raw.len());
    let mut labels = Vec::with_capacity(raw.len());
    let mut entries = Vec::with_capacity(raw.len());
    for (lm, entry) in raw {
        let mut block = vec![0.0; f0 * t_pad];
        for ti in 0..t {
            for (m, v) in lm.frame(ti).iter().enumerate() {
                block[m * t_pad + ti] = (v - mean[m]) / std[m];
            }
        }
        features.push(block);
        labels.push(entry.label.clone());
        entries.push(entry);
    }
    Dataset { features, labels, f0, t_pad, entries }
}

fn batch_tensors(ds: &Dataset, idxs: &[usize], categories: usize) -> (Tensor, Tensor) {
    let n = idxs.len();
    let block = ds.f0 * ds.t_pad;
    let mut feats = vec![0.0; n * block];
    let mut labels = vec![0.0; n * categories];
    for (row, &i) in idxs.iter().enumerate() {
        feats[row * block..(row + 1) * block].copy_from_slice(&ds.features[i]);
        for (c, &b) in ds.labels[i].iter().enumerate() {
            labels[row * categories + c] = if b { 1.0 } else { 0.0 };
        }
    }
    (
        Tensor::new(&[n, 1, ds.f0, ds.t_pad], feats).expect("sized above"),
        Tensor::new(&[n, categories], labels).expect("sized above"),
    )
}

/// The joint objective. `l2` is always evaluated for reporting; the decoder
/// only joins the backward graph when alpha is nonzero, so detection-only
/// runs leave it untouched.
pub fn joint_loss(
    g: &mut Graph,
    p: TensorId,
    y: TensorId,
    xbar: TensorId,
    x: TensorId,
    alpha: f64,
) -> Result<(TensorId, TensorId, TensorId), AutogradError> {
    let l1 = g.bce_loss(p, y)?;
    let l2 = g.mse_loss(xbar, x)?;
    let total = if alpha == 0.0 {
        l1
    } else {
        let scaled = g.scale(l2, alpha);
        g.add(l1, scaled)?
    };
    Ok((total, l1, l2))
}

pub struct Trainer {
    pub model: SedModel,
    pub pool_params: ParamStore,
    pub config: TrainConfig,
    pub adam: Adam,
    pub epochs_done: u32,
    pub norm_mean: Vec<f64>,
    pub norm_std: Vec<f64>,
    pub dsp: DspConfig,
    rng: ChaCha8Rng,
}

impl Trainer {
    pub fn new(
        corpus: &CorpusManifest,
        model_config: ModelConfig,
        config: TrainConfig,
    ) -> Result<Self, TrainError> {
        if model_config.categories != corpus.n_categories() {
            return Err(TrainError::CategoryMismatch {
                want: model_config.categories,
                got: corpus.n_categories(),
            });
        }
        let raw_train = load_raw_split(corpus, "train")?;
        let (norm_mean, norm_std) = compute_norm(&raw_train);
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let model = SedModel::init(model_config, rng.gen());
        let pool_params = match config.pooling {
            PoolingKind::TwoStep => init_two_step_params(corpus.n_categories(), &mut rng),
            _ => ParamStore::new(),
        };
        let adam = Adam::new(AdamConfig { lr: config.lr, ..AdamConfig::default() });
        Ok(Self {
            model,
            pool_params,
            config,
            adam,
            epochs_done: 0,
            norm_mean,
            norm_std,
            dsp: corpus.meta.dsp.clone(),
            rng,
        })
    }

    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self, TrainError> {
        let mut model = SedModel::init(ckpt.model_config.clone(), 0);
        let mut pool_params = match ckpt.train_config.pooling {
            PoolingKind::TwoStep => {
                init_two_step_params(ckpt.model_config.categories, &mut ChaCha8Rng::seed_from_u64(0))
            }
            _ => ParamStore::new(),
        };
        for (name, tensor) in &ckpt.tensors {
            if name.starts_with("pool.") {
                if !pool_params.names().any(|n| n == name) {
                    return Err(TrainError::BadCheckpoint(format!("unexpected tensor {name}")));
                }
                pool_params.set(name, tensor.clone());
            } else {
                if !model.params.names().any(|n| n == name) {
                    return Err(TrainError::BadCheckpoint(format!("unexpected tensor {name}")));
                }
                model.params.set(name, tensor.clone());
            }
        }
        for (name, stats) in &ckpt.bn {
            model.set_bn_stats(name, stats.clone());
        }
        let adam = if ckpt.adam_m.is_empty() {
            let mut a = Adam::new(ckpt.adam_config);
            // preserve the step counter even without moment buffers
            for _ in 0..ckpt.adam_step {
                a.step(std::iter::empty())?;
            }
            a
        } else {
            Adam::from_state(ckpt.adam_config, ckpt.adam_step, ckpt.adam_m.clone(), ckpt.adam_v.clone())
        };
        let mut rng = ChaCha8Rng::from_seed(ckpt.rng_seed);
        rng.set_word_pos(ckpt.rng_word_pos);
        Ok(Self {
            model,
            pool_params,
            config: ckpt.train_config.clone(),
            adam,
            epochs_done: ckpt.epochs_done,
            norm_mean: ckpt.norm_mean.clone(),
            norm_std: ckpt.norm_std.clone(),
            dsp: ckpt.dsp.clone(),
            rng,
        })
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let mut tensors: Vec<(String, Tensor)> = self
            .model
            .params
            .iter()
            .map(|(n, t)| (n.to_string(), t.clone()))
            .collect();
        tensors.extend(self.pool_params.iter().map(|(n, t)| (n.to_string(), t.clone())));
        Checkpoint {
            model_config: self.model.config.clone(),
            train_config: self.config.clone(),
            dsp: self.dsp.clone(),
            norm_mean: self.norm_mean.clone(),
            norm_std: self.norm_std.clone(),
            tensors,
            bn: self.model.bn_stats().map(|(n, s)| (n.to_string(), s.clone())).collect(),
            adam_step: self.adam.step_count(),
            adam_config: self.adam.config(),
            adam_m: self.adam.first_moments().to_vec(),
            adam_v: self.adam.second_moments().to_vec(),
            epochs_done: self.epochs_done,
            rng_seed: self.rng.get_seed(),
            rng_word_pos: self.rng.get_word_pos(),
        }
    }

    /// Hex digest over every parameter in order; identifies an init.
    pub fn params_hash(&self) -> String {
        let mut hasher = Sha256::new();
        for (name, t) in self.model.params.iter().chain(self.pool_params.iter()) {
            hasher.update(name.as_bytes());
            for v in t.data() {
                hasher.update(v.to_le_bytes());
            }
        }
        format!("{:x}", hasher.finalize())
    }

    pub fn build_dataset(&self, corpus: &CorpusManifest, split: &str) -> Result<Dataset, TrainError> {
        let raw = load_raw_split(corpus, split)?;
        Ok(standardize_split(raw, &self.norm_mean, &self.norm_std))
    }

    fn step(
        &mut self,
        ds: &Dataset,
        idxs: &[usize],
        epoch: usize,
        batch_index: usize,
    ) -> Result<(f64, f64, f64), TrainError> {
        let c = self.model.config.categories;
        let (feats, labels) = batch_tensors(ds, idxs, c);
        let mut g = Graph::new();
        let model_bound = self.model.params.bind(&mut g, true);
        let pool_bound = self.pool_params.bind(&mut g, true);
        let x = g.leaf(&feats, false);
        let y = g.leaf(&labels, false);
        let z = self.model.encoder_forward(&mut g, &model_bound, x, BnMode::Train)?;
        let (p, _) =
            pooling_probabilities(&mut g, self.config.pooling, &self.pool_params, &pool_bound, z)?;
        let xbar = self.model.decoder_forward(&mut g, &model_bound, z, BnMode::Train)?;
        let (total, l1, l2) = joint_loss(&mut g, p, y, xbar, x, self.config.alpha)?;
        g.backward(total)?;

        let total_v = g.scalar_value(total);
        let names: Vec<&str> = self
            .model
            .params
            .names()
            .chain(self.pool_params.names())
            .collect();
        let all_ids: Vec<TensorId> =
            model_bound.ids.iter().chain(pool_bound.ids.iter()).copied().collect();
        let grads: Vec<Vec<f64>> = all_ids
            .iter()
            .enumerate()
            .map(|(i, &id)| {
                g.grad(id).map(|gr| gr.to_vec()).unwrap_or_else(|| {
                    let len = if i < self.model.params.len() {
                        self.model.params.value_at(i).len()
                    } else {
                        self.pool_params.value_at(i - self.model.params.len()).len()
                    };
                    vec![0.0; len]
                })
            })
            .collect();
        if !total_v.is_finite() {
            let first_nan = names
                .iter()
                .zip(&grads)
                .find(|(_, g)| g.iter().any(|v| v.is_nan()))
                .map(|(n, _)| format!(", first nan grad in {n}"))
                .unwrap_or_default();
            return Err(TrainError::NanLoss { epoch, batch: batch_index, detail: first_nan });
        }

        let n_model = self.model.params.len();
        let (model_grads, pool_grads) = grads.split_at(n_model);
        let model_iter = self
            .model
            .params
            .iter_mut()
            .zip(model_grads)
            .map(|((n, t), gr)| (n, t.data_mut(), gr.as_slice()));
        let pool_iter = self
            .pool_params
            .iter_mut()
            .zip(pool_grads)
            .map(|((n, t), gr)| (n, t.data_mut(), gr.as_slice()));
        self.adam.step(model_iter.chain(pool_iter)).map_err(|e| match e {
            AutogradError::NanGrad { name } => TrainError::NanLoss {
                epoch,
                batch: batch_index,
                detail: format!(", first nan grad in {name}"),
            },
            other => TrainError::Autograd(other),
        })?;
        Ok((g.scalar_value(l1), g.scalar_value(l2), total_v))
    }

    /// Forward pass without learning: probabilities and mean
    /// reconstruction MSE over the dataset.
    pub fn eval_scores(&mut self, ds: &Dataset) -> Result<(Vec<f64>, f64), TrainError> {
        let c = self.model.config.categories;
        let mut scores = Vec::with_capacity(ds.len() * c);
        let mut mse_sum = 0.0;
        let batch = self.config.batch.max(1);
        let idxs: Vec<usize> = (0..ds.len()).collect();
        for chunk in idxs.chunks(batch) {
            let (feats, _) = batch_tensors(ds, chunk, c);
            let mut g = Graph::new();
            let model_bound = self.model.params.bind(&mut g, false);
            let pool_bound = self.pool_params.bind(&mut g, false);
            let x = g.leaf(&feats, false);
            let z = self.model.encoder_forward(&mut g, &model_bound, x, BnMode::Eval)?;
            let (p, _) = pooling_probabilities(
                &mut g,
                self.config.pooling,
                &self.pool_params,
                &pool_bound,
                z,
            )?;
            let xbar = self.model.decoder_forward(&mut g, &model_bound, z, BnMode::Eval)?;
            let l2 = g.mse_loss(xbar, x)?;
            scores.extend_from_slice(g.data(p));
            mse_sum += g.scalar_value(l2) * chunk.len() as f64;
        }
        Ok((scores, mse_sum / ds.len() as f64))
    }

    /// Runs the remaining epochs (resume-aware).
    pub fn run(&mut self, corpus: &CorpusManifest) -> Result<Vec<EpochReport>, TrainError> {
        let train_ds = self.build_dataset(corpus, "train")?;
        let val_ds = self.build_dataset(corpus, "val")?;
        let c = self.model.config.categories;
        let mut reports = Vec::new();
        for epoch in (self.epochs_done as usize)..self.config.epochs {
            let started = Instant::now();
            let mut order: Vec<usize> = (0..train_ds.len()).collect();
            // Fisher-Yates on the master rng; part of the checkpointed state
            for i in (1..order.len()).rev() {
                let j = self.rng.gen_range(0..=i);
                order.swap(i, j);
            }
            let mut sums = (0.0, 0.0, 0.0);
            let mut clips = 0usize;
            for (batch_index, chunk) in order.chunks(self.config.batch.max(1)).enumerate() {
                let (l1, l2, total) = self.step(&train_ds, chunk, epoch + 1, batch_index)?;
                sums.0 += l1 * chunk.len() as f64;
                sums.1 += l2 * chunk.len() as f64;
                sums.2 += total * chunk.len() as f64;
                clips += chunk.len();
            }
            let (val_scores, val_recon_mse) = self.eval_scores(&val_ds)?;
            let labels: Vec<bool> = val_ds.labels().iter().flatten().copied().collect();
            let batch = EvalBatch::new(
                val_scores,
                labels,
                val_ds.len(),
                c,
                (0..c).map(|i| i.to_string()).collect(),
            )?;
            let report = evaluate(&batch, DEFAULT_THRESHOLD);
            self.epochs_done = epoch as u32 + 1;
            reports.push(EpochReport {
                epoch: epoch + 1,
                l1: sums.0 / clips as f64,
                l2: sums.1 / clips as f64,
                total: sums.2 / clips as f64,
                seconds: started.elapsed().as_secs_f64(),
                val_micro_p: report.micro_p,
                val_macro_p: report.macro_p,
                val_auc: report.auc,
                val_recon_mse,
            });
        }
        Ok(reports)
    }
}

/// Full training run: init, epochs, final checkpoint.
pub fn train(
    corpus: &CorpusManifest,
    model_config: ModelConfig,
    config: &TrainConfig,
) -> Result<(Checkpoint, Vec<EpochReport>), TrainError> {
    let mut trainer = Trainer::new(corpus, model_config, config.clone())?;
    let reports = trainer.run(corpus)?;
    Ok((trainer.to_checkpoint(), reports))
}

/// Metrics of a checkpoint on one corpus split.
pub fn evaluate_checkpoint(
    ckpt: &Checkpoint,
    corpus: &CorpusManifest,
    split: &str,
    threshold: f64,
) -> Result<MetricReport, TrainError> {
    let ckpt_fp = ckpt.dsp.fingerprint();
    let corpus_fp = corpus.meta.dsp.fingerprint();
    if ckpt_fp != corpus_fp {
        return Err(TrainError::FingerprintMismatch { ckpt: ckpt_fp, corpus: corpus_fp });
    }
    let mut trainer = Trainer::from_checkpoint(ckpt)?;
    let ds = trainer.build_dataset(corpus, split)?;
    let (scores, _) = trainer.eval_scores(&ds)?;
    let labels: Vec<bool> = ds.labels().iter().flatten().copied().collect();
    let c = ckpt.model_config.categories;
    let batch = EvalBatch::new(scores, labels, ds.len(), c, corpus.meta.categories.clone())?;
    Ok(evaluate(&batch, threshold))
}

#[derive(Debug, Clone)]
pub struct AblationRow {
    pub alpha: f64,
    pub snr_db: f64,
    pub micro_p: Option<f64>,
    pub macro_p: Option<f64>,
    pub auc: Option<f64>,
}

pub struct AblationOutcome {
    pub rows: Vec<AblationRow>,
    /// One init hash per run; all equal because every run shares the seed.
    pub init_hashes: Vec<String>,
    pub runs: Vec<(Checkpoint, Vec<EpochReport>)>,
}

pub fn ablation_csv(rows: &[AblationRow]) -> String {
    let mut out = String::from("alpha,snr_db,micro_p,macro_p,auc\n");
    for r in rows {
        out.push_str(&format!(
            "{},{},{},{},{}\n",
            r.alpha,
            r.snr_db,
            crate::metrics::format_metric(r.micro_p),
            crate::metrics::format_metric(r.macro_p),
            crate::metrics::format_metric(r.auc),
        ));
    }
    out
}

/// One training run per alpha under a shared seed, evaluated on the test
/// split per SNR present in the corpus.
pub fn ablate(
    corpus: &CorpusManifest,
    model_config: ModelConfig,
    base: &TrainConfig,
    alphas: &[f64],
) -> Result<AblationOutcome, TrainError> {
    if alphas.is_empty() {
        return Err(TrainError::EmptyAlphas);
    }
    let mut rows = Vec::new();
    let mut init_hashes = Vec::new();
    let mut runs = Vec::new();
    for &alpha in alphas {
        let config = TrainConfig { alpha, ..base.clone() };
        let mut trainer = Trainer::new(corpus, model_config.clone(), config)?;
        init_hashes.push(trainer.params_hash());
        let reports = trainer.run(corpus)?;
        let ckpt = trainer.to_checkpoint();

        let ds = trainer.build_dataset(corpus, "test")?;
        let (scores, _) = trainer.eval_scores(&ds)?;
        let c = corpus.n_categories();
        for snr in corpus.snr_values() {
            let keep: Vec<usize> = ds
                .entries
                .iter()
                .enumerate()
                .filter(|(_, e)| e.snr_db == snr)
                .map(|(i, _)| i)
                .collect();
            if keep.is_empty() {
                continue;
            }
            let mut s = Vec::with_capacity(keep.len() * c);
            let mut l = Vec::with_capacity(keep.len() * c);
            for &i in &keep {
                s.extend_from_slice(&scores[i * c..(i + 1) * c]);
                l.extend(ds.labels()[i].iter().copied());
            }
            let batch = EvalBatch::new(s, l, keep.len(), c, corpus.meta.categories.clone())?;
            let report = evaluate(&batch, DEFAULT_THRESHOLD);
            rows.push(AblationRow {
                alpha,
                snr_db: snr,
                micro_p: report.micro_p,
                macro_p: report.macro_p,
                auc: report.auc,
            });
        }
        runs.push((ckpt, reports));
    }
    Ok(AblationOutcome { rows, init_hashes, runs })
}

/// Everything the trace visualization needs for one clip.
pub struct ClipVisualization {
    pub input: Tensor,
    pub reconstruction: Tensor,
    pub trace: AttentionTrace,
}

/// Runs one clip through a trained checkpoint in eval mode and captures
/// the standardized input, the reconstruction and the attention trace.
pub fn visualize_clip(
    ckpt: &Checkpoint,
    audio: &crate::dsp::AudioBuffer,
) -> Result<ClipVisualization, TrainError> {
    let PoolingKind::TwoStep = ckpt.train_config.pooling else {
        return Err(TrainError::NoTrace(ckpt.train_config.pooling.name()));
    };
    let mut trainer = Trainer::from_checkpoint(ckpt)?;
    let lm = log_mel(audio, &trainer.dsp)?;
    let f0 = lm.n_mels;
    let t_pad = pad16(lm.frames);
    let mut block = vec![0.0; f0 * t_pad];
    for ti in 0..lm.frames {
        for (m, v) in lm.frame(ti).iter().enumerate() {
            block[m * t_pad + ti] = (v - trainer.norm_mean[m]) / trainer.norm_std[m];
        }
    }
    let input = Tensor::new(&[f0, t_pad], block.clone()).expect("sized above");
    let feats = Tensor::new(&[1, 1, f0, t_pad], block).expect("sized above");

    let mut g = Graph::new();
    let model_bound = trainer.model.params.bind(&mut g, false);
    let pool_bound = trainer.pool_params.bind(&mut g, false);
    let x = g.leaf(&feats, false);
    let z = trainer.model.encoder_forward(&mut g, &model_bound, x, BnMode::Eval)?;
    let (_, trace_ids) =
        crate::pooling::two_step_forward(&mut g, &trainer.pool_params, &pool_bound, z)?;
    let xbar = trainer.model.decoder_forward(&mut g, &model_bound, z, BnMode::Eval)?;
    let recon = Tensor::new(&[f0, t_pad], g.data(xbar).to_vec()).expect("decoder shape contract");
    let trace = extract_trace(&g, &trace_ids, 0);
    Ok(ClipVisualization { input, reconstruction: recon, trace })
}

/// Convenience for writing report files next to a checkpoint.
pub fn write_text(path: &Path, content: &str) -> std::io::Result<()> {
    std::fs::write(path, content)
}
