//! End-to-end training behavior on a small synthetic corpus: loss
//! plumbing, gradient partition between the two objectives, determinism,
//! checkpointing and resume.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use tempfile::TempDir;

use wsed_core::autograd::{random_tensor, BnMode, Graph, Tensor};
use wsed_core::checkpoint::Checkpoint;
use wsed_core::dsp::DspConfig;
use wsed_core::model::{ModelConfig, SedModel};
use wsed_core::pooling::{init_two_step_params, pooling_probabilities, PoolingKind};
use wsed_core::synth::{make_toy_corpus, CorpusManifest, ToyParams};
use wsed_core::train::{
    ablate, epoch_reports_csv, evaluate_checkpoint, joint_loss, train, TrainConfig, Trainer,
};

fn small_corpus(dir: &TempDir, seed: u64) -> CorpusManifest {
    make_toy_corpus(
        dir.path(),
        &ToyParams {
            n_clips: 20,
            categories: 3,
            snr_db: 20.0,
            seed,
            events_per_clip: 3,
            dsp: DspConfig { sample_rate: 8000, ..DspConfig::default() },
        },
    )
    .unwrap()
}

fn quick_config(epochs: usize) -> TrainConfig {
    TrainConfig { epochs, batch: 8, seed: 11, alpha: 0.001, ..TrainConfig::default() }
}

#[test]
fn joint_loss_alpha_zero_is_exactly_bce() {
    let mut g = Graph::new();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let p = g.leaf(&Tensor::new(&[4], vec![0.3, 0.8, 0.5, 0.9]).unwrap(), false);
    let y = g.leaf(&Tensor::new(&[4], vec![0.0, 1.0, 1.0, 1.0]).unwrap(), false);
    let xbar = g.leaf(&random_tensor(&[8], &mut rng), false);
    let x = g.leaf(&random_tensor(&[8], &mut rng), false);
    let (total, l1, _) = joint_loss(&mut g, p, y, xbar, x, 0.0).unwrap();
    assert_eq!(total, l1);
    let bce = g.bce_loss(p, y).unwrap();
    assert_eq!(g.scalar_value(total), g.scalar_value(bce));
}

#[test]
fn joint_loss_vanishes_at_joint_minimum() {
    let mut g = Graph::new();
    let p = g.leaf(&Tensor::new(&[4], vec![0.0, 1.0, 1.0, 0.0]).unwrap(), false);
    let y = g.leaf(&Tensor::new(&[4], vec![0.0, 1.0, 1.0, 0.0]).unwrap(), false);
    let shared = Tensor::new(&[6], vec![0.5, -1.0, 2.0, 0.25, 0.0, -0.75]).unwrap();
    let xbar = g.leaf(&shared, false);
    let x = g.leaf(&shared, false);
    for alpha in [0.0, 0.001, 0.1, 10.0] {
        let (total, _, _) = joint_loss(&mut g, p, y, xbar, x, alpha).unwrap();
        assert!(g.scalar_value(total) < 1e-6, "alpha {alpha}");
    }
}

/// Builds a tiny model graph and returns gradients of pooling and decoder
/// parameters under a chosen alpha, backpropagating `which` loss.
fn partition_grads(alpha: f64, which: &str) -> (Vec<Vec<f64>>, Vec<Vec<f64>>) {
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    let mut model = SedModel::init(ModelConfig::tiny(2, 16), 5);
    let pool = init_two_step_params(2, &mut rng);
    let mut g = Graph::new();
    let model_bound = model.params.bind(&mut g, true);
    let pool_bound = pool.bind(&mut g, true);
    let x = g.leaf(&random_tensor(&[2, 1, 16, 16], &mut rng), false);
    let y = g.leaf(&Tensor::new(&[2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap(), false);
    let z = model.encoder_forward(&mut g, &model_bound, x, BnMode::Train).unwrap();
    let (p, _) = pooling_probabilities(&mut g, PoolingKind::TwoStep, &pool, &pool_bound, z).unwrap();
    let xbar = model.decoder_forward(&mut g, &model_bound, z, BnMode::Train).unwrap();
    let (total, l1, l2) = joint_loss(&mut g, p, y, xbar, x, alpha).unwrap();
    let loss = match which {
        "l1" => l1,
        "l2" => l2,
        _ => total,
    };
    g.backward(loss).unwrap();
    let pool_grads = pool_bound
        .ids
        .iter()
        .map(|&id| g.grad(id).map(|v| v.to_vec()).unwrap_or_default())
        .collect();
    let dec_grads = model
        .params
        .names()
        .zip(&model_bound.ids)
        .filter(|(n, _)| n.starts_with("dec."))
        .map(|(_, &id)| g.grad(id).map(|v| v.to_vec()).unwrap_or_default())
        .collect();
    (pool_grads, dec_grads)
}

#[test]
fn gradient_partition_between_losses() {
    // detection loss reaches pooling but not the decoder
    let (pool_g, dec_g) = partition_grads(0.5, "l1");
    assert!(pool_g.iter().any(|g| g.iter().any(|&v| v != 0.0)));
    assert!(dec_g.iter().all(|g| g.is_empty() || g.iter().all(|&v| v == 0.0)));

    // reconstruction loss reaches the decoder but not pooling
    let (pool_g, dec_g) = partition_grads(0.5, "l2");
    assert!(pool_g.iter().all(|g| g.is_empty() || g.iter().all(|&v| v == 0.0)));
    assert!(dec_g.iter().any(|g| g.iter().any(|&v| v != 0.0)));
}

#[test]
fn pooling_gradients_independent_of_alpha() {
    let (a, _) = partition_grads(0.0, "total");
    let (b, _) = partition_grads(0.1, "total");
    for (ga, gb) in a.iter().zip(&b) {
        assert_eq!(ga.len(), gb.len());
        for (x, y) in ga.iter().zip(gb) {
            assert!((x - y).abs() < 1e-12);
        }
    }
}

#[test]
fn training_learns_and_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let corpus = small_corpus(&dir, 3);
    let config = quick_config(3);
    let (ckpt_a, reports_a) = train(&corpus, ModelConfig::desk(3), &config).unwrap();
    let (ckpt_b, reports_b) = train(&corpus, ModelConfig::desk(3), &config).unwrap();

    assert_eq!(reports_a.len(), 3);
    assert!(reports_a.iter().all(|r| r.l1.is_finite() && r.l1 >= 0.0 && r.l2 >= 0.0));
    // losses shrink on this tiny run even in 3 epochs
    assert!(
        reports_a.last().unwrap().total < reports_a[0].total,
        "{} -> {}",
        reports_a[0].total,
        reports_a.last().unwrap().total
    );

    // bitwise determinism of everything except wall time
    for (a, b) in reports_a.iter().zip(&reports_b) {
        assert_eq!(a.epoch, b.epoch);
        assert_eq!(a.l1, b.l1);
        assert_eq!(a.l2, b.l2);
        assert_eq!(a.total, b.total);
        assert_eq!(a.val_micro_p, b.val_micro_p);
        assert_eq!(a.val_auc, b.val_auc);
        assert_eq!(a.val_recon_mse, b.val_recon_mse);
    }
    assert_eq!(ckpt_a.to_bytes(), ckpt_b.to_bytes());
}

#[test]
fn checkpoint_roundtrip_and_resume_match_uninterrupted() {
    let dir = tempfile::tempdir().unwrap();
    let corpus = small_corpus(&dir, 5);

    let (full_ckpt, full_reports) = train(&corpus, ModelConfig::desk(3), &quick_config(3)).unwrap();

    // interrupted after one epoch, then resumed
    let mut trainer = Trainer::new(&corpus, ModelConfig::desk(3), quick_config(3)).unwrap();
    let mut first = {
        let mut cfg = trainer.config.clone();
        cfg.epochs = 1;
        trainer.config = cfg;
        trainer.run(&corpus).unwrap()
    };
    let midpoint = trainer.to_checkpoint();
    let path = dir.path().join("mid.ckpt");
    midpoint.save(&path).unwrap();

    let loaded = Checkpoint::load(&path).unwrap();
    assert_eq!(loaded.to_bytes(), midpoint.to_bytes(), "save/load/save not byte-identical");

    let mut resumed = Trainer::from_checkpoint(&loaded).unwrap();
    resumed.config.epochs = 3;
    let rest = resumed.run(&corpus).unwrap();
    first.extend(rest);

    assert_eq!(first.len(), full_reports.len());
    for (a, b) in first.iter().zip(&full_reports) {
        assert!((a.l1 - b.l1).abs() <= 1e-9, "epoch {}: {} vs {}", a.epoch, a.l1, b.l1);
        assert!((a.l2 - b.l2).abs() <= 1e-9);
        assert!((a.total - b.total).abs() <= 1e-9);
    }
    assert_eq!(resumed.to_checkpoint().to_bytes(), full_ckpt.to_bytes());
}

#[test]
fn evaluate_checks_fingerprint() {
    let dir = tempfile::tempdir().unwrap();
    let corpus = small_corpus(&dir, 9);
    let (ckpt, _) = train(&corpus, ModelConfig::desk(3), &quick_config(1)).unwrap();

    let report = evaluate_checkpoint(&ckpt, &corpus, "test", 0.5).unwrap();
    if let Some(p) = report.micro_p {
        assert!((0.0..=1.0).contains(&p));
    }

    // corpus at a different sample rate must be refused
    let dir2 = tempfile::tempdir().unwrap();
    let other = make_toy_corpus(
        dir2.path(),
        &ToyParams {
            n_clips: 10,
            categories: 3,
            snr_db: 20.0,
            seed: 1,
            events_per_clip: 3,
            dsp: DspConfig { sample_rate: 16000, ..DspConfig::default() },
        },
    )
    .unwrap();
    let err = evaluate_checkpoint(&ckpt, &other, "test", 0.5).unwrap_err();
    assert!(err.to_string().contains("fingerprint"));
}

#[test]
fn nan_parameters_abort_with_context() {
    let dir = tempfile::tempdir().unwrap();
    let corpus = small_corpus(&dir, 13);
    let mut trainer = Trainer::new(&corpus, ModelConfig::desk(3), quick_config(1)).unwrap();
    let poisoned = {
        let mut t = trainer.model.params.get("enc.block1.conv1.weight").clone();
        t.data_mut()[0] = f64::NAN;
        t
    };
    trainer.model.params.set("enc.block1.conv1.weight", poisoned);
    let err = trainer.run(&corpus).unwrap_err();
    let msg = err.to_string();
    assert!(msg.contains("nan loss"), "{msg}");
    assert!(msg.contains("batch 0"), "{msg}");
    assert!(msg.contains("first nan grad in"), "{msg}");
}

#[test]
fn degenerate_ablation_matches_single_run() {
    let dir = tempfile::tempdir().unwrap();
    let corpus = small_corpus(&dir, 21);
    let config = quick_config(2);
    let outcome = ablate(&corpus, ModelConfig::desk(3), &config, &[0.0]).unwrap();
    assert_eq!(outcome.rows.len(), 1);
    assert_eq!(outcome.init_hashes.len(), 1);

    let single = {
        let cfg = TrainConfig { alpha: 0.0, ..config };
        let (ckpt, _) = train(&corpus, ModelConfig::desk(3), &cfg).unwrap();
        evaluate_checkpoint(&ckpt, &corpus, "test", 0.5).unwrap()
    };
    assert_eq!(outcome.rows[0].micro_p, single.micro_p);
    assert_eq!(outcome.rows[0].auc, single.auc);

    let csv = wsed_core::train::ablation_csv(&outcome.rows);
    assert!(csv.starts_with("alpha,snr_db,micro_p,macro_p,auc\n"));
    assert_eq!(csv.lines().count(), 2);
}

#[test]
fn epoch_report_csv_has_pinned_columns() {
    let reports = vec![wsed_core::train::EpochReport {
        epoch: 1,
        l1: 0.5,
        l2: 1.25,
        total: 0.50125,
        seconds: 2.0,
        val_micro_p: Some(0.75),
        val_macro_p: None,
        val_auc: Some(0.9),
        val_recon_mse: 1.25,
    }];
    let csv = epoch_reports_csv(&reports);
    assert!(csv.starts_with("epoch,l1,l2,total,seconds,val_micro_p,val_macro_p,val_auc\n"));
    assert!(csv.contains("1,0.500000,1.250000,0.501250,2.000,0.750000,undefined,0.900000"));
}
