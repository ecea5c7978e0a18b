use mtag::checkpoint::{ModelCheckpoint, Provenance};
use mtag::evaluate::{check_vocabulary, score_examples, Example};
use mtag::train::{epoch_order, finetune, fit, train, StopReason, TrainConfig, TrainError};
use mtag_core::datasets::TagVocabulary;
use mtag_core::dsp::MelSpectrogram;
use mtag_core::gradcheck::tiny_config;
use mtag_core::metrics::song_scores;
use mtag_core::models::{Arch, Model, ModelConfig};
use mtag_core::optim::{LrPolicy, OptimizerKind};
use mtag_core::transfer::{backbone_diff, FineTunePolicy};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const PAD: f32 = -5.0;

fn random_examples(cfg: &ModelConfig, n: usize, frames: usize, seed: u64) -> Vec<Example> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|i| Example {
            recording_id: format!("r{i}"),
            mel: MelSpectrogram {
                n_mels: cfg.n_mels,
                n_frames: frames,
                values: (0..cfg.n_mels * frames).map(|_| rng.random_range(-1.0..1.0)).collect(),
                frame_rate: 10.0,
            },
            targets: (0..cfg.n_tags).map(|_| rng.random::<bool>()).collect(),
        })
        .collect()
}

fn tags(n: usize) -> Vec<String> {
    (0..n).map(|i| format!("t{i}")).collect()
}

fn config(model: ModelConfig, epochs: usize, lr: LrPolicy) -> TrainConfig {
    let mut cfg = TrainConfig::full(model, 3, PAD);
    cfg.max_epochs = epochs;
    cfg.batch_size = 4;
    cfg.lr_policy = lr;
    cfg
}

fn adam(lr: f64) -> LrPolicy {
    LrPolicy::Constant {
        kind: OptimizerKind::ADAM,
        lr,
    }
}

#[test]
fn single_clip_is_memorised() {
    let mut model = tiny_config(Arch::VggIsh, 1);
    model.dropout = 0.0;
    let mut ex = random_examples(&model, 2, 12, 1);
    ex[0].targets = vec![true];
    ex[1].targets = vec![false];
    let cfg = config(model, 200, adam(0.05));
    // One training clip; the validation pair only needs both classes.
    let (_, report) = train(&tags(1), &ex[..1], &ex, &cfg, "one").unwrap();
    let last = report.epochs.last().unwrap().train_loss;
    assert!(last < 0.05, "final loss {last}");
    assert_eq!(report.epochs.len(), 200);
    assert!(report.epochs.iter().enumerate().all(|(i, e)| e.epoch == i + 1));
}

#[test]
fn same_seed_reproduces_the_report() {
    for arch in Arch::ALL {
        let model = tiny_config(arch, 3);
        let ex = random_examples(&model, 10, 20, 2);
        let cfg = config(model, 3, adam(0.01));
        let (a, ra) = train(&tags(3), &ex[..8], &ex[8..], &cfg, "d").unwrap();
        let (b, rb) = train(&tags(3), &ex[..8], &ex[8..], &cfg, "d").unwrap();
        assert_eq!(ra, rb, "{arch}");
        assert_eq!(a.to_bytes(), b.to_bytes(), "{arch}");
        let mut other = cfg.clone();
        other.seed += 1;
        let (_, rc) = train(&tags(3), &ex[..8], &ex[8..], &other, "d").unwrap();
        assert_ne!(ra.epochs[0].train_loss, rc.epochs[0].train_loss, "{arch}");
    }
}

#[test]
fn empty_splits_and_nan_are_reported() {
    let model = tiny_config(Arch::Musicnn, 2);
    let ex = random_examples(&model, 4, 12, 3);
    let cfg = config(model, 2, adam(0.01));
    assert!(matches!(train(&tags(2), &[], &ex, &cfg, "d"), Err(TrainError::Data(_))));
    assert!(matches!(train(&tags(2), &ex, &[], &cfg, "d"), Err(TrainError::Data(_))));
    let mut bad = ex.clone();
    bad[1].mel.values.iter_mut().for_each(|v| *v = f32::NAN);
    let mut cfg = cfg;
    cfg.fit_input_norm = false;
    match train(&tags(2), &bad, &ex, &cfg, "d") {
        Err(TrainError::Fault { epoch, step }) => assert_eq!((epoch, step), (1, 1)),
        other => panic!("expected a fault, got {:?}", other.err()),
    }
}

#[test]
fn epoch_order_is_a_reproducible_permutation() {
    let a = epoch_order(50, 9, 1);
    let mut sorted = a.clone();
    sorted.sort_unstable();
    assert_eq!(sorted, (0..50).collect::<Vec<_>>());
    assert_eq!(a, epoch_order(50, 9, 1));
    assert_ne!(a, epoch_order(50, 9, 2));
    assert_ne!(a, epoch_order(50, 10, 1));
}

#[test]
fn full_batch_sgd_loss_does_not_rise() {
    let mut model = tiny_config(Arch::VggIsh, 3);
    model.dropout = 0.0;
    // Recordings exactly one chunk long make every epoch see the same batch.
    let ex = random_examples(&model, 4, model.chunk.n_frames, 4);
    let cfg = config(
        model,
        30,
        LrPolicy::Constant {
            kind: OptimizerKind::Sgd { momentum: 0.0 },
            lr: 1e-2,
        },
    );
    let (_, report) = train(&tags(3), &ex, &ex, &cfg, "d").unwrap();
    let losses: Vec<f64> = report.epochs.iter().map(|e| e.train_loss).collect();
    for w in losses.windows(2) {
        assert!(w[1] <= w[0] * 1.05, "{losses:?}");
    }
    assert!(losses.last() < losses.first());
}

#[test]
fn ties_select_the_earliest_epoch() {
    let cfg_model = tiny_config(Arch::Ast, 2);
    let ex = random_examples(&cfg_model, 8, 12, 5);
    // Identical recordings score identically, so every epoch's ROC-AUC is 0.5.
    let mut valid = ex.clone();
    for (i, v) in valid.iter_mut().enumerate() {
        v.mel = ex[0].mel.clone();
        v.targets = vec![i % 2 == 0, i % 3 == 0];
    }
    let model = Model::<f32>::build(&cfg_model, 1).unwrap();
    let mut cfg = config(cfg_model, 4, adam(0.01));
    cfg.patience = Some(2);
    let (_, report) = fit(model.clone(), &tags(2), &ex, &valid, &cfg, "d").unwrap();
    assert_eq!(report.best_epoch, 1);
    assert_eq!(report.stop_reason, StopReason::Patience);
    assert_eq!(report.epochs.len(), 3);
    assert!(report.epochs.iter().all(|e| e.valid_roc_auc == 0.5));

    let mut frozen = model;
    frozen.params.freeze_except(|_| false);
    assert!(matches!(
        fit(frozen, &tags(2), &ex, &valid, &cfg, "d"),
        Err(TrainError::Config(_))
    ));
}

fn source_checkpoint(arch: Arch) -> (ModelCheckpoint, Vec<Example>) {
    let model = tiny_config(arch, 4);
    let ex = random_examples(&model, 12, 16, 6);
    let cfg = config(model, 2, adam(0.01));
    let (ckpt, _) = train(&tags(4), &ex[..8], &ex[8..], &cfg, "src").unwrap();
    (ckpt, ex)
}

#[test]
fn output_only_finetune_keeps_backbone_bits() {
    for arch in Arch::ALL {
        let (source, _) = source_checkpoint(arch);
        let mut target_cfg = source.model.config.clone();
        target_cfg.n_tags = 3;
        let ex = random_examples(&target_cfg, 10, 16, 7);
        let cfg = config(target_cfg, 3, adam(0.05));
        let (out, report) = finetune(
            &source,
            "tgt",
            &tags(3),
            FineTunePolicy::OutputOnly,
            &cfg,
            &ex[..6],
            &ex[6..],
        )
        .unwrap();
        assert!(backbone_diff(&source.model, &out.model).is_empty(), "{arch}");
        assert_eq!(
            out.provenance.parent.as_deref(),
            Some(source.provenance.content_hash.as_str())
        );
        assert_eq!(out.provenance.source_dataset_id, "tgt");
        assert_eq!(report.dataset_id, "tgt");
        let head = out.model.params.find("head.weight").unwrap();
        assert_eq!(out.model.params.tensor(head).shape()[0], 3);

        let (all, _) = finetune(&source, "tgt", &tags(3), FineTunePolicy::All, &cfg, &ex[..6], &ex[6..]).unwrap();
        assert!(!backbone_diff(&source.model, &all.model).is_empty(), "{arch}");
    }
}

#[test]
fn vocabulary_mismatch_is_an_error() {
    let vocab = TagVocabulary {
        tags: tags(3),
        frequencies: vec![0.5; 3],
    };
    assert!(check_vocabulary(&tags(3), &vocab).is_ok());
    assert!(check_vocabulary(&tags(2), &vocab).is_err());
    let mut swapped = tags(3);
    swapped.swap(0, 2);
    let err = check_vocabulary(&swapped, &vocab).unwrap_err();
    assert!(err.to_string().contains("position 0"));
}

#[test]
fn random_weights_score_at_chance() {
    let model_cfg = tiny_config(Arch::VggIsh, 4);
    let ex = random_examples(&model_cfg, 400, 12, 8);
    let model = Model::<f32>::build(&model_cfg, 2).unwrap();
    let report = mtag::evaluate::evaluate_examples(&model, &tags(4), &ex, PAD, 64).unwrap();
    assert!((0.4..=0.6).contains(&report.macro_roc_auc), "{}", report.macro_roc_auc);
}

#[test]
fn batched_scoring_matches_per_song_scoring() {
    for arch in Arch::ALL {
        let cfg = tiny_config(arch, 3);
        let model = Model::<f32>::build(&cfg, 4).unwrap();
        // Lengths cover padding, one chunk and several chunks.
        let mut ex = random_examples(&cfg, 3, 30, 9);
        ex[0].mel.n_frames = 5;
        ex[0].mel.values.truncate(cfg.n_mels * 5);
        let batched = score_examples(&model, &ex, PAD, 4).unwrap();
        for (e, b) in ex.iter().zip(&batched) {
            let single = song_scores(&model, &e.mel, PAD, 1).unwrap();
            for (x, y) in single.iter().zip(b) {
                assert!((x - y).abs() < 1e-6, "{arch}: {x} vs {y}");
            }
        }
    }
}

#[test]
fn provenance_records_training() {
    let (ckpt, _) = source_checkpoint(Arch::VggIsh);
    assert_eq!(ckpt.provenance.source_dataset_id, "src");
    assert!(ckpt.provenance.epochs_trained >= 1);
    let round = ModelCheckpoint::from_bytes(&ckpt.to_bytes()).unwrap();
    assert_eq!(round.provenance, ckpt.provenance);
    let _ = Provenance::clone(&round.provenance);
}
