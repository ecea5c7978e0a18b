//! Supervised multi-label training and parameter-sharing fine-tuning.

use std::time::Instant;

use mtag_core::dsp::{chunk, ChunkMode};
use mtag_core::metrics::EvalError;
use mtag_core::models::{Arch, InputNorm, Model, ModelConfig, ModelError};
use mtag_core::nn::{Forward, ParamKind, ParamStore};
use mtag_core::optim::{LrPolicy, OptimizerError, OptimizerState};
use mtag_core::tensor::{Tensor, TensorError};
use mtag_core::transfer::{backbone_diff, initialize_from_source, FineTunePolicy, TransferError};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::{content_hash, ModelCheckpoint, Provenance};
use crate::evaluate::{evaluate_examples, Example};

#[derive(Debug, thiserror::Error)]
pub enum TrainError {
    #[error("data error: {0}")]
    Data(String),
    #[error("non-finite loss at epoch {epoch}, step {step}")]
    Fault { epoch: usize, step: usize },
    #[error("invalid training configuration: {0}")]
    Config(String),
    #[error("backbone changed under output-only fine-tuning: {0:?}")]
    FreezeViolation(Vec<String>),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Optimizer(#[from] OptimizerError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error(transparent)]
    Transfer(#[from] TransferError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub model: ModelConfig,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub lr_policy: LrPolicy,
    pub seed: u64,
    /// Stop after this many epochs without a validation improvement.
    #[serde(default)]
    pub patience: Option<usize>,
    /// Wall-clock limit; checked between epochs. Breaks bitwise
    /// reproducibility when it triggers.
    #[serde(default)]
    pub budget_sec: Option<f64>,
    /// Stop as soon as validation macro ROC-AUC reaches this value.
    #[serde(default)]
    pub target_roc_auc: Option<f64>,
    /// Set the model's input standardisation from training data before
    /// the first step. Ignored when fine-tuning.
    #[serde(default = "yes")]
    pub fit_input_norm: bool,
    #[serde(default = "default_eval_batch")]
    pub eval_batch: usize,
    /// Value used to pad recordings shorter than one chunk.
    pub pad_value: f32,
}

fn yes() -> bool {
    true
}

fn default_eval_batch() -> usize {
    32
}

fn default_batch(arch: Arch) -> usize {
    match arch {
        Arch::VggIsh | Arch::Musicnn => 16,
        Arch::Ast => 12,
    }
}

impl TrainConfig {
    /// Published optimisation settings for the architecture.
    pub fn full(model: ModelConfig, seed: u64, pad_value: f32) -> Self {
        let arch = model.kind();
        let (max_epochs, lr_policy) = match arch {
            Arch::VggIsh => (200, LrPolicy::mixed_adam_sgd(200)),
            Arch::Musicnn => (50, LrPolicy::mixed_adam_sgd(50)),
            Arch::Ast => (30, LrPolicy::ast_adam_decay()),
        };
        Self {
            model,
            batch_size: default_batch(arch),
            max_epochs,
            lr_policy,
            seed,
            patience: None,
            budget_sec: None,
            target_roc_auc: None,
            fit_input_norm: true,
            eval_batch: default_eval_batch(),
            pad_value,
        }
    }

    /// Same schedule shapes as [`TrainConfig::full`] with fewer epochs and
    /// larger rates, for desk-scale models.
    pub fn desk(model: ModelConfig, seed: u64, pad_value: f32) -> Self {
        let arch = model.kind();
        let max_epochs = 40;
        let lr_policy = match arch {
            Arch::VggIsh | Arch::Musicnn => LrPolicy::MixedAdamSgd {
                base_lr: 1e-3,
                max_epochs,
            },
            Arch::Ast => LrPolicy::AstAdamDecay {
                base_lr: 5e-4,
                decay: 0.85,
                hold: 5,
            },
        };
        Self {
            max_epochs,
            lr_policy,
            patience: Some(10),
            ..Self::full(model, seed, pad_value)
        }
    }

    pub fn validate(&self) -> Result<(), TrainError> {
        if self.batch_size == 0 || self.max_epochs == 0 || self.eval_batch == 0 {
            return Err(TrainError::Config(
                "batch_size, max_epochs and eval_batch must be at least 1".into(),
            ));
        }
        self.model.validate()?;
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopReason {
    MaxEpochs,
    Patience,
    Budget,
    TargetReached,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub valid_roc_auc: f64,
    pub valid_pr_auc: f64,
    pub learning_rate: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub experiment_id: Option<String>,
    pub arch: Arch,
    pub dataset_id: String,
    pub seed: u64,
    pub lr_policy: String,
    /// Contiguous from epoch 1.
    pub epochs: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub best_valid_roc_auc: f64,
    pub stop_reason: StopReason,
    /// Content hash of the returned checkpoint.
    pub checkpoint: String,
}

/// Deterministic seed derivation for per-epoch, per-step streams.
pub fn derive_seed(seed: u64, a: u64, b: u64) -> u64 {
    let mut z = seed ^ a.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ b.wrapping_mul(0xC2B2_AE3D_27D4_EB4F);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Visiting order of the training set in `epoch`.
pub fn epoch_order(n: usize, seed: u64, epoch: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(derive_seed(seed, 1, epoch as u64)));
    order
}

pub fn input_stats(examples: &[Example]) -> InputNorm {
    let (mut n, mut s, mut s2) = (0usize, 0.0f64, 0.0f64);
    for e in examples {
        for &v in &e.mel.values {
            n += 1;
            s += v as f64;
            s2 += (v as f64) * (v as f64);
        }
    }
    let n = n.max(1) as f64;
    let mean = s / n;
    let var = (s2 / n - mean * mean).max(0.0);
    InputNorm {
        mean,
        std: var.sqrt().max(1e-6),
    }
}

/// Trains `model` in place of a copy and returns the best-validation model.
/// Parameters frozen on entry stay untouched.
pub fn fit(
    mut model: Model<f32>,
    tags: &[String],
    train: &[Example],
    valid: &[Example],
    cfg: &TrainConfig,
    dataset_id: &str,
) -> Result<(Model<f32>, TrainReport), TrainError> {
    cfg.validate()?;
    if train.is_empty() {
        return Err(TrainError::Data(format!("{dataset_id}: empty train split")));
    }
    if valid.is_empty() {
        return Err(TrainError::Data(format!("{dataset_id}: empty valid split")));
    }
    let n_tags = model.config.n_tags;
    if tags.len() != n_tags || train.iter().chain(valid).any(|e| e.targets.len() != n_tags) {
        return Err(TrainError::Data(format!("targets do not match the {n_tags}-tag model")));
    }
    if model
        .params
        .iter()
        .all(|(id, p)| p.kind != ParamKind::Trainable || model.params.is_frozen(id))
    {
        return Err(TrainError::Config("every parameter is frozen".into()));
    }
    let started = Instant::now();
    let (first_kind, first_lr) = cfg.lr_policy.at(1);
    let mut opt = OptimizerState::<f32>::new(first_kind, first_lr)?;
    let chunk_spec = model.config.chunk;
    let per_chunk = model.config.n_mels * chunk_spec.n_frames;
    let mut epochs = Vec::new();
    let mut best: Option<(usize, f64, ParamStore<f32>)> = None;
    let mut stop_reason = StopReason::MaxEpochs;

    for epoch in 1..=cfg.max_epochs {
        let (kind, lr) = cfg.lr_policy.at(epoch);
        opt.set_kind(kind);
        opt.set_learning_rate(lr)?;
        let order = epoch_order(train.len(), cfg.seed, epoch);
        let mut batches: Vec<&[usize]> = order.chunks(cfg.batch_size).collect();
        // A lone trailing sample would give degenerate batch statistics.
        if batches.len() > 1 && batches.last().is_some_and(|b| b.len() == 1) {
            batches.pop();
        }
        let mut loss_sum = 0.0;
        for (step, idx) in batches.iter().enumerate() {
            let mut data = Vec::with_capacity(idx.len() * per_chunk);
            let mut targets = Vec::with_capacity(idx.len() * n_tags);
            for &i in idx.iter() {
                let mode = ChunkMode::TrainRandom(derive_seed(cfg.seed, 2 + epoch as u64, i as u64));
                let c = chunk(&chunk_spec, &train[i].mel, mode, cfg.pad_value);
                data.extend_from_slice(&c[0]);
                targets.extend(train[i].targets.iter().map(|&t| if t { 1.0f32 } else { 0.0 }));
            }
            let x = Tensor::new(model.config.input_shape(idx.len()).to_vec(), data).map_err(ModelError::from)?;
            let mut f = Forward::new(
                &model.params,
                true,
                derive_seed(cfg.seed, 3 + epoch as u64, step as u64),
            );
            // Non-finite inputs or weights surface as a fault in the first
            // op that sees them.
            let fault = |e: ModelError| match e {
                ModelError::Tensor(TensorError::NumericFault { .. }) => TrainError::Fault { epoch, step: step + 1 },
                e => e.into(),
            };
            let y = model.forward(&mut f, &x).map_err(fault)?;
            let loss = f.graph.bce_with_logits(y, &targets).map_err(|e| fault(e.into()))?;
            let value = f.graph.value(loss).data()[0] as f64;
            if !value.is_finite() {
                return Err(TrainError::Fault { epoch, step: step + 1 });
            }
            let (grads, stats) = f.backward(loss).map_err(|e| fault(e.into()))?;
            model.params.apply_stat_updates(&stats);
            opt.step(&mut model.params, &grads)?;
            loss_sum += value;
        }
        let report = evaluate_examples(&model, tags, valid, cfg.pad_value, cfg.eval_batch)?;
        epochs.push(EpochRecord {
            epoch,
            train_loss: loss_sum / batches.len() as f64,
            valid_roc_auc: report.macro_roc_auc,
            valid_pr_auc: report.macro_pr_auc,
            learning_rate: lr,
        });
        if best.as_ref().map_or(true, |b| report.macro_roc_auc > b.1) {
            best = Some((epoch, report.macro_roc_auc, model.params.clone()));
        }
        let best_epoch = best.as_ref().map_or(epoch, |b| b.0);
        if cfg.target_roc_auc.is_some_and(|t| report.macro_roc_auc >= t) {
            stop_reason = StopReason::TargetReached;
            break;
        }
        if cfg.patience.is_some_and(|p| epoch - best_epoch >= p) {
            stop_reason = StopReason::Patience;
            break;
        }
        if cfg.budget_sec.is_some_and(|b| started.elapsed().as_secs_f64() >= b) {
            stop_reason = StopReason::Budget;
            break;
        }
    }
    let (best_epoch, best_roc, params) = best.expect("at least one epoch ran");
    model.params = params;
    let report = TrainReport {
        experiment_id: None,
        arch: model.config.kind(),
        dataset_id: dataset_id.to_string(),
        seed: cfg.seed,
        lr_policy: cfg.lr_policy.name().to_string(),
        epochs,
        best_epoch,
        best_valid_roc_auc: best_roc,
        stop_reason,
        checkpoint: content_hash(&model),
    };
    Ok((model, report))
}

/// Trains a freshly initialised `cfg.model` on one dataset.
pub fn train(
    tags: &[String],
    train_set: &[Example],
    valid_set: &[Example],
    cfg: &TrainConfig,
    dataset_id: &str,
) -> Result<(ModelCheckpoint, TrainReport), TrainError> {
    let mut model_cfg = cfg.model.clone();
    if model_cfg.n_tags != tags.len() {
        return Err(TrainError::Data(format!(
            "model has {} outputs, vocabulary has {} tags",
            model_cfg.n_tags,
            tags.len()
        )));
    }
    if cfg.fit_input_norm {
        model_cfg.input_norm = input_stats(train_set);
    }
    let model = Model::<f32>::build(&model_cfg, cfg.seed)?;
    let (model, report) = fit(model, tags, train_set, valid_set, cfg, dataset_id)?;
    let epochs_trained = report.best_epoch;
    let ckpt = ModelCheckpoint::new(
        model,
        tags.to_vec(),
        Provenance {
            source_dataset_id: dataset_id.to_string(),
            epochs_trained,
            content_hash: String::new(),
            experiment_id: None,
            parent: None,
        },
    );
    Ok((ckpt, report))
}

/// Everything a fine-tuning run needs besides the data.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TransferPlan {
    /// Path of the source checkpoint.
    pub source: String,
    pub target_dataset_id: String,
    pub target_tags: Vec<String>,
    pub policy: FineTunePolicy,
    #[serde(default)]
    pub overrides: TrainOverrides,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainOverrides {
    #[serde(default)]
    pub batch_size: Option<usize>,
    #[serde(default)]
    pub max_epochs: Option<usize>,
    #[serde(default)]
    pub seed: Option<u64>,
    #[serde(default)]
    pub patience: Option<usize>,
    #[serde(default)]
    pub lr_policy: Option<LrPolicy>,
}

impl TrainOverrides {
    pub fn apply(&self, cfg: &mut TrainConfig) {
        if let Some(v) = self.batch_size {
            cfg.batch_size = v;
        }
        if let Some(v) = self.max_epochs {
            cfg.max_epochs = v;
        }
        if let Some(v) = self.seed {
            cfg.seed = v;
        }
        if let Some(v) = self.patience {
            cfg.patience = Some(v);
        }
        if let Some(v) = self.lr_policy {
            cfg.lr_policy = v;
        }
    }
}

/// Initialises a target model from `source` (fresh output layer seeded by
/// `cfg.seed`) and trains it under `policy`. `cfg.model` is ignored: the
/// target shares the source configuration apart from its output width.
pub fn finetune(
    source: &ModelCheckpoint,
    target_dataset_id: &str,
    tags: &[String],
    policy: FineTunePolicy,
    cfg: &TrainConfig,
    train_set: &[Example],
    valid_set: &[Example],
) -> Result<(ModelCheckpoint, TrainReport), TrainError> {
    let mut target_cfg = source.model.config.clone();
    target_cfg.n_tags = tags.len();
    let model = initialize_from_source(&source.model, &target_cfg, policy, cfg.seed)?;
    let mut run_cfg = cfg.clone();
    run_cfg.model = target_cfg;
    run_cfg.fit_input_norm = false;
    let (model, report) = fit(model, tags, train_set, valid_set, &run_cfg, target_dataset_id)?;
    if policy == FineTunePolicy::OutputOnly {
        let changed = backbone_diff(&source.model, &model);
        if !changed.is_empty() {
            return Err(TrainError::FreezeViolation(changed));
        }
    }
    let ckpt = ModelCheckpoint::new(
        model,
        tags.to_vec(),
        Provenance {
            source_dataset_id: target_dataset_id.to_string(),
            epochs_trained: source.provenance.epochs_trained + report.best_epoch,
            content_hash: String::new(),
            experiment_id: None,
            parent: Some(source.provenance.content_hash.clone()),
        },
    );
    Ok((ckpt, report))
}
