//! Loading labelled spectrograms and scoring them with a model.

use std::fs;
use std::path::Path;

use mtag_core::datasets::{encode_targets, DatasetConfig, DatasetManifest, Split, TagVocabulary};
use mtag_core::dsp::{chunk, ChunkMode, MelSpectrogram};
use mtag_core::metrics::{evaluate_scores, mean_sigmoid, EvalError, EvalReport};
use mtag_core::models::{Model, ModelError};
use mtag_core::tensor::Tensor;

use crate::cache::{truncate_mel, write_atomic, CacheError, MelCache};

/// A recording's spectrogram with its multi-hot targets.
#[derive(Debug, Clone)]
pub struct Example {
    pub recording_id: String,
    pub mel: MelSpectrogram,
    pub targets: Vec<bool>,
}

#[derive(Debug, thiserror::Error)]
#[error(
    "checkpoint vocabulary ({model_tags} tags) does not match the dataset vocabulary ({dataset_tags} tags){detail}"
)]
pub struct VocabError {
    pub model_tags: usize,
    pub dataset_tags: usize,
    pub detail: String,
}

pub fn check_vocabulary(model_tags: &[String], vocab: &TagVocabulary) -> Result<(), VocabError> {
    if model_tags == vocab.tags.as_slice() {
        return Ok(());
    }
    let detail = model_tags
        .iter()
        .zip(&vocab.tags)
        .position(|(a, b)| a != b)
        .map(|i| {
            format!(
                "; first difference at position {i}: `{}` vs `{}`",
                model_tags[i], vocab.tags[i]
            )
        })
        .unwrap_or_default();
    Err(VocabError {
        model_tags: model_tags.len(),
        dataset_tags: vocab.len(),
        detail,
    })
}

/// Spectrograms and targets for one split, computing missing cache entries.
/// Audio beyond the dataset's duration cap is dropped.
pub fn load_split(
    manifest: &DatasetManifest,
    split: Split,
    vocab: &TagVocabulary,
    data_cfg: &DatasetConfig,
    cache: &MelCache,
    base_dir: &Path,
) -> Result<Vec<Example>, CacheError> {
    manifest
        .split(split)
        .map(|e| {
            let (mut mel, _) = cache.get_or_compute(&manifest.dataset_id, e, base_dir)?;
            if let Some(cap) = data_cfg.max_duration_sec {
                truncate_mel(&mut mel, cap, cache.dsp());
            }
            Ok(Example {
                recording_id: e.recording_id.clone(),
                mel,
                targets: encode_targets(e, vocab),
            })
        })
        .collect()
}

/// Song-level sigmoid scores. Sequential chunks from all songs are batched
/// together; each song's chunk scores are averaged.
pub fn score_examples(
    model: &Model<f32>,
    examples: &[Example],
    pad: f32,
    batch: usize,
) -> Result<Vec<Vec<f64>>, ModelError> {
    let cfg = &model.config;
    let mut owners = Vec::new();
    let mut chunks = Vec::new();
    for (i, ex) in examples.iter().enumerate() {
        for c in chunk(&cfg.chunk, &ex.mel, ChunkMode::EvalSequential, pad) {
            owners.push(i);
            chunks.push(c);
        }
    }
    let mut per_song: Vec<Vec<Vec<f64>>> = vec![Vec::new(); examples.len()];
    let batch = batch.max(1);
    for (k, group) in chunks.chunks(batch).enumerate() {
        let data: Vec<f32> = group.concat();
        let x = Tensor::new(cfg.input_shape(group.len()).to_vec(), data)?;
        let y = model.logits(&x)?;
        for (j, row) in y.data().chunks(cfg.n_tags).enumerate() {
            per_song[owners[k * batch + j]].push(row.iter().map(|&v| v as f64).collect());
        }
    }
    Ok(per_song.iter().map(|c| mean_sigmoid(c)).collect())
}

pub fn evaluate_examples(
    model: &Model<f32>,
    tags: &[String],
    examples: &[Example],
    pad: f32,
    batch: usize,
) -> Result<EvalReport, EvalError> {
    if examples.is_empty() {
        return Err(EvalError::Empty);
    }
    let scores = score_examples(model, examples, pad, batch)?;
    let labels: Vec<Vec<bool>> = examples.iter().map(|e| e.targets.clone()).collect();
    evaluate_scores(tags, &scores, &labels)
}

pub fn write_report_json(path: &Path, report: &impl serde::Serialize) -> std::io::Result<()> {
    let mut bytes = serde_json::to_vec_pretty(report).expect("report serializes");
    bytes.push(b'\n');
    write_atomic(path, &bytes)
}

/// One row per scored tag: `tag,roc_auc,pr_auc,positives`.
pub fn write_per_tag_csv(path: &Path, report: &EvalReport) -> Result<(), csv::Error> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["tag", "roc_auc", "pr_auc", "positives"])?;
    for t in &report.tags {
        w.write_record([
            t.tag.clone(),
            t.roc_auc.to_string(),
            t.pr_auc.to_string(),
            t.positives.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}
