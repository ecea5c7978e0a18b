//! Ranking metrics over per-song tag scores, and song-level aggregation of
//! chunk predictions.

use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;
use core::cmp::Ordering;

use serde::{Deserialize, Serialize};

use crate::dsp::{chunk, ChunkMode, MelSpectrogram};
use crate::models::{Model, ModelError};
use crate::real::Real;
use crate::tensor::Tensor;

/// Why a tag has no metric on an evaluation set.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, thiserror::Error)]
#[serde(rename_all = "snake_case")]
pub enum TagSkipped {
    #[error("no positive examples")]
    NoPositives,
    #[error("no negative examples")]
    NoNegatives,
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum EvalError {
    #[error("nothing to evaluate: empty split")]
    Empty,
    #[error("song {song} has {got} scores/labels, expected {expected}")]
    Ragged { song: usize, expected: usize, got: usize },
    #[error("every tag was skipped")]
    NoScorableTags,
    #[error(transparent)]
    Model(#[from] ModelError),
}

fn count_classes(labels: &[bool]) -> (usize, usize) {
    let pos = labels.iter().filter(|&&l| l).count();
    (pos, labels.len() - pos)
}

fn descending(scores: &[f64]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[b].partial_cmp(&scores[a]).unwrap_or(Ordering::Equal));
    idx
}

/// Mann–Whitney statistic `P(s⁺ > s⁻) + ½·P(s⁺ = s⁻)` via average ranks.
pub fn roc_auc(scores: &[f64], labels: &[bool]) -> Result<f64, TagSkipped> {
    assert_eq!(scores.len(), labels.len());
    let (pos, neg) = count_classes(labels);
    if pos == 0 {
        return Err(TagSkipped::NoPositives);
    }
    if neg == 0 {
        return Err(TagSkipped::NoNegatives);
    }
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[a].partial_cmp(&scores[b]).unwrap_or(Ordering::Equal));
    // Ranks are 1-based; each tie group gets its mean rank, kept doubled to
    // stay integral.
    let mut pos_rank_sum2: u128 = 0;
    let mut i = 0;
    while i < idx.len() {
        let mut j = i + 1;
        while j < idx.len() && scores[idx[j]] == scores[idx[i]] {
            j += 1;
        }
        let doubled_rank = (i + 1 + j) as u128;
        let group_pos = idx[i..j].iter().filter(|&&k| labels[k]).count() as u128;
        pos_rank_sum2 += doubled_rank * group_pos;
        i = j;
    }
    let (p, n) = (pos as u128, neg as u128);
    let u2 = pos_rank_sum2 - p * (p + 1);
    Ok(u2 as f64 / (2 * p * n) as f64)
}

/// Average precision `Σ (R_k − R_{k−1})·P_k` over descending thresholds,
/// with tied scores forming a single threshold.
pub fn pr_auc(scores: &[f64], labels: &[bool]) -> Result<f64, TagSkipped> {
    assert_eq!(scores.len(), labels.len());
    let (pos, _) = count_classes(labels);
    if pos == 0 {
        return Err(TagSkipped::NoPositives);
    }
    let idx = descending(scores);
    let (mut tp, mut seen) = (0usize, 0usize);
    let mut prev_tp = 0usize;
    let mut ap = 0.0;
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j < idx.len() && scores[idx[j]] == scores[idx[i]] {
            tp += labels[idx[j]] as usize;
            j += 1;
        }
        seen += j - i;
        if tp > prev_tp {
            ap += (tp - prev_tp) as f64 / pos as f64 * (tp as f64 / seen as f64);
        }
        prev_tp = tp;
        i = j;
    }
    Ok(ap)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TagMetrics {
    pub tag: String,
    pub roc_auc: f64,
    pub pr_auc: f64,
    pub positives: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SkippedTag {
    pub tag: String,
    pub reason: TagSkipped,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub tags: Vec<TagMetrics>,
    pub macro_roc_auc: f64,
    pub macro_pr_auc: f64,
    pub n_songs: usize,
    pub skipped: Vec<SkippedTag>,
}

/// Per-tag and macro-averaged metrics; `scores[s][t]` and `labels[s][t]`
/// index song `s`, tag `t`. Single-class tags are listed as skipped.
pub fn evaluate_scores(
    tag_names: &[String],
    scores: &[Vec<f64>],
    labels: &[Vec<bool>],
) -> Result<EvalReport, EvalError> {
    if scores.is_empty() {
        return Err(EvalError::Empty);
    }
    let n_tags = tag_names.len();
    for (song, (s, l)) in scores.iter().zip(labels).enumerate() {
        for got in [s.len(), l.len()] {
            if got != n_tags {
                return Err(EvalError::Ragged {
                    song,
                    expected: n_tags,
                    got,
                });
            }
        }
    }
    if labels.len() != scores.len() {
        return Err(EvalError::Ragged {
            song: labels.len().min(scores.len()),
            expected: scores.len(),
            got: labels.len(),
        });
    }
    let mut tags = Vec::new();
    let mut skipped = Vec::new();
    for (t, name) in tag_names.iter().enumerate() {
        let s: Vec<f64> = scores.iter().map(|r| r[t]).collect();
        let l: Vec<bool> = labels.iter().map(|r| r[t]).collect();
        match (roc_auc(&s, &l), pr_auc(&s, &l)) {
            (Ok(roc), Ok(pr)) => tags.push(TagMetrics {
                tag: name.clone(),
                roc_auc: roc,
                pr_auc: pr,
                positives: count_classes(&l).0,
            }),
            (Err(reason), _) | (_, Err(reason)) => skipped.push(SkippedTag {
                tag: name.clone(),
                reason,
            }),
        }
    }
    if tags.is_empty() {
        return Err(EvalError::NoScorableTags);
    }
    let n = tags.len() as f64;
    Ok(EvalReport {
        macro_roc_auc: tags.iter().map(|t| t.roc_auc).sum::<f64>() / n,
        macro_pr_auc: tags.iter().map(|t| t.pr_auc).sum::<f64>() / n,
        n_songs: scores.len(),
        tags,
        skipped,
    })
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + libm::exp(-x))
    } else {
        let e = libm::exp(x);
        e / (1.0 + e)
    }
}

/// Mean over chunks of the per-chunk sigmoid scores.
pub fn mean_sigmoid(chunk_logits: &[Vec<f64>]) -> Vec<f64> {
    let n_tags = chunk_logits.first().map_or(0, Vec::len);
    let mut out = vec![0.0; n_tags];
    for row in chunk_logits {
        for (o, &l) in out.iter_mut().zip(row) {
            *o += sigmoid(l);
        }
    }
    let k = chunk_logits.len().max(1) as f64;
    out.iter_mut().for_each(|v| *v /= k);
    out
}

/// Song-level tag scores: the recording is cut into sequential chunks
/// (padded only when shorter than one chunk), each chunk is scored in
/// inference mode, and the sigmoid scores are averaged.
pub fn song_scores<T: Real>(
    model: &Model<T>,
    mel: &MelSpectrogram,
    pad: f32,
    batch: usize,
) -> Result<Vec<f64>, EvalError> {
    let chunks = chunk(&model.config.chunk, mel, ChunkMode::EvalSequential, pad);
    let per_chunk = model.config.n_mels * model.config.chunk.n_frames;
    let mut logits = Vec::with_capacity(chunks.len());
    for group in chunks.chunks(batch.max(1)) {
        let data: Vec<T> = group
            .iter()
            .flat_map(|c| c.iter().map(|&v| T::from_f64(v as f64)))
            .collect();
        debug_assert_eq!(data.len(), group.len() * per_chunk);
        let x = Tensor::new(model.config.input_shape(group.len()).to_vec(), data).map_err(ModelError::from)?;
        let y = model.logits(&x)?;
        logits.extend(
            y.data()
                .chunks(model.config.n_tags)
                .map(|r| r.iter().map(|v| v.to_f64()).collect::<Vec<_>>()),
        );
    }
    Ok(mean_sigmoid(&logits))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn roc_examples() {
        assert_eq!(roc_auc(&[0.9, 0.8, 0.3, 0.1], &[true, true, false, false]), Ok(1.0));
        assert_eq!(roc_auc(&[0.4, 0.4], &[true, false]), Ok(0.5));
        assert_eq!(roc_auc(&[0.1, 0.2], &[true, true]), Err(TagSkipped::NoNegatives));
        assert_eq!(roc_auc(&[0.1, 0.2], &[false, false]), Err(TagSkipped::NoPositives));
    }

    #[test]
    fn pr_examples() {
        assert_eq!(pr_auc(&[0.9, 0.8, 0.3, 0.1], &[true, true, false, false]), Ok(1.0));
        assert_eq!(pr_auc(&[0.5; 5], &[true, false, true, false, false]), Ok(0.4));
        assert_eq!(pr_auc(&[0.5; 2], &[false, false]), Err(TagSkipped::NoPositives));
        // Ranked pos, neg, pos: AP = ½·1 + ½·⅔.
        let ap = pr_auc(&[0.9, 0.5, 0.1], &[true, false, true]).unwrap();
        assert!((ap - (0.5 + 1.0 / 3.0)).abs() < 1e-15);
    }

    #[test]
    fn chunk_averaging() {
        let l = |p: f64| libm::log(p / (1.0 - p));
        let s = mean_sigmoid(&[vec![l(0.2)], vec![l(0.8)]]);
        assert!((s[0] - 0.5).abs() < 1e-12);
        let one = mean_sigmoid(&[vec![0.3, -1.0]]);
        let many = mean_sigmoid(&[vec![0.3, -1.0], vec![0.3, -1.0], vec![0.3, -1.0]]);
        for (a, b) in one.iter().zip(&many) {
            assert!((a - b).abs() < 1e-15);
        }
        assert_eq!(one[0], sigmoid(0.3));
    }

    #[test]
    fn report_skips_single_class_tags() {
        let names: Vec<String> = ["a", "b"].iter().map(|s| String::from(*s)).collect();
        let scores = vec![vec![0.9, 0.1], vec![0.2, 0.3]];
        let labels = vec![vec![true, false], vec![false, false]];
        let r = evaluate_scores(&names, &scores, &labels).unwrap();
        assert_eq!(r.tags.len(), 1);
        assert_eq!(r.macro_roc_auc, 1.0);
        assert_eq!(r.skipped[0].reason, TagSkipped::NoPositives);
        assert_eq!(evaluate_scores(&names, &[], &[]), Err(EvalError::Empty));
    }
}
