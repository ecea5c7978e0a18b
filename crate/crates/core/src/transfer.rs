//! Parameter-sharing transfer: every parameter except the output layer is
//! copied from a source model, then fine-tuned under a freeze policy.

use alloc::string::String;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::models::{is_output_param, Arch, Model, ModelConfig, ModelError};
use crate::real::Real;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FineTunePolicy {
    /// Only the output layer trains; the backbone, including batch-norm
    /// statistics, stays bitwise fixed.
    OutputOnly,
    All,
}

impl FineTunePolicy {
    pub const ALL: [FineTunePolicy; 2] = [FineTunePolicy::OutputOnly, FineTunePolicy::All];

    pub fn name(self) -> &'static str {
        match self {
            FineTunePolicy::OutputOnly => "output",
            FineTunePolicy::All => "all",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s.trim().to_ascii_lowercase().replace(['-', '_'], "").as_str() {
            "output" | "outputonly" => Some(FineTunePolicy::OutputOnly),
            "all" => Some(FineTunePolicy::All),
            _ => None,
        }
    }
}

impl core::fmt::Display for FineTunePolicy {
    fn fmt(&self, f: &mut core::fmt::Formatter<'_>) -> core::fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum TransferError {
    #[error("source is {source_arch}, target is {target_arch}")]
    ArchMismatch { source_arch: Arch, target_arch: Arch },
    #[error("width_scale differs: source {source_scale}, target {target_scale}")]
    WidthMismatch { source_scale: f64, target_scale: f64 },
    #[error("layer `{name}` has shape {source_shape:?} in the source and {target_shape:?} in the target")]
    ShapeMismatch {
        name: String,
        source_shape: Vec<usize>,
        target_shape: Vec<usize>,
    },
    #[error("layer `{0}` is missing from the source")]
    MissingLayer(String),
    #[error(transparent)]
    Model(#[from] ModelError),
}

/// One completed cell of a transfer grid. Scores are fractions in `[0, 1]`.
/// Single-domain runs have `source == target` and policy `All`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegistryRecord {
    pub model: Arch,
    pub source: String,
    pub target: String,
    pub policy: FineTunePolicy,
    #[serde(default)]
    pub seed: u64,
    pub roc_auc: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pr_auc: Option<f64>,
}

/// Scale applied to the fresh output layer's weights. Its logits start near
/// zero, so early updates reflect the copied features rather than the draw.
pub const HEAD_INIT_GAIN: f64 = 0.01;

/// Builds a `target_cfg` model whose backbone is a bitwise copy of
/// `source`'s and whose output layer is freshly initialised from `seed` and
/// scaled by [`HEAD_INIT_GAIN`], then applies `policy`.
pub fn initialize_from_source<T: Real>(
    source: &Model<T>,
    target_cfg: &ModelConfig,
    policy: FineTunePolicy,
    seed: u64,
) -> Result<Model<T>, TransferError> {
    let (sa, ta) = (source.config.kind(), target_cfg.kind());
    if sa != ta {
        return Err(TransferError::ArchMismatch {
            source_arch: sa,
            target_arch: ta,
        });
    }
    if source.config.width_scale != target_cfg.width_scale {
        return Err(TransferError::WidthMismatch {
            source_scale: source.config.width_scale,
            target_scale: target_cfg.width_scale,
        });
    }
    let mut target = Model::<T>::build(target_cfg, seed)?;
    let ids: Vec<_> = target.params.iter().map(|(id, p)| (id, p.name.clone())).collect();
    for (id, name) in ids {
        if is_output_param(&name) {
            let w = target.params.get_mut(id).tensor.data_mut();
            w.iter_mut().for_each(|v| *v *= T::from_f64(HEAD_INIT_GAIN));
            continue;
        }
        let sid = source
            .params
            .find(&name)
            .ok_or_else(|| TransferError::MissingLayer(name.clone()))?;
        let src = source.params.tensor(sid);
        let dst = &mut target.params.get_mut(id).tensor;
        if src.shape() != dst.shape() {
            return Err(TransferError::ShapeMismatch {
                name,
                source_shape: src.shape().to_vec(),
                target_shape: dst.shape().to_vec(),
            });
        }
        dst.data_mut().copy_from_slice(src.data());
    }
    apply_policy(&mut target, policy);
    Ok(target)
}

pub fn apply_policy<T: Real>(model: &mut Model<T>, policy: FineTunePolicy) {
    match policy {
        FineTunePolicy::OutputOnly => model.freeze_backbone(),
        FineTunePolicy::All => model.params.unfreeze_all(),
    }
}

/// Names of non-output parameters (trainable or buffer) whose bits differ
/// between two models of the same topology.
pub fn backbone_diff<T: Real>(a: &Model<T>, b: &Model<T>) -> Vec<String> {
    let mut out = Vec::new();
    for (id, p) in a.params.iter() {
        if is_output_param(&p.name) {
            continue;
        }
        let same = b.params.find(&p.name).is_some_and(|bid| {
            let (x, y) = (p.tensor.data(), b.params.tensor(bid).data());
            x.len() == y.len()
                && x.iter()
                    .zip(y)
                    .all(|(u, v)| u.to_f64().to_bits() == v.to_f64().to_bits())
        });
        if !same {
            out.push(a.params.get(id).name.clone());
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::tiny_config;
    use crate::nn::ParamKind;

    #[test]
    fn backbone_copied_head_fresh() {
        for arch in Arch::ALL {
            let source = Model::<f64>::build(&tiny_config(arch, 5), 1).unwrap();
            let target_cfg = tiny_config(arch, 3);
            let t = initialize_from_source(&source, &target_cfg, FineTunePolicy::OutputOnly, 2).unwrap();
            assert!(backbone_diff(&source, &t).is_empty(), "{arch}");
            let head = t.params.find("head.weight").unwrap();
            assert_eq!(t.params.tensor(head).shape()[0], 3);
            for (id, p) in t.params.iter() {
                if p.kind == ParamKind::Trainable {
                    assert_eq!(t.params.is_frozen(id), !is_output_param(&p.name));
                }
            }
            // Same vocabulary still gets a fresh head.
            let same = initialize_from_source(&source, &source.config, FineTunePolicy::All, 2).unwrap();
            let sh = source.params.find("head.weight").unwrap();
            assert_ne!(same.params.tensor(sh).data(), source.params.tensor(sh).data());
            assert!(same.params.iter().all(|(id, _)| !same.params.is_frozen(id)));
        }
    }

    #[test]
    fn mismatches_are_errors() {
        let source = Model::<f64>::build(&tiny_config(Arch::VggIsh, 3), 1).unwrap();
        let mut wider = tiny_config(Arch::VggIsh, 3);
        wider.width_scale = 0.5;
        assert!(matches!(
            initialize_from_source(&source, &wider, FineTunePolicy::All, 0),
            Err(TransferError::WidthMismatch { .. })
        ));
        assert!(matches!(
            initialize_from_source(&source, &tiny_config(Arch::Ast, 3), FineTunePolicy::All, 0),
            Err(TransferError::ArchMismatch { .. })
        ));
        let mut deeper = tiny_config(Arch::VggIsh, 3);
        if let crate::models::ArchConfig::VggIsh(v) = &mut deeper.arch {
            v.channels[1] = 5;
        }
        match initialize_from_source(&source, &deeper, FineTunePolicy::All, 0) {
            Err(TransferError::ShapeMismatch { name, .. }) => assert_eq!(name, "conv1.weight"),
            other => panic!("expected shape mismatch, got {:?}", other.err()),
        }
    }
}
