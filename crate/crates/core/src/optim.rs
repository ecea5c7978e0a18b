//! Adam and momentum SGD over a [`ParamStore`], plus the epoch-level
//! learning-rate policies.

use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::nn::{ParamGrads, ParamKind, ParamStore};
use crate::real::Real;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum OptimizerError {
    #[error("no gradient for trainable parameter `{0}`")]
    MissingGradient(String),
    #[error("learning rate must be positive and finite, got {0}")]
    InvalidLearningRate(f64),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum OptimizerKind {
    Adam { beta1: f64, beta2: f64, eps: f64 },
    Sgd { momentum: f64 },
}

impl OptimizerKind {
    pub const ADAM: Self = Self::Adam {
        beta1: 0.9,
        beta2: 0.999,
        eps: 1e-8,
    };
}

#[derive(Debug, Clone)]
pub struct OptimizerState<T> {
    kind: OptimizerKind,
    lr: f64,
    step_count: u64,
    /// First moment (Adam) or velocity (SGD).
    m: Vec<Option<Vec<T>>>,
    v: Vec<Option<Vec<T>>>,
}

fn check_lr(lr: f64) -> Result<f64, OptimizerError> {
    if lr > 0.0 && lr.is_finite() {
        Ok(lr)
    } else {
        Err(OptimizerError::InvalidLearningRate(lr))
    }
}

impl<T: Real> OptimizerState<T> {
    pub fn new(kind: OptimizerKind, lr: f64) -> Result<Self, OptimizerError> {
        Ok(Self {
            kind,
            lr: check_lr(lr)?,
            step_count: 0,
            m: Vec::new(),
            v: Vec::new(),
        })
    }

    pub fn kind(&self) -> OptimizerKind {
        self.kind
    }

    pub fn learning_rate(&self) -> f64 {
        self.lr
    }

    pub fn step_count(&self) -> u64 {
        self.step_count
    }

    pub fn set_learning_rate(&mut self, lr: f64) -> Result<(), OptimizerError> {
        self.lr = check_lr(lr)?;
        Ok(())
    }

    /// Switching kind discards moment buffers and restarts the step count.
    pub fn set_kind(&mut self, kind: OptimizerKind) {
        if kind != self.kind {
            self.kind = kind;
            self.step_count = 0;
            self.m.clear();
            self.v.clear();
        }
    }

    /// Updates every unfrozen trainable parameter. Frozen parameters and
    /// buffers are never written.
    pub fn step(&mut self, store: &mut ParamStore<T>, grads: &ParamGrads<T>) -> Result<(), OptimizerError> {
        let targets: Vec<_> = store
            .iter()
            .filter(|(_, p)| p.kind == ParamKind::Trainable && !p.frozen)
            .map(|(id, _)| id)
            .collect();
        for &id in &targets {
            if grads.get(id).is_none() {
                return Err(OptimizerError::MissingGradient(store.get(id).name.clone()));
            }
        }
        if self.m.len() < store.len() {
            self.m.resize(store.len(), None);
            self.v.resize(store.len(), None);
        }
        self.step_count += 1;
        let t = self.step_count as i32;
        let lr = self.lr;
        for id in targets {
            let g = grads.get(id).expect("checked above");
            let p = store.get_mut(id).tensor.data_mut();
            let m = self.m[id.0].get_or_insert_with(|| vec![T::ZERO; p.len()]);
            match self.kind {
                OptimizerKind::Adam { beta1, beta2, eps } => {
                    let v = self.v[id.0].get_or_insert_with(|| vec![T::ZERO; p.len()]);
                    let c1 = 1.0 - libm::pow(beta1, t as f64);
                    let c2 = 1.0 - libm::pow(beta2, t as f64);
                    let (b1, b2) = (T::from_f64(beta1), T::from_f64(beta2));
                    let (ob1, ob2) = (T::from_f64(1.0 - beta1), T::from_f64(1.0 - beta2));
                    let step = T::from_f64(lr / c1);
                    let inv_c2 = T::from_f64(1.0 / c2);
                    let eps = T::from_f64(eps);
                    for i in 0..p.len() {
                        m[i] = b1 * m[i] + ob1 * g[i];
                        v[i] = b2 * v[i] + ob2 * g[i] * g[i];
                        p[i] -= step * m[i] / ((v[i] * inv_c2).sqrt() + eps);
                    }
                }
                OptimizerKind::Sgd { momentum } => {
                    let mu = T::from_f64(momentum);
                    let lr = T::from_f64(lr);
                    for i in 0..p.len() {
                        m[i] = mu * m[i] + g[i];
                        p[i] -= lr * m[i];
                    }
                }
            }
        }
        Ok(())
    }
}

/// Epoch-indexed optimizer schedule (epochs count from 1).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "policy", rename_all = "snake_case")]
pub enum LrPolicy {
    /// Adam for the first half of `max_epochs`, then momentum-0.9 SGD at the
    /// same rate, multiplied by 0.2 from 80% of `max_epochs`.
    MixedAdamSgd {
        base_lr: f64,
        max_epochs: usize,
    },
    /// Adam at `base_lr` through epoch `hold`, then `base_lr·decay^(epoch−hold)`.
    AstAdamDecay {
        base_lr: f64,
        decay: f64,
        hold: usize,
    },
    Constant {
        kind: OptimizerKind,
        lr: f64,
    },
}

impl LrPolicy {
    pub fn mixed_adam_sgd(max_epochs: usize) -> Self {
        Self::MixedAdamSgd {
            base_lr: 1e-4,
            max_epochs,
        }
    }

    pub fn ast_adam_decay() -> Self {
        Self::AstAdamDecay {
            base_lr: 1e-5,
            decay: 0.85,
            hold: 5,
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Self::MixedAdamSgd { .. } => "mixed_adam_sgd",
            Self::AstAdamDecay { .. } => "ast_adam_decay",
            Self::Constant { .. } => "constant",
        }
    }

    pub fn at(&self, epoch: usize) -> (OptimizerKind, f64) {
        let epoch = epoch.max(1);
        match *self {
            Self::MixedAdamSgd { base_lr, max_epochs } => {
                let e = epoch as f64;
                let max = max_epochs as f64;
                if e <= max / 2.0 {
                    (OptimizerKind::ADAM, base_lr)
                } else if e <= 0.8 * max {
                    (OptimizerKind::Sgd { momentum: 0.9 }, base_lr)
                } else {
                    (OptimizerKind::Sgd { momentum: 0.9 }, base_lr * 0.2)
                }
            }
            Self::AstAdamDecay { base_lr, decay, hold } => {
                let lr = if epoch <= hold {
                    base_lr
                } else {
                    base_lr * libm::pow(decay, (epoch - hold) as f64)
                };
                (OptimizerKind::ADAM, lr)
            }
            Self::Constant { kind, lr } => (kind, lr),
        }
    }

    pub fn learning_rate(&self, epoch: usize) -> f64 {
        self.at(epoch).1
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::Graph;
    use crate::nn::{Forward, ParamId};
    use crate::tensor::Tensor;

    fn quadratic_grads(store: &ParamStore<f64>, target: &[f64]) -> ParamGrads<f64> {
        let mut f = Forward::new(store, true, 0);
        let w = f.param(ParamId(0));
        let t = f.input(Tensor::new(vec![target.len()], target.to_vec()).unwrap());
        let neg = f.graph.scale(t, -1.0).unwrap();
        let d = f.graph.add(w, neg).unwrap();
        let sq = f.graph.mul(d, d).unwrap();
        let loss = f.graph.sum(sq).unwrap();
        f.backward(loss).unwrap().0
    }

    fn store_with(v: &[f64]) -> ParamStore<f64> {
        let mut s = ParamStore::new();
        s.add(
            "w",
            ParamKind::Trainable,
            Tensor::new(vec![v.len()], v.to_vec()).unwrap(),
        );
        s
    }

    #[test]
    fn sgd_single_step() {
        let mut s = store_with(&[0.0]);
        let mut g = Graph::<f64>::new();
        let w = g.param(s.tensor(ParamId(0)).clone());
        let loss = g.sum(w).unwrap();
        let mut grads = g.backward(loss).unwrap();
        let pg = ParamGrads::from_vec(vec![grads.take(w)]);
        let mut opt = OptimizerState::new(OptimizerKind::Sgd { momentum: 0.0 }, 0.1).unwrap();
        opt.step(&mut s, &pg).unwrap();
        assert_eq!(s.tensor(ParamId(0)).data(), &[-0.1]);
        assert_eq!(opt.step_count(), 1);
    }

    #[test]
    fn adam_first_step_has_magnitude_lr() {
        let mut s = store_with(&[0.3, -2.0, 5.0]);
        let g = quadratic_grads(&s, &[1.0, 1.0, 1.0]);
        let before = s.tensor(ParamId(0)).data().to_vec();
        let mut opt = OptimizerState::new(OptimizerKind::ADAM, 1e-3).unwrap();
        opt.step(&mut s, &g).unwrap();
        for (a, b) in before.iter().zip(s.tensor(ParamId(0)).data()) {
            assert!(((a - b).abs() - 1e-3).abs() < 1e-8);
        }
    }

    #[test]
    fn sgd_converges_on_quadratic() {
        let target = [0.5, -1.5, 2.0, 0.0];
        let mut s = store_with(&[0.0; 4]);
        let mut opt = OptimizerState::new(OptimizerKind::Sgd { momentum: 0.5 }, 0.1).unwrap();
        for _ in 0..100 {
            let g = quadratic_grads(&s, &target);
            opt.step(&mut s, &g).unwrap();
        }
        let err: f64 = s
            .tensor(ParamId(0))
            .data()
            .iter()
            .zip(&target)
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>();
        let err = libm::sqrt(err);
        assert!(err < 1e-3, "distance {err}");
    }

    #[test]
    fn missing_gradient_is_an_error() {
        let mut s = store_with(&[1.0]);
        let mut opt = OptimizerState::new(OptimizerKind::ADAM, 1e-3).unwrap();
        let err = opt.step(&mut s, &ParamGrads::default()).unwrap_err();
        assert_eq!(err, OptimizerError::MissingGradient("w".into()));
        assert!(OptimizerState::<f32>::new(OptimizerKind::ADAM, 0.0).is_err());
    }

    #[test]
    fn ast_schedule_values() {
        let p = LrPolicy::ast_adam_decay();
        assert_eq!(p.learning_rate(1), 1e-5);
        assert_eq!(p.learning_rate(5), 1e-5);
        assert!((p.learning_rate(6) - 8.5e-6).abs() < 1e-18);
        assert!((p.learning_rate(10) - 1e-5 * libm::pow(0.85, 5.0)).abs() < 1e-18);
        assert!((p.learning_rate(10) - 4.437e-6).abs() < 1e-9);
    }

    #[test]
    fn mixed_schedule_phases() {
        let p = LrPolicy::mixed_adam_sgd(200);
        assert_eq!(p.at(100), (OptimizerKind::ADAM, 1e-4));
        assert_eq!(p.at(101), (OptimizerKind::Sgd { momentum: 0.9 }, 1e-4));
        assert_eq!(p.at(160), (OptimizerKind::Sgd { momentum: 0.9 }, 1e-4));
        assert!((p.at(161).1 - 2e-5).abs() < 1e-18);
    }
}
