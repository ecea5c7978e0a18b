//! Named parameter storage, initialisers and the layer building blocks
//! shared by the three architectures.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::autodiff::{BatchNormMode, Conv2dSpec, Graph, StatUpdate, Var};
use crate::real::Real;
use crate::tensor::{Tensor, TensorError};

/// Running-statistics momentum for batch norm.
pub const BN_MOMENTUM: f64 = 0.1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub usize);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParamKind {
    Trainable,
    /// Non-learned state such as batch-norm running statistics.
    Buffer,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Param<T> {
    pub name: String,
    pub kind: ParamKind,
    pub tensor: Tensor<T>,
    pub frozen: bool,
}

/// Ordered collection of named tensors. Order is creation order and defines
/// the checkpoint layout.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ParamStore<T> {
    entries: Vec<Param<T>>,
}

impl<T: Real> ParamStore<T> {
    pub fn new() -> Self {
        Self { entries: Vec::new() }
    }

    pub fn add(&mut self, name: impl Into<String>, kind: ParamKind, tensor: Tensor<T>) -> ParamId {
        let name = name.into();
        debug_assert!(self.find(&name).is_none(), "duplicate parameter {name}");
        self.entries.push(Param {
            name,
            kind,
            tensor,
            frozen: false,
        });
        ParamId(self.entries.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Param<T> {
        &self.entries[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Param<T> {
        &mut self.entries[id.0]
    }

    pub fn tensor(&self, id: ParamId) -> &Tensor<T> {
        &self.entries[id.0].tensor
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.entries.iter().position(|p| p.name == name).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Param<T>)> {
        self.entries.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    /// `(name, shape)` for every entry, in order.
    pub fn manifest(&self) -> Vec<(String, Vec<usize>)> {
        self.entries
            .iter()
            .map(|p| (p.name.clone(), p.tensor.shape().to_vec()))
            .collect()
    }

    /// Number of scalar trainable parameters.
    pub fn trainable_count(&self) -> usize {
        self.entries
            .iter()
            .filter(|p| p.kind == ParamKind::Trainable)
            .map(|p| p.tensor.numel())
            .sum()
    }

    /// Freezes every trainable parameter whose name does not satisfy `keep`.
    pub fn freeze_except(&mut self, keep: impl Fn(&str) -> bool) {
        for p in &mut self.entries {
            p.frozen = !keep(&p.name);
        }
    }

    pub fn unfreeze_all(&mut self) {
        self.entries.iter_mut().for_each(|p| p.frozen = false);
    }

    pub fn is_frozen(&self, id: ParamId) -> bool {
        self.entries[id.0].frozen
    }

    /// Exponential running-average update of batch-norm buffers. A stat
    /// update's key is the id of the running-mean buffer, which is always
    /// immediately followed by the running variance.
    pub fn apply_stat_updates(&mut self, updates: &[StatUpdate]) {
        let m = BN_MOMENTUM;
        for u in updates {
            let blend = |buf: &mut Tensor<T>, fresh: &[f64]| {
                for (r, &b) in buf.data_mut().iter_mut().zip(fresh) {
                    *r = T::from_f64((1.0 - m) * r.to_f64() + m * b);
                }
            };
            blend(&mut self.entries[u.key].tensor, &u.mean);
            blend(&mut self.entries[u.key + 1].tensor, &u.var);
        }
    }

    pub fn cast<U: Real>(&self) -> ParamStore<U> {
        ParamStore {
            entries: self
                .entries
                .iter()
                .map(|p| Param {
                    name: p.name.clone(),
                    kind: p.kind,
                    tensor: p.tensor.cast(),
                    frozen: p.frozen,
                })
                .collect(),
        }
    }
}

/// Gradients for a [`ParamStore`], indexed by [`ParamId`].
#[derive(Debug, Clone, Default)]
pub struct ParamGrads<T> {
    grads: Vec<Option<Vec<T>>>,
}

impl<T: Real> ParamGrads<T> {
    pub fn from_vec(grads: Vec<Option<Vec<T>>>) -> Self {
        Self { grads }
    }

    pub fn get(&self, id: ParamId) -> Option<&[T]> {
        self.grads.get(id.0).and_then(|g| g.as_deref())
    }
}

/// One forward pass: owns the graph and binds parameters on first use.
pub struct Forward<'s, T: Real> {
    pub graph: Graph<T>,
    store: &'s ParamStore<T>,
    bound: Vec<Option<Var>>,
    train: bool,
    dropout_seed: u64,
    dropout_calls: u64,
}

impl<'s, T: Real> Forward<'s, T> {
    /// `train` enables dropout and batch statistics; `dropout_seed` must
    /// change per step for fresh masks.
    pub fn new(store: &'s ParamStore<T>, train: bool, dropout_seed: u64) -> Self {
        Self {
            graph: Graph::new(),
            store,
            bound: vec![None; store.len()],
            train,
            dropout_seed,
            dropout_calls: 0,
        }
    }

    pub fn is_train(&self) -> bool {
        self.train
    }

    pub fn store(&self) -> &'s ParamStore<T> {
        self.store
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.bound[id.0] {
            return v;
        }
        let p = self.store.get(id);
        let track = p.kind == ParamKind::Trainable && !p.frozen;
        let v = self.graph.leaf(p.tensor.clone(), track);
        self.bound[id.0] = Some(v);
        v
    }

    pub fn input(&mut self, t: Tensor<T>) -> Var {
        self.graph.input(t)
    }

    pub fn dropout(&mut self, x: Var, p: f64) -> Result<Var, TensorError> {
        if !self.train || p == 0.0 {
            return Ok(x);
        }
        self.dropout_calls += 1;
        let seed = self
            .dropout_seed
            .wrapping_mul(0x9E37_79B9_7F4A_7C15)
            .wrapping_add(self.dropout_calls);
        self.graph.dropout(x, p, seed)
    }

    /// Backpropagates `loss` and returns parameter gradients plus the batch
    /// statistics recorded by training-mode batch norms.
    pub fn backward(mut self, loss: Var) -> Result<(ParamGrads<T>, Vec<StatUpdate>), TensorError> {
        let mut grads = self.graph.backward(loss)?;
        let out = self.bound.iter().map(|v| v.and_then(|v| grads.take(v))).collect();
        Ok((ParamGrads { grads: out }, self.graph.take_stat_updates()))
    }

    pub fn take_stat_updates(&mut self) -> Vec<StatUpdate> {
        self.graph.take_stat_updates()
    }
}

/// Deterministic initialiser stream.
pub struct Init {
    rng: ChaCha8Rng,
}

impl Init {
    pub fn new(seed: u64) -> Self {
        Self {
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    fn uniform<T: Real>(&mut self, shape: &[usize], bound: f64) -> Tensor<T> {
        Tensor::from_fn(shape, |_| T::from_f64(self.rng.random_range(-bound..bound)))
    }

    /// He-uniform for relu layers: `U(±√(6 / fan_in))`.
    pub fn he_uniform<T: Real>(&mut self, shape: &[usize], fan_in: usize) -> Tensor<T> {
        self.uniform(shape, libm::sqrt(6.0 / fan_in as f64))
    }

    /// Xavier/Glorot uniform: `U(±√(6 / (fan_in + fan_out)))`.
    pub fn xavier_uniform<T: Real>(&mut self, shape: &[usize], fan_in: usize, fan_out: usize) -> Tensor<T> {
        self.uniform(shape, libm::sqrt(6.0 / (fan_in + fan_out) as f64))
    }

    pub fn scheme<T: Real>(&mut self, scheme: WeightInit, shape: &[usize], fan_in: usize, fan_out: usize) -> Tensor<T> {
        match scheme {
            WeightInit::He => self.he_uniform(shape, fan_in),
            WeightInit::Xavier => self.xavier_uniform(shape, fan_in, fan_out),
        }
    }

    pub fn normal<T: Real>(&mut self, shape: &[usize], std: f64) -> Tensor<T> {
        let dist = Normal::new(0.0, std).expect("positive std");
        Tensor::from_fn(shape, |_| T::from_f64(dist.sample(&mut self.rng)))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WeightInit {
    He,
    Xavier,
}

#[derive(Debug, Clone, Copy)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
}

impl Linear {
    pub fn new<T: Real>(
        store: &mut ParamStore<T>,
        init: &mut Init,
        name: &str,
        inp: usize,
        out: usize,
        scheme: WeightInit,
    ) -> Self {
        let w = init.scheme(scheme, &[out, inp], inp, out);
        Self {
            weight: store.add(format!("{name}.weight"), ParamKind::Trainable, w),
            bias: store.add(format!("{name}.bias"), ParamKind::Trainable, Tensor::zeros(&[out])),
        }
    }

    pub fn forward<T: Real>(&self, f: &mut Forward<'_, T>, x: Var) -> Result<Var, TensorError> {
        let (w, b) = (f.param(self.weight), f.param(self.bias));
        f.graph.linear(x, w, Some(b))
    }
}

#[derive(Debug, Clone, Copy)]
pub struct Conv2d {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub spec: Conv2dSpec,
}

impl Conv2d {
    /// He-uniform `[out, inp, kh, kw]`; bias is omitted when batch norm follows.
    #[allow(clippy::too_many_arguments)]
    pub fn new<T: Real>(
        store: &mut ParamStore<T>,
        init: &mut Init,
        name: &str,
        inp: usize,
        out: usize,
        kernel: (usize, usize),
        spec: Conv2dSpec,
        bias: bool,
        scheme: WeightInit,
    ) -> Self {
        let shape = [out, inp, kernel.0, kernel.1];
        let fan_in = inp * kernel.0 * kernel.1;
        let w = init.scheme(scheme, &shape, fan_in, out * kernel.0 * kernel.1);
        let weight = store.add(format!("{name}.weight"), ParamKind::Trainable, w);
        let bias = bias.then(|| store.add(format!("{name}.bias"), ParamKind::Trainable, Tensor::zeros(&[out])));
        Self { weight, bias, spec }
    }

    pub fn forward<T: Real>(&self, f: &mut Forward<'_, T>, x: Var) -> Result<Var, TensorError> {
        let w = f.param(self.weight);
        let b = self.bias.map(|b| f.param(b));
        f.graph.conv2d(x, w, b, self.spec)
    }
}

#[derive(Debug, Clone, Copy)]
pub struct BatchNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub running_mean: ParamId,
    pub running_var: ParamId,
}

impl BatchNorm {
    pub fn new<T: Real>(store: &mut ParamStore<T>, name: &str, channels: usize) -> Self {
        let gamma = store.add(
            format!("{name}.gamma"),
            ParamKind::Trainable,
            Tensor::full(&[channels], T::ONE),
        );
        let beta = store.add(format!("{name}.beta"), ParamKind::Trainable, Tensor::zeros(&[channels]));
        let running_mean = store.add(
            format!("{name}.running_mean"),
            ParamKind::Buffer,
            Tensor::zeros(&[channels]),
        );
        let running_var = store.add(
            format!("{name}.running_var"),
            ParamKind::Buffer,
            Tensor::full(&[channels], T::ONE),
        );
        debug_assert_eq!(running_var.0, running_mean.0 + 1);
        Self {
            gamma,
            beta,
            running_mean,
            running_var,
        }
    }

    /// Batch statistics in training mode unless the layer is frozen, in which
    /// case the running buffers are used and left untouched.
    pub fn forward<T: Real>(&self, f: &mut Forward<'_, T>, x: Var) -> Result<Var, TensorError> {
        let (g, b) = (f.param(self.gamma), f.param(self.beta));
        let store = f.store();
        let mode = if f.is_train() && !store.is_frozen(self.gamma) {
            BatchNormMode::Train {
                key: self.running_mean.0,
            }
        } else {
            BatchNormMode::Eval {
                running_mean: store.tensor(self.running_mean).data(),
                running_var: store.tensor(self.running_var).data(),
            }
        };
        f.graph.batch_norm(x, g, b, mode)
    }
}

#[derive(Debug, Clone, Copy)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl LayerNorm {
    pub fn new<T: Real>(store: &mut ParamStore<T>, name: &str, dim: usize) -> Self {
        Self {
            gamma: store.add(
                format!("{name}.gamma"),
                ParamKind::Trainable,
                Tensor::full(&[dim], T::ONE),
            ),
            beta: store.add(format!("{name}.beta"), ParamKind::Trainable, Tensor::zeros(&[dim])),
        }
    }

    pub fn forward<T: Real>(&self, f: &mut Forward<'_, T>, x: Var) -> Result<Var, TensorError> {
        let (g, b) = (f.param(self.gamma), f.param(self.beta));
        f.graph.layer_norm(x, g, b)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn stat_updates_blend_with_momentum() {
        let mut store = ParamStore::<f32>::new();
        let bn = BatchNorm::new(&mut store, "bn", 2);
        store.apply_stat_updates(&[StatUpdate {
            key: bn.running_mean.0,
            mean: vec![1.0, 2.0],
            var: vec![3.0, 5.0],
        }]);
        assert_eq!(store.tensor(bn.running_mean).data(), &[0.1, 0.2]);
        assert_eq!(store.tensor(bn.running_var).data(), &[0.9 + 0.3, 0.9 + 0.5]);
    }

    #[test]
    fn frozen_params_do_not_track() {
        let mut store = ParamStore::<f64>::new();
        let mut init = Init::new(1);
        let lin = Linear::new(&mut store, &mut init, "head", 3, 2, WeightInit::Xavier);
        store.freeze_except(|n| n.ends_with("bias"));
        let mut f = Forward::new(&store, true, 0);
        let x = f.input(Tensor::full(&[1, 3], 1.0));
        let y = lin.forward(&mut f, x).unwrap();
        let loss = f.graph.sum(y).unwrap();
        let (grads, _) = f.backward(loss).unwrap();
        assert!(grads.get(lin.weight).is_none());
        assert_eq!(grads.get(lin.bias).unwrap(), &[1.0, 1.0]);
    }
}
