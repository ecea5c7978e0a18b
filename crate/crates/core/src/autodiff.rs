//! Tape-based reverse-mode automatic differentiation.
//!
//! A [`Graph`] records every forward op in execution order, which is already
//! a topological order, so [`Graph::backward`] is a single reverse sweep.
//! Each node owns its output value plus whatever context its backward rule
//! needs (pooling argmaxes, normalisation statistics, attention weights,
//! dropout masks). Convolutions re-derive their im2col buffers during the
//! backward sweep instead of keeping them alive.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::kernels::{col2im, gemm_nt, gemm_xn, im2col, ConvGeometry};
use crate::real::Real;
use crate::tensor::{numel, shape_err, Tensor, TensorError};

/// Handle to a node recorded on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PoolKind {
    Max,
    Mean,
}

/// Stride and explicit (top, bottom, left, right) zero padding.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Conv2dSpec {
    pub stride: (usize, usize),
    pub pad: [usize; 4],
}

impl Conv2dSpec {
    pub fn valid() -> Self {
        Self {
            stride: (1, 1),
            pad: [0; 4],
        }
    }

    /// Output keeps the input size at stride 1; even kernels pad one extra
    /// row/column at the end.
    pub fn same(kh: usize, kw: usize) -> Self {
        let (t, l) = ((kh - 1) / 2, (kw - 1) / 2);
        Self {
            stride: (1, 1),
            pad: [t, kh - 1 - t, l, kw - 1 - l],
        }
    }

    pub fn strided(sh: usize, sw: usize) -> Self {
        Self {
            stride: (sh, sw),
            pad: [0; 4],
        }
    }
}

/// How batch normalisation obtains its statistics.
#[derive(Debug, Clone, Copy)]
pub enum BatchNormMode<'a, T> {
    /// Normalise with batch statistics and record a [`StatUpdate`] under `key`.
    Train { key: usize },
    /// Normalise with frozen running statistics.
    Eval {
        running_mean: &'a [T],
        running_var: &'a [T],
    },
}

/// Batch statistics observed by a training-mode batch norm. `var` is the
/// unbiased estimate, ready for a running-average update.
#[derive(Debug, Clone, PartialEq)]
pub struct StatUpdate {
    pub key: usize,
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

pub const NORM_EPS: f64 = 1e-5;

#[derive(Debug)]
enum Op<T> {
    Leaf,
    Add(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    Sum(Var),
    Mean(Var),
    MatMul {
        a: Var,
        b: Var,
        m: usize,
        k: usize,
        n: usize,
    },
    Linear {
        x: Var,
        w: Var,
        b: Option<Var>,
        rows: usize,
        inp: usize,
        out: usize,
    },
    Conv2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        geom: ConvGeometry,
        batch: usize,
        out_ch: usize,
    },
    MaxPool2d {
        x: Var,
        argmax: Vec<u32>,
    },
    PoolAxis {
        x: Var,
        kind: PoolKind,
        outer: usize,
        len: usize,
        inner: usize,
        argmax: Vec<u32>,
    },
    Relu(Var),
    Gelu(Var),
    Sigmoid(Var),
    Softmax {
        x: Var,
        outer: usize,
        len: usize,
        inner: usize,
    },
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<T>,
        rstd: Vec<T>,
        dim: usize,
    },
    BatchNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<T>,
        rstd: Vec<T>,
        batch_stats: bool,
        batch: usize,
        channels: usize,
        inner: usize,
    },
    Dropout {
        x: Var,
        mask: Vec<T>,
    },
    Concat {
        inputs: Vec<Var>,
        sizes: Vec<usize>,
        outer: usize,
        inner: usize,
    },
    Reshape(Var),
    Permute {
        x: Var,
        perm: Vec<usize>,
    },
    AddBroadcast {
        x: Var,
        y: Var,
        repeats: usize,
    },
    Attention {
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        probs: Vec<T>,
        batch: usize,
        seq: usize,
        embed: usize,
    },
    RepeatLeading {
        x: Var,
        n: usize,
    },
    Slice {
        x: Var,
        outer: usize,
        len: usize,
        inner: usize,
        start: usize,
        count: usize,
    },
    BceWithLogits {
        x: Var,
        targets: Vec<T>,
    },
}

struct Node<T> {
    value: Tensor<T>,
    requires_grad: bool,
    op: Op<T>,
}

/// Recording of one forward computation.
pub struct Graph<T: Real> {
    nodes: Vec<Node<T>>,
    stat_updates: Vec<StatUpdate>,
}

impl<T: Real> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradients produced by [`Graph::backward`], indexed by leaf [`Var`].
#[derive(Debug)]
pub struct Gradients<T> {
    grads: Vec<Option<Vec<T>>>,
}

impl<T: Real> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&[T]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    pub fn take(&mut self, v: Var) -> Option<Vec<T>> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}

fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

fn accumulate<T: Real>(slot: &mut Option<Vec<T>>, len: usize) -> &mut Vec<T> {
    slot.get_or_insert_with(|| vec![T::ZERO; len])
}

#[inline]
fn sigmoid<T: Real>(x: T) -> T {
    if x >= T::ZERO {
        T::ONE / (T::ONE + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::ONE + e)
    }
}

const INV_SQRT_2: f64 = core::f64::consts::FRAC_1_SQRT_2;
const INV_SQRT_2PI: f64 = 0.398_942_280_401_432_7;

impl<T: Real> Graph<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            stat_updates: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn take_stat_updates(&mut self) -> Vec<StatUpdate> {
        core::mem::take(&mut self.stat_updates)
    }

    fn push(
        &mut self,
        name: &'static str,
        value: Tensor<T>,
        requires_grad: bool,
        op: Op<T>,
    ) -> Result<Var, TensorError> {
        if cfg!(debug_assertions) && !value.all_finite() {
            return Err(TensorError::NumericFault { op: name });
        }
        self.nodes.push(Node {
            value,
            requires_grad,
            op,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            requires_grad,
            op: Op::Leaf,
        });
        Var(self.nodes.len() - 1)
    }

    /// Constant input (no gradient).
    pub fn input(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    /// Trainable leaf.
    pub fn param(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, true)
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<(), TensorError> {
        if self.shape(a) != self.shape(b) {
            return Err(shape_err(op, format!("{:?} vs {:?}", self.shape(a), self.shape(b))));
        }
        Ok(())
    }

    fn unary(&mut self, name: &'static str, x: Var, f: impl Fn(T) -> T, op: Op<T>) -> Result<Var, TensorError> {
        let xv = self.value(x);
        let data = xv.data().iter().map(|&v| f(v)).collect();
        let out = Tensor::from_parts(xv.shape().to_vec(), data);
        let rg = self.rg(&[x]);
        self.push(name, out, rg, op)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.same_shape("add", a, b)?;
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| x + y)
            .collect();
        let out = Tensor::from_parts(self.shape(a).to_vec(), data);
        let rg = self.rg(&[a, b]);
        self.push("add", out, rg, Op::Add(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.same_shape("mul", a, b)?;
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| x * y)
            .collect();
        let out = Tensor::from_parts(self.shape(a).to_vec(), data);
        let rg = self.rg(&[a, b]);
        self.push("mul", out, rg, Op::Mul(a, b))
    }

    pub fn scale(&mut self, x: Var, c: T) -> Result<Var, TensorError> {
        self.unary("scale", x, |v| v * c, Op::Scale(x, c))
    }

    pub fn sum(&mut self, x: Var) -> Result<Var, TensorError> {
        let s: f64 = self.value(x).data().iter().map(|v| v.to_f64()).sum();
        let rg = self.rg(&[x]);
        self.push("sum", Tensor::scalar(T::from_f64(s)), rg, Op::Sum(x))
    }

    pub fn mean(&mut self, x: Var) -> Result<Var, TensorError> {
        let xv = self.value(x);
        let s: f64 = xv.data().iter().map(|v| v.to_f64()).sum();
        let m = s / xv.numel() as f64;
        let rg = self.rg(&[x]);
        self.push("mean", Tensor::scalar(T::from_f64(m)), rg, Op::Mean(x))
    }

    /// `[m, k] × [k, n] → [m, n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(shape_err("matmul", format!("{sa:?} × {sb:?}")));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut c = vec![T::ZERO; m * n];
        gemm_xn(
            false,
            m,
            n,
            k,
            self.value(a).data(),
            self.value(b).data(),
            &mut c,
            false,
        );
        let rg = self.rg(&[a, b]);
        self.push(
            "matmul",
            Tensor::from_parts(vec![m, n], c),
            rg,
            Op::MatMul { a, b, m, k, n },
        )
    }

    /// Dense layer over the last axis: `y = x·Wᵀ + b` with `W` shaped `[out, in]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var, TensorError> {
        let (sx, sw) = (self.shape(x).to_vec(), self.shape(w).to_vec());
        if sw.len() != 2 || sx.is_empty() || *sx.last().unwrap() != sw[1] {
            return Err(shape_err("linear", format!("input {sx:?} with weight {sw:?}")));
        }
        let (out, inp) = (sw[0], sw[1]);
        if let Some(b) = b {
            if self.shape(b) != [out] {
                return Err(shape_err(
                    "linear",
                    format!("bias {:?} for {out} outputs", self.shape(b)),
                ));
            }
        }
        let rows = numel(&sx) / inp;
        let mut y = vec![T::ZERO; rows * out];
        gemm_nt(
            rows,
            out,
            inp,
            self.value(x).data(),
            self.value(w).data(),
            &mut y,
            false,
        );
        if let Some(b) = b {
            let bv = self.value(b).data();
            for row in y.chunks_exact_mut(out) {
                for (v, &bb) in row.iter_mut().zip(bv) {
                    *v += bb;
                }
            }
        }
        let mut shape = sx;
        *shape.last_mut().unwrap() = out;
        let mut deps = vec![x, w];
        deps.extend(b);
        let rg = self.rg(&deps);
        self.push(
            "linear",
            Tensor::from_parts(shape, y),
            rg,
            Op::Linear {
                x,
                w,
                b,
                rows,
                inp,
                out,
            },
        )
    }

    /// `x: [B, C, H, W]`, `w: [O, C, kh, kw]`, optional bias `[O]`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, spec: Conv2dSpec) -> Result<Var, TensorError> {
        let (sx, sw) = (self.shape(x).to_vec(), self.shape(w).to_vec());
        if sx.len() != 4 || sw.len() != 4 || sx[1] != sw[1] {
            return Err(shape_err("conv2d", format!("input {sx:?} with kernel {sw:?}")));
        }
        if spec.stride.0 == 0 || spec.stride.1 == 0 {
            return Err(shape_err("conv2d", format!("zero stride {:?}", spec.stride)));
        }
        let geom = ConvGeometry {
            channels: sx[1],
            height: sx[2],
            width: sx[3],
            kernel: (sw[2], sw[3]),
            stride: spec.stride,
            pad: spec.pad,
        };
        if sx[2] + spec.pad[0] + spec.pad[1] < sw[2] || sx[3] + spec.pad[2] + spec.pad[3] < sw[3] {
            return Err(shape_err(
                "conv2d",
                format!(
                    "kernel {}x{} larger than padded input {}x{}",
                    sw[2], sw[3], sx[2], sx[3]
                ),
            ));
        }
        let (batch, out_ch) = (sx[0], sw[0]);
        if let Some(b) = b {
            if self.shape(b) != [out_ch] {
                return Err(shape_err(
                    "conv2d",
                    format!("bias {:?} for {out_ch} filters", self.shape(b)),
                ));
            }
        }
        let (ho, wo) = (geom.out_height(), geom.out_width());
        let (kr, n) = (geom.col_rows(), geom.col_cols());
        let in_plane = sx[1] * sx[2] * sx[3];
        let mut out = vec![T::ZERO; batch * out_ch * n];
        let mut cols = vec![T::ZERO; kr * n];
        {
            let xv = self.value(x).data();
            let wv = self.value(w).data();
            let bv = b.map(|b| self.value(b).data());
            for s in 0..batch {
                im2col(&geom, &xv[s * in_plane..(s + 1) * in_plane], &mut cols);
                let o = &mut out[s * out_ch * n..(s + 1) * out_ch * n];
                gemm_xn(false, out_ch, n, kr, wv, &cols, o, false);
                if let Some(bv) = bv {
                    for (row, &bb) in o.chunks_exact_mut(n).zip(bv) {
                        row.iter_mut().for_each(|v| *v += bb);
                    }
                }
            }
        }
        let mut deps = vec![x, w];
        deps.extend(b);
        let rg = self.rg(&deps);
        self.push(
            "conv2d",
            Tensor::from_parts(vec![batch, out_ch, ho, wo], out),
            rg,
            Op::Conv2d {
                x,
                w,
                b,
                geom,
                batch,
                out_ch,
            },
        )
    }

    /// Non-overlapping max pooling over the two trailing axes (stride = window).
    pub fn maxpool2d(&mut self, x: Var, window: (usize, usize)) -> Result<Var, TensorError> {
        let sx = self.shape(x).to_vec();
        let (kh, kw) = window;
        if sx.len() < 2 || kh == 0 || kw == 0 {
            return Err(shape_err("maxpool2d", format!("input {sx:?} window {window:?}")));
        }
        let (h, w) = (sx[sx.len() - 2], sx[sx.len() - 1]);
        let (ho, wo) = (h / kh, w / kw);
        if ho == 0 || wo == 0 {
            return Err(shape_err("maxpool2d", format!("window {kh}x{kw} larger than {h}x{w}")));
        }
        let planes = numel(&sx) / (h * w);
        let xv = self.value(x).data();
        let mut out = Vec::with_capacity(planes * ho * wo);
        let mut argmax = Vec::with_capacity(planes * ho * wo);
        for p in 0..planes {
            let base = p * h * w;
            for oh in 0..ho {
                for ow in 0..wo {
                    let mut best = base + oh * kh * w + ow * kw;
                    for i in 0..kh {
                        for j in 0..kw {
                            let idx = base + (oh * kh + i) * w + ow * kw + j;
                            if xv[idx] > xv[best] {
                                best = idx;
                            }
                        }
                    }
                    out.push(xv[best]);
                    argmax.push(best as u32);
                }
            }
        }
        let mut shape = sx;
        let nd = shape.len();
        shape[nd - 2] = ho;
        shape[nd - 1] = wo;
        let rg = self.rg(&[x]);
        self.push(
            "maxpool2d",
            Tensor::from_parts(shape, out),
            rg,
            Op::MaxPool2d { x, argmax },
        )
    }

    /// Reduces one axis to length 1 by max or mean (dimension kept).
    pub fn pool_axis(&mut self, x: Var, axis: usize, kind: PoolKind) -> Result<Var, TensorError> {
        let sx = self.shape(x).to_vec();
        if axis >= sx.len() {
            return Err(shape_err("pool_axis", format!("axis {axis} out of range for {sx:?}")));
        }
        let (outer, len, inner) = split_axis(&sx, axis);
        let xv = self.value(x).data();
        let mut out = vec![T::ZERO; outer * inner];
        let mut argmax = Vec::new();
        match kind {
            PoolKind::Max => {
                argmax = vec![0u32; outer * inner];
                for o in 0..outer {
                    for i in 0..inner {
                        let mut best = o * len * inner + i;
                        for l in 1..len {
                            let idx = (o * len + l) * inner + i;
                            if xv[idx] > xv[best] {
                                best = idx;
                            }
                        }
                        out[o * inner + i] = xv[best];
                        argmax[o * inner + i] = best as u32;
                    }
                }
            }
            PoolKind::Mean => {
                for o in 0..outer {
                    for i in 0..inner {
                        let mut s = 0.0f64;
                        for l in 0..len {
                            s += xv[(o * len + l) * inner + i].to_f64();
                        }
                        out[o * inner + i] = T::from_f64(s / len as f64);
                    }
                }
            }
        }
        let mut shape = sx;
        shape[axis] = 1;
        let rg = self.rg(&[x]);
        self.push(
            "pool_axis",
            Tensor::from_parts(shape, out),
            rg,
            Op::PoolAxis {
                x,
                kind,
                outer,
                len,
                inner,
                argmax,
            },
        )
    }

    /// `[B, C, H, W] → [B, C]`.
    pub fn global_pool(&mut self, x: Var, kind: PoolKind) -> Result<Var, TensorError> {
        let sx = self.shape(x).to_vec();
        if sx.len() != 4 {
            return Err(shape_err("global_pool", format!("expected [B, C, H, W], got {sx:?}")));
        }
        let y = self.pool_axis(x, 3, kind)?;
        let y = self.pool_axis(y, 2, kind)?;
        self.reshape(y, &[sx[0], sx[1]])
    }

    pub fn relu(&mut self, x: Var) -> Result<Var, TensorError> {
        self.unary("relu", x, |v| if v > T::ZERO { v } else { T::ZERO }, Op::Relu(x))
    }

    /// Exact (erf-based) GELU.
    pub fn gelu(&mut self, x: Var) -> Result<Var, TensorError> {
        let c = T::from_f64(INV_SQRT_2);
        let half = T::from_f64(0.5);
        self.unary("gelu", x, |v| half * v * (T::ONE + (v * c).erf()), Op::Gelu(x))
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var, TensorError> {
        self.unary("sigmoid", x, sigmoid, Op::Sigmoid(x))
    }

    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var, TensorError> {
        let sx = self.shape(x).to_vec();
        if axis >= sx.len() {
            return Err(shape_err("softmax", format!("axis {axis} out of range for {sx:?}")));
        }
        let (outer, len, inner) = split_axis(&sx, axis);
        let xv = self.value(x).data();
        let mut out = vec![T::ZERO; xv.len()];
        for o in 0..outer {
            for i in 0..inner {
                let at = |l: usize| (o * len + l) * inner + i;
                let mut mx = xv[at(0)];
                for l in 1..len {
                    mx = mx.max(xv[at(l)]);
                }
                let mut s = 0.0f64;
                for l in 0..len {
                    let e = (xv[at(l)] - mx).exp();
                    out[at(l)] = e;
                    s += e.to_f64();
                }
                let inv = T::from_f64(1.0 / s);
                for l in 0..len {
                    out[at(l)] *= inv;
                }
            }
        }
        let rg = self.rg(&[x]);
        self.push(
            "softmax",
            Tensor::from_parts(sx, out),
            rg,
            Op::Softmax { x, outer, len, inner },
        )
    }

    /// Normalises over the last axis with learned scale and shift.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var, TensorError> {
        let sx = self.shape(x).to_vec();
        let dim = *sx
            .last()
            .ok_or_else(|| shape_err("layer_norm", "scalar input".into()))?;
        if self.shape(gamma) != [dim] || self.shape(beta) != [dim] {
            return Err(shape_err(
                "layer_norm",
                format!(
                    "affine {:?}/{:?} for feature size {dim}",
                    self.shape(gamma),
                    self.shape(beta)
                ),
            ));
        }
        let rows = numel(&sx) / dim;
        let xv = self.value(x).data();
        let (gv, bv) = (self.value(gamma).data(), self.value(beta).data());
        let mut out = vec![T::ZERO; xv.len()];
        let mut xhat = vec![T::ZERO; xv.len()];
        let mut rstd = vec![T::ZERO; rows];
        for r in 0..rows {
            let row = &xv[r * dim..(r + 1) * dim];
            let mean = row.iter().map(|v| v.to_f64()).sum::<f64>() / dim as f64;
            let var = row
                .iter()
                .map(|v| {
                    let d = v.to_f64() - mean;
                    d * d
                })
                .sum::<f64>()
                / dim as f64;
            let rs = 1.0 / libm::sqrt(var + NORM_EPS);
            rstd[r] = T::from_f64(rs);
            for j in 0..dim {
                let xh = T::from_f64((row[j].to_f64() - mean) * rs);
                xhat[r * dim + j] = xh;
                out[r * dim + j] = gv[j] * xh + bv[j];
            }
        }
        let rg = self.rg(&[x, gamma, beta]);
        self.push(
            "layer_norm",
            Tensor::from_parts(sx, out),
            rg,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
                dim,
            },
        )
    }

    /// Per-channel normalisation of `x: [B, C, ...]` over batch and trailing axes.
    pub fn batch_norm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        mode: BatchNormMode<'_, T>,
    ) -> Result<Var, TensorError> {
        let sx = self.shape(x).to_vec();
        if sx.len() < 2 {
            return Err(shape_err("batch_norm", format!("expected [B, C, ...], got {sx:?}")));
        }
        let (batch, channels) = (sx[0], sx[1]);
        let inner: usize = sx[2..].iter().product();
        if self.shape(gamma) != [channels] || self.shape(beta) != [channels] {
            return Err(shape_err(
                "batch_norm",
                format!(
                    "affine {:?}/{:?} for {channels} channels",
                    self.shape(gamma),
                    self.shape(beta)
                ),
            ));
        }
        let xv = self.value(x).data();
        let (gv, bv) = (self.value(gamma).data(), self.value(beta).data());
        let at = |b: usize, c: usize, i: usize| (b * channels + c) * inner + i;
        let count = batch * inner;
        let mut means = vec![0.0f64; channels];
        let mut vars = vec![0.0f64; channels];
        let batch_stats = matches!(mode, BatchNormMode::Train { .. });
        match mode {
            BatchNormMode::Train { .. } => {
                for c in 0..channels {
                    let mut s = 0.0;
                    for b in 0..batch {
                        for i in 0..inner {
                            s += xv[at(b, c, i)].to_f64();
                        }
                    }
                    let m = s / count as f64;
                    let mut q = 0.0;
                    for b in 0..batch {
                        for i in 0..inner {
                            let d = xv[at(b, c, i)].to_f64() - m;
                            q += d * d;
                        }
                    }
                    means[c] = m;
                    vars[c] = q / count as f64;
                }
            }
            BatchNormMode::Eval {
                running_mean,
                running_var,
            } => {
                if running_mean.len() != channels || running_var.len() != channels {
                    return Err(shape_err(
                        "batch_norm",
                        format!(
                            "running statistics of length {} for {channels} channels",
                            running_mean.len()
                        ),
                    ));
                }
                for c in 0..channels {
                    means[c] = running_mean[c].to_f64();
                    vars[c] = running_var[c].to_f64();
                }
            }
        }
        let rstd64: Vec<f64> = vars.iter().map(|v| 1.0 / libm::sqrt(v + NORM_EPS)).collect();
        let mut out = vec![T::ZERO; xv.len()];
        let mut xhat = vec![T::ZERO; xv.len()];
        for b in 0..batch {
            for c in 0..channels {
                for i in 0..inner {
                    let idx = at(b, c, i);
                    let xh = T::from_f64((xv[idx].to_f64() - means[c]) * rstd64[c]);
                    xhat[idx] = xh;
                    out[idx] = gv[c] * xh + bv[c];
                }
            }
        }
        if let BatchNormMode::Train { key } = mode {
            let unbias = if count > 1 {
                count as f64 / (count - 1) as f64
            } else {
                1.0
            };
            self.stat_updates.push(StatUpdate {
                key,
                mean: means,
                var: vars.iter().map(|v| v * unbias).collect(),
            });
        }
        let rstd = rstd64.into_iter().map(T::from_f64).collect();
        let rg = self.rg(&[x, gamma, beta]);
        self.push(
            "batch_norm",
            Tensor::from_parts(sx, out),
            rg,
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
                batch_stats,
                batch,
                channels,
                inner,
            },
        )
    }

    /// Inverted dropout with a mask drawn from `seed`.
    pub fn dropout(&mut self, x: Var, p: f64, seed: u64) -> Result<Var, TensorError> {
        if !(0.0..=1.0).contains(&p) {
            return Err(shape_err("dropout", format!("probability {p} outside [0, 1]")));
        }
        let n = self.value(x).numel();
        let mask: Vec<T> = if p == 0.0 {
            vec![T::ONE; n]
        } else if p >= 1.0 {
            vec![T::ZERO; n]
        } else {
            let keep = T::from_f64(1.0 / (1.0 - p));
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            (0..n)
                .map(|_| if rng.random::<f64>() < p { T::ZERO } else { keep })
                .collect()
        };
        let xv = self.value(x);
        let data = xv.data().iter().zip(&mask).map(|(&v, &m)| v * m).collect();
        let out = Tensor::from_parts(xv.shape().to_vec(), data);
        let rg = self.rg(&[x]);
        self.push("dropout", out, rg, Op::Dropout { x, mask })
    }

    pub fn concat(&mut self, inputs: &[Var], axis: usize) -> Result<Var, TensorError> {
        let first = inputs.first().ok_or_else(|| shape_err("concat", "no inputs".into()))?;
        let base = self.shape(*first).to_vec();
        if axis >= base.len() {
            return Err(shape_err("concat", format!("axis {axis} out of range for {base:?}")));
        }
        let mut sizes = Vec::with_capacity(inputs.len());
        for &v in inputs {
            let s = self.shape(v);
            let compatible =
                s.len() == base.len() && s.iter().zip(&base).enumerate().all(|(i, (a, b))| i == axis || a == b);
            if !compatible {
                return Err(shape_err(
                    "concat",
                    format!("{s:?} incompatible with {base:?} on axis {axis}"),
                ));
            }
            sizes.push(s[axis]);
        }
        let (outer, _, inner) = split_axis(&base, axis);
        let total: usize = sizes.iter().sum();
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for (&v, &len) in inputs.iter().zip(&sizes) {
                let d = self.value(v).data();
                out.extend_from_slice(&d[o * len * inner..(o + 1) * len * inner]);
            }
        }
        let mut shape = base;
        shape[axis] = total;
        let rg = self.rg(inputs);
        self.push(
            "concat",
            Tensor::from_parts(shape, out),
            rg,
            Op::Concat {
                inputs: inputs.to_vec(),
                sizes,
                outer,
                inner,
            },
        )
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var, TensorError> {
        let out = self.value(x).clone().reshape(shape)?;
        let rg = self.rg(&[x]);
        self.push("reshape", out, rg, Op::Reshape(x))
    }

    /// General axis permutation: output axis `i` is input axis `perm[i]`.
    pub fn permute(&mut self, x: Var, perm: &[usize]) -> Result<Var, TensorError> {
        let sx = self.shape(x).to_vec();
        let mut seen = vec![false; sx.len()];
        if perm.len() != sx.len()
            || perm
                .iter()
                .any(|&p| p >= sx.len() || core::mem::replace(&mut seen[p], true))
        {
            return Err(shape_err(
                "transpose",
                format!("invalid permutation {perm:?} for {sx:?}"),
            ));
        }
        let out = permute_data(self.value(x).data(), &sx, perm);
        let shape: Vec<usize> = perm.iter().map(|&p| sx[p]).collect();
        let rg = self.rg(&[x]);
        self.push(
            "transpose",
            Tensor::from_parts(shape, out),
            rg,
            Op::Permute { x, perm: perm.to_vec() },
        )
    }

    /// Swaps two axes.
    pub fn transpose(&mut self, x: Var, a: usize, b: usize) -> Result<Var, TensorError> {
        let mut perm: Vec<usize> = (0..self.shape(x).len()).collect();
        if a >= perm.len() || b >= perm.len() {
            return Err(shape_err(
                "transpose",
                format!("axes ({a}, {b}) for {:?}", self.shape(x)),
            ));
        }
        perm.swap(a, b);
        self.permute(x, &perm)
    }

    /// Adds `y` to every leading slice of `x` whose trailing shape equals `y`'s
    /// (positional embeddings over a batch).
    pub fn embedding_add(&mut self, x: Var, y: Var) -> Result<Var, TensorError> {
        let (sx, sy) = (self.shape(x).to_vec(), self.shape(y).to_vec());
        if sy.len() > sx.len() || sx[sx.len() - sy.len()..] != sy[..] {
            return Err(shape_err(
                "embedding_add",
                format!("{sy:?} does not broadcast onto {sx:?}"),
            ));
        }
        let block = numel(&sy);
        let repeats = numel(&sx) / block;
        let yv = self.value(y).data();
        let mut out = self.value(x).data().to_vec();
        for chunk in out.chunks_exact_mut(block) {
            for (o, &v) in chunk.iter_mut().zip(yv) {
                *o += v;
            }
        }
        let rg = self.rg(&[x, y]);
        self.push(
            "embedding_add",
            Tensor::from_parts(sx, out),
            rg,
            Op::AddBroadcast { x, y, repeats },
        )
    }

    /// Multi-head scaled dot-product attention over `[B, S, E]` projections.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, heads: usize) -> Result<Var, TensorError> {
        let sq = self.shape(q).to_vec();
        if sq.len() != 3 || self.shape(k) != &sq[..] || self.shape(v) != &sq[..] {
            return Err(shape_err(
                "attention",
                format!("q {sq:?}, k {:?}, v {:?}", self.shape(k), self.shape(v)),
            ));
        }
        let (batch, seq, embed) = (sq[0], sq[1], sq[2]);
        if heads == 0 || embed % heads != 0 {
            return Err(shape_err(
                "attention",
                format!("embed {embed} not divisible by {heads} heads"),
            ));
        }
        let d = embed / heads;
        let scale = T::from_f64(1.0 / libm::sqrt(d as f64));
        let mut out = vec![T::ZERO; batch * seq * embed];
        let mut probs = vec![T::ZERO; batch * heads * seq * seq];
        let (qv, kv, vv) = (self.value(q).data(), self.value(k).data(), self.value(v).data());
        // Heads are processed in transposed [d × seq] layout so every GEMM
        // inner loop runs over the sequence axis.
        let mut qt = vec![T::ZERO; seq * d];
        let mut kt = vec![T::ZERO; seq * d];
        let mut vt = vec![T::ZERO; seq * d];
        let mut ot = vec![T::ZERO; seq * d];
        for b in 0..batch {
            for h in 0..heads {
                gather_head_t(qv, b, h, seq, embed, d, &mut qt);
                gather_head_t(kv, b, h, seq, embed, d, &mut kt);
                gather_head_t(vv, b, h, seq, embed, d, &mut vt);
                let p = &mut probs[(b * heads + h) * seq * seq..(b * heads + h + 1) * seq * seq];
                gemm_xn(true, seq, seq, d, &qt, &kt, p, false);
                for row in p.chunks_exact_mut(seq) {
                    let mut mx = row[0] * scale;
                    for v in row.iter_mut() {
                        *v *= scale;
                        mx = mx.max(*v);
                    }
                    row.iter_mut().for_each(|v| *v = (*v - mx).exp());
                    let s: f64 = row.iter().map(|v| v.to_f64()).sum();
                    let inv = T::from_f64(1.0 / s);
                    row.iter_mut().for_each(|v| *v *= inv);
                }
                gemm_nt(d, seq, seq, &vt, p, &mut ot, false);
                scatter_head_t(&ot, b, h, seq, embed, d, &mut out, false);
            }
        }
        let rg = self.rg(&[q, k, v]);
        self.push(
            "attention",
            Tensor::from_parts(sq, out),
            rg,
            Op::Attention {
                q,
                k,
                v,
                heads,
                probs,
                batch,
                seq,
                embed,
            },
        )
    }

    /// `[1, ...] → [n, ...]`.
    pub fn repeat_leading(&mut self, x: Var, n: usize) -> Result<Var, TensorError> {
        let sx = self.shape(x).to_vec();
        if sx.first() != Some(&1) || n == 0 {
            return Err(shape_err("repeat_leading", format!("cannot repeat {sx:?} {n} times")));
        }
        let d = self.value(x).data();
        let mut out = Vec::with_capacity(d.len() * n);
        for _ in 0..n {
            out.extend_from_slice(d);
        }
        let mut shape = sx;
        shape[0] = n;
        let rg = self.rg(&[x]);
        self.push(
            "repeat_leading",
            Tensor::from_parts(shape, out),
            rg,
            Op::RepeatLeading { x, n },
        )
    }

    /// Keeps `count` entries of `axis` starting at `start`.
    pub fn slice_axis(&mut self, x: Var, axis: usize, start: usize, count: usize) -> Result<Var, TensorError> {
        let sx = self.shape(x).to_vec();
        if axis >= sx.len() || count == 0 || start + count > sx[axis] {
            return Err(shape_err(
                "slice",
                format!("[{start}, {}) on axis {axis} of {sx:?}", start + count),
            ));
        }
        let (outer, len, inner) = split_axis(&sx, axis);
        let d = self.value(x).data();
        let mut out = Vec::with_capacity(outer * count * inner);
        for o in 0..outer {
            out.extend_from_slice(&d[(o * len + start) * inner..(o * len + start + count) * inner]);
        }
        let mut shape = sx;
        shape[axis] = count;
        let rg = self.rg(&[x]);
        self.push(
            "slice",
            Tensor::from_parts(shape, out),
            rg,
            Op::Slice {
                x,
                outer,
                len,
                inner,
                start,
                count,
            },
        )
    }

    /// Mean sigmoid binary cross-entropy between `logits` and constant 0/1 targets.
    pub fn bce_with_logits(&mut self, logits: Var, targets: &[T]) -> Result<Var, TensorError> {
        let xv = self.value(logits).data();
        if xv.len() != targets.len() {
            return Err(shape_err(
                "bce_with_logits",
                format!("{} logits vs {} targets", xv.len(), targets.len()),
            ));
        }
        let mut s = 0.0f64;
        for (&x, &t) in xv.iter().zip(targets) {
            let (x, t) = (x.to_f64(), t.to_f64());
            s += x.max(0.0) - x * t + libm::log1p(libm::exp(-x.abs()));
        }
        let loss = T::from_f64(s / xv.len() as f64);
        let rg = self.rg(&[logits]);
        self.push(
            "bce_with_logits",
            Tensor::scalar(loss),
            rg,
            Op::BceWithLogits {
                x: logits,
                targets: targets.to_vec(),
            },
        )
    }

    /// Reverse sweep from a scalar `loss`. Returns gradients for every leaf
    /// that requires them.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>, TensorError> {
        let node = self.nodes.get(loss.0).ok_or(TensorError::NoGraph)?;
        if node.value.numel() != 1 {
            return Err(TensorError::NonScalarLoss(node.value.shape().to_vec()));
        }
        if !node.requires_grad {
            return Err(TensorError::NoGraph);
        }
        let mut grads: Vec<Option<Vec<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![T::ONE]);
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            if let Op::Leaf = node.op {
                grads[i] = Some(g);
                continue;
            }
            self.backward_node(node, &g, &mut grads);
        }
        // Only leaf gradients survive the sweep.
        Ok(Gradients { grads })
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn slot<'g>(&self, grads: &'g mut [Option<Vec<T>>], v: Var) -> &'g mut Vec<T> {
        let len = self.nodes[v.0].value.numel();
        accumulate(&mut grads[v.0], len)
    }

    fn backward_node(&self, node: &Node<T>, g: &[T], grads: &mut [Option<Vec<T>>]) {
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                for v in [*a, *b] {
                    if self.wants(v) {
                        let s = self.slot(grads, v);
                        s.iter_mut().zip(g).for_each(|(s, &g)| *s += g);
                    }
                }
            }
            Op::Mul(a, b) => {
                let (a, b) = (*a, *b);
                if self.wants(a) {
                    let bv = self.value(b).data();
                    let s = self.slot(grads, a);
                    for ((s, &g), &y) in s.iter_mut().zip(g).zip(bv) {
                        *s += g * y;
                    }
                }
                if self.wants(b) {
                    let av = self.value(a).data();
                    let s = self.slot(grads, b);
                    for ((s, &g), &x) in s.iter_mut().zip(g).zip(av) {
                        *s += g * x;
                    }
                }
            }
            Op::Scale(x, c) => {
                if self.wants(*x) {
                    let s = self.slot(grads, *x);
                    s.iter_mut().zip(g).for_each(|(s, &g)| *s += g * *c);
                }
            }
            Op::Sum(x) => {
                if self.wants(*x) {
                    let s = self.slot(grads, *x);
                    s.iter_mut().for_each(|s| *s += g[0]);
                }
            }
            Op::Mean(x) => {
                if self.wants(*x) {
                    let n = self.value(*x).numel();
                    let gv = g[0] / T::from_usize(n);
                    let s = self.slot(grads, *x);
                    s.iter_mut().for_each(|s| *s += gv);
                }
            }
            Op::MatMul { a, b, m, k, n } => {
                let (a, b, m, k, n) = (*a, *b, *m, *k, *n);
                if self.wants(a) {
                    let bv = self.value(b).data();
                    gemm_nt(m, k, n, g, bv, self.slot(grads, a), true);
                }
                if self.wants(b) {
                    let av = self.value(a).data();
                    gemm_xn(true, k, n, m, av, g, self.slot(grads, b), true);
                }
            }
            Op::Linear {
                x,
                w,
                b,
                rows,
                inp,
                out,
            } => {
                let (x, w, rows, inp, out) = (*x, *w, *rows, *inp, *out);
                if self.wants(x) {
                    let wv = self.value(w).data();
                    gemm_xn(false, rows, inp, out, g, wv, self.slot(grads, x), true);
                }
                if self.wants(w) {
                    let xv = self.value(x).data();
                    gemm_xn(true, out, inp, rows, g, xv, self.slot(grads, w), true);
                }
                if let Some(b) = *b {
                    if self.wants(b) {
                        let mut acc = vec![0.0f64; out];
                        for row in g.chunks_exact(out) {
                            for (a, &v) in acc.iter_mut().zip(row) {
                                *a += v.to_f64();
                            }
                        }
                        let s = self.slot(grads, b);
                        s.iter_mut().zip(acc).for_each(|(s, a)| *s += T::from_f64(a));
                    }
                }
            }
            Op::Conv2d {
                x,
                w,
                b,
                geom,
                batch,
                out_ch,
            } => {
                let (x, w, batch, out_ch) = (*x, *w, *batch, *out_ch);
                let (kr, n) = (geom.col_rows(), geom.col_cols());
                let in_plane = geom.channels * geom.height * geom.width;
                let xv = self.value(x).data();
                let wv = self.value(w).data();
                if self.wants(w) {
                    let mut cols = vec![T::ZERO; kr * n];
                    let mut gw = vec![T::ZERO; out_ch * kr];
                    for s in 0..batch {
                        im2col(geom, &xv[s * in_plane..(s + 1) * in_plane], &mut cols);
                        gemm_nt(
                            out_ch,
                            kr,
                            n,
                            &g[s * out_ch * n..(s + 1) * out_ch * n],
                            &cols,
                            &mut gw,
                            true,
                        );
                    }
                    let slot = self.slot(grads, w);
                    slot.iter_mut().zip(gw).for_each(|(s, v)| *s += v);
                }
                if self.wants(x) {
                    let mut dcols = vec![T::ZERO; kr * n];
                    let slot = self.slot(grads, x);
                    for s in 0..batch {
                        gemm_xn(
                            true,
                            kr,
                            n,
                            out_ch,
                            wv,
                            &g[s * out_ch * n..(s + 1) * out_ch * n],
                            &mut dcols,
                            false,
                        );
                        col2im(geom, &dcols, &mut slot[s * in_plane..(s + 1) * in_plane]);
                    }
                }
                if let Some(b) = *b {
                    if self.wants(b) {
                        let mut acc = vec![0.0f64; out_ch];
                        for s in 0..batch {
                            for (o, a) in acc.iter_mut().enumerate() {
                                let start = (s * out_ch + o) * n;
                                *a += g[start..start + n].iter().map(|v| v.to_f64()).sum::<f64>();
                            }
                        }
                        let slot = self.slot(grads, b);
                        slot.iter_mut().zip(acc).for_each(|(s, a)| *s += T::from_f64(a));
                    }
                }
            }
            Op::MaxPool2d { x, argmax } => {
                if self.wants(*x) {
                    let s = self.slot(grads, *x);
                    for (&idx, &gv) in argmax.iter().zip(g) {
                        s[idx as usize] += gv;
                    }
                }
            }
            Op::PoolAxis {
                x,
                kind,
                outer,
                len,
                inner,
                argmax,
            } => {
                if self.wants(*x) {
                    let (outer, len, inner) = (*outer, *len, *inner);
                    let s = self.slot(grads, *x);
                    match kind {
                        PoolKind::Max => {
                            for (&idx, &gv) in argmax.iter().zip(g) {
                                s[idx as usize] += gv;
                            }
                        }
                        PoolKind::Mean => {
                            let inv = T::ONE / T::from_usize(len);
                            for o in 0..outer {
                                for l in 0..len {
                                    for i in 0..inner {
                                        s[(o * len + l) * inner + i] += g[o * inner + i] * inv;
                                    }
                                }
                            }
                        }
                    }
                }
            }
            Op::Relu(x) => {
                if self.wants(*x) {
                    let xv = self.value(*x).data();
                    let s = self.slot(grads, *x);
                    for ((s, &g), &v) in s.iter_mut().zip(g).zip(xv) {
                        if v > T::ZERO {
                            *s += g;
                        }
                    }
                }
            }
            Op::Gelu(x) => {
                if self.wants(*x) {
                    let xv = self.value(*x).data();
                    let (c, half, k) = (T::from_f64(INV_SQRT_2), T::from_f64(0.5), T::from_f64(INV_SQRT_2PI));
                    let s = self.slot(grads, *x);
                    for ((s, &g), &v) in s.iter_mut().zip(g).zip(xv) {
                        let d = half * (T::ONE + (v * c).erf()) + v * k * (-half * v * v).exp();
                        *s += g * d;
                    }
                }
            }
            Op::Sigmoid(x) => {
                if self.wants(*x) {
                    let yv = node.value.data();
                    let s = self.slot(grads, *x);
                    for ((s, &g), &y) in s.iter_mut().zip(g).zip(yv) {
                        *s += g * y * (T::ONE - y);
                    }
                }
            }
            Op::Softmax { x, outer, len, inner } => {
                if self.wants(*x) {
                    let (outer, len, inner) = (*outer, *len, *inner);
                    let yv = node.value.data();
                    let s = self.slot(grads, *x);
                    for o in 0..outer {
                        for i in 0..inner {
                            let at = |l: usize| (o * len + l) * inner + i;
                            let mut dotp = T::ZERO;
                            for l in 0..len {
                                dotp += g[at(l)] * yv[at(l)];
                            }
                            for l in 0..len {
                                s[at(l)] += yv[at(l)] * (g[at(l)] - dotp);
                            }
                        }
                    }
                }
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
                dim,
            } => {
                let dim = *dim;
                let gv = self.value(*gamma).data();
                if self.wants(*x) {
                    let s = self.slot(grads, *x);
                    let dn = T::from_usize(dim);
                    for (r, &rs) in rstd.iter().enumerate() {
                        let rg = &g[r * dim..(r + 1) * dim];
                        let xh = &xhat[r * dim..(r + 1) * dim];
                        let mut s1 = T::ZERO;
                        let mut s2 = T::ZERO;
                        for j in 0..dim {
                            let gx = rg[j] * gv[j];
                            s1 += gx;
                            s2 += gx * xh[j];
                        }
                        for j in 0..dim {
                            let gx = rg[j] * gv[j];
                            s[r * dim + j] += rs / dn * (dn * gx - s1 - xh[j] * s2);
                        }
                    }
                }
                if self.wants(*gamma) {
                    let mut acc = vec![0.0f64; dim];
                    for (row, xr) in g.chunks_exact(dim).zip(xhat.chunks_exact(dim)) {
                        for j in 0..dim {
                            acc[j] += (row[j] * xr[j]).to_f64();
                        }
                    }
                    let s = self.slot(grads, *gamma);
                    s.iter_mut().zip(acc).for_each(|(s, a)| *s += T::from_f64(a));
                }
                if self.wants(*beta) {
                    let mut acc = vec![0.0f64; dim];
                    for row in g.chunks_exact(dim) {
                        for j in 0..dim {
                            acc[j] += row[j].to_f64();
                        }
                    }
                    let s = self.slot(grads, *beta);
                    s.iter_mut().zip(acc).for_each(|(s, a)| *s += T::from_f64(a));
                }
            }
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
                batch_stats,
                batch,
                channels,
                inner,
            } => {
                let (batch, channels, inner) = (*batch, *channels, *inner);
                let at = |b: usize, c: usize, i: usize| (b * channels + c) * inner + i;
                let gv = self.value(*gamma).data();
                let mut sum_g = vec![0.0f64; channels];
                let mut sum_gx = vec![0.0f64; channels];
                for b in 0..batch {
                    for c in 0..channels {
                        for i in 0..inner {
                            let idx = at(b, c, i);
                            sum_g[c] += g[idx].to_f64();
                            sum_gx[c] += (g[idx] * xhat[idx]).to_f64();
                        }
                    }
                }
                if self.wants(*x) {
                    let s = self.slot(grads, *x);
                    let count = (batch * inner) as f64;
                    for c in 0..channels {
                        let gamma_c = gv[c].to_f64();
                        let rs = rstd[c].to_f64();
                        for b in 0..batch {
                            for i in 0..inner {
                                let idx = at(b, c, i);
                                let gx = g[idx].to_f64() * gamma_c;
                                let d = if *batch_stats {
                                    rs / count
                                        * (count * gx - gamma_c * sum_g[c] - xhat[idx].to_f64() * gamma_c * sum_gx[c])
                                } else {
                                    gx * rs
                                };
                                s[idx] += T::from_f64(d);
                            }
                        }
                    }
                }
                if self.wants(*gamma) {
                    let s = self.slot(grads, *gamma);
                    s.iter_mut().zip(&sum_gx).for_each(|(s, &a)| *s += T::from_f64(a));
                }
                if self.wants(*beta) {
                    let s = self.slot(grads, *beta);
                    s.iter_mut().zip(&sum_g).for_each(|(s, &a)| *s += T::from_f64(a));
                }
            }
            Op::Dropout { x, mask } => {
                if self.wants(*x) {
                    let s = self.slot(grads, *x);
                    for ((s, &g), &m) in s.iter_mut().zip(g).zip(mask) {
                        *s += g * m;
                    }
                }
            }
            Op::Concat {
                inputs,
                sizes,
                outer,
                inner,
            } => {
                let total: usize = sizes.iter().sum();
                let mut offset = 0;
                for (&v, &len) in inputs.iter().zip(sizes) {
                    if self.wants(v) {
                        let s = self.slot(grads, v);
                        for o in 0..*outer {
                            let src = &g[(o * total + offset) * inner..(o * total + offset + len) * inner];
                            let dst = &mut s[o * len * inner..(o + 1) * len * inner];
                            dst.iter_mut().zip(src).for_each(|(d, &v)| *d += v);
                        }
                    }
                    offset += len;
                }
            }
            Op::Reshape(x) => {
                if self.wants(*x) {
                    let s = self.slot(grads, *x);
                    s.iter_mut().zip(g).for_each(|(s, &g)| *s += g);
                }
            }
            Op::Permute { x, perm } => {
                if self.wants(*x) {
                    let mut inv = vec![0; perm.len()];
                    for (i, &p) in perm.iter().enumerate() {
                        inv[p] = i;
                    }
                    let gshape = node.value.shape();
                    let back = permute_data(g, gshape, &inv);
                    let s = self.slot(grads, *x);
                    s.iter_mut().zip(back).for_each(|(s, g)| *s += g);
                }
            }
            Op::AddBroadcast { x, y, repeats } => {
                if self.wants(*x) {
                    let s = self.slot(grads, *x);
                    s.iter_mut().zip(g).for_each(|(s, &g)| *s += g);
                }
                if self.wants(*y) {
                    let block = g.len() / repeats;
                    let mut acc = vec![0.0f64; block];
                    for chunk in g.chunks_exact(block) {
                        acc.iter_mut().zip(chunk).for_each(|(a, &v)| *a += v.to_f64());
                    }
                    let s = self.slot(grads, *y);
                    s.iter_mut().zip(acc).for_each(|(s, a)| *s += T::from_f64(a));
                }
            }
            Op::Attention {
                q,
                k,
                v,
                heads,
                probs,
                batch,
                seq,
                embed,
            } => {
                let (heads, batch, seq, embed) = (*heads, *batch, *seq, *embed);
                let d = embed / heads;
                let scale = T::from_f64(1.0 / libm::sqrt(d as f64));
                let (qv, kv, vv) = (self.value(*q).data(), self.value(*k).data(), self.value(*v).data());
                let mut gq = vec![T::ZERO; qv.len()];
                let mut gk = vec![T::ZERO; kv.len()];
                let mut gvv = vec![T::ZERO; vv.len()];
                let mut qt = vec![T::ZERO; seq * d];
                let mut kt = vec![T::ZERO; seq * d];
                let mut vt = vec![T::ZERO; seq * d];
                let mut got = vec![T::ZERO; seq * d];
                let mut tmp = vec![T::ZERO; seq * d];
                let mut dp = vec![T::ZERO; seq * seq];
                for b in 0..batch {
                    for h in 0..heads {
                        let p = &probs[(b * heads + h) * seq * seq..(b * heads + h + 1) * seq * seq];
                        gather_head_t(qv, b, h, seq, embed, d, &mut qt);
                        gather_head_t(kv, b, h, seq, embed, d, &mut kt);
                        gather_head_t(vv, b, h, seq, embed, d, &mut vt);
                        gather_head_t(g, b, h, seq, embed, d, &mut got);
                        // dVᵀ = dOᵀ P
                        gemm_xn(false, d, seq, seq, &got, p, &mut tmp, false);
                        scatter_head_t(&tmp, b, h, seq, embed, d, &mut gvv, true);
                        // dP = dO Vᵀ, then softmax adjoint and score scale
                        gemm_xn(true, seq, seq, d, &got, &vt, &mut dp, false);
                        for (drow, prow) in dp.chunks_exact_mut(seq).zip(p.chunks_exact(seq)) {
                            let mut dotp = T::ZERO;
                            for (&dv, &pv) in drow.iter().zip(prow) {
                                dotp += dv * pv;
                            }
                            for (dv, &pv) in drow.iter_mut().zip(prow) {
                                *dv = pv * (*dv - dotp) * scale;
                            }
                        }
                        // dQᵀ = Kᵀ dSᵀ, dKᵀ = Qᵀ dS
                        gemm_nt(d, seq, seq, &kt, &dp, &mut tmp, false);
                        scatter_head_t(&tmp, b, h, seq, embed, d, &mut gq, true);
                        gemm_xn(false, d, seq, seq, &qt, &dp, &mut tmp, false);
                        scatter_head_t(&tmp, b, h, seq, embed, d, &mut gk, true);
                    }
                }
                for (var, gvals) in [(*q, gq), (*k, gk), (*v, gvv)] {
                    if self.wants(var) {
                        let s = self.slot(grads, var);
                        s.iter_mut().zip(gvals).for_each(|(s, g)| *s += g);
                    }
                }
            }
            Op::RepeatLeading { x, n } => {
                if self.wants(*x) {
                    let block = g.len() / n;
                    let mut acc = vec![0.0f64; block];
                    for chunk in g.chunks_exact(block) {
                        acc.iter_mut().zip(chunk).for_each(|(a, &v)| *a += v.to_f64());
                    }
                    let s = self.slot(grads, *x);
                    s.iter_mut().zip(acc).for_each(|(s, a)| *s += T::from_f64(a));
                }
            }
            Op::Slice {
                x,
                outer,
                len,
                inner,
                start,
                count,
            } => {
                if self.wants(*x) {
                    let (len, inner, start, count) = (*len, *inner, *start, *count);
                    let s = self.slot(grads, *x);
                    for o in 0..*outer {
                        let dst = &mut s[(o * len + start) * inner..(o * len + start + count) * inner];
                        let src = &g[o * count * inner..(o + 1) * count * inner];
                        dst.iter_mut().zip(src).for_each(|(d, &v)| *d += v);
                    }
                }
            }
            Op::BceWithLogits { x, targets } => {
                if self.wants(*x) {
                    let xv = self.value(*x).data();
                    let inv_n = g[0] / T::from_usize(xv.len());
                    let s = self.slot(grads, *x);
                    for ((s, &x), &t) in s.iter_mut().zip(xv).zip(targets) {
                        *s += (sigmoid(x) - t) * inv_n;
                    }
                }
            }
        }
    }
}

/// Copies head `h` of batch item `b` into `dst[d × seq]`.
fn gather_head_t<T: Real>(src: &[T], b: usize, h: usize, seq: usize, embed: usize, d: usize, dst: &mut [T]) {
    for s in 0..seq {
        let off = (b * seq + s) * embed + h * d;
        for (i, &v) in src[off..off + d].iter().enumerate() {
            dst[i * seq + s] = v;
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn scatter_head_t<T: Real>(
    src: &[T],
    b: usize,
    h: usize,
    seq: usize,
    embed: usize,
    d: usize,
    dst: &mut [T],
    add: bool,
) {
    for s in 0..seq {
        let off = (b * seq + s) * embed + h * d;
        for (i, o) in dst[off..off + d].iter_mut().enumerate() {
            let v = src[i * seq + s];
            if add {
                *o += v;
            } else {
                *o = v;
            }
        }
    }
}

fn permute_data<T: Real>(data: &[T], shape: &[usize], perm: &[usize]) -> Vec<T> {
    let nd = shape.len();
    let mut in_strides = vec![1usize; nd];
    for i in (0..nd.saturating_sub(1)).rev() {
        in_strides[i] = in_strides[i + 1] * shape[i + 1];
    }
    let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
    let strides: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
    let mut out = Vec::with_capacity(data.len());
    let mut idx = vec![0usize; nd];
    let mut offset = 0usize;
    for _ in 0..data.len() {
        out.push(data[offset]);
        // odometer increment over the output index
        for ax in (0..nd).rev() {
            idx[ax] += 1;
            offset += strides[ax];
            if idx[ax] < out_shape[ax] {
                break;
            }
            offset -= strides[ax] * idx[ax];
            idx[ax] = 0;
        }
    }
    out
}
