//! VGG-ish, Musicnn and AST tagging networks built from one [`ModelConfig`].
//!
//! Every architecture maps `[B, 1, n_mels, n_frames]` log-mel chunks to
//! `[B, n_tags]` logits, and names its output layer `head.*` so transfer
//! can swap it uniformly.

use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::autodiff::{Conv2dSpec, PoolKind, Var};
use crate::dsp::{ChunkSpec, DspConfig};
use crate::nn::{BatchNorm, Conv2d, Forward, Init, LayerNorm, Linear, ParamKind, ParamStore, WeightInit};
use crate::real::Real;
use crate::tensor::{Tensor, TensorError};

pub const HEAD_PREFIX: &str = "head.";

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum ModelError {
    #[error("invalid model configuration: {0}")]
    Config(String),
    #[error("input shape {got:?} does not match expected {expected:?}")]
    Input { expected: Vec<usize>, got: Vec<usize> },
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

fn config_err(msg: impl Into<String>) -> ModelError {
    ModelError::Config(msg.into())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Arch {
    #[serde(rename = "vggish")]
    VggIsh,
    Musicnn,
    Ast,
}

impl Arch {
    pub const ALL: [Arch; 3] = [Arch::VggIsh, Arch::Musicnn, Arch::Ast];

    pub fn name(self) -> &'static str {
        match self {
            Arch::VggIsh => "vggish",
            Arch::Musicnn => "musicnn",
            Arch::Ast => "ast",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s.to_ascii_lowercase().replace(['-', '_'], "").as_str() {
            "vggish" | "vgg" => Some(Arch::VggIsh),
            "musicnn" => Some(Arch::Musicnn),
            "ast" => Some(Arch::Ast),
            _ => None,
        }
    }

    pub fn default_chunk(self, dsp: &DspConfig) -> ChunkSpec {
        match self {
            Arch::VggIsh => ChunkSpec::vggish(dsp),
            Arch::Musicnn => ChunkSpec::musicnn(dsp),
            Arch::Ast => ChunkSpec::ast(dsp),
        }
    }
}

impl core::fmt::Display for Arch {
    fn fmt(&self, f: &mut core::fmt::Formatter<'_>) -> core::fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VggConfig {
    /// Unscaled channel count per conv block.
    pub channels: Vec<usize>,
    pub fc_dim: usize,
    /// Max-pool window after each block; `(1, 1)` means no pooling.
    pub pools: Vec<(usize, usize)>,
}

impl VggConfig {
    pub fn full(n_mels: usize, n_frames: usize) -> Result<Self, ModelError> {
        let channels = vec![128, 128, 256, 256, 256, 256, 512];
        let pools = Self::pool_schedule(n_mels, n_frames, channels.len())?;
        Ok(Self {
            channels,
            fc_dim: 512,
            pools,
        })
    }

    /// 2×2 where both axes allow it, otherwise 2×1 or 1×2 (frequency first),
    /// for the first `n_pools` blocks.
    pub fn pool_schedule(n_mels: usize, n_frames: usize, n_pools: usize) -> Result<Vec<(usize, usize)>, ModelError> {
        let (mut h, mut w) = (n_mels, n_frames);
        let mut out = Vec::with_capacity(n_pools);
        for i in 0..n_pools {
            let p = match (h >= 2, w >= 2) {
                (true, true) => (2, 2),
                (true, false) => (2, 1),
                (false, true) => (1, 2),
                (false, false) => {
                    return Err(config_err(format!(
                        "input {n_mels}x{n_frames} is too small for pooling layer {}",
                        i + 1
                    )))
                }
            };
            h /= p.0;
            w /= p.1;
            out.push(p);
        }
        Ok(out)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct VerticalFilter {
    /// Filter height as a fraction of `n_mels`.
    pub height_frac: f64,
    pub width: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MusicnnConfig {
    pub vertical: Vec<VerticalFilter>,
    pub vertical_channels: usize,
    pub horizontal_widths: Vec<usize>,
    pub horizontal_channels: usize,
    pub midend_channels: usize,
    pub midend_layers: usize,
    pub midend_kernel: usize,
    pub dense_dim: usize,
}

impl MusicnnConfig {
    pub fn full() -> Self {
        Self {
            vertical: vec![
                VerticalFilter {
                    height_frac: 0.4,
                    width: 7,
                },
                VerticalFilter {
                    height_frac: 0.7,
                    width: 7,
                },
            ],
            vertical_channels: 128,
            horizontal_widths: vec![32, 64, 128],
            horizontal_channels: 32,
            midend_channels: 64,
            midend_layers: 3,
            midend_kernel: 7,
            dense_dim: 200,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AstConfig {
    pub patch: usize,
    /// Unscaled embedding width.
    pub embed_dim: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub mlp_ratio: usize,
}

impl AstConfig {
    pub fn full() -> Self {
        Self {
            patch: 16,
            embed_dim: 768,
            n_layers: 12,
            n_heads: 12,
            mlp_ratio: 4,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "arch", rename_all = "snake_case")]
pub enum ArchConfig {
    #[serde(rename = "vggish")]
    VggIsh(VggConfig),
    Musicnn(MusicnnConfig),
    Ast(AstConfig),
}

/// Affine standardisation applied to log-mel input before the network.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct InputNorm {
    pub mean: f64,
    pub std: f64,
}

impl Default for InputNorm {
    fn default() -> Self {
        Self { mean: 0.0, std: 1.0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub arch: ArchConfig,
    pub n_mels: usize,
    pub chunk: ChunkSpec,
    pub n_tags: usize,
    pub width_scale: f64,
    pub dropout: f64,
    pub input_norm: InputNorm,
}

impl ModelConfig {
    /// Full-size configuration with the default chunk for `arch`.
    pub fn full(arch: Arch, n_tags: usize, dsp: &DspConfig) -> Result<Self, ModelError> {
        let chunk = arch.default_chunk(dsp);
        let arch_cfg = match arch {
            Arch::VggIsh => ArchConfig::VggIsh(VggConfig::full(dsp.n_mels, chunk.n_frames)?),
            Arch::Musicnn => ArchConfig::Musicnn(MusicnnConfig::full()),
            Arch::Ast => ArchConfig::Ast(AstConfig::full()),
        };
        let cfg = Self {
            arch: arch_cfg,
            n_mels: dsp.n_mels,
            chunk,
            n_tags,
            width_scale: 1.0,
            dropout: 0.5,
            input_norm: InputNorm::default(),
        };
        cfg.validate()?;
        Ok(cfg)
    }

    /// Same topology as [`ModelConfig::full`] with reduced widths, sized for
    /// single-core training.
    pub fn desk(arch: Arch, n_tags: usize, dsp: &DspConfig) -> Result<Self, ModelError> {
        let mut cfg = Self::full(arch, n_tags, dsp)?;
        match &mut cfg.arch {
            ArchConfig::VggIsh(_) => cfg.width_scale = 1.0 / 16.0,
            ArchConfig::Musicnn(_) => cfg.width_scale = 1.0 / 16.0,
            ArchConfig::Ast(a) => {
                cfg.width_scale = 1.0 / 32.0;
                a.n_heads = 2;
            }
        }
        cfg.dropout = 0.1;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn kind(&self) -> Arch {
        match self.arch {
            ArchConfig::VggIsh(_) => Arch::VggIsh,
            ArchConfig::Musicnn(_) => Arch::Musicnn,
            ArchConfig::Ast(_) => Arch::Ast,
        }
    }

    pub fn scaled(&self, c: usize) -> usize {
        (libm::round(c as f64 * self.width_scale) as usize).max(1)
    }

    pub fn input_shape(&self, batch: usize) -> [usize; 4] {
        [batch, 1, self.n_mels, self.chunk.n_frames]
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        if self.n_tags == 0 {
            return Err(config_err("n_tags must be at least 1"));
        }
        if !(self.width_scale > 0.0 && self.width_scale <= 1.0) {
            return Err(config_err(format!("width_scale {} outside (0, 1]", self.width_scale)));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(config_err(format!("dropout {} outside [0, 1)", self.dropout)));
        }
        if self.n_mels == 0 || self.chunk.n_frames == 0 {
            return Err(config_err("empty input"));
        }
        if !(self.input_norm.std > 0.0) {
            return Err(config_err("input_norm.std must be positive"));
        }
        match &self.arch {
            ArchConfig::VggIsh(v) => {
                if v.channels.is_empty() || v.pools.len() != v.channels.len() {
                    return Err(config_err("vggish needs one pool entry per conv block"));
                }
                let (mut h, mut w) = (self.n_mels, self.chunk.n_frames);
                for (i, &(ph, pw)) in v.pools.iter().enumerate() {
                    if ph == 0 || pw == 0 || h < ph || w < pw {
                        return Err(config_err(format!(
                            "input {}x{} cannot survive pooling layer {}",
                            self.n_mels,
                            self.chunk.n_frames,
                            i + 1
                        )));
                    }
                    h /= ph;
                    w /= pw;
                }
            }
            ArchConfig::Musicnn(m) => {
                if m.vertical.is_empty() && m.horizontal_widths.is_empty() {
                    return Err(config_err("musicnn needs at least one front-end filter"));
                }
                for f in &m.vertical {
                    let h = self.vertical_height(f);
                    if h > self.n_mels || f.width == 0 {
                        return Err(config_err(format!("vertical filter {h}x{} exceeds input", f.width)));
                    }
                }
                if m.midend_kernel == 0 || m.horizontal_widths.contains(&0) {
                    return Err(config_err("zero-width musicnn filter"));
                }
            }
            ArchConfig::Ast(a) => {
                if a.patch == 0 || self.n_mels < a.patch || self.chunk.n_frames < a.patch {
                    return Err(config_err(format!(
                        "{}x{} input is smaller than one {}x{} patch",
                        self.n_mels, self.chunk.n_frames, a.patch, a.patch
                    )));
                }
                let e = self.scaled(a.embed_dim);
                if a.n_heads == 0 || e % a.n_heads != 0 {
                    return Err(config_err(format!(
                        "embed_dim {e} not divisible by {} heads",
                        a.n_heads
                    )));
                }
                if a.n_layers == 0 || a.mlp_ratio == 0 {
                    return Err(config_err("ast needs at least one layer and a positive mlp ratio"));
                }
            }
        }
        Ok(())
    }

    fn vertical_height(&self, f: &VerticalFilter) -> usize {
        (libm::round(f.height_frac * self.n_mels as f64) as usize).max(1)
    }

    /// AST patch grid `(rows, cols)`.
    pub fn patch_grid(&self) -> Option<(usize, usize)> {
        match &self.arch {
            ArchConfig::Ast(a) => Some((self.n_mels / a.patch, self.chunk.n_frames / a.patch)),
            _ => None,
        }
    }

    /// Width of the representation feeding the output layer.
    pub fn backbone_width(&self) -> usize {
        match &self.arch {
            ArchConfig::VggIsh(v) => self.scaled(v.fc_dim),
            ArchConfig::Musicnn(m) => self.scaled(m.dense_dim),
            ArchConfig::Ast(a) => self.scaled(a.embed_dim),
        }
    }
}

pub fn is_output_param(name: &str) -> bool {
    name.starts_with(HEAD_PREFIX)
}

struct VggNet {
    blocks: Vec<(Conv2d, BatchNorm, (usize, usize))>,
    fc: Linear,
    fc_bn: BatchNorm,
    head: Linear,
}

struct MusicnnNet {
    vertical: Vec<(Conv2d, BatchNorm)>,
    horizontal: Vec<(Conv2d, BatchNorm)>,
    midend: Vec<(Conv2d, BatchNorm)>,
    dense: Linear,
    dense_bn: BatchNorm,
    head: Linear,
}

struct AstBlock {
    norm1: LayerNorm,
    q: Linear,
    k: Linear,
    v: Linear,
    proj: Linear,
    norm2: LayerNorm,
    fc1: Linear,
    fc2: Linear,
}

struct AstNet {
    patch_embed: Conv2d,
    cls_token: crate::nn::ParamId,
    pos_embed: crate::nn::ParamId,
    blocks: Vec<AstBlock>,
    norm: LayerNorm,
    head: Linear,
    heads: usize,
    patch: usize,
}

enum Net {
    Vgg(VggNet),
    Musicnn(MusicnnNet),
    Ast(AstNet),
}

/// A network together with its parameters.
pub struct Model<T: Real> {
    pub config: ModelConfig,
    pub params: ParamStore<T>,
    net: Net,
}

impl<T: Real> Clone for Model<T> {
    fn clone(&self) -> Self {
        let mut m = Model::build(&self.config, 0).expect("config already validated");
        m.params = self.params.clone();
        m
    }
}

fn same_pad(w: usize) -> (usize, usize) {
    let l = (w - 1) / 2;
    (l, w - 1 - l)
}

impl<T: Real> Model<T> {
    /// Builds a freshly initialised network; all randomness derives from `seed`.
    pub fn build(cfg: &ModelConfig, seed: u64) -> Result<Self, ModelError> {
        cfg.validate()?;
        let mut store = ParamStore::new();
        let mut init = Init::new(seed);
        let net = match &cfg.arch {
            ArchConfig::VggIsh(v) => Net::Vgg(Self::build_vgg(cfg, v, &mut store, &mut init)),
            ArchConfig::Musicnn(m) => Net::Musicnn(Self::build_musicnn(cfg, m, &mut store, &mut init)),
            ArchConfig::Ast(a) => Net::Ast(Self::build_ast(cfg, a, &mut store, &mut init)),
        };
        Ok(Self {
            config: cfg.clone(),
            params: store,
            net,
        })
    }

    fn build_vgg(cfg: &ModelConfig, v: &VggConfig, store: &mut ParamStore<T>, init: &mut Init) -> VggNet {
        let mut inp = 1;
        let mut blocks = Vec::new();
        for (i, (&c, &pool)) in v.channels.iter().zip(&v.pools).enumerate() {
            let out = cfg.scaled(c);
            let conv = Conv2d::new(
                store,
                init,
                &format!("conv{i}"),
                inp,
                out,
                (3, 3),
                Conv2dSpec::same(3, 3),
                false,
                WeightInit::He,
            );
            let bn = BatchNorm::new(store, &format!("bn{i}"), out);
            blocks.push((conv, bn, pool));
            inp = out;
        }
        let fc_dim = cfg.scaled(v.fc_dim);
        let fc = Linear::new(store, init, "fc1", inp, fc_dim, WeightInit::He);
        let fc_bn = BatchNorm::new(store, "fc1_bn", fc_dim);
        let head = Linear::new(store, init, "head", fc_dim, cfg.n_tags, WeightInit::Xavier);
        VggNet {
            blocks,
            fc,
            fc_bn,
            head,
        }
    }

    fn build_musicnn(cfg: &ModelConfig, m: &MusicnnConfig, store: &mut ParamStore<T>, init: &mut Init) -> MusicnnNet {
        let vc = cfg.scaled(m.vertical_channels);
        let hc = cfg.scaled(m.horizontal_channels);
        let mc = cfg.scaled(m.midend_channels);
        let mut vertical = Vec::new();
        for (i, f) in m.vertical.iter().enumerate() {
            let h = cfg.vertical_height(f);
            let (l, r) = same_pad(f.width);
            let spec = Conv2dSpec {
                stride: (1, 1),
                pad: [0, 0, l, r],
            };
            let name = format!("front.vertical{i}");
            let conv = Conv2d::new(
                store,
                init,
                &format!("{name}.conv"),
                1,
                vc,
                (h, f.width),
                spec,
                false,
                WeightInit::He,
            );
            vertical.push((conv, BatchNorm::new(store, &format!("{name}.bn"), vc)));
        }
        let mut horizontal = Vec::new();
        for (i, &w) in m.horizontal_widths.iter().enumerate() {
            let (l, r) = same_pad(w);
            let spec = Conv2dSpec {
                stride: (1, 1),
                pad: [0, 0, l, r],
            };
            let name = format!("front.horizontal{i}");
            let conv = Conv2d::new(
                store,
                init,
                &format!("{name}.conv"),
                1,
                hc,
                (1, w),
                spec,
                false,
                WeightInit::He,
            );
            horizontal.push((conv, BatchNorm::new(store, &format!("{name}.bn"), hc)));
        }
        let front = vc * m.vertical.len() + hc * m.horizontal_widths.len();
        let mut midend = Vec::new();
        let mut inp = front;
        let (l, r) = same_pad(m.midend_kernel);
        for i in 0..m.midend_layers {
            let spec = Conv2dSpec {
                stride: (1, 1),
                pad: [0, 0, l, r],
            };
            let name = format!("mid{i}");
            let conv = Conv2d::new(
                store,
                init,
                &format!("{name}.conv"),
                inp,
                mc,
                (1, m.midend_kernel),
                spec,
                false,
                WeightInit::He,
            );
            midend.push((conv, BatchNorm::new(store, &format!("{name}.bn"), mc)));
            inp = mc;
        }
        let pooled = 2 * (front + mc * m.midend_layers);
        let dd = cfg.scaled(m.dense_dim);
        let dense = Linear::new(store, init, "back.dense", pooled, dd, WeightInit::He);
        let dense_bn = BatchNorm::new(store, "back.dense_bn", dd);
        let head = Linear::new(store, init, "head", dd, cfg.n_tags, WeightInit::Xavier);
        MusicnnNet {
            vertical,
            horizontal,
            midend,
            dense,
            dense_bn,
            head,
        }
    }

    fn build_ast(cfg: &ModelConfig, a: &AstConfig, store: &mut ParamStore<T>, init: &mut Init) -> AstNet {
        let e = cfg.scaled(a.embed_dim);
        let hidden = e * a.mlp_ratio;
        let (gh, gw) = cfg.patch_grid().expect("ast config");
        let patch_embed = Conv2d::new(
            store,
            init,
            "patch_embed",
            1,
            e,
            (a.patch, a.patch),
            Conv2dSpec::strided(a.patch, a.patch),
            true,
            WeightInit::Xavier,
        );
        let cls_token = store.add("cls_token", ParamKind::Trainable, init.normal(&[1, 1, e], 0.02));
        let pos_embed = store.add("pos_embed", ParamKind::Trainable, init.normal(&[gh * gw + 1, e], 0.02));
        let blocks = (0..a.n_layers)
            .map(|l| {
                let n = format!("blocks.{l}");
                AstBlock {
                    norm1: LayerNorm::new(store, &format!("{n}.norm1"), e),
                    q: Linear::new(store, init, &format!("{n}.attn.q"), e, e, WeightInit::Xavier),
                    k: Linear::new(store, init, &format!("{n}.attn.k"), e, e, WeightInit::Xavier),
                    v: Linear::new(store, init, &format!("{n}.attn.v"), e, e, WeightInit::Xavier),
                    proj: Linear::new(store, init, &format!("{n}.attn.proj"), e, e, WeightInit::Xavier),
                    norm2: LayerNorm::new(store, &format!("{n}.norm2"), e),
                    fc1: Linear::new(store, init, &format!("{n}.mlp.fc1"), e, hidden, WeightInit::Xavier),
                    fc2: Linear::new(store, init, &format!("{n}.mlp.fc2"), hidden, e, WeightInit::Xavier),
                }
            })
            .collect();
        let norm = LayerNorm::new(store, "norm", e);
        let head = Linear::new(store, init, "head", e, cfg.n_tags, WeightInit::Xavier);
        AstNet {
            patch_embed,
            cls_token,
            pos_embed,
            blocks,
            norm,
            head,
            heads: a.n_heads,
            patch: a.patch,
        }
    }

    /// Records the network on `f` for a `[B, 1, n_mels, n_frames]` batch and
    /// returns `[B, n_tags]` logits.
    pub fn forward(&self, f: &mut Forward<'_, T>, batch: &Tensor<T>) -> Result<Var, ModelError> {
        let b = batch.shape().first().copied().unwrap_or(0);
        let expected = self.config.input_shape(b);
        if batch.shape() != expected || b == 0 {
            return Err(ModelError::Input {
                expected: expected.to_vec(),
                got: batch.shape().to_vec(),
            });
        }
        let norm = self.config.input_norm;
        let (mean, inv) = (T::from_f64(norm.mean), T::from_f64(1.0 / norm.std));
        let data = batch.data().iter().map(|&v| (v - mean) * inv).collect();
        let x = f.input(Tensor::new(batch.shape().to_vec(), data)?);
        let out = match &self.net {
            Net::Vgg(n) => vgg_forward(n, f, x, self.config.dropout),
            Net::Musicnn(n) => musicnn_forward(n, f, x, self.config.dropout),
            Net::Ast(n) => ast_forward(n, f, x),
        }?;
        Ok(out)
    }

    /// Inference-mode logits.
    pub fn logits(&self, batch: &Tensor<T>) -> Result<Tensor<T>, ModelError> {
        let mut f = Forward::new(&self.params, false, 0);
        let y = self.forward(&mut f, batch)?;
        Ok(f.graph.value(y).clone())
    }

    pub fn param_count(&self) -> usize {
        self.params.trainable_count()
    }

    /// Freezes everything except the output layer.
    pub fn freeze_backbone(&mut self) {
        self.params.freeze_except(is_output_param);
    }
}

fn vgg_forward<T: Real>(n: &VggNet, f: &mut Forward<'_, T>, mut x: Var, dropout: f64) -> Result<Var, TensorError> {
    for (conv, bn, pool) in &n.blocks {
        x = conv.forward(f, x)?;
        x = bn.forward(f, x)?;
        x = f.graph.relu(x)?;
        if *pool != (1, 1) {
            x = f.graph.maxpool2d(x, *pool)?;
        }
    }
    x = f.graph.global_pool(x, PoolKind::Max)?;
    x = n.fc.forward(f, x)?;
    x = n.fc_bn.forward(f, x)?;
    x = f.graph.relu(x)?;
    x = f.dropout(x, dropout)?;
    n.head.forward(f, x)
}

fn musicnn_forward<T: Real>(n: &MusicnnNet, f: &mut Forward<'_, T>, x: Var, dropout: f64) -> Result<Var, TensorError> {
    let mut front = Vec::new();
    for (conv, bn) in &n.vertical {
        let mut y = conv.forward(f, x)?;
        y = bn.forward(f, y)?;
        y = f.graph.relu(y)?;
        front.push(f.graph.pool_axis(y, 2, PoolKind::Max)?);
    }
    if !n.horizontal.is_empty() {
        let pooled = f.graph.pool_axis(x, 2, PoolKind::Mean)?;
        for (conv, bn) in &n.horizontal {
            let mut y = conv.forward(f, pooled)?;
            y = bn.forward(f, y)?;
            front.push(f.graph.relu(y)?);
        }
    }
    let front = f.graph.concat(&front, 1)?;
    let mut features = vec![front];
    let mut h = front;
    for (i, (conv, bn)) in n.midend.iter().enumerate() {
        let mut y = conv.forward(f, h)?;
        y = bn.forward(f, y)?;
        y = f.graph.relu(y)?;
        if i > 0 {
            y = f.graph.add(y, h)?;
        }
        features.push(y);
        h = y;
    }
    let all = f.graph.concat(&features, 1)?;
    let mx = f.graph.pool_axis(all, 3, PoolKind::Max)?;
    let mean = f.graph.pool_axis(all, 3, PoolKind::Mean)?;
    let pooled = f.graph.concat(&[mx, mean], 1)?;
    let shape = f.graph.shape(pooled).to_vec();
    let mut y = f.graph.reshape(pooled, &[shape[0], shape[1]])?;
    y = n.dense.forward(f, y)?;
    y = n.dense_bn.forward(f, y)?;
    y = f.graph.relu(y)?;
    y = f.dropout(y, dropout)?;
    n.head.forward(f, y)
}

fn ast_forward<T: Real>(n: &AstNet, f: &mut Forward<'_, T>, mut x: Var) -> Result<Var, TensorError> {
    let shape = f.graph.shape(x).to_vec();
    let (b, p) = (shape[0], n.patch);
    let (h_used, w_used) = ((shape[2] / p) * p, (shape[3] / p) * p);
    if h_used != shape[2] {
        x = f.graph.slice_axis(x, 2, 0, h_used)?;
    }
    if w_used != shape[3] {
        x = f.graph.slice_axis(x, 3, 0, w_used)?;
    }
    let mut t = n.patch_embed.forward(f, x)?;
    let es = f.graph.shape(t).to_vec();
    let (e, np) = (es[1], es[2] * es[3]);
    t = f.graph.reshape(t, &[b, e, np])?;
    t = f.graph.permute(t, &[0, 2, 1])?;
    let cls = f.param(n.cls_token);
    let cls = f.graph.repeat_leading(cls, b)?;
    t = f.graph.concat(&[cls, t], 1)?;
    let pos = f.param(n.pos_embed);
    t = f.graph.embedding_add(t, pos)?;
    for blk in &n.blocks {
        let h = blk.norm1.forward(f, t)?;
        let q = blk.q.forward(f, h)?;
        let k = blk.k.forward(f, h)?;
        let v = blk.v.forward(f, h)?;
        let a = f.graph.attention(q, k, v, n.heads)?;
        let a = blk.proj.forward(f, a)?;
        t = f.graph.add(t, a)?;
        let h = blk.norm2.forward(f, t)?;
        let h = blk.fc1.forward(f, h)?;
        let h = f.graph.gelu(h)?;
        let h = blk.fc2.forward(f, h)?;
        t = f.graph.add(t, h)?;
    }
    t = n.norm.forward(f, t)?;
    let c = f.graph.slice_axis(t, 1, 0, 1)?;
    let c = f.graph.reshape(c, &[b, e])?;
    n.head.forward(f, c)
}

/// Human-readable summary such as `vggish(scale=0.0625, tags=8)`.
pub fn describe(cfg: &ModelConfig) -> String {
    let mut s = cfg.kind().name().to_string();
    s.push_str(&format!(
        "(scale={}, tags={}, frames={})",
        cfg.width_scale, cfg.n_tags, cfg.chunk.n_frames
    ));
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn full_vgg_pools_fit_default_chunk() {
        let dsp = DspConfig::default();
        let cfg = ModelConfig::full(Arch::VggIsh, 50, &dsp).unwrap();
        let ArchConfig::VggIsh(v) = &cfg.arch else {
            unreachable!()
        };
        assert_eq!(v.pools, vec![(2, 2); 7]);
        assert!(VggConfig::pool_schedule(4, 4, 3).is_err());
        assert_eq!(VggConfig::pool_schedule(8, 2, 3).unwrap(), vec![(2, 2), (2, 1), (2, 1)]);
    }

    #[test]
    fn ast_patch_grid() {
        let dsp = DspConfig::default();
        let cfg = ModelConfig::full(Arch::Ast, 50, &dsp).unwrap();
        assert_eq!(cfg.patch_grid(), Some((8, 31)));
        let mut bad = cfg.clone();
        bad.chunk.n_frames = 15;
        assert!(matches!(bad.validate(), Err(ModelError::Config(_))));
    }
}
