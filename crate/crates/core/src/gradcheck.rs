//! Central finite-difference verification of [`Graph`] gradients.
//!
//! [`check`] rebuilds the graph for every perturbed coordinate, so the
//! closure must be a pure function of its inputs (dropout seeds fixed).
//! [`op_suite`] lists one randomized case per differentiable op.

use alloc::boxed::Box;
use alloc::vec;
use alloc::vec::Vec;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{BatchNormMode, Conv2dSpec, Graph, PoolKind, Var};
use crate::dsp::ChunkSpec;
use crate::models::{
    Arch, ArchConfig, AstConfig, InputNorm, Model, ModelConfig, ModelError, MusicnnConfig, VerticalFilter, VggConfig,
};
use crate::nn::{Forward, ParamKind};
use crate::tensor::{Tensor, TensorError};

pub const EPS: f64 = 1e-5;
pub const TOLERANCE: f64 = 1e-4;
/// Below this magnitude errors are measured absolutely.
const FLOOR: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    pub checked: usize,
    /// Coordinates left out because a kink lay within one step.
    pub skipped: usize,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.max_rel_err <= TOLERANCE
    }

    pub fn merge(self, other: Self) -> Self {
        Self {
            max_rel_err: self.max_rel_err.max(other.max_rel_err),
            checked: self.checked + other.checked,
            skipped: self.skipped + other.skipped,
        }
    }
}

pub fn rel_err(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(FLOOR)
}

fn loss_of<F>(inputs: &[Tensor<f64>], f: &F) -> Result<f64, TensorError>
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var, TensorError>,
{
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.param(t.clone())).collect();
    let loss = f(&mut g, &vars)?;
    Ok(g.value(loss).data()[0])
}

/// Compares analytic gradients of `f` with respect to every input against
/// central differences. Inputs larger than `max_per_input` are sampled.
pub fn check<F>(inputs: &[Tensor<f64>], max_per_input: usize, seed: u64, f: F) -> Result<GradCheckReport, TensorError>
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var, TensorError>,
{
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.param(t.clone())).collect();
    let loss = f(&mut g, &vars)?;
    let grads = g.backward(loss)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut report = GradCheckReport {
        max_rel_err: 0.0,
        checked: 0,
        skipped: 0,
    };
    let mut work: Vec<Tensor<f64>> = inputs.to_vec();
    for (i, &v) in vars.iter().enumerate() {
        let n = inputs[i].numel();
        let analytic: Vec<f64> = grads.get(v).map(|s| s.to_vec()).unwrap_or_else(|| vec![0.0; n]);
        let coords: Vec<usize> = if n <= max_per_input {
            (0..n).collect()
        } else {
            (0..max_per_input).map(|_| rng.random_range(0..n)).collect()
        };
        for j in coords {
            let orig = inputs[i].data()[j];
            work[i].data_mut()[j] = orig + EPS;
            let up = loss_of(&work, &f)?;
            work[i].data_mut()[j] = orig - EPS;
            let down = loss_of(&work, &f)?;
            work[i].data_mut()[j] = orig;
            let numeric = (up - down) / (2.0 * EPS);
            report.max_rel_err = report.max_rel_err.max(rel_err(analytic[j], numeric));
            report.checked += 1;
        }
    }
    Ok(report)
}

/// `Σ wᵢ·yᵢ` with fixed pseudo-random weights, so every output coordinate
/// contributes a distinct gradient.
pub fn weighted_sum(g: &mut Graph<f64>, y: Var, seed: u64) -> Result<Var, TensorError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    let shape = g.shape(y).to_vec();
    let w = g.input(Tensor::from_fn(&shape, |_| rng.random_range(-1.0..1.0)));
    let p = g.mul(y, w)?;
    g.sum(p)
}

pub fn random_tensor(rng: &mut ChaCha8Rng, shape: &[usize], scale: f64) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.random_range(-scale..scale))
}

/// Shuffled, pairwise-separated nonzero values in `(-1, 1)`: no ties or
/// zeros within a finite-difference step, so max and relu stay smooth.
pub fn separated_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    let n = crate::tensor::numel(shape);
    let step = 2.0 / n as f64;
    let mut vals: Vec<f64> = (0..n).map(|i| -1.0 + (i as f64 + 0.5) * step).collect();
    for i in (1..n).rev() {
        vals.swap(i, rng.random_range(0..=i));
    }
    Tensor::new(shape.to_vec(), vals).expect("shape matches")
}

type CaseFn = Box<dyn Fn(u64) -> Result<GradCheckReport, TensorError>>;

pub struct OpCase {
    pub name: &'static str,
    pub run: CaseFn,
}

fn case<F>(name: &'static str, shapes: Vec<Vec<usize>>, f: F) -> OpCase
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var, TensorError> + Clone + 'static,
{
    build_case(name, shapes, false, f)
}

fn kinked_case<F>(name: &'static str, shapes: Vec<Vec<usize>>, f: F) -> OpCase
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var, TensorError> + Clone + 'static,
{
    build_case(name, shapes, true, f)
}

fn build_case<F>(name: &'static str, shapes: Vec<Vec<usize>>, separated: bool, f: F) -> OpCase
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var, TensorError> + Clone + 'static,
{
    OpCase {
        name,
        run: Box::new(move |seed| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let inputs: Vec<Tensor<f64>> = shapes
                .iter()
                .map(|s| {
                    if separated {
                        separated_tensor(&mut rng, s)
                    } else {
                        random_tensor(&mut rng, s, 1.0)
                    }
                })
                .collect();
            let f = f.clone();
            check(&inputs, 64, seed, move |g, v| {
                let y = f(g, v)?;
                weighted_sum(g, y, seed)
            })
        }),
    }
}

/// One randomized case per differentiable op.
pub fn op_suite() -> Vec<OpCase> {
    let s = |d: &[usize]| d.to_vec();
    vec![
        case("add", vec![s(&[3, 4]), s(&[3, 4])], |g, v| g.add(v[0], v[1])),
        case("mul", vec![s(&[3, 4]), s(&[3, 4])], |g, v| g.mul(v[0], v[1])),
        case("scale", vec![s(&[5])], |g, v| g.scale(v[0], -1.7)),
        case("sum", vec![s(&[2, 3])], |g, v| {
            let y = g.mul(v[0], v[0])?;
            g.sum(y)
        }),
        case("mean", vec![s(&[2, 3])], |g, v| {
            let y = g.mul(v[0], v[0])?;
            g.mean(y)
        }),
        case("matmul", vec![s(&[3, 5]), s(&[5, 4])], |g, v| g.matmul(v[0], v[1])),
        case("linear", vec![s(&[2, 3, 5]), s(&[4, 5]), s(&[4])], |g, v| {
            g.linear(v[0], v[1], Some(v[2]))
        }),
        case("conv2d", vec![s(&[2, 2, 6, 7]), s(&[3, 2, 3, 2]), s(&[3])], |g, v| {
            g.conv2d(v[0], v[1], Some(v[2]), Conv2dSpec::same(3, 2))
        }),
        case("conv2d_strided", vec![s(&[1, 2, 8, 8]), s(&[2, 2, 4, 4])], |g, v| {
            g.conv2d(v[0], v[1], None, Conv2dSpec::strided(4, 4))
        }),
        kinked_case("maxpool2d", vec![s(&[2, 2, 6, 5])], |g, v| g.maxpool2d(v[0], (2, 2))),
        kinked_case("pool_max", vec![s(&[2, 5, 3])], |g, v| {
            g.pool_axis(v[0], 1, PoolKind::Max)
        }),
        case("pool_mean", vec![s(&[2, 5, 3])], |g, v| {
            g.pool_axis(v[0], 2, PoolKind::Mean)
        }),
        kinked_case("global_pool", vec![s(&[2, 3, 4, 5])], |g, v| {
            g.global_pool(v[0], PoolKind::Max)
        }),
        kinked_case("relu", vec![s(&[4, 5])], |g, v| g.relu(v[0])),
        case("gelu", vec![s(&[4, 5])], |g, v| g.gelu(v[0])),
        case("sigmoid", vec![s(&[4, 5])], |g, v| g.sigmoid(v[0])),
        case("softmax", vec![s(&[3, 4, 2])], |g, v| g.softmax(v[0], 1)),
        case("layer_norm", vec![s(&[3, 6]), s(&[6]), s(&[6])], |g, v| {
            g.layer_norm(v[0], v[1], v[2])
        }),
        case("batch_norm_train", vec![s(&[3, 2, 4]), s(&[2]), s(&[2])], |g, v| {
            g.batch_norm(v[0], v[1], v[2], BatchNormMode::Train { key: 0 })
        }),
        case("batch_norm_eval", vec![s(&[3, 2, 4]), s(&[2]), s(&[2])], |g, v| {
            g.batch_norm(
                v[0],
                v[1],
                v[2],
                BatchNormMode::Eval {
                    running_mean: &[0.1, -0.3],
                    running_var: &[0.8, 1.7],
                },
            )
        }),
        case("dropout", vec![s(&[4, 6])], |g, v| g.dropout(v[0], 0.3, 11)),
        case("concat", vec![s(&[2, 3, 2]), s(&[2, 1, 2]), s(&[2, 2, 2])], |g, v| {
            g.concat(v, 1)
        }),
        case("reshape", vec![s(&[2, 6])], |g, v| {
            let y = g.reshape(v[0], &[3, 4])?;
            g.mul(y, y)
        }),
        case("transpose", vec![s(&[2, 3, 4])], |g, v| {
            let y = g.permute(v[0], &[2, 0, 1])?;
            g.mul(y, y)
        }),
        case("embedding_add", vec![s(&[3, 4, 2]), s(&[4, 2])], |g, v| {
            g.embedding_add(v[0], v[1])
        }),
        case(
            "attention",
            vec![s(&[2, 5, 6]), s(&[2, 5, 6]), s(&[2, 5, 6])],
            |g, v| g.attention(v[0], v[1], v[2], 2),
        ),
        case("repeat_leading", vec![s(&[1, 3])], |g, v| g.repeat_leading(v[0], 4)),
        case("slice", vec![s(&[2, 5, 3])], |g, v| g.slice_axis(v[0], 1, 1, 3)),
        OpCase {
            name: "bce_with_logits",
            run: Box::new(|seed| {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                let x = random_tensor(&mut rng, &[3, 4], 3.0);
                let t: Vec<f64> = (0..12).map(|_| if rng.random::<bool>() { 1.0 } else { 0.0 }).collect();
                check(&[x], 64, seed, move |g, v| g.bce_with_logits(v[0], &t))
            }),
        },
    ]
}

/// A few-hundred-parameter instance of `arch` on an 8-band input, small
/// enough for exhaustive finite differences. The AST input width is not a
/// multiple of the patch, so the trimming path is exercised too.
pub fn tiny_config(arch: Arch, n_tags: usize) -> ModelConfig {
    let (n_mels, n_frames) = (8, 9);
    let arch_cfg = match arch {
        Arch::VggIsh => ArchConfig::VggIsh(VggConfig {
            channels: vec![2, 3, 3],
            fc_dim: 4,
            pools: VggConfig::pool_schedule(n_mels, n_frames, 3).expect("8x9 survives 3 pools"),
        }),
        Arch::Musicnn => ArchConfig::Musicnn(MusicnnConfig {
            vertical: vec![VerticalFilter {
                height_frac: 0.5,
                width: 3,
            }],
            vertical_channels: 2,
            horizontal_widths: vec![3],
            horizontal_channels: 2,
            midend_channels: 3,
            midend_layers: 2,
            midend_kernel: 3,
            dense_dim: 4,
        }),
        Arch::Ast => ArchConfig::Ast(AstConfig {
            patch: 4,
            embed_dim: 8,
            n_layers: 2,
            n_heads: 2,
            mlp_ratio: 2,
        }),
    };
    ModelConfig {
        arch: arch_cfg,
        n_mels,
        chunk: ChunkSpec {
            duration_sec: 0.0,
            n_frames,
        },
        n_tags,
        width_scale: 1.0,
        dropout: 0.2,
        input_norm: InputNorm { mean: 0.1, std: 0.9 },
    }
}

fn model_loss(model: &Model<f64>, batch: &Tensor<f64>, targets: &[f64], seed: u64) -> Result<f64, ModelError> {
    let mut f = Forward::new(&model.params, true, seed);
    let y = model.forward(&mut f, batch)?;
    let loss = f.graph.bce_with_logits(y, targets)?;
    Ok(f.graph.value(loss).data()[0])
}

/// Finite-difference check of every trainable parameter of `model` under a
/// training-mode BCE loss (fixed dropout seed). Coordinates whose one-sided
/// slopes disagree by more than 1e-3 relative sit on a relu or max-pool kink
/// and are skipped rather than compared.
pub fn check_model(
    model: &Model<f64>,
    batch: &Tensor<f64>,
    targets: &[f64],
    max_per_param: usize,
    seed: u64,
) -> Result<GradCheckReport, ModelError> {
    let mut f = Forward::new(&model.params, true, seed);
    let y = model.forward(&mut f, batch)?;
    let loss = f.graph.bce_with_logits(y, targets)?;
    let base = f.graph.value(loss).data()[0];
    let (grads, _) = f.backward(loss)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut report = GradCheckReport {
        max_rel_err: 0.0,
        checked: 0,
        skipped: 0,
    };
    let mut work = model.clone();
    let ids: Vec<_> = model
        .params
        .iter()
        .filter(|(_, p)| p.kind == ParamKind::Trainable && !p.frozen)
        .map(|(id, _)| id)
        .collect();
    for id in ids {
        let n = model.params.tensor(id).numel();
        let analytic = grads.get(id).map(|g| g.to_vec()).unwrap_or_else(|| vec![0.0; n]);
        let coords: Vec<usize> = if n <= max_per_param {
            (0..n).collect()
        } else {
            (0..max_per_param).map(|_| rng.random_range(0..n)).collect()
        };
        for j in coords {
            let orig = model.params.tensor(id).data()[j];
            work.params.get_mut(id).tensor.data_mut()[j] = orig + EPS;
            let up = model_loss(&work, batch, targets, seed)?;
            work.params.get_mut(id).tensor.data_mut()[j] = orig - EPS;
            let down = model_loss(&work, batch, targets, seed)?;
            work.params.get_mut(id).tensor.data_mut()[j] = orig;
            let (fwd, bwd) = ((up - base) / EPS, (base - down) / EPS);
            if rel_err(fwd, bwd) > 1e-3 {
                report.skipped += 1;
                continue;
            }
            let numeric = (up - down) / (2.0 * EPS);
            report.max_rel_err = report.max_rel_err.max(rel_err(analytic[j], numeric));
            report.checked += 1;
        }
    }
    Ok(report)
}
