use mtag_core::dsp::DspConfig;
use mtag_core::gradcheck::{check_model, tiny_config, TOLERANCE};
use mtag_core::models::{is_output_param, Arch, ArchConfig, Model, ModelConfig, ModelError};
use mtag_core::nn::ParamKind;
use mtag_core::tensor::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn desk(arch: Arch) -> ModelConfig {
    ModelConfig::desk(arch, 8, &DspConfig::default()).unwrap()
}

fn random_batch(cfg: &ModelConfig, b: usize, seed: u64) -> Tensor<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_fn(&cfg.input_shape(b), |_| rng.random_range(-1.0..1.0))
}

/// Trainable-parameter count written out layer by layer from the config.
fn expected_params(cfg: &ModelConfig) -> usize {
    let s = |c: usize| cfg.scaled(c);
    let bn = |c: usize| 2 * c;
    let tags = cfg.n_tags;
    match &cfg.arch {
        ArchConfig::VggIsh(v) => {
            let mut total = 0;
            let mut inp = 1;
            for &c in &v.channels {
                total += 9 * inp * s(c) + bn(s(c));
                inp = s(c);
            }
            let fc = s(v.fc_dim);
            total + inp * fc + fc + bn(fc) + fc * tags + tags
        }
        ArchConfig::Musicnn(m) => {
            let (vc, hc, mc, dd) = (
                s(m.vertical_channels),
                s(m.horizontal_channels),
                s(m.midend_channels),
                s(m.dense_dim),
            );
            let mut total = 0;
            for f in &m.vertical {
                let h = ((f.height_frac * cfg.n_mels as f64).round() as usize).max(1);
                total += h * f.width * vc + bn(vc);
            }
            for &w in &m.horizontal_widths {
                total += w * hc + bn(hc);
            }
            let front = vc * m.vertical.len() + hc * m.horizontal_widths.len();
            let mut inp = front;
            for _ in 0..m.midend_layers {
                total += m.midend_kernel * inp * mc + bn(mc);
                inp = mc;
            }
            let pooled = 2 * (front + mc * m.midend_layers);
            total + pooled * dd + dd + bn(dd) + dd * tags + tags
        }
        ArchConfig::Ast(a) => {
            let e = s(a.embed_dim);
            let hidden = e * a.mlp_ratio;
            let (gh, gw) = (cfg.n_mels / a.patch, cfg.chunk.n_frames / a.patch);
            let block = 2 * e + 4 * (e * e + e) + 2 * e + (e * hidden + hidden) + (hidden * e + e);
            a.patch * a.patch * e + e + e + (gh * gw + 1) * e + a.n_layers * block + 2 * e + e * tags + tags
        }
    }
}

#[test]
fn desk_parameter_counts() {
    let golden = [(Arch::VggIsh, 14_928), (Arch::Musicnn, 10_287), (Arch::Ast, 99_104)];
    for (arch, count) in golden {
        let cfg = desk(arch);
        let model = Model::<f32>::build(&cfg, 0).unwrap();
        assert_eq!(model.param_count(), expected_params(&cfg), "{arch}");
        assert_eq!(model.param_count(), count, "{arch}");
    }
}

#[test]
fn tiny_parameter_counts_match_formula() {
    for arch in Arch::ALL {
        let cfg = tiny_config(arch, 3);
        let model = Model::<f64>::build(&cfg, 0).unwrap();
        assert_eq!(model.param_count(), expected_params(&cfg), "{arch}");
    }
}

#[test]
fn desk_and_full_share_parameter_names() {
    let dsp = DspConfig::default();
    for arch in Arch::ALL {
        let full = Model::<f32>::build(&ModelConfig::full(arch, 8, &dsp).unwrap(), 0).unwrap();
        let small = Model::<f32>::build(&desk(arch), 0).unwrap();
        let names = |m: &Model<f32>| m.params.manifest().into_iter().map(|(n, _)| n).collect::<Vec<_>>();
        assert_eq!(names(&full), names(&small), "{arch}");
        assert!(full.param_count() > small.param_count());
    }
}

#[test]
fn desk_models_map_batches_to_logits() {
    for arch in Arch::ALL {
        let cfg = desk(arch);
        let model = Model::<f32>::build(&cfg, 3).unwrap();
        let x = Tensor::from_fn(&cfg.input_shape(2), |i| ((i * 31) % 17) as f32 / 17.0 - 0.5);
        let y = model.logits(&x).unwrap();
        assert_eq!(y.shape(), &[2, 8], "{arch}");
        assert!(y.data().iter().all(|v| v.is_finite()));
    }
}

#[test]
fn wrong_input_shape_is_rejected() {
    let cfg = tiny_config(Arch::VggIsh, 3);
    let model = Model::<f64>::build(&cfg, 0).unwrap();
    let x = Tensor::<f64>::zeros(&[2, 1, cfg.n_mels, cfg.chunk.n_frames + 1]);
    assert!(matches!(model.logits(&x), Err(ModelError::Input { .. })));
}

#[test]
fn same_seed_builds_identical_weights() {
    for arch in Arch::ALL {
        let cfg = tiny_config(arch, 3);
        let a = Model::<f64>::build(&cfg, 9).unwrap();
        let b = Model::<f64>::build(&cfg, 9).unwrap();
        let c = Model::<f64>::build(&cfg, 10).unwrap();
        let flat = |m: &Model<f64>| {
            m.params
                .iter()
                .flat_map(|(_, p)| p.tensor.data().to_vec())
                .collect::<Vec<_>>()
        };
        assert_eq!(flat(&a), flat(&b));
        assert_ne!(flat(&a), flat(&c));
    }
}

#[test]
fn eval_logits_are_per_sample() {
    // In eval mode no statistic crosses the batch, so identical rows give
    // identical logits, including for an all-zero input.
    for arch in Arch::ALL {
        let cfg = tiny_config(arch, 3);
        let model = Model::<f64>::build(&cfg, 4).unwrap();
        let one = random_batch(&cfg, 1, 5);
        let zero = Tensor::<f64>::zeros(&cfg.input_shape(1));
        let mut data = one.data().to_vec();
        data.extend_from_slice(zero.data());
        data.extend_from_slice(one.data());
        let batch = Tensor::new(cfg.input_shape(3).to_vec(), data).unwrap();
        let y = model.logits(&batch).unwrap();
        let rows: Vec<&[f64]> = y.data().chunks(3).collect();
        assert_eq!(rows[0], rows[2], "{arch}");
        assert_eq!(rows[0], model.logits(&one).unwrap().data(), "{arch}");
        assert_eq!(rows[1], model.logits(&zero).unwrap().data(), "{arch}");
        assert!(rows[1].iter().all(|v| v.is_finite()));
    }
}

#[test]
fn freeze_backbone_leaves_only_head_trainable() {
    for arch in Arch::ALL {
        let mut model = Model::<f64>::build(&tiny_config(arch, 3), 0).unwrap();
        model.freeze_backbone();
        for (id, p) in model.params.iter() {
            if p.kind == ParamKind::Trainable {
                assert_eq!(model.params.is_frozen(id), !is_output_param(&p.name), "{}", p.name);
            }
        }
    }
}

#[test]
fn tiny_models_match_finite_differences() {
    for arch in Arch::ALL {
        let cfg = tiny_config(arch, 3);
        let mut worst = 0.0f64;
        let (mut checked, mut skipped) = (0, 0);
        for trial in 0..20u64 {
            let model = Model::<f64>::build(&cfg, 100 + trial).unwrap();
            let batch = random_batch(&cfg, 3, 200 + trial);
            let mut rng = ChaCha8Rng::seed_from_u64(300 + trial);
            let targets: Vec<f64> = (0..9).map(|_| if rng.random::<bool>() { 1.0 } else { 0.0 }).collect();
            let r = check_model(&model, &batch, &targets, 12, trial).unwrap();
            worst = worst.max(r.max_rel_err);
            checked += r.checked;
            skipped += r.skipped;
        }
        assert!(worst <= TOLERANCE, "{arch}: max relative error {worst}");
        assert!(skipped * 20 < checked, "{arch}: {skipped} kinks skipped of {checked}");
    }
}
