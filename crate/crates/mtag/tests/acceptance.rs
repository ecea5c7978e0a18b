//! End-to-end acceptance run. Prints one PASS/FAIL line per criterion and
//! exits non-zero if any fails.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use mtag::checkpoint::{ModelCheckpoint, Provenance};
use mtag::cli;
use mtag::evaluate::Example;
use mtag::fixtures::{published_transfer, PUBLISHED_DATASETS};
use mtag::train::{finetune, train, TrainConfig};
use mtag_core::analysis::{aggregate, bar_summary, best_source, collect_matrices, normalize};
use mtag_core::datasets::{assign_splits, Split, SplitRatios, SyntheticCorpus, SyntheticSpec};
use mtag_core::dsp::{log_mel, mel_filterbank, stft_power, AudioClip, DspConfig, MelScale};
use mtag_core::gradcheck::{check_model, op_suite, tiny_config, TOLERANCE};
use mtag_core::metrics::{pr_auc, roc_auc};
use mtag_core::models::{Arch, Model, ModelConfig};
use mtag_core::optim::LrPolicy;
use mtag_core::tensor::Tensor;
use mtag_core::transfer::{backbone_diff, FineTunePolicy};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome {
        pass,
        detail: detail.into(),
    }
}

// ---- 1: metric oracles ----

fn roc_oracle(s: &[f64], l: &[bool]) -> Option<f64> {
    let (mut wins, mut pairs) = (0.0, 0.0);
    for i in (0..s.len()).filter(|&i| l[i]) {
        for j in (0..s.len()).filter(|&j| !l[j]) {
            pairs += 1.0;
            wins += if s[i] > s[j] {
                1.0
            } else if s[i] == s[j] {
                0.5
            } else {
                0.0
            };
        }
    }
    (pairs > 0.0).then(|| wins / pairs)
}

fn ap_oracle(s: &[f64], l: &[bool]) -> Option<f64> {
    let pos = l.iter().filter(|&&x| x).count();
    if pos == 0 {
        return None;
    }
    let mut thresholds: Vec<f64> = s.to_vec();
    thresholds.sort_by(|a, b| b.partial_cmp(a).unwrap());
    thresholds.dedup();
    let (mut ap, mut prev_recall) = (0.0, 0.0);
    for t in thresholds {
        let selected: Vec<usize> = (0..s.len()).filter(|&i| s[i] >= t).collect();
        let tp = selected.iter().filter(|&&i| l[i]).count() as f64;
        let recall = tp / pos as f64;
        ap += (recall - prev_recall) * tp / selected.len() as f64;
        prev_recall = recall;
    }
    Some(ap)
}

fn metric_oracles() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut worst: f64 = 0.0;
    let mut compared = 0;
    for i in 0..1000 {
        let n = rng.random_range(1..=500);
        let levels = if i % 2 == 0 { 10 } else { 1_000_000 };
        let s: Vec<f64> = (0..n)
            .map(|_| rng.random_range(0..levels) as f64 / levels as f64)
            .collect();
        let p = rng.random_range(0.0..1.0);
        let l: Vec<bool> = (0..n).map(|_| rng.random_bool(p)).collect();
        match (roc_auc(&s, &l).ok(), roc_oracle(&s, &l)) {
            (Some(a), Some(b)) => worst = worst.max((a - b).abs()),
            (None, None) => {}
            _ => return outcome(false, format!("instance {i}: roc defined on one side only")),
        }
        match (pr_auc(&s, &l).ok(), ap_oracle(&s, &l)) {
            (Some(a), Some(b)) => worst = worst.max((a - b).abs()),
            (None, None) => {}
            _ => return outcome(false, format!("instance {i}: pr defined on one side only")),
        }
        compared += 1;
    }
    outcome(
        worst <= 1e-12,
        format!("{compared} instances, max abs diff {worst:.2e}"),
    )
}

// ---- 2: gradient checks ----

fn gradient_checks() -> Outcome {
    let mut worst: f64 = 0.0;
    let mut failures = Vec::new();
    let ops = op_suite();
    for case in &ops {
        for trial in 0..20u64 {
            match (case.run)(7_000 + trial) {
                Ok(r) => {
                    worst = worst.max(r.max_rel_err);
                    if !r.passed() {
                        failures.push(format!("{}#{trial}", case.name));
                    }
                }
                Err(e) => failures.push(format!("{}#{trial}: {e}", case.name)),
            }
        }
    }
    for arch in Arch::ALL {
        let cfg = tiny_config(arch, 3);
        for trial in 0..3u64 {
            let model = Model::<f64>::build(&cfg, 50 + trial).unwrap();
            let mut rng = ChaCha8Rng::seed_from_u64(trial);
            let x = Tensor::from_fn(&cfg.input_shape(2), |_| rng.random_range(-1.0..1.0));
            let y: Vec<f64> = (0..6).map(|_| rng.random_range(0..2) as f64).collect();
            let r = check_model(&model, &x, &y, 12, trial).unwrap();
            worst = worst.max(r.max_rel_err);
            if !r.passed() {
                failures.push(format!("{arch}#{trial}"));
            }
        }
    }
    outcome(
        failures.is_empty(),
        format!(
            "{} ops x 20 trials + 3 tiny models, max rel err {worst:.2e} (tol {TOLERANCE}) {failures:?}",
            ops.len()
        ),
    )
}

// ---- 3: DSP ----

fn slaney_hz_to_mel(f: f64) -> f64 {
    let f_sp = 200.0 / 3.0;
    if f < 1000.0 {
        f / f_sp
    } else {
        15.0 + (f / 1000.0).ln() / (6.4f64.ln() / 27.0)
    }
}

fn slaney_mel_to_hz(m: f64) -> f64 {
    let f_sp = 200.0 / 3.0;
    if m < 15.0 {
        m * f_sp
    } else {
        1000.0 * ((m - 15.0) * (6.4f64.ln() / 27.0)).exp()
    }
}

fn dsp_checks() -> Outcome {
    let cfg = DspConfig::default();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for _ in 0..200 {
        let n = rng.random_range(0..20_000usize);
        let want = if n < cfg.fft_size {
            0
        } else {
            1 + (n - cfg.fft_size) / cfg.hop_size
        };
        let clip = AudioClip::new(vec![0.01; n], 16_000).unwrap();
        let got = log_mel(&clip, &cfg).map(|m| m.n_frames).unwrap_or(0);
        if got != want {
            return outcome(false, format!("{n} samples: {got} frames, expected {want}"));
        }
    }
    for k in [3usize, 17, 40, 64, 99, 128, 150, 200, 231, 250] {
        let f = k as f64 * 16_000.0 / cfg.fft_size as f64;
        let samples: Vec<f32> = (0..4096)
            .map(|t| (2.0 * std::f64::consts::PI * f * t as f64 / 16_000.0).sin() as f32)
            .collect();
        let p = stft_power(&AudioClip::new(samples, 16_000).unwrap(), &cfg).unwrap();
        for frame in 0..p.n_frames {
            let peak = (0..p.n_bins)
                .max_by(|&a, &b| p.values[a * p.n_frames + frame].total_cmp(&p.values[b * p.n_frames + frame]))
                .unwrap();
            if peak != k {
                return outcome(false, format!("sine at bin {k} peaks at {peak}"));
            }
        }
    }
    let fb = mel_filterbank(&cfg).unwrap();
    assert_eq!(cfg.mel_scale, MelScale::Slaney);
    let (lo, hi) = (slaney_hz_to_mel(cfg.f_min), slaney_hz_to_mel(cfg.f_max));
    let mut worst: f64 = 0.0;
    for m in 0..cfg.n_mels {
        let edge = |i: usize| slaney_mel_to_hz(lo + (hi - lo) * i as f64 / (cfg.n_mels + 1) as f64);
        let (a, b, c) = (edge(m), edge(m + 1), edge(m + 2));
        for k in 0..cfg.n_bins() {
            let f = k as f64 * 16_000.0 / cfg.fft_size as f64;
            let want = if f <= a || f >= c {
                0.0
            } else if f <= b {
                (f - a) / (b - a)
            } else {
                (c - f) / (c - b)
            };
            let got = fb.weights[m * fb.n_bins + k];
            worst = worst.max((got - want).abs() / want.abs().max(1e-3));
        }
    }
    outcome(
        worst <= 1e-6,
        format!("200 frame counts, 10 sine peaks, filterbank max rel err {worst:.2e}"),
    )
}

// ---- 4 to 6: training on synthetic corpora ----

fn render(spec: &SyntheticSpec, ratios: SplitRatios, dsp: &DspConfig) -> (Vec<String>, Vec<Example>, Vec<Example>) {
    let corpus = SyntheticCorpus::new(spec).unwrap();
    let manifest = assign_splits(&corpus.manifest, ratios, spec.seed).unwrap();
    let (mut train, mut valid) = (Vec::new(), Vec::new());
    for (i, e) in manifest.entries.iter().enumerate() {
        let ex = Example {
            recording_id: e.recording_id.clone(),
            mel: log_mel(&corpus.render(i), dsp).unwrap(),
            targets: corpus.labels[i].clone(),
        };
        match e.split {
            Some(Split::Train) => train.push(ex),
            _ => valid.push(ex),
        }
    }
    (corpus.signatures.iter().map(|s| s.name.clone()).collect(), train, valid)
}

fn set_epochs(cfg: &mut TrainConfig, epochs: usize) {
    cfg.max_epochs = epochs;
    if let LrPolicy::MixedAdamSgd { max_epochs, .. } = &mut cfg.lr_policy {
        *max_epochs = epochs;
    }
}

fn overfit(dsp: &DspConfig) -> Outcome {
    let everything = SplitRatios {
        train: 1.0,
        valid: 0.0,
        test: 0.0,
    };
    let (tags, examples, _) = render(&SyntheticSpec::new("synth", 200, 8, 7), everything, dsp);
    let mut pass = true;
    let mut parts = Vec::new();
    for arch in Arch::ALL {
        let t = Instant::now();
        let mut cfg = TrainConfig::desk(ModelConfig::desk(arch, 8, dsp).unwrap(), 1, dsp.floor_value());
        set_epochs(&mut cfg, 100);
        cfg.patience = None;
        cfg.target_roc_auc = Some(0.95);
        let (_, report) = train(&tags, &examples, &examples, &cfg, "synth").unwrap();
        let secs = t.elapsed().as_secs_f64();
        let ok = report.best_valid_roc_auc >= 0.95 && report.epochs.len() <= 100 && secs < 900.0;
        pass &= ok;
        parts.push(format!(
            "{arch} {:.4} in {} epochs ({secs:.0}s)",
            report.best_valid_roc_auc,
            report.epochs.len()
        ));
    }
    outcome(pass, parts.join(", "))
}

fn transfer_and_freeze(dsp: &DspConfig) -> (Outcome, Outcome) {
    let source_split = SplitRatios {
        train: 0.8,
        valid: 0.2,
        test: 0.0,
    };
    let target_split = SplitRatios {
        train: 0.5,
        valid: 0.5,
        test: 0.0,
    };
    let (src_tags, src_train, src_valid) = render(&SyntheticSpec::new("src", 200, 8, 11), source_split, dsp);
    let mut target = SyntheticSpec::new("tgt", 150, 8, 23);
    target.detune = 1.03;
    let (tgt_tags, tgt_train, tgt_valid) = render(&target, target_split, dsp);

    let mut wins = 0;
    let mut parts = Vec::new();
    let mut frozen = Vec::new();
    for arch in Arch::ALL {
        let t = Instant::now();
        let model_cfg = ModelConfig::desk(arch, 8, dsp).unwrap();
        let mut cfg = TrainConfig::desk(model_cfg.clone(), 1, dsp.floor_value());
        set_epochs(&mut cfg, 60);
        cfg.target_roc_auc = Some(0.97);
        cfg.patience = Some(8);
        let (source, _) = train(&src_tags, &src_train, &src_valid, &cfg, "src").unwrap();
        let mut random_cfg = model_cfg.clone();
        random_cfg.input_norm = source.model.config.input_norm;
        let mut margins = Vec::new();
        for seed in 0..3u64 {
            let random = ModelCheckpoint::new(
                Model::build(&random_cfg, 100 + seed).unwrap(),
                src_tags.clone(),
                Provenance {
                    source_dataset_id: "random".into(),
                    epochs_trained: 0,
                    content_hash: String::new(),
                    experiment_id: None,
                    parent: None,
                },
            );
            let mut head = TrainConfig::desk(model_cfg.clone(), seed, dsp.floor_value());
            set_epochs(&mut head, 30);
            head.patience = None;
            let policy = FineTunePolicy::OutputOnly;
            let (tuned, a) = finetune(&source, "tgt", &tgt_tags, policy, &head, &tgt_train, &tgt_valid).unwrap();
            let (_, b) = finetune(&random, "tgt", &tgt_tags, policy, &head, &tgt_train, &tgt_valid).unwrap();
            margins.push(a.best_valid_roc_auc - b.best_valid_roc_auc);
            frozen.push((arch, backbone_diff(&source.model, &tuned.model)));
        }
        margins.sort_by(f64::total_cmp);
        let median = margins[1];
        wins += (median >= 0.05) as usize;
        parts.push(format!(
            "{arch} median margin {median:+.4} ({:.0}s)",
            t.elapsed().as_secs_f64()
        ));
    }
    let changed: Vec<String> = frozen
        .iter()
        .filter(|(_, d)| !d.is_empty())
        .map(|(a, d)| format!("{a}: {}", d.join(" ")))
        .collect();
    (
        outcome(wins >= 2, format!("{wins}/3 archs >= 0.05: {}", parts.join(", "))),
        outcome(
            changed.is_empty(),
            format!(
                "{} OutputOnly runs over 3 archs, changed backbones: {changed:?}",
                frozen.len()
            ),
        ),
    )
}

// ---- 7: published numbers ----

fn published_analysis() -> Outcome {
    let t = Instant::now();
    let records = published_transfer();
    let datasets: Vec<String> = PUBLISHED_DATASETS.iter().map(|s| s.to_string()).collect();
    let matrices = collect_matrices(&records, &datasets, &Arch::ALL).unwrap();
    let pick = |arch, policy| matrices.iter().find(|m| m.model == arch && m.policy == policy).unwrap();
    let mut failures = Vec::new();

    let norm = normalize(pick(Arch::VggIsh, FineTunePolicy::OutputOnly));
    let column: Vec<f64> = (1..6).map(|s| norm.cells[s][0].unwrap()).collect();
    let want = [1.0, 0.09756, 0.61585, 0.03659, 0.0];
    if column.iter().zip(want).any(|(a, b)| (a - b).abs() > 1e-4) {
        failures.push(format!("(a) {column:?}"));
    }
    let agg = aggregate(&matrices).unwrap();
    let cell = agg.get("fma", "magnatagatune").unwrap();
    if (cell - 1.0).abs() > 1e-9 {
        failures.push(format!("(b) {cell}"));
    }
    let musicnn_all = aggregate(&[pick(Arch::Musicnn, FineTunePolicy::All).clone()]).unwrap();
    let best = best_source(&musicnn_all, "carnatic").unwrap();
    if best != ["hindustani"] {
        failures.push(format!("(c) {best:?}"));
    }
    let bar = bar_summary(&matrices, FineTunePolicy::OutputOnly)
        .unwrap()
        .bar("magnatagatune", "fma")
        .unwrap();
    if (bar - 86.6566).abs() > 1e-3 {
        failures.push(format!("(d) {bar}"));
    }
    let secs = t.elapsed().as_secs_f64();
    if secs >= 1.0 {
        failures.push(format!("took {secs:.2}s"));
    }
    outcome(
        failures.is_empty(),
        format!(
            "column {column:.5?}, aggregate {cell}, best {best:?}, bar {bar:.4} ({:.0} ms) {failures:?}",
            secs * 1e3
        ),
    )
}

// ---- 8: determinism ----

fn mtag(args: &[&str]) -> i32 {
    cli::run(std::iter::once("mtag").chain(args.iter().copied()))
}

fn pipeline(dir: &Path) -> Result<BTreeMap<PathBuf, Vec<u8>>, String> {
    std::env::set_current_dir(dir).map_err(|e| e.to_string())?;
    for (name, seed, detune) in [("alpha", 3u64, 1.0), ("beta", 4, 1.03)] {
        let mut spec = SyntheticSpec::new(name, 16, 3, seed);
        spec.clip_seconds = 4.0;
        spec.tag_probability = 0.4;
        spec.detune = detune;
        fs::write(format!("{name}.json"), serde_json::to_vec(&spec).unwrap()).map_err(|e| e.to_string())?;
        let spec_path = format!("{name}.json");
        let manifest = format!("{name}/{name}.jsonl");
        let steps: [&[&str]; 2] = [
            &["synth", "--spec", &spec_path, "--out", name, "--split", "0.5,0.25,0.25"],
            &["--cache", "cache", "preprocess", "--manifest", &manifest],
        ];
        for args in steps {
            if mtag(args) != 0 {
                return Err(format!("mtag {args:?} failed"));
            }
        }
    }
    let steps: [&[&str]; 2] = [
        &[
            "--cache",
            "cache",
            "--seed",
            "5",
            "grid",
            "--manifests",
            "alpha/alpha.jsonl",
            "beta/beta.jsonl",
            "--arch",
            "vggish",
            "--scale",
            "desk",
            "--epochs",
            "2",
            "--out",
            "grid",
        ],
        &[
            "--cache",
            "cache",
            "evaluate",
            "--ckpt",
            "grid/vggish_alpha__beta__output.ckpt",
            "--manifest",
            "beta/beta.jsonl",
            "--split",
            "test",
            "--out-dir",
            "eval",
        ],
    ];
    for args in steps {
        if mtag(args) != 0 {
            return Err(format!("mtag {args:?} failed"));
        }
    }
    let mut files = BTreeMap::new();
    let mut stack = vec![PathBuf::from(".")];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).map_err(|e| e.to_string())? {
            let p = e.map_err(|e| e.to_string())?.path();
            if p.is_dir() {
                stack.push(p);
            } else if !p.to_string_lossy().ends_with(".run.json") {
                files.insert(p.clone(), fs::read(&p).map_err(|e| e.to_string())?);
            }
        }
    }
    Ok(files)
}

fn determinism() -> Outcome {
    let home = std::env::current_dir().unwrap();
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let runs = (pipeline(a.path()), pipeline(b.path()));
    std::env::set_current_dir(home).unwrap();
    match runs {
        (Ok(x), Ok(y)) => {
            let ckpts = x.keys().filter(|p| p.extension().is_some_and(|e| e == "ckpt")).count();
            let differing: Vec<_> = x.keys().filter(|k| x.get(*k) != y.get(*k)).collect();
            let same_set = x.keys().eq(y.keys());
            outcome(
                same_set && differing.is_empty() && ckpts >= 4,
                format!(
                    "{} artifacts ({ckpts} checkpoints) compared, differing {differing:?}",
                    x.len()
                ),
            )
        }
        (Err(e), _) | (_, Err(e)) => outcome(false, e),
    }
}

fn main() {
    mtag::tune_allocator();
    let dsp = DspConfig::default();
    let mut results: Vec<(usize, &str, Outcome, f64)> = Vec::new();
    let mut timed = |n: usize, name: &'static str, f: &mut dyn FnMut() -> Outcome| {
        let t = Instant::now();
        let o = f();
        results.push((n, name, o, t.elapsed().as_secs_f64()));
        let (n, name, o, secs) = results.last().unwrap();
        println!(
            "criterion {n} {name}: {} ({secs:.1}s) {}",
            if o.pass { "PASS" } else { "FAIL" },
            o.detail
        );
    };
    timed(1, "metric oracles", &mut metric_oracles);
    timed(2, "gradient checks", &mut gradient_checks);
    timed(3, "dsp", &mut dsp_checks);
    timed(7, "published analysis", &mut published_analysis);
    timed(8, "determinism", &mut determinism);
    timed(4, "overfit", &mut || overfit(&dsp));
    let mut freeze = None;
    timed(5, "transfer benefit", &mut || {
        let (t, f) = transfer_and_freeze(&dsp);
        freeze = Some(f);
        t
    });
    timed(6, "freeze invariant", &mut || freeze.take().unwrap());

    results.sort_by_key(|r| r.0);
    println!();
    for (n, name, o, _) in &results {
        println!("criterion {n} {name}: {}", if o.pass { "PASS" } else { "FAIL" });
    }
    if results.iter().any(|r| !r.2.pass) {
        std::process::exit(1);
    }
}
