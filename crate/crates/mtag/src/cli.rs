//! Command-line front end. Diagnostics go to stderr; results go to files.

use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use mtag_core::analysis::{aggregate, bar_summary, collect_matrices, normalize, AnalysisError};
use mtag_core::datasets::{
    build_vocabulary, tag_frequencies, DatasetConfig, DatasetManifest, DatasetPreset, Split, SplitRatios,
    SyntheticSpec, TagVocabulary,
};
use mtag_core::dsp::DspConfig;
use mtag_core::models::{Arch, ModelConfig};
use mtag_core::transfer::{FineTunePolicy, RegistryRecord};
use serde_json::json;

use crate::cache::{preprocess, MelCache, CACHE_ENV};
use crate::checkpoint::ModelCheckpoint;
use crate::evaluate::{check_vocabulary, evaluate_examples, load_split, write_per_tag_csv, write_report_json, Example};
use crate::fixtures::{read_transfer_table, PUBLISHED_DATASETS};
use crate::manifest::load_manifest;
use crate::registry::{append_record, read_registry};
use crate::report::emit_analysis;
use crate::run::RunManifest;
use crate::synth::write_synthetic;
use crate::train::{finetune, train, TrainConfig, TrainError, TrainReport};

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 2;
pub const EXIT_DATA: i32 = 3;
pub const EXIT_NUMERIC: i32 = 4;
pub const EXIT_MISSING: i32 = 5;

#[derive(Debug, Parser)]
#[command(
    name = "mtag",
    version,
    about = "Music auto-tagging: preprocessing, training, transfer and analysis"
)]
pub struct Cli {
    /// Seed for every stochastic step (synthesis defaults to the spec's seed).
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Root of the log-mel cache.
    #[arg(long, global = true, env = CACHE_ENV, default_value = ".mtag-cache")]
    pub cache: PathBuf,
    /// DSP configuration JSON; defaults to 16 kHz, 512/256 STFT, 128 mels.
    #[arg(long, global = true)]
    pub dsp: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Compute and cache log-mel spectrograms for a manifest.
    Preprocess {
        #[command(flatten)]
        data: DataArgs,
    },
    /// Train a model on one dataset.
    Train {
        #[command(flatten)]
        data: DataArgs,
        #[arg(long, value_parser = parse_arch)]
        arch: Arch,
        #[command(flatten)]
        opts: TrainArgs,
        /// Output checkpoint; the report and run manifest are written beside it.
        #[arg(long)]
        out: PathBuf,
    },
    /// Fine-tune a source checkpoint on a target dataset.
    Transfer {
        #[arg(long)]
        source: PathBuf,
        #[command(flatten)]
        data: DataArgs,
        #[arg(long, value_parser = parse_policy)]
        policy: FineTunePolicy,
        #[command(flatten)]
        opts: TrainArgs,
        /// Output checkpoint [default: beside the source].
        #[arg(long)]
        out: Option<PathBuf>,
        /// Run registry receiving one record per completed run [default: registry.jsonl beside the output].
        #[arg(long)]
        registry: Option<PathBuf>,
    },
    /// Score a checkpoint on one split.
    Evaluate {
        #[arg(long)]
        ckpt: PathBuf,
        #[command(flatten)]
        data: DataArgs,
        #[arg(long, default_value = "test", value_parser = parse_split)]
        split: Split,
        /// Directory for the JSON report and per-tag CSV [default: beside the checkpoint].
        #[arg(long)]
        out_dir: Option<PathBuf>,
    },
    /// Aggregate a transfer grid into transfer summaries.
    Matrix {
        #[arg(long, conflicts_with = "from_table", required_unless_present = "from_table")]
        registry: Option<PathBuf>,
        /// CSV with columns model,policy,source,target,roc_auc_pct.
        #[arg(long)]
        from_table: Option<PathBuf>,
        #[arg(long)]
        emit: PathBuf,
        /// Dataset order [default: published order, else order of appearance].
        #[arg(long, value_delimiter = ',')]
        datasets: Vec<String>,
        /// Models to include [default: all present].
        #[arg(long, value_delimiter = ',', value_parser = parse_arch)]
        models: Vec<Arch>,
    },
    /// Render a synthetic corpus from a JSON spec.
    Synth {
        #[arg(long)]
        spec: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Train/valid/test fractions.
        #[arg(long, value_parser = parse_ratios, default_value = "0.8,0.1,0.1")]
        split: SplitRatios,
    },
    /// Run every single-domain and transfer cell for one architecture, then aggregate.
    Grid {
        #[arg(long, num_args = 2.., required = true)]
        manifests: Vec<PathBuf>,
        #[arg(long, value_parser = parse_arch)]
        arch: Arch,
        #[arg(long, value_delimiter = ',', value_parser = parse_policy, default_value = "output,all")]
        policies: Vec<FineTunePolicy>,
        #[command(flatten)]
        opts: TrainArgs,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Debug, Args, Clone)]
pub struct DataArgs {
    /// Manifest (.jsonl or .csv); audio paths are relative to its directory.
    #[arg(long)]
    pub manifest: PathBuf,
    /// Dataset id [default: manifest file stem].
    #[arg(long)]
    pub dataset_id: Option<String>,
    /// Dataset preset fixing vocabulary size and duration cap (mtt, fma, lyra, makam, hindustani, carnatic).
    #[arg(long, value_parser = parse_preset)]
    pub preset: Option<DatasetPreset>,
    /// Vocabulary size when no preset is given [default: every tag].
    #[arg(long)]
    pub top_k: Option<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Scale {
    Full,
    Desk,
}

#[derive(Debug, Args, Clone)]
pub struct TrainArgs {
    /// Model and schedule size.
    #[arg(long, value_enum, default_value = "full")]
    pub scale: Scale,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub patience: Option<usize>,
    /// Wall-clock limit in seconds.
    #[arg(long)]
    pub budget_sec: Option<f64>,
    /// Stop once validation macro ROC-AUC reaches this value.
    #[arg(long)]
    pub target_auc: Option<f64>,
}

fn parse_arch(s: &str) -> Result<Arch, String> {
    Arch::parse(s).ok_or_else(|| format!("unknown architecture `{s}` (vggish, musicnn, ast)"))
}

fn parse_policy(s: &str) -> Result<FineTunePolicy, String> {
    FineTunePolicy::parse(s).ok_or_else(|| format!("unknown policy `{s}` (output, all)"))
}

fn parse_split(s: &str) -> Result<Split, String> {
    Split::parse(s).ok_or_else(|| format!("unknown split `{s}` (train, valid, test)"))
}

fn parse_ratios(s: &str) -> Result<SplitRatios, String> {
    let parts: Vec<f64> = s
        .split(',')
        .map(|p| p.trim().parse::<f64>().map_err(|e| format!("`{p}`: {e}")))
        .collect::<Result<_, _>>()?;
    let [train, valid, test] = parts[..] else {
        return Err(format!("expected train,valid,test fractions, got `{s}`"));
    };
    let r = SplitRatios { train, valid, test };
    r.validate().map_err(|e| e.to_string())?;
    Ok(r)
}

fn parse_preset(s: &str) -> Result<DatasetPreset, String> {
    DatasetPreset::parse(s).ok_or_else(|| format!("unknown preset `{s}`"))
}

/// A failed command with its exit status.
#[derive(Debug)]
pub struct Failure {
    pub code: i32,
    pub message: String,
}

impl Failure {
    fn usage(m: impl std::fmt::Display) -> Self {
        Self {
            code: EXIT_USAGE,
            message: m.to_string(),
        }
    }

    fn data(m: impl std::fmt::Display) -> Self {
        Self {
            code: EXIT_DATA,
            message: m.to_string(),
        }
    }
}

impl From<TrainError> for Failure {
    fn from(e: TrainError) -> Self {
        let code = match e {
            TrainError::Fault { .. } => EXIT_NUMERIC,
            TrainError::Config(_) => EXIT_USAGE,
            _ => EXIT_DATA,
        };
        Self {
            code,
            message: e.to_string(),
        }
    }
}

impl From<AnalysisError> for Failure {
    fn from(e: AnalysisError) -> Self {
        let code = match e {
            AnalysisError::MissingCell { .. } => EXIT_MISSING,
            _ => EXIT_DATA,
        };
        Self {
            code,
            message: e.to_string(),
        }
    }
}

macro_rules! data_errors {
    ($($t:ty),*) => {$(
        impl From<$t> for Failure {
            fn from(e: $t) -> Self {
                Failure::data(e)
            }
        }
    )*};
}

data_errors!(
    crate::cache::CacheError,
    crate::checkpoint::CheckpointError,
    crate::manifest::ManifestError,
    crate::registry::RegistryError,
    crate::report::ReportError,
    crate::synth::SynthError,
    crate::evaluate::VocabError,
    crate::fixtures::FixtureError,
    mtag_core::datasets::DatasetError,
    mtag_core::metrics::EvalError,
    mtag_core::models::ModelError,
    std::io::Error,
    csv::Error
);

/// Parses `args` (including the program name) and runs the command,
/// returning the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
            let _ = e.print();
            return code;
        }
    };
    match execute(&cli) {
        Ok(()) => EXIT_OK,
        Err(f) => {
            eprintln!("error: {}", f.message);
            f.code
        }
    }
}

pub fn execute(cli: &Cli) -> Result<(), Failure> {
    let dsp = match &cli.dsp {
        Some(p) => {
            let text = fs::read_to_string(p).map_err(|e| Failure::usage(format!("{}: {e}", p.display())))?;
            serde_json::from_str::<DspConfig>(&text).map_err(|e| Failure::usage(format!("{}: {e}", p.display())))?
        }
        None => DspConfig::default(),
    };
    dsp.validate().map_err(Failure::usage)?;
    let ctx = Context {
        seed: cli.seed.unwrap_or(0),
        cache: MelCache::new(&cli.cache, dsp)?,
        dsp,
    };
    match &cli.command {
        Command::Preprocess { data } => cmd_preprocess(&ctx, data),
        Command::Train { data, arch, opts, out } => cmd_train(&ctx, data, *arch, opts, out),
        Command::Transfer {
            source,
            data,
            policy,
            opts,
            out,
            registry,
        } => cmd_transfer(&ctx, source, data, *policy, opts, out.as_deref(), registry.as_deref()).map(|_| ()),
        Command::Evaluate {
            ckpt,
            data,
            split,
            out_dir,
        } => cmd_evaluate(&ctx, ckpt, data, *split, out_dir.as_deref()).map(|_| ()),
        Command::Matrix {
            registry,
            from_table,
            emit,
            datasets,
            models,
        } => cmd_matrix(registry.as_deref(), from_table.as_deref(), emit, datasets, models),
        Command::Synth { spec, out, split } => cmd_synth(cli.seed, spec, out, *split),
        Command::Grid {
            manifests,
            arch,
            policies,
            opts,
            out,
        } => cmd_grid(&ctx, manifests, *arch, policies, opts, out),
    }
}

struct Context {
    seed: u64,
    cache: MelCache,
    dsp: DspConfig,
}

struct Dataset {
    manifest: DatasetManifest,
    base_dir: PathBuf,
    config: DatasetConfig,
    vocab: TagVocabulary,
}

impl Dataset {
    fn open(args: &DataArgs) -> Result<Self, Failure> {
        if !args.manifest.is_file() {
            return Err(Failure::usage(format!(
                "manifest {} does not exist",
                args.manifest.display()
            )));
        }
        let manifest = load_manifest(&args.manifest, args.dataset_id.as_deref())?;
        let base_dir = args.manifest.parent().map(Path::to_path_buf).unwrap_or_default();
        let config = match (args.preset, args.top_k) {
            (Some(p), None) => p.config(),
            (Some(p), Some(k)) => DatasetConfig {
                top_k_tags: k,
                ..p.config()
            },
            (None, k) => DatasetConfig {
                top_k_tags: k.unwrap_or_else(|| tag_frequencies(&manifest).len().max(1)),
                max_duration_sec: None,
            },
        };
        let vocab = build_vocabulary(&manifest, &config)?;
        Ok(Self {
            manifest,
            base_dir,
            config,
            vocab,
        })
    }

    fn split(&self, ctx: &Context, split: Split) -> Result<Vec<Example>, Failure> {
        Ok(load_split(
            &self.manifest,
            split,
            &self.vocab,
            &self.config,
            &ctx.cache,
            &self.base_dir,
        )?)
    }

    fn id(&self) -> &str {
        &self.manifest.dataset_id
    }
}

fn train_config(model: ModelConfig, opts: &TrainArgs, seed: u64, pad: f32) -> TrainConfig {
    let mut cfg = match opts.scale {
        Scale::Full => TrainConfig::full(model, seed, pad),
        Scale::Desk => TrainConfig::desk(model, seed, pad),
    };
    if let Some(e) = opts.epochs {
        cfg.max_epochs = e;
        if let mtag_core::optim::LrPolicy::MixedAdamSgd { max_epochs, .. } = &mut cfg.lr_policy {
            *max_epochs = e;
        }
    }
    if let Some(b) = opts.batch_size {
        cfg.batch_size = b;
    }
    if opts.patience.is_some() {
        cfg.patience = opts.patience;
    }
    cfg.budget_sec = opts.budget_sec;
    cfg.target_roc_auc = opts.target_auc;
    cfg
}

fn sibling(path: &Path, suffix: &str) -> PathBuf {
    let stem = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    path.with_file_name(format!("{stem}.{suffix}"))
}

fn cmd_preprocess(ctx: &Context, data: &DataArgs) -> Result<(), Failure> {
    if !data.manifest.is_file() {
        return Err(Failure::usage(format!(
            "manifest {} does not exist",
            data.manifest.display()
        )));
    }
    let manifest = load_manifest(&data.manifest, data.dataset_id.as_deref())?;
    let base_dir = data.manifest.parent().map(Path::to_path_buf).unwrap_or_default();
    let report = preprocess(&manifest, &base_dir, &ctx.cache);
    eprintln!(
        "{}: {} computed, {} reused, {} failed",
        manifest.dataset_id,
        report.computed,
        report.reused,
        report.failures.len()
    );
    let report_path = ctx
        .cache
        .root()
        .join(format!("preprocess_{}.json", manifest.dataset_id));
    write_report_json(&report_path, &report)?;
    if report.failures.is_empty() {
        Ok(())
    } else {
        for f in &report.failures {
            eprintln!("  {}: {}", f.recording_id, f.error);
        }
        Err(Failure::data(format!(
            "{} recordings failed; see {}",
            report.failures.len(),
            report_path.display()
        )))
    }
}

fn train_one(
    ctx: &Context,
    ds: &Dataset,
    arch: Arch,
    opts: &TrainArgs,
    out: &Path,
) -> Result<(ModelCheckpoint, TrainReport), Failure> {
    let model = match opts.scale {
        Scale::Full => ModelConfig::full(arch, ds.vocab.len(), &ctx.dsp),
        Scale::Desk => ModelConfig::desk(arch, ds.vocab.len(), &ctx.dsp),
    }
    .map_err(Failure::usage)?;
    let cfg = train_config(model, opts, ctx.seed, ctx.dsp.floor_value());
    let mut run = RunManifest::start(
        "train",
        json!({"dataset": ds.id(), "dataset_config": ds.config, "vocabulary": ds.vocab.tags, "dsp": ctx.dsp, "train": cfg}),
    );
    let (train_set, valid_set) = (ds.split(ctx, Split::Train)?, ds.split(ctx, Split::Valid)?);
    eprintln!(
        "{}: training {arch} on {} / validating on {} recordings",
        ds.id(),
        train_set.len(),
        valid_set.len()
    );
    let (mut ckpt, mut report) = train(&ds.vocab.tags, &train_set, &valid_set, &cfg, ds.id())?;
    ckpt.provenance.experiment_id = Some(run.experiment_id.clone());
    report.experiment_id = Some(run.experiment_id.clone());
    ckpt.save(out)?;
    write_report_json(&sibling(out, "report.json"), &report)?;
    run.finish(&sibling(out, "run.json"))?;
    eprintln!(
        "best epoch {} (valid ROC-AUC {:.4}), stopped: {:?}",
        report.best_epoch, report.best_valid_roc_auc, report.stop_reason
    );
    Ok((ckpt, report))
}

fn cmd_train(ctx: &Context, data: &DataArgs, arch: Arch, opts: &TrainArgs, out: &Path) -> Result<(), Failure> {
    let ds = Dataset::open(data)?;
    train_one(ctx, &ds, arch, opts, out).map(|_| ())
}

fn scale_of(cfg: &ModelConfig) -> Scale {
    if cfg.width_scale >= 1.0 {
        Scale::Full
    } else {
        Scale::Desk
    }
}

fn transfer_one(
    ctx: &Context,
    source: &ModelCheckpoint,
    ds: &Dataset,
    policy: FineTunePolicy,
    opts: &TrainArgs,
    out: &Path,
    registry: &Path,
) -> Result<RegistryRecord, Failure> {
    let opts = TrainArgs {
        scale: scale_of(&source.model.config),
        ..opts.clone()
    };
    let cfg = train_config(source.model.config.clone(), &opts, ctx.seed, ctx.dsp.floor_value());
    let mut run = RunManifest::start(
        "transfer",
        json!({"source": source.provenance, "target": ds.id(), "policy": policy,
               "dataset_config": ds.config, "vocabulary": ds.vocab.tags, "dsp": ctx.dsp, "train": cfg}),
    );
    let (train_set, valid_set) = (ds.split(ctx, Split::Train)?, ds.split(ctx, Split::Valid)?);
    eprintln!(
        "{} -> {} ({policy}): fine-tuning on {} recordings",
        source.provenance.source_dataset_id,
        ds.id(),
        train_set.len()
    );
    let (mut ckpt, mut report) = finetune(source, ds.id(), &ds.vocab.tags, policy, &cfg, &train_set, &valid_set)?;
    ckpt.provenance.experiment_id = Some(run.experiment_id.clone());
    report.experiment_id = Some(run.experiment_id.clone());
    let test = ds.split(ctx, Split::Test)?;
    let eval = evaluate_examples(&ckpt.model, &ckpt.tags, &test, cfg.pad_value, cfg.eval_batch)?;
    ckpt.save(out)?;
    write_report_json(&sibling(out, "report.json"), &report)?;
    let record = RegistryRecord {
        model: source.model.config.kind(),
        source: source.provenance.source_dataset_id.clone(),
        target: ds.id().to_string(),
        policy,
        seed: ctx.seed,
        roc_auc: eval.macro_roc_auc,
        pr_auc: Some(eval.macro_pr_auc),
    };
    append_record(registry, &record)?;
    run.finish(&sibling(out, "run.json"))?;
    eprintln!(
        "test ROC-AUC {:.4}, PR-AUC {:.4}",
        eval.macro_roc_auc, eval.macro_pr_auc
    );
    Ok(record)
}

fn cmd_transfer(
    ctx: &Context,
    source: &Path,
    data: &DataArgs,
    policy: FineTunePolicy,
    opts: &TrainArgs,
    out: Option<&Path>,
    registry: Option<&Path>,
) -> Result<RegistryRecord, Failure> {
    let src = ModelCheckpoint::load(source)?;
    let ds = Dataset::open(data)?;
    let out = out.map(Path::to_path_buf).unwrap_or_else(|| {
        let stem = source
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_default();
        source.with_file_name(format!("{stem}__{}__{}.ckpt", ds.id(), policy.name()))
    });
    let registry = registry
        .map(Path::to_path_buf)
        .unwrap_or_else(|| out.with_file_name("registry.jsonl"));
    transfer_one(ctx, &src, &ds, policy, opts, &out, &registry)
}

fn cmd_evaluate(
    ctx: &Context,
    ckpt_path: &Path,
    data: &DataArgs,
    split: Split,
    out_dir: Option<&Path>,
) -> Result<f64, Failure> {
    let ckpt = ModelCheckpoint::load(ckpt_path)?;
    let ds = Dataset::open(data)?;
    check_vocabulary(&ckpt.tags, &ds.vocab)?;
    let examples = ds.split(ctx, split)?;
    let report = evaluate_examples(&ckpt.model, &ckpt.tags, &examples, ctx.dsp.floor_value(), 32)?;
    let dir = out_dir
        .map(Path::to_path_buf)
        .or_else(|| ckpt_path.parent().map(Path::to_path_buf))
        .unwrap_or_default();
    fs::create_dir_all(&dir)?;
    let stem = ckpt_path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    let experiment = crate::run::experiment_id(
        "evaluate",
        &json!({"checkpoint": ckpt.provenance.content_hash, "dataset": ds.id(), "split": split}),
    );
    write_report_json(
        &dir.join(format!("{stem}.{}.eval.json", split.name())),
        &json!({"experiment_id": experiment, "checkpoint": ckpt.provenance.content_hash, "dataset": ds.id(), "split": split, "report": report}),
    )?;
    write_per_tag_csv(&dir.join(format!("{stem}.{}.tags.csv", split.name())), &report)?;
    eprintln!(
        "{} {}: macro ROC-AUC {:.4}, PR-AUC {:.4}, {} tags skipped",
        ds.id(),
        split.name(),
        report.macro_roc_auc,
        report.macro_pr_auc,
        report.skipped.len()
    );
    Ok(report.macro_roc_auc)
}

fn dataset_order(records: &[RegistryRecord], requested: &[String]) -> Vec<String> {
    if !requested.is_empty() {
        return requested.to_vec();
    }
    let mut seen: Vec<String> = Vec::new();
    for r in records {
        for d in [&r.source, &r.target] {
            if !seen.contains(d) {
                seen.push(d.clone());
            }
        }
    }
    if seen.len() == PUBLISHED_DATASETS.len() && PUBLISHED_DATASETS.iter().all(|d| seen.iter().any(|s| s == d)) {
        return PUBLISHED_DATASETS.iter().map(|s| s.to_string()).collect();
    }
    seen
}

/// Writes matrices, aggregate and bar summaries for `records` into `emit`.
pub fn emit_matrix(
    records: &[RegistryRecord],
    emit: &Path,
    datasets: &[String],
    models: &[Arch],
) -> Result<(), Failure> {
    let datasets = dataset_order(records, datasets);
    let models: Vec<Arch> = if models.is_empty() {
        Arch::ALL
            .into_iter()
            .filter(|a| records.iter().any(|r| r.model == *a))
            .collect()
    } else {
        models.to_vec()
    };
    let matrices = collect_matrices(records, &datasets, &models)?;
    let agg = aggregate(&matrices)?;
    let mut bars = Vec::new();
    for policy in FineTunePolicy::ALL {
        if matrices.iter().any(|m| m.policy == policy) {
            bars.push(bar_summary(&matrices, policy)?);
        }
    }
    let written = emit_analysis(emit, &agg, &bars)?;
    let normalized: Vec<_> = matrices.iter().map(normalize).collect();
    write_report_json(
        &emit.join("matrices.json"),
        &json!({"raw": matrices, "normalized": normalized}),
    )?;
    for p in written {
        eprintln!("wrote {}", p.display());
    }
    Ok(())
}

fn cmd_matrix(
    registry: Option<&Path>,
    table: Option<&Path>,
    emit: &Path,
    datasets: &[String],
    models: &[Arch],
) -> Result<(), Failure> {
    let records = match (registry, table) {
        (Some(r), None) => read_registry(r)?,
        (None, Some(t)) => {
            read_transfer_table(fs::File::open(t).map_err(|e| Failure::usage(format!("{}: {e}", t.display())))?)?
        }
        _ => return Err(Failure::usage("give exactly one of --registry or --from-table")),
    };
    emit_matrix(&records, emit, datasets, models)
}

fn cmd_synth(seed: Option<u64>, spec_path: &Path, out: &Path, split: SplitRatios) -> Result<(), Failure> {
    let text = fs::read_to_string(spec_path).map_err(|e| Failure::usage(format!("{}: {e}", spec_path.display())))?;
    let mut spec: SyntheticSpec =
        serde_json::from_str(&text).map_err(|e| Failure::usage(format!("{}: {e}", spec_path.display())))?;
    if let Some(s) = seed {
        spec.seed = s;
    }
    let (manifest, path) = write_synthetic(&spec, split, out)?;
    fs::write(
        out.join("spec.json"),
        serde_json::to_vec_pretty(&spec).expect("spec serializes"),
    )?;
    eprintln!("wrote {} clips and {}", manifest.len(), path.display());
    Ok(())
}

fn cmd_grid(
    ctx: &Context,
    manifests: &[PathBuf],
    arch: Arch,
    policies: &[FineTunePolicy],
    opts: &TrainArgs,
    out: &Path,
) -> Result<(), Failure> {
    fs::create_dir_all(out)?;
    let registry = out.join("registry.jsonl");
    if registry.exists() {
        return Err(Failure::usage(format!("{} already exists", registry.display())));
    }
    let datasets: Vec<Dataset> = manifests
        .iter()
        .map(|m| {
            Dataset::open(&DataArgs {
                manifest: m.clone(),
                dataset_id: None,
                preset: None,
                top_k: None,
            })
        })
        .collect::<Result<_, _>>()?;
    let mut sources = Vec::new();
    for ds in &datasets {
        let path = out.join(format!("{}_{}.ckpt", arch.name(), ds.id()));
        let (ckpt, _) = train_one(ctx, ds, arch, opts, &path)?;
        let test = ds.split(ctx, Split::Test)?;
        let eval = evaluate_examples(&ckpt.model, &ckpt.tags, &test, ctx.dsp.floor_value(), 32)?;
        append_record(
            &registry,
            &RegistryRecord {
                model: arch,
                source: ds.id().to_string(),
                target: ds.id().to_string(),
                policy: FineTunePolicy::All,
                seed: ctx.seed,
                roc_auc: eval.macro_roc_auc,
                pr_auc: Some(eval.macro_pr_auc),
            },
        )?;
        sources.push(ckpt);
    }
    for (s, src) in sources.iter().enumerate() {
        for (t, ds) in datasets.iter().enumerate() {
            if s == t {
                continue;
            }
            for &policy in policies {
                let path = out.join(format!(
                    "{}_{}__{}__{}.ckpt",
                    arch.name(),
                    datasets[s].id(),
                    ds.id(),
                    policy.name()
                ));
                transfer_one(ctx, src, ds, policy, opts, &path, &registry)?;
            }
        }
    }
    let records = read_registry(&registry)?;
    let ids: Vec<String> = datasets.iter().map(|d| d.id().to_string()).collect();
    emit_matrix(&records, &out.join("analysis"), &ids, &[arch])
}
