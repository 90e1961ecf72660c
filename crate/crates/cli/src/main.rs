//! `sct`: enhance images, train the enhancer, generate synthetic pairs,
//! print ablation configs and score tracking results.
//!
//! Exit status is 0 when a command finished without warnings, 1 when it
//! finished but warned (skipped images, orphan sequences), 2 on a fatal error.

mod config;

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use rayon::prelude::*;

use sct_core::checkpoint::{load_backbone, load_model, save_backbone, save_model};
use sct_core::data::{load_pairs, synth_pairs};
use sct_core::loss::{BackboneConfig, FrozenBackbone};
use sct_core::ope::evaluate_dirs;
use sct_core::train::{train, TrainConfig, TrainOutputs};
use sct_core::{Ablation, ImageTensor, SctConfig, SctModel};

use config::{ConfigFile, Effective};

#[derive(Parser, Debug)]
#[command(name = "sct", version, about = "Low-light enhancement for tracking")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Enhance one PNG or every PNG in a directory.
    Enhance(EnhanceArgs),
    /// Train an enhancer on paired low/normal images.
    Train(TrainArgs),
    /// One-pass evaluation of predicted boxes against ground truth.
    Eval(EvalArgs),
    /// Print the model config of an ablation variant.
    Ablation(AblationArgs),
    /// Write synthetic low/normal pairs in dataset layout.
    Synth(SynthArgs),
}

#[derive(Args, Debug)]
struct EnhanceArgs {
    /// Image file or directory of PNGs.
    #[arg(long, short)]
    input: PathBuf,
    #[arg(long, short)]
    checkpoint: PathBuf,
    /// Output directory; files keep their names.
    #[arg(long, short)]
    output: PathBuf,
}

#[derive(Args, Debug)]
struct TrainArgs {
    /// JSON config with optional `model` and `train` sections.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Dataset root containing `low/` and `normal/`.
    #[arg(long, conflicts_with = "synthetic")]
    dataset: Option<PathBuf>,
    /// Train on generated pairs instead of a dataset.
    #[arg(long)]
    synthetic: bool,
    #[arg(long, default_value_t = 8, requires = "synthetic")]
    pairs: usize,
    #[arg(long, default_value_t = 64, requires = "synthetic")]
    size: usize,
    /// Use the small CI preset as the model config.
    #[arg(long)]
    tiny: bool,
    /// Apply an ablation variant's flags to the model config.
    #[arg(long)]
    ablation: Option<Ablation>,
    /// Stop after this many optimizer steps.
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    warmup_epochs: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    weight_decay: Option<f64>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    crop: Option<usize>,
    #[arg(long)]
    no_flip: bool,
    /// Seed for data, initialization and the backbone stand-in.
    #[arg(long, env = "SCT_SEED")]
    seed: Option<u64>,
    /// Frozen backbone checkpoint; a seeded stand-in otherwise.
    #[arg(long)]
    backbone: Option<PathBuf>,
    #[arg(long, short, default_value = "runs/latest")]
    out: PathBuf,
    /// Print the effective config and exit.
    #[arg(long)]
    dry_run: bool,
}

#[derive(Args, Debug)]
struct EvalArgs {
    /// Directory of predicted `<sequence>.txt` box files.
    #[arg(long)]
    pred: PathBuf,
    /// Directory of ground-truth box files with matching names.
    #[arg(long)]
    truth: PathBuf,
    /// JSON report path.
    #[arg(long)]
    report: PathBuf,
    /// CSV curve table; defaults to the report path with a `.csv` extension.
    #[arg(long)]
    curves: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct AblationArgs {
    name: Ablation,
    /// Start from the small CI preset instead of the default config.
    #[arg(long)]
    tiny: bool,
}

#[derive(Args, Debug)]
struct SynthArgs {
    #[arg(long, default_value_t = 8)]
    pairs: usize,
    #[arg(long, default_value_t = 64)]
    size: usize,
    #[arg(long, env = "SCT_SEED", default_value_t = 0)]
    seed: u64,
    #[arg(long, short)]
    out: PathBuf,
}

/// Counts warnings so the exit status can report them.
#[derive(Default)]
struct Warnings(usize);

impl Warnings {
    fn warn(&mut self, msg: impl std::fmt::Display) {
        log::warn!("{msg}");
        self.0 += 1;
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(w) if w.0 == 0 => ExitCode::SUCCESS,
        Ok(w) => {
            eprintln!("finished with {} warning(s)", w.0);
            ExitCode::from(1)
        }
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}

fn run(cli: Cli) -> Result<Warnings> {
    if let Ok(v) = std::env::var("SCT_THREADS") {
        let n: usize = v
            .parse()
            .with_context(|| format!("SCT_THREADS={v:?} is not a thread count"))?;
        rayon::ThreadPoolBuilder::new().num_threads(n).build_global()?;
    }
    match cli.command {
        Command::Enhance(a) => cmd_enhance(&a),
        Command::Train(a) => cmd_train(&a),
        Command::Eval(a) => cmd_eval(&a),
        Command::Ablation(a) => cmd_ablation(&a),
        Command::Synth(a) => cmd_synth(&a),
    }
}

fn is_png(path: &Path) -> bool {
    path.extension()
        .and_then(|e| e.to_str())
        .is_some_and(|e| e.eq_ignore_ascii_case("png"))
}

fn cmd_enhance(a: &EnhanceArgs) -> Result<Warnings> {
    let mut warnings = Warnings::default();
    if !a.input.exists() {
        bail!("input {} does not exist", a.input.display());
    }
    let model = load_model(&a.checkpoint).with_context(|| format!("loading checkpoint {}", a.checkpoint.display()))?;
    let inputs: Vec<PathBuf> = if a.input.is_dir() {
        let mut files = Vec::new();
        for entry in fs::read_dir(&a.input).with_context(|| format!("listing {}", a.input.display()))? {
            let path = entry?.path();
            if !path.is_file() {
                continue;
            }
            if is_png(&path) {
                files.push(path);
            } else {
                warnings.warn(format_args!("skipping non-PNG file {}", path.display()));
            }
        }
        files.sort();
        files
    } else {
        vec![a.input.clone()]
    };
    fs::create_dir_all(&a.output).with_context(|| format!("creating {}", a.output.display()))?;
    let input_dir = if a.input.is_dir() {
        a.input.as_path()
    } else {
        a.input
            .parent()
            .filter(|p| !p.as_os_str().is_empty())
            .unwrap_or(Path::new("."))
    };
    if fs::canonicalize(input_dir)? == fs::canonicalize(&a.output)? {
        bail!("output directory {} would overwrite the inputs", a.output.display());
    }

    let outcomes: Vec<(PathBuf, Result<()>)> = inputs
        .par_iter()
        .map(|path| {
            let r = (|| {
                let img = ImageTensor::load(path)?;
                let out = model.enhance(&img)?;
                let name = path.file_name().context("input has no file name")?;
                out.save_png(&a.output.join(name))?;
                Ok(())
            })();
            (path.clone(), r)
        })
        .collect();
    let mut written = 0;
    for (path, r) in outcomes {
        match r {
            Ok(()) => written += 1,
            Err(e) => warnings.warn(format_args!("skipped {}: {e:#}", path.display())),
        }
    }
    println!(
        "enhanced {written} of {} image(s) into {}",
        inputs.len(),
        a.output.display()
    );
    Ok(warnings)
}

/// Resolves the model and training configs from the file, presets and flags.
fn resolve_train_config(a: &TrainArgs) -> Result<(SctConfig, TrainConfig)> {
    let file = match &a.config {
        Some(p) => ConfigFile::load(p)?,
        None => ConfigFile::default(),
    };
    let mut model = match (file.model, a.tiny) {
        (Some(_), true) => bail!("--tiny conflicts with the model section of the config file"),
        (Some(m), false) => m,
        (None, true) => SctConfig::tiny(),
        (None, false) => SctConfig::default(),
    };
    if let Some(v) = a.ablation {
        model = v.apply(&model);
    }
    let mut t = file.train.unwrap_or_default();
    if let Some(v) = a.steps {
        t.max_steps = Some(v);
    }
    if let Some(v) = a.epochs {
        t.total_epochs = v;
    }
    if let Some(v) = a.warmup_epochs {
        t.warmup_epochs = v;
    }
    if let Some(v) = a.lr {
        t.learning_rate = v;
    }
    if let Some(v) = a.weight_decay {
        t.weight_decay = v;
    }
    if let Some(v) = a.batch_size {
        t.batch_size = v;
    }
    if let Some(v) = a.crop {
        t.crop = v;
    }
    if a.no_flip {
        t.flip = false;
    }
    if let Some(v) = a.seed {
        t.seed = v;
    }
    if let Some(d) = &a.dataset {
        t.dataset_root = Some(d.clone());
    }
    if a.synthetic {
        t.dataset_root = None;
        // the pair size is chosen here too, so an unset crop follows it
        if a.crop.is_none() && t.crop > a.size {
            t.crop = a.size;
        }
    }
    model.validate()?;
    t.validate()?;
    Ok((model, t))
}

fn cmd_train(a: &TrainArgs) -> Result<Warnings> {
    let (model_cfg, train_cfg) = resolve_train_config(a)?;
    let effective = serde_json::to_string_pretty(&Effective {
        model: &model_cfg,
        train: &train_cfg,
    })?;
    println!("{effective}");
    if a.dry_run {
        return Ok(Warnings::default());
    }
    let data = if a.synthetic {
        synth_pairs(a.pairs, a.size, train_cfg.seed)?
    } else {
        let Some(root) = &train_cfg.dataset_root else {
            bail!("no training data: pass --dataset <root>, set train.dataset_root, or use --synthetic");
        };
        load_pairs(root).with_context(|| format!("loading dataset {}", root.display()))?
    };
    let backbone = match &a.backbone {
        Some(p) => load_backbone(p).with_context(|| format!("loading backbone {}", p.display()))?,
        None => FrozenBackbone::new(BackboneConfig::default(), train_cfg.seed)?,
    };

    fs::create_dir_all(&a.out).with_context(|| format!("creating {}", a.out.display()))?;
    fs::write(a.out.join("config.json"), format!("{effective}\n"))?;
    save_backbone(&backbone, a.out.join("backbone.safetensors"))?;

    let mut model = SctModel::build(model_cfg, train_cfg.seed)?;
    log::info!(
        "training {} parameters on {} pair(s) for {} step(s)",
        model.num_parameters(),
        data.len(),
        train_cfg.schedule(data.len()).total_steps
    );
    let outputs = TrainOutputs { dir: a.out.clone() };
    let report = train(&mut model, &backbone, &data, &train_cfg, Some(&outputs))?;
    save_model(&model, outputs.last())?;
    let (first, last) = report.smoothed_endpoints(10).context("training ran no steps")?;
    println!(
        "final loss {last:.6} (initial {first:.6}, reduction {:.1}%); best epoch {} with mean loss {:.6}",
        100.0 * (1.0 - last / first),
        report.best_epoch,
        report.best_epoch_loss
    );
    println!("checkpoints and history in {}", a.out.display());
    Ok(Warnings::default())
}

fn cmd_eval(a: &EvalArgs) -> Result<Warnings> {
    let mut warnings = Warnings::default();
    for d in [&a.pred, &a.truth] {
        if !d.is_dir() {
            bail!("{} is not a directory", d.display());
        }
    }
    let report = evaluate_dirs(&a.pred, &a.truth)?;
    for o in &report.orphans {
        warnings.warn(format_args!("excluded orphan sequence {o}"));
    }
    for (name, why) in &report.failures {
        warnings.warn(format_args!("could not evaluate {name}: {why}"));
    }
    if report.sequences.is_empty() {
        bail!("no sequence could be evaluated");
    }
    if let Some(parent) = a.report.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent)?;
    }
    report.write_json(&a.report)?;
    let curves = a.curves.clone().unwrap_or_else(|| a.report.with_extension("csv"));
    report.write_curves_csv(&curves)?;
    for s in &report.sequences {
        println!("{:<32} precision@20 {:.4}  AUC {:.4}", s.name, s.precision_at_20, s.auc);
    }
    if let Some(agg) = &report.aggregate {
        println!(
            "{:<32} precision@20 {:.4}  AUC {:.4}",
            format!("aggregate ({} sequences)", agg.sequences),
            agg.precision_at_20,
            agg.auc
        );
    }
    Ok(warnings)
}

fn cmd_ablation(a: &AblationArgs) -> Result<Warnings> {
    let base = if a.tiny {
        SctConfig::tiny()
    } else {
        SctConfig::default()
    };
    println!("{}", serde_json::to_string_pretty(&a.name.apply(&base))?);
    Ok(Warnings::default())
}

fn cmd_synth(a: &SynthArgs) -> Result<Warnings> {
    let pairs = synth_pairs(a.pairs, a.size, a.seed)?;
    for sub in ["low", "normal"] {
        fs::create_dir_all(a.out.join(sub))?;
    }
    for p in &pairs {
        p.low.save_png(&a.out.join("low").join(&p.name))?;
        p.normal.save_png(&a.out.join("normal").join(&p.name))?;
    }
    println!(
        "wrote {} pair(s) of {}x{} to {}",
        pairs.len(),
        a.size,
        a.size,
        a.out.display()
    );
    Ok(Warnings::default())
}
