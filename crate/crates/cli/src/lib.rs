//! Command-line front end: argument definitions and one function per
//! subcommand. `main.rs` only parses arguments and maps errors to exit codes.

pub mod error;
mod overlay;

use std::path::{Path, PathBuf};

use ar2_core::cam::{compute_cam, top_k, upsample_normalize};
use ar2_core::checkpoint::Checkpoint;
use ar2_core::config::{render_repair_config, repair_config, repair_preset, train_config, KvConfig};
use ar2_core::corrupt::{corrupt, image_seed, CorruptionKind, CorruptionSpec, Image};
use ar2_core::data::{load_dataset, synthetic_shapes, write_cifar_binary, write_image_dir, Dataset, ShapeConfig};
use ar2_core::imageio::Raster;
use ar2_core::metrics::{evaluate, EvalCache, Evaluator, TransferMatrix};
use ar2_core::repair::{ar2_repair_with, finetune_only_baseline, Perturbation};
use ar2_core::train::{train_baseline, TrainConfig};
use ar2_core::{CamNet, Tensor};
use clap::{Args, Parser, Subcommand, ValueEnum};

pub use error::{exit, CliError};

pub type Result<T, E = CliError> = std::result::Result<T, E>;

#[derive(Debug, Parser)]
#[command(name = "ar2", version, about = "Attention-guided repair of CAM classifiers against image corruptions")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate the synthetic 10-class shape dataset as train/test splits.
    MakeData(MakeDataArgs),
    /// Train a vanilla network from scratch.
    TrainBaseline(TrainArgs),
    /// Write a corrupted copy of a dataset or of a single PNG image.
    Corrupt(CorruptArgs),
    /// Repair a trained network against one corruption.
    Repair(RepairArgs),
    /// Clean error, per-severity corruption errors, CE and mCE.
    Eval(EvalArgs),
    /// CE differences of repaired models against vanilla, per corruption.
    TransferMatrix(TransferArgs),
    /// Write CAM heat-map panels for clean/corrupted inputs.
    CamDump(CamDumpArgs),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum DataFormat {
    Cifar,
    Png,
}

#[derive(Debug, Args)]
pub struct MakeDataArgs {
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 10_000)]
    pub train: usize,
    #[arg(long, default_value_t = 2_000)]
    pub test: usize,
    #[arg(long, default_value_t = 2024)]
    pub seed: u64,
    #[arg(long, value_enum, default_value_t = DataFormat::Cifar)]
    pub format: DataFormat,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// `key = value` training configuration. Besides the training fields it
    /// may name `data`, `eval_data`, `out` and `report`, resolved relative to
    /// the file.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// CIFAR binary file/directory or PNG class directory.
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Use only the first N training images.
    #[arg(long)]
    pub limit: Option<usize>,
    /// Held-out data for the clean-error report.
    #[arg(long)]
    pub eval_data: Option<PathBuf>,
    /// Write the clean-error report here.
    #[arg(long)]
    pub report: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct CorruptArgs {
    /// Dataset to corrupt (CIFAR binary or PNG class directory).
    #[arg(long = "in", alias = "data", conflicts_with = "image", required_unless_present = "image")]
    pub input: Option<PathBuf>,
    /// Single PNG image to corrupt.
    #[arg(long)]
    pub image: Option<PathBuf>,
    /// Corruption abbreviation or name, e.g. GN or gaussian_noise.
    #[arg(long)]
    pub kind: String,
    #[arg(long, default_value_t = 3)]
    pub severity: u8,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Output file (CIFAR binary or PNG) or, with `--format png`, directory.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, value_enum, default_value_t = DataFormat::Cifar)]
    pub format: DataFormat,
}

#[derive(Debug, Args)]
pub struct RepairArgs {
    /// Checkpoint of the model to repair; also the frozen reference.
    #[arg(long)]
    pub model: PathBuf,
    /// `key = value` repair configuration, applied on top of `--preset`. It
    /// may also name `data`, `out` and `log`, resolved relative to the file.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Training data the repair draws batches from.
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Repaired checkpoint; defaults to `repaired/<KIND>.ckpt` next to
    /// `--model` (`<KIND>.ft.ckpt` with `--no-refine`).
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long, default_value = "cifar")]
    pub preset: String,
    /// Target corruption; overrides the configuration.
    #[arg(long)]
    pub corruption: Option<String>,
    #[arg(long)]
    pub severity: Option<u8>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub iterations: Option<usize>,
    /// Skip the refinement stage (fine-tune-only baseline).
    #[arg(long)]
    pub no_refine: bool,
    /// Per-step log; defaults to the checkpoint path with a `.log` extension.
    #[arg(long)]
    pub log: Option<PathBuf>,
    #[arg(long)]
    pub limit: Option<usize>,
    #[arg(long)]
    pub quiet: bool,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub model: PathBuf,
    /// Baseline for CE; without it only errors are reported.
    #[arg(long)]
    pub baseline: Option<PathBuf>,
    #[arg(long)]
    pub data: PathBuf,
    /// Comma-separated corruption kinds, or `all`.
    #[arg(long, default_value = "all")]
    pub kinds: String,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub cache: Option<PathBuf>,
    /// Write the machine-readable report here.
    #[arg(long)]
    pub report: Option<PathBuf>,
    #[arg(long)]
    pub limit: Option<usize>,
}

#[derive(Debug, Args)]
pub struct TransferArgs {
    /// Vanilla checkpoint.
    #[arg(long, alias = "vanilla")]
    pub baseline: PathBuf,
    /// Directory of repaired checkpoints named `<KIND>.ckpt`, e.g. `GN.ckpt`.
    #[arg(long = "models")]
    pub models_dir: Option<PathBuf>,
    /// `KIND=checkpoint`, once per additional repaired model.
    #[arg(long = "model", value_parser = parse_labelled)]
    pub models: Vec<(String, PathBuf)>,
    /// Accept fewer than 15 repaired models (columns).
    #[arg(long)]
    pub partial: bool,
    #[arg(long)]
    pub data: PathBuf,
    /// Comma-separated row kinds, or `all`.
    #[arg(long, default_value = "all")]
    pub rows: String,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub cache: Option<PathBuf>,
    #[arg(long)]
    pub csv: PathBuf,
    #[arg(long)]
    pub png: Option<PathBuf>,
    #[arg(long)]
    pub limit: Option<usize>,
}

#[derive(Debug, Args)]
pub struct CamDumpArgs {
    /// Checkpoint to explain, typically a repaired model.
    #[arg(long)]
    pub model: PathBuf,
    /// Optional reference (vanilla) checkpoint, shown as the first column.
    #[arg(long = "ref")]
    pub reference: Option<PathBuf>,
    /// Dataset that `--images` indices refer to.
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Comma-separated dataset indices and/or PNG paths.
    #[arg(long, value_delimiter = ',', default_value = "0")]
    pub images: Vec<String>,
    #[arg(long, default_value = "GN")]
    pub kind: String,
    #[arg(long, default_value_t = 3)]
    pub severity: u8,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Explain this class instead of each model's top-1 prediction.
    #[arg(long)]
    pub class: Option<usize>,
    /// Pixel magnification of the panels.
    #[arg(long, default_value_t = 4)]
    pub scale: usize,
    #[arg(long)]
    pub out: PathBuf,
}

fn parse_labelled(s: &str) -> std::result::Result<(String, PathBuf), String> {
    let (label, path) = s.split_once('=').ok_or_else(|| format!("expected LABEL=PATH, got {s:?}"))?;
    if label.is_empty() || label.contains(',') {
        return Err(format!("invalid column label {label:?}"));
    }
    Ok((label.to_string(), PathBuf::from(path)))
}

pub fn parse_kinds(text: &str) -> Result<Vec<CorruptionKind>> {
    if text.eq_ignore_ascii_case("all") {
        return Ok(CorruptionKind::ALL.to_vec());
    }
    Ok(text
        .split(',')
        .map(|s| s.trim().parse::<CorruptionKind>())
        .collect::<std::result::Result<Vec<_>, _>>()?)
}

fn load_data(path: &Path, limit: Option<usize>) -> Result<Dataset> {
    let data = load_dataset(path)?;
    Ok(match limit {
        Some(n) if n < data.len() => data.subset(&(0..n).collect::<Vec<_>>()),
        _ => data,
    })
}

fn write_file(path: &Path, bytes: impl AsRef<[u8]>) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent).map_err(|e| CliError::io(parent, e))?;
    }
    std::fs::write(path, bytes).map_err(|e| CliError::io(path, e))
}

fn load_kv(path: &Option<PathBuf>) -> Result<KvConfig> {
    Ok(match path {
        Some(p) => KvConfig::load(p)?,
        None => KvConfig::default(),
    })
}

/// Removes a path-valued key, resolving it against the config file's
/// directory.
fn take_path(kv: &mut KvConfig, key: &str, config: &Option<PathBuf>) -> Result<Option<PathBuf>> {
    let base = config.as_deref().and_then(Path::parent).unwrap_or(Path::new(""));
    Ok(kv.take::<PathBuf>(key)?.map(|p| base.join(p)))
}

fn required(path: Option<PathBuf>, what: &str) -> Result<PathBuf> {
    path.ok_or_else(|| CliError::Usage(format!("no {what} given (flag or config key)")))
}

fn load_model(path: &Path) -> Result<Checkpoint> {
    Ok(Checkpoint::load(path)?)
}

pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::MakeData(a) => make_data(&a),
        Command::TrainBaseline(a) => train(&a),
        Command::Corrupt(a) => corrupt_cmd(&a),
        Command::Repair(a) => repair(&a),
        Command::Eval(a) => eval(&a),
        Command::TransferMatrix(a) => transfer(&a),
        Command::CamDump(a) => cam_dump(&a),
    }
}

fn make_data(a: &MakeDataArgs) -> Result<()> {
    let all = synthetic_shapes(a.train + a.test, a.seed, &ShapeConfig::default());
    let (train, test) = all.split_at(a.train);
    std::fs::create_dir_all(&a.out).map_err(|e| CliError::io(&a.out, e))?;
    match a.format {
        DataFormat::Cifar => {
            write_cifar_binary(&train, a.out.join("train").join("data_batch_1.bin"))?;
            write_cifar_binary(&test, a.out.join("test").join("test_batch.bin"))?;
        }
        DataFormat::Png => {
            write_image_dir(&train, a.out.join("train"))?;
            write_image_dir(&test, a.out.join("test"))?;
        }
    }
    println!("wrote {} train / {} test images to {}", train.len(), test.len(), a.out.display());
    Ok(())
}

fn train(a: &TrainArgs) -> Result<()> {
    let mut kv = load_kv(&a.config)?;
    let data_path = required(a.data.clone().or(take_path(&mut kv, "data", &a.config)?), "training data")?;
    let out = required(a.out.clone().or(take_path(&mut kv, "out", &a.config)?), "output checkpoint")?;
    let eval_path = a.eval_data.clone().or(take_path(&mut kv, "eval_data", &a.config)?);
    let report_path = a.report.clone().or(take_path(&mut kv, "report", &a.config)?);
    let mut cfg = train_config(&mut kv, TrainConfig::default())?;
    kv.finish()?;
    cfg.epochs = a.epochs.unwrap_or(cfg.epochs);
    cfg.seed = a.seed.unwrap_or(cfg.seed);
    let data = load_data(&data_path, a.limit)?;
    let (model, _) = train_baseline(&data, &cfg, |r| {
        println!(
            "epoch {:>3}  loss {:.4}  train error {:6.2}%  {:>7.1}s",
            r.epoch,
            r.mean_loss,
            100.0 * r.train_error,
            r.elapsed_ms as f64 / 1000.0
        )
    })?;
    let eval_data = match &eval_path {
        Some(p) => load_dataset(p)?,
        None => data.clone(),
    };
    let ev = Evaluator::new(&eval_data, 0);
    let report = evaluate(&ev, &model, None, &[])?;
    let split = if eval_path.is_some() { "held-out" } else { "training" };
    println!("clean error {:.2}% on {} {split} images", report.clean_error, eval_data.len());
    let report_path = report_path.unwrap_or_else(|| out.with_extension("report"));
    write_file(&report_path, report.to_text())?;
    Checkpoint::new(model)
        .with("stage", "vanilla")
        .with("dataset_hash", data.content_hash())
        .with("epochs", cfg.epochs)
        .with("learning_rate", cfg.learning_rate)
        .with("weight_decay", cfg.weight_decay)
        .with("seed", cfg.seed)
        .save(&out)?;
    println!("saved {} (report {})", out.display(), report_path.display());
    Ok(())
}

fn corrupt_cmd(a: &CorruptArgs) -> Result<()> {
    let kind: CorruptionKind = a.kind.parse()?;
    let spec = CorruptionSpec::new(kind, a.severity, a.seed)?;
    if let Some(path) = &a.image {
        let bytes = std::fs::read(path).map_err(|e| CliError::io(path, e))?;
        let raster = Raster::decode(&bytes)?;
        if raster.channels != 3 {
            return Err(CliError::Usage(format!("{} is not an RGB image", path.display())));
        }
        let img = Image::from_rgb8(raster.height, raster.width, &raster.to_u8()?)?;
        let out = corrupt(&img, &spec.with_seed(image_seed(a.seed, 0)));
        write_file(&a.out, Raster::rgb8(out.width(), out.height(), &out.to_rgb8()).encode()?)?;
    } else {
        let path = a.input.as_ref().expect("clap requires --in or --image");
        let data = load_dataset(path)?.corrupted(&spec);
        if a.format == DataFormat::Cifar {
            if let Some(parent) = a.out.parent().filter(|p| !p.as_os_str().is_empty()) {
                std::fs::create_dir_all(parent).map_err(|e| CliError::io(parent, e))?;
            }
        }
        match a.format {
            DataFormat::Cifar => write_cifar_binary(&data, &a.out)?,
            DataFormat::Png => write_image_dir(&data, &a.out)?,
        }
    }
    println!("wrote {} ({} severity {})", a.out.display(), kind.long_name(), a.severity);
    Ok(())
}

fn repair(a: &RepairArgs) -> Result<()> {
    let mut kv = load_kv(&a.config)?;
    let data_path = required(a.data.clone().or(take_path(&mut kv, "data", &a.config)?), "training data")?;
    let out = a.out.clone().or(take_path(&mut kv, "out", &a.config)?);
    let log = a.log.clone().or(take_path(&mut kv, "log", &a.config)?);
    let mut cfg = repair_config(&mut kv, repair_preset(&a.preset)?)?;
    kv.finish()?;
    if let Some(c) = &a.corruption {
        let kind: CorruptionKind = c.parse()?;
        let severity = a.severity.unwrap_or(match cfg.perturbation {
            Perturbation::Corrupt { severity, .. } => severity,
            Perturbation::Identity => 3,
        });
        cfg.perturbation = Perturbation::Corrupt { kind, severity };
    } else if let (Some(s), Perturbation::Corrupt { kind, .. }) = (a.severity, cfg.perturbation) {
        cfg.perturbation = Perturbation::Corrupt { kind, severity: s };
    }
    cfg.seed = a.seed.unwrap_or(cfg.seed);
    cfg.iterations = a.iterations.unwrap_or(cfg.iterations);
    let out = out.unwrap_or_else(|| {
        let stem = match cfg.perturbation {
            Perturbation::Corrupt { kind, .. } => kind.abbrev(),
            Perturbation::Identity => "identity",
        };
        let name = if a.no_refine { format!("{stem}.ft.ckpt") } else { format!("{stem}.ckpt") };
        a.model.parent().unwrap_or(Path::new("")).join("repaired").join(name)
    });
    let log = log.unwrap_or_else(|| out.with_extension("log"));
    let initial = load_model(&a.model)?;
    let data = load_data(&data_path, a.limit)?;
    let quiet = a.quiet;
    let mut observer = |e: &ar2_core::repair::LogEntry| {
        if !quiet {
            println!("{e}");
        }
    };
    let (model, run) = if a.no_refine {
        finetune_only_baseline(&initial.model, &data, &cfg, &mut observer)?
    } else {
        ar2_repair_with(&initial.model, &data, &cfg, &mut observer)?
    };
    let header: String = render_repair_config(&cfg).lines().map(|l| format!("# {l}\n")).collect();
    write_file(&log, format!("{header}{}", run.to_text()))?;
    let mut ck = Checkpoint::new(model)
        .with("stage", run.method)
        .with("parent_hash", &run.initial_hash)
        .with("config_hash", &run.config_hash)
        .with("dataset_hash", &run.dataset_hash);
    for (k, v) in cfg.to_kv() {
        ck = ck.with(&format!("repair.{k}"), v);
    }
    if let Some(parent) = out.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent).map_err(|e| CliError::io(parent, e))?;
    }
    ck.save(&out)?;
    println!("saved {} ({}, {} steps, log {})", out.display(), run.method, run.log.len(), log.display());
    Ok(())
}

fn evaluator_for<'a>(data: &'a Dataset, seed: u64, cache: &Option<PathBuf>) -> Result<Evaluator<'a>> {
    let ev = Evaluator::new(data, seed);
    Ok(match cache {
        Some(dir) => ev.with_cache(EvalCache::open(dir)?),
        None => ev,
    })
}

fn eval(a: &EvalArgs) -> Result<()> {
    let model = load_model(&a.model)?.model;
    let baseline = a.baseline.as_deref().map(load_model).transpose()?.map(|c| c.model);
    let data = load_data(&a.data, a.limit)?;
    let kinds = parse_kinds(&a.kinds)?;
    let ev = evaluator_for(&data, a.seed, &a.cache)?;
    let report = evaluate(&ev, &model, baseline.as_ref(), &kinds)?;
    print!("{}", report.table());
    if let Some(path) = &a.report {
        write_file(path, report.to_text())?;
    }
    Ok(())
}

fn transfer(a: &TransferArgs) -> Result<()> {
    let vanilla = load_model(&a.baseline)?.model;
    let mut sources: Vec<(CorruptionKind, PathBuf)> = Vec::new();
    if let Some(dir) = &a.models_dir {
        for kind in CorruptionKind::ALL {
            let path = dir.join(format!("{}.ckpt", kind.abbrev()));
            if path.exists() {
                sources.push((kind, path));
            }
        }
    }
    for (label, path) in &a.models {
        sources.push((label.parse()?, path.clone()));
    }
    if sources.is_empty() {
        return Err(CliError::Usage("no repaired models given (use --models DIR or --model KIND=PATH)".into()));
    }
    let models: Vec<(CorruptionKind, CamNet<f32>)> = sources
        .iter()
        .map(|(kind, path)| Ok((*kind, load_model(path)?.model)))
        .collect::<Result<_>>()?;
    let data = load_data(&a.data, a.limit)?;
    let rows = parse_kinds(&a.rows)?;
    let ev = evaluator_for(&data, a.seed, &a.cache)?;
    let keyed: Vec<(CorruptionKind, &CamNet<f32>)> = models.iter().map(|(k, m)| (*k, m)).collect();
    let matrix = TransferMatrix::compute(&ev, &vanilla, &keyed, &rows, !a.partial)?;
    write_file(&a.csv, matrix.to_csv())?;
    if let Some(png) = &a.png {
        write_file(png, matrix.to_png()?)?;
    }
    print!("{}", matrix.to_csv());
    let refs: Vec<&CamNet<f32>> = models.iter().map(|(_, m)| m).collect();
    let clean = ev.clean_errors(&refs)?;
    for ((kind, _), e) in models.iter().zip(&clean) {
        println!("clean error {:<4} {:6.2}%", kind.abbrev(), 100.0 * e);
    }
    println!("clean error max  {:6.2}%", 100.0 * clean.iter().cloned().fold(0.0, f64::max));
    let (above, total) = matrix.off_diagonal_above(5.0);
    println!("off-diagonal entries above +5 CE: {above}/{total}");
    Ok(())
}

fn cam_dump(a: &CamDumpArgs) -> Result<()> {
    let kind: CorruptionKind = a.kind.parse()?;
    let model = load_model(&a.model)?.model;
    let reference = a.reference.as_deref().map(load_model).transpose()?.map(|c| c.model);
    let data = a.data.as_deref().map(load_dataset).transpose()?;
    std::fs::create_dir_all(&a.out).map_err(|e| CliError::io(&a.out, e))?;
    let mut models = Vec::new();
    if let Some(r) = &reference {
        models.push(("reference", r));
    }
    models.push(("model", &model));
    for (n, item) in a.images.iter().enumerate() {
        let (clean, stem, index) = match item.trim().parse::<usize>() {
            Ok(index) => {
                let data = data
                    .as_ref()
                    .ok_or_else(|| CliError::Usage("dataset indices need --data".into()))?;
                if index >= data.len() {
                    return Err(CliError::Usage(format!("index {index} is outside the {}-image dataset", data.len())));
                }
                (data.image(index), format!("{index:05}"), index as u64)
            }
            Err(_) => {
                let path = Path::new(item.trim());
                let bytes = std::fs::read(path).map_err(|e| CliError::io(path, e))?;
                let raster = Raster::decode(&bytes)?;
                if raster.channels != 3 {
                    return Err(CliError::Usage(format!("{} is not an RGB image", path.display())));
                }
                let stem = path.file_stem().map_or(format!("image{n}"), |s| s.to_string_lossy().into_owned());
                (Image::from_rgb8(raster.height, raster.width, &raster.to_u8()?)?, stem, n as u64)
            }
        };
        let spec = CorruptionSpec::new(kind, a.severity, image_seed(a.seed, index))?;
        let corrupted = corrupt(&clean, &spec);
        let mut rows = Vec::new();
        for img in [&clean, &corrupted] {
            let mut row = vec![img.clone()];
            for (_, m) in &models {
                let batch = Tensor::new(vec![1, 3, img.height(), img.width()], img.to_chw())
                    .map_err(ar2_core::model::ModelError::from)?;
                let (logits, features) = m.forward(&batch)?;
                let class = a.class.unwrap_or_else(|| top_k(logits.data(), 1)[0]);
                let cam = compute_cam(m, &features, class, "cam-dump")?;
                let heat = upsample_normalize(&cam[0], img.height(), img.width())?;
                row.push(overlay::blend(img, &heat));
            }
            rows.push(row);
        }
        let labels: Vec<&str> = models.iter().map(|(n, _)| *n).collect();
        let path = a.out.join(format!("cam_{stem}_{}.png", kind.abbrev()));
        let panel = overlay::grid(&rows, a.scale)
            .with_text("rows", "clean,corrupted")
            .with_text("columns", &format!("input,{}", labels.join(",")));
        write_file(&path, panel.encode()?)?;
        println!("wrote {}", path.display());
    }
    Ok(())
}
