use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, bail, Context};
use chrono::{DateTime, Utc};
use clap::{Args, Parser, Subcommand};
use serde::{de::DeserializeOwned, Serialize};

use rivolution::experiment::{run_repro, ReproConfig};
use rivolution::fusion::{predict, FusionStrategy, NaiveMfsr, SrModel, StrategyKind};
use rivolution::ingest::{build_scene, Dataset, DatasetManifest, IngestConfig, ManifestEntry, SceneSeries, Split};
use rivolution::metrics::{emit_comparison, emit_report, EvalReport, REPORT_JSON};
use rivolution::raster::{read_image, read_mask, write_logits, write_mask};
use rivolution::synth::{generate_dataset, DatasetSpec};
use rivolution::trainer::{evaluate_checkpoint, train, write_training_log, Checkpoint, EvalOptions, Regime, TrainConfig};
use rivolution::width::{read_transects, widths_for_scene, write_transects, write_widths_csv, WidthRule};
use rivolution::Error;

const EXIT_USAGE: u8 = 1;
const EXIT_DATA: u8 = 2;
const EXIT_RUNTIME: u8 = 3;

/// File written next to every output recording the resolved settings of the run.
const RUN_CONFIG: &str = "run_config.json";

#[derive(Parser, Debug)]
#[command(name = "rivolution", version, about = "River masks and widths from low-resolution satellite time series")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic paired dataset.
    Generate(GenerateArgs),
    /// Pair high-resolution labels with low-resolution frame stacks.
    Pair(PairArgs),
    /// Train a segmentation model.
    Train(TrainArgs),
    /// Predict a high-resolution mask for one scene.
    Predict(PredictArgs),
    /// Measure river widths on a mask along transects.
    Widths(WidthsArgs),
    /// Evaluate a checkpoint on a dataset split.
    Evaluate(EvaluateArgs),
    /// Compare several evaluation reports.
    Report(ReportArgs),
    /// Run the full benchmark: generate, train every method, evaluate, report.
    Repro(ReproArgs),
}

#[derive(Args, Debug)]
struct GenerateArgs {
    /// TOML file with dataset settings; flags override it.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    scenes: Option<usize>,
    /// Side of the high-resolution scene in pixels.
    #[arg(long)]
    hr_size: Option<usize>,
    #[arg(long)]
    factor: Option<usize>,
    #[arg(long)]
    frames: Option<usize>,
    #[arg(long)]
    cloud_prob: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct PairArgs {
    /// One directory per scene holding `label/`, and optionally `hr_image/` and `transects.csv`.
    #[arg(long)]
    hr_dir: PathBuf,
    /// One directory per scene holding one raster directory per acquisition.
    #[arg(long)]
    lr_dir: PathBuf,
    #[arg(long, default_value_t = rivolution::ingest::DEFAULT_WINDOW_DAYS)]
    window_days: i64,
    #[arg(long, default_value_t = rivolution::ingest::DEFAULT_FRAMES)]
    frames: usize,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct TrainArgs {
    /// TOML file with training settings; flags override it.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Dataset manifest, or the directory containing `manifest.toml`.
    #[arg(long)]
    dataset: PathBuf,
    #[arg(long)]
    regime: Option<Regime>,
    #[arg(long)]
    strategy: Option<StrategyKind>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct PredictArgs {
    #[arg(long)]
    strategy: StrategyKind,
    #[arg(long)]
    checkpoint: PathBuf,
    /// Scene directory as written by `generate` or `pair`.
    #[arg(long)]
    scene: PathBuf,
    #[arg(long, default_value_t = rivolution::model::DEFAULT_THRESHOLD)]
    threshold: f64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct WidthsArgs {
    /// Mask raster directory.
    #[arg(long)]
    mask: PathBuf,
    #[arg(long)]
    transects: PathBuf,
    /// Measure the transect length inside water instead of counting water pixels.
    #[arg(long)]
    geometric_correction: bool,
    /// Output CSV file.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct EvaluateArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    dataset: PathBuf,
    #[arg(long, default_value_t = Split::Test)]
    split: Split,
    #[arg(long, default_value_t = rivolution::model::DEFAULT_THRESHOLD)]
    threshold: f64,
    /// Seeds the choice of the single-frame reference per scene.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    geometric_correction: bool,
    /// Skip the single-frame comparison.
    #[arg(long)]
    no_single_frame: bool,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct ReportArgs {
    /// Evaluation output directories (or their report.json files).
    #[arg(long, num_args = 1.., required = true)]
    compare: Vec<PathBuf>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct ReproArgs {
    /// TOML file with benchmark settings; flags override it.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, value_delimiter = ',')]
    seeds: Option<Vec<u64>>,
    #[arg(long)]
    scenes: Option<usize>,
    #[arg(long)]
    epochs: Option<usize>,
    /// Also write every generated dataset.
    #[arg(long)]
    save_datasets: bool,
    #[arg(long)]
    out: PathBuf,
}

/// Marks failures caused by bad inputs rather than by the computation.
#[derive(Debug)]
struct DataError(String);

impl std::fmt::Display for DataError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for DataError {}

fn data_err(msg: impl Into<String>) -> anyhow::Error {
    DataError(msg.into()).into()
}

fn load_toml<T: DeserializeOwned + Default>(path: Option<&Path>) -> anyhow::Result<T> {
    let Some(path) = path else {
        return Ok(T::default());
    };
    let text = fs::read_to_string(path).map_err(|e| data_err(format!("cannot read {}: {e}", path.display())))?;
    toml::from_str(&text).map_err(|e| data_err(format!("invalid config {}: {e}", path.display())))
}

fn write_run_config<T: Serialize>(out: &Path, config: &T) -> anyhow::Result<()> {
    fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    let path = out.join(RUN_CONFIG);
    fs::write(&path, serde_json::to_string_pretty(config)?).with_context(|| format!("writing {}", path.display()))
}

fn manifest_path(p: &Path) -> PathBuf {
    if p.is_dir() {
        p.join("manifest.toml")
    } else {
        p.to_path_buf()
    }
}

fn subdirs(dir: &Path) -> anyhow::Result<Vec<PathBuf>> {
    let mut out = Vec::new();
    for entry in fs::read_dir(dir).map_err(|e| data_err(format!("cannot read {}: {e}", dir.display())))? {
        let path = entry?.path();
        if path.is_dir() {
            out.push(path);
        }
    }
    out.sort();
    Ok(out)
}

fn cmd_generate(args: GenerateArgs) -> anyhow::Result<()> {
    let mut spec: DatasetSpec = load_toml(args.config.as_deref())?;
    if let Some(n) = args.scenes {
        spec.scenes = n;
    }
    if let Some(size) = args.hr_size {
        spec.base.hr_size = size;
        spec.base.center_x_m = size as f64 * spec.base.hr_pixel_size / 2.0;
    }
    if let Some(f) = args.factor {
        spec.base.downsample_factor = f;
    }
    if let Some(m) = args.frames {
        spec.base.frame_count = m;
    }
    if let Some(p) = args.cloud_prob {
        spec.base.cloud_probability = p;
    }
    if let Some(s) = args.seed {
        spec.seed = s;
    }
    spec.validate()?;
    let dataset = generate_dataset(&spec)?;
    dataset.save(&args.out)?;
    write_run_config(&args.out, &spec)?;
    println!("wrote {} scenes to {}", dataset.scenes.len(), args.out.display());
    Ok(())
}

fn label_attr<'a>(attrs: &'a toml::Table, key: &str) -> Option<&'a str> {
    attrs.get(key).and_then(|v| v.as_str())
}

fn cmd_pair(args: PairArgs) -> anyhow::Result<()> {
    let config = IngestConfig {
        window_days: args.window_days,
        frames: args.frames,
    };
    let mut scenes = Vec::new();
    let mut warnings = Vec::new();
    for scene_dir in subdirs(&args.hr_dir)? {
        let id = scene_dir.file_name().unwrap().to_string_lossy().into_owned();
        let label_dir = scene_dir.join("label");
        let (_, attrs) = read_mask(&label_dir)?;
        let anchor: DateTime<Utc> = label_attr(&attrs, "anchor")
            .ok_or_else(|| data_err(format!("scene {id}: label has no `anchor` attribute")))?
            .parse()
            .map_err(|e| data_err(format!("scene {id}: bad anchor: {e}")))?;
        let split: Split = match label_attr(&attrs, "split") {
            Some(s) => s.parse().map_err(|e: Error| data_err(format!("scene {id}: {e}")))?,
            None => Split::Train,
        };
        let frame_dirs = subdirs(&args.lr_dir.join(&id))?;
        let (mut scene, w) = build_scene(&id, &label_dir, &frame_dirs, anchor, &config)?;
        warnings.extend(w);
        if scene_dir.join("hr_image").is_dir() {
            let (img, _) = read_image(&scene_dir.join("hr_image"))?;
            scene = scene.with_hr_image(img)?;
        }
        let transects = scene_dir.join("transects.csv");
        if transects.is_file() {
            scene = scene.with_transects(read_transects(&transects)?);
        }
        scenes.push((split, scene));
    }
    let Some((_, first)) = scenes.first() else {
        return Err(data_err(format!("no scene directories under {}", args.hr_dir.display())));
    };
    let mut manifest = DatasetManifest::new(args.window_days, args.frames, first.bands());
    for (split, s) in &scenes {
        manifest.scenes.push(ManifestEntry {
            scene_id: s.scene_id().into(),
            split: *split,
            path: format!("scenes/{}", s.scene_id()),
            anchor: s.anchor(),
        });
    }
    let dataset = Dataset { manifest, scenes };
    dataset.save(&args.out)?;
    for w in &warnings {
        log::warn!("{w}");
    }
    write_run_config(
        &args.out,
        &serde_json::json!({
            "hr_dir": args.hr_dir, "lr_dir": args.lr_dir,
            "window_days": args.window_days, "frames": args.frames, "warnings": warnings,
        }),
    )?;
    println!("paired {} scenes into {}", dataset.scenes.len(), args.out.display());
    Ok(())
}

fn cmd_train(args: TrainArgs) -> anyhow::Result<()> {
    let mut config: TrainConfig = load_toml(args.config.as_deref())?;
    if let Some(r) = args.regime {
        config.regime = r;
    }
    if let Some(s) = args.strategy {
        config.strategy = s;
    }
    if let Some(e) = args.epochs {
        config.epochs = e;
    }
    if let Some(s) = args.seed {
        config.seed = s;
    }
    config.validate()?;
    let dataset = Dataset::load(&manifest_path(&args.dataset))?;
    let ckpt = train(&config, &dataset)?;
    write_run_config(&args.out, &config)?;
    ckpt.save(&args.out.join("checkpoint.json"))?;
    write_training_log(&args.out.join("training_log.jsonl"), &ckpt.log)?;
    println!(
        "{}: best val F1 {:.4} at lr {} epoch {}",
        config.method(),
        ckpt.best_val_f1,
        ckpt.learning_rate,
        ckpt.epoch
    );
    Ok(())
}

fn cmd_predict(args: PredictArgs) -> anyhow::Result<()> {
    let ckpt = Checkpoint::load(&args.checkpoint)?;
    let model = ckpt.segmenter()?;
    let scene = SceneSeries::load(&args.scene)?;
    let naive = NaiveMfsr;
    let sr: Option<&dyn SrModel> = (args.strategy == StrategyKind::Sr).then_some(&naive as &dyn SrModel);
    let strategy = FusionStrategy::new(args.strategy, &model, sr)?;
    let (logits, mask) = predict(&strategy, &scene, args.threshold)?;
    let mut attrs = toml::Table::new();
    attrs.insert("scene_id".into(), scene.scene_id().into());
    attrs.insert("strategy".into(), args.strategy.name().into());
    attrs.insert("threshold".into(), args.threshold.into());
    write_logits(&args.out.join("logits"), &logits, attrs.clone())?;
    write_mask(&args.out.join("mask"), &mask, attrs)?;
    if !scene.transects().is_empty() {
        let widths = widths_for_scene(&mask, scene.transects(), WidthRule::PixelCount);
        write_widths_csv(&args.out.join("widths.csv"), &widths)?;
        write_transects(&args.out.join("transects.csv"), scene.transects())?;
    }
    write_run_config(
        &args.out,
        &serde_json::json!({
            "strategy": args.strategy, "checkpoint": args.checkpoint,
            "scene": args.scene, "threshold": args.threshold,
        }),
    )?;
    println!("wrote prediction for {} to {}", scene.scene_id(), args.out.display());
    Ok(())
}

fn width_rule(geometric: bool) -> WidthRule {
    if geometric {
        WidthRule::ChordLength
    } else {
        WidthRule::PixelCount
    }
}

fn cmd_widths(args: WidthsArgs) -> anyhow::Result<()> {
    let (mask, _) = read_mask(&args.mask)?;
    let transects = read_transects(&args.transects)?;
    let widths = widths_for_scene(&mask, &transects, width_rule(args.geometric_correction));
    write_widths_csv(&args.out, &widths)?;
    println!("measured {} transects into {}", widths.len(), args.out.display());
    Ok(())
}

fn cmd_evaluate(args: EvaluateArgs) -> anyhow::Result<()> {
    let ckpt = Checkpoint::load(&args.checkpoint)?;
    let dataset = Dataset::load(&manifest_path(&args.dataset))?;
    let opts = EvalOptions {
        threshold: args.threshold,
        width_rule: width_rule(args.geometric_correction),
        single_frame: !args.no_single_frame,
        seed: args.seed,
        frames: ckpt.config.frames,
    };
    let mut report = evaluate_checkpoint(&ckpt, &dataset, args.split, &opts)?;
    let run = serde_json::json!({
        "checkpoint": args.checkpoint, "dataset": args.dataset, "split": args.split,
        "eval": opts, "train": report.config.clone(),
    });
    report.config = run.clone();
    emit_report(&report, &args.out)?;
    write_run_config(&args.out, &run)?;
    println!(
        "{} on {}: F1 {:.4} over {} scenes",
        report.method,
        args.split,
        report.aggregate.f1,
        report.scenes.len()
    );
    Ok(())
}

fn cmd_report(args: ReportArgs) -> anyhow::Result<()> {
    let reports = args
        .compare
        .iter()
        .map(|p| {
            let path = if p.is_dir() { p.join(REPORT_JSON) } else { p.clone() };
            EvalReport::load(&path)
        })
        .collect::<Result<Vec<_>, _>>()?;
    emit_comparison(&reports, &args.out)?;
    write_run_config(&args.out, &serde_json::json!({ "compare": args.compare }))?;
    println!("compared {} reports into {}", reports.len(), args.out.display());
    Ok(())
}

fn cmd_repro(args: ReproArgs) -> anyhow::Result<()> {
    let mut config: ReproConfig = load_toml(args.config.as_deref())?;
    if let Some(seeds) = args.seeds {
        config.seeds = seeds;
    }
    if let Some(n) = args.scenes {
        config.dataset.scenes = n;
    }
    if let Some(e) = args.epochs {
        config.train.epochs = e;
    }
    config.save_datasets |= args.save_datasets;
    config.validate()?;
    write_run_config(&args.out, &config)?;
    let report = run_repro(&config, &args.out)?;
    for row in &report.acceptance {
        println!(
            "criterion {} {}: {} ({})",
            row.criterion,
            if row.pass { "PASS" } else { "FAIL" },
            row.check,
            row.measured
        );
    }
    println!("report written to {}", args.out.join("repro.json").display());
    Ok(())
}

fn exit_code(err: &anyhow::Error) -> u8 {
    if let Some(e) = err.downcast_ref::<Error>() {
        return if e.is_data_error() { EXIT_DATA } else { EXIT_RUNTIME };
    }
    if err.downcast_ref::<DataError>().is_some() {
        EXIT_DATA
    } else {
        EXIT_RUNTIME
    }
}

fn configure_workers() -> anyhow::Result<()> {
    let Ok(v) = std::env::var("RIVOLUTION_WORKERS") else {
        return Ok(());
    };
    let n: usize = v
        .parse()
        .ok()
        .filter(|n| *n > 0)
        .ok_or_else(|| data_err(format!("RIVOLUTION_WORKERS must be a positive integer, got {v:?}")))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| anyhow!("configuring worker pool: {e}"))
}

fn run(cli: Cli) -> anyhow::Result<()> {
    configure_workers()?;
    match cli.command {
        Command::Generate(a) => cmd_generate(a),
        Command::Pair(a) => cmd_pair(a),
        Command::Train(a) => cmd_train(a),
        Command::Predict(a) => cmd_predict(a),
        Command::Widths(a) => cmd_widths(a),
        Command::Evaluate(a) => cmd_evaluate(a),
        Command::Report(a) => cmd_report(a),
        Command::Repro(a) => {
            if a.seeds.as_ref().is_some_and(|s| s.is_empty()) {
                bail!(data_err("--seeds needs at least one value"));
            }
            cmd_repro(a)
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(EXIT_USAGE) } else { ExitCode::SUCCESS };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
