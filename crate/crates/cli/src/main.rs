//! `detcal`: synthesize data, train the calibration network, calibrate
//! detector output and evaluate it.

mod config;

use std::ffi::OsString;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, ensure, Context, Result};
use clap::{Args, Parser, Subcommand};
use detcal_core::calibrator::{apply_calibration, calibrated_records, write_provenance, DEFAULT_LABEL_THRESHOLD};
use detcal_core::dataset::{
    detections_with_floor, load_ground_truth, read_detection_records, write_detection_records, DetectionMap,
    DEFAULT_DOWNSAMPLE_FACTOR, SCORE_FLOOR,
};
use detcal_core::evaluator::evaluate;
use detcal_core::features::feature_layout;
use detcal_core::network::LrSchedule;
use detcal_core::persistence::{load_checkpoint, save_checkpoint, write_json_atomic};
use detcal_core::pipeline::{fit, training_examples, SceneTrainingSet};
use detcal_core::synth::{generate, synthetic_embeddings, write_dataset, SceneModel, DEFAULT_SYNTH_CLASSES};
use detcal_core::{
    calibrate_dataset, Architecture, CalibrationConfig, CategoryMap, EmbeddingStore, GroundTruth, PoolMode,
    TrainConfig, TrainingSet, Variant,
};

#[derive(Parser, Debug)]
#[command(name = "detcal", version, about = "Contextual calibration of object detector output")]
struct Cli {
    /// Worker threads for per-image and per-example work (default: all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,

    /// Plain-text `key = value` file of flag defaults; command-line flags win.
    #[arg(long, global = true, value_name = "FILE")]
    config: Option<PathBuf>,

    /// Seed for every random choice.
    #[arg(long, global = true, default_value_t = 0)]
    seed: u64,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic dataset: gt.json, dets.json, scene_model.json.
    Synth(SynthArgs),
    /// Train a calibration network on detections and ground truth.
    Train(TrainArgs),
    /// Rewrite detection labels and scores with a trained network.
    Calibrate(CalibrateArgs),
    /// COCO-style AP (and optionally per-class P/R/F1) of a results file.
    Eval(EvalArgs),
    /// Write the feature column layout as JSON.
    Layout(LayoutArgs),
}

const SUBCOMMANDS: [&str; 5] = ["synth", "train", "calibrate", "eval", "layout"];

#[derive(Args, Debug)]
struct SynthArgs {
    #[arg(long, value_name = "DIR")]
    out: PathBuf,
    #[arg(long, default_value_t = 100)]
    images: usize,
    #[arg(long, default_value_t = DEFAULT_SYNTH_CLASSES)]
    classes: usize,
    /// Also write `embeddings.jsonl` with vectors of this width.
    #[arg(long, value_name = "DIM")]
    embedding_dim: Option<usize>,
}

#[derive(Args, Debug)]
struct TrainArgs {
    #[arg(long, value_name = "FILE")]
    gt: PathBuf,
    #[arg(long, value_name = "FILE")]
    dets: PathBuf,
    /// Checkpoint path; the training log and label mapping are written beside it.
    #[arg(long, value_name = "FILE")]
    out: PathBuf,
    #[arg(long, value_name = "FILE")]
    embeddings: Option<PathBuf>,
    #[arg(long, default_value = "set_cnn")]
    arch: Variant,
    #[arg(long, default_value = "masked")]
    pool: PoolMode,
    /// Feature-stage widths, comma separated (default: the variant's).
    #[arg(long, value_delimiter = ',')]
    widths: Option<Vec<usize>>,
    /// Classifier hidden widths, comma separated; `none` for no hidden layer.
    #[arg(long)]
    head: Option<String>,
    #[arg(long, default_value_t = 0.01)]
    lr: f64,
    #[arg(long, default_value_t = 10)]
    epochs: usize,
    #[arg(long, default_value_t = 32)]
    batch: usize,
    #[arg(long, default_value_t = 0.0)]
    momentum: f64,
    /// Multiply the learning rate by `--lr-gamma` every this many epochs.
    #[arg(long, requires = "lr_gamma")]
    lr_step: Option<usize>,
    #[arg(long, requires = "lr_step")]
    lr_gamma: Option<f64>,
    /// Keep one background example in this many.
    #[arg(long, default_value_t = DEFAULT_DOWNSAMPLE_FACTOR)]
    downsample: u32,
    #[arg(long, default_value_t = SCORE_FLOOR)]
    score_floor: f64,
    /// Validation ground truth, for the final validation F1.
    #[arg(long, value_name = "FILE", requires = "val_dets")]
    val_gt: Option<PathBuf>,
    #[arg(long, value_name = "FILE", requires = "val_gt")]
    val_dets: Option<PathBuf>,
    /// Training log path (default: `<out>.log.json`).
    #[arg(long, value_name = "FILE")]
    log: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct CalibrateArgs {
    #[arg(long, value_name = "FILE")]
    model: PathBuf,
    /// Ground truth supplying image sizes and the category list.
    #[arg(long, value_name = "FILE")]
    gt: PathBuf,
    #[arg(long, value_name = "FILE")]
    dets: PathBuf,
    #[arg(long, value_name = "FILE")]
    out: PathBuf,
    #[arg(long, value_name = "FILE")]
    embeddings: Option<PathBuf>,
    #[arg(long, default_value_t = DEFAULT_LABEL_THRESHOLD)]
    threshold: f64,
    #[arg(long, default_value_t = SCORE_FLOOR)]
    score_floor: f64,
    /// Per-detection JSON lines with original and calibrated values.
    #[arg(long, value_name = "FILE")]
    provenance: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct EvalArgs {
    #[arg(long, value_name = "FILE")]
    gt: PathBuf,
    #[arg(long, value_name = "FILE")]
    results: PathBuf,
    #[arg(long, value_name = "FILE")]
    report: PathBuf,
    /// Add per-class precision, recall and F1 of detection labels.
    #[arg(long)]
    classification: bool,
    /// Results below this score are ignored; 0 keeps everything.
    #[arg(long, default_value_t = 0.0)]
    score_floor: f64,
}

#[derive(Args, Debug)]
struct LayoutArgs {
    #[arg(long, value_name = "FILE")]
    out: PathBuf,
}

fn sidecar(path: &Path, suffix: &str) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(suffix);
    PathBuf::from(s)
}

fn load_detections(path: &Path, gt: &GroundTruth, floor: f64) -> Result<DetectionMap> {
    ensure!((0.0..=1.0).contains(&floor), "score floor must lie in [0, 1]");
    let records = read_detection_records(path)?;
    let dets = detections_with_floor(&records, gt, floor)?;
    let kept: usize = dets.values().map(Vec::len).sum();
    log::info!("{}: {} records, {kept} kept", path.display(), records.len());
    Ok(dets)
}

fn load_embeddings(path: Option<&Path>) -> Result<Option<EmbeddingStore>> {
    path.map(|p| EmbeddingStore::load(p).with_context(|| format!("loading embeddings {}", p.display())))
        .transpose()
}

fn synth(args: &SynthArgs, seed: u64) -> Result<()> {
    let model = SceneModel::contextual(args.classes, seed);
    let data = generate(&model, args.images)?;
    write_dataset(&args.out, &model, &data)?;
    if let Some(dim) = args.embedding_dim {
        let path = args.out.join("embeddings.jsonl");
        let store = synthetic_embeddings(&data.detections, dim, seed);
        std::fs::write(&path, store.to_jsonl()).with_context(|| format!("writing {}", path.display()))?;
    }
    log::info!(
        "wrote {} images, {} annotations, {} detections to {}",
        data.ground_truth.images.len(),
        data.ground_truth.annotations.len(),
        data.detections.len(),
        args.out.display()
    );
    Ok(())
}

fn architecture(args: &TrainArgs, embedding_dim: usize) -> Result<Architecture> {
    let mut arch = Architecture::for_variant(args.arch);
    arch.pool = args.pool;
    arch.embedding_dim = embedding_dim;
    if let Some(w) = &args.widths {
        arch.feature_widths = w.clone();
    }
    if let Some(h) = &args.head {
        arch.head_hidden = if h == "none" || h.is_empty() {
            Vec::new()
        } else {
            h.split(',')
                .map(|s| s.trim().parse().with_context(|| format!("bad head width '{s}'")))
                .collect::<Result<_>>()?
        };
    }
    arch.validate()?;
    Ok(arch)
}

fn train(args: &TrainArgs, seed: u64) -> Result<()> {
    let gt = load_ground_truth(&args.gt)?;
    let dets = load_detections(&args.dets, &gt, args.score_floor)?;
    let embeddings = load_embeddings(args.embeddings.as_deref())?;
    let arch = architecture(args, embeddings.as_ref().map_or(0, EmbeddingStore::dim))?;
    let config = TrainConfig {
        learning_rate: args.lr,
        epochs: args.epochs,
        batch_size: args.batch,
        seed,
        momentum: args.momentum,
        schedule: match (args.lr_step, args.lr_gamma) {
            (Some(every), Some(gamma)) => LrSchedule::StepDecay { every, gamma },
            _ => LrSchedule::Constant,
        },
    };
    config.validate()?;

    let examples = training_examples(&dets, &gt, args.downsample, seed)?;
    let set = SceneTrainingSet::new(&dets, &gt, embeddings.as_ref(), examples)?;
    log::info!("{} training examples, {} parameters", set.len(), arch.param_count());
    let truth = set.labels();

    let val = match (&args.val_gt, &args.val_dets) {
        (Some(g), Some(d)) => {
            let vgt = load_ground_truth(g)?;
            ensure!(
                vgt.categories == gt.categories,
                "validation categories differ from training categories"
            );
            let vdets = load_detections(d, &vgt, args.score_floor)?;
            Some((vgt, vdets))
        }
        _ => None,
    };
    let val_set = match &val {
        Some((g, d)) => Some(SceneTrainingSet::new(
            d,
            g,
            embeddings.as_ref(),
            training_examples(d, g, 1, seed)?,
        )?),
        None => None,
    };
    let val_truth = val_set.as_ref().map(SceneTrainingSet::labels);
    let val_pair = val_set.as_ref().zip(val_truth.as_deref());

    let (params, log) = fit(arch, &config, &set, &truth, val_pair, gt.categories.num_labels())?;
    save_checkpoint(&params, &args.out)?;
    let log_path = args.log.clone().unwrap_or_else(|| sidecar(&args.out, ".log.json"));
    write_json_atomic(&log_path, &log).with_context(|| format!("writing {}", log_path.display()))?;
    gt.categories.save(&sidecar(&args.out, ".categories.json"))?;
    log::info!(
        "train F1 {:.4}{}; checkpoint {}",
        log.train_f1,
        log.val_f1.map_or(String::new(), |v| format!(", val F1 {v:.4}")),
        args.out.display()
    );
    Ok(())
}

fn calibrate(args: &CalibrateArgs) -> Result<()> {
    ensure!(args.threshold.is_finite(), "threshold must be finite");
    let params = load_checkpoint(&args.model).with_context(|| format!("loading model {}", args.model.display()))?;
    let gt = load_ground_truth(&args.gt)?;
    let categories_path = sidecar(&args.model, ".categories.json");
    if categories_path.exists() {
        let trained = CategoryMap::load(&categories_path)?;
        if trained != gt.categories {
            bail!(
                "the model was trained with different categories than {}",
                args.gt.display()
            );
        }
    }
    let dets = load_detections(&args.dets, &gt, args.score_floor)?;
    let embeddings = load_embeddings(args.embeddings.as_deref())?;
    let config = CalibrationConfig {
        threshold: args.threshold,
        num_labels: gt.categories.num_labels(),
    };
    let calibration = calibrate_dataset(&params, &dets, &gt, embeddings.as_ref(), &config)?;
    let records = calibrated_records(&dets, &calibration, &gt.categories);
    write_detection_records(&args.out, &records)?;
    if let Some(p) = &args.provenance {
        write_provenance(p, &dets, &calibration, &gt.categories)?;
    }
    let swapped = calibration.values().flatten().filter(|c| c.label_swapped).count();
    let calibrated = apply_calibration(&dets, &calibration);
    log::info!(
        "calibrated {} detections, {swapped} labels swapped ({} images); wrote {}",
        records.len(),
        calibrated.len(),
        args.out.display()
    );
    Ok(())
}

fn eval(args: &EvalArgs) -> Result<()> {
    let gt = load_ground_truth(&args.gt)?;
    let dets = load_detections(&args.results, &gt, args.score_floor)?;
    let report = evaluate(&dets, &gt, args.classification);
    write_json_atomic(&args.report, &report).with_context(|| format!("writing {}", args.report.display()))?;
    eprint!("{}", report.to_table(Some(&gt.categories)));
    Ok(())
}

fn layout(args: &LayoutArgs) -> Result<()> {
    write_json_atomic(&args.out, &feature_layout()).with_context(|| format!("writing {}", args.out.display()))
}

fn run(cli: Cli) -> Result<()> {
    if let Some(n) = cli.threads {
        ensure!(n > 0, "--threads must be positive");
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .context("configuring the worker pool")?;
    }
    match &cli.command {
        Command::Synth(a) => synth(a, cli.seed),
        Command::Train(a) => train(a, cli.seed),
        Command::Calibrate(a) => calibrate(a),
        Command::Eval(a) => eval(a),
        Command::Layout(a) => layout(a),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .init();
    let args: Vec<OsString> = std::env::args_os().collect();
    let args = match config::expand(args, &SUBCOMMANDS) {
        Ok(a) => a,
        Err(e) => {
            eprintln!("error: {e:#}");
            return ExitCode::from(2);
        }
    };
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = e.exit_code();
            let _ = e.print();
            return ExitCode::from(code as u8);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}
