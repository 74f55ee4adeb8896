//! detcal: calibration evaluation, diagram tables, toy-detector training,
//! and temperature scaling, glued together over JSON/CSV files.
//!
//! Exit codes: 0 success, 1 unreadable or invalid input (messages carry
//! serde's line/column anchors), 2 valid input with nothing to evaluate.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use detcal::formats::{
    self, curve_csv, heatmap_csv, histogram_csv, load_detection_records, load_ground_truth_file,
    reliability_csv, report_to_json, resolve_eval_input, write_atomic, DetectionRecord,
};
use detcal::matching::{match_detections, MatchParams, MatchedDetection};
use detcal::metrics::{
    compute_dece, confidence_histogram, heatmap_2d, property_curve, reliability_table, BinGrid,
    Dimension,
};
use detcal::posthoc::{fit_temperature, TemperatureModel};
use detcal::toydet::{train, Checkpoint, ToyDataset, TrainConfig, TrainMode};
use detcal::types::{Detection, GroundTruthObject};
use detcal::Error as DetcalError;

#[derive(Parser)]
#[command(name = "detcal", version, about = "Object-detection confidence calibration toolkit")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Compute ECE / D-ECE from detection and ground-truth files.
    Eval(EvalArgs),
    /// Emit a diagram table (reliability, histogram, curve, heatmap) as CSV.
    Diagram(DiagramArgs),
    /// Train the toy detector on synthetic scenes.
    Train(TrainArgs),
    /// Fit a temperature on held-out logits and labels.
    Ts(TsArgs),
    /// Rescale detection scores with a fitted temperature.
    ApplyTs(ApplyTsArgs),
}

#[derive(Args)]
struct InputArgs {
    /// Detections file (JSON array of COCO-style results).
    #[arg(long)]
    detections: PathBuf,
    /// Ground-truth file (images, annotations, categories).
    #[arg(long)]
    ground_truth: PathBuf,
    /// IoU threshold for a detection to count as correct.
    #[arg(long, default_value_t = 0.5)]
    iou: f64,
    /// Drop detections scoring below this before matching.
    #[arg(long, default_value_t = 0.0)]
    min_score: f64,
}

#[derive(Args)]
struct EvalArgs {
    #[command(flatten)]
    input: InputArgs,
    /// Bins over the confidence dimension.
    #[arg(long, default_value_t = 10)]
    conf_bins: usize,
    /// Grid dimensions, comma separated; must start with conf.
    #[arg(long, default_value = "conf,cx,cy,w,h", value_delimiter = ',')]
    dims: Vec<String>,
    /// Bins per box-property dimension.
    #[arg(long, default_value_t = 5)]
    property_bins: usize,
    /// Report output path (JSON).
    #[arg(long)]
    out: PathBuf,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum DiagramKind {
    Reliability,
    Histogram,
    Curve,
    Heatmap,
}

#[derive(Args)]
struct DiagramArgs {
    #[command(flatten)]
    input: InputArgs,
    #[arg(long, value_enum)]
    kind: DiagramKind,
    /// Bins for confidence-based diagrams.
    #[arg(long, default_value_t = 10)]
    conf_bins: usize,
    /// Bins per box-property dimension.
    #[arg(long, default_value_t = 5)]
    property_bins: usize,
    /// Box property for curve diagrams (cx, cy, w, h).
    #[arg(long)]
    dim: Option<String>,
    /// Two dimensions for heatmaps, comma separated.
    #[arg(long, value_delimiter = ',')]
    dims: Option<Vec<String>>,
    /// CSV output path.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum ModeArg {
    Baseline,
    Mccl,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long, value_enum)]
    mode: ModeArg,
    #[arg(long, default_value_t = 1.0)]
    beta: f64,
    #[arg(long, default_value_t = 5)]
    mc_passes: usize,
    #[arg(long, default_value_t = 0.1)]
    dropout: f64,
    #[arg(long)]
    epochs: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Shift level of the shifted validation split.
    #[arg(long, default_value_t = 0.0)]
    shift_level: f64,
    #[arg(long, default_value_t = 3)]
    classes: usize,
    #[arg(long, default_value_t = 64)]
    train_scenes: usize,
    #[arg(long, default_value_t = 48)]
    val_scenes: usize,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    learning_rate: Option<f64>,
    /// Checkpoint output path (JSON).
    #[arg(long)]
    out_model: PathBuf,
    /// Training log output path (CSV).
    #[arg(long)]
    out_log: PathBuf,
}

#[derive(Args)]
struct TsArgs {
    /// JSON array of K-length logit vectors.
    #[arg(long)]
    logits: PathBuf,
    /// JSON array of class indices.
    #[arg(long)]
    labels: PathBuf,
    /// Output path for the temperature JSON.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct ApplyTsArgs {
    /// Detections file; every record must carry logits.
    #[arg(long)]
    detections: PathBuf,
    /// Temperature JSON produced by `detcal ts`.
    #[arg(long)]
    temperature: PathBuf,
    /// Output detections file.
    #[arg(long)]
    out: PathBuf,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            // clap already formats usage errors; --help/--version land here too
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(DetcalError::EmptyInput) => {
            eprintln!("error: no detections to calibrate");
            ExitCode::from(2)
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
    }
}

fn run(cli: Cli) -> Result<(), DetcalError> {
    match cli.command {
        Command::Eval(args) => cmd_eval(args),
        Command::Diagram(args) => cmd_diagram(args),
        Command::Train(args) => cmd_train(args),
        Command::Ts(args) => cmd_ts(args),
        Command::ApplyTs(args) => cmd_apply_ts(args),
    }
}

/// Worker count from DETCAL_THREADS; 0 or unset means auto.
fn worker_count() -> usize {
    let requested = std::env::var("DETCAL_THREADS")
        .ok()
        .and_then(|v| v.parse::<usize>().ok())
        .unwrap_or(0);
    if requested > 0 {
        requested
    } else {
        std::thread::available_parallelism().map_or(1, |n| n.get())
    }
}

/// Match detections against ground truth, sharded by image across worker
/// threads. Per-image matching is independent, and results reassemble in
/// input order, so the output does not depend on the thread count.
fn match_parallel(
    detections: &[Detection],
    ground_truth: &[GroundTruthObject],
    params: &MatchParams,
) -> Result<Vec<MatchedDetection>, DetcalError> {
    let workers = worker_count();
    if workers <= 1 || detections.len() < 1024 {
        return match_detections(detections, ground_truth, params);
    }

    let mut image_ids: Vec<i64> = detections.iter().map(|d| d.image_id).collect();
    image_ids.sort_unstable();
    image_ids.dedup();
    let shards: Vec<&[i64]> = image_ids
        .chunks(image_ids.len().div_ceil(workers))
        .collect();

    let mut shard_results: Vec<Result<Vec<(usize, MatchedDetection)>, DetcalError>> =
        Vec::with_capacity(shards.len());
    std::thread::scope(|scope| {
        let handles: Vec<_> = shards
            .iter()
            .map(|shard| {
                scope.spawn(move || {
                    let indexed: Vec<(usize, &Detection)> = detections
                        .iter()
                        .enumerate()
                        .filter(|(_, d)| shard.binary_search(&d.image_id).is_ok())
                        .collect();
                    let dets: Vec<Detection> =
                        indexed.iter().map(|(_, d)| (*d).clone()).collect();
                    let gts: Vec<GroundTruthObject> = ground_truth
                        .iter()
                        .filter(|g| shard.binary_search(&g.image_id).is_ok())
                        .cloned()
                        .collect();
                    let matched = match_detections(&dets, &gts, params)?;
                    Ok(indexed
                        .iter()
                        .map(|(i, _)| *i)
                        .zip(matched)
                        .collect::<Vec<_>>())
                })
            })
            .collect();
        for handle in handles {
            shard_results.push(handle.join().expect("matching worker panicked"));
        }
    });

    let mut ordered: Vec<(usize, MatchedDetection)> = Vec::with_capacity(detections.len());
    for result in shard_results {
        ordered.extend(result?);
    }
    ordered.sort_by_key(|(i, _)| *i);
    Ok(ordered.into_iter().map(|(_, m)| m).collect())
}

/// Shared input pipeline: load files, normalize, match.
fn load_and_match(input: &InputArgs) -> Result<Vec<MatchedDetection>, DetcalError> {
    let records = load_detection_records(&input.detections)?;
    let gt_file = load_ground_truth_file(&input.ground_truth)?;
    let resolved = resolve_eval_input(&records, &gt_file)?;
    let params = MatchParams {
        iou_threshold: input.iou,
        num_classes: Some(resolved.categories.num_classes()),
        min_score: input.min_score,
    };
    match_parallel(&resolved.detections, &resolved.ground_truth, &params)
}

fn parse_dims(names: &[String]) -> Result<Vec<Dimension>, DetcalError> {
    names.iter().map(|n| Dimension::parse(n)).collect()
}

fn cmd_eval(args: EvalArgs) -> Result<(), DetcalError> {
    let matched = load_and_match(&args.input)?;
    let dims = parse_dims(&args.dims)?;
    let properties: Vec<Dimension> = dims
        .iter()
        .copied()
        .filter(|d| *d != Dimension::Conf)
        .collect();
    if dims.first() != Some(&Dimension::Conf) {
        return Err(DetcalError::InvalidParam(
            "--dims must start with conf".into(),
        ));
    }
    let grid = BinGrid::with_properties(args.conf_bins, &properties, args.property_bins)?;
    let report = compute_dece(&matched, &grid, args.input.iou)?;
    if report.n_clamped > 0 {
        eprintln!(
            "warning: {} detections had box properties clamped into edge bins",
            report.n_clamped
        );
    }
    write_atomic(&args.out, report_to_json(&report)?.as_bytes())?;
    println!(
        "dece {:.6} ece {:.6} over {} detections",
        report.dece, report.ece, report.n_detections
    );
    Ok(())
}

fn cmd_diagram(args: DiagramArgs) -> Result<(), DetcalError> {
    let matched = load_and_match(&args.input)?;
    let csv = match args.kind {
        DiagramKind::Reliability => reliability_csv(&reliability_table(&matched, args.conf_bins)?),
        DiagramKind::Histogram => histogram_csv(&confidence_histogram(&matched, args.conf_bins)?),
        DiagramKind::Curve => {
            let name = args.dim.as_deref().ok_or_else(|| {
                DetcalError::InvalidParam("--dim is required for curve diagrams".into())
            })?;
            let dim = Dimension::parse(name)?;
            curve_csv(&property_curve(&matched, dim, args.property_bins)?)
        }
        DiagramKind::Heatmap => {
            let names = args.dims.as_deref().unwrap_or(&[]);
            let dims = if names.is_empty() {
                vec![Dimension::Cx, Dimension::Cy]
            } else {
                parse_dims(names)?
            };
            if dims.len() != 2 {
                return Err(DetcalError::InvalidParam(
                    "heatmaps need exactly two --dims".into(),
                ));
            }
            heatmap_csv(&heatmap_2d(
                &matched,
                dims[0],
                dims[1],
                args.property_bins,
                args.property_bins,
            )?)
        }
    };
    write_atomic(&args.out, csv.as_bytes())?;
    Ok(())
}

fn cmd_train(args: TrainArgs) -> Result<(), DetcalError> {
    let defaults = TrainConfig::default();
    let config = TrainConfig {
        epochs: args.epochs,
        batch_size: args.batch_size.unwrap_or(defaults.batch_size),
        learning_rate: args.learning_rate.unwrap_or(defaults.learning_rate),
        beta: args.beta,
        mc_passes: args.mc_passes,
        dropout: args.dropout,
        seed: args.seed,
        mode: match args.mode {
            ModeArg::Baseline => TrainMode::Baseline,
            ModeArg::Mccl => TrainMode::Mccl,
        },
    };
    let data = ToyDataset::generate(
        args.classes,
        args.train_scenes,
        args.val_scenes,
        args.shift_level,
        args.seed,
    )?;
    let outcome = train(&config, &data)?;
    Checkpoint::new(outcome.model, config).save(&args.out_model)?;
    write_atomic(
        &args.out_log,
        detcal::toydet::log_to_csv(&outcome.log).as_bytes(),
    )?;
    let summary = serde_json::json!({
        "in_domain": outcome.final_in_domain,
        "shifted": outcome.final_shifted,
    });
    println!("{summary}");
    Ok(())
}

fn cmd_ts(args: TsArgs) -> Result<(), DetcalError> {
    let logits = formats::load_logits(&args.logits)?;
    let labels = formats::load_labels(&args.labels)?;
    let model = fit_temperature(&logits, &labels)?;
    write_atomic(&args.out, serde_json::to_string_pretty(&model)?.as_bytes())?;
    println!("temperature {:.6}", model.temperature);
    Ok(())
}

fn load_temperature(path: &Path) -> Result<TemperatureModel, DetcalError> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| DetcalError::InvalidValue(format!("{}: {e}", path.display())))?;
    let model: TemperatureModel = serde_json::from_str(&text)
        .map_err(|e| DetcalError::InvalidValue(format!("{}: {e}", path.display())))?;
    TemperatureModel::new(model.temperature)
}

fn cmd_apply_ts(args: ApplyTsArgs) -> Result<(), DetcalError> {
    let records = load_detection_records(&args.detections)?;
    let model = load_temperature(&args.temperature)?;
    let rescaled: Result<Vec<DetectionRecord>, DetcalError> = records
        .into_iter()
        .map(|mut rec| {
            let logits = rec.logits.as_ref().ok_or(DetcalError::MissingLogits)?;
            let probs = model.scale(logits);
            rec.score = probs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            Ok(rec)
        })
        .collect();
    write_atomic(
        &args.out,
        serde_json::to_string_pretty(&rescaled?)?.as_bytes(),
    )?;
    Ok(())
}
