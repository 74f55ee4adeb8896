//! Minibatch gradient-descent training of the toy detector, with per-epoch
//! calibration and detection metrics on a validation split.
//!
//! Baseline mode trains on single-pass logits and boxes; MCCL mode runs N
//! MC-dropout passes, feeds the per-class mean logits and mean boxes to the
//! task loss, and adds the auxiliary calibration loss on top.

use serde::{Deserialize, Serialize};

use crate::autodiff::{logsumexp, sum, Tape, Value};
use crate::error::{Error, Result};
use crate::losses::{iou_value, mccl_aux, PositiveLocation};
use crate::matching::{match_detections, MatchParams};
use crate::metrics::compute_ece;
use crate::rng::Rng;
use crate::types::{Detection, GroundTruthObject};

use super::data::{assign_positives, generate_dataset, CellTarget, SyntheticScene};
use super::model::{SceneForward, ToyDetector, DEFAULT_HIDDEN_DIM};

/// Weight of the (1 - IoU) regression term inside the task loss.
const LAMBDA_REG: f64 = 1.0;
/// Background cells outnumber positives roughly 3:1; their cross-entropy
/// terms are down-weighted so early training does not collapse to
/// predicting background everywhere (the role focal loss plays in
/// full-scale dense detectors).
const BACKGROUND_CE_WEIGHT: f64 = 0.25;
/// Score threshold when evaluating validation splits; low-confidence dust
/// is excluded from calibration metrics, as in standard D-ECE protocols.
const EVAL_SCORE_THRESHOLD: f64 = 0.3;
/// Confidence bins for the logged validation D-ECE.
const EVAL_CONF_BINS: usize = 10;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TrainMode {
    Baseline,
    Mccl,
}

/// Training hyperparameters.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    /// Minibatch size N_b.
    pub batch_size: usize,
    pub learning_rate: f64,
    /// Weight of the localization term in the auxiliary loss.
    pub beta: f64,
    /// MC-dropout passes N; must be >= 2 in MCCL mode.
    pub mc_passes: usize,
    /// Dropout rate before each head.
    pub dropout: f64,
    pub seed: u64,
    pub mode: TrainMode,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 30,
            batch_size: 4,
            learning_rate: 0.2,
            beta: 1.0,
            mc_passes: 5,
            dropout: 0.1,
            seed: 0,
            mode: TrainMode::Baseline,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::InvalidParam("batch size must be positive".into()));
        }
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return Err(Error::InvalidParam("learning rate must be positive".into()));
        }
        if self.beta < 0.0 || !self.beta.is_finite() {
            return Err(Error::InvalidParam("beta must be >= 0".into()));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::InvalidParam("dropout must be in [0, 1)".into()));
        }
        if self.mode == TrainMode::Mccl && self.mc_passes < 2 {
            return Err(Error::InvalidParam(
                "mccl mode needs at least 2 MC passes".into(),
            ));
        }
        Ok(())
    }
}

/// Train/validation scene splits.
#[derive(Debug, Clone)]
pub struct ToyDataset {
    pub train: Vec<SyntheticScene>,
    pub val_in_domain: Vec<SyntheticScene>,
    pub val_shifted: Vec<SyntheticScene>,
    pub num_classes: usize,
    pub shift_level: f64,
}

impl ToyDataset {
    /// In-domain train and validation splits plus a shifted validation
    /// split, all derived deterministically from one seed.
    pub fn generate(
        num_classes: usize,
        n_train: usize,
        n_val: usize,
        shift_level: f64,
        seed: u64,
    ) -> Result<Self> {
        Ok(ToyDataset {
            train: generate_dataset(n_train, num_classes, 0.0, seed ^ 0x747261696e)?,
            val_in_domain: generate_dataset(n_val, num_classes, 0.0, seed ^ 0x76616c5f69)?,
            val_shifted: generate_dataset(n_val, num_classes, shift_level, seed ^ 0x76616c5f73)?,
            num_classes,
            shift_level,
        })
    }
}

/// One line of the training log.
#[derive(Debug, Clone, Serialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub task_loss: f64,
    pub l_mcc: f64,
    pub l_lc: f64,
    /// Validation D-ECE (confidence-only grid) on the in-domain split.
    pub dece: f64,
    /// AP@0.5 on the in-domain split.
    pub ap50: f64,
}

/// Detection and calibration quality of one split.
#[derive(Debug, Clone, Copy, Serialize)]
pub struct SplitEval {
    pub dece: f64,
    pub ap50: f64,
    pub n_detections: usize,
}

/// Final training artifacts.
#[derive(Debug)]
pub struct TrainOutcome {
    pub model: ToyDetector,
    pub log: Vec<EpochStats>,
    pub final_in_domain: SplitEval,
    pub final_shifted: SplitEval,
}

/// Cross-entropy over K+1 classes at every cell (positives use their class,
/// the rest use background, with background terms down-weighted) plus
/// LAMBDA_REG * (1 - IoU) over positives.
pub fn task_loss<'t>(
    forward: &SceneForward<'t>,
    targets: &[Option<CellTarget>],
    num_classes: usize,
) -> Value<'t> {
    let background = num_classes;
    let mut weight_total = 0.0;
    let ce_terms: Vec<Value<'t>> = forward
        .mean_cls_logits
        .iter()
        .zip(targets)
        .map(|(logits, target)| {
            let (class, weight) = match target {
                Some(t) => (t.class, 1.0),
                None => (background, BACKGROUND_CE_WEIGHT),
            };
            weight_total += weight;
            (logsumexp(logits) - logits[class]) * weight
        })
        .collect();
    let ce = sum(&ce_terms) / weight_total;

    if forward.positives.is_empty() {
        return ce;
    }
    let iou_terms: Vec<Value<'t>> = forward
        .positives
        .iter()
        .map(|p| 1.0 - iou_value(&p.mean_box, &p.gt_box))
        .collect();
    let iou_mean = sum(&iou_terms) / iou_terms.len() as f64;
    ce + iou_mean * LAMBDA_REG
}

/// Evaluate a model on a list of scenes: confidence-only D-ECE (10 bins)
/// and AP@0.5 over the matched detections.
pub fn evaluate_split(model: &ToyDetector, scenes: &[SyntheticScene]) -> Result<SplitEval> {
    let mut detections: Vec<Detection> = Vec::new();
    let mut ground_truth: Vec<GroundTruthObject> = Vec::new();
    for scene in scenes {
        detections.extend(model.infer(scene, EVAL_SCORE_THRESHOLD));
        ground_truth.extend(scene.objects.iter().cloned());
    }
    let matched = match_detections(&detections, &ground_truth, &MatchParams::default())?;
    if matched.is_empty() {
        return Err(Error::EmptyInput);
    }
    let dece = compute_ece(&matched, EVAL_CONF_BINS)?;
    let ap50 = mean_average_precision(&matched, &ground_truth, model.num_classes);
    Ok(SplitEval {
        dece,
        ap50,
        n_detections: matched.len(),
    })
}

/// AP@0.5 with 101-point interpolation, averaged over classes that have
/// ground truth. Matching reuses the greedy matcher's correctness flags.
pub fn mean_average_precision(
    matched: &[crate::matching::MatchedDetection],
    ground_truth: &[GroundTruthObject],
    num_classes: usize,
) -> f64 {
    let mut class_aps = Vec::new();
    for class in 0..num_classes {
        let n_gt = ground_truth.iter().filter(|g| g.label == class).count();
        if n_gt == 0 {
            continue;
        }
        let mut rows: Vec<(f64, bool)> = matched
            .iter()
            .filter(|m| m.detection.label == class)
            .map(|m| (m.detection.score, m.correct))
            .collect();
        rows.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap_or(std::cmp::Ordering::Equal));
        let mut tp = 0usize;
        let mut fp = 0usize;
        let mut precision = Vec::with_capacity(rows.len());
        let mut recall = Vec::with_capacity(rows.len());
        for (_, correct) in rows {
            if correct {
                tp += 1;
            } else {
                fp += 1;
            }
            precision.push(tp as f64 / (tp + fp) as f64);
            recall.push(tp as f64 / n_gt as f64);
        }
        // precision envelope, then 101-point interpolation
        for i in (0..precision.len().saturating_sub(1)).rev() {
            if precision[i] < precision[i + 1] {
                precision[i] = precision[i + 1];
            }
        }
        let mut ap = 0.0;
        for step in 0..=100 {
            let r = step as f64 / 100.0;
            let p = recall
                .iter()
                .position(|&rc| rc >= r)
                .map_or(0.0, |idx| precision[idx]);
            ap += p / 101.0;
        }
        class_aps.push(ap);
    }
    if class_aps.is_empty() {
        return 0.0;
    }
    class_aps.iter().sum::<f64>() / class_aps.len() as f64
}

/// Train a fresh detector. Deterministic for a fixed (config, dataset)
/// pair; aborts with a diagnostic if the loss turns non-finite.
pub fn train(config: &TrainConfig, data: &ToyDataset) -> Result<TrainOutcome> {
    config.validate()?;
    let model = ToyDetector::init(
        data.num_classes,
        DEFAULT_HIDDEN_DIM,
        config.dropout,
        config.seed,
    )?;
    train_from(model, config, data)
}

/// Continue training from existing parameters (checkpoint resume).
pub fn train_from(
    mut model: ToyDetector,
    config: &TrainConfig,
    data: &ToyDataset,
) -> Result<TrainOutcome> {
    config.validate()?;
    let targets: Vec<Vec<Option<CellTarget>>> =
        data.train.iter().map(assign_positives).collect();
    let mut shuffle_rng = Rng::derive(config.seed, 0x73687566666c65);
    let mut dropout_rng = Rng::derive(config.seed, 0x64726f706f7574);
    // The baseline is the plain task loss without the inserted dropout
    // layers; MC dropout is part of the calibration method.
    let (n_passes, dropout_active) = match config.mode {
        TrainMode::Baseline => (1, false),
        TrainMode::Mccl => (config.mc_passes, true),
    };

    let mut log = Vec::with_capacity(config.epochs);
    for epoch in 1..=config.epochs {
        // constant learning rate with one step-down late in the run; the
        // IoU term's kinked gradients otherwise keep the box field cycling
        let lr = if epoch * 10 > config.epochs * 6 {
            config.learning_rate * 0.2
        } else {
            config.learning_rate
        };
        let mut order: Vec<usize> = (0..data.train.len()).collect();
        shuffle_rng.shuffle(&mut order);

        let mut epoch_task = 0.0;
        let mut epoch_mcc = 0.0;
        let mut epoch_lc = 0.0;
        let mut n_batches = 0usize;

        for batch in order.chunks(config.batch_size) {
            let tape = Tape::with_capacity(1 << 20);
            let mv = model.lift(&tape);

            let mut task_terms = Vec::with_capacity(batch.len());
            let mut aux_batch: Vec<PositiveLocation<'_>> = Vec::new();
            for (sample_index, &scene_index) in batch.iter().enumerate() {
                let scene = &data.train[scene_index];
                let scene_targets = &targets[scene_index];
                let fwd = model.forward_scene(
                    &mv,
                    scene,
                    scene_targets,
                    n_passes,
                    dropout_active.then_some(&mut dropout_rng),
                );
                task_terms.push(task_loss(&fwd, scene_targets, data.num_classes));
                if config.mode == TrainMode::Mccl {
                    for (location_index, p) in fwd.positives.into_iter().enumerate() {
                        aux_batch.push(PositiveLocation {
                            sample_index,
                            location_index,
                            logits: p.fg_logits,
                            boxes: p.boxes,
                            gt_class: p.gt_class,
                            gt_box: p.gt_box,
                        });
                    }
                }
            }

            let task = sum(&task_terms) / task_terms.len() as f64;
            let (loss, mcc_value, lc_value) = if config.mode == TrainMode::Mccl {
                let aux = mccl_aux(&aux_batch, config.beta)?;
                (task + aux.total, aux.l_mcc.value(), aux.l_lc.value())
            } else {
                (task, 0.0, 0.0)
            };

            if !loss.value().is_finite() {
                return Err(Error::Diverged(format!(
                    "non-finite loss at epoch {epoch} (task {})",
                    task.value()
                )));
            }

            let grads = tape.backward(loss);
            model.apply_gradients(&mv, &grads, lr);

            epoch_task += task.value();
            epoch_mcc += mcc_value;
            epoch_lc += lc_value;
            n_batches += 1;
        }

        // A model that transiently emits no detections has no defined
        // calibration error; log NaN for that epoch rather than abort.
        let (dece, ap50) = match evaluate_split(&model, &data.val_in_domain) {
            Ok(eval) => (eval.dece, eval.ap50),
            Err(Error::EmptyInput) => (f64::NAN, 0.0),
            Err(e) => return Err(e),
        };
        log.push(EpochStats {
            epoch,
            task_loss: epoch_task / n_batches as f64,
            l_mcc: epoch_mcc / n_batches as f64,
            l_lc: epoch_lc / n_batches as f64,
            dece,
            ap50,
        });
    }

    let final_in_domain = evaluate_split(&model, &data.val_in_domain)?;
    let final_shifted = evaluate_split(&model, &data.val_shifted)?;
    Ok(TrainOutcome {
        model,
        log,
        final_in_domain,
        final_shifted,
    })
}

/// Render the per-epoch log as CSV (LF line endings).
pub fn log_to_csv(log: &[EpochStats]) -> String {
    let mut out = String::from("epoch,task_loss,l_mcc,l_lc,dece,ap50\n");
    for row in log {
        out.push_str(&format!(
            "{},{:.6},{:.6},{:.6},{:.6},{:.6}\n",
            row.epoch, row.task_loss, row.l_mcc, row.l_lc, row.dece, row.ap50
        ));
    }
    out
}
