//! Python bindings: the calibration metrics, MC-dropout aggregation,
//! auxiliary losses (forward values and gradients), temperature scaling,
//! and a small entry point into the toy trainer.
//!
//! Boxes cross the boundary as (cx, cy, w, h) tuples in normalized
//! coordinates; matrices as lists of lists.

use pyo3::exceptions::PyValueError;
use pyo3::prelude::*;
use pyo3::types::{PyDict, PyList};

use detcal::autodiff::Tape;
use detcal::losses;
use detcal::matching::{self, MatchParams};
use detcal::metrics;
use detcal::posthoc;
use detcal::toydet;
use detcal::types::{Detection, GroundTruthObject, NormBox};
use detcal::uncertainty;

fn err(e: detcal::Error) -> PyErr {
    PyValueError::new_err(e.to_string())
}

fn norm_box(b: (f64, f64, f64, f64)) -> PyResult<NormBox> {
    NormBox::new(b.0, b.1, b.2, b.3).map_err(err)
}

fn boxes4(rows: Vec<Vec<f64>>) -> PyResult<Vec<[f64; 4]>> {
    rows.into_iter()
        .map(|r| {
            <[f64; 4]>::try_from(r.as_slice())
                .map_err(|_| PyValueError::new_err("box rows must have 4 entries"))
        })
        .collect()
}

/// IoU of two (cx, cy, w, h) boxes in normalized coordinates.
#[pyfunction]
fn iou(a: (f64, f64, f64, f64), b: (f64, f64, f64, f64)) -> PyResult<f64> {
    Ok(detcal::types::iou(&norm_box(a)?, &norm_box(b)?))
}

/// Greedy class-aware matching. Detections are (image_id, label, score,
/// (cx, cy, w, h)); ground truth is (image_id, label, (cx, cy, w, h)).
/// Returns per-detection dicts with `correct`, `iou`, and `matched_gt`.
#[pyfunction]
#[pyo3(signature = (detections, ground_truth, iou_threshold=0.5, min_score=0.0))]
fn match_detections<'py>(
    py: Python<'py>,
    detections: Vec<(i64, usize, f64, (f64, f64, f64, f64))>,
    ground_truth: Vec<(i64, usize, (f64, f64, f64, f64))>,
    iou_threshold: f64,
    min_score: f64,
) -> PyResult<Bound<'py, PyList>> {
    let dets: Vec<Detection> = detections
        .into_iter()
        .map(|(image_id, label, score, b)| Ok(Detection::new(image_id, label, score, norm_box(b)?)))
        .collect::<PyResult<_>>()?;
    let gts: Vec<GroundTruthObject> = ground_truth
        .into_iter()
        .map(|(image_id, label, b)| Ok(GroundTruthObject::new(image_id, label, norm_box(b)?)))
        .collect::<PyResult<_>>()?;
    let params = MatchParams {
        iou_threshold,
        num_classes: None,
        min_score,
    };
    let matched = matching::match_detections(&dets, &gts, &params).map_err(err)?;
    let out = PyList::empty(py);
    for m in matched {
        let row = PyDict::new(py);
        row.set_item("image_id", m.detection.image_id)?;
        row.set_item("label", m.detection.label)?;
        row.set_item("score", m.detection.score)?;
        row.set_item("correct", m.correct)?;
        row.set_item("iou", m.iou)?;
        row.set_item("matched_gt", m.matched_gt)?;
        out.append(row)?;
    }
    Ok(out)
}

fn matched_from_parts(
    scores: &[f64],
    correct: &[bool],
    boxes: Option<&[[f64; 4]]>,
) -> PyResult<Vec<matching::MatchedDetection>> {
    if scores.len() != correct.len() {
        return Err(PyValueError::new_err("scores and correct differ in length"));
    }
    if let Some(bs) = boxes {
        if bs.len() != scores.len() {
            return Err(PyValueError::new_err("boxes and scores differ in length"));
        }
    }
    scores
        .iter()
        .zip(correct)
        .enumerate()
        .map(|(i, (&score, &ok))| {
            let b = boxes.map_or([0.5, 0.5, 0.5, 0.5], |bs| bs[i]);
            Ok(matching::MatchedDetection {
                detection: Detection::new(
                    0,
                    0,
                    score,
                    NormBox {
                        cx: b[0],
                        cy: b[1],
                        w: b[2],
                        h: b[3],
                    },
                ),
                correct: ok,
                matched_gt: None,
                iou: 0.0,
            })
        })
        .collect()
}

/// Expected calibration error over confidence-only equal-width bins.
#[pyfunction]
#[pyo3(signature = (scores, correct, n_bins=10))]
fn compute_ece(scores: Vec<f64>, correct: Vec<bool>, n_bins: usize) -> PyResult<f64> {
    let matched = matched_from_parts(&scores, &correct, None)?;
    metrics::compute_ece(&matched, n_bins).map_err(err)
}

/// Multidimensional D-ECE. `boxes` supplies (cx, cy, w, h) per detection;
/// `dims` lists grid dimensions starting with "conf".
#[pyfunction]
#[pyo3(signature = (scores, correct, boxes, dims=vec!["conf".into()], conf_bins=10, property_bins=5))]
fn compute_dece<'py>(
    py: Python<'py>,
    scores: Vec<f64>,
    correct: Vec<bool>,
    boxes: Vec<Vec<f64>>,
    dims: Vec<String>,
    conf_bins: usize,
    property_bins: usize,
) -> PyResult<Bound<'py, PyDict>> {
    let boxes = boxes4(boxes)?;
    let matched = matched_from_parts(&scores, &correct, Some(&boxes))?;
    let parsed: Vec<metrics::Dimension> = dims
        .iter()
        .map(|d| metrics::Dimension::parse(d))
        .collect::<Result<_, _>>()
        .map_err(err)?;
    let properties: Vec<metrics::Dimension> = parsed
        .iter()
        .copied()
        .filter(|d| *d != metrics::Dimension::Conf)
        .collect();
    let grid =
        metrics::BinGrid::with_properties(conf_bins, &properties, property_bins).map_err(err)?;
    let report = metrics::compute_dece(&matched, &grid, 0.5).map_err(err)?;
    let out = PyDict::new(py);
    out.set_item("dece", report.dece)?;
    out.set_item("ece", report.ece)?;
    out.set_item("n_detections", report.n_detections)?;
    let bins = PyList::empty(py);
    for b in &report.bins {
        let row = PyDict::new(py);
        row.set_item("index", b.index.clone())?;
        row.set_item("count", b.count)?;
        row.set_item("conf", b.conf())?;
        row.set_item("prec", b.precision())?;
        bins.append(row)?;
    }
    out.set_item("bins", bins)?;
    Ok(out)
}

/// Reliability-diagram rows: (bin_center, conf | None, acc | None, count).
#[pyfunction]
#[pyo3(signature = (scores, correct, n_bins=10))]
fn reliability_table(
    scores: Vec<f64>,
    correct: Vec<bool>,
    n_bins: usize,
) -> PyResult<Vec<(f64, Option<f64>, Option<f64>, usize)>> {
    let matched = matched_from_parts(&scores, &correct, None)?;
    Ok(metrics::reliability_table(&matched, n_bins)
        .map_err(err)?
        .into_iter()
        .map(|r| (r.bin_center, r.conf, r.acc, r.count))
        .collect())
}

/// Softmax of the column-wise mean of an N x K logit matrix.
#[pyfunction]
fn mean_confidence(logits: Vec<Vec<f64>>) -> PyResult<Vec<f64>> {
    uncertainty::mean_confidence(&logits).map_err(err)
}

/// Per-class certainty 1 - tanh(population variance of each logit column).
#[pyfunction]
fn classwise_certainty(logits: Vec<Vec<f64>>) -> PyResult<Vec<f64>> {
    uncertainty::classwise_certainty(&logits).map_err(err)
}

/// Column means of N x 4 box samples.
#[pyfunction]
fn box_mean(boxes: Vec<Vec<f64>>) -> PyResult<[f64; 4]> {
    Ok(uncertainty::box_mean(&boxes4(boxes)?))
}

/// Joint box certainty 1 - tanh(u).
#[pyfunction]
fn box_certainty(boxes: Vec<Vec<f64>>) -> PyResult<f64> {
    uncertainty::box_certainty(&boxes4(boxes)?).map_err(err)
}

/// Element-wise (mean_confidence + certainty) / 2.
#[pyfunction]
fn fuse(mean_conf: Vec<f64>, certainty: Vec<f64>) -> PyResult<Vec<f64>> {
    if mean_conf.len() != certainty.len() {
        return Err(PyValueError::new_err("length mismatch"));
    }
    Ok(mean_conf
        .iter()
        .zip(&certainty)
        .map(|(s, c)| (s + c) / 2.0)
        .collect())
}

fn lift_batch<'t>(
    tape: &'t Tape,
    batch: &[(usize, Vec<Vec<f64>>, Vec<[f64; 4]>, usize, NormBox)],
) -> Vec<losses::PositiveLocation<'t>> {
    batch
        .iter()
        .enumerate()
        .map(
            |(location_index, (sample_index, logits, boxes, gt_class, gt_box))| {
                losses::PositiveLocation {
                    sample_index: *sample_index,
                    location_index,
                    logits: logits.iter().map(|row| tape.values(row)).collect(),
                    boxes: boxes
                        .iter()
                        .map(|b| {
                            [
                                tape.value(b[0]),
                                tape.value(b[1]),
                                tape.value(b[2]),
                                tape.value(b[3]),
                            ]
                        })
                        .collect(),
                    gt_class: *gt_class,
                    gt_box: *gt_box,
                }
            },
        )
        .collect()
}

type RawLocation = (usize, Vec<Vec<f64>>, Vec<Vec<f64>>, usize, (f64, f64, f64, f64));

fn parse_batch(
    batch: Vec<RawLocation>,
) -> PyResult<Vec<(usize, Vec<Vec<f64>>, Vec<[f64; 4]>, usize, NormBox)>> {
    batch
        .into_iter()
        .map(|(sample_index, logits, boxes, gt_class, gt_box)| {
            Ok((
                sample_index,
                logits,
                boxes4(boxes)?,
                gt_class,
                norm_box(gt_box)?,
            ))
        })
        .collect()
}

/// Auxiliary calibration loss over positive locations. Each location is
/// (sample_index, logits N x K, boxes N x 4, gt_class, gt_box). Returns
/// (l_mcc, l_lc, total).
#[pyfunction]
#[pyo3(signature = (batch, beta=1.0))]
fn mccl_aux(batch: Vec<RawLocation>, beta: f64) -> PyResult<(f64, f64, f64)> {
    let parsed = parse_batch(batch)?;
    let tape = Tape::new();
    let lifted = lift_batch(&tape, &parsed);
    let out = losses::mccl_aux(&lifted, beta).map_err(err)?;
    Ok((out.l_mcc.value(), out.l_lc.value(), out.total.value()))
}

/// Gradient of the combined auxiliary loss with respect to every logit
/// and box parameter, as (logit_grads per location, box_grads per location).
#[pyfunction]
#[pyo3(signature = (batch, beta=1.0))]
fn mccl_aux_grad(
    batch: Vec<RawLocation>,
    beta: f64,
) -> PyResult<(Vec<Vec<Vec<f64>>>, Vec<Vec<Vec<f64>>>)> {
    let parsed = parse_batch(batch)?;
    let tape = Tape::new();
    let lifted = lift_batch(&tape, &parsed);
    let out = losses::mccl_aux(&lifted, beta).map_err(err)?;
    let grads = tape.backward(out.total);
    let logit_grads = lifted
        .iter()
        .map(|loc| {
            loc.logits
                .iter()
                .map(|row| row.iter().map(|v| grads.wrt(*v)).collect())
                .collect()
        })
        .collect();
    let box_grads = lifted
        .iter()
        .map(|loc| {
            loc.boxes
                .iter()
                .map(|b| b.iter().map(|v| grads.wrt(*v)).collect())
                .collect()
        })
        .collect();
    Ok((logit_grads, box_grads))
}

/// Fit a temperature by NLL on held-out logits/labels.
#[pyfunction]
fn fit_temperature(logits: Vec<Vec<f64>>, labels: Vec<usize>) -> PyResult<f64> {
    posthoc::fit_temperature(&logits, &labels)
        .map(|m| m.temperature)
        .map_err(err)
}

/// softmax(logits / T).
#[pyfunction]
fn apply_temperature(logits: Vec<f64>, temperature: f64) -> PyResult<Vec<f64>> {
    let model = posthoc::TemperatureModel::new(temperature).map_err(err)?;
    Ok(model.scale(&logits))
}

/// Train the toy detector on synthetic scenes and report final metrics.
#[pyfunction]
#[pyo3(signature = (mode="baseline", epochs=5, seed=0, classes=3, train_scenes=16, val_scenes=16,
                    shift_level=1.0, beta=1.0, mc_passes=5, dropout=0.1))]
#[allow(clippy::too_many_arguments)]
fn train_toy<'py>(
    py: Python<'py>,
    mode: &str,
    epochs: usize,
    seed: u64,
    classes: usize,
    train_scenes: usize,
    val_scenes: usize,
    shift_level: f64,
    beta: f64,
    mc_passes: usize,
    dropout: f64,
) -> PyResult<Bound<'py, PyDict>> {
    let mode = match mode {
        "baseline" => toydet::TrainMode::Baseline,
        "mccl" => toydet::TrainMode::Mccl,
        other => {
            return Err(PyValueError::new_err(format!(
                "mode must be baseline or mccl, got {other}"
            )))
        }
    };
    let config = toydet::TrainConfig {
        epochs,
        beta,
        mc_passes,
        dropout,
        seed,
        mode,
        ..Default::default()
    };
    let data =
        toydet::ToyDataset::generate(classes, train_scenes, val_scenes, shift_level, seed)
            .map_err(err)?;
    let outcome = toydet::train(&config, &data).map_err(err)?;
    let out = PyDict::new(py);
    let split = |e: &toydet::SplitEval| -> PyResult<Bound<'py, PyDict>> {
        let d = PyDict::new(py);
        d.set_item("dece", e.dece)?;
        d.set_item("ap50", e.ap50)?;
        d.set_item("n_detections", e.n_detections)?;
        Ok(d)
    };
    out.set_item("in_domain", split(&outcome.final_in_domain)?)?;
    out.set_item("shifted", split(&outcome.final_shifted)?)?;
    let log = PyList::empty(py);
    for row in &outcome.log {
        let r = PyDict::new(py);
        r.set_item("epoch", row.epoch)?;
        r.set_item("task_loss", row.task_loss)?;
        r.set_item("l_mcc", row.l_mcc)?;
        r.set_item("l_lc", row.l_lc)?;
        r.set_item("dece", row.dece)?;
        r.set_item("ap50", row.ap50)?;
        log.append(r)?;
    }
    out.set_item("log", log)?;
    Ok(out)
}

#[pymodule]
fn detcal_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_function(wrap_pyfunction!(iou, m)?)?;
    m.add_function(wrap_pyfunction!(match_detections, m)?)?;
    m.add_function(wrap_pyfunction!(compute_ece, m)?)?;
    m.add_function(wrap_pyfunction!(compute_dece, m)?)?;
    m.add_function(wrap_pyfunction!(reliability_table, m)?)?;
    m.add_function(wrap_pyfunction!(mean_confidence, m)?)?;
    m.add_function(wrap_pyfunction!(classwise_certainty, m)?)?;
    m.add_function(wrap_pyfunction!(box_mean, m)?)?;
    m.add_function(wrap_pyfunction!(box_certainty, m)?)?;
    m.add_function(wrap_pyfunction!(fuse, m)?)?;
    m.add_function(wrap_pyfunction!(mccl_aux, m)?)?;
    m.add_function(wrap_pyfunction!(mccl_aux_grad, m)?)?;
    m.add_function(wrap_pyfunction!(fit_temperature, m)?)?;
    m.add_function(wrap_pyfunction!(apply_temperature, m)?)?;
    m.add_function(wrap_pyfunction!(train_toy, m)?)?;
    Ok(())
}
