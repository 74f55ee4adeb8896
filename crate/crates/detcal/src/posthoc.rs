//! Temperature-scaling baseline: divide stored logits by a scalar T > 0
//! fitted by NLL on held-out data. Scaling never changes the argmax, so
//! predicted labels are preserved; detections must carry raw logits for
//! the method to apply at all.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::types::Detection;
use crate::util::{argmax, softmax_f64};

/// A fitted temperature.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TemperatureModel {
    pub temperature: f64,
}

impl TemperatureModel {
    pub fn new(temperature: f64) -> Result<Self> {
        if !(temperature.is_finite() && temperature > 0.0) {
            return Err(Error::InvalidParam(format!(
                "temperature {temperature} must be finite and positive"
            )));
        }
        Ok(TemperatureModel { temperature })
    }

    /// softmax(logits / T).
    pub fn scale(&self, logits: &[f64]) -> Vec<f64> {
        let scaled: Vec<f64> = logits.iter().map(|&z| z / self.temperature).collect();
        softmax_f64(&scaled)
    }
}

/// Mean negative log-likelihood of softmax(logits / T) under the labels.
fn mean_nll(logits: &[Vec<f64>], labels: &[usize], t: f64) -> f64 {
    let mut total = 0.0;
    for (z, &y) in logits.iter().zip(labels) {
        let m = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max) / t;
        let lse = z.iter().map(|&v| (v / t - m).exp()).sum::<f64>().ln() + m;
        total += lse - z[y] / t;
    }
    total / logits.len() as f64
}

const GOLDEN_LO: f64 = -3.0;
const GOLDEN_HI: f64 = 3.0;
const GOLDEN_TOL: f64 = 1e-6;

/// Derivative-free golden-section minimization on a unimodal objective.
fn golden_section<F: Fn(f64) -> f64>(f: F, mut lo: f64, mut hi: f64, tol: f64) -> f64 {
    let inv_phi = (5f64.sqrt() - 1.0) / 2.0;
    let mut a = hi - inv_phi * (hi - lo);
    let mut b = lo + inv_phi * (hi - lo);
    let mut fa = f(a);
    let mut fb = f(b);
    while hi - lo > tol {
        if fa < fb {
            hi = b;
            b = a;
            fb = fa;
            a = hi - inv_phi * (hi - lo);
            fa = f(a);
        } else {
            lo = a;
            a = b;
            fa = fb;
            b = lo + inv_phi * (hi - lo);
            fb = f(b);
        }
    }
    (lo + hi) / 2.0
}

/// Fit T by minimizing validation NLL, searching log T in [-3, 3] by
/// golden section. The fitted temperature never has worse NLL than T = 1:
/// if the search somehow lands above it, T = 1 is returned instead.
pub fn fit_temperature(logits: &[Vec<f64>], labels: &[usize]) -> Result<TemperatureModel> {
    if logits.len() != labels.len() {
        return Err(Error::LengthMismatch(format!(
            "{} logit vectors vs {} labels",
            logits.len(),
            labels.len()
        )));
    }
    if logits.is_empty() {
        return Err(Error::EmptyInput);
    }
    let k = logits[0].len();
    for (z, &y) in logits.iter().zip(labels) {
        if z.len() != k {
            return Err(Error::LengthMismatch("ragged logit matrix".into()));
        }
        if z.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidValue("non-finite logit".into()));
        }
        if y >= k {
            return Err(Error::ClassOutOfRange {
                label: y,
                num_classes: k,
            });
        }
    }
    let first = labels[0];
    if labels.iter().all(|&y| y == first) {
        return Err(Error::Degenerate(
            "temperature fitting needs at least two distinct labels".into(),
        ));
    }

    let objective = |log_t: f64| mean_nll(logits, labels, log_t.exp());
    let log_t = golden_section(objective, GOLDEN_LO, GOLDEN_HI, GOLDEN_TOL);
    let t = log_t.exp();
    if mean_nll(logits, labels, t) <= mean_nll(logits, labels, 1.0) {
        TemperatureModel::new(t)
    } else {
        TemperatureModel::new(1.0)
    }
}

/// Rescale each detection's stored logits: the score vector becomes
/// softmax(logits / T) and the score its maximum. Labels are untouched;
/// a detection whose label disagrees with its own logits' argmax is
/// rejected as inconsistent input.
pub fn apply_temperature(
    model: &TemperatureModel,
    detections: &[Detection],
) -> Result<Vec<Detection>> {
    detections
        .iter()
        .map(|d| {
            let logits = d.logits.as_ref().ok_or(Error::MissingLogits)?;
            let am = argmax(logits);
            if am != d.label {
                return Err(Error::InvalidValue(format!(
                    "label {} disagrees with stored logits argmax {am}",
                    d.label
                )));
            }
            let sv = model.scale(logits);
            let mut out = d.clone();
            out.score = sv[am];
            out.score_vector = Some(sv);
            Ok(out)
        })
        .collect()
}
