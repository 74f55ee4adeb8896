//! MC-dropout aggregation: mean-logit confidences, class-wise certainty,
//! mean box parameters, and joint box certainty.
//!
//! Variances are population variances (divide by N), which keeps them
//! defined from N = 2 and matches the moment-matching reading of the joint
//! box uncertainty. Certainties map variance v to 1 - tanh(v), so zero
//! spread gives certainty exactly 1 and the result stays in (0, 1].

use crate::error::{Error, Result};
use crate::util::softmax_f64;

/// Stochastic forward-pass outputs for one location: N passes of K class
/// logits and N passes of 4 decoded normalized box parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct McSamples {
    /// N x K.
    pub logits: Vec<Vec<f64>>,
    /// N x 4, rows are (cx, cy, w, h).
    pub boxes: Vec<[f64; 4]>,
}

impl McSamples {
    pub fn new(logits: Vec<Vec<f64>>, boxes: Vec<[f64; 4]>) -> Result<Self> {
        if logits.len() != boxes.len() {
            return Err(Error::LengthMismatch(format!(
                "{} logit rows vs {} box rows",
                logits.len(),
                boxes.len()
            )));
        }
        if logits.len() < 2 {
            return Err(Error::TooFewPasses(logits.len()));
        }
        let k = logits[0].len();
        for row in &logits {
            if row.len() != k {
                return Err(Error::LengthMismatch("ragged logit matrix".into()));
            }
            if row.iter().any(|x| !x.is_finite()) {
                return Err(Error::InvalidValue("non-finite logit".into()));
            }
        }
        if boxes.iter().flatten().any(|x| !x.is_finite()) {
            return Err(Error::InvalidValue("non-finite box parameter".into()));
        }
        Ok(McSamples { logits, boxes })
    }

    pub fn n_passes(&self) -> usize {
        self.logits.len()
    }

    pub fn n_classes(&self) -> usize {
        self.logits[0].len()
    }

    /// All four aggregates at once.
    pub fn summarize(&self) -> Result<UncertaintySummary> {
        Ok(UncertaintySummary {
            mean_conf: mean_confidence(&self.logits)?,
            class_certainty: classwise_certainty(&self.logits)?,
            mean_box: box_mean(&self.boxes),
            box_certainty: box_certainty(&self.boxes)?,
        })
    }
}

/// Aggregated uncertainty for one location.
#[derive(Debug, Clone, PartialEq)]
pub struct UncertaintySummary {
    /// Softmax of the per-class mean logits; sums to 1.
    pub mean_conf: Vec<f64>,
    /// Per-class 1 - tanh(logit variance), in (0, 1].
    pub class_certainty: Vec<f64>,
    /// Per-parameter means of the box samples.
    pub mean_box: [f64; 4],
    /// Joint box certainty, in (0, 1].
    pub box_certainty: f64,
}

fn column_means(rows: &[Vec<f64>]) -> Vec<f64> {
    let n = rows.len() as f64;
    let k = rows[0].len();
    let mut means = vec![0.0; k];
    for row in rows {
        for (m, &x) in means.iter_mut().zip(row) {
            *m += x;
        }
    }
    for m in &mut means {
        *m /= n;
    }
    means
}

fn column_population_variances(rows: &[Vec<f64>], means: &[f64]) -> Vec<f64> {
    let n = rows.len() as f64;
    let mut vars = vec![0.0; means.len()];
    for row in rows {
        for ((v, &m), &x) in vars.iter_mut().zip(means).zip(row) {
            let d = x - m;
            *v += d * d;
        }
    }
    for v in &mut vars {
        *v /= n;
    }
    vars
}

/// Softmax of the column-wise mean of the logit matrix. Stabilized by max
/// subtraction; defined from N = 1.
pub fn mean_confidence(logits: &[Vec<f64>]) -> Result<Vec<f64>> {
    if logits.is_empty() {
        return Err(Error::EmptyInput);
    }
    if logits.iter().flatten().any(|x| !x.is_finite()) {
        return Err(Error::InvalidValue("non-finite logit".into()));
    }
    Ok(softmax_f64(&column_means(logits)))
}

/// 1 - tanh(v) in its open form 2 / (e^{2v} + 1), which stays strictly
/// positive where the subtraction saturates to zero (v beyond ~19).
fn certainty_from_variance(v: f64) -> f64 {
    2.0 / ((2.0 * v).exp() + 1.0)
}

/// Per-class certainty 1 - tanh(population variance of the logit column).
pub fn classwise_certainty(logits: &[Vec<f64>]) -> Result<Vec<f64>> {
    if logits.len() < 2 {
        return Err(Error::TooFewPasses(logits.len()));
    }
    let means = column_means(logits);
    Ok(column_population_variances(logits, &means)
        .into_iter()
        .map(certainty_from_variance)
        .collect())
}

/// Column-wise mean of the box samples.
pub fn box_mean(boxes: &[[f64; 4]]) -> [f64; 4] {
    let n = boxes.len() as f64;
    let mut mean = [0.0; 4];
    for row in boxes {
        for (m, &x) in mean.iter_mut().zip(row) {
            *m += x;
        }
    }
    for m in &mut mean {
        *m /= n;
    }
    mean
}

/// Joint box certainty: the per-parameter variances and the squared spread
/// of the parameter means around their combined mean are averaged into one
/// uncertainty u, and the certainty is 1 - tanh(u).
pub fn box_certainty(boxes: &[[f64; 4]]) -> Result<f64> {
    if boxes.len() < 2 {
        return Err(Error::TooFewPasses(boxes.len()));
    }
    let n = boxes.len() as f64;
    let mean = box_mean(boxes);
    let mut var = [0.0; 4];
    for row in boxes {
        for ((v, &m), &x) in var.iter_mut().zip(&mean).zip(row) {
            let d = x - m;
            *v += d * d;
        }
    }
    for v in &mut var {
        *v /= n;
    }
    let combined_mean = mean.iter().sum::<f64>() / 4.0;
    let u = mean
        .iter()
        .zip(&var)
        .map(|(&m, &v)| v + (m - combined_mean) * (m - combined_mean))
        .sum::<f64>()
        / 4.0;
    Ok(certainty_from_variance(u))
}
