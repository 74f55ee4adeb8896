//! Independent oracles for the acceptance suite: straight-from-the-formula
//! implementations that share no code with the library paths they check.

use std::collections::HashMap;

use detcal::matching::MatchedDetection;
use detcal::rng::Rng;
use detcal::types::{Detection, NormBox};

/// A detection reduced to what the binning oracle needs.
#[derive(Debug, Clone, Copy)]
pub struct Sample {
    pub score: f64,
    pub correct: bool,
    pub box_: [f64; 4],
}

pub fn to_matched(samples: &[Sample]) -> Vec<MatchedDetection> {
    samples
        .iter()
        .map(|s| MatchedDetection {
            detection: Detection::new(
                0,
                0,
                s.score,
                NormBox {
                    cx: s.box_[0],
                    cy: s.box_[1],
                    w: s.box_[2],
                    h: s.box_[3],
                },
            ),
            correct: s.correct,
            matched_gt: None,
            iou: 0.0,
        })
        .collect()
}

/// Dimension selector for the oracle: 0 = confidence, 1..=4 = cx, cy, w, h.
pub fn extract(sample: &Sample, dim: usize) -> f64 {
    match dim {
        0 => sample.score,
        d => sample.box_[d - 1],
    }
}

/// Bin assignment by scanning edge intervals [i/n, (i+1)/n), top bin
/// right-closed. Independent of the library's multiply-floor arithmetic.
pub fn oracle_bin(x: f64, n: usize) -> usize {
    let x = x.clamp(0.0, 1.0);
    for i in 0..n {
        let lo = i as f64 / n as f64;
        let hi = (i + 1) as f64 / n as f64;
        if x >= lo && (x < hi || i == n - 1) {
            return i;
        }
    }
    n - 1
}

/// Brute-force D-ECE over the given (dim, bins) grid: per-detection bin
/// assignment into a hash map, then the weighted absolute gap sum.
pub fn oracle_dece(samples: &[Sample], dims: &[usize], bins: &[usize]) -> f64 {
    let mut cells: HashMap<Vec<usize>, (usize, f64, usize)> = HashMap::new();
    for s in samples {
        let key: Vec<usize> = dims
            .iter()
            .zip(bins)
            .map(|(&d, &n)| oracle_bin(extract(s, d), n))
            .collect();
        let cell = cells.entry(key).or_insert((0, 0.0, 0));
        cell.0 += 1;
        cell.1 += s.score;
        cell.2 += s.correct as usize;
    }
    let total = samples.len() as f64;
    let mut keys: Vec<&Vec<usize>> = cells.keys().collect();
    keys.sort();
    keys.iter()
        .map(|k| {
            let (count, sum_conf, sum_correct) = cells[*k];
            let conf = sum_conf / count as f64;
            let prec = sum_correct as f64 / count as f64;
            count as f64 / total * (prec - conf).abs()
        })
        .sum()
}

/// Plain softmax, no stabilization tricks beyond the definition.
pub fn oracle_softmax(z: &[f64]) -> Vec<f64> {
    let exps: Vec<f64> = z.iter().map(|&v| v.exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.iter().map(|e| e / sum).collect()
}

fn column(rows: &[Vec<f64>], c: usize) -> Vec<f64> {
    rows.iter().map(|r| r[c]).collect()
}

fn pop_var(xs: &[f64]) -> f64 {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n
}

/// Mean-logit confidence, written straight from the definition.
pub fn oracle_mean_confidence(logits: &[Vec<f64>]) -> Vec<f64> {
    let k = logits[0].len();
    let n = logits.len() as f64;
    let means: Vec<f64> = (0..k)
        .map(|c| column(logits, c).iter().sum::<f64>() / n)
        .collect();
    oracle_softmax(&means)
}

/// Class-wise certainty 1 - tanh(population variance per class column).
pub fn oracle_classwise_certainty(logits: &[Vec<f64>]) -> Vec<f64> {
    (0..logits[0].len())
        .map(|c| 1.0 - pop_var(&column(logits, c)).tanh())
        .collect()
}

/// Joint box certainty per the printed formula.
pub fn oracle_box_certainty(boxes: &[[f64; 4]]) -> f64 {
    let n = boxes.len() as f64;
    let means: Vec<f64> = (0..4)
        .map(|j| boxes.iter().map(|b| b[j]).sum::<f64>() / n)
        .collect();
    let vars: Vec<f64> = (0..4)
        .map(|j| pop_var(&boxes.iter().map(|b| b[j]).collect::<Vec<f64>>()))
        .collect();
    let mu_com = means.iter().sum::<f64>() / 4.0;
    let u = means
        .iter()
        .zip(&vars)
        .map(|(&m, &v)| v + (m - mu_com) * (m - mu_com))
        .sum::<f64>()
        / 4.0;
    1.0 - u.tanh()
}

pub fn oracle_box_mean(boxes: &[[f64; 4]]) -> [f64; 4] {
    let n = boxes.len() as f64;
    let mut out = [0.0; 4];
    for (j, o) in out.iter_mut().enumerate() {
        *o = boxes.iter().map(|b| b[j]).sum::<f64>() / n;
    }
    out
}

/// IoU of center/size boxes, written from plain corner geometry.
pub fn oracle_iou(a: &[f64; 4], b: &[f64; 4]) -> f64 {
    let corners = |v: &[f64; 4]| {
        (
            v[0] - v[2] / 2.0,
            v[1] - v[3] / 2.0,
            v[0] + v[2] / 2.0,
            v[1] + v[3] / 2.0,
        )
    };
    let (ax1, ay1, ax2, ay2) = corners(a);
    let (bx1, by1, bx2, by2) = corners(b);
    let iw = (ax2.min(bx2) - ax1.max(bx1)).max(0.0);
    let ih = (ay2.min(by2) - ay1.max(by1)).max(0.0);
    let inter = iw * ih;
    inter / (a[2] * a[3] + b[2] * b[3] - inter)
}

/// One positive location of an auxiliary-loss batch, plain data.
#[derive(Debug, Clone)]
pub struct OracleLocation {
    pub sample_index: usize,
    pub logits: Vec<Vec<f64>>,
    pub boxes: Vec<[f64; 4]>,
    pub gt_class: usize,
    pub gt_box: [f64; 4],
}

/// Multiclass confidence calibration loss written straight from the
/// printed sum: (1/K) sum_k |mean v[k] - mean q[k]| with a global M.
pub fn oracle_mcc(batch: &[OracleLocation], k: usize) -> f64 {
    let m = batch.len() as f64;
    let mut loss = 0.0;
    for class in 0..k {
        let mut v_sum = 0.0;
        let mut q_sum = 0.0;
        for loc in batch {
            let s = oracle_mean_confidence(&loc.logits);
            let c = oracle_classwise_certainty(&loc.logits);
            v_sum += (s[class] + c[class]) / 2.0;
            q_sum += (loc.gt_class == class) as usize as f64;
        }
        loss += (v_sum / m - q_sum / m).abs();
    }
    loss / k as f64
}

/// Localization calibration loss: per-sample mean of |IoU(mean box, gt) -
/// certainty|, then mean over samples.
pub fn oracle_lc(batch: &[OracleLocation]) -> f64 {
    let mut by_sample: std::collections::BTreeMap<usize, Vec<f64>> = Default::default();
    for loc in batch {
        let mean_box = oracle_box_mean(&loc.boxes);
        let gap = (oracle_iou(&mean_box, &loc.gt_box) - oracle_box_certainty(&loc.boxes)).abs();
        by_sample.entry(loc.sample_index).or_default().push(gap);
    }
    let per_sample: Vec<f64> = by_sample
        .values()
        .map(|gaps| gaps.iter().sum::<f64>() / gaps.len() as f64)
        .collect();
    per_sample.iter().sum::<f64>() / per_sample.len() as f64
}

/// Random auxiliary-loss batch. Boxes stay in sane normalized ranges so
/// IoU terms are non-degenerate.
pub fn random_batch(rng: &mut Rng, n_samples: usize, max_pos: usize, n_passes: usize, k: usize) -> Vec<OracleLocation> {
    let mut batch = Vec::new();
    for sample_index in 0..n_samples {
        let n_pos = 1 + rng.below(max_pos);
        for _ in 0..n_pos {
            let gt = [
                rng.range(0.25, 0.75),
                rng.range(0.25, 0.75),
                rng.range(0.2, 0.45),
                rng.range(0.2, 0.45),
            ];
            let logits = (0..n_passes)
                .map(|_| (0..k).map(|_| 2.0 * rng.normal()).collect())
                .collect();
            let center = [
                gt[0] + 0.1 * rng.normal(),
                gt[1] + 0.1 * rng.normal(),
                (gt[2] + 0.05 * rng.normal()).clamp(0.05, 0.9),
                (gt[3] + 0.05 * rng.normal()).clamp(0.05, 0.9),
            ];
            let boxes = (0..n_passes)
                .map(|_| {
                    [
                        (center[0] + 0.03 * rng.normal()).clamp(0.02, 0.98),
                        (center[1] + 0.03 * rng.normal()).clamp(0.02, 0.98),
                        (center[2] + 0.02 * rng.normal()).clamp(0.05, 0.9),
                        (center[3] + 0.02 * rng.normal()).clamp(0.05, 0.9),
                    ]
                })
                .collect();
            batch.push(OracleLocation {
                sample_index,
                logits,
                boxes,
                gt_class: rng.below(k),
                gt_box: gt,
            });
        }
    }
    batch
}

/// Spearman rank correlation with average ranks for ties.
pub fn spearman(xs: &[f64], ys: &[f64]) -> f64 {
    fn ranks(v: &[f64]) -> Vec<f64> {
        let mut idx: Vec<usize> = (0..v.len()).collect();
        idx.sort_by(|&a, &b| v[a].partial_cmp(&v[b]).unwrap());
        let mut out = vec![0.0; v.len()];
        let mut i = 0;
        while i < idx.len() {
            let mut j = i;
            while j + 1 < idx.len() && v[idx[j + 1]] == v[idx[i]] {
                j += 1;
            }
            let avg = (i + j) as f64 / 2.0 + 1.0;
            for &k in &idx[i..=j] {
                out[k] = avg;
            }
            i = j + 1;
        }
        out
    }
    let rx = ranks(xs);
    let ry = ranks(ys);
    let n = xs.len() as f64;
    let mx = rx.iter().sum::<f64>() / n;
    let my = ry.iter().sum::<f64>() / n;
    let cov: f64 = rx.iter().zip(&ry).map(|(a, b)| (a - mx) * (b - my)).sum();
    let sx: f64 = rx.iter().map(|a| (a - mx) * (a - mx)).sum::<f64>().sqrt();
    let sy: f64 = ry.iter().map(|b| (b - my) * (b - my)).sum::<f64>().sqrt();
    cov / (sx * sy)
}

pub fn median(xs: &[f64]) -> f64 {
    let mut v = xs.to_vec();
    v.sort_by(|a, b| a.partial_cmp(b).unwrap());
    v[v.len() / 2]
}
