//! Calibration-error metrics and diagram tables.
//!
//! ECE bins detections by confidence alone; D-ECE extends the binning over
//! box properties (center, size) so that location-dependent miscalibration
//! becomes visible. Per-bin "precision" is the fraction of correct matches,
//! not PR-curve precision.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::matching::MatchedDetection;

/// A binnable quantity of a matched detection.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Dimension {
    Conf,
    Cx,
    Cy,
    W,
    H,
}

impl Dimension {
    pub fn as_str(&self) -> &'static str {
        match self {
            Dimension::Conf => "conf",
            Dimension::Cx => "cx",
            Dimension::Cy => "cy",
            Dimension::W => "w",
            Dimension::H => "h",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "conf" => Ok(Dimension::Conf),
            "cx" => Ok(Dimension::Cx),
            "cy" => Ok(Dimension::Cy),
            "w" => Ok(Dimension::W),
            "h" => Ok(Dimension::H),
            other => Err(Error::InvalidParam(format!("unknown dimension '{other}'"))),
        }
    }

    /// The value this dimension reads off a matched detection. Box
    /// properties come from the predicted box.
    pub fn extract(&self, m: &MatchedDetection) -> f64 {
        match self {
            Dimension::Conf => m.detection.score,
            Dimension::Cx => m.detection.box_.cx,
            Dimension::Cy => m.detection.box_.cy,
            Dimension::W => m.detection.box_.w,
            Dimension::H => m.detection.box_.h,
        }
    }
}

/// Equal-width bin index over [0, 1]; the top bin is right-closed so 1.0
/// lands in bin n-1. Out-of-range values clamp into the edge bins.
fn bin_of(x: f64, n: usize) -> (usize, bool) {
    let clamped = !(0.0..=1.0).contains(&x);
    let x = x.clamp(0.0, 1.0);
    let i = (x * n as f64) as usize;
    (i.min(n - 1), clamped)
}

fn bin_center(i: usize, n: usize) -> f64 {
    (i as f64 + 0.5) / n as f64
}

/// Multidimensional equal-width binning over confidence and box properties.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BinGrid {
    dims: Vec<Dimension>,
    bins: Vec<usize>,
}

const MAX_TOTAL_BINS: usize = 10_000_000;

impl BinGrid {
    /// Build a grid. The confidence dimension must be present and first;
    /// dimensions must be distinct and every bin count positive.
    pub fn new(dims: Vec<Dimension>, bins: Vec<usize>) -> Result<Self> {
        if dims.is_empty() || dims[0] != Dimension::Conf {
            return Err(Error::InvalidParam(
                "grid dimensions must start with 'conf'".into(),
            ));
        }
        if dims.len() != bins.len() {
            return Err(Error::LengthMismatch(format!(
                "{} dims vs {} bin counts",
                dims.len(),
                bins.len()
            )));
        }
        for (i, d) in dims.iter().enumerate() {
            if dims[..i].contains(d) {
                return Err(Error::InvalidParam(format!(
                    "duplicate dimension '{}'",
                    d.as_str()
                )));
            }
        }
        if bins.iter().any(|&n| n == 0) {
            return Err(Error::InvalidParam("bin counts must be positive".into()));
        }
        let total: usize = bins.iter().try_fold(1usize, |acc, &n| {
            acc.checked_mul(n).filter(|&t| t <= MAX_TOTAL_BINS)
        })
        .ok_or_else(|| Error::InvalidParam("grid exceeds total bin budget".into()))?;
        let _ = total;
        Ok(BinGrid { dims, bins })
    }

    /// Confidence-only grid.
    pub fn conf_only(n_bins: usize) -> Result<Self> {
        BinGrid::new(vec![Dimension::Conf], vec![n_bins])
    }

    /// Default grid from the CLI: conf plus the listed box properties.
    pub fn with_properties(
        conf_bins: usize,
        properties: &[Dimension],
        property_bins: usize,
    ) -> Result<Self> {
        let mut dims = vec![Dimension::Conf];
        let mut bins = vec![conf_bins];
        for p in properties {
            dims.push(*p);
            bins.push(property_bins);
        }
        BinGrid::new(dims, bins)
    }

    pub fn dims(&self) -> &[Dimension] {
        &self.dims
    }

    pub fn bins_per_dim(&self) -> &[usize] {
        &self.bins
    }

    /// Equal-width edges over [0, 1] for one dimension.
    pub fn edges(&self, dim_index: usize) -> Vec<f64> {
        let n = self.bins[dim_index];
        (0..=n).map(|i| i as f64 / n as f64).collect()
    }

    pub fn n_total(&self) -> usize {
        self.bins.iter().product()
    }

    fn flat_index(&self, multi: &[usize]) -> usize {
        let mut idx = 0;
        for (i, &b) in multi.iter().enumerate() {
            idx = idx * self.bins[i] + b;
        }
        idx
    }

    fn multi_index(&self, mut flat: usize) -> Vec<usize> {
        let mut out = vec![0; self.bins.len()];
        for i in (0..self.bins.len()).rev() {
            out[i] = flat % self.bins[i];
            flat /= self.bins[i];
        }
        out
    }

    /// Bin a detection; also reports whether any coordinate was clamped.
    fn locate(&self, m: &MatchedDetection) -> (usize, bool) {
        let mut multi = Vec::with_capacity(self.dims.len());
        let mut clamped = false;
        for (d, &n) in self.dims.iter().zip(&self.bins) {
            let (b, c) = bin_of(d.extract(m), n);
            clamped |= c;
            multi.push(b);
        }
        (self.flat_index(&multi), clamped)
    }
}

/// Per-bin tallies.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BinStats {
    /// Multidimensional bin index, ordered like the grid's dimensions.
    pub index: Vec<usize>,
    pub count: usize,
    pub sum_conf: f64,
    pub sum_correct: usize,
}

impl BinStats {
    pub fn conf(&self) -> f64 {
        self.sum_conf / self.count as f64
    }

    pub fn precision(&self) -> f64 {
        self.sum_correct as f64 / self.count as f64
    }
}

/// Shardable tally of detections into a grid. Merging accumulators built
/// from disjoint shards gives the same totals as one pass over the
/// concatenation, so metric evaluation can fan out across workers.
#[derive(Debug, Clone)]
pub struct BinAccumulator {
    grid: BinGrid,
    count: Vec<usize>,
    sum_conf: Vec<f64>,
    sum_correct: Vec<usize>,
    n_clamped: usize,
    n_total_dets: usize,
}

impl BinAccumulator {
    pub fn new(grid: BinGrid) -> Self {
        let n = grid.n_total();
        BinAccumulator {
            grid,
            count: vec![0; n],
            sum_conf: vec![0.0; n],
            sum_correct: vec![0; n],
            n_clamped: 0,
            n_total_dets: 0,
        }
    }

    pub fn add(&mut self, m: &MatchedDetection) {
        let (flat, clamped) = self.grid.locate(m);
        self.count[flat] += 1;
        self.sum_conf[flat] += m.detection.score;
        self.sum_correct[flat] += m.correct as usize;
        self.n_clamped += clamped as usize;
        self.n_total_dets += 1;
    }

    pub fn merge(&mut self, other: &BinAccumulator) -> Result<()> {
        if self.grid != other.grid {
            return Err(Error::InvalidParam("cannot merge accumulators over different grids".into()));
        }
        for i in 0..self.count.len() {
            self.count[i] += other.count[i];
            self.sum_conf[i] += other.sum_conf[i];
            self.sum_correct[i] += other.sum_correct[i];
        }
        self.n_clamped += other.n_clamped;
        self.n_total_dets += other.n_total_dets;
        Ok(())
    }

    /// Non-empty bins in ascending flat-index order.
    pub fn stats(&self) -> Vec<BinStats> {
        (0..self.count.len())
            .filter(|&i| self.count[i] > 0)
            .map(|i| BinStats {
                index: self.grid.multi_index(i),
                count: self.count[i],
                sum_conf: self.sum_conf[i],
                sum_correct: self.sum_correct[i],
            })
            .collect()
    }

    fn weighted_gap_sum(&self) -> f64 {
        let total = self.n_total_dets as f64;
        let mut dece = 0.0;
        for i in 0..self.count.len() {
            if self.count[i] == 0 {
                continue;
            }
            let cnt = self.count[i] as f64;
            let conf = self.sum_conf[i] / cnt;
            let prec = self.sum_correct[i] as f64 / cnt;
            dece += cnt / total * (prec - conf).abs();
        }
        dece
    }
}

/// Full output of a D-ECE evaluation.
#[derive(Debug, Clone)]
pub struct CalibrationReport {
    pub dece: f64,
    /// Confidence-only ECE computed with the grid's confidence bin count.
    pub ece: f64,
    pub grid: BinGrid,
    /// Non-empty bins, ascending flat index.
    pub bins: Vec<BinStats>,
    pub n_detections: usize,
    /// IoU threshold the matches were produced with.
    pub iou_threshold: f64,
    /// Detections whose box properties had to be clamped into edge bins.
    pub n_clamped: usize,
}

/// Expected calibration error over confidence-only equal-width bins.
/// Empty bins contribute nothing.
pub fn compute_ece(matched: &[MatchedDetection], n_bins: usize) -> Result<f64> {
    if matched.is_empty() {
        return Err(Error::EmptyInput);
    }
    let grid = BinGrid::conf_only(n_bins)?;
    let mut acc = BinAccumulator::new(grid);
    for m in matched {
        acc.add(m);
    }
    Ok(acc.weighted_gap_sum())
}

/// Detection expected calibration error over a multidimensional grid.
/// With a confidence-only grid this reduces to [`compute_ece`] bit for bit.
pub fn compute_dece(
    matched: &[MatchedDetection],
    grid: &BinGrid,
    iou_threshold: f64,
) -> Result<CalibrationReport> {
    if matched.is_empty() {
        return Err(Error::EmptyInput);
    }
    let mut acc = BinAccumulator::new(grid.clone());
    for m in matched {
        acc.add(m);
    }
    let ece = compute_ece(matched, grid.bins_per_dim()[0])?;
    Ok(CalibrationReport {
        dece: acc.weighted_gap_sum(),
        ece,
        bins: acc.stats(),
        grid: grid.clone(),
        n_detections: matched.len(),
        iou_threshold,
        n_clamped: acc.n_clamped,
    })
}

/// One row of a reliability diagram.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ReliabilityRow {
    pub bin_center: f64,
    /// Mean confidence; absent for empty bins.
    pub conf: Option<f64>,
    /// Empirical accuracy (fraction correct); absent for empty bins.
    pub acc: Option<f64>,
    pub count: usize,
}

/// Reliability-diagram table over confidence-only bins. Every bin gets a
/// row; empty bins carry no conf/acc.
pub fn reliability_table(matched: &[MatchedDetection], n_bins: usize) -> Result<Vec<ReliabilityRow>> {
    if matched.is_empty() {
        return Err(Error::EmptyInput);
    }
    let grid = BinGrid::conf_only(n_bins)?;
    let mut acc = BinAccumulator::new(grid);
    for m in matched {
        acc.add(m);
    }
    Ok((0..n_bins)
        .map(|i| {
            let count = acc.count[i];
            let (conf, accy) = if count > 0 {
                (
                    Some(acc.sum_conf[i] / count as f64),
                    Some(acc.sum_correct[i] as f64 / count as f64),
                )
            } else {
                (None, None)
            };
            ReliabilityRow {
                bin_center: bin_center(i, n_bins),
                conf,
                acc: accy,
                count,
            }
        })
        .collect())
}

/// Confidence histogram plus the global average confidence and precision.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ConfidenceHistogram {
    pub counts: Vec<usize>,
    pub bin_centers: Vec<f64>,
    pub avg_confidence: f64,
    pub avg_precision: f64,
}

pub fn confidence_histogram(
    matched: &[MatchedDetection],
    n_bins: usize,
) -> Result<ConfidenceHistogram> {
    if matched.is_empty() {
        return Err(Error::EmptyInput);
    }
    if n_bins == 0 {
        return Err(Error::InvalidParam("bin count must be positive".into()));
    }
    let mut counts = vec![0usize; n_bins];
    let mut sum_conf = 0.0;
    let mut sum_correct = 0usize;
    for m in matched {
        let (i, _) = bin_of(m.detection.score, n_bins);
        counts[i] += 1;
        sum_conf += m.detection.score;
        sum_correct += m.correct as usize;
    }
    let n = matched.len() as f64;
    Ok(ConfidenceHistogram {
        counts,
        bin_centers: (0..n_bins).map(|i| bin_center(i, n_bins)).collect(),
        avg_confidence: sum_conf / n,
        avg_precision: sum_correct as f64 / n,
    })
}

/// One bin of a per-property calibration curve.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PropertyCurveRow {
    pub bin_center: f64,
    pub conf: Option<f64>,
    pub prec: Option<f64>,
    pub count: usize,
    /// This bin's weighted |prec - conf| contribution to the D-ECE over
    /// the property dimension alone; 0 for empty bins.
    pub partial_dece: f64,
}

/// Calibration curve along one predicted-box property.
pub fn property_curve(
    matched: &[MatchedDetection],
    dim: Dimension,
    n_bins: usize,
) -> Result<Vec<PropertyCurveRow>> {
    if matched.is_empty() {
        return Err(Error::EmptyInput);
    }
    if dim == Dimension::Conf {
        return Err(Error::InvalidParam(
            "property curves run over box properties; use a reliability table for confidence"
                .into(),
        ));
    }
    if n_bins == 0 {
        return Err(Error::InvalidParam("bin count must be positive".into()));
    }
    let mut count = vec![0usize; n_bins];
    let mut sum_conf = vec![0.0; n_bins];
    let mut sum_correct = vec![0usize; n_bins];
    for m in matched {
        let (i, _) = bin_of(dim.extract(m), n_bins);
        count[i] += 1;
        sum_conf[i] += m.detection.score;
        sum_correct[i] += m.correct as usize;
    }
    let total = matched.len() as f64;
    Ok((0..n_bins)
        .map(|i| {
            if count[i] == 0 {
                return PropertyCurveRow {
                    bin_center: bin_center(i, n_bins),
                    conf: None,
                    prec: None,
                    count: 0,
                    partial_dece: 0.0,
                };
            }
            let cnt = count[i] as f64;
            let conf = sum_conf[i] / cnt;
            let prec = sum_correct[i] as f64 / cnt;
            PropertyCurveRow {
                bin_center: bin_center(i, n_bins),
                conf: Some(conf),
                prec: Some(prec),
                count: count[i],
                partial_dece: cnt / total * (prec - conf).abs(),
            }
        })
        .collect())
}

/// 2-D calibration heatmap: cell (i, j) holds |prec - conf| for detections
/// whose `dim_a` falls in bin i and `dim_b` in bin j; empty cells are None.
pub fn heatmap_2d(
    matched: &[MatchedDetection],
    dim_a: Dimension,
    dim_b: Dimension,
    n_a: usize,
    n_b: usize,
) -> Result<Vec<Vec<Option<f64>>>> {
    if matched.is_empty() {
        return Err(Error::EmptyInput);
    }
    if n_a == 0 || n_b == 0 {
        return Err(Error::InvalidParam("bin counts must be positive".into()));
    }
    let mut count = vec![vec![0usize; n_b]; n_a];
    let mut sum_conf = vec![vec![0.0; n_b]; n_a];
    let mut sum_correct = vec![vec![0usize; n_b]; n_a];
    for m in matched {
        let (i, _) = bin_of(dim_a.extract(m), n_a);
        let (j, _) = bin_of(dim_b.extract(m), n_b);
        count[i][j] += 1;
        sum_conf[i][j] += m.detection.score;
        sum_correct[i][j] += m.correct as usize;
    }
    Ok((0..n_a)
        .map(|i| {
            (0..n_b)
                .map(|j| {
                    if count[i][j] == 0 {
                        None
                    } else {
                        let cnt = count[i][j] as f64;
                        Some((sum_correct[i][j] as f64 / cnt - sum_conf[i][j] / cnt).abs())
                    }
                })
                .collect()
        })
        .collect())
}
