//! Saliency metrics (MAE, F-measure, E-measure, S-measure) and segmentation mIoU.
//!
//! All reductions run left to right in row-major order.

use serde::{Deserialize, Serialize};

use crate::error::{contract_err, dim_err, Result};
use crate::tensor::Tensor;

/// Number of uniform thresholds in the mean-mode sweeps.
pub const THRESHOLD_LEVELS: usize = 256;

/// A saliency prediction in `[0,1]` and a binary ground truth of one image.
#[derive(Clone, Debug)]
pub struct EvalPair {
    height: usize,
    width: usize,
    pred: Vec<f64>,
    gt: Vec<bool>,
}

impl EvalPair {
    pub fn new(height: usize, width: usize, pred: Vec<f64>, gt: &[f64]) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(dim_err!("evaluation maps must be non-empty"));
        }
        if pred.len() != height * width || gt.len() != height * width {
            return Err(dim_err!(
                "{height}x{width} evaluation pair got {} predictions and {} labels",
                pred.len(),
                gt.len()
            ));
        }
        if pred.iter().any(|p| !(0.0..=1.0).contains(p)) {
            return Err(contract_err!("predictions must lie in [0, 1]"));
        }
        let gt = gt
            .iter()
            .map(|&g| match g {
                0.0 => Ok(false),
                1.0 => Ok(true),
                _ => Err(contract_err!("ground truth must be binary, got {g}")),
            })
            .collect::<Result<_>>()?;
        Ok(Self { height, width, pred, gt })
    }

    /// Accepts `[H,W]` or `[H,W,1]` tensors.
    pub fn from_tensors(pred: &Tensor, gt: &Tensor) -> Result<Self> {
        let hw = |t: &Tensor| -> Result<(usize, usize)> {
            match t.shape() {
                [h, w] | [h, w, 1] => Ok((*h, *w)),
                s => Err(dim_err!("expected a single-channel map, got {s:?}")),
            }
        };
        let (h, w) = hw(pred)?;
        if hw(gt)? != (h, w) {
            return Err(dim_err!("prediction {:?} vs ground truth {:?}", pred.shape(), gt.shape()));
        }
        Self::new(h, w, pred.data().to_vec(), gt.data())
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn pred(&self) -> &[f64] {
        &self.pred
    }

    pub fn gt(&self) -> &[bool] {
        &self.gt
    }

    fn len(&self) -> usize {
        self.pred.len()
    }

    fn positives(&self) -> usize {
        self.gt.iter().filter(|&&g| g).count()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ThresholdMode {
    /// Single threshold at `min(2·mean(P), 1)`.
    Adaptive,
    /// Average over thresholds `k/256`, `k = 1..=256`.
    Mean,
}

/// A metric value plus a flag raised when the ground truth has no positives
/// and the value is defined by convention.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Score {
    pub value: f64,
    pub empty_gt: bool,
}

pub fn mae(pair: &EvalPair) -> f64 {
    let mut s = 0.0;
    for (p, &g) in pair.pred.iter().zip(&pair.gt) {
        s += (p - f64::from(u8::from(g))).abs();
    }
    s / pair.len() as f64
}

pub fn adaptive_threshold(pair: &EvalPair) -> f64 {
    (2.0 * pair.pred.iter().sum::<f64>() / pair.len() as f64).min(1.0)
}

/// Thresholds of the mean-mode sweep.
pub fn sweep_thresholds() -> impl Iterator<Item = f64> {
    (1..=THRESHOLD_LEVELS).map(|k| k as f64 / THRESHOLD_LEVELS as f64)
}

/// Binarisation: a pixel is foreground when it is positive and reaches the threshold.
pub fn binarize(pred: &[f64], threshold: f64) -> Vec<bool> {
    pred.iter().map(|&p| p > 0.0 && p >= threshold).collect()
}

/// F-measure of the map binarised at `threshold`.
pub fn f_measure_at(pair: &EvalPair, beta2: f64, threshold: f64) -> Result<Score> {
    if !(beta2 > 0.0) {
        return Err(contract_err!("beta2 must be positive, got {beta2}"));
    }
    let positives = pair.positives();
    if positives == 0 {
        return Ok(Score { value: 0.0, empty_gt: true });
    }
    let bin = binarize(&pair.pred, threshold);
    let mut tp = 0usize;
    let mut predicted = 0usize;
    for (&b, &g) in bin.iter().zip(&pair.gt) {
        if b {
            predicted += 1;
            if g {
                tp += 1;
            }
        }
    }
    let precision = if predicted == 0 { 0.0 } else { tp as f64 / predicted as f64 };
    let recall = tp as f64 / positives as f64;
    let denom = beta2 * precision + recall;
    let value = if denom == 0.0 { 0.0 } else { (1.0 + beta2) * precision * recall / denom };
    Ok(Score { value, empty_gt: false })
}

pub fn f_measure(pair: &EvalPair, beta2: f64, mode: ThresholdMode) -> Result<Score> {
    match mode {
        ThresholdMode::Adaptive => f_measure_at(pair, beta2, adaptive_threshold(pair)),
        ThresholdMode::Mean => {
            let mut total = 0.0;
            let mut empty = false;
            for t in sweep_thresholds() {
                let s = f_measure_at(pair, beta2, t)?;
                total += s.value;
                empty = s.empty_gt;
            }
            Ok(Score { value: total / THRESHOLD_LEVELS as f64, empty_gt: empty })
        }
    }
}

/// Enhanced-alignment score of a binary foreground map against the ground truth.
pub fn e_measure_binary(pair: &EvalPair, fm: &[bool]) -> f64 {
    let n = pair.len() as f64;
    let positives = pair.positives();
    let to_f = |b: bool| f64::from(u8::from(b));
    let mut total = 0.0;
    if positives == 0 {
        for &f in fm {
            total += 1.0 - to_f(f);
        }
    } else if positives == pair.len() {
        for &f in fm {
            total += to_f(f);
        }
    } else {
        let mean_f = fm.iter().map(|&f| to_f(f)).sum::<f64>() / n;
        let mean_g = positives as f64 / n;
        for (&f, &g) in fm.iter().zip(&pair.gt) {
            let pf = to_f(f) - mean_f;
            let pg = to_f(g) - mean_g;
            let align = 2.0 * pf * pg / (pf * pf + pg * pg + f64::EPSILON);
            total += (align + 1.0) * (align + 1.0) / 4.0;
        }
    }
    total / n
}

pub fn e_measure_at(pair: &EvalPair, threshold: f64) -> f64 {
    e_measure_binary(pair, &binarize(&pair.pred, threshold))
}

pub fn e_measure(pair: &EvalPair, mode: ThresholdMode) -> f64 {
    match mode {
        ThresholdMode::Adaptive => e_measure_at(pair, adaptive_threshold(pair)),
        ThresholdMode::Mean => sweep_thresholds().map(|t| e_measure_at(pair, t)).sum::<f64>() / THRESHOLD_LEVELS as f64,
    }
}

fn object_score(values: &[f64]) -> f64 {
    if values.is_empty() {
        return 0.0;
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = if values.len() > 1 { values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0) } else { 0.0 };
    2.0 * mean / (mean * mean + 1.0 + var.sqrt() + f64::EPSILON)
}

/// Object-aware structural similarity.
pub fn s_object(pair: &EvalPair) -> f64 {
    let y = pair.positives() as f64 / pair.len() as f64;
    let mut fg = Vec::new();
    let mut bg = Vec::new();
    for (&p, &g) in pair.pred.iter().zip(&pair.gt) {
        if g {
            fg.push(p);
        } else {
            bg.push(1.0 - p);
        }
    }
    y * object_score(&fg) + (1.0 - y) * object_score(&bg)
}

/// Rounds half away from zero, as the reference implementation does.
fn round_half_away(v: f64) -> usize {
    v.round() as usize
}

/// Split point `(x, y)` of the region score: the ground-truth centroid, one-based
/// so that column `x - 1` and row `y - 1` belong to the top-left block.
pub fn centroid(pair: &EvalPair) -> (usize, usize) {
    let (h, w) = (pair.height, pair.width);
    let count = pair.positives();
    if count == 0 {
        return (round_half_away(w as f64 / 2.0), round_half_away(h as f64 / 2.0));
    }
    let (mut sx, mut sy) = (0.0, 0.0);
    for r in 0..h {
        for c in 0..w {
            if pair.gt[r * w + c] {
                sx += c as f64;
                sy += r as f64;
            }
        }
    }
    (round_half_away(sx / count as f64) + 1, round_half_away(sy / count as f64) + 1)
}

fn block_ssim(pred: &[f64], gt: &[f64]) -> f64 {
    let n = pred.len() as f64;
    let x = pred.iter().sum::<f64>() / n;
    let y = gt.iter().sum::<f64>() / n;
    let (mut sxx, mut syy, mut sxy) = (0.0, 0.0, 0.0);
    for (p, g) in pred.iter().zip(gt) {
        sxx += (p - x) * (p - x);
        syy += (g - y) * (g - y);
        sxy += (p - x) * (g - y);
    }
    let d = n - 1.0 + f64::EPSILON;
    let (sxx, syy, sxy) = (sxx / d, syy / d, sxy / d);
    let alpha = 4.0 * x * y * sxy;
    let beta = (x * x + y * y) * (sxx + syy);
    if alpha != 0.0 {
        alpha / (beta + f64::EPSILON)
    } else if beta == 0.0 {
        1.0
    } else {
        0.0
    }
}

/// Region-aware structural similarity over the four centroid blocks.
pub fn s_region(pair: &EvalPair) -> f64 {
    let (h, w) = (pair.height, pair.width);
    let (x, y) = centroid(pair);
    let (x, y) = (x.min(w), y.min(h));
    let area = (h * w) as f64;
    let blocks = [(0, y, 0, x), (0, y, x, w), (y, h, 0, x), (y, h, x, w)];
    let mut total = 0.0;
    for (r0, r1, c0, c1) in blocks {
        if r1 <= r0 || c1 <= c0 {
            continue;
        }
        let mut p = Vec::with_capacity((r1 - r0) * (c1 - c0));
        let mut g = Vec::with_capacity(p.capacity());
        for r in r0..r1 {
            for c in c0..c1 {
                p.push(pair.pred[r * w + c]);
                g.push(f64::from(u8::from(pair.gt[r * w + c])));
            }
        }
        let weight = ((r1 - r0) * (c1 - c0)) as f64 / area;
        total += weight * block_ssim(&p, &g);
    }
    total
}

/// Structure measure `alpha·S_o + (1 − alpha)·S_r`, with the usual fallbacks
/// for all-background and all-foreground ground truth.
pub fn s_measure(pair: &EvalPair, alpha: f64) -> Result<f64> {
    if !(0.0..=1.0).contains(&alpha) {
        return Err(contract_err!("alpha must lie in [0, 1], got {alpha}"));
    }
    let n = pair.len() as f64;
    let y = pair.positives() as f64 / n;
    let mean_p = pair.pred.iter().sum::<f64>() / n;
    let q = if y == 0.0 {
        1.0 - mean_p
    } else if y == 1.0 {
        mean_p
    } else {
        alpha * s_object(pair) + (1.0 - alpha) * s_region(pair)
    };
    Ok(q.max(0.0))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IouReport {
    /// `None` for classes absent from both maps.
    pub per_class: Vec<Option<f64>>,
    pub mean: f64,
}

/// Per-class intersection over union and its mean over classes present in either map.
pub fn miou(pred: &[usize], gt: &[usize], classes: usize) -> Result<IouReport> {
    if pred.len() != gt.len() {
        return Err(dim_err!("{} predicted labels vs {} ground-truth labels", pred.len(), gt.len()));
    }
    if let Some(bad) = pred.iter().chain(gt).find(|&&c| c >= classes) {
        return Err(contract_err!("class id {bad} out of range for {classes} classes"));
    }
    let mut tp = vec![0usize; classes];
    let mut fp = vec![0usize; classes];
    let mut fn_ = vec![0usize; classes];
    for (&p, &g) in pred.iter().zip(gt) {
        if p == g {
            tp[p] += 1;
        } else {
            fp[p] += 1;
            fn_[g] += 1;
        }
    }
    let per_class: Vec<Option<f64>> = (0..classes)
        .map(|k| {
            let denom = tp[k] + fp[k] + fn_[k];
            (denom > 0).then(|| tp[k] as f64 / denom as f64)
        })
        .collect();
    let present: Vec<f64> = per_class.iter().flatten().copied().collect();
    let mean = if present.is_empty() { 0.0 } else { present.iter().sum::<f64>() / present.len() as f64 };
    Ok(IouReport { per_class, mean })
}

/// All saliency metrics of one image.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SaliencyReport {
    pub mae: f64,
    pub f_adaptive: f64,
    pub f_mean: f64,
    pub e_adaptive: f64,
    pub e_mean: f64,
    pub s_measure: f64,
    pub empty_gt: bool,
}

impl SaliencyReport {
    pub fn evaluate(pair: &EvalPair, beta2: f64, alpha: f64) -> Result<Self> {
        let fa = f_measure(pair, beta2, ThresholdMode::Adaptive)?;
        let fm = f_measure(pair, beta2, ThresholdMode::Mean)?;
        Ok(Self {
            mae: mae(pair),
            f_adaptive: fa.value,
            f_mean: fm.value,
            e_adaptive: e_measure(pair, ThresholdMode::Adaptive),
            e_mean: e_measure(pair, ThresholdMode::Mean),
            s_measure: s_measure(pair, alpha)?,
            empty_gt: fa.empty_gt,
        })
    }

    /// Field-wise mean over images.
    pub fn average(reports: &[SaliencyReport]) -> Option<Self> {
        if reports.is_empty() {
            return None;
        }
        let n = reports.len() as f64;
        let avg = |f: fn(&SaliencyReport) -> f64| reports.iter().map(f).sum::<f64>() / n;
        Some(Self {
            mae: avg(|r| r.mae),
            f_adaptive: avg(|r| r.f_adaptive),
            f_mean: avg(|r| r.f_mean),
            e_adaptive: avg(|r| r.e_adaptive),
            e_mean: avg(|r| r.e_mean),
            s_measure: avg(|r| r.s_measure),
            empty_gt: reports.iter().any(|r| r.empty_gt),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn pair(h: usize, w: usize, pred: &[f64], gt: &[f64]) -> EvalPair {
        EvalPair::new(h, w, pred.to_vec(), gt).unwrap()
    }

    const GT4: [f64; 16] = [0., 0., 0., 0., 0., 1., 1., 0., 0., 1., 1., 0., 0., 0., 0., 0.];

    #[test]
    fn perfect_prediction() {
        let p = pair(4, 4, &GT4, &GT4);
        assert_eq!(mae(&p), 0.0);
        for mode in [ThresholdMode::Adaptive, ThresholdMode::Mean] {
            assert_eq!(f_measure(&p, 0.3, mode).unwrap().value, 1.0);
            assert!((e_measure(&p, mode) - 1.0).abs() < 1e-12);
        }
        assert!((s_measure(&p, 0.5).unwrap() - 1.0).abs() < 1e-6);
        let r = miou(&[0, 1, 2, 1], &[0, 1, 2, 1], 3).unwrap();
        assert_eq!(r.mean, 1.0);
    }

    #[test]
    fn simple_values() {
        let half = pair(2, 2, &[0.5; 4], &[0.0; 4]);
        assert_eq!(mae(&half), 0.5);
        let zero = pair(4, 4, &[0.0; 16], &GT4);
        assert_eq!(f_measure(&zero, 0.3, ThresholdMode::Adaptive).unwrap().value, 0.0);
        assert_eq!(f_measure(&zero, 0.3, ThresholdMode::Mean).unwrap().value, 0.0);
        let empty = f_measure(&half, 0.3, ThresholdMode::Adaptive).unwrap();
        assert!(empty.empty_gt);
        assert_eq!(empty.value, 0.0);
    }

    #[test]
    fn hand_confusion_matrix() {
        // predict the top two rows: TP = 2, FP = 6, positives = 4
        let pred: Vec<f64> = (0..16).map(|i| if i < 8 { 0.9 } else { 0.0 }).collect();
        let p = pair(4, 4, &pred, &GT4);
        let (prec, rec, b2) = (2.0 / 8.0, 2.0 / 4.0, 0.3);
        let expect = (1.0 + b2) * prec * rec / (b2 * prec + rec);
        assert!((f_measure_at(&p, b2, 0.5).unwrap().value - expect).abs() < 1e-15);
    }

    #[test]
    fn inverted_balanced_map_scores_low() {
        let gt: Vec<f64> = (0..16).map(|i| f64::from(u8::from(i % 4 < 2))).collect();
        let inv: Vec<f64> = gt.iter().map(|g| 1.0 - g).collect();
        let p = pair(4, 4, &inv, &gt);
        assert!(e_measure(&p, ThresholdMode::Adaptive) < 0.5);
    }

    #[test]
    fn degenerate_e_measure() {
        let all_bg = pair(2, 2, &[0.0; 4], &[0.0; 4]);
        assert_eq!(e_measure(&all_bg, ThresholdMode::Adaptive), 1.0);
        let all_fg = pair(2, 2, &[1.0; 4], &[1.0; 4]);
        assert_eq!(e_measure(&all_fg, ThresholdMode::Mean), 1.0);
    }

    #[test]
    fn s_measure_endpoints_and_constant() {
        let pred: Vec<f64> = (0..16).map(|i| (i as f64 * 0.37).fract()).collect();
        let p = pair(4, 4, &pred, &GT4);
        assert_eq!(s_measure(&p, 1.0).unwrap(), s_object(&p).max(0.0));
        assert_eq!(s_measure(&p, 0.0).unwrap(), s_region(&p).max(0.0));
        let m = GT4.iter().sum::<f64>() / 16.0;
        let c = pair(4, 4, &[m; 16], &GT4);
        assert!(s_measure(&c, 0.5).unwrap() < 1.0 - 1e-3);
    }

    #[test]
    fn miou_counting() {
        let gt = [0, 0, 1, 1, 2, 2, 0, 1];
        let pred = [0, 1, 1, 1, 2, 0, 0, 2];
        let r = miou(&pred, &gt, 4).unwrap();
        // class 0: tp 2, fp 1, fn 1; class 1: tp 2, fp 1, fn 1; class 2: tp 1, fp 1, fn 1
        assert_eq!(r.per_class, vec![Some(0.5), Some(0.5), Some(1.0 / 3.0), None]);
        assert!((r.mean - (0.5 + 0.5 + 1.0 / 3.0) / 3.0).abs() < 1e-15);
        assert_eq!(miou(&[1, 1], &[0, 0], 2).unwrap().mean, 0.0);
    }

    #[test]
    fn invalid_inputs() {
        assert!(EvalPair::new(2, 2, vec![0.5; 4], &[0.0, 0.5, 1.0, 0.0]).is_err());
        assert!(EvalPair::new(2, 2, vec![1.5; 4], &[0.0; 4]).is_err());
        assert!(EvalPair::new(2, 2, vec![0.5; 3], &[0.0; 4]).is_err());
    }
}
