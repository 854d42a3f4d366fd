//! Evaluation metrics: PR curve, F-measure, MAE, S-measure and E-measure,
//! plus per-dataset aggregation and a parallel directory evaluator.
//!
//! Thresholded set counts are computed over the 256-point grid `k/255`
//! with exact integer arithmetic, so the PR curve matches a brute-force
//! per-threshold count bit for bit. Images with an empty ground truth are
//! excluded from aggregation and surfaced through a separate counter.

use std::path::Path;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;

pub const THRESHOLDS: usize = 256;
const BETA_SQ: f64 = 0.3;

/// A prediction/ground-truth pair; the ground truth is strictly binary.
#[derive(Debug, Clone)]
pub struct EvalPair<T: Scalar> {
    pub pred: Array2<T>,
    pub gt: Array2<T>,
    pub id: String,
}

impl<T: Scalar> EvalPair<T> {
    /// Builds a pair, clamping the prediction to [0,1] and thresholding the
    /// ground truth at 0.5.
    pub fn new(pred: Array2<T>, gt: Array2<T>, id: impl Into<String>) -> Result<Self> {
        let id = id.into();
        if pred.dim() != gt.dim() {
            let (eh, ew) = gt.dim();
            let (gh, gw) = pred.dim();
            return Err(Error::ResolutionMismatch {
                expected_h: eh,
                expected_w: ew,
                got_h: gh,
                got_w: gw,
            });
        }
        let half = T::cast(0.5);
        Ok(Self {
            pred: pred.mapv(|v| v.max(T::zero()).min(T::one())),
            gt: gt.mapv(|v| if v >= half { T::one() } else { T::zero() }),
            id,
        })
    }

    fn gt_count(&self) -> usize {
        self.gt.iter().filter(|&&v| v > T::cast(0.5)).count()
    }

    fn require_nonempty_gt(&self) -> Result<()> {
        if self.gt_count() == 0 {
            return Err(Error::EmptyGroundTruth { id: self.id.clone() });
        }
        Ok(())
    }
}

/// One (precision, recall) point.
#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq)]
pub struct PrPoint<T> {
    pub precision: T,
    pub recall: T,
}

/// F-measure reporting variant over the threshold sweep.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum FBetaVariant {
    #[default]
    Max,
    Mean,
    Adaptive,
}

impl FBetaVariant {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "max" => Ok(Self::Max),
            "mean" => Ok(Self::Mean),
            "adaptive" => Ok(Self::Adaptive),
            other => Err(Error::Config(format!("unknown f-beta variant: {other}"))),
        }
    }
}

/// Per-threshold foreground/intersection counts (exact integers).
///
/// Index `k` corresponds to the binarization `pred >= k/255`.
fn threshold_counts<T: Scalar>(pair: &EvalPair<T>) -> ([u64; THRESHOLDS], [u64; THRESHOLDS]) {
    let mut pred_hist = [0u64; THRESHOLDS];
    let mut inter_hist = [0u64; THRESHOLDS];
    let half = T::cast(0.5);
    for (&p, &g) in pair.pred.iter().zip(pair.gt.iter()) {
        let pv = p.as_f64();
        // Largest k with k/255 <= p, robust to rounding in p*255.
        let mut k = (pv * 255.0).floor() as i64;
        k = k.clamp(0, 255);
        while k + 1 <= 255 && (k + 1) as f64 / 255.0 <= pv {
            k += 1;
        }
        while k > 0 && k as f64 / 255.0 > pv {
            k -= 1;
        }
        if (k as f64 / 255.0) > pv {
            continue; // p < 0 cannot happen after clamping; defensive skip
        }
        pred_hist[k as usize] += 1;
        if g > half {
            inter_hist[k as usize] += 1;
        }
    }
    // Suffix sums: count of pixels with bin >= k.
    let mut pred_cum = [0u64; THRESHOLDS];
    let mut inter_cum = [0u64; THRESHOLDS];
    let mut pa = 0u64;
    let mut ia = 0u64;
    for k in (0..THRESHOLDS).rev() {
        pa += pred_hist[k];
        ia += inter_hist[k];
        pred_cum[k] = pa;
        inter_cum[k] = ia;
    }
    (pred_cum, inter_cum)
}

/// Precision/recall over the 256-threshold sweep. Precision of an empty
/// binarized prediction is defined as 1 (no false positives).
pub fn pr_curve<T: Scalar>(pair: &EvalPair<T>) -> Result<Vec<PrPoint<T>>> {
    pair.require_nonempty_gt()?;
    let gt_total = pair.gt_count() as f64;
    let (pred_cum, inter_cum) = threshold_counts(pair);
    Ok((0..THRESHOLDS)
        .map(|k| {
            let tp = inter_cum[k] as f64;
            let pp = pred_cum[k] as f64;
            let precision = if pp == 0.0 { 1.0 } else { tp / pp };
            let recall = tp / gt_total;
            PrPoint {
                precision: T::cast(precision),
                recall: T::cast(recall),
            }
        })
        .collect())
}

fn f_beta_point(precision: f64, recall: f64) -> f64 {
    let den = BETA_SQ * precision + recall;
    if den == 0.0 {
        0.0
    } else {
        (1.0 + BETA_SQ) * precision * recall / den
    }
}

/// F-measure with beta^2 = 0.3 under the requested variant.
pub fn f_measure<T: Scalar>(pair: &EvalPair<T>, variant: FBetaVariant) -> Result<T> {
    pair.require_nonempty_gt()?;
    match variant {
        FBetaVariant::Max | FBetaVariant::Mean => {
            let curve = pr_curve(pair)?;
            let scores = curve
                .iter()
                .map(|p| f_beta_point(p.precision.as_f64(), p.recall.as_f64()));
            let v = match variant {
                FBetaVariant::Max => scores.fold(0.0f64, f64::max),
                _ => scores.sum::<f64>() / THRESHOLDS as f64,
            };
            Ok(T::cast(v))
        }
        FBetaVariant::Adaptive => {
            let mean2 = (2.0 * mean_of(&pair.pred)).clamp(0.0, 1.0);
            let half = T::cast(0.5);
            let (mut tp, mut pp) = (0u64, 0u64);
            let gt_total = pair.gt_count() as f64;
            for (&p, &g) in pair.pred.iter().zip(pair.gt.iter()) {
                if p.as_f64() >= mean2 {
                    pp += 1;
                    if g > half {
                        tp += 1;
                    }
                }
            }
            let precision = if pp == 0 { 1.0 } else { tp as f64 / pp as f64 };
            let recall = tp as f64 / gt_total;
            Ok(T::cast(f_beta_point(precision, recall)))
        }
    }
}

fn mean_of<T: Scalar>(a: &Array2<T>) -> f64 {
    a.iter().map(|v| v.as_f64()).sum::<f64>() / a.len() as f64
}

/// Mean absolute error over all pixels.
pub fn mae<T: Scalar>(pair: &EvalPair<T>) -> T {
    let s: f64 = pair
        .pred
        .iter()
        .zip(pair.gt.iter())
        .map(|(&p, &g)| (p.as_f64() - g.as_f64()).abs())
        .sum();
    T::cast(s / pair.pred.len() as f64)
}

// ---- S-measure -------------------------------------------------------------

fn object_score(vals: &[f64]) -> f64 {
    if vals.is_empty() {
        return 0.0;
    }
    let n = vals.len() as f64;
    let x = vals.iter().sum::<f64>() / n;
    let sigma = if vals.len() > 1 {
        (vals.iter().map(|v| (v - x) * (v - x)).sum::<f64>() / (n - 1.0)).sqrt()
    } else {
        0.0
    };
    2.0 * x / (x * x + 1.0 + sigma + f64::EPSILON)
}

fn s_object(pred: &Array2<f64>, gt: &Array2<f64>) -> f64 {
    let fg: Vec<f64> = pred
        .iter()
        .zip(gt.iter())
        .filter(|(_, &g)| g > 0.5)
        .map(|(&p, _)| p)
        .collect();
    let bg: Vec<f64> = pred
        .iter()
        .zip(gt.iter())
        .filter(|(_, &g)| g <= 0.5)
        .map(|(&p, _)| 1.0 - p)
        .collect();
    let u = gt.iter().sum::<f64>() / gt.len() as f64;
    u * object_score(&fg) + (1.0 - u) * object_score(&bg)
}

/// Ground-truth centroid as block-cut boundaries (cx, cy).
///
/// The boundary sits at `round(centroid + 0.5)` on the 0-indexed grid, which
/// mirrors under horizontal/vertical flips (away from exact half ties); a
/// plain rounded 1-indexed centroid would shift the split by one pixel
/// between an image and its mirror.
fn gt_centroid(gt: &Array2<f64>) -> (usize, usize) {
    let (h, w) = gt.dim();
    let total: f64 = gt.sum();
    if total == 0.0 {
        return ((w as f64 / 2.0).round() as usize, (h as f64 / 2.0).round() as usize);
    }
    let mut sx = 0.0;
    let mut sy = 0.0;
    for ((y, x), &v) in gt.indexed_iter() {
        sx += v * x as f64;
        sy += v * y as f64;
    }
    (
        (sx / total + 0.5).round() as usize,
        (sy / total + 0.5).round() as usize,
    )
}

/// Block-statistics similarity used by the region term.
fn region_ssim(x: &Array2<f64>, y: &Array2<f64>) -> f64 {
    let n = x.len() as f64;
    let mx = x.sum() / n;
    let my = y.sum() / n;
    let denom = if x.len() > 1 { n - 1.0 } else { 1.0 };
    let sx = x.iter().map(|v| (v - mx) * (v - mx)).sum::<f64>() / denom;
    let sy = y.iter().map(|v| (v - my) * (v - my)).sum::<f64>() / denom;
    let sxy = x
        .iter()
        .zip(y.iter())
        .map(|(&a, &b)| (a - mx) * (b - my))
        .sum::<f64>()
        / denom;
    let alpha = 4.0 * mx * my * sxy;
    let beta = (mx * mx + my * my) * (sx + sy);
    if alpha != 0.0 {
        alpha / (beta + f64::EPSILON)
    } else if beta == 0.0 {
        1.0
    } else {
        0.0
    }
}

fn s_region(pred: &Array2<f64>, gt: &Array2<f64>) -> f64 {
    let (h, w) = gt.dim();
    let (cx, cy) = gt_centroid(gt);
    let cx = cx.clamp(1, w.saturating_sub(1).max(1));
    let cy = cy.clamp(1, h.saturating_sub(1).max(1));
    let area = (h * w) as f64;
    let blocks = [
        (0..cy, 0..cx),
        (0..cy, cx..w),
        (cy..h, 0..cx),
        (cy..h, cx..w),
    ];
    let mut score = 0.0;
    for (rows, cols) in blocks {
        let bh = rows.end - rows.start;
        let bw = cols.end - cols.start;
        if bh == 0 || bw == 0 {
            continue;
        }
        let weight = (bh * bw) as f64 / area;
        let pb = pred
            .slice(ndarray::s![rows.start..rows.end, cols.start..cols.end])
            .to_owned();
        let gb = gt
            .slice(ndarray::s![rows.start..rows.end, cols.start..cols.end])
            .to_owned();
        score += weight * region_ssim(&pb, &gb);
    }
    score
}

/// Structure measure: `alpha * S_object + (1 - alpha) * S_region` with
/// alpha = 0.5; degenerate ground truths score from the prediction mean.
pub fn s_measure<T: Scalar>(pair: &EvalPair<T>) -> T {
    let pred = pair.pred.mapv(|v| v.as_f64());
    let gt = pair.gt.mapv(|v| v.as_f64());
    let y = gt.sum() / gt.len() as f64;
    let q = if y == 0.0 {
        1.0 - mean_of(&pair.pred)
    } else if y == 1.0 {
        mean_of(&pair.pred)
    } else {
        0.5 * s_object(&pred, &gt) + 0.5 * s_region(&pred, &gt)
    };
    T::cast(q.clamp(0.0, 1.0))
}

// ---- E-measure -------------------------------------------------------------

/// Enhanced-alignment measure: the prediction is binarized at twice its mean,
/// compared against the ground truth through the bias-removed alignment
/// matrix, enhanced quadratically and averaged over pixels. Constant ground
/// truths use the definition's constant-map branches.
pub fn e_measure<T: Scalar>(pair: &EvalPair<T>) -> T {
    let tau = (2.0 * mean_of(&pair.pred)).clamp(0.0, 1.0);
    let fm = pair.pred.mapv(|v| if v.as_f64() >= tau { 1.0 } else { 0.0 });
    let gt = pair.gt.mapv(|v| v.as_f64());
    let n = gt.len() as f64;
    let gt_sum = gt.sum();
    let enhanced_mean = if gt_sum == 0.0 {
        fm.iter().map(|&f| 1.0 - f).sum::<f64>() / n
    } else if gt_sum == n {
        fm.sum() / n
    } else {
        let mu_fm = fm.sum() / n;
        let mu_gt = gt_sum / n;
        let mut acc = 0.0;
        for (&f, &g) in fm.iter().zip(gt.iter()) {
            let af = f - mu_fm;
            let ag = g - mu_gt;
            let align = 2.0 * ag * af / (ag * ag + af * af + f64::EPSILON);
            let e = (align + 1.0) * (align + 1.0) / 4.0;
            acc += e;
        }
        acc / n
    };
    T::cast(enhanced_mean.clamp(0.0, 1.0))
}

// ---- Reports ---------------------------------------------------------------

/// All metrics for one image (or the dataset mean when `id == "mean"`).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MetricsReport<T> {
    pub id: String,
    pub mae: T,
    pub f_beta: T,
    pub f_variant: FBetaVariant,
    pub s_measure: T,
    pub e_measure: T,
    pub pr_curve: Vec<PrPoint<T>>,
}

/// Computes every metric for a pair; empty ground truths are an error the
/// caller is expected to count and exclude.
pub fn evaluate_pair<T: Scalar>(pair: &EvalPair<T>, variant: FBetaVariant) -> Result<MetricsReport<T>> {
    pair.require_nonempty_gt()?;
    Ok(MetricsReport {
        id: pair.id.clone(),
        mae: mae(pair),
        f_beta: f_measure(pair, variant)?,
        f_variant: variant,
        s_measure: s_measure(pair),
        e_measure: e_measure(pair),
        pr_curve: pr_curve(pair)?,
    })
}

/// Arithmetic mean of each metric (and of the PR curve pointwise).
pub fn aggregate<T: Scalar>(reports: &[MetricsReport<T>]) -> Result<MetricsReport<T>> {
    if reports.is_empty() {
        return Err(Error::EmptyInput("aggregate of zero reports".into()));
    }
    let n = T::cast_usize(reports.len());
    let mut mean = MetricsReport {
        id: "mean".to_string(),
        mae: T::zero(),
        f_beta: T::zero(),
        f_variant: reports[0].f_variant,
        s_measure: T::zero(),
        e_measure: T::zero(),
        pr_curve: vec![
            PrPoint { precision: T::zero(), recall: T::zero() };
            reports[0].pr_curve.len()
        ],
    };
    for r in reports {
        mean.mae += r.mae;
        mean.f_beta += r.f_beta;
        mean.s_measure += r.s_measure;
        mean.e_measure += r.e_measure;
        for (acc, p) in mean.pr_curve.iter_mut().zip(r.pr_curve.iter()) {
            acc.precision += p.precision;
            acc.recall += p.recall;
        }
    }
    mean.mae /= n;
    mean.f_beta /= n;
    mean.s_measure /= n;
    mean.e_measure /= n;
    for p in mean.pr_curve.iter_mut() {
        p.precision /= n;
        p.recall /= n;
    }
    Ok(mean)
}

/// Directory evaluation result.
#[derive(Debug)]
pub struct DirEvaluation<T> {
    pub per_image: Vec<MetricsReport<T>>,
    pub mean: MetricsReport<T>,
    /// Images skipped because their ground truth had no foreground.
    pub excluded_empty_gt: usize,
}

const MASK_EXTS: [&str; 4] = ["png", "jpg", "jpeg", "bmp"];

fn find_with_stem(dir: &Path, stem: &str) -> Option<std::path::PathBuf> {
    MASK_EXTS
        .iter()
        .map(|ext| dir.join(format!("{stem}.{ext}")))
        .find(|p| p.is_file())
}

/// Evaluates every prediction in `pred_dir` against the same-stem ground
/// truth in `gt_dir`. Work is parallel across images; the per-image order
/// (and therefore the aggregate) is deterministic regardless of thread count.
pub fn evaluate_dirs<T: Scalar>(
    pred_dir: &Path,
    gt_dir: &Path,
    variant: FBetaVariant,
    jobs: Option<usize>,
) -> Result<DirEvaluation<T>> {
    use rayon::prelude::*;
    for d in [pred_dir, gt_dir] {
        if !d.is_dir() {
            return Err(Error::MissingDirectory(d.to_path_buf()));
        }
    }
    let mut stems: Vec<String> = std::fs::read_dir(pred_dir)?
        .filter_map(|e| e.ok())
        .filter(|e| e.path().is_file())
        .filter_map(|e| {
            let p = e.path();
            let ext = p.extension()?.to_str()?.to_lowercase();
            MASK_EXTS
                .contains(&ext.as_str())
                .then(|| p.file_stem().unwrap().to_string_lossy().into_owned())
        })
        .collect();
    stems.sort();
    stems.dedup();

    let run = |stems: &[String]| -> Vec<Result<Option<MetricsReport<T>>>> {
        stems
            .par_iter()
            .map(|stem| {
                let pred_path = find_with_stem(pred_dir, stem)
                    .ok_or_else(|| Error::OrphanImage { stem: stem.clone() })?;
                let gt_path = find_with_stem(gt_dir, stem)
                    .ok_or_else(|| Error::OrphanImage { stem: stem.clone() })?;
                let pred = crate::io::load_mask_gray::<T>(&pred_path)?;
                let mut gt = crate::io::load_mask_gray::<T>(&gt_path)?;
                if gt.dim() != pred.dim() {
                    let (h, w) = pred.dim();
                    gt = crate::interp::resize_nearest(&gt, h, w);
                }
                let pair = EvalPair::new(pred, gt, stem.clone())?;
                match evaluate_pair(&pair, variant) {
                    Ok(r) => Ok(Some(r)),
                    Err(Error::EmptyGroundTruth { .. }) => Ok(None),
                    Err(e) => Err(e),
                }
            })
            .collect()
    };
    let results = match jobs {
        Some(j) => rayon::ThreadPoolBuilder::new()
            .num_threads(j.max(1))
            .build()
            .expect("thread pool")
            .install(|| run(&stems)),
        None => run(&stems),
    };

    let mut per_image = Vec::new();
    let mut excluded = 0usize;
    for r in results {
        match r? {
            Some(report) => per_image.push(report),
            None => excluded += 1,
        }
    }
    let mean = aggregate(&per_image)?;
    Ok(DirEvaluation { per_image, mean, excluded_empty_gt: excluded })
}
