//! Composite supervision: binary cross-entropy, structural-similarity and
//! soft-IoU terms over the activated inference map, plus the contrastive
//! penalty when enabled. The same formulas serve ground-truth masks and soft
//! pseudo masks.

use ndarray::{Array2, Array4, ArrayD, IxDyn};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{ndops, Graph, Var};
use crate::scalar::Scalar;

/// `loss.*` config namespace.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct LossConfig {
    /// Probability clamp inside the cross-entropy logs.
    pub bce_eps: f64,
    /// SSIM window side length.
    pub ssim_window: usize,
    /// SSIM Gaussian sigma.
    pub ssim_sigma: f64,
    /// SSIM stability constants (dynamic range 1).
    pub ssim_k1: f64,
    pub ssim_k2: f64,
    /// Soft-IoU smoothing; the default 1.0 keeps gradients bounded on empty
    /// masks (a tiny epsilon is also valid, at the cost of sharper gradients).
    pub iou_eps: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            bce_eps: 1e-7,
            ssim_window: 11,
            ssim_sigma: 1.5,
            ssim_k1: 0.01,
            ssim_k2: 0.03,
            iou_eps: 1.0,
        }
    }
}

/// Graph handles for one loss evaluation.
pub struct LossVars {
    pub bce: Var,
    pub ssim: Var,
    pub iou: Var,
    pub neg: Option<Var>,
    pub total: Var,
}

/// Scalar values of one loss evaluation; `total` is the terms summed in
/// fixed order (bce + ssim + iou + neg).
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct LossBreakdown<T> {
    pub l_bce: T,
    pub l_ssim: T,
    pub l_iou: T,
    pub l_neg: T,
    pub total: T,
}

impl<T: Scalar> LossBreakdown<T> {
    pub fn from_vars(g: &Graph<T>, vars: &LossVars) -> Self {
        let l_bce = g.scalar_value(vars.bce);
        let l_ssim = g.scalar_value(vars.ssim);
        let l_iou = g.scalar_value(vars.iou);
        let l_neg = vars.neg.map(|v| g.scalar_value(v)).unwrap_or_else(T::zero);
        Self {
            l_bce,
            l_ssim,
            l_iou,
            l_neg,
            total: l_bce + l_ssim + l_iou + l_neg,
        }
    }

    pub fn is_finite(&self) -> bool {
        self.total.is_finite()
    }
}

fn check_same_shape<T: Scalar>(g: &Graph<T>, pred: Var, target: &ArrayD<T>) -> Result<()> {
    let ps = g.shape(pred);
    if ps != target.shape() {
        let (h, w) = plane_dims(target.shape());
        let (gh, gw) = plane_dims(ps);
        return Err(Error::ResolutionMismatch {
            expected_h: h,
            expected_w: w,
            got_h: gh,
            got_w: gw,
        });
    }
    Ok(())
}

fn plane_dims(shape: &[usize]) -> (usize, usize) {
    let n = shape.len();
    if n >= 2 {
        (shape[n - 2], shape[n - 1])
    } else {
        (shape.first().copied().unwrap_or(0), 0)
    }
}

/// Mean binary cross-entropy with clamped probabilities.
pub fn bce_graph<T: Scalar>(
    g: &mut Graph<T>,
    pred: Var,
    target: &ArrayD<T>,
    eps: T,
) -> Result<Var> {
    check_same_shape(g, pred, target)?;
    let p = g.clamp(pred, eps, T::one() - eps);
    let log_p = g.ln(p);
    let one_minus_p = g.affine(p, -T::one(), T::one());
    let log_q = g.ln(one_minus_p);
    let t_term = g.mul_const(log_p, target.clone());
    let q_term = g.mul_const(log_q, target.mapv(|t| T::one() - t));
    let sum = g.add(t_term, q_term);
    let mean = g.mean_all(sum);
    Ok(g.affine(mean, -T::one(), T::zero()))
}

/// Symmetric Gaussian window, normalized to unit mass.
pub fn gaussian_kernel<T: Scalar>(side: usize, sigma: f64) -> Array4<T> {
    let center = (side as f64 - 1.0) / 2.0;
    let mut k = Array4::<f64>::zeros((1, 1, side, side));
    for y in 0..side {
        for x in 0..side {
            let dy = y as f64 - center;
            let dx = x as f64 - center;
            k[[0, 0, y, x]] = (-(dy * dy + dx * dx) / (2.0 * sigma * sigma)).exp();
        }
    }
    let total: f64 = k.sum();
    k.mapv(|v| T::cast(v / total))
}

/// `1 - mean SSIM` with a Gaussian window over valid positions.
pub fn ssim_graph<T: Scalar>(
    g: &mut Graph<T>,
    pred: Var,
    target: &ArrayD<T>,
    cfg: &LossConfig,
) -> Result<Var> {
    check_same_shape(g, pred, target)?;
    let shape = g.shape(pred).to_vec();
    assert_eq!(shape.len(), 4, "ssim expects (N,1,H,W)");
    let (h, w) = (shape[2], shape[3]);
    let side = cfg.ssim_window;
    if h < side || w < side {
        return Err(Error::ImageTooSmall { h, w, needed: side });
    }
    let kernel = gaussian_kernel::<T>(side, cfg.ssim_sigma);
    let kvar = g.constant(kernel.clone().into_dyn());
    let c1 = T::cast(cfg.ssim_k1 * cfg.ssim_k1);
    let c2 = T::cast(cfg.ssim_k2 * cfg.ssim_k2);

    // Target-side moments are constants.
    let t4 = target.view().into_dimensionality::<ndarray::Ix4>().unwrap();
    let mu_y = ndops::conv2d_forward(t4, kernel.view(), None, 1, 0);
    let t_sq = target.mapv(|v| v * v);
    let ey2 = ndops::conv2d_forward(
        t_sq.view().into_dimensionality::<ndarray::Ix4>().unwrap(),
        kernel.view(),
        None,
        1,
        0,
    );
    let sigma_y = &ey2 - &mu_y.mapv(|v| v * v);

    let mu_x = g.conv2d(pred, kvar, None, 1, 0);
    let x_sq = g.mul(pred, pred);
    let ex2 = g.conv2d(x_sq, kvar, None, 1, 0);
    let mu_x_sq = g.mul(mu_x, mu_x);
    let sigma_x = g.sub(ex2, mu_x_sq);
    let xy = g.mul_const(pred, target.clone());
    let exy = g.conv2d(xy, kvar, None, 1, 0);
    let mu_xy = g.mul_const(mu_x, mu_y.clone().into_dyn());
    let sigma_xy = g.sub(exy, mu_xy);

    // ((2 mu_x mu_y + C1)(2 sigma_xy + C2)) / ((mu_x^2 + mu_y^2 + C1)(sigma_x + sigma_y + C2))
    let two_mu = g.mul_const(mu_x, mu_y.mapv(|v| T::cast(2.0) * v).into_dyn());
    let num_l = g.affine(two_mu, T::one(), c1);
    let num_r = g.affine(sigma_xy, T::cast(2.0), c2);
    let num = g.mul(num_l, num_r);
    let mu_y_sq = g.constant(mu_y.mapv(|v| v * v).into_dyn());
    let den_l0 = g.add(mu_x_sq, mu_y_sq);
    let den_l = g.affine(den_l0, T::one(), c1);
    let sigma_y_c = g.constant(sigma_y.into_dyn());
    let den_r0 = g.add(sigma_x, sigma_y_c);
    let den_r = g.affine(den_r0, T::one(), c2);
    let den = g.mul(den_l, den_r);
    let ssim_map = g.div(num, den);
    let mean = g.mean_all(ssim_map);
    Ok(g.affine(mean, -T::one(), T::one()))
}

/// Soft IoU: `1 - (sum p*t + eps) / (sum p + sum t - sum p*t + eps)`.
pub fn iou_graph<T: Scalar>(
    g: &mut Graph<T>,
    pred: Var,
    target: &ArrayD<T>,
    eps: T,
) -> Result<Var> {
    check_same_shape(g, pred, target)?;
    let t_sum: T = target.iter().copied().sum();
    let pt = g.mul_const(pred, target.clone());
    let inter = g.sum_all(pt);
    let p_sum = g.sum_all(pred);
    let num = g.affine(inter, T::one(), eps);
    let union_minus = g.sub(p_sum, inter);
    let den = g.affine(union_minus, T::one(), t_sum + eps);
    let ratio = g.div(num, den);
    Ok(g.affine(ratio, -T::one(), T::one()))
}

/// Full objective: the three map losses against `supervision` plus the
/// optional contrastive term (already built by the caller).
pub fn total_loss_graph<T: Scalar>(
    g: &mut Graph<T>,
    pred_act: Var,
    supervision: &ArrayD<T>,
    neg: Option<Var>,
    cfg: &LossConfig,
) -> Result<LossVars> {
    let bce = bce_graph(g, pred_act, supervision, T::cast(cfg.bce_eps))?;
    let ssim = ssim_graph(g, pred_act, supervision, cfg)?;
    let iou = iou_graph(g, pred_act, supervision, T::cast(cfg.iou_eps))?;
    let mut total = g.add(bce, ssim);
    total = g.add(total, iou);
    if let Some(n) = neg {
        total = g.add(total, n);
    }
    Ok(LossVars { bce, ssim, iou, neg, total })
}

fn plane_to_batch<T: Scalar>(plane: &Array2<T>) -> ArrayD<T> {
    let (h, w) = plane.dim();
    plane
        .clone()
        .into_shape_with_order(IxDyn(&[1, 1, h, w]))
        .unwrap()
}

/// Value-level BCE on single-channel planes.
pub fn bce_value<T: Scalar>(pred: &Array2<T>, target: &Array2<T>, cfg: &LossConfig) -> Result<T> {
    let mut g = Graph::inference();
    let p = g.constant(plane_to_batch(pred));
    let v = bce_graph(&mut g, p, &plane_to_batch(target), T::cast(cfg.bce_eps))?;
    Ok(g.scalar_value(v))
}

/// Value-level SSIM loss on single-channel planes.
pub fn ssim_value<T: Scalar>(pred: &Array2<T>, target: &Array2<T>, cfg: &LossConfig) -> Result<T> {
    let mut g = Graph::inference();
    let p = g.constant(plane_to_batch(pred));
    let v = ssim_graph(&mut g, p, &plane_to_batch(target), cfg)?;
    Ok(g.scalar_value(v))
}

/// Value-level soft IoU loss on single-channel planes.
pub fn iou_value<T: Scalar>(pred: &Array2<T>, target: &Array2<T>, cfg: &LossConfig) -> Result<T> {
    let mut g = Graph::inference();
    let p = g.constant(plane_to_batch(pred));
    let v = iou_graph(&mut g, p, &plane_to_batch(target), T::cast(cfg.iou_eps))?;
    Ok(g.scalar_value(v))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck;
    use ndarray::Array2;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn cfg() -> LossConfig {
        LossConfig::default()
    }

    fn random_plane(h: usize, w: usize, seed: u64, lo: f64, hi: f64) -> Array2<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Array2::from_shape_fn((h, w), |_| rng.gen_range(lo..hi))
    }

    fn random_binary(h: usize, w: usize, seed: u64) -> Array2<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Array2::from_shape_fn((h, w), |_| if rng.gen_bool(0.5) { 1.0 } else { 0.0 })
    }

    #[test]
    fn bce_frozen_values() {
        let gt = random_binary(8, 8, 1);
        // Uniform 0.5 prediction: ln 2 regardless of the target.
        let half = Array2::from_elem((8, 8), 0.5);
        let v = bce_value(&half, &gt, &cfg()).unwrap();
        assert!((v - std::f64::consts::LN_2).abs() < 1e-12);
        // Perfect binary prediction: only the clamp residue remains.
        let v = bce_value(&gt, &gt, &cfg()).unwrap();
        assert!(v > 0.0 && v < 1.5e-7, "clamp residue, got {v}");
        // pred 0.9 vs target 1: -ln 0.9.
        let nine = Array2::from_elem((8, 8), 0.9);
        let ones = Array2::from_elem((8, 8), 1.0);
        let v = bce_value(&nine, &ones, &cfg()).unwrap();
        assert!((v - (-(0.9f64).ln())).abs() < 1e-12);
    }

    #[test]
    fn bce_rejects_resolution_mismatch() {
        let a = Array2::from_elem((8, 8), 0.5);
        let b = Array2::from_elem((8, 9), 1.0);
        assert!(matches!(
            bce_value(&a, &b, &cfg()),
            Err(Error::ResolutionMismatch { .. })
        ));
    }

    #[test]
    fn ssim_zero_for_identical_inputs() {
        let x = random_plane(16, 16, 2, 0.0, 1.0);
        let v = ssim_value(&x, &x, &cfg()).unwrap();
        assert!(v.abs() < 1e-6, "{v}");
        let c = Array2::from_elem((16, 16), 0.5);
        let v: f64 = ssim_value(&c, &c, &cfg()).unwrap();
        assert!(v.abs() < 1e-6);
    }

    #[test]
    fn ssim_rejects_small_images() {
        let x = Array2::from_elem((8, 8), 0.5);
        assert!(matches!(
            ssim_value(&x, &x, &cfg()),
            Err(Error::ImageTooSmall { .. })
        ));
    }

    #[test]
    fn ssim_matches_naive_sliding_window_oracle() {
        let pred = random_plane(32, 32, 3, 0.0, 1.0);
        let gt = random_binary(32, 32, 4);
        let got = ssim_value(&pred, &gt, &cfg()).unwrap();

        // Independent oracle: per-window loops straight from the definition.
        let side = 11;
        let sigma = 1.5;
        let kernel = gaussian_kernel::<f64>(side, sigma);
        let (c1, c2) = (0.01f64.powi(2), 0.03f64.powi(2));
        let mut acc = 0.0;
        let mut count = 0usize;
        for oy in 0..=(32 - side) {
            for ox in 0..=(32 - side) {
                let (mut mx, mut my) = (0.0, 0.0);
                let (mut exx, mut eyy, mut exy) = (0.0, 0.0, 0.0);
                for ky in 0..side {
                    for kx in 0..side {
                        let w = kernel[[0, 0, ky, kx]];
                        let xv = pred[[oy + ky, ox + kx]];
                        let yv = gt[[oy + ky, ox + kx]];
                        mx += w * xv;
                        my += w * yv;
                        exx += w * xv * xv;
                        eyy += w * yv * yv;
                        exy += w * xv * yv;
                    }
                }
                let sx = exx - mx * mx;
                let sy = eyy - my * my;
                let sxy = exy - mx * my;
                let ssim = ((2.0 * mx * my + c1) * (2.0 * sxy + c2))
                    / ((mx * mx + my * my + c1) * (sx + sy + c2));
                acc += ssim;
                count += 1;
            }
        }
        let expect = 1.0 - acc / count as f64;
        assert!((got - expect).abs() < 1e-6, "{got} vs {expect}");
    }

    #[test]
    fn ssim_is_symmetric() {
        let a = random_plane(16, 16, 5, 0.0, 1.0);
        let b = random_plane(16, 16, 6, 0.0, 1.0);
        let ab = ssim_value(&a, &b, &cfg()).unwrap();
        let ba = ssim_value(&b, &a, &cfg()).unwrap();
        assert!((ab - ba).abs() < 1e-9);
    }

    #[test]
    fn iou_frozen_values() {
        let gt = random_binary(8, 8, 7);
        let v = iou_value(&gt, &gt, &cfg()).unwrap();
        assert!(v.abs() < 1e-6);
        // pred 0, target 1 on an N-pixel image: 1 - eps/(N + eps).
        let zeros = Array2::zeros((8, 8));
        let ones = Array2::from_elem((8, 8), 1.0);
        let v: f64 = iou_value(&zeros, &ones, &cfg()).unwrap();
        let n = 64.0;
        assert!((v - (1.0 - 1.0 / (n + 1.0))).abs() < 1e-12);
    }

    #[test]
    fn iou_matches_pixel_sums() {
        let pred = random_plane(16, 16, 8, 0.0, 1.0);
        let gt = random_binary(16, 16, 9);
        let got = iou_value(&pred, &gt, &cfg()).unwrap();
        let inter: f64 = pred.iter().zip(gt.iter()).map(|(&p, &t)| p * t).sum();
        let psum: f64 = pred.sum();
        let tsum: f64 = gt.sum();
        let expect = 1.0 - (inter + 1.0) / (psum + tsum - inter + 1.0);
        assert!((got - expect).abs() < 1e-12);
    }

    #[test]
    fn components_stay_in_range() {
        for seed in 0..5 {
            let pred = random_plane(16, 16, 100 + seed, 1e-4, 1.0 - 1e-4);
            let gt = random_binary(16, 16, 200 + seed);
            let b = bce_value(&pred, &gt, &cfg()).unwrap();
            let s = ssim_value(&pred, &gt, &cfg()).unwrap();
            let i = iou_value(&pred, &gt, &cfg()).unwrap();
            assert!(b >= 0.0);
            assert!((0.0..=2.0).contains(&s));
            assert!((0.0..=1.0).contains(&i));
        }
    }

    #[test]
    fn perfect_prediction_near_zero_everywhere() {
        let gt = random_binary(16, 16, 10);
        let b = bce_value(&gt, &gt, &cfg()).unwrap();
        let s = ssim_value(&gt, &gt, &cfg()).unwrap();
        let i = iou_value(&gt, &gt, &cfg()).unwrap();
        assert!(b < 1e-5 && s < 1e-5 && i < 1e-5, "bce {b}, ssim {s}, iou {i}");
    }

    #[test]
    fn gradient_checks_on_16x16() {
        let gt = random_binary(16, 16, 11);
        let target = plane_to_batch(&gt);
        // Pre-sigmoid leaf keeps pred in (0,1) while perturbing freely.
        let logits = random_plane(16, 16, 12, -2.0, 2.0)
            .into_shape_with_order(IxDyn(&[1, 1, 16, 16]))
            .unwrap();
        let c = cfg();
        let check = |f: &dyn Fn(&mut Graph<f64>, Var) -> Var| {
            let t = target.clone();
            gradcheck::max_relative_error(
                &move |g: &mut Graph<f64>, vars: &[Var]| {
                    let p = g.sigmoid(vars[0]);
                    let _ = t.clone();
                    f(g, p)
                },
                std::slice::from_ref(&logits),
                1e-6,
                1e-7,
            )
        };
        let t1 = target.clone();
        let e = check(&move |g, p| bce_graph(g, p, &t1, 1e-7).unwrap());
        assert!(e < 1e-3, "bce grad err {e:.2e}");
        let t2 = target.clone();
        let c2 = c.clone();
        let e = check(&move |g, p| ssim_graph(g, p, &t2, &c2).unwrap());
        assert!(e < 1e-3, "ssim grad err {e:.2e}");
        let t3 = target.clone();
        let e = check(&move |g, p| iou_graph(g, p, &t3, 1.0).unwrap());
        assert!(e < 1e-3, "iou grad err {e:.2e}");
        let t4 = target.clone();
        let c4 = c.clone();
        let e = check(&move |g, p| {
            total_loss_graph(g, p, &t4, None, &c4).unwrap().total
        });
        assert!(e < 1e-3, "total grad err {e:.2e}");
    }

    #[test]
    fn breakdown_total_is_exact_sum() {
        let gt = random_binary(16, 16, 13);
        let pred = random_plane(16, 16, 14, 0.01, 0.99);
        let mut g = Graph::<f64>::inference();
        let p = g.constant(plane_to_batch(&pred));
        let vars = total_loss_graph(&mut g, p, &plane_to_batch(&gt), None, &cfg()).unwrap();
        let bd = LossBreakdown::from_vars(&g, &vars);
        assert_eq!(bd.total, bd.l_bce + bd.l_ssim + bd.l_iou + bd.l_neg);
        assert_eq!(bd.l_neg, 0.0);
    }
}
