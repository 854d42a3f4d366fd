//! Contrastive distillation: foreground embeddings from the decoder
//! inference, background embeddings from masked encoder features, and the
//! `-log(1 - cosine)` penalty pushing them apart.
//!
//! Both vectors are built within an image (not across the batch): the
//! foreground head reads the inference map of a sample, the background head
//! pools that same sample's encoder features under the inverted mask.

use std::sync::atomic::{AtomicU64, Ordering};

use ndarray::{Array1, Array2, Array4, Axis};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::backbone::BackboneProfile;
use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::interp::resize_bilinear;
use crate::nn::Linear;
use crate::params::ParamStore;
use crate::scalar::Scalar;
use crate::types::{FeatureMap, InferenceMap, MaskTensor, SemanticKind, SemanticVector};

/// Foreground head variant: pool the inference map to a fixed 8x8 descriptor
/// (resolution independent) or flatten it literally (fixed resolution).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FgHead {
    Pool8,
    Flatten,
}

/// `cdp.*` config namespace.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct CdpConfig {
    /// Ablation switch: disabled drops the contrastive term entirely.
    pub enabled: bool,
    /// Which pyramid level feeds the background head (0..=4).
    pub bg_level: usize,
    pub fg_head: FgHead,
    /// Floor of the `1 - cos` clamp inside the loss.
    pub clamp_eps: f64,
    /// Below this total weight the background pooling falls back to the
    /// unweighted mean (all-foreground mask).
    pub mask_eps: f64,
}

impl Default for CdpConfig {
    fn default() -> Self {
        Self {
            enabled: true,
            bg_level: 2,
            fg_head: FgHead::Pool8,
            clamp_eps: 1e-6,
            mask_eps: 1e-6,
        }
    }
}

const POOLED_SIDE: usize = 8;

/// Learnable foreground/background embedding heads.
pub struct CdpHeads {
    fg: Linear,
    bg: Linear,
    fg_head: FgHead,
    /// Expected flattened input length when `fg_head == Flatten`.
    flatten_len: Option<usize>,
    pub bg_level: usize,
    clamp_eps: f64,
    mask_eps: f64,
    degenerate_masks: AtomicU64,
}

impl CdpHeads {
    pub fn new<T: Scalar>(
        ps: &mut ParamStore<T>,
        rng: &mut impl Rng,
        profile: BackboneProfile,
        cfg: &CdpConfig,
        image_size: usize,
    ) -> Result<Self> {
        if cfg.bg_level > 4 {
            return Err(Error::Config(format!(
                "cdp.bg_level must be 0..=4, got {}",
                cfg.bg_level
            )));
        }
        let dim = profile.semantic_dim();
        let (fg_in, flatten_len) = match cfg.fg_head {
            FgHead::Pool8 => (POOLED_SIDE * POOLED_SIDE, None),
            FgHead::Flatten => {
                let half = image_size / 2;
                (half * half, Some(half * half))
            }
        };
        let fg = Linear::new(ps, rng, "cdp.fg", fg_in, dim);
        let bg_in = profile.channels()[cfg.bg_level];
        let bg = Linear::new(ps, rng, "cdp.bg", bg_in, dim);
        Ok(Self {
            fg,
            bg,
            fg_head: cfg.fg_head,
            flatten_len,
            bg_level: cfg.bg_level,
            clamp_eps: cfg.clamp_eps,
            mask_eps: cfg.mask_eps,
            degenerate_masks: AtomicU64::new(0),
        })
    }

    /// How many background poolings hit the all-foreground degenerate path.
    pub fn degenerate_mask_count(&self) -> u64 {
        self.degenerate_masks.load(Ordering::Relaxed)
    }

    /// Foreground embeddings from the pre-activation inference (N,1,h,w) -> (N,dim).
    pub fn foreground<T: Scalar>(&self, g: &mut Graph<T>, ps: &ParamStore<T>, t_half: Var) -> Var {
        let shape = g.shape(t_half).to_vec();
        assert_eq!(shape[1], 1, "t_half must be single-channel");
        let n = shape[0];
        let flat = match self.fg_head {
            FgHead::Pool8 => {
                let pooled = g.adaptive_avg_pool(t_half, POOLED_SIDE, POOLED_SIDE);
                g.reshape(pooled, &[n, POOLED_SIDE * POOLED_SIDE])
            }
            FgHead::Flatten => {
                let len = shape[2] * shape[3];
                assert_eq!(
                    Some(len),
                    self.flatten_len,
                    "flatten head is resolution-bound: expected {:?}, got {len}",
                    self.flatten_len
                );
                g.reshape(t_half, &[n, len])
            }
        };
        self.fg.forward(g, ps, flat)
    }

    /// Background embeddings: encoder features (N,C,h,w) pooled under
    /// `1 - downsample(mask)` then mapped to (N,dim). Masks are given at
    /// image resolution and bilinearly downsampled to the feature grid.
    pub fn background<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        ps: &ParamStore<T>,
        features: Var,
        masks: &[Array2<T>],
    ) -> Var {
        let shape = g.shape(features).to_vec();
        let (n, h, w) = (shape[0], shape[2], shape[3]);
        assert_eq!(masks.len(), n, "one mask per sample");
        let mut weights = Array4::<T>::zeros((n, 1, h, w));
        for (ni, mask) in masks.iter().enumerate() {
            let dw = resize_bilinear(mask, h, w);
            weights
                .slice_mut(ndarray::s![ni, 0, .., ..])
                .assign(&dw.mapv(|v| T::one() - v));
        }
        let (pooled, degenerate) = g.masked_mean_hw(features, &weights, T::cast(self.mask_eps));
        if degenerate > 0 {
            self.degenerate_masks.fetch_add(degenerate as u64, Ordering::Relaxed);
            log::warn!("background pooling: {degenerate} all-foreground mask(s), using unweighted mean");
        }
        self.bg.forward(g, ps, pooled)
    }

    /// Contrastive penalty between row-aligned embedding batches.
    pub fn contrastive<T: Scalar>(&self, g: &mut Graph<T>, vf: Var, vb: Var) -> Var {
        g.contrastive(vf, vb, T::cast(self.clamp_eps))
    }

    /// Spec-level single-sample foreground vector on domain types.
    pub fn foreground_vector<T: Scalar>(
        &self,
        ps: &ParamStore<T>,
        inf: &InferenceMap<T>,
        sample_id: usize,
    ) -> SemanticVector<T> {
        let mut g = Graph::inference();
        let (h, w) = inf.t_half.dim();
        let t = g.constant(
            inf.t_half
                .clone()
                .into_shape_with_order((1, 1, h, w))
                .unwrap()
                .into_dyn(),
        );
        let v = self.foreground(&mut g, ps, t);
        SemanticVector {
            values: row0(&g, v),
            kind: SemanticKind::Foreground,
            sample_id,
        }
    }

    /// Spec-level single-sample background vector on domain types.
    pub fn background_vector<T: Scalar>(
        &self,
        ps: &ParamStore<T>,
        features: &FeatureMap<T>,
        mask: &MaskTensor<T>,
        sample_id: usize,
    ) -> SemanticVector<T> {
        let mut g = Graph::inference();
        let f = g.constant(features.data.clone().insert_axis(Axis(0)).into_dyn());
        let v = self.background(&mut g, ps, f, std::slice::from_ref(&mask.data));
        SemanticVector {
            values: row0(&g, v),
            kind: SemanticKind::Background,
            sample_id,
        }
    }

    /// Spec-level contrastive loss over aligned vector lists.
    pub fn contrastive_loss<T: Scalar>(
        &self,
        fg: &[SemanticVector<T>],
        bg: &[SemanticVector<T>],
    ) -> Result<T> {
        if fg.is_empty() {
            return Err(Error::EmptyInput("contrastive_loss needs n >= 1".into()));
        }
        if fg.len() != bg.len() {
            return Err(Error::DimensionMismatch(format!(
                "{} foreground vs {} background vectors",
                fg.len(),
                bg.len()
            )));
        }
        let dim = fg[0].values.len();
        for (f, b) in fg.iter().zip(bg.iter()) {
            if f.sample_id != b.sample_id {
                return Err(Error::DimensionMismatch(format!(
                    "sample order differs: {} vs {}",
                    f.sample_id, b.sample_id
                )));
            }
            if f.values.len() != dim || b.values.len() != dim {
                return Err(Error::DimensionMismatch(
                    "embedding dimensions differ within the batch".into(),
                ));
            }
        }
        let n = fg.len();
        let stack = |vs: &[SemanticVector<T>]| {
            let mut m = Array2::<T>::zeros((n, dim));
            for (i, v) in vs.iter().enumerate() {
                m.row_mut(i).assign(&v.values);
            }
            m
        };
        let mut g = Graph::inference();
        let vf = g.constant(stack(fg).into_dyn());
        let vb = g.constant(stack(bg).into_dyn());
        let loss = self.contrastive(&mut g, vf, vb);
        Ok(g.scalar_value(loss))
    }
}

/// Cosine similarity between two vectors (0 when either is numerically null).
pub fn cosine<T: Scalar>(a: &Array1<T>, b: &Array1<T>) -> T {
    let dot: T = a.iter().zip(b.iter()).map(|(&x, &y)| x * y).sum();
    let na = a.iter().map(|&x| x * x).sum::<T>().sqrt();
    let nb = b.iter().map(|&x| x * x).sum::<T>().sqrt();
    let tiny = T::cast(1e-30);
    if na < tiny || nb < tiny {
        T::zero()
    } else {
        dot / (na * nb)
    }
}

/// Per-sample penalty `-ln(clamp(1 - cos, eps, 2))`.
pub fn per_sample_term<T: Scalar>(cos: T, clamp_eps: T) -> T {
    let u = (T::one() - cos).max(clamp_eps).min(T::cast(2.0));
    -u.ln()
}

fn row0<T: Scalar>(g: &Graph<T>, v: Var) -> Array1<T> {
    g.value(v)
        .view()
        .into_dimensionality::<ndarray::Ix2>()
        .unwrap()
        .index_axis(Axis(0), 0)
        .to_owned()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::interp::resize_nearest;
    use ndarray::{arr1, Array2, Array3};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn heads(seed: u64, cfg: &CdpConfig) -> (ParamStore<f64>, CdpHeads) {
        let mut ps = ParamStore::<f64>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let h = CdpHeads::new(&mut ps, &mut rng, BackboneProfile::Toy, cfg, 64).unwrap();
        (ps, h)
    }

    fn sv(values: Array1<f64>, kind: SemanticKind, id: usize) -> SemanticVector<f64> {
        SemanticVector { values, kind, sample_id: id }
    }

    #[test]
    fn zero_inference_with_zero_bias_maps_to_zero() {
        let (ps, h) = heads(1, &CdpConfig::default());
        let inf = InferenceMap {
            t_half: Array2::zeros((32, 32)),
            t_act: Array2::from_elem((64, 64), 0.5),
        };
        let v = h.foreground_vector(&ps, &inf, 0);
        assert_eq!(v.values.len(), 16);
        assert!(v.values.iter().all(|&x| x == 0.0));
        assert_eq!(v.kind, SemanticKind::Foreground);
    }

    #[test]
    fn constant_inference_matches_row_sums() {
        // Pooled descriptor of a constant map is c*1, so the head returns
        // c * (W . 1) + b.
        let (ps, h) = heads(2, &CdpConfig::default());
        let c = 0.73;
        let inf = InferenceMap {
            t_half: Array2::from_elem((32, 32), c),
            t_act: Array2::from_elem((64, 64), 0.5),
        };
        let v = h.foreground_vector(&ps, &inf, 0);
        let w = ps.value(ps.lookup("cdp.fg.w").unwrap()).clone();
        let w = w.view().into_dimensionality::<ndarray::Ix2>().unwrap().to_owned();
        for (k, &got) in v.values.iter().enumerate() {
            let expect: f64 = c * w.row(k).sum();
            assert!((got - expect).abs() < 1e-10, "{got} vs {expect}");
        }
    }

    #[test]
    fn pooling_is_resolution_independent_for_replicated_grids() {
        // Nearest-upsampling an 8x8 seed to 160x160 and 80x80 pools back to
        // the same descriptor (the seed itself), so the embeddings agree.
        let (ps, h) = heads(3, &CdpConfig::default());
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let seed8 = Array2::from_shape_fn((8, 8), |_| rng.gen_range(-1.0..1.0));
        let mk = |s: usize| InferenceMap {
            t_half: resize_nearest(&seed8, s, s),
            t_act: Array2::from_elem((2 * s, 2 * s), 0.5),
        };
        let va = h.foreground_vector(&ps, &mk(160), 0);
        let vb = h.foreground_vector(&ps, &mk(80), 0);
        // Oracle: pooling arithmetic collapses each replicated block to its
        // seed cell, so both paths equal the seed-applied head.
        let direct = h.foreground_vector(
            &ps,
            &InferenceMap { t_half: seed8, t_act: Array2::from_elem((16, 16), 0.5) },
            0,
        );
        for i in 0..va.values.len() {
            assert!((va.values[i] - vb.values[i]).abs() < 1e-12);
            assert!((va.values[i] - direct.values[i]).abs() < 1e-12);
        }
    }

    #[test]
    fn all_foreground_mask_takes_degenerate_path() {
        let (ps, h) = heads(5, &CdpConfig::default());
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let feats = FeatureMap {
            data: Array3::from_shape_fn((32, 8, 8), |_| rng.gen_range(-1.0..1.0)),
        };
        let ones = MaskTensor::new(Array2::from_elem((64, 64), 1.0));
        assert_eq!(h.degenerate_mask_count(), 0);
        let v = h.background_vector(&ps, &feats, &ones, 0);
        assert_eq!(h.degenerate_mask_count(), 1);
        // Degenerate path == unweighted spatial mean then affine.
        let w = ps.value(ps.lookup("cdp.bg.w").unwrap()).clone();
        let w = w.view().into_dimensionality::<ndarray::Ix2>().unwrap().to_owned();
        let mean: Vec<f64> = (0..32)
            .map(|c| feats.data.index_axis(Axis(0), c).sum() / 64.0)
            .collect();
        for (k, &got) in v.values.iter().enumerate() {
            let expect: f64 = w.row(k).iter().zip(&mean).map(|(&wv, &m)| wv * m).sum();
            assert!((got - expect).abs() < 1e-10);
        }
    }

    #[test]
    fn empty_mask_pools_uniformly() {
        // mask ≡ 0 -> weights ≡ 1 -> plain per-channel mean.
        let (ps, h) = heads(7, &CdpConfig::default());
        let feats = FeatureMap {
            data: Array3::from_shape_fn((32, 8, 8), |(c, _, _)| c as f64 * 0.1),
        };
        let zeros = MaskTensor::new(Array2::zeros((64, 64)));
        let v = h.background_vector(&ps, &feats, &zeros, 0);
        let w = ps.value(ps.lookup("cdp.bg.w").unwrap()).clone();
        let w = w.view().into_dimensionality::<ndarray::Ix2>().unwrap().to_owned();
        for (k, &got) in v.values.iter().enumerate() {
            let expect: f64 = w.row(k).iter().enumerate().map(|(c, &wv)| wv * c as f64 * 0.1).sum();
            assert!((got - expect).abs() < 1e-10);
        }
        assert_eq!(h.degenerate_mask_count(), 0);
    }

    #[test]
    fn masked_pooling_matches_brute_force() {
        let (ps, h) = heads(8, &CdpConfig::default());
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let (c, fh, fw) = (32usize, 8usize, 8usize);
        let feats = FeatureMap {
            data: Array3::from_shape_fn((c, fh, fw), |_| rng.gen_range(-2.0..2.0)),
        };
        let mask = MaskTensor::new(Array2::from_shape_fn((64, 64), |_| {
            if rng.gen_bool(0.5) { 1.0 } else { 0.0 }
        }));
        let v = h.background_vector(&ps, &feats, &mask, 0);

        // Brute-force double-loop oracle.
        let dw = resize_bilinear(&mask.data, fh, fw);
        let mut wsum = 0.0;
        let mut g = vec![0.0f64; c];
        for y in 0..fh {
            for x in 0..fw {
                let wgt = 1.0 - dw[[y, x]];
                wsum += wgt;
                for ci in 0..c {
                    g[ci] += feats.data[[ci, y, x]] * wgt;
                }
            }
        }
        for gc in g.iter_mut() {
            *gc /= wsum;
        }
        let w = ps.value(ps.lookup("cdp.bg.w").unwrap()).clone();
        let w = w.view().into_dimensionality::<ndarray::Ix2>().unwrap().to_owned();
        for (k, &got) in v.values.iter().enumerate() {
            let expect: f64 = w.row(k).iter().zip(&g).map(|(&wv, &m)| wv * m).sum();
            assert!((got - expect).abs() < 1e-9, "{got} vs {expect}");
        }
    }

    #[test]
    fn contrastive_frozen_values() {
        let (_, h) = heads(10, &CdpConfig::default());
        // Orthogonal pair: cos = 0, loss = -ln(1) = 0.
        let fg = vec![sv(arr1(&[1.0, 0.0]), SemanticKind::Foreground, 0)];
        let bg = vec![sv(arr1(&[0.0, 1.0]), SemanticKind::Background, 0)];
        assert!(h.contrastive_loss(&fg, &bg).unwrap().abs() < 1e-15);

        // Aligned up to positive scale: clamp floor, loss = -ln(1e-6).
        let fg = vec![sv(arr1(&[0.5, 0.5]), SemanticKind::Foreground, 0)];
        let bg = vec![sv(arr1(&[2.0, 2.0]), SemanticKind::Background, 0)];
        let expect = -(1e-6f64).ln(); // 13.815510557964274
        assert!((h.contrastive_loss(&fg, &bg).unwrap() - expect).abs() < 1e-9);
        assert!((expect - 13.815510557964274).abs() < 1e-12);

        // n = 2 with cosines {0.5, -1}: (-ln 0.5 - ln 2)/2 = 0 exactly.
        let fg = vec![
            sv(arr1(&[1.0, 0.0]), SemanticKind::Foreground, 0),
            sv(arr1(&[1.0, 0.0]), SemanticKind::Foreground, 1),
        ];
        let bg = vec![
            sv(arr1(&[0.5, 3.0f64.sqrt() / 2.0]), SemanticKind::Background, 0),
            sv(arr1(&[-1.0, 0.0]), SemanticKind::Background, 1),
        ];
        let loss = h.contrastive_loss(&fg, &bg).unwrap();
        assert!(loss.abs() < 1e-12, "expected exact zero, got {loss}");
    }

    #[test]
    fn contrastive_rejects_misaligned_batches() {
        let (_, h) = heads(11, &CdpConfig::default());
        let fg = vec![sv(arr1(&[1.0, 0.0]), SemanticKind::Foreground, 0)];
        let bg = vec![
            sv(arr1(&[0.0, 1.0]), SemanticKind::Background, 0),
            sv(arr1(&[0.0, 1.0]), SemanticKind::Background, 1),
        ];
        assert!(matches!(
            h.contrastive_loss(&fg, &bg),
            Err(Error::DimensionMismatch(_))
        ));
        let fg2 = vec![sv(arr1(&[1.0, 0.0]), SemanticKind::Foreground, 5)];
        let bg2 = vec![sv(arr1(&[0.0, 1.0]), SemanticKind::Background, 6)];
        assert!(h.contrastive_loss(&fg2, &bg2).is_err());
        assert!(matches!(
            h.contrastive_loss::<f64>(&[], &[]),
            Err(Error::EmptyInput(_))
        ));
    }

    #[test]
    fn scale_invariance_of_contrastive_loss() {
        let (_, h) = heads(12, &CdpConfig::default());
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let base_f: Vec<Array1<f64>> = (0..4)
            .map(|_| Array1::from_shape_fn(16, |_| rng.gen_range(-1.0..1.0)))
            .collect();
        let base_b: Vec<Array1<f64>> = (0..4)
            .map(|_| Array1::from_shape_fn(16, |_| rng.gen_range(-1.0..1.0)))
            .collect();
        let pack = |vs: &[Array1<f64>], kind, scale: f64| -> Vec<SemanticVector<f64>> {
            vs.iter()
                .enumerate()
                .map(|(i, v)| sv(v.mapv(|x| x * scale), kind, i))
                .collect()
        };
        let reference = h
            .contrastive_loss(
                &pack(&base_f, SemanticKind::Foreground, 1.0),
                &pack(&base_b, SemanticKind::Background, 1.0),
            )
            .unwrap();
        for scale in [1e-3, 0.5, 7.0, 1234.5] {
            let scaled = h
                .contrastive_loss(
                    &pack(&base_f, SemanticKind::Foreground, scale),
                    &pack(&base_b, SemanticKind::Background, 1.0),
                )
                .unwrap();
            assert!((scaled - reference).abs() < 1e-6, "scale {scale}");
        }
    }

    #[test]
    fn per_sample_term_monotone_and_bounded() {
        let eps = 1e-6;
        // Strictly increasing in cos over a 101-point grid up to 1 - eps.
        let mut prev = f64::NEG_INFINITY;
        for k in 0..=100 {
            let cos = -1.0 + 2.0 * (k as f64 / 100.0) * (1.0 - eps);
            let term = per_sample_term(cos, eps);
            assert!(term > prev, "not increasing at cos={cos}");
            assert!(term >= -(2.0f64.ln()) - 1e-12);
            assert!(term <= -(eps.ln()) + 1e-12);
            prev = term;
        }
    }

    #[test]
    fn contrastive_gradient_matches_finite_differences_away_from_clamp() {
        // Cosines kept in (-0.9, 0.9): away from both clamp edges.
        let mut rng = ChaCha8Rng::seed_from_u64(14);
        let vf = ndarray::ArrayD::from_shape_fn(ndarray::IxDyn(&[4, 8]), |_| rng.gen_range(-1.0..1.0));
        let vb = ndarray::ArrayD::from_shape_fn(ndarray::IxDyn(&[4, 8]), |_| rng.gen_range(-1.0..1.0));
        let err = crate::gradcheck::max_relative_error(
            &|g: &mut Graph<f64>, vars: &[Var]| g.contrastive(vars[0], vars[1], 1e-6),
            &[vf, vb],
            1e-6,
            1e-6,
        );
        assert!(err < 1e-4, "max relative error {err:.3e}");
    }
}
