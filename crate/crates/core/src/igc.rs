//! Interval-layer and global-context decoder.
//!
//! The five pyramid levels are first mapped to a shared channel width. Two
//! fusion branches then mix interval layers (two levels apart) with the
//! deepest global features: branch one combines levels 1, 3 and 4 at H/4,
//! branch two combines levels 0, 2 and 4 at H/2. The branches are fused
//! multiplicatively, averaged over channels into a single-channel map, and
//! sigmoid-activated at full resolution.

use ndarray::{Array2, Axis};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::backbone::BackboneProfile;
use crate::graph::{Graph, Var};
use crate::nn::{BlockNorm, ConvBlock, Pass};
use crate::params::ParamStore;
use crate::scalar::Scalar;
use crate::types::{ContextFeatures, FeatureMap, InferenceMap, PyramidFeatures, UnifiedFeatures};

/// Decoder hyperparameters (`decoder.*` config namespace).
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct DecoderConfig {
    /// Kernel size of the channel-unification and fusion convolutions.
    pub kernel: usize,
    /// Whether those convolutions carry batch norm.
    pub batch_norm: bool,
    /// Whether those convolutions end in ReLU.
    pub relu: bool,
}

impl Default for DecoderConfig {
    fn default() -> Self {
        Self { kernel: 3, batch_norm: true, relu: true }
    }
}

/// Graph handles produced by one decoder forward.
pub struct DecoderVars {
    pub unified: [Var; 5],
    pub fcex1: Var,
    pub fcex2: Var,
    pub fcex: Var,
    /// Pre-activation inference, (N,1,H/2,W/2).
    pub t_half: Var,
    /// Sigmoid-activated full-resolution inference, (N,1,H,W).
    pub t_act: Var,
}

pub struct IgcDecoder {
    unify: [ConvBlock; 5],
    fuse1: ConvBlock,
    fuse2: ConvBlock,
}

impl IgcDecoder {
    pub fn new<T: Scalar>(
        ps: &mut ParamStore<T>,
        rng: &mut impl Rng,
        profile: BackboneProfile,
        cfg: &DecoderConfig,
    ) -> Self {
        let chans = profile.channels();
        let u = profile.unified_channels();
        let norm = if cfg.batch_norm { BlockNorm::Batch } else { BlockNorm::None };
        let unify: [ConvBlock; 5] = std::array::from_fn(|i| {
            ConvBlock::new(
                ps,
                rng,
                &format!("decoder.unify{i}"),
                chans[i],
                u,
                cfg.kernel,
                1,
                norm,
                cfg.relu,
            )
        });
        let fuse1 = ConvBlock::new(ps, rng, "decoder.fuse1", 3 * u, u, cfg.kernel, 1, norm, cfg.relu);
        let fuse2 = ConvBlock::new(ps, rng, "decoder.fuse2", 3 * u, u, cfg.kernel, 1, norm, cfg.relu);
        Self { unify, fuse1, fuse2 }
    }

    /// Channel unification: one learned convolution per level, including the
    /// deepest level (its fused consumers need the shared width too).
    pub fn unify<T: Scalar>(&self, g: &mut Graph<T>, pass: &mut Pass<T>, levels: &[Var; 5]) -> [Var; 5] {
        std::array::from_fn(|i| self.unify[i].forward(g, pass, levels[i]))
    }

    /// Context fusion: interval-layer branches mixed with the global level,
    /// then multiplied elementwise.
    pub fn fuse<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        pass: &mut Pass<T>,
        unified: &[Var; 5],
    ) -> (Var, Var, Var) {
        let [f0, f1, f2, f3, f4] = *unified;
        let (h1, w1) = (g.shape(f1)[2], g.shape(f1)[3]);
        let (h0, w0) = (g.shape(f0)[2], g.shape(f0)[3]);
        let f3_up = g.upsample_bilinear(f3, h1, w1);
        let f4_up1 = g.upsample_bilinear(f4, h1, w1);
        let cat1 = g.concat_channels(&[f1, f3_up, f4_up1]);
        let fcex1 = self.fuse1.forward(g, pass, cat1);
        let f2_up = g.upsample_bilinear(f2, h0, w0);
        let f4_up2 = g.upsample_bilinear(f4, h0, w0);
        let cat2 = g.concat_channels(&[f0, f2_up, f4_up2]);
        let fcex2 = self.fuse2.forward(g, pass, cat2);
        let fcex1_up = g.upsample_bilinear(fcex1, h0, w0);
        let fcex = g.mul(fcex1_up, fcex2);
        (fcex1, fcex2, fcex)
    }

    /// Channel-mean inference map and its sigmoid activation at (out_h, out_w).
    /// No nonlinearity is applied between the fusion and the channel mean.
    pub fn infer<T: Scalar>(g: &mut Graph<T>, fcex: Var, out_h: usize, out_w: usize) -> (Var, Var) {
        let t_half = g.mean_channels(fcex);
        let up = g.upsample_bilinear(t_half, out_h, out_w);
        let t_act = g.sigmoid(up);
        (t_half, t_act)
    }

    pub fn forward<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        pass: &mut Pass<T>,
        levels: &[Var; 5],
        out_h: usize,
        out_w: usize,
    ) -> DecoderVars {
        let unified = self.unify(g, pass, levels);
        let (fcex1, fcex2, fcex) = self.fuse(g, pass, &unified);
        let (t_half, t_act) = Self::infer(g, fcex, out_h, out_w);
        DecoderVars { unified, fcex1, fcex2, fcex, t_half, t_act }
    }

    /// Single-sample channel unification on domain types (inference mode).
    pub fn unify_channels<T: Scalar>(
        &self,
        ps: &ParamStore<T>,
        pyr: &PyramidFeatures<T>,
    ) -> UnifiedFeatures<T> {
        let mut g = Graph::inference();
        let levels: [Var; 5] = std::array::from_fn(|i| {
            g.constant(pyr.levels[i].data.clone().insert_axis(Axis(0)).into_dyn())
        });
        let unified = self.unify(&mut g, &mut Pass::Eval(ps), &levels);
        UnifiedFeatures {
            maps: std::array::from_fn(|i| take_single(&g, unified[i])),
        }
    }

    /// Single-sample context fusion on domain types (inference mode).
    pub fn fuse_context<T: Scalar>(
        &self,
        ps: &ParamStore<T>,
        uf: &UnifiedFeatures<T>,
    ) -> ContextFeatures<T> {
        let mut g = Graph::inference();
        let unified: [Var; 5] = std::array::from_fn(|i| {
            g.constant(uf.maps[i].data.clone().insert_axis(Axis(0)).into_dyn())
        });
        let (fcex1, fcex2, fcex) = self.fuse(&mut g, &mut Pass::Eval(ps), &unified);
        ContextFeatures {
            fcex1: take_single(&g, fcex1),
            fcex2: take_single(&g, fcex2),
            fcex: take_single(&g, fcex),
        }
    }

    /// Single-sample inference map from fused context features.
    pub fn infer_map<T: Scalar>(cf: &ContextFeatures<T>, out_h: usize, out_w: usize) -> InferenceMap<T> {
        let mut g = Graph::<T>::inference();
        let fcex = g.constant(cf.fcex.data.clone().insert_axis(Axis(0)).into_dyn());
        let (t_half, t_act) = Self::infer(&mut g, fcex, out_h, out_w);
        InferenceMap {
            t_half: plane(&g, t_half),
            t_act: plane(&g, t_act),
        }
    }
}

fn take_single<T: Scalar>(g: &Graph<T>, v: Var) -> FeatureMap<T> {
    let arr = g
        .value(v)
        .view()
        .into_dimensionality::<ndarray::Ix4>()
        .unwrap()
        .index_axis(Axis(0), 0)
        .to_owned();
    FeatureMap { data: arr }
}

fn plane<T: Scalar>(g: &Graph<T>, v: Var) -> Array2<T> {
    let v4 = g
        .value(v)
        .view()
        .into_dimensionality::<ndarray::Ix4>()
        .unwrap();
    v4.index_axis(Axis(0), 0).index_axis(Axis(0), 0).to_owned()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backbone::{Backbone, InputNorm};
    use crate::types::ImageTensor;
    use ndarray::{Array3, Array4, ArrayD};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn toy_setup(seed: u64, cfg: &DecoderConfig) -> (ParamStore<f64>, Backbone, IgcDecoder) {
        let mut ps = ParamStore::<f64>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let bb = Backbone::new(&mut ps, &mut rng, BackboneProfile::Toy, InputNorm::Identity);
        let dec = IgcDecoder::new(&mut ps, &mut rng, BackboneProfile::Toy, cfg);
        (ps, bb, dec)
    }

    fn random_image(h: usize, w: usize, seed: u64) -> ImageTensor<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        ImageTensor::new(Array3::from_shape_fn((3, h, w), |_| rng.gen_range(0.0..1.0))).unwrap()
    }

    #[test]
    fn toy_decoder_shapes_64() {
        let (ps, bb, dec) = toy_setup(1, &DecoderConfig::default());
        let img = random_image(64, 64, 2);
        let pyr = bb.extract_pyramid(&ps, &img).unwrap();
        let uf = dec.unify_channels(&ps, &pyr);
        let sizes: Vec<_> = uf.maps.iter().map(|m| (m.channels(), m.height())).collect();
        assert_eq!(sizes, vec![(8, 32), (8, 16), (8, 8), (8, 4), (8, 2)]);
        let cf = dec.fuse_context(&ps, &uf);
        assert_eq!((cf.fcex1.channels(), cf.fcex1.height(), cf.fcex1.width()), (8, 16, 16));
        assert_eq!((cf.fcex2.channels(), cf.fcex2.height(), cf.fcex2.width()), (8, 32, 32));
        assert_eq!((cf.fcex.channels(), cf.fcex.height(), cf.fcex.width()), (8, 32, 32));
        let inf = IgcDecoder::infer_map(&cf, 64, 64);
        assert_eq!(inf.t_half.dim(), (32, 32));
        assert_eq!(inf.t_act.dim(), (64, 64));
        assert!(inf.t_act.iter().all(|&v| v > 0.0 && v < 1.0), "sigmoid open range");
    }

    #[test]
    fn zero_pyramid_yields_bias_pattern() {
        // Plain-conv block (no norm, no relu): zero input passes only the bias.
        let cfg = DecoderConfig { kernel: 3, batch_norm: false, relu: false };
        let (mut ps, _bb, dec) = toy_setup(3, &cfg);
        // Give unify0 a recognizable bias.
        let b = ps.lookup("decoder.unify0.conv.b").unwrap();
        ps.update_value(b, |v| v.fill(0.625));
        let zeros = |c: usize, s: usize| FeatureMap::<f64> { data: Array3::zeros((c, s, s)) };
        let pyr = PyramidFeatures {
            levels: [zeros(8, 32), zeros(16, 16), zeros(32, 8), zeros(64, 4), zeros(128, 2)],
        };
        let uf = dec.unify_channels(&ps, &pyr);
        assert!(uf.maps[0].data.iter().all(|&v| v == 0.625));
        assert!(uf.maps[1].data.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn ones_branch_makes_fusion_identity() {
        // fcex = up(fcex1) ⊙ fcex2, so an all-ones fcex1 reproduces fcex2.
        let mut g = Graph::<f64>::new();
        let ones = g.constant(ArrayD::ones(ndarray::IxDyn(&[1, 8, 16, 16])));
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let f2 = Array4::from_shape_fn((1, 8, 32, 32), |_| rng.gen_range(-1.0..1.0));
        let f2v = g.constant(f2.clone().into_dyn());
        let up = g.upsample_bilinear(ones, 32, 32);
        let fcex = g.mul(up, f2v);
        let out = g.value(fcex);
        for (a, b) in out.iter().zip(f2.iter()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn zeroed_fcex2_inputs_absorb_fusion() {
        // F0 = F2 = F4 = 0 with zero bias forces fcex2 = 0, hence fcex = 0.
        let cfg = DecoderConfig { kernel: 3, batch_norm: false, relu: false };
        let (ps, _bb, dec) = toy_setup(5, &cfg);
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let mut mk = |c: usize, s: usize, zero: bool| FeatureMap::<f64> {
            data: if zero {
                Array3::zeros((c, s, s))
            } else {
                Array3::from_shape_fn((c, s, s), |_| rng.gen_range(-1.0..1.0))
            },
        };
        let uf = UnifiedFeatures {
            maps: [mk(8, 32, true), mk(8, 16, false), mk(8, 8, true), mk(8, 4, false), mk(8, 2, true)],
        };
        let cf = dec.fuse_context(&ps, &uf);
        assert!(cf.fcex2.data.iter().all(|&v| v == 0.0));
        assert!(cf.fcex.data.iter().all(|&v| v == 0.0));
        assert!(cf.fcex1.data.iter().any(|&v| v != 0.0));
    }

    #[test]
    fn constant_fcex_gives_constant_inference() {
        let c = 0.8125_f64;
        let cf = ContextFeatures {
            fcex1: FeatureMap { data: Array3::zeros((8, 8, 8)) },
            fcex2: FeatureMap { data: Array3::zeros((8, 16, 16)) },
            fcex: FeatureMap { data: Array3::from_elem((8, 16, 16), c) },
        };
        let inf = IgcDecoder::infer_map(&cf, 32, 32);
        let sig = 1.0 / (1.0 + (-c).exp());
        assert!(inf.t_half.iter().all(|&v| (v - c).abs() < 1e-12));
        assert!(inf.t_act.iter().all(|&v| (v - sig).abs() < 1e-12));
        // fcex ≡ 0 -> t_act ≡ 0.5.
        let cf0 = ContextFeatures {
            fcex: FeatureMap { data: Array3::zeros((8, 16, 16)) },
            ..cf
        };
        let inf0 = IgcDecoder::infer_map(&cf0, 32, 32);
        assert!(inf0.t_act.iter().all(|&v| v == 0.5));
    }

    #[test]
    fn channel_mean_is_linear_in_fcex() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let a = 1.7_f64;
        let b = -0.3_f64;
        let f1 = Array3::from_shape_fn((8, 16, 16), |_| rng.gen_range(-1.0..1.0));
        let f2 = Array3::from_shape_fn((8, 16, 16), |_| rng.gen_range(-1.0..1.0));
        let combo = f1.mapv(|v| a * v) + f2.mapv(|v| b * v);
        let as_cf = |data: Array3<f64>| ContextFeatures {
            fcex1: FeatureMap { data: Array3::zeros((8, 8, 8)) },
            fcex2: FeatureMap { data: Array3::zeros((8, 16, 16)) },
            fcex: FeatureMap { data },
        };
        let lhs = IgcDecoder::infer_map(&as_cf(combo), 32, 32).t_half;
        let m1 = IgcDecoder::infer_map(&as_cf(f1), 32, 32).t_half;
        let m2 = IgcDecoder::infer_map(&as_cf(f2), 32, 32).t_half;
        for ((&l, &x), &y) in lhs.iter().zip(m1.iter()).zip(m2.iter()) {
            let rhs = a * x + b * y;
            let denom = l.abs().max(rhs.abs()).max(1e-9);
            assert!((l - rhs).abs() / denom < 1e-6);
        }
    }

    #[test]
    fn decoder_gradients_match_finite_differences() {
        // mean(t_act) differentiated against every decoder parameter tensor
        // on a 32x32 toy batch; entries are subsampled for the big tensors.
        let (mut ps, _bb, dec) = toy_setup(8, &DecoderConfig::default());
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let sizes = [(8usize, 16usize), (16, 8), (32, 4), (64, 2), (128, 1)];
        let levels_data: Vec<Array4<f64>> = sizes
            .iter()
            .map(|&(c, s)| Array4::from_shape_fn((2, c, s, s), |_| rng.gen_range(-1.0..1.0)))
            .collect();
        let run = |ps: &mut ParamStore<f64>, with_grad: bool| -> (f64, Option<(Graph<f64>, Var)>) {
            let mut g = if with_grad { Graph::new() } else { Graph::inference() };
            let levels: [Var; 5] =
                std::array::from_fn(|i| g.constant(levels_data[i].clone().into_dyn()));
            let out = dec.forward(&mut g, &mut Pass::Train(ps), &levels, 32, 32);
            let loss = g.mean_all(out.t_act);
            let v = g.scalar_value(loss);
            (v, with_grad.then_some((g, loss)))
        };
        let (_, built) = run(&mut ps, true);
        let (g, loss) = built.unwrap();
        let grads = g.backward(loss);
        let by_param = g.param_grads(&grads);
        assert!(!by_param.is_empty());
        let step = 1e-5;
        let mut checked = 0usize;
        for (p, analytic) in &by_param {
            let len = ps.value(*p).len();
            let stride = (len / 6).max(1);
            for j in (0..len).step_by(stride) {
                let orig = ps.value(*p).as_slice().unwrap()[j];
                ps.update_value(*p, |v| v.as_slice_mut().unwrap()[j] = orig + step);
                let (fp, _) = run(&mut ps, false);
                ps.update_value(*p, |v| v.as_slice_mut().unwrap()[j] = orig - step);
                let (fm, _) = run(&mut ps, false);
                ps.update_value(*p, |v| v.as_slice_mut().unwrap()[j] = orig);
                let num = (fp - fm) / (2.0 * step);
                let ana = analytic.as_slice().unwrap()[j];
                let denom = ana.abs().max(num.abs()).max(1e-6);
                assert!(
                    (ana - num).abs() / denom < 1e-3,
                    "param {} entry {j}: analytic {ana:.6e} vs numeric {num:.6e}",
                    ps.name(*p)
                );
                checked += 1;
            }
        }
        assert!(checked > 50, "checked {checked} entries");
    }
}
