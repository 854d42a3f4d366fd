//! Five-level feature pyramid encoders.
//!
//! Two profiles share one shape contract (level `i` spans H/2^{i+1} with a
//! fixed channel count): `full` is a residual bottleneck network matching the
//! standard 50-layer channel profile [64, 256, 512, 1024, 2048]; `toy` is a
//! five-stage strided stack with channels [8, 16, 32, 64, 128], small enough
//! for property tests and gradient checks.

use ndarray::{Array3, Array4, Axis};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::nn::{BatchNorm2d, BlockNorm, Conv2d, ConvBlock, Pass};
use crate::params::ParamStore;
use crate::scalar::Scalar;
use crate::types::{FeatureMap, ImageTensor, PyramidFeatures};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BackboneProfile {
    Full,
    Toy,
}

impl BackboneProfile {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "full" => Ok(Self::Full),
            "toy" => Ok(Self::Toy),
            other => Err(Error::UnknownProfile(other.to_string())),
        }
    }

    /// Channel count per pyramid level.
    pub fn channels(&self) -> [usize; 5] {
        match self {
            Self::Full => [64, 256, 512, 1024, 2048],
            Self::Toy => [8, 16, 32, 64, 128],
        }
    }

    /// Width of the unified decoder features for this profile.
    pub fn unified_channels(&self) -> usize {
        match self {
            Self::Full => 64,
            Self::Toy => 8,
        }
    }

    /// Dimension of the semantic embeddings for this profile.
    pub fn semantic_dim(&self) -> usize {
        match self {
            Self::Full => 64,
            Self::Toy => 16,
        }
    }
}

/// Per-channel input statistics applied before the stem.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum InputNorm {
    /// Keep [0,1] values as-is (toy profile, randomly initialized nets).
    Identity,
    /// Standard natural-image statistics, for use with pretrained weights.
    Natural,
}

const NATURAL_MEAN: [f64; 3] = [0.485, 0.456, 0.406];
const NATURAL_STD: [f64; 3] = [0.229, 0.224, 0.225];

struct Bottleneck {
    c1: Conv2d,
    bn1: BatchNorm2d,
    c2: Conv2d,
    bn2: BatchNorm2d,
    c3: Conv2d,
    bn3: BatchNorm2d,
    down: Option<(Conv2d, BatchNorm2d)>,
}

impl Bottleneck {
    fn new<T: Scalar>(
        ps: &mut ParamStore<T>,
        rng: &mut impl Rng,
        name: &str,
        cin: usize,
        cmid: usize,
        cout: usize,
        stride: usize,
    ) -> Self {
        let c1 = Conv2d::new(ps, rng, &format!("{name}.c1"), cin, cmid, 1, 1, 0, false);
        let bn1 = BatchNorm2d::new(ps, &format!("{name}.bn1"), cmid);
        let c2 = Conv2d::new(ps, rng, &format!("{name}.c2"), cmid, cmid, 3, stride, 1, false);
        let bn2 = BatchNorm2d::new(ps, &format!("{name}.bn2"), cmid);
        let c3 = Conv2d::new(ps, rng, &format!("{name}.c3"), cmid, cout, 1, 1, 0, false);
        let bn3 = BatchNorm2d::new(ps, &format!("{name}.bn3"), cout);
        let down = (stride != 1 || cin != cout).then(|| {
            (
                Conv2d::new(ps, rng, &format!("{name}.down"), cin, cout, 1, stride, 0, false),
                BatchNorm2d::new(ps, &format!("{name}.down_bn"), cout),
            )
        });
        Self { c1, bn1, c2, bn2, c3, bn3, down }
    }

    fn forward<T: Scalar>(&self, g: &mut Graph<T>, pass: &mut Pass<T>, x: Var) -> Var {
        let mut y = self.c1.forward(g, pass.store(), x);
        y = self.bn1.forward(g, pass, y);
        y = g.relu(y);
        y = self.c2.forward(g, pass.store(), y);
        y = self.bn2.forward(g, pass, y);
        y = g.relu(y);
        y = self.c3.forward(g, pass.store(), y);
        y = self.bn3.forward(g, pass, y);
        let shortcut = match &self.down {
            Some((conv, bn)) => {
                let s = conv.forward(g, pass.store(), x);
                bn.forward(g, pass, s)
            }
            None => x,
        };
        let sum = g.add(y, shortcut);
        g.relu(sum)
    }
}

enum Body {
    Full {
        stem: Conv2d,
        stem_bn: BatchNorm2d,
        stages: [Vec<Bottleneck>; 4],
    },
    Toy {
        stages: [ConvBlock; 5],
    },
}

/// Feature pyramid encoder; parameters live in the shared [`ParamStore`].
pub struct Backbone {
    profile: BackboneProfile,
    input_norm: InputNorm,
    body: Body,
}

impl Backbone {
    pub fn new<T: Scalar>(
        ps: &mut ParamStore<T>,
        rng: &mut impl Rng,
        profile: BackboneProfile,
        input_norm: InputNorm,
    ) -> Self {
        let body = match profile {
            BackboneProfile::Full => {
                let stem = Conv2d::new(ps, rng, "backbone.stem", 3, 64, 7, 2, 3, false);
                let stem_bn = BatchNorm2d::new(ps, "backbone.stem_bn", 64);
                let plan: [(usize, usize, usize, usize); 4] = [
                    // (blocks, cmid, cout, first stride)
                    (3, 64, 256, 1),
                    (4, 128, 512, 2),
                    (6, 256, 1024, 2),
                    (3, 512, 2048, 2),
                ];
                let mut cin = 64;
                let mut stages: [Vec<Bottleneck>; 4] = Default::default();
                for (si, (blocks, cmid, cout, stride)) in plan.into_iter().enumerate() {
                    let mut stage = Vec::with_capacity(blocks);
                    for bi in 0..blocks {
                        let s = if bi == 0 { stride } else { 1 };
                        stage.push(Bottleneck::new(
                            ps,
                            rng,
                            &format!("backbone.stage{si}.block{bi}"),
                            cin,
                            cmid,
                            cout,
                            s,
                        ));
                        cin = cout;
                    }
                    stages[si] = stage;
                }
                Body::Full { stem, stem_bn, stages }
            }
            BackboneProfile::Toy => {
                let chans = profile.channels();
                let mut cin = 3;
                let stages: [ConvBlock; 5] = std::array::from_fn(|i| {
                    let blk = ConvBlock::new(
                        ps,
                        rng,
                        &format!("backbone.stage{i}"),
                        cin,
                        chans[i],
                        3,
                        2,
                        BlockNorm::Batch,
                        true,
                    );
                    cin = chans[i];
                    blk
                });
                Body::Toy { stages }
            }
        };
        Self { profile, input_norm, body }
    }

    pub fn profile(&self) -> BackboneProfile {
        self.profile
    }

    /// Applies the configured per-channel statistics to a (N,3,H,W) batch.
    pub fn normalize_batch<T: Scalar>(&self, mut batch: Array4<T>) -> Array4<T> {
        if self.input_norm == InputNorm::Natural {
            for c in 0..3 {
                let mean = T::cast(NATURAL_MEAN[c]);
                let inv_std = T::cast(1.0 / NATURAL_STD[c]);
                batch
                    .slice_mut(ndarray::s![.., c, .., ..])
                    .mapv_inplace(|v| (v - mean) * inv_std);
            }
        }
        batch
    }

    /// Validates the divisibility precondition for a (N,3,H,W) batch.
    pub fn check_input(h: usize, w: usize) -> Result<()> {
        if h % 32 != 0 || w % 32 != 0 {
            return Err(Error::ShapeViolation(format!(
                "input size {h}x{w} not divisible by 32"
            )));
        }
        Ok(())
    }

    /// Graph forward over a normalized image batch; returns the five levels.
    pub fn extract<T: Scalar>(&self, g: &mut Graph<T>, pass: &mut Pass<T>, imgs: Var) -> [Var; 5] {
        match &self.body {
            Body::Full { stem, stem_bn, stages } => {
                let mut y = stem.forward(g, pass.store(), imgs);
                y = stem_bn.forward(g, pass, y);
                let e0 = g.relu(y);
                let mut x = g.max_pool2d(e0, 3, 2, 1);
                let mut levels = [e0; 5];
                for (si, stage) in stages.iter().enumerate() {
                    for block in stage {
                        x = block.forward(g, pass, x);
                    }
                    levels[si + 1] = x;
                }
                levels
            }
            Body::Toy { stages } => {
                let mut x = imgs;
                std::array::from_fn(|i| {
                    x = stages[i].forward(g, pass, x);
                    x
                })
            }
        }
    }

    /// Single-image pyramid extraction (inference mode): the spec-level
    /// `extract_pyramid` operation.
    pub fn extract_pyramid<T: Scalar>(
        &self,
        ps: &ParamStore<T>,
        image: &ImageTensor<T>,
    ) -> Result<PyramidFeatures<T>> {
        Self::check_input(image.height(), image.width())?;
        let batch = image.data().clone().insert_axis(Axis(0));
        let batch = self.normalize_batch(batch);
        let mut g = Graph::inference();
        let imgs = g.constant(batch.into_dyn());
        let levels = self.extract(&mut g, &mut Pass::Eval(ps), imgs);
        let maps: Vec<FeatureMap<T>> = levels
            .iter()
            .map(|&v| {
                let arr = g
                    .value(v)
                    .view()
                    .into_dimensionality::<ndarray::Ix4>()
                    .unwrap()
                    .index_axis(Axis(0), 0)
                    .to_owned();
                FeatureMap::<T> { data: arr as Array3<T> }
            })
            .collect();
        let levels: [FeatureMap<T>; 5] = maps.try_into().map_err(|_| {
            Error::ShapeViolation("expected exactly 5 pyramid levels".into())
        })?;
        let pyr = PyramidFeatures { levels };
        pyr.check_contract(image.height(), image.width(), &self.profile.channels())?;
        Ok(pyr)
    }
}
