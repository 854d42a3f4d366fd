//! Domain tensors: images, feature pyramids, masks, inference maps and
//! semantic embeddings.

use ndarray::{Array1, Array2, Array3};

use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Normalized RGB image, stored channel-first (3,H,W) with values in [0,1].
///
/// Height and width must both divide by 32 so every pyramid level has an
/// integer spatial size. Channel statistics normalization (when a backbone
/// profile requests it) happens inside the backbone, keeping this type's
/// value range intact.
#[derive(Debug, Clone)]
pub struct ImageTensor<T: Scalar> {
    data: Array3<T>,
}

impl<T: Scalar> ImageTensor<T> {
    pub fn new(data: Array3<T>) -> Result<Self> {
        let (c, h, w) = data.dim();
        if c != 3 {
            return Err(Error::ShapeViolation(format!(
                "image must have 3 channels, got {c}"
            )));
        }
        if h % 32 != 0 || w % 32 != 0 {
            return Err(Error::ShapeViolation(format!(
                "image size {h}x{w} not divisible by 32"
            )));
        }
        if !data.iter().all(|v| v.is_finite()) {
            return Err(Error::ShapeViolation("image contains non-finite values".into()));
        }
        Ok(Self { data })
    }

    pub fn data(&self) -> &Array3<T> {
        &self.data
    }

    pub fn height(&self) -> usize {
        self.data.dim().1
    }

    pub fn width(&self) -> usize {
        self.data.dim().2
    }
}

/// One stage's activations, channel-first (C,H,W).
#[derive(Debug, Clone)]
pub struct FeatureMap<T: Scalar> {
    pub data: Array3<T>,
}

impl<T: Scalar> FeatureMap<T> {
    pub fn channels(&self) -> usize {
        self.data.dim().0
    }

    pub fn height(&self) -> usize {
        self.data.dim().1
    }

    pub fn width(&self) -> usize {
        self.data.dim().2
    }
}

/// The five-level encoder output bundle; level `i` spans (H/2^{i+1}, W/2^{i+1}).
#[derive(Debug, Clone)]
pub struct PyramidFeatures<T: Scalar> {
    pub levels: [FeatureMap<T>; 5],
}

impl<T: Scalar> PyramidFeatures<T> {
    /// Validates the halving spatial contract against the input size.
    pub fn check_contract(&self, image_h: usize, image_w: usize, channels: &[usize; 5]) -> Result<()> {
        for (i, level) in self.levels.iter().enumerate() {
            let expect_h = image_h / (2 << i);
            let expect_w = image_w / (2 << i);
            if level.height() != expect_h || level.width() != expect_w {
                return Err(Error::ShapeViolation(format!(
                    "level {i} is {}x{}, expected {expect_h}x{expect_w}",
                    level.height(),
                    level.width()
                )));
            }
            if level.channels() != channels[i] {
                return Err(Error::ShapeViolation(format!(
                    "level {i} has {} channels, expected {}",
                    level.channels(),
                    channels[i]
                )));
            }
        }
        Ok(())
    }
}

/// Channel-unified decoder features: five maps sharing one channel count,
/// spatially matching their source pyramid levels.
#[derive(Debug, Clone)]
pub struct UnifiedFeatures<T: Scalar> {
    pub maps: [FeatureMap<T>; 5],
}

/// The decoder's two context branches and their multiplicative fusion.
///
/// `fcex1` lives at the second level's resolution (H/4), `fcex2` and `fcex`
/// at the first level's (H/2); `fcex = up(fcex1) ⊙ fcex2`.
#[derive(Debug, Clone)]
pub struct ContextFeatures<T: Scalar> {
    pub fcex1: FeatureMap<T>,
    pub fcex2: FeatureMap<T>,
    pub fcex: FeatureMap<T>,
}

/// Single-channel soft mask with values in [0,1].
#[derive(Debug, Clone, PartialEq)]
pub struct MaskTensor<T: Scalar> {
    pub data: Array2<T>,
}

impl<T: Scalar> MaskTensor<T> {
    pub fn new(data: Array2<T>) -> Self {
        Self {
            data: data.mapv(|v| v.max(T::zero()).min(T::one())),
        }
    }

    pub fn height(&self) -> usize {
        self.data.dim().0
    }

    pub fn width(&self) -> usize {
        self.data.dim().1
    }

    pub fn resize_bilinear(&self, h: usize, w: usize) -> Self {
        Self::new(crate::interp::resize_bilinear(&self.data, h, w))
    }

    pub fn resize_nearest(&self, h: usize, w: usize) -> Self {
        Self {
            data: crate::interp::resize_nearest(&self.data, h, w),
        }
    }

    /// Hard-thresholds at 0.5 into a strict {0,1} mask.
    pub fn binarize(&self) -> Self {
        let half = T::cast(0.5);
        Self {
            data: self.data.mapv(|v| if v >= half { T::one() } else { T::zero() }),
        }
    }
}

/// Decoder prediction: pre-activation map at half resolution and the
/// sigmoid-activated full-resolution map.
#[derive(Debug, Clone)]
pub struct InferenceMap<T: Scalar> {
    /// Pre-activation, (H/2, W/2).
    pub t_half: Array2<T>,
    /// Sigmoid of the bilinearly upsampled t_half, (H, W), values in (0,1).
    pub t_act: Array2<T>,
}

/// Whether a semantic embedding describes the foreground or the background.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SemanticKind {
    Foreground,
    Background,
}

/// Per-sample embedding produced by the contrastive heads.
#[derive(Debug, Clone)]
pub struct SemanticVector<T: Scalar> {
    pub values: Array1<T>,
    pub kind: SemanticKind,
    pub sample_id: usize,
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array3;

    #[test]
    fn image_requires_divisible_size() {
        let ok = ImageTensor::new(Array3::<f64>::zeros((3, 64, 64)));
        assert!(ok.is_ok());
        let bad = ImageTensor::new(Array3::<f64>::zeros((3, 63, 64)));
        assert!(matches!(bad, Err(Error::ShapeViolation(_))));
    }

    #[test]
    fn image_rejects_non_finite() {
        let mut data = Array3::<f64>::zeros((3, 32, 32));
        data[[0, 0, 0]] = f64::NAN;
        assert!(ImageTensor::new(data).is_err());
    }

    #[test]
    fn mask_clamps_on_construction() {
        let m = MaskTensor::new(ndarray::arr2(&[[-0.5, 0.5], [1.5, 1.0]]));
        assert_eq!(m.data, ndarray::arr2(&[[0.0, 0.5], [1.0, 1.0]]));
    }

    #[test]
    fn binarize_is_strict() {
        let m = MaskTensor::new(ndarray::arr2(&[[0.49, 0.5], [0.51, 0.0]]));
        let b = m.binarize();
        assert_eq!(b.data, ndarray::arr2(&[[0.0, 1.0], [1.0, 0.0]]));
    }
}
