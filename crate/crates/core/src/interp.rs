//! Bilinear and nearest-neighbor resampling shared by the graph ops,
//! the mask utilities and prediction writers.
//!
//! Bilinear sampling uses the half-pixel (corner-aligned = false) convention:
//! `src = (dst + 0.5) * in/out - 0.5`, negative positions clamped to zero.

use ndarray::Array2;

use crate::scalar::Scalar;

/// Per-output-index interpolation taps along one axis.
#[derive(Debug, Clone, Copy)]
pub struct Tap {
    pub i0: usize,
    pub i1: usize,
    pub w1: f64,
}

impl Tap {
    #[inline]
    pub fn w0(&self) -> f64 {
        1.0 - self.w1
    }
}

/// Computes bilinear taps for resampling a length-`in_len` axis to `out_len`.
pub fn bilinear_taps(in_len: usize, out_len: usize) -> Vec<Tap> {
    assert!(in_len > 0 && out_len > 0, "empty axis");
    let scale = in_len as f64 / out_len as f64;
    (0..out_len)
        .map(|o| {
            let src = ((o as f64 + 0.5) * scale - 0.5).max(0.0);
            let i0 = (src.floor() as usize).min(in_len - 1);
            let i1 = (i0 + 1).min(in_len - 1);
            let w1 = if i1 > i0 { src - i0 as f64 } else { 0.0 };
            Tap { i0, i1, w1 }
        })
        .collect()
}

/// Nearest-neighbor source index per output index (half-pixel convention).
pub fn nearest_taps(in_len: usize, out_len: usize) -> Vec<usize> {
    assert!(in_len > 0 && out_len > 0, "empty axis");
    let scale = in_len as f64 / out_len as f64;
    (0..out_len)
        .map(|o| (((o as f64 + 0.5) * scale).floor() as usize).min(in_len - 1))
        .collect()
}

/// Bilinear resize of a single-channel grid.
pub fn resize_bilinear<T: Scalar>(src: &Array2<T>, out_h: usize, out_w: usize) -> Array2<T> {
    let (h, w) = src.dim();
    if (h, w) == (out_h, out_w) {
        return src.clone();
    }
    let ty = bilinear_taps(h, out_h);
    let tx = bilinear_taps(w, out_w);
    Array2::from_shape_fn((out_h, out_w), |(y, x)| {
        let (ry, rx) = (ty[y], tx[x]);
        let top = src[[ry.i0, rx.i0]].as_f64() * rx.w0() + src[[ry.i0, rx.i1]].as_f64() * rx.w1;
        let bot = src[[ry.i1, rx.i0]].as_f64() * rx.w0() + src[[ry.i1, rx.i1]].as_f64() * rx.w1;
        T::cast(top * ry.w0() + bot * ry.w1)
    })
}

/// Nearest-neighbor resize of a single-channel grid.
pub fn resize_nearest<T: Scalar>(src: &Array2<T>, out_h: usize, out_w: usize) -> Array2<T> {
    let (h, w) = src.dim();
    if (h, w) == (out_h, out_w) {
        return src.clone();
    }
    let ty = nearest_taps(h, out_h);
    let tx = nearest_taps(w, out_w);
    Array2::from_shape_fn((out_h, out_w), |(y, x)| src[[ty[y], tx[x]]])
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::arr2;

    #[test]
    fn taps_are_convex_and_in_range() {
        for (n, m) in [(4, 7), (7, 4), (1, 5), (160, 320), (320, 160)] {
            for t in bilinear_taps(n, m) {
                assert!(t.i0 <= t.i1 && t.i1 < n);
                assert!((0.0..=1.0).contains(&t.w1));
            }
        }
    }

    #[test]
    fn constant_input_resizes_to_same_constant() {
        let src = Array2::from_elem((5, 9), 0.37_f64);
        let up = resize_bilinear(&src, 11, 20);
        for &v in up.iter() {
            assert!((v - 0.37).abs() < 1e-12);
        }
    }

    #[test]
    fn identity_resize_is_exact() {
        let src = arr2(&[[1.0_f64, 2.0], [3.0, 4.0]]);
        assert_eq!(resize_bilinear(&src, 2, 2), src);
        assert_eq!(resize_nearest(&src, 2, 2), src);
    }

    #[test]
    fn nearest_preserves_value_set() {
        let src = arr2(&[[0.0_f64, 1.0], [1.0, 0.0]]);
        let up = resize_nearest(&src, 7, 5);
        assert!(up.iter().all(|&v| v == 0.0 || v == 1.0));
    }

    #[test]
    fn nearest_integer_upsample_replicates_blocks() {
        // 2x2 -> 6x6 with factor 3: each source cell becomes a 3x3 block.
        let src = arr2(&[[1.0_f64, 2.0], [3.0, 4.0]]);
        let up = resize_nearest(&src, 6, 6);
        for y in 0..6 {
            for x in 0..6 {
                assert_eq!(up[[y, x]], src[[y / 3, x / 3]]);
            }
        }
    }
}
