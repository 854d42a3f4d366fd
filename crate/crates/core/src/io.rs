//! Image and mask file I/O.
//!
//! Predictions are written as 8-bit grayscale PNGs (`value = round(255 * p)`).
//! Pseudo masks round-trip through 16-bit grayscale PNGs, bounding the
//! quantization error by 1/65535 per pixel. Loaded 8-bit data maps to [0,1]
//! by exact division by 255.

use std::path::Path;

use image::{DynamicImage, GrayImage, ImageBuffer, Luma};
use ndarray::{Array2, Array3};

use crate::error::{Error, Result};
use crate::scalar::Scalar;

fn decode(path: &Path) -> Result<DynamicImage> {
    image::open(path).map_err(|e| Error::Decode {
        path: path.to_path_buf(),
        reason: e.to_string(),
    })
}

/// Loads an RGB image as (3,H,W) with values in [0,1].
pub fn load_image_rgb<T: Scalar>(path: &Path) -> Result<Array3<T>> {
    let img = decode(path)?.to_rgb8();
    let (w, h) = img.dimensions();
    let mut out = Array3::<T>::zeros((3, h as usize, w as usize));
    for (x, y, px) in img.enumerate_pixels() {
        for c in 0..3 {
            out[[c, y as usize, x as usize]] = T::cast(px.0[c] as f64 / 255.0);
        }
    }
    Ok(out)
}

/// Loads a grayscale mask as (H,W) with values in [0,1] (8-bit: /255).
pub fn load_mask_gray<T: Scalar>(path: &Path) -> Result<Array2<T>> {
    let img = decode(path)?;
    // Preserve 16-bit depth when present.
    if let DynamicImage::ImageLuma16(g) = &img {
        let (w, h) = g.dimensions();
        let mut out = Array2::<T>::zeros((h as usize, w as usize));
        for (x, y, px) in g.enumerate_pixels() {
            out[[y as usize, x as usize]] = T::cast(px.0[0] as f64 / 65535.0);
        }
        return Ok(out);
    }
    let g = img.to_luma8();
    let (w, h) = g.dimensions();
    let mut out = Array2::<T>::zeros((h as usize, w as usize));
    for (x, y, px) in g.enumerate_pixels() {
        out[[y as usize, x as usize]] = T::cast(px.0[0] as f64 / 255.0);
    }
    Ok(out)
}

/// Writes a [0,1] map as 8-bit grayscale PNG.
pub fn save_mask_png8<T: Scalar>(path: &Path, mask: &Array2<T>) -> Result<()> {
    let (h, w) = mask.dim();
    let mut img = GrayImage::new(w as u32, h as u32);
    for (x, y, px) in img.enumerate_pixels_mut() {
        let v = mask[[y as usize, x as usize]].as_f64().clamp(0.0, 1.0);
        px.0[0] = (v * 255.0).round() as u8;
    }
    img.save(path).map_err(|e| Error::Decode {
        path: path.to_path_buf(),
        reason: e.to_string(),
    })
}

/// Writes a [0,1] map as 16-bit grayscale PNG.
pub fn save_mask_png16<T: Scalar>(path: &Path, mask: &Array2<T>) -> Result<()> {
    let (h, w) = mask.dim();
    let mut img: ImageBuffer<Luma<u16>, Vec<u16>> = ImageBuffer::new(w as u32, h as u32);
    for (x, y, px) in img.enumerate_pixels_mut() {
        let v = mask[[y as usize, x as usize]].as_f64().clamp(0.0, 1.0);
        px.0[0] = (v * 65535.0).round() as u16;
    }
    img.save(path).map_err(|e| Error::Decode {
        path: path.to_path_buf(),
        reason: e.to_string(),
    })
}

/// Writes an RGB (3,H,W) [0,1] array as PNG (test fixtures, synthetic data).
pub fn save_image_rgb<T: Scalar>(path: &Path, img: &Array3<T>) -> Result<()> {
    let (c, h, w) = img.dim();
    assert_eq!(c, 3, "expected (3,H,W)");
    let mut out = image::RgbImage::new(w as u32, h as u32);
    for (x, y, px) in out.enumerate_pixels_mut() {
        for ci in 0..3 {
            let v = img[[ci, y as usize, x as usize]].as_f64().clamp(0.0, 1.0);
            px.0[ci] = (v * 255.0).round() as u8;
        }
    }
    out.save(path).map_err(|e| Error::Decode {
        path: path.to_path_buf(),
        reason: e.to_string(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array2;
    use rand::{Rng, SeedableRng};

    #[test]
    fn png16_round_trip_within_quantization() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.png");
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(1);
        let mask = Array2::<f64>::from_shape_fn((13, 9), |_| rng.gen_range(0.0..1.0));
        save_mask_png16(&path, &mask).unwrap();
        let back: Array2<f64> = load_mask_gray(&path).unwrap();
        for (&a, &b) in mask.iter().zip(back.iter()) {
            assert!((a - b).abs() <= 1.0 / 65535.0, "{a} vs {b}");
        }
    }

    #[test]
    fn png8_preserves_quantized_values_exactly() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.png");
        let mask = Array2::<f64>::from_shape_fn((4, 4), |(y, x)| ((y * 4 + x) as f64) / 255.0 * 16.0);
        save_mask_png8(&path, &mask).unwrap();
        let back: Array2<f64> = load_mask_gray(&path).unwrap();
        for (&a, &b) in mask.iter().zip(back.iter()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn decode_error_names_the_file() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("broken.png");
        std::fs::write(&path, b"not a png").unwrap();
        match load_mask_gray::<f64>(&path) {
            Err(Error::Decode { path: p, .. }) => assert!(p.ends_with("broken.png")),
            other => panic!("expected decode error, got {other:?}"),
        }
    }
}
