//! Synthetic fixtures: geometric foreground shapes over textured noise
//! backgrounds, with matching binary masks. Used by smoke runs, tests and
//! the CLI when no real benchmark data is mounted.

use std::f64::consts::PI;
use std::path::Path;

use ndarray::{Array2, Array3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::scalar::Scalar;

/// Smooth low-frequency texture plus pixel noise, in [0,1].
fn textured_background(rng: &mut ChaCha8Rng, size: usize) -> Array2<f64> {
    let (fx, fy) = (rng.gen_range(1.0..4.0), rng.gen_range(1.0..4.0));
    let (px, py) = (rng.gen_range(0.0..PI), rng.gen_range(0.0..PI));
    let base = rng.gen_range(0.25..0.6);
    let amp = rng.gen_range(0.08..0.2);
    let mut out = Array2::from_shape_fn((size, size), |(y, x)| {
        let u = x as f64 / size as f64;
        let v = y as f64 / size as f64;
        base + amp * ((2.0 * PI * fx * u + px).sin() * (2.0 * PI * fy * v + py).cos())
    });
    out.mapv_inplace(|p| (p + rng.gen_range(-0.05..0.05)).clamp(0.0, 1.0));
    out
}

#[derive(Clone, Copy)]
enum Shape {
    Circle { cx: f64, cy: f64, r: f64 },
    Rect { x0: f64, y0: f64, x1: f64, y1: f64 },
    Ellipse { cx: f64, cy: f64, rx: f64, ry: f64 },
}

impl Shape {
    fn contains(&self, x: f64, y: f64) -> bool {
        match *self {
            Shape::Circle { cx, cy, r } => (x - cx).powi(2) + (y - cy).powi(2) <= r * r,
            Shape::Rect { x0, y0, x1, y1 } => x >= x0 && x <= x1 && y >= y0 && y <= y1,
            Shape::Ellipse { cx, cy, rx, ry } => {
                ((x - cx) / rx).powi(2) + ((y - cy) / ry).powi(2) <= 1.0
            }
        }
    }
}

/// One synthetic sample: RGB image (3,S,S) in [0,1] and its binary mask.
pub fn synth_sample(size: usize, seed: u64) -> (Array3<f64>, Array2<f64>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let s = size as f64;
    let shape = match rng.gen_range(0..3) {
        0 => Shape::Circle {
            cx: rng.gen_range(0.3 * s..0.7 * s),
            cy: rng.gen_range(0.3 * s..0.7 * s),
            r: rng.gen_range(0.12 * s..0.25 * s),
        },
        1 => {
            let x0 = rng.gen_range(0.15 * s..0.45 * s);
            let y0 = rng.gen_range(0.15 * s..0.45 * s);
            Shape::Rect {
                x0,
                y0,
                x1: x0 + rng.gen_range(0.2 * s..0.4 * s),
                y1: y0 + rng.gen_range(0.2 * s..0.4 * s),
            }
        }
        _ => Shape::Ellipse {
            cx: rng.gen_range(0.35 * s..0.65 * s),
            cy: rng.gen_range(0.35 * s..0.65 * s),
            rx: rng.gen_range(0.12 * s..0.3 * s),
            ry: rng.gen_range(0.1 * s..0.2 * s),
        },
    };
    let mask = Array2::from_shape_fn((size, size), |(y, x)| {
        shape.contains(x as f64 + 0.5, y as f64 + 0.5) as u8 as f64
    });
    // Per-channel background texture; the object gets a shifted tone with
    // its own noise so it is learnable but not trivially thresholdable.
    let fg_tone: [f64; 3] = [
        rng.gen_range(0.55..0.95),
        rng.gen_range(0.05..0.45),
        rng.gen_range(0.3..0.9),
    ];
    let mut image = Array3::<f64>::zeros((3, size, size));
    for c in 0..3 {
        let bg = textured_background(&mut rng, size);
        for y in 0..size {
            for x in 0..size {
                let v = if mask[[y, x]] > 0.5 {
                    0.6 * fg_tone[c] + 0.4 * bg[[y, x]] + rng.gen_range(-0.04..0.04)
                } else {
                    bg[[y, x]]
                };
                image[[c, y, x]] = v.clamp(0.0, 1.0);
            }
        }
    }
    (image, mask)
}

/// Writes `n` synthetic image/mask pairs (`img_<k>.png`) under
/// `dir/images` and `dir/masks`; returns the ids.
pub fn write_dataset(dir: &Path, n: usize, size: usize, seed: u64) -> Result<Vec<String>> {
    let images = dir.join("images");
    let masks = dir.join("masks");
    std::fs::create_dir_all(&images)?;
    std::fs::create_dir_all(&masks)?;
    let mut ids = Vec::with_capacity(n);
    for k in 0..n {
        let id = format!("img_{k:03}");
        let (image, mask) = synth_sample(size, seed.wrapping_add(k as u64));
        crate::io::save_image_rgb(&images.join(format!("{id}.png")), &image)?;
        crate::io::save_mask_png8(&masks.join(format!("{id}.png")), &mask)?;
        ids.push(id);
    }
    Ok(ids)
}

/// Disk dilation of a binary mask.
pub fn dilate<T: Scalar>(mask: &Array2<T>, radius: usize) -> Array2<T> {
    let (h, w) = mask.dim();
    let r = radius as isize;
    let half = T::cast(0.5);
    Array2::from_shape_fn((h, w), |(y, x)| {
        for dy in -r..=r {
            for dx in -r..=r {
                if dy * dy + dx * dx > r * r {
                    continue;
                }
                let yy = y as isize + dy;
                let xx = x as isize + dx;
                if yy >= 0 && yy < h as isize && xx >= 0 && xx < w as isize
                    && mask[[yy as usize, xx as usize]] >= half
                {
                    return T::one();
                }
            }
        }
        T::zero()
    })
}

/// Salt noise: each pixel is forced to 1 with probability `rate`.
pub fn salt<T: Scalar>(mask: &Array2<T>, rate: f64, seed: u64) -> Array2<T> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    mask.mapv(|v| if rng.gen_bool(rate) { T::one() } else { v })
}
