//! Pure array kernels behind the graph ops: im2col convolution, pooling,
//! bilinear resampling and batch-norm statistics.

use ndarray::{Array1, Array2, Array4, ArrayView2, ArrayView3, ArrayView4, Axis};

use crate::interp::{bilinear_taps, Tap};
use crate::scalar::Scalar;

pub fn conv_out_len(in_len: usize, k: usize, stride: usize, pad: usize) -> usize {
    (in_len + 2 * pad - k) / stride + 1
}

/// Unfolds one sample (C,H,W) into columns (C*kh*kw, oh*ow).
pub fn im2col<T: Scalar>(
    x: ArrayView3<T>,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
) -> Array2<T> {
    let (c, h, w) = x.dim();
    let oh = conv_out_len(h, kh, stride, pad);
    let ow = conv_out_len(w, kw, stride, pad);
    let mut cols = Array2::<T>::zeros((c * kh * kw, oh * ow));
    for ci in 0..c {
        for ky in 0..kh {
            for kx in 0..kw {
                let row = (ci * kh + ky) * kw + kx;
                let mut out_row = cols.row_mut(row);
                for oy in 0..oh {
                    let y = (oy * stride + ky) as isize - pad as isize;
                    if y < 0 || y >= h as isize {
                        continue;
                    }
                    for ox in 0..ow {
                        let xx = (ox * stride + kx) as isize - pad as isize;
                        if xx < 0 || xx >= w as isize {
                            continue;
                        }
                        out_row[oy * ow + ox] = x[[ci, y as usize, xx as usize]];
                    }
                }
            }
        }
    }
    cols
}

/// Folds columns back onto the input grid, accumulating overlaps.
pub fn col2im<T: Scalar>(
    cols: ArrayView2<T>,
    c: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
) -> ndarray::Array3<T> {
    let oh = conv_out_len(h, kh, stride, pad);
    let ow = conv_out_len(w, kw, stride, pad);
    let mut out = ndarray::Array3::<T>::zeros((c, h, w));
    for ci in 0..c {
        for ky in 0..kh {
            for kx in 0..kw {
                let row = (ci * kh + ky) * kw + kx;
                let col_row = cols.row(row);
                for oy in 0..oh {
                    let y = (oy * stride + ky) as isize - pad as isize;
                    if y < 0 || y >= h as isize {
                        continue;
                    }
                    for ox in 0..ow {
                        let xx = (ox * stride + kx) as isize - pad as isize;
                        if xx < 0 || xx >= w as isize {
                            continue;
                        }
                        out[[ci, y as usize, xx as usize]] += col_row[oy * ow + ox];
                    }
                }
            }
        }
    }
    out
}

/// Batched conv2d forward: x (N,Cin,H,W), w (Cout,Cin,kh,kw), b (Cout).
pub fn conv2d_forward<T: Scalar>(
    x: ArrayView4<T>,
    w: ArrayView4<T>,
    b: Option<&Array1<T>>,
    stride: usize,
    pad: usize,
) -> Array4<T> {
    let (n, cin, h, wd) = x.dim();
    let (cout, cin_w, kh, kw) = w.dim();
    assert_eq!(cin, cin_w, "conv2d channel mismatch");
    let oh = conv_out_len(h, kh, stride, pad);
    let ow = conv_out_len(wd, kw, stride, pad);
    let w_mat = w
        .to_shape((cout, cin * kh * kw))
        .expect("weight reshape")
        .to_owned();
    let mut out = Array4::<T>::zeros((n, cout, oh, ow));
    for ni in 0..n {
        let cols = im2col(x.index_axis(Axis(0), ni), kh, kw, stride, pad);
        let mut y = w_mat.dot(&cols);
        if let Some(b) = b {
            for (mut row, &bv) in y.rows_mut().into_iter().zip(b.iter()) {
                row.mapv_inplace(|v| v + bv);
            }
        }
        let y4 = y.into_shape_with_order((cout, oh, ow)).expect("conv out");
        out.index_axis_mut(Axis(0), ni).assign(&y4);
    }
    out
}

pub struct ConvGrads<T: Scalar> {
    pub dx: Array4<T>,
    pub dw: Array4<T>,
    pub db: Option<Array1<T>>,
}

pub fn conv2d_backward<T: Scalar>(
    x: ArrayView4<T>,
    w: ArrayView4<T>,
    has_bias: bool,
    stride: usize,
    pad: usize,
    grad_out: ArrayView4<T>,
) -> ConvGrads<T> {
    let (n, cin, h, wd) = x.dim();
    let (cout, _, kh, kw) = w.dim();
    let (gn, gc, oh, ow) = grad_out.dim();
    assert_eq!((gn, gc), (n, cout));
    let w_mat = w
        .to_shape((cout, cin * kh * kw))
        .expect("weight reshape")
        .to_owned();
    let mut dx = Array4::<T>::zeros((n, cin, h, wd));
    let mut dw_mat = Array2::<T>::zeros((cout, cin * kh * kw));
    let mut db = if has_bias {
        Some(Array1::<T>::zeros(cout))
    } else {
        None
    };
    for ni in 0..n {
        let cols = im2col(x.index_axis(Axis(0), ni), kh, kw, stride, pad);
        let g = grad_out
            .index_axis(Axis(0), ni)
            .to_shape((cout, oh * ow))
            .expect("grad reshape")
            .to_owned();
        dw_mat = dw_mat + g.dot(&cols.t());
        if let Some(db) = db.as_mut() {
            *db += &g.sum_axis(Axis(1));
        }
        let dcols = w_mat.t().dot(&g);
        dx.index_axis_mut(Axis(0), ni)
            .assign(&col2im(dcols.view(), cin, h, wd, kh, kw, stride, pad));
    }
    let dw = dw_mat
        .into_shape_with_order((cout, cin, kh, kw))
        .expect("dw reshape");
    ConvGrads { dx, dw, db }
}

pub fn max_pool_forward<T: Scalar>(
    x: ArrayView4<T>,
    k: usize,
    stride: usize,
    pad: usize,
) -> (Array4<T>, Vec<u32>) {
    let (n, c, h, w) = x.dim();
    let oh = conv_out_len(h, k, stride, pad);
    let ow = conv_out_len(w, k, stride, pad);
    let mut out = Array4::<T>::zeros((n, c, oh, ow));
    let mut argmax = vec![0u32; n * c * oh * ow];
    let mut idx = 0usize;
    for ni in 0..n {
        for ci in 0..c {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut best = T::neg_infinity();
                    let mut best_pos = 0u32;
                    for ky in 0..k {
                        let y = (oy * stride + ky) as isize - pad as isize;
                        if y < 0 || y >= h as isize {
                            continue;
                        }
                        for kx in 0..k {
                            let xx = (ox * stride + kx) as isize - pad as isize;
                            if xx < 0 || xx >= w as isize {
                                continue;
                            }
                            let v = x[[ni, ci, y as usize, xx as usize]];
                            if v > best {
                                best = v;
                                best_pos = (y as usize * w + xx as usize) as u32;
                            }
                        }
                    }
                    out[[ni, ci, oy, ox]] = best;
                    argmax[idx] = best_pos;
                    idx += 1;
                }
            }
        }
    }
    (out, argmax)
}

pub fn max_pool_backward<T: Scalar>(
    grad_out: ArrayView4<T>,
    argmax: &[u32],
    h: usize,
    w: usize,
) -> Array4<T> {
    let (n, c, oh, ow) = grad_out.dim();
    let mut dx = Array4::<T>::zeros((n, c, h, w));
    let mut idx = 0usize;
    for ni in 0..n {
        for ci in 0..c {
            for oy in 0..oh {
                for ox in 0..ow {
                    let pos = argmax[idx] as usize;
                    dx[[ni, ci, pos / w, pos % w]] += grad_out[[ni, ci, oy, ox]];
                    idx += 1;
                }
            }
        }
    }
    dx
}

pub fn bilinear_up_forward<T: Scalar>(x: ArrayView4<T>, oh: usize, ow: usize) -> Array4<T> {
    let (n, c, h, w) = x.dim();
    let ty = bilinear_taps(h, oh);
    let tx = bilinear_taps(w, ow);
    let mut out = Array4::<T>::zeros((n, c, oh, ow));
    for ni in 0..n {
        for ci in 0..c {
            let plane = x.index_axis(Axis(0), ni);
            let plane = plane.index_axis(Axis(0), ci);
            for (oy, ry) in ty.iter().enumerate() {
                for (ox, rx) in tx.iter().enumerate() {
                    let top = plane[[ry.i0, rx.i0]].as_f64() * rx.w0()
                        + plane[[ry.i0, rx.i1]].as_f64() * rx.w1;
                    let bot = plane[[ry.i1, rx.i0]].as_f64() * rx.w0()
                        + plane[[ry.i1, rx.i1]].as_f64() * rx.w1;
                    out[[ni, ci, oy, ox]] = T::cast(top * ry.w0() + bot * ry.w1);
                }
            }
        }
    }
    out
}

pub fn bilinear_up_backward<T: Scalar>(grad_out: ArrayView4<T>, h: usize, w: usize) -> Array4<T> {
    let (n, c, oh, ow) = grad_out.dim();
    let ty = bilinear_taps(h, oh);
    let tx = bilinear_taps(w, ow);
    let mut dx = Array4::<T>::zeros((n, c, h, w));
    let scatter = |dx: &mut Array4<T>, ni: usize, ci: usize, ry: &Tap, rx: &Tap, g: f64| {
        dx[[ni, ci, ry.i0, rx.i0]] += T::cast(g * ry.w0() * rx.w0());
        dx[[ni, ci, ry.i0, rx.i1]] += T::cast(g * ry.w0() * rx.w1);
        dx[[ni, ci, ry.i1, rx.i0]] += T::cast(g * ry.w1 * rx.w0());
        dx[[ni, ci, ry.i1, rx.i1]] += T::cast(g * ry.w1 * rx.w1);
    };
    for ni in 0..n {
        for ci in 0..c {
            for (oy, ry) in ty.iter().enumerate() {
                for (ox, rx) in tx.iter().enumerate() {
                    scatter(&mut dx, ni, ci, ry, rx, grad_out[[ni, ci, oy, ox]].as_f64());
                }
            }
        }
    }
    dx
}

/// Window bounds used by adaptive average pooling.
#[inline]
pub fn adaptive_window(i: usize, in_len: usize, out_len: usize) -> (usize, usize) {
    let start = i * in_len / out_len;
    let end = ((i + 1) * in_len).div_ceil(out_len);
    (start, end)
}

pub fn adaptive_avg_pool_forward<T: Scalar>(x: ArrayView4<T>, oh: usize, ow: usize) -> Array4<T> {
    let (n, c, h, w) = x.dim();
    let mut out = Array4::<T>::zeros((n, c, oh, ow));
    for ni in 0..n {
        for ci in 0..c {
            for oy in 0..oh {
                let (ys, ye) = adaptive_window(oy, h, oh);
                for ox in 0..ow {
                    let (xs, xe) = adaptive_window(ox, w, ow);
                    let mut acc = T::zero();
                    for y in ys..ye {
                        for xx in xs..xe {
                            acc += x[[ni, ci, y, xx]];
                        }
                    }
                    let area = T::cast_usize((ye - ys) * (xe - xs));
                    out[[ni, ci, oy, ox]] = acc / area;
                }
            }
        }
    }
    out
}

pub fn adaptive_avg_pool_backward<T: Scalar>(
    grad_out: ArrayView4<T>,
    h: usize,
    w: usize,
) -> Array4<T> {
    let (n, c, oh, ow) = grad_out.dim();
    let mut dx = Array4::<T>::zeros((n, c, h, w));
    for ni in 0..n {
        for ci in 0..c {
            for oy in 0..oh {
                let (ys, ye) = adaptive_window(oy, h, oh);
                for ox in 0..ow {
                    let (xs, xe) = adaptive_window(ox, w, ow);
                    let area = T::cast_usize((ye - ys) * (xe - xs));
                    let g = grad_out[[ni, ci, oy, ox]] / area;
                    for y in ys..ye {
                        for xx in xs..xe {
                            dx[[ni, ci, y, xx]] += g;
                        }
                    }
                }
            }
        }
    }
    dx
}
