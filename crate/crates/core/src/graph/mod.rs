//! Reverse-mode tape over dense tensors.
//!
//! A [`Graph`] records one forward pass; [`Graph::backward`] replays the tape
//! in reverse and accumulates gradients for every node that requires them.
//! Parameters stay in a [`ParamStore`] and enter the graph as reference-counted
//! leaves, so rebuilding the tape each step is cheap.

pub mod ndops;

use ndarray::{concatenate, Array1, Array2, Array4, ArrayD, Axis, Ix2, Ix4, IxDyn};

use crate::params::{Param, ParamStore, SharedTensor};
use crate::scalar::Scalar;

/// Handle to one node in the tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

struct ContrastiveCell<T> {
    cos: T,
    u: T,
    norm_f: T,
    norm_b: T,
    active: bool,
}

enum BackOp<T: Scalar> {
    Add { a: Var, b: Var },
    Sub { a: Var, b: Var },
    Mul { a: Var, b: Var },
    Div { a: Var, b: Var },
    Affine { x: Var, scale: T },
    MulConst { x: Var, k: ArrayD<T> },
    Clamp { x: Var, lo: T, hi: T },
    Ln { x: Var },
    Relu { x: Var },
    Sigmoid { x: Var },
    Reshape { x: Var },
    ConcatC { parts: Vec<Var> },
    MeanC { x: Var },
    MeanAll { x: Var },
    SumAll { x: Var },
    Conv2d { x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize },
    ChannelAffine { x: Var, scale: Array1<T> },
    BatchNorm { x: Var, gamma: Var, beta: Var, xhat: Array4<T>, inv_std: Array1<T> },
    MaxPool { x: Var, argmax: Vec<u32>, h: usize, w: usize },
    BilinearUp { x: Var, h: usize, w: usize },
    AdaptiveAvgPool { x: Var, h: usize, w: usize },
    Linear { x: Var, w: Var, b: Var },
    MaskedMeanHw { x: Var, eff_weights: Array4<T> },
    Contrastive { vf: Var, vb: Var, cells: Vec<ContrastiveCell<T>> },
}

struct Node<T: Scalar> {
    value: SharedTensor<T>,
    requires_grad: bool,
    backward: Option<BackOp<T>>,
}

/// Output of [`Graph::batch_norm_train`]; batch statistics are surfaced so the
/// layer can maintain running estimates.
pub struct BnForward<T: Scalar> {
    pub y: Var,
    pub batch_mean: Array1<T>,
    pub batch_var_unbiased: Array1<T>,
}

pub struct Graph<T: Scalar> {
    nodes: Vec<Node<T>>,
    grad_enabled: bool,
    params_used: Vec<(Var, Param)>,
    macs: u64,
}

/// Gradients produced by one backward pass.
pub struct Gradients<T: Scalar> {
    grads: Vec<Option<ArrayD<T>>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&ArrayD<T>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Graph<T> {
    /// Tape with gradient recording enabled.
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            grad_enabled: true,
            params_used: Vec::new(),
            macs: 0,
        }
    }

    /// Forward-only tape: no backward metadata is kept.
    pub fn inference() -> Self {
        Self {
            nodes: Vec::new(),
            grad_enabled: false,
            params_used: Vec::new(),
            macs: 0,
        }
    }

    fn push(&mut self, value: SharedTensor<T>, requires_grad: bool, op: Option<BackOp<T>>) -> Var {
        let requires = requires_grad && self.grad_enabled;
        self.nodes.push(Node {
            value,
            requires_grad: requires,
            backward: if requires { op } else { None },
        });
        Var(self.nodes.len() - 1)
    }

    fn push_op(&mut self, value: ArrayD<T>, parents: &[Var], op: BackOp<T>) -> Var {
        let requires = parents.iter().any(|p| self.nodes[p.0].requires_grad);
        self.push(value.into_shared(), requires, Some(op))
    }

    /// Constant leaf (never receives gradients).
    pub fn constant(&mut self, value: ArrayD<T>) -> Var {
        self.push(value.into_shared(), false, None)
    }

    /// Leaf that accumulates gradients when `requires_grad` is set.
    pub fn leaf(&mut self, value: ArrayD<T>, requires_grad: bool) -> Var {
        self.push(value.into_shared(), requires_grad, None)
    }

    /// Leaf sourced from the parameter store (cheap: shares the buffer).
    pub fn param(&mut self, ps: &ParamStore<T>, p: Param) -> Var {
        let requires = ps.is_learnable(p);
        let v = self.push(ps.value(p).clone(), requires, None);
        if requires && self.grad_enabled {
            self.params_used.push((v, p));
        }
        v
    }

    /// `(Var, Param)` pairs for every learnable leaf created via [`Graph::param`].
    pub fn params_used(&self) -> &[(Var, Param)] {
        &self.params_used
    }

    /// Collects per-parameter gradients in first-use order, accumulating
    /// duplicates (the order is deterministic, keeping optimizer updates
    /// bitwise reproducible).
    pub fn param_grads(&self, grads: &Gradients<T>) -> Vec<(Param, ArrayD<T>)> {
        let mut out: Vec<(Param, ArrayD<T>)> = Vec::new();
        let mut index: std::collections::HashMap<Param, usize> = std::collections::HashMap::new();
        for &(v, p) in &self.params_used {
            if let Some(g) = grads.get(v) {
                match index.get(&p) {
                    Some(&i) => {
                        out[i].1.zip_mut_with(g, |a, &b| *a += b);
                    }
                    None => {
                        index.insert(p, out.len());
                        out.push((p, g.clone()));
                    }
                }
            }
        }
        out
    }

    pub fn value(&self, v: Var) -> &SharedTensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// Extracts a 0-d node as a scalar.
    pub fn scalar_value(&self, v: Var) -> T {
        let val = &self.nodes[v.0].value;
        assert_eq!(val.len(), 1, "scalar_value on non-scalar node");
        *val.iter().next().unwrap()
    }

    fn binary_same_shape(&mut self, a: Var, b: Var, op: &str) {
        assert_eq!(
            self.shape(a),
            self.shape(b),
            "{op}: operand shapes differ"
        );
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        self.binary_same_shape(a, b, "add");
        let v = self.nodes[a.0].value.to_owned() + &self.nodes[b.0].value;
        self.push_op(v, &[a, b], BackOp::Add { a, b })
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        self.binary_same_shape(a, b, "sub");
        let v = self.nodes[a.0].value.to_owned() - &self.nodes[b.0].value;
        self.push_op(v, &[a, b], BackOp::Sub { a, b })
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        self.binary_same_shape(a, b, "mul");
        let v = self.nodes[a.0].value.to_owned() * &self.nodes[b.0].value;
        self.push_op(v, &[a, b], BackOp::Mul { a, b })
    }

    pub fn div(&mut self, a: Var, b: Var) -> Var {
        self.binary_same_shape(a, b, "div");
        let v = self.nodes[a.0].value.to_owned() / &self.nodes[b.0].value;
        self.push_op(v, &[a, b], BackOp::Div { a, b })
    }

    /// `scale * x + shift`, elementwise.
    pub fn affine(&mut self, x: Var, scale: T, shift: T) -> Var {
        let v = self.nodes[x.0].value.mapv(|e| scale * e + shift);
        self.push_op(v, &[x], BackOp::Affine { x, scale })
    }

    /// Elementwise multiply by a constant array of identical shape.
    pub fn mul_const(&mut self, x: Var, k: ArrayD<T>) -> Var {
        assert_eq!(self.shape(x), k.shape(), "mul_const shape mismatch");
        let v = self.nodes[x.0].value.to_owned() * &k;
        self.push_op(v, &[x], BackOp::MulConst { x, k })
    }

    pub fn clamp(&mut self, x: Var, lo: T, hi: T) -> Var {
        let v = self.nodes[x.0].value.mapv(|e| e.max(lo).min(hi));
        self.push_op(v, &[x], BackOp::Clamp { x, lo, hi })
    }

    pub fn ln(&mut self, x: Var) -> Var {
        let v = self.nodes[x.0].value.mapv(|e| e.ln());
        self.push_op(v, &[x], BackOp::Ln { x })
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let v = self.nodes[x.0].value.mapv(|e| e.max(T::zero()));
        self.push_op(v, &[x], BackOp::Relu { x })
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let one = T::one();
        let v = self.nodes[x.0].value.mapv(|e| one / (one + (-e).exp()));
        self.push_op(v, &[x], BackOp::Sigmoid { x })
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Var {
        let v = self.nodes[x.0]
            .value
            .to_owned()
            .into_shape_with_order(IxDyn(shape))
            .expect("reshape: incompatible element count");
        self.push_op(v, &[x], BackOp::Reshape { x })
    }

    /// Concatenation along the channel axis of NCHW tensors.
    pub fn concat_channels(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty(), "concat_channels: no inputs");
        let views: Vec<_> = parts.iter().map(|p| self.nodes[p.0].value.view()).collect();
        let v = concatenate(Axis(1), &views).expect("concat_channels: shape mismatch");
        self.push_op(v, parts, BackOp::ConcatC { parts: parts.to_vec() })
    }

    /// Mean over the channel axis: (N,C,H,W) -> (N,1,H,W).
    pub fn mean_channels(&mut self, x: Var) -> Var {
        let xv = self.view4(x);
        let m = xv.mean_axis(Axis(1)).unwrap().insert_axis(Axis(1));
        self.push_op(m.into_dyn(), &[x], BackOp::MeanC { x })
    }

    pub fn mean_all(&mut self, x: Var) -> Var {
        let n = self.nodes[x.0].value.len();
        let s: T = self.nodes[x.0].value.iter().copied().sum();
        let v = ArrayD::from_elem(IxDyn(&[]), s / T::cast_usize(n));
        self.push_op(v, &[x], BackOp::MeanAll { x })
    }

    pub fn sum_all(&mut self, x: Var) -> Var {
        let s: T = self.nodes[x.0].value.iter().copied().sum();
        let v = ArrayD::from_elem(IxDyn(&[]), s);
        self.push_op(v, &[x], BackOp::SumAll { x })
    }

    fn view4(&self, v: Var) -> ndarray::ArrayView4<'_, T> {
        self.nodes[v.0]
            .value
            .view()
            .into_dimensionality::<Ix4>()
            .expect("expected a 4-d (N,C,H,W) tensor")
    }

    fn view2(&self, v: Var) -> ndarray::ArrayView2<'_, T> {
        self.nodes[v.0]
            .value
            .view()
            .into_dimensionality::<Ix2>()
            .expect("expected a 2-d tensor")
    }

    /// Multiply-accumulates recorded by convolution and linear ops.
    pub fn macs(&self) -> u64 {
        self.macs
    }

    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize) -> Var {
        let bias = b.map(|bv| {
            self.nodes[bv.0]
                .value
                .view()
                .into_dimensionality::<ndarray::Ix1>()
                .expect("conv bias must be 1-d")
                .to_owned()
        });
        let y = ndops::conv2d_forward(self.view4(x), self.view4(w), bias.as_ref(), stride, pad);
        let (n, cout, oh, ow) = y.dim();
        let ws = self.shape(w);
        self.macs += (n * cout * oh * ow * ws[1] * ws[2] * ws[3]) as u64;
        let mut parents = vec![x, w];
        if let Some(bv) = b {
            parents.push(bv);
        }
        self.push_op(y.into_dyn(), &parents, BackOp::Conv2d { x, w, b, stride, pad })
    }

    /// Per-channel `scale * x + shift` with constant coefficients
    /// (batch-norm inference path).
    pub fn channel_affine(&mut self, x: Var, scale: Array1<T>, shift: Array1<T>) -> Var {
        let xv = self.view4(x);
        let (n, c, h, w) = xv.dim();
        assert_eq!(scale.len(), c, "channel_affine scale length");
        let mut y = Array4::<T>::zeros((n, c, h, w));
        for ci in 0..c {
            let (s, t) = (scale[ci], shift[ci]);
            y.slice_mut(ndarray::s![.., ci, .., ..])
                .assign(&xv.slice(ndarray::s![.., ci, .., ..]).mapv(|e| s * e + t));
        }
        self.push_op(y.into_dyn(), &[x], BackOp::ChannelAffine { x, scale })
    }

    /// Batch normalization over (N,H,W) per channel with batch statistics.
    pub fn batch_norm_train(&mut self, x: Var, gamma: Var, beta: Var, eps: T) -> BnForward<T> {
        let xv = self.view4(x);
        let (n, c, h, w) = xv.dim();
        let m = T::cast_usize(n * h * w);
        let mut mean = Array1::<T>::zeros(c);
        let mut var = Array1::<T>::zeros(c);
        for ci in 0..c {
            let slice = xv.slice(ndarray::s![.., ci, .., ..]);
            let mu: T = slice.iter().copied().sum::<T>() / m;
            let v: T = slice.iter().map(|&e| (e - mu) * (e - mu)).sum::<T>() / m;
            mean[ci] = mu;
            var[ci] = v;
        }
        let inv_std = var.mapv(|v| T::one() / (v + eps).sqrt());
        let mut xhat = Array4::<T>::zeros((n, c, h, w));
        for ci in 0..c {
            let (mu, is) = (mean[ci], inv_std[ci]);
            xhat.slice_mut(ndarray::s![.., ci, .., ..])
                .assign(&xv.slice(ndarray::s![.., ci, .., ..]).mapv(|e| (e - mu) * is));
        }
        let gv = self.nodes[gamma.0].value.clone();
        let bv = self.nodes[beta.0].value.clone();
        let mut y = xhat.clone();
        for ci in 0..c {
            let (g, b) = (gv[[ci]], bv[[ci]]);
            y.slice_mut(ndarray::s![.., ci, .., ..])
                .mapv_inplace(|e| g * e + b);
        }
        // Unbiased variance for running estimates.
        let denom = T::cast_usize((n * h * w).saturating_sub(1).max(1));
        let var_unbiased = var.mapv(|v| v * m / denom);
        let yv = self.push_op(
            y.into_dyn(),
            &[x, gamma, beta],
            BackOp::BatchNorm { x, gamma, beta, xhat, inv_std },
        );
        BnForward {
            y: yv,
            batch_mean: mean,
            batch_var_unbiased: var_unbiased,
        }
    }

    pub fn max_pool2d(&mut self, x: Var, k: usize, stride: usize, pad: usize) -> Var {
        let xv = self.view4(x);
        let (_, _, h, w) = xv.dim();
        let (y, argmax) = ndops::max_pool_forward(xv, k, stride, pad);
        self.push_op(y.into_dyn(), &[x], BackOp::MaxPool { x, argmax, h, w })
    }

    /// Bilinear resampling (half-pixel convention) to (out_h, out_w).
    pub fn upsample_bilinear(&mut self, x: Var, out_h: usize, out_w: usize) -> Var {
        let xv = self.view4(x);
        let (_, _, h, w) = xv.dim();
        let y = ndops::bilinear_up_forward(xv, out_h, out_w);
        self.push_op(y.into_dyn(), &[x], BackOp::BilinearUp { x, h, w })
    }

    pub fn adaptive_avg_pool(&mut self, x: Var, out_h: usize, out_w: usize) -> Var {
        let xv = self.view4(x);
        let (_, _, h, w) = xv.dim();
        let y = ndops::adaptive_avg_pool_forward(xv, out_h, out_w);
        self.push_op(y.into_dyn(), &[x], BackOp::AdaptiveAvgPool { x, h, w })
    }

    /// Fully-connected layer: x (N,in) x w (out,in) + b (out) -> (N,out).
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Var {
        let xv = self.view2(x);
        let wv = self.view2(w);
        assert_eq!(xv.ncols(), wv.ncols(), "linear: in-features mismatch");
        let mac_add = (xv.nrows() * wv.nrows() * wv.ncols()) as u64;
        let bv = self.nodes[b.0].value.clone();
        let mut y = xv.dot(&wv.t());
        for mut row in y.rows_mut() {
            for (e, &bb) in row.iter_mut().zip(bv.iter()) {
                *e += bb;
            }
        }
        self.macs += mac_add;
        self.push_op(y.into_dyn(), &[x, w, b], BackOp::Linear { x, w, b })
    }

    /// Weighted spatial mean per channel: x (N,C,h,w) with weights (N,1,h,w)
    /// -> (N,C). Weight mass below `eps` falls back to the unweighted mean;
    /// the number of such degenerate samples is returned alongside.
    pub fn masked_mean_hw(&mut self, x: Var, weights: &Array4<T>, eps: T) -> (Var, usize) {
        let xv = self.view4(x);
        let (n, c, h, w) = xv.dim();
        assert_eq!(weights.dim(), (n, 1, h, w), "masked_mean_hw weight shape");
        let mut eff = Array4::<T>::zeros((n, 1, h, w));
        let mut degenerate = 0usize;
        for ni in 0..n {
            let wsum: T = weights.slice(ndarray::s![ni, 0, .., ..]).iter().copied().sum();
            if wsum < eps {
                degenerate += 1;
                let u = T::one() / T::cast_usize(h * w);
                eff.slice_mut(ndarray::s![ni, 0, .., ..]).fill(u);
            } else {
                let inv = T::one() / wsum;
                eff.slice_mut(ndarray::s![ni, 0, .., ..])
                    .assign(&weights.slice(ndarray::s![ni, 0, .., ..]).mapv(|e| e * inv));
            }
        }
        let mut out = Array2::<T>::zeros((n, c));
        for ni in 0..n {
            for ci in 0..c {
                let mut acc = T::zero();
                for y in 0..h {
                    for xx in 0..w {
                        acc += xv[[ni, ci, y, xx]] * eff[[ni, 0, y, xx]];
                    }
                }
                out[[ni, ci]] = acc;
            }
        }
        let v = self.push_op(out.into_dyn(), &[x], BackOp::MaskedMeanHw { x, eff_weights: eff });
        (v, degenerate)
    }

    /// Batch-mean contrastive penalty `-(1/n) sum_i ln(clamp(1 - cos(vb_i, vf_i), eps, 2))`
    /// between row-aligned (N,D) foreground/background embeddings.
    pub fn contrastive(&mut self, vf: Var, vb: Var, clamp_eps: T) -> Var {
        let f = self.view2(vf);
        let b = self.view2(vb);
        assert_eq!(f.dim(), b.dim(), "contrastive: embedding shapes differ");
        let n = f.nrows();
        assert!(n >= 1, "contrastive: empty batch");
        let tiny = T::cast(1e-30);
        let two = T::cast(2.0);
        let mut cells = Vec::with_capacity(n);
        let mut acc = T::zero();
        for i in 0..n {
            let fi = f.row(i);
            let bi = b.row(i);
            let dot: T = fi.iter().zip(bi.iter()).map(|(&a, &c)| a * c).sum();
            let nf = fi.iter().map(|&a| a * a).sum::<T>().sqrt();
            let nb = bi.iter().map(|&a| a * a).sum::<T>().sqrt();
            let (cos, active) = if nf < tiny || nb < tiny {
                (T::zero(), false)
            } else {
                (dot / (nf * nb), true)
            };
            let raw = T::one() - cos;
            let u = raw.max(clamp_eps).min(two);
            // Gradient flows only where the lower clamp is inactive.
            let active = active && raw > clamp_eps;
            acc += -u.ln();
            cells.push(ContrastiveCell { cos, u, norm_f: nf, norm_b: nb, active });
        }
        let v = ArrayD::from_elem(IxDyn(&[]), acc / T::cast_usize(n));
        self.push_op(v, &[vf, vb], BackOp::Contrastive { vf, vb, cells })
    }

    /// Reverse pass from `out` (typically a 0-d loss node).
    pub fn backward(&self, out: Var) -> Gradients<T> {
        let mut grads: Vec<Option<ArrayD<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[out.0] = Some(ArrayD::ones(self.nodes[out.0].value.raw_dim()));
        for i in (0..=out.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            if let Some(op) = &self.nodes[i].backward {
                self.apply_backward(i, op, &g, &mut grads);
            }
            grads[i] = Some(g);
        }
        Gradients { grads }
    }

    fn accum(&self, grads: &mut [Option<ArrayD<T>>], v: Var, delta: ArrayD<T>) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        match &mut grads[v.0] {
            Some(g) => *g += &delta,
            slot @ None => *slot = Some(delta),
        }
    }

    fn apply_backward(
        &self,
        node: usize,
        op: &BackOp<T>,
        g: &ArrayD<T>,
        grads: &mut [Option<ArrayD<T>>],
    ) {
        match op {
            BackOp::Add { a, b } => {
                self.accum(grads, *a, g.clone());
                self.accum(grads, *b, g.clone());
            }
            BackOp::Sub { a, b } => {
                self.accum(grads, *a, g.clone());
                self.accum(grads, *b, g.mapv(|e| -e));
            }
            BackOp::Mul { a, b } => {
                self.accum(grads, *a, g * &self.nodes[b.0].value);
                self.accum(grads, *b, g * &self.nodes[a.0].value);
            }
            BackOp::Div { a, b } => {
                let bv = &self.nodes[b.0].value;
                self.accum(grads, *a, g / bv);
                let av = &self.nodes[a.0].value;
                let d = g * av;
                let d = d / bv;
                let d = d / bv;
                self.accum(grads, *b, d.mapv(|e| -e));
            }
            BackOp::Affine { x, scale } => {
                self.accum(grads, *x, g.mapv(|e| e * *scale));
            }
            BackOp::MulConst { x, k } => {
                self.accum(grads, *x, g * k);
            }
            BackOp::Clamp { x, lo, hi } => {
                let xv = &self.nodes[x.0].value;
                let mut d = g.clone();
                ndarray::Zip::from(&mut d).and(xv).for_each(|e, &xe| {
                    if xe <= *lo || xe >= *hi {
                        *e = T::zero();
                    }
                });
                self.accum(grads, *x, d);
            }
            BackOp::Ln { x } => {
                self.accum(grads, *x, g / &self.nodes[x.0].value);
            }
            BackOp::Relu { x } => {
                let xv = &self.nodes[x.0].value;
                let mut d = g.clone();
                ndarray::Zip::from(&mut d).and(xv).for_each(|e, &xe| {
                    if xe <= T::zero() {
                        *e = T::zero();
                    }
                });
                self.accum(grads, *x, d);
            }
            BackOp::Sigmoid { x } => {
                let y = &self.nodes[node].value;
                let mut d = g.clone();
                ndarray::Zip::from(&mut d).and(y).for_each(|e, &ye| {
                    *e = *e * ye * (T::one() - ye);
                });
                self.accum(grads, *x, d);
            }
            BackOp::Reshape { x } => {
                let shape = self.nodes[x.0].value.raw_dim();
                let d = g.to_owned().into_shape_with_order(shape).expect("reshape grad");
                self.accum(grads, *x, d);
            }
            BackOp::ConcatC { parts } => {
                let mut offset = 0usize;
                for p in parts {
                    let c = self.nodes[p.0].value.shape()[1];
                    let d = g
                        .slice_axis(Axis(1), ndarray::Slice::from(offset..offset + c))
                        .to_owned();
                    self.accum(grads, *p, d);
                    offset += c;
                }
            }
            BackOp::MeanC { x } => {
                let xs = self.nodes[x.0].value.shape().to_vec();
                let c = xs[1];
                let inv = T::one() / T::cast_usize(c);
                let g4 = g.view().into_dimensionality::<Ix4>().unwrap();
                let mut d = Array4::<T>::zeros((xs[0], xs[1], xs[2], xs[3]));
                for ci in 0..c {
                    d.slice_mut(ndarray::s![.., ci, .., ..])
                        .assign(&g4.index_axis(Axis(1), 0).mapv(|e| e * inv));
                }
                self.accum(grads, *x, d.into_dyn());
            }
            BackOp::MeanAll { x } => {
                let n = self.nodes[x.0].value.len();
                let gv = *g.iter().next().unwrap() / T::cast_usize(n);
                let d = ArrayD::from_elem(self.nodes[x.0].value.raw_dim(), gv);
                self.accum(grads, *x, d);
            }
            BackOp::SumAll { x } => {
                let gv = *g.iter().next().unwrap();
                let d = ArrayD::from_elem(self.nodes[x.0].value.raw_dim(), gv);
                self.accum(grads, *x, d);
            }
            BackOp::Conv2d { x, w, b, stride, pad } => {
                let needs_x = self.nodes[x.0].requires_grad;
                let needs_w = self.nodes[w.0].requires_grad
                    || b.map(|bv| self.nodes[bv.0].requires_grad).unwrap_or(false);
                let gview = g.view().into_dimensionality::<Ix4>().unwrap();
                let out = ndops::conv2d_backward(
                    self.view4(*x),
                    self.view4(*w),
                    b.is_some(),
                    *stride,
                    *pad,
                    gview,
                );
                if needs_x {
                    self.accum(grads, *x, out.dx.into_dyn());
                }
                if needs_w {
                    self.accum(grads, *w, out.dw.into_dyn());
                    if let (Some(bv), Some(db)) = (b, out.db) {
                        self.accum(grads, *bv, db.into_dyn());
                    }
                }
            }
            BackOp::ChannelAffine { x, scale } => {
                let g4 = g.view().into_dimensionality::<Ix4>().unwrap();
                let mut d = g4.to_owned();
                for (ci, &s) in scale.iter().enumerate() {
                    d.slice_mut(ndarray::s![.., ci, .., ..]).mapv_inplace(|e| e * s);
                }
                self.accum(grads, *x, d.into_dyn());
            }
            BackOp::BatchNorm { x, gamma, beta, xhat, inv_std } => {
                let g4 = g.view().into_dimensionality::<Ix4>().unwrap();
                let (n, c, h, w) = xhat.dim();
                let m = T::cast_usize(n * h * w);
                let gv = &self.nodes[gamma.0].value;
                let mut dgamma = Array1::<T>::zeros(c);
                let mut dbeta = Array1::<T>::zeros(c);
                for ci in 0..c {
                    let gs = g4.slice(ndarray::s![.., ci, .., ..]);
                    let xs = xhat.slice(ndarray::s![.., ci, .., ..]);
                    dgamma[ci] = gs.iter().zip(xs.iter()).map(|(&a, &b)| a * b).sum();
                    dbeta[ci] = gs.iter().copied().sum();
                }
                if self.nodes[x.0].requires_grad {
                    let mut dx = Array4::<T>::zeros((n, c, h, w));
                    for ci in 0..c {
                        let k = gv[[ci]] * inv_std[ci];
                        let mg = dbeta[ci] / m;
                        let mgx = dgamma[ci] / m;
                        let gs = g4.slice(ndarray::s![.., ci, .., ..]);
                        let xs = xhat.slice(ndarray::s![.., ci, .., ..]);
                        let mut ds = dx.slice_mut(ndarray::s![.., ci, .., ..]);
                        ndarray::Zip::from(&mut ds).and(&gs).and(&xs).for_each(
                            |d, &ge, &xe| {
                                *d = k * (ge - mg - xe * mgx);
                            },
                        );
                    }
                    self.accum(grads, *x, dx.into_dyn());
                }
                self.accum(grads, *gamma, dgamma.into_dyn());
                self.accum(grads, *beta, dbeta.into_dyn());
            }
            BackOp::MaxPool { x, argmax, h, w } => {
                let g4 = g.view().into_dimensionality::<Ix4>().unwrap();
                let dx = ndops::max_pool_backward(g4, argmax, *h, *w);
                self.accum(grads, *x, dx.into_dyn());
            }
            BackOp::BilinearUp { x, h, w } => {
                let g4 = g.view().into_dimensionality::<Ix4>().unwrap();
                let dx = ndops::bilinear_up_backward(g4, *h, *w);
                self.accum(grads, *x, dx.into_dyn());
            }
            BackOp::AdaptiveAvgPool { x, h, w } => {
                let g4 = g.view().into_dimensionality::<Ix4>().unwrap();
                let dx = ndops::adaptive_avg_pool_backward(g4, *h, *w);
                self.accum(grads, *x, dx.into_dyn());
            }
            BackOp::Linear { x, w, b } => {
                let g2 = g.view().into_dimensionality::<Ix2>().unwrap();
                let xv = self.view2(*x);
                let wv = self.view2(*w);
                if self.nodes[x.0].requires_grad {
                    self.accum(grads, *x, g2.dot(&wv).into_dyn());
                }
                if self.nodes[w.0].requires_grad {
                    self.accum(grads, *w, g2.t().dot(&xv).into_dyn());
                }
                if self.nodes[b.0].requires_grad {
                    self.accum(grads, *b, g2.sum_axis(Axis(0)).into_dyn());
                }
            }
            BackOp::MaskedMeanHw { x, eff_weights } => {
                let g2 = g.view().into_dimensionality::<Ix2>().unwrap();
                let (n, _one, h, w) = eff_weights.dim();
                let c = g2.ncols();
                let mut dx = Array4::<T>::zeros((n, c, h, w));
                for ni in 0..n {
                    for ci in 0..c {
                        let ge = g2[[ni, ci]];
                        let mut ds = dx.slice_mut(ndarray::s![ni, ci, .., ..]);
                        ndarray::Zip::from(&mut ds)
                            .and(&eff_weights.slice(ndarray::s![ni, 0, .., ..]))
                            .for_each(|d, &we| *d = ge * we);
                    }
                }
                self.accum(grads, *x, dx.into_dyn());
            }
            BackOp::Contrastive { vf, vb, cells } => {
                let go = *g.iter().next().unwrap();
                let f = self.view2(*vf);
                let b = self.view2(*vb);
                let n = f.nrows();
                let d = f.ncols();
                let inv_n = T::one() / T::cast_usize(n);
                let mut df = Array2::<T>::zeros((n, d));
                let mut db = Array2::<T>::zeros((n, d));
                for (i, cell) in cells.iter().enumerate() {
                    if !cell.active {
                        continue;
                    }
                    // d(-ln u)/d cos = 1/u with u = 1 - cos inside the clamp.
                    let k = go * inv_n / cell.u;
                    let denom = cell.norm_f * cell.norm_b;
                    for j in 0..d {
                        let (fj, bj) = (f[[i, j]], b[[i, j]]);
                        df[[i, j]] = k * (bj / denom - cell.cos * fj / (cell.norm_f * cell.norm_f));
                        db[[i, j]] = k * (fj / denom - cell.cos * bj / (cell.norm_b * cell.norm_b));
                    }
                }
                self.accum(grads, *vf, df.into_dyn());
                self.accum(grads, *vb, db.into_dyn());
            }
        }
    }
}
