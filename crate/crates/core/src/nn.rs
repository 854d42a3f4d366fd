//! Layer building blocks: convolution, batch norm, linear, and the
//! conv + norm + activation block the decoder is assembled from.

use ndarray::{Array1, ArrayD, IxDyn};
use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::graph::{Graph, Var};
use crate::params::{Param, ParamStore};
use crate::scalar::Scalar;

/// Forward-pass mode: training passes may mutate buffers (batch-norm running
/// statistics), evaluation passes only read the store.
pub enum Pass<'a, T: Scalar> {
    Train(&'a mut ParamStore<T>),
    Eval(&'a ParamStore<T>),
}

impl<'a, T: Scalar> Pass<'a, T> {
    pub fn store(&self) -> &ParamStore<T> {
        match self {
            Pass::Train(ps) => ps,
            Pass::Eval(ps) => ps,
        }
    }

    pub fn is_train(&self) -> bool {
        matches!(self, Pass::Train(_))
    }

    fn set_buffer(&mut self, p: Param, value: ArrayD<T>) {
        if let Pass::Train(ps) = self {
            ps.set_value(p, value);
        }
    }
}

fn sample_normal<T: Scalar>(rng: &mut impl Rng, shape: &[usize], std: f64) -> ArrayD<T> {
    let dist = Normal::new(0.0, std).expect("valid std");
    ArrayD::from_shape_fn(IxDyn(shape), |_| T::cast(dist.sample(rng)))
}

/// 2-d convolution with optional bias.
pub struct Conv2d {
    pub w: Param,
    pub b: Option<Param>,
    pub stride: usize,
    pub pad: usize,
}

impl Conv2d {
    #[allow(clippy::too_many_arguments)]
    pub fn new<T: Scalar>(
        ps: &mut ParamStore<T>,
        rng: &mut impl Rng,
        name: &str,
        cin: usize,
        cout: usize,
        k: usize,
        stride: usize,
        pad: usize,
        bias: bool,
    ) -> Self {
        let fan_in = cin * k * k;
        let std = (2.0 / fan_in as f64).sqrt();
        let w = ps.add(
            format!("{name}.w"),
            sample_normal(rng, &[cout, cin, k, k], std),
            true,
        );
        let b = bias.then(|| ps.add(format!("{name}.b"), ArrayD::zeros(IxDyn(&[cout])), true));
        Self { w, b, stride, pad }
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, ps: &ParamStore<T>, x: Var) -> Var {
        let w = g.param(ps, self.w);
        let b = self.b.map(|b| g.param(ps, b));
        g.conv2d(x, w, b, self.stride, self.pad)
    }
}

/// Batch normalization with running statistics kept as store buffers.
pub struct BatchNorm2d {
    pub gamma: Param,
    pub beta: Param,
    pub running_mean: Param,
    pub running_var: Param,
    pub eps: f64,
    pub momentum: f64,
}

impl BatchNorm2d {
    pub fn new<T: Scalar>(ps: &mut ParamStore<T>, name: &str, c: usize) -> Self {
        Self {
            gamma: ps.add(format!("{name}.gamma"), ArrayD::ones(IxDyn(&[c])), true),
            beta: ps.add(format!("{name}.beta"), ArrayD::zeros(IxDyn(&[c])), true),
            running_mean: ps.add(format!("{name}.running_mean"), ArrayD::zeros(IxDyn(&[c])), false),
            running_var: ps.add(format!("{name}.running_var"), ArrayD::ones(IxDyn(&[c])), false),
            eps: 1e-5,
            momentum: 0.1,
        }
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, pass: &mut Pass<T>, x: Var) -> Var {
        let ps = pass.store();
        if pass.is_train() {
            let gamma = g.param(ps, self.gamma);
            let beta = g.param(ps, self.beta);
            let out = g.batch_norm_train(x, gamma, beta, T::cast(self.eps));
            let mom = T::cast(self.momentum);
            let keep = T::one() - mom;
            let new_mean = ps
                .value(self.running_mean)
                .iter()
                .zip(out.batch_mean.iter())
                .map(|(&r, &b)| keep * r + mom * b)
                .collect::<Vec<_>>();
            let new_var = ps
                .value(self.running_var)
                .iter()
                .zip(out.batch_var_unbiased.iter())
                .map(|(&r, &b)| keep * r + mom * b)
                .collect::<Vec<_>>();
            let c = new_mean.len();
            pass.set_buffer(self.running_mean, ArrayD::from_shape_vec(IxDyn(&[c]), new_mean).unwrap());
            pass.set_buffer(self.running_var, ArrayD::from_shape_vec(IxDyn(&[c]), new_var).unwrap());
            out.y
        } else {
            let mean = ps.value(self.running_mean);
            let var = ps.value(self.running_var);
            let gamma = ps.value(self.gamma);
            let beta = ps.value(self.beta);
            let eps = T::cast(self.eps);
            let c = mean.len();
            let mut scale = Array1::<T>::zeros(c);
            let mut shift = Array1::<T>::zeros(c);
            for ci in 0..c {
                let inv = T::one() / (var[[ci]] + eps).sqrt();
                scale[ci] = gamma[[ci]] * inv;
                shift[ci] = beta[[ci]] - gamma[[ci]] * mean[[ci]] * inv;
            }
            g.channel_affine(x, scale, shift)
        }
    }
}

/// Fully-connected layer.
pub struct Linear {
    pub w: Param,
    pub b: Param,
}

impl Linear {
    pub fn new<T: Scalar>(
        ps: &mut ParamStore<T>,
        rng: &mut impl Rng,
        name: &str,
        fan_in: usize,
        fan_out: usize,
    ) -> Self {
        let std = (1.0 / fan_in as f64).sqrt();
        Self {
            w: ps.add(format!("{name}.w"), sample_normal(rng, &[fan_out, fan_in], std), true),
            b: ps.add(format!("{name}.b"), ArrayD::zeros(IxDyn(&[fan_out])), true),
        }
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, ps: &ParamStore<T>, x: Var) -> Var {
        let w = g.param(ps, self.w);
        let b = g.param(ps, self.b);
        g.linear(x, w, b)
    }
}

/// Normalization choice inside a [`ConvBlock`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BlockNorm {
    Batch,
    None,
}

/// conv -> (batch norm) -> (ReLU), the decoder's workhorse.
pub struct ConvBlock {
    pub conv: Conv2d,
    pub bn: Option<BatchNorm2d>,
    pub relu: bool,
}

impl ConvBlock {
    #[allow(clippy::too_many_arguments)]
    pub fn new<T: Scalar>(
        ps: &mut ParamStore<T>,
        rng: &mut impl Rng,
        name: &str,
        cin: usize,
        cout: usize,
        k: usize,
        stride: usize,
        norm: BlockNorm,
        relu: bool,
    ) -> Self {
        let pad = k / 2;
        // Bias is redundant under batch norm.
        let bias = norm == BlockNorm::None;
        let conv = Conv2d::new(ps, rng, &format!("{name}.conv"), cin, cout, k, stride, pad, bias);
        let bn = (norm == BlockNorm::Batch).then(|| BatchNorm2d::new(ps, &format!("{name}.bn"), cout));
        Self { conv, bn, relu }
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, pass: &mut Pass<T>, x: Var) -> Var {
        let mut y = self.conv.forward(g, pass.store(), x);
        if let Some(bn) = &self.bn {
            y = bn.forward(g, pass, y);
        }
        if self.relu {
            y = g.relu(y);
        }
        y
    }
}
