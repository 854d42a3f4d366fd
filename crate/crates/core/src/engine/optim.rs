//! Stochastic gradient descent with momentum, weight decay and global-norm
//! gradient clipping.

use std::collections::HashMap;

use ndarray::ArrayD;

use crate::params::{Param, ParamStore};
use crate::scalar::Scalar;

pub struct Sgd<T: Scalar> {
    pub lr: T,
    pub momentum: T,
    pub weight_decay: T,
    pub clip_norm: T,
    velocity: HashMap<Param, ArrayD<T>>,
}

impl<T: Scalar> Sgd<T> {
    pub fn new(lr: T, momentum: T, weight_decay: T, clip_norm: T) -> Self {
        Self { lr, momentum, weight_decay, clip_norm, velocity: HashMap::new() }
    }

    /// One update: clip the concatenated gradient to `clip_norm`, fold in
    /// weight decay, advance the velocity and step the parameters.
    pub fn step(&mut self, ps: &mut ParamStore<T>, grads: &[(Param, ArrayD<T>)]) {
        let norm_sq: T = grads
            .iter()
            .map(|(_, g)| g.iter().map(|&v| v * v).sum::<T>())
            .sum();
        let norm = norm_sq.sqrt();
        let scale = if norm > self.clip_norm && norm > T::zero() {
            self.clip_norm / norm
        } else {
            T::one()
        };
        for (p, grad) in grads {
            let theta = ps.value(*p).to_owned();
            let v = self
                .velocity
                .entry(*p)
                .or_insert_with(|| ArrayD::zeros(grad.raw_dim()));
            ndarray::Zip::from(&mut *v)
                .and(grad)
                .and(&theta)
                .for_each(|vel, &g, &t| {
                    *vel = self.momentum * *vel + (g * scale + self.weight_decay * t);
                });
            let mut updated = theta;
            ndarray::Zip::from(&mut updated)
                .and(&*v)
                .for_each(|t, &vel| *t -= self.lr * vel);
            ps.set_value(*p, updated);
        }
    }

    /// Momentum buffers keyed by parameter name (checkpoint payload).
    pub fn export_state(&self, ps: &ParamStore<T>) -> Vec<(String, ArrayD<T>)> {
        let mut out: Vec<(String, ArrayD<T>)> = self
            .velocity
            .iter()
            .map(|(p, v)| (ps.name(*p).to_string(), v.clone()))
            .collect();
        out.sort_by(|a, b| a.0.cmp(&b.0));
        out
    }

    pub fn import_state(&mut self, ps: &ParamStore<T>, state: Vec<(String, ArrayD<T>)>) {
        self.velocity.clear();
        for (name, v) in state {
            if let Some(p) = ps.lookup(&name) {
                self.velocity.insert(p, v);
            }
        }
    }
}
