//! Central finite-difference gradient checking against the tape's analytic
//! gradients. Runs at `f64`; the numerical side never touches the backward
//! pass, so it is an independent oracle for it.

use ndarray::ArrayD;

use crate::graph::{Graph, Var};

/// Builds a scalar-valued graph from leaf tensors.
pub trait BuildScalar: Fn(&mut Graph<f64>, &[Var]) -> Var {}
impl<F: Fn(&mut Graph<f64>, &[Var]) -> Var> BuildScalar for F {}

fn eval(build: &impl BuildScalar, inputs: &[ArrayD<f64>]) -> f64 {
    let mut g = Graph::inference();
    let vars: Vec<Var> = inputs.iter().map(|x| g.leaf(x.clone(), false)).collect();
    let out = build(&mut g, &vars);
    g.scalar_value(out)
}

/// Central-difference gradients of `build` w.r.t. every entry of every input.
pub fn numerical_grads(
    build: &impl BuildScalar,
    inputs: &[ArrayD<f64>],
    step: f64,
) -> Vec<ArrayD<f64>> {
    let mut out = Vec::with_capacity(inputs.len());
    for i in 0..inputs.len() {
        let mut grad = ArrayD::zeros(inputs[i].raw_dim());
        for j in 0..inputs[i].len() {
            let mut plus = inputs.to_vec();
            let mut minus = inputs.to_vec();
            plus[i].as_slice_mut().unwrap()[j] += step;
            minus[i].as_slice_mut().unwrap()[j] -= step;
            let fp = eval(build, &plus);
            let fm = eval(build, &minus);
            grad.as_slice_mut().unwrap()[j] = (fp - fm) / (2.0 * step);
        }
        out.push(grad);
    }
    out
}

/// Analytic gradients for the same leaves (zeros where no gradient flows).
pub fn analytic_grads(build: &impl BuildScalar, inputs: &[ArrayD<f64>]) -> Vec<ArrayD<f64>> {
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|x| g.leaf(x.clone(), true)).collect();
    let out = build(&mut g, &vars);
    let grads = g.backward(out);
    vars.iter()
        .zip(inputs)
        .map(|(&v, x)| {
            grads
                .get(v)
                .cloned()
                .unwrap_or_else(|| ArrayD::zeros(x.raw_dim()))
        })
        .collect()
}

/// Largest relative disagreement between analytic and central-difference
/// gradients; `floor` guards the denominator for near-zero entries.
pub fn max_relative_error(
    build: &impl BuildScalar,
    inputs: &[ArrayD<f64>],
    step: f64,
    floor: f64,
) -> f64 {
    let num = numerical_grads(build, inputs, step);
    let ana = analytic_grads(build, inputs);
    let mut worst = 0.0f64;
    for (a, n) in ana.iter().zip(num.iter()) {
        for (&av, &nv) in a.iter().zip(n.iter()) {
            let denom = av.abs().max(nv.abs()).max(floor);
            worst = worst.max((av - nv).abs() / denom);
        }
    }
    worst
}

/// Panics when the worst relative error exceeds `tol`.
pub fn assert_gradients_close(
    build: &impl BuildScalar,
    inputs: &[ArrayD<f64>],
    step: f64,
    tol: f64,
) {
    let err = max_relative_error(build, inputs, step, 1e-6);
    assert!(
        err < tol,
        "gradient check failed: max relative error {err:.3e} >= {tol:.1e}"
    );
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{ArrayD, IxDyn};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn randn(rng: &mut ChaCha8Rng, shape: &[usize]) -> ArrayD<f64> {
        ArrayD::from_shape_fn(IxDyn(shape), |_| rng.gen_range(-1.0..1.0))
    }

    #[test]
    fn elementwise_chain() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let a = randn(&mut rng, &[3, 4]);
        let b = randn(&mut rng, &[3, 4]).mapv(|v| v + 2.5); // keep divisor away from 0
        assert_gradients_close(
            &|g: &mut Graph<f64>, vars: &[Var]| {
                let s = g.sigmoid(vars[0]);
                let m = g.mul(s, vars[0]);
                let d = g.div(m, vars[1]);
                let r = g.relu(d);
                let aff = g.affine(r, 0.7, 0.1);
                g.mean_all(aff)
            },
            &[a, b],
            1e-5,
            1e-6,
        );
    }

    #[test]
    fn ln_clamp_chain() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = randn(&mut rng, &[8]).mapv(|v| 0.3 + 0.2 * v); // in (0.1, 0.5)
        assert_gradients_close(
            &|g: &mut Graph<f64>, vars: &[Var]| {
                let c = g.clamp(vars[0], 1e-7, 1.0 - 1e-7);
                let l = g.ln(c);
                g.sum_all(l)
            },
            &[x],
            1e-6,
            1e-6,
        );
    }

    #[test]
    fn conv_bn_pool_stack() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = randn(&mut rng, &[2, 3, 6, 6]);
        let w = randn(&mut rng, &[4, 3, 3, 3]).mapv(|v| v * 0.3);
        let b = randn(&mut rng, &[4]);
        let gamma = randn(&mut rng, &[4]).mapv(|v| 1.0 + 0.2 * v);
        let beta = randn(&mut rng, &[4]);
        assert_gradients_close(
            &|g: &mut Graph<f64>, vars: &[Var]| {
                let y = g.conv2d(vars[0], vars[1], Some(vars[2]), 2, 1);
                let bn = g.batch_norm_train(y, vars[3], vars[4], 1e-5);
                let r = g.relu(bn.y);
                let p = g.adaptive_avg_pool(r, 2, 2);
                g.mean_all(p)
            },
            &[x, w, b, gamma, beta],
            1e-5,
            1e-3,
        );
    }

    #[test]
    fn upsample_concat_linear() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x = randn(&mut rng, &[1, 2, 3, 3]);
        let y = randn(&mut rng, &[1, 2, 6, 6]);
        let w = randn(&mut rng, &[5, 4]);
        let b = randn(&mut rng, &[5]);
        assert_gradients_close(
            &|g: &mut Graph<f64>, vars: &[Var]| {
                let up = g.upsample_bilinear(vars[0], 6, 6);
                let cat = g.concat_channels(&[up, vars[1]]);
                let m = g.mean_channels(cat);
                let pooled = g.adaptive_avg_pool(m, 2, 2);
                let flat = g.reshape(pooled, &[1, 4]);
                let lin = g.linear(flat, vars[2], vars[3]);
                let s = g.sigmoid(lin);
                g.mean_all(s)
            },
            &[x, y, w, b],
            1e-5,
            1e-4,
        );
    }

    #[test]
    fn max_pool_grad() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = randn(&mut rng, &[1, 2, 5, 5]);
        assert_gradients_close(
            &|g: &mut Graph<f64>, vars: &[Var]| {
                let p = g.max_pool2d(vars[0], 3, 2, 1);
                g.sum_all(p)
            },
            &[x],
            1e-6,
            1e-5,
        );
    }

    #[test]
    fn masked_mean_grad() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let x = randn(&mut rng, &[2, 3, 4, 4]);
        let w = ndarray::Array4::from_shape_fn((2, 1, 4, 4), |_| rng.gen_range(0.0..1.0));
        assert_gradients_close(
            &|g: &mut Graph<f64>, vars: &[Var]| {
                let (m, _) = g.masked_mean_hw(vars[0], &w, 1e-6);
                let s = g.sigmoid(m);
                g.mean_all(s)
            },
            &[x],
            1e-6,
            1e-6,
        );
    }

    #[test]
    fn contrastive_grad_both_sides() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let vf = randn(&mut rng, &[3, 6]);
        let vb = randn(&mut rng, &[3, 6]);
        assert_gradients_close(
            &|g: &mut Graph<f64>, vars: &[Var]| g.contrastive(vars[0], vars[1], 1e-6),
            &[vf, vb],
            1e-6,
            1e-5,
        );
    }
}
