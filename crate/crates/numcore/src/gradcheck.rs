//! Central finite-difference gradient checking in double precision.

use rand::rngs::StdRng;
use rand::{Rng, SeedableRng};

use crate::{Graph, Segments, Tensor, Var};

/// Worst disagreement found by [`check_gradients`].
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GradCheck {
    pub max_rel_err: f64,
    pub max_abs_err: f64,
    pub checked: usize,
}

/// Relative error with a floor on the denominator so that entries which are
/// both tiny compare absolutely.
pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

/// Compares `backward` against central differences with step `h` for every
/// entry of every input.
///
/// `f` builds a scalar from parameter leaves created from `inputs`, in order.
pub fn check_gradients<F>(inputs: &[Tensor<f64>], h: f64, floor: f64, f: F) -> GradCheck
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Var,
{
    let eval = |values: &[Tensor<f64>]| -> f64 {
        let mut g = Graph::new();
        let vars: Vec<Var> = values.iter().map(|t| g.constant(t.clone())).collect();
        let out = f(&mut g, &vars);
        g.value(out).item()
    };

    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.param(t.clone())).collect();
    let out = f(&mut g, &vars);
    let grads = g.backward(out).expect("scalar output");

    let mut work = inputs.to_vec();
    let mut result = GradCheck { max_rel_err: 0.0, max_abs_err: 0.0, checked: 0 };
    for (i, var) in vars.iter().enumerate() {
        let analytic = grads
            .get(*var)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(inputs[i].shape().to_vec()));
        for j in 0..inputs[i].len() {
            let orig = work[i].data()[j];
            work[i].data_mut()[j] = orig + h;
            let up = eval(&work);
            work[i].data_mut()[j] = orig - h;
            let down = eval(&work);
            work[i].data_mut()[j] = orig;
            let numeric = (up - down) / (2.0 * h);
            let a = analytic.data()[j];
            result.max_rel_err = result.max_rel_err.max(relative_error(a, numeric, floor));
            result.max_abs_err = result.max_abs_err.max((a - numeric).abs());
            result.checked += 1;
        }
    }
    result
}

/// Differentiable ops covered by [`check_op`].
pub const OPS: [&str; 10] = ["matmul", "linear_and_bias", "elementwise_binary", "elementwise_unary", "clamp", "minimum_and_maximum", "reductions_and_reshape", "gather_cols", "conv2d", "masked_log_softmax"];

/// Inputs and the scalar function of them for one random instance.
pub type Instance = (Vec<Tensor<f64>>, Box<dyn Fn(&mut Graph<f64>, &[Var]) -> Var>);

/// Standard normals pushed at least `margin` away from zero, keeping
/// instances clear of the kinks of relu, clamp and min/max.
pub fn away_from_zero<R: Rng + ?Sized>(shape: &[usize], margin: f64, rng: &mut R) -> Tensor<f64> {
    let t = Tensor::<f64>::randn(shape.to_vec(), rng);
    t.map(|v| if v >= 0.0 { v + margin } else { v - margin })
}

fn weighted_sum(g: &mut Graph<f64>, v: Var, w: &Tensor<f64>) -> Var {
    let c = g.constant(w.clone());
    let p = g.mul(v, c);
    g.sum(p)
}

/// A random instance exercising `op`, one of [`OPS`].
pub fn op_instance<R: Rng + ?Sized>(op: &str, rng: &mut R) -> Instance {
    match op {
        "matmul" => {
    let (m, k, n) = (rng.random_range(1..5), rng.random_range(1..5), rng.random_range(1..5));
    let w = Tensor::randn(vec![m, n], rng);
    let inputs = vec![Tensor::randn(vec![m, k], rng), Tensor::randn(vec![k, n], rng)];
    (inputs, Box::new(move |g: &mut Graph<f64>, v: &[Var]| {
        let y = g.matmul(v[0], v[1]);
        weighted_sum(g, y, &w)
    }))
        }
        "linear_and_bias" => {
    let (n, i, o) = (rng.random_range(1..4), rng.random_range(1..6), rng.random_range(1..6));
    let w = Tensor::randn(vec![n, o], rng);
    let inputs = vec![Tensor::randn(vec![n, i], rng), Tensor::randn(vec![i, o], rng), Tensor::randn(vec![o], rng)];
    (inputs, Box::new(move |g: &mut Graph<f64>, v: &[Var]| {
        let y = g.linear(v[0], v[1], v[2]);
        weighted_sum(g, y, &w)
    }))
        }
        "elementwise_binary" => {
    let n = rng.random_range(1..8);
    let w = Tensor::randn(vec![n], rng);
    let inputs = vec![Tensor::randn(vec![n], rng), Tensor::randn(vec![n], rng)];
    (inputs, Box::new(move |g: &mut Graph<f64>, v: &[Var]| {
        let a = g.add(v[0], v[1]);
        let s = g.sub(a, v[1]);
        let s = g.sub(s, v[0]);
        let m = g.mul(v[0], v[1]);
        let y = g.add(s, m);
        weighted_sum(g, y, &w)
    }))
        }
        "elementwise_unary" => {
    let n = rng.random_range(1..8);
    let w = Tensor::randn(vec![n], rng);
    let inputs = vec![away_from_zero(&[n], 0.01, rng)];
    (inputs, Box::new(move |g: &mut Graph<f64>, v: &[Var]| {
        let a = g.scale(v[0], 0.7);
        let a = g.exp(a);
        let b = g.square(v[0]);
        let c = g.relu(v[0]);
        let d = g.neg(v[0]);
        let y = g.add(a, b);
        let y = g.add(y, c);
        let y = g.mul(y, d);
        weighted_sum(g, y, &w)
    }))
        }
        "clamp" => {
    let n = rng.random_range(1..8);
    let w = Tensor::randn(vec![n], rng);
    // Keep entries clear of the bounds at +/-0.5.
    let x = Tensor::<f64>::randn(vec![n], rng).map(|v| if (v.abs() - 0.5).abs() < 0.01 { v * 1.1 } else { v });
    (vec![x], Box::new(move |g: &mut Graph<f64>, v: &[Var]| {
        let y = g.clamp(v[0], -0.5, 0.5);
        weighted_sum(g, y, &w)
    }))
        }
        "minimum_and_maximum" => {
    let n = rng.random_range(1..8);
    let w = Tensor::randn(vec![n], rng);
    let a = Tensor::<f64>::randn(vec![n], rng);
    let b = a.map(|v| v + if v > 0.0 { 0.3 } else { -0.3 }).map(|v| -v);
    (vec![a, b], Box::new(move |g: &mut Graph<f64>, v: &[Var]| {
        let lo = g.minimum(v[0], v[1]);
        let hi = g.maximum(v[0], v[1]);
        let y = g.mul(lo, hi);
        let y = g.add(y, lo);
        weighted_sum(g, y, &w)
    }))
        }
        "reductions_and_reshape" => {
    let (n, k) = (rng.random_range(1..5), rng.random_range(1..5));
    let w = Tensor::randn(vec![n], rng);
    let inputs = vec![Tensor::randn(vec![n, k], rng)];
    (inputs, Box::new(move |g: &mut Graph<f64>, v: &[Var]| {
        let sq = g.square(v[0]);
        let rows = g.sum_rows(sq);
        let r = weighted_sum(g, rows, &w);
        let flat = g.reshape(v[0], &[n * k]);
        let m = g.mean(flat);
        let mm = g.mul(m, r);
        let s = g.sum(v[0]);
        g.add(mm, s)
    }))
        }
        "gather_cols" => {
    let (n, k, m) = (rng.random_range(1..4), rng.random_range(1..6), rng.random_range(1..4));
    let index: Vec<usize> = (0..n * m).map(|_| rng.random_range(0..k)).collect();
    let w = Tensor::randn(vec![n, m], rng);
    let inputs = vec![Tensor::randn(vec![n, k], rng)];
    (inputs, Box::new(move |g: &mut Graph<f64>, v: &[Var]| {
        let y = g.gather_cols(v[0], index.clone());
        weighted_sum(g, y, &w)
    }))
        }
        "conv2d" => {
    let batch = rng.random_range(1..3);
    let (h, w) = (rng.random_range(3..7), rng.random_range(3..7));
    let (c, o) = (rng.random_range(1..4), rng.random_range(1..4));
    let (kh, kw) = (rng.random_range(1..4), rng.random_range(1..4));
    let stride = rng.random_range(1..3);
    let (oh, ow) = ((h - kh) / stride + 1, (w - kw) / stride + 1);
    let weights = Tensor::randn(vec![batch, oh, ow, o], rng);
    let inputs = vec![Tensor::randn(vec![batch, h, w, c], rng), Tensor::randn(vec![kh, kw, c, o], rng)];
    (inputs, Box::new(move |g: &mut Graph<f64>, v: &[Var]| {
        let y = g.conv2d(v[0], v[1], stride);
        weighted_sum(g, y, &weights)
    }))
        }
        "masked_log_softmax" => {
    let n = rng.random_range(1..4);
    let widths: Vec<usize> = (0..rng.random_range(1..4)).map(|_| rng.random_range(1..6)).collect();
    let segs = Segments::from_widths(&widths);
    let total = segs.total_width();
    let extra = rng.random_range(0..3);
    let mut valid = vec![false; n * total];
    for i in 0..n {
        let mut o = 0;
        for &wd in &widths {
            let forced = rng.random_range(0..wd);
            for j in 0..wd {
                valid[i * total + o + j] = j == forced || rng.random_bool(0.6);
            }
            o += wd;
        }
    }
    let w = Tensor::randn(vec![n, total], rng);
    // Only weight valid entries; masked outputs are huge negative constants.
    let w = Tensor::new(vec![n, total], w.data().iter().zip(&valid).map(|(&x, &ok)| if ok { x } else { 0.0 }).collect());
    let inputs = vec![Tensor::randn(vec![n, total + extra], rng)];
    (inputs, Box::new(move |g: &mut Graph<f64>, v: &[Var]| {
        let y = g.masked_log_softmax(v[0], &segs, valid.clone());
        weighted_sum(g, y, &w)
    }))
        }
        _ => panic!("unknown op {op:?}"),
    }
}

/// Worst agreement of `op` over `instances` random instances.
pub fn check_op(op: &str, instances: usize, seed: u64, h: f64, floor: f64) -> GradCheck {
    let mut rng = StdRng::seed_from_u64(seed);
    let mut worst = GradCheck { max_rel_err: 0.0, max_abs_err: 0.0, checked: 0 };
    for _ in 0..instances {
        let (inputs, f) = op_instance(op, &mut rng);
        let r = check_gradients(&inputs, h, floor, f);
        worst.max_rel_err = worst.max_rel_err.max(r.max_rel_err);
        worst.max_abs_err = worst.max_abs_err.max(r.max_abs_err);
        worst.checked += r.checked;
    }
    worst
}
