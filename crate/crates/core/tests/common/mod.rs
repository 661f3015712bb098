#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use fpanet::nle::{AttentionMode, NleConfig};
use fpanet::tensor::{Tape, Tensor, Var};

pub mod ops;

pub const FD_STEP: f64 = 1e-5;

/// Denominator floor for the relative error; below it the error is absolute.
pub const REL_FLOOR: f64 = 1e-3;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn uniform(rng: &mut ChaCha8Rng, shape: Vec<usize>, lo: f64, hi: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.random_range(lo..hi)).collect()).unwrap()
}

/// Values bounded away from zero, for ops with a kink there.
pub fn away_from_zero(rng: &mut ChaCha8Rng, shape: Vec<usize>) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            let v: f64 = rng.random_range(0.05..1.0);
            if rng.random::<bool>() { v } else { -v }
        })
        .collect();
    Tensor::new(shape, data).unwrap()
}

fn scalar_value<F>(build: &F, inputs: &[Tensor], weights: &Option<Vec<f64>>) -> (f64, Vec<f64>)
where
    F: Fn(&mut Tape, &[Var]) -> Var,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone(), true)).collect();
    let out = build(&mut tape, &vars);
    let values = tape.value(out).data().to_vec();
    let s = match weights {
        Some(w) => values.iter().zip(w).map(|(a, b)| a * b).sum(),
        None => values.iter().sum(),
    };
    (s, values)
}

/// Largest relative error between tape gradients and central differences of
/// `<w, build(inputs)>` for a fixed random weighting `w`.
pub fn gradcheck<F>(inputs: &[Tensor], seed: u64, build: F) -> f64
where
    F: Fn(&mut Tape, &[Var]) -> Var,
{
    let (_, values) = scalar_value(&build, inputs, &None);
    let mut r = rng(seed ^ 0x5eed);
    let w: Vec<f64> = (0..values.len()).map(|_| r.random_range(-1.0..1.0)).collect();

    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone(), true)).collect();
    let out = build(&mut tape, &vars);
    let shape = tape.value(out).shape().to_vec();
    let wt = tape.constant(Tensor::new(shape, w.clone()).unwrap());
    let prod = tape.mul(out, wt).unwrap();
    let s = tape.sum(prod);
    let grads = tape.backward(s).unwrap();

    let w = Some(w);
    let mut worst = 0.0f64;
    for (k, input) in inputs.iter().enumerate() {
        let analytic = grads.get(vars[k]).map(|g| g.to_vec()).unwrap_or_else(|| vec![0.0; input.len()]);
        for j in 0..input.len() {
            let mut plus = inputs.to_vec();
            plus[k].data_mut()[j] += FD_STEP;
            let mut minus = inputs.to_vec();
            minus[k].data_mut()[j] -= FD_STEP;
            let fd = (scalar_value(&build, &plus, &w).0 - scalar_value(&build, &minus, &w).0) / (2.0 * FD_STEP);
            let a = analytic[j];
            let err = (a - fd).abs() / a.abs().max(fd.abs()).max(REL_FLOOR);
            worst = worst.max(err);
        }
    }
    worst
}

pub fn toy_nle(attention: AttentionMode) -> NleConfig {
    NleConfig {
        feature_channels: 4,
        num_darbs: 3,
        reduction_ratio: 2,
        spatial_kernel: 3,
        conv_kernel: 3,
        map_height: 4,
        map_width: 4,
        attention,
    }
}

use fpanet::nle::{nle_forward, nle_tape, ModelParameters};

fn weighted_forward(params: &ModelParameters, cfg: &NleConfig, v: &[f64], w: &[f64]) -> f64 {
    nle_forward(params, v, cfg).unwrap().iter().zip(w).map(|(a, b)| a * b).sum()
}

/// Gradient check of the full estimator with respect to every parameter and
/// the input vector.
pub fn nle_gradcheck(params: &ModelParameters, cfg: &NleConfig, v: &[f64], seed: u64) -> f64 {
    let mut r = rng(seed ^ 0xface);
    let w: Vec<f64> = (0..v.len()).map(|_| r.random_range(-1.0..1.0)).collect();

    let mut tape = Tape::new();
    let bound = params.bind(&mut tape, true);
    let x = tape.leaf(Tensor::from_vec(v.to_vec()), true);
    let out = nle_tape(&mut tape, &bound, x, cfg).unwrap();
    let wt = tape.constant(Tensor::from_vec(w.clone()));
    let prod = tape.mul(out, wt).unwrap();
    let s = tape.sum(prod);
    let grads = tape.backward(s).unwrap();
    let param_grads = params.gradients_from(&bound, &grads);
    let input_grad = grads.get(x).unwrap().to_vec();

    let rel = |a: f64, fd: f64| (a - fd).abs() / a.abs().max(fd.abs()).max(REL_FLOOR);
    let mut worst = 0.0f64;
    let mut sizes = Vec::new();
    params.visit(&mut |_, t| sizes.push(t.len()));
    for (ti, &n) in sizes.iter().enumerate() {
        for j in 0..n {
            let eval = |delta: f64| {
                let mut p = params.clone();
                let mut k = 0;
                p.visit_mut(&mut |_, t| {
                    if k == ti {
                        t.data_mut()[j] += delta;
                    }
                    k += 1;
                });
                weighted_forward(&p, cfg, v, &w)
            };
            let fd = (eval(FD_STEP) - eval(-FD_STEP)) / (2.0 * FD_STEP);
            worst = worst.max(rel(param_grads[ti][j], fd));
        }
    }
    for j in 0..v.len() {
        let mut plus = v.to_vec();
        plus[j] += FD_STEP;
        let mut minus = v.to_vec();
        minus[j] -= FD_STEP;
        let fd = (weighted_forward(params, cfg, &plus, &w) - weighted_forward(params, cfg, &minus, &w)) / (2.0 * FD_STEP);
        worst = worst.max(rel(input_grad[j], fd));
    }
    worst
}

/// Random parameters with non-zero biases so every path is exercised.
pub fn random_params(cfg: &NleConfig, seed: u64) -> ModelParameters {
    let mut r = rng(seed);
    let mut p = ModelParameters::init(cfg, &mut r);
    p.visit_mut(&mut |name, t| {
        if name.ends_with("bias") {
            t.data_mut().iter_mut().for_each(|b| *b = r.random_range(-0.2..0.2));
        }
    });
    p
}
