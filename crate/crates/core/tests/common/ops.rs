//! Finite-difference gradient cases, one per differentiable op.

use std::sync::Arc;

use nalgebra::DMatrix;
use rand::Rng;

use super::*;
use fpanet::nle::AttentionMode;
use fpanet::tensor::Tape;

pub const INSTANCES: u64 = 20;

pub const OPS: [&str; 16] = [
    "conv2d",
    "relu",
    "sigmoid",
    "scale",
    "add/sub",
    "mul",
    "concat_channels",
    "global_avg_pool",
    "global_max_pool",
    "channel_mean",
    "channel_max",
    "dense",
    "sum/sum_squares",
    "reshape/gather",
    "affine",
    "nle",
];

fn dims(seed: u64) -> (usize, usize, usize) {
    let mut r = rng(seed);
    (r.random_range(1..5), r.random_range(1..5), r.random_range(1..4))
}

/// Relative error of instance `s` of `op`.
pub fn instance(op: &str, s: u64) -> f64 {
    let (h, w, c) = dims(s);
    let mut r = rng(s);
    match op {
        "conv2d" => {
            let co = r.random_range(1..4);
            let k = [1, 3, 5][s as usize % 3];
            let inputs = vec![
                uniform(&mut r, vec![h, w, c], -1.0, 1.0),
                uniform(&mut r, vec![k, k, c, co], -1.0, 1.0),
                uniform(&mut r, vec![co], -1.0, 1.0),
            ];
            gradcheck(&inputs, s, |t: &mut Tape, v| t.conv2d(v[0], v[1], v[2]).unwrap())
        }
        "relu" => {
            let x = away_from_zero(&mut r, vec![h, w, c]);
            gradcheck(&[x], s, |t: &mut Tape, v| t.relu(v[0]))
        }
        "sigmoid" => {
            let x = uniform(&mut r, vec![h, w, c], -4.0, 4.0);
            gradcheck(&[x], s, |t: &mut Tape, v| t.sigmoid(v[0]))
        }
        "scale" => {
            let x = uniform(&mut r, vec![7], -1.0, 1.0);
            gradcheck(&[x], s, |t: &mut Tape, v| t.scale(v[0], -1.7))
        }
        "add/sub" => {
            let inputs = vec![
                uniform(&mut r, vec![h, w, c], -1.0, 1.0),
                uniform(&mut r, vec![h, w, c], -1.0, 1.0),
            ];
            gradcheck(&inputs, s, |t: &mut Tape, v| {
                let a = t.add(v[0], v[1]).unwrap();
                let b = t.sub(a, v[1]).unwrap();
                t.sub(b, v[1]).unwrap()
            })
        }
        "mul" => {
            let mask_shape = match s % 3 {
                0 => vec![h, w, c],
                1 => vec![1, 1, c],
                _ => vec![h, w, 1],
            };
            let inputs = vec![
                uniform(&mut r, vec![h, w, c], -1.0, 1.0),
                uniform(&mut r, mask_shape, -1.0, 1.0),
            ];
            gradcheck(&inputs, s, |t: &mut Tape, v| {
                if s.is_multiple_of(2) {
                    t.mul(v[0], v[1]).unwrap()
                } else {
                    t.mul(v[1], v[0]).unwrap()
                }
            })
        }
        "concat_channels" => {
            let inputs = vec![
                uniform(&mut r, vec![h, w, c], -1.0, 1.0),
                uniform(&mut r, vec![h, w, 1 + c % 2], -1.0, 1.0),
            ];
            gradcheck(&inputs, s, |t: &mut Tape, v| t.concat_channels(v[0], v[1]).unwrap())
        }
        "global_avg_pool" | "global_max_pool" | "channel_mean" | "channel_max" => {
            let x = uniform(&mut r, vec![h, w, c], -1.0, 1.0);
            gradcheck(&[x], s, |t: &mut Tape, v| match op {
                "global_avg_pool" => t.global_avg_pool(v[0]).unwrap(),
                "global_max_pool" => t.global_max_pool(v[0]).unwrap(),
                "channel_mean" => t.channel_mean(v[0]).unwrap(),
                _ => t.channel_max(v[0]).unwrap(),
            })
        }
        "dense" => {
            let (i, o) = (r.random_range(1..9), r.random_range(1..6));
            let shape = if s.is_multiple_of(2) { vec![i] } else { vec![1, 1, i] };
            let inputs = vec![
                uniform(&mut r, shape, -1.0, 1.0),
                uniform(&mut r, vec![o, i], -1.0, 1.0),
                uniform(&mut r, vec![o], -1.0, 1.0),
            ];
            gradcheck(&inputs, s, |t: &mut Tape, v| t.dense(v[0], v[1], v[2]).unwrap())
        }
        "sum/sum_squares" => {
            let x = uniform(&mut r, vec![h, w, c], -1.0, 1.0);
            gradcheck(&[x], s, |t: &mut Tape, v| {
                let a = t.sum_squares(v[0]);
                let b = t.sum(v[0]);
                t.add(a, b).unwrap()
            })
        }
        "reshape/gather" => {
            let n = h * w * c;
            let x = uniform(&mut r, vec![n], -1.0, 1.0);
            let index: Vec<usize> = (0..n).rev().chain(0..n / 2).collect();
            gradcheck(&[x], s, move |t: &mut Tape, v| {
                let m = t.reshape(v[0], vec![h, w, c]).unwrap();
                let len = index.len();
                t.gather(m, index.clone(), vec![len]).unwrap()
            })
        }
        "affine" => {
            let (i, o) = (r.random_range(1..9), r.random_range(1..9));
            let m = Arc::new(DMatrix::from_fn(o, i, |_, _| r.random_range(-1.0..1.0)));
            let offset: Vec<f64> = (0..o).map(|_| r.random_range(-1.0..1.0)).collect();
            let x = uniform(&mut r, vec![i], -1.0, 1.0);
            gradcheck(&[x], s, move |t: &mut Tape, v| t.affine(v[0], m.clone(), &offset).unwrap())
        }
        "nle" => {
            let cfg = toy_nle(AttentionMode::ALL[s as usize % 4]);
            let p = random_params(&cfg, 100 + s);
            let v = uniform(&mut rng(200 + s), vec![cfg.vector_len()], -1.0, 1.0);
            nle_gradcheck(&p, &cfg, v.data(), s)
        }
        _ => panic!("unknown op {op}"),
    }
}

/// Worst relative error over all instances of `op`.
pub fn worst(op: &str) -> f64 {
    (0..INSTANCES).map(|s| instance(op, s)).fold(0.0, f64::max)
}
