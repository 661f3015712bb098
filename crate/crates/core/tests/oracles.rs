//! Independent loop-level reference implementations checked against the
//! library.

mod common;

use std::f64::consts::TAU;

use nalgebra::{DMatrix, DVector};
use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use common::*;
use fpanet::baselines::{fista_estimate, lasso_objective, omp_estimate};
use fpanet::channel::{far_field_response, near_field_response, synthesize_channel, PathParameter};
use fpanet::geometry::{ArraySpec, SPEED_OF_LIGHT};
use fpanet::measurement::{build_dft_transform, compute_le_matrix, MeasurementEnsemble, MeasurementSpec};
use fpanet::nle::{
    channel_attention, darb_forward, nle_forward, spatial_attention, AttentionMode, ChannelAttentionParams,
    ConvParams, DarbParams, ModelParameters,
};
use fpanet::tensor::{Tape, Tensor};

struct Map {
    h: usize,
    w: usize,
    c: usize,
    d: Vec<f64>,
}

impl Map {
    fn at(&self, i: isize, j: isize, ch: usize) -> f64 {
        if i < 0 || j < 0 || i >= self.h as isize || j >= self.w as isize {
            0.0
        } else {
            self.d[(i as usize * self.w + j as usize) * self.c + ch]
        }
    }

    fn from(t: &Tensor) -> Map {
        let s = t.shape();
        Map { h: s[0], w: s[1], c: s[2], d: t.data().to_vec() }
    }
}

fn conv_loop(x: &Map, p: &ConvParams) -> Map {
    let ks = p.kernel.shape();
    let (k, co) = (ks[0], ks[3]);
    let half = (k / 2) as isize;
    let mut d = vec![0.0; x.h * x.w * co];
    for i in 0..x.h {
        for j in 0..x.w {
            for o in 0..co {
                let mut acc = p.bias.data()[o];
                for a in 0..k {
                    for b in 0..k {
                        for ci in 0..x.c {
                            let kv = p.kernel.data()[((a * k + b) * x.c + ci) * co + o];
                            acc += kv * x.at(i as isize + a as isize - half, j as isize + b as isize - half, ci);
                        }
                    }
                }
                d[(i * x.w + j) * co + o] = acc;
            }
        }
    }
    Map { h: x.h, w: x.w, c: co, d }
}

fn sig(v: f64) -> f64 {
    1.0 / (1.0 + (-v).exp())
}

fn dense_loop(x: &[f64], w: &Tensor, b: &Tensor) -> Vec<f64> {
    let (o, i) = (w.shape()[0], w.shape()[1]);
    (0..o)
        .map(|r| b.data()[r] + (0..i).map(|q| w.data()[r * i + q] * x[q]).sum::<f64>())
        .collect()
}

fn channel_attention_loop(f: &Map, p: &ChannelAttentionParams) -> (Vec<f64>, Map) {
    let hw = (f.h * f.w) as f64;
    let mut avg = vec![0.0; f.c];
    let mut max = vec![f64::NEG_INFINITY; f.c];
    for px in 0..f.h * f.w {
        for ch in 0..f.c {
            let v = f.d[px * f.c + ch];
            avg[ch] += v / hw;
            max[ch] = max[ch].max(v);
        }
    }
    let mlp = |d: &[f64]| {
        let h: Vec<f64> = dense_loop(d, &p.fc1.weights, &p.fc1.bias).into_iter().map(|v| v.max(0.0)).collect();
        dense_loop(&h, &p.fc2.weights, &p.fc2.bias)
    };
    let (a, m) = (mlp(&avg), mlp(&max));
    let mask: Vec<f64> = a.iter().zip(&m).map(|(x, y)| sig(x + y)).collect();
    let d = f.d.iter().enumerate().map(|(i, v)| v * mask[i % f.c]).collect();
    (mask, Map { d, ..*f })
}

fn spatial_attention_loop(f: &Map, p: &ConvParams) -> (Vec<f64>, Map) {
    let mut desc = Map { h: f.h, w: f.w, c: 2, d: vec![0.0; f.h * f.w * 2] };
    for px in 0..f.h * f.w {
        let vals = &f.d[px * f.c..(px + 1) * f.c];
        desc.d[px * 2] = vals.iter().sum::<f64>() / f.c as f64;
        desc.d[px * 2 + 1] = vals.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    }
    let mask: Vec<f64> = conv_loop(&desc, p).d.into_iter().map(sig).collect();
    let d = f.d.iter().enumerate().map(|(i, v)| v * mask[i / f.c]).collect();
    (mask, Map { d, ..*f })
}

fn darb_loop(f: &Map, p: &DarbParams) -> Map {
    let mut g = conv_loop(f, &p.conv1);
    g.d.iter_mut().for_each(|v| *v = v.max(0.0));
    let mut g = conv_loop(&g, &p.conv2);
    if let Some(ca) = &p.channel {
        g = channel_attention_loop(&g, ca).1;
    }
    if let Some(sa) = &p.spatial {
        g = spatial_attention_loop(&g, sa).1;
    }
    let d = f.d.iter().zip(&g.d).map(|(a, b)| a + b).collect();
    Map { d, ..*f }
}

fn nle_loop(p: &ModelParameters, v: &[f64], h: usize, w: usize) -> Vec<f64> {
    let hw = h * w;
    let mut x = Map { h, w, c: 2, d: vec![0.0; 2 * hw] };
    for q in 0..hw {
        x.d[q * 2] = v[q];
        x.d[q * 2 + 1] = v[hw + q];
    }
    let mut f = conv_loop(&x, &p.input_conv);
    for b in &p.blocks {
        f = darb_loop(&f, b);
    }
    let out = conv_loop(&f, &p.output_conv);
    let mut flat = vec![0.0; 2 * hw];
    for q in 0..hw {
        flat[q] = out.d[q * 2];
        flat[hw + q] = out.d[q * 2 + 1];
    }
    flat
}

fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

fn conv_params(r: &mut ChaCha8Rng, k: usize, ci: usize, co: usize) -> ConvParams {
    ConvParams {
        kernel: uniform(r, vec![k, k, ci, co], -1.0, 1.0),
        bias: uniform(r, vec![co], -1.0, 1.0),
    }
}

#[test]
fn conv2d_matches_nested_loops() {
    let mut r = rng(1);
    let x = uniform(&mut r, vec![5, 5, 2], -1.0, 1.0);
    let p = conv_params(&mut r, 3, 2, 3);
    let mut tape = Tape::new();
    let (xv, kv, bv) = (tape.constant(x.clone()), tape.constant(p.kernel.clone()), tape.constant(p.bias.clone()));
    let y = tape.conv2d(xv, kv, bv).unwrap();
    assert_eq!(tape.value(y).shape(), &[5, 5, 3]);
    assert!(max_abs_diff(tape.value(y).data(), &conv_loop(&Map::from(&x), &p).d) < 1e-13);

    let mut id = Tensor::zeros(vec![1, 1, 2, 2]);
    id.data_mut()[0] = 1.0;
    id.data_mut()[3] = 1.0;
    let mut tape = Tape::new();
    let (xv, kv, bv) = (tape.constant(x.clone()), tape.constant(id), tape.constant(Tensor::zeros(vec![2])));
    let y = tape.conv2d(xv, kv, bv).unwrap();
    assert_eq!(tape.value(y).data(), x.data());
}

#[test]
fn broadcast_mul_and_pools_match_loops() {
    let mut r = rng(2);
    let f = uniform(&mut r, vec![3, 4, 5], -1.0, 1.0);
    let mask = uniform(&mut r, vec![3, 4, 1], 0.0, 1.0);
    let mut tape = Tape::new();
    let (fv, mv) = (tape.constant(f.clone()), tape.constant(mask.clone()));
    let y = tape.mul(fv, mv).unwrap();
    let avg = tape.global_avg_pool(fv).unwrap();
    let max = tape.global_max_pool(fv).unwrap();
    let cmean = tape.channel_mean(fv).unwrap();
    let cmax = tape.channel_max(fv).unwrap();

    let m = Map::from(&f);
    let mut expect = vec![0.0; f.len()];
    for ch in 0..5 {
        for px in 0..12 {
            expect[px * 5 + ch] = m.d[px * 5 + ch] * mask.data()[px];
        }
    }
    assert!(max_abs_diff(tape.value(y).data(), &expect) < 1e-15);
    for ch in 0..5 {
        let col: Vec<f64> = (0..12).map(|px| m.d[px * 5 + ch]).collect();
        assert!((tape.value(avg).data()[ch] - col.iter().sum::<f64>() / 12.0).abs() < 1e-15);
        assert_eq!(tape.value(max).data()[ch], col.iter().cloned().fold(f64::NEG_INFINITY, f64::max));
    }
    for px in 0..12 {
        let row = &m.d[px * 5..px * 5 + 5];
        assert!((tape.value(cmean).data()[px] - row.iter().sum::<f64>() / 5.0).abs() < 1e-15);
        assert_eq!(tape.value(cmax).data()[px], row.iter().cloned().fold(f64::NEG_INFINITY, f64::max));
    }
}

#[test]
fn dense_matches_loop() {
    let mut r = rng(3);
    let (x, w, b) = (
        uniform(&mut r, vec![8], -1.0, 1.0),
        uniform(&mut r, vec![4, 8], -1.0, 1.0),
        uniform(&mut r, vec![4], -1.0, 1.0),
    );
    let mut tape = Tape::new();
    let (xv, wv, bv) = (tape.constant(x.clone()), tape.constant(w.clone()), tape.constant(b.clone()));
    let y = tape.dense(xv, wv, bv).unwrap();
    assert!(max_abs_diff(tape.value(y).data(), &dense_loop(x.data(), &w, &b)) < 1e-15);
}

fn ca_params(r: &mut ChaCha8Rng, c: usize, hid: usize) -> ChannelAttentionParams {
    ChannelAttentionParams {
        fc1: fpanet::nle::DenseParams {
            weights: uniform(r, vec![hid, c], -1.0, 1.0),
            bias: uniform(r, vec![hid], -0.5, 0.5),
        },
        fc2: fpanet::nle::DenseParams {
            weights: uniform(r, vec![c, hid], -1.0, 1.0),
            bias: uniform(r, vec![c], -0.5, 0.5),
        },
    }
}

#[test]
fn attention_modules_match_composition_oracles() {
    for seed in 0..10 {
        let mut r = rng(10 + seed);
        let f = uniform(&mut r, vec![4, 5, 6], -1.0, 1.0);
        let ca = ca_params(&mut r, 6, 3);
        let (mask, out) = channel_attention(&f, &ca).unwrap();
        let (em, eo) = channel_attention_loop(&Map::from(&f), &ca);
        assert!(max_abs_diff(mask.data(), &em) < 1e-14);
        assert!(max_abs_diff(out.data(), &eo.d) < 1e-14);
        assert!(mask.data().iter().all(|&m| m > 0.0 && m < 1.0));

        let sa = conv_params(&mut r, 3, 2, 1);
        let (mask, out) = spatial_attention(&f, &sa).unwrap();
        let (em, eo) = spatial_attention_loop(&Map::from(&f), &sa);
        assert!(max_abs_diff(mask.data(), &em) < 1e-14);
        assert!(max_abs_diff(out.data(), &eo.d) < 1e-14);
        assert!(mask.data().iter().all(|&m| m > 0.0 && m < 1.0));
    }
}

#[test]
fn darb_matches_oracle_on_4x4x3() {
    for seed in 0..10 {
        let mut r = rng(30 + seed);
        let f = uniform(&mut r, vec![4, 4, 3], -1.0, 1.0);
        let p = DarbParams {
            conv1: conv_params(&mut r, 3, 3, 3),
            conv2: conv_params(&mut r, 3, 3, 3),
            channel: Some(ca_params(&mut r, 3, 1)),
            spatial: Some(conv_params(&mut r, 3, 2, 1)),
        };
        let out = darb_forward(&f, &p).unwrap();
        assert!(max_abs_diff(out.data(), &darb_loop(&Map::from(&f), &p).d) < 1e-13);
    }
}

#[test]
fn nle_matches_oracle_on_toy_dims() {
    for mode in AttentionMode::ALL {
        let cfg = toy_nle(mode);
        for seed in 0..5 {
            let p = random_params(&cfg, 50 + seed);
            let v = uniform(&mut rng(60 + seed), vec![32], -1.0, 1.0);
            let out = nle_forward(&p, v.data(), &cfg).unwrap();
            assert!(max_abs_diff(&out, &nle_loop(&p, v.data(), 4, 4)) < 1e-12, "{}", mode.as_str());
        }
    }
}

#[test]
fn dft_concentrates_single_subarray_steering_energy() {
    let single = ArraySpec { num_subarrays: 1, ..ArraySpec::desk() };
    let e = build_dft_transform(&single);
    let mut r = rng(4);
    for _ in 0..50 {
        let a = far_field_response(&single, r.random_range(0.0..TAU), r.random_range(0.0..1.5));
        let conc = |v: &DVector<Complex64>| v.iter().map(|c| c.norm_sqr()).fold(0.0, f64::max) / v.norm_squared();
        assert!(conc(&(&e * &a)) >= conc(&a) - 1e-12);
    }
}

#[test]
fn mixed_paths_match_brute_force_sum() {
    let spec = ArraySpec::desk();
    let ray = spec.rayleigh_distance();
    let lambda = spec.wavelength();
    let pos = spec.positions();
    let paths: Vec<PathParameter> = [(0.1, 0.2, 0.12), (2.0, 0.9, 0.45), (4.5, 1.3, 0.29)]
        .iter()
        .enumerate()
        .map(|(l, &(az, el, r))| PathParameter {
            gain: Complex64::from_polar(0.3 + 0.2 * l as f64, 0.7 * l as f64),
            azimuth: az,
            elevation: el,
            distance: r,
            delay: r / SPEED_OF_LIGHT,
            is_los: l == 0,
        })
        .collect();
    let h = synthesize_channel(&spec, &paths, ray).unwrap();
    for (m, p) in pos.iter().enumerate() {
        let mut acc = Complex64::new(0.0, 0.0);
        for path in &paths {
            let x = [
                path.elevation.sin() * path.azimuth.cos(),
                path.elevation.sin() * path.azimuth.sin(),
                path.elevation.cos(),
            ];
            let phase = if path.distance < ray {
                let d: f64 = (0..3).map(|i| (p[i] - path.distance * x[i]).powi(2)).sum::<f64>().sqrt();
                -2.0 * std::f64::consts::PI * d / lambda
            } else {
                2.0 * std::f64::consts::PI * (0..3).map(|i| p[i] * x[i]).sum::<f64>() / lambda
            };
            let delay = -2.0 * std::f64::consts::PI * spec.carrier_frequency * path.delay;
            acc += path.gain * Complex64::from_polar(1.0, phase) * Complex64::from_polar(1.0, delay);
        }
        assert!((acc - h[m]).norm() < 1e-9, "entry {m}");
    }
}

#[test]
fn near_field_at_large_range_is_planar() {
    let spec = ArraySpec::desk();
    let r = 1e6 * spec.aperture();
    let mut g = rng(5);
    for _ in 0..20 {
        let (az, el) = (g.random_range(0.0..TAU), g.random_range(0.0..1.5));
        let near = near_field_response(&spec, az, el, r).unwrap();
        let far = far_field_response(&spec, az, el);
        let phase = near.dotc(&far).conj() / near.dotc(&far).norm();
        let aligned = &far * phase;
        assert!((near - aligned).norm() / far.norm() <= 1e-3);
    }
}

#[test]
fn trace_condition_holds_for_rank_deficient_matrices() {
    let mut r = rng(6);
    for rank in [1usize, 3, 7] {
        let a = DMatrix::from_fn(10, rank, |_, _| r.random_range(-1.0..1.0));
        let b = DMatrix::from_fn(rank, 12, |_, _| r.random_range(-1.0..1.0));
        let m = a * b;
        let (z, rho, _, got_rank, _) = compute_le_matrix(&m).unwrap();
        assert_eq!(got_rank, rank);
        assert!((rho - 12.0 / rank as f64).abs() < 1e-9);
        let residual = (DMatrix::<f64>::identity(12, 12) - &z * &m).trace();
        assert!(residual.abs() <= 1e-8 * 12.0);
    }
}

fn fista_gap(iters: usize) -> f64 {
    use fpanet::training::{generate_split, DatasetSpec, Split};
    let spec = ArraySpec::desk();
    let ens = MeasurementEnsemble::build(&spec, &MeasurementSpec::default()).unwrap();
    let dspec = DatasetSpec { test_count: 4, ..DatasetSpec::default() };
    let test = generate_split(&spec, &dspec, &ens, Split::Test, fpanet::par::Execution::Sequential).unwrap();
    let mut worst = 0.0f64;
    for rec in &test.records {
        for lambda in [0.05, 0.1, 0.3] {
            let short = fista_estimate(&rec.y, &ens, lambda, iters).unwrap();
            let long = fista_estimate(&rec.y, &ens, lambda, 5000).unwrap();
            let gap = lasso_objective(&short, &rec.y, &ens, lambda) - lasso_objective(&long, &rec.y, &ens, lambda);
            worst = worst.max(gap);
        }
    }
    worst
}

#[test]
fn fista_reaches_long_run_reference() {
    let gap = fista_gap(1000);
    assert!(gap <= 1e-6, "{gap:e}");
}

#[test]
#[ignore = "200 iterations leave an objective gap near 1e-3 on desk instances"]
fn fista_reaches_long_run_reference_in_200_iterations() {
    let gap = fista_gap(200);
    assert!(gap <= 1e-6, "{gap:e}");
}

#[test]
fn omp_recovers_three_sparse_support() {
    let ens = MeasurementEnsemble::build(&ArraySpec::desk(), &MeasurementSpec::default()).unwrap();
    let mut r = ChaCha8Rng::seed_from_u64(8);
    for _ in 0..100 {
        let mut blocks = [0usize, 1, 2, 3];
        for i in (1..4).rev() {
            blocks.swap(i, r.random_range(0..=i));
        }
        let mut h = DVector::<Complex64>::zeros(64);
        let mut support: Vec<usize> = blocks[..3].iter().map(|b| b * 16 + r.random_range(0..16)).collect();
        for &s in &support {
            h[s] = Complex64::from_polar(r.random_range(0.5..1.5), r.random_range(0.0..TAU));
        }
        let y = &ens.complex_matrix * &h;
        let res = omp_estimate(&y, &ens.complex_matrix, 3).unwrap();
        let mut got = res.support.clone();
        got.sort();
        support.sort();
        assert_eq!(got, support);
        assert!((res.estimate - h).norm() < 1e-9);
    }
}

fn frozen_mask_params(seed: u64) -> (fpanet::nle::NleConfig, ModelParameters) {
    let cfg = toy_nle(AttentionMode::Dual);
    let mut p = random_params(&cfg, seed);
    for b in &mut p.blocks {
        let ca = b.channel.as_mut().unwrap();
        for t in [&mut ca.fc1.weights, &mut ca.fc1.bias, &mut ca.fc2.weights, &mut ca.fc2.bias] {
            t.data_mut().iter_mut().for_each(|v| *v = 0.0);
        }
        let sa = b.spatial.as_mut().unwrap();
        sa.kernel.data_mut().iter_mut().for_each(|v| *v = 0.0);
        sa.bias.data_mut().iter_mut().for_each(|v| *v = 0.0);
        // Strongly positive conv1 bias keeps every ReLU active.
        b.conv1.bias.data_mut().iter_mut().for_each(|v| *v = 50.0);
    }
    (cfg, p)
}

fn toy_probes(seed: u64) -> Vec<(Vec<f64>, Vec<f64>)> {
    let mut r = rng(seed);
    let centers: Vec<Vec<f64>> = (0..8).map(|_| (0..32).map(|_| r.random_range(-1.0..1.0)).collect()).collect();
    fpanet::nle::perturbation_probes(&centers, 32, 0.1, &mut r)
}

#[test]
fn frozen_mask_linear_configuration_normalizes_below_target() {
    use fpanet::nle::{estimate_lipschitz, normalize_parameters};
    use fpanet::par::Execution;
    let (cfg, mut p) = frozen_mask_params(70);
    let probes = toy_probes(71);
    let mut l = estimate_lipschitz(&p, &cfg, &probes, Execution::Sequential).unwrap();
    while l < 2.0 {
        p.scale_weights(1.1);
        let next = estimate_lipschitz(&p, &cfg, &probes, Execution::Sequential).unwrap();
        assert!(next >= l - 1e-12, "scaling up weights decreased the estimate");
        l = next;
    }
    let n = normalize_parameters(&p, &cfg, l, 0.99, &probes, Execution::Sequential).unwrap();
    assert!(n.applied);
    let after = estimate_lipschitz(&n.params, &cfg, &probes, Execution::Sequential).unwrap();
    assert!(after <= 0.99 + 1e-6, "{after}");
    assert!((after - n.lipschitz_after).abs() < 1e-12);
}

#[test]
fn doubling_weights_does_not_lower_frozen_mask_estimate() {
    use fpanet::nle::estimate_lipschitz;
    use fpanet::par::Execution;
    let (cfg, p) = frozen_mask_params(72);
    let probes = toy_probes(73);
    let before = estimate_lipschitz(&p, &cfg, &probes, Execution::Sequential).unwrap();
    let mut q = p.clone();
    q.scale_weights(2.0);
    let after = estimate_lipschitz(&q, &cfg, &probes, Execution::Sequential).unwrap();
    assert!(after >= before);
}
