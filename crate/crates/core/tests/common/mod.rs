//! Independent checks shared by the property suite and the acceptance run.
#![allow(dead_code)]

use nalgebra::{DMatrix, DVector};
use prelu_extract::critical_search::second_directional_derivative;
use prelu_extract::linalg::gaussian_vector;
use prelu_extract::prefix::RecoveredPrefix;
use prelu_extract::scores_adapter::ScalarView;
use prelu_extract::sign_slope::{decide_sign_slope_independent, decide_sign_slope_joint};
use prelu_extract::weight_recovery::{probe_directions, resolve_projection_signs};
use prelu_extract::{extract, AttackConfig, AttackError, FeedbackMode, Oracle, PReluNetwork, ProbeConfig};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;

pub fn rng(seed: u64) -> ChaCha20Rng {
    ChaCha20Rng::seed_from_u64(seed)
}

pub fn inputs(d: usize, n: usize, seed: u64) -> Vec<Vec<f64>> {
    let mut r = rng(seed);
    (0..n).map(|_| gaussian_vector(d, &mut r)).collect()
}

pub fn max_output_gap(f: impl Fn(&[f64]) -> Vec<f64>, g: impl Fn(&[f64]) -> Vec<f64>, xs: &[Vec<f64>]) -> f64 {
    xs.iter()
        .map(|x| f(x).iter().zip(g(x)).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max))
        .fold(0.0, f64::max)
}

/// Every parameter as raw bits, for bit-identity comparisons.
pub fn parameter_bits(net: &PReluNetwork) -> Vec<u64> {
    let mut out = Vec::new();
    for k in 1..=net.depth() + 1 {
        out.extend(net.weight(k).iter().map(|v| v.to_bits()));
        out.extend(net.bias(k).iter().map(|v| v.to_bits()));
        if k <= net.depth() {
            out.extend(net.slopes(k).iter().map(|v| v.to_bits()));
        }
    }
    out
}

/// Random composition of neuron permutations and positive rescalings.
pub fn disguise(net: &PReluNetwork, steps: usize, seed: u64) -> PReluNetwork {
    let mut r = rng(seed);
    let mut out = net.clone();
    for _ in 0..steps {
        let k = r.random_range(1..=net.depth());
        let width = net.dims()[k];
        if r.random_bool(0.5) {
            let mut perm: Vec<usize> = (0..width).collect();
            for i in (1..width).rev() {
                perm.swap(i, r.random_range(0..=i));
            }
            out = out.permute_layer(k, &perm).unwrap();
        } else {
            let c = 2f64.powf(r.random_range(-3.0..3.0));
            out = out.scale_neuron(k, r.random_range(0..width), c).unwrap();
        }
    }
    out
}

/// One hand-built single-neuron instance `f(x) = g * prelu(a.x + b) + c`,
/// probed at a point of its hyperplane. Returns (measured, analytic) second
/// differences; the analytic value is `g (1 - s) |a.h|`.
pub fn delta_instance(d: usize, g: f64, s: f64, seed: u64) -> (f64, f64) {
    let mut r = rng(seed);
    let a = gaussian_vector(d, &mut r);
    let b: f64 = r.random_range(-1.0..1.0);
    let c: f64 = r.random_range(-1.0..1.0);
    let net = PReluNetwork::new(
        vec![DMatrix::from_row_slice(1, d, &a), DMatrix::from_element(1, 1, g)],
        vec![DVector::from_element(1, b), DVector::from_element(1, c)],
        vec![DVector::from_element(1, s)],
    )
    .unwrap();
    // a point of the hyperplane a.x + b = 0
    let p = gaussian_vector(d, &mut r);
    let aa: f64 = a.iter().map(|v| v * v).sum();
    let t = (a.iter().zip(&p).map(|(u, v)| u * v).sum::<f64>() + b) / aa;
    let x: Vec<f64> = p.iter().zip(&a).map(|(pv, av)| pv - t * av).collect();
    let h = gaussian_vector(d, &mut r);
    let ah: f64 = a.iter().zip(&h).map(|(u, v)| u * v).sum();
    let oracle = Oracle::from_network(net, FeedbackMode::Raw).unwrap();
    let view = ScalarView::default_for(&oracle, 0);
    let measured = second_directional_derivative(&view, &x, &h, 1e-4, None).unwrap();
    (measured, g * (1.0 - s) * ah.abs())
}

/// Fresh queries spent by one derivative probe in a `d`-dimensional space.
pub fn probe_query_count(d: usize, seed: u64) -> u64 {
    let mut r = rng(seed);
    let a = gaussian_vector(d, &mut r);
    let net = PReluNetwork::new(
        vec![DMatrix::from_row_slice(1, d, &a), DMatrix::from_element(1, 1, 1.5)],
        vec![DVector::from_element(1, 0.0), DVector::from_element(1, 0.0)],
        vec![DVector::from_element(1, 0.3)],
    )
    .unwrap();
    let oracle = Oracle::from_network(net, FeedbackMode::Raw).unwrap();
    let view = ScalarView::default_for(&oracle, 0);
    let x = vec![0.0; d];
    let before = oracle.query_count();
    probe_directions(&view, &RecoveredPrefix::new(d), &x, &ProbeConfig::default(), &mut r).unwrap();
    oracle.query_count() - before
}

/// The sign rules give identical answers when their inputs are multiplied by
/// a positive constant.
pub fn sign_rules_scale_invariant(seed: u64) -> bool {
    let mut r = rng(seed);
    let d = 6;
    let a = gaussian_vector(d, &mut r);
    let net = PReluNetwork::new(
        vec![DMatrix::from_row_slice(1, d, &a), DMatrix::from_element(1, 1, -0.7)],
        vec![DVector::from_element(1, 0.0), DVector::from_element(1, 0.2)],
        vec![DVector::from_element(1, 0.4)],
    )
    .unwrap();
    let oracle = Oracle::from_network(net, FeedbackMode::Raw).unwrap();
    let view = ScalarView::default_for(&oracle, 0);
    let probe = probe_directions(&view, &RecoveredPrefix::new(d), &vec![0.0; d], &ProbeConfig::default(), &mut r).unwrap();
    let base = resolve_projection_signs(&probe).unwrap();
    let c = 2f64.powf(r.random_range(-8.0..8.0));
    let mut scaled = probe.clone();
    scaled.delta.iter_mut().for_each(|v| *v *= c);
    scaled.pair_delta.iter_mut().for_each(|v| *v *= c);
    scaled.noise_floor *= c;
    let projections_ok = resolve_projection_signs(&scaled).unwrap() == base;
    let (wp, wm) = (r.random_range(-2.0..2.0), r.random_range(-2.0..2.0));
    let independent_ok = match (decide_sign_slope_independent(wp, wm), decide_sign_slope_independent(c * wp, c * wm)) {
        (Ok((s1, k1)), Ok((s2, k2))) => s1 == s2 && (k1 - k2).abs() <= 1e-15,
        (Err(_), Err(_)) => true,
        _ => false,
    };
    let joint_ok = match (decide_sign_slope_joint(wp, wm), decide_sign_slope_joint(c * wp, c * wm)) {
        (Ok((s1, k1, w1)), Ok((s2, k2, w2))) => s1 == s2 && (k1 - k2).abs() <= 1e-15 && (c * w1 - w2).abs() <= 1e-15 * w2.abs(),
        (Err(_), Err(_)) => true,
        _ => false,
    };
    projections_ok && independent_ok && joint_ok
}

/// Runs extraction on an expansive architecture; returns whether it was
/// refused as expansive and the queries spent.
pub fn guard_refusal() -> (bool, u64) {
    let dims = [10, 30, 30, 1];
    let net = prelu_extract::random_network(&dims, (0.05, 0.95), 3).unwrap();
    let oracle = Oracle::from_network(net, FeedbackMode::Raw).unwrap();
    let refused = matches!(extract(&oracle, &dims, &AttackConfig::default()), Err(f) if matches!(f.error, AttackError::Expansive(_)));
    (refused, oracle.query_count())
}
