//! Neuron-wiggle sign recovery (counting variant) and the joint method run
//! side by side in the true-prefix setting.
//!
//! The wiggle moves the previous layer's output along the target row, so the
//! target neuron responds as strongly as a unit perturbation allows, and
//! votes for the side whose output change is larger. On PReLU layers with
//! slopes near one both sides change by similar amounts and the rest of the
//! layer moves too, which is what makes the vote unreliable.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::critical_search::{steer_hidden, ProbeConfig};
use crate::error::{AttackError, Result};
use crate::linalg::{self, gaussian_vector};
use crate::network::PReluNetwork;
use crate::oracle::Oracle;
use crate::prefix::{CompleteLayer, PendingLayer, RecoveredPrefix};
use crate::refinement::model_crossing;
use crate::scores_adapter::{Scalar, ScalarView};
use crate::sign_slope::{decide_layer, merge_partials, partial_from_solution, ExtendedWeightVector};
use crate::weight_recovery::{probe_directions, recover_last_layer, resolve_projection_signs, solve_neuron};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WiggleTally {
    pub neuron: usize,
    pub plus: usize,
    pub minus: usize,
    pub sign: f64,
    pub correct: Option<bool>,
}

/// A point on the hyperplane of pending neuron `j` found by exact root
/// finding along a random line, away from every other known kink.
pub fn witness_on_pending<R: Rng + ?Sized>(
    prefix: &RecoveredPrefix,
    j: usize,
    radius: f64,
    rng: &mut R,
) -> Option<Vec<f64>> {
    let d0 = prefix.input_dim();
    for _ in 0..50 {
        let p: Vec<f64> = gaussian_vector(d0, rng).iter().map(|v| v * radius).collect();
        let u = gaussian_vector(d0, rng);
        let at = |t: f64| -> Vec<f64> { p.iter().zip(&u).map(|(a, b)| a + t * b).collect() };
        let Some(t) = model_crossing(&|t| prefix.output(&at(t))[j], 4.0 * radius) else {
            continue;
        };
        let x = at(t);
        let pre = prefix.preactivations(&x);
        let scale = linalg::norm(&x).max(1.0);
        let last = pre.len() - 1;
        let clear = pre.iter().enumerate().all(|(l, layer)| {
            layer.iter().enumerate().all(|(k, v)| (l == last && k == j) || v.abs() > 1e-6 * scale)
        });
        if clear && pre[last][j].abs() <= 1e-12 * scale {
            return Some(x);
        }
    }
    None
}

/// One vote at a witness of pending neuron `j`: `+1` when the output moves
/// more on the side where the pending row is positive.
pub fn wiggle_vote(f: &dyn Scalar, prefix: &RecoveredPrefix, x: &[f64], j: usize, eps: f64) -> Result<f64> {
    let row: Vec<f64> = prefix.pending.as_ref().expect("pending layer").weights.row(j).iter().copied().collect();
    let n = linalg::norm(&row);
    let h: Vec<f64> = row.iter().map(|v| eps * v / n).collect();
    let mut complete = prefix.clone();
    complete.pending = None;
    let dx = steer_hidden(&complete, x, &h)?;
    let fx = f.value(x)?;
    let plus: Vec<f64> = x.iter().zip(&dx).map(|(a, b)| a + b).collect();
    let minus: Vec<f64> = x.iter().zip(&dx).map(|(a, b)| a - b).collect();
    let dp = (f.value(&plus)? - fx).abs();
    let dm = (f.value(&minus)? - fx).abs();
    Ok(if dp > dm { 1.0 } else { -1.0 })
}

/// Majority vote over `witnesses` fresh witnesses per pending neuron.
pub fn wiggle_sign<R: Rng + ?Sized>(
    f: &dyn Scalar,
    prefix: &RecoveredPrefix,
    j: usize,
    witnesses: usize,
    radius: f64,
    rng: &mut R,
) -> Result<WiggleTally> {
    let mut tally = WiggleTally { neuron: j, plus: 0, minus: 0, sign: 0.0, correct: None };
    let mut misses = 0;
    while tally.plus + tally.minus < witnesses {
        let Some(x) = witness_on_pending(prefix, j, radius, rng) else {
            misses += 1;
            if misses > witnesses {
                return Err(AttackError::InsufficientWitnesses(format!("neuron {j}: no crossings")));
            }
            continue;
        };
        let eps = 1e-6 * linalg::norm(&x).max(1.0);
        if wiggle_vote(f, prefix, &x, j, eps)? > 0.0 {
            tally.plus += 1;
        } else {
            tally.minus += 1;
        }
    }
    tally.sign = if tally.plus >= tally.minus { 1.0 } else { -1.0 };
    Ok(tally)
}

/// Signs and slopes of the pending layer read off next-layer extended
/// vectors. `model` places the next-layer witnesses: its pending layer is the
/// next layer over the true activations of the current one.
pub fn joint_signs_via_next_layer<R: Rng + ?Sized>(
    f: &dyn Scalar,
    prefix: &RecoveredPrefix,
    model: &RecoveredPrefix,
    per_neuron: usize,
    radius: f64,
    cfg: &ProbeConfig,
    rng: &mut R,
) -> Result<Vec<Option<(f64, f64)>>> {
    let d_next = model.hidden_dim();
    let mut partials = Vec::new();
    for k in 0..d_next {
        let mut found = 0;
        let mut tries = 0;
        while found < per_neuron && tries < 20 * per_neuron {
            tries += 1;
            let Some(x) = witness_on_pending(model, k, radius, rng) else { continue };
            let probe = match probe_directions(f, prefix, &x, cfg, rng) {
                Ok(p) => p,
                Err(AttackError::WitnessRejected(_)) => continue,
                Err(e) => return Err(e),
            };
            let Ok(signs) = resolve_projection_signs(&probe) else { continue };
            let n = solve_neuron(&probe, &signs, 0)?;
            partials.push(partial_from_solution(&n.weights, n.bias, &prefix.output(&x)));
            found += 1;
        }
    }
    let merged = merge_partials(&partials, d_next, 1e-6)?;
    decide_layer(&merged)
}

/// Signs and slopes of the pending (last hidden) layer from the output
/// regression over its split features.
pub fn joint_signs_via_output<R: Rng + ?Sized>(
    oracle: &Oracle,
    prefix: &RecoveredPrefix,
    radius: f64,
    rng: &mut R,
) -> Result<Vec<Option<(f64, f64)>>> {
    let d = prefix.hidden_dim();
    let last = recover_last_layer(oracle, &|x| prefix.split_features(x), 2 * d, 0, radius, rng)?;
    let rows: Vec<ExtendedWeightVector> = (0..last.weights.nrows())
        .map(|r| ExtendedWeightVector {
            values: last.weights.row(r).iter().map(|&v| Some(v)).collect(),
            bias: last.bias[r],
            members: 1,
        })
        .collect();
    decide_layer(&rows)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SignComparison {
    pub wiggle: Vec<WiggleTally>,
    pub wiggle_errors: usize,
    /// Errors of the joint method per hidden layer (first, second).
    pub joint_errors: Vec<usize>,
    pub joint_decided: Vec<usize>,
    pub queries: u64,
}

/// Flips and rescales the rows of hidden layer `k` of `net` by random
/// factors; returns the rows and the factor signs (the ground truth a sign
/// recovery must reproduce).
pub fn disguised_rows<R: Rng + ?Sized>(net: &PReluNetwork, k: usize, rng: &mut R) -> (PendingLayer, Vec<f64>) {
    let mut w = net.weight(k).clone();
    let mut b = net.bias(k).clone();
    let mut signs = Vec::with_capacity(w.nrows());
    for r in 0..w.nrows() {
        let s = if rng.random_bool(0.5) { 1.0 } else { -1.0 };
        let c = s * rng.random_range(0.5..2.0);
        w.row_mut(r).scale_mut(c);
        b[r] *= c;
        signs.push(s);
    }
    (PendingLayer { weights: w, biases: b }, signs)
}

/// Layer-2 wiggle votes against the joint method on a two-hidden-layer
/// network, with every earlier layer known exactly.
pub fn compare_on_network<R: Rng + ?Sized>(
    net: &PReluNetwork,
    witnesses: usize,
    radius: f64,
    rng: &mut R,
) -> Result<SignComparison> {
    if net.depth() != 2 || net.output_dim() != 1 {
        return Err(AttackError::Config("comparison needs a d0-d1-d2-1 network".into()));
    }
    let oracle = Oracle::from_network(net.clone(), crate::oracle::FeedbackMode::Raw)?;
    let f = ScalarView::default_for(&oracle, 0);
    let cfg = ProbeConfig::default();
    let layer1 = CompleteLayer { weights: net.weight(1).clone(), biases: net.bias(1).clone(), slopes: net.slopes(1).clone() };

    // wiggle on layer 2
    let (rows2, signs2) = disguised_rows(net, 2, rng);
    let mut prefix2 = RecoveredPrefix::new(net.input_dim());
    prefix2.layers.push(layer1.clone());
    prefix2.pending = Some(rows2);
    let mut wiggle = Vec::new();
    for j in 0..net.dims()[2] {
        let mut t = wiggle_sign(&f, &prefix2, j, witnesses, radius, rng)?;
        t.correct = Some(t.sign == signs2[j]);
        wiggle.push(t);
    }
    let wiggle_errors = wiggle.iter().filter(|t| t.correct == Some(false)).count();

    // joint, layer 1: extended vectors of layer-2 neurons over split layer 1
    let (rows1, signs1) = disguised_rows(net, 1, rng);
    let mut prefix1 = RecoveredPrefix::new(net.input_dim());
    prefix1.pending = Some(rows1);
    let mut model = RecoveredPrefix::from_network(net, 1);
    model.pending = Some(PendingLayer { weights: net.weight(2).clone(), biases: net.bias(2).clone() });
    let dec1 = joint_signs_via_next_layer(&f, &prefix1, &model, 8, radius, &cfg, rng)?;

    // joint, layer 2: output regression over split layer 2
    let (rows2j, signs2j) = disguised_rows(net, 2, rng);
    let mut prefix2j = RecoveredPrefix::new(net.input_dim());
    prefix2j.layers.push(layer1);
    prefix2j.pending = Some(rows2j);
    let dec2 = joint_signs_via_output(&oracle, &prefix2j, radius, rng)?;

    let count = |dec: &[Option<(f64, f64)>], truth: &[f64]| -> (usize, usize) {
        let decided = dec.iter().filter(|d| d.is_some()).count();
        let errors = dec.iter().zip(truth).filter(|(d, &t)| d.is_none_or(|(s, _)| s != t)).count();
        (errors, decided)
    };
    let (e1, n1) = count(&dec1, &signs1);
    let (e2, n2) = count(&dec2, &signs2j);
    Ok(SignComparison {
        wiggle,
        wiggle_errors,
        joint_errors: vec![e1, e2],
        joint_decided: vec![n1, n2],
        queries: oracle.query_count(),
    })
}
