//! Shared fixtures for the benchmarks.

use prelu_extract::{random_network, Oracle, PReluNetwork};
use prelu_extract::FeedbackMode;

/// Slope range used by every fixture.
pub const SLOPES: (f64, f64) = (0.05, 0.95);

pub fn network(dims: &[usize], seed: u64) -> PReluNetwork {
    random_network(dims, SLOPES, seed).expect("valid fixture architecture")
}

pub fn raw_oracle(net: &PReluNetwork) -> Oracle {
    Oracle::from_network(net.clone(), FeedbackMode::Raw).expect("raw feedback always valid")
}

/// A point on the hyperplane of first-layer neuron `j`, found by moving the
/// origin along the neuron's normal.
pub fn critical_point(net: &PReluNetwork, j: usize) -> Vec<f64> {
    let w = net.weight(1).row(j).transpose();
    let b = net.bias(1)[j];
    let t = -b / w.norm_squared();
    w.iter().map(|v| t * v).collect()
}
