//! The attacker's partial model: fully recovered hidden layers plus, while a
//! workflow is in progress, one pending layer known only up to per-neuron
//! factors.

use nalgebra::{DMatrix, DVector};

use crate::network::{affine, prelu, PReluNetwork};

#[derive(Clone, Debug, PartialEq)]
pub struct CompleteLayer {
    pub weights: DMatrix<f64>,
    pub biases: DVector<f64>,
    pub slopes: DVector<f64>,
}

/// Rows known up to an unknown nonzero factor each (sign included).
#[derive(Clone, Debug, PartialEq)]
pub struct PendingLayer {
    pub weights: DMatrix<f64>,
    pub biases: DVector<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RecoveredPrefix {
    input_dim: usize,
    pub layers: Vec<CompleteLayer>,
    pub pending: Option<PendingLayer>,
}

impl RecoveredPrefix {
    pub fn new(input_dim: usize) -> Self {
        Self { input_dim, layers: Vec::new(), pending: None }
    }

    /// The true prefix of `net` through hidden layer `k` (tests and the
    /// true-prefix baseline).
    pub fn from_network(net: &PReluNetwork, k: usize) -> Self {
        let layers = (1..=k)
            .map(|l| CompleteLayer {
                weights: net.weight(l).clone(),
                biases: net.bias(l).clone(),
                slopes: net.slopes(l).clone(),
            })
            .collect();
        Self { input_dim: net.input_dim(), layers, pending: None }
    }

    pub fn input_dim(&self) -> usize {
        self.input_dim
    }

    /// Width of the complete part's output (`Z` space).
    pub fn complete_dim(&self) -> usize {
        self.layers.last().map_or(self.input_dim, |l| l.weights.nrows())
    }

    /// Dimension of [`RecoveredPrefix::output`].
    pub fn hidden_dim(&self) -> usize {
        match &self.pending {
            Some(p) => p.weights.nrows(),
            None => self.complete_dim(),
        }
    }

    /// Output of the complete layers, `sigma(...)` of the last one.
    pub fn complete_output(&self, x: &[f64]) -> Vec<f64> {
        let mut cur = x.to_vec();
        for l in &self.layers {
            let mut y = affine(&l.weights, &l.biases, &cur);
            for (v, &s) in y.iter_mut().zip(l.slopes.iter()) {
                *v = prelu(*v, s);
            }
            cur = y;
        }
        cur
    }

    /// The pending preactivation when a pending layer exists, otherwise the
    /// complete output.
    pub fn output(&self, x: &[f64]) -> Vec<f64> {
        let z = self.complete_output(x);
        match &self.pending {
            Some(p) => affine(&p.weights, &p.biases, &z),
            None => z,
        }
    }

    /// Every preactivation, complete layers first, then the pending one.
    pub fn preactivations(&self, x: &[f64]) -> Vec<Vec<f64>> {
        let mut out = Vec::new();
        let mut cur = x.to_vec();
        for l in &self.layers {
            let y = affine(&l.weights, &l.biases, &cur);
            cur = y.iter().zip(l.slopes.iter()).map(|(&v, &s)| prelu(v, s)).collect();
            out.push(y);
        }
        if let Some(p) = &self.pending {
            out.push(affine(&p.weights, &p.biases, &cur));
        }
        out
    }

    /// Smallest `|preactivation|` over all recovered neurons.
    pub fn min_abs_preactivation(&self, x: &[f64]) -> f64 {
        self.preactivations(x)
            .iter()
            .flat_map(|l| l.iter())
            .fold(f64::INFINITY, |m, v| m.min(v.abs()))
    }

    /// Sign pattern of every preactivation (`true` for non-negative).
    pub fn sign_pattern(&self, x: &[f64]) -> Vec<bool> {
        self.preactivations(x).iter().flat_map(|l| l.iter().map(|&v| v >= 0.0)).collect()
    }

    /// Jacobian of [`RecoveredPrefix::output`] with respect to `x` inside
    /// the linear region of `x`.
    pub fn jacobian(&self, x: &[f64]) -> DMatrix<f64> {
        let mut jac = DMatrix::<f64>::identity(self.input_dim, self.input_dim);
        let mut cur = x.to_vec();
        for l in &self.layers {
            let y = affine(&l.weights, &l.biases, &cur);
            let mut next = &l.weights * &jac;
            for (r, (&v, &s)) in y.iter().zip(l.slopes.iter()).enumerate() {
                if v < 0.0 {
                    next.row_mut(r).scale_mut(s);
                }
            }
            jac = next;
            cur = y.iter().zip(l.slopes.iter()).map(|(&v, &s)| prelu(v, s)).collect();
        }
        match &self.pending {
            Some(p) => &p.weights * jac,
            None => jac,
        }
    }

    /// Every preactivation at `x` paired with its gradient row, in the order
    /// of [`RecoveredPrefix::preactivations`].
    pub fn preactivation_gradients(&self, x: &[f64]) -> Vec<(f64, DMatrix<f64>)> {
        let mut out = Vec::new();
        let mut jac = DMatrix::<f64>::identity(self.input_dim, self.input_dim);
        let mut cur = x.to_vec();
        for l in &self.layers {
            let y = affine(&l.weights, &l.biases, &cur);
            let mut next = &l.weights * &jac;
            for (r, &v) in y.iter().enumerate() {
                out.push((v, next.rows(r, 1).clone_owned()));
            }
            for (r, (&v, &s)) in y.iter().zip(l.slopes.iter()).enumerate() {
                if v < 0.0 {
                    next.row_mut(r).scale_mut(s);
                }
            }
            jac = next;
            cur = y.iter().zip(l.slopes.iter()).map(|(&v, &s)| prelu(v, s)).collect();
        }
        if let Some(p) = &self.pending {
            let y = affine(&p.weights, &p.biases, &cur);
            let g = &p.weights * jac;
            for (r, &v) in y.iter().enumerate() {
                out.push((v, g.rows(r, 1).clone_owned()));
            }
        }
        out
    }

    /// Largest step `t` such that every recovered preactivation keeps its
    /// sign on `x + s d` for all `|s| <= t` and every `d` in `dirs`.
    pub fn safe_step(&self, x: &[f64], dirs: &[Vec<f64>]) -> f64 {
        let mut best = f64::INFINITY;
        for (v, g) in self.preactivation_gradients(x) {
            let rate = dirs
                .iter()
                .map(|d| g.iter().zip(d).map(|(a, b)| a * b).sum::<f64>().abs())
                .fold(0.0, f64::max);
            if rate > 0.0 {
                best = best.min(v.abs() / rate);
            }
        }
        best
    }

    /// Split features `[max(y, 0), min(y, 0)]` of the pending preactivation.
    pub fn split_features(&self, x: &[f64]) -> Vec<f64> {
        split_features(&self.output(x))
    }

    /// Appends a complete layer and clears the pending one.
    pub fn push_complete(&mut self, layer: CompleteLayer) {
        self.pending = None;
        self.layers.push(layer);
    }
}

pub fn split_features(y: &[f64]) -> Vec<f64> {
    let d = y.len();
    let mut phi = vec![0.0; 2 * d];
    for (j, &v) in y.iter().enumerate() {
        if v > 0.0 {
            phi[j] = v;
        } else {
            phi[j + d] = v;
        }
    }
    phi
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::network::random_network;

    #[test]
    fn true_prefix_matches_network() {
        let net = random_network(&[4, 3, 2, 1], (0.1, 0.9), 3).unwrap();
        let p = RecoveredPrefix::from_network(&net, 2);
        let x = [0.2, -0.4, 0.9, 0.1];
        assert_eq!(p.output(&x), net.hidden_output(&x, 2));
        assert_eq!(p.preactivations(&x), net.preactivations(&x));
        assert_eq!(p.hidden_dim(), 2);
    }

    #[test]
    fn jacobian_matches_finite_difference() {
        let net = random_network(&[4, 3, 3, 1], (0.1, 0.9), 4).unwrap();
        let mut p = RecoveredPrefix::from_network(&net, 1);
        p.pending = Some(PendingLayer { weights: net.weight(2).clone(), biases: net.bias(2).clone() });
        let x = [0.3, 0.1, -0.7, 0.5];
        let j = p.jacobian(&x);
        let h = 1e-7;
        for c in 0..4 {
            let mut xp = x;
            xp[c] += h;
            let d: Vec<f64> = p.output(&xp).iter().zip(p.output(&x)).map(|(a, b)| (a - b) / h).collect();
            for r in 0..3 {
                assert!((d[r] - j[(r, c)]).abs() < 1e-6);
            }
        }
        assert_eq!(p.preactivations(&x).len(), 2);
    }

    #[test]
    fn split_features_layout() {
        assert_eq!(split_features(&[2.0, -1.0]), vec![2.0, 0.0, 0.0, -1.0]);
    }
}
