use nalgebra::{DMatrix, DVector};

use super::{affine, prelu, PReluNetwork};

/// A network whose hidden layer `split` has been doubled: neuron `j` keeps
/// its incoming weights and applies `max(y, 0)`, twin `j + d` copies the same
/// incoming weights and applies `min(y, 0)`. The twin's outgoing weight into
/// the next layer is `s_j * a_{k,j}`, so the function is unchanged.
#[derive(Clone, Debug, PartialEq)]
pub struct SplitNetwork {
    split: usize,
    weights: Vec<DMatrix<f64>>,
    biases: Vec<DVector<f64>>,
    slopes: Vec<DVector<f64>>,
}

impl SplitNetwork {
    pub(super) fn from_network(net: &PReluNetwork, split: usize) -> Self {
        let mut weights = net.weights.clone();
        let mut biases = net.biases.clone();
        let d = net.dims[split];
        let a = &net.weights[split - 1];
        let mut doubled = DMatrix::zeros(2 * d, a.ncols());
        doubled.rows_mut(0, d).copy_from(a);
        doubled.rows_mut(d, d).copy_from(a);
        weights[split - 1] = doubled;
        let b = &net.biases[split - 1];
        biases[split - 1] = DVector::from_fn(2 * d, |r, _| b[r % d]);
        let next = &net.weights[split];
        let s = &net.slopes[split - 1];
        weights[split] = DMatrix::from_fn(next.nrows(), 2 * d, |r, c| {
            if c < d {
                next[(r, c)]
            } else {
                s[c - d] * next[(r, c - d)]
            }
        });
        Self { split, weights, biases, slopes: net.slopes.clone() }
    }

    /// The doubled hidden layer.
    pub fn split_layer(&self) -> usize {
        self.split
    }

    pub fn dims(&self) -> Vec<usize> {
        let mut dims = vec![self.weights[0].ncols()];
        dims.extend(self.weights.iter().map(|w| w.nrows()));
        dims
    }

    pub fn weight(&self, k: usize) -> &DMatrix<f64> {
        &self.weights[k - 1]
    }

    pub fn bias(&self, k: usize) -> &DVector<f64> {
        &self.biases[k - 1]
    }

    pub fn eval(&self, x: &[f64]) -> Vec<f64> {
        let mut cur: Vec<f64> = x.to_vec();
        let hidden = self.weights.len() - 1;
        for k in 0..self.weights.len() {
            let mut next = affine(&self.weights[k], &self.biases[k], &cur);
            if k < hidden {
                if k + 1 == self.split {
                    let d = next.len() / 2;
                    for (r, y) in next.iter_mut().enumerate() {
                        *y = if r < d { y.max(0.0) } else { y.min(0.0) };
                    }
                } else {
                    for (y, &s) in next.iter_mut().zip(self.slopes[k].iter()) {
                        *y = prelu(*y, s);
                    }
                }
            }
            cur = next;
        }
        cur
    }
}
