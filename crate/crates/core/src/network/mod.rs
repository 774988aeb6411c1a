//! Exact PReLU fully-connected networks.
//!
//! Layers are numbered the usual way: `1..=n` are hidden (affine map followed
//! by a PReLU), `n + 1` is the final affine map. Neuron indices are 0-based.

mod io;
mod split;

pub use io::{read_model, read_model_file, write_model, write_model_file, MODEL_HEADER};
pub use split::SplitNetwork;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;

use crate::error::NetworkError;

/// PReLU: identity on the non-negative half-line, `slope * x` below it.
#[inline]
pub fn prelu(x: f64, slope: f64) -> f64 {
    if x >= 0.0 {
        x
    } else {
        slope * x
    }
}

/// Sign pattern of every hidden preactivation: `+1`, `-1`, or `0` at an exact
/// critical input.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ActivationState {
    pub layers: Vec<Vec<i8>>,
}

impl ActivationState {
    /// Diagonal multipliers `tau` for hidden layer `k` (1-based).
    pub fn multipliers(&self, net: &PReluNetwork, k: usize) -> Vec<f64> {
        self.layers[k - 1]
            .iter()
            .zip(net.slopes(k).iter())
            .map(|(&s, &slope)| if s >= 0 { 1.0 } else { slope })
            .collect()
    }
}

/// Coefficients of the affine map from the post-activation values of hidden
/// layer `layer` to one output coordinate, valid inside the linear region of
/// the point it was computed at.
#[derive(Clone, Debug, PartialEq)]
pub struct LocalAffineView {
    pub layer: usize,
    pub coefficients: Vec<f64>,
    pub offset: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PReluNetwork {
    dims: Vec<usize>,
    weights: Vec<DMatrix<f64>>,
    biases: Vec<DVector<f64>>,
    slopes: Vec<DVector<f64>>,
}

impl PReluNetwork {
    /// Builds a network from per-layer parameters. `weights` and `biases`
    /// have one entry per affine layer, `slopes` one per hidden layer.
    pub fn new(
        weights: Vec<DMatrix<f64>>,
        biases: Vec<DVector<f64>>,
        slopes: Vec<DVector<f64>>,
    ) -> Result<Self, NetworkError> {
        if weights.is_empty() {
            return Err(NetworkError::Degenerate("no layers".into()));
        }
        if biases.len() != weights.len() {
            return Err(NetworkError::Shape {
                layer: biases.len().min(weights.len()) + 1,
                what: format!("{} weight matrices but {} bias vectors", weights.len(), biases.len()),
            });
        }
        if slopes.len() + 1 != weights.len() {
            return Err(NetworkError::Shape {
                layer: slopes.len() + 1,
                what: format!("{} affine layers need {} slope vectors, got {}", weights.len(), weights.len() - 1, slopes.len()),
            });
        }
        let mut dims = vec![weights[0].ncols()];
        for (k, w) in weights.iter().enumerate() {
            let layer = k + 1;
            if w.ncols() != dims[k] {
                return Err(NetworkError::Shape {
                    layer,
                    what: format!("weight matrix has {} columns, previous width is {}", w.ncols(), dims[k]),
                });
            }
            if biases[k].len() != w.nrows() {
                return Err(NetworkError::Shape {
                    layer,
                    what: format!("bias has length {}, layer width is {}", biases[k].len(), w.nrows()),
                });
            }
            if k < slopes.len() && slopes[k].len() != w.nrows() {
                return Err(NetworkError::Shape {
                    layer,
                    what: format!("slopes have length {}, layer width is {}", slopes[k].len(), w.nrows()),
                });
            }
            if w.iter().chain(biases[k].iter()).any(|v| !v.is_finite()) {
                return Err(NetworkError::NonFinite(format!("layer {layer} parameters")));
            }
            if k < slopes.len() && slopes[k].iter().any(|v| !v.is_finite()) {
                return Err(NetworkError::NonFinite(format!("layer {layer} slopes")));
            }
            dims.push(w.nrows());
        }
        Ok(Self { dims, weights, biases, slopes })
    }

    /// Architecture `d_0 .. d_{n+1}`.
    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    /// Number of hidden layers `n`.
    pub fn depth(&self) -> usize {
        self.weights.len() - 1
    }

    pub fn input_dim(&self) -> usize {
        self.dims[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.dims.last().unwrap()
    }

    /// Weight matrix of affine layer `k` in `1..=n+1`.
    pub fn weight(&self, k: usize) -> &DMatrix<f64> {
        &self.weights[k - 1]
    }

    pub fn bias(&self, k: usize) -> &DVector<f64> {
        &self.biases[k - 1]
    }

    /// Slopes of hidden layer `k` in `1..=n`.
    pub fn slopes(&self, k: usize) -> &DVector<f64> {
        &self.slopes[k - 1]
    }

    pub fn weights(&self) -> &[DMatrix<f64>] {
        &self.weights
    }

    pub fn biases(&self) -> &[DVector<f64>] {
        &self.biases
    }

    pub fn all_slopes(&self) -> &[DVector<f64>] {
        &self.slopes
    }

    pub fn into_parts(self) -> (Vec<DMatrix<f64>>, Vec<DVector<f64>>, Vec<DVector<f64>>) {
        (self.weights, self.biases, self.slopes)
    }

    /// Total count of weights, biases and slopes.
    pub fn parameter_count(&self) -> usize {
        parameter_count(&self.dims)
    }

    /// Hidden layers whose slopes leave `(0, 1)`. Imported models may carry
    /// these; they are reported, not rejected.
    pub fn slopes_outside_unit_interval(&self) -> Vec<(usize, usize)> {
        let mut out = Vec::new();
        for (k, s) in self.slopes.iter().enumerate() {
            for (j, &v) in s.iter().enumerate() {
                if !(v > 0.0 && v < 1.0) {
                    out.push((k + 1, j));
                }
            }
        }
        out
    }

    fn check_input(&self, x: &[f64]) -> Result<(), NetworkError> {
        if x.len() != self.dims[0] {
            return Err(NetworkError::InputLength { got: x.len(), expected: self.dims[0] });
        }
        if x.iter().any(|v| !v.is_finite()) {
            return Err(NetworkError::NonFinite("input".into()));
        }
        Ok(())
    }

    /// Evaluates the network and records every hidden preactivation sign.
    pub fn forward(&self, x: &[f64]) -> Result<(Vec<f64>, ActivationState), NetworkError> {
        self.check_input(x)?;
        let mut layers = Vec::with_capacity(self.depth());
        let out = self.run(x, |signs| layers.push(signs));
        Ok((out, ActivationState { layers }))
    }

    /// Evaluates the network without recording the activation state.
    ///
    /// Panics if `x` has the wrong length; callers validate first.
    pub fn eval(&self, x: &[f64]) -> Vec<f64> {
        assert_eq!(x.len(), self.dims[0], "input length");
        self.run(x, |_| {})
    }

    fn run(&self, x: &[f64], mut record: impl FnMut(Vec<i8>)) -> Vec<f64> {
        let mut cur: Vec<f64> = x.to_vec();
        for k in 0..self.weights.len() {
            let mut next = affine(&self.weights[k], &self.biases[k], &cur);
            if k < self.slopes.len() {
                let slopes = &self.slopes[k];
                record(next.iter().map(|&y| sign_of(y)).collect());
                for (y, &s) in next.iter_mut().zip(slopes.iter()) {
                    *y = prelu(*y, s);
                }
            }
            cur = next;
        }
        cur
    }

    /// Preactivations of every hidden layer at `x`.
    pub fn preactivations(&self, x: &[f64]) -> Vec<Vec<f64>> {
        let mut out = Vec::with_capacity(self.depth());
        let mut cur: Vec<f64> = x.to_vec();
        for k in 0..self.slopes.len() {
            let mut y = affine(&self.weights[k], &self.biases[k], &cur);
            out.push(y.clone());
            for (v, &s) in y.iter_mut().zip(self.slopes[k].iter()) {
                *v = prelu(*v, s);
            }
            cur = y;
        }
        out
    }

    /// Post-activation output of hidden layer `k` (`k = 0` returns `x`).
    pub fn hidden_output(&self, x: &[f64], k: usize) -> Vec<f64> {
        let mut cur: Vec<f64> = x.to_vec();
        for l in 0..k {
            let mut y = affine(&self.weights[l], &self.biases[l], &cur);
            for (v, &s) in y.iter_mut().zip(self.slopes[l].iter()) {
                *v = prelu(*v, s);
            }
            cur = y;
        }
        cur
    }

    /// The affine map `G * sigma_layer(Y) + U` to output coordinate `output`
    /// inside the linear region of `x`.
    pub fn local_affine_view(
        &self,
        x: &[f64],
        layer: usize,
        output: usize,
    ) -> Result<LocalAffineView, NetworkError> {
        self.check_input(x)?;
        let n = self.depth();
        if layer == 0 || layer > n {
            return Err(NetworkError::LayerOutOfRange { layer, max: n });
        }
        let (out, state) = self.forward(x)?;
        let mut row: Vec<f64> = self.weights[n].row(output).iter().copied().collect();
        for k in (layer + 1..=n).rev() {
            let tau = state.multipliers(self, k);
            let scaled: Vec<f64> = row.iter().zip(tau.iter()).map(|(a, t)| a * t).collect();
            let w = &self.weights[k - 1];
            row = (0..w.ncols())
                .map(|c| (0..w.nrows()).map(|r| scaled[r] * w[(r, c)]).sum())
                .collect();
        }
        let post = self.hidden_output(x, layer);
        let lin: f64 = row.iter().zip(post.iter()).map(|(g, z)| g * z).sum();
        Ok(LocalAffineView { layer, coefficients: row, offset: out[output] - lin })
    }

    fn check_hidden_layer(&self, k: usize) -> Result<(), NetworkError> {
        let n = self.depth();
        if k == 0 || k > n {
            return Err(NetworkError::LayerOutOfRange { layer: k, max: n });
        }
        Ok(())
    }

    /// Scales neuron `neuron` of hidden layer `k` by `c > 0`: incoming row and
    /// bias times `c`, outgoing column divided by `c`.
    pub fn scale_neuron(&self, k: usize, neuron: usize, c: f64) -> Result<Self, NetworkError> {
        self.check_hidden_layer(k)?;
        if !(c > 0.0) || !c.is_finite() {
            return Err(NetworkError::NonPositiveScale(c));
        }
        let width = self.dims[k];
        if neuron >= width {
            return Err(NetworkError::NeuronOutOfRange { layer: k, neuron, width });
        }
        let mut out = self.clone();
        out.weights[k - 1].row_mut(neuron).scale_mut(c);
        out.biases[k - 1][neuron] *= c;
        out.weights[k].column_mut(neuron).unscale_mut(c);
        Ok(out)
    }

    /// Reorders hidden layer `k`: new neuron `j` is old neuron `perm[j]`.
    pub fn permute_layer(&self, k: usize, perm: &[usize]) -> Result<Self, NetworkError> {
        self.check_hidden_layer(k)?;
        let width = self.dims[k];
        if !is_permutation(perm, width) {
            return Err(NetworkError::NotAPermutation(width));
        }
        let mut out = self.clone();
        let w = &self.weights[k - 1];
        let next = &self.weights[k];
        for (new, &old) in perm.iter().enumerate() {
            out.weights[k - 1].set_row(new, &w.row(old));
            out.biases[k - 1][new] = self.biases[k - 1][old];
            out.slopes[k - 1][new] = self.slopes[k - 1][old];
            out.weights[k].set_column(new, &next.column(old));
        }
        Ok(out)
    }

    /// Doubles hidden layer `i` into max/min twins; see [`SplitNetwork`].
    pub fn split_layer(&self, i: usize) -> Result<SplitNetwork, NetworkError> {
        self.check_hidden_layer(i)?;
        Ok(SplitNetwork::from_network(self, i))
    }

    /// Subtracts output row `pivot` (and its bias) from every output row, so
    /// coordinate `j` of the result is `y_j - y_pivot` and coordinate `pivot`
    /// is identically zero.
    pub fn fuse_outputs(&self, pivot: usize) -> Result<Self, NetworkError> {
        let d_out = self.output_dim();
        if d_out < 2 {
            return Err(NetworkError::SingleOutput);
        }
        let n = self.depth();
        if pivot >= d_out {
            return Err(NetworkError::NeuronOutOfRange { layer: n + 1, neuron: pivot, width: d_out });
        }
        let mut out = self.clone();
        let prow = self.weights[n].row(pivot).clone_owned();
        let pb = self.biases[n][pivot];
        for j in 0..d_out {
            let r = out.weights[n].row(j) - &prow;
            out.weights[n].set_row(j, &r);
            out.biases[n][j] -= pb;
        }
        Ok(out)
    }
}

/// `sum_k d_k (d_{k-1} + 1) + sum_{hidden k} d_k`.
pub fn parameter_count(dims: &[usize]) -> usize {
    let affine: usize = dims.windows(2).map(|w| w[1] * (w[0] + 1)).sum();
    let slopes: usize = dims[1..dims.len().saturating_sub(1)].iter().sum();
    affine + slopes
}

/// Generates a network with weights and biases i.i.d. uniform in
/// `[-1, 1] / sqrt(d_{k-1})` and slopes uniform in `slope_range`.
pub fn random_network(
    dims: &[usize],
    slope_range: (f64, f64),
    seed: u64,
) -> Result<PReluNetwork, NetworkError> {
    let (lo, hi) = slope_range;
    if !(0.0 < lo && lo < hi && hi <= 1.0) {
        return Err(NetworkError::SlopeRange { lo, hi });
    }
    if dims.len() < 2 || dims.contains(&0) {
        return Err(NetworkError::Degenerate(format!("dims {dims:?}")));
    }
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let mut weights = Vec::new();
    let mut biases = Vec::new();
    let mut slopes = Vec::new();
    for k in 1..dims.len() {
        let scale = 1.0 / (dims[k - 1] as f64).sqrt();
        let w = DMatrix::from_fn(dims[k], dims[k - 1], |_, _| rng.random_range(-1.0..1.0) * scale);
        let b = DVector::from_fn(dims[k], |_, _| rng.random_range(-1.0..1.0) * scale);
        weights.push(w);
        biases.push(b);
        if k + 1 < dims.len() {
            slopes.push(DVector::from_fn(dims[k], |_, _| {
                let mut s = rng.random_range(lo..hi);
                while s <= lo {
                    s = rng.random_range(lo..hi);
                }
                s
            }));
        }
    }
    PReluNetwork::new(weights, biases, slopes)
}

/// Parses `"32-16-1"` style architecture strings.
pub fn parse_dims(s: &str) -> Result<Vec<usize>, NetworkError> {
    let dims: Result<Vec<usize>, _> = s.split('-').map(|p| p.trim().parse::<usize>()).collect();
    let dims = dims.map_err(|e| NetworkError::Degenerate(format!("`{s}`: {e}")))?;
    if dims.len() < 2 || dims.contains(&0) {
        return Err(NetworkError::Degenerate(format!("`{s}`")));
    }
    Ok(dims)
}

pub fn format_dims(dims: &[usize]) -> String {
    dims.iter().map(|d| d.to_string()).collect::<Vec<_>>().join("-")
}

pub(crate) fn affine(w: &DMatrix<f64>, b: &DVector<f64>, x: &[f64]) -> Vec<f64> {
    let (rows, cols) = w.shape();
    let mut out: Vec<f64> = b.iter().copied().collect();
    // column-major storage: accumulate column by column
    for c in 0..cols {
        let xc = x[c];
        let col = w.column(c);
        for r in 0..rows {
            out[r] += col[r] * xc;
        }
    }
    out
}

#[inline]
fn sign_of(y: f64) -> i8 {
    if y > 0.0 {
        1
    } else if y < 0.0 {
        -1
    } else {
        0
    }
}

pub(crate) fn is_permutation(perm: &[usize], n: usize) -> bool {
    if perm.len() != n {
        return false;
    }
    let mut seen = vec![false; n];
    for &p in perm {
        if p >= n || seen[p] {
            return false;
        }
        seen[p] = true;
    }
    true
}
