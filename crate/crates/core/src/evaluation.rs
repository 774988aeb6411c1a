//! Extraction quality: alignment, empirical equivalence and propagated
//! error bounds.

use std::collections::BTreeMap;

use pathfinding::kuhn_munkres::kuhn_munkres;
use pathfinding::matrix::Matrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};

use crate::error::NetworkError;
use crate::linalg;
use crate::network::PReluNetwork;

/// Widths up to this use optimal assignment; wider layers match greedily.
pub const OPTIMAL_MATCHING_LIMIT: usize = 256;

#[derive(Clone, Debug, PartialEq)]
pub struct Alignment {
    pub net: PReluNetwork,
    /// Per hidden layer: recovered neuron matched to each true neuron.
    pub permutations: Vec<Vec<usize>>,
    /// Per hidden layer: positive factor applied to each aligned neuron.
    pub scales: Vec<Vec<f64>>,
    /// Some true neuron had two candidates within `1e-6` in |cosine|.
    pub ambiguous: bool,
}

fn rows_with_bias(net: &PReluNetwork, k: usize) -> Vec<Vec<f64>> {
    let w = net.weight(k);
    (0..w.nrows())
        .map(|r| w.row(r).iter().copied().chain(std::iter::once(net.bias(k)[r])).collect())
        .collect()
}

fn abs_cos(a: &[f64], b: &[f64]) -> f64 {
    let n = linalg::norm(a) * linalg::norm(b);
    if n == 0.0 {
        0.0
    } else {
        (linalg::dot(a, b) / n).abs()
    }
}

/// `perm[t]` is the candidate matched to target `t`, maximizing total
/// |cosine|.
fn assign(sim: &[Vec<f64>]) -> Vec<usize> {
    let n = sim.len();
    if n <= OPTIMAL_MATCHING_LIMIT {
        let m = Matrix::from_fn(n, n, |(r, c)| (sim[r][c] * 1e12).round() as i64);
        return kuhn_munkres(&m).1;
    }
    let mut pairs: Vec<(usize, usize)> = (0..n).flat_map(|r| (0..n).map(move |c| (r, c))).collect();
    pairs.sort_by(|a, b| sim[b.0][b.1].total_cmp(&sim[a.0][a.1]).then(a.cmp(b)));
    let mut perm = vec![usize::MAX; n];
    let mut used = vec![false; n];
    for (r, c) in pairs {
        if perm[r] == usize::MAX && !used[c] {
            perm[r] = c;
            used[c] = true;
        }
    }
    perm
}

/// Permutes and rescales the hidden neurons of `recovered` onto `truth`,
/// layer by layer. Each scale is the positive least-squares factor between
/// the matched rows (bias included); it is pushed into the next layer, so
/// the recovered function is unchanged.
pub fn align(truth: &PReluNetwork, recovered: &PReluNetwork) -> Result<Alignment, NetworkError> {
    if truth.dims() != recovered.dims() {
        return Err(NetworkError::Shape { layer: 0, what: "architectures differ".into() });
    }
    let mut net = recovered.clone();
    let mut permutations = Vec::new();
    let mut scales = Vec::new();
    let mut ambiguous = false;
    for k in 1..=truth.depth() {
        let t = rows_with_bias(truth, k);
        let r = rows_with_bias(&net, k);
        let sim: Vec<Vec<f64>> = t.iter().map(|a| r.iter().map(|b| abs_cos(a, b)).collect()).collect();
        for row in &sim {
            let mut s = row.clone();
            s.sort_by(|a, b| b.total_cmp(a));
            if s.len() > 1 && s[0] - s[1] < 1e-6 {
                ambiguous = true;
            }
        }
        let perm = assign(&sim);
        net = net.permute_layer(k, &perm)?;
        let r = rows_with_bias(&net, k);
        let mut layer_scales = Vec::with_capacity(t.len());
        for (j, (a, b)) in t.iter().zip(&r).enumerate() {
            let ls = linalg::dot(a, b) / linalg::dot(b, b);
            let c = if ls > 0.0 && ls.is_finite() { ls } else { linalg::norm(a) / linalg::norm(b) };
            let c = if c > 0.0 && c.is_finite() { c } else { 1.0 };
            net = net.scale_neuron(k, j, c)?;
            layer_scales.push(c);
        }
        permutations.push(perm);
        scales.push(layer_scales);
    }
    Ok(Alignment { net, permutations, scales, ambiguous })
}

/// Largest absolute difference over every weight, bias and slope.
pub fn max_parameter_error(a: &PReluNetwork, b: &PReluNetwork) -> f64 {
    let mut m = 0.0f64;
    for k in 1..=a.depth() + 1 {
        m = m.max((a.weight(k) - b.weight(k)).amax());
        m = m.max((a.bias(k) - b.bias(k)).amax());
        if k <= a.depth() {
            m = m.max((a.slopes(k) - b.slopes(k)).amax());
        }
    }
    m
}

/// Largest slope difference in each hidden layer.
pub fn slope_errors(a: &PReluNetwork, b: &PReluNetwork) -> Vec<f64> {
    (1..=a.depth()).map(|k| (a.slopes(k) - b.slopes(k)).amax()).collect()
}

/// Uniform samples from `[lo, hi]^d`, reproducible from `seed`.
pub fn sample_box(d: usize, domain: (f64, f64), n: usize, seed: u64) -> Vec<Vec<f64>> {
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    (0..n).map(|_| (0..d).map(|_| rng.random_range(domain.0..=domain.1)).collect()).collect()
}

/// `max |f(x) - g(x)|` over the samples, all output coordinates.
pub fn empirical_equivalence(
    f: &dyn Fn(&[f64]) -> Vec<f64>,
    g: &dyn Fn(&[f64]) -> Vec<f64>,
    samples: &[Vec<f64>],
) -> f64 {
    samples
        .iter()
        .map(|x| f(x).iter().zip(g(x)).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max))
        .fold(0.0, f64::max)
}

/// Network comparison over `n` uniform samples of the box.
pub fn network_equivalence(a: &PReluNetwork, b: &PReluNetwork, domain: (f64, f64), n: usize, seed: u64) -> f64 {
    let samples = sample_box(a.input_dim(), domain, n, seed);
    empirical_equivalence(&|x| a.eval(x), &|x| b.eval(x), &samples)
}

/// Sound bound on `|truth(x) - recovered(x)|` over the box. True
/// preactivation magnitudes come from interval propagation; the error of each
/// layer follows from the parameter deltas and the incoming error, with
/// `|s a - s' a'| <= max(1, s') |a - a'| + |s - s'| |a|` on the negative side.
pub fn propagate_bounds(truth: &PReluNetwork, recovered: &PReluNetwork, domain: (f64, f64)) -> f64 {
    let d0 = truth.input_dim();
    let mut lo = vec![domain.0; d0];
    let mut hi = vec![domain.1; d0];
    let mut err = vec![0.0; d0];
    for k in 1..=truth.depth() + 1 {
        let (w, b) = (truth.weight(k), truth.bias(k));
        let (wr, br) = (recovered.weight(k), recovered.bias(k));
        let mag: Vec<f64> = lo.iter().zip(&hi).map(|(l, h)| l.abs().max(h.abs())).collect();
        let rows = w.nrows();
        let mut nlo = vec![0.0; rows];
        let mut nhi = vec![0.0; rows];
        let mut nerr = vec![0.0; rows];
        for r in 0..rows {
            let (mut l, mut h) = (b[r], b[r]);
            let mut e = (b[r] - br[r]).abs();
            for c in 0..w.ncols() {
                let a = w[(r, c)];
                if a >= 0.0 {
                    l += a * lo[c];
                    h += a * hi[c];
                } else {
                    l += a * hi[c];
                    h += a * lo[c];
                }
                e += wr[(r, c)].abs() * err[c] + (a - wr[(r, c)]).abs() * mag[c];
            }
            if k <= truth.depth() {
                let (s, sr) = (truth.slopes(k)[r], recovered.slopes(k)[r]);
                let amax = l.abs().max(h.abs());
                e = sr.abs().max(1.0) * e + (s - sr).abs() * amax;
                let act = |v: f64| if v >= 0.0 { v } else { s * v };
                let (p, q) = (act(l), act(h));
                (l, h) = (p.min(q).min(if l < 0.0 && h > 0.0 { 0.0 } else { f64::INFINITY }), p.max(q));
            }
            nlo[r] = l;
            nhi[r] = h;
            nerr[r] = e;
        }
        lo = nlo;
        hi = nhi;
        err = nerr;
    }
    err.into_iter().fold(0.0, f64::max)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EquivalenceReport {
    pub domain: (f64, f64),
    pub samples: usize,
    pub seed: u64,
    /// Largest observed output difference; equals epsilon at xi = 0.
    pub r_max: f64,
    pub bound: Option<f64>,
    pub max_parameter_error: Option<f64>,
    pub slope_errors: Vec<f64>,
    pub ambiguous_alignment: bool,
    pub queries: BTreeMap<String, u64>,
    pub workflow: u8,
}

impl EquivalenceReport {
    pub fn epsilon(&self) -> f64 {
        self.r_max
    }
}

/// Full comparison of a recovered network with the truth. In score modes pass
/// both networks fused on the same pivot.
pub fn evaluate(
    truth: &PReluNetwork,
    recovered: &PReluNetwork,
    domain: (f64, f64),
    samples: usize,
    seed: u64,
) -> Result<EquivalenceReport, NetworkError> {
    let r_max = network_equivalence(truth, recovered, domain, samples, seed);
    let aligned = align(truth, recovered)?;
    Ok(EquivalenceReport {
        domain,
        samples,
        seed,
        r_max,
        bound: Some(propagate_bounds(truth, &aligned.net, domain)),
        max_parameter_error: Some(max_parameter_error(truth, &aligned.net)),
        slope_errors: slope_errors(truth, &aligned.net),
        ambiguous_alignment: aligned.ambiguous,
        queries: BTreeMap::new(),
        workflow: 0,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::network::random_network;
    use nalgebra::{DMatrix, DVector};

    #[test]
    fn self_alignment_is_identity() {
        let net = random_network(&[5, 4, 3, 1], (0.1, 0.9), 1).unwrap();
        let a = align(&net, &net).unwrap();
        assert_eq!(a.permutations, vec![vec![0, 1, 2, 3], vec![0, 1, 2]]);
        assert_eq!(max_parameter_error(&net, &a.net), 0.0);
        assert_eq!(network_equivalence(&net, &a.net, (-1.0, 1.0), 100, 0), 0.0);
        assert_eq!(propagate_bounds(&net, &net, (-1.0, 1.0)), 0.0);
    }

    #[test]
    fn alignment_undoes_scaling_and_permutation() {
        let net = random_network(&[5, 4, 3, 1], (0.1, 0.9), 2).unwrap();
        let other = net
            .scale_neuron(1, 2, 2.0)
            .unwrap()
            .scale_neuron(2, 0, 0.3)
            .unwrap()
            .permute_layer(1, &[3, 1, 0, 2])
            .unwrap()
            .permute_layer(2, &[2, 0, 1])
            .unwrap();
        let a = align(&net, &other).unwrap();
        assert!(max_parameter_error(&net, &a.net) <= 1e-12);
        assert_eq!(a.permutations[0], vec![2, 1, 3, 0]);
        assert!(a.scales[0].iter().any(|&c| (c - 0.5).abs() < 1e-12));
    }

    #[test]
    fn single_layer_bound_matches_hand_computation() {
        // affine map only: bound is sum |delta| over the box plus the bias gap
        let w = DMatrix::from_row_slice(1, 3, &[1.0, -2.0, 0.5]);
        let truth = PReluNetwork::new(vec![w.clone()], vec![DVector::from_element(1, 0.1)], vec![]).unwrap();
        let wr = DMatrix::from_row_slice(1, 3, &[1.001, -2.0, 0.498]);
        let rec = PReluNetwork::new(vec![wr], vec![DVector::from_element(1, 0.1005)], vec![]).unwrap();
        let bound = propagate_bounds(&truth, &rec, (-1.0, 1.0));
        assert!((bound - (0.001 + 0.002 + 0.0005)).abs() < 1e-15);
        assert!(network_equivalence(&truth, &rec, (-1.0, 1.0), 1000, 3) <= bound);
    }

    #[test]
    fn bound_dominates_empirical_error() {
        let net = random_network(&[6, 5, 4, 2], (0.1, 0.9), 3).unwrap();
        let (mut w, mut b, mut s) = net.clone().into_parts();
        w[1][(2, 3)] += 1e-3;
        b[0][1] -= 2e-3;
        s[1][0] += 1e-2;
        let rec = PReluNetwork::new(w, b, s).unwrap();
        let bound = propagate_bounds(&net, &rec, (-1.0, 1.0));
        let emp = network_equivalence(&net, &rec, (-1.0, 1.0), 10_000, 4);
        assert!(emp > 0.0 && emp <= bound, "{emp} vs {bound}");
    }

    #[test]
    fn epsilon_monotone_in_sample_count() {
        let a = random_network(&[4, 3, 1], (0.1, 0.9), 5).unwrap();
        let b = random_network(&[4, 3, 1], (0.1, 0.9), 6).unwrap();
        let small = network_equivalence(&a, &b, (-1.0, 1.0), 100, 7);
        let large = network_equivalence(&a, &b, (-1.0, 1.0), 1000, 7);
        assert!(large >= small);
    }

    #[test]
    fn greedy_and_optimal_agree_on_clear_matches() {
        let sim = vec![vec![0.1, 0.9, 0.2], vec![0.95, 0.1, 0.3], vec![0.2, 0.3, 0.99]];
        assert_eq!(assign(&sim), vec![1, 0, 2]);
    }
}
