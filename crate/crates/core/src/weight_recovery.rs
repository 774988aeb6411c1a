//! Differential recovery of hidden neurons up to a factor, and the exact
//! solve of the final affine layer.

use nalgebra::{DMatrix, DVector};
use rand::Rng;

use crate::critical_search::{canonical_unit, steer_hidden, ProbeConfig};
use crate::error::{AttackError, Result};
use crate::linalg::{self, gaussian_vector, random_orthonormal};
use crate::oracle::Oracle;
use crate::prefix::RecoveredPrefix;
use crate::scores_adapter::{log_ratio, raw_equivalent, Scalar};

#[derive(Clone, Debug, PartialEq)]
pub struct RecoveredNeuron {
    pub layer: usize,
    /// Unit-norm weight row, canonical sign until the sign is decided.
    pub weights: Vec<f64>,
    pub bias: f64,
    pub sign: Option<f64>,
    pub slope: Option<f64>,
    pub witnesses: usize,
    pub residual: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DerivativeProbeSet {
    pub z: Vec<f64>,
    /// Columns are the hidden-space directions.
    pub directions: DMatrix<f64>,
    /// `delta[j]` for direction `j`.
    pub delta: Vec<f64>,
    /// Index of the anchor direction (largest `|delta|`).
    pub pivot: usize,
    /// `pair_delta[j]` along `H_pivot + H_j`; the pivot entry repeats `delta[pivot]`.
    pub pair_delta: Vec<f64>,
    pub f_z: f64,
    pub eps: f64,
    pub noise_floor: f64,
}

/// Probes the second differences of `f` at the witness `x` along a random
/// orthonormal basis of the prefix output space. Costs exactly `4d - 1`
/// queries (including the one for `f(x)`).
pub fn probe_directions<R: Rng + ?Sized>(
    f: &dyn Scalar,
    prefix: &RecoveredPrefix,
    x: &[f64],
    cfg: &ProbeConfig,
    rng: &mut R,
) -> Result<DerivativeProbeSet> {
    let d = prefix.hidden_dim();
    let z = prefix.output(x);
    let h = random_orthonormal(d, rng);
    probe_with_basis(f, prefix, x, &z, h, cfg)
}

/// [`probe_directions`] with caller-chosen directions.
pub fn probe_with_basis(
    f: &dyn Scalar,
    prefix: &RecoveredPrefix,
    x: &[f64],
    z: &[f64],
    h: DMatrix<f64>,
    cfg: &ProbeConfig,
) -> Result<DerivativeProbeSet> {
    let d = h.ncols();
    let mut steered = Vec::with_capacity(d);
    for j in 0..d {
        let hj: Vec<f64> = h.column(j).iter().copied().collect();
        steered.push(steer_hidden(prefix, x, &hj)?);
    }
    let scale = linalg::norm(z).max(1.0);
    // stay inside the prefix region for single and paired directions
    let safe = 0.45 * prefix.safe_step(x, &steered);
    let eps = (cfg.epsilon * scale).min(safe);
    if !(eps > 1e-13 * scale) {
        return Err(AttackError::WitnessRejected(format!("prefix kink within {safe:e} of the witness")));
    }
    let at = |dir: &[f64], s: f64| -> Vec<f64> { x.iter().zip(dir).map(|(a, b)| a + s * b).collect() };
    let f_z = f.value(x)?;
    let mut delta = Vec::with_capacity(d);
    for dir in &steered {
        delta.push((f.value(&at(dir, eps))? + f.value(&at(dir, -eps))? - 2.0 * f_z) / eps);
    }
    let pivot = argmax_abs(&delta);
    let mut pair_delta = vec![0.0; d];
    pair_delta[pivot] = delta[pivot];
    for j in 0..d {
        if j == pivot {
            continue;
        }
        let dir: Vec<f64> = steered[pivot].iter().zip(&steered[j]).map(|(a, b)| a + b).collect();
        pair_delta[j] = (f.value(&at(&dir, eps))? + f.value(&at(&dir, -eps))? - 2.0 * f_z) / eps;
    }
    let noise_floor = cfg.noise_floor.max(1e-9 * f_z.abs());
    Ok(DerivativeProbeSet { z: z.to_vec(), directions: h, delta, pivot, pair_delta, f_z, eps, noise_floor })
}

fn argmax_abs(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, x) in v.iter().enumerate() {
        if x.abs() > v[best].abs() {
            best = i;
        }
    }
    best
}

/// Same-sign test for one pair: `+1` when `| |d_pj| - |d_p + d_j| |` is
/// smaller than `| |d_pj| - |d_p - d_j| |`, together with the margin.
pub fn pair_sign(dp: f64, dj: f64, dpj: f64) -> (f64, f64) {
    let same = (dpj.abs() - (dp + dj).abs()).abs();
    let opposite = (dpj.abs() - (dp - dj).abs()).abs();
    (if same < opposite { 1.0 } else { -1.0 }, (same - opposite).abs())
}

/// Signs of `A . H_j` relative to `A . H_pivot` (which is taken positive).
pub fn resolve_projection_signs(p: &DerivativeProbeSet) -> Result<Vec<f64>> {
    let dp = p.delta[p.pivot];
    if dp.abs() <= p.noise_floor {
        return Err(AttackError::NotCritical(format!("largest second difference {dp:e} below noise floor")));
    }
    let mut signs = vec![1.0; p.delta.len()];
    for j in 0..p.delta.len() {
        if j == p.pivot {
            continue;
        }
        let dj = p.delta[j];
        let (s, margin) = pair_sign(dp, dj, p.pair_delta[j]);
        if dj.abs() > p.noise_floor && margin <= p.noise_floor {
            return Err(AttackError::SignAmbiguous(j));
        }
        signs[j] = s;
    }
    Ok(signs)
}

/// `A~ = sum_j sigma_j |delta_j| H_j`, `b~ = -A~ . Z`, normalized.
pub fn solve_neuron(p: &DerivativeProbeSet, signs: &[f64], layer: usize) -> Result<RecoveredNeuron> {
    let d = p.delta.len();
    let mut a = DVector::<f64>::zeros(p.directions.nrows());
    for j in 0..d {
        a += p.directions.column(j) * (signs[j] * p.delta[j].abs());
    }
    if a.norm() == 0.0 {
        return Err(AttackError::Singular("all second differences vanish".into()));
    }
    let a: Vec<f64> = a.iter().copied().collect();
    let bias = -linalg::dot(&a, &p.z);
    Ok(normalized_neuron(layer, &a, bias))
}

/// Scales `(a, b)` so that `a` has unit norm with canonical sign.
pub fn normalized_neuron(layer: usize, a: &[f64], b: f64) -> RecoveredNeuron {
    let unit = canonical_unit(a);
    let sign = if linalg::dot(&unit, a) >= 0.0 { 1.0 } else { -1.0 };
    let k = sign / linalg::norm(a);
    RecoveredNeuron { layer, weights: unit, bias: b * k, sign: None, slope: None, witnesses: 1, residual: 0.0 }
}

/// Refuses architectures whose hidden layers cannot be reached by steering.
/// Every hidden layer `i >= 2` needs `d_{i-1} <= min(d_0 .. d_{i-2})`;
/// workflow 1 also needs `d_n <= min(d_0 .. d_{n-1})`.
pub fn expansiveness_guard(dims: &[usize], workflow: u8) -> Result<()> {
    let n = dims.len().saturating_sub(2);
    let check = |i: usize| -> Result<()> {
        let min = *dims[..i - 1].iter().min().unwrap();
        if dims[i - 1] > min {
            return Err(AttackError::Expansive(format!(
                "layer {} has width {} but an earlier layer has width {min}; d_{} <= min(d_0..d_{}) is violated",
                i - 1,
                dims[i - 1],
                i - 1,
                i - 2
            )));
        }
        Ok(())
    };
    for i in 2..=n {
        check(i)?;
    }
    if workflow == 1 && n >= 1 {
        check(n + 1)?;
    }
    Ok(())
}

/// Final affine layer in feature space: `output = weights * phi + bias`.
#[derive(Clone, Debug, PartialEq)]
pub struct LastLayer {
    pub weights: DMatrix<f64>,
    pub bias: DVector<f64>,
    /// Largest relative error on the held-out probes.
    pub holdout_residual: f64,
    pub samples: usize,
}

fn sample_input<R: Rng + ?Sized>(d: usize, i: usize, radius: f64, rng: &mut R) -> Vec<f64> {
    // cycle through radii so every hidden unit is seen on both sides
    let r = radius * [0.5, 1.0, 2.0, 4.0][i % 4];
    gaussian_vector(d, rng).into_iter().map(|v| v * r).collect()
}

/// Regresses the raw-equivalent output on `[phi(x), 1]`. Starts with the
/// minimal `k + 1` samples and adds more only while the system is rank
/// deficient. In score modes the outputs are the fused coordinates
/// `ln(q_j / q_pivot)`.
pub fn recover_last_layer<R: Rng + ?Sized>(
    oracle: &Oracle,
    features: &dyn Fn(&[f64]) -> Vec<f64>,
    n_features: usize,
    pivot: usize,
    radius: f64,
    rng: &mut R,
) -> Result<LastLayer> {
    let d0 = oracle.input_dim();
    let k = n_features + 1;
    let mut rows: Vec<Vec<f64>> = Vec::new();
    let mut targets: Vec<Vec<f64>> = Vec::new();
    let mut want = k;
    let max_samples = 64 * k;
    loop {
        while rows.len() < want {
            let x = sample_input(d0, rows.len(), radius, rng);
            let y = raw_equivalent(&oracle.query(&x)?, pivot)?;
            let mut row = features(&x);
            row.push(1.0);
            rows.push(row);
            targets.push(y);
        }
        let a = DMatrix::from_fn(rows.len(), k, |r, c| rows[r][c]);
        let b = DMatrix::from_fn(rows.len(), targets[0].len(), |r, c| targets[r][c]);
        let (sol, rank) = linalg::lstsq_multi(&a, &b, 1e-10);
        if rank == k {
            let weights = sol.rows(0, n_features).transpose();
            let bias = sol.row(n_features).transpose();
            let mut holdout = 0.0f64;
            for i in 0..10 {
                let x = sample_input(d0, i, radius, rng);
                let y = raw_equivalent(&oracle.query(&x)?, pivot)?;
                let phi = DVector::from_vec(features(&x));
                let pred = &weights * phi + &bias;
                for (p, t) in pred.iter().zip(&y) {
                    holdout = holdout.max((p - t).abs() / t.abs().max(1.0));
                }
            }
            return Ok(LastLayer { weights, bias, holdout_residual: holdout, samples: rows.len() });
        }
        if rows.len() >= max_samples {
            return Err(AttackError::RankDeficient(format!(
                "final-layer system has rank {rank} < {k} after {} samples; some hidden coordinates never change sign",
                rows.len()
            )));
        }
        want = (want * 2).min(max_samples);
    }
}

/// Attempts per weakly excited (label, feature) pair in the top-m solve.
const TARGETED_TRIES: usize = 48;
/// Equations each (label, feature) pair should appear in.
const TARGETED_HITS: usize = 4;
/// Far queries spent per pair the local walks could not reach.
const FAR_TRIES: usize = 4096;

type Equation = (Vec<(usize, f64)>, f64);

/// Top-m variant: each sample contributes `(F_l - F_top) . [phi, 1] =
/// ln(q_l / q_top)` for the labels it reveals, with `F_pivot = 0`.
///
/// A label that is rarely revealed may only show up where some hidden unit
/// sits on one side, leaving its coefficient on the other side unexcited.
/// Such pairs are chased by walking from a point revealing the label across
/// the unit's predicted hyperplane (found on `features`, no queries), then
/// by far samples on which the feature is on.
pub fn recover_last_layer_topm<R: Rng + ?Sized>(
    oracle: &Oracle,
    features: &dyn Fn(&[f64]) -> Vec<f64>,
    n_features: usize,
    pivot: usize,
    radius: f64,
    rng: &mut R,
) -> Result<LastLayer> {
    let d0 = oracle.input_dim();
    let d_out = oracle.output_dim();
    let k = n_features + 1;
    // unknown block of label l (pivot excluded)
    let block = |l: usize| -> Option<usize> {
        match l.cmp(&pivot) {
            std::cmp::Ordering::Less => Some(l * k),
            std::cmp::Ordering::Equal => None,
            std::cmp::Ordering::Greater => Some((l - 1) * k),
        }
    };
    let unknowns = (d_out - 1) * k;
    let m = match oracle.mode() {
        crate::oracle::FeedbackMode::TopM(m) => m,
        _ => d_out,
    };
    let mut eqs: Vec<Equation> = Vec::new();
    let mut revealed: Vec<Vec<Vec<f64>>> = vec![Vec::new(); d_out];
    let mut samples = 0;
    // queries x, records its equations; returns the labels it revealed
    let observe = |x: &[f64], eqs: &mut Vec<Equation>, revealed: &mut Vec<Vec<Vec<f64>>>| -> Result<Vec<usize>> {
        let fb = oracle.query(x)?;
        let labels = fb.labels();
        let top = labels[0];
        let mut phi = features(x);
        phi.push(1.0);
        for &l in &labels {
            revealed[l].push(x.to_vec());
        }
        for &l in &labels[1..] {
            let rhs = match log_ratio(&fb, l, top) {
                Ok(v) => v,
                Err(AttackError::LabelUnavailable(_)) => continue,
                Err(e) => return Err(e),
            };
            let mut coeffs = Vec::new();
            if let Some(o) = block(l) {
                coeffs.extend(phi.iter().enumerate().map(|(c, &v)| (o + c, v)));
            }
            if let Some(o) = block(top) {
                coeffs.extend(phi.iter().enumerate().map(|(c, &v)| (o + c, -v)));
            }
            eqs.push((coeffs, rhs));
        }
        Ok(labels)
    };
    let mut want = (2 * unknowns).div_ceil(m - 1);
    let max_samples = 32 * want;
    let mut chased = std::collections::BTreeSet::new();
    loop {
        while samples < want {
            let x = sample_input(d0, samples, radius, rng);
            samples += 1;
            observe(&x, &mut eqs, &mut revealed)?;
        }
        for (l, c) in excitation(&eqs, d_out, n_features, &block, TARGETED_HITS) {
            for attempt in 0..TARGETED_TRIES {
                if revealed[l].is_empty() || count_hits(&eqs, &block, l, c) >= TARGETED_HITS {
                    break;
                }
                let x0 = revealed[l][attempt % revealed[l].len()].clone();
                // long steps give a well-scaled feature but may lose the label
                let reach = [0.5, 0.2, 0.05][attempt % 3];
                let Some(x) = cross_feature(features, &x0, c, radius, reach, rng) else { continue };
                samples += 1;
                observe(&x, &mut eqs, &mut revealed)?;
            }
            // some pairs only meet far out; each is chased there once
            if count_hits(&eqs, &block, l, c) >= TARGETED_HITS || !chased.insert((l, c)) {
                continue;
            }
            for i in 0..FAR_TRIES {
                if count_hits(&eqs, &block, l, c) >= TARGETED_HITS {
                    break;
                }
                let scale = radius * [4.0, 16.0, 64.0][i % 3];
                let x = (0..100)
                    .map(|_| gaussian_vector(d0, rng).into_iter().map(|v| v * scale).collect::<Vec<f64>>())
                    .find(|x| features(x)[c] != 0.0);
                let Some(x) = x else { break };
                samples += 1;
                observe(&x, &mut eqs, &mut revealed)?;
            }
        }
        let mut a: DMatrix<f64> = DMatrix::zeros(eqs.len(), unknowns);
        let mut b = DVector::zeros(eqs.len());
        for (r, (coeffs, rhs)) in eqs.iter().enumerate() {
            for &(c, v) in coeffs {
                a[(r, c)] += v;
            }
            b[r] = *rhs;
        }
        // rarely excited columns are small; equilibrate before the rank test
        let scales: Vec<f64> = (0..unknowns).map(|c| a.column(c).amax().max(f64::MIN_POSITIVE)).collect();
        let scaled = DMatrix::from_fn(a.nrows(), unknowns, |r, c| a[(r, c)] / scales[c]);
        let (sol, rank) = linalg::lstsq(&scaled, &b, 1e-10);
        let sol = DVector::from_fn(unknowns, |c, _| sol[c] / scales[c]);
        if rank == unknowns {
            let mut weights = DMatrix::zeros(d_out, n_features);
            let mut bias = DVector::zeros(d_out);
            for l in 0..d_out {
                if let Some(o) = block(l) {
                    for c in 0..n_features {
                        weights[(l, c)] = sol[o + c];
                    }
                    bias[l] = sol[o + n_features];
                }
            }
            let resid = (&a * &sol - &b).amax() / b.amax().max(1.0);
            return Ok(LastLayer { weights, bias, holdout_residual: resid, samples });
        }
        if samples >= max_samples {
            let missing: Vec<usize> = (0..d_out).filter(|&l| l != pivot && revealed[l].is_empty()).collect();
            if !missing.is_empty() {
                return Err(AttackError::Entrapment(format!(
                    "labels {missing:?} never appear in the top-m feedback of {samples} samples"
                )));
            }
            let dark = excitation(&eqs, d_out, n_features, &block, 1);
            if !dark.is_empty() {
                return Err(AttackError::Entrapment(format!(
                    "(label, feature) pairs {dark:?} are never observed together in {samples} samples"
                )));
            }
            return Err(AttackError::RankDeficient(format!(
                "top-m final-layer system has rank {rank} < {unknowns} after {samples} samples"
            )));
        }
        want = (want * 2).min(max_samples).max(samples);
    }
}

/// Equations in which the coefficient of feature `c` for label `l` is
/// nonzero.
fn count_hits(eqs: &[Equation], block: &dyn Fn(usize) -> Option<usize>, l: usize, c: usize) -> usize {
    let Some(o) = block(l) else { return usize::MAX };
    eqs.iter().filter(|(coeffs, _)| coeffs.iter().any(|&(i, v)| i == o + c && v != 0.0)).count()
}

/// (label, feature) pairs of non-pivot labels excited by fewer than `min`
/// equations.
fn excitation(
    eqs: &[Equation],
    d_out: usize,
    n_features: usize,
    block: &dyn Fn(usize) -> Option<usize>,
    min: usize,
) -> Vec<(usize, usize)> {
    let k = n_features + 1;
    let mut counts = vec![0usize; d_out * k];
    let mut owner = vec![None; d_out * k];
    for l in 0..d_out {
        if let Some(b) = block(l) {
            owner[b..b + k].iter_mut().for_each(|v| *v = Some(l));
        }
    }
    for (coeffs, _) in eqs {
        for &(i, v) in coeffs {
            if let (Some(l), true) = (owner[i], v != 0.0) {
                counts[l * k + i % k] += 1;
            }
        }
    }
    (0..d_out)
        .filter(|&l| block(l).is_some())
        .flat_map(|l| (0..n_features).map(move |c| (l, c)))
        .filter(|&(l, c)| counts[l * k + c] < min)
        .collect()
}

/// A point `reach` (relative) past where feature `c` turns on along a
/// random ray from `x0`, located on the feature map alone.
fn cross_feature<R: Rng + ?Sized>(
    features: &dyn Fn(&[f64]) -> Vec<f64>,
    x0: &[f64],
    c: usize,
    radius: f64,
    reach: f64,
    rng: &mut R,
) -> Option<Vec<f64>> {
    let u = gaussian_vector(x0.len(), rng);
    let un = linalg::norm(&u);
    let at = |t: f64| -> Vec<f64> { x0.iter().zip(&u).map(|(a, b)| a + t * b / un).collect() };
    let on = |t: f64| features(&at(t))[c] != 0.0;
    let mut lo = 0.0;
    let mut hi = 1e-3 * radius;
    while !on(hi) {
        lo = hi;
        hi *= 2.0;
        if hi > 64.0 * radius {
            return None;
        }
    }
    for _ in 0..60 {
        let mid = 0.5 * (lo + hi);
        if on(mid) {
            hi = mid;
        } else {
            lo = mid;
        }
    }
    let t = hi + reach * hi.max(0.1 * radius);
    on(t).then(|| at(t))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::network::{random_network, PReluNetwork};
    use crate::oracle::FeedbackMode;
    use crate::scores_adapter::ScalarView;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn net_211() -> PReluNetwork {
        PReluNetwork::new(
            vec![DMatrix::from_row_slice(1, 2, &[1.0, -1.0]), DMatrix::from_element(1, 1, 2.0)],
            vec![DVector::zeros(1), DVector::zeros(1)],
            vec![DVector::from_element(1, 0.5)],
        )
        .unwrap()
    }

    fn cfg(eps: f64) -> ProbeConfig {
        ProbeConfig { epsilon: eps, ..Default::default() }
    }

    #[test]
    fn hand_instance_211() {
        let net = net_211();
        let f = |x: &[f64]| Ok(net.eval(x)[0]);
        let prefix = RecoveredPrefix::new(2);
        let p = probe_with_basis(&f, &prefix, &[0.0, 0.0], &[0.0, 0.0], DMatrix::identity(2, 2), &cfg(0.01)).unwrap();
        assert!((p.delta[0] - 1.0).abs() < 1e-12 && (p.delta[1] - 1.0).abs() < 1e-12);
        assert_eq!(p.pivot, 0);
        assert!(p.pair_delta[1].abs() < 1e-12);
        let s = resolve_projection_signs(&p).unwrap();
        assert_eq!(s, vec![1.0, -1.0]);
        let n = solve_neuron(&p, &s, 1).unwrap();
        let r = std::f64::consts::FRAC_1_SQRT_2;
        assert!((n.weights[0] - r).abs() < 1e-12 && (n.weights[1] + r).abs() < 1e-12);
        assert_eq!(n.bias, 0.0);
    }

    #[test]
    fn probe_costs_four_d_minus_one() {
        let net = net_211();
        let o = Oracle::from_network(net, FeedbackMode::Raw).unwrap();
        let v = ScalarView::new(&o, crate::scores_adapter::ScalarKind::RawCoord(0)).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        probe_directions(&v, &RecoveredPrefix::new(2), &[0.0, 0.0], &cfg(0.01), &mut rng).unwrap();
        assert_eq!(o.query_count(), 7);
    }

    #[test]
    fn sign_rule_cases_and_scale_invariance() {
        assert_eq!(pair_sign(1.0, 1.0, 0.0).0, -1.0);
        assert_eq!(pair_sign(1.0, 1.0, 2.0).0, 1.0);
        for (dp, dj, dpj) in [(1.0, 0.3, 1.3), (2.0, 0.5, 1.5), (0.7, 0.2, 0.9)] {
            for lambda in [1e-3, 0.5, 7.0, 1e4] {
                assert_eq!(pair_sign(dp, dj, dpj).0, pair_sign(lambda * dp, lambda * dj, lambda * dpj).0);
            }
        }
    }

    #[test]
    fn layer_one_recovery_is_parallel_and_antipodal_under_flip() {
        let net = random_network(&[6, 4, 1], (0.1, 0.9), 9).unwrap();
        let f = |x: &[f64]| Ok(net.eval(x)[0]);
        // a point on neuron 0's hyperplane: move along the row from a base point
        let a0: Vec<f64> = net.weight(1).row(0).iter().copied().collect();
        let base = [0.1, -0.2, 0.3, 0.0, 0.2, -0.1];
        let y = linalg::dot(&a0, &base) + net.bias(1)[0];
        let nn = linalg::dot(&a0, &a0);
        let x: Vec<f64> = base.iter().zip(&a0).map(|(b, a)| b - y * a / nn).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let p = probe_directions(&f, &RecoveredPrefix::new(6), &x, &ProbeConfig::default(), &mut rng).unwrap();
        let s = resolve_projection_signs(&p).unwrap();
        let n = solve_neuron(&p, &s, 1).unwrap();
        assert!(linalg::line_angle(&n.weights, &a0) <= 1e-7, "{:e}", linalg::line_angle(&n.weights, &a0));
        let flipped: Vec<f64> = s.iter().map(|v| -v).collect();
        let m = solve_neuron(&p, &flipped, 1).unwrap();
        // both are canonicalized, so antipodal candidates coincide after normalization
        assert_eq!(m.weights, n.weights);
    }

    #[test]
    fn non_critical_point_rejected() {
        let net = net_211();
        let f = |x: &[f64]| Ok(net.eval(x)[0]);
        let p = probe_with_basis(&f, &RecoveredPrefix::new(2), &[1.0, 0.0], &[1.0, 0.0], DMatrix::identity(2, 2), &cfg(0.01))
            .unwrap();
        assert!(matches!(resolve_projection_signs(&p), Err(AttackError::NotCritical(_))));
    }

    #[test]
    fn guard_examples() {
        assert!(matches!(expansiveness_guard(&[10, 30, 30, 1], 2), Err(AttackError::Expansive(_))));
        assert!(expansiveness_guard(&[32, 16, 16, 1], 1).is_ok());
        assert!(expansiveness_guard(&[20, 10, 10, 1], 1).is_ok());
        assert!(expansiveness_guard(&[20, 10, 10, 1], 2).is_ok());
        assert!(expansiveness_guard(&[4, 8, 1], 2).is_ok());
        assert!(expansiveness_guard(&[4, 8, 1], 1).is_err());
    }

    #[test]
    fn last_layer_with_exact_prefix() {
        let net = random_network(&[5, 4, 2], (0.1, 0.9), 12).unwrap();
        let o = Oracle::from_network(net.clone(), FeedbackMode::Raw).unwrap();
        let prefix = RecoveredPrefix::from_network(&net, 1);
        let feats = |x: &[f64]| prefix.output(x);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let ll = recover_last_layer(&o, &feats, 4, 0, 1.0, &mut rng).unwrap();
        assert!((&ll.weights - net.weight(2)).amax() < 1e-12);
        assert!((&ll.bias - net.bias(2)).amax() < 1e-12);
        assert_eq!(ll.samples, 5);
        assert!(ll.holdout_residual < 1e-12);
    }

    #[test]
    fn pure_affine_victim() {
        let net = PReluNetwork::new(
            vec![DMatrix::from_row_slice(1, 3, &[0.5, -1.0, 2.0])],
            vec![DVector::from_element(1, 0.25)],
            vec![],
        )
        .unwrap();
        let o = Oracle::from_network(net, FeedbackMode::Raw).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let ll = recover_last_layer(&o, &|x: &[f64]| x.to_vec(), 3, 0, 1.0, &mut rng).unwrap();
        assert!((ll.weights[(0, 2)] - 2.0).abs() < 1e-12 && (ll.bias[0] - 0.25).abs() < 1e-12);
    }

    #[test]
    fn topm_last_layer_recovers_fused_rows() {
        let net = random_network(&[5, 4, 5], (0.1, 0.9), 13).unwrap();
        let fused = net.fuse_outputs(0).unwrap();
        let o = Oracle::from_network(net.clone(), FeedbackMode::TopM(3)).unwrap();
        let prefix = RecoveredPrefix::from_network(&net, 1);
        let feats = |x: &[f64]| prefix.output(x);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let ll = recover_last_layer_topm(&o, &feats, 4, 0, 1.0, &mut rng).unwrap();
        assert!((&ll.weights - fused.weight(2)).amax() < 1e-10, "{}", (&ll.weights - fused.weight(2)).amax());
        assert!((&ll.bias - fused.bias(2)).amax() < 1e-10);
    }
}
