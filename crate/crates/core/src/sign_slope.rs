//! Neuron signs and PReLU slopes.
//!
//! Two routes: comparing the affine maps on both sides of a neuron's
//! critical hyperplane (independent), or reading them off the next layer's
//! weights over the split layer, where every hidden unit contributes a
//! `max(y, 0)` and a `min(y, 0)` coefficient (joint).

use nalgebra::{DMatrix, DVector};
use rand::Rng;

use crate::critical_search::{components, ProbeConfig};
use crate::error::{AttackError, Result};
use crate::linalg::{self, gaussian_vector};
use crate::prefix::RecoveredPrefix;
use crate::scores_adapter::Scalar;

/// Relative gap below which two magnitudes count as tied.
pub const TIE_TOL: f64 = 1e-9;

#[derive(Clone, Debug, PartialEq)]
pub struct AdjacentAffinePair {
    pub w_plus: Vec<f64>,
    pub w_minus: Vec<f64>,
    pub target: usize,
    pub radius: f64,
}

/// Coefficients of the local affine maps on the positive and negative side
/// of neuron `target` of the prefix output layer (the pending layer), in the
/// pending preactivation coordinates. Each side costs `d + 1` queries; the
/// radius halves while the two sides disagree off the target coordinate.
pub fn recover_adjacent_affines<R: Rng + ?Sized>(
    f: &dyn Scalar,
    prefix: &RecoveredPrefix,
    x: &[f64],
    target: usize,
    cfg: &ProbeConfig,
    rng: &mut R,
) -> Result<AdjacentAffinePair> {
    let y0 = prefix.output(x);
    let d = y0.len();
    let m = prefix.jacobian(x);
    let mut radius = (1e-4 * linalg::norm(&y0)).max(1e-6);
    let mut complete = prefix.clone();
    complete.pending = None;
    for _ in 0..12 {
        let side = |sign: f64, rng: &mut R| -> Result<Vec<f64>> {
            let mut hs = Vec::with_capacity(d + 1);
            let mut dirs = Vec::with_capacity(d + 1);
            for _ in 0..=d {
                let mut h = gaussian_vector(d, rng);
                h[target] = sign * h[target].abs().max(0.1);
                let h: Vec<f64> = h.iter().map(|v| v * radius).collect();
                let dx = linalg::steer(&m, &DVector::from_column_slice(&h))?;
                dirs.push(dx.iter().copied().collect::<Vec<f64>>());
                hs.push(h);
            }
            if complete.safe_step(x, &dirs) <= 1.0 {
                return Err(AttackError::RegionEscape("complete prefix changes state".into()));
            }
            let mut vals = Vec::with_capacity(d + 1);
            for dx in &dirs {
                let p: Vec<f64> = x.iter().zip(dx).map(|(a, b)| a + b).collect();
                vals.push(f.value(&p)?);
            }
            let a = DMatrix::from_fn(d, d, |r, c| hs[r + 1][c] - hs[0][c]);
            let b = DVector::from_fn(d, |r, _| vals[r + 1] - vals[0]);
            let w = linalg::solve_square(&a, &b).ok_or_else(|| AttackError::Singular("side system".into()))?;
            Ok(w.iter().copied().collect())
        };
        let attempt = side(1.0, rng).and_then(|wp| Ok((wp, side(-1.0, rng)?)));
        match attempt {
            Ok((w_plus, w_minus)) => {
                let scale = w_plus.iter().chain(&w_minus).fold(0.0f64, |a, v| a.max(v.abs()));
                let off = (0..d)
                    .filter(|&k| k != target)
                    .map(|k| (w_plus[k] - w_minus[k]).abs())
                    .fold(0.0, f64::max);
                if off <= 1e-6 * scale {
                    return Ok(AdjacentAffinePair { w_plus, w_minus, target, radius });
                }
            }
            Err(AttackError::RegionEscape(_)) | Err(AttackError::Singular(_)) => {}
            Err(e) => return Err(e),
        }
        radius *= 0.5;
        if cfg.epsilon <= 0.0 {
            break;
        }
    }
    Err(AttackError::RegionEscape(format!("neuron {target}: sides disagree at every radius")))
}

/// `(+1, |w-/w+|)` when `|w+| > |w-|`, `(-1, |w+/w-|)` otherwise.
pub fn decide_sign_slope_independent(w_plus: f64, w_minus: f64) -> Result<(f64, f64)> {
    let (p, m) = (w_plus.abs(), w_minus.abs());
    if p.max(m) == 0.0 || (p - m).abs() <= TIE_TOL * p.max(m) {
        return Err(AttackError::Indeterminate(format!("|w+| = {p:e}, |w-| = {m:e}")));
    }
    Ok(if p > m { (1.0, m / p) } else { (-1.0, p / m) })
}

/// Decision for one extended pair `(w_j, w_{j+d})`: sign, slope and the
/// dominant raw entry (the compressed weight is `sign * dominant`).
pub fn decide_sign_slope_joint(wj: f64, wjd: f64) -> Result<(f64, f64, f64)> {
    let (a, b) = (wj.abs(), wjd.abs());
    if a.max(b) == 0.0 || (a - b).abs() <= TIE_TOL * a.max(b) {
        return Err(AttackError::Indeterminate(format!("|w_j| = {a:e}, |w_j+d| = {b:e}")));
    }
    Ok(if a > b { (1.0, b / a, wj) } else { (-1.0, a / b, wjd) })
}

/// A next-layer neuron's coefficients over the split layer, possibly with
/// holes, plus its bias. Defined up to a nonzero factor.
#[derive(Clone, Debug, PartialEq)]
pub struct ExtendedWeightVector {
    pub values: Vec<Option<f64>>,
    pub bias: f64,
    pub members: usize,
}

impl ExtendedWeightVector {
    pub fn half(&self) -> usize {
        self.values.len() / 2
    }

    pub fn is_complete(&self) -> bool {
        self.values.iter().all(Option::is_some)
    }

    pub fn dense(&self) -> Vec<f64> {
        self.values.iter().map(|v| v.unwrap_or(0.0)).collect()
    }
}

/// Places the `d` coefficients solved at one witness into the extended
/// layout: coordinate `j` feeds slot `j` when `y_j > 0` there, else `j + d`.
pub fn partial_from_solution(weights: &[f64], bias: f64, y_at_witness: &[f64]) -> ExtendedWeightVector {
    let d = weights.len();
    let mut values = vec![None; 2 * d];
    for j in 0..d {
        let slot = if y_at_witness[j] > 0.0 { j } else { j + d };
        values[slot] = Some(weights[j]);
    }
    ExtendedWeightVector { values, bias, members: 1 }
}

fn overlap(p: &ExtendedWeightVector, q: &ExtendedWeightVector) -> (Vec<f64>, Vec<f64>) {
    let mut a = vec![p.bias];
    let mut b = vec![q.bias];
    for (x, y) in p.values.iter().zip(&q.values) {
        if let (Some(x), Some(y)) = (x, y) {
            a.push(*x);
            b.push(*y);
        }
    }
    (a, b)
}

/// Groups partial vectors of the same next-layer neuron (they agree up to
/// a factor wherever both are defined) and merges each of the `k` largest
/// groups by median overlap ratios, dropping members whose ratios spread
/// beyond `1e-4`.
pub fn merge_partials(partials: &[ExtendedWeightVector], k: usize, tol: f64) -> Result<Vec<ExtendedWeightVector>> {
    let d = partials.first().map_or(0, |p| p.half());
    let min_overlap = 2usize.max(d.div_ceil(4));
    let compatible = |i: usize, j: usize| {
        let (a, b) = overlap(&partials[i], &partials[j]);
        a.len() > min_overlap && linalg::angular_distance(&a, &b) <= tol
    };
    let mut comps: Vec<Vec<usize>> = components(partials.len(), compatible).into_iter().filter(|c| c.len() >= 2).collect();
    comps.sort_by(|a, b| b.len().cmp(&a.len()).then(a[0].cmp(&b[0])));
    if comps.len() < k {
        return Err(AttackError::InsufficientWitnesses(format!(
            "{} recurring next-layer neurons, need {k}",
            comps.len()
        )));
    }
    let mut merged = Vec::with_capacity(k);
    for comp in comps.into_iter().take(k) {
        merged.push(merge_component(partials, &comp));
    }
    Ok(merged)
}

fn merge_component(partials: &[ExtendedWeightVector], comp: &[usize]) -> ExtendedWeightVector {
    let n = partials[comp[0]].values.len();
    let mut sums = vec![0.0; n];
    let mut counts = vec![0usize; n];
    let mut bias_sum = 0.0;
    let mut members = 0;
    let mut pending: Vec<usize> = comp.to_vec();
    let mut rejected = Vec::new();
    // grow the merged vector greedily, always absorbing the member with the
    // largest overlap next
    let first = pending.remove(0);
    let add = |p: &ExtendedWeightVector, lambda: f64, sums: &mut Vec<f64>, counts: &mut Vec<usize>, bias_sum: &mut f64| {
        for (v, (s, c)) in p.values.iter().zip(sums.iter_mut().zip(counts.iter_mut())) {
            if let Some(v) = v {
                *c += 1;
                *s += lambda * v;
            }
        }
        *bias_sum += lambda * p.bias;
    };
    add(&partials[first], 1.0, &mut sums, &mut counts, &mut bias_sum);
    members += 1;
    while !pending.is_empty() {
        let current = ExtendedWeightVector {
            values: (0..n).map(|s| (counts[s] > 0).then(|| sums[s] / counts[s] as f64)).collect(),
            bias: bias_sum / members as f64,
            members,
        };
        let (pos, _) = pending
            .iter()
            .enumerate()
            .map(|(pos, &i)| (pos, overlap(&current, &partials[i]).0.len()))
            .max_by(|a, b| a.1.cmp(&b.1).then(b.0.cmp(&a.0)))
            .unwrap();
        let i = pending.remove(pos);
        let (a, b) = overlap(&current, &partials[i]);
        let mut ratios: Vec<f64> = a.iter().zip(&b).filter(|(_, y)| y.abs() > 0.0).map(|(x, y)| x / y).collect();
        if ratios.is_empty() {
            rejected.push(i);
            continue;
        }
        let lambda = linalg::median(&mut ratios);
        // ratios of tiny coordinates are noisy; weigh the spread by magnitude
        let spread = a
            .iter()
            .zip(&b)
            .map(|(x, y)| (x - lambda * y).abs())
            .fold(0.0, f64::max)
            / linalg::norm(&a).max(f64::MIN_POSITIVE);
        if spread > 1e-4 {
            rejected.push(i);
            continue;
        }
        add(&partials[i], lambda, &mut sums, &mut counts, &mut bias_sum);
        members += 1;
    }
    ExtendedWeightVector {
        values: (0..n).map(|s| (counts[s] > 0).then(|| sums[s] / counts[s] as f64)).collect(),
        bias: bias_sum / members as f64,
        members,
    }
}

/// Per split coordinate: sign, slope and the index of the vector it was read
/// from. Coordinates no vector covers on both halves are `None`.
pub fn decide_layer(vectors: &[ExtendedWeightVector]) -> Result<Vec<Option<(f64, f64)>>> {
    let d = vectors[0].half();
    let mut out = vec![None; d];
    for (j, slot) in out.iter_mut().enumerate() {
        let mut best: Option<(f64, f64, f64)> = None;
        let mut vote = 0.0;
        for v in vectors {
            let (Some(a), Some(b)) = (v.values[j], v.values[j + d]) else { continue };
            let norm = linalg::norm(&v.dense()).max(f64::MIN_POSITIVE);
            let score = a.abs().min(b.abs()) / norm;
            if let Ok((sign, slope, _)) = decide_sign_slope_joint(a, b) {
                vote += sign * score;
                if best.is_none_or(|(s, _, _)| score > s) {
                    best = Some((score, sign, slope));
                }
            }
        }
        if let Some((_, sign, slope)) = best {
            let sign = if vote != 0.0 { vote.signum() } else { sign };
            *slot = Some((sign, slope));
        }
    }
    Ok(out)
}

/// Fills holes from decided slopes: sign `+` means `w_{j+d} = s w_j`, sign
/// `-` means `w_j = s w_{j+d}`.
pub fn fill_missing(v: &mut ExtendedWeightVector, decisions: &[Option<(f64, f64)>]) {
    let d = v.half();
    for j in 0..d {
        let Some((sign, s)) = decisions[j] else { continue };
        match (v.values[j], v.values[j + d]) {
            (Some(a), None) => v.values[j + d] = Some(if sign > 0.0 { s * a } else { a / s }),
            (None, Some(b)) => v.values[j] = Some(if sign > 0.0 { b / s } else { s * b }),
            _ => {}
        }
    }
}

/// Compressed next-layer row over the sign-corrected layer: entry `j` is
/// `sign_j` times the dominant member of the pair.
pub fn compress(v: &[f64], decisions: &[(f64, f64)]) -> Vec<f64> {
    let d = decisions.len();
    (0..d)
        .map(|j| {
            let (a, b) = (v[j], v[j + d]);
            let dominant = if decisions[j].0 > 0.0 { a } else { b };
            decisions[j].0 * dominant
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::network::{random_network, PReluNetwork};
    use crate::prefix::PendingLayer;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn toy() -> PReluNetwork {
        PReluNetwork::new(
            vec![DMatrix::from_element(1, 1, 2.0), DMatrix::from_element(1, 1, 3.0)],
            vec![DVector::from_element(1, 0.0), DVector::from_element(1, 1.0)],
            vec![DVector::from_element(1, 0.5)],
        )
        .unwrap()
    }

    #[test]
    fn adjacent_affines_on_toy() {
        let net = toy();
        let f = |x: &[f64]| Ok(net.eval(x)[0]);
        let mut prefix = RecoveredPrefix::new(1);
        prefix.pending = Some(PendingLayer { weights: DMatrix::from_element(1, 1, 2.0), biases: DVector::zeros(1) });
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let pair = recover_adjacent_affines(&f, &prefix, &[0.0], 0, &ProbeConfig::default(), &mut rng).unwrap();
        assert!((pair.w_plus[0] - 3.0).abs() < 1e-9);
        assert!((pair.w_minus[0] - 1.5).abs() < 1e-9);
        assert_eq!(decide_sign_slope_independent(pair.w_plus[0], pair.w_minus[0]).unwrap().0, 1.0);
        let (_, s) = decide_sign_slope_independent(pair.w_plus[0], pair.w_minus[0]).unwrap();
        assert!((s - 0.5).abs() < 1e-9);
    }

    #[test]
    fn adjacent_affines_agree_off_target() {
        let net = random_network(&[8, 6, 6, 1], (0.1, 0.9), 2).unwrap();
        let f = |x: &[f64]| Ok(net.eval(x)[0]);
        let mut prefix = RecoveredPrefix::from_network(&net, 1);
        prefix.pending = Some(PendingLayer { weights: net.weight(2).clone(), biases: net.bias(2).clone() });
        // put the witness on layer-2 neuron 3 by moving along the steered direction
        let mut x = vec![0.2, -0.1, 0.3, 0.05, -0.2, 0.1, 0.0, 0.15];
        for _ in 0..3 {
            let y = prefix.output(&x);
            let m = prefix.jacobian(&x);
            let mut h = vec![0.0; 6];
            h[3] = -y[3];
            let dx = linalg::steer(&m, &DVector::from_vec(h)).unwrap();
            for (a, b) in x.iter_mut().zip(dx.iter()) {
                *a += b;
            }
        }
        assert!(prefix.output(&x)[3].abs() < 1e-14);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let pair = recover_adjacent_affines(&f, &prefix, &x, 3, &ProbeConfig::default(), &mut rng).unwrap();
        for k in 0..6 {
            if k != 3 {
                assert!((pair.w_plus[k] - pair.w_minus[k]).abs() <= 1e-8 * pair.w_plus[k].abs().max(1.0));
            }
        }
        let (sign, slope) = decide_sign_slope_independent(pair.w_plus[3], pair.w_minus[3]).unwrap();
        assert_eq!(sign, 1.0);
        assert!((slope - net.slopes(2)[3]).abs() < 1e-7);
    }

    #[test]
    fn decision_rules() {
        assert_eq!(decide_sign_slope_independent(4.0, 2.0).unwrap(), (1.0, 0.5));
        assert_eq!(decide_sign_slope_independent(2.0, 4.0).unwrap(), (-1.0, 0.5));
        assert!(matches!(decide_sign_slope_independent(2.0, 2.0), Err(AttackError::Indeterminate(_))));
        assert_eq!(decide_sign_slope_joint(3.0, 1.5).unwrap(), (1.0, 0.5, 3.0));
        assert_eq!(decide_sign_slope_joint(1.5, 3.0).unwrap(), (-1.0, 0.5, 3.0));
        for l in [-2.0, 1e-3, 1e5] {
            let (s, sl, _) = decide_sign_slope_joint(l * 3.0, l * 1.5).unwrap();
            assert_eq!((s, sl), (1.0, 0.5));
            if l > 0.0 {
                assert_eq!(decide_sign_slope_independent(l * 4.0, l * 2.0).unwrap(), (1.0, 0.5));
            }
        }
    }

    #[test]
    fn split_toy_fills_both_halves() {
        // witnesses on both sides of the layer-1 unit give the two halves
        let pos = partial_from_solution(&[3.0], 1.0, &[1.0]);
        let neg = partial_from_solution(&[1.5], 1.0, &[-1.0]);
        assert_eq!(pos.values, vec![Some(3.0), None]);
        assert_eq!(neg.values, vec![None, Some(1.5)]);
        let mut v = ExtendedWeightVector { values: vec![Some(3.0), Some(1.5)], bias: 1.0, members: 2 };
        let dec = decide_layer(std::slice::from_ref(&v)).unwrap();
        assert_eq!(dec, vec![Some((1.0, 0.5))]);
        fill_missing(&mut v, &dec);
        assert_eq!(compress(&v.dense(), &[(1.0, 0.5)]), vec![3.0]);
        assert_eq!(compress(&[1.5, 3.0], &[(-1.0, 0.5)]), vec![-3.0]);
    }

    #[test]
    fn overlap_alignment_merges() {
        let full: Vec<f64> = vec![1.0, -2.0, 0.5, 3.0, 0.7, -0.5, 0.25, 1.5];
        let make = |mask: &[bool], lambda: f64| ExtendedWeightVector {
            values: full.iter().zip(mask).map(|(v, &m)| m.then_some(lambda * v)).collect(),
            bias: lambda * 0.3,
            members: 1,
        };
        let a = make(&[true, true, true, true, true, true, false, false], 1.0);
        let b = make(&[true, true, true, true, true, false, true, true], -2.5);
        let merged = merge_partials(&[a, b], 1, 1e-6).unwrap();
        let m = &merged[0];
        assert!(m.is_complete());
        for (got, want) in m.dense().iter().zip(&full) {
            assert!((got - want).abs() < 1e-15);
        }
        assert!((m.bias - 0.3).abs() < 1e-15);
    }

    #[test]
    fn fill_rules() {
        let mut v = ExtendedWeightVector { values: vec![Some(2.0), None, None, Some(-1.0)], bias: 0.0, members: 1 };
        fill_missing(&mut v, &[Some((1.0, 0.5)), Some((-1.0, 0.25))]);
        assert_eq!(v.values, vec![Some(2.0), Some(-0.25), Some(1.0), Some(-1.0)]);
    }
}
