//! Precision refinement of recovered rows.
//!
//! A row `(w, b)` over some feature map `phi` predicts where its neuron bends.
//! Fresh witnesses are placed on that prediction using the recovered model
//! alone, then pinned down by a short oracle search around it. A total least
//! squares fit of `[phi(x), 1]` over the witnesses gives the refined row; it
//! replaces the old one only if it explains held-out witnesses better.

use nalgebra::DMatrix;
use rand::Rng;

use crate::critical_search::{find_critical_on_segment, ProbeConfig};
use crate::error::{AttackError, Result};
use crate::linalg::{self, gaussian_vector};
use crate::prefix::RecoveredPrefix;
use crate::scores_adapter::Scalar;
use crate::weight_recovery::{normalized_neuron, RecoveredNeuron};

#[derive(Clone, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct RefinementReport {
    pub pre_residual: f64,
    pub post_residual: f64,
    pub witnesses: usize,
    pub queries: u64,
    pub accepted: bool,
    pub failed: bool,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RefineConfig {
    /// Witnesses per unknown.
    pub overdetermination: usize,
    pub rounds: usize,
    /// Half-width of the oracle search around a predicted crossing, relative
    /// to `max(1, |x|)`.
    pub bracket: f64,
    /// Spread of the random lines used to place witnesses.
    pub radius: f64,
    pub stop_residual: f64,
}

impl Default for RefineConfig {
    fn default() -> Self {
        Self { overdetermination: 2, rounds: 3, bracket: 1e-5, radius: 1.0, stop_residual: 1e-13 }
    }
}

/// Row of one neuron over a feature map of the input.
pub struct RowTarget<'a> {
    pub features: &'a dyn Fn(&[f64]) -> Vec<f64>,
    pub weights: Vec<f64>,
    pub bias: f64,
}

impl RowTarget<'_> {
    fn value(&self, x: &[f64]) -> f64 {
        linalg::dot(&(self.features)(x), &self.weights) + self.bias
    }
}

/// Zero of `g(p + t u)` near `t = 0` by damped secant steps; `None` if the
/// model never crosses within `|t| <= limit`.
pub(crate) fn model_crossing(g: &dyn Fn(f64) -> f64, limit: f64) -> Option<f64> {
    let (mut t0, mut t1) = (0.0, 1e-3 * limit);
    let (mut g0, mut g1) = (g(t0), g(t1));
    for _ in 0..200 {
        if g1 == 0.0 {
            return Some(t1);
        }
        if g1 == g0 {
            return None;
        }
        let mut t2 = t1 - g1 * (t1 - t0) / (g1 - g0);
        let step = t2 - t1;
        if step.abs() > 0.5 * limit {
            t2 = t1 + 0.5 * limit * step.signum();
        }
        if t2.abs() > limit {
            return None;
        }
        let g2 = g(t2);
        (t0, g0, t1, g1) = (t1, g1, t2, g2);
        if (t1 - t0).abs() <= 1e-15 * t1.abs().max(1.0) {
            return Some(t1);
        }
    }
    None
}

const MAX_LINES: usize = 10_000;

/// One fresh witness of the target neuron, or `None` when the oracle shows
/// no suitable kink near the predicted crossing.
fn fresh_witness<R: Rng + ?Sized>(
    f: &dyn Scalar,
    prefix: &RecoveredPrefix,
    row: &RowTarget,
    cfg: &RefineConfig,
    bracket: f64,
    probe: &ProbeConfig,
    rng: &mut R,
) -> Result<Option<Vec<f64>>> {
    let d0 = prefix.input_dim();
    // most random lines miss a hyperplane in high dimension; those cost no
    // queries and must not count as misses of the oracle search
    let mut line = None;
    for _ in 0..MAX_LINES {
        let p: Vec<f64> = gaussian_vector(d0, rng).iter().map(|v| v * cfg.radius).collect();
        let u = gaussian_vector(d0, rng);
        let un = linalg::norm(&u);
        let u: Vec<f64> = u.iter().map(|v| v / un).collect();
        let at = |t: f64| -> Vec<f64> { p.iter().zip(&u).map(|(a, b)| a + t * b).collect() };
        if let Some(t) = model_crossing(&|t| row.value(&at(t)), 4.0 * cfg.radius) {
            line = Some((p, u, t));
            break;
        }
    }
    let Some((p, u, t)) = line else {
        return Err(AttackError::Refinement(format!("the row never vanishes within {MAX_LINES} random lines")));
    };
    let at = |t: f64| -> Vec<f64> { p.iter().zip(&u).map(|(a, b)| a + t * b).collect() };
    let x = at(t);
    f.anchor(&x)?;
    let r = bracket * linalg::norm(&x).max(1.0);
    let found = find_critical_on_segment(f, &at(t - r), &at(t + r), probe)?;
    // prior-layer kinks sit exactly on a recovered hyperplane; ours does not
    let best = found
        .into_iter()
        .filter(|w| prefix.min_abs_preactivation(&w.x) > 1e-6 * r)
        .min_by(|a, b| dist(&a.x, &x).total_cmp(&dist(&b.x, &x)));
    Ok(best.map(|w| w.x))
}

fn dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

/// Normalized incidence residual `max |w . phi + b| / |w|` over `points`.
pub fn incidence_residual(points: &[Vec<f64>], w: &[f64], b: f64) -> f64 {
    let n = linalg::norm(w).max(f64::MIN_POSITIVE);
    points.iter().map(|p| (linalg::dot(p, w) + b).abs() / n).fold(0.0, f64::max)
}

/// Total least squares row through the feature points, scaled to agree with
/// `(w, b)`. Feature columns never active on the points keep their old value.
pub fn fit_row(points: &[Vec<f64>], w: &[f64], b: f64) -> Result<(Vec<f64>, f64)> {
    let k = w.len();
    let active: Vec<usize> = (0..k).filter(|&c| points.iter().any(|p| p[c] != 0.0)).collect();
    if points.len() < active.len() + 1 {
        return Err(AttackError::Refinement(format!("{} witnesses for {} unknowns", points.len(), active.len() + 1)));
    }
    // column scaling keeps the smallest singular value meaningful
    let scales: Vec<f64> = active
        .iter()
        .map(|&c| points.iter().map(|p| p[c].abs()).fold(0.0, f64::max))
        .chain(std::iter::once(1.0))
        .collect();
    let a = DMatrix::from_fn(points.len(), active.len() + 1, |r, c| {
        let v = if c < active.len() { points[r][active[c]] } else { 1.0 };
        v / scales[c]
    });
    let (v, smin, second) = linalg::null_vector(&a);
    if second <= 1e3 * smin {
        return Err(AttackError::Refinement(format!("null space not isolated ({smin:e} vs {second:e})")));
    }
    let v: Vec<f64> = v.iter().zip(&scales).map(|(x, s)| x / s).collect();
    let mut old: Vec<f64> = active.iter().map(|&c| w[c]).collect();
    old.push(b);
    let lambda = linalg::dot(&old, &v) / linalg::dot(&v, &v);
    let mut out = w.to_vec();
    for (i, &c) in active.iter().enumerate() {
        out[c] = lambda * v[i];
    }
    Ok((out, lambda * v[active.len()]))
}

/// Points within `INLIER_FACTOR` times the median residual of `(w, b)` (or
/// within `1e-13`).
fn inliers(points: &[Vec<f64>], w: &[f64], b: f64) -> Vec<Vec<f64>> {
    let n = linalg::norm(w).max(f64::MIN_POSITIVE);
    let res: Vec<f64> = points.iter().map(|p| (linalg::dot(p, w) + b).abs() / n).collect();
    let cut = (INLIER_FACTOR * linalg::median(&mut res.clone())).max(1e-13);
    points.iter().zip(&res).filter(|(_, &r)| r <= cut).map(|(p, _)| p.clone()).collect()
}

const INLIER_FACTOR: f64 = 20.0;

/// [`fit_row`] with repeated outlier trimming until the inlier set settles.
/// A single stray witness can skew the first fit enough to hide itself.
fn robust_fit(points: &[Vec<f64>], w: &[f64], b: f64) -> Result<(Vec<f64>, f64)> {
    let (mut w1, mut b1) = fit_row(points, w, b)?;
    let mut kept_len = points.len();
    for _ in 0..8 {
        let kept = inliers(points, &w1, b1);
        if kept.len() == kept_len {
            break;
        }
        kept_len = kept.len();
        (w1, b1) = fit_row(&kept, &w1, b1)?;
    }
    Ok((w1, b1))
}

/// Refines one row. At least `overdetermination * (unknowns)` fresh
/// witnesses feed the fit; every fourth is held out to judge it.
pub fn refine_row<R: Rng + ?Sized>(
    f: &dyn Scalar,
    prefix: &RecoveredPrefix,
    row: RowTarget,
    cfg: &RefineConfig,
    probe: &ProbeConfig,
    queries: &dyn Fn() -> u64,
    rng: &mut R,
) -> Result<(Vec<f64>, f64, RefinementReport)> {
    let start = queries();
    let unknowns = row.weights.len() + 1;
    let want = cfg.overdetermination * unknowns;
    let mut report = RefinementReport {
        pre_residual: f64::INFINITY,
        post_residual: f64::INFINITY,
        witnesses: 0,
        queries: 0,
        accepted: false,
        failed: false,
    };
    let mut best = (row.weights.clone(), row.bias);
    let mut points: Vec<Vec<f64>> = Vec::new();
    for _ in 0..cfg.rounds {
        let target = RowTarget { features: row.features, weights: best.0.clone(), bias: best.1 };
        let (mut misses, mut streak) = (0, 0);
        let mut fresh = 0;
        // a coarse row predicts its crossings coarsely; widen while the
        // searches keep missing (weak kinks also miss now and then)
        let mut bracket = cfg.bracket;
        while fresh < want {
            match fresh_witness(f, prefix, &target, cfg, bracket, probe, rng)? {
                Some(x) => {
                    points.push((row.features)(&x));
                    fresh += 1;
                    streak = 0;
                }
                None => {
                    misses += 1;
                    streak += 1;
                    if streak % 3 == 0 {
                        bracket = (bracket * 4.0).min(1e-2);
                    }
                    if misses > 4 * want {
                        break;
                    }
                }
            }
        }
        report.witnesses = points.len();
        let (fit, held): (Vec<_>, Vec<_>) = points.iter().cloned().enumerate().partition(|(i, _)| i % 4 != 3);
        let fit: Vec<Vec<f64>> = fit.into_iter().map(|(_, p)| p).collect();
        let held: Vec<Vec<f64>> = held.into_iter().map(|(_, p)| p).collect();
        let scale = linalg::norm(&best.0).max(1.0);
        if report.pre_residual.is_infinite() {
            report.pre_residual = incidence_residual(&held, &best.0, best.1);
        }
        if incidence_residual(&held, &best.0, best.1) <= cfg.stop_residual * scale {
            break;
        }
        let Ok((w, b)) = robust_fit(&fit, &best.0, best.1) else {
            report.failed = true;
            break;
        };
        // judge both rows on the held-out witnesses consistent with the fit
        let held = inliers(&held, &w, b);
        let pre = incidence_residual(&held, &best.0, best.1);
        let post = incidence_residual(&held, &w, b);
        if post < pre {
            best = (w, b);
            report.accepted = true;
            report.post_residual = post;
        } else {
            // keep the best row; the next round adds fresh witnesses
            report.post_residual = pre;
            continue;
        }
        if post < cfg.stop_residual * scale {
            break;
        }
    }
    if report.post_residual.is_infinite() {
        report.post_residual = report.pre_residual;
    }
    report.queries = queries() - start;
    Ok((best.0, best.1, report))
}

/// Refines a neuron of the layer following the prefix's complete layers.
/// The row is renormalized; sign and slope carry over.
pub fn refine_neuron<R: Rng + ?Sized>(
    f: &dyn Scalar,
    prefix: &RecoveredPrefix,
    neuron: &RecoveredNeuron,
    cfg: &RefineConfig,
    probe: &ProbeConfig,
    queries: &dyn Fn() -> u64,
    rng: &mut R,
) -> Result<(RecoveredNeuron, RefinementReport)> {
    let mut complete = prefix.clone();
    complete.pending = None;
    let features = |x: &[f64]| complete.complete_output(x);
    let row = RowTarget { features: &features, weights: neuron.weights.clone(), bias: neuron.bias };
    let (w, b, report) = refine_row(f, &complete, row, cfg, probe, queries, rng)?;
    let mut out = normalized_neuron(neuron.layer, &w, b);
    if linalg::dot(&out.weights, &neuron.weights) < 0.0 {
        out.weights.iter_mut().for_each(|v| *v = -*v);
        out.bias = -out.bias;
    }
    out.sign = neuron.sign;
    out.slope = neuron.slope;
    out.witnesses = neuron.witnesses + report.witnesses;
    out.residual = report.post_residual;
    Ok((out, report))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::network::random_network;
    use crate::oracle::{FeedbackMode, Oracle};
    use crate::scores_adapter::ScalarView;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn true_neuron(net: &crate::PReluNetwork, j: usize) -> RecoveredNeuron {
        let w: Vec<f64> = net.weight(1).row(j).iter().copied().collect();
        normalized_neuron(1, &w, net.bias(1)[j])
    }

    #[test]
    fn perturbed_layer1_neuron_is_repaired() {
        let net = random_network(&[8, 6, 1], (0.1, 0.9), 21).unwrap();
        let oracle = Oracle::from_network(net.clone(), FeedbackMode::Raw).unwrap();
        let f = ScalarView::default_for(&oracle, 0);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for j in 0..6 {
            let exact = true_neuron(&net, j);
            let mut noisy = exact.clone();
            for v in noisy.weights.iter_mut() {
                *v *= 1.0 + 1e-4 * linalg::gaussian_vector(1, &mut rng)[0];
            }
            noisy.bias *= 1.0 + 1e-4;
            let (out, report) = refine_neuron(
                &f,
                &RecoveredPrefix::new(8),
                &noisy,
                &RefineConfig::default(),
                &ProbeConfig::default(),
                &|| oracle.query_count(),
                &mut rng,
            )
            .unwrap();
            let err = linalg::line_angle(&out.weights, &exact.weights);
            assert!(err <= 1e-9, "neuron {j}: {err:e}");
            assert!((out.bias - exact.bias).abs() <= 1e-9);
            assert!(report.post_residual <= report.pre_residual);
            assert!(report.accepted && !report.failed);
        }
    }

    #[test]
    fn exact_neuron_is_a_fixed_point() {
        let net = random_network(&[6, 4, 1], (0.1, 0.9), 3).unwrap();
        let oracle = Oracle::from_network(net.clone(), FeedbackMode::Raw).unwrap();
        let f = ScalarView::default_for(&oracle, 0);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let exact = true_neuron(&net, 2);
        let cfg = RefineConfig { rounds: 1, ..Default::default() };
        let (out, report) = refine_neuron(
            &f,
            &RecoveredPrefix::new(6),
            &exact,
            &cfg,
            &ProbeConfig::default(),
            &|| oracle.query_count(),
            &mut rng,
        )
        .unwrap();
        for (a, b) in out.weights.iter().zip(&exact.weights) {
            assert!((a - b).abs() <= 1e-15);
        }
        assert!(report.pre_residual < 1e-14);
        assert!(report.post_residual <= report.pre_residual);
    }

    #[test]
    fn tls_fit_on_exact_points() {
        let w = [0.6, -0.8];
        let pts: Vec<Vec<f64>> = (0..6).map(|i| {
            let t = i as f64 - 2.5;
            vec![0.8 * t + 0.3, 0.6 * t + 0.6 * 0.3 / 0.8 + 0.5 / 0.8]
        }).collect();
        let b = -linalg::dot(&pts[0], &w);
        let (fw, fb) = fit_row(&pts, &[0.6001, -0.8], b * 1.001).unwrap();
        let err = incidence_residual(&pts, &fw, fb);
        assert!(err < 1e-14, "{err:e}");
    }

    #[test]
    fn secant_crossing() {
        let t = model_crossing(&|t| (2.0 * t - 1.0).max(0.3 * (2.0 * t - 1.0)), 4.0).unwrap();
        assert!((t - 0.5).abs() < 1e-15);
    }
}
