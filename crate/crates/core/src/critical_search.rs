//! Finding, certifying and filtering critical points.

use nalgebra::DVector;
use rand::seq::IndexedRandom;
use rand::Rng;

use crate::error::{AttackError, Result};
use crate::linalg::{self, angular_distance};
use crate::oracle::Oracle;
use crate::prefix::RecoveredPrefix;
use crate::scores_adapter::{Scalar, ScalarKind};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ProbeConfig {
    /// Finite-difference stride, relative to the local scale.
    pub epsilon: f64,
    /// Maximum number of bisection halvings per witness.
    pub depth: u32,
    /// Relative tolerance of the midpoint linearity test.
    pub linearity_tol: f64,
    /// Relative noise floor for second differences.
    pub noise_floor: f64,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        Self { epsilon: 1e-5, depth: 60, linearity_tol: 1e-8, noise_floor: 1e-7 }
    }
}

impl ProbeConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.epsilon > 0.0 && self.linearity_tol > 0.0 && self.noise_floor > 0.0 && self.depth > 0) {
            return Err(AttackError::Config(format!("probe configuration must be positive: {self:?}")));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CriticalWitness {
    pub x: Vec<f64>,
    /// Target layer (1-based); 0 until assigned.
    pub layer: usize,
    /// Recovered-prefix output at `x`; empty until assigned.
    pub z: Vec<f64>,
    /// Input-space width of the final bracket.
    pub residual: f64,
    pub endpoints: (Vec<f64>, Vec<f64>),
    /// Change of directional slope across the kink, per unit input length.
    pub kink: f64,
    /// Scalar view the witness was found with.
    pub view: Option<ScalarKind>,
}

struct Segment<'a> {
    f: &'a dyn Scalar,
    x1: &'a [f64],
    dx: Vec<f64>,
}

impl Segment<'_> {
    fn point(&self, t: f64) -> Vec<f64> {
        self.x1.iter().zip(&self.dx).map(|(a, d)| a + t * d).collect()
    }

    fn g(&self, t: f64) -> Result<f64> {
        self.f.value(&self.point(t))
    }
}

fn line(ta: f64, ga: f64, tb: f64, gb: f64) -> (f64, f64) {
    let slope = (gb - ga) / (tb - ta);
    (slope, ga - slope * ta)
}

/// All kinks of `f` on the segment `[x1, x2]`.
///
/// An interval whose midpoint value matches the interpolation of its ends is
/// taken to be affine. Otherwise the end slopes are intersected; when the
/// function agrees with the left line at the intersection the interval holds
/// one kink, which is then bisected to full resolution and certified with a
/// second difference. Anything else is split at the midpoint. Sub-intervals
/// where the view is unavailable are skipped.
pub fn find_critical_on_segment(
    f: &dyn Scalar,
    x1: &[f64],
    x2: &[f64],
    cfg: &ProbeConfig,
) -> Result<Vec<CriticalWitness>> {
    let seg = Segment { f, x1, dx: x2.iter().zip(x1).map(|(b, a)| b - a).collect() };
    let len = linalg::norm(&seg.dx);
    if len == 0.0 {
        return Ok(Vec::new());
    }
    let (g0, g1) = match (seg.g(0.0), seg.g(1.0)) {
        (Ok(a), Ok(b)) => (a, b),
        (Err(AttackError::LabelUnavailable(_)), _) | (_, Err(AttackError::LabelUnavailable(_))) => {
            return Ok(Vec::new())
        }
        (Err(e), _) | (_, Err(e)) => return Err(e),
    };
    let mut found: Vec<(f64, f64, f64)> = Vec::new();
    let mut stack = vec![(0.0, g0, 1.0, g1)];
    while let Some((a, ga, b, gb)) = stack.pop() {
        match search_interval(&seg, a, ga, b, gb, cfg) {
            Ok(Step::Affine) => {}
            Ok(Step::Split(m, gm)) => {
                if (b - a) > 1e-9 {
                    stack.push((m, gm, b, gb));
                    stack.push((a, ga, m, gm));
                }
            }
            Ok(Step::Kink(t, width, jump)) => found.push((t, width, jump)),
            Err(AttackError::LabelUnavailable(_)) => {}
            Err(e) => return Err(e),
        }
    }
    found.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap());
    let mut out: Vec<CriticalWitness> = Vec::new();
    for (t, width, jump) in found {
        let x = seg.point(t);
        if out.last().is_some_and(|w| dist(&w.x, &x) < 1e-9) {
            continue;
        }
        out.push(CriticalWitness {
            x,
            layer: 0,
            z: Vec::new(),
            residual: width * len,
            endpoints: (x1.to_vec(), x2.to_vec()),
            kink: jump / len,
            view: None,
        });
    }
    Ok(out)
}

enum Step {
    Affine,
    Split(f64, f64),
    Kink(f64, f64, f64),
}

fn search_interval(seg: &Segment, a: f64, ga: f64, b: f64, gb: f64, cfg: &ProbeConfig) -> Result<Step> {
    let w = b - a;
    let m = 0.5 * (a + b);
    let gm = seg.g(m)?;
    let scale = ga.abs().max(gb.abs()).max(gm.abs()).max(f64::MIN_POSITIVE);
    if (gm - 0.5 * (ga + gb)).abs() <= cfg.linearity_tol * scale {
        return Ok(Step::Affine);
    }
    // single-kink hypothesis from short end slopes
    let h = 1e-3 * w;
    let gah = seg.g(a + h)?;
    let gbh = seg.g(b - h)?;
    let (sl, cl) = line(a, ga, a + h, gah);
    let (sr, cr) = line(b - h, gbh, b, gb);
    if (sl - sr).abs() <= 1e-12 * (sl.abs() + sr.abs()) {
        return Ok(Step::Split(m, gm));
    }
    let t0 = (cr - cl) / (sl - sr);
    if !(t0 > a + h && t0 < b - h) {
        return Ok(Step::Split(m, gm));
    }
    let gt = seg.g(t0)?;
    if (gt - (sl * t0 + cl)).abs() > 1e-7 * scale {
        return Ok(Step::Split(m, gm));
    }
    // long baselines on both sides
    let pl = t0 - 0.01 * (t0 - a);
    let pr = t0 + 0.01 * (b - t0);
    let (sl, cl) = line(a, ga, pl, seg.g(pl)?);
    let (sr, cr) = line(pr, seg.g(pr)?, b, gb);
    let mut t = (cr - cl) / (sl - sr);
    if !(t > pl && t < pr) {
        return Ok(Step::Split(m, gm));
    }
    // bisection: the side is whichever line the value is closer to
    let r = 1e-9 * w;
    let (mut lo, mut hi) = (t - r, t + r);
    let glo = seg.g(lo)?;
    let ghi = seg.g(hi)?;
    let tol = 1e-9 * scale;
    if (glo - (sl * lo + cl)).abs() > tol || (ghi - (sr * hi + cr)).abs() > tol {
        // bracket not verifiable; fall back to the whole linear span
        lo = pl;
        hi = pr;
    }
    for _ in 0..cfg.depth {
        let mid = 0.5 * (lo + hi);
        if mid <= lo || mid >= hi {
            break;
        }
        let gmid = seg.g(mid)?;
        let dl = (gmid - (sl * mid + cl)).abs();
        let dr = (gmid - (sr * mid + cr)).abs();
        if dl < dr {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    t = 0.5 * (lo + hi);
    // certify with a second difference along the segment
    let eta = (1e-4 * w).min(0.5 * (t - a)).min(0.5 * (b - t));
    let delta = (seg.g(t + eta)? + seg.g(t - eta)? - 2.0 * seg.g(t)?) / eta;
    let floor = (cfg.noise_floor * scale).max(1e-9 * (sl - sr).abs());
    if delta.abs() <= floor {
        return Ok(Step::Split(m, gm));
    }
    Ok(Step::Kink(t, hi - lo, (sr - sl).abs()))
}

fn dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

/// `(f(x + eps h) + f(x - eps h) - 2 f(x)) / eps`. Passing a cached `f(x)`
/// saves one query.
pub fn second_directional_derivative(
    f: &dyn Scalar,
    x: &[f64],
    h: &[f64],
    eps: f64,
    fx: Option<f64>,
) -> Result<f64> {
    let plus: Vec<f64> = x.iter().zip(h).map(|(a, d)| a + eps * d).collect();
    let minus: Vec<f64> = x.iter().zip(h).map(|(a, d)| a - eps * d).collect();
    let f0 = match fx {
        Some(v) => v,
        None => f.value(x)?,
    };
    Ok((f.value(&plus)? + f.value(&minus)? - 2.0 * f0) / eps)
}

/// Input direction `dx` with `M dx = h`, where `M` is the prefix Jacobian at
/// `x`.
pub fn steer_hidden(prefix: &RecoveredPrefix, x: &[f64], h: &[f64]) -> Result<Vec<f64>> {
    if prefix.layers.is_empty() && prefix.pending.is_none() {
        return Ok(h.to_vec());
    }
    let m = prefix.jacobian(x);
    let dx = linalg::steer(&m, &DVector::from_column_slice(h))?;
    Ok(dx.iter().copied().collect())
}

/// True iff every recovered preactivation at `x` is at least `tol` in
/// magnitude.
pub fn filter_prior_layers(prefix: &RecoveredPrefix, x: &[f64], tol: f64) -> bool {
    prefix.min_abs_preactivation(x) >= tol
}

#[derive(Clone, Debug, PartialEq)]
pub struct Cluster {
    pub representative: Vec<f64>,
    pub members: Vec<usize>,
}

/// Groups unit vectors that agree up to sign (angular distance at most
/// `tol`), keeps the `d` largest groups and represents each by its
/// component-wise median.
pub fn filter_by_frequency(candidates: &[Vec<f64>], d: usize, tol: f64) -> Result<Vec<Cluster>> {
    let comps = components(candidates.len(), |i, j| angular_distance(&candidates[i], &candidates[j]) <= tol);
    let mut clusters: Vec<Cluster> = comps
        .into_iter()
        .filter(|c| c.len() >= 2)
        .map(|members| {
            let reference = &candidates[members[0]];
            let dim = reference.len();
            let mut rep = Vec::with_capacity(dim);
            for k in 0..dim {
                let mut vals: Vec<f64> = members
                    .iter()
                    .map(|&m| {
                        let v = &candidates[m];
                        if linalg::dot(v, reference) < 0.0 {
                            -v[k]
                        } else {
                            v[k]
                        }
                    })
                    .collect();
                rep.push(linalg::median(&mut vals));
            }
            Cluster { representative: canonical_unit(&rep), members }
        })
        .collect();
    if clusters.len() < d {
        return Err(AttackError::InsufficientWitnesses(format!(
            "{} recurring weight vectors, need {d}",
            clusters.len()
        )));
    }
    clusters.sort_by(|a, b| {
        b.members
            .len()
            .cmp(&a.members.len())
            .then_with(|| a.representative.partial_cmp(&b.representative).unwrap())
    });
    clusters.truncate(d);
    Ok(clusters)
}

/// Connected components of the graph on `0..n` with edges where `linked`
/// holds. Each component is sorted, and components are ordered by their
/// smallest member.
pub fn components(n: usize, linked: impl Fn(usize, usize) -> bool) -> Vec<Vec<usize>> {
    let mut parent: Vec<usize> = (0..n).collect();
    fn find(p: &mut [usize], mut i: usize) -> usize {
        while p[i] != i {
            p[i] = p[p[i]];
            i = p[i];
        }
        i
    }
    for i in 0..n {
        for j in i + 1..n {
            if linked(i, j) {
                let (a, b) = (find(&mut parent, i), find(&mut parent, j));
                if a != b {
                    parent[a.max(b)] = a.min(b);
                }
            }
        }
    }
    let mut groups: std::collections::BTreeMap<usize, Vec<usize>> = Default::default();
    for i in 0..n {
        let r = find(&mut parent, i);
        groups.entry(r).or_default().push(i);
    }
    groups.into_values().collect()
}

/// Unit norm, first entry with magnitude above 1e-9 made positive.
pub fn canonical_unit(v: &[f64]) -> Vec<f64> {
    let n = linalg::norm(v);
    let sign = v.iter().find(|x| x.abs() > 1e-9 * n).map_or(1.0, |x| x.signum());
    v.iter().map(|x| sign * x / n).collect()
}

/// Walks both endpoints toward their midpoint (each round halves the
/// remaining distance) until their top-m label sets share two labels.
/// Returns the endpoints and the shared labels.
pub fn good_starting_points(
    oracle: &Oracle,
    x1: &[f64],
    x2: &[f64],
    max_steps: usize,
) -> Result<(Vec<f64>, Vec<f64>, Vec<usize>)> {
    let mid: Vec<f64> = x1.iter().zip(x2).map(|(a, b)| 0.5 * (a + b)).collect();
    let (mut a, mut b) = (x1.to_vec(), x2.to_vec());
    for round in 0..=max_steps {
        let la = oracle.query(&a)?.labels();
        let lb = oracle.query(&b)?.labels();
        let shared: Vec<usize> = la.iter().copied().filter(|l| lb.contains(l)).collect();
        if shared.len() >= 2 {
            return Ok((a, b, shared));
        }
        if round == max_steps {
            break;
        }
        for (p, m) in a.iter_mut().zip(&mid) {
            *p = 0.5 * (*p + m);
        }
        for (p, m) in b.iter_mut().zip(&mid) {
            *p = 0.5 * (*p + m);
        }
    }
    Err(AttackError::StartingPoints(max_steps))
}

/// Picks a random ordered pair from `labels` (at least two).
pub fn random_pair<R: Rng + ?Sized>(labels: &[usize], rng: &mut R) -> (usize, usize) {
    let picked: Vec<usize> = labels.choose_multiple(rng, 2).copied().collect();
    (picked[0], picked[1])
}
