//! Dense linear-algebra helpers on top of `nalgebra`.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::AttackError;

/// Random orthonormal basis of `R^d` (columns), from the QR factorization of
/// a Gaussian matrix.
pub fn random_orthonormal<R: Rng + ?Sized>(d: usize, rng: &mut R) -> DMatrix<f64> {
    let g = DMatrix::from_fn(d, d, |_, _| rng.sample::<f64, _>(StandardNormal));
    let qr = g.qr();
    let mut q = qr.q();
    let r = qr.r();
    // fix column signs so the distribution is uniform and the result stable
    for c in 0..d {
        if r[(c, c)] < 0.0 {
            q.column_mut(c).neg_mut();
        }
    }
    q
}

pub fn gaussian_vector<R: Rng + ?Sized>(d: usize, rng: &mut R) -> Vec<f64> {
    (0..d).map(|_| rng.sample::<f64, _>(StandardNormal)).collect()
}

/// SVD with an explicit iteration cap; the default entry point can stop
/// early and return factors that do not reproduce the input.
fn svd(a: DMatrix<f64>) -> nalgebra::SVD<f64, nalgebra::Dyn, nalgebra::Dyn> {
    a.try_svd(true, true, f64::EPSILON, 100_000).expect("svd converges")
}

/// Thin SVD `a = u diag(s) v_t`, computed on the tall orientation.
fn thin_svd(a: &DMatrix<f64>) -> (DMatrix<f64>, DVector<f64>, DMatrix<f64>) {
    if a.nrows() >= a.ncols() {
        let s = svd(a.clone());
        (s.u.expect("u"), s.singular_values, s.v_t.expect("v_t"))
    } else {
        let s = svd(a.transpose());
        (s.v_t.expect("v_t").transpose(), s.singular_values, s.u.expect("u").transpose())
    }
}

/// Minimum-norm least-squares solution of `a x = b` through the SVD.
/// Returns the solution and the numerical rank.
pub fn lstsq(a: &DMatrix<f64>, b: &DVector<f64>, rcond: f64) -> (DVector<f64>, usize) {
    let (x, rank) = lstsq_multi(a, &DMatrix::from_column_slice(b.len(), 1, b.as_slice()), rcond);
    (x.column(0).into_owned(), rank)
}

/// Same as [`lstsq`] with several right-hand sides. Two rounds of iterative
/// refinement absorb any inaccuracy of the factorization.
pub fn lstsq_multi(a: &DMatrix<f64>, b: &DMatrix<f64>, rcond: f64) -> (DMatrix<f64>, usize) {
    let (u, s, v_t) = thin_svd(a);
    let smax = s.iter().cloned().fold(0.0, f64::max);
    let eps = rcond * smax;
    let rank = s.iter().filter(|&&v| v > eps).count();
    let apply = |rhs: &DMatrix<f64>| {
        let mut ub = u.transpose() * rhs;
        for (r, &v) in s.iter().enumerate() {
            let inv = if v > eps { 1.0 / v } else { 0.0 };
            ub.row_mut(r).scale_mut(inv);
        }
        v_t.transpose() * ub
    };
    let mut x = apply(b);
    for _ in 0..2 {
        let r = b - a * &x;
        x += apply(&r);
    }
    (x, rank)
}

/// Solves the square system `a x = b` by LU; `None` when singular.
pub fn solve_square(a: &DMatrix<f64>, b: &DVector<f64>) -> Option<DVector<f64>> {
    a.clone().lu().solve(b)
}

/// Unit right singular vector of the smallest singular value, together with
/// the smallest and second-smallest singular values.
pub fn null_vector(a: &DMatrix<f64>) -> (DVector<f64>, f64, f64) {
    let n = a.ncols();
    // pad wide systems with zero rows so the null space shows up
    let (_, sv, v_t) = if a.nrows() >= n {
        thin_svd(a)
    } else {
        let mut padded = DMatrix::zeros(n, n);
        padded.rows_mut(0, a.nrows()).copy_from(a);
        thin_svd(&padded)
    };
    let sv = &sv;
    let mut order: Vec<usize> = (0..sv.len()).collect();
    order.sort_by(|&i, &j| sv[i].partial_cmp(&sv[j]).unwrap());
    let smallest = order[0];
    let second = if order.len() > 1 { sv[order[1]] } else { f64::INFINITY };
    (v_t.row(smallest).transpose(), sv[smallest], second)
}

/// Condition number (ratio of extreme singular values).
pub fn condition_number(a: &DMatrix<f64>) -> f64 {
    let sv = thin_svd(a).1;
    let max = sv.iter().cloned().fold(0.0, f64::max);
    let min = sv.iter().cloned().fold(f64::INFINITY, f64::min);
    if min == 0.0 {
        f64::INFINITY
    } else {
        max / min
    }
}

/// Solves `m dx = h` for the minimum-norm `dx`; errors when `m` does not have
/// full row rank.
pub fn steer(m: &DMatrix<f64>, h: &DVector<f64>) -> Result<DVector<f64>, AttackError> {
    let (dx, rank) = lstsq(m, h, 1e-10);
    if rank < m.nrows() {
        return Err(AttackError::Expansive(format!(
            "local prefix map has rank {rank} < {} hidden coordinates",
            m.nrows()
        )));
    }
    let resid = (m * &dx - h).norm();
    if resid > 1e-8 * h.norm().max(f64::MIN_POSITIVE) {
        return Err(AttackError::Singular(format!("steering residual {resid:e}")));
    }
    Ok(dx)
}

pub fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// `1 - |cos|` between two vectors; invariant under sign flips of either.
pub fn angular_distance(a: &[f64], b: &[f64]) -> f64 {
    let na = norm(a);
    let nb = norm(b);
    if na == 0.0 || nb == 0.0 {
        return 1.0;
    }
    (1.0 - (dot(a, b) / (na * nb)).abs()).max(0.0)
}

/// Angle between the lines spanned by `a` and `b`, accurate for tiny angles
/// (unlike `acos` of the cosine).
pub fn line_angle(a: &[f64], b: &[f64]) -> f64 {
    let na = norm(a);
    let nb = norm(b);
    if na == 0.0 || nb == 0.0 {
        return std::f64::consts::FRAC_PI_2;
    }
    let s = if dot(a, b) < 0.0 { -1.0 } else { 1.0 };
    let chord = a.iter().zip(b).map(|(x, y)| (x / na - s * y / nb).powi(2)).sum::<f64>().sqrt();
    2.0 * (0.5 * chord).asin()
}

pub fn median(values: &mut [f64]) -> f64 {
    assert!(!values.is_empty());
    values.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let n = values.len();
    if n % 2 == 1 {
        values[n / 2]
    } else {
        0.5 * (values[n / 2 - 1] + values[n / 2])
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn orthonormal_basis_is_orthonormal() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let q = random_orthonormal(7, &mut rng);
        let err = (q.transpose() * &q - DMatrix::identity(7, 7)).abs().max();
        assert!(err < 1e-14);
        assert!((condition_number(&q) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn lstsq_recovers_exact_solution() {
        let a = DMatrix::from_row_slice(4, 2, &[1.0, 0.0, 0.0, 1.0, 1.0, 1.0, 2.0, -1.0]);
        let x = DVector::from_vec(vec![0.5, -3.0]);
        let (sol, rank) = lstsq(&a, &(&a * &x), 1e-12);
        assert_eq!(rank, 2);
        assert!((sol - x).norm() < 1e-14);
    }

    #[test]
    fn null_vector_of_incidence_rows() {
        // points on the plane x - 2y + 0.5 = 0
        let pts = [(0.5, 0.5), (1.5, 1.0), (-0.5, 0.0), (2.5, 1.5)];
        let a = DMatrix::from_fn(4, 3, |r, c| match c {
            0 => pts[r].0,
            1 => pts[r].1,
            _ => 1.0,
        });
        let (v, s0, s1) = null_vector(&a);
        assert!(s0 < 1e-14 && s1 > 1e-3);
        let scale = v[0];
        assert!((v[1] / scale + 2.0).abs() < 1e-13);
        assert!((v[2] / scale - 0.5).abs() < 1e-13);
    }

    #[test]
    fn steer_reports_rank_deficiency() {
        let m = DMatrix::from_row_slice(3, 2, &[1.0, 0.0, 0.0, 1.0, 1.0, 1.0]);
        let h = DVector::from_vec(vec![1.0, 0.0, 0.0]);
        assert!(matches!(steer(&m, &h), Err(AttackError::Expansive(_))));
        let m = DMatrix::from_row_slice(2, 3, &[1.0, 2.0, 0.0, 0.0, 1.0, 1.0]);
        let h = DVector::from_vec(vec![1.0, -1.0]);
        let dx = steer(&m, &h).unwrap();
        assert!((m * dx - h).norm() < 1e-14);
    }

    #[test]
    fn angular_distance_sign_invariant() {
        assert!(angular_distance(&[1.0, 2.0], &[-2.0, -4.0]) < 1e-15);
        assert!((angular_distance(&[1.0, 0.0], &[0.0, 1.0]) - 1.0).abs() < 1e-15);
    }

    #[test]
    fn wide_solves_stay_exact() {
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(9);
        for _ in 0..200 {
            let mut m = DMatrix::from_fn(10, 20, |_, _| gaussian_vector(1, &mut rng)[0]);
            for r in 4..10 {
                m.row_mut(r).scale_mut(0.01);
            }
            let h = DVector::from_vec(gaussian_vector(10, &mut rng));
            let dx = steer(&m, &h).unwrap();
            assert!((&m * dx - &h).norm() <= 1e-12 * h.norm());
        }
    }
}
