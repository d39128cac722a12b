//! Small dense linear-algebra helpers shared by the solvers.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

pub type Mat = DMatrix<f64>;
pub type Vector = DVector<f64>;

pub fn symmetrize(m: &Mat) -> Mat {
    (m + m.transpose()) * 0.5
}

pub fn asymmetry(m: &Mat) -> f64 {
    (m - m.transpose()).amax()
}

/// Eigenvalues of the symmetric part, ascending.
pub fn sym_eigenvalues(m: &Mat) -> Vec<f64> {
    if m.nrows() == 0 {
        return Vec::new();
    }
    let mut ev: Vec<f64> = symmetrize(m).symmetric_eigenvalues().iter().copied().collect();
    ev.sort_by(|a, b| a.total_cmp(b));
    ev
}

pub fn min_sym_eigenvalue(m: &Mat) -> f64 {
    sym_eigenvalues(m).first().copied().unwrap_or(f64::INFINITY)
}

pub fn max_sym_eigenvalue(m: &Mat) -> f64 {
    sym_eigenvalues(m).last().copied().unwrap_or(f64::NEG_INFINITY)
}

pub fn is_positive_definite(m: &Mat) -> bool {
    m.is_square() && asymmetry(m) <= 1e-9 * (1.0 + m.amax()) && min_sym_eigenvalue(m) > 0.0
}

pub fn is_positive_semidefinite(m: &Mat) -> bool {
    m.is_square() && asymmetry(m) <= 1e-9 * (1.0 + m.amax()) && min_sym_eigenvalue(m) >= -1e-12
}

pub fn spectral_radius(m: &Mat) -> f64 {
    if m.nrows() == 0 {
        return 0.0;
    }
    m.complex_eigenvalues()
        .iter()
        .map(|c| c.norm())
        .fold(0.0, f64::max)
}

pub fn singular_values(m: &Mat) -> Vec<f64> {
    let mut s: Vec<f64> = m.singular_values().iter().copied().collect();
    s.sort_by(|a, b| b.total_cmp(a));
    s
}

pub fn min_singular_value(m: &Mat) -> f64 {
    singular_values(m).last().copied().unwrap_or(0.0)
}

pub fn condition_number(m: &Mat) -> f64 {
    let s = singular_values(m);
    match (s.first(), s.last()) {
        (Some(&hi), Some(&lo)) if lo > 0.0 => hi / lo,
        (Some(_), Some(_)) => f64::INFINITY,
        _ => 1.0,
    }
}

pub fn inverse(m: &Mat, what: &'static str) -> Result<Mat> {
    if m.nrows() == 0 {
        return Ok(Mat::zeros(0, 0));
    }
    if condition_number(m) > 1e13 {
        return Err(Error::Singular(what));
    }
    m.clone().try_inverse().ok_or(Error::Singular(what))
}

/// Solves `m x = rhs` with an LU factorisation.
pub fn solve(m: &Mat, rhs: &Mat, what: &'static str) -> Result<Mat> {
    if m.nrows() == 0 {
        return Ok(Mat::zeros(0, rhs.ncols()));
    }
    if condition_number(m) > 1e13 {
        return Err(Error::Singular(what));
    }
    m.clone().lu().solve(rhs).ok_or(Error::Singular(what))
}

/// Solves the discrete Lyapunov equation `P = Aᵀ P A + Q` for Schur-stable `A`.
pub fn discrete_lyapunov(a: &Mat, q: &Mat) -> Result<Mat> {
    let n = a.nrows();
    let rho = spectral_radius(a);
    if rho >= 1.0 {
        return Err(Error::NotAdmissible { spectral_radius: rho });
    }
    let at = a.transpose();
    let lhs = Mat::identity(n * n, n * n) - at.kronecker(&at);
    let rhs = Vector::from_column_slice(q.as_slice());
    let vec_p = lhs
        .lu()
        .solve(&rhs)
        .ok_or(Error::Singular("discrete Lyapunov equation"))?;
    Ok(symmetrize(&Mat::from_column_slice(n, n, vec_p.as_slice())))
}

/// Rank with a tolerance relative to the largest singular value.
pub fn numerical_rank(m: &Mat, rel_tol: f64) -> usize {
    let s = singular_values(m);
    let Some(&top) = s.first() else { return 0 };
    if top == 0.0 {
        return 0;
    }
    s.iter().filter(|&&v| v > rel_tol * top).count()
}

pub fn all_finite(m: &Mat) -> bool {
    m.iter().all(|v| v.is_finite())
}

/// Stacks matrices with equal column counts vertically.
pub fn vstack(parts: &[&Mat], ncols: usize) -> Mat {
    let rows: usize = parts.iter().map(|p| p.nrows()).sum();
    let mut out = Mat::zeros(rows, ncols);
    let mut r = 0;
    for p in parts {
        out.view_mut((r, 0), (p.nrows(), ncols)).copy_from(*p);
        r += p.nrows();
    }
    out
}

/// Concatenates matrices with equal row counts horizontally.
pub fn hstack(parts: &[&Mat], nrows: usize) -> Mat {
    let cols: usize = parts.iter().map(|p| p.ncols()).sum();
    let mut out = Mat::zeros(nrows, cols);
    let mut c = 0;
    for p in parts {
        out.view_mut((0, c), (nrows, p.ncols())).copy_from(*p);
        c += p.ncols();
    }
    out
}

pub fn quad_form(m: &Mat, v: &Vector) -> f64 {
    v.dot(&(m * v))
}

pub fn mat_from_rows(rows: &[Vec<f64>]) -> Mat {
    let r = rows.len();
    let c = rows.first().map_or(0, |row| row.len());
    Mat::from_fn(r, c, |i, j| rows[i][j])
}

pub fn mat_to_rows(m: &Mat) -> Vec<Vec<f64>> {
    (0..m.nrows())
        .map(|i| (0..m.ncols()).map(|j| m[(i, j)]).collect())
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn lyapunov_matches_series() {
        let a = Mat::from_row_slice(2, 2, &[0.5, 0.2, -0.1, 0.7]);
        let q = Mat::identity(2, 2);
        let p = discrete_lyapunov(&a, &q).unwrap();
        let mut series = Mat::zeros(2, 2);
        let mut ak = Mat::identity(2, 2);
        for _ in 0..400 {
            series += ak.transpose() * &q * &ak;
            ak = &ak * &a;
        }
        assert!((p - series).amax() < 1e-12);
    }

    #[test]
    fn lyapunov_rejects_unstable() {
        let a = Mat::from_row_slice(1, 1, &[1.1]);
        assert!(matches!(
            discrete_lyapunov(&a, &Mat::identity(1, 1)),
            Err(Error::NotAdmissible { .. })
        ));
    }

    #[test]
    fn spectral_radius_of_rotation() {
        let a = Mat::from_row_slice(2, 2, &[0.0, -0.5, 0.5, 0.0]);
        assert!((spectral_radius(&a) - 0.5).abs() < 1e-12);
    }

    #[test]
    fn rank_of_outer_product() {
        let v = Vector::from_vec(vec![1.0, 2.0, 3.0]);
        assert_eq!(numerical_rank(&(&v * v.transpose()), 1e-10), 1);
    }
}
