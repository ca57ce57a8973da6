//! Small dense linear-algebra helpers on top of `nalgebra`.

use nalgebra::{Cholesky, DMatrix, Dyn, Matrix2, SymmetricEigen};

use crate::error::{Error, Result};

pub type Mat = DMatrix<f64>;

/// `(M + Mᵀ) / 2`.
pub fn symmetrize(m: &Mat) -> Mat {
    (m + m.transpose()) * 0.5
}

pub fn symmetrize_in_place(m: &mut Mat) {
    let n = m.nrows();
    for i in 0..n {
        for j in (i + 1)..n {
            let v = 0.5 * (m[(i, j)] + m[(j, i)]);
            m[(i, j)] = v;
            m[(j, i)] = v;
        }
    }
}

/// Smallest eigenvalue of the symmetric part of `m`.
pub fn min_eigenvalue(m: &Mat) -> f64 {
    if m.nrows() == 0 {
        return 0.0;
    }
    SymmetricEigen::new(symmetrize(m))
        .eigenvalues
        .iter()
        .copied()
        .fold(f64::INFINITY, f64::min)
}

pub fn max_eigenvalue(m: &Mat) -> f64 {
    if m.nrows() == 0 {
        return 0.0;
    }
    SymmetricEigen::new(symmetrize(m))
        .eigenvalues
        .iter()
        .copied()
        .fold(f64::NEG_INFINITY, f64::max)
}

/// Cholesky factorization of a matrix that must be symmetric positive
/// definite; the failure carries the smallest eigenvalue for diagnosis.
pub fn spd_factor(m: &Mat, context: &str) -> Result<Cholesky<f64, Dyn>> {
    match Cholesky::new(symmetrize(m)) {
        Some(c) => Ok(c),
        None => Err(Error::NumericalFailure {
            context: context.to_string(),
            min_eigenvalue: min_eigenvalue(m),
        }),
    }
}

/// `tr(A B)` without forming the product.
pub fn trace_product(a: &Mat, b: &Mat) -> f64 {
    debug_assert_eq!(a.ncols(), b.nrows());
    debug_assert_eq!(a.nrows(), b.ncols());
    let mut acc = 0.0;
    for i in 0..a.nrows() {
        for k in 0..a.ncols() {
            acc += a[(i, k)] * b[(k, i)];
        }
    }
    acc
}

/// Largest singular value.
pub fn spectral_norm(m: &Mat) -> f64 {
    if m.is_empty() {
        return 0.0;
    }
    m.clone()
        .singular_values()
        .iter()
        .copied()
        .fold(0.0, f64::max)
}

/// Relative asymmetry `‖M − Mᵀ‖_F / max(1, ‖M‖_F)`.
pub fn asymmetry(m: &Mat) -> f64 {
    (m - m.transpose()).norm() / m.norm().max(1.0)
}

/// PSD check with a tolerance relative to the spectral scale of `m`.
pub fn is_psd(m: &Mat, rel_tol: f64) -> bool {
    if m.nrows() == 0 {
        return true;
    }
    let eig = SymmetricEigen::new(symmetrize(m)).eigenvalues;
    let max_abs = eig.iter().fold(0.0f64, |a, v| a.max(v.abs()));
    let min = eig.iter().copied().fold(f64::INFINITY, f64::min);
    min >= -rel_tol * max_abs.max(1e-300)
}

/// Clips eigenvalues below `rel_tol·λ_max` to zero when they are (slightly)
/// negative. Returns the reconstructed matrix and whether clipping happened.
pub fn clip_psd(m: &Mat, rel_tol: f64) -> (Mat, bool) {
    let eig = SymmetricEigen::new(symmetrize(m));
    let max_abs = eig.eigenvalues.iter().fold(0.0f64, |a, v| a.max(v.abs()));
    let mut clipped = false;
    let vals = eig.eigenvalues.map(|v| {
        if v < 0.0 {
            clipped = clipped || v < -rel_tol * max_abs;
            0.0
        } else {
            v
        }
    });
    let out = &eig.eigenvectors * Mat::from_diagonal(&vals) * eig.eigenvectors.transpose();
    (out, clipped)
}

/// Eigenvalues of a symmetric 2×2 matrix in closed form, ascending.
pub fn sym2_eigenvalues(m: &Matrix2<f64>) -> (f64, f64) {
    let a = m[(0, 0)];
    let d = m[(1, 1)];
    let b = 0.5 * (m[(0, 1)] + m[(1, 0)]);
    let half_tr = 0.5 * (a + d);
    let disc = (0.25 * (a - d) * (a - d) + b * b).sqrt();
    (half_tr - disc, half_tr + disc)
}

pub fn max_abs_diff(a: &Mat, b: &Mat) -> f64 {
    a.iter()
        .zip(b.iter())
        .fold(0.0f64, |acc, (x, y)| acc.max((x - y).abs()))
}

/// Serde adapter storing a matrix as a list of rows.
pub mod serde_rows {
    use super::Mat;
    use serde::{de::Error as _, Deserialize, Deserializer, Serialize, Serializer};

    pub fn serialize<S: Serializer>(m: &Mat, s: S) -> Result<S::Ok, S::Error> {
        let rows: Vec<Vec<f64>> = (0..m.nrows())
            .map(|i| m.row(i).iter().copied().collect())
            .collect();
        rows.serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Mat, D::Error> {
        let rows = Vec::<Vec<f64>>::deserialize(d)?;
        let nr = rows.len();
        let nc = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != nc) {
            return Err(D::Error::custom("ragged matrix rows"));
        }
        Ok(Mat::from_fn(nr, nc, |i, j| rows[i][j]))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn trace_product_matches_explicit_product() {
        let a = Mat::from_row_slice(2, 3, &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        let b = Mat::from_row_slice(3, 2, &[1.0, -1.0, 0.5, 2.0, 0.0, 3.0]);
        assert!((trace_product(&a, &b) - (&a * &b).trace()).abs() < 1e-14);
    }

    #[test]
    fn sym2_eigenvalues_closed_form() {
        let m = Matrix2::new(2.0, 1.0, 1.0, 2.0);
        let (lo, hi) = sym2_eigenvalues(&m);
        assert!((lo - 1.0).abs() < 1e-15);
        assert!((hi - 3.0).abs() < 1e-15);
    }

    #[test]
    fn factor_failure_reports_min_eigenvalue() {
        let m = Mat::from_row_slice(2, 2, &[1.0, 0.0, 0.0, -0.5]);
        match spd_factor(&m, "test") {
            Err(Error::NumericalFailure { min_eigenvalue, .. }) => {
                assert!((min_eigenvalue + 0.5).abs() < 1e-12)
            }
            other => panic!("expected failure, got {other:?}"),
        }
    }

    #[test]
    fn clip_removes_tiny_negative_eigenvalues() {
        let m = Mat::from_row_slice(2, 2, &[1.0, 0.0, 0.0, -1e-12]);
        let (c, flagged) = clip_psd(&m, 1e-8);
        assert!(!flagged);
        assert!(min_eigenvalue(&c) >= 0.0);
    }
}
