//! Small dense helpers on top of nalgebra.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};

use crate::error::{Error, Result};

/// Cholesky factor of a symmetric positive-definite matrix.
///
/// Rejects matrices whose smallest pivot is negligible next to the largest,
/// which nalgebra would otherwise happily factor.
pub fn cholesky(m: &DMatrix<f64>, context: &'static str) -> Result<Cholesky<f64, Dyn>> {
    cholesky_with_hint(m, context, "")
}

pub fn cholesky_with_hint(m: &DMatrix<f64>, context: &'static str, hint: &'static str) -> Result<Cholesky<f64, Dyn>> {
    let singular = Error::Singular { context, hint };
    if m.iter().any(|v| !v.is_finite()) {
        return Err(singular);
    }
    let chol = Cholesky::new(m.clone()).ok_or(Error::Singular { context, hint })?;
    let l = chol.l_dirty();
    let diag = (0..l.nrows()).map(|i| l[(i, i)]);
    let (lo, hi) = diag.fold((f64::INFINITY, 0.0f64), |(lo, hi), d| (lo.min(d), hi.max(d)));
    // pivots are square roots, so compare squared ratio against f64 precision
    if l.nrows() > 0 && (lo <= 0.0 || (lo / hi).powi(2) < 1e-14 * l.nrows() as f64) {
        return Err(singular);
    }
    Ok(chol)
}

pub fn log_det(chol: &Cholesky<f64, Dyn>) -> f64 {
    let l = chol.l_dirty();
    2.0 * (0..l.nrows()).map(|i| l[(i, i)].ln()).sum::<f64>()
}

pub fn symmetrize(m: &mut DMatrix<f64>) {
    let n = m.nrows();
    for i in 0..n {
        for j in (i + 1)..n {
            let v = 0.5 * (m[(i, j)] + m[(j, i)]);
            m[(i, j)] = v;
            m[(j, i)] = v;
        }
    }
}

/// Columns as vectors.
pub fn columns(m: &DMatrix<f64>) -> Vec<DVector<f64>> {
    m.column_iter().map(|c| c.into_owned()).collect()
}

/// Stacks equal-length vectors as the columns of a matrix.
pub fn from_columns(cols: &[DVector<f64>]) -> DMatrix<f64> {
    let rows = cols.first().map_or(0, |c| c.len());
    let mut m = DMatrix::zeros(rows, cols.len());
    for (j, c) in cols.iter().enumerate() {
        m.set_column(j, c);
    }
    m
}

/// Principal angles (radians, ascending) between the column spans of `a` and `b`.
pub fn principal_angles(a: &DMatrix<f64>, b: &DMatrix<f64>) -> Vec<f64> {
    let qa = a.clone().qr().q();
    let qb = b.clone().qr().q();
    let s = (qa.transpose() * qb).singular_values();
    let mut angles: Vec<f64> = s.iter().map(|c| c.clamp(-1.0, 1.0).acos()).collect();
    angles.sort_by(f64::total_cmp);
    angles
}
