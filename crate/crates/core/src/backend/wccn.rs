//! Within-class covariance normalization.

use std::path::Path;

use nalgebra::{DMatrix, DVector};

use super::{check_labeled, class_groups};
use crate::binio::{Reader, Writer};
use crate::error::{Error, Result};
use crate::linalg;

pub const WCCN_MAGIC: &[u8; 4] = b"SVWC";

/// Transform `x -> B' x` with `B B' = W^-1`, `W` the class-averaged
/// within-class covariance. `B` is upper triangular.
#[derive(Debug, Clone, PartialEq)]
pub struct WccnModel {
    b: DMatrix<f64>,
}

impl WccnModel {
    pub fn b(&self) -> &DMatrix<f64> {
        &self.b
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut w = Writer::new(WCCN_MAGIC);
        w.u32(self.b.nrows()).matrix(&self.b);
        w.save(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut r = Reader::open(path, WCCN_MAGIC)?;
        let d = r.u32()?;
        r.expect_payload(d * d, 8)?;
        Ok(WccnModel { b: r.matrix(d, d)? })
    }
}

/// `(1/S) sum_i (1/U_i) sum_j (x_ij - mu_i)(x_ij - mu_i)'`
pub fn average_within_class_covariance(x: &DMatrix<f64>, labels: &[usize]) -> Result<DMatrix<f64>> {
    check_labeled(x, labels)?;
    let d = x.nrows();
    let groups = class_groups(labels);
    let mut w = DMatrix::zeros(d, d);
    for members in groups.values() {
        let cls = x.select_columns(members);
        let mean = cls.column_mean();
        let mut cov = DMatrix::zeros(d, d);
        for col in cls.column_iter() {
            let e = col - &mean;
            cov += &e * e.transpose();
        }
        w += cov / members.len() as f64;
    }
    w /= groups.len() as f64;
    linalg::symmetrize(&mut w);
    Ok(w)
}

/// `regularization` is added to the diagonal of `W`; with zero regularization a
/// singular `W` is an error.
pub fn fit_wccn(x: &DMatrix<f64>, labels: &[usize], regularization: f64) -> Result<WccnModel> {
    let mut w = average_within_class_covariance(x, labels)?;
    for i in 0..w.nrows() {
        w[(i, i)] += regularization;
    }
    let chol = linalg::cholesky_with_hint(
        &w,
        "within-class covariance",
        "; classes need at least two samples or a positive regularization",
    )?;
    // W = L L'  =>  B = L^-T gives B B' = W^-1
    let l_inv = chol
        .l()
        .solve_lower_triangular(&DMatrix::identity(w.nrows(), w.nrows()))
        .ok_or(Error::Singular {
            context: "within-class covariance",
            hint: "",
        })?;
    Ok(WccnModel { b: l_inv.transpose() })
}

pub fn apply_wccn(model: &WccnModel, x: &DVector<f64>) -> Result<DVector<f64>> {
    if x.len() != model.b.nrows() {
        return Err(Error::DimensionMismatch {
            context: "embedding dimension vs. WCCN",
            expected: model.b.nrows(),
            got: x.len(),
        });
    }
    Ok(model.b.tr_mul(x))
}
