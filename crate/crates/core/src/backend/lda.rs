//! Linear discriminant analysis via the symmetric generalized eigenproblem
//! `S_b w = lambda S_w w`.

use std::path::Path;

use log::warn;
use nalgebra::{DMatrix, DVector, SymmetricEigen};

use super::{check_labeled, class_groups};
use crate::binio::{Reader, Writer};
use crate::error::{Error, Result};
use crate::linalg;

pub const LDA_MAGIC: &[u8; 4] = b"SVLD";

/// Default projection size.
pub const DEFAULT_LDA_DIM: usize = 200;

#[derive(Debug, Clone, PartialEq)]
pub struct LdaModel {
    /// `D x d`, columns `S_w`-orthonormal, by descending eigenvalue.
    w: DMatrix<f64>,
    eigenvalues: DVector<f64>,
}

impl LdaModel {
    pub fn projection(&self) -> &DMatrix<f64> {
        &self.w
    }

    pub fn eigenvalues(&self) -> &DVector<f64> {
        &self.eigenvalues
    }

    pub fn output_dim(&self) -> usize {
        self.w.ncols()
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut w = Writer::new(LDA_MAGIC);
        w.u32(self.w.nrows()).u32(self.w.ncols());
        w.f64s(self.eigenvalues.iter()).matrix(&self.w);
        w.save(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut r = Reader::open(path, LDA_MAGIC)?;
        let d = r.u32()?;
        let k = r.u32()?;
        r.expect_payload(k + d * k, 8)?;
        let eigenvalues = r.vector(k)?;
        let w = r.matrix(d, k)?;
        Ok(LdaModel { w, eigenvalues })
    }
}

/// Between- and within-class scatter, both normalized by the sample count.
pub fn scatter_matrices(x: &DMatrix<f64>, labels: &[usize]) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
    check_labeled(x, labels)?;
    let d = x.nrows();
    let n = x.ncols() as f64;
    let mean = x.column_mean();
    let mut sb = DMatrix::zeros(d, d);
    let mut sw = DMatrix::zeros(d, d);
    for members in class_groups(labels).values() {
        let cls = x.select_columns(members);
        let mu = cls.column_mean();
        let dm = &mu - &mean;
        sb += &dm * dm.transpose() * members.len() as f64;
        for col in cls.column_iter() {
            let e = col - &mu;
            sw += &e * e.transpose();
        }
    }
    sb /= n;
    sw /= n;
    linalg::symmetrize(&mut sb);
    linalg::symmetrize(&mut sw);
    Ok((sb, sw))
}

pub fn fit_lda(x: &DMatrix<f64>, labels: &[usize], out_dim: usize) -> Result<LdaModel> {
    let classes = class_groups(labels).len();
    if classes < 2 {
        return Err(Error::InvalidArgument("LDA needs at least two classes".into()));
    }
    let rank = x.nrows().min(classes - 1);
    if out_dim == 0 || out_dim > rank {
        return Err(Error::RankExceeded {
            requested: out_dim,
            rank,
        });
    }
    let (sb, sw) = scatter_matrices(x, labels)?;
    let chol = linalg::cholesky_with_hint(
        &sw,
        "within-class scatter",
        "; reduce the embedding dimension or add samples",
    )?;
    // M = L^-1 S_b L^-T, eigenvectors v give w = L^-T v
    let l = chol.l();
    let l_inv = l
        .solve_lower_triangular(&DMatrix::identity(sw.nrows(), sw.nrows()))
        .ok_or(Error::Singular {
            context: "within-class scatter",
            hint: "",
        })?;
    let mut m = &l_inv * &sb * l_inv.transpose();
    linalg::symmetrize(&mut m);
    let eig = SymmetricEigen::new(m);
    let mut order: Vec<usize> = (0..eig.eigenvalues.len()).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]).then(a.cmp(&b)));
    let top = eig.eigenvalues[order[0]];
    if top <= 1e-12 {
        return Err(Error::Degenerate(
            "between-class scatter vanishes: all class means coincide".into(),
        ));
    }
    let kept = &order[..out_dim];
    let small = kept.iter().filter(|&&i| eig.eigenvalues[i] <= 1e-10 * top).count();
    if small > 0 {
        warn!("{small} of {out_dim} LDA directions have a zero eigenvalue");
    }
    let v = eig.eigenvectors.select_columns(kept);
    let mut w = l_inv.transpose() * v;
    // fix the sign so the largest-magnitude entry of each direction is positive
    for mut col in w.column_iter_mut() {
        let imax = col.iamax();
        if col[imax] < 0.0 {
            col.neg_mut();
        }
    }
    let eigenvalues = DVector::from_iterator(out_dim, kept.iter().map(|&i| eig.eigenvalues[i]));
    Ok(LdaModel { w, eigenvalues })
}

pub fn apply_lda(model: &LdaModel, x: &DVector<f64>) -> Result<DVector<f64>> {
    if x.len() != model.w.nrows() {
        return Err(Error::DimensionMismatch {
            context: "embedding dimension vs. LDA",
            expected: model.w.nrows(),
            got: x.len(),
        });
    }
    Ok(model.w.tr_mul(x))
}
