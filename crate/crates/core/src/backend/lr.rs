//! Linear-regression speaker space.
//!
//! Development embeddings `X` (`D x N`, one column per utterance) are regressed
//! onto one-hot speaker targets `Y` (`S x N`):
//!
//! ```text
//! A = (X X' + lambda I)^-1 X Y'
//! ```
//!
//! and any embedding is mapped into the speaker space by `A' x`. With
//! `lambda = 0` this is the plain least-squares solution.

use std::path::Path;

use nalgebra::{DMatrix, DVector};

use crate::binio::{Reader, Writer};
use crate::error::{Error, Result};
use crate::linalg;

pub const LR_MAGIC: &[u8; 4] = b"SVLR";

/// Scale of the default ridge relative to the mean diagonal of `X X'`.
pub const DEFAULT_RIDGE_SCALE: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq)]
pub struct LrModel {
    /// `D x S`
    a: DMatrix<f64>,
    ridge: f64,
    /// Subtracted from embeddings before the map, when fitted with centering.
    center: Option<DVector<f64>>,
}

impl LrModel {
    pub fn a(&self) -> &DMatrix<f64> {
        &self.a
    }

    pub fn ridge(&self) -> f64 {
        self.ridge
    }

    pub fn center(&self) -> Option<&DVector<f64>> {
        self.center.as_ref()
    }

    pub fn input_dim(&self) -> usize {
        self.a.nrows()
    }

    pub fn n_speakers(&self) -> usize {
        self.a.ncols()
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut w = Writer::new(LR_MAGIC);
        w.u32(self.input_dim())
            .u32(self.n_speakers())
            .u32(usize::from(self.center.is_some()));
        w.f64(self.ridge).matrix(&self.a);
        if let Some(c) = &self.center {
            w.f64s(c.iter());
        }
        w.save(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut r = Reader::open(path, LR_MAGIC)?;
        let d = r.u32()?;
        let s = r.u32()?;
        let centered = r.u32()? != 0;
        r.expect_payload(1 + d * s + if centered { d } else { 0 }, 8)?;
        let ridge = r.f64()?;
        let a = r.matrix(d, s)?;
        let center = if centered { Some(r.vector(d)?) } else { None };
        Ok(LrModel { a, ridge, center })
    }
}

/// `S x N` one-hot targets for speaker indices `labels`.
pub fn indicator_matrix(labels: &[usize], n_speakers: usize) -> Result<DMatrix<f64>> {
    if let Some(&bad) = labels.iter().find(|&&k| k >= n_speakers) {
        return Err(Error::InvalidArgument(format!(
            "speaker index {bad} out of range for {n_speakers} speakers"
        )));
    }
    Ok(DMatrix::from_fn(n_speakers, labels.len(), |i, j| {
        if labels[j] == i {
            1.0
        } else {
            0.0
        }
    }))
}

/// `1e-6 * trace(X X') / D`
pub fn default_ridge(x: &DMatrix<f64>) -> f64 {
    DEFAULT_RIDGE_SCALE * x.norm_squared() / x.nrows().max(1) as f64
}

fn check_indicators(y: &DMatrix<f64>) -> Result<()> {
    for (j, col) in y.column_iter().enumerate() {
        let ones = col.iter().filter(|v| **v == 1.0).count();
        let zeros = col.iter().filter(|v| **v == 0.0).count();
        if ones != 1 || ones + zeros != col.len() {
            return Err(Error::InvalidArgument(format!(
                "target column {j} is not an indicator vector"
            )));
        }
    }
    Ok(())
}

/// Closed-form ridge/least-squares fit. `ridge = 0` demands a nonsingular `X X'`.
pub fn fit_lr(x: &DMatrix<f64>, y: &DMatrix<f64>, ridge: f64) -> Result<LrModel> {
    if x.ncols() == 0 || x.nrows() == 0 {
        return Err(Error::InvalidArgument("no development embeddings".into()));
    }
    if y.ncols() != x.ncols() {
        return Err(Error::DimensionMismatch {
            context: "targets vs. embeddings column count",
            expected: x.ncols(),
            got: y.ncols(),
        });
    }
    if !(ridge >= 0.0 && ridge.is_finite()) {
        return Err(Error::InvalidArgument(format!(
            "ridge must be nonnegative, got {ridge}"
        )));
    }
    check_indicators(y)?;
    let d = x.nrows();
    let mut gram = x * x.transpose();
    for i in 0..d {
        gram[(i, i)] += ridge;
    }
    let hint = if ridge == 0.0 {
        "; X X' is rank deficient, fit with a positive ridge"
    } else {
        ""
    };
    let chol = linalg::cholesky_with_hint(&gram, "linear-regression normal equations", hint)?;
    let a = chol.solve(&(x * y.transpose()));
    Ok(LrModel { a, ridge, center: None })
}

/// As [`fit_lr`] after subtracting the mean development embedding; the mean
/// is stored and removed from every embedding at transform time.
pub fn fit_lr_centered(x: &DMatrix<f64>, y: &DMatrix<f64>, ridge: f64) -> Result<LrModel> {
    let mean = x.column_mean();
    let mut xc = x.clone();
    for mut col in xc.column_iter_mut() {
        col -= &mean;
    }
    let mut model = fit_lr(&xc, y, ridge)?;
    model.center = Some(mean);
    Ok(model)
}

/// `A' x`
pub fn lr_transform(model: &LrModel, x: &DVector<f64>) -> Result<DVector<f64>> {
    if x.len() != model.input_dim() {
        return Err(Error::DimensionMismatch {
            context: "embedding dimension vs. LR model",
            expected: model.input_dim(),
            got: x.len(),
        });
    }
    Ok(match &model.center {
        Some(c) => model.a.tr_mul(&(x - c)),
        None => model.a.tr_mul(x),
    })
}

/// Largest absolute entry of `(X X' + lambda I) A - X Y'`, i.e. half the
/// gradient of the penalized squared error at the returned `A`.
pub fn normal_equation_residual(model: &LrModel, x: &DMatrix<f64>, y: &DMatrix<f64>) -> f64 {
    let mut lhs = x * (x.transpose() * &model.a);
    lhs += &model.a * model.ridge;
    (lhs - x * y.transpose()).amax()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn identity_collapses() {
        let i2 = DMatrix::identity(2, 2);
        let m = fit_lr(&i2, &i2, 0.0).unwrap();
        assert_eq!(m.a(), &i2);
        let m = fit_lr(&i2, &i2, 0.5).unwrap();
        assert!((m.a() - &i2 * (2.0 / 3.0)).amax() < 1e-15);
    }

    #[test]
    fn singular_without_ridge() {
        let x = DMatrix::from_row_slice(3, 2, &[1.0, 0.0, 0.0, 1.0, 0.0, 0.0]);
        let y = indicator_matrix(&[0, 1], 2).unwrap();
        let err = fit_lr(&x, &y, 0.0).unwrap_err();
        assert!(matches!(err, Error::Singular { .. }));
        assert!(err.to_string().contains("ridge"));
        assert!(fit_lr(&x, &y, default_ridge(&x)).is_ok());
    }

    #[test]
    fn rejects_non_indicator_targets() {
        let x = DMatrix::identity(2, 2);
        let y = DMatrix::from_row_slice(2, 2, &[1.0, 1.0, 1.0, 0.0]);
        assert!(fit_lr(&x, &y, 0.0).is_err());
        assert!(indicator_matrix(&[0, 3], 2).is_err());
    }

    #[test]
    fn transform_cases() {
        let m = fit_lr(&DMatrix::identity(3, 3), &DMatrix::identity(3, 3), 0.0).unwrap();
        let x = DVector::from_vec(vec![1.0, -2.0, 0.5]);
        assert_eq!(lr_transform(&m, &x).unwrap(), x);
        assert_eq!(lr_transform(&m, &DVector::zeros(3)).unwrap(), DVector::zeros(3));
        assert!(lr_transform(&m, &DVector::zeros(2)).is_err());

        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let a = DMatrix::from_fn(3, 2, |_, _| rng.random_range(-1.0..1.0));
        let model = LrModel {
            a: a.clone(),
            ridge: 0.0,
            center: None,
        };
        let y = lr_transform(&model, &x).unwrap();
        for s in 0..2 {
            let want: f64 = (0..3).map(|d| a[(d, s)] * x[d]).sum();
            assert!((y[s] - want).abs() < 1e-12);
        }
    }

    #[test]
    fn centered_fit_subtracts_mean() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = DMatrix::from_fn(3, 12, |_, _| rng.random_range(-1.0..1.0) + 5.0);
        let labels: Vec<usize> = (0..12).map(|j| j % 3).collect();
        let y = indicator_matrix(&labels, 3).unwrap();
        let m = fit_lr_centered(&x, &y, 0.0).unwrap();
        let mean = x.column_mean();
        assert!(lr_transform(&m, &mean).unwrap().amax() < 1e-12);
    }

    #[test]
    fn lr_file_roundtrip() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = DMatrix::from_fn(3, 10, |_, _| rng.random_range(-1.0..1.0));
        let labels: Vec<usize> = (0..10).map(|j| j % 2).collect();
        let y = indicator_matrix(&labels, 2).unwrap();
        let dir = tempfile::tempdir().unwrap();
        for m in [fit_lr(&x, &y, 0.1).unwrap(), fit_lr_centered(&x, &y, 0.0).unwrap()] {
            let p = dir.path().join("lr.svlr");
            m.save(&p).unwrap();
            assert_eq!(LrModel::load(&p).unwrap(), m);
        }
    }
}
