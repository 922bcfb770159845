//! Simplified PLDA: `x = mu + Phi h + e`, `h ~ N(0, I)` shared by all of a
//! speaker's vectors, `e ~ N(0, S_w)` per vector. With a full-rank `Phi` this
//! is the two-covariance model with between-class covariance `Phi Phi'`.
//!
//! Verification scores are the log-likelihood ratio of "same speaker" versus
//! "different speakers" for a pair of vectors.

use std::path::Path;

use log::warn;
use nalgebra::{DMatrix, DVector, SymmetricEigen};

use super::{check_labeled, class_groups};
use crate::binio::{Reader, Writer};
use crate::error::{Error, Result};
use crate::linalg;

pub const PLDA_MAGIC: &[u8; 4] = b"SVPL";

#[derive(Debug, Clone, PartialEq)]
pub struct PldaModel {
    mean: DVector<f64>,
    /// `D x q`
    phi: DMatrix<f64>,
    /// `D x D`
    sigma_w: DMatrix<f64>,
    scoring: PairScoring,
}

/// `score(a, b) = a'Qa/2 + b'Qb/2 + a'Pb + k` for centred `a`, `b`.
#[derive(Debug, Clone, PartialEq)]
struct PairScoring {
    q: DMatrix<f64>,
    p: DMatrix<f64>,
    k: f64,
}

impl PldaModel {
    pub fn new(mean: DVector<f64>, phi: DMatrix<f64>, sigma_w: DMatrix<f64>) -> Result<Self> {
        let d = mean.len();
        if phi.nrows() != d || sigma_w.shape() != (d, d) {
            return Err(Error::DimensionMismatch {
                context: "PLDA parameter shapes",
                expected: d,
                got: phi.nrows(),
            });
        }
        let scoring = PairScoring::new(&phi, &sigma_w)?;
        Ok(PldaModel {
            mean,
            phi,
            sigma_w,
            scoring,
        })
    }

    pub fn mean(&self) -> &DVector<f64> {
        &self.mean
    }

    pub fn phi(&self) -> &DMatrix<f64> {
        &self.phi
    }

    pub fn between_covariance(&self) -> DMatrix<f64> {
        &self.phi * self.phi.transpose()
    }

    pub fn within_covariance(&self) -> &DMatrix<f64> {
        &self.sigma_w
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut w = Writer::new(PLDA_MAGIC);
        w.u32(self.dim()).u32(self.phi.ncols());
        w.f64s(self.mean.iter()).matrix(&self.phi).matrix(&self.sigma_w);
        w.save(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut r = Reader::open(path, PLDA_MAGIC)?;
        let d = r.u32()?;
        let q = r.u32()?;
        r.expect_payload(d + d * q + d * d, 8)?;
        let mean = r.vector(d)?;
        let phi = r.matrix(d, q)?;
        let sigma_w = r.matrix(d, d)?;
        PldaModel::new(mean, phi, sigma_w)
    }
}

impl PairScoring {
    fn new(phi: &DMatrix<f64>, sigma_w: &DMatrix<f64>) -> Result<Self> {
        let sb = phi * phi.transpose();
        let st = &sb + sigma_w;
        let st_chol = linalg::cholesky(&st, "PLDA total covariance")?;
        let st_inv = st_chol.inverse();
        let mut cond = &st - &sb * &st_inv * &sb;
        linalg::symmetrize(&mut cond);
        let cond_chol = linalg::cholesky(&cond, "PLDA conditional covariance")?;
        let gamma = cond_chol.inverse();
        let mut q = &st_inv - &gamma;
        let mut p = &st_inv * &sb * &gamma;
        linalg::symmetrize(&mut q);
        linalg::symmetrize(&mut p);
        let k = 0.5 * linalg::log_det(&st_chol) - 0.5 * linalg::log_det(&cond_chol);
        Ok(PairScoring { q, p, k })
    }
}

/// Same-versus-different speaker log-likelihood ratio; symmetric in its arguments.
pub fn plda_score(model: &PldaModel, m1: &DVector<f64>, m2: &DVector<f64>) -> Result<f64> {
    for v in [m1, m2] {
        if v.len() != model.dim() {
            return Err(Error::DimensionMismatch {
                context: "vector dimension vs. PLDA",
                expected: model.dim(),
                got: v.len(),
            });
        }
    }
    let a = m1 - &model.mean;
    let b = m2 - &model.mean;
    let s = &model.scoring;
    let qa = s.q.dot(&(&a * a.transpose()));
    let qb = s.q.dot(&(&b * b.transpose()));
    let cross = (a.transpose() * &s.p * &b)[0];
    let cross_rev = (b.transpose() * &s.p * &a)[0];
    Ok(0.5 * qa + 0.5 * qb + 0.5 * (cross + cross_rev) + s.k)
}

#[derive(Debug, Clone)]
pub struct PldaConfig {
    pub latent_dim: usize,
    pub iterations: usize,
    /// Added to the diagonal of the within-class covariance when it is not
    /// positive definite, relative to its mean diagonal.
    pub regularization: f64,
}

impl Default for PldaConfig {
    fn default() -> Self {
        PldaConfig {
            latent_dim: 200,
            iterations: 10,
            regularization: 1e-6,
        }
    }
}

#[derive(Debug, Clone)]
pub struct PldaTraining {
    pub model: PldaModel,
    /// Data log-likelihood before each M-step and after the last.
    pub log_likelihoods: Vec<f64>,
    /// Whether the within-class covariance needed regularizing.
    pub regularized: bool,
}

struct ClassSums {
    count: f64,
    /// sum of centred vectors
    sum: DVector<f64>,
}

/// EM for the simplified PLDA model. The mean is the global sample mean;
/// `Phi` starts from the leading between-class eigenvectors.
pub fn fit_plda(x: &DMatrix<f64>, labels: &[usize], cfg: &PldaConfig) -> Result<PldaTraining> {
    check_labeled(x, labels)?;
    let d = x.nrows();
    let q = cfg.latent_dim;
    if q == 0 || q > d {
        return Err(Error::InvalidArgument(format!(
            "latent dimension {q} must lie in 1..={d}"
        )));
    }
    let n = x.ncols() as f64;
    let mean = x.column_mean();
    let mut centred = x.clone();
    for mut col in centred.column_iter_mut() {
        col -= &mean;
    }
    let groups = class_groups(labels);
    let classes: Vec<ClassSums> = groups
        .values()
        .map(|members| ClassSums {
            count: members.len() as f64,
            sum: members
                .iter()
                .fold(DVector::zeros(d), |acc, &j| acc + centred.column(j)),
        })
        .collect();
    let mut scatter = &centred * centred.transpose();
    linalg::symmetrize(&mut scatter);

    // initial guess from the scatter decomposition
    let mut sb = DMatrix::zeros(d, d);
    for c in &classes {
        let mu = &c.sum / c.count;
        sb += &mu * mu.transpose() * c.count;
    }
    sb /= n;
    let mut sw = &scatter / n - &sb;
    linalg::symmetrize(&mut sw);
    let mut regularized = false;
    if linalg::cholesky(&sw, "PLDA within-class covariance").is_err() {
        let eps = cfg.regularization * (sw.trace() / d as f64).abs().max(1e-12);
        warn!("within-class covariance not positive definite; adding {eps:e} to its diagonal");
        for i in 0..d {
            sw[(i, i)] += eps;
        }
        regularized = true;
        linalg::cholesky(&sw, "PLDA within-class covariance")?;
    }
    let eig = SymmetricEigen::new(sb.clone());
    let mut order: Vec<usize> = (0..d).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]).then(a.cmp(&b)));
    let mut phi = DMatrix::zeros(d, q);
    for (k, &i) in order[..q].iter().enumerate() {
        let scale = eig.eigenvalues[i].max(1e-6 * sw.trace() / d as f64).sqrt();
        phi.set_column(k, &(eig.eigenvectors.column(i) * scale));
    }

    let mut history = Vec::with_capacity(cfg.iterations + 1);
    for _ in 0..cfg.iterations {
        let stats = e_step(&phi, &sw, &classes, &scatter, n, d)?;
        history.push(stats.log_likelihood);
        let chol = linalg::cholesky(&stats.moment, "PLDA latent second moment")?;
        phi = chol.solve(&stats.cross.transpose()).transpose();
        // S_w = (scatter - Phi * cross') / N
        let mut new_sw = (&scatter - &phi * stats.cross.transpose()) / n;
        linalg::symmetrize(&mut new_sw);
        if linalg::cholesky(&new_sw, "PLDA within-class covariance").is_err() {
            let eps = cfg.regularization * (new_sw.trace() / d as f64).abs().max(1e-12);
            for i in 0..d {
                new_sw[(i, i)] += eps;
            }
            regularized = true;
        }
        sw = new_sw;
    }
    history.push(e_step(&phi, &sw, &classes, &scatter, n, d)?.log_likelihood);
    Ok(PldaTraining {
        model: PldaModel::new(mean, phi, sw)?,
        log_likelihoods: history,
        regularized,
    })
}

struct EStats {
    /// `D x q`, sum_i (sum_j d_ij) h_i'
    cross: DMatrix<f64>,
    /// `q x q`, sum_i n_i E[h_i h_i']
    moment: DMatrix<f64>,
    log_likelihood: f64,
}

fn e_step(
    phi: &DMatrix<f64>,
    sw: &DMatrix<f64>,
    classes: &[ClassSums],
    scatter: &DMatrix<f64>,
    n: f64,
    d: usize,
) -> Result<EStats> {
    let q = phi.ncols();
    let sw_chol = linalg::cholesky(sw, "PLDA within-class covariance")?;
    let sw_inv_phi = sw_chol.solve(phi);
    let core = phi.transpose() * &sw_inv_phi;
    let sw_inv = sw_chol.inverse();
    let mut cross = DMatrix::zeros(d, q);
    let mut moment = DMatrix::zeros(q, q);
    // -N D/2 log 2pi - N/2 log|S_w| - 1/2 tr(S_w^-1 scatter) + per-class terms
    let mut ll = -0.5 * n * (d as f64 * (2.0 * std::f64::consts::PI).ln() + linalg::log_det(&sw_chol))
        - 0.5 * sw_inv.dot(scatter);
    for c in classes {
        let mut prec = &core * c.count;
        for i in 0..q {
            prec[(i, i)] += 1.0;
        }
        let chol = linalg::cholesky(&prec, "PLDA latent precision")?;
        let b = sw_inv_phi.tr_mul(&c.sum);
        let h = chol.solve(&b);
        ll += 0.5 * b.dot(&h) - 0.5 * linalg::log_det(&chol);
        let mut second = chol.inverse();
        second += &h * h.transpose();
        moment += second * c.count;
        cross += &c.sum * h.transpose();
    }
    Ok(EStats {
        cross,
        moment,
        log_likelihood: ll,
    })
}
