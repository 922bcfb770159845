//! Total-variability factor analysis and i-vector extraction.
//!
//! An utterance supervector is modelled as `m + T x` with a standard normal
//! prior on `x`. Given the utterance's Baum-Welch statistics the i-vector is
//! the posterior mean
//!
//! ```text
//! x = (I + T' S^-1 N T)^-1 T' S^-1 f
//! ```
//!
//! where `N` repeats each component count over the feature dimensions and `f`
//! stacks the centralized first-order statistics. `N` is never materialized.

use std::path::Path;

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::binio::{Reader, Writer};
use crate::error::{Error, Result};
use crate::gmm::{BwStats, Ubm, MIN_VARIANCE};
use crate::linalg;

pub const TV_MAGIC: &[u8; 4] = b"SVT1";

/// Default number of total factors.
pub const DEFAULT_RANK: usize = 400;

#[derive(Debug, Clone, PartialEq)]
pub struct TvModel {
    /// `(C*F) x R`
    t: DMatrix<f64>,
    /// `C*F` diagonal residual covariance.
    sigma: DVector<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct IVector {
    pub utterance_id: String,
    pub x: DVector<f64>,
}

impl TvModel {
    pub fn new(t: DMatrix<f64>, sigma: DVector<f64>) -> Result<Self> {
        if t.ncols() == 0 || t.nrows() == 0 {
            return Err(Error::InvalidArgument("TV matrix must be non-empty".into()));
        }
        if sigma.len() != t.nrows() {
            return Err(Error::DimensionMismatch {
                context: "TV residual covariance length",
                expected: t.nrows(),
                got: sigma.len(),
            });
        }
        if t.iter().any(|v| !v.is_finite()) || sigma.iter().any(|v| !(*v > 0.0 && v.is_finite())) {
            return Err(Error::InvalidArgument(
                "TV matrix must be finite and residual variances positive".into(),
            ));
        }
        Ok(TvModel { t, sigma })
    }

    pub fn rank(&self) -> usize {
        self.t.ncols()
    }

    pub fn supervector_dim(&self) -> usize {
        self.t.nrows()
    }

    pub fn t(&self) -> &DMatrix<f64> {
        &self.t
    }

    pub fn sigma(&self) -> &DVector<f64> {
        &self.sigma
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut w = Writer::new(TV_MAGIC);
        w.u32(self.supervector_dim()).u32(self.rank());
        w.matrix(&self.t).f64s(self.sigma.iter());
        w.save(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut r = Reader::open(path, TV_MAGIC)?;
        let cf = r.u32()?;
        let rank = r.u32()?;
        r.expect_payload(cf * rank + cf, 8)?;
        let t = r.matrix(cf, rank)?;
        let sigma = r.vector(cf)?;
        TvModel::new(t, sigma)
    }
}

/// Extraction helper holding the per-component `T_c' S_c^-1 T_c` products.
pub struct Extractor<'a> {
    tv: &'a TvModel,
    n_components: usize,
    dim: usize,
    /// `T' S^-1`, `R x CF`
    t_sinv: DMatrix<f64>,
    blocks: Vec<DMatrix<f64>>,
}

impl<'a> Extractor<'a> {
    pub fn new(tv: &'a TvModel, n_components: usize, dim: usize) -> Result<Self> {
        if n_components * dim != tv.supervector_dim() {
            return Err(Error::DimensionMismatch {
                context: "statistics supervector size vs. TV model",
                expected: tv.supervector_dim(),
                got: n_components * dim,
            });
        }
        let mut t_sinv = tv.t.transpose();
        for (j, mut col) in t_sinv.column_iter_mut().enumerate() {
            col /= tv.sigma[j];
        }
        let blocks = (0..n_components)
            .map(|c| {
                let rows = c * dim..(c + 1) * dim;
                t_sinv.columns(rows.start, dim) * tv.t.rows(rows.start, dim)
            })
            .collect();
        Ok(Extractor {
            tv,
            n_components,
            dim,
            t_sinv,
            blocks,
        })
    }

    fn check(&self, stats: &BwStats) -> Result<()> {
        if stats.n_components() != self.n_components || stats.dim() != self.dim {
            return Err(Error::DimensionMismatch {
                context: "statistics shape vs. extractor",
                expected: self.n_components * self.dim,
                got: stats.n_components() * stats.dim(),
            });
        }
        Ok(())
    }

    /// `I + sum_c n_c T_c' S_c^-1 T_c`
    pub fn precision(&self, n: &DVector<f64>) -> DMatrix<f64> {
        let r = self.tv.rank();
        let mut p = DMatrix::identity(r, r);
        for (c, b) in self.blocks.iter().enumerate() {
            if n[c] != 0.0 {
                p += b * n[c];
            }
        }
        p
    }

    /// `T' S^-1 f`
    pub fn linear_term(&self, f: &DMatrix<f64>) -> DVector<f64> {
        // stacked supervector [f_1; ...; f_C] in component-major order
        let sv = DVector::from_iterator(
            self.n_components * self.dim,
            (0..self.n_components).flat_map(|c| (0..self.dim).map(move |d| f[(c, d)])),
        );
        &self.t_sinv * sv
    }

    /// Posterior mean and the factored precision.
    fn posterior(&self, stats: &BwStats) -> Result<Posterior> {
        self.check(stats)?;
        if stats.n.iter().any(|v| *v < 0.0) {
            return Err(Error::InvalidArgument("negative zero-th order statistic".into()));
        }
        let prec = self.precision(&stats.n);
        let b = self.linear_term(&stats.f);
        let chol = linalg::cholesky(&prec, "i-vector posterior precision")?;
        let mean = chol.solve(&b);
        Ok(Posterior { mean, b, chol })
    }

    pub fn extract(&self, stats: &BwStats) -> Result<DVector<f64>> {
        Ok(self.posterior(stats)?.mean)
    }
}

struct Posterior {
    mean: DVector<f64>,
    b: DVector<f64>,
    chol: nalgebra::Cholesky<f64, nalgebra::Dyn>,
}

pub fn extract_ivector(tv: &TvModel, stats: &BwStats, utterance_id: &str) -> Result<IVector> {
    let ex = Extractor::new(tv, stats.n_components(), stats.dim())?;
    Ok(IVector {
        utterance_id: utterance_id.to_string(),
        x: ex.extract(stats)?,
    })
}

#[derive(Debug, Clone)]
pub struct TvConfig {
    pub rank: usize,
    pub iterations: usize,
    pub seed: u64,
    /// Re-estimate the residual covariance in one final pass after the EM
    /// iterations. Requires second-order statistics.
    pub update_sigma: bool,
}

#[derive(Debug, Clone)]
pub struct TvTraining {
    pub model: TvModel,
    /// EM objective (log-likelihood of the statistics up to terms that do not
    /// depend on `T`) before each M-step and after the last one.
    pub objective: Vec<f64>,
}

struct Accumulators {
    /// `CF x R`, sum_u f_u x_u'
    cross: DMatrix<f64>,
    /// per component, sum_u n_uc E[x x']
    second: Vec<DMatrix<f64>>,
    objective: f64,
}

fn e_step(ex: &Extractor, stats: &[BwStats], accumulate: bool) -> Result<Accumulators> {
    let (cf, r) = ex.tv.t.shape();
    let mut acc = Accumulators {
        cross: DMatrix::zeros(if accumulate { cf } else { 0 }, r),
        second: if accumulate {
            vec![DMatrix::zeros(r, r); ex.n_components]
        } else {
            Vec::new()
        },
        objective: 0.0,
    };
    for st in stats {
        let post = ex.posterior(st)?;
        acc.objective += 0.5 * post.b.dot(&post.mean) - 0.5 * linalg::log_det(&post.chol);
        if !accumulate {
            continue;
        }
        let mut moment = post.chol.inverse();
        moment += &post.mean * post.mean.transpose();
        for c in 0..ex.n_components {
            if st.n[c] != 0.0 {
                acc.second[c] += &moment * st.n[c];
            }
            for d in 0..ex.dim {
                let row = c * ex.dim + d;
                let fv = st.f[(c, d)];
                for k in 0..r {
                    acc.cross[(row, k)] += fv * post.mean[k];
                }
            }
        }
    }
    Ok(acc)
}

/// EM training of the total variability matrix.
pub fn train_tv(stats: &[BwStats], ubm: &Ubm, cfg: &TvConfig) -> Result<TvTraining> {
    let c = ubm.n_components();
    let dim = ubm.dim();
    let cf = c * dim;
    let r = cfg.rank;
    if r == 0 || r > cf {
        return Err(Error::InvalidArgument(format!("rank {r} must lie in 1..={cf}")));
    }
    if stats.len() < r {
        return Err(Error::InvalidArgument(format!(
            "{} utterances cannot support {r} total factors",
            stats.len()
        )));
    }
    if let Some(bad) = stats.iter().find(|s| s.n_components() != c || s.dim() != dim) {
        return Err(Error::DimensionMismatch {
            context: "statistics shape vs. UBM",
            expected: cf,
            got: bad.n_components() * bad.dim(),
        });
    }
    if stats.iter().all(|s| s.n.iter().all(|v| *v == 0.0)) {
        return Err(Error::Degenerate("all zero-th order statistics are zero".into()));
    }
    if cfg.update_sigma && stats.iter().any(|s| s.s.is_none()) {
        return Err(Error::InvalidArgument(
            "re-estimating the residual covariance needs second-order statistics".into(),
        ));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let scale = (1.0 / r as f64).sqrt();
    let t = DMatrix::from_fn(cf, r, |_, _| {
        let z: f64 = StandardNormal.sample(&mut rng);
        scale * z
    });
    let sigma = DVector::from_fn(cf, |i, _| ubm.vars()[(i / dim, i % dim)]);
    let mut model = TvModel::new(t, sigma)?;

    let mut objective = Vec::with_capacity(cfg.iterations + 1);
    for _ in 0..cfg.iterations {
        let ex = Extractor::new(&model, c, dim)?;
        let acc = e_step(&ex, stats, true)?;
        objective.push(acc.objective);
        let t = m_step_t(&acc, c, dim)?;
        model = TvModel::new(t, model.sigma.clone())?;
    }
    let ex = Extractor::new(&model, c, dim)?;
    objective.push(e_step(&ex, stats, false)?.objective);

    if cfg.update_sigma {
        let acc = e_step(&ex, stats, true)?;
        let sigma = update_sigma(&model, &acc, stats, c, dim)?;
        model = TvModel::new(model.t.clone(), sigma)?;
    }
    Ok(TvTraining { model, objective })
}

fn m_step_t(acc: &Accumulators, c: usize, dim: usize) -> Result<DMatrix<f64>> {
    let r = acc.cross.ncols();
    let mut t = DMatrix::zeros(c * dim, r);
    for k in 0..c {
        let block = acc.cross.rows(k * dim, dim);
        // T_c A_c = C_c  =>  A_c T_c' = C_c'
        let sol = if acc.second[k].iter().all(|v| *v == 0.0) {
            DMatrix::zeros(r, dim)
        } else {
            let chol = linalg::cholesky(&acc.second[k], "TV M-step second moment")?;
            chol.solve(&block.transpose())
        };
        t.rows_mut(k * dim, dim).copy_from(&sol.transpose());
    }
    Ok(t)
}

fn update_sigma(model: &TvModel, acc: &Accumulators, stats: &[BwStats], c: usize, dim: usize) -> Result<DVector<f64>> {
    let pooled = BwStats::pooled(stats).expect("non-empty statistics");
    let s = pooled.s.expect("second-order statistics checked above");
    let mut sigma = model.sigma.clone();
    for k in 0..c {
        let n = pooled.n[k];
        if n <= 0.0 {
            continue;
        }
        // diag(S_c - 2 T_c C_c' + T_c A_c T_c') / n_c for the current T
        let t_c = model.t.rows(k * dim, dim);
        let t_a = t_c * &acc.second[k];
        for d in 0..dim {
            let row = k * dim + d;
            let cross = model.t.row(row).dot(&acc.cross.row(row));
            let quad = t_a.row(d).dot(&t_c.row(d));
            sigma[row] = ((s[(k, d)] - 2.0 * cross + quad) / n).max(MIN_VARIANCE);
        }
    }
    Ok(sigma)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn dense_oracle(tv: &TvModel, st: &BwStats) -> DVector<f64> {
        let (c, f) = st.f.shape();
        let cf = c * f;
        let n_big = DMatrix::from_fn(cf, cf, |i, j| if i == j { st.n[i / f] } else { 0.0 });
        let sinv = DMatrix::from_fn(cf, cf, |i, j| if i == j { 1.0 / tv.sigma()[i] } else { 0.0 });
        let fbar = DVector::from_fn(cf, |i, _| st.f[(i / f, i % f)]);
        let t = tv.t();
        let prec = DMatrix::identity(tv.rank(), tv.rank()) + t.transpose() * &sinv * n_big * t;
        prec.try_inverse().unwrap() * t.transpose() * sinv * fbar
    }

    fn random_case(rng: &mut ChaCha8Rng, c: usize, f: usize, r: usize) -> (TvModel, BwStats) {
        let t = DMatrix::from_fn(c * f, r, |_, _| rng.random_range(-1.0..1.0));
        let sigma = DVector::from_fn(c * f, |_, _| rng.random_range(0.5..2.0));
        let mut st = BwStats::zeros(c, f, false);
        st.n = DVector::from_fn(c, |_, _| rng.random_range(0.0..5.0));
        st.f = DMatrix::from_fn(c, f, |_, _| rng.random_range(-3.0..3.0));
        (TvModel::new(t, sigma).unwrap(), st)
    }

    #[test]
    fn zero_stats_give_zero_ivector() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let (tv, _) = random_case(&mut rng, 2, 3, 2);
        let st = BwStats::zeros(2, 3, false);
        let iv = extract_ivector(&tv, &st, "u").unwrap();
        assert!(iv.x.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn scalar_hand_case() {
        let tv = TvModel::new(DMatrix::from_element(1, 1, 1.0), DVector::from_element(1, 1.0)).unwrap();
        let mut st = BwStats::zeros(1, 1, false);
        st.n[0] = 1.0;
        st.f[(0, 0)] = 4.0;
        assert!((extract_ivector(&tv, &st, "u").unwrap().x[0] - 2.0).abs() < 1e-15);
    }

    #[test]
    fn matches_dense_inverse() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let (tv, st) = random_case(&mut rng, 2, 2, 3);
        let x = extract_ivector(&tv, &st, "u").unwrap().x;
        assert!((x - dense_oracle(&tv, &st)).amax() < 1e-10);
    }

    #[test]
    fn linear_in_first_order_stats() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let (tv, a) = random_case(&mut rng, 3, 2, 2);
        let mut b = a.clone();
        b.f = DMatrix::from_fn(3, 2, |_, _| rng.random_range(-3.0..3.0));
        let mut sum = a.clone();
        sum.f = &a.f + &b.f;
        let ex = Extractor::new(&tv, 3, 2).unwrap();
        let lhs = ex.extract(&sum).unwrap();
        let rhs = ex.extract(&a).unwrap() + ex.extract(&b).unwrap();
        assert!((lhs - rhs).amax() < 1e-10);
    }

    #[test]
    fn prior_dominates_as_counts_vanish() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let (tv, st) = random_case(&mut rng, 2, 2, 2);
        let mut prev = f64::INFINITY;
        for scale in [1.0, 1e-2, 1e-4, 1e-6] {
            let mut s = st.clone();
            s.n *= scale;
            s.f *= scale;
            let norm = extract_ivector(&tv, &s, "u").unwrap().x.norm();
            assert!(norm < prev);
            prev = norm;
        }
        assert!(prev < 1e-4);
    }

    #[test]
    fn shape_mismatch_rejected() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let (tv, _) = random_case(&mut rng, 2, 2, 2);
        let st = BwStats::zeros(3, 2, false);
        assert!(matches!(
            extract_ivector(&tv, &st, "u"),
            Err(Error::DimensionMismatch { .. })
        ));
    }

    fn unit_ubm(c: usize, f: usize) -> Ubm {
        Ubm::new(
            DVector::from_element(c, 1.0),
            DMatrix::zeros(c, f),
            DMatrix::from_element(c, f, 1.0),
        )
        .unwrap()
    }

    #[test]
    fn zero_iterations_keep_seeded_init() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let stats: Vec<BwStats> = (0..5).map(|_| random_case(&mut rng, 2, 3, 2).1).collect();
        let ubm = unit_ubm(2, 3);
        let cfg = TvConfig {
            rank: 2,
            iterations: 0,
            seed: 9,
            update_sigma: false,
        };
        let a = train_tv(&stats, &ubm, &cfg).unwrap();
        let mut init_rng = ChaCha8Rng::seed_from_u64(9);
        let want = DMatrix::from_fn(6, 2, |_, _| {
            let z: f64 = StandardNormal.sample(&mut init_rng);
            z * 0.5f64.sqrt()
        });
        assert_eq!(a.model.t(), &want);
        assert_eq!(a.objective.len(), 1);

        let cfg = TvConfig { iterations: 4, ..cfg };
        let b = train_tv(&stats, &ubm, &cfg).unwrap();
        let c = train_tv(&stats, &ubm, &cfg).unwrap();
        assert_eq!(b.model, c.model);
        for w in b.objective.windows(2) {
            assert!(w[1] >= w[0] - 1e-6 * w[0].abs());
        }
    }

    #[test]
    fn training_preconditions() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let stats: Vec<BwStats> = (0..2).map(|_| random_case(&mut rng, 2, 3, 2).1).collect();
        let ubm = unit_ubm(2, 3);
        let cfg = TvConfig {
            rank: 3,
            iterations: 1,
            seed: 0,
            update_sigma: false,
        };
        assert!(train_tv(&stats, &ubm, &cfg).is_err());
        let zeros = vec![BwStats::zeros(2, 3, false); 4];
        let cfg = TvConfig { rank: 2, ..cfg };
        assert!(matches!(train_tv(&zeros, &ubm, &cfg), Err(Error::Degenerate(_))));
        let cfg = TvConfig { rank: 7, ..cfg };
        assert!(train_tv(&stats, &ubm, &cfg).is_err());
        let cfg = TvConfig {
            rank: 2,
            update_sigma: true,
            ..cfg
        };
        assert!(train_tv(&stats, &ubm, &cfg).is_err());
    }

    #[test]
    fn tv_file_roundtrip() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let (tv, _) = random_case(&mut rng, 2, 3, 2);
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("tv.svt");
        tv.save(&p).unwrap();
        assert_eq!(TvModel::load(&p).unwrap(), tv);
    }
}
