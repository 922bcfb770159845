//! Diagonal-covariance GMM universal background model.
//!
//! Covers EM training from pooled frames, frame posteriors, zero-th and
//! centralized first-order Baum-Welch statistics, estimating a UBM from
//! externally supplied alignments, and truncating a UBM to its heaviest
//! components.

use std::f64::consts::PI;
use std::path::{Path, PathBuf};

use log::warn;
use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::binio::{Reader, Writer};
use crate::data::{load_features, FrameMatrix};
use crate::error::{Error, Result};

pub const UBM_MAGIC: &[u8; 4] = b"SVU1";

/// Relative variance floor, as a fraction of the global per-dimension variance.
pub const VARIANCE_FLOOR_RATIO: f64 = 1e-4;
/// Absolute lower bound so constant data still yields a proper density.
pub const MIN_VARIANCE: f64 = 1e-10;
/// Components with less than this fraction of the total mass count as empty.
pub const EMPTY_MASS_RATIO: f64 = 1e-8;

#[derive(Debug, Clone, PartialEq)]
pub struct Ubm {
    /// Mixture weights, summing to one.
    weights: DVector<f64>,
    /// Unnormalized responsibility mass per component, when estimated from data.
    mass: DVector<f64>,
    /// `C x F`
    means: DMatrix<f64>,
    /// `C x F` diagonal variances.
    vars: DMatrix<f64>,
    inv_vars: DMatrix<f64>,
    /// `mu_c / sigma_c^2`, elementwise
    scaled_means: DMatrix<f64>,
    /// `log pi_c - 0.5 (F log 2pi + log|Sigma_c| + sum_f mu_cf^2 / sigma_cf^2)`
    offsets: DVector<f64>,
}

impl Ubm {
    /// Builds a UBM, normalizing the weights. `weights` doubles as the mass.
    pub fn new(weights: DVector<f64>, means: DMatrix<f64>, vars: DMatrix<f64>) -> Result<Self> {
        let mass = weights.clone();
        Self::with_mass(mass, means, vars)
    }

    fn with_mass(mass: DVector<f64>, means: DMatrix<f64>, vars: DMatrix<f64>) -> Result<Self> {
        let c = mass.len();
        if c == 0 || means.nrows() != c || vars.shape() != means.shape() || means.ncols() == 0 {
            return Err(Error::InvalidArgument(format!(
                "inconsistent UBM shapes: {} weights, means {:?}, vars {:?}",
                c,
                means.shape(),
                vars.shape()
            )));
        }
        if mass.iter().any(|w| !(*w >= 0.0 && w.is_finite())) {
            return Err(Error::InvalidArgument(
                "UBM weights must be finite and nonnegative".into(),
            ));
        }
        if vars.iter().any(|v| !(*v > 0.0 && v.is_finite())) || means.iter().any(|m| !m.is_finite()) {
            return Err(Error::InvalidArgument(
                "UBM means must be finite and variances positive".into(),
            ));
        }
        let total = mass.sum();
        if total <= 0.0 {
            return Err(Error::Degenerate("UBM has zero total weight".into()));
        }
        let weights = &mass / total;
        let dim = means.ncols() as f64;
        let log_norm = DVector::from_fn(c, |k, _| {
            let log_det: f64 = vars.row(k).iter().map(|v| v.ln()).sum();
            weights[k].ln() - 0.5 * (dim * (2.0 * PI).ln() + log_det)
        });
        let inv_vars = vars.map(|v| 1.0 / v);
        let scaled_means = means.component_mul(&inv_vars);
        let offsets = DVector::from_fn(c, |k, _| log_norm[k] - 0.5 * means.row(k).dot(&scaled_means.row(k)));
        Ok(Ubm {
            weights,
            mass,
            means,
            vars,
            inv_vars,
            scaled_means,
            offsets,
        })
    }

    pub fn n_components(&self) -> usize {
        self.weights.len()
    }

    pub fn dim(&self) -> usize {
        self.means.ncols()
    }

    pub fn weights(&self) -> &DVector<f64> {
        &self.weights
    }

    /// Unnormalized responsibility mass (equal to the weights for UBMs built
    /// from explicit weights or loaded from disk).
    pub fn mass(&self) -> &DVector<f64> {
        &self.mass
    }

    pub fn means(&self) -> &DMatrix<f64> {
        &self.means
    }

    pub fn vars(&self) -> &DMatrix<f64> {
        &self.vars
    }

    /// `log(pi_c N(z_l; mu_c, Sigma_c))` for every frame (rows) and component
    /// (columns), with the quadratic form expanded into two matrix products.
    fn log_joint(&self, frames: &DMatrix<f64>) -> DMatrix<f64> {
        let mut lj = frames * self.scaled_means.transpose();
        lj.gemm(-0.5, &frames.map(|v| v * v), &self.inv_vars.transpose(), 1.0);
        for (k, mut col) in lj.column_iter_mut().enumerate() {
            col.add_scalar_mut(self.offsets[k]);
        }
        lj
    }

    fn check_dim(&self, frames: &FrameMatrix) -> Result<()> {
        if frames.dim() != self.dim() {
            return Err(Error::DimensionMismatch {
                context: "UBM feature dimension",
                expected: self.dim(),
                got: frames.dim(),
            });
        }
        Ok(())
    }

    /// Posteriors plus the total log-likelihood of the frames.
    pub fn posteriors_with_loglik(&self, frames: &FrameMatrix) -> Result<(PosteriorMatrix, f64)> {
        self.check_dim(frames)?;
        let c = self.n_components();
        let mut gammas = self.log_joint(&frames.frames);
        let mut row = vec![0.0; c];
        let mut total = 0.0;
        for l in 0..frames.len() {
            for (k, v) in row.iter_mut().enumerate() {
                *v = gammas[(l, k)];
            }
            let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for v in row.iter_mut() {
                *v = (*v - m).exp();
                sum += *v;
            }
            total += m + sum.ln();
            for k in 0..c {
                gammas[(l, k)] = row[k] / sum;
            }
        }
        Ok((PosteriorMatrix(gammas), total))
    }

    pub fn log_likelihood(&self, frames: &FrameMatrix) -> Result<f64> {
        Ok(self.posteriors_with_loglik(frames)?.1)
    }

    /// Keeps the listed components (in the given order) and renormalizes weights.
    pub fn select(&self, keep: &[usize]) -> Result<Ubm> {
        if keep.is_empty() || keep.iter().any(|&k| k >= self.n_components()) {
            return Err(Error::InvalidArgument("component selection out of range".into()));
        }
        let mass = DVector::from_iterator(keep.len(), keep.iter().map(|&k| self.mass[k]));
        let means = self.means.select_rows(keep);
        let vars = self.vars.select_rows(keep);
        if mass.sum() > 0.0 {
            Ubm::with_mass(mass, means, vars)
        } else {
            let w = DVector::from_iterator(keep.len(), keep.iter().map(|&k| self.weights[k]));
            Ubm::with_mass(w, means, vars)
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut w = Writer::new(UBM_MAGIC);
        w.u32(self.n_components()).u32(self.dim());
        w.f64s(self.weights.iter()).matrix(&self.means).matrix(&self.vars);
        w.save(path)
    }

    pub fn load(path: &Path) -> Result<Ubm> {
        let mut r = Reader::open(path, UBM_MAGIC)?;
        let c = r.u32()?;
        let f = r.u32()?;
        r.expect_payload(c + 2 * c * f, 8)?;
        let weights = r.vector(c)?;
        let means = r.matrix(c, f)?;
        let vars = r.matrix(c, f)?;
        Ubm::new(weights, means, vars)
    }
}

/// Per-frame component posteriors, `L x C`, rows summing to one.
#[derive(Debug, Clone, PartialEq)]
pub struct PosteriorMatrix(DMatrix<f64>);

impl PosteriorMatrix {
    /// Validates externally produced posteriors. Rows that do not sum to one
    /// within 1e-6 are renormalized with a warning.
    pub fn from_raw(mut gammas: DMatrix<f64>) -> Result<Self> {
        let mut fixed = 0usize;
        for l in 0..gammas.nrows() {
            let mut row = gammas.row_mut(l);
            if row.iter().any(|g| !(*g >= 0.0 && g.is_finite())) {
                return Err(Error::InvalidArgument(format!(
                    "posterior row {l} has a negative or non-finite entry"
                )));
            }
            let s = row.sum();
            if s <= 0.0 {
                return Err(Error::Degenerate(format!("posterior row {l} sums to zero")));
            }
            if (s - 1.0).abs() > 1e-6 {
                row /= s;
                fixed += 1;
            }
        }
        if fixed > 0 {
            warn!("renormalized {fixed} posterior rows that did not sum to one");
        }
        Ok(PosteriorMatrix(gammas))
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.0
    }

    pub fn n_frames(&self) -> usize {
        self.0.nrows()
    }

    pub fn n_components(&self) -> usize {
        self.0.ncols()
    }

    /// Keeps the listed columns and renormalizes every row with nonzero mass.
    pub fn select(&self, keep: &[usize]) -> PosteriorMatrix {
        let mut m = self.0.select_columns(keep);
        for l in 0..m.nrows() {
            let s = m.row(l).sum();
            if s > 0.0 {
                m.row_mut(l).unscale_mut(s);
            }
        }
        PosteriorMatrix(m)
    }
}

/// Anything that can align frames to a fixed set of mixture components.
pub trait PosteriorSource {
    fn n_components(&self) -> usize;
    fn posteriors(&self, frames: &FrameMatrix) -> Result<PosteriorMatrix>;
}

impl PosteriorSource for Ubm {
    fn n_components(&self) -> usize {
        Ubm::n_components(self)
    }

    fn posteriors(&self, frames: &FrameMatrix) -> Result<PosteriorMatrix> {
        posteriors(self, frames)
    }
}

/// Precomputed posteriors stored as `<dir>/<utterance_id>.svf` feature files
/// (one row per frame, one column per component).
#[derive(Debug, Clone)]
pub struct PosteriorFiles {
    pub dir: PathBuf,
    pub n_components: usize,
}

impl PosteriorSource for PosteriorFiles {
    fn n_components(&self) -> usize {
        self.n_components
    }

    fn posteriors(&self, frames: &FrameMatrix) -> Result<PosteriorMatrix> {
        let path = self.dir.join(format!("{}.svf", frames.utterance_id));
        let raw = load_features(&path)?;
        if raw.len() != frames.len() || raw.dim() != self.n_components {
            return Err(Error::InvalidArgument(format!(
                "{} holds {}x{} posteriors, expected {}x{}",
                path.display(),
                raw.len(),
                raw.dim(),
                frames.len(),
                self.n_components
            )));
        }
        PosteriorMatrix::from_raw(raw.frames)
    }
}

pub fn posteriors(ubm: &Ubm, frames: &FrameMatrix) -> Result<PosteriorMatrix> {
    Ok(ubm.posteriors_with_loglik(frames)?.0)
}

/// Zero-th order counts and centralized first-order sums of one utterance.
#[derive(Debug, Clone, PartialEq)]
pub struct BwStats {
    /// `C`
    pub n: DVector<f64>,
    /// `C x F`, sums of `gamma * (z - mu_c)`
    pub f: DMatrix<f64>,
    /// Optional `C x F` centralized second-order sums `gamma * (z - mu_c)^2`,
    /// needed only when re-estimating the residual covariance of a TV model.
    pub s: Option<DMatrix<f64>>,
}

impl BwStats {
    pub fn zeros(c: usize, f: usize, second_order: bool) -> Self {
        BwStats {
            n: DVector::zeros(c),
            f: DMatrix::zeros(c, f),
            s: second_order.then(|| DMatrix::zeros(c, f)),
        }
    }

    pub fn n_components(&self) -> usize {
        self.n.len()
    }

    pub fn dim(&self) -> usize {
        self.f.ncols()
    }

    pub fn add(&mut self, other: &BwStats) {
        self.n += &other.n;
        self.f += &other.f;
        match (&mut self.s, &other.s) {
            (Some(a), Some(b)) => *a += b,
            (s, _) => *s = None,
        }
    }

    /// Sum over utterances, in order.
    pub fn pooled<'a>(stats: impl IntoIterator<Item = &'a BwStats>) -> Option<BwStats> {
        let mut it = stats.into_iter();
        let mut acc = it.next()?.clone();
        for s in it {
            acc.add(s);
        }
        Some(acc)
    }
}

/// Accumulates statistics from frames, their alignments and the centering means.
pub fn accumulate_stats(
    means: &DMatrix<f64>,
    frames: &FrameMatrix,
    gammas: &PosteriorMatrix,
    second_order: bool,
) -> Result<BwStats> {
    let (c, dim) = means.shape();
    if frames.dim() != dim {
        return Err(Error::DimensionMismatch {
            context: "frame dimension vs. component means",
            expected: dim,
            got: frames.dim(),
        });
    }
    if gammas.n_components() != c || gammas.n_frames() != frames.len() {
        return Err(Error::DimensionMismatch {
            context: "posterior matrix shape",
            expected: frames.len() * c,
            got: gammas.n_frames() * gammas.n_components(),
        });
    }
    let g = gammas.matrix();
    let n = DVector::from_fn(c, |k, _| g.column(k).sum());
    // sum_l gamma_lc z_l, then centre: f_c = sum gamma z - n_c mu_c
    let mut f = g.transpose() * &frames.frames;
    for k in 0..c {
        for d in 0..dim {
            f[(k, d)] -= n[k] * means[(k, d)];
        }
    }
    let s = second_order.then(|| {
        let mut s = DMatrix::zeros(c, dim);
        for l in 0..frames.len() {
            for k in 0..c {
                let w = g[(l, k)];
                if w == 0.0 {
                    continue;
                }
                for d in 0..dim {
                    let e = frames.frames[(l, d)] - means[(k, d)];
                    s[(k, d)] += w * e * e;
                }
            }
        }
        s
    });
    Ok(BwStats { n, f, s })
}

pub fn baum_welch_stats(ubm: &Ubm, frames: &FrameMatrix) -> Result<BwStats> {
    let gammas = posteriors(ubm, frames)?;
    accumulate_stats(ubm.means(), frames, &gammas, false)
}

/// Statistics aligned by an arbitrary posterior source and centred on `ubm`.
pub fn stats_with_source(
    ubm: &Ubm,
    source: &dyn PosteriorSource,
    frames: &FrameMatrix,
    second_order: bool,
) -> Result<BwStats> {
    let gammas = source.posteriors(frames)?;
    accumulate_stats(ubm.means(), frames, &gammas, second_order)
}

#[derive(Debug, Clone)]
pub struct EmConfig {
    pub n_components: usize,
    pub iterations: usize,
    pub seed: u64,
}

/// Trained UBM plus the total log-likelihood before each M-step and after the
/// last one (`iterations + 1` values).
#[derive(Debug, Clone)]
pub struct UbmTraining {
    pub ubm: Ubm,
    pub log_likelihoods: Vec<f64>,
    /// Components dropped after training because they collapsed.
    pub dropped: Vec<usize>,
}

struct Moments {
    mass: DVector<f64>,
    first: DMatrix<f64>,
    second: DMatrix<f64>,
}

impl Moments {
    fn zeros(c: usize, f: usize) -> Self {
        Moments {
            mass: DVector::zeros(c),
            first: DMatrix::zeros(c, f),
            second: DMatrix::zeros(c, f),
        }
    }

    fn add(&mut self, frames: &FrameMatrix, g: &DMatrix<f64>) {
        for k in 0..g.ncols() {
            self.mass[k] += g.column(k).sum();
        }
        self.first += g.transpose() * &frames.frames;
        self.second += g.transpose() * frames.frames.map(|v| v * v);
    }
}

fn global_stats(frames: &[FrameMatrix], dim: usize) -> (DVector<f64>, DVector<f64>, usize) {
    let mut sum = DVector::zeros(dim);
    let mut count = 0usize;
    for fm in frames {
        for l in 0..fm.len() {
            sum += fm.frames.row(l).transpose();
        }
        count += fm.len();
    }
    let mean = sum / count as f64;
    let mut var = DVector::zeros(dim);
    for fm in frames {
        for l in 0..fm.len() {
            let d = fm.frames.row(l).transpose() - &mean;
            var += d.component_mul(&d);
        }
    }
    (mean, var / count as f64, count)
}

fn variance_floor(global_var: &DVector<f64>) -> DVector<f64> {
    global_var.map(|v| (VARIANCE_FLOOR_RATIO * v).max(MIN_VARIANCE))
}

/// k-means++ style seeding: the first centre is a uniform draw, each further
/// centre is drawn with probability proportional to its squared distance to
/// the closest centre so far.
fn seed_means(frames: &[FrameMatrix], c: usize, rng: &mut ChaCha8Rng) -> DMatrix<f64> {
    let rows: Vec<(usize, usize)> = frames
        .iter()
        .enumerate()
        .flat_map(|(u, fm)| (0..fm.len()).map(move |l| (u, l)))
        .collect();
    let dim = frames[0].dim();
    let row = |i: usize| {
        let (u, l) = rows[i];
        frames[u].frames.row(l)
    };
    let mut means = DMatrix::zeros(c, dim);
    let first = rng.random_range(0..rows.len());
    means.set_row(0, &row(first));
    let mut dist: Vec<f64> = (0..rows.len())
        .map(|i| (row(i) - means.row(0)).norm_squared())
        .collect();
    for k in 1..c {
        let total: f64 = dist.iter().sum();
        let pick = if total > 0.0 {
            let mut target = rng.random::<f64>() * total;
            let mut chosen = rows.len() - 1;
            for (i, d) in dist.iter().enumerate() {
                if target < *d {
                    chosen = i;
                    break;
                }
                target -= d;
            }
            chosen
        } else {
            rng.random_range(0..rows.len())
        };
        means.set_row(k, &row(pick));
        for (i, d) in dist.iter_mut().enumerate() {
            *d = d.min((row(i) - means.row(k)).norm_squared());
        }
    }
    means
}

/// Maximum-likelihood EM for a diagonal GMM on pooled frames.
pub fn train_ubm_em(frames: &[FrameMatrix], cfg: &EmConfig) -> Result<UbmTraining> {
    let c = cfg.n_components;
    if frames.is_empty() {
        return Err(Error::InvalidArgument("no frames to train a UBM on".into()));
    }
    if c == 0 {
        return Err(Error::InvalidArgument("UBM needs at least one component".into()));
    }
    let dim = frames[0].dim();
    if let Some(bad) = frames.iter().find(|f| f.dim() != dim) {
        return Err(Error::DimensionMismatch {
            context: "pooled frame dimension",
            expected: dim,
            got: bad.dim(),
        });
    }
    let (_, global_var, total_frames) = global_stats(frames, dim);
    if total_frames < c {
        return Err(Error::InvalidArgument(format!(
            "{total_frames} frames cannot support {c} components"
        )));
    }
    let floor = variance_floor(&global_var);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let means = seed_means(frames, c, &mut rng);
    let vars = DMatrix::from_fn(c, dim, |_, f| global_var[f].max(floor[f]));
    let mut ubm = Ubm::new(DVector::from_element(c, 1.0 / c as f64), means, vars)?;

    let mut history = Vec::with_capacity(cfg.iterations + 1);
    for _ in 0..cfg.iterations {
        let mut acc = Moments::zeros(c, dim);
        let mut ll = 0.0;
        for fm in frames {
            let (g, l) = ubm.posteriors_with_loglik(fm)?;
            ll += l;
            acc.add(fm, g.matrix());
        }
        history.push(ll);
        ubm = m_step(&ubm, &acc, &floor)?;
    }
    let mut ll = 0.0;
    for fm in frames {
        ll += ubm.log_likelihood(fm)?;
    }
    history.push(ll);

    let total = ubm.mass.sum();
    let dropped: Vec<usize> = (0..c).filter(|&k| ubm.mass[k] < EMPTY_MASS_RATIO * total).collect();
    if !dropped.is_empty() {
        warn!("dropping {} empty UBM components", dropped.len());
        let keep: Vec<usize> = (0..c).filter(|k| !dropped.contains(k)).collect();
        ubm = ubm.select(&keep)?;
    }
    Ok(UbmTraining {
        ubm,
        log_likelihoods: history,
        dropped,
    })
}

fn m_step(prev: &Ubm, acc: &Moments, floor: &DVector<f64>) -> Result<Ubm> {
    let (c, dim) = prev.means.shape();
    let total = acc.mass.sum();
    let mut means = prev.means.clone();
    let mut vars = prev.vars.clone();
    for k in 0..c {
        let m = acc.mass[k];
        if m < EMPTY_MASS_RATIO * total || m <= 0.0 {
            continue;
        }
        for f in 0..dim {
            let mu = acc.first[(k, f)] / m;
            means[(k, f)] = mu;
            vars[(k, f)] = (acc.second[(k, f)] / m - mu * mu).max(floor[f]);
        }
    }
    Ubm::with_mass(acc.mass.clone(), means, vars)
}

/// A UBM estimated from external alignments, with the components whose total
/// responsibility fell below the emptiness threshold.
#[derive(Debug, Clone)]
pub struct PosteriorUbm {
    pub ubm: Ubm,
    pub empty: Vec<usize>,
}

/// Estimates UBM parameters from frames and externally supplied posteriors:
/// responsibility mass, weighted means and diagonal weighted covariances.
pub fn ubm_from_posteriors(frames: &[FrameMatrix], gammas: &[PosteriorMatrix]) -> Result<PosteriorUbm> {
    if frames.is_empty() || frames.len() != gammas.len() {
        return Err(Error::InvalidArgument(format!(
            "{} utterances but {} posterior matrices",
            frames.len(),
            gammas.len()
        )));
    }
    let dim = frames[0].dim();
    let c = gammas[0].n_components();
    let mut acc = Moments::zeros(c, dim);
    for (u, (fm, g)) in frames.iter().zip(gammas).enumerate() {
        if fm.dim() != dim {
            return Err(Error::DimensionMismatch {
                context: "pooled frame dimension",
                expected: dim,
                got: fm.dim(),
            });
        }
        if g.n_frames() != fm.len() || g.n_components() != c {
            return Err(Error::InvalidArgument(format!(
                "utterance {u}: {} frames but posteriors are {}x{} (expected {}x{c})",
                fm.len(),
                g.n_frames(),
                g.n_components(),
                fm.len()
            )));
        }
        acc.add(fm, g.matrix());
    }
    let (global_mean, global_var, _) = global_stats(frames, dim);
    let floor = variance_floor(&global_var);
    let total = acc.mass.sum();
    let mut means = DMatrix::zeros(c, dim);
    let mut vars = DMatrix::zeros(c, dim);
    let mut empty = Vec::new();
    for k in 0..c {
        let m = acc.mass[k];
        if m < EMPTY_MASS_RATIO * total || m <= 0.0 {
            empty.push(k);
            means.set_row(k, &global_mean.transpose());
            for f in 0..dim {
                vars[(k, f)] = global_var[f].max(floor[f]);
            }
            continue;
        }
        for f in 0..dim {
            let mu = acc.first[(k, f)] / m;
            means[(k, f)] = mu;
            vars[(k, f)] = (acc.second[(k, f)] / m - mu * mu).max(floor[f]);
        }
    }
    let ubm = Ubm::with_mass(acc.mass, means, vars)?;
    Ok(PosteriorUbm { ubm, empty })
}

/// Indices of the `keep` components with the largest pooled counts, in
/// ascending index order. Ties go to the lower index.
pub fn heaviest_components(pooled_n: &DVector<f64>, keep: usize) -> Result<Vec<usize>> {
    let c = pooled_n.len();
    if keep == 0 || keep > c {
        return Err(Error::InvalidArgument(format!("cannot keep {keep} of {c} components")));
    }
    let mut order: Vec<usize> = (0..c).collect();
    order.sort_by(|&a, &b| pooled_n[b].total_cmp(&pooled_n[a]).then(a.cmp(&b)));
    let mut kept = order[..keep].to_vec();
    kept.sort_unstable();
    Ok(kept)
}

/// Drops all but the `keep` components with the largest pooled zero-th order
/// statistics and renormalizes the weights.
pub fn truncate_ubm(ubm: &Ubm, pooled: &BwStats, keep: usize) -> Result<Ubm> {
    if pooled.n_components() != ubm.n_components() {
        return Err(Error::DimensionMismatch {
            context: "pooled statistics component count",
            expected: ubm.n_components(),
            got: pooled.n_components(),
        });
    }
    let kept = heaviest_components(&pooled.n, keep)?;
    ubm.select(&kept)
}
