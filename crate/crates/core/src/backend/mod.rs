//! Back-ends: the linear-regression speaker space with cosine scoring, and
//! the cosine, WCCN+cosine, LDA+cosine and LDA+PLDA baselines.
//!
//! Labeled development embeddings are passed as a `D x N` matrix (one column
//! per utterance) with a parallel slice of class indices.

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub mod lda;
pub mod lr;
pub mod plda;
pub mod scoring;
pub mod wccn;

pub use lda::{apply_lda, fit_lda, LdaModel};
pub use lr::{fit_lr, fit_lr_centered, indicator_matrix, lr_transform, LrModel};
pub use plda::{fit_plda, plda_score, PldaConfig, PldaModel};
pub use scoring::{cosine, cosine_score, decide, speaker_model, Decision, SpeakerModel};
pub use wccn::{apply_wccn, fit_wccn, WccnModel};

pub(crate) fn check_labeled(x: &DMatrix<f64>, labels: &[usize]) -> Result<()> {
    if x.ncols() != labels.len() {
        return Err(Error::DimensionMismatch {
            context: "labels vs. embedding columns",
            expected: x.ncols(),
            got: labels.len(),
        });
    }
    if x.ncols() == 0 {
        return Err(Error::InvalidArgument("no labeled embeddings".into()));
    }
    Ok(())
}

/// Column indices per class, classes in ascending order.
pub(crate) fn class_groups(labels: &[usize]) -> BTreeMap<usize, Vec<usize>> {
    let mut groups: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (j, &l) in labels.iter().enumerate() {
        groups.entry(l).or_default().push(j);
    }
    groups
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BackendKind {
    Cosine,
    WccnCosine,
    LdaCosine,
    LdaPlda,
    LrCosine,
}

impl BackendKind {
    pub const ALL: [BackendKind; 5] = [
        BackendKind::Cosine,
        BackendKind::WccnCosine,
        BackendKind::LdaCosine,
        BackendKind::LdaPlda,
        BackendKind::LrCosine,
    ];

    pub fn name(self) -> &'static str {
        match self {
            BackendKind::Cosine => "cosine",
            BackendKind::WccnCosine => "wccn_cosine",
            BackendKind::LdaCosine => "lda_cosine",
            BackendKind::LdaPlda => "lda_plda",
            BackendKind::LrCosine => "lr_cosine",
        }
    }
}

impl fmt::Display for BackendKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for BackendKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        BackendKind::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::config("back_end", format!("unknown back-end {s:?}")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BackendConfig {
    pub lda_dim: usize,
    /// Defaults to the LDA output size.
    pub plda_latent_dim: Option<usize>,
    pub plda_iterations: usize,
    /// `None` picks `1e-6 * trace(X X') / D`; `Some(0.0)` is the unregularized fit.
    pub lr_ridge: Option<f64>,
    pub lr_center: bool,
    pub wccn_regularization: f64,
}

impl Default for BackendConfig {
    fn default() -> Self {
        BackendConfig {
            lda_dim: lda::DEFAULT_LDA_DIM,
            plda_latent_dim: None,
            plda_iterations: 10,
            lr_ridge: None,
            lr_center: false,
            wccn_regularization: 0.0,
        }
    }
}

/// A fitted back-end: an embedding transform plus a scoring rule.
#[derive(Debug, Clone, PartialEq)]
pub enum TrainedBackend {
    Cosine,
    WccnCosine(WccnModel),
    LdaCosine(LdaModel),
    LdaPlda(LdaModel, PldaModel),
    LrCosine(LrModel),
}

impl TrainedBackend {
    pub fn fit(kind: BackendKind, x: &DMatrix<f64>, labels: &[usize], cfg: &BackendConfig) -> Result<Self> {
        check_labeled(x, labels)?;
        Ok(match kind {
            BackendKind::Cosine => TrainedBackend::Cosine,
            BackendKind::WccnCosine => TrainedBackend::WccnCosine(fit_wccn(x, labels, cfg.wccn_regularization)?),
            BackendKind::LdaCosine => TrainedBackend::LdaCosine(fit_lda(x, labels, cfg.lda_dim)?),
            BackendKind::LdaPlda => {
                let lda = fit_lda(x, labels, cfg.lda_dim)?;
                let projected = lda.projection().transpose() * x;
                let pcfg = PldaConfig {
                    latent_dim: cfg.plda_latent_dim.unwrap_or(cfg.lda_dim),
                    iterations: cfg.plda_iterations,
                    ..PldaConfig::default()
                };
                let plda = fit_plda(&projected, labels, &pcfg)?.model;
                TrainedBackend::LdaPlda(lda, plda)
            }
            BackendKind::LrCosine => {
                let n_speakers = labels.iter().max().map_or(0, |m| m + 1);
                let y = indicator_matrix(labels, n_speakers)?;
                let ridge = cfg.lr_ridge.unwrap_or_else(|| lr::default_ridge(x));
                let model = if cfg.lr_center {
                    fit_lr_centered(x, &y, ridge)?
                } else {
                    fit_lr(x, &y, ridge)?
                };
                TrainedBackend::LrCosine(model)
            }
        })
    }

    pub fn kind(&self) -> BackendKind {
        match self {
            TrainedBackend::Cosine => BackendKind::Cosine,
            TrainedBackend::WccnCosine(_) => BackendKind::WccnCosine,
            TrainedBackend::LdaCosine(_) => BackendKind::LdaCosine,
            TrainedBackend::LdaPlda(..) => BackendKind::LdaPlda,
            TrainedBackend::LrCosine(_) => BackendKind::LrCosine,
        }
    }

    /// Maps one embedding into the space where speaker models are averaged.
    pub fn transform(&self, x: &DVector<f64>) -> Result<DVector<f64>> {
        match self {
            TrainedBackend::Cosine => Ok(x.clone()),
            TrainedBackend::WccnCosine(m) => apply_wccn(m, x),
            TrainedBackend::LdaCosine(m) | TrainedBackend::LdaPlda(m, _) => apply_lda(m, x),
            TrainedBackend::LrCosine(m) => lr_transform(m, x),
        }
    }

    /// Averages the transformed embeddings of one side of a trial.
    pub fn model(&self, embeddings: &[DVector<f64>]) -> Result<SpeakerModel> {
        let transformed = embeddings
            .iter()
            .map(|x| self.transform(x))
            .collect::<Result<Vec<_>>>()?;
        speaker_model(&transformed)
    }

    pub fn score(&self, enroll: &SpeakerModel, test: &SpeakerModel) -> Result<f64> {
        match self {
            TrainedBackend::LdaPlda(_, plda) => plda_score(plda, &enroll.m, &test.m),
            _ => cosine_score(enroll, test),
        }
    }

    /// Writes the back-end's model files into `dir` (nothing for plain cosine).
    pub fn save(&self, dir: &Path) -> Result<()> {
        match self {
            TrainedBackend::Cosine => Ok(()),
            TrainedBackend::WccnCosine(m) => m.save(&dir.join("wccn.svwc")),
            TrainedBackend::LdaCosine(m) => m.save(&dir.join("lda.svld")),
            TrainedBackend::LdaPlda(l, p) => {
                l.save(&dir.join("lda.svld"))?;
                p.save(&dir.join("plda.svpl"))
            }
            TrainedBackend::LrCosine(m) => m.save(&dir.join("lr.svlr")),
        }
    }

    pub fn load(kind: BackendKind, dir: &Path) -> Result<Self> {
        Ok(match kind {
            BackendKind::Cosine => TrainedBackend::Cosine,
            BackendKind::WccnCosine => TrainedBackend::WccnCosine(WccnModel::load(&dir.join("wccn.svwc"))?),
            BackendKind::LdaCosine => TrainedBackend::LdaCosine(LdaModel::load(&dir.join("lda.svld"))?),
            BackendKind::LdaPlda => TrainedBackend::LdaPlda(
                LdaModel::load(&dir.join("lda.svld"))?,
                PldaModel::load(&dir.join("plda.svpl"))?,
            ),
            BackendKind::LrCosine => TrainedBackend::LrCosine(LrModel::load(&dir.join("lr.svlr"))?),
        })
    }
}
