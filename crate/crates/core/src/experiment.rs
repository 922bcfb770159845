//! Config-driven experiments: corpus partitioning, front-end and back-end
//! training, repeated randomized test conditions, comparison tables and
//! score fusion.
//!
//! The corpus is split by speaker: the first `dev_speakers` speakers (in
//! sorted order) train every model, the rest are enrolled and tested. Every
//! utterance is cut into `seg_len`-frame segments and each segment yields one
//! embedding. Run `r` of every condition draws its trials with seed
//! `seed + r`, so all systems see identical trial lists.

use std::collections::BTreeMap;
use std::fmt::{self, Write as _};
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use log::{info, warn};
use nalgebra::{DMatrix, DVector};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Deserializer, Serialize};

use crate::backend::{BackendConfig, BackendKind, TrainedBackend};
use crate::data::{self, split_segments, stack_context, CorpusIndex, FrameMatrix, SynthSpec};
use crate::dvector::{self, LabeledFrames, Mlp, MlpHyper, NetPosteriors};
use crate::error::{Error, Result};
use crate::eval::{
    self, build_trials, det_csv, det_curve, fuse_scores, min_dcf_raw, relative_improvement, score_trials, Condition,
    DcfParams, ScoredTrials, SegmentInventory, TrialDesign, TrialSet,
};
use crate::gmm::{
    accumulate_stats, heaviest_components, posteriors, train_ubm_em, ubm_from_posteriors, EmConfig, PosteriorFiles,
    PosteriorMatrix, PosteriorSource, Ubm,
};
use crate::ivector::{train_tv, Extractor, TvConfig, TvModel};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FrontEndKind {
    GmmIvector,
    PosteriorIvector,
    Dvector,
}

impl FrontEndKind {
    pub const ALL: [FrontEndKind; 3] = [
        FrontEndKind::GmmIvector,
        FrontEndKind::PosteriorIvector,
        FrontEndKind::Dvector,
    ];

    pub fn name(self) -> &'static str {
        match self {
            FrontEndKind::GmmIvector => "gmm_ivector",
            FrontEndKind::PosteriorIvector => "posterior_ivector",
            FrontEndKind::Dvector => "dvector",
        }
    }
}

impl fmt::Display for FrontEndKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for FrontEndKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        FrontEndKind::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::config("front_end", format!("unknown front-end {s:?}")))
    }
}

/// Where utterances come from: an in-memory synthetic corpus or an index
/// file written by [`CorpusIndex::write`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum CorpusSource {
    Synth(SynthSpec),
    Index(PathBuf),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GmmParams {
    pub n_components: usize,
    pub iterations: usize,
}

impl Default for GmmParams {
    fn default() -> Self {
        GmmParams {
            n_components: 2048,
            iterations: 10,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TvParams {
    pub rank: usize,
    pub iterations: usize,
    pub update_sigma: bool,
}

impl Default for TvParams {
    fn default() -> Self {
        TvParams {
            rank: crate::ivector::DEFAULT_RANK,
            iterations: 10,
            update_sigma: false,
        }
    }
}

/// A frame classifier trained to reproduce hard alignments from an
/// auxiliary GMM, standing in for a senone recognizer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NetSourceParams {
    pub alignment_components: usize,
    pub alignment_iterations: usize,
    pub half_window: usize,
    pub mlp: MlpHyper,
}

impl Default for NetSourceParams {
    fn default() -> Self {
        NetSourceParams {
            alignment_components: 8730,
            alignment_iterations: 10,
            half_window: 3,
            mlp: MlpHyper {
                hidden: vec![2048; 7],
                learning_rate: 0.1,
                ..MlpHyper::default()
            },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum PosteriorSourceConfig {
    Net(NetSourceParams),
    /// `<dir>/<segment_id>.svf` posterior matrices.
    Files {
        dir: PathBuf,
        n_components: usize,
    },
}

impl Default for PosteriorSourceConfig {
    fn default() -> Self {
        PosteriorSourceConfig::Net(NetSourceParams::default())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PosteriorParams {
    pub source: PosteriorSourceConfig,
    /// Components kept after truncation by pooled occupancy.
    pub keep_components: usize,
}

impl Default for PosteriorParams {
    fn default() -> Self {
        PosteriorParams {
            source: PosteriorSourceConfig::default(),
            keep_components: 3096,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DvectorParams {
    pub half_window: usize,
    pub mlp: MlpHyper,
}

impl Default for DvectorParams {
    fn default() -> Self {
        DvectorParams {
            half_window: 20,
            mlp: MlpHyper::default(),
        }
    }
}

fn default_front_end() -> Vec<FrontEndKind> {
    vec![FrontEndKind::GmmIvector]
}

fn default_back_end() -> Vec<BackendKind> {
    vec![BackendKind::LrCosine]
}

/// The six enrollment lengths of the standard protocol, in 15-second
/// segments, each with two single-segment tests per speaker.
pub fn standard_conditions() -> Vec<Condition> {
    [1, 2, 3, 5, 10, 15]
        .into_iter()
        .map(|x| Condition::new(format!("{}\"-15\"", 15 * x), x))
        .collect()
}

fn default_n_runs() -> usize {
    100
}

fn default_seg_len() -> usize {
    1500
}

fn default_dcf08() -> DcfParams {
    DcfParams::DCF08
}

fn default_dcf10() -> DcfParams {
    DcfParams::DCF10
}

fn one_or_many<'de, D, T>(d: D) -> std::result::Result<Vec<T>, D::Error>
where
    D: Deserializer<'de>,
    T: DeserializeOwned,
{
    use serde::de::Error as _;
    let items = match serde_json::Value::deserialize(d)? {
        serde_json::Value::Array(a) => a,
        other => vec![other],
    };
    items
        .into_iter()
        .map(|v| serde_json::from_value(v).map_err(D::Error::custom))
        .collect()
}

/// Everything an experiment needs. `front_end` and `back_end` accept a single
/// name or a list.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub corpus: CorpusSource,
    #[serde(default = "default_front_end", deserialize_with = "one_or_many")]
    pub front_end: Vec<FrontEndKind>,
    #[serde(default = "default_back_end", deserialize_with = "one_or_many")]
    pub back_end: Vec<BackendKind>,
    #[serde(default = "standard_conditions")]
    pub conditions: Vec<Condition>,
    #[serde(default = "default_n_runs")]
    pub n_runs: usize,
    #[serde(default)]
    pub seed: u64,
    /// Segment length in frames.
    #[serde(default = "default_seg_len")]
    pub seg_len: usize,
    /// Number of development speakers; half the corpus when absent.
    #[serde(default)]
    pub dev_speakers: Option<usize>,
    #[serde(default)]
    pub gmm: GmmParams,
    #[serde(default)]
    pub tv: TvParams,
    #[serde(default)]
    pub posterior: PosteriorParams,
    #[serde(default)]
    pub dvector: DvectorParams,
    #[serde(default)]
    pub backend: BackendConfig,
    #[serde(default = "default_dcf08")]
    pub dcf08: DcfParams,
    #[serde(default = "default_dcf10")]
    pub dcf10: DcfParams,
}

impl ExperimentConfig {
    /// A config with protocol defaults for everything but the corpus.
    pub fn with_corpus(corpus: CorpusSource) -> Self {
        ExperimentConfig {
            corpus,
            front_end: default_front_end(),
            back_end: default_back_end(),
            conditions: standard_conditions(),
            n_runs: default_n_runs(),
            seed: 0,
            seg_len: default_seg_len(),
            dev_speakers: None,
            gmm: GmmParams::default(),
            tv: TvParams::default(),
            posterior: PosteriorParams::default(),
            dvector: DvectorParams::default(),
            backend: BackendConfig::default(),
            dcf08: DcfParams::DCF08,
            dcf10: DcfParams::DCF10,
        }
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let de = &mut serde_json::Deserializer::from_str(text);
        let cfg: ExperimentConfig = serde_path_to_error::deserialize(de).map_err(|e| {
            let path = e.path().to_string();
            let field = if path == "." { "<root>".to_string() } else { path };
            Error::config(field, e.inner().to_string())
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }

    pub fn validate(&self) -> Result<()> {
        if let CorpusSource::Synth(spec) = &self.corpus {
            spec.validate().map_err(|e| match e {
                Error::Config { field, msg } => Error::config(format!("corpus.synth.{field}"), msg),
                other => other,
            })?;
        }
        check_list("front_end", &self.front_end)?;
        check_list("back_end", &self.back_end)?;
        if self.conditions.is_empty() {
            return Err(Error::config("conditions", "at least one condition is required"));
        }
        for (i, c) in self.conditions.iter().enumerate() {
            if c.enroll_segments == 0 || c.test_segments == 0 {
                return Err(Error::config(
                    format!("conditions[{i}]"),
                    "enroll_segments and test_segments must be at least 1",
                ));
            }
            if self.conditions[..i].iter().any(|o| o.name == c.name) {
                return Err(Error::config(
                    format!("conditions[{i}].name"),
                    "duplicate condition name",
                ));
            }
        }
        let positive = [
            ("n_runs", self.n_runs),
            ("seg_len", self.seg_len),
            ("gmm.n_components", self.gmm.n_components),
            ("tv.rank", self.tv.rank),
            ("posterior.keep_components", self.posterior.keep_components),
            ("backend.lda_dim", self.backend.lda_dim),
        ];
        for (field, v) in positive {
            if v == 0 {
                return Err(Error::config(field, "must be at least 1"));
            }
        }
        if let Some(n) = self.dev_speakers {
            if n < 2 {
                return Err(Error::config("dev_speakers", "need at least two development speakers"));
            }
        }
        match &self.posterior.source {
            PosteriorSourceConfig::Net(p) if p.alignment_components < 2 => {
                return Err(Error::config(
                    "posterior.source.net.alignment_components",
                    "need at least two alignment classes",
                ))
            }
            PosteriorSourceConfig::Files { n_components: 0, .. } => {
                return Err(Error::config(
                    "posterior.source.files.n_components",
                    "must be at least 1",
                ))
            }
            _ => {}
        }
        for (field, p) in [("dcf08", &self.dcf08), ("dcf10", &self.dcf10)] {
            p.validate().map_err(|e| Error::config(field, e.to_string()))?;
        }
        Ok(())
    }
}

fn check_list<T: PartialEq + fmt::Debug>(field: &str, items: &[T]) -> Result<()> {
    if items.is_empty() {
        return Err(Error::config(field, "list is empty"));
    }
    for (i, item) in items.iter().enumerate() {
        if items[..i].contains(item) {
            return Err(Error::config(format!("{field}[{i}]"), format!("{item:?} listed twice")));
        }
    }
    Ok(())
}

/// A fixed-length piece of one conversation.
#[derive(Debug, Clone)]
pub struct Segment {
    pub speaker: String,
    pub conversation: String,
    pub frames: FrameMatrix,
}

/// The corpus split into development material and evaluation segments.
#[derive(Debug, Clone)]
pub struct Partition {
    pub dev_speakers: Vec<String>,
    /// Whole development utterances with their speaker index.
    pub dev_utterances: Vec<(usize, FrameMatrix)>,
    pub dev_segments: Vec<(usize, FrameMatrix)>,
    pub eval_segments: Vec<Segment>,
}

impl Partition {
    pub fn inventory(&self) -> SegmentInventory {
        let mut inv = SegmentInventory::default();
        for s in &self.eval_segments {
            inv.insert(&s.speaker, &s.conversation, s.frames.utterance_id.clone());
        }
        inv
    }
}

fn load_utterances(source: &CorpusSource) -> Result<Vec<(String, FrameMatrix)>> {
    match source {
        CorpusSource::Synth(spec) => Ok(data::synth_frames(spec)?
            .utterances
            .into_iter()
            .map(|u| (u.speaker_id, u.frames))
            .collect()),
        CorpusSource::Index(path) => {
            let index = CorpusIndex::read(path)?;
            index
                .entries()
                .iter()
                .map(|e| Ok((e.speaker_id.clone(), index.load(e)?)))
                .collect()
        }
    }
}

pub fn partition(
    utterances: Vec<(String, FrameMatrix)>,
    dev_speakers: Option<usize>,
    seg_len: usize,
) -> Result<Partition> {
    let mut speakers: Vec<String> = utterances.iter().map(|u| u.0.clone()).collect();
    speakers.sort();
    speakers.dedup();
    let n_dev = dev_speakers.unwrap_or(speakers.len() / 2);
    if n_dev < 2 || speakers.len() < n_dev + 2 {
        return Err(Error::config(
            "dev_speakers",
            format!(
                "{n_dev} development speakers out of {} leaves too few on either side",
                speakers.len()
            ),
        ));
    }
    let dev: BTreeMap<&str, usize> = speakers[..n_dev]
        .iter()
        .enumerate()
        .map(|(i, s)| (s.as_str(), i))
        .collect();
    let mut part = Partition {
        dev_speakers: speakers[..n_dev].to_vec(),
        dev_utterances: Vec::new(),
        dev_segments: Vec::new(),
        eval_segments: Vec::new(),
    };
    for (speaker, frames) in utterances {
        let segments = split_segments(&frames, seg_len);
        match dev.get(speaker.as_str()) {
            Some(&label) => {
                part.dev_segments.extend(segments.into_iter().map(|s| (label, s)));
                part.dev_utterances.push((label, frames));
            }
            None => part.eval_segments.extend(segments.into_iter().map(|s| Segment {
                speaker: speaker.clone(),
                conversation: frames.utterance_id.clone(),
                frames: s,
            })),
        }
    }
    if part.dev_segments.is_empty() {
        return Err(Error::config(
            "seg_len",
            "no development utterance is long enough for one segment",
        ));
    }
    Ok(part)
}

/// How an i-vector front-end aligns frames to its mixture components.
#[derive(Debug, Clone)]
pub enum Aligner {
    /// The UBM's own component posteriors.
    Ubm,
    /// Network posteriors restricted to the kept components.
    Net {
        mlp: Mlp,
        half_window: usize,
        kept: Vec<usize>,
    },
    Files {
        source: PosteriorFiles,
        kept: Vec<usize>,
    },
}

#[derive(Debug, Clone)]
#[allow(clippy::large_enum_variant)]
pub enum FrontEnd {
    Ivector {
        kind: FrontEndKind,
        ubm: Ubm,
        aligner: Aligner,
        tv: TvModel,
    },
    Dvector {
        mlp: Mlp,
        half_window: usize,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct FrontEndMeta {
    kind: FrontEndKind,
    aligner: String,
    half_window: Option<usize>,
    kept: Option<Vec<usize>>,
    posterior_dir: Option<PathBuf>,
    posterior_components: Option<usize>,
}

fn align(ubm: &Ubm, aligner: &Aligner, frames: &FrameMatrix) -> Result<PosteriorMatrix> {
    match aligner {
        Aligner::Ubm => posteriors(ubm, frames),
        Aligner::Net { mlp, half_window, kept } => Ok(NetPosteriors {
            mlp,
            half_window: *half_window,
        }
        .posteriors(frames)?
        .select(kept)),
        Aligner::Files { source, kept } => Ok(source.posteriors(frames)?.select(kept)),
    }
}

fn tv_config(cfg: &ExperimentConfig) -> TvConfig {
    TvConfig {
        rank: cfg.tv.rank,
        iterations: cfg.tv.iterations,
        seed: cfg.seed,
        update_sigma: cfg.tv.update_sigma,
    }
}

fn train_gmm_ivector(part: &Partition, cfg: &ExperimentConfig) -> Result<FrontEnd> {
    let frames: Vec<FrameMatrix> = part.dev_utterances.iter().map(|u| u.1.clone()).collect();
    let em = EmConfig {
        n_components: cfg.gmm.n_components,
        iterations: cfg.gmm.iterations,
        seed: cfg.seed,
    };
    let ubm = train_ubm_em(&frames, &em).map_err(|e| e.in_stage("UBM training"))?.ubm;
    let stats = part
        .dev_segments
        .iter()
        .map(|(_, s)| accumulate_stats(ubm.means(), s, &posteriors(&ubm, s)?, cfg.tv.update_sigma))
        .collect::<Result<Vec<_>>>()?;
    let tv = train_tv(&stats, &ubm, &tv_config(cfg))
        .map_err(|e| e.in_stage("total variability training"))?
        .model;
    Ok(FrontEnd::Ivector {
        kind: FrontEndKind::GmmIvector,
        ubm,
        aligner: Aligner::Ubm,
        tv,
    })
}

/// Trains the alignment network: an auxiliary GMM labels each development
/// frame with its most likely component and the network learns to predict
/// those labels from context-stacked input.
fn train_alignment_net(part: &Partition, p: &NetSourceParams, seed: u64) -> Result<Mlp> {
    let frames: Vec<FrameMatrix> = part.dev_utterances.iter().map(|u| u.1.clone()).collect();
    let em = EmConfig {
        n_components: p.alignment_components,
        iterations: p.alignment_iterations,
        seed,
    };
    let aligner = train_ubm_em(&frames, &em)?.ubm;
    let width = (2 * p.half_window + 1) * aligner.dim();
    let total: usize = frames.iter().map(|f| f.len()).sum();
    let mut data = DMatrix::zeros(total, width);
    let mut labels = Vec::with_capacity(total);
    let mut at = 0;
    for f in &frames {
        let g = posteriors(&aligner, f)?;
        labels.extend(g.matrix().row_iter().map(|r| r.transpose().argmax().0));
        data.rows_mut(at, f.len())
            .copy_from(&stack_context(f, p.half_window).frames);
        at += f.len();
    }
    let hyper = MlpHyper { seed, ..p.mlp.clone() };
    Ok(dvector::train_mlp_rows(&data, &labels, aligner.n_components(), &hyper)?.mlp)
}

fn unselected_posteriors(aligner: &Aligner, frames: &FrameMatrix) -> Result<PosteriorMatrix> {
    match aligner {
        Aligner::Net { mlp, half_window, .. } => NetPosteriors {
            mlp,
            half_window: *half_window,
        }
        .posteriors(frames),
        Aligner::Files { source, .. } => source.posteriors(frames),
        Aligner::Ubm => Err(Error::InvalidArgument("UBM aligner has no external posteriors".into())),
    }
}

fn train_posterior_ivector(part: &Partition, cfg: &ExperimentConfig) -> Result<FrontEnd> {
    let mut aligner = match &cfg.posterior.source {
        PosteriorSourceConfig::Net(p) => Aligner::Net {
            mlp: train_alignment_net(part, p, cfg.seed).map_err(|e| e.in_stage("alignment network training"))?,
            half_window: p.half_window,
            kept: Vec::new(),
        },
        PosteriorSourceConfig::Files { dir, n_components } => Aligner::Files {
            source: PosteriorFiles {
                dir: dir.clone(),
                n_components: *n_components,
            },
            kept: Vec::new(),
        },
    };
    let seg_frames: Vec<FrameMatrix> = part.dev_segments.iter().map(|s| s.1.clone()).collect();
    let gammas = seg_frames
        .iter()
        .map(|f| unselected_posteriors(&aligner, f))
        .collect::<Result<Vec<_>>>()?;
    let full = ubm_from_posteriors(&seg_frames, &gammas)?;
    if !full.empty.is_empty() {
        info!("{} posterior components received no mass", full.empty.len());
    }
    let c = full.ubm.n_components();
    let mut keep = cfg.posterior.keep_components;
    if keep > c {
        warn!("keep_components {keep} exceeds the {c} available components; keeping all");
        keep = c;
    }
    let pooled = gammas
        .iter()
        .fold(DVector::zeros(c), |acc, g| acc + g.matrix().row_sum().transpose());
    let selected = heaviest_components(&pooled, keep)?;
    let ubm = full.ubm.select(&selected)?;
    let stats = seg_frames
        .iter()
        .zip(&gammas)
        .map(|(f, g)| accumulate_stats(ubm.means(), f, &g.select(&selected), cfg.tv.update_sigma))
        .collect::<Result<Vec<_>>>()?;
    if let Aligner::Net { kept, .. } | Aligner::Files { kept, .. } = &mut aligner {
        *kept = selected;
    }
    let tv = train_tv(&stats, &ubm, &tv_config(cfg))
        .map_err(|e| e.in_stage("total variability training"))?
        .model;
    Ok(FrontEnd::Ivector {
        kind: FrontEndKind::PosteriorIvector,
        ubm,
        aligner,
        tv,
    })
}

fn train_dvector(part: &Partition, cfg: &ExperimentConfig) -> Result<FrontEnd> {
    let corpus: Vec<LabeledFrames> = part
        .dev_utterances
        .iter()
        .map(|(label, frames)| LabeledFrames {
            frames: frames.clone(),
            label: *label,
        })
        .collect();
    let hyper = MlpHyper {
        seed: cfg.seed,
        ..cfg.dvector.mlp.clone()
    };
    let mlp = dvector::train_mlp(&corpus, part.dev_speakers.len(), cfg.dvector.half_window, &hyper)?.mlp;
    Ok(FrontEnd::Dvector {
        mlp,
        half_window: cfg.dvector.half_window,
    })
}

impl FrontEnd {
    pub fn train(kind: FrontEndKind, part: &Partition, cfg: &ExperimentConfig) -> Result<FrontEnd> {
        info!("training {kind} front-end");
        let fe = match kind {
            FrontEndKind::GmmIvector => train_gmm_ivector(part, cfg),
            FrontEndKind::PosteriorIvector => train_posterior_ivector(part, cfg),
            FrontEndKind::Dvector => train_dvector(part, cfg),
        };
        fe.map_err(|e| e.in_stage(format!("{kind} front-end")))
    }

    pub fn kind(&self) -> FrontEndKind {
        match self {
            FrontEnd::Ivector { kind, .. } => *kind,
            FrontEnd::Dvector { .. } => FrontEndKind::Dvector,
        }
    }

    /// One embedding per segment, in order.
    pub fn embed_all<'a>(&self, segments: impl IntoIterator<Item = &'a FrameMatrix>) -> Result<Vec<DVector<f64>>> {
        match self {
            FrontEnd::Ivector { ubm, aligner, tv, .. } => {
                let ex = Extractor::new(tv, ubm.n_components(), ubm.dim())?;
                segments
                    .into_iter()
                    .map(|s| {
                        let g = align(ubm, aligner, s)?;
                        ex.extract(&accumulate_stats(ubm.means(), s, &g, false)?)
                    })
                    .collect()
            }
            FrontEnd::Dvector { mlp, half_window } => segments
                .into_iter()
                .map(|s| dvector::extract_dvector(mlp, s, *half_window))
                .collect(),
        }
    }

    /// Writes `frontend.json` plus the binary model files into `dir`.
    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let mut meta = FrontEndMeta {
            kind: self.kind(),
            aligner: "ubm".into(),
            half_window: None,
            kept: None,
            posterior_dir: None,
            posterior_components: None,
        };
        match self {
            FrontEnd::Ivector { ubm, aligner, tv, .. } => {
                ubm.save(&dir.join("ubm.svu"))?;
                tv.save(&dir.join("tv.svt"))?;
                match aligner {
                    Aligner::Ubm => {}
                    Aligner::Net { mlp, half_window, kept } => {
                        mlp.save(&dir.join("net.svn"))?;
                        meta.aligner = "net".into();
                        meta.half_window = Some(*half_window);
                        meta.kept = Some(kept.clone());
                    }
                    Aligner::Files { source, kept } => {
                        meta.aligner = "files".into();
                        meta.kept = Some(kept.clone());
                        meta.posterior_dir = Some(source.dir.clone());
                        meta.posterior_components = Some(source.n_components);
                    }
                }
            }
            FrontEnd::Dvector { mlp, half_window } => {
                mlp.save(&dir.join("net.svn"))?;
                meta.aligner = "none".into();
                meta.half_window = Some(*half_window);
            }
        }
        write_json(&dir.join("frontend.json"), &meta)
    }

    pub fn load(dir: &Path) -> Result<FrontEnd> {
        let path = dir.join("frontend.json");
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let meta: FrontEndMeta = serde_json::from_str(&text).map_err(|e| Error::Parse {
            what: path.display().to_string(),
            line: e.line(),
            msg: e.to_string(),
        })?;
        let missing = |field: &str| Error::Parse {
            what: path.display().to_string(),
            line: 0,
            msg: format!("missing `{field}`"),
        };
        if meta.kind == FrontEndKind::Dvector {
            return Ok(FrontEnd::Dvector {
                mlp: Mlp::load(&dir.join("net.svn"))?,
                half_window: meta.half_window.ok_or_else(|| missing("half_window"))?,
            });
        }
        let aligner = match meta.aligner.as_str() {
            "ubm" => Aligner::Ubm,
            "net" => Aligner::Net {
                mlp: Mlp::load(&dir.join("net.svn"))?,
                half_window: meta.half_window.ok_or_else(|| missing("half_window"))?,
                kept: meta.kept.clone().ok_or_else(|| missing("kept"))?,
            },
            "files" => Aligner::Files {
                source: PosteriorFiles {
                    dir: meta.posterior_dir.clone().ok_or_else(|| missing("posterior_dir"))?,
                    n_components: meta
                        .posterior_components
                        .ok_or_else(|| missing("posterior_components"))?,
                },
                kept: meta.kept.clone().ok_or_else(|| missing("kept"))?,
            },
            other => {
                return Err(Error::Parse {
                    what: path.display().to_string(),
                    line: 0,
                    msg: format!("unknown aligner {other:?}"),
                })
            }
        };
        Ok(FrontEnd::Ivector {
            kind: meta.kind,
            ubm: Ubm::load(&dir.join("ubm.svu"))?,
            aligner,
            tv: TvModel::load(&dir.join("tv.svt"))?,
        })
    }
}

/// Development embeddings (one column each, with speaker labels) and
/// evaluation embeddings keyed by segment id.
#[derive(Debug, Clone)]
pub struct EmbeddingSet {
    pub dev: DMatrix<f64>,
    pub dev_labels: Vec<usize>,
    pub eval: BTreeMap<String, DVector<f64>>,
}

pub fn embed_partition(fe: &FrontEnd, part: &Partition) -> Result<EmbeddingSet> {
    let dev = fe.embed_all(part.dev_segments.iter().map(|s| &s.1))?;
    let eval = fe.embed_all(part.eval_segments.iter().map(|s| &s.frames))?;
    Ok(EmbeddingSet {
        dev: crate::linalg::from_columns(&dev),
        dev_labels: part.dev_segments.iter().map(|s| s.0).collect(),
        eval: part
            .eval_segments
            .iter()
            .map(|s| s.frames.utterance_id.clone())
            .zip(eval)
            .collect(),
    })
}

pub fn fit_backend(kind: BackendKind, emb: &EmbeddingSet, cfg: &BackendConfig) -> Result<TrainedBackend> {
    TrainedBackend::fit(kind, &emb.dev, &emb.dev_labels, cfg).map_err(|e| e.in_stage(format!("{kind} back-end")))
}

/// Scores one trial design: enrollment models are averages of the
/// transformed enrollment-segment embeddings.
pub fn score_design(backend: &TrainedBackend, emb: &EmbeddingSet, design: &TrialDesign) -> Result<ScoredTrials> {
    let mut enroll = BTreeMap::new();
    for (speaker, segs) in &design.enrollment {
        let xs = segs
            .iter()
            .map(|s| emb.eval.get(s).cloned().ok_or_else(|| Error::UnresolvedId(s.clone())))
            .collect::<Result<Vec<_>>>()?;
        enroll.insert(speaker.clone(), backend.model(&xs)?);
    }
    score_trials(backend, &enroll, &emb.eval, &design.trials)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    /// Fraction in `[0, 1]`.
    pub eer: f64,
    pub dcf08: f64,
    pub dcf10: f64,
    pub dcf08_raw: f64,
    pub dcf10_raw: f64,
}

impl Metrics {
    pub fn compute(scored: &ScoredTrials, dcf08: &DcfParams, dcf10: &DcfParams) -> Result<Metrics> {
        let r08 = min_dcf_raw(scored, dcf08)?;
        let r10 = min_dcf_raw(scored, dcf10)?;
        Ok(Metrics {
            eer: eval::eer(scored)?,
            dcf08: dcf08.report(r08),
            dcf10: dcf10.report(r10),
            dcf08_raw: r08,
            dcf10_raw: r10,
        })
    }

    fn mean(all: &[Metrics]) -> Metrics {
        let n = all.len() as f64;
        let avg = |f: fn(&Metrics) -> f64| all.iter().map(f).sum::<f64>() / n;
        Metrics {
            eer: avg(|m| m.eer),
            dcf08: avg(|m| m.dcf08),
            dcf10: avg(|m| m.dcf10),
            dcf08_raw: avg(|m| m.dcf08_raw),
            dcf10_raw: avg(|m| m.dcf10_raw),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunMetrics {
    pub run: usize,
    pub seed: u64,
    pub targets: usize,
    pub nontargets: usize,
    #[serde(flatten)]
    pub metrics: Metrics,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConditionReport {
    pub condition: String,
    pub enroll_segments: usize,
    pub test_segments: usize,
    pub runs: Vec<RunMetrics>,
    pub mean: Metrics,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SystemReport {
    pub front_end: String,
    pub back_end: String,
    pub conditions: Vec<ConditionReport>,
}

impl SystemReport {
    pub fn condition(&self, name: &str) -> Option<&ConditionReport> {
        self.conditions.iter().find(|c| c.condition == name)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub seed: u64,
    pub n_runs: usize,
    pub systems: Vec<SystemReport>,
}

impl ExperimentReport {
    pub fn system(&self, front_end: &str, back_end: &str) -> Option<&SystemReport> {
        self.systems
            .iter()
            .find(|s| s.front_end == front_end && s.back_end == back_end)
    }
}

/// Scores of one system: `[condition][run]`.
pub type SystemScores = Vec<Vec<ScoredTrials>>;

/// Seed of run `r`.
pub fn run_seed(master: u64, run: usize) -> u64 {
    master.wrapping_add(run as u64)
}

/// Loaded corpus plus every front-end and back-end trained so far; models
/// are trained at most once per pipeline and optionally written to disk.
pub struct Pipeline<'a> {
    config: &'a ExperimentConfig,
    partition: Partition,
    inventory: SegmentInventory,
    designs: BTreeMap<(usize, usize), TrialDesign>,
    front_ends: BTreeMap<FrontEndKind, (FrontEnd, EmbeddingSet)>,
    back_ends: BTreeMap<(FrontEndKind, BackendKind), TrainedBackend>,
    model_dir: Option<PathBuf>,
}

impl<'a> Pipeline<'a> {
    pub fn new(config: &'a ExperimentConfig, model_dir: Option<PathBuf>) -> Result<Self> {
        config.validate()?;
        let utterances = load_utterances(&config.corpus).map_err(|e| e.in_stage("corpus loading"))?;
        let partition = partition(utterances, config.dev_speakers, config.seg_len)?;
        let inventory = partition.inventory();
        Ok(Pipeline {
            config,
            partition,
            inventory,
            designs: BTreeMap::new(),
            front_ends: BTreeMap::new(),
            back_ends: BTreeMap::new(),
            model_dir,
        })
    }

    pub fn config(&self) -> &ExperimentConfig {
        self.config
    }

    pub fn partition(&self) -> &Partition {
        &self.partition
    }

    pub fn inventory(&self) -> &SegmentInventory {
        &self.inventory
    }

    fn front_end_dir(&self, kind: FrontEndKind) -> Option<PathBuf> {
        self.model_dir.as_ref().map(|d| d.join(kind.name()))
    }

    /// Installs an already trained front-end and embeds the corpus with it.
    pub fn install_front_end(&mut self, fe: FrontEnd) -> Result<()> {
        let kind = fe.kind();
        let emb = embed_partition(&fe, &self.partition).map_err(|e| e.in_stage(format!("{kind} embedding")))?;
        self.front_ends.insert(kind, (fe, emb));
        Ok(())
    }

    pub fn front_end(&mut self, kind: FrontEndKind) -> Result<&(FrontEnd, EmbeddingSet)> {
        if !self.front_ends.contains_key(&kind) {
            let fe = FrontEnd::train(kind, &self.partition, self.config)?;
            if let Some(dir) = self.front_end_dir(kind) {
                fe.save(&dir)?;
            }
            self.install_front_end(fe)?;
        }
        Ok(&self.front_ends[&kind])
    }

    pub fn back_end(&mut self, fe: FrontEndKind, be: BackendKind) -> Result<&TrainedBackend> {
        if !self.back_ends.contains_key(&(fe, be)) {
            let config = self.config;
            let emb = &self.front_end(fe)?.1;
            let trained = fit_backend(be, emb, &config.backend)?;
            if let Some(dir) = self.front_end_dir(fe) {
                let dir = dir.join(be.name());
                fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
                trained.save(&dir)?;
            }
            self.back_ends.insert((fe, be), trained);
        }
        Ok(&self.back_ends[&(fe, be)])
    }

    pub fn install_back_end(&mut self, fe: FrontEndKind, backend: TrainedBackend) {
        self.back_ends.insert((fe, backend.kind()), backend);
    }

    pub fn design(&mut self, condition: usize, run: usize) -> Result<&TrialDesign> {
        if !self.designs.contains_key(&(condition, run)) {
            let c = &self.config.conditions[condition];
            let d = build_trials(&self.inventory, c, run_seed(self.config.seed, run))
                .map_err(|e| e.in_stage(format!("trial construction for {}", c.name)))?;
            self.designs.insert((condition, run), d);
        }
        Ok(&self.designs[&(condition, run)])
    }

    pub fn scores(&mut self, fe: FrontEndKind, be: BackendKind) -> Result<SystemScores> {
        self.back_end(fe, be)?;
        let mut all = Vec::with_capacity(self.config.conditions.len());
        for c in 0..self.config.conditions.len() {
            let mut runs = Vec::with_capacity(self.config.n_runs);
            for r in 0..self.config.n_runs {
                self.design(c, r)?;
                let design = &self.designs[&(c, r)];
                let backend = &self.back_ends[&(fe, be)];
                let emb = &self.front_ends[&fe].1;
                runs.push(score_design(backend, emb, design).map_err(|e| e.in_stage(format!("scoring {fe}/{be}")))?);
            }
            all.push(runs);
        }
        Ok(all)
    }

    pub fn report(&self, front_end: &str, back_end: &str, scores: &SystemScores) -> Result<SystemReport> {
        let cfg = self.config;
        let mut conditions = Vec::with_capacity(scores.len());
        for (c, runs) in cfg.conditions.iter().zip(scores) {
            let run_metrics = runs
                .iter()
                .enumerate()
                .map(|(r, s)| {
                    Ok(RunMetrics {
                        run: r,
                        seed: run_seed(cfg.seed, r),
                        targets: s.trials.n_targets(),
                        nontargets: s.trials.n_nontargets(),
                        metrics: Metrics::compute(s, &cfg.dcf08, &cfg.dcf10)?,
                    })
                })
                .collect::<Result<Vec<_>>>()?;
            let all: Vec<Metrics> = run_metrics.iter().map(|m| m.metrics).collect();
            conditions.push(ConditionReport {
                condition: c.name.clone(),
                enroll_segments: c.enroll_segments,
                test_segments: c.test_segments,
                mean: Metrics::mean(&all),
                runs: run_metrics,
            });
        }
        Ok(SystemReport {
            front_end: front_end.to_string(),
            back_end: back_end.to_string(),
            conditions,
        })
    }
}

pub(crate) fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value).expect("report types serialize");
    text.push('\n');
    eval::write_text(path, &text)
}

/// File-system friendly form of a condition name.
pub fn file_stem(name: &str) -> String {
    name.chars()
        .map(|c| {
            if c.is_ascii_alphanumeric() || c == '-' || c == '.' {
                c
            } else {
                '_'
            }
        })
        .collect()
}

fn write_det(dir: &Path, cfg: &ExperimentConfig, scores: &SystemScores) -> Result<()> {
    for (c, runs) in cfg.conditions.iter().zip(scores) {
        if let Some(first) = runs.first() {
            let path = dir.join(format!("{}.csv", file_stem(&c.name)));
            eval::write_text(&path, &det_csv(&det_curve(first)?))?;
        }
    }
    Ok(())
}

/// Every listed front-end with every listed back-end over all conditions and
/// runs. With `out_dir`, writes models, `report.json` and DET data for the
/// first run of each condition.
pub fn run_experiment(config: &ExperimentConfig, out_dir: Option<&Path>) -> Result<ExperimentReport> {
    let mut pipe = Pipeline::new(config, out_dir.map(|d| d.join("models")))?;
    let mut systems = Vec::new();
    for &fe in &config.front_end {
        for &be in &config.back_end {
            let scores = pipe.scores(fe, be)?;
            if let Some(dir) = out_dir {
                write_det(&dir.join("det").join(fe.name()).join(be.name()), config, &scores)?;
            }
            systems.push(pipe.report(fe.name(), be.name(), &scores)?);
        }
    }
    let report = ExperimentReport {
        seed: config.seed,
        n_runs: config.n_runs,
        systems,
    };
    if let Some(dir) = out_dir {
        write_json(&dir.join("report.json"), &report)?;
    }
    Ok(report)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonRow {
    pub front_end: String,
    pub condition: String,
    pub back_end: String,
    pub eer: f64,
    pub dcf08: f64,
    pub dcf10: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RelativeImprovement {
    pub front_end: String,
    pub condition: String,
    pub lr_eer: f64,
    pub best_back_end: String,
    pub best_eer: f64,
    /// `None` when the best baseline has zero EER.
    pub score: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonReport {
    pub seed: u64,
    pub n_runs: usize,
    pub rows: Vec<ComparisonRow>,
    pub relative_improvement: Vec<RelativeImprovement>,
    pub systems: Vec<SystemReport>,
}

/// LR+cosine against the best of the other back-ends on each condition, from
/// mean EERs. Empty when `lr_cosine` or every baseline is missing.
pub fn relative_improvements(systems: &[SystemReport]) -> Vec<RelativeImprovement> {
    let lr_name = BackendKind::LrCosine.name();
    let mut out = Vec::new();
    for lr in systems.iter().filter(|s| s.back_end == lr_name) {
        for cond in &lr.conditions {
            let best = systems
                .iter()
                .filter(|s| s.front_end == lr.front_end && s.back_end != lr_name)
                .filter_map(|s| s.condition(&cond.condition).map(|c| (s, c.mean.eer)))
                .min_by(|a, b| a.1.total_cmp(&b.1));
            let Some((best_sys, best_eer)) = best else {
                continue;
            };
            let score = relative_improvement(cond.mean.eer, best_eer).ok();
            if score.is_none() {
                warn!(
                    "relative improvement undefined for {} / {}: baseline EER is zero",
                    lr.front_end, cond.condition
                );
            }
            out.push(RelativeImprovement {
                front_end: lr.front_end.clone(),
                condition: cond.condition.clone(),
                lr_eer: cond.mean.eer,
                best_back_end: best_sys.back_end.clone(),
                best_eer,
                score,
            });
        }
    }
    out
}

/// Per-condition table of every back-end plus the relative-improvement
/// summary. Needs at least two back-ends.
pub fn run_comparison(config: &ExperimentConfig, out_dir: Option<&Path>) -> Result<ComparisonReport> {
    if config.back_end.len() < 2 {
        return Err(Error::config("back_end", "comparison needs at least two back-ends"));
    }
    let exp = run_experiment(config, out_dir)?;
    let mut rows = Vec::new();
    for &fe in &config.front_end {
        for cond in &config.conditions {
            for sys in exp.systems.iter().filter(|s| s.front_end == fe.name()) {
                let c = sys.condition(&cond.name).expect("every system covers every condition");
                rows.push(ComparisonRow {
                    front_end: sys.front_end.clone(),
                    condition: cond.name.clone(),
                    back_end: sys.back_end.clone(),
                    eer: c.mean.eer,
                    dcf08: c.mean.dcf08,
                    dcf10: c.mean.dcf10,
                });
            }
        }
    }
    let report = ComparisonReport {
        seed: config.seed,
        n_runs: config.n_runs,
        relative_improvement: relative_improvements(&exp.systems),
        rows,
        systems: exp.systems,
    };
    if let Some(dir) = out_dir {
        write_json(&dir.join("compare.json"), &report)?;
    }
    Ok(report)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FusionEntry {
    pub back_end: String,
    pub systems: Vec<SystemReport>,
    pub fused: SystemReport,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FusionReport {
    pub seed: u64,
    pub n_runs: usize,
    pub entries: Vec<FusionEntry>,
}

/// Fuses `systems` per condition and run.
pub fn fuse_system_scores(systems: &[SystemScores]) -> Result<SystemScores> {
    let first = systems
        .first()
        .ok_or_else(|| Error::InvalidArgument("no systems to fuse".into()))?;
    if systems.iter().any(|s| s.len() != first.len()) {
        return Err(Error::TrialMismatch);
    }
    (0..first.len())
        .map(|c| {
            (0..first[c].len())
                .map(|r| {
                    let per: Vec<ScoredTrials> = systems
                        .iter()
                        .map(|s| s[c].get(r).cloned().ok_or(Error::TrialMismatch))
                        .collect::<Result<_>>()?;
                    fuse_scores(&per)
                })
                .collect()
        })
        .collect()
}

/// Score-averaging fusion of all listed front-ends, separately for each
/// listed back-end. Needs at least two front-ends.
pub fn run_fusion(config: &ExperimentConfig, out_dir: Option<&Path>) -> Result<FusionReport> {
    if config.front_end.len() < 2 {
        return Err(Error::config("front_end", "fusion needs at least two front-ends"));
    }
    let mut pipe = Pipeline::new(config, out_dir.map(|d| d.join("models")))?;
    let fused_name = format!(
        "fusion({})",
        config.front_end.iter().map(|f| f.name()).collect::<Vec<_>>().join("+")
    );
    let mut entries = Vec::new();
    for &be in &config.back_end {
        let mut reports = Vec::new();
        let mut all = Vec::new();
        for &fe in &config.front_end {
            let scores = pipe.scores(fe, be)?;
            reports.push(pipe.report(fe.name(), be.name(), &scores)?);
            all.push(scores);
        }
        let fused = fuse_system_scores(&all).map_err(|e| e.in_stage("fusion"))?;
        if let Some(dir) = out_dir {
            write_det(&dir.join("det").join(&fused_name).join(be.name()), config, &fused)?;
        }
        entries.push(FusionEntry {
            back_end: be.name().to_string(),
            systems: reports,
            fused: pipe.report(&fused_name, be.name(), &fused)?,
        });
    }
    let report = FusionReport {
        seed: config.seed,
        n_runs: config.n_runs,
        entries,
    };
    if let Some(dir) = out_dir {
        write_json(&dir.join("fusion.json"), &report)?;
    }
    Ok(report)
}

/// Mean metrics of each system and condition as an aligned text table.
pub fn format_systems(systems: &[SystemReport]) -> String {
    let w = systems.iter().map(|s| s.front_end.len()).max().unwrap_or(0).max(9);
    let mut out = String::new();
    let _ = writeln!(
        out,
        "{:<w$} {:<12} {:<10} {:>8} {:>8} {:>8}",
        "front-end", "back-end", "condition", "EER%", "DCF08", "DCF10"
    );
    for s in systems {
        for c in &s.conditions {
            let _ = writeln!(
                out,
                "{:<w$} {:<12} {:<10} {:>8.3} {:>8.4} {:>8.4}",
                s.front_end,
                s.back_end,
                c.condition,
                100.0 * c.mean.eer,
                c.mean.dcf08,
                c.mean.dcf10
            );
        }
    }
    out
}

pub fn format_relative(rows: &[RelativeImprovement]) -> String {
    let mut out = String::new();
    let _ = writeln!(
        out,
        "{:<20} {:<10} {:>8} {:<12} {:>8} {:>9}",
        "front-end", "condition", "LR EER%", "best", "EER%", "rel."
    );
    for r in rows {
        let score = r
            .score
            .map_or_else(|| "n/a".to_string(), |s| format!("{:+.1}%", 100.0 * s));
        let _ = writeln!(
            out,
            "{:<20} {:<10} {:>8.3} {:<12} {:>8.3} {:>9}",
            r.front_end,
            r.condition,
            100.0 * r.lr_eer,
            r.best_back_end,
            100.0 * r.best_eer,
            score
        );
    }
    out
}

/// Writes the trial list and enrollment list of every condition and run
/// under `dir/<condition>/run<r>.{trials,enroll}`.
pub fn write_trial_designs(pipe: &mut Pipeline, dir: &Path) -> Result<usize> {
    let cfg = pipe.config();
    let names: Vec<String> = cfg.conditions.iter().map(|c| file_stem(&c.name)).collect();
    let n_runs = cfg.n_runs;
    let mut written = 0;
    for (c, name) in names.iter().enumerate() {
        for r in 0..n_runs {
            let d = pipe.design(c, r)?;
            let stem = dir.join(name).join(format!("run{r:03}"));
            d.trials.write(&stem.with_extension("trials"))?;
            eval::write_text(&stem.with_extension("enroll"), &eval::enrollment_to_text(&d.enrollment))?;
            written += 1;
        }
    }
    Ok(written)
}

/// Reads a design written by [`write_trial_designs`].
pub fn read_trial_design(dir: &Path, condition: &str, run: usize) -> Result<TrialDesign> {
    let stem = dir.join(file_stem(condition)).join(format!("run{run:03}"));
    let trials = TrialSet::read(&stem.with_extension("trials"))?;
    let path = stem.with_extension("enroll");
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let enrollment = eval::parse_enrollment(&text, &path.display().to_string())?;
    Ok(TrialDesign { enrollment, trials })
}
