//! Frame-level feature matrices, corpus indexing and the synthetic corpus
//! generator used for desk-scale experiments.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::binio::{Reader, Writer};
use crate::error::{Error, Result};

pub const FEATURE_MAGIC: &[u8; 4] = b"SVF1";

/// One utterance worth of acoustic frames, `L x F`, one frame per row.
#[derive(Debug, Clone, PartialEq)]
pub struct FrameMatrix {
    pub utterance_id: String,
    pub frames: DMatrix<f64>,
}

impl FrameMatrix {
    pub fn new(utterance_id: impl Into<String>, frames: DMatrix<f64>) -> Result<Self> {
        if frames.nrows() == 0 || frames.ncols() == 0 {
            return Err(Error::InvalidArgument(format!(
                "frame matrix must be non-empty, got {}x{}",
                frames.nrows(),
                frames.ncols()
            )));
        }
        check_finite(&frames)?;
        Ok(FrameMatrix {
            utterance_id: utterance_id.into(),
            frames,
        })
    }

    pub fn len(&self) -> usize {
        self.frames.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.nrows() == 0
    }

    pub fn dim(&self) -> usize {
        self.frames.ncols()
    }

    pub fn frame(&self, l: usize) -> DVector<f64> {
        self.frames.row(l).transpose()
    }
}

fn check_finite(m: &DMatrix<f64>) -> Result<()> {
    for r in 0..m.nrows() {
        for c in 0..m.ncols() {
            if !m[(r, c)].is_finite() {
                return Err(Error::NonFinite { row: r, col: c });
            }
        }
    }
    Ok(())
}

/// Reads an `SVF1` feature file. The utterance id is the file stem.
pub fn load_features(path: &Path) -> Result<FrameMatrix> {
    let mut r = Reader::open(path, FEATURE_MAGIC)?;
    let rows = r.u32()?;
    let cols = r.u32()?;
    r.expect_payload(rows * cols, 4)?;
    let vals = r.f32s(rows * cols)?;
    let frames = DMatrix::from_row_iterator(rows, cols, vals.into_iter().map(f64::from));
    let id = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    FrameMatrix::new(id, frames)
}

/// Writes an `SVF1` feature file; values are stored as f32.
pub fn save_features(frames: &FrameMatrix, path: &Path) -> Result<()> {
    save_matrix_f32(&frames.frames, path)
}

pub(crate) fn save_matrix_f32(m: &DMatrix<f64>, path: &Path) -> Result<()> {
    let mut w = Writer::new(FEATURE_MAGIC);
    w.u32(m.nrows()).u32(m.ncols());
    for r in 0..m.nrows() {
        for c in 0..m.ncols() {
            w.f32(m[(r, c)] as f32);
        }
    }
    w.save(path)
}

/// Splices `half_window` neighbours on each side of every frame. Frames past
/// either end are replaced by the nearest edge frame, so the row count is kept.
pub fn stack_context(frames: &FrameMatrix, half_window: usize) -> FrameMatrix {
    let (len, dim) = frames.frames.shape();
    let width = 2 * half_window + 1;
    let mut out = DMatrix::zeros(len, width * dim);
    for l in 0..len {
        for k in 0..width {
            let src = (l + k).saturating_sub(half_window).min(len - 1);
            out.view_mut((l, k * dim), (1, dim)).copy_from(&frames.frames.row(src));
        }
    }
    FrameMatrix {
        utterance_id: frames.utterance_id.clone(),
        frames: out,
    }
}

/// Cuts an utterance into consecutive `seg_len`-frame segments, dropping the
/// tail. Segment ids are `<utterance>#<index>`.
pub fn split_segments(frames: &FrameMatrix, seg_len: usize) -> Vec<FrameMatrix> {
    assert!(seg_len >= 1, "segment length must be positive");
    let count = frames.len() / seg_len;
    (0..count)
        .map(|k| FrameMatrix {
            utterance_id: segment_id(&frames.utterance_id, k),
            frames: frames.frames.rows(k * seg_len, seg_len).into_owned(),
        })
        .collect()
}

pub fn segment_id(utterance_id: &str, index: usize) -> String {
    format!("{utterance_id}#{index}")
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct UtteranceEntry {
    pub utterance_id: String,
    pub speaker_id: String,
    pub path: PathBuf,
}

/// Utterance-to-speaker map plus feature locations, relative to `root`.
#[derive(Debug, Clone, Default)]
pub struct CorpusIndex {
    root: PathBuf,
    entries: Vec<UtteranceEntry>,
    by_id: BTreeMap<String, usize>,
    by_speaker: BTreeMap<String, Vec<usize>>,
}

impl CorpusIndex {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        CorpusIndex {
            root: root.into(),
            ..Default::default()
        }
    }

    pub fn push(&mut self, entry: UtteranceEntry) -> Result<()> {
        if self.by_id.contains_key(&entry.utterance_id) {
            return Err(Error::InvalidArgument(format!(
                "utterance {} indexed twice",
                entry.utterance_id
            )));
        }
        let idx = self.entries.len();
        self.by_id.insert(entry.utterance_id.clone(), idx);
        self.by_speaker.entry(entry.speaker_id.clone()).or_default().push(idx);
        self.entries.push(entry);
        Ok(())
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entries(&self) -> &[UtteranceEntry] {
        &self.entries
    }

    /// Speaker ids in sorted order.
    pub fn speakers(&self) -> Vec<&str> {
        self.by_speaker.keys().map(String::as_str).collect()
    }

    pub fn utterances_of(&self, speaker: &str) -> Vec<&UtteranceEntry> {
        self.by_speaker
            .get(speaker)
            .map(|ix| ix.iter().map(|&i| &self.entries[i]).collect())
            .unwrap_or_default()
    }

    pub fn utterance_count(&self, speaker: &str) -> usize {
        self.by_speaker.get(speaker).map_or(0, Vec::len)
    }

    pub fn speaker_of(&self, utterance_id: &str) -> Option<&str> {
        self.by_id
            .get(utterance_id)
            .map(|&i| self.entries[i].speaker_id.as_str())
    }

    pub fn load(&self, entry: &UtteranceEntry) -> Result<FrameMatrix> {
        let mut fm = load_features(&self.root.join(&entry.path))?;
        fm.utterance_id = entry.utterance_id.clone();
        Ok(fm)
    }

    /// Parses `<utterance_id> <speaker_id> <relative_path>` lines; the root is
    /// the index file's directory.
    pub fn read(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let root = path.parent().unwrap_or(Path::new(".")).to_path_buf();
        let mut index = CorpusIndex::new(root);
        for (n, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() {
                continue;
            }
            let parts: Vec<&str> = line.split_whitespace().collect();
            if parts.len() != 3 {
                return Err(Error::Parse {
                    what: path.display().to_string(),
                    line: n + 1,
                    msg: format!("expected 3 fields, found {}", parts.len()),
                });
            }
            index.push(UtteranceEntry {
                utterance_id: parts[0].to_string(),
                speaker_id: parts[1].to_string(),
                path: PathBuf::from(parts[2]),
            })?;
        }
        Ok(index)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let mut out = String::new();
        for e in &self.entries {
            out.push_str(&format!("{} {} {}\n", e.utterance_id, e.speaker_id, e.path.display()));
        }
        fs::write(path, out).map_err(|e| Error::io(path, e))
    }
}

/// Parameters of the synthetic speaker corpus.
///
/// Each speaker draws a mean vector with standard deviation `speaker_spread`
/// per dimension, each utterance adds a channel offset (`channel_spread`) and
/// each frame adds isotropic noise (`frame_noise`).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthSpec {
    pub n_speakers: usize,
    pub utts_per_speaker: usize,
    pub frames_per_utt: usize,
    pub feature_dim: usize,
    pub speaker_spread: f64,
    pub channel_spread: f64,
    pub frame_noise: f64,
    pub seed: u64,
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        let counts = [
            ("n_speakers", self.n_speakers),
            ("utts_per_speaker", self.utts_per_speaker),
            ("frames_per_utt", self.frames_per_utt),
            ("feature_dim", self.feature_dim),
        ];
        for (name, v) in counts {
            if v == 0 {
                return Err(Error::config(name, "must be at least 1"));
            }
        }
        let spreads = [
            ("speaker_spread", self.speaker_spread),
            ("channel_spread", self.channel_spread),
            ("frame_noise", self.frame_noise),
        ];
        for (name, v) in spreads {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::config(name, "must be a finite nonnegative number"));
            }
        }
        Ok(())
    }
}

/// A generated utterance with its speaker.
#[derive(Debug, Clone)]
pub struct SynthUtterance {
    pub speaker_id: String,
    pub frames: FrameMatrix,
}

#[derive(Debug, Clone)]
pub struct SynthCorpus {
    pub utterances: Vec<SynthUtterance>,
    /// Per-speaker mean vectors, in speaker order.
    pub speaker_means: Vec<DVector<f64>>,
}

pub fn speaker_name(i: usize) -> String {
    format!("spk{i:03}")
}

/// Generates the corpus in memory. Values are rounded to f32 so the on-disk
/// copy written by [`synth_corpus`] reloads to exactly the same matrices.
pub fn synth_frames(spec: &SynthSpec) -> Result<SynthCorpus> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let dim = spec.feature_dim;
    let mut gauss = |scale: f64| -> f64 {
        let z: f64 = StandardNormal.sample(&mut rng);
        scale * z
    };
    let mut speaker_means = Vec::with_capacity(spec.n_speakers);
    let mut utterances = Vec::with_capacity(spec.n_speakers * spec.utts_per_speaker);
    for s in 0..spec.n_speakers {
        let mean = DVector::from_fn(dim, |_, _| gauss(spec.speaker_spread));
        let speaker_id = speaker_name(s);
        for u in 0..spec.utts_per_speaker {
            let channel = DVector::from_fn(dim, |_, _| gauss(spec.channel_spread));
            let frames = DMatrix::from_fn(spec.frames_per_utt, dim, |_, f| {
                let v = mean[f] + channel[f] + gauss(spec.frame_noise);
                f64::from(v as f32)
            });
            utterances.push(SynthUtterance {
                speaker_id: speaker_id.clone(),
                frames: FrameMatrix::new(format!("{speaker_id}_u{u:02}"), frames)?,
            });
        }
        speaker_means.push(mean.map(|v| f64::from(v as f32)));
    }
    Ok(SynthCorpus {
        utterances,
        speaker_means,
    })
}

/// Generates the corpus under `dir`: `index.txt` plus `feats/<utt>.svf`.
pub fn synth_corpus(spec: &SynthSpec, dir: &Path) -> Result<CorpusIndex> {
    let corpus = synth_frames(spec)?;
    fs::create_dir_all(dir.join("feats")).map_err(|e| Error::io(dir, e))?;
    let mut index = CorpusIndex::new(dir);
    for u in &corpus.utterances {
        let rel = PathBuf::from("feats").join(format!("{}.svf", u.frames.utterance_id));
        save_features(&u.frames, &dir.join(&rel))?;
        index.push(UtteranceEntry {
            utterance_id: u.frames.utterance_id.clone(),
            speaker_id: u.speaker_id.clone(),
            path: rel,
        })?;
    }
    index.write(&dir.join("index.txt"))?;
    Ok(index)
}
