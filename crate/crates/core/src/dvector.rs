//! Frame-level speaker classifier and d-vector extraction.
//!
//! The network takes context-stacked frames, has rectified-linear hidden
//! layers and a softmax over the development speakers. An utterance's d-vector
//! is the mean activation of the last hidden layer over its frames. The same
//! network's softmax outputs can serve as frame alignments for
//! [`crate::gmm::ubm_from_posteriors`].

use std::path::Path;

use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::binio::{Reader, Writer};
use crate::data::{stack_context, FrameMatrix};
use crate::error::{Error, Result};
use crate::gmm::{PosteriorMatrix, PosteriorSource};

pub const NET_MAGIC: &[u8; 4] = b"SVN1";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MlpHyper {
    pub hidden: Vec<usize>,
    pub learning_rate: f64,
    pub momentum_initial: f64,
    pub momentum_final: f64,
    /// Epoch (0-based) from which `momentum_final` applies.
    pub momentum_switch_epoch: usize,
    pub dropout: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
}

impl Default for MlpHyper {
    fn default() -> Self {
        MlpHyper {
            hidden: vec![400; 4],
            learning_rate: 0.008,
            momentum_initial: 0.5,
            momentum_final: 0.9,
            momentum_switch_epoch: 10,
            dropout: 0.2,
            batch_size: 512,
            epochs: 50,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Layer {
    /// `out x in`
    pub w: DMatrix<f64>,
    pub b: DVector<f64>,
}

impl Layer {
    fn zeros_like(&self) -> Layer {
        Layer {
            w: DMatrix::zeros(self.w.nrows(), self.w.ncols()),
            b: DVector::zeros(self.b.len()),
        }
    }
}

/// Hidden ReLU layers followed by a softmax output layer.
#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    pub layers: Vec<Layer>,
}

/// Activations of one input: post-ReLU hidden layers and the softmax output.
#[derive(Debug, Clone)]
pub struct Forward {
    pub hidden: Vec<DVector<f64>>,
    pub posteriors: DVector<f64>,
}

impl Mlp {
    /// He-initialized network with zero biases.
    pub fn init(input_dim: usize, hidden: &[usize], n_classes: usize, seed: u64) -> Result<Mlp> {
        if input_dim == 0 || n_classes == 0 || hidden.contains(&0) {
            return Err(Error::InvalidArgument("network layer widths must be positive".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut dims = vec![input_dim];
        dims.extend_from_slice(hidden);
        dims.push(n_classes);
        let layers = dims
            .windows(2)
            .map(|w| {
                let scale = (2.0 / w[0] as f64).sqrt();
                Layer {
                    w: DMatrix::from_fn(w[1], w[0], |_, _| {
                        let z: f64 = StandardNormal.sample(&mut rng);
                        scale * z
                    }),
                    b: DVector::zeros(w[1]),
                }
            })
            .collect();
        Ok(Mlp { layers })
    }

    pub fn from_layers(layers: Vec<Layer>) -> Result<Mlp> {
        if layers.is_empty() {
            return Err(Error::InvalidArgument("network needs at least one layer".into()));
        }
        for (i, l) in layers.iter().enumerate() {
            if l.b.len() != l.w.nrows() {
                return Err(Error::DimensionMismatch {
                    context: "layer bias length",
                    expected: l.w.nrows(),
                    got: l.b.len(),
                });
            }
            if i > 0 && layers[i - 1].w.nrows() != l.w.ncols() {
                return Err(Error::DimensionMismatch {
                    context: "layer input width",
                    expected: layers[i - 1].w.nrows(),
                    got: l.w.ncols(),
                });
            }
            if l.w.iter().chain(l.b.iter()).any(|v| !v.is_finite()) {
                return Err(Error::InvalidArgument(format!("layer {i} has non-finite parameters")));
            }
        }
        Ok(Mlp { layers })
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].w.ncols()
    }

    pub fn n_classes(&self) -> usize {
        self.layers.last().map_or(0, |l| l.w.nrows())
    }

    pub fn n_hidden(&self) -> usize {
        self.layers.len() - 1
    }

    /// Width of the last hidden layer, i.e. the d-vector dimension.
    pub fn embedding_dim(&self) -> Option<usize> {
        (self.n_hidden() > 0).then(|| self.layers[self.n_hidden() - 1].w.nrows())
    }

    fn check_width(&self, width: usize) -> Result<()> {
        if width != self.input_dim() {
            return Err(Error::DimensionMismatch {
                context: "network input width",
                expected: self.input_dim(),
                got: width,
            });
        }
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut w = Writer::new(NET_MAGIC);
        w.u32(self.layers.len());
        for l in &self.layers {
            w.u32(l.w.ncols()).u32(l.w.nrows());
        }
        for l in &self.layers {
            w.matrix(&l.w).f64s(l.b.iter());
        }
        w.save(path)
    }

    pub fn load(path: &Path) -> Result<Mlp> {
        let mut r = Reader::open(path, NET_MAGIC)?;
        let count = r.u32()?;
        let mut dims = Vec::with_capacity(count);
        for _ in 0..count {
            let i = r.u32()?;
            let o = r.u32()?;
            dims.push((i, o));
        }
        r.expect_payload(dims.iter().map(|(i, o)| i * o + o).sum(), 8)?;
        let mut layers = Vec::with_capacity(count);
        for (i, o) in dims {
            let w = r.matrix(o, i)?;
            let b = r.vector(o)?;
            layers.push(Layer { w, b });
        }
        Mlp::from_layers(layers)
    }
}

fn softmax_rows(m: &mut DMatrix<f64>) {
    for mut row in m.row_iter_mut() {
        let mx = row.max();
        row.apply(|v| *v = (*v - mx).exp());
        let s = row.sum();
        row /= s;
    }
}

/// `rows x out = input * W' + 1 b'`
fn affine(input: &DMatrix<f64>, layer: &Layer) -> DMatrix<f64> {
    let mut a = input * layer.w.transpose();
    for mut row in a.row_iter_mut() {
        row += layer.b.transpose();
    }
    a
}

/// Batch activations; `masks[i]`, when given, multiplies hidden layer `i`
/// after the ReLU.
struct BatchPass {
    /// layer inputs: `inputs[0]` is the batch, `inputs[i]` the output of hidden layer `i-1`
    inputs: Vec<DMatrix<f64>>,
    pre: Vec<DMatrix<f64>>,
    probs: DMatrix<f64>,
}

fn batch_forward(mlp: &Mlp, x: &DMatrix<f64>, masks: Option<&[DMatrix<f64>]>) -> BatchPass {
    let mut inputs = vec![x.clone()];
    let mut pre = Vec::with_capacity(mlp.n_hidden());
    for (i, layer) in mlp.layers[..mlp.n_hidden()].iter().enumerate() {
        let a = affine(inputs.last().expect("non-empty"), layer);
        let mut h = a.map(|v| v.max(0.0));
        if let Some(ms) = masks {
            h.component_mul_assign(&ms[i]);
        }
        pre.push(a);
        inputs.push(h);
    }
    let mut probs = affine(inputs.last().expect("non-empty"), mlp.layers.last().expect("non-empty"));
    softmax_rows(&mut probs);
    BatchPass { inputs, pre, probs }
}

fn cross_entropy(probs: &DMatrix<f64>, labels: &[usize]) -> f64 {
    labels
        .iter()
        .enumerate()
        .map(|(r, &k)| -probs[(r, k)].max(f64::MIN_POSITIVE).ln())
        .sum::<f64>()
        / labels.len() as f64
}

fn backward(mlp: &Mlp, pass: &BatchPass, labels: &[usize], masks: Option<&[DMatrix<f64>]>) -> Vec<Layer> {
    let n = labels.len() as f64;
    let mut delta = pass.probs.clone();
    for (r, &k) in labels.iter().enumerate() {
        delta[(r, k)] -= 1.0;
    }
    delta /= n;
    let mut grads: Vec<Layer> = mlp.layers.iter().map(Layer::zeros_like).collect();
    for li in (0..mlp.layers.len()).rev() {
        grads[li].w = delta.transpose() * &pass.inputs[li];
        grads[li].b = delta.row_sum().transpose();
        if li == 0 {
            break;
        }
        let mut back = &delta * &mlp.layers[li].w;
        let pre = &pass.pre[li - 1];
        for r in 0..back.nrows() {
            for c in 0..back.ncols() {
                if pre[(r, c)] <= 0.0 {
                    back[(r, c)] = 0.0;
                }
            }
        }
        if let Some(ms) = masks {
            back.component_mul_assign(&ms[li - 1]);
        }
        delta = back;
    }
    grads
}

/// Mean cross-entropy of `inputs` (one sample per row) and its gradient with
/// respect to every parameter, without dropout.
pub fn loss_and_gradients(mlp: &Mlp, inputs: &DMatrix<f64>, labels: &[usize]) -> Result<(f64, Vec<Layer>)> {
    mlp.check_width(inputs.ncols())?;
    check_labels(labels, inputs.nrows(), mlp.n_classes())?;
    let pass = batch_forward(mlp, inputs, None);
    let loss = cross_entropy(&pass.probs, labels);
    Ok((loss, backward(mlp, &pass, labels, None)))
}

fn check_labels(labels: &[usize], rows: usize, classes: usize) -> Result<()> {
    if labels.len() != rows {
        return Err(Error::DimensionMismatch {
            context: "label count vs. samples",
            expected: rows,
            got: labels.len(),
        });
    }
    if let Some(&bad) = labels.iter().find(|&&k| k >= classes) {
        return Err(Error::InvalidArgument(format!(
            "label {bad} out of range for {classes} classes"
        )));
    }
    Ok(())
}

/// Inference pass for one stacked frame. Dropout is never applied here.
pub fn forward(mlp: &Mlp, stacked_frame: &DVector<f64>) -> Result<Forward> {
    mlp.check_width(stacked_frame.len())?;
    let row = DMatrix::from_row_slice(1, stacked_frame.len(), stacked_frame.as_slice());
    let pass = batch_forward(mlp, &row, None);
    Ok(Forward {
        hidden: pass.inputs[1..].iter().map(|h| h.row(0).transpose()).collect(),
        posteriors: pass.probs.row(0).transpose(),
    })
}

/// Utterance frames paired with a speaker index.
#[derive(Debug, Clone)]
pub struct LabeledFrames {
    pub frames: FrameMatrix,
    pub label: usize,
}

#[derive(Debug, Clone)]
pub struct MlpTraining {
    pub mlp: Mlp,
    /// Mean training cross-entropy per epoch (with dropout active).
    pub epoch_losses: Vec<f64>,
}

/// Minibatch SGD with momentum and inverted dropout on the hidden units.
pub fn train_mlp(
    corpus: &[LabeledFrames],
    n_classes: usize,
    half_window: usize,
    hyper: &MlpHyper,
) -> Result<MlpTraining> {
    if n_classes < 2 {
        return Err(Error::InvalidArgument("need at least two speakers".into()));
    }
    let dim = corpus
        .first()
        .map(|u| u.frames.dim())
        .ok_or_else(|| Error::Degenerate("empty training corpus".into()))?;
    let mut rows = Vec::new();
    let mut labels = Vec::new();
    for u in corpus {
        if u.frames.dim() != dim {
            return Err(Error::DimensionMismatch {
                context: "training frame dimension",
                expected: dim,
                got: u.frames.dim(),
            });
        }
        if u.label >= n_classes {
            return Err(Error::InvalidArgument(format!(
                "label {} out of range for {n_classes} classes",
                u.label
            )));
        }
        rows.push(stack_context(&u.frames, half_window).frames);
        labels.extend(std::iter::repeat_n(u.label, u.frames.len()));
    }
    let width = (2 * half_window + 1) * dim;
    let total: usize = rows.iter().map(|r| r.nrows()).sum();
    let mut data = DMatrix::zeros(total, width);
    let mut at = 0;
    for r in &rows {
        data.rows_mut(at, r.nrows()).copy_from(r);
        at += r.nrows();
    }
    train_mlp_rows(&data, &labels, n_classes, hyper)
}

/// Trains on already stacked input rows with one class label per row.
pub fn train_mlp_rows(
    data: &DMatrix<f64>,
    labels: &[usize],
    n_classes: usize,
    hyper: &MlpHyper,
) -> Result<MlpTraining> {
    if data.nrows() != labels.len() {
        return Err(Error::DimensionMismatch {
            context: "training labels vs. rows",
            expected: data.nrows(),
            got: labels.len(),
        });
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= n_classes) {
        return Err(Error::InvalidArgument(format!(
            "label {bad} out of range for {n_classes} classes"
        )));
    }
    let distinct = {
        let mut l = labels.to_vec();
        l.sort_unstable();
        l.dedup();
        l.len()
    };
    if distinct < 2 {
        return Err(Error::Degenerate("training frames cover fewer than two classes".into()));
    }
    if !(0.0..1.0).contains(&hyper.dropout) || hyper.batch_size == 0 {
        return Err(Error::InvalidArgument(
            "dropout must lie in [0, 1) and batch size be positive".into(),
        ));
    }
    let width = data.ncols();
    let total = data.nrows();

    let mut mlp = Mlp::init(width, &hyper.hidden, n_classes, hyper.seed)?;
    let mut velocity: Vec<Layer> = mlp.layers.iter().map(Layer::zeros_like).collect();
    let mut shuffle_rng = ChaCha8Rng::seed_from_u64(hyper.seed);
    shuffle_rng.set_stream(1);
    let mut dropout_rng = ChaCha8Rng::seed_from_u64(hyper.seed);
    dropout_rng.set_stream(2);
    let keep = 1.0 - hyper.dropout;
    let mut order: Vec<usize> = (0..total).collect();
    let mut epoch_losses = Vec::with_capacity(hyper.epochs);

    for epoch in 0..hyper.epochs {
        order.shuffle(&mut shuffle_rng);
        let momentum = if epoch < hyper.momentum_switch_epoch {
            hyper.momentum_initial
        } else {
            hyper.momentum_final
        };
        let mut loss_sum = 0.0;
        for batch in order.chunks(hyper.batch_size) {
            let x = data.select_rows(batch);
            let y: Vec<usize> = batch.iter().map(|&i| labels[i]).collect();
            let masks: Vec<DMatrix<f64>> = mlp.layers[..mlp.n_hidden()]
                .iter()
                .map(|l| {
                    DMatrix::from_fn(batch.len(), l.w.nrows(), |_, _| {
                        if hyper.dropout == 0.0 || dropout_rng.random::<f64>() < keep {
                            1.0 / keep
                        } else {
                            0.0
                        }
                    })
                })
                .collect();
            let pass = batch_forward(&mlp, &x, Some(&masks));
            loss_sum += cross_entropy(&pass.probs, &y) * batch.len() as f64;
            let grads = backward(&mlp, &pass, &y, Some(&masks));
            for ((layer, v), g) in mlp.layers.iter_mut().zip(&mut velocity).zip(&grads) {
                v.w = &v.w * momentum - &g.w * hyper.learning_rate;
                v.b = &v.b * momentum - &g.b * hyper.learning_rate;
                layer.w += &v.w;
                layer.b += &v.b;
            }
        }
        epoch_losses.push(loss_sum / total as f64);
    }
    if mlp.layers.iter().any(|l| l.w.iter().any(|v| !v.is_finite())) {
        return Err(Error::Degenerate("network training diverged".into()));
    }
    Ok(MlpTraining { mlp, epoch_losses })
}

/// Softmax posteriors for every frame of an utterance.
pub fn frame_posteriors(mlp: &Mlp, frames: &FrameMatrix, half_window: usize) -> Result<DMatrix<f64>> {
    let stacked = stack_context(frames, half_window);
    mlp.check_width(stacked.dim())?;
    Ok(batch_forward(mlp, &stacked.frames, None).probs)
}

/// Mean post-ReLU activation of the last hidden layer over all frames.
pub fn extract_dvector(mlp: &Mlp, frames: &FrameMatrix, half_window: usize) -> Result<DVector<f64>> {
    let stacked = stack_context(frames, half_window);
    dvector_from_stacked(mlp, &stacked.frames)
}

/// Same as [`extract_dvector`] for rows that are already context-stacked.
pub fn dvector_from_stacked(mlp: &Mlp, stacked: &DMatrix<f64>) -> Result<DVector<f64>> {
    mlp.check_width(stacked.ncols())?;
    if mlp.n_hidden() == 0 {
        return Err(Error::InvalidArgument("network has no hidden layer".into()));
    }
    let pass = batch_forward(mlp, stacked, None);
    let top = &pass.inputs[mlp.n_hidden()];
    Ok(top.row_mean().transpose())
}

/// Uses a trained network as a frame-alignment source.
pub struct NetPosteriors<'a> {
    pub mlp: &'a Mlp,
    pub half_window: usize,
}

impl PosteriorSource for NetPosteriors<'_> {
    fn n_components(&self) -> usize {
        self.mlp.n_classes()
    }

    fn posteriors(&self, frames: &FrameMatrix) -> Result<PosteriorMatrix> {
        PosteriorMatrix::from_raw(frame_posteriors(self.mlp, frames, self.half_window)?)
    }
}
