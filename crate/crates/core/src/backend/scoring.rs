use nalgebra::DVector;

use crate::error::{Error, Result};

/// Average of an enrolled (or test) speaker's utterance vectors.
#[derive(Debug, Clone, PartialEq)]
pub struct SpeakerModel {
    pub m: DVector<f64>,
    pub n_utts: usize,
}

pub fn speaker_model(vectors: &[DVector<f64>]) -> Result<SpeakerModel> {
    let first = vectors
        .first()
        .ok_or_else(|| Error::InvalidArgument("speaker model needs at least one vector".into()))?;
    let mut sum = DVector::zeros(first.len());
    for v in vectors {
        if v.len() != first.len() {
            return Err(Error::DimensionMismatch {
                context: "speaker model vector length",
                expected: first.len(),
                got: v.len(),
            });
        }
        sum += v;
    }
    Ok(SpeakerModel {
        m: sum / vectors.len() as f64,
        n_utts: vectors.len(),
    })
}

pub fn cosine(a: &DVector<f64>, b: &DVector<f64>) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::DimensionMismatch {
            context: "cosine operands",
            expected: a.len(),
            got: b.len(),
        });
    }
    let (na, nb) = (a.norm(), b.norm());
    if na == 0.0 || nb == 0.0 {
        return Err(Error::ZeroNorm);
    }
    Ok((a.dot(b) / (na * nb)).clamp(-1.0, 1.0))
}

pub fn cosine_score(enroll: &SpeakerModel, test: &SpeakerModel) -> Result<f64> {
    cosine(&enroll.m, &test.m)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Decision {
    Accept,
    Reject,
}

/// Same speaker iff the score is strictly above the threshold.
pub fn decide(score: f64, theta: f64) -> Decision {
    if score > theta {
        Decision::Accept
    } else {
        Decision::Reject
    }
}
