//! Speaker verification toolkit built around a linear-regression back-end.
//!
//! Utterance embeddings (i-vectors or d-vectors) are mapped into a speaker
//! space by a closed-form least-squares fit against one-hot speaker targets,
//! averaged into speaker models and compared with cosine similarity. The
//! crate also carries the front-ends that produce those embeddings, the usual
//! comparison back-ends (cosine, WCCN, LDA, PLDA) and the trial/metric
//! machinery needed to evaluate them.

pub mod backend;
pub mod binio;
pub mod data;
pub mod dvector;
pub mod error;
pub mod eval;
pub mod experiment;
pub mod gmm;
pub mod ivector;
pub mod linalg;

pub use error::{Error, Result};
