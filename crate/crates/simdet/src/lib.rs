//! One-shot detection with convolutional Siamese similarity maps and
//! attention pooling.
//!
//! The crate trains an embedding network shared between an *exemplar* (a
//! single instance of a class never seen in training) and a larger *target
//! example*, scores every target location by cosine similarity in embedding
//! space, pools the similarity map into a single pair score through a
//! temperature softmax, and learns from pair-level binary labels alone —
//! localisation falls out of the attention weights. Alongside the model it
//! ships the two classical baselines it is measured against (dynamic time
//! warping for sequences, HOG plus per-exemplar linear classifiers for
//! images), synthetic data generators for both tracks, and the detection
//! evaluation protocol (pooled average precision at an IoU threshold,
//! precision at fixed recall levels, AP-vs-IoU sweeps).
//!
//! A rendered guide lives in `book/`; its code snippets are compiled and run
//! as doc-tests from this crate.

pub mod baseline;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod error;
pub mod eval;
pub mod gradcheck;
mod kernels;
pub mod net;
pub mod optim;
pub mod rng;
pub mod runner;
pub mod scorers;
pub mod scoring;
pub mod tape;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use tensor::Tensor;

#[cfg(doctest)]
mod booktests;
