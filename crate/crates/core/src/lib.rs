//! Phoneme-level style-adaptive dubbing at desk scale.
//!
//! Everything needed to train and evaluate a visual-voice-cloning model on a
//! deterministic synthetic corpus: a small reverse-mode autodiff tensor
//! engine, an STFT/mel/Griffin-Lim audio frontend, the corpus generator with
//! its analytic oracles, the model itself (phoneme-level multimodal adaptor,
//! lip aligner, utterance-level style normalization), the training loop, and
//! the objective metric suite (MCD-DTW and friends).

pub mod audio;
pub mod config;
pub mod container;
pub mod corpus;
pub mod error;
pub mod graph;
pub mod nn;
pub mod params;
pub mod pla;
pub mod selftest;
pub mod kernels;
pub mod parallel;
pub mod tensor;

pub use error::{Error, Result};
pub use graph::{Graph, Var};
pub use tensor::Tensor;

/// Scalar type for all numerics. f32 by default; the `f64` feature widens it
/// so gradient checks can assert tighter tolerances.
#[cfg(not(feature = "f64"))]
pub type Real = f32;
#[cfg(feature = "f64")]
pub type Real = f64;

/// Relative tolerance for finite-difference gradient checks under the
/// current build width.
#[cfg(not(feature = "f64"))]
pub const GRAD_CHECK_RTOL: Real = 1e-3;
#[cfg(feature = "f64")]
pub const GRAD_CHECK_RTOL: Real = 1e-6;
