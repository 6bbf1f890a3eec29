//! Transportation-mode recognition from low-rate smartphone sensors.
//!
//! The pipeline turns 10 Hz acceleration into log-banded spectrogram
//! instances and once-per-minute location fixes into location-invariant
//! window features, embeds both with modality-specific encoders into a shared
//! 256-d space, fuses the instances of a bag with gated attention pooling,
//! classifies the fused encoding into one of eight modes and smooths the
//! per-minute predictions of a session with a Viterbi pass.
//!
//! Module map:
//!
//! - [`numerics`]: dense tensors, a reverse-mode tape, the layer set, CCE
//!   loss, Adam and finite-difference gradient checks.
//! - [`accel`]: magnitude/jerk, STFT spectrograms, band table, masking.
//! - [`geo`]: Haversine distance, gap filling, location window features.
//! - [`model`]: encoders, attention pooling, classifier and the baselines.
//! - [`hmm`]: transition estimation and Viterbi decoding.
//! - [`data`]: ingestion, bag construction, splits, mixed streams, synthetic
//!   sessions.
//! - [`harness`]: training, experiments, metrics, interpretability, reports.

pub mod accel;
pub mod data;
pub mod error;
pub mod geo;
pub mod harness;
pub mod hmm;
pub mod model;
pub mod numerics;

pub use error::{Error, Result};
