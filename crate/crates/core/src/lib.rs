//! One-step target-signal extraction in the complex STFT domain.
//!
//! The library trains a mean-velocity network that transports an observed
//! mixture spectrogram to the target spectrogram in a single finite-interval
//! update, conditioned on an enrollment prefix. Training combines a
//! flow-matching anchor on the degenerate interval with a stop-gradient
//! teacher-student consistency target, so no Jacobian-vector products are
//! ever needed. Everything runs in double precision on the CPU and is
//! verifiable end to end on synthetic mixtures.

pub mod audio;
pub mod autodiff;
pub mod config;
pub mod infer;
pub mod metrics;
pub mod nn;
pub mod objective;
pub mod schedule;
pub mod spectral;
pub mod synth;
pub mod train;
pub mod trajectory;

mod error;

pub use error::{Error, Result};
