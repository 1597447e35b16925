//! One-step extraction (NFE = 1): a single mean-velocity evaluation per
//! chunk, optional mixing-ratio start coordinate, chunked long-utterance
//! handling, and waveform reconstruction.

use crate::audio::Waveform;
use crate::nn::{MeanVelocityNet, MixRatioNet, ParamStore};
use crate::spectral::{chunk, concat_time, istft_with_rate, stft, Spectrogram, StftConfig};
use crate::{Error, Result};

/// Inference settings.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct InferenceConfig {
    /// Frames per chunk; 0 processes the whole utterance at once.
    pub chunk_frames: usize,
    /// Estimate the start coordinate with the mixing-ratio regressor.
    pub use_mr: bool,
    pub stft: StftConfig,
}

impl InferenceConfig {
    pub fn desk() -> Self {
        Self {
            chunk_frames: 0,
            use_mr: false,
            stft: StftConfig::desk(),
        }
    }
}

/// Counts network evaluations so tests can assert NFE accounting.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct NfeCounter {
    pub velocity_evals: usize,
    pub mr_evals: usize,
}

/// Anything that can play the role of the mean-velocity predictor in the
/// extraction pipeline (the trained network, or a closed-form oracle in
/// tests).
pub trait VelocitySource {
    fn mean_velocity(
        &self,
        z: &Spectrogram,
        e: &Spectrogram,
        t: f64,
        r: f64,
    ) -> Result<Spectrogram>;
}

/// The trained network as a velocity source.
pub struct NetVelocity<'a> {
    pub net: &'a MeanVelocityNet,
    pub params: &'a ParamStore,
}

impl VelocitySource for NetVelocity<'_> {
    fn mean_velocity(
        &self,
        z: &Spectrogram,
        e: &Spectrogram,
        t: f64,
        r: f64,
    ) -> Result<Spectrogram> {
        self.net.mean_velocity(self.params, z, e, t, r)
    }
}

/// The state update: y + (1 - tau) u. With tau = 0 the scale factor is
/// exactly 1, so an oracle velocity S - Y on a shared value lattice
/// recovers S bit-exactly.
pub fn one_step_update(y: &Spectrogram, u: &Spectrogram, tau: f64) -> Result<Spectrogram> {
    if !y.same_shape(u) {
        return Err(Error::validation("velocity shape differs from state"));
    }
    if tau == 0.0 {
        return Spectrogram::from_data(y.data() + u.data());
    }
    Spectrogram::from_data(y.data() + &(u.data() * (1.0 - tau)))
}

/// Core one-step jump from start coordinate `tau`: exactly one velocity
/// evaluation, counted.
pub fn one_step_jump(
    source: &impl VelocitySource,
    y: &Spectrogram,
    e: &Spectrogram,
    tau: f64,
    counter: &mut NfeCounter,
) -> Result<Spectrogram> {
    if !(0.0..=1.0).contains(&tau) {
        return Err(Error::validation(format!("tau {tau} outside [0, 1]")));
    }
    let u = source.mean_velocity(y, e, tau, 1.0)?;
    counter.velocity_evals += 1;
    one_step_update(y, &u, tau)
}

/// Single update from the mixture start point (t, r) = (0, 1).
pub fn extract_one_step(
    net: &MeanVelocityNet,
    params: &ParamStore,
    y: &Spectrogram,
    e: &Spectrogram,
    counter: &mut NfeCounter,
) -> Result<Spectrogram> {
    one_step_jump(&NetVelocity { net, params }, y, e, 0.0, counter)
}

/// Single jump starting from the estimated mixing ratio: one regressor
/// pass plus one velocity evaluation. Returns the estimate used.
#[allow(clippy::too_many_arguments)]
pub fn extract_one_step_mr(
    net: &MeanVelocityNet,
    params: &ParamStore,
    mr_net: &MixRatioNet,
    mr_params: &ParamStore,
    y_wave: &Waveform,
    e_wave: &Waveform,
    y: &Spectrogram,
    e: &Spectrogram,
    counter: &mut NfeCounter,
) -> Result<(Spectrogram, f64)> {
    let tau = mr_net.predict(mr_params, y_wave, e_wave)?;
    counter.mr_evals += 1;
    let out = one_step_jump(&NetVelocity { net, params }, y, e, tau, counter)?;
    Ok((out, tau))
}

/// Pipeline over an arbitrary velocity source: STFT, optional chunking,
/// one jump per chunk under the same enrollment and start coordinate,
/// concatenation, inverse STFT trimmed to the input length.
pub fn extract_utterance_with(
    source: &impl VelocitySource,
    y: &Waveform,
    e: &Waveform,
    cfg: &InferenceConfig,
    tau: f64,
    counter: &mut NfeCounter,
) -> Result<Waveform> {
    let y_spec = stft(y, &cfg.stft)?;
    let e_spec = stft(e, &cfg.stft)?;
    let pieces = if cfg.chunk_frames > 0 && y_spec.frames() > cfg.chunk_frames {
        chunk(&y_spec, cfg.chunk_frames)?
    } else {
        vec![y_spec]
    };
    let mut outputs = Vec::with_capacity(pieces.len());
    for piece in &pieces {
        outputs.push(one_step_jump(source, piece, &e_spec, tau, counter)?);
    }
    let combined = concat_time(&outputs)?;
    istft_with_rate(&combined, &cfg.stft, y.len(), y.sample_rate())
}

/// Full extraction with start-coordinate resolution: a forced value wins,
/// otherwise the regressor when `use_mr` is set, otherwise the mixture
/// start (tau = 0).
#[allow(clippy::too_many_arguments)]
pub fn extract_utterance(
    net: &MeanVelocityNet,
    params: &ParamStore,
    y: &Waveform,
    e: &Waveform,
    cfg: &InferenceConfig,
    mr: Option<(&MixRatioNet, &ParamStore)>,
    forced_tau: Option<f64>,
    counter: &mut NfeCounter,
) -> Result<Waveform> {
    let tau = match (forced_tau, cfg.use_mr) {
        (Some(t), _) => {
            if !(0.0..=1.0).contains(&t) {
                return Err(Error::validation(format!("forced tau {t} outside [0,1]")));
            }
            t
        }
        (None, true) => {
            let (mr_net, mr_params) = mr.ok_or_else(|| {
                Error::validation("use_mr set but no mixing-ratio model provided")
            })?;
            let t = mr_net.predict(mr_params, y, e)?;
            counter.mr_evals += 1;
            t
        }
        (None, false) => 0.0,
    };
    extract_utterance_with(&NetVelocity { net, params }, y, e, cfg, tau, counter)
}
