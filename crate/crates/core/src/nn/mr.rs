//! Mixing-ratio regressor: estimates the coordinate of the mixture on the
//! background-to-target path from the mixture and enrollment waveforms.
//!
//! A small strided-convolution encoder (expressed as unfold + linear) runs
//! over both spectrograms, statistics pooling collapses time, and a
//! two-layer head squashed through a logistic gives the estimate in (0,1).

use ndarray::Array2;
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;

use crate::audio::Waveform;
use crate::autodiff::{NodeId, Tape};
use crate::spectral::{stft, Spectrogram, StftConfig};
use crate::{Error, Result};

use super::{xavier_init, BoundParams, ParamStore};

/// Shape and preprocessing of the mixing-ratio regressor.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct MrConfig {
    /// Input channel count, 2F of the active STFT config.
    pub channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub hidden: usize,
    pub stft: StftConfig,
    /// Random time/frequency masking during training (off = 0.0).
    pub mask_prob: f64,
    pub mask_time_frac: f64,
    pub mask_freq_frac: f64,
}

impl MrConfig {
    pub fn desk() -> Self {
        let stft = StftConfig::desk();
        Self {
            channels: stft.channels(),
            kernel: 5,
            stride: 2,
            hidden: 32,
            stft,
            mask_prob: 0.3,
            mask_time_frac: 0.2,
            mask_freq_frac: 0.2,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.channels == 0 || self.kernel == 0 || self.stride == 0 || self.hidden == 0 {
            return Err(Error::Config("mr dimensions must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.mask_prob) {
            return Err(Error::Config("mask_prob outside [0,1]".into()));
        }
        self.stft.validate()
    }
}

/// The regressor p(y, e) -> tau-hat.
#[derive(Debug, Clone)]
pub struct MixRatioNet {
    cfg: MrConfig,
}

impl MixRatioNet {
    pub fn new(cfg: MrConfig) -> Result<Self> {
        cfg.validate()?;
        Ok(Self { cfg })
    }

    pub fn config(&self) -> &MrConfig {
        &self.cfg
    }

    /// Fresh parameters; the head output layer starts at zero so the
    /// untrained estimate is exactly 0.5.
    pub fn init_params(&self, seed: u64) -> ParamStore {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let c = self.cfg.channels;
        let h = self.cfg.hidden;
        let k = self.cfg.kernel;
        let mut p = ParamStore::new();
        p.insert("mr.enc.l1.w", xavier_init(&mut rng, k * c, h));
        p.insert("mr.enc.l1.b", Array2::zeros((1, h)));
        p.insert("mr.enc.l2.w", xavier_init(&mut rng, k * h, h));
        p.insert("mr.enc.l2.b", Array2::zeros((1, h)));
        p.insert("mr.head.w1", xavier_init(&mut rng, 4 * h, h));
        p.insert("mr.head.b1", Array2::zeros((1, h)));
        p.insert("mr.head.w2", Array2::zeros((h, 1)));
        p.insert("mr.head.b2", Array2::zeros((1, 1)));
        p
    }

    /// Checks a loaded parameter store against this config's expected
    /// tensor names and shapes.
    pub fn validate_params(&self, params: &ParamStore) -> Result<()> {
        let expected = self.init_params(0);
        if expected.len() != params.len() {
            return Err(Error::Checkpoint(format!(
                "parameter count {} does not match config ({} expected)",
                params.len(),
                expected.len()
            )));
        }
        for (name, value) in expected.iter() {
            match params.get(name) {
                Some(v) if v.dim() == value.dim() => {}
                Some(v) => {
                    return Err(Error::Checkpoint(format!(
                        "tensor {name} has shape {:?}, config expects {:?}",
                        v.dim(),
                        value.dim()
                    )))
                }
                None => return Err(Error::Checkpoint(format!("missing tensor {name}"))),
            }
        }
        Ok(())
    }

    /// Pads token sequences shorter than the receptive field by repeating
    /// the last frame, so tiny clips still produce one encoder output.
    fn min_frames(&self) -> usize {
        // Two stacked strided unfolds.
        let k = self.cfg.kernel;
        let s = self.cfg.stride;
        (k - 1) * s + k
    }

    fn encode(&self, tape: &mut Tape, params: &BoundParams, tokens: NodeId) -> NodeId {
        let u1 = tape.unfold_rows(tokens, self.cfg.kernel, self.cfg.stride);
        let h1 = tape.matmul(u1, params.id("mr.enc.l1.w"));
        let h1 = tape.add_row(h1, params.id("mr.enc.l1.b"));
        let h1 = tape.silu(h1);
        let u2 = tape.unfold_rows(h1, self.cfg.kernel, self.cfg.stride);
        let h2 = tape.matmul(u2, params.id("mr.enc.l2.w"));
        let h2 = tape.add_row(h2, params.id("mr.enc.l2.b"));
        let h2 = tape.silu(h2);
        // Statistics pooling: first and second moments over time.
        let mean = tape.mean_rows(h2);
        let sq = tape.mul(h2, h2);
        let mean_sq = tape.mean_rows(sq);
        tape.concat_cols(&[mean, mean_sq])
    }

    /// Records the estimate on the tape; returns the (1,1) node after the
    /// logistic, strictly inside (0, 1).
    pub fn forward_on_tape(
        &self,
        tape: &mut Tape,
        params: &BoundParams,
        y_tokens: NodeId,
        e_tokens: NodeId,
    ) -> NodeId {
        let ey = self.encode(tape, params, y_tokens);
        let ee = self.encode(tape, params, e_tokens);
        let cat = tape.concat_cols(&[ey, ee]);
        let h = tape.matmul(cat, params.id("mr.head.w1"));
        let h = tape.add_row(h, params.id("mr.head.b1"));
        let h = tape.silu(h);
        let h = tape.matmul(h, params.id("mr.head.w2"));
        let pre = tape.add(h, params.id("mr.head.b2"));
        tape.sigmoid(pre)
    }

    /// Tokens (frames x channels) for a waveform, padded up to the
    /// encoder's receptive field.
    pub fn tokens_for(&self, w: &Waveform) -> Result<Array2<f64>> {
        if w.is_empty() {
            return Err(Error::validation("empty waveform for mr prediction"));
        }
        if w.len() < self.cfg.stft.n_fft {
            return Err(Error::TooShort(format!(
                "waveform of {} samples shorter than one frame",
                w.len()
            )));
        }
        let spec = stft(w, &self.cfg.stft)?;
        Ok(self.tokens_for_spec(&spec))
    }

    /// Token layout for an existing spectrogram (already 2F channels).
    pub fn tokens_for_spec(&self, spec: &Spectrogram) -> Array2<f64> {
        let mut tokens = spec.data().t().to_owned();
        let need = self.min_frames();
        if tokens.nrows() < need {
            let mut padded = Array2::zeros((need, tokens.ncols()));
            for i in 0..need {
                let src = i.min(tokens.nrows() - 1);
                padded.row_mut(i).assign(&tokens.row(src));
            }
            tokens = padded;
        }
        tokens
    }

    /// Random time/frequency masking for training robustness.
    pub fn apply_mask(&self, tokens: &mut Array2<f64>, rng: &mut impl Rng) {
        if rng.gen::<f64>() < self.cfg.mask_prob {
            let t = tokens.nrows();
            let span = ((t as f64 * self.cfg.mask_time_frac) as usize).max(1).min(t);
            let start = rng.gen_range(0..=t - span);
            tokens
                .slice_mut(ndarray::s![start..start + span, ..])
                .fill(0.0);
        }
        if rng.gen::<f64>() < self.cfg.mask_prob {
            let c = tokens.ncols();
            let span = ((c as f64 * self.cfg.mask_freq_frac) as usize).max(1).min(c);
            let start = rng.gen_range(0..=c - span);
            tokens
                .slice_mut(ndarray::s![.., start..start + span])
                .fill(0.0);
        }
    }

    /// No-gradient estimate of the mixing ratio from waveforms.
    ///
    /// The logistic keeps the estimate in (0, 1) mathematically; a final
    /// clamp keeps it there in floating point even when the head saturates.
    pub fn predict(&self, params: &ParamStore, y: &Waveform, e: &Waveform) -> Result<f64> {
        let y_tokens = self.tokens_for(y)?;
        let e_tokens = self.tokens_for(e)?;
        let mut tape = Tape::new();
        let bound = params.bind(&mut tape, false);
        let y_id = tape.constant(y_tokens);
        let e_id = tape.constant(e_tokens);
        let out = self.forward_on_tape(&mut tape, &bound, y_id, e_id);
        Ok(tape.scalar(out).clamp(1e-9, 1.0 - 1e-9))
    }
}
