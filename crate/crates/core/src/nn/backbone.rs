//! The mean-velocity network: a small transformer over STFT-frame tokens
//! with an enrollment prefix, U-shaped long skips, and interval
//! conditioning through adaptive layer normalization.
//!
//! The forward contract: input state tokens (T, 2F) prefixed by enrollment
//! tokens (T_e, 2F); output tokens for the state segment only,
//! interpreted as the predicted mean velocity over (t, r). The output
//! projection starts at zero, so the untrained one-step update is the
//! identity mapping.

use ndarray::Array2;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{NodeId, Tape};
use crate::spectral::Spectrogram;
use crate::{Error, Result};

use super::{sinusoidal_embedding, xavier_init, BoundParams, ParamStore};

/// Shape of the reference backbone.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct PredictorConfig {
    /// Input/output channel count, 2F of the active STFT config.
    pub channels: usize,
    pub n_blocks: usize,
    pub n_heads: usize,
    pub width: usize,
    pub time_embed_dim: usize,
    /// MLP hidden width as a multiple of `width`.
    pub mlp_ratio: usize,
    /// Enrollment prefixes longer than this are truncated from the front.
    pub max_prefix_frames: usize,
}

impl Default for PredictorConfig {
    fn default() -> Self {
        Self {
            channels: 64,
            n_blocks: 4,
            n_heads: 4,
            width: 128,
            time_embed_dim: 64,
            mlp_ratio: 4,
            max_prefix_frames: 256,
        }
    }
}

impl PredictorConfig {
    pub fn validate(&self) -> Result<()> {
        if self.channels == 0
            || self.n_blocks == 0
            || self.n_heads == 0
            || self.width == 0
            || self.time_embed_dim == 0
            || self.mlp_ratio == 0
            || self.max_prefix_frames == 0
        {
            return Err(Error::Config("predictor dimensions must be positive".into()));
        }
        if self.width % self.n_heads != 0 {
            return Err(Error::Config(format!(
                "width {} not divisible by n_heads {}",
                self.width, self.n_heads
            )));
        }
        if self.time_embed_dim % 2 != 0 || self.width % 2 != 0 {
            return Err(Error::Config(
                "time_embed_dim and width must be even".into(),
            ));
        }
        Ok(())
    }
}

/// The mean-velocity predictor u(z, t, r; E).
#[derive(Debug, Clone)]
pub struct MeanVelocityNet {
    cfg: PredictorConfig,
}

const LN_EPS: f64 = 1e-6;

impl MeanVelocityNet {
    pub fn new(cfg: PredictorConfig) -> Result<Self> {
        cfg.validate()?;
        Ok(Self { cfg })
    }

    pub fn config(&self) -> &PredictorConfig {
        &self.cfg
    }

    /// Fresh parameters. Attention/MLP weights are Xavier-uniform; the
    /// modulation layers and the output projection start at zero.
    pub fn init_params(&self, seed: u64) -> ParamStore {
        let cfg = &self.cfg;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut p = ParamStore::new();
        let w = cfg.width;
        let c = cfg.channels;
        let hidden = cfg.mlp_ratio * w;

        p.insert("u.in_proj.w", xavier_init(&mut rng, c, w));
        p.insert("u.in_proj.b", Array2::zeros((1, w)));
        p.insert("u.in_proj2.w", xavier_init(&mut rng, w, w));
        p.insert("u.in_proj2.b", Array2::zeros((1, w)));
        p.insert("u.seg.prefix", xavier_init(&mut rng, 1, w) * 0.1);
        p.insert("u.seg.payload", xavier_init(&mut rng, 1, w) * 0.1);
        p.insert("u.cond.w1", xavier_init(&mut rng, cfg.time_embed_dim, w));
        p.insert("u.cond.b1", Array2::zeros((1, w)));
        p.insert("u.cond.w2", xavier_init(&mut rng, w, w));
        p.insert("u.cond.b2", Array2::zeros((1, w)));

        for i in 0..cfg.n_blocks {
            for name in ["wq", "wk", "wv", "wo"] {
                p.insert(format!("u.blk{i}.attn.{name}"), xavier_init(&mut rng, w, w));
            }
            for name in ["bq", "bk", "bv", "bo"] {
                p.insert(format!("u.blk{i}.attn.{name}"), Array2::zeros((1, w)));
            }
            p.insert(format!("u.blk{i}.mlp.w1"), xavier_init(&mut rng, w, hidden));
            p.insert(format!("u.blk{i}.mlp.b1"), Array2::zeros((1, hidden)));
            p.insert(format!("u.blk{i}.mlp.w2"), xavier_init(&mut rng, hidden, w));
            p.insert(format!("u.blk{i}.mlp.b2"), Array2::zeros((1, w)));
            // Zero modulation: blocks start as identity (gates closed).
            p.insert(format!("u.blk{i}.mod.w"), Array2::zeros((w, 6 * w)));
            p.insert(format!("u.blk{i}.mod.b"), Array2::zeros((1, 6 * w)));
            if Self::skip_source(cfg.n_blocks, i).is_some() {
                p.insert(format!("u.blk{i}.fuse.w"), xavier_init(&mut rng, 2 * w, w));
                p.insert(format!("u.blk{i}.fuse.b"), Array2::zeros((1, w)));
            }
        }
        p.insert("u.final.mod.w", Array2::zeros((w, 2 * w)));
        p.insert("u.final.mod.b", Array2::zeros((1, 2 * w)));
        p.insert("u.out_proj.w", Array2::zeros((w, c)));
        p.insert("u.out_proj.b", Array2::zeros((1, c)));
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

    /// For block `i`, the earlier block whose output feeds its long skip.
    /// The first floor(n/2) blocks are sources, mirrored onto the last
    /// floor(n/2) blocks.
    fn skip_source(n_blocks: usize, i: usize) -> Option<usize> {
        let half = n_blocks / 2;
        if i + half >= n_blocks && n_blocks >= 2 {
            Some(n_blocks - 1 - i)
        } else {
            None
        }
    }

    /// Truncates an enrollment to the prefix cap, keeping the most recent
    /// frames. Returns token-layout (T_e, 2F) data.
    fn prefix_tokens(&self, e: &Spectrogram) -> Array2<f64> {
        let t_e = e.frames();
        let keep = t_e.min(self.cfg.max_prefix_frames);
        if keep < t_e {
            log::warn!(
                "enrollment prefix of {t_e} frames exceeds cap {}; keeping last {keep}",
                self.cfg.max_prefix_frames
            );
        }
        e.data()
            .slice(ndarray::s![.., t_e - keep..])
            .t()
            .to_owned()
    }

    fn validate_inputs(&self, z: &Spectrogram, e: &Spectrogram, t: f64, r: f64) -> Result<()> {
        if z.channels() != self.cfg.channels || e.channels() != self.cfg.channels {
            return Err(Error::validation(format!(
                "channel mismatch: state {} / enrollment {} vs config {}",
                z.channels(),
                e.channels(),
                self.cfg.channels
            )));
        }
        if z.frames() == 0 || e.frames() == 0 {
            return Err(Error::validation("empty state or enrollment"));
        }
        if !(t.is_finite() && r.is_finite()) {
            return Err(Error::NonFinite("interval endpoint".into()));
        }
        if !(0.0..=1.0).contains(&t) || !(0.0..=1.0).contains(&r) || t > r {
            return Err(Error::validation(format!(
                "need 0 <= t <= r <= 1, got t={t}, r={r}"
            )));
        }
        Ok(())
    }

    /// Records the forward pass on `tape`; returns the output node in
    /// token layout (T, 2F), prefix positions already dropped.
    ///
    /// `z_tokens` must be (T, 2F) and `e_tokens` (T_e, 2F), both already
    /// inserted on the tape (constants for data, leaves for anything
    /// that should receive gradient).
    pub fn forward_on_tape(
        &self,
        tape: &mut Tape,
        params: &BoundParams,
        z_tokens: NodeId,
        e_tokens: NodeId,
        t: f64,
        r: f64,
    ) -> NodeId {
        let cfg = &self.cfg;
        let t_e = tape.value(e_tokens).nrows();
        let t_z = tape.value(z_tokens).nrows();
        let total = t_e + t_z;
        let head_dim = cfg.width / cfg.n_heads;

        // Conditioning vector from emb(t) + emb(delta).
        let emb = sinusoidal_embedding(t, cfg.time_embed_dim)
            + sinusoidal_embedding(r - t, cfg.time_embed_dim);
        let emb = tape.constant(emb);
        let c1 = tape.matmul(emb, params.id("u.cond.w1"));
        let c1 = tape.add(c1, params.id("u.cond.b1"));
        let c1 = tape.silu(c1);
        let c2 = tape.matmul(c1, params.id("u.cond.w2"));
        let cond = tape.add(c2, params.id("u.cond.b2"));
        let cond_act = tape.silu(cond);

        // Token stem: two-layer embedding so content features form before
        // attention, plus low-amplitude sinusoidal positions and trainable
        // segment tags distinguishing prefix from state tokens.
        let seq = tape.concat_rows(&[e_tokens, z_tokens]);
        let mut x = tape.matmul(seq, params.id("u.in_proj.w"));
        x = tape.add_row(x, params.id("u.in_proj.b"));
        x = tape.silu(x);
        x = tape.matmul(x, params.id("u.in_proj2.w"));
        x = tape.add_row(x, params.id("u.in_proj2.b"));
        let mut pos = Array2::zeros((total, cfg.width));
        for i in 0..total {
            let p = sinusoidal_embedding(i as f64 / total as f64, cfg.width);
            pos.row_mut(i).assign(&p.row(0));
        }
        // Positions stay quiet relative to content so attention can match
        // spectra across the prefix boundary.
        let pos_id = tape.constant(pos * 0.1);
        x = tape.add(x, pos_id);
        let prefix_part = tape.slice_rows(x, 0, t_e);
        let payload_part = tape.slice_rows(x, t_e, t_z);
        let prefix_part = tape.add_row(prefix_part, params.id("u.seg.prefix"));
        let payload_part = tape.add_row(payload_part, params.id("u.seg.payload"));
        x = tape.concat_rows(&[prefix_part, payload_part]);

        let ones_w = tape.constant(Array2::ones((1, cfg.width)));
        let mut skips: Vec<NodeId> = Vec::new();
        for i in 0..cfg.n_blocks {
            if let Some(src) = Self::skip_source(cfg.n_blocks, i) {
                let skip = skips[src];
                let cat = tape.concat_cols(&[x, skip]);
                let fused = tape.matmul(cat, params.id(&format!("u.blk{i}.fuse.w")));
                x = tape.add_row(fused, params.id(&format!("u.blk{i}.fuse.b")));
            }

            // Per-block modulation from the conditioning vector.
            let m = tape.matmul(cond_act, params.id(&format!("u.blk{i}.mod.w")));
            let m = tape.add(m, params.id(&format!("u.blk{i}.mod.b")));
            let w = cfg.width;
            let shift1 = tape.slice_cols(m, 0, w);
            let scale1 = tape.slice_cols(m, w, w);
            let gate1 = tape.slice_cols(m, 2 * w, w);
            let shift2 = tape.slice_cols(m, 3 * w, w);
            let scale2 = tape.slice_cols(m, 4 * w, w);
            let gate2 = tape.slice_cols(m, 5 * w, w);

            // Attention branch.
            let normed = tape.layer_norm_rows(x, LN_EPS);
            let sc1 = tape.add(ones_w, scale1);
            let h = tape.mul_row(normed, sc1);
            let h = tape.add_row(h, shift1);

            let q = tape.matmul(h, params.id(&format!("u.blk{i}.attn.wq")));
            let q = tape.add_row(q, params.id(&format!("u.blk{i}.attn.bq")));
            let k = tape.matmul(h, params.id(&format!("u.blk{i}.attn.wk")));
            let k = tape.add_row(k, params.id(&format!("u.blk{i}.attn.bk")));
            let v = tape.matmul(h, params.id(&format!("u.blk{i}.attn.wv")));
            let v = tape.add_row(v, params.id(&format!("u.blk{i}.attn.bv")));

            let mut head_outs = Vec::with_capacity(cfg.n_heads);
            for hh in 0..cfg.n_heads {
                let qh = tape.slice_cols(q, hh * head_dim, head_dim);
                let kh = tape.slice_cols(k, hh * head_dim, head_dim);
                let vh = tape.slice_cols(v, hh * head_dim, head_dim);
                let kt = tape.transpose(kh);
                let scores = tape.matmul(qh, kt);
                let scores = tape.scale(scores, 1.0 / (head_dim as f64).sqrt());
                let attn = tape.softmax_rows(scores);
                head_outs.push(tape.matmul(attn, vh));
            }
            let merged = tape.concat_cols(&head_outs);
            let o = tape.matmul(merged, params.id(&format!("u.blk{i}.attn.wo")));
            let o = tape.add_row(o, params.id(&format!("u.blk{i}.attn.bo")));
            let gated = tape.mul_row(o, gate1);
            x = tape.add(x, gated);

            // MLP branch.
            let normed = tape.layer_norm_rows(x, LN_EPS);
            let sc2 = tape.add(ones_w, scale2);
            let h = tape.mul_row(normed, sc2);
            let h = tape.add_row(h, shift2);
            let h = tape.matmul(h, params.id(&format!("u.blk{i}.mlp.w1")));
            let h = tape.add_row(h, params.id(&format!("u.blk{i}.mlp.b1")));
            let h = tape.silu(h);
            let h = tape.matmul(h, params.id(&format!("u.blk{i}.mlp.w2")));
            let h = tape.add_row(h, params.id(&format!("u.blk{i}.mlp.b2")));
            let gated = tape.mul_row(h, gate2);
            x = tape.add(x, gated);

            skips.push(x);
        }

        // Final adaptive norm and the zero-initialized projection.
        let fm = tape.matmul(cond_act, params.id("u.final.mod.w"));
        let fm = tape.add(fm, params.id("u.final.mod.b"));
        let fshift = tape.slice_cols(fm, 0, cfg.width);
        let fscale = tape.slice_cols(fm, cfg.width, cfg.width);
        let normed = tape.layer_norm_rows(x, LN_EPS);
        let fsc = tape.add(ones_w, fscale);
        let h = tape.mul_row(normed, fsc);
        let h = tape.add_row(h, fshift);
        let out = tape.matmul(h, params.id("u.out_proj.w"));
        let out = tape.add_row(out, params.id("u.out_proj.b"));

        // Only the state segment's tokens are the prediction.
        tape.slice_rows(out, t_e, t_z)
    }

    /// Plain (no-gradient) evaluation of the mean velocity.
    pub fn mean_velocity(
        &self,
        params: &ParamStore,
        z: &Spectrogram,
        e: &Spectrogram,
        t: f64,
        r: f64,
    ) -> Result<Spectrogram> {
        self.validate_inputs(z, e, t, r)?;
        let mut tape = Tape::new();
        let bound = params.bind(&mut tape, false);
        let z_tokens = tape.constant(z.data().t().to_owned());
        let e_tokens = tape.constant(self.prefix_tokens(e));
        let out = self.forward_on_tape(&mut tape, &bound, z_tokens, e_tokens, t, r);
        Spectrogram::from_data(tape.value(out).t().to_owned())
    }

    /// Stop-gradient evaluation: numerically identical to
    /// [`Self::mean_velocity`] and structurally outside any gradient path.
    pub fn stop_gradient_eval(
        &self,
        params: &ParamStore,
        z: &Spectrogram,
        e: &Spectrogram,
        t: f64,
        r: f64,
    ) -> Result<Spectrogram> {
        self.mean_velocity(params, z, e, t, r)
    }

    /// Records the forward pass for training: `z`/`e` enter as constants,
    /// parameters must already be bound on the tape.
    pub fn forward_spec(
        &self,
        tape: &mut Tape,
        params: &BoundParams,
        z: &Spectrogram,
        e: &Spectrogram,
        t: f64,
        r: f64,
    ) -> Result<NodeId> {
        self.validate_inputs(z, e, t, r)?;
        let z_tokens = tape.constant(z.data().t().to_owned());
        let e_tokens = tape.constant(self.prefix_tokens(e));
        Ok(self.forward_on_tape(tape, params, z_tokens, e_tokens, t, r))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::gradient;
    use ndarray::Array2;
    use rand::prelude::*;
    use rand_chacha::ChaCha8Rng;

    fn tiny_cfg() -> PredictorConfig {
        PredictorConfig {
            channels: 8,
            n_blocks: 2,
            n_heads: 2,
            width: 12,
            time_embed_dim: 8,
            mlp_ratio: 2,
            max_prefix_frames: 16,
        }
    }

    fn spec_random(rng: &mut impl Rng, channels: usize, frames: usize) -> Spectrogram {
        Spectrogram::from_data(Array2::from_shape_fn((channels, frames), |_| {
            rng.gen_range(-1.0..1.0)
        }))
        .unwrap()
    }

    #[test]
    fn output_shape_matches_state_not_prefix() {
        let net = MeanVelocityNet::new(tiny_cfg()).unwrap();
        let params = net.init_params(1);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for (t_frames, e_frames) in [(5usize, 3usize), (9, 1), (2, 7), (1, 1)] {
            let z = spec_random(&mut rng, 8, t_frames);
            let e = spec_random(&mut rng, 8, e_frames);
            let u = net.mean_velocity(&params, &z, &e, 0.2, 0.8).unwrap();
            assert_eq!(u.channels(), 8);
            assert_eq!(u.frames(), t_frames);
        }
    }

    #[test]
    fn zero_init_output_is_identically_zero() {
        let net = MeanVelocityNet::new(tiny_cfg()).unwrap();
        let params = net.init_params(7);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let z = spec_random(&mut rng, 8, 6);
        let e = spec_random(&mut rng, 8, 4);
        let u = net.mean_velocity(&params, &z, &e, 0.0, 1.0).unwrap();
        assert!(u.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn forward_is_deterministic() {
        let net = MeanVelocityNet::new(tiny_cfg()).unwrap();
        let mut params = net.init_params(4);
        // Break the zero output so the check is non-trivial.
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        *params.get_mut("u.out_proj.w").unwrap() = xavier_init(&mut rng, 12, 8);
        let z = spec_random(&mut rng, 8, 6);
        let e = spec_random(&mut rng, 8, 4);
        let a = net.mean_velocity(&params, &z, &e, 0.3, 0.9).unwrap();
        let b = net.mean_velocity(&params, &z, &e, 0.3, 0.9).unwrap();
        assert_eq!(a, b);
        assert!(a.data().iter().any(|&v| v != 0.0));
    }

    #[test]
    fn long_prefix_is_truncated() {
        let net = MeanVelocityNet::new(tiny_cfg()).unwrap();
        let params = net.init_params(4);
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let z = spec_random(&mut rng, 8, 4);
        let e = spec_random(&mut rng, 8, 40); // cap is 16
        let u = net.mean_velocity(&params, &z, &e, 0.0, 1.0).unwrap();
        assert_eq!(u.frames(), 4);
    }

    #[test]
    fn stop_gradient_eval_matches_mean_velocity() {
        let net = MeanVelocityNet::new(tiny_cfg()).unwrap();
        let mut params = net.init_params(8);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        *params.get_mut("u.out_proj.w").unwrap() = xavier_init(&mut rng, 12, 8);
        let z = spec_random(&mut rng, 8, 5);
        let e = spec_random(&mut rng, 8, 3);
        let a = net.mean_velocity(&params, &z, &e, 0.1, 0.7).unwrap();
        let b = net.stop_gradient_eval(&params, &z, &e, 0.1, 0.7).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn interval_validation_errors() {
        let net = MeanVelocityNet::new(tiny_cfg()).unwrap();
        let params = net.init_params(1);
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let z = spec_random(&mut rng, 8, 4);
        let e = spec_random(&mut rng, 8, 2);
        assert!(net.mean_velocity(&params, &z, &e, 0.9, 0.2).is_err());
        assert!(net.mean_velocity(&params, &z, &e, -0.1, 0.5).is_err());
        let bad = spec_random(&mut rng, 6, 4);
        assert!(net.mean_velocity(&params, &bad, &e, 0.0, 1.0).is_err());
    }

    /// Finite-difference probe of the full network on a handful of
    /// randomly chosen coordinates.
    #[test]
    fn network_gradient_matches_finite_differences() {
        let net = MeanVelocityNet::new(tiny_cfg()).unwrap();
        let mut params = net.init_params(11);
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        // Nonzero output projection and modulation so every path is live.
        *params.get_mut("u.out_proj.w").unwrap() = xavier_init(&mut rng, 12, 8) * 0.3;
        for i in 0..2 {
            *params.get_mut(&format!("u.blk{i}.mod.w")).unwrap() =
                xavier_init(&mut rng, 12, 72) * 0.3;
        }
        let z = spec_random(&mut rng, 8, 4);
        let e = spec_random(&mut rng, 8, 3);
        let target = spec_random(&mut rng, 8, 4);

        let loss_of = |p: &ParamStore| -> f64 {
            let mut tape = Tape::new();
            let bound = p.bind(&mut tape, false);
            let out = net.forward_spec(&mut tape, &bound, &z, &e, 0.2, 0.9).unwrap();
            let tgt = tape.constant(target.data().t().to_owned());
            let d = tape.sub(out, tgt);
            let l = tape.mean_sq(d);
            tape.scalar(l)
        };

        let (_, grads) = gradient(&params, |tape, bound| {
            let out = net.forward_spec(tape, bound, &z, &e, 0.2, 0.9)?;
            let tgt = tape.constant(target.data().t().to_owned());
            let d = tape.sub(out, tgt);
            Ok(tape.mean_sq(d))
        })
        .unwrap();

        let names: Vec<String> = params.names().map(str::to_string).collect();
        let h = 1e-5;
        let mut checked = 0;
        let mut coord_rng = ChaCha8Rng::seed_from_u64(13);
        while checked < 10 {
            let name = &names[coord_rng.gen_range(0..names.len())];
            let shape = params.get(name).unwrap().dim();
            let idx = (
                coord_rng.gen_range(0..shape.0),
                coord_rng.gen_range(0..shape.1),
            );
            let mut plus = params.clone();
            plus.get_mut(name).unwrap()[[idx.0, idx.1]] += h;
            let mut minus = params.clone();
            minus.get_mut(name).unwrap()[[idx.0, idx.1]] -= h;
            let fd = (loss_of(&plus) - loss_of(&minus)) / (2.0 * h);
            let an = grads.get(name).unwrap()[[idx.0, idx.1]];
            let denom = fd.abs().max(an.abs());
            if denom < 1e-10 {
                continue; // dead coordinate; pick another
            }
            assert!(
                (fd - an).abs() / denom < 1e-4,
                "{name}[{idx:?}]: fd={fd} analytic={an}"
            );
            checked += 1;
        }
    }
}
