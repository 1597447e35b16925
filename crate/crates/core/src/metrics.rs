//! Evaluation: SI-SDR, spectral error, a spectral-envelope speaker
//! similarity proxy, report aggregation, and the mixing-ratio
//! sensitivity sweep.

use std::io::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::audio::Waveform;
use crate::infer::{extract_utterance_with, InferenceConfig, NetVelocity, NfeCounter};
use crate::nn::{MeanVelocityNet, MixRatioNet, ParamStore};
use crate::spectral::{stft, Spectrogram, StftConfig};
use crate::synth::MixtureExample;
use crate::trajectory::PathKind;
use crate::{Error, Result};

/// SI-SDR ceiling reported when the residual vanishes (perfect match up
/// to scale).
pub const SI_SDR_CEILING_DB: f64 = 100.0;

/// Scale-invariant signal-to-distortion ratio in dB.
///
/// The estimate is projected onto the reference; the ratio of projected
/// energy to residual energy is reported, so positive rescaling of the
/// estimate never changes the value.
pub fn si_sdr(est: &Waveform, reference: &Waveform) -> Result<f64> {
    if est.len() != reference.len() {
        return Err(Error::validation(format!(
            "length mismatch: est {} vs ref {}",
            est.len(),
            reference.len()
        )));
    }
    let ref_energy: f64 = reference.samples().iter().map(|v| v * v).sum();
    if ref_energy == 0.0 {
        return Err(Error::validation("all-zero reference"));
    }
    let dot: f64 = est
        .samples()
        .iter()
        .zip(reference.samples())
        .map(|(a, b)| a * b)
        .sum();
    let scale = dot / ref_energy;
    let mut target_energy = 0.0;
    let mut residual_energy = 0.0;
    for (a, b) in est.samples().iter().zip(reference.samples()) {
        let t = scale * b;
        target_energy += t * t;
        residual_energy += (a - t) * (a - t);
    }
    if residual_energy <= target_energy * 1e-20 {
        return Ok(SI_SDR_CEILING_DB);
    }
    Ok((10.0 * (target_energy / residual_energy).log10()).min(SI_SDR_CEILING_DB))
}

/// Per-sample MSE between two spectrograms.
pub fn spectral_mse(est: &Spectrogram, reference: &Spectrogram) -> Result<f64> {
    if !est.same_shape(reference) {
        return Err(Error::validation("spectrogram shape mismatch"));
    }
    let d = Spectrogram::from_data(est.data() - reference.data())?;
    Ok(crate::objective::per_sample_mse(&d))
}

/// Speaker-cue embedder: long-term average log-magnitude spectrum pooled
/// into a fixed bin count and L2-normalized. On the synthetic corpus the
/// spectral envelope is the speaker identity by construction.
#[derive(Debug, Clone, Copy)]
pub struct SpkEmbedder {
    pub stft: StftConfig,
    pub bins: usize,
}

impl SpkEmbedder {
    pub fn new(stft: StftConfig) -> Self {
        Self { stft, bins: 64 }
    }

    /// Embedding vector, or None for (near-)silent input.
    pub fn embed(&self, w: &Waveform) -> Result<Option<Vec<f64>>> {
        if w.rms() < 1e-12 {
            return Ok(None);
        }
        let spec = stft(w, &self.stft)?;
        let f_bins = spec.freq_bins();
        let frames = spec.frames() as f64;
        // Time-averaged magnitude per frequency bin.
        let mut avg = vec![0.0f64; f_bins];
        for k in 0..f_bins {
            let mut acc = 0.0;
            for t in 0..spec.frames() {
                let re = spec.data()[[k, t]];
                let im = spec.data()[[f_bins + k, t]];
                acc += (re * re + im * im).sqrt();
            }
            avg[k] = (acc / frames + 1e-10).ln();
        }
        // Pool into the fixed-size envelope.
        let mut pooled = vec![0.0f64; self.bins];
        for (j, slot) in pooled.iter_mut().enumerate() {
            let lo = j * f_bins / self.bins;
            let hi = (((j + 1) * f_bins / self.bins).max(lo + 1)).min(f_bins);
            *slot = avg[lo..hi].iter().sum::<f64>() / (hi - lo) as f64;
        }
        // Center before normalizing so the silence floor shared by all
        // signals does not inflate similarity.
        let mean = pooled.iter().sum::<f64>() / pooled.len() as f64;
        for v in pooled.iter_mut() {
            *v -= mean;
        }
        let norm = pooled.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm == 0.0 {
            return Ok(None);
        }
        for v in pooled.iter_mut() {
            *v /= norm;
        }
        Ok(Some(pooled))
    }
}

/// Cosine similarity of speaker embeddings in [-1, 1]. Silent input is
/// reported as 0 with a warning.
pub fn spk_sim(est: &Waveform, anchor: &Waveform, embedder: &SpkEmbedder) -> Result<f64> {
    if est.is_empty() || anchor.is_empty() {
        return Err(Error::validation("empty input to spk_sim"));
    }
    let (a, b) = (embedder.embed(est)?, embedder.embed(anchor)?);
    match (a, b) {
        (Some(a), Some(b)) => Ok(a.iter().zip(&b).map(|(x, y)| x * y).sum()),
        _ => {
            log::warn!("spk_sim on silent input; reporting 0");
            Ok(0.0)
        }
    }
}

/// Per-example evaluation record.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalRow {
    pub id: u64,
    pub si_sdr: f64,
    /// SI-SDR of the raw mixture against the target.
    pub si_sdr_mixture: f64,
    pub si_sdr_improvement: f64,
    pub spectral_mse: f64,
    /// Anchored on the clean target.
    pub spk_sim_target: f64,
    /// Anchored on the enrollment.
    pub spk_sim_enroll: f64,
    pub tau_used: f64,
}

/// Aggregate means over finite per-example values.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct EvalAggregate {
    pub count: usize,
    pub si_sdr: f64,
    pub si_sdr_improvement: f64,
    pub spectral_mse: f64,
    pub spk_sim_target: f64,
    pub spk_sim_enroll: f64,
}

/// A labeled evaluation over one condition.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalReport {
    /// Condition tag, e.g. "mixture-to-target / tau=0".
    pub condition: String,
    pub rows: Vec<EvalRow>,
}

impl EvalReport {
    pub fn aggregate(&self) -> EvalAggregate {
        let finite: Vec<&EvalRow> = self
            .rows
            .iter()
            .filter(|r| {
                r.si_sdr.is_finite() && r.spectral_mse.is_finite() && r.spk_sim_target.is_finite()
            })
            .collect();
        let n = finite.len().max(1) as f64;
        let mean = |f: &dyn Fn(&EvalRow) -> f64| finite.iter().map(|r| f(r)).sum::<f64>() / n;
        EvalAggregate {
            count: finite.len(),
            si_sdr: mean(&|r| r.si_sdr),
            si_sdr_improvement: mean(&|r| r.si_sdr_improvement),
            spectral_mse: mean(&|r| r.spectral_mse),
            spk_sim_target: mean(&|r| r.spk_sim_target),
            spk_sim_enroll: mean(&|r| r.spk_sim_enroll),
        }
    }

    /// Human-readable one-condition summary line.
    pub fn summary_line(&self) -> String {
        let a = self.aggregate();
        format!(
            "{:<40} n={:<5} SI-SDR {:>7.2} dB  SI-SDRi {:>7.2} dB  SpecMSE {:>10.3e}  SpkSim(tgt) {:>6.3}  SpkSim(enr) {:>6.3}",
            self.condition, a.count, a.si_sdr, a.si_sdr_improvement, a.spectral_mse, a.spk_sim_target, a.spk_sim_enroll
        )
    }

    /// Tab-separated per-example dump.
    pub fn write_delimited(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        writeln!(
            f,
            "id\tsi_sdr\tsi_sdr_mixture\tsi_sdr_improvement\tspectral_mse\tspk_sim_target\tspk_sim_enroll\ttau_used"
        )?;
        for r in &self.rows {
            writeln!(
                f,
                "{}\t{:.6}\t{:.6}\t{:.6}\t{:.6e}\t{:.6}\t{:.6}\t{:.6}",
                r.id,
                r.si_sdr,
                r.si_sdr_mixture,
                r.si_sdr_improvement,
                r.spectral_mse,
                r.spk_sim_target,
                r.spk_sim_enroll,
                r.tau_used
            )?;
        }
        Ok(())
    }
}

/// How the start coordinate is chosen for a sweep condition.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum TauMode {
    /// tau = 0: inference without the regressor.
    ForcedZero,
    /// tau = the example's true mixing ratio.
    ForcedTrue,
    /// tau from the trained regressor.
    Predicted,
}

impl TauMode {
    pub fn label(&self) -> &'static str {
        match self {
            TauMode::ForcedZero => "w/o MR (tau=0)",
            TauMode::ForcedTrue => "forced tau=tau*",
            TauMode::Predicted => "w/ MR (predicted)",
        }
    }
}

/// One model entering the sensitivity sweep.
pub struct SweepModel<'a> {
    pub label: String,
    pub kind: PathKind,
    pub net: &'a MeanVelocityNet,
    pub params: &'a ParamStore,
}

/// Evaluates one model over a dataset at a fixed tau mode.
pub fn evaluate_condition(
    model: &SweepModel,
    examples: &[MixtureExample],
    mode: TauMode,
    mr: Option<(&MixRatioNet, &ParamStore)>,
    infer_cfg: &InferenceConfig,
) -> Result<EvalReport> {
    let embedder = SpkEmbedder::new(infer_cfg.stft);
    let mut rows = Vec::with_capacity(examples.len());
    for (i, ex) in examples.iter().enumerate() {
        let tau = match mode {
            TauMode::ForcedZero => 0.0,
            TauMode::ForcedTrue => ex.tau_star,
            TauMode::Predicted => {
                let (mr_net, mr_params) = mr.ok_or_else(|| {
                    Error::validation("predicted tau requested but no regressor given")
                })?;
                mr_net.predict(mr_params, &ex.mixture, &ex.enroll)?
            }
        };
        let mut counter = NfeCounter::default();
        let source = NetVelocity {
            net: model.net,
            params: model.params,
        };
        let est = extract_utterance_with(&source, &ex.mixture, &ex.enroll, infer_cfg, tau, &mut counter)?;
        let est_spec = stft(&est, &infer_cfg.stft)?;
        let tgt_spec = stft(&ex.target, &infer_cfg.stft)?;
        let sdr = si_sdr(&est, &ex.target)?;
        let sdr_mix = si_sdr(&ex.mixture, &ex.target)?;
        rows.push(EvalRow {
            id: i as u64,
            si_sdr: sdr,
            si_sdr_mixture: sdr_mix,
            si_sdr_improvement: sdr - sdr_mix,
            spectral_mse: spectral_mse(&est_spec, &tgt_spec)?,
            spk_sim_target: spk_sim(&est, &ex.target, &embedder)?,
            spk_sim_enroll: spk_sim(&est, &ex.enroll, &embedder)?,
            tau_used: tau,
        });
    }
    Ok(EvalReport {
        condition: format!("{} / {}", model.label, mode.label()),
        rows,
    })
}

/// One model's block in the sensitivity table: the "with" and "without"
/// conditions plus relative declines (dB for SI-SDR, percent otherwise).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SensitivityBlock {
    pub model: String,
    pub with_report: EvalReport,
    pub without_report: EvalReport,
    pub decline_si_sdr_db: f64,
    pub decline_spk_sim_pct: f64,
    pub decline_spectral_mse_pct: f64,
}

/// Mixing-ratio sensitivity sweep: for every model, compare inference
/// with the chosen coordinate source against inference without one
/// (tau = 0), mirroring the with/without rows of the ablation layout.
pub fn mr_sensitivity_report(
    models: &[SweepModel],
    examples: &[MixtureExample],
    with_mode: TauMode,
    mr: Option<(&MixRatioNet, &ParamStore)>,
    infer_cfg: &InferenceConfig,
) -> Result<Vec<SensitivityBlock>> {
    if models.is_empty() {
        return Err(Error::validation("no models supplied for the sweep"));
    }
    if examples.is_empty() {
        return Err(Error::validation("no examples supplied for the sweep"));
    }
    let mut blocks = Vec::with_capacity(models.len());
    for model in models {
        let with_report = evaluate_condition(model, examples, with_mode, mr, infer_cfg)?;
        let without_report =
            evaluate_condition(model, examples, TauMode::ForcedZero, mr, infer_cfg)?;
        let wa = with_report.aggregate();
        let wo = without_report.aggregate();
        let pct = |without: f64, with: f64| {
            if with.abs() < 1e-12 {
                0.0
            } else {
                100.0 * (without - with) / with.abs()
            }
        };
        blocks.push(SensitivityBlock {
            model: model.label.clone(),
            decline_si_sdr_db: wo.si_sdr - wa.si_sdr,
            decline_spk_sim_pct: pct(wo.spk_sim_target, wa.spk_sim_target),
            decline_spectral_mse_pct: pct(wo.spectral_mse, wa.spectral_mse),
            with_report,
            without_report,
        });
    }
    Ok(blocks)
}

/// Renders the sweep as a fixed-width table.
pub fn format_sensitivity_table(blocks: &[SensitivityBlock]) -> String {
    let mut out = String::new();
    out.push_str(&format!(
        "{:<28} {:<20} {:>10} {:>10} {:>12} | {:>12} {:>12} {:>14}\n",
        "Model",
        "MR pred.",
        "SI-SDR",
        "SpkSim",
        "SpecMSE",
        "dSI-SDR(dB)",
        "dSpkSim(%)",
        "dSpecMSE(%)"
    ));
    for b in blocks {
        let wa = b.with_report.aggregate();
        let wo = b.without_report.aggregate();
        out.push_str(&format!(
            "{:<28} {:<20} {:>10.2} {:>10.3} {:>12.3e} | {:>12} {:>12} {:>14}\n",
            b.model, "w/o", wo.si_sdr, wo.spk_sim_target, wo.spectral_mse, "", "", ""
        ));
        out.push_str(&format!(
            "{:<28} {:<20} {:>10.2} {:>10.3} {:>12.3e} | {:>12.2} {:>12.1} {:>14.1}\n",
            b.model,
            "w/",
            wa.si_sdr,
            wa.spk_sim_target,
            wa.spectral_mse,
            b.decline_si_sdr_db,
            b.decline_spk_sim_pct,
            b.decline_spectral_mse_pct
        ));
    }
    out
}

/// Grid sweep of the forced start coordinate for one model; returns
/// (tau, mean SI-SDR) points for plotting.
pub fn tau_grid_sweep(
    model: &SweepModel,
    examples: &[MixtureExample],
    taus: &[f64],
    infer_cfg: &InferenceConfig,
) -> Result<Vec<(f64, f64)>> {
    let mut points = Vec::with_capacity(taus.len());
    for &tau in taus {
        let mut acc = 0.0;
        let mut n = 0usize;
        for ex in examples {
            let mut counter = NfeCounter::default();
            let source = NetVelocity {
                net: model.net,
                params: model.params,
            };
            let est = extract_utterance_with(
                &source,
                &ex.mixture,
                &ex.enroll,
                infer_cfg,
                tau,
                &mut counter,
            )?;
            acc += si_sdr(&est, &ex.target)?;
            n += 1;
        }
        points.push((tau, acc / n as f64));
    }
    Ok(points)
}

/// Writes (x, y) series data for plotting.
pub fn write_series(path: impl AsRef<Path>, series: &str, points: &[(f64, f64)]) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(f, "series\tx\ty")?;
    for (x, y) in points {
        writeln!(f, "{series}\t{x:.6}\t{y:.6}")?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::prelude::*;
    use rand_chacha::ChaCha8Rng;

    fn wave(samples: Vec<f64>) -> Waveform {
        Waveform::new(samples, 8000).unwrap()
    }

    fn noise(rng: &mut impl Rng, len: usize) -> Waveform {
        wave((0..len).map(|_| rng.gen_range(-0.5..0.5)).collect())
    }

    #[test]
    fn si_sdr_perfect_and_scaled() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let r = noise(&mut rng, 500);
        assert_eq!(si_sdr(&r, &r).unwrap(), SI_SDR_CEILING_DB);
        let doubled = wave(r.samples().iter().map(|v| 2.0 * v).collect());
        assert_eq!(si_sdr(&doubled, &r).unwrap(), SI_SDR_CEILING_DB);
    }

    /// Orthogonal noise at 1/10 the reference norm gives exactly 20 dB.
    #[test]
    fn si_sdr_constructed_orthogonal_noise() {
        let n = 512;
        // Reference and noise on disjoint supports are exactly orthogonal.
        let mut r = vec![0.0; n];
        let mut z = vec![0.0; n];
        for i in 0..n / 2 {
            r[i] = (i as f64 * 0.1).sin() + 0.3;
        }
        let r_norm = r.iter().map(|v| v * v).sum::<f64>().sqrt();
        for (i, slot) in z.iter_mut().enumerate().skip(n / 2) {
            *slot = ((i as f64 * 0.37).cos()) + 0.1;
        }
        let z_norm = z.iter().map(|v| v * v).sum::<f64>().sqrt();
        let scale = r_norm / (10.0 * z_norm);
        let est: Vec<f64> = r
            .iter()
            .zip(&z)
            .map(|(rv, zv)| rv + scale * zv)
            .collect();
        let got = si_sdr(&wave(est), &wave(r)).unwrap();
        assert!((got - 20.0).abs() < 1e-9, "got {got}");
    }

    #[test]
    fn si_sdr_scale_invariance_property() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let r = noise(&mut rng, 400);
        let e = noise(&mut rng, 400);
        let base = si_sdr(&e, &r).unwrap();
        for &alpha in &[0.001, 0.5, 3.0, 1000.0] {
            let scaled = wave(e.samples().iter().map(|v| alpha * v).collect());
            let got = si_sdr(&scaled, &r).unwrap();
            assert!((got - base).abs() < 1e-9);
        }
    }

    /// Naive from-definition implementation agrees on random pairs.
    #[test]
    fn si_sdr_matches_brute_force() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..20 {
            let r = noise(&mut rng, 300);
            let e = noise(&mut rng, 300);
            let got = si_sdr(&e, &r).unwrap();

            // Brute force, written independently from the definition.
            let dot: f64 = e.samples().iter().zip(r.samples()).map(|(a, b)| a * b).sum();
            let rr: f64 = r.samples().iter().map(|v| v * v).sum();
            let target: Vec<f64> = r.samples().iter().map(|v| v * dot / rr).collect();
            let resid: Vec<f64> = e
                .samples()
                .iter()
                .zip(&target)
                .map(|(a, t)| a - t)
                .collect();
            let te: f64 = target.iter().map(|v| v * v).sum();
            let re: f64 = resid.iter().map(|v| v * v).sum();
            let expected = 10.0 * (te / re).log10();
            assert!((got - expected).abs() < 1e-9);
        }
    }

    #[test]
    fn si_sdr_rejects_zero_reference() {
        let z = wave(vec![0.0; 100]);
        let e = wave(vec![1.0; 100]);
        assert!(si_sdr(&e, &z).is_err());
    }

    #[test]
    fn spk_sim_identity_and_negation() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let w = noise(&mut rng, 600);
        let emb = SpkEmbedder::new(StftConfig::desk());
        let same = spk_sim(&w, &w, &emb).unwrap();
        assert!((same - 1.0).abs() < 1e-9);

        // Magnitude features make sign irrelevant.
        let neg = wave(w.samples().iter().map(|v| -v).collect());
        let sim = spk_sim(&neg, &w, &emb).unwrap();
        assert!((sim - 1.0).abs() < 1e-9);
    }

    #[test]
    fn spk_sim_silent_input_is_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let w = noise(&mut rng, 600);
        let silent = wave(vec![0.0; 600]);
        let emb = SpkEmbedder::new(StftConfig::desk());
        assert_eq!(spk_sim(&silent, &w, &emb).unwrap(), 0.0);
    }

    /// Same-speaker enrollments are closer than cross-speaker pairs by a
    /// clear margin on the synthetic corpus.
    #[test]
    fn spk_sim_separates_synthetic_speakers() {
        use crate::synth::{realize, speaker_bank, SynthConfig};
        let cfg = SynthConfig::default();
        let bank = speaker_bank(&cfg, 3);
        let emb = SpkEmbedder::new(StftConfig::desk());
        let mut rng = ChaCha8Rng::seed_from_u64(6);

        let mut same = Vec::new();
        let mut cross = Vec::new();
        for i in 0..6 {
            let a1 = realize(&bank[i], 0.2, cfg.sample_rate, &mut rng);
            let a2 = realize(&bank[i], 0.2, cfg.sample_rate, &mut rng);
            same.push(spk_sim(&a1, &a2, &emb).unwrap());
            let other = realize(&bank[(i + 7) % bank.len()], 0.2, cfg.sample_rate, &mut rng);
            cross.push(spk_sim(&a1, &other, &emb).unwrap());
        }
        let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
        assert!(
            mean(&same) - mean(&cross) >= 0.2,
            "same {} cross {}",
            mean(&same),
            mean(&cross)
        );
    }
}
