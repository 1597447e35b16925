//! Synthetic mixture generator with exactly known mixing ratios.
//!
//! "Speakers" are harmonic complexes with per-speaker spectral profiles,
//! AM/FM envelopes, and non-overlapping fundamental bands, so the
//! enrollment cue is learnable and a trivial pitch classifier can verify
//! speaker identity. Sources are snapped to the f32 grid before mixing,
//! which makes the convex identity y = (1 - tau) b + tau s hold bit-exactly
//! both in memory and across a save/load round trip (the loader rebuilds
//! the mixture from the stored sources and ratio).

use std::io::Write as _;
use std::path::{Path, PathBuf};

use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use rustfft::num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::audio::{read_wav, Waveform};
use crate::{Error, Result};

/// One synthetic voice: a harmonic complex with a fixed spectral profile.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SyntheticSpeaker {
    pub id: u32,
    /// Center of the owned fundamental band (Hz).
    pub fundamental: f64,
    /// Owned band (Hz); bands of distinct speakers never overlap.
    pub band: (f64, f64),
    /// Relative harmonic amplitudes, index 0 = fundamental.
    pub harmonic_weights: Vec<f64>,
    /// AM/FM envelope parameters: (am_rate, am_depth, fm_rate, fm_depth).
    pub modulation: (f64, f64, f64, f64),
}

/// Which split an example belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

/// Generator configuration.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthConfig {
    pub sample_rate: u32,
    /// Speakers per split; bands are interleaved across splits.
    pub speakers_train: usize,
    pub speakers_val: usize,
    pub speakers_test: usize,
    pub examples_train: usize,
    pub examples_val: usize,
    pub examples_test: usize,
    /// Fundamental range (Hz), carved into non-overlapping bands.
    pub f0_low: f64,
    pub f0_high: f64,
    pub n_harmonics: usize,
    pub mixture_secs: f64,
    pub enroll_secs: f64,
    pub tau_low: f64,
    pub tau_high: f64,
    /// RMS of band-limited noise folded into the background (0 = clean).
    pub noise_level: f64,
    /// Noise band (Hz), only used when noise_level > 0.
    pub noise_band: (f64, f64),
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            sample_rate: 8000,
            speakers_train: 8,
            speakers_val: 4,
            speakers_test: 4,
            examples_train: 2048,
            examples_val: 128,
            examples_test: 256,
            f0_low: 400.0,
            f0_high: 3200.0,
            n_harmonics: 10,
            mixture_secs: 0.128,
            enroll_secs: 0.064,
            tau_low: 0.3,
            tau_high: 0.7,
            noise_level: 0.0,
            noise_band: (1000.0, 3000.0),
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.sample_rate == 0 {
            return Err(Error::Config("sample_rate must be positive".into()));
        }
        if self.speakers_train < 2 || self.speakers_val < 2 || self.speakers_test < 2 {
            return Err(Error::Config("every split needs at least 2 speakers".into()));
        }
        if !(0.0 < self.tau_low && self.tau_low < self.tau_high && self.tau_high < 1.0) {
            return Err(Error::Config("need 0 < tau_low < tau_high < 1".into()));
        }
        if self.f0_low <= 0.0 || self.f0_high <= self.f0_low {
            return Err(Error::Config("bad fundamental range".into()));
        }
        if self.f0_high >= self.sample_rate as f64 / 2.0 {
            return Err(Error::Config("f0_high above Nyquist".into()));
        }
        if self.mixture_secs <= 0.0 || self.enroll_secs <= 0.0 {
            return Err(Error::Config("durations must be positive".into()));
        }
        Ok(())
    }

    pub fn n_speakers(&self) -> usize {
        self.speakers_train + self.speakers_val + self.speakers_test
    }
}

/// A paired training tuple with the exact mixing ratio.
#[derive(Debug, Clone)]
pub struct MixtureExample {
    pub mixture: Waveform,
    pub target: Waveform,
    pub background: Waveform,
    pub enroll: Waveform,
    pub tau_star: f64,
    pub target_speaker: u32,
    pub interferer_speaker: u32,
}

impl MixtureExample {
    /// Max absolute deviation from the convex identity (0 by construction).
    pub fn identity_error(&self) -> f64 {
        self.mixture
            .samples()
            .iter()
            .zip(self.target.samples())
            .zip(self.background.samples())
            .map(|((y, s), b)| (y - ((1.0 - self.tau_star) * b + self.tau_star * s)).abs())
            .fold(0.0, f64::max)
    }
}

/// Builds the speaker bank: geometric cells over the fundamental range,
/// each speaker owning the middle 60% of its cell so bands never touch.
pub fn speaker_bank(cfg: &SynthConfig, seed: u64) -> Vec<SyntheticSpeaker> {
    let n = cfg.n_speakers();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_ba2c);
    let ratio = (cfg.f0_high / cfg.f0_low).powf(1.0 / n as f64);
    (0..n)
        .map(|i| {
            let cell_lo = cfg.f0_low * ratio.powi(i as i32);
            let lo = cell_lo * ratio.powf(0.2);
            let hi = cell_lo * ratio.powf(0.8);
            let fundamental = (lo * hi).sqrt();
            let decay: f64 = rng.gen_range(0.7..1.4);
            // Unit fundamental keeps the pitch peak unambiguous.
            let harmonic_weights: Vec<f64> = (0..cfg.n_harmonics)
                .map(|k| {
                    if k == 0 {
                        1.0
                    } else {
                        (k as f64 + 1.0).powf(-decay) * rng.gen_range(0.6..1.0)
                    }
                })
                .collect();
            let modulation = (
                rng.gen_range(2.0..8.0),
                rng.gen_range(0.2..0.5),
                rng.gen_range(1.0..5.0),
                rng.gen_range(0.002..0.01),
            );
            SyntheticSpeaker {
                id: i as u32,
                fundamental,
                band: (lo, hi),
                harmonic_weights,
                modulation,
            }
        })
        .collect()
}

/// Split assignment for a speaker id: splits are interleaved across the
/// frequency-ordered bank so each split covers the whole range.
pub fn split_of_speaker(cfg: &SynthConfig, id: u32) -> Split {
    let pattern_len = cfg.n_speakers();
    let idx = (id as usize) % pattern_len;
    let mut labels = Vec::with_capacity(pattern_len);
    let mut remaining = [
        (Split::Train, cfg.speakers_train),
        (Split::Val, cfg.speakers_val),
        (Split::Test, cfg.speakers_test),
    ];
    while labels.len() < pattern_len {
        for entry in remaining.iter_mut() {
            if entry.1 > 0 {
                labels.push(entry.0);
                entry.1 -= 1;
            }
        }
    }
    labels[idx]
}

/// Snaps a sample sequence to the f32 grid (lossless under f32 WAV I/O).
fn snap_f32(samples: &mut [f64]) {
    for s in samples.iter_mut() {
        *s = f64::from(*s as f32);
    }
}

/// One utterance realization of a speaker: jittered pitch, random phases,
/// AM/FM envelope, onset/offset ramps, fixed RMS.
pub fn realize(
    speaker: &SyntheticSpeaker,
    secs: f64,
    sample_rate: u32,
    rng: &mut impl Rng,
) -> Waveform {
    let n = (secs * sample_rate as f64).round() as usize;
    let f0 = rng.gen_range(speaker.band.0..speaker.band.1);
    let (am_rate, am_depth, fm_rate, fm_depth) = speaker.modulation;
    let am_phase: f64 = rng.gen_range(0.0..std::f64::consts::TAU);
    let fm_phase: f64 = rng.gen_range(0.0..std::f64::consts::TAU);
    let nyquist = 0.45 * sample_rate as f64;
    let phases: Vec<f64> = (0..speaker.harmonic_weights.len())
        .map(|_| rng.gen_range(0.0..std::f64::consts::TAU))
        .collect();

    let mut samples = vec![0.0f64; n];
    let dt = 1.0 / sample_rate as f64;
    for (i, out) in samples.iter_mut().enumerate() {
        let t = i as f64 * dt;
        // Vibrato: instantaneous frequency f0 (1 + d sin(2 pi fr t + p)),
        // integrated analytically into the phase.
        let vib = -f0 * fm_depth / (std::f64::consts::TAU * fm_rate)
            * (std::f64::consts::TAU * fm_rate * t + fm_phase).cos();
        let base_phase = std::f64::consts::TAU * (f0 * t + vib);
        let mut v = 0.0;
        for (k, (&w, &ph)) in speaker
            .harmonic_weights
            .iter()
            .zip(phases.iter())
            .enumerate()
        {
            let h = (k + 1) as f64;
            if h * f0 > nyquist {
                break;
            }
            v += w * (h * base_phase + ph).sin();
        }
        let am = 1.0 + am_depth * (std::f64::consts::TAU * am_rate * t + am_phase).sin();
        // Onset/offset ramps over the first/last 10%.
        let ramp = 0.1 * n as f64;
        let gate = ((i as f64 / ramp).min(1.0)).min(((n - 1 - i) as f64 / ramp).min(1.0));
        *out = v * am * gate.max(0.0);
    }

    // Fixed RMS so the mixing ratio is the only level cue.
    let rms = (samples.iter().map(|s| s * s).sum::<f64>() / n as f64).sqrt();
    if rms > 0.0 {
        let g = 0.15 / rms;
        for s in samples.iter_mut() {
            *s *= g;
        }
    }
    snap_f32(&mut samples);
    Waveform::new(samples, sample_rate).expect("finite synthesis")
}

/// Band-limited noise synthesized from a random spectrum restricted to
/// the configured band, at a given RMS.
fn band_noise(
    len: usize,
    sample_rate: u32,
    band: (f64, f64),
    rms: f64,
    rng: &mut impl Rng,
) -> Vec<f64> {
    let mut spectrum = vec![Complex64::default(); len];
    let df = sample_rate as f64 / len as f64;
    for (k, slot) in spectrum.iter_mut().enumerate().take(len / 2 + 1) {
        let f = k as f64 * df;
        if f >= band.0 && f <= band.1 {
            let mag: f64 = rng.gen_range(0.5..1.0);
            let ph: f64 = rng.gen_range(0.0..std::f64::consts::TAU);
            *slot = Complex64::from_polar(mag, ph);
        }
    }
    for k in len / 2 + 1..len {
        spectrum[k] = spectrum[len - k].conj();
    }
    let fft = rustfft::FftPlanner::new().plan_fft_inverse(len);
    fft.process(&mut spectrum);
    let mut out: Vec<f64> = spectrum.iter().map(|c| c.re).collect();
    let cur = (out.iter().map(|s| s * s).sum::<f64>() / len as f64).sqrt();
    if cur > 0.0 {
        let g = rms / cur;
        for s in out.iter_mut() {
            *s *= g;
        }
    }
    out
}

/// Builds one paired example from a distinct speaker pair.
pub fn generate_example(
    target: &SyntheticSpeaker,
    interferer: &SyntheticSpeaker,
    cfg: &SynthConfig,
    rng: &mut impl Rng,
) -> Result<MixtureExample> {
    if target.id == interferer.id {
        return Err(Error::validation("target and interferer must differ"));
    }
    let s = realize(target, cfg.mixture_secs, cfg.sample_rate, rng);
    let mut b = realize(interferer, cfg.mixture_secs, cfg.sample_rate, rng);
    if cfg.noise_level > 0.0 {
        let noise = band_noise(
            b.len(),
            cfg.sample_rate,
            cfg.noise_band,
            cfg.noise_level * b.rms(),
            rng,
        );
        let mut mixed: Vec<f64> = b
            .samples()
            .iter()
            .zip(noise.iter())
            .map(|(x, n)| x + n)
            .collect();
        snap_f32(&mut mixed);
        b = Waveform::new(mixed, cfg.sample_rate)?;
    }
    let e = realize(target, cfg.enroll_secs, cfg.sample_rate, rng);
    let tau_star: f64 = rng.gen_range(cfg.tau_low..cfg.tau_high);
    let y_samples: Vec<f64> = b
        .samples()
        .iter()
        .zip(s.samples())
        .map(|(bv, sv)| (1.0 - tau_star) * bv + tau_star * sv)
        .collect();
    let mixture = Waveform::new(y_samples, cfg.sample_rate)?;
    Ok(MixtureExample {
        mixture,
        target: s,
        background: b,
        enroll: e,
        tau_star,
        target_speaker: target.id,
        interferer_speaker: interferer.id,
    })
}

/// Deterministic per-example RNG: one ChaCha stream per example index.
fn example_rng(seed: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index.wrapping_add(1));
    rng
}

/// Draws an example for a split by picking a target/interferer pair from
/// the split's own speakers.
pub fn example_for_index(
    bank: &[SyntheticSpeaker],
    cfg: &SynthConfig,
    split: Split,
    seed: u64,
    index: u64,
) -> Result<MixtureExample> {
    let pool: Vec<&SyntheticSpeaker> = bank
        .iter()
        .filter(|sp| split_of_speaker(cfg, sp.id) == split)
        .collect();
    if pool.len() < 2 {
        return Err(Error::Config(format!("split {split:?} has < 2 speakers")));
    }
    let salt = match split {
        Split::Train => 0u64,
        Split::Val => 1 << 40,
        Split::Test => 2 << 40,
    };
    let mut rng = example_rng(seed, salt | index);
    let ti = rng.gen_range(0..pool.len());
    let mut ii = rng.gen_range(0..pool.len() - 1);
    if ii >= ti {
        ii += 1;
    }
    generate_example(pool[ti], pool[ii], cfg, &mut rng)
}

/// One manifest record. The stored mixture WAV is a listening copy; the
/// loader reconstructs the exact mixture from sources and `tau_star`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ManifestRecord {
    pub id: u64,
    pub split: Split,
    pub target_speaker: u32,
    pub interferer_speaker: u32,
    pub tau_star: f64,
    pub sample_rate: u32,
    pub mixture_len: usize,
    pub mixture_path: String,
    pub target_path: String,
    pub background_path: String,
    pub enroll_path: String,
}

/// A dataset persisted on disk: manifest plus per-role WAV files.
#[derive(Debug, Clone)]
pub struct DatasetOnDisk {
    pub root: PathBuf,
    pub records: Vec<ManifestRecord>,
    pub speakers: Vec<SyntheticSpeaker>,
}

/// Generates and persists a dataset: WAVs, a JSONL manifest, and the
/// speaker bank. Deterministic for a given (config, seed).
pub fn generate_dataset(
    cfg: &SynthConfig,
    seed: u64,
    out_dir: impl AsRef<Path>,
) -> Result<DatasetOnDisk> {
    cfg.validate()?;
    let root = out_dir.as_ref().to_path_buf();
    std::fs::create_dir_all(root.join("wav"))?;
    let bank = speaker_bank(cfg, seed);

    let mut records = Vec::new();
    let mut id: u64 = 0;
    for (split, count) in [
        (Split::Train, cfg.examples_train),
        (Split::Val, cfg.examples_val),
        (Split::Test, cfg.examples_test),
    ] {
        for index in 0..count {
            let ex = example_for_index(&bank, cfg, split, seed, index as u64)?;
            let stem = format!("wav/{id:06}");
            let paths = [
                ("y", &ex.mixture),
                ("s", &ex.target),
                ("b", &ex.background),
                ("e", &ex.enroll),
            ];
            for (role, w) in paths {
                w.write_wav_f32(root.join(format!("{stem}_{role}.wav")))?;
            }
            records.push(ManifestRecord {
                id,
                split,
                target_speaker: ex.target_speaker,
                interferer_speaker: ex.interferer_speaker,
                tau_star: ex.tau_star,
                sample_rate: cfg.sample_rate,
                mixture_len: ex.mixture.len(),
                mixture_path: format!("{stem}_y.wav"),
                target_path: format!("{stem}_s.wav"),
                background_path: format!("{stem}_b.wav"),
                enroll_path: format!("{stem}_e.wav"),
            });
            id += 1;
        }
    }

    let mut mf = std::io::BufWriter::new(std::fs::File::create(root.join("manifest.jsonl"))?);
    for r in &records {
        serde_json::to_writer(&mut mf, r)?;
        mf.write_all(b"\n")?;
    }
    mf.flush()?;
    std::fs::write(
        root.join("speakers.json"),
        serde_json::to_string_pretty(&bank)?,
    )?;
    Ok(DatasetOnDisk {
        root,
        records,
        speakers: bank,
    })
}

/// Reads a manifest written by [`generate_dataset`].
pub fn open_dataset(root: impl AsRef<Path>) -> Result<DatasetOnDisk> {
    let root = root.as_ref().to_path_buf();
    let manifest = std::fs::read_to_string(root.join("manifest.jsonl"))?;
    let mut records = Vec::new();
    for (i, line) in manifest.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let r: ManifestRecord = serde_json::from_str(line)
            .map_err(|e| Error::Dataset(format!("manifest line {}: {e}", i + 1)))?;
        records.push(r);
    }
    let speakers: Vec<SyntheticSpeaker> =
        serde_json::from_str(&std::fs::read_to_string(root.join("speakers.json"))?)
            .map_err(|e| Error::Dataset(format!("speakers.json: {e}")))?;
    Ok(DatasetOnDisk {
        root,
        records,
        speakers,
    })
}

impl DatasetOnDisk {
    pub fn records_for(&self, split: Split) -> impl Iterator<Item = &ManifestRecord> {
        self.records.iter().filter(move |r| r.split == split)
    }

    /// Loads one example, rebuilding the exact mixture from the stored
    /// sources and ratio.
    pub fn load_example(&self, record: &ManifestRecord) -> Result<MixtureExample> {
        let target = read_wav(self.root.join(&record.target_path))?;
        let background = read_wav(self.root.join(&record.background_path))?;
        let enroll = read_wav(self.root.join(&record.enroll_path))?;
        let tau = record.tau_star;
        let y: Vec<f64> = background
            .samples()
            .iter()
            .zip(target.samples())
            .map(|(b, s)| (1.0 - tau) * b + tau * s)
            .collect();
        let mixture = Waveform::new(y, record.sample_rate)?;
        Ok(MixtureExample {
            mixture,
            target,
            background,
            enroll,
            tau_star: tau,
            target_speaker: record.target_speaker,
            interferer_speaker: record.interferer_speaker,
        })
    }
}

/// Crude pitch estimate by peak-picking a long DFT magnitude, used to
/// verify speaker separability.
pub fn estimate_f0(w: &Waveform, f_low: f64, f_high: f64) -> f64 {
    let n = w.len();
    let mut buf: Vec<Complex64> = w
        .samples()
        .iter()
        .map(|&s| Complex64::new(s, 0.0))
        .collect();
    let fft = rustfft::FftPlanner::new().plan_fft_forward(n);
    fft.process(&mut buf);
    let df = w.sample_rate() as f64 / n as f64;
    let lo = (f_low / df).floor() as usize;
    let hi = ((f_high / df).ceil() as usize).min(n / 2);
    let mut best = lo;
    let mut best_mag = 0.0;
    for k in lo..=hi {
        let m = buf[k].norm();
        if m > best_mag {
            best_mag = m;
            best = k;
        }
    }
    best as f64 * df
}

/// Classifies a waveform to the speaker whose fundamental is nearest to
/// its estimated pitch (log scale).
pub fn classify_speaker(w: &Waveform, bank: &[SyntheticSpeaker]) -> u32 {
    let f_low = bank.iter().map(|s| s.band.0).fold(f64::INFINITY, f64::min) * 0.8;
    let f_high = bank.iter().map(|s| s.band.1).fold(0.0, f64::max) * 1.2;
    let f0 = estimate_f0(w, f_low, f_high);
    bank.iter()
        .min_by(|a, b| {
            let da = (a.fundamental.ln() - f0.ln()).abs();
            let db = (b.fundamental.ln() - f0.ln()).abs();
            da.partial_cmp(&db).unwrap()
        })
        .map(|s| s.id)
        .unwrap()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_cfg() -> SynthConfig {
        SynthConfig {
            examples_train: 12,
            examples_val: 4,
            examples_test: 4,
            ..Default::default()
        }
    }

    #[test]
    fn convex_identity_is_exact() {
        let cfg = small_cfg();
        let bank = speaker_bank(&cfg, 1);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..10 {
            let ex = generate_example(&bank[0], &bank[5], &cfg, &mut rng).unwrap();
            assert_eq!(ex.identity_error(), 0.0);
        }
    }

    #[test]
    fn noisy_background_keeps_identity() {
        let cfg = SynthConfig {
            noise_level: 0.3,
            ..small_cfg()
        };
        let bank = speaker_bank(&cfg, 1);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let ex = generate_example(&bank[1], &bank[6], &cfg, &mut rng).unwrap();
        assert_eq!(ex.identity_error(), 0.0);
    }

    #[test]
    fn stft_linearity_carries_to_spectra() {
        use crate::spectral::{stft, StftConfig};
        let cfg = small_cfg();
        let bank = speaker_bank(&cfg, 4);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let ex = generate_example(&bank[2], &bank[7], &cfg, &mut rng).unwrap();
        let sc = StftConfig::desk();
        let y = stft(&ex.mixture, &sc).unwrap();
        let s = stft(&ex.target, &sc).unwrap();
        let b = stft(&ex.background, &sc).unwrap();
        let combo = b.data() * (1.0 - ex.tau_star) + s.data() * ex.tau_star;
        let num: f64 = (y.data() - &combo).iter().map(|v| v * v).sum();
        let den: f64 = combo.iter().map(|v| v * v).sum();
        assert!((num / den).sqrt() < 1e-10);
    }

    #[test]
    fn bands_never_overlap() {
        let cfg = small_cfg();
        let bank = speaker_bank(&cfg, 7);
        for w in bank.windows(2) {
            assert!(w[0].band.1 < w[1].band.0);
        }
    }

    #[test]
    fn enrollment_shares_band_with_target_only() {
        let cfg = small_cfg();
        let bank = speaker_bank(&cfg, 8);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let target = &bank[3];
        let interferer = &bank[10];
        let ex = generate_example(target, interferer, &cfg, &mut rng).unwrap();
        assert_eq!(classify_speaker(&ex.enroll, &bank), target.id);
        assert_eq!(classify_speaker(&ex.target, &bank), target.id);
        assert_eq!(classify_speaker(&ex.background, &bank), interferer.id);
    }

    #[test]
    fn classifier_separates_enrollments() {
        let cfg = small_cfg();
        let bank = speaker_bank(&cfg, 10);
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut correct = 0;
        let total = 200;
        for i in 0..total {
            let sp = &bank[i % bank.len()];
            let e = realize(sp, cfg.enroll_secs, cfg.sample_rate, &mut rng);
            if classify_speaker(&e, &bank) == sp.id {
                correct += 1;
            }
        }
        assert!(
            correct as f64 / total as f64 >= 0.99,
            "only {correct}/{total} enrollments classified correctly"
        );
    }

    #[test]
    fn dataset_round_trip_and_split_disjointness() {
        let cfg = small_cfg();
        let dir = tempfile::tempdir().unwrap();
        let ds = generate_dataset(&cfg, 42, dir.path()).unwrap();
        assert_eq!(ds.records.len(), 12 + 4 + 4);

        // Speaker sets of the three splits are pairwise disjoint.
        use std::collections::HashSet;
        let speakers = |split: Split| -> HashSet<u32> {
            ds.records_for(split)
                .flat_map(|r| [r.target_speaker, r.interferer_speaker])
                .collect()
        };
        let tr = speakers(Split::Train);
        let va = speakers(Split::Val);
        let te = speakers(Split::Test);
        assert!(tr.is_disjoint(&va));
        assert!(tr.is_disjoint(&te));
        assert!(va.is_disjoint(&te));

        // Reload: identity still exact, metadata intact.
        let reopened = open_dataset(dir.path()).unwrap();
        for r in &reopened.records {
            let ex = reopened.load_example(r).unwrap();
            assert_eq!(ex.identity_error(), 0.0);
            assert!(ex.tau_star >= cfg.tau_low && ex.tau_star <= cfg.tau_high);
        }
    }

    #[test]
    fn same_seed_regenerates_identical_data() {
        let cfg = small_cfg();
        let d1 = tempfile::tempdir().unwrap();
        let d2 = tempfile::tempdir().unwrap();
        let a = generate_dataset(&cfg, 31, d1.path()).unwrap();
        let b = generate_dataset(&cfg, 31, d2.path()).unwrap();
        for (ra, rb) in a.records.iter().zip(b.records.iter()) {
            assert_eq!(ra.tau_star, rb.tau_star);
            let xa = a.load_example(ra).unwrap();
            let xb = b.load_example(rb).unwrap();
            assert_eq!(xa.mixture.samples(), xb.mixture.samples());
            assert_eq!(xa.enroll.samples(), xb.enroll.samples());
        }
    }

    #[test]
    fn configured_sizes_respected() {
        let cfg = small_cfg();
        let dir = tempfile::tempdir().unwrap();
        let ds = generate_dataset(&cfg, 1, dir.path()).unwrap();
        assert_eq!(ds.records_for(Split::Train).count(), cfg.examples_train);
        assert_eq!(ds.records_for(Split::Val).count(), cfg.examples_val);
        assert_eq!(ds.records_for(Split::Test).count(), cfg.examples_test);
    }
}
