//! STFT frontend: waveform <-> real/imaginary-stacked spectrograms.
//!
//! Every downstream module works on `Spectrogram`s of shape (2F, T): the
//! first F rows hold real parts, the last F rows imaginary parts, with
//! F = n_fft/2 + 1. Analysis is centered with reflection padding and a
//! periodic Hann window; synthesis divides by the accumulated squared
//! window so the round trip is exact to machine precision wherever the
//! squared-window sum is positive.

use std::io::{Read, Write};
use std::path::Path;
use std::sync::Arc;

use ndarray::Array2;
use rustfft::num_complex::Complex64;
use rustfft::{Fft, FftPlanner};

use crate::audio::Waveform;
use crate::{Error, Result};

/// Analysis/synthesis window identifier.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum WindowKind {
    /// Periodic Hann, w[n] = 0.5 (1 - cos(2 pi n / n_fft)).
    HannPeriodic,
}

/// STFT analysis parameters.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct StftConfig {
    pub n_fft: usize,
    pub hop: usize,
    pub window: WindowKind,
}

impl StftConfig {
    pub fn new(n_fft: usize, hop: usize) -> Result<Self> {
        let cfg = Self {
            n_fft,
            hop,
            window: WindowKind::HannPeriodic,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    /// Full-scale configuration: n_fft 510, hop 128 (2F = 512 channels).
    pub fn paper() -> Self {
        Self::new(510, 128).expect("valid")
    }

    /// Desk-scale configuration: n_fft 62, hop 16 (2F = 64 channels).
    pub fn desk() -> Self {
        Self::new(62, 16).expect("valid")
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_fft < 2 {
            return Err(Error::Config(format!("n_fft {} too small", self.n_fft)));
        }
        if self.hop == 0 || self.hop > self.n_fft {
            return Err(Error::Config(format!(
                "hop {} must satisfy 0 < hop <= n_fft ({})",
                self.hop, self.n_fft
            )));
        }
        // Synthesis needs the squared-window overlap sum to stay positive,
        // which holds for Hann whenever frames overlap by at least half.
        if self.hop * 2 > self.n_fft {
            return Err(Error::Config(format!(
                "hop {} too large for perfect reconstruction (need hop <= n_fft/2 = {})",
                self.hop,
                self.n_fft / 2
            )));
        }
        Ok(())
    }

    /// Frequency bin count F = n_fft/2 + 1.
    pub fn freq_bins(&self) -> usize {
        self.n_fft / 2 + 1
    }

    /// Channel count of the stacked representation, 2F.
    pub fn channels(&self) -> usize {
        2 * self.freq_bins()
    }

    /// Frame count produced for a signal of `len` samples under centered padding.
    pub fn frames_for_len(&self, len: usize) -> usize {
        let pad = self.n_fft / 2;
        1 + (len + 2 * pad - self.n_fft) / self.hop
    }

    fn window_coeffs(&self) -> Vec<f64> {
        match self.window {
            WindowKind::HannPeriodic => (0..self.n_fft)
                .map(|n| {
                    0.5 * (1.0
                        - (2.0 * std::f64::consts::PI * n as f64 / self.n_fft as f64).cos())
                })
                .collect(),
        }
    }
}

/// Real/imaginary-stacked complex STFT, shape (2F, T).
#[derive(Debug, Clone, PartialEq)]
pub struct Spectrogram {
    data: Array2<f64>,
}

impl Spectrogram {
    /// Wraps a (2F, T) matrix, rejecting odd channel counts and non-finite entries.
    pub fn from_data(data: Array2<f64>) -> Result<Self> {
        if data.nrows() == 0 || data.nrows() % 2 != 0 {
            return Err(Error::validation(format!(
                "spectrogram needs an even, positive channel count, got {}",
                data.nrows()
            )));
        }
        if !data.iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite("spectrogram entry".into()));
        }
        Ok(Self { data })
    }

    pub fn zeros(channels: usize, frames: usize) -> Self {
        Self {
            data: Array2::zeros((channels, frames)),
        }
    }

    pub fn data(&self) -> &Array2<f64> {
        &self.data
    }

    pub fn into_data(self) -> Array2<f64> {
        self.data
    }

    /// Channel count 2F.
    pub fn channels(&self) -> usize {
        self.data.nrows()
    }

    /// Frame count T.
    pub fn frames(&self) -> usize {
        self.data.ncols()
    }

    /// Frequency bin count F.
    pub fn freq_bins(&self) -> usize {
        self.data.nrows() / 2
    }

    pub fn same_shape(&self, other: &Self) -> bool {
        self.data.dim() == other.data.dim()
    }
}

fn fft_forward(n: usize) -> Arc<dyn Fft<f64>> {
    FftPlanner::new().plan_fft_forward(n)
}

fn fft_inverse(n: usize) -> Arc<dyn Fft<f64>> {
    FftPlanner::new().plan_fft_inverse(n)
}

/// Reflection-pads `x` by `pad` samples on each side (no edge repeat).
fn reflect_pad(x: &[f64], pad: usize) -> Vec<f64> {
    debug_assert!(x.len() > pad);
    let mut out = Vec::with_capacity(x.len() + 2 * pad);
    for i in (1..=pad).rev() {
        out.push(x[i]);
    }
    out.extend_from_slice(x);
    for i in 0..pad {
        out.push(x[x.len() - 2 - i]);
    }
    out
}

/// Computes the centered STFT of `w` as a (2F, T) stacked spectrogram.
pub fn stft(w: &Waveform, cfg: &StftConfig) -> Result<Spectrogram> {
    cfg.validate()?;
    if w.len() < cfg.n_fft {
        return Err(Error::TooShort(format!(
            "signal of {} samples is shorter than one frame (n_fft {})",
            w.len(),
            cfg.n_fft
        )));
    }
    let pad = cfg.n_fft / 2;
    let padded = reflect_pad(w.samples(), pad);
    let n_frames = cfg.frames_for_len(w.len());
    let f_bins = cfg.freq_bins();
    let window = cfg.window_coeffs();
    let fft = fft_forward(cfg.n_fft);

    let mut data = Array2::<f64>::zeros((2 * f_bins, n_frames));
    let mut buf = vec![Complex64::default(); cfg.n_fft];
    for frame in 0..n_frames {
        let start = frame * cfg.hop;
        for (i, slot) in buf.iter_mut().enumerate() {
            *slot = Complex64::new(padded[start + i] * window[i], 0.0);
        }
        fft.process(&mut buf);
        for (k, v) in buf.iter().take(f_bins).enumerate() {
            data[[k, frame]] = v.re;
            data[[f_bins + k, frame]] = v.im;
        }
    }
    Spectrogram::from_data(data)
}

/// Inverse STFT via squared-window-normalized overlap-add, trimmed to `out_len`.
pub fn istft(s: &Spectrogram, cfg: &StftConfig, out_len: usize) -> Result<Waveform> {
    istft_with_rate(s, cfg, out_len, 0)
}

/// As [`istft`] but stamping a sample rate onto the result (0 keeps a 1 Hz placeholder).
pub fn istft_with_rate(
    s: &Spectrogram,
    cfg: &StftConfig,
    out_len: usize,
    sample_rate: u32,
) -> Result<Waveform> {
    cfg.validate()?;
    if s.channels() != cfg.channels() {
        return Err(Error::validation(format!(
            "spectrogram has {} channels but config expects {}",
            s.channels(),
            cfg.channels()
        )));
    }
    let n_frames = s.frames();
    if n_frames == 0 {
        return Err(Error::validation("empty spectrogram"));
    }
    let pad = cfg.n_fft / 2;
    let buf_len = (n_frames - 1) * cfg.hop + cfg.n_fft;
    if out_len + pad > buf_len {
        return Err(Error::validation(format!(
            "out_len {} exceeds the {} samples covered by {} frames",
            out_len,
            buf_len.saturating_sub(pad),
            n_frames
        )));
    }
    let f_bins = cfg.freq_bins();
    let window = cfg.window_coeffs();
    let fft = fft_inverse(cfg.n_fft);

    let mut acc = vec![0.0f64; buf_len];
    let mut wss = vec![0.0f64; buf_len];
    let mut buf = vec![Complex64::default(); cfg.n_fft];
    let scale = 1.0 / cfg.n_fft as f64;
    for frame in 0..n_frames {
        // Rebuild the full Hermitian spectrum from bins 0..=n_fft/2.
        for k in 0..f_bins {
            buf[k] = Complex64::new(s.data[[k, frame]], s.data[[f_bins + k, frame]]);
        }
        for k in f_bins..cfg.n_fft {
            buf[k] = buf[cfg.n_fft - k].conj();
        }
        fft.process(&mut buf);
        let start = frame * cfg.hop;
        for i in 0..cfg.n_fft {
            acc[start + i] += buf[i].re * scale * window[i];
            wss[start + i] += window[i] * window[i];
        }
    }
    let mut out = Vec::with_capacity(out_len);
    for i in 0..out_len {
        let j = pad + i;
        if wss[j] <= 1e-12 {
            return Err(Error::validation(format!(
                "window overlap vanishes at sample {i}; cannot reconstruct"
            )));
        }
        out.push(acc[j] / wss[j]);
    }
    let rate = if sample_rate == 0 { 1 } else { sample_rate };
    Waveform::new(out, rate)
}

/// Splits a spectrogram into contiguous, non-overlapping time chunks.
///
/// The last chunk may be shorter; concatenating the chunks reproduces the
/// input exactly.
pub fn chunk(s: &Spectrogram, chunk_frames: usize) -> Result<Vec<Spectrogram>> {
    if chunk_frames == 0 {
        return Err(Error::validation("chunk_frames must be > 0"));
    }
    let t = s.frames();
    let mut out = Vec::with_capacity(t.div_ceil(chunk_frames));
    let mut start = 0;
    while start < t {
        let end = (start + chunk_frames).min(t);
        let view = s.data.slice(ndarray::s![.., start..end]).to_owned();
        out.push(Spectrogram { data: view });
        start = end;
    }
    Ok(out)
}

/// Concatenates spectrogram chunks along the time axis.
pub fn concat_time(chunks: &[Spectrogram]) -> Result<Spectrogram> {
    if chunks.is_empty() {
        return Err(Error::validation("no chunks to concatenate"));
    }
    let channels = chunks[0].channels();
    for (i, c) in chunks.iter().enumerate() {
        if c.channels() != channels {
            return Err(Error::validation(format!(
                "chunk {i} has {} channels, expected {channels}",
                c.channels()
            )));
        }
    }
    let total: usize = chunks.iter().map(Spectrogram::frames).sum();
    let mut data = Array2::<f64>::zeros((channels, total));
    let mut col = 0;
    for c in chunks {
        data.slice_mut(ndarray::s![.., col..col + c.frames()])
            .assign(&c.data);
        col += c.frames();
    }
    Ok(Spectrogram { data })
}

const DUMP_MAGIC: &[u8; 4] = b"SGRM";
const DUMP_VERSION: u32 = 1;

/// Writes the binary spectrogram dump.
///
/// Layout (little-endian): 16-byte header of magic `SGRM`, version u32,
/// channel count (2F) u32, frame count (T) u32, followed by 2F*T f32
/// values in row-major order.
pub fn write_dump(s: &Spectrogram, path: impl AsRef<Path>) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    f.write_all(DUMP_MAGIC)?;
    f.write_all(&DUMP_VERSION.to_le_bytes())?;
    f.write_all(&(s.channels() as u32).to_le_bytes())?;
    f.write_all(&(s.frames() as u32).to_le_bytes())?;
    for v in s.data.iter() {
        f.write_all(&(*v as f32).to_le_bytes())?;
    }
    f.flush()?;
    Ok(())
}

/// Reads a spectrogram dump written by [`write_dump`].
pub fn read_dump(path: impl AsRef<Path>) -> Result<Spectrogram> {
    let mut f = std::io::BufReader::new(std::fs::File::open(path)?);
    let mut header = [0u8; 16];
    f.read_exact(&mut header)?;
    if &header[0..4] != DUMP_MAGIC {
        return Err(Error::validation("bad spectrogram dump magic"));
    }
    let version = u32::from_le_bytes(header[4..8].try_into().unwrap());
    if version != DUMP_VERSION {
        return Err(Error::validation(format!(
            "unsupported dump version {version}"
        )));
    }
    let channels = u32::from_le_bytes(header[8..12].try_into().unwrap()) as usize;
    let frames = u32::from_le_bytes(header[12..16].try_into().unwrap()) as usize;
    let mut payload = vec![0u8; channels * frames * 4];
    f.read_exact(&mut payload)?;
    let values: Vec<f64> = payload
        .chunks_exact(4)
        .map(|b| f64::from(f32::from_le_bytes(b.try_into().unwrap())))
        .collect();
    let data = Array2::from_shape_vec((channels, frames), values)
        .map_err(|e| Error::validation(format!("dump shape: {e}")))?;
    Spectrogram::from_data(data)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::prelude::*;
    use rand_chacha::ChaCha8Rng;

    fn noise(len: usize, rate: u32, seed: u64) -> Waveform {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let samples: Vec<f64> = (0..len).map(|_| rng.gen_range(-0.9..0.9)).collect();
        Waveform::new(samples, rate).unwrap()
    }

    fn rel_err(a: &[f64], b: &[f64]) -> f64 {
        let num: f64 = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum();
        let den: f64 = b.iter().map(|y| y * y).sum();
        (num / den.max(1e-300)).sqrt()
    }

    #[test]
    fn zero_waveform_gives_zero_spectrogram() {
        let w = Waveform::new(vec![0.0; 400], 8000).unwrap();
        let s = stft(&w, &StftConfig::desk()).unwrap();
        assert!(s.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn paper_config_has_512_channels() {
        let cfg = StftConfig::paper();
        assert_eq!(cfg.freq_bins(), 256);
        assert_eq!(cfg.channels(), 512);
        let w = noise(4096, 16000, 1);
        let s = stft(&w, &cfg).unwrap();
        assert_eq!(s.channels(), 512);
    }

    #[test]
    fn too_short_signal_is_rejected() {
        let w = Waveform::new(vec![0.1; 30], 8000).unwrap();
        match stft(&w, &StftConfig::desk()) {
            Err(Error::TooShort(_)) => {}
            other => panic!("expected TooShort, got {other:?}"),
        }
    }

    /// Oracle: a naive DFT of one windowed interior frame must match the
    /// corresponding STFT column, and a bin-centered sinusoid must peak at
    /// rows k and F+k.
    #[test]
    fn sinusoid_matches_direct_dft_of_one_frame() {
        let cfg = StftConfig::desk();
        let k = 7usize; // bin-centered frequency index
        let rate = 8000u32;
        let freq = k as f64 * rate as f64 / cfg.n_fft as f64;
        let len = 1024;
        let samples: Vec<f64> = (0..len)
            .map(|n| (2.0 * std::f64::consts::PI * freq * n as f64 / rate as f64).sin())
            .collect();
        let w = Waveform::new(samples.clone(), rate).unwrap();
        let s = stft(&w, &cfg).unwrap();

        // Interior frame: column c covers original samples [c*hop - pad ..).
        let col = 20usize;
        let pad = cfg.n_fft / 2;
        let start = col * cfg.hop - pad;
        let window = cfg.window_coeffs();
        let f_bins = cfg.freq_bins();
        for bin in 0..f_bins {
            let mut re = 0.0;
            let mut im = 0.0;
            for n in 0..cfg.n_fft {
                let x = samples[start + n] * window[n];
                let ang = -2.0 * std::f64::consts::PI * bin as f64 * n as f64 / cfg.n_fft as f64;
                re += x * ang.cos();
                im += x * ang.sin();
            }
            assert!((s.data()[[bin, col]] - re).abs() < 1e-9, "re bin {bin}");
            assert!((s.data()[[f_bins + bin, col]] - im).abs() < 1e-9, "im bin {bin}");
        }

        // Peak magnitude lands on bin k.
        let mag = |bin: usize| -> f64 {
            let re = s.data()[[bin, col]];
            let im = s.data()[[f_bins + bin, col]];
            (re * re + im * im).sqrt()
        };
        let peak = (0..f_bins)
            .max_by(|&a, &b| mag(a).partial_cmp(&mag(b)).unwrap())
            .unwrap();
        assert_eq!(peak, k);
    }

    #[test]
    fn round_trip_white_noise_desk() {
        let cfg = StftConfig::desk();
        let w = noise(3000, 8000, 7);
        let s = stft(&w, &cfg).unwrap();
        let r = istft(&s, &cfg, w.len()).unwrap();
        assert!(rel_err(r.samples(), w.samples()) < 1e-6);
    }

    #[test]
    fn round_trip_three_second_utterance_paper() {
        let cfg = StftConfig::paper();
        let rate = 16000;
        // Synthetic "utterance": a few harmonics with a slow envelope.
        let samples: Vec<f64> = (0..3 * rate)
            .map(|n| {
                let t = n as f64 / rate as f64;
                let env = 0.5 + 0.5 * (2.0 * std::f64::consts::PI * 1.3 * t).sin();
                env * (1..=5)
                    .map(|h| {
                        (2.0 * std::f64::consts::PI * 180.0 * h as f64 * t).sin() / h as f64
                    })
                    .sum::<f64>()
                    / 3.0
            })
            .collect();
        let w = Waveform::new(samples, rate as u32).unwrap();
        let s = stft(&w, &cfg).unwrap();
        let r = istft(&s, &cfg, w.len()).unwrap();
        assert!(rel_err(r.samples(), w.samples()) < 1e-6);
    }

    #[test]
    fn zero_spectrogram_reconstructs_to_zero() {
        let cfg = StftConfig::desk();
        let s = Spectrogram::zeros(cfg.channels(), 12);
        let r = istft(&s, &cfg, 100).unwrap();
        assert!(r.samples().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn istft_rejects_channel_mismatch() {
        let cfg = StftConfig::desk();
        let s = Spectrogram::zeros(10, 4);
        assert!(istft(&s, &cfg, 10).is_err());
    }

    #[test]
    fn linearity_of_stft() {
        let cfg = StftConfig::desk();
        let w1 = noise(900, 8000, 11);
        let w2 = noise(900, 8000, 12);
        let (a, b) = (0.7, -1.3);
        let mixed: Vec<f64> = w1
            .samples()
            .iter()
            .zip(w2.samples())
            .map(|(x, y)| a * x + b * y)
            .collect();
        let wm = Waveform::new(mixed, 8000).unwrap();
        let sm = stft(&wm, &cfg).unwrap();
        let s1 = stft(&w1, &cfg).unwrap();
        let s2 = stft(&w2, &cfg).unwrap();
        let combo = s1.data() * a + s2.data() * b;
        let num: f64 = (sm.data() - &combo).iter().map(|v| v * v).sum::<f64>();
        let den: f64 = combo.iter().map(|v| v * v).sum::<f64>();
        assert!((num / den).sqrt() < 1e-10);
    }

    #[test]
    fn chunk_sizes_and_partition_identity() {
        let cfg = StftConfig::desk();
        let w = noise(800, 8000, 3);
        let s = stft(&w, &cfg).unwrap();
        let t = s.frames();

        let one = chunk(&s, t).unwrap();
        assert_eq!(one.len(), 1);
        assert_eq!(one[0], s);

        for k in [1usize, 3, 4, 7, t + 5] {
            let parts = chunk(&s, k).unwrap();
            let sizes: Vec<usize> = parts.iter().map(Spectrogram::frames).collect();
            for (i, &sz) in sizes.iter().enumerate() {
                if i + 1 < sizes.len() {
                    assert_eq!(sz, k);
                } else {
                    assert!(sz <= k && sz > 0);
                }
            }
            let back = concat_time(&parts).unwrap();
            assert_eq!(back, s, "partition identity failed for k={k}");
        }
    }

    #[test]
    fn chunk_10_by_4_gives_4_4_2() {
        let s = Spectrogram::zeros(4, 10);
        let parts = chunk(&s, 4).unwrap();
        let sizes: Vec<usize> = parts.iter().map(Spectrogram::frames).collect();
        assert_eq!(sizes, vec![4, 4, 2]);
    }

    #[test]
    fn concat_rejects_channel_mismatch() {
        let a = Spectrogram::zeros(4, 3);
        let b = Spectrogram::zeros(6, 3);
        assert!(concat_time(&[a, b]).is_err());
    }

    #[test]
    fn dump_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("s.bin");
        let cfg = StftConfig::desk();
        let w = noise(500, 8000, 5);
        let s = stft(&w, &cfg).unwrap();
        write_dump(&s, &path).unwrap();
        let r = read_dump(&path).unwrap();
        assert_eq!(r.channels(), s.channels());
        assert_eq!(r.frames(), s.frames());
        // Payload is f32, so compare at f32 precision.
        for (a, b) in r.data().iter().zip(s.data().iter()) {
            assert_eq!(*a, f64::from(*b as f32));
        }
    }
}
