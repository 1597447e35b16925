//! Closed-form trajectory algebra on linear interpolation paths.
//!
//! Both supervision paths are straight lines in the STFT domain: the
//! mixture-to-target path runs from Y to S, the background-to-target path
//! from B to S. All operations here are exact affine arithmetic in double
//! precision; the teacher state used by the consistency objective is a
//! point on this line, never a model output.

use crate::spectral::Spectrogram;
use crate::{Error, Result};

/// Which linear path the trajectory follows.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum PathKind {
    /// Start at the observed mixture, end at the target.
    MixtureToTarget,
    /// Start at the background/interference, end at the target.
    BackgroundToTarget,
}

/// A forward supervision interval 0 <= t <= r <= 1.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Interval {
    t: f64,
    r: f64,
}

impl Interval {
    pub fn new(t: f64, r: f64) -> Result<Self> {
        if !(t.is_finite() && r.is_finite()) {
            return Err(Error::NonFinite("interval endpoint".into()));
        }
        if !(0.0..=1.0).contains(&t) || !(0.0..=1.0).contains(&r) || t > r {
            return Err(Error::validation(format!(
                "interval needs 0 <= t <= r <= 1, got t={t}, r={r}"
            )));
        }
        Ok(Self { t, r })
    }

    /// Degenerate interval t = r, used by the flow-matching branch.
    pub fn degenerate(t: f64) -> Result<Self> {
        Self::new(t, t)
    }

    pub fn t(&self) -> f64 {
        self.t
    }

    pub fn r(&self) -> f64 {
        self.r
    }

    /// Interval length delta = r - t.
    pub fn delta(&self) -> f64 {
        self.r - self.t
    }
}

/// Endpoints (start, end) of a linear path.
///
/// For `MixtureToTarget` the start is Y; for `BackgroundToTarget` it is B.
/// The end is always the target S.
pub struct Endpoints<'a> {
    pub start: &'a Spectrogram,
    pub end: &'a Spectrogram,
}

impl<'a> Endpoints<'a> {
    pub fn new(start: &'a Spectrogram, end: &'a Spectrogram) -> Result<Self> {
        if !start.same_shape(end) {
            return Err(Error::validation(format!(
                "endpoint shapes differ: ({}, {}) vs ({}, {})",
                start.channels(),
                start.frames(),
                end.channels(),
                end.frames()
            )));
        }
        Ok(Self { start, end })
    }
}

/// State on the path at time `t`: (1-t) start + t end.
///
/// Endpoints are returned bit-exactly at t = 0 and t = 1.
pub fn state_at(_kind: PathKind, ep: &Endpoints, t: f64) -> Result<Spectrogram> {
    if !(0.0..=1.0).contains(&t) {
        return Err(Error::validation(format!("time {t} outside [0, 1]")));
    }
    if t == 0.0 {
        return Ok(ep.start.clone());
    }
    if t == 1.0 {
        return Ok(ep.end.clone());
    }
    let data = ep.start.data() * (1.0 - t) + ep.end.data() * t;
    Spectrogram::from_data(data)
}

/// Constant path velocity: end - start.
pub fn true_velocity(_kind: PathKind, ep: &Endpoints) -> Result<Spectrogram> {
    Spectrogram::from_data(ep.end.data() - ep.start.data())
}

/// Teacher time s = alpha r + (1 - alpha) t inside the interval.
pub fn intermediate_time(iv: &Interval, alpha: f64) -> Result<f64> {
    if !alpha.is_finite() || alpha <= 0.0 || alpha > 1.0 {
        return Err(Error::validation(format!("alpha {alpha} outside (0, 1]")));
    }
    Ok(alpha * iv.r() + (1.0 - alpha) * iv.t())
}

/// Teacher state at the intermediate time, computed in closed form.
pub fn intermediate_state(
    kind: PathKind,
    ep: &Endpoints,
    iv: &Interval,
    alpha: f64,
) -> Result<Spectrogram> {
    let s = intermediate_time(iv, alpha)?;
    state_at(kind, ep, s)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array2;
    use rand::prelude::*;
    use rand_chacha::ChaCha8Rng;

    fn spec_const(c: f64, channels: usize, frames: usize) -> Spectrogram {
        Spectrogram::from_data(Array2::from_elem((channels, frames), c)).unwrap()
    }

    fn spec_random(rng: &mut impl Rng, channels: usize, frames: usize) -> Spectrogram {
        let data = Array2::from_shape_fn((channels, frames), |_| rng.gen_range(-2.0..2.0));
        Spectrogram::from_data(data).unwrap()
    }

    #[test]
    fn endpoints_are_bit_exact() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let y = spec_random(&mut rng, 8, 5);
        let s = spec_random(&mut rng, 8, 5);
        let ep = Endpoints::new(&y, &s).unwrap();
        assert_eq!(state_at(PathKind::MixtureToTarget, &ep, 0.0).unwrap(), y);
        assert_eq!(state_at(PathKind::MixtureToTarget, &ep, 1.0).unwrap(), s);
    }

    #[test]
    fn midpoint_of_constants() {
        let y = spec_const(0.0, 4, 3);
        let s = spec_const(2.0, 4, 3);
        let ep = Endpoints::new(&y, &s).unwrap();
        let mid = state_at(PathKind::MixtureToTarget, &ep, 0.5).unwrap();
        assert!(mid.data().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn velocity_is_difference() {
        let y = spec_const(0.0, 4, 3);
        let s = spec_const(3.0, 4, 3);
        let ep = Endpoints::new(&y, &s).unwrap();
        let v = true_velocity(PathKind::MixtureToTarget, &ep).unwrap();
        assert!(v.data().iter().all(|&x| x == 3.0));

        let ep_same = Endpoints::new(&s, &s).unwrap();
        let z = true_velocity(PathKind::MixtureToTarget, &ep_same).unwrap();
        assert!(z.data().iter().all(|&x| x == 0.0));
    }

    /// Finite-difference oracle: (state(t+h) - state(t)) / h ~= velocity.
    #[test]
    fn velocity_matches_finite_difference() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let y = spec_random(&mut rng, 6, 4);
        let s = spec_random(&mut rng, 6, 4);
        let ep = Endpoints::new(&y, &s).unwrap();
        let v = true_velocity(PathKind::MixtureToTarget, &ep).unwrap();
        let h = 1e-6;
        let t = 0.37;
        let a = state_at(PathKind::MixtureToTarget, &ep, t).unwrap();
        let b = state_at(PathKind::MixtureToTarget, &ep, t + h).unwrap();
        let fd = (b.data() - a.data()) / h;
        for (x, y) in fd.iter().zip(v.data().iter()) {
            assert!((x - y).abs() < 1e-9, "{x} vs {y}");
        }
    }

    #[test]
    fn intermediate_time_cases() {
        let iv = Interval::new(0.2, 0.8).unwrap();
        assert!((intermediate_time(&iv, 1.0).unwrap() - 0.8).abs() < 1e-15);
        assert!((intermediate_time(&iv, 0.5).unwrap() - 0.5).abs() < 1e-15);
        let deg = Interval::degenerate(0.3).unwrap();
        for alpha in [0.1, 0.5, 1.0] {
            assert!((intermediate_time(&deg, alpha).unwrap() - 0.3).abs() < 1e-15);
        }
        assert!(intermediate_time(&iv, 0.0).is_err());
        assert!(intermediate_time(&iv, 1.5).is_err());
    }

    #[test]
    fn intermediate_state_composes() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let y = spec_random(&mut rng, 6, 4);
        let s = spec_random(&mut rng, 6, 4);
        let ep = Endpoints::new(&y, &s).unwrap();
        let iv = Interval::new(0.1, 0.9).unwrap();
        let alpha = 0.4;
        let a = intermediate_state(PathKind::MixtureToTarget, &ep, &iv, alpha).unwrap();
        let st = intermediate_time(&iv, alpha).unwrap();
        let b = state_at(PathKind::MixtureToTarget, &ep, st).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn affinity_property() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let y = spec_random(&mut rng, 6, 4);
        let s = spec_random(&mut rng, 6, 4);
        let ep = Endpoints::new(&y, &s).unwrap();
        for _ in 0..50 {
            let t1: f64 = rng.gen_range(0.0..1.0);
            let t2: f64 = rng.gen_range(0.0..1.0);
            let beta: f64 = rng.gen_range(0.0..1.0);
            let tm = beta * t1 + (1.0 - beta) * t2;
            let lhs = state_at(PathKind::MixtureToTarget, &ep, tm).unwrap();
            let a = state_at(PathKind::MixtureToTarget, &ep, t1).unwrap();
            let b = state_at(PathKind::MixtureToTarget, &ep, t2).unwrap();
            let rhs = a.data() * beta + b.data() * (1.0 - beta);
            for (x, y) in lhs.data().iter().zip(rhs.iter()) {
                assert!((x - y).abs() < 1e-12);
            }
        }
    }

    /// Y constructed as (1 - tau) B + tau S sits exactly on the
    /// background-to-target path at time tau.
    #[test]
    fn mixture_sits_on_background_path() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let b = spec_random(&mut rng, 6, 4);
        let s = spec_random(&mut rng, 6, 4);
        let tau = 0.43;
        let y = Spectrogram::from_data(b.data() * (1.0 - tau) + s.data() * tau).unwrap();
        let ep = Endpoints::new(&b, &s).unwrap();
        let x = state_at(PathKind::BackgroundToTarget, &ep, tau).unwrap();
        assert_eq!(x, y);
    }

    #[test]
    fn shape_mismatch_rejected() {
        let a = spec_const(0.0, 4, 3);
        let b = spec_const(0.0, 4, 5);
        assert!(Endpoints::new(&a, &b).is_err());
    }

    #[test]
    fn interval_validation() {
        assert!(Interval::new(0.5, 0.4).is_err());
        assert!(Interval::new(-0.1, 0.4).is_err());
        assert!(Interval::new(0.1, 1.4).is_err());
        assert!(Interval::new(0.25, 0.25).is_ok());
    }
}
