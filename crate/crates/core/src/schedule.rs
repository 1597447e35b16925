//! Step-ratio annealing and supervision-interval sampling.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::objective::{Branch, IntervalSample};
use crate::trajectory::Interval;
use crate::{Error, Result};

fn logistic(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Sigmoid anneal of the step ratio from 1 down to a floor.
///
/// alpha(e) = alpha_min + (1 - alpha_min) * logistic(-k (p - 1/2)) with
/// p = clamp((e - start) / (end - start), 0, 1). Symmetric in p and
/// saturated at both ends for the default steepness.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct AlphaSchedule {
    pub start_epoch: f64,
    pub end_epoch: f64,
    pub steepness: f64,
    pub alpha_min: f64,
}

impl Default for AlphaSchedule {
    fn default() -> Self {
        Self {
            start_epoch: 5.0,
            end_epoch: 100.0,
            steepness: 15.0,
            alpha_min: 0.1,
        }
    }
}

impl AlphaSchedule {
    pub fn validate(&self) -> Result<()> {
        if self.start_epoch >= self.end_epoch {
            return Err(Error::Config(format!(
                "alpha schedule needs start < end, got {} >= {}",
                self.start_epoch, self.end_epoch
            )));
        }
        if !(0.0 < self.alpha_min && self.alpha_min < 1.0) {
            return Err(Error::Config(format!(
                "alpha_min {} outside (0,1)",
                self.alpha_min
            )));
        }
        if self.steepness <= 0.0 {
            return Err(Error::Config("steepness must be positive".into()));
        }
        Ok(())
    }

    /// Rescales the anneal window onto a different epoch budget, keeping
    /// the same relative shape (used by short desk runs).
    pub fn rescaled(&self, total_epochs: f64, reference_epochs: f64) -> Self {
        let f = total_epochs / reference_epochs;
        Self {
            start_epoch: self.start_epoch * f,
            end_epoch: self.end_epoch * f,
            ..*self
        }
    }
}

/// Step ratio at a (possibly fractional) epoch.
pub fn alpha_at(schedule: &AlphaSchedule, epoch: f64) -> f64 {
    let p = ((epoch - schedule.start_epoch) / (schedule.end_epoch - schedule.start_epoch))
        .clamp(0.0, 1.0);
    schedule.alpha_min
        + (1.0 - schedule.alpha_min) * logistic(-schedule.steepness * (p - 0.5))
}

/// Logit-normal interval sampler with a large-span mixture component.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct TimeSamplerConfig {
    pub mu: f64,
    pub sigma: f64,
    /// Probability of drawing from the large-span subset instead.
    pub large_span_prob: f64,
    pub t_max_large: f64,
    pub r_min_large: f64,
}

impl Default for TimeSamplerConfig {
    fn default() -> Self {
        Self {
            mu: -0.4,
            sigma: 1.0,
            large_span_prob: 0.15,
            t_max_large: 0.15,
            r_min_large: 0.85,
        }
    }
}

impl TimeSamplerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.sigma <= 0.0 {
            return Err(Error::Config("sigma must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.large_span_prob) {
            return Err(Error::Config("large_span_prob outside [0,1]".into()));
        }
        if !(self.t_max_large < self.r_min_large) {
            return Err(Error::Config(format!(
                "need t_max_large < r_min_large, got {} >= {}",
                self.t_max_large, self.r_min_large
            )));
        }
        Ok(())
    }
}

/// One logit-normal draw, strictly inside (0, 1).
pub fn logit_normal_draw(cfg: &TimeSamplerConfig, rng: &mut impl Rng) -> f64 {
    let z: f64 = StandardNormal.sample(rng);
    logistic(cfg.mu + cfg.sigma * z)
}

/// Samples a supervision interval: with probability `large_span_prob` a
/// uniform draw from the large-span region, otherwise the order
/// statistics of two logit-normal draws.
pub fn sample_interval(cfg: &TimeSamplerConfig, rng: &mut impl Rng) -> Interval {
    if rng.gen::<f64>() < cfg.large_span_prob {
        // t in (0, t_max], r in [r_min, 1).
        let t = cfg.t_max_large - rng.gen_range(0.0..cfg.t_max_large);
        let r = rng.gen_range(cfg.r_min_large..1.0);
        return Interval::new(t, r).expect("large-span draw in range");
    }
    loop {
        let a = logit_normal_draw(cfg, rng);
        let b = logit_normal_draw(cfg, rng);
        if a != b {
            let (t, r) = if a < b { (a, b) } else { (b, a) };
            return Interval::new(t, r).expect("ordered draw in range");
        }
    }
}

/// Anchor-branch time: a single logit-normal draw in (0, 1).
pub fn sample_anchor_time(cfg: &TimeSamplerConfig, rng: &mut impl Rng) -> f64 {
    loop {
        let t = logit_normal_draw(cfg, rng);
        if t > 0.0 && t < 1.0 {
            return t;
        }
    }
}

/// Bernoulli branch switch; success lands on the anchor branch.
pub fn sample_branch(rho: f64, rng: &mut impl Rng) -> Branch {
    if rng.gen::<f64>() < rho {
        Branch::Fm
    } else {
        Branch::Mf
    }
}

/// Full per-example assignment: branch, interval, step ratio.
pub fn sample_supervision(
    cfg: &TimeSamplerConfig,
    rho: f64,
    alpha: f64,
    rng: &mut impl Rng,
) -> IntervalSample {
    match sample_branch(rho, rng) {
        Branch::Fm => {
            let t = sample_anchor_time(cfg, rng);
            IntervalSample {
                branch: Branch::Fm,
                interval: Interval::degenerate(t).expect("in range"),
                alpha,
            }
        }
        Branch::Mf => IntervalSample {
            branch: Branch::Mf,
            interval: sample_interval(cfg, rng),
            alpha,
        },
    }
}
