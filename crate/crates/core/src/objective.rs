//! Training losses: per-sample MSE, the adaptively weighted anchor on the
//! degenerate interval, the teacher-student consistency target, and the
//! bounded reweighting that assembles into the decoupled total objective.
//!
//! Both weighting factors are stop-gradient by construction: they are
//! computed from forward values as plain numbers and re-enter the graph
//! as constants, so the gradient of every loss equals the (detached)
//! weight times the gradient of the raw MSE. Nothing in this module
//! differentiates a network output with respect to time, so no
//! Jacobian-vector product ever appears in the computation graph.

use crate::autodiff::{NodeId, Tape};
use crate::nn::{BoundParams, MeanVelocityNet, ParamStore};
use crate::spectral::Spectrogram;
use crate::trajectory::{self, Endpoints, Interval, PathKind};
use crate::{Error, Result};

/// Loss weights and stop-gradient weighting constants.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct ObjectiveConfig {
    /// Adaptive-weight exponent in [0, 1]; 1 recovers the raw MSE.
    pub gamma: f64,
    pub eps_adp: f64,
    /// Saturation constant of the bounded reweighting.
    pub kappa: f64,
    pub eps_bnd: f64,
    pub lambda_fm: f64,
    pub lambda_mf: f64,
    /// Probability of assigning an example to the anchor branch.
    pub rho: f64,
}

impl Default for ObjectiveConfig {
    fn default() -> Self {
        Self {
            gamma: 0.5,
            eps_adp: 1e-3,
            kappa: 1.0,
            eps_bnd: 1e-6,
            lambda_fm: 0.6,
            lambda_mf: 0.4,
            rho: 0.5,
        }
    }
}

impl ObjectiveConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.gamma) {
            return Err(Error::Config(format!("gamma {} outside [0,1]", self.gamma)));
        }
        if self.eps_adp <= 0.0 || self.eps_bnd <= 0.0 {
            return Err(Error::Config("eps constants must be positive".into()));
        }
        if self.kappa <= 0.0 {
            return Err(Error::Config("kappa must be positive".into()));
        }
        if self.lambda_fm <= 0.0 || self.lambda_mf <= 0.0 {
            return Err(Error::Config("branch weights must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.rho) {
            return Err(Error::Config(format!("rho {} outside [0,1]", self.rho)));
        }
        Ok(())
    }
}

/// Which branch supervises an example.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum Branch {
    Fm,
    Mf,
}

/// One sampled supervision assignment: branch, interval, and step ratio.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct IntervalSample {
    pub branch: Branch,
    pub interval: Interval,
    pub alpha: f64,
}

impl IntervalSample {
    /// Teacher time for the consistency branch.
    pub fn teacher_time(&self) -> Result<f64> {
        trajectory::intermediate_time(&self.interval, self.alpha)
    }
}

/// Scalar record of one evaluated loss.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct LossBreakdown {
    pub branch: Branch,
    /// Raw per-sample MSE m(D).
    pub raw_mse: f64,
    /// Weighted loss value (adaptive or bounded).
    pub weighted: f64,
    /// lambda-scaled contribution of this example.
    pub total: f64,
    /// Step ratio used (consistency branch only).
    pub alpha: Option<f64>,
}

/// Supervision triple in the STFT domain: path start, path end (the
/// target), and the enrollment condition.
#[derive(Debug, Clone)]
pub struct SupervisionExample {
    pub start: Spectrogram,
    pub end: Spectrogram,
    pub enroll: Spectrogram,
}

impl SupervisionExample {
    pub fn endpoints(&self) -> Result<Endpoints<'_>> {
        Endpoints::new(&self.start, &self.end)
    }
}

/// m(D): squared Frobenius norm over element count.
pub fn per_sample_mse(d: &Spectrogram) -> f64 {
    let n = d.data().len() as f64;
    d.data().iter().map(|v| v * v).sum::<f64>() / n
}

fn adaptive_weight(m: f64, cfg: &ObjectiveConfig) -> f64 {
    (m + cfg.eps_adp).powf(cfg.gamma - 1.0)
}

fn bounded_weight(m: f64, alpha: f64, cfg: &ObjectiveConfig) -> f64 {
    cfg.kappa / (m + alpha * cfg.kappa + cfg.eps_bnd)
}

/// Adaptively weighted MSE; the weight factor is a detached constant.
pub fn adaptive_weight_loss(d: &Spectrogram, cfg: &ObjectiveConfig) -> f64 {
    let m = per_sample_mse(d);
    adaptive_weight(m, cfg) * m
}

/// Bounded alpha-compensating weighted MSE; weight detached.
pub fn bounded_loss(d: &Spectrogram, alpha: f64, cfg: &ObjectiveConfig) -> f64 {
    let m = per_sample_mse(d);
    bounded_weight(m, alpha, cfg) * m
}

/// Consistency target: alpha v + (1 - alpha) teacher. At alpha = 1 the
/// teacher is ignored and the true velocity is returned bit-exactly.
pub fn alpha_target(v: &Spectrogram, teacher_u: &Spectrogram, alpha: f64) -> Result<Spectrogram> {
    if !v.same_shape(teacher_u) {
        return Err(Error::validation("alpha_target shape mismatch"));
    }
    if !(alpha > 0.0 && alpha <= 1.0) {
        return Err(Error::validation(format!("alpha {alpha} outside (0,1]")));
    }
    if alpha == 1.0 {
        return Ok(v.clone());
    }
    Spectrogram::from_data(v.data() * alpha + teacher_u.data() * (1.0 - alpha))
}

/// Records `l_adp(m)` on the tape given a residual node.
fn adaptive_loss_node(tape: &mut Tape, residual: NodeId, cfg: &ObjectiveConfig) -> (NodeId, f64, f64) {
    let m_node = tape.mean_sq(residual);
    let m = tape.scalar(m_node);
    let w = adaptive_weight(m, cfg);
    (tape.scale(m_node, w), m, w * m)
}

fn bounded_loss_node(
    tape: &mut Tape,
    residual: NodeId,
    alpha: f64,
    cfg: &ObjectiveConfig,
) -> (NodeId, f64, f64) {
    let m_node = tape.mean_sq(residual);
    let m = tape.scalar(m_node);
    let w = bounded_weight(m, alpha, cfg);
    (tape.scale(m_node, w), m, w * m)
}

/// Anchor branch: student evaluated on the degenerate interval (t, t),
/// regressed to the constant path velocity under the adaptive weight.
pub fn fm_branch_loss(
    tape: &mut Tape,
    net: &MeanVelocityNet,
    bound: &BoundParams,
    kind: PathKind,
    ex: &SupervisionExample,
    t: f64,
    cfg: &ObjectiveConfig,
) -> Result<(NodeId, LossBreakdown)> {
    if !(0.0 < t && t < 1.0) {
        return Err(Error::validation(format!("anchor time {t} outside (0,1)")));
    }
    let ep = ex.endpoints()?;
    let z_t = trajectory::state_at(kind, &ep, t)?;
    let v = trajectory::true_velocity(kind, &ep)?;
    let student = net.forward_spec(tape, bound, &z_t, &ex.enroll, t, t)?;
    let v_tokens = tape.constant(v.data().t().to_owned());
    let residual = tape.sub(student, v_tokens);
    let (loss, raw_mse, weighted) = adaptive_loss_node(tape, residual, cfg);
    let total_node = tape.scale(loss, cfg.lambda_fm);
    Ok((
        total_node,
        LossBreakdown {
            branch: Branch::Fm,
            raw_mse,
            weighted,
            total: cfg.lambda_fm * weighted,
            alpha: None,
        },
    ))
}

/// Consistency branch: student over (t, r), teacher evaluated without
/// gradient on the closed-form state at the intermediate time, target
/// blended by alpha, bounded reweighting.
#[allow(clippy::too_many_arguments)]
pub fn mf_branch_loss(
    tape: &mut Tape,
    net: &MeanVelocityNet,
    bound: &BoundParams,
    params: &ParamStore,
    kind: PathKind,
    ex: &SupervisionExample,
    iv: &Interval,
    alpha: f64,
    cfg: &ObjectiveConfig,
) -> Result<(NodeId, LossBreakdown)> {
    if iv.t() >= iv.r() {
        return Err(Error::validation(format!(
            "consistency branch needs t < r, got t={}, r={}",
            iv.t(),
            iv.r()
        )));
    }
    if !(alpha > 0.0 && alpha <= 1.0) {
        return Err(Error::validation(format!("alpha {alpha} outside (0,1]")));
    }
    let ep = ex.endpoints()?;
    let z_t = trajectory::state_at(kind, &ep, iv.t())?;
    let v = trajectory::true_velocity(kind, &ep)?;

    let s_time = trajectory::intermediate_time(iv, alpha)?;
    let z_s = trajectory::intermediate_state(kind, &ep, iv, alpha)?;
    // Teacher runs outside the gradient tape: exact stop-gradient.
    let teacher = net.stop_gradient_eval(params, &z_s, &ex.enroll, s_time, iv.r())?;
    let target = alpha_target(&v, &teacher, alpha)?;

    let student = net.forward_spec(tape, bound, &z_t, &ex.enroll, iv.t(), iv.r())?;
    let target_tokens = tape.constant(target.data().t().to_owned());
    let residual = tape.sub(student, target_tokens);
    let (loss, raw_mse, weighted) = bounded_loss_node(tape, residual, alpha, cfg);
    let total_node = tape.scale(loss, cfg.lambda_mf);
    Ok((
        total_node,
        LossBreakdown {
            branch: Branch::Mf,
            raw_mse,
            weighted,
            total: cfg.lambda_mf * weighted,
            alpha: Some(alpha),
        },
    ))
}

/// Dispatches one example to its assigned branch.
pub fn total_loss(
    tape: &mut Tape,
    net: &MeanVelocityNet,
    bound: &BoundParams,
    params: &ParamStore,
    kind: PathKind,
    ex: &SupervisionExample,
    sampled: &IntervalSample,
    cfg: &ObjectiveConfig,
) -> Result<(NodeId, LossBreakdown)> {
    match sampled.branch {
        Branch::Fm => {
            if sampled.interval.t() != sampled.interval.r() {
                return Err(Error::validation(
                    "anchor branch requires a degenerate interval (t = r)",
                ));
            }
            fm_branch_loss(tape, net, bound, kind, ex, sampled.interval.t(), cfg)
        }
        Branch::Mf => mf_branch_loss(
            tape,
            net,
            bound,
            params,
            kind,
            ex,
            &sampled.interval,
            sampled.alpha,
            cfg,
        ),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{gradient, PredictorConfig};
    use ndarray::Array2;
    use rand::prelude::*;
    use rand_chacha::ChaCha8Rng;

    fn spec_of(data: Array2<f64>) -> Spectrogram {
        Spectrogram::from_data(data).unwrap()
    }

    fn spec_random(rng: &mut impl Rng, channels: usize, frames: usize) -> Spectrogram {
        spec_of(Array2::from_shape_fn((channels, frames), |_| {
            rng.gen_range(-1.0..1.0)
        }))
    }

    fn tiny_net() -> MeanVelocityNet {
        MeanVelocityNet::new(PredictorConfig {
            channels: 8,
            n_blocks: 2,
            n_heads: 2,
            width: 12,
            time_embed_dim: 8,
            mlp_ratio: 2,
            max_prefix_frames: 16,
        })
        .unwrap()
    }

    fn live_params(net: &MeanVelocityNet, seed: u64) -> ParamStore {
        let mut params = net.init_params(seed);
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xABCD);
        *params.get_mut("u.out_proj.w").unwrap() = crate::nn::xavier_init(&mut rng, 12, 8) * 0.3;
        for i in 0..2 {
            *params.get_mut(&format!("u.blk{i}.mod.w")).unwrap() =
                crate::nn::xavier_init(&mut rng, 12, 72) * 0.3;
        }
        params
    }

    fn example(rng: &mut impl Rng) -> SupervisionExample {
        SupervisionExample {
            start: spec_random(rng, 8, 5),
            end: spec_random(rng, 8, 5),
            enroll: spec_random(rng, 8, 3),
        }
    }

    #[test]
    fn per_sample_mse_direct_case() {
        // 2F=2, T=1, D=(3,4): (9+16)/2 = 12.5.
        let d = spec_of(Array2::from_shape_vec((2, 1), vec![3.0, 4.0]).unwrap());
        assert_eq!(per_sample_mse(&d), 12.5);
        let z = Spectrogram::zeros(4, 3);
        assert_eq!(per_sample_mse(&z), 0.0);
    }

    #[test]
    fn per_sample_mse_matches_naive_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let d = spec_random(&mut rng, 6, 9);
        let mut acc = 0.0;
        let mut count = 0usize;
        for v in d.data().iter() {
            acc += v * v;
            count += 1;
        }
        assert!((per_sample_mse(&d) - acc / count as f64).abs() < 1e-15);
    }

    #[test]
    fn adaptive_weight_hand_cases() {
        let cfg = ObjectiveConfig {
            gamma: 0.5,
            eps_adp: 1e-12, // effectively zero for the hand calculation
            ..Default::default()
        };
        // m = 1 -> weight 1, loss 1. m = 4 -> weight 1/2, loss 2.
        let d1 = spec_of(Array2::from_elem((2, 1), 1.0)); // m = 1
        let d4 = spec_of(Array2::from_elem((2, 1), 2.0)); // m = 4
        assert!((adaptive_weight_loss(&d1, &cfg) - 1.0).abs() < 1e-6);
        assert!((adaptive_weight_loss(&d4, &cfg) - 2.0).abs() < 1e-6);

        // gamma = 1 reduces to m exactly.
        let cfg1 = ObjectiveConfig {
            gamma: 1.0,
            ..Default::default()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let d = spec_random(&mut rng, 4, 3);
        assert!((adaptive_weight_loss(&d, &cfg1) - per_sample_mse(&d)).abs() < 1e-15);

        // Zero residual -> zero loss for any constants.
        let z = Spectrogram::zeros(4, 3);
        assert_eq!(adaptive_weight_loss(&z, &cfg), 0.0);
    }

    #[test]
    fn bounded_loss_hand_case_and_monotonicity() {
        let cfg = ObjectiveConfig {
            kappa: 1.0,
            eps_bnd: 1e-15,
            ..Default::default()
        };
        // m=1, alpha=0.5, kappa=1: weight = 1/(1+0.5) = 2/3.
        let d = spec_of(Array2::from_elem((2, 1), 1.0));
        assert!((bounded_loss(&d, 0.5, &cfg) - 2.0 / 3.0).abs() < 1e-9);
        let z = Spectrogram::zeros(2, 1);
        assert_eq!(bounded_loss(&z, 1.0, &cfg), 0.0);

        // Weight nonincreasing in alpha for fixed D.
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let d = spec_random(&mut rng, 4, 5);
        let mut last = f64::INFINITY;
        for i in 1..=20 {
            let alpha = i as f64 / 20.0;
            let w = bounded_loss(&d, alpha, &cfg) / per_sample_mse(&d);
            assert!(w <= last + 1e-12, "weight increased at alpha={alpha}");
            last = w;
        }

        // Weight stays bounded by kappa/(alpha kappa + eps) even as m -> 0.
        let tiny = spec_of(Array2::from_elem((2, 1), 1e-12));
        let alpha = 0.25;
        let w = bounded_loss(&tiny, alpha, &cfg) / per_sample_mse(&tiny);
        assert!(w <= cfg.kappa / (alpha * cfg.kappa + cfg.eps_bnd) + 1e-9);
    }

    #[test]
    fn alpha_target_cases() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let v = spec_random(&mut rng, 4, 3);
        let teacher = spec_random(&mut rng, 4, 3);

        // alpha = 1: exactly v, teacher ignored.
        let t1 = alpha_target(&v, &teacher, 1.0).unwrap();
        assert_eq!(t1, v);

        // teacher == v: fixed point for all alpha.
        for alpha in [0.25, 0.5, 0.75] {
            let t = alpha_target(&v, &v, alpha).unwrap();
            for (a, b) in t.data().iter().zip(v.data().iter()) {
                assert!((a - b).abs() < 1e-15);
            }
        }

        // v = 0, teacher = 2, alpha = 0.25 -> constant 1.5.
        let z = Spectrogram::zeros(4, 3);
        let two = spec_of(Array2::from_elem((4, 3), 2.0));
        let t = alpha_target(&z, &two, 0.25).unwrap();
        assert!(t.data().iter().all(|&x| (x - 1.5).abs() < 1e-15));
    }

    #[test]
    fn fm_loss_zero_predictor_hand_value() {
        // Zero-output net, start = 0, end = c: residual is -c everywhere,
        // m = c^2, loss = lambda_fm * w(c^2) * c^2.
        let net = tiny_net();
        let params = net.init_params(0); // zero output projection
        let cfg = ObjectiveConfig::default();
        let c = 0.8;
        let ex = SupervisionExample {
            start: Spectrogram::zeros(8, 5),
            end: spec_of(Array2::from_elem((8, 5), c)),
            enroll: Spectrogram::zeros(8, 3),
        };
        let mut tape = Tape::new();
        let bound = params.bind(&mut tape, true);
        let (node, bd) = fm_branch_loss(
            &mut tape,
            &net,
            &bound,
            PathKind::MixtureToTarget,
            &ex,
            0.5,
            &cfg,
        )
        .unwrap();
        let m = c * c;
        let expected_weighted = (m + cfg.eps_adp).powf(cfg.gamma - 1.0) * m;
        assert!((bd.raw_mse - m).abs() < 1e-12);
        assert!((bd.weighted - expected_weighted).abs() < 1e-12);
        assert!((bd.total - cfg.lambda_fm * expected_weighted).abs() < 1e-12);
        assert!((tape.scalar(node) - bd.total).abs() < 1e-12);
    }

    /// With the true velocity substituted for the network the residual is
    /// zero on both branches.
    #[test]
    fn oracle_predictor_gives_zero_loss() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let ex = example(&mut rng);
        let ep = ex.endpoints().unwrap();
        let v = trajectory::true_velocity(PathKind::MixtureToTarget, &ep).unwrap();
        let cfg = ObjectiveConfig::default();

        // Anchor branch with an oracle "network": residual 0.
        let d = spec_of(v.data() - v.data());
        assert_eq!(adaptive_weight_loss(&d, &cfg), 0.0);

        // Consistency branch: teacher = v means the target is v for all
        // alpha, so an oracle student has zero residual.
        let target = alpha_target(&v, &v, 0.3).unwrap();
        let d2 = spec_of(target.data() - v.data());
        assert!(bounded_loss(&d2, 0.3, &cfg) < 1e-28);
    }

    /// At alpha = 1 the consistency residual equals the anchor residual
    /// evaluated at the same (z_t, t, r).
    #[test]
    fn alpha_one_degenerates_to_anchor_residual() {
        let net = tiny_net();
        let params = live_params(&net, 6);
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let ex = example(&mut rng);
        let ep = ex.endpoints().unwrap();
        let kind = PathKind::MixtureToTarget;
        let (t, r) = (0.2, 0.7);
        let iv = Interval::new(t, r).unwrap();

        let z_t = trajectory::state_at(kind, &ep, t).unwrap();
        let v = trajectory::true_velocity(kind, &ep).unwrap();
        let student = net.mean_velocity(&params, &z_t, &ex.enroll, t, r).unwrap();

        // Target at alpha=1 is v bit-exactly.
        let teacher = net
            .stop_gradient_eval(&params, &z_t, &ex.enroll, t, r)
            .unwrap();
        let target = alpha_target(&v, &teacher, 1.0).unwrap();
        assert_eq!(target, v);

        let d_mf = spec_of(student.data() - target.data());
        let d_fm = spec_of(student.data() - v.data());
        assert_eq!(d_mf, d_fm);

        // The branch losses differ only through the weighting. Check the
        // recorded raw MSE agrees through the tape path as well.
        let cfg = ObjectiveConfig::default();
        let mut tape = Tape::new();
        let bound = params.bind(&mut tape, true);
        let (_, bd) = mf_branch_loss(
            &mut tape, &net, &bound, &params, kind, &ex, &iv, 1.0, &cfg,
        )
        .unwrap();
        assert!((bd.raw_mse - per_sample_mse(&d_mf)).abs() < 1e-12);
    }

    /// The weighting factors are detached: the gradient of the weighted
    /// loss equals weight times the gradient of the raw MSE.
    #[test]
    fn gradient_weight_separation() {
        let net = tiny_net();
        let params = live_params(&net, 8);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let ex = example(&mut rng);
        let kind = PathKind::MixtureToTarget;
        let cfg = ObjectiveConfig::default();
        let t = 0.4;

        let (_, g_weighted) = gradient(&params, |tape, bound| {
            let (node, _) = fm_branch_loss(tape, &net, bound, kind, &ex, t, &cfg)?;
            Ok(node)
        })
        .unwrap();

        // Raw MSE gradient and the weight recomputed separately.
        let ep = ex.endpoints().unwrap();
        let z_t = trajectory::state_at(kind, &ep, t).unwrap();
        let v = trajectory::true_velocity(kind, &ep).unwrap();
        let mut raw = 0.0;
        let (_, g_raw) = gradient(&params, |tape, bound| {
            let student = net.forward_spec(tape, bound, &z_t, &ex.enroll, t, t)?;
            let v_tokens = tape.constant(v.data().t().to_owned());
            let residual = tape.sub(student, v_tokens);
            let m = tape.mean_sq(residual);
            raw = tape.scalar(m);
            Ok(m)
        })
        .unwrap();
        let w = adaptive_weight(raw, &cfg) * cfg.lambda_fm;

        for (name, gw) in g_weighted.iter() {
            let gr = g_raw.get(name).unwrap();
            for (a, b) in gw.iter().zip(gr.iter()) {
                assert!((a - b * w).abs() < 1e-12, "{name}: {a} vs {}", b * w);
            }
        }
    }

    /// Stop-gradient teacher vs a frozen parameter copy: identical
    /// gradients, and the teacher term alone contributes none.
    #[test]
    fn frozen_copy_equivalence() {
        let net = tiny_net();
        let params = live_params(&net, 10);
        let frozen = params.clone();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let ex = example(&mut rng);
        let kind = PathKind::MixtureToTarget;
        let cfg = ObjectiveConfig::default();
        let iv = Interval::new(0.1, 0.8).unwrap();
        let alpha = 0.4;

        let (l1, g1) = gradient(&params, |tape, bound| {
            let (node, _) =
                mf_branch_loss(tape, &net, bound, &params, kind, &ex, &iv, alpha, &cfg)?;
            Ok(node)
        })
        .unwrap();
        // Teacher evaluated from an explicitly separate frozen copy.
        let (l2, g2) = gradient(&params, |tape, bound| {
            let (node, _) =
                mf_branch_loss(tape, &net, bound, &frozen, kind, &ex, &iv, alpha, &cfg)?;
            Ok(node)
        })
        .unwrap();
        assert_eq!(l1, l2);
        for (name, a) in g1.iter() {
            let b = g2.get(name).unwrap();
            for (x, y) in a.iter().zip(b.iter()) {
                assert!((x - y).abs() <= 1e-12);
            }
        }

        // Gradient of (teacher output * constant) w.r.t. params: exactly zero,
        // since the teacher value enters as a constant.
        let ep = ex.endpoints().unwrap();
        let s_time = trajectory::intermediate_time(&iv, alpha).unwrap();
        let z_s = trajectory::intermediate_state(kind, &ep, &iv, alpha).unwrap();
        let teacher = net
            .stop_gradient_eval(&params, &z_s, &ex.enroll, s_time, iv.r())
            .unwrap();
        let (_, g3) = gradient(&params, |tape, _| {
            let t_node = tape.constant(teacher.data().t().to_owned());
            let scaled = tape.scale(t_node, 3.0);
            Ok(tape.mean_sq(scaled))
        })
        .unwrap();
        for (name, g) in g3.iter() {
            assert!(g.iter().all(|&v| v == 0.0), "{name} leaked gradient");
        }
    }

    #[test]
    fn total_loss_dispatch_and_validation() {
        let net = tiny_net();
        let params = live_params(&net, 12);
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let ex = example(&mut rng);
        let cfg = ObjectiveConfig::default();
        let kind = PathKind::MixtureToTarget;

        let fm = IntervalSample {
            branch: Branch::Fm,
            interval: Interval::degenerate(0.5).unwrap(),
            alpha: 1.0,
        };
        let mut tape = Tape::new();
        let bound = params.bind(&mut tape, true);
        let (_, bd) = total_loss(&mut tape, &net, &bound, &params, kind, &ex, &fm, &cfg).unwrap();
        assert_eq!(bd.branch, Branch::Fm);

        // FM with a non-degenerate interval is rejected.
        let bad = IntervalSample {
            branch: Branch::Fm,
            interval: Interval::new(0.2, 0.6).unwrap(),
            alpha: 1.0,
        };
        let mut tape = Tape::new();
        let bound = params.bind(&mut tape, true);
        assert!(total_loss(&mut tape, &net, &bound, &params, kind, &ex, &bad, &cfg).is_err());

        // MF with a degenerate interval is rejected.
        let bad2 = IntervalSample {
            branch: Branch::Mf,
            interval: Interval::degenerate(0.4).unwrap(),
            alpha: 0.5,
        };
        let mut tape = Tape::new();
        let bound = params.bind(&mut tape, true);
        assert!(total_loss(&mut tape, &net, &bound, &params, kind, &ex, &bad2, &cfg).is_err());
    }

    #[test]
    fn losses_nonnegative_and_zero_at_optimum() {
        let cfg = ObjectiveConfig::default();
        let mut rng = ChaCha8Rng::seed_from_u64(14);
        for _ in 0..20 {
            let d = spec_random(&mut rng, 4, 6);
            assert!(adaptive_weight_loss(&d, &cfg) > 0.0);
            assert!(bounded_loss(&d, 0.5, &cfg) > 0.0);
        }
        let z = Spectrogram::zeros(4, 6);
        assert_eq!(adaptive_weight_loss(&z, &cfg), 0.0);
        assert_eq!(bounded_loss(&z, 0.5, &cfg), 0.0);
    }
}
