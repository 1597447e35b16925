//! Training loops: the branch-switched objective with per-iteration
//! step-ratio annealing, decoupled-weight-decay optimization with warmup,
//! cosine decay and gradient clipping, plus the mixing-ratio regressor's
//! regression loop. Single-worker runs are bit-reproducible; every piece
//! of randomness is derived from (seed, epoch, step, slot) counters, so a
//! resumed run replays the exact trace of an uninterrupted one.

use std::io::Write as _;
use std::path::{Path, PathBuf};

use ndarray::Array2;
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::Tape;
use crate::nn::{checkpoint, gradient, MeanVelocityNet, MixRatioNet, ParamStore};
use crate::objective::{
    total_loss, Branch, LossBreakdown, ObjectiveConfig, SupervisionExample,
};
use crate::schedule::{alpha_at, sample_supervision, AlphaSchedule, TimeSamplerConfig};
use crate::spectral::{stft, StftConfig};
use crate::synth::MixtureExample;
use crate::trajectory::PathKind;
use crate::{Error, Result};

/// Everything the main training loop needs.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub lr_init: f64,
    pub warmup_steps: usize,
    pub clip_norm: f64,
    pub batch_size: usize,
    pub grad_accum_steps: usize,
    pub seed: u64,
    /// Optimizer updates in the whole run; 0 = derived from the dataset.
    pub total_steps: usize,
    pub objective: ObjectiveConfig,
    pub schedule: AlphaSchedule,
    pub sampler: TimeSamplerConfig,
    pub path_kind: PathKind,
    pub stft: StftConfig,
    /// Checkpoint cadence in epochs; 0 = final checkpoint only.
    pub checkpoint_every_epochs: usize,
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 || self.grad_accum_steps == 0 {
            return Err(Error::Config("counts must be positive".into()));
        }
        if self.clip_norm <= 0.0 {
            return Err(Error::Config("clip_norm must be positive".into()));
        }
        if self.lr_init <= 0.0 {
            return Err(Error::Config("lr_init must be positive".into()));
        }
        self.objective.validate()?;
        self.schedule.validate()?;
        self.sampler.validate()?;
        self.stft.validate()
    }
}

/// Learning rate at an optimizer step: linear ramp to `lr_init` over
/// `warmup_steps`, then cosine decay to zero at `total_steps`.
/// Continuous at the junction.
pub fn lr_at(cfg: &TrainConfig, step: usize) -> f64 {
    let total = cfg.total_steps.max(cfg.warmup_steps + 1);
    if step >= total {
        return 0.0;
    }
    if cfg.warmup_steps > 0 && step < cfg.warmup_steps {
        return cfg.lr_init * step as f64 / cfg.warmup_steps as f64;
    }
    let progress = (step - cfg.warmup_steps) as f64 / (total - cfg.warmup_steps) as f64;
    cfg.lr_init * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos())
}

/// Decoupled-weight-decay adaptive-moment optimizer.
#[derive(Debug, Clone)]
pub struct AdamW {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    m: ParamStore,
    v: ParamStore,
    steps: u64,
}

impl AdamW {
    pub fn new(like: &ParamStore) -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
            m: like.zeros_like(),
            v: like.zeros_like(),
            steps: 0,
        }
    }

    pub fn steps(&self) -> u64 {
        self.steps
    }

    pub fn step(&mut self, params: &mut ParamStore, grads: &ParamStore, lr: f64) {
        self.steps += 1;
        let bc1 = 1.0 - self.beta1.powi(self.steps as i32);
        let bc2 = 1.0 - self.beta2.powi(self.steps as i32);
        for ((name, p), (gname, g)) in params.iter_mut().zip(grads.iter()) {
            debug_assert_eq!(name, gname);
            let m = self.m.get_mut(name).expect("moment m");
            let v = self.v.get_mut(name).expect("moment v");
            for ((pv, gv), (mv, vv)) in p
                .iter_mut()
                .zip(g.iter())
                .zip(m.iter_mut().zip(v.iter_mut()))
            {
                *mv = self.beta1 * *mv + (1.0 - self.beta1) * gv;
                *vv = self.beta2 * *vv + (1.0 - self.beta2) * gv * gv;
                let m_hat = *mv / bc1;
                let v_hat = *vv / bc2;
                *pv -= lr * (m_hat / (v_hat.sqrt() + self.eps) + self.weight_decay * *pv);
            }
        }
    }
}

/// Clips the gradient to a maximum global norm, preserving direction.
/// Returns the pre-clip norm.
pub fn clip_global_norm(grads: &mut ParamStore, max_norm: f64) -> f64 {
    let norm = grads.global_norm();
    if norm > max_norm && norm > 0.0 {
        grads.scale_in_place(max_norm / norm);
    }
    norm
}

/// One telemetry record per micro-step and branch.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: u64,
    pub micro: u64,
    pub branch: Branch,
    pub alpha: f64,
    pub raw_mse: f64,
    pub weighted: f64,
    pub total: f64,
    pub count: usize,
}

/// Per-epoch metrics recorded in the run manifest.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub mean_loss: f64,
    pub fm_fraction: f64,
    pub alpha_end: f64,
    pub skipped: u64,
    pub lr_end: f64,
}

/// Append-only record of a run: config snapshot, seed, code version,
/// per-epoch metrics, checkpoint references with content hashes.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunManifest {
    pub code_version: String,
    pub seed: u64,
    pub config: serde_json::Value,
    pub epochs: Vec<EpochMetrics>,
    pub checkpoints: Vec<CheckpointRef>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CheckpointRef {
    pub path: String,
    pub sha256: String,
    pub after_epoch: usize,
    pub optimizer_steps: u64,
}

impl RunManifest {
    fn new(seed: u64, config: serde_json::Value) -> Self {
        Self {
            code_version: env!("CARGO_PKG_VERSION").to_string(),
            seed,
            config,
            epochs: Vec::new(),
            checkpoints: Vec::new(),
        }
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, serde_json::to_string_pretty(self)?)?;
        Ok(())
    }
}

/// Where a run writes its artifacts. All optional: in-memory training for
/// tests passes `None` everywhere.
#[derive(Debug, Clone, Default)]
pub struct RunPaths {
    pub out_dir: Option<PathBuf>,
    pub telemetry: Option<PathBuf>,
}

pub struct Telemetry {
    file: Option<std::io::BufWriter<std::fs::File>>,
    pub records: Vec<StepRecord>,
    keep_in_memory: bool,
}

impl Telemetry {
    pub fn new(path: Option<&Path>, keep_in_memory: bool) -> Result<Self> {
        let file = match path {
            Some(p) => Some(std::io::BufWriter::new(std::fs::File::create(p)?)),
            None => None,
        };
        Ok(Self {
            file,
            records: Vec::new(),
            keep_in_memory,
        })
    }

    pub fn emit(&mut self, rec: StepRecord) -> Result<()> {
        if let Some(f) = &mut self.file {
            serde_json::to_writer(&mut *f, &rec)?;
            f.write_all(b"\n")?;
        }
        if self.keep_in_memory {
            self.records.push(rec);
        }
        Ok(())
    }

    pub fn flush(&mut self) -> Result<()> {
        if let Some(f) = &mut self.file {
            f.flush()?;
        }
        Ok(())
    }
}

/// Mutable training state threaded through steps.
pub struct TrainState {
    pub params: ParamStore,
    pub opt: AdamW,
    accum: ParamStore,
    accum_examples: usize,
    accum_micro: usize,
    /// Optimizer updates applied so far.
    pub updates: u64,
    /// Micro-batches processed so far.
    pub micro_step: u64,
    pub skipped: u64,
}

impl TrainState {
    pub fn new(params: ParamStore) -> Self {
        let accum = params.zeros_like();
        let opt = AdamW::new(&params);
        Self {
            params,
            opt,
            accum,
            accum_examples: 0,
            accum_micro: 0,
            updates: 0,
            micro_step: 0,
            skipped: 0,
        }
    }
}

/// Converts a paired example into the supervision triple for a path kind.
pub fn supervision_from(
    ex: &MixtureExample,
    stft_cfg: &StftConfig,
    kind: PathKind,
) -> Result<SupervisionExample> {
    let end = stft(&ex.target, stft_cfg)?;
    let start = match kind {
        PathKind::MixtureToTarget => stft(&ex.mixture, stft_cfg)?,
        PathKind::BackgroundToTarget => stft(&ex.background, stft_cfg)?,
    };
    let enroll = stft(&ex.enroll, stft_cfg)?;
    Ok(SupervisionExample { start, end, enroll })
}

fn supervision_rng(seed: u64, micro_step: u64, slot: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x7261_6e64);
    rng.set_stream((micro_step << 12) | slot as u64);
    rng
}

/// Processes one micro-batch: per-example branch assignment, loss and
/// gradient accumulation, and an optimizer update once
/// `grad_accum_steps` micro-batches have accumulated.
///
/// A non-finite loss or gradient rejects the example with a diagnostic
/// and bumps the skip counter; the run continues.
pub fn train_step(
    state: &mut TrainState,
    net: &MeanVelocityNet,
    cfg: &TrainConfig,
    batch: &[&SupervisionExample],
    alpha: f64,
    telemetry: &mut Telemetry,
) -> Result<Vec<LossBreakdown>> {
    if batch.is_empty() {
        return Err(Error::validation("empty batch"));
    }
    let mut breakdowns = Vec::with_capacity(batch.len());
    for (slot, ex) in batch.iter().enumerate() {
        let mut rng = supervision_rng(cfg.seed, state.micro_step, slot);
        let sampled = sample_supervision(&cfg.sampler, cfg.objective.rho, alpha, &mut rng);
        let result = gradient(&state.params, |tape: &mut Tape, bound| {
            let (node, bd) = total_loss(
                tape,
                net,
                bound,
                &state.params,
                cfg.path_kind,
                ex,
                &sampled,
                &cfg.objective,
            )?;
            breakdowns.push(bd);
            Ok(node)
        });
        match result {
            Ok((_, grads)) if grads.all_finite() => {
                state.accum.add_scaled(&grads, 1.0);
                state.accum_examples += 1;
            }
            Ok(_) => {
                breakdowns.pop();
                state.skipped += 1;
                log::error!(
                    "non-finite gradient at micro {} slot {slot} (alpha {alpha}, interval {:?}); skipping",
                    state.micro_step,
                    sampled.interval
                );
            }
            Err(Error::NonFinite(what)) => {
                state.skipped += 1;
                log::error!(
                    "non-finite loss ({what}) at micro {} slot {slot} (alpha {alpha}, interval {:?}); skipping",
                    state.micro_step,
                    sampled.interval
                );
            }
            Err(e) => return Err(e),
        }
    }

    // Telemetry: one record per branch present in this micro-batch.
    for branch in [Branch::Fm, Branch::Mf] {
        let of_branch: Vec<&LossBreakdown> =
            breakdowns.iter().filter(|b| b.branch == branch).collect();
        if of_branch.is_empty() {
            continue;
        }
        let n = of_branch.len() as f64;
        telemetry.emit(StepRecord {
            step: state.updates,
            micro: state.micro_step,
            branch,
            alpha,
            raw_mse: of_branch.iter().map(|b| b.raw_mse).sum::<f64>() / n,
            weighted: of_branch.iter().map(|b| b.weighted).sum::<f64>() / n,
            total: of_branch.iter().map(|b| b.total).sum::<f64>() / n,
            count: of_branch.len(),
        })?;
    }

    state.micro_step += 1;
    state.accum_micro += 1;
    if state.accum_micro >= cfg.grad_accum_steps {
        if state.accum_examples > 0 {
            let mut grads = state.accum.clone();
            grads.scale_in_place(1.0 / state.accum_examples as f64);
            clip_global_norm(&mut grads, cfg.clip_norm);
            let lr = lr_at(cfg, state.updates as usize);
            self_update(state, &grads, lr);
        }
        state.accum = state.params.zeros_like();
        state.accum_examples = 0;
        state.accum_micro = 0;
        state.updates += 1;
    }
    Ok(breakdowns)
}

fn self_update(state: &mut TrainState, grads: &ParamStore, lr: f64) {
    let mut params = std::mem::take(&mut state.params);
    state.opt.step(&mut params, grads, lr);
    state.params = params;
}

/// Result of a training run.
pub struct TrainResult {
    pub params: ParamStore,
    pub manifest: RunManifest,
    /// In-memory telemetry (always kept; files are optional).
    pub records: Vec<StepRecord>,
}

/// Serializes params + optimizer state + counters into one container.
pub fn save_train_state(state: &TrainState, after_epoch: usize, path: impl AsRef<Path>) -> Result<()> {
    let mut combined = ParamStore::new();
    for (name, value) in state.params.iter() {
        combined.insert(name.to_string(), value.clone());
    }
    for (name, value) in state.opt.m.iter() {
        combined.insert(format!("opt.m.{name}"), value.clone());
    }
    for (name, value) in state.opt.v.iter() {
        combined.insert(format!("opt.v.{name}"), value.clone());
    }
    let counters = Array2::from_shape_vec(
        (1, 5),
        vec![
            state.opt.steps as f64,
            state.updates as f64,
            state.micro_step as f64,
            state.skipped as f64,
            after_epoch as f64,
        ],
    )
    .expect("shape");
    combined.insert("meta.counters", counters);
    checkpoint::save(&combined, path)
}

/// Restores a [`TrainState`] and the epoch to resume from.
pub fn load_train_state(path: impl AsRef<Path>) -> Result<(TrainState, usize)> {
    let combined = checkpoint::load(path)?;
    let mut params = ParamStore::new();
    let mut m = ParamStore::new();
    let mut v = ParamStore::new();
    let mut counters: Option<Vec<f64>> = None;
    for (name, value) in combined.iter() {
        if let Some(rest) = name.strip_prefix("opt.m.") {
            m.insert(rest.to_string(), value.clone());
        } else if let Some(rest) = name.strip_prefix("opt.v.") {
            v.insert(rest.to_string(), value.clone());
        } else if name == "meta.counters" {
            counters = Some(value.iter().cloned().collect());
        } else {
            params.insert(name.to_string(), value.clone());
        }
    }
    let counters = counters.ok_or_else(|| Error::Checkpoint("missing meta.counters".into()))?;
    if counters.len() != 5 {
        return Err(Error::Checkpoint("bad counters length".into()));
    }
    let mut state = TrainState::new(params);
    state.opt.m = m;
    state.opt.v = v;
    state.opt.steps = counters[0] as u64;
    state.updates = counters[1] as u64;
    state.micro_step = counters[2] as u64;
    state.skipped = counters[3] as u64;
    let after_epoch = counters[4] as usize;
    Ok((state, after_epoch))
}

/// Full training run over in-memory examples. `resume_from` restores a
/// state checkpoint and continues after its recorded epoch, reproducing
/// the uninterrupted run's trace.
pub fn train(
    cfg: &TrainConfig,
    net: &MeanVelocityNet,
    dataset: &[MixtureExample],
    paths: &RunPaths,
    resume_from: Option<&Path>,
) -> Result<TrainResult> {
    cfg.validate()?;
    if dataset.is_empty() {
        return Err(Error::validation("empty dataset"));
    }
    // Precompute the supervision spectra once.
    let examples: Vec<SupervisionExample> = dataset
        .iter()
        .map(|ex| supervision_from(ex, &cfg.stft, cfg.path_kind))
        .collect::<Result<_>>()?;

    let micros_per_epoch = examples.len().div_ceil(cfg.batch_size);
    let updates_per_epoch = micros_per_epoch.div_ceil(cfg.grad_accum_steps);
    let mut cfg = cfg.clone();
    if cfg.total_steps == 0 {
        cfg.total_steps = cfg.epochs * updates_per_epoch;
    }

    let (mut state, start_epoch) = match resume_from {
        Some(p) => {
            let (state, after_epoch) = load_train_state(p)?;
            (state, after_epoch + 1)
        }
        None => (TrainState::new(net.init_params(cfg.seed)), 0),
    };

    let mut telemetry = Telemetry::new(paths.telemetry.as_deref(), true)?;
    let mut manifest = RunManifest::new(cfg.seed, serde_json::to_value(&cfg)?);
    if let Some(dir) = &paths.out_dir {
        std::fs::create_dir_all(dir)?;
    }

    for epoch in start_epoch..cfg.epochs {
        let mut order: Vec<usize> = (0..examples.len()).collect();
        let mut shuffle_rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5975_66fe);
        shuffle_rng.set_stream(epoch as u64);
        order.shuffle(&mut shuffle_rng);

        let mut epoch_loss = 0.0;
        let mut epoch_count = 0usize;
        let mut fm_count = 0usize;
        let skipped_before = state.skipped;
        let mut alpha_last = 1.0;
        for (micro, chunk_ids) in order.chunks(cfg.batch_size).enumerate() {
            let frac_epoch = epoch as f64 + micro as f64 / micros_per_epoch as f64;
            let alpha = alpha_at(&cfg.schedule, frac_epoch);
            alpha_last = alpha;
            let batch: Vec<&SupervisionExample> =
                chunk_ids.iter().map(|&i| &examples[i]).collect();
            let bds = train_step(&mut state, net, &cfg, &batch, alpha, &mut telemetry)?;
            for bd in &bds {
                epoch_loss += bd.total;
                epoch_count += 1;
                if bd.branch == Branch::Fm {
                    fm_count += 1;
                }
            }
        }
        telemetry.flush()?;
        let metrics = EpochMetrics {
            epoch,
            mean_loss: epoch_loss / epoch_count.max(1) as f64,
            fm_fraction: fm_count as f64 / epoch_count.max(1) as f64,
            alpha_end: alpha_last,
            skipped: state.skipped - skipped_before,
            lr_end: lr_at(&cfg, state.updates.saturating_sub(1) as usize),
        };
        log::info!(
            "epoch {} loss {:.6} fm {:.2} alpha {:.3} lr {:.3e}",
            metrics.epoch,
            metrics.mean_loss,
            metrics.fm_fraction,
            metrics.alpha_end,
            metrics.lr_end
        );
        manifest.epochs.push(metrics);

        let want_checkpoint = cfg.checkpoint_every_epochs > 0
            && (epoch + 1) % cfg.checkpoint_every_epochs == 0
            || epoch + 1 == cfg.epochs;
        if want_checkpoint {
            if let Some(dir) = &paths.out_dir {
                let path = dir.join(format!("state_epoch{:04}.ckpt", epoch));
                save_train_state(&state, epoch, &path)?;
                manifest.checkpoints.push(CheckpointRef {
                    path: path.display().to_string(),
                    sha256: checkpoint::file_hash(&path)?,
                    after_epoch: epoch,
                    optimizer_steps: state.opt.steps(),
                });
                manifest.save(dir.join("manifest.json"))?;
            }
        }
    }
    if let Some(dir) = &paths.out_dir {
        checkpoint::save(&state.params, dir.join("params.ckpt"))?;
        manifest.save(dir.join("manifest.json"))?;
    }
    Ok(TrainResult {
        params: state.params,
        manifest,
        records: telemetry.records,
    })
}

/// Mixing-ratio regressor training settings.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MrTrainConfig {
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub seed: u64,
    /// Apply random time/frequency masking during training.
    pub augment: bool,
}

impl Default for MrTrainConfig {
    fn default() -> Self {
        Self {
            epochs: 12,
            lr: 2e-3,
            batch_size: 16,
            seed: 7,
            augment: true,
        }
    }
}

/// Trains the regressor on squared error against the known ratios and
/// reports the final held-out mean absolute error.
pub fn train_mr(
    cfg: &MrTrainConfig,
    net: &MixRatioNet,
    train_set: &[MixtureExample],
    val_set: &[MixtureExample],
) -> Result<(ParamStore, f64)> {
    if train_set.is_empty() {
        return Err(Error::validation("empty training set"));
    }
    // Tokens are fixed per example; masking perturbs a per-use copy.
    let train_tokens: Vec<(Array2<f64>, Array2<f64>, f64)> = train_set
        .iter()
        .map(|ex| {
            Ok((
                net.tokens_for(&ex.mixture)?,
                net.tokens_for(&ex.enroll)?,
                ex.tau_star,
            ))
        })
        .collect::<Result<_>>()?;

    let mut params = net.init_params(cfg.seed);
    let mut opt = AdamW::new(&params);
    let mut micro: u64 = 0;
    for epoch in 0..cfg.epochs {
        let mut order: Vec<usize> = (0..train_tokens.len()).collect();
        let mut shuffle_rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x6d72_7368);
        shuffle_rng.set_stream(epoch as u64);
        order.shuffle(&mut shuffle_rng);

        for batch in order.chunks(cfg.batch_size) {
            let mut accum = params.zeros_like();
            let mut used = 0usize;
            for (slot, &idx) in batch.iter().enumerate() {
                let (y_tokens, e_tokens, tau_star) = &train_tokens[idx];
                let (mut y_tokens, mut e_tokens) = (y_tokens.clone(), e_tokens.clone());
                if cfg.augment {
                    let mut rng = supervision_rng(cfg.seed ^ 0x6d61_736b, micro, slot);
                    net.apply_mask(&mut y_tokens, &mut rng);
                    net.apply_mask(&mut e_tokens, &mut rng);
                }
                let result = gradient(&params, |tape, bound| {
                    let y_id = tape.constant(y_tokens.clone());
                    let e_id = tape.constant(e_tokens.clone());
                    let tau_hat = net.forward_on_tape(tape, bound, y_id, e_id);
                    let target = tape.scalar_constant(*tau_star);
                    let resid = tape.sub(tau_hat, target);
                    Ok(tape.mean_sq(resid))
                });
                match result {
                    Ok((_, grads)) if grads.all_finite() => {
                        accum.add_scaled(&grads, 1.0);
                        used += 1;
                    }
                    Ok(_) | Err(Error::NonFinite(_)) => {
                        log::error!("non-finite mr loss at micro {micro} slot {slot}; skipping");
                    }
                    Err(e) => return Err(e),
                }
            }
            if used > 0 {
                accum.scale_in_place(1.0 / used as f64);
                clip_global_norm(&mut accum, 5.0);
                opt.step(&mut params, &accum, cfg.lr);
            }
            micro += 1;
        }
    }

    let mae = mr_validation_mae(net, &params, val_set)?;
    Ok((params, mae))
}

/// Mean absolute error of the regressor on a labeled set.
pub fn mr_validation_mae(
    net: &MixRatioNet,
    params: &ParamStore,
    examples: &[MixtureExample],
) -> Result<f64> {
    if examples.is_empty() {
        return Err(Error::validation("empty validation set"));
    }
    let mut acc = 0.0;
    for ex in examples {
        let tau = net.predict(params, &ex.mixture, &ex.enroll)?;
        acc += (tau - ex.tau_star).abs();
    }
    Ok(acc / examples.len() as f64)
}
