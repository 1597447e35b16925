//! Repo-wide configuration: one self-describing file, preset inheritance,
//! strict validation.
//!
//! Two built-in presets exist. `paper` records the full-scale reference
//! values (510-point FFT front end, 16-block/1024-wide backbone, 150
//! epochs at lr 2e-5 with clip 0.5); `desk` derives from it and overrides
//! everything that must shrink to train on a CPU in minutes. A config
//! file selects a preset and overrides individual keys; unknown keys are
//! rejected with their dotted path.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::infer::InferenceConfig;
use crate::nn::{MrConfig, PredictorConfig};
use crate::objective::ObjectiveConfig;
use crate::schedule::{AlphaSchedule, TimeSamplerConfig};
use crate::spectral::StftConfig;
use crate::synth::SynthConfig;
use crate::train::{MrTrainConfig, TrainConfig};
use crate::trajectory::PathKind;
use crate::{Error, Result};

/// Environment variable holding a default config path.
pub const CONFIG_ENV: &str = "TSE_CONFIG";

/// Top-level configuration; sections mirror the module config types.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RepoConfig {
    pub preset: String,
    pub stft: StftConfig,
    pub predictor: PredictorConfig,
    pub mr: MrConfig,
    pub synth: SynthConfig,
    pub train: TrainConfig,
    pub mr_train: MrTrainConfig,
    pub inference: InferenceConfig,
}

impl RepoConfig {
    /// The full-scale reference preset. Constants cited from the source
    /// setting live here and only here.
    pub fn paper() -> Self {
        let stft = StftConfig::paper();
        let schedule = AlphaSchedule {
            start_epoch: 5.0,
            end_epoch: 100.0,
            steepness: 15.0,
            alpha_min: 0.1,
        };
        let sampler = TimeSamplerConfig {
            mu: -0.4,
            sigma: 1.0,
            large_span_prob: 0.15,
            t_max_large: 0.15,
            r_min_large: 0.85,
        };
        let objective = ObjectiveConfig {
            gamma: 0.5,
            eps_adp: 1e-3,
            kappa: 1.0,
            eps_bnd: 1e-6,
            lambda_fm: 0.6,
            lambda_mf: 0.4,
            rho: 0.5,
        };
        Self {
            preset: "paper".into(),
            stft,
            predictor: PredictorConfig {
                channels: stft.channels(),
                n_blocks: 16,
                n_heads: 16,
                width: 1024,
                time_embed_dim: 256,
                mlp_ratio: 4,
                max_prefix_frames: 512,
            },
            mr: MrConfig {
                channels: stft.channels(),
                kernel: 5,
                stride: 2,
                hidden: 128,
                stft,
                mask_prob: 0.3,
                mask_time_frac: 0.2,
                mask_freq_frac: 0.2,
            },
            synth: SynthConfig {
                sample_rate: 16000,
                mixture_secs: 3.0,
                enroll_secs: 3.0,
                f0_low: 100.0,
                f0_high: 3000.0,
                ..SynthConfig::default()
            },
            train: TrainConfig {
                epochs: 150,
                lr_init: 2e-5,
                warmup_steps: 1000,
                clip_norm: 0.5,
                batch_size: 42,
                grad_accum_steps: 2,
                seed: 0,
                total_steps: 0,
                objective,
                schedule,
                sampler,
                path_kind: PathKind::MixtureToTarget,
                stft,
                checkpoint_every_epochs: 10,
            },
            mr_train: MrTrainConfig::default(),
            inference: InferenceConfig {
                chunk_frames: 375, // the 3 s crop at hop 128, 16 kHz
                use_mr: false,
                stft,
            },
        }
    }

    /// Desk-scale preset: everything shrunk to run on one CPU core in
    /// minutes while keeping every contract intact.
    pub fn desk() -> Self {
        let mut cfg = Self::paper();
        cfg.preset = "desk".into();
        let stft = StftConfig::desk();
        cfg.stft = stft;
        cfg.predictor = PredictorConfig {
            channels: stft.channels(),
            n_blocks: 4,
            n_heads: 4,
            width: 64,
            time_embed_dim: 64,
            mlp_ratio: 4,
            max_prefix_frames: 256,
        };
        cfg.mr = MrConfig {
            channels: stft.channels(),
            kernel: 5,
            stride: 2,
            hidden: 32,
            stft,
            mask_prob: 0.3,
            mask_time_frac: 0.2,
            mask_freq_frac: 0.2,
        };
        cfg.synth = SynthConfig::default();
        cfg.train.epochs = 30;
        cfg.train.lr_init = 1e-3;
        cfg.train.warmup_steps = 100;
        cfg.train.clip_norm = 1.0;
        cfg.train.batch_size = 16;
        cfg.train.grad_accum_steps = 1;
        cfg.train.stft = stft;
        cfg.train.checkpoint_every_epochs = 10;
        // Same anneal shape squeezed into the desk epoch budget.
        cfg.train.schedule = cfg.train.schedule.rescaled(cfg.train.epochs as f64, 150.0);
        // One training crop per chunk at the desk front end.
        cfg.inference = InferenceConfig {
            chunk_frames: 65,
            use_mr: false,
            stft,
        };
        cfg
    }

    pub fn preset_by_name(name: &str) -> Result<Self> {
        match name {
            "paper" => Ok(Self::paper()),
            "desk" => Ok(Self::desk()),
            other => Err(Error::Config(format!(
                "unknown preset '{other}' (expected 'paper' or 'desk')"
            ))),
        }
    }

    /// Loads a config file: the file's `preset` key picks the base, the
    /// remaining keys override it field by field. Unknown keys are
    /// rejected with their dotted path.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let text = std::fs::read_to_string(&path)?;
        Self::from_toml_str(&text)
    }

    pub fn from_toml_str(text: &str) -> Result<Self> {
        let user: toml::Value = toml::from_str(text)
            .map_err(|e| Error::Config(format!("config parse error: {e}")))?;
        let preset_name = user
            .get("preset")
            .and_then(|v| v.as_str())
            .unwrap_or("desk")
            .to_string();
        let base = Self::preset_by_name(&preset_name)?;
        let mut base_value =
            toml::Value::try_from(&base).map_err(|e| Error::Config(format!("preset: {e}")))?;

        let mut unknown = Vec::new();
        check_known_keys(&user, &base_value, String::new(), &mut unknown);
        if !unknown.is_empty() {
            return Err(Error::Config(format!(
                "unknown config keys: {}",
                unknown.join(", ")
            )));
        }
        merge_value(&mut base_value, &user);
        let mut cfg: RepoConfig = base_value
            .try_into()
            .map_err(|e| Error::Config(format!("config: {e}")))?;
        cfg.preset = preset_name;
        cfg.resolve();
        cfg.validate()?;
        Ok(cfg)
    }

    /// Resolves the preferred config path: explicit argument, then the
    /// environment variable, then the built-in desk preset.
    pub fn load_or_default(path: Option<&Path>) -> Result<Self> {
        match path {
            Some(p) => Self::load(p),
            None => match std::env::var(CONFIG_ENV) {
                Ok(p) if !p.is_empty() => Self::load(Path::new(&p)),
                _ => {
                    let mut cfg = Self::desk();
                    cfg.resolve();
                    cfg.validate()?;
                    Ok(cfg)
                }
            },
        }
    }

    /// Harmonizes derived fields: the top-level STFT config is the single
    /// source of truth for every section that carries one, and channel
    /// counts always equal 2F.
    pub fn resolve(&mut self) {
        self.train.stft = self.stft;
        self.inference.stft = self.stft;
        self.mr.stft = self.stft;
        self.mr.channels = self.stft.channels();
        self.predictor.channels = self.stft.channels();
    }

    pub fn validate(&self) -> Result<()> {
        self.stft.validate()?;
        self.predictor.validate()?;
        self.mr.validate()?;
        self.synth.validate()?;
        self.train.validate()?;
        if self.synth.sample_rate == 0 {
            return Err(Error::Config("sample_rate must be positive".into()));
        }
        let min_len = self.stft.n_fft;
        let mix_len = (self.synth.mixture_secs * self.synth.sample_rate as f64) as usize;
        if mix_len < min_len {
            return Err(Error::Config(format!(
                "mixture of {mix_len} samples is shorter than one analysis frame ({min_len})"
            )));
        }
        Ok(())
    }

    /// Serializes the full resolved config (used by run manifests).
    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| Error::Config(format!("serialize: {e}")))
    }
}

/// Records user keys that do not exist in the base config.
fn check_known_keys(
    user: &toml::Value,
    base: &toml::Value,
    prefix: String,
    unknown: &mut Vec<String>,
) {
    if let (toml::Value::Table(u), toml::Value::Table(b)) = (user, base) {
        for (k, v) in u {
            let path = if prefix.is_empty() {
                k.clone()
            } else {
                format!("{prefix}.{k}")
            };
            match b.get(k) {
                Some(bv) => check_known_keys(v, bv, path, unknown),
                None => unknown.push(path),
            }
        }
    }
}

/// Deep merge: tables merge recursively, everything else replaces.
fn merge_value(base: &mut toml::Value, user: &toml::Value) {
    match (base, user) {
        (toml::Value::Table(b), toml::Value::Table(u)) => {
            for (k, v) in u {
                match b.get_mut(k) {
                    Some(slot) => merge_value(slot, v),
                    None => {
                        b.insert(k.clone(), v.clone());
                    }
                }
            }
        }
        (slot, v) => *slot = v.clone(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn presets_validate() {
        for name in ["paper", "desk"] {
            let mut cfg = RepoConfig::preset_by_name(name).unwrap();
            cfg.resolve();
            cfg.validate().unwrap();
        }
    }

    #[test]
    fn desk_preset_inherits_loss_constants_from_paper() {
        let paper = RepoConfig::paper();
        let desk = RepoConfig::desk();
        assert_eq!(desk.train.objective, paper.train.objective);
        assert_eq!(desk.train.sampler, paper.train.sampler);
        assert_eq!(desk.train.schedule.alpha_min, paper.train.schedule.alpha_min);
        assert_eq!(desk.stft.n_fft, 62);
        assert_eq!(paper.stft.n_fft, 510);
        assert_eq!(paper.predictor.width, 1024);
    }

    #[test]
    fn file_overrides_apply() {
        let cfg = RepoConfig::from_toml_str(
            r#"
preset = "desk"

[train]
epochs = 3
seed = 99

[synth]
examples_train = 64
"#,
        )
        .unwrap();
        assert_eq!(cfg.train.epochs, 3);
        assert_eq!(cfg.train.seed, 99);
        assert_eq!(cfg.synth.examples_train, 64);
        // Untouched keys keep preset values.
        assert_eq!(cfg.train.batch_size, RepoConfig::desk().train.batch_size);
    }

    #[test]
    fn unknown_keys_are_rejected_with_path() {
        let err = RepoConfig::from_toml_str(
            r#"
preset = "desk"

[train]
eppochs = 3
"#,
        )
        .unwrap_err();
        let msg = format!("{err}");
        assert!(msg.contains("train.eppochs"), "{msg}");
    }

    #[test]
    fn resolve_pins_channels_to_stft() {
        let cfg = RepoConfig::from_toml_str(
            r#"
preset = "desk"

[stft]
n_fft = 126
hop = 32
"#,
        )
        .unwrap();
        assert_eq!(cfg.predictor.channels, 128);
        assert_eq!(cfg.mr.channels, 128);
        assert_eq!(cfg.train.stft.n_fft, 126);
        assert_eq!(cfg.inference.stft.n_fft, 126);
    }

    #[test]
    fn bad_preset_name_fails() {
        assert!(RepoConfig::from_toml_str("preset = \"huge\"").is_err());
    }
}
