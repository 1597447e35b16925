//! Operator entry points: dataset generation, training, extraction,
//! evaluation, and the mixing-ratio sensitivity sweep.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

use tse_core::audio::read_wav;
use tse_core::config::RepoConfig;
use tse_core::infer::{extract_utterance, NfeCounter};
use tse_core::metrics::{
    evaluate_condition, format_sensitivity_table, mr_sensitivity_report, tau_grid_sweep,
    write_series, SweepModel, TauMode,
};
use tse_core::nn::{checkpoint, MeanVelocityNet, MixRatioNet};
use tse_core::spectral::{stft, write_dump};
use tse_core::synth::{generate_dataset, open_dataset, MixtureExample, Split};
use tse_core::train::{train, train_mr, RunPaths};
use tse_core::trajectory::PathKind;

#[derive(Parser)]
#[command(
    name = "tse",
    about = "One-step target-signal extraction: data, training, inference, evaluation",
    version
)]
struct Cli {
    /// Config file (TOML). Falls back to $TSE_CONFIG, then the desk preset.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum PathKindArg {
    Mixture,
    Background,
}

impl From<PathKindArg> for PathKind {
    fn from(v: PathKindArg) -> Self {
        match v {
            PathKindArg::Mixture => PathKind::MixtureToTarget,
            PathKindArg::Background => PathKind::BackgroundToTarget,
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset with exact mixing ratios.
    GenData {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Train the mean-velocity extractor.
    Train {
        /// Dataset directory produced by gen-data.
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Which trajectory the model is trained on.
        #[arg(long, value_enum, default_value = "mixture")]
        path_kind: PathKindArg,
        /// Resume from a state checkpoint.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Train the mixing-ratio regressor.
    TrainMr {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Extract the enrolled signal from a mixture WAV.
    Extract {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        mixture: PathBuf,
        #[arg(long)]
        enroll: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Use the mixing-ratio regressor for the start coordinate.
        #[arg(long, conflicts_with = "no_mr")]
        mr: bool,
        /// Start from the mixture (tau = 0); the default.
        #[arg(long)]
        no_mr: bool,
        /// Regressor checkpoint (required with --mr).
        #[arg(long)]
        mr_checkpoint: Option<PathBuf>,
        /// Force the start coordinate, overriding --mr/--no-mr.
        #[arg(long)]
        tau: Option<f64>,
        /// Frames per inference chunk (0 = whole utterance).
        #[arg(long)]
        chunk_frames: Option<usize>,
        /// Optional directory for input/output spectrogram dumps.
        #[arg(long)]
        dump_spec: Option<PathBuf>,
    },
    /// Evaluate a checkpoint on a dataset split.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_enum, default_value = "mixture")]
        path_kind: PathKindArg,
        #[arg(long)]
        mr_checkpoint: Option<PathBuf>,
        /// Evaluation split.
        #[arg(long, default_value = "test")]
        split: String,
        /// Also evaluate with the forced tau = tau* condition.
        #[arg(long)]
        ablation: bool,
    },
    /// Mixing-ratio sensitivity sweep over both path-kind models.
    Sweep {
        /// Mixture-to-target checkpoint.
        #[arg(long)]
        mixture_checkpoint: PathBuf,
        /// Background-to-target checkpoint.
        #[arg(long)]
        background_checkpoint: PathBuf,
        #[arg(long)]
        mr_checkpoint: Option<PathBuf>,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Points in the forced-tau grid sweep (0 disables).
        #[arg(long, default_value_t = 9)]
        tau_grid: usize,
    },
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}

fn load_examples(data: &Path, split: Split) -> Result<Vec<MixtureExample>, tse_core::Error> {
    let ds = open_dataset(data)?;
    ds.records_for(split)
        .map(|r| ds.load_example(r))
        .collect::<Result<Vec<_>, _>>()
}

fn split_from(name: &str) -> Result<Split, tse_core::Error> {
    match name {
        "train" => Ok(Split::Train),
        "val" => Ok(Split::Val),
        "test" => Ok(Split::Test),
        other => Err(tse_core::Error::Validation(format!(
            "unknown split '{other}'"
        ))),
    }
}

fn run(cli: Cli) -> Result<(), tse_core::Error> {
    let cfg = RepoConfig::load_or_default(cli.config.as_deref())?;
    match cli.command {
        Command::GenData { out, seed } => {
            let ds = generate_dataset(&cfg.synth, seed, &out)?;
            println!(
                "wrote {} examples ({} speakers) to {}",
                ds.records.len(),
                ds.speakers.len(),
                out.display()
            );
            Ok(())
        }
        Command::Train {
            data,
            out,
            path_kind,
            resume,
        } => {
            let examples = load_examples(&data, Split::Train)?;
            let mut train_cfg = cfg.train.clone();
            train_cfg.path_kind = path_kind.into();
            let net = MeanVelocityNet::new(cfg.predictor)?;
            let paths = RunPaths {
                out_dir: Some(out.clone()),
                telemetry: Some(out.join("telemetry.jsonl")),
            };
            std::fs::create_dir_all(&out)?;
            std::fs::write(out.join("config.toml"), cfg.to_toml_string()?)?;
            let result = train(&train_cfg, &net, &examples, &paths, resume.as_deref())?;
            let last = result.manifest.epochs.last();
            println!(
                "trained {} epochs; final mean loss {:.6}; params at {}",
                result.manifest.epochs.len(),
                last.map(|m| m.mean_loss).unwrap_or(f64::NAN),
                out.join("params.ckpt").display()
            );
            Ok(())
        }
        Command::TrainMr { data, out } => {
            let train_set = load_examples(&data, Split::Train)?;
            let val_set = load_examples(&data, Split::Val)?;
            let net = MixRatioNet::new(cfg.mr)?;
            let (params, mae) = train_mr(&cfg.mr_train, &net, &train_set, &val_set)?;
            std::fs::create_dir_all(&out)?;
            let path = out.join("mr.ckpt");
            checkpoint::save(&params, &path)?;
            println!(
                "regressor trained; held-out MAE {:.4}; checkpoint at {}",
                mae,
                path.display()
            );
            Ok(())
        }
        Command::Extract {
            checkpoint: ckpt,
            mixture,
            enroll,
            out,
            mr,
            no_mr: _,
            mr_checkpoint,
            tau,
            chunk_frames,
            dump_spec,
        } => {
            let params = checkpoint::load(&ckpt)?;
            let net = MeanVelocityNet::new(cfg.predictor)?;
            net.validate_params(&params)?;
            let y = read_wav(&mixture)?;
            let e = read_wav(&enroll)?;
            let mut infer_cfg = cfg.inference;
            infer_cfg.use_mr = mr;
            if let Some(n) = chunk_frames {
                infer_cfg.chunk_frames = n;
            }
            let mr_model = match (mr, &mr_checkpoint) {
                (true, Some(p)) => {
                    let mr_params = checkpoint::load(p)?;
                    let mr_net = MixRatioNet::new(cfg.mr)?;
                    mr_net.validate_params(&mr_params)?;
                    Some((mr_net, mr_params))
                }
                (true, None) => {
                    return Err(tse_core::Error::Validation(
                        "--mr requires --mr-checkpoint".into(),
                    ))
                }
                _ => None,
            };
            let mut counter = NfeCounter::default();
            let est = extract_utterance(
                &net,
                &params,
                &y,
                &e,
                &infer_cfg,
                mr_model.as_ref().map(|(n, p)| (n, p)),
                tau,
                &mut counter,
            )?;
            est.write_wav_f32(&out)?;
            if let Some(dir) = dump_spec {
                std::fs::create_dir_all(&dir)?;
                write_dump(&stft(&y, &infer_cfg.stft)?, dir.join("mixture.spec"))?;
                write_dump(&stft(&est, &infer_cfg.stft)?, dir.join("extracted.spec"))?;
            }
            println!(
                "extracted {} samples with {} velocity evaluation(s), {} regressor pass(es) -> {}",
                est.len(),
                counter.velocity_evals,
                counter.mr_evals,
                out.display()
            );
            Ok(())
        }
        Command::Eval {
            checkpoint: ckpt,
            data,
            out,
            path_kind,
            mr_checkpoint,
            split,
            ablation,
        } => {
            let examples = load_examples(&data, split_from(&split)?)?;
            let params = checkpoint::load(&ckpt)?;
            let net = MeanVelocityNet::new(cfg.predictor)?;
            net.validate_params(&params)?;
            let mr_model = match &mr_checkpoint {
                Some(p) => {
                    let mr_params = checkpoint::load(p)?;
                    let mr_net = MixRatioNet::new(cfg.mr)?;
                    mr_net.validate_params(&mr_params)?;
                    Some((mr_net, mr_params))
                }
                None => None,
            };
            let kind: PathKind = path_kind.into();
            let model = SweepModel {
                label: match kind {
                    PathKind::MixtureToTarget => "mixture-to-target".into(),
                    PathKind::BackgroundToTarget => "background-to-target".into(),
                },
                kind,
                net: &net,
                params: &params,
            };
            std::fs::create_dir_all(&out)?;
            let mut modes = vec![TauMode::ForcedZero];
            if ablation {
                modes.push(TauMode::ForcedTrue);
            }
            if mr_model.is_some() {
                modes.push(TauMode::Predicted);
            }
            for mode in modes {
                let report = evaluate_condition(
                    &model,
                    &examples,
                    mode,
                    mr_model.as_ref().map(|(n, p)| (n, p)),
                    &cfg.inference,
                )?;
                println!("{}", report.summary_line());
                let stem = match mode {
                    TauMode::ForcedZero => "tau_zero",
                    TauMode::ForcedTrue => "tau_true",
                    TauMode::Predicted => "tau_predicted",
                };
                report.write_delimited(out.join(format!("eval_{stem}.tsv")))?;
                std::fs::write(
                    out.join(format!("eval_{stem}.json")),
                    serde_json::to_string_pretty(&report)?,
                )?;
            }
            Ok(())
        }
        Command::Sweep {
            mixture_checkpoint,
            background_checkpoint,
            mr_checkpoint,
            data,
            out,
            tau_grid,
        } => {
            let examples = load_examples(&data, Split::Test)?;
            let net = MeanVelocityNet::new(cfg.predictor)?;
            let m2t = checkpoint::load(&mixture_checkpoint)?;
            let b2t = checkpoint::load(&background_checkpoint)?;
            net.validate_params(&m2t)?;
            net.validate_params(&b2t)?;
            let mr_model = match &mr_checkpoint {
                Some(p) => {
                    let mr_params = checkpoint::load(p)?;
                    let mr_net = MixRatioNet::new(cfg.mr)?;
                    mr_net.validate_params(&mr_params)?;
                    Some((mr_net, mr_params))
                }
                None => None,
            };
            let models = [
                SweepModel {
                    label: "mixture-to-target".into(),
                    kind: PathKind::MixtureToTarget,
                    net: &net,
                    params: &m2t,
                },
                SweepModel {
                    label: "background-to-target".into(),
                    kind: PathKind::BackgroundToTarget,
                    net: &net,
                    params: &b2t,
                },
            ];
            let with_mode = if mr_model.is_some() {
                TauMode::Predicted
            } else {
                TauMode::ForcedTrue
            };
            let blocks = mr_sensitivity_report(
                &models,
                &examples,
                with_mode,
                mr_model.as_ref().map(|(n, p)| (n, p)),
                &cfg.inference,
            )?;
            std::fs::create_dir_all(&out)?;
            let table = format_sensitivity_table(&blocks);
            println!("{table}");
            std::fs::write(out.join("sensitivity.txt"), &table)?;
            std::fs::write(
                out.join("sensitivity.json"),
                serde_json::to_string_pretty(&blocks)?,
            )?;

            if tau_grid > 1 {
                let taus: Vec<f64> = (0..tau_grid)
                    .map(|i| i as f64 / (tau_grid - 1) as f64 * 0.9)
                    .collect();
                for model in &models {
                    let points = tau_grid_sweep(model, &examples, &taus, &cfg.inference)?;
                    write_series(
                        out.join(format!("tau_sweep_{}.tsv", model.label)),
                        &model.label,
                        &points,
                    )?;
                }
            }
            Ok(())
        }
    }
}
