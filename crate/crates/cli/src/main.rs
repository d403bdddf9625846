//! `rawhdr`: synthesis, merging, training, inference, evaluation and channel
//! analysis from the command line.
//!
//! Exit codes: 0 success, 1 runtime failure, 2 usage error, 3 failed check.
//! Every failure prints one JSON line `{"error": {"kind", "message"}}` to
//! stderr.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use serde::Serialize;

use rawhdr::camera_sim::{CameraProfile, ExposureStack, SceneOptions};
use rawhdr::dataset::{analyze_channels, evaluate_manifest, synthesize, DatasetManifest, SynthConfig};
use rawhdr::formats::{read_checkpoint, read_json, read_raw, write_checkpoint, write_hdr, write_json};
use rawhdr::hdr_merge::{coverage_report, merge};
use rawhdr::metrics::DEFAULT_MU;
use rawhdr::net::{forward, NetConfig};
use rawhdr::training::{grad_check, init_params, load_state, run, TrainConfig, TrainOptions, TrainState, STATE_FILE};

#[derive(Parser)]
#[command(name = "rawhdr", version, about = "Single-Raw-image HDR reconstruction")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Render scenes, bracket them, merge the targets and write a manifest.
    Synth {
        #[arg(long)]
        scenes: usize,
        /// Raw frame size as HxW.
        #[arg(long, value_parser = parse_size)]
        size: (usize, usize),
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Camera profile JSON; the default profile when absent.
        #[arg(long)]
        profile: Option<PathBuf>,
        /// Scene generator options JSON.
        #[arg(long)]
        scene_config: Option<PathBuf>,
        /// Grey scenes without colour tints.
        #[arg(long)]
        neutral: bool,
        #[arg(long)]
        out: PathBuf,
    },
    /// Merge bracketed frames into an HDR image.
    Merge {
        #[arg(long, num_args = 1.., required = true)]
        stack: Vec<PathBuf>,
        /// Comma-separated exposure values, one per frame.
        #[arg(long, value_delimiter = ',', required = true, allow_hyphen_values = true)]
        evs: Vec<f64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Write a freshly initialized checkpoint.
    Init {
        #[arg(long)]
        net_config: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train on a manifest; resumes when the output holds a training state.
    Train {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        net_config: Option<PathBuf>,
        #[arg(long)]
        train_config: Option<PathBuf>,
        /// Holdout manifest scored during training.
        #[arg(long)]
        holdout: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Reconstruct the HDR image of one Raw frame.
    Infer {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        raw: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Score a checkpoint on every manifest entry.
    Eval {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value_t = DEFAULT_MU)]
        mu: f64,
        #[arg(long)]
        report: PathBuf,
    },
    /// Channel means and dominant-channel maps of the 0 EV frames.
    AnalyzeChannels {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Finite-difference check of one operation's gradients.
    GradCheck {
        #[arg(long)]
        op: String,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 1e-4)]
        tolerance: f64,
    },
}

fn parse_size(s: &str) -> Result<(usize, usize), String> {
    let (h, w) = s
        .split_once(['x', 'X'])
        .ok_or_else(|| format!("expected HxW, got '{s}'"))?;
    let parse = |v: &str| v.trim().parse::<usize>().map_err(|e| format!("bad size '{v}': {e}"));
    Ok((parse(h)?, parse(w)?))
}

enum Failure {
    Core(rawhdr::Error),
    Check(String),
}

impl From<rawhdr::Error> for Failure {
    fn from(e: rawhdr::Error) -> Self {
        Failure::Core(e)
    }
}

fn report_error(kind: &str, message: &str) {
    let line = serde_json::json!({ "error": { "kind": kind, "message": message } });
    eprintln!("{line}");
}

fn print_json<T: Serialize>(value: &T) {
    println!("{}", serde_json::to_string(value).expect("serializable"));
}

fn load_or_default<T: serde::de::DeserializeOwned + Default>(path: Option<&Path>) -> rawhdr::Result<T> {
    path.map_or_else(|| Ok(T::default()), read_json)
}

fn execute(command: Command) -> Result<(), Failure> {
    match command {
        Command::Synth {
            scenes,
            size,
            seed,
            profile,
            scene_config,
            neutral,
            out,
        } => {
            let profile: CameraProfile = load_or_default(profile.as_deref())?;
            let mut scene: SceneOptions = load_or_default(scene_config.as_deref())?;
            scene.neutral |= neutral;
            let cfg = SynthConfig {
                scenes,
                size,
                seed,
                profile,
                scene,
                ..SynthConfig::default()
            };
            let manifest = synthesize(&out, &cfg)?;
            print_json(&serde_json::json!({
                "scenes": manifest.entries.len(),
                "manifest": out.join(rawhdr::dataset::MANIFEST_FILE),
            }));
        }
        Command::Merge { stack, evs, out } => {
            if stack.len() != evs.len() {
                return Err(rawhdr::Error::Argument(format!("{} frames but {} exposure values", stack.len(), evs.len())).into());
            }
            let mut frames = Vec::with_capacity(stack.len());
            for (path, &ev) in stack.iter().zip(&evs) {
                let m = read_raw(path)?;
                if m.exposure_ev != ev {
                    return Err(rawhdr::Error::Argument(format!(
                        "{} records {} EV, --evs says {ev}",
                        path.display(),
                        m.exposure_ev
                    ))
                    .into());
                }
                frames.push(m);
            }
            let stack = ExposureStack::new(frames)?;
            let hdr = merge(&stack)?;
            write_hdr(&out, &hdr)?;
            print_json(&serde_json::json!({ "shape": hdr.shape(), "coverage": coverage_report(&stack)? }));
        }
        Command::Init { net_config, seed, out } => {
            let config: NetConfig = load_or_default(net_config.as_deref())?;
            let params = init_params(&config, seed)?;
            write_checkpoint(&out, &params, &config)?;
            print_json(&serde_json::json!({ "arrays": params.len(), "scalars": params.num_scalars() }));
        }
        Command::Train {
            manifest,
            net_config,
            train_config,
            holdout,
            out,
        } => {
            let net: NetConfig = load_or_default(net_config.as_deref())?;
            let cfg: TrainConfig = load_or_default(train_config.as_deref())?;
            let data = DatasetManifest::load(&manifest)?.pairs()?;
            let holdout = match holdout {
                Some(p) => DatasetManifest::load(&p)?.pairs()?,
                None => Vec::new(),
            };
            let mut state = if out.join(STATE_FILE).exists() {
                load_state(&out, &net, &cfg)?
            } else {
                TrainState::fresh(&net, &cfg)?
            };
            let mut log = |r: &rawhdr::training::EpochRecord| print_json(r);
            run(
                &mut state,
                &data,
                &net,
                &cfg,
                TrainOptions {
                    holdout: &holdout,
                    checkpoint_dir: Some(out.clone()),
                    on_epoch: Some(&mut log),
                    ..TrainOptions::default()
                },
            )?;
            write_json(&out.join("history.json"), &state.history)?;
        }
        Command::Infer { checkpoint, raw, out } => {
            let (params, config) = read_checkpoint(&checkpoint)?;
            let hdr = forward(&read_raw(&raw)?, &params, &config)?;
            write_hdr(&out, &hdr)?;
            print_json(&serde_json::json!({ "shape": hdr.shape(), "max": hdr.tensor().max() }));
        }
        Command::Eval {
            manifest,
            checkpoint,
            mu,
            report,
        } => {
            let (params, config) = read_checkpoint(&checkpoint)?;
            let records = evaluate_manifest(&DatasetManifest::load(&manifest)?, &params, &config, mu)?;
            write_json(&report, &records)?;
            let n = records.len() as f64;
            print_json(&serde_json::json!({
                "scenes": records.len(),
                "psnr": records.iter().map(|r| r.psnr).sum::<f64>() / n,
                "psnr_mu": records.iter().map(|r| r.psnr_mu).sum::<f64>() / n,
                "ssim": records.iter().map(|r| r.ssim).sum::<f64>() / n,
            }));
        }
        Command::AnalyzeChannels { manifest, out } => {
            let report = analyze_channels(&DatasetManifest::load(&manifest)?, &out)?;
            print_json(&serde_json::json!({
                "means_counts": report.means_counts,
                "means_normalized": report.means_normalized,
                "dominant_fraction": report.dominant_fraction,
                "green_blue_red_order": report.green_blue_red_order(),
            }));
        }
        Command::GradCheck { op, seed, tolerance } => {
            let report = grad_check(&op, seed)?;
            print_json(&report);
            if !(report.max_rel_error <= tolerance) {
                return Err(Failure::Check(format!(
                    "{op}: max relative error {:.3e} exceeds {tolerance:.1e}",
                    report.max_rel_error
                )));
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if matches!(e.kind(), clap::error::ErrorKind::DisplayHelp | clap::error::ErrorKind::DisplayVersion) => {
            print!("{e}");
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let text = e.to_string();
            let first = text.lines().next().unwrap_or("usage error");
            report_error("usage", first.trim_start_matches("error: "));
            return ExitCode::from(2);
        }
    };
    match execute(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Core(e)) => {
            report_error(e.kind(), &e.to_string());
            ExitCode::from(1)
        }
        Err(Failure::Check(msg)) => {
            report_error("check_failed", &msg);
            ExitCode::from(3)
        }
    }
}
