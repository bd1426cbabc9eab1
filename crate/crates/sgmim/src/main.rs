use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use serde::{Deserialize, Serialize};

use sgmim::analysis::{
    delta_log_amplitude, encoder_block_profiles, final_feature_energy, final_feature_profile,
    probe_depth, ProbeConfig, PROFILE_POINTS,
};
use sgmim::checkpoint::{export_encoder, load_checkpoint};
use sgmim::model::ModelConfig;
use sgmim::sweep::{grid, run_sweep, SweepAxis};
use sgmim::synthdata::{compute_norm_stats, generate_scene, write_scene, SceneConfig};
use sgmim::trainer::{train, TrainConfig};
use sgmim::SgError;

#[derive(Parser)]
#[command(
    name = "sgmim",
    version,
    about = "Masked image modeling with depth-guided complementary masking"
)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(clap::Args)]
struct ConfigArgs {
    /// JSON config file with model/train/scene/probe sections.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Dotted-path overrides applied after the file, e.g. train.steps=100.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
}

#[derive(Subcommand)]
enum Cmd {
    /// Pre-train the model; writes checkpoint.sgm and train_log.csv.
    Pretrain {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long = "output-dir")]
        output_dir: PathBuf,
        /// Continue from a checkpoint; its embedded configs take precedence.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Run the ablation grid and write summary.csv.
    Sweep {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long = "output-dir")]
        output_dir: PathBuf,
        /// full | masking | loss_weights
        #[arg(long, default_value = "full")]
        axis: SweepAxis,
        #[arg(long, value_delimiter = ',', default_value = "0")]
        seeds: Vec<u64>,
        /// Parallel job workers; output order is fixed either way.
        #[arg(long, default_value_t = 1)]
        workers: usize,
    },
    /// Fourier analysis of encoder feature maps from a checkpoint.
    Analyze {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long = "output-dir")]
        output_dir: PathBuf,
        /// Number of scenes to average over.
        #[arg(long, default_value_t = 8)]
        scenes: u64,
        /// First scene seed for the analysis set.
        #[arg(long, default_value_t = 400_000)]
        seed_start: u64,
        /// Also dump a PGM grayscale of final feature energy.
        #[arg(long)]
        pgm: bool,
    },
    /// Linear depth probe on a frozen encoder checkpoint.
    Probe {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long = "output-dir")]
        output_dir: PathBuf,
    },
    /// Strip a checkpoint to its encoder weights.
    Export {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Write synthetic scenes as binary files.
    GenData {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long = "output-dir")]
        output_dir: PathBuf,
        #[arg(long, default_value_t = 16)]
        count: u64,
        #[arg(long, default_value_t = 0)]
        seed_start: u64,
    },
}

/// Full job configuration; every section falls back to its defaults.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
struct FileConfig {
    model: ModelConfig,
    train: TrainConfig,
    scene: SceneConfig,
    probe: ProbeConfig,
}

/// Exit code 2 for bad arguments/config, 1 for runtime failures.
enum CliError {
    Config(String),
    Runtime(String),
}

impl From<SgError> for CliError {
    fn from(e: SgError) -> Self {
        match e {
            SgError::Config(_) | SgError::Geometry(_) | SgError::Json(_) => {
                CliError::Config(e.to_string())
            }
            other => CliError::Runtime(other.to_string()),
        }
    }
}

fn apply_override(root: &mut serde_json::Value, spec: &str) -> Result<(), CliError> {
    let (path, raw) = spec
        .split_once('=')
        .ok_or_else(|| CliError::Config(format!("override '{spec}' is not KEY=VALUE")))?;
    let value: serde_json::Value = serde_json::from_str(raw)
        .unwrap_or_else(|_| serde_json::Value::String(raw.to_string()));
    let mut node = root;
    let parts: Vec<&str> = path.split('.').collect();
    for (i, part) in parts.iter().enumerate() {
        let obj = node
            .as_object_mut()
            .ok_or_else(|| CliError::Config(format!("override path '{path}' is not an object")))?;
        if i + 1 == parts.len() {
            obj.insert(part.to_string(), value);
            return Ok(());
        }
        node = obj
            .entry(part.to_string())
            .or_insert_with(|| serde_json::json!({}));
    }
    unreachable!("empty override path")
}

fn load_config(args: &ConfigArgs) -> Result<FileConfig, CliError> {
    let mut value: serde_json::Value = match &args.config {
        Some(path) => {
            let text = std::fs::read_to_string(path)
                .map_err(|e| CliError::Config(format!("cannot read {}: {e}", path.display())))?;
            serde_json::from_str(&text)
                .map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?
        }
        None => serde_json::json!({}),
    };
    for spec in &args.set {
        apply_override(&mut value, spec)?;
    }
    let cfg: FileConfig = serde_json::from_value(value)
        .map_err(|e| CliError::Config(format!("invalid config: {e}")))?;
    cfg.model.validate().map_err(CliError::from)?;
    cfg.train.validate().map_err(CliError::from)?;
    cfg.scene.validate().map_err(CliError::from)?;
    cfg.probe.validate().map_err(CliError::from)?;
    Ok(cfg)
}

fn profile_csv(profiles: &[(String, Vec<f64>)]) -> String {
    let mut csv = String::from("block,freq,rel_log_amp\n");
    for (name, profile) in profiles {
        for (k, v) in profile.iter().enumerate() {
            let freq = k as f64 / (PROFILE_POINTS - 1) as f64;
            writeln!(csv, "{name},{freq:.4},{v:.8e}").expect("string write");
        }
    }
    csv
}

fn write_pgm(path: &Path, grid: &[f64], side: usize) -> Result<(), CliError> {
    let lo = grid.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = grid.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let scale = if hi > lo { 255.0 / (hi - lo) } else { 0.0 };
    let mut out = format!("P2\n{side} {side}\n255\n");
    for row in grid.chunks(side) {
        let line: Vec<String> = row
            .iter()
            .map(|&v| format!("{}", ((v - lo) * scale).round() as u32))
            .collect();
        writeln!(out, "{}", line.join(" ")).expect("string write");
    }
    std::fs::write(path, out).map_err(|e| CliError::Runtime(e.to_string()))
}

fn run(cmd: Cmd) -> Result<(), CliError> {
    match cmd {
        Cmd::Pretrain {
            cfg,
            output_dir,
            resume,
        } => {
            let file_cfg = load_config(&cfg)?;
            let (train_cfg, model_cfg, scene_cfg, ckpt) = match &resume {
                Some(path) => {
                    let c = load_checkpoint(path)?;
                    if c.manifest.encoder_only {
                        return Err(CliError::Config(
                            "cannot resume from an encoder-only checkpoint".into(),
                        ));
                    }
                    (c.manifest.train, c.manifest.model, c.manifest.scene, Some(c))
                }
                None => (file_cfg.train, file_cfg.model, file_cfg.scene, None),
            };
            train(
                &train_cfg,
                &model_cfg,
                &scene_cfg,
                Some(&output_dir),
                ckpt.as_ref(),
            )?;
            Ok(())
        }
        Cmd::Sweep {
            cfg,
            output_dir,
            axis,
            seeds,
            workers,
        } => {
            let file_cfg = load_config(&cfg)?;
            if seeds.is_empty() {
                return Err(CliError::Config("sweep needs at least one seed".into()));
            }
            run_sweep(
                &grid(axis),
                &seeds,
                &file_cfg.model,
                &file_cfg.train,
                &file_cfg.scene,
                &file_cfg.probe,
                &output_dir,
                workers,
            )?;
            Ok(())
        }
        Cmd::Analyze {
            cfg,
            checkpoint,
            output_dir,
            scenes,
            seed_start,
            pgm,
        } => {
            let file_cfg = load_config(&cfg)?;
            if scenes == 0 {
                return Err(CliError::Config("analyze needs at least one scene".into()));
            }
            let ckpt = load_checkpoint(&checkpoint)?;
            let params = ckpt.params();
            let model_cfg = ckpt.manifest.model;
            let scene_cfg = ckpt.manifest.scene;
            let stats = ckpt.manifest.norm_stats;
            let _ = file_cfg;
            let seeds: Vec<u64> = (seed_start..seed_start + scenes).collect();
            std::fs::create_dir_all(&output_dir)
                .map_err(|e| CliError::Runtime(e.to_string()))?;

            let mut profiles = Vec::new();
            let final_profile =
                final_feature_profile(&params, &model_cfg, &scene_cfg, &stats, &seeds)?;
            profiles.push(("final".to_string(), final_profile.clone()));
            // Per-block taps are only available on full checkpoints.
            if !ckpt.manifest.encoder_only || params.keys().any(|k| k.starts_with("enc.b")) {
                let blocks =
                    encoder_block_profiles(&params, &model_cfg, &scene_cfg, &stats, &seeds)?;
                for (i, p) in blocks.into_iter().enumerate() {
                    profiles.push((format!("block{i:02}"), p));
                }
            }
            std::fs::write(output_dir.join("spectra.csv"), profile_csv(&profiles))
                .map_err(|e| CliError::Runtime(e.to_string()))?;
            let mut summary = String::from("metric,value\n");
            writeln!(
                summary,
                "delta_log_amplitude,{:.8e}",
                delta_log_amplitude(&final_profile)
            )
            .expect("string write");
            std::fs::write(output_dir.join("analysis.csv"), summary)
                .map_err(|e| CliError::Runtime(e.to_string()))?;
            if pgm {
                let side = model_cfg.img_size / model_cfg.patch;
                let energy =
                    final_feature_energy(&params, &model_cfg, &scene_cfg, &stats, seeds[0])?;
                write_pgm(&output_dir.join("feature_energy.pgm"), &energy, side)?;
            }
            Ok(())
        }
        Cmd::Probe {
            cfg,
            checkpoint,
            output_dir,
        } => {
            let file_cfg = load_config(&cfg)?;
            let ckpt = load_checkpoint(&checkpoint)?;
            let report = probe_depth(
                &ckpt.params(),
                &ckpt.manifest.model,
                &ckpt.manifest.scene,
                &ckpt.manifest.norm_stats,
                &file_cfg.probe,
            )?;
            std::fs::create_dir_all(&output_dir)
                .map_err(|e| CliError::Runtime(e.to_string()))?;
            let csv = format!(
                "metric,value\nrmse,{:.8e}\ndelta1,{:.8e}\ntrain_scenes,{}\nval_scenes,{}\n",
                report.rmse, report.delta1, report.train_scenes, report.val_scenes
            );
            std::fs::write(output_dir.join("probe.csv"), csv)
                .map_err(|e| CliError::Runtime(e.to_string()))?;
            Ok(())
        }
        Cmd::Export { checkpoint, out } => {
            let ckpt = load_checkpoint(&checkpoint)?;
            if let Some(dir) = out.parent() {
                if !dir.as_os_str().is_empty() {
                    std::fs::create_dir_all(dir).map_err(|e| CliError::Runtime(e.to_string()))?;
                }
            }
            export_encoder(&ckpt, &out)?;
            Ok(())
        }
        Cmd::GenData {
            cfg,
            output_dir,
            count,
            seed_start,
        } => {
            let file_cfg = load_config(&cfg)?;
            if count == 0 {
                return Err(CliError::Config("gen-data needs count >= 1".into()));
            }
            std::fs::create_dir_all(&output_dir)
                .map_err(|e| CliError::Runtime(e.to_string()))?;
            let scene_cfg = file_cfg.scene;
            for seed in seed_start..seed_start + count {
                let scene = generate_scene(seed, &scene_cfg)?;
                write_scene(
                    &scene,
                    scene_cfg.h,
                    scene_cfg.w,
                    &output_dir.join(format!("scene_{seed:08}.sgs")),
                )?;
            }
            let stats = compute_norm_stats(&scene_cfg)?;
            std::fs::write(
                output_dir.join("norm_stats.json"),
                serde_json::to_string_pretty(&stats).expect("stats json"),
            )
            .map_err(|e| CliError::Runtime(e.to_string()))?;
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli.cmd) {
        Ok(()) => ExitCode::SUCCESS,
        Err(CliError::Config(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
        Err(CliError::Runtime(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
    }
}
