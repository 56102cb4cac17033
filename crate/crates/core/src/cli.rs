//! Command-line entry points. `run` returns the process exit status:
//! 0 on success, 1 on I/O or usage errors, 2 when a calibration or
//! simulation stage fails.

use std::ffi::OsString;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use crate::coarse;
use crate::io::{self, CalibrationInputs, CalibrationReport, Config, RunMode};
use crate::refine::{self, RefineConfig};
use crate::sim::{self, Scenario};
use crate::{Error, Result};

pub const EXIT_OK: i32 = 0;
pub const EXIT_IO: i32 = 1;
pub const EXIT_STAGE: i32 = 2;

#[derive(Debug, Parser)]
#[command(
    name = "lidarcam-calib",
    version,
    about = "Targetless LiDAR-camera extrinsic and time-lag calibration"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Calibrate from a LiDAR trajectory, a camera trajectory and feature tracks.
    Calibrate(CalibrateArgs),
    /// Generate simulated datasets or run an evaluation sweep.
    Simulate(SimulateArgs),
}

#[derive(Debug, Args)]
struct CalibrateArgs {
    #[arg(long, value_name = "PATH")]
    lidar_traj: PathBuf,
    #[arg(long, value_name = "PATH")]
    camera_traj: PathBuf,
    #[arg(long, value_name = "PATH")]
    tracks: PathBuf,
    #[arg(long, value_name = "PATH")]
    intrinsics: PathBuf,
    /// Flat `key = value` overrides of the defaults.
    #[arg(long, value_name = "PATH")]
    config: Option<PathBuf>,
    /// Report destination.
    #[arg(long, value_name = "PATH")]
    out: PathBuf,
    /// Stop after the closed-form stage.
    #[arg(long, conflicts_with = "tau_only")]
    coarse_only: bool,
    /// Refine the lag only, keeping the closed-form extrinsic.
    #[arg(long)]
    tau_only: bool,
    /// Recorded in the report; the pipeline itself is deterministic.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Adds errors against this ground truth to the report.
    #[arg(long, value_name = "PATH")]
    ground_truth: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct SimulateArgs {
    /// Config file; its `sim.` keys define the scenario.
    #[arg(long, value_name = "PATH", global = true)]
    scenario: Option<PathBuf>,
    #[arg(long, value_name = "PATH", global = true)]
    out_dir: Option<PathBuf>,
    /// Datasets to generate, or trials per sweep cell (default 1, or 50 for sweeps).
    #[arg(long, global = true)]
    trials: Option<usize>,
    #[arg(long, default_value_t = 0, global = true)]
    seed: u64,
    #[command(subcommand)]
    sweep: Option<Sweep>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Subcommand)]
#[allow(clippy::enum_variant_names)]
enum Sweep {
    /// Hand-eye rotation error against motion excitation.
    SweepMotion,
    /// Refinement error against keyframe count.
    SweepFrames,
    /// Coarse and refined error under sync errors, and lag recovery.
    SweepLag,
}

/// Parses `args` (program name first) and runs the command.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_IO } else { EXIT_OK };
        }
    };
    let result = match cli.command {
        Command::Calibrate(a) => calibrate(&a),
        Command::Simulate(a) => simulate(&a),
    };
    match result {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("lidarcam-calib: {e}");
            exit_code(&e)
        }
    }
}

/// Exit status for an error.
pub fn exit_code(e: &Error) -> i32 {
    if e.is_io() {
        EXIT_IO
    } else {
        EXIT_STAGE
    }
}

fn load_config(path: Option<&Path>) -> Result<Config> {
    path.map_or_else(|| Ok(Config::default()), Config::load)
}

fn calibrate(a: &CalibrateArgs) -> Result<()> {
    let config = load_config(a.config.as_deref())?;
    let inputs = CalibrationInputs::load(&a.lidar_traj, &a.camera_traj, &a.tracks, &a.intrinsics)?;
    let truth = a
        .ground_truth
        .as_deref()
        .map(io::load_ground_truth)
        .transpose()?;
    let mode = if a.coarse_only {
        RunMode::CoarseOnly
    } else if a.tau_only {
        RunMode::TauOnly
    } else {
        RunMode::Full
    };
    let mut report = run_calibration(&inputs, &config, mode)?;
    report.truth = truth;
    report.seed = a.seed;
    report.save(&a.out)
}

/// Coarse stage, then the refinement selected by `mode`.
pub fn run_calibration(
    inputs: &CalibrationInputs,
    config: &Config,
    mode: RunMode,
) -> Result<CalibrationReport> {
    let tracks = &inputs.tracks;
    let motion = coarse::feature_motion(&tracks.frames, &tracks.tracks);
    let coarse =
        coarse::coarse_calibrate(&inputs.lidar, &inputs.camera_poses, &motion, &config.coarse)?;
    log::info!(
        "coarse: offset {:.4} s, scale {:.4}, {} pairs",
        coarse.time_offset,
        coarse.scale,
        coarse.pairs
    );
    let refine = match mode {
        RunMode::CoarseOnly => None,
        RunMode::Full | RunMode::TauOnly => {
            let mut cfg = config.refine.clone();
            if mode == RunMode::TauOnly {
                cfg.lag_only = true;
                cfg.reinit_extrinsic = false;
            }
            let r = refine::refine_calibration(
                &coarse,
                &tracks.frames,
                Some(&inputs.camera_poses),
                &tracks.tracks,
                &inputs.lidar,
                &inputs.intrinsics,
                &cfg,
            )?;
            if !r.converged {
                log::warn!("refinement stopped at the iteration limit before converging");
            }
            Some(r)
        }
    };
    Ok(CalibrationReport {
        mode,
        coarse,
        refine,
        truth: None,
        config: config.clone(),
        seed: 0,
    })
}

fn create_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|source| Error::Io {
        path: dir.to_path_buf(),
        source,
    })
}

fn simulate(a: &SimulateArgs) -> Result<()> {
    let out_dir = a.out_dir.as_deref().ok_or_else(|| Error::Io {
        path: PathBuf::new(),
        source: std::io::Error::new(std::io::ErrorKind::InvalidInput, "--out-dir is required"),
    })?;
    let config = load_config(a.scenario.as_deref())?;
    config.sim.validate()?;
    create_dir(out_dir)?;
    config.save(&out_dir.join("config.txt"))?;
    let trials = a.trials.unwrap_or(if a.sweep.is_some() { 50 } else { 1 });
    match a.sweep {
        None => generate_datasets(&config.sim, out_dir, trials, a.seed),
        Some(sweep) => {
            if sweep != Sweep::SweepMotion {
                let example = Scenario {
                    seed: a.seed,
                    ..config.sim.clone()
                };
                io::write_dataset(&out_dir.join("example"), &sim::generate_scenario(&example)?)?;
            }
            run_sweep(sweep, &config, out_dir, trials, a.seed)
        }
    }
}

fn generate_datasets(base: &Scenario, out_dir: &Path, trials: usize, seed: u64) -> Result<()> {
    let mut rows = Vec::new();
    for (i, s) in sim::trial_seeds(seed, trials).into_iter().enumerate() {
        let scenario = Scenario {
            seed: s,
            ..base.clone()
        };
        let data = sim::generate_scenario(&scenario)?;
        let name = format!("trial_{i:03}");
        io::write_dataset(&out_dir.join(&name), &data)?;
        rows.push(vec![
            name,
            s.to_string(),
            io::fmt_f64(data.truth.lag),
            io::fmt_f64(data.truth.scale),
            data.frames.len().to_string(),
            data.tracks.len().to_string(),
        ]);
    }
    io::write_csv(
        &out_dir.join("trials.csv"),
        &["dataset", "seed", "lag", "scale", "frames", "tracks"],
        &rows,
    )
}

fn run_sweep(
    sweep: Sweep,
    config: &Config,
    out_dir: &Path,
    trials: usize,
    seed: u64,
) -> Result<()> {
    let w = &config.sweep;
    match sweep {
        Sweep::SweepMotion => {
            let cells = sim::sweep_motion_excitation(
                &w.motion_levels_deg,
                &w.motion_samples,
                &w.motion_noise,
                trials,
                seed,
            );
            io::write_motion_sweep(&out_dir.join("sweep_motion.csv"), &cells)
        }
        Sweep::SweepFrames => {
            let rows =
                sim::sweep_frames(&config.sim, &w.frame_counts, trials, seed, &config.refine);
            io::write_frame_sweep(&out_dir.join("sweep_frames.csv"), &rows)
        }
        Sweep::SweepLag => {
            let rows = sim::sweep_lag_coarse(
                &config.sim,
                &w.sync_errors,
                trials,
                seed,
                &config.coarse,
                &config.refine,
            );
            io::write_lag_coarse_sweep(&out_dir.join("sweep_lag_coarse.csv"), &rows)?;
            let segment = Scenario {
                duration: w.lag_segment_duration,
                camera_rate: w.lag_segment_camera_rate,
                ..config.sim.clone()
            };
            let refine_cfg = RefineConfig {
                keyframes: w.lag_segment_keyframes,
                ..config.refine.clone()
            };
            let rows = sim::sweep_lag_refine(&segment, &w.lags, trials, seed, &refine_cfg);
            io::write_lag_refine_sweep(&out_dir.join("sweep_lag_refine.csv"), &rows)
        }
    }
}
