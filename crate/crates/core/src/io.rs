//! Plain-text file formats, the flat configuration file, the calibration
//! report and CSV result tables. Every float is written in its shortest
//! round-trip form, so save followed by load is exact.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use nalgebra::{Quaternion, UnitQuaternion, Vector2, Vector3};

use crate::coarse::{CoarseConfig, CoarseResult};
use crate::geometry::{ContinuousTrajectory, Pose, Rotation, StampedPose};
use crate::refine::{
    CameraFrame, CameraIntrinsics, FeatureTrack, Observation, RefineConfig, RefineResult,
    RobustKernel, RobustWeight, StepMode,
};
use crate::sim::{
    self, CoarseLagRow, ErrorReport, FrameSweepRow, GroundTruth, MotionSweepCell, Profile,
    RefineLagRow, Scenario,
};
use crate::{Error, Result};

pub const VERSION: &str = env!("CARGO_PKG_VERSION");

/// Tolerance on the quaternion norm in trajectory files.
pub const QUATERNION_NORM_TOLERANCE: f64 = 1e-3;

/// Shortest text that parses back to the same `f64`.
pub fn fmt_f64(x: f64) -> String {
    format!("{x:?}")
}

fn format_error(path: &Path, line: usize, message: impl Into<String>) -> Error {
    Error::Format {
        path: path.to_path_buf(),
        line,
        message: message.into(),
    }
}

fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|source| Error::Io {
        path: path.to_path_buf(),
        source,
    })
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|source| Error::Io {
        path: path.to_path_buf(),
        source,
    })
}

/// Non-comment, non-blank lines with their 1-based line numbers.
fn data_lines(text: &str) -> impl Iterator<Item = (usize, &str)> {
    text.lines()
        .enumerate()
        .map(|(i, l)| (i + 1, l.trim()))
        .filter(|(_, l)| !l.is_empty() && !l.starts_with('#'))
}

fn parse_fields<const N: usize>(path: &Path, line: usize, text: &str) -> Result<[f64; N]> {
    let fields: Vec<&str> = text.split_whitespace().collect();
    if fields.len() != N {
        return Err(format_error(
            path,
            line,
            format!("expected {N} fields, found {}", fields.len()),
        ));
    }
    let mut out = [0.0; N];
    for (o, f) in out.iter_mut().zip(&fields) {
        *o = f
            .parse::<f64>()
            .map_err(|_| format_error(path, line, format!("invalid number '{f}'")))?;
        if !o.is_finite() {
            return Err(format_error(path, line, format!("non-finite value '{f}'")));
        }
    }
    Ok(out)
}

fn parse_u64(path: &Path, line: usize, s: &str, what: &str) -> Result<u64> {
    s.parse()
        .map_err(|_| format_error(path, line, format!("invalid {what} '{s}'")))
}

/// Unit quaternion from scalar-last components, renormalized when off by
/// more than rounding.
fn quaternion_from(path: &Path, line: usize, q: [f64; 4]) -> Result<Rotation> {
    let q = Quaternion::new(q[3], q[0], q[1], q[2]);
    let n = q.norm();
    if (n - 1.0).abs() > QUATERNION_NORM_TOLERANCE {
        return Err(format_error(
            path,
            line,
            format!("quaternion norm {n} differs from 1 by more than {QUATERNION_NORM_TOLERANCE}"),
        ));
    }
    // values written from a unit quaternion reload bit-identically
    let q = if (n - 1.0).abs() <= 4.0 * f64::EPSILON {
        UnitQuaternion::new_unchecked(q)
    } else {
        UnitQuaternion::from_quaternion(q)
    };
    Ok(Rotation::from_quaternion(q))
}

fn pose_fields(pose: &Pose) -> [f64; 7] {
    let q = pose.rotation.quaternion();
    let t = pose.translation;
    [t.x, t.y, t.z, q.i, q.j, q.k, q.w]
}

fn join(values: &[f64], sep: &str) -> String {
    values
        .iter()
        .map(|v| fmt_f64(*v))
        .collect::<Vec<_>>()
        .join(sep)
}

// Trajectories

/// Stamped poses and clock label of a trajectory file.
#[derive(Debug, Clone, PartialEq)]
pub struct TrajectoryRecords {
    pub clock: String,
    pub poses: Vec<StampedPose>,
}

pub fn parse_trajectory(text: &str, path: &Path) -> Result<TrajectoryRecords> {
    let mut clock = None;
    for l in text.lines().map(str::trim) {
        if let Some(c) = l
            .strip_prefix('#')
            .and_then(|c| c.trim().strip_prefix("clock:"))
        {
            clock = Some(c.trim().to_string());
            break;
        }
    }
    let mut poses: Vec<StampedPose> = Vec::new();
    for (line, l) in data_lines(text) {
        let [t, tx, ty, tz, qx, qy, qz, qw] = parse_fields::<8>(path, line, l)?;
        if let Some(prev) = poses.last() {
            if t <= prev.timestamp {
                return Err(format_error(
                    path,
                    line,
                    format!("timestamp {t} not after previous {}", prev.timestamp),
                ));
            }
        }
        let rotation = quaternion_from(path, line, [qx, qy, qz, qw])?;
        poses.push(StampedPose::new(
            t,
            Pose::new(rotation, Vector3::new(tx, ty, tz)),
        ));
    }
    if poses.len() < 2 {
        return Err(Error::TooShort {
            path: path.to_path_buf(),
            found: poses.len(),
        });
    }
    let clock = clock.unwrap_or_else(|| {
        path.file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_default()
    });
    Ok(TrajectoryRecords { clock, poses })
}

pub fn read_trajectory(path: &Path) -> Result<TrajectoryRecords> {
    parse_trajectory(&read_text(path)?, path)
}

pub fn load_trajectory(path: &Path) -> Result<ContinuousTrajectory> {
    let r = read_trajectory(path)?;
    ContinuousTrajectory::new(r.poses, r.clock)
}

pub fn format_trajectory(clock: &str, poses: &[StampedPose]) -> String {
    let mut s = format!("# clock: {clock}\n# timestamp tx ty tz qx qy qz qw\n");
    for p in poses {
        let mut fields = vec![p.timestamp];
        fields.extend(pose_fields(&p.pose));
        s.push_str(&join(&fields, " "));
        s.push('\n');
    }
    s
}

pub fn write_trajectory(path: &Path, clock: &str, poses: &[StampedPose]) -> Result<()> {
    write_text(path, &format_trajectory(clock, poses))
}

// Feature tracks

/// Frames and tracks of a track file. Frames are sorted by timestamp,
/// tracks by first appearance.
#[derive(Debug, Clone, PartialEq)]
pub struct TrackData {
    pub frames: Vec<CameraFrame>,
    pub tracks: Vec<FeatureTrack>,
}

pub fn parse_tracks(text: &str, path: &Path) -> Result<TrackData> {
    use std::collections::btree_map::Entry;
    use std::collections::{BTreeMap, HashMap, HashSet};

    let mut frames: BTreeMap<u64, f64> = BTreeMap::new();
    let mut tracks: Vec<FeatureTrack> = Vec::new();
    let mut index: HashMap<u64, usize> = HashMap::new();
    let mut seen: HashSet<(u64, u64)> = HashSet::new();
    for (line, l) in data_lines(text) {
        let fields: Vec<&str> = l.split_whitespace().collect();
        if fields.len() != 5 {
            return Err(format_error(
                path,
                line,
                format!("expected 5 fields, found {}", fields.len()),
            ));
        }
        let landmark = parse_u64(path, line, fields[0], "landmark id")?;
        let frame = parse_u64(path, line, fields[1], "frame id")?;
        let [t, u, v] = parse_fields::<3>(path, line, &fields[2..].join(" "))?;
        if !seen.insert((landmark, frame)) {
            return Err(format_error(
                path,
                line,
                format!("landmark {landmark} observed twice in frame {frame}"),
            ));
        }
        match frames.entry(frame) {
            Entry::Vacant(e) => {
                e.insert(t);
            }
            Entry::Occupied(e) if *e.get() != t => {
                return Err(format_error(
                    path,
                    line,
                    format!(
                        "frame {frame} has timestamp {t}, earlier records say {}",
                        e.get()
                    ),
                ));
            }
            Entry::Occupied(_) => {}
        }
        let k = *index.entry(landmark).or_insert_with(|| {
            tracks.push(FeatureTrack {
                landmark_id: landmark,
                observations: Vec::new(),
            });
            tracks.len() - 1
        });
        tracks[k].observations.push(Observation {
            frame_id: frame,
            pixel: Vector2::new(u, v),
        });
    }
    let mut frames: Vec<CameraFrame> = frames
        .into_iter()
        .map(|(id, timestamp)| CameraFrame { id, timestamp })
        .collect();
    frames.sort_by(|a, b| a.timestamp.total_cmp(&b.timestamp).then(a.id.cmp(&b.id)));
    Ok(TrackData { frames, tracks })
}

pub fn load_tracks(path: &Path) -> Result<TrackData> {
    parse_tracks(&read_text(path)?, path)
}

/// Observations whose frame is missing from `frames` are skipped.
pub fn format_tracks(frames: &[CameraFrame], tracks: &[FeatureTrack]) -> String {
    let times: std::collections::HashMap<u64, f64> =
        frames.iter().map(|f| (f.id, f.timestamp)).collect();
    let mut s = String::from("# landmark_id frame_id timestamp u v\n");
    for track in tracks {
        for o in &track.observations {
            if let Some(t) = times.get(&o.frame_id) {
                let _ = writeln!(
                    s,
                    "{} {} {} {} {}",
                    track.landmark_id,
                    o.frame_id,
                    fmt_f64(*t),
                    fmt_f64(o.pixel.x),
                    fmt_f64(o.pixel.y)
                );
            }
        }
    }
    s
}

pub fn write_tracks(path: &Path, frames: &[CameraFrame], tracks: &[FeatureTrack]) -> Result<()> {
    write_text(path, &format_tracks(frames, tracks))
}

// Intrinsics

pub fn parse_intrinsics(text: &str, path: &Path) -> Result<CameraIntrinsics> {
    let mut lines = data_lines(text);
    let (line, l) = lines
        .next()
        .ok_or_else(|| format_error(path, 1, "missing intrinsics record"))?;
    if let Some((extra, _)) = lines.next() {
        return Err(format_error(
            path,
            extra,
            "expected a single intrinsics record",
        ));
    }
    let [fx, fy, cx, cy, w, h] = parse_fields::<6>(path, line, l)?;
    let size = |v: f64| -> Result<u32> {
        if v.fract() == 0.0 && v >= 1.0 && v <= u32::MAX as f64 {
            Ok(v as u32)
        } else {
            Err(format_error(path, line, format!("invalid image size {v}")))
        }
    };
    CameraIntrinsics::new(fx, fy, cx, cy, size(w)?, size(h)?)
        .map_err(|e| format_error(path, line, e.to_string()))
}

pub fn load_intrinsics(path: &Path) -> Result<CameraIntrinsics> {
    parse_intrinsics(&read_text(path)?, path)
}

pub fn format_intrinsics(k: &CameraIntrinsics) -> String {
    format!(
        "# fx fy cx cy width height\n{} {} {} {} {} {}\n",
        fmt_f64(k.fx),
        fmt_f64(k.fy),
        fmt_f64(k.cx),
        fmt_f64(k.cy),
        k.width,
        k.height
    )
}

pub fn write_intrinsics(path: &Path, k: &CameraIntrinsics) -> Result<()> {
    write_text(path, &format_intrinsics(k))
}

// Key-value documents

/// `key = value` entries with line numbers; `#` starts a comment line.
pub fn parse_key_values(text: &str, path: &Path) -> Result<Vec<(usize, String, String)>> {
    data_lines(text)
        .map(|(line, l)| {
            let (k, v) = l
                .split_once('=')
                .ok_or_else(|| format_error(path, line, "expected 'key = value'"))?;
            let k = k.trim();
            if k.is_empty() {
                return Err(format_error(path, line, "empty key"));
            }
            Ok((line, k.to_string(), v.trim().to_string()))
        })
        .collect()
}

fn parse_value<T: std::str::FromStr>(v: &str) -> std::result::Result<T, String> {
    v.parse().map_err(|_| format!("invalid value '{v}'"))
}

fn parse_float(v: &str) -> std::result::Result<f64, String> {
    let x: f64 = parse_value(v)?;
    if x.is_finite() {
        Ok(x)
    } else {
        Err(format!("non-finite value '{v}'"))
    }
}

fn parse_list<T: std::str::FromStr>(v: &str) -> std::result::Result<Vec<T>, String> {
    v.split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(parse_value)
        .collect()
}

fn parse_floats(v: &str) -> std::result::Result<Vec<f64>, String> {
    v.split_whitespace().map(parse_float).collect()
}

fn parse_pose_value(v: &str) -> std::result::Result<Pose, String> {
    let f = parse_floats(v)?;
    let [tx, ty, tz, qx, qy, qz, qw] = f[..] else {
        return Err(format!("expected 'tx ty tz qx qy qz qw', got '{v}'"));
    };
    let rotation = quaternion_from(Path::new(""), 0, [qx, qy, qz, qw]).map_err(|e| match e {
        Error::Format { message, .. } => message,
        e => e.to_string(),
    })?;
    Ok(Pose::new(rotation, Vector3::new(tx, ty, tz)))
}

fn format_pose_value(p: &Pose) -> String {
    join(&pose_fields(p), " ")
}

fn format_list<T: ToString>(v: &[T]) -> String {
    v.iter().map(T::to_string).collect::<Vec<_>>().join(", ")
}

fn format_float_list(v: &[f64]) -> String {
    v.iter().map(|x| fmt_f64(*x)).collect::<Vec<_>>().join(", ")
}

fn kernel_name(k: RobustKernel) -> &'static str {
    match k {
        RobustKernel::Huber => "huber",
        RobustKernel::Cauchy => "cauchy",
        RobustKernel::None => "none",
    }
}

fn lag_mode_name(m: StepMode) -> &'static str {
    match m {
        StepMode::Joint => "joint",
        StepMode::LagMarginal => "marginal",
        StepMode::LagConditional => "conditional",
    }
}

// Configuration

/// Settings of the `simulate` sweeps.
#[derive(Debug, Clone, PartialEq)]
pub struct SweepConfig {
    pub frame_counts: Vec<usize>,
    pub motion_levels_deg: Vec<f64>,
    pub motion_samples: Vec<usize>,
    pub motion_noise: Vec<f64>,
    /// Clock errors injected into the coarse stage, seconds.
    pub sync_errors: Vec<f64>,
    /// True lags for the refine-only lag sweep, seconds.
    pub lags: Vec<f64>,
    /// The refine-only lag sweep runs on a shorter, faster segment.
    pub lag_segment_duration: f64,
    pub lag_segment_camera_rate: f64,
    pub lag_segment_keyframes: usize,
}

impl Default for SweepConfig {
    fn default() -> Self {
        Self {
            frame_counts: vec![10, 20, 30, 50],
            motion_levels_deg: vec![5.0, 10.0, 30.0],
            motion_samples: vec![15, 40],
            motion_noise: vec![0.002, 0.01],
            sync_errors: vec![-0.5, -0.3, -0.1, 0.1, 0.3, 0.5],
            lags: vec![0.0, 0.033, 0.066, 0.099, 0.133],
            lag_segment_duration: 12.0,
            lag_segment_camera_rate: 30.0,
            lag_segment_keyframes: 100,
        }
    }
}

/// Every tunable of the pipeline, one namespace per module.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Config {
    pub coarse: CoarseConfig,
    pub refine: RefineConfig,
    pub sim: Scenario,
    pub sweep: SweepConfig,
}

impl Config {
    /// Applies one `key = value` entry.
    pub fn set(&mut self, key: &str, value: &str) -> std::result::Result<(), String> {
        let v = value;
        let c = &mut self.coarse;
        let r = &mut self.refine;
        let s = &mut self.sim;
        let w = &mut self.sweep;
        match key {
            "coarse.lidar_onset_threshold" => c.onset.lidar_threshold = parse_float(v)?,
            "coarse.lidar_onset_hold" => c.onset.lidar_hold = parse_value(v)?,
            "coarse.camera_onset_threshold" => c.onset.camera_threshold = parse_float(v)?,
            "coarse.camera_onset_hold" => c.onset.camera_hold = parse_value(v)?,
            "coarse.pair_count" => c.pairs.count = parse_value(v)?,
            "coarse.min_pair_angle" => c.pairs.min_angle = parse_float(v)?,
            "coarse.excursion_target" => c.pairs.excursion_target = parse_float(v)?,
            "coarse.time_offset" => {
                c.time_offset = if v == "none" {
                    None
                } else {
                    Some(parse_float(v)?)
                }
            }
            "refine.keyframes" => r.keyframes = parse_value(v)?,
            "refine.robust_kernel" => {
                r.robust.kernel = match v {
                    "huber" => RobustKernel::Huber,
                    "cauchy" => RobustKernel::Cauchy,
                    "none" => RobustKernel::None,
                    _ => return Err(format!("unknown kernel '{v}' (huber, cauchy, none)")),
                }
            }
            "refine.robust_scale" => {
                r.robust = RobustWeight::new(r.robust.kernel, parse_float(v)?)
                    .map_err(|e| e.to_string())?
            }
            "refine.max_iterations" => r.max_iterations = parse_value(v)?,
            "refine.lag_iterations" => r.lag_iterations = parse_value(v)?,
            "refine.lag_mode" => {
                r.lag_mode = match v {
                    "marginal" => StepMode::LagMarginal,
                    "conditional" => StepMode::LagConditional,
                    "joint" => StepMode::Joint,
                    _ => {
                        return Err(format!(
                            "unknown lag mode '{v}' (marginal, conditional, joint)"
                        ))
                    }
                }
            }
            "refine.step_tolerance" => r.step_tolerance = parse_float(v)?,
            "refine.cost_tolerance" => r.cost_tolerance = parse_float(v)?,
            "refine.initial_damping" => r.initial_damping = parse_float(v)?,
            "refine.damping_increase" => r.damping_increase = parse_float(v)?,
            "refine.damping_decrease" => r.damping_decrease = parse_float(v)?,
            "refine.max_rejections" => r.max_rejections = parse_value(v)?,
            "refine.min_track_length" => r.min_track_length = parse_value(v)?,
            "refine.min_parallax_deg" => r.min_parallax_deg = parse_float(v)?,
            "refine.max_excluded_fraction" => r.max_excluded_fraction = parse_float(v)?,
            "refine.reinit_extrinsic" => r.reinit_extrinsic = parse_value(v)?,
            "refine.lag_only" => r.lag_only = parse_value(v)?,
            "refine.inlier_threshold" => r.inlier_threshold = parse_float(v)?,
            "refine.polish_iterations" => r.polish_iterations = parse_value(v)?,
            "refine.pair_count" => r.pairs.count = parse_value(v)?,
            "refine.min_pair_angle" => r.pairs.min_angle = parse_float(v)?,
            "refine.excursion_target" => r.pairs.excursion_target = parse_float(v)?,
            "sim.profile" => {
                s.profile = Profile::parse(v).ok_or_else(|| {
                    format!("unknown profile '{v}' (handheld-sinusoid, arc, stationary-then-move)")
                })?
            }
            "sim.duration" => s.duration = parse_float(v)?,
            "sim.lidar_rate" => s.lidar_rate = parse_float(v)?,
            "sim.camera_rate" => s.camera_rate = parse_float(v)?,
            "sim.camera_margin" => s.camera_margin = parse_float(v)?,
            "sim.extrinsic" => s.extrinsic = parse_pose_value(v)?,
            "sim.lag" => s.lag = parse_float(v)?,
            "sim.camera_scale" => {
                s.camera_scale = if v == "random" {
                    None
                } else {
                    Some(parse_float(v)?)
                }
            }
            "sim.pixel_noise" => s.pixel_noise = parse_float(v)?,
            "sim.rotation_noise" => s.rotation_noise = parse_float(v)?,
            "sim.landmark_count" => s.landmark_count = parse_value(v)?,
            "sim.landmark_radius" => s.landmark_radius = parse_float(v)?,
            "sim.landmark_min_distance" => s.landmark_min_distance = parse_float(v)?,
            "sim.rotation_amplitude" => s.rotation_amplitude = parse_float(v)?,
            "sim.translation_amplitude" => s.translation_amplitude = parse_float(v)?,
            "sim.period_min" => s.period_range.0 = parse_float(v)?,
            "sim.period_max" => s.period_range.1 = parse_float(v)?,
            "sim.onset" => s.onset = parse_float(v)?,
            "sim.intrinsics" => {
                s.intrinsics =
                    parse_intrinsics(v, Path::new("sim.intrinsics")).map_err(|e| match e {
                        Error::Format { message, .. } => message,
                        e => e.to_string(),
                    })?
            }
            "sim.min_visible" => s.min_visible = parse_value(v)?,
            "sim.seed" => s.seed = parse_value(v)?,
            "sweep.frame_counts" => w.frame_counts = parse_list(v)?,
            "sweep.motion_levels_deg" => w.motion_levels_deg = parse_list(v)?,
            "sweep.motion_samples" => w.motion_samples = parse_list(v)?,
            "sweep.motion_noise" => w.motion_noise = parse_list(v)?,
            "sweep.sync_errors" => w.sync_errors = parse_list(v)?,
            "sweep.lags" => w.lags = parse_list(v)?,
            "sweep.lag_segment_duration" => w.lag_segment_duration = parse_float(v)?,
            "sweep.lag_segment_camera_rate" => w.lag_segment_camera_rate = parse_float(v)?,
            "sweep.lag_segment_keyframes" => w.lag_segment_keyframes = parse_value(v)?,
            _ => return Err(format!("unknown key '{key}'")),
        }
        Ok(())
    }

    /// Every key with its current value, in file order.
    pub fn entries(&self) -> Vec<(&'static str, String)> {
        let c = &self.coarse;
        let r = &self.refine;
        let s = &self.sim;
        let w = &self.sweep;
        let f = fmt_f64;
        let k = &s.intrinsics;
        vec![
            ("coarse.lidar_onset_threshold", f(c.onset.lidar_threshold)),
            ("coarse.lidar_onset_hold", c.onset.lidar_hold.to_string()),
            ("coarse.camera_onset_threshold", f(c.onset.camera_threshold)),
            ("coarse.camera_onset_hold", c.onset.camera_hold.to_string()),
            ("coarse.pair_count", c.pairs.count.to_string()),
            ("coarse.min_pair_angle", f(c.pairs.min_angle)),
            ("coarse.excursion_target", f(c.pairs.excursion_target)),
            ("coarse.time_offset", c.time_offset.map_or("none".into(), f)),
            ("refine.keyframes", r.keyframes.to_string()),
            ("refine.robust_kernel", kernel_name(r.robust.kernel).into()),
            ("refine.robust_scale", f(r.robust.scale)),
            ("refine.max_iterations", r.max_iterations.to_string()),
            ("refine.lag_iterations", r.lag_iterations.to_string()),
            ("refine.lag_mode", lag_mode_name(r.lag_mode).into()),
            ("refine.step_tolerance", f(r.step_tolerance)),
            ("refine.cost_tolerance", f(r.cost_tolerance)),
            ("refine.initial_damping", f(r.initial_damping)),
            ("refine.damping_increase", f(r.damping_increase)),
            ("refine.damping_decrease", f(r.damping_decrease)),
            ("refine.max_rejections", r.max_rejections.to_string()),
            ("refine.min_track_length", r.min_track_length.to_string()),
            ("refine.min_parallax_deg", f(r.min_parallax_deg)),
            ("refine.max_excluded_fraction", f(r.max_excluded_fraction)),
            ("refine.reinit_extrinsic", r.reinit_extrinsic.to_string()),
            ("refine.lag_only", r.lag_only.to_string()),
            ("refine.inlier_threshold", f(r.inlier_threshold)),
            ("refine.polish_iterations", r.polish_iterations.to_string()),
            ("refine.pair_count", r.pairs.count.to_string()),
            ("refine.min_pair_angle", f(r.pairs.min_angle)),
            ("refine.excursion_target", f(r.pairs.excursion_target)),
            ("sim.profile", s.profile.name().into()),
            ("sim.duration", f(s.duration)),
            ("sim.lidar_rate", f(s.lidar_rate)),
            ("sim.camera_rate", f(s.camera_rate)),
            ("sim.camera_margin", f(s.camera_margin)),
            ("sim.extrinsic", format_pose_value(&s.extrinsic)),
            ("sim.lag", f(s.lag)),
            (
                "sim.camera_scale",
                s.camera_scale.map_or("random".into(), f),
            ),
            ("sim.pixel_noise", f(s.pixel_noise)),
            ("sim.rotation_noise", f(s.rotation_noise)),
            ("sim.landmark_count", s.landmark_count.to_string()),
            ("sim.landmark_radius", f(s.landmark_radius)),
            ("sim.landmark_min_distance", f(s.landmark_min_distance)),
            ("sim.rotation_amplitude", f(s.rotation_amplitude)),
            ("sim.translation_amplitude", f(s.translation_amplitude)),
            ("sim.period_min", f(s.period_range.0)),
            ("sim.period_max", f(s.period_range.1)),
            ("sim.onset", f(s.onset)),
            (
                "sim.intrinsics",
                format!(
                    "{} {} {} {} {} {}",
                    f(k.fx),
                    f(k.fy),
                    f(k.cx),
                    f(k.cy),
                    k.width,
                    k.height
                ),
            ),
            ("sim.min_visible", s.min_visible.to_string()),
            ("sim.seed", s.seed.to_string()),
            ("sweep.frame_counts", format_list(&w.frame_counts)),
            (
                "sweep.motion_levels_deg",
                format_float_list(&w.motion_levels_deg),
            ),
            ("sweep.motion_samples", format_list(&w.motion_samples)),
            ("sweep.motion_noise", format_float_list(&w.motion_noise)),
            ("sweep.sync_errors", format_float_list(&w.sync_errors)),
            ("sweep.lags", format_float_list(&w.lags)),
            ("sweep.lag_segment_duration", f(w.lag_segment_duration)),
            (
                "sweep.lag_segment_camera_rate",
                f(w.lag_segment_camera_rate),
            ),
            (
                "sweep.lag_segment_keyframes",
                w.lag_segment_keyframes.to_string(),
            ),
        ]
    }

    /// Defaults overridden by the entries of `text`.
    pub fn parse(text: &str, path: &Path) -> Result<Self> {
        let mut config = Config::default();
        for (line, k, v) in parse_key_values(text, path)? {
            config
                .set(&k, &v)
                .map_err(|m| format_error(path, line, m))?;
        }
        Ok(config)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::parse(&read_text(path)?, path)
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for (k, v) in self.entries() {
            let _ = writeln!(s, "{k} = {v}");
        }
        s
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_text(path, &self.to_text())
    }
}

// Ground truth

pub fn format_ground_truth(truth: &GroundTruth) -> String {
    let mut s = String::from("# simulated ground truth\n");
    let _ = writeln!(s, "extrinsic = {}", format_pose_value(&truth.extrinsic));
    let _ = writeln!(s, "lag = {}", fmt_f64(truth.lag));
    let _ = writeln!(s, "scale = {}", fmt_f64(truth.scale));
    let _ = writeln!(
        s,
        "camera_world = {}",
        format_pose_value(&truth.camera_world)
    );
    let _ = writeln!(s, "onset = {}", truth.onset.map_or("none".into(), fmt_f64));
    s
}

pub fn parse_ground_truth(text: &str, path: &Path) -> Result<GroundTruth> {
    let mut truth = GroundTruth {
        extrinsic: Pose::identity(),
        lag: 0.0,
        scale: 1.0,
        camera_world: Pose::identity(),
        onset: None,
    };
    let mut have_extrinsic = false;
    for (line, k, v) in parse_key_values(text, path)? {
        let apply = |truth: &mut GroundTruth| -> std::result::Result<(), String> {
            match k.as_str() {
                "extrinsic" => truth.extrinsic = parse_pose_value(&v)?,
                "lag" => truth.lag = parse_float(&v)?,
                "scale" => truth.scale = parse_float(&v)?,
                "camera_world" => truth.camera_world = parse_pose_value(&v)?,
                "onset" => {
                    truth.onset = if v == "none" {
                        None
                    } else {
                        Some(parse_float(&v)?)
                    }
                }
                _ => return Err(format!("unknown key '{k}'")),
            }
            Ok(())
        };
        apply(&mut truth).map_err(|m| format_error(path, line, m))?;
        have_extrinsic |= k == "extrinsic";
    }
    if !have_extrinsic {
        return Err(format_error(path, 1, "missing 'extrinsic'"));
    }
    Ok(truth)
}

pub fn load_ground_truth(path: &Path) -> Result<GroundTruth> {
    parse_ground_truth(&read_text(path)?, path)
}

pub fn write_ground_truth(path: &Path, truth: &GroundTruth) -> Result<()> {
    write_text(path, &format_ground_truth(truth))
}

// Datasets

/// File names used by [`write_dataset`].
pub const LIDAR_FILE: &str = "lidar_trajectory.txt";
pub const CAMERA_FILE: &str = "camera_trajectory.txt";
pub const TRACKS_FILE: &str = "tracks.txt";
pub const INTRINSICS_FILE: &str = "intrinsics.txt";
pub const GROUND_TRUTH_FILE: &str = "ground_truth.txt";

/// Writes a simulated dataset as the five input files of `calibrate`.
pub fn write_dataset(dir: &Path, data: &sim::SimDataset) -> Result<()> {
    CalibrationInputs::from_sim(data).save(dir, Some(&data.truth))
}

/// Everything `calibrate` reads from disk.
#[derive(Debug, Clone)]
pub struct CalibrationInputs {
    pub lidar: ContinuousTrajectory,
    /// Camera clock, translation up to scale.
    pub camera_poses: Vec<StampedPose>,
    pub tracks: TrackData,
    pub intrinsics: CameraIntrinsics,
}

impl CalibrationInputs {
    pub fn load(lidar: &Path, camera: &Path, tracks: &Path, intrinsics: &Path) -> Result<Self> {
        Ok(Self {
            lidar: load_trajectory(lidar)?,
            camera_poses: read_trajectory(camera)?.poses,
            tracks: load_tracks(tracks)?,
            intrinsics: load_intrinsics(intrinsics)?,
        })
    }

    /// Writes the inputs, and `truth` when given, under the names of [`write_dataset`].
    pub fn save(&self, dir: &Path, truth: Option<&GroundTruth>) -> Result<()> {
        fs::create_dir_all(dir).map_err(|source| Error::Io {
            path: dir.to_path_buf(),
            source,
        })?;
        write_trajectory(
            &dir.join(LIDAR_FILE),
            self.lidar.clock_id(),
            self.lidar.knots(),
        )?;
        write_trajectory(&dir.join(CAMERA_FILE), "camera", &self.camera_poses)?;
        write_tracks(
            &dir.join(TRACKS_FILE),
            &self.tracks.frames,
            &self.tracks.tracks,
        )?;
        write_intrinsics(&dir.join(INTRINSICS_FILE), &self.intrinsics)?;
        match truth {
            Some(t) => write_ground_truth(&dir.join(GROUND_TRUTH_FILE), t),
            None => Ok(()),
        }
    }

    pub fn from_sim(data: &sim::SimDataset) -> Self {
        Self {
            lidar: data.lidar.clone(),
            camera_poses: data.camera_poses.clone(),
            tracks: TrackData {
                frames: data.frames.clone(),
                tracks: data.tracks.clone(),
            },
            intrinsics: data.intrinsics,
        }
    }
}

// Report

/// Which pipeline stages produced a report.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RunMode {
    Full,
    CoarseOnly,
    TauOnly,
}

impl RunMode {
    pub fn name(&self) -> &'static str {
        match self {
            RunMode::Full => "full",
            RunMode::CoarseOnly => "coarse-only",
            RunMode::TauOnly => "tau-only",
        }
    }
}

/// Outcome of a `calibrate` run.
#[derive(Debug, Clone, PartialEq)]
pub struct CalibrationReport {
    pub mode: RunMode,
    pub coarse: CoarseResult,
    pub refine: Option<RefineResult>,
    pub truth: Option<GroundTruth>,
    pub config: Config,
    pub seed: u64,
}

impl CalibrationReport {
    /// Final LiDAR-from-camera extrinsic.
    pub fn extrinsic(&self) -> Pose {
        self.refine
            .as_ref()
            .map_or(self.coarse.extrinsic, |r| r.extrinsic)
    }

    /// Final lag, seconds added to camera timestamps.
    pub fn tau(&self) -> f64 {
        self.refine
            .as_ref()
            .map_or(self.coarse.time_offset, |r| r.tau)
    }

    pub fn to_text(&self) -> Result<String> {
        let f = fmt_f64;
        let mut s = String::new();
        let mut kv = |k: &str, v: String| {
            let _ = writeln!(s, "{k} = {v}");
        };
        kv("version", VERSION.into());
        kv("mode", self.mode.name().into());
        kv("seed", self.seed.to_string());
        let x = self.extrinsic();
        let m = x.matrix();
        let rows: Vec<f64> = (0..4)
            .flat_map(|i| (0..4).map(move |j| m[(i, j)]))
            .collect();
        kv("extrinsic.matrix", join(&rows, " "));
        kv("extrinsic.pose", format_pose_value(&x));
        let xi = sim::extrinsic_twist(&x)?;
        kv("extrinsic.twist", join(xi.0.as_slice(), " "));
        kv("scale", f(self.coarse.scale));
        kv("tau_ms", f(self.tau() * 1e3));
        kv("tau", f(self.tau()));
        let c = &self.coarse;
        kv("coarse.extrinsic", format_pose_value(&c.extrinsic));
        kv("coarse.time_offset", f(c.time_offset));
        kv("coarse.pairs", c.pairs.to_string());
        kv("coarse.rotation_conditioning", f(c.conditioning.rotation));
        kv(
            "coarse.translation_conditioning",
            f(c.conditioning.translation),
        );
        if let Some(r) = &self.refine {
            kv("refine.converged", r.converged.to_string());
            kv("refine.lag_iterations", r.lag_iterations.to_string());
            kv("refine.joint_iterations", r.joint_iterations.to_string());
            kv("refine.keyframes", r.keyframes.to_string());
            kv("refine.tracks", r.tracks.to_string());
            kv("refine.reprojection_cost", f(r.reprojection_cost));
            kv(
                "refine.mean_reprojection_error",
                f(r.mean_reprojection_error),
            );
            kv("refine.inlier_ratio", f(r.inlier_ratio));
            kv(
                "refine.lag_cost_history",
                format_float_list(&r.lag_cost_history),
            );
            kv("refine.cost_history", format_float_list(&r.cost_history));
        }
        if let Some(truth) = &self.truth {
            let e = sim::evaluate(&c.extrinsic, c.time_offset, truth);
            kv("truth.coarse.rotation_error", f(e.e_r));
            kv("truth.coarse.translation_error", f(e.e_t));
            kv("truth.coarse.tau_error_ms", f(e.e_tau * 1e3));
            kv(
                "truth.coarse.scale_relative_error",
                f((c.scale - truth.scale).abs() / truth.scale),
            );
            if let Some(r) = &self.refine {
                let e = sim::evaluate(&r.extrinsic, r.tau, truth);
                kv("truth.refine.rotation_error", f(e.e_r));
                kv("truth.refine.translation_error", f(e.e_t));
                kv("truth.refine.tau_error_ms", f(e.e_tau * 1e3));
            }
        }
        for (k, v) in self.config.entries() {
            kv(&format!("config.{k}"), v);
        }
        Ok(s)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_text(path, &self.to_text()?)
    }
}

/// Extrinsic, lag and scale read back from a report.
#[derive(Debug, Clone, PartialEq)]
pub struct ReportSummary {
    pub extrinsic: Pose,
    pub tau: f64,
    pub scale: f64,
}

pub fn parse_report(text: &str, path: &Path) -> Result<ReportSummary> {
    let (mut extrinsic, mut tau, mut scale) = (None, None, None);
    for (line, k, v) in parse_key_values(text, path)? {
        let err = |m: String| format_error(path, line, m);
        match k.as_str() {
            "extrinsic.pose" => extrinsic = Some(parse_pose_value(&v).map_err(err)?),
            "tau" => tau = Some(parse_float(&v).map_err(err)?),
            "scale" => scale = Some(parse_float(&v).map_err(err)?),
            _ => {}
        }
    }
    let missing = |k: &str| format_error(path, 1, format!("missing '{k}'"));
    Ok(ReportSummary {
        extrinsic: extrinsic.ok_or_else(|| missing("extrinsic.pose"))?,
        tau: tau.ok_or_else(|| missing("tau"))?,
        scale: scale.ok_or_else(|| missing("scale"))?,
    })
}

pub fn load_report(path: &Path) -> Result<ReportSummary> {
    parse_report(&read_text(path)?, path)
}

// CSV tables

fn csv_error(path: &Path, e: csv::Error) -> Error {
    let source = match e.into_kind() {
        csv::ErrorKind::Io(e) => e,
        k => std::io::Error::other(format!("{k:?}")),
    };
    Error::Io {
        path: path.to_path_buf(),
        source,
    }
}

pub fn write_csv(path: &Path, header: &[&str], rows: &[Vec<String>]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_error(path, e))?;
    w.write_record(header).map_err(|e| csv_error(path, e))?;
    for r in rows {
        w.write_record(r).map_err(|e| csv_error(path, e))?;
    }
    w.flush().map_err(|source| Error::Io {
        path: path.to_path_buf(),
        source,
    })
}

const ERROR_COLUMNS: [&str; 10] = [
    "trials",
    "failures",
    "e_r_mean",
    "e_r_var",
    "e_t_mean",
    "e_t_var",
    "e_tau_mean",
    "e_tau_var",
    "abs_e_tau_mean",
    "abs_e_tau_var",
];

fn error_cells(r: &ErrorReport) -> Vec<String> {
    let mut v = vec![r.trials.len().to_string(), r.failures.to_string()];
    for s in [r.e_r(), r.e_t(), r.e_tau(), r.abs_e_tau()] {
        v.push(fmt_f64(s.mean));
        v.push(fmt_f64(s.variance));
    }
    v
}

fn prefixed(prefix: &str) -> Vec<String> {
    ERROR_COLUMNS
        .iter()
        .map(|c| format!("{prefix}{c}"))
        .collect()
}

pub fn write_frame_sweep(path: &Path, rows: &[FrameSweepRow]) -> Result<()> {
    let header: Vec<String> = std::iter::once("frames".to_string())
        .chain(prefixed(""))
        .collect();
    let header: Vec<&str> = header.iter().map(String::as_str).collect();
    let rows: Vec<Vec<String>> = rows
        .iter()
        .map(|r| {
            let mut v = vec![r.frames.to_string()];
            v.extend(error_cells(&r.report));
            v
        })
        .collect();
    write_csv(path, &header, &rows)
}

pub fn write_lag_coarse_sweep(path: &Path, rows: &[CoarseLagRow]) -> Result<()> {
    let header: Vec<String> = std::iter::once("sync_error".to_string())
        .chain(prefixed("coarse_"))
        .chain(prefixed("refined_"))
        .collect();
    let header: Vec<&str> = header.iter().map(String::as_str).collect();
    let rows: Vec<Vec<String>> = rows
        .iter()
        .map(|r| {
            let mut v = vec![fmt_f64(r.sync_error)];
            v.extend(error_cells(&r.coarse));
            v.extend(error_cells(&r.refined));
            v
        })
        .collect();
    write_csv(path, &header, &rows)
}

pub fn write_lag_refine_sweep(path: &Path, rows: &[RefineLagRow]) -> Result<()> {
    let header: Vec<String> = std::iter::once("lag".to_string())
        .chain(prefixed(""))
        .collect();
    let header: Vec<&str> = header.iter().map(String::as_str).collect();
    let rows: Vec<Vec<String>> = rows
        .iter()
        .map(|r| {
            let mut v = vec![fmt_f64(r.lag)];
            v.extend(error_cells(&r.report));
            v
        })
        .collect();
    write_csv(path, &header, &rows)
}

pub fn write_motion_sweep(path: &Path, cells: &[MotionSweepCell]) -> Result<()> {
    let rows: Vec<Vec<String>> = cells
        .iter()
        .map(|c| {
            vec![
                fmt_f64(c.noise),
                c.samples.to_string(),
                fmt_f64(c.level_deg),
                fmt_f64(c.mean_rotation_error),
                c.failures.to_string(),
            ]
        })
        .collect();
    write_csv(
        path,
        &[
            "noise",
            "samples",
            "level_deg",
            "mean_rotation_error",
            "failures",
        ],
        &rows,
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    const P: &str = "test.txt";

    #[test]
    fn two_line_trajectory() {
        let text = "# clock: lidar\n0 0 0 0 0 0 0 1\n1 1 0 0 0 0 0 1\n";
        let r = parse_trajectory(text, Path::new(P)).unwrap();
        assert_eq!(r.clock, "lidar");
        assert_eq!(r.poses.len(), 2);
        assert_eq!(r.poses[1].pose.translation, Vector3::new(1.0, 0.0, 0.0));
    }

    #[test]
    fn bad_quaternion_norm_names_line() {
        let text = "0 0 0 0 0 0 0 1\n# note\n1 0 0 0 0 0 0 0.5\n";
        match parse_trajectory(text, Path::new(P)) {
            Err(Error::Format { line, .. }) => assert_eq!(line, 3),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn non_monotone_timestamp_names_first_offender() {
        let text = "0 0 0 0 0 0 0 1\n1 0 0 0 0 0 0 1\n1 0 0 0 0 0 0 1\n0.5 0 0 0 0 0 0 1\n";
        match parse_trajectory(text, Path::new(P)) {
            Err(Error::Format { line, .. }) => assert_eq!(line, 3),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn single_record_is_too_short() {
        let r = parse_trajectory("0 0 0 0 0 0 0 1\n", Path::new(P));
        assert!(matches!(r, Err(Error::TooShort { found: 1, .. })));
    }

    #[test]
    fn duplicate_track_observation_rejected() {
        let text = "1 0 0.0 10 10\n1 0 0.0 11 11\n";
        assert!(matches!(
            parse_tracks(text, Path::new(P)),
            Err(Error::Format { line: 2, .. })
        ));
    }

    #[test]
    fn inconsistent_frame_time_rejected() {
        let text = "1 0 0.0 10 10\n2 0 0.1 11 11\n";
        assert!(matches!(
            parse_tracks(text, Path::new(P)),
            Err(Error::Format { line: 2, .. })
        ));
    }

    #[test]
    fn config_overrides_and_rejects_unknown_keys() {
        let c = Config::parse("refine.keyframes = 12\nsim.profile = arc\n", Path::new(P)).unwrap();
        assert_eq!(c.refine.keyframes, 12);
        assert_eq!(c.sim.profile, Profile::Arc);
        assert!(matches!(
            Config::parse("refine.nope = 1\n", Path::new(P)),
            Err(Error::Format { line: 1, .. })
        ));
    }

    #[test]
    fn float_formatting_is_exact() {
        for x in [0.1, 1e-20, 123456.789, -0.0, 1.0 / 3.0] {
            assert_eq!(fmt_f64(x).parse::<f64>().unwrap().to_bits(), x.to_bits());
        }
    }
}
