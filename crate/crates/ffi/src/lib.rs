//! C ABI for lidarcam-calib.
//!
//! Objects are opaque handles created by `lc_*_new`/`lc_*_load` functions
//! and released with the matching `lc_*_free`. Every fallible call returns
//! an `LcStatus`; on failure `lc_last_error_message` describes the error
//! on the calling thread. Poses cross the boundary as seven doubles
//! `tx ty tz qx qy qz qw` (scalar-last quaternion).

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;
use std::ptr;

use lidarcam_calib::cli::run_calibration;
use lidarcam_calib::geometry::{ContinuousTrajectory, Pose, Rotation, StampedPose};
use lidarcam_calib::io::{self, CalibrationInputs, CalibrationReport, Config, RunMode};
use lidarcam_calib::nalgebra::{Quaternion, UnitQuaternion, Vector3};
use lidarcam_calib::sim::{self, Scenario};
use lidarcam_calib::{Error, Stage};

/// Result of every fallible call.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LcStatus {
    Ok = 0,
    /// A required pointer argument was null.
    NullPointer = 1,
    InvalidArgument = 2,
    /// File could not be read or written.
    Io = 3,
    /// File contents are malformed.
    Format = 4,
    /// Rough synchronization failed, e.g. no motion onset.
    RoughSync = 5,
    /// Too little or degenerate motion for the closed-form stage.
    Excitation = 6,
    /// The refinement could not build or solve its problem.
    Refinement = 7,
    /// Simulation scenario cannot produce a usable dataset.
    Scenario = 8,
    /// Internal error; the library panicked.
    Internal = 9,
}

/// Which stages `lc_calibrate` runs.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LcMode {
    Full = 0,
    CoarseOnly = 1,
    TauOnly = 2,
}

/// Piecewise-geodesic trajectory.
pub struct LcTrajectory {
    inner: ContinuousTrajectory,
}

/// Trajectories, feature tracks and intrinsics for one calibration.
pub struct LcDataset {
    inner: CalibrationInputs,
    truth: Option<sim::GroundTruth>,
}

/// Pipeline configuration.
pub struct LcConfig {
    inner: Config,
}

/// Calibration outcome.
pub struct LcResult {
    inner: CalibrationReport,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_last_error(message: String) {
    let c = CString::new(message.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

fn status_of(e: &Error) -> LcStatus {
    match e.root() {
        Error::Io { .. } => LcStatus::Io,
        Error::Format { .. } | Error::TooShort { .. } => LcStatus::Format,
        Error::ScenarioInfeasible(_) => LcStatus::Scenario,
        Error::InvalidArgument(_) if e.stage().is_none() => LcStatus::InvalidArgument,
        _ => match e.stage() {
            Some(Stage::RoughSync) => LcStatus::RoughSync,
            Some(Stage::PairExtraction | Stage::Rotation | Stage::TranslationScale) => {
                LcStatus::Excitation
            }
            Some(Stage::LagRefinement | Stage::JointRefinement) => LcStatus::Refinement,
            None => LcStatus::InvalidArgument,
        },
    }
}

/// Runs `f`, recording errors and panics for `lc_last_error_message`.
fn guard(f: impl FnOnce() -> Result<(), (LcStatus, String)>) -> LcStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => LcStatus::Ok,
        Ok(Err((status, message))) => {
            set_last_error(message);
            status
        }
        Err(_) => {
            set_last_error("internal error".into());
            LcStatus::Internal
        }
    }
}

fn fail(e: Error) -> (LcStatus, String) {
    (status_of(&e), e.to_string())
}

fn null(name: &str) -> (LcStatus, String) {
    (LcStatus::NullPointer, format!("{name} is null"))
}

unsafe fn path_arg(p: *const c_char, name: &str) -> Result<PathBuf, (LcStatus, String)> {
    if p.is_null() {
        return Err(null(name));
    }
    CStr::from_ptr(p)
        .to_str()
        .map(PathBuf::from)
        .map_err(|_| (LcStatus::InvalidArgument, format!("{name} is not UTF-8")))
}

unsafe fn str_arg<'a>(p: *const c_char, name: &str) -> Result<&'a str, (LcStatus, String)> {
    if p.is_null() {
        return Err(null(name));
    }
    CStr::from_ptr(p)
        .to_str()
        .map_err(|_| (LcStatus::InvalidArgument, format!("{name} is not UTF-8")))
}

unsafe fn out_arg<'a, T>(p: *mut T, name: &str) -> Result<&'a mut T, (LcStatus, String)> {
    p.as_mut().ok_or_else(|| null(name))
}

unsafe fn handle<'a, T>(p: *const T, name: &str) -> Result<&'a T, (LcStatus, String)> {
    p.as_ref().ok_or_else(|| null(name))
}

fn pose_to_array(p: &Pose, out: &mut [f64; 7]) {
    let q = p.rotation.quaternion();
    *out = [
        p.translation.x,
        p.translation.y,
        p.translation.z,
        q.i,
        q.j,
        q.k,
        q.w,
    ];
}

fn pose_from_slice(v: &[f64]) -> Result<Pose, (LcStatus, String)> {
    let q = Quaternion::new(v[6], v[3], v[4], v[5]);
    let n = q.norm();
    if !(v.iter().all(|x| x.is_finite()) && (n - 1.0).abs() <= io::QUATERNION_NORM_TOLERANCE) {
        return Err((
            LcStatus::InvalidArgument,
            format!("pose must be finite with a unit quaternion (norm {n})"),
        ));
    }
    Ok(Pose::new(
        Rotation::from_quaternion(UnitQuaternion::from_quaternion(q)),
        Vector3::new(v[0], v[1], v[2]),
    ))
}

fn into_handle<T>(value: T, out: &mut *mut T) {
    *out = Box::into_raw(Box::new(value));
}

unsafe fn free_handle<T>(p: *mut T) {
    if !p.is_null() {
        drop(Box::from_raw(p));
    }
}

/// Message of the last failed call on this thread, or null. Valid until
/// the next failing call on the same thread.
#[no_mangle]
pub extern "C" fn lc_last_error_message() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn lc_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Builds a trajectory from `count` knots: `timestamps[i]` and
/// `poses[7 * i .. 7 * i + 7]`.
///
/// # Safety
/// `timestamps` must hold `count` doubles, `poses` `7 * count` doubles.
#[no_mangle]
pub unsafe extern "C" fn lc_trajectory_new(
    timestamps: *const f64,
    poses: *const f64,
    count: usize,
    clock: *const c_char,
    out: *mut *mut LcTrajectory,
) -> LcStatus {
    guard(|| {
        let out = out_arg(out, "out")?;
        if timestamps.is_null() || poses.is_null() {
            return Err(null("timestamps or poses"));
        }
        let clock = if clock.is_null() {
            ""
        } else {
            str_arg(clock, "clock")?
        };
        let ts = std::slice::from_raw_parts(timestamps, count);
        let ps = std::slice::from_raw_parts(poses, 7 * count);
        let knots = ts
            .iter()
            .zip(ps.chunks_exact(7))
            .map(|(t, p)| Ok(StampedPose::new(*t, pose_from_slice(p)?)))
            .collect::<Result<Vec<_>, _>>()?;
        let inner = ContinuousTrajectory::new(knots, clock).map_err(fail)?;
        into_handle(LcTrajectory { inner }, out);
        Ok(())
    })
}

/// Loads a trajectory file.
///
/// # Safety
/// `path` must be a NUL-terminated string and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn lc_trajectory_load(
    path: *const c_char,
    out: *mut *mut LcTrajectory,
) -> LcStatus {
    guard(|| {
        let out = out_arg(out, "out")?;
        let path = path_arg(path, "path")?;
        let inner = io::load_trajectory(&path).map_err(fail)?;
        into_handle(LcTrajectory { inner }, out);
        Ok(())
    })
}

/// Number of knots.
///
/// # Safety
/// `traj` must be a live handle or null.
#[no_mangle]
pub unsafe extern "C" fn lc_trajectory_len(traj: *const LcTrajectory) -> usize {
    traj.as_ref().map_or(0, |t| t.inner.knots().len())
}

/// Pose at time `t`, written as seven doubles to `pose_out`.
///
/// # Safety
/// `traj` must be a live handle and `pose_out` hold 7 doubles.
#[no_mangle]
pub unsafe extern "C" fn lc_trajectory_interpolate(
    traj: *const LcTrajectory,
    t: f64,
    pose_out: *mut f64,
) -> LcStatus {
    guard(|| {
        let traj = handle(traj, "traj")?;
        let out = out_arg(pose_out.cast::<[f64; 7]>(), "pose_out")?;
        let p = traj.inner.interpolate(t).map_err(fail)?;
        pose_to_array(&p, out);
        Ok(())
    })
}

/// # Safety
/// `traj` must be a handle from this library or null; it is invalid afterwards.
#[no_mangle]
pub unsafe extern "C" fn lc_trajectory_free(traj: *mut LcTrajectory) {
    free_handle(traj)
}

/// Default configuration.
///
/// # Safety
/// `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn lc_config_new(out: *mut *mut LcConfig) -> LcStatus {
    guard(|| {
        into_handle(
            LcConfig {
                inner: Config::default(),
            },
            out_arg(out, "out")?,
        );
        Ok(())
    })
}

/// Defaults overridden by a `key = value` file.
///
/// # Safety
/// `path` must be a NUL-terminated string and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn lc_config_load(path: *const c_char, out: *mut *mut LcConfig) -> LcStatus {
    guard(|| {
        let out = out_arg(out, "out")?;
        let inner = Config::load(&path_arg(path, "path")?).map_err(fail)?;
        into_handle(LcConfig { inner }, out);
        Ok(())
    })
}

/// Sets one configuration key, as in the config file.
///
/// # Safety
/// `config` must be a live handle; `key` and `value` NUL-terminated strings.
#[no_mangle]
pub unsafe extern "C" fn lc_config_set(
    config: *mut LcConfig,
    key: *const c_char,
    value: *const c_char,
) -> LcStatus {
    guard(|| {
        let config = out_arg(config, "config")?;
        let key = str_arg(key, "key")?;
        let value = str_arg(value, "value")?;
        config
            .inner
            .set(key, value)
            .map_err(|m| (LcStatus::InvalidArgument, format!("{key}: {m}")))
    })
}

/// # Safety
/// `config` must be a handle from this library or null; it is invalid afterwards.
#[no_mangle]
pub unsafe extern "C" fn lc_config_free(config: *mut LcConfig) {
    free_handle(config)
}

/// Loads the four calibration input files. `ground_truth` may be null.
///
/// # Safety
/// Paths must be NUL-terminated strings and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn lc_dataset_load(
    lidar_traj: *const c_char,
    camera_traj: *const c_char,
    tracks: *const c_char,
    intrinsics: *const c_char,
    ground_truth: *const c_char,
    out: *mut *mut LcDataset,
) -> LcStatus {
    guard(|| {
        let out = out_arg(out, "out")?;
        let inner = CalibrationInputs::load(
            &path_arg(lidar_traj, "lidar_traj")?,
            &path_arg(camera_traj, "camera_traj")?,
            &path_arg(tracks, "tracks")?,
            &path_arg(intrinsics, "intrinsics")?,
        )
        .map_err(fail)?;
        let truth = if ground_truth.is_null() {
            None
        } else {
            Some(io::load_ground_truth(&path_arg(ground_truth, "ground_truth")?).map_err(fail)?)
        };
        into_handle(LcDataset { inner, truth }, out);
        Ok(())
    })
}

/// Simulates a dataset from the `sim.` settings of `config` (defaults if
/// null) with the given seed. The dataset keeps its ground truth.
///
/// # Safety
/// `config` must be a live handle or null; `out` writable.
#[no_mangle]
pub unsafe extern "C" fn lc_dataset_simulate(
    config: *const LcConfig,
    seed: u64,
    out: *mut *mut LcDataset,
) -> LcStatus {
    guard(|| {
        let out = out_arg(out, "out")?;
        let base = config
            .as_ref()
            .map_or_else(Scenario::default, |c| c.inner.sim.clone());
        let data = sim::generate_scenario(&Scenario { seed, ..base }).map_err(fail)?;
        into_handle(
            LcDataset {
                inner: CalibrationInputs::from_sim(&data),
                truth: Some(data.truth),
            },
            out,
        );
        Ok(())
    })
}

/// Writes the dataset as the input files of the command-line tool.
///
/// # Safety
/// `dataset` must be a live handle and `dir` a NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn lc_dataset_save(
    dataset: *const LcDataset,
    dir: *const c_char,
) -> LcStatus {
    guard(|| {
        let d = handle(dataset, "dataset")?;
        let dir = path_arg(dir, "dir")?;
        d.inner.save(&dir, d.truth.as_ref()).map_err(fail)
    })
}

/// # Safety
/// `dataset` must be a handle from this library or null; it is invalid afterwards.
#[no_mangle]
pub unsafe extern "C" fn lc_dataset_free(dataset: *mut LcDataset) {
    free_handle(dataset)
}

/// Runs the calibration. `config` may be null for defaults.
///
/// # Safety
/// Handles must be live or null as documented; `out` writable.
#[no_mangle]
pub unsafe extern "C" fn lc_calibrate(
    dataset: *const LcDataset,
    config: *const LcConfig,
    mode: LcMode,
    out: *mut *mut LcResult,
) -> LcStatus {
    guard(|| {
        let out = out_arg(out, "out")?;
        let d = handle(dataset, "dataset")?;
        let default = Config::default();
        let config = config.as_ref().map_or(&default, |c| &c.inner);
        let mode = match mode {
            LcMode::Full => RunMode::Full,
            LcMode::CoarseOnly => RunMode::CoarseOnly,
            LcMode::TauOnly => RunMode::TauOnly,
        };
        let mut inner = run_calibration(&d.inner, config, mode).map_err(fail)?;
        inner.truth = d.truth.clone();
        into_handle(LcResult { inner }, out);
        Ok(())
    })
}

/// LiDAR-from-camera extrinsic as a row-major 4x4 matrix.
///
/// # Safety
/// `result` must be a live handle and `matrix_out` hold 16 doubles.
#[no_mangle]
pub unsafe extern "C" fn lc_result_extrinsic_matrix(
    result: *const LcResult,
    matrix_out: *mut f64,
) -> LcStatus {
    guard(|| {
        let r = handle(result, "result")?;
        let out = out_arg(matrix_out.cast::<[f64; 16]>(), "matrix_out")?;
        let m = r.inner.extrinsic().matrix();
        for i in 0..4 {
            for j in 0..4 {
                out[4 * i + j] = m[(i, j)];
            }
        }
        Ok(())
    })
}

/// LiDAR-from-camera extrinsic as seven doubles.
///
/// # Safety
/// `result` must be a live handle and `pose_out` hold 7 doubles.
#[no_mangle]
pub unsafe extern "C" fn lc_result_extrinsic_pose(
    result: *const LcResult,
    pose_out: *mut f64,
) -> LcStatus {
    guard(|| {
        let r = handle(result, "result")?;
        let out = out_arg(pose_out.cast::<[f64; 7]>(), "pose_out")?;
        pose_to_array(&r.inner.extrinsic(), out);
        Ok(())
    })
}

/// Seconds added to camera timestamps to reach the LiDAR clock; NaN for null.
///
/// # Safety
/// `result` must be a live handle or null.
#[no_mangle]
pub unsafe extern "C" fn lc_result_tau(result: *const LcResult) -> f64 {
    result.as_ref().map_or(f64::NAN, |r| r.inner.tau())
}

/// Monocular scale of the camera trajectory; NaN for null.
///
/// # Safety
/// `result` must be a live handle or null.
#[no_mangle]
pub unsafe extern "C" fn lc_result_scale(result: *const LcResult) -> f64 {
    result.as_ref().map_or(f64::NAN, |r| r.inner.coarse.scale)
}

/// 1 if the refinement met its convergence tolerances, 0 otherwise
/// (including coarse-only runs and null).
///
/// # Safety
/// `result` must be a live handle or null.
#[no_mangle]
pub unsafe extern "C" fn lc_result_converged(result: *const LcResult) -> i32 {
    result
        .as_ref()
        .and_then(|r| r.inner.refine.as_ref())
        .map_or(0, |r| r.converged as i32)
}

/// Writes the calibration report.
///
/// # Safety
/// `result` must be a live handle and `path` a NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn lc_result_save_report(
    result: *const LcResult,
    path: *const c_char,
) -> LcStatus {
    guard(|| {
        let r = handle(result, "result")?;
        r.inner.save(&path_arg(path, "path")?).map_err(fail)
    })
}

/// # Safety
/// `result` must be a handle from this library or null; it is invalid afterwards.
#[no_mangle]
pub unsafe extern "C" fn lc_result_free(result: *mut LcResult) {
    free_handle(result)
}
