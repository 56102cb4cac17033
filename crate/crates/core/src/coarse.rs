//! Closed-form coarse calibration: motion-onset time sync, relative pose
//! pairs and the hand-eye (`AX = XB`) solve for rotation, translation and
//! monocular scale.

use std::collections::BTreeMap;

use log::warn;
use nalgebra::{DMatrix, DVector, Matrix3, SymmetricEigen, Vector3};

use crate::error::{Error, Result, Stage};
use crate::geometry::{relative_pose, ContinuousTrajectory, Pose, Rotation, StampedPose};
use crate::refine::{CameraFrame, FeatureTrack};

/// Relative rotations must lie strictly inside `(MIN_PAIR_ANGLE, pi - MIN_PAIR_ANGLE)`.
pub const MIN_PAIR_ANGLE: f64 = 1e-3;

/// Paired LiDAR and camera motions over the same time span.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RelativePosePair {
    pub lidar_rel: Pose,
    /// Camera translation is known only up to the global monocular scale.
    pub camera_rel: Pose,
    pub span: (f64, f64),
}

impl RelativePosePair {
    pub fn new(lidar_rel: Pose, camera_rel: Pose, span: (f64, f64)) -> Result<Self> {
        let upper = std::f64::consts::PI - MIN_PAIR_ANGLE;
        for (name, p) in [("lidar", &lidar_rel), ("camera", &camera_rel)] {
            let a = p.rotation.angle();
            if !(a > MIN_PAIR_ANGLE && a < upper) {
                return Err(Error::InvalidArgument(format!(
                    "{name} relative rotation angle {a} outside ({MIN_PAIR_ANGLE}, pi - {MIN_PAIR_ANGLE})"
                )));
            }
        }
        Ok(Self {
            lidar_rel,
            camera_rel,
            span,
        })
    }
}

/// Singular value ratios `sigma_min / sigma_max` of the two linear solves.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct Conditioning {
    pub rotation: f64,
    pub translation: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CoarseResult {
    /// LiDAR-from-camera extrinsic.
    pub extrinsic: Pose,
    pub scale: f64,
    /// Seconds added to camera timestamps to reach the LiDAR clock.
    pub time_offset: f64,
    pub conditioning: Conditioning,
    pub pairs: usize,
}

/// Per-sample motion magnitude (rad/s for the LiDAR, px/frame for the camera).
#[derive(Debug, Clone, PartialEq)]
pub struct MotionSignal {
    timestamps: Vec<f64>,
    magnitude: Vec<f64>,
}

impl MotionSignal {
    pub fn new(timestamps: Vec<f64>, magnitude: Vec<f64>) -> Result<Self> {
        if timestamps.len() != magnitude.len() {
            return Err(Error::InvalidArgument(
                "motion signal timestamps and magnitudes differ in length".into(),
            ));
        }
        if timestamps.windows(2).any(|w| !(w[1] > w[0])) {
            return Err(Error::InvalidArgument(
                "motion signal timestamps must increase strictly".into(),
            ));
        }
        if magnitude.iter().any(|m| !(*m >= 0.0)) {
            return Err(Error::InvalidArgument(
                "motion magnitudes must be non-negative".into(),
            ));
        }
        Ok(Self {
            timestamps,
            magnitude,
        })
    }

    pub fn timestamps(&self) -> &[f64] {
        &self.timestamps
    }

    pub fn magnitude(&self) -> &[f64] {
        &self.magnitude
    }

    pub fn len(&self) -> usize {
        self.timestamps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.timestamps.is_empty()
    }
}

/// Timestamp of the first sample that exceeds `threshold` and stays above
/// it for `hold` consecutive samples.
pub fn detect_motion_onset(signal: &MotionSignal, threshold: f64, hold: usize) -> Result<f64> {
    let hold = hold.max(1);
    let not_found = Error::OnsetNotFound { threshold, hold };
    if signal.len() < hold {
        return Err(not_found);
    }
    let mut run = 0;
    for (i, &m) in signal.magnitude.iter().enumerate() {
        if m > threshold {
            run += 1;
            if run == hold {
                return Ok(signal.timestamps[i + 1 - hold]);
            }
        } else {
            run = 0;
        }
    }
    Err(not_found)
}

/// Angular speed of each trajectory segment, stamped at the segment start.
pub fn lidar_rotation_speed(lidar: &ContinuousTrajectory) -> MotionSignal {
    let (t, m) = lidar
        .knots()
        .windows(2)
        .map(|w| {
            let angle = relative_pose(&w[0].pose, &w[1].pose).rotation.angle();
            (w[0].timestamp, angle / (w[1].timestamp - w[0].timestamp))
        })
        .unzip();
    MotionSignal {
        timestamps: t,
        magnitude: m,
    }
}

/// Mean pixel displacement of features between consecutive frames, stamped
/// at the earlier frame. Frame pairs without shared features are skipped.
pub fn feature_motion(frames: &[CameraFrame], tracks: &[FeatureTrack]) -> MotionSignal {
    let mut order: Vec<CameraFrame> = frames.to_vec();
    order.sort_by(|a, b| a.timestamp.total_cmp(&b.timestamp));
    let rank: BTreeMap<u64, usize> = order.iter().enumerate().map(|(i, f)| (f.id, i)).collect();
    let mut sums = vec![(0.0, 0usize); order.len().saturating_sub(1)];
    for track in tracks {
        let mut obs: Vec<(usize, nalgebra::Vector2<f64>)> = track
            .observations
            .iter()
            .filter_map(|o| rank.get(&o.frame_id).map(|&r| (r, o.pixel)))
            .collect();
        obs.sort_by_key(|o| o.0);
        for w in obs.windows(2) {
            if w[1].0 == w[0].0 + 1 {
                let s = &mut sums[w[0].0];
                s.0 += (w[1].1 - w[0].1).norm();
                s.1 += 1;
            }
        }
    }
    let (t, m) = sums
        .iter()
        .enumerate()
        .filter(|(_, s)| s.1 > 0)
        .map(|(i, s)| (order[i].timestamp, s.0 / s.1 as f64))
        .unzip();
    MotionSignal {
        timestamps: t,
        magnitude: m,
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OnsetConfig {
    /// rad/s
    pub lidar_threshold: f64,
    pub lidar_hold: usize,
    /// px/frame
    pub camera_threshold: f64,
    pub camera_hold: usize,
}

impl Default for OnsetConfig {
    fn default() -> Self {
        Self {
            lidar_threshold: 0.15,
            lidar_hold: 5,
            camera_threshold: 2.0,
            camera_hold: 5,
        }
    }
}

/// Both motion onsets and the offset `lidar - camera`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SyncEstimate {
    pub lidar_onset: f64,
    pub camera_onset: f64,
    pub offset: f64,
}

/// Constant clock offset that maps camera timestamps onto the LiDAR clock,
/// from the start of motion seen by each sensor.
pub fn rough_sync(
    lidar: &ContinuousTrajectory,
    camera_motion: &MotionSignal,
    config: &OnsetConfig,
) -> Result<SyncEstimate> {
    let lidar_onset = detect_motion_onset(
        &lidar_rotation_speed(lidar),
        config.lidar_threshold,
        config.lidar_hold,
    )?;
    let camera_onset =
        detect_motion_onset(camera_motion, config.camera_threshold, config.camera_hold)?;
    Ok(SyncEstimate {
        lidar_onset,
        camera_onset,
        offset: lidar_onset - camera_onset,
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PairConfig {
    /// Number of relative pose pairs to extract.
    pub count: usize,
    /// Minimum relative rotation per pair, radians.
    pub min_angle: f64,
    /// Mean pair rotation below which excitation is reported as weak.
    pub excursion_target: f64,
}

impl Default for PairConfig {
    fn default() -> Self {
        Self {
            count: 10,
            min_angle: 0.17,
            excursion_target: 0.44,
        }
    }
}

/// Relative pose pairs between consecutive, evenly spaced camera keyframes.
///
/// `camera_poses` must already be stamped on the LiDAR clock. A keyframe
/// interval whose rotation is below `min_angle` in either sensor is merged
/// with the next one, so spans never overlap.
pub fn extract_pairs(
    lidar: &ContinuousTrajectory,
    camera_poses: &[StampedPose],
    count: usize,
    min_angle: f64,
) -> Result<Vec<RelativePosePair>> {
    let mut usable: Vec<&StampedPose> = camera_poses
        .iter()
        .filter(|p| lidar.contains(p.timestamp))
        .collect();
    usable.sort_by(|a, b| a.timestamp.total_cmp(&b.timestamp));
    let n = usable.len();
    if n < 2 || count == 0 {
        return Err(Error::InsufficientExcitation { found: 0 });
    }
    let segments = count.min(n - 1);
    let mut keys: Vec<usize> = (0..=segments)
        .map(|k| ((k as f64) * (n - 1) as f64 / segments as f64).round() as usize)
        .collect();
    keys.dedup();

    let upper = std::f64::consts::PI - MIN_PAIR_ANGLE;
    let mut pairs = Vec::new();
    let mut start = 0;
    let mut end = 1;
    while end < keys.len() {
        let (a, b) = (usable[keys[start]], usable[keys[end]]);
        let lidar_rel = relative_pose(
            &lidar.interpolate(a.timestamp)?,
            &lidar.interpolate(b.timestamp)?,
        );
        let camera_rel = relative_pose(&a.pose, &b.pose);
        let angle_l = lidar_rel.rotation.angle();
        let angle_c = camera_rel.rotation.angle();
        if angle_l >= upper || angle_c >= upper {
            start = end;
            end += 1;
        } else if angle_l >= min_angle && angle_c >= min_angle {
            pairs.push(RelativePosePair::new(
                lidar_rel,
                camera_rel,
                (a.timestamp, b.timestamp),
            )?);
            start = end;
            end += 1;
        } else {
            end += 1;
        }
    }
    if pairs.len() < 3 {
        return Err(Error::InsufficientExcitation { found: pairs.len() });
    }
    if pairs.len() < 4 {
        warn!(
            "only {} relative pose pairs; 4 or more recommended",
            pairs.len()
        );
    }
    Ok(pairs)
}

/// Hand-eye rotation from the rotation-vector covariance of the pairs.
///
/// With `M = sum(r_L r_C^T)` and `r_L = R r_C`, the extrinsic rotation is
/// `M (M^T M)^-1/2`, projected onto SO(3).
pub fn solve_rotation(pairs: &[RelativePosePair]) -> Result<(Rotation, f64)> {
    if pairs.len() < 3 {
        return Err(Error::InsufficientExcitation { found: pairs.len() });
    }
    let m: Matrix3<f64> = pairs
        .iter()
        .map(|p| p.lidar_rel.rotation.log() * p.camera_rel.rotation.log().transpose())
        .sum();
    let sv = m.singular_values();
    let ratio = sv.min() / sv.max();
    if !(ratio >= 1e-6) {
        return Err(Error::DegenerateMotion { ratio });
    }
    let eig = SymmetricEigen::new(m.transpose() * m);
    let inv_sqrt = eig.eigenvalues.map(|l| 1.0 / l.max(1e-12).sqrt());
    let mtm_inv_sqrt =
        eig.eigenvectors * Matrix3::from_diagonal(&inv_sqrt) * eig.eigenvectors.transpose();
    Ok((Rotation::project(&(m * mtm_inv_sqrt)), ratio))
}

/// Least-squares translation and monocular scale:
/// `[(I - R_L) | R t_C] [t; lambda] = t_L` stacked over all pairs.
pub fn solve_translation_scale(
    pairs: &[RelativePosePair],
    rotation: &Rotation,
) -> Result<(Vector3<f64>, f64, f64)> {
    if pairs.len() < 2 {
        return Err(Error::InsufficientExcitation { found: pairs.len() });
    }
    let rows = 3 * pairs.len();
    let mut a = DMatrix::<f64>::zeros(rows, 4);
    let mut b = DVector::<f64>::zeros(rows);
    for (i, p) in pairs.iter().enumerate() {
        let block = Matrix3::identity() - p.lidar_rel.rotation.matrix();
        a.view_mut((3 * i, 0), (3, 3)).copy_from(&block);
        a.view_mut((3 * i, 3), (3, 1))
            .copy_from(&rotation.rotate(&p.camera_rel.translation));
        b.rows_mut(3 * i, 3).copy_from(&p.lidar_rel.translation);
    }
    let col_scale: Vec<f64> = (0..4)
        .map(|c| {
            let n = a.column(c).norm();
            if n > 0.0 {
                1.0 / n
            } else {
                1.0
            }
        })
        .collect();
    for (c, s) in col_scale.iter().enumerate() {
        a.column_mut(c).scale_mut(*s);
    }
    let sv = a.singular_values();
    let ratio = sv.min() / sv.max();
    if !(ratio >= 1e-8) {
        return Err(Error::UnobservableTranslation { ratio });
    }
    let qr = a.qr();
    let qtb = qr.q().transpose() * &b;
    let y = qr
        .r()
        .solve_upper_triangular(&qtb)
        .ok_or(Error::UnobservableTranslation { ratio })?;
    let t = Vector3::new(
        y[0] * col_scale[0],
        y[1] * col_scale[1],
        y[2] * col_scale[2],
    );
    let scale = y[3] * col_scale[3];
    if !(scale > 0.0) {
        return Err(Error::ScaleSign { scale });
    }
    Ok((t, scale, ratio))
}

/// Closed-form extrinsic from camera poses already on the LiDAR clock.
#[derive(Debug, Clone, PartialEq)]
pub struct ClosedForm {
    /// LiDAR-from-camera.
    pub extrinsic: Pose,
    pub scale: f64,
    pub conditioning: Conditioning,
    pub pairs: usize,
}

pub fn closed_form(
    lidar: &ContinuousTrajectory,
    camera_poses: &[StampedPose],
    config: &PairConfig,
) -> Result<ClosedForm> {
    let pairs = extract_pairs(lidar, camera_poses, config.count, config.min_angle)
        .map_err(|e| e.at(Stage::PairExtraction))?;
    let mean_angle = pairs
        .iter()
        .map(|p| p.lidar_rel.rotation.angle())
        .sum::<f64>()
        / pairs.len() as f64;
    if mean_angle < config.excursion_target {
        warn!(
            "mean pair rotation {:.1} deg is below the {:.1} deg excursion target",
            mean_angle.to_degrees(),
            config.excursion_target.to_degrees()
        );
    }
    let (rotation, rot_cond) = solve_rotation(&pairs).map_err(|e| e.at(Stage::Rotation))?;
    let (t, scale, trans_cond) =
        solve_translation_scale(&pairs, &rotation).map_err(|e| e.at(Stage::TranslationScale))?;
    Ok(ClosedForm {
        extrinsic: Pose::new(rotation, t),
        scale,
        conditioning: Conditioning {
            rotation: rot_cond,
            translation: trans_cond,
        },
        pairs: pairs.len(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct CoarseConfig {
    pub onset: OnsetConfig,
    pub pairs: PairConfig,
    /// Known clock offset; skips motion-onset sync when set.
    pub time_offset: Option<f64>,
}

/// Rough sync, pair extraction, rotation and translation/scale solves.
///
/// Only camera poses after the LiDAR motion onset are used.
pub fn coarse_calibrate(
    lidar: &ContinuousTrajectory,
    camera_poses: &[StampedPose],
    camera_motion: &MotionSignal,
    config: &CoarseConfig,
) -> Result<CoarseResult> {
    let (offset, window_start) = match config.time_offset {
        Some(dt) => (dt, lidar.start()),
        None => {
            let sync = rough_sync(lidar, camera_motion, &config.onset)
                .map_err(|e| e.at(Stage::RoughSync))?;
            (sync.offset, sync.lidar_onset)
        }
    };
    let shifted: Vec<StampedPose> = camera_poses
        .iter()
        .map(|p| StampedPose::new(p.timestamp + offset, p.pose))
        .filter(|p| p.timestamp >= window_start && lidar.contains(p.timestamp))
        .collect();
    let cf = closed_form(lidar, &shifted, &config.pairs)?;
    Ok(CoarseResult {
        extrinsic: cf.extrinsic,
        scale: cf.scale,
        time_offset: offset,
        conditioning: cf.conditioning,
        pairs: cf.pairs,
    })
}
