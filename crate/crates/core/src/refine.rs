//! Structureless continuous-time bundle adjustment of the camera-LiDAR
//! extrinsic and time lag.
//!
//! The state is the camera-from-LiDAR extrinsic `E = exp(xi)` and the lag
//! `tau`: a camera frame stamped `t_i` on the camera clock was exposed at
//! LiDAR-clock time `t_i + tau`. A landmark `p` observed in that frame is
//! predicted at `pi(E * T_WL(t_i + tau)^-1 * p)`.
//!
//! Landmarks are re-triangulated from the current state at every
//! evaluation and eliminated from the normal equations with a Schur
//! complement, so only the 7 core parameters `(xi, tau)` are iterated.

use std::collections::{BTreeMap, HashSet};

use log::{debug, warn};
use nalgebra::{
    DMatrix, DVector, Matrix2x3, Matrix3, SMatrix, SVector, SymmetricEigen, Vector2, Vector3,
};

use crate::coarse::{self, CoarseResult, PairConfig};
use crate::error::{BestSoFar, Error, Result, Stage};
use crate::geometry::{exp_map, log_map, skew, ContinuousTrajectory, Pose, StampedPose, Twist};

pub const CORE_DIM: usize = 7;
/// Index of the time lag in the core parameter vector.
pub const LAG_INDEX: usize = 6;

pub type Vector7 = SVector<f64, CORE_DIM>;
pub type Matrix7 = SMatrix<f64, CORE_DIM, CORE_DIM>;
pub type Matrix2x7 = SMatrix<f64, 2, CORE_DIM>;
pub type Matrix7x3 = SMatrix<f64, CORE_DIM, 3>;

/// Pinhole camera, pixels. Inputs are assumed rectified.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CameraIntrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: u32,
    pub height: u32,
}

impl CameraIntrinsics {
    pub fn new(fx: f64, fy: f64, cx: f64, cy: f64, width: u32, height: u32) -> Result<Self> {
        let finite = [fx, fy, cx, cy].iter().all(|v| v.is_finite());
        if !finite || fx <= 0.0 || fy <= 0.0 {
            return Err(Error::InvalidArgument(format!(
                "focal lengths must be positive and finite (fx={fx}, fy={fy})"
            )));
        }
        if !(0.0..=width as f64).contains(&cx) || !(0.0..=height as f64).contains(&cy) {
            return Err(Error::InvalidArgument(format!(
                "principal point ({cx}, {cy}) outside {width}x{height} image"
            )));
        }
        Ok(Self {
            fx,
            fy,
            cx,
            cy,
            width,
            height,
        })
    }

    /// Projects a camera-frame point; `None` when it is not in front of the camera.
    pub fn project(&self, p: &Vector3<f64>) -> Option<Vector2<f64>> {
        (p.z > 0.0)
            .then(|| Vector2::new(self.fx * p.x / p.z + self.cx, self.fy * p.y / p.z + self.cy))
    }

    pub fn projection_jacobian(&self, p: &Vector3<f64>) -> Matrix2x3<f64> {
        let iz = 1.0 / p.z;
        let iz2 = iz * iz;
        Matrix2x3::new(
            self.fx * iz,
            0.0,
            -self.fx * p.x * iz2,
            0.0,
            self.fy * iz,
            -self.fy * p.y * iz2,
        )
    }

    /// Normalized image coordinates `(x, y, 1)` of a pixel.
    pub fn unproject(&self, pixel: &Vector2<f64>) -> Vector3<f64> {
        Vector3::new(
            (pixel.x - self.cx) / self.fx,
            (pixel.y - self.cy) / self.fy,
            1.0,
        )
    }

    pub fn contains(&self, pixel: &Vector2<f64>) -> bool {
        pixel.x >= 0.0
            && pixel.y >= 0.0
            && pixel.x < self.width as f64
            && pixel.y < self.height as f64
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Observation {
    pub frame_id: u64,
    pub pixel: Vector2<f64>,
}

/// Observations of one landmark, at most one per frame.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureTrack {
    pub landmark_id: u64,
    pub observations: Vec<Observation>,
}

/// A camera image; `timestamp` is on the camera clock.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CameraFrame {
    pub id: u64,
    pub timestamp: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Landmark {
    pub position: Vector3<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RobustKernel {
    Huber,
    Cauchy,
    None,
}

/// M-estimator applied to the residual norm.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RobustWeight {
    pub kernel: RobustKernel,
    /// Pixels.
    pub scale: f64,
}

impl Default for RobustWeight {
    fn default() -> Self {
        Self {
            kernel: RobustKernel::Huber,
            scale: 2.0,
        }
    }
}

impl RobustWeight {
    pub fn new(kernel: RobustKernel, scale: f64) -> Result<Self> {
        if !(scale > 0.0 && scale.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "robust scale must be positive, got {scale}"
            )));
        }
        Ok(Self { kernel, scale })
    }

    pub fn none() -> Self {
        Self {
            kernel: RobustKernel::None,
            scale: 1.0,
        }
    }

    /// IRLS weight for a residual of norm `r`.
    pub fn weight(&self, r: f64) -> f64 {
        let k = self.scale;
        match self.kernel {
            RobustKernel::None => 1.0,
            RobustKernel::Huber => {
                if r <= k {
                    1.0
                } else {
                    k / r
                }
            }
            RobustKernel::Cauchy => 1.0 / (1.0 + (r / k).powi(2)),
        }
    }

    /// Loss of a squared residual norm; the cost is half the sum of these.
    pub fn loss(&self, r2: f64) -> f64 {
        let k = self.scale;
        match self.kernel {
            RobustKernel::None => r2,
            RobustKernel::Huber => {
                let r = r2.sqrt();
                if r <= k {
                    r2
                } else {
                    2.0 * k * r - k * k
                }
            }
            RobustKernel::Cauchy => k * k * (1.0 + r2 / (k * k)).ln(),
        }
    }
}

/// Extrinsic, time lag and (optionally) the landmarks triangulated for them.
#[derive(Debug, Clone, PartialEq)]
pub struct CalibrationState {
    /// Camera-from-LiDAR transform `exp(xi)`.
    pub camera_from_lidar: Pose,
    /// Seconds added to camera timestamps to reach the LiDAR clock.
    pub tau: f64,
    pub landmarks: Vec<Option<Landmark>>,
}

impl CalibrationState {
    pub fn new(camera_from_lidar: Pose, tau: f64) -> Self {
        Self {
            camera_from_lidar,
            tau,
            landmarks: Vec::new(),
        }
    }

    pub fn from_twist(xi: &Twist, tau: f64) -> Result<Self> {
        Ok(Self::new(exp_map(xi)?, tau))
    }

    pub fn xi(&self) -> Result<Twist> {
        log_map(&self.camera_from_lidar)
    }

    pub fn lidar_from_camera(&self) -> Pose {
        self.camera_from_lidar.inverse()
    }

    /// `x ⊕ dx`: left-multiplicative on the extrinsic, additive on the lag.
    pub fn retract(&self, delta: &Vector7) -> Result<Self> {
        let dxi = Twist(delta.fixed_rows::<6>(0).into_owned());
        Ok(Self::new(
            exp_map(&dxi)? * self.camera_from_lidar,
            self.tau + delta[LAG_INDEX],
        ))
    }

    /// World-from-camera pose of a frame stamped `timestamp` (camera clock).
    pub fn camera_pose(&self, lidar: &ContinuousTrajectory, timestamp: f64) -> Result<Pose> {
        Ok(lidar.interpolate(timestamp + self.tau)? * self.lidar_from_camera())
    }
}

/// Residual of one observation and its derivatives.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ResidualJacobian {
    pub residual: Vector2<f64>,
    /// With respect to the left perturbation of the extrinsic, then the lag.
    pub core: Matrix2x7,
    pub point: Matrix2x3<f64>,
}

fn linearize(
    camera_from_lidar: &Pose,
    lidar_pose: &Pose,
    lidar_velocity: &Twist,
    point: &Vector3<f64>,
    pixel: &Vector2<f64>,
    intrinsics: &CameraIntrinsics,
) -> Option<ResidualJacobian> {
    let r_wl = lidar_pose.rotation.matrix();
    let x_l = r_wl.transpose() * (point - lidar_pose.translation);
    let x_c = camera_from_lidar.transform_point(&x_l);
    let predicted = intrinsics.project(&x_c)?;
    let d_proj = -intrinsics.projection_jacobian(&x_c);
    let r_cl = camera_from_lidar.rotation.matrix();

    let mut core = Matrix2x7::zeros();
    core.fixed_view_mut::<2, 3>(0, 0)
        .copy_from(&(d_proj * -skew(&x_c)));
    core.fixed_view_mut::<2, 3>(0, 3).copy_from(&d_proj);
    // d/dt T_WL(t)^-1 p = -(w x X_L + v) for body velocity (w, v)
    let dx_l = -(lidar_velocity.rotation().cross(&x_l) + lidar_velocity.translation());
    core.fixed_view_mut::<2, 1>(0, LAG_INDEX)
        .copy_from(&(d_proj * (r_cl * dx_l)));

    Some(ResidualJacobian {
        residual: pixel - predicted,
        core,
        point: d_proj * r_cl * r_wl.transpose(),
    })
}

/// Observed minus predicted pixel for a landmark seen in a frame stamped
/// `timestamp`. `Ok(None)` flags a landmark that is not in front of the
/// camera; such residuals carry zero weight.
pub fn reprojection_residual(
    state: &CalibrationState,
    landmark: &Landmark,
    timestamp: f64,
    pixel: &Vector2<f64>,
    lidar: &ContinuousTrajectory,
    intrinsics: &CameraIntrinsics,
) -> Result<Option<Vector2<f64>>> {
    let lidar_pose = lidar.interpolate(timestamp + state.tau)?;
    let x_c = state
        .camera_from_lidar
        .transform_point(&lidar_pose.inverse().transform_point(&landmark.position));
    Ok(intrinsics.project(&x_c).map(|p| pixel - p))
}

/// [`reprojection_residual`] together with its analytic Jacobian.
pub fn residual_jacobian(
    state: &CalibrationState,
    landmark: &Landmark,
    timestamp: f64,
    pixel: &Vector2<f64>,
    lidar: &ContinuousTrajectory,
    intrinsics: &CameraIntrinsics,
) -> Result<Option<ResidualJacobian>> {
    let (pose, velocity) = lidar.pose_and_velocity(timestamp + state.tau)?;
    Ok(linearize(
        &state.camera_from_lidar,
        &pose,
        &velocity,
        &landmark.position,
        pixel,
        intrinsics,
    ))
}

/// Minimum triangulation angle used when none is configured.
pub const DEFAULT_MIN_PARALLAX_DEG: f64 = 0.5;

/// Linear (DLT) triangulation of a track. `frame_poses[k]` is the
/// world-from-camera pose of the frame holding `track.observations[k]`.
pub fn triangulate(
    track: &FeatureTrack,
    frame_poses: &[Pose],
    intrinsics: &CameraIntrinsics,
) -> Result<Landmark> {
    if frame_poses.len() != track.observations.len() {
        return Err(Error::InvalidArgument(format!(
            "{} poses for {} observations",
            frame_poses.len(),
            track.observations.len()
        )));
    }
    let views: Vec<(Pose, Vector2<f64>)> = frame_poses
        .iter()
        .zip(&track.observations)
        .map(|(p, o)| (*p, o.pixel))
        .collect();
    triangulate_views(&views, intrinsics, DEFAULT_MIN_PARALLAX_DEG)
}

/// DLT triangulation from `(world_from_camera, pixel)` views.
pub fn triangulate_views(
    views: &[(Pose, Vector2<f64>)],
    intrinsics: &CameraIntrinsics,
    min_parallax_deg: f64,
) -> Result<Landmark> {
    if views.len() < 2 {
        return Err(Error::InvalidArgument(format!(
            "triangulation needs 2 views, got {}",
            views.len()
        )));
    }
    let bearings: Vec<Vector3<f64>> = views
        .iter()
        .map(|(pose, px)| pose.rotation.rotate(&intrinsics.unproject(px)).normalize())
        .collect();
    let mut max_angle: f64 = 0.0;
    for i in 0..bearings.len() {
        for j in i + 1..bearings.len() {
            let c = bearings[i].dot(&bearings[j]).clamp(-1.0, 1.0);
            let s = bearings[i].cross(&bearings[j]).norm();
            max_angle = max_angle.max(s.atan2(c));
        }
    }
    let baseline = views
        .iter()
        .map(|(p, _)| (p.translation - views[0].0.translation).norm())
        .fold(0.0, f64::max);
    if max_angle.to_degrees() < min_parallax_deg || baseline == 0.0 {
        return Err(Error::LowParallax {
            angle_deg: max_angle.to_degrees(),
        });
    }

    let mut a = DMatrix::<f64>::zeros(2 * views.len(), 4);
    for (k, (pose, px)) in views.iter().enumerate() {
        let cam = pose.inverse();
        let r = cam.rotation.matrix();
        let t = cam.translation;
        let x = intrinsics.unproject(px);
        for (row, coord) in [(2 * k, x.x), (2 * k + 1, x.y)] {
            let axis = row - 2 * k;
            for c in 0..3 {
                a[(row, c)] = coord * r[(2, c)] - r[(axis, c)];
            }
            a[(row, 3)] = coord * t.z - t[axis];
        }
    }
    let svd = a.svd(false, true);
    let v_t = svd.v_t.expect("requested V^T");
    let (imin, _) =
        svd.singular_values
            .iter()
            .enumerate()
            .fold(
                (0, f64::INFINITY),
                |acc, (i, &s)| if s < acc.1 { (i, s) } else { acc },
            );
    let h = v_t.row(imin);
    if h[3].abs() < 1e-12 * h.norm() {
        return Err(Error::LowParallax {
            angle_deg: max_angle.to_degrees(),
        });
    }
    let position = Vector3::new(h[0] / h[3], h[1] / h[3], h[2] / h[3]);
    let in_front = views
        .iter()
        .filter(|(pose, _)| pose.inverse().transform_point(&position).z > 0.0)
        .count();
    if in_front < 2 {
        return Err(Error::Cheirality);
    }
    Ok(Landmark { position })
}

/// A few robust Gauss-Newton steps on one landmark with the cameras held,
/// starting from the DLT estimate. `views` hold camera-from-world poses.
fn polish_landmark(
    views: &[(Pose, Vector2<f64>)],
    start: Vector3<f64>,
    intrinsics: &CameraIntrinsics,
    robust: &RobustWeight,
    iterations: usize,
) -> Vector3<f64> {
    let cost_of = |p: &Vector3<f64>| -> Option<f64> {
        views.iter().try_fold(0.0, |acc, (cam, px)| {
            let e = px - intrinsics.project(&cam.transform_point(p))?;
            Some(acc + robust.loss(e.norm_squared()))
        })
    };
    let mut point = start;
    let Some(mut cost) = cost_of(&point) else {
        return point;
    };
    for _ in 0..iterations {
        let mut h = Matrix3::zeros();
        let mut g = Vector3::zeros();
        for (cam, px) in views {
            let x = cam.transform_point(&point);
            let Some(pred) = intrinsics.project(&x) else {
                return point;
            };
            let e = px - pred;
            let j = -intrinsics.projection_jacobian(&x) * cam.rotation.matrix();
            let w = robust.weight(e.norm());
            h += j.transpose() * j * w;
            g += j.transpose() * e * w;
        }
        let Some(step) = h.cholesky().map(|c| -c.solve(&g)) else {
            break;
        };
        let candidate = point + step;
        match cost_of(&candidate) {
            Some(c) if c < cost => {
                point = candidate;
                cost = c;
            }
            _ => break,
        }
        if step.amax() < 1e-12 * (1.0 + point.amax()) {
            break;
        }
    }
    point
}

/// Per-landmark blocks of the normal equations.
#[derive(Debug, Clone, PartialEq)]
pub struct LandmarkBlock {
    pub h_ss: Matrix3<f64>,
    pub h_cs: Matrix7x3,
    pub g_s: Vector3<f64>,
}

impl Default for LandmarkBlock {
    fn default() -> Self {
        Self {
            h_ss: Matrix3::zeros(),
            h_cs: Matrix7x3::zeros(),
            g_s: Vector3::zeros(),
        }
    }
}

/// `H = J^T W J`, `g = J^T W e` in core/landmark block form, plus the cost
/// `0.5 * sum(rho(|e|^2))` at the linearization point.
#[derive(Debug, Clone, PartialEq)]
pub struct NormalEquations {
    pub h_cc: Matrix7,
    pub g_c: Vector7,
    pub landmarks: Vec<LandmarkBlock>,
    pub cost: f64,
    pub residual_count: usize,
}

impl NormalEquations {
    pub fn new(landmark_count: usize) -> Self {
        Self {
            h_cc: Matrix7::zeros(),
            g_c: Vector7::zeros(),
            landmarks: vec![LandmarkBlock::default(); landmark_count],
            cost: 0.0,
            residual_count: 0,
        }
    }

    /// Adds one robustly weighted residual of landmark `landmark`.
    pub fn add_residual(&mut self, landmark: usize, r: &ResidualJacobian, robust: &RobustWeight) {
        let e = r.residual;
        let w = robust.weight(e.norm());
        let jc_t = r.core.transpose() * w;
        self.h_cc += jc_t * r.core;
        self.g_c += jc_t * e;
        let block = &mut self.landmarks[landmark];
        let jp_t = r.point.transpose() * w;
        block.h_ss += jp_t * r.point;
        block.h_cs += jc_t * r.point;
        block.g_s += jp_t * e;
        self.cost += 0.5 * robust.loss(e.norm_squared());
        self.residual_count += 1;
    }

    pub fn dimension(&self) -> usize {
        CORE_DIM + 3 * self.landmarks.len()
    }

    /// The full system as dense matrices, core variables first.
    pub fn to_dense(&self) -> (DMatrix<f64>, DVector<f64>) {
        let n = self.dimension();
        let mut h = DMatrix::zeros(n, n);
        let mut g = DVector::zeros(n);
        h.view_mut((0, 0), (CORE_DIM, CORE_DIM))
            .copy_from(&self.h_cc);
        g.rows_mut(0, CORE_DIM).copy_from(&self.g_c);
        for (j, b) in self.landmarks.iter().enumerate() {
            let o = CORE_DIM + 3 * j;
            h.view_mut((o, o), (3, 3)).copy_from(&b.h_ss);
            h.view_mut((0, o), (CORE_DIM, 3)).copy_from(&b.h_cs);
            h.view_mut((o, 0), (3, CORE_DIM))
                .copy_from(&b.h_cs.transpose());
            g.rows_mut(o, 3).copy_from(&b.g_s);
        }
        (h, g)
    }

    /// Schur complement onto the core variables:
    /// `H_cc - H_cs H_ss^-1 H_sc` and `g_c - H_cs H_ss^-1 g_s`.
    pub fn reduce(&self) -> Result<(Matrix7, Vector7)> {
        let mut h = self.h_cc;
        let mut g = self.g_c;
        for (j, b) in self.landmarks.iter().enumerate() {
            let chol = b.h_ss.cholesky().ok_or_else(|| {
                Error::InvalidArgument(format!("landmark block {j} is not positive definite"))
            })?;
            let h_sc = b.h_cs.transpose();
            h -= b.h_cs * chol.solve(&h_sc);
            g -= b.h_cs * chol.solve(&b.g_s);
        }
        Ok((h, g))
    }
}

/// Which core variables an iteration moves.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StepMode {
    /// Extrinsic and lag together.
    Joint,
    /// Lag only, with the extrinsic eliminated by a second Schur complement.
    LagMarginal,
    /// Lag only, with the extrinsic held fixed.
    LagConditional,
}

fn null_direction(direction: impl Iterator<Item = f64>) -> Error {
    let mut d = [0.0; CORE_DIM];
    for (slot, v) in d.iter_mut().zip(direction) {
        *slot = v;
    }
    let n = d.iter().map(|v| v * v).sum::<f64>().sqrt();
    if n > 0.0 {
        d.iter_mut().for_each(|v| *v /= n);
    }
    Error::UnobservableCore { direction: d }
}

/// Relative eigenvalue below which the reduced system counts as singular.
const OBSERVABILITY_FLOOR: f64 = 1e-10;

/// Damped solve of the reduced core system `H δ = -g`.
///
/// The system is Jacobi-scaled to unit diagonal before damping, so `damping`
/// is a relative (Marquardt) factor. Fails with the null direction when the
/// undamped scaled system is singular.
pub fn solve_core(h: &Matrix7, g: &Vector7, damping: f64, mode: StepMode) -> Result<Vector7> {
    let active: &[usize] = match mode {
        StepMode::Joint | StepMode::LagMarginal => &[0, 1, 2, 3, 4, 5, 6],
        StepMode::LagConditional => &[LAG_INDEX],
    };
    let mut scale = Vector7::zeros();
    for &i in active {
        let d = h[(i, i)];
        if !(d > 0.0) || !d.is_finite() {
            return Err(null_direction((0..CORE_DIM).map(|k| {
                if k == i {
                    1.0
                } else {
                    0.0
                }
            })));
        }
        scale[i] = 1.0 / d.sqrt();
    }
    let n = active.len();
    let sub = DMatrix::from_fn(n, n, |r, c| {
        h[(active[r], active[c])] * scale[active[r]] * scale[active[c]]
    });
    let eig = SymmetricEigen::new(sub.clone());
    let (imin, lmin) =
        eig.eigenvalues
            .iter()
            .enumerate()
            .fold(
                (0, f64::INFINITY),
                |acc, (i, &l)| if l < acc.1 { (i, l) } else { acc },
            );
    let lmax = eig.eigenvalues.amax();
    if lmin <= OBSERVABILITY_FLOOR * lmax {
        let v = eig.eigenvectors.column(imin);
        let mut dir = Vector7::zeros();
        for (r, &i) in active.iter().enumerate() {
            dir[i] = v[r] * scale[i];
        }
        return Err(null_direction(dir.iter().copied()));
    }

    let mut damped = sub;
    for i in 0..n {
        damped[(i, i)] *= 1.0 + damping;
    }
    let rhs = DVector::from_fn(n, |r, _| -g[active[r]] * scale[active[r]]);
    let mut delta = Vector7::zeros();
    match mode {
        StepMode::Joint | StepMode::LagConditional => {
            let y = damped
                .cholesky()
                .ok_or_else(|| null_direction((0..CORE_DIM).map(|_| 0.0)))?
                .solve(&rhs);
            for (r, &i) in active.iter().enumerate() {
                delta[i] = y[r] * scale[i];
            }
        }
        StepMode::LagMarginal => {
            // eliminate the extrinsic block: h_tt - h_tx h_xx^-1 h_xt
            let h_xx = damped.view((0, 0), (6, 6)).into_owned();
            let h_xt = damped.view((0, LAG_INDEX), (6, 1)).into_owned();
            let chol = h_xx
                .cholesky()
                .ok_or_else(|| null_direction((0..CORE_DIM).map(|_| 0.0)))?;
            let b_x = rhs.rows(0, 6).into_owned();
            let h_red = damped[(LAG_INDEX, LAG_INDEX)] - (h_xt.transpose() * chol.solve(&h_xt))[0];
            let b_red = rhs[LAG_INDEX] - (h_xt.transpose() * chol.solve(&b_x))[0];
            delta[LAG_INDEX] = b_red / h_red * scale[LAG_INDEX];
        }
    }
    Ok(delta)
}

/// Core update from the landmark-marginalized system (undamped Gauss-Newton).
pub fn schur_solve(system: &NormalEquations) -> Result<Vector7> {
    let (h, g) = system.reduce()?;
    solve_core(&h, &g, 0.0, StepMode::Joint)
}

/// Landmarks triangulated for a state, plus the normal equations around them.
#[derive(Debug, Clone)]
pub struct Linearization {
    pub system: NormalEquations,
    /// Parallel to the problem's tracks; `None` for dropped tracks.
    pub landmarks: Vec<Option<Landmark>>,
    /// Residual norms of the valid observations.
    pub residual_norms: Vec<f64>,
    pub excluded: usize,
    pub total: usize,
    /// Outlier charge for observations that contributed no residual.
    pub penalty: f64,
}

impl Linearization {
    /// Reprojection cost plus the charge for unused observations.
    pub fn objective(&self) -> f64 {
        self.system.cost + self.penalty
    }
}

/// Tracks, frame times and sensor models of one refinement.
#[derive(Debug, Clone)]
pub struct RefineProblem<'a> {
    pub lidar: &'a ContinuousTrajectory,
    pub intrinsics: CameraIntrinsics,
    pub tracks: Vec<FeatureTrack>,
    pub frame_times: BTreeMap<u64, f64>,
    pub robust: RobustWeight,
    pub min_parallax_deg: f64,
    pub max_excluded_fraction: f64,
    pub polish_iterations: usize,
    pub outlier_penalty_px: f64,
}

impl<'a> RefineProblem<'a> {
    pub fn new(
        lidar: &'a ContinuousTrajectory,
        intrinsics: CameraIntrinsics,
        frames: &[CameraFrame],
        tracks: Vec<FeatureTrack>,
        robust: RobustWeight,
    ) -> Self {
        Self {
            lidar,
            intrinsics,
            tracks,
            frame_times: frames.iter().map(|f| (f.id, f.timestamp)).collect(),
            robust,
            min_parallax_deg: DEFAULT_MIN_PARALLAX_DEG,
            max_excluded_fraction: 0.3,
            polish_iterations: 30,
            outlier_penalty_px: 15.0,
        }
    }

    /// Re-triangulates every track for `state` and accumulates the normal
    /// equations. Observations whose shifted timestamp leaves the LiDAR span
    /// are excluded; tracks that fail triangulation are dropped.
    /// Linearizes at `state` with freshly triangulated landmarks. Tracks
    /// that cannot be triangulated are dropped; each observation that
    /// contributes no residual is charged the loss of an outlier at
    /// `outlier_penalty_px`, so losing tracks never lowers the cost.
    pub fn linearize(&self, state: &CalibrationState) -> Result<Linearization> {
        let mut system = NormalEquations::new(self.tracks.len());
        let mut landmarks = Vec::with_capacity(self.tracks.len());
        let mut residual_norms = Vec::new();
        let (mut excluded, mut total, mut unused) = (0, 0, 0usize);
        let mut dropped = [0usize; 3];
        let lidar_from_camera = state.lidar_from_camera();

        for (j, track) in self.tracks.iter().enumerate() {
            let mut views = Vec::with_capacity(track.observations.len());
            for obs in &track.observations {
                let Some(&t) = self.frame_times.get(&obs.frame_id) else {
                    continue;
                };
                total += 1;
                match self.lidar.pose_and_velocity(t + state.tau) {
                    Ok((pose, vel)) => views.push((pose, vel, obs.pixel)),
                    Err(Error::OutOfRange { .. }) => {
                        excluded += 1;
                        unused += 1;
                    }
                    Err(e) => return Err(e),
                }
            }
            if views.len() < 2 {
                dropped[0] += 1;
                unused += views.len();
                landmarks.push(None);
                continue;
            }
            let world_views: Vec<(Pose, Vector2<f64>)> = views
                .iter()
                .map(|(pose, _, px)| (*pose * lidar_from_camera, *px))
                .collect();
            let point =
                match triangulate_views(&world_views, &self.intrinsics, self.min_parallax_deg) {
                    Ok(l) => l.position,
                    Err(Error::LowParallax { .. } | Error::Cheirality) => {
                        dropped[1] += 1;
                        unused += views.len();
                        landmarks.push(None);
                        continue;
                    }
                    Err(e) => return Err(e),
                };
            let cam_views: Vec<(Pose, Vector2<f64>)> = world_views
                .iter()
                .map(|(p, px)| (p.inverse(), *px))
                .collect();
            let point = polish_landmark(
                &cam_views,
                point,
                &self.intrinsics,
                &self.robust,
                self.polish_iterations,
            );
            let rows: Vec<ResidualJacobian> = views
                .iter()
                .filter_map(|(pose, vel, px)| {
                    linearize(
                        &state.camera_from_lidar,
                        pose,
                        vel,
                        &point,
                        px,
                        &self.intrinsics,
                    )
                })
                .collect();
            let h_ss: Matrix3<f64> = rows
                .iter()
                .map(|r| r.point.transpose() * r.point * self.robust.weight(r.residual.norm()))
                .sum();
            let eig = h_ss.symmetric_eigenvalues();
            if rows.len() < 2 || !(eig.min() > 1e-9 * eig.max()) {
                dropped[2] += 1;
                unused += views.len();
                landmarks.push(None);
                continue;
            }
            unused += views.len() - rows.len();
            for r in &rows {
                residual_norms.push(r.residual.norm());
                system.add_residual(j, r, &self.robust);
            }
            landmarks.push(Some(Landmark { position: point }));
        }

        if total > 0 && excluded as f64 > self.max_excluded_fraction * total as f64 {
            return Err(Error::TooManyExcluded { excluded, total });
        }
        if excluded > 0 {
            debug!("{excluded} of {total} observations outside the LiDAR span");
        }
        if dropped.iter().any(|&d| d > 0) {
            debug!(
                "dropped tracks: {} too short, {} failed triangulation, {} ill-conditioned",
                dropped[0], dropped[1], dropped[2]
            );
        }
        if system.residual_count == 0 {
            return Err(Error::NoConstraints);
        }
        // dropped tracks keep an identity block so the Schur complement stays defined
        for (b, l) in system.landmarks.iter_mut().zip(&landmarks) {
            if l.is_none() {
                b.h_ss = Matrix3::identity();
            }
        }
        Ok(Linearization {
            system,
            landmarks,
            residual_norms,
            excluded,
            total,
            penalty: 0.5 * self.robust.loss(self.outlier_penalty_px.powi(2)) * unused as f64,
        })
    }
}

/// Builds the landmark-marginalizable normal equations of a state.
pub fn assemble_normal_equations(
    state: &CalibrationState,
    problem: &RefineProblem<'_>,
) -> Result<NormalEquations> {
    problem.linearize(state).map(|l| l.system)
}

#[derive(Debug, Clone, PartialEq)]
pub struct RefineConfig {
    /// Evenly spaced keyframes used for the refinement.
    pub keyframes: usize,
    pub robust: RobustWeight,
    pub max_iterations: usize,
    pub lag_iterations: usize,
    pub lag_mode: StepMode,
    pub step_tolerance: f64,
    pub cost_tolerance: f64,
    pub initial_damping: f64,
    pub damping_increase: f64,
    pub damping_decrease: f64,
    pub max_rejections: usize,
    pub min_track_length: usize,
    pub min_parallax_deg: f64,
    pub max_excluded_fraction: f64,
    /// Re-run the closed-form extrinsic after the lag stage (needs camera poses).
    pub reinit_extrinsic: bool,
    /// Stop after the lag stage.
    pub lag_only: bool,
    /// Residual norm (pixels) below which an observation counts as an inlier.
    pub inlier_threshold: f64,
    /// Gauss-Newton iterations polishing each triangulated landmark.
    pub polish_iterations: usize,
    pub pairs: PairConfig,
}

impl Default for RefineConfig {
    fn default() -> Self {
        Self {
            keyframes: 30,
            robust: RobustWeight::default(),
            max_iterations: 100,
            lag_iterations: 20,
            lag_mode: StepMode::LagMarginal,
            step_tolerance: 1e-8,
            cost_tolerance: 1e-10,
            initial_damping: 1e-4,
            damping_increase: 10.0,
            damping_decrease: 0.3,
            max_rejections: 10,
            min_track_length: 3,
            min_parallax_deg: DEFAULT_MIN_PARALLAX_DEG,
            max_excluded_fraction: 0.3,
            reinit_extrinsic: true,
            lag_only: false,
            inlier_threshold: 15.0,
            polish_iterations: 30,
            pairs: PairConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RefineResult {
    /// LiDAR-from-camera extrinsic.
    pub extrinsic: Pose,
    pub tau: f64,
    /// Lag-stage cost after every accepted iteration, starting with the initial cost.
    pub lag_cost_history: Vec<f64>,
    /// Joint-stage cost after every accepted iteration, starting with its initial cost.
    pub cost_history: Vec<f64>,
    /// Robust reprojection cost at the final state, without the outlier charge.
    pub reprojection_cost: f64,
    pub mean_reprojection_error: f64,
    pub inlier_ratio: f64,
    pub converged: bool,
    pub lag_iterations: usize,
    pub joint_iterations: usize,
    pub keyframes: usize,
    pub tracks: usize,
}

/// `count` frames evenly spaced over those whose shifted timestamps fall in
/// the LiDAR span.
pub fn select_keyframes(
    frames: &[CameraFrame],
    count: usize,
    lidar: &ContinuousTrajectory,
    tau: f64,
) -> Vec<CameraFrame> {
    let mut usable: Vec<CameraFrame> = frames
        .iter()
        .copied()
        .filter(|f| lidar.contains(f.timestamp + tau))
        .collect();
    usable.sort_by(|a, b| a.timestamp.total_cmp(&b.timestamp));
    let n = usable.len();
    if count == 0 || n == 0 {
        return Vec::new();
    }
    if count >= n {
        return usable;
    }
    if count == 1 {
        return vec![usable[n / 2]];
    }
    let mut picked: Vec<usize> = (0..count)
        .map(|k| ((k as f64) * (n - 1) as f64 / (count - 1) as f64).round() as usize)
        .collect();
    picked.dedup();
    picked.into_iter().map(|i| usable[i]).collect()
}

/// Observations of keyframes only, dropping tracks shorter than `min_len`.
pub fn restrict_tracks(
    tracks: &[FeatureTrack],
    keyframes: &[CameraFrame],
    min_len: usize,
) -> Vec<FeatureTrack> {
    let keep: HashSet<u64> = keyframes.iter().map(|f| f.id).collect();
    tracks
        .iter()
        .filter_map(|t| {
            let observations: Vec<Observation> = t
                .observations
                .iter()
                .copied()
                .filter(|o| keep.contains(&o.frame_id))
                .collect();
            (observations.len() >= min_len.max(2)).then_some(FeatureTrack {
                landmark_id: t.landmark_id,
                observations,
            })
        })
        .collect()
}

struct StageOutcome {
    state: CalibrationState,
    lin: Linearization,
    iterations: usize,
    converged: bool,
}

fn run_stage(
    problem: &RefineProblem<'_>,
    start: CalibrationState,
    start_lin: Linearization,
    mode: StepMode,
    max_iterations: usize,
    config: &RefineConfig,
    history: &mut Vec<f64>,
) -> Result<StageOutcome> {
    let mut state = start;
    let mut lin = start_lin;
    let mut damping = config.initial_damping;
    let mut converged = false;
    let mut iterations = 0;

    'outer: while iterations < max_iterations {
        let (h, g) = lin.system.reduce()?;
        let cost = lin.objective();
        let mut rejections = 0;
        loop {
            let delta = solve_core(&h, &g, damping, mode)?;
            if delta.amax() < config.step_tolerance {
                converged = true;
                break 'outer;
            }
            let mut candidate = state.retract(&delta)?;
            if mode != StepMode::Joint {
                candidate.camera_from_lidar = state.camera_from_lidar;
            }
            let trial = match problem.linearize(&candidate) {
                Ok(l) => Some(l),
                Err(Error::TooManyExcluded { .. } | Error::NoConstraints) => None,
                Err(e) => return Err(e),
            };
            debug!(
                "{mode:?}: cost {cost:.6e}, step {:.3e}, candidate {:?}, damping {damping:.1e}",
                delta.amax(),
                trial.as_ref().map(Linearization::objective)
            );
            match trial {
                Some(l) if l.objective() < cost => {
                    iterations += 1;
                    damping = (damping * config.damping_decrease).max(1e-12);
                    let rel = (cost - l.objective()) / cost.max(f64::MIN_POSITIVE);
                    history.push(l.objective());
                    state = candidate;
                    lin = l;
                    if rel < config.cost_tolerance {
                        converged = true;
                        break 'outer;
                    }
                    break;
                }
                _ => {
                    rejections += 1;
                    damping = damping.max(config.initial_damping) * config.damping_increase;
                    if rejections >= config.max_rejections {
                        if mode == StepMode::Joint {
                            return Err(Error::NonConvergence {
                                best: BestSoFar {
                                    extrinsic: state.lidar_from_camera(),
                                    tau: state.tau,
                                    cost,
                                },
                            });
                        }
                        // the lag stage only seeds the joint stage
                        break 'outer;
                    }
                }
            }
        }
    }
    Ok(StageOutcome {
        state,
        lin,
        iterations,
        converged,
    })
}

/// Two-stage refinement: lag only, closed-form extrinsic re-solve with the
/// corrected timestamps, then joint extrinsic and lag.
///
/// `camera_poses` (camera clock, up to scale) enable the closed-form re-solve.
pub fn refine_calibration(
    initial: &CoarseResult,
    frames: &[CameraFrame],
    camera_poses: Option<&[StampedPose]>,
    tracks: &[FeatureTrack],
    lidar: &ContinuousTrajectory,
    intrinsics: &CameraIntrinsics,
    config: &RefineConfig,
) -> Result<RefineResult> {
    let start = CalibrationState::new(initial.extrinsic.inverse(), initial.time_offset);
    let keyframes = select_keyframes(frames, config.keyframes, lidar, start.tau);
    let kept = restrict_tracks(tracks, &keyframes, config.min_track_length);
    let mut problem = RefineProblem::new(lidar, *intrinsics, &keyframes, kept, config.robust);
    problem.min_parallax_deg = config.min_parallax_deg;
    problem.max_excluded_fraction = config.max_excluded_fraction;
    problem.outlier_penalty_px = config.inlier_threshold;
    problem.polish_iterations = config.polish_iterations;

    let mut lag_history = Vec::new();
    let lin = problem
        .linearize(&start)
        .map_err(|e| e.at(Stage::LagRefinement))?;
    lag_history.push(lin.objective());

    let mut outcome = if config.lag_iterations > 0 {
        run_stage(
            &problem,
            start,
            lin,
            config.lag_mode,
            config.lag_iterations,
            config,
            &mut lag_history,
        )
        .map_err(|e| e.at(Stage::LagRefinement))?
    } else {
        StageOutcome {
            state: start,
            lin,
            iterations: 0,
            converged: false,
        }
    };
    let lag_iterations = outcome.iterations;

    if config.lag_only {
        return Ok(finish(
            &problem,
            outcome,
            lag_history,
            Vec::new(),
            0,
            config,
        ));
    }

    if let (true, Some(poses)) = (config.reinit_extrinsic, camera_poses) {
        let shifted: Vec<StampedPose> = poses
            .iter()
            .map(|p| StampedPose::new(p.timestamp + outcome.state.tau, p.pose))
            .filter(|p| lidar.contains(p.timestamp))
            .collect();
        match coarse::closed_form(lidar, &shifted, &config.pairs) {
            Ok(cf) => {
                let mut candidate = outcome.state.clone();
                candidate.camera_from_lidar = cf.extrinsic.inverse();
                match problem.linearize(&candidate) {
                    Ok(l) if l.objective() < outcome.lin.objective() => {
                        lag_history.push(l.objective());
                        outcome.state = candidate;
                        outcome.lin = l;
                    }
                    _ => debug!("closed-form re-solve did not lower the cost; keeping extrinsic"),
                }
            }
            Err(e) => warn!("closed-form re-solve skipped: {e}"),
        }
    }

    let mut history = vec![outcome.lin.objective()];
    let joint = run_stage(
        &problem,
        outcome.state,
        outcome.lin,
        StepMode::Joint,
        config.max_iterations,
        config,
        &mut history,
    )
    .map_err(|e| e.at(Stage::JointRefinement))?;
    Ok(finish(
        &problem,
        joint,
        lag_history,
        history,
        lag_iterations,
        config,
    ))
}

fn finish(
    problem: &RefineProblem<'_>,
    outcome: StageOutcome,
    lag_cost_history: Vec<f64>,
    cost_history: Vec<f64>,
    lag_iterations: usize,
    config: &RefineConfig,
) -> RefineResult {
    let joint_iterations = cost_history.len().saturating_sub(1);
    let norms = &outcome.lin.residual_norms;
    let n = norms.len().max(1) as f64;
    RefineResult {
        extrinsic: outcome.state.lidar_from_camera(),
        tau: outcome.state.tau,
        lag_cost_history,
        cost_history,
        reprojection_cost: outcome.lin.system.cost,
        mean_reprojection_error: norms.iter().sum::<f64>() / n,
        inlier_ratio: norms
            .iter()
            .filter(|&&r| r <= config.inlier_threshold)
            .count() as f64
            / n,
        converged: outcome.converged,
        lag_iterations,
        joint_iterations,
        keyframes: problem.frame_times.len(),
        tracks: outcome.lin.landmarks.iter().filter(|l| l.is_some()).count(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{Rotation, StampedPose};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn intrinsics() -> CameraIntrinsics {
        CameraIntrinsics::new(700.0, 700.0, 640.0, 360.0, 1280, 720).unwrap()
    }

    #[test]
    fn intrinsics_validation() {
        assert!(CameraIntrinsics::new(0.0, 700.0, 640.0, 360.0, 1280, 720).is_err());
        assert!(CameraIntrinsics::new(700.0, 700.0, 1400.0, 360.0, 1280, 720).is_err());
    }

    #[test]
    fn robust_weights() {
        let huber = RobustWeight::new(RobustKernel::Huber, 2.0).unwrap();
        assert_eq!(huber.weight(1.0), 1.0);
        assert!(huber.weight(20.0) < 1.0);
        assert!((huber.weight(20.0) - 0.1).abs() < 1e-15);
        let cauchy = RobustWeight::new(RobustKernel::Cauchy, 2.0).unwrap();
        assert!((cauchy.weight(2.0) - 0.5).abs() < 1e-15);
        assert!(RobustWeight::new(RobustKernel::Huber, 0.0).is_err());
        // huber loss is continuous at the knee
        assert!((huber.loss(4.0 - 1e-12) - huber.loss(4.0 + 1e-12)).abs() < 1e-9);
    }

    #[test]
    fn triangulate_two_views_exact() {
        let k = intrinsics();
        let point = Vector3::new(0.3, -0.2, 5.0);
        let a = Pose::identity();
        let b = Pose::new(
            Rotation::exp(&Vector3::new(0.0, 0.05, 0.0)),
            Vector3::new(0.5, 0.0, 0.0),
        );
        let obs = |p: &Pose| k.project(&p.inverse().transform_point(&point)).unwrap();
        let track = FeatureTrack {
            landmark_id: 0,
            observations: vec![
                Observation {
                    frame_id: 0,
                    pixel: obs(&a),
                },
                Observation {
                    frame_id: 1,
                    pixel: obs(&b),
                },
            ],
        };
        let l = triangulate(&track, &[a, b], &k).unwrap();
        assert!((l.position - point).amax() < 1e-8);
    }

    #[test]
    fn triangulate_zero_baseline_is_low_parallax() {
        let k = intrinsics();
        let obs = Observation {
            frame_id: 0,
            pixel: Vector2::new(700.0, 400.0),
        };
        let track = FeatureTrack {
            landmark_id: 0,
            observations: vec![obs, Observation { frame_id: 1, ..obs }],
        };
        let p = Pose::identity();
        assert!(matches!(
            triangulate(&track, &[p, p], &k),
            Err(Error::LowParallax { .. })
        ));
    }

    #[test]
    fn triangulate_point_behind_cameras_is_cheirality() {
        let k = intrinsics();
        // pixels of the mirrored point (0.3, -0.2, 5): the solution lies behind both cameras
        let point = Vector3::new(-0.3, 0.2, -5.0);
        let a = Pose::identity();
        let b = Pose::from_translation(Vector3::new(0.5, 0.0, 0.0));
        let mirror = |p: &Pose| {
            let x = p.inverse().transform_point(&point);
            k.project(&(-x)).unwrap()
        };
        let track = FeatureTrack {
            landmark_id: 0,
            observations: vec![
                Observation {
                    frame_id: 0,
                    pixel: mirror(&a),
                },
                Observation {
                    frame_id: 1,
                    pixel: mirror(&b),
                },
            ],
        };
        assert!(matches!(
            triangulate(&track, &[a, b], &k),
            Err(Error::Cheirality)
        ));
    }

    fn line_trajectory() -> ContinuousTrajectory {
        ContinuousTrajectory::new(
            vec![
                StampedPose::new(0.0, Pose::identity()),
                StampedPose::new(
                    1.0,
                    Pose::new(
                        Rotation::exp(&Vector3::new(0.1, 0.3, -0.2)),
                        Vector3::new(1.0, 0.2, 0.1),
                    ),
                ),
            ],
            "lidar",
        )
        .unwrap()
    }

    #[test]
    fn residual_on_optical_axis_is_zero() {
        let traj = ContinuousTrajectory::new(
            vec![
                StampedPose::new(0.0, Pose::identity()),
                StampedPose::new(1.0, Pose::identity()),
            ],
            "lidar",
        )
        .unwrap();
        let state = CalibrationState::new(Pose::identity(), 0.0);
        let l = Landmark {
            position: Vector3::new(0.0, 0.0, 2.0),
        };
        let r = reprojection_residual(
            &state,
            &l,
            0.5,
            &Vector2::new(640.0, 360.0),
            &traj,
            &intrinsics(),
        )
        .unwrap()
        .unwrap();
        assert_eq!(r, Vector2::zeros());
        let behind = Landmark {
            position: Vector3::new(0.0, 0.0, -2.0),
        };
        assert!(reprojection_residual(
            &state,
            &behind,
            0.5,
            &Vector2::zeros(),
            &traj,
            &intrinsics()
        )
        .unwrap()
        .is_none());
        assert!(matches!(
            reprojection_residual(&state, &l, 1.5, &Vector2::zeros(), &traj, &intrinsics()),
            Err(Error::OutOfRange { .. })
        ));
    }

    #[test]
    fn residual_grows_with_lag_error() {
        let traj = line_trajectory();
        let k = intrinsics();
        let truth = CalibrationState::new(Pose::identity(), 0.0);
        let l = Landmark {
            position: Vector3::new(1.0, 0.5, 6.0),
        };
        let t = 0.4;
        let px = k
            .project(
                &truth
                    .camera_pose(&traj, t)
                    .unwrap()
                    .inverse()
                    .transform_point(&l.position),
            )
            .unwrap();
        let mut last = -1.0;
        for d in [0.0, 0.01, 0.02, 0.05, 0.1] {
            let s = CalibrationState::new(Pose::identity(), d);
            let r = reprojection_residual(&s, &l, t, &px, &traj, &k)
                .unwrap()
                .unwrap()
                .norm();
            if d == 0.0 {
                assert!(r < 1e-9);
            }
            assert!(r > last);
            last = r;
        }
    }

    #[test]
    fn single_residual_gives_jtj() {
        let traj = line_trajectory();
        let state = CalibrationState::new(
            Pose::new(
                Rotation::exp(&Vector3::new(0.1, 0.0, 0.2)),
                Vector3::new(0.1, 0.0, 0.0),
            ),
            0.01,
        );
        let l = Landmark {
            position: Vector3::new(1.0, 0.5, 6.0),
        };
        let r = residual_jacobian(
            &state,
            &l,
            0.3,
            &Vector2::new(600.0, 300.0),
            &traj,
            &intrinsics(),
        )
        .unwrap()
        .unwrap();
        let mut ne = NormalEquations::new(1);
        ne.add_residual(0, &r, &RobustWeight::none());
        let (h, _) = ne.to_dense();
        let mut j = DMatrix::zeros(2, 10);
        j.view_mut((0, 0), (2, 7)).copy_from(&r.core);
        j.view_mut((0, 7), (2, 3)).copy_from(&r.point);
        assert_eq!(h, j.transpose() * &j);
        assert!(h.rank(1e-9) <= 2);
    }

    #[test]
    fn huber_downweights_large_residual() {
        let r = ResidualJacobian {
            residual: Vector2::new(30.0, 40.0),
            core: Matrix2x7::from_element(1.0),
            point: Matrix2x3::from_element(1.0),
        };
        let mut plain = NormalEquations::new(1);
        plain.add_residual(0, &r, &RobustWeight::none());
        let mut robust = NormalEquations::new(1);
        robust.add_residual(0, &r, &RobustWeight::default());
        let w = robust.h_cc[(0, 0)] / plain.h_cc[(0, 0)];
        assert!(w < 1.0);
        assert!((w - 2.0 / 50.0).abs() < 1e-12);
    }

    fn random_system(rng: &mut ChaCha8Rng, landmarks: usize) -> NormalEquations {
        let mut ne = NormalEquations::new(landmarks);
        for j in 0..landmarks {
            for _ in 0..4 {
                let r = ResidualJacobian {
                    residual: Vector2::from_fn(|_, _| rng.random_range(-1.0..1.0)),
                    core: Matrix2x7::from_fn(|_, _| rng.random_range(-1.0..1.0)),
                    point: Matrix2x3::from_fn(|_, _| rng.random_range(-1.0..1.0)),
                };
                ne.add_residual(j, &r, &RobustWeight::none());
            }
        }
        ne
    }

    fn dense_core_solution(ne: &NormalEquations) -> Vector7 {
        let (h, g) = ne.to_dense();
        let x = h.lu().solve(&(-g)).unwrap();
        Vector7::from_fn(|i, _| x[i])
    }

    #[test]
    fn schur_matches_dense_solve_small() {
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let ne = random_system(&mut rng, 3);
        let schur = schur_solve(&ne).unwrap();
        let dense = dense_core_solution(&ne);
        assert!((schur - dense).amax() < 1e-9 * dense.amax().max(1.0));
    }

    #[test]
    fn schur_with_zero_coupling_is_block_solve() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut ne = random_system(&mut rng, 3);
        for b in &mut ne.landmarks {
            b.h_cs = Matrix7x3::zeros();
        }
        let expected = -ne.h_cc.lu().solve(&ne.g_c).unwrap();
        let got = schur_solve(&ne).unwrap();
        assert!((got - expected).amax() < 1e-10 * expected.amax().max(1.0));
    }

    #[test]
    fn lag_marginal_step_matches_joint_lag_component() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let ne = random_system(&mut rng, 5);
        let (h, g) = ne.reduce().unwrap();
        for damping in [0.0, 1e-2] {
            let joint = solve_core(&h, &g, damping, StepMode::Joint).unwrap();
            let lag = solve_core(&h, &g, damping, StepMode::LagMarginal).unwrap();
            assert!((joint[LAG_INDEX] - lag[LAG_INDEX]).abs() < 1e-10 * joint.amax());
            assert!(lag.rows(0, 6).amax() == 0.0);
        }
    }

    #[test]
    fn zero_lag_column_is_unobservable() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut ne = NormalEquations::new(2);
        for j in 0..2 {
            for _ in 0..6 {
                let mut core = Matrix2x7::from_fn(|_, _| rng.random_range(-1.0..1.0));
                core.column_mut(LAG_INDEX).fill(0.0);
                let r = ResidualJacobian {
                    residual: Vector2::new(0.1, -0.2),
                    core,
                    point: Matrix2x3::from_fn(|_, _| rng.random_range(-1.0..1.0)),
                };
                ne.add_residual(j, &r, &RobustWeight::none());
            }
        }
        match schur_solve(&ne) {
            Err(Error::UnobservableCore { direction }) => {
                assert_eq!(direction[LAG_INDEX].abs(), 1.0);
                assert!(direction[..6].iter().all(|v| *v == 0.0));
            }
            other => panic!("expected unobservable core, got {other:?}"),
        }
    }

    #[test]
    fn keyframes_are_evenly_spaced_and_in_span() {
        let traj = line_trajectory();
        let frames: Vec<CameraFrame> = (0..101)
            .map(|i| CameraFrame {
                id: i,
                timestamp: -0.5 + i as f64 * 0.02,
            })
            .collect();
        let kf = select_keyframes(&frames, 5, &traj, 0.5);
        assert_eq!(kf.len(), 5);
        assert_eq!(kf[0].id, 0);
        assert_eq!(kf[4].id, 50);
        assert!(kf.iter().all(|f| traj.contains(f.timestamp + 0.5)));
    }
}
