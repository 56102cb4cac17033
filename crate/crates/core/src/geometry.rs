//! SO(3)/SE(3) algebra and piecewise-geodesic continuous-time trajectories.
//!
//! Twists are ordered rotation first: `(r, rho)` where `r` is the axis-angle
//! vector and `rho` the translational part, so that
//! `exp([r; rho]) = [exp(r), V(r) rho; 0, 1]`.

use std::ops::Mul;

use nalgebra::{Matrix3, Matrix4, Quaternion, UnitQuaternion, Vector3, Vector6};

use crate::error::{Error, Result};

/// Below this rotation angle the exp/log maps use Taylor expansions.
pub const SMALL_ANGLE: f64 = 1e-8;

/// Rotations closer than this to pi have no unique logarithm.
pub const PI_MARGIN: f64 = 1e-6;

const RENORMALIZE_AFTER: u32 = 100;

/// Skew-symmetric matrix with `skew(a) * b == a.cross(&b)`.
pub fn skew(v: &Vector3<f64>) -> Matrix3<f64> {
    Matrix3::new(0.0, -v.z, v.y, v.z, 0.0, -v.x, -v.y, v.x, 0.0)
}

/// Element of SO(3).
///
/// Stored as a unit quaternion; the quaternion is renormalized once a
/// composition chain exceeds 100 products.
#[derive(Debug, Clone, Copy)]
pub struct Rotation {
    q: UnitQuaternion<f64>,
    chain: u32,
}

impl PartialEq for Rotation {
    fn eq(&self, other: &Self) -> bool {
        self.q == other.q
    }
}

impl Default for Rotation {
    fn default() -> Self {
        Self::identity()
    }
}

impl Rotation {
    pub fn identity() -> Self {
        Self {
            q: UnitQuaternion::identity(),
            chain: 0,
        }
    }

    pub fn from_quaternion(q: UnitQuaternion<f64>) -> Self {
        Self { q, chain: 0 }
    }

    /// Builds a rotation from a 3x3 matrix, rejecting anything that is not
    /// orthonormal with determinant +1 to within `1e-9` per entry.
    pub fn from_matrix(m: &Matrix3<f64>) -> Result<Self> {
        if m.iter().any(|x| !x.is_finite()) {
            return Err(Error::InvalidArgument("non-finite rotation matrix".into()));
        }
        let ortho = (m * m.transpose() - Matrix3::identity()).amax();
        let det = m.determinant();
        if ortho > 1e-9 || (det - 1.0).abs() > 1e-9 {
            return Err(Error::InvalidArgument(format!(
                "matrix is not a rotation (|RR^T - I| = {ortho:e}, det = {det})"
            )));
        }
        Ok(Self::from_quaternion(UnitQuaternion::from_matrix_eps(
            m,
            1e-15,
            100,
            UnitQuaternion::identity(),
        )))
    }

    /// Nearest rotation to an arbitrary 3x3 matrix (SVD projection with
    /// determinant correction).
    pub fn project(m: &Matrix3<f64>) -> Self {
        let svd = m.svd(true, true);
        let (u, vt) = (svd.u.unwrap(), svd.v_t.unwrap());
        let d = (u * vt).determinant().signum();
        let r = u * Matrix3::from_diagonal(&Vector3::new(1.0, 1.0, d)) * vt;
        Self::from_quaternion(UnitQuaternion::from_matrix_eps(
            &r,
            1e-15,
            100,
            UnitQuaternion::identity(),
        ))
    }

    /// SO(3) exponential of an axis-angle vector.
    pub fn exp(r: &Vector3<f64>) -> Self {
        let theta = r.norm();
        let (w, k) = if theta < SMALL_ANGLE {
            let t2 = theta * theta;
            (1.0 - t2 / 8.0, 0.5 - t2 / 48.0)
        } else {
            let h = 0.5 * theta;
            (h.cos(), h.sin() / theta)
        };
        let q = Quaternion::new(w, k * r.x, k * r.y, k * r.z);
        Self::from_quaternion(UnitQuaternion::new_normalize(q))
    }

    /// Axis-angle vector, valid for all angles in `[0, pi]`.
    pub fn log(&self) -> Vector3<f64> {
        let q = self.q.quaternion();
        let (w, v) = if q.w < 0.0 {
            (-q.w, -q.imag())
        } else {
            (q.w, q.imag())
        };
        let n = v.norm();
        if n < 0.5 * SMALL_ANGLE {
            // theta ~ 2n; atan2(n, w)/n ~ (1 - n^2/(3w^2)) / w
            v * (2.0 / w) * (1.0 - n * n / (3.0 * w * w))
        } else {
            v * (2.0 * n.atan2(w) / n)
        }
    }

    /// Rotation angle in `[0, pi]`.
    pub fn angle(&self) -> f64 {
        let q = self.q.quaternion();
        2.0 * q.imag().norm().atan2(q.w.abs())
    }

    pub fn matrix(&self) -> Matrix3<f64> {
        self.q.to_rotation_matrix().into_inner()
    }

    pub fn quaternion(&self) -> &UnitQuaternion<f64> {
        &self.q
    }

    pub fn inverse(&self) -> Self {
        Self {
            q: self.q.inverse(),
            chain: self.chain,
        }
    }

    pub fn rotate(&self, v: &Vector3<f64>) -> Vector3<f64> {
        self.q * v
    }

    /// Geodesic distance `|log(self^T other)|`.
    pub fn angle_to(&self, other: &Rotation) -> f64 {
        (self.inverse() * *other).angle()
    }
}

impl Mul for Rotation {
    type Output = Rotation;

    fn mul(self, rhs: Rotation) -> Rotation {
        let chain = self.chain + rhs.chain + 1;
        let q = self.q * rhs.q;
        if chain > RENORMALIZE_AFTER {
            Rotation::from_quaternion(UnitQuaternion::new_normalize(q.into_inner()))
        } else {
            Rotation { q, chain }
        }
    }
}

/// Rigid transform in SE(3).
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct Pose {
    pub rotation: Rotation,
    pub translation: Vector3<f64>,
}

impl Pose {
    pub fn new(rotation: Rotation, translation: Vector3<f64>) -> Self {
        Self {
            rotation,
            translation,
        }
    }

    pub fn identity() -> Self {
        Self::default()
    }

    pub fn from_translation(t: Vector3<f64>) -> Self {
        Self::new(Rotation::identity(), t)
    }

    pub fn from_matrix(m: &Matrix4<f64>) -> Result<Self> {
        let r = Rotation::from_matrix(&m.fixed_view::<3, 3>(0, 0).into_owned())?;
        Ok(Self::new(r, m.fixed_view::<3, 1>(0, 3).into_owned()))
    }

    pub fn matrix(&self) -> Matrix4<f64> {
        let mut m = Matrix4::identity();
        m.fixed_view_mut::<3, 3>(0, 0)
            .copy_from(&self.rotation.matrix());
        m.fixed_view_mut::<3, 1>(0, 3).copy_from(&self.translation);
        m
    }

    pub fn inverse(&self) -> Self {
        let r = self.rotation.inverse();
        Self::new(r, -r.rotate(&self.translation))
    }

    pub fn transform_point(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.rotation.rotate(p) + self.translation
    }

    pub fn is_finite(&self) -> bool {
        self.translation.iter().all(|x| x.is_finite())
            && self
                .rotation
                .quaternion()
                .coords
                .iter()
                .all(|x| x.is_finite())
    }
}

impl Mul for Pose {
    type Output = Pose;

    fn mul(self, rhs: Pose) -> Pose {
        Pose::new(
            self.rotation * rhs.rotation,
            self.rotation.rotate(&rhs.translation) + self.translation,
        )
    }
}

/// Tangent vector of SE(3), rotation part first.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct Twist(pub Vector6<f64>);

impl Twist {
    pub fn new(rotation: Vector3<f64>, translation: Vector3<f64>) -> Self {
        Self(Vector6::new(
            rotation.x,
            rotation.y,
            rotation.z,
            translation.x,
            translation.y,
            translation.z,
        ))
    }

    pub fn zero() -> Self {
        Self::default()
    }

    pub fn rotation(&self) -> Vector3<f64> {
        self.0.fixed_rows::<3>(0).into_owned()
    }

    pub fn translation(&self) -> Vector3<f64> {
        self.0.fixed_rows::<3>(3).into_owned()
    }

    pub fn scaled(&self, s: f64) -> Self {
        Self(self.0 * s)
    }
}

/// Left Jacobian of SO(3), the `V` matrix in `t = V rho`.
fn left_jacobian(r: &Vector3<f64>) -> Matrix3<f64> {
    let theta = r.norm();
    let k = skew(r);
    let (b, c) = if theta < SMALL_ANGLE {
        let t2 = theta * theta;
        (0.5 - t2 / 24.0, 1.0 / 6.0 - t2 / 120.0)
    } else {
        let t2 = theta * theta;
        let s = (0.5 * theta).sin();
        (2.0 * s * s / t2, (theta - theta.sin()) / (t2 * theta))
    };
    Matrix3::identity() + k * b + k * k * c
}

fn left_jacobian_inverse(r: &Vector3<f64>) -> Matrix3<f64> {
    let theta = r.norm();
    let k = skew(r);
    let d = if theta < SMALL_ANGLE {
        1.0 / 12.0 + theta * theta / 720.0
    } else {
        let s = (0.5 * theta).sin();
        (1.0 - theta * theta.sin() / (4.0 * s * s)) / (theta * theta)
    };
    Matrix3::identity() - k * 0.5 + k * k * d
}

/// SE(3) exponential map.
pub fn exp_map(xi: &Twist) -> Result<Pose> {
    if xi.0.iter().any(|x| !x.is_finite()) {
        return Err(Error::InvalidArgument(format!(
            "non-finite twist {:?}",
            xi.0
        )));
    }
    let r = xi.rotation();
    Ok(Pose::new(
        Rotation::exp(&r),
        left_jacobian(&r) * xi.translation(),
    ))
}

/// SE(3) logarithm. Fails for rotations within `1e-6` rad of pi.
pub fn log_map(pose: &Pose) -> Result<Twist> {
    let angle = pose.rotation.angle();
    if angle > std::f64::consts::PI - PI_MARGIN {
        return Err(Error::DegenerateRotation { angle });
    }
    let r = pose.rotation.log();
    Ok(Twist::new(r, left_jacobian_inverse(&r) * pose.translation))
}

/// `a^-1 * b`, the motion from `a` to `b` expressed in `a`.
pub fn relative_pose(a: &Pose, b: &Pose) -> Pose {
    a.inverse() * *b
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StampedPose {
    pub timestamp: f64,
    pub pose: Pose,
}

impl StampedPose {
    pub fn new(timestamp: f64, pose: Pose) -> Self {
        Self { timestamp, pose }
    }
}

/// Time-sorted pose knots with geodesic interpolation in between.
#[derive(Debug, Clone, PartialEq)]
pub struct ContinuousTrajectory {
    knots: Vec<StampedPose>,
    clock_id: String,
}

impl ContinuousTrajectory {
    pub fn new(knots: Vec<StampedPose>, clock_id: impl Into<String>) -> Result<Self> {
        if knots.len() < 2 {
            return Err(Error::InvalidArgument(format!(
                "trajectory needs at least 2 knots, got {}",
                knots.len()
            )));
        }
        for (i, k) in knots.iter().enumerate() {
            if !k.timestamp.is_finite() || !k.pose.is_finite() {
                return Err(Error::InvalidArgument(format!("knot {i} is not finite")));
            }
            if i > 0 && k.timestamp <= knots[i - 1].timestamp {
                return Err(Error::InvalidArgument(format!(
                    "knot {i} timestamp {} does not increase",
                    k.timestamp
                )));
            }
        }
        Ok(Self {
            knots,
            clock_id: clock_id.into(),
        })
    }

    pub fn knots(&self) -> &[StampedPose] {
        &self.knots
    }

    pub fn clock_id(&self) -> &str {
        &self.clock_id
    }

    pub fn start(&self) -> f64 {
        self.knots[0].timestamp
    }

    pub fn end(&self) -> f64 {
        self.knots[self.knots.len() - 1].timestamp
    }

    pub fn contains(&self, t: f64) -> bool {
        t >= self.start() && t <= self.end()
    }

    /// Same knots with every timestamp shifted by `dt`.
    pub fn time_shifted(&self, dt: f64) -> Result<Self> {
        let knots = self
            .knots
            .iter()
            .map(|k| StampedPose::new(k.timestamp + dt, k.pose))
            .collect();
        Self::new(knots, self.clock_id.clone())
    }

    /// Same timestamps with every knot left-multiplied by `g`.
    pub fn left_multiplied(&self, g: &Pose) -> Self {
        Self {
            knots: self
                .knots
                .iter()
                .map(|k| StampedPose::new(k.timestamp, *g * k.pose))
                .collect(),
            clock_id: self.clock_id.clone(),
        }
    }

    /// Index `i` of the segment `[t_i, t_{i+1}]` used for `t`. The segments
    /// are right-continuous; the final knot belongs to the last segment.
    fn segment(&self, t: f64) -> Result<usize> {
        if !t.is_finite() || !self.contains(t) {
            return Err(Error::OutOfRange {
                t,
                start: self.start(),
                end: self.end(),
            });
        }
        let idx = self.knots.partition_point(|k| k.timestamp <= t);
        Ok(idx.saturating_sub(1).min(self.knots.len() - 2))
    }

    fn segment_twist(&self, i: usize) -> Result<Twist> {
        log_map(&relative_pose(&self.knots[i].pose, &self.knots[i + 1].pose))
    }

    /// Pose at time `t`; exact at knot timestamps, no extrapolation.
    pub fn interpolate(&self, t: f64) -> Result<Pose> {
        let i = self.segment(t)?;
        let (a, b) = (&self.knots[i], &self.knots[i + 1]);
        if t == a.timestamp {
            return Ok(a.pose);
        }
        if t == b.timestamp {
            return Ok(b.pose);
        }
        let alpha = (t - a.timestamp) / (b.timestamp - a.timestamp);
        let xi = self.segment_twist(i)?;
        Ok(a.pose * exp_map(&xi.scaled(alpha))?)
    }

    /// Body-frame velocity twist at `t`, constant over each segment:
    /// `d/dt T(t) = T(t) [v]^`.
    pub fn body_velocity(&self, t: f64) -> Result<Twist> {
        let i = self.segment(t)?;
        let dt = self.knots[i + 1].timestamp - self.knots[i].timestamp;
        Ok(self.segment_twist(i)?.scaled(1.0 / dt))
    }

    /// Interpolated pose together with the body velocity at `t`.
    pub fn pose_and_velocity(&self, t: f64) -> Result<(Pose, Twist)> {
        let i = self.segment(t)?;
        let (a, b) = (&self.knots[i], &self.knots[i + 1]);
        let dt = b.timestamp - a.timestamp;
        let xi = self.segment_twist(i)?;
        let pose = if t == a.timestamp {
            a.pose
        } else if t == b.timestamp {
            b.pose
        } else {
            a.pose * exp_map(&xi.scaled((t - a.timestamp) / dt))?
        };
        Ok((pose, xi.scaled(1.0 / dt)))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use std::f64::consts::PI;

    fn random_pose(rng: &mut ChaCha8Rng) -> Pose {
        let r = Vector3::new(
            rng.random_range(-1.5..1.5),
            rng.random_range(-1.5..1.5),
            rng.random_range(-1.5..1.5),
        );
        let t = Vector3::new(
            rng.random_range(-3.0..3.0),
            rng.random_range(-3.0..3.0),
            rng.random_range(-3.0..3.0),
        );
        Pose::new(Rotation::exp(&r), t)
    }

    fn max_diff(a: &Pose, b: &Pose) -> f64 {
        (a.matrix() - b.matrix()).amax()
    }

    #[test]
    fn exp_of_zero_is_identity() {
        let p = exp_map(&Twist::zero()).unwrap();
        assert_eq!(p.matrix(), Matrix4::identity());
    }

    #[test]
    fn exp_quarter_turn_about_z() {
        let p = exp_map(&Twist::new(
            Vector3::new(0.0, 0.0, PI / 2.0),
            Vector3::zeros(),
        ))
        .unwrap();
        let expected = Matrix3::new(0.0, -1.0, 0.0, 1.0, 0.0, 0.0, 0.0, 0.0, 1.0);
        assert!((p.rotation.matrix() - expected).amax() < 1e-15);
        assert!(p.translation.amax() < 1e-15);
    }

    #[test]
    fn exp_log_roundtrip_fixed_twist() {
        let xi = Twist(Vector6::new(0.3, -0.2, 0.1, 1.0, 2.0, -0.5));
        let back = log_map(&exp_map(&xi).unwrap()).unwrap();
        assert!((back.0 - xi.0).amax() < 1e-10);
    }

    #[test]
    fn exp_rejects_non_finite() {
        let xi = Twist(Vector6::new(f64::NAN, 0.0, 0.0, 0.0, 0.0, 0.0));
        assert!(matches!(exp_map(&xi), Err(Error::InvalidArgument(_))));
    }

    #[test]
    fn log_of_identity_and_pure_translation() {
        assert_eq!(log_map(&Pose::identity()).unwrap().0, Vector6::zeros());
        let t = Vector3::new(0.4, -1.0, 2.5);
        let xi = log_map(&Pose::from_translation(t)).unwrap();
        assert_eq!(xi.rotation(), Vector3::zeros());
        assert_eq!(xi.translation(), t);
    }

    #[test]
    fn log_rejects_half_turn() {
        let p = Pose::new(Rotation::exp(&Vector3::new(PI, 0.0, 0.0)), Vector3::zeros());
        assert!(matches!(log_map(&p), Err(Error::DegenerateRotation { .. })));
    }

    #[test]
    fn log_exp_roundtrip_random_poses() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..500 {
            let p = random_pose(&mut rng);
            let back = exp_map(&log_map(&p).unwrap()).unwrap();
            assert!(max_diff(&p, &back) < 1e-10);
        }
    }

    #[test]
    fn small_angle_branches_agree_at_switch() {
        let axis = Vector3::new(0.3, -0.5, 0.8).normalize();
        let rho = Vector3::new(1.0, -2.0, 0.5);
        let below = exp_map(&Twist::new(axis * (SMALL_ANGLE * 0.999_999), rho)).unwrap();
        let above = exp_map(&Twist::new(axis * (SMALL_ANGLE * 1.000_001), rho)).unwrap();
        assert!(max_diff(&below, &above) < 1e-12);
        let lb = left_jacobian_inverse(&(axis * (SMALL_ANGLE * 0.999_999)));
        let la = left_jacobian_inverse(&(axis * (SMALL_ANGLE * 1.000_001)));
        assert!((lb - la).amax() < 1e-12);
    }

    #[test]
    fn relative_pose_composes_back() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..100 {
            let a = random_pose(&mut rng);
            let b = random_pose(&mut rng);
            let rel = relative_pose(&a, &b);
            assert!(max_diff(&(a * rel), &b) < 1e-12);
        }
        let a = random_pose(&mut rng);
        assert!(max_diff(&relative_pose(&a, &a), &Pose::identity()) < 1e-15);
        assert_eq!(relative_pose(&Pose::identity(), &a), a);
    }

    #[test]
    fn inverse_composes_to_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let p = random_pose(&mut rng);
        assert!(max_diff(&(p.inverse() * p), &Pose::identity()) < 1e-9);
    }

    #[test]
    fn long_composition_chain_stays_unit() {
        let step = Rotation::exp(&Vector3::new(0.01, 0.02, -0.015));
        let mut r = Rotation::identity();
        for _ in 0..10_000 {
            r = r * step;
        }
        let m = r.matrix();
        assert!((m * m.transpose() - Matrix3::identity()).amax() < 1e-9);
        assert!((m.determinant() - 1.0).abs() < 1e-9);
    }

    #[test]
    fn from_matrix_rejects_non_rotation() {
        let mut m = Matrix3::identity();
        m[(0, 0)] = -1.0;
        assert!(Rotation::from_matrix(&m).is_err());
        assert!(Rotation::from_matrix(&(Matrix3::identity() * 1.01)).is_err());
    }

    fn two_knot(p0: Pose, p1: Pose) -> ContinuousTrajectory {
        ContinuousTrajectory::new(
            vec![StampedPose::new(0.0, p0), StampedPose::new(1.0, p1)],
            "lidar",
        )
        .unwrap()
    }

    #[test]
    fn interpolate_linear_translation() {
        let traj = two_knot(
            Pose::identity(),
            Pose::from_translation(Vector3::new(2.0, 0.0, 0.0)),
        );
        let p = traj.interpolate(0.25).unwrap();
        assert!((p.translation - Vector3::new(0.5, 0.0, 0.0)).amax() < 1e-15);
        assert_eq!(p.rotation.angle(), 0.0);
    }

    #[test]
    fn interpolate_endpoints_exact() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let (a, b) = (random_pose(&mut rng), random_pose(&mut rng));
        let traj = two_knot(a, b);
        assert_eq!(traj.interpolate(0.0).unwrap(), a);
        assert_eq!(traj.interpolate(1.0).unwrap(), b);
    }

    #[test]
    fn interpolate_rejects_outside_span() {
        let traj = two_knot(Pose::identity(), Pose::identity());
        assert!(matches!(
            traj.interpolate(-1e-9),
            Err(Error::OutOfRange { .. })
        ));
        assert!(matches!(
            traj.interpolate(1.0 + 1e-9),
            Err(Error::OutOfRange { .. })
        ));
        assert!(traj.interpolate(f64::NAN).is_err());
    }

    #[test]
    fn trajectory_rejects_unsorted_or_short() {
        let k = StampedPose::new(0.0, Pose::identity());
        assert!(ContinuousTrajectory::new(vec![k], "x").is_err());
        assert!(ContinuousTrajectory::new(vec![k, k], "x").is_err());
    }

    #[test]
    fn body_velocity_matches_finite_difference() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let traj = two_knot(random_pose(&mut rng), random_pose(&mut rng));
        let t = 0.37;
        let h = 1e-6;
        let (p, v) = traj.pose_and_velocity(t).unwrap();
        let fwd = traj.interpolate(t + h).unwrap();
        let bwd = traj.interpolate(t - h).unwrap();
        let fd = log_map(&relative_pose(&bwd, &fwd)).unwrap().scaled(0.5 / h);
        assert!((fd.0 - v.0).amax() < 1e-6);
        assert_eq!(p, traj.interpolate(t).unwrap());
    }
}
