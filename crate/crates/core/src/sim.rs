//! Synthetic LiDAR-camera rig: ground-truth trajectories, monocular camera
//! poses, noisy feature tracks, and error metrics.
//!
//! Physical time is the LiDAR clock. A camera frame exposed at LiDAR time
//! `s` is stamped `s - lag` on the camera clock, so the ground-truth lag is
//! exactly the `tau` the refinement estimates.

use std::f64::consts::PI;

use nalgebra::{Matrix3, Vector2, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::coarse::{self, CoarseConfig, CoarseResult, RelativePosePair};
use crate::error::{Error, Result};
use crate::geometry::{ContinuousTrajectory, Pose, Rotation, StampedPose, Twist};
use crate::refine::{
    self, CameraFrame, CameraIntrinsics, FeatureTrack, Observation, RefineConfig, RefineResult,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Profile {
    /// Superposed sinusoids on all six pose components.
    HandheldSinusoid,
    /// Sweep along a horizontal circular arc with roll/pitch wobble.
    Arc,
    /// At rest until `onset`, then hand-held motion starting with non-zero velocity.
    StationaryThenMove,
}

impl Profile {
    pub fn name(&self) -> &'static str {
        match self {
            Profile::HandheldSinusoid => "handheld-sinusoid",
            Profile::Arc => "arc",
            Profile::StationaryThenMove => "stationary-then-move",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "handheld-sinusoid" => Some(Profile::HandheldSinusoid),
            "arc" => Some(Profile::Arc),
            "stationary-then-move" => Some(Profile::StationaryThenMove),
            _ => None,
        }
    }
}

/// LiDAR-from-camera transform of a forward-looking camera on a LiDAR with
/// x forward and z up, 0.22 m apart.
pub fn default_extrinsic() -> Pose {
    let r = Matrix3::new(0.0, 0.0, 1.0, -1.0, 0.0, 0.0, 0.0, -1.0, 0.0);
    Pose::new(
        Rotation::from_matrix(&r).expect("axis permutation is a rotation"),
        Vector3::new(0.15, -0.05, -0.15),
    )
}

#[derive(Debug, Clone, PartialEq)]
pub struct Scenario {
    pub profile: Profile,
    /// Seconds of LiDAR trajectory.
    pub duration: f64,
    pub lidar_rate: f64,
    pub camera_rate: f64,
    /// Camera frames start and stop this long inside the LiDAR span.
    pub camera_margin: f64,
    /// LiDAR-from-camera.
    pub extrinsic: Pose,
    /// Seconds added to camera timestamps to reach the LiDAR clock.
    pub lag: f64,
    /// Monocular scale; camera translations are metric ones divided by it.
    /// Drawn from `[0.5, 2]` when unset.
    pub camera_scale: Option<f64>,
    /// Pixel noise standard deviation per axis.
    pub pixel_noise: f64,
    /// Rotation-vector noise applied to each camera pose, radians.
    pub rotation_noise: f64,
    pub landmark_count: usize,
    pub landmark_radius: f64,
    pub landmark_min_distance: f64,
    pub rotation_amplitude: f64,
    pub translation_amplitude: f64,
    pub period_range: (f64, f64),
    /// Motion start for [`Profile::StationaryThenMove`], seconds.
    pub onset: f64,
    pub intrinsics: CameraIntrinsics,
    /// Frames seeing fewer landmarks than this count as starved.
    pub min_visible: usize,
    pub seed: u64,
}

impl Default for Scenario {
    fn default() -> Self {
        Self {
            profile: Profile::HandheldSinusoid,
            duration: 12.0,
            lidar_rate: 100.0,
            camera_rate: 20.0,
            camera_margin: 1.0,
            extrinsic: default_extrinsic(),
            lag: 0.0,
            camera_scale: None,
            pixel_noise: 5.0,
            rotation_noise: 0.0,
            landmark_count: 300,
            landmark_radius: 20.0,
            landmark_min_distance: 1.0,
            rotation_amplitude: 0.3,
            translation_amplitude: 0.5,
            period_range: (2.0, 7.0),
            onset: 2.5,
            intrinsics: CameraIntrinsics::new(700.0, 700.0, 640.0, 360.0, 1280, 720)
                .expect("valid default intrinsics"),
            min_visible: 8,
            seed: 0,
        }
    }
}

impl Scenario {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("duration", self.duration),
            ("lidar_rate", self.lidar_rate),
            ("camera_rate", self.camera_rate),
            ("landmark_radius", self.landmark_radius),
        ];
        for (name, v) in positive {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::InvalidArgument(format!(
                    "{name} must be positive, got {v}"
                )));
            }
        }
        if !(self.pixel_noise >= 0.0 && self.rotation_noise >= 0.0) {
            return Err(Error::InvalidArgument(
                "noise levels must be non-negative".into(),
            ));
        }
        if !self.lag.is_finite() || 2.0 * self.camera_margin >= self.duration {
            return Err(Error::InvalidArgument(
                "camera window is empty; check duration and camera_margin".into(),
            ));
        }
        if self.period_range.0 <= 0.0 || self.period_range.1 < self.period_range.0 {
            return Err(Error::InvalidArgument("invalid period range".into()));
        }
        Ok(())
    }
}

/// Ground truth of a generated dataset.
#[derive(Debug, Clone, PartialEq)]
pub struct GroundTruth {
    /// LiDAR-from-camera.
    pub extrinsic: Pose,
    pub lag: f64,
    pub scale: f64,
    /// Camera-odometry world frame from LiDAR world frame.
    pub camera_world: Pose,
    /// Physical motion start, when the profile has one.
    pub onset: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct SimDataset {
    pub lidar: ContinuousTrajectory,
    /// Camera clock, camera-odometry world frame, translation up to scale.
    pub camera_poses: Vec<StampedPose>,
    pub frames: Vec<CameraFrame>,
    pub tracks: Vec<FeatureTrack>,
    pub intrinsics: CameraIntrinsics,
    pub landmarks: Vec<Vector3<f64>>,
    pub truth: GroundTruth,
}

struct Harmonic {
    amplitude: f64,
    omega: f64,
    phase: f64,
}

impl Harmonic {
    fn at(&self, s: f64) -> f64 {
        self.amplitude * ((self.omega * s + self.phase).sin() - self.phase.sin())
    }
}

struct Motion {
    profile: Profile,
    harmonics: Vec<Harmonic>,
    onset: f64,
}

impl Motion {
    fn new(sc: &Scenario, rng: &mut ChaCha8Rng) -> Self {
        let harmonics = (0..6)
            .map(|k| {
                let amplitude = if k < 3 {
                    sc.rotation_amplitude
                } else {
                    sc.translation_amplitude
                };
                let period = rng.random_range(sc.period_range.0..=sc.period_range.1);
                let phase = match sc.profile {
                    Profile::StationaryThenMove => 0.0,
                    _ => rng.random_range(0.0..2.0 * PI),
                };
                Harmonic {
                    amplitude,
                    omega: 2.0 * PI / period,
                    phase,
                }
            })
            .collect();
        Self {
            profile: sc.profile,
            harmonics,
            onset: sc.onset,
        }
    }

    /// World-from-LiDAR pose at physical time `s`.
    fn pose(&self, s: f64) -> Pose {
        let h = &self.harmonics;
        match self.profile {
            Profile::HandheldSinusoid => Pose::new(
                Rotation::exp(&Vector3::new(h[0].at(s), h[1].at(s), h[2].at(s))),
                Vector3::new(h[3].at(s), h[4].at(s), h[5].at(s)),
            ),
            Profile::StationaryThenMove => {
                let u = (s - self.onset).max(0.0);
                Pose::new(
                    Rotation::exp(&Vector3::new(h[0].at(u), h[1].at(u), h[2].at(u))),
                    Vector3::new(h[3].at(u), h[4].at(u), h[5].at(u)),
                )
            }
            Profile::Arc => {
                // quarter-circle of radius 3 m at constant speed, facing along the arc
                let radius = 3.0;
                let yaw = 0.5 * PI * s / 12.0 + h[2].at(s);
                let centre_angle = 0.5 * PI * s / 12.0;
                let t = Vector3::new(
                    radius * centre_angle.sin(),
                    radius * (1.0 - centre_angle.cos()),
                    0.3 * h[5].at(s),
                );
                let r = Rotation::exp(&Vector3::new(0.0, 0.0, yaw))
                    * Rotation::exp(&Vector3::new(h[0].at(s), h[1].at(s), 0.0));
                Pose::new(r, t)
            }
        }
    }
}

fn random_pose(rng: &mut ChaCha8Rng, rot: f64, trans: f64) -> Pose {
    let r = Vector3::new(
        rng.random_range(-rot..=rot),
        rng.random_range(-rot..=rot),
        rng.random_range(-rot..=rot),
    );
    let t = Vector3::new(
        rng.random_range(-trans..=trans),
        rng.random_range(-trans..=trans),
        rng.random_range(-trans..=trans),
    );
    Pose::new(Rotation::exp(&r), t)
}

fn gaussian_vector(rng: &mut ChaCha8Rng, sigma: f64) -> Vector3<f64> {
    if sigma == 0.0 {
        return Vector3::zeros();
    }
    let n = Normal::new(0.0, sigma).expect("finite sigma");
    Vector3::new(n.sample(rng), n.sample(rng), n.sample(rng))
}

/// Generates a deterministic dataset for `scenario`.
pub fn generate_scenario(scenario: &Scenario) -> Result<SimDataset> {
    scenario.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(scenario.seed);
    let motion = Motion::new(scenario, &mut rng);
    let scale = scenario
        .camera_scale
        .unwrap_or_else(|| rng.random_range(0.5..=2.0));
    if !(scale > 0.0) {
        return Err(Error::InvalidArgument(format!(
            "camera scale {scale} must be positive"
        )));
    }
    let camera_world = random_pose(&mut rng, PI, 5.0);

    let knot_count = (scenario.duration * scenario.lidar_rate).floor() as usize + 1;
    let knots: Vec<StampedPose> = (0..knot_count)
        .map(|k| {
            let t = k as f64 / scenario.lidar_rate;
            StampedPose::new(t, motion.pose(t))
        })
        .collect();
    let lidar = ContinuousTrajectory::new(knots, "lidar")?;

    // camera exposures on a fixed physical grid; sub-knot phase for the moving profiles
    let phase = match scenario.profile {
        Profile::StationaryThenMove => 0.0,
        _ => rng.random_range(0.1..0.9) / scenario.lidar_rate,
    };
    let first = (scenario.camera_margin * scenario.camera_rate).ceil() as i64;
    let last = ((scenario.duration - scenario.camera_margin) * scenario.camera_rate).floor() as i64;
    let exposures: Vec<f64> = (first..=last)
        .map(|i| i as f64 / scenario.camera_rate + phase)
        .filter(|s| lidar.contains(*s))
        .collect();

    let x = scenario.extrinsic;
    let mut camera_poses = Vec::with_capacity(exposures.len());
    let mut frames = Vec::with_capacity(exposures.len());
    let mut metric_poses = Vec::with_capacity(exposures.len());
    for (i, &s) in exposures.iter().enumerate() {
        let world_from_camera = lidar.interpolate(s)? * x;
        metric_poses.push(world_from_camera);
        let mut odom = camera_world * world_from_camera;
        odom.translation /= scale;
        let noise = gaussian_vector(&mut rng, scenario.rotation_noise);
        odom.rotation = Rotation::exp(&noise) * odom.rotation;
        let timestamp = s - scenario.lag;
        camera_poses.push(StampedPose::new(timestamp, odom));
        frames.push(CameraFrame {
            id: i as u64,
            timestamp,
        });
    }

    let centre = lidar
        .knots()
        .iter()
        .map(|k| k.pose.translation)
        .sum::<Vector3<f64>>()
        / lidar.knots().len() as f64;
    let path: Vec<Vector3<f64>> = lidar
        .knots()
        .iter()
        .step_by(10)
        .map(|k| k.pose.translation)
        .collect();
    let mut landmarks = Vec::with_capacity(scenario.landmark_count);
    let mut attempts = 0usize;
    while landmarks.len() < scenario.landmark_count {
        attempts += 1;
        if attempts > 1000 * (scenario.landmark_count + 1) {
            return Err(Error::ScenarioInfeasible(
                "cannot place landmarks away from the trajectory".into(),
            ));
        }
        let r = scenario.landmark_radius;
        let p = Vector3::new(
            rng.random_range(-r..=r),
            rng.random_range(-r..=r),
            rng.random_range(-r..=r),
        );
        if p.norm() > r {
            continue;
        }
        let p = centre + p;
        if path
            .iter()
            .any(|q| (p - q).norm() < scenario.landmark_min_distance)
        {
            continue;
        }
        landmarks.push(p);
    }

    let k = scenario.intrinsics;
    let pixel_noise = (scenario.pixel_noise > 0.0)
        .then(|| Normal::new(0.0, scenario.pixel_noise).expect("finite sigma"));
    let mut tracks: Vec<FeatureTrack> = (0..landmarks.len())
        .map(|j| FeatureTrack {
            landmark_id: j as u64,
            observations: Vec::new(),
        })
        .collect();
    let mut starved = 0;
    for (i, pose) in metric_poses.iter().enumerate() {
        let camera_from_world = pose.inverse();
        let mut visible = 0;
        for (j, p) in landmarks.iter().enumerate() {
            let x_c = camera_from_world.transform_point(p);
            if x_c.z < 0.1 {
                continue;
            }
            let Some(px) = k.project(&x_c) else { continue };
            if !k.contains(&px) {
                continue;
            }
            let noisy = match &pixel_noise {
                Some(n) => px + Vector2::new(n.sample(&mut rng), n.sample(&mut rng)),
                None => px,
            };
            tracks[j].observations.push(Observation {
                frame_id: i as u64,
                pixel: noisy,
            });
            visible += 1;
        }
        if visible < scenario.min_visible {
            starved += 1;
        }
    }
    if exposures.is_empty() || 2 * starved > exposures.len() {
        return Err(Error::ScenarioInfeasible(format!(
            "{starved} of {} frames see fewer than {} landmarks",
            exposures.len(),
            scenario.min_visible
        )));
    }
    tracks.retain(|t| t.observations.len() >= 2);

    Ok(SimDataset {
        lidar,
        camera_poses,
        frames,
        tracks,
        intrinsics: k,
        landmarks,
        truth: GroundTruth {
            extrinsic: x,
            lag: scenario.lag,
            scale,
            camera_world,
            onset: (scenario.profile == Profile::StationaryThenMove).then_some(scenario.onset),
        },
    })
}

impl SimDataset {
    pub fn camera_motion(&self) -> coarse::MotionSignal {
        coarse::feature_motion(&self.frames, &self.tracks)
    }

    pub fn coarse(&self, config: &CoarseConfig) -> Result<CoarseResult> {
        coarse::coarse_calibrate(
            &self.lidar,
            &self.camera_poses,
            &self.camera_motion(),
            config,
        )
    }

    /// Refinement from `initial`; `reinit` enables the closed-form re-solve.
    pub fn refine(
        &self,
        initial: &CoarseResult,
        config: &RefineConfig,
        reinit: bool,
    ) -> Result<RefineResult> {
        refine::refine_calibration(
            initial,
            &self.frames,
            reinit.then_some(self.camera_poses.as_slice()),
            &self.tracks,
            &self.lidar,
            &self.intrinsics,
            config,
        )
    }
}

/// Errors of one estimate against ground truth.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct TrialError {
    /// Geodesic rotation error, radians.
    pub e_r: f64,
    /// Translation error, meters.
    pub e_t: f64,
    /// Signed lag error, seconds.
    pub e_tau: f64,
}

pub fn evaluate(extrinsic: &Pose, tau: f64, truth: &GroundTruth) -> TrialError {
    TrialError {
        e_r: extrinsic.rotation.angle_to(&truth.extrinsic.rotation),
        e_t: (extrinsic.translation - truth.extrinsic.translation).norm(),
        e_tau: tau - truth.lag,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct Stat {
    pub mean: f64,
    pub variance: f64,
}

impl Stat {
    pub fn of(values: impl IntoIterator<Item = f64>) -> Self {
        let v: Vec<f64> = values.into_iter().collect();
        if v.is_empty() {
            return Self {
                mean: f64::NAN,
                variance: f64::NAN,
            };
        }
        let n = v.len() as f64;
        let mean = v.iter().sum::<f64>() / n;
        let variance = v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
        Self { mean, variance }
    }
}

/// Trial errors with their summary statistics.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ErrorReport {
    pub trials: Vec<TrialError>,
    pub failures: usize,
}

impl ErrorReport {
    pub fn e_r(&self) -> Stat {
        Stat::of(self.trials.iter().map(|t| t.e_r))
    }

    pub fn e_t(&self) -> Stat {
        Stat::of(self.trials.iter().map(|t| t.e_t))
    }

    pub fn e_tau(&self) -> Stat {
        Stat::of(self.trials.iter().map(|t| t.e_tau))
    }

    pub fn abs_e_tau(&self) -> Stat {
        Stat::of(self.trials.iter().map(|t| t.e_tau.abs()))
    }

    /// `e_r` in 1e-3 rad, `e_t` in m, `e_tau` in ms, as `mean (variance)`.
    pub fn table_cells(&self) -> [String; 3] {
        let r = Stat::of(self.trials.iter().map(|t| t.e_r * 1e3));
        let t = self.e_t();
        let tau = Stat::of(self.trials.iter().map(|t| t.e_tau * 1e3));
        [
            format!("{:.1} ({:.2})", r.mean, r.variance),
            format!("{:.2} ({:.2})", t.mean, t.variance),
            format!("{:.1} ({:.2})", tau.mean, tau.variance),
        ]
    }
}

/// Independent per-trial seeds derived from a master seed.
pub fn trial_seeds(master: u64, trials: usize) -> Vec<u64> {
    let mut rng = ChaCha8Rng::seed_from_u64(master);
    (0..trials).map(|_| rng.random()).collect()
}

/// Rotation and translation perturbation of an extrinsic guess.
pub fn perturb_extrinsic(pose: &Pose, rot_sigma: f64, trans_sigma: f64, seed: u64) -> Pose {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let dr = gaussian_vector(&mut rng, rot_sigma);
    let dt = gaussian_vector(&mut rng, trans_sigma);
    Pose::new(Rotation::exp(&dr) * pose.rotation, pose.translation + dt)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MotionSweepCell {
    pub level_deg: f64,
    pub samples: usize,
    pub noise: f64,
    pub mean_rotation_error: f64,
    pub failures: usize,
}

/// Hand-eye rotation error against relative-motion magnitude, pair count
/// and rotation-vector noise, averaged over `trials` random rigs.
pub fn sweep_motion_excitation(
    levels_deg: &[f64],
    samples: &[usize],
    noise_levels: &[f64],
    trials: usize,
    seed: u64,
) -> Vec<MotionSweepCell> {
    let seeds = trial_seeds(seed, trials);
    let mut cells = Vec::new();
    for &noise in noise_levels {
        for &n in samples {
            for &level in levels_deg {
                let mut errors = Vec::new();
                let mut failures = 0;
                for &s in &seeds {
                    match motion_trial(level.to_radians(), n, noise, s) {
                        Some(e) => errors.push(e),
                        None => failures += 1,
                    }
                }
                cells.push(MotionSweepCell {
                    level_deg: level,
                    samples: n,
                    noise,
                    mean_rotation_error: Stat::of(errors).mean,
                    failures,
                });
            }
        }
    }
    cells
}

fn motion_trial(angle: f64, samples: usize, noise: f64, seed: u64) -> Option<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let x = Pose::new(
        Rotation::exp(&gaussian_vector(&mut rng, 1.0)),
        gaussian_vector(&mut rng, 0.2),
    );
    let pairs: Vec<RelativePosePair> = (0..samples)
        .filter_map(|_| {
            let axis = loop {
                let v = gaussian_vector(&mut rng, 1.0);
                if v.norm() > 1e-3 {
                    break v.normalize();
                }
            };
            let a = Pose::new(
                Rotation::exp(&(axis * angle)),
                gaussian_vector(&mut rng, 0.3),
            );
            let mut b = x.inverse() * a * x;
            let na = gaussian_vector(&mut rng, noise);
            let nb = gaussian_vector(&mut rng, noise);
            let mut a = a;
            a.rotation = Rotation::exp(&na) * a.rotation;
            b.rotation = Rotation::exp(&nb) * b.rotation;
            RelativePosePair::new(a, b, (0.0, 1.0)).ok()
        })
        .collect();
    coarse::solve_rotation(&pairs)
        .ok()
        .map(|(r, _)| r.angle_to(&x.rotation))
}

/// Refinement errors per keyframe count; every count sees the same trials.
#[derive(Debug, Clone, PartialEq)]
pub struct FrameSweepRow {
    pub frames: usize,
    pub report: ErrorReport,
}

/// Refine-only runs from a perturbed ground truth, lag drawn within 10 ms,
/// for each keyframe count.
pub fn sweep_frames(
    base: &Scenario,
    frame_counts: &[usize],
    trials: usize,
    seed: u64,
    config: &RefineConfig,
) -> Vec<FrameSweepRow> {
    let seeds = trial_seeds(seed, trials);
    let mut rows: Vec<FrameSweepRow> = frame_counts
        .iter()
        .map(|&f| FrameSweepRow {
            frames: f,
            report: ErrorReport::default(),
        })
        .collect();
    for &s in &seeds {
        let mut rng = ChaCha8Rng::seed_from_u64(s);
        let scenario = Scenario {
            seed: rng.random(),
            lag: rng.random_range(-0.01..=0.01),
            ..base.clone()
        };
        let Ok(data) = generate_scenario(&scenario) else {
            rows.iter_mut().for_each(|r| r.report.failures += 1);
            continue;
        };
        let initial = CoarseResult {
            extrinsic: perturb_extrinsic(&data.truth.extrinsic, 0.05, 0.05, rng.random()),
            scale: data.truth.scale,
            time_offset: 0.0,
            conditioning: Default::default(),
            pairs: 0,
        };
        for row in rows.iter_mut() {
            let cfg = RefineConfig {
                keyframes: row.frames,
                ..config.clone()
            };
            match data.refine(&initial, &cfg, false) {
                Ok(r) => row
                    .report
                    .trials
                    .push(evaluate(&r.extrinsic, r.tau, &data.truth)),
                Err(_) => row.report.failures += 1,
            }
        }
    }
    rows
}

#[derive(Debug, Clone, PartialEq)]
pub struct CoarseLagRow {
    /// Sync error injected into the coarse stage, seconds.
    pub sync_error: f64,
    pub coarse: ErrorReport,
    pub refined: ErrorReport,
}

/// Coarse stage with a deliberately wrong clock offset, followed by the
/// full refinement from that coarse result.
pub fn sweep_lag_coarse(
    base: &Scenario,
    sync_errors: &[f64],
    trials: usize,
    seed: u64,
    coarse_config: &CoarseConfig,
    refine_config: &RefineConfig,
) -> Vec<CoarseLagRow> {
    let seeds = trial_seeds(seed, trials);
    let mut rows: Vec<CoarseLagRow> = sync_errors
        .iter()
        .map(|&e| CoarseLagRow {
            sync_error: e,
            coarse: ErrorReport::default(),
            refined: ErrorReport::default(),
        })
        .collect();
    for &s in &seeds {
        let scenario = Scenario {
            seed: s,
            ..base.clone()
        };
        let Ok(data) = generate_scenario(&scenario) else {
            for r in rows.iter_mut() {
                r.coarse.failures += 1;
                r.refined.failures += 1;
            }
            continue;
        };
        for row in rows.iter_mut() {
            let cfg = CoarseConfig {
                time_offset: Some(data.truth.lag + row.sync_error),
                ..*coarse_config
            };
            let coarse = match data.coarse(&cfg) {
                Ok(c) => c,
                Err(_) => {
                    row.coarse.failures += 1;
                    row.refined.failures += 1;
                    continue;
                }
            };
            row.coarse
                .trials
                .push(evaluate(&coarse.extrinsic, coarse.time_offset, &data.truth));
            match data.refine(&coarse, refine_config, true) {
                Ok(r) => row
                    .refined
                    .trials
                    .push(evaluate(&r.extrinsic, r.tau, &data.truth)),
                Err(_) => row.refined.failures += 1,
            }
        }
    }
    rows
}

#[derive(Debug, Clone, PartialEq)]
pub struct RefineLagRow {
    pub lag: f64,
    pub report: ErrorReport,
}

/// Refine-only runs on short segments with an unknown lag: the initial lag
/// is zero and the initial extrinsic a perturbed ground truth. Every lag
/// level sees the same physical trials; only the camera clock differs.
pub fn sweep_lag_refine(
    base: &Scenario,
    lags: &[f64],
    trials: usize,
    seed: u64,
    config: &RefineConfig,
) -> Vec<RefineLagRow> {
    let seeds = trial_seeds(seed, trials);
    let mut rows: Vec<RefineLagRow> = lags
        .iter()
        .map(|&l| RefineLagRow {
            lag: l,
            report: ErrorReport::default(),
        })
        .collect();
    for &s in &seeds {
        let mut rng = ChaCha8Rng::seed_from_u64(s);
        let scene_seed: u64 = rng.random();
        let guess_seed: u64 = rng.random();
        for row in rows.iter_mut() {
            let scenario = Scenario {
                seed: scene_seed,
                lag: row.lag,
                ..base.clone()
            };
            let Ok(data) = generate_scenario(&scenario) else {
                row.report.failures += 1;
                continue;
            };
            let initial = CoarseResult {
                extrinsic: perturb_extrinsic(&data.truth.extrinsic, 0.05, 0.05, guess_seed),
                scale: data.truth.scale,
                time_offset: 0.0,
                conditioning: Default::default(),
                pairs: 0,
            };
            match data.refine(&initial, config, false) {
                Ok(r) => row
                    .report
                    .trials
                    .push(evaluate(&r.extrinsic, r.tau, &data.truth)),
                Err(_) => row.report.failures += 1,
            }
        }
    }
    rows
}

/// `pose` rotated by `angle` about `axis` in its own frame.
pub fn rotate_about(pose: &Pose, axis: &Vector3<f64>, angle: f64) -> Pose {
    Pose::new(
        pose.rotation * Rotation::exp(&(axis.normalize() * angle)),
        pose.translation,
    )
}

/// Extrinsic as a camera-from-LiDAR twist, for reporting.
pub fn extrinsic_twist(lidar_from_camera: &Pose) -> Result<Twist> {
    crate::geometry::log_map(&lidar_from_camera.inverse())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn zero_noise(profile: Profile) -> Scenario {
        Scenario {
            profile,
            pixel_noise: 0.0,
            seed: 42,
            ..Scenario::default()
        }
    }

    #[test]
    fn generation_is_deterministic() {
        let sc = Scenario {
            seed: 9,
            ..Scenario::default()
        };
        let a = generate_scenario(&sc).unwrap();
        let b = generate_scenario(&sc).unwrap();
        assert_eq!(a.lidar, b.lidar);
        assert_eq!(a.camera_poses, b.camera_poses);
        assert_eq!(a.tracks, b.tracks);
        assert_eq!(a.truth, b.truth);
    }

    #[test]
    fn stationary_profile_is_flat_before_onset() {
        let data = generate_scenario(&zero_noise(Profile::StationaryThenMove)).unwrap();
        let speed = coarse::lidar_rotation_speed(&data.lidar);
        for (t, m) in speed.timestamps().iter().zip(speed.magnitude()) {
            if *t < 2.5 {
                assert_eq!(*m, 0.0);
            }
        }
        let cam = data.camera_motion();
        for (t, m) in cam.timestamps().iter().zip(cam.magnitude()) {
            if *t + data.truth.lag < 2.5 - 1e-9 {
                assert!(*m < 1e-9, "camera motion {m} at {t}");
            }
        }
    }

    #[test]
    fn zero_noise_tracks_match_projection() {
        let data = generate_scenario(&zero_noise(Profile::HandheldSinusoid)).unwrap();
        let k = data.intrinsics;
        let times: std::collections::HashMap<u64, f64> =
            data.frames.iter().map(|f| (f.id, f.timestamp)).collect();
        for track in data.tracks.iter().take(50) {
            let p = data.landmarks[track.landmark_id as usize];
            for o in &track.observations {
                let s = times[&o.frame_id] + data.truth.lag;
                let cam = data.lidar.interpolate(s).unwrap() * data.truth.extrinsic;
                let px = k.project(&cam.inverse().transform_point(&p)).unwrap();
                assert!((px - o.pixel).amax() < 1e-9);
            }
        }
    }

    #[test]
    fn camera_world_frame_and_scale_are_applied() {
        let data = generate_scenario(&zero_noise(Profile::HandheldSinusoid)).unwrap();
        let f = &data.camera_poses[10];
        let metric = data
            .lidar
            .interpolate(f.timestamp + data.truth.lag)
            .unwrap()
            * data.truth.extrinsic;
        let mut expected = data.truth.camera_world * metric;
        expected.translation /= data.truth.scale;
        assert!((expected.matrix() - f.pose.matrix()).amax() < 1e-12);
    }

    #[test]
    fn evaluate_identity_and_small_rotation() {
        let truth = GroundTruth {
            extrinsic: default_extrinsic(),
            lag: 0.01,
            scale: 1.0,
            camera_world: Pose::identity(),
            onset: None,
        };
        let e = evaluate(&truth.extrinsic, 0.01, &truth);
        assert!(e.e_r < 1e-12 && e.e_t == 0.0 && e.e_tau == 0.0);
        let rotated = rotate_about(&truth.extrinsic, &Vector3::new(1.0, 2.0, -0.5), 1e-3);
        let e = evaluate(&rotated, 0.01, &truth);
        assert!((e.e_r - 1e-3).abs() < 1e-12);
        assert_eq!(e.e_t, 0.0);
    }

    #[test]
    fn infeasible_when_landmarks_out_of_view() {
        let sc = Scenario {
            landmark_count: 5,
            ..Scenario::default()
        };
        assert!(matches!(
            generate_scenario(&sc),
            Err(Error::ScenarioInfeasible(_))
        ));
    }

    #[test]
    fn table_cells_format() {
        let r = ErrorReport {
            trials: vec![
                TrialError {
                    e_r: 0.002,
                    e_t: 0.01,
                    e_tau: 0.0004,
                },
                TrialError {
                    e_r: 0.002,
                    e_t: 0.01,
                    e_tau: 0.0004,
                },
            ],
            failures: 0,
        };
        assert_eq!(r.table_cells(), ["2.0 (0.00)", "0.01 (0.00)", "0.4 (0.00)"]);
    }

    #[test]
    fn trial_seeds_are_deterministic_and_distinct() {
        let a = trial_seeds(7, 10);
        assert_eq!(a, trial_seeds(7, 10));
        let mut b = a.clone();
        b.sort();
        b.dedup();
        assert_eq!(b.len(), 10);
    }
}
