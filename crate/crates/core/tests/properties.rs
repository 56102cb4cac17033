use lidarcam_calib::coarse::CoarseResult;
use lidarcam_calib::coarse::{self, PairConfig};
use lidarcam_calib::geometry::{
    exp_map, log_map, ContinuousTrajectory, Pose, Rotation, StampedPose, Twist,
};
use lidarcam_calib::io::{self, Config};
use lidarcam_calib::refine::{
    self, residual_jacobian, schur_solve, CalibrationState, CameraIntrinsics, Landmark,
    NormalEquations, RefineConfig, RefineProblem, ResidualJacobian, RobustWeight, Vector7,
    CORE_DIM,
};
use lidarcam_calib::sim::{self, Profile, Scenario};
use nalgebra::{DVector, Matrix2x3, SMatrix, Vector2, Vector3, Vector6};
use proptest::prelude::*;
use proptest::test_runner::RngSeed;
use std::path::Path;

/// Fixed seed so every run checks the same cases.
fn cases(n: u32) -> ProptestConfig {
    ProptestConfig {
        rng_seed: RngSeed::Fixed(0x1ca1),
        failure_persistence: None,
        ..ProptestConfig::with_cases(n)
    }
}

fn vec3(range: f64) -> impl Strategy<Value = Vector3<f64>> {
    [-range..range, -range..range, -range..range].prop_map(|[x, y, z]| Vector3::new(x, y, z))
}

fn pose(rot: f64, trans: f64) -> impl Strategy<Value = Pose> {
    (vec3(rot), vec3(trans)).prop_map(|(r, t)| Pose::new(Rotation::exp(&r), t))
}

fn twist(rot: f64, trans: f64) -> impl Strategy<Value = Twist> {
    (vec3(rot), vec3(trans)).prop_map(|(r, t)| Twist::new(r, t))
}

/// Knots at integer seconds.
fn trajectory(knots: usize) -> impl Strategy<Value = ContinuousTrajectory> {
    prop::collection::vec(pose(1.0, 2.0), knots).prop_map(|poses| {
        let knots = poses
            .into_iter()
            .enumerate()
            .map(|(i, p)| StampedPose::new(i as f64, p))
            .collect();
        ContinuousTrajectory::new(knots, "lidar").unwrap()
    })
}

fn pose_distance(a: &Pose, b: &Pose) -> (f64, f64) {
    (
        a.rotation.angle_to(&b.rotation),
        (a.translation - b.translation).norm(),
    )
}

fn intrinsics() -> CameraIntrinsics {
    CameraIntrinsics::new(700.0, 690.0, 640.0, 360.0, 1280, 720).unwrap()
}

proptest! {
    #![proptest_config(cases(10_000))]

    #[test]
    fn exp_log_roundtrip(xi in twist(1.82, 5.0)) {
        prop_assume!(xi.rotation().norm() < std::f64::consts::PI - 1e-3);
        let back = log_map(&exp_map(&xi).unwrap()).unwrap();
        prop_assert!((back.0 - xi.0).amax() < 1e-9, "{}", (back.0 - xi.0).amax());
    }
}

proptest! {
    #![proptest_config(cases(200))]

    #[test]
    fn interpolation_is_exact_at_knots(traj in trajectory(5), k in 0usize..5) {
        let knot = traj.knots()[k];
        let (dr, dt) = pose_distance(&traj.interpolate(knot.timestamp).unwrap(), &knot.pose);
        prop_assert!(dr < 1e-12 && dt < 1e-12);
    }

    #[test]
    fn rotation_angle_grows_linearly_between_knots(traj in trajectory(3), alpha in 0.0..=1.0f64) {
        let [a, b] = [traj.knots()[1], traj.knots()[2]];
        let total = a.pose.rotation.angle_to(&b.pose.rotation);
        let mid = traj.interpolate(a.timestamp + alpha * (b.timestamp - a.timestamp)).unwrap();
        let partial = a.pose.rotation.angle_to(&mid.rotation);
        prop_assert!((partial - alpha * total).abs() < 1e-10);
    }

    #[test]
    fn log_exp_roundtrip(p in pose(1.8, 5.0)) {
        let back = exp_map(&log_map(&p).unwrap()).unwrap();
        let (dr, dt) = pose_distance(&back, &p);
        prop_assert!(dr < 1e-12 && dt < 1e-12);
    }

    #[test]
    fn interpolation_is_left_equivariant(
        traj in trajectory(4),
        g in pose(2.0, 10.0),
        t in 0.0..3.0f64,
    ) {
        let moved = traj.left_multiplied(&g);
        let (dr, dt) = pose_distance(&moved.interpolate(t).unwrap(), &(g * traj.interpolate(t).unwrap()));
        prop_assert!(dr < 1e-12 && dt < 1e-11);
    }

    #[test]
    fn interpolation_is_time_shift_equivariant(
        traj in trajectory(4),
        shift in -50.0..50.0f64,
        t in 0.0..3.0f64,
    ) {
        let shifted = traj.time_shifted(shift).unwrap();
        let a = shifted.interpolate((t + shift).clamp(shifted.start(), shifted.end())).unwrap();
        let (dr, dt) = pose_distance(&a, &traj.interpolate(t).unwrap());
        prop_assert!(dr < 1e-9 && dt < 1e-8);
    }
}

/// Residual of a landmark placed at `camera_point` in the camera frame at
/// time `t`, plus the state it was built from.
fn jacobian_case(
    traj: &ContinuousTrajectory,
    extrinsic: Pose,
    tau: f64,
    t: f64,
    camera_point: Vector3<f64>,
    pixel_offset: Vector2<f64>,
) -> (CalibrationState, Landmark, Vector2<f64>) {
    let state = CalibrationState::new(extrinsic, tau);
    let lidar_pose = traj.interpolate(t + tau).unwrap();
    let world = lidar_pose.transform_point(&extrinsic.inverse().transform_point(&camera_point));
    let k = intrinsics();
    let pixel = k.project(&camera_point).unwrap() + pixel_offset;
    (state, Landmark { position: world }, pixel)
}

fn residual(
    state: &CalibrationState,
    landmark: &Landmark,
    t: f64,
    pixel: &Vector2<f64>,
    traj: &ContinuousTrajectory,
) -> Vector2<f64> {
    refine::reprojection_residual(state, landmark, t, pixel, traj, &intrinsics())
        .unwrap()
        .unwrap()
}

fn relative_error<const C: usize>(a: &SMatrix<f64, 2, C>, b: &SMatrix<f64, 2, C>) -> f64 {
    (a - b).norm() / b.norm().max(1.0)
}

proptest! {
    #![proptest_config(cases(100))]

    #[test]
    fn analytic_jacobians_match_central_differences(
        traj in trajectory(6),
        extrinsic in pose(3.0, 0.5),
        tau in -0.2..0.2f64,
        segment in 1usize..4,
        u in 0.1..0.9f64,
        camera_point in (vec3(1.5), 2.0..15.0f64).prop_map(|(v, z)| Vector3::new(v.x, v.y, z)),
        offset in (-5.0..5.0f64, -5.0..5.0f64).prop_map(|(a, b)| Vector2::new(a, b)),
    ) {
        let t = segment as f64 + u - tau;
        let (state, landmark, pixel) = jacobian_case(&traj, extrinsic, tau, t, camera_point, offset);
        let ResidualJacobian { core, point, .. } =
            residual_jacobian(&state, &landmark, t, &pixel, &traj, &intrinsics()).unwrap().unwrap();

        let h = 1e-6;
        let mut fd_core = SMatrix::<f64, 2, CORE_DIM>::zeros();
        for i in 0..CORE_DIM {
            let mut d = Vector7::zeros();
            d[i] = h;
            let plus = residual(&state.retract(&d).unwrap(), &landmark, t, &pixel, &traj);
            let minus = residual(&state.retract(&(-d)).unwrap(), &landmark, t, &pixel, &traj);
            fd_core.set_column(i, &((plus - minus) / (2.0 * h)));
        }
        let mut fd_point = Matrix2x3::zeros();
        for i in 0..3 {
            let mut d = Vector3::zeros();
            d[i] = h;
            let at = |p: Vector3<f64>| residual(&state, &Landmark { position: p }, t, &pixel, &traj);
            fd_point.set_column(i, &((at(landmark.position + d) - at(landmark.position - d)) / (2.0 * h)));
        }
        prop_assert!(relative_error(&core, &fd_core) < 1e-4, "core {core} vs {fd_core}");
        prop_assert!(relative_error(&point, &fd_point) < 1e-4, "point {point} vs {fd_point}");
    }

    #[test]
    fn schur_step_equals_dense_solve(
        rows in prop::collection::vec(
            prop::collection::vec((prop::array::uniform14(-3.0..3.0f64), prop::array::uniform6(-3.0..3.0f64), -2.0..2.0f64, -2.0..2.0f64), 2..6),
            5..=50,
        ),
    ) {
        let mut system = NormalEquations::new(rows.len());
        let robust = RobustWeight::none();
        for (j, landmark_rows) in rows.iter().enumerate() {
            for (core, point, e0, e1) in landmark_rows {
                let r = ResidualJacobian {
                    residual: Vector2::new(*e0, *e1),
                    core: SMatrix::<f64, 2, CORE_DIM>::from_row_slice(core),
                    point: Matrix2x3::from_row_slice(point),
                };
                system.add_residual(j, &r, &robust);
            }
        }
        let (h, g) = system.to_dense();
        let dense = h.clone().lu().solve(&(-&g)).unwrap();
        let schur = schur_solve(&system).unwrap();
        let expected = dense.rows(0, CORE_DIM).into_owned();
        let err = (schur - Vector7::from_iterator(expected.iter().copied())).norm();
        prop_assert!(err <= 1e-9 * expected.norm().max(1e-300), "relative {}", err / expected.norm());
        // the dense reference itself solves the full system
        let resid: DVector<f64> = &h * &dense + &g;
        prop_assert!(resid.norm() < 1e-8 * g.norm().max(1.0));
    }
}

fn zero_noise(profile: Profile, seed: u64) -> Scenario {
    Scenario {
        profile,
        pixel_noise: 0.0,
        seed,
        ..Scenario::default()
    }
}

proptest! {
    #![proptest_config(cases(20))]

    #[test]
    fn closed_form_ignores_world_frames(
        seed in 0u64..1000,
        camera_world in pose(3.0, 20.0),
        lidar_world in pose(3.0, 20.0),
    ) {
        let data = sim::generate_scenario(&zero_noise(Profile::HandheldSinusoid, seed)).unwrap();
        let cfg = PairConfig::default();
        let a = coarse::closed_form(&data.lidar, &data.camera_poses, &cfg).unwrap();
        let camera: Vec<StampedPose> = data
            .camera_poses
            .iter()
            .map(|p| StampedPose::new(p.timestamp, camera_world * p.pose))
            .collect();
        let lidar = data.lidar.left_multiplied(&lidar_world);
        let b = coarse::closed_form(&lidar, &camera, &cfg).unwrap();
        let (dr, dt) = pose_distance(&a.extrinsic, &b.extrinsic);
        // relative poses cancel the world offsets only up to rounding of their size
        let tol = 1e-12 * camera_world.translation.norm().max(lidar_world.translation.norm()).max(1.0);
        prop_assert!(dr < tol && dt < tol, "dr {dr} dt {dt} tol {tol}");
        prop_assert!((b.scale / a.scale - 1.0).abs() < tol);
    }

    #[test]
    fn closed_form_is_scale_equivariant(seed in 0u64..1000, s in 0.1..10.0f64) {
        let data = sim::generate_scenario(&zero_noise(Profile::HandheldSinusoid, seed)).unwrap();
        let cfg = PairConfig::default();
        let a = coarse::closed_form(&data.lidar, &data.camera_poses, &cfg).unwrap();
        let scaled: Vec<StampedPose> = data
            .camera_poses
            .iter()
            .map(|p| StampedPose::new(p.timestamp, Pose::new(p.pose.rotation, p.pose.translation * s)))
            .collect();
        let b = coarse::closed_form(&data.lidar, &scaled, &cfg).unwrap();
        let (dr, dt) = pose_distance(&a.extrinsic, &b.extrinsic);
        prop_assert!(dr < 1e-10 && dt < 1e-10, "dr {dr} dt {dt}");
        prop_assert!((b.scale * s / a.scale - 1.0).abs() < 1e-10);
    }

    #[test]
    fn hand_eye_recovers_any_extrinsic_without_noise(
        x in pose(3.0, 1.0),
        scale in 0.2..5.0f64,
        motions in prop::collection::vec((vec3(1.0), 0.3..1.2f64, vec3(1.0)), 3..12),
    ) {
        let pairs: Vec<_> = motions
            .iter()
            .filter(|(axis, _, _)| axis.norm() > 0.1)
            .filter_map(|(axis, angle, t)| {
                let a = Pose::new(Rotation::exp(&(axis.normalize() * *angle)), *t);
                let mut b = x.inverse() * a * x;
                b.translation /= scale;
                coarse::RelativePosePair::new(a, b, (0.0, 1.0)).ok()
            })
            .collect();
        prop_assume!(pairs.len() >= 3);
        // generic motion: rotation axes must span 3D
        let axes = nalgebra::Matrix3xX::from_columns(
            &pairs.iter().map(|p| p.lidar_rel.rotation.log().normalize()).collect::<Vec<_>>(),
        );
        let sv = axes.singular_values();
        prop_assume!(sv.min() > 0.2 * sv.max());
        let (r, _) = coarse::solve_rotation(&pairs).unwrap();
        let (t, lambda, _) = coarse::solve_translation_scale(&pairs, &r).unwrap();
        prop_assert!(r.angle_to(&x.rotation) < 1e-8);
        prop_assert!((t - x.translation).norm() < 1e-8);
        prop_assert!((lambda / scale - 1.0).abs() < 1e-8);
    }

    #[test]
    fn hand_eye_rotation_is_orthonormal_under_noise(
        x in pose(3.0, 1.0),
        motions in prop::collection::vec((vec3(1.0), 0.3..1.2f64, vec3(0.1)), 4..12),
    ) {
        let pairs: Vec<_> = motions
            .iter()
            .filter(|(axis, _, _)| axis.norm() > 0.1)
            .filter_map(|(axis, angle, noise)| {
                let a = Pose::new(Rotation::exp(&(axis.normalize() * *angle)), Vector3::zeros());
                let mut b = x.inverse() * a * x;
                b.rotation = Rotation::exp(noise) * b.rotation;
                coarse::RelativePosePair::new(a, b, (0.0, 1.0)).ok()
            })
            .collect();
        prop_assume!(pairs.len() >= 3);
        if let Ok((r, _)) = coarse::solve_rotation(&pairs) {
            let m = r.matrix();
            prop_assert!((m * m.transpose() - nalgebra::Matrix3::identity()).amax() < 1e-12);
            prop_assert!((m.determinant() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn ground_truth_is_stationary_without_noise(seed in 0u64..1000) {
        let data = sim::generate_scenario(&zero_noise(Profile::HandheldSinusoid, seed)).unwrap();
        let truth = &data.truth;
        let state = CalibrationState::new(truth.extrinsic.inverse(), truth.lag);
        let keyframes = refine::select_keyframes(&data.frames, 30, &data.lidar, truth.lag);
        let tracks = refine::restrict_tracks(&data.tracks, &keyframes, 3);
        let problem = RefineProblem::new(&data.lidar, data.intrinsics, &keyframes, tracks, RobustWeight::default());
        let at_truth = problem.linearize(&state).unwrap();
        let worst = at_truth.residual_norms.iter().cloned().fold(0.0, f64::max);
        prop_assert!(worst < 1e-6, "residual {worst} px");
        let reduced = |s: &CalibrationState| {
            let lin = problem.linearize(s).unwrap();
            prop_assert!(lin.system.residual_count > 100);
            Ok(lin.system.reduce().unwrap())
        };
        let (h, g) = reduced(&state)?;
        // gradient in the Jacobi-scaled coordinates the solver steps in
        let scaled = Vector7::from_fn(|i, _| g[i] / h[(i, i)].sqrt());
        prop_assert!(scaled.norm() < 1e-10, "scaled gradient {}", scaled.norm());
        let nudged = state.retract(&Vector7::from_element(1e-3)).unwrap();
        let (_, g_off) = reduced(&nudged)?;
        prop_assert!(g.norm() < 1e-5 * g_off.norm(), "{} vs {}", g.norm(), g_off.norm());
    }

    #[test]
    fn trajectory_file_roundtrip_is_exact(traj in trajectory(5)) {
        let text = io::format_trajectory("lidar", traj.knots());
        let back = io::parse_trajectory(&text, Path::new("t.txt")).unwrap();
        prop_assert_eq!(back.clock, "lidar");
        for (a, b) in back.poses.iter().zip(traj.knots()) {
            prop_assert_eq!(a.timestamp, b.timestamp);
            let (dr, dt) = pose_distance(&a.pose, &b.pose);
            prop_assert!(dr < 1e-12 && dt == 0.0);
        }
    }

    #[test]
    fn config_text_roundtrip(
        keyframes in 3usize..500,
        scale in 0.1..10.0f64,
        noise in 0.0..10.0f64,
        offset in prop::option::of(-1.0..1.0f64),
        extrinsic in pose(3.0, 1.0),
        lags in prop::collection::vec(-0.2..0.2f64, 1..6),
    ) {
        let mut c = Config::default();
        c.refine.keyframes = keyframes;
        c.refine.robust.scale = scale;
        c.sim.pixel_noise = noise;
        c.sim.extrinsic = extrinsic;
        c.coarse.time_offset = offset;
        c.sweep.lags = lags;
        let back = Config::parse(&c.to_text(), Path::new("c.txt")).unwrap();
        prop_assert_eq!(back.to_text(), c.to_text());
        let (dr, dt) = pose_distance(&back.sim.extrinsic, &c.sim.extrinsic);
        prop_assert!(dr < 1e-12 && dt == 0.0);
        prop_assert_eq!(back.refine, c.refine);
        prop_assert_eq!(back.coarse, c.coarse);
        prop_assert_eq!(back.sweep, c.sweep);
    }
}

proptest! {
    #![proptest_config(cases(5))]

    #[test]
    fn dataset_files_roundtrip(seed in 0u64..1000) {
        let data = sim::generate_scenario(&Scenario { seed, ..Scenario::default() }).unwrap();
        let dir = tempfile::tempdir().unwrap();
        io::write_dataset(dir.path(), &data).unwrap();
        let back = io::CalibrationInputs::load(
            &dir.path().join(io::LIDAR_FILE),
            &dir.path().join(io::CAMERA_FILE),
            &dir.path().join(io::TRACKS_FILE),
            &dir.path().join(io::INTRINSICS_FILE),
        )
        .unwrap();
        for (a, b) in [(back.lidar.knots(), data.lidar.knots()), (&back.camera_poses[..], &data.camera_poses[..])] {
            prop_assert_eq!(a.len(), b.len());
            for (p, q) in a.iter().zip(b) {
                prop_assert_eq!(p.timestamp, q.timestamp);
                prop_assert_eq!(p.pose.translation, q.pose.translation);
                let (x, y) = (p.pose.rotation.quaternion(), q.pose.rotation.quaternion());
                prop_assert!((x.coords - y.coords).amax() < 1e-15, "{:?} vs {:?}", x, y);
            }
        }
        prop_assert_eq!(&back.tracks.frames, &data.frames);
        prop_assert_eq!(&back.tracks.tracks, &data.tracks);
        prop_assert_eq!(back.intrinsics, data.intrinsics);
        let truth = io::load_ground_truth(&dir.path().join(io::GROUND_TRUTH_FILE)).unwrap();
        prop_assert_eq!(truth, data.truth);
    }
}

fn noisy_refine(seed: u64) -> refine::RefineResult {
    let data = sim::generate_scenario(&Scenario {
        seed,
        lag: 0.004,
        ..Scenario::default()
    })
    .unwrap();
    let initial = CoarseResult {
        extrinsic: sim::perturb_extrinsic(&data.truth.extrinsic, 0.03, 0.03, seed + 1),
        scale: data.truth.scale,
        time_offset: 0.0,
        conditioning: Default::default(),
        pairs: 0,
    };
    data.refine(&initial, &RefineConfig::default(), true)
        .unwrap()
}

proptest! {
    #![proptest_config(cases(8))]

    #[test]
    fn cost_histories_never_increase(seed in 0u64..1000) {
        let r = noisy_refine(seed);
        for h in [&r.lag_cost_history, &r.cost_history] {
            prop_assert!(!h.is_empty());
            for w in h.windows(2) {
                prop_assert!(w[1] <= w[0], "{} then {}", w[0], w[1]);
            }
        }
        prop_assert!(r.cost_history[0] <= r.lag_cost_history[0]);
    }
}

#[test]
fn refinement_is_deterministic() {
    let a = noisy_refine(11);
    let b = noisy_refine(11);
    assert_eq!(a, b);
}

#[test]
fn report_extrinsic_reloads_within_tolerance() {
    let r = noisy_refine(5);
    let report = io::CalibrationReport {
        mode: io::RunMode::Full,
        coarse: CoarseResult {
            extrinsic: r.extrinsic,
            scale: 1.3,
            time_offset: 0.0,
            conditioning: Default::default(),
            pairs: 10,
        },
        refine: Some(r.clone()),
        truth: None,
        config: Config::default(),
        seed: 0,
    };
    let text = report.to_text().unwrap();
    assert!(!text.contains("truth."));
    let back = io::parse_report(&text, Path::new("r.txt")).unwrap();
    let (m, n) = (back.extrinsic.matrix(), r.extrinsic.matrix());
    assert!((m - n).amax() < 1e-12);
    assert_eq!(back.tau, r.tau);
    let twist = Vector6::from_iterator(
        text.lines()
            .find_map(|l| l.strip_prefix("extrinsic.twist = "))
            .unwrap()
            .split_whitespace()
            .map(|v| v.parse::<f64>().unwrap()),
    );
    let x = exp_map(&Twist(twist)).unwrap().inverse();
    assert!((x.matrix() - n).amax() < 1e-12);
}
