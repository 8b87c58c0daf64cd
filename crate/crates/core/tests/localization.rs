use polemap::config::SimulationConfig;
use polemap::evaluation::compare_trajectories;
use polemap::localization::{
    initialize, localize_run, systematic_indices, Composition, LocalizationParams, MeasurementParams,
    OdometryIncrement,
};
use polemap::mapping::{LandmarkMap, PoleLandmark};
use polemap::simulator::{generate_world, simulate_run, Frame, OdometryNoise, SimRun};
use polemap::{Pose2D, Vec2d};
use proptest::prelude::*;

fn small_sim() -> SimulationConfig {
    let mut s = SimulationConfig::default();
    s.channels = 16;
    s.azimuth_beams = 240;
    s.route_width = 30.0;
    s.route_height = 20.0;
    s.route_radius = 5.0;
    s.poles = 10;
    s.area = 60.0;
    s.route_band = 6.0;
    s
}

fn small_params(seed: u64) -> LocalizationParams<f64> {
    let mut p = LocalizationParams::default();
    p.grid.extent = [20.0, 20.0, 5.0];
    p.filter.particles = 2000;
    p.seed = seed;
    p
}

fn pole_map(run: &SimRun<f64>, shift: Vec2d) -> LandmarkMap<f64> {
    LandmarkMap::new(
        run.world
            .poles
            .iter()
            .map(|p| PoleLandmark::new(p.center + shift, p.width, 1.0))
            .collect(),
    )
}

/// Noise-free drive whose odometry reports the uncertainty `claim`.
fn exact_run(seed: u64, claim: &OdometryNoise<f64>) -> SimRun<f64> {
    let mut sim = small_sim();
    sim.range_noise = 0.0;
    let world = generate_world(&sim.world_spec(sim.route()), seed).unwrap();
    let mut run = simulate_run(&world, &sim.sensor(), &sim.trajectory().unwrap(), &OdometryNoise::none(), seed).unwrap();
    for r in &mut run.odometry {
        let d = r.increment.pose().translation().norm();
        r.increment = OdometryIncrement::new(r.increment.chi, claim.covariance(d)).unwrap();
    }
    run
}

#[test]
fn perfect_data_localizes_closely() {
    // odometry is exact, so it claims only a small residual uncertainty
    let claim = OdometryNoise { x: 0.002, y: 0.002, phi: 0.02f64.to_radians() };
    for seed in 2..6 {
        let run = exact_run(seed, &claim);
        let map = pole_map(&run, Vec2d::new(0.0, 0.0));
        let mut params = small_params(seed);
        params.filter.init_radius = 0.0;
        params.filter.init_heading_range = 0.0;
        let est = localize_run(&map, run.ground_truth[0], &run.odometry, run.scans(Frame::Odometry), &params).unwrap();
        let report = compare_trajectories(&est, &run.ground_truth, 1.0).unwrap();
        assert!(report.delta_pos < 0.05, "seed {seed}: delta_pos {}", report.delta_pos);
        assert!(report.max_position_error() < 0.3);
    }
}

#[test]
fn uninformative_measurements_follow_odometry() {
    let run = exact_run(3, &OdometryNoise::default());
    // every match is far off and the floor dominates: updates carry no information
    let map = pole_map(&run, Vec2d::new(100.0, 0.0));
    let mut params = small_params(3);
    params.filter.measurement = MeasurementParams { sigma: 1e-3, epsilon: 1.0 };
    let est = localize_run(&map, run.ground_truth[0], &run.odometry, run.scans(Frame::Odometry), &params).unwrap();
    assert_eq!(est.len(), run.odometry.len() + 1);
    let start = run.ground_truth[0].pose;
    for (e, o) in est.iter().zip(&run.odometry_poses) {
        let want = start.compose(&o.pose);
        assert!(e.pose.translation().distance(want.translation()) < 0.3, "at t={}: {:?} vs {want:?}", e.t, e.pose);
    }
}

#[test]
fn localization_is_deterministic() {
    let mut sim = small_sim();
    sim.route_width = 16.0;
    sim.route_height = 12.0;
    let world = generate_world(&sim.world_spec(sim.route()), 4).unwrap();
    let run = simulate_run(&world, &sim.sensor(), &sim.trajectory().unwrap(), &sim.odometry_noise(), 4).unwrap();
    let map = pole_map(&run, Vec2d::new(0.0, 0.0));
    let go = || localize_run(&map, run.ground_truth[0], &run.odometry, run.scans(Frame::Odometry), &small_params(9)).unwrap();
    assert_eq!(go(), go());
}

#[test]
fn initialization_is_area_uniform() {
    let center = Pose2D::new(3.0, -4.0, 0.5);
    let n = 5000;
    let ps = initialize(center, 2.5, 5f64.to_radians(), n, 11).unwrap();
    let (mx, my) = ps.poses.iter().fold((0.0, 0.0), |(x, y), p| (x + p.x, y + p.y));
    // per-axis standard deviation of a uniform disc is radius / 2
    let sd_mean = 1.25 / (n as f64).sqrt();
    assert!((mx / n as f64 - 3.0).abs() < 3.0 * sd_mean && (my / n as f64 + 4.0).abs() < 3.0 * sd_mean);
    let inner = ps.poses.iter().filter(|p| p.translation().distance(center.translation()) < 1.25).count();
    assert!((inner as f64 / n as f64 - 0.25).abs() < 0.02);
    assert!(ps.poses.iter().all(|p| (p.phi - 0.5).abs() <= 5f64.to_radians() + 1e-12));
    let ps = initialize(center, 0.0, 0.0, 10, 11).unwrap();
    assert!(ps.poses.iter().all(|p| *p == center));
}

#[test]
fn motion_noise_has_inflated_covariance() {
    let n = 100_000;
    let sigma = [[0.01, 0.0, 0.0], [0.0, 0.01, 0.0], [0.0, 0.0, 0.001]];
    let mut ps = initialize(Pose2D::identity(), 0.0, 0.0, n, 5).unwrap();
    ps.motion_update(&OdometryIncrement::new([0.0; 3], sigma).unwrap(), 4.0, Composition::Body).unwrap();
    let xs: Vec<[f64; 3]> = ps.poses.iter().map(|p| [p.x, p.y, p.phi]).collect();
    let mean: Vec<f64> = (0..3).map(|k| xs.iter().map(|x| x[k]).sum::<f64>() / n as f64).collect();
    for r in 0..3 {
        for c in 0..3 {
            let cov = xs.iter().map(|x| (x[r] - mean[r]) * (x[c] - mean[c])).sum::<f64>() / (n - 1) as f64;
            let want = 4.0 * sigma[r][c];
            let scale = 4.0 * (sigma[r][r] * sigma[c][c]).sqrt();
            assert!((cov - want).abs() <= 0.05 * scale, "cov[{r}][{c}] = {cov}, want {want}");
        }
    }
}

#[test]
fn quarter_turns_compose() {
    let mut ps = initialize(Pose2D::identity(), 0.0, 0.0, 3, 1).unwrap();
    let turn = OdometryIncrement::noiseless([0.0, 0.0, std::f64::consts::FRAC_PI_2]);
    ps.motion_update(&turn, 4.0, Composition::Body).unwrap();
    ps.motion_update(&turn, 4.0, Composition::Body).unwrap();
    for p in &ps.poses {
        assert!(p.x.abs() < 1e-15 && p.y.abs() < 1e-15);
        assert!((p.phi.abs() - std::f64::consts::PI).abs() < 1e-12);
    }
}

fn weights() -> impl Strategy<Value = Vec<f64>> {
    prop_oneof![
        prop::collection::vec(1e-9..1.0f64, 1..300),
        prop::collection::vec(prop_oneof![Just(0.0), 1e-12..1.0f64], 1..300)
            .prop_filter("some mass", |w| w.iter().sum::<f64>() > 0.0),
    ]
}

proptest! {
    #[test]
    fn systematic_counts_are_floor_or_ceil(w in weights(), u in 0.0..1.0f64) {
        let n = w.len();
        let idx = systematic_indices(&w, u);
        prop_assert_eq!(idx.len(), n);
        let s: f64 = w.iter().sum();
        let mut counts = vec![0usize; n];
        for &i in &idx {
            counts[i] += 1;
        }
        for (c, wi) in counts.iter().zip(&w) {
            let e = n as f64 * wi / s;
            prop_assert!((e - 1e-9).floor() <= *c as f64 && *c as f64 <= (e + 1e-9).ceil(), "count {} for expectation {}", c, e);
        }
        prop_assert!(idx.windows(2).all(|p| p[0] <= p[1]));
    }

    #[test]
    fn uniform_weights_select_each_once(n in 1usize..3000, u in 0.0..1.0f64) {
        let idx = systematic_indices(&vec![1.0 / n as f64; n], u);
        prop_assert!(idx.iter().enumerate().all(|(i, &j)| i == j));
    }

    #[test]
    fn measurement_update_keeps_weights_normalized(
        online in prop::collection::vec((-20.0..20.0f64, -20.0..20.0f64), 0..15),
        poles in prop::collection::vec((-30.0..30.0f64, -30.0..30.0f64), 1..30),
        seed in 0u64..1000,
    ) {
        let map = LandmarkMap::new(poles.iter().map(|&(x, y)| PoleLandmark::new(Vec2d::new(x, y), 0.2, 1.0)).collect());
        let mut ps = initialize(Pose2D::identity(), 2.5, 0.1, 200, seed).unwrap();
        let before = ps.weights.clone();
        let online: Vec<Vec2d> = online.iter().map(|&(x, y)| Vec2d::new(x, y)).collect();
        ps.measurement_update(&online, &map, &MeasurementParams { sigma: 1.0, epsilon: 0.1 }).unwrap();
        if online.is_empty() {
            prop_assert_eq!(&ps.weights, &before);
        }
        prop_assert!(ps.weights.iter().all(|w| w.is_finite() && *w > 0.0));
        prop_assert!((ps.weights.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn homogeneous_matrix_round_trip(x in -1e3..1e3f64, y in -1e3..1e3f64, phi in -3.14..3.14f64) {
        let p = Pose2D::new(x, y, phi);
        let q = Pose2D::from_matrix(&p.to_matrix());
        prop_assert!((p.x - q.x).abs() < 1e-12 && (p.y - q.y).abs() < 1e-12 && (p.phi - q.phi).abs() < 1e-12);
    }

    #[test]
    fn increment_covariance_is_symmetric_psd(a in prop::array::uniform3(-1.0..1.0f64), b in prop::array::uniform3(-1.0..1.0f64)) {
        // sigma = a a^T + b b^T is positive semidefinite by construction
        let mut s = [[0.0; 3]; 3];
        for r in 0..3 {
            for c in 0..3 {
                s[r][c] = a[r] * a[c] + b[r] * b[c];
            }
        }
        let inc = OdometryIncrement::new([0.0; 3], s).unwrap();
        for r in 0..3 {
            for c in 0..3 {
                prop_assert!((inc.sigma[r][c] - inc.sigma[c][r]).abs() < 1e-12);
            }
        }
    }
}
