use std::path::Path;
use std::process::{Command, Output};

use polemap::io::{parse_report, read_landmarks, read_trajectory, read_world};

const SMALL: &str = "
seed = 5
grid.extent_x = 20
grid.extent_y = 20
filter.particles = 300
sim.channels = 16
sim.azimuth_beams = 240
sim.route_width = 40
sim.route_height = 24
sim.route_radius = 6
sim.poles = 8
sim.area = 70
sim.route_band = 6
";

fn polemap(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_polemap"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> String {
    let out = polemap(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn evaluate_identical_trajectories_is_zero() {
    let d = tempfile::tempdir().unwrap();
    let t = d.path().join("t.csv");
    std::fs::write(
        &t,
        "# polemap trajectory version 1.0\nt,x,y,phi\n0,0,0,0\n1,1,0,0\n2,2,0.5,0.2\n3,3,1,0.4\n",
    )
    .unwrap();
    let report = ok(&["evaluate", "--estimate", s(&t), "--ground-truth", s(&t)]);
    let kv = parse_report(&report).unwrap();
    let keys: Vec<&str> = kv.iter().map(|(k, _)| k.as_str()).collect();
    assert_eq!(keys, ["delta_pos", "rmse_pos", "delta_ang", "rmse_ang", "n_samples"]);
    assert!(kv[..4].iter().all(|(_, v)| *v == 0.0), "{report}");
    assert!(kv[4].1 >= 3.0);

    let errs = d.path().join("e.csv");
    ok(&["evaluate", "--estimate", s(&t), "--ground-truth", s(&t), "--dump-errors", s(&errs)]);
    let text = std::fs::read_to_string(errs).unwrap();
    assert!(text.starts_with("# polemap errors version 1.0\nt,position_error,heading_error_deg\n"));
}

#[test]
fn missing_and_malformed_inputs_fail_with_diagnostics() {
    let d = tempfile::tempdir().unwrap();
    let missing = d.path().join("no_such_map.csv");
    let out = polemap(&[
        "localize",
        "--map",
        s(&missing),
        "--odometry",
        "o.csv",
        "--scans",
        "s.bin",
        "--initial",
        "0,0,0,0",
        "--out",
        "x.csv",
    ]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("no_such_map.csv"));

    let bad = d.path().join("bad.csv");
    std::fs::write(&bad, "# polemap trajectory version 1.0\nt,x,y,phi\n0,0,0,0\n1,oops,0,0\n").unwrap();
    let out = polemap(&["evaluate", "--estimate", s(&bad), "--ground-truth", s(&bad)]);
    assert_eq!(out.status.code(), Some(1));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("bad.csv:4") && err.contains("`x`"), "{err}");

    let out = polemap(&["evaluate", "--bogus-flag"]);
    assert_eq!(out.status.code(), Some(2));

    let cfg = d.path().join("cfg.txt");
    std::fs::write(&cfg, "filter.particles = 0\n").unwrap();
    let out = polemap(&["--config", s(&cfg), "evaluate", "--estimate", s(&bad), "--ground-truth", s(&bad)]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("filter.particles"));
}

#[test]
fn full_pipeline_is_deterministic() {
    let d = tempfile::tempdir().unwrap();
    let cfg = d.path().join("cfg.txt");
    std::fs::write(&cfg, SMALL).unwrap();
    let c = s(&cfg);
    let mut reports = Vec::new();
    for round in 0..2 {
        let dir = d.path().join(format!("r{round}"));
        let (map_dir, run_dir) = (dir.join("map"), dir.join("run"));
        ok(&["--config", c, "simulate", "--out-dir", s(&map_dir)]);
        // same world, different noise for the localization drive
        ok(&[
            "--config",
            c,
            "--seed",
            "6",
            "simulate",
            "--out-dir",
            s(&run_dir),
            "--world",
            s(&map_dir.join("world.csv")),
        ]);
        let map = dir.join("map.csv");
        ok(&[
            "--config",
            c,
            "build-map",
            "--scans",
            s(&map_dir.join("scans_map.bin")),
            "--trajectory",
            s(&map_dir.join("ground_truth.csv")),
            "--out",
            s(&map),
        ]);
        let est = dir.join("estimate.csv");
        ok(&[
            "--config",
            c,
            "localize",
            "--map",
            s(&map),
            "--odometry",
            s(&run_dir.join("odometry.csv")),
            "--scans",
            s(&run_dir.join("scans_odom.bin")),
            "--initial-from",
            s(&run_dir.join("ground_truth.csv")),
            "--out",
            s(&est),
        ]);
        let report = dir.join("report.txt");
        ok(&[
            "evaluate",
            "--estimate",
            s(&est),
            "--ground-truth",
            s(&run_dir.join("ground_truth.csv")),
            "--out",
            s(&report),
        ]);
        let eps = ok(&[
            "--config",
            c,
            "estimate-epsilon",
            "--map",
            s(&map),
            "--scans",
            s(&run_dir.join("scans_map.bin")),
            "--trajectory",
            s(&run_dir.join("ground_truth.csv")),
        ]);
        let f_map = ok(&[
            "--config",
            c,
            "extend-map",
            "--map",
            s(&map),
            "--scans",
            s(&run_dir.join("scans_map.bin")),
            "--trajectory",
            s(&run_dir.join("ground_truth.csv")),
            "--visited",
            s(&map_dir.join("ground_truth.csv")),
            "--out",
            s(&dir.join("extended.csv")),
        ]);
        assert_eq!(f_map.trim(), "f_map=0");
        assert_eq!(
            std::fs::read(dir.join("extended.csv")).unwrap(),
            std::fs::read(&map).unwrap()
        );

        let world = read_world(&map_dir.join("world.csv")).unwrap();
        let landmarks = read_landmarks(&map).unwrap();
        assert!(!landmarks.is_empty());
        for l in &landmarks {
            let d = world.poles.iter().map(|p| p.center.distance(l.center)).fold(f64::MAX, f64::min);
            assert!(d < 0.3, "landmark {:?} is {d} m from every pole", l.center);
        }
        let text = std::fs::read_to_string(&report).unwrap();
        let kv = parse_report(&text).unwrap();
        assert!(kv[0].1 < 0.5, "{text}");
        let eps: f64 = eps.trim().strip_prefix("unmatched_fraction=").unwrap().parse().unwrap();
        assert!((0.0..=0.5).contains(&eps), "{eps}");
        assert_eq!(
            read_trajectory(&est).unwrap().len(),
            read_trajectory(&run_dir.join("ground_truth.csv")).unwrap().len()
        );
        reports.push([map, est, report].map(|p| std::fs::read(p).unwrap()));
    }
    assert!(reports[0] == reports[1], "outputs differ between identical runs");
}

#[test]
fn extract_finds_simulated_poles() {
    let d = tempfile::tempdir().unwrap();
    let cfg = d.path().join("cfg.txt");
    std::fs::write(&cfg, format!("{SMALL}sim.route_width = 8\nsim.route_height = 6\nsim.route_radius = 2\nsim.poles = 3\nsim.area = 20\nsim.min_separation = 3\nsim.route_band = 5\n")).unwrap();
    let c = s(&cfg);
    let dir = d.path().join("sim");
    ok(&["--config", c, "simulate", "--out-dir", s(&dir)]);
    let det = d.path().join("det.csv");
    ok(&["--config", c, "extract", "--scans", s(&dir.join("scans_map.bin")), "--out", s(&det), "--center", "0,0"]);
    let world = read_world(&dir.join("world.csv")).unwrap();
    let found = polemap::io::read_detections(&det).unwrap();
    for p in &world.poles {
        assert!(
            found.iter().any(|f| f.center.distance(p.center) < 0.2),
            "pole at {:?} not detected in {found:?}",
            p.center
        );
    }
}
