use std::path::PathBuf;
use std::process::{Command, Output};

use herding::scenario_io::read_trajectory;

fn scenario(name: &str) -> String {
    PathBuf::from(env!("CARGO_MANIFEST_DIR"))
        .join("../../scenarios")
        .join(name)
        .display()
        .to_string()
}

fn herd(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_herd"))
        .args(args)
        .output()
        .expect("herd runs")
}

fn json(out: &Output) -> serde_json::Value {
    serde_json::from_slice(&out.stdout)
        .unwrap_or_else(|e| panic!("{e}: {}", String::from_utf8_lossy(&out.stdout)))
}

#[test]
fn simulate_writes_a_readable_trajectory() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("fig1.csv");
    let o = herd(&[
        "simulate",
        "--scenario",
        &scenario("fig1_left.scenario"),
        "--tf",
        "15",
        "--steps",
        "1500",
        "--out",
        out.to_str().unwrap(),
    ]);
    assert_eq!(
        o.status.code(),
        Some(0),
        "{}",
        String::from_utf8_lossy(&o.stderr)
    );
    let (traj, header) = read_trajectory(&out).unwrap();
    assert_eq!(traj.len(), 1501);
    assert_eq!(traj.layout().evaders, 5);
    assert!(header.scenario_hash.is_some());
}

#[test]
fn simulate_exports_plot_blocks() {
    let dir = tempfile::tempdir().unwrap();
    let plot = dir.path().join("fig3.dat");
    let o = herd(&[
        "simulate",
        "--scenario",
        &scenario("fig3.scenario"),
        "--out",
        dir.path().join("fig3.csv").to_str().unwrap(),
        "--plot",
        plot.to_str().unwrap(),
        "--series",
        "tracks,energy",
    ]);
    assert_eq!(
        o.status.code(),
        Some(0),
        "{}",
        String::from_utf8_lossy(&o.stderr)
    );
    let text = std::fs::read_to_string(plot).unwrap();
    assert!(text.contains("# index 0: tracks") && text.contains("# index 1: energy"));
}

#[test]
fn reach_fig3_echoes_the_switching_time() {
    let o = herd(&[
        "reach",
        "--scenario",
        &scenario("fig3.scenario"),
        "--target",
        "-1,1",
        "--tol",
        "0.05",
        "--json",
    ]);
    assert_eq!(
        o.status.code(),
        Some(0),
        "{}",
        String::from_utf8_lossy(&o.stderr)
    );
    let r = json(&o);
    assert_eq!(r["schema"], 1);
    assert_eq!(r["reached"], true);
    let t2 = r["schedule"]["t2"].as_f64().unwrap();
    assert!((t2 - 9.26).abs() < 0.05, "t2 = {t2}");
}

#[test]
fn reach_missing_the_tolerance_exits_one() {
    let o = herd(&[
        "reach",
        "--scenario",
        &scenario("fig3.scenario"),
        "--tol",
        "1e-12",
        "--json",
    ]);
    assert_eq!(o.status.code(), Some(1));
    assert_eq!(json(&o)["reached"], false);
}

#[test]
fn validate_gradient_passes_on_fig6() {
    let o = herd(&[
        "validate-gradient",
        "--scenario",
        &scenario("fig6.scenario"),
        "--json",
    ]);
    assert_eq!(
        o.status.code(),
        Some(0),
        "{}",
        String::from_utf8_lossy(&o.stderr)
    );
    assert!(json(&o)["max_relative_error"].as_f64().unwrap() < 1e-4);
}

#[test]
fn feedback_guidance_reaches_the_target() {
    let o = herd(&[
        "feedback",
        "--scenario",
        &scenario("feedback_guidance.scenario"),
        "--json",
    ]);
    assert_eq!(
        o.status.code(),
        Some(0),
        "{}",
        String::from_utf8_lossy(&o.stderr)
    );
    assert_eq!(json(&o)["reached"], true);
}

#[test]
fn diagnose_reports_the_pursuit_distance() {
    let dir = tempfile::tempdir().unwrap();
    let file = dir.path().join("pursuit.scenario");
    let text = std::fs::read_to_string(scenario("fig3.scenario"))
        .unwrap()
        .replace(
            "kind = \"off_bang_off\"\nt1 = 2.0\nt2 = 9.256\n",
            "kind = \"constant\"\n",
        )
        .replace("kp = 1.0, kc = 1.0", "kp = 1.0, kc = 0.0");
    std::fs::write(&file, text).unwrap();
    let o = herd(&[
        "diagnose",
        "--scenario",
        file.to_str().unwrap(),
        "--tf",
        "30",
        "--steps",
        "3000",
        "--json",
    ]);
    assert_eq!(
        o.status.code(),
        Some(0),
        "{}",
        String::from_utf8_lossy(&o.stderr)
    );
    let r = json(&o);
    assert_eq!(r["dissipation_mode"]["mode"], "pursuit");
    assert!(r["dissipation_max_violation"].as_f64().unwrap() < 1e-6);
    assert!((r["relative_distance"].as_f64().unwrap() - 1.0).abs() < 1e-3);
}

#[test]
fn usage_and_validation_errors_exit_two() {
    assert_eq!(herd(&["bogus"]).status.code(), Some(2));
    assert_eq!(herd(&["simulate"]).status.code(), Some(2));
    let seed = herd(&[
        "simulate",
        "--scenario",
        &scenario("fig3.scenario"),
        "--seed",
        "3",
    ]);
    assert_eq!(seed.status.code(), Some(2));

    let dir = tempfile::tempdir().unwrap();
    let file = dir.path().join("bad.scenario");
    let text = std::fs::read_to_string(scenario("fig3.scenario"))
        .unwrap()
        .replace("nu_e = 2.0", "nu_e = -1.0");
    std::fs::write(&file, text).unwrap();
    let o = herd(&["simulate", "--scenario", file.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("friction must be positive"));
}
