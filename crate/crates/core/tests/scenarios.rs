use std::path::PathBuf;

use herding::diagnostics::winding_angle;
use herding::dynamics::{AgentState, Layout};
use herding::feedback::run_closed_loop;
use herding::kernels::KernelSet;
use herding::scenario_io::{load_scenario, Scenario};
use herding::Vec2;

fn scenario_dir() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../scenarios")
}

fn bundled() -> Vec<(String, Scenario)> {
    let mut out: Vec<_> = std::fs::read_dir(scenario_dir())
        .unwrap()
        .map(|e| e.unwrap().path())
        .filter(|p| p.extension().is_some_and(|e| e == "scenario"))
        .map(|p| {
            let s = load_scenario(&p).unwrap_or_else(|e| panic!("{}: {e}", p.display()));
            (p.file_stem().unwrap().to_string_lossy().into_owned(), s)
        })
        .collect();
    out.sort_by(|a, b| a.0.cmp(&b.0));
    out
}

#[test]
fn every_bundled_scenario_loads_echoes_and_simulates() {
    let all = bundled();
    let names: Vec<&str> = all.iter().map(|(n, _)| n.as_str()).collect();
    for expected in [
        "fig1_left",
        "fig1_right",
        "fig3",
        "fig4",
        "fig5",
        "fig6",
        "fig7",
        "fig8_cost",
        "fig8_time",
        "fig9_cost",
        "fig10_cost",
        "fig11",
        "fig12",
        "fig13",
        "fig14",
        "fig15",
        "feedback_guidance",
        "feedback_gather_1",
        "feedback_gather_3",
    ] {
        assert!(names.contains(&expected), "missing {expected}");
    }
    for (name, s) in &all {
        assert_eq!(&s.name, name, "name field of {name}");
        let echoed = Scenario::parse(&s.to_toml().unwrap(), false, name).unwrap();
        assert_eq!(&echoed, s, "{name} is not an echo fixpoint");
        let (_, traj) = s.simulate().unwrap_or_else(|e| panic!("{name}: {e}"));
        assert_eq!(traj.len(), s.integrator.n_steps + 1, "{name}");
        assert!(
            traj.final_state().as_slice().iter().all(|x| x.is_finite()),
            "{name}"
        );
    }
}

#[test]
fn fig3_holds_the_stated_initial_data() {
    let s = load_scenario(&scenario_dir().join("fig3.scenario")).unwrap();
    let setup = s.build().unwrap();
    assert_eq!(setup.initial.layout(), Layout::new(1, 1));
    assert_eq!(setup.initial.driver_pos(0), Vec2::new(-3.0, 0.0));
    assert_eq!(setup.initial.evader_pos(0), Vec2::ZERO);
    assert_eq!(setup.initial.driver_vel(0), Vec2::ZERO);
    assert_eq!(setup.model.friction.common(), Some(2.0));
    assert_eq!(setup.model.kernels, KernelSet::default());
}

#[test]
fn fig1_left_rotates_at_the_circumvention_rate() {
    let s = load_scenario(&scenario_dir().join("fig1_left.scenario")).unwrap();
    let (_, traj) = s.simulate().unwrap();
    let winding = winding_angle(&traj, 0, 5.0, 15.0);
    let expected = 1.0 / 2.0 * 10.0;
    assert!(
        winding > 0.0 && (winding - expected).abs() < 0.15 * expected,
        "winding {winding}"
    );
}

#[test]
fn feedback_scenarios_run_closed_loop() {
    for (name, s) in bundled().into_iter().filter(|(_, s)| s.feedback.is_some()) {
        let setup = s.build().unwrap();
        let f = s.feedback.unwrap();
        let (traj, report) = run_closed_loop(
            &setup.initial,
            &setup.model,
            &s.bounds,
            &f.params(s.target.unwrap()),
            s.integrator.t_f,
            s.integrator.n_steps,
            f.stop,
        )
        .unwrap_or_else(|e| panic!("{name}: {e}"));
        assert!(report.min_driver_evader_distance > 0.0, "{name}");
        assert!(traj.len() >= 2, "{name}");
    }
}
