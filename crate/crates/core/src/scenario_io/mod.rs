//! Scenario files, trajectory CSV, plot data and atomic writes.

mod plot;
mod scenario;
mod trajectory_file;

pub use plot::{export_plot_data, format_plot_data, PlotSeries};
pub use scenario::{
    load_scenario, AgentInit, FeedbackSettings, GuessSettings, IntegratorSettings, ModelSettings,
    OptimizeSettings, PerAgent, RandomEvaders, ReachSettings, Scenario, Setup,
};
pub use trajectory_file::{
    column_names, format_trajectory, parse_trajectory, read_trajectory, write_atomic,
    write_trajectory, TrajectoryHeader, FORMAT_VERSION,
};

/// Version stamped into every JSON report.
pub const REPORT_SCHEMA: u32 = 1;

#[cfg(test)]
mod tests {
    use super::*;
    use crate::controls::ControlSchedule;
    use crate::dynamics::AgentState;
    use crate::error::HerdError;
    use crate::vec2::Vec2;
    use proptest::prelude::*;

    const PURSUIT: &str = r#"
name = "pursuit"
target = [-1.0, 1.0]

[model]
nu_d = 2.0
nu_e = 2.0

[[drivers]]
pos = [-3.0, 0.0]

[[evaders]]
pos = [0.0, 0.0]

[integrator]
t_f = 5.0
n_steps = 100

[schedule]
kind = "constant"
drivers = [{ kp = 1.0, kc = 0.0 }]
"#;

    fn run(s: &Scenario) -> crate::dynamics::Trajectory {
        s.simulate().unwrap().1
    }

    #[test]
    fn echo_is_a_fixpoint() {
        let s = Scenario::parse(PURSUIT, false, "inline").unwrap();
        let echoed = s.to_toml().unwrap();
        let again = Scenario::parse(&echoed, false, "echo").unwrap();
        assert_eq!(s, again);
        assert_eq!(echoed, again.to_toml().unwrap());
        let json = Scenario::parse(&s.to_json().unwrap(), true, "json").unwrap();
        assert_eq!(s, json);
        assert_eq!(s.hash().unwrap(), again.hash().unwrap());
    }

    #[test]
    fn negative_friction_is_rejected() {
        let text = PURSUIT.replace("nu_e = 2.0", "nu_e = -1.0");
        let err = Scenario::parse(&text, false, "inline").unwrap_err();
        assert!(
            err.to_string().contains("friction must be positive"),
            "{err}"
        );
    }

    #[test]
    fn coincident_agents_are_singular() {
        let text = PURSUIT.replace("pos = [-3.0, 0.0]", "pos = [0.0, 0.0]");
        let err = Scenario::parse(&text, false, "inline").unwrap_err();
        assert!(err.to_string().contains("singular initial data"), "{err}");
    }

    #[test]
    fn parse_errors_carry_a_line() {
        let text = PURSUIT.replace("n_steps = 100", "n_steps = \"many\"");
        match Scenario::parse(&text, false, "inline") {
            Err(HerdError::Parse { location, .. }) => {
                let line = PURSUIT
                    .lines()
                    .position(|l| l.starts_with("n_steps"))
                    .unwrap()
                    + 1;
                assert!(
                    location.starts_with(&format!("inline:{line}:")),
                    "{location}"
                );
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn unknown_fields_are_rejected() {
        let text = PURSUIT.replace("name = \"pursuit\"", "name = \"pursuit\"\ncolour = 3");
        assert!(matches!(
            Scenario::parse(&text, false, "inline"),
            Err(HerdError::Parse { .. })
        ));
    }

    #[test]
    fn random_evaders_follow_the_seed() {
        let text = format!(
            "{PURSUIT}\n[random_evaders]\ncount = 5\nmin = [1.0, 1.0]\nmax = [2.0, 2.0]\nseed = 11\n"
        );
        let s = Scenario::parse(&text, false, "inline").unwrap();
        let a = s.build().unwrap();
        let b = s.build().unwrap();
        assert_eq!(a.initial, b.initial);
        assert_eq!(a.seed, Some(11));
        assert_eq!(a.initial.layout().evaders, 6);
        for p in &a.initial.evader_positions()[1..] {
            assert!((1.0..2.0).contains(&p.x) && (1.0..2.0).contains(&p.y));
        }
        let mut other = s.clone();
        other.random_evaders.as_mut().unwrap().seed = 12;
        assert_ne!(other.build().unwrap().initial, a.initial);
    }

    #[test]
    fn trajectory_round_trips_bit_exactly() {
        let s = Scenario::parse(PURSUIT, false, "inline").unwrap();
        let traj = run(&s);
        let header = TrajectoryHeader {
            scenario_hash: Some(s.hash().unwrap()),
            seed: None,
        };
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.csv");
        write_trajectory(&traj, &header, &path).unwrap();
        let (back, h) = read_trajectory(&path).unwrap();
        assert_eq!(h, header);
        assert_eq!(back.len(), traj.len());
        for k in 0..traj.len() {
            assert_eq!(back.times()[k].to_bits(), traj.times()[k].to_bits());
            for (a, b) in back.state(k).data.iter().zip(traj.state(k).data) {
                assert_eq!(a.to_bits(), b.to_bits());
            }
            assert_eq!(back.controls(k), traj.controls(k));
        }
    }

    #[test]
    fn truncated_file_is_a_header_mismatch() {
        let s = Scenario::parse(PURSUIT, false, "inline").unwrap();
        let text = format_trajectory(&run(&s), &TrajectoryHeader::default());
        let cut: String = text
            .lines()
            .take(text.lines().count() - 3)
            .map(|l| format!("{l}\n"))
            .collect();
        assert!(matches!(
            parse_trajectory(&cut),
            Err(HerdError::HeaderMismatch(_))
        ));
        let widened = text.replacen("# drivers: 1", "# drivers: 2", 1);
        assert!(matches!(
            parse_trajectory(&widened),
            Err(HerdError::HeaderMismatch(_))
        ));
    }

    #[test]
    fn zero_step_trajectory_is_one_row() {
        let s = Scenario::parse(PURSUIT, false, "inline").unwrap();
        let setup = s.build().unwrap();
        let mut traj = crate::dynamics::Trajectory::with_capacity(setup.initial.layout(), 1);
        traj.push(
            0.0,
            setup.initial.as_slice(),
            &[crate::dynamics::DriverControl::new(1.0, 0.0)],
        );
        let text = format_trajectory(&traj, &TrajectoryHeader::default());
        assert_eq!(text.lines().filter(|l| !l.starts_with('#')).count(), 2);
        let (back, _) = parse_trajectory(&text).unwrap();
        assert_eq!(back, traj);
    }

    #[test]
    fn plot_blocks_follow_the_request() {
        let s = Scenario::parse(PURSUIT, false, "inline").unwrap();
        let traj = run(&s);
        let model = s.build().unwrap().model;
        let empty = format_plot_data(&traj, &model, &[]).unwrap();
        assert!(empty.lines().all(|l| l.starts_with('#')));

        let text =
            format_plot_data(&traj, &model, &[PlotSeries::Tracks, PlotSeries::Energy]).unwrap();
        let blocks: Vec<&str> = text.split("\n\n\n").collect();
        assert_eq!(blocks.len(), 2);
        let energy: Vec<f64> = blocks[1]
            .lines()
            .filter(|l| !l.starts_with('#'))
            .map(|l| l.split(' ').nth(1).unwrap().parse().unwrap())
            .collect();
        assert_eq!(energy.len(), traj.len());
        assert!(
            energy.windows(2).all(|w| w[1] <= w[0] + 1e-9),
            "energy must not grow under pursuit"
        );
    }

    #[test]
    fn energy_needs_a_single_pair() {
        let s = Scenario::parse(PURSUIT, false, "inline").unwrap();
        let setup = s.build().unwrap();
        let mut two = Scenario { ..s.clone() };
        two.evaders.push(AgentInit {
            pos: Vec2::new(1.0, 1.0),
            vel: Vec2::ZERO,
        });
        two.schedule = Some(ControlSchedule::constant(1.0, 0.0, 1));
        let traj = run(&two);
        assert!(matches!(
            format_plot_data(&traj, &setup.model, &[PlotSeries::Energy]),
            Err(HerdError::Usage(_))
        ));
    }

    #[test]
    fn atomic_write_replaces_contents() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("out.txt");
        write_atomic(&path, b"first").unwrap();
        write_atomic(&path, b"second").unwrap();
        assert_eq!(std::fs::read_to_string(&path).unwrap(), "second");
        assert_eq!(std::fs::read_dir(dir.path()).unwrap().count(), 1);
    }

    proptest! {
        #[test]
        fn any_finite_row_round_trips(values in proptest::collection::vec(-1e300f64..1e300, 11)) {
            let layout = crate::dynamics::Layout::new(1, 1);
            let mut traj = crate::dynamics::Trajectory::with_capacity(layout, 1);
            traj.push(values[0], &values[1..9], &[crate::dynamics::DriverControl::new(values[9], values[10])]);
            let (back, _) = parse_trajectory(&format_trajectory(&traj, &TrajectoryHeader::default())).unwrap();
            prop_assert_eq!(back, traj);
        }
    }
}
