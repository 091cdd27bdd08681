use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use clap::Args;

use herding::controllability::{constant_control_reach, reach_point, reach_waypoints};
use herding::controls::ControlSchedule;
use herding::diagnostics::{
    check_dissipation, fit_circumvention, fit_pursuit, winding_angle, DissipationMode,
};
use herding::dynamics::{AgentState, DriverControl, Trajectory};
use herding::feedback::run_closed_loop;
use herding::optimal_control::{Ocp, SolveStatus};
use herding::scenario_io::{
    export_plot_data, load_scenario, write_atomic, write_trajectory, PlotSeries, Scenario,
    TrajectoryHeader,
};
use herding::{HerdError, Vec2};

use crate::report::Report;

/// Flags shared by every subcommand.
#[derive(Args, Debug, Clone)]
pub struct Common {
    /// Scenario file (TOML, or JSON with a `.json` extension).
    #[arg(long)]
    pub scenario: PathBuf,
    /// Trajectory CSV to write.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Override the number of integration steps.
    #[arg(long)]
    pub steps: Option<usize>,
    /// Override the final time of the integrator.
    #[arg(long)]
    pub tf: Option<f64>,
    /// Override the seed of the random evader block.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Print the report as JSON.
    #[arg(long)]
    pub json: bool,
    /// Override the target, written `x,y`.
    #[arg(long, value_parser = parse_point, allow_hyphen_values = true)]
    pub target: Option<Vec2>,
    /// Override the reach tolerance.
    #[arg(long)]
    pub tol: Option<f64>,
}

fn parse_point(text: &str) -> Result<Vec2, String> {
    let parts: Vec<&str> = text.split(',').collect();
    let [x, y] = parts.as_slice() else {
        return Err(format!("expected `x,y`, got `{text}`"));
    };
    let num = |s: &str| {
        s.trim()
            .parse::<f64>()
            .map_err(|_| format!("`{s}` is not a number"))
    };
    Ok(Vec2::new(num(x)?, num(y)?))
}

/// Result of a command: the report and whether the goal was met.
pub struct Outcome {
    pub report: Report,
    pub success: bool,
}

pub struct Loaded {
    pub scenario: Scenario,
    pub header: TrajectoryHeader,
}

pub fn load(common: &Common) -> anyhow::Result<Loaded> {
    let mut s = load_scenario(&common.scenario)
        .with_context(|| format!("loading {}", common.scenario.display()))?;
    if let Some(n) = common.steps {
        s.integrator.n_steps = n;
    }
    if let Some(t) = common.tf {
        s.integrator.t_f = t;
    }
    if let Some(seed) = common.seed {
        match s.random_evaders.as_mut() {
            Some(r) => r.seed = seed,
            None => {
                return Err(HerdError::Usage("--seed needs a [random_evaders] block".into()).into())
            }
        }
    }
    if let Some(t) = common.target {
        s.target = Some(t);
    }
    if let Some(tol) = common.tol {
        let mut r = s.reach_settings();
        r.tolerance = tol;
        s.reach = Some(r);
    }
    s.validate()?;
    let header = TrajectoryHeader {
        scenario_hash: Some(s.hash()?),
        seed: s.random_evaders.map(|r| r.seed),
    };
    Ok(Loaded {
        scenario: s,
        header,
    })
}

fn base_report(command: &str, loaded: &Loaded) -> Report {
    let mut r = Report::new(command);
    r.set("scenario", &loaded.scenario.name);
    r.set("scenario_hash", &loaded.header.scenario_hash);
    if let Some(seed) = loaded.header.seed {
        r.set("seed", seed);
    }
    r
}

fn save(
    report: &mut Report,
    traj: &Trajectory,
    header: &TrajectoryHeader,
    out: Option<&Path>,
) -> anyhow::Result<()> {
    if let Some(path) = out {
        write_trajectory(traj, header, path)
            .with_context(|| format!("writing {}", path.display()))?;
        report.set("trajectory", path.display().to_string());
    }
    Ok(())
}

fn final_error(traj: &Trajectory, target: Vec2) -> f64 {
    (traj.final_state().barycenter() - target).norm()
}

fn parse_series(names: &[String]) -> anyhow::Result<Vec<PlotSeries>> {
    names
        .iter()
        .map(|n| {
            Ok(match n.as_str() {
                "tracks" => PlotSeries::Tracks,
                "markers" => PlotSeries::Markers,
                "controls" => PlotSeries::Controls,
                "radius" => PlotSeries::GatheringRadius,
                "energy" => PlotSeries::Energy,
                other => match other.strip_prefix("lyapunov:") {
                    Some(k) => PlotSeries::Lyapunov {
                        kappa_c: k.parse().map_err(|_| HerdError::Usage(format!("bad gain in `{other}`")))?,
                    },
                    None => bail!(HerdError::Usage(format!(
                        "unknown plot series `{other}` (tracks, markers, controls, radius, energy, lyapunov:K)"
                    ))),
                },
            })
        })
        .collect()
}

pub fn simulate(
    common: &Common,
    plot: Option<&Path>,
    series: &[String],
) -> anyhow::Result<Outcome> {
    let loaded = load(common)?;
    let series = parse_series(series)?;
    let (setup, traj) = loaded.scenario.simulate()?;
    let mut report = base_report("simulate", &loaded);
    let last = traj.final_state();
    report
        .set("t_final", traj.t_final())
        .set("nodes", traj.len())
        .set("barycenter", last.barycenter())
        .set("gathering_radius", last.gathering_radius())
        .set(
            "min_driver_evader_distance",
            traj.states()
                .map(|s| s.min_driver_evader_distance())
                .fold(f64::INFINITY, f64::min),
        );
    if let Some(t) = loaded.scenario.target {
        report.set("final_error", final_error(&traj, t));
    }
    let default_out = PathBuf::from(format!("{}.csv", file_stem(&common.scenario)));
    save(
        &mut report,
        &traj,
        &loaded.header,
        Some(common.out.as_deref().unwrap_or(&default_out)),
    )?;
    if let Some(path) = plot {
        export_plot_data(&traj, &setup.model, &series, path)?;
        report.set("plot", path.display().to_string());
    }
    Ok(Outcome {
        report,
        success: true,
    })
}

fn file_stem(path: &Path) -> String {
    path.file_stem()
        .map_or_else(|| "trajectory".into(), |s| s.to_string_lossy().into_owned())
}

pub fn reach(common: &Common, constant: bool) -> anyhow::Result<Outcome> {
    let loaded = load(common)?;
    let s = &loaded.scenario;
    let target = s.require_target("reach")?;
    let setup = s.build()?;
    let settings = s.reach_settings();
    let mut report = base_report("reach", &loaded);
    report.set("target", target);
    if constant {
        let r = constant_control_reach(
            &setup.initial,
            &setup.model,
            target,
            settings.tolerance,
            &settings.constant,
        )?;
        report
            .set("mode", "constant")
            .set("kappa_p", 1.0)
            .set("kappa_c", r.kappa_c)
            .set("t_f", r.t_f)
            .set("error", r.error)
            .set("reached", r.reached)
            .set(
                "running_cost",
                r.kappa_c * r.kappa_c * (r.t_f - setup.initial.t),
            )
            .set("evaluations", r.evaluations)
            .set("schedule", ControlSchedule::constant(1.0, r.kappa_c, 1));
        save(
            &mut report,
            &r.trajectory,
            &loaded.header,
            common.out.as_deref(),
        )?;
        return Ok(Outcome {
            report,
            success: r.reached,
        });
    }
    let r = reach_point(&setup.initial, &setup.model, &settings.spec(target))?;
    report
        .set("mode", "off_bang_off")
        .set("t1", r.t1)
        .set("t2", r.t2)
        .set("t_f", r.t_f)
        .set("kappa_p", r.kappa_p)
        .set("kappa_c", r.kappa_c)
        .set("error", r.error)
        .set("reached", r.reached)
        .set("evaluations", r.evaluations)
        .set("t1_attempts", &r.attempts)
        .set("schedule", &r.schedule);
    save(
        &mut report,
        &r.trajectory,
        &loaded.header,
        common.out.as_deref(),
    )?;
    Ok(Outcome {
        report,
        success: r.reached,
    })
}

pub fn waypoints(common: &Common) -> anyhow::Result<Outcome> {
    let loaded = load(common)?;
    let s = &loaded.scenario;
    let settings = s.reach_settings();
    if settings.waypoints.is_empty() {
        bail!(HerdError::Usage(
            "scenario lists no [reach] waypoints".into()
        ));
    }
    let setup = s.build()?;
    let run = reach_waypoints(
        &setup.initial,
        &setup.model,
        &settings.waypoints,
        &settings.spec(Vec2::ZERO),
    )?;
    let mut report = base_report("waypoints", &loaded);
    let legs: Vec<_> = run
        .legs
        .iter()
        .zip(&settings.waypoints)
        .map(|(l, target)| {
            serde_json::json!({
                "target": target,
                "t1": l.t1, "t2": l.t2, "t_f": l.t_f, "kappa_c": l.kappa_c,
                "error": l.error, "reached": l.reached,
            })
        })
        .collect();
    report.set("legs", legs).set("failed_leg", run.failed_leg);
    if let Some(schedule) = &run.schedule {
        report.set("schedule", schedule);
    }
    if let Some(traj) = &run.trajectory {
        save(&mut report, traj, &loaded.header, common.out.as_deref())?;
    }
    Ok(Outcome {
        report,
        success: run.failed_leg.is_none(),
    })
}

pub fn optimize(
    common: &Common,
    max_iter: Option<usize>,
    history: Option<&Path>,
) -> anyhow::Result<Outcome> {
    let loaded = load(common)?;
    let mut problem = loaded.scenario.ocp_problem()?;
    if let Some(m) = max_iter {
        problem.options.max_iterations = m;
    }
    let ocp = Ocp::new(problem)?;
    let initial_cost = ocp.cost(&ocp.initial_decision()?);
    let sol = ocp.solve()?;
    let mut report = base_report("optimize", &loaded);
    report
        .set("status", sol.status)
        .set("iterations", sol.iterations)
        .set("initial_cost", initial_cost)
        .set("cost", sol.breakdown)
        .set("t_f", sol.t_f)
        .set("schedule", &sol.schedule);
    save(
        &mut report,
        &sol.trajectory,
        &loaded.header,
        common.out.as_deref(),
    )?;
    if let Some(path) = history {
        let mut text = String::from("iteration,cost\n");
        for (k, c) in sol.history.iter().enumerate() {
            text.push_str(&format!("{k},{c:.16e}\n"));
        }
        write_atomic(path, text.as_bytes())?;
        report.set("history", path.display().to_string());
    }
    Ok(Outcome {
        report,
        success: sol.status != SolveStatus::Stagnation,
    })
}

pub fn feedback(common: &Common) -> anyhow::Result<Outcome> {
    let loaded = load(common)?;
    let s = &loaded.scenario;
    let target = s.require_target("feedback")?;
    let setup = s.build()?;
    let f = s.feedback_settings();
    let (traj, r) = run_closed_loop(
        &setup.initial,
        &setup.model,
        &s.bounds,
        &f.params(target),
        s.integrator.t_f,
        s.integrator.n_steps,
        f.stop,
    )?;
    let mut report = base_report("feedback", &loaded);
    report
        .set("reached", r.reached)
        .set("control_time", r.control_time)
        .set("running_cost", r.running_cost)
        .set("final_error", r.final_error)
        .set("min_driver_evader_distance", r.min_driver_evader_distance)
        .set("first_stop_time", r.first_stop_time)
        .set("switches", r.switches)
        .set("degenerate_evaluations", r.degenerate_evaluations);
    save(&mut report, &traj, &loaded.header, common.out.as_deref())?;
    Ok(Outcome {
        report,
        success: r.reached,
    })
}

/// Common mode of every recorded control, if there is one.
fn uniform_mode(traj: &Trajectory) -> Option<DissipationMode> {
    let first = traj.controls(0)[0];
    let same = (0..traj.len()).all(|k| traj.controls(k).iter().all(|c| *c == first));
    match (same, first) {
        (false, _) => None,
        (true, DriverControl { kp, kc }) if kp == 1.0 && kc == 0.0 => {
            Some(DissipationMode::Pursuit)
        }
        (true, DriverControl { kp: 1.0, kc }) => {
            Some(DissipationMode::Circumvention { kappa_c: kc })
        }
        (true, DriverControl { kp, kc }) if kp == 0.0 && kc == 0.0 => {
            Some(DissipationMode::Release)
        }
        _ => None,
    }
}

pub fn diagnose(common: &Common, tail: f64) -> anyhow::Result<Outcome> {
    let loaded = load(common)?;
    let (setup, traj) = loaded.scenario.simulate()?;
    let mut report = base_report("diagnose", &loaded);
    let last = traj.final_state();
    let t0 = traj.times()[0];
    report
        .set("t_final", traj.t_final())
        .set("gathering_radius", last.gathering_radius())
        .set(
            "min_driver_evader_distance",
            traj.states()
                .map(|s| s.min_driver_evader_distance())
                .fold(f64::INFINITY, f64::min),
        )
        .set(
            "winding_driver0",
            winding_angle(&traj, 0, t0, traj.t_final()),
        );

    let layout = traj.layout();
    let nu = setup.model.friction.common();
    if let (1, 1, Some(nu)) = (layout.drivers, layout.evaders, nu) {
        let kernels = &setup.model.kernels;
        report
            .set(
                "relative_distance",
                (last.driver_pos(0) - last.evader_pos(0)).norm(),
            )
            .set("r_p", kernels.solve_rp()?);
        let mode = uniform_mode(&traj);
        if let Some(mode) = mode {
            let d = check_dissipation(&traj, &setup.model, mode)?;
            report
                .set("dissipation_mode", d.mode)
                .set("dissipation_max_violation", d.max_violation);
        }
        match mode {
            Some(DissipationMode::Pursuit) => {
                let (reference, residual) = fit_pursuit(&traj, &setup.model, tail)?;
                report
                    .set("pursuit_fit", reference)
                    .set("fit_residual", residual);
            }
            Some(DissipationMode::Circumvention { kappa_c }) => {
                report.set("r_c", kernels.solve_rc(kappa_c, nu)?);
                let (reference, fit) = fit_circumvention(&traj, &setup.model, tail)?;
                report
                    .set("circumvention_fit", reference)
                    .set("circle_fit", fit);
            }
            _ => {}
        }
    }
    save(&mut report, &traj, &loaded.header, common.out.as_deref())?;
    Ok(Outcome {
        report,
        success: true,
    })
}

pub fn validate_gradient(common: &Common, step: f64, threshold: f64) -> anyhow::Result<Outcome> {
    let loaded = load(common)?;
    let ocp = Ocp::new(loaded.scenario.ocp_problem()?)?;
    let check = ocp.check_gradient(&ocp.initial_decision()?, step)?;
    let mut report = base_report("validate-gradient", &loaded);
    report
        .set("max_relative_error", check.max_relative_error)
        .set("checked", check.checked)
        .set("step", check.step)
        .set("threshold", threshold);
    Ok(Outcome {
        report,
        success: check.max_relative_error < threshold,
    })
}
