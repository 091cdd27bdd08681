//! Acceptance criteria, one check per criterion. Run with
//! `cargo test -p herding --test acceptance`; every criterion prints a
//! PASS or FAIL line and the binary exits nonzero if any fails.

use std::path::PathBuf;
use std::sync::Mutex;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use herding::controllability::{constant_control_reach, reach_point, ConstantSearch, ReachSpec};
use herding::controls::{ControlBounds, ControlSchedule, Scheduled};
use herding::diagnostics::{check_dissipation, convergence_order, DissipationMode};
use herding::dynamics::{integrate, AgentState, Model, SystemState, Trajectory};
use herding::feedback::run_closed_loop;
use herding::kernels::KernelSet;
use herding::optimal_control::{
    CostKind, CostWeights, FinalTime, Ocp, OcpProblem, OcpSolution, SolverOptions,
};
use herding::scenario_io::{load_scenario, Scenario};
use herding::Vec2;

struct Verdict {
    pass: bool,
    detail: String,
}

fn verdict(pass: bool, detail: impl Into<String>) -> Verdict {
    Verdict {
        pass,
        detail: detail.into(),
    }
}

fn scenario(name: &str) -> Scenario {
    let path = PathBuf::from(env!("CARGO_MANIFEST_DIR"))
        .join("../../scenarios")
        .join(format!("{name}.scenario"));
    load_scenario(&path).unwrap_or_else(|e| panic!("{name}: {e}"))
}

/// Driver at (-3, 0), evader at rest at the origin, friction 2, default kernels.
fn shot_start() -> (SystemState, Model) {
    let initial = SystemState::at_rest(0.0, &[Vec2::new(-3.0, 0.0)], &[Vec2::ZERO]).unwrap();
    let model = Model::new(
        KernelSet::default(),
        herding::dynamics::FrictionParams {
            nu_d: vec![2.0],
            nu_e: vec![2.0],
        },
    );
    (initial, model)
}

fn run_constant(
    initial: &SystemState,
    model: &Model,
    kp: f64,
    kc: f64,
    t_f: f64,
    n: usize,
) -> Trajectory {
    let schedule = ControlSchedule::constant(kp, kc, initial.layout().drivers);
    let mut src = Scheduled::new(&schedule, ControlBounds::default());
    integrate(initial, &mut src, model, t_f, n).unwrap()
}

fn relative_distance(traj: &Trajectory) -> f64 {
    let s = traj.final_state();
    (s.driver_pos(0) - s.evader_pos(0)).norm()
}

fn equilibrium_radii() -> Verdict {
    let (initial, model) = shot_start();
    // f(r) = 1 - 1/r^2: r_p solves f = 0, r_c solves f = (kappa_c / nu)^2 = 1/4.
    let r_p = 1.0;
    let r_c = 2.0 / 3f64.sqrt();
    let start = Instant::now();
    let pursuit = relative_distance(&run_constant(&initial, &model, 1.0, 0.0, 30.0, 3000));
    let t_p = start.elapsed();
    let start = Instant::now();
    let circ = relative_distance(&run_constant(&initial, &model, 1.0, 1.0, 30.0, 3000));
    let t_c = start.elapsed();
    let pass = (pursuit - r_p).abs() < 1e-3
        && (circ - r_c).abs() < 1e-3
        && t_p < Duration::from_secs(1)
        && t_c < Duration::from_secs(1);
    verdict(
        pass,
        format!(
            "|u(30)| = {pursuit:.6} (r_p = 1), {circ:.6} (r_c = {r_c:.6}); {t_p:.2?} / {t_c:.2?}"
        ),
    )
}

fn dissipation() -> Verdict {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut worst = (0.0f64, 0.0f64);
    for _ in 0..20 {
        let nu = rng.gen_range(1.0..3.0);
        let mut p = || Vec2::new(rng.gen_range(-3.0..3.0), rng.gen_range(-3.0..3.0));
        let (dp, ep, dv, ev) = (p(), p(), p() * 0.3, p() * 0.3);
        if (dp - ep).norm() < 0.3 {
            continue;
        }
        let initial = SystemState::new(0.0, &[dp], &[dv], &[ep], &[ev]).unwrap();
        let model = Model::uniform(initial.layout(), nu);
        let kc = rng.gen_range(-0.8..0.8) * nu;
        let pursuit = run_constant(&initial, &model, 1.0, 0.0, 10.0, 1000);
        let circ = run_constant(&initial, &model, 1.0, kc, 10.0, 1000);
        let e = check_dissipation(&pursuit, &model, DissipationMode::Pursuit).unwrap();
        let l = check_dissipation(
            &circ,
            &model,
            DissipationMode::Circumvention { kappa_c: kc },
        )
        .unwrap();
        worst = (worst.0.max(e.max_violation), worst.1.max(l.max_violation));
    }
    let took = start.elapsed();
    let pass = worst.0 < 1e-6 && worst.1 < 1e-6 && took < Duration::from_secs(10);
    verdict(
        pass,
        format!(
            "largest step increase: energy {:.2e}, Lyapunov {:.2e}; {took:.2?}",
            worst.0, worst.1
        ),
    )
}

fn release() -> Verdict {
    let start = Instant::now();
    let nu = 2.0;
    let v0 = Vec2::new(0.6, -0.8);
    let initial = SystemState::new(
        0.0,
        &[Vec2::ZERO],
        &[v0],
        &[Vec2::new(1e6, 0.0)],
        &[Vec2::ZERO],
    )
    .unwrap();
    let model = Model::uniform(initial.layout(), nu);
    let traj = run_constant(&initial, &model, 0.0, 0.0, 5.0, 1000);
    let worst = traj
        .states()
        .map(|s| (s.driver_vel(0).norm() - v0.norm() * (-nu * s.t).exp()).abs())
        .fold(0.0, f64::max);
    let took = start.elapsed();
    verdict(
        worst < 1e-6 && took < Duration::from_secs(1),
        format!("max |v_d| deviation {worst:.2e}; {took:.2?}"),
    )
}

fn off_bang_off_reach() -> Verdict {
    let start = Instant::now();
    let (initial, model) = shot_start();
    let r = reach_point(&initial, &model, &ReachSpec::new(Vec2::new(-1.0, 1.0), 1.0)).unwrap();
    let took = start.elapsed();
    let pass = (8.75..=9.75).contains(&r.t2)
        && (12.0..=14.0).contains(&r.t_f)
        && r.error < 0.05
        && r.t1 == 2.0
        && took < Duration::from_secs(30);
    verdict(
        pass,
        format!(
            "t2 = {:.4}, t_f = {:.4}, error = {:.2e}; {took:.2?}",
            r.t2, r.t_f, r.error
        ),
    )
}

fn constant_reach() -> Verdict {
    let start = Instant::now();
    let (initial, model) = shot_start();
    let r = constant_control_reach(
        &initial,
        &model,
        Vec2::new(-1.0, 1.0),
        0.05,
        &ConstantSearch::default(),
    )
    .unwrap();
    let took = start.elapsed();
    let pass = (1.45..=1.70).contains(&r.kappa_c)
        && (4.9..=5.5).contains(&r.t_f)
        && r.error < 0.05
        && took < Duration::from_secs(30);
    verdict(
        pass,
        format!(
            "kappa_c = {:.4}, t_f = {:.4}, error = {:.2e}, kappa_c^2 t_f = {:.4}; {took:.2?}",
            r.kappa_c,
            r.t_f,
            r.error,
            r.kappa_c * r.kappa_c * r.t_f
        ),
    )
}

fn adjoint_validation() -> Verdict {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let mut worst: f64 = 0.0;
    let mut lines = Vec::new();
    for cost in [CostKind::Guidance, CostKind::Stabilization] {
        for (m, n) in [(1, 1), (1, 2), (2, 1), (2, 2)] {
            let drivers: Vec<Vec2> = (0..m)
                .map(|j| Vec2::new(-2.5 + 0.3 * j as f64, rng.gen_range(-1.0..1.0)))
                .collect();
            let evaders: Vec<Vec2> = (0..n)
                .map(|i| Vec2::new(rng.gen_range(-0.3..0.3), 0.5 * i as f64))
                .collect();
            let initial = SystemState::at_rest(0.0, &drivers, &evaders).unwrap();
            let kc: Vec<_> = (0..m)
                .map(|_| herding::dynamics::DriverControl::new(1.0, rng.gen_range(-1.0..1.0)))
                .collect();
            let problem = OcpProblem {
                model: Model::uniform(initial.layout(), 2.0),
                initial,
                bounds: ControlBounds::default(),
                cost,
                weights: CostWeights {
                    delta1: 0.01,
                    delta2: 0.05,
                    delta3: 0.1,
                },
                target: Vec2::new(-1.0, 1.0),
                n_steps: 60,
                t_f: 4.0,
                final_time: FinalTime::Free,
                optimize_kp: false,
                initial_guess: ControlSchedule::Constant { drivers: kc },
                options: SolverOptions::default(),
            };
            let ocp = Ocp::new(problem).unwrap();
            let check = ocp
                .check_gradient(&ocp.initial_decision().unwrap(), 1e-5)
                .unwrap();
            worst = worst.max(check.max_relative_error);
            lines.push(format!(
                "{cost:?} M={m} N={n}: {:.1e}",
                check.max_relative_error
            ));
        }
    }
    let took = start.elapsed();
    verdict(
        worst < 1e-4 && took < Duration::from_secs(120),
        format!("{}; {took:.2?}", lines.join(", ")),
    )
}

fn solve(name: &str, max_iterations: Option<usize>) -> (OcpSolution, f64) {
    let mut problem = scenario(name).ocp_problem().unwrap();
    if let Some(m) = max_iterations {
        problem.options.max_iterations = m;
    }
    let ocp = Ocp::new(problem).unwrap();
    let initial = ocp.cost(&ocp.initial_decision().unwrap());
    (ocp.solve().unwrap(), initial)
}

fn single_driver_optimal() -> Verdict {
    let start = Instant::now();
    let (six, _) = solve("fig6", None);
    let t6 = start.elapsed();
    let start = Instant::now();
    let (seven, _) = solve("fig7", None);
    let t7 = start.elapsed();
    let (b_cost, b_time) = (7.0682, 8.5467);
    let b6 = six.breakdown;
    let b7 = seven.breakdown;
    let pass = b6.running_cost <= 5.5
        && b6.position_error <= 0.1
        && b6.running_cost < b_cost
        && b7.control_time <= 7.5
        && b7.running_cost <= 7.5
        && b7.control_time < b_time
        && t6 < Duration::from_secs(600)
        && t7 < Duration::from_secs(600);
    verdict(
        pass,
        format!(
            "running-cost run: cost {:.4}, error {:.2e}, t_f {:.4} ({:?}, {t6:.1?}); time run: t_f {:.4}, cost {:.4}, error {:.2e} ({:?}, {t7:.1?})",
            b6.running_cost, b6.position_error, b6.control_time, six.status,
            b7.control_time, b7.running_cost, b7.position_error, seven.status
        ),
    )
}

fn final_kc(sol: &OcpSolution) -> f64 {
    let last = sol.trajectory.len() - 1;
    sol.trajectory
        .controls(last)
        .iter()
        .map(|c| c.kc.abs())
        .fold(0.0, f64::max)
}

fn two_driver_optimal() -> Verdict {
    let start = Instant::now();
    let (time, _) = solve("fig8_time", None);
    let (cost, _) = solve("fig8_cost", None);
    let took = start.elapsed();
    let pass = time.breakdown.control_time <= 7.5
        && cost.breakdown.running_cost <= 3.6
        && final_kc(&time) < 0.2
        && took < Duration::from_secs(900);
    verdict(
        pass,
        format!(
            "time run: t_f {:.4}, final |kappa_c| {:.3}; cost run: running cost {:.4}, t_f {:.4}, final |kappa_c| {:.3}; {took:.1?}",
            time.breakdown.control_time,
            final_kc(&time),
            cost.breakdown.running_cost,
            cost.breakdown.control_time,
            final_kc(&cost)
        ),
    )
}

fn closed_loop(name: &str) -> (Trajectory, herding::feedback::ClosedLoopReport) {
    let s = scenario(name);
    let setup = s.build().unwrap();
    let f = s.feedback_settings();
    run_closed_loop(
        &setup.initial,
        &setup.model,
        &s.bounds,
        &f.params(s.target.unwrap()),
        s.integrator.t_f,
        s.integrator.n_steps,
        f.stop,
    )
    .unwrap()
}

fn feedback_guidance() -> Verdict {
    let start = Instant::now();
    let (_, r) = closed_loop("feedback_guidance");
    let took = start.elapsed();
    let pass = r.reached
        && r.final_error < 0.05
        && (6.5..=8.5).contains(&r.control_time)
        && (4.5..=8.0).contains(&r.running_cost)
        && r.min_driver_evader_distance > 0.1
        && took < Duration::from_secs(5);
    verdict(
        pass,
        format!(
            "control time {:.4}, running cost {:.4}, error {:.2e}, min distance {:.3}; {took:.2?}",
            r.control_time, r.running_cost, r.final_error, r.min_driver_evader_distance
        ),
    )
}

/// Time at which the pursuit gain first comes back on after a stop.
fn first_release(traj: &Trajectory) -> Option<f64> {
    let stopped = |k: usize| traj.controls(k)[0].kp == 0.0;
    let first_stop = (0..traj.len()).find(|&k| stopped(k))?;
    (first_stop..traj.len())
        .find(|&k| !stopped(k))
        .map(|k| traj.times()[k])
}

fn feedback_gathering() -> Verdict {
    let start = Instant::now();
    let (one, r1) = closed_loop("feedback_gather_1");
    let (_, r3) = closed_loop("feedback_gather_3");
    let took = start.elapsed();
    let release = first_release(&one);
    let after = release.map(|t| {
        r1.radius_history
            .iter()
            .filter(|(s, _)| *s >= t)
            .map(|(_, r)| *r)
            .fold(0.0, f64::max)
    });
    let delivered = (one.final_state().barycenter() - Vec2::new(4.0, 4.0)).norm();
    let ordered = matches!((r1.first_stop_time, r3.first_stop_time), (Some(a), Some(b)) if b > a);
    let pass = after.is_some_and(|r| r <= 0.35)
        && delivered < 0.2
        && ordered
        && took < Duration::from_secs(60);
    verdict(
        pass,
        format!(
            "one driver: first release {release:?}, max radius after it {after:?}, barycenter error {delivered:.3}, first stop {:?}; three drivers: first stop {:?}; {took:.1?}",
            r1.first_stop_time, r3.first_stop_time
        ),
    )
}

fn stabilization() -> Verdict {
    let start = Instant::now();
    let (sol, initial) = solve("fig13", Some(300));
    let took = start.elapsed();
    let monotone = sol.history.windows(2).all(|w| w[1] <= w[0]);
    let pass = sol.breakdown.total < initial
        && sol.breakdown.position_error < 0.2
        && monotone
        && took < Duration::from_secs(1200);
    verdict(
        pass,
        format!(
            "cost {initial:.3} -> {:.3}, position error {:.2e}, monotone {monotone}, {} iterations ({:?}); {took:.1?}",
            sol.breakdown.total, sol.breakdown.position_error, sol.iterations, sol.status
        ),
    )
}

fn convergence() -> Verdict {
    let start = Instant::now();
    let (initial, model) = shot_start();
    let schedule = ControlSchedule::constant(1.0, 0.5, 1);
    let order = convergence_order(
        &initial,
        &schedule,
        &ControlBounds::default(),
        &model,
        4.0,
        40,
    )
    .unwrap();
    let took = start.elapsed();
    verdict(
        (3.5..=4.5).contains(&order) && took < Duration::from_secs(10),
        format!("observed order {order:.3}; {took:.2?}"),
    )
}

/// Criteria whose runs take minutes.
const LONG: [u32; 3] = [7, 8, 11];

fn main() {
    let criteria: Vec<(u32, &str, fn() -> Verdict)> = vec![
        (1, "equilibrium radii", equilibrium_radii),
        (2, "dissipation identities", dissipation),
        (3, "release-mode decay", release),
        (4, "off-bang-off reach", off_bang_off_reach),
        (5, "constant-control reach", constant_reach),
        (6, "adjoint gradient", adjoint_validation),
        (7, "single-driver optimal control", single_driver_optimal),
        (8, "two-driver optimal control", two_driver_optimal),
        (9, "feedback guidance", feedback_guidance),
        (10, "feedback gathering", feedback_gathering),
        (11, "stabilization", stabilization),
        (12, "RK4 convergence order", convergence),
    ];
    let filter: Vec<String> = std::env::args()
        .skip(1)
        .filter(|a| !a.starts_with('-'))
        .collect();
    let selected = |n: u32, name: &str| {
        filter.is_empty()
            || filter
                .iter()
                .any(|f| name.contains(f.as_str()) || *f == n.to_string())
    };
    let results = Mutex::new(Vec::new());
    let run = |n: u32, name: &str, check: fn() -> Verdict| {
        let v = std::panic::catch_unwind(check).unwrap_or_else(|_| verdict(false, "panicked"));
        let line = format!(
            "{} criterion {n:>2} ({name}): {}",
            if v.pass { "PASS" } else { "FAIL" },
            v.detail
        );
        println!("{line}");
        results.lock().unwrap().push((n, v.pass, line));
    };
    // Short criteria run one at a time so their runtime limits are measured
    // without contention; the long optimizations then share the machine.
    let (long, short): (Vec<_>, Vec<_>) = criteria.iter().partition(|c| LONG.contains(&c.0));
    for &&(n, name, check) in &short {
        if selected(n, name) {
            run(n, name, check);
        }
    }
    std::thread::scope(|scope| {
        for &&(n, name, check) in &long {
            if selected(n, name) {
                let run = &run;
                scope.spawn(move || run(n, name, check));
            }
        }
    });
    let mut results = results.into_inner().unwrap();
    results.sort_by_key(|r| r.0);
    println!("\nacceptance summary:");
    for (_, _, line) in &results {
        println!("{line}");
    }
    let failed = results.iter().filter(|r| !r.1).count();
    println!("{} passed, {failed} failed", results.len() - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}
