//! Optimal control of the herding system: guidance and stabilization costs,
//! exact gradients of the discretized cost by a reverse sweep through the RK4
//! steps, and projected gradient descent with an optional free final time.
//!
//! The decision variables live on a fixed grid in the normalized time
//! `s in [0, 1]`. Node `k` sits at `s_k = k / n`; the physical step that
//! leaves it has length `h_k = w_p / n`, where `w_p` is the speed `T'(s)` of the
//! segment containing the step. Controls are linear between nodes, so the two
//! middle RK4 stages see the average of the neighbouring node values.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::controllability::{constant_control_reach, reach_point, ConstantSearch, ReachSpec};
use crate::controls::{ControlBounds, ControlSchedule, SampledGrid};
use crate::dynamics::{
    rk4_step, AgentState, DriverControl, Layout, Model, Rk4Workspace, SystemState, Trajectory,
    SINGULARITY_DISTANCE,
};
use crate::error::{HerdError, Result};
use crate::vec2::Vec2;

/// Regularization weights.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CostWeights {
    /// Running cost of the circumvention gains.
    pub delta1: f64,
    /// Control time (guidance only).
    pub delta2: f64,
    /// Velocities and driver positions (stabilization only).
    pub delta3: f64,
}

impl Default for CostWeights {
    fn default() -> Self {
        Self {
            delta1: 0.001,
            delta2: 0.0,
            delta3: 0.0,
        }
    }
}

impl CostWeights {
    pub fn validate(&self) -> Result<()> {
        if [self.delta1, self.delta2, self.delta3]
            .iter()
            .all(|d| d.is_finite() && *d >= 0.0)
        {
            Ok(())
        } else {
            Err(HerdError::Validation(
                "cost weights must be finite and nonnegative".into(),
            ))
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CostKind {
    /// Final evader positions, running cost and control time.
    Guidance,
    /// Time integrals of positions and velocities of all agents plus running cost.
    Stabilization,
}

/// Terms of a cost evaluation. `total` is the sum of the `*_term` fields.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct CostBreakdown {
    pub total: f64,
    /// `(1/N) sum |u_ei(t_f) - u_f|^2` (guidance) or the evader tracking integral (stabilization).
    pub position_term: f64,
    /// Velocity and driver terms, already multiplied by `delta3`.
    pub stabilization_term: f64,
    /// `delta1` times the running cost.
    pub running_term: f64,
    /// `delta2 * t_f`.
    pub time_term: f64,
    /// Unweighted `(1/M) sum_j int |kappa_j^c|^2 dt`.
    pub running_cost: f64,
    /// Root mean square distance of the final evader positions from the target.
    pub position_error: f64,
    /// Duration of the run.
    pub control_time: f64,
}

fn trapezoid_weights(times: &[f64]) -> Vec<f64> {
    let n = times.len();
    let mut w = vec![0.0; n];
    for k in 0..n.saturating_sub(1) {
        let h = times[k + 1] - times[k];
        w[k] += 0.5 * h;
        w[k + 1] += 0.5 * h;
    }
    w
}

fn mean_sq_distance(points: impl Iterator<Item = Vec2>, target: Vec2) -> f64 {
    let (mut sum, mut count) = (0.0, 0usize);
    for p in points {
        sum += (p - target).norm_sq();
        count += 1;
    }
    sum / count.max(1) as f64
}

fn running_integrand(controls: &[DriverControl]) -> f64 {
    controls.iter().map(|c| c.kc * c.kc).sum::<f64>() / controls.len() as f64
}

/// Evader tracking and the `delta3` terms of the stabilization integrand at one node.
fn stabilization_integrands<S: AgentState + ?Sized>(
    s: &S,
    target: Vec2,
    delta3: f64,
) -> (f64, f64) {
    let layout = s.layout();
    let (m, n) = (layout.drivers as f64, layout.evaders as f64);
    let tracking = mean_sq_distance((0..layout.evaders).map(|i| s.evader_pos(i)), target);
    let ev = (0..layout.evaders)
        .map(|i| s.evader_vel(i).norm_sq())
        .sum::<f64>()
        / n;
    let dr = (0..layout.drivers)
        .map(|j| (s.driver_pos(j) - target).norm_sq() + s.driver_vel(j).norm_sq())
        .sum::<f64>()
        / m;
    (tracking, delta3 * (ev + dr))
}

/// Guidance cost of a run; integrals use the trapezoid rule on the run's own nodes.
pub fn cost_guidance(traj: &Trajectory, weights: &CostWeights, target: Vec2) -> CostBreakdown {
    let last = traj.state(traj.len() - 1);
    let n = traj.layout().evaders;
    let position_term = mean_sq_distance((0..n).map(|i| last.evader_pos(i)), target);
    let running_cost = traj.trapezoid(|k| running_integrand(traj.controls(k)));
    let control_time = traj.t_final() - traj.times()[0];
    let running_term = weights.delta1 * running_cost;
    let time_term = weights.delta2 * control_time;
    CostBreakdown {
        total: position_term + running_term + time_term,
        position_term,
        stabilization_term: 0.0,
        running_term,
        time_term,
        running_cost,
        position_error: position_term.sqrt(),
        control_time,
    }
}

/// Stabilization cost of a run.
pub fn cost_stabilization(traj: &Trajectory, weights: &CostWeights, target: Vec2) -> CostBreakdown {
    let position_term = traj.trapezoid(|k| stabilization_integrands(&traj.state(k), target, 0.0).0);
    let stabilization_term =
        traj.trapezoid(|k| stabilization_integrands(&traj.state(k), target, weights.delta3).1);
    let running_cost = traj.trapezoid(|k| running_integrand(traj.controls(k)));
    let last = traj.state(traj.len() - 1);
    let n = traj.layout().evaders;
    let running_term = weights.delta1 * running_cost;
    CostBreakdown {
        total: position_term + stabilization_term + running_term,
        position_term,
        stabilization_term,
        running_term,
        time_term: 0.0,
        running_cost,
        position_error: mean_sq_distance((0..n).map(|i| last.evader_pos(i)), target).sqrt(),
        control_time: traj.t_final() - traj.times()[0],
    }
}

/// How the final time is treated.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case")]
pub enum FinalTime {
    Fixed,
    /// One scalar `t_f`; every step has length `t_f / n`.
    Free,
    /// Piecewise-constant speed `T'(s)` on `segments` equal parts of `[0, 1]`.
    Profile {
        segments: usize,
    },
}

/// Largest ratio between a trial step and the last accepted one.
const STEP_GROWTH: f64 = 10.0;

/// Stopping rules and step control of the descent.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SolverOptions {
    pub max_iterations: usize,
    pub armijo: f64,
    pub initial_step: f64,
    /// Stop once `|J_new - J| <= rel_tol * |J|`.
    pub rel_tol: f64,
    /// Stop once the projected gradient is this small.
    pub grad_tol: f64,
    /// Consecutive halvings after which the line search gives up.
    pub max_halvings: usize,
    /// Speed bounds `[C1, C2]` as multiples of the initial final time.
    pub speed_bounds: (f64, f64),
    /// Start each line search from a Barzilai-Borwein step instead of `initial_step`.
    pub barzilai_borwein: bool,
    /// Largest change of any single variable in one trial step.
    pub max_change: f64,
}

impl Default for SolverOptions {
    fn default() -> Self {
        Self {
            max_iterations: 500,
            armijo: 1e-4,
            initial_step: 1.0,
            rel_tol: 1e-8,
            grad_tol: 1e-6,
            max_halvings: 20,
            speed_bounds: (0.1, 10.0),
            barzilai_borwein: true,
            max_change: 1.0,
        }
    }
}

/// A complete optimal control problem.
#[derive(Debug, Clone)]
pub struct OcpProblem {
    pub model: Model,
    pub initial: SystemState,
    pub bounds: ControlBounds,
    pub cost: CostKind,
    pub weights: CostWeights,
    pub target: Vec2,
    /// Number of RK4 steps; the control grid has `n_steps + 1` nodes.
    pub n_steps: usize,
    /// Duration of the initial guess.
    pub t_f: f64,
    pub final_time: FinalTime,
    /// Optimize the pursuit gains as well; otherwise they keep their initial values.
    pub optimize_kp: bool,
    pub initial_guess: ControlSchedule,
    pub options: SolverOptions,
}

/// Values of all decision variables.
#[derive(Debug, Clone, PartialEq)]
pub struct Decision {
    /// `kp[j][k]`: pursuit gain of driver `j` at node `k`.
    pub kp: Vec<Vec<f64>>,
    pub kc: Vec<Vec<f64>>,
    /// Speeds `T'(s)` per segment; their mean is the duration of the run.
    pub speeds: Vec<f64>,
}

impl Decision {
    pub fn duration(&self) -> f64 {
        self.speeds.iter().sum::<f64>() / self.speeds.len() as f64
    }
}

/// Gradient of the discrete cost with respect to every decision variable,
/// with the adjoint states (cotangents of the node states).
#[derive(Debug, Clone)]
pub struct Gradient {
    pub kp: Vec<Vec<f64>>,
    pub kc: Vec<Vec<f64>>,
    pub speeds: Vec<f64>,
    /// `adjoint[k]` pairs with the state at node `k`.
    pub adjoint: Vec<Vec<f64>>,
}

impl Gradient {
    /// Derivative with respect to the duration when all speeds move together.
    pub fn duration(&self) -> f64 {
        self.speeds.iter().sum()
    }
}

/// Comparison of the adjoint gradient with central finite differences.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct GradientCheck {
    /// `max_i |g_adj,i - g_fd,i| / max_i |g_fd,i|` over every checked variable.
    pub max_relative_error: f64,
    pub checked: usize,
    pub step: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum SolveStatus {
    Converged,
    IterationCap,
    /// The line search failed `max_halvings` times in a row; the best iterate is returned.
    Stagnation,
}

#[derive(Debug, Clone)]
pub struct OcpSolution {
    pub decision: Decision,
    /// Controls on their physical time nodes.
    pub schedule: ControlSchedule,
    pub t_f: f64,
    pub breakdown: CostBreakdown,
    /// Cost after every accepted iterate, starting with the initial guess.
    pub history: Vec<f64>,
    pub iterations: usize,
    pub status: SolveStatus,
    pub trajectory: Trajectory,
}

/// A validated problem ready to be evaluated, differentiated and solved.
#[derive(Debug, Clone)]
pub struct Ocp {
    problem: OcpProblem,
    layout: Layout,
    speed_range: (f64, f64),
}

impl Ocp {
    pub fn new(problem: OcpProblem) -> Result<Self> {
        let layout = problem.initial.layout();
        problem.bounds.validate()?;
        problem.weights.validate()?;
        problem.model.friction.validate(layout)?;
        problem.initial.check_nonsingular(SINGULARITY_DISTANCE)?;
        if problem.n_steps == 0 {
            return Err(HerdError::Validation("n_steps must be at least 1".into()));
        }
        if !(problem.t_f > 0.0 && problem.t_f.is_finite()) {
            return Err(HerdError::Validation("t_f must be positive".into()));
        }
        if let FinalTime::Profile { segments } = problem.final_time {
            if segments == 0 || problem.n_steps % segments != 0 {
                return Err(HerdError::Validation(
                    "profile segments must divide the number of steps".into(),
                ));
            }
        }
        if problem.initial_guess.needs_state() {
            return Err(HerdError::Usage(
                "the initial guess must not depend on the state".into(),
            ));
        }
        problem
            .initial_guess
            .validate(layout.drivers, &problem.bounds)?;
        let (c1, c2) = problem.options.speed_bounds;
        if !(c1 > 0.0 && c1 <= 1.0 && c2 >= 1.0) {
            return Err(HerdError::Validation(
                "speed bounds must bracket 1 and be positive".into(),
            ));
        }
        let speed_range = (c1 * problem.t_f, c2 * problem.t_f);
        Ok(Self {
            problem,
            layout,
            speed_range,
        })
    }

    pub fn problem(&self) -> &OcpProblem {
        &self.problem
    }

    fn nodes(&self) -> usize {
        self.problem.n_steps + 1
    }

    fn segments(&self) -> usize {
        match self.problem.final_time {
            FinalTime::Profile { segments } => segments,
            _ => 1,
        }
    }

    fn segment_of(&self, step: usize) -> usize {
        step * self.segments() / self.problem.n_steps
    }

    fn times_optimized(&self) -> bool {
        self.problem.final_time != FinalTime::Fixed
    }

    /// The initial guess sampled on the uniform grid of duration `t_f`, projected onto the bounds.
    pub fn initial_decision(&self) -> Result<Decision> {
        let p = &self.problem;
        let t0 = p.initial.t;
        let times: Vec<f64> = (0..self.nodes())
            .map(|k| t0 + p.t_f * k as f64 / p.n_steps as f64)
            .collect();
        let grid =
            SampledGrid::from_schedule(&p.initial_guess, times, self.layout.drivers, &p.bounds)?;
        let mut d = Decision {
            kp: grid.kp,
            kc: grid.kc,
            speeds: vec![p.t_f; self.segments()],
        };
        self.project(&mut d);
        Ok(d)
    }

    fn project(&self, d: &mut Decision) {
        let b = &self.problem.bounds;
        for row in &mut d.kp {
            for v in row {
                *v = v.clamp(b.kp_min, b.kp_max);
            }
        }
        for row in &mut d.kc {
            for v in row {
                *v = v.clamp(b.kc_min, b.kc_max);
            }
        }
        for w in &mut d.speeds {
            *w = w.clamp(self.speed_range.0, self.speed_range.1);
        }
    }

    fn step_length(&self, d: &Decision, k: usize) -> f64 {
        d.speeds[self.segment_of(k)] / self.problem.n_steps as f64
    }

    fn node_controls(d: &Decision, k: usize, out: &mut [DriverControl]) {
        for (j, o) in out.iter_mut().enumerate() {
            *o = DriverControl::new(d.kp[j][k], d.kc[j][k]);
        }
    }

    fn stage_controls(d: &Decision, k: usize, stage: usize, out: &mut [DriverControl]) {
        for (j, o) in out.iter_mut().enumerate() {
            *o = match stage {
                0 => DriverControl::new(d.kp[j][k], d.kc[j][k]),
                3 => DriverControl::new(d.kp[j][k + 1], d.kc[j][k + 1]),
                _ => DriverControl::new(
                    0.5 * (d.kp[j][k] + d.kp[j][k + 1]),
                    0.5 * (d.kc[j][k] + d.kc[j][k + 1]),
                ),
            };
        }
    }

    fn check_shape(&self, d: &Decision) -> Result<()> {
        let ok_rows = |rows: &[Vec<f64>]| {
            rows.len() == self.layout.drivers && rows.iter().all(|r| r.len() == self.nodes())
        };
        if ok_rows(&d.kp) && ok_rows(&d.kc) && d.speeds.len() == self.segments() {
            Ok(())
        } else {
            Err(HerdError::Validation(
                "decision does not match the problem grid".into(),
            ))
        }
    }

    /// Integrates the system under `d`.
    pub fn simulate(&self, d: &Decision) -> Result<Trajectory> {
        self.check_shape(d)?;
        let p = &self.problem;
        let layout = self.layout;
        let mut traj = Trajectory::with_capacity(layout, self.nodes());
        let mut ws = Rk4Workspace::new(layout);
        let mut x = p.initial.as_slice().to_vec();
        let mut next = vec![0.0; layout.dim()];
        let mut ctl = vec![DriverControl::OFF; layout.drivers];
        let mut t = p.initial.t;
        for k in 0..self.nodes() {
            Self::node_controls(d, k, &mut ctl);
            traj.push(t, &x, &ctl);
            if k == p.n_steps {
                break;
            }
            let h = self.step_length(d, k);
            rk4_step(
                &p.model,
                layout,
                t,
                h,
                &x,
                &mut next,
                &mut ws,
                &mut |stage, _, _, out| {
                    Self::stage_controls(d, k, stage, out);
                    Ok(())
                },
            )?;
            if !next.iter().all(|v| v.is_finite()) {
                return Err(HerdError::Divergence { last_valid_t: t });
            }
            std::mem::swap(&mut x, &mut next);
            t += h;
        }
        Ok(traj)
    }

    pub fn breakdown(&self, traj: &Trajectory) -> CostBreakdown {
        let p = &self.problem;
        match p.cost {
            CostKind::Guidance => cost_guidance(traj, &p.weights, p.target),
            CostKind::Stabilization => cost_stabilization(traj, &p.weights, p.target),
        }
    }

    /// Cost of `d`, or infinity when the run breaks down.
    pub fn cost(&self, d: &Decision) -> f64 {
        match self.simulate(d) {
            Ok(traj) => self.breakdown(&traj).total,
            Err(_) => f64::INFINITY,
        }
    }

    /// Running integrand at node `k` and its gradient with respect to the node
    /// state (added into `x_bar` after scaling by `weight`) and the gains.
    fn running_at(
        &self,
        traj: &Trajectory,
        k: usize,
        weight: f64,
        x_bar: &mut [f64],
        kc_bar: &mut [f64],
    ) -> f64 {
        let p = &self.problem;
        let layout = self.layout;
        let (m, n) = (layout.drivers as f64, layout.evaders as f64);
        let s = traj.state(k);
        let ctl = traj.controls(k);
        let mut value = p.weights.delta1 * running_integrand(ctl);
        for (j, c) in ctl.iter().enumerate() {
            kc_bar[j] += weight * p.weights.delta1 * 2.0 * c.kc / m;
        }
        if p.cost == CostKind::Stabilization {
            let (a, b) = stabilization_integrands(&s, p.target, p.weights.delta3);
            value += a + b;
            let d3 = p.weights.delta3;
            let mut add = |idx: usize, g: Vec2| {
                x_bar[idx] += weight * g.x;
                x_bar[idx + 1] += weight * g.y;
            };
            for i in 0..layout.evaders {
                add(
                    layout.evader_pos(i),
                    (s.evader_pos(i) - p.target) * (2.0 / n),
                );
                add(layout.evader_vel(i), s.evader_vel(i) * (2.0 * d3 / n));
            }
            for j in 0..layout.drivers {
                add(
                    layout.driver_pos(j),
                    (s.driver_pos(j) - p.target) * (2.0 * d3 / m),
                );
                add(layout.driver_vel(j), s.driver_vel(j) * (2.0 * d3 / m));
            }
        }
        value
    }

    /// Exact gradient of the discrete cost by a reverse sweep through the RK4 steps.
    pub fn gradient(&self, d: &Decision) -> Result<(CostBreakdown, Gradient)> {
        let traj = self.simulate(d)?;
        let breakdown = self.breakdown(&traj);
        let p = &self.problem;
        let layout = self.layout;
        let (dim, m, ns) = (layout.dim(), layout.drivers, p.n_steps);
        let weights = trapezoid_weights(traj.times());

        let mut g_kp = vec![vec![0.0; ns + 1]; m];
        let mut g_kc = vec![vec![0.0; ns + 1]; m];
        let mut g_h = vec![0.0; ns];
        let mut adjoint = vec![vec![0.0; dim]; ns + 1];

        let mut running = vec![0.0; ns + 1];
        let mut lam = vec![0.0; dim];
        let mut kc_node = vec![0.0; m];
        {
            let last = traj.state(ns);
            if p.cost == CostKind::Guidance {
                let n = layout.evaders as f64;
                for i in 0..layout.evaders {
                    let g = (last.evader_pos(i) - p.target) * (2.0 / n);
                    let idx = layout.evader_pos(i);
                    lam[idx] += g.x;
                    lam[idx + 1] += g.y;
                }
            }
            running[ns] = self.running_at(&traj, ns, weights[ns], &mut lam, &mut kc_node);
            for j in 0..m {
                g_kc[j][ns] += kc_node[j];
            }
        }
        adjoint[ns].copy_from_slice(&lam);

        let mut ys = [
            vec![0.0; dim],
            vec![0.0; dim],
            vec![0.0; dim],
            vec![0.0; dim],
        ];
        let mut ks = [
            vec![0.0; dim],
            vec![0.0; dim],
            vec![0.0; dim],
            vec![0.0; dim],
        ];
        let mut cs = vec![vec![DriverControl::OFF; m]; 4];
        let mut k_bar = [
            vec![0.0; dim],
            vec![0.0; dim],
            vec![0.0; dim],
            vec![0.0; dim],
        ];
        let mut y_bar = vec![0.0; dim];
        let mut c_bar = vec![DriverControl::OFF; m];
        let offsets = [0.0, 0.5, 0.5, 1.0];

        for k in (0..ns).rev() {
            let h = self.step_length(d, k);
            let x = traj.state(k).data;
            let tk = traj.times()[k];
            for s in 0..4 {
                if s == 0 {
                    ys[0].copy_from_slice(x);
                } else {
                    let a = offsets[s] * h;
                    for i in 0..dim {
                        ys[s][i] = x[i] + a * ks[s - 1][i];
                    }
                }
                Self::stage_controls(d, k, s, &mut cs[s]);
                p.model
                    .rhs_into(tk + offsets[s] * h, layout, &ys[s], &cs[s], &mut ks[s])?;
            }

            let mut h_bar = 0.0;
            let coeff = [h / 6.0, h / 3.0, h / 3.0, h / 6.0];
            for s in 0..4 {
                for i in 0..dim {
                    k_bar[s][i] = coeff[s] * lam[i];
                }
            }
            for i in 0..dim {
                h_bar += lam[i] * (ks[0][i] + 2.0 * ks[1][i] + 2.0 * ks[2][i] + ks[3][i]) / 6.0;
            }
            let mut x_bar = lam.clone();
            for s in (0..4).rev() {
                y_bar.iter_mut().for_each(|v| *v = 0.0);
                c_bar.iter_mut().for_each(|c| *c = DriverControl::OFF);
                p.model
                    .rhs_vjp(layout, &ys[s], &cs[s], &k_bar[s], &mut y_bar, &mut c_bar);
                for (xb, yb) in x_bar.iter_mut().zip(&y_bar) {
                    *xb += yb;
                }
                if s > 0 {
                    let a = offsets[s];
                    for i in 0..dim {
                        k_bar[s - 1][i] += a * h * y_bar[i];
                        h_bar += a * y_bar[i] * ks[s - 1][i];
                    }
                }
                for j in 0..m {
                    let cb = c_bar[j];
                    match s {
                        0 => {
                            g_kp[j][k] += cb.kp;
                            g_kc[j][k] += cb.kc;
                        }
                        3 => {
                            g_kp[j][k + 1] += cb.kp;
                            g_kc[j][k + 1] += cb.kc;
                        }
                        _ => {
                            g_kp[j][k] += 0.5 * cb.kp;
                            g_kp[j][k + 1] += 0.5 * cb.kp;
                            g_kc[j][k] += 0.5 * cb.kc;
                            g_kc[j][k + 1] += 0.5 * cb.kc;
                        }
                    }
                }
            }

            kc_node.iter_mut().for_each(|v| *v = 0.0);
            running[k] = self.running_at(&traj, k, weights[k], &mut x_bar, &mut kc_node);
            for j in 0..m {
                g_kc[j][k] += kc_node[j];
            }
            g_h[k] = h_bar;
            lam = x_bar;
            adjoint[k].copy_from_slice(&lam);
        }

        let time_weight = if p.cost == CostKind::Guidance {
            p.weights.delta2
        } else {
            0.0
        };
        let mut g_speeds = vec![0.0; self.segments()];
        for k in 0..ns {
            let dj_dh = g_h[k] + 0.5 * (running[k] + running[k + 1]) + time_weight;
            g_speeds[self.segment_of(k)] += dj_dh / ns as f64;
        }
        if !self.times_optimized() {
            g_speeds.iter_mut().for_each(|v| *v = 0.0);
        }
        if !p.optimize_kp {
            g_kp.iter_mut().flatten().for_each(|v| *v = 0.0);
        }
        if adjoint.iter().flatten().any(|v| !v.is_finite()) {
            return Err(HerdError::Divergence {
                last_valid_t: traj.t_final(),
            });
        }
        Ok((
            breakdown,
            Gradient {
                kp: g_kp,
                kc: g_kc,
                speeds: g_speeds,
                adjoint,
            },
        ))
    }

    fn flatten(&self, d: &Decision) -> Vec<f64> {
        let mut z: Vec<f64> = d.kc.iter().flatten().copied().collect();
        if self.problem.optimize_kp {
            z.extend(d.kp.iter().flatten());
        }
        if self.times_optimized() {
            z.extend(&d.speeds);
        }
        z
    }

    fn flatten_gradient(&self, g: &Gradient) -> Vec<f64> {
        let mut z: Vec<f64> = g.kc.iter().flatten().copied().collect();
        if self.problem.optimize_kp {
            z.extend(g.kp.iter().flatten());
        }
        if self.times_optimized() {
            z.extend(&g.speeds);
        }
        z
    }

    fn unflatten(&self, z: &[f64], template: &Decision) -> Decision {
        let nodes = self.nodes();
        let mut d = template.clone();
        let mut it = z.iter().copied();
        for row in &mut d.kc {
            for v in row.iter_mut() {
                *v = it.next().unwrap_or(*v);
            }
        }
        if self.problem.optimize_kp {
            for row in &mut d.kp {
                for v in row.iter_mut() {
                    *v = it.next().unwrap_or(*v);
                }
            }
        }
        if self.times_optimized() {
            for w in &mut d.speeds {
                *w = it.next().unwrap_or(*w);
            }
        }
        debug_assert!(d.kc.iter().all(|r| r.len() == nodes));
        d
    }

    /// Metric weights: control nodes carry their quadrature weight in `s`, so
    /// that the scaled gradient approximates the continuous `L^2` gradient.
    fn metric(&self) -> Vec<f64> {
        let ns = self.problem.n_steps as f64;
        let node_w: Vec<f64> = (0..self.nodes())
            .map(|k| {
                if k == 0 || k == self.problem.n_steps {
                    0.5 / ns
                } else {
                    1.0 / ns
                }
            })
            .collect();
        let mut w: Vec<f64> = Vec::new();
        let rows = self.layout.drivers * (1 + usize::from(self.problem.optimize_kp));
        for _ in 0..rows {
            w.extend(&node_w);
        }
        if self.times_optimized() {
            w.extend(std::iter::repeat(1.0).take(self.segments()));
        }
        w
    }

    /// Central finite differences of the discrete cost for every optimized variable.
    pub fn check_gradient(&self, d: &Decision, step: f64) -> Result<GradientCheck> {
        let (_, g) = self.gradient(d)?;
        let z = self.flatten(d);
        let ga = self.flatten_gradient(&g);
        let fd: Vec<f64> = (0..z.len())
            .into_par_iter()
            .map(|i| {
                let mut zp = z.clone();
                zp[i] += step;
                let mut zm = z.clone();
                zm[i] -= step;
                (self.cost(&self.unflatten(&zp, d)) - self.cost(&self.unflatten(&zm, d)))
                    / (2.0 * step)
            })
            .collect();
        if fd.iter().any(|v| !v.is_finite()) {
            return Err(HerdError::Divergence {
                last_valid_t: f64::NAN,
            });
        }
        let scale = fd
            .iter()
            .fold(0.0f64, |a, v| a.max(v.abs()))
            .max(f64::MIN_POSITIVE);
        let max_err = ga
            .iter()
            .zip(&fd)
            .fold(0.0f64, |a, (x, y)| a.max((x - y).abs()));
        Ok(GradientCheck {
            max_relative_error: max_err / scale,
            checked: z.len(),
            step,
        })
    }

    fn project_flat(&self, z: &mut [f64]) {
        let b = &self.problem.bounds;
        let nodes = self.nodes();
        let m = self.layout.drivers;
        let mut i = 0;
        for _ in 0..m * nodes {
            z[i] = z[i].clamp(b.kc_min, b.kc_max);
            i += 1;
        }
        if self.problem.optimize_kp {
            for _ in 0..m * nodes {
                z[i] = z[i].clamp(b.kp_min, b.kp_max);
                i += 1;
            }
        }
        for v in &mut z[i..] {
            *v = v.clamp(self.speed_range.0, self.speed_range.1);
        }
    }

    /// Turns a decision into its outward form.
    pub fn solution_from(
        &self,
        d: Decision,
        history: Vec<f64>,
        iterations: usize,
        status: SolveStatus,
    ) -> Result<OcpSolution> {
        let trajectory = self.simulate(&d)?;
        let breakdown = self.breakdown(&trajectory);
        let schedule = ControlSchedule::SampledGrid(SampledGrid {
            times: trajectory.times().to_vec(),
            kp: d.kp.clone(),
            kc: d.kc.clone(),
        });
        Ok(OcpSolution {
            t_f: trajectory.t_final(),
            decision: d,
            schedule,
            breakdown,
            history,
            iterations,
            status,
            trajectory,
        })
    }

    /// Projected gradient descent with a backtracking Armijo line search.
    pub fn solve(&self) -> Result<OcpSolution> {
        let start = self.initial_decision()?;
        self.solve_from(start)
    }

    pub fn solve_from(&self, start: Decision) -> Result<OcpSolution> {
        self.check_shape(&start)?;
        let opt = self.problem.options;
        let mut start = start;
        self.project(&mut start);
        let metric = self.metric();
        let mut z = self.flatten(&start);
        let (bd, g) = self.gradient(&start)?;
        let mut cost = bd.total;
        let mut grad = self.flatten_gradient(&g);
        let mut history = vec![cost];
        let mut step = opt.initial_step;
        let mut status = SolveStatus::IterationCap;
        let mut iterations = 0;

        let pg_norm = |z: &[f64], grad: &[f64]| -> f64 {
            let mut trial: Vec<f64> = z
                .iter()
                .zip(grad)
                .zip(&metric)
                .map(|((a, g), w)| a - g / w)
                .collect();
            self.project_flat(&mut trial);
            z.iter()
                .zip(&trial)
                .zip(&metric)
                .map(|((a, b), w)| w * (a - b) * (a - b))
                .sum::<f64>()
                .sqrt()
        };

        while iterations < opt.max_iterations {
            if pg_norm(&z, &grad) < opt.grad_tol {
                status = SolveStatus::Converged;
                break;
            }
            let largest = grad
                .iter()
                .zip(&metric)
                .fold(0.0f64, |a, (g, w)| a.max((g / w).abs()));
            let mut alpha = if largest > 0.0 {
                step.min(opt.max_change / largest)
            } else {
                step
            };
            let mut accepted = None;
            for _ in 0..=opt.max_halvings {
                let mut trial: Vec<f64> = z
                    .iter()
                    .zip(&grad)
                    .zip(&metric)
                    .map(|((a, g), w)| a - alpha * g / w)
                    .collect();
                self.project_flat(&mut trial);
                let decrease: f64 = grad
                    .iter()
                    .zip(trial.iter().zip(&z))
                    .map(|(g, (a, b))| g * (a - b))
                    .sum();
                let d_trial = self.unflatten(&trial, &start);
                let c = self.cost(&d_trial);
                if c.is_finite() && c <= cost + opt.armijo * decrease {
                    accepted = Some((trial, d_trial, c));
                    break;
                }
                alpha *= 0.5;
            }
            let Some((trial, d_trial, new_cost)) = accepted else {
                status = SolveStatus::Stagnation;
                break;
            };
            let (_, g_new) = self.gradient(&d_trial)?;
            let new_grad = self.flatten_gradient(&g_new);
            iterations += 1;
            let change = (cost - new_cost).abs();
            let s: Vec<f64> = trial.iter().zip(&z).map(|(a, b)| a - b).collect();
            if opt.barzilai_borwein {
                let sy: f64 = s
                    .iter()
                    .zip(new_grad.iter().zip(&grad))
                    .map(|(si, (a, b))| si * (a - b))
                    .sum();
                let ss: f64 = s.iter().zip(&metric).map(|(si, w)| w * si * si).sum();
                let growth_cap = STEP_GROWTH * alpha;
                step = if sy > 0.0 {
                    (ss / sy).clamp(1e-10, growth_cap)
                } else {
                    growth_cap
                };
            } else {
                step = opt.initial_step;
            }
            z = trial;
            grad = new_grad;
            cost = new_cost;
            history.push(cost);
            if change <= opt.rel_tol * cost.abs() {
                status = SolveStatus::Converged;
                break;
            }
        }
        let best = self.unflatten(&z, &start);
        self.solution_from(best, history, iterations, status)
    }
}

/// Builds, validates and solves a problem in one call.
pub fn solve_ocp(problem: OcpProblem) -> Result<OcpSolution> {
    Ocp::new(problem)?.solve()
}

/// Gradient of the discrete cost and the adjoint states for the problem's initial guess.
pub fn adjoint_solve(problem: &OcpProblem) -> Result<Gradient> {
    let ocp = Ocp::new(problem.clone())?;
    let d = ocp.initial_decision()?;
    Ok(ocp.gradient(&d)?.1)
}

/// Source of an initial guess.
#[derive(Debug, Clone, PartialEq)]
pub enum GuessKind {
    /// Best constant gains found by [`constant_control_reach`].
    Constant,
    /// Off-bang-off control from [`reach_point`].
    OffBangOff(ReachSpec),
    /// A schedule and duration given by hand.
    Hand { schedule: ControlSchedule, t_f: f64 },
}

/// An initial guess and its duration.
#[derive(Debug, Clone, PartialEq)]
pub struct InitialGuess {
    pub schedule: ControlSchedule,
    pub t_f: f64,
}

pub fn build_initial_guess(
    initial: &SystemState,
    model: &Model,
    target: Vec2,
    kind: GuessKind,
) -> Result<InitialGuess> {
    match kind {
        GuessKind::Constant => {
            let r =
                constant_control_reach(initial, model, target, 0.05, &ConstantSearch::default())?;
            Ok(InitialGuess {
                schedule: ControlSchedule::constant(1.0, r.kappa_c, 1),
                t_f: r.t_f - initial.t,
            })
        }
        GuessKind::OffBangOff(mut spec) => {
            spec.target = target;
            let r = reach_point(initial, model, &spec)?;
            Ok(InitialGuess {
                schedule: r.schedule,
                t_f: r.t_f - initial.t,
            })
        }
        GuessKind::Hand { schedule, t_f } => Ok(InitialGuess { schedule, t_f }),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_problem(
        m: usize,
        n: usize,
        cost: CostKind,
        final_time: FinalTime,
        seed: u64,
    ) -> (Ocp, Decision) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut pt = |cx: f64| Vec2::new(cx + rng.gen_range(-0.3..0.3), rng.gen_range(-0.6..0.6));
        let drivers: Vec<Vec2> = (0..m).map(|_| pt(-2.0)).collect();
        let evaders: Vec<Vec2> = (0..n).map(|_| pt(0.0)).collect();
        let mut initial = SystemState::at_rest(0.0, &drivers, &evaders).unwrap();
        let half = initial.layout().half();
        for v in initial.as_mut_slice()[half..].iter_mut() {
            *v = rng.gen_range(-0.2..0.2);
        }
        let model = Model::uniform(initial.layout(), 2.0);
        let n_steps = 24;
        let problem = OcpProblem {
            model,
            initial,
            bounds: ControlBounds::default(),
            cost,
            weights: CostWeights {
                delta1: 0.05,
                delta2: 0.1,
                delta3: 0.2,
            },
            target: Vec2::new(1.0, 0.5),
            n_steps,
            t_f: 2.0,
            final_time,
            optimize_kp: true,
            initial_guess: ControlSchedule::constant(0.8, 0.5, m),
            options: SolverOptions::default(),
        };
        let ocp = Ocp::new(problem).unwrap();
        let mut d = ocp.initial_decision().unwrap();
        for row in d.kc.iter_mut().chain(d.kp.iter_mut()) {
            for v in row.iter_mut() {
                *v = (*v + rng.gen_range(-0.3..0.3)).clamp(0.05, 0.95);
            }
        }
        for w in &mut d.speeds {
            *w *= rng.gen_range(0.8..1.2);
        }
        (ocp, d)
    }

    #[test]
    fn adjoint_matches_finite_differences() {
        for (seed, (m, n)) in [(1, 1), (1, 2), (2, 1), (2, 2)].into_iter().enumerate() {
            for cost in [CostKind::Guidance, CostKind::Stabilization] {
                for ft in [
                    FinalTime::Fixed,
                    FinalTime::Free,
                    FinalTime::Profile { segments: 3 },
                ] {
                    let (ocp, d) = random_problem(m, n, cost, ft, seed as u64);
                    let check = ocp.check_gradient(&d, 1e-5).unwrap();
                    assert!(
                        check.max_relative_error < 1e-6,
                        "M={m} N={n} {cost:?} {ft:?}: {check:?}"
                    );
                }
            }
        }
    }

    #[test]
    fn free_time_gradient_matches_a_duration_difference() {
        let (ocp, d) = random_problem(1, 1, CostKind::Guidance, FinalTime::Free, 7);
        let (_, g) = ocp.gradient(&d).unwrap();
        let eps = 1e-5;
        let shifted = |e: f64| {
            let mut x = d.clone();
            x.speeds[0] += e;
            ocp.cost(&x)
        };
        let fd = (shifted(eps) - shifted(-eps)) / (2.0 * eps);
        assert!(
            (g.duration() - fd).abs() < 1e-6 * fd.abs().max(1.0),
            "{} vs {fd}",
            g.duration()
        );
    }

    #[test]
    fn guidance_cost_examples() {
        let s = SystemState::at_rest(0.0, &[Vec2::new(-3.0, 0.0)], &[Vec2::ZERO]).unwrap();
        let model = Model::uniform(s.layout(), 2.0);
        let mut src = vec![DriverControl::new(0.0, 1.0)];
        let mut traj = crate::dynamics::integrate(&s, &mut src, &model, 10.0, 100).unwrap();
        let w = CostWeights {
            delta1: 0.001,
            delta2: 0.0,
            delta3: 0.0,
        };
        let target = traj.final_state().evader_pos(0);
        let b = cost_guidance(&traj, &w, target);
        assert!((b.total - 0.01).abs() < 1e-12, "{b:?}");
        assert!((b.running_cost - 10.0).abs() < 1e-12);

        let mut src = vec![DriverControl::new(1.0, 0.0)];
        traj = crate::dynamics::integrate(&s, &mut src, &model, 3.0, 30).unwrap();
        let b = cost_guidance(
            &traj,
            &CostWeights::default(),
            traj.final_state().evader_pos(0),
        );
        assert_eq!(b.total, 0.0);
    }

    // Powers of two keep the scaling free of rounding.
    #[test]
    fn running_term_scales_with_delta1() {
        let (ocp, d) = random_problem(2, 2, CostKind::Guidance, FinalTime::Fixed, 3);
        let traj = ocp.simulate(&d).unwrap();
        let mut w = ocp.problem().weights;
        let a = cost_guidance(&traj, &w, Vec2::ZERO);
        w.delta1 *= 4.0;
        let b = cost_guidance(&traj, &w, Vec2::ZERO);
        assert_eq!(b.running_term, 4.0 * a.running_term);
        let sa = cost_stabilization(&traj, &w, Vec2::ZERO);
        w.delta1 *= 0.5;
        let sb = cost_stabilization(&traj, &w, Vec2::ZERO);
        assert_eq!(sb.running_term, 0.5 * sa.running_term);
    }

    #[test]
    fn stabilization_cost_examples() {
        let w = CostWeights {
            delta1: 0.5,
            delta2: 0.0,
            delta3: 0.0,
        };
        let mut traj = Trajectory::with_capacity(
            crate::dynamics::Layout {
                drivers: 1,
                evaders: 1,
            },
            11,
        );
        let frozen =
            SystemState::at_rest(0.0, &[Vec2::new(5.0, 5.0)], &[Vec2::new(1.0, 0.0)]).unwrap();
        for k in 0..=10 {
            traj.push(
                k as f64 / 10.0,
                frozen.as_slice(),
                &[DriverControl::new(0.0, 0.0)],
            );
        }
        let b = cost_stabilization(&traj, &w, Vec2::ZERO);
        assert!((b.total - 1.0).abs() < 1e-12, "{b:?}");

        let at_target = SystemState::at_rest(0.0, &[Vec2::ZERO], &[Vec2::ZERO]).unwrap();
        let mut traj = Trajectory::with_capacity(at_target.layout(), 3);
        for k in 0..3 {
            traj.push(k as f64, at_target.as_slice(), &[DriverControl::OFF]);
        }
        let b = cost_stabilization(
            &traj,
            &CostWeights {
                delta1: 1.0,
                delta2: 1.0,
                delta3: 1.0,
            },
            Vec2::ZERO,
        );
        assert_eq!(b.total, 0.0);
    }

    #[test]
    fn adjoint_vanishes_without_sensitivity() {
        // Evader already on the target with a pure time cost.
        let s = SystemState::at_rest(0.0, &[Vec2::new(-3.0, 0.0)], &[Vec2::ZERO]).unwrap();
        let model = Model::uniform(s.layout(), 2.0);
        let mut src = vec![DriverControl::OFF];
        let traj = crate::dynamics::integrate(&s, &mut src, &model, 1.0, 10).unwrap();
        let problem = OcpProblem {
            model,
            initial: s,
            bounds: ControlBounds::default(),
            cost: CostKind::Guidance,
            weights: CostWeights {
                delta1: 0.0,
                delta2: 1.0,
                delta3: 0.0,
            },
            target: traj.final_state().evader_pos(0),
            n_steps: 10,
            t_f: 1.0,
            final_time: FinalTime::Fixed,
            optimize_kp: false,
            initial_guess: ControlSchedule::constant(0.0, 0.0, 1),
            options: SolverOptions::default(),
        };
        let g = adjoint_solve(&problem).unwrap();
        assert!(g.adjoint.iter().flatten().all(|v| v.abs() < 1e-12));
        assert!(g.kc.iter().flatten().all(|v| v.abs() < 1e-12));
    }

    #[test]
    fn zero_iterations_return_the_initial_guess() {
        let (ocp, _) = random_problem(1, 1, CostKind::Guidance, FinalTime::Free, 4);
        let mut problem = ocp.problem().clone();
        problem.options.max_iterations = 0;
        let ocp = Ocp::new(problem).unwrap();
        let d0 = ocp.initial_decision().unwrap();
        let sol = ocp.solve().unwrap();
        assert_eq!(sol.decision, d0);
        assert_eq!(sol.history, vec![ocp.cost(&d0)]);
        assert_eq!(sol.iterations, 0);
    }

    #[test]
    fn descent_is_monotone_and_feasible() {
        let (ocp, _) = random_problem(2, 1, CostKind::Guidance, FinalTime::Free, 5);
        let mut problem = ocp.problem().clone();
        problem.options.max_iterations = 40;
        let ocp = Ocp::new(problem).unwrap();
        let sol = ocp.solve().unwrap();
        assert!(sol.history.windows(2).all(|w| w[1] <= w[0]));
        assert!(sol.history.last().unwrap() < &sol.history[0]);
        let b = ControlBounds::default();
        if let ControlSchedule::SampledGrid(g) = &sol.schedule {
            assert!(g
                .kc
                .iter()
                .flatten()
                .all(|v| (b.kc_min..=b.kc_max).contains(v)));
            assert!(g
                .kp
                .iter()
                .flatten()
                .all(|v| (b.kp_min..=b.kp_max).contains(v)));
            assert_eq!(crate::controls::project_bounds(g, &b), *g);
        } else {
            panic!("solution schedule must be sampled");
        }
    }

    #[test]
    fn hand_guess_passes_through() {
        let s = SystemState::at_rest(0.0, &[Vec2::new(-3.0, 0.0)], &[Vec2::ZERO]).unwrap();
        let model = Model::uniform(s.layout(), 2.0);
        let schedule = ControlSchedule::off_bang_off(1.0, 2.0, 1.0, 0.5);
        let g = build_initial_guess(
            &s,
            &model,
            Vec2::new(1.0, 1.0),
            GuessKind::Hand {
                schedule: schedule.clone(),
                t_f: 4.0,
            },
        )
        .unwrap();
        assert_eq!(g, InitialGuess { schedule, t_f: 4.0 });
    }

    #[test]
    fn sampled_schedule_reproduces_the_optimizer_trajectory() {
        let (ocp, d) = random_problem(
            2,
            2,
            CostKind::Guidance,
            FinalTime::Profile { segments: 4 },
            9,
        );
        let sol = ocp
            .solution_from(d, vec![], 0, SolveStatus::Converged)
            .unwrap();
        let p = ocp.problem();
        let mut src = crate::controls::Scheduled::new(&sol.schedule, p.bounds);
        let replay = crate::dynamics::integrate_on_grid(
            &p.initial,
            &mut src,
            &p.model,
            sol.trajectory.times(),
        )
        .unwrap();
        let a = sol.trajectory.final_state();
        let b = replay.final_state();
        let diff = a
            .as_slice()
            .iter()
            .zip(b.as_slice())
            .fold(0.0f64, |m, (x, y)| m.max((x - y).abs()));
        assert!(diff < 1e-12, "{diff}");
    }
}
