//! Off-bang-off and constant controls that steer a single evader to a target point.
//!
//! Searches are shooting methods: every candidate is scored by simulating the
//! closed system and measuring how far the evader ends from the target.

use std::f64::consts::PI;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::controls::ControlSchedule;
use crate::diagnostics::fit_circumvention;
use crate::dynamics::{integrate, AgentState, DriverControl, Model, SystemState, Trajectory};
use crate::error::{HerdError, Result};
use crate::simplex::nelder_mead;
use crate::vec2::Vec2;

pub const DEFAULT_T1: f64 = 2.0;
pub const DEFAULT_TOLERANCE: f64 = 0.05;
pub const DEFAULT_GRID: usize = 25;
pub const DEFAULT_REFINE_BUDGET: usize = 200;
pub const DEFAULT_DT: f64 = 0.01;

/// Later switch-on times tried when the target sits inside the stable orbit.
const T1_RETRY_STEP: f64 = 2.0;
const T1_RETRY_MAX: f64 = 20.0;
/// Local grid minima refined by the simplex stage.
const REFINED_STARTS: usize = 3;

/// Box for the two shooting variables: how long the circumvention gain stays
/// on (`t2 - t1`) and how long the evader coasts afterwards (`t_f - t2`).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SearchBox {
    pub turn: (f64, f64),
    pub coast: (f64, f64),
}

impl SearchBox {
    /// One full relative revolution for the turn, one more plus ten time units for the coast.
    pub fn default_for(kappa_c: f64, nu: f64) -> Self {
        let period = if kappa_c.abs() > 1e-12 {
            2.0 * PI * nu / kappa_c.abs()
        } else {
            0.0
        };
        Self {
            turn: (0.0, period),
            coast: (0.0, period + 10.0),
        }
    }

    fn validate(&self) -> Result<()> {
        let ok = |(lo, hi): (f64, f64)| lo.is_finite() && hi.is_finite() && 0.0 <= lo && lo <= hi;
        if ok(self.turn) && ok(self.coast) {
            Ok(())
        } else {
            Err(HerdError::Validation(
                "search box intervals must be finite, nonnegative and ordered".into(),
            ))
        }
    }
}

/// What to reach and how hard to look.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ReachSpec {
    pub target: Vec2,
    pub kappa_c: f64,
    #[serde(default = "one")]
    pub kappa_p: f64,
    /// Switch-on time, measured from the start of the run.
    #[serde(default = "default_t1")]
    pub t1: f64,
    /// Try later switch-on times when the target lies inside the stable orbit.
    #[serde(default = "yes")]
    pub retry_t1: bool,
    /// Also search with `-kappa_c` and keep whichever lands closer.
    #[serde(default)]
    pub both_signs: bool,
    #[serde(default = "default_tolerance")]
    pub tolerance: f64,
    #[serde(default)]
    pub search: Option<SearchBox>,
    #[serde(default = "default_grid")]
    pub grid: usize,
    #[serde(default = "default_budget")]
    pub refine_budget: usize,
    #[serde(default = "default_dt")]
    pub dt: f64,
    /// A previously found `(turn, coast)` pair; the search never returns anything worse.
    #[serde(default)]
    pub warm_start: Option<(f64, f64)>,
}

fn one() -> f64 {
    1.0
}
fn yes() -> bool {
    true
}
fn default_t1() -> f64 {
    DEFAULT_T1
}
fn default_tolerance() -> f64 {
    DEFAULT_TOLERANCE
}
fn default_grid() -> usize {
    DEFAULT_GRID
}
fn default_budget() -> usize {
    DEFAULT_REFINE_BUDGET
}
fn default_dt() -> f64 {
    DEFAULT_DT
}

impl ReachSpec {
    pub fn new(target: Vec2, kappa_c: f64) -> Self {
        Self {
            target,
            kappa_c,
            kappa_p: 1.0,
            t1: DEFAULT_T1,
            retry_t1: true,
            both_signs: false,
            tolerance: DEFAULT_TOLERANCE,
            search: None,
            grid: DEFAULT_GRID,
            refine_budget: DEFAULT_REFINE_BUDGET,
            dt: DEFAULT_DT,
            warm_start: None,
        }
    }

    pub fn validate(&self, model: &Model) -> Result<()> {
        let nu = model.friction.common().ok_or(HerdError::UnequalFriction)?;
        let limit = nu * (self.kappa_p * model.kernels.gamma_m()).max(0.0).sqrt();
        if !(self.kappa_c.abs() < limit) {
            return Err(HerdError::NoOrbit {
                kappa_c: self.kappa_c,
                limit,
            });
        }
        if !(self.kappa_p > 0.0 && self.kappa_p <= 1.0) {
            return Err(HerdError::Validation("kappa_p must lie in (0, 1]".into()));
        }
        if !(self.tolerance > 0.0) {
            return Err(HerdError::Validation("tolerance must be positive".into()));
        }
        if !(self.t1 >= 0.0 && self.t1.is_finite()) {
            return Err(HerdError::Validation(
                "t1 must be finite and nonnegative".into(),
            ));
        }
        if !(self.dt > 0.0) || self.grid < 2 {
            return Err(HerdError::Validation(
                "search needs a positive step and a grid of at least 2 points".into(),
            ));
        }
        if !self.target.is_finite() {
            return Err(HerdError::Validation("target must be finite".into()));
        }
        if let Some(b) = &self.search {
            b.validate()?;
        }
        Ok(())
    }

    fn search_box(&self, nu: f64) -> SearchBox {
        self.search
            .unwrap_or_else(|| SearchBox::default_for(self.kappa_c, nu))
    }
}

/// One switch-on time that was tried.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct T1Attempt {
    pub t1: f64,
    pub error: f64,
    /// The target lay inside the closed ball of the stable orbit for this `t1`.
    pub inside_orbit: bool,
}

/// Best off-bang-off control found; reported even when the tolerance was missed.
#[derive(Debug, Clone)]
pub struct ReachResult {
    pub t1: f64,
    pub t2: f64,
    pub t_f: f64,
    pub kappa_p: f64,
    pub kappa_c: f64,
    pub error: f64,
    pub reached: bool,
    pub schedule: ControlSchedule,
    pub trajectory: Trajectory,
    pub evaluations: usize,
    pub attempts: Vec<T1Attempt>,
}

/// Integrates an off-bang-off schedule piece by piece so that the switching
/// times always fall on grid nodes.
#[allow(clippy::too_many_arguments)]
pub fn simulate_off_bang_off(
    initial: &SystemState,
    model: &Model,
    kp: f64,
    kc: f64,
    t1: f64,
    t2: f64,
    t_f: f64,
    n_steps: usize,
) -> Result<Trajectory> {
    let t0 = initial.t;
    let m = initial.layout().drivers;
    let total = t_f - t0;
    if !(total > 0.0) {
        return Err(HerdError::Validation(
            "final time must follow the start time".into(),
        ));
    }
    let t1c = t1.clamp(t0, t_f);
    let t2c = t2.clamp(t1c, t_f);
    let pieces = [(t0, t1c, 0.0), (t1c, t2c, kc), (t2c, t_f, 0.0)];
    let mut traj: Option<Trajectory> = None;
    let mut state = initial.clone();
    for (a, b, gain) in pieces {
        if b - a <= 1e-12 * total.max(1.0) {
            continue;
        }
        let steps = ((n_steps as f64 * (b - a) / total).round() as usize).max(1);
        state.t = a;
        let mut src = vec![DriverControl::new(kp, gain); m];
        let part = integrate(&state, &mut src, model, b, steps)?;
        state = part.final_state();
        match traj.as_mut() {
            None => traj = Some(part),
            Some(t) => t.append(&part),
        }
    }
    traj.ok_or_else(|| HerdError::Validation("empty simulation interval".into()))
}

pub(crate) fn target_error(traj: &Trajectory, target: Vec2) -> f64 {
    (traj.state(traj.len() - 1).barycenter() - target).norm()
}

fn steps_for(span: f64, dt: f64) -> usize {
    ((span / dt).ceil() as usize).max(1)
}

fn check_single_pair(initial: &SystemState, model: &Model) -> Result<f64> {
    let layout = initial.layout();
    if layout.drivers != 1 || layout.evaders != 1 {
        return Err(HerdError::Usage(
            "point reachability is defined for one driver and one evader".into(),
        ));
    }
    let nu = model.friction.common().ok_or(HerdError::UnequalFriction)?;
    initial.check_nonsingular(crate::dynamics::SINGULARITY_DISTANCE)?;
    Ok(nu)
}

/// Center and evader radius of the circle the evader settles on when the
/// gain `kappa_c` is switched on at `t1` and never switched off.
pub fn stable_orbit(
    initial: &SystemState,
    model: &Model,
    kappa_p: f64,
    kappa_c: f64,
    t1: f64,
    dt: f64,
) -> Result<(Vec2, f64)> {
    check_single_pair(initial, model)?;
    let t_end = t1.max(initial.t) + 40.0;
    let traj = simulate_off_bang_off(
        initial,
        model,
        kappa_p,
        kappa_c,
        t1,
        f64::INFINITY,
        t_end,
        steps_for(t_end - initial.t, dt),
    )?;
    let (reference, _) = fit_circumvention(&traj, model, 0.3)?;
    Ok((reference.center, reference.r_e))
}

#[derive(Debug, Clone, Copy)]
struct Candidate {
    kappa_c: f64,
    turn: f64,
    coast: f64,
    sq_error: f64,
}

/// Grid scan followed by simplex refinement of the best few local minima.
///
/// `objective` maps a point of the box to a squared error; failed simulations
/// should report infinity.
fn shoot(
    objective: &(dyn Fn(f64, f64) -> f64 + Sync),
    x_range: (f64, f64),
    y_range: (f64, f64),
    grid: usize,
    budget: usize,
    warm_start: Option<(f64, f64)>,
) -> ((f64, f64), f64, usize) {
    let axis = |(lo, hi): (f64, f64), i: usize| lo + (hi - lo) * i as f64 / (grid - 1) as f64;
    let values: Vec<f64> = (0..grid * grid)
        .into_par_iter()
        .map(|c| objective(axis(x_range, c / grid), axis(y_range, c % grid)))
        .collect();
    let mut evaluations = values.len();
    let at = |i: usize, j: usize| values[i * grid + j];

    let mut minima: Vec<(usize, usize)> = Vec::new();
    for i in 0..grid {
        for j in 0..grid {
            let v = at(i, j);
            if !v.is_finite() {
                continue;
            }
            let mut local = true;
            for di in -1i64..=1 {
                for dj in -1i64..=1 {
                    let (a, b) = (i as i64 + di, j as i64 + dj);
                    if (di, dj) != (0, 0)
                        && (0..grid as i64).contains(&a)
                        && (0..grid as i64).contains(&b)
                    {
                        local &= v <= at(a as usize, b as usize);
                    }
                }
            }
            if local {
                minima.push((i, j));
            }
        }
    }
    minima.sort_by(|a, b| at(a.0, a.1).total_cmp(&at(b.0, b.1)));
    minima.truncate(REFINED_STARTS);

    let mut best = (x_range.0, y_range.0);
    let mut best_value = f64::INFINITY;
    let mut consider = |p: (f64, f64), v: f64| {
        if v < best_value {
            best = p;
            best_value = v;
        }
    };
    for (c, v) in values.iter().enumerate() {
        consider((axis(x_range, c / grid), axis(y_range, c % grid)), *v);
    }
    if let Some(p) = warm_start {
        let p = (
            p.0.clamp(x_range.0, x_range.1),
            p.1.clamp(y_range.0, y_range.1),
        );
        evaluations += 1;
        consider(p, objective(p.0, p.1));
    }

    let spacing = |(lo, hi): (f64, f64)| ((hi - lo) / (grid - 1) as f64).max(1e-6);
    let step = [spacing(x_range), spacing(y_range)];
    let (lower, upper) = ([x_range.0, y_range.0], [x_range.1, y_range.1]);
    let mut starts: Vec<(f64, f64)> = minima
        .iter()
        .map(|&(i, j)| (axis(x_range, i), axis(y_range, j)))
        .collect();
    if let Some(p) = warm_start {
        starts.insert(0, p);
    }
    let share = budget / starts.len().max(1);
    for s in starts {
        if share < 3 {
            break;
        }
        let r = nelder_mead(
            |x| objective(x[0], x[1]),
            &[s.0, s.1],
            &step,
            &lower,
            &upper,
            share,
            1e-16,
            1e-9,
        );
        evaluations += r.evaluations;
        consider((r.x[0], r.x[1]), r.value);
    }
    (best, best_value, evaluations)
}

fn search_at_t1(
    initial: &SystemState,
    model: &Model,
    spec: &ReachSpec,
    kappa_c: f64,
    t1: f64,
    nu: f64,
) -> (Candidate, usize) {
    let t0 = initial.t;
    let bx = spec.search_box(nu);
    let objective = |turn: f64, coast: f64| -> f64 {
        let (t2, t_f) = (t0 + t1 + turn, t0 + t1 + turn + coast);
        if !(t_f > t0) {
            return (initial.barycenter() - spec.target).norm_sq();
        }
        match simulate_off_bang_off(
            initial,
            model,
            spec.kappa_p,
            kappa_c,
            t0 + t1,
            t2,
            t_f,
            steps_for(t_f - t0, spec.dt),
        ) {
            Ok(traj) => target_error(&traj, spec.target).powi(2),
            Err(_) => f64::INFINITY,
        }
    };
    let ((turn, coast), sq_error, evaluations) = shoot(
        &objective,
        bx.turn,
        bx.coast,
        spec.grid,
        spec.refine_budget,
        spec.warm_start,
    );
    (
        Candidate {
            kappa_c,
            turn,
            coast,
            sq_error,
        },
        evaluations,
    )
}

/// Searches for `t2` and `t_f` (and, when the target is inside the stable
/// orbit, a later `t1`) so that the evader ends within tolerance of the target.
pub fn reach_point(initial: &SystemState, model: &Model, spec: &ReachSpec) -> Result<ReachResult> {
    let nu = check_single_pair(initial, model)?;
    spec.validate(model)?;
    let mut signs = vec![spec.kappa_c];
    if spec.both_signs && spec.kappa_c != 0.0 {
        signs.push(-spec.kappa_c);
    }

    let mut t1_values = vec![spec.t1];
    if spec.retry_t1 {
        let mut t = (spec.t1 / T1_RETRY_STEP).floor() * T1_RETRY_STEP + T1_RETRY_STEP;
        while t <= T1_RETRY_MAX + 1e-9 {
            t1_values.push(t);
            t += T1_RETRY_STEP;
        }
    }

    let mut attempts = Vec::new();
    let mut evaluations = 0;
    let mut best: Option<(f64, Candidate)> = None;
    for &t1 in &t1_values {
        let mut here: Option<Candidate> = None;
        for &kc in &signs {
            let (cand, evals) = search_at_t1(initial, model, spec, kc, t1, nu);
            evaluations += evals;
            if here.map_or(true, |h| cand.sq_error < h.sq_error) {
                here = Some(cand);
            }
        }
        let here = here.expect("at least one sign is searched");
        let error = here.sq_error.sqrt();
        if best.map_or(true, |(_, b)| here.sq_error < b.sq_error) {
            best = Some((t1, here));
        }
        let inside = if error > spec.tolerance && spec.retry_t1 {
            let (center, radius) = stable_orbit(
                initial,
                model,
                spec.kappa_p,
                here.kappa_c,
                initial.t + t1,
                spec.dt,
            )?;
            (spec.target - center).norm() <= radius
        } else {
            false
        };
        attempts.push(T1Attempt {
            t1,
            error,
            inside_orbit: inside,
        });
        if !inside {
            break;
        }
    }

    let (t1, c) = best.expect("at least one t1 is searched");
    let t0 = initial.t;
    let (t1_abs, t2, t_f) = (t0 + t1, t0 + t1 + c.turn, t0 + t1 + c.turn + c.coast);
    let trajectory = if t_f > t0 {
        simulate_off_bang_off(
            initial,
            model,
            spec.kappa_p,
            c.kappa_c,
            t1_abs,
            t2,
            t_f,
            steps_for(t_f - t0, spec.dt),
        )?
    } else {
        let mut traj = Trajectory::with_capacity(initial.layout(), 1);
        traj.push(
            t0,
            initial.as_slice(),
            &[DriverControl::new(spec.kappa_p, 0.0)],
        );
        traj
    };
    let error = target_error(&trajectory, spec.target);
    Ok(ReachResult {
        t1: t1_abs,
        t2,
        t_f,
        kappa_p: spec.kappa_p,
        kappa_c: c.kappa_c,
        error,
        reached: error <= spec.tolerance,
        schedule: ControlSchedule::off_bang_off(t1_abs, t2, spec.kappa_p, c.kappa_c),
        trajectory,
        evaluations,
        attempts,
    })
}

/// Legs of a multi-target run.
#[derive(Debug, Clone)]
pub struct WaypointRun {
    pub legs: Vec<ReachResult>,
    /// Index of the first leg that missed its tolerance; later targets are not attempted.
    pub failed_leg: Option<usize>,
    /// All legs as one schedule; each segment keeps its leg's local clock.
    pub schedule: Option<ControlSchedule>,
    pub trajectory: Option<Trajectory>,
}

/// Reaches the targets one after another, each leg starting from the end of
/// the previous one. The first leg uses `template` unchanged; later legs
/// switch the gain on immediately (`t1 = 0`) since the driver is already in pursuit.
pub fn reach_waypoints(
    initial: &SystemState,
    model: &Model,
    targets: &[Vec2],
    template: &ReachSpec,
) -> Result<WaypointRun> {
    let mut legs: Vec<ReachResult> = Vec::with_capacity(targets.len());
    let mut segments = Vec::with_capacity(targets.len());
    let mut trajectory: Option<Trajectory> = None;
    let mut failed_leg = None;
    let mut state = initial.clone();
    for (k, &target) in targets.iter().enumerate() {
        let mut spec = *template;
        spec.target = target;
        if k > 0 {
            spec.t1 = 0.0;
        }
        let leg = reach_point(&state, model, &spec)?;
        let start = state.t;
        segments.push(
            ControlSchedule::off_bang_off(leg.t1 - start, leg.t2 - start, leg.kappa_p, leg.kappa_c)
                .delayed(start),
        );
        match trajectory.as_mut() {
            None => trajectory = Some(leg.trajectory.clone()),
            Some(t) => t.append(&leg.trajectory),
        }
        state = leg.trajectory.final_state();
        let reached = leg.reached;
        legs.push(leg);
        if !reached {
            failed_leg = Some(k);
            break;
        }
    }
    Ok(WaypointRun {
        legs,
        failed_leg,
        schedule: (!segments.is_empty()).then_some(ControlSchedule::Sequence { segments }),
        trajectory,
    })
}

/// Constant gains that bring the evader closest to a target.
#[derive(Debug, Clone)]
pub struct ConstantReach {
    pub kappa_c: f64,
    pub t_f: f64,
    pub error: f64,
    pub reached: bool,
    pub trajectory: Trajectory,
    pub evaluations: usize,
}

/// Tuning for [`constant_control_reach`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConstantSearch {
    /// Range of the final time measured from the start.
    pub horizon: (f64, f64),
    /// Odd, so the pure-pursuit gain `kappa_c = 0` is on the grid.
    pub grid: usize,
    pub refine_budget: usize,
    pub dt: f64,
}

impl Default for ConstantSearch {
    fn default() -> Self {
        Self {
            horizon: (0.5, 20.0),
            grid: DEFAULT_GRID,
            refine_budget: DEFAULT_REFINE_BUDGET,
            dt: DEFAULT_DT,
        }
    }
}

/// Minimizes the final distance over a constant `kappa_c` (with `kappa_p = 1`)
/// and the final time.
pub fn constant_control_reach(
    initial: &SystemState,
    model: &Model,
    target: Vec2,
    tolerance: f64,
    search: &ConstantSearch,
) -> Result<ConstantReach> {
    let nu = check_single_pair(initial, model)?;
    if !(tolerance > 0.0) {
        return Err(HerdError::Validation("tolerance must be positive".into()));
    }
    let (h0, h1) = search.horizon;
    if !(0.0 < h0 && h0 <= h1 && h1.is_finite())
        || search.grid < 3
        || search.grid % 2 == 0
        || !(search.dt > 0.0)
    {
        return Err(HerdError::Validation(
            "constant search needs a positive horizon range, an odd grid of at least 3 and a positive step".into(),
        ));
    }
    let limit = nu * model.kernels.gamma_m().max(0.0).sqrt() * (1.0 - 1e-6);
    let t0 = initial.t;
    let objective = |kc: f64, span: f64| -> f64 {
        let mut src = vec![DriverControl::new(1.0, kc)];
        match integrate(
            initial,
            &mut src,
            model,
            t0 + span,
            steps_for(span, search.dt),
        ) {
            Ok(traj) => target_error(&traj, target).powi(2),
            Err(_) => f64::INFINITY,
        }
    };
    let ((kappa_c, span), _, evaluations) = shoot(
        &objective,
        (-limit, limit),
        (h0, h1),
        search.grid,
        search.refine_budget,
        None,
    );
    let mut src = vec![DriverControl::new(1.0, kappa_c)];
    let trajectory = integrate(
        initial,
        &mut src,
        model,
        t0 + span,
        steps_for(span, search.dt),
    )?;
    let error = target_error(&trajectory, target);
    Ok(ConstantReach {
        kappa_c,
        t_f: t0 + span,
        error,
        reached: error <= tolerance,
        trajectory,
        evaluations,
    })
}
