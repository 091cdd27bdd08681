//! Closed-loop steering: angle-based circumvention feedback and a hysteresis
//! law that suspends pursuit while the evaders are spread out.

use serde::{Deserialize, Serialize};

use crate::controls::ControlBounds;
use crate::dynamics::{
    integrate_until, AgentState, ControlSource, DriverControl, Model, StateView, SystemState,
    Trajectory,
};
use crate::error::{HerdError, Result};
use crate::vec2::Vec2;

/// Denominators below this make the steering angle undefined.
pub const DEGENERACY_EPS: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FeedbackParams {
    #[serde(default = "default_kappa_bar_c")]
    pub kappa_bar_c: f64,
    #[serde(default = "default_gather_on")]
    pub gather_on: f64,
    #[serde(default = "default_gather_off")]
    pub gather_off: f64,
    pub target: Vec2,
}

fn default_kappa_bar_c() -> f64 {
    3.0
}
fn default_gather_on() -> f64 {
    0.3
}
fn default_gather_off() -> f64 {
    0.27
}

impl FeedbackParams {
    pub fn new(target: Vec2) -> Self {
        Self {
            kappa_bar_c: default_kappa_bar_c(),
            gather_on: default_gather_on(),
            gather_off: default_gather_off(),
            target,
        }
    }

    pub fn validate(&self, bounds: &ControlBounds) -> Result<()> {
        if !(self.gather_off > 0.0 && self.gather_off < self.gather_on) {
            return Err(HerdError::Validation(
                "feedback thresholds need 0 < gather_off < gather_on".into(),
            ));
        }
        if !(self.kappa_bar_c > 0.0)
            || self.kappa_bar_c > bounds.kc_max
            || -self.kappa_bar_c < bounds.kc_min
        {
            return Err(HerdError::Validation(
                "kappa_bar_c must be positive and within the circumvention bounds".into(),
            ));
        }
        if !self.target.is_finite() {
            return Err(HerdError::Validation(
                "feedback target must be finite".into(),
            ));
        }
        Ok(())
    }
}

/// Steering gain for one driver; the flag reports a degenerate geometry, in
/// which case the gain is zero.
pub fn feedback_circumvention(
    center: Vec2,
    target: Vec2,
    driver: Vec2,
    kappa_bar_c: f64,
) -> (f64, bool) {
    let a = target - center;
    let b = driver - center;
    let (na, nb) = (a.norm(), b.norm());
    if na < DEGENERACY_EPS || nb < DEGENERACY_EPS {
        return (0.0, true);
    }
    (-kappa_bar_c * a.dot(b.perp()) / (na * nb), false)
}

/// Whether pursuit is currently suspended.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct HysteresisState {
    pub stopped: bool,
}

impl HysteresisState {
    /// Applies one threshold check; returns true when the state flipped.
    pub fn update(&mut self, radius: f64, p: &FeedbackParams) -> bool {
        let next = if self.stopped {
            radius >= p.gather_off
        } else {
            radius > p.gather_on
        };
        let flipped = next != self.stopped;
        self.stopped = next;
        flipped
    }
}

/// Pursuit gain shared by all drivers, with the updated hysteresis state.
pub fn feedback_pursuit(
    state: &SystemState,
    params: &FeedbackParams,
    mut hysteresis: HysteresisState,
) -> (Vec<f64>, HysteresisState) {
    hysteresis.update(state.gathering_radius(), params);
    let kp = if hysteresis.stopped { 0.0 } else { 1.0 };
    (vec![kp; state.layout().drivers], hysteresis)
}

/// When a closed-loop run ends.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "rule", rename_all = "snake_case")]
pub enum StopRule {
    FixedHorizon,
    BarycenterWithin { radius: f64 },
}

/// Summary of a closed-loop run.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ClosedLoopReport {
    pub reached: bool,
    pub control_time: f64,
    pub running_cost: f64,
    pub final_error: f64,
    pub min_driver_evader_distance: f64,
    pub first_stop_time: Option<f64>,
    pub switches: usize,
    pub degenerate_evaluations: usize,
    /// `(t, gathering radius)` at every grid node.
    pub radius_history: Vec<(f64, f64)>,
}

struct FeedbackSource {
    params: FeedbackParams,
    bounds: ControlBounds,
    hysteresis: HysteresisState,
    first_stop: Option<f64>,
    switches: usize,
    degenerate: std::cell::Cell<usize>,
}

impl ControlSource for FeedbackSource {
    fn controls_at(&self, _t: f64, state: StateView<'_>, out: &mut [DriverControl]) -> Result<()> {
        let center = state.barycenter();
        let kp = if self.hysteresis.stopped { 0.0 } else { 1.0 };
        for (j, o) in out.iter_mut().enumerate() {
            let (kc, degenerate) = feedback_circumvention(
                center,
                self.params.target,
                state.driver_pos(j),
                self.params.kappa_bar_c,
            );
            if degenerate {
                self.degenerate.set(self.degenerate.get() + 1);
            }
            *o = self.bounds.clamp(DriverControl::new(kp, kc));
        }
        Ok(())
    }

    fn begin_step(&mut self, t: f64, state: StateView<'_>) {
        if self
            .hysteresis
            .update(state.gathering_radius(), &self.params)
        {
            self.switches += 1;
            if self.hysteresis.stopped && self.first_stop.is_none() {
                self.first_stop = Some(t);
            }
        }
    }
}

/// Integrates with controls recomputed from the state at every stage.
pub fn run_closed_loop(
    initial: &SystemState,
    model: &Model,
    bounds: &ControlBounds,
    params: &FeedbackParams,
    t_f: f64,
    n_steps: usize,
    stop_rule: StopRule,
) -> Result<(Trajectory, ClosedLoopReport)> {
    params.validate(bounds)?;
    let mut source = FeedbackSource {
        params: *params,
        bounds: *bounds,
        hysteresis: HysteresisState::default(),
        first_stop: None,
        switches: 0,
        degenerate: std::cell::Cell::new(0),
    };
    let grid = crate::dynamics::uniform_grid(initial.t, t_f, n_steps)?;
    let target = params.target;
    let traj = integrate_until(initial, &mut source, model, &grid, |v| match stop_rule {
        StopRule::FixedHorizon => false,
        StopRule::BarycenterWithin { radius } => (v.barycenter() - target).norm() < radius,
    })?;

    let m = traj.layout().drivers as f64;
    let running_cost =
        traj.trapezoid(|k| traj.controls(k).iter().map(|c| c.kc * c.kc).sum::<f64>() / m);
    let last = traj.state(traj.len() - 1);
    let final_error = (last.barycenter() - target).norm();
    let reached = match stop_rule {
        StopRule::FixedHorizon => true,
        StopRule::BarycenterWithin { radius } => final_error < radius,
    };
    let report = ClosedLoopReport {
        reached,
        control_time: traj.t_final() - initial.t,
        running_cost,
        final_error,
        min_driver_evader_distance: traj
            .states()
            .map(|s| s.min_driver_evader_distance())
            .fold(f64::INFINITY, f64::min),
        first_stop_time: source.first_stop,
        switches: source.switches,
        degenerate_evaluations: source.degenerate.get(),
        radius_history: traj.states().map(|s| (s.t, s.gathering_radius())).collect(),
    };
    Ok((traj, report))
}
