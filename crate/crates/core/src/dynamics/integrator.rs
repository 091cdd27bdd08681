use super::state::{Layout, StateView, SystemState};
use super::trajectory::Trajectory;
use super::{AgentState, DriverControl, Model, SINGULARITY_DISTANCE};
use crate::error::{HerdError, Result};

/// Anything that can supply driver gains while the system is integrated.
pub trait ControlSource {
    /// Gains at time `t` for the given (possibly intermediate stage) state.
    fn controls_at(&self, t: f64, state: StateView<'_>, out: &mut [DriverControl]) -> Result<()>;

    /// Called once at every grid node before the step that leaves it.
    fn begin_step(&mut self, _t: f64, _state: StateView<'_>) {}
}

impl ControlSource for Vec<DriverControl> {
    fn controls_at(&self, _t: f64, _s: StateView<'_>, out: &mut [DriverControl]) -> Result<()> {
        if out.len() != self.len() {
            return Err(HerdError::Validation(format!(
                "{} constant control pairs for {} drivers",
                self.len(),
                out.len()
            )));
        }
        out.copy_from_slice(self);
        Ok(())
    }
}

/// Stage buffers reused across RK4 steps.
#[derive(Debug, Clone)]
pub struct Rk4Workspace {
    pub k: [Vec<f64>; 4],
    pub y: Vec<f64>,
    pub ctl: Vec<DriverControl>,
}

impl Rk4Workspace {
    pub fn new(layout: Layout) -> Self {
        let dim = layout.dim();
        Self {
            k: [
                vec![0.0; dim],
                vec![0.0; dim],
                vec![0.0; dim],
                vec![0.0; dim],
            ],
            y: vec![0.0; dim],
            ctl: vec![DriverControl::OFF; layout.drivers],
        }
    }
}

/// One classical Runge-Kutta step from `(t, x)` of length `h`, written to `out`.
///
/// `controls(stage, t_stage, y_stage, gains)` fills the gains used at each of the
/// four stages (`stage` is 0..4; stages 1 and 2 sit at the midpoint).
#[allow(clippy::too_many_arguments)]
pub fn rk4_step(
    model: &Model,
    layout: Layout,
    t: f64,
    h: f64,
    x: &[f64],
    out: &mut [f64],
    ws: &mut Rk4Workspace,
    controls: &mut dyn FnMut(usize, f64, &[f64], &mut [DriverControl]) -> Result<()>,
) -> Result<()> {
    let offsets = [0.0, 0.5, 0.5, 1.0];
    for stage in 0..4 {
        let ts = t + offsets[stage] * h;
        if stage == 0 {
            ws.y.copy_from_slice(x);
        } else {
            let prev = &ws.k[stage - 1];
            let a = offsets[stage] * h;
            for ((y, xi), ki) in ws.y.iter_mut().zip(x).zip(prev) {
                *y = xi + a * ki;
            }
        }
        controls(stage, ts, &ws.y, &mut ws.ctl)?;
        let (y, ctl) = (&ws.y, &ws.ctl);
        model.rhs_into(ts, layout, y, ctl, &mut ws.k[stage])?;
    }
    let [k1, k2, k3, k4] = &ws.k;
    for i in 0..x.len() {
        out[i] = x[i] + h / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]);
    }
    Ok(())
}

/// Integrates on the uniform grid of `n_steps` steps from `initial.t` to `t_f`.
pub fn integrate(
    initial: &SystemState,
    source: &mut dyn ControlSource,
    model: &Model,
    t_f: f64,
    n_steps: usize,
) -> Result<Trajectory> {
    integrate_until(
        initial,
        source,
        model,
        &uniform_grid(initial.t, t_f, n_steps)?,
        |_| false,
    )
}

/// Integrates on an arbitrary increasing grid starting at `initial.t`.
pub fn integrate_on_grid(
    initial: &SystemState,
    source: &mut dyn ControlSource,
    model: &Model,
    times: &[f64],
) -> Result<Trajectory> {
    integrate_until(initial, source, model, times, |_| false)
}

/// Integrates on `times`, stopping early at the first node where `stop` holds.
pub fn integrate_until(
    initial: &SystemState,
    source: &mut dyn ControlSource,
    model: &Model,
    times: &[f64],
    mut stop: impl FnMut(StateView<'_>) -> bool,
) -> Result<Trajectory> {
    let layout = initial.layout();
    check_grid(initial.t, times)?;
    model.check_shapes(layout, &vec![DriverControl::OFF; layout.drivers])?;
    initial.check_nonsingular(SINGULARITY_DISTANCE)?;

    let dim = layout.dim();
    let mut traj = Trajectory::with_capacity(layout, times.len());
    let mut ws = Rk4Workspace::new(layout);
    let mut x = initial.as_slice().to_vec();
    let mut next = vec![0.0; dim];
    let mut node_ctl = vec![DriverControl::OFF; layout.drivers];

    for (k, &t) in times.iter().enumerate() {
        let view = StateView {
            t,
            layout,
            data: &x,
        };
        source.begin_step(t, view);
        source.controls_at(t, view, &mut node_ctl)?;
        traj.push(t, &x, &node_ctl);
        if k + 1 == times.len() || stop(view) {
            break;
        }
        let h = times[k + 1] - t;
        let src: &dyn ControlSource = &*source;
        rk4_step(
            model,
            layout,
            t,
            h,
            &x,
            &mut next,
            &mut ws,
            &mut |_, ts, y, out| {
                src.controls_at(
                    ts,
                    StateView {
                        t: ts,
                        layout,
                        data: y,
                    },
                    out,
                )
            },
        )?;
        if !next.iter().all(|v| v.is_finite()) {
            return Err(HerdError::Divergence { last_valid_t: t });
        }
        std::mem::swap(&mut x, &mut next);
    }
    Ok(traj)
}

/// Nodes `t0 + k (t_f - t0) / n_steps`, with the last node exactly `t_f`.
pub fn uniform_grid(t0: f64, t_f: f64, n_steps: usize) -> Result<Vec<f64>> {
    if n_steps == 0 {
        return Err(HerdError::Validation("n_steps must be at least 1".into()));
    }
    if !(t_f > t0) || !t_f.is_finite() {
        return Err(HerdError::Validation(format!(
            "final time {t_f} must be finite and after the start time {t0}"
        )));
    }
    let h = (t_f - t0) / n_steps as f64;
    Ok((0..=n_steps)
        .map(|k| if k == n_steps { t_f } else { t0 + h * k as f64 })
        .collect())
}

fn check_grid(t0: f64, times: &[f64]) -> Result<()> {
    if times.is_empty() || times[0] != t0 {
        return Err(HerdError::Validation(
            "time grid must start at the initial time".into(),
        ));
    }
    if times.windows(2).any(|w| !(w[1] > w[0])) {
        return Err(HerdError::Validation(
            "time grid must be strictly increasing".into(),
        ));
    }
    Ok(())
}
