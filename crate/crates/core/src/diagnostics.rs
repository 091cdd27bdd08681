//! Energy and Lyapunov functionals, asymptotic reference motions, and the fits
//! and checks that compare simulations against them.

use std::f64::consts::TAU;

use serde::Serialize;

use crate::controls::{ControlBounds, ControlSchedule, Scheduled};
use crate::dynamics::{integrate, AgentState, Model, StateView, SystemState, Trajectory};
use crate::error::{HerdError, Result};
use crate::kernels::{KernelSet, PotentialFn};
use crate::vec2::Vec2;

pub const DEFAULT_TAIL_FRACTION: f64 = 0.3;

/// Relative position `u = u_d - u_e` and velocity `v = u'` of a driver-evader pair.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RelativeState {
    pub u: Vec2,
    pub v: Vec2,
}

impl RelativeState {
    pub fn new(u: Vec2, v: Vec2) -> Self {
        Self { u, v }
    }

    pub fn of<S: AgentState + ?Sized>(s: &S) -> Self {
        Self {
            u: s.driver_pos(0) - s.evader_pos(0),
            v: s.driver_vel(0) - s.evader_vel(0),
        }
    }
}

/// `E = |v|^2 / 2 + P(|u|)`.
pub fn energy(rel: RelativeState, kernels: &KernelSet) -> Result<f64> {
    Ok(energy_with(rel, &kernels.potential_fn()?))
}

/// `L = E - (kappa_c / nu) u^perp . v`.
pub fn lyapunov_kappa(
    rel: RelativeState,
    kappa_c: f64,
    nu: f64,
    kernels: &KernelSet,
) -> Result<f64> {
    Ok(lyapunov_with(rel, kappa_c, nu, &kernels.potential_fn()?))
}

pub fn energy_with(rel: RelativeState, potential: &PotentialFn) -> f64 {
    0.5 * rel.v.norm_sq() + potential.eval(rel.u.norm()).value
}

pub fn lyapunov_with(rel: RelativeState, kappa_c: f64, nu: f64, potential: &PotentialFn) -> f64 {
    energy_with(rel, potential) - kappa_c / nu * rel.u.perp().dot(rel.v)
}

/// Straight-line pursuit motion: `u_e(t) = -(f_d(r_p) u* / nu) t + u_e*`, `u_d = u_e + u*`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct PursuitReference {
    pub phi0: f64,
    pub r_p: f64,
    pub u_e_star: Vec2,
    pub slope: Vec2,
}

impl PursuitReference {
    pub fn new(kernels: &KernelSet, nu: f64, phi0: f64, u_e_star: Vec2) -> Result<Self> {
        let r_p = kernels.solve_rp()?;
        let u_star = Vec2::from_polar(r_p, phi0);
        Ok(Self {
            phi0: phi0.rem_euclid(TAU),
            r_p,
            u_e_star,
            slope: -(kernels.f_d.eval(r_p) / nu) * u_star,
        })
    }

    pub fn u_star(&self) -> Vec2 {
        Vec2::from_polar(self.r_p, self.phi0)
    }

    /// `(u_d, u_e)` at time `t`.
    pub fn at(&self, t: f64) -> (Vec2, Vec2) {
        let ue = self.slope * t + self.u_e_star;
        (ue + self.u_star(), ue)
    }

    pub fn state_at(&self, t: f64) -> Result<SystemState> {
        let (ud, ue) = self.at(t);
        SystemState::new(t, &[ud], &[self.slope], &[ue], &[self.slope])
    }
}

/// Co-rotating circular motion of the driver and the evader around a shared center.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct CircumventionReference {
    pub phi1: f64,
    pub center: Vec2,
    pub r_c: f64,
    pub r_d: f64,
    pub r_e: f64,
    pub phi_d: f64,
    pub phi_e: f64,
    pub omega: f64,
}

impl CircumventionReference {
    pub fn new(
        kernels: &KernelSet,
        kappa_c: f64,
        nu: f64,
        phi1: f64,
        center: Vec2,
    ) -> Result<Self> {
        if kappa_c == 0.0 {
            return Err(HerdError::Usage(
                "circumvention reference needs a nonzero kappa_c".into(),
            ));
        }
        let r_c = kernels.solve_rc(kappa_c, nu)?;
        let omega = kappa_c / nu;
        let f_d = kernels.f_d.eval(r_c);
        let f_e = kernels.f_e.eval(r_c);
        // Forced damped response: amplitude ratio and phase of 1 / (-omega^2 + i nu omega).
        let denom = (omega.powi(4) + kappa_c * kappa_c).sqrt();
        let lag = (nu * omega).atan2(-omega * omega);
        Ok(Self {
            phi1,
            center,
            r_c,
            r_d: (f_d * f_d + kappa_c * kappa_c).sqrt() * r_c / denom,
            r_e: f_e * r_c / denom,
            phi_d: phi1 + kappa_c.atan2(-f_d) - lag,
            phi_e: phi1 + std::f64::consts::PI - lag,
            omega,
        })
    }

    /// `(u_d, u_e)` at time `t`.
    pub fn at(&self, t: f64) -> (Vec2, Vec2) {
        (
            self.center + Vec2::from_polar(self.r_d, self.omega * t + self.phi_d),
            self.center + Vec2::from_polar(self.r_e, self.omega * t + self.phi_e),
        )
    }

    pub fn velocities_at(&self, t: f64) -> (Vec2, Vec2) {
        (
            self.omega * Vec2::from_polar(self.r_d, self.omega * t + self.phi_d).perp(),
            self.omega * Vec2::from_polar(self.r_e, self.omega * t + self.phi_e).perp(),
        )
    }

    pub fn state_at(&self, t: f64) -> Result<SystemState> {
        let (ud, ue) = self.at(t);
        let (vd, ve) = self.velocities_at(t);
        SystemState::new(t, &[ud], &[vd], &[ue], &[ve])
    }
}

/// Quality of a circular fit of the circumvention tail.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct CircleFit {
    /// Mean `|u_d - u_e|` over the tail.
    pub mean_relative_radius: f64,
    /// Angular velocity from a regression of the unwrapped angle of `u`.
    pub omega: f64,
    /// Radius of the circle fitted through the evader positions.
    pub evader_radius: f64,
    pub residual: f64,
}

fn single_pair_tail(traj: &Trajectory, model: &Model, tail_fraction: f64) -> Result<(f64, usize)> {
    let layout = traj.layout();
    if layout.drivers != 1 || layout.evaders != 1 {
        return Err(HerdError::Usage(
            "asymptotic fits need exactly one driver and one evader".into(),
        ));
    }
    let nu = model.friction.common().ok_or(HerdError::UnequalFriction)?;
    if !(tail_fraction > 0.0 && tail_fraction <= 1.0) {
        return Err(HerdError::Usage("tail fraction must lie in (0, 1]".into()));
    }
    let count = (traj.len() as f64 * tail_fraction).floor() as usize;
    if count < 3 {
        return Err(HerdError::Usage(format!(
            "tail of {count} nodes is too short to fit"
        )));
    }
    Ok((nu, traj.len() - count))
}

/// Fits the straight-line pursuit family to the last `tail_fraction` of a run.
pub fn fit_pursuit(
    traj: &Trajectory,
    model: &Model,
    tail_fraction: f64,
) -> Result<(PursuitReference, f64)> {
    let (nu, start) = single_pair_tail(traj, model, tail_fraction)?;
    let tail: Vec<StateView<'_>> = (start..traj.len()).map(|k| traj.state(k)).collect();
    let n = tail.len() as f64;
    let mean_u = tail
        .iter()
        .fold(Vec2::ZERO, |a, s| a + (s.driver_pos(0) - s.evader_pos(0)))
        / n;
    let mut reference = PursuitReference::new(&model.kernels, nu, mean_u.angle(), Vec2::ZERO)?;
    reference.u_e_star = tail.iter().fold(Vec2::ZERO, |a, s| {
        a + (s.evader_pos(0) - reference.slope * s.t)
    }) / n;
    let residual = tail
        .iter()
        .map(|s| (s.evader_pos(0) - reference.at(s.t).1).norm())
        .fold(0.0, f64::max);
    Ok((reference, residual))
}

/// Fits the circular circumvention family to the last `tail_fraction` of a run
/// under a constant `kappa_c`.
pub fn fit_circumvention(
    traj: &Trajectory,
    model: &Model,
    tail_fraction: f64,
) -> Result<(CircumventionReference, CircleFit)> {
    let (nu, start) = single_pair_tail(traj, model, tail_fraction)?;
    let kappa_c = traj.controls(traj.len() - 1)[0].kc;
    if (start..traj.len()).any(|k| traj.controls(k)[0].kc != kappa_c) {
        return Err(HerdError::Usage(
            "circumvention fit needs a constant kappa_c over the tail".into(),
        ));
    }
    let tail: Vec<StateView<'_>> = (start..traj.len()).map(|k| traj.state(k)).collect();
    let n = tail.len() as f64;
    let ue: Vec<Vec2> = tail.iter().map(|s| s.evader_pos(0)).collect();
    let (center, evader_radius) = fit_circle(&ue);

    let times: Vec<f64> = tail.iter().map(|s| s.t).collect();
    let us: Vec<Vec2> = tail
        .iter()
        .map(|s| s.driver_pos(0) - s.evader_pos(0))
        .collect();
    let angles = unwrap_angles(us.iter().map(|u| u.angle()));
    let omega = slope(&times, &angles);
    let mean_relative_radius = us.iter().map(|u| u.norm()).sum::<f64>() / n;

    let omega_ref = kappa_c / nu;
    let phase = tail.iter().zip(&us).fold(Vec2::ZERO, |a, (s, u)| {
        a + Vec2::from_polar(1.0, u.angle() - omega_ref * s.t)
    });
    let reference =
        CircumventionReference::new(&model.kernels, kappa_c, nu, phase.angle(), center)?;
    let residual = tail
        .iter()
        .map(|s| (s.evader_pos(0) - reference.at(s.t).1).norm())
        .fold(0.0, f64::max);
    Ok((
        reference,
        CircleFit {
            mean_relative_radius,
            omega,
            evader_radius,
            residual,
        },
    ))
}

/// Algebraic least-squares circle followed by one Gauss-Newton refinement.
pub fn fit_circle(points: &[Vec2]) -> (Vec2, f64) {
    let n = points.len() as f64;
    let mean = points.iter().fold(Vec2::ZERO, |a, &p| a + p) / n;
    let (mut suu, mut svv, mut suv, mut suuu, mut svvv, mut suvv, mut svuu) =
        (0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0);
    for p in points {
        let (u, v) = (p.x - mean.x, p.y - mean.y);
        suu += u * u;
        svv += v * v;
        suv += u * v;
        suuu += u * u * u;
        svvv += v * v * v;
        suvv += u * v * v;
        svuu += v * u * u;
    }
    let b1 = 0.5 * (suuu + suvv);
    let b2 = 0.5 * (svvv + svuu);
    let det = suu * svv - suv * suv;
    let offset = if det.abs() > 1e-300 {
        Vec2::new((b1 * svv - b2 * suv) / det, (suu * b2 - suv * b1) / det)
    } else {
        Vec2::ZERO
    };
    let mut c = mean + offset;
    let mut r = points.iter().map(|p| (*p - c).norm()).sum::<f64>() / n;

    // Gauss-Newton on residuals |p - c| - r with unknowns (c, r).
    let mut jtj = [[0.0; 3]; 3];
    let mut jtr = [0.0; 3];
    for p in points {
        let d = *p - c;
        let dist = d.norm();
        if dist == 0.0 {
            continue;
        }
        let row = [-d.x / dist, -d.y / dist, -1.0];
        let res = dist - r;
        for a in 0..3 {
            jtr[a] += row[a] * res;
            for b in 0..3 {
                jtj[a][b] += row[a] * row[b];
            }
        }
    }
    if let Some(step) = solve3(jtj, jtr) {
        c = c - Vec2::new(step[0], step[1]);
        r -= step[2];
    }
    (c, r)
}

fn solve3(a: [[f64; 3]; 3], b: [f64; 3]) -> Option<[f64; 3]> {
    let det3 = |m: [[f64; 3]; 3]| {
        m[0][0] * (m[1][1] * m[2][2] - m[1][2] * m[2][1])
            - m[0][1] * (m[1][0] * m[2][2] - m[1][2] * m[2][0])
            + m[0][2] * (m[1][0] * m[2][1] - m[1][1] * m[2][0])
    };
    let d = det3(a);
    if !(d.abs() > 1e-300) {
        return None;
    }
    let mut out = [0.0; 3];
    for (col, o) in out.iter_mut().enumerate() {
        let mut m = a;
        for row in 0..3 {
            m[row][col] = b[row];
        }
        *o = det3(m) / d;
    }
    Some(out)
}

pub fn unwrap_angles(angles: impl IntoIterator<Item = f64>) -> Vec<f64> {
    let mut out: Vec<f64> = Vec::new();
    for a in angles {
        match out.last() {
            None => out.push(a),
            Some(&prev) => {
                let step = (a - prev + std::f64::consts::PI).rem_euclid(TAU) - std::f64::consts::PI;
                out.push(prev + step);
            }
        }
    }
    out
}

fn slope(x: &[f64], y: &[f64]) -> f64 {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let sxy: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
    let sxx: f64 = x.iter().map(|a| (a - mx) * (a - mx)).sum();
    sxy / sxx
}

/// Total signed angle swept by `u_d - u_ec` of driver `j` for node times in `[from, to]`.
pub fn winding_angle(traj: &Trajectory, j: usize, from: f64, to: f64) -> f64 {
    let angles = unwrap_angles(
        traj.states()
            .filter(|s| s.t >= from && s.t <= to)
            .map(|s| (s.driver_pos(j) - s.barycenter()).angle()),
    );
    match (angles.first(), angles.last()) {
        (Some(a), Some(b)) => b - a,
        _ => 0.0,
    }
}

/// Which dissipation identity to check.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
#[serde(tag = "mode", rename_all = "snake_case")]
pub enum DissipationMode {
    /// `kappa_p = 1`, `kappa_c = 0`: the energy must not increase.
    Pursuit,
    /// `kappa_p = 1`, constant `kappa_c`: the Lyapunov function must not increase.
    Circumvention { kappa_c: f64 },
    /// Both gains off: the driver speed decays like `exp(-nu t)`.
    Release,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DissipationReport {
    pub mode: DissipationMode,
    /// Largest single-step increase of the monitored functional (pursuit and
    /// circumvention), or largest deviation from the closed form (release).
    pub max_violation: f64,
    pub values: Vec<f64>,
}

/// Evaluates the functional matching `mode` along a trajectory.
pub fn check_dissipation(
    traj: &Trajectory,
    model: &Model,
    mode: DissipationMode,
) -> Result<DissipationReport> {
    let layout = traj.layout();
    let (want_kp, want_kc) = match mode {
        DissipationMode::Pursuit => (1.0, 0.0),
        DissipationMode::Circumvention { kappa_c } => (1.0, kappa_c),
        DissipationMode::Release => (0.0, 0.0),
    };
    for k in 0..traj.len() {
        if traj
            .controls(k)
            .iter()
            .any(|c| c.kp != want_kp || c.kc != want_kc)
        {
            return Err(HerdError::Usage(format!(
                "trajectory controls at t = {} do not match the {mode:?} mode",
                traj.times()[k]
            )));
        }
    }
    if mode == DissipationMode::Release {
        if layout.drivers != 1 {
            return Err(HerdError::Usage(
                "release check needs a single driver".into(),
            ));
        }
        let nu = model.friction.nu_d[0];
        let s0 = traj.state(0).driver_vel(0).norm();
        let values: Vec<f64> = traj.states().map(|s| s.driver_vel(0).norm()).collect();
        let max_violation = traj
            .states()
            .zip(&values)
            .map(|(s, v)| (v - s0 * (-nu * (s.t - traj.times()[0])).exp()).abs())
            .fold(0.0, f64::max);
        return Ok(DissipationReport {
            mode,
            max_violation,
            values,
        });
    }
    if layout.drivers != 1 || layout.evaders != 1 {
        return Err(HerdError::Usage(
            "energy checks need exactly one driver and one evader".into(),
        ));
    }
    let nu = model.friction.common().ok_or(HerdError::UnequalFriction)?;
    let potential = model.kernels.potential_fn()?;
    let values: Vec<f64> = traj
        .states()
        .map(|s| lyapunov_with(RelativeState::of(&s), want_kc, nu, &potential))
        .collect();
    let max_violation = values.windows(2).map(|w| w[1] - w[0]).fold(0.0, f64::max);
    Ok(DissipationReport {
        mode,
        max_violation,
        values,
    })
}

/// Observed RK4 order from runs with `n`, `2n` and `4n` steps.
pub fn convergence_order(
    initial: &SystemState,
    schedule: &ControlSchedule,
    bounds: &ControlBounds,
    model: &Model,
    t_f: f64,
    n: usize,
) -> Result<f64> {
    let end = |steps: usize| -> Result<Vec<f64>> {
        let mut src = Scheduled::new(schedule, *bounds);
        Ok(integrate(initial, &mut src, model, t_f, steps)?
            .final_state()
            .into_flat())
    };
    let (a, b, c) = (end(n)?, end(2 * n)?, end(4 * n)?);
    let diff = |x: &[f64], y: &[f64]| {
        x.iter()
            .zip(y)
            .map(|(p, q)| (p - q).abs())
            .fold(0.0, f64::max)
    };
    Ok((diff(&a, &b) / diff(&b, &c)).log2())
}
