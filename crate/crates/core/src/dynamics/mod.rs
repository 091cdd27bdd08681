//! Equations of motion for drivers and evaders, and a fixed-step integrator.

mod integrator;
mod state;
mod trajectory;

use serde::{Deserialize, Serialize};

pub use integrator::{
    integrate, integrate_on_grid, integrate_until, rk4_step, uniform_grid, ControlSource,
    Rk4Workspace,
};
pub use state::{AgentState, FrictionParams, Layout, StateView, SystemState};
pub use trajectory::Trajectory;

use crate::error::{HerdError, Result};
use crate::kernels::KernelSet;
use crate::vec2::Vec2;
use state::{add_to, get, set};

/// Distance below which a driver and an evader are treated as coincident.
pub const SINGULARITY_DISTANCE: f64 = 1e-6;

/// Pursuit and circumvention gains of one driver.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct DriverControl {
    pub kp: f64,
    pub kc: f64,
}

impl DriverControl {
    pub const OFF: DriverControl = DriverControl { kp: 0.0, kc: 0.0 };

    pub fn new(kp: f64, kc: f64) -> Self {
        Self { kp, kc }
    }

    pub fn lerp(a: Self, b: Self, w: f64) -> Self {
        Self {
            kp: a.kp + w * (b.kp - a.kp),
            kc: a.kc + w * (b.kc - a.kc),
        }
    }
}

/// Sign in front of the evader-evader interaction sum.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PsiESign {
    /// `+ (1/N) Σ ψ_e (u_ek - u_ei)`: evaders attract each other at long range.
    #[default]
    Attractive,
    /// The opposite sign.
    Displayed,
}

impl PsiESign {
    pub fn factor(self) -> f64 {
        match self {
            PsiESign::Attractive => 1.0,
            PsiESign::Displayed => -1.0,
        }
    }
}

/// Accelerations of every agent, plus the velocities they come from.
#[derive(Debug, Clone, PartialEq)]
pub struct Derivative {
    pub driver_vel: Vec<Vec2>,
    pub driver_acc: Vec<Vec2>,
    pub evader_vel: Vec<Vec2>,
    pub evader_acc: Vec<Vec2>,
}

/// Kernels, friction and sign conventions that define the vector field.
#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub kernels: KernelSet,
    pub friction: FrictionParams,
    pub psi_e_sign: PsiESign,
}

impl Model {
    pub fn new(kernels: KernelSet, friction: FrictionParams) -> Self {
        Self {
            kernels,
            friction,
            psi_e_sign: PsiESign::default(),
        }
    }

    /// Default kernels with the same friction for every agent.
    pub fn uniform(layout: Layout, nu: f64) -> Self {
        Self::new(KernelSet::default(), FrictionParams::uniform(layout, nu))
    }

    /// Writes `dx/dt` into `out`.
    pub fn rhs_into(
        &self,
        t: f64,
        layout: Layout,
        x: &[f64],
        controls: &[DriverControl],
        out: &mut [f64],
    ) -> Result<()> {
        let (m, n) = (layout.drivers, layout.evaders);
        let k = &self.kernels;
        let half = layout.half();
        out[..half].copy_from_slice(&x[half..]);

        let mut center = Vec2::ZERO;
        for i in 0..n {
            center += get(x, layout.evader_pos(i));
        }
        center = center / n as f64;
        let inv_m = 1.0 / m as f64;
        let inv_n = 1.0 / n as f64;

        for j in 0..m {
            let uj = get(x, layout.driver_pos(j));
            let d = uj - center;
            let ctl = controls[j];
            let mut acc = -ctl.kp * k.f_d.eval(d.norm()) * d + ctl.kc * d.perp()
                - self.friction.nu_d[j] * get(x, layout.driver_vel(j));
            for l in 0..m {
                if l != j {
                    let w = uj - get(x, layout.driver_pos(l));
                    acc += inv_m * k.psi_d.eval(w.norm()) * w;
                }
            }
            set(out, layout.driver_vel(j), acc);
        }

        let sign = self.psi_e_sign.factor();
        for i in 0..n {
            let ui = get(x, layout.evader_pos(i));
            let mut acc = -self.friction.nu_e[i] * get(x, layout.evader_vel(i));
            for j in 0..m {
                let w = get(x, layout.driver_pos(j)) - ui;
                let r = w.norm();
                if !(r >= SINGULARITY_DISTANCE) {
                    return Err(HerdError::Singularity {
                        driver: j,
                        evader: i,
                        distance: r,
                        t,
                    });
                }
                acc -= inv_m * k.f_e.eval(r) * w;
            }
            for kk in 0..n {
                if kk != i {
                    let w = get(x, layout.evader_pos(kk)) - ui;
                    acc += sign * inv_n * k.psi_e.eval(w.norm()) * w;
                }
            }
            set(out, layout.evader_vel(i), acc);
        }
        Ok(())
    }

    /// Velocities and accelerations of every agent.
    pub fn rhs_general(
        &self,
        state: &SystemState,
        controls: &[DriverControl],
    ) -> Result<Derivative> {
        let layout = state.layout();
        self.check_shapes(layout, controls)?;
        let mut out = vec![0.0; layout.dim()];
        self.rhs_into(state.t, layout, state.as_slice(), controls, &mut out)?;
        let pick = |idx: fn(&Layout, usize) -> usize, count: usize| -> Vec<Vec2> {
            (0..count).map(|a| get(&out, idx(&layout, a))).collect()
        };
        Ok(Derivative {
            driver_vel: pick(Layout::driver_pos, layout.drivers),
            driver_acc: pick(Layout::driver_vel, layout.drivers),
            evader_vel: pick(Layout::evader_pos, layout.evaders),
            evader_acc: pick(Layout::evader_vel, layout.evaders),
        })
    }

    pub(crate) fn check_shapes(&self, layout: Layout, controls: &[DriverControl]) -> Result<()> {
        if controls.len() != layout.drivers {
            return Err(HerdError::Validation(format!(
                "{} control pairs supplied for {} drivers",
                controls.len(),
                layout.drivers
            )));
        }
        self.friction.validate(layout)
    }

    /// Adds the vector-Jacobian product of [`Model::rhs_into`] at `x` to `x_bar`
    /// and `ctrl_bar`, for the output cotangent `cot`.
    pub fn rhs_vjp(
        &self,
        layout: Layout,
        x: &[f64],
        controls: &[DriverControl],
        cot: &[f64],
        x_bar: &mut [f64],
        ctrl_bar: &mut [DriverControl],
    ) {
        let (m, n) = (layout.drivers, layout.evaders);
        let k = &self.kernels;
        let half = layout.half();
        for (xb, c) in x_bar[half..].iter_mut().zip(&cot[..half]) {
            *xb += c;
        }

        let mut center = Vec2::ZERO;
        for i in 0..n {
            center += get(x, layout.evader_pos(i));
        }
        center = center / n as f64;
        let inv_m = 1.0 / m as f64;
        let inv_n = 1.0 / n as f64;

        for j in 0..m {
            let c = get(cot, layout.driver_vel(j));
            let uj = get(x, layout.driver_pos(j));
            let d = uj - center;
            let ctl = controls[j];
            let fd = k.f_d.eval(d.norm());
            let mut d_bar = -ctl.kp * radial_vjp(fd, k.f_d.deriv(d.norm()), d, c);
            d_bar += ctl.kc * Vec2::new(c.y, -c.x);
            ctrl_bar[j].kp += c.dot(-fd * d);
            ctrl_bar[j].kc += c.dot(d.perp());
            add_to(x_bar, layout.driver_pos(j), d_bar);
            for i in 0..n {
                add_to(x_bar, layout.evader_pos(i), -inv_n * d_bar);
            }
            add_to(x_bar, layout.driver_vel(j), -self.friction.nu_d[j] * c);
            for l in 0..m {
                if l != j {
                    let w = uj - get(x, layout.driver_pos(l));
                    let r = w.norm();
                    let w_bar = inv_m * radial_vjp(k.psi_d.eval(r), k.psi_d.deriv(r), w, c);
                    add_to(x_bar, layout.driver_pos(j), w_bar);
                    add_to(x_bar, layout.driver_pos(l), -w_bar);
                }
            }
        }

        let sign = self.psi_e_sign.factor();
        for i in 0..n {
            let c = get(cot, layout.evader_vel(i));
            let ui = get(x, layout.evader_pos(i));
            add_to(x_bar, layout.evader_vel(i), -self.friction.nu_e[i] * c);
            for j in 0..m {
                let w = get(x, layout.driver_pos(j)) - ui;
                let r = w.norm();
                let w_bar = -inv_m * radial_vjp(k.f_e.eval(r), k.f_e.deriv(r), w, c);
                add_to(x_bar, layout.driver_pos(j), w_bar);
                add_to(x_bar, layout.evader_pos(i), -w_bar);
            }
            for kk in 0..n {
                if kk != i {
                    let w = get(x, layout.evader_pos(kk)) - ui;
                    let r = w.norm();
                    let w_bar = sign * inv_n * radial_vjp(k.psi_e.eval(r), k.psi_e.deriv(r), w, c);
                    add_to(x_bar, layout.evader_pos(kk), w_bar);
                    add_to(x_bar, layout.evader_pos(i), -w_bar);
                }
            }
        }
    }
}

/// Transpose-Jacobian of `w -> g(|w|) w` applied to `c`.
#[inline]
fn radial_vjp(g: f64, dg: f64, w: Vec2, c: Vec2) -> Vec2 {
    let r = w.norm();
    if r > 0.0 {
        g * c + (dg / r) * w.dot(c) * w
    } else {
        g * c
    }
}

/// Right-hand side of the relative equation for one driver and one evader with
/// equal friction: returns `(u', v')`.
pub fn rhs_relative(
    u: Vec2,
    v: Vec2,
    kp: f64,
    kc: f64,
    kernels: &KernelSet,
    nu: f64,
) -> Result<(Vec2, Vec2)> {
    let r = u.norm();
    if !(r >= SINGULARITY_DISTANCE) {
        return Err(HerdError::Singularity {
            driver: 0,
            evader: 0,
            distance: r,
            t: f64::NAN,
        });
    }
    let acc = -(kp * kernels.f_d.eval(r) - kernels.f_e.eval(r)) * u - nu * v + kc * u.perp();
    Ok((v, acc))
}
