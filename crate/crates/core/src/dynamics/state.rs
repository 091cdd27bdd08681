use serde::{Deserialize, Serialize};

use crate::error::{HerdError, Result};
use crate::vec2::Vec2;

/// Index map of the flat state vector.
///
/// Positions come first (drivers, then evaders), then velocities in the same order,
/// so a state of `M` drivers and `N` evaders has `4 (M + N)` entries.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Layout {
    pub drivers: usize,
    pub evaders: usize,
}

impl Layout {
    pub fn new(drivers: usize, evaders: usize) -> Self {
        Self { drivers, evaders }
    }

    pub fn dim(&self) -> usize {
        4 * (self.drivers + self.evaders)
    }

    /// Number of position coordinates, which is also the offset of the velocity block.
    pub fn half(&self) -> usize {
        2 * (self.drivers + self.evaders)
    }

    #[inline]
    pub fn driver_pos(&self, j: usize) -> usize {
        2 * j
    }

    #[inline]
    pub fn evader_pos(&self, i: usize) -> usize {
        2 * (self.drivers + i)
    }

    #[inline]
    pub fn driver_vel(&self, j: usize) -> usize {
        self.half() + 2 * j
    }

    #[inline]
    pub fn evader_vel(&self, i: usize) -> usize {
        self.half() + 2 * (self.drivers + i)
    }
}

#[inline]
pub(crate) fn get(x: &[f64], at: usize) -> Vec2 {
    Vec2::new(x[at], x[at + 1])
}

#[inline]
pub(crate) fn add_to(x: &mut [f64], at: usize, v: Vec2) {
    x[at] += v.x;
    x[at + 1] += v.y;
}

#[inline]
pub(crate) fn set(x: &mut [f64], at: usize, v: Vec2) {
    x[at] = v.x;
    x[at + 1] = v.y;
}

/// Read access to agent positions and velocities in a flat state.
pub trait AgentState {
    fn layout(&self) -> Layout;
    fn data(&self) -> &[f64];

    fn driver_pos(&self, j: usize) -> Vec2 {
        get(self.data(), self.layout().driver_pos(j))
    }
    fn driver_vel(&self, j: usize) -> Vec2 {
        get(self.data(), self.layout().driver_vel(j))
    }
    fn evader_pos(&self, i: usize) -> Vec2 {
        get(self.data(), self.layout().evader_pos(i))
    }
    fn evader_vel(&self, i: usize) -> Vec2 {
        get(self.data(), self.layout().evader_vel(i))
    }

    /// Mean evader position `u_ec`.
    fn barycenter(&self) -> Vec2 {
        let n = self.layout().evaders;
        let mut c = Vec2::ZERO;
        for i in 0..n {
            c += self.evader_pos(i);
        }
        c / n as f64
    }

    /// `max_i |u_ei - u_ec|`.
    fn gathering_radius(&self) -> f64 {
        let c = self.barycenter();
        (0..self.layout().evaders)
            .map(|i| (self.evader_pos(i) - c).norm())
            .fold(0.0, f64::max)
    }

    /// Smallest driver-evader distance.
    fn min_driver_evader_distance(&self) -> f64 {
        let l = self.layout();
        let mut best = f64::INFINITY;
        for j in 0..l.drivers {
            for i in 0..l.evaders {
                best = best.min((self.driver_pos(j) - self.evader_pos(i)).norm());
            }
        }
        best
    }
}

/// Borrowed state at one instant.
#[derive(Debug, Clone, Copy)]
pub struct StateView<'a> {
    pub t: f64,
    pub layout: Layout,
    pub data: &'a [f64],
}

impl AgentState for StateView<'_> {
    fn layout(&self) -> Layout {
        self.layout
    }
    fn data(&self) -> &[f64] {
        self.data
    }
}

/// Positions and velocities of all agents at time `t`.
#[derive(Debug, Clone, PartialEq)]
pub struct SystemState {
    pub t: f64,
    layout: Layout,
    data: Vec<f64>,
}

impl AgentState for SystemState {
    fn layout(&self) -> Layout {
        self.layout
    }
    fn data(&self) -> &[f64] {
        &self.data
    }
}

impl SystemState {
    pub fn new(
        t: f64,
        driver_pos: &[Vec2],
        driver_vel: &[Vec2],
        evader_pos: &[Vec2],
        evader_vel: &[Vec2],
    ) -> Result<Self> {
        if driver_pos.is_empty() || evader_pos.is_empty() {
            return Err(HerdError::Validation(
                "at least one driver and one evader are required".into(),
            ));
        }
        if driver_vel.len() != driver_pos.len() || evader_vel.len() != evader_pos.len() {
            return Err(HerdError::Validation(
                "every agent needs both a position and a velocity".into(),
            ));
        }
        let layout = Layout::new(driver_pos.len(), evader_pos.len());
        let mut data = vec![0.0; layout.dim()];
        for (j, (p, v)) in driver_pos.iter().zip(driver_vel).enumerate() {
            set(&mut data, layout.driver_pos(j), *p);
            set(&mut data, layout.driver_vel(j), *v);
        }
        for (i, (p, v)) in evader_pos.iter().zip(evader_vel).enumerate() {
            set(&mut data, layout.evader_pos(i), *p);
            set(&mut data, layout.evader_vel(i), *v);
        }
        let state = Self { t, layout, data };
        if !state.data.iter().all(|x| x.is_finite()) {
            return Err(HerdError::Validation(
                "state coordinates must be finite".into(),
            ));
        }
        Ok(state)
    }

    /// All agents at rest.
    pub fn at_rest(t: f64, driver_pos: &[Vec2], evader_pos: &[Vec2]) -> Result<Self> {
        Self::new(
            t,
            driver_pos,
            &vec![Vec2::ZERO; driver_pos.len()],
            evader_pos,
            &vec![Vec2::ZERO; evader_pos.len()],
        )
    }

    pub fn from_flat(t: f64, layout: Layout, data: Vec<f64>) -> Result<Self> {
        if data.len() != layout.dim() {
            return Err(HerdError::Validation(format!(
                "state vector has {} entries, expected {}",
                data.len(),
                layout.dim()
            )));
        }
        Ok(Self { t, layout, data })
    }

    pub fn view(&self) -> StateView<'_> {
        StateView {
            t: self.t,
            layout: self.layout,
            data: &self.data,
        }
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_flat(self) -> Vec<f64> {
        self.data
    }

    pub fn driver_positions(&self) -> Vec<Vec2> {
        (0..self.layout.drivers)
            .map(|j| self.driver_pos(j))
            .collect()
    }

    pub fn evader_positions(&self) -> Vec<Vec2> {
        (0..self.layout.evaders)
            .map(|i| self.evader_pos(i))
            .collect()
    }

    /// Errors when a driver sits on an evader (`f_e` is singular there).
    pub fn check_nonsingular(&self, min_distance: f64) -> Result<()> {
        for j in 0..self.layout.drivers {
            for i in 0..self.layout.evaders {
                let d = (self.driver_pos(j) - self.evader_pos(i)).norm();
                if !(d >= min_distance) {
                    return Err(HerdError::Singularity {
                        driver: j,
                        evader: i,
                        distance: d,
                        t: self.t,
                    });
                }
            }
        }
        Ok(())
    }

    /// Shift every position by `offset`.
    pub fn translated(&self, offset: Vec2) -> Self {
        let mut out = self.clone();
        let l = self.layout;
        for j in 0..l.drivers {
            add_to(&mut out.data, l.driver_pos(j), offset);
        }
        for i in 0..l.evaders {
            add_to(&mut out.data, l.evader_pos(i), offset);
        }
        out
    }

    /// Reflect positions and velocities across the x-axis.
    pub fn mirrored(&self) -> Self {
        let mut out = self.clone();
        for k in (1..out.data.len()).step_by(2) {
            out.data[k] = -out.data[k];
        }
        out
    }
}

/// Friction coefficients per agent.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrictionParams {
    pub nu_d: Vec<f64>,
    pub nu_e: Vec<f64>,
}

impl FrictionParams {
    pub fn uniform(layout: Layout, nu: f64) -> Self {
        Self {
            nu_d: vec![nu; layout.drivers],
            nu_e: vec![nu; layout.evaders],
        }
    }

    pub fn equal_friction(&self) -> bool {
        self.common().is_some()
    }

    /// The shared coefficient when every agent has the same friction.
    pub fn common(&self) -> Option<f64> {
        let first = *self.nu_d.first().or(self.nu_e.first())?;
        self.nu_d
            .iter()
            .chain(&self.nu_e)
            .all(|&nu| nu == first)
            .then_some(first)
    }

    pub fn validate(&self, layout: Layout) -> Result<()> {
        if self.nu_d.len() != layout.drivers || self.nu_e.len() != layout.evaders {
            return Err(HerdError::Validation(format!(
                "friction lists have {}/{} entries for {}/{} drivers/evaders",
                self.nu_d.len(),
                self.nu_e.len(),
                layout.drivers,
                layout.evaders
            )));
        }
        if self
            .nu_d
            .iter()
            .chain(&self.nu_e)
            .any(|&nu| !(nu > 0.0 && nu.is_finite()))
        {
            return Err(HerdError::Validation("friction must be positive".into()));
        }
        Ok(())
    }
}

impl StateView<'_> {
    pub fn to_owned_state(&self) -> SystemState {
        SystemState {
            t: self.t,
            layout: self.layout,
            data: self.data.to_vec(),
        }
    }
}
