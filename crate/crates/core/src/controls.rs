//! Control signals for the drivers: representations, bounds, and time scaling.

use serde::{Deserialize, Serialize};

use crate::dynamics::{AgentState, ControlSource, DriverControl, StateView};
use crate::error::{HerdError, Result};
use crate::feedback::{feedback_circumvention, FeedbackParams, HysteresisState};

/// Box constraints on the pursuit and circumvention gains.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ControlBounds {
    pub kp_min: f64,
    pub kp_max: f64,
    pub kc_min: f64,
    pub kc_max: f64,
}

impl Default for ControlBounds {
    fn default() -> Self {
        Self {
            kp_min: 0.0,
            kp_max: 1.0,
            kc_min: -5.0,
            kc_max: 5.0,
        }
    }
}

impl ControlBounds {
    pub fn validate(&self) -> Result<()> {
        let ok = |a: f64, b: f64| a.is_finite() && b.is_finite() && a <= b;
        if !ok(self.kp_min, self.kp_max) || !ok(self.kc_min, self.kc_max) {
            return Err(HerdError::Validation(
                "control bounds need finite min <= max for both gains".into(),
            ));
        }
        Ok(())
    }

    pub fn clamp(&self, c: DriverControl) -> DriverControl {
        DriverControl {
            kp: c.kp.clamp(self.kp_min, self.kp_max),
            kc: c.kc.clamp(self.kc_min, self.kc_max),
        }
    }

    pub fn contains(&self, c: DriverControl) -> bool {
        (self.kp_min..=self.kp_max).contains(&c.kp) && (self.kc_min..=self.kc_max).contains(&c.kc)
    }
}

/// Per-driver gains sampled on a time grid, linearly interpolated in between.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SampledGrid {
    pub times: Vec<f64>,
    /// `kp[j][k]` is the pursuit gain of driver `j` at node `k`.
    pub kp: Vec<Vec<f64>>,
    pub kc: Vec<Vec<f64>>,
}

impl SampledGrid {
    /// Constant gains on a uniform grid of `n_steps` steps over `[0, t_f]`.
    pub fn constant(t_f: f64, n_steps: usize, controls: &[DriverControl]) -> Self {
        let times = uniform_nodes(t_f, n_steps);
        let nodes = times.len();
        Self {
            kp: controls.iter().map(|c| vec![c.kp; nodes]).collect(),
            kc: controls.iter().map(|c| vec![c.kc; nodes]).collect(),
            times,
        }
    }

    /// Samples a state-independent schedule at the given node times.
    pub fn from_schedule(
        schedule: &ControlSchedule,
        times: Vec<f64>,
        drivers: usize,
        bounds: &ControlBounds,
    ) -> Result<Self> {
        let mut kp = vec![Vec::with_capacity(times.len()); drivers];
        let mut kc = vec![Vec::with_capacity(times.len()); drivers];
        let mut buf = vec![DriverControl::OFF; drivers];
        for &t in &times {
            schedule.sample_into(t, None, bounds, &mut buf)?;
            for (j, c) in buf.iter().enumerate() {
                kp[j].push(c.kp);
                kc[j].push(c.kc);
            }
        }
        Ok(Self { times, kp, kc })
    }

    pub fn drivers(&self) -> usize {
        self.kp.len()
    }

    pub fn nodes(&self) -> usize {
        self.times.len()
    }

    pub fn t_final(&self) -> f64 {
        *self.times.last().unwrap_or(&0.0)
    }

    pub fn node(&self, j: usize, k: usize) -> DriverControl {
        DriverControl::new(self.kp[j][k], self.kc[j][k])
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.times.len();
        if n < 2 {
            return Err(HerdError::Validation(
                "a sampled grid needs at least two nodes".into(),
            ));
        }
        if self.times.windows(2).any(|w| !(w[1] > w[0])) {
            return Err(HerdError::Validation(
                "sampled grid times must increase".into(),
            ));
        }
        if self.kp.len() != self.kc.len() || self.kp.is_empty() {
            return Err(HerdError::Validation(
                "sampled grid needs matching kp and kc lists for at least one driver".into(),
            ));
        }
        if self.kp.iter().chain(&self.kc).any(|row| row.len() != n) {
            return Err(HerdError::Validation(format!(
                "every sampled control row must have {n} nodes"
            )));
        }
        Ok(())
    }

    fn interpolate(&self, t: f64, out: &mut [DriverControl]) {
        let times = &self.times;
        let last = times.len() - 1;
        let (k, w) = if t <= times[0] {
            (0, 0.0)
        } else if t >= times[last] {
            (last - 1, 1.0)
        } else {
            let k = times.partition_point(|&s| s <= t) - 1;
            (k, (t - times[k]) / (times[k + 1] - times[k]))
        };
        for (j, o) in out.iter_mut().enumerate() {
            *o = DriverControl::lerp(self.node(j, k), self.node(j, k + 1), w);
        }
    }
}

/// Element-wise clamp of every node value.
pub fn project_bounds(grid: &SampledGrid, bounds: &ControlBounds) -> SampledGrid {
    let clamp_rows = |rows: &[Vec<f64>], lo: f64, hi: f64| -> Vec<Vec<f64>> {
        rows.iter()
            .map(|r| r.iter().map(|v| v.clamp(lo, hi)).collect())
            .collect()
    };
    SampledGrid {
        times: grid.times.clone(),
        kp: clamp_rows(&grid.kp, bounds.kp_min, bounds.kp_max),
        kc: clamp_rows(&grid.kc, bounds.kc_min, bounds.kc_max),
    }
}

/// A schedule that starts applying at `start`, in its own local time.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScheduleSegment {
    pub start: f64,
    pub schedule: ControlSchedule,
}

/// How the driver gains evolve over time.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ControlSchedule {
    Constant {
        drivers: Vec<DriverControl>,
    },
    /// `kc` is applied on the closed interval `[t1, t2]` and is zero elsewhere;
    /// `kp` is applied throughout.
    OffBangOff {
        t1: f64,
        t2: f64,
        drivers: Vec<DriverControl>,
    },
    SampledGrid(SampledGrid),
    /// Piecewise composition; each segment runs from its start until the next one.
    Sequence {
        segments: Vec<ScheduleSegment>,
    },
    Feedback(FeedbackParams),
}

impl ControlSchedule {
    pub fn constant(kp: f64, kc: f64, drivers: usize) -> Self {
        ControlSchedule::Constant {
            drivers: vec![DriverControl::new(kp, kc); drivers],
        }
    }

    pub fn off_bang_off(t1: f64, t2: f64, kp: f64, kc: f64) -> Self {
        ControlSchedule::OffBangOff {
            t1,
            t2,
            drivers: vec![DriverControl::new(kp, kc)],
        }
    }

    pub fn needs_state(&self) -> bool {
        match self {
            ControlSchedule::Feedback(_) => true,
            ControlSchedule::Sequence { segments } => {
                segments.iter().any(|s| s.schedule.needs_state())
            }
            _ => false,
        }
    }

    /// Number of drivers the schedule is written for, when it fixes one.
    pub fn drivers(&self) -> Option<usize> {
        match self {
            ControlSchedule::Constant { drivers } | ControlSchedule::OffBangOff { drivers, .. } => {
                Some(drivers.len())
            }
            ControlSchedule::SampledGrid(g) => Some(g.drivers()),
            ControlSchedule::Sequence { segments } => {
                segments.iter().find_map(|s| s.schedule.drivers())
            }
            ControlSchedule::Feedback(_) => None,
        }
    }

    pub fn validate(&self, drivers: usize, bounds: &ControlBounds) -> Result<()> {
        if let Some(m) = self.drivers() {
            if m != drivers {
                return Err(HerdError::Validation(format!(
                    "schedule is written for {m} drivers but the scenario has {drivers}"
                )));
            }
        }
        let in_bounds = |cs: &[DriverControl]| cs.iter().all(|c| bounds.contains(*c));
        match self {
            ControlSchedule::Constant { drivers } => {
                if !in_bounds(drivers) {
                    return Err(HerdError::Validation(
                        "constant control outside bounds".into(),
                    ));
                }
            }
            ControlSchedule::OffBangOff { t1, t2, drivers } => {
                if !(0.0 <= *t1 && t1 <= t2) {
                    return Err(HerdError::Validation(
                        "off-bang-off needs 0 <= t1 <= t2".into(),
                    ));
                }
                if !in_bounds(drivers) {
                    return Err(HerdError::Validation(
                        "off-bang-off gain outside bounds".into(),
                    ));
                }
            }
            ControlSchedule::SampledGrid(g) => {
                g.validate()?;
                if project_bounds(g, bounds) != *g {
                    return Err(HerdError::Validation(
                        "sampled control outside bounds".into(),
                    ));
                }
            }
            ControlSchedule::Sequence { segments } => {
                if segments.is_empty() {
                    return Err(HerdError::Validation(
                        "sequence needs at least one segment".into(),
                    ));
                }
                if segments.windows(2).any(|w| !(w[1].start > w[0].start)) {
                    return Err(HerdError::Validation(
                        "sequence segments must have increasing start times".into(),
                    ));
                }
                for s in segments {
                    s.schedule.validate(drivers, bounds)?;
                }
            }
            ControlSchedule::Feedback(p) => p.validate(bounds)?,
        }
        Ok(())
    }

    /// Gains at time `t`, clamped to `bounds`.
    pub fn sample(
        &self,
        t: f64,
        state: Option<StateView<'_>>,
        bounds: &ControlBounds,
        drivers: usize,
    ) -> Result<Vec<DriverControl>> {
        let mut out = vec![DriverControl::OFF; drivers];
        self.sample_into(t, state, bounds, &mut out)?;
        Ok(out)
    }

    pub fn sample_into(
        &self,
        t: f64,
        state: Option<StateView<'_>>,
        bounds: &ControlBounds,
        out: &mut [DriverControl],
    ) -> Result<()> {
        self.sample_raw(t, state, false, out)?;
        for c in out.iter_mut() {
            *c = bounds.clamp(*c);
        }
        Ok(())
    }

    fn sample_raw(
        &self,
        t: f64,
        state: Option<StateView<'_>>,
        stopped: bool,
        out: &mut [DriverControl],
    ) -> Result<()> {
        let check = |len: usize| {
            if len == out.len() {
                Ok(())
            } else {
                Err(HerdError::Validation(format!(
                    "schedule has {len} drivers, sampled for {}",
                    out.len()
                )))
            }
        };
        match self {
            ControlSchedule::Constant { drivers } => {
                check(drivers.len())?;
                out.copy_from_slice(drivers);
            }
            ControlSchedule::OffBangOff { t1, t2, drivers } => {
                check(drivers.len())?;
                let on = *t1 <= t && t <= *t2;
                for (o, d) in out.iter_mut().zip(drivers) {
                    *o = DriverControl::new(d.kp, if on { d.kc } else { 0.0 });
                }
            }
            ControlSchedule::SampledGrid(g) => {
                check(g.drivers())?;
                g.interpolate(t, out);
            }
            ControlSchedule::Sequence { segments } => {
                let idx = segments.partition_point(|s| s.start <= t);
                let seg = segments.get(idx.saturating_sub(1)).ok_or_else(|| {
                    HerdError::Validation("sequence needs at least one segment".into())
                })?;
                seg.schedule
                    .sample_raw(t - seg.start, state, stopped, out)?;
            }
            ControlSchedule::Feedback(p) => {
                let state = state.ok_or_else(|| {
                    HerdError::Usage("a feedback schedule needs the current state".into())
                })?;
                let center = state.barycenter();
                let kp = if stopped { 0.0 } else { 1.0 };
                for (j, o) in out.iter_mut().enumerate() {
                    let (kc, _) = feedback_circumvention(
                        center,
                        p.target,
                        state.driver_pos(j),
                        p.kappa_bar_c,
                    );
                    *o = DriverControl::new(kp, kc);
                }
            }
        }
        Ok(())
    }

    /// Wraps the schedule as a segment that starts at `start`.
    pub fn delayed(self, start: f64) -> ScheduleSegment {
        ScheduleSegment {
            start,
            schedule: self,
        }
    }
}

/// A schedule bound to control bounds, usable as an integration source.
///
/// Feedback schedules keep their pursuit hysteresis bit here, updated once per step.
#[derive(Debug, Clone)]
pub struct Scheduled<'a> {
    pub schedule: &'a ControlSchedule,
    pub bounds: ControlBounds,
    hysteresis: HysteresisState,
}

impl<'a> Scheduled<'a> {
    pub fn new(schedule: &'a ControlSchedule, bounds: ControlBounds) -> Self {
        Self {
            schedule,
            bounds,
            hysteresis: HysteresisState::default(),
        }
    }

    pub fn hysteresis(&self) -> HysteresisState {
        self.hysteresis
    }

    fn feedback_params(&self, t: f64) -> Option<&FeedbackParams> {
        match self.schedule {
            ControlSchedule::Feedback(p) => Some(p),
            ControlSchedule::Sequence { segments } => {
                let idx = segments.partition_point(|s| s.start <= t);
                match &segments.get(idx.saturating_sub(1))?.schedule {
                    ControlSchedule::Feedback(p) => Some(p),
                    _ => None,
                }
            }
            _ => None,
        }
    }
}

impl ControlSource for Scheduled<'_> {
    fn controls_at(&self, t: f64, state: StateView<'_>, out: &mut [DriverControl]) -> Result<()> {
        self.schedule
            .sample_raw(t, Some(state), self.hysteresis.stopped, out)?;
        for c in out.iter_mut() {
            *c = self.bounds.clamp(*c);
        }
        Ok(())
    }

    fn begin_step(&mut self, t: f64, state: StateView<'_>) {
        if let Some(p) = self.feedback_params(t).copied() {
            self.hysteresis.update(state.gathering_radius(), &p);
        }
    }
}

/// Piecewise-constant speed profile `T'(s)` on a uniform partition of `[0, 1]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TimeScaling {
    t_f: f64,
    profile: Vec<f64>,
}

impl TimeScaling {
    pub fn uniform(t_f: f64) -> Self {
        Self {
            t_f,
            profile: vec![t_f],
        }
    }

    /// Clamps the raw speeds to `[c1, c2]`, then rescales them so `T(1) = t_f`.
    pub fn new(t_f: f64, raw: &[f64], c1: f64, c2: f64) -> Result<Self> {
        if !(t_f > 0.0) || raw.is_empty() || !(c1 > 0.0 && c1 <= c2) {
            return Err(HerdError::Validation(
                "time scaling needs t_f > 0, a nonempty profile and 0 < C1 <= C2".into(),
            ));
        }
        let clamped: Vec<f64> = raw.iter().map(|w| w.clamp(c1, c2)).collect();
        let mean = clamped.iter().sum::<f64>() / clamped.len() as f64;
        Ok(Self {
            t_f,
            profile: clamped.iter().map(|w| w * t_f / mean).collect(),
        })
    }

    pub fn t_f(&self) -> f64 {
        self.t_f
    }

    pub fn profile(&self) -> &[f64] {
        &self.profile
    }

    fn segment_of_s(&self, s: f64) -> (usize, f64) {
        let n = self.profile.len();
        let x = (s.clamp(0.0, 1.0) * n as f64).min(n as f64);
        let seg = (x.floor() as usize).min(n - 1);
        (seg, x - seg as f64)
    }

    /// `T'(s)`.
    pub fn speed(&self, s: f64) -> f64 {
        self.profile[self.segment_of_s(s).0]
    }

    /// `T(s)`, the cumulative integral of the speed profile.
    pub fn t_of_s(&self, s: f64) -> f64 {
        let n = self.profile.len() as f64;
        let (seg, frac) = self.segment_of_s(s);
        let before: f64 = self.profile[..seg].iter().sum();
        (before + frac * self.profile[seg]) / n
    }

    /// `T^{-1}(t)`.
    pub fn s_of_t(&self, t: f64) -> f64 {
        let n = self.profile.len() as f64;
        let mut acc = 0.0;
        for (seg, w) in self.profile.iter().enumerate() {
            let len = w / n;
            if t <= acc + len || seg + 1 == self.profile.len() {
                let frac = ((t - acc) / len).clamp(0.0, 1.0);
                return (seg as f64 + frac) / n;
            }
            acc += len;
        }
        1.0
    }
}

/// Maps a schedule on `s in [0, 1]` to physical time: `kappa(T(s_k)) = kappa_bar(s_k)`.
pub fn rescale_time(grid: &SampledGrid, scaling: &TimeScaling) -> SampledGrid {
    SampledGrid {
        times: grid.times.iter().map(|&s| scaling.t_of_s(s)).collect(),
        kp: grid.kp.clone(),
        kc: grid.kc.clone(),
    }
}

pub(crate) fn uniform_nodes(t_f: f64, n_steps: usize) -> Vec<f64> {
    (0..=n_steps)
        .map(|k| {
            if k == n_steps {
                t_f
            } else {
                t_f * k as f64 / n_steps as f64
            }
        })
        .collect()
}
