use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::controllability::{ConstantSearch, ReachSpec, SearchBox};
use crate::controls::{ControlBounds, ControlSchedule, Scheduled};
use crate::dynamics::{
    integrate, FrictionParams, Layout, Model, PsiESign, SystemState, Trajectory,
    SINGULARITY_DISTANCE,
};
use crate::error::{HerdError, Result};
use crate::feedback::{FeedbackParams, StopRule};
use crate::kernels::KernelSet;
use crate::optimal_control::{
    build_initial_guess, CostKind, CostWeights, FinalTime, GuessKind, OcpProblem, SolverOptions,
};
use crate::vec2::Vec2;

/// One friction coefficient for every agent of a kind, or one per agent.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum PerAgent {
    Uniform(f64),
    List(Vec<f64>),
}

impl PerAgent {
    fn expand(&self, count: usize) -> Vec<f64> {
        match self {
            PerAgent::Uniform(v) => vec![*v; count],
            PerAgent::List(v) => v.clone(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSettings {
    #[serde(default)]
    pub kernels: KernelSet,
    #[serde(default)]
    pub psi_e_sign: PsiESign,
    pub nu_d: PerAgent,
    pub nu_e: PerAgent,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AgentInit {
    pub pos: Vec2,
    #[serde(default = "zero")]
    pub vel: Vec2,
}

fn zero() -> Vec2 {
    Vec2::ZERO
}

/// Evaders drawn uniformly from the box `[min, max]` with a recorded seed.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RandomEvaders {
    pub count: usize,
    pub min: Vec2,
    pub max: Vec2,
    pub seed: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct IntegratorSettings {
    pub t_f: f64,
    pub n_steps: usize,
}

/// Settings for the point and waypoint searches. The target comes from the scenario.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ReachSettings {
    pub kappa_c: f64,
    pub kappa_p: f64,
    pub t1: f64,
    pub retry_t1: bool,
    pub both_signs: bool,
    pub tolerance: f64,
    pub search: Option<SearchBox>,
    pub grid: usize,
    pub refine_budget: usize,
    pub dt: f64,
    pub waypoints: Vec<Vec2>,
    pub constant: ConstantSearch,
}

impl Default for ReachSettings {
    fn default() -> Self {
        let s = ReachSpec::new(Vec2::ZERO, 1.0);
        Self {
            kappa_c: s.kappa_c,
            kappa_p: s.kappa_p,
            t1: s.t1,
            retry_t1: s.retry_t1,
            both_signs: s.both_signs,
            tolerance: s.tolerance,
            search: s.search,
            grid: s.grid,
            refine_budget: s.refine_budget,
            dt: s.dt,
            waypoints: Vec::new(),
            constant: ConstantSearch::default(),
        }
    }
}

impl ReachSettings {
    pub fn spec(&self, target: Vec2) -> ReachSpec {
        ReachSpec {
            target,
            kappa_c: self.kappa_c,
            kappa_p: self.kappa_p,
            t1: self.t1,
            retry_t1: self.retry_t1,
            both_signs: self.both_signs,
            tolerance: self.tolerance,
            search: self.search,
            grid: self.grid,
            refine_budget: self.refine_budget,
            dt: self.dt,
            warm_start: None,
        }
    }
}

/// Where the optimizer starts.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum GuessSettings {
    Constant,
    /// Uses the `[reach]` settings.
    OffBangOff,
    Hand {
        t_f: f64,
        schedule: ControlSchedule,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OptimizeSettings {
    #[serde(default = "guidance")]
    pub cost: CostKind,
    #[serde(default)]
    pub weights: CostWeights,
    #[serde(default = "free_time")]
    pub final_time: FinalTime,
    #[serde(default)]
    pub optimize_kp: bool,
    /// Steps of the control grid; defaults to the integrator's.
    #[serde(default)]
    pub n_steps: Option<usize>,
    pub guess: GuessSettings,
    #[serde(default)]
    pub options: SolverOptions,
}

fn guidance() -> CostKind {
    CostKind::Guidance
}
fn free_time() -> FinalTime {
    FinalTime::Free
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FeedbackSettings {
    pub kappa_bar_c: f64,
    pub gather_on: f64,
    pub gather_off: f64,
    pub stop: StopRule,
}

impl Default for FeedbackSettings {
    fn default() -> Self {
        let p = FeedbackParams::new(Vec2::ZERO);
        Self {
            kappa_bar_c: p.kappa_bar_c,
            gather_on: p.gather_on,
            gather_off: p.gather_off,
            stop: StopRule::BarycenterWithin { radius: 0.05 },
        }
    }
}

impl FeedbackSettings {
    pub fn params(&self, target: Vec2) -> FeedbackParams {
        FeedbackParams {
            kappa_bar_c: self.kappa_bar_c,
            gather_on: self.gather_on,
            gather_off: self.gather_off,
            target,
        }
    }
}

/// A complete run description.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Scenario {
    #[serde(default)]
    pub name: String,
    #[serde(default)]
    pub description: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub target: Option<Vec2>,
    pub model: ModelSettings,
    #[serde(default)]
    pub drivers: Vec<AgentInit>,
    #[serde(default)]
    pub evaders: Vec<AgentInit>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub random_evaders: Option<RandomEvaders>,
    #[serde(default)]
    pub bounds: ControlBounds,
    pub integrator: IntegratorSettings,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub schedule: Option<ControlSchedule>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reach: Option<ReachSettings>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub optimize: Option<OptimizeSettings>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub feedback: Option<FeedbackSettings>,
}

/// Initial state and model resolved from a scenario.
#[derive(Debug, Clone)]
pub struct Setup {
    pub initial: SystemState,
    pub model: Model,
    pub seed: Option<u64>,
}

impl Scenario {
    /// Parses TOML, or JSON when `json` is set. `origin` names the source in errors.
    pub fn parse(text: &str, json: bool, origin: &str) -> Result<Self> {
        let scenario: Scenario = if json {
            serde_json::from_str(text).map_err(|e| HerdError::Parse {
                location: format!("{origin}:{}:{}", e.line(), e.column()),
                message: e.to_string(),
            })?
        } else {
            toml::from_str(text).map_err(|e| {
                let location = match e.span() {
                    Some(span) => {
                        let before = &text[..span.start.min(text.len())];
                        let line = before.matches('\n').count() + 1;
                        let col = span.start - before.rfind('\n').map_or(0, |i| i + 1) + 1;
                        format!("{origin}:{line}:{col}")
                    }
                    None => origin.to_string(),
                };
                HerdError::Parse {
                    location,
                    message: e.message().to_string(),
                }
            })?
        };
        scenario.validate()?;
        Ok(scenario)
    }

    /// The scenario with every default written out.
    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| HerdError::Parse {
            location: "echo".into(),
            message: e.to_string(),
        })
    }

    pub fn to_json(&self) -> Result<String> {
        serde_json::to_string_pretty(self).map_err(|e| HerdError::Parse {
            location: "echo".into(),
            message: e.to_string(),
        })
    }

    /// SHA-256 of the echoed TOML, in hex.
    pub fn hash(&self) -> Result<String> {
        let digest = Sha256::digest(self.to_toml()?.as_bytes());
        Ok(digest.iter().map(|b| format!("{b:02x}")).collect())
    }

    pub fn layout(&self) -> Layout {
        let random = self.random_evaders.map_or(0, |r| r.count);
        Layout::new(self.drivers.len(), self.evaders.len() + random)
    }

    /// Requires the scenario target, naming the command that needs it.
    pub fn require_target(&self, what: &str) -> Result<Vec2> {
        self.target
            .ok_or_else(|| HerdError::Validation(format!("{what} needs a target")))
    }

    fn evader_inits(&self) -> Vec<AgentInit> {
        let mut out = self.evaders.clone();
        if let Some(r) = self.random_evaders {
            let mut rng = ChaCha8Rng::seed_from_u64(r.seed);
            for _ in 0..r.count {
                let pos = Vec2::new(
                    rng.gen_range(r.min.x..r.max.x),
                    rng.gen_range(r.min.y..r.max.y),
                );
                out.push(AgentInit {
                    pos,
                    vel: Vec2::ZERO,
                });
            }
        }
        out
    }

    pub fn friction(&self) -> FrictionParams {
        let layout = self.layout();
        FrictionParams {
            nu_d: self.model.nu_d.expand(layout.drivers),
            nu_e: self.model.nu_e.expand(layout.evaders),
        }
    }

    pub fn build(&self) -> Result<Setup> {
        let evaders = self.evader_inits();
        let initial = SystemState::new(
            0.0,
            &self.drivers.iter().map(|a| a.pos).collect::<Vec<_>>(),
            &self.drivers.iter().map(|a| a.vel).collect::<Vec<_>>(),
            &evaders.iter().map(|a| a.pos).collect::<Vec<_>>(),
            &evaders.iter().map(|a| a.vel).collect::<Vec<_>>(),
        )?;
        let mut model = Model::new(self.model.kernels, self.friction());
        model.psi_e_sign = self.model.psi_e_sign;
        Ok(Setup {
            initial,
            model,
            seed: self.random_evaders.map(|r| r.seed),
        })
    }

    /// The `[schedule]`, or pure pursuit with `kappa_p = 1` for every driver.
    pub fn open_loop_schedule(&self) -> ControlSchedule {
        self.schedule
            .clone()
            .unwrap_or_else(|| ControlSchedule::constant(1.0, 0.0, self.drivers.len()))
    }

    /// Integrates the open-loop schedule over the integrator settings.
    pub fn simulate(&self) -> Result<(Setup, Trajectory)> {
        let setup = self.build()?;
        let schedule = self.open_loop_schedule();
        let mut source = Scheduled::new(&schedule, self.bounds);
        let traj = integrate(
            &setup.initial,
            &mut source,
            &setup.model,
            self.integrator.t_f,
            self.integrator.n_steps,
        )?;
        Ok((setup, traj))
    }

    /// `[reach]` settings, or their defaults.
    pub fn reach_settings(&self) -> ReachSettings {
        self.reach.clone().unwrap_or_default()
    }

    /// `[feedback]` settings, or their defaults.
    pub fn feedback_settings(&self) -> FeedbackSettings {
        self.feedback.unwrap_or_default()
    }

    /// The optimal control problem of the `[optimize]` section, with its initial guess built.
    pub fn ocp_problem(&self) -> Result<OcpProblem> {
        let o = self
            .optimize
            .as_ref()
            .ok_or_else(|| HerdError::Validation("scenario has no [optimize] section".into()))?;
        let target = self.require_target("optimize")?;
        let setup = self.build()?;
        let kind = match &o.guess {
            GuessSettings::Constant => GuessKind::Constant,
            GuessSettings::OffBangOff => GuessKind::OffBangOff(self.reach_settings().spec(target)),
            GuessSettings::Hand { t_f, schedule } => GuessKind::Hand {
                schedule: schedule.clone(),
                t_f: *t_f,
            },
        };
        let guess = build_initial_guess(&setup.initial, &setup.model, target, kind)?;
        Ok(OcpProblem {
            model: setup.model,
            initial: setup.initial,
            bounds: self.bounds,
            cost: o.cost,
            weights: o.weights,
            target,
            n_steps: o.n_steps.unwrap_or(self.integrator.n_steps),
            t_f: guess.t_f,
            final_time: o.final_time,
            optimize_kp: o.optimize_kp,
            initial_guess: guess.schedule,
            options: o.options,
        })
    }

    /// Re-checks every invariant of the parts.
    pub fn validate(&self) -> Result<()> {
        if self.drivers.is_empty() {
            return Err(HerdError::Validation(
                "a scenario needs at least one driver".into(),
            ));
        }
        if let Some(r) = &self.random_evaders {
            if r.count == 0 || !(r.min.x < r.max.x && r.min.y < r.max.y) {
                return Err(HerdError::Validation(
                    "random evaders need a positive count and a box with min < max".into(),
                ));
            }
        }
        if self.layout().evaders == 0 {
            return Err(HerdError::Validation(
                "a scenario needs at least one evader".into(),
            ));
        }
        let agents = self.drivers.iter().chain(&self.evaders);
        if agents
            .clone()
            .any(|a| !a.pos.is_finite() || !a.vel.is_finite())
        {
            return Err(HerdError::Validation(
                "agent positions and velocities must be finite".into(),
            ));
        }
        self.model.kernels.validate()?;
        let layout = self.layout();
        self.friction().validate(layout)?;
        self.bounds.validate()?;
        if !(self.integrator.t_f > 0.0 && self.integrator.t_f.is_finite())
            || self.integrator.n_steps == 0
        {
            return Err(HerdError::Validation(
                "integrator needs t_f > 0 and at least one step".into(),
            ));
        }
        if let Some(t) = self.target {
            if !t.is_finite() {
                return Err(HerdError::Validation("target must be finite".into()));
            }
        }
        let setup = self.build()?;
        if let Err(HerdError::Singularity { driver, evader, .. }) =
            setup.initial.check_nonsingular(SINGULARITY_DISTANCE)
        {
            return Err(HerdError::Validation(format!(
                "singular initial data: driver {driver} and evader {evader} coincide"
            )));
        }
        if let Some(s) = &self.schedule {
            s.validate(layout.drivers, &self.bounds)?;
        }
        if let Some(f) = &self.feedback {
            f.params(self.target.unwrap_or(Vec2::ZERO))
                .validate(&self.bounds)?;
        }
        if let Some(r) = &self.reach {
            if !(r.tolerance > 0.0) {
                return Err(HerdError::Validation("tolerance must be positive".into()));
            }
        }
        if let Some(o) = &self.optimize {
            o.weights.validate()?;
            if let GuessSettings::Hand { t_f, schedule } = &o.guess {
                if !(*t_f > 0.0) {
                    return Err(HerdError::Validation("hand guess needs t_f > 0".into()));
                }
                schedule.validate(layout.drivers, &self.bounds)?;
            }
        }
        Ok(())
    }
}

/// Reads and validates a scenario; `.json` files are read as JSON, anything else as TOML.
pub fn load_scenario(path: &Path) -> Result<Scenario> {
    let text = std::fs::read_to_string(path)?;
    let json = path
        .extension()
        .is_some_and(|e| e.eq_ignore_ascii_case("json"));
    Scenario::parse(&text, json, &path.display().to_string())
}
