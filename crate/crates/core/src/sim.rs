//! Closed-loop unicycle episodes under the robust safety filter.

use std::io::Write;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::cbf::{
    barrier, lie_derivatives, nominal_controller, robust_constraints, trop_filter, wrap_angle,
    BarrierConfig, ControlInput, FilterOutcome, InputBox, NominalGains, Obstacle, RobustParams,
    UnicycleState,
};
use crate::error::{Error, Result};
use crate::rng::{stream_rng, Stream};
use crate::utility::Category;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DisturbanceKind {
    #[default]
    None,
    /// Magnitude `bound` along `-L_g h` of the closest true obstacle.
    WorstCase,
    /// Uniform in the disk of radius `bound`, redrawn every control period.
    BoundedNoise,
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct DisturbanceSpec {
    pub bound: f64,
    pub kind: DisturbanceKind,
}

impl DisturbanceSpec {
    pub fn none() -> Self {
        Self::default()
    }

    pub fn worst_case(bound: f64) -> Self {
        Self {
            bound,
            kind: DisturbanceKind::WorstCase,
        }
    }

    pub fn noise(bound: f64) -> Self {
        Self {
            bound,
            kind: DisturbanceKind::BoundedNoise,
        }
    }
}

/// Where the input box enters.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SaturationMode {
    /// Solve over the plane, then clamp.
    #[default]
    AfterSolve,
    /// Box constraints inside the program.
    InProgram,
    /// No box at all.
    Off,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimConfig {
    #[serde(default = "default_control_period")]
    pub control_period: f64,
    #[serde(default = "default_dt")]
    pub dt: f64,
    #[serde(default = "default_horizon")]
    pub horizon: f64,
    pub start: UnicycleState,
    pub goal: [f64; 2],
    #[serde(default = "default_goal_tolerance")]
    pub goal_tolerance: f64,
    #[serde(default)]
    pub disturbance: DisturbanceSpec,
    #[serde(default)]
    pub saturation: SaturationMode,
    #[serde(default)]
    pub input_box: InputBox,
}

fn default_control_period() -> f64 {
    0.05
}
fn default_dt() -> f64 {
    0.001
}
fn default_horizon() -> f64 {
    30.0
}
fn default_goal_tolerance() -> f64 {
    0.1
}

impl SimConfig {
    pub fn new(start: UnicycleState, goal: [f64; 2]) -> Self {
        Self {
            control_period: default_control_period(),
            dt: default_dt(),
            horizon: default_horizon(),
            start,
            goal,
            goal_tolerance: default_goal_tolerance(),
            disturbance: DisturbanceSpec::none(),
            saturation: SaturationMode::default(),
            input_box: InputBox::default(),
        }
    }

    fn substeps(&self) -> Result<usize> {
        if !(self.dt > 0.0) || !(self.control_period > 0.0) {
            return Err(Error::config(
                "dt",
                "dt and control_period must be positive",
            ));
        }
        let n = (self.control_period / self.dt).round();
        if n < 1.0 || (n * self.dt - self.control_period).abs() > 1e-9 * self.control_period {
            return Err(Error::config("dt", "must divide control_period"));
        }
        Ok(n as usize)
    }

    pub fn validate(&self) -> Result<()> {
        self.substeps()?;
        if !(self.horizon > 0.0) {
            return Err(Error::config("horizon", "must be positive"));
        }
        if !(self.goal_tolerance > 0.0) {
            return Err(Error::config("goal_tolerance", "must be positive"));
        }
        if !(self.disturbance.bound >= 0.0) || !self.disturbance.bound.is_finite() {
            return Err(Error::config(
                "disturbance.bound",
                "must be finite and non-negative",
            ));
        }
        let b = &self.input_box;
        if !(b.v[0] <= b.v[1]) || !(b.omega[0] <= b.omega[1]) {
            return Err(Error::config(
                "input_box",
                "lower bound exceeds upper bound",
            ));
        }
        Ok(())
    }
}

/// One control period of an episode.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RolloutStep {
    pub t: f64,
    pub state: UnicycleState,
    /// Filter output before saturation.
    pub command: ControlInput,
    /// Input entering the dynamics at the start of the period.
    pub applied: ControlInput,
    /// Smallest true barrier value over the period.
    #[serde(with = "inf_as_null")]
    pub min_h: f64,
    pub infeasible: bool,
    pub clamp_violation: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Rollout {
    pub steps: Vec<RolloutStep>,
    pub final_state: UnicycleState,
    pub final_time: f64,
    pub reached_goal: bool,
    pub time_to_goal: Option<f64>,
    pub infeasible_step_count: usize,
    pub clamp_violation_count: usize,
    /// `+inf` without obstacles.
    #[serde(with = "inf_as_null")]
    pub min_h: f64,
    pub path_length: f64,
    pub initial_goal_distance: f64,
    pub final_goal_distance: f64,
}

impl Rollout {
    pub fn progress(&self) -> f64 {
        if self.initial_goal_distance <= 0.0 {
            return 1.0;
        }
        1.0 - self.final_goal_distance / self.initial_goal_distance
    }

    pub fn write_csv<W: Write>(&self, mut w: W) -> Result<()> {
        writeln!(w, "t,x,y,psi,v_cmd,omega_cmd,min_h")?;
        for s in &self.steps {
            writeln!(
                w,
                "{},{},{},{},{},{},{}",
                s.t, s.state.x, s.state.y, s.state.psi, s.command.v, s.command.omega, s.min_h
            )?;
        }
        Ok(())
    }

    pub fn to_csv(&self) -> String {
        let mut buf = Vec::new();
        self.write_csv(&mut buf).expect("writing to memory");
        String::from_utf8(buf).expect("ascii output")
    }

    /// Reduced form for display: path polyline and outcome flags.
    pub fn compact(&self) -> CompactRollout {
        let mut path: Vec<[f64; 2]> = self.steps.iter().map(|s| [s.state.x, s.state.y]).collect();
        path.push([self.final_state.x, self.final_state.y]);
        CompactRollout {
            t: self.steps.iter().map(|s| s.t).collect(),
            path,
            min_h: self.min_h,
            reached_goal: self.reached_goal,
            infeasible_step_count: self.infeasible_step_count,
            time_to_goal: self.time_to_goal,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompactRollout {
    pub t: Vec<f64>,
    pub path: Vec<[f64; 2]>,
    #[serde(with = "inf_as_null")]
    pub min_h: f64,
    pub reached_goal: bool,
    pub infeasible_step_count: usize,
    pub time_to_goal: Option<f64>,
}

pub(crate) mod inf_as_null {
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(v: &f64, s: S) -> Result<S::Ok, S::Error> {
        if v.is_finite() {
            s.serialize_f64(*v)
        } else {
            s.serialize_none()
        }
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<f64, D::Error> {
        Ok(Option::<f64>::deserialize(d)?.unwrap_or(f64::INFINITY))
    }
}

fn min_true_h(state: &UnicycleState, env: &BarrierConfig) -> Result<f64> {
    env.obstacles.iter().try_fold(
        f64::INFINITY,
        |m, o| Ok(m.min(barrier(state, o, env.zeta)?)),
    )
}

fn nearest(state: &UnicycleState, obstacles: &[Obstacle], zeta: f64) -> Result<Option<Obstacle>> {
    let mut best: Option<(f64, Obstacle)> = None;
    for o in obstacles {
        let h = barrier(state, o, zeta)?;
        if best.is_none_or(|(b, _)| h < b) {
            best = Some((h, *o));
        }
    }
    Ok(best.map(|(_, o)| o))
}

fn dynamics(s: &UnicycleState, u: ControlInput) -> [f64; 3] {
    [u.v * s.psi.cos(), u.v * s.psi.sin(), u.omega]
}

fn rk4(s: &UnicycleState, u: ControlInput, dt: f64) -> UnicycleState {
    let add = |k: [f64; 3], h: f64| UnicycleState {
        x: s.x + h * k[0],
        y: s.y + h * k[1],
        psi: s.psi + h * k[2],
    };
    let k1 = dynamics(s, u);
    let k2 = dynamics(&add(k1, 0.5 * dt), u);
    let k3 = dynamics(&add(k2, 0.5 * dt), u);
    let k4 = dynamics(&add(k3, dt), u);
    let mut next = UnicycleState {
        x: s.x,
        y: s.y,
        psi: s.psi,
    };
    for i in 0..3 {
        let inc = dt / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]);
        match i {
            0 => next.x += inc,
            1 => next.y += inc,
            _ => next.psi += inc,
        }
    }
    next.psi = wrap_angle(next.psi);
    next
}

fn goal_distance(s: &UnicycleState, goal: [f64; 2]) -> f64 {
    (goal[0] - s.x).hypot(goal[1] - s.y)
}

/// Runs one episode. Deterministic in all arguments.
pub fn simulate(
    params: &RobustParams,
    env: &BarrierConfig,
    sim: &SimConfig,
    gains: &NominalGains,
    seed: u64,
) -> Result<Rollout> {
    params.validate()?;
    env.validate()?;
    sim.validate()?;
    let substeps = sim.substeps()?;
    let periods = (sim.horizon / sim.control_period).ceil() as usize;
    let bound = sim.disturbance.bound;

    let mut state = UnicycleState::new(sim.start.x, sim.start.y, sim.start.psi);
    let mut min_h = min_true_h(&state, env)?;
    if min_h <= 0.0 {
        return Err(Error::config(
            "start",
            "initial state must lie outside every obstacle",
        ));
    }
    let mut rng = stream_rng(seed, Stream::Disturbance, 0);
    let initial_goal_distance = goal_distance(&state, sim.goal);

    let mut steps = Vec::with_capacity(periods);
    let mut t = 0.0;
    let mut tick = 0usize;
    let mut path_length = 0.0;
    let mut reached_goal = initial_goal_distance < sim.goal_tolerance;
    let mut time_to_goal = reached_goal.then_some(0.0);
    let mut infeasible_step_count = 0;
    let mut clamp_violation_count = 0;

    while !reached_goal && tick < periods {
        let mut k_nom = nominal_controller(&state, sim.goal, gains);
        if sim.saturation != SaturationMode::Off {
            k_nom = sim.input_box.saturate(k_nom);
        }
        let in_program = (sim.saturation == SaturationMode::InProgram).then_some(&sim.input_box);
        let outcome = trop_filter(&state, &env.measured, env.zeta, params, k_nom, in_program)?;
        let (command, infeasible) = match outcome {
            FilterOutcome::Feasible { input, .. } => (input, false),
            FilterOutcome::Infeasible => (k_nom, true),
        };
        let input = match sim.saturation {
            SaturationMode::Off => command,
            _ => sim.input_box.saturate(command),
        };
        let clamp_violation = !infeasible
            && input != command
            && robust_constraints(&state, &env.measured, env.zeta, params)?
                .iter()
                .any(|c| c.slack(input.as_array()) < -1e-9);
        infeasible_step_count += infeasible as usize;
        clamp_violation_count += clamp_violation as usize;

        let noise = match sim.disturbance.kind {
            DisturbanceKind::BoundedNoise if bound > 0.0 => {
                let r = bound * rng.random::<f64>().sqrt();
                let a = rng.random_range(0.0..std::f64::consts::TAU);
                [r * a.cos(), r * a.sin()]
            }
            _ => [0.0, 0.0],
        };

        let t_start = t;
        let state_start = state;
        let mut step_min = f64::INFINITY;
        let mut first_applied = None;
        for j in 0..substeps {
            let d = match sim.disturbance.kind {
                DisturbanceKind::None => [0.0, 0.0],
                DisturbanceKind::BoundedNoise => noise,
                DisturbanceKind::WorstCase => match nearest(&state, &env.obstacles, env.zeta)? {
                    Some(o) if bound > 0.0 => {
                        let lg = lie_derivatives(&state, &o, env.zeta)?.lg;
                        let n = lg[0].hypot(lg[1]);
                        if n > 0.0 {
                            [-bound * lg[0] / n, -bound * lg[1] / n]
                        } else {
                            [0.0, 0.0]
                        }
                    }
                    _ => [0.0, 0.0],
                },
            };
            assert!(
                d[0].hypot(d[1]) <= bound * (1.0 + 1e-12),
                "disturbance exceeds its bound"
            );
            let u = ControlInput::new(input.v + d[0], input.omega + d[1]);
            first_applied.get_or_insert(u);
            let next = rk4(&state, u, sim.dt);
            path_length += (next.x - state.x).hypot(next.y - state.y);
            state = next;
            t = (tick * substeps + j + 1) as f64 * sim.dt;
            let h = min_true_h(&state, env)?;
            step_min = step_min.min(h);
            if goal_distance(&state, sim.goal) < sim.goal_tolerance {
                reached_goal = true;
                time_to_goal = Some(t);
                break;
            }
        }
        min_h = min_h.min(step_min);
        steps.push(RolloutStep {
            t: t_start,
            state: state_start,
            command,
            applied: first_applied.unwrap_or(input),
            min_h: step_min,
            infeasible,
            clamp_violation,
        });
        tick += 1;
    }

    Ok(Rollout {
        steps,
        final_state: state,
        final_time: t,
        reached_goal,
        time_to_goal,
        infeasible_step_count,
        clamp_violation_count,
        min_h,
        path_length,
        initial_goal_distance,
        final_goal_distance: goal_distance(&state, sim.goal),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SafetyRule {
    /// Episodes whose `min_h` falls below this are unsafe.
    pub min_h: f64,
    pub infeasible_is_unsafe: bool,
}

impl Default for SafetyRule {
    fn default() -> Self {
        Self {
            min_h: 0.0,
            infeasible_is_unsafe: true,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RolloutScore {
    pub reached_goal: bool,
    pub time_to_goal: Option<f64>,
    pub path_length: f64,
    pub progress: f64,
    pub suggested: Category,
}

pub fn score_rollout(r: &Rollout, rule: &SafetyRule) -> RolloutScore {
    let unsafe_ =
        r.min_h < rule.min_h || (rule.infeasible_is_unsafe && r.infeasible_step_count > 0);
    RolloutScore {
        reached_goal: r.reached_goal,
        time_to_goal: r.time_to_goal,
        path_length: r.path_length,
        progress: r.progress(),
        suggested: if unsafe_ {
            Category::Unsafe
        } else {
            Category::Safe
        },
    }
}

/// Environment as written in scenario and campaign files.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EnvironmentConfig {
    pub zeta: f64,
    pub obstacles: Vec<Obstacle>,
    #[serde(default)]
    pub measurement_shift: [f64; 2],
    /// Defaults to the norm of the shift.
    #[serde(default)]
    pub epsilon: Option<f64>,
}

impl EnvironmentConfig {
    pub fn barrier_config(&self) -> Result<BarrierConfig> {
        let mut cfg =
            BarrierConfig::with_shift(self.zeta, self.obstacles.clone(), self.measurement_shift)?;
        if let Some(eps) = self.epsilon {
            cfg.epsilon = eps;
            cfg.validate()?;
        }
        Ok(cfg)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Scenario {
    pub name: String,
    pub environment: EnvironmentConfig,
    pub sim: SimConfig,
    #[serde(default)]
    pub gains: NominalGains,
}

impl Scenario {
    /// Two obstacles flanking the straight line from start to a goal 3 m
    /// ahead, measured 0.1 m too far in -y.
    pub fn two_obstacles() -> Self {
        Self {
            name: "two-obstacles".into(),
            environment: EnvironmentConfig {
                zeta: 0.2,
                obstacles: vec![
                    Obstacle {
                        center: [1.5, 0.6],
                        radius: 0.5,
                    },
                    Obstacle {
                        center: [1.5, -0.6],
                        radius: 0.5,
                    },
                ],
                measurement_shift: [0.0, -0.1],
                epsilon: None,
            },
            sim: SimConfig::new(UnicycleState::new(0.0, 0.0, 0.0), [3.0, 0.0]),
            gains: NominalGains::default(),
        }
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let de = &mut serde_json::Deserializer::from_str(text);
        let s: Self = serde_path_to_error::deserialize(de)
            .map_err(|e| Error::config(e.path().to_string(), e.inner().to_string()))?;
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<()> {
        self.environment.barrier_config()?;
        self.sim.validate()
    }

    pub fn run(&self, params: &RobustParams, seed: u64) -> Result<Rollout> {
        simulate(
            params,
            &self.environment.barrier_config()?,
            &self.sim,
            &self.gains,
            seed,
        )
    }
}
