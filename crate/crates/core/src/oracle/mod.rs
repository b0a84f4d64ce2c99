//! Perfect-knowledge scheduling: the full-horizon LP and its replay policy.

mod simplex;
mod vertex;

use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use simplex::{solve, solve_with, LinearProgram, LpSolution, LpStatus, SimplexError, SimplexOptions};
pub use vertex::enumerate_vertices;

use crate::env::{EnvError, Scenario};
use crate::policies::{Observation, Policy, PolicyError};

/// Aggregate rows are tightened by this much so solver round-off never
/// shows up as a simulated violation.
const AGGREGATE_MARGIN_KW: f64 = 1e-7;
/// Powers below this are treated as exactly zero.
const POWER_CLEAN_KW: f64 = 1e-9;

#[derive(Debug, Error)]
pub enum OracleError {
    #[error(transparent)]
    Simplex(#[from] SimplexError),
    #[error("LP finished with status {0:?}")]
    Status(LpStatus),
    #[error(transparent)]
    Scenario(#[from] EnvError),
    #[error("schedule for `{schedule}` does not fit scenario `{scenario}`")]
    Mismatch { schedule: String, scenario: String },
    #[error("{path}: {msg}")]
    File { path: String, msg: String },
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct OracleWeights {
    /// € per kWh of unmet departure energy.
    pub slack_price: f64,
    /// € per kW of gross throughput; discourages simultaneous charge and discharge.
    pub simultaneity: f64,
}

impl Default for OracleWeights {
    fn default() -> Self {
        Self { slack_price: 1e3, simultaneity: 1e-6 }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum VarName {
    Charge { charger: usize, step: usize },
    Discharge { charger: usize, step: usize },
    Slack { ev: usize },
}

#[derive(Clone, Debug)]
struct EvBlock {
    arrival: usize,
    steps: usize,
    first: usize,
    slack: usize,
}

/// An LP together with the meaning of its columns.
#[derive(Clone, Debug)]
pub struct ScenarioLp {
    pub lp: LinearProgram,
    pub names: Vec<VarName>,
    blocks: Vec<EvBlock>,
}

impl ScenarioLp {
    pub fn charge_var(&self, ev: usize, step: usize) -> Option<usize> {
        let b = &self.blocks[ev];
        (b.arrival..b.arrival + b.steps).contains(&step).then(|| b.first + 2 * (step - b.arrival))
    }

    pub fn slack_var(&self, ev: usize) -> usize {
        self.blocks[ev].slack
    }
}

/// Builds the LP with state of charge eliminated through cumulative sums.
pub fn build_lp(scenario: &Scenario, weights: &OracleWeights) -> Result<ScenarioLp, OracleError> {
    scenario.validate()?;
    let dt = scenario.step_duration;
    let mut lp = LinearProgram::new();
    let mut names = Vec::new();
    let mut blocks = Vec::with_capacity(scenario.sessions.len());
    for ev in &scenario.sessions {
        let ch = &scenario.chargers[ev.charger_id];
        let first = lp.num_vars();
        for t in ev.arrival_step..ev.departure_step {
            let price = scenario.prices[t] * dt;
            lp.add_var(price + weights.simultaneity, 0.0, ch.max_charge_power);
            lp.add_var(-price + weights.simultaneity, 0.0, ch.max_discharge_power);
            names.push(VarName::Charge { charger: ev.charger_id, step: t });
            names.push(VarName::Discharge { charger: ev.charger_id, step: t });
        }
        blocks.push(EvBlock { arrival: ev.arrival_step, steps: ev.connected_steps(), first, slack: 0 });
    }
    for (e, ev) in scenario.sessions.iter().enumerate() {
        blocks[e].slack = lp.add_var(weights.slack_price, 0.0, f64::INFINITY);
        names.push(VarName::Slack { ev: ev.id });
    }

    for (e, ev) in scenario.sessions.iter().enumerate() {
        let ch = &scenario.chargers[ev.charger_id];
        let gain = dt * ch.efficiency_charge;
        let loss = dt / ch.efficiency_discharge;
        let first = blocks[e].first;
        let mut cum: Vec<(usize, f64)> = Vec::new();
        for k in 0..blocks[e].steps {
            cum.push((first + 2 * k, gain));
            cum.push((first + 2 * k + 1, -loss));
            let n = (k + 1) as f64;
            if ev.initial_soc + gain * ch.max_charge_power * n > ev.battery_capacity {
                lp.add_row(cum.clone(), ev.battery_capacity - ev.initial_soc);
            }
            if ev.initial_soc - loss * ch.max_discharge_power * n < ev.min_soc {
                lp.add_row(negated(&cum), ev.initial_soc - ev.min_soc);
            }
        }
        let mut dep = negated(&cum);
        dep.push((blocks[e].slack, -1.0));
        lp.add_row(dep, ev.initial_soc - ev.desired_energy_at_departure);
    }

    for t in 0..scenario.horizon {
        let mut row = Vec::new();
        for (e, b) in blocks.iter().enumerate() {
            if scenario.sessions[e].is_connected_at(t) {
                let j = b.first + 2 * (t - b.arrival);
                row.push((j, 1.0));
                row.push((j + 1, -1.0));
            }
        }
        if row.is_empty() {
            continue;
        }
        let limit = scenario.power_limits[t];
        let rhs = limit - AGGREGATE_MARGIN_KW.min(0.5 * limit);
        lp.add_row(row.clone(), rhs);
        lp.add_row(negated(&row), rhs);
    }
    Ok(ScenarioLp { lp, names, blocks })
}

fn negated(row: &[(usize, f64)]) -> Vec<(usize, f64)> {
    row.iter().map(|&(j, a)| (j, -a)).collect()
}

/// Solved schedule plus the LP's own state trajectory.
#[derive(Clone, Debug, PartialEq)]
pub struct OraclePlan {
    /// `actions[t][c]` in `[-1, 1]`.
    pub actions: Vec<Vec<f64>>,
    /// Net grid power per step and charger, kW.
    pub power: Vec<Vec<f64>>,
    /// Per session, state of charge after each connected step.
    pub soc: Vec<Vec<f64>>,
    /// Per session unmet energy, kWh.
    pub unmet: Vec<f64>,
    pub objective: f64,
    pub iterations: usize,
}

pub fn solve_scenario(scenario: &Scenario, weights: &OracleWeights) -> Result<OraclePlan, OracleError> {
    let built = build_lp(scenario, weights)?;
    let sol = solve(&built.lp)?;
    if sol.status != LpStatus::Optimal {
        return Err(OracleError::Status(sol.status));
    }
    let clean = |v: f64, hi: f64| if v < POWER_CLEAN_KW { 0.0 } else { v.min(hi) };
    let n = scenario.chargers.len();
    let mut actions = vec![vec![0.0; n]; scenario.horizon];
    let mut power = vec![vec![0.0; n]; scenario.horizon];
    let mut soc = Vec::with_capacity(scenario.sessions.len());
    let mut unmet = Vec::with_capacity(scenario.sessions.len());
    let dt = scenario.step_duration;
    for (e, ev) in scenario.sessions.iter().enumerate() {
        let ch = &scenario.chargers[ev.charger_id];
        let b = &built.blocks[e];
        let mut level = ev.initial_soc;
        let mut trace = Vec::with_capacity(b.steps);
        for k in 0..b.steps {
            let plus = clean(sol.x[b.first + 2 * k], ch.max_charge_power);
            let minus = clean(sol.x[b.first + 2 * k + 1], ch.max_discharge_power);
            let t = b.arrival + k;
            let p = plus - minus;
            power[t][ev.charger_id] = p;
            let a = if p >= 0.0 { p / ch.max_charge_power } else { p / ch.max_discharge_power };
            actions[t][ev.charger_id] = a.clamp(-1.0, 1.0);
            level += dt * (ch.efficiency_charge * plus - minus / ch.efficiency_discharge);
            trace.push(level);
        }
        soc.push(trace);
        unmet.push(sol.x[b.slack].max(0.0));
    }
    Ok(OraclePlan { actions, power, soc, unmet, objective: sol.objective, iterations: sol.iterations })
}

/// Per-step action vectors as stored on disk.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Schedule {
    pub scenario_id: String,
    pub objective: f64,
    pub actions: Vec<Vec<f64>>,
}

impl Schedule {
    pub fn from_plan(scenario: &Scenario, plan: &OraclePlan) -> Self {
        Self { scenario_id: scenario.id.clone(), objective: plan.objective, actions: plan.actions.clone() }
    }

    pub fn save(&self, path: &Path) -> Result<(), OracleError> {
        let text = serde_json::to_string_pretty(self).expect("schedule serializes");
        std::fs::write(path, text).map_err(|e| file_error(path, e))
    }

    pub fn load(path: &Path) -> Result<Self, OracleError> {
        let text = std::fs::read_to_string(path).map_err(|e| file_error(path, e))?;
        serde_json::from_str(&text).map_err(|e| file_error(path, e))
    }
}

fn file_error(path: &Path, e: impl std::fmt::Display) -> OracleError {
    OracleError::File { path: path.display().to_string(), msg: e.to_string() }
}

/// Solves on `reset`, then replays the schedule step by step.
#[derive(Clone, Debug, Default)]
pub struct OraclePolicy {
    pub weights: OracleWeights,
    fixed: Option<Schedule>,
    actions: Option<Vec<Vec<f64>>>,
}

impl OraclePolicy {
    pub fn new(weights: OracleWeights) -> Self {
        Self { weights, fixed: None, actions: None }
    }

    /// Replays a stored schedule instead of solving.
    pub fn from_schedule(schedule: Schedule) -> Self {
        Self { weights: OracleWeights::default(), fixed: Some(schedule), actions: None }
    }
}

impl Policy for OraclePolicy {
    fn name(&self) -> &'static str {
        "oracle"
    }

    fn reset(&mut self, scenario: &Scenario) -> Result<(), PolicyError> {
        let actions = match &self.fixed {
            Some(s) => {
                let fits = s.actions.len() == scenario.horizon && s.actions.iter().all(|a| a.len() == scenario.chargers.len());
                if !fits || s.scenario_id != scenario.id {
                    let err = OracleError::Mismatch { schedule: s.scenario_id.clone(), scenario: scenario.id.clone() };
                    return Err(PolicyError::backend("oracle", err));
                }
                s.actions.clone()
            }
            None => solve_scenario(scenario, &self.weights).map_err(|e| PolicyError::backend("oracle", e))?.actions,
        };
        self.actions = Some(actions);
        Ok(())
    }

    fn act(&mut self, obs: &Observation<'_>) -> Result<Vec<f64>, PolicyError> {
        let actions = self.actions.as_ref().ok_or(PolicyError::NotReady { policy: "oracle" })?;
        Ok(actions[obs.view.t()].clone())
    }
}
