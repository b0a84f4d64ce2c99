//! Discrete-time V2G charging environment.
//!
//! Each step applies one normalized action per charger, clips the
//! resulting power so every battery stays inside `[min_soc, capacity]`,
//! and reports the grid-side cash flow, the aggregate-limit violation and
//! the departures that happened at the end of the step.

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Energy slack under which a delivered amount counts as meeting its target.
pub const ENERGY_EPS: f64 = 1e-9;

const PENALTY_FLOOR: f64 = 1e-6;

#[derive(Debug, Error, PartialEq)]
pub enum EnvError {
    #[error("invalid scenario: {}", .0.join("; "))]
    InvalidScenario(Vec<String>),
    #[error("expected {expected} actions, got {got}")]
    ActionLength { expected: usize, got: usize },
    #[error("action {value} for charger {charger} is outside [-1, 1]")]
    ActionOutOfRange { charger: usize, value: f64 },
    #[error("episode is over (t = {0})")]
    EpisodeOver(usize),
    #[error("reward weights must be non-negative and finite, got {0:?}")]
    InvalidWeights(RewardWeights),
    #[error("non-finite reward component `{0}`")]
    NonFinite(&'static str),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ChargerSpec {
    pub id: usize,
    /// kW
    pub max_charge_power: f64,
    /// kW, magnitude
    pub max_discharge_power: f64,
    pub efficiency_charge: f64,
    pub efficiency_discharge: f64,
}

impl ChargerSpec {
    pub fn symmetric(id: usize, power: f64, efficiency: f64) -> Self {
        Self {
            id,
            max_charge_power: power,
            max_discharge_power: power,
            efficiency_charge: efficiency,
            efficiency_discharge: efficiency,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvSession {
    pub id: usize,
    pub charger_id: usize,
    pub arrival_step: usize,
    /// First step at which the EV is gone; it is connected for `arrival_step..departure_step`.
    pub departure_step: usize,
    /// kWh
    pub battery_capacity: f64,
    /// kWh
    pub initial_soc: f64,
    /// Target state of charge at departure, kWh.
    pub desired_energy_at_departure: f64,
    /// kWh
    pub min_soc: f64,
}

impl EvSession {
    pub fn connected_steps(&self) -> usize {
        self.departure_step - self.arrival_step
    }

    pub fn is_connected_at(&self, t: usize) -> bool {
        self.arrival_step <= t && t < self.departure_step
    }

    /// Highest state of charge reachable by departure when charging flat out.
    pub fn reachable_soc(&self, charger: &ChargerSpec, step_hours: f64) -> f64 {
        let gain = charger.efficiency_charge * charger.max_charge_power * step_hours * self.connected_steps() as f64;
        (self.initial_soc + gain).min(self.battery_capacity)
    }

    /// Whether the charger alone can meet the target within the connection window.
    pub fn demand_feasible(&self, charger: &ChargerSpec, step_hours: f64) -> bool {
        self.desired_energy_at_departure <= self.reachable_soc(charger, step_hours) + ENERGY_EPS
    }
}

/// Full episode specification.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Scenario {
    #[serde(default)]
    pub id: String,
    /// Number of steps T.
    pub horizon: usize,
    /// Step length in hours.
    pub step_duration: f64,
    pub chargers: Vec<ChargerSpec>,
    pub sessions: Vec<EvSession>,
    /// €/kWh, one per step.
    pub prices: Vec<f64>,
    /// kW, one per step.
    pub power_limits: Vec<f64>,
}

impl Scenario {
    pub fn empty(horizon: usize, step_duration: f64) -> Self {
        Self {
            id: String::new(),
            horizon,
            step_duration,
            chargers: vec![],
            sessions: vec![],
            prices: vec![0.0; horizon],
            power_limits: vec![0.0; horizon],
        }
    }

    /// Collects every invariant violation instead of stopping at the first.
    pub fn validate(&self) -> Result<(), EnvError> {
        let mut errs = Vec::new();
        if self.horizon == 0 {
            errs.push("horizon must be at least 1".to_string());
        }
        if !(self.step_duration > 0.0 && self.step_duration.is_finite()) {
            errs.push(format!("step_duration must be positive, got {}", self.step_duration));
        }
        if self.prices.len() != self.horizon {
            errs.push(format!("prices has {} entries, horizon is {}", self.prices.len(), self.horizon));
        }
        if self.power_limits.len() != self.horizon {
            errs.push(format!("power_limits has {} entries, horizon is {}", self.power_limits.len(), self.horizon));
        }
        if let Some((t, p)) = self.prices.iter().enumerate().find(|(_, p)| !p.is_finite()) {
            errs.push(format!("prices[{t}] = {p} is not finite"));
        }
        if let Some((t, l)) = self.power_limits.iter().enumerate().find(|(_, l)| !(l.is_finite() && **l >= 0.0)) {
            errs.push(format!("power_limits[{t}] = {l} must be finite and non-negative"));
        }
        for (i, c) in self.chargers.iter().enumerate() {
            if c.id != i {
                errs.push(format!("charger at position {i} has id {}", c.id));
            }
            if !(c.max_charge_power > 0.0 && c.max_discharge_power > 0.0) {
                errs.push(format!("charger {i}: max powers must be positive"));
            }
            for (name, eff) in [("efficiency_charge", c.efficiency_charge), ("efficiency_discharge", c.efficiency_discharge)] {
                if !(eff > 0.0 && eff <= 1.0) {
                    errs.push(format!("charger {i}: {name} = {eff} outside (0, 1]"));
                }
            }
        }
        let mut ids: Vec<usize> = self.sessions.iter().map(|s| s.id).collect();
        ids.sort_unstable();
        if ids.windows(2).any(|w| w[0] == w[1]) {
            errs.push("session ids are not unique".to_string());
        }
        for s in &self.sessions {
            let tag = format!("session {}", s.id);
            if s.charger_id >= self.chargers.len() {
                errs.push(format!("{tag}: unknown charger {}", s.charger_id));
            }
            if s.arrival_step >= s.departure_step {
                errs.push(format!("{tag}: arrival {} not before departure {}", s.arrival_step, s.departure_step));
            }
            if s.departure_step > self.horizon {
                errs.push(format!("{tag}: departure {} beyond horizon {}", s.departure_step, self.horizon));
            }
            if s.battery_capacity.is_nan() || s.battery_capacity <= 0.0 {
                errs.push(format!("{tag}: battery_capacity must be positive"));
            }
            if !(0.0 <= s.min_soc && s.min_soc <= s.initial_soc && s.initial_soc <= s.battery_capacity) {
                errs.push(format!(
                    "{tag}: need 0 <= min_soc ({}) <= initial_soc ({}) <= capacity ({})",
                    s.min_soc, s.initial_soc, s.battery_capacity
                ));
            }
            if !(0.0 <= s.desired_energy_at_departure && s.desired_energy_at_departure <= s.battery_capacity) {
                errs.push(format!("{tag}: desired energy {} outside [0, capacity]", s.desired_energy_at_departure));
            }
        }
        for c in 0..self.chargers.len() {
            let mut on: Vec<&EvSession> = self.sessions.iter().filter(|s| s.charger_id == c).collect();
            on.sort_by_key(|s| s.arrival_step);
            for w in on.windows(2) {
                if w[1].arrival_step < w[0].departure_step {
                    errs.push(format!("charger {c}: sessions {} and {} overlap", w[0].id, w[1].id));
                }
            }
        }
        if errs.is_empty() {
            Ok(())
        } else {
            Err(EnvError::InvalidScenario(errs))
        }
    }

    /// Sum of charger charge ratings, kW.
    pub fn station_capacity(&self) -> f64 {
        self.chargers.iter().map(|c| c.max_charge_power).sum()
    }

    /// Steps per 24 h, at least 1.
    pub fn steps_per_day(&self) -> usize {
        ((24.0 / self.step_duration).round() as usize).max(1)
    }

    /// Every EV's target is reachable on its own charger.
    pub fn demands_feasible(&self) -> bool {
        self.sessions
            .iter()
            .all(|s| s.demand_feasible(&self.chargers[s.charger_id], self.step_duration))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RewardWeights {
    /// € per kW of aggregate-limit excess.
    pub violation: f64,
    /// € per kWh of (squared, normalized) unmet departure energy.
    pub satisfaction: f64,
}

impl Default for RewardWeights {
    fn default() -> Self {
        Self { violation: 2.0, satisfaction: 5.0 }
    }
}

/// Realized departure record; `delivered` is the state of charge on leaving.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Departure {
    pub ev_id: usize,
    pub charger_id: usize,
    pub step: usize,
    pub delivered: f64,
    pub desired: f64,
}

impl Departure {
    pub fn shortfall(&self) -> f64 {
        (self.desired - self.delivered).max(0.0)
    }

    /// Percent of the target met, capped at 100.
    pub fn satisfaction(&self) -> f64 {
        if self.desired <= 0.0 || self.delivered + ENERGY_EPS >= self.desired {
            100.0
        } else {
            100.0 * (self.delivered / self.desired).clamp(0.0, 1.0)
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct EpisodeTotals {
    /// Grid-side kWh drawn.
    pub energy_charged: f64,
    /// Grid-side kWh returned.
    pub energy_discharged: f64,
    /// Sum over steps of kW above the limit.
    pub violation: f64,
    pub cash_flow: f64,
    pub reward: f64,
    pub departures: Vec<Departure>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EnvState {
    pub t: usize,
    /// Session index connected to each charger.
    pub occupancy: Vec<Option<usize>>,
    /// Per session, kWh. Holds `initial_soc` before arrival and the final value after departure.
    pub soc: Vec<f64>,
    /// Realized power of each charger's current EV on the previous step, kW.
    pub last_power: Vec<f64>,
    /// Per session grid-side kWh drawn and returned.
    pub energy_in: Vec<f64>,
    pub energy_out: Vec<f64>,
    pub totals: EpisodeTotals,
}

#[derive(Clone, Debug, PartialEq)]
pub struct StepOutcome {
    pub reward: f64,
    /// Realized grid-side power per charger, kW (negative = discharge).
    pub power: Vec<f64>,
    pub aggregate_power: f64,
    pub violation: f64,
    pub cash_flow: f64,
    pub departures: Vec<Departure>,
}

/// Reward components of one step.
#[derive(Clone, Debug, PartialEq)]
pub struct RewardInputs<'a> {
    pub cash_flow: f64,
    pub violation: f64,
    pub departures: &'a [Departure],
}

/// `cash - w_v * violation - w_s * sum(shortfall^2 / max(desired, eps))`
pub fn compute_reward(inputs: &RewardInputs<'_>, weights: &RewardWeights) -> Result<f64, EnvError> {
    let ok = |w: f64| w >= 0.0 && w.is_finite();
    if !ok(weights.violation) || !ok(weights.satisfaction) {
        return Err(EnvError::InvalidWeights(*weights));
    }
    if !inputs.cash_flow.is_finite() {
        return Err(EnvError::NonFinite("cash_flow"));
    }
    if !inputs.violation.is_finite() {
        return Err(EnvError::NonFinite("violation"));
    }
    let unmet: f64 = inputs
        .departures
        .iter()
        .map(|d| d.shortfall().powi(2) / d.desired.max(PENALTY_FLOOR))
        .sum();
    if !unmet.is_finite() {
        return Err(EnvError::NonFinite("departures"));
    }
    Ok(inputs.cash_flow - weights.violation * inputs.violation - weights.satisfaction * unmet)
}

/// A scenario bound to reward weights; `step` is a pure function of its inputs.
#[derive(Clone, Debug)]
pub struct Env {
    scenario: Scenario,
    weights: RewardWeights,
}

impl Env {
    pub fn new(scenario: Scenario, weights: RewardWeights) -> Result<Self, EnvError> {
        scenario.validate()?;
        if !(weights.violation >= 0.0 && weights.satisfaction >= 0.0) {
            return Err(EnvError::InvalidWeights(weights));
        }
        Ok(Self { scenario, weights })
    }

    pub fn scenario(&self) -> &Scenario {
        &self.scenario
    }

    pub fn weights(&self) -> &RewardWeights {
        &self.weights
    }

    pub fn horizon(&self) -> usize {
        self.scenario.horizon
    }

    pub fn num_chargers(&self) -> usize {
        self.scenario.chargers.len()
    }

    pub fn reset(&self) -> EnvState {
        let n = self.scenario.chargers.len();
        let mut occupancy = vec![None; n];
        for (i, s) in self.scenario.sessions.iter().enumerate() {
            if s.arrival_step == 0 {
                occupancy[s.charger_id] = Some(i);
            }
        }
        let m = self.scenario.sessions.len();
        EnvState {
            t: 0,
            occupancy,
            soc: self.scenario.sessions.iter().map(|s| s.initial_soc).collect(),
            last_power: vec![0.0; n],
            energy_in: vec![0.0; m],
            energy_out: vec![0.0; m],
            totals: EpisodeTotals::default(),
        }
    }

    pub fn is_done(&self, state: &EnvState) -> bool {
        state.t >= self.scenario.horizon
    }

    pub fn step(&self, state: &EnvState, actions: &[f64]) -> Result<(EnvState, StepOutcome), EnvError> {
        let sc = &self.scenario;
        if state.t >= sc.horizon {
            return Err(EnvError::EpisodeOver(state.t));
        }
        if actions.len() != sc.chargers.len() {
            return Err(EnvError::ActionLength { expected: sc.chargers.len(), got: actions.len() });
        }
        if let Some((charger, &value)) = actions.iter().enumerate().find(|(_, a)| !(-1.0..=1.0).contains(*a)) {
            return Err(EnvError::ActionOutOfRange { charger, value });
        }
        let dt = sc.step_duration;
        let t = state.t;
        let mut next = state.clone();
        let mut power = vec![0.0; sc.chargers.len()];
        for (c, charger) in sc.chargers.iter().enumerate() {
            let Some(e) = state.occupancy[c] else { continue };
            let ev = &sc.sessions[e];
            let soc = state.soc[e];
            let a = actions[c];
            if a >= 0.0 {
                let headroom = ((ev.battery_capacity - soc) / (charger.efficiency_charge * dt)).max(0.0);
                let p = (a * charger.max_charge_power).min(headroom);
                next.soc[e] = (soc + charger.efficiency_charge * p * dt).min(ev.battery_capacity);
                next.energy_in[e] += p * dt;
                power[c] = p;
            } else {
                let room = ((soc - ev.min_soc) * charger.efficiency_discharge / dt).max(0.0);
                let p = (-a * charger.max_discharge_power).min(room);
                next.soc[e] = (soc - p * dt / charger.efficiency_discharge).max(ev.min_soc);
                next.energy_out[e] += p * dt;
                power[c] = -p;
            }
        }
        let aggregate: f64 = power.iter().sum();
        let violation = (aggregate.abs() - sc.power_limits[t]).max(0.0);
        let cash_flow = -sc.prices[t] * dt * aggregate;

        next.t = t + 1;
        next.last_power = power.clone();
        let mut departures = Vec::new();
        for c in 0..sc.chargers.len() {
            if let Some(e) = next.occupancy[c] {
                let ev = &sc.sessions[e];
                if ev.departure_step == next.t {
                    departures.push(Departure {
                        ev_id: ev.id,
                        charger_id: c,
                        step: next.t,
                        delivered: next.soc[e],
                        desired: ev.desired_energy_at_departure,
                    });
                    next.occupancy[c] = None;
                    next.last_power[c] = 0.0;
                }
            }
        }
        if next.t < sc.horizon {
            for (i, s) in sc.sessions.iter().enumerate() {
                if s.arrival_step == next.t {
                    next.occupancy[s.charger_id] = Some(i);
                    next.last_power[s.charger_id] = 0.0;
                }
            }
        }
        let reward = compute_reward(&RewardInputs { cash_flow, violation, departures: &departures }, &self.weights)?;

        let tot = &mut next.totals;
        tot.energy_charged += power.iter().filter(|p| **p > 0.0).sum::<f64>() * dt;
        tot.energy_discharged += power.iter().filter(|p| **p < 0.0).map(|p| -p).sum::<f64>() * dt;
        tot.violation += violation;
        tot.cash_flow += cash_flow;
        tot.reward += reward;
        tot.departures.extend(departures.iter().cloned());

        let outcome = StepOutcome { reward, power, aggregate_power: aggregate, violation, cash_flow, departures };
        Ok((next, outcome))
    }

    pub fn view<'a>(&'a self, state: &'a EnvState) -> StateView<'a> {
        StateView { scenario: &self.scenario, state }
    }

    pub fn observe(&self, state: &EnvState, layout: &ObservationLayout) -> Vec<f64> {
        self.view(state).features(layout)
    }
}

/// Read-only structured access to a state for heuristics.
#[derive(Clone, Copy, Debug)]
pub struct StateView<'a> {
    pub scenario: &'a Scenario,
    pub state: &'a EnvState,
}

impl<'a> StateView<'a> {
    pub fn t(&self) -> usize {
        self.state.t
    }

    pub fn num_chargers(&self) -> usize {
        self.scenario.chargers.len()
    }

    pub fn connected(&self, charger: usize) -> Option<&'a EvSession> {
        self.state.occupancy[charger].map(|e| &self.scenario.sessions[e])
    }

    pub fn soc_of(&self, charger: usize) -> Option<f64> {
        self.state.occupancy[charger].map(|e| self.state.soc[e])
    }

    /// Grid-side kWh still needed to reach the EV's target (0 when empty).
    pub fn remaining_grid_energy(&self, charger: usize) -> f64 {
        match (self.connected(charger), self.soc_of(charger)) {
            (Some(ev), Some(soc)) => {
                (ev.desired_energy_at_departure - soc).max(0.0) / self.scenario.chargers[charger].efficiency_charge
            }
            _ => 0.0,
        }
    }

    /// Current aggregate limit (0 after the horizon).
    pub fn power_limit(&self) -> f64 {
        self.scenario.power_limits.get(self.state.t).copied().unwrap_or(0.0)
    }

    pub fn features(&self, layout: &ObservationLayout) -> Vec<f64> {
        let sc = self.scenario;
        let t = self.state.t;
        let mut f = Vec::with_capacity(layout.dim());
        let spd = sc.steps_per_day();
        let angle = 2.0 * std::f64::consts::PI * (t % spd) as f64 / spd as f64;
        f.push(angle.sin());
        f.push(angle.cos());
        let price_ref = sc.prices.iter().map(|p| p.abs()).fold(0.0, f64::max);
        let price_ref = if price_ref > 0.0 { price_ref } else { 1.0 };
        let cap = sc.station_capacity();
        let cap = if cap > 0.0 { cap } else { 1.0 };
        for k in 0..layout.lookahead {
            f.push(sc.prices.get(t + k).map_or(0.0, |p| p / price_ref));
        }
        for k in 0..layout.lookahead {
            f.push(sc.power_limits.get(t + k).map_or(0.0, |l| l / cap));
        }
        f.push(self.state.last_power.iter().sum::<f64>() / cap);
        let power_ref = sc.chargers.iter().map(|c| c.max_charge_power.max(c.max_discharge_power)).fold(0.0, f64::max);
        for (c, charger) in sc.chargers.iter().enumerate().take(layout.chargers) {
            match self.connected(c) {
                Some(ev) => {
                    let soc = self.state.soc[self.state.occupancy[c].unwrap()];
                    let span = ev.connected_steps() as f64;
                    let p = self.state.last_power[c];
                    f.push(1.0);
                    f.push(soc / ev.battery_capacity);
                    f.push(ev.departure_step.saturating_sub(t + 1) as f64 / span);
                    f.push((ev.desired_energy_at_departure - soc).max(0.0) / ev.battery_capacity);
                    f.push(p.max(0.0) / charger.max_charge_power);
                    f.push((-p).max(0.0) / charger.max_discharge_power);
                }
                None => f.extend_from_slice(&[0.0; EV_FEATURES + 1]),
            }
            f.push(charger.max_charge_power / power_ref);
            f.push(charger.max_discharge_power / power_ref);
        }
        f.resize(layout.dim(), 0.0);
        f
    }
}

/// EV-derived features per charger block after the occupancy flag.
pub const EV_FEATURES: usize = 5;
/// Charger-static features per block.
pub const CHARGER_FEATURES: usize = 2;
/// Full per-charger block width: occupancy + EV features + static features.
pub const CHARGER_BLOCK: usize = 1 + EV_FEATURES + CHARGER_FEATURES;

/// Shape of the flat observation vector.
///
/// Layout: `[sin, cos, price x L, limit x L, utilization]` followed by one
/// block per charger: `[occupied, soc, time-to-departure, remaining demand,
/// charge ratio, discharge ratio, max charge, max discharge]`. EV fields
/// of an empty charger are zero.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ObservationLayout {
    pub chargers: usize,
    pub lookahead: usize,
}

impl ObservationLayout {
    pub const DEFAULT_LOOKAHEAD: usize = 8;

    pub fn new(chargers: usize, lookahead: usize) -> Self {
        Self { chargers, lookahead }
    }

    pub fn for_scenario(scenario: &Scenario) -> Self {
        Self::new(scenario.chargers.len(), Self::DEFAULT_LOOKAHEAD)
    }

    pub fn global_dim(&self) -> usize {
        3 + 2 * self.lookahead
    }

    pub fn dim(&self) -> usize {
        self.global_dim() + self.chargers * CHARGER_BLOCK
    }

    pub fn prices(&self) -> std::ops::Range<usize> {
        2..2 + self.lookahead
    }

    pub fn limits(&self) -> std::ops::Range<usize> {
        2 + self.lookahead..2 + 2 * self.lookahead
    }

    pub fn utilization(&self) -> usize {
        2 + 2 * self.lookahead
    }

    pub fn charger_block(&self, c: usize) -> std::ops::Range<usize> {
        let start = self.global_dim() + c * CHARGER_BLOCK;
        start..start + CHARGER_BLOCK
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn one_charger(power: f64, eff: f64) -> Scenario {
        Scenario {
            id: "t".into(),
            horizon: 4,
            step_duration: 0.25,
            chargers: vec![ChargerSpec::symmetric(0, power, eff)],
            sessions: vec![EvSession {
                id: 0,
                charger_id: 0,
                arrival_step: 0,
                departure_step: 4,
                battery_capacity: 60.0,
                initial_soc: 20.0,
                desired_energy_at_departure: 40.0,
                min_soc: 5.0,
            }],
            prices: vec![0.2; 4],
            power_limits: vec![100.0; 4],
        }
    }

    #[test]
    fn empty_scenario_resets_to_empty_occupancy() {
        let env = Env::new(Scenario::empty(96, 0.25), RewardWeights::default()).unwrap();
        let s = env.reset();
        assert_eq!(s.t, 0);
        assert!(s.occupancy.is_empty());
        assert_eq!(s.totals, EpisodeTotals::default());
    }

    #[test]
    fn ev_arriving_at_zero_is_connected_at_reset() {
        let env = Env::new(one_charger(22.0, 0.9), RewardWeights::default()).unwrap();
        let s = env.reset();
        assert_eq!(s.occupancy, vec![Some(0)]);
        assert_eq!(s.soc[0], 20.0);
    }

    #[test]
    fn overlapping_sessions_are_rejected_with_all_violations() {
        let mut sc = one_charger(22.0, 0.9);
        let mut second = sc.sessions[0].clone();
        second.id = 1;
        second.arrival_step = 2;
        sc.sessions.push(second);
        sc.prices.pop();
        match Env::new(sc, RewardWeights::default()) {
            Err(EnvError::InvalidScenario(v)) => {
                assert!(v.iter().any(|m| m.contains("overlap")), "{v:?}");
                assert!(v.iter().any(|m| m.contains("prices")), "{v:?}");
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn zero_actions_change_nothing() {
        let env = Env::new(one_charger(22.0, 0.9), RewardWeights::default()).unwrap();
        let s = env.reset();
        let (n, o) = env.step(&s, &[0.0]).unwrap();
        assert_eq!(n.soc, s.soc);
        assert_eq!(o.violation, 0.0);
        assert_eq!(o.cash_flow, 0.0);
    }

    #[test]
    fn full_charge_step_matches_hand_computation() {
        let env = Env::new(one_charger(22.0, 0.9), RewardWeights::default()).unwrap();
        let s = env.reset();
        let (n, o) = env.step(&s, &[1.0]).unwrap();
        assert!((n.soc[0] - 20.0 - 4.95).abs() < 1e-12);
        assert!((n.energy_in[0] - 5.5).abs() < 1e-12);
        assert!((o.cash_flow + 0.2 * 5.5).abs() < 1e-12);
    }

    #[test]
    fn two_full_chargers_over_limit_violate_by_excess() {
        let mut sc = one_charger(22.0, 0.9);
        sc.chargers.push(ChargerSpec::symmetric(1, 22.0, 0.9));
        let mut ev = sc.sessions[0].clone();
        ev.id = 1;
        ev.charger_id = 1;
        sc.sessions.push(ev);
        sc.power_limits = vec![30.0; 4];
        let env = Env::new(sc, RewardWeights::default()).unwrap();
        let (_, o) = env.step(&env.reset(), &[1.0, 1.0]).unwrap();
        assert!((o.violation - 14.0).abs() < 1e-12);
    }

    #[test]
    fn discharge_is_clipped_at_min_soc() {
        let mut sc = one_charger(100.0, 0.8);
        sc.sessions[0].initial_soc = 6.0;
        let env = Env::new(sc, RewardWeights::default()).unwrap();
        let (n, o) = env.step(&env.reset(), &[-1.0]).unwrap();
        assert!((n.soc[0] - 5.0).abs() < 1e-12);
        // 1 kWh leaves the battery, 0.8 kWh reaches the grid over 0.25 h.
        assert!((o.power[0] + 3.2).abs() < 1e-12);
    }

    #[test]
    fn invalid_actions_and_overrun_are_errors() {
        let env = Env::new(one_charger(22.0, 0.9), RewardWeights::default()).unwrap();
        let s = env.reset();
        assert!(matches!(env.step(&s, &[1.5]), Err(EnvError::ActionOutOfRange { .. })));
        assert!(matches!(env.step(&s, &[f64::NAN]), Err(EnvError::ActionOutOfRange { .. })));
        assert!(matches!(env.step(&s, &[]), Err(EnvError::ActionLength { .. })));
        let mut st = s;
        for _ in 0..4 {
            st = env.step(&st, &[0.0]).unwrap().0;
        }
        assert!(matches!(env.step(&st, &[0.0]), Err(EnvError::EpisodeOver(4))));
    }

    #[test]
    fn departure_is_recorded_and_charger_freed() {
        let env = Env::new(one_charger(22.0, 0.9), RewardWeights::default()).unwrap();
        let mut s = env.reset();
        let mut deps = vec![];
        for _ in 0..4 {
            let (n, o) = env.step(&s, &[1.0]).unwrap();
            deps.extend(o.departures);
            s = n;
        }
        assert_eq!(deps.len(), 1);
        assert_eq!(deps[0].step, 4);
        assert!((deps[0].delivered - 20.0 - 4.0 * 4.95).abs() < 1e-9);
        assert_eq!(s.occupancy, vec![None]);
    }

    #[test]
    fn reward_examples() {
        let w = RewardWeights::default();
        let r = compute_reward(&RewardInputs { cash_flow: -3.0, violation: 0.0, departures: &[] }, &w).unwrap();
        assert_eq!(r, -3.0);
        let r = compute_reward(&RewardInputs { cash_flow: 0.0, violation: 10.0, departures: &[] }, &w).unwrap();
        assert_eq!(r, -20.0);
        let d = Departure { ev_id: 0, charger_id: 0, step: 1, delivered: 8.0, desired: 10.0 };
        let r = compute_reward(&RewardInputs { cash_flow: 0.0, violation: 0.0, departures: &[d] }, &w).unwrap();
        assert!((r + 2.0).abs() < 1e-12);
        let bad = RewardWeights { violation: -1.0, satisfaction: 0.0 };
        assert!(compute_reward(&RewardInputs { cash_flow: 0.0, violation: 0.0, departures: &[] }, &bad).is_err());
    }

    #[test]
    fn observation_examples() {
        let mut sc = one_charger(22.0, 0.9);
        sc.horizon = 96;
        sc.prices = vec![0.1; 96];
        sc.power_limits = vec![50.0; 96];
        sc.chargers.push(ChargerSpec::symmetric(1, 11.0, 0.9));
        sc.sessions[0].initial_soc = 60.0;
        let env = Env::new(sc, RewardWeights::default()).unwrap();
        let layout = ObservationLayout::new(2, 4);
        let f = env.observe(&env.reset(), &layout);
        assert_eq!(f.len(), layout.dim());
        assert_eq!((f[0], f[1]), (0.0, 1.0));
        let occupied = &f[layout.charger_block(0)];
        assert_eq!(occupied[0], 1.0);
        assert_eq!(occupied[1], 1.0);
        let empty = &f[layout.charger_block(1)];
        assert!(empty[..1 + EV_FEATURES].iter().all(|v| *v == 0.0));
        assert_eq!(empty[1 + EV_FEATURES], 0.5);
    }

    #[test]
    fn time_to_departure_is_zero_on_last_step() {
        let env = Env::new(one_charger(22.0, 0.9), RewardWeights::default()).unwrap();
        let layout = ObservationLayout::new(1, 2);
        let mut s = env.reset();
        for _ in 0..3 {
            s = env.step(&s, &[0.0]).unwrap().0;
        }
        let f = env.observe(&s, &layout);
        assert_eq!(f[layout.charger_block(0)][2], 0.0);
    }

    proptest! {
        #[test]
        fn soc_bounds_and_energy_balance_hold(actions in prop::collection::vec(-1.0f64..=1.0, 4)) {
            let env = Env::new(one_charger(80.0, 0.85), RewardWeights::default()).unwrap();
            let mut s = env.reset();
            for a in &actions {
                s = env.step(&s, &[*a]).unwrap().0;
                let ev = &env.scenario().sessions[0];
                prop_assert!(s.soc[0] >= ev.min_soc && s.soc[0] <= ev.battery_capacity);
            }
            let balance = 20.0 + 0.85 * s.energy_in[0] - s.energy_out[0] / 0.85;
            prop_assert!((s.soc[0] - balance).abs() < 1e-9);
        }

        #[test]
        fn empty_chargers_draw_nothing(a in -1.0f64..=1.0) {
            let mut sc = one_charger(22.0, 0.9);
            sc.sessions.clear();
            let env = Env::new(sc, RewardWeights::default()).unwrap();
            let (_, o) = env.step(&env.reset(), &[a]).unwrap();
            prop_assert_eq!(o.power[0], 0.0);
            prop_assert_eq!(o.reward, 0.0);
        }
    }
}
