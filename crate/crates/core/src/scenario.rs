//! Seeded synthetic scenarios and their JSON persistence.

use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Poisson};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::env::{ChargerSpec, Env, EnvError, EvSession, RewardWeights, Scenario};
use crate::policies::Cafap;

/// Headroom added above the CAFAP aggregate when limits are lifted.
const GRID_MARGIN_KW: f64 = 1e-6;
const PRICE_FLOOR: f64 = 0.01;

#[derive(Debug, Error)]
pub enum ScenarioError {
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("{path}: line {line}, column {column}: {msg}")]
    Parse { path: PathBuf, line: usize, column: usize, msg: String },
    #[error(transparent)]
    Invalid(#[from] EnvError),
    #[error("generator config: {0}")]
    Config(String),
}

/// How much of the generated demand is guaranteed to be servable.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Feasibility {
    /// Targets and limits as drawn.
    Unconstrained,
    /// Targets clamped to what each charger can deliver on its own.
    #[default]
    Demands,
    /// As `Demands`, and each limit is lifted to admit the CAFAP schedule.
    Grid,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GeneratorConfig {
    pub chargers: usize,
    pub horizon: usize,
    pub step_duration: f64,
    /// Expected arrivals per hour of day, station-wide; 24 entries.
    pub arrival_rates: Vec<f64>,
    pub sojourn_min_steps: usize,
    pub sojourn_max_steps: usize,
    pub capacity_min: f64,
    pub capacity_max: f64,
    /// Fractions of capacity.
    pub initial_soc_min: f64,
    pub initial_soc_max: f64,
    pub desired_soc_min: f64,
    pub desired_soc_max: f64,
    pub min_soc: f64,
    pub charge_power: f64,
    pub discharge_power: f64,
    pub efficiency_charge: f64,
    pub efficiency_discharge: f64,
    /// €/kWh
    pub price_base: f64,
    pub price_amplitude: f64,
    /// Hour of day at which the sinusoid peaks.
    pub price_peak_hour: f64,
    pub price_noise: f64,
    /// kW
    pub limit_base: f64,
    pub limit_dip_depth: f64,
    pub limit_dip_start_hour: f64,
    pub limit_dip_end_hour: f64,
    pub feasibility: Feasibility,
    pub seed: u64,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        let mut arrival_rates = vec![0.1; 24];
        for (h, r) in arrival_rates.iter_mut().enumerate() {
            *r = match h {
                6..=9 => 2.0,
                10..=15 => 0.8,
                16..=19 => 1.2,
                20..=22 => 0.4,
                _ => 0.1,
            };
        }
        Self {
            chargers: 5,
            horizon: 96,
            step_duration: 0.25,
            arrival_rates,
            sojourn_min_steps: 8,
            sojourn_max_steps: 40,
            capacity_min: 40.0,
            capacity_max: 80.0,
            initial_soc_min: 0.2,
            initial_soc_max: 0.5,
            desired_soc_min: 0.6,
            desired_soc_max: 0.9,
            min_soc: 0.1,
            charge_power: 22.0,
            discharge_power: 22.0,
            efficiency_charge: 0.9,
            efficiency_discharge: 0.9,
            price_base: 0.25,
            price_amplitude: 0.1,
            price_peak_hour: 18.0,
            price_noise: 0.02,
            limit_base: 60.0,
            limit_dip_depth: 30.0,
            limit_dip_start_hour: 11.0,
            limit_dip_end_hour: 15.0,
            feasibility: Feasibility::Demands,
            seed: 0,
        }
    }
}

impl GeneratorConfig {
    pub fn with_seed(&self, seed: u64) -> Self {
        Self { seed, ..self.clone() }
    }

    pub fn validate(&self) -> Result<(), ScenarioError> {
        let mut errs = Vec::new();
        let mut need = |ok: bool, msg: &str| {
            if !ok {
                errs.push(msg.to_string());
            }
        };
        need(self.horizon >= 1, "horizon must be at least 1");
        need(self.step_duration > 0.0, "step_duration must be positive");
        need(self.arrival_rates.len() == 24, "arrival_rates needs 24 hourly entries");
        need(self.arrival_rates.iter().all(|r| *r >= 0.0 && r.is_finite()), "arrival_rates must be non-negative");
        let arrivals = self.arrival_rates.iter().any(|r| *r > 0.0);
        need(self.chargers > 0 || !arrivals, "zero chargers with a nonzero arrival rate");
        need(1 <= self.sojourn_min_steps && self.sojourn_min_steps <= self.sojourn_max_steps, "need 1 <= sojourn_min_steps <= sojourn_max_steps");
        need(0.0 < self.capacity_min && self.capacity_min <= self.capacity_max, "need 0 < capacity_min <= capacity_max");
        let frac = |a: f64, b: f64| 0.0 <= a && a <= b && b <= 1.0;
        need(frac(self.initial_soc_min, self.initial_soc_max), "initial soc bounds must satisfy 0 <= min <= max <= 1");
        need(frac(self.desired_soc_min, self.desired_soc_max), "desired soc bounds must satisfy 0 <= min <= max <= 1");
        need((0.0..=1.0).contains(&self.min_soc), "min_soc must lie in [0, 1]");
        need(self.charge_power > 0.0 && self.discharge_power > 0.0, "charger powers must be positive");
        let eff = |e: f64| e > 0.0 && e <= 1.0;
        need(eff(self.efficiency_charge) && eff(self.efficiency_discharge), "efficiencies must lie in (0, 1]");
        need(self.price_noise >= 0.0, "price_noise must be non-negative");
        need(self.limit_base >= 0.0 && self.limit_dip_depth >= 0.0, "limit parameters must be non-negative");
        need(self.limit_dip_start_hour <= self.limit_dip_end_hour, "dip window must be ordered");
        if errs.is_empty() {
            Ok(())
        } else {
            Err(ScenarioError::Config(errs.join("; ")))
        }
    }

    pub fn load(path: &Path) -> Result<Self, ScenarioError> {
        let text = read(path)?;
        let cfg: Self = parse(path, &text)?;
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Generated {
    pub scenario: Scenario,
    /// Arrivals that found every charger busy.
    pub dropped: usize,
}

pub fn generate(config: &GeneratorConfig) -> Result<Scenario, ScenarioError> {
    generate_with_stats(config).map(|g| g.scenario)
}

pub fn generate_with_stats(cfg: &GeneratorConfig) -> Result<Generated, ScenarioError> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let dt = cfg.step_duration;
    let t_max = cfg.horizon;
    let hour_of = |t: usize| (t as f64 * dt) % 24.0;

    let chargers: Vec<ChargerSpec> = (0..cfg.chargers)
        .map(|id| ChargerSpec {
            id,
            max_charge_power: cfg.charge_power,
            max_discharge_power: cfg.discharge_power,
            efficiency_charge: cfg.efficiency_charge,
            efficiency_discharge: cfg.efficiency_discharge,
        })
        .collect();

    let mut free_at = vec![0usize; cfg.chargers];
    let mut sessions = Vec::new();
    let mut dropped = 0;
    for t in 0..t_max {
        let rate = cfg.arrival_rates[hour_of(t) as usize % 24] * dt;
        let count = if rate > 0.0 {
            Poisson::new(rate).map_err(|e| ScenarioError::Config(e.to_string()))?.sample(&mut rng) as usize
        } else {
            0
        };
        for _ in 0..count {
            let free: Vec<usize> = (0..cfg.chargers).filter(|c| free_at[*c] <= t).collect();
            if free.is_empty() {
                dropped += 1;
                continue;
            }
            let charger = free[rng.random_range(0..free.len())];
            let sojourn = rng.random_range(cfg.sojourn_min_steps..=cfg.sojourn_max_steps);
            let departure = (t + sojourn).min(t_max);
            let capacity = rng.random_range(cfg.capacity_min..=cfg.capacity_max);
            let initial = capacity * rng.random_range(cfg.initial_soc_min..=cfg.initial_soc_max);
            let mut desired = capacity * rng.random_range(cfg.desired_soc_min..=cfg.desired_soc_max);
            let min_soc = (capacity * cfg.min_soc).min(initial);
            let mut ev = EvSession {
                id: sessions.len(),
                charger_id: charger,
                arrival_step: t,
                departure_step: departure,
                battery_capacity: capacity,
                initial_soc: initial,
                desired_energy_at_departure: 0.0,
                min_soc,
            };
            if cfg.feasibility != Feasibility::Unconstrained {
                desired = desired.min(ev.reachable_soc(&chargers[charger], dt));
            }
            ev.desired_energy_at_departure = desired;
            free_at[charger] = departure;
            sessions.push(ev);
        }
    }
    if dropped > 0 {
        log::debug!("scenario seed {}: dropped {dropped} arrivals at a full station", cfg.seed);
    }

    let noise = Normal::new(0.0, cfg.price_noise).map_err(|e| ScenarioError::Config(e.to_string()))?;
    let prices = (0..t_max)
        .map(|t| {
            let phase = 2.0 * std::f64::consts::PI * (hour_of(t) - cfg.price_peak_hour) / 24.0;
            let eps = if cfg.price_noise > 0.0 { noise.sample(&mut rng) } else { 0.0 };
            (cfg.price_base + cfg.price_amplitude * phase.cos() + eps).max(PRICE_FLOOR)
        })
        .collect();
    let power_limits = (0..t_max)
        .map(|t| {
            let h = hour_of(t);
            if cfg.limit_dip_start_hour <= h && h < cfg.limit_dip_end_hour {
                (cfg.limit_base - cfg.limit_dip_depth).max(0.0)
            } else {
                cfg.limit_base
            }
        })
        .collect();

    let mut scenario = Scenario {
        id: format!("gen-{}", cfg.seed),
        horizon: t_max,
        step_duration: dt,
        chargers,
        sessions,
        prices,
        power_limits,
    };
    if cfg.feasibility == Feasibility::Grid {
        let profile = cafap_aggregate(&scenario)?;
        for (limit, p) in scenario.power_limits.iter_mut().zip(profile) {
            *limit = limit.max(p.abs() + GRID_MARGIN_KW);
        }
    }
    scenario.validate()?;
    Ok(Generated { scenario, dropped })
}

/// Realized aggregate power of the CAFAP schedule at every step.
pub fn cafap_aggregate(scenario: &Scenario) -> Result<Vec<f64>, EnvError> {
    let env = Env::new(scenario.clone(), RewardWeights::default())?;
    let layout = crate::env::ObservationLayout::new(0, 0);
    let mut policy = Cafap;
    let mut out = Vec::with_capacity(scenario.horizon);
    crate::policies::run_episode(&env, &mut policy, &layout, |rec| out.push(rec.outcome.aggregate_power))
        .map_err(|e| match e {
            crate::policies::EpisodeError::Env(e) => e,
            other => EnvError::InvalidScenario(vec![other.to_string()]),
        })?;
    Ok(out)
}

pub fn save(scenario: &Scenario, path: &Path) -> Result<(), ScenarioError> {
    let text = serde_json::to_string_pretty(scenario).expect("scenario serializes");
    fs::write(path, text).map_err(|source| ScenarioError::Io { path: path.to_path_buf(), source })
}

pub fn load(path: &Path) -> Result<Scenario, ScenarioError> {
    let text = read(path)?;
    from_json(path, &text)
}

/// Parses and validates; `path` only labels errors.
pub fn from_json(path: &Path, text: &str) -> Result<Scenario, ScenarioError> {
    let scenario: Scenario = parse(path, text)?;
    scenario.validate()?;
    Ok(scenario)
}

/// Every `*.json` scenario in `dir`, sorted by file name.
pub fn load_dir(dir: &Path) -> Result<Vec<Scenario>, ScenarioError> {
    let entries = fs::read_dir(dir).map_err(|source| ScenarioError::Io { path: dir.to_path_buf(), source })?;
    let mut paths: Vec<PathBuf> = entries
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "json"))
        .collect();
    paths.sort();
    paths.iter().map(|p| load(p)).collect()
}

fn read(path: &Path) -> Result<String, ScenarioError> {
    fs::read_to_string(path).map_err(|source| ScenarioError::Io { path: path.to_path_buf(), source })
}

fn parse<T: serde::de::DeserializeOwned>(path: &Path, text: &str) -> Result<T, ScenarioError> {
    serde_json::from_str(text).map_err(|e| ScenarioError::Parse {
        path: path.to_path_buf(),
        line: e.line(),
        column: e.column(),
        msg: e.to_string(),
    })
}
