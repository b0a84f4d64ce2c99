//! Browser bindings: generate a scenario, simulate one policy on it, and
//! compare every baseline. All values cross the boundary as JSON strings.

use serde::Serialize;
use wasm_bindgen::prelude::*;

use v2g_core::bench::{run_traced, EpisodeMetrics, PolicyFactory};
use v2g_core::env::Scenario;
use v2g_core::policies::PolicyKind;
use v2g_core::scenario::{generate, Feasibility, GeneratorConfig};

#[derive(Serialize)]
pub struct Simulation {
    pub policy: PolicyKind,
    pub price: Vec<f64>,
    pub limit: Vec<f64>,
    pub aggregate: Vec<f64>,
    /// `[step][charger]`, kW.
    pub power: Vec<Vec<f64>>,
    pub metrics: EpisodeMetrics,
}

fn parse_feasibility(s: &str) -> Result<Feasibility, String> {
    match s {
        "unconstrained" => Ok(Feasibility::Unconstrained),
        "demands" => Ok(Feasibility::Demands),
        "grid" => Ok(Feasibility::Grid),
        other => Err(format!("unknown feasibility {other:?}")),
    }
}

fn parse_scenario(json: &str) -> Result<Scenario, String> {
    let sc: Scenario = serde_json::from_str(json).map_err(|e| e.to_string())?;
    sc.validate().map_err(|e| e.to_string())?;
    Ok(sc)
}

pub fn generate_json(seed: u32, chargers: u32, feasibility: &str) -> Result<String, String> {
    let cfg = GeneratorConfig { chargers: chargers as usize, feasibility: parse_feasibility(feasibility)?, seed: seed as u64, ..Default::default() };
    let sc = generate(&cfg).map_err(|e| e.to_string())?;
    serde_json::to_string(&sc).map_err(|e| e.to_string())
}

pub fn simulation(scenario: &Scenario, policy: PolicyKind, seed: u32) -> Result<Simulation, String> {
    let factory = PolicyFactory { seed: seed as u64, ..Default::default() };
    let mut p = factory.build(policy, 0).map_err(|e| e.to_string())?;
    let (metrics, trace) = run_traced(scenario, p.as_mut()).map_err(|e| e.to_string())?;
    Ok(Simulation {
        policy,
        price: trace.rows.iter().map(|r| r.price).collect(),
        limit: trace.rows.iter().map(|r| r.limit).collect(),
        aggregate: trace.rows.iter().map(|r| r.aggregate_power).collect(),
        power: trace.rows.into_iter().map(|r| r.power).collect(),
        metrics,
    })
}

pub fn simulate_json(scenario: &str, policy: &str, seed: u32) -> Result<String, String> {
    let sc = parse_scenario(scenario)?;
    let kind: PolicyKind = policy.parse().map_err(|e: <PolicyKind as std::str::FromStr>::Err| e.to_string())?;
    if kind == PolicyKind::Dt {
        return Err("the browser demo has no trained model".into());
    }
    serde_json::to_string(&simulation(&sc, kind, seed)?).map_err(|e| e.to_string())
}

pub fn compare_json(scenario: &str, seed: u32) -> Result<String, String> {
    let sc = parse_scenario(scenario)?;
    let rows = [PolicyKind::Cafap, PolicyKind::Bau, PolicyKind::Random, PolicyKind::Oracle]
        .into_iter()
        .map(|k| simulation(&sc, k, seed).map(|s| (k, s.metrics)))
        .collect::<Result<Vec<_>, _>>()?;
    serde_json::to_string(&rows).map_err(|e| e.to_string())
}

/// Scenario JSON from the default generator with `chargers` chargers.
#[wasm_bindgen]
pub fn generate_scenario(seed: u32, chargers: u32, feasibility: &str) -> Result<String, JsError> {
    generate_json(seed, chargers, feasibility).map_err(|e| JsError::new(&e))
}

/// Runs one policy (`cafap`, `bau`, `random` or `oracle`) and returns its trace and metrics.
#[wasm_bindgen]
pub fn simulate(scenario: &str, policy: &str, seed: u32) -> Result<String, JsError> {
    simulate_json(scenario, policy, seed).map_err(|e| JsError::new(&e))
}

/// Metrics of every baseline on the same scenario, as `[[policy, metrics], ...]`.
#[wasm_bindgen]
pub fn compare(scenario: &str, seed: u32) -> Result<String, JsError> {
    compare_json(scenario, seed).map_err(|e| JsError::new(&e))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn generated_scenario_simulates_under_every_baseline() {
        let sc = generate_json(3, 4, "grid").unwrap();
        for p in ["cafap", "bau", "random", "oracle"] {
            let out: serde_json::Value = serde_json::from_str(&simulate_json(&sc, p, 1).unwrap()).unwrap();
            assert_eq!(out["aggregate"].as_array().unwrap().len(), 96);
            assert_eq!(out["power"][0].as_array().unwrap().len(), 4);
        }
        let cmp: serde_json::Value = serde_json::from_str(&compare_json(&sc, 1).unwrap()).unwrap();
        assert_eq!(cmp.as_array().unwrap().len(), 4);
        assert_eq!(cmp[3][1]["violation_kw"], 0.0);
    }

    #[test]
    fn bad_inputs_are_reported() {
        assert!(generate_json(0, 2, "sometimes").is_err());
        assert!(simulate_json("{}", "cafap", 0).is_err());
        let sc = generate_json(0, 2, "demands").unwrap();
        assert!(simulate_json(&sc, "dt", 0).is_err());
        assert!(simulate_json(&sc, "greedy", 0).is_err());
    }
}
