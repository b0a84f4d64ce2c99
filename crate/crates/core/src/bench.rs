//! Evaluation harness: runs policies over scenario suites, aggregates
//! metrics, checks invariants and writes CSV traces and SVG plots.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::Serialize;
use thiserror::Error;

use crate::dt::{DtAgent, DtPolicy};
use crate::env::{Departure, Env, EnvError, ObservationLayout, RewardWeights, Scenario};
use crate::oracle::{OraclePolicy, OracleWeights};
use crate::par::map_indexed;
use crate::policies::{run_episode, Bau, Cafap, EpisodeError, Policy, PolicyKind, RandomPolicy};

#[derive(Debug, Error)]
pub enum BenchError {
    #[error("{path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("{path}: {source}")]
    Csv { path: String, source: csv::Error },
    #[error("the dt policy needs a checkpoint")]
    MissingCheckpoint,
    #[error("empty scenario suite")]
    NoScenarios,
    #[error("scenarios disagree on charger count ({0} vs {1})")]
    MixedStations(usize, usize),
    #[error(transparent)]
    Env(#[from] EnvError),
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> BenchError + '_ {
    move |source| BenchError::Io { path: path.display().to_string(), source }
}

fn csv_err(path: &Path) -> impl FnOnce(csv::Error) -> BenchError + '_ {
    move |source| BenchError::Csv { path: path.display().to_string(), source }
}

/// Builds a fresh policy instance per episode.
#[derive(Clone, Default)]
pub struct PolicyFactory {
    pub dt: Option<(Arc<DtAgent>, f64)>,
    pub oracle: OracleWeights,
    /// Base seed of the random policy; episode `i` uses `seed + i`.
    pub seed: u64,
}

impl PolicyFactory {
    pub fn build(&self, kind: PolicyKind, episode: usize) -> Result<Box<dyn Policy>, BenchError> {
        Ok(match kind {
            PolicyKind::Cafap => Box::new(Cafap),
            PolicyKind::Bau => Box::new(Bau::default()),
            PolicyKind::Random => Box::new(RandomPolicy::new(self.seed.wrapping_add(episode as u64))),
            PolicyKind::Oracle => Box::new(OraclePolicy::new(self.oracle)),
            PolicyKind::Dt => {
                let (agent, target) = self.dt.clone().ok_or(BenchError::MissingCheckpoint)?;
                Box::new(DtPolicy::new(agent, target))
            }
        })
    }
}

/// One step of an episode trace.
#[derive(Clone, Debug, PartialEq)]
pub struct TraceRow {
    pub t: usize,
    pub price: f64,
    pub limit: f64,
    /// Signed aggregate of the commanded actions times charger ratings, kW.
    pub requested_power: f64,
    pub aggregate_power: f64,
    pub violation: f64,
    pub cash_flow: f64,
    pub reward: f64,
    pub power: Vec<f64>,
    /// SoC after the step of the EV that was plugged in during it, kWh.
    pub soc: Vec<Option<f64>>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpisodeTrace {
    pub scenario_id: String,
    pub step_duration: f64,
    pub rows: Vec<TraceRow>,
    pub departures: Vec<Departure>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EpisodeMetrics {
    pub energy_charged_mwh: f64,
    pub energy_discharged_mwh: f64,
    /// `None` when no EV departed.
    pub satisfaction_mean: Option<f64>,
    pub satisfaction_min: Option<f64>,
    pub violation_kw: f64,
    pub cash_flow: f64,
    pub reward: f64,
    /// Mean policy time per step, seconds.
    pub step_time: f64,
}

impl EpisodeMetrics {
    fn satisfaction(departures: &[Departure]) -> (Option<f64>, Option<f64>) {
        if departures.is_empty() {
            return (None, None);
        }
        let s: Vec<f64> = departures.iter().map(Departure::satisfaction).collect();
        (Some(s.iter().sum::<f64>() / s.len() as f64), s.iter().copied().reduce(f64::min))
    }

    /// Recomputes every metric except step time from a trace.
    pub fn from_trace(trace: &EpisodeTrace, step_time: f64) -> Self {
        let dt = trace.step_duration;
        let (mut charged, mut discharged, mut violation, mut cash, mut reward) = (0.0, 0.0, 0.0, 0.0, 0.0);
        for r in &trace.rows {
            charged += r.power.iter().filter(|p| **p > 0.0).sum::<f64>() * dt;
            discharged += r.power.iter().filter(|p| **p < 0.0).map(|p| -p).sum::<f64>() * dt;
            violation += (r.aggregate_power.abs() - r.limit).max(0.0);
            cash += -r.price * dt * r.aggregate_power;
            reward += r.reward;
        }
        let (satisfaction_mean, satisfaction_min) = Self::satisfaction(&trace.departures);
        Self {
            energy_charged_mwh: charged / 1000.0,
            energy_discharged_mwh: discharged / 1000.0,
            satisfaction_mean,
            satisfaction_min,
            violation_kw: violation,
            cash_flow: cash,
            reward,
            step_time,
        }
    }

    /// Largest relative difference over the trace-derived metrics.
    pub fn max_deviation(&self, other: &Self) -> f64 {
        let rel = |a: f64, b: f64| (a - b).abs() / a.abs().max(b.abs()).max(1.0);
        let opt = |a: Option<f64>, b: Option<f64>| match (a, b) {
            (Some(a), Some(b)) => rel(a, b),
            (None, None) => 0.0,
            _ => f64::INFINITY,
        };
        [
            rel(self.energy_charged_mwh, other.energy_charged_mwh),
            rel(self.energy_discharged_mwh, other.energy_discharged_mwh),
            opt(self.satisfaction_mean, other.satisfaction_mean),
            opt(self.satisfaction_min, other.satisfaction_min),
            rel(self.violation_kw, other.violation_kw),
            rel(self.cash_flow, other.cash_flow),
            rel(self.reward, other.reward),
        ]
        .into_iter()
        .fold(0.0, f64::max)
    }
}

#[derive(Clone, Debug)]
pub struct EpisodeResult {
    pub episode: usize,
    pub scenario_id: String,
    pub outcome: Result<(EpisodeMetrics, EpisodeTrace), String>,
}

/// Runs one episode and reports metrics taken from the environment totals.
pub fn run_traced(scenario: &Scenario, policy: &mut dyn Policy) -> Result<(EpisodeMetrics, EpisodeTrace), EpisodeError> {
    let env = Env::new(scenario.clone(), RewardWeights::default())?;
    let layout = ObservationLayout::for_scenario(scenario);
    let mut occupancy = env.reset().occupancy;
    let mut rows = Vec::with_capacity(scenario.horizon);
    let mut policy_secs = 0.0;
    let final_state = run_episode(&env, policy, &layout, |rec| {
        policy_secs += rec.policy_time.as_secs_f64();
        let requested = rec
            .actions
            .iter()
            .zip(&scenario.chargers)
            .zip(&occupancy)
            .filter(|(_, occ)| occ.is_some())
            .map(|((a, ch), _)| if *a >= 0.0 { a * ch.max_charge_power } else { a * ch.max_discharge_power })
            .sum();
        rows.push(TraceRow {
            t: rec.t,
            price: scenario.prices[rec.t],
            limit: scenario.power_limits[rec.t],
            requested_power: requested,
            aggregate_power: rec.outcome.aggregate_power,
            violation: rec.outcome.violation,
            cash_flow: rec.outcome.cash_flow,
            reward: rec.outcome.reward,
            power: rec.outcome.power.clone(),
            soc: occupancy.iter().map(|o| o.map(|e| rec.state.soc[e])).collect(),
        });
        occupancy.clone_from(&rec.state.occupancy);
    })?;
    let totals = final_state.totals;
    let (satisfaction_mean, satisfaction_min) = EpisodeMetrics::satisfaction(&totals.departures);
    let metrics = EpisodeMetrics {
        energy_charged_mwh: totals.energy_charged / 1000.0,
        energy_discharged_mwh: totals.energy_discharged / 1000.0,
        satisfaction_mean,
        satisfaction_min,
        violation_kw: totals.violation,
        cash_flow: totals.cash_flow,
        reward: totals.reward,
        step_time: policy_secs / scenario.horizon.max(1) as f64,
    };
    let trace = EpisodeTrace { scenario_id: scenario.id.clone(), step_duration: scenario.step_duration, rows, departures: totals.departures };
    Ok((metrics, trace))
}

/// Mean and population standard deviation.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize)]
pub struct Stat {
    pub mean: f64,
    pub std: f64,
}

impl Stat {
    pub fn of(values: &[f64]) -> Self {
        if values.is_empty() {
            return Self { mean: f64::NAN, std: f64::NAN };
        }
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
        Self { mean, std: var.sqrt() }
    }
}

/// Per-policy results over a suite.
#[derive(Clone, Debug)]
pub struct MetricsReport {
    pub policy: PolicyKind,
    pub episodes: Vec<EpisodeResult>,
}

impl MetricsReport {
    pub fn completed(&self) -> impl Iterator<Item = (&EpisodeResult, &EpisodeMetrics, &EpisodeTrace)> {
        self.episodes.iter().filter_map(|e| e.outcome.as_ref().ok().map(|(m, t)| (e, m, t)))
    }

    pub fn failures(&self) -> usize {
        self.episodes.iter().filter(|e| e.outcome.is_err()).count()
    }

    fn stat(&self, f: impl Fn(&EpisodeMetrics) -> Option<f64>) -> Stat {
        let v: Vec<f64> = self.completed().filter_map(|(_, m, _)| f(m)).collect();
        Stat::of(&v)
    }

    pub fn energy_charged(&self) -> Stat {
        self.stat(|m| Some(m.energy_charged_mwh))
    }
    pub fn energy_discharged(&self) -> Stat {
        self.stat(|m| Some(m.energy_discharged_mwh))
    }
    /// Across episodes of the per-episode mean.
    pub fn satisfaction(&self) -> Stat {
        self.stat(|m| m.satisfaction_mean)
    }
    /// Lowest satisfaction of any EV in any episode.
    pub fn satisfaction_min(&self) -> Option<f64> {
        self.completed().filter_map(|(_, m, _)| m.satisfaction_min).reduce(f64::min)
    }
    pub fn violation(&self) -> Stat {
        self.stat(|m| Some(m.violation_kw))
    }
    pub fn cash_flow(&self) -> Stat {
        self.stat(|m| Some(m.cash_flow))
    }
    pub fn reward(&self) -> Stat {
        self.stat(|m| Some(m.reward))
    }
    pub fn step_time(&self) -> Stat {
        self.stat(|m| Some(m.step_time))
    }
}

/// Runs `episodes` episodes of `kind`; episode `i` uses scenario `i % len`.
pub fn run_suite(kind: PolicyKind, scenarios: &[Scenario], episodes: usize, factory: &PolicyFactory, threads: usize) -> Result<MetricsReport, BenchError> {
    if scenarios.is_empty() {
        return Err(BenchError::NoScenarios);
    }
    if kind == PolicyKind::Dt {
        factory.dt.as_ref().ok_or(BenchError::MissingCheckpoint)?;
    }
    let results = map_indexed(episodes, threads, |i| {
        let scenario = &scenarios[i % scenarios.len()];
        let outcome = factory
            .build(kind, i)
            .map_err(|e| e.to_string())
            .and_then(|mut p| run_traced(scenario, p.as_mut()).map_err(|e| e.to_string()));
        if let Err(msg) = &outcome {
            log::warn!("{kind} episode {i} ({}): {msg}", scenario.id);
        }
        EpisodeResult { episode: i, scenario_id: scenario.id.clone(), outcome }
    });
    Ok(MetricsReport { policy: kind, episodes: results })
}

#[derive(Clone, Debug, PartialEq)]
pub struct InvariantCheck {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

impl InvariantCheck {
    fn new(name: impl Into<String>, failures: Vec<String>) -> Self {
        let passed = failures.is_empty();
        let detail = if passed { String::new() } else { failures.join("; ") };
        Self { name: name.into(), passed, detail }
    }
}

/// Checks every invariant that applies to the policies present.
pub fn check_invariants(reports: &[MetricsReport], scenarios: &[Scenario]) -> Vec<InvariantCheck> {
    let mut checks = Vec::new();
    let find = |k: PolicyKind| reports.iter().find(|r| r.policy == k);
    for r in reports {
        let p = r.policy;
        let failed: Vec<String> = r.episodes.iter().filter_map(|e| e.outcome.as_ref().err().map(|m| format!("episode {}: {m}", e.episode))).collect();
        checks.push(InvariantCheck::new(format!("{p}: episodes complete"), failed));

        let mut bad = Vec::new();
        for (e, m, t) in r.completed() {
            let ranged = [m.satisfaction_mean, m.satisfaction_min].into_iter().flatten().all(|s| (0.0..=100.0).contains(&s));
            if m.energy_charged_mwh < 0.0 || m.energy_discharged_mwh < 0.0 || !ranged {
                bad.push(format!("episode {}: metric out of range", e.episode));
            }
            let dev = m.max_deviation(&EpisodeMetrics::from_trace(t, m.step_time));
            if dev.is_nan() || dev > 1e-9 {
                bad.push(format!("episode {}: trace disagrees by {dev:e}", e.episode));
            }
            let horizon = scenarios[e.episode % scenarios.len()].horizon;
            if t.rows.len() != horizon {
                bad.push(format!("episode {}: {} trace rows for horizon {horizon}", e.episode, t.rows.len()));
            }
        }
        checks.push(InvariantCheck::new(format!("{p}: metrics consistent with traces"), bad));

        match p {
            PolicyKind::Cafap | PolicyKind::Bau => {
                let bad = r.completed().filter(|(_, m, _)| m.energy_discharged_mwh > 0.0).map(|(e, _, _)| format!("episode {}", e.episode)).collect();
                checks.push(InvariantCheck::new(format!("{p}: never discharges"), bad));
            }
            PolicyKind::Oracle => {
                let bad = r.completed().filter(|(_, m, _)| m.violation_kw > 0.0).map(|(e, m, _)| format!("episode {}: {} kW", e.episode, m.violation_kw)).collect();
                checks.push(InvariantCheck::new("oracle: zero violation", bad));
            }
            _ => {}
        }
        if p == PolicyKind::Cafap {
            let mut bad = Vec::new();
            for (e, _, t) in r.completed() {
                let sc = &scenarios[e.episode % scenarios.len()];
                for d in &t.departures {
                    let Some(ev) = sc.sessions.iter().find(|s| s.id == d.ev_id) else { continue };
                    if ev.demand_feasible(&sc.chargers[d.charger_id], sc.step_duration) && d.satisfaction() < 100.0 {
                        bad.push(format!("episode {} ev {}: {:.4}%", e.episode, d.ev_id, d.satisfaction()));
                    }
                }
            }
            checks.push(InvariantCheck::new("cafap: feasible EVs fully satisfied", bad));
        }
        if p == PolicyKind::Bau {
            let mut bad = Vec::new();
            for (e, _, t) in r.completed() {
                if let Some(row) = t.rows.iter().find(|row| row.requested_power > row.limit + 1e-9) {
                    bad.push(format!("episode {} step {}: {} > {}", e.episode, row.t, row.requested_power, row.limit));
                }
            }
            checks.push(InvariantCheck::new("bau: requested power within limit", bad));
        }
    }

    if let (Some(cafap), Some(bau)) = (find(PolicyKind::Cafap), find(PolicyKind::Bau)) {
        let (c, b) = (cafap.violation().mean, bau.violation().mean);
        let bad = if c.is_nan() || b.is_nan() || c >= b { vec![] } else { vec![format!("cafap {c} < bau {b}")] };
        checks.push(InvariantCheck::new("violation: cafap >= bau", bad));
    }
    if let (Some(oracle), Some(cafap)) = (find(PolicyKind::Oracle), find(PolicyKind::Cafap)) {
        // The CAFAP plan is a feasible LP point only when it stays within the limit.
        let mut bad = Vec::new();
        for (o, c) in oracle.episodes.iter().zip(&cafap.episodes) {
            if let (Ok((om, _)), Ok((cm, _))) = (&o.outcome, &c.outcome) {
                if cm.violation_kw == 0.0 && -om.cash_flow > -cm.cash_flow + 1e-6 {
                    bad.push(format!("episode {}: oracle cost {} > cafap {}", o.episode, -om.cash_flow, -cm.cash_flow));
                }
            }
        }
        checks.push(InvariantCheck::new("cost: oracle <= cafap where cafap is within limits", bad));
    }
    checks
}

/// Summary columns, in table order.
pub const SUMMARY_HEADER: [&str; 17] = [
    "policy",
    "episodes",
    "failures",
    "energy_charged_mwh",
    "energy_charged_mwh_std",
    "energy_discharged_mwh",
    "energy_discharged_mwh_std",
    "user_satisfaction_pct",
    "user_satisfaction_pct_std",
    "min_user_satisfaction_pct",
    "power_violation_kw",
    "power_violation_kw_std",
    "cash_flow_eur",
    "cash_flow_eur_std",
    "reward",
    "reward_std",
    "step_time_s",
];

fn summary_row(r: &MetricsReport) -> Vec<String> {
    let f = |x: f64| if x.is_nan() { String::new() } else { format!("{x}") };
    let mut row = vec![r.policy.to_string(), r.episodes.len().to_string(), r.failures().to_string()];
    for s in [r.energy_charged(), r.energy_discharged(), r.satisfaction()] {
        row.push(f(s.mean));
        row.push(f(s.std));
    }
    row.push(r.satisfaction_min().map(f).unwrap_or_default());
    for s in [r.violation(), r.cash_flow(), r.reward()] {
        row.push(f(s.mean));
        row.push(f(s.std));
    }
    row.push(f(r.step_time().mean));
    row
}

/// Column names of an episode trace for `chargers` chargers.
pub fn trace_header(chargers: usize) -> Vec<String> {
    let mut h: Vec<String> = ["t", "price", "limit", "requested_power", "aggregate_power", "violation", "cash_flow", "reward"].map(String::from).to_vec();
    h.extend((0..chargers).map(|c| format!("power_{c}")));
    h.extend((0..chargers).map(|c| format!("soc_{c}")));
    h
}

pub fn write_trace(trace: &EpisodeTrace, path: &Path) -> Result<(), BenchError> {
    let chargers = trace.rows.first().map_or(0, |r| r.power.len());
    let mut w = csv::Writer::from_path(path).map_err(csv_err(path))?;
    w.write_record(trace_header(chargers)).map_err(csv_err(path))?;
    for r in &trace.rows {
        let mut rec = vec![r.t.to_string()];
        rec.extend([r.price, r.limit, r.requested_power, r.aggregate_power, r.violation, r.cash_flow, r.reward].map(|x| x.to_string()));
        rec.extend(r.power.iter().map(f64::to_string));
        rec.extend(r.soc.iter().map(|s| s.map(|v| v.to_string()).unwrap_or_default()));
        w.write_record(&rec).map_err(csv_err(path))?;
    }
    w.flush().map_err(io_err(path))
}

/// Aggregate power against the limit. Series are drawn in data coordinates
/// (x = step, y = kW) under a single transform.
pub fn plot_svg(trace: &EpisodeTrace, title: &str) -> String {
    let (w, h, pad) = (720.0, 320.0, 40.0);
    let n = trace.rows.len().max(2) as f64;
    let ymax = trace.rows.iter().flat_map(|r| [r.limit, r.aggregate_power.abs()]).fold(1.0, f64::max) * 1.1;
    let ymin = trace.rows.iter().map(|r| r.aggregate_power).fold(0.0, f64::min) * 1.1;
    let sx = (w - 2.0 * pad) / (n - 1.0);
    let sy = (h - 2.0 * pad) / (ymax - ymin);
    let points = |f: &dyn Fn(&TraceRow) -> f64| trace.rows.iter().map(|r| format!("{},{}", r.t, f(r))).collect::<Vec<_>>().join(" ");
    let mut s = String::new();
    let _ = writeln!(s, r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" viewBox="0 0 {w} {h}" font-family="sans-serif" font-size="12">"#);
    let _ = writeln!(s, r#"<rect width="{w}" height="{h}" fill="white"/>"#);
    let _ = writeln!(s, r#"<text x="{pad}" y="20">{}</text>"#, escape(title));
    let _ = writeln!(s, r#"<text x="{pad}" y="{}">0</text><text x="{}" y="{}">{:.0} kW max</text>"#, h - 10.0, w - 160.0, h - 10.0, ymax / 1.1);
    let _ = writeln!(s, r#"<g transform="translate({pad},{}) scale({sx},{})">"#, h - pad + ymin * sy, -sy);
    let _ = writeln!(s, r#"<line x1="0" y1="0" x2="{}" y2="0" stroke="gray" vector-effect="non-scaling-stroke"/>"#, n - 1.0);
    let _ = writeln!(s, r#"<polyline id="limit" fill="none" stroke="firebrick" stroke-dasharray="4 3" vector-effect="non-scaling-stroke" points="{}"/>"#, points(&|r| r.limit));
    let _ = writeln!(s, r#"<polyline id="aggregate" fill="none" stroke="steelblue" stroke-width="2" vector-effect="non-scaling-stroke" points="{}"/>"#, points(&|r| r.aggregate_power));
    let _ = writeln!(s, "</g>");
    let _ = writeln!(s, r#"<text x="{}" y="20" fill="steelblue">aggregate</text><text x="{}" y="20" fill="firebrick">limit</text>"#, w - 170.0, w - 90.0);
    s.push_str("</svg>\n");
    s
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

/// Parses a polyline written by [`plot_svg`] back into `(step, value)` pairs.
pub fn svg_series(svg: &str, id: &str) -> Option<Vec<(f64, f64)>> {
    let tag = format!(r#"id="{id}""#);
    let line = svg.lines().find(|l| l.contains(&tag))?;
    let start = line.find("points=\"")? + 8;
    let end = start + line[start..].find('"')?;
    line[start..end]
        .split_whitespace()
        .map(|p| {
            let (x, y) = p.split_once(',')?;
            Some((x.parse().ok()?, y.parse().ok()?))
        })
        .collect()
}

fn write_departures(report: &MetricsReport, path: &Path) -> Result<(), BenchError> {
    let mut w = csv::Writer::from_path(path).map_err(csv_err(path))?;
    w.write_record(["episode", "scenario", "ev_id", "charger", "step", "delivered_kwh", "desired_kwh", "satisfaction_pct"]).map_err(csv_err(path))?;
    for (e, _, t) in report.completed() {
        for d in &t.departures {
            let rec = [e.episode.to_string(), e.scenario_id.clone(), d.ev_id.to_string(), d.charger_id.to_string(), d.step.to_string(), d.delivered.to_string(), d.desired.to_string(), d.satisfaction().to_string()];
            w.write_record(&rec).map_err(csv_err(path))?;
        }
    }
    w.flush().map_err(io_err(path))
}

/// Writes `summary.csv`, `invariants.csv` and per-policy folders with
/// `episode_<i>.csv`, `episode_<i>.svg` and `departures.csv`.
pub fn emit_outputs(reports: &[MetricsReport], checks: &[InvariantCheck], out: &Path) -> Result<PathBuf, BenchError> {
    std::fs::create_dir_all(out).map_err(io_err(out))?;
    let summary = out.join("summary.csv");
    let mut w = csv::Writer::from_path(&summary).map_err(csv_err(&summary))?;
    w.write_record(SUMMARY_HEADER).map_err(csv_err(&summary))?;
    for r in reports {
        w.write_record(summary_row(r)).map_err(csv_err(&summary))?;
    }
    w.flush().map_err(io_err(&summary))?;

    let inv = out.join("invariants.csv");
    let mut w = csv::Writer::from_path(&inv).map_err(csv_err(&inv))?;
    w.write_record(["check", "passed", "detail"]).map_err(csv_err(&inv))?;
    for c in checks {
        w.write_record([c.name.as_str(), if c.passed { "true" } else { "false" }, c.detail.as_str()]).map_err(csv_err(&inv))?;
    }
    w.flush().map_err(io_err(&inv))?;

    for r in reports {
        let dir = out.join(r.policy.as_str());
        std::fs::create_dir_all(&dir).map_err(io_err(&dir))?;
        for (e, _, t) in r.completed() {
            write_trace(t, &dir.join(format!("episode_{}.csv", e.episode)))?;
            let svg = dir.join(format!("episode_{}.svg", e.episode));
            std::fs::write(&svg, plot_svg(t, &format!("{} / {} / episode {}", r.policy, e.scenario_id, e.episode))).map_err(io_err(&svg))?;
        }
        write_departures(r, &dir.join("departures.csv"))?;
    }
    Ok(summary)
}

/// Charger count shared by every scenario of a suite.
pub fn suite_chargers(scenarios: &[Scenario]) -> Result<usize, BenchError> {
    let first = scenarios.first().ok_or(BenchError::NoScenarios)?.chargers.len();
    match scenarios.iter().find(|s| s.chargers.len() != first) {
        Some(s) => Err(BenchError::MixedStations(first, s.chargers.len())),
        None => Ok(first),
    }
}
