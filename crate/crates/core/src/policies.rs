//! Policy interface, heuristic baselines and the episode driver.

use std::str::FromStr;
use std::time::Duration;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::env::{Env, EnvError, EnvState, ObservationLayout, Scenario, StateView, StepOutcome};

type BoxError = Box<dyn std::error::Error + Send + Sync>;

#[derive(Debug, Error)]
pub enum PolicyError {
    #[error("{policy}: {source}")]
    Backend { policy: &'static str, source: BoxError },
    #[error("{policy} was asked to act before reset")]
    NotReady { policy: &'static str },
}

impl PolicyError {
    pub fn backend(policy: &'static str, source: impl Into<BoxError>) -> Self {
        Self::Backend { policy, source: source.into() }
    }
}

#[derive(Debug, Error)]
pub enum EpisodeError {
    #[error("policy failed at step {t}: {source}")]
    Policy { t: usize, source: PolicyError },
    #[error(transparent)]
    Env(#[from] EnvError),
}

/// What a policy sees at one step.
#[derive(Clone, Copy, Debug)]
pub struct Observation<'a> {
    pub features: &'a [f64],
    pub view: StateView<'a>,
    /// Reward of the previous step; `None` at the first step.
    pub last_reward: Option<f64>,
}

pub trait Policy {
    fn name(&self) -> &'static str;

    /// Starts a new episode on `scenario`.
    fn reset(&mut self, scenario: &Scenario) -> Result<(), PolicyError>;

    /// One value in `[-1, 1]` per charger.
    fn act(&mut self, obs: &Observation<'_>) -> Result<Vec<f64>, PolicyError>;
}

/// Charge every connected EV at the highest rate its remaining demand uses.
#[derive(Clone, Copy, Debug, Default)]
pub struct Cafap;

impl Cafap {
    pub fn actions(view: &StateView<'_>) -> Vec<f64> {
        let dt = view.scenario.step_duration;
        (0..view.num_chargers())
            .map(|c| match view.connected(c) {
                Some(_) => {
                    let full = view.scenario.chargers[c].max_charge_power * dt;
                    (view.remaining_grid_energy(c) / full).min(1.0)
                }
                None => 0.0,
            })
            .collect()
    }
}

impl Policy for Cafap {
    fn name(&self) -> &'static str {
        "cafap"
    }

    fn reset(&mut self, _: &Scenario) -> Result<(), PolicyError> {
        Ok(())
    }

    fn act(&mut self, obs: &Observation<'_>) -> Result<Vec<f64>, PolicyError> {
        Ok(Cafap::actions(&obs.view))
    }
}

/// Round-robin budget walk over the CAFAP requests.
#[derive(Clone, Debug, Default)]
pub struct Bau {
    pub pointer: usize,
}

impl Bau {
    /// Requested power per charger in kW; advances the pointer.
    pub fn powers(&mut self, view: &StateView<'_>) -> Vec<f64> {
        let n = view.num_chargers();
        let mut power = vec![0.0; n];
        if n == 0 {
            return power;
        }
        let want = Cafap::actions(view);
        let limit = view.power_limit();
        let mut used = 0.0;
        let mut exhausted = false;
        for k in 0..n {
            let c = (self.pointer + k) % n;
            if exhausted || view.connected(c).is_none() {
                continue;
            }
            let p = want[c] * view.scenario.chargers[c].max_charge_power;
            if used + p <= limit {
                power[c] = p;
                used += p;
            } else {
                power[c] = (limit - used).max(0.0);
                exhausted = true;
            }
        }
        self.pointer = (self.pointer + 1) % n;
        power
    }
}

impl Policy for Bau {
    fn name(&self) -> &'static str {
        "bau"
    }

    fn reset(&mut self, _: &Scenario) -> Result<(), PolicyError> {
        self.pointer = 0;
        Ok(())
    }

    fn act(&mut self, obs: &Observation<'_>) -> Result<Vec<f64>, PolicyError> {
        let chargers = &obs.view.scenario.chargers;
        let power = self.powers(&obs.view);
        Ok(power.iter().zip(chargers).map(|(p, c)| (p / c.max_charge_power).min(1.0)).collect())
    }
}

/// Independent uniform actions on `[-1, 1]`.
#[derive(Clone, Debug)]
pub struct RandomPolicy {
    rng: ChaCha8Rng,
}

impl RandomPolicy {
    pub fn new(seed: u64) -> Self {
        Self { rng: ChaCha8Rng::seed_from_u64(seed) }
    }

    pub fn draw(&mut self, n: usize) -> Vec<f64> {
        (0..n).map(|_| self.rng.random_range(-1.0..=1.0)).collect()
    }
}

impl Policy for RandomPolicy {
    fn name(&self) -> &'static str {
        "random"
    }

    fn reset(&mut self, _: &Scenario) -> Result<(), PolicyError> {
        Ok(())
    }

    fn act(&mut self, obs: &Observation<'_>) -> Result<Vec<f64>, PolicyError> {
        Ok(self.draw(obs.view.num_chargers()))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PolicyKind {
    Cafap,
    Bau,
    Random,
    Oracle,
    Dt,
}

impl PolicyKind {
    pub const ALL: [PolicyKind; 5] = [Self::Cafap, Self::Bau, Self::Random, Self::Oracle, Self::Dt];

    pub fn as_str(self) -> &'static str {
        match self {
            Self::Cafap => "cafap",
            Self::Bau => "bau",
            Self::Random => "random",
            Self::Oracle => "oracle",
            Self::Dt => "dt",
        }
    }
}

impl std::fmt::Display for PolicyKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for PolicyKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Self::ALL
            .into_iter()
            .find(|k| k.as_str() == s)
            .ok_or_else(|| format!("unknown policy `{s}` (expected cafap, bau, random, oracle or dt)"))
    }
}

/// Everything observed and done at one step.
#[derive(Clone, Debug)]
pub struct StepRecord<'a> {
    pub t: usize,
    pub features: &'a [f64],
    pub actions: &'a [f64],
    pub outcome: &'a StepOutcome,
    /// State after the step.
    pub state: &'a EnvState,
    /// Time in `act`; the first step also carries the time spent in `reset`.
    pub policy_time: Duration,
}

/// Wall time of `f`; always zero in the browser, which has no monotonic clock in std.
#[cfg(not(target_arch = "wasm32"))]
fn timed<T>(f: impl FnOnce() -> T) -> (T, Duration) {
    let start = std::time::Instant::now();
    let out = f();
    (out, start.elapsed())
}

#[cfg(target_arch = "wasm32")]
fn timed<T>(f: impl FnOnce() -> T) -> (T, Duration) {
    (f(), Duration::ZERO)
}

/// Runs `policy` for a full episode and returns the terminal state.
pub fn run_episode<F>(env: &Env, policy: &mut dyn Policy, layout: &ObservationLayout, mut on_step: F) -> Result<EnvState, EpisodeError>
where
    F: FnMut(&StepRecord<'_>),
{
    let (reset, setup) = timed(|| policy.reset(env.scenario()));
    reset.map_err(|source| EpisodeError::Policy { t: 0, source })?;
    let mut setup = Some(setup);
    let mut state = env.reset();
    let mut last_reward = None;
    while !env.is_done(&state) {
        let t = state.t;
        let features = env.observe(&state, layout);
        let obs = Observation { features: &features, view: env.view(&state), last_reward };
        let (actions, elapsed) = timed(|| policy.act(&obs));
        let actions = actions.map_err(|source| EpisodeError::Policy { t, source })?;
        let policy_time = elapsed + setup.take().unwrap_or_default();
        let (next, outcome) = env.step(&state, &actions)?;
        on_step(&StepRecord { t, features: &features, actions: &actions, outcome: &outcome, state: &next, policy_time });
        last_reward = Some(outcome.reward);
        state = next;
    }
    Ok(state)
}
