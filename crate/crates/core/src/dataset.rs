//! Offline trajectories: recording, returns-to-go, merging, sampling and
//! the binary container.

use std::path::Path;

use rand::Rng;
use thiserror::Error;

use crate::codec::{ByteReader, ByteWriter, CodecError};
use crate::env::{Env, ObservationLayout, RewardWeights, Scenario, CHARGER_BLOCK};
use crate::policies::{run_episode, EpisodeError, Policy, PolicyKind};

const MAGIC: &[u8; 8] = b"V2GDSET\0";
const VERSION: u32 = 1;
const STD_FLOOR: f64 = 1e-6;
const RTG_TOL: f64 = 1e-9;

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error(transparent)]
    Episode(#[from] EpisodeError),
    #[error("cannot merge datasets with layouts {0:?} and {1:?}")]
    LayoutMismatch(ObservationLayout, ObservationLayout),
    #[error("dataset is empty")]
    Empty,
    #[error("context length must be at least 1")]
    ZeroContext,
    #[error("not a dataset file (bad magic)")]
    BadMagic,
    #[error("unsupported dataset version {found} (expected {VERSION})")]
    Version { found: u32 },
    #[error("trajectory {index}: {msg}")]
    Corrupt { index: usize, msg: String },
    #[error(transparent)]
    Codec(#[from] CodecError),
    #[error("{path}: {source}")]
    Io { path: String, source: std::io::Error },
}

/// One recorded episode. Series are flat, row-major per step.
#[derive(Clone, Debug, PartialEq)]
pub struct Trajectory {
    pub scenario_id: String,
    pub source: PolicyKind,
    pub obs_dim: usize,
    pub act_dim: usize,
    pub observations: Vec<f64>,
    pub actions: Vec<f64>,
    pub rewards: Vec<f64>,
    pub returns_to_go: Vec<f64>,
    pub total_return: f64,
}

impl Trajectory {
    pub fn new(scenario_id: String, source: PolicyKind, obs_dim: usize, act_dim: usize, observations: Vec<f64>, actions: Vec<f64>, rewards: Vec<f64>) -> Self {
        let returns_to_go = returns_to_go(&rewards);
        let total_return = returns_to_go.first().copied().unwrap_or(0.0);
        Self { scenario_id, source, obs_dim, act_dim, observations, actions, rewards, returns_to_go, total_return }
    }

    pub fn len(&self) -> usize {
        self.rewards.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rewards.is_empty()
    }

    pub fn observation(&self, t: usize) -> &[f64] {
        &self.observations[t * self.obs_dim..(t + 1) * self.obs_dim]
    }

    pub fn action(&self, t: usize) -> &[f64] {
        &self.actions[t * self.act_dim..(t + 1) * self.act_dim]
    }

    /// Checks series lengths and the suffix-sum identity.
    pub fn verify(&self) -> Result<(), String> {
        let t = self.len();
        if self.observations.len() != t * self.obs_dim || self.actions.len() != t * self.act_dim || self.returns_to_go.len() != t {
            return Err("series lengths disagree".into());
        }
        let expected = returns_to_go(&self.rewards);
        let scale = 1.0 + self.rewards.iter().map(|r| r.abs()).sum::<f64>();
        if expected.iter().zip(&self.returns_to_go).any(|(a, b)| (a - b).abs() > RTG_TOL * scale) {
            return Err("returns-to-go are not suffix sums of rewards".into());
        }
        if (self.total_return - expected.first().copied().unwrap_or(0.0)).abs() > RTG_TOL * scale {
            return Err("total return differs from the first return-to-go".into());
        }
        Ok(())
    }
}

/// Undiscounted suffix sums.
pub fn returns_to_go(rewards: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; rewards.len()];
    let mut acc = 0.0;
    for (o, r) in out.iter_mut().zip(rewards).rev() {
        acc += r;
        *o = acc;
    }
    out
}

/// Runs one episode and records what the policy saw, did and earned.
pub fn record_episode(env: &Env, policy: &mut dyn Policy, layout: &ObservationLayout, source: PolicyKind) -> Result<Trajectory, DatasetError> {
    let n = env.horizon();
    let obs_dim = layout.dim();
    let act_dim = env.num_chargers();
    let mut observations = Vec::with_capacity(n * obs_dim);
    let mut actions = Vec::with_capacity(n * act_dim);
    let mut rewards = Vec::with_capacity(n);
    run_episode(env, policy, layout, |rec| {
        observations.extend_from_slice(rec.features);
        actions.extend_from_slice(rec.actions);
        rewards.push(rec.outcome.reward);
    })?;
    Ok(Trajectory::new(env.scenario().id.clone(), source, obs_dim, act_dim, observations, actions, rewards))
}

/// Per-dimension z-score statistics.
#[derive(Clone, Debug, PartialEq)]
pub struct NormStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl NormStats {
    pub fn identity(dim: usize) -> Self {
        Self { mean: vec![0.0; dim], std: vec![1.0; dim] }
    }

    pub fn normalize(&self, x: &[f64], out: &mut [f64]) {
        for (k, o) in out.iter_mut().enumerate() {
            *o = (x[k] - self.mean[k]) / self.std[k];
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct OfflineDataset {
    pub layout: ObservationLayout,
    pub act_dim: usize,
    pub trajectories: Vec<Trajectory>,
    pub stats: NormStats,
    /// Largest absolute episode return (1 when every return is 0).
    pub return_scale: f64,
}

impl OfflineDataset {
    pub fn new(layout: ObservationLayout, trajectories: Vec<Trajectory>) -> Result<Self, DatasetError> {
        for (index, t) in trajectories.iter().enumerate() {
            if t.obs_dim != layout.dim() || t.act_dim != layout.chargers {
                return Err(DatasetError::Corrupt { index, msg: format!("dims ({}, {}) do not match layout", t.obs_dim, t.act_dim) });
            }
        }
        let (stats, return_scale) = compute_stats(layout.dim(), &trajectories);
        Ok(Self { layout, act_dim: layout.chargers, trajectories, stats, return_scale })
    }

    pub fn obs_dim(&self) -> usize {
        self.layout.dim()
    }

    pub fn len(&self) -> usize {
        self.trajectories.len()
    }

    pub fn is_empty(&self) -> bool {
        self.trajectories.is_empty()
    }

    pub fn count_by_source(&self, source: PolicyKind) -> usize {
        self.trajectories.iter().filter(|t| t.source == source).count()
    }

    pub fn mean_return(&self) -> f64 {
        if self.is_empty() {
            return 0.0;
        }
        self.trajectories.iter().map(|t| t.total_return).sum::<f64>() / self.len() as f64
    }

    pub fn best_return(&self) -> Option<f64> {
        self.trajectories.iter().map(|t| t.total_return).max_by(f64::total_cmp)
    }

    /// Concatenates trajectories and recomputes statistics over the union.
    pub fn merge(parts: &[&OfflineDataset]) -> Result<OfflineDataset, DatasetError> {
        let first = parts.first().ok_or(DatasetError::Empty)?;
        let mut all = Vec::new();
        for p in parts {
            if p.layout != first.layout {
                return Err(DatasetError::LayoutMismatch(first.layout, p.layout));
            }
            all.extend(p.trajectories.iter().cloned());
        }
        OfflineDataset::new(first.layout, all)
    }

    /// Uniform trajectory, then uniform window end; short windows are left-padded.
    pub fn sample_batch<R: Rng + ?Sized>(&self, rng: &mut R, batch: usize, context: usize) -> Result<Batch, DatasetError> {
        if context == 0 {
            return Err(DatasetError::ZeroContext);
        }
        let candidates: Vec<usize> = (0..self.len()).filter(|&i| !self.trajectories[i].is_empty()).collect();
        if candidates.is_empty() {
            return Err(DatasetError::Empty);
        }
        let mut b = Batch::empty(batch, context, self.obs_dim(), self.act_dim);
        for slot in 0..batch {
            let ti = candidates[rng.random_range(0..candidates.len())];
            let end = rng.random_range(0..self.trajectories[ti].len());
            self.fill_window(&mut b, slot, ti, end);
        }
        Ok(b)
    }

    /// Writes the window of trajectory `ti` ending at step `end` into row `slot`.
    pub fn fill_window(&self, b: &mut Batch, slot: usize, ti: usize, end: usize) {
        let traj = &self.trajectories[ti];
        let k = b.context;
        b.trajectory[slot] = ti;
        for j in 0..k {
            let pos = slot * k + j;
            let Some(t) = (end + j + 1).checked_sub(k) else { continue };
            b.mask[pos] = true;
            b.timesteps[pos] = t;
            b.rtg[pos] = traj.returns_to_go[t] / self.return_scale;
            let (od, ad) = (b.obs_dim, b.act_dim);
            b.raw_states[pos * od..(pos + 1) * od].copy_from_slice(traj.observation(t));
            self.stats.normalize(traj.observation(t), &mut b.states[pos * od..(pos + 1) * od]);
            b.actions[pos * ad..(pos + 1) * ad].copy_from_slice(traj.action(t));
            for c in 0..ad {
                b.action_mask[pos * ad + c] = occupied(&self.layout, traj.observation(t), c);
            }
        }
    }

    pub fn save(&self, path: &Path) -> Result<(), DatasetError> {
        std::fs::write(path, self.to_bytes()).map_err(|source| DatasetError::Io { path: path.display().to_string(), source })
    }

    pub fn load(path: &Path) -> Result<Self, DatasetError> {
        let bytes = std::fs::read(path).map_err(|source| DatasetError::Io { path: path.display().to_string(), source })?;
        Self::from_bytes(&bytes)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = ByteWriter::new();
        w.bytes(MAGIC);
        w.u32(VERSION);
        w.u32(self.layout.chargers as u32);
        w.u32(self.layout.lookahead as u32);
        w.f64s(&self.stats.mean);
        w.f64s(&self.stats.std);
        w.f64(self.return_scale);
        w.u64(self.trajectories.len() as u64);
        for t in &self.trajectories {
            w.str(&t.scenario_id);
            w.u8(source_code(t.source));
            w.u32(t.len() as u32);
            w.f64s(&t.observations);
            w.f64s(&t.actions);
            w.f64s(&t.rewards);
            w.f64s(&t.returns_to_go);
            w.f64(t.total_return);
        }
        w.into_inner()
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, DatasetError> {
        let mut r = ByteReader::new(bytes);
        if r.take(8, "magic")? != MAGIC {
            return Err(DatasetError::BadMagic);
        }
        let version = r.u32("version")?;
        if version != VERSION {
            return Err(DatasetError::Version { found: version });
        }
        let layout = ObservationLayout::new(r.u32("chargers")? as usize, r.u32("lookahead")? as usize);
        let (od, ad) = (layout.dim(), layout.chargers);
        let mean = r.f64s(od, "stats mean")?;
        let std = r.f64s(od, "stats std")?;
        let return_scale = r.f64("return scale")?;
        let count = r.u64("trajectory count")? as usize;
        let mut trajectories = Vec::with_capacity(count.min(1 << 20));
        for index in 0..count {
            let scenario_id = r.str("scenario id")?;
            let source = decode_source(r.u8("source")?).ok_or_else(|| DatasetError::Corrupt { index, msg: "unknown source label".into() })?;
            let n = r.u32("length")? as usize;
            let traj = Trajectory {
                scenario_id,
                source,
                obs_dim: od,
                act_dim: ad,
                observations: r.f64s(n * od, "observations")?,
                actions: r.f64s(n * ad, "actions")?,
                rewards: r.f64s(n, "rewards")?,
                returns_to_go: r.f64s(n, "returns-to-go")?,
                total_return: r.f64("total return")?,
            };
            traj.verify().map_err(|msg| DatasetError::Corrupt { index, msg })?;
            trajectories.push(traj);
        }
        r.finish()?;
        let ds = OfflineDataset { layout, act_dim: ad, trajectories, stats: NormStats { mean, std }, return_scale };
        let (stats, scale) = compute_stats(od, &ds.trajectories);
        if stats != ds.stats || scale != ds.return_scale {
            return Err(DatasetError::Corrupt { index: count, msg: "stored statistics do not match trajectories".into() });
        }
        Ok(ds)
    }
}

/// Occupancy flag of charger `c` in a raw observation.
pub fn occupied(layout: &ObservationLayout, raw: &[f64], c: usize) -> bool {
    raw[layout.global_dim() + c * CHARGER_BLOCK] > 0.5
}

fn compute_stats(dim: usize, trajectories: &[Trajectory]) -> (NormStats, f64) {
    let mut sum = vec![0.0; dim];
    let mut count = 0usize;
    for t in trajectories {
        for row in t.observations.chunks(dim) {
            for (s, x) in sum.iter_mut().zip(row) {
                *s += x;
            }
            count += 1;
        }
    }
    if count == 0 {
        return (NormStats::identity(dim), 1.0);
    }
    let mean: Vec<f64> = sum.iter().map(|s| s / count as f64).collect();
    let mut var = vec![0.0; dim];
    for t in trajectories {
        for row in t.observations.chunks(dim) {
            for k in 0..dim {
                var[k] += (row[k] - mean[k]).powi(2);
            }
        }
    }
    let std = var.iter().map(|v| (v / count as f64).sqrt().max(STD_FLOOR)).collect();
    let scale = trajectories.iter().map(|t| t.total_return.abs()).fold(0.0, f64::max);
    (NormStats { mean, std }, if scale > 0.0 { scale } else { 1.0 })
}

fn source_code(k: PolicyKind) -> u8 {
    PolicyKind::ALL.iter().position(|x| *x == k).expect("listed") as u8
}

fn decode_source(b: u8) -> Option<PolicyKind> {
    PolicyKind::ALL.get(b as usize).copied()
}

/// `B x K` windows; per-slot arrays are row-major `[slot][step]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    pub batch: usize,
    pub context: usize,
    pub obs_dim: usize,
    pub act_dim: usize,
    /// Source trajectory of each row.
    pub trajectory: Vec<usize>,
    /// z-scored observations.
    pub states: Vec<f64>,
    pub raw_states: Vec<f64>,
    pub actions: Vec<f64>,
    /// Returns-to-go divided by the dataset return scale.
    pub rtg: Vec<f64>,
    pub timesteps: Vec<usize>,
    /// `false` on left padding.
    pub mask: Vec<bool>,
    /// Whether each action entry belongs to an occupied charger.
    pub action_mask: Vec<bool>,
}

impl Batch {
    pub fn empty(batch: usize, context: usize, obs_dim: usize, act_dim: usize) -> Self {
        let slots = batch * context;
        Self {
            batch,
            context,
            obs_dim,
            act_dim,
            trajectory: vec![0; batch],
            states: vec![0.0; slots * obs_dim],
            raw_states: vec![0.0; slots * obs_dim],
            actions: vec![0.0; slots * act_dim],
            rtg: vec![0.0; slots],
            timesteps: vec![0; slots],
            mask: vec![false; slots],
            action_mask: vec![false; slots * act_dim],
        }
    }
}

/// Records `n` episodes of `kind` on scenarios produced by `scenario_for(i)`.
pub fn collect<S, P>(n: usize, threads: usize, layout: ObservationLayout, kind: PolicyKind, scenario_for: S, policy_for: P) -> Result<OfflineDataset, DatasetError>
where
    S: Fn(usize) -> Scenario + Sync,
    P: Fn(usize) -> Box<dyn Policy> + Sync,
{
    let results = crate::par::map_indexed(n, threads, |i| {
        let scenario = scenario_for(i);
        let env = Env::new(scenario, RewardWeights::default()).map_err(EpisodeError::from)?;
        let mut policy = policy_for(i);
        record_episode(&env, policy.as_mut(), &layout, kind)
    });
    OfflineDataset::new(layout, results.into_iter().collect::<Result<_, _>>()?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::policies::{Cafap, RandomPolicy};
    use crate::scenario::{generate, GeneratorConfig};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn small_config() -> GeneratorConfig {
        GeneratorConfig { chargers: 2, horizon: 8, step_duration: 1.0, sojourn_min_steps: 2, sojourn_max_steps: 4, ..Default::default() }
    }

    fn dataset(kind: PolicyKind, n: usize, seed: u64) -> OfflineDataset {
        let cfg = small_config();
        let layout = ObservationLayout::new(2, 3);
        collect(n, 1, layout, kind, |i| generate(&cfg.with_seed(seed + i as u64)).unwrap(), |i| match kind {
            PolicyKind::Random => Box::new(RandomPolicy::new(seed * 7919 + i as u64)),
            _ => Box::new(Cafap),
        })
        .unwrap()
    }

    #[test]
    fn returns_to_go_are_suffix_sums() {
        assert_eq!(returns_to_go(&[1.0, 2.0, 3.0]), vec![6.0, 5.0, 3.0]);
        assert!(returns_to_go(&[]).is_empty());
    }

    #[test]
    fn zero_reward_scenario_has_zero_rtg() {
        let mut sc = Scenario::empty(5, 1.0);
        sc.chargers.push(crate::env::ChargerSpec::symmetric(0, 10.0, 0.9));
        let env = Env::new(sc, RewardWeights::default()).unwrap();
        let t = record_episode(&env, &mut RandomPolicy::new(1), &ObservationLayout::new(1, 2), PolicyKind::Random).unwrap();
        assert_eq!(t.len(), 5);
        assert!(t.rewards.iter().chain(&t.returns_to_go).all(|x| *x == 0.0));
    }

    #[test]
    fn merge_with_empty_keeps_stats() {
        let d = dataset(PolicyKind::Cafap, 4, 1);
        let empty = OfflineDataset::new(d.layout, vec![]).unwrap();
        let m = OfflineDataset::merge(&[&d, &empty]).unwrap();
        assert_eq!(m, d);
    }

    #[test]
    fn merge_sizes_labels_and_mean() {
        let a = dataset(PolicyKind::Cafap, 5, 1);
        let b = dataset(PolicyKind::Random, 5, 100);
        let m = OfflineDataset::merge(&[&a, &b]).unwrap();
        assert_eq!(m.len(), 10);
        assert_eq!(m.count_by_source(PolicyKind::Random), 5);
        let (lo, hi) = if a.mean_return() < b.mean_return() { (a.mean_return(), b.mean_return()) } else { (b.mean_return(), a.mean_return()) };
        assert!(lo <= m.mean_return() && m.mean_return() <= hi);
        let other = OfflineDataset::new(ObservationLayout::new(3, 3), vec![]).unwrap();
        assert!(matches!(OfflineDataset::merge(&[&a, &other]), Err(DatasetError::LayoutMismatch(..))));
    }

    #[test]
    fn single_step_windows_are_fully_valid() {
        let d = dataset(PolicyKind::Cafap, 3, 2);
        let b = d.sample_batch(&mut ChaCha8Rng::seed_from_u64(0), 16, 1).unwrap();
        assert!(b.mask.iter().all(|m| *m));
    }

    #[test]
    fn window_at_start_is_left_padded() {
        let d = dataset(PolicyKind::Cafap, 1, 2);
        let mut b = Batch::empty(1, 4, d.obs_dim(), d.act_dim);
        d.fill_window(&mut b, 0, 0, 0);
        assert_eq!(b.mask, vec![false, false, false, true]);
        assert_eq!(b.rtg[3], d.trajectories[0].returns_to_go[0] / d.return_scale);
    }

    #[test]
    fn sampling_rejects_bad_requests() {
        let d = dataset(PolicyKind::Cafap, 1, 2);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(matches!(d.sample_batch(&mut rng, 1, 0), Err(DatasetError::ZeroContext)));
        let empty = OfflineDataset::new(d.layout, vec![]).unwrap();
        assert!(matches!(empty.sample_batch(&mut rng, 1, 2), Err(DatasetError::Empty)));
    }

    #[test]
    fn binary_round_trip_and_errors() {
        let d = OfflineDataset::merge(&[&dataset(PolicyKind::Cafap, 3, 5), &dataset(PolicyKind::Random, 2, 9)]).unwrap();
        let bytes = d.to_bytes();
        assert_eq!(OfflineDataset::from_bytes(&bytes).unwrap(), d);
        let err = OfflineDataset::from_bytes(&bytes[..bytes.len() - 3]).unwrap_err();
        assert!(err.to_string().contains("truncated"), "{err}");
        let mut bad = bytes.clone();
        bad[8] = 9;
        assert!(matches!(OfflineDataset::from_bytes(&bad), Err(DatasetError::Version { found: 9 })));
        assert!(matches!(OfflineDataset::from_bytes(b"nonsense"), Err(DatasetError::BadMagic)));
    }

    #[test]
    fn tampered_rewards_fail_verification() {
        let mut d = dataset(PolicyKind::Cafap, 1, 3);
        d.trajectories[0].rewards[0] += 1.0;
        assert!(matches!(OfflineDataset::from_bytes(&d.to_bytes()), Err(DatasetError::Corrupt { .. })));
    }
}
