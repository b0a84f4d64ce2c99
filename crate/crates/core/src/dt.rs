//! Decision Transformer over (return-to-go, state, action) tokens.
//!
//! States are embedded by the graph encoder; each step contributes three
//! tokens and the action for step `t` is read off the state token of
//! step `t`, so it never sees `a_t` or anything later.

use std::path::Path;
use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::{occupied, Batch, DatasetError, NormStats, OfflineDataset};
use crate::env::{Env, EnvError, EpisodeTotals, ObservationLayout, RewardWeights, Scenario};
use crate::graph::{GnnConfig, GnnEncoder, GraphBatch};
use crate::numerics::{AdamConfig, AttentionLayout, ComputeGraph, LayerNorm, Linear, NumericsError, OptimizerState, ParamId, ParamStore, Tensor, Var};
use crate::policies::{run_episode, EpisodeError, Observation, Policy, PolicyError};

#[derive(Debug, Error)]
pub enum DtError {
    #[error(transparent)]
    Numerics(#[from] NumericsError),
    #[error(transparent)]
    Dataset(#[from] DatasetError),
    #[error(transparent)]
    Episode(#[from] EpisodeError),
    #[error(transparent)]
    Env(#[from] EnvError),
    #[error("invalid config: {0}")]
    Config(String),
    #[error("window has context {got}, model expects {expected}")]
    ContextMismatch { expected: usize, got: usize },
    #[error("non-finite loss {loss} at step {step} (gradient norm {grad_norm})")]
    NonFiniteLoss { step: usize, loss: f64, grad_norm: f64 },
    #[error("checkpoint: {0}")]
    Checkpoint(String),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DtConfig {
    /// Steps per window (K).
    pub context: usize,
    pub d_model: usize,
    pub layers: usize,
    pub heads: usize,
    pub ff_width: usize,
    pub dropout: f64,
    pub gnn_hidden: usize,
    pub gnn_layers: usize,
    /// Rows of the timestep embedding table; later steps share the last row.
    pub max_timestep: usize,
    pub lr: f64,
    pub warmup_steps: usize,
    /// Floor of the cosine schedule as a fraction of `lr`.
    pub min_lr_ratio: f64,
    pub steps: usize,
    pub batch_size: usize,
    pub weight_decay: f64,
    pub grad_clip: f64,
    pub seed: u64,
}

impl Default for DtConfig {
    fn default() -> Self {
        Self {
            context: 24,
            d_model: 128,
            layers: 3,
            heads: 4,
            ff_width: 512,
            dropout: 0.1,
            gnn_hidden: 64,
            gnn_layers: 2,
            max_timestep: 96,
            lr: 1e-3,
            warmup_steps: 500,
            min_lr_ratio: 0.1,
            steps: 20_000,
            batch_size: 64,
            weight_decay: 1e-4,
            grad_clip: 1.0,
            seed: 0,
        }
    }
}

impl DtConfig {
    pub fn validate(&self) -> Result<(), DtError> {
        let mut errs = Vec::new();
        if self.context == 0 {
            errs.push("context must be at least 1");
        }
        if self.heads == 0 || !self.d_model.is_multiple_of(self.heads) {
            errs.push("d_model must be divisible by heads");
        }
        if !(0.0..1.0).contains(&self.dropout) {
            errs.push("dropout must lie in [0, 1)");
        }
        if self.max_timestep == 0 || self.batch_size == 0 || self.ff_width == 0 || self.gnn_hidden == 0 {
            errs.push("sizes must be positive");
        }
        if self.lr.is_nan() || self.lr <= 0.0 || !(0.0..=1.0).contains(&self.min_lr_ratio) {
            errs.push("need lr > 0 and min_lr_ratio in [0, 1]");
        }
        if errs.is_empty() {
            Ok(())
        } else {
            Err(DtError::Config(errs.join("; ")))
        }
    }

    /// Linear warmup, then cosine decay to `min_lr_ratio * lr`.
    pub fn lr_at(&self, step: usize) -> f64 {
        if step < self.warmup_steps {
            return self.lr * (step + 1) as f64 / self.warmup_steps as f64;
        }
        let span = self.steps.saturating_sub(self.warmup_steps).max(1) as f64;
        let progress = ((step - self.warmup_steps) as f64 / span).min(1.0);
        let cos = 0.5 * (1.0 + (std::f64::consts::PI * progress).cos());
        self.lr * (self.min_lr_ratio + (1.0 - self.min_lr_ratio) * cos)
    }
}

#[derive(Clone, Debug)]
struct Block {
    ln1: LayerNorm,
    q: Linear,
    k: Linear,
    v: Linear,
    o: Linear,
    ln2: LayerNorm,
    ff1: Linear,
    ff2: Linear,
}

/// Architecture: parameter handles into a [`ParamStore`].
#[derive(Clone, Debug)]
pub struct DtModel {
    pub config: DtConfig,
    pub layout: ObservationLayout,
    gnn: GnnEncoder,
    state_proj: Linear,
    rtg_embed: Linear,
    action_embed: Linear,
    time_table: ParamId,
    embed_norm: LayerNorm,
    blocks: Vec<Block>,
    final_norm: LayerNorm,
    head: Linear,
}

impl DtModel {
    pub fn new(store: &mut ParamStore, layout: ObservationLayout, config: DtConfig) -> Result<Self, DtError> {
        config.validate()?;
        if layout.chargers == 0 {
            return Err(DtError::Config("the station needs at least one charger".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let d = config.d_model;
        let a = layout.chargers;
        let gnn_cfg = GnnConfig { hidden: config.gnn_hidden, layers: config.gnn_layers, d_model: d };
        let gnn = GnnEncoder::new(store, "gnn", layout, gnn_cfg, &mut rng);
        let state_proj = Linear::new(store, "embed.state", (a + 1) * d, d, true, &mut rng);
        let rtg_embed = Linear::new(store, "embed.rtg", 1, d, true, &mut rng);
        let action_embed = Linear::new(store, "embed.action", a, d, true, &mut rng);
        let time_table = store.add_glorot("embed.time", config.max_timestep, d, &mut rng);
        let embed_norm = LayerNorm::new(store, "embed.ln", d);
        let blocks = (0..config.layers)
            .map(|l| {
                let p = format!("block{l}");
                Block {
                    ln1: LayerNorm::new(store, &format!("{p}.ln1"), d),
                    q: Linear::new(store, &format!("{p}.q"), d, d, true, &mut rng),
                    k: Linear::new(store, &format!("{p}.k"), d, d, true, &mut rng),
                    v: Linear::new(store, &format!("{p}.v"), d, d, true, &mut rng),
                    o: Linear::new(store, &format!("{p}.o"), d, d, true, &mut rng),
                    ln2: LayerNorm::new(store, &format!("{p}.ln2"), d),
                    ff1: Linear::new(store, &format!("{p}.ff1"), d, config.ff_width, true, &mut rng),
                    ff2: Linear::new(store, &format!("{p}.ff2"), config.ff_width, d, true, &mut rng),
                }
            })
            .collect();
        let final_norm = LayerNorm::new(store, "final.ln", d);
        let head = Linear::new(store, "head", d, a, true, &mut rng);
        Ok(Self { config, layout, gnn, state_proj, rtg_embed, action_embed, time_table, embed_norm, blocks, final_norm, head })
    }

    /// Predicted actions `[batch * context, chargers]` in `(-1, 1)`.
    pub fn forward(&self, g: &mut ComputeGraph, store: &ParamStore, batch: &Batch, mut dropout: Option<&mut ChaCha8Rng>) -> Result<Var, DtError> {
        let cfg = &self.config;
        if batch.context != cfg.context {
            return Err(DtError::ContextMismatch { expected: cfg.context, got: batch.context });
        }
        let (b, k, d, a) = (batch.batch, batch.context, cfg.d_model, self.layout.chargers);
        let slots = b * k;

        let graphs = GraphBatch::from_observations(&self.layout, &batch.raw_states, &batch.states, slots);
        let enc = self.gnn.encode(g, store, &graphs)?;
        let per_charger = g.reshape(enc.chargers, &[slots, a * d])?;
        let joint = g.concat(&[enc.global, per_charger], 1)?;
        let state = self.state_proj.forward(g, store, joint)?;

        let rtg = g.input(Tensor::new(vec![slots, 1], batch.rtg.clone())?);
        let rtg = self.rtg_embed.forward(g, store, rtg)?;
        let masked_actions: Vec<f64> = batch.actions.iter().zip(&batch.action_mask).map(|(x, m)| if *m { *x } else { 0.0 }).collect();
        let act = g.input(Tensor::new(vec![slots, a], masked_actions)?);
        let act = self.action_embed.forward(g, store, act)?;

        let table = g.param(store, self.time_table);
        let steps: Vec<usize> = batch.timesteps.iter().map(|t| (*t).min(cfg.max_timestep - 1)).collect();
        let time = g.embedding(table, &steps)?;
        let rtg = g.add(rtg, time)?;
        let state = g.add(state, time)?;
        let act = g.add(act, time)?;

        let stacked = g.concat(&[rtg, state, act], 0)?;
        let order: Vec<usize> = (0..b).flat_map(|bi| (0..k).flat_map(move |t| (0..3).map(move |ty| ty * slots + bi * k + t))).collect();
        let tokens = g.gather_rows(stacked, &order)?;
        let mut x = self.embed_norm.forward(g, store, tokens)?;

        let key_valid: Vec<bool> = (0..b).flat_map(|bi| (0..k).flat_map(move |t| std::iter::repeat_n(batch.mask[bi * k + t], 3))).collect();
        let layout = AttentionLayout { batch: b, seq: 3 * k, heads: cfg.heads, key_valid: Some(key_valid) };
        for block in &self.blocks {
            let h = block.ln1.forward(g, store, x)?;
            let q = block.q.forward(g, store, h)?;
            let kk = block.k.forward(g, store, h)?;
            let v = block.v.forward(g, store, h)?;
            let att = g.causal_attention(q, kk, v, &layout)?;
            let mut att = block.o.forward(g, store, att)?;
            if let Some(rng) = dropout.as_deref_mut() {
                att = g.dropout(att, cfg.dropout, rng)?;
            }
            x = g.add(x, att)?;
            let h = block.ln2.forward(g, store, x)?;
            let h = block.ff1.forward(g, store, h)?;
            let h = g.gelu(h);
            let mut h = block.ff2.forward(g, store, h)?;
            if let Some(rng) = dropout.as_deref_mut() {
                h = g.dropout(h, cfg.dropout, rng)?;
            }
            x = g.add(x, h)?;
        }
        let x = self.final_norm.forward(g, store, x)?;
        let state_rows: Vec<usize> = (0..b).flat_map(|bi| (0..k).map(move |t| bi * 3 * k + 3 * t + 1)).collect();
        let s = g.gather_rows(x, &state_rows)?;
        let out = self.head.forward(g, store, s)?;
        Ok(g.tanh(out))
    }

    /// Masked mean squared error over valid slots and occupied chargers.
    pub fn loss(&self, g: &mut ComputeGraph, store: &ParamStore, batch: &Batch, dropout: Option<&mut ChaCha8Rng>) -> Result<Var, DtError> {
        let pred = self.forward(g, store, batch, dropout)?;
        let a = self.layout.chargers;
        let weights: Vec<f64> = (0..batch.actions.len()).map(|i| if batch.mask[i / a] && batch.action_mask[i] { 1.0 } else { 0.0 }).collect();
        let count: f64 = weights.iter().sum();
        let target = g.input(Tensor::new(vec![batch.batch * batch.context, a], batch.actions.clone())?);
        let w = g.input(Tensor::new(vec![batch.batch * batch.context, a], weights)?);
        let diff = g.sub(pred, target)?;
        let sq = g.mul(diff, diff)?;
        let sq = g.mul(sq, w)?;
        let total = g.sum(sq);
        Ok(g.scale(total, 1.0 / count.max(1.0)))
    }
}

/// A model with its parameters and the dataset statistics it was trained on.
#[derive(Clone, Debug)]
pub struct DtAgent {
    pub model: DtModel,
    pub params: ParamStore,
    pub stats: NormStats,
    pub return_scale: f64,
    /// Best episode return in the training data.
    pub best_return: f64,
}

#[derive(Serialize, Deserialize)]
struct CheckpointMeta {
    config: DtConfig,
    layout: ObservationLayout,
    mean: Vec<f64>,
    std: Vec<f64>,
    return_scale: f64,
    best_return: f64,
}

impl DtAgent {
    pub fn new(dataset: &OfflineDataset, config: DtConfig) -> Result<Self, DtError> {
        let mut params = ParamStore::new();
        let model = DtModel::new(&mut params, dataset.layout, config)?;
        Ok(Self {
            model,
            params,
            stats: dataset.stats.clone(),
            return_scale: dataset.return_scale,
            best_return: dataset.best_return().unwrap_or(0.0),
        })
    }

    /// Conditioning target used when none is given: slightly below the best return.
    pub fn auto_target(&self) -> f64 {
        self.best_return - 0.1 * self.best_return.abs()
    }

    pub fn save(&self, path: &Path) -> Result<(), DtError> {
        let meta = CheckpointMeta {
            config: self.model.config.clone(),
            layout: self.model.layout,
            mean: self.stats.mean.clone(),
            std: self.stats.std.clone(),
            return_scale: self.return_scale,
            best_return: self.best_return,
        };
        let text = serde_json::to_string(&meta).expect("metadata serializes");
        Ok(self.params.save(path, &text)?)
    }

    pub fn load(path: &Path) -> Result<Self, DtError> {
        let (stored, text) = ParamStore::load(path)?;
        let meta: CheckpointMeta = serde_json::from_str(&text).map_err(|e| DtError::Checkpoint(format!("metadata: {e}")))?;
        let mut params = ParamStore::new();
        let model = DtModel::new(&mut params, meta.layout, meta.config)?;
        if stored.len() != params.len() {
            return Err(DtError::Checkpoint(format!("{} records, architecture has {}", stored.len(), params.len())));
        }
        params.load_values_from(&stored)?;
        Ok(Self { model, params, stats: NormStats { mean: meta.mean, std: meta.std }, return_scale: meta.return_scale, best_return: meta.best_return })
    }

    /// Deterministic predictions for a batch.
    pub fn predict(&self, batch: &Batch) -> Result<Vec<f64>, DtError> {
        let mut g = ComputeGraph::new();
        let out = self.model.forward(&mut g, &self.params, batch, None)?;
        Ok(g.value(out).data().to_vec())
    }

    /// Mean squared error of the final-slot prediction over every step of
    /// every trajectory (occupied chargers only, no dropout).
    pub fn dataset_mse(&self, dataset: &OfflineDataset) -> Result<f64, DtError> {
        let (k, a) = (self.model.config.context, dataset.act_dim);
        let (mut total, mut count) = (0.0, 0usize);
        for (ti, traj) in dataset.trajectories.iter().enumerate() {
            for end in 0..traj.len() {
                let mut b = Batch::empty(1, k, dataset.obs_dim(), a);
                dataset.fill_window(&mut b, 0, ti, end);
                let pred = self.predict(&b)?;
                for c in (0..a).filter(|&c| b.action_mask[(k - 1) * a + c]) {
                    total += (pred[(k - 1) * a + c] - traj.action(end)[c]).powi(2);
                    count += 1;
                }
            }
        }
        Ok(if count > 0 { total / count as f64 } else { 0.0 })
    }
}

pub struct TrainReport {
    pub losses: Vec<f64>,
}

/// One optimizer step on `batch`; returns the loss before the update.
pub fn train_step(agent: &mut DtAgent, opt: &mut OptimizerState, batch: &Batch, rng: &mut ChaCha8Rng, step: usize) -> Result<f64, DtError> {
    let cfg = agent.model.config.clone();
    let mut g = ComputeGraph::new();
    let dropout = (cfg.dropout > 0.0).then_some(rng);
    let loss = agent.model.loss(&mut g, &agent.params, batch, dropout)?;
    let value = g.value(loss).item();
    let grads = g.backward(loss)?;
    agent.params.zero_grad();
    g.accumulate_param_grads(&grads, &mut agent.params);
    drop(g);
    agent.params.fill_missing_grads();
    let norm = agent.params.grad_norm();
    if !value.is_finite() || !norm.is_finite() {
        return Err(DtError::NonFiniteLoss { step, loss: value, grad_norm: norm });
    }
    if cfg.grad_clip > 0.0 && norm > cfg.grad_clip {
        agent.params.scale_grads(cfg.grad_clip / norm);
    }
    opt.set_lr(cfg.lr_at(step));
    opt.step(&mut agent.params)?;
    Ok(value)
}

pub fn optimizer_for(agent: &DtAgent) -> OptimizerState {
    let cfg = &agent.model.config;
    OptimizerState::new(AdamConfig { lr: cfg.lr, weight_decay: cfg.weight_decay, ..AdamConfig::default() }, &agent.params)
}

/// Trains from scratch; `on_step(step, loss)` observes progress.
pub fn train<F: FnMut(usize, f64)>(dataset: &OfflineDataset, config: DtConfig, mut on_step: F) -> Result<(DtAgent, TrainReport), DtError> {
    if dataset.is_empty() {
        return Err(DtError::Dataset(DatasetError::Empty));
    }
    let mut agent = DtAgent::new(dataset, config.clone())?;
    let mut opt = optimizer_for(&agent);
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0x5eed);
    let mut losses = Vec::with_capacity(config.steps);
    for step in 0..config.steps {
        let batch = dataset.sample_batch(&mut rng, config.batch_size, config.context)?;
        let loss = train_step(&mut agent, &mut opt, &batch, &mut rng, step)?;
        losses.push(loss);
        on_step(step, loss);
    }
    Ok((agent, TrainReport { losses }))
}

#[derive(Clone, Debug)]
struct HistoryStep {
    raw: Vec<f64>,
    norm: Vec<f64>,
    rtg: f64,
    t: usize,
    action: Vec<f64>,
}

/// Return-conditioned rollout policy.
pub struct DtPolicy {
    agent: Arc<DtAgent>,
    pub target_return: f64,
    rtg: f64,
    history: Vec<HistoryStep>,
}

impl DtPolicy {
    pub fn new(agent: Arc<DtAgent>, target_return: f64) -> Self {
        Self { agent, target_return, rtg: target_return, history: Vec::new() }
    }

    /// Current (unnormalized) return-to-go.
    pub fn return_to_go(&self) -> f64 {
        self.rtg
    }

    fn window(&self) -> Batch {
        let agent = &self.agent;
        let layout = agent.model.layout;
        let k = agent.model.config.context;
        let (od, ad) = (layout.dim(), layout.chargers);
        let mut b = Batch::empty(1, k, od, ad);
        let start = self.history.len().saturating_sub(k);
        let pad = k - (self.history.len() - start);
        for (j, h) in self.history[start..].iter().enumerate() {
            let pos = pad + j;
            b.mask[pos] = true;
            b.timesteps[pos] = h.t;
            b.rtg[pos] = h.rtg / agent.return_scale;
            b.raw_states[pos * od..(pos + 1) * od].copy_from_slice(&h.raw);
            b.states[pos * od..(pos + 1) * od].copy_from_slice(&h.norm);
            b.actions[pos * ad..(pos + 1) * ad].copy_from_slice(&h.action);
            for c in 0..ad {
                b.action_mask[pos * ad + c] = occupied(&layout, &h.raw, c);
            }
        }
        b
    }
}

impl Policy for DtPolicy {
    fn name(&self) -> &'static str {
        "dt"
    }

    fn reset(&mut self, scenario: &Scenario) -> Result<(), PolicyError> {
        if scenario.chargers.len() != self.agent.model.layout.chargers {
            let msg = format!("model drives {} chargers, scenario has {}", self.agent.model.layout.chargers, scenario.chargers.len());
            return Err(PolicyError::backend("dt", msg));
        }
        self.rtg = self.target_return;
        self.history.clear();
        Ok(())
    }

    fn act(&mut self, obs: &Observation<'_>) -> Result<Vec<f64>, PolicyError> {
        if let (Some(r), false) = (obs.last_reward, self.history.is_empty()) {
            self.rtg -= r;
        }
        let layout = self.agent.model.layout;
        let raw = obs.view.features(&layout);
        let mut norm = vec![0.0; raw.len()];
        self.agent.stats.normalize(&raw, &mut norm);
        self.history.push(HistoryStep { raw, norm, rtg: self.rtg, t: obs.view.t(), action: vec![0.0; layout.chargers] });
        let ad = layout.chargers;
        let pred = self.agent.predict(&self.window()).map_err(|e| PolicyError::backend("dt", e))?;
        let k = self.agent.model.config.context;
        let action: Vec<f64> = pred[(k - 1) * ad..k * ad].iter().map(|a| a.clamp(-1.0, 1.0)).collect();
        self.history.last_mut().expect("pushed above").action = action.clone();
        Ok(action)
    }
}

/// Runs one return-conditioned episode.
pub fn rollout(agent: Arc<DtAgent>, scenario: &Scenario, target_return: f64) -> Result<EpisodeTotals, DtError> {
    let layout = agent.model.layout;
    if layout.chargers != scenario.chargers.len() {
        return Err(DtError::Config(format!("model drives {} chargers, scenario has {}", layout.chargers, scenario.chargers.len())));
    }
    let env = Env::new(scenario.clone(), RewardWeights::default())?;
    let mut policy = DtPolicy::new(agent, target_return);
    Ok(run_episode(&env, &mut policy, &layout, |_| {})?.totals)
}
