//! Typed station graphs and a message-passing encoder over them.
//!
//! Node features are read straight from an observation vector (see
//! [`ObservationLayout`]), so a graph can be rebuilt from any recorded
//! step. Batches keep nodes sorted by type so every per-type map acts on
//! one contiguous block of rows.

use std::rc::Rc;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::env::{ObservationLayout, StateView, CHARGER_BLOCK, EV_FEATURES};
use crate::numerics::{ComputeGraph, Linear, NumericsError, ParamStore, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum NodeType {
    Charger,
    Ev,
    Transformer,
    Cpo,
}

impl NodeType {
    pub const ALL: [NodeType; 4] = [Self::Charger, Self::Ev, Self::Transformer, Self::Cpo];

    fn slot(self) -> usize {
        self as usize
    }

    fn tag(self) -> &'static str {
        match self {
            Self::Charger => "charger",
            Self::Ev => "ev",
            Self::Transformer => "transformer",
            Self::Cpo => "cpo",
        }
    }

    /// Raw feature width for this node type.
    pub fn width(self, layout: &ObservationLayout) -> usize {
        match self {
            Self::Ev => EV_FEATURES,
            Self::Charger => CHARGER_BLOCK - EV_FEATURES,
            Self::Transformer => 2,
            Self::Cpo => 2 + 2 * layout.lookahead,
        }
    }
}

/// One station snapshot as a typed graph.
///
/// Node order: chargers by index, connected EVs by charger, transformer, CPO.
#[derive(Clone, Debug, PartialEq)]
pub struct GraphState {
    pub types: Vec<NodeType>,
    pub features: Vec<Vec<f64>>,
    /// Directed edges; every link is stored in both directions.
    pub edges: Vec<(usize, usize)>,
    /// Node id of each charger.
    pub charger_nodes: Vec<usize>,
    pub transformer: usize,
    pub cpo: usize,
}

impl GraphState {
    pub fn from_view(view: &StateView<'_>, layout: &ObservationLayout) -> Self {
        let f = view.features(layout);
        Self::from_features(layout, &f, &f)
    }

    /// Structure comes from `raw` (occupancy flags), values from `values`
    /// (typically the normalized copy of `raw`).
    pub fn from_features(layout: &ObservationLayout, raw: &[f64], values: &[f64]) -> Self {
        let n = layout.chargers;
        let mut types = Vec::new();
        let mut features = Vec::new();
        let mut edges = Vec::new();
        for c in 0..n {
            let b = layout.charger_block(c);
            let v = &values[b];
            types.push(NodeType::Charger);
            features.push(vec![v[1 + EV_FEATURES], v[2 + EV_FEATURES], v[0]]);
        }
        for c in 0..n {
            if raw[layout.charger_block(c).start] > 0.5 {
                let v = &values[layout.charger_block(c)];
                let id = types.len();
                types.push(NodeType::Ev);
                features.push(v[1..=EV_FEATURES].to_vec());
                edges.push((id, c));
                edges.push((c, id));
            }
        }
        let transformer = types.len();
        types.push(NodeType::Transformer);
        features.push(vec![values[layout.limits().start], values[layout.utilization()]]);
        let cpo = types.len();
        types.push(NodeType::Cpo);
        let mut g = vec![values[0], values[1]];
        g.extend_from_slice(&values[layout.prices()]);
        g.extend_from_slice(&values[layout.limits()]);
        features.push(g);
        for c in 0..n {
            edges.push((c, transformer));
            edges.push((transformer, c));
        }
        edges.push((transformer, cpo));
        edges.push((cpo, transformer));
        Self { types, features, edges, charger_nodes: (0..n).collect(), transformer, cpo }
    }

    pub fn num_nodes(&self) -> usize {
        self.types.len()
    }

    pub fn neighbors(&self, v: usize) -> Vec<usize> {
        self.edges.iter().filter(|(_, d)| *d == v).map(|(s, _)| *s).collect()
    }
}

/// Many graphs packed into one node matrix, sorted by node type.
#[derive(Clone, Debug)]
pub struct GraphBatch {
    pub graphs: usize,
    pub chargers: usize,
    /// Per node type: stacked raw features `[count, width]`, `None` when absent.
    pub inputs: [Option<Tensor>; 4],
    pub adjacency: Rc<Vec<Vec<usize>>>,
    /// Row of charger `c` in graph `g` at `g * chargers + c`.
    pub charger_rows: Vec<usize>,
    /// Row of each graph's CPO node.
    pub cpo_rows: Vec<usize>,
    /// Row in the batch of every node of every graph.
    pub node_rows: Vec<Vec<usize>>,
}

impl GraphBatch {
    pub fn new(layout: &ObservationLayout, graphs: &[GraphState]) -> Self {
        let mut counts = [0usize; 4];
        for g in graphs {
            for t in &g.types {
                counts[t.slot()] += 1;
            }
        }
        let mut offset = [0usize; 4];
        for k in 1..4 {
            offset[k] = offset[k - 1] + counts[k - 1];
        }
        let total: usize = counts.iter().sum();
        let mut cursor = offset;
        let mut data: [Vec<f64>; 4] = Default::default();
        let mut node_rows = Vec::with_capacity(graphs.len());
        for g in graphs {
            let rows: Vec<usize> = g
                .types
                .iter()
                .zip(&g.features)
                .map(|(t, f)| {
                    let s = t.slot();
                    data[s].extend_from_slice(f);
                    cursor[s] += 1;
                    cursor[s] - 1
                })
                .collect();
            node_rows.push(rows);
        }
        let mut adjacency = vec![Vec::new(); total];
        for (g, rows) in graphs.iter().zip(&node_rows) {
            for &(s, d) in &g.edges {
                adjacency[rows[d]].push(rows[s]);
            }
        }
        let inputs = NodeType::ALL.map(|t| {
            let s = t.slot();
            (counts[s] > 0).then(|| Tensor::new(vec![counts[s], t.width(layout)], std::mem::take(&mut data[s])).expect("consistent widths"))
        });
        let charger_rows = graphs.iter().zip(&node_rows).flat_map(|(g, rows)| g.charger_nodes.iter().map(|&v| rows[v]).collect::<Vec<_>>()).collect();
        let cpo_rows = graphs.iter().zip(&node_rows).map(|(g, rows)| rows[g.cpo]).collect();
        Self { graphs: graphs.len(), chargers: layout.chargers, inputs, adjacency: Rc::new(adjacency), charger_rows, cpo_rows, node_rows }
    }

    /// Builds graphs for `count` observations stored row-major in `raw`/`values`.
    pub fn from_observations(layout: &ObservationLayout, raw: &[f64], values: &[f64], count: usize) -> Self {
        let d = layout.dim();
        let graphs: Vec<GraphState> = (0..count).map(|i| GraphState::from_features(layout, &raw[i * d..(i + 1) * d], &values[i * d..(i + 1) * d])).collect();
        Self::new(layout, &graphs)
    }

    fn type_counts(&self) -> [usize; 4] {
        self.inputs.each_ref().map(|t| t.as_ref().map_or(0, |t| t.shape()[0]))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct GnnConfig {
    pub hidden: usize,
    pub layers: usize,
    pub d_model: usize,
}

impl Default for GnnConfig {
    fn default() -> Self {
        Self { hidden: 64, layers: 2, d_model: 128 }
    }
}

/// Two affine maps with a ReLU between them.
#[derive(Clone, Copy, Debug)]
pub struct Mlp {
    pub first: Linear,
    pub second: Linear,
}

impl Mlp {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, name: &str, input: usize, hidden: usize, output: usize, rng: &mut R) -> Self {
        Self {
            first: Linear::new(store, &format!("{name}.0"), input, hidden, true, rng),
            second: Linear::new(store, &format!("{name}.1"), hidden, output, true, rng),
        }
    }

    pub fn forward(&self, g: &mut ComputeGraph, store: &ParamStore, x: Var) -> Result<Var, NumericsError> {
        let h = self.first.forward(g, store, x)?;
        let h = g.relu(h);
        self.second.forward(g, store, h)
    }
}

#[derive(Clone, Copy, Debug)]
struct MessageLayer {
    self_map: [Linear; 4],
    nbr_map: [Linear; 4],
}

/// Per-type encoders, mean-aggregation message passing and a shared projection.
#[derive(Clone, Debug)]
pub struct GnnEncoder {
    pub config: GnnConfig,
    pub layout: ObservationLayout,
    encoders: [Mlp; 4],
    layers: Vec<MessageLayer>,
    output: Linear,
}

/// Encoder outputs for a batch of graphs.
#[derive(Clone, Copy, Debug)]
pub struct Encoded {
    /// `[graphs * chargers, d_model]`, graph-major.
    pub chargers: Var,
    /// `[graphs, d_model]` from the CPO node.
    pub global: Var,
    /// `[nodes, hidden]` before projection, in batch row order.
    pub nodes: Var,
}

impl GnnEncoder {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, prefix: &str, layout: ObservationLayout, config: GnnConfig, rng: &mut R) -> Self {
        let h = config.hidden;
        let encoders = NodeType::ALL.map(|t| Mlp::new(store, &format!("{prefix}.enc.{}", t.tag()), t.width(&layout), h, h, rng));
        let layers = (0..config.layers)
            .map(|l| MessageLayer {
                self_map: NodeType::ALL.map(|t| Linear::new(store, &format!("{prefix}.mp{l}.self.{}", t.tag()), h, h, true, rng)),
                nbr_map: NodeType::ALL.map(|t| Linear::new(store, &format!("{prefix}.mp{l}.nbr.{}", t.tag()), h, h, false, rng)),
            })
            .collect();
        let output = Linear::new(store, &format!("{prefix}.out"), h, config.d_model, true, rng);
        Self { config, layout, encoders, layers, output }
    }

    pub fn encode(&self, g: &mut ComputeGraph, store: &ParamStore, batch: &GraphBatch) -> Result<Encoded, NumericsError> {
        if batch.chargers != self.layout.chargers {
            return Err(NumericsError::InvalidArgument {
                op: "gnn_encode",
                msg: format!("batch has {} chargers, encoder expects {}", batch.chargers, self.layout.chargers),
            });
        }
        let counts = batch.type_counts();
        let mut blocks = Vec::new();
        for (s, input) in batch.inputs.iter().enumerate() {
            if let Some(x) = input {
                let want = NodeType::ALL[s].width(&self.layout);
                if x.shape()[1] != want {
                    return Err(NumericsError::ShapeMismatch { op: "gnn_encode", lhs: x.shape().to_vec(), rhs: vec![x.shape()[0], want] });
                }
                let xv = g.input(x.clone());
                blocks.push(self.encoders[s].forward(g, store, xv)?);
            }
        }
        let mut h = concat_rows(g, &blocks)?;
        for layer in &self.layers {
            let m = g.neighbor_mean(h, batch.adjacency.clone())?;
            let mut out = Vec::new();
            let mut start = 0;
            for (s, &count) in counts.iter().enumerate() {
                if count == 0 {
                    continue;
                }
                let hs = g.slice(h, 0, start, start + count)?;
                let ms = g.slice(m, 0, start, start + count)?;
                let a = layer.self_map[s].forward(g, store, hs)?;
                let b = layer.nbr_map[s].forward(g, store, ms)?;
                let z = g.add(a, b)?;
                out.push(g.relu(z));
                start += count;
            }
            h = concat_rows(g, &out)?;
        }
        let chargers = if batch.charger_rows.is_empty() {
            g.input(Tensor::zeros(&[0, self.config.d_model]))
        } else {
            let rows = g.gather_rows(h, &batch.charger_rows)?;
            self.output.forward(g, store, rows)?
        };
        let cpo = g.gather_rows(h, &batch.cpo_rows)?;
        let global = self.output.forward(g, store, cpo)?;
        Ok(Encoded { chargers, global, nodes: h })
    }
}

fn concat_rows(g: &mut ComputeGraph, blocks: &[Var]) -> Result<Var, NumericsError> {
    if blocks.len() == 1 {
        Ok(blocks[0])
    } else {
        g.concat(blocks, 0)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::env::{ChargerSpec, Env, EvSession, RewardWeights, Scenario};
    use crate::numerics::gradcheck::{check_params, projection_loss};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn layout() -> ObservationLayout {
        ObservationLayout::new(3, 2)
    }

    fn random_obs(rng: &mut ChaCha8Rng, occupied: &[bool]) -> Vec<f64> {
        let l = layout();
        let mut f: Vec<f64> = (0..l.dim()).map(|_| rng.random_range(-1.0..1.0)).collect();
        for (c, &o) in occupied.iter().enumerate() {
            f[l.charger_block(c).start] = if o { 1.0 } else { 0.0 };
        }
        f
    }

    fn encoder(layers: usize, seed: u64) -> (ParamStore, GnnEncoder) {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let cfg = GnnConfig { hidden: 8, layers, d_model: 6 };
        let enc = GnnEncoder::new(&mut store, "gnn", layout(), cfg, &mut rng);
        (store, enc)
    }

    fn run(enc: &GnnEncoder, store: &ParamStore, obs: &[f64]) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
        let l = layout();
        let batch = GraphBatch::from_observations(&l, obs, obs, obs.len() / l.dim());
        let mut g = ComputeGraph::new();
        let e = enc.encode(&mut g, store, &batch).unwrap();
        (g.value(e.chargers).data().to_vec(), g.value(e.global).data().to_vec(), g.value(e.nodes).data().to_vec())
    }

    #[test]
    fn node_count_and_structure() {
        let sc = Scenario {
            id: "g".into(),
            horizon: 4,
            step_duration: 1.0,
            chargers: (0..3).map(|i| ChargerSpec::symmetric(i, 10.0, 0.9)).collect(),
            sessions: vec![EvSession {
                id: 0,
                charger_id: 1,
                arrival_step: 0,
                departure_step: 1,
                battery_capacity: 10.0,
                initial_soc: 2.0,
                desired_energy_at_departure: 8.0,
                min_soc: 0.0,
            }],
            prices: vec![0.1; 4],
            power_limits: vec![5.0; 4],
        };
        let env = Env::new(sc, RewardWeights::default()).unwrap();
        let s = env.reset();
        let gs = GraphState::from_view(&env.view(&s), &layout());
        assert_eq!(gs.num_nodes(), 3 + 1 + 2);
        let ev = 3;
        assert_eq!(gs.types[ev], NodeType::Ev);
        assert_eq!(gs.neighbors(ev), vec![1]);
        // Departs after this step, so time to departure reads zero.
        assert_eq!(gs.features[ev][1], 0.0);
        assert_eq!(gs.neighbors(gs.cpo), vec![gs.transformer]);
        let empty = env.step(&s, &[0.0; 3]).unwrap().0;
        assert_eq!(GraphState::from_view(&env.view(&empty), &layout()).num_nodes(), 5);
    }

    #[test]
    fn charger_permutation_is_equivariant() {
        let (store, enc) = encoder(2, 1);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let l = layout();
        let obs = random_obs(&mut rng, &[true, false, true]);
        let perm = [2usize, 0, 1];
        let mut permuted = obs.clone();
        for (new, &old) in perm.iter().enumerate() {
            permuted[l.charger_block(new)].copy_from_slice(&obs[l.charger_block(old)]);
        }
        let (c0, g0, _) = run(&enc, &store, &obs);
        let (c1, g1, _) = run(&enc, &store, &permuted);
        let d = 6;
        for (new, &old) in perm.iter().enumerate() {
            for k in 0..d {
                assert!((c1[new * d + k] - c0[old * d + k]).abs() < 1e-12);
            }
        }
        assert!(g0.iter().zip(&g1).all(|(a, b)| (a - b).abs() < 1e-12));
    }

    #[test]
    fn identical_chargers_get_identical_embeddings() {
        let (store, enc) = encoder(2, 3);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let l = layout();
        let mut obs = random_obs(&mut rng, &[true, true, false]);
        let first = obs[l.charger_block(0)].to_vec();
        obs[l.charger_block(1)].copy_from_slice(&first);
        let (c, _, _) = run(&enc, &store, &obs);
        assert_eq!(&c[0..6], &c[6..12]);
    }

    #[test]
    fn zero_layers_means_no_neighbor_influence() {
        let (store, enc) = encoder(0, 5);
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let l = layout();
        let obs = random_obs(&mut rng, &[true, true, true]);
        let mut other = obs.clone();
        other[l.charger_block(1).start + 1] += 0.5;
        let (a, _, _) = run(&enc, &store, &obs);
        let (b, _, _) = run(&enc, &store, &other);
        assert_eq!(a[..6], b[..6]);
        assert_eq!(a[12..], b[12..]);
    }

    #[test]
    fn one_layer_keeps_other_evs_untouched() {
        let (store, enc) = encoder(1, 7);
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let l = layout();
        let obs = random_obs(&mut rng, &[true, true, false]);
        let mut other = obs.clone();
        other[l.charger_block(0).start + 1] += 0.5;
        let (_, _, a) = run(&enc, &store, &obs);
        let (_, _, b) = run(&enc, &store, &other);
        // Sorted rows: chargers 0..3, EVs 3..5; EV of charger 1 is row 4.
        let h = 8;
        assert_eq!(a[4 * h..5 * h], b[4 * h..5 * h]);
        assert_ne!(a[3 * h..4 * h], b[3 * h..4 * h]);
    }

    #[test]
    fn encoder_gradients_match_finite_differences() {
        let (store, enc) = encoder(2, 9);
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let mut obs = random_obs(&mut rng, &[true, false, true]);
        obs.extend(random_obs(&mut rng, &[false, true, false]));
        let l = layout();
        let batch = GraphBatch::from_observations(&l, &obs, &obs, 2);
        let report = check_params(&store, 6, 11, |g, s| {
            let e = enc.encode(g, s, &batch)?;
            let both = g.concat(&[e.chargers, e.global], 0)?;
            let y = g.tanh(both);
            projection_loss(g, y, 12)
        })
        .unwrap();
        assert!(report.max_rel_error < 1e-4, "{report:?}");
    }

    #[test]
    fn width_mismatch_is_an_error() {
        let (store, enc) = encoder(1, 1);
        let other = ObservationLayout::new(3, 4);
        let obs = vec![0.0; other.dim()];
        let batch = GraphBatch::from_observations(&other, &obs, &obs, 1);
        assert!(enc.encode(&mut ComputeGraph::new(), &store, &batch).is_err());
    }
}
