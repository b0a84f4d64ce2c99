use std::collections::HashMap;
use std::path::Path;

use rand::Rng;

use super::tape::{ComputeGraph, Var};
use super::tensor::Tensor;
use super::NumericsError;
use crate::codec::{ByteReader, ByteWriter};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

/// Named, ordered collection of learnable tensors.
#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    names: Vec<String>,
    tensors: Vec<Tensor>,
    index: HashMap<String, ParamId>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, t: Tensor) -> ParamId {
        let name = name.into();
        assert!(!self.index.contains_key(&name), "duplicate parameter `{name}`");
        let id = ParamId(self.tensors.len());
        self.index.insert(name.clone(), id);
        self.names.push(name);
        self.tensors.push(t);
        id
    }

    /// Uniform in `±sqrt(6 / (fan_in + fan_out))`.
    pub fn add_glorot<R: Rng + ?Sized>(&mut self, name: impl Into<String>, fan_in: usize, fan_out: usize, rng: &mut R) -> ParamId {
        let bound = (6.0 / (fan_in + fan_out).max(1) as f64).sqrt();
        let data = (0..fan_in * fan_out).map(|_| rng.random_range(-bound..=bound)).collect();
        self.add(name, Tensor::new(vec![fan_in, fan_out], data).expect("glorot shape"))
    }

    pub fn add_zeros(&mut self, name: impl Into<String>, shape: &[usize]) -> ParamId {
        self.add(name, Tensor::zeros(shape))
    }

    pub fn add_ones(&mut self, name: impl Into<String>, shape: &[usize]) -> ParamId {
        self.add(name, Tensor::full(shape, 1.0))
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.tensors[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.tensors.len()).map(ParamId)
    }

    pub fn num_scalars(&self) -> usize {
        self.tensors.iter().map(Tensor::numel).sum()
    }

    pub fn zero_grad(&mut self) {
        self.tensors.iter_mut().for_each(Tensor::zero_grad);
    }

    /// Gives every parameter without a gradient an all-zero one.
    pub fn fill_missing_grads(&mut self) {
        for t in &mut self.tensors {
            if t.grad().is_none() {
                let n = t.numel();
                t.set_grad(Some(vec![0.0; n]));
            }
        }
    }

    pub fn all_finite(&self) -> bool {
        self.tensors.iter().all(Tensor::is_finite)
    }

    /// Global L2 norm of all present gradients.
    pub fn grad_norm(&self) -> f64 {
        self.tensors
            .iter()
            .filter_map(Tensor::grad)
            .flat_map(|g| g.iter())
            .map(|g| g * g)
            .sum::<f64>()
            .sqrt()
    }

    pub fn scale_grads(&mut self, c: f64) {
        for t in &mut self.tensors {
            if let Some(g) = t.grad() {
                let scaled = g.iter().map(|x| x * c).collect();
                t.set_grad(Some(scaled));
            }
        }
    }

    /// Writes a versioned little-endian checkpoint with an opaque metadata string.
    pub fn save(&self, path: &Path, metadata: &str) -> Result<(), NumericsError> {
        std::fs::write(path, self.to_bytes(metadata)).map_err(|e| NumericsError::Checkpoint(format!("{}: {e}", path.display())))
    }

    pub fn load(path: &Path) -> Result<(Self, String), NumericsError> {
        let bytes = std::fs::read(path).map_err(|e| NumericsError::Checkpoint(format!("{}: {e}", path.display())))?;
        Self::from_bytes(&bytes)
    }

    pub fn to_bytes(&self, metadata: &str) -> Vec<u8> {
        let mut w = ByteWriter::new();
        w.bytes(CHECKPOINT_MAGIC);
        w.u32(CHECKPOINT_VERSION);
        w.str(metadata);
        w.u32(self.tensors.len() as u32);
        for (name, t) in self.names.iter().zip(&self.tensors) {
            w.str(name);
            w.u32(t.rank() as u32);
            for &d in t.shape() {
                w.u64(d as u64);
            }
            w.f64s(t.data());
        }
        w.into_inner()
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<(Self, String), NumericsError> {
        let err = |e: crate::codec::CodecError| NumericsError::Checkpoint(e.to_string());
        let mut r = ByteReader::new(bytes);
        let magic = r.take(CHECKPOINT_MAGIC.len(), "magic").map_err(err)?;
        if magic != CHECKPOINT_MAGIC {
            return Err(NumericsError::Checkpoint("not a parameter checkpoint".into()));
        }
        let version = r.u32("version").map_err(err)?;
        if version != CHECKPOINT_VERSION {
            return Err(NumericsError::Checkpoint(format!("unsupported version {version}, expected {CHECKPOINT_VERSION}")));
        }
        let metadata = r.str("metadata").map_err(err)?;
        let count = r.u32("record count").map_err(err)? as usize;
        let mut store = ParamStore::new();
        for i in 0..count {
            let name = r.str(&format!("record {i} name")).map_err(err)?;
            let rank = r.u32(&format!("`{name}` rank")).map_err(err)? as usize;
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                shape.push(r.u64(&format!("`{name}` shape")).map_err(err)? as usize);
            }
            let numel: usize = shape.iter().product();
            let data = r.f64s(numel, &format!("`{name}` payload")).map_err(err)?;
            if store.id(&name).is_some() {
                return Err(NumericsError::Checkpoint(format!("duplicate record `{name}`")));
            }
            store.add(name, Tensor::new(shape, data)?);
        }
        r.finish().map_err(err)?;
        Ok((store, metadata))
    }

    /// Copies values from `other` for every name present in both; shapes must agree.
    pub fn load_values_from(&mut self, other: &ParamStore) -> Result<(), NumericsError> {
        for id in self.ids().collect::<Vec<_>>() {
            let name = self.name(id).to_string();
            let src = other
                .id(&name)
                .ok_or_else(|| NumericsError::Checkpoint(format!("missing parameter `{name}`")))?;
            let src = other.get(src);
            if src.shape() != self.get(id).shape() {
                return Err(NumericsError::ShapeMismatch {
                    op: "load_params",
                    lhs: self.get(id).shape().to_vec(),
                    rhs: src.shape().to_vec(),
                });
            }
            self.tensors[id.0] = src.clone();
        }
        Ok(())
    }
}

const CHECKPOINT_MAGIC: &[u8] = b"V2GPARAM";
const CHECKPOINT_VERSION: u32 = 1;

/// Affine map `x W + b`.
#[derive(Clone, Copy, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub fan_in: usize,
    pub fan_out: usize,
}

impl Linear {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, name: &str, fan_in: usize, fan_out: usize, bias: bool, rng: &mut R) -> Self {
        let weight = store.add_glorot(format!("{name}.w"), fan_in, fan_out, rng);
        let bias = bias.then(|| store.add_zeros(format!("{name}.b"), &[fan_out]));
        Self { weight, bias, fan_in, fan_out }
    }

    pub fn forward(&self, g: &mut ComputeGraph, store: &ParamStore, x: Var) -> Result<Var, NumericsError> {
        let w = g.param(store, self.weight);
        let y = g.matmul(x, w)?;
        match self.bias {
            Some(b) => {
                let b = g.param(store, b);
                g.add(y, b)
            }
            None => Ok(y),
        }
    }
}

/// Layer norm with learned gain and bias.
#[derive(Clone, Copy, Debug)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl LayerNorm {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize) -> Self {
        Self {
            gamma: store.add_ones(format!("{name}.gamma"), &[dim]),
            beta: store.add_zeros(format!("{name}.beta"), &[dim]),
        }
    }

    pub fn forward(&self, g: &mut ComputeGraph, store: &ParamStore, x: Var) -> Result<Var, NumericsError> {
        let gamma = g.param(store, self.gamma);
        let beta = g.param(store, self.beta);
        g.layer_norm(x, gamma, beta)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn glorot_bounds_and_zero_bias() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut store = ParamStore::new();
        let lin = Linear::new(&mut store, "l", 10, 6, true, &mut rng);
        let bound = (6.0f64 / 16.0).sqrt();
        assert!(store.get(lin.weight).data().iter().all(|w| w.abs() <= bound));
        assert!(store.get(lin.bias.unwrap()).data().iter().all(|&b| b == 0.0));
    }

    #[test]
    fn checkpoint_round_trip_and_truncation() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut store = ParamStore::new();
        Linear::new(&mut store, "a", 3, 4, true, &mut rng);
        store.add("scalar", Tensor::scalar(2.5));
        let bytes = store.to_bytes("{\"k\":1}");
        let (back, meta) = ParamStore::from_bytes(&bytes).unwrap();
        assert_eq!(meta, "{\"k\":1}");
        assert_eq!(back.len(), store.len());
        for id in store.ids() {
            assert_eq!(back.name(id), store.name(id));
            assert_eq!(back.get(id).data(), store.get(id).data());
            assert_eq!(back.get(id).shape(), store.get(id).shape());
        }
        let err = ParamStore::from_bytes(&bytes[..bytes.len() - 3]).unwrap_err();
        assert!(err.to_string().contains("truncated"), "{err}");
        let mut bad = bytes.clone();
        bad[8] = 9;
        assert!(ParamStore::from_bytes(&bad).unwrap_err().to_string().contains("version"));
    }
}
