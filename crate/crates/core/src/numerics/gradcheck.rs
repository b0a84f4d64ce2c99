//! Central finite-difference checks for reverse-mode gradients.
//!
//! The numeric side only evaluates forward values, so it stays independent
//! of every backward rule it validates.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{ComputeGraph, NumericsError, ParamStore, Tensor, Var};

pub const FD_STEP: f64 = 1e-5;

#[derive(Clone, Debug, Default)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub max_abs_error: f64,
    pub checked: usize,
}

impl GradCheckReport {
    fn record(&mut self, analytic: f64, numeric: f64) {
        let abs = (analytic - numeric).abs();
        let rel = abs / analytic.abs().max(numeric.abs()).max(1e-3);
        self.max_abs_error = self.max_abs_error.max(abs);
        self.max_rel_error = self.max_rel_error.max(rel);
        self.checked += 1;
    }
}

/// Scalar loss `sum(out * w)` with fixed pseudo-random weights `w`.
///
/// A plain sum would hide errors in ops whose outputs have constant sum
/// (softmax rows, normalized layers).
pub fn projection_loss(g: &mut ComputeGraph, out: Var, seed: u64) -> Result<Var, NumericsError> {
    let t = g.value(out);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let w: Vec<f64> = (0..t.numel()).map(|_| rng.random_range(-1.0..1.0)).collect();
    let w = g.input(Tensor::new(t.shape().to_vec(), w)?);
    let p = g.mul(out, w)?;
    Ok(g.sum(p))
}

/// Compares gradients with respect to `inputs` against central differences.
pub fn check_inputs<F>(inputs: &[Tensor], f: F) -> Result<GradCheckReport, NumericsError>
where
    F: Fn(&mut ComputeGraph, &[Var]) -> Result<Var, NumericsError>,
{
    let eval = |vals: &[Tensor]| -> Result<f64, NumericsError> {
        let mut g = ComputeGraph::new();
        let vars: Vec<Var> = vals.iter().map(|t| g.input(t.clone())).collect();
        let loss = f(&mut g, &vars)?;
        Ok(g.value(loss).item())
    };
    let mut g = ComputeGraph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.leaf(t.clone())).collect();
    let loss = f(&mut g, &vars)?;
    let grads = g.backward(loss)?;

    let mut report = GradCheckReport::default();
    let mut work = inputs.to_vec();
    for (i, var) in vars.iter().enumerate() {
        let analytic = grads.get(*var).map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; inputs[i].numel()]);
        for j in 0..inputs[i].numel() {
            let orig = inputs[i].data()[j];
            work[i].data_mut()[j] = orig + FD_STEP;
            let plus = eval(&work)?;
            work[i].data_mut()[j] = orig - FD_STEP;
            let minus = eval(&work)?;
            work[i].data_mut()[j] = orig;
            report.record(analytic[j], (plus - minus) / (2.0 * FD_STEP));
        }
    }
    Ok(report)
}

/// Compares parameter gradients against central differences.
///
/// At most `per_tensor` entries of each tensor are probed (chosen with
/// `seed`); pass `usize::MAX` to probe everything.
pub fn check_params<F>(store: &ParamStore, per_tensor: usize, seed: u64, f: F) -> Result<GradCheckReport, NumericsError>
where
    F: Fn(&mut ComputeGraph, &ParamStore) -> Result<Var, NumericsError>,
{
    let mut g = ComputeGraph::new();
    let loss = f(&mut g, store)?;
    let grads = g.backward(loss)?;
    let mut with_grads = store.clone();
    with_grads.zero_grad();
    g.accumulate_param_grads(&grads, &mut with_grads);

    let eval = |s: &ParamStore| -> Result<f64, NumericsError> {
        let mut g = ComputeGraph::new();
        let loss = f(&mut g, s)?;
        Ok(g.value(loss).item())
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut work = store.clone();
    let mut report = GradCheckReport::default();
    for id in store.ids() {
        let n = store.get(id).numel();
        let analytic = with_grads.get(id).grad().map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; n]);
        let picks: Vec<usize> = if n <= per_tensor { (0..n).collect() } else { (0..per_tensor).map(|_| rng.random_range(0..n)).collect() };
        for j in picks {
            let orig = store.get(id).data()[j];
            work.get_mut(id).data_mut()[j] = orig + FD_STEP;
            let plus = eval(&work)?;
            work.get_mut(id).data_mut()[j] = orig - FD_STEP;
            let minus = eval(&work)?;
            work.get_mut(id).data_mut()[j] = orig;
            report.record(analytic[j], (plus - minus) / (2.0 * FD_STEP));
        }
    }
    Ok(report)
}

fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}

/// Values bounded away from zero so kinks stay outside the difference stencil.
fn random_off_zero(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            let v: f64 = rng.random_range(0.05..1.0);
            if rng.random::<bool>() { v } else { -v }
        })
        .collect();
    Tensor::new(shape.to_vec(), data).unwrap()
}

/// Runs a finite-difference check for every supported operation kind.
pub fn check_all_ops(seed: u64) -> Result<Vec<(&'static str, GradCheckReport)>, NumericsError> {
    use std::rc::Rc;

    use super::AttentionLayout;

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::new();
    let s = seed;

    let ab = [random(&[3, 4], &mut rng), random(&[4, 2], &mut rng)];
    out.push(("matmul", check_inputs(&ab, |g, v| {
        let y = g.matmul(v[0], v[1])?;
        projection_loss(g, y, s)
    })?));

    let bc = [random(&[3, 4], &mut rng), random(&[4], &mut rng)];
    out.push(("add", check_inputs(&bc, |g, v| {
        let y = g.add(v[0], v[1])?;
        projection_loss(g, y, s)
    })?));
    out.push(("sub", check_inputs(&bc, |g, v| {
        let y = g.sub(v[1], v[0])?;
        projection_loss(g, y, s)
    })?));
    out.push(("mul", check_inputs(&bc, |g, v| {
        let y = g.mul(v[0], v[1])?;
        let y = g.mul(y, v[0])?;
        projection_loss(g, y, s)
    })?));

    let x = [random_off_zero(&[3, 5], &mut rng)];
    out.push(("scale", check_inputs(&x, |g, v| {
        let y = g.scale(v[0], -1.7);
        projection_loss(g, y, s)
    })?));
    out.push(("relu", check_inputs(&x, |g, v| {
        let y = g.relu(v[0]);
        projection_loss(g, y, s)
    })?));
    out.push(("gelu", check_inputs(&x, |g, v| {
        let y = g.gelu(v[0]);
        projection_loss(g, y, s)
    })?));
    out.push(("tanh", check_inputs(&x, |g, v| {
        let y = g.tanh(v[0]);
        projection_loss(g, y, s)
    })?));
    out.push(("softmax", check_inputs(&x, |g, v| {
        let y = g.softmax(v[0])?;
        projection_loss(g, y, s)
    })?));

    let ln = [random(&[3, 5], &mut rng), random(&[5], &mut rng), random(&[5], &mut rng)];
    out.push(("layer_norm", check_inputs(&ln, |g, v| {
        let y = g.layer_norm(v[0], v[1], v[2])?;
        projection_loss(g, y, s)
    })?));

    let table = [random(&[5, 3], &mut rng)];
    out.push(("embedding", check_inputs(&table, |g, v| {
        let y = g.embedding(v[0], &[0, 2, 2, 4])?;
        projection_loss(g, y, s)
    })?));

    let cat = [random(&[2, 3], &mut rng), random(&[2, 2], &mut rng), random(&[1, 3], &mut rng)];
    out.push(("concat", check_inputs(&cat, |g, v| {
        let a = g.concat(&[v[0], v[1]], 1)?;
        let b = g.concat(&[v[0], v[2]], 0)?;
        let la = projection_loss(g, a, s)?;
        let lb = projection_loss(g, b, s + 1)?;
        g.add(la, lb)
    })?));

    let cube = [random(&[2, 3, 4], &mut rng)];
    out.push(("mean_axis", check_inputs(&cube, |g, v| {
        let y = g.mean_axis(v[0], 1)?;
        projection_loss(g, y, s)
    })?));
    out.push(("sum", check_inputs(&cube, |g, v| {
        let sq = g.mul(v[0], v[0])?;
        Ok(g.sum(sq))
    })?));
    out.push(("slice", check_inputs(&cube, |g, v| {
        let y = g.slice(v[0], 2, 1, 3)?;
        projection_loss(g, y, s)
    })?));
    out.push(("masked_fill", check_inputs(&cube, |g, v| {
        let mask: Vec<bool> = (0..24).map(|i| i % 3 == 0).collect();
        let y = g.masked_fill(v[0], &mask, MASK_VALUE)?;
        let y = g.tanh(y);
        projection_loss(g, y, s)
    })?));
    out.push(("reshape", check_inputs(&cube, |g, v| {
        let y = g.reshape(v[0], &[6, 4])?;
        let y = g.softmax(y)?;
        projection_loss(g, y, s)
    })?));

    let nodes = [random(&[5, 3], &mut rng)];
    let adj = Rc::new(vec![vec![1, 2], vec![0], vec![0, 3, 4], vec![2], vec![]]);
    out.push(("neighbor_mean", check_inputs(&nodes, |g, v| {
        let y = g.neighbor_mean(v[0], adj.clone())?;
        projection_loss(g, y, s)
    })?));

    let (batch, seq, heads, d) = (2, 4, 2, 6);
    let qkv = [random(&[batch * seq, d], &mut rng), random(&[batch * seq, d], &mut rng), random(&[batch * seq, d], &mut rng)];
    let layout = AttentionLayout {
        batch,
        seq,
        heads,
        key_valid: Some(vec![false, true, true, true, true, true, false, true]),
    };
    out.push(("causal_attention", check_inputs(&qkv, |g, v| {
        let y = g.causal_attention(v[0], v[1], v[2], &layout)?;
        projection_loss(g, y, s)
    })?));

    let x = [random(&[4, 4], &mut rng)];
    out.push(("dropout", check_inputs(&x, |g, v| {
        let mut r = ChaCha8Rng::seed_from_u64(s ^ 0xD0);
        let y = g.dropout(v[0], 0.3, &mut r)?;
        projection_loss(g, y, s)
    })?));

    Ok(out)
}

const MASK_VALUE: f64 = -3.0;
