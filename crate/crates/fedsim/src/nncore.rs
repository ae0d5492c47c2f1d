//! Minimal dense neural-network core: tensors, layers, exact reverse-mode
//! gradients, losses, and SGD-style parameter updates.
//!
//! Everything is dense, double-precision, and pure-value based so that a
//! fixed op sequence with fixed seeds is bitwise reproducible.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Dense row-major matrix.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Tensor2 {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Tensor2 {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Tensor2 {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::dim(
                "Tensor2::from_vec",
                format!("{} elements", rows * cols),
                format!("{}", data.len()),
            ));
        }
        Ok(Tensor2 { rows, cols, data })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let r = rows.len();
        let c = rows.first().map(|x| x.len()).unwrap_or(0);
        let mut data = Vec::with_capacity(r * c);
        for row in rows {
            if row.len() != c {
                return Err(Error::dim("Tensor2::from_rows", format!("{c} cols"), format!("{}", row.len())));
            }
            data.extend_from_slice(row);
        }
        Ok(Tensor2 { rows: r, cols: c, data })
    }

    /// Identity matrix.
    pub fn eye(n: usize) -> Self {
        let mut t = Tensor2::zeros(n, n);
        for i in 0..n {
            t.data[i * n + i] = 1.0;
        }
        t
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    #[inline]
    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        self.data[r * self.cols + c] = v;
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    /// Select a subset of rows, in the given order.
    pub fn select_rows(&self, idx: &[usize]) -> Tensor2 {
        let mut out = Tensor2::zeros(idx.len(), self.cols);
        for (i, &r) in idx.iter().enumerate() {
            out.data[i * self.cols..(i + 1) * self.cols].copy_from_slice(self.row(r));
        }
        out
    }

    /// Select a subset of columns, in the given order.
    pub fn select_cols(&self, idx: &[usize]) -> Tensor2 {
        let mut out = Tensor2::zeros(self.rows, idx.len());
        for r in 0..self.rows {
            for (j, &c) in idx.iter().enumerate() {
                out.data[r * idx.len() + j] = self.get(r, c);
            }
        }
        out
    }

    /// self (m×k) · other (k×n).
    pub fn matmul(&self, other: &Tensor2) -> Result<Tensor2> {
        if self.cols != other.rows {
            return Err(Error::dim(
                "matmul",
                format!("inner dim {}", self.cols),
                format!("{}", other.rows),
            ));
        }
        let (m, k, n) = (self.rows, self.cols, other.cols);
        let mut out = Tensor2::zeros(m, n);
        for i in 0..m {
            for p in 0..k {
                let a = self.data[i * k + p];
                if a == 0.0 {
                    continue;
                }
                let brow = &other.data[p * n..(p + 1) * n];
                let orow = &mut out.data[i * n..(i + 1) * n];
                for j in 0..n {
                    orow[j] += a * brow[j];
                }
            }
        }
        Ok(out)
    }

    /// selfᵀ (k×m)ᵀ · other (m×n) — used for weight gradients.
    pub fn matmul_tn(&self, other: &Tensor2) -> Result<Tensor2> {
        if self.rows != other.rows {
            return Err(Error::dim("matmul_tn", format!("{} rows", self.rows), format!("{}", other.rows)));
        }
        let (m, k, n) = (self.rows, self.cols, other.cols);
        let mut out = Tensor2::zeros(k, n);
        for i in 0..m {
            for p in 0..k {
                let a = self.data[i * k + p];
                if a == 0.0 {
                    continue;
                }
                let brow = &other.data[i * n..(i + 1) * n];
                let orow = &mut out.data[p * n..(p + 1) * n];
                for j in 0..n {
                    orow[j] += a * brow[j];
                }
            }
        }
        Ok(out)
    }

    /// self (m×n) · otherᵀ (k×n)ᵀ — used for input gradients.
    pub fn matmul_nt(&self, other: &Tensor2) -> Result<Tensor2> {
        if self.cols != other.cols {
            return Err(Error::dim("matmul_nt", format!("{} cols", self.cols), format!("{}", other.cols)));
        }
        let (m, n, k) = (self.rows, self.cols, other.rows);
        let mut out = Tensor2::zeros(m, k);
        for i in 0..m {
            for p in 0..k {
                let arow = &self.data[i * n..(i + 1) * n];
                let brow = &other.data[p * n..(p + 1) * n];
                let mut s = 0.0;
                for j in 0..n {
                    s += arow[j] * brow[j];
                }
                out.data[i * k + p] = s;
            }
        }
        Ok(out)
    }

    pub fn map(&self, mut f: impl FnMut(f64) -> f64) -> Tensor2 {
        Tensor2 {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|&x| f(x)).collect(),
        }
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    pub fn frobenius_norm(&self) -> f64 {
        self.data.iter().map(|x| x * x).sum::<f64>().sqrt()
    }

    /// Column means.
    pub fn col_means(&self) -> Result<Vec<f64>> {
        if self.rows == 0 {
            return Err(Error::Data("column mean of empty matrix".into()));
        }
        let mut m = vec![0.0; self.cols];
        for r in 0..self.rows {
            for c in 0..self.cols {
                m[c] += self.get(r, c);
            }
        }
        let n = self.rows as f64;
        for v in &mut m {
            *v /= n;
        }
        Ok(m)
    }
}

/// Deterministic RNG keyed by an arbitrary sequence of integers.
///
/// The parts are mixed with splitmix64 into a 256-bit ChaCha seed so that
/// e.g. `(master_seed, client_id, round)` gives an independent stream.
pub fn seeded_rng(parts: &[u64]) -> ChaCha8Rng {
    let mut state: u64 = 0x9e3779b97f4a7c15;
    let mut seed = [0u8; 32];
    let mut mix = |x: u64| {
        state = state.wrapping_add(x).wrapping_add(0x9e3779b97f4a7c15);
        let mut z = state;
        z = (z ^ (z >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94d049bb133111eb);
        z ^ (z >> 31)
    };
    for p in parts {
        mix(*p);
    }
    for chunk in 0..4 {
        let z = mix(chunk as u64 + 1);
        seed[chunk * 8..chunk * 8 + 8].copy_from_slice(&z.to_le_bytes());
    }
    ChaCha8Rng::from_seed(seed)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Activation {
    Identity,
    Relu,
}

/// Fully connected layer: out = act(x·W + b), W is in×out.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DenseLayer {
    pub weight: Tensor2,
    pub bias: Vec<f64>,
    pub activation: Activation,
}

impl DenseLayer {
    pub fn new(weight: Tensor2, bias: Vec<f64>, activation: Activation) -> Result<Self> {
        if weight.cols() != bias.len() {
            return Err(Error::dim("DenseLayer::new", format!("bias len {}", weight.cols()), format!("{}", bias.len())));
        }
        Ok(DenseLayer { weight, bias, activation })
    }

    /// Glorot-uniform initialisation: ±sqrt(6/(fan_in+fan_out)).
    pub fn init_seeded(fan_in: usize, fan_out: usize, activation: Activation, rng: &mut ChaCha8Rng) -> Self {
        let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
        let data = (0..fan_in * fan_out).map(|_| rng.gen_range(-bound..bound)).collect();
        DenseLayer {
            weight: Tensor2 {
                rows: fan_in,
                cols: fan_out,
                data,
            },
            bias: vec![0.0; fan_out],
            activation,
        }
    }

    pub fn in_dim(&self) -> usize {
        self.weight.rows()
    }

    pub fn out_dim(&self) -> usize {
        self.weight.cols()
    }
}

/// Activation record from `forward`, sufficient for `backward`.
#[derive(Debug)]
pub struct Cache {
    /// Input to each layer (post-activation of the previous one).
    inputs: Vec<Tensor2>,
    /// Pre-activation output of each layer.
    preacts: Vec<Tensor2>,
}

/// Run the layer chain on a batch; logits are the last layer's activations.
pub fn forward(layers: &[DenseLayer], input: &Tensor2) -> Result<(Tensor2, Cache)> {
    let mut cache = Cache {
        inputs: Vec::with_capacity(layers.len()),
        preacts: Vec::with_capacity(layers.len()),
    };
    let mut x = input.clone();
    for (li, layer) in layers.iter().enumerate() {
        if x.cols() != layer.in_dim() {
            return Err(Error::dim(
                format!("forward layer {li}"),
                format!("input cols {}", layer.in_dim()),
                format!("{}", x.cols()),
            ));
        }
        let mut pre = x.matmul(&layer.weight)?;
        for r in 0..pre.rows() {
            for c in 0..pre.cols() {
                let v = pre.get(r, c) + layer.bias[c];
                pre.set(r, c, v);
            }
        }
        if !pre.all_finite() {
            return Err(Error::numeric(format!("forward layer {li}"), "non-finite activation"));
        }
        let out = match layer.activation {
            Activation::Identity => pre.clone(),
            Activation::Relu => pre.map(|v| if v > 0.0 { v } else { 0.0 }),
        };
        cache.inputs.push(x);
        cache.preacts.push(pre);
        x = out;
    }
    Ok((x, cache))
}

/// Per-layer gradients, aligned with the layer list.
#[derive(Clone, Debug)]
pub struct LayerGrad {
    pub d_weight: Tensor2,
    pub d_bias: Vec<f64>,
}

/// Backpropagate a gradient w.r.t. the logits through the cached forward
/// pass. Also returns the gradient w.r.t. the chain input so encoder and
/// head chains can be composed.
pub fn backward(layers: &[DenseLayer], cache: &Cache, dlogits: &Tensor2) -> Result<(Vec<LayerGrad>, Tensor2)> {
    let mut grads: Vec<LayerGrad> = Vec::with_capacity(layers.len());
    let mut delta = dlogits.clone();
    for (li, layer) in layers.iter().enumerate().rev() {
        let pre = &cache.preacts[li];
        // gradient w.r.t. pre-activation
        let dpre = match layer.activation {
            Activation::Identity => delta,
            Activation::Relu => {
                let mut d = delta;
                for (dv, pv) in d.data.iter_mut().zip(pre.data.iter()) {
                    if *pv <= 0.0 {
                        *dv = 0.0;
                    }
                }
                d
            }
        };
        let d_weight = cache.inputs[li].matmul_tn(&dpre)?;
        let mut d_bias = vec![0.0; layer.out_dim()];
        for r in 0..dpre.rows() {
            for c in 0..dpre.cols() {
                d_bias[c] += dpre.get(r, c);
            }
        }
        delta = dpre.matmul_nt(&layer.weight)?;
        grads.push(LayerGrad { d_weight, d_bias });
    }
    grads.reverse();
    Ok((grads, delta))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossSpec {
    CrossEntropy,
    MeanSquaredError,
    MeanAbsoluteError,
}

/// Training targets: class indices or scalar values.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum Targets {
    Classes(Vec<usize>),
    Values(Vec<f64>),
}

impl Targets {
    pub fn len(&self) -> usize {
        match self {
            Targets::Classes(v) => v.len(),
            Targets::Values(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn select(&self, idx: &[usize]) -> Targets {
        match self {
            Targets::Classes(v) => Targets::Classes(idx.iter().map(|&i| v[i]).collect()),
            Targets::Values(v) => Targets::Values(idx.iter().map(|&i| v[i]).collect()),
        }
    }
}

/// Row-wise softmax with max-shift.
pub fn softmax(logits: &Tensor2) -> Tensor2 {
    let mut out = logits.clone();
    for r in 0..out.rows() {
        let row = &mut out.data[r * out.cols..(r + 1) * out.cols];
        let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut z = 0.0;
        for v in row.iter_mut() {
            *v = (*v - m).exp();
            z += *v;
        }
        for v in row.iter_mut() {
            *v /= z;
        }
    }
    out
}

/// Mean loss and gradient w.r.t. logits for the given spec.
pub fn loss_and_dlogits(logits: &Tensor2, targets: &Targets, spec: LossSpec) -> Result<(f64, Tensor2)> {
    let b = logits.rows();
    if b == 0 {
        return Err(Error::Data("empty batch".into()));
    }
    if targets.len() != b {
        return Err(Error::dim("loss targets", format!("{b} rows"), format!("{}", targets.len())));
    }
    let bf = b as f64;
    match (spec, targets) {
        (LossSpec::CrossEntropy, Targets::Classes(ys)) => {
            let k = logits.cols();
            for (r, &y) in ys.iter().enumerate() {
                if y >= k {
                    return Err(Error::Data(format!("class index {y} out of range at row {r} (k={k})")));
                }
            }
            let mut loss = 0.0;
            let mut d = softmax(logits);
            for (r, &y) in ys.iter().enumerate() {
                // log-sum-exp with max shift
                let row = logits.row(r);
                let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let lse = m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
                loss += lse - row[y];
                let dv = d.get(r, y) - 1.0;
                d.set(r, y, dv);
            }
            for v in d.data.iter_mut() {
                *v /= bf;
            }
            Ok((loss / bf, d))
        }
        (LossSpec::MeanSquaredError, Targets::Values(ys)) | (LossSpec::MeanAbsoluteError, Targets::Values(ys)) => {
            if logits.cols() != 1 {
                return Err(Error::dim("regression logits", "1 col", format!("{}", logits.cols())));
            }
            let mut loss = 0.0;
            let mut d = Tensor2::zeros(b, 1);
            for r in 0..b {
                let e = logits.get(r, 0) - ys[r];
                match spec {
                    LossSpec::MeanSquaredError => {
                        loss += e * e;
                        d.set(r, 0, 2.0 * e / bf);
                    }
                    LossSpec::MeanAbsoluteError => {
                        loss += e.abs();
                        d.set(r, 0, e.signum() / bf);
                    }
                    LossSpec::CrossEntropy => unreachable!(),
                }
            }
            Ok((loss / bf, d))
        }
        (LossSpec::CrossEntropy, Targets::Values(_)) => {
            Err(Error::Config("cross-entropy requires class-index targets".into()))
        }
        (_, Targets::Classes(_)) => Err(Error::Config("regression loss requires scalar targets".into())),
    }
}

/// Ordered, named collection of parameter tensors — the unit of all
/// aggregation and exchange.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize, Default)]
pub struct ParamSet {
    entries: Vec<(String, Tensor2)>,
}

impl ParamSet {
    pub fn new() -> Self {
        ParamSet { entries: Vec::new() }
    }

    pub fn push(&mut self, name: impl Into<String>, tensor: Tensor2) {
        let name = name.into();
        debug_assert!(self.get(&name).is_none(), "duplicate parameter name {name}");
        self.entries.push((name, tensor));
    }

    pub fn get(&self, name: &str) -> Option<&Tensor2> {
        self.entries.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn entries(&self) -> &[(String, Tensor2)] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Aggregation compatibility: names, order, and shapes all match.
    pub fn check_compatible(&self, other: &ParamSet) -> Result<()> {
        if self.entries.len() != other.entries.len() {
            return Err(Error::Incompatible(format!(
                "entry count {} vs {}",
                self.entries.len(),
                other.entries.len()
            )));
        }
        let mut bad = Vec::new();
        for ((an, at), (bn, bt)) in self.entries.iter().zip(other.entries.iter()) {
            if an != bn || at.rows() != bt.rows() || at.cols() != bt.cols() {
                bad.push(format!("{an}({}x{}) vs {bn}({}x{})", at.rows(), at.cols(), bt.rows(), bt.cols()));
            }
        }
        if bad.is_empty() {
            Ok(())
        } else {
            Err(Error::Incompatible(bad.join(", ")))
        }
    }

    /// Entrywise combination of two compatible sets.
    pub fn zip_map(&self, other: &ParamSet, f: impl Fn(f64, f64) -> f64) -> Result<ParamSet> {
        self.check_compatible(other)?;
        let entries = self
            .entries
            .iter()
            .zip(other.entries.iter())
            .map(|((n, a), (_, b))| {
                let data = a.data().iter().zip(b.data().iter()).map(|(&x, &y)| f(x, y)).collect();
                (
                    n.clone(),
                    Tensor2 {
                        rows: a.rows(),
                        cols: a.cols(),
                        data,
                    },
                )
            })
            .collect();
        Ok(ParamSet { entries })
    }

    pub fn map(&self, mut f: impl FnMut(f64) -> f64) -> ParamSet {
        ParamSet {
            entries: self.entries.iter().map(|(n, t)| (n.clone(), t.map(&mut f))).collect(),
        }
    }

    pub fn l2_norm(&self) -> f64 {
        self.entries
            .iter()
            .map(|(_, t)| t.data().iter().map(|x| x * x).sum::<f64>())
            .sum::<f64>()
            .sqrt()
    }
}

/// One SGD step: params − lr·grads, entrywise.
pub fn sgd_step(params: &ParamSet, grads: &ParamSet, lr: f64) -> Result<ParamSet> {
    if lr <= 0.0 {
        return Err(Error::Config(format!("learning rate must be positive, got {lr}")));
    }
    params.zip_map(grads, |p, g| p - lr * g)
}

/// Gradient of λ‖local − anchor‖²: 2λ(local − anchor), entrywise.
pub fn l2_pull_grad(local: &ParamSet, anchor: &ParamSet, lambda: f64) -> Result<ParamSet> {
    if lambda < 0.0 {
        return Err(Error::Config(format!("pull lambda must be nonnegative, got {lambda}")));
    }
    local.zip_map(anchor, |l, a| 2.0 * lambda * (l - a))
}

/// Spec-level entry point: mean loss over the batch plus gradients for every
/// layer, named `l{i}.weight` / `l{i}.bias` in layer order.
pub fn loss_and_grad(layers: &[DenseLayer], x: &Tensor2, y: &Targets, spec: LossSpec) -> Result<(f64, ParamSet)> {
    if x.rows() == 0 {
        return Err(Error::Data("empty batch".into()));
    }
    let (logits, cache) = forward(layers, x)?;
    let (loss, dlogits) = loss_and_dlogits(&logits, y, spec)?;
    if !loss.is_finite() {
        return Err(Error::numeric("loss", format!("non-finite loss {loss} at output layer")));
    }
    let (grads, _) = backward(layers, &cache, &dlogits)?;
    Ok((loss, layer_grads_to_paramset(&grads, "l")))
}

/// Name a layer-grad list as a ParamSet with the given prefix.
pub fn layer_grads_to_paramset(grads: &[LayerGrad], prefix: &str) -> ParamSet {
    let mut ps = ParamSet::new();
    for (i, g) in grads.iter().enumerate() {
        ps.push(format!("{prefix}{i}.weight"), g.d_weight.clone());
        ps.push(
            format!("{prefix}{i}.bias"),
            Tensor2 {
                rows: 1,
                cols: g.d_bias.len(),
                data: g.d_bias.clone(),
            },
        );
    }
    ps
}

/// Extract layer parameters as a ParamSet with the given prefix.
pub fn params_of_layers(layers: &[DenseLayer], prefix: &str) -> ParamSet {
    let mut ps = ParamSet::new();
    for (i, layer) in layers.iter().enumerate() {
        ps.push(format!("{prefix}{i}.weight"), layer.weight.clone());
        ps.push(
            format!("{prefix}{i}.bias"),
            Tensor2 {
                rows: 1,
                cols: layer.bias.len(),
                data: layer.bias.clone(),
            },
        );
    }
    ps
}

/// Write a ParamSet (as produced by `params_of_layers`) back into layers.
pub fn set_layer_params(layers: &mut [DenseLayer], ps: &ParamSet, prefix: &str) -> Result<()> {
    let current = params_of_layers(layers, prefix);
    current.check_compatible(ps)?;
    for (i, layer) in layers.iter_mut().enumerate() {
        let w = ps.get(&format!("{prefix}{i}.weight")).unwrap();
        let b = ps.get(&format!("{prefix}{i}.bias")).unwrap();
        layer.weight = w.clone();
        layer.bias = b.data().to_vec();
    }
    Ok(())
}

/// In-place SGD update of a layer chain from per-layer gradients.
pub fn apply_layer_grads(layers: &mut [DenseLayer], grads: &[LayerGrad], lr: f64) {
    for (layer, g) in layers.iter_mut().zip(grads.iter()) {
        for (w, dw) in layer.weight.data_mut().iter_mut().zip(g.d_weight.data().iter()) {
            *w -= lr * dw;
        }
        for (b, db) in layer.bias.iter_mut().zip(g.d_bias.iter()) {
            *b -= lr * db;
        }
    }
}
