//! Aggregation mathematics: cosine-similarity matrix over client latent
//! summaries, temperature-softmax peer weights, per-client global
//! classifiers, and size-weighted parameter averaging.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nncore::{ParamSet, Tensor2};

/// Row-stochastic client×client peer weights.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SimilarityWeights {
    pub n: usize,
    /// Raw cosine similarities s_ij.
    pub s: Tensor2,
    /// Softmax weights α_ij; each row sums to 1.
    pub alpha: Tensor2,
    pub temperature: f64,
    /// Clients whose pooled latent had near-zero norm (degenerate rows).
    pub degenerate: Vec<usize>,
}

/// Per-client sample counts used for size-weighted averaging.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ClientSizes(pub Vec<usize>);

impl ClientSizes {
    pub fn normalised(&self) -> Result<Vec<f64>> {
        if self.0.iter().any(|&n| n == 0) {
            return Err(Error::Config("client sizes must be positive".into()));
        }
        let total: usize = self.0.iter().sum();
        Ok(self.0.iter().map(|&n| n as f64 / total as f64).collect())
    }
}

const ZERO_NORM_EPS: f64 = 1e-12;

/// Pairwise cosine similarities of pooled client latents.
///
/// A vector with norm below 1e-12 gets a zero row/column with self-similarity
/// forced to 1; callers flag the event in the round trace.
pub fn cosine_matrix(latents: &[Vec<f64>]) -> Result<(Tensor2, Vec<usize>)> {
    let n = latents.len();
    if n == 0 {
        return Err(Error::Data("cosine_matrix of zero clients".into()));
    }
    let dim = latents[0].len();
    for (i, v) in latents.iter().enumerate() {
        if v.len() != dim {
            return Err(Error::dim(format!("latent {i}"), format!("{dim}"), format!("{}", v.len())));
        }
    }
    let norms: Vec<f64> = latents.iter().map(|v| v.iter().map(|x| x * x).sum::<f64>().sqrt()).collect();
    let degenerate: Vec<usize> = norms
        .iter()
        .enumerate()
        .filter(|(_, &nm)| nm < ZERO_NORM_EPS)
        .map(|(i, _)| i)
        .collect();
    let mut s = Tensor2::zeros(n, n);
    for i in 0..n {
        for j in 0..n {
            let v = if i == j {
                1.0
            } else if norms[i] < ZERO_NORM_EPS || norms[j] < ZERO_NORM_EPS {
                0.0
            } else {
                let dot: f64 = latents[i].iter().zip(latents[j].iter()).map(|(a, b)| a * b).sum();
                dot / (norms[i] * norms[j])
            };
            s.set(i, j, v);
        }
    }
    Ok((s, degenerate))
}

/// Temperature softmax over each similarity row: α_ij = exp(s_ij/τ)/Σ_k exp(s_ik/τ).
pub fn softmax_weights(s: &Tensor2, temperature: f64) -> Result<SimilarityWeights> {
    if s.rows() != s.cols() {
        return Err(Error::dim("softmax_weights", "square matrix", format!("{}x{}", s.rows(), s.cols())));
    }
    if temperature <= 0.0 {
        return Err(Error::Config(format!("similarity temperature must be positive, got {temperature}")));
    }
    let n = s.rows();
    let mut alpha = Tensor2::zeros(n, n);
    for i in 0..n {
        let row = s.row(i);
        let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut z = 0.0;
        let mut e = vec![0.0; n];
        for (j, &v) in row.iter().enumerate() {
            e[j] = ((v - m) / temperature).exp();
            z += e[j];
        }
        for (j, ev) in e.iter().enumerate() {
            alpha.set(i, j, ev / z);
        }
    }
    Ok(SimilarityWeights {
        n,
        s: s.clone(),
        alpha,
        temperature,
        degenerate: Vec::new(),
    })
}

/// Entrywise convex combination of aggregation-compatible parameter sets.
pub fn weighted_param_avg(params: &[ParamSet], weights: &[f64]) -> Result<ParamSet> {
    if params.is_empty() {
        return Err(Error::Config("weighted_param_avg needs at least one ParamSet".into()));
    }
    if params.len() != weights.len() {
        return Err(Error::Config(format!(
            "{} ParamSets but {} weights",
            params.len(),
            weights.len()
        )));
    }
    if weights.iter().any(|&w| w < 0.0) {
        return Err(Error::Config("weights must be nonnegative".into()));
    }
    let total: f64 = weights.iter().sum();
    if (total - 1.0).abs() > 1e-9 {
        return Err(Error::Config(format!("weights must sum to 1, got {total}")));
    }
    for p in &params[1..] {
        params[0].check_compatible(p)?;
    }
    let mut out = params[0].map(|_| 0.0);
    for (p, &w) in params.iter().zip(weights.iter()) {
        out = out.zip_map(p, |acc, v| acc + w * v)?;
    }
    Ok(out)
}

/// output[i] = Σ_j α_ij · classifiers[j] — one personalised anchor per client.
pub fn per_client_global_classifiers(classifiers: &[ParamSet], w: &SimilarityWeights) -> Result<Vec<ParamSet>> {
    if classifiers.len() != w.n {
        return Err(Error::Config(format!(
            "{} classifiers for {} similarity rows",
            classifiers.len(),
            w.n
        )));
    }
    let mut out = Vec::with_capacity(w.n);
    for i in 0..w.n {
        out.push(weighted_param_avg(classifiers, w.alpha.row(i))?);
    }
    Ok(out)
}
