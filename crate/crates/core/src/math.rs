//! Numeric building blocks shared by every scoring stage: stable softmax,
//! the clamped binary cross-entropy used by all four losses, sparse feature
//! vectors and the GAT activations.

use ndarray::Array1;
use serde::{Deserialize, Serialize};

/// Probabilities are clamped to `[PROB_CLAMP, 1 - PROB_CLAMP]` before logs.
pub const PROB_CLAMP: f64 = 1e-12;

/// Numerically stable softmax. Empty input gives empty output.
pub fn softmax(logits: &[f64]) -> Vec<f64> {
    if logits.is_empty() {
        return Vec::new();
    }
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|&z| (z - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

/// Backward pass of softmax: given `p = softmax(z)` and `dL/dp`, returns `dL/dz`.
pub fn softmax_backward(probs: &[f64], grad_probs: &[f64]) -> Vec<f64> {
    let inner: f64 = probs.iter().zip(grad_probs).map(|(p, g)| p * g).sum();
    probs
        .iter()
        .zip(grad_probs)
        .map(|(p, g)| p * (g - inner))
        .collect()
}

/// Result of [`softmax_bce`].
#[derive(Debug, Clone)]
pub struct SoftmaxBce {
    pub probs: Vec<f64>,
    pub loss: f64,
    pub grad_logits: Vec<f64>,
}

/// `-Σ_i [y_i ln p_i + (1 - y_i) ln(1 - p_i)]` with `p = softmax(logits)`.
///
/// Every loss in the pipeline has this shape. A clamped probability has zero
/// derivative, matching the clamp used in the forward value.
pub fn softmax_bce(logits: &[f64], labels: &[f64]) -> SoftmaxBce {
    debug_assert_eq!(logits.len(), labels.len());
    let probs = softmax(logits);
    let mut loss = 0.0;
    let mut grad_probs = Vec::with_capacity(probs.len());
    for (&p, &y) in probs.iter().zip(labels) {
        let pc = p.clamp(PROB_CLAMP, 1.0 - PROB_CLAMP);
        loss -= y * pc.ln() + (1.0 - y) * (1.0 - pc).ln();
        let inside = p > PROB_CLAMP && p < 1.0 - PROB_CLAMP;
        grad_probs.push(if inside { -y / p + (1.0 - y) / (1.0 - p) } else { 0.0 });
    }
    let grad_logits = softmax_backward(&probs, &grad_probs);
    SoftmaxBce {
        probs,
        loss,
        grad_logits,
    }
}

pub fn leaky_relu(x: f64, slope: f64) -> f64 {
    if x > 0.0 {
        x
    } else {
        slope * x
    }
}

pub fn leaky_relu_grad(x: f64, slope: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else {
        slope
    }
}

/// Exponential-linear unit with `alpha = 1`.
pub fn elu(x: f64) -> f64 {
    if x > 0.0 {
        x
    } else {
        x.exp_m1()
    }
}

pub fn elu_grad(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else {
        x.exp()
    }
}

/// Sparse vector with strictly increasing indices and no explicit zeros.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct SparseVec {
    pub indices: Vec<u32>,
    pub values: Vec<f64>,
}

impl SparseVec {
    /// Builds from unordered `(index, value)` pairs, summing duplicates and
    /// dropping entries that cancel to zero.
    pub fn from_pairs(mut pairs: Vec<(u32, f64)>) -> Self {
        pairs.sort_by_key(|&(i, _)| i);
        let mut indices = Vec::with_capacity(pairs.len());
        let mut values: Vec<f64> = Vec::with_capacity(pairs.len());
        for (i, v) in pairs {
            if indices.last() == Some(&i) {
                *values.last_mut().expect("parallel vectors") += v;
            } else {
                indices.push(i);
                values.push(v);
            }
        }
        let (indices, values) = indices
            .into_iter()
            .zip(values)
            .filter(|&(_, v)| v != 0.0)
            .unzip();
        Self { indices, values }
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }

    pub fn nnz(&self) -> usize {
        self.indices.len()
    }

    pub fn norm(&self) -> f64 {
        self.values.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    /// Scales to unit L2 norm; a zero vector is left untouched.
    pub fn normalized(mut self) -> Self {
        let n = self.norm();
        if n > 0.0 {
            self.values.iter_mut().for_each(|v| *v /= n);
        }
        self
    }

    pub fn scaled(&self, factor: f64) -> Self {
        Self {
            indices: self.indices.clone(),
            values: self.values.iter().map(|v| v * factor).collect(),
        }
    }

    pub fn to_dense(&self, dim: usize) -> Array1<f64> {
        let mut out = Array1::zeros(dim);
        for (&i, &v) in self.indices.iter().zip(&self.values) {
            out[i as usize] += v;
        }
        out
    }

    pub fn iter(&self) -> impl Iterator<Item = (usize, f64)> + '_ {
        self.indices
            .iter()
            .zip(&self.values)
            .map(|(&i, &v)| (i as usize, v))
    }
}

/// Order for score-ranked lists: descending score, then ascending key.
pub fn by_score_then_key<K: Ord>(a: (f64, K), b: (f64, K)) -> std::cmp::Ordering {
    b.0.total_cmp(&a.0).then_with(|| a.1.cmp(&b.1))
}
