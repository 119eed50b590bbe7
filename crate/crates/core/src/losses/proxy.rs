//! Asymmetric-proxy point-to-point loss, with fixed (AsyP) or per-class
//! learnable (AdaMS) scale and margin.
//!
//! For anchor `i` the text embedding `t_i` pulls every acoustic embedding of
//! its own class (the anchor's own row included) through an extended
//! log-sum-exp, and the acoustic embedding `a_i` pushes every text embedding
//! of another class through a mean softplus:
//!
//! ```text
//! L = 1/N Σ_i [ 1/α · ln(1 + Σ_{j: y_j = y_i} exp(α(λ − S(t_i, a_j))))
//!             + 1/|N_i| Σ_{k: y_k ≠ y_i} softplus(β(S(a_i, t_k) − λ)) ]
//! ```

use alloc::string::ToString;
use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use super::{Evaluation, LossOutput, Tape};
use crate::embedding::{cosine, cosine_backward, LabeledEmbeddingBatch};
use crate::error::{bail, Result};
use crate::linalg::{sigmoid, softplus};

pub const GRAD_LOG_ALPHA: &str = "adams.log_alpha";
pub const GRAD_LOG_BETA: &str = "adams.log_beta";
pub const GRAD_LAMBDA: &str = "adams.lambda";

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AsyPParams {
    pub alpha: f64,
    pub beta: f64,
    pub lambda: f64,
}

impl Default for AsyPParams {
    fn default() -> Self {
        Self { alpha: 2.0, beta: 50.0, lambda: 0.1 }
    }
}

impl AsyPParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha > 0.0 && self.beta > 0.0 && self.alpha.is_finite() && self.beta.is_finite()) {
            bail!(Config, "alpha and beta must be positive and finite (alpha={}, beta={})", self.alpha, self.beta);
        }
        if !self.lambda.is_finite() {
            bail!(Config, "lambda must be finite");
        }
        Ok(())
    }
}

/// Per-class learnable `(α, β, λ)`, indexed by class id. `α` and `β` are
/// stored as logarithms so they stay positive under unconstrained updates.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdaMSTable {
    pub log_alpha: Vec<f64>,
    pub log_beta: Vec<f64>,
    pub lambda: Vec<f64>,
}

impl AdaMSTable {
    pub fn new(num_classes: usize, init: AsyPParams) -> Result<Self> {
        init.validate()?;
        Ok(Self {
            log_alpha: vec![libm::log(init.alpha); num_classes],
            log_beta: vec![libm::log(init.beta); num_classes],
            lambda: vec![init.lambda; num_classes],
        })
    }

    pub fn num_classes(&self) -> usize {
        self.lambda.len()
    }

    pub fn params(&self, class: usize) -> Option<AsyPParams> {
        Some(AsyPParams {
            alpha: libm::exp(*self.log_alpha.get(class)?),
            beta: libm::exp(*self.log_beta.get(class)?),
            lambda: self.lambda[class],
        })
    }

    /// Always `true`: the table exists to be trained.
    pub fn learnable(&self) -> bool {
        true
    }
}

enum Params<'a> {
    Fixed(AsyPParams),
    PerClass(&'a AdaMSTable),
}

impl Params<'_> {
    fn of(&self, class: usize) -> Result<AsyPParams> {
        match self {
            Params::Fixed(p) => Ok(*p),
            Params::PerClass(t) => match t.params(class) {
                Some(p) => Ok(p),
                None => bail!(Config, "AdaMS table has no row for class {}", class),
            },
        }
    }
}

pub fn asyp_loss(batch: &LabeledEmbeddingBatch, params: &AsyPParams) -> Result<LossOutput> {
    params.validate()?;
    let mut out = LossOutput::zeros(batch.len(), batch.dim());
    out.value = p2p_impl(batch, &Params::Fixed(*params), &mut Tape::Grad(&mut out))?;
    Ok(out)
}

pub fn asyp_value(batch: &LabeledEmbeddingBatch, params: &AsyPParams) -> Result<Evaluation> {
    params.validate()?;
    let mut branches = Vec::new();
    let value = p2p_impl(batch, &Params::Fixed(*params), &mut Tape::Value(&mut branches))?;
    Ok(Evaluation { value, branches })
}

/// AsyP with per-anchor-class parameters. `grad_params` holds gradients for
/// `adams.log_alpha`, `adams.log_beta` and `adams.lambda`, one entry per
/// table row; rows of classes absent from the batch stay zero.
pub fn adams_loss(batch: &LabeledEmbeddingBatch, table: &AdaMSTable) -> Result<LossOutput> {
    let mut out = LossOutput::zeros(batch.len(), batch.dim());
    let rows = table.num_classes();
    for key in [GRAD_LOG_ALPHA, GRAD_LOG_BETA, GRAD_LAMBDA] {
        out.grad_params.insert(key.to_string(), vec![0.0; rows]);
    }
    out.value = p2p_impl(batch, &Params::PerClass(table), &mut Tape::Grad(&mut out))?;
    Ok(out)
}

pub fn adams_value(batch: &LabeledEmbeddingBatch, table: &AdaMSTable) -> Result<Evaluation> {
    let mut branches = Vec::new();
    let value = p2p_impl(batch, &Params::PerClass(table), &mut Tape::Value(&mut branches))?;
    Ok(Evaluation { value, branches })
}

fn p2p_impl(batch: &LabeledEmbeddingBatch, params: &Params<'_>, tape: &mut Tape<'_>) -> Result<f64> {
    let n = batch.len();
    let labels = batch.labels();
    let (a, t) = (batch.acoustic(), batch.text());
    let learnable = matches!(params, Params::PerClass(_));

    // sim[i * n + j] = S(t_i, a_j)
    let mut sim = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..n {
            sim[i * n + j] = cosine(t.row(i), a.row(j));
        }
    }

    let inv_n = 1.0 / n as f64;
    let mut total = 0.0;
    let mut pos_idx: Vec<usize> = Vec::with_capacity(n);
    let mut neg_idx: Vec<usize> = Vec::with_capacity(n);
    let mut f: Vec<f64> = Vec::with_capacity(n);

    for i in 0..n {
        let y = labels[i];
        let p = params.of(y)?;
        pos_idx.clear();
        neg_idx.clear();
        for j in 0..n {
            if labels[j] == y {
                pos_idx.push(j);
            } else {
                neg_idx.push(j);
            }
        }
        if neg_idx.is_empty() {
            bail!(InvalidBatch, "anchor {} has no negatives (single-class batch)", i);
        }

        // Anchor–positive: extended log-sum-exp with the implicit exp(0) term.
        f.clear();
        f.extend(pos_idx.iter().map(|&j| p.alpha * (p.lambda - sim[i * n + j])));
        let m = f.iter().fold(0.0f64, |acc, &v| acc.max(v));
        let lse = m + libm::log(libm::exp(-m) + f.iter().map(|&v| libm::exp(v - m)).sum::<f64>());
        let pos_term = lse / p.alpha;

        // Anchor–negative: mean softplus.
        let inv_neg = 1.0 / neg_idx.len() as f64;
        let neg_term = inv_neg * neg_idx.iter().map(|&k| softplus(p.beta * (sim[k * n + i] - p.lambda))).sum::<f64>();

        total += pos_term + neg_term;

        let Some(out) = tape.grad() else { continue };
        let mut d_alpha = -lse / (p.alpha * p.alpha);
        let mut d_beta = 0.0;
        let mut d_lambda = 0.0;
        for (idx, &j) in pos_idx.iter().enumerate() {
            let w = libm::exp(f[idx] - lse);
            let s = sim[i * n + j];
            d_alpha += w * (p.lambda - s) / p.alpha;
            d_lambda += w;
            // ∂pos/∂S(t_i, a_j) = −w
            let coef = -w * inv_n;
            cosine_backward(t.row(i), a.row(j), coef, out.grad_text.row_mut(i), out.grad_acoustic.row_mut(j));
        }
        for &k in &neg_idx {
            let s = sim[k * n + i];
            let sg = sigmoid(p.beta * (s - p.lambda));
            d_beta += inv_neg * sg * (s - p.lambda);
            d_lambda -= inv_neg * sg * p.beta;
            let coef = inv_neg * sg * p.beta * inv_n;
            cosine_backward(a.row(i), t.row(k), coef, out.grad_acoustic.row_mut(i), out.grad_text.row_mut(k));
        }
        if learnable {
            // Chain through the log parameterization: ∂/∂log α = α ∂/∂α.
            let add = |out: &mut LossOutput, key: &str, v: f64| {
                if let Some(g) = out.grad_params.get_mut(key) {
                    g[y] += v * inv_n;
                }
            };
            add(out, GRAD_LOG_ALPHA, p.alpha * d_alpha);
            add(out, GRAD_LOG_BETA, p.beta * d_beta);
            add(out, GRAD_LAMBDA, d_lambda);
        }
    }
    Ok(total * inv_n)
}
