//! Relational proxy losses: distance-wise (RPL-D), angle-wise (RPL-A) and
//! prototypical (RPL-P).
//!
//! Each couples a relational energy computed within the text embeddings with
//! the same energy computed within the acoustic embeddings through a Huber
//! penalty, averaged over the enumerated tuples. Distances are divided by the
//! batch mean pairwise distance of their own modality; when that normalizer
//! falls below [`EPS`](crate::EPS) the modality's energies are all zero.

use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use super::{distance_backward, distance_backward_rows, huber_with, Evaluation, HuberParams, LossOutput, Tape};
use crate::embedding::{
    compute_centroids, cosine, cosine_backward, mean_pairwise_distance, Centroids, LabeledEmbeddingBatch,
    TupleEnumeration,
};
use crate::error::{bail, Result};
use crate::linalg::{distance, sub, Matrix};
use crate::EPS;

/// Normalizer used by RPL-P.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PrototypeNormalizer {
    /// Mean pairwise distance of the modality, shared with RPL-D.
    #[default]
    Pairwise,
    /// Mean embedding-to-centroid distance.
    Centroid,
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RelationalOptions {
    /// Differentiate through the distance normalizer instead of treating it as constant.
    pub mu_gradient: bool,
    pub prototype_normalizer: PrototypeNormalizer,
    pub huber: HuberParams,
    /// `(acoustic, text)` normalizers to use instead of computing them from
    /// the batch. Lets a finite-difference oracle see the stop-gradient
    /// objective; `mu_gradient` is ignored while set.
    #[serde(skip)]
    pub frozen_mu: Option<(f64, f64)>,
}

impl RelationalOptions {
    fn differentiate_mu(&self) -> bool {
        self.mu_gradient && self.frozen_mu.is_none()
    }
}

/// `(acoustic, text)` normalizers RPL-D (`prototype = false`) or RPL-P
/// (`prototype = true`) would compute for `batch`.
pub fn relational_normalizers(
    batch: &LabeledEmbeddingBatch,
    opts: &RelationalOptions,
    prototype: bool,
) -> Result<(f64, f64)> {
    let (a, t) = (batch.acoustic(), batch.text());
    if prototype && opts.prototype_normalizer == PrototypeNormalizer::Centroid {
        let ca = compute_centroids(a, batch.labels())?;
        let ct = compute_centroids(t, batch.labels())?;
        return Ok((centroid_mean_distance(a, &ca), centroid_mean_distance(t, &ct)));
    }
    Ok((mean_pairwise_distance(a)?, mean_pairwise_distance(t)?))
}

#[derive(Debug, Clone, PartialEq)]
pub struct PhiD {
    pub value: f64,
    pub grad_i: Vec<f64>,
    pub grad_j: Vec<f64>,
}

/// Normalized distance `‖x_i − x_j‖ / μ`, with `μ` held constant.
pub fn phi_d(xi: &[f64], xj: &[f64], mu: f64) -> Result<PhiD> {
    if !(mu > EPS) {
        bail!(DegenerateBatch, "distance normalizer {} is not above {}", mu, EPS);
    }
    let mut grad_i = vec![0.0; xi.len()];
    let mut grad_j = vec![0.0; xj.len()];
    distance_backward(xi, xj, 1.0 / mu, &mut grad_i, &mut grad_j);
    Ok(PhiD { value: distance(xi, xj) / mu, grad_i, grad_j })
}

#[derive(Debug, Clone, PartialEq)]
pub struct PhiA {
    pub value: f64,
    pub grad_i: Vec<f64>,
    pub grad_j: Vec<f64>,
    pub grad_k: Vec<f64>,
}

/// Cosine of the angle at vertex `x_j` of the triangle `(x_i, x_j, x_k)`.
pub fn phi_a(xi: &[f64], xj: &[f64], xk: &[f64]) -> PhiA {
    let u = sub(xi, xj);
    let w = sub(xk, xj);
    let mut grad_i = vec![0.0; xi.len()];
    let mut grad_k = vec![0.0; xk.len()];
    let value = cosine_backward(&u, &w, 1.0, &mut grad_i, &mut grad_k);
    let grad_j = grad_i.iter().zip(&grad_k).map(|(a, b)| -(a + b)).collect();
    PhiA { value, grad_i, grad_j, grad_k }
}

pub fn rpl_d_loss(
    batch: &LabeledEmbeddingBatch,
    tuples: &TupleEnumeration,
    opts: &RelationalOptions,
) -> Result<LossOutput> {
    let mut out = LossOutput::zeros(batch.len(), batch.dim());
    out.value = rpl_d_impl(batch, tuples, opts, &mut Tape::Grad(&mut out))?;
    Ok(out)
}

pub fn rpl_d_value(
    batch: &LabeledEmbeddingBatch,
    tuples: &TupleEnumeration,
    opts: &RelationalOptions,
) -> Result<Evaluation> {
    let mut branches = Vec::new();
    let value = rpl_d_impl(batch, tuples, opts, &mut Tape::Value(&mut branches))?;
    Ok(Evaluation { value, branches })
}

pub fn rpl_a_loss(
    batch: &LabeledEmbeddingBatch,
    tuples: &TupleEnumeration,
    opts: &RelationalOptions,
) -> Result<LossOutput> {
    let mut out = LossOutput::zeros(batch.len(), batch.dim());
    out.value = rpl_a_impl(batch, tuples, opts, &mut Tape::Grad(&mut out))?;
    Ok(out)
}

pub fn rpl_a_value(
    batch: &LabeledEmbeddingBatch,
    tuples: &TupleEnumeration,
    opts: &RelationalOptions,
) -> Result<Evaluation> {
    let mut branches = Vec::new();
    let value = rpl_a_impl(batch, tuples, opts, &mut Tape::Value(&mut branches))?;
    Ok(Evaluation { value, branches })
}

pub fn rpl_p_loss(batch: &LabeledEmbeddingBatch, opts: &RelationalOptions) -> Result<LossOutput> {
    let mut out = LossOutput::zeros(batch.len(), batch.dim());
    out.value = rpl_p_impl(batch, opts, &mut Tape::Grad(&mut out))?;
    Ok(out)
}

pub fn rpl_p_value(batch: &LabeledEmbeddingBatch, opts: &RelationalOptions) -> Result<Evaluation> {
    let mut branches = Vec::new();
    let value = rpl_p_impl(batch, opts, &mut Tape::Value(&mut branches))?;
    Ok(Evaluation { value, branches })
}

fn check_tuples(batch: &LabeledEmbeddingBatch, tuples: &TupleEnumeration, arity: usize) -> Result<()> {
    if tuples.arity() != arity || tuples.n_items() != batch.len() {
        bail!(
            InvalidInput,
            "expected {}-tuples over {} rows, got {}-tuples over {}",
            arity,
            batch.len(),
            tuples.arity(),
            tuples.n_items()
        );
    }
    Ok(())
}

/// Spreads `d_mu` (∂L/∂μ) over every pairwise distance that defines μ.
fn mu_backward(x: &Matrix, g: &mut Matrix, d_mu: f64) {
    let n = x.rows();
    // μ = 2/(N(N−1)) Σ_{i<j} ‖x_i − x_j‖
    let coef = 2.0 * d_mu / (n * (n - 1)) as f64;
    for i in 0..n {
        for j in (i + 1)..n {
            distance_backward_rows(x, g, i, j, coef);
        }
    }
}

fn rpl_d_impl(
    batch: &LabeledEmbeddingBatch,
    tuples: &TupleEnumeration,
    opts: &RelationalOptions,
    tape: &mut Tape<'_>,
) -> Result<f64> {
    check_tuples(batch, tuples, 2)?;
    let (a, t) = (batch.acoustic(), batch.text());
    let (mu_a, mu_t) = match opts.frozen_mu {
        Some(m) => m,
        None => (mean_pairwise_distance(a)?, mean_pairwise_distance(t)?),
    };
    let (live_a, live_t) = (mu_a > EPS, mu_t > EPS);
    if tuples.is_empty() {
        return Ok(0.0);
    }
    let inv_m = 1.0 / tuples.len() as f64;
    let delta = opts.huber.delta;

    let mut total = 0.0;
    let (mut d_mu_a, mut d_mu_t) = (0.0, 0.0);
    for (i, j) in tuples.pairs() {
        let da = distance(a.row(i), a.row(j));
        let dt = distance(t.row(i), t.row(j));
        let pa = if live_a { da / mu_a } else { 0.0 };
        let pt = if live_t { dt / mu_t } else { 0.0 };
        let h = huber_with(pt, pa, delta);
        total += h.value;
        tape.branch(h.linear as u8);
        if let Some(out) = tape.grad() {
            if live_a {
                let c = h.grad_q * inv_m;
                distance_backward_rows(a, &mut out.grad_acoustic, i, j, c / mu_a);
                d_mu_a -= c * da / (mu_a * mu_a);
            }
            if live_t {
                let c = h.grad_p * inv_m;
                distance_backward_rows(t, &mut out.grad_text, i, j, c / mu_t);
                d_mu_t -= c * dt / (mu_t * mu_t);
            }
        }
    }
    if opts.differentiate_mu() {
        if let Some(out) = tape.grad() {
            if live_a {
                mu_backward(a, &mut out.grad_acoustic, d_mu_a);
            }
            if live_t {
                mu_backward(t, &mut out.grad_text, d_mu_t);
            }
        }
    }
    Ok(total * inv_m)
}

fn rpl_a_impl(
    batch: &LabeledEmbeddingBatch,
    tuples: &TupleEnumeration,
    opts: &RelationalOptions,
    tape: &mut Tape<'_>,
) -> Result<f64> {
    if batch.len() < 3 {
        bail!(InvalidBatch, "angle-wise loss needs at least 3 rows, got {}", batch.len());
    }
    check_tuples(batch, tuples, 3)?;
    if tuples.is_empty() {
        return Ok(0.0);
    }
    let (a, t) = (batch.acoustic(), batch.text());
    let dim = batch.dim();
    let inv_m = 1.0 / tuples.len() as f64;
    let delta = opts.huber.delta;

    let mut ua = vec![0.0; dim];
    let mut wa = vec![0.0; dim];
    let mut ut = vec![0.0; dim];
    let mut wt = vec![0.0; dim];
    let mut gu = vec![0.0; dim];
    let mut gw = vec![0.0; dim];

    let mut total = 0.0;
    for (i, j, k) in tuples.triplets() {
        for d in 0..dim {
            ua[d] = a.get(i, d) - a.get(j, d);
            wa[d] = a.get(k, d) - a.get(j, d);
            ut[d] = t.get(i, d) - t.get(j, d);
            wt[d] = t.get(k, d) - t.get(j, d);
        }
        let pa = cosine(&ua, &wa);
        let pt = cosine(&ut, &wt);
        let h = huber_with(pt, pa, delta);
        total += h.value;
        tape.branch(h.linear as u8);
        if let Some(out) = tape.grad() {
            for (g, u, w, coef) in
                [(&mut out.grad_acoustic, &ua, &wa, h.grad_q * inv_m), (&mut out.grad_text, &ut, &wt, h.grad_p * inv_m)]
            {
                gu.iter_mut().for_each(|v| *v = 0.0);
                gw.iter_mut().for_each(|v| *v = 0.0);
                cosine_backward(u, w, coef, &mut gu, &mut gw);
                for d in 0..dim {
                    g.row_mut(i)[d] += gu[d];
                    g.row_mut(k)[d] += gw[d];
                    g.row_mut(j)[d] -= gu[d] + gw[d];
                }
            }
        }
    }
    Ok(total * inv_m)
}

fn centroid_mean_distance(x: &Matrix, c: &Centroids) -> f64 {
    let mut sum = 0.0;
    for i in 0..x.rows() {
        for k in 0..c.len() {
            sum += distance(x.row(i), c.values.row(k));
        }
    }
    sum / (x.rows() * c.len()) as f64
}

/// Spreads per-centroid gradients back to the member rows.
fn centroid_backward(gc: &Matrix, c: &Centroids, g: &mut Matrix) {
    for (i, &k) in c.assignment.iter().enumerate() {
        g.axpy_row(i, 1.0 / c.counts[k] as f64, gc.row(k));
    }
}

fn rpl_p_impl(batch: &LabeledEmbeddingBatch, opts: &RelationalOptions, tape: &mut Tape<'_>) -> Result<f64> {
    let (a, t) = (batch.acoustic(), batch.text());
    let n = batch.len();
    let ca = compute_centroids(a, batch.labels())?;
    let ct = compute_centroids(t, batch.labels())?;
    let k_count = ca.len();
    if k_count < 2 {
        bail!(InvalidBatch, "prototypical loss needs at least 2 classes, got {}", k_count);
    }
    let (mu_a, mu_t) = match (opts.frozen_mu, opts.prototype_normalizer) {
        (Some(m), _) => m,
        (None, PrototypeNormalizer::Pairwise) => (mean_pairwise_distance(a)?, mean_pairwise_distance(t)?),
        (None, PrototypeNormalizer::Centroid) => (centroid_mean_distance(a, &ca), centroid_mean_distance(t, &ct)),
    };
    let (live_a, live_t) = (mu_a > EPS, mu_t > EPS);
    let inv_m = 1.0 / (n * k_count) as f64;
    let delta = opts.huber.delta;

    let mut gca = Matrix::zeros(k_count, batch.dim());
    let mut gct = Matrix::zeros(k_count, batch.dim());
    let (mut d_mu_a, mut d_mu_t) = (0.0, 0.0);
    let mut total = 0.0;
    for i in 0..n {
        for k in 0..k_count {
            let da = distance(a.row(i), ca.values.row(k));
            let dt = distance(t.row(i), ct.values.row(k));
            let pa = if live_a { da / mu_a } else { 0.0 };
            let pt = if live_t { dt / mu_t } else { 0.0 };
            let h = huber_with(pt, pa, delta);
            total += h.value;
            tape.branch(h.linear as u8);
            if let Some(out) = tape.grad() {
                if live_a {
                    let c = h.grad_q * inv_m;
                    distance_backward(
                        a.row(i),
                        ca.values.row(k),
                        c / mu_a,
                        out.grad_acoustic.row_mut(i),
                        gca.row_mut(k),
                    );
                    d_mu_a -= c * da / (mu_a * mu_a);
                }
                if live_t {
                    let c = h.grad_p * inv_m;
                    distance_backward(t.row(i), ct.values.row(k), c / mu_t, out.grad_text.row_mut(i), gct.row_mut(k));
                    d_mu_t -= c * dt / (mu_t * mu_t);
                }
            }
        }
    }
    if let Some(out) = tape.grad() {
        if opts.differentiate_mu() {
            match opts.prototype_normalizer {
                PrototypeNormalizer::Pairwise => {
                    if live_a {
                        mu_backward(a, &mut out.grad_acoustic, d_mu_a);
                    }
                    if live_t {
                        mu_backward(t, &mut out.grad_text, d_mu_t);
                    }
                }
                PrototypeNormalizer::Centroid => {
                    for i in 0..n {
                        for k in 0..k_count {
                            if live_a {
                                let c = d_mu_a * inv_m;
                                distance_backward(
                                    a.row(i),
                                    ca.values.row(k),
                                    c,
                                    out.grad_acoustic.row_mut(i),
                                    gca.row_mut(k),
                                );
                            }
                            if live_t {
                                let c = d_mu_t * inv_m;
                                distance_backward(
                                    t.row(i),
                                    ct.values.row(k),
                                    c,
                                    out.grad_text.row_mut(i),
                                    gct.row_mut(k),
                                );
                            }
                        }
                    }
                }
            }
        }
        centroid_backward(&gca, &ca, &mut out.grad_acoustic);
        centroid_backward(&gct, &ct, &mut out.grad_text);
    }
    Ok(total * inv_m)
}
