//! Auxiliary objectives: prototype–centroid matching, batch-hard triplet on
//! acoustic embeddings, and frame-level monophone cross-entropy.

use alloc::vec;
use alloc::vec::Vec;

use super::{distance_backward, Evaluation, LossOutput, Tape};
use crate::embedding::{compute_centroids, cosine, cosine_backward, LabeledEmbeddingBatch};
use crate::error::{bail, Result};
use crate::linalg::{distance, Matrix};

pub const DEFAULT_TRIPLET_MARGIN: f64 = 0.2;

pub fn pc_loss(batch: &LabeledEmbeddingBatch) -> Result<LossOutput> {
    let mut out = LossOutput::zeros(batch.len(), batch.dim());
    out.value = pc_impl(batch, &mut Tape::Grad(&mut out))?;
    Ok(out)
}

pub fn pc_value(batch: &LabeledEmbeddingBatch) -> Result<Evaluation> {
    let mut branches = Vec::new();
    let value = pc_impl(batch, &mut Tape::Value(&mut branches))?;
    Ok(Evaluation { value, branches })
}

/// Mean distance between each class's text embedding and its acoustic
/// centroid. The text side goes through the same centroid so that individual
/// text rows receive their share of the gradient.
fn pc_impl(batch: &LabeledEmbeddingBatch, tape: &mut Tape<'_>) -> Result<f64> {
    let ca = compute_centroids(batch.acoustic(), batch.labels())?;
    let ct = compute_centroids(batch.text(), batch.labels())?;
    let k_count = ca.len();
    let inv_k = 1.0 / k_count as f64;
    let dim = batch.dim();
    let mut total = 0.0;
    let mut gt = vec![0.0; dim];
    let mut ga = vec![0.0; dim];
    for k in 0..k_count {
        total += distance(ct.values.row(k), ca.values.row(k));
        if let Some(out) = tape.grad() {
            gt.iter_mut().for_each(|v| *v = 0.0);
            ga.iter_mut().for_each(|v| *v = 0.0);
            distance_backward(ct.values.row(k), ca.values.row(k), inv_k, &mut gt, &mut ga);
            let share = 1.0 / ca.counts[k] as f64;
            for (i, _) in ca.assignment.iter().enumerate().filter(|(_, &c)| c == k) {
                out.grad_text.axpy_row(i, share, &gt);
                out.grad_acoustic.axpy_row(i, share, &ga);
            }
        }
    }
    Ok(total * inv_k)
}

/// Hardest positive and negative chosen for one anchor.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TripletMining {
    pub anchor: usize,
    pub positive: usize,
    pub negative: usize,
}

/// Batch-hard mining on cosine similarity: per anchor, the in-class row with
/// the lowest similarity and the out-of-class row with the highest. Ties go to
/// the lowest index.
pub fn mine_hardest(acoustic: &Matrix, labels: &[usize]) -> Result<Vec<TripletMining>> {
    let n = acoustic.rows();
    if labels.len() != n {
        bail!(InvalidInput, "{} rows but {} labels", n, labels.len());
    }
    let mut mined = Vec::with_capacity(n);
    for i in 0..n {
        let mut pos: Option<(usize, f64)> = None;
        let mut neg: Option<(usize, f64)> = None;
        for j in 0..n {
            if j == i {
                continue;
            }
            let s = cosine(acoustic.row(i), acoustic.row(j));
            if labels[j] == labels[i] {
                if pos.is_none_or(|(_, best)| s < best) {
                    pos = Some((j, s));
                }
            } else if neg.is_none_or(|(_, best)| s > best) {
                neg = Some((j, s));
            }
        }
        match (pos, neg) {
            (Some((p, _)), Some((q, _))) => mined.push(TripletMining { anchor: i, positive: p, negative: q }),
            (None, _) => bail!(InvalidBatch, "class {} of anchor {} has a single member", labels[i], i),
            (_, None) => bail!(InvalidBatch, "anchor {} has no out-of-class rows", i),
        }
    }
    Ok(mined)
}

pub fn triplet_loss(acoustic: &Matrix, labels: &[usize], margin: f64) -> Result<LossOutput> {
    let mined = mine_hardest(acoustic, labels)?;
    triplet_loss_with_mining(acoustic, &mined, margin)
}

/// Triplet loss with mining frozen, as used by the gradient checker.
pub fn triplet_loss_with_mining(acoustic: &Matrix, mined: &[TripletMining], margin: f64) -> Result<LossOutput> {
    let mut out = LossOutput::zeros(acoustic.rows(), acoustic.cols());
    out.value = triplet_impl(acoustic, mined, margin, &mut Tape::Grad(&mut out))?;
    Ok(out)
}

pub fn triplet_value(acoustic: &Matrix, mined: &[TripletMining], margin: f64) -> Result<Evaluation> {
    let mut branches = Vec::new();
    let value = triplet_impl(acoustic, mined, margin, &mut Tape::Value(&mut branches))?;
    Ok(Evaluation { value, branches })
}

fn triplet_impl(acoustic: &Matrix, mined: &[TripletMining], margin: f64, tape: &mut Tape<'_>) -> Result<f64> {
    if mined.is_empty() {
        bail!(InvalidBatch, "no anchors to mine");
    }
    let n = acoustic.rows();
    if mined.iter().any(|m| m.anchor >= n || m.positive >= n || m.negative >= n) {
        bail!(InvalidInput, "mining index out of range for {} rows", n);
    }
    let inv = 1.0 / mined.len() as f64;
    let dim = acoustic.cols();
    let mut total = 0.0;
    let (mut g_anchor, mut g_other) = (vec![0.0; dim], vec![0.0; dim]);
    for m in mined {
        let (x, p, q) = (acoustic.row(m.anchor), acoustic.row(m.positive), acoustic.row(m.negative));
        let hinge = margin - cosine(x, p) + cosine(x, q);
        let active = hinge > 0.0;
        tape.branch(active as u8);
        if !active {
            continue;
        }
        total += hinge;
        if let Some(out) = tape.grad() {
            for (other, sign) in [(m.positive, -inv), (m.negative, inv)] {
                g_anchor.iter_mut().for_each(|v| *v = 0.0);
                g_other.iter_mut().for_each(|v| *v = 0.0);
                cosine_backward(x, acoustic.row(other), sign, &mut g_anchor, &mut g_other);
                out.grad_acoustic.axpy_row(m.anchor, 1.0, &g_anchor);
                out.grad_acoustic.axpy_row(other, 1.0, &g_other);
            }
        }
    }
    Ok(total * inv)
}

/// Frame-level loss with gradients w.r.t. the per-utterance logit matrices.
#[derive(Debug, Clone, PartialEq)]
pub struct FrameLossOutput {
    pub value: f64,
    pub grad_logits: Vec<Matrix>,
}

pub fn monophone_ce_loss(frame_logits: &[Matrix], frame_labels: &[Vec<usize>]) -> Result<FrameLossOutput> {
    let mut grad_logits: Vec<Matrix> = frame_logits.iter().map(|m| Matrix::zeros(m.rows(), m.cols())).collect();
    let value = mono_impl(frame_logits, frame_labels, Some(&mut grad_logits))?;
    Ok(FrameLossOutput { value, grad_logits })
}

pub fn monophone_ce_value(frame_logits: &[Matrix], frame_labels: &[Vec<usize>]) -> Result<Evaluation> {
    let value = mono_impl(frame_logits, frame_labels, None)?;
    Ok(Evaluation { value, branches: Vec::new() })
}

/// Mean over all frames of `−log softmax(logits)[label]`; labels are 0-based.
fn mono_impl(logits: &[Matrix], labels: &[Vec<usize>], mut grad: Option<&mut Vec<Matrix>>) -> Result<f64> {
    if logits.len() != labels.len() {
        bail!(InvalidInput, "{} logit sequences but {} label sequences", logits.len(), labels.len());
    }
    let mut frames = 0usize;
    for (l, y) in logits.iter().zip(labels) {
        if l.rows() != y.len() || l.rows() == 0 {
            bail!(InvalidInput, "sequence has {} logit frames and {} labels", l.rows(), y.len());
        }
        if let Some(&bad) = y.iter().find(|&&c| c >= l.cols()) {
            bail!(InvalidInput, "phone label {} outside inventory of {}", bad, l.cols());
        }
        frames += y.len();
    }
    let inv = 1.0 / frames as f64;
    let mut total = 0.0;
    for (s, (l, y)) in logits.iter().zip(labels).enumerate() {
        for (f, &label) in y.iter().enumerate() {
            let row = l.row(f);
            let m = row.iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b));
            let z: f64 = row.iter().map(|&v| libm::exp(v - m)).sum();
            let log_z = m + libm::log(z);
            total += log_z - row[label];
            if let Some(g) = grad.as_deref_mut() {
                let gr = g[s].row_mut(f);
                for (c, &v) in row.iter().enumerate() {
                    gr[c] = inv * libm::exp(v - log_z);
                }
                gr[label] -= inv;
            }
        }
    }
    Ok(total * inv)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rows(v: &[&[f64]]) -> Matrix {
        Matrix::from_rows(&v.iter().map(|r| r.to_vec()).collect::<Vec<_>>()).unwrap()
    }

    #[test]
    fn pc_examples() {
        let a = rows(&[&[3.0, 0.0], &[3.0, 8.0]]);
        let t = rows(&[&[0.0, 0.0], &[0.0, 0.0]]);
        let b = LabeledEmbeddingBatch::new(a, t, vec![4, 4]).unwrap();
        assert!((pc_loss(&b).unwrap().value - 5.0).abs() < 1e-12);

        let a = rows(&[&[1.0, 0.0], &[3.0, 0.0], &[0.0, 5.0], &[0.0, 7.0]]);
        let t = rows(&[&[2.0, 0.0], &[2.0, 0.0], &[0.0, 6.0], &[0.0, 6.0]]);
        let b = LabeledEmbeddingBatch::new(a, t, vec![0, 0, 1, 1]).unwrap();
        assert_eq!(pc_loss(&b).unwrap().value, 0.0);
    }

    #[test]
    fn triplet_examples() {
        // Two orthogonal, perfectly clustered classes.
        let a = rows(&[&[1.0, 0.0], &[2.0, 0.0], &[0.0, 1.0], &[0.0, 3.0]]);
        let out = triplet_loss(&a, &[0, 0, 1, 1], 0.2).unwrap();
        assert_eq!(out.value, 0.0);
        // Every row identical: S_pos = S_neg = 1.
        let a = rows(&[&[1.0, 1.0], &[1.0, 1.0], &[1.0, 1.0], &[1.0, 1.0]]);
        let out = triplet_loss(&a, &[0, 0, 1, 1], 0.2).unwrap();
        assert!((out.value - 0.2).abs() < 1e-12);
    }

    #[test]
    fn triplet_preconditions() {
        let a = rows(&[&[1.0, 0.0], &[2.0, 0.0], &[0.0, 1.0]]);
        assert!(matches!(triplet_loss(&a, &[0, 0, 1], 0.2), Err(crate::Error::InvalidBatch(_))));
        assert!(matches!(triplet_loss(&a, &[0, 0, 0], 0.2), Err(crate::Error::InvalidBatch(_))));
    }

    #[test]
    fn mono_examples() {
        let uniform = Matrix::zeros(3, 4);
        let v = monophone_ce_loss(&[uniform], &[vec![0, 1, 3]]).unwrap().value;
        assert!((v - libm::log(4.0)).abs() < 1e-12);
        let saturated = rows(&[&[50.0, 0.0, 0.0, 0.0]]);
        assert!(monophone_ce_loss(&[saturated.clone()], &[vec![0]]).unwrap().value < 1e-20);
        assert!(matches!(monophone_ce_loss(&[saturated], &[vec![4]]), Err(crate::Error::InvalidInput(_))));
    }
}
