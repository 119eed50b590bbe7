//! Audio–text pair scoring, equal error rate and average precision.

use alloc::vec::Vec;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::embedding::cosine;
use crate::error::{bail, Result};
use crate::linalg::Matrix;

/// Scores of (acoustic, text) pairs with same-keyword labels.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoredPairSet {
    pub scores: Vec<f64>,
    pub labels: Vec<bool>,
    /// `(acoustic row, text class row)` behind each score, when sampled.
    pub pairs: Vec<(usize, usize)>,
    /// Set when a requested count exceeded its population.
    pub with_replacement: bool,
}

impl ScoredPairSet {
    pub fn new(scores: Vec<f64>, labels: Vec<bool>) -> Result<Self> {
        if scores.len() != labels.len() {
            bail!(InvalidInput, "{} scores but {} labels", scores.len(), labels.len());
        }
        if !scores.iter().all(|s| s.is_finite()) {
            bail!(InvalidInput, "scores must be finite");
        }
        let n_pos = labels.iter().filter(|&&l| l).count();
        if n_pos == 0 || n_pos == labels.len() {
            bail!(
                InvalidInput,
                "need at least one positive and one negative pair ({} of {} positive)",
                n_pos,
                labels.len()
            );
        }
        Ok(Self { scores, labels, pairs: Vec::new(), with_replacement: false })
    }

    pub fn n_pos(&self) -> usize {
        self.labels.iter().filter(|&&l| l).count()
    }

    pub fn n_neg(&self) -> usize {
        self.labels.len() - self.n_pos()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub eer: f64,
    pub eer_threshold: f64,
    pub ap: f64,
    pub n_pos: usize,
    pub n_neg: usize,
    pub sampled_with_replacement: bool,
}

/// One operating point of the detection-error tradeoff.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DetPoint {
    pub threshold: f64,
    /// Fraction of negatives scored at or above the threshold.
    pub far: f64,
    /// Fraction of positives scored below the threshold.
    pub frr: f64,
}

/// Numeric order; unlike `total_cmp`, `-0.0` and `0.0` tie. Scores are finite.
fn by_score(a: f64, b: f64) -> core::cmp::Ordering {
    a.partial_cmp(&b).expect("finite scores")
}

/// Operating points at every distinct score (ascending), closed by a point
/// at `+∞` where everything is rejected.
pub fn det_points(pairs: &ScoredPairSet) -> Vec<DetPoint> {
    let mut order: Vec<usize> = (0..pairs.scores.len()).collect();
    order.sort_by(|&x, &y| by_score(pairs.scores[x], pairs.scores[y]));
    let n_pos = pairs.n_pos() as f64;
    let n_neg = pairs.n_neg() as f64;
    let mut points = Vec::new();
    let (mut pos_below, mut neg_below) = (0usize, 0usize);
    let mut r = 0;
    while r < order.len() {
        let t = pairs.scores[order[r]];
        points.push(DetPoint { threshold: t, far: 1.0 - neg_below as f64 / n_neg, frr: pos_below as f64 / n_pos });
        while r < order.len() && pairs.scores[order[r]] == t {
            if pairs.labels[order[r]] {
                pos_below += 1;
            } else {
                neg_below += 1;
            }
            r += 1;
        }
    }
    points.push(DetPoint { threshold: f64::INFINITY, far: 0.0, frr: 1.0 });
    points
}

/// Equal error rate and the threshold where it occurs, linearly interpolated
/// between the two adjacent operating points where `FAR − FRR` changes sign.
pub fn compute_eer(pairs: &ScoredPairSet) -> (f64, f64) {
    eer_from_points(&det_points(pairs))
}

pub(crate) fn eer_from_points(points: &[DetPoint]) -> (f64, f64) {
    // The first point has FAR = 1, FRR = 0 and the last FAR = 0, FRR = 1.
    for r in 1..points.len() {
        let cur = points[r];
        let d_cur = cur.far - cur.frr;
        if d_cur > 0.0 {
            continue;
        }
        if d_cur == 0.0 {
            return (cur.far, cur.threshold);
        }
        let prev = points[r - 1];
        let d_prev = prev.far - prev.frr;
        let s = d_prev / (d_prev - d_cur);
        let eer = prev.far + s * (cur.far - prev.far);
        let threshold = if cur.threshold.is_finite() {
            prev.threshold + s * (cur.threshold - prev.threshold)
        } else {
            prev.threshold
        };
        return (eer, threshold);
    }
    unreachable!("operating points always end at FAR = 0, FRR = 1")
}

/// Mean precision at the rank of each positive, ranking by descending score
/// with negatives placed before positives within a tie.
pub fn compute_ap(pairs: &ScoredPairSet) -> f64 {
    let mut order: Vec<usize> = (0..pairs.scores.len()).collect();
    order.sort_by(|&x, &y| {
        by_score(pairs.scores[y], pairs.scores[x]).then(pairs.labels[x].cmp(&pairs.labels[y])).then(x.cmp(&y))
    });
    let mut hits = 0usize;
    let mut sum = 0.0;
    for (rank, &i) in order.iter().enumerate() {
        if pairs.labels[i] {
            hits += 1;
            sum += hits as f64 / (rank + 1) as f64;
        }
    }
    sum / hits as f64
}

/// Scores acoustic embeddings against class text embeddings.
///
/// `text` has one row per entry of `text_classes`. Positives pair an acoustic
/// row with its own class; negatives with any other class. Each side is drawn
/// without replacement unless the requested count exceeds its population, in
/// which case it is drawn with replacement and the set is flagged.
pub fn sample_pairs(
    acoustic: &Matrix,
    labels: &[usize],
    text_classes: &[usize],
    text: &Matrix,
    n_pos: usize,
    n_neg: usize,
    seed: u64,
) -> Result<ScoredPairSet> {
    if acoustic.rows() != labels.len() || text.rows() != text_classes.len() {
        bail!(InvalidInput, "embedding and label counts disagree");
    }
    if text_classes.len() < 2 {
        bail!(InvalidInput, "negative pairs need at least 2 classes, got {}", text_classes.len());
    }
    if n_pos == 0 || n_neg == 0 {
        bail!(InvalidInput, "pair counts must be positive");
    }
    let own: Vec<usize> =
        labels.iter().map(|y| text_classes.iter().position(|c| c == y)).collect::<Option<Vec<_>>>().ok_or_else(
            || crate::Error::InvalidInput(alloc::string::String::from("acoustic label without a text embedding")),
        )?;
    let n_ae = acoustic.rows();
    let others = text_classes.len() - 1;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    let mut draw = |population: usize, count: usize| -> (Vec<usize>, bool) {
        if count <= population {
            (rand::seq::index::sample(&mut rng, population, count).into_vec(), false)
        } else {
            ((0..count).map(|_| rng.random_range(0..population)).collect(), true)
        }
    };
    let (pos_idx, pos_rep) = draw(n_ae, n_pos);
    let (neg_idx, neg_rep) = draw(n_ae * others, n_neg);

    let mut pairs = Vec::with_capacity(n_pos + n_neg);
    let mut out_labels = Vec::with_capacity(n_pos + n_neg);
    for i in pos_idx {
        pairs.push((i, own[i]));
        out_labels.push(true);
    }
    for m in neg_idx {
        let i = m / others;
        let r = m % others;
        let c = if r >= own[i] { r + 1 } else { r };
        pairs.push((i, c));
        out_labels.push(false);
    }
    let scores = pairs.iter().map(|&(i, c)| cosine(acoustic.row(i), text.row(c))).collect();
    let mut set = ScoredPairSet::new(scores, out_labels)?;
    set.pairs = pairs;
    set.with_replacement = pos_rep || neg_rep;
    Ok(set)
}

pub fn report(pairs: &ScoredPairSet) -> EvalReport {
    let (eer, eer_threshold) = compute_eer(pairs);
    EvalReport {
        eer,
        eer_threshold,
        ap: compute_ap(pairs),
        n_pos: pairs.n_pos(),
        n_neg: pairs.n_neg(),
        sampled_with_replacement: pairs.with_replacement,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;

    fn set(pos: &[f64], neg: &[f64]) -> ScoredPairSet {
        let scores = pos.iter().chain(neg).copied().collect();
        let labels = pos.iter().map(|_| true).chain(neg.iter().map(|_| false)).collect();
        ScoredPairSet::new(scores, labels).unwrap()
    }

    #[test]
    fn eer_examples() {
        assert_eq!(compute_eer(&set(&[0.9, 0.8], &[0.7, 0.1])).0, 0.0);
        assert_eq!(compute_eer(&set(&[0.9, 0.3], &[0.7, 0.1])).0, 0.5);
        let (eer, _) = compute_eer(&set(&[0.1, 0.4, 0.4, 0.9], &[0.9, 0.4, 0.1, 0.4]));
        assert!((eer - 0.5).abs() < 1e-12);
    }

    #[test]
    fn ap_examples() {
        assert_eq!(compute_ap(&set(&[0.9, 0.8], &[0.7, 0.1])), 1.0);
        let ap = compute_ap(&set(&[0.9, 0.5], &[0.7]));
        assert!((ap - 5.0 / 6.0).abs() < 1e-15);
        let m = 9;
        let negs: Vec<f64> = (0..m).map(|i| 0.5 + i as f64 * 0.01).collect();
        assert!((compute_ap(&set(&[0.1], &negs)) - 1.0 / (m + 1) as f64).abs() < 1e-15);
    }

    #[test]
    fn ties_are_pessimistic() {
        // One positive tied with one negative ranks second.
        assert_eq!(compute_ap(&set(&[0.5], &[0.5])), 0.5);
    }

    #[test]
    fn signed_zeros_tie() {
        assert_eq!(compute_ap(&set(&[0.0], &[-0.0])), 0.5);
        assert_eq!(compute_ap(&set(&[-0.0], &[0.0])), 0.5);
    }

    #[test]
    fn pair_set_requires_both_labels() {
        assert!(ScoredPairSet::new(vec![0.1, 0.2], vec![true, true]).is_err());
        assert!(ScoredPairSet::new(vec![0.1], vec![true, false]).is_err());
        assert!(ScoredPairSet::new(vec![f64::NAN, 0.2], vec![true, false]).is_err());
    }

    #[test]
    fn exhaustive_tiny_sampling() {
        let a = Matrix::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap();
        let t = Matrix::from_rows(&[vec![1.0, 0.1], vec![0.1, 1.0]]).unwrap();
        let s = sample_pairs(&a, &[5, 8], &[5, 8], &t, 2, 2, 1).unwrap();
        let mut pos: Vec<_> = s.pairs[..2].to_vec();
        let mut neg: Vec<_> = s.pairs[2..].to_vec();
        pos.sort_unstable();
        neg.sort_unstable();
        assert_eq!(pos, vec![(0, 0), (1, 1)]);
        assert_eq!(neg, vec![(0, 1), (1, 0)]);
        assert!(!s.with_replacement);
        let again = sample_pairs(&a, &[5, 8], &[5, 8], &t, 2, 2, 1).unwrap();
        assert_eq!(s, again);
        assert!(sample_pairs(&a, &[5, 8], &[5, 8], &t, 5, 2, 1).unwrap().with_replacement);
        let one = Matrix::from_rows(&[vec![1.0, 0.0]]).unwrap();
        assert!(sample_pairs(&a, &[5, 5], &[5], &one, 2, 2, 1).is_err());
    }
}
