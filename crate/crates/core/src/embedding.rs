//! Embedding containers, tuple enumeration, and the similarity, normalizer and
//! centroid primitives shared by every loss.

use alloc::collections::BTreeMap;
use alloc::vec;
use alloc::vec::Vec;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{bail, Result};
use crate::linalg::{dot, norm, Matrix};
use crate::EPS;

/// Paired acoustic and text embeddings with one class label per row.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledEmbeddingBatch {
    acoustic: Matrix,
    text: Matrix,
    labels: Vec<usize>,
}

impl LabeledEmbeddingBatch {
    /// Builds a batch and checks every invariant, including that rows sharing a
    /// label carry bit-identical text embeddings.
    pub fn new(acoustic: Matrix, text: Matrix, labels: Vec<usize>) -> Result<Self> {
        let batch = Self::untied(acoustic, text, labels)?;
        let mut first: BTreeMap<usize, usize> = BTreeMap::new();
        for (i, &y) in batch.labels.iter().enumerate() {
            match first.get(&y) {
                Some(&r) if batch.text.row(r) != batch.text.row(i) => {
                    bail!(InvalidBatch, "rows {} and {} share label {} but differ in text embedding", r, i, y)
                }
                Some(_) => {}
                None => {
                    first.insert(y, i);
                }
            }
        }
        Ok(batch)
    }

    /// Same as [`LabeledEmbeddingBatch::new`] without the one-text-embedding-per-class
    /// check. Gradient checks perturb text rows individually and need this.
    pub fn untied(acoustic: Matrix, text: Matrix, labels: Vec<usize>) -> Result<Self> {
        let n = acoustic.rows();
        if n < 2 {
            bail!(InvalidBatch, "batch needs at least 2 rows, got {}", n);
        }
        if text.rows() != n || labels.len() != n {
            bail!(InvalidBatch, "row counts disagree: acoustic {}, text {}, labels {}", n, text.rows(), labels.len());
        }
        if acoustic.cols() == 0 || acoustic.cols() != text.cols() {
            bail!(InvalidBatch, "embedding widths disagree: acoustic {}, text {}", acoustic.cols(), text.cols());
        }
        if !acoustic.is_finite() || !text.is_finite() {
            bail!(InvalidInput, "batch contains non-finite values");
        }
        Ok(Self { acoustic, text, labels })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.acoustic.cols()
    }

    pub fn acoustic(&self) -> &Matrix {
        &self.acoustic
    }

    pub fn text(&self) -> &Matrix {
        &self.text
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn into_parts(self) -> (Matrix, Matrix, Vec<usize>) {
        (self.acoustic, self.text, self.labels)
    }

    /// Number of distinct labels.
    pub fn num_classes(&self) -> usize {
        let mut seen: Vec<usize> = self.labels.clone();
        seen.sort_unstable();
        seen.dedup();
        seen.len()
    }
}

/// Positive and negative index sets for every anchor (`P_i` excludes the anchor).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PairSets {
    pub positives: Vec<Vec<usize>>,
    pub negatives: Vec<Vec<usize>>,
}

impl PairSets {
    pub fn new(labels: &[usize]) -> Self {
        let n = labels.len();
        let mut positives = vec![Vec::new(); n];
        let mut negatives = vec![Vec::new(); n];
        for i in 0..n {
            for j in 0..n {
                if i == j {
                    continue;
                }
                if labels[i] == labels[j] {
                    positives[i].push(j);
                } else {
                    negatives[i].push(j);
                }
            }
        }
        Self { positives, negatives }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "mode", deny_unknown_fields)]
pub enum TupleSampling {
    #[default]
    Exhaustive,
    SeededSubsample {
        count: usize,
        seed: u64,
    },
}

/// Ordered index tuples over a batch of `n_items` rows.
///
/// Exhaustive enumerations are decoded on the fly from a linear index so that
/// large batches never materialize `N(N-1)(N-2)` triplets.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TupleEnumeration {
    arity: usize,
    n_items: usize,
    sampling: TupleSampling,
    selected: Option<Vec<u64>>,
}

impl TupleEnumeration {
    pub fn arity(&self) -> usize {
        self.arity
    }

    pub fn n_items(&self) -> usize {
        self.n_items
    }

    pub fn sampling(&self) -> TupleSampling {
        self.sampling
    }

    /// Number of ordered tuples in the exhaustive enumeration.
    pub fn total(&self) -> u64 {
        tuple_count(self.arity, self.n_items)
    }

    pub fn len(&self) -> usize {
        match &self.selected {
            Some(s) => s.len(),
            None => self.total() as usize,
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn linear_indices(&self) -> impl Iterator<Item = u64> + '_ {
        let (exhaustive, sampled) = match &self.selected {
            Some(s) => (None, Some(s.iter().copied())),
            None => (Some(0..self.total()), None),
        };
        exhaustive.into_iter().flatten().chain(sampled.into_iter().flatten())
    }

    /// Iterates ordered pairs `(i, j)`, `i != j`. Only meaningful for arity 2.
    pub fn pairs(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        debug_assert_eq!(self.arity, 2);
        let n = self.n_items as u64;
        self.linear_indices().map(move |m| decode_pair(m, n))
    }

    /// Iterates ordered triplets `(i, j, k)` of distinct indices. Only meaningful for arity 3.
    pub fn triplets(&self) -> impl Iterator<Item = (usize, usize, usize)> + '_ {
        debug_assert_eq!(self.arity, 3);
        let n = self.n_items as u64;
        self.linear_indices().map(move |m| {
            let per_first = (n - 1) * (n - 2);
            let i = m / per_first;
            let (a, b) = decode_pair(m % per_first, n - 1);
            let lift = |x: usize| if x as u64 >= i { x + 1 } else { x };
            (i as usize, lift(a), lift(b))
        })
    }
}

fn tuple_count(arity: usize, n: usize) -> u64 {
    let n = n as u64;
    match arity {
        2 => n * (n - 1),
        _ => n * (n - 1) * (n - 2),
    }
}

/// Decodes `m ∈ [0, n(n-1))` into the ordered pair at that position.
#[inline]
fn decode_pair(m: u64, n: u64) -> (usize, usize) {
    let i = m / (n - 1);
    let r = m % (n - 1);
    let j = if r >= i { r + 1 } else { r };
    (i as usize, j as usize)
}

/// Enumerates ordered pairs (`arity = 2`) or triplets (`arity = 3`) of distinct
/// row indices. Subsampling draws without replacement from the exhaustive set,
/// is sorted, and is reproducible for a fixed seed. Counts above the population
/// are clamped to it.
pub fn enumerate_tuples(arity: usize, n_items: usize, sampling: TupleSampling) -> Result<TupleEnumeration> {
    if arity != 2 && arity != 3 {
        bail!(InvalidInput, "tuple arity must be 2 or 3, got {}", arity);
    }
    if n_items < arity {
        bail!(InvalidInput, "need at least {} items for {}-tuples, got {}", arity, arity, n_items);
    }
    let selected = match sampling {
        TupleSampling::Exhaustive => None,
        TupleSampling::SeededSubsample { count, seed } => {
            let total = tuple_count(arity, n_items);
            let count = (count as u64).min(total);
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut picked: Vec<u64> = if total <= u32::MAX as u64 {
                rand::seq::index::sample(&mut rng, total as usize, count as usize)
                    .into_iter()
                    .map(|v| v as u64)
                    .collect()
            } else {
                bail!(InvalidInput, "tuple population {} too large to subsample", total);
            };
            picked.sort_unstable();
            Some(picked)
        }
    };
    Ok(TupleEnumeration { arity, n_items, sampling, selected })
}

/// Cosine similarity and its gradients with respect to both arguments.
#[derive(Debug, Clone, PartialEq)]
pub struct CosineGrad {
    pub value: f64,
    pub grad_u: Vec<f64>,
    pub grad_v: Vec<f64>,
}

/// Cosine similarity; either norm below [`EPS`] yields 0.
pub fn cosine_similarity(u: &[f64], v: &[f64]) -> Result<f64> {
    check_vectors(u, v)?;
    Ok(cosine(u, v))
}

pub fn cosine_similarity_grad(u: &[f64], v: &[f64]) -> Result<CosineGrad> {
    check_vectors(u, v)?;
    let mut grad_u = vec![0.0; u.len()];
    let mut grad_v = vec![0.0; v.len()];
    let value = cosine_backward(u, v, 1.0, &mut grad_u, &mut grad_v);
    Ok(CosineGrad { value, grad_u, grad_v })
}

fn check_vectors(u: &[f64], v: &[f64]) -> Result<()> {
    if u.len() != v.len() {
        bail!(InvalidInput, "vector lengths differ: {} vs {}", u.len(), v.len());
    }
    if !u.iter().chain(v).all(|x| x.is_finite()) {
        bail!(InvalidInput, "non-finite vector entry");
    }
    Ok(())
}

#[inline]
pub(crate) fn cosine(u: &[f64], v: &[f64]) -> f64 {
    let nu = norm(u);
    let nv = norm(v);
    if nu < EPS || nv < EPS {
        return 0.0;
    }
    dot(u, v) / (nu * nv)
}

/// Accumulates `coef * ∂cos/∂u` into `gu` and `coef * ∂cos/∂v` into `gv`;
/// returns the similarity.
#[inline]
pub(crate) fn cosine_backward(u: &[f64], v: &[f64], coef: f64, gu: &mut [f64], gv: &mut [f64]) -> f64 {
    let nu = norm(u);
    let nv = norm(v);
    if nu < EPS || nv < EPS {
        return 0.0;
    }
    let inv = 1.0 / (nu * nv);
    let s = dot(u, v) * inv;
    let cu = s / (nu * nu);
    let cv = s / (nv * nv);
    for d in 0..u.len() {
        gu[d] += coef * (v[d] * inv - cu * u[d]);
        gv[d] += coef * (u[d] * inv - cv * v[d]);
    }
    s
}

/// Mean Euclidean distance over all ordered pairs of distinct rows.
pub fn mean_pairwise_distance(embeddings: &Matrix) -> Result<f64> {
    let n = embeddings.rows();
    if n < 2 {
        bail!(InvalidInput, "mean pairwise distance needs at least 2 rows, got {}", n);
    }
    let mut sum = 0.0;
    for i in 0..n {
        for j in (i + 1)..n {
            sum += crate::linalg::distance(embeddings.row(i), embeddings.row(j));
        }
    }
    Ok(2.0 * sum / (n * (n - 1)) as f64)
}

/// Per-class arithmetic means, classes ordered by first appearance.
#[derive(Debug, Clone, PartialEq)]
pub struct Centroids {
    pub values: Matrix,
    /// Distinct labels in first-appearance order; `classes[k]` owns row `k`.
    pub classes: Vec<usize>,
    /// Centroid row of each batch row.
    pub assignment: Vec<usize>,
    pub counts: Vec<usize>,
}

impl Centroids {
    pub fn len(&self) -> usize {
        self.classes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.classes.is_empty()
    }

    pub fn index_of(&self, label: usize) -> Option<usize> {
        self.classes.iter().position(|&c| c == label)
    }
}

pub fn compute_centroids(embeddings: &Matrix, labels: &[usize]) -> Result<Centroids> {
    if embeddings.rows() != labels.len() {
        bail!(InvalidInput, "{} rows but {} labels", embeddings.rows(), labels.len());
    }
    let mut classes: Vec<usize> = Vec::new();
    let mut index: BTreeMap<usize, usize> = BTreeMap::new();
    let mut assignment = Vec::with_capacity(labels.len());
    for &y in labels {
        let k = *index.entry(y).or_insert_with(|| {
            classes.push(y);
            classes.len() - 1
        });
        assignment.push(k);
    }
    let mut values = Matrix::zeros(classes.len(), embeddings.cols());
    let mut counts = vec![0usize; classes.len()];
    for (i, &k) in assignment.iter().enumerate() {
        values.axpy_row(k, 1.0, embeddings.row(i));
        counts[k] += 1;
    }
    for (k, &c) in counts.iter().enumerate() {
        let inv = 1.0 / c as f64;
        values.row_mut(k).iter_mut().for_each(|v| *v *= inv);
    }
    Ok(Centroids { values, classes, assignment, counts })
}
