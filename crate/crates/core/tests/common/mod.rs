//! Naive scalar oracles and seeded generators shared by the integration
//! tests. Everything here works on plain nested `Vec`s and straight loops so
//! it shares no code with the vectorized implementations it checks.

#![allow(dead_code)]

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use relprox_core::embedding::enumerate_tuples;
use relprox_core::losses::{
    adams_value, asyp_value, combined_value, mine_hardest, monophone_ce_value, pc_value, rpl_a_value, rpl_d_value,
    rpl_p_value, triplet_value, AdaMSTable, AsyPParams, CombinedLossConfig, FrameBatch, LossWeights, P2pVariant,
    RelationalOptions,
};
use relprox_core::metrics::{compute_ap, compute_eer, report, sample_pairs, EvalReport, ScoredPairSet};
use relprox_core::synth::{Corpus, Split};
use relprox_core::train::{evaluate_split, EvalConfig, Model, TrainConfig};
use relprox_core::{LabeledEmbeddingBatch, Matrix, TupleSampling};

pub type Rows = Vec<Vec<f64>>;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn gaussian(rng: &mut ChaCha8Rng) -> f64 {
    rng.sample(StandardNormal)
}

pub fn gaussian_rows(rng: &mut ChaCha8Rng, n: usize, d: usize) -> Rows {
    (0..n).map(|_| (0..d).map(|_| gaussian(rng)).collect()).collect()
}

#[derive(Debug, Clone)]
pub struct Sample {
    pub a: Rows,
    pub t: Rows,
    pub y: Vec<usize>,
}

impl Sample {
    pub fn n(&self) -> usize {
        self.y.len()
    }

    pub fn batch(&self) -> LabeledEmbeddingBatch {
        LabeledEmbeddingBatch::untied(matrix(&self.a), matrix(&self.t), self.y.clone()).unwrap()
    }
}

pub fn matrix(rows: &Rows) -> Matrix {
    Matrix::from_rows(rows).unwrap()
}

/// Random batch with `2 ≤ K ≤ N/2` classes of at least two rows each, labels
/// shuffled. With `tied`, rows of one class share their text embedding.
pub fn random_sample(seed: u64, n: usize, d: usize, tied: bool) -> Sample {
    let mut r = rng(seed);
    let k = r.random_range(2..=(n / 2).max(2));
    let mut y: Vec<usize> = (0..n).map(|i| 3 * (i % k) + 1).collect();
    y.shuffle(&mut r);
    let a = gaussian_rows(&mut r, n, d);
    let t = if tied {
        let proto = gaussian_rows(&mut r, 3 * k + 1, d);
        y.iter().map(|&c| proto[c].clone()).collect()
    } else {
        gaussian_rows(&mut r, n, d)
    };
    Sample { a, t, y }
}

/// Batch size and width for seed `s` of an oracle sweep: N in 4..=8, D in 1..=6.
pub fn shape(seed: u64) -> (usize, usize) {
    let mut r = rng(seed ^ 0x5eed);
    (r.random_range(4..=8), r.random_range(1..=6))
}

fn dot(u: &[f64], v: &[f64]) -> f64 {
    let mut s = 0.0;
    for k in 0..u.len() {
        s += u[k] * v[k];
    }
    s
}

fn norm(u: &[f64]) -> f64 {
    dot(u, u).sqrt()
}

pub fn cos(u: &[f64], v: &[f64]) -> f64 {
    let (nu, nv) = (norm(u), norm(v));
    if nu < 1e-12 || nv < 1e-12 {
        return 0.0;
    }
    dot(u, v) / (nu * nv)
}

fn dist(u: &[f64], v: &[f64]) -> f64 {
    let mut s = 0.0;
    for k in 0..u.len() {
        s += (u[k] - v[k]) * (u[k] - v[k]);
    }
    s.sqrt()
}

fn huber(r: f64) -> f64 {
    if r.abs() <= 1.0 {
        0.5 * r * r
    } else {
        r.abs() - 0.5
    }
}

fn mean_distance(x: &Rows) -> f64 {
    let (mut sum, mut count) = (0.0, 0.0);
    for i in 0..x.len() {
        for j in 0..x.len() {
            if i != j {
                sum += dist(&x[i], &x[j]);
                count += 1.0;
            }
        }
    }
    sum / count
}

fn class_means(x: &Rows, y: &[usize]) -> Vec<(usize, Vec<f64>)> {
    let mut classes: Vec<usize> = Vec::new();
    for &c in y {
        if !classes.contains(&c) {
            classes.push(c);
        }
    }
    classes
        .into_iter()
        .map(|c| {
            let mut m = vec![0.0; x[0].len()];
            let mut count = 0.0;
            for i in 0..x.len() {
                if y[i] == c {
                    for k in 0..m.len() {
                        m[k] += x[i][k];
                    }
                    count += 1.0;
                }
            }
            (c, m.into_iter().map(|v| v / count).collect())
        })
        .collect()
}

/// Per-anchor loop: ELSE over own-class acoustic rows seen from the anchor's
/// text row, mean softplus over other-class text rows seen from the anchor's
/// acoustic row. `params(class)` gives `(α, β, λ)`.
pub fn asyp(s: &Sample, params: impl Fn(usize) -> (f64, f64, f64)) -> f64 {
    let n = s.n();
    let mut total = 0.0;
    for i in 0..n {
        let (alpha, beta, lambda) = params(s.y[i]);
        let mut sum_exp = 1.0;
        let (mut soft, mut negatives) = (0.0, 0.0);
        for j in 0..n {
            if s.y[j] == s.y[i] {
                sum_exp += (alpha * (lambda - cos(&s.t[i], &s.a[j]))).exp();
            } else {
                soft += (beta * (cos(&s.a[i], &s.t[j]) - lambda)).exp().ln_1p();
                negatives += 1.0;
            }
        }
        total += sum_exp.ln() / alpha + soft / negatives;
    }
    total / n as f64
}

pub fn rpl_d(s: &Sample) -> f64 {
    let (mu_a, mu_t) = (mean_distance(&s.a), mean_distance(&s.t));
    let (mut sum, mut count) = (0.0, 0.0);
    for i in 0..s.n() {
        for j in 0..s.n() {
            if i != j {
                sum += huber(dist(&s.t[i], &s.t[j]) / mu_t - dist(&s.a[i], &s.a[j]) / mu_a);
                count += 1.0;
            }
        }
    }
    sum / count
}

fn angle(x: &Rows, i: usize, j: usize, k: usize) -> f64 {
    let u: Vec<f64> = (0..x[i].len()).map(|d| x[i][d] - x[j][d]).collect();
    let w: Vec<f64> = (0..x[i].len()).map(|d| x[k][d] - x[j][d]).collect();
    cos(&u, &w)
}

pub fn rpl_a(s: &Sample) -> f64 {
    let n = s.n();
    let (mut sum, mut count) = (0.0, 0.0);
    for i in 0..n {
        for j in 0..n {
            for k in 0..n {
                if i != j && j != k && i != k {
                    sum += huber(angle(&s.t, i, j, k) - angle(&s.a, i, j, k));
                    count += 1.0;
                }
            }
        }
    }
    sum / count
}

pub fn rpl_p(s: &Sample) -> f64 {
    let (mu_a, mu_t) = (mean_distance(&s.a), mean_distance(&s.t));
    let ca = class_means(&s.a, &s.y);
    let ct = class_means(&s.t, &s.y);
    let mut sum = 0.0;
    for i in 0..s.n() {
        for k in 0..ca.len() {
            sum += huber(dist(&s.t[i], &ct[k].1) / mu_t - dist(&s.a[i], &ca[k].1) / mu_a);
        }
    }
    sum / (s.n() * ca.len()) as f64
}

pub fn pc(s: &Sample) -> f64 {
    let ca = class_means(&s.a, &s.y);
    let ct = class_means(&s.t, &s.y);
    let mut sum = 0.0;
    for k in 0..ca.len() {
        sum += dist(&ct[k].1, &ca[k].1);
    }
    sum / ca.len() as f64
}

/// Batch-hard triplet value by scanning every (anchor, positive, negative):
/// the hardest pair maximizes the hinge argument.
pub fn triplet(a: &Rows, y: &[usize], margin: f64) -> f64 {
    let n = a.len();
    let mut total = 0.0;
    for i in 0..n {
        let mut worst = f64::NEG_INFINITY;
        for p in 0..n {
            for q in 0..n {
                if p != i && y[p] == y[i] && y[q] != y[i] {
                    worst = worst.max(margin - cos(&a[i], &a[p]) + cos(&a[i], &a[q]));
                }
            }
        }
        total += worst.max(0.0);
    }
    total / n as f64
}

/// Mean over frames of the negative log softmax at the label.
pub fn mono(logits: &[Rows], labels: &[Vec<usize>]) -> f64 {
    let (mut sum, mut frames) = (0.0, 0.0);
    for (seq, ys) in logits.iter().zip(labels) {
        for (row, &y) in seq.iter().zip(ys) {
            let z: f64 = row.iter().map(|v| v.exp()).sum();
            sum -= (row[y].exp() / z).ln();
            frames += 1.0;
        }
    }
    sum / frames
}

pub fn random_frames(seed: u64, sequences: usize, phones: usize) -> (Vec<Rows>, Vec<Vec<usize>>) {
    let mut r = rng(seed);
    let mut logits = Vec::new();
    let mut labels = Vec::new();
    for _ in 0..sequences {
        let t = r.random_range(1..=5);
        logits.push((0..t).map(|_| (0..phones).map(|_| 3.0 * gaussian(&mut r)).collect()).collect());
        labels.push((0..t).map(|_| r.random_range(0..phones)).collect());
    }
    (logits, labels)
}

/// Relative error, falling back to absolute when the oracle is exactly 0.
pub fn relative_error(got: f64, want: f64) -> f64 {
    if want == 0.0 {
        return got.abs();
    }
    (got - want).abs() / want.abs()
}

/// Worst relative disagreement between every loss and its oracle over one
/// seeded batch. Returned as `(loss name, relative error)`.
pub fn oracle_errors(seed: u64) -> Vec<(&'static str, f64)> {
    let (n, d) = shape(seed);
    let s = random_sample(seed, n, d, seed.is_multiple_of(2));
    let b = s.batch();
    let mut r = rng(seed ^ 0xada5);
    let mut out = Vec::new();

    let fixed = AsyPParams::default();
    let got = asyp_value(&b, &fixed).unwrap().value;
    out.push(("asyp", relative_error(got, asyp(&s, |_| (fixed.alpha, fixed.beta, fixed.lambda)))));

    let classes = s.y.iter().max().unwrap() + 1;
    let mut table = AdaMSTable::new(classes, fixed).unwrap();
    for c in 0..classes {
        table.log_alpha[c] += 0.5 * gaussian(&mut r);
        table.log_beta[c] += 0.5 * gaussian(&mut r);
        table.lambda[c] += 0.2 * gaussian(&mut r);
    }
    let got = adams_value(&b, &table).unwrap().value;
    let want = asyp(&s, |c| (table.log_alpha[c].exp(), table.log_beta[c].exp(), table.lambda[c]));
    out.push(("adams", relative_error(got, want)));

    let opts = RelationalOptions::default();
    let pairs = enumerate_tuples(2, n, TupleSampling::Exhaustive).unwrap();
    let triples = enumerate_tuples(3, n, TupleSampling::Exhaustive).unwrap();
    out.push(("rpl_d", relative_error(rpl_d_value(&b, &pairs, &opts).unwrap().value, rpl_d(&s))));
    out.push(("rpl_a", relative_error(rpl_a_value(&b, &triples, &opts).unwrap().value, rpl_a(&s))));
    out.push(("rpl_p", relative_error(rpl_p_value(&b, &opts).unwrap().value, rpl_p(&s))));
    out.push(("pc", relative_error(pc_value(&b).unwrap().value, pc(&s))));

    let margin = 0.2;
    let mined = mine_hardest(b.acoustic(), b.labels()).unwrap();
    let got = triplet_value(b.acoustic(), &mined, margin).unwrap().value;
    out.push(("triplet", relative_error(got, triplet(&s.a, &s.y, margin))));

    let (logits, labels) = random_frames(seed ^ 0xf4a3e, n, 5);
    let mats: Vec<Matrix> = logits.iter().map(matrix).collect();
    out.push(("mono", relative_error(monophone_ce_value(&mats, &labels).unwrap().value, mono(&logits, &labels))));

    let config = CombinedLossConfig {
        weights: LossWeights { p2p: 1.0, rpl_d: 1.0, rpl_a: 1.0, rpl_p: 1.0, pc: 1.0, mono: 1.0, triplet: 1.0 },
        p2p_variant: P2pVariant::AsypFixed,
        ..Default::default()
    };
    let frames = FrameBatch { logits: &mats, labels: &labels };
    let got = combined_value(&b, Some(frames), &config, None, None).unwrap().value;
    let want = asyp(&s, |_| (fixed.alpha, fixed.beta, fixed.lambda))
        + rpl_d(&s)
        + rpl_a(&s)
        + rpl_p(&s)
        + pc(&s)
        + mono(&logits, &labels)
        + triplet(&s.a, &s.y, margin);
    out.push(("combined", relative_error(got, want)));
    out
}

/// Random score set of size 2..=200 with both labels present. Every other
/// seed quantizes scores to a handful of levels so ties are common.
pub fn random_scores(seed: u64) -> (Vec<f64>, Vec<bool>) {
    let mut r = rng(seed);
    let n = r.random_range(2..=200);
    let p = r.random_range(0.05..0.95);
    let mut labels: Vec<bool> = (0..n).map(|_| r.random_bool(p)).collect();
    labels[0] = true;
    labels[1] = false;
    labels.shuffle(&mut r);
    let levels = r.random_range(2..=8) as f64;
    let scores = labels
        .iter()
        .map(|&l| {
            let s = gaussian(&mut r) + if l { 0.7 } else { 0.0 };
            if seed.is_multiple_of(2) {
                (s * levels / 3.0).round()
            } else {
                s
            }
        })
        .collect();
    (scores, labels)
}

/// Equal error rate by recounting both error rates at every candidate
/// threshold and interpolating across the first sign change of FAR − FRR.
pub fn eer_brute(scores: &[f64], labels: &[bool]) -> f64 {
    let mut thresholds: Vec<f64> = scores.to_vec();
    thresholds.sort_by(f64::total_cmp);
    thresholds.dedup();
    thresholds.push(f64::INFINITY);
    let n_pos = labels.iter().filter(|&&l| l).count() as f64;
    let n_neg = labels.len() as f64 - n_pos;
    let rates = |t: f64| {
        let (mut fa, mut fr) = (0.0, 0.0);
        for (s, &l) in scores.iter().zip(labels) {
            if l && *s < t {
                fr += 1.0;
            }
            if !l && *s >= t {
                fa += 1.0;
            }
        }
        (fa / n_neg, fr / n_pos)
    };
    let mut prev = rates(thresholds[0]);
    for &t in &thresholds[1..] {
        let cur = rates(t);
        let (dp, dc) = (prev.0 - prev.1, cur.0 - cur.1);
        if dc <= 0.0 {
            if dc == 0.0 {
                return cur.0;
            }
            return prev.0 + dp / (dp - dc) * (cur.0 - prev.0);
        }
        prev = cur;
    }
    unreachable!()
}

/// Average precision by computing, for every positive, how many items sit at
/// or above it (negatives win ties, positives tie-break by index).
pub fn ap_brute(scores: &[f64], labels: &[bool]) -> f64 {
    let mut sum = 0.0;
    let mut positives = 0.0;
    for p in 0..scores.len() {
        if !labels[p] {
            continue;
        }
        positives += 1.0;
        let (mut rank, mut hits) = (0.0, 0.0);
        for q in 0..scores.len() {
            let ahead = scores[q] > scores[p] || (scores[q] == scores[p] && (!labels[q] || q <= p));
            if ahead {
                rank += 1.0;
                if labels[q] {
                    hits += 1.0;
                }
            }
        }
        sum += hits / rank;
    }
    sum / positives
}

pub fn metric_errors(seed: u64) -> (f64, f64) {
    let (scores, labels) = random_scores(seed);
    let set = ScoredPairSet::new(scores.clone(), labels.clone()).unwrap();
    let eer = (compute_eer(&set).0 - eer_brute(&scores, &labels)).abs();
    let ap = (compute_ap(&set) - ap_brute(&scores, &labels)).abs();
    (eer, ap)
}

/// Random orthogonal matrix by Gram–Schmidt on a Gaussian draw.
pub fn random_orthogonal(rng: &mut ChaCha8Rng, d: usize) -> Rows {
    let mut q: Rows = Vec::new();
    while q.len() < d {
        let mut v: Vec<f64> = (0..d).map(|_| gaussian(rng)).collect();
        for b in &q {
            let c = dot(&v, b);
            for k in 0..d {
                v[k] -= c * b[k];
            }
        }
        let len = norm(&v);
        if len > 1e-6 {
            q.push(v.into_iter().map(|x| x / len).collect());
        }
    }
    q
}

/// `c · Q x + b` applied to every row.
pub fn similarity_transform(x: &Rows, c: f64, q: &Rows, b: &[f64]) -> Rows {
    x.iter().map(|row| (0..row.len()).map(|i| c * dot(&q[i], row) + b[i]).collect()).collect()
}

fn relational_values(s: &Sample) -> [f64; 3] {
    let b = s.batch();
    let opts = RelationalOptions::default();
    let n = s.n();
    let pairs = enumerate_tuples(2, n, TupleSampling::Exhaustive).unwrap();
    let triples = enumerate_tuples(3, n, TupleSampling::Exhaustive).unwrap();
    [
        rpl_d_value(&b, &pairs, &opts).unwrap().value,
        rpl_a_value(&b, &triples, &opts).unwrap().value,
        rpl_p_value(&b, &opts).unwrap().value,
    ]
}

/// Largest change in RPL-D when either modality is scaled by a positive
/// factor spanning several orders of magnitude.
pub fn rpl_d_scaling_change(seed: u64) -> f64 {
    let (n, d) = shape(seed);
    let s = random_sample(seed, n, d, false);
    let base = relational_values(&s)[0];
    let mut r = rng(seed ^ 0x5ca1e);
    let mut worst: f64 = 0.0;
    for side in 0..2 {
        let c = 10f64.powf(r.random_range(-3.0..3.0));
        let mut t = s.clone();
        let rows = if side == 0 { &mut t.a } else { &mut t.t };
        rows.iter_mut().flatten().for_each(|v| *v *= c);
        worst = worst.max((relational_values(&t)[0] - base).abs());
    }
    worst
}

/// Largest change in RPL-A under a random scaling, orthogonal map and
/// translation of either modality.
pub fn rpl_a_similarity_change(seed: u64) -> f64 {
    let (n, d) = shape(seed);
    let s = random_sample(seed, n, d.max(2), false);
    let d = s.a[0].len();
    let base = relational_values(&s)[1];
    let mut r = rng(seed ^ 0x0a7e);
    let mut worst: f64 = 0.0;
    for side in 0..2 {
        let c = 10f64.powf(r.random_range(-2.0..2.0));
        let q = random_orthogonal(&mut r, d);
        let b: Vec<f64> = (0..d).map(|_| 5.0 * gaussian(&mut r)).collect();
        let mut t = s.clone();
        if side == 0 {
            t.a = similarity_transform(&s.a, c, &q, &b);
        } else {
            t.t = similarity_transform(&s.t, c, &q, &b);
        }
        worst = worst.max((relational_values(&t)[1] - base).abs());
    }
    worst
}

/// RPL-D, RPL-A and RPL-P when both modalities carry the same rows.
pub fn relational_at_identity(seed: u64) -> [f64; 3] {
    let (n, d) = shape(seed);
    let mut s = random_sample(seed, n, d, seed.is_multiple_of(2));
    s.a = s.t.clone();
    relational_values(&s)
}

/// Whether EER and AP are unchanged under several strictly increasing maps.
pub fn metrics_transform_change(seed: u64) -> f64 {
    let (scores, labels) = random_scores(seed);
    let base = ScoredPairSet::new(scores.clone(), labels.clone()).unwrap();
    let (eer, ap) = (compute_eer(&base).0, compute_ap(&base));
    let maps: [fn(f64) -> f64; 4] = [|s| 3.0 * s - 1.0, |s| s.exp(), |s| s.atan(), |s| s * s * s + s];
    let mut worst: f64 = 0.0;
    for f in maps {
        let set = ScoredPairSet::new(scores.iter().map(|&s| f(s)).collect(), labels.clone()).unwrap();
        worst = worst.max((compute_eer(&set).0 - eer).abs()).max((compute_ap(&set) - ap).abs());
    }
    worst
}

/// Test-split report with every acoustic embedding replaced by its class
/// text embedding from a freshly initialized model.
pub fn oracle_endpoint(corpus: &Corpus, cfg: &TrainConfig, eval: &EvalConfig) -> EvalReport {
    let model = Model::init(corpus, cfg).unwrap();
    let utterances: Vec<_> = corpus.utterances.iter().filter(|u| u.split == Split::Test).collect();
    let classes = corpus.class_ids(Split::Test);
    let (_, labels, te) = model.embed_split(&utterances, &classes).unwrap();
    let rows: Rows = labels.iter().map(|y| te.row(classes.iter().position(|c| c == y).unwrap()).to_vec()).collect();
    let pairs = sample_pairs(&matrix(&rows), &labels, &classes, &te, eval.n_pos, eval.n_neg, eval.seed).unwrap();
    report(&pairs)
}

/// Test-split report of a freshly initialized model.
pub fn untrained_endpoint(corpus: &Corpus, cfg: &TrainConfig, eval: &EvalConfig) -> EvalReport {
    evaluate_split(&Model::init(corpus, cfg).unwrap(), corpus, Split::Test, eval).unwrap()
}
