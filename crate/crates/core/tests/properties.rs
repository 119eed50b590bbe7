mod common;

use rand::seq::SliceRandom;
use rand::Rng;
use relprox_core::embedding::{compute_centroids, cosine_similarity_grad, enumerate_tuples};
use relprox_core::gradcheck::finite_difference_gradient;
use relprox_core::losses::{asyp_value, rpl_d_loss, AsyPParams, RelationalOptions};
use relprox_core::metrics::{compute_ap, compute_eer, ScoredPairSet};
use relprox_core::synth::{generate_corpus, Split, SyntheticCorpusSpec};
use relprox_core::{LabeledEmbeddingBatch, Matrix, TupleSampling};

fn set(scores: Vec<f64>, labels: Vec<bool>) -> ScoredPairSet {
    ScoredPairSet::new(scores, labels).unwrap()
}

#[test]
fn eer_is_symmetric_under_label_swap_and_negation() {
    for seed in (1..400).step_by(2) {
        let (scores, labels) = common::random_scores(seed);
        let flipped = set(scores.iter().map(|s| -s).collect(), labels.iter().map(|l| !l).collect());
        let (a, b) = (compute_eer(&set(scores, labels)).0, compute_eer(&flipped).0);
        assert!((a - b).abs() < 1e-12, "seed {seed}: {a} vs {b}");
    }
}

#[test]
fn identical_score_multisets_give_half_eer() {
    let mut r = common::rng(3);
    for _ in 0..50 {
        let n = r.random_range(1..40);
        let half: Vec<f64> = (0..n).map(|_| (common::gaussian(&mut r) * 2.0).round()).collect();
        let scores = half.iter().chain(&half).copied().collect();
        let labels = (0..2 * n).map(|i| i < n).collect();
        assert!((compute_eer(&set(scores, labels)).0 - 0.5).abs() < 1e-12);
    }
}

#[test]
fn pessimistic_ap_lower_bounds_random_tie_orders() {
    let mut r = common::rng(11);
    for seed in (0..100).step_by(2) {
        let (scores, labels) = common::random_scores(seed);
        let floor = compute_ap(&set(scores.clone(), labels.clone()));
        for _ in 0..20 {
            // Quantized scores are whole numbers, so jitter below 1/2 only reorders ties.
            let jittered = scores.iter().map(|s| s + r.random_range(0.0..0.4)).collect();
            let ap = compute_ap(&set(jittered, labels.clone()));
            assert!(ap >= floor - 1e-15, "seed {seed}: {ap} below {floor}");
        }
    }
}

#[test]
fn cosine_gradient_matches_finite_differences() {
    let mut r = common::rng(5);
    for _ in 0..50 {
        let d = r.random_range(1..8);
        let u: Vec<f64> = (0..d).map(|_| common::gaussian(&mut r)).collect();
        let v: Vec<f64> = (0..d).map(|_| common::gaussian(&mut r)).collect();
        let g = cosine_similarity_grad(&u, &v).unwrap();
        let fd = finite_difference_gradient(|x| Ok(common::cos(x, &v)), &u, 1e-6).unwrap();
        for k in 0..d {
            assert!((g.grad_u[k] - fd[k]).abs() < 1e-7 * (1.0 + fd[k].abs()));
        }
    }
}

#[test]
fn centroids_do_not_depend_on_row_order() {
    let mut r = common::rng(8);
    for seed in 0..30 {
        let s = common::random_sample(seed, 8, 3, false);
        let mut order: Vec<usize> = (0..8).collect();
        order.shuffle(&mut r);
        let rows: common::Rows = order.iter().map(|&i| s.a[i].clone()).collect();
        let labels: Vec<usize> = order.iter().map(|&i| s.y[i]).collect();
        let a = compute_centroids(&common::matrix(&s.a), &s.y).unwrap();
        let b = compute_centroids(&common::matrix(&rows), &labels).unwrap();
        for (k, &c) in a.classes.iter().enumerate() {
            let kb = b.index_of(c).unwrap();
            for d in 0..3 {
                assert!((a.values.get(k, d) - b.values.get(kb, d)).abs() < 1e-12);
            }
        }
    }
}

#[test]
fn rpl_d_pulls_acoustic_rows_together_when_text_rows_coincide() {
    for seed in 0..20 {
        let s = common::random_sample(seed, 6, 4, false);
        let t = Matrix::from_rows(&vec![vec![0.3, -1.0, 2.0, 0.5]; 6]).unwrap();
        let a = common::matrix(&s.a);
        let batch = LabeledEmbeddingBatch::untied(a.clone(), t.clone(), s.y.clone()).unwrap();
        let pairs = enumerate_tuples(2, 6, TupleSampling::Exhaustive).unwrap();
        let out = rpl_d_loss(&batch, &pairs, &RelationalOptions::default()).unwrap();
        assert!(out.grad_text.as_slice().iter().all(|&g| g == 0.0));
        let mut stepped = a.clone();
        stepped.add_scaled(-1e-3, &out.grad_acoustic);
        let before = relprox_core::embedding::mean_pairwise_distance(&a).unwrap();
        let after = relprox_core::embedding::mean_pairwise_distance(&stepped).unwrap();
        assert!(after < before, "seed {seed}: {before} -> {after}");
    }
}

/// Batch in which only the similarity between text row 0 and acoustic row 1
/// (same class) or acoustic row 0 and text row 2 (other class) moves with θ.
/// Every other row lives in axes 2.. and is orthogonal to the plane of
/// axes 0 and 1 where the moving pair sits.
fn isolated_batch(seed: u64, theta: f64, positive: bool) -> LabeledEmbeddingBatch {
    let mut r = common::rng(seed);
    let d = 6;
    let mut rows = |n: usize| -> common::Rows {
        (0..n).map(|_| (0..d).map(|k| if k < 2 { 0.0 } else { common::gaussian(&mut r) }).collect()).collect()
    };
    let mut a = rows(6);
    let mut t = rows(6);
    let moving = vec![theta.cos(), theta.sin(), 0.0, 0.0, 0.0, 0.0];
    let fixed = vec![1.0, 0.0, 0.0, 0.0, 0.0, 0.0];
    if positive {
        t[0] = fixed;
        a[1] = moving;
    } else {
        a[0] = fixed;
        t[2] = moving;
    }
    let labels = vec![0, 0, 1, 1, 2, 2];
    LabeledEmbeddingBatch::untied(common::matrix(&a), common::matrix(&t), labels).unwrap()
}

#[test]
fn asyp_is_monotone_in_each_similarity() {
    let p = AsyPParams::default();
    for seed in 0..20 {
        for positive in [true, false] {
            let values: Vec<f64> = (0..=40)
                .map(|s| {
                    let theta = std::f64::consts::PI * (1.0 - s as f64 / 40.0);
                    asyp_value(&isolated_batch(seed, theta, positive), &p).unwrap().value
                })
                .collect();
            // θ sweeps from π to 0, so the moving similarity increases.
            for w in values.windows(2) {
                if positive {
                    assert!(w[1] <= w[0] + 1e-15, "seed {seed}: positive similarity raised the loss");
                } else {
                    assert!(w[1] >= w[0] - 1e-15, "seed {seed}: negative similarity lowered the loss");
                }
            }
            assert!(values[0] != values[40]);
        }
    }
}

fn mean_frames(u: &relprox_core::synth::SyntheticUtterance) -> Vec<f64> {
    let f = u.frames.cols();
    let mut m = vec![0.0; f];
    for row in u.frames.iter_rows() {
        for k in 0..f {
            m[k] += row[k] / u.frames.rows() as f64;
        }
    }
    m
}

fn within_class_spread(sigma: f64) -> f64 {
    let spec = SyntheticCorpusSpec { noise_sigma: sigma, ..Default::default() };
    let corpus = generate_corpus(&spec).unwrap();
    let (mut sum, mut count) = (0.0, 0.0);
    for c in 0..spec.num_classes {
        let us: Vec<Vec<f64>> = corpus.utterances.iter().filter(|u| u.class_id == c).map(mean_frames).collect();
        for i in 0..us.len() {
            for j in 0..i {
                sum += us[i].iter().zip(&us[j]).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt();
                count += 1.0;
            }
        }
    }
    sum / count
}

#[test]
fn noise_free_corpus_is_nearest_centroid_separable() {
    let spec = SyntheticCorpusSpec { noise_sigma: 0.0, ..Default::default() };
    let corpus = generate_corpus(&spec).unwrap();
    let train: Vec<_> = corpus.utterances.iter().filter(|u| u.split == Split::Train).collect();
    let feats: Vec<Vec<f64>> = train.iter().map(|u| mean_frames(u)).collect();
    let labels: Vec<usize> = train.iter().map(|u| u.class_id).collect();
    let centroids = compute_centroids(&common::matrix(&feats), &labels).unwrap();
    for (x, &y) in feats.iter().zip(&labels) {
        let nearest = (0..centroids.len())
            .min_by(|&p, &q| {
                let d = |k: usize| relprox_core::linalg::distance(x, centroids.values.row(k));
                d(p).total_cmp(&d(q))
            })
            .unwrap();
        assert_eq!(centroids.classes[nearest], y);
    }
}

#[test]
fn within_class_spread_grows_with_noise() {
    let spreads: Vec<f64> = [0.0, 0.5, 1.0, 2.0].iter().map(|&s| within_class_spread(s)).collect();
    assert!(spreads.windows(2).all(|w| w[0] < w[1]), "{spreads:?}");
}
