//! Central finite-difference verification of every analytic gradient.
//!
//! Coordinates whose perturbation by `kink_factor · h` in either direction
//! changes any recorded branch (Huber regime, hinge activity) are excluded;
//! the check fails outright if more than `max_excluded_fraction` of the
//! coordinates had to be excluded.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::embedding::{enumerate_tuples, LabeledEmbeddingBatch, TupleSampling};
use crate::error::Result;
use crate::linalg::Matrix;
use crate::losses::{
    adams_loss, adams_value, asyp_loss, asyp_value, combined_loss_with_mining, combined_value, mine_hardest,
    monophone_ce_loss, monophone_ce_value, pc_loss, pc_value, relational_normalizers, rpl_a_loss, rpl_a_value,
    rpl_d_loss, rpl_d_value, rpl_p_loss, rpl_p_value, triplet_loss_with_mining, triplet_value, AdaMSTable, AsyPParams,
    CombinedLossConfig, Evaluation, LossOutput, LossWeights, P2pVariant, PrototypeNormalizer, RelationalOptions,
    GRAD_LAMBDA, GRAD_LOG_ALPHA, GRAD_LOG_BETA,
};
use crate::synth::{generate_corpus, EncoderConfig, SyntheticCorpusSpec, SyntheticUtterance};
use crate::train::{Model, TrainConfig};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GradCheckSettings {
    pub h: f64,
    pub rel_tol: f64,
    pub abs_tol: f64,
    pub kink_factor: f64,
    pub max_excluded_fraction: f64,
}

impl Default for GradCheckSettings {
    fn default() -> Self {
        Self { h: 1e-5, rel_tol: 1e-4, abs_tol: 1e-7, kink_factor: 10.0, max_excluded_fraction: 0.05 }
    }
}

/// Batch shapes and seeds for [`check_all_losses`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GradCheckPlan {
    pub seeds: Vec<u64>,
    pub batch_sizes: [usize; 2],
    pub dims: [usize; 2],
    pub settings: GradCheckSettings,
    /// Adds a `fault_fixture` entry whose analytic gradient is deliberately
    /// corrupted at one coordinate. Negative control; the report must fail.
    pub inject_fault: bool,
}

impl Default for GradCheckPlan {
    fn default() -> Self {
        Self {
            seeds: (0..20).collect(),
            batch_sizes: [4, 8],
            dims: [2, 6],
            settings: GradCheckSettings::default(),
            inject_fault: false,
        }
    }
}

/// Outcome for one loss, accumulated over every batch it was checked on.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradCheckEntry {
    pub name: String,
    pub coordinates: usize,
    pub excluded: usize,
    /// Largest relative error among coordinates outside the absolute tolerance.
    pub max_rel_err: f64,
    pub max_abs_err: f64,
    /// `(coordinate, analytic, numeric)` of the largest relative error.
    pub worst: Option<(usize, f64, f64)>,
    pub mismatches: usize,
    pub passed: bool,
}

impl GradCheckEntry {
    pub fn excluded_fraction(&self) -> f64 {
        if self.coordinates == 0 {
            0.0
        } else {
            self.excluded as f64 / self.coordinates as f64
        }
    }

    fn merge(&mut self, other: &GradCheckEntry, settings: &GradCheckSettings) {
        self.coordinates += other.coordinates;
        self.excluded += other.excluded;
        self.mismatches += other.mismatches;
        self.max_abs_err = self.max_abs_err.max(other.max_abs_err);
        if other.max_rel_err > self.max_rel_err || self.worst.is_none() {
            self.max_rel_err = self.max_rel_err.max(other.max_rel_err);
            self.worst = other.worst.or(self.worst);
        }
        self.passed = self.mismatches == 0 && self.excluded_fraction() <= settings.max_excluded_fraction;
    }

    pub fn line(&self) -> String {
        format!(
            "{:<24} max_rel_err={:.3e} max_abs_err={:.3e} excluded={:.2}% {}",
            self.name,
            self.max_rel_err,
            self.max_abs_err,
            100.0 * self.excluded_fraction(),
            if self.passed { "PASS" } else { "FAIL" }
        )
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradCheckReport {
    pub settings: GradCheckSettings,
    pub entries: Vec<GradCheckEntry>,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.entries.iter().all(|e| e.passed)
    }

    pub fn lines(&self) -> Vec<String> {
        self.entries.iter().map(GradCheckEntry::line).collect()
    }

    pub fn entry(&self, name: &str) -> Option<&GradCheckEntry> {
        self.entries.iter().find(|e| e.name == name)
    }

    fn add(&mut self, entry: GradCheckEntry) {
        match self.entries.iter_mut().find(|e| e.name == entry.name) {
            Some(e) => e.merge(&entry, &self.settings),
            None => self.entries.push(entry),
        }
    }
}

/// Central differences `(f(x + h e_m) − f(x − h e_m)) / 2h` for every `m`.
pub fn finite_difference_gradient<F>(mut f: F, x: &[f64], h: f64) -> Result<Vec<f64>>
where
    F: FnMut(&[f64]) -> Result<f64>,
{
    let mut probe = x.to_vec();
    let mut out = Vec::with_capacity(x.len());
    for m in 0..x.len() {
        probe[m] = x[m] + h;
        let fp = f(&probe)?;
        probe[m] = x[m] - h;
        let fm = f(&probe)?;
        probe[m] = x[m];
        out.push((fp - fm) / (2.0 * h));
    }
    Ok(out)
}

/// Compares `analytic` against central differences of `f` at `x`.
pub fn check_gradient<F>(
    name: &str,
    x: &[f64],
    analytic: &[f64],
    mut f: F,
    s: &GradCheckSettings,
) -> Result<GradCheckEntry>
where
    F: FnMut(&[f64]) -> Result<Evaluation>,
{
    assert_eq!(x.len(), analytic.len(), "gradient length mismatch for {name}");
    let base = f(x)?.branches;
    let mut probe = x.to_vec();
    let mut entry = GradCheckEntry {
        name: String::from(name),
        coordinates: x.len(),
        excluded: 0,
        max_rel_err: 0.0,
        max_abs_err: 0.0,
        worst: None,
        mismatches: 0,
        passed: true,
    };
    let mut eval = |probe: &mut Vec<f64>, m: usize, offset: f64| -> Result<Evaluation> {
        probe[m] = x[m] + offset;
        let e = f(probe);
        probe[m] = x[m];
        e
    };
    for m in 0..x.len() {
        let wide = s.kink_factor * s.h;
        if eval(&mut probe, m, wide)?.branches != base || eval(&mut probe, m, -wide)?.branches != base {
            entry.excluded += 1;
            continue;
        }
        let fd = (eval(&mut probe, m, s.h)?.value - eval(&mut probe, m, -s.h)?.value) / (2.0 * s.h);
        let a = analytic[m];
        let abs = (a - fd).abs();
        let scale = a.abs().max(fd.abs());
        let rel = if abs <= s.abs_tol { 0.0 } else { abs / scale.max(f64::MIN_POSITIVE) };
        entry.max_abs_err = entry.max_abs_err.max(abs);
        if rel > entry.max_rel_err || entry.worst.is_none() {
            entry.max_rel_err = entry.max_rel_err.max(rel);
            entry.worst = Some((m, a, fd));
        }
        if abs > s.abs_tol && rel > s.rel_tol {
            entry.mismatches += 1;
        }
    }
    entry.passed = entry.mismatches == 0 && entry.excluded_fraction() <= s.max_excluded_fraction;
    Ok(entry)
}

struct RandomBatch {
    n: usize,
    d: usize,
    labels: Vec<usize>,
    x: Vec<f64>,
}

impl RandomBatch {
    fn draw(rng: &mut ChaCha8Rng, plan: &GradCheckPlan) -> Self {
        let n = rng.random_range(plan.batch_sizes[0].max(4)..=plan.batch_sizes[1].max(4));
        let d = rng.random_range(plan.dims[0].max(2)..=plan.dims[1].max(2));
        let classes = (n / 2).max(2);
        let mut labels: Vec<usize> = (0..n).map(|i| i % classes).collect();
        labels.shuffle(rng);
        let x = (0..2 * n * d).map(|_| rng.sample(StandardNormal)).collect();
        Self { n, d, labels, x }
    }

    fn num_classes(&self) -> usize {
        self.labels.iter().max().map_or(0, |m| m + 1)
    }

    /// Rows are untied so each text row is an independent coordinate.
    fn batch(&self, x: &[f64]) -> LabeledEmbeddingBatch {
        let nd = self.n * self.d;
        let a = Matrix::from_vec(self.n, self.d, x[..nd].to_vec()).expect("shape");
        let t = Matrix::from_vec(self.n, self.d, x[nd..2 * nd].to_vec()).expect("shape");
        LabeledEmbeddingBatch::untied(a, t, self.labels.clone()).expect("valid batch")
    }

    fn table(&self, x: &[f64]) -> AdaMSTable {
        let c = self.num_classes();
        let off = 2 * self.n * self.d;
        AdaMSTable {
            log_alpha: x[off..off + c].to_vec(),
            log_beta: x[off + c..off + 2 * c].to_vec(),
            lambda: x[off + 2 * c..off + 3 * c].to_vec(),
        }
    }
}

fn flat_grad(out: &LossOutput, with_params: bool) -> Vec<f64> {
    let mut g = out.grad_acoustic.as_slice().to_vec();
    g.extend_from_slice(out.grad_text.as_slice());
    if with_params {
        for key in [GRAD_LOG_ALPHA, GRAD_LOG_BETA, GRAD_LAMBDA] {
            g.extend_from_slice(&out.grad_params[key]);
        }
    }
    g
}

/// Embedding-level check of a loss that only sees the batch.
fn check_batch_loss<G, V>(
    name: &str,
    rb: &RandomBatch,
    s: &GradCheckSettings,
    grad: G,
    value: V,
) -> Result<GradCheckEntry>
where
    G: Fn(&LabeledEmbeddingBatch) -> Result<LossOutput>,
    V: Fn(&LabeledEmbeddingBatch) -> Result<Evaluation>,
{
    let out = grad(&rb.batch(&rb.x))?;
    check_gradient(name, &rb.x, &flat_grad(&out, false), |x| value(&rb.batch(x)), s)
}

/// Runs every loss, the combined objective, and the end-to-end encoders
/// through [`check_gradient`].
pub fn check_all_losses(plan: &GradCheckPlan) -> Result<GradCheckReport> {
    let s = plan.settings;
    let mut report = GradCheckReport { settings: s, entries: Vec::new() };
    let opts = RelationalOptions::default();
    let mu = RelationalOptions { mu_gradient: true, ..opts };
    let centroid = RelationalOptions { prototype_normalizer: PrototypeNormalizer::Centroid, ..opts };

    for &seed in &plan.seeds {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let rb = RandomBatch::draw(&mut rng, plan);
        let n = rb.n;
        let pairs = enumerate_tuples(2, n, TupleSampling::Exhaustive)?;
        let triplets = enumerate_tuples(3, n, TupleSampling::Exhaustive)?;
        let asyp = AsyPParams::default();

        report.add(check_batch_loss("asyp", &rb, &s, |b| asyp_loss(b, &asyp), |b| asyp_value(b, &asyp))?);
        if plan.inject_fault {
            let mut g = flat_grad(&asyp_loss(&rb.batch(&rb.x), &asyp)?, false);
            g[0] += 1e-3 * (1.0 + g[0].abs());
            report.add(check_gradient("fault_fixture", &rb.x, &g, |x| asyp_value(&rb.batch(x), &asyp), &s)?);
        }
        // Stop-gradient normalizers are checked against the objective with μ frozen at `x`.
        let base = rb.batch(&rb.x);
        let frozen = |o: RelationalOptions, prototype: bool| -> Result<RelationalOptions> {
            Ok(RelationalOptions { frozen_mu: Some(relational_normalizers(&base, &o, prototype)?), ..o })
        };
        let (fd, fp, fc) = (frozen(opts, false)?, frozen(opts, true)?, frozen(centroid, true)?);
        report.add(check_batch_loss(
            "rpl_d",
            &rb,
            &s,
            |b| rpl_d_loss(b, &pairs, &opts),
            |b| rpl_d_value(b, &pairs, &fd),
        )?);
        report.add(check_batch_loss(
            "rpl_d_mu_gradient",
            &rb,
            &s,
            |b| rpl_d_loss(b, &pairs, &mu),
            |b| rpl_d_value(b, &pairs, &mu),
        )?);
        report.add(check_batch_loss(
            "rpl_a",
            &rb,
            &s,
            |b| rpl_a_loss(b, &triplets, &opts),
            |b| rpl_a_value(b, &triplets, &opts),
        )?);
        report.add(check_batch_loss("rpl_p", &rb, &s, |b| rpl_p_loss(b, &opts), |b| rpl_p_value(b, &fp))?);
        report.add(check_batch_loss("rpl_p_mu_gradient", &rb, &s, |b| rpl_p_loss(b, &mu), |b| rpl_p_value(b, &mu))?);
        report.add(check_batch_loss("rpl_p_centroid", &rb, &s, |b| rpl_p_loss(b, &centroid), |b| rpl_p_value(b, &fc))?);
        report.add(check_batch_loss("pc", &rb, &s, pc_loss, pc_value)?);

        let mined = mine_hardest(rb.batch(&rb.x).acoustic(), &rb.labels)?;
        let margin = crate::losses::DEFAULT_TRIPLET_MARGIN;
        report.add(check_batch_loss(
            "triplet",
            &rb,
            &s,
            |b| triplet_loss_with_mining(b.acoustic(), &mined, margin),
            |b| triplet_value(b.acoustic(), &mined, margin),
        )?);

        // AdaMS including the per-class parameters.
        let c = rb.num_classes();
        let mut x = rb.x.clone();
        let jitter = |rng: &mut ChaCha8Rng| 0.3 * rng.sample::<f64, _>(StandardNormal);
        x.extend((0..c).map(|_| libm::log(asyp.alpha) + jitter(&mut rng)));
        x.extend((0..c).map(|_| libm::log(asyp.beta) + jitter(&mut rng)));
        x.extend((0..c).map(|_| asyp.lambda + jitter(&mut rng)));
        let out = adams_loss(&rb.batch(&x), &rb.table(&x))?;
        report.add(check_gradient(
            "adams",
            &x,
            &flat_grad(&out, true),
            |x| adams_value(&rb.batch(x), &rb.table(x)),
            &s,
        )?);

        // Monophone cross-entropy on random logits.
        let phones = 4;
        let lens: Vec<usize> = (0..n.min(4)).map(|_| rng.random_range(2..=5)).collect();
        let frame_labels: Vec<Vec<usize>> =
            lens.iter().map(|&t| (0..t).map(|_| rng.random_range(0..phones)).collect()).collect();
        let total: usize = lens.iter().sum();
        let lx: Vec<f64> = (0..total * phones).map(|_| 2.0 * rng.sample::<f64, _>(StandardNormal)).collect();
        let split = |x: &[f64]| -> Vec<Matrix> {
            let mut off = 0;
            lens.iter()
                .map(|&t| {
                    let m = Matrix::from_vec(t, phones, x[off..off + t * phones].to_vec()).expect("shape");
                    off += t * phones;
                    m
                })
                .collect()
        };
        let out = monophone_ce_loss(&split(&lx), &frame_labels)?;
        let g: Vec<f64> = out.grad_logits.iter().flat_map(|m| m.as_slice().iter().copied()).collect();
        report.add(check_gradient("mono", &lx, &g, |x| monophone_ce_value(&split(x), &frame_labels), &s)?);

        // Every embedding-level term together, through L2 normalization.
        let cfg = CombinedLossConfig {
            weights: LossWeights { p2p: 1.0, rpl_d: 0.7, rpl_a: 0.5, rpl_p: 0.6, pc: 0.3, mono: 0.0, triplet: 0.4 },
            p2p_variant: P2pVariant::AsypFixed,
            normalize_embeddings: seed % 2 == 0,
            relational: mu,
            rpl_detach_text: false,
            ..CombinedLossConfig::default()
        };
        let out = combined_loss_with_mining(&rb.batch(&rb.x), None, &cfg, None, &mined)?;
        report.add(check_gradient(
            "combined",
            &rb.x,
            &flat_grad(&out.loss, false),
            |x| combined_value(&rb.batch(x), None, &cfg, None, Some(&mined)),
            &s,
        )?);

        report.add(check_end_to_end(seed, &s)?);
    }
    Ok(report)
}

/// Gradient of the full training objective w.r.t. every encoder weight and
/// AdaMS parameter, on a small synthetic batch.
pub fn check_end_to_end(seed: u64, s: &GradCheckSettings) -> Result<GradCheckEntry> {
    let spec = SyntheticCorpusSpec {
        num_classes: 5,
        dev_classes: 1,
        test_classes: 1,
        latent_dim: 3,
        frame_dim: 4,
        frames_per_utterance: [3, 5],
        phones_per_class: [2, 3],
        phone_inventory_size: 5,
        utterances_per_class: 2,
        seed,
        ..SyntheticCorpusSpec::default()
    };
    let corpus = generate_corpus(&spec)?;
    let loss = CombinedLossConfig {
        weights: LossWeights { p2p: 1.0, rpl_d: 0.5, rpl_a: 0.5, rpl_p: 0.5, pc: 0.2, mono: 0.3, triplet: 0.3 },
        normalize_embeddings: seed % 2 == 1,
        relational: RelationalOptions { mu_gradient: true, ..RelationalOptions::default() },
        rpl_detach_text: false,
        ..CombinedLossConfig::default()
    };
    let cfg = TrainConfig {
        loss,
        model: EncoderConfig { embed_dim: 3, acoustic_hidden: vec![4], text_hidden: vec![4] },
        seed,
        ..TrainConfig::default()
    };
    let mut model = Model::init(&corpus, &cfg)?;
    // Move AdaMS off its shared initial point so per-class gradients differ.
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xADA5);
    if let Some(t) = &mut model.adams {
        for v in t.log_alpha.iter_mut().chain(&mut t.log_beta).chain(&mut t.lambda) {
            *v += 0.2 * rng.sample::<f64, _>(StandardNormal);
        }
    }
    let utterances: Vec<&SyntheticUtterance> =
        corpus.utterances.iter().filter(|u| u.split == crate::synth::Split::Train).collect();
    let mined = model.mine(&utterances)?;
    let (_, grad) = model.batch_gradient(&utterances, &loss, Some(&mined))?;
    let x = model.flat();
    let mut probe = model.clone();
    check_gradient(
        "end_to_end",
        &x,
        &grad,
        |x| {
            probe.set_flat(x)?;
            probe.batch_value(&utterances, &loss, Some(&mined))
        },
        s,
    )
}
