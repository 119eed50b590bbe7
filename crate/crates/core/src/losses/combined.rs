//! Weighted combination of the point-to-point, relational and auxiliary terms.

use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use super::auxiliary::{mine_hardest, monophone_ce_loss, monophone_ce_value, pc_loss, pc_value};
use super::auxiliary::{triplet_loss_with_mining, triplet_value, TripletMining, DEFAULT_TRIPLET_MARGIN};
use super::proxy::{adams_loss, adams_value, asyp_loss, asyp_value, AdaMSTable, AsyPParams};
use super::relational::{rpl_a_loss, rpl_a_value, rpl_d_loss, rpl_d_value, rpl_p_loss, rpl_p_value};
use super::{Evaluation, LossOutput, RelationalOptions};
use crate::embedding::{enumerate_tuples, LabeledEmbeddingBatch, TupleSampling};
use crate::error::{bail, Result};
use crate::linalg::{dot, norm, Matrix};
use crate::EPS;

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossWeights {
    pub p2p: f64,
    pub rpl_d: f64,
    pub rpl_a: f64,
    pub rpl_p: f64,
    pub pc: f64,
    pub mono: f64,
    pub triplet: f64,
}

impl LossWeights {
    pub fn p2p_only() -> Self {
        Self { p2p: 1.0, ..Self::default() }
    }

    fn all(&self) -> [(&'static str, f64); 7] {
        [
            ("p2p", self.p2p),
            ("rpl_d", self.rpl_d),
            ("rpl_a", self.rpl_a),
            ("rpl_p", self.rpl_p),
            ("pc", self.pc),
            ("mono", self.mono),
            ("triplet", self.triplet),
        ]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum P2pVariant {
    AsypFixed,
    #[default]
    AdamsLearnable,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CombinedLossConfig {
    pub weights: LossWeights,
    pub p2p_variant: P2pVariant,
    /// Fixed AsyP parameters, and the initial values of every AdaMS row.
    pub asyp: AsyPParams,
    pub normalize_embeddings: bool,
    pub tuple_sampling: TupleSampling,
    pub relational: RelationalOptions,
    pub triplet_margin: f64,
    /// Drop the text-side gradients of the relational terms so that text
    /// embeddings act as fixed teachers for the acoustic structure.
    pub rpl_detach_text: bool,
}

impl Default for CombinedLossConfig {
    fn default() -> Self {
        Self {
            weights: LossWeights::p2p_only(),
            p2p_variant: P2pVariant::default(),
            asyp: AsyPParams::default(),
            normalize_embeddings: false,
            tuple_sampling: TupleSampling::Exhaustive,
            relational: RelationalOptions::default(),
            triplet_margin: DEFAULT_TRIPLET_MARGIN,
            rpl_detach_text: true,
        }
    }
}

impl CombinedLossConfig {
    pub fn validate(&self) -> Result<()> {
        let mut any = false;
        for (name, w) in self.weights.all() {
            if !(w >= 0.0 && w.is_finite()) {
                bail!(Config, "weight {} must be finite and non-negative, got {}", name, w);
            }
            any |= w > 0.0;
        }
        if !any {
            bail!(Config, "at least one loss weight must be positive");
        }
        if !(self.relational.huber.delta > 0.0) {
            bail!(Config, "huber delta must be positive");
        }
        self.asyp.validate()
    }
}

/// Per-utterance monophone logits and labels for the frame-level term.
#[derive(Debug, Clone, Copy)]
pub struct FrameBatch<'a> {
    pub logits: &'a [Matrix],
    pub labels: &'a [Vec<usize>],
}

/// Unweighted value of every term; inactive terms are 0.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct TermValues {
    pub p2p: f64,
    pub rpl_d: f64,
    pub rpl_a: f64,
    pub rpl_p: f64,
    pub pc: f64,
    pub mono: f64,
    pub triplet: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CombinedOutput {
    /// Weighted total with gradients w.r.t. embeddings and AdaMS rows.
    pub loss: LossOutput,
    /// Gradients w.r.t. the frame logits (empty when the term is off).
    pub grad_frame_logits: Vec<Matrix>,
    pub terms: TermValues,
}

pub fn combined_loss(
    batch: &LabeledEmbeddingBatch,
    frames: Option<FrameBatch<'_>>,
    config: &CombinedLossConfig,
    adams: Option<&AdaMSTable>,
) -> Result<CombinedOutput> {
    let mined = if config.weights.triplet > 0.0 { Some(mine_batch(batch, config)?) } else { None };
    combined_grad_impl(batch, frames, config, adams, mined.as_deref())
}

/// [`combined_loss`] with externally frozen triplet mining.
pub fn combined_loss_with_mining(
    batch: &LabeledEmbeddingBatch,
    frames: Option<FrameBatch<'_>>,
    config: &CombinedLossConfig,
    adams: Option<&AdaMSTable>,
    mined: &[TripletMining],
) -> Result<CombinedOutput> {
    combined_grad_impl(batch, frames, config, adams, Some(mined))
}

/// Value-only evaluation. Triplet mining is recomputed unless `mined` is given.
pub fn combined_value(
    batch: &LabeledEmbeddingBatch,
    frames: Option<FrameBatch<'_>>,
    config: &CombinedLossConfig,
    adams: Option<&AdaMSTable>,
    mined: Option<&[TripletMining]>,
) -> Result<Evaluation> {
    check_inputs(frames, config, adams)?;
    let w = config.weights;
    let batch = prepare(batch, config)?;
    let batch = &batch.0;
    let mut value = 0.0;
    let mut branches = Vec::new();
    let mut add = |weight: f64, e: Evaluation| {
        value += weight * e.value;
        branches.extend(e.branches);
    };
    if w.p2p > 0.0 {
        let e = match adams {
            Some(t) => adams_value(batch, t)?,
            None => asyp_value(batch, &config.asyp)?,
        };
        add(w.p2p, e);
    }
    if w.rpl_d > 0.0 {
        let tuples = enumerate_tuples(2, batch.len(), config.tuple_sampling)?;
        add(w.rpl_d, rpl_d_value(batch, &tuples, &config.relational)?);
    }
    if w.rpl_a > 0.0 {
        let tuples = enumerate_tuples(3, batch.len(), config.tuple_sampling)?;
        add(w.rpl_a, rpl_a_value(batch, &tuples, &config.relational)?);
    }
    if w.rpl_p > 0.0 {
        add(w.rpl_p, rpl_p_value(batch, &config.relational)?);
    }
    if w.pc > 0.0 {
        add(w.pc, pc_value(batch)?);
    }
    if w.mono > 0.0 {
        let f = frames.expect("checked");
        add(w.mono, monophone_ce_value(f.logits, f.labels)?);
    }
    if w.triplet > 0.0 {
        let owned;
        let mined = match mined {
            Some(m) => m,
            None => {
                owned = mine_hardest(batch.acoustic(), batch.labels())?;
                &owned
            }
        };
        add(w.triplet, triplet_value(batch.acoustic(), mined, config.triplet_margin)?);
    }
    Ok(Evaluation { value, branches })
}

/// Mining indices for the batch as the loss will see it (after optional normalization).
fn mine_batch(batch: &LabeledEmbeddingBatch, config: &CombinedLossConfig) -> Result<Vec<TripletMining>> {
    let prepared = prepare(batch, config)?;
    mine_hardest(prepared.0.acoustic(), prepared.0.labels())
}

fn check_inputs(frames: Option<FrameBatch<'_>>, config: &CombinedLossConfig, adams: Option<&AdaMSTable>) -> Result<()> {
    config.validate()?;
    match (config.p2p_variant, adams) {
        (P2pVariant::AdamsLearnable, None) if config.weights.p2p > 0.0 => {
            bail!(Config, "adams-learnable variant requires an AdaMS table")
        }
        (P2pVariant::AsypFixed, Some(_)) => bail!(Config, "an AdaMS table was given for the fixed AsyP variant"),
        _ => {}
    }
    if config.weights.mono > 0.0 && frames.is_none() {
        bail!(Config, "monophone term is active but no frame logits were given");
    }
    Ok(())
}

/// Batch after optional row-wise L2 normalization, plus the pre-normalization norms.
struct Prepared(LabeledEmbeddingBatch, Option<(Vec<f64>, Vec<f64>)>);

fn prepare(batch: &LabeledEmbeddingBatch, config: &CombinedLossConfig) -> Result<Prepared> {
    if !config.normalize_embeddings {
        return Ok(Prepared(batch.clone(), None));
    }
    let (a, na) = normalize_rows(batch.acoustic());
    let (t, nt) = normalize_rows(batch.text());
    Ok(Prepared(LabeledEmbeddingBatch::untied(a, t, batch.labels().to_vec())?, Some((na, nt))))
}

fn normalize_rows(x: &Matrix) -> (Matrix, Vec<f64>) {
    let mut y = x.clone();
    let mut norms = Vec::with_capacity(x.rows());
    for i in 0..x.rows() {
        let n = norm(x.row(i));
        norms.push(n);
        if n >= EPS {
            y.row_mut(i).iter_mut().for_each(|v| *v /= n);
        }
    }
    (y, norms)
}

/// Maps gradients w.r.t. normalized rows `y = x/‖x‖` back to `x`.
fn normalize_backward(y: &Matrix, norms: &[f64], g: &mut Matrix) {
    for i in 0..y.rows() {
        let n = norms[i];
        if n < EPS {
            continue;
        }
        let proj = dot(y.row(i), g.row(i));
        let yi = y.row(i).to_vec();
        for (gv, yv) in g.row_mut(i).iter_mut().zip(yi) {
            *gv = (*gv - yv * proj) / n;
        }
    }
}

fn combined_grad_impl(
    batch: &LabeledEmbeddingBatch,
    frames: Option<FrameBatch<'_>>,
    config: &CombinedLossConfig,
    adams: Option<&AdaMSTable>,
    mined: Option<&[TripletMining]>,
) -> Result<CombinedOutput> {
    check_inputs(frames, config, adams)?;
    let w = config.weights;
    let prepared = prepare(batch, config)?;
    let b = &prepared.0;
    let mut total = LossOutput::zeros(b.len(), b.dim());
    let mut terms = TermValues::default();
    let mut grad_frame_logits = Vec::new();

    if w.p2p > 0.0 {
        let out = match adams {
            Some(t) => adams_loss(b, t)?,
            None => asyp_loss(b, &config.asyp)?,
        };
        terms.p2p = out.value;
        total.accumulate(w.p2p, &out);
    }
    let relational = |out: &mut LossOutput| {
        if config.rpl_detach_text {
            out.grad_text.scale(0.0);
        }
    };
    if w.rpl_d > 0.0 {
        let tuples = enumerate_tuples(2, b.len(), config.tuple_sampling)?;
        let mut out = rpl_d_loss(b, &tuples, &config.relational)?;
        relational(&mut out);
        terms.rpl_d = out.value;
        total.accumulate(w.rpl_d, &out);
    }
    if w.rpl_a > 0.0 {
        let tuples = enumerate_tuples(3, b.len(), config.tuple_sampling)?;
        let mut out = rpl_a_loss(b, &tuples, &config.relational)?;
        relational(&mut out);
        terms.rpl_a = out.value;
        total.accumulate(w.rpl_a, &out);
    }
    if w.rpl_p > 0.0 {
        let mut out = rpl_p_loss(b, &config.relational)?;
        relational(&mut out);
        terms.rpl_p = out.value;
        total.accumulate(w.rpl_p, &out);
    }
    if w.pc > 0.0 {
        let out = pc_loss(b)?;
        terms.pc = out.value;
        total.accumulate(w.pc, &out);
    }
    if w.mono > 0.0 {
        let f = frames.expect("checked");
        let mut out = monophone_ce_loss(f.logits, f.labels)?;
        terms.mono = out.value;
        total.value += w.mono * out.value;
        out.grad_logits.iter_mut().for_each(|g| g.scale(w.mono));
        grad_frame_logits = out.grad_logits;
    }
    if w.triplet > 0.0 {
        let mined = mined.expect("mined by caller");
        let out = triplet_loss_with_mining(b.acoustic(), mined, config.triplet_margin)?;
        terms.triplet = out.value;
        total.value += w.triplet * out.value;
        total.grad_acoustic.add_scaled(w.triplet, &out.grad_acoustic);
    }

    if let Some((na, nt)) = &prepared.1 {
        normalize_backward(b.acoustic(), na, &mut total.grad_acoustic);
        normalize_backward(b.text(), nt, &mut total.grad_text);
    }
    if !total.is_finite() {
        bail!(NonFinite, "combined loss produced a non-finite value or gradient");
    }
    Ok(CombinedOutput { loss: total, grad_frame_logits, terms })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn batch() -> LabeledEmbeddingBatch {
        let a = Matrix::from_rows(&[
            alloc::vec![0.3, -1.0, 0.2],
            alloc::vec![0.5, -0.7, 0.1],
            alloc::vec![-0.4, 0.8, 1.0],
            alloc::vec![-0.2, 1.1, 0.7],
        ])
        .unwrap();
        let t = Matrix::from_rows(&[
            alloc::vec![1.0, -1.0, 0.0],
            alloc::vec![1.0, -1.0, 0.0],
            alloc::vec![0.0, 1.0, 1.0],
            alloc::vec![0.0, 1.0, 1.0],
        ])
        .unwrap();
        LabeledEmbeddingBatch::new(a, t, alloc::vec![0, 0, 1, 1]).unwrap()
    }

    #[test]
    fn single_term_reduction() {
        let b = batch();
        let cfg = CombinedLossConfig { p2p_variant: P2pVariant::AsypFixed, ..Default::default() };
        let c = combined_loss(&b, None, &cfg, None).unwrap();
        let p = asyp_loss(&b, &AsyPParams::default()).unwrap();
        assert_eq!(c.loss.value, p.value);
        assert_eq!(c.loss.grad_acoustic, p.grad_acoustic);
    }

    #[test]
    fn config_errors() {
        let b = batch();
        let none = CombinedLossConfig { weights: LossWeights::default(), ..Default::default() };
        assert!(matches!(combined_loss(&b, None, &none, None), Err(crate::Error::Config(_))));
        let adams = CombinedLossConfig::default();
        assert!(matches!(combined_loss(&b, None, &adams, None), Err(crate::Error::Config(_))));
        let mono =
            CombinedLossConfig { weights: LossWeights { mono: 1.0, ..Default::default() }, ..Default::default() };
        assert!(matches!(combined_loss(&b, None, &mono, None), Err(crate::Error::Config(_))));
    }

    #[test]
    fn value_path_matches_gradient_path() {
        let b = batch();
        let cfg = CombinedLossConfig {
            weights: LossWeights { p2p: 1.0, rpl_d: 0.5, rpl_a: 2.0, rpl_p: 1.0, pc: 0.3, mono: 0.0, triplet: 1.0 },
            normalize_embeddings: true,
            ..Default::default()
        };
        let table = AdaMSTable::new(2, cfg.asyp).unwrap();
        let g = combined_loss(&b, None, &cfg, Some(&table)).unwrap();
        let v = combined_value(&b, None, &cfg, Some(&table), None).unwrap();
        assert!((g.loss.value - v.value).abs() < 1e-12);
    }
}
