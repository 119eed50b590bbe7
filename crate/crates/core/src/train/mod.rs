//! Mini-batch sampling, AdamW, and the deterministic training loop wiring the
//! toy encoders to the combined loss.

mod optim;
mod sampler;

use alloc::collections::BTreeMap;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use optim::{learning_rate, AdamW, Moments};
pub use sampler::{sample_batch, ClassIndex};

use crate::embedding::{LabeledEmbeddingBatch, TupleSampling};
use crate::error::{bail, Result};
use crate::linalg::Matrix;
use crate::losses::{
    combined_loss, combined_loss_with_mining, combined_value, AdaMSTable, CombinedLossConfig, CombinedOutput,
    Evaluation, FrameBatch, P2pVariant, TermValues, TripletMining, GRAD_LAMBDA, GRAD_LOG_ALPHA, GRAD_LOG_BETA,
};
use crate::metrics::{report, sample_pairs, EvalReport};
use crate::synth::{Corpus, EncoderConfig, Split, SyntheticUtterance, ToyAcousticEncoder, ToyTextEncoder};

/// Pair counts and seed for scoring a split.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub n_pos: usize,
    pub n_neg: usize,
    pub seed: u64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self { n_pos: 10_000, n_neg: 100_000, seed: 0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub classes_per_batch: usize,
    pub utterances_per_class: usize,
    pub lr_initial: f64,
    pub lr_halving_period_epochs: u32,
    pub weight_decay: f64,
    pub epochs: u32,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_epsilon: f64,
    pub loss: CombinedLossConfig,
    pub model: EncoderConfig,
    pub seed: u64,
    pub checkpoint_every: u32,
    /// Score the dev split after every epoch.
    pub eval_dev: bool,
    pub dev_eval: EvalConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            classes_per_batch: 16,
            utterances_per_class: 2,
            lr_initial: 1e-3,
            lr_halving_period_epochs: 10,
            weight_decay: 1e-5,
            epochs: 40,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_epsilon: 1e-8,
            loss: CombinedLossConfig::default(),
            model: EncoderConfig::default(),
            seed: 1,
            checkpoint_every: 10,
            eval_dev: true,
            dev_eval: EvalConfig { n_pos: 2_000, n_neg: 20_000, seed: 0 },
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.classes_per_batch < 2 || self.utterances_per_class < 2 {
            bail!(Config, "batches need at least 2 classes and 2 utterances per class");
        }
        if !(self.lr_initial > 0.0 && self.lr_initial.is_finite()) {
            bail!(Config, "lr_initial must be positive");
        }
        if !(0.0..1.0).contains(&self.adam_beta1)
            || !(0.0..1.0).contains(&self.adam_beta2)
            || !(self.adam_epsilon > 0.0)
        {
            bail!(Config, "adam betas must lie in [0, 1) and epsilon must be positive");
        }
        if !(self.weight_decay >= 0.0) {
            bail!(Config, "weight_decay must be non-negative");
        }
        self.model.validate()?;
        self.loss.validate()
    }

    pub fn optimizer(&self) -> AdamW {
        AdamW {
            beta1: self.adam_beta1,
            beta2: self.adam_beta2,
            epsilon: self.adam_epsilon,
            weight_decay: self.weight_decay,
        }
    }
}

/// Every trainable array: both encoders and, for the learnable variant, the AdaMS table.
#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub acoustic: ToyAcousticEncoder,
    pub text: ToyTextEncoder,
    pub adams: Option<AdaMSTable>,
}

/// Named parameter tensor view.
pub type Tensor<'a> = (String, [usize; 2], &'a [f64]);

impl Model {
    pub fn init(corpus: &Corpus, cfg: &TrainConfig) -> Result<Self> {
        cfg.model.validate()?;
        let spec = &corpus.spec;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let acoustic = ToyAcousticEncoder::new(
            spec.frame_dim,
            &cfg.model.acoustic_hidden,
            cfg.model.embed_dim,
            spec.phone_inventory_size,
            &mut rng,
        );
        let text = ToyTextEncoder::new(corpus.lexicon(), &cfg.model.text_hidden, cfg.model.embed_dim, &mut rng)?;
        let adams = match cfg.loss.p2p_variant {
            P2pVariant::AdamsLearnable => Some(AdaMSTable::new(spec.num_classes, cfg.loss.asyp)?),
            P2pVariant::AsypFixed => None,
        };
        Ok(Self { acoustic, text, adams })
    }

    pub fn tensors(&self) -> Vec<Tensor<'_>> {
        let mut out = self.acoustic.tensors();
        out.extend(self.text.tensors());
        if let Some(t) = &self.adams {
            let rows = t.num_classes();
            out.push((String::from(GRAD_LOG_ALPHA), [rows, 1], &t.log_alpha));
            out.push((String::from(GRAD_LOG_BETA), [rows, 1], &t.log_beta));
            out.push((String::from(GRAD_LAMBDA), [rows, 1], &t.lambda));
        }
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out = self.acoustic.tensors_mut();
        out.extend(self.text.tensors_mut());
        if let Some(t) = &mut self.adams {
            out.push(&mut t.log_alpha);
            out.push(&mut t.log_beta);
            out.push(&mut t.lambda);
        }
        out
    }

    pub fn num_params(&self) -> usize {
        self.tensors().iter().map(|t| t.2.len()).sum()
    }

    pub fn flat(&self) -> Vec<f64> {
        self.tensors().into_iter().flat_map(|t| t.2.iter().copied()).collect()
    }

    pub fn set_flat(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.num_params() {
            bail!(InvalidInput, "expected {} parameters, got {}", self.num_params(), flat.len());
        }
        let mut off = 0;
        for t in self.tensors_mut() {
            let n = t.len();
            t.copy_from_slice(&flat[off..off + n]);
            off += n;
        }
        Ok(())
    }

    fn embed_batch(&self, utterances: &[&SyntheticUtterance]) -> Result<EmbeddedBatch> {
        let d = self.acoustic.embed_dim();
        let n = utterances.len();
        let mut acoustic = Matrix::zeros(n, d);
        let mut text = Matrix::zeros(n, d);
        let mut forwards = Vec::with_capacity(n);
        let mut te: BTreeMap<usize, Vec<f64>> = BTreeMap::new();
        for (i, u) in utterances.iter().enumerate() {
            let f = self.acoustic.forward(&u.frames)?;
            acoustic.row_mut(i).copy_from_slice(&f.embedding);
            forwards.push(f);
            if let alloc::collections::btree_map::Entry::Vacant(slot) = te.entry(u.class_id) {
                slot.insert(self.text.encode_text(u.class_id)?);
            }
            text.row_mut(i).copy_from_slice(&te[&u.class_id]);
        }
        let labels: Vec<usize> = utterances.iter().map(|u| u.class_id).collect();
        let logits = forwards.iter().map(|f| f.frame_logits.clone()).collect();
        let frame_labels = utterances.iter().map(|u| u.frame_phone_labels.clone()).collect();
        Ok(EmbeddedBatch { batch: LabeledEmbeddingBatch::new(acoustic, text, labels)?, forwards, logits, frame_labels })
    }

    /// Combined loss of a batch of utterances and its gradient w.r.t. every
    /// parameter, flattened in [`Model::tensors`] order.
    pub fn batch_gradient(
        &self,
        utterances: &[&SyntheticUtterance],
        cfg: &CombinedLossConfig,
        mined: Option<&[TripletMining]>,
    ) -> Result<(CombinedOutput, Vec<f64>)> {
        let eb = self.embed_batch(utterances)?;
        let frames = FrameBatch { logits: &eb.logits, labels: &eb.frame_labels };
        let out = match mined {
            Some(m) => combined_loss_with_mining(&eb.batch, Some(frames), cfg, self.adams.as_ref(), m)?,
            None => combined_loss(&eb.batch, Some(frames), cfg, self.adams.as_ref())?,
        };

        let mut g_ac = self.acoustic.zeros_like();
        for (i, u) in utterances.iter().enumerate() {
            let d_logits = out.grad_frame_logits.get(i);
            self.acoustic.backward(&u.frames, &eb.forwards[i], out.loss.grad_acoustic.row(i), d_logits, &mut g_ac);
        }
        let mut g_tx = self.text.zeros_like();
        let mut per_class: BTreeMap<usize, Vec<f64>> = BTreeMap::new();
        for (i, u) in utterances.iter().enumerate() {
            let slot = per_class.entry(u.class_id).or_insert_with(|| vec![0.0; self.text.embed_dim()]);
            crate::linalg::axpy(slot, 1.0, out.loss.grad_text.row(i));
        }
        for (class, g) in &per_class {
            self.text.backward(*class, g, &mut g_tx)?;
        }

        let mut flat = Vec::with_capacity(self.num_params());
        g_ac.tensors().into_iter().for_each(|t| flat.extend_from_slice(t.2));
        g_tx.tensors().into_iter().for_each(|t| flat.extend_from_slice(t.2));
        if let Some(table) = &self.adams {
            for key in [GRAD_LOG_ALPHA, GRAD_LOG_BETA, GRAD_LAMBDA] {
                match out.loss.grad_params.get(key) {
                    Some(g) => flat.extend_from_slice(g),
                    None => flat.extend(core::iter::repeat_n(0.0, table.num_classes())),
                }
            }
        }
        Ok((out, flat))
    }

    /// Batch-hard triplet indices at the current parameters.
    pub fn mine(&self, utterances: &[&SyntheticUtterance]) -> Result<Vec<TripletMining>> {
        let eb = self.embed_batch(utterances)?;
        crate::losses::mine_hardest(eb.batch.acoustic(), eb.batch.labels())
    }

    /// Value-only counterpart of [`Model::batch_gradient`].
    pub fn batch_value(
        &self,
        utterances: &[&SyntheticUtterance],
        cfg: &CombinedLossConfig,
        mined: Option<&[TripletMining]>,
    ) -> Result<Evaluation> {
        let eb = self.embed_batch(utterances)?;
        let frames = FrameBatch { logits: &eb.logits, labels: &eb.frame_labels };
        combined_value(&eb.batch, Some(frames), cfg, self.adams.as_ref(), mined)
    }

    /// Acoustic embeddings of `utterances` and text embeddings of `classes`.
    pub fn embed_split(
        &self,
        utterances: &[&SyntheticUtterance],
        classes: &[usize],
    ) -> Result<(Matrix, Vec<usize>, Matrix)> {
        let d = self.acoustic.embed_dim();
        let mut ae = Matrix::zeros(utterances.len(), d);
        for (i, u) in utterances.iter().enumerate() {
            ae.row_mut(i).copy_from_slice(&self.acoustic.encode(&u.frames)?.0);
        }
        let mut te = Matrix::zeros(classes.len(), d);
        for (k, &c) in classes.iter().enumerate() {
            te.row_mut(k).copy_from_slice(&self.text.encode_text(c)?);
        }
        Ok((ae, utterances.iter().map(|u| u.class_id).collect(), te))
    }
}

struct EmbeddedBatch {
    batch: LabeledEmbeddingBatch,
    forwards: Vec<crate::synth::AcousticForward>,
    logits: Vec<Matrix>,
    frame_labels: Vec<Vec<usize>>,
}

/// Encodes a split and scores sampled audio–text pairs.
pub fn evaluate_split(model: &Model, corpus: &Corpus, split: Split, eval: &EvalConfig) -> Result<EvalReport> {
    let utterances: Vec<&SyntheticUtterance> = corpus.utterances.iter().filter(|u| u.split == split).collect();
    let classes = corpus.class_ids(split);
    if utterances.is_empty() || classes.len() < 2 {
        bail!(InvalidInput, "{} split needs utterances from at least 2 classes", split.as_str());
    }
    let (ae, labels, te) = model.embed_split(&utterances, &classes)?;
    let pairs = sample_pairs(&ae, &labels, &classes, &te, eval.n_pos, eval.n_neg, eval.seed)?;
    Ok(report(&pairs))
}

/// Portable snapshot of a ChaCha generator.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RngState {
    pub seed: [u8; 32],
    pub stream: u64,
    pub word_pos: u128,
}

impl RngState {
    pub fn capture(rng: &ChaCha8Rng) -> Self {
        Self { seed: rng.get_seed(), stream: rng.get_stream(), word_pos: rng.get_word_pos() }
    }

    pub fn restore(&self) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::from_seed(self.seed);
        rng.set_stream(self.stream);
        rng.set_word_pos(self.word_pos);
        rng
    }
}

fn train_index(corpus: &Corpus) -> ClassIndex {
    ClassIndex::new(corpus.utterance_ids(Split::Train).into_iter().map(|i| (i, corpus.utterances[i].class_id)))
}

/// One line of the metrics log, averaged over an epoch's batches.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub epoch: u32,
    pub step: u64,
    pub lr: f64,
    pub loss_total: f64,
    pub terms: TermValues,
    pub dev_ap: f64,
    pub dev_eer: f64,
}

/// Everything needed to continue training bit-identically.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainState {
    pub model: Model,
    pub moments: Moments,
    /// Optimizer steps taken so far.
    pub step: u64,
    /// Completed epochs.
    pub epoch: u32,
    pub rng: ChaCha8Rng,
}

impl TrainState {
    pub fn init(corpus: &Corpus, cfg: &TrainConfig) -> Result<Self> {
        cfg.validate()?;
        train_index(corpus).check(cfg.classes_per_batch, cfg.utterances_per_class)?;
        let model = Model::init(corpus, cfg)?;
        let moments = Moments::zeros(model.num_params());
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        rng.set_stream(1);
        Ok(Self { model, moments, step: 0, epoch: 0, rng })
    }

    /// Runs one epoch of `⌈train utterances / (P·K)⌉` steps.
    pub fn train_epoch(&mut self, corpus: &Corpus, cfg: &TrainConfig) -> Result<MetricsRow> {
        let train = train_index(corpus);
        let per_batch = cfg.classes_per_batch * cfg.utterances_per_class;
        let steps = train.num_items().div_ceil(per_batch);
        let epoch = self.epoch + 1;
        let lr = learning_rate(cfg.lr_initial, cfg.lr_halving_period_epochs, epoch);
        let opt = cfg.optimizer();

        let mut sums = TermValues::default();
        let mut total = 0.0;
        for _ in 0..steps {
            let items = sample_batch(&train, cfg.classes_per_batch, cfg.utterances_per_class, &mut self.rng)?;
            let utterances: Vec<&SyntheticUtterance> = items.iter().map(|&(i, _)| &corpus.utterances[i]).collect();
            let mut loss_cfg = cfg.loss;
            if let TupleSampling::SeededSubsample { count, seed } = loss_cfg.tuple_sampling {
                loss_cfg.tuple_sampling = TupleSampling::SeededSubsample {
                    count,
                    seed: seed ^ self.step.wrapping_mul(0x9E37_79B9_7F4A_7C15),
                };
            }
            let (out, grads) = self.model.batch_gradient(&utterances, &loss_cfg, None)?;
            if !out.loss.value.is_finite() {
                bail!(NonFinite, "loss is {} at step {}", out.loss.value, self.step + 1);
            }
            let mut params = self.model.flat();
            opt.step(&mut params, &grads, &mut self.moments, self.step + 1, lr)?;
            self.model.set_flat(&params)?;
            self.step += 1;

            total += out.loss.value;
            let t = out.terms;
            sums.p2p += t.p2p;
            sums.rpl_d += t.rpl_d;
            sums.rpl_a += t.rpl_a;
            sums.rpl_p += t.rpl_p;
            sums.pc += t.pc;
            sums.mono += t.mono;
            sums.triplet += t.triplet;
        }
        self.epoch = epoch;
        let inv = 1.0 / steps.max(1) as f64;
        let terms = TermValues {
            p2p: sums.p2p * inv,
            rpl_d: sums.rpl_d * inv,
            rpl_a: sums.rpl_a * inv,
            rpl_p: sums.rpl_p * inv,
            pc: sums.pc * inv,
            mono: sums.mono * inv,
            triplet: sums.triplet * inv,
        };
        let (dev_ap, dev_eer) = if cfg.eval_dev && corpus.spec.dev_classes >= 2 {
            let r = evaluate_split(&self.model, corpus, Split::Dev, &cfg.dev_eval)?;
            (r.ap, r.eer)
        } else {
            (f64::NAN, f64::NAN)
        };
        Ok(MetricsRow { epoch, step: self.step, lr, loss_total: total * inv, terms, dev_ap, dev_eer })
    }
}

/// Trains from `state` until `cfg.epochs` epochs are complete, calling
/// `on_epoch` after each one (e.g. to write checkpoints and log rows).
pub fn train_from<F>(
    corpus: &Corpus,
    cfg: &TrainConfig,
    state: &mut TrainState,
    mut on_epoch: F,
) -> Result<Vec<MetricsRow>>
where
    F: FnMut(&TrainState, &MetricsRow) -> Result<()>,
{
    cfg.validate()?;
    let mut rows = Vec::new();
    while state.epoch < cfg.epochs {
        let row = state.train_epoch(corpus, cfg)?;
        on_epoch(state, &row)?;
        rows.push(row);
    }
    Ok(rows)
}

pub fn train(corpus: &Corpus, cfg: &TrainConfig) -> Result<(TrainState, Vec<MetricsRow>)> {
    let mut state = TrainState::init(corpus, cfg)?;
    let rows = train_from(corpus, cfg, &mut state, |_, _| Ok(()))?;
    Ok((state, rows))
}
