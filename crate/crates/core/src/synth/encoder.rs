//! Toy acoustic and text encoders with hand-written backpropagation.
//!
//! Acoustic: per-frame tanh stack → mean pooling → linear projection to the
//! embedding, plus a per-frame linear phone head on the last hidden layer.
//! Text: phone-frequency input → tanh stack → linear projection.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{bail, Result};
use crate::linalg::{axpy, dot, Matrix};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EncoderConfig {
    pub embed_dim: usize,
    pub acoustic_hidden: Vec<usize>,
    pub text_hidden: Vec<usize>,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self { embed_dim: 16, acoustic_hidden: vec![32], text_hidden: vec![32] }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.embed_dim == 0
            || self.acoustic_hidden.is_empty()
            || self.acoustic_hidden.iter().chain(&self.text_hidden).any(|&h| h == 0)
        {
            bail!(Config, "encoder widths must be positive and the acoustic stack needs a hidden layer");
        }
        Ok(())
    }
}

/// Affine map `y = W x + b` with `W` stored `out × in`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dense {
    pub weight: Matrix,
    pub bias: Vec<f64>,
}

impl Dense {
    pub fn zeros(inputs: usize, outputs: usize) -> Self {
        Self { weight: Matrix::zeros(outputs, inputs), bias: vec![0.0; outputs] }
    }

    /// Gaussian weights with variance `1/inputs`, zero bias.
    pub fn init<R: Rng>(inputs: usize, outputs: usize, rng: &mut R) -> Self {
        let scale = 1.0 / libm::sqrt(inputs as f64);
        let data = (0..inputs * outputs).map(|_| scale * rng.sample::<f64, _>(StandardNormal)).collect();
        Self { weight: Matrix::from_vec(outputs, inputs, data).expect("shape"), bias: vec![0.0; outputs] }
    }

    pub fn inputs(&self) -> usize {
        self.weight.cols()
    }

    pub fn outputs(&self) -> usize {
        self.weight.rows()
    }

    #[inline]
    pub fn forward(&self, x: &[f64], y: &mut [f64]) {
        for (o, yo) in y.iter_mut().enumerate() {
            *yo = dot(self.weight.row(o), x) + self.bias[o];
        }
    }

    /// Accumulates parameter gradients for `dy` at input `x`; adds `Wᵀ dy` to `dx`.
    #[inline]
    pub fn backward(&self, x: &[f64], dy: &[f64], grad: &mut Dense, dx: Option<&mut [f64]>) {
        for (o, &g) in dy.iter().enumerate() {
            if g == 0.0 {
                continue;
            }
            grad.bias[o] += g;
            grad.weight.axpy_row(o, g, x);
        }
        if let Some(dx) = dx {
            for (o, &g) in dy.iter().enumerate() {
                if g != 0.0 {
                    axpy(dx, g, self.weight.row(o));
                }
            }
        }
    }

    fn tensors<'a>(&'a self, prefix: &str, out: &mut Vec<(String, [usize; 2], &'a [f64])>) {
        out.push((format!("{prefix}.weight"), [self.weight.rows(), self.weight.cols()], self.weight.as_slice()));
        out.push((format!("{prefix}.bias"), [self.bias.len(), 1], &self.bias));
    }

    fn tensors_mut<'a>(&'a mut self, out: &mut Vec<&'a mut [f64]>) {
        out.push(self.weight.as_mut_slice());
        out.push(&mut self.bias);
    }
}

fn tanh_stack_forward(layers: &[Dense], input: &[f64]) -> Vec<Vec<f64>> {
    let mut acts: Vec<Vec<f64>> = Vec::with_capacity(layers.len());
    for (l, layer) in layers.iter().enumerate() {
        let x = if l == 0 { input } else { &acts[l - 1] };
        let mut y = vec![0.0; layer.outputs()];
        layer.forward(x, &mut y);
        y.iter_mut().for_each(|v| *v = libm::tanh(*v));
        acts.push(y);
    }
    acts
}

/// Backpropagates `d_top` (gradient w.r.t. the last activation) through the stack.
fn tanh_stack_backward(layers: &[Dense], input: &[f64], acts: &[Vec<f64>], d_top: &[f64], grads: &mut [Dense]) {
    let mut d = d_top.to_vec();
    for l in (0..layers.len()).rev() {
        let dz: Vec<f64> = d.iter().zip(&acts[l]).map(|(g, h)| g * (1.0 - h * h)).collect();
        let x = if l == 0 { input } else { &acts[l - 1] };
        if l > 0 {
            let mut dx = vec![0.0; x.len()];
            layers[l].backward(x, &dz, &mut grads[l], Some(&mut dx));
            d = dx;
        } else {
            layers[l].backward(x, &dz, &mut grads[l], None);
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToyAcousticEncoder {
    pub layers: Vec<Dense>,
    pub output: Dense,
    pub phone_head: Dense,
}

/// Cached forward pass of one utterance.
#[derive(Debug, Clone, PartialEq)]
pub struct AcousticForward {
    pub embedding: Vec<f64>,
    pub frame_logits: Matrix,
    /// Hidden activations per frame, per layer.
    activations: Vec<Vec<Vec<f64>>>,
    pooled: Vec<f64>,
}

impl ToyAcousticEncoder {
    pub fn new<R: Rng>(frame_dim: usize, hidden: &[usize], embed_dim: usize, phones: usize, rng: &mut R) -> Self {
        let mut layers = Vec::with_capacity(hidden.len());
        let mut width = frame_dim;
        for &h in hidden {
            layers.push(Dense::init(width, h, rng));
            width = h;
        }
        let output = Dense::init(width, embed_dim, rng);
        let phone_head = Dense::init(width, phones, rng);
        Self { layers, output, phone_head }
    }

    pub fn frame_dim(&self) -> usize {
        self.layers[0].inputs()
    }

    pub fn embed_dim(&self) -> usize {
        self.output.outputs()
    }

    pub fn phones(&self) -> usize {
        self.phone_head.outputs()
    }

    pub fn zeros_like(&self) -> Self {
        let z = |d: &Dense| Dense::zeros(d.inputs(), d.outputs());
        Self { layers: self.layers.iter().map(z).collect(), output: z(&self.output), phone_head: z(&self.phone_head) }
    }

    pub fn forward(&self, frames: &Matrix) -> Result<AcousticForward> {
        if frames.cols() != self.frame_dim() {
            bail!(InvalidInput, "frame width {} does not match encoder input {}", frames.cols(), self.frame_dim());
        }
        if frames.rows() == 0 {
            bail!(InvalidInput, "utterance has no frames");
        }
        let t_len = frames.rows();
        let width = self.output.inputs();
        let mut activations = Vec::with_capacity(t_len);
        let mut pooled = vec![0.0; width];
        let mut frame_logits = Matrix::zeros(t_len, self.phones());
        for t in 0..t_len {
            let acts = tanh_stack_forward(&self.layers, frames.row(t));
            let top = acts.last().expect("at least one hidden layer");
            axpy(&mut pooled, 1.0, top);
            self.phone_head.forward(top, frame_logits.row_mut(t));
            activations.push(acts);
        }
        pooled.iter_mut().for_each(|v| *v /= t_len as f64);
        let mut embedding = vec![0.0; self.embed_dim()];
        self.output.forward(&pooled, &mut embedding);
        Ok(AcousticForward { embedding, frame_logits, activations, pooled })
    }

    /// Embedding and per-frame phone logits.
    pub fn encode(&self, frames: &Matrix) -> Result<(Vec<f64>, Matrix)> {
        let f = self.forward(frames)?;
        Ok((f.embedding, f.frame_logits))
    }

    /// Accumulates into `grad` the parameter gradient of a scalar whose
    /// gradients w.r.t. the embedding and frame logits are given.
    pub fn backward(
        &self,
        frames: &Matrix,
        fwd: &AcousticForward,
        d_embedding: &[f64],
        d_logits: Option<&Matrix>,
        grad: &mut Self,
    ) {
        let width = self.output.inputs();
        let mut d_pooled = vec![0.0; width];
        self.output.backward(&fwd.pooled, d_embedding, &mut grad.output, Some(&mut d_pooled));
        let t_len = frames.rows();
        let inv_t = 1.0 / t_len as f64;
        for t in 0..t_len {
            let acts = &fwd.activations[t];
            let top = acts.last().expect("hidden layer");
            let mut d_top: Vec<f64> = d_pooled.iter().map(|g| g * inv_t).collect();
            if let Some(dl) = d_logits {
                self.phone_head.backward(top, dl.row(t), &mut grad.phone_head, Some(&mut d_top));
            }
            tanh_stack_backward(&self.layers, frames.row(t), acts, &d_top, &mut grad.layers);
        }
    }

    /// Named parameter tensors with `[rows, cols]` shapes, in a fixed order.
    pub fn tensors(&self) -> Vec<(String, [usize; 2], &[f64])> {
        let mut out = Vec::new();
        for (l, layer) in self.layers.iter().enumerate() {
            layer.tensors(&format!("acoustic.hidden{l}"), &mut out);
        }
        self.output.tensors("acoustic.output", &mut out);
        self.phone_head.tensors("acoustic.phone_head", &mut out);
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out = Vec::new();
        for layer in &mut self.layers {
            layer.tensors_mut(&mut out);
        }
        self.output.tensors_mut(&mut out);
        self.phone_head.tensors_mut(&mut out);
        out
    }
}

/// Text encoder over a fixed lexicon of per-class input vectors.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToyTextEncoder {
    pub layers: Vec<Dense>,
    pub output: Dense,
    #[serde(skip)]
    lexicon: Vec<Vec<f64>>,
}

impl ToyTextEncoder {
    pub fn new<R: Rng>(lexicon: Vec<Vec<f64>>, hidden: &[usize], embed_dim: usize, rng: &mut R) -> Result<Self> {
        let input = lexicon.first().map_or(0, Vec::len);
        if input == 0 || lexicon.iter().any(|v| v.len() != input) {
            bail!(InvalidInput, "lexicon entries must share a positive width");
        }
        let mut layers = Vec::with_capacity(hidden.len());
        let mut width = input;
        for &h in hidden {
            layers.push(Dense::init(width, h, rng));
            width = h;
        }
        let output = Dense::init(width, embed_dim, rng);
        Ok(Self { layers, output, lexicon })
    }

    /// Encoder from explicit layers, e.g. an identity projection for tests.
    pub fn from_parts(lexicon: Vec<Vec<f64>>, layers: Vec<Dense>, output: Dense) -> Self {
        Self { layers, output, lexicon }
    }

    pub fn lexicon(&self) -> &[Vec<f64>] {
        &self.lexicon
    }

    pub fn set_lexicon(&mut self, lexicon: Vec<Vec<f64>>) {
        self.lexicon = lexicon;
    }

    pub fn embed_dim(&self) -> usize {
        self.output.outputs()
    }

    pub fn zeros_like(&self) -> Self {
        let z = |d: &Dense| Dense::zeros(d.inputs(), d.outputs());
        Self { layers: self.layers.iter().map(z).collect(), output: z(&self.output), lexicon: Vec::new() }
    }

    fn input(&self, class_id: usize) -> Result<&[f64]> {
        match self.lexicon.get(class_id) {
            Some(v) => Ok(v),
            None => bail!(InvalidInput, "unknown class id {} (lexicon has {})", class_id, self.lexicon.len()),
        }
    }

    pub fn encode_text(&self, class_id: usize) -> Result<Vec<f64>> {
        let x = self.input(class_id)?;
        let acts = tanh_stack_forward(&self.layers, x);
        let top = acts.last().map_or(x, Vec::as_slice);
        let mut e = vec![0.0; self.embed_dim()];
        self.output.forward(top, &mut e);
        Ok(e)
    }

    pub fn backward(&self, class_id: usize, d_embedding: &[f64], grad: &mut Self) -> Result<()> {
        let x = self.input(class_id)?;
        let acts = tanh_stack_forward(&self.layers, x);
        let top = acts.last().map_or(x, Vec::as_slice);
        if self.layers.is_empty() {
            self.output.backward(top, d_embedding, &mut grad.output, None);
            return Ok(());
        }
        let mut d_top = vec![0.0; top.len()];
        self.output.backward(top, d_embedding, &mut grad.output, Some(&mut d_top));
        tanh_stack_backward(&self.layers, x, &acts, &d_top, &mut grad.layers);
        Ok(())
    }

    pub fn tensors(&self) -> Vec<(String, [usize; 2], &[f64])> {
        let mut out = Vec::new();
        for (l, layer) in self.layers.iter().enumerate() {
            layer.tensors(&format!("text.hidden{l}"), &mut out);
        }
        self.output.tensors("text.output", &mut out);
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out = Vec::new();
        for layer in &mut self.layers {
            layer.tensors_mut(&mut out);
        }
        self.output.tensors_mut(&mut out);
        out
    }
}
