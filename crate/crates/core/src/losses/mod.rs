//! Every loss as a pure function returning its value and analytic gradients.
//!
//! Each loss has a gradient path (`*_loss`) and a value-only path (`*_value`)
//! sharing one implementation. The value path records which branch every
//! piecewise term took (Huber quadratic/linear, hinge active/inactive) so the
//! gradient checker can exclude coordinates whose perturbation crosses a kink.

use alloc::collections::BTreeMap;
use alloc::string::String;
use alloc::vec::Vec;

use crate::linalg::Matrix;

mod auxiliary;
mod combined;
mod huber;
mod proxy;
mod relational;

pub use auxiliary::{
    mine_hardest, monophone_ce_loss, monophone_ce_value, pc_loss, pc_value, triplet_loss, triplet_loss_with_mining,
    triplet_value, FrameLossOutput, TripletMining, DEFAULT_TRIPLET_MARGIN,
};
pub use combined::{
    combined_loss, combined_loss_with_mining, combined_value, CombinedLossConfig, CombinedOutput, FrameBatch,
    LossWeights, P2pVariant, TermValues,
};
pub use huber::{huber, huber_with, HuberParams, HuberValue};
pub use proxy::{
    adams_loss, adams_value, asyp_loss, asyp_value, AdaMSTable, AsyPParams, GRAD_LAMBDA, GRAD_LOG_ALPHA, GRAD_LOG_BETA,
};
pub use relational::{
    phi_a, phi_d, relational_normalizers, rpl_a_loss, rpl_a_value, rpl_d_loss, rpl_d_value, rpl_p_loss, rpl_p_value,
    PhiA, PhiD, PrototypeNormalizer, RelationalOptions,
};

/// Scalar loss with gradients for every differentiable input.
#[derive(Debug, Clone, PartialEq)]
pub struct LossOutput {
    pub value: f64,
    pub grad_acoustic: Matrix,
    pub grad_text: Matrix,
    /// Learnable loss parameters, keyed by name (AdaMS rows).
    pub grad_params: BTreeMap<String, Vec<f64>>,
}

impl LossOutput {
    pub fn zeros(n: usize, d: usize) -> Self {
        Self {
            value: 0.0,
            grad_acoustic: Matrix::zeros(n, d),
            grad_text: Matrix::zeros(n, d),
            grad_params: BTreeMap::new(),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.value.is_finite()
            && self.grad_acoustic.is_finite()
            && self.grad_text.is_finite()
            && self.grad_params.values().all(|v| v.iter().all(|x| x.is_finite()))
    }

    /// `self += weight * other`, including parameter gradients.
    pub fn accumulate(&mut self, weight: f64, other: &LossOutput) {
        self.value += weight * other.value;
        self.grad_acoustic.add_scaled(weight, &other.grad_acoustic);
        self.grad_text.add_scaled(weight, &other.grad_text);
        for (name, g) in &other.grad_params {
            let slot = self.grad_params.entry(name.clone()).or_insert_with(|| alloc::vec![0.0; g.len()]);
            crate::linalg::axpy(slot, weight, g);
        }
    }
}

/// Value of a loss plus the branch taken by each piecewise term.
#[derive(Debug, Clone, PartialEq)]
pub struct Evaluation {
    pub value: f64,
    pub branches: Vec<u8>,
}

/// Either accumulates gradients or records branches; never both.
pub(crate) enum Tape<'a> {
    Value(&'a mut Vec<u8>),
    Grad(&'a mut LossOutput),
}

impl Tape<'_> {
    #[inline]
    pub(crate) fn branch(&mut self, b: u8) {
        if let Tape::Value(v) = self {
            v.push(b);
        }
    }

    #[inline]
    pub(crate) fn grad(&mut self) -> Option<&mut LossOutput> {
        match self {
            Tape::Grad(g) => Some(g),
            Tape::Value(_) => None,
        }
    }
}

/// Adds `coef * ∂‖x_i − x_j‖/∂x_i` to `gi` and its negation to `gj`.
#[inline]
pub(crate) fn distance_backward(xi: &[f64], xj: &[f64], coef: f64, gi: &mut [f64], gj: &mut [f64]) {
    let d = crate::linalg::distance(xi, xj);
    if d < crate::EPS {
        return;
    }
    let c = coef / d;
    for k in 0..xi.len() {
        let u = c * (xi[k] - xj[k]);
        gi[k] += u;
        gj[k] -= u;
    }
}

/// Same as [`distance_backward`] for two rows of one matrix.
#[inline]
pub(crate) fn distance_backward_rows(x: &Matrix, g: &mut Matrix, i: usize, j: usize, coef: f64) {
    let d = crate::linalg::distance(x.row(i), x.row(j));
    if d < crate::EPS {
        return;
    }
    let c = coef / d;
    for k in 0..x.cols() {
        let u = c * (x.get(i, k) - x.get(j, k));
        g.row_mut(i)[k] += u;
        g.row_mut(j)[k] -= u;
    }
}
