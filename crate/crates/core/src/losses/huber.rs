use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HuberParams {
    pub delta: f64,
}

impl Default for HuberParams {
    fn default() -> Self {
        Self { delta: 1.0 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HuberValue {
    pub value: f64,
    pub grad_p: f64,
    pub grad_q: f64,
    /// `true` on the linear branch.
    pub linear: bool,
}

/// Huber penalty on `p − q` with δ = 1.
#[inline]
pub fn huber(p: f64, q: f64) -> HuberValue {
    huber_with(p, q, 1.0)
}

#[inline]
pub fn huber_with(p: f64, q: f64, delta: f64) -> HuberValue {
    let r = p - q;
    if r.abs() <= delta {
        HuberValue { value: 0.5 * r * r, grad_p: r, grad_q: -r, linear: false }
    } else {
        let s = if r > 0.0 { delta } else { -delta };
        HuberValue { value: delta * (r.abs() - 0.5 * delta), grad_p: s, grad_q: -s, linear: true }
    }
}
