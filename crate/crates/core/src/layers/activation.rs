//! Rectifiers with separate forward and backward negative slopes.
//!
//! One node type covers three activations:
//!
//! | rule                | forward            | backward factor on `x < 0` |
//! |---------------------|--------------------|----------------------------|
//! | `(0, 0)`            | ReLU               | 0                          |
//! | `(s, s)`            | Leaky ReLU, slope s | s                         |
//! | `(0, s)`, `s > 0`   | ReLU               | s (proxy gradient)         |
//!
//! The backward factor is chosen from the sign of the *cached forward input*,
//! so a proxy rule differentiates a Leaky ReLU network evaluated at the
//! activations of the original network. An input of exactly zero takes
//! factor 1: the mask is `x < 0`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ActivationRule {
    pub forward_slope: f64,
    pub backward_slope: f64,
}

impl ActivationRule {
    pub fn new(forward_slope: f64, backward_slope: f64) -> Result<Self> {
        for (name, s) in [("forward", forward_slope), ("backward", backward_slope)] {
            if !(0.0..=1.0).contains(&s) {
                return Err(Error::InvalidArgument(format!(
                    "{name} slope must lie in [0, 1], got {s}"
                )));
            }
        }
        Ok(Self {
            forward_slope,
            backward_slope,
        })
    }

    pub const fn relu() -> Self {
        Self {
            forward_slope: 0.0,
            backward_slope: 0.0,
        }
    }

    /// Leaky ReLU: same slope both ways.
    pub fn leaky(slope: f64) -> Result<Self> {
        Self::new(slope, slope)
    }

    /// ReLU forward, leaky backward.
    pub fn proxy(backward_slope: f64) -> Result<Self> {
        Self::new(0.0, backward_slope)
    }

    /// True when backward is the exact derivative of forward.
    pub fn is_exact(&self) -> bool {
        self.forward_slope == self.backward_slope
    }
}

#[inline]
pub fn rectify(x: f64, slope: f64) -> f64 {
    if x >= 0.0 {
        x
    } else if slope == 0.0 {
        0.0
    } else {
        slope * x
    }
}

/// Elementwise `max(x, forward_slope * x)`.
pub fn activation_forward(x: &Tensor, rule: ActivationRule) -> Tensor {
    x.map(|v| rectify(v, rule.forward_slope))
}

/// `upstream * 1` where the cached input is `>= 0`, `upstream * backward_slope` where it is `< 0`.
pub fn activation_backward(
    cached_input: &Tensor,
    upstream: &Tensor,
    rule: ActivationRule,
) -> Result<Tensor> {
    upstream.expect_shape(cached_input.shape())?;
    let data = cached_input
        .data()
        .iter()
        .zip(upstream.data())
        .map(|(&x, &g)| if x < 0.0 { g * rule.backward_slope } else { g })
        .collect();
    Tensor::from_vec(upstream.shape(), data)
}
