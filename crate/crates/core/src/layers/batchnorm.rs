//! Per-channel batch normalization over `(N, C, H, W)` or `(N, C)` inputs.
//!
//! In training mode the layer normalizes with the statistics of the current
//! batch and the backward pass differentiates through those statistics. The
//! `1 / sqrt(var + eps)` factor is what shrinks upstream gradients when the
//! incoming activations have a large spread.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const DEFAULT_EPS: f64 = 1e-5;
pub const DEFAULT_MOMENTUM: f64 = 0.1;

/// Non-learned configuration and running statistics of one BN layer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BatchNormSpec {
    pub eps: f64,
    pub momentum: f64,
    pub running_mean: Vec<f64>,
    pub running_var: Vec<f64>,
}

impl BatchNormSpec {
    pub fn new(channels: usize) -> Self {
        Self {
            eps: DEFAULT_EPS,
            momentum: DEFAULT_MOMENTUM,
            running_mean: vec![0.0; channels],
            running_var: vec![1.0; channels],
        }
    }

    pub fn channels(&self) -> usize {
        self.running_mean.len()
    }

    /// Exponential moving average update with unbiased batch variance.
    pub fn update_running(&mut self, cache: &BatchNormCache) {
        let m = self.momentum;
        let count = cache.count as f64;
        let unbias = if cache.count > 1 {
            count / (count - 1.0)
        } else {
            1.0
        };
        for c in 0..self.channels() {
            self.running_mean[c] = (1.0 - m) * self.running_mean[c] + m * cache.mean[c];
            self.running_var[c] = (1.0 - m) * self.running_var[c] + m * cache.var[c] * unbias;
        }
    }
}

/// Values saved by the forward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchNormCache {
    pub training: bool,
    /// Elements per channel (`N * H * W`).
    pub count: usize,
    pub mean: Vec<f64>,
    /// Biased batch variance (training) or running variance (inference).
    pub var: Vec<f64>,
    pub inv_std: Vec<f64>,
    pub x_hat: Tensor,
}

fn layout(x: &Tensor) -> Result<(usize, usize, usize)> {
    match *x.shape() {
        [n, c] => Ok((n, c, 1)),
        [n, c, h, w] => Ok((n, c, h * w)),
        _ => Err(Error::InvalidArgument(format!(
            "batchnorm input must be (N,C) or (N,C,H,W), got {:?}",
            x.shape()
        ))),
    }
}

pub fn batchnorm_forward(
    x: &Tensor,
    gamma: &Tensor,
    beta: &Tensor,
    spec: &BatchNormSpec,
    training: bool,
) -> Result<(Tensor, BatchNormCache)> {
    let (n, c, sp) = layout(x)?;
    gamma.expect_shape(&[c])?;
    beta.expect_shape(&[c])?;
    if spec.channels() != c {
        return Err(Error::ShapeMismatch {
            expected: vec![spec.channels()],
            actual: vec![c],
        });
    }
    if training && n < 2 {
        return Err(Error::InvalidArgument(
            "batch normalization in training mode needs a batch of at least 2".into(),
        ));
    }
    let xd = x.data();
    let count = n * sp;
    let (mean, var) = if training {
        let mut mean = vec![0.0; c];
        let mut var = vec![0.0; c];
        for ch in 0..c {
            let mut s = 0.0;
            for b in 0..n {
                s += xd[(b * c + ch) * sp..][..sp].iter().sum::<f64>();
            }
            let mu = s / count as f64;
            let mut q = 0.0;
            for b in 0..n {
                q += xd[(b * c + ch) * sp..][..sp]
                    .iter()
                    .map(|v| (v - mu) * (v - mu))
                    .sum::<f64>();
            }
            mean[ch] = mu;
            var[ch] = q / count as f64;
        }
        (mean, var)
    } else {
        (spec.running_mean.clone(), spec.running_var.clone())
    };
    let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + spec.eps).sqrt()).collect();
    let mut x_hat = vec![0.0; xd.len()];
    let mut y = vec![0.0; xd.len()];
    for b in 0..n {
        for ch in 0..c {
            let off = (b * c + ch) * sp;
            let (g, bt) = (gamma.data()[ch], beta.data()[ch]);
            for i in off..off + sp {
                let h = (xd[i] - mean[ch]) * inv_std[ch];
                x_hat[i] = h;
                y[i] = g * h + bt;
            }
        }
    }
    let cache = BatchNormCache {
        training,
        count,
        mean,
        var,
        inv_std,
        x_hat: Tensor::from_vec(x.shape(), x_hat)?,
    };
    Ok((Tensor::from_vec(x.shape(), y)?, cache))
}

pub struct BatchNormGrads {
    pub input: Tensor,
    pub gamma: Tensor,
    pub beta: Tensor,
}

/// Full batch-statistics derivative in training mode; the affine map otherwise.
pub fn batchnorm_backward(
    cache: &BatchNormCache,
    gamma: &Tensor,
    upstream: &Tensor,
) -> Result<BatchNormGrads> {
    upstream.expect_shape(cache.x_hat.shape())?;
    let (n, c, sp) = layout(upstream)?;
    let ud = upstream.data();
    let xh = cache.x_hat.data();
    let mut dgamma = vec![0.0; c];
    let mut dbeta = vec![0.0; c];
    for b in 0..n {
        for ch in 0..c {
            let off = (b * c + ch) * sp;
            for i in off..off + sp {
                dgamma[ch] += ud[i] * xh[i];
                dbeta[ch] += ud[i];
            }
        }
    }
    let m = cache.count as f64;
    let mut dx = vec![0.0; ud.len()];
    for b in 0..n {
        for ch in 0..c {
            let off = (b * c + ch) * sp;
            let g = gamma.data()[ch];
            let k = g * cache.inv_std[ch];
            if cache.training {
                // dx = g/σ · (dy − mean(dy) − x̂ · mean(dy · x̂))
                let mean_dy = dbeta[ch] / m;
                let mean_dyx = dgamma[ch] / m;
                for i in off..off + sp {
                    dx[i] = k * (ud[i] - mean_dy - xh[i] * mean_dyx);
                }
            } else {
                for i in off..off + sp {
                    dx[i] = k * ud[i];
                }
            }
        }
    }
    Ok(BatchNormGrads {
        input: Tensor::from_vec(upstream.shape(), dx)?,
        gamma: Tensor::from_vec(&[c], dgamma)?,
        beta: Tensor::from_vec(&[c], dbeta)?,
    })
}
