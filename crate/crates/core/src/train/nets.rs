//! Network builders: a tiny residual network and a two-layer CNN.
//!
//! Both graphs end in a cross-entropy node labelled `loss` fed by a node
//! labelled `logits`, so [`Graph::forward`] returns the mean loss once labels
//! are bound.

use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, NodeId};
use crate::error::{Error, Result};
use crate::layers::{ActivationRule, BatchNormSpec, Conv2dSpec, Padding};
use crate::rng::Rng;
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TinyResNetSpec {
    /// `(C, H, W)` of one input image.
    pub input_shape: [usize; 3],
    pub widths: Vec<usize>,
    pub blocks: Vec<usize>,
    pub rule: ActivationRule,
    pub batchnorm: bool,
    pub classes: usize,
    /// Biases on the classifier, and on convolutions when batch norm is off.
    pub bias: bool,
}

impl Default for TinyResNetSpec {
    fn default() -> Self {
        Self {
            input_shape: [1, 12, 12],
            widths: vec![4, 8],
            blocks: vec![1, 1],
            rule: ActivationRule::relu(),
            batchnorm: true,
            classes: 5,
            bias: true,
        }
    }
}

impl TinyResNetSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidArgument(m));
        if self.widths.is_empty() || self.widths.len() != self.blocks.len() {
            return bad(format!(
                "need one block count per stage, got widths {:?} and blocks {:?}",
                self.widths, self.blocks
            ));
        }
        if self.widths.contains(&0) || self.blocks.contains(&0) {
            return bad("stage widths and block counts must be positive".into());
        }
        if self.classes < 2 {
            return bad(format!("need at least 2 classes, got {}", self.classes));
        }
        if self.input_shape.contains(&0) {
            return bad(format!("empty input shape {:?}", self.input_shape));
        }
        Ok(())
    }
}

/// Fan-in scaled Gaussian, `std = gain / sqrt(fan_in)`.
fn kaiming(shape: &[usize], fan_in: usize, gain: f64, rng: &mut Rng) -> Result<Tensor> {
    Tensor::gaussian(shape, 0.0, gain / (fan_in as f64).sqrt(), rng)
}

struct Builder<'a> {
    g: Graph,
    rng: &'a mut Rng,
    rule: ActivationRule,
    batchnorm: bool,
    bias: bool,
}

impl Builder<'_> {
    fn conv(&mut self, x: NodeId, name: &str, c_in: usize, c_out: usize, k: usize, stride: usize) -> Result<NodeId> {
        let kernel = kaiming(&[c_out, c_in, k, k], c_in * k * k, 2f64.sqrt(), self.rng)?;
        let kernel = self.g.param(&format!("{name}.weight"), kernel);
        let bias = if self.bias && !self.batchnorm {
            Some(self.g.param(&format!("{name}.bias"), Tensor::zeros(&[c_out])?))
        } else {
            None
        };
        let spec = Conv2dSpec {
            stride,
            padding: if k == 1 { Padding::Valid } else { Padding::Same },
        };
        let y = self.g.conv2d(x, kernel, bias, spec);
        self.g.set_label(y, name);
        Ok(y)
    }

    fn norm(&mut self, x: NodeId, name: &str, c: usize) -> Result<NodeId> {
        if !self.batchnorm {
            return Ok(x);
        }
        let gamma = self.g.param(&format!("{name}.gamma"), Tensor::ones(&[c])?);
        let beta = self.g.param(&format!("{name}.beta"), Tensor::zeros(&[c])?);
        let y = self.g.batchnorm(x, gamma, beta, BatchNormSpec::new(c));
        self.g.set_label(y, name);
        Ok(y)
    }

    fn act(&mut self, x: NodeId, name: &str) -> NodeId {
        let y = self.g.activation(x, self.rule);
        self.g.set_label(y, name);
        y
    }

    fn head(mut self, x: NodeId, features: usize, classes: usize) -> Result<Graph> {
        let w = kaiming(&[classes, features], features, 1.0, self.rng)?;
        let w = self.g.param("fc.weight", w);
        let b = if self.bias {
            Some(self.g.param("fc.bias", Tensor::zeros(&[classes])?))
        } else {
            None
        };
        let logits = self.g.dense(x, w, b);
        self.g.set_label(logits, "logits");
        let loss = self.g.cross_entropy(logits);
        self.g.set_label(loss, "loss");
        Ok(self.g)
    }
}

/// Stem conv, then stages of residual blocks, global average pooling and a
/// linear classifier. Block `j` of stage `i` is labelled `stage{i}.block{j}`
/// with sub-labels `conv1`, `bn1`, `act1`, `conv2`, `bn2`, `skip`,
/// `skip_bn`, `add` and `act`. The first block of every stage after the
/// first halves the resolution and uses a strided 1×1 convolution on the skip.
pub fn build_tiny_resnet(spec: &TinyResNetSpec, rng: &mut Rng) -> Result<Graph> {
    spec.validate()?;
    let mut b = Builder {
        g: Graph::new(),
        rng,
        rule: spec.rule,
        batchnorm: spec.batchnorm,
        bias: spec.bias,
    };
    let x = b.g.input("x");
    let mut c = spec.widths[0];
    let h = b.conv(x, "stem.conv", spec.input_shape[0], c, 3, 1)?;
    let h = b.norm(h, "stem.bn", c)?;
    let mut h = b.act(h, "stem.act");
    for (i, (&width, &blocks)) in spec.widths.iter().zip(&spec.blocks).enumerate() {
        for j in 0..blocks {
            let p = format!("stage{i}.block{j}");
            let stride = if i > 0 && j == 0 { 2 } else { 1 };
            let y = b.conv(h, &format!("{p}.conv1"), c, width, 3, stride)?;
            let y = b.norm(y, &format!("{p}.bn1"), width)?;
            let y = b.act(y, &format!("{p}.act1"));
            let y = b.conv(y, &format!("{p}.conv2"), width, width, 3, 1)?;
            let y = b.norm(y, &format!("{p}.bn2"), width)?;
            let skip = if stride != 1 || c != width {
                let s = b.conv(h, &format!("{p}.skip"), c, width, 1, stride)?;
                b.norm(s, &format!("{p}.skip_bn"), width)?
            } else {
                h
            };
            let sum = b.g.add(y, skip);
            b.g.set_label(sum, &format!("{p}.add"));
            h = b.act(sum, &format!("{p}.act"));
            c = width;
        }
    }
    let pooled = b.g.global_avg_pool(h);
    b.g.set_label(pooled, "pool");
    b.head(pooled, c, spec.classes)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SmallCnnSpec {
    pub input_shape: [usize; 3],
    pub width: usize,
    pub rule: ActivationRule,
    pub classes: usize,
}

/// `conv → act → maxpool → conv → act → maxpool → dense`, with biases and no batch norm.
pub fn build_small_cnn(spec: &SmallCnnSpec, rng: &mut Rng) -> Result<Graph> {
    let [c, h, w] = spec.input_shape;
    if h < 4 || w < 4 || spec.width == 0 || spec.classes < 2 {
        return Err(Error::InvalidArgument(format!("invalid small CNN spec {spec:?}")));
    }
    let mut b = Builder {
        g: Graph::new(),
        rng,
        rule: spec.rule,
        batchnorm: false,
        bias: true,
    };
    let x = b.g.input("x");
    let y = b.conv(x, "conv1", c, spec.width, 3, 1)?;
    let y = b.act(y, "act1");
    let y = b.g.maxpool2d(y, 2, 2);
    let y = b.conv(y, "conv2", spec.width, 2 * spec.width, 3, 1)?;
    let y = b.act(y, "act2");
    let y = b.g.maxpool2d(y, 2, 2);
    let y = b.g.flatten(y);
    let features = 2 * spec.width * (h / 2 / 2) * (w / 2 / 2);
    b.head(y, features, spec.classes)
}
