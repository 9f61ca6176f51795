//! JSON network descriptions.
//!
//! A spec is a JSON list of layer records applied in sequence:
//!
//! ```json
//! [
//!   {"type": "input", "params": {"shape": [1, 1, 8, 8]}},
//!   {"type": "conv2d", "params": {"out_channels": 4, "kernel_size": 3, "padding": "same"}, "label": "c1"},
//!   {"type": "activation"},
//!   {"type": "global_avg_pool"},
//!   {"type": "dense", "params": {"out_features": 3}},
//!   {"type": "select", "params": {"offset": 1}, "label": "unit"}
//! ]
//! ```
//!
//! The first record must be `input`; its shape includes the batch axis. Every
//! `activation` receives the rule passed to [`build_network`]. Weights not
//! given explicitly are drawn from a fan-in scaled Gaussian.

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, NodeId};
use crate::error::{Error, Result};
use crate::layers::{ActivationRule, BatchNormSpec, Conv2dSpec, Padding};
use crate::rng::Rng;
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerRecord {
    #[serde(rename = "type")]
    pub kind: String,
    #[serde(default)]
    pub params: serde_json::Value,
    #[serde(default)]
    pub label: Option<String>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct InputParams {
    shape: Vec<usize>,
    #[serde(default = "default_input_name")]
    name: String,
}

fn default_input_name() -> String {
    "x".into()
}

fn one() -> usize {
    1
}

fn yes() -> bool {
    true
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct ConvParams {
    out_channels: usize,
    kernel_size: usize,
    #[serde(default = "one")]
    stride: usize,
    #[serde(default)]
    padding: Padding,
    #[serde(default = "yes")]
    bias: bool,
    weights: Option<Vec<f64>>,
    bias_values: Option<Vec<f64>>,
    #[serde(default)]
    frozen: bool,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct DenseParams {
    out_features: usize,
    #[serde(default = "yes")]
    bias: bool,
    weights: Option<Vec<f64>>,
    bias_values: Option<Vec<f64>>,
    #[serde(default)]
    frozen: bool,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct PoolParams {
    #[serde(default = "two")]
    size: usize,
    #[serde(default = "two")]
    stride: usize,
}

fn two() -> usize {
    2
}

impl Default for PoolParams {
    fn default() -> Self {
        Self { size: 2, stride: 2 }
    }
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct ResidualParams {
    channels: usize,
    #[serde(default = "one")]
    stride: usize,
    #[serde(default = "yes")]
    batchnorm: bool,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct SelectParams {
    offset: Option<usize>,
    index: Option<Vec<usize>>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct ScaleParams {
    factor: f64,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct ReshapeParams {
    shape: Vec<usize>,
}

#[derive(Deserialize, Default)]
#[serde(deny_unknown_fields)]
struct Empty {}

/// A built network together with its input placeholder.
#[derive(Debug, Clone)]
pub struct Network {
    pub graph: Graph,
    pub input: String,
    pub input_shape: Vec<usize>,
    pub output_shape: Vec<usize>,
}

pub fn parse_spec(json: &str) -> Result<Vec<LayerRecord>> {
    serde_json::from_str(json).map_err(|e| Error::NetSpec(format!("line {}, column {}: {e}", e.line(), e.column())))
}

struct Ctx<'a> {
    g: Graph,
    rng: &'a mut Rng,
    rule: ActivationRule,
    cur: NodeId,
    shape: Vec<usize>,
    at: String,
}

impl Ctx<'_> {
    fn err(&self, msg: impl std::fmt::Display) -> Error {
        Error::NetSpec(format!("{}: {msg}", self.at))
    }

    fn params<T: DeserializeOwned + Default>(&self, v: &serde_json::Value) -> Result<T> {
        if v.is_null() {
            return Ok(T::default());
        }
        serde_json::from_value(v.clone()).map_err(|e| self.err(e))
    }

    fn required<T: DeserializeOwned>(&self, v: &serde_json::Value) -> Result<T> {
        serde_json::from_value(v.clone()).map_err(|e| self.err(e))
    }

    fn image_dims(&self) -> Result<(usize, usize, usize, usize)> {
        match *self.shape {
            [n, c, h, w] => Ok((n, c, h, w)),
            _ => Err(self.err(format!("expects (N, C, H, W) input, got {:?}", self.shape))),
        }
    }

    fn weights(&mut self, name: &str, shape: &[usize], fan_in: usize, given: Option<Vec<f64>>, frozen: bool) -> Result<crate::autograd::ParamId> {
        let t = match given {
            Some(v) => {
                let expected: usize = shape.iter().product();
                if v.len() != expected {
                    return Err(self.err(format!("{name} needs {expected} values, got {}", v.len())));
                }
                Tensor::from_vec(shape, v)?
            }
            None => Tensor::gaussian(shape, 0.0, (2.0 / fan_in as f64).sqrt(), self.rng)?,
        };
        Ok(if frozen { self.g.frozen_param(name, t) } else { self.g.param(name, t) })
    }

    fn bias(&mut self, name: &str, n: usize, on: bool, given: Option<Vec<f64>>, frozen: bool) -> Result<Option<crate::autograd::ParamId>> {
        if !on {
            if given.is_some() {
                return Err(self.err("bias_values given but bias is false"));
            }
            return Ok(None);
        }
        let v = given.unwrap_or_else(|| vec![0.0; n]);
        if v.len() != n {
            return Err(self.err(format!("{name} needs {n} values, got {}", v.len())));
        }
        let t = Tensor::from_vec(&[n], v)?;
        Ok(Some(if frozen { self.g.frozen_param(name, t) } else { self.g.param(name, t) }))
    }

    fn conv_shape(&self, spec: Conv2dSpec, k: usize, o: usize) -> Result<Vec<usize>> {
        let (n, _, h, w) = self.image_dims()?;
        let (ph, pw) = spec.padding.resolve(k, k).map_err(|e| self.err(e))?;
        if h + 2 * ph < k || w + 2 * pw < k || spec.stride == 0 {
            return Err(self.err(format!("kernel {k} with stride {} does not fit {:?}", spec.stride, self.shape)));
        }
        Ok(vec![n, o, (h + 2 * ph - k) / spec.stride + 1, (w + 2 * pw - k) / spec.stride + 1])
    }

    fn batchnorm(&mut self, x: NodeId, name: &str, c: usize) -> Result<NodeId> {
        let gamma = self.g.param(&format!("{name}.gamma"), Tensor::ones(&[c])?);
        let beta = self.g.param(&format!("{name}.beta"), Tensor::zeros(&[c])?);
        Ok(self.g.batchnorm(x, gamma, beta, BatchNormSpec::new(c)))
    }

    fn residual(&mut self, name: &str, p: ResidualParams) -> Result<NodeId> {
        let (n, c, h, w) = self.image_dims()?;
        let o = p.channels;
        let conv = |ctx: &mut Self, x: NodeId, sub: &str, ci: usize, k: usize, stride: usize| -> Result<NodeId> {
            let kernel = ctx.weights(&format!("{name}.{sub}.weight"), &[o, ci, k, k], ci * k * k, None, false)?;
            let bias = ctx.bias(&format!("{name}.{sub}.bias"), o, !p.batchnorm, None, false)?;
            let padding = if k == 1 { Padding::Valid } else { Padding::Same };
            let y = ctx.g.conv2d(x, kernel, bias, Conv2dSpec { stride, padding });
            ctx.g.set_label(y, &format!("{name}.{sub}"));
            Ok(y)
        };
        let norm = |ctx: &mut Self, x: NodeId, sub: &str| -> Result<NodeId> {
            if !p.batchnorm {
                return Ok(x);
            }
            let y = ctx.batchnorm(x, &format!("{name}.{sub}"), o)?;
            ctx.g.set_label(y, &format!("{name}.{sub}"));
            Ok(y)
        };
        let x = self.cur;
        let y = conv(self, x, "conv1", c, 3, p.stride)?;
        let y = norm(self, y, "bn1")?;
        let y = self.g.activation(y, self.rule);
        self.g.set_label(y, &format!("{name}.act1"));
        let y = conv(self, y, "conv2", o, 3, 1)?;
        let y = norm(self, y, "bn2")?;
        let skip = if p.stride != 1 || c != o {
            let s = conv(self, x, "skip", c, 1, p.stride)?;
            norm(self, s, "skip_bn")?
        } else {
            x
        };
        let sum = self.g.add(y, skip);
        self.g.set_label(sum, &format!("{name}.add"));
        let out = self.g.activation(sum, self.rule);
        let oh = (h + 2 - 3) / p.stride + 1;
        let ow = (w + 2 - 3) / p.stride + 1;
        self.shape = vec![n, o, oh, ow];
        Ok(out)
    }
}

/// Builds a graph from parsed records. The last record's node is the output.
pub fn build_network(records: &[LayerRecord], rule: ActivationRule, rng: &mut Rng) -> Result<Network> {
    let first = records
        .first()
        .ok_or_else(|| Error::NetSpec("empty layer list".into()))?;
    if first.kind != "input" {
        return Err(Error::NetSpec(format!(
            "layer 0 must be `input`, got `{}`",
            first.kind
        )));
    }
    let ip: InputParams = serde_json::from_value(first.params.clone())
        .map_err(|e| Error::NetSpec(format!("layer 0 (input): {e}")))?;
    if ip.shape.is_empty() || ip.shape.contains(&0) {
        return Err(Error::NetSpec(format!("layer 0 (input): invalid shape {:?}", ip.shape)));
    }
    let mut g = Graph::new();
    let cur = g.input(&ip.name);
    if let Some(l) = &first.label {
        g.set_label(cur, l);
    }
    let mut ctx = Ctx {
        g,
        rng,
        rule,
        cur,
        shape: ip.shape.clone(),
        at: String::new(),
    };
    for (i, rec) in records.iter().enumerate().skip(1) {
        ctx.at = format!("layer {i} ({})", rec.kind);
        let name = rec.label.clone().unwrap_or_else(|| format!("layer{i}"));
        let x = ctx.cur;
        let node = match rec.kind.as_str() {
            "conv2d" => {
                let p: ConvParams = ctx.required(&rec.params)?;
                let (_, c, _, _) = ctx.image_dims()?;
                let spec = Conv2dSpec {
                    stride: p.stride,
                    padding: p.padding,
                };
                let out = ctx.conv_shape(spec, p.kernel_size, p.out_channels)?;
                let k = p.kernel_size;
                let kernel = ctx.weights(&format!("{name}.weight"), &[p.out_channels, c, k, k], c * k * k, p.weights, p.frozen)?;
                let bias = ctx.bias(&format!("{name}.bias"), p.out_channels, p.bias, p.bias_values, p.frozen)?;
                ctx.shape = out;
                ctx.g.conv2d(x, kernel, bias, spec)
            }
            "batchnorm" => {
                let _: Empty = ctx.params(&rec.params)?;
                if ctx.shape.len() != 2 && ctx.shape.len() != 4 {
                    return Err(ctx.err(format!("expects (N, C) or (N, C, H, W), got {:?}", ctx.shape)));
                }
                let c = ctx.shape[1];
                ctx.batchnorm(x, &name, c)?
            }
            "activation" => {
                let _: Empty = ctx.params(&rec.params)?;
                ctx.g.activation(x, rule)
            }
            "dense" => {
                let p: DenseParams = ctx.required(&rec.params)?;
                let [n, f] = *ctx.shape else {
                    return Err(ctx.err(format!("expects (N, features), got {:?}; add a flatten", ctx.shape)));
                };
                let w = ctx.weights(&format!("{name}.weight"), &[p.out_features, f], f, p.weights, p.frozen)?;
                let b = ctx.bias(&format!("{name}.bias"), p.out_features, p.bias, p.bias_values, p.frozen)?;
                ctx.shape = vec![n, p.out_features];
                ctx.g.dense(x, w, b)
            }
            "maxpool2d" => {
                let p: PoolParams = ctx.params(&rec.params)?;
                let (n, c, h, w) = ctx.image_dims()?;
                if p.size == 0 || p.stride == 0 || p.size > h || p.size > w {
                    return Err(ctx.err(format!("pool {}x{} stride {} does not fit {:?}", p.size, p.size, p.stride, ctx.shape)));
                }
                ctx.shape = vec![n, c, (h - p.size) / p.stride + 1, (w - p.size) / p.stride + 1];
                ctx.g.maxpool2d(x, p.size, p.stride)
            }
            "global_avg_pool" => {
                let _: Empty = ctx.params(&rec.params)?;
                let (n, c, _, _) = ctx.image_dims()?;
                ctx.shape = vec![n, c];
                ctx.g.global_avg_pool(x)
            }
            "flatten" => {
                let _: Empty = ctx.params(&rec.params)?;
                let n = ctx.shape[0];
                ctx.shape = vec![n, ctx.shape[1..].iter().product()];
                ctx.g.flatten(x)
            }
            "reshape" => {
                let p: ReshapeParams = ctx.required(&rec.params)?;
                if p.shape.iter().product::<usize>() != ctx.shape.iter().product::<usize>() {
                    return Err(ctx.err(format!("cannot reshape {:?} to {:?}", ctx.shape, p.shape)));
                }
                ctx.shape = p.shape.clone();
                ctx.g.reshape(x, &p.shape)
            }
            "residual_block" => {
                let p: ResidualParams = ctx.required(&rec.params)?;
                ctx.residual(&name, p)?
            }
            "scale" => {
                let p: ScaleParams = ctx.required(&rec.params)?;
                ctx.g.scale(x, p.factor)
            }
            "sum" => {
                let _: Empty = ctx.params(&rec.params)?;
                ctx.shape = vec![1];
                ctx.g.sum(x)
            }
            "select" => {
                let p: SelectParams = ctx.required(&rec.params)?;
                let offset = match (p.offset, p.index) {
                    (Some(o), None) => o,
                    (None, Some(idx)) => Tensor::zeros(&ctx.shape)?
                        .offset(&idx)
                        .ok_or_else(|| ctx.err(format!("index {idx:?} outside {:?}", ctx.shape)))?,
                    _ => return Err(ctx.err("give exactly one of offset or index")),
                };
                if offset >= ctx.shape.iter().product::<usize>() {
                    return Err(ctx.err(format!("offset {offset} outside {:?}", ctx.shape)));
                }
                ctx.shape = vec![1];
                ctx.g.select(x, offset)
            }
            other => return Err(ctx.err(format!("unknown layer type `{other}`"))),
        };
        if let Some(l) = &rec.label {
            ctx.g.set_label(node, l);
        }
        ctx.cur = node;
    }
    ctx.g.set_output(ctx.cur);
    Ok(Network {
        graph: ctx.g,
        input: ip.name,
        input_shape: ip.shape,
        output_shape: ctx.shape,
    })
}

pub fn load_network(json: &str, rule: ActivationRule, rng: &mut Rng) -> Result<Network> {
    build_network(&parse_spec(json)?, rule, rng)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autograd::{Bindings, Mode};

    const NET: &str = r#"[
        {"type": "input", "params": {"shape": [2, 1, 6, 6]}},
        {"type": "conv2d", "params": {"out_channels": 3, "kernel_size": 3, "padding": "same"}, "label": "c1"},
        {"type": "batchnorm"},
        {"type": "activation", "label": "a1"},
        {"type": "residual_block", "params": {"channels": 4, "stride": 2}, "label": "res"},
        {"type": "maxpool2d"},
        {"type": "flatten"},
        {"type": "dense", "params": {"out_features": 3}, "label": "logits"},
        {"type": "select", "params": {"index": [1, 2]}, "label": "unit"}
    ]"#;

    #[test]
    fn builds_and_runs() {
        let net = load_network(NET, ActivationRule::relu(), &mut Rng::new(0)).unwrap();
        assert_eq!(net.output_shape, vec![1]);
        net.graph.find("res.conv1").unwrap();
        net.graph.find("res.skip_bn").unwrap();
        let x = Tensor::gaussian(&[2, 1, 6, 6], 0.0, 1.0, &mut Rng::new(1)).unwrap();
        let (v, tape) = net.graph.forward(&Bindings::new().with("x", x), Mode::Train).unwrap();
        let logits = tape.value(net.graph.find("logits").unwrap());
        assert_eq!(logits.shape(), &[2, 3]);
        assert_eq!(v, logits.data()[5]);
    }

    #[test]
    fn explicit_weights() {
        let json = r#"[
            {"type": "input", "params": {"shape": [1, 1, 1, 3]}},
            {"type": "conv2d", "params": {"out_channels": 1, "kernel_size": 1, "weights": [2.0], "bias_values": [0.5]}},
            {"type": "sum"}
        ]"#;
        let net = load_network(json, ActivationRule::relu(), &mut Rng::new(0)).unwrap();
        let x = Tensor::from_vec(&[1, 1, 1, 3], vec![1.0, 2.0, 3.0]).unwrap();
        let (v, _) = net.graph.forward(&Bindings::new().with("x", x), Mode::Eval).unwrap();
        assert_eq!(v, 13.5);
    }

    #[test]
    fn errors_carry_location() {
        let bad = r#"[{"type": "input", "params": {"shape": [1, 1, 4, 4]}}, {"type": "dense", "params": {"out_features": 2}}]"#;
        let e = load_network(bad, ActivationRule::relu(), &mut Rng::new(0)).unwrap_err().to_string();
        assert!(e.contains("layer 1 (dense)"), "{e}");
        let bad = r#"[{"type": "input", "params": {"shape": [1, 4]}}, {"type": "dense", "params": {"out_feature": 2}}]"#;
        assert!(load_network(bad, ActivationRule::relu(), &mut Rng::new(0)).is_err());
        let bad = r#"[{"type": "conv2d"}]"#;
        assert!(load_network(bad, ActivationRule::relu(), &mut Rng::new(0)).is_err());
        let e = load_network("[{", ActivationRule::relu(), &mut Rng::new(0)).unwrap_err().to_string();
        assert!(e.contains("line 1"), "{e}");
        let bad = r#"[{"type": "input", "params": {"shape": [1, 4]}}, {"type": "warp"}]"#;
        assert!(load_network(bad, ActivationRule::relu(), &mut Rng::new(0)).is_err());
    }

    #[test]
    fn rule_reaches_every_activation() {
        let rule = ActivationRule::new(0.1, 0.4).unwrap();
        let net = load_network(NET, rule, &mut Rng::new(0)).unwrap();
        let rules: Vec<_> = net
            .graph
            .nodes()
            .iter()
            .filter_map(|n| match n.op {
                crate::autograd::Op::Activation { rule } => Some(rule),
                _ => None,
            })
            .collect();
        assert_eq!(rules.len(), 3);
        assert!(rules.iter().all(|r| *r == rule));
    }
}
