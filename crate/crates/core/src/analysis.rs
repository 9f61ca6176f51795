//! Moments of Leaky-ReLU-rectified standard normals, per-layer gradient
//! magnitudes and batch-norm input spreads in randomly initialized networks.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::autograd::{Bindings, Graph, Mode, NodeId, Op};
use crate::error::{Error, Result};
use crate::layers::ActivationRule;
use crate::rng::{Rng, Stream};
use crate::tensor::Tensor;
use crate::train::{build_tiny_resnet, synthetic_shapes, TinyResNetSpec};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MomentPair {
    pub mean: f64,
    pub variance: f64,
}

/// `E[max(z, s z)]` for `z ~ N(0, 1)`: `(1 - s) / sqrt(2π)`.
pub fn rectified_gaussian_mean(s: f64) -> f64 {
    (1.0 - s) / (2.0 * PI).sqrt()
}

/// `Var[max(z, s z)]` for `z ~ N(0, 1)`: `(s² + 1) / 2 - (1 - s)² / (2π)`.
pub fn rectified_gaussian_var(s: f64) -> f64 {
    (s * s + 1.0) / 2.0 - (1.0 - s).powi(2) / (2.0 * PI)
}

pub fn rectified_gaussian_moments(s: f64) -> MomentPair {
    MomentPair {
        mean: rectified_gaussian_mean(s),
        variance: rectified_gaussian_var(s),
    }
}

/// Sample moments together with their standard errors.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MonteCarloMoments {
    pub moments: MomentPair,
    pub mean_se: f64,
    /// `sqrt((m4 - var²) / n)`, the large-sample error of the variance.
    pub variance_se: f64,
    pub n: usize,
}

pub fn monte_carlo_estimate(s: f64, n: usize, rng: &mut Rng) -> Result<MonteCarloMoments> {
    if n < 2 {
        return Err(Error::InvalidArgument(format!("need at least 2 samples, got {n}")));
    }
    let samples: Vec<f64> = (0..n)
        .map(|_| {
            let z = rng.normal();
            z.max(s * z)
        })
        .collect();
    let nf = n as f64;
    let mean = samples.iter().sum::<f64>() / nf;
    let (mut m2, mut m4) = (0.0, 0.0);
    for v in &samples {
        let d = (v - mean) * (v - mean);
        m2 += d;
        m4 += d * d;
    }
    let var = m2 / (nf - 1.0);
    let m4 = m4 / nf;
    Ok(MonteCarloMoments {
        moments: MomentPair {
            mean,
            variance: var,
        },
        mean_se: (var / nf).sqrt(),
        variance_se: ((m4 - var * var).max(0.0) / nf).sqrt(),
        n,
    })
}

/// Sample mean and (unbiased) variance of `max(z, s z)` over `n` normal draws.
pub fn monte_carlo_moments(s: f64, n: usize, rng: &mut Rng) -> Result<MomentPair> {
    monte_carlo_estimate(s, n, rng).map(|m| m.moments)
}

/// Spearman rank correlation with average ranks for ties.
pub fn spearman(x: &[f64], y: &[f64]) -> Result<f64> {
    if x.len() != y.len() || x.len() < 2 {
        return Err(Error::InvalidArgument(format!(
            "spearman needs two equal-length series of at least 2 values, got {} and {}",
            x.len(),
            y.len()
        )));
    }
    let rank = |v: &[f64]| -> Vec<f64> {
        let mut idx: Vec<usize> = (0..v.len()).collect();
        idx.sort_by(|&a, &b| v[a].total_cmp(&v[b]));
        let mut r = vec![0.0; v.len()];
        let mut i = 0;
        while i < idx.len() {
            let mut j = i;
            while j + 1 < idx.len() && v[idx[j + 1]] == v[idx[i]] {
                j += 1;
            }
            let avg = (i + j) as f64 / 2.0 + 1.0;
            for &k in &idx[i..=j] {
                r[k] = avg;
            }
            i = j + 1;
        }
        r
    };
    let (rx, ry) = (rank(x), rank(y));
    let n = x.len() as f64;
    let mx = rx.iter().sum::<f64>() / n;
    let my = ry.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in rx.iter().zip(&ry) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx) * (a - mx);
        syy += (b - my) * (b - my);
    }
    if sxx == 0.0 || syy == 0.0 {
        return Ok(0.0);
    }
    Ok(sxy / (sxx * syy).sqrt())
}

/// Whether a rule replaces the whole activation (`leaky`) or only its backward pass (`proxygrad`).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ProfileMode {
    Leaky,
    Proxygrad,
}

impl ProfileMode {
    pub fn rule(self, slope: f64) -> Result<ActivationRule> {
        match self {
            ProfileMode::Leaky => ActivationRule::leaky(slope),
            ProfileMode::Proxygrad => ActivationRule::proxy(slope),
        }
    }

    pub fn of(rule: ActivationRule) -> Self {
        if rule.is_exact() {
            ProfileMode::Leaky
        } else {
            ProfileMode::Proxygrad
        }
    }
}

/// Where a profiling batch comes from.
#[derive(Debug, Clone, PartialEq)]
pub enum ProbeBatch {
    /// A fresh synthetic-shapes batch per seed, drawn from the seed's data stream.
    Synthetic { batch_size: usize },
    /// The same images for every seed.
    Fixed { images: Tensor, labels: Vec<usize> },
}

impl ProbeBatch {
    fn draw(&self, spec: &TinyResNetSpec, seed: u64) -> Result<(Tensor, Vec<usize>)> {
        match self {
            ProbeBatch::Synthetic { batch_size } => {
                let [_, h, w] = spec.input_shape;
                if h != w {
                    return Err(Error::InvalidArgument("synthetic batches need square images".into()));
                }
                let per_class = batch_size.div_ceil(spec.classes);
                let data = synthetic_shapes(per_class, spec.classes, h, &mut Rng::stream(seed, Stream::Data))?;
                let idx: Vec<usize> = (0..*batch_size).collect();
                data.batch(&idx)
            }
            ProbeBatch::Fixed { images, labels } => Ok((images.clone(), labels.clone())),
        }
    }
}

/// Mean and standard deviation over seeds of one per-layer statistic.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerStat {
    pub layer: String,
    pub mean: f64,
    pub std: f64,
    pub per_seed: Vec<f64>,
}

impl LayerStat {
    fn from_samples(layer: &str, per_seed: Vec<f64>) -> Self {
        let n = per_seed.len() as f64;
        let mean = per_seed.iter().sum::<f64>() / n;
        let var = if per_seed.len() > 1 {
            per_seed.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)
        } else {
            0.0
        };
        Self {
            layer: layer.to_string(),
            mean,
            std: var.sqrt(),
            per_seed,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradientProfile {
    pub rule: ActivationRule,
    pub mode: ProfileMode,
    /// Backward slope of the rule.
    pub slope: f64,
    pub bn_enabled: bool,
    pub n_seeds: usize,
    pub layers: Vec<LayerStat>,
}

fn network(spec: &TinyResNetSpec, rule: ActivationRule, seed: u64) -> Result<Graph> {
    let spec = TinyResNetSpec {
        rule,
        ..spec.clone()
    };
    build_tiny_resnet(&spec, &mut Rng::stream(seed, Stream::Weights))
}

/// For every seed: initialize the network, run one training-mode forward and
/// backward pass of the cross-entropy on a batch, and record the mean
/// absolute gradient at each probe node's output.
pub fn layer_gradient_magnitude(
    spec: &TinyResNetSpec,
    batch: &ProbeBatch,
    rule: ActivationRule,
    probes: &[&str],
    seeds: &[u64],
) -> Result<GradientProfile> {
    if seeds.is_empty() {
        return Err(Error::InvalidArgument("need at least one seed".into()));
    }
    let mut samples = vec![Vec::with_capacity(seeds.len()); probes.len()];
    for &seed in seeds {
        let g = network(spec, rule, seed)?;
        let ids: Vec<NodeId> = probes.iter().map(|p| g.find(p)).collect::<Result<_>>()?;
        let (x, y) = batch.draw(spec, seed)?;
        let (_, tape) = g.forward(&Bindings::new().with("x", x).with_labels(y), Mode::Train)?;
        let grads = g.backward(&tape, 1.0)?;
        for (k, id) in ids.iter().enumerate() {
            let v = grads.node(*id).map_or(0.0, |t| t.abs().mean());
            samples[k].push(v);
        }
    }
    Ok(GradientProfile {
        rule,
        mode: ProfileMode::of(rule),
        slope: rule.backward_slope,
        bn_enabled: spec.batchnorm,
        n_seeds: seeds.len(),
        layers: probes
            .iter()
            .zip(samples)
            .map(|(p, s)| LayerStat::from_samples(p, s))
            .collect(),
    })
}

/// Batch-norm nodes whose input depends on at least one activation.
pub fn bn_after_activation(graph: &Graph) -> Vec<NodeId> {
    let nodes = graph.nodes();
    let mut downstream = vec![false; nodes.len()];
    for (i, n) in nodes.iter().enumerate() {
        downstream[i] = n.inputs.iter().any(|j| downstream[j.0] || matches!(nodes[j.0].op, Op::Activation { .. }));
    }
    graph
        .batchnorm_nodes()
        .into_iter()
        .filter(|id| downstream[id.0])
        .collect()
}

/// Per-channel standard deviation over batch and space, averaged over channels.
fn channel_std(x: &Tensor) -> f64 {
    let s = x.shape();
    let (n, c) = (s[0], s[1]);
    let sp: usize = s[2..].iter().product();
    let mut total = 0.0;
    for ch in 0..c {
        let vals = (0..n).flat_map(|b| x.data()[(b * c + ch) * sp..][..sp].iter().copied());
        let (mut sum, mut sq, mut k) = (0.0, 0.0, 0.0);
        for v in vals {
            sum += v;
            sq += v * v;
            k += 1.0;
        }
        let mean = sum / k;
        total += (sq / k - mean * mean).max(0.0).sqrt();
    }
    total / c as f64
}

/// Seed statistics of the standard deviation of every batch-norm input.
pub fn bn_input_std_profile(
    spec: &TinyResNetSpec,
    batch: &ProbeBatch,
    rule: ActivationRule,
    seeds: &[u64],
) -> Result<Vec<LayerStat>> {
    if !spec.batchnorm {
        return Err(Error::InvalidArgument("network has no batch normalization".into()));
    }
    if seeds.is_empty() {
        return Err(Error::InvalidArgument("need at least one seed".into()));
    }
    let mut labels = Vec::new();
    let mut samples: Vec<Vec<f64>> = Vec::new();
    for &seed in seeds {
        let g = network(spec, rule, seed)?;
        let bns = g.batchnorm_nodes();
        if labels.is_empty() {
            labels = bns
                .iter()
                .map(|&id| g.node(id).label.clone().unwrap_or_else(|| format!("bn{}", id.0)))
                .collect();
            samples = vec![Vec::with_capacity(seeds.len()); bns.len()];
        }
        let (x, y) = batch.draw(spec, seed)?;
        let tape = g.evaluate(&Bindings::new().with("x", x).with_labels(y), Mode::Train)?;
        for (k, id) in bns.iter().enumerate() {
            samples[k].push(channel_std(tape.value(g.node(*id).inputs[0])));
        }
    }
    Ok(labels
        .iter()
        .zip(samples)
        .map(|(l, s)| LayerStat::from_samples(l, s))
        .collect())
}
