//! Supervised training of classification graphs.
//!
//! One backward pass per batch produces the weight gradients, so whatever
//! backward slope the activation rules carry is the slope the optimizer sees.

pub mod data;
pub mod nets;

use serde::{Deserialize, Serialize};

use crate::autograd::{Bindings, Graph, Mode};
use crate::error::{Error, Result};
use crate::rng::{Rng, Stream};
use crate::tensor::Tensor;

pub use data::{load_idx, parse_idx, synthetic_shapes, to_idx, Dataset, Source, Split};
pub use nets::{build_small_cnn, build_tiny_resnet, SmallCnnSpec, TinyResNetSpec};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Optimizer {
    SgdMomentum { momentum: f64 },
    Adam { beta1: f64, beta2: f64, eps: f64 },
}

impl Optimizer {
    pub const SGD: Optimizer = Optimizer::SgdMomentum { momentum: 0.9 };
    pub const ADAM: Optimizer = Optimizer::Adam {
        beta1: 0.9,
        beta2: 0.999,
        eps: 1e-8,
    };
}

/// Step decay: the rate is multiplied by `decay` at every milestone epoch.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LrSchedule {
    pub initial: f64,
    pub decay: f64,
    pub milestones: Vec<usize>,
}

impl LrSchedule {
    pub fn constant(lr: f64) -> Self {
        Self {
            initial: lr,
            decay: 1.0,
            milestones: Vec::new(),
        }
    }

    pub fn at(&self, epoch: usize) -> f64 {
        let k = self.milestones.iter().filter(|&&m| epoch >= m).count();
        self.initial * self.decay.powi(k as i32)
    }
}

/// Random crop after zero padding by `crop_pad` pixels, and random horizontal flips.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct Augment {
    pub crop_pad: usize,
    pub flip: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: LrSchedule,
    pub weight_decay: f64,
    pub optimizer: Optimizer,
    pub augment: Augment,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 30,
            batch_size: 32,
            lr: LrSchedule::constant(0.01),
            weight_decay: 0.0,
            optimizer: Optimizer::SGD,
            augment: Augment::default(),
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidArgument(m));
        if self.batch_size == 0 {
            return bad("batch size must be positive".into());
        }
        if !(self.lr.initial >= 0.0) || !(self.lr.decay > 0.0) {
            return bad(format!("invalid learning rate schedule {:?}", self.lr));
        }
        if !(self.weight_decay >= 0.0) {
            return bad(format!("weight decay must be >= 0, got {}", self.weight_decay));
        }
        match self.optimizer {
            Optimizer::SgdMomentum { momentum } if !(0.0..1.0).contains(&momentum) => {
                bad(format!("momentum must be in [0, 1), got {momentum}"))
            }
            Optimizer::Adam { beta1, beta2, eps }
                if !(0.0..1.0).contains(&beta1) || !(0.0..1.0).contains(&beta2) || !(eps > 0.0) =>
            {
                bad("adam needs betas in [0, 1) and eps > 0".into())
            }
            _ => Ok(()),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Mean training loss over the epoch's batches.
    pub loss: f64,
    /// Accuracy of the training-mode forward passes during the epoch.
    pub train_acc: f64,
    /// Inference-mode accuracy on the test set after the epoch, if one was given.
    pub test_acc: Option<f64>,
}

/// Per-parameter optimizer state.
struct State {
    step: i32,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl State {
    fn new(graph: &Graph) -> Self {
        let zeros: Vec<Vec<f64>> = graph.params().iter().map(|p| vec![0.0; p.value.len()]).collect();
        Self {
            step: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }
}

fn apply_update(
    graph: &mut Graph,
    grads: &crate::autograd::Gradients,
    state: &mut State,
    lr: f64,
    config: &TrainConfig,
) {
    state.step += 1;
    for (i, p) in graph.params_mut().iter_mut().enumerate() {
        if !p.trainable {
            continue;
        }
        let Some(g) = grads.param(crate::autograd::ParamId(i)) else {
            continue;
        };
        let w = p.value.data_mut();
        let (m, v) = (&mut state.m[i], &mut state.v[i]);
        for k in 0..w.len() {
            let gk = g.data()[k] + config.weight_decay * w[k];
            match config.optimizer {
                Optimizer::SgdMomentum { momentum } => {
                    m[k] = momentum * m[k] + gk;
                    w[k] -= lr * m[k];
                }
                Optimizer::Adam { beta1, beta2, eps } => {
                    m[k] = beta1 * m[k] + (1.0 - beta1) * gk;
                    v[k] = beta2 * v[k] + (1.0 - beta2) * gk * gk;
                    let mh = m[k] / (1.0 - beta1.powi(state.step));
                    let vh = v[k] / (1.0 - beta2.powi(state.step));
                    w[k] -= lr * mh / (vh.sqrt() + eps);
                }
            }
        }
    }
}

fn augment_batch(x: &mut Tensor, aug: Augment, rng: &mut Rng) {
    if aug.crop_pad == 0 && !aug.flip {
        return;
    }
    let [n, c, h, w] = *x.shape() else { return };
    let pad = aug.crop_pad as isize;
    let d = x.data_mut();
    for b in 0..n {
        let dy = if pad > 0 { rng.below(2 * aug.crop_pad + 1) as isize - pad } else { 0 };
        let dx = if pad > 0 { rng.below(2 * aug.crop_pad + 1) as isize - pad } else { 0 };
        let flip = aug.flip && rng.below(2) == 1;
        for ch in 0..c {
            let plane = &mut d[(b * c + ch) * h * w..][..h * w];
            let src = plane.to_vec();
            for i in 0..h {
                for j in 0..w {
                    let jj = if flip { w - 1 - j } else { j };
                    let (si, sj) = (i as isize + dy, jj as isize + dx);
                    plane[i * w + j] = if si < 0 || sj < 0 || si >= h as isize || sj >= w as isize {
                        0.0
                    } else {
                        src[si as usize * w + sj as usize]
                    };
                }
            }
        }
    }
}

fn argmax(row: &[f64]) -> usize {
    row.iter()
        .enumerate()
        .fold(0, |best, (i, &v)| if v > row[best] { i } else { best })
}

fn correct(logits: &Tensor, labels: &[usize]) -> usize {
    let k = logits.shape()[1];
    logits
        .data()
        .chunks_exact(k)
        .zip(labels)
        .filter(|(row, &y)| argmax(row) == y)
        .count()
}

/// Minimizes the graph's scalar output (mean cross-entropy) with minibatches.
/// The graph must label its class scores `logits`. A non-finite loss aborts
/// with [`Error::Diverged`].
pub fn train(
    graph: &mut Graph,
    train_set: &Dataset,
    test_set: Option<&Dataset>,
    config: &TrainConfig,
) -> Result<Vec<EpochRecord>> {
    config.validate()?;
    if train_set.is_empty() {
        return Err(Error::InvalidArgument("empty training set".into()));
    }
    let logits = graph.find("logits")?;
    let needs_pairs = !graph.batchnorm_nodes().is_empty();
    let mut shuffle = Rng::stream(config.seed, Stream::Shuffle);
    let mut aug_rng = Rng::stream(config.seed, Stream::Augment);
    let mut state = State::new(graph);
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    let mut history = Vec::with_capacity(config.epochs);
    for epoch in 0..config.epochs {
        let lr = config.lr.at(epoch);
        shuffle.shuffle(&mut order);
        let (mut loss_sum, mut seen, mut hits) = (0.0, 0, 0);
        for (batch, idx) in order.chunks(config.batch_size).enumerate() {
            if needs_pairs && idx.len() < 2 {
                continue;
            }
            let (mut x, y) = train_set.batch(idx)?;
            augment_batch(&mut x, config.augment, &mut aug_rng);
            let bindings = Bindings::new().with("x", x).with_labels(y.clone());
            let diverged = |loss: f64| Error::Diverged { epoch: epoch + 1, batch, loss };
            let (loss, tape) = match graph.forward(&bindings, Mode::Train) {
                Ok(r) => r,
                Err(Error::NonFinite(_)) => return Err(diverged(f64::NAN)),
                Err(e) => return Err(e),
            };
            if !loss.is_finite() {
                return Err(diverged(loss));
            }
            let grads = graph.backward(&tape, 1.0)?;
            graph.update_running_stats(&tape)?;
            apply_update(graph, &grads, &mut state, lr, config);
            if graph.params().iter().any(|p| !p.value.is_finite()) {
                return Err(diverged(loss));
            }
            loss_sum += loss * idx.len() as f64;
            seen += idx.len();
            hits += correct(tape.value(logits), &y);
        }
        let test_acc = test_set.map(|d| evaluate(graph, d)).transpose()?;
        history.push(EpochRecord {
            epoch: epoch + 1,
            loss: loss_sum / seen.max(1) as f64,
            train_acc: hits as f64 / seen.max(1) as f64,
            test_acc,
        });
    }
    Ok(history)
}

/// Fraction of samples whose arg-max logit equals the label, with batch
/// norm in inference mode.
pub fn evaluate(graph: &Graph, dataset: &Dataset) -> Result<f64> {
    if dataset.is_empty() {
        return Err(Error::InvalidArgument("cannot evaluate on an empty dataset".into()));
    }
    let logits = graph.find("logits")?;
    let idx: Vec<usize> = (0..dataset.len()).collect();
    let mut hits = 0;
    for chunk in idx.chunks(256) {
        let (x, y) = dataset.batch(chunk)?;
        let bindings = Bindings::new().with("x", x).with_labels(y.clone());
        let tape = graph.evaluate(&bindings, Mode::Eval)?;
        hits += correct(tape.value(logits), &y);
    }
    Ok(hits as f64 / dataset.len() as f64)
}
