//! Activation maximization by projected gradient ascent on the input.
//!
//! Each iteration runs one forward pass (scored with the forward slopes of
//! the graph, i.e. the original network) and one backward pass (which uses
//! the backward slopes, possibly a proxy), then applies
//!
//! ```text
//! x <- clamp(R(x + μ g))            raw step
//! x <- clamp(R(x + μ g / ‖g‖₂))     normalized step
//! ```
//!
//! where `R` is the configured chain of regularizers (blur, rotation).

use serde::{Deserialize, Serialize};

use crate::autograd::{Bindings, Graph, Mode};
use crate::error::{Error, Result};
use crate::layers::ActivationRule;
use crate::rng::{Rng, Stream};
use crate::tensor::Tensor;
use crate::toy::WhiteImageProblem;

/// Gradient norms at or below this are treated as zero.
pub const ZERO_GRADIENT: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Regularizer {
    Blur { sigma: f64, kernel_size: usize },
    Rotate { max_degrees: f64 },
}

impl Regularizer {
    pub const DEFAULT_BLUR: Regularizer = Regularizer::Blur {
        sigma: 0.5,
        kernel_size: 3,
    };
    pub const DEFAULT_ROTATE: Regularizer = Regularizer::Rotate { max_degrees: 2.0 };
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct InitSpec {
    /// Gray level of the background; 0 is mid-gray on the `[-1, 1]` scale.
    pub background: f64,
    pub noise_std: f64,
    pub seed: u64,
}

impl Default for InitSpec {
    fn default() -> Self {
        Self {
            background: 0.0,
            noise_std: 0.5,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AmConfig {
    pub learning_rate: f64,
    pub iterations: usize,
    pub normalize_gradient: bool,
    pub clamp: (f64, f64),
    pub regularizers: Vec<Regularizer>,
    pub init: InitSpec,
    /// Keep a copy of the image every `frame_stride` iterations (0 disables).
    #[serde(default)]
    pub frame_stride: usize,
}

impl Default for AmConfig {
    fn default() -> Self {
        Self {
            learning_rate: 0.1,
            iterations: 200,
            normalize_gradient: false,
            clamp: (-1.0, 1.0),
            regularizers: Vec::new(),
            init: InitSpec::default(),
            frame_stride: 0,
        }
    }
}

impl AmConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidArgument(m));
        if !(self.learning_rate >= 0.0) {
            return bad(format!("learning rate must be >= 0, got {}", self.learning_rate));
        }
        if self.iterations == 0 {
            return bad("iterations must be >= 1".into());
        }
        if !(self.clamp.0 <= self.clamp.1) {
            return bad(format!("clamp bounds {:?} out of order", self.clamp));
        }
        if !(self.init.noise_std >= 0.0) {
            return bad(format!("noise std must be >= 0, got {}", self.init.noise_std));
        }
        for r in &self.regularizers {
            match *r {
                Regularizer::Blur { sigma, kernel_size } => {
                    if !(sigma >= 0.0) {
                        return bad(format!("blur sigma must be >= 0, got {sigma}"));
                    }
                    if kernel_size % 2 == 0 {
                        return bad(format!("blur kernel size must be odd, got {kernel_size}"));
                    }
                }
                Regularizer::Rotate { max_degrees } => {
                    if !(max_degrees >= 0.0) {
                        return bad(format!("rotation bound must be >= 0, got {max_degrees}"));
                    }
                }
            }
        }
        Ok(())
    }
}

/// Per-iteration record of one run; index 0 is the initial image.
#[derive(Debug, Clone, PartialEq)]
pub struct AmTrajectory {
    pub objective: Vec<f64>,
    pub grad_norm: Vec<f64>,
    /// Iterations whose gradient norm was at most [`ZERO_GRADIENT`].
    pub zero_gradient: Vec<usize>,
    pub initial_image: Tensor,
    pub final_image: Tensor,
    pub best_iteration: usize,
    /// For every initially negative pixel, the first iteration at which it was `>= 0`.
    pub crossings: Vec<Option<usize>>,
    pub frames: Vec<(usize, Tensor)>,
}

impl AmTrajectory {
    pub fn final_objective(&self) -> f64 {
        *self.objective.last().expect("trajectory has at least one entry")
    }

    pub fn best_objective(&self) -> f64 {
        self.objective[self.best_iteration]
    }
}

/// `background + noise_std · N(0, 1)` clamped to `[-1, 1]`.
pub fn init_image(shape: &[usize], init: &InitSpec, rng: &mut Rng) -> Result<Tensor> {
    Ok(Tensor::gaussian(shape, init.background, init.noise_std, rng)?.clamp(-1.0, 1.0))
}

/// One ascent step followed by the regularizers and the clamp.
pub fn ascend_step(x: &Tensor, grad: &Tensor, config: &AmConfig, rng: &mut Rng) -> Result<Tensor> {
    x.expect_shape(grad.shape())?;
    let norm = grad.l2_norm();
    let step = if config.normalize_gradient {
        if norm > ZERO_GRADIENT {
            config.learning_rate / norm
        } else {
            0.0
        }
    } else {
        config.learning_rate
    };
    let mut next = x.clone();
    if step != 0.0 {
        for (v, g) in next.data_mut().iter_mut().zip(grad.data()) {
            *v += step * g;
        }
    }
    for r in &config.regularizers {
        next = match *r {
            Regularizer::Blur { sigma, kernel_size } => regularize_blur(&next, sigma, kernel_size)?,
            Regularizer::Rotate { max_degrees } => regularize_rotate(&next, max_degrees, rng)?,
        };
    }
    next.clamp(config.clamp.0, config.clamp.1).finite("ascent step")
}

fn planes(x: &Tensor) -> Result<(usize, usize, usize)> {
    let s = x.shape();
    if s.len() < 2 {
        return Err(Error::InvalidArgument(format!(
            "image regularizers need at least 2 dims, got {s:?}"
        )));
    }
    let (h, w) = (s[s.len() - 2], s[s.len() - 1]);
    Ok((x.len() / (h * w), h, w))
}

/// Separable Gaussian blur over the last two axes with zero padding.
pub fn regularize_blur(x: &Tensor, sigma: f64, kernel_size: usize) -> Result<Tensor> {
    if kernel_size % 2 == 0 {
        return Err(Error::InvalidArgument(format!(
            "blur kernel size must be odd, got {kernel_size}"
        )));
    }
    if !(sigma >= 0.0) {
        return Err(Error::InvalidArgument(format!("blur sigma must be >= 0, got {sigma}")));
    }
    if sigma == 0.0 || kernel_size == 1 {
        return Ok(x.clone());
    }
    let r = (kernel_size / 2) as isize;
    let mut taps: Vec<f64> = (-r..=r)
        .map(|d| (-(d * d) as f64 / (2.0 * sigma * sigma)).exp())
        .collect();
    let total: f64 = taps.iter().sum();
    taps.iter_mut().for_each(|t| *t /= total);

    let (np, h, w) = planes(x)?;
    let src = x.data();
    let mut tmp = vec![0.0; src.len()];
    let mut out = vec![0.0; src.len()];
    for p in 0..np {
        let base = p * h * w;
        for i in 0..h {
            for j in 0..w {
                let mut acc = 0.0;
                for (k, t) in taps.iter().enumerate() {
                    let jj = j as isize + k as isize - r;
                    if (0..w as isize).contains(&jj) {
                        acc += t * src[base + i * w + jj as usize];
                    }
                }
                tmp[base + i * w + j] = acc;
            }
        }
        for i in 0..h {
            for j in 0..w {
                let mut acc = 0.0;
                for (k, t) in taps.iter().enumerate() {
                    let ii = i as isize + k as isize - r;
                    if (0..h as isize).contains(&ii) {
                        acc += t * tmp[base + ii as usize * w + j];
                    }
                }
                out[base + i * w + j] = acc;
            }
        }
    }
    Tensor::from_vec(x.shape(), out)
}

/// Rotation about the image centre with bilinear resampling; samples that
/// fall outside the image read as 0.
pub fn rotate(x: &Tensor, degrees: f64) -> Result<Tensor> {
    let (np, h, w) = planes(x)?;
    let (sin, cos) = degrees.to_radians().sin_cos();
    let (cy, cx) = ((h as f64 - 1.0) / 2.0, (w as f64 - 1.0) / 2.0);
    let src = x.data();
    let mut out = vec![0.0; src.len()];
    let at = |base: usize, y: isize, xx: isize| -> f64 {
        if y < 0 || xx < 0 || y >= h as isize || xx >= w as isize {
            0.0
        } else {
            src[base + y as usize * w + xx as usize]
        }
    };
    for p in 0..np {
        let base = p * h * w;
        for i in 0..h {
            for j in 0..w {
                let (dy, dx) = (i as f64 - cy, j as f64 - cx);
                // inverse map: rotate the output coordinate by -θ
                let sy = cos * dy - sin * dx + cy;
                let sx = sin * dy + cos * dx + cx;
                let (y0, x0) = (sy.floor(), sx.floor());
                let (fy, fx) = (sy - y0, sx - x0);
                let (y0, x0) = (y0 as isize, x0 as isize);
                let v = (1.0 - fy) * ((1.0 - fx) * at(base, y0, x0) + fx * at(base, y0, x0 + 1))
                    + fy * ((1.0 - fx) * at(base, y0 + 1, x0) + fx * at(base, y0 + 1, x0 + 1));
                out[base + i * w + j] = v;
            }
        }
    }
    Tensor::from_vec(x.shape(), out)
}

/// Rotation by an angle drawn uniformly from `[-max_degrees, max_degrees]`.
pub fn regularize_rotate(x: &Tensor, max_degrees: f64, rng: &mut Rng) -> Result<Tensor> {
    let theta = rng.uniform(-max_degrees, max_degrees);
    rotate(x, theta)
}

/// Maximizes the scalar output of `graph` over the input placeholder `input`.
pub fn run_am(graph: &Graph, input: &str, shape: &[usize], config: &AmConfig) -> Result<AmTrajectory> {
    config.validate()?;
    let mut init_rng = Rng::stream(config.init.seed, Stream::Init);
    let mut rot_rng = Rng::stream(config.init.seed, Stream::Rotation);
    let initial = init_image(shape, &config.init, &mut init_rng)?;
    let mut x = initial.clone();

    let n = x.len();
    let mut objective = Vec::with_capacity(config.iterations + 1);
    let mut grad_norm = Vec::with_capacity(config.iterations + 1);
    let mut zero_gradient = Vec::new();
    let mut crossings = vec![None; n];
    let mut frames = Vec::new();

    for t in 0..=config.iterations {
        let bindings = Bindings::new().with(input, x.clone());
        let (f, tape) = graph.forward(&bindings, Mode::Eval)?;
        let grads = graph.backward(&tape, 1.0)?;
        let g = grads
            .input(input)
            .cloned()
            .ok_or_else(|| Error::UnboundInput(input.to_string()))?;
        let norm = g.l2_norm();
        objective.push(f);
        grad_norm.push(norm);
        if norm <= ZERO_GRADIENT {
            zero_gradient.push(t);
        }
        for (i, (&x0, &xt)) in initial.data().iter().zip(x.data()).enumerate() {
            if x0 < 0.0 && xt >= 0.0 && crossings[i].is_none() {
                crossings[i] = Some(t);
            }
        }
        if config.frame_stride > 0 && t % config.frame_stride == 0 {
            frames.push((t, x.clone()));
        }
        if t == config.iterations {
            break;
        }
        x = ascend_step(&x, &g, config, &mut rot_rng)?;
    }

    let best_iteration = objective
        .iter()
        .enumerate()
        .fold(0, |best, (i, &v)| if v > objective[best] { i } else { best });
    Ok(AmTrajectory {
        objective,
        grad_norm,
        zero_gradient,
        initial_image: initial,
        final_image: x,
        best_iteration,
        crossings,
        frames,
    })
}

/// [`run_am`] on a white image problem with the given activation rule.
pub fn run_am_problem(
    problem: &WhiteImageProblem,
    rule: ActivationRule,
    config: &AmConfig,
) -> Result<AmTrajectory> {
    let graph = problem.build_graph(rule)?;
    run_am(&graph, "x", &problem.shape(), config)
}

/// How a slope sweep derives the AM network from the original one.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SweepMode {
    /// Replace every rectifier by a Leaky ReLU of the swept slope.
    Leaky,
    /// Keep the forward pass, use the swept slope backward only.
    Proxy,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SweepPoint {
    pub slope: f64,
    pub mode: SweepMode,
    /// Output of the original graph on the final image.
    pub score: f64,
}

/// Runs AM once per slope and scores every final image with `original`.
pub fn slope_sweep(
    original: &Graph,
    input: &str,
    shape: &[usize],
    slopes: &[f64],
    mode: SweepMode,
    config: &AmConfig,
) -> Result<Vec<SweepPoint>> {
    let base_slope = original
        .nodes()
        .iter()
        .find_map(|n| match n.op {
            crate::autograd::Op::Activation { rule } => Some(rule.forward_slope),
            _ => None,
        })
        .unwrap_or(0.0);
    slopes
        .iter()
        .map(|&s| {
            let rule = match mode {
                SweepMode::Leaky => ActivationRule::leaky(s)?,
                SweepMode::Proxy => ActivationRule::new(base_slope, s)?,
            };
            let g = original.with_activation_rule(rule);
            let traj = run_am(&g, input, shape, config)?;
            let bindings = Bindings::new().with(input, traj.final_image);
            let (score, _) = original.forward(&bindings, Mode::Eval)?;
            Ok(SweepPoint { slope: s, mode, score })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::toy::WhiteImageProblem;

    fn cfg(lr: f64, iters: usize, normalize: bool) -> AmConfig {
        AmConfig {
            learning_rate: lr,
            iterations: iters,
            normalize_gradient: normalize,
            ..AmConfig::default()
        }
    }

    #[test]
    fn init_image_cases() {
        let mut rng = Rng::new(0);
        let flat = init_image(
            &[1, 4, 4],
            &InitSpec {
                background: 0.3,
                noise_std: 0.0,
                seed: 0,
            },
            &mut rng,
        )
        .unwrap();
        assert!(flat.data().iter().all(|&v| v == 0.3));

        let spec = InitSpec {
            background: 0.0,
            noise_std: 0.01,
            seed: 5,
        };
        let a = init_image(&[1, 64, 64], &spec, &mut Rng::stream(5, Stream::Init)).unwrap();
        let b = init_image(&[1, 64, 64], &spec, &mut Rng::stream(5, Stream::Init)).unwrap();
        assert_eq!(a, b);
        let mean = a.mean();
        let std = (a.data().iter().map(|v| (v - mean).powi(2)).sum::<f64>() / a.len() as f64).sqrt();
        assert!((std - 0.01).abs() < 0.001, "std {std}");

        let white = init_image(
            &[1, 8, 8],
            &InitSpec {
                background: 1.0,
                noise_std: 0.3,
                seed: 1,
            },
            &mut rng,
        )
        .unwrap();
        assert_eq!(white.data().iter().copied().fold(f64::MIN, f64::max), 1.0);
    }

    #[test]
    fn normalized_step_from_zero() {
        let n = 16;
        let x = Tensor::zeros(&[n]).unwrap();
        let g = Tensor::ones(&[n]).unwrap();
        let mut rng = Rng::new(0);
        let y = ascend_step(&x, &g, &cfg(25.0, 1, true), &mut rng).unwrap();
        let expected = (25.0 / (n as f64).sqrt()).min(1.0);
        assert!(y.data().iter().all(|&v| v == expected));

        let y = ascend_step(&x, &g, &cfg(0.5, 1, true), &mut rng).unwrap();
        assert!((y.l2_norm() - 0.5).abs() < 1e-15);
    }

    #[test]
    fn zero_gradient_leaves_image() {
        let x = Tensor::from_vec(&[3], vec![-0.4, 0.1, 0.9]).unwrap();
        let g = Tensor::zeros(&[3]).unwrap();
        let mut rng = Rng::new(0);
        for normalize in [false, true] {
            assert_eq!(ascend_step(&x, &g, &cfg(3.0, 1, normalize), &mut rng).unwrap(), x);
        }
    }

    #[test]
    fn blur_cases() {
        let mut rng = Rng::new(2);
        let x = Tensor::gaussian(&[1, 6, 6], 0.0, 1.0, &mut rng).unwrap();
        assert_eq!(regularize_blur(&x, 0.0, 3).unwrap(), x);
        assert!(regularize_blur(&x, 0.5, 4).is_err());
        let c = Tensor::full(&[1, 6, 6], 0.7).unwrap();
        let b = regularize_blur(&c, 0.5, 3).unwrap();
        for i in 1..5 {
            for j in 1..5 {
                assert!((b.get(&[0, i, j]).unwrap() - 0.7).abs() < 1e-15);
            }
        }
        // corners lose mass to the zero padding
        assert!(b.get(&[0, 0, 0]).unwrap() < 0.7);
    }

    #[test]
    fn rotate_by_zero_is_identity() {
        let mut rng = Rng::new(3);
        let x = Tensor::gaussian(&[2, 5, 7], 0.0, 1.0, &mut rng).unwrap();
        let y = rotate(&x, 0.0).unwrap();
        for (a, b) in x.data().iter().zip(y.data()) {
            assert!((a - b).abs() <= 1e-12);
        }
    }

    #[test]
    fn rotate_quarter_turn_permutes_pixels() {
        let x = Tensor::from_vec(&[1, 3, 3], (0..9).map(f64::from).collect()).unwrap();
        let y = rotate(&x, 90.0).unwrap();
        // centre is fixed and the multiset of values is preserved
        assert!((y.get(&[0, 1, 1]).unwrap() - 4.0).abs() < 1e-12);
        let mut a: Vec<f64> = y.data().iter().map(|v| v.round()).collect();
        a.sort_by(f64::total_cmp);
        assert_eq!(a, (0..9).map(f64::from).collect::<Vec<_>>());
    }

    #[test]
    fn iterates_stay_in_box() {
        let pr = WhiteImageProblem::f3(0.1, 0.2, 8, 8).unwrap();
        let mut c = cfg(0.7, 30, false);
        c.regularizers = vec![Regularizer::DEFAULT_BLUR, Regularizer::DEFAULT_ROTATE];
        c.frame_stride = 1;
        let traj = run_am_problem(&pr, ActivationRule::new(0.1, 0.5).unwrap(), &c).unwrap();
        assert_eq!(traj.objective.len(), 31);
        assert_eq!(traj.grad_norm.len(), 31);
        for (_, frame) in &traj.frames {
            assert!(frame.data().iter().all(|v| (-1.0..=1.0).contains(v)));
        }
    }

    #[test]
    fn f1_relu_freezes_negative_pixels() {
        let pr = WhiteImageProblem::f1(8, 8);
        let traj = run_am_problem(&pr, ActivationRule::relu(), &cfg(0.5, 50, false)).unwrap();
        for (a, b) in traj.initial_image.data().iter().zip(traj.final_image.data()) {
            if *a < 0.0 {
                assert_eq!(a.to_bits(), b.to_bits());
            } else {
                assert_eq!(*b, 1.0);
            }
        }
    }

    #[test]
    fn f1_all_negative_init_is_a_zero_gradient_run() {
        let pr = WhiteImageProblem::f1(4, 4);
        let mut c = cfg(0.5, 5, true);
        c.init = InitSpec {
            background: -0.5,
            noise_std: 0.0,
            seed: 0,
        };
        let traj = run_am_problem(&pr, ActivationRule::relu(), &c).unwrap();
        assert_eq!(traj.zero_gradient, vec![0, 1, 2, 3, 4, 5]);
        assert_eq!(traj.final_image, traj.initial_image);
    }

    #[test]
    fn f1_proxy_reaches_white() {
        let pr = WhiteImageProblem::f1(8, 8);
        let traj = run_am_problem(&pr, ActivationRule::proxy(0.1).unwrap(), &cfg(0.5, 60, false)).unwrap();
        assert!(traj.final_image.data().iter().all(|&v| v >= 1.0 - 1e-6));
    }

    #[test]
    fn f3_leaky_keeps_init_signs() {
        let pr = WhiteImageProblem::f3(0.1, 0.2, 8, 8).unwrap();
        let traj = run_am_problem(&pr, pr.forward_rule(), &cfg(0.1, 200, false)).unwrap();
        for (a, b) in traj.initial_image.data().iter().zip(traj.final_image.data()) {
            assert_eq!(*b, if *a < 0.0 { -1.0 } else { 1.0 });
        }
    }

    #[test]
    fn normalized_proxy_objective_is_monotone() {
        for pr in [WhiteImageProblem::f1(6, 6), WhiteImageProblem::f2(0.2, 6, 6).unwrap()] {
            let rule = ActivationRule::new(pr.slope, 0.3).unwrap();
            let traj = run_am_problem(&pr, rule, &cfg(0.3, 80, true)).unwrap();
            for w in traj.objective.windows(2) {
                assert!(w[1] >= w[0] - 1e-12, "{:?}", w);
            }
        }
    }

    #[test]
    fn race_of_patterns_crossing_time() {
        for s in [0.1, 0.5] {
            let pr = WhiteImageProblem::f2(s, 4, 4).unwrap();
            let mu = 0.01;
            let mut c = cfg(mu, (1.0 / (s * mu)) as usize + 2, false);
            c.init.noise_std = 0.5;
            let traj = run_am_problem(&pr, pr.forward_rule(), &c).unwrap();
            for (x0, cross) in traj.initial_image.data().iter().zip(&traj.crossings) {
                if *x0 < 0.0 {
                    let expected = (-x0 / (s * mu)).ceil() as i64;
                    let got = cross.expect("crossed") as i64;
                    assert!((got - expected).abs() <= 1, "s={s}: {got} vs {expected}");
                }
            }
        }
    }

    #[test]
    fn runs_are_deterministic() {
        let pr = WhiteImageProblem::conv(0.1, 0.2, 8, 8).unwrap();
        let mut c = cfg(0.5, 20, true);
        c.regularizers = vec![Regularizer::DEFAULT_BLUR, Regularizer::DEFAULT_ROTATE];
        let a = run_am_problem(&pr, ActivationRule::new(0.1, 0.5).unwrap(), &c).unwrap();
        let b = run_am_problem(&pr, ActivationRule::new(0.1, 0.5).unwrap(), &c).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn invalid_config_rejected() {
        let pr = WhiteImageProblem::f1(2, 2);
        let mut c = cfg(0.1, 0, false);
        assert!(run_am_problem(&pr, ActivationRule::relu(), &c).is_err());
        c.iterations = 1;
        c.clamp = (1.0, -1.0);
        assert!(run_am_problem(&pr, ActivationRule::relu(), &c).is_err());
    }

    #[test]
    fn proxy_sweep_beats_plain_ascent_on_conv() {
        let pr = WhiteImageProblem::conv(0.1, 0.2, 8, 8).unwrap();
        let g = pr.build_graph(pr.forward_rule()).unwrap();
        let c = cfg(0.5, 100, true);
        let pts = slope_sweep(&g, "x", &pr.shape(), &[0.1, 0.5], SweepMode::Proxy, &c).unwrap();
        assert!(pts[1].score > pts[0].score);
    }
}
