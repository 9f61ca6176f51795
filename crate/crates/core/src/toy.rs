//! White image problems: scalar objectives over a single-channel image in
//! `[-1, 1]^{H×W}` whose maximizer is (up to border effects) the all-ones image.
//!
//! * `F1 = Σ ReLU(x)` – sparse gradients freeze negative pixels.
//! * `F2 = Σ LReLU_s(x)` – negative pixels climb `1/s` times slower.
//! * `F3 = Σ LReLU_s(x) + LReLU_s(-p x)`, `1 > p > s > 0` – every negative
//!   pixel sits in the basin of a local maximum at `-1`.
//! * `Conv = Σ LReLU_s(x ⋆ K)` with `K = [[0,0,0],[1,0,-p],[0,0,0]]` applied
//!   without horizontal padding; the same trap arises through the kernel.
//!
//! [`WhiteImageProblem::eval`] and [`WhiteImageProblem::analytic_grad`] are
//! written pixel by pixel and never touch the graph engine, so they serve as
//! the reference for [`WhiteImageProblem::build_graph`].

use serde::{Deserialize, Serialize};

use crate::autograd::Graph;
use crate::error::{Error, Result};
use crate::layers::activation::rectify;
use crate::layers::{ActivationRule, Conv2dSpec, Padding};
use crate::tensor::Tensor;

pub const DEFAULT_SIZE: usize = 32;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ProblemKind {
    F1,
    F2,
    F3,
    Conv,
}

impl std::str::FromStr for ProblemKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "f1" => Ok(Self::F1),
            "f2" => Ok(Self::F2),
            "f3" => Ok(Self::F3),
            "conv" => Ok(Self::Conv),
            other => Err(Error::InvalidArgument(format!("unknown problem `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WhiteImageProblem {
    pub kind: ProblemKind,
    /// Negative slope of the objective's rectifiers; 0 for `F1`.
    pub slope: f64,
    /// Scale of the competing term; used by `F3` and `Conv`.
    pub p: f64,
    pub height: usize,
    pub width: usize,
}

impl WhiteImageProblem {
    pub fn new(kind: ProblemKind, slope: f64, p: f64, height: usize, width: usize) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(Error::InvalidShape(vec![1, height, width]));
        }
        let slope = if kind == ProblemKind::F1 { 0.0 } else { slope };
        if !(0.0..=1.0).contains(&slope) {
            return Err(Error::InvalidArgument(format!("slope {slope} outside [0, 1]")));
        }
        if matches!(kind, ProblemKind::F3 | ProblemKind::Conv) && !(1.0 > p && p > slope && slope > 0.0) {
            return Err(Error::InvalidArgument(format!(
                "{kind:?} needs 1 > p > s > 0, got p = {p}, s = {slope}"
            )));
        }
        if kind == ProblemKind::Conv && width < 3 {
            return Err(Error::InvalidArgument("conv problem needs width >= 3".into()));
        }
        Ok(Self {
            kind,
            slope,
            p,
            height,
            width,
        })
    }

    pub fn f1(height: usize, width: usize) -> Self {
        Self::new(ProblemKind::F1, 0.0, 0.0, height, width).expect("valid f1")
    }

    pub fn f2(slope: f64, height: usize, width: usize) -> Result<Self> {
        Self::new(ProblemKind::F2, slope, 0.0, height, width)
    }

    pub fn f3(slope: f64, p: f64, height: usize, width: usize) -> Result<Self> {
        Self::new(ProblemKind::F3, slope, p, height, width)
    }

    pub fn conv(slope: f64, p: f64, height: usize, width: usize) -> Result<Self> {
        Self::new(ProblemKind::Conv, slope, p, height, width)
    }

    pub fn shape(&self) -> [usize; 3] {
        [1, self.height, self.width]
    }

    pub fn pixels(&self) -> usize {
        self.height * self.width
    }

    /// Forward rule of the objective itself.
    pub fn forward_rule(&self) -> ActivationRule {
        ActivationRule {
            forward_slope: self.slope,
            backward_slope: self.slope,
        }
    }

    fn check_input(&self, x: &Tensor) -> Result<()> {
        x.expect_shape(&self.shape())?;
        if let Some((index, &value)) = x
            .data()
            .iter()
            .enumerate()
            .find(|(_, v)| !(-1.0..=1.0).contains(*v))
        {
            return Err(Error::OutOfRange { index, value });
        }
        Ok(())
    }

    /// Argument of the conv objective's rectifier at output `(i, j)`.
    fn conv_arg(&self, x: &[f64], i: usize, j: usize) -> f64 {
        let w = self.width;
        x[i * w + j] - self.p * x[i * w + j + 2]
    }

    pub fn eval(&self, x: &Tensor) -> Result<f64> {
        self.check_input(x)?;
        let s = self.slope;
        let d = x.data();
        Ok(match self.kind {
            ProblemKind::F1 | ProblemKind::F2 => d.iter().map(|&v| rectify(v, s)).sum(),
            ProblemKind::F3 => d
                .iter()
                .map(|&v| rectify(v, s) + rectify(-self.p * v, s))
                .sum(),
            ProblemKind::Conv => {
                let mut total = 0.0;
                for i in 0..self.height {
                    for j in 0..self.width - 2 {
                        total += rectify(self.conv_arg(d, i, j), s);
                    }
                }
                total
            }
        })
    }

    /// Exact per-pixel derivative; fails on the first pixel sitting on a kink.
    pub fn analytic_grad(&self, x: &Tensor) -> Result<Tensor> {
        self.check_input(x)?;
        let s = self.slope;
        let d = x.data();
        let slope_at = |arg: f64, index: usize| -> Result<f64> {
            if arg == 0.0 {
                Err(Error::KinkPixel { index })
            } else if arg > 0.0 {
                Ok(1.0)
            } else {
                Ok(s)
            }
        };
        let mut g = vec![0.0; d.len()];
        match self.kind {
            ProblemKind::F1 | ProblemKind::F2 => {
                for (i, &v) in d.iter().enumerate() {
                    g[i] = slope_at(v, i)?;
                }
            }
            ProblemKind::F3 => {
                for (i, &v) in d.iter().enumerate() {
                    g[i] = slope_at(v, i)? - self.p * slope_at(-self.p * v, i)?;
                }
            }
            ProblemKind::Conv => {
                let w = self.width;
                for i in 0..self.height {
                    for j in 0..w - 2 {
                        let k = slope_at(self.conv_arg(d, i, j), i * w + j)?;
                        g[i * w + j] += k;
                        g[i * w + j + 2] -= self.p * k;
                    }
                }
            }
        }
        Tensor::from_vec(&self.shape(), g)
    }

    /// Graph with input `"x"` of shape `(1, H, W)`. The rule's forward slope
    /// must equal the objective's slope; its backward slope is free.
    pub fn build_graph(&self, rule: ActivationRule) -> Result<Graph> {
        if rule.forward_slope != self.slope {
            return Err(Error::InvalidArgument(format!(
                "rule forward slope {} differs from the objective slope {}",
                rule.forward_slope, self.slope
            )));
        }
        let mut g = Graph::new();
        let x = g.input("x");
        let total = match self.kind {
            ProblemKind::F1 | ProblemKind::F2 => {
                let a = g.activation(x, rule);
                g.sum(a)
            }
            ProblemKind::F3 => {
                let a = g.activation(x, rule);
                let neg = g.scale(x, -self.p);
                let b = g.activation(neg, rule);
                let both = g.add(a, b);
                g.sum(both)
            }
            ProblemKind::Conv => {
                let kernel = Tensor::from_vec(
                    &[1, 1, 3, 3],
                    vec![0.0, 0.0, 0.0, 1.0, 0.0, -self.p, 0.0, 0.0, 0.0],
                )?;
                let k = g.frozen_param("kernel", kernel);
                // The zero top/bottom kernel rows only see padding, so every
                // image row yields W - 2 outputs.
                let spec = Conv2dSpec {
                    stride: 1,
                    padding: Padding::Explicit { h: 1, w: 0 },
                };
                let c = g.conv2d(x, k, None, spec);
                g.set_label(c, "conv");
                let a = g.activation(c, rule);
                g.sum(a)
            }
        };
        g.set_output(total);
        Ok(g)
    }

    /// The all-ones image and its objective value.
    pub fn optimum(&self) -> (Tensor, f64) {
        let ones = Tensor::ones(&self.shape()).expect("positive extents");
        let f = self.eval(&ones).expect("ones lie in range");
        (ones, f)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autograd::{Bindings, Mode};
    use crate::rng::Rng;
    use proptest::prelude::*;

    fn img(h: usize, w: usize, v: Vec<f64>) -> Tensor {
        Tensor::from_vec(&[1, h, w], v).unwrap()
    }

    fn graph_grad(problem: &WhiteImageProblem, rule: ActivationRule, x: &Tensor) -> (f64, Tensor) {
        let g = problem.build_graph(rule).unwrap();
        let (v, tape) = g
            .forward(&Bindings::new().with("x", x.clone()), Mode::Eval)
            .unwrap();
        (v, g.backward(&tape, 1.0).unwrap().input("x").unwrap().clone())
    }

    #[test]
    fn eval_examples() {
        let f1 = WhiteImageProblem::f1(4, 4);
        assert_eq!(f1.eval(&Tensor::ones(&[1, 4, 4]).unwrap()).unwrap(), 16.0);
        let f3 = WhiteImageProblem::f3(0.1, 0.2, 1, 1).unwrap();
        assert!((f3.eval(&img(1, 1, vec![1.0])).unwrap() - 0.98).abs() < 1e-15);
        assert!((f3.eval(&img(1, 1, vec![-1.0])).unwrap() - 0.1).abs() < 1e-15);
    }

    #[test]
    fn out_of_range_rejected() {
        let f1 = WhiteImageProblem::f1(1, 2);
        assert!(matches!(
            f1.eval(&img(1, 2, vec![0.5, 1.5])),
            Err(Error::OutOfRange { index: 1, .. })
        ));
    }

    #[test]
    fn parameter_ordering_enforced() {
        assert!(WhiteImageProblem::f3(0.3, 0.2, 4, 4).is_err());
        assert!(WhiteImageProblem::f3(0.0, 0.2, 4, 4).is_err());
        assert!(WhiteImageProblem::conv(0.1, 1.0, 4, 4).is_err());
        assert!(WhiteImageProblem::conv(0.1, 0.2, 4, 4).is_ok());
    }

    #[test]
    fn analytic_grad_examples() {
        let f3 = WhiteImageProblem::f3(0.1, 0.2, 1, 2).unwrap();
        let g = f3.analytic_grad(&img(1, 2, vec![0.4, -0.4])).unwrap();
        assert!((g.data()[0] - 0.98).abs() < 1e-15);
        assert!((g.data()[1] + 0.1).abs() < 1e-15);
        let f1 = WhiteImageProblem::f1(1, 1);
        assert_eq!(f1.analytic_grad(&img(1, 1, vec![-0.3])).unwrap().data(), &[0.0]);
        assert!(matches!(
            f1.analytic_grad(&img(1, 1, vec![0.0])),
            Err(Error::KinkPixel { index: 0 })
        ));
    }

    #[test]
    fn build_graph_examples() {
        let f2 = WhiteImageProblem::f2(0.1, 1, 2).unwrap();
        let (_, g) = graph_grad(&f2, ActivationRule::leaky(0.1).unwrap(), &img(1, 2, vec![-0.5, 0.5]));
        assert_eq!(g.data(), &[0.1, 1.0]);

        let f3 = WhiteImageProblem::f3(0.1, 0.2, 1, 1).unwrap();
        let (_, g) = graph_grad(&f3, ActivationRule::new(0.1, 0.5).unwrap(), &img(1, 1, vec![-0.3]));
        assert!((g.data()[0] - 0.3).abs() < 1e-15);

        let conv = WhiteImageProblem::conv(0.1, 0.2, 5, 7).unwrap();
        let (v, _) = graph_grad(&conv, conv.forward_rule(), &Tensor::ones(&[1, 5, 7]).unwrap());
        assert!((v - 0.8 * 5.0 * 5.0).abs() < 1e-12);
    }

    #[test]
    fn mismatched_forward_slope_rejected() {
        let f2 = WhiteImageProblem::f2(0.1, 2, 2).unwrap();
        assert!(f2.build_graph(ActivationRule::relu()).is_err());
    }

    #[test]
    fn optimum_examples() {
        assert_eq!(WhiteImageProblem::f1(8, 8).optimum().1, 64.0);
        let (_, f) = WhiteImageProblem::f3(0.1, 0.2, 8, 8).unwrap().optimum();
        assert!((f - 62.72).abs() < 1e-12);
        let (_, f) = WhiteImageProblem::conv(0.1, 0.2, 8, 8).unwrap().optimum();
        assert!((f - 38.4).abs() < 1e-12);
    }

    fn random_problem(kind: ProblemKind, h: usize, w: usize) -> WhiteImageProblem {
        WhiteImageProblem::new(kind, 0.1, 0.2, h, w).unwrap()
    }

    #[test]
    fn ones_beat_random_images() {
        let mut rng = Rng::new(99);
        for kind in [ProblemKind::F1, ProblemKind::F2, ProblemKind::F3, ProblemKind::Conv] {
            let pr = random_problem(kind, 6, 6);
            let (_, best) = pr.optimum();
            for _ in 0..1000 {
                let x = img(6, 6, (0..36).map(|_| rng.uniform(-1.0, 1.0)).collect());
                assert!(pr.eval(&x).unwrap() <= best, "{kind:?}");
            }
        }
    }

    proptest! {
        #[test]
        fn graph_backward_equals_analytic_grad(
            kind in prop_oneof![Just(ProblemKind::F1), Just(ProblemKind::F2), Just(ProblemKind::F3), Just(ProblemKind::Conv)],
            v in proptest::collection::vec(-1.0f64..1.0, 20),
        ) {
            let pr = random_problem(kind, 4, 5);
            let x = img(4, 5, v);
            if let Ok(expected) = pr.analytic_grad(&x) {
                let (val, got) = graph_grad(&pr, pr.forward_rule(), &x);
                prop_assert!((val - pr.eval(&x).unwrap()).abs() < 1e-12);
                for (a, b) in got.data().iter().zip(expected.data()) {
                    prop_assert!((a - b).abs() < 1e-15, "{} vs {}", a, b);
                }
            }
        }

        #[test]
        fn f3_gradient_sign_traps_pixels(v in proptest::collection::vec(prop_oneof![-1.0f64..-1e-9, 1e-9f64..1.0], 16),
                                         s in 0.01f64..0.4, dp in 0.01f64..0.5) {
            let p = (s + dp).min(0.99);
            prop_assume!(p > s);
            let pr = WhiteImageProblem::f3(s, p, 4, 4).unwrap();
            let x = img(4, 4, v.clone());
            let g = pr.analytic_grad(&x).unwrap();
            for (xi, gi) in v.iter().zip(g.data()) {
                prop_assert_eq!(xi.signum(), gi.signum());
            }
        }

        #[test]
        fn proxy_escape_sign(sb in 0.0f64..=1.0, v in -1.0f64..-1e-6) {
            let pr = WhiteImageProblem::f3(0.1, 0.2, 1, 1).unwrap();
            prop_assume!((sb - 0.2).abs() > 1e-12);
            let (_, g) = graph_grad(&pr, ActivationRule::new(0.1, sb).unwrap(), &img(1, 1, vec![v]));
            prop_assert_eq!(g.data()[0] > 0.0, sb > 0.2);
        }
    }
}
