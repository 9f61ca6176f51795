//! 2-D cross-correlation (the kernel is not flipped).

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Padding {
    #[default]
    Valid,
    /// `k / 2` zeros on every side; odd kernels only.
    Same,
    /// Explicit zero rows (`h`) and columns (`w`) on each side.
    Explicit { h: usize, w: usize },
}

impl Padding {
    pub fn resolve(self, kh: usize, kw: usize) -> Result<(usize, usize)> {
        match self {
            Padding::Valid => Ok((0, 0)),
            Padding::Same => {
                if kh % 2 == 0 || kw % 2 == 0 {
                    return Err(Error::InvalidArgument(format!(
                        "same padding needs an odd kernel, got {kh}x{kw}"
                    )));
                }
                Ok((kh / 2, kw / 2))
            }
            Padding::Explicit { h, w } => Ok((h, w)),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Conv2dSpec {
    pub stride: usize,
    pub padding: Padding,
}

impl Default for Conv2dSpec {
    fn default() -> Self {
        Self {
            stride: 1,
            padding: Padding::Valid,
        }
    }
}

/// Resolved geometry of one convolution call.
#[derive(Debug, Clone, Copy)]
struct Geometry {
    n: usize,
    c: usize,
    h: usize,
    w: usize,
    o: usize,
    kh: usize,
    kw: usize,
    oh: usize,
    ow: usize,
    stride: usize,
    ph: usize,
    pw: usize,
    batched: bool,
}

fn geometry(x: &Tensor, kernel: &Tensor, spec: Conv2dSpec) -> Result<Geometry> {
    let (n, c, h, w, batched) = match *x.shape() {
        [c, h, w] => (1, c, h, w, false),
        [n, c, h, w] => (n, c, h, w, true),
        _ => {
            return Err(Error::InvalidArgument(format!(
                "conv2d input must be (C,H,W) or (N,C,H,W), got {:?}",
                x.shape()
            )))
        }
    };
    let [o, kc, kh, kw] = *kernel.shape() else {
        return Err(Error::InvalidArgument(format!(
            "conv2d kernel must be (O,C,kH,kW), got {:?}",
            kernel.shape()
        )));
    };
    if kc != c {
        return Err(Error::ShapeMismatch {
            expected: vec![o, c, kh, kw],
            actual: kernel.shape().to_vec(),
        });
    }
    if spec.stride == 0 {
        return Err(Error::InvalidArgument("stride must be >= 1".into()));
    }
    let (ph, pw) = spec.padding.resolve(kh, kw)?;
    if h + 2 * ph < kh || w + 2 * pw < kw {
        return Err(Error::InvalidArgument(format!(
            "kernel {kh}x{kw} larger than padded input {}x{}",
            h + 2 * ph,
            w + 2 * pw
        )));
    }
    let oh = (h + 2 * ph - kh) / spec.stride + 1;
    let ow = (w + 2 * pw - kw) / spec.stride + 1;
    Ok(Geometry {
        n,
        c,
        h,
        w,
        o,
        kh,
        kw,
        oh,
        ow,
        stride: spec.stride,
        ph,
        pw,
        batched,
    })
}

impl Geometry {
    fn out_shape(&self) -> Vec<usize> {
        if self.batched {
            vec![self.n, self.o, self.oh, self.ow]
        } else {
            vec![self.o, self.oh, self.ow]
        }
    }

    /// Input column for output column `ox` and kernel column `kj`, if in bounds.
    #[inline]
    fn in_col(&self, ox: usize, kj: usize) -> Option<usize> {
        (ox * self.stride + kj).checked_sub(self.pw).filter(|&ix| ix < self.w)
    }

    #[inline]
    fn in_row(&self, oy: usize, ki: usize) -> Option<usize> {
        (oy * self.stride + ki).checked_sub(self.ph).filter(|&iy| iy < self.h)
    }

    /// Range of output columns whose input column for kernel column `kj` is in bounds.
    fn col_range(&self, kj: usize) -> (usize, usize) {
        let lo = (0..self.ow).find(|&ox| self.in_col(ox, kj).is_some());
        match lo {
            None => (0, 0),
            Some(lo) => {
                let hi = (lo..self.ow)
                    .take_while(|&ox| self.in_col(ox, kj).is_some())
                    .last()
                    .map_or(lo, |v| v + 1);
                (lo, hi)
            }
        }
    }
}

/// Cross-correlation of `x` with `kernel` (shape `(O, C, kH, kW)`), plus optional per-channel bias.
pub fn conv2d_forward(
    x: &Tensor,
    kernel: &Tensor,
    bias: Option<&Tensor>,
    spec: Conv2dSpec,
) -> Result<Tensor> {
    let g = geometry(x, kernel, spec)?;
    if let Some(b) = bias {
        b.expect_shape(&[g.o])?;
    }
    let xd = x.data();
    let kd = kernel.data();
    let mut out = vec![0.0; g.n * g.o * g.oh * g.ow];
    let col_ranges: Vec<_> = (0..g.kw).map(|kj| g.col_range(kj)).collect();
    for n in 0..g.n {
        for o in 0..g.o {
            let plane = &mut out[(n * g.o + o) * g.oh * g.ow..][..g.oh * g.ow];
            if let Some(b) = bias {
                plane.fill(b.data()[o]);
            }
            for c in 0..g.c {
                let xin = &xd[(n * g.c + c) * g.h * g.w..][..g.h * g.w];
                for ki in 0..g.kh {
                    for kj in 0..g.kw {
                        let wv = kd[((o * g.c + c) * g.kh + ki) * g.kw + kj];
                        if wv == 0.0 {
                            continue;
                        }
                        let (lo, hi) = col_ranges[kj];
                        for oy in 0..g.oh {
                            let Some(iy) = g.in_row(oy, ki) else { continue };
                            let row = &xin[iy * g.w..][..g.w];
                            let orow = &mut plane[oy * g.ow..][..g.ow];
                            for ox in lo..hi {
                                let ix = ox * g.stride + kj - g.pw;
                                orow[ox] += wv * row[ix];
                            }
                        }
                    }
                }
            }
        }
    }
    Tensor::from_vec(&g.out_shape(), out)
}

/// Gradients of a convolution: `(d_input, d_kernel, d_bias)`.
pub struct Conv2dGrads {
    pub input: Tensor,
    pub kernel: Tensor,
    pub bias: Option<Tensor>,
}

pub fn conv2d_backward(
    x: &Tensor,
    kernel: &Tensor,
    upstream: &Tensor,
    with_bias: bool,
    spec: Conv2dSpec,
) -> Result<Conv2dGrads> {
    let g = geometry(x, kernel, spec)?;
    upstream.expect_shape(&g.out_shape())?;
    let xd = x.data();
    let kd = kernel.data();
    let ud = upstream.data();
    let mut dx = vec![0.0; xd.len()];
    let mut dk = vec![0.0; kd.len()];
    let mut db = vec![0.0; g.o];
    let col_ranges: Vec<_> = (0..g.kw).map(|kj| g.col_range(kj)).collect();
    for n in 0..g.n {
        for o in 0..g.o {
            let up = &ud[(n * g.o + o) * g.oh * g.ow..][..g.oh * g.ow];
            if with_bias {
                db[o] += up.iter().sum::<f64>();
            }
            for c in 0..g.c {
                let base = (n * g.c + c) * g.h * g.w;
                for ki in 0..g.kh {
                    for kj in 0..g.kw {
                        let kidx = ((o * g.c + c) * g.kh + ki) * g.kw + kj;
                        let wv = kd[kidx];
                        let (lo, hi) = col_ranges[kj];
                        let mut acc = 0.0;
                        for oy in 0..g.oh {
                            let Some(iy) = g.in_row(oy, ki) else { continue };
                            let urow = &up[oy * g.ow..][..g.ow];
                            let xrow = &xd[base + iy * g.w..][..g.w];
                            let dxrow = &mut dx[base + iy * g.w..][..g.w];
                            for ox in lo..hi {
                                let ix = ox * g.stride + kj - g.pw;
                                acc += xrow[ix] * urow[ox];
                                dxrow[ix] += wv * urow[ox];
                            }
                        }
                        dk[kidx] += acc;
                    }
                }
            }
        }
    }
    Ok(Conv2dGrads {
        input: Tensor::from_vec(x.shape(), dx)?,
        kernel: Tensor::from_vec(kernel.shape(), dk)?,
        bias: if with_bias {
            Some(Tensor::from_vec(&[g.o], db)?)
        } else {
            None
        },
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;

    fn white_kernel(p: f64) -> Tensor {
        Tensor::from_vec(
            &[1, 1, 3, 3],
            vec![0.0, 0.0, 0.0, 1.0, 0.0, -p, 0.0, 0.0, 0.0],
        )
        .unwrap()
    }

    #[test]
    fn table_kernel_on_ones() {
        let x = Tensor::ones(&[1, 3, 3]).unwrap();
        let y = conv2d_forward(&x, &white_kernel(0.2), None, Conv2dSpec::default()).unwrap();
        assert_eq!(y.shape(), &[1, 1, 1]);
        assert!((y.data()[0] - 0.8).abs() < 1e-15);
    }

    #[test]
    fn no_kernel_flip() {
        // Output (0,0) reads x[1][0] with weight 1 and x[1][2] with weight -p.
        let x = Tensor::from_vec(&[1, 3, 3], (0..9).map(f64::from).collect()).unwrap();
        let y = conv2d_forward(&x, &white_kernel(0.5), None, Conv2dSpec::default()).unwrap();
        assert_eq!(y.data()[0], 3.0 - 0.5 * 5.0);
    }

    #[test]
    fn identity_kernel() {
        let mut rng = Rng::new(3);
        let x = Tensor::gaussian(&[2, 2, 4, 5], 0.0, 1.0, &mut rng).unwrap();
        let mut k = vec![0.0; 4];
        k[0] = 1.0;
        k[3] = 1.0;
        let kernel = Tensor::from_vec(&[2, 2, 1, 1], k).unwrap();
        let y = conv2d_forward(&x, &kernel, None, Conv2dSpec::default()).unwrap();
        assert_eq!(y, x);
    }

    #[test]
    fn output_sizes() {
        let x = Tensor::zeros(&[1, 2, 8, 7]).unwrap();
        let k = Tensor::zeros(&[3, 2, 3, 3]).unwrap();
        let valid = conv2d_forward(&x, &k, None, Conv2dSpec::default()).unwrap();
        assert_eq!(valid.shape(), &[1, 3, 6, 5]);
        let same = Conv2dSpec {
            stride: 1,
            padding: Padding::Same,
        };
        assert_eq!(conv2d_forward(&x, &k, None, same).unwrap().shape(), &[1, 3, 8, 7]);
        let strided = Conv2dSpec {
            stride: 2,
            padding: Padding::Same,
        };
        assert_eq!(
            conv2d_forward(&x, &k, None, strided).unwrap().shape(),
            &[1, 3, 4, 4]
        );
    }

    #[test]
    fn channel_mismatch() {
        let x = Tensor::zeros(&[1, 2, 4, 4]).unwrap();
        let k = Tensor::zeros(&[1, 3, 3, 3]).unwrap();
        assert!(conv2d_forward(&x, &k, None, Conv2dSpec::default()).is_err());
    }

    #[test]
    fn bias_is_added() {
        let x = Tensor::zeros(&[1, 1, 3, 3]).unwrap();
        let k = Tensor::zeros(&[2, 1, 3, 3]).unwrap();
        let b = Tensor::from_vec(&[2], vec![0.5, -1.0]).unwrap();
        let y = conv2d_forward(&x, &k, Some(&b), Conv2dSpec::default()).unwrap();
        assert_eq!(y.data(), &[0.5, -1.0]);
    }

    fn fd_check(spec: Conv2dSpec, seed: u64) {
        let mut rng = Rng::new(seed);
        let x = Tensor::gaussian(&[2, 2, 5, 5], 0.0, 1.0, &mut rng).unwrap();
        let k = Tensor::gaussian(&[3, 2, 3, 3], 0.0, 1.0, &mut rng).unwrap();
        let b = Tensor::gaussian(&[3], 0.0, 1.0, &mut rng).unwrap();
        let y0 = conv2d_forward(&x, &k, Some(&b), spec).unwrap();
        let up = Tensor::gaussian(y0.shape(), 0.0, 1.0, &mut rng).unwrap();
        let loss = |x: &Tensor, k: &Tensor, b: &Tensor| {
            let y = conv2d_forward(x, k, Some(b), spec).unwrap();
            y.mul(&up).unwrap().sum()
        };
        let grads = conv2d_backward(&x, &k, &up, true, spec).unwrap();
        let eps = 1e-6;
        let check = |analytic: f64, plus: f64, minus: f64| {
            let fd = (plus - minus) / (2.0 * eps);
            let err = (fd - analytic).abs() / fd.abs().max(analytic.abs()).max(1e-8);
            assert!(err < 1e-5, "fd {fd} vs analytic {analytic}");
        };
        for i in 0..x.len() {
            let mut p = x.clone();
            p.data_mut()[i] += eps;
            let mut m = x.clone();
            m.data_mut()[i] -= eps;
            check(grads.input.data()[i], loss(&p, &k, &b), loss(&m, &k, &b));
        }
        for i in 0..k.len() {
            let mut p = k.clone();
            p.data_mut()[i] += eps;
            let mut m = k.clone();
            m.data_mut()[i] -= eps;
            check(grads.kernel.data()[i], loss(&x, &p, &b), loss(&x, &m, &b));
        }
        let db = grads.bias.unwrap();
        for i in 0..b.len() {
            let mut p = b.clone();
            p.data_mut()[i] += eps;
            let mut m = b.clone();
            m.data_mut()[i] -= eps;
            check(db.data()[i], loss(&x, &k, &p), loss(&x, &k, &m));
        }
    }

    #[test]
    fn gradients_match_finite_differences() {
        fd_check(Conv2dSpec::default(), 1);
        fd_check(
            Conv2dSpec {
                stride: 2,
                padding: Padding::Same,
            },
            2,
        );
        fd_check(
            Conv2dSpec {
                stride: 1,
                padding: Padding::Explicit { h: 1, w: 0 },
            },
            3,
        );
    }

    #[test]
    fn kernel_gradient_on_single_image() {
        let mut rng = Rng::new(11);
        let x = Tensor::gaussian(&[1, 4, 4], 0.0, 1.0, &mut rng).unwrap();
        let k = Tensor::gaussian(&[1, 1, 3, 3], 0.0, 1.0, &mut rng).unwrap();
        let up = Tensor::ones(&[1, 2, 2]).unwrap();
        let g = conv2d_backward(&x, &k, &up, false, Conv2dSpec::default()).unwrap();
        let eps = 1e-6;
        for i in 0..k.len() {
            let mut p = k.clone();
            p.data_mut()[i] += eps;
            let mut m = k.clone();
            m.data_mut()[i] -= eps;
            let fp = conv2d_forward(&x, &p, None, Conv2dSpec::default()).unwrap().sum();
            let fm = conv2d_forward(&x, &m, None, Conv2dSpec::default()).unwrap().sum();
            let fd = (fp - fm) / (2.0 * eps);
            assert!((fd - g.kernel.data()[i]).abs() <= 1e-5 * fd.abs().max(1.0));
        }
    }
}
