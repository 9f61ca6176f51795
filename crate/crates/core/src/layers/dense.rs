use crate::error::{Error, Result};
use crate::tensor::Tensor;

fn dims(x: &Tensor, weight: &Tensor) -> Result<(usize, usize, usize)> {
    let [n, i] = *x.shape() else {
        return Err(Error::InvalidArgument(format!(
            "dense input must be (N, in), got {:?}",
            x.shape()
        )));
    };
    let [o, wi] = *weight.shape() else {
        return Err(Error::InvalidArgument(format!(
            "dense weight must be (out, in), got {:?}",
            weight.shape()
        )));
    };
    if wi != i {
        return Err(Error::ShapeMismatch {
            expected: vec![o, i],
            actual: weight.shape().to_vec(),
        });
    }
    Ok((n, i, o))
}

/// `y = x Wᵀ + b` with `x: (N, in)`, `W: (out, in)`, `b: (out)`.
pub fn dense_forward(x: &Tensor, weight: &Tensor, bias: Option<&Tensor>) -> Result<Tensor> {
    let (n, i, o) = dims(x, weight)?;
    if let Some(b) = bias {
        b.expect_shape(&[o])?;
    }
    let (xd, wd) = (x.data(), weight.data());
    let mut y = vec![0.0; n * o];
    for r in 0..n {
        let row = &xd[r * i..][..i];
        for k in 0..o {
            let w = &wd[k * i..][..i];
            let mut acc = bias.map_or(0.0, |b| b.data()[k]);
            for (a, b) in row.iter().zip(w) {
                acc += a * b;
            }
            y[r * o + k] = acc;
        }
    }
    Tensor::from_vec(&[n, o], y)
}

pub struct DenseGrads {
    pub input: Tensor,
    pub weight: Tensor,
    pub bias: Option<Tensor>,
}

pub fn dense_backward(
    x: &Tensor,
    weight: &Tensor,
    upstream: &Tensor,
    with_bias: bool,
) -> Result<DenseGrads> {
    let (n, i, o) = dims(x, weight)?;
    upstream.expect_shape(&[n, o])?;
    let (xd, wd, ud) = (x.data(), weight.data(), upstream.data());
    let mut dx = vec![0.0; n * i];
    let mut dw = vec![0.0; o * i];
    let mut db = vec![0.0; o];
    for r in 0..n {
        for k in 0..o {
            let g = ud[r * o + k];
            db[k] += g;
            let w = &wd[k * i..][..i];
            let xrow = &xd[r * i..][..i];
            let dxrow = &mut dx[r * i..][..i];
            let dwrow = &mut dw[k * i..][..i];
            for j in 0..i {
                dxrow[j] += g * w[j];
                dwrow[j] += g * xrow[j];
            }
        }
    }
    Ok(DenseGrads {
        input: Tensor::from_vec(&[n, i], dx)?,
        weight: Tensor::from_vec(&[o, i], dw)?,
        bias: if with_bias {
            Some(Tensor::from_vec(&[o], db)?)
        } else {
            None
        },
    })
}
