use crate::error::{Error, Result};
use crate::tensor::Tensor;

fn nchw(x: &Tensor, what: &str) -> Result<(usize, usize, usize, usize)> {
    match *x.shape() {
        [n, c, h, w] => Ok((n, c, h, w)),
        _ => Err(Error::InvalidArgument(format!(
            "{what} input must be (N,C,H,W), got {:?}",
            x.shape()
        ))),
    }
}

/// Max pooling with a square window and no padding; returns the output and
/// the flat input offset chosen for every output element (first max wins).
pub fn maxpool2d_forward(x: &Tensor, size: usize, stride: usize) -> Result<(Tensor, Vec<usize>)> {
    let (n, c, h, w) = nchw(x, "maxpool2d")?;
    if size == 0 || stride == 0 || size > h || size > w {
        return Err(Error::InvalidArgument(format!(
            "maxpool2d window {size} / stride {stride} invalid for {h}x{w}"
        )));
    }
    let oh = (h - size) / stride + 1;
    let ow = (w - size) / stride + 1;
    let xd = x.data();
    let mut out = Vec::with_capacity(n * c * oh * ow);
    let mut argmax = Vec::with_capacity(n * c * oh * ow);
    for plane in 0..n * c {
        let base = plane * h * w;
        for oy in 0..oh {
            for ox in 0..ow {
                let mut best = base + oy * stride * w + ox * stride;
                for dy in 0..size {
                    for dx in 0..size {
                        let idx = base + (oy * stride + dy) * w + ox * stride + dx;
                        if xd[idx] > xd[best] {
                            best = idx;
                        }
                    }
                }
                out.push(xd[best]);
                argmax.push(best);
            }
        }
    }
    Ok((Tensor::from_vec(&[n, c, oh, ow], out)?, argmax))
}

pub fn maxpool2d_backward(input_shape: &[usize], argmax: &[usize], upstream: &Tensor) -> Result<Tensor> {
    if argmax.len() != upstream.len() {
        return Err(Error::InvalidArgument(
            "maxpool2d cache does not match upstream gradient".into(),
        ));
    }
    let mut dx = Tensor::zeros(input_shape)?;
    let d = dx.data_mut();
    for (&idx, &g) in argmax.iter().zip(upstream.data()) {
        d[idx] += g;
    }
    Ok(dx)
}

/// `(N, C, H, W) -> (N, C)` spatial mean.
pub fn global_avg_pool_forward(x: &Tensor) -> Result<Tensor> {
    let (n, c, h, w) = nchw(x, "global_avg_pool")?;
    let sp = h * w;
    let out = x
        .data()
        .chunks_exact(sp)
        .map(|plane| plane.iter().sum::<f64>() / sp as f64)
        .collect();
    Tensor::from_vec(&[n, c], out)
}

pub fn global_avg_pool_backward(input_shape: &[usize], upstream: &Tensor) -> Result<Tensor> {
    let [n, c, h, w] = *input_shape else {
        return Err(Error::InvalidArgument("global_avg_pool cache shape".into()));
    };
    upstream.expect_shape(&[n, c])?;
    let sp = h * w;
    let mut dx = Vec::with_capacity(n * c * sp);
    for &g in upstream.data() {
        dx.extend(std::iter::repeat(g / sp as f64).take(sp));
    }
    Tensor::from_vec(input_shape, dx)
}
