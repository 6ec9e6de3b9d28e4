use super::{gemm, LayerGrad, Mat, Tensor};
use crate::error::{Error, Result};

pub fn relu_forward(input: &Tensor) -> Tensor {
    let mut out = input.clone();
    for v in out.data_mut() {
        if *v < 0.0 {
            *v = 0.0;
        }
    }
    out
}

/// Passes the upstream gradient where the forward input was positive.
pub fn relu_backward(input: &Tensor, upstream: &Tensor) -> Result<Tensor> {
    if input.shape() != upstream.shape() {
        return Err(Error::invalid(format!(
            "relu backward: input {:?} vs upstream {:?}",
            input.shape(),
            upstream.shape()
        )));
    }
    let data = input
        .data()
        .iter()
        .zip(upstream.data())
        .map(|(&x, &g)| if x > 0.0 { g } else { 0.0 })
        .collect();
    Tensor::new(input.shape(), data)
}

fn fc_dims(input: &Tensor, weights: &Tensor) -> Result<(usize, usize, usize)> {
    weights.expect_rank(2, "fc weights")?;
    let (out_dim, in_dim) = (weights.shape()[0], weights.shape()[1]);
    // rank-2 inputs are batches of rows; anything else is one flattened sample
    let (batch, features) = match input.shape() {
        &[n, f] => (n, f),
        _ => (1, input.len()),
    };
    if features != in_dim {
        return Err(Error::invalid(format!(
            "fc: input has {features} features, weights expect {in_dim}"
        )));
    }
    Ok((batch, in_dim, out_dim))
}

/// Fully connected layer `y = W x + b` with weights `[out, in]`.
///
/// A rank-2 input `[N, in]` is treated as a batch and yields `[N, out]`; any
/// other input is flattened to one sample and yields `[out]`.
pub fn fc_forward(input: &Tensor, weights: &Tensor, bias: &Tensor) -> Result<Tensor> {
    let (batch, in_dim, out_dim) = fc_dims(input, weights)?;
    if bias.len() != out_dim {
        return Err(Error::invalid(format!(
            "fc: {out_dim} outputs but bias has {} entries",
            bias.len()
        )));
    }
    let mut out = Vec::with_capacity(batch * out_dim);
    for _ in 0..batch {
        out.extend_from_slice(bias.data());
    }
    gemm(
        Mat::new(input.data(), batch, in_dim),
        Mat::new(weights.data(), out_dim, in_dim).t(),
        1.0,
        &mut out,
    );
    if input.ndim() == 2 {
        Tensor::new(&[batch, out_dim], out)
    } else {
        Tensor::new(&[out_dim], out)
    }
}

/// Gradients of [`fc_forward`]; `wrt_params` is `[weights, bias]`.
pub fn fc_backward(input: &Tensor, weights: &Tensor, upstream: &Tensor) -> Result<LayerGrad> {
    let (batch, in_dim, out_dim) = fc_dims(input, weights)?;
    if upstream.len() != batch * out_dim {
        return Err(Error::invalid(format!(
            "fc backward: upstream has {} values, expected {}",
            upstream.len(),
            batch * out_dim
        )));
    }
    let up = Mat::new(upstream.data(), batch, out_dim);
    let mut d_w = vec![0.0; out_dim * in_dim];
    gemm(up.t(), Mat::new(input.data(), batch, in_dim), 0.0, &mut d_w);
    let mut d_b = vec![0.0; out_dim];
    for row in upstream.data().chunks(out_dim) {
        for (d, g) in d_b.iter_mut().zip(row) {
            *d += g;
        }
    }
    let mut d_x = vec![0.0; batch * in_dim];
    gemm(up, Mat::new(weights.data(), out_dim, in_dim), 0.0, &mut d_x);
    Ok(LayerGrad {
        wrt_input: Tensor::new(input.shape(), d_x)?,
        wrt_params: vec![
            Tensor::new(weights.shape(), d_w)?,
            Tensor::new(&[out_dim], d_b)?,
        ],
    })
}

/// Two-class softmax, stable for arbitrarily large logits.
pub fn softmax2(logits: [f64; 2]) -> [f64; 2] {
    let m = logits[0].max(logits[1]);
    let e0 = (logits[0] - m).exp();
    let e1 = (logits[1] - m).exp();
    let s = e0 + e1;
    [e0 / s, e1 / s]
}
