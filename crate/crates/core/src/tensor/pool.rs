use super::{conv_output_size, Tensor};
use crate::error::{Error, Result};

/// Max pooling over `win × win` windows of a `[C,H,W]` tensor.
///
/// Returns the pooled tensor and, for each output element, the flat index of
/// the input element that produced it. Ties go to the first element in
/// row-major order.
pub fn maxpool_forward(input: &Tensor, win: usize, stride: usize) -> Result<(Tensor, Vec<usize>)> {
    input.expect_rank(3, "maxpool input")?;
    let &[c, h, w] = input.shape() else {
        unreachable!()
    };
    let (Some(oh), Some(ow)) = (
        conv_output_size(h, win, stride, 0),
        conv_output_size(w, win, stride, 0),
    ) else {
        return Err(Error::invalid(format!(
            "maxpool: window {win} stride {stride} does not fit {h}x{w}"
        )));
    };
    let src = input.data();
    let mut out = Vec::with_capacity(c * oh * ow);
    let mut switches = Vec::with_capacity(c * oh * ow);
    for ch in 0..c {
        let base = ch * h * w;
        for oy in 0..oh {
            for ox in 0..ow {
                let mut best = base + oy * stride * w + ox * stride;
                for dy in 0..win {
                    let row = base + (oy * stride + dy) * w + ox * stride;
                    for idx in row..row + win {
                        if src[idx] > src[best] {
                            best = idx;
                        }
                    }
                }
                out.push(src[best]);
                switches.push(best);
            }
        }
    }
    Ok((Tensor::new(&[c, oh, ow], out)?, switches))
}

/// Re-applies previously recorded switches: each output takes the input value
/// at its stored index, whether or not that is still the window maximum.
pub fn maxpool_with_switches(
    input: &Tensor,
    switches: &[usize],
    out_shape: &[usize],
) -> Result<Tensor> {
    if switches.iter().any(|&i| i >= input.len()) {
        return Err(Error::invalid("maxpool switches out of range for input"));
    }
    let data = switches.iter().map(|&i| input.data()[i]).collect();
    Tensor::new(out_shape, data)
}

/// Routes each upstream element to the input position recorded in `switches`.
pub fn maxpool_backward(
    input_shape: &[usize],
    switches: &[usize],
    upstream: &Tensor,
) -> Result<Tensor> {
    if switches.len() != upstream.len() {
        return Err(Error::invalid(format!(
            "maxpool backward: {} switches for {} upstream values",
            switches.len(),
            upstream.len()
        )));
    }
    let mut grad = Tensor::new(input_shape, vec![0.0; input_shape.iter().product()])?;
    let g = grad.data_mut();
    for (&idx, &u) in switches.iter().zip(upstream.data()) {
        if idx >= g.len() {
            return Err(Error::invalid("maxpool switches out of range for input"));
        }
        g[idx] += u;
    }
    Ok(grad)
}
