//! Straight-line layer sequences with recorded activations, used for the
//! backbone trunk and the proposal head stem.

use super::NetworkParams;
use crate::error::{Error, Result};
use crate::tensor::{
    conv2d_backward, conv2d_forward, maxpool_backward, maxpool_forward, maxpool_with_switches,
    relu_backward, relu_forward, Tensor,
};

#[derive(Debug, Clone, PartialEq)]
pub(crate) enum LayerOp {
    Conv {
        weight: String,
        bias: String,
        pad: usize,
    },
    Relu,
    MaxPool {
        win: usize,
        stride: usize,
    },
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerSpec {
    pub name: String,
    pub(crate) op: LayerOp,
}

impl LayerSpec {
    /// Stride-1 convolution reading parameters `weight` and `bias`.
    pub fn conv(name: &str, weight: &str, bias: &str, pad: usize) -> Self {
        LayerSpec {
            name: name.to_string(),
            op: LayerOp::Conv {
                weight: weight.to_string(),
                bias: bias.to_string(),
                pad,
            },
        }
    }

    pub fn relu(name: &str) -> Self {
        LayerSpec {
            name: name.to_string(),
            op: LayerOp::Relu,
        }
    }

    pub fn max_pool(name: &str, win: usize, stride: usize) -> Self {
        LayerSpec {
            name: name.to_string(),
            op: LayerOp::MaxPool { win, stride },
        }
    }
}

/// Activations of a forward pass: `activations[0]` is the input and
/// `activations[i + 1]` is the output of layer `i`.
#[derive(Debug, Clone)]
pub struct Trace {
    pub activations: Vec<Tensor>,
    pub switches: Vec<Option<Vec<usize>>>,
}

impl Trace {
    pub fn output(&self) -> &Tensor {
        self.activations
            .last()
            .expect("trace holds at least the input")
    }

    pub fn into_output(mut self) -> Tensor {
        self.activations
            .pop()
            .expect("trace holds at least the input")
    }
}

/// Runs `layers` on `input`. When `frozen` is given, pooling layers reuse the
/// stored switches instead of recomputing the window maxima.
pub(crate) fn forward(
    layers: &[LayerSpec],
    params: &NetworkParams,
    input: Tensor,
    frozen: Option<&[Option<Vec<usize>>]>,
) -> Result<Trace> {
    let mut activations = Vec::with_capacity(layers.len() + 1);
    let mut switches = Vec::with_capacity(layers.len());
    activations.push(input);
    for (i, layer) in layers.iter().enumerate() {
        let x = activations.last().unwrap();
        let (y, sw) = match &layer.op {
            LayerOp::Conv { weight, bias, pad } => (
                conv2d_forward(x, params.require(weight)?, params.require(bias)?, 1, *pad)?,
                None,
            ),
            LayerOp::Relu => (relu_forward(x), None),
            LayerOp::MaxPool { win, stride } => {
                match frozen.and_then(|f| f.get(i)).and_then(|s| s.as_ref()) {
                    Some(sw) => {
                        let (c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2]);
                        let shape = [c, (h - win) / stride + 1, (w - win) / stride + 1];
                        (maxpool_with_switches(x, sw, &shape)?, Some(sw.clone()))
                    }
                    None => {
                        let (y, sw) = maxpool_forward(x, *win, *stride)?;
                        (y, Some(sw))
                    }
                }
            }
        };
        activations.push(y);
        switches.push(sw);
    }
    Ok(Trace {
        activations,
        switches,
    })
}

/// Back-propagates `upstream` (gradient of the trace output) to the input.
/// Parameter gradients are accumulated into `grads` when given.
pub(crate) fn backward(
    layers: &[LayerSpec],
    params: &NetworkParams,
    trace: &Trace,
    upstream: Tensor,
    mut grads: Option<&mut NetworkParams>,
) -> Result<Tensor> {
    if upstream.shape() != trace.output().shape() {
        return Err(Error::invalid(format!(
            "backward: upstream {:?} vs output {:?}",
            upstream.shape(),
            trace.output().shape()
        )));
    }
    let mut g = upstream;
    for (i, layer) in layers.iter().enumerate().rev() {
        let x = &trace.activations[i];
        g = match &layer.op {
            LayerOp::Conv { weight, bias, pad } => {
                let lg = conv2d_backward(x, params.require(weight)?, &g, 1, *pad)?;
                if let Some(grads) = grads.as_deref_mut() {
                    grads.accumulate(weight, &lg.wrt_params[0]);
                    grads.accumulate(bias, &lg.wrt_params[1]);
                }
                lg.wrt_input
            }
            LayerOp::Relu => relu_backward(x, &g)?,
            LayerOp::MaxPool { .. } => {
                let sw = trace.switches[i]
                    .as_ref()
                    .expect("pooling layers record switches");
                maxpool_backward(x.shape(), sw, &g)?
            }
        };
    }
    Ok(g)
}
