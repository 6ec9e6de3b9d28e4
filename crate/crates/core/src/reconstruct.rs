//! Recovering an input image whose activations at a chosen layer match a
//! stored target, by L-BFGS on the squared activation error.

use crate::error::{Error, Result};
use crate::lbfgs::{lbfgs_minimize, LbfgsOptions, Objective, TraceRow};
use crate::model::{centred, graph, LayerSpec, Model, NetworkParams, INPUT_MEAN};
use crate::tensor::Tensor;

/// A straight chain of layers with its parameters, applied to
/// `image − input_mean`.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerStack {
    pub layers: Vec<LayerSpec>,
    pub params: NetworkParams,
    pub input_mean: f64,
}

impl LayerStack {
    pub fn new(layers: Vec<LayerSpec>, params: NetworkParams) -> Self {
        LayerStack {
            layers,
            params,
            input_mean: 0.0,
        }
    }

    /// The trunk and proposal-head stem of `model` truncated after `layer`
    /// (see [`Model::layer_names`]), with the model's input centring;
    /// `"input"` gives the empty chain.
    pub fn from_model(model: &Model, layer: &str) -> Result<Self> {
        Ok(LayerStack {
            layers: model.layers_through(layer)?,
            params: model.params.clone(),
            input_mean: INPUT_MEAN,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let input = centred(x.clone(), self.input_mean);
        Ok(graph::forward(&self.layers, &self.params, input, None)?.into_output())
    }

    /// The image the chain sees as an all-zero input.
    pub fn zero_input(&self, shape: &[usize]) -> Tensor {
        Tensor::full(shape, self.input_mean)
    }
}

fn check_target(out: &Tensor, target: &Tensor) -> Result<()> {
    if out.shape() != target.shape() {
        return Err(Error::ShapeMismatch {
            name: "target activations".into(),
            expected: out.shape().to_vec(),
            found: target.shape().to_vec(),
        });
    }
    Ok(())
}

/// Pooling switches recorded per layer.
type Switches = Vec<Option<Vec<usize>>>;

fn loss_and_grad(
    stack: &LayerStack,
    x: &Tensor,
    target: &Tensor,
    frozen: Option<&[Option<Vec<usize>>]>,
) -> Result<(f64, Tensor, Switches)> {
    let input = centred(x.clone(), stack.input_mean);
    let trace = graph::forward(&stack.layers, &stack.params, input, frozen)?;
    check_target(trace.output(), target)?;
    let mut diff = trace.output().clone();
    for (d, t) in diff.data_mut().iter_mut().zip(target.data()) {
        *d -= t;
    }
    let loss = 0.5 * diff.dot(&diff);
    let grad = graph::backward(&stack.layers, &stack.params, &trace, diff, None)?;
    Ok((loss, grad, trace.switches))
}

/// `½‖Ŷ(x) − Y‖²` and its gradient with respect to `x`.
pub fn activation_loss(stack: &LayerStack, x: &Tensor, target: &Tensor) -> Result<(f64, Tensor)> {
    let (loss, grad, _) = loss_and_grad(stack, x, target, None)?;
    Ok((loss, grad))
}

/// Activation matching with pooling switches held fixed during line-search
/// trials and refreshed at each accepted iterate.
struct ActivationObjective<'a> {
    stack: &'a LayerStack,
    target: &'a Tensor,
    shape: Vec<usize>,
    switches: Option<Vec<Option<Vec<usize>>>>,
}

impl ActivationObjective<'_> {
    fn tensor(&self, x: &[f64]) -> Result<Tensor> {
        Tensor::new(&self.shape, x.to_vec())
    }
}

impl Objective for ActivationObjective<'_> {
    fn evaluate(&mut self, x: &[f64]) -> Result<(f64, Vec<f64>)> {
        let x = self.tensor(x)?;
        let (loss, grad, _) = loss_and_grad(self.stack, &x, self.target, self.switches.as_deref())?;
        Ok((loss, grad.into_data()))
    }

    fn accept(&mut self, x: &[f64]) -> Result<Option<(f64, Vec<f64>)>> {
        let x = self.tensor(x)?;
        let (loss, grad, switches) = loss_and_grad(self.stack, &x, self.target, None)?;
        self.switches = Some(switches);
        Ok(Some((loss, grad.into_data())))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReconstructionProblem {
    pub network: LayerStack,
    pub target: Tensor,
    /// Starting image; the zero network input by convention.
    pub init: Tensor,
    pub max_iters: usize,
    pub history_size: usize,
    /// Gradient-norm early exit; `None` runs all `max_iters` iterations.
    pub tolerance: Option<f64>,
}

impl ReconstructionProblem {
    /// Problem starting from the zero network input, with 1000 iterations
    /// and 10 curvature pairs.
    pub fn new(network: LayerStack, target: Tensor, input_shape: &[usize]) -> Self {
        ReconstructionProblem {
            init: network.zero_input(input_shape),
            network,
            target,
            max_iters: 1000,
            history_size: 10,
            tolerance: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Reconstruction {
    /// Unconstrained optimum; see [`Reconstruction::display`].
    pub image: Tensor,
    pub initial_loss: f64,
    pub loss: f64,
    pub trace: Vec<TraceRow>,
}

impl Reconstruction {
    /// The image clamped into `[0, 1]` for rendering.
    pub fn display(&self) -> Tensor {
        let mut t = self.image.clone();
        t.data_mut().iter_mut().for_each(|v| *v = v.clamp(0.0, 1.0));
        t
    }

    /// One row per iteration `1..=rows`; an early stop repeats the last
    /// iterate's values so fixed-budget runs always line up.
    pub fn trace_csv(&self, rows: usize) -> String {
        let mut s = String::from("iter,loss,best\n");
        let last = self.trace.last().expect("trace holds the starting point");
        for iter in 1..=rows {
            let r = self.trace.get(iter).unwrap_or(last);
            s.push_str(&format!("{},{},{}\n", iter, r.loss, r.best));
        }
        s
    }
}

pub fn reconstruct(problem: &ReconstructionProblem) -> Result<Reconstruction> {
    check_target(&problem.network.forward(&problem.init)?, &problem.target)?;
    let mut objective = ActivationObjective {
        stack: &problem.network,
        target: &problem.target,
        shape: problem.init.shape().to_vec(),
        switches: None,
    };
    let result = lbfgs_minimize(
        &mut objective,
        problem.init.data(),
        &LbfgsOptions {
            max_iters: problem.max_iters,
            history_size: problem.history_size,
            tolerance: problem.tolerance,
        },
    )?;
    Ok(Reconstruction {
        image: Tensor::new(problem.init.shape(), result.x)?,
        initial_loss: result.trace[0].loss,
        loss: result.loss,
        trace: result.trace,
    })
}
