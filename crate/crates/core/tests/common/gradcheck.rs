//! Finite-difference checks of every analytic gradient. Each check panics
//! on the first mismatch.

use super::{numeric_grad, randn, randn_off_zero, rel_error, rng, EPS};
use minex_core::dataset::Sample;
use minex_core::losses::{cls_loss_logits, multitask_grad, smooth_l1, smooth_l1_grad, LossWeights};
use minex_core::minutia::Minutia;
use minex_core::model::{BackboneConfig, StageConfig};
use minex_core::tensor::{
    conv2d_backward, conv2d_forward, fc_backward, fc_forward, maxpool_backward, maxpool_forward,
    relu_backward, relu_forward, roi_pool, roi_pool_backward, Roi,
};
use minex_core::training::{
    assign_fcn_targets, fcn_batch_gradient, region_batch_gradient, LabeledProposal,
};
use minex_core::{Model, Tensor};
use rand::Rng;

const INSTANCES: u64 = 20;
const TOL: f64 = 1e-6;
const ABS_FLOOR: f64 = 1e-9;
/// Side of the images fed to the full networks: a 2×2 feature map.
const SIZE: usize = 32;

fn check(name: &str, analytic: &Tensor, numeric: &Tensor) {
    let e = rel_error(analytic, numeric);
    // central-difference roundoff is about 1e-16 / EPS; below this floor the
    // gradient is zero and the ratio only measures noise
    let diff: f64 = analytic
        .data()
        .iter()
        .zip(numeric.data())
        .map(|(a, b)| (a - b).powi(2))
        .sum::<f64>()
        .sqrt();
    assert!(e < TOL || diff < ABS_FLOOR, "{name}: relative error {e:e}");
}

pub fn conv_gradients() {
    for seed in 0..INSTANCES {
        let mut r = rng(seed);
        let (c, k) = (r.random_range(1..4), r.random_range(1..4));
        let (h, w) = (r.random_range(4..8), r.random_range(4..8));
        let ks = [1, 3][r.random_range(0..2)];
        let stride = r.random_range(1..3);
        let pad = r.random_range(0..2);
        let x = randn(&[c, h, w], &mut r);
        let kern = randn(&[k, c, ks, ks], &mut r);
        let b = randn(&[k], &mut r);
        let out = conv2d_forward(&x, &kern, &b, stride, pad).unwrap();
        let up = randn(out.shape(), &mut r);
        let g = conv2d_backward(&x, &kern, &up, stride, pad).unwrap();
        let loss = |x: &Tensor, kern: &Tensor, b: &Tensor| {
            conv2d_forward(x, kern, b, stride, pad).unwrap().dot(&up)
        };
        check(
            "conv input",
            &g.wrt_input,
            &numeric_grad(&x, |t| loss(t, &kern, &b)),
        );
        check(
            "conv kernels",
            &g.wrt_params[0],
            &numeric_grad(&kern, |t| loss(&x, t, &b)),
        );
        check(
            "conv bias",
            &g.wrt_params[1],
            &numeric_grad(&b, |t| loss(&x, &kern, t)),
        );
    }
}

pub fn fc_gradients() {
    for seed in 0..INSTANCES {
        let mut r = rng(100 + seed);
        let (n_in, n_out) = (r.random_range(1..12), r.random_range(1..6));
        let x = randn(&[n_in], &mut r);
        let wt = randn(&[n_out, n_in], &mut r);
        let b = randn(&[n_out], &mut r);
        let up = randn(&[n_out], &mut r);
        let g = fc_backward(&x, &wt, &up).unwrap();
        let loss = |x: &Tensor, wt: &Tensor, b: &Tensor| fc_forward(x, wt, b).unwrap().dot(&up);
        check(
            "fc input",
            &g.wrt_input,
            &numeric_grad(&x, |t| loss(t, &wt, &b)),
        );
        check(
            "fc weights",
            &g.wrt_params[0],
            &numeric_grad(&wt, |t| loss(&x, t, &b)),
        );
        check(
            "fc bias",
            &g.wrt_params[1],
            &numeric_grad(&b, |t| loss(&x, &wt, t)),
        );
    }
}

pub fn relu_gradients() {
    for seed in 0..INSTANCES {
        let mut r = rng(200 + seed);
        let x = randn_off_zero(&[2, 3, r.random_range(1..6)], &mut r);
        let up = randn(x.shape(), &mut r);
        let g = relu_backward(&x, &up).unwrap();
        check("relu", &g, &numeric_grad(&x, |t| relu_forward(t).dot(&up)));
    }
}

pub fn maxpool_gradients() {
    for seed in 0..INSTANCES {
        let mut r = rng(300 + seed);
        let (h, w) = (r.random_range(2..9), r.random_range(2..9));
        let x = randn(&[2, h, w], &mut r);
        let (out, sw) = maxpool_forward(&x, 2, 2).unwrap();
        let up = randn(out.shape(), &mut r);
        let g = maxpool_backward(x.shape(), &sw, &up).unwrap();
        check(
            "maxpool",
            &g,
            &numeric_grad(&x, |t| maxpool_forward(t, 2, 2).unwrap().0.dot(&up)),
        );
    }
}

pub fn roi_pool_gradients() {
    for seed in 0..INSTANCES {
        let mut r = rng(400 + seed);
        let (h, w) = (r.random_range(2..7), r.random_range(2..7));
        let f = randn(&[3, h, w], &mut r);
        let cx = r.random_range(0.0..(w * 16) as f64);
        let cy = r.random_range(0.0..(h * 16) as f64);
        let roi = Roi::centered(cx, cy, 32.0);
        let (out, sw) = roi_pool(&f, &roi, 16, 6).unwrap();
        let up = randn(out.shape(), &mut r);
        let g = roi_pool_backward(f.shape(), &sw, &up).unwrap();
        check(
            "roi pool",
            &g,
            &numeric_grad(&f, |t| roi_pool(t, &roi, 16, 6).unwrap().0.dot(&up)),
        );
    }
}

/// A residual at least 0.05 away from the smooth L1 kinks at ±1.
fn smooth_residual(r: &mut impl Rng, scale: f64) -> f64 {
    loop {
        let v: f64 = r.random_range(-3.0..3.0) * scale;
        if ((v / scale).abs() - 1.0).abs() > 0.05 {
            return v;
        }
    }
}

pub fn smooth_l1_gradient() {
    let mut r = rng(500);
    for _ in 0..INSTANCES {
        let d = Tensor::new(&[1], vec![smooth_residual(&mut r, 1.0)]).unwrap();
        let a = Tensor::new(&[1], vec![smooth_l1_grad(d.data()[0])]).unwrap();
        check(
            "smooth l1",
            &a,
            &numeric_grad(&d, |t| smooth_l1(t.data()[0])),
        );
    }
}

pub fn softmax_log_loss_gradient() {
    for seed in 0..INSTANCES {
        let mut r = rng(600 + seed);
        let logits = randn(&[2], &mut r);
        let positive = r.random_bool(0.5);
        let l = |t: &Tensor| cls_loss_logits([t.data()[0], t.data()[1]], positive).0;
        let g = cls_loss_logits([logits.data()[0], logits.data()[1]], positive).1;
        check(
            "log loss",
            &Tensor::new(&[2], g.to_vec()).unwrap(),
            &numeric_grad(&logits, l),
        );
    }
}

fn weights(r: &mut impl Rng) -> LossWeights {
    LossWeights {
        lambda: r.random_range(0.5..2.0),
        beta: r.random_range(1.0..4.0),
    }
}

pub fn proposal_multitask_gradient() {
    for seed in 0..INSTANCES {
        let mut r = rng(700 + seed);
        let w = weights(&mut r);
        let positive = seed % 4 != 0;
        let offset = [r.random_range(-8.0..8.0), r.random_range(-8.0..8.0)];
        // x = [logit0, logit1, tx, ty]
        let x = Tensor::new(
            &[4],
            vec![
                r.random_range(-2.0..2.0),
                r.random_range(-2.0..2.0),
                offset[0] + smooth_residual(&mut r, 1.0),
                offset[1] + smooth_residual(&mut r, 1.0),
            ],
        )
        .unwrap();
        let eval = |t: &Tensor| {
            let d = t.data();
            multitask_grad([d[0], d[1]], [d[2], d[3]], None, positive, offset, &w)
        };
        let (_, dl, dt, _) = eval(&x);
        let analytic = Tensor::new(&[4], vec![dl[0], dl[1], dt[0], dt[1]]).unwrap();
        check(
            "proposal loss",
            &analytic,
            &numeric_grad(&x, |t| eval(t).0.total(&w)),
        );
    }
}

pub fn region_multitask_gradient() {
    for seed in 0..INSTANCES {
        let mut r = rng(800 + seed);
        let w = weights(&mut r);
        let positive = seed % 4 != 0;
        let offset = [r.random_range(-8.0..8.0), r.random_range(-8.0..8.0)];
        let target = r.random_range(0.0..360.0);
        // residual kept inside (-170°, 170°) so the wrap stays out of reach
        let o = target + r.random_range(-170.0..170.0);
        let x = Tensor::new(
            &[5],
            vec![
                r.random_range(-2.0..2.0),
                r.random_range(-2.0..2.0),
                offset[0] + smooth_residual(&mut r, 1.0),
                offset[1] + smooth_residual(&mut r, 1.0),
                o,
            ],
        )
        .unwrap();
        let eval = |t: &Tensor| {
            let d = t.data();
            multitask_grad(
                [d[0], d[1]],
                [d[2], d[3]],
                Some((d[4], target)),
                positive,
                offset,
                &w,
            )
        };
        let (_, dl, dt, d_o) = eval(&x);
        let analytic = Tensor::new(&[5], vec![dl[0], dl[1], dt[0], dt[1], d_o]).unwrap();
        check(
            "region loss",
            &analytic,
            &numeric_grad(&x, |t| eval(t).0.total(&w)),
        );
    }
}

fn tiny_config() -> BackboneConfig {
    BackboneConfig {
        stages: [2, 3, 3, 3]
            .into_iter()
            .map(|channels| StageConfig {
                channels,
                kernel: 3,
            })
            .collect(),
        head_channels: 3,
        fc_width: 3,
    }
}

fn tiny_sample(r: &mut impl Rng, size: usize) -> Sample {
    let truth = (0..3)
        .map(|_| {
            Minutia::new(
                r.random_range(0.0..size as f64),
                r.random_range(0.0..size as f64),
                r.random_range(0.0..360.0),
            )
        })
        .collect();
    Sample {
        id: "g".into(),
        image: Tensor::from_fn(&[1, size, size], |_| r.random_range(0.0..1.0)),
        truth,
        quality: None,
    }
}

/// Freshly initialised model with random biases. Zero biases would leave
/// units fed by all-zero inputs exactly on a ReLU kink; positive trunk biases
/// also keep pooling windows from tying at zero.
fn tiny_model(seed: u64, r: &mut impl Rng) -> Model {
    let mut model = Model::init(tiny_config(), seed).unwrap();
    for (name, t) in model.params.iter_mut() {
        let range = if name.starts_with("backbone.") {
            0.1..0.5
        } else {
            -0.2..0.2
        };
        if name.ends_with(".bias") {
            t.data_mut()
                .iter_mut()
                .for_each(|v| *v = r.random_range(range.clone()));
        }
    }
    model
}

/// Finite differences of `loss` over every parameter of `model`, or `None`
/// when some coordinate straddles a ReLU or pooling kink (its one-sided
/// differences disagree), where a central difference is meaningless.
fn numeric_param_grads(
    model: &Model,
    mut loss: impl FnMut(&Model) -> f64,
) -> Option<Vec<(String, Tensor)>> {
    let f0 = loss(model);
    let names: Vec<String> = model.params.names().map(str::to_string).collect();
    let mut probe = model.clone();
    let mut out = Vec::new();
    for name in names {
        let base = model.params.get(&name).unwrap().clone();
        let mut g = Tensor::zeros(base.shape());
        let mut t = base.clone();
        for i in 0..base.len() {
            let orig = t.data()[i];
            t.data_mut()[i] = orig + EPS;
            probe.params.set(&name, t.clone());
            let up = loss(&probe);
            t.data_mut()[i] = orig - EPS;
            probe.params.set(&name, t.clone());
            let down = loss(&probe);
            t.data_mut()[i] = orig;
            let (fwd, bwd) = ((up - f0) / EPS, (f0 - down) / EPS);
            if (fwd - bwd).abs() > 1e-4 * (fwd.abs() + bwd.abs()) + 1e-7 {
                return None;
            }
            g.data_mut()[i] = (up - down) / (2.0 * EPS);
        }
        probe.params.set(&name, base);
        out.push((name, g));
    }
    Some(out)
}

/// Runs `instance` on successive seeds until `INSTANCES` of them are free
/// of kinks.
fn smooth_instances(base: u64, mut instance: impl FnMut(u64) -> bool) {
    let accepted = (base..base + 4 * INSTANCES)
        .filter(|&s| instance(s))
        .take(INSTANCES as usize)
        .count();
    assert_eq!(
        accepted as u64, INSTANCES,
        "too many instances straddle a kink"
    );
}

fn check_params(
    stage: &str,
    model: &Model,
    analytic: &minex_core::NetworkParams,
    numeric: &[(String, Tensor)],
) {
    for (name, g) in numeric {
        let zero = Tensor::zeros(g.shape());
        let a = analytic.get(name).unwrap_or(&zero);
        check(&format!("{stage} {name}"), a, g);
    }
    assert_eq!(numeric.len(), model.params.len());
}

pub fn full_proposal_network_gradient() {
    smooth_instances(900, |seed| {
        let mut r = rng(seed);
        let model = tiny_model(seed, &mut r);
        let sample = tiny_sample(&mut r, SIZE);
        let targets = assign_fcn_targets(&sample.truth, SIZE, SIZE);
        let batch: Vec<usize> = (0..targets.cells.len()).collect();
        let w = weights(&mut r);
        let (_, grads) = fcn_batch_gradient(&model, &sample, &targets, &batch, &w).unwrap();
        let Some(numeric) = numeric_param_grads(&model, |m| {
            fcn_batch_gradient(m, &sample, &targets, &batch, &w)
                .unwrap()
                .0
                .total(&w)
        }) else {
            return false;
        };
        check_params("proposal", &model, &grads, &numeric);
        true
    });
}

pub fn full_region_network_gradient() {
    smooth_instances(1000, |seed| {
        let mut r = rng(seed);
        let model = tiny_model(seed, &mut r);
        let sample = tiny_sample(&mut r, SIZE);
        let extent = SIZE as f64;
        let labels: Vec<LabeledProposal> = (0..4)
            .map(|i| LabeledProposal {
                proposal: Minutia::proposal(
                    r.random_range(0.0..extent),
                    r.random_range(0.0..extent),
                    0.5,
                ),
                positive: i % 2 == 0,
                offset: [r.random_range(-6.0..6.0), r.random_range(-6.0..6.0)],
                orientation: r.random_range(0.0..360.0),
            })
            .collect();
        let batch: Vec<usize> = (0..labels.len()).collect();
        let w = weights(&mut r);
        let (_, grads) = region_batch_gradient(&model, &sample, &labels, &batch, &w).unwrap();
        let Some(numeric) = numeric_param_grads(&model, |m| {
            region_batch_gradient(m, &sample, &labels, &batch, &w)
                .unwrap()
                .0
                .total(&w)
        }) else {
            return false;
        };
        check_params("region", &model, &grads, &numeric);
        true
    });
}

/// Every check above, in order.
pub fn all() {
    conv_gradients();
    fc_gradients();
    relu_gradients();
    maxpool_gradients();
    roi_pool_gradients();
    smooth_l1_gradient();
    softmax_log_loss_gradient();
    proposal_multitask_gradient();
    region_multitask_gradient();
    full_proposal_network_gradient();
    full_region_network_gradient();
}
