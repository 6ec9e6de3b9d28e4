//! Loss primitives and the two multi-task compositions: the proposal-stage
//! loss (classification + gated location) and the region-stage loss
//! (classification + gated location + gated orientation).
//!
//! Orientations are in degrees. The orientation residual is the wrapped
//! angular difference divided by 180, so it lies in (-1, 1].

use serde::{Deserialize, Serialize};

use crate::tensor::softmax2;

/// Smallest probability fed to the logarithm.
pub const PROB_FLOOR: f64 = 1e-12;

/// Weights of the regression terms.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase", deny_unknown_fields, default)]
pub struct LossWeights {
    pub lambda: f64,
    pub beta: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            lambda: 1.0,
            beta: 3.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FcnTarget {
    pub positive: bool,
    /// Offset from the cell-region centre to the minutia, pixels.
    pub offset: [f64; 2],
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RegionTarget {
    pub positive: bool,
    pub offset: [f64; 2],
    /// Degrees in `[0, 360)`.
    pub orientation: f64,
}

pub fn smooth_l1(d: f64) -> f64 {
    let a = d.abs();
    if a < 1.0 {
        0.5 * d * d
    } else {
        a - 0.5
    }
}

pub fn smooth_l1_grad(d: f64) -> f64 {
    if d.abs() < 1.0 {
        d
    } else {
        d.signum()
    }
}

/// Binary log loss on the positive-class probability `p`.
pub fn log_loss2(p: f64, positive: bool) -> f64 {
    let p = p.clamp(PROB_FLOOR, 1.0 - PROB_FLOOR);
    if positive {
        -p.ln()
    } else {
        -(1.0 - p).ln()
    }
}

/// Maps a degree difference into `(-180, 180]`.
pub fn wrap_degrees(d: f64) -> f64 {
    let r = d.rem_euclid(360.0);
    if r > 180.0 {
        r - 360.0
    } else {
        r
    }
}

/// Orientation residual in units of 180°.
pub fn orientation_residual(o: f64, target: f64) -> f64 {
    wrap_degrees(o - target) / 180.0
}

/// Unweighted loss components; `loc` and `ori` are already gated by the label.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct LossParts {
    pub cls: f64,
    pub loc: f64,
    pub ori: f64,
}

impl LossParts {
    pub fn total(&self, w: &LossWeights) -> f64 {
        self.cls + w.lambda * self.loc + w.beta * self.ori
    }
}

fn location_term(t: [f64; 2], target: [f64; 2]) -> f64 {
    smooth_l1(t[0] - target[0]) + smooth_l1(t[1] - target[1])
}

pub fn fcn_loss(p: f64, t: [f64; 2], target: &FcnTarget, w: &LossWeights) -> f64 {
    fcn_parts(p, t, target).total(w)
}

pub fn fcn_parts(p: f64, t: [f64; 2], target: &FcnTarget) -> LossParts {
    LossParts {
        cls: log_loss2(p, target.positive),
        loc: if target.positive {
            location_term(t, target.offset)
        } else {
            0.0
        },
        ori: 0.0,
    }
}

pub fn region_loss(p: f64, t: [f64; 2], o: f64, target: &RegionTarget, w: &LossWeights) -> f64 {
    region_parts(p, t, o, target).total(w)
}

pub fn region_parts(p: f64, t: [f64; 2], o: f64, target: &RegionTarget) -> LossParts {
    if !target.positive {
        return LossParts {
            cls: log_loss2(p, false),
            ..LossParts::default()
        };
    }
    LossParts {
        cls: log_loss2(p, true),
        loc: location_term(t, target.offset),
        ori: smooth_l1(orientation_residual(o, target.orientation)),
    }
}

/// Classification loss and its gradient with respect to the two logits
/// (index 1 is the minutia class).
/// The loss is `−ln softmax` evaluated as a softplus of the logit margin,
/// which keeps full precision for confident predictions, and is capped at
/// `−ln PROB_FLOOR` like [`log_loss2`].
pub fn cls_loss_logits(logits: [f64; 2], positive: bool) -> (f64, [f64; 2]) {
    let p = softmax2(logits);
    let (target, margin) = if positive {
        ([0.0, 1.0], logits[0] - logits[1])
    } else {
        ([1.0, 0.0], logits[1] - logits[0])
    };
    let softplus = margin.max(0.0) + (-margin.abs()).exp().ln_1p();
    (
        softplus.min(-PROB_FLOOR.ln()),
        [p[0] - target[0], p[1] - target[1]],
    )
}

/// Gradient of the gated location term with respect to `t`.
pub fn location_grad(t: [f64; 2], target: [f64; 2]) -> [f64; 2] {
    [
        smooth_l1_grad(t[0] - target[0]),
        smooth_l1_grad(t[1] - target[1]),
    ]
}

/// Gradient of the orientation term with respect to `o` (degrees).
pub fn orientation_grad(o: f64, target: f64) -> f64 {
    smooth_l1_grad(orientation_residual(o, target)) / 180.0
}

/// Per-sample multi-task loss on raw network outputs with gradients:
/// `(parts, d/d logits, d/d t, d/d o)`. Pass `orientation = None` for the
/// proposal stage.
pub fn multitask_grad(
    logits: [f64; 2],
    t: [f64; 2],
    orientation: Option<(f64, f64)>,
    positive: bool,
    offset: [f64; 2],
    w: &LossWeights,
) -> (LossParts, [f64; 2], [f64; 2], f64) {
    let (cls, d_logits) = cls_loss_logits(logits, positive);
    let mut parts = LossParts {
        cls,
        ..LossParts::default()
    };
    let mut d_t = [0.0; 2];
    let mut d_o = 0.0;
    if positive {
        parts.loc = location_term(t, offset);
        let g = location_grad(t, offset);
        d_t = [w.lambda * g[0], w.lambda * g[1]];
        if let Some((o, target)) = orientation {
            parts.ori = smooth_l1(orientation_residual(o, target));
            d_o = w.beta * orientation_grad(o, target);
        }
    }
    (parts, d_logits, d_t, d_o)
}
