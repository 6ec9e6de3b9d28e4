//! Turning network outputs into minutiae: score-map decoding, angular
//! non-maximum suppression and the full two-stage extraction pipeline.

use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::minutia::{angular_distance, normalize_degrees, Minutia};
use crate::model::{Model, ScoreMap};
use crate::tensor::Tensor;

/// Largest location correction applied to a cell centre, per axis.
pub const MAX_CELL_OFFSET: f64 = 8.0;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase", deny_unknown_fields, default)]
pub struct Thresholds {
    pub proposal: f64,
    #[serde(rename = "final")]
    pub final_: f64,
}

impl Default for Thresholds {
    fn default() -> Self {
        Thresholds {
            proposal: 0.1,
            final_: 0.5,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NmsParams {
    pub dist: f64,
    pub angle: f64,
}

impl Default for NmsParams {
    fn default() -> Self {
        NmsParams {
            dist: 16.0,
            angle: 30.0,
        }
    }
}

fn clamp_into(v: f64, extent: usize) -> f64 {
    v.clamp(0.0, (extent.max(1) - 1) as f64)
}

/// One proposal per valid cell scoring at least `threshold`, placed at the
/// cell centre plus its clamped offset, sorted by descending score.
pub fn decode_proposals(map: &ScoreMap, threshold: f64) -> Vec<Minutia> {
    let s = map.stride as f64;
    let mut out = Vec::new();
    for r in 0..map.rows() {
        for c in 0..map.cols() {
            let score = map.score(r, c);
            if score < threshold || !map.cell_valid(r, c) {
                continue;
            }
            let [dx, dy] = map.offset(r, c);
            let x = s * c as f64 + s / 2.0 + dx.clamp(-MAX_CELL_OFFSET, MAX_CELL_OFFSET);
            let y = s * r as f64 + s / 2.0 + dy.clamp(-MAX_CELL_OFFSET, MAX_CELL_OFFSET);
            out.push(Minutia::proposal(
                clamp_into(x, map.image_width),
                clamp_into(y, map.image_height),
                score,
            ));
        }
    }
    sort_by_score(&mut out);
    out
}

/// Descending score; equal scores keep their input order.
fn sort_by_score(ms: &mut [Minutia]) {
    ms.sort_by(|a, b| b.score.total_cmp(&a.score));
}

/// Whether `b` is redundant next to `a`. Without an orientation on either
/// side only the distance clause applies.
pub fn suppresses(a: &Minutia, b: &Minutia, p: &NmsParams) -> bool {
    if a.distance(b) > p.dist {
        return false;
    }
    match (a.theta, b.theta) {
        (Some(x), Some(y)) => angular_distance(x, y) <= p.angle,
        _ => true,
    }
}

/// Greedy NMS: keep the best remaining candidate, drop everything it
/// suppresses, repeat. Output is in descending score order.
pub fn nms(candidates: &[Minutia], p: &NmsParams) -> Vec<Minutia> {
    let mut order = candidates.to_vec();
    sort_by_score(&mut order);
    let mut kept: Vec<Minutia> = Vec::new();
    for c in order {
        if !kept.iter().any(|k| suppresses(k, &c, p)) {
            kept.push(c);
        }
    }
    kept
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ExtractOptions {
    pub thresholds: Thresholds,
    pub nms: NmsParams,
    /// Apply the region head's location correction to each proposal.
    pub refine_location: bool,
}

impl Default for ExtractOptions {
    fn default() -> Self {
        ExtractOptions {
            thresholds: Thresholds::default(),
            nms: NmsParams::default(),
            refine_location: true,
        }
    }
}

impl From<Thresholds> for ExtractOptions {
    fn from(thresholds: Thresholds) -> Self {
        ExtractOptions {
            thresholds,
            ..ExtractOptions::default()
        }
    }
}

/// Both stages' outputs for one image.
#[derive(Debug, Clone, PartialEq)]
pub struct Extraction {
    /// Proposal-stage candidates after location-only suppression.
    pub proposals: Vec<Minutia>,
    /// Final oriented minutiae.
    pub minutiae: Vec<Minutia>,
}

/// Full pipeline on one `[1, H, W]` image: trunk once, proposal map,
/// decoding and location-only NMS, region scoring with refinement and
/// orientation, final threshold and angular NMS.
pub fn extract_detailed(
    model: &Model,
    image: &Tensor,
    opts: &ExtractOptions,
) -> Result<Extraction> {
    let features = model.features(image)?;
    let map = model.fcn_on_features(&features)?;
    let proposals = nms(&decode_proposals(&map, opts.thresholds.proposal), &opts.nms);
    let outputs = model.region_on_features(&features, &proposals)?;
    let (w, h) = (features.image_width, features.image_height);
    let scored: Vec<Minutia> = proposals
        .iter()
        .zip(&outputs)
        .filter(|(_, o)| o.prob >= opts.thresholds.final_)
        .map(|(p, o)| {
            let (x, y) = if opts.refine_location {
                (clamp_into(p.x + o.dx, w), clamp_into(p.y + o.dy, h))
            } else {
                (p.x, p.y)
            };
            Minutia {
                x,
                y,
                theta: Some(normalize_degrees(o.orientation)),
                score: o.prob,
                kind: p.kind,
            }
        })
        .collect();
    Ok(Extraction {
        proposals,
        minutiae: nms(&scored, &opts.nms),
    })
}

pub fn extract(model: &Model, image: &Tensor, thresholds: Thresholds) -> Result<Vec<Minutia>> {
    Ok(extract_detailed(model, image, &thresholds.into())?.minutiae)
}
