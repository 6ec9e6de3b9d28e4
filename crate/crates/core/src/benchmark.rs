//! Scoring a model on an in-memory dataset, for both stages.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::dataset::Sample;
use crate::error::Result;
use crate::evaluation::{evaluate_dataset, DatasetReport, Tolerance};
use crate::minutia::Minutia;
use crate::model::Model;
use crate::postprocess::{extract_detailed, ExtractOptions};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct ModelReport {
    /// Final minutiae under the full (distance and angle) tolerance.
    pub minutiae: DatasetReport,
    /// Proposals under the distance clause alone, since they carry no direction.
    pub proposals: DatasetReport,
}

/// Per-image extractions keyed by sample id: `(proposals, minutiae)`.
pub type Detections = BTreeMap<String, (Vec<Minutia>, Vec<Minutia>)>;

pub fn detect_all(model: &Model, samples: &[Sample], opts: &ExtractOptions) -> Result<Detections> {
    samples
        .iter()
        .map(|s| {
            let e = extract_detailed(model, &s.image, opts)?;
            Ok((s.id.clone(), (e.proposals, e.minutiae)))
        })
        .collect()
}

pub fn score_detections(
    detections: &Detections,
    samples: &[Sample],
    tol: &Tolerance,
) -> Result<ModelReport> {
    let truth: Vec<_> = samples.iter().map(Sample::truth_entry).collect();
    let finals = detections
        .iter()
        .map(|(k, v)| (k.clone(), v.1.clone()))
        .collect();
    let proposals = detections
        .iter()
        .map(|(k, v)| (k.clone(), v.0.clone()))
        .collect();
    Ok(ModelReport {
        minutiae: evaluate_dataset(&finals, &truth, tol)?,
        proposals: evaluate_dataset(&proposals, &truth, &Tolerance::location_only(tol.dist))?,
    })
}

pub fn evaluate_model(
    model: &Model,
    samples: &[Sample],
    opts: &ExtractOptions,
    tol: &Tolerance,
) -> Result<ModelReport> {
    score_detections(&detect_all(model, samples, opts)?, samples, tol)
}
