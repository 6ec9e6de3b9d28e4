//! One-to-one matching of extracted minutiae against ground truth, and the
//! recall / precision / F1 metric suite.
//!
//! [`Tolerance::accepts`] is the single correspondence predicate; training
//! uses it to label region proposals as well.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::minutia::{angular_distance, Minutia};

/// Correspondence predicate: distance strictly below `dist` pixels and, when
/// `use_angle`, angular difference strictly below `angle` degrees.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase", deny_unknown_fields, default)]
pub struct Tolerance {
    pub dist: f64,
    pub angle: f64,
    pub use_angle: bool,
}

impl Default for Tolerance {
    fn default() -> Self {
        Tolerance {
            dist: 15.0,
            angle: 30.0,
            use_angle: true,
        }
    }
}

impl Tolerance {
    pub fn location_only(dist: f64) -> Self {
        Tolerance {
            dist,
            angle: 30.0,
            use_angle: false,
        }
    }

    /// Returns `(distance, angular difference)` when `a` may correspond to `b`.
    /// A missing orientation fails the angle clause.
    pub fn accepts(&self, a: &Minutia, b: &Minutia) -> Option<(f64, Option<f64>)> {
        let d = a.distance(b);
        if d >= self.dist {
            return None;
        }
        let ang = match (a.theta, b.theta) {
            (Some(x), Some(y)) => Some(angular_distance(x, y)),
            _ => None,
        };
        if self.use_angle && !ang.is_some_and(|v| v < self.angle) {
            return None;
        }
        Some((d, ang))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct MatchPair {
    pub extracted: usize,
    pub truth: usize,
    pub distance: f64,
    pub angular_diff: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct MatchCounts {
    pub extracted: usize,
    pub truth: usize,
    pub matched: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct MatchReport {
    pub pairs: Vec<MatchPair>,
    pub recall: f64,
    pub precision: f64,
    pub f1: f64,
    pub mean_loc_error: f64,
    /// `None` when no matched pair carries two orientations.
    pub mean_ang_error: Option<f64>,
    pub counts: MatchCounts,
    /// Set when there is no ground truth (recall reported as 0).
    pub recall_undefined: bool,
    /// Set when nothing was extracted (precision reported as 0).
    pub precision_undefined: bool,
}

/// Harmonic mean of recall and precision; 0 when both are 0.
pub fn f1(recall: f64, precision: f64) -> f64 {
    if recall + precision <= 0.0 {
        0.0
    } else {
        2.0 * precision * recall / (precision + recall)
    }
}

/// Greedy one-to-one assignment: candidate pairs accepted by `tol` are taken
/// in ascending distance order, ties broken by (extracted, truth) index.
pub fn match_minutiae(extracted: &[Minutia], truth: &[Minutia], tol: &Tolerance) -> MatchReport {
    let mut candidates = Vec::new();
    for (i, e) in extracted.iter().enumerate() {
        for (j, t) in truth.iter().enumerate() {
            if let Some((d, a)) = tol.accepts(e, t) {
                candidates.push(MatchPair {
                    extracted: i,
                    truth: j,
                    distance: d,
                    angular_diff: a,
                });
            }
        }
    }
    candidates.sort_by(|a, b| {
        a.distance
            .total_cmp(&b.distance)
            .then(a.extracted.cmp(&b.extracted))
            .then(a.truth.cmp(&b.truth))
    });
    let mut used_e = vec![false; extracted.len()];
    let mut used_t = vec![false; truth.len()];
    let mut pairs = Vec::new();
    for c in candidates {
        if !used_e[c.extracted] && !used_t[c.truth] {
            used_e[c.extracted] = true;
            used_t[c.truth] = true;
            pairs.push(c);
        }
    }
    report_from_pairs(
        pairs,
        MatchCounts {
            extracted: extracted.len(),
            truth: truth.len(),
            matched: 0,
        },
    )
}

fn report_from_pairs(pairs: Vec<MatchPair>, mut counts: MatchCounts) -> MatchReport {
    counts.matched = pairs.len();
    let stats = ErrorStats::from_pairs(&pairs);
    let s = Summary::from_counts(counts, stats);
    MatchReport {
        pairs,
        recall: s.recall,
        precision: s.precision,
        f1: s.f1,
        mean_loc_error: s.mean_loc_error,
        mean_ang_error: s.mean_ang_error,
        counts,
        recall_undefined: s.recall_undefined,
        precision_undefined: s.precision_undefined,
    }
}

#[derive(Debug, Clone, Copy, Default)]
struct ErrorStats {
    loc_sum: f64,
    loc_n: usize,
    ang_sum: f64,
    ang_n: usize,
}

impl ErrorStats {
    fn from_pairs(pairs: &[MatchPair]) -> Self {
        let mut s = ErrorStats::default();
        for p in pairs {
            s.loc_sum += p.distance;
            s.loc_n += 1;
            if let Some(a) = p.angular_diff {
                s.ang_sum += a;
                s.ang_n += 1;
            }
        }
        s
    }

    fn merge(&mut self, o: &ErrorStats) {
        self.loc_sum += o.loc_sum;
        self.loc_n += o.loc_n;
        self.ang_sum += o.ang_sum;
        self.ang_n += o.ang_n;
    }
}

/// Pooled metrics over one or more images.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct Summary {
    pub images: usize,
    pub counts: MatchCounts,
    pub recall: f64,
    pub precision: f64,
    pub f1: f64,
    pub mean_loc_error: f64,
    pub mean_ang_error: Option<f64>,
    pub recall_undefined: bool,
    pub precision_undefined: bool,
}

impl Summary {
    fn from_counts(counts: MatchCounts, stats: ErrorStats) -> Self {
        let ratio = |a: usize, b: usize| if b == 0 { 0.0 } else { a as f64 / b as f64 };
        let recall = ratio(counts.matched, counts.truth);
        let precision = ratio(counts.matched, counts.extracted);
        Summary {
            images: 1,
            counts,
            recall,
            precision,
            f1: f1(recall, precision),
            mean_loc_error: if stats.loc_n == 0 {
                0.0
            } else {
                stats.loc_sum / stats.loc_n as f64
            },
            mean_ang_error: (stats.ang_n > 0).then(|| stats.ang_sum / stats.ang_n as f64),
            recall_undefined: counts.truth == 0,
            precision_undefined: counts.extracted == 0,
        }
    }
}

/// Ground truth for one image of a dataset.
#[derive(Debug, Clone, PartialEq)]
pub struct TruthEntry {
    pub id: String,
    pub minutiae: Vec<Minutia>,
    pub quality: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct DatasetReport {
    pub tolerance: Tolerance,
    pub overall: Summary,
    pub strata: BTreeMap<String, Summary>,
    pub images: BTreeMap<String, MatchReport>,
}

/// Matches every image and micro-averages the counts, overall and per
/// quality stratum. Every truth id needs a prediction entry and vice versa.
pub fn evaluate_dataset(
    predictions: &BTreeMap<String, Vec<Minutia>>,
    truth: &[TruthEntry],
    tol: &Tolerance,
) -> Result<DatasetReport> {
    let truth_ids: BTreeSet<&str> = truth.iter().map(|t| t.id.as_str()).collect();
    let missing: Vec<&str> = truth_ids
        .iter()
        .copied()
        .filter(|id| !predictions.contains_key(*id))
        .collect();
    let extra: Vec<&str> = predictions
        .keys()
        .map(String::as_str)
        .filter(|id| !truth_ids.contains(id))
        .collect();
    if !missing.is_empty() || !extra.is_empty() {
        return Err(Error::Dataset(format!(
            "image ids do not line up; missing predictions: [{}]; unknown predictions: [{}]",
            missing.join(", "),
            extra.join(", ")
        )));
    }

    let mut images = BTreeMap::new();
    let mut overall = Accumulator::default();
    let mut strata: BTreeMap<String, Accumulator> = BTreeMap::new();
    for entry in truth {
        let report = match_minutiae(&predictions[&entry.id], &entry.minutiae, tol);
        overall.add(&report);
        if let Some(q) = &entry.quality {
            strata.entry(q.clone()).or_default().add(&report);
        }
        images.insert(entry.id.clone(), report);
    }
    Ok(DatasetReport {
        tolerance: *tol,
        overall: overall.summary(),
        strata: strata.into_iter().map(|(k, v)| (k, v.summary())).collect(),
        images,
    })
}

#[derive(Default)]
struct Accumulator {
    images: usize,
    counts: MatchCounts,
    stats: ErrorStats,
}

impl Accumulator {
    fn add(&mut self, r: &MatchReport) {
        self.images += 1;
        self.counts.extracted += r.counts.extracted;
        self.counts.truth += r.counts.truth;
        self.counts.matched += r.counts.matched;
        self.stats.merge(&ErrorStats::from_pairs(&r.pairs));
    }

    fn summary(&self) -> Summary {
        Summary {
            images: self.images,
            ..Summary::from_counts(self.counts, self.stats)
        }
    }
}

impl DatasetReport {
    /// Plain-text table: one row per stratum and an overall row.
    pub fn table(&self) -> String {
        let mut rows = vec![format!(
            "{:<10} {:>6} {:>9} {:>9} {:>8} {:>9} {:>9} {:>9}",
            "stratum", "images", "recall", "precision", "f1", "loc err", "ang err", "matched"
        )];
        let row = |name: &str, s: &Summary| {
            format!(
                "{:<10} {:>6} {:>8.1}% {:>8.1}% {:>8.4} {:>9.2} {:>9} {:>4}/{:<4}{}",
                name,
                s.images,
                100.0 * s.recall,
                100.0 * s.precision,
                s.f1,
                s.mean_loc_error,
                s.mean_ang_error
                    .map_or("-".to_string(), |a| format!("{a:.2}")),
                s.counts.matched,
                s.counts.truth,
                match (s.recall_undefined, s.precision_undefined) {
                    (true, true) => "  (recall, precision undefined)",
                    (true, false) => "  (recall undefined)",
                    (false, true) => "  (precision undefined)",
                    _ => "",
                }
            )
        };
        for (k, s) in &self.strata {
            rows.push(row(k, s));
        }
        rows.push(row("overall", &self.overall));
        rows.join("\n")
    }
}
