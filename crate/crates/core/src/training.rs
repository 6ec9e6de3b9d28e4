//! Target assignment, SGD with momentum and weight decay, the two stage
//! trainers and the four-step co-training schedule.
//!
//! Every iteration draws its randomness from a generator seeded by
//! `(seed, stage, iteration)`, so a run is a pure function of its inputs and
//! can be resumed mid-stage without replaying earlier iterations.

use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::Sample;
use crate::error::{Error, Result};
use crate::evaluation::Tolerance;
use crate::losses::{multitask_grad, LossParts, LossWeights};
use crate::minutia::Minutia;
use crate::model::{
    decode_checkpoint, encode_checkpoint, init_params, BackboneConfig, Features, Model,
    NetworkParams, BACKBONE, FCN, ORIENTATION_SCALE, STRIDE,
};
use crate::postprocess::{decode_proposals, nms, NmsParams};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase", deny_unknown_fields, default)]
pub struct TrainConfig {
    pub lr_initial: f64,
    pub lr_drop: f64,
    /// Iteration (within a stage) at which the learning rate drops.
    pub drop_after: usize,
    pub momentum: f64,
    pub weight_decay: f64,
    /// Images whose gradients are averaged per iteration.
    pub batch_images: usize,
    /// Upper bound on region proposals per region-stage batch.
    pub region_batch: usize,
    /// Minimum share of positives in a sampled batch.
    pub positive_fraction: f64,
    pub seed: u64,
    pub fcn_iterations: usize,
    pub region_iterations: usize,
    /// Mid-stage checkpoint interval for resumable runs; 0 disables.
    pub checkpoint_every: usize,
    pub loss_weights: LossWeights,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr_initial: 0.001,
            lr_drop: 0.0001,
            drop_after: 3000,
            momentum: 0.9,
            weight_decay: 0.0005,
            batch_images: 1,
            region_batch: 32,
            positive_fraction: 0.25,
            seed: 0,
            fcn_iterations: 6000,
            region_iterations: 6000,
            checkpoint_every: 1000,
            loss_weights: LossWeights::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if !(0.0..1.0).contains(&self.momentum) {
            return bad("momentum must lie in [0, 1)");
        }
        if !(self.lr_initial > 0.0 && self.lr_drop > 0.0) {
            return bad("learning rates must be positive");
        }
        if self.weight_decay < 0.0 {
            return bad("weight decay must be non-negative");
        }
        if self.batch_images == 0 || self.region_batch == 0 {
            return bad("batch sizes must be positive");
        }
        if !(self.positive_fraction > 0.0 && self.positive_fraction <= 1.0) {
            return bad("positiveFraction must lie in (0, 1]");
        }
        if self.loss_weights.lambda < 0.0 || self.loss_weights.beta < 0.0 {
            return bad("loss weights must be non-negative");
        }
        Ok(())
    }

    pub fn learning_rate(&self, iter: usize) -> f64 {
        if iter < self.drop_after {
            self.lr_initial
        } else {
            self.lr_drop
        }
    }
}

/// Label of one score-map cell.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CellTarget {
    pub row: usize,
    pub col: usize,
    pub positive: bool,
    /// Minutia minus cell-region centre, pixels.
    pub offset: [f64; 2],
    /// Orientation of the assigned minutia, when it has one.
    pub orientation: Option<f64>,
}

/// Row-major grid of cell labels.
#[derive(Debug, Clone, PartialEq)]
pub struct TargetGrid {
    pub rows: usize,
    pub cols: usize,
    pub cells: Vec<CellTarget>,
}

impl TargetGrid {
    pub fn at(&self, row: usize, col: usize) -> &CellTarget {
        &self.cells[row * self.cols + col]
    }

    pub fn positives(&self) -> impl Iterator<Item = &CellTarget> {
        self.cells.iter().filter(|c| c.positive)
    }
}

/// A cell is positive iff a minutia lies in its 16×16 region; its target is
/// the offset of that minutia from the region centre (the one nearest the
/// centre when several share a cell).
pub fn assign_fcn_targets(truth: &[Minutia], width: usize, height: usize) -> TargetGrid {
    let (rows, cols) = (height.div_ceil(STRIDE), width.div_ceil(STRIDE));
    let s = STRIDE as f64;
    let mut cells: Vec<CellTarget> = (0..rows * cols)
        .map(|i| CellTarget {
            row: i / cols,
            col: i % cols,
            positive: false,
            offset: [0.0; 2],
            orientation: None,
        })
        .collect();
    for m in truth {
        if m.x < 0.0 || m.y < 0.0 {
            continue;
        }
        let (c, r) = ((m.x / s).floor() as usize, (m.y / s).floor() as usize);
        if r >= rows || c >= cols {
            continue;
        }
        let cell = &mut cells[r * cols + c];
        let offset = [
            m.x - (s * c as f64 + s / 2.0),
            m.y - (s * r as f64 + s / 2.0),
        ];
        let closer = offset[0].hypot(offset[1]) < cell.offset[0].hypot(cell.offset[1]);
        if !cell.positive || closer {
            cell.positive = true;
            cell.offset = offset;
            cell.orientation = m.theta;
        }
    }
    TargetGrid { rows, cols, cells }
}

/// Momentum buffers keyed by parameter name.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct SgdState {
    pub velocity: NetworkParams,
}

/// `v ← μ·v − lr·(g + decay·w); w ← w + v` for every parameter that has a
/// gradient. Parameters without a gradient are left untouched. Nothing is
/// updated if any gradient is non-finite.
pub fn sgd_step(
    params: &mut NetworkParams,
    grads: &NetworkParams,
    state: &mut SgdState,
    config: &TrainConfig,
    iter: usize,
) -> Result<()> {
    for (name, g) in grads.iter() {
        let p = params
            .get(name)
            .ok_or_else(|| Error::invalid(format!("gradient for unknown parameter {name}")))?;
        if p.shape() != g.shape() {
            return Err(Error::ShapeMismatch {
                name: name.to_string(),
                expected: p.shape().to_vec(),
                found: g.shape().to_vec(),
            });
        }
        if g.data().iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFiniteGradient(name.to_string()));
        }
    }
    let lr = config.learning_rate(iter);
    for (name, g) in grads.iter() {
        let w = params.get_mut(name).expect("checked above");
        if state.velocity.get(name).is_none() {
            state.velocity.set(name, Tensor::zeros(w.shape()));
        }
        let v = state.velocity.get_mut(name).expect("just inserted");
        for ((wi, vi), gi) in w.data_mut().iter_mut().zip(v.data_mut()).zip(g.data()) {
            *vi = config.momentum * *vi - lr * (gi + config.weight_decay * *wi);
            *wi += *vi;
        }
    }
    Ok(())
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub(crate) fn derive_seed(seed: u64, a: u64, b: u64) -> u64 {
    splitmix(splitmix(splitmix(seed) ^ a) ^ b)
}

fn iteration_rng(seed: u64, stage: usize, iter: usize) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(seed, stage as u64, iter as u64))
}

/// `k` distinct elements of `items` by partial Fisher–Yates.
fn choose(items: &[usize], k: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
    let mut pool = items.to_vec();
    let k = k.min(pool.len());
    for i in 0..k {
        let j = rng.random_range(i..pool.len());
        pool.swap(i, j);
    }
    pool.truncate(k);
    pool
}

/// Up to `pos_cap` positives, then at most as many negatives as keep the
/// positive share at or above `fraction` (an all-negative pool still yields
/// the negatives one positive would allow).
pub fn sample_batch(
    positives: &[usize],
    negatives: &[usize],
    fraction: f64,
    pos_cap: usize,
    rng: &mut ChaCha8Rng,
) -> Vec<usize> {
    let mut batch = choose(positives, pos_cap, rng);
    let slots = batch.len().max(1) as f64 * (1.0 - fraction) / fraction;
    let n_neg = (slots + 1e-9).floor() as usize;
    batch.extend(choose(negatives, n_neg, rng));
    batch
}

/// Per-iteration loss record.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct LossRecord {
    pub iter: usize,
    pub loss: f64,
    pub cls_loss: f64,
    pub loc_loss: f64,
    pub ori_loss: f64,
}

impl LossRecord {
    pub const CSV_HEADER: &'static str = "iter,loss,clsLoss,locLoss,oriLoss";

    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{}",
            self.iter, self.loss, self.cls_loss, self.loc_loss, self.ori_loss
        )
    }
}

pub fn history_csv(history: &[LossRecord]) -> String {
    let mut s = String::from(LossRecord::CSV_HEADER);
    s.push('\n');
    for r in history {
        s.push_str(&r.csv_row());
        s.push('\n');
    }
    s
}

/// Where a stage gets trunk features from.
enum Trunk<'a> {
    /// Run (and train) the trunk every iteration.
    Trainable,
    /// Frozen trunk; one precomputed feature map per sample.
    Frozen(&'a [Tensor]),
}

/// Mutable progress of one stage, as saved by mid-stage checkpoints.
#[derive(Debug, Clone, PartialEq)]
pub struct StageState {
    pub next_iter: usize,
    pub params: NetworkParams,
    pub sgd: SgdState,
    pub history: Vec<LossRecord>,
}

/// Persistence callbacks for a training run. The default implementation
/// keeps nothing.
pub trait TrainHooks {
    /// Parameters and history of a stage completed by an earlier run.
    fn completed_stage(
        &mut self,
        _stage: usize,
    ) -> Result<Option<(NetworkParams, Vec<LossRecord>)>> {
        Ok(None)
    }

    fn stage_finished(
        &mut self,
        _stage: usize,
        _params: &NetworkParams,
        _history: &[LossRecord],
    ) -> Result<()> {
        Ok(())
    }

    /// Mid-stage state saved by an earlier run.
    fn resume_point(&mut self, _stage: usize) -> Result<Option<StageState>> {
        Ok(None)
    }

    /// Called after each iteration; `state.next_iter` iterations are done.
    fn iteration_finished(&mut self, _stage: usize, _state: &StageState) -> Result<()> {
        Ok(())
    }
}

pub struct NoHooks;

impl TrainHooks for NoHooks {}

struct StageRun<'a> {
    stage: usize,
    iterations: usize,
    trunk: Trunk<'a>,
    config: &'a TrainConfig,
}

impl StageRun<'_> {
    /// Shared loop: resume, step, report.
    fn run(
        &self,
        model: &mut Model,
        hooks: &mut dyn TrainHooks,
        mut step: impl FnMut(&Model, &mut ChaCha8Rng, &mut NetworkParams) -> Result<LossParts>,
    ) -> Result<Vec<LossRecord>> {
        let mut state = match hooks.resume_point(self.stage)? {
            Some(s) => {
                model.params = s.params.clone();
                s
            }
            None => StageState {
                next_iter: 0,
                params: NetworkParams::new(),
                sgd: SgdState::default(),
                history: Vec::new(),
            },
        };
        let w = self.config.loss_weights;
        for iter in state.next_iter..self.iterations {
            let mut rng = iteration_rng(self.config.seed, self.stage, iter);
            let mut grads = NetworkParams::new();
            let mut parts = LossParts::default();
            for _ in 0..self.config.batch_images {
                let p = step(model, &mut rng, &mut grads)?;
                parts.cls += p.cls;
                parts.loc += p.loc;
                parts.ori += p.ori;
            }
            let k = 1.0 / self.config.batch_images as f64;
            grads.scale(k);
            let parts = LossParts {
                cls: parts.cls * k,
                loc: parts.loc * k,
                ori: parts.ori * k,
            };
            sgd_step(&mut model.params, &grads, &mut state.sgd, self.config, iter)?;
            state.history.push(LossRecord {
                iter,
                loss: parts.total(&w),
                cls_loss: parts.cls,
                loc_loss: parts.loc,
                ori_loss: parts.ori,
            });
            state.next_iter = iter + 1;
            let due =
                self.config.checkpoint_every > 0 && (iter + 1) % self.config.checkpoint_every == 0;
            // parameters are only snapshotted when a checkpoint is due
            state.params = if due {
                model.params.clone()
            } else {
                NetworkParams::new()
            };
            hooks.iteration_finished(self.stage, &state)?;
        }
        Ok(state.history)
    }
}

fn features_for<'a>(
    model: &Model,
    trunk: &'a Trunk<'a>,
    idx: usize,
    sample: &Sample,
) -> Result<(Option<Features>, std::borrow::Cow<'a, Tensor>)> {
    match trunk {
        Trunk::Trainable => {
            let f = model.features(&sample.image)?;
            let map = f.map().clone();
            Ok((Some(f), std::borrow::Cow::Owned(map)))
        }
        Trunk::Frozen(maps) => Ok((None, std::borrow::Cow::Borrowed(&maps[idx]))),
    }
}

/// One proposal-stage gradient on a sampled image; returns the batch-averaged loss parts.
#[allow(clippy::too_many_arguments)]
fn fcn_image_step(
    model: &Model,
    trunk: &Trunk<'_>,
    sample: &Sample,
    idx: usize,
    targets: &TargetGrid,
    config: &TrainConfig,
    rng: &mut ChaCha8Rng,
    grads: &mut NetworkParams,
) -> Result<LossParts> {
    let valid =
        |c: &CellTarget| c.row * STRIDE < sample.height() && c.col * STRIDE < sample.width();
    let pos: Vec<usize> = (0..targets.cells.len())
        .filter(|&i| targets.cells[i].positive && valid(&targets.cells[i]))
        .collect();
    let neg: Vec<usize> = (0..targets.cells.len())
        .filter(|&i| !targets.cells[i].positive && valid(&targets.cells[i]))
        .collect();
    let batch = sample_batch(&pos, &neg, config.positive_fraction, usize::MAX, rng);
    fcn_batch(
        model,
        trunk,
        idx,
        sample,
        targets,
        &batch,
        &config.loss_weights,
        grads,
    )
}

/// Proposal-stage loss over the cells in `batch`, accumulating gradients
/// into `grads`. Classification is averaged over the batch and offsets over
/// its positive cells.
#[allow(clippy::too_many_arguments)]
fn fcn_batch(
    model: &Model,
    trunk: &Trunk<'_>,
    idx: usize,
    sample: &Sample,
    targets: &TargetGrid,
    batch: &[usize],
    weights: &LossWeights,
    grads: &mut NetworkParams,
) -> Result<LossParts> {
    let (features, map) = features_for(model, trunk, idx, sample)?;
    let fwd = model.fcn_forward(&map)?;
    let np = batch
        .iter()
        .filter(|&&i| targets.cells[i].positive)
        .count()
        .max(1) as f64;
    let n = fwd.cells();
    let mut d_logits = Tensor::zeros(fwd.logits.shape());
    let mut d_offsets = Tensor::zeros(fwd.offsets.shape());
    let nb = batch.len().max(1) as f64;
    let mut parts = LossParts::default();
    for &i in batch {
        let cell = &targets.cells[i];
        let (p, dl, dt, _) = multitask_grad(
            fwd.cell_logits(i),
            fwd.cell_offset(i),
            None,
            cell.positive,
            cell.offset,
            weights,
        );
        parts.cls += p.cls / nb;
        parts.loc += p.loc / np;
        d_logits.data_mut()[i] = dl[0] / nb;
        d_logits.data_mut()[n + i] = dl[1] / nb;
        d_offsets.data_mut()[i] = dt[0] / np;
        d_offsets.data_mut()[n + i] = dt[1] / np;
    }
    let d_map = model.fcn_backward(&fwd, &d_logits, &d_offsets, grads)?;
    if let Some(f) = features {
        model.trunk_backward(&f, d_map, grads)?;
    }
    Ok(parts)
}

/// Proposal-stage loss of one image over the given cells and its gradient
/// with respect to every parameter.
pub fn fcn_batch_gradient(
    model: &Model,
    sample: &Sample,
    targets: &TargetGrid,
    batch: &[usize],
    weights: &LossWeights,
) -> Result<(LossParts, NetworkParams)> {
    let mut grads = NetworkParams::new();
    let parts = fcn_batch(
        model,
        &Trunk::Trainable,
        0,
        sample,
        targets,
        batch,
        weights,
        &mut grads,
    )?;
    Ok((parts, grads))
}

/// Trains the proposal head (and the trunk unless `frozen` features are
/// given) with the proposal-stage multi-task loss.
fn train_fcn_stage(
    model: &mut Model,
    dataset: &[Sample],
    config: &TrainConfig,
    stage: usize,
    frozen: Option<&[Tensor]>,
    hooks: &mut dyn TrainHooks,
) -> Result<Vec<LossRecord>> {
    if dataset.is_empty() {
        return Err(Error::Dataset("cannot train on an empty dataset".into()));
    }
    config.validate()?;
    let targets: Vec<TargetGrid> = dataset
        .iter()
        .map(|s| assign_fcn_targets(&s.truth, s.width(), s.height()))
        .collect();
    let run = StageRun {
        stage,
        iterations: config.fcn_iterations,
        trunk: frozen.map_or(Trunk::Trainable, Trunk::Frozen),
        config,
    };
    run.run(model, hooks, |model, rng, grads| {
        let idx = rng.random_range(0..dataset.len());
        fcn_image_step(
            model,
            &run.trunk,
            &dataset[idx],
            idx,
            &targets[idx],
            config,
            rng,
            grads,
        )
    })
}

/// Trains trunk and proposal head on `dataset`; returns the loss history.
pub fn train_fcn(
    model: &mut Model,
    dataset: &[Sample],
    config: &TrainConfig,
) -> Result<Vec<LossRecord>> {
    train_fcn_stage(model, dataset, config, 1, None, &mut NoHooks)
}

/// A proposal with its region-stage training label.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LabeledProposal {
    pub proposal: Minutia,
    pub positive: bool,
    /// Matched minutia minus proposal position, pixels.
    pub offset: [f64; 2],
    pub orientation: f64,
}

/// Labels each proposal against the nearest ground-truth minutia accepted by
/// `tol` (proposals carry no orientation, so callers pass a location-only
/// tolerance unless they have one).
pub fn label_proposals(
    proposals: &[Minutia],
    truth: &[Minutia],
    tol: &Tolerance,
) -> Vec<LabeledProposal> {
    proposals
        .iter()
        .map(|p| {
            let best = truth
                .iter()
                .filter_map(|t| tol.accepts(p, t).map(|(d, _)| (d, t)))
                .min_by(|a, b| a.0.total_cmp(&b.0));
            match best {
                Some((_, t)) => LabeledProposal {
                    proposal: *p,
                    positive: true,
                    offset: [t.x - p.x, t.y - p.y],
                    orientation: t.theta.unwrap_or(0.0),
                },
                None => LabeledProposal {
                    proposal: *p,
                    positive: false,
                    offset: [0.0; 2],
                    orientation: 0.0,
                },
            }
        })
        .collect()
}

/// Default labelling rule for region training: within 15 px of a minutia.
pub fn region_label_tolerance() -> Tolerance {
    Tolerance::location_only(Tolerance::default().dist)
}

#[allow(clippy::too_many_arguments)]
fn region_image_step(
    model: &Model,
    trunk: &Trunk<'_>,
    sample: &Sample,
    idx: usize,
    labels: &[LabeledProposal],
    config: &TrainConfig,
    rng: &mut ChaCha8Rng,
    grads: &mut NetworkParams,
) -> Result<LossParts> {
    let pos: Vec<usize> = (0..labels.len()).filter(|&i| labels[i].positive).collect();
    let neg: Vec<usize> = (0..labels.len()).filter(|&i| !labels[i].positive).collect();
    let cap = ((config.region_batch as f64 * config.positive_fraction).round() as usize).max(1);
    let mut batch = sample_batch(&pos, &neg, config.positive_fraction, cap, rng);
    batch.truncate(config.region_batch);
    region_batch(
        model,
        trunk,
        idx,
        sample,
        labels,
        &batch,
        &config.loss_weights,
        grads,
    )
}

/// Region-stage loss over the proposals in `batch`, accumulating gradients
/// into `grads`.
#[allow(clippy::too_many_arguments)]
fn region_batch(
    model: &Model,
    trunk: &Trunk<'_>,
    idx: usize,
    sample: &Sample,
    labels: &[LabeledProposal],
    batch: &[usize],
    weights: &LossWeights,
    grads: &mut NetworkParams,
) -> Result<LossParts> {
    let (features, map) = features_for(model, trunk, idx, sample)?;
    let centres: Vec<(f64, f64)> = batch
        .iter()
        .map(|&i| (labels[i].proposal.x, labels[i].proposal.y))
        .collect();
    let fwd = model.region_forward(&map, &centres, sample.width(), sample.height())?;
    let n = batch.len();
    let mut d_logits = Tensor::zeros(&[n, 2]);
    let mut d_reg = Tensor::zeros(&[n, 3]);
    let nb = n as f64;
    let np = batch.iter().filter(|&&i| labels[i].positive).count().max(1) as f64;
    let mut parts = LossParts::default();
    for (k, &i) in batch.iter().enumerate() {
        let l = &labels[i];
        let logits = [fwd.logits.data()[2 * k], fwd.logits.data()[2 * k + 1]];
        let r = &fwd.regression.data()[3 * k..3 * k + 3];
        let (p, dl, dt, d_o) = multitask_grad(
            logits,
            [r[0], r[1]],
            Some((r[2] * ORIENTATION_SCALE, l.orientation)),
            l.positive,
            l.offset,
            weights,
        );
        parts.cls += p.cls / nb;
        parts.loc += p.loc / np;
        parts.ori += p.ori / np;
        d_logits.data_mut()[2 * k] = dl[0] / nb;
        d_logits.data_mut()[2 * k + 1] = dl[1] / nb;
        d_reg.data_mut()[3 * k] = dt[0] / np;
        d_reg.data_mut()[3 * k + 1] = dt[1] / np;
        d_reg.data_mut()[3 * k + 2] = d_o * ORIENTATION_SCALE / np;
    }
    let d_map = model.region_backward(map.shape(), &fwd, &d_logits, &d_reg, grads)?;
    if let Some(f) = features {
        model.trunk_backward(&f, d_map, grads)?;
    }
    Ok(parts)
}

/// Region-stage loss of one image over the given labelled proposals and its
/// gradient with respect to every parameter.
pub fn region_batch_gradient(
    model: &Model,
    sample: &Sample,
    labels: &[LabeledProposal],
    batch: &[usize],
    weights: &LossWeights,
) -> Result<(LossParts, NetworkParams)> {
    let mut grads = NetworkParams::new();
    let parts = region_batch(
        model,
        &Trunk::Trainable,
        0,
        sample,
        labels,
        batch,
        weights,
        &mut grads,
    )?;
    Ok((parts, grads))
}

fn train_region_stage(
    model: &mut Model,
    dataset: &[Sample],
    proposals: &[Vec<Minutia>],
    config: &TrainConfig,
    stage: usize,
    frozen: Option<&[Tensor]>,
    hooks: &mut dyn TrainHooks,
) -> Result<Vec<LossRecord>> {
    if dataset.is_empty() {
        return Err(Error::Dataset("cannot train on an empty dataset".into()));
    }
    if proposals.len() != dataset.len() {
        return Err(Error::invalid("one proposal list per image is required"));
    }
    config.validate()?;
    let tol = region_label_tolerance();
    let labels: Vec<Vec<LabeledProposal>> = dataset
        .iter()
        .zip(proposals)
        .map(|(s, p)| label_proposals(p, &s.truth, &tol))
        .collect();
    if !labels.iter().flatten().any(|l| l.positive) {
        return Err(Error::Dataset(
            "no proposal lies within 15 px of a ground-truth minutia; lower the proposal threshold"
                .into(),
        ));
    }
    let usable: Vec<usize> = (0..dataset.len())
        .filter(|&i| !labels[i].is_empty())
        .collect();
    let run = StageRun {
        stage,
        iterations: config.region_iterations,
        trunk: frozen.map_or(Trunk::Trainable, Trunk::Frozen),
        config,
    };
    run.run(model, hooks, |model, rng, grads| {
        let idx = usable[rng.random_range(0..usable.len())];
        region_image_step(
            model,
            &run.trunk,
            &dataset[idx],
            idx,
            &labels[idx],
            config,
            rng,
            grads,
        )
    })
}

/// Trains trunk and region head on per-image proposals.
pub fn train_region(
    model: &mut Model,
    dataset: &[Sample],
    proposals: &[Vec<Minutia>],
    config: &TrainConfig,
) -> Result<Vec<LossRecord>> {
    train_region_stage(model, dataset, proposals, config, 2, None, &mut NoHooks)
}

/// Proposal-stage candidates for one feature map: threshold, then
/// location-only suppression.
pub fn proposals_from_map(
    model: &Model,
    map: &Tensor,
    width: usize,
    height: usize,
    threshold: f64,
) -> Result<Vec<Minutia>> {
    let fwd = model.fcn_forward(map)?;
    let scores = model.score_map(&fwd, width, height)?;
    Ok(nms(
        &decode_proposals(&scores, threshold),
        &NmsParams::default(),
    ))
}

pub fn generate_proposals(
    model: &Model,
    dataset: &[Sample],
    threshold: f64,
) -> Result<Vec<Vec<Minutia>>> {
    dataset
        .iter()
        .map(|s| {
            let f = model.features(&s.image)?;
            proposals_from_map(model, f.map(), s.width(), s.height(), threshold)
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct StageSummary {
    pub stage: usize,
    pub description: String,
    pub iterations: usize,
    pub final_loss: Option<f64>,
    /// Proposals generated for the next stage (stages 1 and 3).
    pub proposals: Option<usize>,
    pub positive_proposals: Option<usize>,
    pub resumed: bool,
    #[serde(skip)]
    pub history: Vec<LossRecord>,
}

#[derive(Debug, Clone)]
pub struct CotrainResult {
    pub model: Model,
    pub stages: Vec<StageSummary>,
}

pub const STAGE_DESCRIPTIONS: [&str; 4] = [
    "train trunk + proposal head from initialisation",
    "train trunk + region head from the same initialisation on stage-1 proposals",
    "train a fresh proposal head on the frozen stage-2 trunk",
    "fine-tune the region head on stage-3 proposals with the frozen trunk",
];

/// Four-step alternating schedule leaving both heads on one frozen trunk:
///
/// 1. trunk + proposal head from initialisation; generate proposals;
/// 2. trunk + region head from the same initialisation on those proposals;
/// 3. fresh proposal head on the stage-2 trunk, frozen; regenerate proposals;
/// 4. stage-2 region head fine-tuned on the new proposals, trunk frozen.
pub fn cotrain(
    dataset: &[Sample],
    model_config: &BackboneConfig,
    config: &TrainConfig,
    proposal_threshold: f64,
    hooks: &mut dyn TrainHooks,
) -> Result<CotrainResult> {
    if dataset.is_empty() {
        return Err(Error::Dataset("cannot train on an empty dataset".into()));
    }
    config.validate()?;
    let initial = init_params(model_config, config.seed)?;
    let base = Model::new(model_config.clone(), initial.clone())?;
    let mut stages = Vec::new();
    let tol = region_label_tolerance();
    let count_positive = |props: &[Vec<Minutia>]| -> usize {
        dataset
            .iter()
            .zip(props)
            .map(|(s, p)| {
                label_proposals(p, &s.truth, &tol)
                    .iter()
                    .filter(|l| l.positive)
                    .count()
            })
            .sum()
    };

    // stage 1
    let mut step1 = base.clone();
    let (history, resumed) = run_or_resume(hooks, 1, &mut step1, |m, h| {
        train_fcn_stage(m, dataset, config, 1, None, h)
    })?;
    let proposals1 = generate_proposals(&step1, dataset, proposal_threshold)?;
    stages.push(summary(
        1,
        config.fcn_iterations,
        history,
        resumed,
        Some(&proposals1),
        count_positive(&proposals1),
    ));

    // stage 2
    let mut step2 = base.clone();
    let (history, resumed) = run_or_resume(hooks, 2, &mut step2, |m, h| {
        train_region_stage(m, dataset, &proposals1, config, 2, None, h)
    })?;
    stages.push(summary(
        2,
        config.region_iterations,
        history,
        resumed,
        None,
        0,
    ));

    // stage 3: shared trunk from stage 2, fresh proposal head
    let frozen: Vec<Tensor> = dataset
        .iter()
        .map(|s| Ok(step2.features(&s.image)?.trace.into_output()))
        .collect::<Result<_>>()?;
    let mut step3 = step2.clone();
    step3.params.copy_group(&initial, FCN);
    let (history, resumed) = run_or_resume(hooks, 3, &mut step3, |m, h| {
        train_fcn_stage(m, dataset, config, 3, Some(&frozen), h)
    })?;
    let proposals3: Vec<Vec<Minutia>> = dataset
        .iter()
        .zip(&frozen)
        .map(|(s, map)| proposals_from_map(&step3, map, s.width(), s.height(), proposal_threshold))
        .collect::<Result<_>>()?;
    stages.push(summary(
        3,
        config.fcn_iterations,
        history,
        resumed,
        Some(&proposals3),
        count_positive(&proposals3),
    ));

    // stage 4
    let mut step4 = step3.clone();
    let (history, resumed) = run_or_resume(hooks, 4, &mut step4, |m, h| {
        train_region_stage(m, dataset, &proposals3, config, 4, Some(&frozen), h)
    })?;
    stages.push(summary(
        4,
        config.region_iterations,
        history,
        resumed,
        None,
        0,
    ));

    debug_assert!(step4
        .params
        .group(BACKBONE)
        .eq(step2.params.group(BACKBONE)));
    debug_assert!(step4.params.group(FCN).eq(step3.params.group(FCN)));
    Ok(CotrainResult {
        model: step4,
        stages,
    })
}

fn summary(
    stage: usize,
    iterations: usize,
    history: Vec<LossRecord>,
    resumed: bool,
    proposals: Option<&[Vec<Minutia>]>,
    positives: usize,
) -> StageSummary {
    StageSummary {
        stage,
        description: STAGE_DESCRIPTIONS[stage - 1].to_string(),
        iterations,
        final_loss: history.last().map(|r| r.loss),
        proposals: proposals.map(|p| p.iter().map(Vec::len).sum()),
        positive_proposals: proposals.map(|_| positives),
        resumed,
        history,
    }
}

/// Runs a stage unless the hooks already hold its finished parameters.
fn run_or_resume(
    hooks: &mut dyn TrainHooks,
    stage: usize,
    model: &mut Model,
    train: impl FnOnce(&mut Model, &mut dyn TrainHooks) -> Result<Vec<LossRecord>>,
) -> Result<(Vec<LossRecord>, bool)> {
    if let Some((params, history)) = hooks.completed_stage(stage)? {
        *model = Model::new(model.config().clone(), params)?;
        return Ok((history, true));
    }
    let history = train(model, hooks)?;
    hooks.stage_finished(stage, &model.params, &history)?;
    Ok((history, false))
}

/// File-backed [`TrainHooks`]: per-stage checkpoints and loss CSVs, plus a
/// rolling mid-stage checkpoint every `checkpoint_every` iterations.
pub struct RunDir {
    dir: PathBuf,
    resume: bool,
}

const VELOCITY_PREFIX: &str = "velocity/";

impl RunDir {
    pub fn new(dir: &Path, resume: bool) -> Result<Self> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        Ok(RunDir {
            dir: dir.to_path_buf(),
            resume,
        })
    }

    pub fn stage_checkpoint(&self, stage: usize) -> PathBuf {
        self.dir.join(format!("stage{stage}.ckpt"))
    }

    pub fn stage_csv(&self, stage: usize) -> PathBuf {
        self.dir.join(format!("stage{stage}_loss.csv"))
    }

    fn partial_checkpoint(&self, stage: usize) -> PathBuf {
        self.dir.join(format!("stage{stage}.partial.ckpt"))
    }

    fn partial_history(&self, stage: usize) -> PathBuf {
        self.dir.join(format!("stage{stage}.partial.json"))
    }

    fn write(&self, path: &Path, bytes: &[u8]) -> Result<()> {
        // write-then-rename so an interrupted run never leaves a torn file
        let tmp = path.with_extension("tmp");
        std::fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
        std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
    }
}

#[derive(Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
struct PartialProgress {
    next_iter: usize,
    history: Vec<LossRecord>,
}

fn parse_history_csv(text: &str, path: &Path) -> Result<Vec<LossRecord>> {
    text.lines()
        .skip(1)
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            let f: Vec<&str> = l.split(',').collect();
            let err = || Error::Parse {
                path: path.to_path_buf(),
                line: i + 2,
                reason: "expected iter,loss,clsLoss,locLoss,oriLoss".into(),
            };
            if f.len() != 5 {
                return Err(err());
            }
            let num = |s: &str| s.parse::<f64>().map_err(|_| err());
            Ok(LossRecord {
                iter: f[0].parse().map_err(|_| err())?,
                loss: num(f[1])?,
                cls_loss: num(f[2])?,
                loc_loss: num(f[3])?,
                ori_loss: num(f[4])?,
            })
        })
        .collect()
}

impl TrainHooks for RunDir {
    fn completed_stage(
        &mut self,
        stage: usize,
    ) -> Result<Option<(NetworkParams, Vec<LossRecord>)>> {
        let ckpt = self.stage_checkpoint(stage);
        if !self.resume || !ckpt.exists() {
            return Ok(None);
        }
        let bytes = std::fs::read(&ckpt).map_err(|e| Error::io(&ckpt, e))?;
        let csv_path = self.stage_csv(stage);
        let csv = std::fs::read_to_string(&csv_path).map_err(|e| Error::io(&csv_path, e))?;
        Ok(Some((
            decode_checkpoint(&bytes)?,
            parse_history_csv(&csv, &csv_path)?,
        )))
    }

    fn stage_finished(
        &mut self,
        stage: usize,
        params: &NetworkParams,
        history: &[LossRecord],
    ) -> Result<()> {
        self.write(&self.stage_csv(stage), history_csv(history).as_bytes())?;
        self.write(&self.stage_checkpoint(stage), &encode_checkpoint(params)?)?;
        for p in [self.partial_checkpoint(stage), self.partial_history(stage)] {
            if p.exists() {
                std::fs::remove_file(&p).map_err(|e| Error::io(&p, e))?;
            }
        }
        Ok(())
    }

    fn resume_point(&mut self, stage: usize) -> Result<Option<StageState>> {
        let ckpt = self.partial_checkpoint(stage);
        let hist = self.partial_history(stage);
        if !self.resume || !ckpt.exists() || !hist.exists() {
            return Ok(None);
        }
        let bytes = std::fs::read(&ckpt).map_err(|e| Error::io(&ckpt, e))?;
        let stored = decode_checkpoint(&bytes)?;
        let mut params = NetworkParams::new();
        let mut velocity = NetworkParams::new();
        for (name, t) in stored.iter() {
            match name.strip_prefix(VELOCITY_PREFIX) {
                Some(n) => velocity.insert(n, t.clone())?,
                None => params.insert(name, t.clone())?,
            }
        }
        let text = std::fs::read_to_string(&hist).map_err(|e| Error::io(&hist, e))?;
        let progress: PartialProgress =
            serde_json::from_str(&text).map_err(|source| Error::Json { path: hist, source })?;
        Ok(Some(StageState {
            next_iter: progress.next_iter,
            params,
            sgd: SgdState { velocity },
            history: progress.history,
        }))
    }

    fn iteration_finished(&mut self, stage: usize, state: &StageState) -> Result<()> {
        if state.params.is_empty() {
            return Ok(());
        }
        let mut stored = state.params.clone();
        for (name, t) in state.sgd.velocity.iter() {
            stored.insert(format!("{VELOCITY_PREFIX}{name}"), t.clone())?;
        }
        self.write(
            &self.partial_checkpoint(stage),
            &encode_checkpoint(&stored)?,
        )?;
        let progress = PartialProgress {
            next_iter: state.next_iter,
            history: state.history.clone(),
        };
        let json = serde_json::to_string(&progress).map_err(|source| Error::Json {
            path: self.partial_history(stage),
            source,
        })?;
        self.write(&self.partial_history(stage), json.as_bytes())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn toy_target_layout() {
        // positive cells (row 2, col 3) and (row 3, col 2)
        let truth = [
            Minutia::new(16.0 * 3.0 + 8.0 + 3.0, 16.0 * 2.0 + 8.0 - 2.0, 0.0),
            Minutia::new(16.0 * 2.0 + 8.0 - 4.0, 16.0 * 3.0 + 8.0 + 3.0, 0.0),
        ];
        let g = assign_fcn_targets(&truth, 96, 96);
        let pos: Vec<_> = g.positives().map(|c| (c.row, c.col, c.offset)).collect();
        assert_eq!(pos, vec![(2, 3, [3.0, -2.0]), (3, 2, [-4.0, 3.0])]);
    }

    #[test]
    fn centre_gives_zero_offset_and_empty_truth_is_negative() {
        let g = assign_fcn_targets(&[Minutia::new(24.0, 40.0, 0.0)], 64, 64);
        assert_eq!(g.at(2, 1).offset, [0.0, 0.0]);
        assert!(g.at(2, 1).positive);
        let g = assign_fcn_targets(&[], 64, 48);
        assert_eq!((g.rows, g.cols), (3, 4));
        assert_eq!(g.positives().count(), 0);
    }

    #[test]
    fn nearest_to_centre_wins() {
        let far = Minutia::new(1.0, 1.0, 0.0);
        let near = Minutia::new(9.0, 7.0, 90.0);
        let g = assign_fcn_targets(&[far, near], 16, 16);
        assert_eq!(g.at(0, 0).offset, [1.0, -1.0]);
        let g = assign_fcn_targets(&[near, far], 16, 16);
        assert_eq!(g.at(0, 0).offset, [1.0, -1.0]);
    }

    fn one_param(w: f64) -> NetworkParams {
        let mut p = NetworkParams::new();
        p.insert("w", Tensor::full(&[1], w)).unwrap();
        p
    }

    #[test]
    fn vanilla_step() {
        let cfg = TrainConfig {
            momentum: 0.0,
            weight_decay: 0.0,
            ..TrainConfig::default()
        };
        let mut p = one_param(1.0);
        sgd_step(&mut p, &one_param(1.0), &mut SgdState::default(), &cfg, 0).unwrap();
        assert!((p.get("w").unwrap().data()[0] - 0.999).abs() < 1e-15);
    }

    #[test]
    fn velocity_decays_geometrically_without_gradient() {
        let cfg = TrainConfig {
            weight_decay: 0.0,
            ..TrainConfig::default()
        };
        let mut p = one_param(0.0);
        let mut s = SgdState::default();
        sgd_step(&mut p, &one_param(1.0), &mut s, &cfg, 0).unwrap();
        let v0 = s.velocity.get("w").unwrap().data()[0];
        sgd_step(&mut p, &one_param(0.0), &mut s, &cfg, 1).unwrap();
        let v1 = s.velocity.get("w").unwrap().data()[0];
        assert!((v1 - 0.9 * v0).abs() < 1e-18);
    }

    #[test]
    fn zero_gradient_zero_velocity_is_fixed_point() {
        let cfg = TrainConfig {
            weight_decay: 0.0,
            ..TrainConfig::default()
        };
        let mut p = one_param(0.7);
        sgd_step(&mut p, &one_param(0.0), &mut SgdState::default(), &cfg, 0).unwrap();
        assert_eq!(p.get("w").unwrap().data()[0], 0.7);
    }

    #[test]
    fn nan_gradient_names_parameter_and_updates_nothing() {
        let mut p = one_param(1.0);
        p.insert("b", Tensor::full(&[1], 2.0)).unwrap();
        let mut g = one_param(0.5);
        g.insert("b", Tensor::full(&[1], f64::NAN)).unwrap();
        let err = sgd_step(
            &mut p,
            &g,
            &mut SgdState::default(),
            &TrainConfig::default(),
            0,
        )
        .unwrap_err();
        assert!(
            matches!(&err, Error::NonFiniteGradient(n) if n == "b"),
            "{err}"
        );
        assert_eq!(p.get("w").unwrap().data()[0], 1.0);
    }

    #[test]
    fn quadratic_bowl_converges() {
        // f(w) = w²/2, gradient w; closed-form recurrence is a damped oscillator
        let cfg = TrainConfig {
            lr_initial: 0.1,
            weight_decay: 0.0,
            ..TrainConfig::default()
        };
        let mut p = one_param(1.0);
        let mut s = SgdState::default();
        let (mut w, mut v) = (1.0f64, 0.0f64);
        for i in 0..200 {
            let g = p.get("w").unwrap().clone();
            let mut grads = NetworkParams::new();
            grads.insert("w", g).unwrap();
            sgd_step(&mut p, &grads, &mut s, &cfg, i).unwrap();
            v = 0.9 * v - 0.1 * w;
            w += v;
        }
        let got = p.get("w").unwrap().data()[0];
        assert_eq!(got, w);
        assert!(got.abs() < 1e-3, "{got}");
    }

    #[test]
    fn learning_rate_schedule() {
        let cfg = TrainConfig::default();
        assert_eq!(cfg.learning_rate(0), 0.001);
        assert_eq!(cfg.learning_rate(2999), 0.001);
        assert_eq!(cfg.learning_rate(3000), 0.0001);
    }

    #[test]
    fn batch_respects_positive_fraction() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let pos: Vec<usize> = (0..5).collect();
        let neg: Vec<usize> = (5..100).collect();
        let b = sample_batch(&pos, &neg, 0.25, usize::MAX, &mut rng);
        assert_eq!(b.len(), 20);
        let mut head = b[..5].to_vec();
        head.sort();
        assert_eq!(head, vec![0, 1, 2, 3, 4]);
        let b = sample_batch(&[], &neg, 0.25, usize::MAX, &mut rng);
        assert_eq!(b.len(), 3);
        let b = sample_batch(&pos, &neg, 0.25, 2, &mut rng);
        assert_eq!(b.len(), 8);
    }

    #[test]
    fn proposal_labels() {
        let truth = [Minutia::new(50.0, 50.0, 45.0)];
        let tol = region_label_tolerance();
        let on = label_proposals(&[Minutia::new(50.0, 50.0, 45.0)], &truth, &tol)[0];
        assert!(on.positive && on.offset == [0.0, 0.0] && on.orientation == 45.0);
        let far = label_proposals(&[Minutia::proposal(70.0, 50.0, 0.9)], &truth, &tol)[0];
        assert!(!far.positive);
        // with the evaluation predicate a 90° disagreement is rejected
        let skew = label_proposals(
            &[Minutia::new(60.0, 50.0, 135.0)],
            &truth,
            &Tolerance::default(),
        )[0];
        assert!(!skew.positive);
        let near = label_proposals(&[Minutia::proposal(60.0, 50.0, 0.9)], &truth, &tol)[0];
        assert!(near.positive && near.offset == [-10.0, 0.0]);
    }
}
