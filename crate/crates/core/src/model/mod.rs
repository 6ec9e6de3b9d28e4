//! Network assembly: a stride-16 convolutional trunk shared by the dense
//! proposal head and the region head.
//!
//! Parameter names are grouped by prefix: `backbone.*` for the trunk,
//! `fcn.*` for the proposal head and `region.*` for the region head. Both
//! heads read the same trunk tensors, so one [`NetworkParams`] holds a
//! single copy of the shared layers.

mod checkpoint;
pub(crate) mod graph;
mod params;

pub use checkpoint::{decode_checkpoint, encode_checkpoint, load_checkpoint, save_checkpoint};
pub use graph::{LayerSpec, Trace};
pub use params::NetworkParams;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::minutia::Minutia;
use crate::tensor::{
    conv2d_backward, conv2d_forward, fc_backward, fc_forward, relu_backward, relu_forward,
    roi_pool, roi_pool_backward, softmax2, Roi, Tensor,
};
use graph::LayerOp;

/// Total downsampling of the trunk.
pub const STRIDE: usize = 16;
/// Side of the square image region examined by the region head.
pub const REGION_SIZE: f64 = 32.0;
/// Bins per side of region pooling.
pub const ROI_BINS: usize = 6;
/// The region regressor's orientation output is in units of this many degrees.
pub const ORIENTATION_SCALE: f64 = 180.0;
/// Subtracted from every pixel before the trunk, so the zero network input
/// is the mid-gray image.
pub const INPUT_MEAN: f64 = 0.5;

pub const BACKBONE: &str = "backbone.";
pub const FCN: &str = "fcn.";
pub const REGION: &str = "region.";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase", deny_unknown_fields)]
pub struct StageConfig {
    pub channels: usize,
    pub kernel: usize,
}

/// Trunk and head sizes. Every trunk stage is conv → ReLU → 2×2 max-pool,
/// so four stages give the fixed total stride of 16.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase", deny_unknown_fields, default)]
pub struct BackboneConfig {
    pub stages: Vec<StageConfig>,
    /// Width of the proposal head's 3×3 convolution.
    pub head_channels: usize,
    /// Width of the region head's two fully connected layers.
    pub fc_width: usize,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        BackboneConfig {
            stages: [16, 32, 64, 128]
                .into_iter()
                .map(|channels| StageConfig {
                    channels,
                    kernel: 3,
                })
                .collect(),
            head_channels: 256,
            fc_width: 256,
        }
    }
}

impl BackboneConfig {
    pub fn validate(&self) -> Result<()> {
        let stride = 1usize << self.stages.len().min(16);
        if stride != STRIDE {
            return Err(Error::Config(format!(
                "backbone has {} stride-2 stages (total stride {stride}); exactly 4 are required for stride {STRIDE}",
                self.stages.len()
            )));
        }
        for (i, s) in self.stages.iter().enumerate() {
            if s.channels == 0 || s.kernel == 0 || s.kernel % 2 == 0 {
                return Err(Error::Config(format!(
                    "stage {}: channels must be positive and kernel odd, got {s:?}",
                    i + 1
                )));
            }
        }
        if self.head_channels == 0 || self.fc_width == 0 {
            return Err(Error::Config("head widths must be positive".into()));
        }
        Ok(())
    }

    pub fn feature_channels(&self) -> usize {
        self.stages.last().map_or(1, |s| s.channels)
    }

    /// Expected parameter shapes in canonical order.
    pub fn param_shapes(&self) -> Vec<(String, Vec<usize>)> {
        let mut shapes = Vec::new();
        let mut in_ch = 1;
        for (i, s) in self.stages.iter().enumerate() {
            let n = i + 1;
            shapes.push((
                format!("{BACKBONE}conv{n}.weight"),
                vec![s.channels, in_ch, s.kernel, s.kernel],
            ));
            shapes.push((format!("{BACKBONE}conv{n}.bias"), vec![s.channels]));
            in_ch = s.channels;
        }
        let h = self.head_channels;
        shapes.push((format!("{FCN}conv.weight"), vec![h, in_ch, 3, 3]));
        shapes.push((format!("{FCN}conv.bias"), vec![h]));
        shapes.push((format!("{FCN}cls.weight"), vec![2, h, 1, 1]));
        shapes.push((format!("{FCN}cls.bias"), vec![2]));
        shapes.push((format!("{FCN}loc.weight"), vec![2, h, 1, 1]));
        shapes.push((format!("{FCN}loc.bias"), vec![2]));
        let f = self.fc_width;
        let pooled = in_ch * ROI_BINS * ROI_BINS;
        shapes.push((format!("{REGION}fc1.weight"), vec![f, pooled]));
        shapes.push((format!("{REGION}fc1.bias"), vec![f]));
        shapes.push((format!("{REGION}fc2.weight"), vec![f, f]));
        shapes.push((format!("{REGION}fc2.bias"), vec![f]));
        shapes.push((format!("{REGION}cls.weight"), vec![2, f]));
        shapes.push((format!("{REGION}cls.bias"), vec![2]));
        shapes.push((format!("{REGION}reg.weight"), vec![3, f]));
        shapes.push((format!("{REGION}reg.bias"), vec![3]));
        shapes
    }

    fn trunk_layers(&self) -> Vec<LayerSpec> {
        let mut layers = Vec::new();
        for (i, s) in self.stages.iter().enumerate() {
            let n = i + 1;
            layers.push(LayerSpec {
                name: format!("conv{n}"),
                op: LayerOp::Conv {
                    weight: format!("{BACKBONE}conv{n}.weight"),
                    bias: format!("{BACKBONE}conv{n}.bias"),
                    pad: s.kernel / 2,
                },
            });
            layers.push(LayerSpec {
                name: format!("relu{n}"),
                op: LayerOp::Relu,
            });
            layers.push(LayerSpec {
                name: format!("pool{n}"),
                op: LayerOp::MaxPool { win: 2, stride: 2 },
            });
        }
        layers
    }

    fn stem_layers() -> Vec<LayerSpec> {
        vec![
            LayerSpec {
                name: "fcn_conv".into(),
                op: LayerOp::Conv {
                    weight: format!("{FCN}conv.weight"),
                    bias: format!("{FCN}conv.bias"),
                    pad: 1,
                },
            },
            LayerSpec {
                name: "fcn_relu".into(),
                op: LayerOp::Relu,
            },
        ]
    }
}

/// Deterministic He initialisation: kernels ~ N(0, 2 / fan_in), biases zero.
pub fn init_params(config: &BackboneConfig, seed: u64) -> Result<NetworkParams> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut params = NetworkParams::new();
    for (name, shape) in config.param_shapes() {
        let tensor = if name.ends_with(".bias") {
            Tensor::zeros(&shape)
        } else {
            let fan_in: usize = shape[1..].iter().product();
            let normal = Normal::new(0.0, (2.0 / fan_in as f64).sqrt())
                .map_err(|e| Error::Config(e.to_string()))?;
            Tensor::from_fn(&shape, |_| normal.sample(&mut rng))
        };
        params.insert(name, tensor)?;
    }
    Ok(params)
}

/// Dense proposal-stage output for one image.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreMap {
    /// `[Hc, Wc]` minutia probabilities.
    pub scores: Tensor,
    /// `[2, Hc, Wc]` location offsets in pixels (x then y) from each cell centre.
    pub offsets: Tensor,
    pub stride: usize,
    pub image_width: usize,
    pub image_height: usize,
}

impl ScoreMap {
    pub fn rows(&self) -> usize {
        self.scores.shape()[0]
    }

    pub fn cols(&self) -> usize {
        self.scores.shape()[1]
    }

    pub fn score(&self, r: usize, c: usize) -> f64 {
        self.scores.data()[r * self.cols() + c]
    }

    pub fn offset(&self, r: usize, c: usize) -> [f64; 2] {
        let n = self.rows() * self.cols();
        let i = r * self.cols() + c;
        [self.offsets.data()[i], self.offsets.data()[n + i]]
    }

    /// Whether a cell's 16×16 region contains at least one real (unpadded) pixel.
    pub fn cell_valid(&self, r: usize, c: usize) -> bool {
        r * self.stride < self.image_height && c * self.stride < self.image_width
    }
}

/// Region-head prediction for one proposal.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RegionOutput {
    pub prob: f64,
    pub dx: f64,
    pub dy: f64,
    /// Degrees, not yet normalised into `[0, 360)`.
    pub orientation: f64,
}

/// Trunk activations for one image.
#[derive(Debug, Clone)]
pub struct Features {
    pub trace: Trace,
    pub image_width: usize,
    pub image_height: usize,
}

impl Features {
    /// The shared `[C, Hc, Wc]` feature map read by both heads.
    pub fn map(&self) -> &Tensor {
        self.trace.output()
    }
}

/// Intermediate values of the proposal head, kept for back-propagation.
#[derive(Debug, Clone)]
pub struct FcnForward {
    stem: Trace,
    pub logits: Tensor,
    pub offsets: Tensor,
}

impl FcnForward {
    pub fn cells(&self) -> usize {
        self.logits.len() / 2
    }

    pub fn cell_logits(&self, i: usize) -> [f64; 2] {
        let n = self.cells();
        [self.logits.data()[i], self.logits.data()[n + i]]
    }

    pub fn cell_offset(&self, i: usize) -> [f64; 2] {
        let n = self.cells();
        [self.offsets.data()[i], self.offsets.data()[n + i]]
    }
}

/// Intermediate values of the region head for a batch of proposals.
#[derive(Debug, Clone)]
pub struct RegionForward {
    pooled: Tensor,
    switches: Vec<Vec<usize>>,
    h1: Tensor,
    r1: Tensor,
    h2: Tensor,
    r2: Tensor,
    /// `[N, 2]` class logits.
    pub logits: Tensor,
    /// `[N, 3]` raw regression outputs (Δx px, Δy px, orientation / 180°).
    pub regression: Tensor,
}

impl RegionForward {
    pub fn len(&self) -> usize {
        self.switches.len()
    }

    pub fn is_empty(&self) -> bool {
        self.switches.is_empty()
    }

    pub fn output(&self, i: usize) -> RegionOutput {
        let l = &self.logits.data()[2 * i..2 * i + 2];
        let r = &self.regression.data()[3 * i..3 * i + 3];
        RegionOutput {
            prob: softmax2([l[0], l[1]])[1],
            dx: r[0],
            dy: r[1],
            orientation: r[2] * ORIENTATION_SCALE,
        }
    }
}

/// A network architecture bound to a compatible parameter set.
#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    config: BackboneConfig,
    pub params: NetworkParams,
    trunk: Vec<LayerSpec>,
    stem: Vec<LayerSpec>,
}

impl Model {
    /// Checks every expected tensor is present with the right shape.
    pub fn new(config: BackboneConfig, params: NetworkParams) -> Result<Self> {
        config.validate()?;
        for (name, shape) in config.param_shapes() {
            let t = params.get(&name).ok_or_else(|| Error::ShapeMismatch {
                name: name.clone(),
                expected: shape.clone(),
                found: vec![],
            })?;
            if t.shape() != shape.as_slice() {
                return Err(Error::ShapeMismatch {
                    name,
                    expected: shape,
                    found: t.shape().to_vec(),
                });
            }
        }
        let expected = config.param_shapes().len();
        if params.len() != expected {
            let known: Vec<String> = config.param_shapes().into_iter().map(|(n, _)| n).collect();
            let extra: Vec<&str> = params
                .names()
                .filter(|n| !known.iter().any(|k| k == n))
                .collect();
            return Err(Error::invalid(format!(
                "unexpected parameters for this architecture: {}",
                extra.join(", ")
            )));
        }
        let trunk = config.trunk_layers();
        Ok(Model {
            config,
            params,
            trunk,
            stem: BackboneConfig::stem_layers(),
        })
    }

    pub fn init(config: BackboneConfig, seed: u64) -> Result<Self> {
        let params = init_params(&config, seed)?;
        Model::new(config, params)
    }

    pub fn config(&self) -> &BackboneConfig {
        &self.config
    }

    /// Names of the layers whose activations can be targeted, in network order.
    pub fn layer_names(&self) -> Vec<String> {
        std::iter::once("input".to_string())
            .chain(self.trunk.iter().chain(&self.stem).map(|l| l.name.clone()))
            .collect()
    }

    /// Trunk followed by the proposal-head stem, truncated after `layer`.
    pub(crate) fn layers_through(&self, layer: &str) -> Result<Vec<LayerSpec>> {
        if layer == "input" {
            return Ok(Vec::new());
        }
        let all: Vec<LayerSpec> = self.trunk.iter().chain(&self.stem).cloned().collect();
        match all.iter().position(|l| l.name == layer) {
            Some(i) => Ok(all[..=i].to_vec()),
            None => Err(Error::UnknownLayer {
                name: layer.to_string(),
                valid: self.layer_names(),
            }),
        }
    }

    /// Runs the trunk once on a `[1, H, W]` image (replicate-padded to a
    /// multiple of the stride, then centred by [`INPUT_MEAN`]).
    pub fn features(&self, image: &Tensor) -> Result<Features> {
        let (h, w) = image_dims(image)?;
        let input = centred(pad_to_stride(image), INPUT_MEAN);
        let trace = graph::forward(&self.trunk, &self.params, input, None)?;
        Ok(Features {
            trace,
            image_width: w,
            image_height: h,
        })
    }

    /// Back-propagates a feature-map gradient through the trunk.
    pub fn trunk_backward(
        &self,
        features: &Features,
        d_map: Tensor,
        grads: &mut NetworkParams,
    ) -> Result<()> {
        graph::backward(
            &self.trunk,
            &self.params,
            &features.trace,
            d_map,
            Some(grads),
        )?;
        Ok(())
    }

    pub fn fcn_forward(&self, map: &Tensor) -> Result<FcnForward> {
        let stem = graph::forward(&self.stem, &self.params, map.clone(), None)?;
        let hidden = stem.output();
        let p = &self.params;
        let logits = conv2d_forward(
            hidden,
            p.require("fcn.cls.weight")?,
            p.require("fcn.cls.bias")?,
            1,
            0,
        )?;
        let offsets = conv2d_forward(
            hidden,
            p.require("fcn.loc.weight")?,
            p.require("fcn.loc.bias")?,
            1,
            0,
        )?;
        Ok(FcnForward {
            stem,
            logits,
            offsets,
        })
    }

    /// Gradient of the feature map given gradients of the head outputs.
    pub fn fcn_backward(
        &self,
        fwd: &FcnForward,
        d_logits: &Tensor,
        d_offsets: &Tensor,
        grads: &mut NetworkParams,
    ) -> Result<Tensor> {
        let hidden = fwd.stem.output();
        let p = &self.params;
        let cls = conv2d_backward(hidden, p.require("fcn.cls.weight")?, d_logits, 1, 0)?;
        let loc = conv2d_backward(hidden, p.require("fcn.loc.weight")?, d_offsets, 1, 0)?;
        grads.accumulate("fcn.cls.weight", &cls.wrt_params[0]);
        grads.accumulate("fcn.cls.bias", &cls.wrt_params[1]);
        grads.accumulate("fcn.loc.weight", &loc.wrt_params[0]);
        grads.accumulate("fcn.loc.bias", &loc.wrt_params[1]);
        let mut d_hidden = cls.wrt_input;
        d_hidden.add_assign(&loc.wrt_input);
        graph::backward(&self.stem, &self.params, &fwd.stem, d_hidden, Some(grads))
    }

    pub fn score_map(
        &self,
        fwd: &FcnForward,
        image_width: usize,
        image_height: usize,
    ) -> Result<ScoreMap> {
        let (hc, wc) = (fwd.logits.shape()[1], fwd.logits.shape()[2]);
        let scores = (0..fwd.cells())
            .map(|i| softmax2(fwd.cell_logits(i))[1])
            .collect();
        Ok(ScoreMap {
            scores: Tensor::new(&[hc, wc], scores)?,
            offsets: fwd.offsets.clone(),
            stride: STRIDE,
            image_width,
            image_height,
        })
    }

    /// Region of interest for a proposal, clamped to the image.
    pub fn proposal_roi(x: f64, y: f64, image_width: usize, image_height: usize) -> Roi {
        Roi::centered(x, y, REGION_SIZE).clamp_to(image_width as f64, image_height as f64)
    }

    pub fn region_forward(
        &self,
        map: &Tensor,
        centres: &[(f64, f64)],
        image_width: usize,
        image_height: usize,
    ) -> Result<RegionForward> {
        let n = centres.len();
        let per = map.shape()[0] * ROI_BINS * ROI_BINS;
        let mut pooled = Vec::with_capacity(n * per);
        let mut switches = Vec::with_capacity(n);
        for &(x, y) in centres {
            let roi = Self::proposal_roi(x, y, image_width, image_height);
            let (t, sw) = roi_pool(map, &roi, STRIDE, ROI_BINS)?;
            pooled.extend_from_slice(t.data());
            switches.push(sw);
        }
        let rows = n.max(1);
        if n == 0 {
            pooled.resize(per, 0.0);
        }
        let pooled = Tensor::new(&[rows, per], pooled)?;
        let p = &self.params;
        let h1 = fc_forward(
            &pooled,
            p.require("region.fc1.weight")?,
            p.require("region.fc1.bias")?,
        )?;
        let r1 = relu_forward(&h1);
        let h2 = fc_forward(
            &r1,
            p.require("region.fc2.weight")?,
            p.require("region.fc2.bias")?,
        )?;
        let r2 = relu_forward(&h2);
        let logits = fc_forward(
            &r2,
            p.require("region.cls.weight")?,
            p.require("region.cls.bias")?,
        )?;
        let regression = fc_forward(
            &r2,
            p.require("region.reg.weight")?,
            p.require("region.reg.bias")?,
        )?;
        Ok(RegionForward {
            pooled,
            switches,
            h1,
            r1,
            h2,
            r2,
            logits,
            regression,
        })
    }

    /// Feature-map gradient given `[N,2]` logit and `[N,3]` regression gradients.
    pub fn region_backward(
        &self,
        map_shape: &[usize],
        fwd: &RegionForward,
        d_logits: &Tensor,
        d_regression: &Tensor,
        grads: &mut NetworkParams,
    ) -> Result<Tensor> {
        let p = &self.params;
        let cls = fc_backward(&fwd.r2, p.require("region.cls.weight")?, d_logits)?;
        let reg = fc_backward(&fwd.r2, p.require("region.reg.weight")?, d_regression)?;
        grads.accumulate("region.cls.weight", &cls.wrt_params[0]);
        grads.accumulate("region.cls.bias", &cls.wrt_params[1]);
        grads.accumulate("region.reg.weight", &reg.wrt_params[0]);
        grads.accumulate("region.reg.bias", &reg.wrt_params[1]);
        let mut d_r2 = cls.wrt_input;
        d_r2.add_assign(&reg.wrt_input);
        let d_h2 = relu_backward(&fwd.h2, &d_r2)?;
        let fc2 = fc_backward(&fwd.r1, p.require("region.fc2.weight")?, &d_h2)?;
        grads.accumulate("region.fc2.weight", &fc2.wrt_params[0]);
        grads.accumulate("region.fc2.bias", &fc2.wrt_params[1]);
        let d_h1 = relu_backward(&fwd.h1, &fc2.wrt_input)?;
        let fc1 = fc_backward(&fwd.pooled, p.require("region.fc1.weight")?, &d_h1)?;
        grads.accumulate("region.fc1.weight", &fc1.wrt_params[0]);
        grads.accumulate("region.fc1.bias", &fc1.wrt_params[1]);
        let per = fwd.pooled.shape()[1];
        let mut d_map = Tensor::new(map_shape, vec![0.0; map_shape.iter().product()])?;
        let pooled_shape = [map_shape[0], ROI_BINS, ROI_BINS];
        for (i, sw) in fwd.switches.iter().enumerate() {
            let up = Tensor::new(
                &pooled_shape,
                fc1.wrt_input.data()[i * per..(i + 1) * per].to_vec(),
            )?;
            d_map.add_assign(&roi_pool_backward(map_shape, sw, &up)?);
        }
        Ok(d_map)
    }

    /// Dense minutia-score map for a `[1, H, W]` image with intensities in `[0, 1]`.
    pub fn forward_fcn(&self, image: &Tensor) -> Result<ScoreMap> {
        let f = self.features(image)?;
        self.fcn_on_features(&f)
    }

    pub fn fcn_on_features(&self, f: &Features) -> Result<ScoreMap> {
        let fwd = self.fcn_forward(f.map())?;
        self.score_map(&fwd, f.image_width, f.image_height)
    }

    /// Region-head predictions for each proposal; the trunk runs once.
    pub fn forward_region(
        &self,
        image: &Tensor,
        proposals: &[Minutia],
    ) -> Result<Vec<RegionOutput>> {
        let f = self.features(image)?;
        self.region_on_features(&f, proposals)
    }

    pub fn region_on_features(
        &self,
        f: &Features,
        proposals: &[Minutia],
    ) -> Result<Vec<RegionOutput>> {
        if proposals.is_empty() {
            return Ok(Vec::new());
        }
        let centres: Vec<(f64, f64)> = proposals.iter().map(|m| (m.x, m.y)).collect();
        let fwd = self.region_forward(f.map(), &centres, f.image_width, f.image_height)?;
        Ok((0..fwd.len()).map(|i| fwd.output(i)).collect())
    }
}

/// `(height, width)` of a `[1, H, W]` image, which must be at least one cell.
pub fn image_dims(image: &Tensor) -> Result<(usize, usize)> {
    match image.shape() {
        &[1, h, w] if h >= STRIDE && w >= STRIDE => Ok((h, w)),
        &[1, h, w] => Err(Error::invalid(format!(
            "image {w}x{h} is smaller than one {STRIDE}x{STRIDE} cell"
        ))),
        s => Err(Error::invalid(format!(
            "expected a [1, H, W] image, got {s:?}"
        ))),
    }
}

/// `image − mean`, elementwise.
pub fn centred(mut image: Tensor, mean: f64) -> Tensor {
    if mean != 0.0 {
        image.data_mut().iter_mut().for_each(|v| *v -= mean);
    }
    image
}

/// Replicates the last row and column until both sides are multiples of the stride.
pub fn pad_to_stride(image: &Tensor) -> Tensor {
    let (h, w) = (image.shape()[1], image.shape()[2]);
    let (ph, pw) = (h.div_ceil(STRIDE) * STRIDE, w.div_ceil(STRIDE) * STRIDE);
    if (ph, pw) == (h, w) {
        return image.clone();
    }
    let src = image.data();
    Tensor::from_fn(&[1, ph, pw], |i| {
        let (y, x) = (i / pw, i % pw);
        src[y.min(h - 1) * w + x.min(w - 1)]
    })
}
