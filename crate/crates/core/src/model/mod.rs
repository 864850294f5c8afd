//! Toy RGB-D detector: one backbone per modality, soft-gate fusion, a dense
//! class/objectness head and connected-component instance decoding.

mod backbone;
mod checkpoint;
mod decode;
mod head;

use std::fmt;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fusion::{fuse_backward, fuse_forward, FuseCache, FusionParams, GateRecord};
use crate::nn::{Conv2d, Parameters};
use crate::synthdata::SceneSample;
use crate::tensor::Tensor;

pub use backbone::{Backbone, BackboneCache};
pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, CHECKPOINT_VERSION};
pub use decode::{decode_instances, Detection, DetectionSet, Thresholds};
pub use head::{DenseMaps, Head, HeadCache};

pub const MODALITY_NAMES: [&str; 2] = ["rgb", "depth"];
pub const RGB: usize = 0;
pub const DEPTH: usize = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModalityCondition {
    Both,
    RgbOnly,
    DepthOnly,
}

impl ModalityCondition {
    pub const ALL: [ModalityCondition; 3] = [Self::Both, Self::RgbOnly, Self::DepthOnly];

    pub fn as_str(&self) -> &'static str {
        match self {
            Self::Both => "both",
            Self::RgbOnly => "rgb_only",
            Self::DepthOnly => "depth_only",
        }
    }

    pub fn uses_rgb(&self) -> bool {
        !matches!(self, Self::DepthOnly)
    }

    pub fn uses_depth(&self) -> bool {
        !matches!(self, Self::RgbOnly)
    }

    pub fn index(&self) -> usize {
        *self as usize
    }
}

impl fmt::Display for ModalityCondition {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ModalityCondition {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|c| c.as_str() == s)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown condition '{s}'")))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Arch {
    /// Backbone feature channels per pyramid level.
    pub channels: usize,
    /// Channels of the first (stride 2) backbone stage.
    pub stem_channels: usize,
    /// Channels of the fused pyramid.
    pub fused_channels: usize,
    pub head_channels: usize,
    /// Pyramid levels, at strides 4, 8, 16, ...
    pub scales: usize,
    /// Object classes, background excluded.
    pub classes: usize,
}

impl Default for Arch {
    fn default() -> Self {
        Self {
            channels: 16,
            stem_channels: 8,
            fused_channels: 16,
            head_channels: 16,
            scales: 3,
            classes: 6,
        }
    }
}

impl Arch {
    pub fn validate(&self) -> Result<()> {
        if self.scales < 2 {
            return Err(Error::InvalidArgument("at least two pyramid scales are required".into()));
        }
        if [self.channels, self.stem_channels, self.fused_channels, self.head_channels, self.classes]
            .contains(&0)
        {
            return Err(Error::InvalidArgument("channel and class counts must be positive".into()));
        }
        Ok(())
    }

    /// Input sides must be multiples of this.
    pub fn input_multiple(&self) -> usize {
        1 << (self.scales + 1)
    }

    /// Downsampling factor of the head maps.
    pub fn head_stride(&self) -> usize {
        4
    }
}

/// Per-channel standardisation `(x - mean) / std` applied inside the network,
/// after a dropped modality has been zeroed. A dead sensor therefore reaches
/// its backbone as an off-distribution constant rather than as silence.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InputNorm {
    pub rgb_mean: [f64; 3],
    pub rgb_std: [f64; 3],
    pub depth_mean: f64,
    pub depth_std: f64,
}

impl Default for InputNorm {
    fn default() -> Self {
        Self {
            rgb_mean: [0.0; 3],
            rgb_std: [1.0; 3],
            depth_mean: 0.0,
            depth_std: 1.0,
        }
    }
}

const MIN_STD: f64 = 1e-3;

fn channel_stats<'a>(channels: impl Iterator<Item = &'a [f64]>) -> (f64, f64) {
    let (mut n, mut sum, mut sq) = (0usize, 0.0, 0.0);
    for c in channels {
        n += c.len();
        sum += c.iter().sum::<f64>();
        sq += c.iter().map(|v| v * v).sum::<f64>();
    }
    let mean = sum / n as f64;
    (mean, (sq / n as f64 - mean * mean).max(0.0).sqrt().max(MIN_STD))
}

impl InputNorm {
    /// Mean and standard deviation per channel over all pixels of `inputs`.
    pub fn fit<'a>(inputs: impl Iterator<Item = &'a ModelInput> + Clone) -> Result<Self> {
        if inputs.clone().next().is_none() {
            return Err(Error::InvalidArgument("cannot fit input statistics to no inputs".into()));
        }
        let mut out = Self::default();
        for c in 0..3 {
            (out.rgb_mean[c], out.rgb_std[c]) = channel_stats(inputs.clone().map(|i| i.rgb.channel(c)));
        }
        (out.depth_mean, out.depth_std) = channel_stats(inputs.map(|i| i.depth.channel(0)));
        Ok(out)
    }

    fn apply(&self, input: &ModelInput) -> ModelInput {
        let mut out = input.clone();
        for c in 0..3 {
            let (m, s) = (self.rgb_mean[c], self.rgb_std[c]);
            out.rgb.channel_mut(c).iter_mut().for_each(|v| *v = (*v - m) / s);
        }
        let (m, s) = (self.depth_mean, self.depth_std);
        out.depth.data_mut().iter_mut().for_each(|v| *v = (*v - m) / s);
        out
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelParams {
    pub arch: Arch,
    /// Not trained by gradient descent; fitted to the training split.
    pub input_norm: InputNorm,
    pub rgb: Backbone,
    pub depth: Backbone,
    pub fusion: FusionParams,
    pub head: Head,
}

impl ModelParams {
    pub fn new(arch: Arch, seed: u64) -> Result<Self> {
        arch.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let rgb = Backbone::new(3, arch.stem_channels, arch.channels, arch.scales, &mut rng);
        let depth = Backbone::new(1, arch.stem_channels, arch.channels, arch.scales, &mut rng);
        let fusion = FusionParams::new(2, arch.channels, arch.fused_channels, arch.scales, &mut rng);
        let head = Head::new(arch.fused_channels, arch.head_channels, arch.classes, &mut rng);
        Ok(Self {
            arch,
            input_norm: InputNorm::default(),
            rgb,
            depth,
            fusion,
            head,
        })
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            arch: self.arch,
            input_norm: self.input_norm.clone(),
            rgb: self.rgb.zeros_like(),
            depth: self.depth.zeros_like(),
            fusion: self.fusion.zeros_like(),
            head: self.head.zeros_like(),
        }
    }

    /// Range of the gate parameters in flattened order.
    pub fn gate_param_range(&self) -> std::ops::Range<usize> {
        let before: usize = self.rgb.stages.iter().chain(&self.depth.stages).map(Conv2d::num_params).sum();
        let gates: usize = self.fusion.gates.iter().flatten().map(Conv2d::num_params).sum();
        before..before + gates
    }

    fn backbone(&self, modality: usize) -> &Backbone {
        if modality == RGB {
            &self.rgb
        } else {
            &self.depth
        }
    }

    /// Squared gradient norm of one backbone's parameters.
    pub fn backbone_norm_sq(&self, modality: usize) -> f64 {
        self.backbone(modality)
            .stages
            .iter()
            .flat_map(|c| c.weight.iter().chain(&c.bias))
            .map(|v| v * v)
            .sum()
    }
}

impl Parameters for ModelParams {
    fn convs(&self) -> Vec<&Conv2d> {
        let mut v: Vec<&Conv2d> = self.rgb.stages.iter().collect();
        v.extend(self.depth.stages.iter());
        v.extend(self.fusion.convs());
        v.extend([&self.head.hidden, &self.head.class, &self.head.objectness]);
        v
    }

    fn convs_mut(&mut self) -> Vec<&mut Conv2d> {
        let mut v: Vec<&mut Conv2d> = self.rgb.stages.iter_mut().collect();
        v.extend(self.depth.stages.iter_mut());
        v.extend(self.fusion.convs_mut());
        v.extend([&mut self.head.hidden, &mut self.head.class, &mut self.head.objectness]);
        v
    }
}

/// Network inputs in CHW layout: RGB `3 x H x W`, depth `1 x H x W`.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelInput {
    pub rgb: Tensor,
    pub depth: Tensor,
}

impl ModelInput {
    pub fn from_scene(scene: &SceneSample) -> Self {
        let (h, w) = (scene.height, scene.width);
        let plane = h * w;
        let mut rgb = vec![0.0; 3 * plane];
        for p in 0..plane {
            for c in 0..3 {
                rgb[c * plane + p] = scene.rgb[p * 3 + c];
            }
        }
        Self {
            rgb: Tensor::from_vec(3, h, w, rgb).expect("scene buffers match their size"),
            depth: Tensor::from_vec(1, h, w, scene.depth.clone()).expect("scene buffers match their size"),
        }
    }

    /// Replaces the dropped modality's input by zeros.
    pub fn with_condition(&self, condition: ModalityCondition) -> Self {
        let mut out = self.clone();
        if !condition.uses_rgb() {
            out.rgb = Tensor::zeros_like(&self.rgb);
        }
        if !condition.uses_depth() {
            out.depth = Tensor::zeros_like(&self.depth);
        }
        out
    }

    pub fn height(&self) -> usize {
        self.rgb.height()
    }

    pub fn width(&self) -> usize {
        self.rgb.width()
    }
}

/// Intermediate values of one forward pass, kept for [`backward`].
pub struct ForwardCache {
    backbones: Vec<BackboneCache>,
    fuse: FuseCache,
    head: HeadCache,
    fused_shapes: Vec<(usize, usize, usize)>,
    pub maps: DenseMaps,
}

impl ForwardCache {
    pub fn gates(&self) -> &GateRecord {
        self.fuse.record()
    }
}

/// Dense forward pass on inputs that already reflect the condition.
pub fn forward_dense(params: &ModelParams, input: &ModelInput) -> Result<ForwardCache> {
    if input.rgb.channels() != 3 || input.depth.channels() != 1 {
        return Err(Error::Shape("inputs must be 3-channel RGB and 1-channel depth".into()));
    }
    if (input.rgb.height(), input.rgb.width()) != (input.depth.height(), input.depth.width()) {
        return Err(Error::Shape("RGB and depth sizes differ".into()));
    }
    let input = params.input_norm.apply(input);
    let (rgb_pyr, rgb_cache) = params.rgb.forward(&input.rgb, RGB)?;
    let (depth_pyr, depth_cache) = params.depth.forward(&input.depth, DEPTH)?;
    let (fused, fuse) = fuse_forward(&[rgb_pyr, depth_pyr], &params.fusion)?;
    let (maps, head) = params.head.forward(&fused)?;
    Ok(ForwardCache {
        backbones: vec![rgb_cache, depth_cache],
        fuse,
        head,
        fused_shapes: fused.levels.iter().map(Tensor::shape).collect(),
        maps,
    })
}

/// Parameter gradients given gradients of the loss with respect to the
/// class and objectness logits.
pub fn backward(
    params: &ModelParams,
    cache: &ForwardCache,
    d_class_logits: &Tensor,
    d_obj_logits: &Tensor,
) -> ModelParams {
    let mut grads = params.zeros_like();
    let d_fine = params
        .head
        .backward(&cache.head, d_class_logits, d_obj_logits, &mut grads.head);
    let mut d_fused: Vec<Tensor> = cache
        .fused_shapes
        .iter()
        .map(|&(c, h, w)| Tensor::zeros(c, h, w))
        .collect();
    d_fused[0] = d_fine;
    let d_feats = fuse_backward(&cache.fuse, &d_fused, &params.fusion, &mut grads.fusion);
    params.rgb.backward(&cache.backbones[RGB], &d_feats[RGB], &mut grads.rgb);
    params.depth.backward(&cache.backbones[DEPTH], &d_feats[DEPTH], &mut grads.depth);
    grads
}

/// Runs the detector under `condition`. The dropped modality may be omitted;
/// if supplied it is ignored.
pub fn forward(
    rgb: Option<&Tensor>,
    depth: Option<&Tensor>,
    params: &ModelParams,
    condition: ModalityCondition,
    thresholds: &Thresholds,
    scene_id: &str,
) -> Result<(DetectionSet, GateRecord)> {
    thresholds.validate()?;
    let (rgb, depth) = match (rgb, depth) {
        (None, None) => return Err(Error::InvalidArgument("both inputs are absent".into())),
        (r, d) => {
            if condition.uses_rgb() && r.is_none() {
                return Err(Error::InvalidArgument(format!("condition {condition} needs an RGB input")));
            }
            if condition.uses_depth() && d.is_none() {
                return Err(Error::InvalidArgument(format!("condition {condition} needs a depth input")));
            }
            let (h, w) = r.or(d).map(|t| (t.height(), t.width())).expect("one input present");
            (
                r.cloned().unwrap_or_else(|| Tensor::zeros(3, h, w)),
                d.cloned().unwrap_or_else(|| Tensor::zeros(1, h, w)),
            )
        }
    };
    let input = ModelInput { rgb, depth }.with_condition(condition);
    let cache = forward_dense(params, &input)?;
    let mut set = DetectionSet::new(scene_id, condition, input.height(), input.width());
    set.detections = decode_instances(&cache.maps, thresholds, params.arch.head_stride());
    Ok((set, cache.fuse.record().clone()))
}

/// Convenience wrapper of [`forward`] for a dataset scene.
pub fn predict_scene(
    params: &ModelParams,
    scene: &SceneSample,
    condition: ModalityCondition,
    thresholds: &Thresholds,
) -> Result<(DetectionSet, GateRecord)> {
    let input = ModelInput::from_scene(scene);
    forward(
        Some(&input.rgb),
        Some(&input.depth),
        params,
        condition,
        thresholds,
        &scene.scene_id,
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_arch() -> Arch {
        Arch {
            channels: 4,
            stem_channels: 3,
            fused_channels: 4,
            head_channels: 5,
            scales: 2,
            classes: 3,
        }
    }

    fn ramp(c: usize, h: usize, phase: f64) -> Tensor {
        Tensor::from_vec(c, h, h, (0..c * h * h).map(|i| 0.5 + 0.5 * (i as f64 * 0.13 + phase).sin()).collect())
            .unwrap()
    }

    #[test]
    fn untrained_model_detects_nothing() {
        let params = ModelParams::new(Arch::default(), 1).unwrap();
        let (set, gates) = forward(
            Some(&ramp(3, 64, 0.0)),
            Some(&ramp(1, 64, 1.0)),
            &params,
            ModalityCondition::Both,
            &Thresholds::default(),
            "s",
        )
        .unwrap();
        assert!(set.is_empty());
        for s in 0..3 {
            assert_eq!(gates.mean_weight(s, RGB).unwrap(), 0.5);
        }
    }

    #[test]
    fn rgb_only_ignores_depth_contents() {
        let mut params = ModelParams::new(small_arch(), 2).unwrap();
        params.head.objectness.bias[0] = 0.3;
        params.head.class.weight.iter_mut().enumerate().for_each(|(i, w)| *w = (i as f64).sin());
        let rgb = ramp(3, 32, 0.0);
        let run = |d: &Tensor| {
            forward(Some(&rgb), Some(d), &params, ModalityCondition::RgbOnly, &Thresholds::default(), "s").unwrap()
        };
        let (a, ga) = run(&ramp(1, 32, 0.5));
        let (b, gb) = run(&ramp(1, 32, 2.5));
        assert_eq!(a, b);
        assert_eq!(ga, gb);
        let (c, _) = forward(Some(&rgb), None, &params, ModalityCondition::RgbOnly, &Thresholds::default(), "s")
            .unwrap();
        assert_eq!(a, c);
    }

    #[test]
    fn missing_inputs_are_rejected() {
        let params = ModelParams::new(small_arch(), 2).unwrap();
        let t = Thresholds::default();
        assert!(forward(None, None, &params, ModalityCondition::Both, &t, "s").is_err());
        let rgb = ramp(3, 32, 0.0);
        assert!(forward(Some(&rgb), None, &params, ModalityCondition::Both, &t, "s").is_err());
        assert!(forward(Some(&rgb), None, &params, ModalityCondition::DepthOnly, &t, "s").is_err());
    }

    #[test]
    fn condition_names_roundtrip() {
        for c in ModalityCondition::ALL {
            assert_eq!(c.as_str().parse::<ModalityCondition>().unwrap(), c);
        }
        assert!("none".parse::<ModalityCondition>().is_err());
    }

    #[test]
    fn flatten_roundtrip() {
        let params = ModelParams::new(small_arch(), 5).unwrap();
        let flat = params.flatten();
        let mut other = ModelParams::new(small_arch(), 6).unwrap();
        other.load_flat(&flat).unwrap();
        assert_eq!(other, params);
    }
}
