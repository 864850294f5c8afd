//! Multi-scale soft-gate fusion.
//!
//! At every pyramid scale each modality's gate `G_m` (a 1x1 convolution over
//! the channel-concatenated features of all modalities) produces logits; a
//! softmax across modalities at every (channel, pixel) turns them into gate
//! weights; features are rescaled by their weights, concatenated and passed
//! through a top-down pyramid merge (1x1 lateral, nearest upsample-and-add,
//! 3x3 smoothing).

use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::imageio;
use crate::nn::{Conv2d, Parameters};
use crate::tensor::Tensor;

/// Per-modality multi-scale features, finest level first.
#[derive(Clone, Debug, PartialEq)]
pub struct FeaturePyramid {
    pub modality: usize,
    pub levels: Vec<Tensor>,
}

impl FeaturePyramid {
    pub fn shapes(&self) -> Vec<(usize, usize, usize)> {
        self.levels.iter().map(Tensor::shape).collect()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct FusedPyramid {
    pub levels: Vec<Tensor>,
}

/// Gate logits and weights for one scale, indexed by modality.
#[derive(Clone, Debug, PartialEq)]
pub struct GateScale {
    pub logits: Vec<Tensor>,
    pub weights: Vec<Tensor>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GateRecord {
    pub scales: Vec<GateScale>,
}

impl GateRecord {
    pub fn modalities(&self) -> usize {
        self.scales.first().map_or(0, |s| s.weights.len())
    }

    /// Mean gate weight of `modality` at `scale` over channels and pixels.
    pub fn mean_weight(&self, scale: usize, modality: usize) -> Result<f64> {
        Ok(gate_heatmap(self, scale, modality)?.mean())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FusionParams {
    pub modalities: usize,
    pub channels: usize,
    pub out_channels: usize,
    /// `[scale][modality]`, each `N*C -> C`.
    pub gates: Vec<Vec<Conv2d>>,
    /// `[scale]`, each `N*C -> C'`.
    pub lateral: Vec<Conv2d>,
    /// `[scale]`, 3x3 `C' -> C'`.
    pub smooth: Vec<Conv2d>,
}

impl FusionParams {
    /// Gates start at zero so every modality initially receives weight `1/N`.
    pub fn new<R: Rng>(
        modalities: usize,
        channels: usize,
        out_channels: usize,
        scales: usize,
        rng: &mut R,
    ) -> Self {
        let nc = modalities * channels;
        Self {
            modalities,
            channels,
            out_channels,
            gates: (0..scales)
                .map(|_| (0..modalities).map(|_| Conv2d::zeros(nc, channels, 1, 1)).collect())
                .collect(),
            lateral: (0..scales)
                .map(|_| Conv2d::random(nc, out_channels, 1, 1, 1.0, rng))
                .collect(),
            smooth: (0..scales)
                .map(|_| Conv2d::random(out_channels, out_channels, 3, 1, 1.0, rng))
                .collect(),
        }
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            modalities: self.modalities,
            channels: self.channels,
            out_channels: self.out_channels,
            gates: self
                .gates
                .iter()
                .map(|s| s.iter().map(Conv2d::zeros_like).collect())
                .collect(),
            lateral: self.lateral.iter().map(Conv2d::zeros_like).collect(),
            smooth: self.smooth.iter().map(Conv2d::zeros_like).collect(),
        }
    }

    pub fn scales(&self) -> usize {
        self.lateral.len()
    }
}

impl Parameters for FusionParams {
    fn convs(&self) -> Vec<&Conv2d> {
        let mut v: Vec<&Conv2d> = self.gates.iter().flatten().collect();
        v.extend(self.lateral.iter());
        v.extend(self.smooth.iter());
        v
    }

    fn convs_mut(&mut self) -> Vec<&mut Conv2d> {
        let mut v: Vec<&mut Conv2d> = self.gates.iter_mut().flatten().collect();
        v.extend(self.lateral.iter_mut());
        v.extend(self.smooth.iter_mut());
        v
    }
}

fn check_same_shapes(maps: &[&Tensor], what: &str) -> Result<()> {
    let first = maps
        .first()
        .ok_or_else(|| Error::Shape(format!("{what}: no modalities")))?;
    for m in &maps[1..] {
        first.check_same_shape(m, what)?;
    }
    Ok(())
}

/// Gate logits `g_m = G_m(concat_m f_m)` for one scale.
pub fn gate_logits(features: &[&Tensor], gates: &[Conv2d]) -> Result<Vec<Tensor>> {
    check_same_shapes(features, "gate inputs")?;
    if gates.len() != features.len() {
        return Err(Error::Shape(format!(
            "{} gates for {} modalities",
            gates.len(),
            features.len()
        )));
    }
    let stacked = Tensor::concat(features)?;
    gates.iter().map(|g| g.forward(&stacked)).collect()
}

/// Softmax over the modality axis at every (channel, pixel).
pub fn gate_weights(logits: &[Tensor]) -> Result<Vec<Tensor>> {
    let refs: Vec<&Tensor> = logits.iter().collect();
    check_same_shapes(&refs, "gate logits")?;
    let n = logits.len();
    let len = logits[0].data().len();
    let mut out: Vec<Tensor> = logits.iter().map(Tensor::zeros_like).collect();
    let mut buf = vec![0.0; n];
    for i in 0..len {
        let max = logits
            .iter()
            .map(|g| g.data()[i])
            .fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for (m, g) in logits.iter().enumerate() {
            buf[m] = (g.data()[i] - max).exp();
            sum += buf[m];
        }
        for (m, w) in out.iter_mut().enumerate() {
            w.data_mut()[i] = buf[m] / sum;
        }
    }
    Ok(out)
}

/// Elementwise `f_m * w_m`.
pub fn apply_gates(features: &[&Tensor], weights: &[Tensor]) -> Result<Vec<Tensor>> {
    if features.len() != weights.len() {
        return Err(Error::Shape(format!(
            "{} feature maps for {} weight maps",
            features.len(),
            weights.len()
        )));
    }
    features
        .iter()
        .zip(weights)
        .map(|(f, w)| {
            f.check_same_shape(w, "gate weights vs features")?;
            Ok(f.hadamard(w))
        })
        .collect()
}

struct MergeCache {
    stacked: Vec<Tensor>,
    merged: Vec<Tensor>,
}

fn merge_forward(stacked: Vec<Tensor>, params: &FusionParams) -> Result<(Vec<Tensor>, MergeCache)> {
    let j = stacked.len();
    let mut merged: Vec<Option<Tensor>> = vec![None; j];
    for s in (0..j).rev() {
        let mut p = params.lateral[s].forward(&stacked[s])?;
        if let Some(coarser) = merged.get(s + 1).and_then(|m| m.as_ref()) {
            let up = coarser.upsample2();
            p.check_same_shape(&up, "top-down merge")?;
            p.add_assign(&up);
        }
        merged[s] = Some(p);
    }
    let merged: Vec<Tensor> = merged.into_iter().map(|m| m.expect("filled")).collect();
    let out = merged
        .iter()
        .zip(&params.smooth)
        .map(|(p, conv)| conv.forward(p))
        .collect::<Result<Vec<_>>>()?;
    Ok((out, MergeCache { stacked, merged }))
}

fn merge_backward(
    cache: &MergeCache,
    grad_out: &[Tensor],
    params: &FusionParams,
    grads: &mut FusionParams,
) -> Vec<Tensor> {
    let j = cache.merged.len();
    let mut d_merged: Vec<Tensor> = (0..j)
        .map(|s| {
            params.smooth[s]
                .backward(&cache.merged[s], &grad_out[s], &mut grads.smooth[s], true)
                .expect("input grad")
        })
        .collect();
    let mut d_stacked = Vec::with_capacity(j);
    for s in 0..j {
        if s + 1 < j {
            let pooled = d_merged[s].sum_pool2();
            d_merged[s + 1].add_assign(&pooled);
        }
        d_stacked.push(
            params.lateral[s]
                .backward(&cache.stacked[s], &d_merged[s], &mut grads.lateral[s], true)
                .expect("input grad"),
        );
    }
    d_stacked
}

/// Runs only the pyramid merge on already gated, channel-stacked inputs.
pub fn pyramid_merge(stacked: &[Tensor], params: &FusionParams) -> Result<FusedPyramid> {
    if stacked.len() != params.scales() {
        return Err(Error::Shape(format!(
            "{} levels for a {}-scale merge",
            stacked.len(),
            params.scales()
        )));
    }
    let (levels, _) = merge_forward(stacked.to_vec(), params)?;
    Ok(FusedPyramid { levels })
}

/// Everything the backward pass needs from a forward run of [`fuse`].
pub struct FuseCache {
    features: Vec<Vec<Tensor>>,
    stacked: Vec<Tensor>,
    record: GateRecord,
    merge: MergeCache,
}

impl FuseCache {
    pub fn record(&self) -> &GateRecord {
        &self.record
    }
}

fn validate_pyramids(pyramids: &[FeaturePyramid], params: &FusionParams) -> Result<()> {
    if pyramids.len() != params.modalities {
        return Err(Error::Shape(format!(
            "{} pyramids for {} modalities",
            pyramids.len(),
            params.modalities
        )));
    }
    let shapes = pyramids[0].shapes();
    if shapes.len() < 2 || shapes.len() != params.scales() {
        return Err(Error::Shape(format!(
            "pyramid has {} levels, fusion expects {} (at least 2)",
            shapes.len(),
            params.scales()
        )));
    }
    for p in &pyramids[1..] {
        if p.shapes() != shapes {
            return Err(Error::Shape(format!(
                "pyramid shapes differ across modalities: {:?} vs {:?}",
                shapes,
                p.shapes()
            )));
        }
    }
    for (s, &(c, h, w)) in shapes.iter().enumerate() {
        if c != params.channels {
            return Err(Error::Shape(format!(
                "level {s} has {c} channels, fusion expects {}",
                params.channels
            )));
        }
        if s > 0 && (shapes[s - 1].1 != 2 * h || shapes[s - 1].2 != 2 * w) {
            return Err(Error::Shape(format!("level {s} is not half of level {}", s - 1)));
        }
    }
    Ok(())
}

pub fn fuse_forward(pyramids: &[FeaturePyramid], params: &FusionParams) -> Result<(FusedPyramid, FuseCache)> {
    validate_pyramids(pyramids, params)?;
    let j = params.scales();
    let mut scales = Vec::with_capacity(j);
    let mut stacked_in = Vec::with_capacity(j);
    let mut stacked_gated = Vec::with_capacity(j);
    for s in 0..j {
        let feats: Vec<&Tensor> = pyramids.iter().map(|p| &p.levels[s]).collect();
        let logits = gate_logits(&feats, &params.gates[s])?;
        let weights = gate_weights(&logits)?;
        let gated = apply_gates(&feats, &weights)?;
        let gated_refs: Vec<&Tensor> = gated.iter().collect();
        stacked_gated.push(Tensor::concat(&gated_refs)?);
        stacked_in.push(Tensor::concat(&feats)?);
        scales.push(GateScale { logits, weights });
    }
    let (levels, merge) = merge_forward(stacked_gated, params)?;
    let cache = FuseCache {
        features: pyramids.iter().map(|p| p.levels.clone()).collect(),
        stacked: stacked_in,
        record: GateRecord { scales },
        merge,
    };
    Ok((FusedPyramid { levels }, cache))
}

/// Fuses `N` shape-compatible pyramids and records the gate weights.
pub fn fuse(pyramids: &[FeaturePyramid], params: &FusionParams) -> Result<(FusedPyramid, GateRecord)> {
    let (fused, cache) = fuse_forward(pyramids, params)?;
    Ok((fused, cache.record))
}

/// Backpropagates `grad_out` (one map per fused level) through the fusion.
/// Parameter gradients accumulate into `grads`; the returned gradients are
/// indexed `[modality][level]`.
pub fn fuse_backward(
    cache: &FuseCache,
    grad_out: &[Tensor],
    params: &FusionParams,
    grads: &mut FusionParams,
) -> Vec<Vec<Tensor>> {
    let n = params.modalities;
    let d_gated_stacked = merge_backward(&cache.merge, grad_out, params, grads);
    let mut d_feats: Vec<Vec<Tensor>> = vec![Vec::with_capacity(params.scales()); n];
    for (s, d_stack) in d_gated_stacked.iter().enumerate() {
        let d_gated = d_stack.split(n);
        let weights = &cache.record.scales[s].weights;
        let feats: Vec<&Tensor> = cache.features.iter().map(|f| &f[s]).collect();
        // d/dw_m of the gated product, then through the softmax Jacobian.
        let d_w: Vec<Tensor> = d_gated.iter().zip(&feats).map(|(g, f)| g.hadamard(f)).collect();
        let mut d_logits: Vec<Tensor> = weights.iter().map(Tensor::zeros_like).collect();
        let len = weights[0].data().len();
        for i in 0..len {
            let dot: f64 = (0..n).map(|m| weights[m].data()[i] * d_w[m].data()[i]).sum();
            for m in 0..n {
                d_logits[m].data_mut()[i] = weights[m].data()[i] * (d_w[m].data()[i] - dot);
            }
        }
        let mut d_stacked_in = Tensor::zeros_like(&cache.stacked[s]);
        for m in 0..n {
            let d = params.gates[s][m]
                .backward(&cache.stacked[s], &d_logits[m], &mut grads.gates[s][m], true)
                .expect("input grad");
            d_stacked_in.add_assign(&d);
        }
        for (m, d_in) in d_stacked_in.split(n).into_iter().enumerate() {
            let mut direct = d_gated[m].hadamard(&weights[m]);
            direct.add_assign(&d_in);
            d_feats[m].push(direct);
        }
    }
    d_feats
}

/// Channel-averaged gate weights of one modality at one scale, `1 x H_j x W_j`.
pub fn gate_heatmap(record: &GateRecord, scale: usize, modality: usize) -> Result<Tensor> {
    let s = record.scales.get(scale).ok_or_else(|| {
        Error::InvalidArgument(format!(
            "scale {scale} out of range (record has {})",
            record.scales.len()
        ))
    })?;
    let w = s.weights.get(modality).ok_or_else(|| {
        Error::InvalidArgument(format!(
            "modality {modality} out of range (record has {})",
            s.weights.len()
        ))
    })?;
    let (c, h, wd) = w.shape();
    let mut out = Tensor::zeros(1, h, wd);
    for ch in 0..c {
        for (o, v) in out.data_mut().iter_mut().zip(w.channel(ch)) {
            *o += v;
        }
    }
    out.scale(1.0 / c as f64);
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GateSidecar {
    pub modalities: Vec<String>,
    /// `[scale][modality]` mean weight over channels and pixels.
    pub mean_weight: Vec<Vec<f64>>,
    pub heatmaps: Vec<Vec<String>>,
}

/// Writes one 16-bit grayscale heatmap per (scale, modality) plus a JSON
/// sidecar with the per-scale mean weights.
pub fn export_gate_record(
    record: &GateRecord,
    modality_names: &[&str],
    dir: &Path,
    prefix: &str,
) -> Result<GateSidecar> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut mean_weight = Vec::new();
    let mut heatmaps = Vec::new();
    for s in 0..record.scales.len() {
        let mut means = Vec::new();
        let mut names = Vec::new();
        for (m, name) in modality_names.iter().enumerate().take(record.modalities()) {
            let map = gate_heatmap(record, s, m)?;
            means.push(map.mean());
            let file = format!("{prefix}scale{s}_{name}.png");
            let values: Vec<u16> = map
                .data()
                .iter()
                .map(|v| (v.clamp(0.0, 1.0) * 65535.0).round() as u16)
                .collect();
            imageio::write_gray16(&dir.join(&file), map.width(), map.height(), &values)?;
            names.push(file);
        }
        mean_weight.push(means);
        heatmaps.push(names);
    }
    let sidecar = GateSidecar {
        modalities: modality_names.iter().map(|s| s.to_string()).collect(),
        mean_weight,
        heatmaps,
    };
    let path = dir.join(format!("{prefix}gates.json"));
    let json = serde_json::to_vec_pretty(&sidecar).expect("serializable");
    std::fs::write(&path, json).map_err(|e| Error::io(&path, e))?;
    Ok(sidecar)
}
