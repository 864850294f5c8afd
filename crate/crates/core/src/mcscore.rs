//! Multimodal consistency (MC) scoring.
//!
//! The fused output `D_o` is compared against each single-modality output
//! `D_m`. For every output detection, the IoUs of all modality detections
//! strictly above 0.3 are averaged (`A`); an output detection no modality
//! corroborates contributes 0. `S_m` is the mean of `A` over the output
//! detections and the combined `S` is the mean over every (modality,
//! detection) pair. Scores are percentages.

use std::collections::{BTreeMap, HashMap};
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{BoxPx, Rle};
use crate::model::{Detection, DetectionSet};
use crate::synthdata::{InstanceGt, Split};

/// Matching keeps sources with IoU strictly above `MATCH_NUM / MATCH_DEN`.
const MATCH_NUM: u64 = 3;
const MATCH_DEN: u64 = 10;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Kind {
    Box,
    Mask,
}

impl Kind {
    pub const ALL: [Kind; 2] = [Kind::Box, Kind::Mask];
}

/// A set of image pixels: an inclusive box or an RLE mask.
#[derive(Clone, Copy, Debug)]
pub enum PixelSet<'a> {
    Box {
        bbox: &'a BoxPx,
        height: usize,
        width: usize,
    },
    Mask(&'a Rle),
}

impl<'a> PixelSet<'a> {
    pub fn of(det: &'a Detection, kind: Kind) -> Self {
        match kind {
            Kind::Box => PixelSet::Box {
                bbox: &det.bbox,
                height: det.mask.height(),
                width: det.mask.width(),
            },
            Kind::Mask => PixelSet::Mask(&det.mask),
        }
    }

    pub fn dims(&self) -> (usize, usize) {
        match self {
            PixelSet::Box { height, width, .. } => (*height, *width),
            PixelSet::Mask(m) => (m.height(), m.width()),
        }
    }

    pub fn area(&self) -> u64 {
        match self {
            PixelSet::Box { bbox, .. } => bbox.area(),
            PixelSet::Mask(m) => m.area(),
        }
    }

    fn validate(&self) -> Result<()> {
        let (h, w) = self.dims();
        match self {
            PixelSet::Box { bbox, .. } if !bbox.fits(h, w) => {
                Err(Error::InvalidArgument(format!("box {bbox:?} outside the {h}x{w} image")))
            }
            _ if self.area() == 0 => Err(Error::InvalidArgument("empty pixel set".into())),
            _ => Ok(()),
        }
    }
}

/// Exact IoU as integer pixel counts.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Iou {
    pub intersection: u64,
    pub union: u64,
}

impl Iou {
    pub fn ratio(&self) -> f64 {
        if self.union == 0 {
            0.0
        } else {
            self.intersection as f64 / self.union as f64
        }
    }

    /// `intersection / union > num / den`, without rounding.
    pub fn above(&self, num: u64, den: u64) -> bool {
        u128::from(self.intersection) * u128::from(den) > u128::from(num) * u128::from(self.union)
    }

    /// `intersection / union >= num / den`, without rounding.
    pub fn at_least(&self, num: u64, den: u64) -> bool {
        u128::from(self.intersection) * u128::from(den) >= u128::from(num) * u128::from(self.union)
    }
}

pub fn iou(a: PixelSet<'_>, b: PixelSet<'_>) -> Result<Iou> {
    if a.dims() != b.dims() {
        return Err(Error::Shape(format!(
            "pixel sets on {:?} and {:?} images",
            a.dims(),
            b.dims()
        )));
    }
    a.validate()?;
    b.validate()?;
    let intersection = match (a, b) {
        (PixelSet::Box { bbox: x, .. }, PixelSet::Box { bbox: y, .. }) => x.intersection(y).map_or(0, |i| i.area()),
        (PixelSet::Mask(x), PixelSet::Mask(y)) => x.intersection_area(y),
        (PixelSet::Box { bbox, height, width }, PixelSet::Mask(m))
        | (PixelSet::Mask(m), PixelSet::Box { bbox, height, width }) => {
            Rle::from_box(bbox, height, width).intersection_area(m)
        }
    };
    Ok(Iou {
        intersection,
        union: a.area() + b.area() - intersection,
    })
}

pub fn detection_iou(a: &Detection, b: &Detection, kind: Kind) -> Result<Iou> {
    iou(PixelSet::of(a, kind), PixelSet::of(b, kind))
}

fn check_dims(set: &DetectionSet, target: &Detection) -> Result<()> {
    if (set.height, set.width) != (target.mask.height(), target.mask.width()) {
        return Err(Error::Shape(format!(
            "scene {}: {}x{} detections compared with a {}x{} target",
            set.scene_id,
            set.height,
            set.width,
            target.mask.height(),
            target.mask.width()
        )));
    }
    Ok(())
}

/// IoUs of every source detection with `target` that are strictly above 0.3.
/// Class labels are not compared.
pub fn matched_ious(sources: &DetectionSet, target: &Detection, kind: Kind) -> Result<Vec<Iou>> {
    check_dims(sources, target)?;
    let mut out = Vec::new();
    for s in &sources.detections {
        let v = detection_iou(s, target, kind)?;
        if v.above(MATCH_NUM, MATCH_DEN) {
            out.push(v);
        }
    }
    Ok(out)
}

/// Mean matched IoU, or `None` when no source matches.
pub fn avg_iou(sources: &DetectionSet, target: &Detection, kind: Kind) -> Result<Option<f64>> {
    let m = matched_ious(sources, target, kind)?;
    Ok((!m.is_empty()).then(|| m.iter().map(Iou::ratio).sum::<f64>() / m.len() as f64))
}

fn a_values(sources: &DetectionSet, targets: &DetectionSet, kind: Kind) -> Result<Vec<f64>> {
    if targets.is_empty() {
        return Err(Error::UndefinedScore(format!(
            "scene {}: target set has no detections",
            targets.scene_id
        )));
    }
    targets
        .detections
        .iter()
        .map(|t| Ok(avg_iou(sources, t, kind)?.unwrap_or(0.0)))
        .collect()
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

/// Mean over target detections of their average matched IoU (no match = 0).
pub fn miou(sources: &DetectionSet, targets: &DetectionSet, kind: Kind) -> Result<f64> {
    Ok(mean(&a_values(sources, targets, kind)?))
}

/// Single-modality score `S_m` in percent.
pub fn mc_single(modality: &DetectionSet, output: &DetectionSet, kind: Kind) -> Result<f64> {
    Ok(100.0 * miou(modality, output, kind)?)
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Aggregation {
    /// Mean over all (modality, output detection) pairs.
    #[default]
    Flat,
    /// Mean of the per-modality scores.
    PerModality,
}

/// Combined score `S` in percent.
pub fn mc_combined(
    modalities: &[&DetectionSet],
    output: &DetectionSet,
    kind: Kind,
    aggregation: Aggregation,
) -> Result<f64> {
    if modalities.is_empty() {
        return Err(Error::InvalidArgument("at least one modality is required".into()));
    }
    let per: Vec<Vec<f64>> = modalities
        .iter()
        .map(|m| a_values(m, output, kind))
        .collect::<Result<_>>()?;
    let score = match aggregation {
        Aggregation::Flat => {
            let flat: Vec<f64> = per.iter().flatten().copied().collect();
            mean(&flat)
        }
        Aggregation::PerModality => mean(&per.iter().map(|v| mean(v)).collect::<Vec<_>>()),
    };
    Ok(100.0 * score)
}

/// Outputs of one scene under the three conditions.
#[derive(Clone, Debug)]
pub struct SceneOutputs {
    pub split: Option<Split>,
    pub output: DetectionSet,
    pub rgb: DetectionSet,
    pub depth: DetectionSet,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Scores {
    pub combined: f64,
    pub rgb: f64,
    pub depth: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DetectionScore {
    pub scene_id: String,
    pub split: Option<Split>,
    pub index: usize,
    pub label: u32,
    pub confidence: f64,
    /// `A` values in `[0, 1]` (no match = 0), `[rgb, depth]`.
    pub box_a: [f64; 2],
    pub mask_a: [f64; 2],
    /// Per-detection MC (percent) as the mean of its `A` values.
    pub box_mc: f64,
    pub mask_mc: f64,
    /// Best IoU with any ground-truth instance, when ground truth is known.
    pub box_gt_iou: Option<f64>,
    pub mask_gt_iou: Option<f64>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct GroupScores {
    pub detections: usize,
    pub mask: Scores,
    #[serde(rename = "box")]
    pub bbox: Scores,
    pub mean_confidence: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct McReport {
    pub aggregation: Aggregation,
    pub scenes: usize,
    /// Scenes whose fused output is empty; their score is undefined.
    pub scenes_without_output: Vec<String>,
    pub per_detection: Vec<DetectionScore>,
    pub per_class: BTreeMap<u32, GroupScores>,
    pub per_split: BTreeMap<String, GroupScores>,
    /// Scores pooled over every scored detection.
    pub per_modality: GroupScores,
}

fn group(dets: &[&DetectionScore], aggregation: Aggregation) -> GroupScores {
    let n = dets.len();
    if n == 0 {
        return GroupScores::default();
    }
    let avg = |f: &dyn Fn(&DetectionScore) -> f64| dets.iter().map(|d| f(d)).sum::<f64>() / n as f64;
    let scores = |a: &dyn Fn(&DetectionScore) -> [f64; 2]| {
        let rgb = 100.0 * avg(&|d| a(d)[0]);
        let depth = 100.0 * avg(&|d| a(d)[1]);
        let combined = match aggregation {
            Aggregation::Flat => 100.0 * avg(&|d| (a(d)[0] + a(d)[1]) / 2.0),
            Aggregation::PerModality => (rgb + depth) / 2.0,
        };
        Scores { combined, rgb, depth }
    };
    GroupScores {
        detections: n,
        mask: scores(&|d| d.mask_a),
        bbox: scores(&|d| d.box_a),
        mean_confidence: avg(&|d| d.confidence),
    }
}

fn best_gt_iou(det: &Detection, gt: &[InstanceGt], kind: Kind) -> Result<Option<f64>> {
    let mut best: Option<f64> = None;
    for g in gt {
        let other = Detection {
            label: g.label,
            confidence: 1.0,
            bbox: g.bbox,
            mask: g.mask.clone(),
        };
        let v = detection_iou(det, &other, kind)?.ratio();
        best = Some(best.map_or(v, |b: f64| b.max(v)));
    }
    Ok(best.or((!gt.is_empty()).then_some(0.0)))
}

/// Scores every scene and aggregates by class (of the output detection),
/// by split and over everything. `ground_truth` maps scene ids to their
/// instances and is used only for the per-detection GT IoU. Scenes without
/// output detections are listed and skipped; if every scene is empty the
/// score is undefined.
pub fn mc_report(
    scenes: &[SceneOutputs],
    ground_truth: Option<&HashMap<String, Vec<InstanceGt>>>,
    aggregation: Aggregation,
) -> Result<McReport> {
    let mut per_detection = Vec::new();
    let mut without = Vec::new();
    for s in scenes {
        let id = &s.output.scene_id;
        if &s.rgb.scene_id != id || &s.depth.scene_id != id {
            return Err(Error::Mismatch(format!(
                "scene ids differ: output {id}, rgb {}, depth {}",
                s.rgb.scene_id, s.depth.scene_id
            )));
        }
        if s.output.is_empty() {
            without.push(id.clone());
            continue;
        }
        let gt = ground_truth.and_then(|g| g.get(id));
        let mut a = BTreeMap::new();
        for kind in Kind::ALL {
            a.insert(kind, [a_values(&s.rgb, &s.output, kind)?, a_values(&s.depth, &s.output, kind)?]);
        }
        for (k, det) in s.output.detections.iter().enumerate() {
            let box_a = [a[&Kind::Box][0][k], a[&Kind::Box][1][k]];
            let mask_a = [a[&Kind::Mask][0][k], a[&Kind::Mask][1][k]];
            per_detection.push(DetectionScore {
                scene_id: id.clone(),
                split: s.split,
                index: k,
                label: det.label,
                confidence: det.confidence,
                box_a,
                mask_a,
                box_mc: 50.0 * (box_a[0] + box_a[1]),
                mask_mc: 50.0 * (mask_a[0] + mask_a[1]),
                box_gt_iou: gt.map(|g| best_gt_iou(det, g, Kind::Box)).transpose()?.flatten(),
                mask_gt_iou: gt.map(|g| best_gt_iou(det, g, Kind::Mask)).transpose()?.flatten(),
            });
        }
    }
    if per_detection.is_empty() {
        return Err(Error::UndefinedScore(format!(
            "none of the {} scenes has an output detection",
            scenes.len()
        )));
    }
    let mut by_class: BTreeMap<u32, Vec<&DetectionScore>> = BTreeMap::new();
    let mut by_split: BTreeMap<String, Vec<&DetectionScore>> = BTreeMap::new();
    for d in &per_detection {
        by_class.entry(d.label).or_default().push(d);
        let key = d.split.map_or_else(|| "all".to_string(), |s| s.to_string());
        by_split.entry(key).or_default().push(d);
    }
    let all: Vec<&DetectionScore> = per_detection.iter().collect();
    Ok(McReport {
        aggregation,
        scenes: scenes.len(),
        scenes_without_output: without,
        per_class: by_class.into_iter().map(|(k, v)| (k, group(&v, aggregation))).collect(),
        per_split: by_split.into_iter().map(|(k, v)| (k, group(&v, aggregation))).collect(),
        per_modality: group(&all, aggregation),
        per_detection,
    })
}

impl McReport {
    /// Per-class table: class, mask MC (combined, rgb, depth), box MC
    /// (combined, rgb, depth). `names` maps label ids to class names.
    pub fn class_csv(&self, names: &dyn Fn(u32) -> Option<String>) -> String {
        let mut out = String::from("class,mask_combined,mask_rgb,mask_depth,box_combined,box_rgb,box_depth\n");
        for (label, g) in &self.per_class {
            let name = names(*label).unwrap_or_else(|| label.to_string());
            let _ = writeln!(
                out,
                "{name},{:.2},{:.2},{:.2},{:.2},{:.2},{:.2}",
                g.mask.combined, g.mask.rgb, g.mask.depth, g.bbox.combined, g.bbox.rgb, g.bbox.depth
            );
        }
        out
    }
}
