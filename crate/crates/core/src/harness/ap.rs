//! COCO-style average precision over boxes and masks.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mcscore::{iou, Kind, PixelSet};
use crate::model::{Detection, DetectionSet};
use crate::synthdata::InstanceGt;

/// IoU thresholds in hundredths, `0.50:0.05:0.95` by default.
pub fn coco_thresholds() -> Vec<u32> {
    (0..10).map(|i| 50 + 5 * i).collect()
}

const RECALL_POINTS: usize = 101;

/// One scene's predictions and ground truth.
#[derive(Clone, Copy, Debug)]
pub struct EvalScene<'a> {
    pub detections: &'a DetectionSet,
    pub ground_truth: &'a [InstanceGt],
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct KindAp {
    /// Per-class AP averaged over thresholds, classes with ground truth only.
    pub per_class: BTreeMap<u32, f64>,
    /// Per-threshold AP averaged over classes.
    pub per_threshold: Vec<f64>,
    pub map: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ApResult {
    pub protocol: String,
    pub iou_thresholds: Vec<f64>,
    pub class_agnostic: bool,
    #[serde(rename = "box")]
    pub bbox: KindAp,
    pub mask: KindAp,
}

impl ApResult {
    pub fn get(&self, kind: Kind) -> &KindAp {
        match kind {
            Kind::Box => &self.bbox,
            Kind::Mask => &self.mask,
        }
    }
}

fn gt_as_detection(g: &InstanceGt) -> Detection {
    Detection {
        label: g.label,
        confidence: 1.0,
        bbox: g.bbox,
        mask: g.mask.clone(),
    }
}

/// AP of one class at one threshold: greedy matching in stable descending
/// confidence order, each detection taking the unmatched ground truth with
/// the highest IoU at or above the threshold, then 101-point interpolation.
fn class_ap(
    scenes: &[(Vec<&Detection>, Vec<Detection>)],
    kind: Kind,
    threshold: u32,
) -> Result<Option<f64>> {
    let n_gt: usize = scenes.iter().map(|(_, g)| g.len()).sum();
    if n_gt == 0 {
        return Ok(None);
    }
    let mut order: Vec<(usize, usize)> = scenes
        .iter()
        .enumerate()
        .flat_map(|(s, (d, _))| (0..d.len()).map(move |i| (s, i)))
        .collect();
    order.sort_by(|a, b| {
        let (ca, cb) = (scenes[a.0].0[a.1].confidence, scenes[b.0].0[b.1].confidence);
        cb.total_cmp(&ca)
    });
    let mut used: Vec<Vec<bool>> = scenes.iter().map(|(_, g)| vec![false; g.len()]).collect();
    let mut tp = Vec::with_capacity(order.len());
    for (s, i) in order {
        let det = scenes[s].0[i];
        let mut best: Option<(usize, crate::mcscore::Iou)> = None;
        for (j, g) in scenes[s].1.iter().enumerate() {
            if used[s][j] {
                continue;
            }
            let v = iou(PixelSet::of(det, kind), PixelSet::of(g, kind))?;
            if !v.at_least(u64::from(threshold), 100) {
                continue;
            }
            let better = match best {
                None => true,
                Some((_, b)) => {
                    u128::from(v.intersection) * u128::from(b.union)
                        > u128::from(b.intersection) * u128::from(v.union)
                }
            };
            if better {
                best = Some((j, v));
            }
        }
        match best {
            Some((j, _)) => {
                used[s][j] = true;
                tp.push(true);
            }
            None => tp.push(false),
        }
    }
    Ok(Some(interpolated_ap(&tp, n_gt)))
}

/// 101-point interpolated AP from a ranked TP/FP sequence.
pub fn interpolated_ap(tp: &[bool], n_gt: usize) -> f64 {
    let mut recall = Vec::with_capacity(tp.len());
    let mut precision = Vec::with_capacity(tp.len());
    let (mut t, mut f) = (0usize, 0usize);
    for &hit in tp {
        if hit {
            t += 1;
        } else {
            f += 1;
        }
        recall.push(t as f64 / n_gt as f64);
        precision.push(t as f64 / (t + f) as f64);
    }
    for i in (1..precision.len()).rev() {
        if precision[i] > precision[i - 1] {
            precision[i - 1] = precision[i];
        }
    }
    let mut sum = 0.0;
    for k in 0..RECALL_POINTS {
        let r = k as f64 / (RECALL_POINTS - 1) as f64;
        let idx = recall.partition_point(|&x| x < r);
        if idx < precision.len() {
            sum += precision[idx];
        }
    }
    sum / RECALL_POINTS as f64
}

pub fn average_precision(scenes: &[EvalScene<'_>], thresholds: &[u32], class_agnostic: bool) -> Result<ApResult> {
    if thresholds.is_empty() || thresholds.iter().any(|&t| t > 100) {
        return Err(Error::InvalidArgument("IoU thresholds must be in 0..=100 hundredths".into()));
    }
    if scenes.iter().all(|s| s.ground_truth.is_empty()) {
        return Err(Error::InvalidArgument("no ground truth in any scene".into()));
    }
    let key = |label: u32| if class_agnostic { 0 } else { label };
    let mut classes: Vec<u32> = scenes
        .iter()
        .flat_map(|s| s.ground_truth.iter().map(|g| key(g.label)))
        .collect();
    classes.sort_unstable();
    classes.dedup();

    let mut kinds = Vec::new();
    for kind in Kind::ALL {
        let mut per_class = BTreeMap::new();
        let mut per_threshold = vec![0.0; thresholds.len()];
        for &c in &classes {
            let grouped: Vec<(Vec<&Detection>, Vec<Detection>)> = scenes
                .iter()
                .map(|s| {
                    (
                        s.detections.detections.iter().filter(|d| key(d.label) == c).collect(),
                        s.ground_truth
                            .iter()
                            .filter(|g| key(g.label) == c)
                            .map(gt_as_detection)
                            .collect(),
                    )
                })
                .collect();
            let mut total = 0.0;
            for (ti, &t) in thresholds.iter().enumerate() {
                let ap = class_ap(&grouped, kind, t)?.expect("class has ground truth");
                per_threshold[ti] += ap / classes.len() as f64;
                total += ap;
            }
            per_class.insert(c, total / thresholds.len() as f64);
        }
        let map = per_class.values().sum::<f64>() / per_class.len() as f64;
        kinds.push(KindAp {
            per_class,
            per_threshold,
            map,
        });
    }
    let mask = kinds.pop().expect("two kinds");
    let bbox = kinds.pop().expect("two kinds");
    Ok(ApResult {
        protocol: "coco-101pt".into(),
        iou_thresholds: thresholds.iter().map(|&t| f64::from(t) / 100.0).collect(),
        class_agnostic,
        bbox,
        mask,
    })
}
