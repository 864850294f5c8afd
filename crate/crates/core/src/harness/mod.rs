//! Evaluation and the reliability experiments: AP, modality ablation, gate
//! shift analysis, MC against confidence, and markdown reports.

pub mod ap;
mod report;

use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fusion::{export_gate_record, GateRecord};
use crate::mcscore::{mc_report, Aggregation, McReport, SceneOutputs};
use crate::model::{predict_scene, DetectionSet, ModalityCondition, ModelParams, Thresholds, MODALITY_NAMES};
use crate::synthdata::{InstanceGt, SceneSample};

pub use ap::{average_precision, coco_thresholds, ApResult, EvalScene, KindAp};
pub use report::{render_report, ReportInputs};

/// Runs the model on every scene under one condition.
pub fn predict_all(
    params: &ModelParams,
    scenes: &[SceneSample],
    condition: ModalityCondition,
    thresholds: &Thresholds,
) -> Result<Vec<(DetectionSet, GateRecord)>> {
    scenes
        .iter()
        .map(|s| predict_scene(params, s, condition, thresholds))
        .collect()
}

pub fn evaluate_sets(sets: &[DetectionSet], scenes: &[SceneSample], class_agnostic: bool) -> Result<ApResult> {
    if sets.len() != scenes.len() {
        return Err(Error::Mismatch(format!("{} detection sets for {} scenes", sets.len(), scenes.len())));
    }
    let eval: Vec<EvalScene<'_>> = sets
        .iter()
        .zip(scenes)
        .map(|(d, s)| {
            if d.scene_id != s.scene_id {
                return Err(Error::Mismatch(format!("detections for {} paired with {}", d.scene_id, s.scene_id)));
            }
            Ok(EvalScene {
                detections: d,
                ground_truth: &s.instances,
            })
        })
        .collect::<Result<_>>()?;
    average_precision(&eval, &coco_thresholds(), class_agnostic)
}

/// Outputs of all three conditions for each scene, ready for MC scoring.
pub fn condition_outputs(
    params: &ModelParams,
    scenes: &[SceneSample],
    thresholds: &Thresholds,
) -> Result<Vec<SceneOutputs>> {
    scenes
        .iter()
        .map(|s| {
            let run = |c| predict_scene(params, s, c, thresholds).map(|(d, _)| d);
            Ok(SceneOutputs {
                split: Some(s.split),
                output: run(ModalityCondition::Both)?,
                rgb: run(ModalityCondition::RgbOnly)?,
                depth: run(ModalityCondition::DepthOnly)?,
            })
        })
        .collect()
}

pub fn ground_truth_index(scenes: &[SceneSample]) -> HashMap<String, Vec<InstanceGt>> {
    scenes
        .iter()
        .map(|s| (s.scene_id.clone(), s.instances.clone()))
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConditionResult {
    pub condition: ModalityCondition,
    pub detections: usize,
    /// Class-agnostic AP.
    pub ap: ApResult,
}

/// Box and mask AP under both inputs, RGB removed and depth removed.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationReport {
    pub model: String,
    pub split: String,
    pub scenes: usize,
    pub both: ConditionResult,
    pub rgb_off: ConditionResult,
    pub depth_off: ConditionResult,
    /// `None` when the model detects nothing with both inputs.
    pub mc: Option<McReport>,
}

impl AblationReport {
    /// `rgb_off` box AP divided by `both` box AP.
    pub fn rgb_off_ratio(&self) -> f64 {
        ratio(self.rgb_off.ap.bbox.map, self.both.ap.bbox.map)
    }

    pub fn depth_off_ratio(&self) -> f64 {
        ratio(self.depth_off.ap.bbox.map, self.both.ap.bbox.map)
    }
}

fn ratio(a: f64, b: f64) -> f64 {
    if b > 0.0 {
        a / b
    } else {
        0.0
    }
}

pub fn modality_ablation(
    params: &ModelParams,
    scenes: &[SceneSample],
    thresholds: &Thresholds,
    model: &str,
    split: &str,
) -> Result<AblationReport> {
    if scenes.is_empty() {
        return Err(Error::InvalidArgument("ablation needs at least one scene".into()));
    }
    let outputs = condition_outputs(params, scenes, thresholds)?;
    let result = |condition: ModalityCondition, pick: &dyn Fn(&SceneOutputs) -> &DetectionSet| {
        let sets: Vec<DetectionSet> = outputs.iter().map(|o| pick(o).clone()).collect();
        Ok::<_, Error>(ConditionResult {
            condition,
            detections: sets.iter().map(DetectionSet::len).sum(),
            ap: evaluate_sets(&sets, scenes, true)?,
        })
    };
    let gt = ground_truth_index(scenes);
    Ok(AblationReport {
        model: model.to_string(),
        split: split.to_string(),
        scenes: scenes.len(),
        both: result(ModalityCondition::Both, &|o| &o.output)?,
        rgb_off: result(ModalityCondition::DepthOnly, &|o| &o.depth)?,
        depth_off: result(ModalityCondition::RgbOnly, &|o| &o.rgb)?,
        mc: match mc_report(&outputs, Some(&gt), Aggregation::Flat) {
            Ok(r) => Some(r),
            Err(Error::UndefinedScore(_)) => None,
            Err(e) => return Err(e),
        },
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneGateMeans {
    pub scene_id: String,
    /// `[condition][scale]` mean depth weight; the RGB weight is `1 - x`.
    pub depth_weight: BTreeMap<ModalityCondition, Vec<f64>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GateShiftReport {
    pub scenes: Vec<SceneGateMeans>,
    /// `[condition][scale][modality]` mean over scenes.
    pub mean_weight: BTreeMap<ModalityCondition, Vec<[f64; 2]>>,
}

impl GateShiftReport {
    /// Fraction of scenes whose depth weight under `a` exceeds that under
    /// `b` at every scale.
    pub fn fraction_depth_higher(&self, a: ModalityCondition, b: ModalityCondition) -> f64 {
        if self.scenes.is_empty() {
            return 0.0;
        }
        let hits = self
            .scenes
            .iter()
            .filter(|s| s.depth_weight[&a].iter().zip(&s.depth_weight[&b]).all(|(x, y)| x > y))
            .count();
        hits as f64 / self.scenes.len() as f64
    }
}

/// Mean gate weights per scene, condition and scale. With `export`, the
/// heatmaps of the first scene are written there for every condition.
pub fn gate_shift_analysis(
    params: &ModelParams,
    scenes: &[SceneSample],
    thresholds: &Thresholds,
    export: Option<&Path>,
) -> Result<GateShiftReport> {
    if scenes.is_empty() {
        return Err(Error::InvalidArgument("gate analysis needs at least one scene".into()));
    }
    let scales = params.arch.scales;
    let mut per_scene = Vec::with_capacity(scenes.len());
    let mut sums: BTreeMap<ModalityCondition, Vec<[f64; 2]>> = BTreeMap::new();
    for (i, s) in scenes.iter().enumerate() {
        let mut depth_weight = BTreeMap::new();
        for c in ModalityCondition::ALL {
            let (_, record) = predict_scene(params, s, c, thresholds)?;
            if i == 0 {
                if let Some(dir) = export {
                    export_gate_record(&record, &MODALITY_NAMES, dir, &format!("{}_{c}_", s.scene_id))?;
                }
            }
            let mut means = Vec::with_capacity(scales);
            let acc = sums.entry(c).or_insert_with(|| vec![[0.0; 2]; scales]);
            for (j, slot) in acc.iter_mut().enumerate() {
                for (m, v) in slot.iter_mut().enumerate() {
                    *v += record.mean_weight(j, m)? / scenes.len() as f64;
                }
                means.push(record.mean_weight(j, crate::model::DEPTH)?);
            }
            depth_weight.insert(c, means);
        }
        per_scene.push(SceneGateMeans {
            scene_id: s.scene_id.clone(),
            depth_weight,
        });
    }
    Ok(GateShiftReport {
        scenes: per_scene,
        mean_weight: sums,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitComparison {
    pub split: String,
    pub detections: usize,
    pub mask_mc: f64,
    pub box_mc: f64,
    /// Mean confidence in percent, on the same scale as MC.
    pub confidence: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConfidenceComparison {
    pub splits: Vec<SplitComparison>,
    /// Population variance of the per-split means.
    pub mask_mc_variance: f64,
    pub confidence_variance: f64,
    /// `(first - last) / first` over the split order.
    pub mask_mc_relative_drop: f64,
    pub confidence_relative_drop: f64,
    /// Spearman correlation of per-detection mask MC (and confidence) with
    /// the best mask IoU to ground truth.
    pub mc_gt_spearman: Option<f64>,
    pub confidence_gt_spearman: Option<f64>,
}

fn variance(v: &[f64]) -> f64 {
    if v.is_empty() {
        return 0.0;
    }
    let m = v.iter().sum::<f64>() / v.len() as f64;
    v.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / v.len() as f64
}

fn ranks(v: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..v.len()).collect();
    idx.sort_by(|&a, &b| v[a].total_cmp(&v[b]));
    let mut out = vec![0.0; v.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && v[idx[j + 1]] == v[idx[i]] {
            j += 1;
        }
        let rank = (i + j) as f64 / 2.0 + 1.0;
        for k in i..=j {
            out[idx[k]] = rank;
        }
        i = j + 1;
    }
    out
}

/// Spearman rank correlation with average ranks for ties; `None` when
/// either side is constant or there are fewer than two points.
pub fn spearman(x: &[f64], y: &[f64]) -> Option<f64> {
    if x.len() != y.len() || x.len() < 2 {
        return None;
    }
    let (rx, ry) = (ranks(x), ranks(y));
    let n = x.len() as f64;
    let (mx, my) = (rx.iter().sum::<f64>() / n, ry.iter().sum::<f64>() / n);
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in rx.iter().zip(&ry) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx) * (a - mx);
        syy += (b - my) * (b - my);
    }
    (sxx > 0.0 && syy > 0.0).then(|| sxy / (sxx * syy).sqrt())
}

/// Compares MC with detector confidence over `splits` (in that order).
pub fn mc_vs_confidence(report: &McReport, splits: &[&str]) -> Result<ConfidenceComparison> {
    let mut rows = Vec::with_capacity(splits.len());
    for &name in splits {
        let g = report
            .per_split
            .get(name)
            .ok_or_else(|| Error::InvalidArgument(format!("report has no scored detections for split '{name}'")))?;
        rows.push(SplitComparison {
            split: name.to_string(),
            detections: g.detections,
            mask_mc: g.mask.combined,
            box_mc: g.bbox.combined,
            confidence: 100.0 * g.mean_confidence,
        });
    }
    let mc: Vec<f64> = rows.iter().map(|r| r.mask_mc).collect();
    let conf: Vec<f64> = rows.iter().map(|r| r.confidence).collect();
    let drop = |v: &[f64]| match (v.first(), v.last()) {
        (Some(&a), Some(&b)) if a > 0.0 => (a - b) / a,
        _ => 0.0,
    };
    let with_gt: Vec<_> = report
        .per_detection
        .iter()
        .filter_map(|d| d.mask_gt_iou.map(|g| (d.mask_mc, d.confidence, g)))
        .collect();
    let gt: Vec<f64> = with_gt.iter().map(|t| t.2).collect();
    Ok(ConfidenceComparison {
        mask_mc_variance: variance(&mc),
        confidence_variance: variance(&conf),
        mask_mc_relative_drop: drop(&mc),
        confidence_relative_drop: drop(&conf),
        mc_gt_spearman: spearman(&with_gt.iter().map(|t| t.0).collect::<Vec<_>>(), &gt),
        confidence_gt_spearman: spearman(&with_gt.iter().map(|t| t.1).collect::<Vec<_>>(), &gt),
        splits: rows,
    })
}

/// Per-detection scatter rows: split, scene, label, confidence, mask MC,
/// box MC and best mask IoU to ground truth.
pub fn scatter_csv(report: &McReport) -> String {
    let mut out = String::from("split,scene_id,label,confidence,mask_mc,box_mc,mask_gt_iou\n");
    for d in &report.per_detection {
        out.push_str(&format!(
            "{},{},{},{:.6},{:.4},{:.4},{}\n",
            d.split.map_or("".to_string(), |s| s.to_string()),
            d.scene_id,
            d.label,
            d.confidence,
            d.mask_mc,
            d.box_mc,
            d.mask_gt_iou.map_or(String::new(), |v| format!("{v:.6}"))
        ));
    }
    out
}
