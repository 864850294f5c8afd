//! Markdown summary built from the JSON artifacts of the other commands.

use std::fmt::Write as _;

use super::{AblationReport, ConfidenceComparison, GateShiftReport};
use crate::mcscore::McReport;
use crate::model::ModalityCondition;

#[derive(Clone, Debug, Default)]
pub struct ReportInputs {
    pub ablations: Vec<AblationReport>,
    pub gates: Option<GateShiftReport>,
    pub mc: Option<McReport>,
    pub confidence: Option<ConfidenceComparison>,
    /// Display names for class labels, indexed by label.
    pub class_names: Vec<String>,
}

fn pct(v: f64) -> String {
    format!("{:.1}", 100.0 * v)
}

pub fn render_report(inputs: &ReportInputs) -> String {
    let mut out = String::from("# Reliability report\n");
    if !inputs.ablations.is_empty() {
        out.push_str("\n## Modality ablation (class-agnostic AP, %)\n\n");
        out.push_str("| Model | Split | Both box | Both mask | RGB off box | RGB off mask | Depth off box | Depth off mask |\n");
        out.push_str("|---|---|---|---|---|---|---|---|\n");
        for a in &inputs.ablations {
            let _ = writeln!(
                out,
                "| {} | {} | {} | {} | {} | {} | {} | {} |",
                a.model,
                a.split,
                pct(a.both.ap.bbox.map),
                pct(a.both.ap.mask.map),
                pct(a.rgb_off.ap.bbox.map),
                pct(a.rgb_off.ap.mask.map),
                pct(a.depth_off.ap.bbox.map),
                pct(a.depth_off.ap.mask.map),
            );
        }
        out.push_str("\n| Model | RGB off / both | Depth off / both | Mask MC | Box MC |\n|---|---|---|---|---|\n");
        for a in &inputs.ablations {
            let mc = |f: &dyn Fn(&McReport) -> f64| a.mc.as_ref().map_or("n/a".to_string(), |m| format!("{:.1}", f(m)));
            let _ = writeln!(
                out,
                "| {} | {:.3} | {:.3} | {} | {} |",
                a.model,
                a.rgb_off_ratio(),
                a.depth_off_ratio(),
                mc(&|m| m.per_modality.mask.combined),
                mc(&|m| m.per_modality.bbox.combined),
            );
        }
    }
    if let Some(g) = &inputs.gates {
        out.push_str("\n## Mean gate weight (RGB / depth)\n\n| Condition |");
        let scales = g.mean_weight.values().next().map_or(0, Vec::len);
        for j in 0..scales {
            let _ = write!(out, " scale {j} |");
        }
        out.push_str("\n|---|");
        out.push_str(&"---|".repeat(scales));
        out.push('\n');
        for (c, w) in &g.mean_weight {
            let _ = write!(out, "| {c} |");
            for v in w {
                let _ = write!(out, " {:.3} / {:.3} |", v[0], v[1]);
            }
            out.push('\n');
        }
        let _ = writeln!(
            out,
            "\nDepth weight higher at every scale than with both inputs: rgb_only {:.0}% of scenes, depth_only {:.0}%.",
            100.0 * g.fraction_depth_higher(ModalityCondition::RgbOnly, ModalityCondition::Both),
            100.0 * g.fraction_depth_higher(ModalityCondition::DepthOnly, ModalityCondition::Both),
        );
    }
    if let Some(m) = &inputs.mc {
        out.push_str("\n## MC per class\n\n| Class | Detections | Mask MC | Box MC | Mean confidence |\n|---|---|---|---|---|\n");
        for (label, g) in &m.per_class {
            let name = inputs
                .class_names
                .get(*label as usize)
                .cloned()
                .unwrap_or_else(|| label.to_string());
            let _ = writeln!(
                out,
                "| {name} | {} | {:.1} | {:.1} | {:.3} |",
                g.detections, g.mask.combined, g.bbox.combined, g.mean_confidence
            );
        }
        let _ = writeln!(
            out,
            "\nPer modality: mask MC {:.1} (RGB {:.1}, depth {:.1}), box MC {:.1} (RGB {:.1}, depth {:.1}).",
            m.per_modality.mask.combined,
            m.per_modality.mask.rgb,
            m.per_modality.mask.depth,
            m.per_modality.bbox.combined,
            m.per_modality.bbox.rgb,
            m.per_modality.bbox.depth,
        );
        if !m.scenes_without_output.is_empty() {
            let _ = writeln!(out, "\n{} scenes had no detections and were skipped.", m.scenes_without_output.len());
        }
    }
    if let Some(c) = &inputs.confidence {
        out.push_str("\n## MC against confidence\n\n| Split | Detections | Mask MC | Box MC | Confidence (%) |\n|---|---|---|---|---|\n");
        for s in &c.splits {
            let _ = writeln!(
                out,
                "| {} | {} | {:.1} | {:.1} | {:.1} |",
                s.split, s.detections, s.mask_mc, s.box_mc, s.confidence
            );
        }
        let corr = |v: Option<f64>| v.map_or("n/a".to_string(), |x| format!("{x:.3}"));
        let _ = writeln!(
            out,
            "\nVariance across splits: MC {:.2}, confidence {:.2}. Relative drop: MC {:.3}, confidence {:.3}.\n\
             Spearman with mask IoU to ground truth: MC {}, confidence {}.",
            c.mask_mc_variance,
            c.confidence_variance,
            c.mask_mc_relative_drop,
            c.confidence_relative_drop,
            corr(c.mc_gt_spearman),
            corr(c.confidence_gt_spearman),
        );
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::harness::SplitComparison;

    #[test]
    fn empty_inputs_give_a_title_only() {
        assert_eq!(render_report(&ReportInputs::default()), "# Reliability report\n");
    }

    #[test]
    fn confidence_section() {
        let c = ConfidenceComparison {
            splits: vec![SplitComparison {
                split: "test".into(),
                detections: 3,
                mask_mc: 61.5,
                box_mc: 70.0,
                confidence: 80.0,
            }],
            mask_mc_variance: 0.0,
            confidence_variance: 0.0,
            mask_mc_relative_drop: 0.0,
            confidence_relative_drop: 0.0,
            mc_gt_spearman: Some(0.5),
            confidence_gt_spearman: None,
        };
        let text = render_report(&ReportInputs {
            confidence: Some(c),
            ..Default::default()
        });
        assert!(text.contains("| test | 3 | 61.5 | 70.0 | 80.0 |"));
        assert!(text.contains("MC 0.500, confidence n/a"));
    }
}
