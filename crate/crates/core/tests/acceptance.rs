//! End-to-end acceptance run. Each criterion prints one PASS/FAIL line on
//! stderr (written directly so it shows up without `--nocapture`); the test
//! fails if any criterion does.
//!
//! The redundancy, gate and MC criteria train two models on the packaged
//! dataset and take several minutes in the optimised test profile.

mod common;

use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::process::Command;
use std::time::{Duration, Instant};

use mmrnet::fusion::{fuse, gate_weights, FeaturePyramid, FusionParams};
use mmrnet::geometry::{BoxPx, Rle};
use mmrnet::harness::ap::interpolated_ap;
use mmrnet::harness::{
    average_precision, coco_thresholds, condition_outputs, gate_shift_analysis, ground_truth_index,
    mc_vs_confidence, modality_ablation, AblationReport, EvalScene, GateShiftReport,
};
use mmrnet::mcscore::{iou, mc_combined, mc_report, mc_single, Aggregation, Kind, PixelSet};
use mmrnet::model::{Detection, DetectionSet, ModalityCondition, ModelParams};
use mmrnet::nn::Parameters;
use mmrnet::synthdata::{generate_dataset, GeneratorConfig, InstanceGt, ModalitySignature, SceneSample, Split};
use mmrnet::tensor::Tensor;
use mmrnet::training::{train, TrainConfig, TrainLog, TrainingData};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const DATASET: &str = include_str!("../configs/dataset.toml");
const STANDARD: &str = include_str!("../configs/standard.toml");
const DYNAMIC: &str = include_str!("../configs/dynamic.toml");

struct Outcome {
    pass: bool,
    detail: String,
}

impl Outcome {
    fn new(pass: bool, detail: impl Into<String>) -> Self {
        Self {
            pass,
            detail: detail.into(),
        }
    }
}

fn report(id: &str, name: &str, limit: Option<Duration>, run: impl FnOnce() -> Outcome) -> bool {
    let start = Instant::now();
    let mut outcome = run();
    let elapsed = start.elapsed();
    if let Some(limit) = limit.filter(|&l| elapsed > l) {
        outcome.pass = false;
        outcome.detail.push_str(&format!("; over the {limit:?} budget"));
    }
    let verdict = if outcome.pass { "PASS" } else { "FAIL" };
    let _ = writeln!(
        std::io::stderr(),
        "[{verdict}] {id} {name}: {} ({:.1}s)",
        outcome.detail,
        elapsed.as_secs_f64()
    );
    outcome.pass
}

fn info(text: &str) {
    let _ = writeln!(std::io::stderr(), "       {text}");
}

// ---------------------------------------------------------------- oracles

fn random_tensor(rng: &mut ChaCha8Rng, c: usize, h: usize, w: usize, scale: f64) -> Tensor {
    let data = (0..c * h * w).map(|_| scale * rng.random_range(-1.0..1.0)).collect();
    Tensor::from_vec(c, h, w, data).unwrap()
}

fn softmax_partition() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut worst = 0.0f64;
    for case in 0..100 {
        let (n, c) = (2 + case % 2, 4);
        let mut params = FusionParams::new(n, c, c, 2, &mut rng);
        let flat: Vec<f64> = params
            .flatten()
            .into_iter()
            .map(|v| v + 2.0 * rng.random_range(-1.0..1.0))
            .collect();
        params.load_flat(&flat).unwrap();
        let pyramids: Vec<FeaturePyramid> = (0..n)
            .map(|m| {
                // Case 0 is all zeros; cases 1..=n zero one modality.
                let scale = if case == 0 || case == m + 1 { 0.0 } else { 3.0 };
                FeaturePyramid {
                    modality: m,
                    levels: vec![
                        random_tensor(&mut rng, c, 8, 8, scale),
                        random_tensor(&mut rng, c, 4, 4, scale),
                    ],
                }
            })
            .collect();
        let (_, record) = fuse(&pyramids, &params).unwrap();
        // Extreme raw logits exercise the softmax overflow guard as well.
        let logits: Vec<Tensor> = (0..n).map(|_| random_tensor(&mut rng, c, 4, 4, 800.0)).collect();
        let extra = gate_weights(&logits).unwrap();
        for weights in record.scales.iter().map(|s| &s.weights).chain([&extra]) {
            for i in 0..weights[0].data().len() {
                let sum: f64 = weights.iter().map(|w| w.data()[i]).sum();
                worst = worst.max((sum - 1.0).abs());
            }
        }
    }
    Outcome::new(worst <= 1e-6, format!("max |sum - 1| = {worst:.1e} over 100 inputs"))
}

fn gradient_correctness() -> Outcome {
    use common::gradcheck::{fusion_input_check, fusion_parameter_check, model_check, TOLERANCE};
    let checks = [
        ("fusion parameters", fusion_parameter_check()),
        ("fusion inputs", fusion_input_check()),
        ("model", model_check()),
    ];
    let pass = checks.iter().all(|(_, (worst, largest))| *worst < TOLERANCE && *largest > 1e-3);
    let detail = checks
        .iter()
        .map(|(name, (worst, _))| format!("{name} {worst:.1e}"))
        .collect::<Vec<_>>()
        .join(", ");
    Outcome::new(pass, format!("worst relative error: {detail}"))
}

fn random_box(rng: &mut ChaCha8Rng, h: usize, w: usize) -> BoxPx {
    let (x0, x1) = (rng.random_range(0..w as u32), rng.random_range(0..w as u32));
    let (y0, y1) = (rng.random_range(0..h as u32), rng.random_range(0..h as u32));
    BoxPx::new(x0.min(x1), y0.min(y1), x0.max(x1), y0.max(y1)).unwrap()
}

fn random_mask(rng: &mut ChaCha8Rng, h: usize, w: usize) -> Vec<bool> {
    // A box-shaped blob with speckle, never empty.
    let b = random_box(rng, h, w);
    let density = rng.random_range(0.2..1.0);
    let mut mask: Vec<bool> = (0..h * w)
        .map(|i| b.contains((i % w) as u32, (i / w) as u32) && rng.random_bool(density))
        .collect();
    mask[(b.y_min as usize) * w + b.x_min as usize] = true;
    mask
}

fn box_pixels(b: &BoxPx, h: usize, w: usize) -> Vec<bool> {
    (0..h * w).map(|i| b.contains((i % w) as u32, (i / w) as u32)).collect()
}

fn enumerate(a: &[bool], b: &[bool]) -> (u64, u64) {
    let inter = a.iter().zip(b).filter(|(x, y)| **x && **y).count() as u64;
    let union = a.iter().zip(b).filter(|(x, y)| **x || **y).count() as u64;
    (inter, union)
}

fn iou_oracle() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let mut mismatches = 0;
    for _ in 0..500 {
        let (h, w) = (rng.random_range(1..=64), rng.random_range(1..=64));
        let (ba, bb) = (random_box(&mut rng, h, w), random_box(&mut rng, h, w));
        let got = iou(
            PixelSet::Box { bbox: &ba, height: h, width: w },
            PixelSet::Box { bbox: &bb, height: h, width: w },
        )
        .unwrap();
        if (got.intersection, got.union) != enumerate(&box_pixels(&ba, h, w), &box_pixels(&bb, h, w)) {
            mismatches += 1;
        }
        let (ma, mb) = (random_mask(&mut rng, h, w), random_mask(&mut rng, h, w));
        let (ra, rb) = (Rle::from_mask(&ma, h, w), Rle::from_mask(&mb, h, w));
        let got = iou(PixelSet::Mask(&ra), PixelSet::Mask(&rb)).unwrap();
        if (got.intersection, got.union) != enumerate(&ma, &mb) {
            mismatches += 1;
        }
    }
    Outcome::new(mismatches == 0, format!("{mismatches} mismatches over 500 box and 500 mask pairs"))
}

/// A detection covering `cols` of row `row` on a 16x16 image.
fn strip(row: usize, cols: std::ops::Range<usize>, confidence: f64) -> Detection {
    let mut mask = vec![false; 256];
    for c in cols {
        mask[row * 16 + c] = true;
    }
    let mask = Rle::from_mask(&mask, 16, 16);
    Detection {
        label: 1,
        confidence,
        bbox: mask.bbox().unwrap(),
        mask,
    }
}

fn set(condition: ModalityCondition, detections: Vec<Detection>) -> DetectionSet {
    let mut s = DetectionSet::new("fixture", condition, 16, 16);
    s.detections = detections;
    s
}

fn mc_endpoints() -> Outcome {
    let output = set(ModalityCondition::Both, vec![strip(1, 0..10, 0.9), strip(5, 2..8, 0.8)]);
    let same_rgb = set(ModalityCondition::RgbOnly, output.detections.clone());
    let same_depth = set(ModalityCondition::DepthOnly, output.detections.clone());
    let disjoint = set(ModalityCondition::DepthOnly, vec![strip(10, 0..10, 0.9), strip(12, 0..16, 0.5)]);
    // 3 of 10 pixels: IoU exactly 0.3 must not match.
    let boundary = set(ModalityCondition::RgbOnly, vec![strip(1, 0..3, 0.9)]);
    let boundary_out = set(ModalityCondition::Both, vec![strip(1, 0..10, 0.9)]);
    let mut failures = Vec::new();
    for kind in Kind::ALL {
        for agg in [Aggregation::Flat, Aggregation::PerModality] {
            let identical = mc_combined(&[&same_rgb, &same_depth], &output, kind, agg).unwrap();
            if identical != 100.0 {
                failures.push(format!("identical {kind:?} {agg:?} = {identical}"));
            }
            let none = mc_combined(&[&disjoint, &disjoint], &output, kind, agg).unwrap();
            if none != 0.0 {
                failures.push(format!("disjoint {kind:?} {agg:?} = {none}"));
            }
        }
        let edge = mc_single(&boundary, &boundary_out, kind).unwrap();
        if edge != 0.0 {
            failures.push(format!("IoU 0.3 counted for {kind:?}: {edge}"));
        }
        // Just above the boundary (4/10) does count.
        let above = set(ModalityCondition::RgbOnly, vec![strip(1, 0..4, 0.9)]);
        let s = mc_single(&above, &boundary_out, kind).unwrap();
        if (s - 40.0).abs() > 1e-12 {
            failures.push(format!("IoU 0.4 gave {s} for {kind:?}"));
        }
    }
    let detail = if failures.is_empty() {
        "identical = 100, disjoint = 0, IoU 0.3 excluded".to_string()
    } else {
        failures.join("; ")
    };
    Outcome::new(failures.is_empty(), detail)
}

fn gt(det: &Detection) -> InstanceGt {
    InstanceGt {
        label: det.label,
        mask: det.mask.clone(),
        bbox: det.bbox,
        signature: ModalitySignature::Balanced,
    }
}

/// Reference AP: at each recall point take the best precision reached at
/// that recall or beyond, scanning every prefix of the ranking.
fn exhaustive_ap(tp: &[bool], n_gt: usize) -> f64 {
    let mut sum = 0.0;
    for k in 0..101 {
        let r = k as f64 / 100.0;
        let mut best = 0.0f64;
        for end in 1..=tp.len() {
            let hits = tp[..end].iter().filter(|&&t| t).count();
            if hits as f64 / n_gt as f64 >= r {
                best = best.max(hits as f64 / end as f64);
            }
        }
        sum += best;
    }
    sum / 101.0
}

/// Ranked detections against ground truth: `Some(i)` duplicates object `i`,
/// `None` is a false positive in an empty row.
struct PrFixture {
    objects: usize,
    ranking: Vec<Option<usize>>,
    tp: Vec<bool>,
    expected: f64,
}

fn pr_fixtures() -> Vec<PrFixture> {
    vec![
        // TP, FP, TP over 2 objects: precision 1 up to recall 0.5, then 2/3.
        PrFixture {
            objects: 2,
            ranking: vec![Some(0), None, Some(1)],
            tp: vec![true, false, true],
            expected: (51.0 + 50.0 * 2.0 / 3.0) / 101.0,
        },
        // FP then TP over 1 object: interpolated precision 1/2 everywhere.
        PrFixture {
            objects: 1,
            ranking: vec![None, Some(0)],
            tp: vec![false, true],
            expected: 0.5,
        },
        // Two hits, a duplicate and a miss over 4 objects: recall stops at 0.5.
        PrFixture {
            objects: 4,
            ranking: vec![Some(0), Some(1), Some(0), None],
            tp: vec![true, true, false, false],
            expected: 51.0 / 101.0,
        },
    ]
}

fn ap_sanity() -> Outcome {
    let thresholds = coco_thresholds();
    let objects: Vec<Detection> = (0..4).map(|i| strip(2 * i, 2..12, 1.0)).collect();
    let truth: Vec<InstanceGt> = objects.iter().map(gt).collect();
    let mut failures = Vec::new();

    let perfect = set(ModalityCondition::Both, objects.clone());
    let empty = set(ModalityCondition::Both, Vec::new());
    for (name, dets, want) in [("perfect", &perfect, 1.0), ("empty", &empty, 0.0)] {
        let r = average_precision(&[EvalScene { detections: dets, ground_truth: &truth }], &thresholds, false).unwrap();
        for kind in Kind::ALL {
            let got = r.get(kind).map;
            if (got - want).abs() > 1e-9 {
                failures.push(format!("{name} {kind:?} mAP {got}"));
            }
        }
    }

    for (i, f) in pr_fixtures().iter().enumerate() {
        let n = f.ranking.len();
        let dets = f
            .ranking
            .iter()
            .enumerate()
            .map(|(rank, hit)| {
                let confidence = 1.0 - rank as f64 / (n + 1) as f64;
                match hit {
                    Some(o) => Detection {
                        confidence,
                        ..objects[*o].clone()
                    },
                    None => strip(15, 0..16, confidence),
                }
            })
            .collect();
        let dets = set(ModalityCondition::Both, dets);
        let truth = &truth[..f.objects];
        let r = average_precision(&[EvalScene { detections: &dets, ground_truth: truth }], &thresholds, false).unwrap();
        let reference = exhaustive_ap(&f.tp, f.objects);
        let direct = interpolated_ap(&f.tp, f.objects);
        for kind in Kind::ALL {
            // Every threshold sees the same ranking; the mean over thresholds
            // only adds rounding.
            let per = &r.get(kind).per_threshold;
            let map = r.get(kind).map;
            let exact = direct == reference && per.iter().all(|&ap| ap == reference);
            if !exact || (map - reference).abs() > 1e-12 || (reference - f.expected).abs() > 1e-12 {
                failures.push(format!(
                    "fixture {i} {kind:?}: per threshold {per:?}, mAP {map}, reference {reference}, by hand {}",
                    f.expected
                ));
            }
        }
    }
    let detail = if failures.is_empty() {
        "perfect = 1, empty = 0, 3 PR fixtures exact".to_string()
    } else {
        failures.join("; ")
    };
    Outcome::new(failures.is_empty(), detail)
}

// ------------------------------------------------------------ trained run

struct Trained {
    params: ModelParams,
    log: TrainLog,
    ablation: AblationReport,
}

struct Run {
    scenes: Vec<SceneSample>,
    standard: Trained,
    dynamic: Trained,
    elapsed: Duration,
}

fn split(scenes: &[SceneSample], s: Split) -> Vec<SceneSample> {
    scenes.iter().filter(|x| x.split == s).cloned().collect()
}

fn train_model(name: &str, config: &str, scenes: &[SceneSample]) -> Trained {
    let config = TrainConfig::from_toml(config).unwrap();
    let data = TrainingData::from_scenes(&split(scenes, Split::Train), split(scenes, Split::Val), &config.arch).unwrap();
    let init = ModelParams::new(config.arch, config.seed).unwrap();
    let start = Instant::now();
    let (params, log) = train(&init, &data, &config, &mut |_| {}).unwrap();
    info(&format!(
        "{name}: {} epochs in {:.0}s, best epoch {}",
        log.epochs.len(),
        start.elapsed().as_secs_f64(),
        log.best_epoch
    ));
    let ablation = modality_ablation(&params, &split(scenes, Split::Test), &config.thresholds, name, "test").unwrap();
    Trained { params, log, ablation }
}

fn trained_run() -> Run {
    let start = Instant::now();
    let (_, scenes) = generate_dataset(&GeneratorConfig::from_toml(DATASET).unwrap()).unwrap();
    let standard = train_model("standard", STANDARD, &scenes);
    let dynamic = train_model("dynamic", DYNAMIC, &scenes);
    Run {
        scenes,
        standard,
        dynamic,
        elapsed: start.elapsed(),
    }
}

fn training_sanity(run: &Run) -> bool {
    let mut ok = true;
    for t in [&run.standard, &run.dynamic] {
        let first = t.log.epochs.first().unwrap().mean_loss;
        let last = t.log.epochs.last().unwrap().mean_loss;
        let hit = {
            let test = split(&run.scenes, Split::Test);
            let sets = mmrnet::harness::predict_all(&t.params, &test, ModalityCondition::Both, &Default::default()).unwrap();
            sets.iter().zip(&test).any(|((d, _), s)| {
                d.detections.iter().any(|det| {
                    s.instances.iter().any(|g| {
                        iou(PixelSet::of(det, Kind::Mask), PixelSet::Mask(&g.mask))
                            .map(|v| v.above(1, 2))
                            .unwrap_or(false)
                    })
                })
            })
        };
        ok &= last <= 0.5 * first && hit;
        info(&format!(
            "{}: loss {first:.3} -> {last:.3}, detection with IoU > 0.5 found: {hit}",
            t.ablation.model
        ));
    }
    ok
}

fn redundancy(run: &Run) -> Outcome {
    let (s, d) = (&run.standard.ablation, &run.dynamic.ablation);
    let a = s.rgb_off_ratio() <= 0.2;
    let b = d.rgb_off_ratio() >= 0.6;
    let c = d.both.ap.bbox.map >= 0.9 * s.both.ap.bbox.map;
    let in_time = run.elapsed <= Duration::from_secs(20 * 60);
    Outcome::new(
        a && b && c && in_time,
        format!(
            "(a) standard rgb_off/both {:.3} <= 0.2 {}; (b) dynamic rgb_off/both {:.3} >= 0.6 {}; \
             (c) dynamic both {:.3} >= 0.9 x standard both {:.3} {}; training took {:.0}s (budget 1200s)",
            s.rgb_off_ratio(),
            a,
            d.rgb_off_ratio(),
            b,
            d.both.ap.bbox.map,
            s.both.ap.bbox.map,
            c,
            run.elapsed.as_secs_f64()
        ),
    )
}

fn per_scale_fraction(g: &GateShiftReport, a: ModalityCondition, b: ModalityCondition) -> Vec<f64> {
    let scales = g.scenes.first().map_or(0, |s| s.depth_weight[&a].len());
    (0..scales)
        .map(|j| {
            let hits = g.scenes.iter().filter(|s| s.depth_weight[&a][j] > s.depth_weight[&b][j]).count();
            hits as f64 / g.scenes.len() as f64
        })
        .collect()
}

fn gate_shift(run: &Run) -> Outcome {
    let test = split(&run.scenes, Split::Test);
    let g = gate_shift_analysis(&run.dynamic.params, &test, &Default::default(), None).unwrap();
    let literal = per_scale_fraction(&g, ModalityCondition::RgbOnly, ModalityCondition::Both);
    let rgb_removed = per_scale_fraction(&g, ModalityCondition::DepthOnly, ModalityCondition::Both);
    info(&format!(
        "depth weight above the both-inputs value when RGB is removed (depth_only), per scale: {rgb_removed:.2?}"
    ));
    Outcome::new(
        !literal.is_empty() && literal.iter().all(|&f| f >= 0.9),
        format!("rgb_only depth weight above both, fraction of {} test scenes per scale: {literal:.2?}", test.len()),
    )
}

fn mc_drift(run: &Run) -> Outcome {
    let scenes: Vec<SceneSample> = run
        .scenes
        .iter()
        .filter(|s| matches!(s.split, Split::Train | Split::Test | Split::TestNovel))
        .cloned()
        .collect();
    let outputs = condition_outputs(&run.dynamic.params, &scenes, &Default::default()).unwrap();
    let report = mc_report(&outputs, Some(&ground_truth_index(&scenes)), Aggregation::Flat).unwrap();
    let cmp = mc_vs_confidence(&report, &["train", "test", "test_novel"]).unwrap();
    let mc: Vec<f64> = cmp.splits.iter().map(|s| s.mask_mc).collect();
    let conf: Vec<f64> = cmp.splits.iter().map(|s| s.confidence).collect();
    let decreasing = mc.len() == 3 && mc.windows(2).all(|w| w[1] < w[0]);
    let smaller = cmp.confidence_relative_drop < cmp.mask_mc_relative_drop;
    Outcome::new(
        decreasing && smaller,
        format!(
            "mask MC train/test/novel {mc:.1?} strictly decreasing {decreasing}; confidence {conf:.1?} \
             relative drop {:.3} < MC drop {:.3} {smaller}",
            cmp.confidence_relative_drop, cmp.mask_mc_relative_drop
        ),
    )
}

// ------------------------------------------------------------ determinism

fn files(dir: &Path) -> Vec<PathBuf> {
    let mut out = Vec::new();
    for entry in std::fs::read_dir(dir).unwrap() {
        let path = entry.unwrap().path();
        if path.is_dir() {
            out.extend(files(&path));
        } else {
            out.push(path);
        }
    }
    out.sort();
    out
}

fn pipeline(root: &Path) -> Result<(), String> {
    std::fs::write(root.join("data.toml"), DATASET).unwrap();
    // One epoch keeps two full passes short; the code path is the same.
    let quick = DYNAMIC.replace("epochs = 30", "epochs = 1");
    std::fs::write(root.join("train.toml"), quick).unwrap();
    let steps: [&[&str]; 3] = [
        &["generate-data", "--config", "data.toml", "--out", "data"],
        &["train", "--config", "train.toml", "--data", "data", "--out", "model", "--name", "dyn"],
        &[
            "ablate",
            "--checkpoint",
            "model/dyn.ckpt",
            "--data",
            "data",
            "--out",
            "ablation.json",
        ],
    ];
    for args in steps {
        let out = Command::new(env!("CARGO_BIN_EXE_mmrnet"))
            .args(args)
            .current_dir(root)
            .output()
            .unwrap();
        if !out.status.success() {
            return Err(format!("{args:?}: {}", String::from_utf8_lossy(&out.stderr)));
        }
    }
    Ok(())
}

fn determinism() -> Outcome {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    for dir in [&a, &b] {
        if let Err(e) = pipeline(dir.path()) {
            return Outcome::new(false, e);
        }
    }
    let (fa, fb) = (files(a.path()), files(b.path()));
    let rel = |root: &Path, v: &[PathBuf]| v.iter().map(|p| p.strip_prefix(root).unwrap().to_path_buf()).collect::<Vec<_>>();
    if rel(a.path(), &fa) != rel(b.path(), &fb) {
        return Outcome::new(false, "the two runs wrote different file sets");
    }
    let differing: Vec<String> = fa
        .iter()
        .zip(&fb)
        .filter(|(x, y)| std::fs::read(x).unwrap() != std::fs::read(y).unwrap())
        .map(|(x, _)| x.strip_prefix(a.path()).unwrap().display().to_string())
        .collect();
    Outcome::new(
        differing.is_empty(),
        if differing.is_empty() {
            format!("{} files identical across two runs, checkpoint and ablation included", fa.len())
        } else {
            format!("differing files: {differing:?}")
        },
    )
}

#[test]
fn acceptance() {
    let secs = Duration::from_secs;
    let mut results = vec![
        report("1", "softmax partition", Some(secs(10)), softmax_partition),
        report("2", "gradient correctness", Some(secs(120)), gradient_correctness),
        report("3", "IoU oracle", Some(secs(30)), iou_oracle),
        report("4", "MC endpoints", Some(secs(5)), mc_endpoints),
        report("5", "AP sanity", Some(secs(10)), ap_sanity),
    ];

    let run = trained_run();
    let sane = training_sanity(&run);
    results.push(report("6", "redundancy ablation", Some(secs(20 * 60)), || {
        let mut o = redundancy(&run);
        if !sane {
            o.pass = false;
            o.detail.push_str("; training sanity failed");
        }
        o
    }));
    results.push(report("7", "gate shift", Some(secs(60)), || gate_shift(&run)));
    results.push(report("8", "MC drift", Some(secs(120)), || mc_drift(&run)));
    results.push(report("9", "determinism", None, determinism));

    let failed: Vec<usize> = results
        .iter()
        .enumerate()
        .filter(|(_, ok)| !**ok)
        .map(|(i, _)| i + 1)
        .collect();
    assert!(failed.is_empty(), "criteria failed: {failed:?}");
}
