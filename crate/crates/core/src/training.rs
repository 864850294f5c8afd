//! Loss, optimisation loop and dynamic ensemble training.
//!
//! In `dynamic_ensemble` mode every iteration draws one input condition
//! (both, RGB only, depth only) and zeroes the dropped modality's input for
//! the whole batch; supervision is unchanged.

use std::collections::BTreeMap;
use std::io::Write as _;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::harness::ap::{average_precision, coco_thresholds, EvalScene};
use crate::model::{
    backward, decode_instances, forward_dense, Arch, DenseMaps, DetectionSet, InputNorm, ModalityCondition, ModelInput,
    ModelParams, Thresholds, DEPTH, RGB,
};
use crate::nn::Parameters;
use crate::synthdata::{DatasetManifest, SceneSample, Split};
use crate::tensor::Tensor;

const PROB_EPS: f64 = 1e-12;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EnsembleMode {
    #[default]
    Standard,
    DynamicEnsemble,
}

impl EnsembleMode {
    pub fn as_str(&self) -> &'static str {
        match self {
            Self::Standard => "standard",
            Self::DynamicEnsemble => "dynamic_ensemble",
        }
    }
}

/// Probabilities of the three input conditions.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConditionDistribution {
    pub both: f64,
    pub rgb_only: f64,
    pub depth_only: f64,
}

impl Default for ConditionDistribution {
    fn default() -> Self {
        Self::uniform()
    }
}

impl ConditionDistribution {
    pub fn uniform() -> Self {
        Self {
            both: 1.0 / 3.0,
            rgb_only: 1.0 / 3.0,
            depth_only: 1.0 / 3.0,
        }
    }

    pub fn both_only() -> Self {
        Self {
            both: 1.0,
            rgb_only: 0.0,
            depth_only: 0.0,
        }
    }

    pub fn probabilities(&self) -> [f64; 3] {
        [self.both, self.rgb_only, self.depth_only]
    }

    pub fn validate(&self) -> Result<()> {
        let p = self.probabilities();
        if p.iter().any(|v| !v.is_finite() || *v < 0.0) {
            return Err(Error::InvalidArgument(format!("condition probabilities must be non-negative: {p:?}")));
        }
        let sum: f64 = p.iter().sum();
        if (sum - 1.0).abs() > 1e-9 {
            return Err(Error::InvalidArgument(format!("condition probabilities sum to {sum}, not 1")));
        }
        Ok(())
    }
}

/// Draws one condition by inverting the cumulative distribution with a
/// single uniform variate.
pub fn sample_condition<R: Rng + ?Sized>(rng: &mut R, dist: &ConditionDistribution) -> Result<ModalityCondition> {
    dist.validate()?;
    let u: f64 = rng.random();
    let mut acc = 0.0;
    let mut last = ModalityCondition::Both;
    for (c, p) in ModalityCondition::ALL.into_iter().zip(dist.probabilities()) {
        if p > 0.0 {
            last = c;
            acc += p;
            if u < acc {
                return Ok(c);
            }
        }
    }
    Ok(last)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossWeights {
    pub class: f64,
    pub objectness: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            class: 1.0,
            objectness: 1.0,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Schedule {
    pub learning_rate: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    /// Multiply the learning rate by `decay_factor` every `decay_every` epochs.
    pub decay_every: usize,
    pub decay_factor: f64,
    /// Global gradient-norm clip; 0 disables clipping.
    pub max_grad_norm: f64,
    /// Learning-rate multiplier for the fusion gates.
    pub gate_lr_scale: f64,
}

impl Default for Schedule {
    fn default() -> Self {
        Self {
            learning_rate: 0.05,
            momentum: 0.9,
            weight_decay: 1e-4,
            decay_every: 10,
            decay_factor: 0.5,
            max_grad_norm: 5.0,
            gate_lr_scale: 1.0,
        }
    }
}

impl Schedule {
    pub fn learning_rate_at(&self, epoch: usize) -> f64 {
        let steps = epoch.checked_div(self.decay_every).unwrap_or(0);
        self.learning_rate * self.decay_factor.powi(steps as i32)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    /// Seeds parameter initialisation, shuffling and condition sampling.
    pub seed: u64,
    pub mode: EnsembleMode,
    /// Used in dynamic ensemble mode; standard mode always trains on `both`.
    pub conditions: ConditionDistribution,
    pub loss: LossWeights,
    pub schedule: Schedule,
    pub arch: Arch,
    pub thresholds: Thresholds,
    /// Validate every this many epochs (and always after the last one).
    pub validate_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 30,
            batch_size: 4,
            seed: 7,
            mode: EnsembleMode::Standard,
            conditions: ConditionDistribution::uniform(),
            loss: LossWeights::default(),
            schedule: Schedule::default(),
            arch: Arch::default(),
            thresholds: Thresholds::default(),
            validate_every: 1,
        }
    }
}

impl TrainConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::InvalidArgument(format!("train config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        if !path.exists() {
            return Err(Error::Missing { path: path.into() });
        }
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text).map_err(|e| Error::format(path, e))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("train config serialises")
    }

    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::InvalidArgument("epochs and batch_size must be positive".into()));
        }
        if !(self.schedule.learning_rate > 0.0)
            || !(0.0..1.0).contains(&self.schedule.momentum)
            || !(self.schedule.gate_lr_scale >= 0.0)
        {
            return Err(Error::InvalidArgument("learning rate must be positive and momentum in [0, 1)".into()));
        }
        self.conditions.validate()?;
        self.arch.validate()?;
        self.thresholds.validate()
    }

    /// The distribution actually sampled: standard mode is pinned to `both`.
    pub fn effective_conditions(&self) -> ConditionDistribution {
        match self.mode {
            EnsembleMode::Standard => ConditionDistribution::both_only(),
            EnsembleMode::DynamicEnsemble => self.conditions,
        }
    }

    /// Conditions whose validation AP selects the best epoch.
    pub fn selection_conditions(&self) -> Vec<ModalityCondition> {
        let dist = self.effective_conditions();
        ModalityCondition::ALL
            .into_iter()
            .zip(dist.probabilities())
            .filter(|(_, p)| *p > 0.0)
            .map(|(c, _)| c)
            .collect()
    }
}

/// Per-pixel supervision at head resolution. Class 0 is background.
#[derive(Clone, Debug, PartialEq)]
pub struct Targets {
    pub height: usize,
    pub width: usize,
    pub classes: Vec<usize>,
}

impl Targets {
    /// Each head cell takes the majority label of its `stride x stride`
    /// block of the front-most-instance label map (ties go to the lower id,
    /// background first).
    pub fn from_scene(scene: &SceneSample, stride: usize, num_classes: usize) -> Result<Self> {
        if scene.height % stride != 0 || scene.width % stride != 0 {
            return Err(Error::Shape(format!(
                "{}x{} scene is not divisible by stride {stride}",
                scene.height, scene.width
            )));
        }
        let labels = scene.label_map();
        let (h, w) = (scene.height / stride, scene.width / stride);
        let mut classes = vec![0; h * w];
        let mut counts = vec![0usize; num_classes + 1];
        for y in 0..h {
            for x in 0..w {
                counts.fill(0);
                for yy in y * stride..(y + 1) * stride {
                    for xx in x * stride..(x + 1) * stride {
                        let c = match labels[yy * scene.width + xx] {
                            None => 0,
                            Some(l) if (l as usize) < num_classes => l as usize + 1,
                            Some(l) => {
                                return Err(Error::InvalidArgument(format!(
                                    "scene {}: label {l} outside the {num_classes} trained classes",
                                    scene.scene_id
                                )))
                            }
                        };
                        counts[c] += 1;
                    }
                }
                let mut best = 0;
                for c in 1..=num_classes {
                    if counts[c] > counts[best] {
                        best = c;
                    }
                }
                classes[y * w + x] = best;
            }
        }
        Ok(Self {
            height: h,
            width: w,
            classes,
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LossOutput {
    pub total: f64,
    pub class: f64,
    pub objectness: f64,
    pub d_class_logits: Tensor,
    pub d_obj_logits: Tensor,
}

/// `class * mean CE + objectness * mean BCE` over head pixels, with
/// probabilities clamped away from 0 and 1 inside the logarithms.
pub fn loss(maps: &DenseMaps, targets: &Targets, weights: &LossWeights) -> Result<LossOutput> {
    let (k1, h, w) = maps.class_prob.shape();
    if (h, w) != (targets.height, targets.width) {
        return Err(Error::Shape(format!(
            "head maps {h}x{w}, targets {}x{}",
            targets.height, targets.width
        )));
    }
    let plane = h * w;
    let n = plane as f64;
    let prob = maps.class_prob.data();
    let obj = maps.objectness.data();
    let mut d_class = Tensor::zeros(k1, h, w);
    let mut d_obj = Tensor::zeros(1, h, w);
    let (mut ce, mut bce) = (0.0, 0.0);
    for p in 0..plane {
        let t = targets.classes[p];
        if t >= k1 {
            return Err(Error::Shape(format!("target class {t} but only {k1} channels")));
        }
        ce -= prob[t * plane + p].clamp(PROB_EPS, 1.0).ln();
        for c in 0..k1 {
            let onehot = if c == t { 1.0 } else { 0.0 };
            d_class.data_mut()[c * plane + p] = weights.class * (prob[c * plane + p] - onehot) / n;
        }
        let target_obj = if t > 0 { 1.0 } else { 0.0 };
        let o = obj[p];
        bce -= if t > 0 {
            o.clamp(PROB_EPS, 1.0).ln()
        } else {
            (1.0 - o).clamp(PROB_EPS, 1.0).ln()
        };
        d_obj.data_mut()[p] = weights.objectness * (o - target_obj) / n;
    }
    let (class, objectness) = (ce / n, bce / n);
    Ok(LossOutput {
        total: weights.class * class + weights.objectness * objectness,
        class,
        objectness,
        d_class_logits: d_class,
        d_obj_logits: d_obj,
    })
}

#[derive(Clone, Debug)]
pub struct TrainingExample {
    pub input: ModelInput,
    pub targets: Targets,
}

#[derive(Clone, Debug)]
pub struct TrainingData {
    pub train: Vec<TrainingExample>,
    pub val: Vec<SceneSample>,
}

impl TrainingData {
    pub fn from_scenes(train: &[SceneSample], val: Vec<SceneSample>, arch: &Arch) -> Result<Self> {
        let train = train
            .iter()
            .map(|s| {
                Ok(TrainingExample {
                    input: ModelInput::from_scene(s),
                    targets: Targets::from_scene(s, arch.head_stride(), arch.classes)?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { train, val })
    }

    pub fn load(manifest: &DatasetManifest, arch: &Arch) -> Result<Self> {
        if arch.classes != manifest.known_classes() {
            return Err(Error::InvalidArgument(format!(
                "architecture has {} classes, dataset {}",
                arch.classes,
                manifest.known_classes()
            )));
        }
        let train = manifest.load_split(Split::Train)?;
        Self::from_scenes(&train, manifest.load_split(Split::Val)?, arch)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IterationRecord {
    pub iteration: usize,
    pub epoch: usize,
    pub condition: ModalityCondition,
    pub loss: f64,
    pub class_loss: f64,
    pub objectness_loss: f64,
    pub learning_rate: f64,
    pub rgb_grad_norm: f64,
    pub depth_grad_norm: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochSummary {
    pub epoch: usize,
    pub mean_loss: f64,
    pub mean_class_loss: f64,
    pub mean_objectness_loss: f64,
    /// Class-agnostic box AP on the validation split per condition.
    pub val_box_ap: BTreeMap<ModalityCondition, f64>,
    pub val_score: Option<f64>,
    pub best: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub mode: EnsembleMode,
    pub seed: u64,
    pub iterations: Vec<IterationRecord>,
    pub epochs: Vec<EpochSummary>,
    pub best_epoch: usize,
    pub checkpoint: Option<String>,
}

impl TrainLog {
    pub fn condition_counts(&self) -> [usize; 3] {
        let mut out = [0; 3];
        for r in &self.iterations {
            out[r.condition.index()] += 1;
        }
        out
    }

    /// Writes `<stem>.jsonl` (one record per iteration) and `<stem>.json`
    /// (everything except the iteration records).
    pub fn write(&self, dir: &Path, stem: &str) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let jsonl = dir.join(format!("{stem}.jsonl"));
        let mut f = std::io::BufWriter::new(std::fs::File::create(&jsonl).map_err(|e| Error::io(&jsonl, e))?);
        for r in &self.iterations {
            serde_json::to_writer(&mut f, r).expect("records serialise");
            f.write_all(b"\n").map_err(|e| Error::io(&jsonl, e))?;
        }
        f.flush().map_err(|e| Error::io(&jsonl, e))?;
        let summary = serde_json::json!({
            "mode": self.mode,
            "seed": self.seed,
            "iterations": self.iterations.len(),
            "epochs": self.epochs,
            "best_epoch": self.best_epoch,
            "checkpoint": self.checkpoint,
            "condition_counts": self.condition_counts(),
        });
        let path = dir.join(format!("{stem}.json"));
        std::fs::write(&path, serde_json::to_string_pretty(&summary).expect("summary serialises"))
            .map_err(|e| Error::io(&path, e))
    }
}

/// Class-agnostic box AP of `params` on `scenes` under one condition.
pub fn validation_box_ap(
    params: &ModelParams,
    scenes: &[SceneSample],
    condition: ModalityCondition,
    thresholds: &Thresholds,
) -> Result<f64> {
    let mut sets = Vec::with_capacity(scenes.len());
    for s in scenes {
        let input = ModelInput::from_scene(s).with_condition(condition);
        let cache = forward_dense(params, &input)?;
        let mut set = DetectionSet::new(s.scene_id.clone(), condition, s.height, s.width);
        set.detections = decode_instances(&cache.maps, thresholds, params.arch.head_stride());
        sets.push(set);
    }
    let eval: Vec<EvalScene<'_>> = sets
        .iter()
        .zip(scenes)
        .map(|(d, s)| EvalScene {
            detections: d,
            ground_truth: &s.instances,
        })
        .collect();
    Ok(average_precision(&eval, &coco_thresholds(), true)?.bbox.map)
}

/// Shuffling uses its own stream so the condition sequence equals a plain
/// `sample_condition` sequence under the same seed.
fn shuffle_seed(seed: u64) -> u64 {
    seed.wrapping_mul(0x9e37_79b9_7f4a_7c15).wrapping_add(1)
}

fn condition_rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Trains `params` in place of a copy and returns the parameters of the
/// best validation epoch with the log. Input statistics are fitted to the
/// training split before the first step. Runs serially and deterministically.
pub fn train(
    params: &ModelParams,
    data: &TrainingData,
    config: &TrainConfig,
    progress: &mut dyn FnMut(&EpochSummary),
) -> Result<(ModelParams, TrainLog)> {
    config.validate()?;
    if data.train.is_empty() || data.val.is_empty() {
        return Err(Error::InvalidArgument("training needs non-empty train and val splits".into()));
    }
    if params.arch != config.arch {
        return Err(Error::InvalidArgument("model architecture differs from the training config".into()));
    }
    let dist = config.effective_conditions();
    let mut cond_rng = condition_rng(config.seed);
    let mut order_rng = ChaCha8Rng::seed_from_u64(shuffle_seed(config.seed));
    let mut current = params.clone();
    current.input_norm = InputNorm::fit(data.train.iter().map(|e| &e.input))?;
    let mut theta = current.flatten();
    let mut velocity = vec![0.0; theta.len()];
    let mut lr_scale = vec![1.0; theta.len()];
    lr_scale[current.gate_param_range()].fill(config.schedule.gate_lr_scale);
    let mut best: Option<(f64, ModelParams, usize)> = None;
    let mut log = TrainLog {
        mode: config.mode,
        seed: config.seed,
        iterations: Vec::new(),
        epochs: Vec::new(),
        best_epoch: 0,
        checkpoint: None,
    };
    let mut order: Vec<usize> = (0..data.train.len()).collect();
    let sched = &config.schedule;
    for epoch in 0..config.epochs {
        let lr = sched.learning_rate_at(epoch);
        order.shuffle(&mut order_rng);
        let (mut sum, mut sum_cls, mut sum_obj, mut batches) = (0.0, 0.0, 0.0, 0usize);
        for batch in order.chunks(config.batch_size) {
            let iteration = log.iterations.len();
            let condition = match config.mode {
                EnsembleMode::Standard => ModalityCondition::Both,
                EnsembleMode::DynamicEnsemble => sample_condition(&mut cond_rng, &dist)?,
            };
            let mut grad = vec![0.0; theta.len()];
            let (mut l, mut lc, mut lo) = (0.0, 0.0, 0.0);
            let (mut rgb_sq, mut depth_sq) = (0.0, 0.0);
            for &i in batch {
                let ex = &data.train[i];
                let cache = forward_dense(&current, &ex.input.with_condition(condition))?;
                let out = loss(&cache.maps, &ex.targets, &config.loss)?;
                if !out.total.is_finite() {
                    return Err(Error::Numeric(format!(
                        "non-finite loss at epoch {epoch}, iteration {iteration}"
                    )));
                }
                let g = backward(&current, &cache, &out.d_class_logits, &out.d_obj_logits);
                rgb_sq += g.backbone_norm_sq(RGB);
                depth_sq += g.backbone_norm_sq(DEPTH);
                for (a, b) in grad.iter_mut().zip(g.flatten()) {
                    *a += b;
                }
                l += out.total;
                lc += out.class;
                lo += out.objectness;
            }
            let bs = batch.len() as f64;
            grad.iter_mut().for_each(|g| *g /= bs);
            let norm = grad.iter().map(|g| g * g).sum::<f64>().sqrt();
            if !norm.is_finite() {
                return Err(Error::Numeric(format!(
                    "non-finite gradient at epoch {epoch}, iteration {iteration}"
                )));
            }
            let clip = if sched.max_grad_norm > 0.0 && norm > sched.max_grad_norm {
                sched.max_grad_norm / norm
            } else {
                1.0
            };
            for (((t, v), g), s) in theta.iter_mut().zip(velocity.iter_mut()).zip(&grad).zip(&lr_scale) {
                *v = sched.momentum * *v + g * clip + sched.weight_decay * *t;
                *t -= lr * s * *v;
            }
            current.load_flat(&theta)?;
            log.iterations.push(IterationRecord {
                iteration,
                epoch,
                condition,
                loss: l / bs,
                class_loss: lc / bs,
                objectness_loss: lo / bs,
                learning_rate: lr,
                rgb_grad_norm: rgb_sq.sqrt() / bs,
                depth_grad_norm: depth_sq.sqrt() / bs,
            });
            sum += l / bs;
            sum_cls += lc / bs;
            sum_obj += lo / bs;
            batches += 1;
        }

        let mut summary = EpochSummary {
            epoch,
            mean_loss: sum / batches as f64,
            mean_class_loss: sum_cls / batches as f64,
            mean_objectness_loss: sum_obj / batches as f64,
            val_box_ap: BTreeMap::new(),
            val_score: None,
            best: false,
        };
        let last = epoch + 1 == config.epochs;
        if last || (epoch + 1) % config.validate_every.max(1) == 0 {
            for c in ModalityCondition::ALL {
                summary
                    .val_box_ap
                    .insert(c, validation_box_ap(&current, &data.val, c, &config.thresholds)?);
            }
            let sel = config.selection_conditions();
            let score = sel.iter().map(|c| summary.val_box_ap[c]).sum::<f64>() / sel.len() as f64;
            summary.val_score = Some(score);
            if best.as_ref().is_none_or(|(b, _, _)| score > *b) {
                best = Some((score, current.clone(), epoch));
                summary.best = true;
            }
        }
        progress(&summary);
        log.epochs.push(summary);
    }
    let (_, best_params, best_epoch) = best.expect("the last epoch always validates");
    log.best_epoch = best_epoch;
    Ok((best_params, log))
}
