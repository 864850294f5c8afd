//! Finite-difference gradient checks shared by several test binaries.

use mmrnet::fusion::{fuse_backward, fuse_forward, FeaturePyramid, FusionParams};
use mmrnet::model::{backward, forward_dense, Arch, ModelInput, ModelParams};
use mmrnet::nn::Parameters;
use mmrnet::tensor::Tensor;
use mmrnet::training::{loss, LossWeights, Targets};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const STEP: f64 = 1e-3;
pub const TOLERANCE: f64 = 1e-4;

fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-6)
}

fn random_tensor(rng: &mut ChaCha8Rng, c: usize, h: usize, w: usize) -> Tensor {
    let data = (0..c * h * w).map(|_| rng.random_range(-1.0..1.0)).collect();
    Tensor::from_vec(c, h, w, data).unwrap()
}

fn jitter<P: Parameters>(params: &mut P, rng: &mut ChaCha8Rng, scale: f64) {
    let flat: Vec<f64> = params
        .flatten()
        .into_iter()
        .map(|v| v + scale * rng.random_range(-1.0..1.0))
        .collect();
    params.load_flat(&flat).unwrap();
}

fn dot(a: &[Tensor], b: &[Tensor]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| x.data().iter().zip(y.data()).map(|(p, q)| p * q).sum::<f64>())
        .sum()
}

struct FuseCase {
    params: FusionParams,
    inputs: Vec<Vec<Tensor>>,
    probe: Vec<Tensor>,
}

impl FuseCase {
    fn new(seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = FusionParams::new(2, 4, 4, 2, &mut rng);
        jitter(&mut params, &mut rng, 0.5);
        let inputs = (0..2)
            .map(|_| vec![random_tensor(&mut rng, 4, 8, 8), random_tensor(&mut rng, 4, 4, 4)])
            .collect();
        let probe = vec![random_tensor(&mut rng, 4, 8, 8), random_tensor(&mut rng, 4, 4, 4)];
        Self { params, inputs, probe }
    }

    fn pyramids(inputs: &[Vec<Tensor>]) -> Vec<FeaturePyramid> {
        inputs
            .iter()
            .enumerate()
            .map(|(m, levels)| FeaturePyramid {
                modality: m,
                levels: levels.clone(),
            })
            .collect()
    }

    fn objective(&self, params: &FusionParams, inputs: &[Vec<Tensor>]) -> f64 {
        let (fused, _) = fuse_forward(&Self::pyramids(inputs), params).unwrap();
        dot(&fused.levels, &self.probe)
    }
}

/// Worst relative error and largest numeric gradient over the fusion parameters.
pub fn fusion_parameter_check() -> (f64, f64) {
    let case = FuseCase::new(1);
    let (_, cache) = fuse_forward(&FuseCase::pyramids(&case.inputs), &case.params).unwrap();
    let mut grads = case.params.zeros_like();
    fuse_backward(&cache, &case.probe, &case.params, &mut grads);
    let analytic = grads.flatten();
    let (mut worst, mut largest) = (0.0f64, 0.0f64);
    for (i, &a) in analytic.iter().enumerate() {
        let mut p = case.params.clone();
        *p.param_mut(i) += STEP;
        let up = case.objective(&p, &case.inputs);
        *p.param_mut(i) -= 2.0 * STEP;
        let down = case.objective(&p, &case.inputs);
        let numeric = (up - down) / (2.0 * STEP);
        largest = largest.max(numeric.abs());
        worst = worst.max(rel_err(a, numeric));
    }
    (worst, largest)
}

/// Same over the fused feature inputs.
pub fn fusion_input_check() -> (f64, f64) {
    let case = FuseCase::new(2);
    let (_, cache) = fuse_forward(&FuseCase::pyramids(&case.inputs), &case.params).unwrap();
    let mut grads = case.params.zeros_like();
    let d_inputs = fuse_backward(&cache, &case.probe, &case.params, &mut grads);
    let (mut worst, mut largest) = (0.0f64, 0.0f64);
    for m in 0..2 {
        for level in 0..2 {
            for i in 0..case.inputs[m][level].data().len() {
                let mut x = case.inputs.clone();
                x[m][level].data_mut()[i] += STEP;
                let up = case.objective(&case.params, &x);
                x[m][level].data_mut()[i] -= 2.0 * STEP;
                let down = case.objective(&case.params, &x);
                let a = d_inputs[m][level].data()[i];
                let numeric = (up - down) / (2.0 * STEP);
                largest = largest.max(numeric.abs());
                worst = worst.max(rel_err(a, numeric));
            }
        }
    }
    (worst, largest)
}

/// Same over a sample of every layer of the full model on a 32x32 input.
pub fn model_check() -> (f64, f64) {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let arch = Arch::default();
    let mut params = ModelParams::new(arch, 5).unwrap();
    // Output layers start at zero, which would hide everything upstream.
    jitter(&mut params, &mut rng, 0.1);
    let input = ModelInput {
        rgb: random_tensor(&mut rng, 3, 32, 32).map(|v| 0.5 + 0.5 * v),
        depth: random_tensor(&mut rng, 1, 32, 32).map(|v| 0.5 + 0.5 * v),
    };
    let side = 32 / arch.head_stride();
    let targets = Targets {
        height: side,
        width: side,
        classes: (0..side * side).map(|_| rng.random_range(0..=arch.classes)).collect(),
    };
    let weights = LossWeights::default();
    let objective = |p: &ModelParams| {
        let cache = forward_dense(p, &input).unwrap();
        loss(&cache.maps, &targets, &weights).unwrap().total
    };

    let cache = forward_dense(&params, &input).unwrap();
    let out = loss(&cache.maps, &targets, &weights).unwrap();
    let analytic = backward(&params, &cache, &out.d_class_logits, &out.d_obj_logits).flatten();

    // A fixed sample from every layer keeps the run short.
    let mut indices = Vec::new();
    let mut offset = 0;
    for conv in params.convs() {
        let n = conv.num_params();
        for _ in 0..12 {
            indices.push(offset + rng.random_range(0..n));
        }
        offset += n;
    }
    let (mut worst, mut largest) = (0.0f64, 0.0f64);
    for i in indices {
        let mut p = params.clone();
        *p.param_mut(i) += STEP;
        let up = objective(&p);
        *p.param_mut(i) -= 2.0 * STEP;
        let down = objective(&p);
        let numeric = (up - down) / (2.0 * STEP);
        largest = largest.max(numeric.abs());
        worst = worst.max(rel_err(analytic[i], numeric));
    }
    (worst, largest)
}
