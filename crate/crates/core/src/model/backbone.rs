use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fusion::FeaturePyramid;
use crate::nn::{silu, silu_backward, Conv2d};
use crate::tensor::Tensor;

/// Stack of stride-2 3x3 convolutions with SiLU. The first stage reaches
/// stride 2; stages `1..=J` produce the pyramid levels at strides 4, 8, ...
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Backbone {
    pub stages: Vec<Conv2d>,
}

pub struct BackboneCache {
    inputs: Vec<Tensor>,
    pre: Vec<Tensor>,
}

impl Backbone {
    pub fn new<R: Rng>(in_ch: usize, stem: usize, channels: usize, scales: usize, rng: &mut R) -> Self {
        let gain = 2f64.sqrt();
        let mut stages = vec![Conv2d::random(in_ch, stem, 3, 2, gain, rng)];
        stages.push(Conv2d::random(stem, channels, 3, 2, gain, rng));
        for _ in 1..scales {
            stages.push(Conv2d::random(channels, channels, 3, 2, gain, rng));
        }
        Self { stages }
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            stages: self.stages.iter().map(Conv2d::zeros_like).collect(),
        }
    }

    pub fn scales(&self) -> usize {
        self.stages.len() - 1
    }

    pub fn forward(&self, input: &Tensor, modality: usize) -> Result<(FeaturePyramid, BackboneCache)> {
        let (_, h, w) = input.shape();
        let div = 1usize << self.stages.len();
        if h % div != 0 || w % div != 0 {
            return Err(Error::Shape(format!(
                "input {h}x{w} is not divisible by {div} (2^(scales+1))"
            )));
        }
        let mut x = input.clone();
        let mut cache = BackboneCache {
            inputs: Vec::with_capacity(self.stages.len()),
            pre: Vec::with_capacity(self.stages.len()),
        };
        let mut levels = Vec::with_capacity(self.scales());
        for (k, conv) in self.stages.iter().enumerate() {
            let pre = conv.forward(&x)?;
            let out = silu(&pre);
            cache.inputs.push(std::mem::replace(&mut x, out));
            cache.pre.push(pre);
            if k >= 1 {
                levels.push(x.clone());
            }
        }
        Ok((FeaturePyramid { modality, levels }, cache))
    }

    /// Backward from per-level gradients; the input gradient is not needed.
    pub fn backward(&self, cache: &BackboneCache, level_grads: &[Tensor], grads: &mut Backbone) {
        let n = self.stages.len();
        let mut g: Option<Tensor> = None;
        for k in (0..n).rev() {
            let mut d_out = if k >= 1 { level_grads[k - 1].clone() } else { g.take().expect("flows from stage 1") };
            if k >= 1 {
                if let Some(from_above) = g.take() {
                    d_out.add_assign(&from_above);
                }
            }
            let d_pre = silu_backward(&cache.pre[k], &d_out);
            g = self.stages[k].backward(&cache.inputs[k], &d_pre, &mut grads.stages[k], k > 0);
        }
    }
}
