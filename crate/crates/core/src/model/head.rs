use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fusion::FusedPyramid;
use crate::nn::{sigmoid_scalar, silu, silu_backward, Conv2d};
use crate::tensor::Tensor;

/// Dense per-pixel head on the finest fused level: a 3x3 SiLU layer, then
/// 1x1 class logits (background first) and a 1x1 objectness logit.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Head {
    pub hidden: Conv2d,
    pub class: Conv2d,
    pub objectness: Conv2d,
}

/// Head outputs at stride 4. `class_prob` has `K + 1` channels with the
/// background at channel 0.
#[derive(Clone, Debug, PartialEq)]
pub struct DenseMaps {
    pub class_logits: Tensor,
    pub obj_logits: Tensor,
    pub class_prob: Tensor,
    pub objectness: Tensor,
}

pub struct HeadCache {
    input: Tensor,
    hidden_pre: Tensor,
    hidden: Tensor,
}

fn softmax_channels(logits: &Tensor) -> Tensor {
    let (c, h, w) = logits.shape();
    let plane = h * w;
    let mut out = Tensor::zeros(c, h, w);
    let src = logits.data();
    let dst = out.data_mut();
    for p in 0..plane {
        let max = (0..c).map(|k| src[k * plane + p]).fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for k in 0..c {
            let e = (src[k * plane + p] - max).exp();
            dst[k * plane + p] = e;
            sum += e;
        }
        for k in 0..c {
            dst[k * plane + p] /= sum;
        }
    }
    out
}

impl DenseMaps {
    pub fn from_logits(class_logits: Tensor, obj_logits: Tensor) -> Self {
        let class_prob = softmax_channels(&class_logits);
        let objectness = obj_logits.map(sigmoid_scalar);
        Self {
            class_logits,
            obj_logits,
            class_prob,
            objectness,
        }
    }

    /// Builds maps directly from probabilities; logits are their logs.
    pub fn from_probabilities(class_prob: Tensor, objectness: Tensor) -> Result<Self> {
        let (_, h, w) = class_prob.shape();
        if objectness.shape() != (1, h, w) {
            return Err(Error::Shape(format!(
                "objectness {:?} does not match class map {h}x{w}",
                objectness.shape()
            )));
        }
        Ok(Self {
            class_logits: class_prob.map(f64::ln),
            obj_logits: objectness.map(|p| (p / (1.0 - p)).ln()),
            class_prob,
            objectness,
        })
    }

    /// Number of object classes, background excluded.
    pub fn classes(&self) -> usize {
        self.class_prob.channels() - 1
    }

    pub fn height(&self) -> usize {
        self.objectness.height()
    }

    pub fn width(&self) -> usize {
        self.objectness.width()
    }
}

impl Head {
    /// Hidden layer random; output layers zero so an untrained head is
    /// uniform over classes with objectness exactly 0.5.
    pub fn new<R: Rng>(in_ch: usize, hidden: usize, classes: usize, rng: &mut R) -> Self {
        Self {
            hidden: Conv2d::random(in_ch, hidden, 3, 1, 2f64.sqrt(), rng),
            class: Conv2d::zeros(hidden, classes + 1, 1, 1),
            objectness: Conv2d::zeros(hidden, 1, 1, 1),
        }
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            hidden: self.hidden.zeros_like(),
            class: self.class.zeros_like(),
            objectness: self.objectness.zeros_like(),
        }
    }

    pub fn forward(&self, fused: &FusedPyramid) -> Result<(DenseMaps, HeadCache)> {
        let input = fused
            .levels
            .first()
            .ok_or_else(|| Error::Shape("fused pyramid has no levels".into()))?;
        if input.channels() != self.hidden.in_ch {
            return Err(Error::Shape(format!(
                "head expects {} channels, fused level has {}",
                self.hidden.in_ch,
                input.channels()
            )));
        }
        let hidden_pre = self.hidden.forward(input)?;
        let hidden = silu(&hidden_pre);
        let maps = DenseMaps::from_logits(self.class.forward(&hidden)?, self.objectness.forward(&hidden)?);
        let cache = HeadCache {
            input: input.clone(),
            hidden_pre,
            hidden,
        };
        Ok((maps, cache))
    }

    /// Gradient with respect to the finest fused level.
    pub fn backward(
        &self,
        cache: &HeadCache,
        d_class_logits: &Tensor,
        d_obj_logits: &Tensor,
        grads: &mut Head,
    ) -> Tensor {
        let mut d_hidden = self
            .class
            .backward(&cache.hidden, d_class_logits, &mut grads.class, true)
            .expect("input grad");
        let d_obj = self
            .objectness
            .backward(&cache.hidden, d_obj_logits, &mut grads.objectness, true)
            .expect("input grad");
        d_hidden.add_assign(&d_obj);
        let d_pre = silu_backward(&cache.hidden_pre, &d_hidden);
        self.hidden
            .backward(&cache.input, &d_pre, &mut grads.hidden, true)
            .expect("input grad")
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn pyramid(c: usize, h: usize, f: impl Fn(usize) -> f64) -> FusedPyramid {
        FusedPyramid {
            levels: vec![
                Tensor::from_vec(c, h, h, (0..c * h * h).map(&f).collect()).unwrap(),
                Tensor::zeros(c, h / 2, h / 2),
            ],
        }
    }

    #[test]
    fn class_rows_sum_to_one() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut head = Head::new(4, 6, 5, &mut rng);
        head.class = Conv2d::random(6, 6, 1, 1, 3.0, &mut rng);
        let (maps, _) = head.forward(&pyramid(4, 8, |i| (i as f64 * 0.7).cos())).unwrap();
        for p in 0..64 {
            let s: f64 = (0..6).map(|k| maps.class_prob.data()[k * 64 + p]).sum();
            assert!((s - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn zero_features_give_uniform_classes() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let head = Head::new(4, 6, 5, &mut rng);
        let (maps, _) = head.forward(&pyramid(4, 8, |_| 0.0)).unwrap();
        assert!(maps.class_prob.data().iter().all(|&p| (p - 1.0 / 6.0).abs() < 1e-12));
        assert!(maps.objectness.data().iter().all(|&p| p == 0.5));
    }

    #[test]
    fn shape_mismatch_is_reported() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let head = Head::new(4, 6, 5, &mut rng);
        assert!(matches!(head.forward(&pyramid(3, 8, |_| 0.0)), Err(Error::Shape(_))));
    }
}
