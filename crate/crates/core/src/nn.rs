//! Convolution and activation layers with hand-written backward passes.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// 2-D convolution with `kernel / 2` zero padding.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Conv2d {
    pub in_ch: usize,
    pub out_ch: usize,
    pub kernel: usize,
    pub stride: usize,
    /// `[out][in][ky][kx]`
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
}

impl Conv2d {
    pub fn zeros(in_ch: usize, out_ch: usize, kernel: usize, stride: usize) -> Self {
        Self {
            in_ch,
            out_ch,
            kernel,
            stride,
            weight: vec![0.0; out_ch * in_ch * kernel * kernel],
            bias: vec![0.0; out_ch],
        }
    }

    /// Zero bias, normal weights with standard deviation `gain / sqrt(fan_in)`.
    pub fn random<R: Rng>(
        in_ch: usize,
        out_ch: usize,
        kernel: usize,
        stride: usize,
        gain: f64,
        rng: &mut R,
    ) -> Self {
        let mut conv = Self::zeros(in_ch, out_ch, kernel, stride);
        let fan_in = (in_ch * kernel * kernel) as f64;
        let normal = Normal::new(0.0, gain / fan_in.sqrt()).expect("finite std");
        conv.weight.iter_mut().for_each(|w| *w = normal.sample(rng));
        conv
    }

    pub fn zeros_like(&self) -> Self {
        Self::zeros(self.in_ch, self.out_ch, self.kernel, self.stride)
    }

    pub fn num_params(&self) -> usize {
        self.weight.len() + self.bias.len()
    }

    fn pad(&self) -> usize {
        self.kernel / 2
    }

    pub fn output_size(&self, h: usize, w: usize) -> (usize, usize) {
        let p = self.pad();
        (
            (h + 2 * p - self.kernel) / self.stride + 1,
            (w + 2 * p - self.kernel) / self.stride + 1,
        )
    }

    /// Output columns `[lo, hi)` whose input column `ox * s + k - p` is in range.
    fn valid_range(&self, k: usize, in_len: usize, out_len: usize) -> (usize, usize) {
        let (p, s) = (self.pad(), self.stride);
        let lo = if k < p { (p - k).div_ceil(s) } else { 0 };
        let hi = if in_len + p > k {
            ((in_len - 1 + p - k) / s + 1).min(out_len)
        } else {
            0
        };
        (lo, hi.max(lo))
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let (c, h, w) = x.shape();
        if c != self.in_ch {
            return Err(Error::Shape(format!(
                "convolution expects {} input channels, got {c}",
                self.in_ch
            )));
        }
        let (oh, ow) = self.output_size(h, w);
        let (k, s, p) = (self.kernel, self.stride, self.pad());
        let mut out = Tensor::zeros(self.out_ch, oh, ow);
        for o in 0..self.out_ch {
            let dst = out.channel_mut(o);
            dst.fill(self.bias[o]);
            for i in 0..self.in_ch {
                let src = x.channel(i);
                for ky in 0..k {
                    let (y_lo, y_hi) = self.valid_range(ky, h, oh);
                    for kx in 0..k {
                        let wv = self.weight[((o * self.in_ch + i) * k + ky) * k + kx];
                        if wv == 0.0 {
                            continue;
                        }
                        let (x_lo, x_hi) = self.valid_range(kx, w, ow);
                        for oy in y_lo..y_hi {
                            let iy = oy * s + ky - p;
                            let in_row = &src[iy * w..(iy + 1) * w];
                            let out_row = &mut dst[oy * ow + x_lo..oy * ow + x_hi];
                            if s == 1 {
                                let off = x_lo + kx - p;
                                for (d, v) in out_row.iter_mut().zip(&in_row[off..]) {
                                    *d += wv * v;
                                }
                            } else {
                                for (j, d) in out_row.iter_mut().enumerate() {
                                    *d += wv * in_row[(x_lo + j) * s + kx - p];
                                }
                            }
                        }
                    }
                }
            }
        }
        Ok(out)
    }

    /// Accumulates parameter gradients into `grad` and returns the gradient
    /// with respect to `x` when `need_input_grad` is set.
    pub fn backward(
        &self,
        x: &Tensor,
        grad_out: &Tensor,
        grad: &mut Conv2d,
        need_input_grad: bool,
    ) -> Option<Tensor> {
        let (_, h, w) = x.shape();
        let (_, oh, ow) = grad_out.shape();
        let (k, s, p) = (self.kernel, self.stride, self.pad());
        let mut gx = need_input_grad.then(|| Tensor::zeros(self.in_ch, h, w));
        for o in 0..self.out_ch {
            let g = grad_out.channel(o);
            grad.bias[o] += g.iter().sum::<f64>();
            for i in 0..self.in_ch {
                let src = x.channel(i);
                for ky in 0..k {
                    let (y_lo, y_hi) = self.valid_range(ky, h, oh);
                    for kx in 0..k {
                        let widx = ((o * self.in_ch + i) * k + ky) * k + kx;
                        let wv = self.weight[widx];
                        let (x_lo, x_hi) = self.valid_range(kx, w, ow);
                        let mut acc = 0.0;
                        for oy in y_lo..y_hi {
                            let iy = oy * s + ky - p;
                            let g_row = &g[oy * ow + x_lo..oy * ow + x_hi];
                            if s == 1 {
                                let off = iy * w + x_lo + kx - p;
                                let in_row = &src[off..off + g_row.len()];
                                acc += g_row.iter().zip(in_row).map(|(a, b)| a * b).sum::<f64>();
                                if let Some(gx) = gx.as_mut() {
                                    let dst = &mut gx.channel_mut(i)[off..off + g_row.len()];
                                    for (d, gv) in dst.iter_mut().zip(g_row) {
                                        *d += wv * gv;
                                    }
                                }
                            } else {
                                for (j, gv) in g_row.iter().enumerate() {
                                    let idx = iy * w + (x_lo + j) * s + kx - p;
                                    acc += gv * src[idx];
                                    if let Some(gx) = gx.as_mut() {
                                        gx.channel_mut(i)[idx] += wv * gv;
                                    }
                                }
                            }
                        }
                        grad.weight[widx] += acc;
                    }
                }
            }
        }
        gx
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn sigmoid_scalar(x: f64) -> f64 {
    sigmoid(x)
}

/// SiLU (`x * sigmoid(x)`); smooth with `silu(0) = 0`.
pub fn silu(x: &Tensor) -> Tensor {
    x.map(|v| v * sigmoid(v))
}

/// Backward of [`silu`] given its pre-activation input.
pub fn silu_backward(pre: &Tensor, grad_out: &Tensor) -> Tensor {
    let mut g = grad_out.clone();
    for (d, &x) in g.data_mut().iter_mut().zip(pre.data()) {
        let s = sigmoid(x);
        *d *= s * (1.0 + x * (1.0 - s));
    }
    g
}

/// Visitor over every trainable slice of a parameter structure, in a fixed
/// order shared by checkpoints, optimizers and gradient checks.
pub trait Parameters {
    fn convs(&self) -> Vec<&Conv2d>;
    fn convs_mut(&mut self) -> Vec<&mut Conv2d>;

    fn num_params(&self) -> usize {
        self.convs().iter().map(|c| c.num_params()).sum()
    }

    fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.num_params());
        for c in self.convs() {
            out.extend_from_slice(&c.weight);
            out.extend_from_slice(&c.bias);
        }
        out
    }

    fn load_flat(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.num_params() {
            return Err(Error::Shape(format!(
                "expected {} parameters, got {}",
                self.num_params(),
                flat.len()
            )));
        }
        let mut pos = 0;
        for c in self.convs_mut() {
            let n = c.weight.len();
            c.weight.copy_from_slice(&flat[pos..pos + n]);
            pos += n;
            let n = c.bias.len();
            c.bias.copy_from_slice(&flat[pos..pos + n]);
            pos += n;
        }
        Ok(())
    }

    /// Mutable access to the `index`-th scalar in flattened order.
    fn param_mut(&mut self, mut index: usize) -> &mut f64 {
        for c in self.convs_mut() {
            if index < c.weight.len() {
                return &mut c.weight[index];
            }
            index -= c.weight.len();
            if index < c.bias.len() {
                return &mut c.bias[index];
            }
            index -= c.bias.len();
        }
        panic!("parameter index out of range");
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn naive_conv(conv: &Conv2d, x: &Tensor) -> Tensor {
        let (_, h, w) = x.shape();
        let (oh, ow) = conv.output_size(h, w);
        let p = conv.kernel as isize / 2;
        let mut out = Tensor::zeros(conv.out_ch, oh, ow);
        for o in 0..conv.out_ch {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut acc = conv.bias[o];
                    for i in 0..conv.in_ch {
                        for ky in 0..conv.kernel {
                            for kx in 0..conv.kernel {
                                let iy = (oy * conv.stride) as isize + ky as isize - p;
                                let ix = (ox * conv.stride) as isize + kx as isize - p;
                                if iy < 0 || ix < 0 || iy >= h as isize || ix >= w as isize {
                                    continue;
                                }
                                let wi = ((o * conv.in_ch + i) * conv.kernel + ky) * conv.kernel + kx;
                                acc += conv.weight[wi] * x.at(i, iy as usize, ix as usize);
                            }
                        }
                    }
                    out.set(o, oy, ox, acc);
                }
            }
        }
        out
    }

    fn random_tensor(c: usize, h: usize, w: usize, rng: &mut ChaCha8Rng) -> Tensor {
        Tensor::from_vec(c, h, w, (0..c * h * w).map(|_| rng.random_range(-1.0..1.0)).collect())
            .unwrap()
    }

    #[test]
    fn forward_matches_naive_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for &(k, s, h, w) in &[(3, 1, 5, 6), (3, 2, 8, 8), (1, 1, 4, 3), (3, 2, 7, 5), (1, 2, 6, 6)] {
            let mut conv = Conv2d::random(2, 3, k, s, 1.0, &mut rng);
            conv.bias = vec![0.1, -0.2, 0.3];
            let x = random_tensor(2, h, w, &mut rng);
            let fast = conv.forward(&x).unwrap();
            let slow = naive_conv(&conv, &x);
            for (a, b) in fast.data().iter().zip(slow.data()) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn backward_is_adjoint_of_forward() {
        // <conv(x) - b, g> == <x, dx> and == <w, dw> for a linear map.
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for &(k, s) in &[(3, 1), (3, 2), (1, 1)] {
            let conv = Conv2d::random(3, 2, k, s, 1.0, &mut rng);
            let x = random_tensor(3, 8, 6, &mut rng);
            let y = conv.forward(&x).unwrap();
            let g = random_tensor(2, y.height(), y.width(), &mut rng);
            let mut grad = conv.zeros_like();
            let gx = conv.backward(&x, &g, &mut grad, true).unwrap();
            let lhs: f64 = y.hadamard(&g).data().iter().sum::<f64>()
                - (0..2).map(|o| conv.bias[o] * g.channel(o).iter().sum::<f64>()).sum::<f64>();
            let via_x: f64 = x.hadamard(&gx).data().iter().sum();
            let via_w: f64 = conv.weight.iter().zip(&grad.weight).map(|(a, b)| a * b).sum();
            assert!((lhs - via_x).abs() < 1e-10);
            assert!((lhs - via_w).abs() < 1e-10);
        }
    }

    #[test]
    fn channel_mismatch_is_rejected() {
        let conv = Conv2d::zeros(2, 1, 1, 1);
        assert!(matches!(conv.forward(&Tensor::zeros(3, 2, 2)), Err(Error::Shape(_))));
    }

    #[test]
    fn silu_zero_is_zero() {
        let t = silu(&Tensor::zeros(1, 2, 2));
        assert!(t.data().iter().all(|&v| v == 0.0));
    }
}
