//! Dense `C x H x W` feature maps in `f64`.

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    c: usize,
    h: usize,
    w: usize,
    data: Vec<f64>,
}

impl Tensor {
    pub fn zeros(c: usize, h: usize, w: usize) -> Self {
        Self::filled(c, h, w, 0.0)
    }

    pub fn filled(c: usize, h: usize, w: usize, v: f64) -> Self {
        Self {
            c,
            h,
            w,
            data: vec![v; c * h * w],
        }
    }

    pub fn from_vec(c: usize, h: usize, w: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != c * h * w {
            return Err(Error::Shape(format!(
                "{} values cannot fill a {c}x{h}x{w} tensor",
                data.len()
            )));
        }
        Ok(Self { c, h, w, data })
    }

    pub fn zeros_like(other: &Tensor) -> Self {
        Self::zeros(other.c, other.h, other.w)
    }

    pub fn shape(&self) -> (usize, usize, usize) {
        (self.c, self.h, self.w)
    }

    pub fn channels(&self) -> usize {
        self.c
    }

    pub fn height(&self) -> usize {
        self.h
    }

    pub fn width(&self) -> usize {
        self.w
    }

    pub fn plane(&self) -> usize {
        self.h * self.w
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    pub fn channel(&self, c: usize) -> &[f64] {
        let p = self.plane();
        &self.data[c * p..(c + 1) * p]
    }

    pub fn channel_mut(&mut self, c: usize) -> &mut [f64] {
        let p = self.plane();
        &mut self.data[c * p..(c + 1) * p]
    }

    pub fn at(&self, c: usize, y: usize, x: usize) -> f64 {
        self.data[(c * self.h + y) * self.w + x]
    }

    pub fn set(&mut self, c: usize, y: usize, x: usize, v: f64) {
        self.data[(c * self.h + y) * self.w + x] = v;
    }

    pub fn same_shape(&self, other: &Tensor) -> bool {
        self.shape() == other.shape()
    }

    pub fn check_same_shape(&self, other: &Tensor, what: &str) -> Result<()> {
        if self.same_shape(other) {
            Ok(())
        } else {
            Err(Error::Shape(format!(
                "{what}: {:?} vs {:?}",
                self.shape(),
                other.shape()
            )))
        }
    }

    pub fn add_assign(&mut self, other: &Tensor) {
        debug_assert!(self.same_shape(other));
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    pub fn scale(&mut self, s: f64) {
        self.data.iter_mut().for_each(|v| *v *= s);
    }

    pub fn hadamard(&self, other: &Tensor) -> Tensor {
        debug_assert!(self.same_shape(other));
        let data = self.data.iter().zip(&other.data).map(|(a, b)| a * b).collect();
        Tensor { data, ..*self }
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor {
            data: self.data.iter().map(|&v| f(v)).collect(),
            ..*self
        }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn mean(&self) -> f64 {
        self.data.iter().sum::<f64>() / self.data.len().max(1) as f64
    }

    /// Channel-wise concatenation of equally sized maps.
    pub fn concat(parts: &[&Tensor]) -> Result<Tensor> {
        let first = parts
            .first()
            .ok_or_else(|| Error::Shape("concat of zero tensors".into()))?;
        let (h, w) = (first.h, first.w);
        let mut data = Vec::with_capacity(parts.iter().map(|t| t.data.len()).sum());
        let mut c = 0;
        for t in parts {
            if t.h != h || t.w != w {
                return Err(Error::Shape(format!(
                    "concat spatial mismatch {}x{} vs {h}x{w}",
                    t.h, t.w
                )));
            }
            data.extend_from_slice(&t.data);
            c += t.c;
        }
        Ok(Tensor { c, h, w, data })
    }

    /// Splits along channels into equally sized chunks.
    pub fn split(&self, parts: usize) -> Vec<Tensor> {
        assert!(parts > 0 && self.c.is_multiple_of(parts));
        let cc = self.c / parts;
        let chunk = cc * self.plane();
        self.data
            .chunks(chunk)
            .map(|d| Tensor {
                c: cc,
                h: self.h,
                w: self.w,
                data: d.to_vec(),
            })
            .collect()
    }

    /// Nearest-neighbour 2x upsampling.
    pub fn upsample2(&self) -> Tensor {
        let (h2, w2) = (self.h * 2, self.w * 2);
        let mut out = Tensor::zeros(self.c, h2, w2);
        for c in 0..self.c {
            let src = self.channel(c);
            let dst = out.channel_mut(c);
            for y in 0..h2 {
                let row = &src[(y / 2) * self.w..(y / 2 + 1) * self.w];
                for (x, d) in dst[y * w2..(y + 1) * w2].iter_mut().enumerate() {
                    *d = row[x / 2];
                }
            }
        }
        out
    }

    /// Adjoint of [`Tensor::upsample2`]: sums each 2x2 block.
    pub fn sum_pool2(&self) -> Tensor {
        let (h2, w2) = (self.h / 2, self.w / 2);
        let mut out = Tensor::zeros(self.c, h2, w2);
        for c in 0..self.c {
            let src = self.channel(c);
            let dst = out.channel_mut(c);
            for y in 0..self.h {
                for x in 0..self.w {
                    dst[(y / 2) * w2 + x / 2] += src[y * self.w + x];
                }
            }
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn upsample_and_pool_are_adjoint() {
        let a = Tensor::from_vec(1, 2, 2, vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let b = Tensor::from_vec(1, 4, 4, (0..16).map(f64::from).collect()).unwrap();
        let lhs: f64 = a.upsample2().hadamard(&b).data().iter().sum();
        let rhs: f64 = a.hadamard(&b.sum_pool2()).data().iter().sum();
        assert_eq!(lhs, rhs);
    }

    #[test]
    fn concat_then_split_restores_parts() {
        let a = Tensor::filled(2, 3, 3, 1.0);
        let b = Tensor::filled(2, 3, 3, 2.0);
        let cat = Tensor::concat(&[&a, &b]).unwrap();
        assert_eq!(cat.channels(), 4);
        assert_eq!(cat.split(2), vec![a, b]);
        assert!(Tensor::concat(&[&Tensor::zeros(1, 2, 2), &Tensor::zeros(1, 3, 2)]).is_err());
    }
}
