//! Pixel-set primitives shared by the generator, the decoder and the scorers.
//!
//! Boxes use inclusive integer bounds, so `BoxPx::new(0, 0, 9, 9)` covers
//! 100 pixels. Masks are run-length encoded over row-major pixel order as a
//! sorted list of `(start, length)` runs.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Axis-aligned box with inclusive pixel bounds.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "[u32; 4]", into = "[u32; 4]")]
pub struct BoxPx {
    pub x_min: u32,
    pub y_min: u32,
    pub x_max: u32,
    pub y_max: u32,
}

impl BoxPx {
    pub fn new(x_min: u32, y_min: u32, x_max: u32, y_max: u32) -> Result<Self> {
        if x_min > x_max || y_min > y_max {
            return Err(Error::InvalidArgument(format!(
                "box [{x_min}, {y_min}, {x_max}, {y_max}] has inverted bounds"
            )));
        }
        Ok(Self {
            x_min,
            y_min,
            x_max,
            y_max,
        })
    }

    pub fn width(&self) -> u64 {
        u64::from(self.x_max - self.x_min) + 1
    }

    pub fn height(&self) -> u64 {
        u64::from(self.y_max - self.y_min) + 1
    }

    /// Number of pixels covered.
    pub fn area(&self) -> u64 {
        self.width() * self.height()
    }

    pub fn intersection(&self, other: &BoxPx) -> Option<BoxPx> {
        let x_min = self.x_min.max(other.x_min);
        let y_min = self.y_min.max(other.y_min);
        let x_max = self.x_max.min(other.x_max);
        let y_max = self.y_max.min(other.y_max);
        (x_min <= x_max && y_min <= y_max).then_some(BoxPx {
            x_min,
            y_min,
            x_max,
            y_max,
        })
    }

    pub fn contains(&self, x: u32, y: u32) -> bool {
        x >= self.x_min && x <= self.x_max && y >= self.y_min && y <= self.y_max
    }

    pub fn fits(&self, height: usize, width: usize) -> bool {
        (self.x_max as usize) < width && (self.y_max as usize) < height
    }
}

impl TryFrom<[u32; 4]> for BoxPx {
    type Error = Error;

    fn try_from(v: [u32; 4]) -> Result<Self> {
        BoxPx::new(v[0], v[1], v[2], v[3])
    }
}

impl From<BoxPx> for [u32; 4] {
    fn from(b: BoxPx) -> Self {
        [b.x_min, b.y_min, b.x_max, b.y_max]
    }
}

/// Run-length encoded binary mask.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Rle {
    height: usize,
    width: usize,
    runs: Vec<(u32, u32)>,
}

impl Rle {
    pub fn empty(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            runs: Vec::new(),
        }
    }

    /// Builds a mask from `(start, length)` runs. Runs must be sorted,
    /// non-empty and inside the image; touching runs are merged.
    pub fn from_runs(height: usize, width: usize, runs: &[(u32, u32)]) -> Result<Self> {
        let n = (height * width) as u64;
        let mut out: Vec<(u32, u32)> = Vec::with_capacity(runs.len());
        for &(start, len) in runs {
            if len == 0 {
                return Err(Error::InvalidArgument("zero-length run".into()));
            }
            if u64::from(start) + u64::from(len) > n {
                return Err(Error::InvalidArgument(format!(
                    "run ({start}, {len}) exceeds {height}x{width} image"
                )));
            }
            match out.last_mut() {
                Some(last) if last.0 + last.1 > start => {
                    return Err(Error::InvalidArgument(
                        "runs must be sorted and non-overlapping".into(),
                    ))
                }
                Some(last) if last.0 + last.1 == start => last.1 += len,
                _ => out.push((start, len)),
            }
        }
        Ok(Self {
            height,
            width,
            runs: out,
        })
    }

    pub fn from_mask(mask: &[bool], height: usize, width: usize) -> Self {
        assert_eq!(mask.len(), height * width, "mask length must equal h*w");
        let mut runs = Vec::new();
        let mut i = 0;
        while i < mask.len() {
            if mask[i] {
                let start = i;
                while i < mask.len() && mask[i] {
                    i += 1;
                }
                runs.push((start as u32, (i - start) as u32));
            } else {
                i += 1;
            }
        }
        Self {
            height,
            width,
            runs,
        }
    }

    pub fn from_box(b: &BoxPx, height: usize, width: usize) -> Self {
        let mut runs = Vec::with_capacity(b.height() as usize);
        for y in b.y_min..=b.y_max {
            runs.push((y * width as u32 + b.x_min, b.width() as u32));
        }
        Self {
            height,
            width,
            runs,
        }
    }

    pub fn to_mask(&self) -> Vec<bool> {
        let mut mask = vec![false; self.height * self.width];
        for &(start, len) in &self.runs {
            mask[start as usize..(start + len) as usize].fill(true);
        }
        mask
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn runs(&self) -> &[(u32, u32)] {
        &self.runs
    }

    pub fn is_empty(&self) -> bool {
        self.runs.is_empty()
    }

    pub fn area(&self) -> u64 {
        self.runs.iter().map(|&(_, l)| u64::from(l)).sum()
    }

    /// Tight inclusive bounding box, `None` for an empty mask.
    pub fn bbox(&self) -> Option<BoxPx> {
        if self.runs.is_empty() {
            return None;
        }
        let w = self.width as u32;
        let (mut x0, mut y0, mut x1, mut y1) = (u32::MAX, u32::MAX, 0, 0);
        for &(start, len) in &self.runs {
            let end = start + len - 1;
            let (ys, ye) = (start / w, end / w);
            y0 = y0.min(ys);
            y1 = y1.max(ye);
            if ys != ye {
                x0 = 0;
                x1 = w - 1;
            } else {
                x0 = x0.min(start % w);
                x1 = x1.max(end % w);
            }
        }
        Some(BoxPx {
            x_min: x0,
            y_min: y0,
            x_max: x1,
            y_max: y1,
        })
    }

    /// Number of pixels set in both masks (two-pointer sweep over runs).
    pub fn intersection_area(&self, other: &Rle) -> u64 {
        let (a, b) = (&self.runs, &other.runs);
        let (mut i, mut j, mut total) = (0, 0, 0u64);
        while i < a.len() && j < b.len() {
            let (a0, a1) = (a[i].0, a[i].0 + a[i].1);
            let (b0, b1) = (b[j].0, b[j].0 + b[j].1);
            let lo = a0.max(b0);
            let hi = a1.min(b1);
            if hi > lo {
                total += u64::from(hi - lo);
            }
            if a1 <= b1 {
                i += 1;
            } else {
                j += 1;
            }
        }
        total
    }

    pub fn contains(&self, x: usize, y: usize) -> bool {
        let idx = (y * self.width + x) as u32;
        let pos = self.runs.partition_point(|&(s, _)| s <= idx);
        pos > 0 && {
            let (s, l) = self.runs[pos - 1];
            idx < s + l
        }
    }
}

impl Serialize for Rle {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        let runs: Vec<[u32; 2]> = self.runs.iter().map(|&(a, b)| [a, b]).collect();
        runs.serialize(s)
    }
}

/// Serialized runs without image dimensions; pair with the owning record's
/// `height`/`width` through [`RawRuns::into_rle`].
#[derive(Clone, Debug, Default, Serialize, Deserialize)]
#[serde(transparent)]
pub struct RawRuns(pub Vec<[u32; 2]>);

impl RawRuns {
    pub fn into_rle(self, height: usize, width: usize) -> Result<Rle> {
        let runs: Vec<(u32, u32)> = self.0.into_iter().map(|[a, b]| (a, b)).collect();
        Rle::from_runs(height, width, &runs)
    }
}

impl From<&Rle> for RawRuns {
    fn from(r: &Rle) -> Self {
        RawRuns(r.runs.iter().map(|&(a, b)| [a, b]).collect())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn box_area_is_inclusive() {
        let b = BoxPx::new(0, 0, 9, 9).unwrap();
        assert_eq!(b.area(), 100);
        assert!(BoxPx::new(3, 0, 2, 0).is_err());
    }

    #[test]
    fn rle_roundtrip_and_bbox() {
        let (h, w) = (4, 5);
        let mut mask = vec![false; h * w];
        for (x, y) in [(1, 1), (2, 1), (3, 1), (2, 2), (4, 3)] {
            mask[y * w + x] = true;
        }
        let rle = Rle::from_mask(&mask, h, w);
        assert_eq!(rle.to_mask(), mask);
        assert_eq!(rle.area(), 5);
        assert_eq!(rle.bbox(), Some(BoxPx::new(1, 1, 4, 3).unwrap()));
        assert!(rle.contains(4, 3));
        assert!(!rle.contains(0, 0));
    }

    #[test]
    fn run_spanning_rows_widens_bbox() {
        let rle = Rle::from_runs(3, 4, &[(3, 2)]).unwrap();
        assert_eq!(rle.bbox(), Some(BoxPx::new(0, 0, 3, 1).unwrap()));
    }

    #[test]
    fn from_runs_merges_and_validates() {
        let rle = Rle::from_runs(2, 4, &[(0, 2), (2, 1)]).unwrap();
        assert_eq!(rle.runs(), &[(0, 3)]);
        assert!(Rle::from_runs(2, 4, &[(6, 3)]).is_err());
        assert!(Rle::from_runs(2, 4, &[(3, 2), (1, 1)]).is_err());
    }

    #[test]
    fn box_json_is_a_four_array() {
        let b = BoxPx::new(1, 2, 3, 4).unwrap();
        assert_eq!(serde_json::to_string(&b).unwrap(), "[1,2,3,4]");
        assert!(serde_json::from_str::<BoxPx>("[5,2,3,4]").is_err());
    }
}
