//! Depth inpainting and per-scene normalisation.

use std::collections::VecDeque;

use crate::error::{Error, Result};

/// Sentinel written by the generator for pixels without a depth reading.
/// Any non-finite value is treated as invalid.
pub const INVALID_DEPTH: f32 = f32::NAN;

const MAX_ITERATIONS: usize = 10_000;
const TOLERANCE: f64 = 1e-6;

#[derive(Clone, Debug, PartialEq)]
pub struct DepthMap {
    pub height: usize,
    pub width: usize,
    pub values: Vec<f64>,
}

impl DepthMap {
    pub fn new(height: usize, width: usize, values: Vec<f64>) -> Result<Self> {
        if values.len() != height * width {
            return Err(Error::Shape(format!(
                "{} depth values for a {height}x{width} map",
                values.len()
            )));
        }
        Ok(Self { height, width, values })
    }

    fn neighbours(&self, idx: usize) -> impl Iterator<Item = usize> + '_ {
        let (y, x) = (idx / self.width, idx % self.width);
        let w = self.width;
        [
            (y > 0).then(|| idx - w),
            (y + 1 < self.height).then(|| idx + w),
            (x > 0).then(|| idx - 1),
            (x + 1 < w).then(|| idx + 1),
        ]
        .into_iter()
        .flatten()
    }
}

fn is_valid(v: f64) -> bool {
    v.is_finite()
}

/// Replaces invalid pixels by iterative 4-neighbour diffusion.
///
/// Invalid pixels are first seeded breadth-first from the valid region, then
/// relaxed with Gauss-Seidel sweeps in scan order until the largest update is
/// below `1e-6` or 10 000 sweeps have run. Valid pixels are never touched and
/// every filled value stays inside the valid `[min, max]` range.
pub fn inpaint_invalid(depth: &DepthMap) -> Result<Vec<f64>> {
    let n = depth.values.len();
    let mut known: Vec<bool> = depth.values.iter().map(|&v| is_valid(v)).collect();
    let holes: Vec<usize> = (0..n).filter(|&i| !known[i]).collect();
    if holes.is_empty() {
        return Ok(depth.values.clone());
    }
    if holes.len() == n {
        return Err(Error::Degenerate("depth map has no valid pixels".into()));
    }
    let mut out = depth.values.clone();

    // Seed holes from the outside in.
    let mut queued = known.clone();
    let mut queue = VecDeque::new();
    for &i in &holes {
        if depth.neighbours(i).any(|j| known[j]) {
            queued[i] = true;
            queue.push_back(i);
        }
    }
    while let Some(i) = queue.pop_front() {
        let (sum, cnt) = depth
            .neighbours(i)
            .filter(|&j| known[j])
            .fold((0.0, 0usize), |(s, c), j| (s + out[j], c + 1));
        out[i] = sum / cnt as f64;
        known[i] = true;
        for j in depth.neighbours(i) {
            if !queued[j] {
                queued[j] = true;
                queue.push_back(j);
            }
        }
    }

    for _ in 0..MAX_ITERATIONS {
        let mut max_change: f64 = 0.0;
        for &i in &holes {
            let (sum, cnt) = depth
                .neighbours(i)
                .fold((0.0, 0usize), |(s, c), j| (s + out[j], c + 1));
            let v = sum / cnt as f64;
            max_change = max_change.max((v - out[i]).abs());
            out[i] = v;
        }
        if max_change < TOLERANCE {
            break;
        }
    }
    Ok(out)
}

/// Inpaints, then min-max normalises and flips so the farthest depth maps
/// to 0 and the nearest to 1.
pub fn preprocess_depth(depth_raw: &DepthMap) -> Result<Vec<f64>> {
    let (lo, hi) = depth_raw
        .values
        .iter()
        .filter(|v| is_valid(**v))
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)));
    if !(lo < hi) {
        return Err(Error::Degenerate(
            "depth map needs at least two distinct valid values".into(),
        ));
    }
    let filled = inpaint_invalid(depth_raw)?;
    let range = hi - lo;
    Ok(filled.iter().map(|&v| 1.0 - (v - lo) / range).collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    const NAN: f64 = f64::NAN;

    fn map(h: usize, w: usize, v: &[f64]) -> DepthMap {
        DepthMap::new(h, w, v.to_vec()).unwrap()
    }

    /// Dense Gaussian elimination on the discrete Laplace system: each hole
    /// equals the mean of its in-bounds 4-neighbours.
    fn harmonic_fill(d: &DepthMap) -> Vec<f64> {
        let holes: Vec<usize> = (0..d.values.len()).filter(|&i| !d.values[i].is_finite()).collect();
        let k = holes.len();
        let pos = |i: usize| holes.iter().position(|&h| h == i);
        let mut a = vec![vec![0.0; k + 1]; k];
        for (r, &i) in holes.iter().enumerate() {
            let nb: Vec<usize> = d.neighbours(i).collect();
            a[r][r] = nb.len() as f64;
            for j in nb {
                match pos(j) {
                    Some(c) => a[r][c] -= 1.0,
                    None => a[r][k] += d.values[j],
                }
            }
        }
        for col in 0..k {
            let piv = (col..k).max_by(|&x, &y| a[x][col].abs().total_cmp(&a[y][col].abs())).unwrap();
            a.swap(col, piv);
            for r in 0..k {
                if r != col {
                    let f = a[r][col] / a[col][col];
                    for c in col..=k {
                        a[r][c] -= f * a[col][c];
                    }
                }
            }
        }
        let mut out = d.values.clone();
        for (r, &i) in holes.iter().enumerate() {
            out[i] = a[r][k] / a[r][r];
        }
        out
    }

    #[test]
    fn two_level_map_normalises_and_flips() {
        let out = preprocess_depth(&map(2, 2, &[2.0, 2.0, 2.0, 1.0])).unwrap();
        assert_eq!(out, vec![0.0, 0.0, 0.0, 1.0]);
    }

    #[test]
    fn constant_map_is_degenerate() {
        assert!(matches!(preprocess_depth(&map(2, 2, &[3.0; 4])), Err(Error::Degenerate(_))));
        assert!(matches!(
            preprocess_depth(&map(2, 2, &[3.0, NAN, 3.0, NAN])),
            Err(Error::Degenerate(_))
        ));
    }

    #[test]
    fn no_holes_is_bit_identical() {
        let d = map(2, 3, &[1.5, 0.1, 7.0, -2.0, 3.25, 1e-9]);
        let out = inpaint_invalid(&d).unwrap();
        assert!(out.iter().zip(&d.values).all(|(a, b)| a.to_bits() == b.to_bits()));
    }

    #[test]
    fn all_invalid_is_an_error() {
        assert!(inpaint_invalid(&map(2, 2, &[NAN; 4])).is_err());
    }

    #[test]
    fn constant_neighbourhood_fill() {
        let d = map(3, 3, &[5.0, 5.0, 5.0, 5.0, NAN, 5.0, 5.0, 5.0, 5.0]);
        assert_eq!(inpaint_invalid(&d).unwrap()[4], 5.0);
    }

    #[test]
    fn single_hole_surrounded_by_two_is_filled_before_normalising() {
        let d = map(3, 3, &[2.0, 2.0, 2.0, 2.0, NAN, 2.0, 2.0, 2.0, 1.0]);
        let filled = inpaint_invalid(&d).unwrap();
        let oracle = harmonic_fill(&d);
        assert!((filled[4] - oracle[4]).abs() < 1e-5);
        assert!((filled[4] - 2.0).abs() < 1e-12);
        let out = preprocess_depth(&d).unwrap();
        assert_eq!(out[4], 0.0);
    }

    #[test]
    fn three_by_three_grids_match_harmonic_oracle() {
        let cases: [&[f64]; 3] = [
            &[1.0, NAN, 3.0, NAN, NAN, 2.0, 0.5, 4.0, NAN],
            &[NAN, NAN, NAN, NAN, 9.0, NAN, NAN, NAN, 1.0],
            &[0.0, 1.0, 2.0, 3.0, NAN, 5.0, 6.0, NAN, 8.0],
        ];
        for c in cases {
            let d = map(3, 3, c);
            let filled = inpaint_invalid(&d).unwrap();
            let oracle = harmonic_fill(&d);
            for (a, b) in filled.iter().zip(&oracle) {
                assert!((a - b).abs() < 1e-5, "{a} vs {b}");
            }
        }
    }

    #[test]
    fn ramp_hole_is_filled_harmonically() {
        // v(x, y) = x is discrete-harmonic, so the 2x2 hole recovers it.
        let mut v: Vec<f64> = (0..25).map(|i| (i % 5) as f64).collect();
        for (y, x) in [(1, 1), (1, 2), (2, 1), (2, 2)] {
            v[y * 5 + x] = NAN;
        }
        let d = map(5, 5, &v);
        let filled = inpaint_invalid(&d).unwrap();
        let oracle = harmonic_fill(&d);
        for y in 1..3 {
            let row = &filled[y * 5..y * 5 + 5];
            assert!(row[1] < row[2], "monotone along the ramp");
            for x in 1..3 {
                assert!((0.0..=4.0).contains(&row[x]));
                assert!((row[x] - x as f64).abs() < 1e-4);
                assert!((row[x] - oracle[y * 5 + x]).abs() < 1e-4);
            }
        }
    }
}
