use std::path::Path;

use serde::{Deserialize, Serialize};

use super::head::DenseMaps;
use super::ModalityCondition;
use crate::error::{Error, Result};
use crate::geometry::{BoxPx, RawRuns, Rle};

#[derive(Clone, Debug, PartialEq)]
pub struct Detection {
    pub label: u32,
    pub confidence: f64,
    pub bbox: BoxPx,
    pub mask: Rle,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DetectionSet {
    pub scene_id: String,
    pub condition: ModalityCondition,
    pub height: usize,
    pub width: usize,
    pub detections: Vec<Detection>,
}

#[derive(Serialize, Deserialize)]
struct DetectionWire {
    label: u32,
    confidence: f64,
    #[serde(rename = "box")]
    bbox: BoxPx,
    mask_rle: RawRuns,
}

#[derive(Serialize, Deserialize)]
struct DetectionSetWire {
    scene_id: String,
    condition: ModalityCondition,
    height: usize,
    width: usize,
    detections: Vec<DetectionWire>,
}

impl DetectionSet {
    pub fn new(scene_id: impl Into<String>, condition: ModalityCondition, height: usize, width: usize) -> Self {
        Self {
            scene_id: scene_id.into(),
            condition,
            height,
            width,
            detections: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.detections.len()
    }

    pub fn is_empty(&self) -> bool {
        self.detections.is_empty()
    }

    pub fn validate(&self) -> Result<()> {
        for (i, d) in self.detections.iter().enumerate() {
            if !(0.0..=1.0).contains(&d.confidence) {
                return Err(Error::InvalidArgument(format!(
                    "detection {i}: confidence {} outside [0, 1]",
                    d.confidence
                )));
            }
            if d.mask.is_empty() {
                return Err(Error::InvalidArgument(format!("detection {i}: empty mask")));
            }
            if d.mask.height() != self.height || d.mask.width() != self.width {
                return Err(Error::Shape(format!("detection {i}: mask size differs from the set")));
            }
            if !d.bbox.fits(self.height, self.width) {
                return Err(Error::InvalidArgument(format!(
                    "detection {i}: box outside the {}x{} image",
                    self.height, self.width
                )));
            }
        }
        Ok(())
    }

    pub fn to_json(&self) -> String {
        let wire = DetectionSetWire {
            scene_id: self.scene_id.clone(),
            condition: self.condition,
            height: self.height,
            width: self.width,
            detections: self
                .detections
                .iter()
                .map(|d| DetectionWire {
                    label: d.label,
                    confidence: d.confidence,
                    bbox: d.bbox,
                    mask_rle: RawRuns::from(&d.mask),
                })
                .collect(),
        };
        serde_json::to_string_pretty(&wire).expect("detection sets serialise")
    }

    pub fn from_json(text: &str, path: &Path) -> Result<Self> {
        let wire: DetectionSetWire = serde_json::from_str(text).map_err(|e| Error::format(path, e))?;
        let (h, w) = (wire.height, wire.width);
        let detections = wire
            .detections
            .into_iter()
            .map(|d| {
                Ok(Detection {
                    label: d.label,
                    confidence: d.confidence,
                    bbox: d.bbox,
                    mask: d.mask_rle.into_rle(h, w).map_err(|e| Error::format(path, e))?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let set = Self {
            scene_id: wire.scene_id,
            condition: wire.condition,
            height: h,
            width: w,
            detections,
        };
        set.validate().map_err(|e| Error::format(path, e))?;
        Ok(set)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        std::fs::write(path, self.to_json()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        if !path.exists() {
            return Err(Error::Missing { path: path.into() });
        }
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text, path)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Thresholds {
    /// A head pixel is foreground when its objectness is strictly above this.
    pub objectness: f64,
    /// Minimum full-resolution mask area in pixels.
    pub min_area: u64,
}

impl Default for Thresholds {
    fn default() -> Self {
        Self {
            objectness: 0.5,
            min_area: 16,
        }
    }
}

impl Thresholds {
    pub fn validate(&self) -> Result<()> {
        if !(self.objectness > 0.0 && self.objectness < 1.0) {
            return Err(Error::InvalidArgument(format!(
                "objectness threshold {} outside (0, 1)",
                self.objectness
            )));
        }
        Ok(())
    }
}

/// Groups foreground head pixels into 8-connected components of equal
/// argmax class and upsamples each by `stride` into a full-resolution mask.
/// Components are emitted in scan order of their first pixel.
pub fn decode_instances(maps: &DenseMaps, thresholds: &Thresholds, stride: usize) -> Vec<Detection> {
    let (hh, hw) = (maps.height(), maps.width());
    let plane = hh * hw;
    let k = maps.classes();
    let obj = maps.objectness.data();
    let prob = maps.class_prob.data();

    // Argmax over object classes only; ties go to the lower id.
    let label: Vec<Option<usize>> = (0..plane)
        .map(|p| {
            (obj[p] > thresholds.objectness && k > 0).then(|| {
                let mut best = 1;
                for c in 2..=k {
                    if prob[c * plane + p] > prob[best * plane + p] {
                        best = c;
                    }
                }
                best
            })
        })
        .collect();

    let (h, w) = (hh * stride, hw * stride);
    let mut seen = vec![false; plane];
    let mut out = Vec::new();
    let mut stack = Vec::new();
    for start in 0..plane {
        let Some(cls) = label[start] else { continue };
        if seen[start] {
            continue;
        }
        seen[start] = true;
        stack.push(start);
        let mut members = Vec::new();
        while let Some(p) = stack.pop() {
            members.push(p);
            let (y, x) = ((p / hw) as isize, (p % hw) as isize);
            for dy in -1..=1 {
                for dx in -1..=1 {
                    let (ny, nx) = (y + dy, x + dx);
                    if ny < 0 || nx < 0 || ny >= hh as isize || nx >= hw as isize {
                        continue;
                    }
                    let q = ny as usize * hw + nx as usize;
                    if !seen[q] && label[q] == Some(cls) {
                        seen[q] = true;
                        stack.push(q);
                    }
                }
            }
        }
        let area = (members.len() * stride * stride) as u64;
        if area < thresholds.min_area {
            continue;
        }
        let mean_obj = members.iter().map(|&p| obj[p]).sum::<f64>() / members.len() as f64;
        let max_prob = members
            .iter()
            .map(|&p| prob[cls * plane + p])
            .fold(0.0, f64::max);
        let mut mask = vec![false; h * w];
        for &p in &members {
            let (y, x) = (p / hw, p % hw);
            for yy in y * stride..(y + 1) * stride {
                mask[yy * w + x * stride..yy * w + (x + 1) * stride].fill(true);
            }
        }
        let mask = Rle::from_mask(&mask, h, w);
        let bbox = mask.bbox().expect("component is non-empty");
        out.push(Detection {
            label: (cls - 1) as u32,
            confidence: (mean_obj * max_prob).clamp(0.0, 1.0),
            bbox,
            mask,
        });
    }
    out
}
