//! Synthetic RGB-D bin scenes with modality-biased objects.
//!
//! Every object class carries a [`ModalitySignature`]: some classes are
//! visible mainly in RGB (flat printed stickers), some mainly in depth
//! (dark parts that match the bin colour), some in both, and some have
//! large invalid-depth regions like transparent or specular items.

mod depth;
mod generate;
mod io;

use std::collections::BTreeMap;
use std::fmt;
use std::path::PathBuf;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{BoxPx, Rle};

pub use depth::{inpaint_invalid, preprocess_depth, DepthMap, INVALID_DEPTH};
pub use generate::{
    class_catalog, generate_dataset, generate_novel_scene, generate_scene, generate_scene_for_split,
    ClassInfo, GeneratorConfig, ShapeKind,
};
pub use io::{load_dataset, load_scene, write_dataset, MANIFEST_FILE, MANIFEST_VERSION};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Val,
    Test,
    TestNovel,
}

impl Split {
    pub const ALL: [Split; 4] = [Split::Train, Split::Val, Split::Test, Split::TestNovel];

    pub fn as_str(&self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
            Split::TestNovel => "test_novel",
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Split::ALL
            .into_iter()
            .find(|sp| sp.as_str() == s)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown split '{s}'")))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModalitySignature {
    RgbDominant,
    DepthDominant,
    Balanced,
    Adversarial,
}

/// Ground truth for one object. Instances are stored back-to-front.
#[derive(Clone, Debug, PartialEq)]
pub struct InstanceGt {
    pub label: u32,
    pub mask: Rle,
    pub bbox: BoxPx,
    pub signature: ModalitySignature,
}

/// Raw sensor depth; non-finite values are invalid readings. Equality is
/// bitwise so scenes with invalid pixels still compare equal to themselves.
#[derive(Clone, Debug)]
pub struct RawDepth(pub Vec<f32>);

impl PartialEq for RawDepth {
    fn eq(&self, other: &Self) -> bool {
        self.0.len() == other.0.len()
            && self.0.iter().zip(&other.0).all(|(a, b)| a.to_bits() == b.to_bits())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SceneSample {
    pub scene_id: String,
    pub height: usize,
    pub width: usize,
    /// Row-major interleaved RGB in `[0, 1]`, quantised to multiples of 1/255.
    pub rgb: Vec<f64>,
    pub depth_raw: RawDepth,
    /// Preprocessed depth in `[0, 1]`, background 0, nearest point 1.
    pub depth: Vec<f64>,
    pub instances: Vec<InstanceGt>,
    pub split: Split,
}

impl SceneSample {
    pub fn raw_depth_map(&self) -> DepthMap {
        DepthMap {
            height: self.height,
            width: self.width,
            values: self.depth_raw.0.iter().map(|&v| f64::from(v)).collect(),
        }
    }

    /// Label of the front-most instance at each pixel (`None` = background).
    pub fn label_map(&self) -> Vec<Option<u32>> {
        let mut out = vec![None; self.height * self.width];
        for inst in &self.instances {
            for &(start, len) in inst.mask.runs() {
                out[start as usize..(start + len) as usize].fill(Some(inst.label));
            }
        }
        out
    }

    /// Index of the front-most instance at each pixel.
    pub fn instance_map(&self) -> Vec<Option<usize>> {
        let mut out = vec![None; self.height * self.width];
        for (i, inst) in self.instances.iter().enumerate() {
            for &(start, len) in inst.mask.runs() {
                out[start as usize..(start + len) as usize].fill(Some(i));
            }
        }
        out
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SceneEntry {
    pub scene_id: String,
    pub seed: u64,
    /// SHA-256 (hex) per file name inside the scene directory.
    pub checksums: BTreeMap<String, String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub version: u32,
    #[serde(skip)]
    pub root: PathBuf,
    pub seed: u64,
    pub config_hash: String,
    pub image_size: usize,
    pub classes: Vec<ClassInfo>,
    pub splits: BTreeMap<Split, Vec<SceneEntry>>,
    pub generator: GeneratorConfig,
}

impl DatasetManifest {
    pub fn split_counts(&self) -> BTreeMap<Split, usize> {
        self.splits.iter().map(|(k, v)| (*k, v.len())).collect()
    }

    /// Number of classes a model trains on (novel classes excluded).
    pub fn known_classes(&self) -> usize {
        self.classes.iter().filter(|c| !c.novel).count()
    }

    pub fn split_of(&self, scene_id: &str) -> Option<Split> {
        self.splits
            .iter()
            .find(|(_, entries)| entries.iter().any(|e| e.scene_id == scene_id))
            .map(|(s, _)| *s)
    }

    pub fn class_name(&self, label: u32) -> Option<&str> {
        self.classes.iter().find(|c| c.id == label).map(|c| c.name.as_str())
    }
}
