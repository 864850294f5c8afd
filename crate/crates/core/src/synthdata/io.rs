//! On-disk dataset layout.
//!
//! ```text
//! <root>/manifest.json
//! <root>/<split>/<scene_id>/rgb.png           8-bit RGB
//! <root>/<split>/<scene_id>/depth_raw.bin     "MMRD", u32 version, u32 H, u32 W, f32 LE row-major
//! <root>/<split>/<scene_id>/depth.png         16-bit, round(65535 * normalised depth)
//! <root>/<split>/<scene_id>/annotations.json
//! ```

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::depth::{preprocess_depth, DepthMap};
use super::{DatasetManifest, InstanceGt, ModalitySignature, RawDepth, SceneEntry, SceneSample, Split};
use crate::error::{Error, Result};
use crate::geometry::{BoxPx, RawRuns};
use crate::imageio;

pub const MANIFEST_FILE: &str = "manifest.json";
pub const MANIFEST_VERSION: u32 = 1;
const DEPTH_MAGIC: &[u8; 4] = b"MMRD";
const DEPTH_VERSION: u32 = 1;

const RGB_FILE: &str = "rgb.png";
const DEPTH_RAW_FILE: &str = "depth_raw.bin";
const DEPTH_FILE: &str = "depth.png";
const ANNOTATIONS_FILE: &str = "annotations.json";

#[derive(Serialize, Deserialize)]
struct InstanceRecord {
    label: u32,
    #[serde(rename = "box")]
    bbox: BoxPx,
    mask: RawRuns,
    modality_signature: ModalitySignature,
}

#[derive(Serialize, Deserialize)]
struct Annotations {
    scene_id: String,
    split: Split,
    height: usize,
    width: usize,
    instances: Vec<InstanceRecord>,
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<String> {
    fs::write(path, bytes).map_err(|e| Error::io(path, e))?;
    Ok(hex::encode(Sha256::digest(bytes)))
}

fn encode_depth_raw(scene: &SceneSample) -> Vec<u8> {
    let mut out = Vec::with_capacity(16 + scene.depth_raw.0.len() * 4);
    out.extend_from_slice(DEPTH_MAGIC);
    out.extend_from_slice(&DEPTH_VERSION.to_le_bytes());
    out.extend_from_slice(&(scene.height as u32).to_le_bytes());
    out.extend_from_slice(&(scene.width as u32).to_le_bytes());
    for v in &scene.depth_raw.0 {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

fn decode_depth_raw(path: &Path, bytes: &[u8]) -> Result<(usize, usize, Vec<f32>)> {
    if bytes.len() < 16 || &bytes[0..4] != DEPTH_MAGIC {
        return Err(Error::format(path, "not a raw depth file"));
    }
    let word = |i: usize| u32::from_le_bytes(bytes[i..i + 4].try_into().expect("4 bytes"));
    if word(4) != DEPTH_VERSION {
        return Err(Error::Version {
            path: path.into(),
            found: word(4),
            expected: DEPTH_VERSION,
        });
    }
    let (h, w) = (word(8) as usize, word(12) as usize);
    if bytes.len() != 16 + h * w * 4 {
        return Err(Error::format(path, format!("payload does not match {h}x{w}")));
    }
    let values = bytes[16..]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
        .collect();
    Ok((h, w, values))
}

/// Writes every scene and the manifest (with per-file checksums filled in).
pub fn write_dataset(manifest: &DatasetManifest, scenes: &[SceneSample], root: &Path) -> Result<DatasetManifest> {
    let mut out = manifest.clone();
    out.root = root.to_path_buf();
    for entries in out.splits.values_mut() {
        for e in entries.iter_mut() {
            e.checksums.clear();
        }
    }
    for scene in scenes {
        let entry = out
            .splits
            .get_mut(&scene.split)
            .and_then(|v| v.iter_mut().find(|e| e.scene_id == scene.scene_id))
            .ok_or_else(|| {
                Error::InvalidArgument(format!(
                    "scene {} ({}) is not listed in the manifest",
                    scene.scene_id, scene.split
                ))
            })?;
        let dir = root.join(scene.split.as_str()).join(&scene.scene_id);
        fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;

        let rgb_path = dir.join(RGB_FILE);
        let bytes: Vec<u8> = scene.rgb.iter().map(|v| (v * 255.0).round() as u8).collect();
        imageio::write_rgb8(&rgb_path, scene.width, scene.height, &bytes)?;
        let rgb_bytes = fs::read(&rgb_path).map_err(|e| Error::io(&rgb_path, e))?;
        entry.checksums.insert(RGB_FILE.into(), hex::encode(Sha256::digest(&rgb_bytes)));

        let sum = write_file(&dir.join(DEPTH_RAW_FILE), &encode_depth_raw(scene))?;
        entry.checksums.insert(DEPTH_RAW_FILE.into(), sum);

        let depth_path = dir.join(DEPTH_FILE);
        let depth16: Vec<u16> = scene.depth.iter().map(|v| (v * 65535.0).round() as u16).collect();
        imageio::write_gray16(&depth_path, scene.width, scene.height, &depth16)?;
        let depth_bytes = fs::read(&depth_path).map_err(|e| Error::io(&depth_path, e))?;
        entry.checksums.insert(DEPTH_FILE.into(), hex::encode(Sha256::digest(&depth_bytes)));

        let ann = Annotations {
            scene_id: scene.scene_id.clone(),
            split: scene.split,
            height: scene.height,
            width: scene.width,
            instances: scene
                .instances
                .iter()
                .map(|i| InstanceRecord {
                    label: i.label,
                    bbox: i.bbox,
                    mask: RawRuns::from(&i.mask),
                    modality_signature: i.signature,
                })
                .collect(),
        };
        let json = serde_json::to_vec_pretty(&ann).expect("serializable");
        let sum = write_file(&dir.join(ANNOTATIONS_FILE), &json)?;
        entry.checksums.insert(ANNOTATIONS_FILE.into(), sum);
    }
    let json = serde_json::to_vec_pretty(&out).expect("serializable");
    write_file(&root.join(MANIFEST_FILE), &json)?;
    Ok(out)
}

fn read_verified(dir: &Path, name: &str, entry: &SceneEntry) -> Result<Vec<u8>> {
    let path = dir.join(name);
    if !path.exists() {
        return Err(Error::Missing { path });
    }
    let bytes = fs::read(&path).map_err(|e| Error::io(&path, e))?;
    match entry.checksums.get(name) {
        Some(expected) if *expected == hex::encode(Sha256::digest(&bytes)) => Ok(bytes),
        _ => Err(Error::Checksum { path }),
    }
}

/// Loads and verifies one scene. Normalised depth is recomputed from the raw
/// depth so it is bit-identical to what the generator produced.
pub fn load_scene(manifest: &DatasetManifest, split: Split, entry: &SceneEntry) -> Result<SceneSample> {
    let dir = manifest.root.join(split.as_str()).join(&entry.scene_id);
    let ann_path = dir.join(ANNOTATIONS_FILE);
    let ann: Annotations = serde_json::from_slice(&read_verified(&dir, ANNOTATIONS_FILE, entry)?)
        .map_err(|e| Error::format(&ann_path, e))?;
    if ann.scene_id != entry.scene_id || ann.split != split {
        return Err(Error::format(&ann_path, "scene id or split disagrees with manifest"));
    }
    let (h, w) = (ann.height, ann.width);

    read_verified(&dir, RGB_FILE, entry)?;
    let rgb_path = dir.join(RGB_FILE);
    let (rw, rh, bytes) = imageio::read_rgb8(&rgb_path)?;
    if (rh, rw) != (h, w) {
        return Err(Error::format(&rgb_path, "image size disagrees with annotations"));
    }
    let rgb = bytes.iter().map(|&b| f64::from(b) / 255.0).collect();

    let raw_path = dir.join(DEPTH_RAW_FILE);
    let (dh, dw, raw) = decode_depth_raw(&raw_path, &read_verified(&dir, DEPTH_RAW_FILE, entry)?)?;
    if (dh, dw) != (h, w) {
        return Err(Error::format(&raw_path, "depth size disagrees with annotations"));
    }
    read_verified(&dir, DEPTH_FILE, entry)?;
    let raw_map = DepthMap::new(h, w, raw.iter().map(|&v| f64::from(v)).collect())?;
    let depth = match preprocess_depth(&raw_map) {
        Ok(d) => d,
        Err(Error::Degenerate(_)) => vec![0.0; h * w],
        Err(e) => return Err(e),
    };

    let instances = ann
        .instances
        .into_iter()
        .map(|r| {
            let mask = r.mask.into_rle(h, w).map_err(|e| Error::format(&ann_path, e))?;
            if mask.bbox() != Some(r.bbox) {
                return Err(Error::format(&ann_path, "box is not the tight bound of its mask"));
            }
            Ok(InstanceGt {
                label: r.label,
                mask,
                bbox: r.bbox,
                signature: r.modality_signature,
            })
        })
        .collect::<Result<Vec<_>>>()?;

    Ok(SceneSample {
        scene_id: ann.scene_id,
        height: h,
        width: w,
        rgb,
        depth_raw: RawDepth(raw),
        depth,
        instances,
        split,
    })
}

fn read_manifest(root: &Path) -> Result<DatasetManifest> {
    let path = root.join(MANIFEST_FILE);
    if !path.exists() {
        return Err(Error::Missing { path });
    }
    let bytes = fs::read(&path).map_err(|e| Error::io(&path, e))?;
    let value: serde_json::Value = serde_json::from_slice(&bytes).map_err(|e| Error::format(&path, e))?;
    let version = value.get("version").and_then(|v| v.as_u64()).unwrap_or(0) as u32;
    if version != MANIFEST_VERSION {
        return Err(Error::Version {
            path,
            found: version,
            expected: MANIFEST_VERSION,
        });
    }
    let mut manifest: DatasetManifest = serde_json::from_value(value).map_err(|e| Error::format(&path, e))?;
    manifest.root = root.to_path_buf();
    Ok(manifest)
}

/// Opens a dataset; scenes are loaded lazily in split order.
pub fn load_dataset(root: &Path) -> Result<(DatasetManifest, impl Iterator<Item = Result<SceneSample>>)> {
    let manifest = read_manifest(root)?;
    let jobs: Vec<(Split, SceneEntry)> = manifest
        .splits
        .iter()
        .flat_map(|(s, v)| v.iter().map(move |e| (*s, e.clone())))
        .collect();
    let m = manifest.clone();
    let iter = jobs.into_iter().map(move |(s, e)| load_scene(&m, s, &e));
    Ok((manifest, iter))
}

impl DatasetManifest {
    pub fn open(root: impl Into<PathBuf>) -> Result<Self> {
        read_manifest(&root.into())
    }

    pub fn load_split(&self, split: Split) -> Result<Vec<SceneSample>> {
        self.splits
            .get(&split)
            .map(|v| v.iter().map(|e| load_scene(self, split, e)).collect())
            .unwrap_or_else(|| Ok(Vec::new()))
    }

    pub fn load_scene_by_id(&self, scene_id: &str) -> Result<SceneSample> {
        for (split, entries) in &self.splits {
            if let Some(e) = entries.iter().find(|e| e.scene_id == scene_id) {
                return load_scene(self, *split, e);
            }
        }
        Err(Error::InvalidArgument(format!("scene '{scene_id}' is not in the dataset")))
    }
}
