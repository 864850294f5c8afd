use std::collections::BTreeMap;

use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::depth::{preprocess_depth, DepthMap, INVALID_DEPTH};
use super::{DatasetManifest, InstanceGt, ModalitySignature, RawDepth, SceneEntry, SceneSample, Split};
use crate::error::{Error, Result};
use crate::geometry::Rle;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ShapeKind {
    Rectangle,
    Ellipse,
    Ring,
    Corner,
    Triangle,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassInfo {
    pub id: u32,
    pub name: String,
    pub novel: bool,
    pub signature: ModalitySignature,
    pub shape: ShapeKind,
    /// Primary and secondary (stripe) colour; equal for plain objects.
    pub colors: [[f64; 3]; 2],
}

/// The fixed class catalogue. Novel classes only ever appear in `test_novel`.
pub fn class_catalog() -> Vec<ClassInfo> {
    use ModalitySignature::*;
    use ShapeKind::*;
    let c = |id, name: &str, novel, signature, shape, a, b| ClassInfo {
        id,
        name: name.to_string(),
        novel,
        signature,
        shape,
        colors: [a, b],
    };
    vec![
        c(0, "carton", false, Balanced, Rectangle, [0.74, 0.55, 0.30], [0.74, 0.55, 0.30]),
        c(1, "can", false, Balanced, Ellipse, [0.82, 0.16, 0.14], [0.82, 0.16, 0.14]),
        c(2, "sticker", false, RgbDominant, Rectangle, [0.96, 0.62, 0.05], [0.88, 0.12, 0.42]),
        c(3, "slab", false, DepthDominant, Rectangle, [0.0; 3], [0.0; 3]),
        c(4, "puck", false, DepthDominant, Ellipse, [0.0; 3], [0.0; 3]),
        c(5, "bottle", false, Adversarial, Ellipse, [0.55, 0.86, 0.92], [0.55, 0.86, 0.92]),
        c(6, "ring", true, Balanced, Ring, [0.20, 0.72, 0.25], [0.20, 0.72, 0.25]),
        c(7, "bracket", true, DepthDominant, Corner, [0.0; 3], [0.0; 3]),
        c(8, "foil", true, Adversarial, Triangle, [0.80, 0.80, 0.86], [0.60, 0.60, 0.70]),
    ]
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ClassMix {
    pub rgb_dominant: f64,
    pub depth_dominant: f64,
    pub balanced: f64,
    pub adversarial: f64,
}

impl Default for ClassMix {
    fn default() -> Self {
        Self {
            rgb_dominant: 0.15,
            depth_dominant: 0.30,
            balanced: 0.45,
            adversarial: 0.10,
        }
    }
}

impl ClassMix {
    fn weight(&self, s: ModalitySignature) -> f64 {
        match s {
            ModalitySignature::RgbDominant => self.rgb_dominant,
            ModalitySignature::DepthDominant => self.depth_dominant,
            ModalitySignature::Balanced => self.balanced,
            ModalitySignature::Adversarial => self.adversarial,
        }
    }
}

/// Scene and dataset generation parameters (TOML key-value file).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GeneratorConfig {
    pub image_size: usize,
    pub objects_min: usize,
    pub objects_max: usize,
    pub object_size_min: usize,
    pub object_size_max: usize,
    /// Minimum free pixels between the boxes of two objects.
    pub min_gap: usize,
    pub placement_attempts: usize,
    pub rgb_noise: f64,
    pub depth_noise: f64,
    /// Probability that an object boundary pixel has no depth reading.
    pub edge_dropout: f64,
    pub background_depth: f64,
    /// Largest depth change of the tilted bin floor across the image.
    pub floor_tilt: f64,
    /// Smooth liner folds that show up in depth only.
    pub clutter_max: usize,
    pub clutter_height: f64,
    pub height_min: f64,
    pub height_max: f64,
    /// Fraction of objects drawn from novel classes in `test_novel` scenes.
    pub novel_fraction: f64,
    pub class_mix: ClassMix,
    pub scenes: usize,
    pub novel_scenes: usize,
    pub seed: u64,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        Self {
            image_size: 128,
            objects_min: 2,
            objects_max: 5,
            object_size_min: 16,
            object_size_max: 32,
            min_gap: 8,
            placement_attempts: 200,
            rgb_noise: 0.02,
            depth_noise: 0.002,
            edge_dropout: 0.08,
            background_depth: 1.0,
            floor_tilt: 0.0,
            clutter_max: 0,
            clutter_height: 0.0,
            height_min: 0.04,
            height_max: 0.10,
            novel_fraction: 0.6,
            class_mix: ClassMix::default(),
            scenes: 200,
            novel_scenes: 20,
            seed: 42,
        }
    }
}

impl GeneratorConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::InvalidArgument(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("serializable config")
    }

    /// SHA-256 over the canonical TOML form.
    pub fn hash(&self) -> String {
        hex::encode(Sha256::digest(self.to_toml().as_bytes()))
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidArgument(m));
        if self.image_size < 32 {
            return bad(format!("image_size {} is below the minimum of 32", self.image_size));
        }
        if self.objects_min > self.objects_max {
            return bad("objects_min exceeds objects_max".into());
        }
        if self.object_size_min < 8 || self.object_size_min > self.object_size_max {
            return bad("object sizes must satisfy 8 <= min <= max".into());
        }
        if self.object_size_max + 2 > self.image_size {
            return bad("object_size_max does not fit the image".into());
        }
        let mix = &self.class_mix;
        let weights = [mix.rgb_dominant, mix.depth_dominant, mix.balanced, mix.adversarial];
        if weights.iter().any(|w| !(*w >= 0.0)) || weights.iter().sum::<f64>() <= 0.0 {
            return bad("class_mix weights must be non-negative with a positive sum".into());
        }
        if !(0.0..=1.0).contains(&self.novel_fraction) || !(0.0..=1.0).contains(&self.edge_dropout) {
            return bad("novel_fraction and edge_dropout must lie in [0, 1]".into());
        }
        if self.rgb_noise < 0.0 || self.depth_noise < 0.0 || self.floor_tilt < 0.0 || self.clutter_height < 0.0 {
            return bad("noise, tilt and clutter levels must be non-negative".into());
        }
        if !(self.height_min > 0.0 && self.height_min <= self.height_max && self.height_max < self.background_depth) {
            return bad("heights must satisfy 0 < min <= max < background_depth".into());
        }
        Ok(())
    }

    /// Number of (train, val, test) scenes for an 80/10/10 split.
    pub fn split_sizes(&self) -> (usize, usize, usize) {
        let n = self.scenes;
        let train = (n as f64 * 0.8).round() as usize;
        let val = (n as f64 * 0.1).round() as usize;
        (train, val, n - train - val)
    }
}

const BACKGROUND_RGB: [f64; 3] = [0.46, 0.47, 0.50];
/// RGB offset of depth-dominant parts: darker than the bin but barely.
const DEPTH_DOMINANT_RGB_OFFSET: f64 = -0.02;

struct Placed {
    x0: usize,
    y0: usize,
    w: usize,
    h: usize,
}

fn inside(shape: ShapeKind, u: f64, v: f64) -> bool {
    // (u, v) in [-1, 1]^2 relative to the object box.
    match shape {
        ShapeKind::Rectangle => true,
        ShapeKind::Ellipse => u * u + v * v <= 1.0,
        ShapeKind::Ring => {
            let r = u * u + v * v;
            (0.30..=1.0).contains(&r)
        }
        ShapeKind::Corner => u <= 0.0 || v >= 0.0,
        ShapeKind::Triangle => u.abs() <= (v + 1.0) / 2.0,
    }
}

fn pick_class<'a, R: Rng>(rng: &mut R, pool: &[&'a ClassInfo], mix: &ClassMix) -> &'a ClassInfo {
    let total: f64 = pool.iter().map(|c| mix.weight(c.signature)).sum();
    if total <= 0.0 {
        return pool.choose(rng).expect("non-empty pool");
    }
    let mut u = rng.random::<f64>() * total;
    for c in pool {
        u -= mix.weight(c.signature);
        if u < 0.0 {
            return c;
        }
    }
    pool[pool.len() - 1]
}

/// Per-class weighting so that signatures follow `class_mix` regardless of
/// how many classes share a signature.
fn class_weights(pool: &[&ClassInfo], mix: &ClassMix) -> ClassMix {
    let count = |s| pool.iter().filter(|c| c.signature == s).count().max(1) as f64;
    ClassMix {
        rgb_dominant: mix.rgb_dominant / count(ModalitySignature::RgbDominant),
        depth_dominant: mix.depth_dominant / count(ModalitySignature::DepthDominant),
        balanced: mix.balanced / count(ModalitySignature::Balanced),
        adversarial: mix.adversarial / count(ModalitySignature::Adversarial),
    }
}

/// Regular (non-novel) scene; split is recorded as `train`.
pub fn generate_scene(config: &GeneratorConfig, seed: u64) -> Result<SceneSample> {
    generate_scene_for_split(config, seed, Split::Train)
}

/// Scene whose objects are drawn with `novel_fraction` from novel classes.
pub fn generate_novel_scene(config: &GeneratorConfig, seed: u64) -> Result<SceneSample> {
    generate_scene_for_split(config, seed, Split::TestNovel)
}

pub fn generate_scene_for_split(config: &GeneratorConfig, seed: u64, split: Split) -> Result<SceneSample> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let size = config.image_size;
    let (h, w) = (size, size);
    let catalog = class_catalog();
    let known: Vec<&ClassInfo> = catalog.iter().filter(|c| !c.novel).collect();
    let novel: Vec<&ClassInfo> = catalog.iter().filter(|c| c.novel).collect();
    let known_mix = class_weights(&known, &config.class_mix);
    let novel_mix = class_weights(&novel, &config.class_mix);

    let count = rng.random_range(config.objects_min..=config.objects_max);
    let mut placed: Vec<Placed> = Vec::with_capacity(count);
    let mut classes: Vec<&ClassInfo> = Vec::with_capacity(count);
    for k in 0..count {
        let mut ok = false;
        for _ in 0..config.placement_attempts {
            let ow = rng.random_range(config.object_size_min..=config.object_size_max);
            let oh = rng.random_range(config.object_size_min..=config.object_size_max);
            let x0 = rng.random_range(1..=w - ow - 1);
            let y0 = rng.random_range(1..=h - oh - 1);
            let g = config.min_gap;
            let clear = placed.iter().all(|p| {
                x0 + ow + g <= p.x0 || p.x0 + p.w + g <= x0 || y0 + oh + g <= p.y0 || p.y0 + p.h + g <= y0
            });
            if clear {
                placed.push(Placed { x0, y0, w: ow, h: oh });
                ok = true;
                break;
            }
        }
        if !ok {
            return Err(Error::Degenerate(format!(
                "could not place object {} of {count} after {} attempts",
                k + 1,
                config.placement_attempts
            )));
        }
        let use_novel = split == Split::TestNovel && !novel.is_empty() && rng.random::<f64>() < config.novel_fraction;
        classes.push(if use_novel {
            pick_class(&mut rng, &novel, &novel_mix)
        } else {
            pick_class(&mut rng, &known, &known_mix)
        });
    }

    let rgb_noise = Normal::new(0.0, config.rgb_noise.max(1e-12)).expect("finite");
    let depth_noise = Normal::new(0.0, config.depth_noise.max(1e-12)).expect("finite");
    let mut rgb = vec![0.0f64; h * w * 3];
    for px in rgb.chunks_exact_mut(3) {
        for (c, v) in px.iter_mut().enumerate() {
            *v = BACKGROUND_RGB[c] + if config.rgb_noise > 0.0 { rgb_noise.sample(&mut rng) } else { 0.0 };
        }
    }
    let mut depth: Vec<f64> = (0..h * w)
        .map(|_| config.background_depth + if config.depth_noise > 0.0 { depth_noise.sample(&mut rng) } else { 0.0 })
        .collect();
    let mut invalid = vec![false; h * w];
    if config.floor_tilt > 0.0 {
        let angle = rng.random_range(0.0..std::f64::consts::TAU);
        let slope = rng.random_range(0.0..=config.floor_tilt) / (h as f64 * std::f64::consts::SQRT_2);
        let (cy, cx) = (h as f64 / 2.0, w as f64 / 2.0);
        for (i, d) in depth.iter_mut().enumerate() {
            let (y, x) = ((i / w) as f64 - cy, (i % w) as f64 - cx);
            *d += slope * (x * angle.cos() + y * angle.sin());
        }
    }
    let folds = if config.clutter_max > 0 { rng.random_range(0..=config.clutter_max) } else { 0 };
    for _ in 0..folds {
        let (fy, fx) = (rng.random_range(0.0..h as f64), rng.random_range(0.0..w as f64));
        let sigma = rng.random_range(4.0..10.0f64);
        let amp = rng.random_range(0.5..=1.0) * config.clutter_height;
        for (i, d) in depth.iter_mut().enumerate() {
            let (dy, dx) = ((i / w) as f64 - fy, (i % w) as f64 - fx);
            *d -= amp * (-(dy * dy + dx * dx) / (2.0 * sigma * sigma)).exp();
        }
    }

    let mut instances = Vec::with_capacity(count);
    for (p, class) in placed.iter().zip(&classes) {
        let mut mask = vec![false; h * w];
        for y in p.y0..p.y0 + p.h {
            for x in p.x0..p.x0 + p.w {
                let u = 2.0 * (x as f64 + 0.5 - p.x0 as f64) / p.w as f64 - 1.0;
                let v = 2.0 * (y as f64 + 0.5 - p.y0 as f64) / p.h as f64 - 1.0;
                if inside(class.shape, u, v) {
                    mask[y * w + x] = true;
                }
            }
        }
        let height = rng.random_range(config.height_min..=config.height_max);
        let stripe = rng.random_range(3..6usize);
        let shade = rng.random_range(-0.04..0.04);
        // Adversarial objects lose depth over a random sub-disc.
        let (hx, hy, hr) = (
            rng.random_range(-0.4..0.4),
            rng.random_range(-0.4..0.4),
            rng.random_range(0.55..0.85),
        );
        for y in p.y0..p.y0 + p.h {
            for x in p.x0..p.x0 + p.w {
                let i = y * w + x;
                if !mask[i] {
                    continue;
                }
                let u = 2.0 * (x as f64 + 0.5 - p.x0 as f64) / p.w as f64 - 1.0;
                let v = 2.0 * (y as f64 + 0.5 - p.y0 as f64) / p.h as f64 - 1.0;
                let px = &mut rgb[i * 3..i * 3 + 3];
                match class.signature {
                    ModalitySignature::DepthDominant => {
                        for val in px.iter_mut() {
                            *val += DEPTH_DOMINANT_RGB_OFFSET;
                        }
                    }
                    ModalitySignature::Adversarial => {
                        // translucent: half tint, half what lies behind
                        for (c, val) in px.iter_mut().enumerate() {
                            *val = 0.5 * *val + 0.5 * class.colors[0][c] + shade;
                        }
                    }
                    _ => {
                        let which = ((x - p.x0) / stripe + (y - p.y0) / stripe) % 2;
                        let base = class.colors[which];
                        for (c, val) in px.iter_mut().enumerate() {
                            *val = base[c] + shade + (*val - BACKGROUND_RGB[c]);
                        }
                    }
                }
                let dome = 0.85 + 0.15 * (1.0 - (u * u + v * v).min(1.0)).sqrt();
                match class.signature {
                    ModalitySignature::RgbDominant => {}
                    _ => depth[i] -= height * dome,
                }
                if class.signature == ModalitySignature::Adversarial {
                    let (du, dv) = (u - hx, v - hy);
                    if du * du + dv * dv <= hr * hr {
                        invalid[i] = true;
                    }
                }
            }
        }
        if class.signature != ModalitySignature::RgbDominant && config.edge_dropout > 0.0 {
            for y in p.y0..p.y0 + p.h {
                for x in p.x0..p.x0 + p.w {
                    let i = y * w + x;
                    let edge = mask[i]
                        && (!mask[i - 1] || !mask[i + 1] || !mask[i - w] || !mask[i + w]);
                    if edge && rng.random::<f64>() < config.edge_dropout {
                        invalid[i] = true;
                    }
                }
            }
        }
        let rle = Rle::from_mask(&mask, h, w);
        let bbox = rle.bbox().expect("non-empty mask");
        debug_assert!(rle.area() >= 16);
        instances.push(InstanceGt {
            label: class.id,
            mask: rle,
            bbox,
            signature: class.signature,
        });
    }

    let rgb: Vec<f64> = rgb
        .iter()
        .map(|v| (v.clamp(0.0, 1.0) * 255.0).round() / 255.0)
        .collect();
    let depth_raw: Vec<f32> = depth
        .iter()
        .zip(&invalid)
        .map(|(&d, &bad)| if bad { INVALID_DEPTH } else { d as f32 })
        .collect();
    let raw_map = DepthMap {
        height: h,
        width: w,
        values: depth_raw.iter().map(|&v| f64::from(v)).collect(),
    };
    let depth = match preprocess_depth(&raw_map) {
        Ok(d) => d,
        // A perfectly flat, noiseless bin: everything is background.
        Err(Error::Degenerate(_)) => vec![0.0; h * w],
        Err(e) => return Err(e),
    };
    Ok(SceneSample {
        scene_id: format!("scene_{seed:06}"),
        height: h,
        width: w,
        rgb,
        depth_raw: RawDepth(depth_raw),
        depth,
        instances,
        split,
    })
}

/// Generates the full dataset: an 80/10/10 split of `config.scenes` regular
/// scenes plus `config.novel_scenes` novel-object scenes.
pub fn generate_dataset(config: &GeneratorConfig) -> Result<(DatasetManifest, Vec<SceneSample>)> {
    config.validate()?;
    let (train, val, _) = config.split_sizes();
    let mut scenes = Vec::with_capacity(config.scenes + config.novel_scenes);
    let mut splits: BTreeMap<Split, Vec<SceneEntry>> = Split::ALL.iter().map(|s| (*s, Vec::new())).collect();
    let total = config.scenes + config.novel_scenes;
    for i in 0..total {
        let split = if i < train {
            Split::Train
        } else if i < train + val {
            Split::Val
        } else if i < config.scenes {
            Split::Test
        } else {
            Split::TestNovel
        };
        let seed = config.seed.wrapping_mul(1_000_003).wrapping_add(i as u64);
        let scene = generate_scene_for_split(config, seed, split)?;
        splits.get_mut(&split).expect("all splits").push(SceneEntry {
            scene_id: scene.scene_id.clone(),
            seed,
            checksums: BTreeMap::new(),
        });
        scenes.push(scene);
    }
    let manifest = DatasetManifest {
        version: super::io::MANIFEST_VERSION,
        root: Default::default(),
        seed: config.seed,
        config_hash: config.hash(),
        image_size: config.image_size,
        classes: class_catalog(),
        splits,
        generator: config.clone(),
    };
    Ok((manifest, scenes))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_scene_has_uniform_background() {
        let cfg = GeneratorConfig {
            objects_min: 0,
            objects_max: 0,
            rgb_noise: 0.0,
            depth_noise: 0.0,
            ..Default::default()
        };
        let s = generate_scene(&cfg, 7).unwrap();
        assert!(s.instances.is_empty());
        let first = &s.rgb[0..3];
        assert!(s.rgb.chunks(3).all(|p| p == first));
        assert!(s.depth.iter().all(|&d| d == 0.0));
    }

    #[test]
    fn same_seed_is_bit_identical() {
        let cfg = GeneratorConfig::default();
        assert_eq!(generate_scene(&cfg, 42).unwrap(), generate_scene(&cfg, 42).unwrap());
        assert_ne!(generate_scene(&cfg, 42).unwrap(), generate_scene(&cfg, 43).unwrap());
    }

    #[test]
    fn rejects_tiny_images_and_impossible_packing() {
        let small = GeneratorConfig { image_size: 31, ..Default::default() };
        assert!(matches!(generate_scene(&small, 0), Err(Error::InvalidArgument(_))));
        let crowded = GeneratorConfig {
            image_size: 40,
            objects_min: 6,
            objects_max: 6,
            object_size_min: 16,
            object_size_max: 16,
            placement_attempts: 50,
            ..Default::default()
        };
        assert!(matches!(generate_scene(&crowded, 0), Err(Error::Degenerate(_))));
    }

    #[test]
    fn instances_satisfy_invariants() {
        let cfg = GeneratorConfig::default();
        for seed in 0..20 {
            let s = generate_scene_for_split(&cfg, seed, if seed % 2 == 0 { Split::Train } else { Split::TestNovel }).unwrap();
            assert!(s.rgb.iter().all(|v| (0.0..=1.0).contains(v)));
            assert!(s.depth.iter().all(|v| (0.0..=1.0).contains(v)));
            for inst in &s.instances {
                assert!(inst.mask.area() >= 16);
                assert_eq!(inst.mask.bbox(), Some(inst.bbox));
                assert!(inst.bbox.x_min < inst.bbox.x_max && inst.bbox.y_min < inst.bbox.y_max);
                assert!(inst.bbox.fits(s.height, s.width));
                if s.split != Split::TestNovel {
                    assert!(inst.label < 6);
                }
            }
            for (i, a) in s.instances.iter().enumerate() {
                for b in &s.instances[i + 1..] {
                    assert_eq!(a.mask.intersection_area(&b.mask), 0);
                }
            }
        }
    }

    #[test]
    fn config_toml_roundtrip() {
        let cfg = GeneratorConfig::default();
        assert_eq!(GeneratorConfig::from_toml(&cfg.to_toml()).unwrap(), cfg);
        assert!(GeneratorConfig::from_toml("image_size = 16").is_err());
        assert!(GeneratorConfig::from_toml("bogus = 1").is_err());
    }

    #[test]
    fn split_sizes_follow_80_10_10() {
        let cfg = GeneratorConfig::default();
        assert_eq!(cfg.split_sizes(), (160, 20, 20));
    }
}
