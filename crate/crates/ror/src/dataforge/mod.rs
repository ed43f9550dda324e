//! MiniComCOCO generator: a three-step scene pipeline producing
//! (composite image, ground-truth background, object mask, referring
//! expressions with role annotations) plus the manifest and loading
//! helpers the trainer consumes.
//!
//! Step 1 matches an object against candidate backgrounds by token
//! Jaccard similarity, step 2 rejection-samples a placement under margin,
//! overlap, and size-class constraints, and step 3 harmonizes the pasted
//! object's luminance and describes it relative to the final scene.

pub mod describe;
pub mod scene;
pub mod sprites;

use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::Tensor;
use crate::textproc::{RoleLabel, Vocabulary};
use crate::{Result, RorError};
pub use describe::{
    describe as describe_object, expression_corpus, expression_is_unique, token_inventory,
    Expression,
};
pub use scene::{
    harmonize, jaccard, match_scenes, place_object, size_class, Scene, SceneObject, SizeClass,
};
pub use sprites::{rasterize, Sprite, CATEGORIES, CLUSTERS, COLORS, TEXTURES};

/// Dataset split names.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Val, Split::Test];

    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

impl std::str::FromStr for Split {
    type Err = RorError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            other => Err(RorError::InvalidInput(format!("unknown split '{other}'"))),
        }
    }
}

/// Generator configuration.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct GenConfig {
    pub n_pairs: usize,
    pub side: usize,
    pub seed: u64,
    /// Candidate backgrounds synthesized per pair.
    pub pool_size: usize,
    /// Backgrounds kept after similarity ranking.
    pub k: usize,
    pub max_distractors: usize,
    pub max_expressions: usize,
}

impl Default for GenConfig {
    fn default() -> Self {
        GenConfig {
            n_pairs: 64,
            side: 64,
            seed: 7,
            pool_size: 6,
            k: 5,
            max_distractors: 3,
            max_expressions: 3,
        }
    }
}

impl GenConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_pairs == 0 || self.side < 32 || self.pool_size == 0 || self.k == 0 {
            return Err(RorError::Config(format!(
                "degenerate generator config: {self:?}"
            )));
        }
        if self.max_expressions == 0 {
            return Err(RorError::Config("max_expressions must be ≥ 1".into()));
        }
        Ok(())
    }
}

/// One expression annotation, serialized as a JSON line.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AnnotationRecord {
    pub pair: usize,
    pub split: Split,
    pub tokens: Vec<String>,
    pub roles: Vec<RoleLabel>,
    pub size_class: SizeClass,
}

/// Per-pair manifest entry.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PairEntry {
    pub id: usize,
    pub split: Split,
    pub composite: String,
    pub gt: String,
    pub mask: String,
    pub expressions: usize,
    pub size_class: SizeClass,
}

/// Dataset root description.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub seed: u64,
    pub side: usize,
    pub train: usize,
    pub val: usize,
    pub test: usize,
    pub small: usize,
    pub medium: usize,
    pub large: usize,
    pub pairs: Vec<PairEntry>,
}

impl DatasetManifest {
    pub fn save(&self, root: &Path) -> Result<()> {
        let path = root.join("manifest.json");
        let body = serde_json::to_string_pretty(self)?;
        fs::write(&path, body).map_err(|e| RorError::io(path.display().to_string(), e))
    }

    pub fn load(root: &Path) -> Result<Self> {
        let path = root.join("manifest.json");
        let body =
            fs::read_to_string(&path).map_err(|e| RorError::io(path.display().to_string(), e))?;
        Ok(serde_json::from_str(&body)?)
    }

    pub fn pairs_in(&self, split: Split) -> Vec<&PairEntry> {
        self.pairs.iter().filter(|p| p.split == split).collect()
    }
}

/// Deterministic per-pair RNG stream, independent of generation order.
fn pair_rng(seed: u64, pair: usize) -> ChaCha8Rng {
    // splitmix64 over (seed, index) so neighboring pairs decorrelate
    let mut z = seed ^ (pair as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    ChaCha8Rng::seed_from_u64(z ^ (z >> 31))
}

/// Size-class quota for pair `j`: 11% small, 53% medium, 36% large inside
/// every run of 100 pairs. The stride permutation (37 is coprime with 100)
/// interleaves the classes so even tiny datasets draw a mix instead of a
/// single-class prefix.
pub fn quota_class(j: usize) -> SizeClass {
    match (j % 100) * 37 % 100 {
        m if m < 11 => SizeClass::Small,
        m if m < 64 => SizeClass::Medium,
        _ => SizeClass::Large,
    }
}

/// Index-based split assignment: first 85% train, next 7.5% val, rest
/// test (disjoint by construction).
pub fn split_of(j: usize, n: usize) -> Split {
    let train_end = (n as f64 * 0.85).round() as usize;
    let val_end = train_end + (n as f64 * 0.075).round() as usize;
    if j < train_end {
        Split::Train
    } else if j < val_end {
        Split::Val
    } else {
        Split::Test
    }
}

/// One fully assembled pair, before quantization. The chosen background
/// and placed target object are kept so referential invariants can be
/// audited after the fact.
pub struct BuiltPair {
    pub composite: Vec<f64>,
    pub gt: Vec<f64>,
    pub mask: Vec<bool>,
    pub expressions: Vec<Expression>,
    pub size_class: SizeClass,
    pub target: SceneObject,
    pub scene: Scene,
}

/// Assembles pair `j`: object choice, background matching, placement,
/// harmonization, and description. Deterministic in `(cfg.seed, j)`.
pub fn build_pair(cfg: &GenConfig, j: usize) -> Result<BuiltPair> {
    let mut rng = pair_rng(cfg.seed, j);
    let quota = quota_class(j);

    for round in 0..4u32 {
        let category = CATEGORIES[rng.gen_range(0..CATEGORIES.len())].0;
        let color = COLORS[rng.gen_range(0..COLORS.len())].0;
        let texture = if rng.gen::<f64>() < 0.25 {
            Some(TEXTURES[rng.gen_range(0..TEXTURES.len())])
        } else {
            None
        };
        let cluster = sprites::cluster_of(category).expect("category table is total");

        let pool: Vec<Scene> = (0..cfg.pool_size)
            .map(|i| {
                Scene::generate(
                    i,
                    cluster,
                    cfg.side,
                    cfg.max_distractors,
                    (category, color),
                    &mut rng,
                )
            })
            .collect::<Result<_>>()?;
        let target_obj = SceneObject {
            category: category.to_owned(),
            color: color.to_owned(),
            texture: texture.map(str::to_owned),
            x0: 0,
            y0: 0,
            sprite_size: 0,
            mask: Vec::new(),
        };
        let (candidates, _short) = match_scenes(&target_obj.tokens(), &pool, cfg.k);

        for scene in candidates {
            let Some((sprite, x0, y0)) =
                place_object(category, color, texture, quota, scene, &mut rng)?
            else {
                continue;
            };
            let mask = scene::canvas_mask(&sprite, cfg.side, x0, y0);
            let gt = scene.rgb.clone();
            let mut composite = gt.clone();
            scene::paste_sprite(&mut composite, cfg.side, &sprite, x0, y0);
            harmonize(&mut composite, cfg.side, &mask);

            let placed = SceneObject {
                category: category.to_owned(),
                color: color.to_owned(),
                texture: texture.map(str::to_owned),
                x0,
                y0,
                sprite_size: sprite.size,
                mask: mask.clone(),
            };
            let expressions = describe_object(&placed, scene, cfg.max_expressions, &mut rng);

            let area = placed.area();
            let class = size_class(area, cfg.side);
            debug_assert_eq!(class, quota);
            let n = cfg.side * cfg.side;
            debug_assert!(mask.iter().any(|&m| m), "mask must be nonempty");
            debug_assert!((0..3 * n).all(|k| mask[k % n] || composite[k] == gt[k]));
            return Ok(BuiltPair {
                composite,
                gt,
                mask,
                expressions,
                size_class: class,
                target: placed,
                scene: scene.clone(),
            });
        }
        // every candidate background rejected the placement; reroll the
        // object with fresh randomness
        let _ = round;
    }
    Err(RorError::Dataset(format!(
        "pair {j}: no placement found after 4 object rerolls (canvas {} px, quota {})",
        cfg.side,
        quota.as_str()
    )))
}

fn quantize(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Writes a channel-major `[0,1]` RGB buffer as an 8-bit PNG.
pub fn write_rgb_png(path: &Path, rgb: &[f64], side: usize) -> Result<()> {
    let n = side * side;
    let mut bytes = Vec::with_capacity(3 * n);
    for i in 0..n {
        for ch in 0..3 {
            bytes.push(quantize(rgb[ch * n + i]));
        }
    }
    let img = image::RgbImage::from_raw(side as u32, side as u32, bytes)
        .expect("buffer length matches dimensions");
    img.save(path)?;
    Ok(())
}

/// Writes a boolean mask as a 0/255 grayscale PNG.
pub fn write_mask_png(path: &Path, mask: &[bool], side: usize) -> Result<()> {
    let bytes: Vec<u8> = mask.iter().map(|&m| if m { 255 } else { 0 }).collect();
    let img = image::GrayImage::from_raw(side as u32, side as u32, bytes)
        .expect("buffer length matches dimensions");
    img.save(path)?;
    Ok(())
}

/// Generates the full dataset under `out`: per-pair PNGs, an
/// `annotations.jsonl` with one record per expression, a `vocab.txt`,
/// and a `manifest.json`. Deterministic in the seed.
pub fn generate_dataset(cfg: &GenConfig, out: &Path) -> Result<DatasetManifest> {
    cfg.validate()?;
    fs::create_dir_all(out).map_err(|e| RorError::io(out.display().to_string(), e))?;

    let mut pairs = Vec::with_capacity(cfg.n_pairs);
    let mut annotations = String::new();
    let mut tallies = [0usize; 3];
    let mut split_counts = [0usize; 3];

    for j in 0..cfg.n_pairs {
        let built = build_pair(cfg, j)?;
        let split = split_of(j, cfg.n_pairs);
        let composite = format!("composite_{j:04}.png");
        let gt = format!("gt_{j:04}.png");
        let mask = format!("mask_{j:04}.png");
        write_rgb_png(&out.join(&composite), &built.composite, cfg.side)?;
        write_rgb_png(&out.join(&gt), &built.gt, cfg.side)?;
        write_mask_png(&out.join(&mask), &built.mask, cfg.side)?;

        for e in &built.expressions {
            let rec = AnnotationRecord {
                pair: j,
                split,
                tokens: e.tokens.clone(),
                roles: e.roles.clone(),
                size_class: built.size_class,
            };
            annotations.push_str(&serde_json::to_string(&rec)?);
            annotations.push('\n');
        }
        match built.size_class {
            SizeClass::Small => tallies[0] += 1,
            SizeClass::Medium => tallies[1] += 1,
            SizeClass::Large => tallies[2] += 1,
        }
        match split {
            Split::Train => split_counts[0] += 1,
            Split::Val => split_counts[1] += 1,
            Split::Test => split_counts[2] += 1,
        }
        pairs.push(PairEntry {
            id: j,
            split,
            composite,
            gt,
            mask,
            expressions: built.expressions.len(),
            size_class: built.size_class,
        });
    }

    let ann_path = out.join("annotations.jsonl");
    fs::write(&ann_path, annotations)
        .map_err(|e| RorError::io(ann_path.display().to_string(), e))?;

    let vocab = Vocabulary::from_tokens(token_inventory());
    vocab.save(&out.join("vocab.txt"))?;

    let manifest = DatasetManifest {
        seed: cfg.seed,
        side: cfg.side,
        train: split_counts[0],
        val: split_counts[1],
        test: split_counts[2],
        small: tallies[0],
        medium: tallies[1],
        large: tallies[2],
        pairs,
    };
    manifest.save(out)?;
    Ok(manifest)
}

/// A pair loaded back from disk as tensors.
pub struct LoadedPair {
    pub composite: Tensor,
    pub gt: Tensor,
    /// Binary mask `(1, side, side)` with values exactly 0 or 1.
    pub mask: Tensor,
}

fn png_path(root: &Path, name: &str) -> PathBuf {
    root.join(name)
}

fn load_rgb(path: &Path) -> Result<Tensor> {
    let img = image::open(path)?.to_rgb8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    let n = w * h;
    let mut data = vec![0.0; 3 * n];
    for (i, px) in img.pixels().enumerate() {
        for ch in 0..3 {
            data[ch * n + i] = px.0[ch] as f64 / 255.0;
        }
    }
    Ok(Tensor::from_vec(&[3, h, w], data))
}

/// Reads one pair's three images.
pub fn load_pair(root: &Path, entry: &PairEntry) -> Result<LoadedPair> {
    let composite = load_rgb(&png_path(root, &entry.composite))?;
    let gt = load_rgb(&png_path(root, &entry.gt))?;
    let m = image::open(png_path(root, &entry.mask))?.to_luma8();
    let (w, h) = (m.width() as usize, m.height() as usize);
    let data: Vec<f64> = m.pixels().map(|p| f64::from(p.0[0] > 127)).collect();
    Ok(LoadedPair {
        composite,
        gt,
        mask: Tensor::from_vec(&[1, h, w], data),
    })
}

/// Reads every annotation record.
pub fn load_annotations(root: &Path) -> Result<Vec<AnnotationRecord>> {
    let path = root.join("annotations.jsonl");
    let body =
        fs::read_to_string(&path).map_err(|e| RorError::io(path.display().to_string(), e))?;
    let mut out = Vec::new();
    for line in body.lines() {
        if !line.trim().is_empty() {
            out.push(serde_json::from_str(line)?);
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quota_layout_hits_the_target_proportions_exactly_per_century() {
        let mut counts = [0usize; 3];
        for j in 0..500 {
            match quota_class(j) {
                SizeClass::Small => counts[0] += 1,
                SizeClass::Medium => counts[1] += 1,
                SizeClass::Large => counts[2] += 1,
            }
        }
        assert_eq!(counts, [55, 265, 180]); // 11% / 53% / 36% of 500
    }

    #[test]
    fn splits_are_disjoint_and_sized_85_75_75() {
        let n = 400;
        let (mut tr, mut va, mut te) = (0, 0, 0);
        for j in 0..n {
            match split_of(j, n) {
                Split::Train => tr += 1,
                Split::Val => va += 1,
                Split::Test => te += 1,
            }
        }
        assert_eq!(tr, 340);
        assert_eq!(va, 30);
        assert_eq!(te, 30);
        // contiguous index ranges are disjoint by construction; check the
        // boundaries behave
        assert_eq!(split_of(0, n), Split::Train);
        assert_eq!(split_of(339, n), Split::Train);
        assert_eq!(split_of(340, n), Split::Val);
        assert_eq!(split_of(370, n), Split::Test);
    }

    #[test]
    fn built_pairs_satisfy_the_scene_invariants() {
        let cfg = GenConfig {
            n_pairs: 12,
            ..GenConfig::default()
        };
        for j in 0..cfg.n_pairs {
            let built = build_pair(&cfg, j).unwrap();
            let n = cfg.side * cfg.side;
            assert!(built.mask.iter().any(|&m| m), "pair {j}: empty mask");
            for k in 0..3 * n {
                if !built.mask[k % n] {
                    assert_eq!(
                        built.composite[k], built.gt[k],
                        "pair {j}: composite differs from gt outside the mask"
                    );
                }
            }
            assert!(!built.expressions.is_empty());
            assert_eq!(built.size_class, quota_class(j), "pair {j}: quota missed");
            assert!(built.composite.iter().all(|&v| (0.0..=1.0).contains(&v)));
        }
    }

    #[test]
    fn build_pair_is_deterministic_and_order_independent() {
        let cfg = GenConfig::default();
        let a = build_pair(&cfg, 3).unwrap();
        let b = build_pair(&cfg, 3).unwrap();
        assert_eq!(a.composite, b.composite);
        assert_eq!(a.mask, b.mask);
        assert_eq!(a.expressions, b.expressions);
        // a different index gives a different pair
        let c = build_pair(&cfg, 4).unwrap();
        assert_ne!(a.composite, c.composite);
    }

    #[test]
    fn dataset_round_trips_through_disk_bitwise() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = GenConfig {
            n_pairs: 8,
            seed: 21,
            ..GenConfig::default()
        };
        let manifest = generate_dataset(&cfg, dir.path()).unwrap();
        assert_eq!(manifest.pairs.len(), 8);
        assert_eq!(manifest.train + manifest.val + manifest.test, 8);
        assert_eq!(
            manifest.small + manifest.medium + manifest.large,
            8,
            "size tallies must cover every pair"
        );

        // reload: quantized exterior equality must hold bitwise
        for entry in &manifest.pairs {
            let pair = load_pair(dir.path(), entry).unwrap();
            let n = cfg.side * cfg.side;
            let (c, g, m) = (pair.composite.data(), pair.gt.data(), pair.mask.data());
            for k in 0..3 * n {
                if m[k % n] == 0.0 {
                    assert_eq!(c[k], g[k], "{}: exterior mismatch", entry.composite);
                }
            }
            assert!(m.iter().any(|&v| v == 1.0));
        }

        let anns = load_annotations(dir.path()).unwrap();
        assert!(!anns.is_empty());
        let vocab = Vocabulary::load(&dir.path().join("vocab.txt")).unwrap();
        for rec in &anns {
            assert_eq!(rec.tokens.len(), rec.roles.len());
            for t in &rec.tokens {
                assert_ne!(vocab.id(t), crate::textproc::UNK_ID, "'{t}' not in vocab");
            }
        }

        // determinism: regenerate into a second directory, compare bytes
        let dir2 = tempfile::tempdir().unwrap();
        generate_dataset(&cfg, dir2.path()).unwrap();
        for entry in &manifest.pairs {
            for name in [&entry.composite, &entry.gt, &entry.mask] {
                let a = std::fs::read(dir.path().join(name)).unwrap();
                let b = std::fs::read(dir2.path().join(name)).unwrap();
                assert_eq!(a, b, "{name} differs between identical seeds");
            }
        }
        let a = std::fs::read(dir.path().join("annotations.jsonl")).unwrap();
        let b = std::fs::read(dir2.path().join("annotations.jsonl")).unwrap();
        assert_eq!(a, b);
    }
}
