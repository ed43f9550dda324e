//! Scene assembly: background synthesis, token-similarity scene matching,
//! rejection-sampled object placement, luminance harmonization, and size
//! classification.

use std::collections::HashSet;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::sprites::{color_rgb, rasterize, Sprite};
use crate::{Result, RorError};

/// Minimum gap between a placed sprite and the canvas border, in pixels.
pub const PLACEMENT_MARGIN: usize = 2;
/// Placement attempts before the caller moves to the next background.
pub const PLACEMENT_ATTEMPTS: usize = 100;
/// Ring width (dilation radius) for harmonization statistics, in pixels.
pub const HARMONIZE_RING: usize = 4;
/// Reference canvas side for the size-class thresholds.
pub const REFERENCE_SIDE: usize = 480;

/// MSCOCO-style size classes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SizeClass {
    Small,
    Medium,
    Large,
}

impl SizeClass {
    pub const ALL: [SizeClass; 3] = [SizeClass::Small, SizeClass::Medium, SizeClass::Large];

    pub fn as_str(self) -> &'static str {
        match self {
            SizeClass::Small => "small",
            SizeClass::Medium => "medium",
            SizeClass::Large => "large",
        }
    }
}

/// Classifies a mask area measured on a `side`-pixel canvas. Thresholds
/// are 32² and 96² at the 480-pixel reference and scale with canvas area;
/// the small/medium boundary is strict (area exactly 32² is medium).
pub fn size_class(area: usize, side: usize) -> SizeClass {
    let scale = (side as f64 / REFERENCE_SIDE as f64).powi(2);
    let a = area as f64;
    if a < 1024.0 * scale {
        SizeClass::Small
    } else if a <= 9216.0 * scale {
        SizeClass::Medium
    } else {
        SizeClass::Large
    }
}

/// Jaccard similarity of two token sets; the empty/empty case is 0.
pub fn jaccard(a: &HashSet<String>, b: &HashSet<String>) -> f64 {
    let inter = a.intersection(b).count();
    let union = a.len() + b.len() - inter;
    if union == 0 {
        0.0
    } else {
        inter as f64 / union as f64
    }
}

/// One object already standing in a scene (or the removal target once
/// placed).
#[derive(Debug, Clone)]
pub struct SceneObject {
    pub category: String,
    pub color: String,
    pub texture: Option<String>,
    /// Top-left corner of the sprite box on the canvas.
    pub x0: usize,
    pub y0: usize,
    pub sprite_size: usize,
    /// Canvas-resolution mask.
    pub mask: Vec<bool>,
}

impl SceneObject {
    /// Expression tokens this object would be described with; drives the
    /// Jaccard matching.
    pub fn tokens(&self) -> HashSet<String> {
        let mut t: HashSet<String> = self
            .category
            .split_whitespace()
            .chain(self.color.split_whitespace())
            .map(str::to_owned)
            .collect();
        if let Some(tx) = &self.texture {
            t.insert(tx.clone());
        }
        t
    }

    pub fn center(&self) -> (f64, f64) {
        (
            self.x0 as f64 + self.sprite_size as f64 / 2.0,
            self.y0 as f64 + self.sprite_size as f64 / 2.0,
        )
    }

    pub fn area(&self) -> usize {
        self.mask.iter().filter(|&&m| m).count()
    }
}

/// A candidate background: RGB canvas plus the objects already in it.
#[derive(Debug, Clone)]
pub struct Scene {
    pub id: usize,
    pub cluster: usize,
    pub side: usize,
    /// Channel-major RGB in `[0, 1]`.
    pub rgb: Vec<f64>,
    pub objects: Vec<SceneObject>,
}

impl Scene {
    /// Union of existing object masks.
    pub fn occupancy(&self) -> Vec<bool> {
        let mut occ = vec![false; self.side * self.side];
        for o in &self.objects {
            for (i, &m) in o.mask.iter().enumerate() {
                occ[i] |= m;
            }
        }
        occ
    }

    /// Highest Jaccard similarity between `tokens` and any object here;
    /// an empty scene scores 0.
    pub fn max_similarity(&self, tokens: &HashSet<String>) -> f64 {
        self.objects
            .iter()
            .map(|o| jaccard(tokens, &o.tokens()))
            .fold(0.0, f64::max)
    }

    /// Synthesizes a background: a soft two-color gradient plus a few
    /// distractor objects. `forbidden` is a (category, color) pair no
    /// distractor may carry.
    pub fn generate(
        id: usize,
        cluster: usize,
        side: usize,
        max_distractors: usize,
        forbidden: (&str, &str),
        rng: &mut ChaCha8Rng,
    ) -> Result<Scene> {
        let top: Vec<f64> = (0..3).map(|_| 0.25 + 0.5 * rng.gen::<f64>()).collect();
        let bot: Vec<f64> = (0..3).map(|_| 0.25 + 0.5 * rng.gen::<f64>()).collect();
        let mut rgb = vec![0.0; 3 * side * side];
        for y in 0..side {
            let t = y as f64 / (side - 1).max(1) as f64;
            for x in 0..side {
                // cheap deterministic per-pixel dither
                let n = (((x * 31 + y * 67 + id * 13) % 17) as f64 / 16.0 - 0.5) * 0.04;
                for ch in 0..3 {
                    let v = top[ch] * (1.0 - t) + bot[ch] * t + n;
                    rgb[ch * side * side + y * side + x] = v.clamp(0.0, 1.0);
                }
            }
        }
        let mut scene = Scene {
            id,
            cluster,
            side,
            rgb,
            objects: Vec::new(),
        };
        let n = rng.gen_range(0..=max_distractors);
        for _ in 0..n {
            let (category, color) = loop {
                let cat = super::sprites::CATEGORIES
                    [rng.gen_range(0..super::sprites::CATEGORIES.len())]
                .0;
                let col = super::sprites::COLORS[rng.gen_range(0..super::sprites::COLORS.len())].0;
                if (cat, col) != forbidden {
                    break (cat, col);
                }
            };
            let texture = if rng.gen::<f64>() < 0.3 {
                Some(super::sprites::TEXTURES[rng.gen_range(0..3)].to_owned())
            } else {
                None
            };
            let size = rng.gen_range(6..=(side / 4).max(7));
            let sprite = rasterize(category, size, color_rgb(color).unwrap(), texture.as_deref())?;
            if let Some((x0, y0)) = find_position(&sprite, &scene, rng) {
                paste_sprite(&mut scene.rgb, side, &sprite, x0, y0);
                scene.objects.push(SceneObject {
                    category: category.to_owned(),
                    color: color.to_owned(),
                    texture,
                    x0,
                    y0,
                    sprite_size: size,
                    mask: canvas_mask(&sprite, side, x0, y0),
                });
            }
        }
        Ok(scene)
    }
}

/// The `k` pool scenes least similar to the object's tokens (max-Jaccard
/// over each scene's objects), ties broken by scene id. A pool smaller
/// than `k` is returned whole, flagged by the second value.
pub fn match_scenes<'a>(
    tokens: &HashSet<String>,
    pool: &'a [Scene],
    k: usize,
) -> (Vec<&'a Scene>, bool) {
    let mut ranked: Vec<(&Scene, f64)> =
        pool.iter().map(|s| (s, s.max_similarity(tokens))).collect();
    ranked.sort_by(|a, b| {
        a.1.partial_cmp(&b.1)
            .unwrap()
            .then_with(|| a.0.id.cmp(&b.0.id))
    });
    let short = ranked.len() < k;
    (
        ranked.into_iter().take(k).map(|(s, _)| s).collect(),
        short,
    )
}

/// Projects a sprite's alpha onto canvas coordinates.
pub fn canvas_mask(sprite: &Sprite, side: usize, x0: usize, y0: usize) -> Vec<bool> {
    let mut m = vec![false; side * side];
    for sy in 0..sprite.size {
        for sx in 0..sprite.size {
            if sprite.alpha[sy * sprite.size + sx] {
                m[(y0 + sy) * side + (x0 + sx)] = true;
            }
        }
    }
    m
}

/// Copies a sprite's colored pixels onto the canvas.
pub fn paste_sprite(rgb: &mut [f64], side: usize, sprite: &Sprite, x0: usize, y0: usize) {
    let s = sprite.size;
    for sy in 0..s {
        for sx in 0..s {
            if sprite.alpha[sy * s + sx] {
                for ch in 0..3 {
                    rgb[ch * side * side + (y0 + sy) * side + (x0 + sx)] =
                        sprite.rgb[ch * s * s + sy * s + sx];
                }
            }
        }
    }
}

fn find_position(sprite: &Sprite, scene: &Scene, rng: &mut ChaCha8Rng) -> Option<(usize, usize)> {
    let side = scene.side;
    let s = sprite.size;
    if side < s + 2 * PLACEMENT_MARGIN {
        return None;
    }
    let occ = scene.occupancy();
    let hi = side - s - PLACEMENT_MARGIN;
    'attempt: for _ in 0..PLACEMENT_ATTEMPTS {
        let x0 = rng.gen_range(PLACEMENT_MARGIN..=hi);
        let y0 = rng.gen_range(PLACEMENT_MARGIN..=hi);
        for sy in 0..s {
            for sx in 0..s {
                if sprite.alpha[sy * s + sx] && occ[(y0 + sy) * side + (x0 + sx)] {
                    continue 'attempt;
                }
            }
        }
        return Some((x0, y0));
    }
    None
}

/// Sprite sizes whose rasterized area lands in `class` on a `side` canvas.
pub fn sizes_for_class(category: &str, class: SizeClass, side: usize) -> Result<Vec<usize>> {
    let s_max = (side * 7 / 16).max(8);
    let mut fits = Vec::new();
    for s in 3..=s_max {
        let sp = rasterize(category, s, [0.5; 3], None)?;
        if size_class(sp.area(), side) == class {
            fits.push(s);
        }
    }
    Ok(fits)
}

/// Rejection-samples a sprite scale and position for `category` so the
/// result (a) keeps a 2-pixel margin, (b) overlaps no existing object,
/// and (c) lands in the requested size class. `None` means the scene was
/// rejected and the caller should try the next candidate background.
pub fn place_object(
    category: &str,
    color: &str,
    texture: Option<&str>,
    class: SizeClass,
    scene: &Scene,
    rng: &mut ChaCha8Rng,
) -> Result<Option<(Sprite, usize, usize)>> {
    let rgbc = color_rgb(color)
        .ok_or_else(|| RorError::InvalidInput(format!("unknown color '{color}'")))?;
    let fits = sizes_for_class(category, class, scene.side)?;
    if fits.is_empty() {
        return Err(RorError::Dataset(format!(
            "no sprite size puts '{category}' in the {} class on a {}-px canvas",
            class.as_str(),
            scene.side
        )));
    }
    for _ in 0..4 {
        let s = fits[rng.gen_range(0..fits.len())];
        let sprite = rasterize(category, s, rgbc, texture)?;
        debug_assert_eq!(size_class(sprite.area(), scene.side), class);
        if let Some((x0, y0)) = find_position(&sprite, scene, rng) {
            return Ok(Some((sprite, x0, y0)));
        }
    }
    Ok(None)
}

fn luma(r: f64, g: f64, b: f64) -> f64 {
    0.299 * r + 0.587 * g + 0.114 * b
}

/// Ring of pixels within `HARMONIZE_RING` Chebyshev distance of the mask,
/// excluding the mask itself.
pub fn dilation_ring(mask: &[bool], side: usize) -> Vec<bool> {
    let r = HARMONIZE_RING as i64;
    let mut ring = vec![false; side * side];
    for y in 0..side as i64 {
        for x in 0..side as i64 {
            if mask[(y * side as i64 + x) as usize] {
                continue;
            }
            'scan: for dy in -r..=r {
                for dx in -r..=r {
                    let (ny, nx) = (y + dy, x + dx);
                    if ny >= 0
                        && nx >= 0
                        && ny < side as i64
                        && nx < side as i64
                        && mask[(ny * side as i64 + nx) as usize]
                    {
                        ring[(y * side as i64 + x) as usize] = true;
                        break 'scan;
                    }
                }
            }
        }
    }
    ring
}

/// Affinely matches the foreground's luminance statistics to the ring
/// around it: every masked pixel becomes `a·c + b` per channel with
/// `a = σ_ring/σ_fg` and `b = μ_ring − a·μ_fg`, clipped to `[0, 1]`.
/// Pixels outside the mask are untouched (bitwise).
pub fn harmonize(rgb: &mut [f64], side: usize, mask: &[bool]) {
    let n = side * side;
    let stats = |sel: &[bool]| -> Option<(f64, f64)> {
        let mut vals = Vec::new();
        for (i, &m) in sel.iter().enumerate() {
            if m {
                vals.push(luma(rgb[i], rgb[n + i], rgb[2 * n + i]));
            }
        }
        if vals.is_empty() {
            return None;
        }
        let mu = vals.iter().sum::<f64>() / vals.len() as f64;
        let var = vals.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / vals.len() as f64;
        Some((mu, var.sqrt()))
    };
    let ring = dilation_ring(mask, side);
    let (Some((mu_fg, sd_fg)), Some((mu_bg, sd_bg))) = (stats(mask), stats(&ring)) else {
        return;
    };
    let a = if sd_fg < 1e-6 { 1.0 } else { sd_bg / sd_fg };
    let b = mu_bg - a * mu_fg;
    for (i, &m) in mask.iter().enumerate() {
        if m {
            for ch in 0..3 {
                let v = a * rgb[ch * n + i] + b;
                rgb[ch * n + i] = v.clamp(0.0, 1.0);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    fn toks(words: &[&str]) -> HashSet<String> {
        words.iter().map(|s| s.to_string()).collect()
    }

    #[test]
    fn jaccard_matches_hand_counts() {
        assert_eq!(jaccard(&toks(&["red", "car"]), &toks(&["red", "car"])), 1.0);
        assert_eq!(jaccard(&toks(&["red"]), &toks(&["blue"])), 0.0);
        let j = jaccard(&toks(&["red", "car"]), &toks(&["red", "bus"]));
        assert!((j - 1.0 / 3.0).abs() < 1e-12, "got {j}");
        assert_eq!(jaccard(&toks(&[]), &toks(&[])), 0.0);
        assert_eq!(jaccard(&toks(&[]), &toks(&["x"])), 0.0);
    }

    fn scene_with_tokens(id: usize, sets: &[&[&str]]) -> Scene {
        let objects = sets
            .iter()
            .map(|words| SceneObject {
                category: words.join(" "),
                color: String::new(),
                texture: None,
                x0: 0,
                y0: 0,
                sprite_size: 1,
                mask: vec![false; 16],
            })
            .collect();
        Scene {
            id,
            cluster: 0,
            side: 4,
            rgb: vec![0.0; 48],
            objects,
        }
    }

    #[test]
    fn match_scenes_agrees_with_brute_force_ranking() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let words = ["red", "blue", "car", "bus", "dog", "ball", "tree", "cup"];
        for _ in 0..50 {
            let pool: Vec<Scene> = (0..rng.gen_range(1..=12))
                .map(|id| {
                    let n_obj = rng.gen_range(0..=3);
                    let sets: Vec<Vec<&str>> = (0..n_obj)
                        .map(|_| {
                            let n = rng.gen_range(1..=3);
                            (0..n).map(|_| words[rng.gen_range(0..words.len())]).collect()
                        })
                        .collect();
                    let refs: Vec<&[&str]> = sets.iter().map(|v| v.as_slice()).collect();
                    scene_with_tokens(id, &refs)
                })
                .collect();
            let target = toks(&["red", "car"]);
            let (got, short) = match_scenes(&target, &pool, 5);

            let mut oracle: Vec<(f64, usize)> = pool
                .iter()
                .map(|s| (s.max_similarity(&target), s.id))
                .collect();
            oracle.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap().then(a.1.cmp(&b.1)));
            let want: Vec<usize> = oracle.iter().take(5).map(|&(_, id)| id).collect();
            let got_ids: Vec<usize> = got.iter().map(|s| s.id).collect();
            assert_eq!(got_ids, want);
            assert_eq!(short, pool.len() < 5);
        }
    }

    #[test]
    fn match_scenes_handles_degenerate_pools() {
        let pool = vec![
            scene_with_tokens(0, &[&["red", "car"]]),
            scene_with_tokens(1, &[&["blue", "sky"]]),
            scene_with_tokens(2, &[]),
        ];
        let (got, short) = match_scenes(&toks(&["red", "car"]), &pool, 5);
        assert_eq!(got.len(), 3);
        assert!(short, "undersized pool must be flagged");
        // the empty scene and the disjoint scene tie at 0; lower id first
        assert_eq!(got[0].id, 1);
        assert_eq!(got[1].id, 2);
        assert_eq!(got[2].id, 0);

        let (one, _) = match_scenes(&toks(&["red"]), &pool[1..2], 1);
        assert_eq!(one[0].id, 1);
    }

    #[test]
    fn size_class_thresholds_follow_the_reference_canvas() {
        assert_eq!(size_class(900, 480), SizeClass::Small);
        assert_eq!(size_class(1024, 480), SizeClass::Medium, "boundary is strict <");
        assert_eq!(size_class(9216, 480), SizeClass::Medium);
        assert_eq!(size_class(10_000, 480), SizeClass::Large);
        // 64-px canvas scales areas by (64/480)^2
        assert_eq!(size_class(18, 64), SizeClass::Small);
        assert_eq!(size_class(19, 64), SizeClass::Medium);
        assert_eq!(size_class(163, 64), SizeClass::Medium);
        assert_eq!(size_class(164, 64), SizeClass::Large);
    }

    #[test]
    fn every_category_fits_every_class_on_the_desk_canvas() {
        for &(cat, _) in super::super::sprites::CATEGORIES {
            for class in SizeClass::ALL {
                let fits = sizes_for_class(cat, class, 64).unwrap();
                assert!(
                    !fits.is_empty(),
                    "{cat} cannot be rendered {} on a 64-px canvas",
                    class.as_str()
                );
            }
        }
    }

    #[test]
    fn placement_respects_margin_overlap_and_rejection() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let empty = Scene {
            id: 0,
            cluster: 0,
            side: 64,
            rgb: vec![0.0; 3 * 64 * 64],
            objects: Vec::new(),
        };
        let placed = place_object("ball", "red", None, SizeClass::Medium, &empty, &mut rng)
            .unwrap()
            .expect("empty scene must accept a medium ball");
        let (sprite, x0, y0) = placed;
        assert!(x0 >= PLACEMENT_MARGIN && y0 >= PLACEMENT_MARGIN);
        assert!(x0 + sprite.size + PLACEMENT_MARGIN <= 64);
        assert!(y0 + sprite.size + PLACEMENT_MARGIN <= 64);
        assert_eq!(size_class(sprite.area(), 64), SizeClass::Medium);

        // fully-occupied scene rejects everything
        let blocker = SceneObject {
            category: "box".into(),
            color: "gray".into(),
            texture: None,
            x0: 0,
            y0: 0,
            sprite_size: 64,
            mask: vec![true; 64 * 64],
        };
        let full = Scene {
            objects: vec![blocker],
            ..empty.clone()
        };
        let rejected =
            place_object("ball", "red", None, SizeClass::Small, &full, &mut rng).unwrap();
        assert!(rejected.is_none(), "covered canvas must reject placement");
    }

    #[test]
    fn harmonize_identity_closed_form_and_exterior() {
        let side = 16;
        let n = side * side;
        // mask: central 4x4 block
        let mut mask = vec![false; n];
        for y in 6..10 {
            for x in 6..10 {
                mask[y * side + x] = true;
            }
        }

        // identity: build fg whose luma stats equal the ring's
        let mut rgb = vec![0.5; 3 * n];
        // gray 0.5 everywhere -> fg and ring share (mu, sigma) = (0.5, 0)
        let before = rgb.clone();
        harmonize(&mut rgb, side, &mask);
        assert_eq!(rgb, before, "matched stats must be a no-op");

        // constant fg against a two-valued ring: closed-form affine
        let mut rgb2 = vec![0.0; 3 * n];
        let ring = dilation_ring(&mask, side);
        let ring_px: Vec<usize> = (0..n).filter(|&i| ring[i]).collect();
        for (j, &i) in ring_px.iter().enumerate() {
            let v = if j % 2 == 0 { 0.2 } else { 0.6 };
            for ch in 0..3 {
                rgb2[ch * n + i] = v;
            }
        }
        for i in 0..n {
            if mask[i] {
                for ch in 0..3 {
                    rgb2[ch * n + i] = 0.9; // constant fg, sigma = 0 -> a = 1
                }
            }
        }
        let mu_ring = ring_px
            .iter()
            .enumerate()
            .map(|(j, _)| if j % 2 == 0 { 0.2 } else { 0.6 })
            .sum::<f64>()
            / ring_px.len() as f64;
        let exterior_before: Vec<f64> = (0..3 * n)
            .filter(|&k| !mask[k % n])
            .map(|k| rgb2[k])
            .collect();
        harmonize(&mut rgb2, side, &mask);
        // sigma_fg = 0 -> a = 1, b = mu_ring - 0.9; fg becomes mu_ring
        for i in 0..n {
            if mask[i] {
                for ch in 0..3 {
                    let got = rgb2[ch * n + i];
                    assert!(
                        (got - mu_ring).abs() < 1e-12,
                        "constant fg must land on the ring mean: {got} vs {mu_ring}"
                    );
                }
            }
        }
        let exterior_after: Vec<f64> = (0..3 * n)
            .filter(|&k| !mask[k % n])
            .map(|k| rgb2[k])
            .collect();
        assert_eq!(exterior_before, exterior_after, "exterior must be untouched");
    }

    #[test]
    fn scene_generation_is_deterministic_and_respects_forbidden_pairs() {
        let a = Scene::generate(3, 2, 64, 3, ("ball", "red"), &mut ChaCha8Rng::seed_from_u64(9))
            .unwrap();
        let b = Scene::generate(3, 2, 64, 3, ("ball", "red"), &mut ChaCha8Rng::seed_from_u64(9))
            .unwrap();
        assert_eq!(a.rgb, b.rgb);
        assert_eq!(a.objects.len(), b.objects.len());
        for _ in 0..20 {
            let s = Scene::generate(
                7,
                1,
                64,
                3,
                ("car", "blue"),
                &mut ChaCha8Rng::seed_from_u64(11),
            )
            .unwrap();
            for o in &s.objects {
                assert!(
                    !(o.category == "car" && o.color == "blue"),
                    "forbidden pair appeared as a distractor"
                );
            }
            assert!(s.rgb.iter().all(|&v| (0.0..=1.0).contains(&v)));
        }
    }
}
