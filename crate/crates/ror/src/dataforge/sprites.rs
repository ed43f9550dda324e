//! Procedural RGBA sprites: a toy category set grouped into semantic
//! clusters, a named color palette, and pure shape painters with exact
//! (hard) alpha masks.

use crate::{Result, RorError};

/// Named colors available as appearance attributes. Multi-word names are
/// deliberate: they exercise the inside-attribute tag.
pub const COLORS: &[(&str, [f64; 3])] = &[
    ("red", [0.85, 0.15, 0.12]),
    ("green", [0.18, 0.62, 0.22]),
    ("blue", [0.17, 0.35, 0.78]),
    ("yellow", [0.92, 0.85, 0.18]),
    ("orange", [0.95, 0.55, 0.12]),
    ("purple", [0.55, 0.25, 0.68]),
    ("pink", [0.95, 0.60, 0.72]),
    ("brown", [0.52, 0.35, 0.18]),
    ("black", [0.10, 0.10, 0.10]),
    ("white", [0.95, 0.95, 0.95]),
    ("gray", [0.55, 0.55, 0.55]),
    ("light blue", [0.55, 0.78, 0.95]),
    ("dark green", [0.08, 0.35, 0.12]),
];

/// Texture attributes, rendered as brightness patterns over the sprite.
pub const TEXTURES: &[&str] = &["striped", "dotted", "checkered"];

/// Number of semantic clusters.
pub const CLUSTERS: usize = 17;

/// Category → cluster table. Multi-word categories are deliberate: they
/// exercise the inside-identity tag.
pub const CATEGORIES: &[(&str, usize)] = &[
    ("ball", 0),
    ("balloon", 0),
    ("block", 1),
    ("box", 1),
    ("car", 2),
    ("bus", 2),
    ("truck", 2),
    ("bicycle", 3),
    ("motorcycle", 3),
    ("plane", 4),
    ("kite", 4),
    ("boat", 5),
    ("cat", 6),
    ("dog", 6),
    ("cow", 7),
    ("sheep", 7),
    ("bird", 8),
    ("duck", 8),
    ("apple", 9),
    ("banana", 9),
    ("pizza", 10),
    ("hot dog", 10),
    ("chair", 11),
    ("bench", 11),
    ("table", 12),
    ("tree", 13),
    ("flower", 13),
    ("teddy bear", 14),
    ("doll", 14),
    ("cup", 15),
    ("bottle", 15),
    ("sign", 16),
    ("clock", 16),
];

/// Cluster id of a category; `None` for unknown names.
pub fn cluster_of(category: &str) -> Option<usize> {
    CATEGORIES
        .iter()
        .find(|(c, _)| *c == category)
        .map(|&(_, cl)| cl)
}

/// RGB for a named color.
pub fn color_rgb(name: &str) -> Option<[f64; 3]> {
    COLORS.iter().find(|(n, _)| *n == name).map(|&(_, c)| c)
}

/// A rasterized object: hard alpha plus per-pixel RGB, channel-major.
#[derive(Debug, Clone)]
pub struct Sprite {
    pub size: usize,
    pub alpha: Vec<bool>,
    pub rgb: Vec<f64>,
}

impl Sprite {
    pub fn area(&self) -> usize {
        self.alpha.iter().filter(|&&a| a).count()
    }
}

// Region codes produced by the painters.
const BG: u8 = 0;
const BODY: u8 = 1; // takes the object color
const DARK: u8 = 2; // darkened accent (wheels, trunks, outlines)
const LIGHT: u8 = 3; // lightened accent (windows, highlights)

type Shape = (Box<dyn Fn(f64, f64) -> bool>, u8);

fn disc(cx: f64, cy: f64, r: f64, code: u8) -> Shape {
    (
        Box::new(move |x, y| (x - cx) * (x - cx) + (y - cy) * (y - cy) <= r * r),
        code,
    )
}

fn ellipse(cx: f64, cy: f64, rx: f64, ry: f64, code: u8) -> Shape {
    (
        Box::new(move |x, y| {
            let dx = (x - cx) / rx;
            let dy = (y - cy) / ry;
            dx * dx + dy * dy <= 1.0
        }),
        code,
    )
}

fn rect(x0: f64, y0: f64, x1: f64, y1: f64, code: u8) -> Shape {
    (
        Box::new(move |x, y| x >= x0 && x < x1 && y >= y0 && y < y1),
        code,
    )
}

fn tri(a: (f64, f64), b: (f64, f64), c: (f64, f64), code: u8) -> Shape {
    let edge = |p: (f64, f64), q: (f64, f64), x: f64, y: f64| {
        (q.0 - p.0) * (y - p.1) - (q.1 - p.1) * (x - p.0)
    };
    (
        Box::new(move |x, y| {
            let d1 = edge(a, b, x, y);
            let d2 = edge(b, c, x, y);
            let d3 = edge(c, a, x, y);
            let neg = d1 < 0.0 || d2 < 0.0 || d3 < 0.0;
            let pos = d1 > 0.0 || d2 > 0.0 || d3 > 0.0;
            !(neg && pos)
        }),
        code,
    )
}

/// Shape list for one category, painted in order (later entries win).
/// All coordinates are normalized to the unit square.
fn shapes_for(category: &str) -> Option<Vec<Shape>> {
    let s = match category {
        "ball" => vec![disc(0.5, 0.5, 0.46, BODY), disc(0.38, 0.38, 0.1, LIGHT)],
        "balloon" => vec![
            rect(0.48, 0.78, 0.54, 1.0, DARK),
            ellipse(0.5, 0.42, 0.34, 0.4, BODY),
            tri((0.44, 0.84), (0.58, 0.84), (0.5, 0.76), BODY),
        ],
        "block" => vec![
            rect(0.08, 0.18, 0.92, 0.92, BODY),
            rect(0.08, 0.08, 0.92, 0.2, LIGHT),
        ],
        "box" => vec![
            rect(0.06, 0.2, 0.94, 0.94, BODY),
            rect(0.44, 0.2, 0.56, 0.94, DARK),
        ],
        "car" => vec![
            rect(0.28, 0.2, 0.74, 0.52, BODY),
            rect(0.04, 0.46, 0.96, 0.78, BODY),
            rect(0.34, 0.26, 0.48, 0.44, LIGHT),
            rect(0.54, 0.26, 0.68, 0.44, LIGHT),
            disc(0.25, 0.82, 0.13, DARK),
            disc(0.75, 0.82, 0.13, DARK),
        ],
        "bus" => vec![
            rect(0.04, 0.16, 0.96, 0.78, BODY),
            rect(0.1, 0.24, 0.9, 0.42, LIGHT),
            disc(0.24, 0.84, 0.12, DARK),
            disc(0.76, 0.84, 0.12, DARK),
        ],
        "truck" => vec![
            rect(0.3, 0.18, 0.96, 0.72, BODY),
            rect(0.04, 0.38, 0.34, 0.72, BODY),
            rect(0.08, 0.44, 0.26, 0.58, LIGHT),
            disc(0.2, 0.8, 0.12, DARK),
            disc(0.72, 0.8, 0.12, DARK),
        ],
        "bicycle" => vec![
            disc(0.26, 0.68, 0.24, BODY),
            disc(0.26, 0.68, 0.15, BG),
            disc(0.74, 0.68, 0.24, BODY),
            disc(0.74, 0.68, 0.15, BG),
            rect(0.22, 0.36, 0.78, 0.46, BODY),
            rect(0.46, 0.36, 0.56, 0.7, BODY),
            rect(0.68, 0.2, 0.78, 0.42, DARK),
            rect(0.2, 0.24, 0.34, 0.32, DARK),
        ],
        "motorcycle" => vec![
            disc(0.24, 0.7, 0.22, DARK),
            disc(0.76, 0.7, 0.22, DARK),
            ellipse(0.5, 0.5, 0.3, 0.16, BODY),
            rect(0.64, 0.26, 0.74, 0.48, BODY),
            rect(0.56, 0.2, 0.82, 0.3, DARK),
        ],
        "plane" => vec![
            tri((0.5, 0.2), (0.16, 0.66), (0.84, 0.66), BODY),
            ellipse(0.5, 0.5, 0.14, 0.42, BODY),
            tri((0.36, 0.86), (0.64, 0.86), (0.5, 0.68), DARK),
            disc(0.5, 0.16, 0.1, LIGHT),
        ],
        "kite" => vec![
            tri((0.5, 0.04), (0.1, 0.42), (0.9, 0.42), BODY),
            tri((0.1, 0.42), (0.9, 0.42), (0.5, 0.84), LIGHT),
            rect(0.48, 0.84, 0.52, 1.0, DARK),
        ],
        "boat" => vec![
            tri((0.5, 0.04), (0.5, 0.6), (0.88, 0.6), LIGHT),
            rect(0.48, 0.08, 0.53, 0.66, DARK),
            tri((0.02, 0.66), (0.98, 0.66), (0.5, 1.0), BODY),
            rect(0.12, 0.66, 0.88, 0.84, BODY),
        ],
        "cat" => vec![
            ellipse(0.52, 0.68, 0.34, 0.24, BODY),
            rect(0.78, 0.3, 0.9, 0.72, BODY),
            disc(0.3, 0.36, 0.2, BODY),
            tri((0.14, 0.3), (0.28, 0.3), (0.18, 0.08), BODY),
            tri((0.34, 0.3), (0.48, 0.3), (0.44, 0.08), BODY),
            disc(0.24, 0.34, 0.035, DARK),
            disc(0.37, 0.34, 0.035, DARK),
        ],
        "dog" => vec![
            ellipse(0.54, 0.64, 0.36, 0.24, BODY),
            rect(0.2, 0.8, 0.3, 1.0, BODY),
            rect(0.74, 0.8, 0.84, 1.0, BODY),
            disc(0.26, 0.36, 0.2, BODY),
            ellipse(0.1, 0.42, 0.08, 0.16, DARK),
            rect(0.86, 0.42, 0.98, 0.52, BODY),
            disc(0.2, 0.34, 0.035, DARK),
        ],
        "cow" => vec![
            ellipse(0.54, 0.54, 0.4, 0.28, BODY),
            rect(0.24, 0.76, 0.34, 1.0, BODY),
            rect(0.72, 0.76, 0.82, 1.0, BODY),
            disc(0.16, 0.32, 0.16, BODY),
            tri((0.02, 0.2), (0.12, 0.28), (0.02, 0.34), DARK),
            disc(0.5, 0.46, 0.09, DARK),
            disc(0.72, 0.6, 0.07, DARK),
        ],
        "sheep" => vec![
            disc(0.42, 0.5, 0.26, BODY),
            disc(0.62, 0.44, 0.22, BODY),
            disc(0.56, 0.64, 0.22, BODY),
            disc(0.74, 0.6, 0.2, BODY),
            rect(0.36, 0.8, 0.44, 1.0, DARK),
            rect(0.68, 0.8, 0.76, 1.0, DARK),
            disc(0.2, 0.42, 0.13, DARK),
        ],
        "bird" => vec![
            ellipse(0.52, 0.6, 0.32, 0.22, BODY),
            disc(0.28, 0.34, 0.16, BODY),
            tri((0.06, 0.3), (0.16, 0.24), (0.16, 0.38), LIGHT),
            ellipse(0.6, 0.54, 0.18, 0.1, DARK),
            rect(0.8, 0.44, 0.96, 0.6, BODY),
        ],
        "duck" => vec![
            ellipse(0.54, 0.64, 0.34, 0.24, BODY),
            disc(0.28, 0.32, 0.16, BODY),
            rect(0.04, 0.3, 0.16, 0.38, LIGHT),
            disc(0.3, 0.28, 0.035, DARK),
        ],
        "apple" => vec![
            disc(0.5, 0.58, 0.36, BODY),
            rect(0.47, 0.12, 0.53, 0.3, DARK),
            ellipse(0.64, 0.2, 0.12, 0.07, LIGHT),
        ],
        "banana" => vec![
            disc(0.5, 0.5, 0.46, BODY),
            disc(0.5, 0.08, 0.38, BG),
            rect(0.12, 0.86, 0.2, 0.94, DARK),
            rect(0.8, 0.86, 0.88, 0.94, DARK),
        ],
        "pizza" => vec![
            tri((0.08, 0.1), (0.92, 0.1), (0.5, 0.94), BODY),
            rect(0.08, 0.1, 0.92, 0.2, DARK),
            disc(0.4, 0.34, 0.06, DARK),
            disc(0.62, 0.4, 0.06, DARK),
            disc(0.5, 0.6, 0.06, DARK),
        ],
        "hot dog" => vec![
            ellipse(0.5, 0.56, 0.44, 0.24, BODY),
            ellipse(0.5, 0.44, 0.42, 0.12, DARK),
        ],
        "chair" => vec![
            rect(0.2, 0.06, 0.32, 0.6, BODY),
            rect(0.2, 0.5, 0.82, 0.62, BODY),
            rect(0.2, 0.62, 0.3, 1.0, DARK),
            rect(0.72, 0.62, 0.82, 1.0, DARK),
        ],
        "bench" => vec![
            rect(0.04, 0.38, 0.96, 0.54, BODY),
            rect(0.04, 0.2, 0.96, 0.32, BODY),
            rect(0.1, 0.54, 0.2, 0.96, DARK),
            rect(0.8, 0.54, 0.9, 0.96, DARK),
        ],
        "table" => vec![
            rect(0.02, 0.3, 0.98, 0.44, BODY),
            rect(0.08, 0.44, 0.2, 0.98, DARK),
            rect(0.8, 0.44, 0.92, 0.98, DARK),
        ],
        "tree" => vec![
            rect(0.44, 0.6, 0.56, 1.0, DARK),
            tri((0.5, 0.02), (0.1, 0.62), (0.9, 0.62), BODY),
            tri((0.5, 0.18), (0.18, 0.44), (0.82, 0.44), BODY),
        ],
        "flower" => vec![
            rect(0.47, 0.5, 0.53, 1.0, DARK),
            disc(0.5, 0.2, 0.14, BODY),
            disc(0.32, 0.32, 0.14, BODY),
            disc(0.68, 0.32, 0.14, BODY),
            disc(0.38, 0.5, 0.14, BODY),
            disc(0.62, 0.5, 0.14, BODY),
            disc(0.5, 0.35, 0.1, LIGHT),
        ],
        "teddy bear" => vec![
            disc(0.3, 0.14, 0.1, BODY),
            disc(0.7, 0.14, 0.1, BODY),
            disc(0.5, 0.26, 0.2, BODY),
            ellipse(0.5, 0.66, 0.26, 0.3, BODY),
            disc(0.18, 0.56, 0.1, BODY),
            disc(0.82, 0.56, 0.1, BODY),
            disc(0.36, 0.92, 0.11, BODY),
            disc(0.64, 0.92, 0.11, BODY),
            disc(0.5, 0.32, 0.08, LIGHT),
        ],
        "doll" => vec![
            disc(0.5, 0.2, 0.16, BODY),
            tri((0.5, 0.3), (0.22, 0.82), (0.78, 0.82), LIGHT),
            rect(0.38, 0.82, 0.46, 1.0, BODY),
            rect(0.54, 0.82, 0.62, 1.0, BODY),
            disc(0.44, 0.18, 0.03, DARK),
            disc(0.56, 0.18, 0.03, DARK),
        ],
        "cup" => vec![
            disc(0.74, 0.5, 0.2, BODY),
            disc(0.74, 0.5, 0.11, BG),
            rect(0.2, 0.18, 0.7, 0.88, BODY),
            rect(0.2, 0.18, 0.7, 0.28, LIGHT),
        ],
        "bottle" => vec![
            rect(0.42, 0.02, 0.58, 0.2, DARK),
            rect(0.44, 0.14, 0.56, 0.42, BODY),
            rect(0.3, 0.38, 0.7, 0.98, BODY),
            rect(0.34, 0.52, 0.66, 0.74, LIGHT),
        ],
        "sign" => vec![
            rect(0.46, 0.4, 0.54, 1.0, DARK),
            rect(0.14, 0.04, 0.86, 0.46, BODY),
            rect(0.22, 0.16, 0.78, 0.24, LIGHT),
        ],
        "clock" => vec![
            disc(0.5, 0.5, 0.46, BODY),
            disc(0.5, 0.5, 0.38, LIGHT),
            rect(0.48, 0.2, 0.52, 0.52, DARK),
            rect(0.48, 0.48, 0.74, 0.52, DARK),
        ],
        _ => return None,
    };
    Some(s)
}

fn lighten(c: f64) -> f64 {
    (c + 0.45).min(1.0)
}

/// Rasterizes a category at `size` pixels with the given color and
/// optional texture. Painters are pure: the same inputs always produce
/// the same sprite.
pub fn rasterize(
    category: &str,
    size: usize,
    color: [f64; 3],
    texture: Option<&str>,
) -> Result<Sprite> {
    assert!(size >= 3, "sprites below 3 px are degenerate");
    let shapes = shapes_for(category).ok_or_else(|| {
        RorError::InvalidInput(format!("unknown category '{category}'"))
    })?;
    let mut codes = vec![BG; size * size];
    let f = size as f64;
    for (py, row) in codes.chunks_mut(size).enumerate() {
        for (px, cell) in row.iter_mut().enumerate() {
            let x = (px as f64 + 0.5) / f;
            let y = (py as f64 + 0.5) / f;
            for (test, code) in &shapes {
                if test(x, y) {
                    *cell = *code;
                }
            }
        }
    }
    let mut alpha = vec![false; size * size];
    let mut rgb = vec![0.0; 3 * size * size];
    for (i, &code) in codes.iter().enumerate() {
        if code == BG {
            continue;
        }
        alpha[i] = true;
        let (px, py) = (i % size, i / size);
        let shade = match texture {
            Some("striped") if code == BODY => {
                if (px / (size / 6).max(1)) % 2 == 1 {
                    0.7
                } else {
                    1.0
                }
            }
            Some("dotted") if code == BODY => {
                if px % 4 == 1 && py % 4 == 1 {
                    0.55
                } else {
                    1.0
                }
            }
            Some("checkered") if code == BODY => {
                if ((px / 3) + (py / 3)) % 2 == 1 {
                    0.8
                } else {
                    1.0
                }
            }
            _ => 1.0,
        };
        for ch in 0..3 {
            rgb[ch * size * size + i] = match code {
                BODY => color[ch] * shade,
                DARK => color[ch] * 0.4,
                _ => lighten(color[ch]),
            };
        }
    }
    Ok(Sprite { size, alpha, rgb })
}

/// All category names.
pub fn category_names() -> Vec<&'static str> {
    CATEGORIES.iter().map(|&(c, _)| c).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cluster_table_is_total_and_covers_17_clusters() {
        let mut seen = vec![false; CLUSTERS];
        for &(cat, cl) in CATEGORIES {
            assert!(cl < CLUSTERS, "{cat} has out-of-range cluster {cl}");
            assert_eq!(cluster_of(cat), Some(cl));
            seen[cl] = true;
        }
        assert!(seen.iter().all(|&s| s), "some cluster has no category");
        assert_eq!(cluster_of("unicorn"), None);
    }

    #[test]
    fn every_category_rasterizes_with_nonempty_confined_alpha() {
        for &(cat, _) in CATEGORIES {
            for size in [6usize, 12, 20] {
                let sp = rasterize(cat, size, [0.5, 0.3, 0.2], None).unwrap();
                let area = sp.area();
                assert!(area > 0, "{cat}@{size} has empty alpha");
                assert!(
                    area <= size * size,
                    "{cat}@{size} overflows its box"
                );
                // color lands only under alpha
                for i in 0..size * size {
                    if !sp.alpha[i] {
                        for ch in 0..3 {
                            assert_eq!(sp.rgb[ch * size * size + i], 0.0);
                        }
                    }
                }
            }
        }
    }

    #[test]
    fn rasterize_is_pure_and_textures_modulate_pixels() {
        let a = rasterize("ball", 16, [0.8, 0.2, 0.2], Some("striped")).unwrap();
        let b = rasterize("ball", 16, [0.8, 0.2, 0.2], Some("striped")).unwrap();
        assert_eq!(a.rgb, b.rgb);
        assert_eq!(a.alpha, b.alpha);

        let plain = rasterize("ball", 16, [0.8, 0.2, 0.2], None).unwrap();
        assert_eq!(plain.alpha, a.alpha, "texture must not change the mask");
        assert_ne!(plain.rgb, a.rgb, "striping must change some pixels");

        assert!(rasterize("unicorn", 16, [0.5; 3], None).is_err());
    }

    #[test]
    fn palette_has_multiword_entries_and_lookup_works() {
        assert!(color_rgb("light blue").is_some());
        assert!(color_rgb("dark green").is_some());
        assert_eq!(color_rgb("mauve"), None);
        assert!(COLORS.len() >= 10);
        assert!(cluster_of("hot dog").is_some());
        assert!(cluster_of("teddy bear").is_some());
    }
}
