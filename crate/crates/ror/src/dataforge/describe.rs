//! Referring-expression synthesis: appearance and spatial templates
//! instantiated from an object's attributes and final placement, each
//! token carrying its identity/attribute role, plus the uniqueness check
//! that every emitted expression picks out exactly one scene object.

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::scene::{Scene, SceneObject};
use super::sprites::{CATEGORIES, COLORS, TEXTURES};
use crate::textproc::{bio_valid, RoleLabel};

/// Imperative verbs opening every expression.
pub const VERBS: &[&str] = &["remove", "delete", "erase"];
/// Spatial words derived from placement thirds.
pub const SIDE_WORDS: &[&str] = &["left", "right", "top", "bottom"];
/// Two objects are "near" when their centers are within this fraction of
/// the canvas side.
pub const NEAR_FRACTION: f64 = 1.0 / 3.0;

/// One referring expression with per-token roles.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Expression {
    pub tokens: Vec<String>,
    pub roles: Vec<RoleLabel>,
}

/// Canvas thirds an object's center can occupy.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Side {
    Left,
    Right,
    Top,
    Bottom,
}

impl Side {
    pub fn word(self) -> &'static str {
        match self {
            Side::Left => "left",
            Side::Right => "right",
            Side::Top => "top",
            Side::Bottom => "bottom",
        }
    }
}

/// Sides whose third of the canvas contains the center (0..=2 of them).
pub fn sides_of(center: (f64, f64), side_px: usize) -> Vec<Side> {
    let third = side_px as f64 / 3.0;
    let mut out = Vec::new();
    if center.0 < third {
        out.push(Side::Left);
    } else if center.0 > 2.0 * third {
        out.push(Side::Right);
    }
    if center.1 < third {
        out.push(Side::Top);
    } else if center.1 > 2.0 * third {
        out.push(Side::Bottom);
    }
    out
}

/// The qualifiers an expression asserts about its referent.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Predicate {
    pub category: String,
    pub color: Option<String>,
    pub texture: Option<String>,
    pub side: Option<Side>,
    pub near: Option<String>,
}

/// Whether `obj` (inside `scene`) satisfies every qualifier.
pub fn satisfies(obj: &SceneObject, others: &[&SceneObject], scene: &Scene, p: &Predicate) -> bool {
    if obj.category != p.category {
        return false;
    }
    if let Some(c) = &p.color {
        if &obj.color != c {
            return false;
        }
    }
    if let Some(t) = &p.texture {
        if obj.texture.as_deref() != Some(t.as_str()) {
            return false;
        }
    }
    if let Some(s) = p.side {
        if !sides_of(obj.center(), scene.side).contains(&s) {
            return false;
        }
    }
    if let Some(ncat) = &p.near {
        let (cx, cy) = obj.center();
        let thr = scene.side as f64 * NEAR_FRACTION;
        let close = others.iter().any(|o| {
            if std::ptr::eq(*o, obj) || &o.category != ncat {
                return false;
            }
            let (ox, oy) = o.center();
            ((ox - cx).powi(2) + (oy - cy).powi(2)).sqrt() <= thr
        });
        if !close {
            return false;
        }
    }
    true
}

fn push_words(tokens: &mut Vec<String>, roles: &mut Vec<RoleLabel>, text: &str, first: RoleLabel, rest: RoleLabel) {
    for (i, w) in text.split_whitespace().enumerate() {
        tokens.push(w.to_owned());
        roles.push(if i == 0 { first } else { rest });
    }
}

/// Instantiates one template with roles. BIO-valid by construction.
pub fn build_expression(verb: &str, p: &Predicate) -> Expression {
    use RoleLabel::*;
    let mut tokens = Vec::new();
    let mut roles = Vec::new();
    push_words(&mut tokens, &mut roles, verb, Outside, Outside);
    push_words(&mut tokens, &mut roles, "the", Outside, Outside);
    if let Some(c) = &p.color {
        push_words(&mut tokens, &mut roles, c, BeginAttribute, InsideAttribute);
    }
    if let Some(t) = &p.texture {
        push_words(&mut tokens, &mut roles, t, BeginAttribute, InsideAttribute);
    }
    push_words(&mut tokens, &mut roles, &p.category, BeginIdentity, InsideIdentity);
    if let Some(s) = p.side {
        push_words(&mut tokens, &mut roles, "on the", Outside, Outside);
        push_words(&mut tokens, &mut roles, s.word(), BeginAttribute, InsideAttribute);
    }
    if let Some(n) = &p.near {
        push_words(&mut tokens, &mut roles, "near the", Outside, Outside);
        push_words(&mut tokens, &mut roles, n, BeginAttribute, InsideAttribute);
    }
    debug_assert!(bio_valid(&roles));
    Expression { tokens, roles }
}

/// Recovers the predicate an expression asserts, from its tokens and
/// roles alone. Used to re-verify uniqueness on serialized data.
pub fn parse_expression(expr: &Expression) -> Option<Predicate> {
    use RoleLabel::*;
    let mut p = Predicate::default();
    let mut i = 0;
    let n = expr.tokens.len();
    if expr.tokens.len() != expr.roles.len() || !bio_valid(&expr.roles) {
        return None;
    }
    while i < n {
        match expr.roles[i] {
            BeginIdentity => {
                let mut words = vec![expr.tokens[i].clone()];
                i += 1;
                while i < n && expr.roles[i] == InsideIdentity {
                    words.push(expr.tokens[i].clone());
                    i += 1;
                }
                p.category = words.join(" ");
            }
            BeginAttribute => {
                let mut words = vec![expr.tokens[i].clone()];
                i += 1;
                while i < n && expr.roles[i] == InsideAttribute {
                    words.push(expr.tokens[i].clone());
                    i += 1;
                }
                let phrase = words.join(" ");
                if COLORS.iter().any(|&(c, _)| c == phrase) {
                    p.color = Some(phrase);
                } else if TEXTURES.contains(&phrase.as_str()) {
                    p.texture = Some(phrase);
                } else if let Some(s) = match phrase.as_str() {
                    "left" => Some(Side::Left),
                    "right" => Some(Side::Right),
                    "top" => Some(Side::Top),
                    "bottom" => Some(Side::Bottom),
                    _ => None,
                } {
                    p.side = Some(s);
                } else if CATEGORIES.iter().any(|&(c, _)| c == phrase) {
                    p.near = Some(phrase);
                } else {
                    return None;
                }
            }
            _ => i += 1,
        }
    }
    if p.category.is_empty() {
        None
    } else {
        Some(p)
    }
}

/// Whether an expression picks out `target` and nothing else in the
/// scene (the target is not expected to be in `scene.objects`).
pub fn expression_is_unique(expr: &Expression, target: &SceneObject, scene: &Scene) -> bool {
    let Some(p) = parse_expression(expr) else {
        return false;
    };
    let mut all: Vec<&SceneObject> = scene.objects.iter().collect();
    all.push(target);
    if !satisfies(target, &all, scene, &p) {
        return false;
    }
    scene
        .objects
        .iter()
        .all(|o| !satisfies(o, &all, scene, &p))
}

/// Every valid, uniquely-referring expression for `target`, then a random
/// subset of at most `max_expr` (always at least one). The color+category
/// template is guaranteed unique because distractors never share both
/// attributes with the target.
pub fn describe(
    target: &SceneObject,
    scene: &Scene,
    max_expr: usize,
    rng: &mut ChaCha8Rng,
) -> Vec<Expression> {
    let base = Predicate {
        category: target.category.clone(),
        color: None,
        texture: None,
        side: None,
        near: None,
    };
    let mut candidates = vec![base.clone()];
    candidates.push(Predicate {
        color: Some(target.color.clone()),
        ..base.clone()
    });
    if let Some(t) = &target.texture {
        candidates.push(Predicate {
            texture: Some(t.clone()),
            ..base.clone()
        });
    }
    for s in sides_of(target.center(), scene.side) {
        candidates.push(Predicate {
            side: Some(s),
            ..base.clone()
        });
        candidates.push(Predicate {
            color: Some(target.color.clone()),
            side: Some(s),
            ..base.clone()
        });
    }
    let mut near_cats: Vec<&String> = scene.objects.iter().map(|o| &o.category).collect();
    near_cats.sort();
    near_cats.dedup();
    for ncat in near_cats {
        if *ncat != target.category {
            candidates.push(Predicate {
                near: Some(ncat.clone()),
                ..base.clone()
            });
        }
    }

    let mut exprs: Vec<Expression> = Vec::new();
    for p in candidates {
        let verb = VERBS[rng.gen_range(0..VERBS.len())];
        let e = build_expression(verb, &p);
        if expression_is_unique(&e, target, scene) && !exprs.iter().any(|x| x.tokens == e.tokens) {
            exprs.push(e);
        }
    }
    assert!(
        !exprs.is_empty(),
        "no unique expression for a {} {} — distractor filtering is broken",
        target.color,
        target.category
    );
    exprs.shuffle(rng);
    exprs.truncate(max_expr.max(1));
    exprs
}

/// Every token any template can emit; the model vocabulary is built from
/// this inventory so it is independent of the particular dataset drawn.
pub fn token_inventory() -> Vec<String> {
    let mut t: Vec<String> = Vec::new();
    for v in VERBS {
        t.push((*v).to_owned());
    }
    for w in ["the", "on", "near"] {
        t.push(w.to_owned());
    }
    for w in SIDE_WORDS {
        t.push((*w).to_owned());
    }
    for (c, _) in COLORS {
        for w in c.split_whitespace() {
            t.push(w.to_owned());
        }
    }
    for tx in TEXTURES {
        t.push((*tx).to_owned());
    }
    for (c, _) in CATEGORIES {
        for w in c.split_whitespace() {
            t.push(w.to_owned());
        }
    }
    t.sort();
    t.dedup();
    t
}

/// Synthesizes `n` labeled expressions covering all template shapes, for
/// tagger training. Deterministic in `seed`.
pub fn expression_corpus(n: usize, seed: u64) -> Vec<Expression> {
    use rand::SeedableRng;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(n);
    for _ in 0..n {
        let category = CATEGORIES[rng.gen_range(0..CATEGORIES.len())].0.to_owned();
        let color = if rng.gen::<f64>() < 0.7 {
            Some(COLORS[rng.gen_range(0..COLORS.len())].0.to_owned())
        } else {
            None
        };
        let texture = if rng.gen::<f64>() < 0.25 {
            Some(TEXTURES[rng.gen_range(0..TEXTURES.len())].to_owned())
        } else {
            None
        };
        let side = if rng.gen::<f64>() < 0.4 {
            Some(match rng.gen_range(0..4) {
                0 => Side::Left,
                1 => Side::Right,
                2 => Side::Top,
                _ => Side::Bottom,
            })
        } else {
            None
        };
        let near = if rng.gen::<f64>() < 0.25 {
            Some(CATEGORIES[rng.gen_range(0..CATEGORIES.len())].0.to_owned())
        } else {
            None
        };
        let p = Predicate {
            category,
            color,
            texture,
            side,
            near,
        };
        let verb = VERBS[rng.gen_range(0..VERBS.len())];
        out.push(build_expression(verb, &p));
    }
    out
}
