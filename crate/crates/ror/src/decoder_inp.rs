//! Attention-based filling decoder. Foreground pixels (per the predicted
//! mask) are holed out of the segmentation features; interior patches are
//! then rebuilt as softmax-weighted sums of exterior patches, with the
//! attention derived from cosine similarity on the coarser inpainting map.
//! A stack of dilated convolutions refines the filled map, and a 1×1 head
//! decodes RGB per scale.

use rand_chacha::ChaCha8Rng;

use crate::autograd::{Graph, Tensor, Var};
use crate::encoder::{EncoderConfig, STAGES};
use crate::nn::{Binder, Conv2dP, Init, ParamId, ParamStore};
use crate::{Result, RorError};

/// Epsilon guarding patch-norm denominators in the similarity computation.
pub const PATCH_NORM_EPS: f64 = 1e-8;
/// Dilation rates of the refinement stack.
pub const HDC_RATES: [usize; 3] = [1, 2, 5];
/// Patch side used by the filling attention at every scale.
pub const FILL_PATCH: usize = 2;

/// Non-overlapping patch partition of a mask: a cell is interior when any
/// of its pixels is masked foreground, exterior otherwise.
#[derive(Debug, Clone)]
pub struct PatchGrid {
    pub patch: usize,
    /// Grid dimensions (cells per side).
    pub gh: usize,
    pub gw: usize,
    /// Linear cell indices (row-major over the grid).
    pub interior: Vec<usize>,
    pub exterior: Vec<usize>,
}

impl PatchGrid {
    /// Builds the partition from a pixel mask of shape `(h, w)`.
    pub fn from_mask(mask: &[bool], h: usize, w: usize, patch: usize) -> Self {
        assert_eq!(mask.len(), h * w, "mask length mismatch");
        assert!(
            h % patch == 0 && w % patch == 0,
            "{h}x{w} not divisible by patch {patch}"
        );
        let (gh, gw) = (h / patch, w / patch);
        let mut interior = Vec::new();
        let mut exterior = Vec::new();
        for gy in 0..gh {
            for gx in 0..gw {
                let mut any = false;
                'scan: for iy in 0..patch {
                    for ix in 0..patch {
                        if mask[(gy * patch + iy) * w + gx * patch + ix] {
                            any = true;
                            break 'scan;
                        }
                    }
                }
                let cell = gy * gw + gx;
                if any {
                    interior.push(cell);
                } else {
                    exterior.push(cell);
                }
            }
        }
        PatchGrid {
            patch,
            gh,
            gw,
            interior,
            exterior,
        }
    }

    pub fn cells(&self) -> usize {
        self.gh * self.gw
    }
}

/// Per-scale filling parameters.
pub struct InpStageP {
    /// Learned fallback patch row, used when a map is fully masked (no
    /// exterior context exists).
    fallback: ParamId,
    /// Refinement stack: three 3×3 convolutions at rates {1,2,5}; the last
    /// one starts at zero so the residual branch is initially inert.
    hdc: [Conv2dP; 3],
    /// 1×1 RGB decode head.
    rgb: Conv2dP,
}

/// All inpainting-decoder parameters.
pub struct InpDecoderP {
    /// Four residual blocks applied to the deepest fused map.
    res: Vec<(Conv2dP, Conv2dP)>,
    /// Steps for stages 3, 2, 1 (index 0 = stage 3).
    steps: Vec<InpStageP>,
}

impl InpDecoderP {
    pub fn register(store: &mut ParamStore, cfg: &EncoderConfig, rng: &mut ChaCha8Rng) -> Self {
        let c4 = cfg.channels(STAGES);
        let res = (0..4)
            .map(|b| {
                let c1 = Conv2dP::register(
                    store, &format!("inp.res{b}.c1"), c4, c4, 3, 1, 1, 1, true,
                    Init::XavierUniform, rng,
                );
                let c2 = Conv2dP::register(
                    store, &format!("inp.res{b}.c2"), c4, c4, 3, 1, 1, 1, true,
                    Init::Zeros, rng,
                );
                (c1, c2)
            })
            .collect();
        let mut steps = Vec::new();
        for i in (1..STAGES).rev() {
            let c = crate::decoder_seg::reduced_channels(cfg, i);
            let name = format!("inp.s{i}");
            let fallback = store.add(
                &format!("{name}.fallback"),
                &[1, c * FILL_PATCH * FILL_PATCH],
                Init::Normal(0.1),
                rng,
            );
            let hdc = [
                Conv2dP::register(
                    store, &format!("{name}.hdc1"), c, c, 3, 1, 1, 1, true,
                    Init::XavierUniform, rng,
                ),
                Conv2dP::register(
                    store, &format!("{name}.hdc2"), c, c, 3, 1, 2, 2, true,
                    Init::XavierUniform, rng,
                ),
                Conv2dP::register(
                    store, &format!("{name}.hdc5"), c, c, 3, 1, 5, 5, true,
                    Init::Zeros, rng,
                ),
            ];
            let rgb = Conv2dP::register(
                store, &format!("{name}.rgb"), c, 3, 1, 1, 0, 1, true,
                Init::XavierUniform, rng,
            );
            steps.push(InpStageP { fallback, hdc, rgb });
        }
        InpDecoderP { res, steps }
    }

    /// Step refining down to `stage` (3, 2, or 1).
    pub fn step(&self, stage: usize) -> &InpStageP {
        &self.steps[STAGES - 1 - stage]
    }
}

/// Four residual blocks over the deepest fused map; shape preserved. The
/// second convolution of each block starts at zero, so an untrained
/// decoder is the identity here.
pub fn init_residual(g: &mut Graph, binder: &mut Binder, p: &InpDecoderP, p4: Var) -> Var {
    let mut x = p4;
    for (c1, c2) in &p.res {
        let a = c1.apply(g, binder, x);
        let a = g.relu(a);
        let b = c2.apply(g, binder, a);
        x = g.add(x, b);
    }
    x
}

/// Thresholds sigmoid(logits) at θ (strict) into a boolean foreground
/// mask. Works on values only — no gradient flows through the mask.
pub fn binarize_mask(g: &Graph, logits: Var, theta: f64) -> Vec<bool> {
    assert!((0.0..1.0).contains(&theta) && theta > 0.0, "θ must lie in (0,1)");
    g.value(logits)
        .iter()
        .map(|&l| 1.0 / (1.0 + (-l).exp()) > theta)
        .collect()
}

/// Zeroes masked pixels across all channels.
pub fn hole_out(g: &mut Graph, x: Var, mask: &[bool]) -> Var {
    g.masked_zero(x, mask)
}

/// Cosine similarities between interior and exterior patch vectors of the
/// context map, `(N, M)`. The context map must already live on the grid
/// (one pixel per cell). Returns `None` when the map has no exterior cell.
pub fn patch_similarity(g: &mut Graph, ctx: Var, grid: &PatchGrid) -> Option<Var> {
    if grid.exterior.is_empty() || grid.interior.is_empty() {
        return None;
    }
    let d = g.dims(ctx).to_vec();
    assert_eq!(
        (d[1], d[2]),
        (grid.gh, grid.gw),
        "context map must be aligned to the patch grid"
    );
    let int_rows = g.extract_patches(ctx, &grid.interior, 1); // (N, C)
    let ext_rows = g.extract_patches(ctx, &grid.exterior, 1); // (M, C)
    let dots = g.matmul_nt(int_rows, ext_rows); // (N, M)
    let int_t = g.transpose(int_rows);
    let ext_t = g.transpose(ext_rows);
    let ni = g.col_norm_eps(int_t, PATCH_NORM_EPS); // (1, N)
    let ne = g.col_norm_eps(ext_t, PATCH_NORM_EPS); // (1, M)
    Some(g.div_outer(dots, ni, ne))
}

/// Row-wise softmax over exterior patches: each interior patch's fill
/// weights sum to 1.
pub fn attention_scores(g: &mut Graph, sims: Var) -> Var {
    g.softmax_rows(sims)
}

/// Fills interior patches of the (holed) feature map with α-weighted sums
/// of its exterior patches; exterior pixels are copied unchanged. With no
/// interior the map passes through; with no exterior every interior patch
/// takes the learned fallback row.
pub fn fill(
    g: &mut Graph,
    binder: &mut Binder,
    step: &InpStageP,
    alpha: Option<Var>,
    s: Var,
    grid: &PatchGrid,
    mask: &[bool],
) -> Var {
    let base = hole_out(g, s, mask);
    if grid.interior.is_empty() {
        return base;
    }
    let n = grid.interior.len();
    let rows = match alpha {
        Some(alpha) => {
            let ext_rows = g.extract_patches(s, &grid.exterior, grid.patch); // (M, c·p²)
            g.matmul(alpha, ext_rows) // (N, c·p²)
        }
        None => {
            // fully masked: broadcast the learned fallback patch to every
            // interior cell
            let fb = binder.var(g, step.fallback); // (1, c·p²)
            let ones = g.constant(Tensor::filled(&[n, 1], 1.0));
            g.matmul(ones, fb)
        }
    };
    g.scatter_patches(base, rows, &grid.interior, grid.patch)
}

/// Hybrid dilated refinement: conv(rate 1) → conv(rate 2) → conv(rate 5)
/// with leaky activations, added back to the input.
pub fn hdc_refine(g: &mut Graph, binder: &mut Binder, step: &InpStageP, x: Var) -> Var {
    let mut y = x;
    for (i, conv) in step.hdc.iter().enumerate() {
        y = conv.apply(g, binder, y);
        if i + 1 < step.hdc.len() {
            y = g.leaky_relu(y, 0.2);
        }
    }
    g.add(x, y)
}

/// 1×1 RGB decode of an inpainting map.
pub fn rgb_head(g: &mut Graph, binder: &mut Binder, step: &InpStageP, x: Var) -> Var {
    step.rgb.apply(g, binder, x)
}

/// One full filling step at `stage`: holes out the segmentation features
/// under `mask`, computes fill attention from the coarser inpainting map,
/// fills, and refines. Returns the refined map and whether the fallback
/// path was taken.
#[allow(clippy::too_many_arguments)]
pub fn fill_stage(
    g: &mut Graph,
    binder: &mut Binder,
    step: &InpStageP,
    s_i: Var,
    i_coarse: Var,
    mask: &[bool],
) -> Result<(Var, bool)> {
    let d = g.dims(s_i).to_vec();
    let grid = PatchGrid::from_mask(mask, d[1], d[2], FILL_PATCH);
    let dc = g.dims(i_coarse).to_vec();
    if (dc[1], dc[2]) != (grid.gh, grid.gw) {
        return Err(RorError::shape(
            format!("context ({},{})", grid.gh, grid.gw),
            format!("({},{})", dc[1], dc[2]),
        ));
    }
    let sims = patch_similarity(g, i_coarse, &grid);
    let fallback = sims.is_none() && !grid.interior.is_empty();
    let alpha = sims.map(|s| attention_scores(g, s));
    let filled = fill(g, binder, step, alpha, s_i, &grid, mask);
    Ok((hdc_refine(g, binder, step, filled), fallback))
}
