//! Aligned segmentation decoder. Starting from a bottleneck over the
//! deepest fused map, each coarse-to-fine step upsamples the running
//! segmentation features, predicts per-pixel offsets from the concatenated
//! (reduced) visual and segmentation maps, realigns with a 3×3 deformable
//! convolution, and adds the reduced visual map. A 1×1 head emits mask
//! logits per scale.

use rand_chacha::ChaCha8Rng;

use crate::autograd::{Graph, Var};
use crate::encoder::{AttnBlockP, EncoderConfig, STAGES};
use crate::nn::{Binder, Conv2dP, Init, ParamId, ParamStore};
use crate::{Result, RorError};

/// Offset channels of a 3×3 deformable kernel: (Δy, Δx) per tap.
pub const OFFSET_CHANNELS: usize = 18;

/// Reduced channel width used by the decoders at stage `i`: half the
/// encoder width, except the deepest stage which keeps its full width.
pub fn reduced_channels(cfg: &EncoderConfig, stage: usize) -> usize {
    if stage == STAGES {
        cfg.channels(stage)
    } else {
        cfg.channels(stage) / 2
    }
}

/// Parameters of one refinement step from stage `i+1` down to stage `i`.
pub struct SegStageP {
    /// 1×1 reduction applied to the upsampled segmentation features.
    reduce_s: Conv2dP,
    /// 1×1 reduction applied to the fused visual map of stage `i`.
    reduce_v: Conv2dP,
    /// Offset-prediction 3×3 convolution `f_1`, zero-initialized so the
    /// first forward behaves like a standard convolution.
    offsets: Conv2dP,
    /// Deformable 3×3 kernel weights `f_2`, shape `(C'_i, C'_i, 3, 3)`.
    deform_w: ParamId,
    /// 1×1 mask-logit head for this scale.
    mask: Conv2dP,
}

/// All segmentation-decoder parameters.
pub struct SegDecoderP {
    bottleneck: Vec<AttnBlockP>,
    /// Steps for stages 3, 2, 1 (index 0 refines 4→3).
    steps: Vec<SegStageP>,
}

impl SegDecoderP {
    pub fn register(store: &mut ParamStore, cfg: &EncoderConfig, rng: &mut ChaCha8Rng) -> Self {
        let c4 = cfg.channels(STAGES);
        let bottleneck = (0..2)
            .map(|b| AttnBlockP::register(store, &format!("seg.neck.b{b}"), c4, rng))
            .collect();
        let mut steps = Vec::new();
        for i in (1..STAGES).rev() {
            let c_in = reduced_channels(cfg, i + 1);
            let c_out = reduced_channels(cfg, i);
            let name = format!("seg.s{i}");
            let reduce_s = Conv2dP::register(
                store, &format!("{name}.rs"), c_in, c_out, 1, 1, 0, 1, true,
                Init::XavierUniform, rng,
            );
            let reduce_v = Conv2dP::register(
                store, &format!("{name}.rv"), cfg.channels(i), c_out, 1, 1, 0, 1, true,
                Init::XavierUniform, rng,
            );
            let offsets = Conv2dP::register(
                store, &format!("{name}.f1"), 2 * c_out, OFFSET_CHANNELS, 3, 1, 1, 1, true,
                Init::Zeros, rng,
            );
            let deform_w = store.add(
                &format!("{name}.f2"),
                &[c_out, c_out, 3, 3],
                Init::XavierUniform,
                rng,
            );
            let mask = Conv2dP::register(
                store, &format!("{name}.mask"), c_out, 1, 1, 1, 0, 1, true,
                Init::XavierUniform, rng,
            );
            steps.push(SegStageP {
                reduce_s,
                reduce_v,
                offsets,
                deform_w,
                mask,
            });
        }
        SegDecoderP { bottleneck, steps }
    }

    /// Step refining down to `stage` (3, 2, or 1).
    pub fn step(&self, stage: usize) -> &SegStageP {
        // steps[0] refines down to stage 3, steps[2] down to stage 1
        &self.steps[STAGES - 1 - stage]
    }
}

/// Segmentation features and per-scale mask logits. Index 0 is stage 1
/// (finest); `s[i]` has the reduced width of stage `i+1`, logits exist for
/// stages 1..3.
pub struct SegPyramid {
    pub s: [Var; STAGES],
    /// Mask logits `(1, H_i, W_i)` for stages 1, 2, 3.
    pub logits: [Var; STAGES - 1],
}

/// Bottleneck over the deepest fused map: two self-attention blocks, shape
/// preserved.
pub fn init_bottleneck(g: &mut Graph, binder: &mut Binder, p: &SegDecoderP, p4: Var) -> Var {
    let mut x = p4;
    for block in &p.bottleneck {
        x = block.apply(g, binder, x);
    }
    x
}

/// Upsamples the coarser segmentation features by 2 and reduces both maps
/// to the stage's working width: returns `(S̃_{i+1}, Ṽ_i)`.
pub fn upsample_reduce(
    g: &mut Graph,
    binder: &mut Binder,
    step: &SegStageP,
    s_coarse: Var,
    v_fine: Var,
) -> (Var, Var) {
    let d = g.dims(v_fine).to_vec();
    let up = g.bilinear_resize(s_coarse, d[1], d[2]);
    let s_t = step.reduce_s.apply(g, binder, up);
    let v_t = step.reduce_v.apply(g, binder, v_fine);
    (s_t, v_t)
}

/// Predicts the 18-channel offset field from the concatenated maps.
pub fn predict_offsets(
    g: &mut Graph,
    binder: &mut Binder,
    step: &SegStageP,
    v_t: Var,
    s_t: Var,
) -> Var {
    let cat = g.concat_dim0(&[v_t, s_t]);
    step.offsets.apply(g, binder, cat)
}

/// 3×3 deformable convolution of the upsampled segmentation features under
/// the predicted offsets.
pub fn deform_align(g: &mut Graph, binder: &mut Binder, step: &SegStageP, s_t: Var, off: Var) -> Var {
    let w = binder.var(g, step.deform_w);
    g.deform_conv3x3(s_t, w, off)
}

/// Elementwise sum of the aligned segmentation features and the reduced
/// visual map.
pub fn fuse_add(g: &mut Graph, s_hat: Var, v_t: Var) -> Result<Var> {
    if g.dims(s_hat) != g.dims(v_t) {
        return Err(RorError::shape(
            format!("{:?}", g.dims(s_hat)),
            format!("{:?}", g.dims(v_t)),
        ));
    }
    Ok(g.add(s_hat, v_t))
}

/// 1×1 projection to one logit channel; no activation (losses and the
/// binarizer apply the sigmoid).
pub fn mask_head(g: &mut Graph, binder: &mut Binder, step: &SegStageP, s: Var) -> Var {
    step.mask.apply(g, binder, s)
}

/// Runs the full segmentation decoder over the fused pyramid (index 0 =
/// stage 1, finest).
pub fn decode_segmentation(
    g: &mut Graph,
    binder: &mut Binder,
    p: &SegDecoderP,
    fused: &[Var; STAGES],
) -> SegPyramid {
    let s4 = init_bottleneck(g, binder, p, fused[STAGES - 1]);
    let mut s = vec![s4; STAGES];
    let mut logits = Vec::with_capacity(STAGES - 1);
    for stage in (1..STAGES).rev() {
        let step = p.step(stage);
        let (s_t, v_t) = upsample_reduce(g, binder, step, s[stage], fused[stage - 1]);
        let off = predict_offsets(g, binder, step, v_t, s_t);
        let s_hat = deform_align(g, binder, step, s_t, off);
        let si = fuse_add(g, s_hat, v_t).expect("pyramid shapes are consistent");
        s[stage - 1] = si;
        logits.push(mask_head(g, binder, step, si));
    }
    logits.reverse(); // now index 0 = stage 1
    SegPyramid {
        s: [s[0], s[1], s[2], s[3]],
        logits: [logits[0], logits[1], logits[2]],
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autograd::{finite_diff, Tensor};
    use rand::{Rng, SeedableRng};

    fn small_cfg() -> EncoderConfig {
        EncoderConfig {
            side: 32,
            patch: 2,
            base_channels: 4,
        }
    }

    fn decoder(seed: u64) -> (ParamStore, SegDecoderP, EncoderConfig) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let cfg = small_cfg();
        let mut store = ParamStore::new();
        let p = SegDecoderP::register(&mut store, &cfg, &mut rng);
        (store, p, cfg)
    }

    fn random_pyramid(g: &mut Graph, cfg: &EncoderConfig, rng: &mut ChaCha8Rng) -> [Var; STAGES] {
        let mk = |g: &mut Graph, c: usize, h: usize, rng: &mut ChaCha8Rng| {
            g.constant(Tensor::from_fn(&[c, h, h], |_| rng.gen::<f64>() - 0.5))
        };
        [
            mk(g, cfg.channels(1), cfg.spatial(1), rng),
            mk(g, cfg.channels(2), cfg.spatial(2), rng),
            mk(g, cfg.channels(3), cfg.spatial(3), rng),
            mk(g, cfg.channels(4), cfg.spatial(4), rng),
        ]
    }

    #[test]
    fn bottleneck_preserves_shape_and_passes_gradient() {
        let (store, p, cfg) = decoder(1);
        let mut g = Graph::new();
        let mut binder = Binder::new(&store);
        let c4 = cfg.channels(4);
        let h4 = cfg.spatial(4);
        let p4 = g.leaf(Tensor::from_fn(&[c4, h4, h4], |i| (i as f64).sin() * 0.3));
        let s4 = init_bottleneck(&mut g, &mut binder, &p, p4);
        assert_eq!(g.dims(s4), &[c4, h4, h4]);

        let loss = g.sum_all(s4);
        let grads = g.backward(loss);
        assert!(grads.wrt(p4).iter().any(|&x| x != 0.0));
    }

    #[test]
    fn decode_emits_the_contracted_shapes() {
        let (store, p, cfg) = decoder(2);
        let mut rng = ChaCha8Rng::seed_from_u64(20);
        let mut g = Graph::new();
        let mut binder = Binder::new(&store);
        let fused = random_pyramid(&mut g, &cfg, &mut rng);
        let pyr = decode_segmentation(&mut g, &mut binder, &p, &fused);
        for i in 1..=STAGES {
            let want_c = reduced_channels(&cfg, i);
            let h = cfg.spatial(i);
            assert_eq!(g.dims(pyr.s[i - 1]), &[want_c, h, h], "stage {i}");
        }
        for (idx, lg) in pyr.logits.iter().enumerate() {
            let h = cfg.spatial(idx + 1);
            assert_eq!(g.dims(*lg), &[1, h, h], "logits stage {}", idx + 1);
        }
    }

    #[test]
    fn zero_initialized_offsets_reduce_to_standard_convolution() {
        let (store, p, cfg) = decoder(3);
        let mut rng = ChaCha8Rng::seed_from_u64(30);
        let mut g = Graph::new();
        let mut binder = Binder::new(&store);
        let fused = random_pyramid(&mut g, &cfg, &mut rng);
        let step = p.step(3);
        let (s_t, v_t) = upsample_reduce(&mut g, &mut binder, step, fused[3], fused[2]);
        let off = predict_offsets(&mut g, &mut binder, step, v_t, s_t);
        assert!(
            g.value(off).iter().all(|&x| x == 0.0),
            "f_1 must start at zero"
        );
        let aligned = deform_align(&mut g, &mut binder, step, s_t, off);
        let w = binder.var(&mut g, step.deform_w);
        let standard = g.conv2d(s_t, w, 1, 1, 1);
        let diff = g
            .value(aligned)
            .iter()
            .zip(g.value(standard).iter())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        assert!(diff < 1e-6, "zero-offset mismatch {diff}");
    }

    #[test]
    fn constant_maps_stay_constant_under_offsets_in_the_interior() {
        // partition of unity: bilinear taps of a constant map give the
        // constant at interior pixels regardless of (small) offsets
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut g = Graph::new();
        let x = g.constant(Tensor::filled(&[1, 6, 6], 2.5));
        // single center-tap kernel with weight 1
        let mut wt = vec![0.0; 9];
        wt[4] = 1.0;
        let w = g.constant(Tensor::from_vec(&[1, 1, 3, 3], wt));
        let off = g.constant(Tensor::from_fn(&[18, 6, 6], |_| rng.gen::<f64>() * 0.8 - 0.4));
        let y = g.deform_conv3x3(x, w, off);
        for iy in 2..4 {
            for ix in 2..4 {
                let v = g.value(y).at3(0, iy, ix);
                assert!((v - 2.5).abs() < 1e-9, "interior ({iy},{ix}) = {v}");
            }
        }
    }

    #[test]
    fn width_ramp_with_center_tap_samples_shifted_values() {
        // f(x) = x, center tap weight 1, offset (+0.5 in x): interior
        // pixels read x + 0.5
        let mut g = Graph::new();
        let x = g.constant(Tensor::from_fn(&[1, 5, 5], |i| (i % 5) as f64));
        let mut wt = vec![0.0; 9];
        wt[4] = 1.0;
        let w = g.constant(Tensor::from_vec(&[1, 1, 3, 3], wt));
        // channel layout: 2t = Δy, 2t+1 = Δx for tap t; center tap t=4
        let off = g.constant(Tensor::from_fn(&[18, 5, 5], |i| {
            if i / 25 == 9 { 0.5 } else { 0.0 }
        }));
        let y = g.deform_conv3x3(x, w, off);
        for iy in 1..4 {
            for ix in 1..3 {
                let v = g.value(y).at3(0, iy, ix);
                assert!((v - (ix as f64 + 0.5)).abs() < 1e-9, "({iy},{ix}) = {v}");
            }
        }
    }

    #[test]
    fn upsample_reduce_handles_constants_and_hand_bilinear() {
        let (store, p, _cfg) = decoder(5);
        let step = p.step(3);
        // identity-free check on the raw resize: constant map stays constant
        let mut g = Graph::new();
        let c = g.constant(Tensor::filled(&[2, 2, 2], 3.25));
        let up = g.bilinear_resize(c, 4, 4);
        assert!(g.value(up).iter().all(|&v| (v - 3.25).abs() < 1e-12));

        // 2x2 ramp [[0,1],[2,3]] upsampled to 4x4, half-pixel centers:
        // corners replicate, interior interpolates at quarter fractions
        let mut g2 = Graph::new();
        let ramp = g2.constant(Tensor::from_vec(&[1, 2, 2], vec![0.0, 1.0, 2.0, 3.0]));
        let up2 = g2.bilinear_resize(ramp, 4, 4);
        let want = [
            0.0, 0.25, 0.75, 1.0,
            0.5, 0.75, 1.25, 1.5,
            1.5, 1.75, 2.25, 2.5,
            2.0, 2.25, 2.75, 3.0,
        ];
        for (got, want) in g2.value(up2).iter().zip(want.iter()) {
            assert!((got - want).abs() < 1e-12, "{got} vs {want}");
        }

        // full op keeps the contracted output shape
        let mut g3 = Graph::new();
        let mut binder = Binder::new(&store);
        // stage-3 step: coarse features carry C'_4 = 32, fine carry C_3 = 16
        let s_c = g3.constant(Tensor::from_fn(&[32, 4, 4], |i| i as f64 * 0.01));
        let v_f = g3.constant(Tensor::from_fn(&[16, 8, 8], |i| i as f64 * -0.01));
        let (s_t, v_t) = upsample_reduce(&mut g3, &mut binder, step, s_c, v_f);
        assert_eq!(g3.dims(s_t), &[8, 8, 8]);
        assert_eq!(g3.dims(v_t), &[8, 8, 8]);
    }

    #[test]
    fn fuse_add_sums_and_rejects_mismatches() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::from_fn(&[2, 2, 2], |i| i as f64));
        let z = g.constant(Tensor::zeros(&[2, 2, 2]));
        let s = fuse_add(&mut g, a, z).unwrap();
        assert_eq!(g.value(s).data(), g.value(a).data());
        let bad = g.constant(Tensor::zeros(&[2, 2, 1]));
        assert!(fuse_add(&mut g, a, bad).is_err());
    }

    #[test]
    fn deform_align_gradients_match_finite_differences() {
        // gradient wrt the segmentation features THROUGH the offset
        // prediction (offsets vary with the input via f_1)
        let (mut store, p, _cfg) = decoder(6);
        let mut rng = ChaCha8Rng::seed_from_u64(60);
        let step_idx = 2; // stage-1 step has the smallest channel width
        // give f_1 nonzero weights so offset gradients are exercised
        {
            let step = &p.steps[step_idx];
            let wid = step.offsets.w;
            let n = store.data(wid).len();
            let vals: Vec<f64> = (0..n).map(|_| (rng.gen::<f64>() - 0.5) * 0.3).collect();
            store.data_mut(wid).copy_from_slice(&vals);
        }
        let step = &p.steps[step_idx];
        let x0: Vec<f64> = (0..2 * 4 * 4).map(|_| rng.gen::<f64>() - 0.5).collect();

        let forward = |xs: &[f64]| -> f64 {
            let mut g = Graph::new();
            let mut binder = Binder::new(&store);
            let s_t = g.leaf(Tensor::from_vec(&[2, 4, 4], xs.to_vec()));
            let v_t = g.constant(Tensor::from_fn(&[2, 4, 4], |i| (i as f64 * 0.37).cos()));
            let off = predict_offsets(&mut g, &mut binder, step, v_t, s_t);
            let aligned = deform_align(&mut g, &mut binder, step, s_t, off);
            let sq = g.mul(aligned, aligned);
            let s = g.sum_all(sq);
            g.value(s).item()
        };

        let mut g = Graph::new();
        let mut binder = Binder::new(&store);
        let s_t = g.leaf(Tensor::from_vec(&[2, 4, 4], x0.clone()));
        let v_t = g.constant(Tensor::from_fn(&[2, 4, 4], |i| (i as f64 * 0.37).cos()));
        let off = predict_offsets(&mut g, &mut binder, step, v_t, s_t);
        let aligned = deform_align(&mut g, &mut binder, step, s_t, off);
        let sq = g.mul(aligned, aligned);
        let s = g.sum_all(sq);
        let grads = g.backward(s);
        let analytic = grads.wrt(s_t).to_vec();

        let mut f = forward;
        let report = finite_diff(&mut f, &x0, &analytic, 1e-6);
        assert!(
            report.passes(1e-3),
            "deform_align gradient FAIL: rel err {}",
            report.max_rel_err
        );
    }
}
