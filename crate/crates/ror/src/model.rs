//! Full network assembly: the expression-conditioned encoder/fusion stack,
//! the segmentation decoder, and the attention-based filling decoder,
//! producing a full-resolution object mask and an inpainted image.

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Tensor, Var};
use crate::decoder_inp::{binarize_mask, fill_stage, init_residual, rgb_head, InpDecoderP};
use crate::decoder_seg::{decode_segmentation, SegDecoderP, SegPyramid};
use crate::encoder::{encode_image, EncoderConfig, EncoderP, STAGES};
use crate::fusion::{fuse_stage, FusionStageP};
use crate::nn::{Binder, ParamStore};
use crate::textproc::{RoleTags, TextEncoderP};
use crate::{Result, RorError};

/// Hyperparameters of the full network.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ModelConfig {
    pub encoder: EncoderConfig,
    /// Width of the expression embeddings (split evenly between the two
    /// recurrent directions).
    pub text_dim: usize,
    /// Sigmoid threshold binarizing mask logits for the filling decoder.
    pub theta: f64,
}

impl Default for ModelConfig {
    /// Desk-scale profile: small enough to train on a CPU in minutes.
    fn default() -> Self {
        ModelConfig {
            encoder: EncoderConfig {
                side: 64,
                patch: 2,
                base_channels: 8,
            },
            text_dim: 16,
            theta: 0.5,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        self.encoder.validate()?;
        if self.text_dim < 2 || self.text_dim % 2 != 0 {
            return Err(RorError::Config(format!(
                "text_dim must be even and at least 2, got {}",
                self.text_dim
            )));
        }
        if !(self.theta > 0.0 && self.theta < 1.0) {
            return Err(RorError::Config(format!(
                "theta must lie in (0, 1), got {}",
                self.theta
            )));
        }
        Ok(())
    }
}

/// All generator-side parameters.
pub struct ModelP {
    pub text: TextEncoderP,
    pub encoder: EncoderP,
    pub fusion: Vec<FusionStageP>,
    pub seg: SegDecoderP,
    pub inp: InpDecoderP,
}

/// Registers every generator parameter in deterministic order.
pub fn register_model(
    store: &mut ParamStore,
    cfg: &ModelConfig,
    vocab_size: usize,
    rng: &mut ChaCha8Rng,
) -> Result<ModelP> {
    cfg.validate()?;
    let text = TextEncoderP::register(store, vocab_size, cfg.text_dim, rng);
    let encoder = EncoderP::register(store, cfg.encoder.clone(), rng);
    let fusion = (1..=STAGES)
        .map(|i| {
            FusionStageP::register(
                store,
                &format!("fuse.s{i}"),
                cfg.encoder.channels(i),
                cfg.text_dim,
                rng,
            )
        })
        .collect();
    let seg = SegDecoderP::register(store, &cfg.encoder, rng);
    let inp = InpDecoderP::register(store, &cfg.encoder, rng);
    Ok(ModelP {
        text,
        encoder,
        fusion,
        seg,
        inp,
    })
}

/// Everything one forward pass produces, still attached to the graph.
pub struct ForwardOutput {
    /// Segmentation maps and per-scale mask logits.
    pub seg: SegPyramid,
    /// Inpainted RGB maps for scales 1..3 (index 0 = finest).
    pub rgbs: [Var; STAGES - 1],
    /// Finest RGB bilinearly upsampled to the input resolution.
    pub final_rgb: Var,
    /// Finest mask logits bilinearly upsampled to the input resolution.
    pub mask_logits_full: Var,
    /// Per-stage flag: the filling fell back to the learned context patch
    /// because the predicted mask covered the whole map.
    pub used_fallback: [bool; STAGES - 1],
}

/// Full forward pass over one image/expression pair.
pub fn forward(
    g: &mut Graph,
    binder: &mut Binder,
    p: &ModelP,
    cfg: &ModelConfig,
    image: Var,
    ids: &[u32],
    tags: &RoleTags,
) -> Result<ForwardOutput> {
    let emb = p.text.extract_embeddings(g, binder, ids, tags)?;
    let pyramid = encode_image(g, binder, &p.encoder, image)?;
    let fused: Vec<Var> = (0..STAGES)
        .map(|i| fuse_stage(g, binder, &p.fusion[i], pyramid.v[i], &emb))
        .collect();
    let fused: [Var; STAGES] = [fused[0], fused[1], fused[2], fused[3]];
    let seg = decode_segmentation(g, binder, &p.seg, &fused);

    let mut coarse = init_residual(g, binder, &p.inp, seg.s[STAGES - 1]);
    let mut rgbs_rev = Vec::with_capacity(STAGES - 1);
    let mut used_fallback = [false; STAGES - 1];
    for stage in (1..STAGES).rev() {
        let step = p.inp.step(stage);
        let mask = binarize_mask(g, seg.logits[stage - 1], cfg.theta);
        let (filled, fb) = fill_stage(g, binder, step, seg.s[stage - 1], coarse, &mask)?;
        used_fallback[stage - 1] = fb;
        rgbs_rev.push(rgb_head(g, binder, step, filled));
        coarse = filled;
    }
    rgbs_rev.reverse();
    let rgbs: [Var; STAGES - 1] = [rgbs_rev[0], rgbs_rev[1], rgbs_rev[2]];

    let side = cfg.encoder.side;
    let final_rgb = g.bilinear_resize(rgbs[0], side, side);
    let mask_logits_full = g.bilinear_resize(seg.logits[0], side, side);
    Ok(ForwardOutput {
        seg,
        rgbs,
        final_rgb,
        mask_logits_full,
        used_fallback,
    })
}

/// Detached inference result.
#[derive(Debug, Clone)]
pub struct Inference {
    /// Sigmoid mask probabilities at input resolution `(1, side, side)`.
    pub mask_probs: Tensor,
    /// Inpainted image at input resolution, clamped to `[0, 1]`.
    pub rgb: Tensor,
    /// Largest mask probability; below θ means the expression matched
    /// nothing the network is confident about.
    pub max_prob: f64,
    pub low_confidence: bool,
    /// Whether any filling stage used the learned fallback patch.
    pub used_fallback: bool,
}

/// Runs one inference pass on a throwaway graph.
pub fn infer(
    store: &ParamStore,
    p: &ModelP,
    cfg: &ModelConfig,
    image: &Tensor,
    ids: &[u32],
    tags: &RoleTags,
) -> Result<Inference> {
    let mut g = Graph::new();
    let mut binder = Binder::new(store);
    let img = g.constant(image.clone());
    let out = forward(&mut g, &mut binder, p, cfg, img, ids, tags)?;
    let probs: Vec<f64> = g
        .value(out.mask_logits_full)
        .iter()
        .map(|&l| 1.0 / (1.0 + (-l).exp()))
        .collect();
    let max_prob = probs.iter().cloned().fold(0.0, f64::max);
    let side = cfg.encoder.side;
    let rgb: Vec<f64> = g
        .value(out.final_rgb)
        .iter()
        .map(|&v| v.clamp(0.0, 1.0))
        .collect();
    Ok(Inference {
        mask_probs: Tensor::from_vec(&[1, side, side], probs),
        rgb: Tensor::from_vec(&[3, side, side], rgb),
        max_prob,
        low_confidence: max_prob < cfg.theta,
        used_fallback: out.used_fallback.iter().any(|&b| b),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::textproc::RoleLabel;
    use rand::SeedableRng;

    fn tiny_cfg() -> ModelConfig {
        ModelConfig {
            encoder: EncoderConfig {
                side: 32,
                patch: 2,
                base_channels: 4,
            },
            text_dim: 8,
            theta: 0.5,
        }
    }

    fn tags_iw_aw() -> RoleTags {
        // "remove red ball": O, B-AW, B-IW
        RoleTags::try_new(vec![
            RoleLabel::Outside,
            RoleLabel::BeginAttribute,
            RoleLabel::BeginIdentity,
        ])
        .unwrap()
    }

    fn build(seed: u64) -> (ParamStore, ModelP, ModelConfig) {
        let cfg = tiny_cfg();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let p = register_model(&mut store, &cfg, 12, &mut rng).unwrap();
        (store, p, cfg)
    }

    #[test]
    fn config_validation_catches_bad_fields() {
        let mut c = tiny_cfg();
        assert!(c.validate().is_ok());
        c.text_dim = 7;
        assert!(c.validate().is_err());
        c.text_dim = 8;
        c.theta = 1.0;
        assert!(c.validate().is_err());
        c.theta = 0.5;
        c.encoder.side = 30;
        assert!(c.validate().is_err());

        let desk = ModelConfig::default();
        assert!(desk.validate().is_ok());
        assert_eq!(desk.encoder.side, 64);
        assert_eq!(desk.encoder.patch, 2);
    }

    #[test]
    fn forward_emits_the_contracted_shapes() {
        let (store, p, cfg) = build(1);
        let mut g = Graph::new();
        let mut binder = Binder::new(&store);
        let img = g.constant(Tensor::from_fn(&[3, 32, 32], |i| {
            ((i % 97) as f64) / 96.0
        }));
        let out = forward(&mut g, &mut binder, &p, &cfg, img, &[4, 5, 6], &tags_iw_aw()).unwrap();
        assert_eq!(g.dims(out.final_rgb), &[3, 32, 32]);
        assert_eq!(g.dims(out.mask_logits_full), &[1, 32, 32]);
        assert_eq!(g.dims(out.rgbs[0]), &[3, 16, 16]);
        assert_eq!(g.dims(out.rgbs[1]), &[3, 8, 8]);
        assert_eq!(g.dims(out.rgbs[2]), &[3, 4, 4]);
        assert_eq!(g.dims(out.seg.logits[0]), &[1, 16, 16]);
        assert_eq!(g.dims(out.seg.logits[1]), &[1, 8, 8]);
        assert_eq!(g.dims(out.seg.logits[2]), &[1, 4, 4]);
        assert!(g.value(out.final_rgb).iter().all(|v| v.is_finite()));
    }

    #[test]
    fn forward_is_deterministic_across_rebuilds() {
        let img_t = Tensor::from_fn(&[3, 32, 32], |i| ((i % 53) as f64) / 52.0);
        let run = || {
            let (store, p, cfg) = build(7);
            let mut g = Graph::new();
            let mut binder = Binder::new(&store);
            let img = g.constant(img_t.clone());
            let out = forward(&mut g, &mut binder, &p, &cfg, img, &[2, 9], &{
                RoleTags::try_new(vec![RoleLabel::Outside, RoleLabel::BeginIdentity]).unwrap()
            })
            .unwrap();
            (
                g.value(out.final_rgb).data().to_vec(),
                g.value(out.mask_logits_full).data().to_vec(),
            )
        };
        let (a_rgb, a_mask) = run();
        let (b_rgb, b_mask) = run();
        assert_eq!(a_rgb, b_rgb, "rgb output not bitwise deterministic");
        assert_eq!(a_mask, b_mask, "mask output not bitwise deterministic");
    }

    #[test]
    fn gradients_reach_all_major_parameter_groups() {
        let (store, p, cfg) = build(3);
        let mut g = Graph::new();
        let mut binder = Binder::new(&store);
        let img = g.constant(Tensor::from_fn(&[3, 32, 32], |i| ((i % 31) as f64) / 30.0));
        let out = forward(&mut g, &mut binder, &p, &cfg, img, &[4, 5, 6], &tags_iw_aw()).unwrap();

        // a crude scalar touching both network heads
        let m = g.sum_all(out.mask_logits_full);
        let sq = g.mul(out.final_rgb, out.final_rgb);
        let r = g.sum_all(sq);
        let loss = g.add(m, r);
        let mut grads = g.backward(loss);
        let mut accum = crate::nn::GradAccum::for_store(&store);
        binder.collect_into(&mut grads, &mut accum);

        for prefix in ["text.", "enc.", "fuse.", "seg.", "inp."] {
            let mut saw = false;
            for id in store.ids() {
                if store.name(id).starts_with(prefix) {
                    if let Some(gr) = accum.get(id) {
                        if gr.iter().any(|&v| v != 0.0) {
                            saw = true;
                            break;
                        }
                    }
                }
            }
            assert!(saw, "no nonzero gradient reached any '{prefix}' parameter");
        }
    }

    #[test]
    fn infer_clamps_and_flags_confidence() {
        let (store, p, cfg) = build(5);
        let img = Tensor::from_fn(&[3, 32, 32], |i| ((i % 11) as f64) / 10.0);
        let inf = infer(&store, &p, &cfg, &img, &[4, 5, 6], &tags_iw_aw()).unwrap();
        assert_eq!(inf.mask_probs.dims(), &[1, 32, 32]);
        assert_eq!(inf.rgb.dims(), &[3, 32, 32]);
        assert!(inf.rgb.iter().all(|&v| (0.0..=1.0).contains(&v)));
        assert!(inf.mask_probs.iter().all(|&v| (0.0..=1.0).contains(&v)));
        assert_eq!(inf.low_confidence, inf.max_prob < cfg.theta);

        // inference is deterministic
        let again = infer(&store, &p, &cfg, &img, &[4, 5, 6], &tags_iw_aw()).unwrap();
        assert_eq!(inf.rgb.data(), again.rgb.data());
        assert_eq!(inf.mask_probs.data(), again.mask_probs.data());
    }
}
