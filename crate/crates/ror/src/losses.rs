//! Training objectives: deeply-supervised segmentation loss, multi-scale
//! reconstruction loss, patch-adversarial losses, and their weighted total.
//!
//! The discriminator scores local patches (a 2-D grid of raw scores put
//! through a sigmoid); both adversarial terms are computed in logit space
//! via softplus, which is the epsilon-free stable form of the cross
//! entropies involved.

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{area_downsample_raw, Graph, Tensor, Var};
use crate::nn::{AdamW, Binder, Conv2dP, GradAccum, Init, ParamStore};
use crate::{Result, RorError};

/// Number of deeply-supervised scales (full-resolution heads are separate).
pub const SUPERVISED_SCALES: usize = 3;
/// Negative slope of the discriminator activations.
pub const DISC_LEAK: f64 = 0.2;

/// Weights of the total objective.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct LossWeights {
    pub rec: f64,
    pub adv: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights { rec: 5.0, adv: 20.0 }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        if self.rec < 0.0 || self.adv < 0.0 {
            return Err(RorError::Config(format!(
                "loss weights must be non-negative, got rec={} adv={}",
                self.rec, self.adv
            )));
        }
        Ok(())
    }
}

/// Receptive-field preset of the patch discriminator.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RfPreset {
    /// 16×16 patches: three strided/plain convolutions plus a 1×1 head.
    Rf16,
    /// 4×4 patches: a single strided convolution plus a 1×1 head.
    Rf4,
}

impl RfPreset {
    pub fn receptive_field(self) -> usize {
        match self {
            RfPreset::Rf16 => 16,
            RfPreset::Rf4 => 4,
        }
    }
}

/// Scalar summary of one optimization step's objective.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LossReport {
    pub seg: f64,
    pub rec: f64,
    pub adv: f64,
    pub total: f64,
    /// Per-scale segmentation terms, coarse last.
    pub seg_scales: Vec<f64>,
    /// Per-scale reconstruction terms, coarse last.
    pub rec_scales: Vec<f64>,
}

impl LossReport {
    /// Checks the composition identity `total = seg + w_rec·rec + w_adv·adv`
    /// at the given relative tolerance.
    pub fn composes(&self, w: &LossWeights, rel_tol: f64) -> bool {
        let want = self.seg + w.rec * self.rec + w.adv * self.adv;
        let scale = want.abs().max(1.0);
        (self.total - want).abs() <= rel_tol * scale
    }

    pub fn with_scale_breakdowns(mut self, seg: Vec<f64>, rec: Vec<f64>) -> Self {
        self.seg_scales = seg;
        self.rec_scales = rec;
        self
    }
}

/// Builds the report from the three scalar terms.
pub fn total_loss(seg: f64, rec: f64, adv: f64, w: &LossWeights) -> LossReport {
    LossReport {
        seg,
        rec,
        adv,
        total: seg + w.rec * rec + w.adv * adv,
        seg_scales: Vec::new(),
        rec_scales: Vec::new(),
    }
}

fn ensure_binary(gt: &Tensor) -> Result<()> {
    if gt.iter().any(|&v| v != 0.0 && v != 1.0) {
        return Err(RorError::InvalidInput(
            "ground-truth mask must be binary (0/1)".into(),
        ));
    }
    Ok(())
}

/// Deeply-supervised segmentation loss: every per-scale logit map is
/// bilinearly upsampled to the ground-truth resolution and scored with
/// sigmoid binary cross entropy, summed over pixels and scales.
/// Returns the total and the per-scale values.
pub fn seg_loss(g: &mut Graph, logits: &[Var], gt_mask: &Tensor) -> Result<(Var, Vec<f64>)> {
    ensure_binary(gt_mask)?;
    let gd = gt_mask.dims().to_vec();
    if gd.len() != 3 || gd[0] != 1 {
        return Err(RorError::shape("(1, h, w)", format!("{gd:?}")));
    }
    let gt = g.constant(gt_mask.clone());
    let mut per_scale = Vec::with_capacity(logits.len());
    let mut total: Option<Var> = None;
    for &l in logits {
        let d = g.dims(l).to_vec();
        if d.len() != 3 || d[0] != 1 {
            return Err(RorError::shape("(1, h, w) logits", format!("{d:?}")));
        }
        let up = if (d[1], d[2]) == (gd[1], gd[2]) {
            l
        } else {
            g.bilinear_resize(l, gd[1], gd[2])
        };
        let term = g.bce_with_logits_sum(up, gt);
        per_scale.push(g.value(term).item());
        total = Some(match total {
            Some(t) => g.add(t, term),
            None => term,
        });
    }
    let total = total.ok_or_else(|| RorError::InvalidInput("no logit scales given".into()))?;
    Ok((total, per_scale))
}

/// Multi-scale reconstruction loss: the ground-truth image is area-averaged
/// down to each scale's resolution and compared with mean absolute error;
/// scales are summed. Returns the total and the per-scale values.
pub fn rec_loss(g: &mut Graph, rgbs: &[Var], gt_image: &Tensor) -> Result<(Var, Vec<f64>)> {
    let gd = gt_image.dims().to_vec();
    if gd.len() != 3 || gd[0] != 3 {
        return Err(RorError::shape("(3, h, w)", format!("{gd:?}")));
    }
    let mut per_scale = Vec::with_capacity(rgbs.len());
    let mut total: Option<Var> = None;
    for &r in rgbs {
        let d = g.dims(r).to_vec();
        if d.len() != 3 || d[0] != 3 {
            return Err(RorError::shape("(3, h, w) rgb", format!("{d:?}")));
        }
        if gd[1] % d[1] != 0 || gd[2] % d[2] != 0 || gd[1] / d[1] != gd[2] / d[2] {
            return Err(RorError::shape(
                format!("integer downsample of ({}, {})", gd[1], gd[2]),
                format!("({}, {})", d[1], d[2]),
            ));
        }
        let f = gd[1] / d[1];
        let small = if f == 1 {
            gt_image.clone()
        } else {
            Tensor::from_vec(
                &[3, d[1], d[2]],
                area_downsample_raw(gt_image.data(), 3, gd[1], gd[2], f),
            )
        };
        let target = g.constant(small);
        let term = g.l1_mean(r, target);
        per_scale.push(g.value(term).item());
        total = Some(match total {
            Some(t) => g.add(t, term),
            None => term,
        });
    }
    let total = total.ok_or_else(|| RorError::InvalidInput("no rgb scales given".into()))?;
    Ok((total, per_scale))
}

/// Patch discriminator: convolutions over an RGB image producing a 2-D grid
/// of raw patch scores (sigmoid applied inside the loss terms).
pub struct DiscriminatorP {
    convs: Vec<Conv2dP>,
    preset: RfPreset,
}

impl DiscriminatorP {
    pub fn register(
        store: &mut ParamStore,
        base: usize,
        preset: RfPreset,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let d = base;
        let convs = match preset {
            RfPreset::Rf16 => vec![
                Conv2dP::register(store, "disc.c0", 3, d, 4, 2, 1, 1, true, Init::XavierUniform, rng),
                Conv2dP::register(store, "disc.c1", d, 2 * d, 3, 2, 1, 1, true, Init::XavierUniform, rng),
                Conv2dP::register(store, "disc.c2", 2 * d, 2 * d, 3, 1, 1, 1, true, Init::XavierUniform, rng),
                Conv2dP::register(store, "disc.head", 2 * d, 1, 1, 1, 0, 1, true, Init::XavierUniform, rng),
            ],
            RfPreset::Rf4 => vec![
                Conv2dP::register(store, "disc.c0", 3, d, 4, 2, 1, 1, true, Init::XavierUniform, rng),
                Conv2dP::register(store, "disc.head", d, 1, 1, 1, 0, 1, true, Init::XavierUniform, rng),
            ],
        };
        DiscriminatorP { convs, preset }
    }

    pub fn preset(&self) -> RfPreset {
        self.preset
    }

    /// Raw patch-score grid `(1, gh, gw)` for an RGB image.
    pub fn apply(&self, g: &mut Graph, binder: &mut Binder, img: Var) -> Var {
        let mut x = img;
        let last = self.convs.len() - 1;
        for (i, conv) in self.convs.iter().enumerate() {
            x = conv.apply(g, binder, x);
            if i < last {
                x = g.leaky_relu(x, DISC_LEAK);
            }
        }
        x
    }
}

/// Adversarial terms from raw patch-score grids. With probabilities
/// `D = sigmoid(score)`:
///   generator term      = mean −log D(fake)          = mean softplus(−s_fake)
///   discriminator term  = mean −log(1 − D(fake))
///                       + mean −log D(real)          = mean softplus(s_fake)
///                                                    + mean softplus(−s_real)
pub fn adv_terms_from_scores(g: &mut Graph, fake: Var, real: Var) -> (Var, Var) {
    let neg_fake = g.scale(fake, -1.0);
    let gen_sp = g.softplus(neg_fake);
    let gen_term = g.mean_all(gen_sp);

    let d_fake_sp = g.softplus(fake);
    let d_fake = g.mean_all(d_fake_sp);
    let neg_real = g.scale(real, -1.0);
    let d_real_sp = g.softplus(neg_real);
    let d_real = g.mean_all(d_real_sp);
    let d_term = g.add(d_fake, d_real);
    (gen_term, d_term)
}

/// Adversarial losses for a generated image against its ground truth:
/// `(generator term, discriminator term)`, each averaged over the patch
/// grid.
pub fn adv_losses(
    g: &mut Graph,
    binder: &mut Binder,
    disc: &DiscriminatorP,
    fake: Var,
    real: Var,
) -> (Var, Var) {
    let fake_scores = disc.apply(g, binder, fake);
    let real_scores = disc.apply(g, binder, real);
    adv_terms_from_scores(g, fake_scores, real_scores)
}

/// One optimizer step on the discriminator objective. The generator output
/// arrives as a plain tensor, so no gradient can reach generator
/// parameters; only the given (discriminator) store is updated. Returns
/// the discriminator loss before the step.
pub fn discriminator_step(
    store: &mut ParamStore,
    opt: &mut AdamW,
    disc: &DiscriminatorP,
    fake: &Tensor,
    real: &Tensor,
    lr: f64,
) -> f64 {
    let mut g = Graph::new();
    let mut accum = GradAccum::for_store(store);
    let loss_value;
    {
        let mut binder = Binder::new(store);
        let fake_v = g.constant(fake.clone());
        let real_v = g.constant(real.clone());
        let (_, d_term) = adv_losses(&mut g, &mut binder, disc, fake_v, real_v);
        loss_value = g.value(d_term).item();
        let mut grads = g.backward(d_term);
        binder.collect_into(&mut grads, &mut accum);
    }
    opt.step(store, &accum, lr);
    loss_value
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autograd::finite_diff;
    use crate::nn::AdamConfig;
    use rand::{Rng, SeedableRng};

    const LN2: f64 = std::f64::consts::LN_2;

    #[test]
    fn seg_loss_closed_forms() {
        // zero logits -> ln 2 per pixel per scale
        let mut g = Graph::new();
        let gt = Tensor::from_fn(&[1, 8, 8], |i| if i % 3 == 0 { 1.0 } else { 0.0 });
        let logits = vec![
            g.constant(Tensor::zeros(&[1, 4, 4])),
            g.constant(Tensor::zeros(&[1, 2, 2])),
            g.constant(Tensor::zeros(&[1, 2, 2])),
        ];
        let (total, scales) = seg_loss(&mut g, &logits, &gt).unwrap();
        let want = LN2 * 64.0 * 3.0;
        assert!(
            (g.value(total).item() - want).abs() < 1e-9,
            "zero-logit loss {} vs {want}",
            g.value(total).item()
        );
        for s in &scales {
            assert!((s - LN2 * 64.0).abs() < 1e-9);
        }

        // saturated correct predictions -> loss near zero
        let mut g2 = Graph::new();
        let gt2 = Tensor::from_fn(&[1, 4, 4], |i| f64::from(i % 2 == 0));
        let sat = Tensor::from_fn(&[1, 4, 4], |i| if i % 2 == 0 { 20.0 } else { -20.0 });
        let l2 = vec![g2.constant(sat)];
        let (t2, _) = seg_loss(&mut g2, &l2, &gt2).unwrap();
        assert!(g2.value(t2).item() < 1e-6, "saturated loss {}", g2.value(t2).item());

        // single pixel vs the BCE formula
        let mut g3 = Graph::new();
        let gt3 = Tensor::from_vec(&[1, 1, 1], vec![1.0]);
        let l3 = vec![g3.constant(Tensor::from_vec(&[1, 1, 1], vec![0.3]))];
        let (t3, _) = seg_loss(&mut g3, &l3, &gt3).unwrap();
        let want3 = (1.0 + (-0.3f64).exp()).ln();
        assert!((g3.value(t3).item() - want3).abs() < 1e-12);
    }

    #[test]
    fn seg_loss_rejects_non_binary_targets() {
        let mut g = Graph::new();
        let gt = Tensor::from_vec(&[1, 1, 2], vec![0.5, 1.0]);
        let l = vec![g.constant(Tensor::zeros(&[1, 1, 2]))];
        assert!(seg_loss(&mut g, &l, &gt).is_err());
    }

    #[test]
    fn rec_loss_constant_offsets_and_oracle() {
        let mut g = Graph::new();
        let gt = Tensor::from_fn(&[3, 8, 8], |i| (i as f64 * 0.17).sin() * 0.5 + 0.5);

        // identical at full resolution -> 0
        let same = vec![g.constant(gt.clone())];
        let (t0, _) = rec_loss(&mut g, &same, &gt).unwrap();
        assert!(g.value(t0).item().abs() < 1e-12);

        // uniform +0.1 at three scales -> 0.1 per scale
        let mut offsets = Vec::new();
        for f in [2usize, 4, 4] {
            let small = area_downsample_raw(gt.data(), 3, 8, 8, f);
            let shifted: Vec<f64> = small.iter().map(|v| v + 0.1).collect();
            offsets.push(g.constant(Tensor::from_vec(&[3, 8 / f, 8 / f], shifted)));
        }
        let (t1, scales) = rec_loss(&mut g, &offsets, &gt).unwrap();
        assert!((g.value(t1).item() - 0.3).abs() < 1e-9, "got {}", g.value(t1).item());
        for s in &scales {
            assert!((s - 0.1).abs() < 1e-12);
        }

        // random prediction vs an explicit elementwise oracle
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let pred_t = Tensor::from_fn(&[3, 4, 4], |_| rng.gen::<f64>());
        let pred = g.constant(pred_t.clone());
        let (t2, _) = rec_loss(&mut g, &[pred], &gt).unwrap();
        let small = area_downsample_raw(gt.data(), 3, 8, 8, 2);
        let want: f64 = pred_t
            .iter()
            .zip(small.iter())
            .map(|(a, b)| (a - b).abs())
            .sum::<f64>()
            / small.len() as f64;
        assert!((g.value(t2).item() - want).abs() < 1e-12);
    }

    #[test]
    fn total_loss_composes_exactly() {
        let w = LossWeights::default();
        let r = total_loss(1.0, 1.0, 1.0, &w);
        assert!((r.total - 26.0).abs() < 1e-12, "unit terms gave {}", r.total);
        assert!(r.composes(&w, 1e-9));

        let z = total_loss(0.0, 0.0, 0.0, &w);
        assert_eq!(z.total, 0.0);

        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..50 {
            let (a, b, c) = (rng.gen::<f64>(), rng.gen::<f64>(), rng.gen::<f64>());
            let r = total_loss(a, b, c, &w);
            assert!((r.total - (a + 5.0 * b + 20.0 * c)).abs() < 1e-12);
            assert!(r.composes(&w, 1e-9));
        }

        assert!(LossWeights { rec: -1.0, adv: 0.0 }.validate().is_err());
        assert!(w.validate().is_ok());
    }

    #[test]
    fn discriminator_grids_and_receptive_field() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut store = ParamStore::new();
        let disc = DiscriminatorP::register(&mut store, 8, RfPreset::Rf16, &mut rng);
        assert_eq!(disc.preset().receptive_field(), 16);

        let mut g = Graph::new();
        let mut binder = Binder::new(&store);
        let img = g.leaf(Tensor::from_fn(&[3, 32, 32], |_| rng.gen::<f64>()));
        let scores = disc.apply(&mut g, &mut binder, img);
        assert_eq!(g.dims(scores), &[1, 8, 8]);

        // gradient support of one interior patch score is a 16x16 box
        let probe = g.pick_sum(scores, &[4 * 8 + 4]);
        let grads = g.backward(probe);
        let gx = grads.wrt(img);
        let (mut y0, mut y1, mut x0, mut x1) = (usize::MAX, 0usize, usize::MAX, 0usize);
        for c in 0..3 {
            for y in 0..32 {
                for x in 0..32 {
                    if gx[(c * 32 + y) * 32 + x] != 0.0 {
                        y0 = y0.min(y);
                        y1 = y1.max(y);
                        x0 = x0.min(x);
                        x1 = x1.max(x);
                    }
                }
            }
        }
        assert_eq!(
            (y1 - y0 + 1, x1 - x0 + 1),
            (16, 16),
            "support box ({y0}..{y1}, {x0}..{x1})"
        );

        let mut store4 = ParamStore::new();
        let disc4 = DiscriminatorP::register(&mut store4, 8, RfPreset::Rf4, &mut rng);
        assert_eq!(disc4.preset().receptive_field(), 4);
        let mut g4 = Graph::new();
        let mut binder4 = Binder::new(&store4);
        let img4 = g4.constant(Tensor::from_fn(&[3, 32, 32], |_| rng.gen::<f64>()));
        let s4 = disc4.apply(&mut g4, &mut binder4, img4);
        assert_eq!(g4.dims(s4), &[1, 16, 16]);
    }

    #[test]
    fn adversarial_closed_forms_and_hand_average() {
        // zeroed discriminator -> raw scores 0 -> D = 0.5 everywhere
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mut store = ParamStore::new();
        let disc = DiscriminatorP::register(&mut store, 4, RfPreset::Rf4, &mut rng);
        let ids: Vec<_> = store.ids().collect();
        for id in ids {
            store.data_mut(id).iter_mut().for_each(|v| *v = 0.0);
        }
        let mut g = Graph::new();
        let mut binder = Binder::new(&store);
        let fake = g.constant(Tensor::from_fn(&[3, 16, 16], |_| rng.gen::<f64>()));
        let real = g.constant(Tensor::from_fn(&[3, 16, 16], |_| rng.gen::<f64>()));
        let (gen_t, d_t) = adv_losses(&mut g, &mut binder, &disc, fake, real);
        assert!(
            (g.value(d_t).item() - 2.0 * LN2).abs() < 1e-12,
            "uniform-D discriminator term {}",
            g.value(d_t).item()
        );
        assert!((g.value(gen_t).item() - LN2).abs() < 1e-12);

        // perfect separation: scores -> ±40 -> discriminator term -> 0+
        let mut g1 = Graph::new();
        let fs = g1.constant(Tensor::filled(&[1, 2, 2], -40.0));
        let rs = g1.constant(Tensor::filled(&[1, 2, 2], 40.0));
        let (_, d_perfect) = adv_terms_from_scores(&mut g1, fs, rs);
        let v = g1.value(d_perfect).item();
        assert!(v > 0.0 && v < 1e-12, "perfect-discriminator term {v}");

        // 2x2 grids vs a hand-computed average
        let mut g2 = Graph::new();
        let f_raw = vec![0.3, -1.2, 2.0, 0.0];
        let r_raw = vec![-0.5, 0.7, 1.1, -2.2];
        let fs2 = g2.constant(Tensor::from_vec(&[1, 2, 2], f_raw.clone()));
        let rs2 = g2.constant(Tensor::from_vec(&[1, 2, 2], r_raw.clone()));
        let (gen2, d2) = adv_terms_from_scores(&mut g2, fs2, rs2);
        let sp = |x: f64| (1.0 + x.exp()).ln();
        let want_gen: f64 = f_raw.iter().map(|&s| sp(-s)).sum::<f64>() / 4.0;
        let want_d: f64 = f_raw.iter().map(|&s| sp(s)).sum::<f64>() / 4.0
            + r_raw.iter().map(|&s| sp(-s)).sum::<f64>() / 4.0;
        assert!((g2.value(gen2).item() - want_gen).abs() < 1e-12);
        assert!((g2.value(d2).item() - want_d).abs() < 1e-12);
    }

    #[test]
    fn loss_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);

        // seg_loss wrt logits
        let gt = Tensor::from_fn(&[1, 4, 4], |i| f64::from(i % 3 == 0));
        let x0: Vec<f64> = (0..4).map(|_| rng.gen::<f64>() * 2.0 - 1.0).collect();
        let gt_c = gt.clone();
        let mut f_seg = move |xs: &[f64]| -> f64 {
            let mut g = Graph::new();
            let l = g.leaf(Tensor::from_vec(&[1, 2, 2], xs.to_vec()));
            let (t, _) = seg_loss(&mut g, &[l], &gt_c).unwrap();
            g.value(t).item()
        };
        let mut g = Graph::new();
        let l = g.leaf(Tensor::from_vec(&[1, 2, 2], x0.clone()));
        let (t, _) = seg_loss(&mut g, &[l], &gt).unwrap();
        let grads = g.backward(t);
        let rep = finite_diff(&mut f_seg, &x0, grads.wrt(l), 1e-6);
        assert!(rep.passes(1e-3), "seg grad rel err {}", rep.max_rel_err);

        // rec_loss wrt rgb (keep entries away from the L1 kink)
        let gt_img = Tensor::from_fn(&[3, 4, 4], |i| (i as f64 * 0.07).cos() * 0.5 + 0.5);
        let x1: Vec<f64> = (0..3 * 4).map(|_| rng.gen::<f64>() + 1.5).collect();
        let gt_img_c = gt_img.clone();
        let mut f_rec = move |xs: &[f64]| -> f64 {
            let mut g = Graph::new();
            let r = g.leaf(Tensor::from_vec(&[3, 2, 2], xs.to_vec()));
            let (t, _) = rec_loss(&mut g, &[r], &gt_img_c).unwrap();
            g.value(t).item()
        };
        let mut g1 = Graph::new();
        let r = g1.leaf(Tensor::from_vec(&[3, 2, 2], x1.clone()));
        let (t1, _) = rec_loss(&mut g1, &[r], &gt_img).unwrap();
        let grads1 = g1.backward(t1);
        let rep1 = finite_diff(&mut f_rec, &x1, grads1.wrt(r), 1e-6);
        assert!(rep1.passes(1e-3), "rec grad rel err {}", rep1.max_rel_err);

        // generator adversarial term wrt the fake image, through the
        // discriminator
        let mut store = ParamStore::new();
        let disc = DiscriminatorP::register(&mut store, 2, RfPreset::Rf4, &mut rng);
        let real = Tensor::from_fn(&[3, 8, 8], |_| rng.gen::<f64>());
        let x2: Vec<f64> = (0..3 * 64).map(|_| rng.gen::<f64>()).collect();
        let real_c = real.clone();
        let store_ref = &store;
        let disc_ref = &disc;
        let mut f_adv = move |xs: &[f64]| -> f64 {
            let mut g = Graph::new();
            let mut binder = Binder::new(store_ref);
            let fake = g.leaf(Tensor::from_vec(&[3, 8, 8], xs.to_vec()));
            let rv = g.constant(real_c.clone());
            let (gen_t, _) = adv_losses(&mut g, &mut binder, disc_ref, fake, rv);
            g.value(gen_t).item()
        };
        let mut g2 = Graph::new();
        let mut binder = Binder::new(&store);
        let fake = g2.leaf(Tensor::from_vec(&[3, 8, 8], x2.clone()));
        let rv = g2.constant(real.clone());
        let (gen_t, _) = adv_losses(&mut g2, &mut binder, &disc, fake, rv);
        let grads2 = g2.backward(gen_t);
        let rep2 = finite_diff(&mut f_adv, &x2, grads2.wrt(fake), 1e-6);
        assert!(rep2.passes(1e-3), "adv grad rel err {}", rep2.max_rel_err);
    }

    #[test]
    fn discriminator_step_learns_and_stays_detached() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let mut store = ParamStore::new();
        let disc = DiscriminatorP::register(&mut store, 4, RfPreset::Rf4, &mut rng);
        let mut opt = AdamW::new(&store, AdamConfig::default());

        let fake = Tensor::from_fn(&[3, 16, 16], |i| f64::from(i % 7 == 0));
        let real = Tensor::from_fn(&[3, 16, 16], |i| ((i as f64) * 0.01).sin() * 0.5 + 0.5);

        let before = store.tensor(store.ids().next().unwrap());
        let first = discriminator_step(&mut store, &mut opt, &disc, &fake, &real, 1e-3);
        let after = store.tensor(store.ids().next().unwrap());
        assert!(
            before.iter().zip(after.iter()).any(|(a, b)| a != b),
            "parameters did not move despite nonzero gradient"
        );

        let mut last = first;
        for _ in 0..49 {
            last = discriminator_step(&mut store, &mut opt, &disc, &fake, &real, 1e-3);
        }
        assert!(
            last < first,
            "discriminator loss did not decrease: {first} -> {last}"
        );

        // detachment: the generator image enters as a constant, so the
        // graph assigns it no gradient at all
        let mut g = Graph::new();
        let mut binder = Binder::new(&store);
        let fk = g.constant(fake.clone());
        let rl = g.constant(real.clone());
        let (_, d_term) = adv_losses(&mut g, &mut binder, &disc, fk, rl);
        let grads = g.backward(d_term);
        assert!(
            grads.get(fk).is_none(),
            "constant input must receive no gradient"
        );
    }
}
