//! Syntax-aware attention fusion. Each pyramid stage fuses the visual map
//! `V_i` with the text embeddings through three heads — scaled cosine
//! attention over all tokens, dot-product attention over attribute words,
//! and hard (unit-weight) attention over identity words — merged by
//! learnable scalar weights into `P_i`.

use rand_chacha::ChaCha8Rng;

use crate::autograd::{Graph, Var};
use crate::nn::{Binder, Init, ParamId, ParamStore};
use crate::textproc::SyntaxEmbeddings;
use crate::{Result, RorError};

/// Epsilon inside cosine-norm denominators; absorbs zero-feature pixels.
pub const NORM_EPS: f64 = 1e-8;

/// Raw value of the scale parameter whose softplus equals 1, used so γ
/// starts at exactly 1 while staying positive for any raw value.
fn gamma_raw_init() -> f64 {
    (std::f64::consts::E - 1.0).ln()
}

/// Per-stage fusion parameters. Each head owns its projections; merge
/// weights are scalars initialized to 1/3.
pub struct FusionStageP {
    /// Head 1 (cosine over all tokens): key/value maps `C_L → C_i` and a
    /// query map `C_i → C_i`.
    k1: ParamId,
    v1: ParamId,
    q1: ParamId,
    /// Raw scale; the effective γ is `softplus(raw)` (always positive).
    gamma_raw: ParamId,
    /// Head 2 (dot product over attribute words).
    k2: ParamId,
    v2: ParamId,
    q2: ParamId,
    /// Head 3 (hard attention over identity words): value map only.
    v3: ParamId,
    /// Merge weights, one scalar per head.
    w: [ParamId; 3],
    pub channels: usize,
    pub text_dim: usize,
}

impl FusionStageP {
    pub fn register(
        store: &mut ParamStore,
        name: &str,
        channels: usize,
        text_dim: usize,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let mut map = |n: &str, out: usize, inp: usize, rng: &mut ChaCha8Rng| {
            store.add(&format!("{name}.{n}"), &[out, inp], Init::XavierUniform, rng)
        };
        let k1 = map("k1", channels, text_dim, rng);
        let v1 = map("v1", channels, text_dim, rng);
        let q1 = map("q1", channels, channels, rng);
        let k2 = map("k2", channels, text_dim, rng);
        let v2 = map("v2", channels, text_dim, rng);
        let q2 = map("q2", channels, channels, rng);
        let v3 = map("v3", channels, text_dim, rng);
        let gamma_raw = store.add(
            &format!("{name}.gamma_raw"),
            &[1],
            Init::Const(gamma_raw_init()),
            rng,
        );
        let w = [
            store.add(&format!("{name}.w1"), &[1], Init::Const(1.0 / 3.0), rng),
            store.add(&format!("{name}.w2"), &[1], Init::Const(1.0 / 3.0), rng),
            store.add(&format!("{name}.w3"), &[1], Init::Const(1.0 / 3.0), rng),
        ];
        FusionStageP {
            k1,
            v1,
            q1,
            gamma_raw,
            k2,
            v2,
            q2,
            v3,
            w,
            channels,
            text_dim,
        }
    }

    /// The effective positive scale γ for this stage.
    pub fn gamma(&self, g: &mut Graph, binder: &mut Binder) -> Var {
        let raw = binder.var(g, self.gamma_raw);
        g.softplus(raw)
    }

    /// Normalized head importance `|w_k| / Σ|w_j|` — a diagnostic triple
    /// for reports, not used in the forward pass.
    pub fn head_importance(&self, store: &ParamStore) -> [f64; 3] {
        let ws: Vec<f64> = self.w.iter().map(|&id| store.data(id)[0].abs()).collect();
        let total: f64 = ws.iter().sum();
        if total == 0.0 {
            return [0.0; 3];
        }
        [ws[0] / total, ws[1] / total, ws[2] / total]
    }
}

/// Projects text columns and the flattened visual map for one head:
/// returns `(L_k: C_i×T, L_v: C_i×T, V_q: C_i×P)` where `P = H·W` and the
/// flattening is row-major over `(H, W)`.
pub fn project(
    g: &mut Graph,
    binder: &mut Binder,
    l: Var,
    v: Var,
    wk: ParamId,
    wv: ParamId,
    wq: ParamId,
) -> (Var, Var, Var) {
    let d = g.dims(v).to_vec();
    let p = d[1] * d[2];
    let wk = binder.var(g, wk);
    let wv = binder.var(g, wv);
    let wq = binder.var(g, wq);
    let lk = g.matmul(wk, l);
    let lv = g.matmul(wv, l);
    let flat = g.reshape(v, &[d[0], p]);
    let vq = g.matmul(wq, flat);
    (lk, lv, vq)
}

/// Scaled cosine similarity scores: `scores[p,t] = (v_p·k_t)/(γ‖v_p‖‖k_t‖)`,
/// shape `(P, T)`. Norm denominators carry [`NORM_EPS`].
pub fn cosine_attention(g: &mut Graph, vq: Var, lk: Var, gamma: Var) -> Var {
    let dots = g.matmul_tn(vq, lk); // (P, T)
    let vn = g.col_norm_eps(vq, NORM_EPS); // (1, P)
    let kn = g.col_norm_eps(lk, NORM_EPS); // (1, T)
    let cos = g.div_outer(dots, vn, kn);
    g.div_by(cos, gamma)
}

/// Per-pixel softmax over tokens, then the weighted sum of value columns,
/// reshaped to the spatial layout `(C_i, H, W)`.
pub fn attend(g: &mut Graph, scores: Var, lv: Var, h: usize, w: usize) -> Var {
    let a = g.softmax_rows(scores); // (P, T)
    let at = g.transpose(a); // (T, P)
    let flat = g.matmul(lv, at); // (C, P)
    let c = g.dims(lv)[0];
    g.reshape(flat, &[c, h, w])
}

/// Elementwise product of the visual map and an attention map of the same
/// shape.
pub fn hadamard_fuse(g: &mut Graph, v: Var, attn: Var) -> Result<Var> {
    if g.dims(v) != g.dims(attn) {
        return Err(RorError::shape(
            format!("{:?}", g.dims(v)),
            format!("{:?}", g.dims(attn)),
        ));
    }
    Ok(g.mul(v, attn))
}

/// Head 2: dot-product attention over attribute words. Returns `None` when
/// the expression has no attribute words (the head then contributes zeros).
pub fn aw_head(
    g: &mut Graph,
    binder: &mut Binder,
    p: &FusionStageP,
    l_aw: Option<Var>,
    v: Var,
) -> Option<Var> {
    let l_aw = l_aw?;
    let d = g.dims(v).to_vec();
    let (lk, lv, vq) = project(g, binder, l_aw, v, p.k2, p.v2, p.q2);
    let scores = g.matmul_tn(vq, lk); // raw dots, no norm, no γ
    let attn = attend(g, scores, lv, d[1], d[2]);
    Some(g.mul(v, attn))
}

/// Head 3: hard attention over identity words — the value-projected
/// identity columns are summed with unit weights (no normalization) and
/// broadcast to every pixel before the Hadamard product.
pub fn iw_head(g: &mut Graph, binder: &mut Binder, p: &FusionStageP, l_iw: Var, v: Var) -> Var {
    let d = g.dims(v).to_vec();
    let pn = d[1] * d[2];
    let wv = binder.var(g, p.v3);
    let cols = g.matmul(wv, l_iw); // (C, T_iw)
    let summed = g.sum_cols(cols); // (C, 1)
    let grid = g.broadcast_cols(summed, pn); // (C, P)
    let attn = g.reshape(grid, &d);
    g.mul(v, attn)
}

/// Weighted merge `P_i = w1·h1 + w2·h2 + w3·h3`. A `None` head contributes
/// nothing (its term is skipped, equivalent to a zero map).
pub fn merge_heads(
    g: &mut Graph,
    binder: &mut Binder,
    p: &FusionStageP,
    heads: [Option<Var>; 3],
) -> Var {
    let mut acc: Option<Var> = None;
    for (head, &wid) in heads.into_iter().zip(p.w.iter()) {
        let Some(h) = head else { continue };
        let w = binder.var(g, wid);
        let term = g.scale_by(h, w);
        acc = Some(match acc {
            Some(a) => g.add(a, term),
            None => term,
        });
    }
    acc.expect("merge_heads: head 1 and head 3 are always present")
}

/// Full per-stage fusion: three heads over `V_i` and the text embeddings,
/// merged into `P_i` with the same shape as `V_i`.
pub fn fuse_stage(
    g: &mut Graph,
    binder: &mut Binder,
    p: &FusionStageP,
    v: Var,
    emb: &SyntaxEmbeddings,
) -> Var {
    let d = g.dims(v).to_vec();
    let (lk, lv, vq) = project(g, binder, emb.full, v, p.k1, p.v1, p.q1);
    let gamma = p.gamma(g, binder);
    let scores = cosine_attention(g, vq, lk, gamma);
    let attn1 = attend(g, scores, lv, d[1], d[2]);
    let h1 = g.mul(v, attn1);
    let h2 = aw_head(g, binder, p, emb.attribute, v);
    let h3 = iw_head(g, binder, p, emb.identity, v);
    merge_heads(g, binder, p, [Some(h1), h2, Some(h3)])
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autograd::Tensor;
    use rand::{Rng, SeedableRng};

    fn stage(c: usize, t: usize, seed: u64) -> (ParamStore, FusionStageP) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let p = FusionStageP::register(&mut store, "fuse", c, t, &mut rng);
        (store, p)
    }

    #[test]
    fn projection_flattens_row_major() {
        // identity W_q on a 1-channel 2x2 map: columns must follow
        // (0,0),(0,1),(1,0),(1,1)
        let (store, p) = stage(1, 1, 1);
        let mut g = Graph::new();
        let mut binder = Binder::new(&store);
        let v = g.constant(Tensor::from_vec(&[1, 2, 2], vec![10.0, 11.0, 12.0, 13.0]));
        let l = g.constant(Tensor::from_vec(&[1, 1], vec![1.0]));
        let wq = g.constant(Tensor::from_vec(&[1, 1], vec![1.0]));
        // drive project() by hand with an identity query map
        let d = g.dims(v).to_vec();
        let flat = g.reshape(v, &[d[0], 4]);
        let vq = g.matmul(wq, flat);
        assert_eq!(g.value(vq).data(), &[10.0, 11.0, 12.0, 13.0]);
        // and the real projections keep shapes (C,T), (C,T), (C,P)
        let (lk, lv, vq2) = project(&mut g, &mut binder, l, v, p.k1, p.v1, p.q1);
        assert_eq!(g.dims(lk), &[1, 1]);
        assert_eq!(g.dims(lv), &[1, 1]);
        assert_eq!(g.dims(vq2), &[1, 4]);
    }

    #[test]
    fn cosine_scores_match_closed_forms() {
        let mut g = Graph::new();
        // v=(1,0); keys k1=(1,0), k2=(0,1); gamma=1 -> row (1, 0)
        let vq = g.constant(Tensor::from_vec(&[2, 1], vec![1.0, 0.0]));
        let lk = g.constant(Tensor::from_vec(&[2, 2], vec![1.0, 0.0, 0.0, 1.0]));
        let one = g.constant(Tensor::scalar(1.0));
        let s = cosine_attention(&mut g, vq, lk, one);
        let row = g.value(s).data();
        assert!((row[0] - 1.0).abs() < 1e-7 && row[1].abs() < 1e-7, "{row:?}");

        // v=(1,1), k=(1,0), gamma=2 -> 1/(2*sqrt(2))
        let mut g2 = Graph::new();
        let vq = g2.constant(Tensor::from_vec(&[2, 1], vec![1.0, 1.0]));
        let lk = g2.constant(Tensor::from_vec(&[2, 1], vec![1.0, 0.0]));
        let two = g2.constant(Tensor::scalar(2.0));
        let sv = cosine_attention(&mut g2, vq, lk, two);
        let s = g2.value(sv).item();
        // the 1e-8 norm epsilons shift the exact value by a few 1e-9
        assert!((s - 1.0 / (2.0 * 2.0_f64.sqrt())).abs() < 1e-7, "{s}");
    }

    #[test]
    fn cosine_scores_are_scale_invariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let base_v: Vec<f64> = (0..6).map(|_| rng.gen::<f64>() - 0.5).collect();
        let base_k: Vec<f64> = (0..9).map(|_| rng.gen::<f64>() - 0.5).collect();
        let eval = |vscale: f64, kscale: f64| -> Vec<f64> {
            let mut g = Graph::new();
            // scale query column 0 and key column 1
            let mut vd = base_v.clone();
            let mut kd = base_k.clone();
            for r in 0..3 {
                vd[r * 2] *= vscale;
                kd[r * 3 + 1] *= kscale;
            }
            let vq = g.constant(Tensor::from_vec(&[3, 2], vd));
            let lk = g.constant(Tensor::from_vec(&[3, 3], kd));
            let one = g.constant(Tensor::scalar(1.0));
            let s = cosine_attention(&mut g, vq, lk, one);
            g.value(s).data().to_vec()
        };
        let a = eval(1.0, 1.0);
        let b = eval(7.0, 100.0);
        for (x, y) in a.iter().zip(b.iter()) {
            assert!((x - y).abs() < 1e-6, "{x} vs {y}");
        }
    }

    #[test]
    fn attend_covers_single_key_uniform_and_hand_softmax() {
        // T=1: every pixel receives the lone value column
        let mut g = Graph::new();
        let scores = g.constant(Tensor::from_vec(&[4, 1], vec![0.3, -2.0, 5.0, 0.0]));
        let lv = g.constant(Tensor::from_vec(&[2, 1], vec![3.0, -1.0]));
        let out = attend(&mut g, scores, lv, 2, 2);
        assert_eq!(g.dims(out), &[2, 2, 2]);
        for px in 0..4 {
            assert!((g.value(out).data()[px] - 3.0).abs() < 1e-12);
            assert!((g.value(out).data()[4 + px] + 1.0).abs() < 1e-12);
        }

        // all-equal scores -> uniform 1/T mixing
        let mut g2 = Graph::new();
        let scores = g2.constant(Tensor::filled(&[1, 3], 0.7));
        let lv = g2.constant(Tensor::from_vec(&[1, 3], vec![0.0, 3.0, 6.0]));
        let ov = attend(&mut g2, scores, lv, 1, 1);
        let out = g2.value(ov).item();
        assert!((out - 3.0).abs() < 1e-12);

        // orthonormal cosine rows (1,0) with gamma=1: weights (e/(e+1), 1/(e+1))
        let mut g3 = Graph::new();
        let scores = g3.constant(Tensor::from_vec(&[1, 2], vec![1.0, 0.0]));
        let lv = g3.constant(Tensor::from_vec(&[1, 2], vec![1.0, 0.0]));
        let ov3 = attend(&mut g3, scores, lv, 1, 1);
        let out = g3.value(ov3).item();
        let e = std::f64::consts::E;
        assert!((out - e / (e + 1.0)).abs() < 1e-12, "{out}");
    }

    #[test]
    fn hadamard_identity_and_shape_guard() {
        let mut g = Graph::new();
        let v = g.constant(Tensor::from_fn(&[2, 2, 2], |i| i as f64));
        let ones = g.constant(Tensor::filled(&[2, 2, 2], 1.0));
        let h = hadamard_fuse(&mut g, v, ones).unwrap();
        assert_eq!(g.value(h).data(), g.value(v).data());
        let bad = g.constant(Tensor::zeros(&[2, 2, 1]));
        assert!(hadamard_fuse(&mut g, v, bad).is_err());
    }

    #[test]
    fn iw_head_sums_identity_columns_with_unit_weights() {
        let (mut store, p) = stage(2, 2, 3);
        // make W_v3 the identity so columns pass through
        store.data_mut(p.v3).copy_from_slice(&[1.0, 0.0, 0.0, 1.0]);
        let mut g = Graph::new();
        let mut binder = Binder::new(&store);
        let v = g.constant(Tensor::filled(&[2, 1, 2], 1.0));
        // two identical identity columns -> G doubles (unnormalized)
        let l_iw = g.constant(Tensor::from_vec(&[2, 2], vec![0.5, 0.5, 2.0, 2.0]));
        let out = iw_head(&mut g, &mut binder, &p, l_iw, v);
        assert_eq!(g.value(out).data(), &[1.0, 1.0, 4.0, 4.0]);

        // two distinct columns -> explicit sum
        let mut g2 = Graph::new();
        let mut binder2 = Binder::new(&store);
        let v2 = g2.constant(Tensor::filled(&[2, 1, 1], 1.0));
        let l2 = g2.constant(Tensor::from_vec(&[2, 2], vec![0.25, 1.0, -0.5, 3.0]));
        let out2 = iw_head(&mut g2, &mut binder2, &p, l2, v2);
        assert_eq!(g2.value(out2).data(), &[1.25, 2.5]);
    }

    #[test]
    fn merge_selects_heads_by_weight() {
        let (mut store, p) = stage(1, 1, 4);
        store.data_mut(p.w[0])[0] = 1.0;
        store.data_mut(p.w[1])[0] = 0.0;
        store.data_mut(p.w[2])[0] = 0.0;
        let mut g = Graph::new();
        let mut binder = Binder::new(&store);
        let h1 = g.constant(Tensor::from_vec(&[1, 1, 2], vec![5.0, -2.0]));
        let h2 = g.constant(Tensor::filled(&[1, 1, 2], 99.0));
        let h3 = g.constant(Tensor::filled(&[1, 1, 2], -99.0));
        let out = merge_heads(&mut g, &mut binder, &p, [Some(h1), Some(h2), Some(h3)]);
        assert_eq!(g.value(out).data(), &[5.0, -2.0]);

        // zero weights everywhere -> zero map
        let mut store2 = store;
        store2.data_mut(p.w[0])[0] = 0.0;
        let mut g2 = Graph::new();
        let mut binder2 = Binder::new(&store2);
        let out2 = merge_heads(&mut g2, &mut binder2, &p, [Some(h1), Some(h2), Some(h3)]);
        // heads were built in g, rebuild in g2
        let h1b = g2.constant(Tensor::from_vec(&[1, 1, 2], vec![5.0, -2.0]));
        let out2b = merge_heads(&mut g2, &mut binder2, &p, [Some(h1b), None, None]);
        let _ = out2;
        assert!(g2.value(out2b).iter().all(|&x| x == 0.0));
    }

    #[test]
    fn softmax_rows_always_normalize() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..100 {
            let (p, t) = (1 + rng.gen_range(0..6), 1 + rng.gen_range(0..5));
            let mut g = Graph::new();
            let scores = g.constant(Tensor::from_fn(&[p, t], |_| rng.gen::<f64>() * 20.0 - 10.0));
            let a = g.softmax_rows(scores);
            for row in g.value(a).data().chunks(t) {
                let s: f64 = row.iter().sum();
                assert!((s - 1.0).abs() < 1e-5, "row sum {s}");
            }
        }
    }

    #[test]
    fn fuse_stage_keeps_shape_and_reduces_to_head1() {
        use crate::nn::GradAccum;
        use crate::textproc::{RoleLabel, RoleTags, TextEncoderP};

        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut store = ParamStore::new();
        let text = TextEncoderP::register(&mut store, 8, 6, &mut rng);
        let p = FusionStageP::register(&mut store, "fuse1", 4, 6, &mut rng);

        let tags = RoleTags::try_new(vec![
            RoleLabel::Outside,
            RoleLabel::BeginAttribute,
            RoleLabel::BeginIdentity,
        ])
        .unwrap();

        let mut g = Graph::new();
        let mut binder = Binder::new(&store);
        let emb = text
            .extract_embeddings(&mut g, &mut binder, &[2, 3, 4], &tags)
            .unwrap();
        let v = g.leaf(Tensor::from_fn(&[4, 2, 2], |i| (i as f64) * 0.1 - 0.6));
        let fused = fuse_stage(&mut g, &mut binder, &p, v, &emb);
        assert_eq!(g.dims(fused), &[4, 2, 2]);

        // gradient reaches the visual map and the merge weights
        let sq = g.mul(fused, fused);
        let loss = g.sum_all(sq);
        let mut grads = g.backward(loss);
        assert!(grads.wrt(v).iter().any(|&x| x != 0.0));
        let mut accum = GradAccum::for_store(&store);
        binder.collect_into(&mut grads, &mut accum);
        assert!(accum.get(p.w[0]).is_some());
        assert!(accum.get(p.gamma_raw).is_some());

        // with w = (1, 0, 0) the fused map equals head 1 exactly
        let mut store2 = store;
        store2.data_mut(p.w[0])[0] = 1.0;
        store2.data_mut(p.w[1])[0] = 0.0;
        store2.data_mut(p.w[2])[0] = 0.0;
        let mut g2 = Graph::new();
        let mut binder2 = Binder::new(&store2);
        let emb2 = text
            .extract_embeddings(&mut g2, &mut binder2, &[2, 3, 4], &tags)
            .unwrap();
        let v2 = g2.constant(Tensor::from_fn(&[4, 2, 2], |i| (i as f64) * 0.1 - 0.6));
        let fused2 = fuse_stage(&mut g2, &mut binder2, &p, v2, &emb2);

        let d = g2.dims(v2).to_vec();
        let (lk, lv, vq) = project(&mut g2, &mut binder2, emb2.full, v2, p.k1, p.v1, p.q1);
        let gamma = p.gamma(&mut g2, &mut binder2);
        let scores = cosine_attention(&mut g2, vq, lk, gamma);
        let attn1 = attend(&mut g2, scores, lv, d[1], d[2]);
        let h1 = g2.mul(v2, attn1);
        let diff: f64 = g2
            .value(fused2)
            .iter()
            .zip(g2.value(h1).iter())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        assert!(diff < 1e-12, "reduction to head 1 broke: {diff}");
    }
}
