//! Hierarchical visual encoder: a patch-embedding stem followed by four
//! stages of windowed self-attention blocks. Each stage halves the spatial
//! side and doubles the channel count, producing the feature pyramid
//! `V_1..V_4` consumed by fusion and the decoders.

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::nn::{Binder, Conv2dP, Init, LayerNormP, LinearP, ParamStore};
use crate::{Result, RorError};

/// Number of pyramid stages (fixed).
pub const STAGES: usize = 4;
/// Preferred attention window side; stages whose maps are smaller or not
/// divisible fall back to the largest divisor ≤ this.
pub const WINDOW: usize = 4;
/// Feed-forward expansion ratio inside each block.
pub const MLP_RATIO: usize = 2;
/// Attention blocks per stage.
pub const BLOCKS_PER_STAGE: usize = 2;

/// Structural encoder hyperparameters.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct EncoderConfig {
    /// Input side length in pixels (square inputs).
    pub side: usize,
    /// Patch-embedding side; the stem downsamples by this factor.
    pub patch: usize,
    /// Channel count of stage 1; stage `i` has `C_1 * 2^(i-1)`.
    pub base_channels: usize,
}

impl EncoderConfig {
    /// Stage channel count, 1-indexed.
    pub fn channels(&self, stage: usize) -> usize {
        assert!((1..=STAGES).contains(&stage));
        self.base_channels << (stage - 1)
    }

    /// Stage spatial side, 1-indexed.
    pub fn spatial(&self, stage: usize) -> usize {
        assert!((1..=STAGES).contains(&stage));
        self.side / self.patch / (1 << (stage - 1))
    }

    /// Checks the divisibility contract: the side must survive the patch
    /// stem plus three halvings.
    pub fn validate(&self) -> Result<()> {
        if self.side == 0 || self.patch == 0 || self.base_channels == 0 {
            return Err(RorError::Config(format!(
                "encoder config must be positive, got {self:?}"
            )));
        }
        let unit = self.patch * (1 << (STAGES - 1));
        if self.side % unit != 0 {
            return Err(RorError::Config(format!(
                "input side {} not divisible by patch*2^3 = {}",
                self.side, unit
            )));
        }
        Ok(())
    }
}

/// Window side used at a map of side `h`: the largest divisor of `h` that
/// does not exceed [`WINDOW`]. Always ≥ 1.
pub fn window_for(h: usize) -> usize {
    (1..=WINDOW.min(h)).rev().find(|w| h % w == 0).unwrap_or(1)
}

/// One pre-norm attention block: LN → windowed self-attention → residual,
/// then LN → 2-layer MLP → residual.
pub struct AttnBlockP {
    ln1: LayerNormP,
    q: LinearP,
    k: LinearP,
    v: LinearP,
    proj: LinearP,
    ln2: LayerNormP,
    mlp1: LinearP,
    mlp2: LinearP,
    channels: usize,
}

impl AttnBlockP {
    pub fn register(store: &mut ParamStore, name: &str, c: usize, rng: &mut ChaCha8Rng) -> Self {
        AttnBlockP {
            ln1: LayerNormP::register(store, &format!("{name}.ln1"), c, rng),
            q: LinearP::register(store, &format!("{name}.q"), c, c, false, rng),
            k: LinearP::register(store, &format!("{name}.k"), c, c, false, rng),
            v: LinearP::register(store, &format!("{name}.v"), c, c, false, rng),
            proj: LinearP::register(store, &format!("{name}.proj"), c, c, true, rng),
            ln2: LayerNormP::register(store, &format!("{name}.ln2"), c, rng),
            mlp1: LinearP::register(store, &format!("{name}.mlp1"), c, MLP_RATIO * c, true, rng),
            mlp2: LinearP::register(store, &format!("{name}.mlp2"), MLP_RATIO * c, c, true, rng),
            channels: c,
        }
    }

    /// Row-permutation that groups tokens of each `w`×`w` window into a
    /// contiguous run (row-major over windows, then over in-window pixels).
    fn window_order(h: usize, w_side: usize, win: usize) -> Vec<usize> {
        let mut perm = Vec::with_capacity(h * w_side);
        for wy in (0..h).step_by(win) {
            for wx in (0..w_side).step_by(win) {
                for iy in 0..win {
                    for ix in 0..win {
                        perm.push((wy + iy) * w_side + wx + ix);
                    }
                }
            }
        }
        perm
    }

    /// Applies the block to a `(c,h,w)` map.
    pub fn apply(&self, g: &mut Graph, binder: &mut Binder, x: Var) -> Var {
        let d = g.dims(x).to_vec();
        let (c, h, w_side) = (d[0], d[1], d[2]);
        assert_eq!(c, self.channels, "block channel mismatch");
        let n = h * w_side;
        let win = window_for(h).min(window_for(w_side));
        let perm = Self::window_order(h, w_side, win);
        let mut inv = vec![0usize; n];
        for (i, &p) in perm.iter().enumerate() {
            inv[p] = i;
        }

        let flat = g.reshape(x, &[c, n]);
        let tokens = g.transpose(flat); // (n, c)

        let t1 = self.ln1.apply(g, binder, tokens);
        let t1p = g.select_dim0(t1, &perm);
        let per_win = win * win;
        let scale = 1.0 / (c as f64).sqrt();
        let mut outs = Vec::with_capacity(n / per_win);
        for s in (0..n).step_by(per_win) {
            let xw = g.slice_dim0(t1p, s, s + per_win);
            let q = self.q.apply(g, binder, xw);
            let k = self.k.apply(g, binder, xw);
            let v = self.v.apply(g, binder, xw);
            let dots = g.matmul_nt(q, k);
            let scores = g.scale(dots, scale);
            let attn = g.softmax_rows(scores);
            outs.push(g.matmul(attn, v));
        }
        let catted = g.concat_dim0(&outs);
        let unperm = g.select_dim0(catted, &inv);
        let projected = self.proj.apply(g, binder, unperm);
        let x1 = g.add(tokens, projected);

        let t2 = self.ln2.apply(g, binder, x1);
        let m1 = self.mlp1.apply(g, binder, t2);
        let m1a = g.relu(m1);
        let m2 = self.mlp2.apply(g, binder, m1a);
        let x2 = g.add(x1, m2);

        let back = g.transpose(x2); // (c, n)
        g.reshape(back, &[c, h, w_side])
    }
}

struct StageP {
    merge: Option<Conv2dP>,
    blocks: Vec<AttnBlockP>,
}

/// All encoder parameters.
pub struct EncoderP {
    pub cfg: EncoderConfig,
    stem: Conv2dP,
    stages: Vec<StageP>,
}

impl EncoderP {
    pub fn register(store: &mut ParamStore, cfg: EncoderConfig, rng: &mut ChaCha8Rng) -> Self {
        let stem = Conv2dP::register(
            store,
            "enc.stem",
            3,
            cfg.channels(1),
            cfg.patch,
            cfg.patch,
            0,
            1,
            true,
            Init::XavierUniform,
            rng,
        );
        let mut stages = Vec::with_capacity(STAGES);
        for i in 1..=STAGES {
            let c = cfg.channels(i);
            let merge = (i > 1).then(|| {
                Conv2dP::register(
                    store,
                    &format!("enc.s{i}.merge"),
                    cfg.channels(i - 1),
                    c,
                    2,
                    2,
                    0,
                    1,
                    true,
                    Init::XavierUniform,
                    rng,
                )
            });
            let blocks = (0..BLOCKS_PER_STAGE)
                .map(|b| AttnBlockP::register(store, &format!("enc.s{i}.b{b}"), c, rng))
                .collect();
            stages.push(StageP { merge, blocks });
        }
        EncoderP { cfg, stem, stages }
    }
}

/// The four-stage visual feature pyramid. `v[i]` is stage `i+1`, shaped
/// `(C_i, H_i, W_i)` with `H_{i+1} = H_i/2` and `C_{i+1} = 2 C_i`.
pub struct FeaturePyramid {
    pub v: [Var; STAGES],
}

/// Runs the encoder over an RGB image `(3, side, side)` with pixel values
/// in `[0,1]`. Deterministic given parameters.
pub fn encode_image(g: &mut Graph, binder: &mut Binder, p: &EncoderP, image: Var) -> Result<FeaturePyramid> {
    p.cfg.validate()?;
    let d = g.dims(image).to_vec();
    let want = [3, p.cfg.side, p.cfg.side];
    if d != want {
        return Err(RorError::shape(format!("{want:?}"), format!("{d:?}")));
    }
    if let Some(&bad) = g.value(image).iter().find(|&&v| !(0.0..=1.0).contains(&v)) {
        return Err(RorError::InvalidInput(format!(
            "pixel value {bad} outside [0,1]"
        )));
    }

    let mut x = p.stem.apply(g, binder, image);
    let mut v: Vec<Var> = Vec::with_capacity(STAGES);
    for stage in &p.stages {
        if let Some(merge) = &stage.merge {
            x = merge.apply(g, binder, x);
        }
        for block in &stage.blocks {
            x = block.apply(g, binder, x);
        }
        v.push(x);
    }
    Ok(FeaturePyramid {
        v: [v[0], v[1], v[2], v[3]],
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autograd::{finite_diff, Tensor};
    use rand::{Rng, SeedableRng};

    fn cfg_64() -> EncoderConfig {
        EncoderConfig {
            side: 64,
            patch: 4,
            base_channels: 16,
        }
    }

    #[test]
    fn config_validation_and_shape_arithmetic() {
        let cfg = cfg_64();
        cfg.validate().unwrap();
        let shapes: Vec<(usize, usize)> = (1..=4).map(|i| (cfg.channels(i), cfg.spatial(i))).collect();
        assert_eq!(shapes, vec![(16, 16), (32, 8), (64, 4), (128, 2)]);
        assert!(EncoderConfig {
            side: 60,
            patch: 4,
            base_channels: 16
        }
        .validate()
        .is_err());
    }

    #[test]
    fn window_side_always_divides() {
        for h in [1, 2, 3, 4, 6, 8, 15, 30, 120] {
            let w = window_for(h);
            assert!(w >= 1 && w <= WINDOW.min(h) && h % w == 0, "h={h} w={w}");
        }
        assert_eq!(window_for(15), 3);
        assert_eq!(window_for(8), 4);
    }

    #[test]
    fn pyramid_shapes_follow_the_halving_contract() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for (side, patch, c1) in [(32, 2, 4), (64, 4, 8)] {
            let cfg = EncoderConfig {
                side,
                patch,
                base_channels: c1,
            };
            let mut store = ParamStore::new();
            let enc = EncoderP::register(&mut store, cfg, &mut rng);
            let mut g = Graph::new();
            let mut binder = Binder::new(&store);
            let img = g.constant(Tensor::from_fn(&[3, side, side], |i| {
                (i % 97) as f64 / 96.0
            }));
            let pyr = encode_image(&mut g, &mut binder, &enc, img).unwrap();
            for i in 1..=4 {
                assert_eq!(
                    g.dims(pyr.v[i - 1]),
                    &[cfg.channels(i), cfg.spatial(i), cfg.spatial(i)],
                    "stage {i} of {cfg:?}"
                );
            }
        }
    }

    #[test]
    fn rejects_bad_inputs() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let cfg = cfg_64();
        let mut store = ParamStore::new();
        let enc = EncoderP::register(&mut store, cfg, &mut rng);

        let mut g = Graph::new();
        let mut binder = Binder::new(&store);
        let wrong = g.constant(Tensor::zeros(&[3, 32, 32]));
        assert!(matches!(
            encode_image(&mut g, &mut binder, &enc, wrong),
            Err(RorError::Shape { .. })
        ));

        let out_of_range = g.constant(Tensor::filled(&[3, 64, 64], 1.5));
        assert!(encode_image(&mut g, &mut binder, &enc, out_of_range).is_err());
    }

    #[test]
    fn zeroed_affine_layers_give_a_zero_pyramid() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let cfg = EncoderConfig {
            side: 32,
            patch: 2,
            base_channels: 4,
        };
        let mut store = ParamStore::new();
        let enc = EncoderP::register(&mut store, cfg, &mut rng);
        // zero every weight and bias; layer-norm gains stay 1, which still
        // maps zero rows to zero rows
        let ids: Vec<_> = store.ids().collect();
        for id in ids {
            let name = store.name(id).to_string();
            if name.ends_with(".w") || name.ends_with(".b") {
                store.data_mut(id).fill(0.0);
            }
        }
        let mut g = Graph::new();
        let mut binder = Binder::new(&store);
        let img = g.constant(Tensor::zeros(&[3, 32, 32]));
        let pyr = encode_image(&mut g, &mut binder, &enc, img).unwrap();
        for (i, v) in pyr.v.iter().enumerate() {
            assert!(
                g.value(*v).iter().all(|&x| x == 0.0),
                "stage {} not zero",
                i + 1
            );
        }
    }

    #[test]
    fn parameter_count_matches_manual_tally() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let cfg = cfg_64();
        let mut store = ParamStore::new();
        let _enc = EncoderP::register(&mut store, cfg, &mut rng);

        // independent layer-by-layer tally
        let block = |c: usize| {
            let ln = 2 * (2 * c); // two layer norms, gain+shift each
            let qkv = 3 * c * c; // no biases
            let proj = c * c + c;
            let mlp = c * (MLP_RATIO * c) + MLP_RATIO * c + (MLP_RATIO * c) * c + c;
            ln + qkv + proj + mlp
        };
        let mut want = 3 * 16 * 4 * 4 + 16; // stem
        for i in 1..=4 {
            let c = cfg.channels(i);
            if i > 1 {
                want += cfg.channels(i - 1) * c * 2 * 2 + c; // merge
            }
            want += BLOCKS_PER_STAGE * block(c);
        }
        assert_eq!(store.total_params(), want);
    }

    #[test]
    fn input_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let cfg = EncoderConfig {
            side: 8,
            patch: 1,
            base_channels: 2,
        };
        let mut store = ParamStore::new();
        let enc = EncoderP::register(&mut store, cfg, &mut rng);
        let x0: Vec<f64> = (0..3 * 8 * 8).map(|_| rng.gen::<f64>() * 0.8 + 0.1).collect();

        let forward = |xs: &[f64]| -> f64 {
            let mut g = Graph::new();
            let mut binder = Binder::new(&store);
            let img = g.leaf(Tensor::from_vec(&[3, 8, 8], xs.to_vec()));
            let pyr = encode_image(&mut g, &mut binder, &enc, img).unwrap();
            let sq = g.mul(pyr.v[3], pyr.v[3]);
            let s = g.sum_all(sq);
            g.value(s).item()
        };

        let mut g = Graph::new();
        let mut binder = Binder::new(&store);
        let img = g.leaf(Tensor::from_vec(&[3, 8, 8], x0.clone()));
        let pyr = encode_image(&mut g, &mut binder, &enc, img).unwrap();
        let sq = g.mul(pyr.v[3], pyr.v[3]);
        let s = g.sum_all(sq);
        let grads = g.backward(s);
        let analytic = grads.wrt(img).to_vec();

        let mut f = forward;
        let report = finite_diff(&mut f, &x0, &analytic, 1e-5);
        assert!(
            report.passes(1e-3),
            "encoder input gradient FAIL: max rel err {} at {} (analytic {}, numeric {})",
            report.max_rel_err,
            report.worst_index,
            report.analytic_at_worst,
            report.numeric_at_worst
        );
    }
}
