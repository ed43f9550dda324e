//! Training loop: a tagger fitting phase, then alternating generator and
//! discriminator steps over per-sample graphs.
//!
//! Each generator step accumulates gradients across the batch, applies one
//! optimizer step, and is followed by exactly one discriminator step whose
//! fake inputs are detached tensors (plain graph constants), so critic
//! gradients can never reach the generator. Losses stream to a JSON-lines
//! log; a non-finite loss halts the run with a diagnostic record naming the
//! step, the offending term, and parameter/gradient norm snapshots. Under a
//! fixed seed the whole loop is bit-deterministic.

use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::autograd::{bilinear_resize_raw, Graph, Tensor};
use crate::dataforge::{expression_corpus, load_annotations, load_pair, DatasetManifest, Split};
use crate::evalkit::{iou, psnr_hole};
use crate::losses::{
    adv_losses, rec_loss, seg_loss, total_loss, DiscriminatorP, LossReport,
};
use crate::model::{infer, register_model, ModelP};
use crate::nn::{AdamW, Binder, GradAccum, ParamStore};
use crate::runner::checkpoint::{Checkpoint, CheckpointView};
use crate::runner::config::TrainConfig;
use crate::textproc::{Tagger, TaggerConfig, Vocabulary};
use crate::{Result, RorError};

/// One JSON line per logged generator step.
#[derive(Debug, Serialize)]
pub struct TrainLogRecord {
    pub step: usize,
    pub epoch: usize,
    pub lr: f64,
    pub seg: f64,
    pub rec: f64,
    pub adv: f64,
    pub total: f64,
    pub disc: f64,
    pub grad_norm: f64,
}

/// What a finished (or early-stopped) run hands back.
#[derive(Debug)]
pub struct TrainOutcome {
    pub steps_run: usize,
    pub early_stopped: bool,
    pub final_loss: Option<LossReport>,
    pub checkpoint: PathBuf,
    pub log: PathBuf,
}

/// An in-memory training pair with its tokenized expressions.
struct Sample {
    composite: Tensor,
    gt: Tensor,
    /// Binary mask `(1, side, side)`.
    mask: Tensor,
    /// `(ids, tags)` per expression.
    expressions: Vec<(Vec<u32>, crate::textproc::RoleTags)>,
}

fn flip_h(t: &Tensor) -> Tensor {
    let d = t.dims();
    let (c, h, w) = (d[0], d[1], d[2]);
    let src = t.data();
    let mut out = vec![0.0; src.len()];
    for ch in 0..c {
        for y in 0..h {
            for x in 0..w {
                out[(ch * h + y) * w + x] = src[(ch * h + y) * w + (w - 1 - x)];
            }
        }
    }
    Tensor::from_vec(d, out)
}

fn crop(t: &Tensor, dy: usize, dx: usize, size: usize) -> Tensor {
    let d = t.dims();
    let (c, _h, w) = (d[0], d[1], d[2]);
    let src = t.data();
    let mut out = Vec::with_capacity(c * size * size);
    for ch in 0..c {
        for y in 0..size {
            let row = (ch * d[1] + dy + y) * w + dx;
            out.extend_from_slice(&src[row..row + size]);
        }
    }
    Tensor::from_vec(&[c, size, size], out)
}

fn resize_nearest_mask(t: &Tensor, side: usize) -> Tensor {
    let d = t.dims();
    let (h, w) = (d[1], d[2]);
    let src = t.data();
    let mut out = Vec::with_capacity(side * side);
    for y in 0..side {
        let sy = ((y as f64 + 0.5) * h as f64 / side as f64 - 0.5)
            .round()
            .clamp(0.0, (h - 1) as f64) as usize;
        for x in 0..side {
            let sx = ((x as f64 + 0.5) * w as f64 / side as f64 - 0.5)
                .round()
                .clamp(0.0, (w - 1) as f64) as usize;
            out.push(src[sy * w + sx]);
        }
    }
    Tensor::from_vec(&[1, side, side], out)
}

/// Random horizontal flip plus a small crop-and-resize. The same geometry
/// applies to all three maps; the mask is resized by nearest neighbor so it
/// stays binary.
fn augment(
    composite: &Tensor,
    gt: &Tensor,
    mask: &Tensor,
    side: usize,
    rng: &mut ChaCha8Rng,
) -> (Tensor, Tensor, Tensor) {
    let (mut c, mut g, mut m) = (composite.clone(), gt.clone(), mask.clone());
    if rng.gen_bool(0.5) {
        c = flip_h(&c);
        g = flip_h(&g);
        m = flip_h(&m);
    }
    let margin = 2 * rng.gen_range(0..3usize); // 0, 2 or 4 pixels
    if margin > 0 {
        let size = side - margin;
        let dy = rng.gen_range(0..=margin);
        let dx = rng.gen_range(0..=margin);
        let cc = crop(&c, dy, dx, size);
        let gc = crop(&g, dy, dx, size);
        let mc = crop(&m, dy, dx, size);
        c = Tensor::from_vec(
            &[3, side, side],
            bilinear_resize_raw(cc.data(), 3, size, size, side, side),
        );
        g = Tensor::from_vec(
            &[3, side, side],
            bilinear_resize_raw(gc.data(), 3, size, size, side, side),
        );
        m = resize_nearest_mask(&mc, side);
    }
    (c, g, m)
}

fn write_json_line(
    log: &mut BufWriter<fs::File>,
    path: &Path,
    value: &impl Serialize,
) -> Result<()> {
    let line = serde_json::to_string(value)?;
    writeln!(log, "{line}").map_err(|e| RorError::io(path.display().to_string(), e))
}

fn store_norm(store: &ParamStore) -> f64 {
    store
        .ids()
        .map(|id| store.data(id).iter().map(|v| v * v).sum::<f64>())
        .sum::<f64>()
        .sqrt()
}

fn mask_bools(t: &Tensor, threshold: f64) -> Vec<bool> {
    t.data().iter().map(|&v| v >= threshold).collect()
}

/// Mean IoU and hole-only PSNR of the current generator over `samples`,
/// scoring each pair's first expression without augmentation.
fn training_set_score(
    store: &ParamStore,
    model: &ModelP,
    cfg: &TrainConfig,
    samples: &[Sample],
) -> Result<(f64, f64)> {
    let mut iou_sum = 0.0;
    let mut psnr_sum = 0.0;
    for s in samples {
        let (ids, tags) = &s.expressions[0];
        let out = infer(store, model, &cfg.model, &s.composite, ids, tags)?;
        let pred = mask_bools(&out.mask_probs, cfg.model.theta);
        let gold = mask_bools(&s.mask, 0.5);
        iou_sum += iou(&pred, &gold);
        psnr_sum += psnr_hole(&out.rgb, &s.gt, &gold)?;
    }
    let n = samples.len() as f64;
    Ok((iou_sum / n, psnr_sum / n))
}

fn load_samples(
    data_root: &Path,
    manifest: &DatasetManifest,
    vocab: &Vocabulary,
    split: Split,
) -> Result<Vec<Sample>> {
    let annotations = load_annotations(data_root)?;
    let entries = manifest.pairs_in(split);
    let mut samples = Vec::with_capacity(entries.len());
    for entry in entries {
        let pair = load_pair(data_root, entry)?;
        let mut expressions = Vec::new();
        for ann in annotations.iter().filter(|a| a.pair == entry.id) {
            let ids: Vec<u32> = ann.tokens.iter().map(|t| vocab.id(t)).collect();
            let tags = crate::textproc::RoleTags::try_new(ann.roles.clone())?;
            expressions.push((ids, tags));
        }
        if expressions.is_empty() {
            return Err(RorError::Dataset(format!(
                "pair {} has no annotations",
                entry.id
            )));
        }
        samples.push(Sample {
            composite: pair.composite,
            gt: pair.gt,
            mask: pair.mask,
            expressions,
        });
    }
    if samples.is_empty() {
        return Err(RorError::Dataset(format!("split {split:?} is empty")));
    }
    Ok(samples)
}

/// Fits the role tagger on a synthesized expression corpus (phase 0).
pub fn fit_tagger(vocab: &Vocabulary, corpus_size: usize, seed: u64) -> Tagger {
    let corpus = expression_corpus(corpus_size, seed);
    let pairs: Vec<(Vec<u32>, Vec<crate::textproc::RoleLabel>)> = corpus
        .iter()
        .map(|e| {
            (
                e.tokens.iter().map(|t| vocab.id(t)).collect(),
                e.roles.clone(),
            )
        })
        .collect();
    let mut tagger = Tagger::new(vocab.len(), TaggerConfig::default(), seed);
    tagger.fit(&pairs, seed);
    tagger
}

/// Runs the full training protocol and writes `model.ckpt` plus
/// `train_log.jsonl` into `out_dir`.
pub fn train(cfg: &TrainConfig, data_root: &Path, out_dir: &Path) -> Result<TrainOutcome> {
    cfg.validate()?;
    fs::create_dir_all(out_dir).map_err(|e| RorError::io(out_dir.display().to_string(), e))?;

    let manifest = DatasetManifest::load(data_root)?;
    if manifest.side != cfg.model.encoder.side {
        return Err(RorError::Config(format!(
            "dataset side {} does not match model side {}",
            manifest.side, cfg.model.encoder.side
        )));
    }
    let vocab = Vocabulary::load(&data_root.join("vocab.txt"))?;
    let samples = load_samples(data_root, &manifest, &vocab, Split::Train)?;
    let side = cfg.model.encoder.side;

    // Phase 0: role tagger on the templated corpus.
    let tagger = fit_tagger(&vocab, cfg.tagger_corpus, cfg.seed);

    // Parameter registration, deterministic order.
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut gen_store = ParamStore::new();
    let model = register_model(&mut gen_store, &cfg.model, vocab.len(), &mut rng)?;
    let mut disc_store = ParamStore::new();
    let disc = DiscriminatorP::register(&mut disc_store, cfg.disc_base, cfg.disc_preset, &mut rng);
    let mut gen_opt = AdamW::new(&gen_store, cfg.optim.adam());
    let mut disc_opt = AdamW::new(&disc_store, cfg.optim.adam());

    let log_path = out_dir.join("train_log.jsonl");
    let log_file =
        fs::File::create(&log_path).map_err(|e| RorError::io(log_path.display().to_string(), e))?;
    let mut log = BufWriter::new(log_file);

    let n = samples.len();
    let total_steps = cfg.total_steps(n);
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng);
    let mut cursor = 0usize;
    let mut epoch = 0usize;
    let mut early_stopped = false;
    let mut final_loss = None;
    let mut steps_run = 0usize;

    for step in 1..=total_steps {
        let lr = cfg.optim.lr * cfg.optim.lr_decay.powi(epoch as i32);

        // ---- generator step --------------------------------------------
        let mut accum = GradAccum::for_store(&gen_store);
        let (mut seg_m, mut rec_m, mut adv_m) = (0.0, 0.0, 0.0);
        let mut fakes: Vec<(Tensor, Tensor)> = Vec::with_capacity(cfg.batch_size);
        for _ in 0..cfg.batch_size {
            if cursor == n {
                order.shuffle(&mut rng);
                cursor = 0;
                epoch += 1;
            }
            let sample = &samples[order[cursor]];
            cursor += 1;

            let (comp, gt, mask) = if cfg.augment {
                augment(&sample.composite, &sample.gt, &sample.mask, side, &mut rng)
            } else {
                (
                    sample.composite.clone(),
                    sample.gt.clone(),
                    sample.mask.clone(),
                )
            };
            let (ids, tags) = &sample.expressions[rng.gen_range(0..sample.expressions.len())];

            let mut g = Graph::new();
            let mut gen_binder = Binder::new(&gen_store);
            let mut disc_binder = Binder::new(&disc_store);
            let img = g.constant(comp);
            let out =
                crate::model::forward(&mut g, &mut gen_binder, &model, &cfg.model, img, ids, tags)?;
            let (seg, _) = seg_loss(&mut g, &out.seg.logits, &mask)?;
            let (rec, _) = rec_loss(&mut g, &out.rgbs, &gt)?;
            let real = g.constant(gt.clone());
            let (adv_gen, _) = adv_losses(&mut g, &mut disc_binder, &disc, out.final_rgb, real);
            let rec_w = g.scale(rec, cfg.weights.rec);
            let adv_w = g.scale(adv_gen, cfg.weights.adv);
            let partial = g.add(seg, rec_w);
            let total = g.add(partial, adv_w);

            let seg_v = g.value(seg).item();
            let rec_v = g.value(rec).item();
            let adv_v = g.value(adv_gen).item();
            for (term, v) in [("seg", seg_v), ("rec", rec_v), ("adv", adv_v)] {
                if !v.is_finite() {
                    let diag = serde_json::json!({
                        "event": "non_finite_loss",
                        "step": step,
                        "term": term,
                        "param_norm": store_norm(&gen_store),
                        "grad_norm": accum.global_norm(),
                    });
                    write_json_line(&mut log, &log_path, &diag)?;
                    return Err(RorError::NonFiniteLoss {
                        step,
                        term: term.into(),
                    });
                }
            }
            seg_m += seg_v;
            rec_m += rec_v;
            adv_m += adv_v;

            let mut grads = g.backward(total);
            gen_binder.collect_into(&mut grads, &mut accum);
            // Detach: the critic trains on plain tensors, not graph nodes.
            fakes.push((g.value(out.final_rgb).clone(), gt));
        }
        let bs = cfg.batch_size as f64;
        accum.scale(1.0 / bs);
        let grad_norm = accum.global_norm();
        gen_opt.step(&mut gen_store, &accum, lr);
        let report = total_loss(seg_m / bs, rec_m / bs, adv_m / bs, &cfg.weights);

        // ---- discriminator step (one per generator step) ---------------
        let mut d_accum = GradAccum::for_store(&disc_store);
        let disc_loss;
        {
            let mut g = Graph::new();
            let mut disc_binder = Binder::new(&disc_store);
            let mut sum = None;
            for (fake, real) in &fakes {
                let f = g.constant(fake.clone());
                let r = g.constant(real.clone());
                let (_, d_term) = adv_losses(&mut g, &mut disc_binder, &disc, f, r);
                sum = Some(match sum {
                    None => d_term,
                    Some(acc) => g.add(acc, d_term),
                });
            }
            let total = sum.expect("batch_size > 0");
            let total = g.scale(total, 1.0 / bs);
            disc_loss = g.value(total).item();
            if !disc_loss.is_finite() {
                return Err(RorError::NonFiniteLoss {
                    step,
                    term: "disc".into(),
                });
            }
            let mut grads = g.backward(total);
            disc_binder.collect_into(&mut grads, &mut d_accum);
        }
        disc_opt.step(&mut disc_store, &d_accum, lr);

        if step % cfg.log_every == 0 {
            write_json_line(&mut log, &log_path, &TrainLogRecord {
                step,
                epoch,
                lr,
                seg: report.seg,
                rec: report.rec,
                adv: report.adv,
                total: report.total,
                disc: disc_loss,
                grad_norm,
            })?;
        }
        final_loss = Some(report);
        steps_run = step;

        if cfg.checkpoint_every > 0 && step % cfg.checkpoint_every == 0 && step != total_steps {
            CheckpointView {
                config: cfg,
                step: step as u64,
                epoch: epoch as u64,
                lr,
                rng_seed: rng.get_seed(),
                rng_word_pos: rng.get_word_pos(),
                vocab: &vocab,
                tagger: &tagger,
                gen_store: &gen_store,
                disc_store: &disc_store,
                gen_opt: &gen_opt,
                disc_opt: &disc_opt,
            }
            .save(&out_dir.join(format!("ckpt-step{step}.bin")))?;
        }
        if let Some(es) = &cfg.early_stop {
            if step % es.every == 0 {
                let (mean_iou, mean_psnr) = training_set_score(&gen_store, &model, cfg, &samples)?;
                if mean_iou >= es.iou && mean_psnr >= es.hole_psnr {
                    early_stopped = true;
                    break;
                }
            }
        }
    }

    let ckpt_path = out_dir.join("model.ckpt");
    CheckpointView {
        config: cfg,
        step: steps_run as u64,
        epoch: epoch as u64,
        lr: cfg.optim.lr * cfg.optim.lr_decay.powi(epoch as i32),
        rng_seed: rng.get_seed(),
        rng_word_pos: rng.get_word_pos(),
        vocab: &vocab,
        tagger: &tagger,
        gen_store: &gen_store,
        disc_store: &disc_store,
        gen_opt: &gen_opt,
        disc_opt: &disc_opt,
    }
    .save(&ckpt_path)?;
    log.flush()
        .map_err(|e| RorError::io(log_path.display().to_string(), e))?;

    Ok(TrainOutcome {
        steps_run,
        early_stopped,
        final_loss,
        checkpoint: ckpt_path,
        log: log_path,
    })
}

/// Reloads a checkpoint produced by [`train`].
pub fn load_trained(path: &Path) -> Result<Checkpoint> {
    Checkpoint::load(path)
}
