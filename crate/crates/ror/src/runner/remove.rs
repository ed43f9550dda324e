//! Single-image removal: expression in, mask and inpainted PNGs out.
//!
//! The expression is normalized, tagged by the checkpointed tagger, and run
//! through the generator. When no pixel clears the confidence threshold θ
//! the result is still written but flagged low-confidence — the expression
//! likely names nothing the model can ground in the image.

use std::fs;
use std::path::{Path, PathBuf};

use crate::autograd::Tensor;
use crate::dataforge::{write_mask_png, write_rgb_png};
use crate::model::infer;
use crate::runner::checkpoint::Checkpoint;
use crate::textproc::tokenize;
use crate::{Result, RorError};

/// Where the artifacts landed and how confident the grounding was.
#[derive(Debug, Clone)]
pub struct RemoveOutcome {
    pub mask_png: PathBuf,
    pub output_png: PathBuf,
    /// Highest mask probability anywhere in the image.
    pub max_prob: f64,
    /// True when `max_prob < θ`: nothing matched the expression well.
    pub low_confidence: bool,
    /// True when a filling stage fell back to its learned patch.
    pub used_fallback: bool,
}

fn load_rgb_square(path: &Path, side: usize) -> Result<Tensor> {
    let img = image::open(path)?.to_rgb8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    if w != side || h != side {
        return Err(RorError::InvalidInput(format!(
            "image is {w}×{h}, but this checkpoint expects {side}×{side}"
        )));
    }
    let n = w * h;
    let mut data = vec![0.0; 3 * n];
    for (i, px) in img.pixels().enumerate() {
        for ch in 0..3 {
            data[ch * n + i] = px.0[ch] as f64 / 255.0;
        }
    }
    Ok(Tensor::from_vec(&[3, side, side], data))
}

/// Removes whatever `expression` designates from the image and writes
/// `mask.png` and `output.png` into `out_dir`.
pub fn remove(
    ckpt: &Checkpoint,
    image_path: &Path,
    expression: &str,
    out_dir: &Path,
) -> Result<RemoveOutcome> {
    let cfg = &ckpt.config.model;
    let side = cfg.encoder.side;
    let image = load_rgb_square(image_path, side)?;
    let tok = tokenize(expression, &ckpt.vocab)?;
    let tags = ckpt.tagger.tag(&tok.ids);
    let out = infer(&ckpt.gen_store, &ckpt.model, cfg, &image, &tok.ids, &tags)?;

    fs::create_dir_all(out_dir).map_err(|e| RorError::io(out_dir.display().to_string(), e))?;
    let mask_png = out_dir.join("mask.png");
    let output_png = out_dir.join("output.png");
    let mask: Vec<bool> = out
        .mask_probs
        .data()
        .iter()
        .map(|&p| p >= cfg.theta)
        .collect();
    write_mask_png(&mask_png, &mask, side)?;
    write_rgb_png(&output_png, out.rgb.data(), side)?;

    Ok(RemoveOutcome {
        mask_png,
        output_png,
        max_prob: out.max_prob,
        low_confidence: out.low_confidence,
        used_fallback: out.used_fallback,
    })
}
