//! Split evaluation: runs the trained model over every expression of a
//! split, scores each result, and aggregates into a [`MetricReport`] (JSON)
//! plus a per-expression CSV.
//!
//! Role tags come from the checkpointed tagger — not the gold annotations —
//! so the numbers reflect the full text-to-removal pipeline. Everything is
//! deterministic given the checkpoint and dataset.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use crate::dataforge::{load_annotations, load_pair, DatasetManifest, Split};
use crate::evalkit::{
    fid_proxy, iou, overhead_report, pooled_features, pr_at_k, psnr, psnr_hole, ssim,
    MetricReport, MIN_TIMED_RUNS,
};
use crate::model::infer;
use crate::runner::checkpoint::Checkpoint;
use crate::{Result, RorError};

/// Thresholds reported as precision@k.
pub const PR_THRESHOLDS: [f64; 3] = [0.5, 0.7, 0.9];

/// One CSV row per evaluated expression.
#[derive(Debug, Clone)]
pub struct ExpressionScore {
    pub pair: usize,
    pub expression: String,
    pub iou: f64,
    pub psnr_full: f64,
    pub psnr_hole: f64,
    pub ssim: f64,
    pub low_confidence: bool,
}

/// Everything `eval` produces.
pub struct EvalOutcome {
    pub report: MetricReport,
    pub rows: Vec<ExpressionScore>,
    pub report_path: PathBuf,
    pub csv_path: PathBuf,
}

fn csv_escape(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

/// Evaluates `split` and writes `report_path` (JSON) plus a sibling CSV
/// with one row per expression.
pub fn evaluate(
    ckpt: &Checkpoint,
    data_root: &Path,
    split: Split,
    report_path: &Path,
) -> Result<EvalOutcome> {
    let manifest = DatasetManifest::load(data_root)?;
    if manifest.side != ckpt.config.model.encoder.side {
        return Err(RorError::Config(format!(
            "dataset side {} does not match checkpoint side {}",
            manifest.side, ckpt.config.model.encoder.side
        )));
    }
    let entries = manifest.pairs_in(split);
    if entries.is_empty() {
        return Err(RorError::Dataset(format!("split {split:?} is empty")));
    }
    let annotations = load_annotations(data_root)?;
    let cfg = &ckpt.config.model;
    let theta = cfg.theta;

    let mut rows = Vec::new();
    let mut ious = Vec::new();
    let (mut psnr_f, mut psnr_h, mut ssim_sum) = (0.0, 0.0, 0.0);
    let mut pred_features = Vec::new();
    let mut real_features = Vec::new();
    let mut overhead = None;

    for entry in &entries {
        let pair = load_pair(data_root, entry)?;
        let gold_mask: Vec<bool> = pair.mask.data().iter().map(|&v| v >= 0.5).collect();
        let mut first_output = None;
        for ann in annotations.iter().filter(|a| a.pair == entry.id) {
            let ids: Vec<u32> = ann.tokens.iter().map(|t| ckpt.vocab.id(t)).collect();
            let tags = ckpt.tagger.tag(&ids);
            let out = infer(&ckpt.gen_store, &ckpt.model, cfg, &pair.composite, &ids, &tags)?;

            let pred_mask: Vec<bool> = out.mask_probs.data().iter().map(|&p| p >= theta).collect();
            let iou_v = iou(&pred_mask, &gold_mask);
            let pf = psnr(&out.rgb, &pair.gt)?;
            let ph = psnr_hole(&out.rgb, &pair.gt, &gold_mask)?;
            let sv = ssim(&out.rgb, &pair.gt)?;
            ious.push(iou_v);
            psnr_f += pf;
            psnr_h += ph;
            ssim_sum += sv;
            rows.push(ExpressionScore {
                pair: entry.id,
                expression: ann.tokens.join(" "),
                iou: iou_v,
                psnr_full: pf,
                psnr_hole: ph,
                ssim: sv,
                low_confidence: out.low_confidence,
            });
            if first_output.is_none() {
                if overhead.is_none() {
                    overhead = Some(overhead_report(
                        &ckpt.gen_store,
                        &ckpt.model,
                        cfg,
                        &pair.composite,
                        &ids,
                        &tags,
                        MIN_TIMED_RUNS,
                    )?);
                }
                first_output = Some(out);
            }
        }
        let out = first_output.ok_or_else(|| {
            RorError::Dataset(format!("pair {} has no annotations", entry.id))
        })?;
        pred_features.push(pooled_features(
            &ckpt.gen_store,
            &ckpt.model.encoder,
            &out.rgb,
        )?);
        real_features.push(pooled_features(
            &ckpt.gen_store,
            &ckpt.model.encoder,
            &pair.gt,
        )?);
    }

    let n = rows.len() as f64;
    let overhead = overhead.expect("at least one scored expression");
    let mut report = MetricReport {
        psnr_full: psnr_f / n,
        psnr_hole: psnr_h / n,
        ssim: ssim_sum / n,
        iou: ious.iter().sum::<f64>() / n,
        fid_proxy: fid_proxy(&pred_features, &real_features)?,
        param_count: overhead.param_count,
        flops_estimate: overhead.flops_estimate,
        fps: overhead.fps,
        ..MetricReport::default()
    };
    for k in PR_THRESHOLDS {
        report.pr_at_k.insert(format!("{k}"), pr_at_k(&ious, k));
    }
    report.validate()?;

    if let Some(dir) = report_path.parent() {
        if !dir.as_os_str().is_empty() {
            fs::create_dir_all(dir).map_err(|e| RorError::io(dir.display().to_string(), e))?;
        }
    }
    let json = serde_json::to_string_pretty(&report)?;
    fs::write(report_path, json).map_err(|e| RorError::io(report_path.display().to_string(), e))?;

    let csv_path = report_path.with_extension("csv");
    let mut csv = fs::File::create(&csv_path)
        .map_err(|e| RorError::io(csv_path.display().to_string(), e))?;
    writeln!(csv, "pair,expression,iou,psnr_full,psnr_hole,ssim,low_confidence")
        .map_err(|e| RorError::io(csv_path.display().to_string(), e))?;
    for r in &rows {
        writeln!(
            csv,
            "{},{},{:.6},{:.4},{:.4},{:.6},{}",
            r.pair,
            csv_escape(&r.expression),
            r.iou,
            r.psnr_full,
            r.psnr_hole,
            r.ssim,
            r.low_confidence
        )
        .map_err(|e| RorError::io(csv_path.display().to_string(), e))?;
    }

    Ok(EvalOutcome {
        report,
        rows,
        report_path: report_path.to_path_buf(),
        csv_path,
    })
}
