//! Referring object removal on synthetic scenes.
//!
//! The pipeline takes an image and a natural-language expression that picks
//! out one object ("the red mug on the left"), segments that object, and
//! inpaints the hole so the scene looks untouched. Everything here is
//! CPU-only f64: small enough to train on a desk machine, deterministic
//! enough to test to tight tolerances.
//!
//! Module map:
//!
//! * [`autograd`] — reverse-mode tape over dense tensors; every layer in the
//!   model lowers to these ops.
//! * [`nn`] — parameter store, initializers, AdamW, shared layer builders.
//! * [`textproc`] — tokenizer, BiLSTM-CRF role tagger, syntax embeddings.
//! * [`encoder`] — hierarchical windowed-attention image encoder.
//! * [`fusion`] — syntax-aware attention fusion of text into each scale.
//! * [`decoder_seg`] — mask decoder with offset-aligned deformable fusion.
//! * [`decoder_inp`] — inpainting decoder with cross-scale patch filling.
//! * [`losses`] — segmentation, reconstruction and adversarial terms.
//! * [`model`] — end-to-end assembly of the above.
//! * [`dataforge`] — procedural scene/expression dataset generator.
//! * [`evalkit`] — PSNR/SSIM/IoU/FID-style metrics and overhead reports.
//! * [`runner`] — configs, checkpoints, train/eval/remove entry points.

pub mod autograd;
pub mod dataforge;
pub mod decoder_inp;
pub mod decoder_seg;
pub mod encoder;
pub mod error;
pub mod evalkit;
pub mod fusion;
pub mod losses;
pub mod model;
pub mod nn;
pub mod runner;
pub mod textproc;

pub use error::RorError;

/// Crate-wide result alias.
pub type Result<T> = std::result::Result<T, RorError>;
