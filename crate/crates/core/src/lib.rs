//! Semi-supervised domain-generalized object detection on synthetic
//! multi-style scenes, with consistency objectives enforced in a language
//! embedding space.
//!
//! The crate is organized around the full experiment pipeline:
//!
//! - [`synthdomains`]: deterministic scene generation, parametric styles,
//!   rendering, dataset manifests and the DG/DA split protocol.
//! - [`detector`]: a small two-stage detector with a text-prompt classifier
//!   head and the supervised detection loss.
//! - [`langspace`]: the frozen vision-to-language mapper, the trainable
//!   projection head, and the frozen reference encoder used for distillation.
//! - [`losses`]: cosine similarity, instance- and image-level contrastive
//!   consistency, the distillation regularizer, and total-loss assembly.
//! - [`baselines`]: direct visual alignment and caption pseudo-labeling.
//! - [`training`]: two-stage optimization (burn-up, then joint training),
//!   checkpointing and the training log.
//! - [`evalkit`]: IoU matching, AP@0.5, mAP, DG/DA protocols, the ablation
//!   sweep and the stability delta.
//! - [`config`]: the experiment configuration schema shared by the CLI.

pub mod autodiff;
pub mod boxes;
pub mod baselines;
pub mod config;
pub mod detector;
pub mod error;
pub mod evalkit;
pub mod langspace;
pub mod losses;
pub mod params;
pub mod plot;
pub mod rng;
pub mod synthdomains;
pub mod training;

pub use error::{Error, Result};
