//! Pixel-level domain adaptation for weakly supervised semantic segmentation.
//!
//! A CAM classifier is trained from image-level tags while pixel features of
//! its most activated ("source") regions and of the regions it only finds
//! after those are erased ("target") are aligned per class through a gradient
//! reversal layer, with confident pseudo-labels supervising both sets.
//!
//! Module map:
//! - [`synthdata`]: deterministic synthetic dataset with discriminative cores
//! - [`netcore`]: backbone, CAM head, CAM computation and classification loss
//! - [`grl`]: gradient reversal
//! - [`domadv`]: multi-head domain classifier and domain losses
//! - [`assign`]: MaskAssign / SimpleAssign domain assignment
//! - [`cps`]: CAM refinement, dynamic thresholds and pseudo-supervision
//! - [`trainer`]: full training step and loop
//! - [`evalviz`]: mIoU, background threshold sweep, similarity diagnostic, figures
//! - [`cli`]: command-line front-end
//! - [`checkpoint`], [`plot`], [`figures`]: persistence and figure output

pub mod autograd;
pub mod checkpoint;
pub mod cli;
pub mod error;
pub mod assign;
pub mod cps;
pub mod domadv;
pub mod evalviz;
pub mod figures;
pub mod grl;
pub mod netcore;
pub mod plot;
pub mod synthdata;
pub mod trainer;

pub use error::{Error, Result};
