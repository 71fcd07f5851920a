//! Pretrain-and-adapt toolkit for volumetric organ segmentation.
//!
//! The library covers the full pipeline: deterministic synthetic phantom
//! corpora standing in for multi-site CT assemblies, foundation-model
//! pretraining with masked partial-label supervision, few-shot adaptation
//! through spatial adapters (and the usual fine-tuning baselines), and
//! size-constrained transductive inference that pulls the predicted organ
//! size of the unlabeled query toward a support-derived prior.
//!
//! Start from the runnable examples (`cargo run --release --example ...`) or
//! the `voladapt` binary with a config file; see the README for both.

// Guards like `!(x > 0.0)` deliberately reject NaN along with the
// out-of-range values; `partial_cmp` rewrites would lose that.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod autodiff;
pub mod commands;
pub mod config;
pub mod desk;
pub mod engines;
pub mod error;
pub mod nets;
pub mod nifti;
pub mod objectives;
pub mod phantom;
pub mod rawio;
pub mod report;
pub mod rng;
pub mod tensor;
pub mod volume;
