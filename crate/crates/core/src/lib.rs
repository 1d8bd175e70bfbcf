//! Axis-specific debiasing with parameter-efficient modules.
//!
//! An upstream phase trains a small PEFT module (adapter, soft prompt, LoRA
//! or sparse delta) with masked language modeling on counterfactually
//! augmented text while the backbone stays frozen. A downstream phase then
//! fine-tunes the backbone on a labeled task with that module injected and
//! frozen. The [`metrics`] module scores both phases with intrinsic
//! (StereoSet-style, CrowS-Pairs-style) and extrinsic (TPR-GAP, FPRD, FN)
//! bias measures.

pub mod cda;
pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod corpus;
pub mod error;
pub mod metrics;
pub mod model;
pub mod peft;
pub mod pipeline;
pub mod synthetic;

pub use error::{Error, Result};
