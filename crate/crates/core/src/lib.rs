//! Source-free test-time adaptation of a prompt-augmented vision transformer.
//!
//! A ViT with learnable prompts at stage boundaries is trained on a labeled
//! source domain. At test time only the prompts, the classification head and
//! a set of projection heads are tuned on unlabeled target data, using
//! memory-bank refined pseudo labels from an EMA teacher plus a hierarchical
//! self-supervised objective over the CLS token and the aggregated prompts.

pub mod adaptation;
pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod data;
pub mod error;
pub mod model;
pub mod multi_source;
pub mod nn;
pub mod optim;
pub mod pseudo_label;
pub mod ssl;

pub use error::{Error, Result};
