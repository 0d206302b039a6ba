//! Unsupervised model selection for domain adaptation.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod analysis;
pub mod datapack;
pub mod error;
pub mod numerics;
pub mod scoring;
pub mod seed;
pub mod selection;
pub mod synth;
pub mod validators;

pub use error::{Error, Result};
