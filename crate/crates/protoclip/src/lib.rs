//! Multimodal contrastive learning engine.
//!
//! Heterogeneous tabular modalities are anchored to an image modality in a
//! shared embedding space via a temperature-scaled contrastive loss. Disease
//! progression labels live on a continuous `[0, 1]` spectrum and are
//! predicted by maximizing fused cosine similarity over a label grid; a
//! learnable sigmoid gate over tabular inputs yields per-feature importance.
//!
//! Run any example with `cargo run --example <name>`.

mod error;

pub mod attention;
pub mod checkpoint;
pub mod cli;
pub mod contrastive;
pub mod data;
pub mod encoder;
pub mod infer;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use tensor::{grad_check, Activation, ConvGeom, Gradients, Matrix, Tape, ValueId};
