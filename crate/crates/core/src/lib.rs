//! Caption-based visual pretraining for person re-identification.
//!
//! Attribute annotations become template captions; a convolutional backbone
//! is trained jointly with two caption decoders, then fine-tuned for
//! retrieval and evaluated with mAP and CMC.

pub mod attributes;
pub mod captions;
pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod error;
pub mod eval;
pub mod finetune;
pub mod model;
pub mod optim;
pub mod pipeline;
pub mod pretrain;
pub mod saliency;
pub mod scene;
pub mod tape;
pub mod toy;

pub use error::{Error, Result};
