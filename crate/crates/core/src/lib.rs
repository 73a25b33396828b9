//! Post-training conversion of a full-attention vision transformer into a
//! hybrid of linear, window and full attention layers.
//!
//! The crate is layered bottom-up: [`tensor`] and [`autograd`] provide the
//! numeric engine, [`attention`] the three token mixers and the squeeze
//! dynamic convolution, [`vit`] the model, [`distill`] the weight-sharing
//! supernet and its feature-distillation loop, [`search`] the stage-wise beam
//! search, and [`task`] the synthetic segmentation task with its probe and
//! metrics. [`pipeline`] strings them together.

pub mod attention;
pub mod autograd;
pub mod bench;
pub mod distill;
pub mod error;
pub mod optim;
pub mod pipeline;
pub mod oracle;
pub mod rng;
pub mod search;
pub mod task;
pub mod tensor;
pub mod verify;
pub mod vit;

pub use error::{Error, Result};
