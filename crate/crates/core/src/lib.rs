//! Layer-contrastive decoding with a watermark-guided visual layer.
//!
//! The crate is organised bottom-up: [`prob`] holds the numeric primitives,
//! [`watermark`] composes probe images, [`model`] defines the layered logit
//! interface and a deterministic synthetic model, [`trace`] reads and writes
//! recorded logit archives, [`select`] picks the visual and amateur layers,
//! [`decode`] fuses them, and [`eval`] scores whole suites.

pub mod config;
pub mod decode;
pub mod error;
pub mod eval;
pub mod image;
pub mod model;
pub mod prob;
pub mod select;
pub mod trace;
pub mod watermark;

pub use error::{Error, Result};
