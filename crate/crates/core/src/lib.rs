//! Cross-modal semantic communication simulator.

pub mod channel;
pub mod codec;
pub mod config;
pub mod converter;
pub mod error;
pub mod harness;
pub mod model;
pub mod nn;
pub mod perception;
pub mod phy;
pub mod pipeline;
pub mod rng;
pub mod scene;
pub mod selector;
pub mod trainer;

pub use error::{Error, Result};
