//! Score-distillation lab for a procedural hand.

pub mod engine;
pub mod error;
pub mod hand;
pub mod image;
pub mod lab;
pub mod render;
pub mod schedule;
pub mod score;

pub use error::{LabError, Result};
