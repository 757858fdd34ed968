//! Multimodal sentiment regression with adaptive modality encoders,
//! moment-matching regularization and performance-driven gradient modulation.
//!
//! Everything runs on a small built-in reverse-mode autodiff engine over
//! `f64` tensors; there is no external tensor backend.

pub mod autodiff;
pub mod checkpoint;
pub mod cli;
pub mod data;
pub mod gradcheck;
pub mod losses;
pub mod metrics;
pub mod model;
pub mod modulation;
pub mod trainer;
