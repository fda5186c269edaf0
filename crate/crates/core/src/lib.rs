//! Transferability-aware vision transformer for unsupervised domain
//! adaptation, built on a small reverse-mode autodiff core.

pub mod attention;
pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod data;
pub mod error;
pub mod feature_fusion;
pub mod losses;
pub mod model;
pub mod numerics;
pub mod params;
pub mod patch_embedding;
pub mod trainer;
pub mod transferability;
pub mod verify;

pub use error::{Error, Result};
