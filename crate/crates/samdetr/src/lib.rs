//! Operational layer over the math core: synthetic scenes, AP evaluation,
//! training and ablation harnesses, checkpointing, visualization dumps, and
//! the file formats they share.

pub mod ablate;
pub mod ap;
pub mod checkpoint;
pub mod config;
pub mod dump;
pub mod error;
pub mod formats;
pub mod gradcheck;
pub mod optim;
pub mod scene;
pub mod train;
