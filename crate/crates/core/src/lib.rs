//! Desk-scale detection transformer core: a dense f64 tensor engine with
//! reverse-mode autodiff, the neural blocks of a DETR-style detector, and a
//! semantics-aligned query decoder with salient-point resampling.
//!
//! Everything here is pure computation over `alloc` containers; IO, file
//! formats, and the training harness live in the companion `samdetr` crate.

#![cfg_attr(not(feature = "std"), no_std)]

extern crate alloc;

pub mod aligner;
pub mod error;
pub mod geometry;
pub mod gradcheck;
pub mod graph;
pub mod kernels;
pub mod matching;
pub mod model;
pub mod nn;
pub mod tensor;

pub use error::{Error, Result};
pub use graph::{Graph, Var};
pub use tensor::Tensor;
