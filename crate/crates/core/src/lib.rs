//! Two-head personalized federated learning with test-time head ensembling.
//!
//! The crate is split along the life of an experiment:
//!
//! - [`nn`]: a small dense network engine (affine + ReLU extractor, linear
//!   heads, losses with analytic gradients, SGD and Adam).
//! - [`data`]: synthetic class-conditional Gaussians, Dirichlet non-i.i.d.
//!   partitioning and the five per-client test streams.
//! - [`fl`]: federated rounds that train a shared extractor and global head
//!   while every client keeps its own personalized head.
//! - [`tta`]: per-sample test-time head ensembling (entropy + feature
//!   alignment, similarity-weighted) and marginal-entropy fine-tuning.
//! - [`harness`]: configuration, experiment grid, metrics, reports and the
//!   self-test used by the command-line tool.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod data;
pub mod error;
pub mod fl;
pub mod harness;
mod io;
pub mod nn;
pub mod rng;
pub mod tta;

pub use error::{Error, Result};
