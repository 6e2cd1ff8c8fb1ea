//! Compatibility-aware heterogeneous visual search.
//!
//! A small gallery/query embedding toolkit: a dense network engine with exact
//! gradients, classification-based embedding losses (including the
//! backward-compatible composite objective), a weight-sharing supernet over a
//! block/width search space, evolutionary architecture search with
//! compatibility-aware rewards, and open-set retrieval metrics.
//!
//! The crate is `no_std` and only needs `alloc`. All transcendental math goes
//! through `libm`, so results are bit-reproducible across platforms for a
//! fixed seed. File formats, the experiment harness and the CLI live in the
//! `hvs` companion crate.
//!
//! # Layout
//!
//! - [`tensor`], [`nn`], [`optim`]: dense engine, backprop, SGD, schedules.
//! - [`losses`]: norm-softmax, cosine margin, knowledge distillation and the
//!   composite compatibility objective.
//! - [`data`]: synthetic identity clusters and open-set splits.
//! - [`retrieval`]: embedding indexes, top-k / TPIR@FPIR / TAR@FAR, the
//!   compatibility rule and the amortized cost model.
//! - [`supernet`], [`search`]: weight-sharing supernet and evolution.
//! - [`train`]: gallery/query training methods and pruning.
#![cfg_attr(not(feature = "std"), no_std)]

extern crate alloc;

pub mod data;
pub mod error;
pub mod losses;
pub mod nn;
pub mod optim;
pub mod retrieval;
pub mod rng;
pub mod search;
pub mod supernet;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use tensor::Tensor2;
