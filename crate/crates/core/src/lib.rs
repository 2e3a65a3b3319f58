//! Weakly-supervised temporal activity localization with adversarial,
//! angular center losses over a pair of triplets.
//!
//! The crate covers the whole pipeline on precomputed two-stream feature
//! sequences: dataset I/O and a synthetic generator ([`data`]), the network
//! and its hand-written backward passes ([`model`]), the training
//! objectives ([`loss`]), the center bank and its averaged-gradient update
//! ([`centers`]), optimisation ([`trainer`]), segment localization
//! ([`localizer`]) and mAP@IoU scoring ([`evaluator`]).

// `!(x >= y)` guards also reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod centers;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod error;
pub mod evaluator;
pub mod experiment;
pub mod localizer;
pub mod loss;
pub mod model;
pub mod numkit;
pub mod trainer;

pub use error::{Error, Result};
