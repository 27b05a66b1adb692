//! Token-reweighted policy optimization for a small multimodal policy.
//!
//! Modules build bottom-up: [`diffcore`] differentiates, [`synthtask`]
//! generates and verifies grid questions, [`policy`] owns the transformer,
//! [`scoring`] and [`selection`] decide which tokens matter, [`objectives`]
//! defines the surrogates, [`trainer`] runs the loop and [`analysis`]
//! summarizes what happened.

// `!(x > 0.0)` style checks are there to reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod analysis;
pub mod diffcore;
pub mod error;
pub mod objectives;
pub mod policy;
pub mod scoring;
pub mod selection;
pub mod synthtask;
pub mod trainer;

pub use error::{Result, TorError};
