// SPDX-License-Identifier: MIT OR Apache-2.0

//! Train a miniature GPT-2-style decoder, optionally under a seeded token
//! permutation, and take it apart on the indirect-object-identification task
//! with direct logit attribution and activation patching.

pub mod error;
pub mod interp;
pub mod ioi;
pub mod numerics;
pub mod tokenizer;
pub mod trainer;
pub mod transformer;

pub use error::{Error, Result};
