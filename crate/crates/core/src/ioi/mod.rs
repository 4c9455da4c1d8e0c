// SPDX-License-Identifier: MIT OR Apache-2.0

//! Indirect-object-identification prompts, their corrupted counterparts and
//! the logit-difference metric.

mod dataset;
mod templates;

pub use dataset::{
    evaluate_ioi, logit_diff, make_corrupted, mean_logit_diff, IoiDataset, IoiExample, IoiScore,
    IoiTask, DEFAULT_EVAL_SEED, DEFAULT_EVAL_SIZE,
};
pub use templates::{
    build_vocabulary, default_templates, Piece, Pools, PromptTemplate, BOS, DEFAULT_TEMPLATES, END,
    FILLER_TEMPLATES,
};
