// SPDX-License-Identifier: MIT OR Apache-2.0

//! GPT-2-style decoder: configuration, tied-embedding parameters, and a
//! forward pass with activation capture and interventions.

mod config;
mod forward;
mod hooks;
mod params;

pub use config::{ModelConfig, ResidualCount};
pub use forward::{AttentionPath, ForwardOutput, HeadOutputs};
pub(crate) use forward::Trace;
pub use hooks::{ActivationCache, HookPointId, HookSite, Intervention};
pub use params::{LayerNormParams, LayerParams, ParamKind, Parameters};
