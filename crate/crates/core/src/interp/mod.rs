// SPDX-License-Identifier: MIT OR Apache-2.0

//! Direct logit attribution, activation patching and QK/OV symmetrization.

mod attribution;
mod patching;
mod symmetrize;

pub use attribution::{
    attribute_example, direct_logit_attribution, fold_final_ln, logit_diff_direction, Attribution,
    AttributionReport, FoldedFinalLn, LogitDiffDirection,
};
pub use patching::{
    patch_recovery, recovery_metric, run_patch_experiment, PatchGrid, PatchMode, PatchOutcome,
    SiteFamily, MIN_BASELINE_GAP,
};
pub use symmetrize::{attention_scores, svd_symmetrize, BalancedFactors, SymmetrizedHead};
