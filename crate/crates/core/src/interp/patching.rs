// SPDX-License-Identifier: MIT OR Apache-2.0

//! Activation patching between clean and corrupted runs.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ioi::{logit_diff, IoiExample};
use crate::numerics::Scalar;
use crate::transformer::{ActivationCache, HookPointId, HookSite, Intervention, Parameters};

/// Smallest `|clean - corrupted|` for which recovery is defined.
pub const MIN_BASELINE_GAP: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PatchMode {
    /// Clean activations into the corrupted run.
    Denoise,
    /// Corrupted activations into the clean run.
    Noise,
}

impl PatchMode {
    pub fn name(self) -> &'static str {
        match self {
            PatchMode::Denoise => "denoise",
            PatchMode::Noise => "noise",
        }
    }
}

impl fmt::Display for PatchMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for PatchMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "denoise" => Ok(PatchMode::Denoise),
            "noise" => Ok(PatchMode::Noise),
            _ => Err(Error::InvalidArgument(format!("unknown patch mode {s:?} (denoise | noise)"))),
        }
    }
}

/// The activation family a grid sweeps over.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SiteFamily {
    /// One cell per `(layer, position)`.
    ResidPre,
    AttnOut,
    MlpOut,
    /// One cell per `(layer, head)`, all positions patched together.
    HeadZ,
}

impl SiteFamily {
    pub const ALL: [SiteFamily; 4] = [
        SiteFamily::ResidPre,
        SiteFamily::AttnOut,
        SiteFamily::MlpOut,
        SiteFamily::HeadZ,
    ];

    pub fn name(self) -> &'static str {
        self.site().name()
    }

    pub fn site(self) -> HookSite {
        match self {
            SiteFamily::ResidPre => HookSite::ResidPre,
            SiteFamily::AttnOut => HookSite::AttnOut,
            SiteFamily::MlpOut => HookSite::MlpOut,
            SiteFamily::HeadZ => HookSite::HeadZ,
        }
    }
}

impl fmt::Display for SiteFamily {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for SiteFamily {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        SiteFamily::ALL
            .into_iter()
            .find(|f| f.name() == s)
            .ok_or_else(|| {
                Error::InvalidArgument(format!(
                    "unknown site family {s:?} (resid_pre | attn_out | mlp_out | head_z)"
                ))
            })
    }
}

/// Share of the clean/corrupted gap that a patch moves. Denoising measures
/// `(patched − corrupted) / (clean − corrupted)`, noising
/// `(patched − clean) / (corrupted − clean)`. Values outside `[0, 1]` are
/// legitimate.
pub fn recovery_metric(patched: f64, clean: f64, corrupted: f64, mode: PatchMode) -> Result<f64> {
    if (clean - corrupted).abs() < MIN_BASELINE_GAP {
        return Err(Error::UndefinedBaseline(clean - corrupted));
    }
    Ok(match mode {
        PatchMode::Denoise => (patched - corrupted) / (clean - corrupted),
        PatchMode::Noise => (patched - clean) / (corrupted - clean),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PatchGrid {
    pub family: SiteFamily,
    pub mode: PatchMode,
    /// One per layer.
    pub rows: usize,
    /// Positions, or heads for `head_z`.
    pub cols: usize,
    /// Mean patched logit difference per cell, row-major.
    pub raw: Vec<f64>,
    /// Recovery of the mean patched difference per cell, row-major.
    pub recovery: Vec<f64>,
    pub clean_mean: f64,
    pub corrupted_mean: f64,
}

impl PatchGrid {
    pub fn raw_at(&self, row: usize, col: usize) -> f64 {
        self.raw[row * self.cols + col]
    }

    pub fn recovery_at(&self, row: usize, col: usize) -> f64 {
        self.recovery[row * self.cols + col]
    }
}

/// Both runs of one example, with caches.
struct Pair<T> {
    clean: ActivationCache<T>,
    corrupted: ActivationCache<T>,
    clean_diff: f64,
    corrupted_diff: f64,
}

fn run_pair<T: Scalar>(params: &Parameters<T>, e: &IoiExample) -> Result<Pair<T>> {
    if e.clean_tokens.len() != e.corrupted_tokens.len() {
        return Err(Error::Dataset(format!(
            "clean and corrupted prompts differ in length ({} vs {})",
            e.clean_tokens.len(),
            e.corrupted_tokens.len()
        )));
    }
    let c = params.forward(&e.clean_tokens, true)?;
    let k = params.forward(&e.corrupted_tokens, true)?;
    Ok(Pair {
        clean_diff: logit_diff(&c.logits, e)?,
        corrupted_diff: logit_diff(&k.logits, e)?,
        clean: c.cache.expect("captured"),
        corrupted: k.cache.expect("captured"),
    })
}

fn check_examples(examples: &[IoiExample]) -> Result<usize> {
    let first = examples
        .first()
        .ok_or_else(|| Error::Dataset("no examples to patch".into()))?;
    let len = first.clean_tokens.len();
    if examples.iter().any(|e| e.clean_tokens.len() != len || e.end_pos != first.end_pos) {
        return Err(Error::Dataset(
            "patching needs every prompt to share one length and answer position".into(),
        ));
    }
    Ok(len)
}

/// Outcome of one patch applied to every example.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PatchOutcome {
    pub patched_mean: f64,
    pub clean_mean: f64,
    pub corrupted_mean: f64,
    pub recovery: f64,
}

/// Applies the interventions `build(donor, receiver, example)` to every
/// example's receiving run and reports the recovery of the mean patched
/// logit difference. In denoise mode the donor is the clean run and the
/// receiver the corrupted one; noise mode swaps them.
pub fn patch_recovery<T, F>(
    params: &Parameters<T>,
    examples: &[IoiExample],
    mode: PatchMode,
    mut build: F,
) -> Result<PatchOutcome>
where
    T: Scalar,
    F: FnMut(&ActivationCache<T>, &ActivationCache<T>, &IoiExample) -> Result<Vec<Intervention<T>>>,
{
    check_examples(examples)?;
    let mut sums = [0.0; 3];
    for e in examples {
        let pair = run_pair(params, e)?;
        let (donor, receiver, tokens) = match mode {
            PatchMode::Denoise => (&pair.clean, &pair.corrupted, &e.corrupted_tokens),
            PatchMode::Noise => (&pair.corrupted, &pair.clean, &e.clean_tokens),
        };
        let ivs = build(donor, receiver, e)?;
        let out = params.forward_with_interventions(tokens, &ivs, false)?;
        sums[0] += logit_diff(&out.logits, e)?;
        sums[1] += pair.clean_diff;
        sums[2] += pair.corrupted_diff;
    }
    let n = examples.len() as f64;
    let [patched_mean, clean_mean, corrupted_mean] = sums.map(|s| s / n);
    Ok(PatchOutcome {
        patched_mean,
        clean_mean,
        corrupted_mean,
        recovery: recovery_metric(patched_mean, clean_mean, corrupted_mean, mode)?,
    })
}

/// Patches every cell of `family` in turn and averages over `examples`.
pub fn run_patch_experiment<T: Scalar>(
    params: &Parameters<T>,
    examples: &[IoiExample],
    family: SiteFamily,
    mode: PatchMode,
) -> Result<PatchGrid> {
    let seq = check_examples(examples)?;
    let cfg = &params.config;
    let (rows, cols) = match family {
        SiteFamily::HeadZ => (cfg.n_layer, cfg.n_head),
        _ => (cfg.n_layer, seq),
    };
    let cell = |r: usize, c: usize| match family {
        SiteFamily::HeadZ => HookPointId::new(HookSite::HeadZ, r).head(c),
        _ => HookPointId::new(family.site(), r).at(c),
    };
    let mut raw = vec![0.0; rows * cols];
    let (mut clean_sum, mut corrupted_sum) = (0.0, 0.0);
    for e in examples {
        let pair = run_pair(params, e)?;
        clean_sum += pair.clean_diff;
        corrupted_sum += pair.corrupted_diff;
        let (donor, tokens) = match mode {
            PatchMode::Denoise => (&pair.clean, &e.corrupted_tokens),
            PatchMode::Noise => (&pair.corrupted, &e.clean_tokens),
        };
        for r in 0..rows {
            for c in 0..cols {
                let iv = donor.patch_from(cell(r, c))?;
                let out = params.forward_with_interventions(tokens, &[iv], false)?;
                raw[r * cols + c] += logit_diff(&out.logits, e)?;
            }
        }
    }
    let n = examples.len() as f64;
    raw.iter_mut().for_each(|x| *x /= n);
    let (clean_mean, corrupted_mean) = (clean_sum / n, corrupted_sum / n);
    let recovery = raw
        .iter()
        .map(|&p| recovery_metric(p, clean_mean, corrupted_mean, mode))
        .collect::<Result<Vec<_>>>()?;
    Ok(PatchGrid {
        family,
        mode,
        rows,
        cols,
        raw,
        recovery,
        clean_mean,
        corrupted_mean,
    })
}
