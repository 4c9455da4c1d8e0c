// SPDX-License-Identifier: MIT OR Apache-2.0

//! Hook points, interventions and activation caches.

use std::fmt;

use serde::{Deserialize, Serialize};

use super::ModelConfig;
use crate::error::{Error, Result};
use crate::numerics::{LnStats, Scalar, Tensor};

/// Named activation sites of the forward pass.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HookSite {
    /// Residual stream entering block `layer`, `[seq, d_model]`.
    ResidPre,
    /// Attention sublayer output incl. bias, `[seq, d_model]`.
    AttnOut,
    /// MLP sublayer output, `[seq, d_model]`.
    MlpOut,
    /// Per-head mixed values before `W_O`, `[seq, d_head]` per head.
    HeadZ,
    /// Per-head attention probabilities, `[seq, seq]` per head.
    Pattern,
    /// Residual stream after the last block, before the final layer norm.
    ResidFinal,
}

impl HookSite {
    pub fn name(self) -> &'static str {
        match self {
            HookSite::ResidPre => "resid_pre",
            HookSite::AttnOut => "attn_out",
            HookSite::MlpOut => "mlp_out",
            HookSite::HeadZ => "head_z",
            HookSite::Pattern => "pattern",
            HookSite::ResidFinal => "resid_final",
        }
    }

    pub fn is_per_head(self) -> bool {
        matches!(self, HookSite::HeadZ | HookSite::Pattern)
    }
}

impl fmt::Display for HookSite {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// One hook point, optionally narrowed to a head and/or a position.
///
/// `position == None` addresses every position. For `ResidFinal`, `layer`
/// is always 0.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct HookPointId {
    pub site: HookSite,
    pub layer: usize,
    pub head: Option<usize>,
    pub position: Option<usize>,
}

impl HookPointId {
    pub fn new(site: HookSite, layer: usize) -> Self {
        Self {
            site,
            layer,
            head: None,
            position: None,
        }
    }

    pub fn resid_final() -> Self {
        Self::new(HookSite::ResidFinal, 0)
    }

    pub fn head(mut self, head: usize) -> Self {
        self.head = Some(head);
        self
    }

    pub fn at(mut self, position: usize) -> Self {
        self.position = Some(position);
        self
    }

    /// Shape of the activation slice this id addresses.
    pub fn slice_shape(&self, config: &ModelConfig, seq_len: usize) -> Vec<usize> {
        let width = match self.site {
            HookSite::HeadZ => config.d_head(),
            HookSite::Pattern => seq_len,
            _ => config.d_model,
        };
        match self.position {
            Some(_) => vec![width],
            None => vec![seq_len, width],
        }
    }

    pub fn validate(&self, config: &ModelConfig, seq_len: usize) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidIntervention(format!("{self}: {m}")));
        if self.site == HookSite::ResidFinal {
            if self.layer != 0 {
                return bad("resid_final takes layer 0".into());
            }
        } else if self.layer >= config.n_layer {
            return bad(format!("layer out of range (n_layer {})", config.n_layer));
        }
        match (self.site.is_per_head(), self.head) {
            (true, None) => return bad("head index required".into()),
            (false, Some(_)) => return bad("head index only valid for head_z/pattern".into()),
            (true, Some(h)) if h >= config.n_head => {
                return bad(format!("head out of range (n_head {})", config.n_head))
            }
            _ => {}
        }
        if let Some(p) = self.position {
            if p >= seq_len {
                return bad(format!("position out of range (seq_len {seq_len})"));
            }
        }
        Ok(())
    }

    fn overlaps(&self, other: &Self) -> bool {
        self.site == other.site
            && self.layer == other.layer
            && self.head == other.head
            && match (self.position, other.position) {
                (Some(a), Some(b)) => a == b,
                _ => true,
            }
    }
}

impl fmt::Display for HookPointId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "blocks.{}.{}", self.layer, self.site)?;
        if let Some(h) = self.head {
            write!(f, "[head {h}]")?;
        }
        match self.position {
            Some(p) => write!(f, "[pos {p}]"),
            None => write!(f, "[all]"),
        }
    }
}

/// Overwrite one activation slice with a replacement during the forward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct Intervention<T = f32> {
    pub target: HookPointId,
    pub replacement: Tensor<T>,
}

impl<T: Scalar> Intervention<T> {
    pub fn new(target: HookPointId, replacement: Tensor<T>) -> Self {
        Self {
            target,
            replacement,
        }
    }
}

/// Validated interventions for one forward pass.
pub(crate) struct InterventionSet<'a, T> {
    items: Vec<&'a Intervention<T>>,
}

impl<'a, T: Scalar> InterventionSet<'a, T> {
    pub(crate) fn empty() -> Self {
        Self { items: Vec::new() }
    }

    pub(crate) fn new(
        list: &'a [Intervention<T>],
        config: &ModelConfig,
        seq_len: usize,
    ) -> Result<Self> {
        let mut items: Vec<&Intervention<T>> = Vec::with_capacity(list.len());
        for iv in list {
            iv.target.validate(config, seq_len)?;
            let want = iv.target.slice_shape(config, seq_len);
            if iv.replacement.shape() != want.as_slice() {
                return Err(Error::ShapeMismatch {
                    op: "intervention replacement",
                    expected: want,
                    actual: iv.replacement.shape().to_vec(),
                });
            }
            if let Some(prev) = items.iter().find(|p| p.target.overlaps(&iv.target)) {
                if prev.target != iv.target || prev.replacement != iv.replacement {
                    return Err(Error::ConflictingInterventions(iv.target.to_string()));
                }
                continue;
            }
            items.push(iv);
        }
        Ok(Self { items })
    }

    pub(crate) fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    /// Applies every intervention at `(site, layer, head)` to `data`, whose
    /// rows are positions.
    pub(crate) fn apply(&self, site: HookSite, layer: usize, head: Option<usize>, data: &mut [T], width: usize) {
        for iv in &self.items {
            let t = &iv.target;
            if t.site != site || t.layer != layer || t.head != head {
                continue;
            }
            match t.position {
                Some(p) => data[p * width..(p + 1) * width].copy_from_slice(iv.replacement.data()),
                None => data.copy_from_slice(iv.replacement.data()),
            }
        }
    }
}

/// Every hook-point activation from one forward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct ActivationCache<T = f32> {
    pub tokens: Vec<usize>,
    /// Per layer, `[seq, d_model]`.
    pub resid_pre: Vec<Tensor<T>>,
    pub attn_out: Vec<Tensor<T>>,
    pub mlp_out: Vec<Tensor<T>>,
    /// Per layer, `[n_head, seq, d_head]`.
    pub head_z: Vec<Tensor<T>>,
    /// Per layer, `[n_head, seq, seq]`, zero above the diagonal.
    pub pattern: Vec<Tensor<T>>,
    /// `[seq, d_model]`
    pub resid_final: Tensor<T>,
    /// Statistics the final layer norm used for each position.
    pub final_ln: LnStats<T>,
}

impl<T: Scalar> ActivationCache<T> {
    pub fn seq_len(&self) -> usize {
        self.tokens.len()
    }

    pub fn n_layer(&self) -> usize {
        self.resid_pre.len()
    }

    /// The slice addressed by `id`, shaped as [`HookPointId::slice_shape`].
    pub fn get(&self, id: &HookPointId) -> Result<Tensor<T>> {
        let missing = || Error::MissingCache(id.to_string());
        fn layer_tensor<'c, T>(v: &'c [Tensor<T>], id: &HookPointId) -> Result<&'c Tensor<T>> {
            v.get(id.layer)
                .ok_or_else(|| Error::MissingCache(id.to_string()))
        }
        let (full, width): (&[T], usize) = match id.site {
            HookSite::ResidPre => {
                let t = layer_tensor(&self.resid_pre, id)?;
                (t.data(), t.last_dim())
            }
            HookSite::AttnOut => {
                let t = layer_tensor(&self.attn_out, id)?;
                (t.data(), t.last_dim())
            }
            HookSite::MlpOut => {
                let t = layer_tensor(&self.mlp_out, id)?;
                (t.data(), t.last_dim())
            }
            HookSite::HeadZ | HookSite::Pattern => {
                let v = if id.site == HookSite::HeadZ {
                    &self.head_z
                } else {
                    &self.pattern
                };
                let t = layer_tensor(v, id)?;
                let h = id.head.ok_or_else(missing)?;
                if h >= t.shape()[0] {
                    return Err(missing());
                }
                (t.slab(h), t.last_dim())
            }
            HookSite::ResidFinal => (self.resid_final.data(), self.resid_final.last_dim()),
        };
        let rows = full.len() / width;
        match id.position {
            Some(p) if p < rows => Ok(Tensor::from_raw(
                vec![width],
                full[p * width..(p + 1) * width].to_vec(),
            )),
            Some(_) => Err(missing()),
            None => Ok(Tensor::from_raw(vec![rows, width], full.to_vec())),
        }
    }

    /// Intervention that writes this cache's value at `id` into another run.
    pub fn patch_from(&self, id: HookPointId) -> Result<Intervention<T>> {
        Ok(Intervention::new(id, self.get(&id)?))
    }
}
