// SPDX-License-Identifier: MIT OR Apache-2.0

//! Direct logit attribution through a frozen final layer norm.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ioi::{logit_diff, IoiExample};
use crate::numerics::Scalar;
use crate::transformer::{ActivationCache, Parameters};

/// `W_U[:, io] - W_U[:, s]`.
#[derive(Debug, Clone, PartialEq)]
pub struct LogitDiffDirection {
    pub vector: Vec<f64>,
    pub io: usize,
    pub s: usize,
}

pub fn logit_diff_direction<T: Scalar>(params: &Parameters<T>, io: usize, s: usize) -> Result<LogitDiffDirection> {
    let vocab = params.config.vocab_size;
    if let Some(&id) = [io, s].iter().find(|&&t| t >= vocab) {
        return Err(Error::TokenOutOfRange { id, vocab_size: vocab });
    }
    if io == s {
        return Err(Error::InvalidArgument(format!("io and s are both token {io}")));
    }
    let vector = params
        .unembed_column(io)
        .iter()
        .zip(params.unembed_column(s))
        .map(|(&a, &b)| a.as_f64() - b.as_f64())
        .collect();
    Ok(LogitDiffDirection { vector, io, s })
}

impl LogitDiffDirection {
    pub fn dot(&self, x: &[f64]) -> f64 {
        x.iter().zip(&self.vector).map(|(a, b)| a * b).sum()
    }
}

/// The final layer norm at one position with its statistics held fixed,
/// which makes it affine: `x ↦ γ ⊙ (x − mean(x)) · rstd + β`.
#[derive(Debug, Clone, PartialEq)]
pub struct FoldedFinalLn {
    pub gamma: Vec<f64>,
    pub beta: Vec<f64>,
    pub rstd: f64,
    pub position: usize,
}

/// Freezes the final layer norm of the run recorded in `cache` at `position`.
pub fn fold_final_ln<T: Scalar>(
    cache: &ActivationCache<T>,
    params: &Parameters<T>,
    position: usize,
) -> Result<FoldedFinalLn> {
    let rstd = cache
        .final_ln
        .rstd
        .get(position)
        .ok_or_else(|| Error::MissingCache(format!("final layer-norm statistics at position {position}")))?;
    let f = |t: &[T]| t.iter().map(|x| x.as_f64()).collect();
    Ok(FoldedFinalLn {
        gamma: f(params.ln_final.gamma.data()),
        beta: f(params.ln_final.beta.data()),
        rstd: rstd.as_f64(),
        position,
    })
}

impl FoldedFinalLn {
    /// The linear part, for one residual-stream component.
    pub fn apply<T: Scalar>(&self, component: &[T]) -> Vec<f64> {
        let n = component.len() as f64;
        let mean = component.iter().map(|x| x.as_f64()).sum::<f64>() / n;
        component
            .iter()
            .zip(&self.gamma)
            .map(|(&x, g)| g * (x.as_f64() - mean) * self.rstd)
            .collect()
    }

    /// The full affine map, bias included.
    pub fn apply_full<T: Scalar>(&self, x: &[T]) -> Vec<f64> {
        self.apply(x).iter().zip(&self.beta).map(|(a, b)| a + b).collect()
    }
}

/// Contributions to one logit difference, or their dataset mean.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Attribution {
    /// Token plus positional embedding.
    pub embed: f64,
    /// Per layer, the whole attention sublayer (heads and bias).
    pub attn: Vec<f64>,
    pub mlp: Vec<f64>,
    /// `[layer][head]`.
    pub heads: Vec<Vec<f64>>,
    /// Per layer, the attention output bias `b_O`.
    pub attn_bias: Vec<f64>,
    /// The final layer norm's `β`.
    pub final_ln_bias: f64,
    /// Embedding, then the running total after each layer.
    pub accumulated: Vec<f64>,
    /// The logit difference read off the model's logits.
    pub total: f64,
}

impl Attribution {
    /// Sum of every top-level component; equals `total` up to rounding.
    pub fn component_sum(&self) -> f64 {
        self.embed + self.attn.iter().sum::<f64>() + self.mlp.iter().sum::<f64>() + self.final_ln_bias
    }

    fn mean(items: &[Attribution]) -> Attribution {
        let n = items.len() as f64;
        let avg = |f: &dyn Fn(&Attribution) -> f64| items.iter().map(f).sum::<f64>() / n;
        let avg_vec = |f: &dyn Fn(&Attribution) -> &Vec<f64>| -> Vec<f64> {
            (0..f(&items[0]).len())
                .map(|i| items.iter().map(|a| f(a)[i]).sum::<f64>() / n)
                .collect()
        };
        Attribution {
            embed: avg(&|a| a.embed),
            attn: avg_vec(&|a| &a.attn),
            mlp: avg_vec(&|a| &a.mlp),
            heads: (0..items[0].heads.len())
                .map(|l| {
                    (0..items[0].heads[l].len())
                        .map(|h| items.iter().map(|a| a.heads[l][h]).sum::<f64>() / n)
                        .collect()
                })
                .collect(),
            attn_bias: avg_vec(&|a| &a.attn_bias),
            final_ln_bias: avg(&|a| a.final_ln_bias),
            accumulated: avg_vec(&|a| &a.accumulated),
            total: avg(&|a| a.total),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttributionReport {
    pub mean: Attribution,
    pub per_example: Vec<Attribution>,
}

/// Attribution of one example's clean-run logit difference.
pub fn attribute_example<T: Scalar>(params: &Parameters<T>, example: &IoiExample) -> Result<Attribution> {
    let out = params.forward(&example.clean_tokens, true)?;
    let cache = out
        .cache
        .ok_or_else(|| Error::MissingCache("activation cache".into()))?;
    let pos = example.end_pos;
    let dir = logit_diff_direction(params, example.io_token, example.s_token)?;
    let ln = fold_final_ln(&cache, params, pos)?;
    let project = |c: &[T]| dir.dot(&ln.apply(c));

    let embed = project(cache.resid_pre[0].row(pos));
    let n_layer = params.config.n_layer;
    let (mut attn, mut mlp, mut heads, mut attn_bias) = (vec![], vec![], vec![], vec![]);
    let mut accumulated = vec![embed];
    for l in 0..n_layer {
        attn.push(project(cache.attn_out[l].row(pos)));
        mlp.push(project(cache.mlp_out[l].row(pos)));
        let split = params.attention_head_outputs(l, &cache)?;
        let d = params.config.d_model;
        let seq = cache.seq_len();
        heads.push(
            (0..params.config.n_head)
                .map(|h| {
                    let s = h * seq * d + pos * d;
                    project(&split.per_head.data()[s..s + d])
                })
                .collect(),
        );
        attn_bias.push(project(split.bias.data()));
        accumulated.push(accumulated[l] + attn[l] + mlp[l]);
    }
    Ok(Attribution {
        embed,
        attn,
        mlp,
        heads,
        attn_bias,
        final_ln_bias: dir.dot(&ln.beta),
        accumulated,
        total: logit_diff(&out.logits, example)?,
    })
}

/// Per-example attributions and their mean over `examples`. Each example is
/// projected on its own answer direction, so a swapped twin pair contributes
/// both orientations to the mean.
pub fn direct_logit_attribution<T: Scalar>(
    params: &Parameters<T>,
    examples: &[IoiExample],
) -> Result<AttributionReport> {
    if examples.is_empty() {
        return Err(Error::Dataset("no examples to attribute".into()));
    }
    let per_example = examples
        .iter()
        .map(|e| attribute_example(params, e))
        .collect::<Result<Vec<_>>>()?;
    Ok(AttributionReport {
        mean: Attribution::mean(&per_example),
        per_example,
    })
}
