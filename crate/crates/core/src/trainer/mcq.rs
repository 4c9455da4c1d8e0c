// SPDX-License-Identifier: MIT OR Apache-2.0

//! Multiple-choice ranking by completion likelihood.

use serde::{Deserialize, Serialize};

use super::grad::token_nll;
use crate::error::{Error, Result};
use crate::numerics::Scalar;
use crate::transformer::Parameters;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct McqItem {
    pub context: Vec<usize>,
    pub completions: Vec<Vec<usize>>,
    pub gold: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct McqReport {
    pub accuracy: f64,
    /// Per item, the loss of every completion.
    pub losses: Vec<Vec<f64>>,
    pub predictions: Vec<usize>,
}

/// Scores each completion by its cross-entropy given the context and picks
/// the lowest, ties going to the lowest index. With `normalize`, losses are
/// divided by completion length.
pub fn evaluate_mcq<T: Scalar>(
    params: &Parameters<T>,
    items: &[McqItem],
    normalize: bool,
) -> Result<McqReport> {
    if items.is_empty() {
        return Err(Error::InvalidArgument("no multiple-choice items".into()));
    }
    let mut losses = Vec::with_capacity(items.len());
    let mut predictions = Vec::with_capacity(items.len());
    let mut correct = 0usize;
    for (n, item) in items.iter().enumerate() {
        let k = item.completions.len();
        if k < 2 {
            return Err(Error::InvalidArgument(format!("item {n}: need at least 2 completions, got {k}")));
        }
        if item.gold >= k {
            return Err(Error::InvalidArgument(format!("item {n}: gold index {} out of range", item.gold)));
        }
        if item.context.is_empty() {
            return Err(Error::InvalidArgument(format!("item {n}: empty context")));
        }
        let mut row = Vec::with_capacity(k);
        for (c, completion) in item.completions.iter().enumerate() {
            if completion.is_empty() {
                return Err(Error::InvalidArgument(format!("item {n}: completion {c} is empty")));
            }
            let seq: Vec<usize> = item.context.iter().chain(completion).copied().collect();
            let logits = params.forward(&seq, false)?.logits;
            let start = item.context.len() - 1;
            let mut loss: f64 = (0..completion.len())
                .map(|i| token_nll(logits.row(start + i), completion[i]))
                .sum();
            if normalize {
                loss /= completion.len() as f64;
            }
            row.push(loss);
        }
        let best = row
            .iter()
            .enumerate()
            .fold(0, |best, (i, &l)| if l < row[best] { i } else { best });
        correct += usize::from(best == item.gold);
        predictions.push(best);
        losses.push(row);
    }
    Ok(McqReport {
        accuracy: correct as f64 / items.len() as f64,
        losses,
        predictions,
    })
}
