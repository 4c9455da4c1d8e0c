// SPDX-License-Identifier: MIT OR Apache-2.0

//! Balanced refactoring of a head's QK and OV circuits through their SVD.

use crate::error::{Error, Result};
use crate::numerics::gemm::matmul_a_bt_acc;
use crate::numerics::{layernorm_rows, svd_small, Scalar, Tensor};
use crate::transformer::Parameters;

const SVD_TOL: f64 = 1e-13;

/// `left · rightᵀ` reproduces a `d_model×d_model` product of rank at most
/// `d_head`, with the singular values split evenly between the factors.
#[derive(Debug, Clone, PartialEq)]
pub struct BalancedFactors {
    /// `[d_model, d_head]`, `U·√S`.
    pub left: Tensor<f64>,
    /// `[d_model, d_head]`, `V·√S`.
    pub right: Tensor<f64>,
    /// Every singular value of the product, descending.
    pub singular_values: Vec<f64>,
}

impl BalancedFactors {
    /// Leading singular values beyond `rank`, relative to the largest.
    pub fn tail_ratio(&self, rank: usize) -> f64 {
        let s1 = self.singular_values.first().copied().unwrap_or(0.0);
        if s1 == 0.0 {
            return 0.0;
        }
        self.singular_values.get(rank).map_or(0.0, |s| s / s1)
    }

    fn product(&self) -> Tensor<f64> {
        let (d, k) = (self.left.shape()[0], self.left.shape()[1]);
        let mut out = vec![0.0; d * d];
        matmul_a_bt_acc(self.left.data(), self.right.data(), &mut out, d, k, d);
        Tensor::new([d, d], out).expect("finite")
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SymmetrizedHead {
    pub layer: usize,
    pub head: usize,
    /// `W_Q' = left`, `W_K' = right`.
    pub qk: BalancedFactors,
    /// `W_V' = left`, `W_O' = rightᵀ`.
    pub ov: BalancedFactors,
}

fn to_f64<T: Scalar>(x: &[T]) -> Vec<f64> {
    x.iter().map(|v| v.as_f64()).collect()
}

fn balanced(m: Tensor<f64>, keep: usize) -> Result<BalancedFactors> {
    let f = svd_small(&m, SVD_TOL)?;
    let d = m.shape()[0];
    let k = f.s.len();
    let take = |t: &Tensor<f64>| {
        let mut out = vec![0.0; d * keep];
        for i in 0..d {
            for c in 0..keep.min(k) {
                out[i * keep + c] = t.get2(i, c) * f.s.data()[c].sqrt();
            }
        }
        Tensor::new([d, keep], out)
    };
    Ok(BalancedFactors {
        left: take(&f.u)?,
        right: take(&f.v)?,
        singular_values: f.s.data().to_vec(),
    })
}

/// Factors `W_Q·W_Kᵀ` and `W_V·W_O` of one head, computed in f64.
pub fn svd_symmetrize<T: Scalar>(params: &Parameters<T>, layer: usize, head: usize) -> Result<SymmetrizedHead> {
    let cfg = &params.config;
    if layer >= cfg.n_layer || head >= cfg.n_head {
        return Err(Error::InvalidArgument(format!(
            "head {layer}.{head} does not exist ({} layers, {} heads)",
            cfg.n_layer, cfg.n_head
        )));
    }
    let (d, dh) = (cfg.d_model, cfg.d_head());
    let p = &params.layers[layer];
    let wq = to_f64(p.w_q.slab(head));
    let wk = to_f64(p.w_k.slab(head));
    let mut qk = vec![0.0; d * d];
    matmul_a_bt_acc(&wq, &wk, &mut qk, d, dh, d);
    let wv = Tensor::new([d, dh], to_f64(p.w_v.slab(head)))?;
    let wo = Tensor::new([dh, d], to_f64(p.w_o.slab(head)))?;
    Ok(SymmetrizedHead {
        layer,
        head,
        qk: balanced(Tensor::new([d, d], qk)?, dh)?,
        ov: balanced(wv.matmul(&wo)?, dh)?,
    })
}

impl SymmetrizedHead {
    /// Frobenius distance of the rebuilt QK product from `W_Q·W_Kᵀ`.
    pub fn qk_error<T: Scalar>(&self, params: &Parameters<T>) -> f64 {
        let cfg = &params.config;
        let (d, dh) = (cfg.d_model, cfg.d_head());
        let p = &params.layers[self.layer];
        let mut m = vec![0.0; d * d];
        matmul_a_bt_acc(&to_f64(p.w_q.slab(self.head)), &to_f64(p.w_k.slab(self.head)), &mut m, d, dh, d);
        let m = Tensor::new([d, d], m).expect("finite");
        self.qk.product().sub(&m).expect("same shape").frobenius_norm()
    }

    /// Frobenius distance of the rebuilt OV product from `W_V·W_O`.
    pub fn ov_error<T: Scalar>(&self, params: &Parameters<T>) -> f64 {
        let cfg = &params.config;
        let (d, dh) = (cfg.d_model, cfg.d_head());
        let p = &params.layers[self.layer];
        let wv = Tensor::new([d, dh], to_f64(p.w_v.slab(self.head))).expect("finite");
        let wo = Tensor::new([dh, d], to_f64(p.w_o.slab(self.head))).expect("finite");
        let m = wv.matmul(&wo).expect("shapes");
        self.ov.product().sub(&m).expect("same shape").frobenius_norm()
    }

    /// Writes `W_Q'`, `W_K'` into `params`.
    pub fn apply_qk<T: Scalar>(&self, params: &mut Parameters<T>) {
        let p = &mut params.layers[self.layer];
        copy_cast(self.qk.left.data(), p.w_q.slab_mut(self.head));
        copy_cast(self.qk.right.data(), p.w_k.slab_mut(self.head));
    }

    /// Writes `W_V'`, `W_O'` into `params`.
    pub fn apply_ov<T: Scalar>(&self, params: &mut Parameters<T>) {
        let p = &mut params.layers[self.layer];
        copy_cast(self.ov.left.data(), p.w_v.slab_mut(self.head));
        let wo = self.ov.right.transpose().expect("2-D");
        copy_cast(wo.data(), p.w_o.slab_mut(self.head));
    }
}

fn copy_cast<T: Scalar>(src: &[f64], dst: &mut [T]) {
    dst.iter_mut().zip(src).for_each(|(d, &s)| *d = T::of(s));
}

/// Scaled pre-softmax attention scores `q_i·k_j/√d_head` of one head for
/// the residual stream `resid_pre` (`[seq, d_model]`) entering `layer`,
/// computed in f64. Entries above the diagonal are masked in the model and
/// returned as 0.
pub fn attention_scores<T: Scalar>(
    params: &Parameters<T>,
    layer: usize,
    head: usize,
    resid_pre: &Tensor<T>,
) -> Result<Tensor<f64>> {
    let cfg = &params.config;
    if layer >= cfg.n_layer || head >= cfg.n_head {
        return Err(Error::InvalidArgument(format!("head {layer}.{head} does not exist")));
    }
    let (d, dh) = (cfg.d_model, cfg.d_head());
    if resid_pre.shape().len() != 2 || resid_pre.last_dim() != d {
        return Err(Error::ShapeMismatch {
            op: "attention_scores",
            expected: vec![resid_pre.n_rows(), d],
            actual: resid_pre.shape().to_vec(),
        });
    }
    let p = &params.layers[layer];
    let seq = resid_pre.n_rows();
    let x = to_f64(resid_pre.data());
    let mut ln = vec![0.0; x.len()];
    layernorm_rows(
        &x,
        d,
        &to_f64(p.ln1.gamma.data()),
        &to_f64(p.ln1.beta.data()),
        cfg.ln_eps,
        &mut ln,
    );
    let ln = Tensor::new([seq, d], ln)?;
    let q = ln.matmul(&Tensor::new([d, dh], to_f64(p.w_q.slab(head)))?)?;
    let k = ln.matmul(&Tensor::new([d, dh], to_f64(p.w_k.slab(head)))?)?;
    let scale = 1.0 / (dh as f64).sqrt();
    let mut out = vec![0.0; seq * seq];
    for i in 0..seq {
        for j in 0..=i {
            out[i * seq + j] = q.row(i).iter().zip(k.row(j)).map(|(a, b)| a * b).sum::<f64>() * scale;
        }
    }
    Tensor::new([seq, seq], out)
}
