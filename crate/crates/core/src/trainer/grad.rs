// SPDX-License-Identifier: MIT OR Apache-2.0

//! Next-token cross-entropy and its reverse-mode gradient through the
//! exact forward graph.

use crate::error::{Error, Result};
use crate::numerics::gemm::{matmul_a_bt_acc, matmul_acc, matmul_at_b_acc};
use crate::numerics::{gelu_grad, LnStats, Scalar};
use crate::transformer::{LayerNormParams, Parameters, Trace};

/// Mean next-token loss over every predicted position of `batch`, with the
/// gradient of that mean.
pub fn loss_and_grads<T: Scalar>(
    params: &Parameters<T>,
    batch: &[Vec<usize>],
) -> Result<(f64, Parameters<T>)> {
    let (loss, grads, _) = loss_and_grads_counted(params, batch)?;
    Ok((loss, grads))
}

/// As [`loss_and_grads`], also returning the number of predicted positions.
pub(crate) fn loss_and_grads_counted<T: Scalar>(
    params: &Parameters<T>,
    batch: &[Vec<usize>],
) -> Result<(f64, Parameters<T>, usize)> {
    let count = predicted_positions(batch)?;
    let mut grads = Parameters::zeros(&params.config);
    let inv = T::one() / T::from_usize(count);
    let mut total = 0.0;
    for seq in batch {
        if seq.len() < 2 {
            continue;
        }
        let (logits, trace) = params.forward_trace(seq)?;
        let vocab = params.config.vocab_size;
        let mut dlogits = vec![T::zero(); seq.len() * vocab];
        for p in 0..seq.len() - 1 {
            let row = logits.row(p);
            let target = seq[p + 1];
            let max = row.iter().copied().fold(T::neg_infinity(), T::max);
            let sum: f64 = row.iter().map(|&x| (x - max).as_f64().exp()).sum();
            let lse = max.as_f64() + sum.ln();
            total += lse - row[target].as_f64();
            let d = &mut dlogits[p * vocab..(p + 1) * vocab];
            for (g, &x) in d.iter_mut().zip(row) {
                *g = T::of((x.as_f64() - lse).exp()) * inv;
            }
            d[target] -= inv;
        }
        backward_sequence(params, &trace, &dlogits, &mut grads);
    }
    Ok((total / count as f64, grads, count))
}

/// Mean next-token loss without gradients.
pub fn mean_loss<T: Scalar>(params: &Parameters<T>, batch: &[Vec<usize>]) -> Result<f64> {
    let count = predicted_positions(batch)?;
    let mut total = 0.0;
    for seq in batch {
        if seq.len() < 2 {
            continue;
        }
        let logits = params.forward(seq, false)?.logits;
        for p in 0..seq.len() - 1 {
            total += token_nll(logits.row(p), seq[p + 1]);
        }
    }
    Ok(total / count as f64)
}

/// `-log softmax(row)[target]`, evaluated in f64.
pub(crate) fn token_nll<T: Scalar>(row: &[T], target: usize) -> f64 {
    let max = row.iter().map(|x| x.as_f64()).fold(f64::NEG_INFINITY, f64::max);
    let sum: f64 = row.iter().map(|&x| (x.as_f64() - max).exp()).sum();
    max + sum.ln() - row[target].as_f64()
}

fn predicted_positions(batch: &[Vec<usize>]) -> Result<usize> {
    if batch.is_empty() {
        return Err(Error::InvalidArgument("empty batch".into()));
    }
    let count: usize = batch.iter().map(|s| s.len().saturating_sub(1)).sum();
    if count == 0 {
        return Err(Error::InvalidArgument(
            "batch has no sequence with at least two tokens".into(),
        ));
    }
    Ok(count)
}

fn col_sum_into<T: Scalar>(acc: &mut [T], data: &[T]) {
    for row in data.chunks(acc.len()) {
        acc.iter_mut().zip(row).for_each(|(a, &b)| *a += b);
    }
}

/// Layer-norm backward: accumulates into `dx` and the affine gradients.
fn layernorm_backward<T: Scalar>(
    x: &[T],
    d: usize,
    stats: &LnStats<T>,
    ln: &LayerNormParams<T>,
    dy: &[T],
    dx: &mut [T],
    dln: &mut LayerNormParams<T>,
) {
    let gamma = ln.gamma.data();
    let inv_d = T::one() / T::from_usize(d);
    let mut xhat = vec![T::zero(); d];
    let mut dxhat = vec![T::zero(); d];
    for r in 0..x.len() / d {
        let (mean, rstd) = (stats.mean[r], stats.rstd[r]);
        let xr = &x[r * d..(r + 1) * d];
        let dyr = &dy[r * d..(r + 1) * d];
        let mut mean_dxhat = T::zero();
        let mut mean_dxhat_xhat = T::zero();
        {
            let dgamma = dln.gamma.data_mut();
            for i in 0..d {
                xhat[i] = (xr[i] - mean) * rstd;
                dxhat[i] = dyr[i] * gamma[i];
                dgamma[i] += dyr[i] * xhat[i];
                mean_dxhat += dxhat[i];
                mean_dxhat_xhat += dxhat[i] * xhat[i];
            }
        }
        col_sum_into(dln.beta.data_mut(), dyr);
        mean_dxhat *= inv_d;
        mean_dxhat_xhat *= inv_d;
        let dxr = &mut dx[r * d..(r + 1) * d];
        for i in 0..d {
            dxr[i] += rstd * (dxhat[i] - mean_dxhat - xhat[i] * mean_dxhat_xhat);
        }
    }
}

/// Backpropagates `dlogits` (`[seq, vocab]`) through one recorded forward pass.
fn backward_sequence<T: Scalar>(
    params: &Parameters<T>,
    trace: &Trace<T>,
    dlogits: &[T],
    grads: &mut Parameters<T>,
) {
    let cfg = &params.config;
    let cache = &trace.cache;
    let seq = cache.seq_len();
    let (d, h, dh, dm, vocab) = (
        cfg.d_model,
        cfg.n_head,
        cfg.d_head(),
        cfg.d_mlp(),
        cfg.vocab_size,
    );
    let scale = T::one() / T::from_usize(dh).sqrt();

    // Unembedding (tied): logits = lnf_out · W_Eᵀ.
    let mut d_lnf = vec![T::zero(); seq * d];
    matmul_acc(dlogits, params.token_embedding.data(), &mut d_lnf, seq, vocab, d);
    matmul_at_b_acc(dlogits, &trace.lnf_out, grads.token_embedding.data_mut(), vocab, seq, d);

    let mut d_resid = vec![T::zero(); seq * d];
    layernorm_backward(
        cache.resid_final.data(),
        d,
        &cache.final_ln,
        &params.ln_final,
        &d_lnf,
        &mut d_resid,
        &mut grads.ln_final,
    );

    for l in (0..cfg.n_layer).rev() {
        let p = &params.layers[l];
        let lt = &trace.layers[l];
        let g = &mut grads.layers[l];
        let resid_pre = cache.resid_pre[l].data();
        let resid_mid: Vec<T> = resid_pre
            .iter()
            .zip(cache.attn_out[l].data())
            .map(|(&a, &b)| a + b)
            .collect();

        // MLP sublayer; d_resid is the gradient w.r.t. the block output.
        col_sum_into(g.b_out.data_mut(), &d_resid);
        matmul_at_b_acc(&lt.mlp_act, &d_resid, g.w_out.data_mut(), dm, seq, d);
        let mut d_pre = vec![T::zero(); seq * dm];
        matmul_a_bt_acc(&d_resid, p.w_out.data(), &mut d_pre, seq, d, dm);
        for (dp, &x) in d_pre.iter_mut().zip(&lt.mlp_pre) {
            *dp *= gelu_grad(x);
        }
        col_sum_into(g.b_in.data_mut(), &d_pre);
        matmul_at_b_acc(&lt.ln2_out, &d_pre, g.w_in.data_mut(), d, seq, dm);
        let mut d_ln2 = vec![T::zero(); seq * d];
        matmul_a_bt_acc(&d_pre, p.w_in.data(), &mut d_ln2, seq, dm, d);
        layernorm_backward(&resid_mid, d, &lt.ln2_stats, &p.ln2, &d_ln2, &mut d_resid, &mut g.ln2);

        // Attention sublayer; d_resid is now the gradient w.r.t. resid_mid.
        col_sum_into(g.b_o.data_mut(), &d_resid);
        let mut d_ln1 = vec![T::zero(); seq * d];
        let pattern = &cache.pattern[l];
        let z = &cache.head_z[l];
        for head in 0..h {
            let hs = head * seq * dh..(head + 1) * seq * dh;
            let (q, k, v) = (&lt.q[hs.clone()], &lt.k[hs.clone()], &lt.v[hs.clone()]);
            let pat = pattern.slab(head);

            matmul_at_b_acc(z.slab(head), &d_resid, g.w_o.slab_mut(head), dh, seq, d);
            let mut dz = vec![T::zero(); seq * dh];
            matmul_a_bt_acc(&d_resid, p.w_o.slab(head), &mut dz, seq, d, dh);

            let mut dpat = vec![T::zero(); seq * seq];
            matmul_a_bt_acc(&dz, v, &mut dpat, seq, dh, seq);
            let mut dv = vec![T::zero(); seq * dh];
            matmul_at_b_acc(pat, &dz, &mut dv, seq, seq, dh);

            // Softmax backward on the causal part of each row, then the score scale.
            let mut ds = vec![T::zero(); seq * seq];
            for i in 0..seq {
                let prow = &pat[i * seq..i * seq + i + 1];
                let drow = &dpat[i * seq..i * seq + i + 1];
                let inner: T = prow.iter().zip(drow).map(|(&a, &b)| a * b).sum();
                for j in 0..=i {
                    ds[i * seq + j] = prow[j] * (drow[j] - inner) * scale;
                }
            }
            let mut dq = vec![T::zero(); seq * dh];
            matmul_acc(&ds, k, &mut dq, seq, seq, dh);
            let mut dk = vec![T::zero(); seq * dh];
            matmul_at_b_acc(&ds, q, &mut dk, seq, seq, dh);

            for (dproj, w, gw) in [
                (&dq, &p.w_q, &mut g.w_q),
                (&dk, &p.w_k, &mut g.w_k),
                (&dv, &p.w_v, &mut g.w_v),
            ] {
                matmul_at_b_acc(&lt.ln1_out, dproj, gw.slab_mut(head), d, seq, dh);
                matmul_a_bt_acc(dproj, w.slab(head), &mut d_ln1, seq, dh, d);
            }
        }
        layernorm_backward(resid_pre, d, &lt.ln1_stats, &p.ln1, &d_ln1, &mut d_resid, &mut g.ln1);
    }

    for (pos, &tok) in cache.tokens.iter().enumerate() {
        let dr = &d_resid[pos * d..(pos + 1) * d];
        grads
            .token_embedding
            .row_mut(tok)
            .iter_mut()
            .zip(dr)
            .for_each(|(a, &b)| *a += b);
        grads
            .positional_embedding
            .row_mut(pos)
            .iter_mut()
            .zip(dr)
            .for_each(|(a, &b)| *a += b);
    }
}
