// SPDX-License-Identifier: MIT OR Apache-2.0

//! Hookable forward pass of the pre-LN decoder.

use super::hooks::InterventionSet;
use super::{ActivationCache, HookSite, Intervention, Parameters};
use crate::error::{Error, Result};
use crate::numerics::gemm::{dot, matmul_a_bt_acc, matmul_acc};
use crate::numerics::{gelu, layernorm_rows, softmax_in_place, LnStats, OnlineSoftmax, Scalar, Tensor};

/// How attention probabilities are computed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum AttentionPath {
    /// Materialized score matrix, row softmax. Required for caching and patching.
    #[default]
    Naive,
    /// Streaming running-max/running-sum accumulation over keys; never
    /// materializes the pattern.
    Online,
}

#[derive(Debug, Clone)]
pub struct ForwardOutput<T = f32> {
    /// `[seq, vocab]`
    pub logits: Tensor<T>,
    pub cache: Option<ActivationCache<T>>,
}

/// Per-head residual-stream writes of one attention layer.
#[derive(Debug, Clone)]
pub struct HeadOutputs<T = f32> {
    /// `[n_head, seq, d_model]`, `z_h · W_O[h]`.
    pub per_head: Tensor<T>,
    /// The shared output bias `b_O`, added once per position.
    pub bias: Tensor<T>,
}

/// Intermediates the backward pass needs beyond the public cache.
#[derive(Debug, Clone)]
pub(crate) struct LayerTrace<T> {
    pub ln1_out: Vec<T>,
    pub ln1_stats: LnStats<T>,
    /// `[n_head, seq, d_head]` each.
    pub q: Vec<T>,
    pub k: Vec<T>,
    pub v: Vec<T>,
    pub ln2_out: Vec<T>,
    pub ln2_stats: LnStats<T>,
    pub mlp_pre: Vec<T>,
    pub mlp_act: Vec<T>,
}

#[derive(Debug, Clone)]
pub(crate) struct Trace<T> {
    pub cache: ActivationCache<T>,
    pub layers: Vec<LayerTrace<T>>,
    pub lnf_out: Vec<T>,
}

impl<T: Scalar> Parameters<T> {
    pub(crate) fn check_tokens(&self, tokens: &[usize]) -> Result<()> {
        if tokens.is_empty() {
            return Err(Error::EmptySequence);
        }
        if tokens.len() > self.config.n_ctx {
            return Err(Error::SequenceTooLong {
                len: tokens.len(),
                n_ctx: self.config.n_ctx,
            });
        }
        if let Some(&id) = tokens.iter().find(|&&t| t >= self.config.vocab_size) {
            return Err(Error::TokenOutOfRange {
                id,
                vocab_size: self.config.vocab_size,
            });
        }
        Ok(())
    }

    /// Logits for every position, optionally with the full activation cache.
    pub fn forward(&self, tokens: &[usize], capture: bool) -> Result<ForwardOutput<T>> {
        self.forward_with_interventions(tokens, &[], capture)
    }

    /// Like [`forward`](Self::forward), but each targeted activation is
    /// overwritten as soon as it is produced, so everything downstream sees
    /// the patched value.
    pub fn forward_with_interventions(
        &self,
        tokens: &[usize],
        interventions: &[Intervention<T>],
        capture: bool,
    ) -> Result<ForwardOutput<T>> {
        self.check_tokens(tokens)?;
        let ivs = InterventionSet::new(interventions, &self.config, tokens.len())?;
        let (logits, trace) = run(self, tokens, &ivs, capture, AttentionPath::Naive)?;
        Ok(ForwardOutput {
            logits,
            cache: trace.map(|t| t.cache),
        })
    }

    /// Inference-only forward pass using the streaming softmax for attention.
    pub fn forward_online(&self, tokens: &[usize]) -> Result<Tensor<T>> {
        self.check_tokens(tokens)?;
        run(self, tokens, &InterventionSet::empty(), false, AttentionPath::Online).map(|(l, _)| l)
    }

    pub(crate) fn forward_trace(&self, tokens: &[usize]) -> Result<(Tensor<T>, Trace<T>)> {
        self.check_tokens(tokens)?;
        let (logits, trace) = run(self, tokens, &InterventionSet::empty(), true, AttentionPath::Naive)?;
        Ok((logits, trace.expect("trace requested")))
    }

    /// Splits a cached attention layer into per-head residual contributions.
    pub fn attention_head_outputs(
        &self,
        layer: usize,
        cache: &ActivationCache<T>,
    ) -> Result<HeadOutputs<T>> {
        let cfg = &self.config;
        let params = self
            .layers
            .get(layer)
            .ok_or_else(|| Error::InvalidArgument(format!("layer {layer} out of range")))?;
        let z = cache
            .head_z
            .get(layer)
            .ok_or_else(|| Error::MissingCache(format!("blocks.{layer}.head_z")))?;
        let (h, d, dh) = (cfg.n_head, cfg.d_model, cfg.d_head());
        let seq = cache.seq_len();
        if z.shape() != [h, seq, dh] {
            return Err(Error::ShapeMismatch {
                op: "attention_head_outputs",
                expected: vec![h, seq, dh],
                actual: z.shape().to_vec(),
            });
        }
        let mut out = vec![T::zero(); h * seq * d];
        for head in 0..h {
            matmul_acc(
                z.slab(head),
                params.w_o.slab(head),
                &mut out[head * seq * d..(head + 1) * seq * d],
                seq,
                dh,
                d,
            );
        }
        Ok(HeadOutputs {
            per_head: Tensor::from_raw(vec![h, seq, d], out),
            bias: params.b_o.clone(),
        })
    }
}

fn add_into<T: Scalar>(acc: &mut [T], x: &[T]) {
    acc.iter_mut().zip(x).for_each(|(a, &b)| *a += b);
}

fn add_bias_rows<T: Scalar>(data: &mut [T], bias: &[T]) {
    for row in data.chunks_mut(bias.len()) {
        add_into(row, bias);
    }
}

fn run<T: Scalar>(
    params: &Parameters<T>,
    tokens: &[usize],
    ivs: &InterventionSet<'_, T>,
    keep: bool,
    path: AttentionPath,
) -> Result<(Tensor<T>, Option<Trace<T>>)> {
    debug_assert!(path == AttentionPath::Naive || ivs.is_empty());
    let cfg = &params.config;
    let (seq, d, h, dh, dm, vocab) = (
        tokens.len(),
        cfg.d_model,
        cfg.n_head,
        cfg.d_head(),
        cfg.d_mlp(),
        cfg.vocab_size,
    );
    let eps = T::of(cfg.ln_eps);
    let scale = T::one() / T::from_usize(dh).sqrt();

    let mut resid = vec![T::zero(); seq * d];
    for (p, &tok) in tokens.iter().enumerate() {
        let row = &mut resid[p * d..(p + 1) * d];
        row.copy_from_slice(params.token_embedding.row(tok));
        add_into(row, params.positional_embedding.row(p));
    }

    let mut cache_layers: Vec<[Tensor<T>; 5]> = Vec::new();
    let mut traces = Vec::new();

    for (l, layer) in params.layers.iter().enumerate() {
        ivs.apply(HookSite::ResidPre, l, None, &mut resid, d);
        let resid_pre = resid.clone();

        let mut ln1_out = vec![T::zero(); seq * d];
        let ln1_stats = layernorm_rows(&resid, d, layer.ln1.gamma.data(), layer.ln1.beta.data(), eps, &mut ln1_out);

        let mut q = vec![T::zero(); h * seq * dh];
        let mut k = vec![T::zero(); h * seq * dh];
        let mut v = vec![T::zero(); h * seq * dh];
        let mut z = vec![T::zero(); h * seq * dh];
        let mut pattern = if path == AttentionPath::Naive {
            vec![T::zero(); h * seq * seq]
        } else {
            Vec::new()
        };
        let mut attn_out = vec![T::zero(); seq * d];
        for head in 0..h {
            let hs = head * seq * dh..(head + 1) * seq * dh;
            matmul_acc(&ln1_out, layer.w_q.slab(head), &mut q[hs.clone()], seq, d, dh);
            matmul_acc(&ln1_out, layer.w_k.slab(head), &mut k[hs.clone()], seq, d, dh);
            matmul_acc(&ln1_out, layer.w_v.slab(head), &mut v[hs.clone()], seq, d, dh);
            let (qh, kh, vh) = (&q[hs.clone()], &k[hs.clone()], &v[hs.clone()]);
            let zh = &mut z[hs.clone()];
            match path {
                AttentionPath::Naive => {
                    let pat = &mut pattern[head * seq * seq..(head + 1) * seq * seq];
                    for i in 0..seq {
                        let row = &mut pat[i * seq..i * seq + i + 1];
                        for (j, s) in row.iter_mut().enumerate() {
                            *s = dot(&qh[i * dh..(i + 1) * dh], &kh[j * dh..(j + 1) * dh]) * scale;
                        }
                        softmax_in_place(row);
                    }
                    ivs.apply(HookSite::Pattern, l, Some(head), pat, seq);
                    matmul_acc(pat, vh, zh, seq, seq, dh);
                }
                AttentionPath::Online => {
                    for i in 0..seq {
                        let qi = &qh[i * dh..(i + 1) * dh];
                        let mut acc = OnlineSoftmax::default();
                        let mut out = vec![T::zero(); dh];
                        for j in 0..=i {
                            let s = dot(qi, &kh[j * dh..(j + 1) * dh]) * scale;
                            let rescale = acc.push(s);
                            let w = (s - acc.max()).exp();
                            for (o, &vj) in out.iter_mut().zip(&vh[j * dh..(j + 1) * dh]) {
                                *o = *o * rescale + w * vj;
                            }
                        }
                        let inv = T::one() / acc.denominator();
                        for (dst, o) in zh[i * dh..(i + 1) * dh].iter_mut().zip(out) {
                            *dst = o * inv;
                        }
                    }
                }
            }
            ivs.apply(HookSite::HeadZ, l, Some(head), zh, dh);
            matmul_acc(zh, layer.w_o.slab(head), &mut attn_out, seq, dh, d);
        }
        add_bias_rows(&mut attn_out, layer.b_o.data());
        ivs.apply(HookSite::AttnOut, l, None, &mut attn_out, d);
        add_into(&mut resid, &attn_out);

        let mut ln2_out = vec![T::zero(); seq * d];
        let ln2_stats = layernorm_rows(&resid, d, layer.ln2.gamma.data(), layer.ln2.beta.data(), eps, &mut ln2_out);
        let mut mlp_pre = vec![T::zero(); seq * dm];
        matmul_acc(&ln2_out, layer.w_in.data(), &mut mlp_pre, seq, d, dm);
        add_bias_rows(&mut mlp_pre, layer.b_in.data());
        let mlp_act: Vec<T> = mlp_pre.iter().map(|&x| gelu(x)).collect();
        let mut mlp_out = vec![T::zero(); seq * d];
        matmul_acc(&mlp_act, layer.w_out.data(), &mut mlp_out, seq, dm, d);
        add_bias_rows(&mut mlp_out, layer.b_out.data());
        ivs.apply(HookSite::MlpOut, l, None, &mut mlp_out, d);
        add_into(&mut resid, &mlp_out);

        if keep {
            cache_layers.push([
                Tensor::from_raw(vec![seq, d], resid_pre),
                Tensor::from_raw(vec![seq, d], attn_out),
                Tensor::from_raw(vec![seq, d], mlp_out),
                Tensor::from_raw(vec![h, seq, dh], z),
                Tensor::from_raw(vec![h, seq, seq], pattern),
            ]);
            traces.push(LayerTrace {
                ln1_out,
                ln1_stats,
                q,
                k,
                v,
                ln2_out,
                ln2_stats,
                mlp_pre,
                mlp_act,
            });
        }
    }

    ivs.apply(HookSite::ResidFinal, 0, None, &mut resid, d);
    let mut lnf_out = vec![T::zero(); seq * d];
    let final_ln = layernorm_rows(
        &resid,
        d,
        params.ln_final.gamma.data(),
        params.ln_final.beta.data(),
        eps,
        &mut lnf_out,
    );
    let mut logits = vec![T::zero(); seq * vocab];
    matmul_a_bt_acc(&lnf_out, params.token_embedding.data(), &mut logits, seq, d, vocab);
    let logits = Tensor::from_raw(vec![seq, vocab], logits);
    logits.ensure_finite("forward logits")?;

    let trace = keep.then(|| {
        let mut cache = ActivationCache {
            tokens: tokens.to_vec(),
            resid_pre: Vec::with_capacity(cfg.n_layer),
            attn_out: Vec::with_capacity(cfg.n_layer),
            mlp_out: Vec::with_capacity(cfg.n_layer),
            head_z: Vec::with_capacity(cfg.n_layer),
            pattern: Vec::with_capacity(cfg.n_layer),
            resid_final: Tensor::from_raw(vec![seq, d], resid),
            final_ln,
        };
        for [rp, ao, mo, hz, pat] in cache_layers {
            cache.resid_pre.push(rp);
            cache.attn_out.push(ao);
            cache.mlp_out.push(mo);
            cache.head_z.push(hz);
            cache.pattern.push(pat);
        }
        Trace {
            cache,
            layers: traces,
            lnf_out,
        }
    });
    Ok((logits, trace))
}
