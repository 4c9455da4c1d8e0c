// SPDX-License-Identifier: MIT OR Apache-2.0

use super::ModelConfig;
use crate::error::Result;
use crate::numerics::{Scalar, SeededRng, Tensor};

const WEIGHT_STD: f64 = 0.02;
const POS_STD: f64 = 0.01;

/// What kind of tensor a parameter is; drives weight decay.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamKind {
    Embedding,
    Matrix,
    Bias,
    Norm,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerNormParams<T = f32> {
    pub gamma: Tensor<T>,
    pub beta: Tensor<T>,
}

impl<T: Scalar> LayerNormParams<T> {
    fn identity(d: usize) -> Self {
        Self {
            gamma: Tensor::filled([d], T::one()),
            beta: Tensor::zeros([d]),
        }
    }
}

/// Weights of one decoder block.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerParams<T = f32> {
    pub ln1: LayerNormParams<T>,
    /// `[n_head, d_model, d_head]`
    pub w_q: Tensor<T>,
    pub w_k: Tensor<T>,
    pub w_v: Tensor<T>,
    /// `[n_head, d_head, d_model]`
    pub w_o: Tensor<T>,
    pub b_o: Tensor<T>,
    pub ln2: LayerNormParams<T>,
    /// `[d_model, d_mlp]`
    pub w_in: Tensor<T>,
    pub b_in: Tensor<T>,
    /// `[d_mlp, d_model]`
    pub w_out: Tensor<T>,
    pub b_out: Tensor<T>,
}

/// All learned weights. The unembedding is `W_Eᵀ` and has no storage of
/// its own, so reads through [`Parameters::unembed_column`] always see the
/// current embedding.
#[derive(Debug, Clone, PartialEq)]
pub struct Parameters<T = f32> {
    pub config: ModelConfig,
    /// `[vocab_size, d_model]`
    pub token_embedding: Tensor<T>,
    /// `[n_ctx, d_model]`
    pub positional_embedding: Tensor<T>,
    pub layers: Vec<LayerParams<T>>,
    pub ln_final: LayerNormParams<T>,
}

macro_rules! visit_tensors {
    ($self:ident, $iter:ident, $($mut_:tt)?) => {{
        let mut out = Vec::with_capacity(4 + 16 * $self.layers.len());
        out.push(("embed.W_E".to_string(), ParamKind::Embedding, & $($mut_)? $self.token_embedding));
        out.push(("embed.W_pos".to_string(), ParamKind::Embedding, & $($mut_)? $self.positional_embedding));
        for (l, layer) in $self.layers.$iter().enumerate() {
            let p = |n: &str| format!("blocks.{l}.{n}");
            out.push((p("ln1.gamma"), ParamKind::Norm, & $($mut_)? layer.ln1.gamma));
            out.push((p("ln1.beta"), ParamKind::Norm, & $($mut_)? layer.ln1.beta));
            out.push((p("attn.W_Q"), ParamKind::Matrix, & $($mut_)? layer.w_q));
            out.push((p("attn.W_K"), ParamKind::Matrix, & $($mut_)? layer.w_k));
            out.push((p("attn.W_V"), ParamKind::Matrix, & $($mut_)? layer.w_v));
            out.push((p("attn.W_O"), ParamKind::Matrix, & $($mut_)? layer.w_o));
            out.push((p("attn.b_O"), ParamKind::Bias, & $($mut_)? layer.b_o));
            out.push((p("ln2.gamma"), ParamKind::Norm, & $($mut_)? layer.ln2.gamma));
            out.push((p("ln2.beta"), ParamKind::Norm, & $($mut_)? layer.ln2.beta));
            out.push((p("mlp.W_in"), ParamKind::Matrix, & $($mut_)? layer.w_in));
            out.push((p("mlp.b_in"), ParamKind::Bias, & $($mut_)? layer.b_in));
            out.push((p("mlp.W_out"), ParamKind::Matrix, & $($mut_)? layer.w_out));
            out.push((p("mlp.b_out"), ParamKind::Bias, & $($mut_)? layer.b_out));
        }
        out.push(("ln_final.gamma".to_string(), ParamKind::Norm, & $($mut_)? $self.ln_final.gamma));
        out.push(("ln_final.beta".to_string(), ParamKind::Norm, & $($mut_)? $self.ln_final.beta));
        out
    }};
}

impl<T: Scalar> Parameters<T> {
    /// Every tensor zero, layer norms included. Used as a gradient buffer.
    pub fn zeros(config: &ModelConfig) -> Self {
        let (d, h, dh, dm) = (
            config.d_model,
            config.n_head,
            config.d_head(),
            config.d_mlp(),
        );
        let zero_ln = || LayerNormParams {
            gamma: Tensor::zeros([d]),
            beta: Tensor::zeros([d]),
        };
        Self {
            config: config.clone(),
            token_embedding: Tensor::zeros([config.vocab_size, d]),
            positional_embedding: Tensor::zeros([config.n_ctx, d]),
            layers: (0..config.n_layer)
                .map(|_| LayerParams {
                    ln1: zero_ln(),
                    w_q: Tensor::zeros([h, d, dh]),
                    w_k: Tensor::zeros([h, d, dh]),
                    w_v: Tensor::zeros([h, d, dh]),
                    w_o: Tensor::zeros([h, dh, d]),
                    b_o: Tensor::zeros([d]),
                    ln2: zero_ln(),
                    w_in: Tensor::zeros([d, dm]),
                    b_in: Tensor::zeros([dm]),
                    w_out: Tensor::zeros([dm, d]),
                    b_out: Tensor::zeros([d]),
                })
                .collect(),
            ln_final: zero_ln(),
        }
    }

    /// GPT-2 style initialization.
    ///
    /// Weights are `N(0, 0.02)`, positional embeddings `N(0, 0.01)`, biases
    /// zero, layer norms identity, and every residual writer (`W_O`,
    /// `W_out`) is further scaled by `1/√N` with `N = config.residual_layers()`.
    pub fn init(config: &ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = SeededRng::new(seed);
        let mut p = Self::zeros(config);
        let resid_scale = 1.0 / (config.residual_layers() as f64).sqrt();
        let mut fill = |t: &mut Tensor<T>, std: f64| {
            for x in t.data_mut() {
                *x = T::of(rng.normal(0.0, std));
            }
        };
        fill(&mut p.token_embedding, WEIGHT_STD);
        fill(&mut p.positional_embedding, POS_STD);
        for layer in &mut p.layers {
            fill(&mut layer.w_q, WEIGHT_STD);
            fill(&mut layer.w_k, WEIGHT_STD);
            fill(&mut layer.w_v, WEIGHT_STD);
            fill(&mut layer.w_o, WEIGHT_STD * resid_scale);
            fill(&mut layer.w_in, WEIGHT_STD);
            fill(&mut layer.w_out, WEIGHT_STD * resid_scale);
            layer.ln1 = LayerNormParams::identity(config.d_model);
            layer.ln2 = LayerNormParams::identity(config.d_model);
        }
        p.ln_final = LayerNormParams::identity(config.d_model);
        Ok(p)
    }

    pub fn tensors(&self) -> Vec<(String, ParamKind, &Tensor<T>)> {
        visit_tensors!(self, iter,)
    }

    pub fn tensors_mut(&mut self) -> Vec<(String, ParamKind, &mut Tensor<T>)> {
        visit_tensors!(self, iter_mut, mut)
    }

    pub fn num_parameters(&self) -> usize {
        self.tensors().iter().map(|(_, _, t)| t.len()).sum()
    }

    /// Column `j` of the tied unembedding `W_U = W_Eᵀ`.
    pub fn unembed_column(&self, token: usize) -> &[T] {
        self.token_embedding.row(token)
    }

    pub fn cast<U: Scalar>(&self) -> Parameters<U> {
        let ln = |l: &LayerNormParams<T>| LayerNormParams {
            gamma: l.gamma.cast(),
            beta: l.beta.cast(),
        };
        Parameters {
            config: self.config.clone(),
            token_embedding: self.token_embedding.cast(),
            positional_embedding: self.positional_embedding.cast(),
            layers: self
                .layers
                .iter()
                .map(|l| LayerParams {
                    ln1: ln(&l.ln1),
                    w_q: l.w_q.cast(),
                    w_k: l.w_k.cast(),
                    w_v: l.w_v.cast(),
                    w_o: l.w_o.cast(),
                    b_o: l.b_o.cast(),
                    ln2: ln(&l.ln2),
                    w_in: l.w_in.cast(),
                    b_in: l.b_in.cast(),
                    w_out: l.w_out.cast(),
                    b_out: l.b_out.cast(),
                })
                .collect(),
            ln_final: ln(&self.ln_final),
        }
    }

    /// `self += scale · other`, tensor by tensor.
    pub fn add_scaled(&mut self, other: &Self, scale: T) {
        let theirs = other.tensors();
        for ((_, _, mine), (_, _, t)) in self.tensors_mut().into_iter().zip(theirs) {
            for (a, &b) in mine.data_mut().iter_mut().zip(t.data()) {
                *a += scale * b;
            }
        }
    }

    pub fn scale_in_place(&mut self, scale: T) {
        for (_, _, t) in self.tensors_mut() {
            t.data_mut().iter_mut().for_each(|x| *x *= scale);
        }
    }

    /// Global L2 norm over every tensor.
    pub fn global_norm(&self) -> f64 {
        self.tensors()
            .iter()
            .flat_map(|(_, _, t)| t.data().iter())
            .map(|x| x.as_f64() * x.as_f64())
            .sum::<f64>()
            .sqrt()
    }

    pub fn is_finite(&self) -> bool {
        self.tensors()
            .iter()
            .all(|(_, _, t)| t.data().iter().all(|x| x.is_finite()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample_std(xs: &[f32]) -> f64 {
        let n = xs.len() as f64;
        let mean = xs.iter().map(|&x| x as f64).sum::<f64>() / n;
        (xs.iter().map(|&x| (x as f64 - mean).powi(2)).sum::<f64>() / n).sqrt()
    }

    #[test]
    fn init_statistics() {
        let mut cfg = ModelConfig::desk(2000);
        cfg.n_ctx = 1600;
        let p = Parameters::<f32>::init(&cfg, 1).unwrap();
        assert!(p.token_embedding.len() >= 100_000);
        assert!((sample_std(p.token_embedding.data()) / 0.02 - 1.0).abs() < 0.05);
        assert!(p.positional_embedding.len() >= 100_000);
        assert!((sample_std(p.positional_embedding.data()) / 0.01 - 1.0).abs() < 0.05);
        let w_out: Vec<f32> = p.layers.iter().flat_map(|l| l.w_out.data().to_vec()).collect();
        let want = 0.02 / (8.0f64).sqrt();
        assert!((sample_std(&w_out) / want - 1.0).abs() < 0.05);
        for (name, kind, t) in p.tensors() {
            if kind == ParamKind::Bias {
                assert!(t.data().iter().all(|&x| x == 0.0), "{name}");
            }
        }
        assert!(p.layers.iter().all(|l| l.ln1.gamma.data().iter().all(|&g| g == 1.0)));
    }

    #[test]
    fn init_is_seed_deterministic() {
        let cfg = ModelConfig::desk(30);
        let a = Parameters::<f32>::init(&cfg, 9).unwrap();
        assert_eq!(a, Parameters::<f32>::init(&cfg, 9).unwrap());
        assert_ne!(a, Parameters::<f32>::init(&cfg, 10).unwrap());
    }

    #[test]
    fn tied_unembedding_reads_embedding_storage() {
        let cfg = ModelConfig::desk(30);
        let mut p = Parameters::<f32>::init(&cfg, 2).unwrap();
        p.token_embedding.row_mut(7)[3] = 1.25;
        assert_eq!(p.unembed_column(7)[3], 1.25);
    }

    #[test]
    fn counted_parameters_match_allocated() {
        let cfg = ModelConfig::desk(37);
        let p = Parameters::<f32>::zeros(&cfg);
        assert_eq!(p.num_parameters(), cfg.parameter_count());
    }
}
