// SPDX-License-Identifier: MIT OR Apache-2.0

mod common;

use common::{random_params, random_tokens};
use mipc_core::interp::{direct_logit_attribution, run_patch_experiment, PatchMode, SiteFamily};
use mipc_core::ioi::IoiTask;
use mipc_core::numerics::{SeededRng, Tensor};
use mipc_core::tokenizer::{build_permutation_map, permute_model, unpermute_logits, PermutationMap};
use mipc_core::transformer::{ModelConfig, Parameters};

fn argmax(row: &[f64]) -> usize {
    row.iter()
        .enumerate()
        .fold(0, |b, (i, &x)| if x > row[b] { i } else { b })
}

#[test]
fn permuted_model_on_permuted_prompts_matches_the_original() {
    let cfg = ModelConfig {
        n_ctx: 24,
        ..common::tiny(57)
    };
    let base: Parameters<f64> = random_params(&cfg, 11, 0.4);
    let map = build_permutation_map(1234, cfg.vocab_size).unwrap();
    let moved = permute_model(&base, &map).unwrap();
    let mut rng = SeededRng::new(5);
    for _ in 0..100 {
        let n = 1 + rng.next_below(cfg.n_ctx as u64) as usize;
        let tokens = random_tokens(&mut rng, n, cfg.vocab_size);
        let permuted: Vec<usize> = tokens.iter().map(|&t| map.apply(t)).collect();
        let a = base.forward(&tokens, false).unwrap().logits;
        let raw = moved.forward(&permuted, false).unwrap().logits;
        let b = unpermute_logits(&raw, &map).unwrap();
        assert!(a.max_abs_diff(&b) < 1e-6);
        for p in 0..n {
            assert_eq!(map.apply(argmax(a.row(p))), argmax(raw.row(p)));
        }
    }
}

#[test]
fn identity_permutation_changes_nothing() {
    let cfg = common::tiny(13);
    let base: Parameters<f32> = random_params(&cfg, 2, 0.2);
    assert_eq!(permute_model(&base, &PermutationMap::identity(13)).unwrap(), base);
    let logits = Tensor::<f32>::filled(vec![3, 13], 0.5);
    assert_eq!(unpermute_logits(&logits, &PermutationMap::identity(13)).unwrap(), logits);
}

#[test]
fn mismatched_sizes_are_rejected() {
    let cfg = common::tiny(13);
    let base: Parameters<f32> = random_params(&cfg, 2, 0.2);
    let map = build_permutation_map(1, 12).unwrap();
    assert!(permute_model(&base, &map).is_err());
    assert!(unpermute_logits(&Tensor::<f32>::zeros(vec![2, 13]), &map).is_err());
}

#[test]
fn analyses_transport_across_the_permutation() {
    let plain = IoiTask::standard(None).unwrap();
    let map = build_permutation_map(77, plain.vocab_size()).unwrap();
    let hidden = IoiTask::standard(Some(map.clone())).unwrap();
    let cfg = ModelConfig {
        n_layer: 2,
        n_head: 2,
        d_model: 16,
        n_ctx: 16,
        ..ModelConfig::desk(plain.vocab_size())
    };
    let base: Parameters<f64> = random_params(&cfg, 9, 0.3);
    let moved = permute_model(&base, &map).unwrap();
    let ex_a = plain.default_eval_set().unwrap().examples;
    let ex_b = hidden.default_eval_set().unwrap().examples;
    for (a, b) in ex_a.iter().zip(&ex_b) {
        assert_eq!(b.io_token, map.apply(a.io_token));
        let mapped: Vec<usize> = a.clean_tokens.iter().map(|&t| map.apply(t)).collect();
        assert_eq!(mapped, b.clean_tokens);
    }

    let da = direct_logit_attribution(&base, &ex_a).unwrap();
    let db = direct_logit_attribution(&moved, &ex_b).unwrap();
    let close = |x: f64, y: f64| (x - y).abs() < 1e-5;
    assert!(close(da.mean.total, db.mean.total));
    assert!(close(da.mean.embed, db.mean.embed));
    for l in 0..cfg.n_layer {
        assert!(close(da.mean.attn[l], db.mean.attn[l]));
        assert!(close(da.mean.mlp[l], db.mean.mlp[l]));
        for h in 0..cfg.n_head {
            assert!(close(da.mean.heads[l][h], db.mean.heads[l][h]));
        }
    }

    for family in SiteFamily::ALL {
        let ga = run_patch_experiment(&base, &ex_a, family, PatchMode::Denoise).unwrap();
        let gb = run_patch_experiment(&moved, &ex_b, family, PatchMode::Denoise).unwrap();
        for (x, y) in ga.recovery.iter().zip(&gb.recovery) {
            assert!(close(*x, *y), "{family:?}: {x} vs {y}");
        }
    }
}
