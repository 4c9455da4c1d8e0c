// SPDX-License-Identifier: MIT OR Apache-2.0

mod common;

use common::{random_params, random_tokens};
use mipc_core::numerics::SeededRng;
use mipc_core::trainer::{
    accumulated_gradients, evaluate_mcq, loss_and_grads, mean_loss, train, Checkpoint,
    McqItem, TrainConfig, TrainEvent,
};
use mipc_core::transformer::{ModelConfig, Parameters};

fn grad_check_config() -> ModelConfig {
    ModelConfig {
        n_layer: 1,
        n_head: 2,
        d_model: 8,
        n_ctx: 8,
        vocab_size: 11,
        ..ModelConfig::desk(11)
    }
}

#[test]
fn analytic_gradients_match_finite_differences() {
    let cfg = grad_check_config();
    let params: Parameters<f64> = random_params(&cfg, 21, 0.4);
    let mut rng = SeededRng::new(1);
    let batch: Vec<Vec<usize>> = [8, 5, 3]
        .iter()
        .map(|&n| random_tokens(&mut rng, n, cfg.vocab_size))
        .collect();
    let (_, grads) = loss_and_grads(&params, &batch).unwrap();
    let h = 1e-5;
    let analytic = grads.tensors();
    let mut probe = params.clone();
    let names: Vec<String> = params.tensors().into_iter().map(|(n, _, _)| n).collect();
    for (k, name) in names.iter().enumerate() {
        let len = analytic[k].2.len();
        let mut numeric = vec![0.0; len];
        for (i, slot) in numeric.iter_mut().enumerate() {
            let bump = |p: &mut Parameters<f64>, delta: f64| {
                p.tensors_mut()[k].2.data_mut()[i] += delta;
            };
            bump(&mut probe, h);
            let up = mean_loss(&probe, &batch).unwrap();
            bump(&mut probe, -2.0 * h);
            let down = mean_loss(&probe, &batch).unwrap();
            bump(&mut probe, h);
            *slot = (up - down) / (2.0 * h);
        }
        let a = analytic[k].2.data();
        let diff: f64 = a.iter().zip(&numeric).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
        let scale = a
            .iter()
            .map(|x| x * x)
            .sum::<f64>()
            .sqrt()
            .max(numeric.iter().map(|x| x * x).sum::<f64>().sqrt());
        assert!(scale > 0.0, "{name} has a zero gradient");
        assert!(diff / scale < 1e-4, "{name}: relative error {:e}", diff / scale);
    }
}

#[test]
fn zero_model_has_uniform_loss() {
    let cfg = grad_check_config();
    let mut p: Parameters<f64> = Parameters::zeros(&cfg);
    for ln in p.layers.iter_mut().flat_map(|l| [&mut l.ln1, &mut l.ln2]) {
        ln.gamma.data_mut().fill(1.0);
    }
    let batch = vec![vec![1, 2, 3, 4], vec![10, 0, 5]];
    let (loss, _) = loss_and_grads(&p, &batch).unwrap();
    assert!((loss - (cfg.vocab_size as f64).ln()).abs() < 1e-12);
}

#[test]
fn duplicating_the_batch_keeps_the_mean() {
    let cfg = grad_check_config();
    let p: Parameters<f64> = random_params(&cfg, 3, 0.3);
    let batch = vec![vec![1, 2, 3, 4, 5], vec![6, 7, 8]];
    let twice: Vec<Vec<usize>> = batch.iter().chain(&batch).cloned().collect();
    let (a, ga) = loss_and_grads(&p, &batch).unwrap();
    let (b, gb) = loss_and_grads(&p, &twice).unwrap();
    assert!((a - b).abs() < 1e-12);
    let mut diff = ga.clone();
    diff.add_scaled(&gb, -1.0);
    assert!(diff.global_norm() < 1e-12);
}

#[test]
fn empty_batches_are_rejected() {
    let cfg = grad_check_config();
    let p: Parameters<f64> = Parameters::init(&cfg, 0).unwrap();
    assert!(loss_and_grads(&p, &[]).is_err());
    assert!(loss_and_grads(&p, &[vec![3]]).is_err());
}

#[test]
fn sharded_accumulation_matches_one_large_batch() {
    let cfg = grad_check_config();
    let p: Parameters<f64> = random_params(&cfg, 4, 0.3);
    let mut rng = SeededRng::new(2);
    let seqs: Vec<Vec<usize>> = (0..32)
        .map(|_| {
            let n = 2 + rng.next_below(7) as usize;
            random_tokens(&mut rng, n, cfg.vocab_size)
        })
        .collect();
    let shards: Vec<Vec<Vec<usize>>> = seqs.chunks(8).map(|c| c.to_vec()).collect();
    let (l4, g4) = accumulated_gradients(&p, &shards).unwrap();
    let (l1, g1) = loss_and_grads(&p, &seqs).unwrap();
    assert!((l4 - l1).abs() < 1e-6);
    for ((name, _, a), (_, _, b)) in g4.tensors().iter().zip(g1.tensors()) {
        for (x, y) in a.data().iter().zip(b.data()) {
            assert!((x - y).abs() < 1e-6, "{name}");
        }
    }
}

fn toy_corpus(n: usize, vocab: usize, seed: u64) -> Vec<Vec<usize>> {
    // Each sequence counts upward from a random start, so a model can learn it.
    let mut rng = SeededRng::new(seed);
    (0..n)
        .map(|_| {
            let start = rng.next_below(vocab as u64) as usize;
            (0..8).map(|i| (start + i) % vocab).collect()
        })
        .collect()
}

fn toy_run(seed: u64) -> Checkpoint {
    let cfg = grad_check_config();
    let tc = TrainConfig {
        total_steps: 30,
        batch_size: 4,
        eval_every: 10,
        lr_max: 3e-3,
        seed,
        ..TrainConfig::default()
    };
    let corpus = toy_corpus(40, cfg.vocab_size, 1);
    let val = toy_corpus(10, cfg.vocab_size, 2);
    let start = Checkpoint::fresh(Parameters::init(&cfg, seed).unwrap());
    train(start, &corpus, &val, &tc, |_| Ok(())).unwrap()
}

#[test]
fn identical_seeds_give_identical_checkpoints() {
    let a = toy_run(7);
    let b = toy_run(7);
    assert_eq!(a, b);
    let bits = |c: &Checkpoint| -> Vec<u32> {
        c.params
            .tensors()
            .iter()
            .flat_map(|(_, _, t)| t.data().iter().map(|x| x.to_bits()))
            .collect()
    };
    assert_eq!(bits(&a), bits(&b));
    assert_ne!(bits(&a), bits(&toy_run(8)));
}

#[test]
fn training_reduces_validation_loss_and_reports_progress() {
    let cfg = grad_check_config();
    let tc = TrainConfig {
        total_steps: 200,
        batch_size: 4,
        eval_every: 50,
        lr_max: 1e-2,
        ..TrainConfig::default()
    };
    let corpus = toy_corpus(64, cfg.vocab_size, 1);
    let val = toy_corpus(16, cfg.vocab_size, 2);
    let mut steps = 0;
    let mut snapshots = Vec::new();
    let start = Checkpoint::fresh(Parameters::init(&cfg, 0).unwrap());
    let done = train(start, &corpus, &val, &tc, |e| {
        match e {
            TrainEvent::Step { .. } => steps += 1,
            TrainEvent::Checkpoint(c) => snapshots.push(c.step),
            TrainEvent::Validation(_) => {}
        }
        Ok(())
    })
    .unwrap();
    assert_eq!(steps, 200);
    assert_eq!(snapshots, vec![50, 100, 150, 200]);
    assert_eq!(done.optimizer.step, 200);
    let hist: Vec<usize> = done.val_history.iter().map(|v| v.step).collect();
    assert_eq!(hist, vec![0, 50, 100, 150, 200]);
    let first = done.val_history[0].loss;
    let last = done.val_history.last().unwrap().loss;
    assert!(last < 0.5 * first, "{first} -> {last}");
}

#[test]
fn corpus_must_cover_one_batch() {
    let cfg = grad_check_config();
    let tc = TrainConfig {
        batch_size: 8,
        grad_accum_shards: 2,
        ..TrainConfig::default()
    };
    let start = Checkpoint::fresh(Parameters::init(&cfg, 0).unwrap());
    let corpus = toy_corpus(15, cfg.vocab_size, 1);
    assert!(train(start, &corpus, &[], &tc, |_| Ok(())).is_err());
}

#[test]
fn mcq_ties_break_to_the_lowest_index() {
    let cfg = grad_check_config();
    let p: Parameters<f64> = Parameters::zeros(&cfg);
    let items: Vec<McqItem> = (0..8)
        .map(|g| McqItem {
            context: vec![1, 2],
            completions: vec![vec![3, 4], vec![5, 6], vec![7, 8], vec![9, 10]],
            gold: g % 4,
        })
        .collect();
    let report = evaluate_mcq(&p, &items, false).unwrap();
    for row in &report.losses {
        assert!(row.iter().all(|&l| (l - row[0]).abs() < 1e-12));
        assert!((row[0] - 2.0 * (cfg.vocab_size as f64).ln()).abs() < 1e-12);
    }
    assert!(report.predictions.iter().all(|&p| p == 0));
    assert!((report.accuracy - 0.25).abs() < 1e-12);
    let normalized = evaluate_mcq(&p, &items, true).unwrap();
    assert!((normalized.losses[0][0] - (cfg.vocab_size as f64).ln()).abs() < 1e-12);
}

#[test]
fn mcq_on_a_random_model_is_near_chance() {
    let cfg = grad_check_config();
    let p: Parameters<f32> = Parameters::init(&cfg, 5).unwrap();
    let mut rng = SeededRng::new(77);
    let items: Vec<McqItem> = (0..1000)
        .map(|_| McqItem {
            context: random_tokens(&mut rng, 3, cfg.vocab_size),
            completions: (0..4).map(|_| random_tokens(&mut rng, 2, cfg.vocab_size)).collect(),
            gold: rng.next_below(4) as usize,
        })
        .collect();
    let report = evaluate_mcq(&p, &items, false).unwrap();
    assert!((0.15..=0.35).contains(&report.accuracy), "{}", report.accuracy);
}

#[test]
fn mcq_input_errors() {
    let cfg = grad_check_config();
    let p: Parameters<f32> = Parameters::init(&cfg, 5).unwrap();
    let one = McqItem {
        context: vec![1],
        completions: vec![vec![2]],
        gold: 0,
    };
    assert!(evaluate_mcq(&p, &[one], false).is_err());
    let empty = McqItem {
        context: vec![1],
        completions: vec![vec![2], vec![]],
        gold: 0,
    };
    assert!(evaluate_mcq(&p, &[empty], false).is_err());
}
