// SPDX-License-Identifier: MIT OR Apache-2.0

use std::fs;
use std::path::{Path, PathBuf};
use std::process::Command;

use mipc_cli::commands::{cmd_analyze, cmd_gen_data, cmd_train, expected_files, Layout, ANALYZE_MANIFEST, TRAIN_MANIFEST};
use mipc_cli::config::Provenance;
use mipc_cli::export::read_csv;
use mipc_cli::manifest::{sha256_file, RunManifest};
use mipc_cli::ExperimentConfig;

const SMALL: &str = r#"
out_dir = "out"
experiments = ["attribute", "patch:resid_pre:denoise", "patch:head_z:noise", "patch:mlp_out:denoise"]

[model]
n_layer = 2
n_head = 2
d_model = 16
n_ctx = 24

[train]
total_steps = 12
batch_size = 4
eval_every = 6
lr_max = 3e-3

[dataset]
corpus_size = 120
validation_size = 8
held_out_size = 10

[[runs]]
name = "base"

[[runs]]
name = "retrained"
obfuscation = { seed = 99 }

[[runs]]
name = "permuted"
obfuscation = { weight-permute = { from = "base", seed = 99 } }
"#;

fn write_config(dir: &Path, text: &str) -> PathBuf {
    let p = dir.join("exp.toml");
    fs::write(&p, text).unwrap();
    p
}

fn mipc(args: &[&str]) -> std::process::Output {
    Command::new(env!("CARGO_BIN_EXE_mipc")).args(args).output().unwrap()
}

#[test]
fn train_is_deterministic_and_tags_provenance() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = ExperimentConfig::load(write_config(dir.path(), SMALL)).unwrap();
    let first = cmd_train(&cfg, true).unwrap();
    let digests: Vec<String> = first.iter().map(|r| sha256_file(&r.checkpoint).unwrap()).collect();
    let again = cmd_train(&cfg, true).unwrap();
    for (r, d) in again.iter().zip(&digests) {
        assert_eq!(&sha256_file(&r.checkpoint).unwrap(), d, "{}", r.name);
    }
    let tags: Vec<Provenance> = first
        .iter()
        .map(|r| RunManifest::read(&r.manifest).unwrap().provenance.unwrap())
        .collect();
    assert_eq!(
        tags,
        vec![Provenance::Base, Provenance::RetrainedObfuscated, Provenance::WeightPermuted]
    );
    let layout = Layout::new(&cfg.out_dir);
    for r in &first {
        let m = RunManifest::read(layout.run_dir(&r.name).join(TRAIN_MANIFEST)).unwrap();
        m.verify(&layout.run_dir(&r.name)).unwrap();
        assert!(m.files.iter().any(|f| f.path == "model.ckpt"));
        assert_eq!(m.config_sha256.len(), 64);
    }
    // The derived model scores exactly like its source.
    assert_eq!(first[0].held_out, first[2].held_out);
    assert!(layout.perm_cache(99).is_file());
}

#[test]
fn analyze_emits_every_grid_and_permuted_outputs_match_the_base() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = ExperimentConfig::load(write_config(dir.path(), SMALL)).unwrap();
    cmd_train(&cfg, true).unwrap();
    let runs = cmd_analyze(&cfg, false).unwrap();
    let layout = Layout::new(&cfg.out_dir);
    let prompt_len = 15;

    let resid = read_csv(layout.analysis_dir("base").join("patch_resid_pre_denoise.csv")).unwrap();
    assert_eq!((resid.rows(), resid.cols()), (2, prompt_len));
    assert_eq!(resid.col_labels[0], "0:<bos>");
    let heads = read_csv(layout.analysis_dir("base").join("patch_head_z_noise.csv")).unwrap();
    assert_eq!((heads.rows(), heads.cols()), (2, 2));
    assert_eq!(heads.row_labels, vec!["0", "1"]);
    let attr = read_csv(layout.analysis_dir("base").join("attr_heads.csv")).unwrap();
    assert_eq!((attr.rows(), attr.cols()), (2, 2));

    let inventory = expected_files(&cfg.experiments);
    for run in ["base", "permuted", "retrained"] {
        let d = layout.analysis_dir(run);
        let mut actual: Vec<String> = fs::read_dir(&d)
            .unwrap()
            .map(|e| e.unwrap().file_name().to_string_lossy().into_owned())
            .filter(|n| n != ANALYZE_MANIFEST)
            .collect();
        actual.sort();
        assert_eq!(actual, inventory.iter().cloned().collect::<Vec<_>>());
        RunManifest::read(d.join(ANALYZE_MANIFEST)).unwrap().verify(&d).unwrap();
    }
    for name in &inventory {
        let a = fs::read(layout.analysis_dir("base").join(name)).unwrap();
        let b = fs::read(layout.analysis_dir("permuted").join(name)).unwrap();
        assert!(a == b, "{name} differs between base and weight-permuted runs");
    }
    assert_eq!(runs[0].grids, runs[2].grids);
    assert!(layout.compare_dir().join("diffuseness.csv").is_file());
    assert!(layout.compare_dir().join("patch_resid_pre_denoise.svg").is_file());

    // 64-bit analysis of the same checkpoints agrees closely.
    let wide = cmd_analyze(&cfg, true).unwrap();
    for (stem, g) in &runs[0].grids {
        for (x, y) in g.values.iter().zip(&wide[0].grids[stem].values) {
            assert!((x - y).abs() < 1e-3, "{stem}");
        }
    }
}

#[test]
fn analyze_rejects_a_checkpoint_from_another_config() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = ExperimentConfig::load(write_config(dir.path(), SMALL)).unwrap();
    cmd_train(&cfg, true).unwrap();
    let wider = SMALL.replace("d_model = 16", "d_model = 8");
    let cfg2 = ExperimentConfig::load(write_config(dir.path(), &wider)).unwrap();
    let err = cmd_analyze(&cfg2, false).unwrap_err();
    assert_eq!(err.exit_code(), 3);
    assert!(err.to_string().contains("does not match"), "{err}");
}

#[test]
fn gen_data_writes_a_pinnable_vocabulary() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = ExperimentConfig::load(write_config(dir.path(), SMALL)).unwrap();
    let files = cmd_gen_data(&cfg).unwrap();
    let data = cfg.out_dir.join("data");
    for f in ["vocab.txt", "plain/corpus.jsonl", "perm-99/eval.jsonl", "perm-99/held_out.jsonl"] {
        assert!(files.contains(&data.join(f)), "{f}");
    }
    let corpus = fs::read_to_string(data.join("plain/corpus.jsonl")).unwrap();
    assert_eq!(corpus.lines().count(), 120);

    let pinned = SMALL.replace("[dataset]", &format!("[dataset]\nvocab_file = {:?}", data.join("vocab.txt")));
    ExperimentConfig::load(write_config(dir.path(), &pinned)).unwrap();
    fs::write(data.join("other.txt"), "a\nb\n").unwrap();
    let wrong = SMALL.replace("[dataset]", &format!("[dataset]\nvocab_file = {:?}", data.join("other.txt")));
    let err = ExperimentConfig::load(write_config(dir.path(), &wrong)).unwrap_err();
    assert!(err.to_string().contains("other.txt"), "{err}");
}

#[test]
fn exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(mipc(&[]).status.code(), Some(1));
    assert_eq!(mipc(&["frobnicate"]).status.code(), Some(1));
    assert_eq!(mipc(&["--help"]).status.code(), Some(0));
    assert_eq!(mipc(&["train"]).status.code(), Some(1));

    let missing = SMALL.replace("[dataset]", "[dataset]\nvocab_file = \"nowhere/vocab.txt\"");
    let p = write_config(dir.path(), &missing);
    let out = mipc(&["train", "--config", p.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("nowhere/vocab.txt"));

    let typo = SMALL.replace("lr_max", "lr_mux");
    let p = write_config(dir.path(), &typo);
    let out = mipc(&["analyze", "--config", p.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("lr_mux"));

    let p = write_config(dir.path(), SMALL);
    let out = mipc(&["analyze", "--config", p.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(3));
}

#[test]
fn binary_end_to_end() {
    let dir = tempfile::tempdir().unwrap();
    let p = write_config(dir.path(), &SMALL.replace("total_steps = 12", "total_steps = 4"));
    let cfg = p.to_str().unwrap();
    let out_dir = dir.path().join("elsewhere");
    let out = out_dir.to_str().unwrap();
    let ok = |args: &[&str]| {
        let o = mipc(args);
        assert!(o.status.success(), "{args:?}: {}", String::from_utf8_lossy(&o.stderr));
        String::from_utf8(o.stdout).unwrap()
    };
    let stdout = ok(&["train", "--config", cfg, "--out", out, "--seed", "5", "-q"]);
    assert!(stdout.contains("retrained-obfuscated"));
    let ck = out_dir.join("runs/base/model.ckpt");
    let info = ok(&["inspect-checkpoint", ck.to_str().unwrap()]);
    let v: serde_json::Value = serde_json::from_str(&info).unwrap();
    assert_eq!(v["step"], 4);
    assert_eq!(v["train"]["seed"], 5);

    let stdout = ok(&["analyze", "--config", cfg, "--out", out]);
    assert!(stdout.contains("diffuseness patch_resid_pre_denoise"));

    let stdout = ok(&["eval-mcq", "--config", cfg, "--out", out, "--checkpoint", ck.to_str().unwrap(), "--run", "base"]);
    assert!(stdout.starts_with("accuracy"), "{stdout}");
    assert!(out_dir.join("mcq.json").is_file());

    let perm_dir = dir.path().join("perms");
    let built = ok(&["perm", "build", "--seed", "7", "--size", "10", "--out", perm_dir.to_str().unwrap()]);
    assert!(built.contains("\"size\": 10"));
    let shown = ok(&["perm", "inspect", perm_dir.join("perm-7.json").to_str().unwrap()]);
    assert_eq!(built, shown);
    let bad = mipc(&["perm", "inspect", dir.path().join("nope.json").to_str().unwrap()]);
    assert_eq!(bad.status.code(), Some(3));
}

#[test]
fn shipped_config_is_valid() {
    let path = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/desk.toml");
    let cfg = ExperimentConfig::load(&path).unwrap();
    assert_eq!(cfg.runs.len(), 3);
    assert_eq!(cfg.train.total_steps, 3000);
    assert!(cfg.out_dir.ends_with("runs/desk"));
}
