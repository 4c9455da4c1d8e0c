// SPDX-License-Identifier: MIT OR Apache-2.0

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use mipc_core::interp::{direct_logit_attribution, run_patch_experiment, AttributionReport, PatchGrid};
use mipc_core::ioi::{evaluate_ioi, IoiDataset, IoiScore, IoiTask};
use mipc_core::numerics::{Scalar, SeededRng};
use mipc_core::tokenizer::{build_permutation_map, load_cache, permute_model, save_cache, PermutationMap};
use mipc_core::trainer::{
    evaluate_mcq, load_checkpoint, load_checkpoint_expecting, save_checkpoint, train, AdamWState, Checkpoint,
    McqItem, McqReport, TrainEvent,
};
use mipc_core::transformer::Parameters;
use serde::{Deserialize, Serialize};

use crate::config::{Experiment, ExperimentConfig, Obfuscation, Provenance, RunSpec};
use crate::error::{CliError, CliResult};
use crate::export::{diffuseness, export_heatmap, render_heatmaps, write_csv, Matrix};
use crate::manifest::RunManifest;

pub const CHECKPOINT_FILE: &str = "model.ckpt";
pub const TRAIN_MANIFEST: &str = "manifest.train.json";
pub const ANALYZE_MANIFEST: &str = "manifest.analyze.json";

/// Where everything lives under the output directory.
#[derive(Debug, Clone)]
pub struct Layout {
    pub root: PathBuf,
}

impl Layout {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into() }
    }

    pub fn perm_cache(&self, seed: u64) -> PathBuf {
        self.root.join("perm").join(format!("perm-{seed}.json"))
    }

    pub fn run_dir(&self, run: &str) -> PathBuf {
        self.root.join("runs").join(run)
    }

    pub fn checkpoint(&self, run: &str) -> PathBuf {
        self.run_dir(run).join(CHECKPOINT_FILE)
    }

    pub fn analysis_dir(&self, run: &str) -> PathBuf {
        self.run_dir(run).join("analysis")
    }

    pub fn compare_dir(&self) -> PathBuf {
        self.root.join("compare")
    }
}

fn create_dir(path: &Path) -> CliResult<()> {
    fs::create_dir_all(path).map_err(|e| CliError::io(path, e))
}

fn write_json<S: Serialize>(path: &Path, value: &S) -> CliResult<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text).map_err(|e| CliError::io(path, e))
}

/// The permutation for `seed`, read from the cache when present and
/// written to it otherwise.
pub fn permutation(cfg: &ExperimentConfig, layout: &Layout, seed: u64) -> CliResult<PermutationMap> {
    let size = cfg.task(None)?.vocab_size();
    let path = layout.perm_cache(seed);
    if path.is_file() {
        let map = load_cache(&path)?;
        if map.seed != seed || map.size != size {
            return Err(CliError::Runtime(format!(
                "{}: cached permutation has seed {} and size {}, expected {seed} and {size}",
                path.display(),
                map.seed,
                map.size
            )));
        }
        return Ok(map);
    }
    let map = build_permutation_map(seed, size)?;
    create_dir(path.parent().expect("cache path has a parent"))?;
    save_cache(&map, &path)?;
    Ok(map)
}

fn run_task(cfg: &ExperimentConfig, layout: &Layout, run: &RunSpec) -> CliResult<(IoiTask, Option<PermutationMap>)> {
    let map = match run.obfuscation.seed() {
        Some(s) => Some(permutation(cfg, layout, s)?),
        None => None,
    };
    Ok((cfg.task(map.clone())?, map))
}

fn corpus(cfg: &ExperimentConfig, task: &IoiTask) -> CliResult<Vec<Vec<usize>>> {
    let d = &cfg.dataset;
    Ok(task.training_corpus(d.corpus_size, d.corpus_seed, d.filler_fraction)?)
}

fn validation(cfg: &ExperimentConfig, task: &IoiTask) -> CliResult<Vec<Vec<usize>>> {
    let d = &cfg.dataset;
    if d.validation_size == 0 {
        return Ok(Vec::new());
    }
    Ok(task.training_corpus(d.validation_size, d.validation_seed, d.filler_fraction)?)
}

fn held_out(cfg: &ExperimentConfig, task: &IoiTask, corpus: &[Vec<usize>]) -> CliResult<IoiDataset> {
    let d = &cfg.dataset;
    Ok(task.held_out_dataset(d.held_out_size, d.held_out_seed, corpus)?)
}

fn seeds(cfg: &ExperimentConfig, run: &RunSpec) -> BTreeMap<String, u64> {
    let d = &cfg.dataset;
    let mut s = BTreeMap::from([
        ("init".to_string(), cfg.model.init_seed),
        ("train".to_string(), cfg.train.seed),
        ("corpus".to_string(), d.corpus_seed),
        ("validation".to_string(), d.validation_seed),
        ("held_out".to_string(), d.held_out_seed),
        ("eval".to_string(), d.eval_seed),
    ]);
    if let Some(p) = run.obfuscation.seed() {
        s.insert("permutation".to_string(), p);
    }
    s
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainedRun {
    pub name: String,
    pub provenance: Provenance,
    pub checkpoint: PathBuf,
    pub manifest: PathBuf,
    /// Time spent in the training loop; zero for weight-permuted runs.
    pub train_seconds: f64,
    pub held_out: IoiScore,
}

#[derive(Serialize)]
struct StepLine {
    step: usize,
    lr: f64,
    loss: f64,
    grad_norm: f64,
}

/// Trains or derives every run, in order, writing checkpoints, logs,
/// held-out scores and one manifest per run.
pub fn cmd_train(cfg: &ExperimentConfig, quiet: bool) -> CliResult<Vec<TrainedRun>> {
    let layout = Layout::new(&cfg.out_dir);
    let mut out = Vec::new();
    for run in &cfg.runs {
        let started = Instant::now();
        let dir = layout.run_dir(&run.name);
        create_dir(&dir)?;
        let (task, map) = run_task(cfg, &layout, run)?;
        let ck_path = dir.join(CHECKPOINT_FILE);
        let mut files = vec![ck_path.clone()];
        let mut train_seconds = 0.0;
        let ck = match &run.obfuscation {
            Obfuscation::None | Obfuscation::Seed(_) => {
                let corpus = corpus(cfg, &task)?;
                let val = validation(cfg, &task)?;
                let params = Parameters::init(&cfg.model_config(&task), cfg.model.init_seed)?;
                let mut start = Checkpoint::fresh(params);
                start.obfuscation_seed = run.obfuscation.seed();
                let mut log = Vec::new();
                let t0 = Instant::now();
                let ck = train(start, &corpus, &val, &cfg.train, |e| {
                    match e {
                        TrainEvent::Step {
                            step,
                            lr,
                            loss,
                            grad_norm,
                        } => {
                            serde_json::to_writer(&mut log, &StepLine { step, lr, loss, grad_norm })
                                .expect("in-memory write");
                            log.push(b'\n');
                        }
                        TrainEvent::Validation(v) if !quiet => {
                            eprintln!("[{}] step {:>6}  val loss {:.4}", run.name, v.step, v.loss);
                        }
                        TrainEvent::Validation(_) => {}
                        TrainEvent::Checkpoint(ck) => save_checkpoint(&ck_path, ck)?,
                    }
                    Ok(())
                })?;
                train_seconds = t0.elapsed().as_secs_f64();
                let log_path = dir.join("train.jsonl");
                fs::write(&log_path, log).map_err(|e| CliError::io(&log_path, e))?;
                files.push(log_path);
                ck
            }
            Obfuscation::WeightPermute { from, .. } => {
                let source = if cfg.runs.iter().any(|r| &r.name == from) {
                    layout.checkpoint(from)
                } else {
                    PathBuf::from(from)
                };
                let base = load_checkpoint(&source)?;
                if let Some(s) = base.obfuscation_seed {
                    return Err(CliError::Runtime(format!(
                        "{}: source checkpoint is already obfuscated with seed {s}",
                        source.display()
                    )));
                }
                let map = map.as_ref().expect("weight-permute has a seed");
                let ck = Checkpoint {
                    params: permute_model(&base.params, map)?,
                    optimizer: AdamWState {
                        step: base.optimizer.step,
                        m: permute_model(&base.optimizer.m, map)?,
                        v: permute_model(&base.optimizer.v, map)?,
                    },
                    step: base.step,
                    val_history: base.val_history.clone(),
                    obfuscation_seed: Some(map.seed),
                    train_config: base.train_config.clone(),
                };
                if ck.params.config != cfg.model_config(&task) {
                    return Err(CliError::Runtime(format!(
                        "{}: model config differs from the experiment's",
                        source.display()
                    )));
                }
                ck
            }
        };
        save_checkpoint(&ck_path, &ck)?;

        let corpus = corpus(cfg, &task)?;
        let held = held_out(cfg, &task, &corpus)?;
        let score = evaluate_ioi(&ck.params, &held.examples)?;
        let score_path = dir.join("held_out.json");
        write_json(&score_path, &score)?;
        files.push(score_path);
        if !quiet {
            eprintln!(
                "[{}] held-out logit diff {:.3}, IO preferred on {:.1}% of {} prompts",
                run.name,
                score.mean_logit_diff,
                100.0 * score.io_preference,
                held.len()
            );
        }

        let mut manifest = RunManifest::new("train", cfg)?;
        manifest.run = Some(run.name.clone());
        manifest.provenance = Some(run.obfuscation.provenance());
        manifest.seeds = seeds(cfg, run);
        manifest.add_files(&dir, &files)?;
        manifest.wall_clock_seconds = started.elapsed().as_secs_f64();
        let manifest_path = dir.join(TRAIN_MANIFEST);
        manifest.write(&manifest_path)?;
        out.push(TrainedRun {
            name: run.name.clone(),
            provenance: run.obfuscation.provenance(),
            checkpoint: ck_path,
            manifest: manifest_path,
            train_seconds,
            held_out: score,
        });
    }
    Ok(out)
}

/// One analysis grid at full precision, with its axis labels.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridData {
    pub row_labels: Vec<String>,
    pub col_labels: Vec<String>,
    pub values: Vec<f64>,
}

impl GridData {
    fn matrix(&self) -> CliResult<Matrix> {
        Matrix::from_f64(self.row_labels.clone(), self.col_labels.clone(), &self.values)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnalyzedRun {
    pub name: String,
    pub provenance: Provenance,
    /// Keyed by file stem, such as `attr_heads` or `patch_resid_pre_denoise`.
    pub grids: BTreeMap<String, GridData>,
    pub clean: IoiScore,
    pub files: Vec<PathBuf>,
}

/// File stems each experiment produces. Every stem is written as CSV,
/// JSON and SVG.
pub fn grid_stems(experiment: Experiment) -> Vec<String> {
    match experiment {
        Experiment::Attribute => vec!["attr_layers".into(), "attr_accumulated".into(), "attr_heads".into()],
        Experiment::Patch(f, m) => vec![format!("patch_{f}_{m}")],
    }
}

/// Every file `analyze` must write for one run.
pub fn expected_files(experiments: &[Experiment]) -> BTreeSet<String> {
    let mut out = BTreeSet::from(["ioi_eval.json".to_string()]);
    for &e in experiments {
        if e == Experiment::Attribute {
            out.insert("attribution.json".into());
        }
        for stem in grid_stems(e) {
            for ext in ["csv", "json", "svg"] {
                out.insert(format!("{stem}.{ext}"));
            }
        }
    }
    out
}

fn layer_labels(n: usize) -> Vec<String> {
    (0..n).map(|l| l.to_string()).collect()
}

fn attribution_grids(r: &AttributionReport, n_layer: usize, n_head: usize) -> Vec<(String, GridData)> {
    let m = &r.mean;
    let layers = GridData {
        row_labels: layer_labels(n_layer),
        col_labels: vec!["attn".into(), "mlp".into()],
        values: (0..n_layer).flat_map(|l| [m.attn[l], m.mlp[l]]).collect(),
    };
    let accumulated = GridData {
        row_labels: std::iter::once("embed".to_string()).chain(layer_labels(n_layer)).collect(),
        col_labels: vec!["logit_diff".into()],
        values: m.accumulated.clone(),
    };
    let heads = GridData {
        row_labels: layer_labels(n_layer),
        col_labels: (0..n_head).map(|h| format!("H{h}")).collect(),
        values: m.heads.iter().flatten().copied().collect(),
    };
    vec![
        ("attr_layers".into(), layers),
        ("attr_accumulated".into(), accumulated),
        ("attr_heads".into(), heads),
    ]
}

#[derive(Serialize)]
struct PatchFile<'a> {
    #[serde(flatten)]
    grid: &'a GridData,
    raw: &'a [f64],
    clean_mean: f64,
    corrupted_mean: f64,
}

fn emit(
    dir: &Path,
    stem: &str,
    grid: &GridData,
    patch: Option<&PatchGrid>,
    grids: &mut BTreeMap<String, GridData>,
    files: &mut Vec<PathBuf>,
) -> CliResult<()> {
    let m = grid.matrix()?;
    let csv = dir.join(format!("{stem}.csv"));
    write_csv(&m, &csv)?;
    let json = dir.join(format!("{stem}.json"));
    match patch {
        Some(g) => write_json(
            &json,
            &PatchFile {
                grid,
                raw: &g.raw,
                clean_mean: g.clean_mean,
                corrupted_mean: g.corrupted_mean,
            },
        )?,
        None => write_json(&json, grid)?,
    }
    let svg = dir.join(format!("{stem}.svg"));
    export_heatmap(&m, &svg)?;
    files.extend([csv, json, svg]);
    grids.insert(stem.to_string(), grid.clone());
    Ok(())
}

fn analyze_params<T: Scalar>(
    params: &Parameters<T>,
    dataset: &IoiDataset,
    experiments: &[Experiment],
    dir: &Path,
) -> CliResult<(BTreeMap<String, GridData>, IoiScore, Vec<PathBuf>)> {
    let cfg = &params.config;
    let examples = &dataset.examples;
    let mut grids = BTreeMap::new();
    let mut files = Vec::new();
    let clean = evaluate_ioi(params, examples)?;
    let p = dir.join("ioi_eval.json");
    write_json(&p, &clean)?;
    files.push(p);

    for &e in experiments {
        match e {
            Experiment::Attribute => {
                let report = direct_logit_attribution(params, examples)?;
                let p = dir.join("attribution.json");
                write_json(&p, &report)?;
                for (stem, g) in attribution_grids(&report, cfg.n_layer, cfg.n_head) {
                    emit(dir, &stem, &g, None, &mut grids, &mut files)?;
                }
                files.push(p);
            }
            Experiment::Patch(family, mode) => {
                let g = run_patch_experiment(params, examples, family, mode)?;
                let col_labels = if g.cols == cfg.n_head && family == mipc_core::interp::SiteFamily::HeadZ {
                    (0..cfg.n_head).map(|h| format!("H{h}")).collect()
                } else {
                    dataset.position_labels()
                };
                let data = GridData {
                    row_labels: layer_labels(g.rows),
                    col_labels,
                    values: g.recovery.clone(),
                };
                emit(dir, &grid_stems(e)[0], &data, Some(&g), &mut grids, &mut files)?;
            }
        }
    }
    Ok((grids, clean, files))
}

/// Runs every configured experiment on every run's checkpoint, then writes
/// side-by-side comparisons with per-grid diffuseness.
pub fn cmd_analyze(cfg: &ExperimentConfig, use_f64: bool) -> CliResult<Vec<AnalyzedRun>> {
    let layout = Layout::new(&cfg.out_dir);
    let mut out = Vec::new();
    for run in &cfg.runs {
        let started = Instant::now();
        let (task, _) = run_task(cfg, &layout, run)?;
        let path = layout.checkpoint(&run.name);
        if !path.is_file() {
            return Err(CliError::Runtime(format!(
                "{}: no checkpoint for run {:?}; run `train` first",
                path.display(),
                run.name
            )));
        }
        let ck = load_checkpoint_expecting(&path, &cfg.model_config(&task)).map_err(|e| {
            CliError::Runtime(format!("run {:?} does not match the dataset: {e}", run.name))
        })?;
        if ck.obfuscation_seed != run.obfuscation.seed() {
            return Err(CliError::Runtime(format!(
                "{}: checkpoint permutation seed {:?} differs from the config's {:?}",
                path.display(),
                ck.obfuscation_seed,
                run.obfuscation.seed()
            )));
        }
        let dataset = task.generate_dataset(cfg.dataset.eval_size, cfg.dataset.eval_seed)?;
        let dir = layout.analysis_dir(&run.name);
        create_dir(&dir)?;
        let (grids, clean, files) = if use_f64 {
            analyze_params(&ck.params.cast::<f64>(), &dataset, &cfg.experiments, &dir)?
        } else {
            analyze_params(&ck.params, &dataset, &cfg.experiments, &dir)?
        };

        let written: BTreeSet<String> = files
            .iter()
            .map(|f| f.file_name().unwrap().to_string_lossy().into_owned())
            .collect();
        let expected = expected_files(&cfg.experiments);
        if written != expected {
            return Err(CliError::Runtime(format!(
                "run {:?}: wrote {written:?}, expected {expected:?}",
                run.name
            )));
        }

        let mut manifest = RunManifest::new("analyze", cfg)?;
        manifest.run = Some(run.name.clone());
        manifest.provenance = Some(run.obfuscation.provenance());
        manifest.seeds = seeds(cfg, run);
        manifest.add_files(&dir, &files)?;
        manifest.wall_clock_seconds = started.elapsed().as_secs_f64();
        manifest.write(dir.join(ANALYZE_MANIFEST))?;
        out.push(AnalyzedRun {
            name: run.name.clone(),
            provenance: run.obfuscation.provenance(),
            grids,
            clean,
            files,
        });
    }
    write_comparison(cfg, &layout, &out)?;
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Diffuseness {
    pub run: String,
    pub provenance: Provenance,
    /// Entropy of the normalized absolute cell mass, in nats.
    pub entropy: Option<f64>,
    /// Entropy over its maximum, in [0, 1].
    pub normalized: Option<f64>,
}

/// Per grid stem, the diffuseness of every run's grid.
pub fn comparison(runs: &[AnalyzedRun]) -> BTreeMap<String, Vec<Diffuseness>> {
    let mut out: BTreeMap<String, Vec<Diffuseness>> = BTreeMap::new();
    for r in runs {
        for (stem, g) in &r.grids {
            let d = diffuseness(&g.values);
            out.entry(stem.clone()).or_default().push(Diffuseness {
                run: r.name.clone(),
                provenance: r.provenance,
                entropy: d.map(|x| x.0),
                normalized: d.map(|x| x.1),
            });
        }
    }
    out
}

fn write_comparison(cfg: &ExperimentConfig, layout: &Layout, runs: &[AnalyzedRun]) -> CliResult<()> {
    let dir = layout.compare_dir();
    create_dir(&dir)?;
    let table = comparison(runs);
    let mut files = Vec::new();
    let p = dir.join("diffuseness.json");
    write_json(&p, &table)?;
    files.push(p);

    let mut csv = String::from("grid");
    for r in runs {
        csv.push_str(&format!(",{}", r.name));
    }
    csv.push('\n');
    for (stem, rows) in &table {
        csv.push_str(stem);
        for d in rows {
            match d.normalized {
                Some(v) => csv.push_str(&format!(",{v:.8e}")),
                None => csv.push(','),
            }
        }
        csv.push('\n');
    }
    let p = dir.join("diffuseness.csv");
    fs::write(&p, csv).map_err(|e| CliError::io(&p, e))?;
    files.push(p);

    for stem in table.keys() {
        let mats = runs
            .iter()
            .map(|r| Ok((format!("{} ({})", r.name, r.provenance), r.grids[stem].matrix()?)))
            .collect::<CliResult<Vec<_>>>()?;
        let panels: Vec<(&str, &Matrix)> = mats.iter().map(|(t, m)| (t.as_str(), m)).collect();
        let p = dir.join(format!("{stem}.svg"));
        fs::write(&p, render_heatmaps(&panels)?).map_err(|e| CliError::io(&p, e))?;
        files.push(p);
    }

    let mut manifest = RunManifest::new("analyze", cfg)?;
    manifest.add_files(&dir, &files)?;
    manifest.write(dir.join(ANALYZE_MANIFEST))
}

fn write_lines(path: &Path, seqs: &[Vec<usize>]) -> CliResult<()> {
    let mut buf = Vec::new();
    for s in seqs {
        serde_json::to_writer(&mut buf, s)?;
        buf.push(b'\n');
    }
    let mut f = fs::File::create(path).map_err(|e| CliError::io(path, e))?;
    f.write_all(&buf).map_err(|e| CliError::io(path, e))
}

/// Writes the vocabulary and, for each distinct token space among the runs,
/// the training, validation, held-out and evaluation data.
pub fn cmd_gen_data(cfg: &ExperimentConfig) -> CliResult<Vec<PathBuf>> {
    let layout = Layout::new(&cfg.out_dir);
    let dir = layout.root.join("data");
    create_dir(&dir)?;
    let vocab_path = dir.join("vocab.txt");
    cfg.task(None)?.vocab.write_file(&vocab_path)?;
    let mut files = vec![vocab_path];
    let spaces: BTreeSet<Option<u64>> = cfg.runs.iter().map(|r| r.obfuscation.seed()).collect();
    for seed in spaces {
        let (name, map) = match seed {
            None => ("plain".to_string(), None),
            Some(s) => (format!("perm-{s}"), Some(permutation(cfg, &layout, s)?)),
        };
        let sub = dir.join(name);
        create_dir(&sub)?;
        let task = cfg.task(map)?;
        let corpus = corpus(cfg, &task)?;
        for (file, seqs) in [("corpus.jsonl", &corpus), ("validation.jsonl", &validation(cfg, &task)?)] {
            let p = sub.join(file);
            write_lines(&p, seqs)?;
            files.push(p);
        }
        let p = sub.join("held_out.jsonl");
        held_out(cfg, &task, &corpus)?.write_jsonl(&p)?;
        files.push(p);
        let p = sub.join("eval.jsonl");
        task.generate_dataset(cfg.dataset.eval_size, cfg.dataset.eval_seed)?
            .write_jsonl(&p)?;
        files.push(p);
    }
    let mut manifest = RunManifest::new("gen-data", cfg)?;
    manifest.add_files(&dir, &files)?;
    manifest.write(dir.join("manifest.gen-data.json"))?;
    Ok(files)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PermSummary {
    pub path: PathBuf,
    pub seed: u64,
    pub size: usize,
    pub fixed_points: usize,
    /// The first few `original -> permuted` pairs.
    pub head: Vec<(usize, usize)>,
}

fn summarize(path: PathBuf, map: &PermutationMap) -> PermSummary {
    PermSummary {
        path,
        seed: map.seed,
        size: map.size,
        fixed_points: (0..map.size).filter(|&i| map.apply(i) == i).count(),
        head: (0..map.size.min(8)).map(|i| (i, map.apply(i))).collect(),
    }
}

pub fn cmd_perm_build(seed: u64, size: usize, out_dir: &Path) -> CliResult<PermSummary> {
    let map = build_permutation_map(seed, size)?;
    create_dir(out_dir)?;
    let path = out_dir.join(format!("perm-{seed}.json"));
    save_cache(&map, &path)?;
    Ok(summarize(path, &map))
}

pub fn cmd_perm_inspect(path: &Path) -> CliResult<PermSummary> {
    let map = load_cache(path)?;
    Ok(summarize(path.to_path_buf(), &map))
}

/// Four-way items from held-out prompts: the indirect object, the subject
/// and two other names, in a seeded order.
pub fn ioi_mcq_items(task: &IoiTask, dataset: &IoiDataset, seed: u64) -> CliResult<Vec<McqItem>> {
    let mut rng = SeededRng::new(seed);
    let names = &task.pools.names;
    if names.len() < 4 {
        return Err(CliError::Runtime("four-way items need at least 4 names".into()));
    }
    dataset
        .examples
        .iter()
        .map(|e| {
            let mut choices = vec![e.io_token, e.s_token];
            while choices.len() < 4 {
                let name = &names[rng.next_below(names.len() as u64) as usize];
                let id = task.encode(std::slice::from_ref(name))?[0];
                if !choices.contains(&id) {
                    choices.push(id);
                }
            }
            let order = mipc_core::numerics::seeded_permutation(rng.next_u64(), 4)?;
            let completions: Vec<Vec<usize>> = order.iter().map(|&i| vec![choices[i]]).collect();
            let gold = order.iter().position(|&i| i == 0).expect("0 is in the order");
            Ok(McqItem {
                context: e.clean_tokens.clone(),
                completions,
                gold,
            })
        })
        .collect()
}

pub fn read_mcq_items(path: &Path) -> CliResult<Vec<McqItem>> {
    let text = fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str(l).map_err(|e| CliError::Runtime(format!("{}:{}: {e}", path.display(), i + 1)))
        })
        .collect()
}

pub fn cmd_eval_mcq(checkpoint: &Path, items: &[McqItem], normalize: bool, use_f64: bool) -> CliResult<McqReport> {
    let ck = load_checkpoint(checkpoint)?;
    if use_f64 {
        Ok(evaluate_mcq(&ck.params.cast::<f64>(), items, normalize)?)
    } else {
        Ok(evaluate_mcq(&ck.params, items, normalize)?)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorSummary {
    pub name: String,
    pub shape: Vec<usize>,
    pub frobenius_norm: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointSummary {
    pub path: PathBuf,
    pub sha256: String,
    pub model: mipc_core::transformer::ModelConfig,
    pub parameters: usize,
    pub step: usize,
    pub optimizer_step: usize,
    pub obfuscation_seed: Option<u64>,
    pub train: Option<mipc_core::trainer::TrainConfig>,
    pub val_history: Vec<mipc_core::trainer::ValPoint>,
    pub tensors: Vec<TensorSummary>,
}

pub fn cmd_inspect_checkpoint(path: &Path) -> CliResult<CheckpointSummary> {
    let ck = load_checkpoint(path)?;
    Ok(CheckpointSummary {
        path: path.to_path_buf(),
        sha256: crate::manifest::sha256_file(path)?,
        model: ck.params.config.clone(),
        parameters: ck.params.num_parameters(),
        step: ck.step,
        optimizer_step: ck.optimizer.step,
        obfuscation_seed: ck.obfuscation_seed,
        train: ck.train_config.clone(),
        val_history: ck.val_history.clone(),
        tensors: ck
            .params
            .tensors()
            .into_iter()
            .map(|(name, _, t)| TensorSummary {
                name,
                shape: t.shape().to_vec(),
                frobenius_norm: t.frobenius_norm(),
            })
            .collect(),
    })
}
