// SPDX-License-Identifier: MIT OR Apache-2.0

//! Experiment configuration, read from TOML.
//!
//! ```toml
//! out_dir = "runs/desk"
//! experiments = ["attribute", "patch:resid_pre:denoise", "patch:head_z:noise"]
//!
//! [train]
//! total_steps = 3000
//!
//! [[runs]]
//! name = "base"
//!
//! [[runs]]
//! name = "retrained"
//! obfuscation = { seed = 1234 }
//!
//! [[runs]]
//! name = "permuted"
//! obfuscation = { weight-permute = { from = "base", seed = 1234 } }
//! ```
//!
//! Relative paths are resolved against the directory holding the file.

use std::collections::HashSet;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use mipc_core::interp::{PatchMode, SiteFamily};
use mipc_core::ioi::{default_templates, IoiTask, Pools, PromptTemplate};
use mipc_core::tokenizer::{PermutationMap, Vocabulary};
use mipc_core::trainer::TrainConfig;
use mipc_core::transformer::{ModelConfig, ResidualCount};
use serde::{Deserialize, Serialize};

use crate::error::{CliError, CliResult};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub out_dir: PathBuf,
    #[serde(default)]
    pub model: ModelSection,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub dataset: DatasetSpec,
    pub runs: Vec<RunSpec>,
    #[serde(default = "Experiment::all")]
    pub experiments: Vec<Experiment>,
}

/// Architecture without the vocabulary size, which comes from the task.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSection {
    pub n_layer: usize,
    pub n_head: usize,
    pub d_model: usize,
    pub n_ctx: usize,
    pub ln_eps: f64,
    pub residual_count: ResidualCount,
    pub init_seed: u64,
}

impl Default for ModelSection {
    fn default() -> Self {
        let d = ModelConfig::desk(1);
        Self {
            n_layer: d.n_layer,
            n_head: d.n_head,
            d_model: d.d_model,
            n_ctx: d.n_ctx,
            ln_eps: d.ln_eps,
            residual_count: d.residual_count,
            init_seed: 0,
        }
    }
}

impl ModelSection {
    pub fn model_config(&self, vocab_size: usize) -> ModelConfig {
        ModelConfig {
            n_layer: self.n_layer,
            n_head: self.n_head,
            d_model: self.d_model,
            n_ctx: self.n_ctx,
            vocab_size,
            ln_eps: self.ln_eps,
            residual_count: self.residual_count,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DatasetSpec {
    /// Pins the vocabulary: the task's vocabulary must equal this file.
    pub vocab_file: Option<PathBuf>,
    pub pools: Option<Pools>,
    pub templates: Option<Vec<String>>,
    pub corpus_size: usize,
    pub corpus_seed: u64,
    pub filler_fraction: f64,
    pub validation_size: usize,
    pub validation_seed: u64,
    /// The prompts analyzed by `analyze`.
    pub eval_size: usize,
    pub eval_seed: u64,
    /// Prompts checked against the corpus, used for the learned-task score.
    pub held_out_size: usize,
    pub held_out_seed: u64,
}

impl Default for DatasetSpec {
    fn default() -> Self {
        Self {
            vocab_file: None,
            pools: None,
            templates: None,
            corpus_size: 20_000,
            corpus_seed: 1,
            filler_fraction: 0.1,
            validation_size: 256,
            validation_seed: 2,
            eval_size: mipc_core::ioi::DEFAULT_EVAL_SIZE,
            eval_seed: mipc_core::ioi::DEFAULT_EVAL_SEED,
            held_out_size: 200,
            held_out_seed: 3,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunSpec {
    pub name: String,
    #[serde(default)]
    pub obfuscation: Obfuscation,
}

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Obfuscation {
    #[default]
    None,
    /// Train from scratch on permuted token ids.
    Seed(u64),
    /// Permute the embedding of an unobfuscated model. `from` names an
    /// earlier run or a checkpoint file.
    WeightPermute { from: String, seed: u64 },
}

impl Obfuscation {
    pub fn seed(&self) -> Option<u64> {
        match self {
            Self::None => None,
            Self::Seed(s) | Self::WeightPermute { seed: s, .. } => Some(*s),
        }
    }

    pub fn provenance(&self) -> Provenance {
        match self {
            Self::None => Provenance::Base,
            Self::Seed(_) => Provenance::RetrainedObfuscated,
            Self::WeightPermute { .. } => Provenance::WeightPermuted,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Provenance {
    Base,
    RetrainedObfuscated,
    WeightPermuted,
}

impl fmt::Display for Provenance {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Base => "base",
            Self::RetrainedObfuscated => "retrained-obfuscated",
            Self::WeightPermuted => "weight-permuted",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum Experiment {
    Attribute,
    Patch(SiteFamily, PatchMode),
}

impl Experiment {
    pub fn all() -> Vec<Experiment> {
        let mut out = vec![Experiment::Attribute];
        for f in SiteFamily::ALL {
            for m in [PatchMode::Denoise, PatchMode::Noise] {
                out.push(Experiment::Patch(f, m));
            }
        }
        out
    }
}

impl fmt::Display for Experiment {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::Attribute => f.write_str("attribute"),
            Self::Patch(s, m) => write!(f, "patch:{s}:{m}"),
        }
    }
}

impl FromStr for Experiment {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        let parts: Vec<&str> = s.split(':').collect();
        match parts.as_slice() {
            ["attribute"] => Ok(Self::Attribute),
            ["patch", family, mode] => Ok(Self::Patch(
                family.parse().map_err(|e| format!("{s:?}: {e}"))?,
                mode.parse().map_err(|e| format!("{s:?}: {e}"))?,
            )),
            _ => Err(format!(
                "unknown experiment {s:?}; expected \"attribute\" or \"patch:<family>:<mode>\""
            )),
        }
    }
}

impl TryFrom<String> for Experiment {
    type Error = String;

    fn try_from(s: String) -> Result<Self, String> {
        s.parse()
    }
}

impl From<Experiment> for String {
    fn from(e: Experiment) -> String {
        e.to_string()
    }
}

impl ExperimentConfig {
    /// Parses `text`, reporting the offending field path on failure.
    pub fn from_toml(text: &str) -> CliResult<Self> {
        let de = toml::Deserializer::new(text);
        serde_path_to_error::deserialize(de).map_err(|e| {
            let path = e.path().to_string();
            let inner = e.into_inner();
            let msg = inner.message().trim_end().to_string();
            if path.is_empty() || path == "." {
                CliError::Config(msg)
            } else {
                CliError::Config(format!("{path}: {msg}"))
            }
        })
    }

    /// Reads, resolves relative paths and validates.
    pub fn load(path: impl AsRef<Path>) -> CliResult<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
        let mut cfg = Self::from_toml(&text).map_err(|e| match e {
            CliError::Config(m) => CliError::Config(format!("{}: {m}", path.display())),
            other => other,
        })?;
        let base = path.parent().unwrap_or(Path::new(""));
        cfg.resolve_paths(base);
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn resolve_paths(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        fix(&mut self.out_dir);
        if let Some(v) = &mut self.dataset.vocab_file {
            fix(v);
        }
        let names: HashSet<String> = self.runs.iter().map(|r| r.name.clone()).collect();
        for r in &mut self.runs {
            if let Obfuscation::WeightPermute { from, .. } = &mut r.obfuscation {
                if !names.contains(from.as_str()) && Path::new(from.as_str()).is_relative() {
                    *from = base.join(&*from).to_string_lossy().into_owned();
                }
            }
        }
    }

    pub fn validate(&self) -> CliResult<()> {
        let bad = |m: String| Err(CliError::Config(m));
        if self.runs.is_empty() {
            return bad("runs: at least one run is required".into());
        }
        let mut seen = HashSet::new();
        for (i, r) in self.runs.iter().enumerate() {
            let ok = !r.name.is_empty()
                && r.name.chars().all(|c| c.is_ascii_alphanumeric() || c == '-' || c == '_');
            if !ok {
                return bad(format!("runs[{i}].name: {:?} must be nonempty ASCII letters, digits, '-' or '_'", r.name));
            }
            if !seen.insert(r.name.as_str()) {
                return bad(format!("runs[{i}].name: duplicate run {:?}", r.name));
            }
            if let Obfuscation::WeightPermute { from, .. } = &r.obfuscation {
                match self.runs[..i].iter().find(|p| &p.name == from) {
                    Some(p) if p.obfuscation != Obfuscation::None => {
                        return bad(format!(
                            "runs[{i}].obfuscation.weight-permute.from: run {from:?} is itself obfuscated"
                        ));
                    }
                    Some(_) => {}
                    None if self.runs[i..].iter().any(|p| &p.name == from) => {
                        return bad(format!(
                            "runs[{i}].obfuscation.weight-permute.from: run {from:?} must be listed earlier"
                        ));
                    }
                    None if !Path::new(from).is_file() => {
                        return bad(format!(
                            "runs[{i}].obfuscation.weight-permute.from: {from:?} is neither a run nor an existing checkpoint"
                        ));
                    }
                    None => {}
                }
            }
        }
        if self.experiments.is_empty() {
            return bad("experiments: list is empty".into());
        }
        let d = &self.dataset;
        if let Some(v) = &d.vocab_file {
            if !v.is_file() {
                return bad(format!("dataset.vocab_file: {} does not exist", v.display()));
            }
        }
        if d.corpus_size == 0 {
            return bad("dataset.corpus_size: must be positive".into());
        }
        if !(0.0..=1.0).contains(&d.filler_fraction) {
            return bad(format!("dataset.filler_fraction: {} outside [0, 1]", d.filler_fraction));
        }
        for (field, n) in [("eval_size", d.eval_size), ("held_out_size", d.held_out_size)] {
            if n == 0 || n % 2 == 1 {
                return bad(format!("dataset.{field}: must be even and positive, got {n}"));
            }
        }
        let task = self.task(None)?;
        let cfg = self.model_config(&task);
        cfg.validate().map_err(|e| CliError::Config(format!("model: {e}")))?;
        self.train.validate().map_err(|e| CliError::Config(format!("train: {e}")))?;
        let longest = task.templates[0].len() + 3;
        if longest > cfg.n_ctx {
            return bad(format!(
                "model.n_ctx: {} is shorter than the {longest}-token training sentences",
                cfg.n_ctx
            ));
        }
        if self.train.sequences_per_step() > d.corpus_size {
            return bad(format!(
                "dataset.corpus_size: {} is smaller than one batch of {}",
                d.corpus_size,
                self.train.sequences_per_step()
            ));
        }
        Ok(())
    }

    pub fn pools(&self) -> Pools {
        self.dataset.pools.clone().unwrap_or_default()
    }

    pub fn templates(&self) -> CliResult<Vec<PromptTemplate>> {
        match &self.dataset.templates {
            None => Ok(default_templates()),
            Some(ts) => ts
                .iter()
                .enumerate()
                .map(|(i, t)| {
                    PromptTemplate::parse(t).map_err(|e| CliError::Config(format!("dataset.templates[{i}]: {e}")))
                })
                .collect(),
        }
    }

    /// The task in the token space of `map`.
    pub fn task(&self, map: Option<PermutationMap>) -> CliResult<IoiTask> {
        let pools = self.pools();
        pools.validate().map_err(|e| CliError::Config(format!("dataset.pools: {e}")))?;
        let task = IoiTask::new(pools, self.templates()?, map).map_err(|e| CliError::Config(format!("dataset: {e}")))?;
        if let Some(path) = &self.dataset.vocab_file {
            let pinned = Vocabulary::from_file(path).map_err(|e| CliError::Config(format!("dataset.vocab_file: {e}")))?;
            if pinned != task.vocab {
                return Err(CliError::Config(format!(
                    "dataset.vocab_file: {} does not match the vocabulary built from the pools and templates",
                    path.display()
                )));
            }
        }
        Ok(task)
    }

    pub fn model_config(&self, task: &IoiTask) -> ModelConfig {
        self.model.model_config(task.vocab_size())
    }

    pub fn run(&self, name: &str) -> CliResult<&RunSpec> {
        self.runs
            .iter()
            .find(|r| r.name == name)
            .ok_or_else(|| CliError::Usage(format!("no run named {name:?} in the config")))
    }

    /// Seeds overridden from the command line.
    pub fn override_seed(&mut self, seed: u64) {
        self.train.seed = seed;
        self.model.init_seed = seed;
    }
}
