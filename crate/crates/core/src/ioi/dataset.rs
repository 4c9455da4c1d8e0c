// SPDX-License-Identifier: MIT OR Apache-2.0

use std::collections::HashSet;
use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::templates::{build_vocabulary, default_templates, PromptTemplate, FILLER_TEMPLATES};
use super::Pools;
use crate::error::{Error, Result};
use crate::numerics::{Scalar, SeededRng, Tensor};
use crate::tokenizer::{encode, PermutationMap, Vocabulary};
use crate::transformer::Parameters;

/// Seed of the built-in eight-prompt evaluation set.
pub const DEFAULT_EVAL_SEED: u64 = 8;
pub const DEFAULT_EVAL_SIZE: usize = 8;

/// One clean prompt, its corrupted counterpart and the answer tokens.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct IoiExample {
    pub template: usize,
    /// Clean prompt as words, BOS first, always in the unpermuted vocabulary.
    pub words: Vec<String>,
    pub clean_tokens: Vec<usize>,
    pub corrupted_tokens: Vec<usize>,
    /// Indirect object: the correct answer.
    pub io_token: usize,
    /// Subject: the repeated name.
    pub s_token: usize,
    /// Position of the last prompt token, where the answer is predicted.
    pub end_pos: usize,
    /// First subject, indirect object, second subject.
    pub name_positions: [usize; 3],
}

/// Exchanges the two names at every name position. Applying it twice gives
/// back the input.
pub fn make_corrupted(tokens: &[usize], name_positions: [usize; 3]) -> Vec<usize> {
    let [s1, io, s2] = name_positions;
    let mut out = tokens.to_vec();
    let (a, b) = (tokens[s1], tokens[io]);
    for p in [s1, io, s2] {
        out[p] = if tokens[p] == a { b } else { a };
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IoiDataset {
    pub examples: Vec<IoiExample>,
    pub seed: u64,
    /// Seed of the token permutation the ids are expressed in, if any.
    pub permutation_seed: Option<u64>,
    pub pools: Pools,
    pub templates: Vec<String>,
}

impl IoiDataset {
    pub fn len(&self) -> usize {
        self.examples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.examples.is_empty()
    }

    pub fn prompt_len(&self) -> usize {
        self.examples.first().map_or(0, |e| e.clean_tokens.len())
    }

    /// `pos:word` for every prompt position. Positions whose word varies
    /// across the dataset are labelled by role: `S1`, `IO`, `S2`, or `*`.
    pub fn position_labels(&self) -> Vec<String> {
        let Some(first) = self.examples.first() else {
            return Vec::new();
        };
        (0..first.words.len())
            .map(|p| {
                let word = if self.examples.iter().all(|e| e.words[p] == first.words[p]) {
                    first.words[p].as_str()
                } else if p == first.name_positions[0] {
                    "S1"
                } else if p == first.name_positions[1] {
                    "IO"
                } else if p == first.name_positions[2] {
                    "S2"
                } else if p == first.end_pos {
                    "END"
                } else {
                    "*"
                };
                format!("{p}:{word}")
            })
            .collect()
    }

    /// One JSON object per line: tokens, answers and the readable prompt.
    pub fn write_jsonl(&self, path: impl AsRef<Path>) -> Result<()> {
        #[derive(Serialize)]
        struct Line<'a> {
            clean_tokens: &'a [usize],
            corrupted_tokens: &'a [usize],
            io: usize,
            s: usize,
            end_pos: usize,
            prompt: String,
        }
        let path = path.as_ref();
        let mut out = Vec::new();
        for e in &self.examples {
            let line = Line {
                clean_tokens: &e.clean_tokens,
                corrupted_tokens: &e.corrupted_tokens,
                io: e.io_token,
                s: e.s_token,
                end_pos: e.end_pos,
                prompt: e.words[1..].join(" "),
            };
            serde_json::to_writer(&mut out, &line)?;
            out.push(b'\n');
        }
        let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(&out).map_err(|e| Error::io(path, e))
    }
}

/// A vocabulary, its optional permutation, and the pools and templates that
/// prompts are drawn from.
#[derive(Debug, Clone)]
pub struct IoiTask {
    pub vocab: Vocabulary,
    pub map: Option<PermutationMap>,
    pub pools: Pools,
    pub templates: Vec<PromptTemplate>,
}

impl IoiTask {
    pub fn new(pools: Pools, templates: Vec<PromptTemplate>, map: Option<PermutationMap>) -> Result<Self> {
        let Some(first) = templates.first() else {
            return Err(Error::Dataset("no templates".into()));
        };
        if let Some(t) = templates
            .iter()
            .find(|t| t.len() != first.len() || t.name_positions() != first.name_positions())
        {
            return Err(Error::Dataset(format!(
                "template {:?} is not aligned with {:?}",
                t.source, first.source
            )));
        }
        let vocab = build_vocabulary(&pools, &templates)?;
        if let Some(m) = &map {
            if m.size != vocab.len() {
                return Err(Error::Dataset(format!(
                    "permutation of size {} does not match the task vocabulary of {}",
                    m.size,
                    vocab.len()
                )));
            }
        }
        Ok(Self {
            vocab,
            map,
            pools,
            templates,
        })
    }

    /// Built-in pools and templates.
    pub fn standard(map: Option<PermutationMap>) -> Result<Self> {
        Self::new(Pools::default(), default_templates(), map)
    }

    pub fn vocab_size(&self) -> usize {
        self.vocab.len()
    }

    pub fn encode(&self, words: &[String]) -> Result<Vec<usize>> {
        encode(&self.vocab, self.map.as_ref(), words)
    }

    pub fn example(&self, template: usize, a: &str, b: &str, place: &str, object: &str) -> Result<IoiExample> {
        let t = self
            .templates
            .get(template)
            .ok_or_else(|| Error::Dataset(format!("template index {template} out of range")))?;
        if a == b {
            return Err(Error::Dataset(format!("both names are {a:?}")));
        }
        let words = t.instantiate(a, b, place, object);
        let clean_tokens = self.encode(&words)?;
        let name_positions = t.name_positions();
        let corrupted_tokens = make_corrupted(&clean_tokens, name_positions);
        Ok(IoiExample {
            template,
            io_token: clean_tokens[name_positions[1]],
            s_token: clean_tokens[name_positions[0]],
            end_pos: words.len() - 1,
            words,
            clean_tokens,
            corrupted_tokens,
            name_positions,
        })
    }

    fn pick<'a>(rng: &mut SeededRng, pool: &'a [String]) -> &'a str {
        &pool[rng.next_below(pool.len() as u64) as usize]
    }

    fn two_names<'a>(&'a self, rng: &mut SeededRng) -> (&'a str, &'a str) {
        let n = self.pools.names.len() as u64;
        let i = rng.next_below(n);
        let mut j = rng.next_below(n - 1);
        if j >= i {
            j += 1;
        }
        (&self.pools.names[i as usize], &self.pools.names[j as usize])
    }

    /// `count` examples as `count / 2` swapped-role twins: each draw appears
    /// once with each name as the indirect object.
    pub fn generate_dataset(&self, count: usize, seed: u64) -> Result<IoiDataset> {
        if count == 0 || count % 2 == 1 {
            return Err(Error::Dataset(format!("example count must be even and positive, got {count}")));
        }
        let mut rng = SeededRng::new(seed);
        let mut examples = Vec::with_capacity(count);
        for _ in 0..count / 2 {
            let t = rng.next_below(self.templates.len() as u64) as usize;
            let (a, b) = self.two_names(&mut rng);
            let place = Self::pick(&mut rng, &self.pools.places);
            let object = Self::pick(&mut rng, &self.pools.objects);
            examples.push(self.example(t, a, b, place, object)?);
            examples.push(self.example(t, b, a, place, object)?);
        }
        Ok(IoiDataset {
            examples,
            seed,
            permutation_seed: self.map.as_ref().map(|m| m.seed),
            pools: self.pools.clone(),
            templates: self.templates.iter().map(|t| t.source.clone()).collect(),
        })
    }

    /// Like [`generate_dataset`](Self::generate_dataset), but skips every
    /// twin pair whose clean prompt begins some sequence of `corpus`.
    pub fn held_out_dataset(&self, count: usize, seed: u64, corpus: &[Vec<usize>]) -> Result<IoiDataset> {
        let mut out = self.generate_dataset(count, seed)?;
        let len = out.prompt_len();
        let seen: HashSet<&[usize]> = corpus.iter().filter(|s| s.len() >= len).map(|s| &s[..len]).collect();
        out.examples.clear();
        let mut rng = SeededRng::new(seed);
        let mut draws = 0usize;
        while out.examples.len() < count {
            draws += 1;
            if draws > 100 * count.max(1) {
                return Err(Error::Dataset(format!(
                    "could not find {count} prompts outside the corpus after {draws} draws"
                )));
            }
            let pair = self.generate_dataset(2, rng.next_u64())?.examples;
            if pair.iter().any(|e| seen.contains(e.clean_tokens.as_slice())) {
                continue;
            }
            out.examples.extend(pair);
        }
        Ok(out)
    }

    /// The eight-prompt evaluation set.
    pub fn default_eval_set(&self) -> Result<IoiDataset> {
        self.generate_dataset(DEFAULT_EVAL_SIZE, DEFAULT_EVAL_SEED)
    }

    /// Training sequences: complete task sentences (prompt, answer, period)
    /// with a `filler_fraction` share of short unrelated sentences.
    pub fn training_corpus(&self, count: usize, seed: u64, filler_fraction: f64) -> Result<Vec<Vec<usize>>> {
        if !(0.0..=1.0).contains(&filler_fraction) {
            return Err(Error::Dataset(format!("filler_fraction {filler_fraction} outside [0, 1]")));
        }
        let fillers: Vec<PromptTemplate> = FILLER_TEMPLATES
            .iter()
            .map(|s| PromptTemplate::parse_loose(s))
            .collect();
        let mut rng = SeededRng::new(seed);
        let mut out = Vec::with_capacity(count);
        for _ in 0..count {
            let (a, b) = self.two_names(&mut rng);
            let place = Self::pick(&mut rng, &self.pools.places);
            let object = Self::pick(&mut rng, &self.pools.objects);
            let words = if rng.next_f64() < filler_fraction {
                let f = &fillers[rng.next_below(fillers.len() as u64) as usize];
                f.instantiate(a, b, place, object)
            } else {
                let t = &self.templates[rng.next_below(self.templates.len() as u64) as usize];
                let mut w = t.instantiate(a, b, place, object);
                w.push(b.to_string());
                w.push(".".to_string());
                w
            };
            out.push(self.encode(&words)?);
        }
        Ok(out)
    }
}

/// `logits[end_pos][io] - logits[end_pos][s]`.
pub fn logit_diff<T: Scalar>(logits: &Tensor<T>, example: &IoiExample) -> Result<f64> {
    if example.end_pos >= logits.n_rows() {
        return Err(Error::InvalidArgument(format!(
            "end_pos {} outside logits with {} rows",
            example.end_pos,
            logits.n_rows()
        )));
    }
    let row = logits.row(example.end_pos);
    let (io, s) = (example.io_token, example.s_token);
    if io >= row.len() || s >= row.len() {
        return Err(Error::TokenOutOfRange {
            id: io.max(s),
            vocab_size: row.len(),
        });
    }
    Ok(row[io].as_f64() - row[s].as_f64())
}

/// Clean-prompt metrics over a dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IoiScore {
    pub mean_logit_diff: f64,
    /// Fraction of prompts whose indirect-object logit beats the subject's.
    pub io_preference: f64,
    pub per_example: Vec<f64>,
}

pub fn evaluate_ioi<T: Scalar>(params: &Parameters<T>, examples: &[IoiExample]) -> Result<IoiScore> {
    if examples.is_empty() {
        return Err(Error::Dataset("no examples to evaluate".into()));
    }
    let per_example = examples
        .iter()
        .map(|e| logit_diff(&params.forward(&e.clean_tokens, false)?.logits, e))
        .collect::<Result<Vec<f64>>>()?;
    let n = per_example.len() as f64;
    Ok(IoiScore {
        mean_logit_diff: per_example.iter().sum::<f64>() / n,
        io_preference: per_example.iter().filter(|&&d| d > 0.0).count() as f64 / n,
        per_example,
    })
}

pub fn mean_logit_diff<T: Scalar>(params: &Parameters<T>, examples: &[IoiExample]) -> Result<f64> {
    evaluate_ioi(params, examples).map(|s| s.mean_logit_diff)
}
