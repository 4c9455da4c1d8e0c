// SPDX-License-Identifier: MIT OR Apache-2.0

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tokenizer::{split_words, Vocabulary};

pub const BOS: &str = "<bos>";
pub const END: &str = "<end>";

/// One word of a template: fixed text or a slot.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Piece {
    Word(String),
    /// The subject, mentioned twice.
    A,
    /// The indirect object, mentioned once.
    B,
    Place,
    Object,
}

/// A prompt pattern such as
/// `When [A] and [B] went to the [PLACE] , [A] gave the [OBJECT] to`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PromptTemplate {
    pub source: String,
    pub pieces: Vec<Piece>,
}

impl PromptTemplate {
    /// Splits into pieces without checking the task's name structure.
    pub(crate) fn parse_loose(source: &str) -> Self {
        let pieces = split_words(source)
            .into_iter()
            .map(|w| match w.as_str() {
                "[A]" => Piece::A,
                "[B]" => Piece::B,
                "[PLACE]" => Piece::Place,
                "[OBJECT]" => Piece::Object,
                _ => Piece::Word(w),
            })
            .collect();
        Self {
            source: source.to_string(),
            pieces,
        }
    }

    pub fn parse(source: &str) -> Result<Self> {
        let t = Self::parse_loose(source);
        let pieces = &t.pieces;
        let count = |p: &Piece| pieces.iter().filter(|q| *q == p).count();
        if count(&Piece::A) != 2 || count(&Piece::B) != 1 {
            return Err(Error::Dataset(format!(
                "template {source:?} needs [A] twice and [B] once"
            )));
        }
        let first_a = pieces.iter().position(|p| *p == Piece::A).unwrap();
        let b = pieces.iter().position(|p| *p == Piece::B).unwrap();
        if b < first_a {
            return Err(Error::Dataset(format!("template {source:?} must mention [A] before [B]")));
        }
        Ok(t)
    }

    /// Indices of the first `[A]`, `[B]` and second `[A]`, counting the
    /// leading BOS token.
    pub fn name_positions(&self) -> [usize; 3] {
        let mut a = self
            .pieces
            .iter()
            .enumerate()
            .filter(|(_, p)| **p == Piece::A)
            .map(|(i, _)| i + 1);
        let b = self.pieces.iter().position(|p| *p == Piece::B).unwrap() + 1;
        [a.next().unwrap(), b, a.next().unwrap()]
    }

    /// Prompt length including BOS.
    pub fn len(&self) -> usize {
        self.pieces.len() + 1
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    /// Words of the prompt, BOS first.
    pub fn instantiate(&self, a: &str, b: &str, place: &str, object: &str) -> Vec<String> {
        std::iter::once(BOS.to_string())
            .chain(self.pieces.iter().map(|p| {
                match p {
                    Piece::Word(w) => w.as_str(),
                    Piece::A => a,
                    Piece::B => b,
                    Piece::Place => place,
                    Piece::Object => object,
                }
                .to_string()
            }))
            .collect()
    }

    fn literals(&self) -> impl Iterator<Item = &str> {
        self.pieces.iter().filter_map(|p| match p {
            Piece::Word(w) => Some(w.as_str()),
            _ => None,
        })
    }
}

/// Fill-in words for the templates. Every entry must be a single token.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Pools {
    pub names: Vec<String>,
    pub places: Vec<String>,
    pub objects: Vec<String>,
}

fn strings(xs: &[&str]) -> Vec<String> {
    xs.iter().map(|s| s.to_string()).collect()
}

impl Default for Pools {
    fn default() -> Self {
        Self {
            names: strings(&[
                "John", "Mary", "Tom", "Anna", "James", "Sarah", "Paul", "Laura", "Mark", "Emma",
                "David", "Kate", "Peter", "Lucy", "Alex", "Grace", "Sam", "Rose", "Ben", "Alice",
                "Jack", "Claire", "Henry", "Julia",
            ]),
            places: strings(&[
                "shops", "park", "school", "station", "beach", "market", "office", "garden",
                "library", "cafe",
            ]),
            objects: strings(&[
                "bag", "book", "ball", "key", "drink", "apple", "letter", "ring", "hat", "pen",
            ]),
        }
    }
}

impl Pools {
    pub fn validate(&self) -> Result<()> {
        if self.names.len() < 2 {
            return Err(Error::Dataset(format!(
                "name pool needs at least 2 names, has {}",
                self.names.len()
            )));
        }
        if self.places.is_empty() || self.objects.is_empty() {
            return Err(Error::Dataset("place and object pools must be nonempty".into()));
        }
        let mut all: Vec<&String> = self.names.iter().chain(&self.places).chain(&self.objects).collect();
        if let Some(w) = all.iter().find(|w| split_words(w).len() != 1) {
            return Err(Error::Dataset(format!("pool entry {w:?} is not a single token")));
        }
        all.sort();
        if let Some(w) = all.windows(2).find(|w| w[0] == w[1]) {
            return Err(Error::Dataset(format!("pool entry {:?} is listed twice", w[0])));
        }
        Ok(())
    }
}

/// Default prompts. All share one length and one set of name positions.
pub const DEFAULT_TEMPLATES: &[&str] = &[
    "When [A] and [B] went to the [PLACE] , [A] gave the [OBJECT] to",
    "After [A] and [B] went to the [PLACE] , [A] gave a [OBJECT] to",
    "While [A] and [B] were at the [PLACE] , [A] handed the [OBJECT] to",
    "When [A] and [B] arrived at the [PLACE] , [A] passed a [OBJECT] to",
];

/// Short non-task sentences mixed into the training corpus.
pub const FILLER_TEMPLATES: &[&str] = &[
    "[A] went to the [PLACE] .",
    "[A] and [B] saw the [OBJECT] at the [PLACE] .",
    "The [OBJECT] was at the [PLACE] .",
    "[A] liked the [OBJECT] .",
    "[B] gave the [OBJECT] back .",
];

pub fn default_templates() -> Vec<PromptTemplate> {
    DEFAULT_TEMPLATES
        .iter()
        .map(|s| PromptTemplate::parse(s).expect("valid built-in template"))
        .collect()
}

fn filler_words() -> impl Iterator<Item = String> {
    FILLER_TEMPLATES
        .iter()
        .flat_map(|t| split_words(t))
        .filter(|w| !w.starts_with('['))
}

/// Vocabulary covering the markers, template words, filler words and pools.
pub fn build_vocabulary(pools: &Pools, templates: &[PromptTemplate]) -> Result<Vocabulary> {
    pools.validate()?;
    let mut words: Vec<String> = vec![BOS.into(), END.into(), ".".into()];
    let mut push = |w: String| {
        if !words.contains(&w) {
            words.push(w);
        }
    };
    for t in templates {
        t.literals().for_each(|w| push(w.to_string()));
    }
    filler_words().for_each(&mut push);
    for w in pools.names.iter().chain(&pools.places).chain(&pools.objects) {
        push(w.clone());
    }
    Vocabulary::new(words)
}
