// SPDX-License-Identifier: MIT OR Apache-2.0

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::Vocabulary;
use crate::error::{Error, Result};
use crate::numerics::{seeded_permutation, Scalar, Tensor};
use crate::transformer::Parameters;

pub const PERMUTATION_FORMAT_VERSION: u32 = 1;

/// A fixed bijection on token ids, reproducible from `(seed, size)`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PermutationMap {
    pub seed: u64,
    pub size: usize,
    /// Original id to permuted id.
    pub forward: Vec<usize>,
    /// Permuted id to original id.
    pub inverse: Vec<usize>,
}

pub fn build_permutation_map(seed: u64, size: usize) -> Result<PermutationMap> {
    let forward = seeded_permutation(seed, size)?;
    let inverse = invert(&forward)?;
    Ok(PermutationMap {
        seed,
        size,
        forward,
        inverse,
    })
}

fn invert(forward: &[usize]) -> Result<Vec<usize>> {
    let mut inverse = vec![usize::MAX; forward.len()];
    for (i, &f) in forward.iter().enumerate() {
        if f >= forward.len() || inverse[f] != usize::MAX {
            return Err(Error::InvalidArgument(format!(
                "entry {i} -> {f} breaks the bijection"
            )));
        }
        inverse[f] = i;
    }
    Ok(inverse)
}

impl PermutationMap {
    pub fn identity(size: usize) -> Self {
        let forward: Vec<usize> = (0..size).collect();
        Self {
            seed: 0,
            size,
            inverse: forward.clone(),
            forward,
        }
    }

    pub fn apply(&self, id: usize) -> usize {
        self.forward[id]
    }

    pub fn invert(&self, id: usize) -> usize {
        self.inverse[id]
    }
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct CacheFile {
    format_version: u32,
    seed: u64,
    size: usize,
    forward: Vec<usize>,
}

pub fn save_cache(map: &PermutationMap, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let file = CacheFile {
        format_version: PERMUTATION_FORMAT_VERSION,
        seed: map.seed,
        size: map.size,
        forward: map.forward.clone(),
    };
    let mut text = serde_json::to_string(&file)?;
    text.push('\n');
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Loads a cache file and checks that it is a bijection and that it matches
/// what its seed regenerates.
pub fn load_cache(path: impl AsRef<Path>) -> Result<PermutationMap> {
    let path = path.as_ref();
    let bad = |reason: String| Error::PermutationCache {
        path: path.to_path_buf(),
        reason,
    };
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let file: CacheFile =
        serde_json::from_str(&text).map_err(|e| bad(format!("malformed content: {e}")))?;
    if file.format_version != PERMUTATION_FORMAT_VERSION {
        return Err(bad(format!("unsupported format_version {}", file.format_version)));
    }
    if file.forward.len() != file.size {
        return Err(bad(format!(
            "size is {} but forward has {} entries",
            file.size,
            file.forward.len()
        )));
    }
    let inverse = invert(&file.forward).map_err(|e| bad(format!("not a bijection: {e}")))?;
    let regenerated = build_permutation_map(file.seed, file.size).map_err(|e| bad(e.to_string()))?;
    if regenerated.forward != file.forward {
        return Err(bad(format!(
            "forward array does not match the permutation regenerated from seed {}",
            file.seed
        )));
    }
    Ok(PermutationMap {
        seed: file.seed,
        size: file.size,
        forward: file.forward,
        inverse,
    })
}

/// Token strings to ids, through `map` when given.
pub fn encode<S: AsRef<str>>(
    vocab: &Vocabulary,
    map: Option<&PermutationMap>,
    tokens: &[S],
) -> Result<Vec<usize>> {
    check_map(vocab, map)?;
    tokens
        .iter()
        .map(|t| {
            let t = t.as_ref();
            let id = vocab.id(t).ok_or_else(|| Error::OutOfVocabulary(t.to_string()))?;
            Ok(map.map_or(id, |m| m.apply(id)))
        })
        .collect()
}

pub fn decode(vocab: &Vocabulary, map: Option<&PermutationMap>, ids: &[usize]) -> Result<Vec<String>> {
    check_map(vocab, map)?;
    ids.iter()
        .map(|&id| {
            if id >= vocab.len() {
                return Err(Error::TokenOutOfRange {
                    id,
                    vocab_size: vocab.len(),
                });
            }
            let orig = map.map_or(id, |m| m.invert(id));
            Ok(vocab.token(orig).expect("in range").to_string())
        })
        .collect()
}

fn check_map(vocab: &Vocabulary, map: Option<&PermutationMap>) -> Result<()> {
    match map {
        Some(m) if m.size != vocab.len() => Err(Error::InvalidArgument(format!(
            "permutation of size {} used with a vocabulary of {}",
            m.size,
            vocab.len()
        ))),
        _ => Ok(()),
    }
}

/// The model that reads permuted ids exactly as `params` reads original ids:
/// row `i` of `W_E` moves to row `forward[i]`. With tied weights the
/// unembedding moves with it.
pub fn permute_model<T: Scalar>(params: &Parameters<T>, map: &PermutationMap) -> Result<Parameters<T>> {
    let vocab = params.config.vocab_size;
    if map.size != vocab {
        return Err(Error::InvalidArgument(format!(
            "permutation of size {} applied to a model with vocab_size {vocab}",
            map.size
        )));
    }
    let mut out = params.clone();
    for i in 0..vocab {
        out.token_embedding
            .row_mut(map.forward[i])
            .copy_from_slice(params.token_embedding.row(i));
    }
    Ok(out)
}

/// Reorders the vocabulary axis of permuted-space logits back to original ids.
pub fn unpermute_logits<T: Scalar>(logits: &Tensor<T>, map: &PermutationMap) -> Result<Tensor<T>> {
    let v = logits.last_dim();
    if v != map.size {
        return Err(Error::ShapeMismatch {
            op: "unpermute_logits",
            expected: vec![logits.n_rows(), map.size],
            actual: logits.shape().to_vec(),
        });
    }
    let mut out = logits.clone();
    for r in 0..logits.n_rows() {
        let src = logits.row(r);
        for (i, x) in out.row_mut(r).iter_mut().enumerate() {
            *x = src[map.forward[i]];
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn size_one_and_zero() {
        assert_eq!(build_permutation_map(99, 1).unwrap().forward, vec![0]);
        assert!(build_permutation_map(99, 0).is_err());
    }

    #[test]
    fn seeds_give_distinct_maps() {
        let a = build_permutation_map(5, 50).unwrap();
        assert_eq!(a, build_permutation_map(5, 50).unwrap());
        let mut maps: Vec<Vec<usize>> = (0..10)
            .map(|s| build_permutation_map(s, 50).unwrap().forward)
            .collect();
        maps.sort();
        maps.dedup();
        assert!(maps.len() >= 9);
    }

    proptest! {
        #[test]
        fn inverse_undoes_forward(seed in any::<u64>(), size in 1usize..300) {
            let m = build_permutation_map(seed, size).unwrap();
            for i in 0..size {
                prop_assert_eq!(m.inverse[m.forward[i]], i);
                prop_assert_eq!(m.forward[m.inverse[i]], i);
            }
        }
    }

    #[test]
    fn cache_round_trip_and_tampering() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("perm.json");
        let m = build_permutation_map(42, 40).unwrap();
        save_cache(&m, &path).unwrap();
        assert_eq!(load_cache(&path).unwrap(), m);

        let text = fs::read_to_string(&path).unwrap();
        let mut v: serde_json::Value = serde_json::from_str(&text).unwrap();

        let mut dup = v.clone();
        dup["forward"][0] = dup["forward"][1].clone();
        fs::write(&path, dup.to_string()).unwrap();
        let err = load_cache(&path).unwrap_err().to_string();
        assert!(err.contains("bijection"), "{err}");

        // A valid bijection that the seed does not regenerate.
        let f = v["forward"].as_array_mut().unwrap();
        f.swap(0, 1);
        fs::write(&path, v.to_string()).unwrap();
        let err = load_cache(&path).unwrap_err().to_string();
        assert!(err.contains("regenerated"), "{err}");

        fs::write(&path, "{\"format_version\":1}").unwrap();
        assert!(load_cache(&path).is_err());
        assert!(load_cache(dir.path().join("missing.json")).is_err());
    }

    fn vocab() -> Vocabulary {
        Vocabulary::new(
            ["When", "John", "and", "Mary", "went", "to", "the", "shops", ",", "gave", "bag"],
        )
        .unwrap()
    }

    #[test]
    fn encode_decode() {
        let v = vocab();
        let words = super::super::split_words("When John and Mary went to the shops");
        let plain = encode(&v, None, &words).unwrap();
        assert_eq!(plain, [0, 1, 2, 3, 4, 5, 6, 7]);
        assert_eq!(decode(&v, None, &plain).unwrap(), words);

        let id = PermutationMap::identity(v.len());
        assert_eq!(encode(&v, Some(&id), &words).unwrap(), plain);

        let m = build_permutation_map(42, v.len()).unwrap();
        let permuted = encode(&v, Some(&m), &words).unwrap();
        assert_eq!(permuted.len(), 8);
        let (mut a, mut b) = (plain.clone(), permuted.clone());
        a.sort_unstable();
        b.sort_unstable();
        assert_ne!(a, b);
        assert_eq!(decode(&v, Some(&m), &permuted).unwrap(), words);

        match encode(&v, None, &["When", "Zeus"]) {
            Err(Error::OutOfVocabulary(s)) => assert_eq!(s, "Zeus"),
            r => panic!("{r:?}"),
        }
        let small = build_permutation_map(1, 3).unwrap();
        assert!(encode(&v, Some(&small), &words).is_err());
    }
}
