// SPDX-License-Identifier: MIT OR Apache-2.0

//! Word-level vocabularies and the seeded token permutation used to build
//! obfuscated models.

mod perm;
mod vocab;

pub use perm::{
    build_permutation_map, decode, encode, load_cache, permute_model, save_cache,
    unpermute_logits, PermutationMap, PERMUTATION_FORMAT_VERSION,
};
pub use vocab::{split_words, Vocabulary};
