//! Shared fixtures for unit tests.

use crate::text::{Alphabet, MergeTable, Tokenizer};

/// Merges that segment "unhappiness" as `["unhappi", "ness"]`.
pub fn verifier_merges() -> MergeTable {
    MergeTable::from_pairs([
        ("u", "n"),
        ("h", "a"),
        ("p", "p"),
        ("ha", "pp"),
        ("un", "happ"),
        ("unhapp", "i"),
        ("n", "e"),
        ("s", "s"),
        ("ne", "ss"),
    ])
}

/// Merges that segment "unhappiness" as `["un", "happiness"]`.
pub fn generator_merges() -> MergeTable {
    MergeTable::from_pairs([
        ("u", "n"),
        ("h", "a"),
        ("p", "p"),
        ("ha", "pp"),
        ("happ", "i"),
        ("n", "e"),
        ("s", "s"),
        ("ne", "ss"),
        ("happi", "ness"),
    ])
}

pub fn tokenizer(merges: MergeTable) -> Tokenizer {
    Tokenizer::new(Alphabet::default(), merges).unwrap()
}
