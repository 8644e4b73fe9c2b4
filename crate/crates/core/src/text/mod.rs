//! Span-tracked tokenization.
//!
//! Every tokenizer here annotates its tokens with half-open character spans
//! into the original string, so that two different segmentations of the same
//! text can be compared character by character. Offsets count Unicode scalar
//! values, not bytes.

mod alphabet;
mod merges;
mod span;
mod tokenizer;

pub use alphabet::{Alphabet, DEFAULT_ALPHABET};
pub use merges::{train_merges, MergeTable};
pub use span::{CharSpan, Token, TokenizedText};
pub use tokenizer::{char_tokenize, merge_tokenize, Tokenizer};

/// Index into a model vocabulary.
pub type TokenId = usize;
