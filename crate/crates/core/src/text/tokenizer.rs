use std::collections::HashMap;
use std::fmt;

use serde::{Deserialize, Serialize};

use super::{Alphabet, MergeTable, TokenId, TokenizedText};
use crate::error::{Error, Result};

/// Greedy-merge tokenizer over a closed alphabet.
///
/// Ids `0..alphabet.len()` are the single characters in alphabet order; merge
/// `k` produces id `alphabet.len() + k`. With an empty merge table this is the
/// per-character tokenizer.
#[derive(Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "TokenizerSpec", into = "TokenizerSpec")]
pub struct Tokenizer {
    alphabet: Alphabet,
    merges: MergeTable,
    vocab: Vec<String>,
    char_lens: Vec<usize>,
    rules: Vec<(TokenId, TokenId, TokenId)>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TokenizerSpec {
    alphabet: Alphabet,
    #[serde(default)]
    merges: MergeTable,
}

impl TryFrom<TokenizerSpec> for Tokenizer {
    type Error = Error;

    fn try_from(spec: TokenizerSpec) -> Result<Self> {
        Tokenizer::new(spec.alphabet, spec.merges)
    }
}

impl From<Tokenizer> for TokenizerSpec {
    fn from(t: Tokenizer) -> Self {
        TokenizerSpec {
            alphabet: t.alphabet,
            merges: t.merges,
        }
    }
}

impl Tokenizer {
    pub fn new(alphabet: Alphabet, merges: MergeTable) -> Result<Self> {
        let mut vocab: Vec<String> = alphabet.chars().iter().map(|c| c.to_string()).collect();
        let mut char_lens = vec![1; vocab.len()];
        let mut lookup: HashMap<String, TokenId> =
            vocab.iter().enumerate().map(|(i, s)| (s.clone(), i)).collect();
        let mut rules = Vec::with_capacity(merges.len());
        for (k, (left, right)) in merges.iter().enumerate() {
            let l = *lookup.get(left.as_str()).ok_or_else(|| {
                Error::config(format!("merge {k}: left part {left:?} is not a known token"))
            })?;
            let r = *lookup.get(right.as_str()).ok_or_else(|| {
                Error::config(format!("merge {k}: right part {right:?} is not a known token"))
            })?;
            let merged = format!("{left}{right}");
            if lookup.contains_key(&merged) {
                return Err(Error::config(format!(
                    "merge {k}: token {merged:?} already exists"
                )));
            }
            let id = vocab.len();
            lookup.insert(merged.clone(), id);
            char_lens.push(char_lens[l] + char_lens[r]);
            vocab.push(merged);
            rules.push((l, r, id));
        }
        Ok(Self {
            alphabet,
            merges,
            vocab,
            char_lens,
            rules,
        })
    }

    /// Per-character tokenizer.
    pub fn chars(alphabet: Alphabet) -> Self {
        Self::new(alphabet, MergeTable::default()).expect("empty merge table is valid")
    }

    pub fn alphabet(&self) -> &Alphabet {
        &self.alphabet
    }

    pub fn merges(&self) -> &MergeTable {
        &self.merges
    }

    /// Number of text tokens (excludes any end-of-sequence symbol a model adds).
    pub fn vocab_size(&self) -> usize {
        self.vocab.len()
    }

    pub fn token_str(&self, id: TokenId) -> Option<&str> {
        self.vocab.get(id).map(String::as_str)
    }

    pub fn encode(&self, text: &str) -> Result<TokenizedText> {
        let mut ids = self.alphabet.indices(text)?;
        for &rule in &self.rules {
            apply_merge(&mut ids, rule);
        }
        self.tokenized(text.to_string(), ids)
    }

    pub fn decode(&self, ids: &[TokenId]) -> Result<String> {
        let mut out = String::new();
        for &id in ids {
            out.push_str(self.token_str(id).ok_or_else(|| {
                Error::domain(format!("token id {id} outside vocabulary of {}", self.vocab.len()))
            })?);
        }
        Ok(out)
    }

    /// Spans for an arbitrary id sequence, e.g. one sampled by a model, which
    /// need not be the canonical encoding of its text.
    pub fn decode_spanned(&self, ids: &[TokenId]) -> Result<TokenizedText> {
        let text = self.decode(ids)?;
        self.tokenized(text, ids.to_vec())
    }

    fn tokenized(&self, text: String, ids: Vec<TokenId>) -> Result<TokenizedText> {
        let lengths: Vec<usize> = ids.iter().map(|&id| self.char_lens[id]).collect();
        TokenizedText::from_lengths(text, &ids, &lengths)
    }
}

impl fmt::Debug for Tokenizer {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Tokenizer")
            .field("alphabet", &self.alphabet)
            .field("merges", &self.merges.len())
            .finish()
    }
}

fn apply_merge(ids: &mut Vec<TokenId>, (left, right, merged): (TokenId, TokenId, TokenId)) {
    if ids.len() < 2 {
        return;
    }
    let mut out = Vec::with_capacity(ids.len());
    let mut i = 0;
    while i < ids.len() {
        if i + 1 < ids.len() && ids[i] == left && ids[i + 1] == right {
            out.push(merged);
            i += 2;
        } else {
            out.push(ids[i]);
            i += 1;
        }
    }
    *ids = out;
}

/// One token per character; ids are alphabet indices and spans `[k, k+1)`.
pub fn char_tokenize(text: &str, alphabet: &Alphabet) -> Result<TokenizedText> {
    Tokenizer::chars(alphabet.clone()).encode(text)
}

/// Per-character tokens with `merges` applied greedily, left to right, in
/// table order.
pub fn merge_tokenize(text: &str, alphabet: &Alphabet, merges: &MergeTable) -> Result<TokenizedText> {
    Tokenizer::new(alphabet.clone(), merges.clone())?.encode(text)
}
