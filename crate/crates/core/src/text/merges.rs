use std::collections::{HashMap, HashSet};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Alphabet, TokenId};
use crate::error::{Error, Result};

/// Ordered list of merges `(left, right)`; application order is table order.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct MergeTable(Vec<(String, String)>);

impl MergeTable {
    pub fn from_pairs<'a>(pairs: impl IntoIterator<Item = (&'a str, &'a str)>) -> Self {
        Self(
            pairs
                .into_iter()
                .map(|(l, r)| (l.to_string(), r.to_string()))
                .collect(),
        )
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &(String, String)> {
        self.0.iter()
    }

    /// One merge per line, the two parts separated by a tab.
    pub fn to_text(&self) -> String {
        self.0.iter().map(|(l, r)| format!("{l}\t{r}\n")).collect()
    }

    pub fn parse(text: &str) -> Result<Self> {
        text.lines()
            .enumerate()
            .filter(|(_, line)| !line.is_empty())
            .map(|(n, line)| {
                let mut parts = line.split('\t');
                match (parts.next(), parts.next(), parts.next()) {
                    (Some(l), Some(r), None) if !l.is_empty() && !r.is_empty() => {
                        Ok((l.to_string(), r.to_string()))
                    }
                    _ => Err(Error::config(format!(
                        "merge table line {}: expected two tab-separated tokens",
                        n + 1
                    ))),
                }
            })
            .collect::<Result<Vec<_>>>()
            .map(Self)
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_text()).map_err(|e| Error::io(path, e))
    }
}

/// Learns a merge table by repeatedly merging the most frequent adjacent pair.
///
/// Pair counts include every occurrence (overlapping runs count each pair).
/// Ties go to the lexicographically smallest merged string, then to the
/// smallest `(left, right)`. Pairs whose merged string is already a token are
/// skipped. Stops after `target_vocab - alphabet.len()` merges or when no pair
/// remains.
pub fn train_merges<S: AsRef<str>>(
    corpus: &[S],
    alphabet: &Alphabet,
    target_vocab: usize,
) -> Result<MergeTable> {
    if corpus.is_empty() {
        return Err(Error::domain("cannot train merges on an empty corpus"));
    }
    if target_vocab < alphabet.len() {
        return Err(Error::domain(format!(
            "target vocabulary {target_vocab} is smaller than the alphabet ({})",
            alphabet.len()
        )));
    }
    let mut vocab: Vec<String> = alphabet.chars().iter().map(|c| c.to_string()).collect();
    let mut known: HashSet<String> = vocab.iter().cloned().collect();
    let mut seqs: Vec<Vec<TokenId>> = corpus
        .iter()
        .map(|s| alphabet.indices(s.as_ref()))
        .collect::<Result<_>>()?;
    let mut table = Vec::new();

    while vocab.len() < target_vocab {
        let mut counts: HashMap<(TokenId, TokenId), usize> = HashMap::new();
        for seq in &seqs {
            for w in seq.windows(2) {
                *counts.entry((w[0], w[1])).or_default() += 1;
            }
        }
        let best = counts
            .into_iter()
            .map(|((l, r), n)| (n, format!("{}{}", vocab[l], vocab[r]), l, r))
            .filter(|(_, merged, _, _)| !known.contains(merged))
            .min_by(|a, b| {
                b.0.cmp(&a.0)
                    .then_with(|| a.1.cmp(&b.1))
                    .then_with(|| vocab[a.2].cmp(&vocab[b.2]))
            });
        let Some((_, merged, l, r)) = best else { break };

        let id = vocab.len();
        table.push((vocab[l].clone(), vocab[r].clone()));
        known.insert(merged.clone());
        vocab.push(merged);
        for seq in &mut seqs {
            let mut out = Vec::with_capacity(seq.len());
            let mut i = 0;
            while i < seq.len() {
                if i + 1 < seq.len() && seq[i] == l && seq[i + 1] == r {
                    out.push(id);
                    i += 2;
                } else {
                    out.push(seq[i]);
                    i += 1;
                }
            }
            *seq = out;
        }
    }
    Ok(MergeTable(table))
}
