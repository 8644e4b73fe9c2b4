use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::LanguageModel;
use crate::error::{Error, Result};
use crate::text::{Alphabet, TokenId, Tokenizer};

/// Start-of-text key in [`GrammarSpec::transitions`].
pub const START: &str = "^";
/// End-of-sequence key in [`GrammarSpec::transitions`].
pub const END: &str = "$";

/// A first-order (bigram) grammar over single characters.
///
/// `transitions[prev][next]` are relative weights; `"^"` is the start state and
/// `"$"` the end symbol. Rows are normalized and mixed with a uniform
/// distribution of weight `smoothing`, so every continuation has positive
/// probability. States without a row are uniform.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GrammarSpec {
    pub alphabet: String,
    pub transitions: BTreeMap<String, BTreeMap<String, f64>>,
    pub smoothing: f64,
}

impl Default for GrammarSpec {
    fn default() -> Self {
        let row = |pairs: &[(&str, f64)]| {
            pairs
                .iter()
                .map(|&(k, w)| (k.to_string(), w))
                .collect::<BTreeMap<_, _>>()
        };
        let mut transitions = BTreeMap::new();
        transitions.insert(START.into(), row(&[("a", 0.5), ("c", 0.3), ("b", 0.2)]));
        transitions.insert("a".into(), row(&[("b", 0.8), ("c", 0.1), ("d", 0.1)]));
        transitions.insert("b".into(), row(&[("c", 0.5), ("d", 0.3), (END, 0.2)]));
        transitions.insert("c".into(), row(&[("a", 0.6), ("d", 0.2), (END, 0.2)]));
        transitions.insert("d".into(), row(&[(END, 0.7), ("a", 0.3)]));
        Self {
            alphabet: "abcd".into(),
            transitions,
            smoothing: 0.02,
        }
    }
}

/// Language model of a [`GrammarSpec`]: the next token depends only on the
/// previous one.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "GrammarSpec", into = "GrammarSpec")]
pub struct MarkovLM {
    spec: GrammarSpec,
    tokenizer: Tokenizer,
    /// Row `prev` (or `V` for the start state) holds log-probabilities.
    log_table: Vec<Vec<f64>>,
}

impl TryFrom<GrammarSpec> for MarkovLM {
    type Error = Error;

    fn try_from(spec: GrammarSpec) -> Result<Self> {
        MarkovLM::new(spec)
    }
}

impl From<MarkovLM> for GrammarSpec {
    fn from(m: MarkovLM) -> Self {
        m.spec
    }
}

impl MarkovLM {
    pub fn new(spec: GrammarSpec) -> Result<Self> {
        let alphabet = Alphabet::new(&spec.alphabet)?;
        if !(0.0..=1.0).contains(&spec.smoothing) {
            return Err(Error::config("grammar smoothing must lie in [0, 1]"));
        }
        let a = alphabet.len();
        let v = a + 1;
        let symbol = |s: &str, allow_end: bool, allow_start: bool| -> Result<usize> {
            match s {
                END if allow_end => Ok(a),
                START if allow_start => Ok(v),
                _ => {
                    let mut chars = s.chars();
                    match (chars.next(), chars.next()) {
                        (Some(c), None) => alphabet
                            .index_of(c)
                            .ok_or_else(|| Error::config(format!("grammar symbol {s:?} not in alphabet"))),
                        _ => Err(Error::config(format!("invalid grammar symbol {s:?}"))),
                    }
                }
            }
        };
        let uniform = vec![-(v as f64).ln(); v];
        let mut log_table = vec![uniform; v + 1];
        for (prev, row) in &spec.transitions {
            let from = symbol(prev, false, true)?;
            let mut weights = vec![0.0; v];
            for (next, &w) in row {
                if !(w >= 0.0 && w.is_finite()) {
                    return Err(Error::config(format!("invalid weight {w} in grammar row {prev:?}")));
                }
                weights[symbol(next, true, false)?] += w;
            }
            let total: f64 = weights.iter().sum();
            if total <= 0.0 {
                return Err(Error::config(format!("grammar row {prev:?} has no mass")));
            }
            log_table[from] = weights
                .iter()
                .map(|w| ((1.0 - spec.smoothing) * w / total + spec.smoothing / v as f64).ln())
                .collect();
        }
        Ok(Self {
            tokenizer: Tokenizer::chars(alphabet),
            spec,
            log_table,
        })
    }

    pub fn spec(&self) -> &GrammarSpec {
        &self.spec
    }
}

impl LanguageModel for MarkovLM {
    fn tokenizer(&self) -> &Tokenizer {
        &self.tokenizer
    }

    fn log_distribution(&self, context: &[TokenId]) -> Vec<f64> {
        let row = context.last().copied().unwrap_or(self.log_table.len() - 1);
        self.log_table[row.min(self.log_table.len() - 1)].clone()
    }
}
