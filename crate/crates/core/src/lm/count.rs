use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::{bos_id, LanguageModel};
use crate::error::{Error, Result};
use crate::text::{TokenId, Tokenizer};

/// Options for [`fit_count_lm`].
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CountOptions {
    /// N-gram order; the context is the previous `order - 1` tokens.
    pub order: usize,
    /// Additive smoothing constant.
    pub alpha: f64,
    /// Count an end-of-sequence event after every corpus string.
    #[serde(default = "default_true")]
    pub append_eos: bool,
}

fn default_true() -> bool {
    true
}

/// Additively smoothed n-gram model. Frozen once fitted.
///
/// `P(v | ctx) = (count(ctx, v) + alpha) / (count(ctx) + alpha * V)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CountLM {
    tokenizer: Tokenizer,
    order: usize,
    alpha: f64,
    #[serde(with = "count_table")]
    counts: BTreeMap<Vec<TokenId>, Vec<u64>>,
}

/// Fits an n-gram model on `corpus`, padding each string's start with a
/// begin-of-sequence symbol.
pub fn fit_count_lm<S: AsRef<str>>(
    corpus: &[S],
    tokenizer: &Tokenizer,
    opts: CountOptions,
) -> Result<CountLM> {
    if corpus.is_empty() {
        return Err(Error::domain("cannot fit a count model on an empty corpus"));
    }
    let mut model = CountLM::from_counts(tokenizer.clone(), opts.order, opts.alpha, BTreeMap::new())?;
    let v = model.vocab_size();
    let n = opts.order;
    for s in corpus {
        let mut padded = vec![bos_id(v); n - 1];
        padded.extend(tokenizer.encode(s.as_ref())?.ids());
        if opts.append_eos {
            padded.push(tokenizer.vocab_size());
        }
        for j in (n - 1)..padded.len() {
            let ctx = padded[j + 1 - n..j].to_vec();
            model.counts.entry(ctx).or_insert_with(|| vec![0; v])[padded[j]] += 1;
        }
    }
    Ok(model)
}

impl CountLM {
    /// Builds a model from explicit counts. Context keys hold `order - 1`
    /// ids, using `vocab_size()` as the begin-of-sequence padding id.
    pub fn from_counts(
        tokenizer: Tokenizer,
        order: usize,
        alpha: f64,
        counts: BTreeMap<Vec<TokenId>, Vec<u64>>,
    ) -> Result<Self> {
        if order == 0 {
            return Err(Error::domain("n-gram order must be at least 1"));
        }
        if !(alpha > 0.0 && alpha.is_finite()) {
            return Err(Error::domain(format!("smoothing constant must be positive, got {alpha}")));
        }
        let v = tokenizer.vocab_size() + 1;
        for (ctx, row) in &counts {
            if ctx.len() != order - 1 || row.len() != v || ctx.iter().any(|&id| id > v) {
                return Err(Error::config(format!("malformed count row for context {ctx:?}")));
            }
        }
        Ok(Self {
            tokenizer,
            order,
            alpha,
            counts,
        })
    }

    pub fn order(&self) -> usize {
        self.order
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }

    pub fn counts(&self) -> &BTreeMap<Vec<TokenId>, Vec<u64>> {
        &self.counts
    }

    fn key(&self, context: &[TokenId]) -> Vec<TokenId> {
        let k = self.order - 1;
        let pad = k.saturating_sub(context.len());
        let mut key = vec![bos_id(self.vocab_size()); pad];
        key.extend_from_slice(&context[context.len() - (k - pad)..]);
        key
    }
}

impl LanguageModel for CountLM {
    fn tokenizer(&self) -> &Tokenizer {
        &self.tokenizer
    }

    fn log_distribution(&self, context: &[TokenId]) -> Vec<f64> {
        let v = self.vocab_size();
        let denom_of = |total: u64| (total as f64 + self.alpha * v as f64).ln();
        match self.counts.get(&self.key(context)) {
            Some(row) => {
                let denom = denom_of(row.iter().sum());
                row.iter().map(|&c| (c as f64 + self.alpha).ln() - denom).collect()
            }
            None => vec![self.alpha.ln() - denom_of(0); v],
        }
    }
}

mod count_table {
    use std::collections::BTreeMap;

    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    use crate::text::TokenId;

    #[derive(Serialize, Deserialize)]
    #[serde(deny_unknown_fields)]
    struct Row {
        context: Vec<TokenId>,
        counts: Vec<u64>,
    }

    pub fn serialize<S: Serializer>(
        map: &BTreeMap<Vec<TokenId>, Vec<u64>>,
        ser: S,
    ) -> Result<S::Ok, S::Error> {
        let rows: Vec<Row> = map
            .iter()
            .map(|(context, counts)| Row {
                context: context.clone(),
                counts: counts.clone(),
            })
            .collect();
        rows.serialize(ser)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(
        de: D,
    ) -> Result<BTreeMap<Vec<TokenId>, Vec<u64>>, D::Error> {
        let rows = Vec::<Row>::deserialize(de)?;
        Ok(rows.into_iter().map(|r| (r.context, r.counts)).collect())
    }
}
