use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use super::{CountLM, GrammarSpec, LanguageModel, MarkovLM, NeuralConfig, TinyNeuralLM, UniformLM};
use crate::error::{Error, Result};
use crate::text::{TokenId, Tokenizer};

pub const CHECKPOINT_VERSION: u32 = 1;

/// Any built-in model, as stored in a checkpoint file.
#[derive(Clone, Debug, PartialEq)]
pub enum Model {
    Count(CountLM),
    Neural(TinyNeuralLM),
    Grammar(MarkovLM),
    Uniform(UniformLM),
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawCheckpoint {
    version: u32,
    kind: String,
    tokenizer: Tokenizer,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    params: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    counts: Option<Vec<CountRow>>,
    config: Value,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct CountRow {
    context: Vec<TokenId>,
    counts: Vec<u64>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct CountConfig {
    order: usize,
    alpha: f64,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct UniformConfig {
    with_eos: bool,
}

impl Model {
    pub fn kind(&self) -> &'static str {
        match self {
            Model::Count(_) => "count",
            Model::Neural(_) => "neural",
            Model::Grammar(_) => "grammar",
            Model::Uniform(_) => "uniform",
        }
    }

    pub fn as_neural(&self) -> Option<&TinyNeuralLM> {
        match self {
            Model::Neural(m) => Some(m),
            _ => None,
        }
    }

    pub fn into_neural(self) -> Result<TinyNeuralLM> {
        match self {
            Model::Neural(m) => Ok(m),
            other => Err(Error::config(format!(
                "expected a neural model, found kind {:?}",
                other.kind()
            ))),
        }
    }

    fn inner(&self) -> &dyn LanguageModel {
        match self {
            Model::Count(m) => m,
            Model::Neural(m) => m,
            Model::Grammar(m) => m,
            Model::Uniform(m) => m,
        }
    }

    pub fn to_json(&self) -> Result<String> {
        let raw = match self {
            Model::Count(m) => RawCheckpoint {
                version: CHECKPOINT_VERSION,
                kind: self.kind().into(),
                tokenizer: m.tokenizer().clone(),
                params: None,
                counts: Some(
                    m.counts()
                        .iter()
                        .map(|(context, counts)| CountRow {
                            context: context.clone(),
                            counts: counts.clone(),
                        })
                        .collect(),
                ),
                config: serde_json::to_value(CountConfig {
                    order: m.order(),
                    alpha: m.alpha(),
                })?,
            },
            Model::Neural(m) => RawCheckpoint {
                version: CHECKPOINT_VERSION,
                kind: self.kind().into(),
                tokenizer: m.tokenizer().clone(),
                params: Some(m.params().to_vec()),
                counts: None,
                config: serde_json::to_value(m.config())?,
            },
            Model::Grammar(m) => RawCheckpoint {
                version: CHECKPOINT_VERSION,
                kind: self.kind().into(),
                tokenizer: m.tokenizer().clone(),
                params: None,
                counts: None,
                config: serde_json::to_value(m.spec())?,
            },
            Model::Uniform(m) => RawCheckpoint {
                version: CHECKPOINT_VERSION,
                kind: self.kind().into(),
                tokenizer: m.tokenizer().clone(),
                params: None,
                counts: None,
                config: serde_json::to_value(UniformConfig {
                    with_eos: m.eos().is_some(),
                })?,
            },
        };
        Ok(serde_json::to_string(&raw)?)
    }

    pub fn from_json(json: &str) -> Result<Self> {
        let raw: RawCheckpoint = serde_json::from_str(json)?;
        if raw.version != CHECKPOINT_VERSION {
            return Err(Error::config(format!(
                "unsupported checkpoint version {} (expected {CHECKPOINT_VERSION})",
                raw.version
            )));
        }
        let unexpected = |field: &str| Error::config(format!("field {field:?} not allowed for kind {:?}", raw.kind));
        match raw.kind.as_str() {
            "count" => {
                if raw.params.is_some() {
                    return Err(unexpected("params"));
                }
                let cfg: CountConfig = serde_json::from_value(raw.config)?;
                let counts: BTreeMap<_, _> = raw
                    .counts
                    .ok_or_else(|| Error::config("count checkpoint without counts"))?
                    .into_iter()
                    .map(|r| (r.context, r.counts))
                    .collect();
                Ok(Model::Count(CountLM::from_counts(raw.tokenizer, cfg.order, cfg.alpha, counts)?))
            }
            "neural" => {
                if raw.counts.is_some() {
                    return Err(unexpected("counts"));
                }
                let cfg: NeuralConfig = serde_json::from_value(raw.config)?;
                let params = raw
                    .params
                    .ok_or_else(|| Error::config("neural checkpoint without params"))?;
                Ok(Model::Neural(TinyNeuralLM::from_params(raw.tokenizer, cfg, params)?))
            }
            "grammar" => {
                if raw.params.is_some() || raw.counts.is_some() {
                    return Err(unexpected("params/counts"));
                }
                let spec: GrammarSpec = serde_json::from_value(raw.config)?;
                let m = MarkovLM::new(spec)?;
                if m.tokenizer() != &raw.tokenizer {
                    return Err(Error::config("grammar tokenizer does not match its alphabet"));
                }
                Ok(Model::Grammar(m))
            }
            "uniform" => {
                let cfg: UniformConfig = serde_json::from_value(raw.config)?;
                Ok(Model::Uniform(UniformLM::new(raw.tokenizer, cfg.with_eos)))
            }
            other => Err(Error::config(format!("unknown model kind {other:?}"))),
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let json = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&json)
    }
}

impl LanguageModel for Model {
    fn tokenizer(&self) -> &Tokenizer {
        self.inner().tokenizer()
    }
    fn vocab_size(&self) -> usize {
        self.inner().vocab_size()
    }
    fn eos(&self) -> Option<TokenId> {
        self.inner().eos()
    }
    fn log_distribution(&self, context: &[TokenId]) -> Vec<f64> {
        self.inner().log_distribution(context)
    }
    fn token_logprob(&self, context: &[TokenId], next: TokenId) -> f64 {
        self.inner().token_logprob(context, next)
    }
}

impl From<CountLM> for Model {
    fn from(m: CountLM) -> Self {
        Model::Count(m)
    }
}

impl From<TinyNeuralLM> for Model {
    fn from(m: TinyNeuralLM) -> Self {
        Model::Neural(m)
    }
}

impl From<MarkovLM> for Model {
    fn from(m: MarkovLM) -> Self {
        Model::Grammar(m)
    }
}

impl From<UniformLM> for Model {
    fn from(m: UniformLM) -> Self {
        Model::Uniform(m)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lm::{fit_count_lm, CountOptions};
    use crate::testutil;
    use crate::text::Alphabet;

    fn round_trip(m: Model) {
        let json = m.to_json().unwrap();
        let back = Model::from_json(&json).unwrap();
        assert_eq!(back, m);
        assert_eq!(back.to_json().unwrap(), json);
    }

    #[test]
    fn every_kind_round_trips() {
        let tok = testutil::tokenizer(testutil::verifier_merges());
        let count = fit_count_lm(
            &["unhappiness", "happy"],
            &tok,
            CountOptions { order: 2, alpha: 0.5, append_eos: true },
        )
        .unwrap();
        round_trip(count.into());
        let neural = TinyNeuralLM::new(tok.clone(), NeuralConfig::default()).unwrap();
        round_trip(neural.into());
        round_trip(MarkovLM::new(GrammarSpec::default()).unwrap().into());
        round_trip(UniformLM::new(tok, false).into());
    }

    #[test]
    fn rejects_wrong_version_and_unknown_keys() {
        let m: Model = UniformLM::new(Tokenizer::chars(Alphabet::new("ab").unwrap()), true).into();
        let json = m.to_json().unwrap();
        let v2 = json.replace("\"version\":1", "\"version\":2");
        assert!(Model::from_json(&v2).is_err());
        let extra = json.replacen('{', "{\"extra\":0,", 1);
        assert!(Model::from_json(&extra).is_err());
        let bad_kind = json.replace("\"uniform\"", "\"transformer\"");
        assert!(Model::from_json(&bad_kind).is_err());
    }
}
