//! Run configuration files for the `train`, `sweep` and `eval` commands.
//!
//! Relative paths inside a config resolve against the config file's
//! directory. Unknown keys are rejected.
//!
//! ```json
//! {
//!   "grammar": { "alphabet": "abcd", "transitions": { ... }, "smoothing": 0.02 },
//!   "generator": { "kind": "neural", "config": { "window": 3, "embed_dim": 8, "hidden": 32, "init_scale": 0.1, "seed": 0 } },
//!   "verifier": { "kind": "count", "corpus_size": 500, "corpus_seed": 1, "order": 2, "alpha": 0.1 },
//!   "train": { "reward_mode": "token", "prompts": ["a", "b"], "steps": 500 },
//!   "output_dir": "runs/gold"
//! }
//! ```

use std::fs;
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lm::{
    fit_count_lm, sample_corpus, CountOptions, GrammarSpec, LanguageModel, MarkovLM, Model, NeuralConfig,
    TinyNeuralLM, UniformLM,
};
use crate::rewards::RewardMode;
use crate::text::{train_merges, MergeTable, Tokenizer};
use crate::trainer::{SweepCondition, TrainConfig};

/// How a model segments text. The alphabet is always the grammar's.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum TokenizerSpec {
    /// One token per character.
    #[default]
    Char,
    /// Merge table read from a file of tab-separated pairs.
    Merges { path: PathBuf },
    /// Merges learned from the model's own training corpus.
    Trained { vocab_size: usize },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum GeneratorSpec {
    Neural {
        #[serde(default)]
        config: NeuralConfig,
        #[serde(default)]
        tokenizer: TokenizerSpec,
    },
    Checkpoint { path: PathBuf },
}

impl Default for GeneratorSpec {
    fn default() -> Self {
        GeneratorSpec::Neural {
            config: NeuralConfig::default(),
            tokenizer: TokenizerSpec::Char,
        }
    }
}

fn default_corpus_max_len() -> usize {
    16
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum VerifierSpec {
    /// The gold grammar itself.
    Gold {},
    /// N-gram model fit on strings sampled from the gold grammar.
    Count {
        corpus_size: usize,
        corpus_seed: u64,
        #[serde(default = "default_corpus_max_len")]
        corpus_max_len: usize,
        order: usize,
        alpha: f64,
        #[serde(default)]
        tokenizer: TokenizerSpec,
    },
    /// Randomly initialized neural model (never trained).
    Neural {
        #[serde(default)]
        config: NeuralConfig,
        #[serde(default)]
        tokenizer: TokenizerSpec,
    },
    Uniform {
        #[serde(default)]
        tokenizer: TokenizerSpec,
    },
    Checkpoint { path: PathBuf },
}

/// A sweep condition.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NamedVerifier {
    pub name: String,
    pub verifier: VerifierSpec,
}

/// Config of a single training run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default)]
    pub grammar: GrammarSpec,
    #[serde(default)]
    pub generator: GeneratorSpec,
    pub verifier: VerifierSpec,
    pub train: TrainConfig,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub output_dir: Option<PathBuf>,
}

/// Config of a verifier sweep: one training run per verifier.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepConfig {
    #[serde(default)]
    pub grammar: GrammarSpec,
    #[serde(default)]
    pub generator: GeneratorSpec,
    pub verifiers: Vec<NamedVerifier>,
    pub train: TrainConfig,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub output_dir: Option<PathBuf>,
}

/// Command-line overrides applied on top of a config file.
#[derive(Clone, Copy, Debug, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub steps: Option<usize>,
    pub reward_mode: Option<RewardMode>,
}

impl Overrides {
    pub fn apply(&self, cfg: &mut TrainConfig) {
        if let Some(seed) = self.seed {
            cfg.sampler.seed = seed;
        }
        if let Some(steps) = self.steps {
            cfg.steps = steps;
        }
        if let Some(mode) = self.reward_mode {
            cfg.reward_mode = mode;
        }
    }
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::config(format!("{}: {e}", path.display())))
}

fn base_dir(path: &Path) -> PathBuf {
    path.parent().map(Path::to_path_buf).unwrap_or_default()
}

fn resolve(base: &Path, path: &Path) -> PathBuf {
    if path.is_absolute() {
        path.to_path_buf()
    } else {
        base.join(path)
    }
}

/// Models built from a config, ready for training.
pub struct Resolved<V> {
    pub gold: MarkovLM,
    pub generator: TinyNeuralLM,
    pub verifiers: V,
}

struct Builder<'a> {
    base: &'a Path,
    gold: MarkovLM,
}

impl Builder<'_> {
    fn tokenizer(&self, spec: &TokenizerSpec, corpus: Option<&[String]>) -> Result<Tokenizer> {
        let alphabet = self.gold.tokenizer().alphabet().clone();
        match spec {
            TokenizerSpec::Char => Ok(Tokenizer::chars(alphabet)),
            TokenizerSpec::Merges { path } => {
                Tokenizer::new(alphabet, MergeTable::read(&resolve(self.base, path))?)
            }
            TokenizerSpec::Trained { vocab_size } => {
                let corpus = corpus.ok_or_else(|| {
                    Error::config("a trained tokenizer is only available for count verifiers")
                })?;
                Tokenizer::new(alphabet.clone(), train_merges(corpus, &alphabet, *vocab_size)?)
            }
        }
    }

    fn generator(&self, spec: &GeneratorSpec) -> Result<TinyNeuralLM> {
        match spec {
            GeneratorSpec::Neural { config, tokenizer } => {
                TinyNeuralLM::new(self.tokenizer(tokenizer, None)?, *config)
            }
            GeneratorSpec::Checkpoint { path } => Model::load(&resolve(self.base, path))?.into_neural(),
        }
    }

    fn verifier(&self, spec: &VerifierSpec) -> Result<Model> {
        Ok(match spec {
            VerifierSpec::Gold {} => Model::Grammar(self.gold.clone()),
            VerifierSpec::Count {
                corpus_size,
                corpus_seed,
                corpus_max_len,
                order,
                alpha,
                tokenizer,
            } => {
                if *corpus_size == 0 {
                    return Err(Error::config("corpus_size must be positive"));
                }
                let mut rng = ChaCha8Rng::seed_from_u64(*corpus_seed);
                let corpus = sample_corpus(&self.gold, *corpus_size, *corpus_max_len, &mut rng)?;
                let tok = self.tokenizer(tokenizer, Some(&corpus))?;
                let opts = CountOptions { order: *order, alpha: *alpha, append_eos: true };
                Model::Count(fit_count_lm(&corpus, &tok, opts)?)
            }
            VerifierSpec::Neural { config, tokenizer } => {
                Model::Neural(TinyNeuralLM::new(self.tokenizer(tokenizer, None)?, *config)?)
            }
            VerifierSpec::Uniform { tokenizer } => {
                Model::Uniform(UniformLM::new(self.tokenizer(tokenizer, None)?, true))
            }
            VerifierSpec::Checkpoint { path } => Model::load(&resolve(self.base, path))?,
        })
    }
}

impl RunConfig {
    /// Reads and validates a config; nothing is written.
    pub fn load(path: &Path) -> Result<(Self, PathBuf)> {
        let cfg: Self = read_json(path)?;
        cfg.train.validate()?;
        Ok((cfg, base_dir(path)))
    }

    pub fn build(&self, base: &Path) -> Result<Resolved<Model>> {
        let b = Builder { base, gold: MarkovLM::new(self.grammar.clone())? };
        let generator = b.generator(&self.generator)?;
        let verifier = b.verifier(&self.verifier)?;
        Ok(Resolved { gold: b.gold, generator, verifiers: verifier })
    }
}

impl SweepConfig {
    pub fn load(path: &Path) -> Result<(Self, PathBuf)> {
        let cfg: Self = read_json(path)?;
        cfg.train.validate()?;
        if cfg.verifiers.is_empty() {
            return Err(Error::config("a sweep needs at least one verifier"));
        }
        Ok((cfg, base_dir(path)))
    }

    pub fn build(&self, base: &Path) -> Result<Resolved<Vec<SweepCondition>>> {
        let b = Builder { base, gold: MarkovLM::new(self.grammar.clone())? };
        let generator = b.generator(&self.generator)?;
        let verifiers = self
            .verifiers
            .iter()
            .map(|v| {
                Ok(SweepCondition {
                    name: v.name.clone(),
                    verifier: b.verifier(&v.verifier)?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Resolved { gold: b.gold, generator, verifiers })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = r#"{
        "verifier": { "kind": "count", "corpus_size": 20, "corpus_seed": 3, "order": 2, "alpha": 0.5 },
        "train": { "reward_mode": "sequence", "prompts": ["a"], "steps": 2 }
    }"#;

    #[test]
    fn minimal_config_gets_defaults() {
        let cfg: RunConfig = serde_json::from_str(MINIMAL).unwrap();
        assert_eq!(cfg.grammar, GrammarSpec::default());
        assert_eq!(cfg.train.grpo.group_size, 8);
        assert_eq!(cfg.train.optimizer.lr, 0.05);
        let r = cfg.build(Path::new(".")).unwrap();
        assert_eq!(r.verifiers.kind(), "count");
        assert_eq!(r.generator.tokenizer(), r.gold.tokenizer());
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let bad = MINIMAL.replace("\"steps\": 2", "\"steps\": 2, \"stpes\": 3");
        assert!(serde_json::from_str::<RunConfig>(&bad).is_err());
        let bad = MINIMAL.replace("\"alpha\": 0.5", "\"alpha\": 0.5, \"extra\": 1");
        assert!(serde_json::from_str::<RunConfig>(&bad).is_err());
    }

    #[test]
    fn named_verifiers_reject_unknown_keys() {
        let ok = r#"{ "name": "g", "verifier": { "kind": "gold" } }"#;
        let v: NamedVerifier = serde_json::from_str(ok).unwrap();
        assert_eq!(v.verifier, VerifierSpec::Gold {});
        let bad = r#"{ "name": "g", "verifier": { "kind": "gold", "extra": 1 } }"#;
        assert!(serde_json::from_str::<NamedVerifier>(bad).is_err());
        let bad = r#"{ "name": "g", "verifier": { "kind": "gold" }, "extra": 1 }"#;
        assert!(serde_json::from_str::<NamedVerifier>(bad).is_err());
    }

    #[test]
    fn corpus_is_reproducible() {
        let cfg: RunConfig = serde_json::from_str(MINIMAL).unwrap();
        let a = cfg.build(Path::new(".")).unwrap().verifiers;
        let b = cfg.build(Path::new(".")).unwrap().verifiers;
        assert_eq!(a, b);
    }

    #[test]
    fn trained_tokenizer_for_count_verifier() {
        let spec = VerifierSpec::Count {
            corpus_size: 50,
            corpus_seed: 1,
            corpus_max_len: 16,
            order: 2,
            alpha: 0.1,
            tokenizer: TokenizerSpec::Trained { vocab_size: 8 },
        };
        let b = Builder { base: Path::new("."), gold: MarkovLM::new(GrammarSpec::default()).unwrap() };
        let v = b.verifier(&spec).unwrap();
        assert_eq!(v.tokenizer().vocab_size(), 8);
        let neural = VerifierSpec::Neural {
            config: NeuralConfig::default(),
            tokenizer: TokenizerSpec::Trained { vocab_size: 8 },
        };
        assert!(b.verifier(&neural).is_err());
    }

    #[test]
    fn overrides_replace_fields() {
        let mut cfg: RunConfig = serde_json::from_str(MINIMAL).unwrap();
        Overrides { seed: Some(9), steps: Some(0), reward_mode: Some(RewardMode::Token) }.apply(&mut cfg.train);
        assert_eq!(cfg.train.sampler.seed, 9);
        assert_eq!(cfg.train.steps, 0);
        assert_eq!(cfg.train.reward_mode, RewardMode::Token);
    }
}
