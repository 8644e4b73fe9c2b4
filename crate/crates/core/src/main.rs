//! `cme`: command-line front end for alignment, scoring, training, sweeps
//! and exact evaluation.
//!
//! Payloads (JSON or CSV) go to standard output, diagnostics to standard
//! error. Exit codes: 0 success, 2 domain or config error, 3 numerical abort.

use std::fs;
use std::io::{self, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use cme_grpo::align::align;
use cme_grpo::analysis::exact_identity_check;
use cme_grpo::config::{Overrides, RunConfig, SweepConfig};
use cme_grpo::lm::{fit_count_lm, CountOptions, LanguageModel, Model};
use cme_grpo::rewards::{sequence_cme_reward, token_cme_rewards, verifier_loglik, RewardMode, Response};
use cme_grpo::text::{train_merges, Alphabet, MergeTable, Tokenizer, DEFAULT_ALPHABET};
use cme_grpo::trainer::{evaluate, train_with, verifier_sweep, write_sweep_csv, RunWriter};
use cme_grpo::{Error, Result};

#[derive(Parser)]
#[command(name = "cme", version, about = "Cross-model entropy rewards for GRPO on toy language models")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Character-overlap alignment of two segmentations of one text.
    Align {
        #[arg(long)]
        text: String,
        /// `char` or the path of a merge table.
        #[arg(long = "gen-tokenizer", default_value = "char")]
        gen_tokenizer: String,
        #[arg(long = "ver-tokenizer", default_value = "char")]
        ver_tokenizer: String,
        #[arg(long, default_value = DEFAULT_ALPHABET)]
        alphabet: String,
        /// Alphabet of the generator tokenizer, if different.
        #[arg(long = "gen-alphabet")]
        gen_alphabet: Option<String>,
        /// Alphabet of the verifier tokenizer, if different.
        #[arg(long = "ver-alphabet")]
        ver_alphabet: Option<String>,
    },
    /// Verifier rewards of responses, one JSON line per response.
    Score {
        /// Verifier checkpoint.
        #[arg(long)]
        verifier: PathBuf,
        #[arg(long, default_value = "")]
        prompt: String,
        /// Responses to score; repeat for a group.
        #[arg(long = "response", required = true)]
        responses: Vec<String>,
        /// Score the end-of-sequence token after every response.
        #[arg(long)]
        terminated: bool,
        #[arg(long = "reward-mode", default_value = "token")]
        reward_mode: RewardMode,
        /// `char` or the path of a merge table; the alphabet is the verifier's.
        #[arg(long = "gen-tokenizer", default_value = "char")]
        gen_tokenizer: String,
    },
    /// Train a generator against a frozen verifier.
    Train(RunArgs),
    /// Train one generator per verifier and rank the verifiers.
    Sweep(RunArgs),
    /// Evaluate a generator against the configured verifier.
    Eval {
        #[arg(long)]
        config: PathBuf,
        /// Generator checkpoint replacing the configured generator.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Print the exact identity terms per prompt instead of the metrics.
        #[arg(long)]
        exact: bool,
        /// Prompts to evaluate; defaults to the configured training prompts.
        #[arg(long = "prompt")]
        prompts: Vec<String>,
    },
    /// Learn a merge table from a corpus file (one string per line).
    Merges {
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long = "vocab-size")]
        vocab_size: usize,
        #[arg(long, default_value = DEFAULT_ALPHABET)]
        alphabet: String,
        #[arg(long)]
        out: PathBuf,
    },
    /// Fit an n-gram verifier on a corpus file and save it as a checkpoint.
    FitCount {
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long, default_value_t = 2)]
        order: usize,
        #[arg(long, default_value_t = 0.1)]
        alpha: f64,
        #[arg(long, default_value = "char")]
        tokenizer: String,
        #[arg(long, default_value = DEFAULT_ALPHABET)]
        alphabet: String,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Args)]
struct RunArgs {
    #[arg(long)]
    config: PathBuf,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long = "reward-mode")]
    reward_mode: Option<RewardMode>,
    /// Output directory; overrides the config's `output_dir`.
    #[arg(long)]
    out: Option<PathBuf>,
}

impl RunArgs {
    fn overrides(&self) -> Overrides {
        Overrides {
            seed: Some(self.seed),
            steps: self.steps,
            reward_mode: self.reward_mode,
        }
    }

    fn out_dir(&self, configured: Option<&PathBuf>, base: &Path) -> Result<PathBuf> {
        match (&self.out, configured) {
            (Some(out), _) => Ok(out.clone()),
            (None, Some(dir)) if dir.is_absolute() => Ok(dir.clone()),
            (None, Some(dir)) => Ok(base.join(dir)),
            (None, None) => Err(Error::Config("no output directory: pass --out or set output_dir".into())),
        }
    }
}

fn tokenizer_from_arg(spec: &str, alphabet: Alphabet) -> Result<Tokenizer> {
    if spec == "char" {
        Ok(Tokenizer::chars(alphabet))
    } else {
        Tokenizer::new(alphabet, MergeTable::read(Path::new(spec))?)
    }
}

fn read_lines(path: &Path) -> Result<Vec<String>> {
    let text = fs::read_to_string(path).map_err(|source| Error::Io { path: path.into(), source })?;
    Ok(text.lines().filter(|l| !l.is_empty()).map(str::to_string).collect())
}

fn print_json<T: serde::Serialize>(value: &T) -> Result<()> {
    let mut out = io::stdout().lock();
    serde_json::to_writer(&mut out, value)?;
    writeln!(out).map_err(|source| Error::Io { path: "<stdout>".into(), source })
}

fn cmd_align(
    text: &str,
    gen_spec: &str,
    ver_spec: &str,
    alphabet: &str,
    gen_alphabet: Option<&str>,
    ver_alphabet: Option<&str>,
) -> Result<()> {
    let gen_alpha = Alphabet::new(gen_alphabet.unwrap_or(alphabet))?;
    let ver_alpha = Alphabet::new(ver_alphabet.unwrap_or(alphabet))?;
    if gen_alpha != ver_alpha {
        return Err(Error::Domain("generator and verifier alphabets differ".into()));
    }
    let gen = tokenizer_from_arg(gen_spec, gen_alpha)?.encode(text)?;
    let ver = tokenizer_from_arg(ver_spec, ver_alpha)?.encode(text)?;
    println!("{}", align(&gen, &ver)?.to_json());
    Ok(())
}

#[derive(serde::Serialize)]
struct ScoreLine {
    response_index: usize,
    rewards: Vec<f64>,
    mask: Vec<bool>,
    total: f64,
}

fn cmd_score(
    verifier: &Path,
    prompt: &str,
    responses: &[String],
    terminated: bool,
    mode: RewardMode,
    gen_spec: &str,
) -> Result<()> {
    let verifier = Model::load(verifier)?;
    let responses: Vec<Response> = responses
        .iter()
        .map(|text| Response { text: text.clone(), terminated })
        .collect();
    let lines: Vec<ScoreLine> = match mode {
        RewardMode::Token => {
            let gen_tok = tokenizer_from_arg(gen_spec, verifier.tokenizer().alphabet().clone())?;
            let m = token_cme_rewards(prompt, &responses, &gen_tok, &verifier)?;
            (0..m.rows())
                .map(|i| ScoreLine {
                    response_index: i,
                    rewards: m.row(i).to_vec(),
                    mask: m.row_mask(i).to_vec(),
                    total: m.totals()[i],
                })
                .collect()
        }
        RewardMode::Sequence => responses
            .iter()
            .enumerate()
            .map(|(i, r)| {
                Ok(ScoreLine {
                    response_index: i,
                    rewards: vec![sequence_cme_reward(prompt, r, &verifier)?],
                    mask: vec![true],
                    total: verifier_loglik(prompt, r, &verifier)?,
                })
            })
            .collect::<Result<_>>()?,
    };
    for line in &lines {
        print_json(line)?;
    }
    Ok(())
}

fn cmd_train(args: &RunArgs) -> Result<()> {
    let (mut cfg, base) = RunConfig::load(&args.config)?;
    args.overrides().apply(&mut cfg.train);
    cfg.train.validate()?;
    let out = args.out_dir(cfg.output_dir.as_ref(), &base)?;
    let models = cfg.build(&base)?;

    let writer = RunWriter::create(&out)?;
    writer.write_json("config.json", &cfg)?;
    let mut records = Vec::new();
    let mut on_record = |record: &cme_grpo::trainer::MetricsRecord, policy: &cme_grpo::lm::TinyNeuralLM| {
        records.push(record.clone());
        cme_grpo::trainer::write_metrics_csv(&out.join("metrics.csv"), &records)?;
        writer.write_checkpoint(record.step, &Model::Neural(policy.clone()))
    };
    let result = train_with(&models.generator, &models.verifiers, Some(&models.gold), &cfg.train, &mut on_record);
    match result {
        Ok(run) => writer.write_metrics(&run.metrics, &run.wall_clock),
        Err(Error::NonFinite { step, diagnostic }) => {
            let path = out.join("diagnostic.json");
            fs::write(&path, format!("{diagnostic}\n")).map_err(|source| Error::Io { path, source })?;
            Err(Error::NonFinite { step, diagnostic })
        }
        Err(e) => Err(e),
    }
}

fn check_condition_name(name: &str) -> Result<()> {
    let ok = !name.is_empty()
        && name != "."
        && name != ".."
        && name.chars().all(|c| c.is_ascii_alphanumeric() || "-_.".contains(c));
    if ok {
        Ok(())
    } else {
        Err(Error::Config(format!(
            "verifier name {name:?} must be non-empty and use only letters, digits, '-', '_' or '.'"
        )))
    }
}

fn cmd_sweep(args: &RunArgs) -> Result<()> {
    let (mut cfg, base) = SweepConfig::load(&args.config)?;
    args.overrides().apply(&mut cfg.train);
    cfg.train.validate()?;
    for v in &cfg.verifiers {
        check_condition_name(&v.name)?;
    }
    let out = args.out_dir(cfg.output_dir.as_ref(), &base)?;
    let models = cfg.build(&base)?;

    let sweep = verifier_sweep(&models.generator, &models.verifiers, &models.gold, &cfg.train)?;
    let writer = RunWriter::create(&out)?;
    writer.write_json("config.json", &cfg)?;
    write_sweep_csv(&out.join("sweep.csv"), &sweep.rows)?;
    for (name, run) in &sweep.runs {
        let w = RunWriter::create(&out.join("conditions").join(name))?;
        w.write_metrics(&run.metrics, &run.wall_clock)?;
        w.write_checkpoint(cfg.train.steps, &Model::Neural(run.model.clone()))?;
    }
    Ok(())
}

fn cmd_eval(config: &Path, checkpoint: Option<&Path>, exact: bool, prompts: &[String]) -> Result<()> {
    let (cfg, base) = RunConfig::load(config)?;
    let models = cfg.build(&base)?;
    let generator = match checkpoint {
        Some(path) => Model::load(path)?.into_neural()?,
        None => models.generator,
    };
    let prompts = if prompts.is_empty() { &cfg.train.prompts } else { prompts };
    let max_len = cfg.train.sampler.max_len;
    if exact {
        #[derive(serde::Serialize)]
        struct Line<'a> {
            prompt: &'a str,
            #[serde(flatten)]
            check: cme_grpo::analysis::IdentityCheck,
        }
        for prompt in prompts {
            let check = exact_identity_check(&generator, &models.verifiers, prompt, max_len, cfg.train.eval.budget)?;
            print_json(&Line { prompt, check })?;
        }
        return Ok(());
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.train.sampler.seed);
    let metrics = evaluate(
        &generator,
        &models.verifiers,
        Some(&models.gold),
        prompts,
        &cfg.train.sampler,
        &cfg.train.eval,
        &mut rng,
    )?;
    print_json(&metrics)
}

fn cmd_merges(corpus: &Path, vocab_size: usize, alphabet: &str, out: &Path) -> Result<()> {
    let table = train_merges(&read_lines(corpus)?, &Alphabet::new(alphabet)?, vocab_size)?;
    table.write(out)
}

fn cmd_fit_count(corpus: &Path, order: usize, alpha: f64, tokenizer: &str, alphabet: &str, out: &Path) -> Result<()> {
    let tok = tokenizer_from_arg(tokenizer, Alphabet::new(alphabet)?)?;
    let model = fit_count_lm(&read_lines(corpus)?, &tok, CountOptions { order, alpha, append_eos: true })?;
    Model::Count(model).save(out)
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Align {
            text,
            gen_tokenizer,
            ver_tokenizer,
            alphabet,
            gen_alphabet,
            ver_alphabet,
        } => cmd_align(
            &text,
            &gen_tokenizer,
            &ver_tokenizer,
            &alphabet,
            gen_alphabet.as_deref(),
            ver_alphabet.as_deref(),
        ),
        Command::Score {
            verifier,
            prompt,
            responses,
            terminated,
            reward_mode,
            gen_tokenizer,
        } => cmd_score(&verifier, &prompt, &responses, terminated, reward_mode, &gen_tokenizer),
        Command::Train(args) => cmd_train(&args),
        Command::Sweep(args) => cmd_sweep(&args),
        Command::Eval {
            config,
            checkpoint,
            exact,
            prompts,
        } => cmd_eval(&config, checkpoint.as_deref(), exact, &prompts),
        Command::Merges {
            corpus,
            vocab_size,
            alphabet,
            out,
        } => cmd_merges(&corpus, vocab_size, &alphabet, &out),
        Command::FitCount {
            corpus,
            order,
            alpha,
            tokenizer,
            alphabet,
            out,
        } => cmd_fit_count(&corpus, order, alpha, &tokenizer, &alphabet, &out),
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
