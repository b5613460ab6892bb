//! Command-line driver: pretrain, bayesianize, finetune, generate, evaluate
//! and the alpha sweep.
//!
//! Exit codes: 0 success, 1 bad input or configuration, 2 runtime failure
//! (divergence, oracle failure, every sweep entry failing).

use std::fs;
use std::io::{self, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde::de::DeserializeOwned;
use serde::Serialize;

use bodeb::checkpoint;
use bodeb::data::{load_corpus, write_corpus, DialogueSample};
use bodeb::generation::{generate_batch, read_records, write_records, DecodeConfig};
use bodeb::metrics::{evaluate_corpus, EntailmentOracle, EvalRecord, MetricConfig, ProcessOracle, StubOracle};
use bodeb::model::{parameter_report, LayerBayesFlags, MleCheckpoint, ModelConfig};
use bodeb::parallel::init_thread_pool_from_env;
use bodeb::pipeline::{contexts_of, sweep_alpha, write_sweep_csv, ExperimentConfig};
use bodeb::schedule::{bayesianize, ScheduleConfig, ScheduleKind};
use bodeb::toy::toy_corpus;
use bodeb::training::{finetune, pretrain_deterministic, TrainConfig};
use bodeb::{Error, Real};

#[derive(Parser)]
#[command(name = "bodeb", version, about = "Empirical-Bayes Bayesian transformer for dialogue")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a deterministic model from scratch and write an MLE checkpoint.
    Pretrain {
        #[arg(long)]
        corpus: PathBuf,
        /// JSON model config; the vocabulary size is always taken from the corpus.
        #[arg(long)]
        model_config: Option<PathBuf>,
        #[arg(long)]
        train_config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Overrides the training config's seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Per-step training log (JSON lines).
        #[arg(long)]
        log: Option<PathBuf>,
    },
    /// Turn an MLE checkpoint into a Bayesian one.
    Bayesianize {
        #[arg(long)]
        mle: PathBuf,
        #[command(flatten)]
        schedule: ScheduleArgs,
        #[arg(long)]
        out: PathBuf,
    },
    /// Optimize a (possibly Bayesian) checkpoint on a corpus.
    Finetune {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        train_config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        log: Option<PathBuf>,
    },
    /// Generate one response per context.
    Generate {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Corpus-format file; the last utterance of every dialogue is dropped.
        #[arg(long)]
        contexts: PathBuf,
        #[arg(long)]
        decode_config: Option<PathBuf>,
        /// Overrides the decode config's seed.
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Score a generations file.
    Evaluate {
        #[arg(long)]
        generations: PathBuf,
        /// Replaces the contexts stored in the generations file, which must
        /// then hold exactly one record per dialogue.
        #[arg(long)]
        contexts: Option<PathBuf>,
        #[arg(long)]
        metric_config: Option<PathBuf>,
        #[command(flatten)]
        oracle: OracleArgs,
        #[arg(long)]
        out: PathBuf,
    },
    /// Bayesianize, finetune, generate and evaluate once per alpha.
    SweepAlpha {
        #[arg(long)]
        mle: PathBuf,
        #[arg(long)]
        corpus: PathBuf,
        /// Evaluation contexts; defaults to the first 100 dialogues of the corpus.
        #[arg(long)]
        contexts: Option<PathBuf>,
        #[arg(long, value_delimiter = ',', default_value = "0,0.01,0.05,0.1,0.5")]
        alphas: Vec<f64>,
        #[command(flatten)]
        schedule: ScheduleArgs,
        #[arg(long)]
        train_config: Option<PathBuf>,
        #[arg(long)]
        decode_config: Option<PathBuf>,
        #[arg(long)]
        metric_config: Option<PathBuf>,
        #[command(flatten)]
        oracle: OracleArgs,
        #[arg(long)]
        out_dir: PathBuf,
    },
    /// Serve the lexical stub oracle over stdin/stdout.
    StubOracle,
    /// Write the synthetic template corpus.
    MakeCorpus {
        #[arg(long, default_value_t = 500)]
        n: usize,
        #[arg(long, default_value_t = 1)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Args)]
struct ScheduleArgs {
    #[arg(long, default_value = "bodeb-m")]
    schedule: ScheduleKind,
    #[arg(long, default_value_t = 0.05)]
    alpha: f64,
    #[arg(long, default_value_t = 0.5)]
    eta: f64,
    #[arg(long, default_value_t = 1e-6)]
    sigma_floor: f64,
    /// MOPED scale; defaults to alpha.
    #[arg(long)]
    moped_delta: Option<f64>,
    /// Comma-separated edits of the default selection, e.g. `default,-attn,+proj`.
    #[arg(long, default_value = "default")]
    flags: String,
}

impl ScheduleArgs {
    fn resolve(&self) -> Result<(ScheduleConfig, LayerBayesFlags), Error> {
        let cfg = ScheduleConfig {
            kind: self.schedule,
            alpha: self.alpha,
            eta: self.eta,
            sigma_floor: self.sigma_floor,
            moped_delta: self.moped_delta,
        };
        cfg.validate()?;
        Ok((cfg, LayerBayesFlags::parse(&self.flags)?))
    }
}

#[derive(Args)]
struct OracleArgs {
    /// Entailment classifier speaking JSON lines on stdin/stdout.
    #[arg(long, conflicts_with = "stub_oracle")]
    oracle_cmd: Option<String>,
    /// Score UE with the in-process lexical stub.
    #[arg(long)]
    stub_oracle: bool,
}

impl OracleArgs {
    fn open(&self) -> Result<Option<Box<dyn EntailmentOracle>>, Error> {
        if let Some(cmd) = &self.oracle_cmd {
            return Ok(Some(Box::new(ProcessOracle::spawn(cmd)?)));
        }
        Ok(self.stub_oracle.then(|| Box::new(StubOracle) as Box<dyn EntailmentOracle>))
    }
}

fn parse_json<T: DeserializeOwned>(path: &Path) -> Result<T, Error> {
    let text = fs::read_to_string(path)?;
    serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
}

/// The file's contents, or `T::default()` when no file was given.
fn read_json<T: DeserializeOwned + Default>(path: Option<&Path>) -> Result<T, Error> {
    path.map_or_else(|| Ok(T::default()), parse_json)
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<(), Error> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text)?;
    Ok(())
}

fn read_contexts(path: &Path) -> Result<Vec<Vec<String>>, Error> {
    let corpus = load_corpus(path)?;
    Ok(corpus.iter().map(|s| s.context().to_vec()).collect())
}

/// Runs one command and returns its exit code.
fn run(command: Command) -> Result<u8, Error> {
    match command {
        Command::Pretrain {
            corpus,
            model_config,
            train_config,
            out,
            seed,
            log,
        } => {
            let corpus = load_corpus(&corpus)?;
            let model_cfg = match model_config {
                Some(p) => parse_json::<ModelConfig>(&p)?,
                None => ModelConfig::toy(0),
            };
            let mut train_cfg: TrainConfig = read_json(train_config.as_deref())?;
            if let Some(s) = seed {
                train_cfg.seed = s;
            }
            let (mle, train_log) = pretrain_deterministic::<Real>(&corpus, &model_cfg, &train_cfg)?;
            checkpoint::save(mle.params(), &out)?;
            if let Some(p) = log {
                train_log.write_jsonl(&p)?;
            }
            println!("final loss: {}", train_log.final_loss().unwrap_or(f64::NAN));
        }
        Command::Bayesianize { mle, schedule, out } => {
            let (cfg, flags) = schedule.resolve()?;
            let mle = MleCheckpoint::new(checkpoint::load::<Real>(&mle)?)?;
            let params = bayesianize(&mle, &flags, &cfg)?;
            checkpoint::save(&params, &out)?;
            print!("{}", parameter_report(&params));
        }
        Command::Finetune {
            checkpoint: ckpt,
            corpus,
            train_config,
            out,
            log,
        } => {
            let train_cfg: TrainConfig = read_json(train_config.as_deref())?;
            let params = checkpoint::load::<Real>(&ckpt)?;
            let corpus = load_corpus(&corpus)?;
            let (tuned, train_log) = finetune(&params, &corpus, &train_cfg)?;
            checkpoint::save(&tuned, &out)?;
            if let Some(p) = log {
                train_log.write_jsonl(&p)?;
            }
            for e in &train_log.epochs {
                eprintln!(
                    "epoch {}: loss {:.6} nll {:.6} kl {:.3}",
                    e.epoch, e.mean_loss, e.mean_nll, e.mean_kl_total
                );
            }
            println!("final loss: {}", train_log.final_loss().unwrap_or(f64::NAN));
        }
        Command::Generate {
            checkpoint: ckpt,
            contexts,
            decode_config,
            seed,
            out,
        } => {
            let mut cfg: DecodeConfig = read_json(decode_config.as_deref())?;
            if let Some(s) = seed {
                cfg.seed = s;
            }
            cfg.validate()?;
            let params = checkpoint::load::<Real>(&ckpt)?;
            let contexts = read_contexts(&contexts)?;
            let records = generate_batch(&params, &contexts, &cfg)?;
            write_records(&out, &records)?;
        }
        Command::Evaluate {
            generations,
            contexts,
            metric_config,
            oracle,
            out,
        } => {
            let cfg: MetricConfig = read_json(metric_config.as_deref())?;
            cfg.validate()?;
            let mut records: Vec<EvalRecord> = read_records(&generations)?
                .into_iter()
                .map(|r| EvalRecord {
                    context: r.context,
                    response: r.response,
                })
                .collect();
            if let Some(p) = contexts {
                let contexts = read_contexts(&p)?;
                if contexts.len() != records.len() {
                    return Err(Error::InvalidArgument(format!(
                        "{} contexts for {} generations",
                        contexts.len(),
                        records.len()
                    )));
                }
                for (r, c) in records.iter_mut().zip(contexts) {
                    r.context = c;
                }
            }
            let oracle = oracle.open()?;
            let report = evaluate_corpus(&records, &cfg, oracle.as_deref())?;
            write_json(&out, &report)?;
        }
        Command::SweepAlpha {
            mle,
            corpus,
            contexts,
            alphas,
            schedule,
            train_config,
            decode_config,
            metric_config,
            oracle,
            out_dir,
        } => {
            if alphas.is_empty() {
                return Err(Error::InvalidArgument("--alphas is empty".into()));
            }
            let (schedule_cfg, flags) = schedule.resolve()?;
            let base = ExperimentConfig {
                flags,
                schedule: schedule_cfg,
                train: read_json(train_config.as_deref())?,
                decode: read_json(decode_config.as_deref())?,
                metrics: read_json(metric_config.as_deref())?,
            };
            base.train.validate()?;
            base.decode.validate()?;
            base.metrics.validate()?;
            let mle = MleCheckpoint::new(checkpoint::load::<Real>(&mle)?)?;
            let corpus: Vec<DialogueSample> = load_corpus(&corpus)?;
            let contexts = match contexts {
                Some(p) => read_contexts(&p)?,
                None => contexts_of(&corpus, 100),
            };
            let oracle = oracle.open()?;
            fs::create_dir_all(&out_dir)?;
            let entries = sweep_alpha(&mle, &corpus, &contexts, &alphas, &base, oracle.as_deref());
            for e in &entries {
                match &e.report {
                    Ok(r) => write_json(&out_dir.join(format!("report_alpha_{}.json", e.alpha)), r)?,
                    Err(err) => eprintln!("alpha {}: {err}", e.alpha),
                }
            }
            write_sweep_csv(&out_dir.join("sweep.csv"), &entries)?;
            if entries.iter().all(|e| e.report.is_err()) {
                eprintln!("error: every alpha in the sweep failed");
                return Ok(2);
            }
        }
        Command::StubOracle => {
            let stdin = io::stdin();
            bodeb::metrics::serve_stub(stdin.lock(), io::stdout().lock())?;
        }
        Command::MakeCorpus { n, seed, out } => {
            if n == 0 {
                return Err(Error::InvalidArgument("--n must be >= 1".into()));
            }
            write_corpus(&out, &toy_corpus(n, seed))?;
        }
    }
    Ok(0)
}

fn exit_code(err: &Error) -> u8 {
    match err {
        Error::Divergence { .. } | Error::Oracle { .. } | Error::UndefinedMetric(_) => 2,
        _ => 1,
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    init_thread_pool_from_env();
    match run(cli.command) {
        Ok(code) => {
            let _ = io::stdout().flush();
            ExitCode::from(code)
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
