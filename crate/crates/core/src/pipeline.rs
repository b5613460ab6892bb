//! End-to-end experiment drivers: bayesianize, finetune, generate, evaluate.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::DialogueSample;
use crate::error::{Error, Result};
use crate::generation::{generate_batch, DecodeConfig, GenerationRecord};
use crate::metrics::{evaluate_corpus, EntailmentOracle, EvalRecord, MetricConfig, MetricsReport};
use crate::model::{parameter_report, LayerBayesFlags, MleCheckpoint, ParameterReport, ParameterSet};
use crate::numerics::Element;
use crate::schedule::{bayesianize, ScheduleConfig};
use crate::training::{finetune, TrainConfig, TrainLog};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub flags: LayerBayesFlags,
    pub schedule: ScheduleConfig,
    pub train: TrainConfig,
    pub decode: DecodeConfig,
    pub metrics: MetricConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            flags: LayerBayesFlags::default(),
            schedule: ScheduleConfig::default(),
            train: TrainConfig::default(),
            decode: DecodeConfig::default(),
            metrics: MetricConfig::default(),
        }
    }
}

#[derive(Debug, Clone)]
pub struct VariantOutcome<T> {
    pub params: ParameterSet<T>,
    pub parameter_report: ParameterReport,
    pub log: TrainLog,
    pub records: Vec<GenerationRecord>,
    pub report: MetricsReport,
}

pub fn eval_records(records: &[GenerationRecord]) -> Vec<EvalRecord> {
    records
        .iter()
        .map(|r| EvalRecord {
            context: r.context.clone(),
            response: r.response.clone(),
        })
        .collect()
}

/// Finetunes `params` as given, then generates and scores one response per context.
pub fn finetune_and_evaluate<T: Element>(
    params: &ParameterSet<T>,
    corpus: &[DialogueSample],
    contexts: &[Vec<String>],
    cfg: &ExperimentConfig,
    oracle: Option<&dyn EntailmentOracle>,
) -> Result<VariantOutcome<T>> {
    let (tuned, log) = finetune(params, corpus, &cfg.train)?;
    let records = generate_batch(&tuned, contexts, &cfg.decode)?;
    let report = evaluate_corpus(&eval_records(&records), &cfg.metrics, oracle)?;
    Ok(VariantOutcome {
        parameter_report: parameter_report(&tuned),
        params: tuned,
        log,
        records,
        report,
    })
}

/// Bayesianizes with `cfg.flags` and `cfg.schedule`, then finetunes and evaluates.
pub fn run_variant<T: Element>(
    mle: &MleCheckpoint<T>,
    corpus: &[DialogueSample],
    contexts: &[Vec<String>],
    cfg: &ExperimentConfig,
    oracle: Option<&dyn EntailmentOracle>,
) -> Result<VariantOutcome<T>> {
    let params = bayesianize(mle, &cfg.flags, &cfg.schedule)?;
    finetune_and_evaluate(&params, corpus, contexts, cfg, oracle)
}

/// The same protocol with every slot deterministic.
pub fn run_deterministic<T: Element>(
    mle: &MleCheckpoint<T>,
    corpus: &[DialogueSample],
    contexts: &[Vec<String>],
    cfg: &ExperimentConfig,
    oracle: Option<&dyn EntailmentOracle>,
) -> Result<VariantOutcome<T>> {
    finetune_and_evaluate(mle.params(), corpus, contexts, cfg, oracle)
}

#[derive(Debug)]
pub struct SweepEntry {
    pub alpha: f64,
    pub report: Result<MetricsReport>,
}

/// One full variant run per alpha. Failures are kept per entry.
pub fn sweep_alpha<T: Element>(
    mle: &MleCheckpoint<T>,
    corpus: &[DialogueSample],
    contexts: &[Vec<String>],
    alphas: &[f64],
    base: &ExperimentConfig,
    oracle: Option<&dyn EntailmentOracle>,
) -> Vec<SweepEntry> {
    alphas
        .iter()
        .map(|&alpha| {
            let cfg = ExperimentConfig {
                schedule: ScheduleConfig { alpha, ..base.schedule },
                ..*base
            };
            SweepEntry {
                alpha,
                report: run_variant(mle, corpus, contexts, &cfg, oracle).map(|o| o.report),
            }
        })
        .collect()
}

/// `alpha,distinct_1,distinct_2,mattr,mtld,hdd,ue_score`, one row per
/// successful entry; undefined scores are left empty.
pub fn write_sweep_csv(path: &Path, entries: &[SweepEntry]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(csv_err)?;
    w.write_record(["alpha", "distinct_1", "distinct_2", "mattr", "mtld", "hdd", "ue_score"])
        .map_err(csv_err)?;
    let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
    for e in entries {
        if let Ok(r) = &e.report {
            w.write_record([
                e.alpha.to_string(),
                r.distinct_1.to_string(),
                opt(r.distinct_2),
                r.mattr.to_string(),
                r.mtld.to_string(),
                opt(r.hdd),
                opt(r.ue_score),
            ])
            .map_err(csv_err)?;
        }
    }
    w.flush()?;
    Ok(())
}

fn csv_err(e: csv::Error) -> Error {
    Error::Format(format!("csv: {e}"))
}

/// Contexts of the first `n` dialogues.
pub fn contexts_of(corpus: &[DialogueSample], n: usize) -> Vec<Vec<String>> {
    corpus.iter().take(n).map(|s| s.context().to_vec()).collect()
}
