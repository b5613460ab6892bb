//! Corpus-level diversity and coherence evaluation.

pub mod lexical;
pub mod ue;

use serde::{Deserialize, Serialize};

pub use lexical::{distinct_n, hdd, mattr, mtld, tokenize, MetricConfig};
pub use ue::{
    scored_sentences, serve_stub, split_sentences, ue_detail, ue_score, EntailmentLabel, EntailmentOracle,
    ProcessOracle, StubOracle, UeOutcome,
};

use crate::error::{Error, Result};
use crate::parallel::Exec;

/// One generated response with the context it answers.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRecord {
    pub context: Vec<String>,
    pub response: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct MetricCounts {
    pub responses: usize,
    pub empty_responses: usize,
    /// Responses long enough for HD-D.
    pub hdd_scored: usize,
    pub hdd_skipped: usize,
    pub ue_pairs: usize,
    pub ue_contexts_scored: usize,
    pub ue_contexts_skipped: usize,
}

/// Absent scores are undefined for the corpus (no response long enough,
/// or no oracle / no scorable context for UE).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub distinct_1: f64,
    pub distinct_2: Option<f64>,
    pub mattr: f64,
    pub mtld: f64,
    pub hdd: Option<f64>,
    pub ue_score: Option<f64>,
    pub counts: MetricCounts,
    pub config: MetricConfig,
}

/// Order-independent mean: values are sorted before summation.
fn mean(mut values: Vec<f64>) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    values.sort_by(f64::total_cmp);
    Some(values.iter().sum::<f64>() / values.len() as f64)
}

pub fn evaluate_corpus(
    records: &[EvalRecord],
    cfg: &MetricConfig,
    oracle: Option<&dyn EntailmentOracle>,
) -> Result<MetricsReport> {
    evaluate_corpus_with(records, cfg, oracle, Exec::default())
}

pub fn evaluate_corpus_with(
    records: &[EvalRecord],
    cfg: &MetricConfig,
    oracle: Option<&dyn EntailmentOracle>,
    exec: Exec,
) -> Result<MetricsReport> {
    cfg.validate()?;
    if records.is_empty() {
        return Err(Error::UndefinedMetric("no records to evaluate".into()));
    }
    let streams: Vec<Vec<String>> = exec.map(records, |r| tokenize(&r.response));
    let non_empty: Vec<&Vec<String>> = streams.iter().filter(|s| !s.is_empty()).collect();
    if non_empty.is_empty() {
        return Err(Error::UndefinedMetric("every response is empty".into()));
    }
    let per_response: Vec<Result<(f64, f64, Option<f64>)>> = exec.map(&non_empty, |s| {
        let h = match hdd(s, cfg.hdd_sample) {
            Ok(v) => Some(v),
            Err(Error::UndefinedMetric(_)) => None,
            Err(e) => return Err(e),
        };
        Ok((mattr(s, cfg.mattr_window)?, mtld(s, cfg.mtld_threshold)?, h))
    });
    let per_response = per_response.into_iter().collect::<Result<Vec<_>>>()?;

    let distinct_1 = distinct_n(&streams, 1)?;
    let distinct_2 = match distinct_n(&streams, 2) {
        Ok(v) => Some(v),
        Err(Error::UndefinedMetric(_)) => None,
        Err(e) => return Err(e),
    };
    let hdd_values: Vec<f64> = per_response.iter().filter_map(|r| r.2).collect();

    let mut counts = MetricCounts {
        responses: records.len(),
        empty_responses: records.len() - non_empty.len(),
        hdd_scored: hdd_values.len(),
        hdd_skipped: non_empty.len() - hdd_values.len(),
        ue_contexts_skipped: records.len(),
        ..MetricCounts::default()
    };
    let ue_score = match oracle {
        None => None,
        Some(o) => {
            let policy = if o.concurrent() { exec } else { Exec::Sequential };
            let outcomes = policy
                .map(records, |r| ue_detail(&r.response, &r.context, o))
                .into_iter()
                .collect::<Result<Vec<_>>>()?;
            let scores: Vec<f64> = outcomes.iter().filter_map(|u| u.score).collect();
            counts.ue_pairs = outcomes.iter().map(|u| u.pairs).sum();
            counts.ue_contexts_scored = scores.len();
            counts.ue_contexts_skipped = records.len() - scores.len();
            mean(scores)
        }
    };

    Ok(MetricsReport {
        distinct_1,
        distinct_2,
        mattr: mean(per_response.iter().map(|r| r.0).collect()).expect("non-empty"),
        mtld: mean(per_response.iter().map(|r| r.1).collect()).expect("non-empty"),
        hdd: mean(hdd_values),
        ue_score,
        counts,
        config: *cfg,
    })
}
