//! Autoregressive response generation.
//!
//! Each context gets its own weight realization, so with Bayesian slots even
//! greedy decoding varies from seed to seed. In a batch, context `i` uses the
//! seed `derive_seed(cfg.seed, i)`: seeds travel with positions, so permuting
//! the contexts permutes the outputs only if the seeds are permuted too.

use std::fs;
use std::io::Write;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::encode_context;
use crate::error::{Error, Result};
use crate::model::{forward, realize_with, NoiseMode, ParameterSet, WeightRealization};
use crate::noise::{derive_seed, mix64};
use crate::numerics::Element;
use crate::parallel::Exec;
use crate::tokenizer::{Tokenizer, EOS_ID};

const SAMPLER_SALT: u64 = 0x7361_6d70_6c65_7221;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Strategy {
    Greedy,
    Temperature,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ResampleGranularity {
    PerContext,
    PerToken,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DecodeConfig {
    pub strategy: Strategy,
    /// Used by the temperature strategy only.
    pub temperature: f64,
    pub max_new_tokens: usize,
    pub stop_token_id: usize,
    pub resample_granularity: ResampleGranularity,
    pub seed: u64,
}

impl Default for DecodeConfig {
    fn default() -> Self {
        Self {
            strategy: Strategy::Greedy,
            temperature: 1.0,
            max_new_tokens: 24,
            stop_token_id: EOS_ID,
            resample_granularity: ResampleGranularity::PerContext,
            seed: 0,
        }
    }
}

impl DecodeConfig {
    pub fn validate(&self) -> Result<()> {
        if self.max_new_tokens == 0 {
            return Err(Error::config("decode.max_new_tokens must be >= 1"));
        }
        if self.strategy == Strategy::Temperature && !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return Err(Error::config(format!(
                "decode.temperature must be > 0, got {}",
                self.temperature
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerationRecord {
    pub context: Vec<String>,
    pub response: String,
    /// Seed the realization(s) were drawn from; replaying with
    /// `DecodeConfig { seed, ..config }` reproduces the response.
    pub seed: u64,
    pub config: DecodeConfig,
}

/// Index of the largest value; the lowest index wins ties.
pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate().skip(1) {
        if v > row[best] {
            best = i;
        }
    }
    best
}

fn sample_softmax(row: &[f64], temperature: f64, rng: &mut ChaCha8Rng) -> usize {
    let scaled: Vec<f64> = row.iter().map(|v| v / temperature).collect();
    let m = scaled.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let weights: Vec<f64> = scaled.iter().map(|v| (v - m).exp()).collect();
    let total: f64 = weights.iter().sum();
    let mut u = rng.gen::<f64>() * total;
    for (i, w) in weights.iter().enumerate() {
        if u < *w {
            return i;
        }
        u -= w;
    }
    argmax(row)
}

/// Generates one response to `context` with realization seed `cfg.seed`.
pub fn generate<T: Element>(params: &ParameterSet<T>, context: &[String], cfg: &DecodeConfig) -> Result<GenerationRecord> {
    let tok = params.tokenizer()?;
    generate_with(params, &tok, context, cfg)
}

pub fn generate_with<T: Element>(
    params: &ParameterSet<T>,
    tok: &dyn Tokenizer,
    context: &[String],
    cfg: &DecodeConfig,
) -> Result<GenerationRecord> {
    cfg.validate()?;
    let mut ids = encode_context(tok, context);
    let limit = params.config.max_seq_len.saturating_sub(cfg.max_new_tokens);
    if ids.len() > limit {
        return Err(Error::invalid(format!(
            "context of {} tokens exceeds max_seq_len - max_new_tokens = {limit}",
            ids.len()
        )));
    }
    let prompt_len = ids.len();
    let realization_for = |step: usize| -> WeightRealization<T> {
        let seed = match cfg.resample_granularity {
            ResampleGranularity::PerContext => cfg.seed,
            ResampleGranularity::PerToken => derive_seed(cfg.seed, step as u64),
        };
        realize_with(params, seed, NoiseMode::Sampled, Exec::Sequential)
    };
    let mut realization = realization_for(0);
    let mut rng = ChaCha8Rng::seed_from_u64(mix64(cfg.seed ^ SAMPLER_SALT));
    let v = params.config.vocab_size;
    for step in 0..cfg.max_new_tokens {
        if step > 0 && cfg.resample_granularity == ResampleGranularity::PerToken && params.has_bayesian() {
            realization = realization_for(step);
        }
        let logits = forward(&realization, &ids)?;
        let last: Vec<f64> = logits.data()[(ids.len() - 1) * v..].iter().map(|x| x.to_f64()).collect();
        let next = match cfg.strategy {
            Strategy::Greedy => argmax(&last),
            Strategy::Temperature => sample_softmax(&last, cfg.temperature, &mut rng),
        };
        if next == cfg.stop_token_id {
            break;
        }
        ids.push(next);
    }
    Ok(GenerationRecord {
        context: context.to_vec(),
        response: tok.decode(&ids[prompt_len..]),
        seed: cfg.seed,
        config: *cfg,
    })
}

/// One record per context, in input order.
pub fn generate_batch<T: Element>(
    params: &ParameterSet<T>,
    contexts: &[Vec<String>],
    cfg: &DecodeConfig,
) -> Result<Vec<GenerationRecord>> {
    generate_batch_with(params, contexts, cfg, Exec::default())
}

pub fn generate_batch_with<T: Element>(
    params: &ParameterSet<T>,
    contexts: &[Vec<String>],
    cfg: &DecodeConfig,
    exec: Exec,
) -> Result<Vec<GenerationRecord>> {
    cfg.validate()?;
    let tok = params.tokenizer()?;
    let indexed: Vec<(usize, &Vec<String>)> = contexts.iter().enumerate().collect();
    exec.map(&indexed, |&(i, ctx)| {
        let local = DecodeConfig {
            seed: derive_seed(cfg.seed, i as u64),
            ..*cfg
        };
        generate_with(params, &tok, ctx, &local).map_err(|e| Error::invalid(format!("context {i}: {e}")))
    })
    .into_iter()
    .collect()
}

pub fn write_records(path: &Path, records: &[GenerationRecord]) -> Result<()> {
    let mut f = std::io::BufWriter::new(fs::File::create(path)?);
    for r in records {
        serde_json::to_writer(&mut f, r)?;
        f.write_all(b"\n")?;
    }
    f.flush()?;
    Ok(())
}

pub fn read_records(path: &Path) -> Result<Vec<GenerationRecord>> {
    let text = fs::read_to_string(path)?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str(l).map_err(|e| Error::Ingestion {
                line: i + 1,
                message: e.to_string(),
            })
        })
        .collect()
}
