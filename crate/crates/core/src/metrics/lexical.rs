//! Lexical diversity scores over token streams.

use std::collections::{HashMap, HashSet};

use serde::{Deserialize, Serialize};
use statrs::function::factorial::ln_binomial;

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MetricConfig {
    pub mattr_window: usize,
    pub mtld_threshold: f64,
    pub hdd_sample: usize,
}

impl Default for MetricConfig {
    fn default() -> Self {
        Self {
            mattr_window: 50,
            mtld_threshold: 0.72,
            hdd_sample: 42,
        }
    }
}

impl MetricConfig {
    pub fn validate(&self) -> Result<()> {
        if self.mattr_window == 0 || self.hdd_sample == 0 {
            return Err(Error::config("metrics.mattr_window and metrics.hdd_sample must be >= 1"));
        }
        if !(self.mtld_threshold > 0.0 && self.mtld_threshold < 1.0) {
            return Err(Error::config(format!(
                "metrics.mtld_threshold must lie in (0, 1), got {}",
                self.mtld_threshold
            )));
        }
        Ok(())
    }
}

/// Lowercases, splits on whitespace, and detaches every punctuation
/// character as its own token. Apostrophes stay inside words.
pub fn tokenize(text: &str) -> Vec<String> {
    let mut out = Vec::new();
    for chunk in text.split_whitespace() {
        let mut word = String::new();
        for c in chunk.chars() {
            if c.is_alphanumeric() || c == '\'' {
                word.extend(c.to_lowercase());
            } else {
                if !word.is_empty() {
                    out.push(std::mem::take(&mut word));
                }
                out.push(c.to_lowercase().collect());
            }
        }
        if !word.is_empty() {
            out.push(word);
        }
    }
    out
}

fn undefined(msg: impl Into<String>) -> Error {
    Error::UndefinedMetric(msg.into())
}

/// Unique n-grams over total n-grams, pooled across every response.
pub fn distinct_n<S: AsRef<str> + Eq + std::hash::Hash>(responses: &[Vec<S>], n: usize) -> Result<f64> {
    if n == 0 {
        return Err(Error::invalid("distinct_n needs n >= 1"));
    }
    let mut unique: HashSet<&[S]> = HashSet::new();
    let mut total = 0usize;
    for r in responses {
        for gram in r.windows(n) {
            unique.insert(gram);
            total += 1;
        }
    }
    if total == 0 {
        return Err(undefined(format!("distinct-{n}: no response has {n} tokens")));
    }
    Ok(unique.len() as f64 / total as f64)
}

fn ttr<S: Eq + std::hash::Hash>(tokens: &[S]) -> f64 {
    tokens.iter().collect::<HashSet<_>>().len() as f64 / tokens.len() as f64
}

/// Mean type-token ratio over every length-`w` window (stride 1); the
/// whole-stream ratio when the stream is shorter than `w`.
pub fn mattr<S: Eq + std::hash::Hash>(tokens: &[S], w: usize) -> Result<f64> {
    if tokens.is_empty() {
        return Err(undefined("mattr: empty stream"));
    }
    if w == 0 {
        return Err(Error::invalid("mattr needs w >= 1"));
    }
    if tokens.len() <= w {
        return Ok(ttr(tokens));
    }
    let mut counts: HashMap<&S, usize> = HashMap::new();
    for t in &tokens[..w] {
        *counts.entry(t).or_default() += 1;
    }
    let mut type_sum = counts.len();
    for i in w..tokens.len() {
        let out = counts.get_mut(&tokens[i - w]).expect("token in window");
        *out -= 1;
        if *out == 0 {
            counts.remove(&tokens[i - w]);
        }
        *counts.entry(&tokens[i]).or_default() += 1;
        type_sum += counts.len();
    }
    let windows = tokens.len() - w + 1;
    Ok(type_sum as f64 / (windows * w) as f64)
}

fn mtld_pass<'a, S: Eq + std::hash::Hash + 'a>(tokens: impl Iterator<Item = &'a S>, n: usize, h: f64) -> f64 {
    let mut factors = 0.0;
    let mut types: HashSet<&S> = HashSet::new();
    let mut count = 0usize;
    for t in tokens {
        types.insert(t);
        count += 1;
        if (types.len() as f64 / count as f64) < h {
            factors += 1.0;
            types.clear();
            count = 0;
        }
    }
    if count > 0 {
        factors += (1.0 - types.len() as f64 / count as f64) / (1.0 - h);
    }
    if factors == 0.0 {
        n as f64
    } else {
        n as f64 / factors
    }
}

/// Bidirectional MTLD with partial factors.
pub fn mtld<S: Eq + std::hash::Hash>(tokens: &[S], h: f64) -> Result<f64> {
    if tokens.is_empty() {
        return Err(undefined("mtld: empty stream"));
    }
    let n = tokens.len();
    let fwd = mtld_pass(tokens.iter(), n, h);
    let rev = mtld_pass(tokens.iter().rev(), n, h);
    Ok((fwd + rev) / 2.0)
}

/// Analytic HD-D: expected per-type TTR contribution of a random
/// `n`-token draw without replacement.
pub fn hdd<S: Eq + std::hash::Hash>(tokens: &[S], n: usize) -> Result<f64> {
    let total = tokens.len();
    if n == 0 {
        return Err(Error::invalid("hdd needs n >= 1"));
    }
    if total < n {
        return Err(undefined(format!("hdd: stream of {total} tokens is shorter than the sample size {n}")));
    }
    let mut freq: HashMap<&S, usize> = HashMap::new();
    for t in tokens {
        *freq.entry(t).or_default() += 1;
    }
    let ln_all = ln_binomial(total as u64, n as u64);
    let mut counts: Vec<usize> = freq.into_values().collect();
    counts.sort_unstable();
    let score = counts
        .iter()
        .map(|&f| {
            let absent = if total - f < n {
                0.0
            } else {
                (ln_binomial((total - f) as u64, n as u64) - ln_all).exp()
            };
            (1.0 - absent) / n as f64
        })
        .sum();
    Ok(score)
}
