//! Dialogue corpora and sequence packing.
//!
//! A corpus file holds one JSON object per line, `{"utterances": [...]}`.
//! A training sequence is `[BOS] u1 [SEP] u2 [SEP] ... u_{K-1} [SEP] y [EOS]`;
//! only the positions predicting `y` and `[EOS]` carry a loss.

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tokenizer::Tokenizer;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DialogueSample {
    pub utterances: Vec<String>,
}

impl DialogueSample {
    pub fn new(utterances: Vec<String>) -> Result<Self> {
        let s = Self { utterances };
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<()> {
        if self.utterances.len() < 2 {
            return Err(Error::invalid(format!(
                "a dialogue needs at least 2 utterances, got {}",
                self.utterances.len()
            )));
        }
        if let Some(i) = self.utterances.iter().position(|u| u.split_whitespace().next().is_none()) {
            return Err(Error::invalid(format!("utterance {i} is empty")));
        }
        Ok(())
    }

    /// Every utterance but the last.
    pub fn context(&self) -> &[String] {
        &self.utterances[..self.utterances.len() - 1]
    }

    pub fn reference(&self) -> &str {
        &self.utterances[self.utterances.len() - 1]
    }
}

pub fn parse_corpus(text: &str) -> Result<Vec<DialogueSample>> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line_no = i + 1;
        if line.trim().is_empty() {
            continue;
        }
        let sample: DialogueSample = serde_json::from_str(line).map_err(|e| Error::Ingestion {
            line: line_no,
            message: e.to_string(),
        })?;
        sample.validate().map_err(|e| Error::Ingestion {
            line: line_no,
            message: e.to_string(),
        })?;
        out.push(sample);
    }
    if out.is_empty() {
        return Err(Error::Ingestion {
            line: 1,
            message: "corpus contains no dialogues".into(),
        });
    }
    Ok(out)
}

pub fn load_corpus(path: &Path) -> Result<Vec<DialogueSample>> {
    parse_corpus(&fs::read_to_string(path)?)
}

pub fn write_corpus(path: &Path, corpus: &[DialogueSample]) -> Result<()> {
    let mut f = std::io::BufWriter::new(fs::File::create(path)?);
    for s in corpus {
        serde_json::to_writer(&mut f, s)?;
        f.write_all(b"\n")?;
    }
    f.flush()?;
    Ok(())
}

/// `[BOS] u1 [SEP] ... u_n [SEP]`: the prompt a response is generated from.
pub fn encode_context(tok: &dyn Tokenizer, context: &[String]) -> Vec<usize> {
    let mut ids = vec![tok.bos_id()];
    for u in context {
        ids.extend(tok.encode(u));
        ids.push(tok.sep_id());
    }
    ids
}

/// One next-token training example.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PackedExample {
    pub inputs: Vec<usize>,
    /// `targets[t]` is the token after `inputs[t]`, or the pad id where no
    /// loss is taken.
    pub targets: Vec<usize>,
}

/// Packs a dialogue into at most `max_len` input positions, dropping the
/// oldest context tokens (after `[BOS]`) if it does not fit.
pub fn pack(tok: &dyn Tokenizer, sample: &DialogueSample, max_len: usize) -> Result<PackedExample> {
    let mut ctx = encode_context(tok, sample.context());
    let mut reply = tok.encode(sample.reference());
    reply.push(tok.eos_id());
    // inputs = seq[..len-1], so the full sequence may hold max_len + 1 tokens
    let budget = max_len + 1;
    if reply.len() + 2 > budget {
        return Err(Error::invalid(format!(
            "reference of {} tokens does not fit max_seq_len {max_len}",
            reply.len() - 1
        )));
    }
    if ctx.len() + reply.len() > budget {
        let drop = ctx.len() + reply.len() - budget;
        ctx.drain(1..1 + drop);
    }
    let ctx_len = ctx.len();
    let seq: Vec<usize> = ctx.into_iter().chain(reply).collect();
    let inputs = seq[..seq.len() - 1].to_vec();
    let targets = (0..inputs.len())
        .map(|t| if t + 1 >= ctx_len { seq[t + 1] } else { tok.pad_id() })
        .collect();
    Ok(PackedExample { inputs, targets })
}

pub fn pack_corpus(tok: &dyn Tokenizer, corpus: &[DialogueSample], max_len: usize) -> Result<Vec<PackedExample>> {
    corpus
        .iter()
        .enumerate()
        .map(|(i, s)| pack(tok, s, max_len).map_err(|e| Error::invalid(format!("dialogue {i}: {e}"))))
        .collect()
}
