//! Utterance-entailment coherence score.
//!
//! Context utterances are split into sentences on `.`, `!` and `?`; sentences
//! of fewer than four whitespace-delimited words are dropped. Each surviving
//! sentence is paired with the response as (premise, hypothesis) and scored
//! +1 / -1 / 0 for entail / contradict / neutral; the score is the mean.

use std::collections::HashSet;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::process::{Child, ChildStdin, ChildStdout, Command, Stdio};
use std::sync::Mutex;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::metrics::lexical::tokenize;

pub const MIN_SENTENCE_WORDS: usize = 4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum EntailmentLabel {
    Entail,
    Contradict,
    Neutral,
}

impl EntailmentLabel {
    pub fn score(self) -> f64 {
        match self {
            EntailmentLabel::Entail => 1.0,
            EntailmentLabel::Contradict => -1.0,
            EntailmentLabel::Neutral => 0.0,
        }
    }
}

/// Three-way natural-language-inference judgement.
pub trait EntailmentOracle: Send + Sync {
    fn classify(&self, premise: &str, hypothesis: &str) -> Result<EntailmentLabel>;

    /// Whether `classify` may be called from several threads at once.
    fn concurrent(&self) -> bool {
        true
    }
}

pub fn split_sentences(text: &str) -> Vec<String> {
    text.split(['.', '!', '?'])
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(str::to_owned)
        .collect()
}

/// Sentences of the context that take part in scoring.
pub fn scored_sentences(context: &[String]) -> Vec<String> {
    context
        .iter()
        .flat_map(|u| split_sentences(u))
        .filter(|s| s.split_whitespace().count() >= MIN_SENTENCE_WORDS)
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct UeOutcome {
    /// `None` when no sentence survives the filter.
    pub score: Option<f64>,
    pub pairs: usize,
}

pub fn ue_detail(response: &str, context: &[String], oracle: &dyn EntailmentOracle) -> Result<UeOutcome> {
    let sentences = scored_sentences(context);
    if sentences.is_empty() {
        return Ok(UeOutcome { score: None, pairs: 0 });
    }
    let mut total = 0.0;
    for s in &sentences {
        total += oracle.classify(s, response)?.score();
    }
    Ok(UeOutcome {
        score: Some(total / sentences.len() as f64),
        pairs: sentences.len(),
    })
}

pub fn ue_score(response: &str, context: &[String], oracle: &dyn EntailmentOracle) -> Result<Option<f64>> {
    Ok(ue_detail(response, context, oracle)?.score)
}

const STOPWORDS: &[&str] = &[
    "a", "an", "the", "and", "or", "but", "if", "of", "to", "in", "on", "at", "for", "with", "by", "from", "is",
    "are", "was", "were", "be", "been", "am", "do", "does", "did", "i", "you", "he", "she", "it", "we", "they",
    "me", "my", "your", "his", "her", "its", "our", "their", "this", "that", "these", "those", "so", "as",
    "what", "how", "there", "then", "have", "has", "had", "will", "would", "can", "could", "just", "too",
];

const NEGATIONS: &[&str] = &[
    "not", "no", "never", "none", "nobody", "nothing", "neither", "nor", "cannot", "n't",
];

fn is_negation(w: &str) -> bool {
    NEGATIONS.contains(&w) || w.ends_with("n't")
}

fn content_words(text: &str) -> HashSet<String> {
    tokenize(text)
        .into_iter()
        .filter(|w| w.chars().any(char::is_alphanumeric))
        .filter(|w| !STOPWORDS.contains(&w.as_str()) && !is_negation(w))
        .collect()
}

fn negated(text: &str) -> bool {
    tokenize(text).iter().any(|w| is_negation(w))
}

/// Lexical-overlap heuristic for exercising the scoring pipeline; its labels
/// make no linguistic claim.
///
/// CONTRADICT when exactly one side contains a negation and they share a
/// content word; ENTAIL when at least 60% of the premise's content words
/// occur in the hypothesis; NEUTRAL otherwise.
#[derive(Debug, Clone, Copy, Default)]
pub struct StubOracle;

impl StubOracle {
    pub const ENTAIL_OVERLAP: f64 = 0.6;
}

impl EntailmentOracle for StubOracle {
    fn classify(&self, premise: &str, hypothesis: &str) -> Result<EntailmentLabel> {
        let p = content_words(premise);
        if p.is_empty() {
            return Ok(EntailmentLabel::Neutral);
        }
        let h = content_words(hypothesis);
        let shared = p.intersection(&h).count();
        if shared > 0 && negated(premise) != negated(hypothesis) {
            return Ok(EntailmentLabel::Contradict);
        }
        if shared as f64 >= Self::ENTAIL_OVERLAP * p.len() as f64 {
            return Ok(EntailmentLabel::Entail);
        }
        Ok(EntailmentLabel::Neutral)
    }
}

#[derive(Serialize)]
struct OracleRequest<'a> {
    premise: &'a str,
    hypothesis: &'a str,
}

#[derive(Deserialize)]
struct OracleResponse {
    label: EntailmentLabel,
}

struct Pipe {
    child: Child,
    stdin: BufWriter<ChildStdin>,
    stdout: BufReader<ChildStdout>,
}

/// Talks to an external classifier over a child process's stdin/stdout:
/// one `{"premise", "hypothesis"}` JSON line out, one `{"label"}` line back.
pub struct ProcessOracle {
    pipe: Mutex<Pipe>,
}

impl ProcessOracle {
    /// Runs `command` through `sh -c`.
    pub fn spawn(command: &str) -> Result<Self> {
        let mut child = Command::new("sh")
            .arg("-c")
            .arg(command)
            .stdin(Stdio::piped())
            .stdout(Stdio::piped())
            .stderr(Stdio::inherit())
            .spawn()?;
        let stdin = BufWriter::new(child.stdin.take().expect("piped stdin"));
        let stdout = BufReader::new(child.stdout.take().expect("piped stdout"));
        Ok(Self {
            pipe: Mutex::new(Pipe { child, stdin, stdout }),
        })
    }
}

impl EntailmentOracle for ProcessOracle {
    fn classify(&self, premise: &str, hypothesis: &str) -> Result<EntailmentLabel> {
        let fail = |message: String| Error::Oracle {
            premise: premise.to_owned(),
            hypothesis: hypothesis.to_owned(),
            message,
        };
        let mut pipe = self.pipe.lock().map_err(|_| fail("oracle pipe poisoned".into()))?;
        let req = serde_json::to_string(&OracleRequest { premise, hypothesis })?;
        writeln!(pipe.stdin, "{req}")
            .and_then(|_| pipe.stdin.flush())
            .map_err(|e| fail(format!("write failed: {e}")))?;
        let mut line = String::new();
        let n = pipe
            .stdout
            .read_line(&mut line)
            .map_err(|e| fail(format!("read failed: {e}")))?;
        if n == 0 {
            return Err(fail("oracle process closed its output".into()));
        }
        let resp: OracleResponse =
            serde_json::from_str(line.trim()).map_err(|e| fail(format!("bad response {:?}: {e}", line.trim())))?;
        Ok(resp.label)
    }

    fn concurrent(&self) -> bool {
        false
    }
}

impl Drop for ProcessOracle {
    fn drop(&mut self) {
        if let Ok(pipe) = self.pipe.get_mut() {
            let _ = pipe.stdin.flush();
            let _ = pipe.child.kill();
            let _ = pipe.child.wait();
        }
    }
}

/// Serves [`StubOracle`] over the process protocol until EOF.
pub fn serve_stub(input: impl BufRead, mut output: impl Write) -> Result<()> {
    #[derive(Deserialize)]
    struct Req {
        premise: String,
        hypothesis: String,
    }
    for line in input.lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let req: Req = serde_json::from_str(&line)?;
        let label = StubOracle.classify(&req.premise, &req.hypothesis)?;
        writeln!(output, "{}", serde_json::json!({ "label": label }))?;
        output.flush()?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    struct Fixed(Vec<EntailmentLabel>, std::sync::atomic::AtomicUsize);

    impl EntailmentOracle for Fixed {
        fn classify(&self, _: &str, _: &str) -> Result<EntailmentLabel> {
            let i = self.1.fetch_add(1, std::sync::atomic::Ordering::SeqCst);
            Ok(self.0[i % self.0.len()])
        }
    }

    fn ctx(s: &[&str]) -> Vec<String> {
        s.iter().map(|x| x.to_string()).collect()
    }

    #[test]
    fn filtering_example() {
        let c = ctx(&["Thanks! No problem. I booked the flight to Paris yesterday."]);
        assert_eq!(scored_sentences(&c), vec!["I booked the flight to Paris yesterday"]);
        let o = Fixed(vec![EntailmentLabel::Entail], Default::default());
        assert_eq!(ue_detail("ok", &c, &o).unwrap(), UeOutcome { score: Some(1.0), pairs: 1 });
    }

    #[test]
    fn mean_of_labels() {
        let c = ctx(&["one two three four", "five six seven eight"]);
        let o = Fixed(vec![EntailmentLabel::Entail, EntailmentLabel::Neutral], Default::default());
        assert_eq!(ue_score("r", &c, &o).unwrap(), Some(0.5));
        let short = ctx(&["hi there", "ok"]);
        assert_eq!(ue_score("r", &short, &o).unwrap(), None);
    }

    #[test]
    fn stub_labels() {
        let s = StubOracle;
        let p = "i went to the park with my sister";
        assert_eq!(s.classify(p, "the park was great , my sister loved it").unwrap(), EntailmentLabel::Entail);
        assert_eq!(s.classify(p, "we did not go to the park").unwrap(), EntailmentLabel::Contradict);
        assert_eq!(s.classify(p, "pizza is tasty").unwrap(), EntailmentLabel::Neutral);
        assert_eq!(s.classify("the a of", "anything").unwrap(), EntailmentLabel::Neutral);
    }

    #[test]
    fn stub_server_protocol() {
        let input = b"{\"premise\": \"i like the red car\", \"hypothesis\": \"the red car i like\"}\n\n";
        let mut out = Vec::new();
        serve_stub(&input[..], &mut out).unwrap();
        assert_eq!(String::from_utf8(out).unwrap(), "{\"label\":\"ENTAIL\"}\n");
    }
}
