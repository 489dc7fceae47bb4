//! Tokenizer selection and line-aligned text files for scoring.

use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;
use std::time::Duration;

use evomerge_core::metrics::{self, Corpus, TokenSeq, Tokenizer};
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::{Error, Result};
use crate::process;

const TOKENIZER_TIMEOUT: Duration = Duration::from_secs(60);

/// `ws`, `char`, or `cmd:<argv>` where argv is whitespace-separated. The
/// external command receives NFC text on stdin and prints space-separated
/// tokens.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum TokenizerSpec {
    Builtin(Tokenizer),
    Command(Vec<String>),
}

impl Default for TokenizerSpec {
    fn default() -> Self {
        TokenizerSpec::Builtin(Tokenizer::Whitespace)
    }
}

impl FromStr for TokenizerSpec {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "ws" | "whitespace" => Ok(TokenizerSpec::Builtin(Tokenizer::Whitespace)),
            "char" | "character" => Ok(TokenizerSpec::Builtin(Tokenizer::Character)),
            _ => match s.strip_prefix("cmd:") {
                Some(rest) => {
                    let argv: Vec<String> = rest.split_whitespace().map(str::to_string).collect();
                    if argv.is_empty() {
                        Err("cmd: tokenizer needs a command".into())
                    } else {
                        Ok(TokenizerSpec::Command(argv))
                    }
                }
                None => Err(format!(
                    "unknown tokenizer `{s}` (expected ws, char or cmd:<argv>)"
                )),
            },
        }
    }
}

impl fmt::Display for TokenizerSpec {
    fn fmt(&self, f: &mut fmt::Formatter) -> fmt::Result {
        match self {
            TokenizerSpec::Builtin(Tokenizer::Whitespace) => f.write_str("ws"),
            TokenizerSpec::Builtin(Tokenizer::Character) => f.write_str("char"),
            TokenizerSpec::Command(argv) => write!(f, "cmd:{}", argv.join(" ")),
        }
    }
}

impl Serialize for TokenizerSpec {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for TokenizerSpec {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        String::deserialize(d)?
            .parse()
            .map_err(serde::de::Error::custom)
    }
}

impl TokenizerSpec {
    pub fn tokenize(&self, text: &str) -> Result<TokenSeq> {
        match self {
            TokenizerSpec::Builtin(t) => Ok(metrics::tokenize(text, *t)),
            TokenizerSpec::Command(argv) => {
                let input = metrics::nfc(text);
                let out = process::run(argv, input.as_bytes(), TOKENIZER_TIMEOUT, None)?;
                let stdout = String::from_utf8(out.stdout).map_err(|_| {
                    Error::Evaluation(format!("tokenizer `{}` printed invalid UTF-8", argv[0]))
                })?;
                Ok(TokenSeq::new(stdout.split_whitespace()))
            }
        }
    }
}

/// Scoring metric used as a fitness signal.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Metric {
    #[default]
    RougeL,
    /// Corpus BLEU-4.
    Bleu,
    Meteor,
}

impl Metric {
    pub fn score(self, corpus: &Corpus) -> Result<f64> {
        Ok(match self {
            Metric::RougeL => metrics::rouge_l(corpus),
            Metric::Bleu => metrics::bleu(corpus, 4)?,
            Metric::Meteor => metrics::meteor(corpus),
        })
    }
}

/// Reads a UTF-8 file as one segment per line. A trailing newline does not
/// start an extra segment.
pub fn read_lines(path: &Path) -> Result<Vec<String>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let mut lines = Vec::new();
    for (i, raw) in bytes.split(|&b| b == b'\n').enumerate() {
        let line = std::str::from_utf8(raw)
            .map_err(|_| Error::Data(format!("{}:{}: invalid UTF-8", path.display(), i + 1)))?;
        lines.push(line.strip_suffix('\r').unwrap_or(line).to_string());
    }
    if bytes.ends_with(b"\n") || bytes.is_empty() {
        lines.pop();
    }
    Ok(lines)
}

/// Tokenizes aligned hypothesis and reference segments into a corpus.
pub fn build_corpus(hyps: &[String], refs: &[String], tokenizer: &TokenizerSpec) -> Result<Corpus> {
    if hyps.len() != refs.len() {
        return Err(Error::Usage(format!(
            "hypotheses have {} lines but references have {}",
            hyps.len(),
            refs.len()
        )));
    }
    let pairs = hyps
        .iter()
        .zip(refs)
        .map(|(h, r)| Ok((tokenizer.tokenize(h)?, tokenizer.tokenize(r)?)))
        .collect::<Result<Vec<_>>>()?;
    Ok(Corpus::new(pairs)?)
}
