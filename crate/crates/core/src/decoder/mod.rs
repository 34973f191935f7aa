//! Prefix projection, the small causal language model and beam search.

mod beam;
mod lm;

use std::io::{BufRead, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use beam::{beam_search, generatable_tokens, greedy, BeamConfig, Candidate, LmStepper, StepModel};
#[cfg(test)]
pub(crate) use lm::log_softmax;
pub use lm::{DecoderConfig, LanguageModel, LmState, PrefixProjection};

/// A scored candidate as written to generation files.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GeneratedText {
    pub text: String,
    pub total_logprob: f64,
}

/// One line of a generation JSONL file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GenerationRecord {
    pub sample_id: String,
    pub candidates: Vec<GeneratedText>,
    pub stage: String,
    pub checkpoint: String,
    pub config_hash: String,
}

pub fn save_generations(records: &[GenerationRecord], path: &Path) -> Result<()> {
    let mut out = std::io::BufWriter::new(std::fs::File::create(path).map_err(Error::io(path))?);
    for r in records {
        let line = serde_json::to_string(r).map_err(Error::json(path))?;
        writeln!(out, "{line}").map_err(Error::io(path))?;
    }
    out.flush().map_err(Error::io(path))
}

pub fn load_generations(path: &Path) -> Result<Vec<GenerationRecord>> {
    let file = std::fs::File::open(path).map_err(Error::io(path))?;
    let mut records = Vec::new();
    for (i, line) in std::io::BufReader::new(file).lines().enumerate() {
        let line = line.map_err(Error::io(path))?;
        if line.trim().is_empty() {
            continue;
        }
        records.push(serde_json::from_str(&line).map_err(|e| Error::ParseError {
            line: i + 1,
            message: e.to_string(),
        })?);
    }
    Ok(records)
}
