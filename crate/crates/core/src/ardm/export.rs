use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::Sequence;
use crate::error::{Error, Result};
use crate::netcore::Tensor;

/// One line of a sequence export.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SequenceRecord {
    pub prompt: Vec<f64>,
    pub tokens: Vec<Vec<f64>>,
    pub seed: u64,
    pub config_hash: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reward: Option<f64>,
}

impl SequenceRecord {
    pub fn new(seq: &Sequence, seed: u64, config_hash: &str) -> Self {
        Self {
            prompt: seq.prompt.clone(),
            tokens: (0..seq.len()).map(|n| seq.token(n).to_vec()).collect(),
            seed,
            config_hash: config_hash.to_string(),
            reward: None,
        }
    }

    pub fn to_sequence(&self) -> Result<Sequence> {
        let d = self.tokens.first().map_or(0, Vec::len);
        Sequence::new(self.prompt.clone(), Tensor::from_rows(&self.tokens, d)?)
    }
}

pub fn write_sequences(path: &Path, records: &[SequenceRecord]) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    for r in records {
        serde_json::to_writer(&mut w, r)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_sequences(path: &Path) -> Result<Vec<SequenceRecord>> {
    let reader = BufReader::new(File::open(path)?);
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec = serde_json::from_str(&line).map_err(|e| Error::Corrupt {
            path: path.to_path_buf(),
            record: i,
            detail: e.to_string(),
        })?;
        out.push(rec);
    }
    Ok(out)
}
