use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::hexfloat::serde_hex;
use crate::ardm::Sequence;
use crate::error::{Error, Result};
use crate::netcore::Tensor;
use crate::rewards::RewardSpec;

const FORMAT: &str = "ardm-preference-pairs";
const VERSION: u32 = 1;

/// A best/worst candidate pair for one prompt.
#[derive(Clone, Debug, PartialEq)]
pub struct PreferencePair {
    pub prompt: Vec<f64>,
    pub winner: Sequence,
    pub loser: Sequence,
    pub r_w: f64,
    pub r_l: f64,
    pub source_model: String,
    /// Index of the prompt stream the pair was mined from.
    pub seed: u64,
}

impl PreferencePair {
    pub fn validate(&self) -> Result<()> {
        if !(self.r_w > self.r_l) {
            return Err(Error::invalid(format!(
                "winner reward {} does not exceed loser reward {}",
                self.r_w, self.r_l
            )));
        }
        if self.winner.prompt != self.prompt || self.loser.prompt != self.prompt {
            return Err(Error::invalid("winner and loser must share the pair's prompt"));
        }
        if self.winner.dim() != self.loser.dim() {
            return Err(Error::invalid("winner and loser token dimensions differ"));
        }
        Ok(())
    }

    /// The same pair with winner and loser exchanged; deliberately invalid as
    /// a stored record, useful for symmetry checks.
    pub fn swapped(&self) -> Self {
        Self {
            winner: self.loser.clone(),
            loser: self.winner.clone(),
            r_w: self.r_l,
            r_l: self.r_w,
            ..self.clone()
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StoreHeader {
    pub format: String,
    pub version: u32,
    pub reward: RewardSpec,
    pub k: usize,
    pub model_hash: String,
    pub config_hash: String,
    pub count: usize,
}

/// An ordered collection of pairs sharing one provenance.
#[derive(Clone, Debug, PartialEq)]
pub struct PairStore {
    pub header: StoreHeader,
    pub pairs: Vec<PreferencePair>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Record {
    index: usize,
    seed: u64,
    reward_kind: String,
    source_model: String,
    #[serde(with = "serde_hex::vec")]
    prompt: Vec<f64>,
    #[serde(with = "serde_hex::matrix")]
    winner: Vec<Vec<f64>>,
    #[serde(with = "serde_hex::matrix")]
    loser: Vec<Vec<f64>>,
    #[serde(with = "serde_hex")]
    r_w: f64,
    #[serde(with = "serde_hex")]
    r_l: f64,
}

fn rows(s: &Sequence) -> Vec<Vec<f64>> {
    (0..s.len()).map(|n| s.token(n).to_vec()).collect()
}

fn to_sequence(prompt: &[f64], rows: &[Vec<f64>]) -> Result<Sequence> {
    let d = rows.first().map_or(0, Vec::len);
    Sequence::new(prompt.to_vec(), Tensor::from_rows(rows, d)?)
}

impl PairStore {
    pub fn new(reward: RewardSpec, k: usize, model_hash: &str, config_hash: &str) -> Self {
        Self {
            header: StoreHeader {
                format: FORMAT.into(),
                version: VERSION,
                reward,
                k,
                model_hash: model_hash.into(),
                config_hash: config_hash.into(),
                count: 0,
            },
            pairs: Vec::new(),
        }
    }

    pub fn push(&mut self, pair: PreferencePair) -> Result<()> {
        pair.validate()?;
        if pair.source_model != self.header.model_hash {
            return Err(Error::invalid("pair comes from a different model than the store"));
        }
        self.pairs.push(pair);
        self.header.count = self.pairs.len();
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    pub fn mean_winner_reward(&self) -> f64 {
        self.pairs.iter().map(|p| p.r_w).sum::<f64>() / self.pairs.len().max(1) as f64
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        let mut header = self.header.clone();
        header.count = self.pairs.len();
        serde_json::to_writer(&mut w, &header)?;
        w.write_all(b"\n")?;
        for (index, p) in self.pairs.iter().enumerate() {
            let rec = Record {
                index,
                seed: p.seed,
                reward_kind: self.header.reward.name().into(),
                source_model: p.source_model.clone(),
                prompt: p.prompt.clone(),
                winner: rows(&p.winner),
                loser: rows(&p.loser),
                r_w: p.r_w,
                r_l: p.r_l,
            };
            serde_json::to_writer(&mut w, &rec)?;
            w.write_all(b"\n")?;
        }
        w.flush()?;
        Ok(())
    }

    /// Reads and fully validates a store. Record `0` is the header; pair `i`
    /// is record `i + 1` in error reports.
    pub fn read(path: &Path) -> Result<Self> {
        let corrupt = |record: usize, detail: String| Error::Corrupt {
            path: path.to_path_buf(),
            record,
            detail,
        };
        let mut lines = BufReader::new(File::open(path)?).lines();
        let first = lines.next().ok_or_else(|| corrupt(0, "missing header".into()))??;
        let header: StoreHeader = serde_json::from_str(&first).map_err(|e| corrupt(0, format!("bad header: {e}")))?;
        if header.format != FORMAT || header.version != VERSION {
            return Err(corrupt(
                0,
                format!("unsupported format {} v{}", header.format, header.version),
            ));
        }
        let mut pairs = Vec::with_capacity(header.count);
        for (i, line) in lines.enumerate() {
            let line = line?;
            if line.is_empty() {
                continue;
            }
            let record = i + 1;
            let rec: Record = serde_json::from_str(&line).map_err(|e| corrupt(record, e.to_string()))?;
            if rec.index != pairs.len() {
                return Err(corrupt(
                    record,
                    format!("expected index {}, found {}", pairs.len(), rec.index),
                ));
            }
            if rec.reward_kind != header.reward.name() || rec.source_model != header.model_hash {
                return Err(corrupt(record, "provenance differs from header".into()));
            }
            let build = || -> Result<PreferencePair> {
                let pair = PreferencePair {
                    winner: to_sequence(&rec.prompt, &rec.winner)?,
                    loser: to_sequence(&rec.prompt, &rec.loser)?,
                    prompt: rec.prompt.clone(),
                    r_w: rec.r_w,
                    r_l: rec.r_l,
                    source_model: rec.source_model.clone(),
                    seed: rec.seed,
                };
                pair.validate()?;
                Ok(pair)
            };
            pairs.push(build().map_err(|e| corrupt(record, e.to_string()))?);
        }
        if pairs.len() != header.count {
            return Err(corrupt(
                pairs.len() + 1,
                format!("header announces {} pairs, file holds {}", header.count, pairs.len()),
            ));
        }
        Ok(Self { header, pairs })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::netcore::{gaussian, Rng};

    fn random_store(n: usize, seed: u64) -> PairStore {
        let mut rng = Rng::new(seed, 0);
        let mut store = PairStore::new(RewardSpec::task_a(), 32, "model", "cfg");
        for i in 0..n {
            let prompt = rng.normal_vec(4);
            let lw = 1 + rng.below(6);
            let ll = 1 + rng.below(6);
            let mut r = [rng.normal() * 1e3, rng.normal() * 1e-300];
            r.sort_by(|a, b| b.partial_cmp(a).unwrap());
            store
                .push(PreferencePair {
                    winner: Sequence::new(prompt.clone(), gaussian(&mut rng, &[lw, 2])).unwrap(),
                    loser: Sequence::new(prompt.clone(), gaussian(&mut rng, &[ll, 2])).unwrap(),
                    prompt,
                    r_w: r[0],
                    r_l: r[1],
                    source_model: "model".into(),
                    seed: i as u64,
                })
                .unwrap();
        }
        store
    }

    fn bits(s: &PairStore) -> Vec<u64> {
        s.pairs
            .iter()
            .flat_map(|p| {
                p.prompt
                    .iter()
                    .chain(p.winner.tokens.data())
                    .chain(p.loser.tokens.data())
                    .chain([&p.r_w, &p.r_l])
                    .map(|v| v.to_bits())
                    .collect::<Vec<_>>()
            })
            .collect()
    }

    #[test]
    fn empty_store_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("p.jsonl");
        let s = PairStore::new(RewardSpec::task_b(), 16, "m", "c");
        s.write(&path).unwrap();
        assert_eq!(PairStore::read(&path).unwrap(), s);
    }

    #[test]
    fn thousand_pairs_round_trip_bit_exactly() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("p.jsonl");
        let s = random_store(1000, 1);
        s.write(&path).unwrap();
        let back = PairStore::read(&path).unwrap();
        assert_eq!(back.header, s.header);
        assert_eq!(bits(&back), bits(&s));
    }

    #[test]
    fn truncation_names_the_record() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("p.jsonl");
        random_store(5, 2).write(&path).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        let cut = &text[..text.len() - 40];
        std::fs::write(&path, cut).unwrap();
        match PairStore::read(&path) {
            Err(Error::Corrupt { record, .. }) => assert_eq!(record, 5),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn dropped_record_is_a_count_mismatch() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("p.jsonl");
        random_store(3, 3).write(&path).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        let kept: Vec<&str> = text.lines().take(3).collect();
        std::fs::write(&path, kept.join("\n")).unwrap();
        assert!(matches!(PairStore::read(&path), Err(Error::Corrupt { record: 3, .. })));
    }

    #[test]
    fn inverted_rewards_rejected_on_load() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("p.jsonl");
        let mut s = random_store(2, 4);
        s.pairs[1] = s.pairs[1].swapped();
        s.write(&path).unwrap();
        assert!(matches!(PairStore::read(&path), Err(Error::Corrupt { record: 2, .. })));
        let mut fresh = PairStore::new(RewardSpec::task_a(), 2, "model", "c");
        assert!(fresh.push(random_store(1, 5).pairs[0].swapped()).is_err());
    }
}
