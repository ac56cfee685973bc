use std::fmt;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use serde_json::json;

use super::config::ExperimentConfig;
use super::stages;
use crate::align::{BestOfK, Evaluation, MetricsRecord};
use crate::ardm::ArdmModel;
use crate::error::{Error, Result};
use crate::netcore::Checkpoint;
use crate::prefdata::PairStore;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Stage {
    Pretrain,
    GenPrefs,
    Dpo,
    Raft,
    Bok,
    Eval,
    All,
}

impl Stage {
    /// Stages run by `all`, in order.
    pub const PIPELINE: [Stage; 6] = [
        Stage::Pretrain,
        Stage::GenPrefs,
        Stage::Dpo,
        Stage::Raft,
        Stage::Bok,
        Stage::Eval,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Stage::Pretrain => "pretrain",
            Stage::GenPrefs => "gen-prefs",
            Stage::Dpo => "dpo",
            Stage::Raft => "raft",
            Stage::Bok => "bok",
            Stage::Eval => "eval",
            Stage::All => "all",
        }
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Stage {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        [Stage::All]
            .into_iter()
            .chain(Stage::PIPELINE)
            .find(|st| st.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown stage `{s}`")))
    }
}

/// Written to `<stage>/stage.json` when a stage completes.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StageRecord {
    pub stage: String,
    pub config_hash: String,
    pub summary: serde_json::Value,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum StageStatus {
    Ran,
    /// Outputs for this exact config were already present.
    UpToDate,
}

/// A run directory bound to one configuration.
pub struct Run {
    pub cfg: ExperimentConfig,
    pub dir: PathBuf,
    hash: String,
}

pub const METRICS_HEADER: &str = "step,reward,kl,delta_plus,delta_minus,margin_acc";

fn hash_line(hash: &str) -> String {
    format!("# config_hash={hash}")
}

/// Reads the `# config_hash=` stamp from the first line of a text artifact.
pub fn read_hash_stamp(path: &Path) -> Result<String> {
    let text = fs::read_to_string(path)?;
    text.lines()
        .next()
        .and_then(|l| l.strip_prefix("# config_hash="))
        .map(str::to_string)
        .ok_or_else(|| Error::Corrupt {
            path: path.to_path_buf(),
            record: 0,
            detail: "missing config hash stamp".into(),
        })
}

pub fn metrics_csv(hash: &str, records: &[MetricsRecord]) -> String {
    let mut out = format!("{}\n{METRICS_HEADER}\n", hash_line(hash));
    for r in records {
        out.push_str(&format!(
            "{},{},{},{},{},{}\n",
            r.step, r.reward, r.kl, r.delta_plus, r.delta_minus, r.margin_acc
        ));
    }
    out
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut f = fs::File::create(path)?;
    serde_json::to_writer_pretty(&mut f, value)?;
    f.write_all(b"\n")?;
    Ok(())
}

impl Run {
    /// Binds `dir` to `cfg`, creating it and stamping `config.toml` on first
    /// use. A directory already stamped with a different config is refused.
    pub fn open(cfg: ExperimentConfig, dir: &Path) -> Result<Self> {
        cfg.validate()?;
        let hash = cfg.hash();
        fs::create_dir_all(dir)?;
        let stamp = dir.join("config.toml");
        if stamp.exists() {
            let found = read_hash_stamp(&stamp)?;
            if found != hash {
                return Err(Error::HashMismatch {
                    expected: hash,
                    found,
                    path: stamp,
                });
            }
        } else {
            fs::write(&stamp, format!("{}\n{}", hash_line(&hash), cfg.to_toml()?))?;
        }
        Ok(Self {
            cfg,
            dir: dir.to_path_buf(),
            hash,
        })
    }

    pub fn config_hash(&self) -> &str {
        &self.hash
    }

    pub fn stage_dir(&self, stage: Stage) -> PathBuf {
        self.dir.join(stage.name())
    }

    pub fn record_path(&self, stage: Stage) -> PathBuf {
        self.stage_dir(stage).join("stage.json")
    }

    pub fn base_path(&self) -> PathBuf {
        self.stage_dir(Stage::Pretrain).join("base.ckpt")
    }

    pub fn pairs_path(&self) -> PathBuf {
        self.stage_dir(Stage::GenPrefs).join("pairs.jsonl")
    }

    pub fn dpo_selected_path(&self) -> PathBuf {
        self.stage_dir(Stage::Dpo).join("selected.ckpt")
    }

    pub fn raft_path(&self, iteration: usize) -> PathBuf {
        self.stage_dir(Stage::Raft).join(format!("iter-{iteration}.ckpt"))
    }

    /// The completion record of `stage`, if it has run for this config.
    pub fn record(&self, stage: Stage) -> Result<Option<StageRecord>> {
        let path = self.record_path(stage);
        if !path.exists() {
            return Ok(None);
        }
        let rec: StageRecord = serde_json::from_slice(&fs::read(&path)?)?;
        self.check_hash(&rec.config_hash, &path)?;
        Ok(Some(rec))
    }

    fn check_hash(&self, found: &str, path: &Path) -> Result<()> {
        if found != self.hash {
            return Err(Error::HashMismatch {
                expected: self.hash.clone(),
                found: found.to_string(),
                path: path.to_path_buf(),
            });
        }
        Ok(())
    }

    fn complete(&self, stage: Stage, summary: serde_json::Value) -> Result<()> {
        let rec = StageRecord {
            stage: stage.name().into(),
            config_hash: self.hash.clone(),
            summary,
        };
        write_json(&self.record_path(stage), &rec)
    }

    fn require(&self, path: PathBuf, stage: Stage) -> Result<PathBuf> {
        if path.exists() && self.record(stage)?.is_some() {
            Ok(path)
        } else {
            Err(Error::MissingArtifact {
                path,
                stage: stage.name().into(),
            })
        }
    }

    fn write_checkpoint(&self, path: &Path, model: &ArdmModel, step: u64) -> Result<()> {
        Checkpoint::new(model.params.clone(), step, self.hash.clone()).write(path)
    }

    fn read_model(&self, path: &Path) -> Result<ArdmModel> {
        let ck = Checkpoint::read(path)?;
        self.check_hash(&ck.config_hash, path)?;
        stages::model_from(&self.cfg, ck.params)
    }

    pub fn load_base(&self) -> Result<ArdmModel> {
        self.read_model(&self.require(self.base_path(), Stage::Pretrain)?)
    }

    pub fn load_pairs(&self) -> Result<PairStore> {
        let path = self.require(self.pairs_path(), Stage::GenPrefs)?;
        let store = PairStore::read(&path)?;
        self.check_hash(&store.header.config_hash, &path)?;
        Ok(store)
    }

    pub fn load_dpo(&self) -> Result<ArdmModel> {
        self.read_model(&self.require(self.dpo_selected_path(), Stage::Dpo)?)
    }

    pub fn load_raft(&self, iteration: usize) -> Result<ArdmModel> {
        self.read_model(&self.require(self.raft_path(iteration), Stage::Raft)?)
    }

    /// Runs one stage, or the whole pipeline for [`Stage::All`]. A stage whose
    /// record already exists is left alone unless `force` is set.
    pub fn run(&self, stage: Stage, force: bool, log: &mut dyn FnMut(&str)) -> Result<Vec<(Stage, StageStatus)>> {
        if stage == Stage::All {
            let mut out = Vec::new();
            for s in Stage::PIPELINE {
                out.extend(self.run(s, force, log)?);
            }
            return Ok(out);
        }
        if !force && self.is_current(stage)? {
            log(&format!("{stage}: up to date"));
            return Ok(vec![(stage, StageStatus::UpToDate)]);
        }
        fs::create_dir_all(self.stage_dir(stage))?;
        match stage {
            Stage::Pretrain => self.pretrain(log)?,
            Stage::GenPrefs => self.gen_prefs(log)?,
            Stage::Dpo => self.dpo(log)?,
            Stage::Raft => self.raft(log)?,
            Stage::Bok => self.bok(log)?,
            Stage::Eval => self.eval(log)?,
            Stage::All => unreachable!(),
        }
        Ok(vec![(stage, StageStatus::Ran)])
    }

    fn is_current(&self, stage: Stage) -> Result<bool> {
        let Some(rec) = self.record(stage)? else {
            return Ok(false);
        };
        if stage == Stage::Eval {
            let covered: Vec<String> = rec.summary["models"]
                .as_array()
                .map(|a| {
                    a.iter()
                        .filter_map(|m| m["name"].as_str().map(str::to_string))
                        .collect()
                })
                .unwrap_or_default();
            return Ok(covered == self.available_models().into_iter().map(|(n, _)| n).collect::<Vec<_>>());
        }
        Ok(true)
    }

    fn pretrain(&self, log: &mut dyn FnMut(&str)) -> Result<()> {
        let every = (self.cfg.pretrain.steps / 10).max(1);
        let (model, report) = stages::pretrain_base(&self.cfg, |step, loss| {
            if step % every == 0 {
                log(&format!("pretrain: step {step} loss {loss:.5}"));
            }
        })?;
        self.write_checkpoint(&self.base_path(), &model, self.cfg.pretrain.steps as u64)?;
        let mut csv = format!("{}\nstep,loss\n", hash_line(&self.hash));
        for (i, l) in report.losses.iter().enumerate() {
            csv.push_str(&format!("{i},{l}\n"));
        }
        fs::write(self.stage_dir(Stage::Pretrain).join("losses.csv"), csv)?;
        let window = (report.losses.len() / 20).max(1);
        let (first, last) = report.head_tail_means(window);
        self.complete(
            Stage::Pretrain,
            json!({ "steps": report.losses.len(), "initial_loss": first, "final_loss": last,
                    "model_hash": model.params.content_hash() }),
        )
    }

    fn gen_prefs(&self, log: &mut dyn FnMut(&str)) -> Result<()> {
        let base = self.load_base()?;
        let store = stages::mine(&self.cfg, &base)?;
        store.write(&self.pairs_path())?;
        log(&format!(
            "gen-prefs: {} pairs, mean winner reward {:.5}",
            store.len(),
            store.mean_winner_reward()
        ));
        self.complete(
            Stage::GenPrefs,
            json!({ "pairs": store.len(), "k": store.header.k, "mean_winner_reward": store.mean_winner_reward() }),
        )
    }

    fn dpo(&self, log: &mut dyn FnMut(&str)) -> Result<()> {
        let base = self.load_base()?;
        let store = self.load_pairs()?;
        let dir = self.stage_dir(Stage::Dpo);
        let mut io_error = None;
        let run = stages::align(&self.cfg, &base, &store, |rec, model| {
            log(&format!(
                "dpo: step {} reward {:.5} kl {:.6} margin_acc {:.3}",
                rec.step, rec.reward, rec.kl, rec.margin_acc
            ));
            let path = dir.join(format!("step-{:06}.ckpt", rec.step));
            if let Err(e) = self.write_checkpoint(&path, model, rec.step as u64) {
                io_error.get_or_insert(e);
            }
        })?;
        if let Some(e) = io_error {
            return Err(e);
        }
        fs::write(dir.join("metrics.csv"), metrics_csv(&self.hash, &run.metrics))?;
        self.write_checkpoint(&self.dpo_selected_path(), &run.selected, run.selected_step as u64)?;
        let wall: Vec<f64> = run.metrics.iter().map(|m| m.wall_clock).collect();
        self.complete(
            Stage::Dpo,
            json!({ "beta": self.cfg.dpo.beta, "selected_step": run.selected_step,
                    "selected": run.selected_record(), "stopped_early": run.stopped_early,
                    "wall_clock": wall }),
        )
    }

    fn raft(&self, log: &mut dyn FnMut(&str)) -> Result<()> {
        let base = self.load_base()?;
        let mut kept = Vec::new();
        let mut io_error = None;
        stages::raft(&self.cfg, &base, |i, it| {
            log(&format!("raft: iteration {i} kept reward {:.5}", it.kept_reward.mean));
            kept.push(it.kept_reward);
            if let Err(e) = self.write_checkpoint(&self.raft_path(i), &it.model, i as u64) {
                io_error.get_or_insert(e);
            }
        })?;
        if let Some(e) = io_error {
            return Err(e);
        }
        self.complete(Stage::Raft, json!({ "iterations": kept.len(), "kept_reward": kept }))
    }

    fn bok(&self, log: &mut dyn FnMut(&str)) -> Result<()> {
        let base = self.load_base()?;
        let results: Vec<BestOfK> = stages::best_of_k(&self.cfg, &base)?;
        for r in &results {
            log(&format!(
                "bok: K={} reward {:.5} +- {:.5}",
                r.k, r.reward.mean, r.reward.std_err
            ));
        }
        self.complete(Stage::Bok, json!({ "results": results }))
    }

    /// Models present in the run directory, in report order.
    fn available_models(&self) -> Vec<(String, PathBuf)> {
        let mut out = vec![("base".to_string(), self.base_path())];
        for i in 1..=self.cfg.raft.iterations {
            if self.raft_path(i).exists() && self.record_path(Stage::Raft).exists() {
                out.push((format!("raft-{i}"), self.raft_path(i)));
            }
        }
        if self.dpo_selected_path().exists() && self.record_path(Stage::Dpo).exists() {
            out.push(("dpo".to_string(), self.dpo_selected_path()));
        }
        out
    }

    fn eval(&self, log: &mut dyn FnMut(&str)) -> Result<()> {
        let base = self.load_base()?;
        let mut rows = Vec::new();
        let mut csv = format!("{}\nmodel,reward,reward_se,kl\n", hash_line(&self.hash));
        for (name, path) in self.available_models() {
            let model = self.read_model(&path)?;
            let e: Evaluation = stages::evaluate(&self.cfg, &model, &base)?;
            log(&format!(
                "eval: {name} reward {:.5} +- {:.5} kl {:.6}",
                e.reward.mean, e.reward.std_err, e.kl
            ));
            csv.push_str(&format!("{name},{},{},{}\n", e.reward.mean, e.reward.std_err, e.kl));
            rows.push(json!({ "name": name, "reward": e.reward, "kl": e.kl, "rewards": e.rewards }));
        }
        fs::write(self.stage_dir(Stage::Eval).join("results.csv"), csv)?;
        self.complete(Stage::Eval, json!({ "models": rows }))
    }
}

/// Resolves a run directory's stored configuration.
pub fn open_existing(dir: &Path) -> Result<Run> {
    let stamp = dir.join("config.toml");
    if !stamp.exists() {
        return Err(Error::MissingArtifact {
            path: stamp,
            stage: Stage::Pretrain.name().into(),
        });
    }
    let text = fs::read_to_string(&stamp)?;
    let cfg = ExperimentConfig::from_toml(&text)?;
    let found = read_hash_stamp(&stamp)?;
    if found != cfg.hash() {
        return Err(Error::HashMismatch {
            expected: cfg.hash(),
            found,
            path: stamp,
        });
    }
    Run::open(cfg, dir)
}
