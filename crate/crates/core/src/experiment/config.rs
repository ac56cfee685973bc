use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::align::{DpoConfig, EvalConfig, RaftConfig};
use crate::ardm::{ArdmArch, PretrainConfig};
use crate::error::{Error, Result};
use crate::netcore::hex16;
use crate::prefdata::MiningConfig;
use crate::rewards::{ArProcess, RewardSpec};
use crate::schedule::SamplerConfig;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub d: usize,
    pub d_c: usize,
    pub d_h: usize,
    pub encoder_depth: usize,
    pub head_depth: usize,
    pub time_dim: usize,
    pub max_len: usize,
    /// Probability of replacing the prompt by the learned null embedding
    /// during pretraining.
    pub cond_dropout: f64,
}

impl ModelConfig {
    pub fn arch(&self) -> ArdmArch {
        ArdmArch {
            d: self.d,
            d_c: self.d_c,
            d_h: self.d_h,
            encoder_depth: self.encoder_depth,
            head_depth: self.head_depth,
            time_dim: self.time_dim,
            max_len: self.max_len,
        }
    }
}

impl Default for ModelConfig {
    fn default() -> Self {
        let a = ArdmArch::default();
        Self {
            d: a.d,
            d_c: a.d_c,
            d_h: a.d_h,
            encoder_depth: a.encoder_depth,
            head_depth: a.head_depth,
            time_dim: a.time_dim,
            max_len: a.max_len,
            cond_dropout: 0.1,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RaftStage {
    pub iterations: usize,
    pub iteration: RaftConfig,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BokStage {
    pub ks: Vec<usize>,
}

/// Everything a run needs. One master `seed` keys all randomness.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub name: String,
    pub seed: u64,
    pub model: ModelConfig,
    pub process: ArProcess,
    pub reward: RewardSpec,
    pub sampler: SamplerConfig,
    pub pretrain: PretrainConfig,
    pub mining: MiningConfig,
    pub dpo: DpoConfig,
    /// Prompts scoring the DPO trajectory and choosing its checkpoint; kept
    /// apart from `eval` so the final comparison is not the selection set.
    pub selection: EvalConfig,
    pub raft: RaftStage,
    pub bok: BokStage,
    pub eval: EvalConfig,
}

pub const PRESETS: &[&str] = &["base", "task-a", "task-b", "smoke"];

fn base() -> ExperimentConfig {
    ExperimentConfig {
        name: "base".into(),
        seed: 20_251_016,
        model: ModelConfig::default(),
        process: ArProcess::desk_default(),
        reward: RewardSpec::task_a(),
        sampler: SamplerConfig::default(),
        pretrain: PretrainConfig::default(),
        mining: MiningConfig::task_a(),
        dpo: DpoConfig::default(),
        selection: EvalConfig {
            prompts: 128,
            ..EvalConfig::default()
        },
        raft: RaftStage {
            iterations: 3,
            iteration: RaftConfig::default(),
        },
        bok: BokStage { ks: vec![16, 64] },
        eval: EvalConfig::default(),
    }
}

fn builtin(name: &str) -> Option<ExperimentConfig> {
    let mut cfg = base();
    match name {
        "base" => {}
        "task-a" => {
            cfg.name = name.into();
        }
        "task-b" => {
            cfg.name = name.into();
            cfg.reward = RewardSpec::task_b();
            cfg.mining = MiningConfig::task_b();
            cfg.dpo.beta = 800.0;
            cfg.dpo.optimizer.lr = 3e-4;
        }
        "smoke" => {
            cfg.name = name.into();
            cfg.model.d_h = 16;
            cfg.sampler.steps = 4;
            cfg.pretrain.steps = 40;
            cfg.pretrain.batch_size = 8;
            cfg.pretrain.seq_len = 6;
            cfg.mining.k = 4;
            cfg.mining.pairs = 16;
            cfg.mining.seq_len = 6;
            cfg.dpo.steps = 6;
            cfg.dpo.eval_every = 3;
            cfg.dpo.batch_pairs = 2;
            cfg.dpo.accumulation = 2;
            cfg.dpo.diagnostic_pairs = 4;
            cfg.selection = EvalConfig {
                prompts: 4,
                seq_len: 6,
                kl_samples: 1,
            };
            cfg.raft.iterations = 2;
            cfg.raft.iteration.k = 4;
            cfg.raft.iteration.prompts = 4;
            cfg.raft.iteration.seq_len = 6;
            cfg.raft.iteration.sft_steps = 3;
            cfg.raft.iteration.sft_batch = 4;
            cfg.bok.ks = vec![2, 4];
            cfg.eval = EvalConfig {
                prompts: 8,
                seq_len: 6,
                kl_samples: 1,
            };
        }
        _ => return None,
    }
    Some(cfg)
}

fn merge(base: &mut toml::Value, over: toml::Value) {
    match (base, over) {
        (toml::Value::Table(b), toml::Value::Table(o)) => {
            for (k, v) in o {
                match b.get_mut(&k) {
                    Some(slot) if slot.is_table() && v.is_table() => merge(slot, v),
                    _ => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (b, o) => *b = o,
    }
}

fn parse_scalar(raw: &str) -> toml::Value {
    toml::from_str::<toml::Table>(&format!("v = {raw}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()))
}

fn set_path(root: &mut toml::Value, path: &str, value: toml::Value) -> Result<()> {
    let mut node = root;
    let keys: Vec<&str> = path.split('.').collect();
    for (i, key) in keys.iter().enumerate() {
        let table = node
            .as_table_mut()
            .ok_or_else(|| Error::Config(format!("`{}` is not a table", keys[..i].join("."))))?;
        if i + 1 == keys.len() {
            table.insert(key.to_string(), value);
            return Ok(());
        }
        node = table
            .entry(key.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
    }
    Err(Error::Config("empty override key".into()))
}

impl ExperimentConfig {
    pub fn preset(name: &str) -> Option<Self> {
        builtin(name)
    }

    /// Parses a config document. A top-level `extends = "<preset>"` starts
    /// from that preset and overlays the document's keys on it.
    pub fn from_toml(text: &str) -> Result<Self> {
        Self::from_toml_with(text, &[])
    }

    /// [`ExperimentConfig::from_toml`] followed by `key.path=value`
    /// overrides, applied before validation.
    pub fn from_toml_with(text: &str, overrides: &[String]) -> Result<Self> {
        let mut doc: toml::Value = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        let parent = doc
            .as_table_mut()
            .and_then(|t| t.remove("extends"))
            .map(|v| {
                v.as_str()
                    .map(str::to_string)
                    .ok_or_else(|| Error::Config("`extends` must be a string".into()))
            })
            .transpose()?;
        let mut value = match parent {
            Some(name) => {
                let p = builtin(&name).ok_or_else(|| Error::Config(format!("unknown preset `{name}`")))?;
                toml::Value::try_from(p).map_err(|e| Error::Config(e.to_string()))?
            }
            None => toml::Value::Table(toml::Table::new()),
        };
        merge(&mut value, doc);
        Self::finish(value, overrides)
    }

    /// A preset with `key.path=value` overrides.
    pub fn preset_with(name: &str, overrides: &[String]) -> Result<Self> {
        let p = builtin(name).ok_or_else(|| Error::Config(format!("unknown preset `{name}`; known: {PRESETS:?}")))?;
        Self::finish(
            toml::Value::try_from(p).map_err(|e| Error::Config(e.to_string()))?,
            overrides,
        )
    }

    fn finish(mut value: toml::Value, overrides: &[String]) -> Result<Self> {
        for o in overrides {
            let (k, v) = o
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("override `{o}` is not key=value")))?;
            set_path(&mut value, k.trim(), parse_scalar(v.trim()))?;
        }
        let cfg: Self = value
            .try_into()
            .map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        let arch = self.model.arch();
        arch.validate().map_err(|e| Error::Config(e.to_string()))?;
        if !(0.0..1.0).contains(&self.model.cond_dropout) {
            return Err(Error::Config("cond_dropout must lie in [0, 1)".into()));
        }
        if self.process.dim() != arch.d || self.process.prompt_dim() != arch.d_c {
            return Err(Error::Config("process dimensions do not match the model".into()));
        }
        self.reward.validate(arch.d)?;
        self.sampler.validate().map_err(|e| Error::Config(e.to_string()))?;
        self.pretrain.validate()?;
        self.mining.validate()?;
        self.dpo.validate()?;
        self.selection.validate()?;
        self.raft.iteration.validate()?;
        self.eval.validate()?;
        if self.bok.ks.is_empty() || self.bok.ks.contains(&0) {
            return Err(Error::Config("bok.ks must list positive K values".into()));
        }
        let longest = [
            self.pretrain.seq_len,
            self.mining.seq_len,
            self.eval.seq_len,
            self.selection.seq_len,
            self.raft.iteration.seq_len,
        ];
        if longest.iter().any(|&l| l > arch.max_len) {
            return Err(Error::Config(format!(
                "a sequence length exceeds max_len {}",
                arch.max_len
            )));
        }
        Ok(())
    }

    /// Short digest of the configuration, independent of key order and
    /// formatting.
    pub fn hash(&self) -> String {
        let canonical = serde_json::to_value(self).expect("config serializes").to_string();
        hex16(&Sha256::digest(canonical.as_bytes()))
    }
}
