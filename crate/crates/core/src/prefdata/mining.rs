use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{PairStore, PreferencePair};
use crate::ardm::{sample_batch, Denoiser, Sequence};
use crate::error::{Error, Result};
use crate::netcore::Rng;
use crate::rewards::{reward_of, RewardSpec};
use crate::schedule::SamplerConfig;

/// Reward spread below which a candidate set yields no pair.
pub const DEFAULT_TIE_EPSILON: f64 = 1e-9;

/// `K` independent candidates for one prompt; candidate `j` uses `rng.derive(j)`.
pub fn generate_candidates<D: Denoiser>(
    model: &D,
    prompt: &[f64],
    k: usize,
    len: usize,
    sampler: &SamplerConfig,
    rng: &Rng,
) -> Result<Vec<Sequence>> {
    if k < 2 {
        return Err(Error::invalid(format!("need at least 2 candidates, got {k}")));
    }
    let prompts = vec![prompt.to_vec(); k];
    sample_batch(model, &prompts, len, sampler, rng)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Selection {
    Pair {
        winner: usize,
        loser: usize,
        r_w: f64,
        r_l: f64,
    },
    /// All rewards lie within the tie tolerance.
    Skip,
}

/// Best and worst candidate by reward, lowest index winning ties.
pub fn select_by_rewards(rewards: &[f64], tie_epsilon: f64) -> Result<Selection> {
    if rewards.is_empty() {
        return Err(Error::invalid("no candidates to select from"));
    }
    if let Some(i) = rewards.iter().position(|r| !r.is_finite()) {
        return Err(Error::invalid(format!("candidate {i} has a non-finite reward")));
    }
    let (mut hi, mut lo) = (0, 0);
    for (i, &r) in rewards.iter().enumerate() {
        if r > rewards[hi] {
            hi = i;
        }
        if r < rewards[lo] {
            lo = i;
        }
    }
    if rewards[hi] - rewards[lo] < tie_epsilon {
        return Ok(Selection::Skip);
    }
    Ok(Selection::Pair {
        winner: hi,
        loser: lo,
        r_w: rewards[hi],
        r_l: rewards[lo],
    })
}

pub fn select_pair(candidates: &[Sequence], spec: &RewardSpec, tie_epsilon: f64) -> Result<Selection> {
    let rewards = candidates
        .iter()
        .map(|c| reward_of(spec, c))
        .collect::<Result<Vec<_>>>()?;
    select_by_rewards(&rewards, tie_epsilon)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MiningConfig {
    pub k: usize,
    pub pairs: usize,
    pub seq_len: usize,
    #[serde(default = "default_tie")]
    pub tie_epsilon: f64,
    /// Prompts tried per requested pair before giving up.
    #[serde(default = "default_attempts")]
    pub max_attempts_per_pair: usize,
}

fn default_tie() -> f64 {
    DEFAULT_TIE_EPSILON
}

fn default_attempts() -> usize {
    4
}

impl MiningConfig {
    pub fn task_a() -> Self {
        Self {
            k: 32,
            pairs: 4000,
            seq_len: 16,
            tie_epsilon: DEFAULT_TIE_EPSILON,
            max_attempts_per_pair: default_attempts(),
        }
    }

    pub fn task_b() -> Self {
        Self {
            k: 16,
            pairs: 8000,
            ..Self::task_a()
        }
    }

    pub fn preset(name: &str) -> Option<Self> {
        match name {
            "task-a" => Some(Self::task_a()),
            "task-b" => Some(Self::task_b()),
            _ => None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.k < 2 || self.seq_len == 0 || self.max_attempts_per_pair == 0 {
            return Err(Error::Config("mining needs k >= 2 and positive lengths".into()));
        }
        if !(self.tie_epsilon >= 0.0) {
            return Err(Error::Config("tie_epsilon must be non-negative".into()));
        }
        Ok(())
    }
}

/// Prompt `i` of a mining or evaluation run: standard normal, from
/// `rng.derive(i)`.
pub fn prompt_for(rng: &Rng, index: u64, d_c: usize) -> Vec<f64> {
    rng.derive(index).derive_named("prompt").normal_vec(d_c)
}

#[allow(clippy::too_many_arguments)]
fn mine_one<D: Denoiser>(
    model: &D,
    spec: &RewardSpec,
    cfg: &MiningConfig,
    sampler: &SamplerConfig,
    rng: &Rng,
    d_c: usize,
    index: u64,
    model_hash: &str,
) -> Result<Option<PreferencePair>> {
    let prompt = prompt_for(rng, index, d_c);
    let cand_rng = rng.derive(index).derive_named("candidates");
    let candidates = generate_candidates(model, &prompt, cfg.k, cfg.seq_len, sampler, &cand_rng)?;
    Ok(match select_pair(&candidates, spec, cfg.tie_epsilon)? {
        Selection::Skip => None,
        Selection::Pair {
            winner,
            loser,
            r_w,
            r_l,
        } => Some(PreferencePair {
            prompt,
            winner: candidates[winner].clone(),
            loser: candidates[loser].clone(),
            r_w,
            r_l,
            source_model: model_hash.to_string(),
            seed: index,
        }),
    })
}

/// Mines `cfg.pairs` pairs from prompts `0, 1, 2, ...`, skipping ties.
///
/// Prompts are processed in parallel waves and collected in index order, so
/// the store is identical for any number of worker threads.
#[allow(clippy::too_many_arguments)]
pub fn mine_pairs<D: Denoiser>(
    model: &D,
    spec: &RewardSpec,
    cfg: &MiningConfig,
    sampler: &SamplerConfig,
    rng: &Rng,
    d_c: usize,
    model_hash: &str,
    config_hash: &str,
) -> Result<PairStore> {
    cfg.validate()?;
    sampler.validate()?;
    spec.validate(model.token_dim())?;
    let mut store = PairStore::new(spec.clone(), cfg.k, model_hash, config_hash);
    let limit = (cfg.pairs * cfg.max_attempts_per_pair) as u64;
    let mut next = 0u64;
    while store.len() < cfg.pairs {
        if next >= limit {
            return Err(Error::invalid(format!(
                "only {} of {} pairs after {limit} prompts; rewards are tied too often",
                store.len(),
                cfg.pairs
            )));
        }
        let wave = ((cfg.pairs - store.len()) as u64).min(limit - next);
        let found: Vec<Option<PreferencePair>> = (next..next + wave)
            .into_par_iter()
            .map(|i| mine_one(model, spec, cfg, sampler, rng, d_c, i, model_hash))
            .collect::<Result<_>>()?;
        for pair in found.into_iter().flatten() {
            if store.len() == cfg.pairs {
                break;
            }
            store.push(pair)?;
        }
        next += wave;
    }
    Ok(store)
}
