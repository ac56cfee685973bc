use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::metrics::{kl_metric, kl_terms, Summary};
use crate::ardm::{sample_batch, ArdmModel, Denoiser, Sequence};
use crate::error::{Error, Result};
use crate::netcore::Rng;
use crate::prefdata::prompt_for;
use crate::rewards::{reward_of, RewardSpec};
use crate::schedule::SamplerConfig;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalConfig {
    pub prompts: usize,
    pub seq_len: usize,
    /// Monte-Carlo repeats per sequence in the KL metric.
    pub kl_samples: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            prompts: 500,
            seq_len: 16,
            kl_samples: 4,
        }
    }
}

impl EvalConfig {
    pub fn validate(&self) -> Result<()> {
        if self.prompts == 0 || self.seq_len < 2 || self.kl_samples == 0 {
            return Err(Error::Config(
                "evaluation needs prompts, at least two tokens and one KL sample".into(),
            ));
        }
        Ok(())
    }
}

/// A fixed evaluation protocol: the same prompts and sampling streams for
/// every model it scores, so differences between models are paired.
#[derive(Clone, Debug)]
pub struct Evaluator {
    pub reward: RewardSpec,
    pub sampler: SamplerConfig,
    pub cfg: EvalConfig,
    pub prompts: Vec<Vec<f64>>,
    rng: Rng,
}

/// Rewards of one model's samples, with its drift from a reference.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    pub rewards: Vec<f64>,
    pub reward: Summary,
    pub kl: f64,
}

impl Evaluator {
    pub fn new(reward: RewardSpec, sampler: SamplerConfig, cfg: EvalConfig, d_c: usize, rng: &Rng) -> Result<Self> {
        cfg.validate()?;
        sampler.validate()?;
        let prompt_rng = rng.derive_named("prompts");
        Ok(Self {
            prompts: (0..cfg.prompts as u64)
                .map(|i| prompt_for(&prompt_rng, i, d_c))
                .collect(),
            reward,
            sampler,
            cfg,
            rng: rng.clone(),
        })
    }

    /// Draw `j` for every prompt. Draw 0 is what [`Evaluator::evaluate`]
    /// scores; later draws extend it for best-of-K.
    pub fn sample<D: Denoiser>(&self, model: &D, draw: u64) -> Result<Vec<Sequence>> {
        let rng = self.rng.derive_named("samples").derive(draw);
        sample_batch(model, &self.prompts, self.cfg.seq_len, &self.sampler, &rng)
    }

    pub fn rewards(&self, seqs: &[Sequence]) -> Result<Vec<f64>> {
        seqs.par_iter().map(|s| reward_of(&self.reward, s)).collect()
    }

    /// Mean reward of the model's samples and the KL metric against
    /// `reference`, measured on those same samples.
    pub fn evaluate(&self, model: &ArdmModel, reference: &ArdmModel) -> Result<Evaluation> {
        let seqs = self.sample(model, 0)?;
        let rewards = self.rewards(&seqs)?;
        let kl = kl_metric(
            model,
            reference,
            &seqs,
            &self.rng.derive_named("kl"),
            self.cfg.kl_samples,
        )?;
        Ok(Evaluation {
            reward: Summary::of(&rewards),
            rewards,
            kl,
        })
    }

    /// Per-sample terms whose mean is the KL reported by
    /// [`Evaluator::evaluate`].
    pub fn kl_terms(&self, model: &ArdmModel, reference: &ArdmModel) -> Result<Vec<f64>> {
        let seqs = self.sample(model, 0)?;
        kl_terms(
            model,
            reference,
            &seqs,
            &self.rng.derive_named("kl"),
            self.cfg.kl_samples,
        )
    }
}
