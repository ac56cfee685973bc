use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::eval::Evaluator;
use super::metrics::Summary;
use crate::ardm::{pretrain, ArdmModel, DataSource, Denoiser, PretrainConfig, Sequence};
use crate::error::{Error, Result};
use crate::netcore::{AdamWConfig, Rng};
use crate::prefdata::{generate_candidates, prompt_for};
use crate::rewards::{reward_of, RewardSpec};
use crate::schedule::SamplerConfig;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BestOfK {
    pub k: usize,
    /// Highest reward among the `k` draws, per evaluation prompt.
    pub per_prompt: Vec<f64>,
    pub reward: Summary,
}

/// Best-of-K for several `K` at once. Draws are shared: the candidates for
/// a smaller `K` are a prefix of those for a larger one, and `K = 1` scores
/// exactly the samples [`Evaluator::evaluate`] uses.
pub fn best_of_k_ladder<D: Denoiser>(model: &D, evaluator: &Evaluator, ks: &[usize]) -> Result<Vec<BestOfK>> {
    if ks.contains(&0) {
        return Err(Error::invalid("best-of-K needs K >= 1"));
    }
    let k_max = ks.iter().copied().max().unwrap_or(0);
    let mut best = vec![f64::NEG_INFINITY; evaluator.prompts.len()];
    let mut out = Vec::with_capacity(ks.len());
    let mut snapshots: Vec<(usize, Vec<f64>)> = Vec::new();
    for draw in 0..k_max {
        let rewards = evaluator.rewards(&evaluator.sample(model, draw as u64)?)?;
        for (b, r) in best.iter_mut().zip(rewards) {
            *b = b.max(r);
        }
        if ks.contains(&(draw + 1)) {
            snapshots.push((draw + 1, best.clone()));
        }
    }
    for &k in ks {
        let per_prompt = snapshots
            .iter()
            .find(|(kk, _)| *kk == k)
            .map(|(_, v)| v.clone())
            .expect("every requested K was snapshotted");
        out.push(BestOfK {
            k,
            reward: Summary::of(&per_prompt),
            per_prompt,
        });
    }
    Ok(out)
}

pub fn best_of_k<D: Denoiser>(model: &D, evaluator: &Evaluator, k: usize) -> Result<BestOfK> {
    Ok(best_of_k_ladder(model, evaluator, &[k])?.remove(0))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RaftConfig {
    pub k: usize,
    /// Prompts sampled per iteration; one kept sequence each.
    pub prompts: usize,
    pub seq_len: usize,
    pub sft_steps: usize,
    pub sft_batch: usize,
    #[serde(default)]
    pub optimizer: AdamWConfig,
    #[serde(default)]
    pub clip_norm: Option<f64>,
}

impl Default for RaftConfig {
    fn default() -> Self {
        Self {
            k: 32,
            prompts: 128,
            seq_len: 16,
            sft_steps: 200,
            sft_batch: 64,
            optimizer: AdamWConfig::desk(),
            clip_norm: None,
        }
    }
}

impl RaftConfig {
    pub fn validate(&self) -> Result<()> {
        if self.k == 0 || self.prompts == 0 || self.seq_len == 0 || self.sft_batch == 0 {
            return Err(Error::Config(
                "RAFT k, prompts, seq_len and sft_batch must be positive".into(),
            ));
        }
        self.optimizer.validate()
    }
}

/// Uniform draws, with replacement, from a fixed set of sequences.
pub struct Replay<'a>(pub &'a [Sequence]);

impl DataSource for Replay<'_> {
    fn draw(&self, rng: &mut Rng, len: usize) -> Result<Sequence> {
        let seq = &self.0[rng.below(self.0.len())];
        if seq.len() != len {
            return Err(Error::invalid(format!(
                "replay holds length {}, asked for {len}",
                seq.len()
            )));
        }
        Ok(seq.clone())
    }
}

#[derive(Clone, Debug)]
pub struct RaftIteration {
    pub model: ArdmModel,
    /// The best-of-K sequences the model was fine-tuned on.
    pub kept: Vec<Sequence>,
    pub kept_reward: Summary,
}

/// One round of rejection-sampling fine-tuning: `k` candidates per prompt
/// from `theta`, keep the highest-reward one, then fit the kept set with
/// the pretraining loss.
pub fn raft_iteration(
    theta: &ArdmModel,
    reward: &RewardSpec,
    cfg: &RaftConfig,
    sampler: &SamplerConfig,
    rng: &Rng,
) -> Result<RaftIteration> {
    cfg.validate()?;
    reward.validate(theta.arch.d)?;
    let prompt_rng = rng.derive_named("prompts");
    let cand_rng = rng.derive_named("candidates");
    let kept: Vec<(Sequence, f64)> = (0..cfg.prompts as u64)
        .into_par_iter()
        .map(|i| {
            let prompt = prompt_for(&prompt_rng, i, theta.arch.d_c);
            let cands = if cfg.k == 1 {
                crate::ardm::sample_batch(theta, &[prompt], cfg.seq_len, sampler, &cand_rng.derive(i))?
            } else {
                generate_candidates(theta, &prompt, cfg.k, cfg.seq_len, sampler, &cand_rng.derive(i))?
            };
            let mut best: Option<(Sequence, f64)> = None;
            for c in cands {
                let r = reward_of(reward, &c)?;
                if best.as_ref().is_none_or(|(_, b)| r > *b) {
                    best = Some((c, r));
                }
            }
            Ok(best.expect("at least one candidate"))
        })
        .collect::<Result<_>>()?;
    let kept_reward = Summary::of(&kept.iter().map(|(_, r)| *r).collect::<Vec<_>>());
    let kept: Vec<Sequence> = kept.into_iter().map(|(s, _)| s).collect();

    let mut model = ArdmModel::from_params(theta.params.thawed_copy(), theta.arch, theta.cond_dropout_p)?;
    if cfg.sft_steps > 0 {
        let sft = PretrainConfig {
            steps: cfg.sft_steps,
            batch_size: cfg.sft_batch,
            seq_len: cfg.seq_len,
            optimizer: cfg.optimizer,
            clip_norm: cfg.clip_norm,
        };
        pretrain(&mut model, &Replay(&kept), &sft, &rng.derive_named("sft"), |_, _| {})?;
    }
    Ok(RaftIteration {
        model,
        kept,
        kept_reward,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::align::eval::EvalConfig;
    use crate::ardm::ArdmArch;
    use crate::rewards::ArProcess;

    fn evaluator(prompts: usize) -> Evaluator {
        let cfg = EvalConfig {
            prompts,
            seq_len: 5,
            kl_samples: 1,
        };
        let sampler = SamplerConfig {
            guidance_w: 1.0,
            eta: 1.0,
            ..SamplerConfig::default()
        };
        Evaluator::new(RewardSpec::task_a(), sampler, cfg, 4, &Rng::new(1, 0)).unwrap()
    }

    #[test]
    fn k_one_is_the_plain_sample_mean() {
        let ev = evaluator(20);
        let p = ArProcess::desk_default();
        let bo1 = best_of_k(&p, &ev, 1).unwrap();
        let plain = ev.rewards(&ev.sample(&p, 0).unwrap()).unwrap();
        assert_eq!(bo1.per_prompt, plain);
        assert!(best_of_k(&p, &ev, 0).is_err());
    }

    #[test]
    fn ladder_is_pointwise_monotone_and_matches_single_runs() {
        let ev = evaluator(30);
        let p = ArProcess::desk_default();
        let ladder = best_of_k_ladder(&p, &ev, &[1, 4, 8]).unwrap();
        for w in ladder.windows(2) {
            assert!(w[0].per_prompt.iter().zip(&w[1].per_prompt).all(|(a, b)| a <= b));
        }
        assert!(ladder[2].reward.mean > ladder[0].reward.mean);
        assert_eq!(best_of_k(&p, &ev, 4).unwrap(), ladder[1]);
    }

    fn tiny() -> ArdmModel {
        let arch = ArdmArch {
            d_h: 8,
            ..ArdmArch::default()
        };
        ArdmModel::init(arch, 0.1, &mut Rng::new(2, 0)).unwrap()
    }

    fn raft_cfg(steps: usize) -> RaftConfig {
        RaftConfig {
            k: 4,
            prompts: 6,
            seq_len: 4,
            sft_steps: steps,
            sft_batch: 4,
            ..RaftConfig::default()
        }
    }

    #[test]
    fn zero_sft_steps_leave_the_model_unchanged() {
        let m = tiny();
        let sampler = SamplerConfig {
            steps: 3,
            ..SamplerConfig::default()
        };
        let it = raft_iteration(&m, &RewardSpec::task_a(), &raft_cfg(0), &sampler, &Rng::new(3, 0)).unwrap();
        assert_eq!(it.model.params, m.params);
        assert_eq!(it.kept.len(), 6);
    }

    #[test]
    fn kept_sequences_are_best_of_their_candidates() {
        let m = tiny();
        let sampler = SamplerConfig {
            steps: 3,
            ..SamplerConfig::default()
        };
        let cfg = raft_cfg(3);
        let rng = Rng::new(4, 0);
        let it = raft_iteration(&m, &RewardSpec::task_a(), &cfg, &sampler, &rng).unwrap();
        assert_ne!(it.model.params, m.params);
        let prompt = prompt_for(&rng.derive_named("prompts"), 2, 4);
        let cands =
            generate_candidates(&m, &prompt, 4, 4, &sampler, &rng.derive_named("candidates").derive(2)).unwrap();
        let best = cands
            .iter()
            .map(|c| reward_of(&RewardSpec::task_a(), c).unwrap())
            .fold(f64::NEG_INFINITY, f64::max);
        assert_eq!(reward_of(&RewardSpec::task_a(), &it.kept[2]).unwrap(), best);
    }
}
