use std::time::Instant;

use serde::{Deserialize, Serialize};

use super::dpo::dpo_batch_loss;
use super::eval::Evaluator;
use crate::ardm::ArdmModel;
use crate::error::{Error, Result};
use crate::netcore::{adamw_step, clip_global_norm, AdamWConfig, AdamWState, Rng};
use crate::prefdata::{PairStore, PreferencePair};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EarlyStop {
    /// Checkpoints whose KL metric exceeds this are never selected.
    pub kl_ceiling: f64,
    /// Stop after this many evaluations without a better selectable
    /// checkpoint; `None` runs every step.
    #[serde(default)]
    pub patience: Option<usize>,
}

impl Default for EarlyStop {
    fn default() -> Self {
        Self {
            kl_ceiling: f64::INFINITY,
            patience: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DpoConfig {
    pub beta: f64,
    #[serde(default = "yes")]
    pub d_norm: bool,
    pub batch_pairs: usize,
    pub accumulation: usize,
    #[serde(default)]
    pub optimizer: AdamWConfig,
    pub steps: usize,
    pub eval_every: usize,
    /// Pairs from the front of the store whose Δ± and margins are logged.
    pub diagnostic_pairs: usize,
    #[serde(default)]
    pub early_stop: EarlyStop,
    #[serde(default)]
    pub clip_norm: Option<f64>,
}

fn yes() -> bool {
    true
}

impl Default for DpoConfig {
    fn default() -> Self {
        Self {
            beta: 200.0,
            d_norm: true,
            batch_pairs: 16,
            accumulation: 4,
            optimizer: AdamWConfig::desk(),
            steps: 500,
            eval_every: 50,
            diagnostic_pairs: 64,
            early_stop: EarlyStop::default(),
            clip_norm: None,
        }
    }
}

impl DpoConfig {
    pub fn effective_batch(&self) -> usize {
        self.batch_pairs * self.accumulation
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.beta > 0.0 && self.beta.is_finite()) {
            return Err(Error::Config(format!("beta must be positive, got {}", self.beta)));
        }
        if self.batch_pairs == 0 || self.accumulation == 0 || self.eval_every == 0 || self.diagnostic_pairs == 0 {
            return Err(Error::Config(
                "batch_pairs, accumulation, eval_every and diagnostic_pairs must be positive".into(),
            ));
        }
        if !(self.early_stop.kl_ceiling >= 0.0) {
            return Err(Error::Config("kl_ceiling must be non-negative".into()));
        }
        if matches!(self.clip_norm, Some(c) if !(c > 0.0)) {
            return Err(Error::Config("clip_norm must be positive".into()));
        }
        self.optimizer.validate()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub step: usize,
    pub reward: f64,
    pub kl: f64,
    pub delta_plus: f64,
    pub delta_minus: f64,
    pub margin_acc: f64,
    /// Seconds since training started.
    pub wall_clock: f64,
}

#[derive(Clone, Debug)]
pub struct DpoRun {
    /// Checkpoint chosen by the early-stopping rule.
    pub selected: ArdmModel,
    pub selected_step: usize,
    /// Parameters after the last optimizer step taken.
    pub last: ArdmModel,
    pub metrics: Vec<MetricsRecord>,
    pub stopped_early: bool,
}

impl DpoRun {
    pub fn selected_record(&self) -> Option<&MetricsRecord> {
        self.metrics.iter().find(|m| m.step == self.selected_step)
    }
}

/// Fine-tunes a copy of `theta0` on `store` with the preference loss.
///
/// Each step averages pair gradients over `accumulation` micro-batches of
/// `batch_pairs`, drawn by walking per-epoch permutations of the store, then
/// takes one AdamW step. Every `eval_every` steps (and at step 0) the model
/// is scored by `evaluator` and on a fixed diagnostic subset of pairs. The
/// selected checkpoint is the highest-reward evaluation that beats step 0
/// while keeping KL within the ceiling; step 0 is selected otherwise.
///
/// `on_record` sees every metrics record with the model it describes. The
/// reference defaults to a frozen copy of `theta0`.
pub fn dpo_train(
    theta0: &ArdmModel,
    reference: Option<&ArdmModel>,
    store: &PairStore,
    cfg: &DpoConfig,
    evaluator: &Evaluator,
    rng: &Rng,
    mut on_record: impl FnMut(&MetricsRecord, &ArdmModel),
) -> Result<DpoRun> {
    cfg.validate()?;
    if store.is_empty() {
        return Err(Error::invalid("preference store is empty"));
    }
    let owned_ref;
    let reference = match reference {
        Some(r) => r,
        None => {
            owned_ref = theta0.frozen_copy();
            &owned_ref
        }
    };
    let mut theta = ArdmModel::from_params(theta0.params.thawed_copy(), theta0.arch, theta0.cond_dropout_p)?;
    let mut state = AdamWState::new(cfg.optimizer, &theta.params)?;
    let diag_pairs: Vec<&PreferencePair> = store.pairs.iter().take(cfg.diagnostic_pairs).collect();
    let diag_rng = rng.derive_named("diagnostics");
    let started = Instant::now();

    let mut metrics = Vec::new();
    let mut evaluate = |theta: &ArdmModel, step: usize| -> Result<MetricsRecord> {
        let eval = evaluator.evaluate(theta, reference)?;
        let (_, _, diag) = dpo_batch_loss(theta, reference, &diag_pairs, cfg.beta, cfg.d_norm, &diag_rng)?;
        let rec = MetricsRecord {
            step,
            reward: eval.reward.mean,
            kl: eval.kl,
            delta_plus: diag.delta_plus,
            delta_minus: diag.delta_minus,
            margin_acc: diag.preference.accuracy,
            wall_clock: started.elapsed().as_secs_f64(),
        };
        on_record(&rec, theta);
        Ok(rec)
    };

    let base = evaluate(&theta, 0)?;
    let base_reward = base.reward;
    metrics.push(base);
    let mut selected = (theta.clone(), 0usize, f64::NEG_INFINITY);
    let mut last_good_step = 0;
    let mut stale = 0;
    let mut stopped_early = false;

    let order_rng = rng.derive_named("order");
    let noise_rng = rng.derive_named("noise");
    let mut order: Vec<usize> = Vec::new();
    let mut cursor = 0;
    let mut epoch = 0u64;
    let mut next_pair = || {
        if cursor == order.len() {
            order = order_rng.derive(epoch).permutation(store.len());
            epoch += 1;
            cursor = 0;
        }
        cursor += 1;
        &store.pairs[order[cursor - 1]]
    };

    let diverged = |step, last_good_step, e: Error| match e {
        Error::NonFinite { .. } | Error::NonFiniteGradient(_) => Error::NonFiniteLoss { step, last_good_step },
        other => other,
    };
    for step in 1..=cfg.steps {
        let step_rng = noise_rng.derive(step as u64);
        let mut grads = theta.params.zeros_like();
        for micro in 0..cfg.accumulation {
            let batch: Vec<&PreferencePair> = (0..cfg.batch_pairs).map(|_| next_pair()).collect();
            let (loss, g, _) = dpo_batch_loss(
                &theta,
                reference,
                &batch,
                cfg.beta,
                cfg.d_norm,
                &step_rng.derive(micro as u64),
            )
            .map_err(|e| diverged(step, last_good_step, e))?;
            if !loss.is_finite() {
                return Err(Error::NonFiniteLoss { step, last_good_step });
            }
            grads.accumulate_scaled(1.0 / cfg.accumulation as f64, &g)?;
        }
        if let Some(max) = cfg.clip_norm {
            clip_global_norm(&mut grads, max)?;
        }
        adamw_step(&mut theta.params, &grads, &mut state).map_err(|e| diverged(step, last_good_step, e))?;

        if step % cfg.eval_every == 0 || step == cfg.steps {
            let rec = evaluate(&theta, step).map_err(|e| diverged(step, last_good_step, e))?;
            if !(rec.reward.is_finite() && rec.kl.is_finite()) {
                return Err(Error::NonFiniteLoss { step, last_good_step });
            }
            last_good_step = step;
            let selectable = rec.reward > base_reward && rec.kl <= cfg.early_stop.kl_ceiling;
            if selectable && rec.reward > selected.2 {
                selected = (theta.clone(), step, rec.reward);
                stale = 0;
            } else {
                stale += 1;
            }
            metrics.push(rec);
            if cfg.early_stop.patience.is_some_and(|p| stale >= p) && step < cfg.steps {
                stopped_early = true;
                break;
            }
        }
    }

    Ok(DpoRun {
        selected: selected.0,
        selected_step: selected.1,
        last: theta,
        metrics,
        stopped_early,
    })
}
