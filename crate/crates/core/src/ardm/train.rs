use serde::{Deserialize, Serialize};

use super::{pretrain_loss, ArdmModel, Sequence};
use crate::error::{Error, Result};
use crate::netcore::{adamw_step, clip_global_norm, AdamWConfig, AdamWState, Rng};

/// Anything that can draw training sequences of a given length.
pub trait DataSource: Sync {
    fn draw(&self, rng: &mut Rng, len: usize) -> Result<Sequence>;
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PretrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub seq_len: usize,
    #[serde(default)]
    pub optimizer: AdamWConfig,
    /// Global gradient-norm cap; `None` disables clipping.
    #[serde(default)]
    pub clip_norm: Option<f64>,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            steps: 5000,
            batch_size: 64,
            seq_len: 16,
            optimizer: AdamWConfig::desk(),
            clip_norm: None,
        }
    }
}

impl PretrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 || self.batch_size == 0 || self.seq_len == 0 {
            return Err(Error::Config(
                "pretrain steps, batch_size and seq_len must be positive".into(),
            ));
        }
        self.optimizer.validate()
    }
}

#[derive(Clone, Debug)]
pub struct PretrainReport {
    /// Training loss at each step, before that step's update.
    pub losses: Vec<f64>,
    pub optimizer: AdamWState,
}

impl PretrainReport {
    /// Mean loss over the first and last `window` steps.
    pub fn head_tail_means(&self, window: usize) -> (f64, f64) {
        let w = window.clamp(1, self.losses.len().max(1));
        let mean = |s: &[f64]| s.iter().sum::<f64>() / s.len() as f64;
        (mean(&self.losses[..w]), mean(&self.losses[self.losses.len() - w..]))
    }
}

/// Fits `model` to sequences from `source` with AdamW.
///
/// Step `s` draws its batch from `rng.derive(s)`; prompts and tokens come
/// from `source`, diffusion noise from a separate child stream.
pub fn pretrain<S: DataSource>(
    model: &mut ArdmModel,
    source: &S,
    cfg: &PretrainConfig,
    rng: &Rng,
    mut on_step: impl FnMut(usize, f64),
) -> Result<PretrainReport> {
    cfg.validate()?;
    let mut state = AdamWState::new(cfg.optimizer, &model.params)?;
    let mut losses = Vec::with_capacity(cfg.steps);
    for step in 0..cfg.steps {
        let step_rng = rng.derive(step as u64);
        let data_rng = step_rng.derive_named("data");
        let batch = (0..cfg.batch_size)
            .map(|i| source.draw(&mut data_rng.derive(i as u64), cfg.seq_len))
            .collect::<Result<Vec<_>>>()?;
        let (loss, mut grads) = pretrain_loss(model, &batch, &step_rng.derive_named("noise"))?;
        if !loss.is_finite() {
            return Err(Error::NonFiniteLoss {
                step,
                last_good_step: 0,
            });
        }
        if let Some(max) = cfg.clip_norm {
            clip_global_norm(&mut grads, max)?;
        }
        adamw_step(&mut model.params, &grads, &mut state)?;
        losses.push(loss);
        on_step(step, loss);
    }
    Ok(PretrainReport {
        losses,
        optimizer: state,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ardm::ArdmArch;
    use crate::netcore::gaussian;

    struct Fixed;

    impl DataSource for Fixed {
        fn draw(&self, rng: &mut Rng, len: usize) -> Result<Sequence> {
            let prompt = rng.normal_vec(4);
            let mut tokens = gaussian(rng, &[len, 2]);
            tokens.scale(0.1);
            for n in 0..len {
                tokens.row_mut(n)[0] += prompt[0];
            }
            Sequence::new(prompt, tokens)
        }
    }

    #[test]
    fn short_run_reduces_loss_and_is_reproducible() {
        let arch = ArdmArch {
            d_h: 16,
            ..ArdmArch::default()
        };
        let cfg = PretrainConfig {
            steps: 60,
            batch_size: 8,
            seq_len: 4,
            optimizer: AdamWConfig {
                lr: 3e-3,
                ..AdamWConfig::desk()
            },
            clip_norm: Some(1.0),
        };
        let run = || {
            let mut m = ArdmModel::init(arch, 0.1, &mut Rng::new(1, 0)).unwrap();
            let rep = pretrain(&mut m, &Fixed, &cfg, &Rng::new(2, 0), |_, _| {}).unwrap();
            (m, rep)
        };
        let (m1, r1) = run();
        let (m2, r2) = run();
        assert_eq!(r1.losses, r2.losses);
        assert_eq!(m1.params, m2.params);
        let (first, last) = r1.head_tail_means(10);
        assert!(last < 0.8 * first, "{first} -> {last}");
        assert_eq!(r1.optimizer.step, 60);
    }

    #[test]
    fn zero_steps_rejected() {
        let cfg = PretrainConfig {
            steps: 0,
            ..PretrainConfig::default()
        };
        assert!(cfg.validate().is_err());
    }
}
