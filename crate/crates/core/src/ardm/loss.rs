use rayon::prelude::*;

use super::{ArdmModel, Sequence, VelocityModel};
use crate::error::{Error, Result};
use crate::netcore::{forward, gaussian, ParamSet, Rng, Tensor};
use crate::schedule::NoiseSchedule;

/// Per-token diffusion time and endpoint noise for one sequence.
#[derive(Clone, Debug, PartialEq)]
pub struct TokenNoise {
    pub t: Vec<f64>,
    pub x1: Tensor,
}

impl TokenNoise {
    /// Noisy tokens and velocity targets for `seq`.
    pub fn perturb(&self, seq: &Sequence) -> (Tensor, Tensor) {
        let sched = NoiseSchedule::linear();
        let (n, d) = (seq.len(), seq.dim());
        let mut xt = Tensor::zeros(&[n, d]);
        let mut v = Tensor::zeros(&[n, d]);
        for i in 0..n {
            let (mut a, mut b) = (vec![0.0; d], vec![0.0; d]);
            sched.perturb_slice(seq.token(i), self.x1.row(i), self.t[i], &mut a, &mut b);
            xt.row_mut(i).copy_from_slice(&a);
            v.row_mut(i).copy_from_slice(&b);
        }
        (xt, v)
    }
}

/// One uniform time and one standard-normal endpoint per token.
pub fn draw_token_noise(rng: &mut Rng, n: usize, d: usize) -> TokenNoise {
    let t = (0..n).map(|_| rng.uniform()).collect();
    let x1 = gaussian(rng, &[n, d]);
    TokenNoise { t, x1 }
}

struct Draw {
    conditioned: bool,
    noise: TokenNoise,
}

fn draw_for(rng: &Rng, index: usize, seq: &Sequence, dropout_p: f64) -> Draw {
    let mut r = rng.derive(index as u64);
    let conditioned = !r.bernoulli(dropout_p);
    let noise = draw_token_noise(&mut r, seq.len(), seq.dim());
    Draw { conditioned, noise }
}

fn check_batch(batch: &[Sequence], d: usize) -> Result<()> {
    if batch.is_empty() {
        return Err(Error::invalid("empty batch"));
    }
    if let Some(s) = batch.iter().find(|s| s.is_empty() || s.dim() != d) {
        return Err(Error::invalid(format!(
            "sequence of shape {:?} does not fit token dimension {d}",
            s.tokens.shape()
        )));
    }
    Ok(())
}

/// Flow-matching pretraining loss and its parameter gradient.
///
/// Each sequence draws its own stream `rng.derive(index)`, which decides
/// whether the prompt is dropped (probability `model.cond_dropout_p`) and
/// supplies one time and one noise vector per token. The loss is the batch
/// mean of `sum_n |v_hat_n - v_n|^2 / (N d)`.
pub fn pretrain_loss(model: &ArdmModel, batch: &[Sequence], rng: &Rng) -> Result<(f64, ParamSet)> {
    check_batch(batch, model.arch.d)?;
    let b = batch.len() as f64;
    let d = model.arch.d as f64;
    let parts: Vec<(f64, ParamSet)> = batch
        .par_iter()
        .enumerate()
        .map(|(i, seq)| {
            let draw = draw_for(rng, i, seq, model.cond_dropout_p);
            model.check_prompt(&seq.prompt, draw.conditioned)?;
            let (xt, target) = draw.noise.perturb(seq);
            let inputs = model.full_inputs(seq, &xt, &draw.noise.t);
            let (v, tape) = forward(&model.params, model.full_graph(draw.conditioned), &inputs)?;
            let mut r = v;
            r.scaled_add_assign(-1.0, &target);
            let norm = seq.len() as f64 * d;
            let loss = r.sq_norm() / norm;
            r.scale(2.0 / (norm * b));
            Ok((loss, tape.backward(&model.params, &r)?.params))
        })
        .collect::<Result<_>>()?;
    let mut grads = model.params.zeros_like();
    let mut total = 0.0;
    for (l, g) in &parts {
        total += l;
        grads.accumulate(g)?;
    }
    Ok((total / b, grads))
}

/// Value of the pretraining loss for any velocity model, with the same noise
/// draws as [`pretrain_loss`] for equal `rng` and `dropout_p`.
pub fn pretrain_loss_value<M: VelocityModel>(model: &M, batch: &[Sequence], rng: &Rng, dropout_p: f64) -> Result<f64> {
    check_batch(batch, model.token_dim())?;
    let losses: Vec<f64> = batch
        .par_iter()
        .enumerate()
        .map(|(i, seq)| {
            let draw = draw_for(rng, i, seq, dropout_p);
            let (xt, target) = draw.noise.perturb(seq);
            let mut r = model.predict(seq, &xt, &draw.noise.t, draw.conditioned)?;
            r.scaled_add_assign(-1.0, &target);
            Ok(r.sq_norm() / (seq.len() * seq.dim()) as f64)
        })
        .collect::<Result<_>>()?;
    Ok(losses.iter().sum::<f64>() / batch.len() as f64)
}
