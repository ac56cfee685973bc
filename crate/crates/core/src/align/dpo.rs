use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::metrics::{bradley_terry_check, BradleyTerryCheck};
use crate::ardm::{ArdmModel, Sequence, TokenNoise};
use crate::error::{Error, Result};
use crate::netcore::{forward, gaussian, logistic, softplus, ParamSet, Rng, Tape, Tensor};
use crate::prefdata::PreferencePair;

/// Named β sweeps: `task-a` and `task-b`.
pub fn beta_sweep(name: &str) -> Option<&'static [f64]> {
    match name {
        "task-a" => Some(&[200.0, 400.0, 800.0]),
        "task-b" => Some(&[800.0, 1600.0, 3200.0]),
        _ => None,
    }
}

/// Noise for one pair: a single time shared by both sequences and one
/// endpoint draw per token of each.
#[derive(Clone, Debug, PartialEq)]
pub struct PairNoise {
    pub t: f64,
    pub winner_x1: Tensor,
    pub loser_x1: Tensor,
}

impl PairNoise {
    pub fn draw(rng: &mut Rng, winner_len: usize, loser_len: usize, d: usize) -> Self {
        let t = rng.uniform();
        let winner_x1 = gaussian(rng, &[winner_len, d]);
        let loser_x1 = gaussian(rng, &[loser_len, d]);
        Self { t, winner_x1, loser_x1 }
    }

    /// Noise for the swapped pair: each sequence keeps its own draws.
    pub fn swapped(&self) -> Self {
        Self {
            t: self.t,
            winner_x1: self.loser_x1.clone(),
            loser_x1: self.winner_x1.clone(),
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct DpoDiagnostics {
    pub margin: f64,
    /// `-log sigmoid(margin)`.
    pub loss: f64,
    /// Winner: policy error minus reference error.
    pub delta_plus: f64,
    /// Loser: policy error minus reference error.
    pub delta_minus: f64,
}

/// Scale applied to error differences inside the sigmoid.
pub fn margin_scale(beta: f64, d: usize, d_norm: bool) -> Result<f64> {
    if !(beta > 0.0 && beta.is_finite()) {
        return Err(Error::invalid(format!("beta must be positive, got {beta}")));
    }
    Ok(if d_norm { beta / d as f64 } else { beta })
}

struct Side<'g> {
    err_theta: f64,
    err_ref: f64,
    residual: Tensor,
    tape: Tape<'g>,
}

fn side<'g>(theta: &'g ArdmModel, reference: &ArdmModel, seq: &Sequence, t: f64, x1: &Tensor) -> Result<Side<'g>> {
    if x1.shape() != seq.tokens.shape() {
        return Err(Error::shape("dpo", "noise does not match the sequence"));
    }
    let noise = TokenNoise {
        t: vec![t; seq.len()],
        x1: x1.clone(),
    };
    let (xt, target) = noise.perturb(seq);
    let inputs = theta.full_inputs(seq, &xt, &noise.t);
    let (v, tape) = forward(&theta.params, theta.full_graph(true), &inputs)?;
    let (v_ref, _) = forward(&reference.params, reference.full_graph(true), &inputs)?;
    let n = seq.len() as f64;
    let mut residual = v;
    residual.scaled_add_assign(-1.0, &target);
    let mut ref_res = v_ref;
    ref_res.scaled_add_assign(-1.0, &target);
    Ok(Side {
        err_theta: residual.sq_norm() / n,
        err_ref: ref_res.sq_norm() / n,
        residual,
        tape,
    })
}

fn check_models(theta: &ArdmModel, reference: &ArdmModel) -> Result<()> {
    if !theta.same_architecture(reference) {
        return Err(Error::invalid("policy and reference architectures differ"));
    }
    if !reference.params.is_frozen() {
        return Err(Error::invalid("reference model must be frozen"));
    }
    Ok(())
}

/// Preference loss of one pair under explicit noise.
///
/// Errors are token means of `|v_hat - v|^2`, taken separately over the
/// winner and loser tokens. With `s = beta / d` (or `beta` when `d_norm` is
/// off) the margin is `s [(ref_w - theta_w) - (ref_l - theta_l)]` and the loss
/// is `-log sigmoid(margin)`. Gradients are taken w.r.t. `theta` only.
pub fn dpo_pair_loss_with_noise(
    theta: &ArdmModel,
    reference: &ArdmModel,
    winner: &Sequence,
    loser: &Sequence,
    beta: f64,
    d_norm: bool,
    noise: &PairNoise,
) -> Result<(f64, ParamSet, DpoDiagnostics)> {
    check_models(theta, reference)?;
    let scale = margin_scale(beta, theta.arch.d, d_norm)?;
    let mut w = side(theta, reference, winner, noise.t, &noise.winner_x1)?;
    let mut l = side(theta, reference, loser, noise.t, &noise.loser_x1)?;

    let margin = scale * ((w.err_ref - w.err_theta) - (l.err_ref - l.err_theta));
    let loss = softplus(-margin);
    let dloss_dmargin = -logistic(-margin);
    w.residual.scale(dloss_dmargin * -scale * 2.0 / winner.len() as f64);
    l.residual.scale(dloss_dmargin * scale * 2.0 / loser.len() as f64);
    let mut grads = w.tape.backward(&theta.params, &w.residual)?.params;
    grads.accumulate(&l.tape.backward(&theta.params, &l.residual)?.params)?;
    let diag = DpoDiagnostics {
        margin,
        loss,
        delta_plus: w.err_theta - w.err_ref,
        delta_minus: l.err_theta - l.err_ref,
    };
    Ok((loss, grads, diag))
}

/// Loss of [`dpo_pair_loss_with_noise`] without the backward pass.
pub fn dpo_pair_loss_value_with_noise(
    theta: &ArdmModel,
    reference: &ArdmModel,
    winner: &Sequence,
    loser: &Sequence,
    beta: f64,
    d_norm: bool,
    noise: &PairNoise,
) -> Result<f64> {
    check_models(theta, reference)?;
    let scale = margin_scale(beta, theta.arch.d, d_norm)?;
    let w = side(theta, reference, winner, noise.t, &noise.winner_x1)?;
    let l = side(theta, reference, loser, noise.t, &noise.loser_x1)?;
    Ok(softplus(
        -scale * ((w.err_ref - w.err_theta) - (l.err_ref - l.err_theta)),
    ))
}

/// [`dpo_pair_loss_with_noise`] with noise drawn from `rng`.
pub fn dpo_pair_loss(
    theta: &ArdmModel,
    reference: &ArdmModel,
    pair: &PreferencePair,
    beta: f64,
    d_norm: bool,
    rng: &mut Rng,
) -> Result<(f64, ParamSet, DpoDiagnostics)> {
    let noise = PairNoise::draw(rng, pair.winner.len(), pair.loser.len(), theta.arch.d);
    dpo_pair_loss_with_noise(theta, reference, &pair.winner, &pair.loser, beta, d_norm, &noise)
}

/// Averages over a batch of pairs.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct BatchDiagnostics {
    pub loss: f64,
    pub margin: f64,
    pub delta_plus: f64,
    pub delta_minus: f64,
    pub preference: BradleyTerryCheck,
}

impl BatchDiagnostics {
    pub fn from_pairs(diags: &[DpoDiagnostics]) -> Result<Self> {
        let n = diags.len() as f64;
        let mean = |f: fn(&DpoDiagnostics) -> f64| diags.iter().map(f).sum::<f64>() / n;
        let margins: Vec<f64> = diags.iter().map(|d| d.margin).collect();
        Ok(Self {
            loss: mean(|d| d.loss),
            margin: mean(|d| d.margin),
            delta_plus: mean(|d| d.delta_plus),
            delta_minus: mean(|d| d.delta_minus),
            preference: bradley_terry_check(&margins)?,
        })
    }
}

/// Mean loss and gradient over `pairs`; pair `i` draws from `rng.derive(i)`.
pub fn dpo_batch_loss(
    theta: &ArdmModel,
    reference: &ArdmModel,
    pairs: &[&PreferencePair],
    beta: f64,
    d_norm: bool,
    rng: &Rng,
) -> Result<(f64, ParamSet, BatchDiagnostics)> {
    if pairs.is_empty() {
        return Err(Error::invalid("empty pair batch"));
    }
    let parts: Vec<(f64, ParamSet, DpoDiagnostics)> = pairs
        .par_iter()
        .enumerate()
        .map(|(i, p)| dpo_pair_loss(theta, reference, p, beta, d_norm, &mut rng.derive(i as u64)))
        .collect::<Result<_>>()?;
    let n = pairs.len() as f64;
    let mut grads = theta.params.zeros_like();
    let mut loss = 0.0;
    for (l, g, _) in &parts {
        loss += l;
        grads.accumulate_scaled(1.0 / n, g)?;
    }
    let diags: Vec<DpoDiagnostics> = parts.iter().map(|p| p.2).collect();
    Ok((loss / n, grads, BatchDiagnostics::from_pairs(&diags)?))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ardm::ArdmArch;
    use crate::netcore::grad_check_objective;

    fn setup(seed: u64) -> (ArdmModel, ArdmModel, PreferencePair) {
        let mut rng = Rng::new(seed, 0);
        let base = ArdmModel::init(
            ArdmArch {
                d_h: 16,
                ..ArdmArch::default()
            },
            0.1,
            &mut rng,
        )
        .unwrap();
        let reference = base.frozen_copy();
        let mut theta = base.clone();
        theta
            .params
            .update(|_, t| {
                for v in t.data_mut() {
                    *v += 0.05 * rng.normal();
                }
                Ok(())
            })
            .unwrap();
        let prompt = rng.normal_vec(4);
        let pair = PreferencePair {
            winner: Sequence::new(prompt.clone(), gaussian(&mut rng, &[3, 2])).unwrap(),
            loser: Sequence::new(prompt.clone(), gaussian(&mut rng, &[5, 2])).unwrap(),
            prompt,
            r_w: 1.0,
            r_l: 0.0,
            source_model: "m".into(),
            seed: 0,
        };
        (theta, reference, pair)
    }

    #[test]
    fn identical_policy_gives_log_two() {
        let (_, reference, pair) = setup(1);
        let theta = ArdmModel::from_params(reference.params.thawed_copy(), reference.arch, 0.1).unwrap();
        let (loss, _, diag) = dpo_pair_loss(&theta, &reference, &pair, 200.0, true, &mut Rng::new(2, 0)).unwrap();
        assert_eq!(diag.margin, 0.0);
        assert_eq!(loss, std::f64::consts::LN_2);
        assert_eq!((diag.delta_plus, diag.delta_minus), (0.0, 0.0));
    }

    #[test]
    fn value_only_loss_matches_full_loss() {
        let (theta, reference, pair) = setup(9);
        let noise = PairNoise::draw(&mut Rng::new(10, 0), 3, 5, 2);
        let (full, _, _) =
            dpo_pair_loss_with_noise(&theta, &reference, &pair.winner, &pair.loser, 200.0, true, &noise).unwrap();
        let value =
            dpo_pair_loss_value_with_noise(&theta, &reference, &pair.winner, &pair.loser, 200.0, true, &noise).unwrap();
        assert_eq!(full.to_bits(), value.to_bits());
    }

    #[test]
    fn symmetric_pair_has_zero_gradient() {
        let (theta, reference, pair) = setup(3);
        let mut rng = Rng::new(4, 0);
        let shared = gaussian(&mut rng, &[3, 2]);
        let noise = PairNoise {
            t: 0.37,
            winner_x1: shared.clone(),
            loser_x1: shared,
        };
        let (loss, grads, diag) =
            dpo_pair_loss_with_noise(&theta, &reference, &pair.winner, &pair.winner, 400.0, true, &noise).unwrap();
        assert_eq!(diag.margin, 0.0);
        assert_eq!(loss, std::f64::consts::LN_2);
        assert!(grads.max_abs() < 1e-10);
    }

    #[test]
    fn swap_negates_margin_exactly_and_beta_is_linear() {
        let (theta, reference, pair) = setup(5);
        let noise = PairNoise::draw(&mut Rng::new(6, 0), 3, 5, 2);
        let run = |w: &Sequence, l: &Sequence, beta: f64, n: &PairNoise| {
            dpo_pair_loss_with_noise(&theta, &reference, w, l, beta, true, n)
                .unwrap()
                .2
        };
        let a = run(&pair.winner, &pair.loser, 200.0, &noise);
        let b = run(&pair.loser, &pair.winner, 200.0, &noise.swapped());
        assert_ne!(a.margin, 0.0);
        assert_eq!(a.margin.to_bits(), (-b.margin).to_bits());
        let c = run(&pair.winner, &pair.loser, 400.0, &noise);
        assert_eq!(c.margin, 2.0 * a.margin);
        assert_eq!(c.delta_plus, a.delta_plus);
    }

    #[test]
    fn loss_is_minus_log_sigmoid_of_margin() {
        let (theta, reference, pair) = setup(7);
        let (loss, _, d) = dpo_pair_loss(&theta, &reference, &pair, 800.0, true, &mut Rng::new(8, 0)).unwrap();
        assert!((loss + logistic(d.margin).ln()).abs() < 1e-12);
        assert_eq!(loss, d.loss);
    }

    #[test]
    fn gradient_agrees_with_finite_differences() {
        for seed in [9, 10] {
            let (theta, reference, pair) = setup(seed);
            let noise = PairNoise::draw(&mut Rng::new(seed, 1), 3, 5, 2);
            let objective = |p: &ParamSet| {
                let probe = ArdmModel::from_params(p.clone(), theta.arch, 0.1)?;
                let (l, g, _) =
                    dpo_pair_loss_with_noise(&probe, &reference, &pair.winner, &pair.loser, 50.0, true, &noise)?;
                Ok((l, g))
            };
            let rep = grad_check_objective(&theta.params, objective, 1e-5, 0.05, &mut Rng::new(seed, 2)).unwrap();
            assert!(rep.max_rel_err < 1e-4, "{rep:?}");
        }
    }

    #[test]
    fn invalid_inputs() {
        let (theta, reference, pair) = setup(11);
        let mut rng = Rng::new(0, 0);
        assert!(dpo_pair_loss(&theta, &reference, &pair, 0.0, true, &mut rng).is_err());
        assert!(dpo_pair_loss(&theta, &reference, &pair, -1.0, true, &mut rng).is_err());
        let thawed = ArdmModel::from_params(reference.params.thawed_copy(), reference.arch, 0.1).unwrap();
        assert!(dpo_pair_loss(&theta, &thawed, &pair, 1.0, true, &mut rng).is_err());
        let other = ArdmModel::init(
            ArdmArch {
                d_h: 8,
                ..ArdmArch::default()
            },
            0.1,
            &mut rng,
        )
        .unwrap();
        assert!(dpo_pair_loss(&other, &reference, &pair, 1.0, true, &mut rng).is_err());
    }

    #[test]
    fn presets() {
        assert_eq!(beta_sweep("task-a").unwrap(), &[200.0, 400.0, 800.0]);
        assert_eq!(beta_sweep("task-b").unwrap(), &[800.0, 1600.0, 3200.0]);
        assert!(beta_sweep("x").is_none());
    }

    #[test]
    fn batch_matches_single_pairs() {
        let (theta, reference, pair) = setup(12);
        let rng = Rng::new(13, 0);
        let pairs = [&pair, &pair];
        let (loss, grads, diag) = dpo_batch_loss(&theta, &reference, &pairs, 100.0, true, &rng).unwrap();
        let (l0, g0, _) = dpo_pair_loss(&theta, &reference, &pair, 100.0, true, &mut rng.derive(0)).unwrap();
        let (l1, g1, _) = dpo_pair_loss(&theta, &reference, &pair, 100.0, true, &mut rng.derive(1)).unwrap();
        assert!((loss - (l0 + l1) / 2.0).abs() < 1e-14);
        let mut expect = g0.clone();
        expect.accumulate(&g1).unwrap();
        expect.scale(0.5).unwrap();
        let mut diff = grads.clone();
        diff.accumulate_scaled(-1.0, &expect).unwrap();
        assert!(diff.max_abs() < 1e-14);
        assert!((0.0..=1.0).contains(&diag.preference.accuracy));
    }
}
