//! Per-step KL terms of the reverse chain and a small instance on which the
//! preference objective and its sampled bound can both be computed exactly.
//!
//! For the linear schedule the reverse step from `t` to `s < t` given the
//! clean value `x0` is Gaussian with
//!
//! ```text
//! mean = (a_{t|s} sigma_s^2 / sigma_t^2) x_t + (alpha_s sigma_{t|s}^2 / sigma_t^2) x0
//! var  = sigma_{t|s}^2 sigma_s^2 / sigma_t^2
//! ```
//!
//! where `a_{t|s} = alpha_t / alpha_s` and
//! `sigma_{t|s}^2 = sigma_t^2 - a_{t|s}^2 sigma_s^2`. A model step is the same
//! Gaussian with `x0` replaced by the prediction `x_t - t v_hat`, so the KL
//! from the true step to the model step is `w(s, t) (v_hat - v)^2`.

use crate::error::{Error, Result};
use crate::netcore::{softplus, Rng};

fn transition(s: f64, t: f64) -> Result<(f64, f64, f64, f64)> {
    if !(0.0 < s && s < t && t <= 1.0) {
        return Err(Error::invalid(format!("need 0 < s < t <= 1, got s={s}, t={t}")));
    }
    let (alpha_s, sigma_s) = (1.0 - s, s);
    let (alpha_t, sigma_t) = (1.0 - t, t);
    let a_ts = alpha_t / alpha_s;
    let var_ts = sigma_t * sigma_t - a_ts * a_ts * sigma_s * sigma_s;
    Ok((alpha_s, sigma_s, a_ts, var_ts))
}

/// Mean and variance of `x_s` given `x_t` and the clean value `x0`.
pub fn posterior(s: f64, t: f64, xt: f64, x0: f64) -> Result<(f64, f64)> {
    let (alpha_s, sigma_s, a_ts, var_ts) = transition(s, t)?;
    let st2 = t * t;
    let mean = a_ts * sigma_s * sigma_s / st2 * xt + alpha_s * var_ts / st2 * x0;
    Ok((mean, var_ts * sigma_s * sigma_s / st2))
}

/// `KL(N(m1, v1) || N(m2, v2))` in one dimension.
pub fn gaussian_kl(m1: f64, v1: f64, m2: f64, v2: f64) -> f64 {
    0.5 * ((v2 / v1).ln() + (v1 + (m1 - m2) * (m1 - m2)) / v2 - 1.0)
}

/// Weight turning a squared velocity error into the KL of one reverse step.
pub fn kl_weight(s: f64, t: f64) -> Result<f64> {
    let (alpha_s, sigma_s, _, var_ts) = transition(s, t)?;
    let a = alpha_s * var_ts / (t * t);
    let tau2 = var_ts * sigma_s * sigma_s / (t * t);
    Ok(a * a * t * t / (2.0 * tau2))
}

/// KL of the reverse step `t -> s` when the model predicts velocity `v_hat`
/// at `x_t = (1 - t) x0 + t x1`.
pub fn step_kl(s: f64, t: f64, x0: f64, x1: f64, v_hat: f64) -> Result<f64> {
    let xt = (1.0 - t) * x0 + t * x1;
    let (m_true, var) = posterior(s, t, xt, x0)?;
    let (m_model, _) = posterior(s, t, xt, xt - t * v_hat)?;
    Ok(gaussian_kl(m_true, var, m_model, var))
}

/// Nodes and weights for `E f(Z)`, `Z ~ N(0, 1)`, exact for polynomials of
/// degree below `2n`.
pub fn gauss_hermite(n: usize) -> Vec<(f64, f64)> {
    // Roots of the physicists' Hermite polynomial by Newton's method from
    // asymptotic starting guesses, then rescaled to the standard normal.
    let mut nodes = vec![0.0; n];
    let mut weights = vec![0.0; n];
    let m = n.div_ceil(2);
    let pim4 = std::f64::consts::PI.powf(-0.25);
    let mut z: f64 = 0.0;
    for i in 0..m {
        z = match i {
            0 => (2.0 * n as f64 + 1.0).sqrt() - 1.85575 * (2.0 * n as f64 + 1.0).powf(-1.0 / 6.0),
            1 => z - 1.14 * (n as f64).powf(0.426) / z,
            2 => 1.86 * z - 0.86 * nodes[0],
            3 => 1.91 * z - 0.91 * nodes[1],
            _ => 2.0 * z - nodes[i - 2],
        };
        let mut pp = 0.0;
        for _ in 0..100 {
            let mut p1 = pim4;
            let mut p2 = 0.0;
            for j in 0..n {
                let p3 = p2;
                p2 = p1;
                p1 = z * (2.0 / (j + 1) as f64).sqrt() * p2 - (j as f64 / (j + 1) as f64).sqrt() * p3;
            }
            pp = (2.0 * n as f64).sqrt() * p2;
            let z1 = z;
            z = z1 - p1 / pp;
            if (z - z1).abs() <= 1e-15 * z.abs().max(1.0) {
                break;
            }
        }
        nodes[i] = z;
        nodes[n - 1 - i] = -z;
        weights[i] = 2.0 / (pp * pp);
        weights[n - 1 - i] = weights[i];
    }
    let scale = std::f64::consts::PI.sqrt();
    nodes
        .into_iter()
        .zip(weights)
        .map(|(x, w)| (std::f64::consts::SQRT_2 * x, w / scale))
        .collect()
}

/// Velocity predictor `v_hat(x_t) = gain * x_t + offset`, one per step.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LinearVelocity {
    pub gain: f64,
    pub offset: f64,
}

impl LinearVelocity {
    pub fn at(&self, xt: f64) -> f64 {
        self.gain * xt + self.offset
    }
}

/// One-token, one-dimensional preference instance over a short reverse
/// chain. `grid` lists the times visited, from noise down to the last
/// retained time; step `k` runs from `grid[k]` to `grid[k + 1]`.
#[derive(Clone, Debug)]
pub struct JensenInstance {
    pub grid: Vec<f64>,
    pub winner: f64,
    pub loser: f64,
    pub beta: f64,
    pub policy: Vec<LinearVelocity>,
    pub reference: Vec<LinearVelocity>,
}

impl JensenInstance {
    /// A two-step instance on the grid `1.0 -> 0.6 -> 0.2`.
    pub fn two_step() -> Self {
        Self {
            grid: vec![1.0, 0.6, 0.2],
            winner: 1.3,
            loser: -0.4,
            beta: 1.5,
            policy: vec![
                LinearVelocity {
                    gain: -0.9,
                    offset: 0.2,
                },
                LinearVelocity {
                    gain: -1.3,
                    offset: 0.1,
                },
            ],
            reference: vec![
                LinearVelocity {
                    gain: -0.6,
                    offset: -0.1,
                },
                LinearVelocity {
                    gain: -1.0,
                    offset: 0.0,
                },
            ],
        }
    }

    fn steps(&self) -> usize {
        self.grid.len() - 1
    }

    /// Reference KL minus policy KL for step `k` of one sequence with noise `x1`.
    pub fn advantage(&self, k: usize, x0: f64, x1: f64) -> Result<f64> {
        let (t, s) = (self.grid[k], self.grid[k + 1]);
        let xt = (1.0 - t) * x0 + t * x1;
        Ok(step_kl(s, t, x0, x1, self.reference[k].at(xt))? - step_kl(s, t, x0, x1, self.policy[k].at(xt))?)
    }

    fn margin(&self, k: usize, xw: f64, xl: f64) -> Result<f64> {
        Ok(self.beta
            * self.steps() as f64
            * (self.advantage(k, self.winner, xw)? - self.advantage(k, self.loser, xl)?))
    }

    /// Log-sigmoid of the expected margin, with every expectation exact.
    pub fn j_exact(&self, nodes: usize) -> Result<f64> {
        let gh = gauss_hermite(nodes);
        let mut total = 0.0;
        for k in 0..self.steps() {
            for &(z, w) in &gh {
                total += w * (self.advantage(k, self.winner, z)? - self.advantage(k, self.loser, z)?);
            }
        }
        Ok(-softplus(-self.beta * total))
    }

    /// Expected log-sigmoid of the per-step margin, by quadrature.
    pub fn l_exact(&self, nodes: usize) -> Result<f64> {
        let gh = gauss_hermite(nodes);
        let mut total = 0.0;
        for k in 0..self.steps() {
            for &(zw, ww) in &gh {
                for &(zl, wl) in &gh {
                    total -= ww * wl * softplus(-self.margin(k, zw, zl)?);
                }
            }
        }
        Ok(total / self.steps() as f64)
    }

    /// Monte-Carlo estimate of [`JensenInstance::l_exact`] with a uniformly
    /// drawn step and independent noise per sequence, as `(mean, std_err)`.
    pub fn l_monte_carlo(&self, rng: &mut Rng, samples: usize) -> Result<(f64, f64)> {
        let mut vals = Vec::with_capacity(samples);
        for _ in 0..samples {
            let k = rng.below(self.steps());
            let (xw, xl) = (rng.normal(), rng.normal());
            vals.push(-softplus(-self.margin(k, xw, xl)?));
        }
        let s = super::metrics::Summary::of(&vals);
        Ok((s.mean, s.std_err))
    }
}
