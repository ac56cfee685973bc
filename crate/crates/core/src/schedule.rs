//! Continuous-time noise schedule, v-prediction algebra and the sampler step.
//!
//! Time runs over `[0, 1]` with `t = 1` pure noise. A clean token `x0` and a
//! noise draw `x1` are mixed as `x_t = alpha(t) x0 + sigma(t) x1`; the
//! velocity target is `alpha'(t) x0 + sigma'(t) x1`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::netcore::Tensor;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScheduleFamily {
    /// `alpha = 1 - t`, `sigma = t`.
    #[default]
    Linear,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct NoiseSchedule {
    pub family: ScheduleFamily,
}

/// `alpha(t)`, `sigma(t)` and their time derivatives.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Coefficients {
    pub alpha: f64,
    pub sigma: f64,
    pub alpha_dot: f64,
    pub sigma_dot: f64,
}

fn check_time(t: f64) -> Result<()> {
    if (0.0..=1.0).contains(&t) {
        Ok(())
    } else {
        Err(Error::invalid(format!("time {t} outside [0, 1]")))
    }
}

fn check_same(a: &Tensor, b: &Tensor, what: &str) -> Result<()> {
    if a.shape() == b.shape() {
        Ok(())
    } else {
        Err(Error::shape(what, format!("{:?} vs {:?}", a.shape(), b.shape())))
    }
}

impl NoiseSchedule {
    pub fn linear() -> Self {
        Self {
            family: ScheduleFamily::Linear,
        }
    }

    pub fn alpha_sigma(&self, t: f64) -> Result<Coefficients> {
        check_time(t)?;
        Ok(self.coefficients(t))
    }

    pub(crate) fn coefficients(&self, t: f64) -> Coefficients {
        match self.family {
            ScheduleFamily::Linear => Coefficients {
                alpha: 1.0 - t,
                sigma: t,
                alpha_dot: -1.0,
                sigma_dot: 1.0,
            },
        }
    }

    pub(crate) fn perturb_slice(&self, x0: &[f64], x1: &[f64], t: f64, xt: &mut [f64], v: &mut [f64]) {
        let c = self.coefficients(t);
        for i in 0..x0.len() {
            xt[i] = c.alpha * x0[i] + c.sigma * x1[i];
            v[i] = c.alpha_dot * x0[i] + c.sigma_dot * x1[i];
        }
    }

    /// Noisy sample and velocity target for a clean/noise pair.
    pub fn perturb(&self, x0: &Tensor, x1: &Tensor, t: f64) -> Result<(Tensor, Tensor)> {
        check_time(t)?;
        check_same(x0, x1, "perturb")?;
        let mut xt = Tensor::zeros(x0.shape());
        let mut v = Tensor::zeros(x0.shape());
        self.perturb_slice(x0.data(), x1.data(), t, xt.data_mut(), v.data_mut());
        Ok((xt, v))
    }

    pub(crate) fn endpoints_slice(&self, xt: &[f64], v: &[f64], t: f64) -> (Vec<f64>, Vec<f64>) {
        match self.family {
            ScheduleFamily::Linear => {
                let x0 = xt.iter().zip(v).map(|(x, v)| x - t * v).collect();
                let x1 = xt.iter().zip(v).map(|(x, v)| x + (1.0 - t) * v).collect();
                (x0, x1)
            }
        }
    }

    /// Clean and noise endpoints implied by a velocity prediction at `x_t`.
    pub fn pred_to_endpoints(&self, xt: &Tensor, v: &Tensor, t: f64) -> Result<(Tensor, Tensor)> {
        check_time(t)?;
        check_same(xt, v, "pred_to_endpoints")?;
        let (x0, x1) = self.endpoints_slice(xt.data(), v.data(), t);
        Ok((
            Tensor::new(xt.shape().to_vec(), x0)?,
            Tensor::new(xt.shape().to_vec(), x1)?,
        ))
    }

    /// Standard deviation of fresh noise injected by a churn-`eta` step.
    ///
    /// At `eta = 1` this is the posterior standard deviation of the Markov
    /// forward process between `t_next` and `t`.
    pub fn churn_std(&self, t: f64, t_next: f64, eta: f64) -> f64 {
        let now = self.coefficients(t);
        let next = self.coefficients(t_next);
        if eta == 0.0 || next.sigma == 0.0 {
            return 0.0;
        }
        let ratio = now.alpha / next.alpha;
        let transition_var = (now.sigma * now.sigma - ratio * ratio * next.sigma * next.sigma).max(0.0);
        eta * next.sigma * transition_var.sqrt() / now.sigma
    }

    pub(crate) fn step_slice(
        &self,
        xt: &[f64],
        v: &[f64],
        t: f64,
        t_next: f64,
        eta: f64,
        noise: Option<&[f64]>,
    ) -> Vec<f64> {
        let (x0, x1) = self.endpoints_slice(xt, v, t);
        let next = self.coefficients(t_next);
        let c = self.churn_std(t, t_next, eta);
        if c == 0.0 {
            return x0
                .iter()
                .zip(&x1)
                .map(|(a, b)| next.alpha * a + next.sigma * b)
                .collect();
        }
        let keep = (next.sigma * next.sigma - c * c).max(0.0).sqrt();
        let noise = noise.expect("noise required when eta > 0");
        (0..xt.len())
            .map(|i| next.alpha * x0[i] + keep * x1[i] + c * noise[i])
            .collect()
    }

    /// One reverse step from `t` to `t_next < t`.
    ///
    /// `x_next = alpha(t_next) x0 + sqrt(sigma(t_next)^2 - c^2) x1 + c eps`
    /// with `(x0, x1)` from [`pred_to_endpoints`](Self::pred_to_endpoints) and
    /// `c = churn_std(t, t_next, eta)`. `eta = 0` is the deterministic Euler
    /// update; `eta = 1` is the ancestral step.
    pub fn sampler_step(&self, xt: &Tensor, v: &Tensor, t: f64, t_next: f64, eta: f64, eps: &Tensor) -> Result<Tensor> {
        check_time(t)?;
        check_time(t_next)?;
        if t_next >= t {
            return Err(Error::invalid(format!(
                "sampler step must go backwards: {t} -> {t_next}"
            )));
        }
        if !(0.0..=1.0).contains(&eta) {
            return Err(Error::invalid(format!("churn {eta} outside [0, 1]")));
        }
        check_same(xt, v, "sampler_step")?;
        check_same(xt, eps, "sampler_step")?;
        let out = self.step_slice(xt.data(), v.data(), t, t_next, eta, Some(eps.data()));
        Tensor::new(xt.shape().to_vec(), out)
    }
}

pub(crate) fn guidance_slice(v_cond: &[f64], v_uncond: &[f64], w: f64) -> Vec<f64> {
    if w == 1.0 {
        return v_cond.to_vec();
    }
    v_uncond.iter().zip(v_cond).map(|(u, c)| u + w * (c - u)).collect()
}

/// `v_uncond + w (v_cond - v_uncond)`; `w = 1` returns `v_cond` bit-for-bit.
pub fn guidance_combine(v_cond: &Tensor, v_uncond: &Tensor, w: f64) -> Result<Tensor> {
    check_same(v_cond, v_uncond, "guidance")?;
    if !(w >= 0.0) {
        return Err(Error::invalid(format!("guidance weight {w} must be >= 0")));
    }
    Tensor::new(
        v_cond.shape().to_vec(),
        guidance_slice(v_cond.data(), v_uncond.data(), w),
    )
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SamplerConfig {
    pub steps: usize,
    #[serde(default)]
    pub eta: f64,
    #[serde(default = "default_guidance")]
    pub guidance_w: f64,
}

fn default_guidance() -> f64 {
    2.0
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self {
            steps: 16,
            eta: 0.0,
            guidance_w: default_guidance(),
        }
    }
}

impl SamplerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 {
            return Err(Error::invalid("sampler needs at least one step"));
        }
        if !(0.0..=1.0).contains(&self.eta) {
            return Err(Error::invalid(format!("churn {} outside [0, 1]", self.eta)));
        }
        if !(self.guidance_w >= 0.0) {
            return Err(Error::invalid("guidance weight must be >= 0"));
        }
        Ok(())
    }

    /// Uniform descending grid from 1 to 0 with `steps + 1` points.
    pub fn time_grid(&self) -> Vec<f64> {
        (0..=self.steps)
            .map(|i| (self.steps - i) as f64 / self.steps as f64)
            .collect()
    }
}
