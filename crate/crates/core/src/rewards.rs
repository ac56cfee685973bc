//! Synthetic data and task rewards.
//!
//! [`ArProcess`] is a linear-Gaussian autoregressive source whose
//! conditional laws are known in closed form, which makes exact likelihoods
//! and exact optimal velocities available as test oracles.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::ardm::{DataSource, Denoiser, Sequence, VelocityModel};
use crate::error::{Error, Result};
use crate::netcore::{Rng, Tensor};

/// `x_1 = P c + s e_1`, `x_{n+1} = A x_n + b + s e_{n+1}`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawProcess", into = "RawProcess")]
pub struct ArProcess {
    d: usize,
    d_c: usize,
    a: Vec<f64>,
    b: Vec<f64>,
    s: f64,
    p: Vec<f64>,
}

#[derive(Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawProcess {
    a: Vec<Vec<f64>>,
    b: Vec<f64>,
    s: f64,
    p: Vec<Vec<f64>>,
}

impl TryFrom<RawProcess> for ArProcess {
    type Error = Error;

    fn try_from(r: RawProcess) -> Result<Self> {
        let d = r.b.len();
        let d_c = r.p.first().map_or(0, Vec::len);
        if r.a.len() != d || r.a.iter().any(|row| row.len() != d) {
            return Err(Error::Config(format!("transition matrix must be {d} x {d}")));
        }
        if r.p.len() != d || r.p.iter().any(|row| row.len() != d_c) {
            return Err(Error::Config(format!("prompt map must have {d} equal rows")));
        }
        ArProcess::new(d, d_c, r.a.concat(), r.b, r.s, r.p.concat())
    }
}

impl From<ArProcess> for RawProcess {
    fn from(p: ArProcess) -> Self {
        Self {
            a: p.a.chunks(p.d).map(<[f64]>::to_vec).collect(),
            b: p.b.clone(),
            s: p.s,
            p: if p.d_c == 0 {
                vec![Vec::new(); p.d]
            } else {
                p.p.chunks(p.d_c).map(<[f64]>::to_vec).collect()
            },
        }
    }
}

fn matmul(a: &[f64], b: &[f64], n: usize) -> Vec<f64> {
    let mut c = vec![0.0; n * n];
    for i in 0..n {
        for k in 0..n {
            let aik = a[i * n + k];
            if aik != 0.0 {
                for j in 0..n {
                    c[i * n + j] += aik * b[k * n + j];
                }
            }
        }
    }
    c
}

/// Spectral radius estimate `||A^(2^m)||_F^(2^-m)` by repeated squaring.
pub fn spectral_radius(a: &[f64], n: usize) -> f64 {
    let mut m = a.to_vec();
    let mut log_scale = 0.0;
    let mut power = 1.0;
    for _ in 0..12 {
        let norm = m.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm == 0.0 {
            return 0.0;
        }
        m.iter_mut().for_each(|v| *v /= norm);
        log_scale += norm.ln() / power;
        m = matmul(&m, &m, n);
        power *= 2.0;
    }
    let norm = m.iter().map(|v| v * v).sum::<f64>().sqrt();
    if norm == 0.0 {
        return 0.0;
    }
    (log_scale + norm.ln() / power).exp()
}

impl ArProcess {
    /// `a` is `d x d` and `p` is `d x d_c`, both row-major.
    pub fn new(d: usize, d_c: usize, a: Vec<f64>, b: Vec<f64>, s: f64, p: Vec<f64>) -> Result<Self> {
        if d == 0 || a.len() != d * d || b.len() != d || p.len() != d * d_c {
            return Err(Error::Config("inconsistent process dimensions".into()));
        }
        if !(s > 0.0 && s.is_finite()) {
            return Err(Error::Config(format!("noise scale must be positive, got {s}")));
        }
        if a.iter().chain(&b).chain(&p).any(|v| !v.is_finite()) {
            return Err(Error::Config("process parameters must be finite".into()));
        }
        let rho = spectral_radius(&a, d);
        if rho >= 1.0 {
            return Err(Error::Config(format!(
                "transition spectral radius {rho:.6} is not below 1"
            )));
        }
        Ok(Self { d, d_c, a, b, s, p })
    }

    /// `A = coeff I`, `b = 0`, `P` the identity padded with zero columns.
    pub fn isotropic(d: usize, d_c: usize, coeff: f64, s: f64) -> Result<Self> {
        let mut a = vec![0.0; d * d];
        let mut p = vec![0.0; d * d_c];
        for i in 0..d {
            a[i * d + i] = coeff;
            if i < d_c {
                p[i * d_c + i] = 1.0;
            }
        }
        Self::new(d, d_c, a, vec![0.0; d], s, p)
    }

    /// Two-dimensional tokens, four-dimensional prompts, `A = 0.8 I`, `s = 1`.
    pub fn desk_default() -> Self {
        Self::isotropic(2, 4, 0.8, 1.0).expect("valid default process")
    }

    pub fn dim(&self) -> usize {
        self.d
    }

    pub fn prompt_dim(&self) -> usize {
        self.d_c
    }

    pub fn noise_scale(&self) -> f64 {
        self.s
    }

    /// Mean of the next token given the prompt and the clean history.
    pub fn conditional_mean(&self, prompt: &[f64], history: &[f64]) -> Vec<f64> {
        let d = self.d;
        if history.len() < d {
            (0..d)
                .map(|i| (0..self.d_c).map(|j| self.p[i * self.d_c + j] * prompt[j]).sum())
                .collect()
        } else {
            let prev = &history[history.len() - d..];
            (0..d)
                .map(|i| self.b[i] + (0..d).map(|j| self.a[i * d + j] * prev[j]).sum::<f64>())
                .collect()
        }
    }

    fn check_prompt(&self, prompt: &[f64]) -> Result<()> {
        if prompt.len() != self.d_c {
            return Err(Error::invalid(format!(
                "prompt has {} values, process expects {}",
                prompt.len(),
                self.d_c
            )));
        }
        Ok(())
    }

    pub fn gen_sequence(&self, prompt: &[f64], len: usize, rng: &mut Rng) -> Result<Sequence> {
        self.check_prompt(prompt)?;
        if len == 0 {
            return Err(Error::invalid("sequence length must be at least 1"));
        }
        let mut tokens: Vec<f64> = Vec::with_capacity(len * self.d);
        for _ in 0..len {
            let mean = self.conditional_mean(prompt, &tokens);
            tokens.extend(mean.iter().map(|m| m + self.s * rng.normal()));
        }
        Sequence::new(prompt.to_vec(), Tensor::matrix(len, self.d, tokens))
    }

    /// Per-token negative log-likelihood of `seq` under the process.
    pub fn oracle_nll(&self, seq: &Sequence) -> Result<f64> {
        self.check_prompt(&seq.prompt)?;
        if seq.dim() != self.d || seq.is_empty() {
            return Err(Error::invalid("sequence does not match the process dimension"));
        }
        let d = self.d as f64;
        let log_norm = 0.5 * d * (2.0 * PI * self.s * self.s).ln();
        let data = seq.tokens.data();
        let mut total = 0.0;
        for n in 0..seq.len() {
            let mean = self.conditional_mean(&seq.prompt, &data[..n * self.d]);
            let sq: f64 = seq.token(n).iter().zip(&mean).map(|(x, m)| (x - m) * (x - m)).sum();
            total += log_norm + sq / (2.0 * self.s * self.s);
        }
        Ok(total / seq.len() as f64)
    }

    /// Differential entropy of one token given its past.
    pub fn entropy_rate(&self) -> f64 {
        0.5 * self.d as f64 * (2.0 * PI * std::f64::consts::E * self.s * self.s).ln()
    }

    /// Exact conditional velocity `E[x1 - x0 | x_t]` when `x0 ~ N(mean, s^2 I)`.
    pub fn optimal_velocity(&self, mean: &[f64], xt: &[f64], t: f64) -> Vec<f64> {
        optimal_velocity(mean, self.s, xt, t)
    }

    /// Draws a standard-normal prompt and a sequence.
    pub fn draw(&self, rng: &mut Rng, len: usize) -> Result<Sequence> {
        let prompt = rng.normal_vec(self.d_c);
        self.gen_sequence(&prompt, len, rng)
    }
}

/// Posterior-mean velocity for `x_t = (1 - t) x0 + t x1` with
/// `x0 ~ N(mean, s^2 I)` and `x1 ~ N(0, I)`.
pub fn optimal_velocity(mean: &[f64], s: f64, xt: &[f64], t: f64) -> Vec<f64> {
    let s2 = s * s;
    let var = (1.0 - t) * (1.0 - t) * s2 + t * t;
    mean.iter()
        .zip(xt)
        .map(|(m, x)| {
            let r = x - (1.0 - t) * m;
            (t - (1.0 - t) * s2) / var * r - m
        })
        .collect()
}

impl DataSource for ArProcess {
    fn draw(&self, rng: &mut Rng, len: usize) -> Result<Sequence> {
        ArProcess::draw(self, rng, len)
    }
}

/// The process viewed as a perfect conditional velocity model.
impl VelocityModel for ArProcess {
    fn token_dim(&self) -> usize {
        self.d
    }

    fn predict(&self, seq: &Sequence, xt: &Tensor, t: &[f64], conditioned: bool) -> Result<Tensor> {
        if !conditioned {
            return Err(Error::invalid("the process has no unconditional form"));
        }
        if t.len() != seq.len() {
            return Err(Error::shape("process velocity", "one time per token"));
        }
        let mut out = Tensor::zeros(&[seq.len(), self.d]);
        for (n, &tn) in t.iter().enumerate().take(seq.len()) {
            let mean = self.conditional_mean(&seq.prompt, &seq.tokens.data()[..n * self.d]);
            out.row_mut(n)
                .copy_from_slice(&optimal_velocity(&mean, self.s, xt.row(n), tn));
        }
        Ok(out)
    }
}

impl Denoiser for ArProcess {
    type Context = Vec<f64>;

    fn token_dim(&self) -> usize {
        self.d
    }

    fn context(&self, prompt: &[f64], history: &[f64], conditioned: bool) -> Result<Vec<f64>> {
        if !conditioned {
            return Err(Error::invalid("the process has no unconditional form"));
        }
        self.check_prompt(prompt)?;
        Ok(self.conditional_mean(prompt, history))
    }

    fn velocities(&self, means: &[&Vec<f64>], xt: &[f64], t: f64) -> Result<Vec<f64>> {
        Ok(means
            .iter()
            .zip(xt.chunks(self.d))
            .flat_map(|(m, x)| optimal_velocity(m, self.s, x, t))
            .collect())
    }
}

/// Population variance of coordinate `k` over the tokens.
pub fn variance_reward(seq: &Sequence, k: usize) -> Result<f64> {
    if seq.len() < 2 {
        return Err(Error::invalid("variance reward needs at least two tokens"));
    }
    if k >= seq.dim() {
        return Err(Error::invalid(format!(
            "feature {k} out of range for dimension {}",
            seq.dim()
        )));
    }
    let n = seq.len() as f64;
    let vals: Vec<f64> = (0..seq.len()).map(|i| seq.token(i)[k]).collect();
    let mean = vals.iter().sum::<f64>() / n;
    Ok(vals.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n)
}

/// Which scalar ranks candidate sequences; larger is always better.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum RewardSpec {
    Variance { feature: usize },
    OracleNll { process: ArProcess },
}

impl RewardSpec {
    /// Coordinate-0 variance.
    pub fn task_a() -> Self {
        Self::Variance { feature: 0 }
    }

    /// Negated likelihood under the default process.
    pub fn task_b() -> Self {
        Self::OracleNll {
            process: ArProcess::desk_default(),
        }
    }

    pub fn validate(&self, d: usize) -> Result<()> {
        match self {
            Self::Variance { feature } if *feature >= d => Err(Error::Config(format!(
                "variance feature {feature} out of range for dimension {d}"
            ))),
            Self::OracleNll { process } if process.dim() != d => Err(Error::Config(format!(
                "reward process has dimension {}, model has {d}",
                process.dim()
            ))),
            _ => Ok(()),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Self::Variance { .. } => "variance",
            Self::OracleNll { .. } => "oracle_nll",
        }
    }
}

pub fn reward_of(spec: &RewardSpec, seq: &Sequence) -> Result<f64> {
    match spec {
        RewardSpec::Variance { feature } => variance_reward(seq, *feature),
        RewardSpec::OracleNll { process } => Ok(-process.oracle_nll(seq)?),
    }
}
