use rayon::prelude::*;

use super::{Denoiser, Sequence};
use crate::error::{Error, Result};
use crate::netcore::{Rng, Tensor};
use crate::schedule::{guidance_slice, NoiseSchedule, SamplerConfig};

/// Number of sequences advanced together by [`sample_batch`].
pub const SAMPLING_CHUNK: usize = 32;

/// Snapshot of the sampling chain for one sequence: token `token`
/// (zero-based) at time `t`, with `history` holding the clean tokens produced
/// so far.
#[derive(Debug)]
pub struct ChainState<'a> {
    pub sequence: usize,
    pub token: usize,
    pub t: f64,
    pub history: &'a [f64],
    pub current: &'a [f64],
}

/// Draws one sequence of `len` tokens.
///
/// Each token starts from standard normal noise at `t = 1` and is carried to
/// `t = 0` by `sampler.steps` reverse steps with guided velocities; it is then
/// appended to the history that conditions the next token. Token `n` draws
/// from `rng.derive(n)`.
pub fn sample_sequence<D: Denoiser>(
    model: &D,
    prompt: &[f64],
    len: usize,
    sampler: &SamplerConfig,
    rng: &Rng,
) -> Result<Sequence> {
    sample_sequence_traced(model, prompt, len, sampler, rng, |_| {})
}

/// [`sample_sequence`] reporting every chain state to `observe`.
pub fn sample_sequence_traced<D, F>(
    model: &D,
    prompt: &[f64],
    len: usize,
    sampler: &SamplerConfig,
    rng: &Rng,
    observe: F,
) -> Result<Sequence>
where
    D: Denoiser,
    F: FnMut(&ChainState<'_>),
{
    let mut out = lockstep(model, &[prompt], std::slice::from_ref(rng), len, sampler, observe)?;
    Ok(out.pop().expect("one sequence"))
}

/// Samples one sequence per prompt; sequence `i` uses `rng.derive(i)`.
///
/// Sequences are processed in fixed chunks of [`SAMPLING_CHUNK`], so the
/// result does not depend on the number of worker threads.
pub fn sample_batch<D: Denoiser>(
    model: &D,
    prompts: &[Vec<f64>],
    len: usize,
    sampler: &SamplerConfig,
    rng: &Rng,
) -> Result<Vec<Sequence>> {
    let chunks: Vec<Vec<Sequence>> = prompts
        .par_chunks(SAMPLING_CHUNK)
        .enumerate()
        .map(|(c, chunk)| {
            let base = c * SAMPLING_CHUNK;
            let refs: Vec<&[f64]> = chunk.iter().map(Vec::as_slice).collect();
            let rngs: Vec<Rng> = (0..chunk.len()).map(|i| rng.derive((base + i) as u64)).collect();
            lockstep(model, &refs, &rngs, len, sampler, |_| {})
        })
        .collect::<Result<_>>()?;
    Ok(chunks.into_iter().flatten().collect())
}

fn lockstep<D, F>(
    model: &D,
    prompts: &[&[f64]],
    rngs: &[Rng],
    len: usize,
    sampler: &SamplerConfig,
    mut observe: F,
) -> Result<Vec<Sequence>>
where
    D: Denoiser,
    F: FnMut(&ChainState<'_>),
{
    sampler.validate()?;
    if len == 0 {
        return Err(Error::invalid("sequence length must be at least 1"));
    }
    let b = prompts.len();
    let d = model.token_dim();
    let w = sampler.guidance_w;
    let sched = NoiseSchedule::linear();
    let grid = sampler.time_grid();
    let mut histories: Vec<Vec<f64>> = vec![Vec::with_capacity(len * d); b];

    let contexts = |histories: &[Vec<f64>], conditioned: bool| -> Result<Vec<D::Context>> {
        (0..b)
            .map(|i| model.context(prompts[i], &histories[i], conditioned))
            .collect()
    };

    for n in 0..len {
        let cond = if w != 0.0 {
            contexts(&histories, true)?
        } else {
            Vec::new()
        };
        let uncond = if w != 1.0 {
            contexts(&histories, false)?
        } else {
            Vec::new()
        };
        let both = !cond.is_empty() && !uncond.is_empty();
        let refs: Vec<&D::Context> = cond.iter().chain(&uncond).collect();

        let mut token_rngs: Vec<Rng> = rngs.iter().map(|r| r.derive(n as u64)).collect();
        let mut x: Vec<f64> = token_rngs.iter_mut().flat_map(|r| r.normal_vec(d)).collect();
        for k in 0..sampler.steps {
            let (t, t_next) = (grid[k], grid[k + 1]);
            for (i, h) in histories.iter().enumerate() {
                observe(&ChainState {
                    sequence: i,
                    token: n,
                    t,
                    history: h,
                    current: &x[i * d..(i + 1) * d],
                });
            }
            let v = if both {
                let doubled: Vec<f64> = x.iter().chain(&x).copied().collect();
                let out = model.velocities(&refs, &doubled, t)?;
                guidance_slice(&out[..b * d], &out[b * d..], w)
            } else {
                model.velocities(&refs, &x, t)?
            };
            let noise: Option<Vec<f64>> =
                (sampler.eta > 0.0).then(|| token_rngs.iter_mut().flat_map(|r| r.normal_vec(d)).collect());
            x = sched.step_slice(&x, &v, t, t_next, sampler.eta, noise.as_deref());
            if x.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite {
                    layer: format!("sampler token {n} at t={t_next}"),
                });
            }
        }
        for (i, h) in histories.iter_mut().enumerate() {
            let row = &x[i * d..(i + 1) * d];
            observe(&ChainState {
                sequence: i,
                token: n,
                t: 0.0,
                history: h,
                current: row,
            });
            h.extend_from_slice(row);
        }
    }
    histories
        .into_iter()
        .zip(prompts)
        .map(|(h, p)| Sequence::new(p.to_vec(), Tensor::matrix(len, d, h)))
        .collect()
}
