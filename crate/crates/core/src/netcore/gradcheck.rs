use super::{forward, Graph, ParamSet, Rng, Tensor};
use crate::error::{Error, Result};

/// Fraction of scalar parameters probed by a gradient check.
pub const SAMPLE_FRACTION: f64 = 0.05;

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    /// Parameter path and flat index where `max_rel_err` occurred.
    pub worst: Option<(String, usize)>,
    pub checked: usize,
}

fn check_eps(eps: f64) -> Result<()> {
    if !(1e-8..=1e-3).contains(&eps) {
        return Err(Error::invalid(format!("grad-check step {eps} outside [1e-8, 1e-3]")));
    }
    Ok(())
}

/// Compares analytic gradients against central differences on a random
/// sample of scalar parameters.
///
/// `objective` maps a parameter set to `(loss, gradient)`; it must be a
/// deterministic function of the parameters. The error for one scalar is
/// `|analytic - numeric| / max(1, |analytic|)`.
pub fn grad_check_objective<F>(
    params: &ParamSet,
    objective: F,
    eps: f64,
    fraction: f64,
    rng: &mut Rng,
) -> Result<GradCheckReport>
where
    F: Fn(&ParamSet) -> Result<(f64, ParamSet)>,
{
    check_eps(eps)?;
    let (_, analytic) = objective(params)?;
    grad_check_against(params, &analytic, |p| Ok(objective(p)?.0), eps, fraction, rng)
}

/// [`grad_check_objective`] with the gradient given up front and a
/// value-only `loss` for the finite differences.
pub fn grad_check_against<F>(
    params: &ParamSet,
    analytic: &ParamSet,
    loss: F,
    eps: f64,
    fraction: f64,
    rng: &mut Rng,
) -> Result<GradCheckReport>
where
    F: Fn(&ParamSet) -> Result<f64>,
{
    check_eps(eps)?;
    if !analytic.same_layout(params) {
        return Err(Error::shape("grad-check", "gradient layout differs from parameters"));
    }
    let total = params.num_scalars();
    let count = ((total as f64 * fraction).ceil() as usize).clamp(1.min(total), total);
    let picks = &rng.permutation(total)[..count];

    let mut report = GradCheckReport {
        max_rel_err: 0.0,
        worst: None,
        checked: count,
    };
    let mut probe = params.thawed_copy();
    for &k in picks {
        let (path, idx) = params.locate(k).expect("index within total");
        let path = path.to_string();
        let original = params.get(&path)?.data()[idx];

        *probe.scalar_mut(&path, idx)? = original + eps;
        let up = loss(&probe)?;
        *probe.scalar_mut(&path, idx)? = original - eps;
        let down = loss(&probe)?;
        *probe.scalar_mut(&path, idx)? = original;

        let numeric = (up - down) / (2.0 * eps);
        let a = analytic.get(&path)?.data()[idx];
        let err = (a - numeric).abs() / a.abs().max(1.0);
        if err >= report.max_rel_err {
            report.max_rel_err = err;
            report.worst = Some((path, idx));
        }
    }
    Ok(report)
}

/// Gradient check of `reducer(forward(params, graph, inputs))`.
///
/// `reducer` returns the loss tensor and its gradient w.r.t. the graph
/// output; the loss must be a scalar.
pub fn grad_check<R>(
    params: &ParamSet,
    graph: &Graph,
    inputs: &[Tensor],
    reducer: R,
    eps: f64,
    rng: &mut Rng,
) -> Result<f64>
where
    R: Fn(&Tensor) -> Result<(Tensor, Tensor)>,
{
    check_eps(eps)?;
    let objective = |p: &ParamSet| -> Result<(f64, ParamSet)> {
        let (out, tape) = forward(p, graph, inputs)?;
        let (loss, dout) = reducer(&out)?;
        if !loss.is_scalar() {
            return Err(Error::NonScalarLoss(loss.shape().to_vec()));
        }
        let grads = tape.backward(p, &dout)?;
        Ok((loss.data()[0], grads.params))
    };
    Ok(grad_check_objective(params, objective, eps, SAMPLE_FRACTION, rng)?.max_rel_err)
}
