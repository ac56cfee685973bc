//! AdamW with decoupled weight decay.

use serde::{Deserialize, Serialize};

use super::ParamSet;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamWConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub weight_decay: f64,
    pub eps: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self::desk()
    }
}

impl AdamWConfig {
    /// Settings used for desk-scale runs.
    pub fn desk() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.95,
            weight_decay: 0.01,
            eps: 1e-8,
        }
    }

    /// Looks up a named preset: `desk`, or the large-model settings `paper-dpo`
    /// and `paper-raft`.
    pub fn preset(name: &str) -> Option<Self> {
        let large = |lr| Self {
            lr,
            beta1: 0.9,
            beta2: 0.95,
            weight_decay: 0.01,
            eps: 1e-8,
        };
        match name {
            "desk" => Some(Self::desk()),
            "paper-dpo" => Some(large(2e-6)),
            "paper-raft" => Some(large(1e-5)),
            _ => None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = self.lr > 0.0
            && (0.0..1.0).contains(&self.beta1)
            && (0.0..1.0).contains(&self.beta2)
            && self.weight_decay >= 0.0
            && self.eps >= 0.0
            && [self.lr, self.weight_decay, self.eps].iter().all(|v| v.is_finite());
        if ok {
            Ok(())
        } else {
            Err(Error::invalid(format!("bad AdamW settings {self:?}")))
        }
    }
}

/// Moments and step count for one parameter set.
#[derive(Clone, Debug)]
pub struct AdamWState {
    pub hyper: AdamWConfig,
    pub m: ParamSet,
    pub v: ParamSet,
    pub step: u64,
}

impl AdamWState {
    pub fn new(hyper: AdamWConfig, params: &ParamSet) -> Result<Self> {
        hyper.validate()?;
        Ok(Self {
            hyper,
            m: params.zeros_like(),
            v: params.zeros_like(),
            step: 0,
        })
    }
}

/// One AdamW update of `params` in place.
///
/// The decay term `lr * weight_decay * p` acts on the parameter directly and
/// never enters the moment estimates. Grads are validated before anything is
/// mutated, so a rejected step leaves both `params` and `state` untouched.
pub fn adamw_step(params: &mut ParamSet, grads: &ParamSet, state: &mut AdamWState) -> Result<()> {
    state.hyper.validate()?;
    if !params.same_layout(grads) || !params.same_layout(&state.m) {
        return Err(Error::shape("adamw", "params, grads and moments must share a layout"));
    }
    if let Some((path, _)) = grads.iter().find(|(_, g)| !g.all_finite()) {
        return Err(Error::NonFiniteGradient(path.to_string()));
    }
    if params.is_frozen() {
        return Err(Error::Frozen("*".into()));
    }
    let h = state.hyper;
    let step = state.step + 1;
    let bc1 = 1.0 - h.beta1.powi(step as i32);
    let bc2 = 1.0 - h.beta2.powi(step as i32);

    let mut grad_iter = grads.iter();
    let mut m_next = state.m.clone();
    let mut v_next = state.v.clone();
    let mut m_vals: Vec<Vec<f64>> = Vec::with_capacity(params.len());
    let mut v_vals: Vec<Vec<f64>> = Vec::with_capacity(params.len());
    for ((_, m), (_, v)) in state.m.iter().zip(state.v.iter()) {
        let (_, g) = grad_iter.next().expect("layouts checked");
        let mut mm = m.data().to_vec();
        let mut vv = v.data().to_vec();
        for ((mi, vi), gi) in mm.iter_mut().zip(vv.iter_mut()).zip(g.data()) {
            *mi = h.beta1 * *mi + (1.0 - h.beta1) * gi;
            *vi = h.beta2 * *vi + (1.0 - h.beta2) * gi * gi;
        }
        m_vals.push(mm);
        v_vals.push(vv);
    }

    let mut k = 0;
    params.update(|_, p| {
        let (mm, vv) = (&m_vals[k], &v_vals[k]);
        for ((pi, mi), vi) in p.data_mut().iter_mut().zip(mm).zip(vv) {
            let m_hat = mi / bc1;
            let v_hat = vi / bc2;
            let denom = v_hat.sqrt() + h.eps;
            let adam = if denom == 0.0 { 0.0 } else { m_hat / denom };
            *pi -= h.lr * (adam + h.weight_decay * *pi);
        }
        k += 1;
        Ok(())
    })?;

    let mut k = 0;
    m_next.update(|_, t| {
        t.data_mut().copy_from_slice(&m_vals[k]);
        k += 1;
        Ok(())
    })?;
    let mut k = 0;
    v_next.update(|_, t| {
        t.data_mut().copy_from_slice(&v_vals[k]);
        k += 1;
        Ok(())
    })?;
    state.m = m_next;
    state.v = v_next;
    state.step = step;
    Ok(())
}

/// Rescales `grads` so their global L2 norm is at most `max_norm`; returns the
/// norm before clipping.
pub fn clip_global_norm(grads: &mut ParamSet, max_norm: f64) -> Result<f64> {
    let norm = grads.sq_norm().sqrt();
    if norm > max_norm && norm > 0.0 {
        grads.scale(max_norm / norm)?;
    }
    Ok(norm)
}
