//! Server-side adaptive optimizers driven by the pseudo-gradient.
//!
//! Each step is a pure transition `(w, G, state) -> (w_next, state_next)`.
//! Weight decay is applied separately by [`apply_weight_decay`] (or by
//! [`optimizer_step`], which runs decay followed by the chosen rule).

use serde::{Deserialize, Serialize};

use crate::error::{FedError, Result};
use crate::numvec::{norm2, ParamVector};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    Adagrad,
    Adam,
    Adabelief,
    Yogi,
    Lamb,
}

impl OptimizerKind {
    pub fn name(self) -> &'static str {
        match self {
            OptimizerKind::Adagrad => "adagrad",
            OptimizerKind::Adam => "adam",
            OptimizerKind::Adabelief => "adabelief",
            OptimizerKind::Yogi => "yogi",
            OptimizerKind::Lamb => "lamb",
        }
    }
}

fn default_beta1() -> f64 {
    0.9
}

fn default_beta2() -> f64 {
    0.999
}

fn default_epsilon() -> f64 {
    1e-8
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OptimizerHyper {
    pub kind: OptimizerKind,
    pub eta_s: f64,
    #[serde(default = "default_beta1")]
    pub beta1: f64,
    #[serde(default = "default_beta2")]
    pub beta2: f64,
    #[serde(default = "default_epsilon")]
    pub epsilon: f64,
    #[serde(default)]
    pub weight_decay: f64,
    /// Starting value for the second-moment accumulator. Zero unless a run
    /// needs to honour a positive floor such as `eps^2`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub initial_accumulator: Option<f64>,
}

impl OptimizerHyper {
    /// Defaults: beta1 0.9, beta2 0.999, epsilon 1e-8, no weight decay.
    pub fn new(kind: OptimizerKind, eta_s: f64) -> Self {
        OptimizerHyper {
            kind,
            eta_s,
            beta1: default_beta1(),
            beta2: default_beta2(),
            epsilon: default_epsilon(),
            weight_decay: 0.0,
            initial_accumulator: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = self.eta_s > 0.0
            && (0.0..1.0).contains(&self.beta1)
            && (0.0..1.0).contains(&self.beta2)
            && self.epsilon > 0.0
            && self.weight_decay >= 0.0
            && self.initial_accumulator.is_none_or(|z| z >= 0.0);
        if !ok {
            return Err(FedError::invalid(format!(
                "optimizer hyper-parameters out of range: {self:?}"
            )));
        }
        Ok(())
    }

    pub fn initial_state(&self, dim: usize) -> OptimizerState {
        match self.initial_accumulator {
            Some(z0) => OptimizerState::with_accumulator(dim, z0),
            None => OptimizerState::new(dim),
        }
    }
}

/// First moment `m`, second moment `v` (or the Adagrad/Adabelief
/// accumulator `z`) and the step counter.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OptimizerState {
    pub m: ParamVector,
    pub v: ParamVector,
    pub step: u64,
}

impl OptimizerState {
    pub fn new(dim: usize) -> Self {
        OptimizerState {
            m: ParamVector::zeros(dim),
            v: ParamVector::zeros(dim),
            step: 0,
        }
    }

    pub fn with_accumulator(dim: usize, z0: f64) -> Self {
        OptimizerState {
            m: ParamVector::zeros(dim),
            v: ParamVector::new(vec![z0; dim]),
            step: 0,
        }
    }
}

fn check(w: &ParamVector, g: &ParamVector, state: &OptimizerState) -> Result<()> {
    g.check_len(w.len())?;
    state.m.check_len(w.len())?;
    state.v.check_len(w.len())
}

/// `G + lambda * w`, or `G` untouched when `lambda == 0`.
pub fn apply_weight_decay(g: &ParamVector, w: &ParamVector, lambda: f64) -> Result<ParamVector> {
    g.check_len(w.len())?;
    if lambda == 0.0 {
        return Ok(g.clone());
    }
    Ok(ParamVector::new(
        g.iter().zip(w.iter()).map(|(gi, wi)| gi + lambda * wi).collect(),
    ))
}

pub fn adagrad_step(w: &ParamVector, g: &ParamVector, hyper: &OptimizerHyper, state: &OptimizerState) -> Result<(ParamVector, OptimizerState)> {
    check(w, g, state)?;
    let z: Vec<f64> = state.v.iter().zip(g.iter()).map(|(z, gi)| z + gi * gi).collect();
    let w_next = w
        .iter()
        .zip(g.iter())
        .zip(&z)
        .map(|((wi, gi), zi)| wi - hyper.eta_s * gi / (zi.sqrt() + hyper.epsilon))
        .collect();
    Ok((
        ParamVector::new(w_next),
        OptimizerState {
            m: state.m.clone(),
            v: ParamVector::new(z),
            step: state.step + 1,
        },
    ))
}

/// Shared first-moment update and bias-correction factors.
struct Moments {
    m: Vec<f64>,
    step: u64,
    m_correction: f64,
    v_correction: f64,
}

fn first_moment(g: &ParamVector, hyper: &OptimizerHyper, state: &OptimizerState) -> Moments {
    let step = state.step + 1;
    let m = state
        .m
        .iter()
        .zip(g.iter())
        .map(|(m, gi)| hyper.beta1 * m + (1.0 - hyper.beta1) * gi)
        .collect();
    let t = step.min(i32::MAX as u64) as i32;
    Moments {
        m,
        step,
        m_correction: 1.0 - hyper.beta1.powi(t),
        v_correction: 1.0 - hyper.beta2.powi(t),
    }
}

/// `m_hat / (sqrt(v_hat) + eps)`, elementwise.
fn normalised_direction(moments: &Moments, v: &[f64], eps: f64) -> Vec<f64> {
    moments
        .m
        .iter()
        .zip(v)
        .map(|(m, v)| (m / moments.m_correction) / ((v / moments.v_correction).sqrt() + eps))
        .collect()
}

fn descend(w: &ParamVector, eta: f64, dir: &[f64]) -> ParamVector {
    ParamVector::new(w.iter().zip(dir).map(|(wi, d)| wi - eta * d).collect())
}

fn finish(moments: Moments, v: Vec<f64>) -> OptimizerState {
    OptimizerState {
        m: ParamVector::new(moments.m),
        v: ParamVector::new(v),
        step: moments.step,
    }
}

pub fn adam_step(w: &ParamVector, g: &ParamVector, hyper: &OptimizerHyper, state: &OptimizerState) -> Result<(ParamVector, OptimizerState)> {
    check(w, g, state)?;
    let moments = first_moment(g, hyper, state);
    let v: Vec<f64> = state
        .v
        .iter()
        .zip(g.iter())
        .map(|(v, gi)| hyper.beta2 * v + (1.0 - hyper.beta2) * (gi * gi))
        .collect();
    let dir = normalised_direction(&moments, &v, hyper.epsilon);
    Ok((descend(w, hyper.eta_s, &dir), finish(moments, v)))
}

/// The second moment tracks `(G - m_t)^2` with the already-updated `m_t`.
pub fn adabelief_step(w: &ParamVector, g: &ParamVector, hyper: &OptimizerHyper, state: &OptimizerState) -> Result<(ParamVector, OptimizerState)> {
    check(w, g, state)?;
    let moments = first_moment(g, hyper, state);
    let z: Vec<f64> = state
        .v
        .iter()
        .zip(g.iter())
        .zip(&moments.m)
        .map(|((z, gi), m)| {
            let dev = gi - m;
            hyper.beta2 * z + (1.0 - hyper.beta2) * dev * dev
        })
        .collect();
    let dir = normalised_direction(&moments, &z, hyper.epsilon);
    Ok((descend(w, hyper.eta_s, &dir), finish(moments, z)))
}

fn signum_or_zero(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// Additive second-moment update `v - (1 - beta2) G^2 sgn(v - G^2)`, with
/// `sgn(0) = 0`.
pub fn yogi_step(w: &ParamVector, g: &ParamVector, hyper: &OptimizerHyper, state: &OptimizerState) -> Result<(ParamVector, OptimizerState)> {
    check(w, g, state)?;
    let moments = first_moment(g, hyper, state);
    let v: Vec<f64> = state
        .v
        .iter()
        .zip(g.iter())
        .map(|(v, gi)| {
            let g2 = gi * gi;
            v - (1.0 - hyper.beta2) * g2 * signum_or_zero(v - g2)
        })
        .collect();
    let dir = normalised_direction(&moments, &v, hyper.epsilon);
    Ok((descend(w, hyper.eta_s, &dir), finish(moments, v)))
}

/// Adam direction rescaled by the whole-vector trust ratio `||w|| / ||r_hat||`
/// (1.0 when either norm is zero).
pub fn lamb_step(w: &ParamVector, g: &ParamVector, hyper: &OptimizerHyper, state: &OptimizerState) -> Result<(ParamVector, OptimizerState)> {
    let (w_next, next, _) = lamb_step_with_ratio(w, g, hyper, state)?;
    Ok((w_next, next))
}

/// [`lamb_step`] that also returns the trust ratio it used.
pub fn lamb_step_with_ratio(
    w: &ParamVector,
    g: &ParamVector,
    hyper: &OptimizerHyper,
    state: &OptimizerState,
) -> Result<(ParamVector, OptimizerState, f64)> {
    check(w, g, state)?;
    let moments = first_moment(g, hyper, state);
    let v: Vec<f64> = state
        .v
        .iter()
        .zip(g.iter())
        .map(|(v, gi)| hyper.beta2 * v + (1.0 - hyper.beta2) * (gi * gi))
        .collect();
    let dir = ParamVector::new(normalised_direction(&moments, &v, hyper.epsilon));
    let weight_norm = norm2(w);
    let update_norm = norm2(&dir);
    let ratio = if weight_norm > 0.0 && update_norm > 0.0 {
        weight_norm / update_norm
    } else {
        1.0
    };
    Ok((descend(w, hyper.eta_s * ratio, &dir), finish(moments, v), ratio))
}

/// Weight decay followed by the update rule selected by `hyper.kind`.
pub fn optimizer_step(w: &ParamVector, g: &ParamVector, hyper: &OptimizerHyper, state: &OptimizerState) -> Result<(ParamVector, OptimizerState)> {
    let g = apply_weight_decay(g, w, hyper.weight_decay)?;
    match hyper.kind {
        OptimizerKind::Adagrad => adagrad_step(w, &g, hyper, state),
        OptimizerKind::Adam => adam_step(w, &g, hyper, state),
        OptimizerKind::Adabelief => adabelief_step(w, &g, hyper, state),
        OptimizerKind::Yogi => yogi_step(w, &g, hyper, state),
        OptimizerKind::Lamb => lamb_step(w, &g, hyper, state),
    }
}
