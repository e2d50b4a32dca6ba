//! Closed-form convergence bound for FedAdaVR under non-convex smooth losses.
//!
//! `A1 = 4 eta_c^2 L^2 K (K-1)`,
//! `A2 = eta_c^2 L^2 (K-1) + eta_s / (2 M K eps) + eta_s / (M eps)`,
//! `A3 = eta_s / (2 eps^2) * eta_c^2 K^2 M^2 G^2`, and
//! `min_t E||grad f(w_t)||^2 <= 4 (f0 - f*) / T + 4 (A1 sg^2 + A2 s^2 + A3)`.
//!
//! The step-size conditions on `eta_c` include a constant `A` that the
//! theory leaves unspecified; it is an optional input and the two conditions
//! that need it are reported as unchecked when it is absent.

use serde::{Deserialize, Serialize};

use crate::error::{FedError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BoundParams {
    pub eta_c: f64,
    pub eta_s: f64,
    /// Local steps `K`.
    pub k: u64,
    /// Sampled clients `M`.
    pub m: u64,
    /// Smoothness constant.
    pub l: f64,
    /// Gradient bound.
    pub g: f64,
    pub epsilon: f64,
    /// Local gradient noise.
    pub sigma: f64,
    /// Global heterogeneity.
    pub sigma_g: f64,
    /// Rounds.
    pub t: u64,
    pub f0_minus_fstar: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub a: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoundReport {
    pub a1: f64,
    pub a2: f64,
    pub a3: f64,
    pub bound: f64,
    pub eta_s_max: f64,
    /// Smallest of the `eta_c` limits that could be evaluated.
    pub eta_c_max: f64,
    /// False when `A` was not supplied and its two limits were skipped.
    pub a_terms_checked: bool,
    pub lr_conditions_ok: bool,
}

fn positive(name: &str, v: f64) -> Result<()> {
    if v > 0.0 && v.is_finite() {
        Ok(())
    } else {
        Err(FedError::invalid(format!("{name} must be positive, got {v}")))
    }
}

fn non_negative(name: &str, v: f64) -> Result<()> {
    if v >= 0.0 && v.is_finite() {
        Ok(())
    } else {
        Err(FedError::invalid(format!("{name} must be non-negative, got {v}")))
    }
}

pub fn theorem_bound(p: &BoundParams) -> Result<BoundReport> {
    positive("epsilon", p.epsilon)?;
    positive("L", p.l)?;
    positive("eta_c", p.eta_c)?;
    positive("eta_s", p.eta_s)?;
    if p.t == 0 || p.k == 0 || p.m == 0 {
        return Err(FedError::invalid("T, K and M must be at least 1"));
    }
    for (name, v) in [("G", p.g), ("sigma", p.sigma), ("sigma_g", p.sigma_g), ("f0 - f*", p.f0_minus_fstar)] {
        non_negative(name, v)?;
    }
    if let Some(a) = p.a {
        positive("A", a)?;
    }

    let (k, m, t) = (p.k as f64, p.m as f64, p.t as f64);
    let (ec, es, l, g, eps) = (p.eta_c, p.eta_s, p.l, p.g, p.epsilon);
    let l2 = l * l;
    let ec2 = ec * ec;

    let a1 = 4.0 * ec2 * l2 * k * (k - 1.0);
    let a2 = ec2 * l2 * (k - 1.0) + es / (2.0 * m * k * eps) + es / (m * eps);
    let a3 = es / (2.0 * eps * eps) * ec2 * k * k * m * m * g * g;
    let bound = 4.0 * p.f0_minus_fstar / t + 4.0 * (a1 * p.sigma_g * p.sigma_g + a2 * p.sigma * p.sigma + a3);

    let eta_s_max = (1.0 / (3.0 * l)).min((1.0 / (12.0 * eps * l2)).sqrt());

    // K = 1 removes the drift limits (their denominators vanish)
    let sqrt_t = t.sqrt();
    let mut eta_c_max = (eps * eps / (6.0 * k * g * g)).min(eps / (4.0 * (eps + 2.0) * k * g * sqrt_t));
    if let Some(a) = p.a {
        if p.k > 1 {
            let cube = eps / (64.0 * a * l2 * k * k * (k - 1.0) * g * sqrt_t);
            eta_c_max = eta_c_max
                .min(cube.cbrt())
                .min(1.0 / (8.0 * a.sqrt() * l * (k * (k - 1.0)).sqrt()));
        }
    }
    Ok(BoundReport {
        a1,
        a2,
        a3,
        bound,
        eta_s_max,
        eta_c_max,
        a_terms_checked: p.a.is_some(),
        lr_conditions_ok: es <= eta_s_max && ec <= eta_c_max,
    })
}
