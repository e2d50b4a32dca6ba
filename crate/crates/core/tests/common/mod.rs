#![allow(dead_code)]

use std::path::PathBuf;


use fedsim::client::{LocalObjective, QuadraticObjective};
use fedsim::harness::{Evaluation, Evaluator, SimConfig};
use fedsim::{ParamVector, Result};

pub fn desk_config(name: &str) -> SimConfig {
    let path = PathBuf::from(env!("CARGO_MANIFEST_DIR"))
        .join("../../configs/desk")
        .join(format!("{name}.json"));
    SimConfig::load(&path).unwrap()
}

/// Scores the weighted global quadratic `sum_n p_n F_n`.
pub struct QuadraticEvaluator<'a> {
    pub clients: &'a [QuadraticObjective],
    pub weights: &'a [f64],
}

impl Evaluator for QuadraticEvaluator<'_> {
    fn evaluate(&self, w: &ParamVector) -> Result<Evaluation> {
        let mut loss = 0.0;
        let mut grad = vec![0.0; w.len()];
        for (c, p) in self.clients.iter().zip(self.weights) {
            let rows: Vec<usize> = (0..c.num_examples()).collect();
            let (l, g) = c.loss_and_grad(w, &rows)?;
            loss += p * l;
            for (acc, gi) in grad.iter_mut().zip(g.iter()) {
                *acc += p * gi;
            }
        }
        Ok(Evaluation {
            loss,
            accuracy: 0.0,
            grad_norm_sq: grad.iter().map(|g| g * g).sum(),
        })
    }
}

pub mod exact {
    use fedsim::harness::BoundParams;
    use num_bigint::BigInt;
    use num_rational::BigRational;
    use num_traits::{ToPrimitive, Zero};

    fn q(x: f64) -> BigRational {
        BigRational::from_float(x).expect("finite input")
    }

    fn n(x: u64) -> BigRational {
        BigRational::from_integer(BigInt::from(x))
    }

    /// `(A1, A2, A3, bound)` in exact rational arithmetic.
    pub fn bound_terms(p: &BoundParams) -> [BigRational; 4] {
        let (ec, es, l, g, eps) = (q(p.eta_c), q(p.eta_s), q(p.l), q(p.g), q(p.epsilon));
        let (k, m, t) = (n(p.k), n(p.m), n(p.t));
        let one = n(1);
        let two = n(2);
        let four = n(4);
        let ec2 = &ec * &ec;
        let l2 = &l * &l;
        let a1 = &four * &ec2 * &l2 * &k * (&k - &one);
        let a2 = &ec2 * &l2 * (&k - &one) + &es / (&two * &m * &k * &eps) + &es / (&m * &eps);
        let a3 = &es / (&two * &eps * &eps) * &ec2 * &k * &k * &m * &m * &g * &g;
        let sg = q(p.sigma_g);
        let s = q(p.sigma);
        let bound = &four * q(p.f0_minus_fstar) / &t + &four * (&a1 * &sg * &sg + &a2 * &s * &s + &a3);
        [a1, a2, a3, bound]
    }

    /// Relative agreement of `approx` with `exact` (exact zero needs an exact zero).
    pub fn agrees(approx: f64, exact: &BigRational, rel: f64) -> bool {
        if exact.is_zero() {
            return approx == 0.0;
        }
        let e = exact.to_f64().unwrap();
        ((approx - e) / e).abs() < rel
    }
}
