use serde::{Deserialize, Serialize};

use crate::error::{FedError, Result};
use crate::models::{self, Batch, ModelSpec};
use crate::numvec::{norm2, ParamVector};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    pub loss: f64,
    pub accuracy: f64,
    /// `||grad f(w)||^2` of the pool loss.
    pub grad_norm_sq: f64,
}

/// Scores a global model. Implementations must be deterministic.
pub trait Evaluator: Sync {
    fn evaluate(&self, w: &ParamVector) -> Result<Evaluation>;
}

/// Full-pool loss, accuracy and squared gradient norm of a classifier.
pub fn evaluate(spec: &ModelSpec, w: &ParamVector, pool: &Batch) -> Result<Evaluation> {
    if pool.rows() == 0 {
        return Err(FedError::invalid("evaluation pool is empty"));
    }
    let (loss, grad) = models::loss_and_grad(spec, w, pool)?;
    let accuracy = models::predict_accuracy(spec, w, pool)?;
    let g = norm2(&grad);
    Ok(Evaluation {
        loss,
        accuracy,
        grad_norm_sq: g * g,
    })
}

#[derive(Debug, Clone)]
pub struct PoolEvaluator {
    pub spec: ModelSpec,
    pub pool: Batch,
}

impl Evaluator for PoolEvaluator {
    fn evaluate(&self, w: &ParamVector) -> Result<Evaluation> {
        evaluate(&self.spec, w, &self.pool)
    }
}
