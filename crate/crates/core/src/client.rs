//! Client-side local training.
//!
//! Clients are stateless: each round starts from the broadcast model, runs
//! `K` (momentum-)SGD steps and returns `(w - w_K) / eta_c`.

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{FedError, Result};
use crate::models::{self, Batch, ModelSpec};
use crate::numvec::ParamVector;

/// How much local work a client performs per round.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LocalWork {
    Steps(usize),
    /// Full passes over the local data; `epochs * ceil(n / batch_size)` steps.
    Epochs(usize),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClientConfig {
    pub eta_c: f64,
    pub local: LocalWork,
    pub batch_size: usize,
    #[serde(default)]
    pub momentum: f64,
}

impl ClientConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.eta_c > 0.0) || !self.eta_c.is_finite() {
            return Err(FedError::invalid("eta_c must be positive"));
        }
        if self.batch_size == 0 {
            return Err(FedError::invalid("batch_size must be at least 1"));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(FedError::invalid("momentum must lie in [0, 1)"));
        }
        match self.local {
            LocalWork::Steps(0) | LocalWork::Epochs(0) => {
                Err(FedError::invalid("local work must be at least one step or epoch"))
            }
            _ => Ok(()),
        }
    }

    /// Number of local steps `K` for a client holding `n` examples.
    pub fn local_steps(&self, n: usize) -> usize {
        match self.local {
            LocalWork::Steps(k) => k,
            LocalWork::Epochs(e) => e * n.div_ceil(self.batch_size),
        }
    }
}

/// A client's local objective: mean loss over a chosen subset of its examples.
pub trait LocalObjective: Sync {
    fn num_examples(&self) -> usize;

    fn num_params(&self) -> usize;

    fn loss_and_grad(&self, w: &ParamVector, rows: &[usize]) -> Result<(f64, ParamVector)>;

    fn full_loss(&self, w: &ParamVector) -> Result<f64> {
        let rows: Vec<usize> = (0..self.num_examples()).collect();
        Ok(self.loss_and_grad(w, &rows)?.0)
    }
}

/// A classifier together with one client's shard of data.
#[derive(Debug, Clone)]
pub struct ClientShard {
    pub spec: ModelSpec,
    pub data: Batch,
}

impl LocalObjective for ClientShard {
    fn num_examples(&self) -> usize {
        self.data.rows()
    }

    fn num_params(&self) -> usize {
        self.spec.num_params()
    }

    fn loss_and_grad(&self, w: &ParamVector, rows: &[usize]) -> Result<(f64, ParamVector)> {
        models::loss_and_grad_rows(&self.spec, w, &self.data, rows)
    }

    fn full_loss(&self, w: &ParamVector) -> Result<f64> {
        models::loss(&self.spec, w, &self.data)
    }
}

/// `f(w) = mean_r 0.5 * ||w - c_r||^2` over per-example centres `c_r`.
///
/// A strongly convex surrogate with closed-form minimiser, used to exercise
/// local training and aggregation without a classifier.
#[derive(Debug, Clone)]
pub struct QuadraticObjective {
    pub centres: Vec<ParamVector>,
}

impl LocalObjective for QuadraticObjective {
    fn num_examples(&self) -> usize {
        self.centres.len()
    }

    fn num_params(&self) -> usize {
        self.centres.first().map_or(0, |c| c.len())
    }

    fn loss_and_grad(&self, w: &ParamVector, rows: &[usize]) -> Result<(f64, ParamVector)> {
        w.check_len(self.num_params())?;
        let scale = 1.0 / rows.len() as f64;
        let mut grad = ParamVector::zeros(w.len());
        let mut loss = 0.0;
        for &r in rows {
            let c = &self.centres[r];
            for (k, g) in grad.as_mut_slice().iter_mut().enumerate() {
                let diff = w[k] - c[k];
                loss += 0.5 * diff * diff;
                *g += diff * scale;
            }
        }
        Ok((loss * scale, grad))
    }
}

/// Epoch-wise shuffled minibatches. Batches are contiguous slices of each
/// epoch's permutation and the short final batch of an epoch is kept.
pub fn minibatch_schedule<R: Rng>(n: usize, batch_size: usize, steps: usize, rng: &mut R) -> Vec<Vec<usize>> {
    let batch_size = batch_size.max(1);
    let mut schedule = Vec::with_capacity(steps);
    let mut perm: Vec<usize> = (0..n).collect();
    while schedule.len() < steps && n > 0 {
        perm.shuffle(rng);
        for chunk in perm.chunks(batch_size) {
            if schedule.len() == steps {
                break;
            }
            schedule.push(chunk.to_vec());
        }
    }
    schedule
}

/// Runs local training from `w` and returns `(w - w_K) / eta_c`.
pub fn device_update<O, R>(objective: &O, w: &ParamVector, cfg: &ClientConfig, rng: &mut R) -> Result<ParamVector>
where
    O: LocalObjective + ?Sized,
    R: Rng,
{
    w.check_len(objective.num_params())?;
    let n = objective.num_examples();
    if n == 0 {
        return Err(FedError::invalid("client holds no data"));
    }
    let steps = cfg.local_steps(n);
    let schedule = minibatch_schedule(n, cfg.batch_size, steps, rng);

    let mut local = w.clone();
    let mut velocity = ParamVector::zeros(w.len());
    for (step, rows) in schedule.iter().enumerate() {
        let (loss, grad) = objective.loss_and_grad(&local, rows)?;
        if !loss.is_finite() || !grad.is_finite() {
            return Err(FedError::LocalDivergence { step });
        }
        let dir = if cfg.momentum == 0.0 {
            grad
        } else {
            for (v, g) in velocity.as_mut_slice().iter_mut().zip(grad.iter()) {
                *v = cfg.momentum * *v + g;
            }
            velocity.clone()
        };
        local.add_scaled(-cfg.eta_c, &dir);
    }
    Ok(ParamVector::new(
        w.iter()
            .zip(local.iter())
            .map(|(start, end)| (start - end) / cfg.eta_c)
            .collect(),
    ))
}
