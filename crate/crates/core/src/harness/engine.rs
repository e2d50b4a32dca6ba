//! The round loop: sample, train clients in parallel, aggregate, evaluate.

use std::fs;
use std::path::Path;
use std::time::Instant;

use rand::Rng;
use rayon::prelude::*;

use crate::aggregator::{proportional_weights, server_round, table_bytes, uniform_weights, Received, ServerState, Strategy};
use crate::client::{device_update, ClientConfig, ClientShard, LocalObjective};
use crate::datagen::{self, LabeledDataset, Partition};
use crate::error::{FedError, Result};
use crate::models::ModelSpec;
use crate::numvec::{ParamVector, TensorLayout};
use crate::rng::{stream, Purpose};

use super::config::{DataSource, PartitionSpec, SimConfig, WeightScheme};
use super::evaluate::{Evaluator, PoolEvaluator};
use super::metrics::{emit_metrics, tail_average, write_summary, MetricsFormat, RoundMetrics, RunSummary};
use super::sampling::sample_clients;

/// Client objectives plus what the server needs to start.
pub struct Federation<O> {
    pub clients: Vec<O>,
    pub weights: Vec<f64>,
    pub layout: TensorLayout,
    pub w0: ParamVector,
}

#[derive(Debug, Clone)]
pub struct RunSettings {
    pub sampled: usize,
    pub rounds: usize,
    pub client: ClientConfig,
    pub strategy: Strategy,
    pub seed: u64,
    pub eval_every: usize,
    /// Threads used for client updates. Results do not depend on it.
    pub workers: usize,
}

#[derive(Debug, Clone)]
pub struct RunOutcome {
    pub metrics: Vec<RoundMetrics>,
    pub state: ServerState,
}

impl RunOutcome {
    pub fn fp16_saturations(&self) -> usize {
        self.state.table.as_ref().map_or(0, |t| t.saturations())
    }
}

fn worker_pool(workers: usize) -> Result<rayon::ThreadPool> {
    rayon::ThreadPoolBuilder::new()
        .num_threads(workers.max(1))
        .build()
        .map_err(|e| FedError::Config(format!("cannot start worker pool: {e}")))
}

fn as_divergence(e: FedError, round: usize) -> FedError {
    match e {
        FedError::LocalDivergence { .. } | FedError::NonFinite(_) => FedError::Divergence { round },
        other => other,
    }
}

/// Runs `settings.rounds` rounds over an arbitrary federation.
pub fn run_federation<O, E>(fed: &Federation<O>, evaluator: &E, settings: &RunSettings) -> Result<RunOutcome>
where
    O: LocalObjective,
    E: Evaluator + ?Sized,
{
    let n = fed.clients.len();
    if fed.weights.len() != n {
        return Err(FedError::Dimension {
            expected: n,
            found: fed.weights.len(),
        });
    }
    if settings.rounds == 0 || settings.eval_every == 0 {
        return Err(FedError::Config("rounds and eval_every must be at least 1".into()));
    }
    settings.client.validate()?;
    let pool = worker_pool(settings.workers)?;
    let label = settings.strategy.label();
    let eta_c = settings.client.eta_c;

    let mut state = ServerState::new(&settings.strategy, fed.w0.clone(), fed.weights.clone(), fed.layout.clone())?;
    let mut metrics = Vec::new();
    for t in 0..settings.rounds {
        let round = t + 1;
        let ids = sample_clients(n, settings.sampled, t, settings.seed)?;
        let w = &state.w;
        let updates: Vec<Result<ParamVector>> = pool.install(|| {
            ids.par_iter()
                .map(|&i| {
                    let mut rng = stream(settings.seed, Purpose::LocalTraining, t as u64, i as u64);
                    device_update(&fed.clients[i], w, &settings.client, &mut rng)
                })
                .collect()
        });
        let mut received = Received::new();
        for (&i, g) in ids.iter().zip(updates) {
            received.insert(i, g.map_err(|e| as_divergence(e, round))?);
        }

        let (next, report) = server_round(&settings.strategy, state, &received, eta_c).map_err(|e| as_divergence(e, round))?;
        state = next;
        if !state.w.is_finite() {
            return Err(FedError::Divergence { round });
        }

        if round % settings.eval_every == 0 || round == settings.rounds {
            let eval = evaluator.evaluate(&state.w)?;
            let w = &state.w;
            let losses: Vec<Result<f64>> = pool.install(|| fed.clients.par_iter().map(|c| c.full_loss(w)).collect());
            let mut train_loss = 0.0;
            for (p, l) in fed.weights.iter().zip(losses) {
                train_loss += p * l?;
            }
            if !eval.loss.is_finite() || !train_loss.is_finite() {
                return Err(FedError::Divergence { round });
            }
            metrics.push(RoundMetrics {
                round,
                strategy: label.clone(),
                train_loss,
                eval_loss: eval.loss,
                eval_accuracy: eval.accuracy,
                grad_norm_sq: eval.grad_norm_sq,
                r_norm: report.r_norm,
                table_bytes: state.table.as_ref().map_or(0, |t| table_bytes(t).total()),
                participants: ids,
            });
        }
    }
    Ok(RunOutcome { metrics, state })
}

/// Data, partition and federation built from a config.
pub struct Prepared {
    pub train: LabeledDataset,
    pub partition: Partition,
    pub federation: Federation<ClientShard>,
    pub evaluator: PoolEvaluator,
}

fn derived_seed(master: u64, purpose: Purpose) -> u64 {
    stream(master, purpose, 0, 0).random()
}

fn check_shape(ds: &LabeledDataset, spec: &ModelSpec, what: &str) -> Result<()> {
    if ds.dim() != spec.input_dim() || ds.num_classes() > spec.num_classes() {
        return Err(FedError::Config(format!(
            "{what} data has dim {} and {} classes; the model expects {} and {}",
            ds.dim(),
            ds.num_classes(),
            spec.input_dim(),
            spec.num_classes()
        )));
    }
    Ok(())
}

pub fn prepare(cfg: &SimConfig) -> Result<Prepared> {
    cfg.validate()?;
    let (train, eval) = match &cfg.data.source {
        DataSource::Blobs {
            num_classes,
            dim,
            per_class,
            holdout_per_class,
            spread,
        } => {
            let all = datagen::make_blobs(*num_classes, *dim, *per_class, *spread, derived_seed(cfg.seed, Purpose::Dataset))?;
            datagen::split_holdout(&all, *holdout_per_class)?
        }
        DataSource::Csv { train, eval } => (datagen::load_csv(train)?, datagen::load_csv(eval)?),
    };
    check_shape(&train, &cfg.model, "training")?;
    check_shape(&eval, &cfg.model, "evaluation")?;

    let seed = derived_seed(cfg.seed, Purpose::Partition);
    let n = cfg.clients;
    let partition = match cfg.data.partition {
        PartitionSpec::Iid => datagen::partition_iid(&train, n, seed)?,
        PartitionSpec::Mixed => datagen::partition_mixed(&train, n, seed)?,
        PartitionSpec::Dirichlet { beta, min_size } => datagen::partition_dirichlet(&train, n, beta, min_size, seed)?,
        PartitionSpec::Lq { chunks } => datagen::partition_lq(&train, n, chunks, seed)?,
    };
    let clients = partition
        .assignments
        .iter()
        .map(|idx| {
            Ok(ClientShard {
                spec: cfg.model.clone(),
                data: train.subset(idx)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let weights = match cfg.weights {
        WeightScheme::Uniform => uniform_weights(n),
        WeightScheme::DataProportional => proportional_weights(&partition.sizes()),
    };
    let w0 = cfg.model.init_params(&mut stream(cfg.seed, Purpose::Init, 0, 0));
    let pool = eval.as_batch().clone();
    Ok(Prepared {
        federation: Federation {
            clients,
            weights,
            layout: cfg.model.layout(),
            w0,
        },
        evaluator: PoolEvaluator {
            spec: cfg.model.clone(),
            pool,
        },
        train,
        partition,
    })
}

pub fn settings_for(cfg: &SimConfig, workers: usize) -> RunSettings {
    RunSettings {
        sampled: cfg.sampled,
        rounds: cfg.rounds,
        client: cfg.client.clone(),
        strategy: cfg.strategy.clone(),
        seed: cfg.seed,
        eval_every: cfg.eval.every,
        workers,
    }
}

pub fn run_simulation(cfg: &SimConfig, workers: usize) -> Result<RunOutcome> {
    let prepared = prepare(cfg)?;
    run_federation(&prepared.federation, &prepared.evaluator, &settings_for(cfg, workers))
}

/// Per-client label histograms for a config's partition.
pub fn partition_report(cfg: &SimConfig) -> Result<Vec<Vec<usize>>> {
    let p = prepare(cfg)?;
    (0..p.partition.num_clients())
        .map(|c| datagen::label_histogram(&p.train, &p.partition, c))
        .collect()
}

/// Runs a config and writes `metrics.csv` and `summary.json` into `out`.
pub fn simulate_to_dir(cfg: &SimConfig, out: &Path, workers: usize) -> Result<RunSummary> {
    let start = Instant::now();
    let outcome = run_simulation(cfg, workers)?;
    let wall = start.elapsed().as_secs_f64();
    fs::create_dir_all(out).map_err(|e| FedError::io(out, e))?;
    emit_metrics(&outcome.metrics, &out.join("metrics.csv"), MetricsFormat::Csv)?;
    let last = outcome.metrics.last().expect("the final round is always evaluated");
    let summary = RunSummary {
        config: cfg.clone(),
        strategy: cfg.strategy.label(),
        rounds: cfg.rounds,
        evaluated_rounds: outcome.metrics.len(),
        tail_fraction: cfg.eval.tail_fraction,
        tail_average: tail_average(&outcome.metrics, cfg.eval.tail_fraction)?,
        final_train_loss: last.train_loss,
        final_eval_loss: last.eval_loss,
        final_eval_accuracy: last.eval_accuracy,
        fp16_saturations: outcome.fp16_saturations(),
        wall_time_secs: wall,
    };
    write_summary(&summary, &out.join("summary.json"))?;
    Ok(summary)
}
