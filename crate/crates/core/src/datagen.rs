//! Synthetic datasets and label-skew client partitioners.
//!
//! Every partitioner is a pure function of `(dataset, parameters, seed)`.
//! Splits that do not divide evenly drop the remainder and report how many
//! indices were dropped, so client sizes (and default weights) stay uniform.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Gamma, StandardNormal};

use crate::error::{FedError, Result};
use crate::models::Batch;
use crate::rng::seeded;

const MAX_DIRICHLET_REDRAWS: usize = 1000;

/// A pooled labelled dataset in which every class occurs at least once.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledDataset {
    data: Batch,
}

impl LabeledDataset {
    pub fn new(data: Batch) -> Result<Self> {
        let mut seen = vec![false; data.num_classes()];
        for &l in data.labels() {
            seen[l] = true;
        }
        if let Some(missing) = seen.iter().position(|s| !s) {
            return Err(FedError::invalid(format!("class {missing} has no examples")));
        }
        Ok(LabeledDataset { data })
    }

    pub fn len(&self) -> usize {
        self.data.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.data.rows() == 0
    }

    pub fn num_classes(&self) -> usize {
        self.data.num_classes()
    }

    pub fn dim(&self) -> usize {
        self.data.dim()
    }

    pub fn labels(&self) -> &[usize] {
        self.data.labels()
    }

    pub fn as_batch(&self) -> &Batch {
        &self.data
    }

    pub fn subset(&self, indices: &[usize]) -> Result<Batch> {
        self.data.select(indices)
    }

    fn class_indices(&self, pool: &[usize]) -> Vec<Vec<usize>> {
        let mut by_class = vec![Vec::new(); self.num_classes()];
        for &i in pool {
            by_class[self.labels()[i]].push(i);
        }
        by_class
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Partition {
    pub assignments: Vec<Vec<usize>>,
    /// Indices left unassigned because a split did not divide evenly.
    pub dropped: usize,
    /// Full redraws performed by the Dirichlet partitioner.
    pub redraws: usize,
}

impl Partition {
    pub fn num_clients(&self) -> usize {
        self.assignments.len()
    }

    pub fn sizes(&self) -> Vec<usize> {
        self.assignments.iter().map(Vec::len).collect()
    }

    fn check_non_empty(self) -> Result<Self> {
        if let Some(c) = self.assignments.iter().position(Vec::is_empty) {
            return Err(FedError::Infeasible(format!("client {c} received no examples")));
        }
        Ok(self)
    }
}

/// Gaussian blobs: `per_class` points around each of `num_classes` centroids.
pub fn make_blobs(num_classes: usize, dim: usize, per_class: usize, spread: f64, seed: u64) -> Result<LabeledDataset> {
    if num_classes < 2 || per_class < 1 || dim < 1 || !(spread > 0.0) {
        return Err(FedError::invalid(
            "make_blobs needs num_classes >= 2, dim >= 1, per_class >= 1, spread > 0",
        ));
    }
    let mut rng = seeded(seed);
    let centroids: Vec<f64> = (0..num_classes * dim)
        .map(|_| 3.0 * rng.sample::<f64, _>(StandardNormal))
        .collect();
    let mut features = Vec::with_capacity(num_classes * per_class * dim);
    let mut labels = Vec::with_capacity(num_classes * per_class);
    for c in 0..num_classes {
        let centre = &centroids[c * dim..(c + 1) * dim];
        for _ in 0..per_class {
            features.extend(
                centre
                    .iter()
                    .map(|m| m + spread * rng.sample::<f64, _>(StandardNormal)),
            );
            labels.push(c);
        }
    }
    LabeledDataset::new(Batch::new(features, dim, labels, num_classes)?)
}

/// Moves the last `per_class` examples of every class into a second dataset.
pub fn split_holdout(ds: &LabeledDataset, per_class: usize) -> Result<(LabeledDataset, LabeledDataset)> {
    let all: Vec<usize> = (0..ds.len()).collect();
    let mut train = Vec::new();
    let mut held = Vec::new();
    for idx in ds.class_indices(&all) {
        if idx.len() <= per_class {
            return Err(FedError::invalid(format!(
                "holdout of {per_class} per class leaves no training data"
            )));
        }
        let cut = idx.len() - per_class;
        train.extend_from_slice(&idx[..cut]);
        held.extend_from_slice(&idx[cut..]);
    }
    train.sort_unstable();
    held.sort_unstable();
    Ok((
        LabeledDataset::new(ds.subset(&train)?)?,
        LabeledDataset::new(ds.subset(&held)?)?,
    ))
}

/// Deals each class's (shuffled) indices out evenly across `n` clients.
fn deal_per_class<R: Rng>(ds: &LabeledDataset, pool: &[usize], n: usize, rng: &mut R) -> Result<(Vec<Vec<usize>>, usize)> {
    let by_class = ds.class_indices(pool);
    let smallest = by_class.iter().map(Vec::len).min().unwrap_or(0);
    if n > smallest {
        return Err(FedError::invalid(format!(
            "{n} clients exceed the smallest class count {smallest}"
        )));
    }
    let mut out = vec![Vec::new(); n];
    let mut dropped = 0;
    for mut idx in by_class {
        idx.shuffle(rng);
        let share = idx.len() / n;
        for (client, chunk) in idx.chunks_exact(share).take(n).enumerate() {
            out[client].extend_from_slice(chunk);
        }
        dropped += idx.len() - share * n;
    }
    Ok((out, dropped))
}

/// Every client receives the same number of examples from every class.
pub fn partition_iid(ds: &LabeledDataset, n: usize, seed: u64) -> Result<Partition> {
    if n == 0 {
        return Err(FedError::invalid("need at least one client"));
    }
    let mut rng = seeded(seed);
    let all: Vec<usize> = (0..ds.len()).collect();
    let (assignments, dropped) = deal_per_class(ds, &all, n, &mut rng)?;
    Partition {
        assignments,
        dropped,
        redraws: 0,
    }
    .check_non_empty()
}

fn sorted_by_label(ds: &LabeledDataset, pool: &[usize]) -> Vec<usize> {
    let mut idx = pool.to_vec();
    idx.sort_by_key(|&i| (ds.labels()[i], i));
    idx
}

/// Half of the pool (a seeded random half) is dealt IID; the other half is
/// sorted by label and cut into one contiguous shard per client.
pub fn partition_mixed(ds: &LabeledDataset, n: usize, seed: u64) -> Result<Partition> {
    if n == 0 {
        return Err(FedError::invalid("need at least one client"));
    }
    let mut rng = seeded(seed);
    let mut all: Vec<usize> = (0..ds.len()).collect();
    all.shuffle(&mut rng);
    let (iid_half, skew_half) = all.split_at(ds.len() / 2);
    let (mut assignments, mut dropped) = deal_per_class(ds, iid_half, n, &mut rng)?;

    let sorted = sorted_by_label(ds, skew_half);
    let shard = sorted.len() / n;
    if shard == 0 {
        return Err(FedError::invalid(format!(
            "{n} clients exceed the non-IID half of {} examples",
            sorted.len()
        )));
    }
    for (client, chunk) in sorted.chunks_exact(shard).take(n).enumerate() {
        assignments[client].extend_from_slice(chunk);
    }
    dropped += sorted.len() - shard * n;
    Partition {
        assignments,
        dropped,
        redraws: 0,
    }
    .check_non_empty()
}

fn dirichlet<R: Rng>(gamma: &Gamma<f64>, n: usize, rng: &mut R) -> Option<Vec<f64>> {
    let draws: Vec<f64> = (0..n).map(|_| gamma.sample(rng)).collect();
    let total: f64 = draws.iter().sum();
    if !(total > 0.0) || !total.is_finite() {
        return None;
    }
    Some(draws.into_iter().map(|g| g / total).collect())
}

/// Per-class client proportions drawn from `Dirichlet(beta * 1_n)`. The whole
/// assignment is redrawn until every client holds at least `min_size` examples.
pub fn partition_dirichlet(ds: &LabeledDataset, n: usize, beta: f64, min_size: usize, seed: u64) -> Result<Partition> {
    if n == 0 || !(beta > 0.0) || min_size == 0 {
        return Err(FedError::invalid(
            "dirichlet partition needs n >= 1, beta > 0, min_size >= 1",
        ));
    }
    let gamma = Gamma::new(beta, 1.0).map_err(|e| FedError::invalid(e.to_string()))?;
    let mut rng = seeded(seed);
    let all: Vec<usize> = (0..ds.len()).collect();
    let by_class = ds.class_indices(&all);

    for attempt in 0..MAX_DIRICHLET_REDRAWS {
        let mut assignments = vec![Vec::new(); n];
        let mut degenerate = false;
        for class in &by_class {
            let mut idx = class.clone();
            idx.shuffle(&mut rng);
            let Some(props) = dirichlet(&gamma, n, &mut rng) else {
                degenerate = true;
                break;
            };
            let mut start = 0usize;
            let mut cumulative = 0.0;
            for (client, p) in props.iter().enumerate() {
                let end = if client + 1 == n {
                    idx.len()
                } else {
                    cumulative += p;
                    ((cumulative * idx.len() as f64) as usize).clamp(start, idx.len())
                };
                assignments[client].extend_from_slice(&idx[start..end]);
                start = end;
            }
        }
        if !degenerate && assignments.iter().all(|a| a.len() >= min_size) {
            return Ok(Partition {
                assignments,
                dropped: 0,
                redraws: attempt,
            });
        }
    }
    Err(FedError::Infeasible(format!(
        "no Dirichlet draw gave every one of {n} clients {min_size} examples after {MAX_DIRICHLET_REDRAWS} attempts"
    )))
}

/// Sort-and-partition: labels sorted, cut into `n * chunks` equal shards,
/// shard order shuffled, `chunks` shards dealt to each client.
pub fn partition_lq(ds: &LabeledDataset, n: usize, chunks: usize, seed: u64) -> Result<Partition> {
    if n == 0 || chunks == 0 {
        return Err(FedError::invalid("need at least one client and one chunk"));
    }
    let shards = n * chunks;
    if shards > ds.len() {
        return Err(FedError::invalid(format!(
            "{shards} shards exceed {} examples",
            ds.len()
        )));
    }
    let all: Vec<usize> = (0..ds.len()).collect();
    let sorted = sorted_by_label(ds, &all);
    let size = sorted.len() / shards;
    let mut pieces: Vec<&[usize]> = sorted.chunks_exact(size).take(shards).collect();
    let mut rng = seeded(seed);
    pieces.shuffle(&mut rng);
    let assignments = pieces
        .chunks(chunks)
        .map(|group| group.concat())
        .collect();
    Partition {
        assignments,
        dropped: sorted.len() - size * shards,
        redraws: 0,
    }
    .check_non_empty()
}

pub fn label_histogram(ds: &LabeledDataset, part: &Partition, client: usize) -> Result<Vec<usize>> {
    let idx = part
        .assignments
        .get(client)
        .ok_or(FedError::UnknownClient(client))?;
    let mut counts = vec![0usize; ds.num_classes()];
    for &i in idx {
        counts[ds.labels()[i]] += 1;
    }
    Ok(counts)
}

/// Loads a dataset whose header is `f0,...,f{dim-1},label`.
pub fn load_csv(path: &Path) -> Result<LabeledDataset> {
    let csv_err = |source| FedError::Csv {
        path: path.to_path_buf(),
        source,
    };
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .from_path(path)
        .map_err(csv_err)?;
    let header = reader.headers().map_err(csv_err)?.clone();
    let dim = header.len().saturating_sub(1);
    let expected: Vec<String> = (0..dim)
        .map(|i| format!("f{i}"))
        .chain(std::iter::once("label".to_string()))
        .collect();
    if dim == 0 || header.iter().ne(expected.iter().map(String::as_str)) {
        return Err(FedError::invalid(format!(
            "{}: header must be f0,...,f{{dim-1}},label",
            path.display()
        )));
    }

    let mut features = Vec::new();
    let mut labels = Vec::new();
    for (row, record) in reader.records().enumerate() {
        let record = record.map_err(csv_err)?;
        if record.len() != dim + 1 {
            return Err(FedError::invalid(format!(
                "{}: row {} has {} fields, expected {}",
                path.display(),
                row + 1,
                record.len(),
                dim + 1
            )));
        }
        for (col, field) in record.iter().take(dim).enumerate() {
            let v: f64 = field.trim().parse().map_err(|_| {
                FedError::invalid(format!("{}: row {} column f{col}: bad number {field:?}", path.display(), row + 1))
            })?;
            if !v.is_finite() {
                return Err(FedError::NonFinite(format!(
                    "{}: row {} column f{col}",
                    path.display(),
                    row + 1
                )));
            }
            features.push(v);
        }
        let label: usize = record[dim].trim().parse().map_err(|_| {
            FedError::invalid(format!("{}: row {}: bad label {:?}", path.display(), row + 1, &record[dim]))
        })?;
        labels.push(label);
    }
    let num_classes = labels.iter().max().map_or(0, |m| m + 1).max(2);
    LabeledDataset::new(Batch::new(features, dim, labels, num_classes)?)
}
