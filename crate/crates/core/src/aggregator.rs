//! Server-side aggregation: the per-client state table, the variance-reduced
//! update `r`, and the strategy family built on them.
//!
//! The table stores each client's most recent update `y_j` (zero until the
//! client first participates) and keeps `sum_j p_j * y_j` cached so a round
//! costs `O(|S| d)` rather than `O(N d)`.

use std::collections::BTreeMap;
use std::fs;
use std::io::{self, BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{FedError, Result};
use crate::numvec::{norm2, ParamVector, TensorLayout};
use crate::quant::{self, dequant, quant_with_stats, QuantMode, QuantizedTensor, QuantizedUpdate};
use crate::server_opt::{optimizer_step, OptimizerHyper, OptimizerState};

/// Client id -> update `g_i` for the clients that reported this round.
pub type Received = BTreeMap<usize, ParamVector>;

const WEIGHT_SUM_TOL: f64 = 1e-12;

/// How participant corrections are averaged.
///
/// `ClientWeight` weights each `(g_i - y_i)` by `p_i`; `Unbiased` uses `1/M`,
/// which makes `E[r]` equal the full-participation average for uniform `p`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Weighting {
    ClientWeight,
    #[default]
    Unbiased,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StrategyKind {
    #[serde(rename = "fedavg")]
    FedAvg,
    #[serde(rename = "fedopt_novr")]
    FedOptNoVr,
    Mifa,
    #[serde(rename = "fedvarp")]
    FedVarp,
    #[serde(rename = "fedadavr")]
    FedAdaVr,
    #[serde(rename = "fedadavr_quant")]
    FedAdaVrQuant,
    #[serde(rename = "fedadavr_noopt")]
    FedAdaVrNoOpt,
}

impl StrategyKind {
    pub fn name(self) -> &'static str {
        match self {
            StrategyKind::FedAvg => "fedavg",
            StrategyKind::FedOptNoVr => "fedopt_novr",
            StrategyKind::Mifa => "mifa",
            StrategyKind::FedVarp => "fedvarp",
            StrategyKind::FedAdaVr => "fedadavr",
            StrategyKind::FedAdaVrQuant => "fedadavr_quant",
            StrategyKind::FedAdaVrNoOpt => "fedadavr_noopt",
        }
    }

    pub fn uses_table(self) -> bool {
        !matches!(self, StrategyKind::FedAvg | StrategyKind::FedOptNoVr)
    }

    pub fn uses_optimizer(self) -> bool {
        matches!(
            self,
            StrategyKind::FedOptNoVr | StrategyKind::FedAdaVr | StrategyKind::FedAdaVrQuant
        )
    }
}

fn default_server_lr() -> f64 {
    1.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct StrategySpec {
    kind: StrategyKind,
    #[serde(default)]
    weighting: Weighting,
    /// Plain server step for the non-adaptive strategies.
    #[serde(default = "default_server_lr")]
    server_lr: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    optimizer: Option<OptimizerHyper>,
    #[serde(default)]
    quant_mode: QuantMode,
}

/// A validated aggregation strategy.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "StrategySpec", into = "StrategySpec")]
pub struct Strategy {
    kind: StrategyKind,
    weighting: Weighting,
    server_lr: f64,
    optimizer: Option<OptimizerHyper>,
    quant_mode: QuantMode,
}

impl TryFrom<StrategySpec> for Strategy {
    type Error = FedError;

    fn try_from(s: StrategySpec) -> Result<Self> {
        Strategy::new(s.kind, s.weighting, s.server_lr, s.optimizer, s.quant_mode)
    }
}

impl From<Strategy> for StrategySpec {
    fn from(s: Strategy) -> Self {
        StrategySpec {
            kind: s.kind,
            weighting: s.weighting,
            server_lr: s.server_lr,
            optimizer: s.optimizer,
            quant_mode: s.quant_mode,
        }
    }
}

impl Strategy {
    pub fn new(
        kind: StrategyKind,
        weighting: Weighting,
        server_lr: f64,
        optimizer: Option<OptimizerHyper>,
        quant_mode: QuantMode,
    ) -> Result<Self> {
        match (&optimizer, kind.uses_optimizer()) {
            (None, true) => {
                return Err(FedError::Config(format!("{} needs a server optimizer", kind.name())))
            }
            (Some(_), false) => {
                return Err(FedError::Config(format!(
                    "{} does not use a server optimizer",
                    kind.name()
                )))
            }
            (Some(h), true) => h.validate()?,
            (None, false) => {}
        }
        if !kind.uses_optimizer() && !(server_lr > 0.0 && server_lr.is_finite()) {
            return Err(FedError::Config("server_lr must be positive".into()));
        }
        let quantized = quant_mode != QuantMode::Fp32;
        if quantized != (kind == StrategyKind::FedAdaVrQuant) {
            return Err(FedError::Config(format!(
                "quant_mode {} is not valid for {}",
                quant_mode.name(),
                kind.name()
            )));
        }
        Ok(Strategy {
            kind,
            weighting,
            server_lr,
            optimizer,
            quant_mode,
        })
    }

    pub fn fedavg(weighting: Weighting, server_lr: f64) -> Self {
        Self::new(StrategyKind::FedAvg, weighting, server_lr, None, QuantMode::Fp32)
            .expect("valid fedavg")
    }

    pub fn adaptive(kind: StrategyKind, weighting: Weighting, hyper: OptimizerHyper) -> Result<Self> {
        Self::new(kind, weighting, default_server_lr(), Some(hyper), QuantMode::Fp32)
    }

    pub fn kind(&self) -> StrategyKind {
        self.kind
    }

    pub fn weighting(&self) -> Weighting {
        self.weighting
    }

    pub fn server_lr(&self) -> f64 {
        self.server_lr
    }

    pub fn optimizer(&self) -> Option<&OptimizerHyper> {
        self.optimizer.as_ref()
    }

    pub fn quant_mode(&self) -> QuantMode {
        self.quant_mode
    }

    /// Short label such as `fedadavr_quant-adagrad-int8`.
    pub fn label(&self) -> String {
        let mut s = self.kind.name().to_string();
        if let Some(h) = &self.optimizer {
            s.push('-');
            s.push_str(h.kind.name());
        }
        if self.quant_mode != QuantMode::Fp32 {
            s.push('-');
            s.push_str(self.quant_mode.name());
        }
        s
    }
}

pub fn uniform_weights(n: usize) -> Vec<f64> {
    vec![1.0 / n as f64; n]
}

/// `p_n = |D_n| / sum_j |D_j|`.
pub fn proportional_weights(sizes: &[usize]) -> Vec<f64> {
    let total: usize = sizes.iter().sum();
    sizes.iter().map(|&s| s as f64 / total as f64).collect()
}

#[derive(Debug, Clone, PartialEq)]
pub enum Slot {
    Empty,
    Dense(ParamVector),
    Quantized(QuantizedUpdate),
}

#[derive(Debug, Clone, PartialEq)]
pub struct StateTable {
    slots: Vec<Slot>,
    weights: Vec<f64>,
    cached_sum: ParamVector,
    mode: QuantMode,
    layout: TensorLayout,
    saturations: usize,
}

impl StateTable {
    pub fn new(weights: Vec<f64>, layout: TensorLayout, mode: QuantMode) -> Result<Self> {
        validate_weights(&weights)?;
        Ok(StateTable {
            slots: vec![Slot::Empty; weights.len()],
            cached_sum: ParamVector::zeros(layout.len()),
            weights,
            mode,
            layout,
            saturations: 0,
        })
    }

    pub fn num_clients(&self) -> usize {
        self.slots.len()
    }

    pub fn dim(&self) -> usize {
        self.layout.len()
    }

    pub fn mode(&self) -> QuantMode {
        self.mode
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn layout(&self) -> &TensorLayout {
        &self.layout
    }

    pub fn slot(&self, j: usize) -> Option<&Slot> {
        self.slots.get(j)
    }

    /// `sum_j p_j * deref(y_j)`, maintained incrementally.
    pub fn cached_sum(&self) -> &ParamVector {
        &self.cached_sum
    }

    /// FP16 elements clamped so far.
    pub fn saturations(&self) -> usize {
        self.saturations
    }

    /// The stored update of client `j` as a dense vector.
    pub fn deref(&self, j: usize) -> Result<ParamVector> {
        match self.slots.get(j).ok_or(FedError::UnknownClient(j))? {
            Slot::Empty => Ok(ParamVector::zeros(self.dim())),
            Slot::Dense(v) => Ok(v.clone()),
            Slot::Quantized(q) => dequant(q),
        }
    }

    /// Recomputes `sum_j p_j * deref(y_j)` from the slots.
    pub fn recompute_sum(&self) -> Result<ParamVector> {
        let mut sum = ParamVector::zeros(self.dim());
        for j in 0..self.slots.len() {
            if matches!(self.slots[j], Slot::Empty) {
                continue;
            }
            sum.add_scaled(self.weights[j], &self.deref(j)?);
        }
        Ok(sum)
    }

    /// Replaces the slots of every reporting client, quantizing first when
    /// the table is not FP32.
    pub fn update_in_place(&mut self, received: &Received) -> Result<()> {
        for (&i, g) in received {
            if i >= self.slots.len() {
                return Err(FedError::UnknownClient(i));
            }
            g.check_len(self.dim())?;
        }
        for (&i, g) in received {
            let old = self.deref(i)?;
            let (slot, fresh) = if self.mode == QuantMode::Fp32 {
                (Slot::Dense(g.clone()), g.clone())
            } else {
                let (q, stats) = quant_with_stats(g, &self.layout, self.mode)?;
                self.saturations += stats.saturated;
                let fresh = dequant(&q)?;
                (Slot::Quantized(q), fresh)
            };
            let p = self.weights[i];
            for ((s, new), old) in self
                .cached_sum
                .as_mut_slice()
                .iter_mut()
                .zip(fresh.iter())
                .zip(old.iter())
            {
                *s += p * (new - old);
            }
            self.slots[i] = slot;
        }
        Ok(())
    }
}

fn validate_weights(weights: &[f64]) -> Result<()> {
    if weights.is_empty() {
        return Err(FedError::invalid("need at least one client weight"));
    }
    if weights.iter().any(|p| !(*p > 0.0)) {
        return Err(FedError::invalid("client weights must be positive"));
    }
    let sum: f64 = weights.iter().sum();
    if (sum - 1.0).abs() > WEIGHT_SUM_TOL {
        return Err(FedError::invalid(format!("client weights sum to {sum}, not 1")));
    }
    Ok(())
}

/// Pure form of [`StateTable::update_in_place`].
pub fn update_table(table: &StateTable, received: &Received) -> Result<StateTable> {
    let mut next = table.clone();
    next.update_in_place(received)?;
    Ok(next)
}

fn check_received(received: &Received, n: usize, dim: usize) -> Result<()> {
    if received.is_empty() {
        return Err(FedError::invalid("no client updates received"));
    }
    for (&i, g) in received {
        if i >= n {
            return Err(FedError::UnknownClient(i));
        }
        g.check_len(dim)?;
    }
    Ok(())
}

fn participant_weight(weighting: Weighting, weights: &[f64], i: usize, m: usize) -> f64 {
    match weighting {
        Weighting::ClientWeight => weights[i],
        Weighting::Unbiased => 1.0 / m as f64,
    }
}

/// `sum_{i in S} weight_i * (g_i - y_i)`, with `y_i = 0` when no table.
fn weighted_corrections(
    received: &Received,
    weights: &[f64],
    weighting: Weighting,
    table: Option<&StateTable>,
    dim: usize,
) -> Result<ParamVector> {
    let m = received.len();
    let mut acc = ParamVector::zeros(dim);
    for (&i, g) in received {
        let a = participant_weight(weighting, weights, i, m);
        match table.map(|t| &t.slots[i]) {
            None | Some(Slot::Empty) => acc.add_scaled(a, g),
            Some(_) => {
                let y = table.expect("matched Some").deref(i)?;
                let diff: Vec<f64> = g.iter().zip(y.iter()).map(|(g, y)| g - y).collect();
                acc.add_scaled(a, &diff);
            }
        }
    }
    Ok(acc)
}

/// Variance-reduced update
/// `r = sum_{i in S} w_i (g_i - y_i) + sum_j p_j y_j`,
/// with `w_i = p_i` (client weight) or `1/M` (unbiased).
pub fn compute_r(received: &Received, table: &StateTable, weighting: Weighting) -> Result<ParamVector> {
    check_received(received, table.num_clients(), table.dim())?;
    let mut r = weighted_corrections(received, table.weights(), weighting, Some(table), table.dim())?;
    r.add_scaled(1.0, table.cached_sum());
    Ok(r)
}

/// `G = eta_c * r`.
pub fn pseudo_gradient(r: &ParamVector, eta_c: f64) -> ParamVector {
    r.scaled(eta_c)
}

/// Everything the server carries between rounds.
#[derive(Debug, Clone, PartialEq)]
pub struct ServerState {
    pub w: ParamVector,
    pub weights: Vec<f64>,
    pub table: Option<StateTable>,
    pub opt: Option<OptimizerState>,
}

impl ServerState {
    pub fn new(strategy: &Strategy, w0: ParamVector, weights: Vec<f64>, layout: TensorLayout) -> Result<Self> {
        validate_weights(&weights)?;
        w0.check_len(layout.len())?;
        let table = if strategy.kind().uses_table() {
            Some(StateTable::new(weights.clone(), layout, strategy.quant_mode())?)
        } else {
            None
        };
        let opt = strategy.optimizer().map(|h| h.initial_state(w0.len()));
        Ok(ServerState {
            w: w0,
            weights,
            table,
            opt,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RoundReport {
    /// Norm of the aggregate direction (`r` for table strategies, the
    /// weighted mean of received updates otherwise).
    pub r_norm: f64,
}

fn plain_step(w: &ParamVector, lr: f64, dir: &ParamVector) -> ParamVector {
    let mut next = w.clone();
    next.add_scaled(-lr, dir);
    next
}

/// One server round. The model step always uses the table as it stood
/// before this round; the table is refreshed afterwards (MIFA refreshes
/// first, since it averages the table itself).
pub fn server_round(strategy: &Strategy, state: ServerState, received: &Received, eta_c: f64) -> Result<(ServerState, RoundReport)> {
    let ServerState {
        w,
        weights,
        mut table,
        opt,
    } = state;
    check_received(received, weights.len(), w.len())?;
    let table_ref = || table.as_ref().ok_or_else(|| FedError::Config("strategy state has no table".into()));

    let (w_next, opt_next, r_norm) = match strategy.kind() {
        StrategyKind::FedAvg => {
            let agg = weighted_corrections(received, &weights, strategy.weighting(), None, w.len())?;
            (plain_step(&w, strategy.server_lr() * eta_c, &agg), opt, norm2(&agg))
        }
        StrategyKind::FedOptNoVr => {
            let agg = weighted_corrections(received, &weights, strategy.weighting(), None, w.len())?;
            let g = pseudo_gradient(&agg, eta_c);
            let (w_next, s) = adaptive_step(strategy, &w, &g, opt)?;
            (w_next, Some(s), norm2(&agg))
        }
        StrategyKind::Mifa => {
            let t = table.as_mut().ok_or_else(|| FedError::Config("mifa needs a table".into()))?;
            t.update_in_place(received)?;
            let avg = t.cached_sum().clone();
            (plain_step(&w, strategy.server_lr() * eta_c, &avg), opt, norm2(&avg))
        }
        StrategyKind::FedVarp => {
            let r = compute_r(received, table_ref()?, strategy.weighting())?;
            (plain_step(&w, strategy.server_lr() * eta_c, &r), opt, norm2(&r))
        }
        StrategyKind::FedAdaVr | StrategyKind::FedAdaVrQuant => {
            let r = compute_r(received, table_ref()?, strategy.weighting())?;
            let g = pseudo_gradient(&r, eta_c);
            let (w_next, s) = adaptive_step(strategy, &w, &g, opt)?;
            (w_next, Some(s), norm2(&r))
        }
        StrategyKind::FedAdaVrNoOpt => {
            let r = compute_r(received, table_ref()?, strategy.weighting())?;
            let g = pseudo_gradient(&r, eta_c);
            (plain_step(&w, strategy.server_lr(), &g), opt, norm2(&r))
        }
    };

    if strategy.kind().uses_table() && strategy.kind() != StrategyKind::Mifa {
        table
            .as_mut()
            .expect("table strategies carry a table")
            .update_in_place(received)?;
    }

    Ok((
        ServerState {
            w: w_next,
            weights,
            table,
            opt: opt_next,
        },
        RoundReport { r_norm },
    ))
}

fn adaptive_step(strategy: &Strategy, w: &ParamVector, g: &ParamVector, opt: Option<OptimizerState>) -> Result<(ParamVector, OptimizerState)> {
    let hyper = strategy.optimizer().expect("validated adaptive strategy");
    let state = opt.unwrap_or_else(|| hyper.initial_state(w.len()));
    optimizer_step(w, g, hyper, &state)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TableBytes {
    /// Stored update payloads (dense slots count 8 bytes per element).
    pub payload: usize,
    /// One tag byte per slot.
    pub overhead: usize,
    /// `4 * d * N`, the FP32 reference footprint.
    pub fp32_reference: usize,
}

impl TableBytes {
    pub fn total(&self) -> usize {
        self.payload + self.overhead
    }

    pub fn ratio(&self) -> f64 {
        self.total() as f64 / self.fp32_reference as f64
    }
}

pub fn table_bytes(table: &StateTable) -> TableBytes {
    let payload = table
        .slots
        .iter()
        .map(|s| match s {
            Slot::Empty => 0,
            Slot::Dense(v) => 8 * v.len(),
            Slot::Quantized(q) => quant::quantized_bytes(q),
        })
        .sum();
    TableBytes {
        payload,
        overhead: table.slots.len(),
        fp32_reference: 4 * table.dim() * table.slots.len(),
    }
}

// Snapshot persistence.
//
// table.bin (little-endian): u32 client count, then per client a tag byte
// (0 empty, 1 dense f64, 2 fp16, 3 int8, 4 int4), a u32 tensor count and the
// tensors in quant's tensor encoding.

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SnapshotManifest {
    pub round: usize,
    pub strategy: StrategyKind,
    pub weighting: Weighting,
    pub mode: QuantMode,
    pub weights: Vec<f64>,
    pub shapes: Vec<Vec<usize>>,
}

fn slot_tag(slot: &Slot) -> u8 {
    match slot {
        Slot::Empty => 0,
        Slot::Dense(_) => 1,
        Slot::Quantized(q) => match q.mode {
            QuantMode::Fp32 => 1,
            QuantMode::Fp16 => 2,
            QuantMode::Int8 => 3,
            QuantMode::Int4 => 4,
        },
    }
}

pub fn write_table<W: Write>(table: &StateTable, out: &mut W) -> io::Result<()> {
    out.write_all(&(table.slots.len() as u32).to_le_bytes())?;
    for slot in &table.slots {
        out.write_all(&[slot_tag(slot)])?;
        match slot {
            Slot::Empty => out.write_all(&0u32.to_le_bytes())?,
            Slot::Dense(v) => {
                out.write_all(&(table.layout.num_tensors() as u32).to_le_bytes())?;
                for t in 0..table.layout.num_tensors() {
                    QuantizedTensor::Full {
                        values: v[table.layout.range(t)].to_vec(),
                        shape: table.layout.shapes()[t].clone(),
                    }
                    .write_to(out)?;
                }
            }
            Slot::Quantized(q) => {
                out.write_all(&(q.tensors.len() as u32).to_le_bytes())?;
                for t in &q.tensors {
                    t.write_to(out)?;
                }
            }
        }
    }
    Ok(())
}

fn invalid_data(msg: String) -> io::Error {
    io::Error::new(io::ErrorKind::InvalidData, msg)
}

pub fn read_table<R: Read>(input: &mut R, weights: Vec<f64>, layout: TensorLayout, mode: QuantMode) -> Result<StateTable> {
    let mut table = StateTable::new(weights, layout, mode)?;
    let wrap = |e: io::Error| FedError::Malformed(e.to_string());
    let n = quant::read_u32(input).map_err(wrap)?;
    if n != table.num_clients() {
        return Err(FedError::Malformed(format!(
            "snapshot has {n} clients, manifest has {}",
            table.num_clients()
        )));
    }
    for j in 0..n {
        let mut tag = [0u8; 1];
        input.read_exact(&mut tag).map_err(wrap)?;
        let count = quant::read_u32(input).map_err(wrap)?;
        let tensor_mode = match tag[0] {
            0 => None,
            1 => Some(QuantMode::Fp32),
            2 => Some(QuantMode::Fp16),
            3 => Some(QuantMode::Int8),
            4 => Some(QuantMode::Int4),
            t => return Err(wrap(invalid_data(format!("unknown slot tag {t}")))),
        };
        let Some(tensor_mode) = tensor_mode else {
            if count != 0 {
                return Err(FedError::Malformed("empty slot with tensors".into()));
            }
            continue;
        };
        if count != table.layout.num_tensors() {
            return Err(FedError::Malformed(format!(
                "client {j} stores {count} tensors, layout has {}",
                table.layout.num_tensors()
            )));
        }
        let tensors = (0..count)
            .map(|_| QuantizedTensor::read_from(input, tensor_mode))
            .collect::<io::Result<Vec<_>>>()
            .map_err(wrap)?;
        for (t, tensor) in tensors.iter().enumerate() {
            if tensor.shape() != table.layout.shapes()[t].as_slice() {
                return Err(FedError::Malformed(format!("client {j} tensor {t} has the wrong shape")));
            }
        }
        let q = QuantizedUpdate {
            mode: tensor_mode,
            tensors,
        };
        table.slots[j] = if tensor_mode == QuantMode::Fp32 {
            Slot::Dense(dequant(&q)?)
        } else {
            Slot::Quantized(q)
        };
    }
    table.cached_sum = table.recompute_sum()?;
    Ok(table)
}

pub fn save_snapshot(dir: &Path, table: &StateTable, round: usize, strategy: &Strategy) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| FedError::io(dir, e))?;
    let manifest = SnapshotManifest {
        round,
        strategy: strategy.kind(),
        weighting: strategy.weighting(),
        mode: table.mode(),
        weights: table.weights().to_vec(),
        shapes: table.layout().shapes().to_vec(),
    };
    let manifest_path = dir.join("manifest.json");
    fs::write(&manifest_path, serde_json::to_vec_pretty(&manifest)?).map_err(|e| FedError::io(&manifest_path, e))?;
    let bin_path = dir.join("table.bin");
    let file = fs::File::create(&bin_path).map_err(|e| FedError::io(&bin_path, e))?;
    let mut out = BufWriter::new(file);
    write_table(table, &mut out)
        .and_then(|_| out.flush())
        .map_err(|e| FedError::io(&bin_path, e))
}

pub fn load_snapshot(dir: &Path) -> Result<(SnapshotManifest, StateTable)> {
    let manifest_path = dir.join("manifest.json");
    let raw = fs::read(&manifest_path).map_err(|e| FedError::io(&manifest_path, e))?;
    let manifest: SnapshotManifest = serde_json::from_slice(&raw)?;
    let layout = TensorLayout::new(manifest.shapes.clone())?;
    let bin_path = dir.join("table.bin");
    let file = fs::File::open(&bin_path).map_err(|e| FedError::io(&bin_path, e))?;
    let table = read_table(&mut BufReader::new(file), manifest.weights.clone(), layout, manifest.mode)?;
    Ok((manifest, table))
}
