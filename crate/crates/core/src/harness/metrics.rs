//! Per-round metrics and their CSV / JSON artifacts.

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{FedError, Result};

use super::config::SimConfig;

pub const CSV_HEADER: [&str; 9] = [
    "round",
    "strategy",
    "train_loss",
    "eval_loss",
    "eval_accuracy",
    "grad_norm_sq",
    "r_norm",
    "table_bytes",
    "participants",
];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundMetrics {
    /// 1-based index of the round just completed.
    pub round: usize,
    pub strategy: String,
    /// Global objective `sum_n p_n F_n(w)` over all client shards.
    pub train_loss: f64,
    pub eval_loss: f64,
    pub eval_accuracy: f64,
    pub grad_norm_sq: f64,
    pub r_norm: f64,
    pub table_bytes: usize,
    pub participants: Vec<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MetricsFormat {
    Csv,
    Json,
}

/// Mean `eval_accuracy` over the last `ceil(fraction * len)` rows.
pub fn tail_average(metrics: &[RoundMetrics], fraction: f64) -> Result<f64> {
    if metrics.is_empty() {
        return Err(FedError::invalid("no metrics to average"));
    }
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(FedError::invalid(format!("tail fraction {fraction} outside (0, 1]")));
    }
    let count = ((fraction * metrics.len() as f64).ceil() as usize).clamp(1, metrics.len());
    let tail = &metrics[metrics.len() - count..];
    Ok(tail.iter().map(|m| m.eval_accuracy).sum::<f64>() / count as f64)
}

fn record(m: &RoundMetrics) -> [String; 9] {
    let participants: Vec<String> = m.participants.iter().map(usize::to_string).collect();
    [
        m.round.to_string(),
        m.strategy.clone(),
        m.train_loss.to_string(),
        m.eval_loss.to_string(),
        m.eval_accuracy.to_string(),
        m.grad_norm_sq.to_string(),
        m.r_norm.to_string(),
        m.table_bytes.to_string(),
        participants.join(";"),
    ]
}

/// Writes the CSV form to any sink. Floats use shortest round-trip text.
pub fn write_csv<W: Write>(metrics: &[RoundMetrics], out: W) -> csv::Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(CSV_HEADER)?;
    for m in metrics {
        w.write_record(record(m))?;
    }
    w.flush()?;
    Ok(())
}

pub fn emit_metrics(metrics: &[RoundMetrics], path: &Path, format: MetricsFormat) -> Result<()> {
    let file = File::create(path).map_err(|e| FedError::io(path, e))?;
    match format {
        MetricsFormat::Csv => write_csv(metrics, BufWriter::new(file)).map_err(|e| FedError::Csv {
            path: path.to_path_buf(),
            source: e,
        }),
        MetricsFormat::Json => {
            let mut out = BufWriter::new(file);
            serde_json::to_writer_pretty(&mut out, metrics)?;
            out.flush().map_err(|e| FedError::io(path, e))
        }
    }
}

fn parse<T: std::str::FromStr>(field: &str, what: &str, line: usize) -> Result<T> {
    field
        .parse()
        .map_err(|_| FedError::Config(format!("metrics row {line}: bad {what} {field:?}")))
}

pub fn read_metrics_csv(path: &Path) -> Result<Vec<RoundMetrics>> {
    let csv_err = |e| FedError::Csv {
        path: path.to_path_buf(),
        source: e,
    };
    let mut r = csv::Reader::from_path(path).map_err(csv_err)?;
    if r.headers().map_err(csv_err)?.iter().ne(CSV_HEADER) {
        return Err(FedError::Config(format!("{} does not have the metrics header", path.display())));
    }
    let mut out = Vec::new();
    for (i, rec) in r.records().enumerate() {
        let rec = rec.map_err(csv_err)?;
        let line = i + 2;
        let participants = if rec[8].is_empty() {
            Vec::new()
        } else {
            rec[8]
                .split(';')
                .map(|s| parse(s, "participant", line))
                .collect::<Result<_>>()?
        };
        out.push(RoundMetrics {
            round: parse(&rec[0], "round", line)?,
            strategy: rec[1].to_string(),
            train_loss: parse(&rec[2], "train_loss", line)?,
            eval_loss: parse(&rec[3], "eval_loss", line)?,
            eval_accuracy: parse(&rec[4], "eval_accuracy", line)?,
            grad_norm_sq: parse(&rec[5], "grad_norm_sq", line)?,
            r_norm: parse(&rec[6], "r_norm", line)?,
            table_bytes: parse(&rec[7], "table_bytes", line)?,
            participants,
        });
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunSummary {
    pub config: SimConfig,
    pub strategy: String,
    pub rounds: usize,
    pub evaluated_rounds: usize,
    pub tail_fraction: f64,
    pub tail_average: f64,
    pub final_train_loss: f64,
    pub final_eval_loss: f64,
    pub final_eval_accuracy: f64,
    pub fp16_saturations: usize,
    pub wall_time_secs: f64,
}

pub fn write_summary(summary: &RunSummary, path: &Path) -> Result<()> {
    let text = serde_json::to_string_pretty(summary)?;
    fs::write(path, text).map_err(|e| FedError::io(path, e))
}

pub fn read_summary(path: &Path) -> Result<RunSummary> {
    let raw = fs::read(path).map_err(|e| FedError::io(path, e))?;
    Ok(serde_json::from_slice(&raw)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn row(round: usize, acc: f64) -> RoundMetrics {
        RoundMetrics {
            round,
            strategy: "fedavg".into(),
            train_loss: 0.1 + round as f64 / 3.0,
            eval_loss: std::f64::consts::PI / round as f64,
            eval_accuracy: acc,
            grad_norm_sq: 1e-17 * round as f64,
            r_norm: 2.0f64.sqrt(),
            table_bytes: 0,
            participants: vec![round, round + 3],
        }
    }

    #[test]
    fn tail_average_counts() {
        let ms: Vec<_> = (1..=100).map(|r| row(r, r as f64)).collect();
        assert_eq!(tail_average(&ms, 1.0).unwrap(), 50.5);
        assert_eq!(tail_average(&ms, 0.1).unwrap(), 95.5);
        let flat: Vec<_> = (1..=7).map(|r| row(r, 0.25)).collect();
        assert_eq!(tail_average(&flat, 0.3).unwrap(), 0.25);
        assert!(tail_average(&[], 0.5).is_err());
        assert!(tail_average(&flat, 0.0).is_err());
    }

    #[test]
    fn empty_csv_is_header_only() {
        let mut buf = Vec::new();
        write_csv(&[], &mut buf).unwrap();
        assert_eq!(String::from_utf8(buf).unwrap(), CSV_HEADER.join(",") + "\n");
    }

    #[test]
    fn csv_round_trip() {
        let ms: Vec<_> = (1..=5).map(|r| row(r, 1.0 / r as f64)).collect();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.csv");
        emit_metrics(&ms, &path, MetricsFormat::Csv).unwrap();
        assert_eq!(read_metrics_csv(&path).unwrap(), ms);

        let json = dir.path().join("m.json");
        emit_metrics(&ms, &json, MetricsFormat::Json).unwrap();
        let back: Vec<RoundMetrics> = serde_json::from_slice(&fs::read(&json).unwrap()).unwrap();
        assert_eq!(back, ms);
    }
}
