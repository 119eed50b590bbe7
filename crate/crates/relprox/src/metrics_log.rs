//! CSV outputs: the per-epoch training log, DET points, and evaluation reports.

use std::fs::{self, OpenOptions};
use std::path::Path;

use relprox_core::metrics::{DetPoint, EvalReport};
use relprox_core::train::MetricsRow;

use crate::error::{CliError, IoContext, Result};

pub const METRICS_COLUMNS: [&str; 13] = [
    "epoch",
    "step",
    "lr",
    "loss_total",
    "loss_p2p",
    "loss_rpl_d",
    "loss_rpl_a",
    "loss_rpl_p",
    "loss_pc",
    "loss_mono",
    "loss_triplet",
    "dev_ap",
    "dev_eer",
];

/// Shortest representation that parses back to the same `f64`.
fn num(x: f64) -> String {
    format!("{x}")
}

pub fn metrics_record(r: &MetricsRow) -> Vec<String> {
    let t = r.terms;
    let mut rec = vec![r.epoch.to_string(), r.step.to_string()];
    rec.extend(
        [r.lr, r.loss_total, t.p2p, t.rpl_d, t.rpl_a, t.rpl_p, t.pc, t.mono, t.triplet, r.dev_ap, r.dev_eer]
            .into_iter()
            .map(num),
    );
    rec
}

fn csv_err(path: &Path, e: csv::Error) -> CliError {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => CliError::io(path, io),
        other => CliError::format(path, format!("{other:?}")),
    }
}

/// Appends rows to the training log, writing the header first if the file is new.
pub struct MetricsLog {
    writer: csv::Writer<fs::File>,
    path: std::path::PathBuf,
}

impl MetricsLog {
    /// Opens `path` keeping only rows with `epoch <= keep_through` (a resumed
    /// run rewrites what follows). `None` starts a fresh file.
    pub fn open(path: &Path, keep_through: Option<u32>) -> Result<Self> {
        let mut kept = Vec::new();
        if let (Some(limit), true) = (keep_through, path.exists()) {
            let mut reader = csv::Reader::from_path(path).map_err(|e| csv_err(path, e))?;
            for rec in reader.records() {
                let rec = rec.map_err(|e| csv_err(path, e))?;
                let epoch: u32 = rec
                    .get(0)
                    .and_then(|v| v.parse().ok())
                    .ok_or_else(|| CliError::format(path, "metrics row without an epoch"))?;
                if epoch <= limit {
                    kept.push(rec);
                }
            }
        }
        let file = OpenOptions::new().write(true).create(true).truncate(true).open(path).at(path)?;
        let mut writer = csv::Writer::from_writer(file);
        writer.write_record(METRICS_COLUMNS).map_err(|e| csv_err(path, e))?;
        for rec in &kept {
            writer.write_record(rec).map_err(|e| csv_err(path, e))?;
        }
        writer.flush().at(path)?;
        Ok(Self { writer, path: path.to_path_buf() })
    }

    pub fn append(&mut self, row: &MetricsRow) -> Result<()> {
        self.writer.write_record(metrics_record(row)).map_err(|e| csv_err(&self.path, e))?;
        self.writer.flush().at(&self.path)
    }
}

pub fn write_det(path: &Path, points: &[DetPoint]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_err(path, e))?;
    w.write_record(["threshold", "far", "frr"]).map_err(|e| csv_err(path, e))?;
    for p in points {
        w.write_record([num(p.threshold), num(p.far), num(p.frr)]).map_err(|e| csv_err(path, e))?;
    }
    w.flush().at(path)
}

pub const EVAL_COLUMNS: [&str; 9] =
    ["checkpoint", "split", "eer", "eer_threshold", "ap", "n_pos", "n_neg", "sampled_with_replacement", "seed"];

/// Appends one report to the evaluation log, creating it with a header if needed.
pub fn append_eval(path: &Path, checkpoint: &str, split: &str, seed: u64, r: &EvalReport) -> Result<()> {
    let fresh = !path.exists();
    let file = OpenOptions::new().append(true).create(true).open(path).at(path)?;
    let mut w = csv::Writer::from_writer(file);
    if fresh {
        w.write_record(EVAL_COLUMNS).map_err(|e| csv_err(path, e))?;
    }
    w.write_record([
        checkpoint.to_string(),
        split.to_string(),
        num(r.eer),
        num(r.eer_threshold),
        num(r.ap),
        r.n_pos.to_string(),
        r.n_neg.to_string(),
        r.sampled_with_replacement.to_string(),
        seed.to_string(),
    ])
    .map_err(|e| csv_err(path, e))?;
    w.flush().at(path)
}
