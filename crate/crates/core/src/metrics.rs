//! Per-epoch metric rows: `stage,epoch,train_loss,val_acc,gate_alpha,gate_G,lr`.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    pub stage: String,
    pub epoch: usize,
    pub train_loss: f64,
    pub val_acc: f64,
    pub gate_alpha: u8,
    #[serde(rename = "gate_G")]
    pub gate_g: u8,
    pub lr: f64,
}

impl MetricRow {
    pub fn new(stage: &str, epoch: usize, train_loss: f64, val_acc: f64, gates: (bool, bool), lr: f64) -> Self {
        Self {
            stage: stage.to_owned(),
            epoch,
            train_loss,
            val_acc,
            gate_alpha: gates.0 as u8,
            gate_g: gates.1 as u8,
            lr,
        }
    }
}

pub fn to_csv_string(rows: &[MetricRow]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    if rows.is_empty() {
        w.write_record(["stage", "epoch", "train_loss", "val_acc", "gate_alpha", "gate_G", "lr"])?;
    }
    for r in rows {
        w.serialize(r)?;
    }
    let bytes = w.into_inner().map_err(|e| Error::Io(e.into_error()))?;
    String::from_utf8(bytes).map_err(|e| Error::format("metrics csv", e.to_string()))
}

pub fn write_csv(path: &Path, rows: &[MetricRow]) -> Result<()> {
    std::fs::write(path, to_csv_string(rows)?)?;
    Ok(())
}

pub fn parse_csv(text: &str) -> Result<Vec<MetricRow>> {
    let mut r = csv::Reader::from_reader(text.as_bytes());
    let rows = r.deserialize().collect::<std::result::Result<Vec<MetricRow>, _>>()?;
    Ok(rows)
}

pub fn read_csv(path: &Path) -> Result<Vec<MetricRow>> {
    parse_csv(&std::fs::read_to_string(path)?)
}

/// Whether epochs increase by exactly one from row to row.
pub fn epochs_contiguous(rows: &[MetricRow]) -> bool {
    rows.windows(2).all(|w| w[1].epoch == w[0].epoch + 1)
}
