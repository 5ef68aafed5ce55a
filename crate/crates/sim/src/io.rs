//! Reading and writing feature sets, head checkpoints and reports.

use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;

use anyhow::Context;
use ciffreeda_core::federation::RoundLog;
use ciffreeda_core::source::SourceReport;
use ciffreeda_core::{fedf, FeatureDataset, HeadParams};
use serde::{Deserialize, Serialize};

pub fn read_fedf(path: &Path) -> anyhow::Result<FeatureDataset> {
    let bytes = fs::read(path).with_context(|| format!("reading {}", path.display()))?;
    fedf::decode(&bytes).with_context(|| format!("decoding {}", path.display()))
}

pub fn write_fedf(path: &Path, data: &FeatureDataset) -> anyhow::Result<()> {
    let bytes = fedf::encode(data)?;
    write_atomic(path, &bytes)
}

pub fn read_head(path: &Path) -> anyhow::Result<HeadParams> {
    let bytes = fs::read(path).with_context(|| format!("reading {}", path.display()))?;
    HeadParams::deserialize(&bytes).with_context(|| format!("decoding head {}", path.display()))
}

pub fn write_head(path: &Path, head: &HeadParams) -> anyhow::Result<()> {
    write_atomic(path, &head.serialize())
}

/// Writes to a sibling temporary file and renames it into place.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> anyhow::Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    let tmp = path.with_extension("partial");
    fs::write(&tmp, bytes).with_context(|| format!("writing {}", tmp.display()))?;
    fs::rename(&tmp, path).with_context(|| format!("renaming to {}", path.display()))?;
    Ok(())
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> anyhow::Result<()> {
    let mut bytes = serde_json::to_vec_pretty(value)?;
    bytes.push(b'\n');
    write_atomic(path, &bytes)
}

pub fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> anyhow::Result<T> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundRecord {
    pub round: usize,
    pub client_val_mar: Vec<Option<f64>>,
    pub aggregated_val_mar: Option<f64>,
    pub test_mar: Option<f64>,
    pub bytes: u64,
}

impl From<&RoundLog> for RoundRecord {
    fn from(l: &RoundLog) -> Self {
        Self {
            round: l.round,
            client_val_mar: l.client_val_mar.clone(),
            aggregated_val_mar: l.aggregated_val_mar,
            test_mar: l.test_mar,
            bytes: l.bytes,
        }
    }
}

/// One JSON object per line.
pub fn write_history(path: &Path, history: &[RoundLog]) -> anyhow::Result<()> {
    let mut out = BufWriter::new(Vec::new());
    for log in history {
        serde_json::to_writer(&mut out, &RoundRecord::from(log))?;
        out.write_all(b"\n")?;
    }
    write_atomic(path, &out.into_inner()?)
}

pub fn read_history(path: &Path) -> anyhow::Result<Vec<RoundRecord>> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| serde_json::from_str(l).map_err(Into::into))
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SourceRow {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_mar: f64,
}

pub fn source_rows(report: &SourceReport) -> Vec<SourceRow> {
    report
        .rows
        .iter()
        .map(|r| SourceRow {
            epoch: r.epoch,
            train_loss: r.train_loss,
            val_mar: r.val_mar,
        })
        .collect()
}
