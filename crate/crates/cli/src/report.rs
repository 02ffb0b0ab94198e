//! Evaluation report files.
//!
//! Two formats per suite, both versioned by column/field names:
//!
//! - `<suite>.csv`: one row per (arch, ratio, metric) with the experiment's
//!   config hash and the checkpoint's content hash for provenance.
//!   Columns: `arch,ratio,metric,value,config_hash,checkpoint_hash`.
//! - `<suite>_cases.jsonl`: one record per evaluated case, carrying the case
//!   seed/index and its score, for significance re-analysis.

use std::fs;
use std::io::Write;
use std::path::Path;

use anyhow::Result;
use serde::Serialize;

#[derive(Debug, Clone, Serialize)]
pub struct MetricRow {
    pub arch: String,
    /// Ratio column; "-" for full attention.
    pub ratio: String,
    pub metric: String,
    pub value: f64,
    pub config_hash: String,
    pub checkpoint_hash: String,
}

pub fn write_csv(path: &Path, rows: &[MetricRow]) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent)?;
    }
    let mut out = String::from("arch,ratio,metric,value,config_hash,checkpoint_hash\n");
    for row in rows {
        out.push_str(&format!(
            "{},{},{},{},{},{}\n",
            row.arch, row.ratio, row.metric, row.value, row.config_hash, row.checkpoint_hash
        ));
    }
    fs::write(path, out)?;
    Ok(())
}

pub fn write_jsonl<T: Serialize>(path: &Path, records: &[T]) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent)?;
    }
    let file = fs::File::create(path)?;
    let mut w = std::io::BufWriter::new(file);
    for record in records {
        writeln!(w, "{}", serde_json::to_string(record)?)?;
    }
    w.flush()?;
    Ok(())
}
