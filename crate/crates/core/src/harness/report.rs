//! CSV reports (RFC 4180, CRLF line endings) and their metadata sidecars.

use std::io::Write;
use std::path::{Path, PathBuf};

use csv::{Terminator, WriterBuilder};
use serde::{Deserialize, Serialize};

use crate::error::Result;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ReportKind {
    Rmse,
    Roc,
    Trace,
    Estimate,
    Design,
}

/// One row per (rho, J); sorted by J.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RmseRow {
    pub rho: f64,
    pub j: usize,
    pub n_total: u64,
    pub rmse_p1: f64,
    pub rmse_theta1: f64,
    pub crlb_sqrt_p1: f64,
    pub crlb_sqrt_theta1: f64,
}

/// One row per (detector, c01); sorted by detector, then c01.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RocRow {
    pub rho: f64,
    pub detector: String,
    pub c01: f64,
    pub pf_mean: f64,
    pub pd_mean: f64,
    pub pf_std: f64,
    pub pd_std: f64,
}

/// One row per (stage, free parameter).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceRow {
    pub stage: usize,
    pub n_total: u64,
    pub parameter: String,
    pub estimate: f64,
    pub log_likelihood: f64,
    pub converged: bool,
    pub reused_previous: bool,
    pub fusion_rule: String,
    pub design_cost: f64,
    pub pf_truth: f64,
    pub pd_truth: f64,
    pub cost_truth: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EstimateRow {
    pub parameter: String,
    pub estimate: f64,
    pub crlb_sqrt: f64,
    pub log_likelihood: f64,
    pub converged: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DesignRow {
    pub c01: f64,
    pub p_false_alarm: f64,
    pub p_detect: f64,
    pub bayes_cost: f64,
    pub sweeps: usize,
    pub fusion_rule: String,
    /// Hex-packed bits, sensors separated by `;`, bits within a sensor by `,`.
    pub quantizers: String,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Rows {
    Rmse(Vec<RmseRow>),
    Roc(Vec<RocRow>),
    Trace(Vec<TraceRow>),
    Estimate(Vec<EstimateRow>),
    Design(Vec<DesignRow>),
}

impl Rows {
    pub fn len(&self) -> usize {
        match self {
            Rows::Rmse(r) => r.len(),
            Rows::Roc(r) => r.len(),
            Rows::Trace(r) => r.len(),
            Rows::Estimate(r) => r.len(),
            Rows::Design(r) => r.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Run facts kept out of the CSV so the CSV stays reproducible byte for byte.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportMetadata {
    pub kind: ReportKind,
    pub scenario: String,
    pub config_hash: String,
    pub seed: u64,
    pub replicates: usize,
    pub failed_replicates: usize,
    pub runtime_secs: f64,
    pub version: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentReport {
    pub rows: Rows,
    pub metadata: ReportMetadata,
}

fn write_rows<W: Write, T: Serialize>(w: W, rows: &[T]) -> Result<()> {
    let mut wr = WriterBuilder::new().terminator(Terminator::CRLF).from_writer(w);
    for r in rows {
        wr.serialize(r)?;
    }
    wr.flush()?;
    Ok(())
}

impl ExperimentReport {
    pub fn kind(&self) -> ReportKind {
        self.metadata.kind
    }

    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        match &self.rows {
            Rows::Rmse(r) => write_rows(w, r),
            Rows::Roc(r) => write_rows(w, r),
            Rows::Trace(r) => write_rows(w, r),
            Rows::Estimate(r) => write_rows(w, r),
            Rows::Design(r) => write_rows(w, r),
        }
    }

    pub fn csv_string(&self) -> Result<String> {
        let mut buf = Vec::new();
        self.write_csv(&mut buf)?;
        Ok(String::from_utf8(buf).expect("csv output is UTF-8"))
    }

    /// Writes the CSV to `path` and the metadata next to it; returns the sidecar path.
    pub fn write_files(&self, path: &Path) -> Result<PathBuf> {
        self.write_csv(std::io::BufWriter::new(std::fs::File::create(path)?))?;
        let meta = sidecar_path(path);
        std::fs::write(&meta, serde_json::to_string_pretty(&self.metadata)?)?;
        Ok(meta)
    }
}

pub fn sidecar_path(csv_path: &Path) -> PathBuf {
    let mut s = csv_path.as_os_str().to_owned();
    s.push(".meta.json");
    PathBuf::from(s)
}
