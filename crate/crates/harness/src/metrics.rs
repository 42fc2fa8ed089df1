//! The metric CSV shared by training and evaluation runs.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::Result;

/// One row per (instance or training step, sweep). Columns that do not
/// apply to a run are left empty.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    pub method: String,
    pub seed: u64,
    /// Gradient step for training rows.
    pub step: Option<u64>,
    /// Test-corpus index for evaluation rows.
    pub instance: Option<usize>,
    pub sweeps: usize,
    pub particles: usize,
    pub lf: Option<usize>,
    pub sweep: usize,
    /// SNIS estimate of `E[log p(x, z)]`.
    pub log_joint: f64,
    /// Effective sample size over `L`.
    pub ess_l: f64,
    pub wall_ms: f64,
    /// Cumulative log-joint evaluations, an HMC update counting `LF`.
    pub log_joint_evals: usize,
    pub kl_global: Option<f64>,
    pub kl_local: Option<f64>,
    pub recon_mse: Option<f64>,
}

pub const HEADER: &str =
    "method,seed,step,instance,sweeps,particles,lf,sweep,log_joint,ess_l,wall_ms,log_joint_evals,kl_global,kl_local,recon_mse";

pub struct MetricWriter {
    inner: csv::Writer<fs::File>,
}

impl MetricWriter {
    pub fn create(path: &Path) -> Result<Self> {
        let mut inner = csv::WriterBuilder::new().has_headers(false).from_path(path)?;
        inner.write_record(HEADER.split(','))?;
        Ok(Self { inner })
    }

    /// Opens an existing file for appending, writing the header if it is
    /// new.
    pub fn append(path: &Path) -> Result<Self> {
        if !path.exists() {
            return Self::create(path);
        }
        let file = fs::OpenOptions::new().append(true).open(path)?;
        Ok(Self { inner: csv::WriterBuilder::new().has_headers(false).from_writer(file) })
    }

    pub fn write(&mut self, row: &MetricRow) -> Result<()> {
        self.inner.serialize(row)?;
        Ok(())
    }

    pub fn flush(&mut self) -> Result<()> {
        self.inner.flush()?;
        Ok(())
    }
}

pub fn read_rows(path: &Path) -> Result<Vec<MetricRow>> {
    let mut r = csv::Reader::from_path(path)?;
    Ok(r.deserialize().collect::<std::result::Result<_, _>>()?)
}
