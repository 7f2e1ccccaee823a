//! Result rows, assertion checks and their CSV / JSONL serialization.

use std::collections::BTreeMap;
use std::io::Write;

use serde::{Deserialize, Serialize};

use super::config::OutputFormat;

/// One record of an experiment: a per-sample statistic or an aggregate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResultRow {
    pub experiment: String,
    pub n: usize,
    /// Sample index, or an aggregate marker such as `q0.99`, `median`, `fit`.
    pub sample: String,
    pub statistic: String,
    /// Spectral parameters of the factors, `;`-separated.
    pub z: String,
    /// 1-based indices of `Im`-decorated factors, `;`-separated.
    pub imag: String,
    pub ell: Option<f64>,
    pub ell_hat: Option<f64>,
    pub rho: String,
    /// `⟨|A_j|^2⟩^{1/2}` of the observables, `;`-separated.
    pub hs: String,
    pub raw: f64,
    /// `raw / predicted` whenever `predicted > 0`.
    pub normalized: Option<f64>,
    pub predicted: Option<f64>,
    pub wall_time_ms: u64,
    pub seed: u64,
}

pub const CSV_HEADER: &str = "experiment,n,sample,statistic,z,imag,ell,ell_hat,rho,hs,raw,normalized,predicted,wall_time_ms,seed";

impl ResultRow {
    pub fn new(experiment: &str, n: usize, sample: impl Into<String>, statistic: &str, raw: f64, predicted: Option<f64>, seed: u64) -> Self {
        let normalized = predicted.filter(|p| *p > 0.0).map(|p| raw / p);
        Self {
            experiment: experiment.into(),
            n,
            sample: sample.into(),
            statistic: statistic.into(),
            z: String::new(),
            imag: String::new(),
            ell: None,
            ell_hat: None,
            rho: String::new(),
            hs: String::new(),
            raw,
            normalized,
            predicted,
            wall_time_ms: 0,
            seed,
        }
    }
}

/// A pass/fail assertion `lower <= value <= upper`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Check {
    pub name: String,
    pub value: f64,
    pub lower: Option<f64>,
    pub upper: Option<f64>,
    pub pass: bool,
}

impl Check {
    pub fn new(name: impl Into<String>, value: f64, lower: Option<f64>, upper: Option<f64>) -> Self {
        let pass = value.is_finite() && lower.is_none_or(|l| value >= l) && upper.is_none_or(|u| value <= u);
        Self {
            name: name.into(),
            value,
            lower,
            upper,
            pass,
        }
    }

    pub fn at_most(name: impl Into<String>, value: f64, upper: f64) -> Self {
        Self::new(name, value, None, Some(upper))
    }

    pub fn within(name: impl Into<String>, value: f64, lower: f64, upper: f64) -> Self {
        Self::new(name, value, Some(lower), Some(upper))
    }
}

impl std::fmt::Display for Check {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let bound = |b: Option<f64>| b.map_or("-".to_string(), |v| v.to_string());
        write!(
            f,
            "{} {} value={} lower={} upper={}",
            if self.pass { "PASS" } else { "FAIL" },
            self.name,
            self.value,
            bound(self.lower),
            bound(self.upper)
        )
    }
}

/// Everything an experiment produces.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub rows: Vec<ResultRow>,
    pub checks: Vec<Check>,
    /// The effective configuration and experiment-specific extras.
    pub metadata: BTreeMap<String, serde_json::Value>,
}

impl Report {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.pass)
    }

    pub fn write(&self, format: OutputFormat, out: &mut impl Write) -> std::io::Result<()> {
        match format {
            OutputFormat::Csv => self.write_csv(out),
            OutputFormat::Jsonl => self.write_jsonl(out),
        }
    }

    /// `#`-prefixed metadata and check lines, then the header and the rows.
    pub fn write_csv(&self, out: &mut impl Write) -> std::io::Result<()> {
        for (k, v) in &self.metadata {
            writeln!(out, "# {k}: {v}")?;
        }
        for c in &self.checks {
            writeln!(out, "# check: {c}")?;
        }
        let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(Vec::new());
        writeln!(out, "{CSV_HEADER}")?;
        for r in &self.rows {
            w.serialize(r).map_err(std::io::Error::other)?;
        }
        let bytes = w.into_inner().map_err(|e| std::io::Error::other(e.to_string()))?;
        out.write_all(&bytes)
    }

    /// A first line `{"metadata": .., "checks": ..}`, then one row per line.
    pub fn write_jsonl(&self, out: &mut impl Write) -> std::io::Result<()> {
        let head = serde_json::json!({ "metadata": self.metadata, "checks": self.checks });
        writeln!(out, "{head}")?;
        for r in &self.rows {
            writeln!(out, "{}", serde_json::to_string(r).map_err(std::io::Error::other)?)?;
        }
        Ok(())
    }
}
