//! Kappa report: per-run rows plus per (method, fraction) aggregates.

use std::io::Write;

use serde::{Deserialize, Serialize};
use siamts::analysis::mean_std;
use siamts::training::Method;

use crate::config::RunConfig;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub method: Method,
    pub fraction: f64,
    pub run: usize,
    pub seed: u64,
    pub kappa: Option<f64>,
    pub accuracy: Option<f64>,
    pub collapse: Option<f64>,
    pub stopped_epoch: Option<usize>,
    /// Set when the run failed; the row is then left out of the aggregates.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub method: Method,
    pub fraction: f64,
    pub mean_kappa: Option<f64>,
    pub std: Option<f64>,
    /// Runs with a defined kappa.
    pub n: usize,
    pub failed: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct KappaReport {
    pub config: RunConfig,
    pub rows: Vec<ReportRow>,
    pub aggregates: Vec<Aggregate>,
}

impl KappaReport {
    pub fn new(config: RunConfig, rows: Vec<ReportRow>) -> Self {
        let aggregates = aggregate(&config.methods, &config.fractions, &rows);
        KappaReport {
            config,
            rows,
            aggregates,
        }
    }

    pub fn aggregate(&self, method: Method, fraction: f64) -> Option<&Aggregate> {
        self.aggregates
            .iter()
            .find(|a| a.method == method && a.fraction == fraction)
    }

    /// `fraction,method,mean_kappa,std`, one line per aggregate; undefined
    /// values are left empty.
    pub fn write_curve<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        writeln!(w, "fraction,method,mean_kappa,std")?;
        let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
        for a in &self.aggregates {
            writeln!(w, "{},{},{},{}", a.fraction, a.method.name(), opt(a.mean_kappa), opt(a.std))?;
        }
        Ok(())
    }
}

/// Mean and sample standard deviation of the defined kappas of every
/// (method, fraction) pair, fractions varying fastest.
pub fn aggregate(methods: &[Method], fractions: &[f64], rows: &[ReportRow]) -> Vec<Aggregate> {
    let mut out = Vec::new();
    for &method in methods {
        for &fraction in fractions {
            let cell: Vec<&ReportRow> = rows
                .iter()
                .filter(|r| r.method == method && r.fraction == fraction)
                .collect();
            let kappas: Vec<f64> = cell.iter().filter_map(|r| r.kappa).collect();
            let (mean, std) = mean_std(&kappas);
            let defined = !kappas.is_empty();
            out.push(Aggregate {
                method,
                fraction,
                mean_kappa: defined.then_some(mean),
                std: defined.then_some(std),
                n: kappas.len(),
                failed: cell.len() - kappas.len(),
            });
        }
    }
    out
}
