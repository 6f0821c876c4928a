//! Method comparisons and alpha sweeps over a record batch.

use std::fmt::Write as _;
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::decode::{self, DecodeConfig, DecodeError, Method};
use crate::diagnostics::{self, DiagnosticError, DiagnosticSummary};
use crate::metrics::{self, pct, MetricError, MetricReport};
use crate::par::{self, Execution};
use crate::record::{self, EvalRecord};

pub const DEFAULT_ALPHAS: [f64; 5] = [0.1, 0.3, 0.5, 0.7, 0.9];

#[derive(Debug, Error)]
pub enum RunError {
    #[error("empty batch")]
    EmptyBatch,
    #[error("invalid sweep: {0}")]
    InvalidSpec(String),
    #[error(transparent)]
    Decode(#[from] DecodeError),
    #[error(transparent)]
    Diagnostic(#[from] DiagnosticError),
    #[error(transparent)]
    Metric(#[from] MetricError),
    #[error("cannot hash input: {0}")]
    Digest(#[from] std::io::Error),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepSpec {
    pub alphas: Vec<f64>,
    pub methods: Vec<Method>,
}

impl Default for SweepSpec {
    fn default() -> Self {
        SweepSpec { alphas: DEFAULT_ALPHAS.to_vec(), methods: vec![Method::Scicon] }
    }
}

impl SweepSpec {
    pub fn new(alphas: Vec<f64>, methods: Vec<Method>) -> Result<Self, RunError> {
        let spec = SweepSpec { alphas, methods };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<(), RunError> {
        if self.alphas.is_empty() {
            return Err(RunError::InvalidSpec("no alphas".into()));
        }
        if self.methods.is_empty() {
            return Err(RunError::InvalidSpec("no methods".into()));
        }
        if let Some(a) = self.alphas.iter().find(|a| !a.is_finite() || **a < 0.0) {
            return Err(RunError::InvalidSpec(format!("alpha {a} is not finite and non-negative")));
        }
        if self.alphas.windows(2).any(|w| w[1] <= w[0]) {
            return Err(RunError::InvalidSpec("alphas must be strictly increasing".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "status", rename_all = "snake_case")]
#[allow(clippy::large_enum_variant)]
pub enum CellOutcome {
    Evaluated {
        metrics: MetricReport,
        /// Diagnostic groups relative to greedy multimodal decoding.
        groups: DiagnosticSummary,
    },
    Skipped {
        reason: String,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Cell {
    pub method: Method,
    pub alpha: f64,
    #[serde(flatten)]
    pub outcome: CellOutcome,
}

impl Cell {
    pub fn metrics(&self) -> Option<&MetricReport> {
        match &self.outcome {
            CellOutcome::Evaluated { metrics, .. } => Some(metrics),
            CellOutcome::Skipped { .. } => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    /// SHA-256 of the record file (hex).
    pub input_digest: String,
    pub config: serde_json::Value,
    pub generated_at_unix: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub provenance: Provenance,
    pub cells: Vec<Cell>,
}

impl RunReport {
    pub fn cell(&self, method: Method, alpha: f64) -> Option<&Cell> {
        self.cells.iter().find(|c| c.method == method && c.alpha == alpha)
    }

    /// Replaces the digest, e.g. with the hash of the on-disk file.
    pub fn with_input_digest(mut self, digest: String) -> Self {
        self.provenance.input_digest = digest;
        self
    }

    pub fn to_table(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(
            out,
            "{:<10} {:>6} {:>6} {:>8} {:>8} {:>10} {:>7}",
            "method", "alpha", "n", "ACC", "F1", "corrected", "harmed"
        );
        for c in &self.cells {
            let alpha = if c.method.uses_alpha() { format!("{:.2}", c.alpha) } else { "-".into() };
            match &c.outcome {
                CellOutcome::Evaluated { metrics, groups } => {
                    let count = |g: &Option<diagnostics::GroupStats>| g.as_ref().map_or(0, |s| s.n);
                    let _ = writeln!(
                        out,
                        "{:<10} {:>6} {:>6} {:>8} {:>8} {:>10} {:>7}",
                        c.method.as_str(),
                        alpha,
                        metrics.n,
                        pct(metrics.accuracy),
                        pct(metrics.macro_f1),
                        count(&groups.corrected),
                        count(&groups.harmed),
                    );
                }
                CellOutcome::Skipped { reason } => {
                    let _ = writeln!(out, "{:<10} {:>6}  skipped: {reason}", c.method.as_str(), alpha);
                }
            }
        }
        out
    }
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().fold(String::with_capacity(64), |mut s, b| {
        let _ = write!(s, "{b:02x}");
        s
    })
}

fn unix_now() -> u64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0)
}

/// Why `method` cannot run on this batch, if it cannot.
fn skip_reason(records: &[EvalRecord], method: Method) -> Option<String> {
    for &b in method.required_branches() {
        let missing = records.iter().filter(|r| r.branch(b).is_none()).count();
        if missing == records.len() {
            return Some(format!("missing branch {b}"));
        }
        if missing > 0 {
            return Some(format!("missing branch {b} on {missing} of {} records", records.len()));
        }
    }
    None
}

struct Baseline {
    preds: Vec<String>,
}

fn baseline(exec: Execution, records: &[EvalRecord]) -> Result<Baseline, RunError> {
    let cfg = DecodeConfig::with_default_alpha(Method::GreedyMm);
    let preds = decode::decode_batch_with(exec, records, &cfg)?.into_iter().map(|d| d.predicted).collect();
    Ok(Baseline { preds })
}

fn evaluate_cell(
    exec: Execution,
    records: &[EvalRecord],
    base: &Baseline,
    config: &DecodeConfig,
) -> Result<Cell, RunError> {
    if let Some(reason) = skip_reason(records, config.method) {
        return Ok(Cell { method: config.method, alpha: config.alpha, outcome: CellOutcome::Skipped { reason } });
    }
    let preds: Vec<String> = decode::decode_batch_with(exec, records, config)?
        .into_iter()
        .map(|d| d.predicted)
        .collect();
    let metrics = metrics::evaluate(records, &preds)?;
    let rows = diagnostics::diagnose_batch_with(exec, records, config.alpha)?;
    let groups = diagnostics::summarize(records, &rows, &base.preds, config.method, config.alpha, &preds)?;
    Ok(Cell { method: config.method, alpha: config.alpha, outcome: CellOutcome::Evaluated { metrics, groups } })
}

fn run_cells(
    exec: Execution,
    records: &[EvalRecord],
    configs: &[DecodeConfig],
    config_echo: serde_json::Value,
) -> Result<RunReport, RunError> {
    if records.is_empty() {
        return Err(RunError::EmptyBatch);
    }
    let base = baseline(exec, records)?;
    let cells = par::map(exec, configs, |c| evaluate_cell(exec, records, &base, c))
        .into_iter()
        .collect::<Result<Vec<_>, _>>()?;
    let digest = sha256_hex(&record::records_to_bytes(records)?);
    Ok(RunReport {
        provenance: Provenance { input_digest: digest, config: config_echo, generated_at_unix: unix_now() },
        cells,
    })
}

/// One cell per decode config, in the order given.
pub fn run_comparison(records: &[EvalRecord], configs: &[DecodeConfig]) -> Result<RunReport, RunError> {
    run_comparison_with(Execution::default(), records, configs)
}

pub fn run_comparison_with(
    exec: Execution,
    records: &[EvalRecord],
    configs: &[DecodeConfig],
) -> Result<RunReport, RunError> {
    let echo = serde_json::json!({ "kind": "comparison", "configs": configs });
    run_cells(exec, records, configs, echo)
}

/// One cell per (method, alpha), methods outermost.
pub fn run_sweep(records: &[EvalRecord], spec: &SweepSpec) -> Result<RunReport, RunError> {
    run_sweep_with(Execution::default(), records, spec)
}

pub fn run_sweep_with(exec: Execution, records: &[EvalRecord], spec: &SweepSpec) -> Result<RunReport, RunError> {
    spec.validate()?;
    let configs: Vec<DecodeConfig> = spec
        .methods
        .iter()
        .flat_map(|&m| spec.alphas.iter().map(move |&a| DecodeConfig { method: m, alpha: a }))
        .collect();
    let echo = serde_json::json!({ "kind": "sweep", "alphas": spec.alphas, "methods": spec.methods });
    run_cells(exec, records, &configs, echo)
}
