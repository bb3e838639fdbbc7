//! Versioned stdout and file report schemas.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use vimq_core::metrics::ErrorMetrics;
use vimq_core::model::Policy;

use crate::error::Result;
use crate::experiments::{HiddenStateReport, Sweep};

/// Header carried by every report.
pub const SYNTHETIC_NOTE: &str =
    "inputs are seeded synthetic unit-variance token sequences; no image data is used, scores are desk-scale analogues";

pub const GEN_SCHEMA: &str = "vimq.gen/1";
pub const INPUT_SCHEMA: &str = "vimq.input/1";
pub const CALIBRATE_SCHEMA: &str = "vimq.calibrate/1";
pub const QUANTIZE_SCHEMA: &str = "vimq.quantize/1";
pub const QUANTIZED_MANIFEST_SCHEMA: &str = "vimq.quantized/1";
pub const RUN_SCHEMA: &str = "vimq.run/1";
pub const COMPARE_SCHEMA: &str = "vimq.compare/1";
pub const SWEEP_SCHEMA: &str = "vimq.sweep/1";

/// Columns of the compare CSV.
pub const COMPARE_COLUMNS: [&str; 8] = [
    "row",
    "policy",
    "config_sha256",
    "n_inputs",
    "seed",
    "cosine",
    "mse",
    "max_abs_err",
];

/// Columns of the sweep grid CSV.
pub const SWEEP_COLUMNS: [&str; 5] = ["rep", "disp", "cosine", "mse", "max_abs_err"];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GenReport {
    pub schema: String,
    pub note: String,
    pub seed: u64,
    pub manifest_sha256: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InputReport {
    pub schema: String,
    pub note: String,
    pub seed: u64,
    pub dims: Vec<usize>,
    pub sha256: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CalibrateReport {
    pub schema: String,
    pub note: String,
    pub model_manifest_sha256: String,
    pub policy: Policy,
    pub samples: usize,
    pub seed: u64,
    pub config_sha256: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QuantizedTensor {
    pub name: String,
    pub file: String,
    pub dtype: String,
    pub dims: Vec<usize>,
    /// Dequantization scale; absent for tensors kept in f32.
    pub scale: Option<f32>,
    pub bits: Option<u8>,
    pub sha256: String,
}

/// `quantized.json` written next to the integer weight files.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QuantizedManifest {
    pub schema: String,
    pub model_manifest_sha256: String,
    pub config_sha256: String,
    pub policy: Policy,
    pub tensors: Vec<QuantizedTensor>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QuantizeReport {
    pub schema: String,
    pub note: String,
    pub config_sha256: String,
    pub quantized_manifest_sha256: String,
    pub tensors: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RunMode {
    FullPrecision,
    Quantized,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub schema: String,
    pub note: String,
    pub mode: RunMode,
    pub model_seed: u64,
    pub model_manifest_sha256: String,
    pub config_sha256: Option<String>,
    pub policy: Option<Policy>,
    pub input_sha256: String,
    pub output_sha256: String,
    /// Output against the full-precision output.
    pub output: ErrorMetrics,
    /// Each activation site against its full-precision value.
    pub sites: BTreeMap<String, ErrorMetrics>,
    pub hidden_state: BTreeMap<String, HiddenStateReport>,
    /// Present only with `--timing`, which makes the report non-reproducible.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub wall_clock_ms: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CompareRow {
    /// `fp`, `a` or `b`.
    pub row: String,
    pub policy: String,
    pub config_sha256: Option<String>,
    pub cosine: f64,
    pub mse: f64,
    pub max_abs_err: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CompareReport {
    pub schema: String,
    pub note: String,
    pub model_manifest_sha256: String,
    pub n_inputs: usize,
    pub seed: u64,
    pub rows: Vec<CompareRow>,
}

impl CompareRow {
    pub fn new(row: &str, policy: &str, config_sha256: Option<String>, m: &ErrorMetrics) -> Self {
        Self {
            row: row.to_string(),
            policy: policy.to_string(),
            config_sha256,
            cosine: m.cosine,
            mse: m.mse,
            max_abs_err: m.max_abs_err,
        }
    }
}

fn csv_bytes(schema: &str, header: &[&str], rows: Vec<Vec<String>>) -> Result<Vec<u8>> {
    let mut out = format!("# {schema}: {SYNTHETIC_NOTE}\n").into_bytes();
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(header)?;
    for r in rows {
        w.write_record(&r)?;
    }
    out.extend(w.into_inner().map_err(|e| csv::Error::from(e.into_error()))?);
    Ok(out)
}

impl CompareReport {
    /// One `#` header line, the column names, then rows `fp`, `a`, `b`.
    pub fn to_csv(&self) -> Result<Vec<u8>> {
        let rows = self
            .rows
            .iter()
            .map(|r| {
                vec![
                    r.row.clone(),
                    r.policy.clone(),
                    r.config_sha256.clone().unwrap_or_default(),
                    self.n_inputs.to_string(),
                    self.seed.to_string(),
                    r.cosine.to_string(),
                    r.mse.to_string(),
                    r.max_abs_err.to_string(),
                ]
            })
            .collect();
        csv_bytes(COMPARE_SCHEMA, &COMPARE_COLUMNS, rows)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepCellRef {
    pub rep: String,
    pub disp: String,
    pub cosine: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepReport {
    pub schema: String,
    pub note: String,
    pub model_manifest_sha256: String,
    pub samples: usize,
    pub calibration_seed: u64,
    pub n_inputs: usize,
    pub seed: u64,
    pub cells: usize,
    pub grid_sha256: String,
    pub best: Option<SweepCellRef>,
    pub no_reparam_cosine: f64,
    pub best_beats_no_reparam: bool,
    /// `(mean, std)` against `(max, var)`, when both cells were swept.
    pub mean_std_vs_max_var: Option<[f64; 2]>,
}

/// Grid CSV of a sweep, one row per cell.
pub fn sweep_csv(s: &Sweep) -> Result<Vec<u8>> {
    let rows = s
        .cells
        .iter()
        .map(|c| {
            vec![
                c.rep.clone(),
                c.disp.clone(),
                c.metrics.cosine.to_string(),
                c.metrics.mse.to_string(),
                c.metrics.max_abs_err.to_string(),
            ]
        })
        .collect();
    csv_bytes(SWEEP_SCHEMA, &SWEEP_COLUMNS, rows)
}
