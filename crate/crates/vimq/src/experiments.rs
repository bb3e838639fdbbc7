//! Seeded experiments on a model: policy comparisons, the Rep×Disp sweep and
//! single-input runs with per-site diagnostics.

use std::collections::BTreeMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use vimq_core::metrics::{hidden_error_curve, trend_slope, ErrorMetrics};
use vimq_core::model::{
    calibrate_from_taps, collect_taps, recalibrate_factors, synthetic_inputs, CalibrationOptions, CalibrationSet,
    Direction, Policy, QuantConfig, Taps, VimBlock, ACTIVATION_SITES,
};
use vimq_core::reparam::{dynamic_range, smooth_hidden, DispFn, RepFn};
use vimq_core::Tensor;

use crate::error::{Error, Result};

/// Default seed of the synthetic calibration set.
pub const DEFAULT_CALIBRATION_SEED: u64 = 1000;
/// Default seed of the synthetic evaluation inputs.
pub const DEFAULT_EVAL_SEED: u64 = 5000;
pub const DEFAULT_EVAL_INPUTS: usize = 32;

fn check_finite(what: &str, m: &ErrorMetrics) -> Result<()> {
    if m.cosine.is_finite() && m.mse.is_finite() && m.max_abs_err.is_finite() {
        Ok(())
    } else {
        Err(Error::NonFinite(what.to_string()))
    }
}

/// Full-precision taps of `count` synthetic calibration samples.
pub fn calibration_taps(m: &VimBlock, count: usize, seed: u64) -> Result<Vec<Taps>> {
    let cs = CalibrationSet::synthetic(m.dims, count, seed)?;
    Ok(collect_taps(m, &cs)?)
}

/// Evaluation inputs with their full-precision outputs.
#[derive(Clone, Debug)]
pub struct EvalSet {
    pub seed: u64,
    pub inputs: Vec<Tensor>,
    pub fp: Vec<Tensor>,
}

impl EvalSet {
    pub fn synthetic(m: &VimBlock, count: usize, seed: u64) -> Result<Self> {
        let inputs = synthetic_inputs(m.dims, count, seed);
        let fp = inputs
            .par_iter()
            .map(|x| Ok(m.forward_fp(x)?.0))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { seed, inputs, fp })
    }

    pub fn len(&self) -> usize {
        self.inputs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.inputs.is_empty()
    }
}

/// Output metrics of `qc` against full precision, averaged over the set.
pub fn evaluate(m: &VimBlock, qc: &QuantConfig, eval: &EvalSet) -> Result<ErrorMetrics> {
    qc.check(m)?;
    let per = eval
        .inputs
        .par_iter()
        .zip(&eval.fp)
        .map(|(x, fp)| {
            let y = m.forward_quant(qc, x)?;
            Ok(ErrorMetrics::between(fp, &y)?)
        })
        .collect::<Result<Vec<_>>>()?;
    let mean = ErrorMetrics::mean(&per);
    check_finite("output metrics", &mean)?;
    Ok(mean)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PolicyScore {
    pub policy: Policy,
    pub metrics: ErrorMetrics,
}

/// Calibrates each policy on `taps` and evaluates it.
pub fn policy_scores(
    m: &VimBlock,
    taps: &[Taps],
    policies: &[Policy],
    base: &CalibrationOptions,
    eval: &EvalSet,
) -> Result<Vec<PolicyScore>> {
    policies
        .iter()
        .map(|&policy| {
            let qc = calibrate_from_taps(m, taps, &CalibrationOptions { policy, ..*base })?;
            Ok(PolicyScore {
                policy,
                metrics: evaluate(m, &qc, eval)?,
            })
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepCell {
    pub rep: String,
    pub disp: String,
    pub metrics: ErrorMetrics,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Sweep {
    /// Row-major over `reps` then `disps`.
    pub cells: Vec<SweepCell>,
    /// `ours` with a plain MinMax hidden state.
    pub no_reparam: ErrorMetrics,
}

impl Sweep {
    /// Highest-cosine cell; the first one wins ties.
    pub fn best(&self) -> Option<&SweepCell> {
        self.cells.iter().fold(None, |best: Option<&SweepCell>, c| match best {
            Some(b) if b.metrics.cosine >= c.metrics.cosine => Some(b),
            _ => Some(c),
        })
    }

    pub fn cell(&self, rep: RepFn, disp: DispFn) -> Option<&SweepCell> {
        let (r, d) = (rep.to_string(), disp.to_string());
        self.cells.iter().find(|c| c.rep == r && c.disp == d)
    }
}

/// Recalibrates the reparameterization factors for every `(rep, disp)` pair
/// and evaluates each resulting config. Cells run in parallel.
pub fn sweep(
    m: &VimBlock,
    taps: &[Taps],
    reps: &[RepFn],
    disps: &[DispFn],
    base: &CalibrationOptions,
    eval: &EvalSet,
) -> Result<Sweep> {
    let pairs: Vec<(RepFn, DispFn)> = reps
        .iter()
        .flat_map(|&r| disps.iter().map(move |&d| (r, d)))
        .collect();
    let cells = pairs
        .par_iter()
        .map(|&(rep, disp)| {
            let qc = recalibrate_factors(m, taps, rep, disp, base)?;
            let metrics = evaluate(m, &qc, eval)?;
            Ok(SweepCell {
                rep: rep.to_string(),
                disp: disp.to_string(),
                metrics,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let plain = calibrate_from_taps(
        m,
        taps,
        &CalibrationOptions {
            policy: Policy::OursNoReparam,
            ..*base
        },
    )?;
    Ok(Sweep {
        cells,
        no_reparam: evaluate(m, &plain, eval)?,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HiddenStateReport {
    /// `|h_t - ĥ_t|` per scan step, length `L`.
    pub error_curve: Vec<f64>,
    pub trend_slope: f64,
    /// Max/min ratio of `|h|` in full precision.
    pub dynamic_range: f32,
    /// The same ratio after smoothing, when the direction is reparameterized.
    pub dynamic_range_smoothed: Option<f32>,
}

/// Diagnostics of one forward pass against full precision.
#[derive(Clone, Debug, PartialEq)]
pub struct RunOutcome {
    pub output: Tensor,
    pub output_metrics: ErrorMetrics,
    pub sites: BTreeMap<String, ErrorMetrics>,
    /// Keyed by direction, `fwd` and `bwd`.
    pub hidden_state: BTreeMap<String, HiddenStateReport>,
}

/// Runs `x` in full precision and, with a config, quantized; compares every
/// activation site in the coordinates the config quantizes it in.
pub fn run_with_diagnostics(m: &VimBlock, qc: Option<&QuantConfig>, x: &Tensor) -> Result<RunOutcome> {
    let (fp_y, fp_taps) = m.forward_fp(x)?;
    let (y, taps) = match qc {
        Some(qc) => m.forward_quant_taps(qc, x)?,
        None => (fp_y.clone(), fp_taps.clone()),
    };
    let mut sites = BTreeMap::new();
    for site in ACTIVATION_SITES {
        let reference = match qc {
            Some(qc) => qc.to_config_coords(site, &fp_taps[site])?,
            None => fp_taps[site].clone(),
        };
        let metrics = ErrorMetrics::between(&reference, &taps[site])?;
        check_finite(site, &metrics)?;
        sites.insert(site.to_string(), metrics);
    }
    let mut hidden_state = BTreeMap::new();
    for dir in Direction::BOTH {
        let h_site = dir.sites().h;
        let fp_h = &fp_taps[h_site];
        let curve = hidden_error_curve(fp_h, &taps[h_site])?;
        if curve.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite(h_site.to_string()));
        }
        let smoothed = match qc.and_then(|qc| qc.factors(dir)) {
            Some(f) => Some(dynamic_range(&smooth_hidden(fp_h, f)?)?),
            None => None,
        };
        hidden_state.insert(
            dir.as_str().to_string(),
            HiddenStateReport {
                trend_slope: trend_slope(&curve),
                error_curve: curve,
                dynamic_range: dynamic_range(fp_h)?,
                dynamic_range_smoothed: smoothed,
            },
        );
    }
    let output_metrics = ErrorMetrics::between(&fp_y, &y)?;
    check_finite("output", &output_metrics)?;
    Ok(RunOutcome {
        output: y,
        output_metrics,
        sites,
        hidden_state,
    })
}
