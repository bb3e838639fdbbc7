//! The `vimq` command line.

use std::ffi::OsString;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, Parser, Subcommand, ValueEnum};
use vimq_core::kscaled::DEFAULT_K;
use vimq_core::model::{
    build_synthetic, calibrate_from_taps, synthetic_inputs, CalibrationOptions, OutlierProfile, Policy, QuantConfig,
    SiteParams, VimDims, DEFAULT_BITS, DEFAULT_CALIBRATION_SAMPLES, WEIGHT_SITES,
};
use vimq_core::quantizer::{quantize_at, SimilarityMetric};
use vimq_core::reparam::{DispFn, RepFn};
use vimq_core::ssm::Discretization;

use crate::error::{Error, Result, EXIT_OK, EXIT_USAGE};
use crate::experiments::{
    calibration_taps, evaluate, run_with_diagnostics, sweep, EvalSet, DEFAULT_CALIBRATION_SEED, DEFAULT_EVAL_INPUTS,
    DEFAULT_EVAL_SEED,
};
use crate::files::{
    create_dir, dtype_name, json_bytes, load_model, read_config, read_qten, save_model, sha256_hex,
    write_bytes, write_config, write_qten, QTEN_EXT,
};
use crate::report::*;

#[derive(Debug, Parser)]
#[command(name = "vimq", version, about = "Post-training quantization of synthetic selective-scan vision blocks")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a seeded synthetic model directory.
    Gen(GenArgs),
    /// Write one seeded synthetic input sequence for a model.
    Input(InputArgs),
    /// Calibrate a quantization config on seeded synthetic samples.
    Calibrate(CalibrateArgs),
    /// Export the integer weights a config produces.
    Quantize(QuantizeArgs),
    /// Run one input in full precision or quantized and report errors.
    Run(RunArgs),
    /// Compare two configs against full precision.
    Compare(CompareArgs),
    /// Evaluate a grid of reparameterization Rep and Disp functions.
    Sweep(SweepArgs),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum DiscretizationArg {
    Simplified,
    ZeroOrderHold,
}

impl From<DiscretizationArg> for Discretization {
    fn from(d: DiscretizationArg) -> Self {
        match d {
            DiscretizationArg::Simplified => Discretization::Simplified,
            DiscretizationArg::ZeroOrderHold => Discretization::ZeroOrderHold,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum MetricArg {
    Cosine,
    NegL1,
    NegL2,
}

impl From<MetricArg> for SimilarityMetric {
    fn from(m: MetricArg) -> Self {
        match m {
            MetricArg::Cosine => SimilarityMetric::Cosine,
            MetricArg::NegL1 => SimilarityMetric::NegL1,
            MetricArg::NegL2 => SimilarityMetric::NegL2,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum FormatArg {
    Csv,
    Json,
}

fn parse_profile(s: &str) -> Result<OutlierProfile, String> {
    s.parse().map_err(|e: vimq_core::model::ModelError| e.to_string())
}

fn parse_policy(s: &str) -> Result<Policy, String> {
    s.parse().map_err(|e: vimq_core::model::ModelError| e.to_string())
}

fn parse_rep(s: &str) -> Result<RepFn, String> {
    s.parse().map_err(|e: vimq_core::reparam::ReparamError| e.to_string())
}

fn parse_disp(s: &str) -> Result<DispFn, String> {
    s.parse().map_err(|e: vimq_core::reparam::ReparamError| e.to_string())
}

#[derive(Debug, Args)]
pub struct GenArgs {
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 8)]
    pub channels: usize,
    #[arg(long, default_value_t = 64)]
    pub tokens: usize,
    #[arg(long, default_value_t = 8)]
    pub state: usize,
    /// none, middle-tokens or heavy-channels.
    #[arg(long, default_value = "middle-tokens", value_parser = parse_profile)]
    pub profile: OutlierProfile,
    #[arg(long, value_enum, default_value_t = DiscretizationArg::Simplified)]
    pub discretization: DiscretizationArg,
    /// Output model directory.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct InputArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Output QTEN file.
    #[arg(long)]
    pub out: PathBuf,
}

/// Quantizer settings shared by calibrate and sweep.
#[derive(Debug, Args)]
pub struct QuantArgs {
    /// Number of k-scaled clusters.
    #[arg(long, default_value_t = DEFAULT_K)]
    pub k: usize,
    #[arg(long, default_value_t = DEFAULT_BITS)]
    pub weight_bits: u8,
    #[arg(long, default_value_t = DEFAULT_BITS)]
    pub act_bits: u8,
    /// Similarity metric of the scale search.
    #[arg(long, value_enum, default_value_t = MetricArg::Cosine)]
    pub metric: MetricArg,
    /// Number of synthetic calibration samples.
    #[arg(long, default_value_t = DEFAULT_CALIBRATION_SAMPLES)]
    pub samples: usize,
}

impl QuantArgs {
    fn options(&self, policy: Policy, rep: RepFn, disp: DispFn) -> CalibrationOptions {
        CalibrationOptions {
            policy,
            weight_bits: self.weight_bits,
            act_bits: self.act_bits,
            k: self.k,
            metric: self.metric.into(),
            rep,
            disp,
            seed: 0,
        }
    }
}

#[derive(Debug, Args)]
pub struct CalibrateArgs {
    #[arg(long)]
    pub model: PathBuf,
    /// pass-through, baseline, similarity, kscaled, ours or ours-noreparam.
    #[arg(long, default_value = "ours", value_parser = parse_policy)]
    pub policy: Policy,
    /// Seed of the synthetic calibration set.
    #[arg(long, default_value_t = DEFAULT_CALIBRATION_SEED)]
    pub seed: u64,
    /// Rep function of the reparameterization factors.
    #[arg(long, default_value = "mean", value_parser = parse_rep)]
    pub rep: RepFn,
    /// Disp function of the reparameterization factors.
    #[arg(long, default_value = "std", value_parser = parse_disp)]
    pub disp: DispFn,
    #[command(flatten)]
    pub quant: QuantArgs,
    /// Output config JSON.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct QuantizeArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub config: PathBuf,
    /// Output directory for the integer weights and `quantized.json`.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct RunArgs {
    #[arg(long)]
    pub model: PathBuf,
    /// Quantization config; full precision without one.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// `[C, L]` f32 QTEN input.
    #[arg(long)]
    pub input: PathBuf,
    /// Output QTEN file.
    #[arg(long)]
    pub output: PathBuf,
    /// Add wall-clock time to the report.
    #[arg(long)]
    pub timing: bool,
}

#[derive(Debug, Args)]
pub struct CompareArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub a: PathBuf,
    #[arg(long)]
    pub b: PathBuf,
    /// Number of synthetic evaluation inputs.
    #[arg(long, default_value_t = DEFAULT_EVAL_INPUTS)]
    pub inputs: usize,
    /// Seed of the evaluation inputs.
    #[arg(long, default_value_t = DEFAULT_EVAL_SEED)]
    pub seed: u64,
    #[arg(long, value_enum, default_value_t = FormatArg::Csv)]
    pub format: FormatArg,
    /// Write the table here instead of stdout.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct SweepArgs {
    #[arg(long)]
    pub model: PathBuf,
    /// Comma-separated Rep functions: max, mean, median, percentile[:p], quantile[:q].
    #[arg(long, value_delimiter = ',', default_value = "max,mean,median,percentile,quantile", value_parser = parse_rep)]
    pub reps: Vec<RepFn>,
    /// Comma-separated Disp functions: same, std, var, range.
    #[arg(long, value_delimiter = ',', default_value = "same,std,var,range", value_parser = parse_disp)]
    pub disps: Vec<DispFn>,
    /// Seed of the synthetic calibration set.
    #[arg(long, default_value_t = DEFAULT_CALIBRATION_SEED)]
    pub calibration_seed: u64,
    #[arg(long, default_value_t = DEFAULT_EVAL_INPUTS)]
    pub inputs: usize,
    /// Seed of the evaluation inputs.
    #[arg(long, default_value_t = DEFAULT_EVAL_SEED)]
    pub seed: u64,
    #[command(flatten)]
    pub quant: QuantArgs,
    /// Output grid CSV.
    #[arg(long)]
    pub out: PathBuf,
}

fn note() -> String {
    SYNTHETIC_NOTE.to_string()
}

fn cmd_gen(a: &GenArgs) -> Result<Vec<u8>> {
    let dims = VimDims::new(a.channels, a.tokens, a.state)?;
    let mut m = build_synthetic(a.seed, dims, a.profile)?;
    m.discretization = a.discretization.into();
    let digest = save_model(&a.out, &m)?;
    Ok(json_bytes(&GenReport {
        schema: GEN_SCHEMA.to_string(),
        note: note(),
        seed: a.seed,
        manifest_sha256: digest,
    }))
}

fn cmd_input(a: &InputArgs) -> Result<Vec<u8>> {
    let m = load_model(&a.model)?.model;
    let x = synthetic_inputs(m.dims, 1, a.seed).remove(0);
    let sha256 = write_qten(&a.out, &x)?;
    Ok(json_bytes(&InputReport {
        schema: INPUT_SCHEMA.to_string(),
        note: note(),
        seed: a.seed,
        dims: x.dims().to_vec(),
        sha256,
    }))
}

fn cmd_calibrate(a: &CalibrateArgs) -> Result<Vec<u8>> {
    let loaded = load_model(&a.model)?;
    let m = &loaded.model;
    let taps = calibration_taps(m, a.quant.samples, a.seed)?;
    let qc = calibrate_from_taps(m, &taps, &a.quant.options(a.policy, a.rep, a.disp))?;
    let digest = write_config(&a.out, &qc)?;
    Ok(json_bytes(&CalibrateReport {
        schema: CALIBRATE_SCHEMA.to_string(),
        note: note(),
        model_manifest_sha256: loaded.manifest_sha256,
        policy: a.policy,
        samples: a.quant.samples,
        seed: a.seed,
        config_sha256: digest,
    }))
}

fn cmd_quantize(a: &QuantizeArgs) -> Result<Vec<u8>> {
    let loaded = load_model(&a.model)?;
    let m = &loaded.model;
    let (qc, config_sha256) = read_config(&a.config)?;
    qc.check(m)?;
    create_dir(&a.out)?;
    let mut tensors = Vec::new();
    for site in WEIGHT_SITES {
        let w = qc.to_config_coords(site, m.weight(site).expect("weight sites resolve"))?;
        let (t, scale, bits) = match &qc.weights[site] {
            SiteParams::MinMax { scale, bits } | SiteParams::Similarity { scale, bits, .. } => (
                quantize_at(&w, *scale, *bits)?,
                Some(*scale),
                Some(*bits),
            ),
            _ => (w, None, None),
        };
        let file = format!("{site}.{QTEN_EXT}");
        let sha256 = write_qten(&a.out.join(&file), &t)?;
        tensors.push(QuantizedTensor {
            name: site.to_string(),
            file,
            dtype: dtype_name(t.dtype()).to_string(),
            dims: t.dims().to_vec(),
            scale,
            bits,
            sha256,
        });
    }
    let n = tensors.len();
    let manifest = json_bytes(&QuantizedManifest {
        schema: QUANTIZED_MANIFEST_SCHEMA.to_string(),
        model_manifest_sha256: loaded.manifest_sha256,
        config_sha256: config_sha256.clone(),
        policy: qc.policy,
        tensors,
    });
    write_bytes(&a.out.join("quantized.json"), &manifest)?;
    Ok(json_bytes(&QuantizeReport {
        schema: QUANTIZE_SCHEMA.to_string(),
        note: note(),
        config_sha256,
        quantized_manifest_sha256: sha256_hex(&manifest),
        tensors: n,
    }))
}

fn cmd_run(a: &RunArgs) -> Result<Vec<u8>> {
    let start = Instant::now();
    let loaded = load_model(&a.model)?;
    let m = &loaded.model;
    let config = a.config.as_deref().map(read_config).transpose()?;
    let x = read_qten(&a.input)?;
    let outcome = run_with_diagnostics(m, config.as_ref().map(|(qc, _)| qc), &x)?;
    let output_sha256 = write_qten(&a.output, &outcome.output)?;
    let report = RunReport {
        schema: RUN_SCHEMA.to_string(),
        note: note(),
        mode: if config.is_some() {
            RunMode::Quantized
        } else {
            RunMode::FullPrecision
        },
        model_seed: m.seed,
        model_manifest_sha256: loaded.manifest_sha256.clone(),
        policy: config.as_ref().map(|(qc, _)| qc.policy),
        config_sha256: config.map(|(_, d)| d),
        input_sha256: sha256_hex(&x.to_qten_bytes()),
        output_sha256,
        output: outcome.output_metrics,
        sites: outcome.sites,
        hidden_state: outcome.hidden_state,
        wall_clock_ms: a.timing.then(|| start.elapsed().as_secs_f64() * 1e3),
    };
    Ok(json_bytes(&report))
}

fn emit(out: Option<&Path>, bytes: Vec<u8>) -> Result<Vec<u8>> {
    match out {
        Some(p) => {
            write_bytes(p, &bytes)?;
            Ok(Vec::new())
        }
        None => Ok(bytes),
    }
}

fn cmd_compare(a: &CompareArgs) -> Result<Vec<u8>> {
    let loaded = load_model(&a.model)?;
    let m = &loaded.model;
    let (qa, da) = read_config(&a.a)?;
    let (qb, db) = read_config(&a.b)?;
    qa.check(m)?;
    qb.check(m)?;
    let eval = EvalSet::synthetic(m, a.inputs, a.seed)?;
    let fp = evaluate(m, &QuantConfig::pass_through(), &eval)?;
    let report = CompareReport {
        schema: COMPARE_SCHEMA.to_string(),
        note: note(),
        model_manifest_sha256: loaded.manifest_sha256,
        n_inputs: a.inputs,
        seed: a.seed,
        rows: vec![
            CompareRow::new("fp", "fp", None, &fp),
            CompareRow::new("a", qa.policy.as_str(), Some(da), &evaluate(m, &qa, &eval)?),
            CompareRow::new("b", qb.policy.as_str(), Some(db), &evaluate(m, &qb, &eval)?),
        ],
    };
    let bytes = match a.format {
        FormatArg::Csv => report.to_csv()?,
        FormatArg::Json => json_bytes(&report),
    };
    emit(a.out.as_deref(), bytes)
}

fn cmd_sweep(a: &SweepArgs) -> Result<Vec<u8>> {
    let loaded = load_model(&a.model)?;
    let m = &loaded.model;
    let taps = calibration_taps(m, a.quant.samples, a.calibration_seed)?;
    let eval = EvalSet::synthetic(m, a.inputs, a.seed)?;
    let base = a.quant.options(Policy::Ours, RepFn::default(), DispFn::default());
    let s = sweep(m, &taps, &a.reps, &a.disps, &base, &eval)?;
    let grid = sweep_csv(&s)?;
    write_bytes(&a.out, &grid)?;
    let best = s.best().map(|c| SweepCellRef {
        rep: c.rep.clone(),
        disp: c.disp.clone(),
        cosine: c.metrics.cosine,
    });
    let mean_std_vs_max_var = match (s.cell(RepFn::Mean, DispFn::Std), s.cell(RepFn::Max, DispFn::Var)) {
        (Some(x), Some(y)) => Some([x.metrics.cosine, y.metrics.cosine]),
        _ => None,
    };
    Ok(json_bytes(&SweepReport {
        schema: SWEEP_SCHEMA.to_string(),
        note: note(),
        model_manifest_sha256: loaded.manifest_sha256,
        samples: a.quant.samples,
        calibration_seed: a.calibration_seed,
        n_inputs: a.inputs,
        seed: a.seed,
        cells: s.cells.len(),
        grid_sha256: sha256_hex(&grid),
        best_beats_no_reparam: best.as_ref().is_some_and(|b| b.cosine > s.no_reparam.cosine),
        best,
        no_reparam_cosine: s.no_reparam.cosine,
        mean_std_vs_max_var,
    }))
}

/// Runs a parsed command and returns what it prints on stdout.
pub fn execute(cli: &Cli) -> Result<Vec<u8>> {
    match &cli.command {
        Command::Gen(a) => cmd_gen(a),
        Command::Input(a) => cmd_input(a),
        Command::Calibrate(a) => cmd_calibrate(a),
        Command::Quantize(a) => cmd_quantize(a),
        Command::Run(a) => cmd_run(a),
        Command::Compare(a) => cmd_compare(a),
        Command::Sweep(a) => cmd_sweep(a),
    }
}

/// Parses `args`, runs the command, prints its output and returns the exit
/// code.
pub fn main<I, T>(args: I) -> u8
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
            let _ = e.print();
            return code;
        }
    };
    match execute(&cli) {
        Ok(bytes) => {
            let mut out = std::io::stdout().lock();
            match out.write_all(&bytes).and_then(|_| out.flush()) {
                Ok(()) => EXIT_OK,
                Err(e) => report_error(&Error::io("<stdout>", e)),
            }
        }
        Err(e) => report_error(&e),
    }
}

fn report_error(e: &Error) -> u8 {
    eprintln!("error: {e}");
    e.exit_code()
}
