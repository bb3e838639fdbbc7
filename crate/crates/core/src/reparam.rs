//! Rank-1 smoothing of the SSM hidden state.
//!
//! The scan is rewritten to carry `h* = h / (r_C ⊗ r_L ⊗ r_D)` instead of
//! `h`. With
//!
//! ```text
//! Ā*[:, t, :] = Ā[:, t, :] · r_L[t-1] / r_L[t]      (t > 0; unchanged at t = 0)
//! B̄*          = B̄ / (r_C ⊗ r_L ⊗ r_D)
//! C*          = C ⊙ (r_L ⊗ r_D)
//! ```
//!
//! the recurrence on `h*` is exact and `y = (C* × h*) ⊙ r_C`. Dividing by
//! `r_D` and multiplying by `r_D` can be folded into the rows of `W_B` and
//! `W_C`, leaving only `r_C` and `r_L` to apply at run time.

use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;
use core::fmt;
use core::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::metrics;
use crate::quantizer::{self, QuantError, QuantParams};
use crate::ssm::{self, Discretization, Projections, ScanTrace, SsmError, SsmParams};
use crate::tensor::{Shape, Tensor, TensorError};

/// Lower bound applied to every factor entry.
pub const FACTOR_EPS: f32 = 1e-6;
pub const DEFAULT_PERCENTILE: f32 = 99.0;
pub const DEFAULT_QUANTILE: f32 = 0.75;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ReparamError {
    #[error("hidden state is identically zero")]
    AllZeroHidden,
    #[error("no calibration traces")]
    EmptyTraces,
    #[error("factor {name} has length {actual}, expected {expected}")]
    FactorLength {
        name: &'static str,
        expected: usize,
        actual: usize,
    },
    #[error("factor {name} has non-positive entry {value}")]
    NonPositiveFactor { name: &'static str, value: f32 },
    #[error("hidden trace must be [C, L, D], got {0}")]
    BadTrace(Shape),
    #[error("unknown {kind} function {name:?}")]
    UnknownFunction { kind: &'static str, name: String },
    #[error(transparent)]
    Ssm(#[from] SsmError),
    #[error(transparent)]
    Quant(#[from] QuantError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

/// Representative of `|h|` along the two complementary axes.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RepFn {
    Max,
    #[default]
    Mean,
    Median,
    /// Percentile in `(0, 100]`.
    Percentile(f32),
    /// Quantile in `[0, 1]`.
    Quantile(f32),
}

impl RepFn {
    pub const ALL_DEFAULTS: [RepFn; 5] = [
        RepFn::Max,
        RepFn::Mean,
        RepFn::Median,
        RepFn::Percentile(DEFAULT_PERCENTILE),
        RepFn::Quantile(DEFAULT_QUANTILE),
    ];

    fn apply(self, values: &mut [f32]) -> f32 {
        match self {
            RepFn::Max => values.iter().copied().fold(0.0, f32::max),
            RepFn::Mean => {
                let s: f64 = values.iter().map(|&v| f64::from(v)).sum();
                (s / values.len() as f64) as f32
            }
            RepFn::Median => quantile(values, 0.5),
            RepFn::Percentile(p) => quantile(values, f64::from(p) / 100.0),
            RepFn::Quantile(q) => quantile(values, f64::from(q)),
        }
    }
}

impl fmt::Display for RepFn {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            RepFn::Max => f.write_str("max"),
            RepFn::Mean => f.write_str("mean"),
            RepFn::Median => f.write_str("median"),
            RepFn::Percentile(p) => write!(f, "percentile:{p}"),
            RepFn::Quantile(q) => write!(f, "quantile:{q}"),
        }
    }
}

impl FromStr for RepFn {
    type Err = ReparamError;

    /// `max`, `mean`, `median`, `percentile[:p]`, `quantile[:q]`.
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let unknown = || ReparamError::UnknownFunction {
            kind: "rep",
            name: String::from(s),
        };
        let (name, arg) = match s.split_once(':') {
            Some((n, a)) => (n, Some(a.parse::<f32>().map_err(|_| unknown())?)),
            None => (s, None),
        };
        let rep = match (name.to_ascii_lowercase().as_str(), arg) {
            ("max", None) => RepFn::Max,
            ("mean", None) => RepFn::Mean,
            ("median", None) => RepFn::Median,
            ("percentile", p) => RepFn::Percentile(p.unwrap_or(DEFAULT_PERCENTILE)),
            ("quantile", q) => RepFn::Quantile(q.unwrap_or(DEFAULT_QUANTILE)),
            _ => return Err(unknown()),
        };
        match rep {
            RepFn::Percentile(p) if !(p > 0.0 && p <= 100.0) => Err(unknown()),
            RepFn::Quantile(q) if !(0.0..=1.0).contains(&q) => Err(unknown()),
            r => Ok(r),
        }
    }
}

/// Linear-interpolated quantile; sorts `values` in place.
fn quantile(values: &mut [f32], q: f64) -> f32 {
    values.sort_by(f32::total_cmp);
    let pos = q.clamp(0.0, 1.0) * (values.len() - 1) as f64;
    let lo = libm::floor(pos) as usize;
    let hi = (lo + 1).min(values.len() - 1);
    let frac = pos - lo as f64;
    (f64::from(values[lo]) * (1.0 - frac) + f64::from(values[hi]) * frac) as f32
}

/// Dispersion of an initial factor vector; sets its exponent weight.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DispFn {
    Same,
    #[default]
    Std,
    Var,
    Range,
}

impl DispFn {
    pub const ALL: [DispFn; 4] = [DispFn::Same, DispFn::Std, DispFn::Var, DispFn::Range];

    fn apply(self, v: &[f32]) -> f64 {
        let n = v.len() as f64;
        let mean = v.iter().map(|&x| f64::from(x)).sum::<f64>() / n;
        let var = v
            .iter()
            .map(|&x| (f64::from(x) - mean) * (f64::from(x) - mean))
            .sum::<f64>()
            / n;
        match self {
            DispFn::Same => 1.0,
            DispFn::Std => libm::sqrt(var),
            DispFn::Var => var,
            DispFn::Range => {
                let max = v.iter().copied().fold(f32::MIN, f32::max);
                let min = v.iter().copied().fold(f32::MAX, f32::min);
                f64::from(max) - f64::from(min)
            }
        }
    }
}

impl fmt::Display for DispFn {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            DispFn::Same => "same",
            DispFn::Std => "std",
            DispFn::Var => "var",
            DispFn::Range => "range",
        })
    }
}

impl FromStr for DispFn {
    type Err = ReparamError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "same" => Ok(DispFn::Same),
            "std" => Ok(DispFn::Std),
            "var" => Ok(DispFn::Var),
            "range" => Ok(DispFn::Range),
            _ => Err(ReparamError::UnknownFunction {
                kind: "disp",
                name: String::from(s),
            }),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReparamFactors {
    pub r_c: Vec<f32>,
    pub r_l: Vec<f32>,
    pub r_d: Vec<f32>,
    pub rep: RepFn,
    pub disp: DispFn,
}

impl ReparamFactors {
    /// All-ones factors (identity reparameterization).
    pub fn ones(c: usize, l: usize, d: usize) -> Self {
        Self {
            r_c: vec![1.0; c],
            r_l: vec![1.0; l],
            r_d: vec![1.0; d],
            rep: RepFn::Mean,
            disp: DispFn::Same,
        }
    }

    pub fn dims(&self) -> (usize, usize, usize) {
        (self.r_c.len(), self.r_l.len(), self.r_d.len())
    }

    pub fn validate(&self, c: usize, l: usize, d: usize) -> Result<(), ReparamError> {
        for (name, v, n) in [("r_C", &self.r_c, c), ("r_L", &self.r_l, l), ("r_D", &self.r_d, d)] {
            if v.len() != n {
                return Err(ReparamError::FactorLength {
                    name,
                    expected: n,
                    actual: v.len(),
                });
            }
            if let Some(&value) = v.iter().find(|&&x| !(x > 0.0 && x.is_finite())) {
                return Err(ReparamError::NonPositiveFactor { name, value });
            }
        }
        Ok(())
    }
}

fn trace_dims(h: &Tensor) -> Result<(usize, usize, usize), ReparamError> {
    match h.dims() {
        &[c, l, d] => Ok((c, l, d)),
        _ => Err(ReparamError::BadTrace(h.shape())),
    }
}

fn floor_eps(v: f32) -> f32 {
    if v > FACTOR_EPS {
        v
    } else {
        FACTOR_EPS
    }
}

/// Initial factors: `Rep` of `|h|` over the complementary axes of each axis.
pub fn rep_initial(h: &Tensor, rep: RepFn) -> Result<[Vec<f32>; 3], ReparamError> {
    let (c, l, d) = trace_dims(h)?;
    let hv = h.as_f32()?;
    if hv.iter().all(|&v| v == 0.0) {
        return Err(ReparamError::AllZeroHidden);
    }
    let abs: Vec<f32> = hv.iter().map(|&v| libm::fabsf(v)).collect();
    let idx = |ci: usize, t: usize, di: usize| (ci * l + t) * d + di;

    let mut buf = Vec::with_capacity(l * d);
    let r_c = (0..c)
        .map(|ci| {
            buf.clear();
            buf.extend_from_slice(&abs[idx(ci, 0, 0)..idx(ci + 1, 0, 0)]);
            floor_eps(rep.apply(&mut buf))
        })
        .collect();
    let r_l = (0..l)
        .map(|t| {
            buf.clear();
            for ci in 0..c {
                buf.extend_from_slice(&abs[idx(ci, t, 0)..idx(ci, t, 0) + d]);
            }
            floor_eps(rep.apply(&mut buf))
        })
        .collect();
    let r_d = (0..d)
        .map(|di| {
            buf.clear();
            for ci in 0..c {
                for t in 0..l {
                    buf.push(abs[idx(ci, t, di)]);
                }
            }
            floor_eps(rep.apply(&mut buf))
        })
        .collect();
    Ok([r_c, r_l, r_d])
}

/// Exponents `Disp(r_X0) / Disp_sum` for the three axes; `1/3` each when
/// every dispersion is zero.
pub fn disp_exponents(r0s: &[Vec<f32>; 3], disp: DispFn) -> [f64; 3] {
    let ds = [disp.apply(&r0s[0]), disp.apply(&r0s[1]), disp.apply(&r0s[2])];
    let sum: f64 = ds.iter().sum();
    if sum <= 0.0 || !sum.is_finite() {
        return [1.0 / 3.0; 3];
    }
    [ds[0] / sum, ds[1] / sum, ds[2] / sum]
}

/// `r_X = r_X0 ^ (Disp(r_X0) / Disp_sum)`.
pub fn disp_weight(r0s: [Vec<f32>; 3], rep: RepFn, disp: DispFn) -> ReparamFactors {
    let e = disp_exponents(&r0s, disp);
    let [c0, l0, d0] = r0s;
    let powv = |v: Vec<f32>, e: f64| -> Vec<f32> {
        v.into_iter()
            .map(|x| floor_eps(libm::pow(f64::from(x), e) as f32))
            .collect()
    };
    ReparamFactors {
        r_c: powv(c0, e[0]),
        r_l: powv(l0, e[1]),
        r_d: powv(d0, e[2]),
        rep,
        disp,
    }
}

/// Averages per-trace initial factors, then applies `disp_weight`.
pub fn factors_from_calibration(
    traces: &[Tensor],
    rep: RepFn,
    disp: DispFn,
) -> Result<ReparamFactors, ReparamError> {
    let first = traces.first().ok_or(ReparamError::EmptyTraces)?;
    let (c, l, d) = trace_dims(first)?;
    let mut sums = [vec![0.0f64; c], vec![0.0f64; l], vec![0.0f64; d]];
    let mut used = 0usize;
    for h in traces {
        if h.dims() != first.dims() {
            return Err(ReparamError::BadTrace(h.shape()));
        }
        let r0 = match rep_initial(h, rep) {
            Ok(r0) => r0,
            Err(ReparamError::AllZeroHidden) => {
                log::warn!("skipping all-zero calibration trace");
                continue;
            }
            Err(e) => return Err(e),
        };
        for (acc, v) in sums.iter_mut().zip(&r0) {
            for (a, &x) in acc.iter_mut().zip(v) {
                *a += f64::from(x);
            }
        }
        used += 1;
    }
    if used == 0 {
        return Err(ReparamError::AllZeroHidden);
    }
    let mean = |v: &[f64]| -> Vec<f32> { v.iter().map(|&s| floor_eps((s / used as f64) as f32)).collect() };
    let r0s = [mean(&sums[0]), mean(&sums[1]), mean(&sums[2])];
    Ok(disp_weight(r0s, rep, disp))
}

/// Token slice `t` scaled by `r_L[t-1] / r_L[t]`; the first slice unchanged.
pub fn reparam_a(abar: &Tensor, r_l: &[f32]) -> Result<Tensor, ReparamError> {
    let (c, l, d) = trace_dims(abar)?;
    check_len("r_L", r_l, l)?;
    let mut v = abar.as_f32()?.to_vec();
    for ci in 0..c {
        for t in 1..l {
            let ratio = r_l[t - 1] / r_l[t];
            let off = (ci * l + t) * d;
            v[off..off + d].iter_mut().for_each(|x| *x *= ratio);
        }
    }
    Ok(Tensor::from_f32(abar.dims(), v)?)
}

/// `B̄ / (r_C ⊗ r_L ⊗ r_D)`; `folded` drops `r_D` (already in `W_B`).
pub fn reparam_b(
    bbar: &Tensor,
    r_c: &[f32],
    r_l: &[f32],
    r_d: &[f32],
    folded: bool,
) -> Result<Tensor, ReparamError> {
    let (c, l, d) = trace_dims(bbar)?;
    check_len("r_C", r_c, c)?;
    check_len("r_L", r_l, l)?;
    if !folded {
        check_len("r_D", r_d, d)?;
    }
    let bv = bbar.as_f32()?;
    let mut out = Vec::with_capacity(bv.len());
    for ci in 0..c {
        for t in 0..l {
            let cl = r_c[ci] * r_l[t];
            for di in 0..d {
                let denom = if folded { cl } else { cl * r_d[di] };
                out.push(bv[(ci * l + t) * d + di] / denom);
            }
        }
    }
    Ok(Tensor::from_f32(bbar.dims(), out)?)
}

/// `C ⊙ (r_L ⊗ r_D)`; `folded` drops `r_D` (already in `W_C`).
pub fn reparam_c(c: &Tensor, r_l: &[f32], r_d: &[f32], folded: bool) -> Result<Tensor, ReparamError> {
    let (l, d) = match c.dims() {
        &[l, d] => (l, d),
        _ => return Err(ReparamError::BadTrace(c.shape())),
    };
    check_len("r_L", r_l, l)?;
    if !folded {
        check_len("r_D", r_d, d)?;
    }
    let cv = c.as_f32()?;
    let out = (0..l * d)
        .map(|i| {
            let (t, di) = (i / d, i % d);
            let f = if folded { r_l[t] } else { r_l[t] * r_d[di] };
            cv[i] * f
        })
        .collect();
    Ok(Tensor::from_f32(c.dims(), out)?)
}

/// `W_B* = W_B / r_D` and `W_C* = W_C ⊙ r_D`, row-wise over the `D` rows.
pub fn fold_weights(w_b: &Tensor, w_c: &Tensor, r_d: &[f32]) -> Result<(Tensor, Tensor), ReparamError> {
    let scale_rows = |w: &Tensor, f: &dyn Fn(f32, f32) -> f32| -> Result<Tensor, ReparamError> {
        let (rows, cols) = match w.dims() {
            &[r, c] => (r, c),
            _ => return Err(ReparamError::BadTrace(w.shape())),
        };
        check_len("r_D", r_d, rows)?;
        let v = w.as_f32()?;
        let out = (0..rows * cols).map(|i| f(v[i], r_d[i / cols])).collect();
        Ok(Tensor::from_f32(w.dims(), out)?)
    };
    Ok((
        scale_rows(w_b, &|w, r| w / r)?,
        scale_rows(w_c, &|w, r| w * r)?,
    ))
}

/// Copy of `p` with `r_D` folded into `W_B` and `W_C`.
pub fn fold_params(p: &SsmParams, r_d: &[f32]) -> Result<SsmParams, ReparamError> {
    let (w_b, w_c) = fold_weights(&p.w_b, &p.w_c, r_d)?;
    Ok(SsmParams {
        w_b,
        w_c,
        ..p.clone()
    })
}

fn check_len(name: &'static str, v: &[f32], n: usize) -> Result<(), ReparamError> {
    if v.len() == n {
        Ok(())
    } else {
        Err(ReparamError::FactorLength {
            name,
            expected: n,
            actual: v.len(),
        })
    }
}

/// Output of a reparameterized scan.
#[derive(Clone, Debug, PartialEq)]
pub struct ReparamTrace {
    /// Smoothed (and, if configured, fake-quantized) `h*`, `[C, L, D]`.
    pub h_star: Tensor,
    /// Recovered output `(C* × h*) ⊙ r_C + D ⊙ x`, `[C, L]`.
    pub y: Tensor,
}

impl ReparamTrace {
    /// Hidden state mapped back to the original coordinates.
    pub fn h(&self, f: &ReparamFactors) -> Result<Tensor, ReparamError> {
        unsmooth_hidden(&self.h_star, f)
    }
}

/// Runs the scan on already-reparameterized operands. The hidden state is
/// fake-quantized after every update when `hq` is given.
pub fn scan_reparameterized(
    abar_star: &Tensor,
    bbar_star: &Tensor,
    c_star: &Tensor,
    d_skip: &Tensor,
    x: &Tensor,
    r_c: &[f32],
    hq: Option<&QuantParams>,
) -> Result<ReparamTrace, ReparamError> {
    let dims = ssm::scan_dims(abar_star, bbar_star, c_star, x)?;
    let (c, l, d) = dims;
    check_len("r_C", r_c, c)?;
    if d_skip.dims() != [c] {
        return Err(SsmError::Shape {
            what: "D skip",
            expected: Shape(vec![c]),
            actual: d_skip.shape(),
        }
        .into());
    }
    let xv = x.as_f32()?;
    let (h_star, mut y) = ssm::scan_kernel(
        abar_star.as_f32()?,
        bbar_star.as_f32()?,
        c_star.as_f32()?,
        xv,
        dims,
        |_, state| {
            if let Some(q) = hq {
                quantizer::fake_quantize_in_place(state, q.scale, q.bits);
            }
        },
    );
    for (i, v) in y.iter_mut().enumerate() {
        *v *= r_c[i / l];
    }
    ssm::add_skip(&mut y, d_skip.as_f32()?, xv, l);
    Ok(ReparamTrace {
        h_star: Tensor::from_f32(&[c, l, d], h_star)?,
        y: Tensor::from_f32(&[c, l], y)?,
    })
}

/// Unfolded path from discretized operands: applies all three factors to
/// `Ā`, `B̄` and `C`, then scans.
pub fn reparam_scan_discrete(
    abar: &Tensor,
    bbar: &Tensor,
    c: &Tensor,
    d_skip: &Tensor,
    x: &Tensor,
    f: &ReparamFactors,
    hq: Option<&QuantParams>,
) -> Result<ReparamTrace, ReparamError> {
    let (ch, l, d) = ssm::scan_dims(abar, bbar, c, x)?;
    f.validate(ch, l, d)?;
    let a_star = reparam_a(abar, &f.r_l)?;
    let b_star = reparam_b(bbar, &f.r_c, &f.r_l, &f.r_d, false)?;
    let c_star = reparam_c(c, &f.r_l, &f.r_d, false)?;
    scan_reparameterized(&a_star, &b_star, &c_star, d_skip, x, &f.r_c, hq)
}

/// Reparameterized scan from projections computed with `r_D`-folded weights.
pub fn reparam_scan_projected(
    x: &Tensor,
    proj: &Projections,
    p_folded: &SsmParams,
    f: &ReparamFactors,
    hq: Option<&QuantParams>,
    mode: Discretization,
) -> Result<ReparamTrace, ReparamError> {
    let (abar, bbar) = ssm::discretize(&proj.delta, &p_folded.a, &proj.b, mode)?;
    let (ch, l, d) = ssm::scan_dims(&abar, &bbar, &proj.c, x)?;
    f.validate(ch, l, d)?;
    let a_star = reparam_a(&abar, &f.r_l)?;
    let b_star = reparam_b(&bbar, &f.r_c, &f.r_l, &f.r_d, true)?;
    let c_star = reparam_c(&proj.c, &f.r_l, &f.r_d, true)?;
    scan_reparameterized(&a_star, &b_star, &c_star, &p_folded.d_skip, x, &f.r_c, hq)
}

/// Full reparameterized direction: projections with folded weights, then
/// [`reparam_scan_projected`].
pub fn reparam_scan(
    x: &Tensor,
    p_folded: &SsmParams,
    f: &ReparamFactors,
    hq: Option<&QuantParams>,
    mode: Discretization,
) -> Result<ReparamTrace, ReparamError> {
    let proj = ssm::project_delta_b_c(x, p_folded)?;
    reparam_scan_projected(x, &proj, p_folded, f, hq, mode)
}

fn rank1_apply(h: &Tensor, f: &ReparamFactors, divide: bool) -> Result<Tensor, ReparamError> {
    let (c, l, d) = trace_dims(h)?;
    f.validate(c, l, d)?;
    let hv = h.as_f32()?;
    let mut out = Vec::with_capacity(hv.len());
    for ci in 0..c {
        for t in 0..l {
            let cl = f.r_c[ci] * f.r_l[t];
            for di in 0..d {
                let r = cl * f.r_d[di];
                let v = hv[(ci * l + t) * d + di];
                out.push(if divide { v / r } else { v * r });
            }
        }
    }
    Ok(Tensor::from_f32(h.dims(), out)?)
}

/// `h / (r_C ⊗ r_L ⊗ r_D)`.
pub fn smooth_hidden(h: &Tensor, f: &ReparamFactors) -> Result<Tensor, ReparamError> {
    rank1_apply(h, f, true)
}

/// `h* ⊙ (r_C ⊗ r_L ⊗ r_D)`.
pub fn unsmooth_hidden(h_star: &Tensor, f: &ReparamFactors) -> Result<Tensor, ReparamError> {
    rank1_apply(h_star, f, false)
}

/// Plain scan with the hidden state fake-quantized after every update.
pub fn naive_quantized_scan(
    abar: &Tensor,
    bbar: &Tensor,
    c: &Tensor,
    d_skip: &Tensor,
    x: &Tensor,
    hq: &QuantParams,
) -> Result<ScanTrace, ReparamError> {
    Ok(ssm::selective_scan_with(abar, bbar, c, d_skip, x, |_, state| {
        quantizer::fake_quantize_in_place(state, hq.scale, hq.bits)
    })?)
}

/// Per-step hidden-state error of the two quantized paths against FP.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PropagationCurves {
    /// `|h_t - ĥ_t|` with `h` quantized directly.
    pub naive: Vec<f64>,
    /// `|h_t - r ⊙ ĥ*_t|` with `h*` quantized.
    pub reparam: Vec<f64>,
}

impl PropagationCurves {
    /// Fraction of steps where the reparameterized error is strictly lower.
    pub fn win_fraction(&self) -> f64 {
        if self.naive.is_empty() {
            return 0.0;
        }
        let wins = self
            .naive
            .iter()
            .zip(&self.reparam)
            .filter(|(n, r)| r < n)
            .count();
        wins as f64 / self.naive.len() as f64
    }
}

/// Runs the FP scan, then both quantized paths with per-tensor MinMax
/// hidden-state scales taken from the FP `h` and `h*` respectively.
pub fn propagation_curves(
    abar: &Tensor,
    bbar: &Tensor,
    c: &Tensor,
    d_skip: &Tensor,
    x: &Tensor,
    f: &ReparamFactors,
    bits: u8,
) -> Result<PropagationCurves, ReparamError> {
    let fp = ssm::selective_scan(abar, bbar, c, d_skip, x)?;
    let hq = QuantParams::new(quantizer::minmax_scale_or_unit(fp.h.as_f32()?, bits)?, bits)?;
    let naive = naive_quantized_scan(abar, bbar, c, d_skip, x, &hq)?;
    let smooth = smooth_hidden(&fp.h, f)?;
    let sq = QuantParams::new(quantizer::minmax_scale_or_unit(smooth.as_f32()?, bits)?, bits)?;
    let rep = reparam_scan_discrete(abar, bbar, c, d_skip, x, f, Some(&sq))?;
    Ok(PropagationCurves {
        naive: metrics::hidden_error_curve(&fp.h, &naive.h)?,
        reparam: metrics::hidden_error_curve(&fp.h, &rep.h(f)?)?,
    })
}

/// `max|h| / median|h|`, the dynamic-range measure used for reporting.
pub fn dynamic_range(h: &Tensor) -> Result<f32, ReparamError> {
    let mut abs: Vec<f32> = h.as_f32()?.iter().map(|&v| libm::fabsf(v)).collect();
    let max = abs.iter().copied().fold(0.0, f32::max);
    let med = quantile(&mut abs, 0.5);
    if med == 0.0 {
        return Ok(f32::INFINITY);
    }
    Ok(max / med)
}
