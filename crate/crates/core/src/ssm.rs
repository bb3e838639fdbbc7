//! Selective state-space scan.
//!
//! Layout conventions used throughout the crate:
//! - sequence inputs / outputs `x`, `y`: `[C, L]` (channels x tokens)
//! - input-dependent `B`, `C`: `[L, D]`
//! - discretized `Ā`, `B̄` and the hidden-state trace `h`: `[C, L, D]`
//!
//! The hidden state is stored token-major inside each channel (`C x L x D`);
//! a `C x D x L` ordering would carry the same values transposed.

use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::tensor::{self, Shape, Tensor, TensorError};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SsmError {
    #[error("state matrix A must be strictly negative; found {value} at flat index {index}")]
    NonNegativeA { index: usize, value: f32 },
    #[error("{what}: expected {expected}, got {actual}")]
    Shape {
        what: &'static str,
        expected: Shape,
        actual: Shape,
    },
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

fn expect_dims(what: &'static str, t: &Tensor, dims: &[usize]) -> Result<(), SsmError> {
    if t.dims() == dims {
        Ok(())
    } else {
        Err(SsmError::Shape {
            what,
            expected: Shape(dims.to_vec()),
            actual: t.shape(),
        })
    }
}

/// How `B̄` is derived from `Δ`, `A`, `B`.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Discretization {
    /// `B̄ = Δ ⊙ B`, the form the reparameterization algebra folds through.
    #[default]
    Simplified,
    /// Exact zero-order hold for diagonal `A`: `B̄ = (exp(ΔA) - 1) / A ⊙ B`.
    ZeroOrderHold,
}

/// Parameters of one scan direction.
#[derive(Clone, Debug, PartialEq)]
pub struct SsmParams {
    /// `[C, D]`, strictly negative.
    pub a: Tensor,
    /// `[C, C]`; `Δ = softplus(W_Δ · x)`.
    pub w_delta: Tensor,
    /// `[D, C]`; `B = (W_B · x)ᵀ`.
    pub w_b: Tensor,
    /// `[D, C]`; `C = (W_C · x)ᵀ`.
    pub w_c: Tensor,
    /// `[C]` skip term.
    pub d_skip: Tensor,
}

impl SsmParams {
    pub fn channels(&self) -> usize {
        self.a.dims()[0]
    }

    pub fn state_dim(&self) -> usize {
        self.a.dims()[1]
    }

    pub fn validate(&self) -> Result<(), SsmError> {
        if self.a.rank() != 2 {
            return Err(TensorError::InvalidDims(self.a.shape()).into());
        }
        let (c, d) = (self.channels(), self.state_dim());
        expect_dims("W_delta", &self.w_delta, &[c, c])?;
        expect_dims("W_B", &self.w_b, &[d, c])?;
        expect_dims("W_C", &self.w_c, &[d, c])?;
        expect_dims("D skip", &self.d_skip, &[c])?;
        if let Some((index, &value)) = self
            .a
            .as_f32()?
            .iter()
            .enumerate()
            .find(|(_, &v)| v >= 0.0 || v.is_nan())
        {
            return Err(SsmError::NonNegativeA { index, value });
        }
        Ok(())
    }

    fn check_input(&self, x: &Tensor) -> Result<usize, SsmError> {
        self.validate()?;
        match x.dims() {
            &[c, l] if c == self.channels() => Ok(l),
            _ => Err(SsmError::Shape {
                what: "scan input x",
                expected: Shape(vec![self.channels(), x.dims().last().copied().unwrap_or(1)]),
                actual: x.shape(),
            }),
        }
    }
}

/// Hidden-state trace and output of one scan.
#[derive(Clone, Debug, PartialEq)]
pub struct ScanTrace {
    /// `[C, L, D]`.
    pub h: Tensor,
    /// `[C, L]`.
    pub y: Tensor,
}

/// `log(1 + exp(x))`, returning `x` once `exp` would dominate and floored at
/// `f32::MIN_POSITIVE` so the result stays strictly positive.
pub fn softplus_scalar(x: f32) -> f32 {
    if x > 20.0 {
        x
    } else {
        libm::log1pf(libm::expf(x)).max(f32::MIN_POSITIVE)
    }
}

pub fn softplus(x: &Tensor) -> Result<Tensor, TensorError> {
    x.map(softplus_scalar)
}

/// Input-dependent scan parameters for one sequence.
#[derive(Clone, Debug, PartialEq)]
pub struct Projections {
    /// `[C, L]`, strictly positive.
    pub delta: Tensor,
    /// `[L, D]`.
    pub b: Tensor,
    /// `[L, D]`.
    pub c: Tensor,
}

/// Raw linear outputs before softplus / transposition; the points where
/// projection outputs get quantized.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ProjectionSite {
    /// `W_Δ · x`, `[C, L]`.
    Delta,
    /// `W_B · x`, `[D, L]`.
    B,
    /// `W_C · x`, `[D, L]`.
    C,
}

/// `Δ = softplus(W_Δ · x)`, `B = W_B · x`, `C = W_C · x`.
pub fn project_delta_b_c(x: &Tensor, p: &SsmParams) -> Result<Projections, SsmError> {
    project_delta_b_c_with(x, p, |_, _| {})
}

/// As [`project_delta_b_c`], letting `hook` rewrite each raw linear output
/// in place (fake quantization, tapping).
pub fn project_delta_b_c_with(
    x: &Tensor,
    p: &SsmParams,
    mut hook: impl FnMut(ProjectionSite, &mut Tensor),
) -> Result<Projections, SsmError> {
    p.check_input(x)?;
    let mut dt = tensor::matmul(&p.w_delta, x)?;
    hook(ProjectionSite::Delta, &mut dt);
    let mut b = tensor::matmul(&p.w_b, x)?;
    hook(ProjectionSite::B, &mut b);
    let mut c = tensor::matmul(&p.w_c, x)?;
    hook(ProjectionSite::C, &mut c);
    Ok(Projections {
        delta: softplus(&dt)?,
        b: tensor::transpose2(&b)?,
        c: tensor::transpose2(&c)?,
    })
}

/// `Ā[c,l,d] = exp(Δ[c,l] A[c,d])`, `B̄[c,l,d] = Δ[c,l] B[l,d]` (or the
/// zero-order-hold form).
pub fn discretize(
    delta: &Tensor,
    a: &Tensor,
    b: &Tensor,
    mode: Discretization,
) -> Result<(Tensor, Tensor), SsmError> {
    let (c, l) = match delta.dims() {
        &[c, l] => (c, l),
        _ => return Err(TensorError::InvalidDims(delta.shape()).into()),
    };
    let d = a.dims().get(1).copied().unwrap_or(0);
    expect_dims("A", a, &[c, d])?;
    expect_dims("B", b, &[l, d])?;
    let (dv, av, bv) = (delta.as_f32()?, a.as_f32()?, b.as_f32()?);
    let mut abar = Vec::with_capacity(c * l * d);
    let mut bbar = Vec::with_capacity(c * l * d);
    for ci in 0..c {
        for t in 0..l {
            let dt = dv[ci * l + t];
            for di in 0..d {
                let a_cd = av[ci * d + di];
                let b_td = bv[t * d + di];
                abar.push(libm::expf(dt * a_cd));
                bbar.push(match mode {
                    Discretization::Simplified => dt * b_td,
                    Discretization::ZeroOrderHold => libm::expm1f(dt * a_cd) / a_cd * b_td,
                });
            }
        }
    }
    let dims = [c, l, d];
    Ok((Tensor::from_f32(&dims, abar)?, Tensor::from_f32(&dims, bbar)?))
}

/// Shapes `(C, L, D)` of a scan, checked across all operands.
pub(crate) fn scan_dims(
    abar: &Tensor,
    bbar: &Tensor,
    c: &Tensor,
    x: &Tensor,
) -> Result<(usize, usize, usize), SsmError> {
    let (ch, l, d) = match abar.dims() {
        &[ch, l, d] => (ch, l, d),
        _ => return Err(TensorError::InvalidDims(abar.shape()).into()),
    };
    expect_dims("B̄", bbar, &[ch, l, d])?;
    expect_dims("C", c, &[l, d])?;
    expect_dims("x", x, &[ch, l])?;
    Ok((ch, l, d))
}

/// The recurrence kernel shared by the plain and reparameterized scans.
///
/// `h_t = Ā_t ⊙ h_{t-1} + B̄_t ⊙ x_t` from `h_0 = 0`; after each update
/// `on_state(t, h_t)` may rewrite the `[C, D]` state in place before it is
/// recorded, used for `y_t = C_t × h_t`, and carried to the next step.
/// Returns the `[C, L, D]` trace and `[C, L]` output (no skip term).
pub(crate) fn scan_kernel(
    abar: &[f32],
    bbar: &[f32],
    c: &[f32],
    x: &[f32],
    (ch, l, d): (usize, usize, usize),
    mut on_state: impl FnMut(usize, &mut [f32]),
) -> (Vec<f32>, Vec<f32>) {
    let mut state = vec![0.0f32; ch * d];
    let mut trace = vec![0.0f32; ch * l * d];
    let mut y = vec![0.0f32; ch * l];
    for t in 0..l {
        for ci in 0..ch {
            let xt = x[ci * l + t];
            let off = (ci * l + t) * d;
            let hs = &mut state[ci * d..(ci + 1) * d];
            for (di, h) in hs.iter_mut().enumerate() {
                *h = abar[off + di] * *h + bbar[off + di] * xt;
            }
        }
        on_state(t, &mut state);
        let ct = &c[t * d..(t + 1) * d];
        for ci in 0..ch {
            let hs = &state[ci * d..(ci + 1) * d];
            trace[(ci * l + t) * d..(ci * l + t + 1) * d].copy_from_slice(hs);
            let mut acc = 0.0f32;
            for (&cv, &hv) in ct.iter().zip(hs) {
                acc += cv * hv;
            }
            y[ci * l + t] = acc;
        }
    }
    (trace, y)
}

pub(crate) fn add_skip(y: &mut [f32], d_skip: &[f32], x: &[f32], l: usize) {
    for (i, v) in y.iter_mut().enumerate() {
        *v += d_skip[i / l] * x[i];
    }
}

/// Sequential scan with skip term: `y_t = C_t × h_t + D ⊙ x_t`.
pub fn selective_scan(
    abar: &Tensor,
    bbar: &Tensor,
    c: &Tensor,
    d_skip: &Tensor,
    x: &Tensor,
) -> Result<ScanTrace, SsmError> {
    selective_scan_with(abar, bbar, c, d_skip, x, |_, _| {})
}

/// [`selective_scan`] with a per-step state hook (see `scan_kernel`).
pub fn selective_scan_with(
    abar: &Tensor,
    bbar: &Tensor,
    c: &Tensor,
    d_skip: &Tensor,
    x: &Tensor,
    on_state: impl FnMut(usize, &mut [f32]),
) -> Result<ScanTrace, SsmError> {
    let dims = scan_dims(abar, bbar, c, x)?;
    let (ch, l, d) = dims;
    expect_dims("D skip", d_skip, &[ch])?;
    let xv = x.as_f32()?;
    let (h, mut y) = scan_kernel(abar.as_f32()?, bbar.as_f32()?, c.as_f32()?, xv, dims, on_state);
    add_skip(&mut y, d_skip.as_f32()?, xv, l);
    Ok(ScanTrace {
        h: Tensor::from_f32(&[ch, l, d], h)?,
        y: Tensor::from_f32(&[ch, l], y)?,
    })
}

/// Projections, discretization and scan for one direction.
pub fn ssm_forward(x: &Tensor, p: &SsmParams, mode: Discretization) -> Result<ScanTrace, SsmError> {
    let proj = project_delta_b_c(x, p)?;
    let (abar, bbar) = discretize(&proj.delta, &p.a, &proj.b, mode)?;
    selective_scan(&abar, &bbar, &proj.c, &p.d_skip, x)
}

/// Reverses the token axis (axis 1) of a `[C, L]` or `[C, L, D]` tensor.
pub fn reverse_tokens(t: &Tensor) -> Result<Tensor, TensorError> {
    let dims = t.dims();
    if dims.len() < 2 {
        return Err(TensorError::InvalidDims(t.shape()));
    }
    let (c, l) = (dims[0], dims[1]);
    let inner: usize = dims[2..].iter().product();
    let v = t.as_f32()?;
    let mut out = Vec::with_capacity(v.len());
    for ci in 0..c {
        for ti in (0..l).rev() {
            let off = (ci * l + ti) * inner;
            out.extend_from_slice(&v[off..off + inner]);
        }
    }
    Tensor::from_f32(dims, out)
}

/// Forward scan plus the re-reversed scan of the token-reversed input, summed.
pub fn bidirectional_scan(
    x: &Tensor,
    p_fwd: &SsmParams,
    p_bwd: &SsmParams,
    mode: Discretization,
) -> Result<Tensor, SsmError> {
    if p_fwd.a.dims() != p_bwd.a.dims() {
        return Err(SsmError::Shape {
            what: "backward direction A",
            expected: p_fwd.a.shape(),
            actual: p_bwd.a.shape(),
        });
    }
    let fwd = ssm_forward(x, p_fwd, mode)?;
    let bwd = ssm_forward(&reverse_tokens(x)?, p_bwd, mode)?;
    Ok(tensor::add(&fwd.y, &reverse_tokens(&bwd.y)?)?)
}
