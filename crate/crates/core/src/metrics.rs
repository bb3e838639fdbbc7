//! Error metrics between a reference tensor and its quantized counterpart.

use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::tensor::{Shape, Tensor, TensorError};

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ErrorMetrics {
    pub cosine: f64,
    pub mse: f64,
    pub max_abs_err: f64,
}

impl ErrorMetrics {
    /// Compares `test` against `reference`. Cosine is 1 when both are zero
    /// and 0 when exactly one is.
    pub fn between(reference: &Tensor, test: &Tensor) -> Result<Self, TensorError> {
        if reference.dims() != test.dims() {
            return Err(TensorError::ShapeMismatch {
                left: reference.shape(),
                right: test.shape(),
            });
        }
        let (a, b) = (reference.as_f32()?, test.as_f32()?);
        let (mut dot, mut na, mut nb, mut se, mut mx) = (0.0f64, 0.0f64, 0.0f64, 0.0f64, 0.0f64);
        for (&x, &y) in a.iter().zip(b) {
            let (x, y) = (f64::from(x), f64::from(y));
            dot += x * y;
            na += x * x;
            nb += y * y;
            se += (x - y) * (x - y);
            mx = mx.max(libm::fabs(x - y));
        }
        let cosine = match (na == 0.0, nb == 0.0) {
            (true, true) => 1.0,
            (true, false) | (false, true) => 0.0,
            _ => (dot / (libm::sqrt(na) * libm::sqrt(nb))).clamp(-1.0, 1.0),
        };
        Ok(Self {
            cosine,
            mse: se / a.len() as f64,
            max_abs_err: mx,
        })
    }

    /// Elementwise mean of several metric records.
    pub fn mean(items: &[ErrorMetrics]) -> ErrorMetrics {
        if items.is_empty() {
            return ErrorMetrics::default();
        }
        let n = items.len() as f64;
        let mut m = ErrorMetrics::default();
        for it in items {
            m.cosine += it.cosine;
            m.mse += it.mse;
            m.max_abs_err += it.max_abs_err;
        }
        m.cosine /= n;
        m.mse /= n;
        m.max_abs_err /= n;
        m
    }
}

/// `max|a - b| / max|b|`; `0` when both are zero.
pub fn max_relative_error(a: &[f32], b: &[f32]) -> f64 {
    let mut num = 0.0f64;
    let mut den = 0.0f64;
    for (&x, &y) in a.iter().zip(b) {
        num = num.max(libm::fabs(f64::from(x) - f64::from(y)));
        den = den.max(libm::fabs(f64::from(y)));
    }
    if den == 0.0 {
        if num == 0.0 {
            0.0
        } else {
            f64::INFINITY
        }
    } else {
        num / den
    }
}

/// Per-step L2 error `|h_t - ĥ_t|` over the `[C, D]` slice of `[C, L, D]`
/// hidden-state traces.
pub fn hidden_error_curve(reference: &Tensor, test: &Tensor) -> Result<Vec<f64>, TensorError> {
    let (c, l, d) = match reference.dims() {
        &[c, l, d] => (c, l, d),
        _ => return Err(TensorError::InvalidDims(reference.shape())),
    };
    if test.dims() != reference.dims() {
        return Err(TensorError::ShapeMismatch {
            left: reference.shape(),
            right: Shape(test.dims().to_vec()),
        });
    }
    let (a, b) = (reference.as_f32()?, test.as_f32()?);
    let mut acc = alloc::vec![0.0f64; l];
    for ci in 0..c {
        for (t, e) in acc.iter_mut().enumerate() {
            let off = (ci * l + t) * d;
            for i in off..off + d {
                let diff = f64::from(a[i]) - f64::from(b[i]);
                *e += diff * diff;
            }
        }
    }
    Ok(acc.into_iter().map(libm::sqrt).collect())
}

/// Least-squares slope of `ys` against `0..n`.
pub fn trend_slope(ys: &[f64]) -> f64 {
    let n = ys.len() as f64;
    if ys.len() < 2 {
        return 0.0;
    }
    let mx = (n - 1.0) / 2.0;
    let my = ys.iter().sum::<f64>() / n;
    let (mut num, mut den) = (0.0, 0.0);
    for (i, &y) in ys.iter().enumerate() {
        let dx = i as f64 - mx;
        num += dx * (y - my);
        den += dx * dx;
    }
    num / den
}
