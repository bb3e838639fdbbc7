//! Symmetric uniform quantization and similarity-driven scale search.

use alloc::vec::Vec;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::tensor::{Tensor, TensorError};

pub const MIN_BITS: u8 = 2;
pub const MAX_BITS: u8 = 16;

pub const DEFAULT_SEARCH_POINTS: usize = 100;
pub const DEFAULT_SEARCH_LO: f32 = 0.2;
pub const DEFAULT_SEARCH_HI: f32 = 1.2;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum QuantError {
    #[error("input is all zeros; no MinMax scale exists")]
    AllZeroInput,
    #[error("scale must be positive and finite, got {0}")]
    InvalidScale(f32),
    #[error("bit width {0} outside supported range")]
    InvalidBits(u8),
    #[error("non-finite value at flat index {0}")]
    NonFinite(usize),
    #[error("cosine similarity undefined for a zero-norm input")]
    ZeroNorm,
    #[error("scale search space is empty")]
    EmptySearchSpace,
    #[error("invalid search space parameters: {0}")]
    InvalidSearchSpace(&'static str),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Granularity {
    PerTensor,
    PerAxis(usize),
}

/// Scale and bit width for one symmetric quantization site.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct QuantParams {
    pub scale: f32,
    pub bits: u8,
    pub granularity: Granularity,
}

impl QuantParams {
    pub fn new(scale: f32, bits: u8) -> Result<Self, QuantError> {
        check_scale(scale)?;
        if !(MIN_BITS..=8).contains(&bits) {
            return Err(QuantError::InvalidBits(bits));
        }
        Ok(Self {
            scale,
            bits,
            granularity: Granularity::PerTensor,
        })
    }

    pub fn qmin(&self) -> i32 {
        qmin(self.bits)
    }

    pub fn qmax(&self) -> i32 {
        qmax(self.bits)
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SimilarityMetric {
    #[default]
    Cosine,
    NegL1,
    NegL2,
}

/// Largest representable level, `2^(b-1) - 1`.
pub fn qmax(bits: u8) -> i32 {
    (1i32 << (bits - 1)) - 1
}

/// Smallest representable level, `-2^(b-1)`.
pub fn qmin(bits: u8) -> i32 {
    -(1i32 << (bits - 1))
}

fn check_bits(bits: u8) -> Result<(), QuantError> {
    if (MIN_BITS..=MAX_BITS).contains(&bits) {
        Ok(())
    } else {
        Err(QuantError::InvalidBits(bits))
    }
}

fn check_scale(scale: f32) -> Result<(), QuantError> {
    if scale > 0.0 && scale.is_finite() {
        Ok(())
    } else {
        Err(QuantError::InvalidScale(scale))
    }
}

/// Round half to even, then clamp to the signed `bits` range.
#[inline]
pub(crate) fn quantize_value(x: f32, scale: f32, lo: f32, hi: f32) -> f32 {
    // Clamping first gives the same level as rint-then-clamp since the bounds
    // are integers, and keeps the argument in range of `rint_small`.
    let r = x / scale;
    if r < lo {
        lo
    } else if r > hi {
        hi
    } else {
        rint_small(r)
    }
}

/// Round half to even for `|x| <= 2^22`: adding `1.5 * 2^23` leaves a unit
/// ulp, so the addition itself rounds.
#[inline]
fn rint_small(x: f32) -> f32 {
    const SHIFTER: f32 = 12_582_912.0;
    (x + SHIFTER) - SHIFTER
}

#[inline]
pub(crate) fn fake_quantize_value(x: f32, scale: f32, lo: f32, hi: f32) -> f32 {
    quantize_value(x, scale, lo, hi) * scale
}

/// `max|x| / (2^(b-1) - 1)`.
pub fn minmax_scale(x: &Tensor, bits: u8) -> Result<f32, QuantError> {
    check_bits(bits)?;
    minmax_scale_slice(x.as_f32()?, bits)
}

pub(crate) fn minmax_scale_slice(x: &[f32], bits: u8) -> Result<f32, QuantError> {
    let m = max_abs(x);
    if m == 0.0 {
        return Err(QuantError::AllZeroInput);
    }
    if !m.is_finite() {
        let idx = x.iter().position(|v| !v.is_finite()).unwrap_or(0);
        return Err(QuantError::NonFinite(idx));
    }
    Ok(m / qmax(bits) as f32)
}

/// MinMax scale that falls back to 1.0 (with a warning) on all-zero input.
pub fn minmax_scale_or_unit(x: &[f32], bits: u8) -> Result<f32, QuantError> {
    check_bits(bits)?;
    match minmax_scale_slice(x, bits) {
        Err(QuantError::AllZeroInput) => {
            log::warn!("all-zero calibration tensor; using scale 1.0");
            Ok(1.0)
        }
        other => other,
    }
}

pub(crate) fn max_abs(x: &[f32]) -> f32 {
    x.iter().fold(0.0f32, |m, &v| {
        let a = libm::fabsf(v);
        if a > m || a.is_nan() {
            a
        } else {
            m
        }
    })
}

/// `clamp(round(x / s), -2^(b-1), 2^(b-1) - 1)`; I8 output for `bits <= 8`,
/// I32 above.
pub fn quantize_at(x: &Tensor, scale: f32, bits: u8) -> Result<Tensor, QuantError> {
    check_bits(bits)?;
    check_scale(scale)?;
    let v = x.as_f32()?;
    if let Some(i) = v.iter().position(|x| !x.is_finite()) {
        return Err(QuantError::NonFinite(i));
    }
    let (lo, hi) = (qmin(bits) as f32, qmax(bits) as f32);
    let out = if bits <= 8 {
        Tensor::from_i8(
            x.dims(),
            v.iter()
                .map(|&e| quantize_value(e, scale, lo, hi) as i8)
                .collect(),
        )?
    } else {
        Tensor::from_i32(
            x.dims(),
            v.iter()
                .map(|&e| quantize_value(e, scale, lo, hi) as i32)
                .collect(),
        )?
    };
    Ok(out)
}

/// `q * s` as F32.
pub fn dequantize(q: &Tensor, scale: f32) -> Result<Tensor, QuantError> {
    let v = q.to_i32_vec()?;
    Ok(Tensor::from_f32(
        q.dims(),
        v.into_iter().map(|e| e as f32 * scale).collect(),
    )?)
}

/// Quantize then dequantize in one pass over a slice.
pub fn fake_quantize(x: &[f32], scale: f32, bits: u8) -> Vec<f32> {
    let (lo, hi) = (qmin(bits) as f32, qmax(bits) as f32);
    x.iter()
        .map(|&e| fake_quantize_value(e, scale, lo, hi))
        .collect()
}

pub fn fake_quantize_in_place(x: &mut [f32], scale: f32, bits: u8) {
    let (lo, hi) = (qmin(bits) as f32, qmax(bits) as f32);
    for e in x.iter_mut() {
        *e = fake_quantize_value(*e, scale, lo, hi);
    }
}

pub fn similarity(a: &Tensor, b: &Tensor, metric: SimilarityMetric) -> Result<f32, QuantError> {
    if a.dims() != b.dims() {
        return Err(TensorError::ShapeMismatch {
            left: a.shape(),
            right: b.shape(),
        }
        .into());
    }
    let (av, bv) = (a.as_f32()?, b.as_f32()?);
    similarity_pairs(metric, av.iter().copied().zip(bv.iter().copied())).map(|v| v as f32)
}

/// Shared accumulation core: f64 sums in iteration order.
pub(crate) fn similarity_pairs(
    metric: SimilarityMetric,
    pairs: impl Iterator<Item = (f32, f32)>,
) -> Result<f64, QuantError> {
    match metric {
        SimilarityMetric::Cosine => {
            let (mut dot, mut na, mut nb) = (0.0f64, 0.0f64, 0.0f64);
            for (a, b) in pairs {
                let (a, b) = (f64::from(a), f64::from(b));
                dot += a * b;
                na += a * a;
                nb += b * b;
            }
            if na == 0.0 || nb == 0.0 {
                return Err(QuantError::ZeroNorm);
            }
            let c = dot / (libm::sqrt(na) * libm::sqrt(nb));
            Ok(c.clamp(-1.0, 1.0))
        }
        SimilarityMetric::NegL1 => {
            let mut s = 0.0f64;
            for (a, b) in pairs {
                s += libm::fabs(f64::from(a) - f64::from(b));
            }
            Ok(-s)
        }
        SimilarityMetric::NegL2 => {
            let mut s = 0.0f64;
            for (a, b) in pairs {
                let d = f64::from(a) - f64::from(b);
                s += d * d;
            }
            Ok(-libm::sqrt(s))
        }
    }
}

/// `n_points` scales linearly spaced over `[lo_frac, hi_frac] x minmax_scale(y)`.
pub fn build_search_space(
    y: &Tensor,
    bits: u8,
    n_points: usize,
    lo_frac: f32,
    hi_frac: f32,
) -> Result<Vec<f32>, QuantError> {
    check_bits(bits)?;
    build_search_space_slice(y.as_f32()?, bits, n_points, lo_frac, hi_frac)
}

pub(crate) fn build_search_space_slice(
    y: &[f32],
    bits: u8,
    n_points: usize,
    lo_frac: f32,
    hi_frac: f32,
) -> Result<Vec<f32>, QuantError> {
    if n_points < 2 {
        return Err(QuantError::InvalidSearchSpace("n_points must be >= 2"));
    }
    if !(lo_frac > 0.0 && lo_frac < hi_frac && hi_frac.is_finite()) {
        return Err(QuantError::InvalidSearchSpace(
            "require 0 < lo_frac < hi_frac",
        ));
    }
    let base = f64::from(minmax_scale_slice(y, bits)?);
    let (lo, hi) = (f64::from(lo_frac), f64::from(hi_frac));
    let last = (n_points - 1) as f64;
    Ok((0..n_points)
        .map(|i| {
            let t = i as f64 / last;
            // endpoint-exact interpolation
            let frac = lo * (1.0 - t) + hi * t;
            (frac * base) as f32
        })
        .collect())
}

/// Similarity of `y` with its fake-quantized reconstruction at `scale`.
/// `None` when the score is undefined (zero-norm reconstruction under cosine).
fn score_at(y: &[f32], scale: f32, bits: u8, metric: SimilarityMetric) -> Option<f64> {
    let (lo, hi) = (qmin(bits) as f32, qmax(bits) as f32);
    let pairs = y
        .iter()
        .map(|&v| (v, fake_quantize_value(v, scale, lo, hi)));
    similarity_pairs(metric, pairs).ok()
}

/// Returns the scale in `space` maximizing `sim(y, Q(y|s) * s)` and its score.
///
/// Exact ties go to the larger scale. Candidates whose reconstruction has no
/// defined score (all levels round to zero under cosine) are skipped.
pub fn search_scale(
    y: &Tensor,
    bits: u8,
    space: &[f32],
    metric: SimilarityMetric,
) -> Result<(f32, f32), QuantError> {
    search_scale_slice(y.as_f32()?, bits, space, metric)
}

pub(crate) fn search_scale_slice(
    y: &[f32],
    bits: u8,
    space: &[f32],
    metric: SimilarityMetric,
) -> Result<(f32, f32), QuantError> {
    check_bits(bits)?;
    if space.is_empty() {
        return Err(QuantError::EmptySearchSpace);
    }
    if let Some(i) = y.iter().position(|x| !x.is_finite()) {
        return Err(QuantError::NonFinite(i));
    }
    if metric == SimilarityMetric::Cosine && y.iter().all(|&v| v == 0.0) {
        return Err(QuantError::ZeroNorm);
    }
    // Scores are compared in f64; the f32 returned is only for reporting.
    let mut best: Option<(f32, f64)> = None;
    for &s in space {
        check_scale(s)?;
        let Some(score) = score_at(y, s, bits, metric) else {
            continue;
        };
        best = match best {
            Some((bs, bscore)) if score < bscore || (score == bscore && s <= bs) => {
                Some((bs, bscore))
            }
            _ => Some((s, score)),
        };
    }
    best.map(|(s, score)| (s, score as f32))
        .ok_or(QuantError::ZeroNorm)
}

/// Default space (`[0.2, 1.2] x MinMax`, 100 points) then search.
pub fn calibrate_similarity(
    y: &[f32],
    bits: u8,
    metric: SimilarityMetric,
) -> Result<(f32, f32), QuantError> {
    let space = build_search_space_slice(
        y,
        bits,
        DEFAULT_SEARCH_POINTS,
        DEFAULT_SEARCH_LO,
        DEFAULT_SEARCH_HI,
    )?;
    search_scale_slice(y, bits, &space, metric)
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;
    use approx::assert_relative_eq;

    fn t(v: &[f32]) -> Tensor {
        Tensor::vector(v)
    }

    #[test]
    fn rint_small_matches_rintf() {
        for k in -70_000i32..=70_000 {
            for x in [k as f32 + 0.5, k as f32 * 0.37, k as f32 - 0.25, f32::from_bits(0x3f00_0000u32.wrapping_add(k as u32))] {
                assert_eq!(rint_small(x), libm::rintf(x), "{x}");
            }
        }
    }

    #[test]
    fn minmax_examples() {
        assert_eq!(minmax_scale(&t(&[-1.0, 0.5, 1.0]), 8).unwrap(), 1.0 / 127.0);
        assert_relative_eq!(
            minmax_scale(&t(&[-1.0, 0.5, 1.0]), 8).unwrap(),
            0.007_874_0,
            max_relative = 1e-5
        );
        assert_eq!(minmax_scale(&t(&[-3.5]), 8).unwrap(), 3.5 / 127.0);
        assert_eq!(minmax_scale(&t(&[-4.0, 4.0]), 4).unwrap(), 4.0 / 7.0);
    }

    #[test]
    fn minmax_all_zero() {
        assert_eq!(
            minmax_scale(&t(&[0.0, 0.0]), 8),
            Err(QuantError::AllZeroInput)
        );
        assert_eq!(minmax_scale_or_unit(&[0.0, 0.0], 8).unwrap(), 1.0);
    }

    #[test]
    fn quantize_examples() {
        let q = quantize_at(&t(&[-1.0, 0.5, 1.0]), 1.0 / 127.0, 8).unwrap();
        assert_eq!(q.to_i32_vec().unwrap(), vec![-127, 64, 127]);
        let q = quantize_at(&t(&[100.0]), 0.01, 8).unwrap();
        assert_eq!(q.to_i32_vec().unwrap(), vec![127]);
        let q = quantize_at(&Tensor::zeros(&[3]).unwrap(), 0.3, 8).unwrap();
        assert_eq!(q.to_i32_vec().unwrap(), vec![0, 0, 0]);
        let q = quantize_at(&t(&[-1e9]), 1.0, 4).unwrap();
        assert_eq!(q.to_i32_vec().unwrap(), vec![-8]);
    }

    #[test]
    fn rounding_is_half_to_even() {
        let q = quantize_at(&t(&[0.5, 1.5, 2.5, -0.5, -1.5]), 1.0, 8).unwrap();
        assert_eq!(q.to_i32_vec().unwrap(), vec![0, 2, 2, 0, -2]);
    }

    #[test]
    fn quantize_rejects_non_finite() {
        assert_eq!(
            quantize_at(&t(&[1.0, f32::NAN]), 1.0, 8),
            Err(QuantError::NonFinite(1))
        );
        assert!(quantize_at(&t(&[1.0]), 0.0, 8).is_err());
    }

    #[test]
    fn wide_bits_use_i32() {
        let q = quantize_at(&t(&[1.0]), 1.0 / 1000.0, 12).unwrap();
        assert_eq!(q.dtype(), crate::tensor::DType::I32);
        assert_eq!(q.to_i32_vec().unwrap(), vec![1000]);
    }

    #[test]
    fn dequantize_examples() {
        let q = Tensor::from_i8(&[3], vec![-127, 64, 127]).unwrap();
        let d = dequantize(&q, 1.0 / 127.0).unwrap();
        let v = d.as_f32().unwrap();
        assert_relative_eq!(v[0], -1.0, max_relative = 1e-6);
        assert_relative_eq!(v[1], 0.503_94, max_relative = 1e-5);
        assert_relative_eq!(v[2], 1.0, max_relative = 1e-6);
        let z = dequantize(&Tensor::from_i8(&[2], vec![0, 0]).unwrap(), 0.7).unwrap();
        assert_eq!(z.as_f32().unwrap(), &[0.0, 0.0]);
    }

    #[test]
    fn grid_points_are_fixed() {
        let s = 0.25f32;
        let x: Vec<f32> = (-8..8).map(|k| k as f32 * s).collect();
        let back = dequantize(&quantize_at(&t(&x), s, 4).unwrap(), s).unwrap();
        assert_eq!(back.as_f32().unwrap(), x.as_slice());
    }

    #[test]
    fn similarity_examples() {
        let x = t(&[1.0, -2.0, 3.0]);
        let nx = t(&[-1.0, 2.0, -3.0]);
        assert_eq!(similarity(&x, &x, SimilarityMetric::Cosine).unwrap(), 1.0);
        assert_eq!(similarity(&x, &nx, SimilarityMetric::Cosine).unwrap(), -1.0);
        let l2 = similarity(&t(&[1.0, 0.0]), &t(&[0.0, 1.0]), SimilarityMetric::NegL2).unwrap();
        assert_relative_eq!(l2, -core::f32::consts::SQRT_2, max_relative = 1e-7);
        let l1 = similarity(&t(&[1.0, 0.0]), &t(&[0.0, 1.0]), SimilarityMetric::NegL1).unwrap();
        assert_eq!(l1, -2.0);
        assert_eq!(
            similarity(&x, &t(&[0.0, 0.0, 0.0]), SimilarityMetric::Cosine),
            Err(QuantError::ZeroNorm)
        );
    }

    #[test]
    fn search_space_endpoints() {
        let s = build_search_space(&t(&[-1.0, 1.0]), 8, 2, 0.5, 1.0).unwrap();
        assert_eq!(s, vec![0.5 / 127.0, 1.0 / 127.0]);
        let y = t(&[0.3, -2.0, 1.1]);
        let mm = minmax_scale(&y, 8).unwrap();
        let s = build_search_space(&y, 8, 100, 0.2, 1.0).unwrap();
        assert_eq!(*s.last().unwrap(), mm);
        assert!(s.iter().all(|&v| v > 0.0));
        assert!(build_search_space(&y, 8, 1, 0.2, 1.0).is_err());
        assert!(build_search_space(&y, 8, 10, 1.0, 0.5).is_err());
        assert!(build_search_space(&y, 8, 10, 0.0, 0.5).is_err());
    }

    #[test]
    fn search_recovers_grid_scale() {
        let s_star = 0.05f32;
        let y: Vec<f32> = (-127..=127).map(|k| k as f32 * s_star).collect();
        let space = [0.03, 0.04, s_star, 0.06];
        let (s, score) = search_scale(&t(&y), 8, &space, SimilarityMetric::Cosine).unwrap();
        assert_eq!(s, s_star);
        assert_eq!(score, 1.0);
    }

    #[test]
    fn search_clips_single_outlier() {
        // with [1 x 63, 50] every candidate either ties or loses; spread
        // inliers plus a milder outlier make clipping strictly better
        let mut y: Vec<f32> = (0..63).map(|i| 0.5 + i as f32 / 62.0).collect();
        y.push(10.0);
        let y = t(&y);
        let mm = minmax_scale(&y, 4).unwrap();
        let space = build_search_space(&y, 4, 100, 0.2, 1.2).unwrap();
        let (s, score) = search_scale(&y, 4, &space, SimilarityMetric::Cosine).unwrap();
        let mm_score = similarity(
            &y,
            &dequantize(&quantize_at(&y, mm, 4).unwrap(), mm).unwrap(),
            SimilarityMetric::Cosine,
        )
        .unwrap();
        assert!(s < mm, "selected {s} vs minmax {mm}");
        assert!(score > mm_score);
    }

    #[test]
    fn search_ties_prefer_larger_scale() {
        // both candidates reproduce y exactly
        let y = t(&[1.0, -1.0, 0.0]);
        let (s, _) = search_scale(&y, 8, &[0.5, 1.0, 0.25], SimilarityMetric::Cosine).unwrap();
        assert_eq!(s, 1.0);
    }

    #[test]
    fn search_errors() {
        assert_eq!(
            search_scale(&t(&[1.0]), 8, &[], SimilarityMetric::Cosine),
            Err(QuantError::EmptySearchSpace)
        );
        assert_eq!(
            search_scale(&t(&[0.0]), 8, &[1.0], SimilarityMetric::Cosine),
            Err(QuantError::ZeroNorm)
        );
    }
}
