//! k-scaled channel-wise / token-wise quantization.
//!
//! Groups (channels or tokens) are clustered by the log2 of their peak
//! magnitude, each cluster gets its own searched scale, and every cluster
//! scale is then snapped to `s1 * 2^-m` so dequantization only needs the
//! largest scale `s1` plus an integer shift per cluster.

use alloc::vec;
use alloc::vec::Vec;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::quantizer::{self, qmax, qmin, QuantError, SimilarityMetric};
use crate::tensor::{Tensor, TensorError};

/// Feature assigned to an all-zero group.
pub const ZERO_GROUP_FEATURE: f32 = -126.0;
pub const MAX_SHIFT: u32 = 31;
pub const DEFAULT_K: usize = 4;
pub const DEFAULT_KMEANS_ITERS: usize = 50;

// exact 1-D optimum is only computed up to this many points
const EXACT_KMEANS_LIMIT: usize = 4096;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum KScaledError {
    #[error("no features to cluster")]
    EmptyFeatures,
    #[error("k must be >= 1")]
    ZeroK,
    #[error("k-scaled quantization expects a rank-2 [channels, tokens] tensor, got rank {0}")]
    NotRank2(usize),
    #[error("assignment covers {assigned} groups but the tensor has {groups}")]
    AssignmentMismatch { assigned: usize, groups: usize },
    #[error("cluster id {id} out of range for k = {k}")]
    ClusterOutOfRange { id: usize, k: usize },
    #[error("scales must be positive and finite, got {0}")]
    NonPositiveScale(f32),
    #[error("inconsistent k-scaled parameters: {0}")]
    Inconsistent(&'static str),
    #[error("no calibration samples")]
    NoSamples,
    #[error(transparent)]
    Quant(#[from] QuantError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

/// Which axis of a `[channels, tokens]` activation is partitioned.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KAxis {
    Channel,
    Token,
}

impl KAxis {
    fn index(self) -> usize {
        match self {
            KAxis::Channel => 0,
            KAxis::Token => 1,
        }
    }
}

/// How each cluster's scale is chosen before snapping to a shift.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ClusterScaleRule {
    MinMax,
    Search(SimilarityMetric),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct KScaledParams {
    pub axis: KAxis,
    pub k: usize,
    pub bits: u8,
    /// Cluster id per group; cluster 0 holds the largest-magnitude groups.
    pub assignment: Vec<usize>,
    pub s1: f32,
    pub shifts: Vec<u32>,
    /// Per-cluster scale found before snapping.
    pub searched: Vec<f32>,
    /// Per-cluster `s1 * 2^-shift`.
    pub effective: Vec<f32>,
}

impl KScaledParams {
    /// Assembles parameters from per-cluster scales.
    pub fn from_cluster_scales(
        axis: KAxis,
        bits: u8,
        assignment: Vec<usize>,
        searched: Vec<f32>,
    ) -> Result<Self, KScaledError> {
        let (s1, shifts) = redefine_scales(&searched)?;
        let effective = shifts.iter().map(|&m| shifted_scale(s1, m)).collect();
        let p = Self {
            axis,
            k: searched.len(),
            bits,
            assignment,
            s1,
            shifts,
            searched,
            effective,
        };
        p.validate()?;
        Ok(p)
    }

    pub fn effective_scale(&self, cluster: usize) -> f32 {
        shifted_scale(self.s1, self.shifts[cluster])
    }

    /// Effective scale per group, in group order.
    pub fn group_scales(&self) -> Vec<f32> {
        self.assignment
            .iter()
            .map(|&c| self.effective[c])
            .collect()
    }

    pub fn validate(&self) -> Result<(), KScaledError> {
        if self.k == 0 {
            return Err(KScaledError::ZeroK);
        }
        if self.shifts.len() != self.k
            || self.searched.len() != self.k
            || self.effective.len() != self.k
        {
            return Err(KScaledError::Inconsistent("per-cluster vectors must have length k"));
        }
        if !(self.s1 > 0.0 && self.s1.is_finite()) {
            return Err(KScaledError::NonPositiveScale(self.s1));
        }
        if let Some(&id) = self.assignment.iter().find(|&&id| id >= self.k) {
            return Err(KScaledError::ClusterOutOfRange { id, k: self.k });
        }
        if self.shifts.iter().any(|&m| m > MAX_SHIFT) {
            return Err(KScaledError::Inconsistent("shift exceeds 31"));
        }
        if !self.shifts.contains(&0) {
            return Err(KScaledError::Inconsistent("no cluster carries s1"));
        }
        let consistent = self
            .shifts
            .iter()
            .zip(&self.effective)
            .all(|(&m, &e)| shifted_scale(self.s1, m).to_bits() == e.to_bits());
        if !consistent {
            return Err(KScaledError::Inconsistent(
                "effective scales do not equal s1 * 2^-shift",
            ));
        }
        quantizer::QuantParams::new(self.s1, self.bits)?;
        Ok(())
    }
}

/// `s1 * 2^-m`, exact in binary floating point.
pub fn shifted_scale(s1: f32, m: u32) -> f32 {
    libm::ldexpf(s1, -(m as i32))
}

fn check_rank2(y: &Tensor) -> Result<(usize, usize), KScaledError> {
    match y.dims() {
        &[c, l] => Ok((c, l)),
        d => Err(KScaledError::NotRank2(d.len())),
    }
}

/// Group index of flat element `i` in a `[c, l]` tensor.
#[inline]
fn group_of(axis: KAxis, i: usize, l: usize) -> usize {
    match axis {
        KAxis::Channel => i / l,
        KAxis::Token => i % l,
    }
}

fn group_max_abs(y: &Tensor, axis: KAxis, acc: &mut [f32]) -> Result<(), KScaledError> {
    let (_, l) = check_rank2(y)?;
    for (i, &v) in y.as_f32()?.iter().enumerate() {
        let g = group_of(axis, i, l);
        let a = libm::fabsf(v);
        if a > acc[g] {
            acc[g] = a;
        }
    }
    Ok(())
}

fn log2_features(maxima: &[f32]) -> Vec<f32> {
    maxima
        .iter()
        .map(|&m| {
            if m > 0.0 {
                libm::log2f(m)
            } else {
                log::warn!("all-zero group; using feature {ZERO_GROUP_FEATURE}");
                ZERO_GROUP_FEATURE
            }
        })
        .collect()
}

/// `log2(max |y|)` per group along `axis`.
pub fn group_stats(y: &Tensor, axis: KAxis) -> Result<Vec<f32>, KScaledError> {
    let n = y.check_axis(axis.index())?;
    check_rank2(y)?;
    let mut maxima = vec![0.0f32; n];
    group_max_abs(y, axis, &mut maxima)?;
    Ok(log2_features(&maxima))
}

/// Lloyd's algorithm on scalar features with quantile seeding.
///
/// Labels are ordered by descending centroid. `k` is reduced to the number of
/// distinct feature values when it exceeds it. If the Lloyd fixed point is
/// worse than the exact 1-D optimum (dynamic programming over the sorted
/// features), the optimum is returned instead.
pub fn kmeans_1d(
    features: &[f32],
    k: usize,
    iters: usize,
    seed: u64,
) -> Result<Vec<usize>, KScaledError> {
    if features.is_empty() {
        return Err(KScaledError::EmptyFeatures);
    }
    if k == 0 {
        return Err(KScaledError::ZeroK);
    }
    let xs: Vec<f64> = features.iter().map(|&f| f64::from(f)).collect();
    let mut sorted = xs.clone();
    sorted.sort_by(f64::total_cmp);
    let mut distinct = sorted.clone();
    distinct.dedup();
    let k = if k > distinct.len() {
        log::warn!(
            "k = {k} exceeds {} distinct feature values; reducing",
            distinct.len()
        );
        distinct.len()
    } else {
        k
    };

    let mut labels = lloyd(&xs, &sorted, &distinct, k, iters, seed);
    if xs.len() <= EXACT_KMEANS_LIMIT && k > 1 {
        let exact = optimal_partition(&xs, k);
        if sse(&xs, &exact, k) < sse(&xs, &labels, k) * (1.0 - 1e-12) {
            labels = exact;
        }
    }
    Ok(order_by_centroid(&xs, &labels, k))
}

fn lloyd(xs: &[f64], sorted: &[f64], distinct: &[f64], k: usize, iters: usize, seed: u64) -> Vec<usize> {
    let n = xs.len();
    let mut centroids: Vec<f64> = (0..k).map(|j| sorted[(2 * j + 1) * n / (2 * k)]).collect();
    if centroids.windows(2).any(|w| w[0] == w[1]) {
        let m = distinct.len();
        centroids = (0..k).map(|j| distinct[(2 * j + 1) * m / (2 * k)]).collect();
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut labels = vec![usize::MAX; n];
    for _ in 0..iters.max(1) {
        let mut changed = false;
        for (i, &x) in xs.iter().enumerate() {
            let mut best = 0;
            for j in 1..k {
                if libm::fabs(x - centroids[j]) < libm::fabs(x - centroids[best]) {
                    best = j;
                }
            }
            if labels[i] != best {
                labels[i] = best;
                changed = true;
            }
        }
        let mut sums = vec![0.0f64; k];
        let mut counts = vec![0usize; k];
        for (&x, &c) in xs.iter().zip(&labels) {
            sums[c] += x;
            counts[c] += 1;
        }
        for j in 0..k {
            if counts[j] > 0 {
                centroids[j] = sums[j] / counts[j] as f64;
                continue;
            }
            // empty cluster: reseed at a point farthest from its centroid
            let dist = |i: usize| libm::fabs(xs[i] - centroids[labels[i]]);
            let far = (0..n).map(dist).fold(0.0f64, f64::max);
            let candidates: Vec<usize> = (0..n).filter(|&i| dist(i) == far).collect();
            let pick = candidates[rng.random_range(0..candidates.len())];
            centroids[j] = xs[pick];
            labels[pick] = j;
            changed = true;
        }
        if !changed {
            break;
        }
    }
    labels
}

/// Within-cluster sum of squares.
pub fn sse(xs: &[f64], labels: &[usize], k: usize) -> f64 {
    let mut sums = vec![0.0f64; k];
    let mut counts = vec![0usize; k];
    for (&x, &c) in xs.iter().zip(labels) {
        sums[c] += x;
        counts[c] += 1;
    }
    xs.iter()
        .zip(labels)
        .map(|(&x, &c)| {
            let mu = sums[c] / counts[c] as f64;
            (x - mu) * (x - mu)
        })
        .sum()
}

/// Exact k-means on the line: optimal clusters are contiguous in sorted order.
fn optimal_partition(xs: &[f64], k: usize) -> Vec<usize> {
    let n = xs.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| xs[a].total_cmp(&xs[b]));
    let v: Vec<f64> = order.iter().map(|&i| xs[i]).collect();
    let mut p1 = vec![0.0f64; n + 1];
    let mut p2 = vec![0.0f64; n + 1];
    for i in 0..n {
        p1[i + 1] = p1[i] + v[i];
        p2[i + 1] = p2[i] + v[i] * v[i];
    }
    // cost of sorted slice [a, b)
    let cost = |a: usize, b: usize| {
        let m = (b - a) as f64;
        let s = p1[b] - p1[a];
        (p2[b] - p2[a] - s * s / m).max(0.0)
    };
    let inf = f64::INFINITY;
    // dp[j][i]: best cost of the first i points in j + 1 clusters
    let mut dp = vec![vec![inf; n + 1]; k];
    let mut cut = vec![vec![0usize; n + 1]; k];
    for (i, v) in dp[0].iter_mut().enumerate().skip(1) {
        *v = cost(0, i);
    }
    for j in 1..k {
        for i in (j + 1)..=n {
            for m in j..i {
                let c = dp[j - 1][m] + cost(m, i);
                if c < dp[j][i] {
                    dp[j][i] = c;
                    cut[j][i] = m;
                }
            }
        }
    }
    let mut labels = vec![0usize; n];
    let mut end = n;
    for j in (0..k).rev() {
        let start = if j == 0 { 0 } else { cut[j][end] };
        for &i in &order[start..end] {
            labels[i] = j;
        }
        end = start;
    }
    labels
}

fn order_by_centroid(xs: &[f64], labels: &[usize], k: usize) -> Vec<usize> {
    let mut sums = vec![0.0f64; k];
    let mut counts = vec![0usize; k];
    for (&x, &c) in xs.iter().zip(labels) {
        sums[c] += x;
        counts[c] += 1;
    }
    let mut ids: Vec<usize> = (0..k).filter(|&j| counts[j] > 0).collect();
    ids.sort_by(|&a, &b| {
        let (ma, mb) = (sums[a] / counts[a] as f64, sums[b] / counts[b] as f64);
        mb.total_cmp(&ma).then(a.cmp(&b))
    });
    let mut remap = vec![0usize; k];
    for (new, &old) in ids.iter().enumerate() {
        remap[old] = new;
    }
    labels.iter().map(|&c| remap[c]).collect()
}

/// `s1 = max(scales)`, `m_i = round(log2(s1 / s_i))` clamped to `[0, 31]`.
pub fn redefine_scales(scales: &[f32]) -> Result<(f32, Vec<u32>), KScaledError> {
    if scales.is_empty() {
        return Err(KScaledError::EmptyFeatures);
    }
    if let Some(&s) = scales.iter().find(|&&s| !(s > 0.0 && s.is_finite())) {
        return Err(KScaledError::NonPositiveScale(s));
    }
    let s1 = scales.iter().copied().fold(f32::MIN_POSITIVE, f32::max);
    let shifts = scales
        .iter()
        .map(|&s| {
            let m = libm::rint(libm::log2(f64::from(s1) / f64::from(s)));
            m.clamp(0.0, f64::from(MAX_SHIFT)) as u32
        })
        .collect();
    Ok((s1, shifts))
}

fn check_assignment(y: &Tensor, p: &KScaledParams) -> Result<(usize, usize), KScaledError> {
    let (c, l) = check_rank2(y)?;
    let groups = match p.axis {
        KAxis::Channel => c,
        KAxis::Token => l,
    };
    if p.assignment.len() != groups {
        return Err(KScaledError::AssignmentMismatch {
            assigned: p.assignment.len(),
            groups,
        });
    }
    Ok((c, l))
}

/// Integer levels, each group quantized at its cluster's effective scale.
pub fn quantize_kscaled(y: &Tensor, p: &KScaledParams) -> Result<Tensor, KScaledError> {
    let (_, l) = check_assignment(y, p)?;
    p.validate()?;
    let v = y.as_f32()?;
    if let Some(i) = v.iter().position(|x| !x.is_finite()) {
        return Err(QuantError::NonFinite(i).into());
    }
    let (lo, hi) = (qmin(p.bits) as f32, qmax(p.bits) as f32);
    let level = |i: usize, x: f32| {
        let s = p.effective[p.assignment[group_of(p.axis, i, l)]];
        quantizer::quantize_value(x, s, lo, hi)
    };
    let t = if p.bits <= 8 {
        Tensor::from_i8(
            y.dims(),
            v.iter().enumerate().map(|(i, &x)| level(i, x) as i8).collect(),
        )?
    } else {
        Tensor::from_i32(
            y.dims(),
            v.iter().enumerate().map(|(i, &x)| level(i, x) as i32).collect(),
        )?
    };
    Ok(t)
}

/// Shift-based dequantization against the single scale `s1`.
///
/// Levels are aligned to the finest cluster with a left shift
/// `q << (m_max - m)` in integer arithmetic and then multiplied once by
/// `s1 * 2^-m_max`. The result equals `q * s1 * 2^-m` bit for bit.
pub fn dequantize_kscaled(q: &Tensor, p: &KScaledParams) -> Result<Tensor, KScaledError> {
    let (_, l) = check_assignment(q, p)?;
    p.validate()?;
    let levels = q.to_i32_vec()?;
    let m_max = p.shifts.iter().copied().max().unwrap_or(0);
    let base = shifted_scale(p.s1, m_max);
    let out = levels
        .iter()
        .enumerate()
        .map(|(i, &lv)| {
            let m = p.shifts[p.assignment[group_of(p.axis, i, l)]];
            let aligned = i64::from(lv) << (m_max - m);
            aligned as f32 * base
        })
        .collect();
    Ok(Tensor::from_f32(q.dims(), out)?)
}

/// Quantize-dequantize in float arithmetic (`q * s_eff`).
pub fn fake_quantize_kscaled(y: &[f32], dims: &[usize], p: &KScaledParams) -> Vec<f32> {
    let l = dims[1];
    let (lo, hi) = (qmin(p.bits) as f32, qmax(p.bits) as f32);
    y.iter()
        .enumerate()
        .map(|(i, &x)| {
            let s = p.effective[p.assignment[group_of(p.axis, i, l)]];
            quantizer::fake_quantize_value(x, s, lo, hi)
        })
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct KScaledOptions {
    pub k: usize,
    pub bits: u8,
    pub rule: ClusterScaleRule,
    pub iters: usize,
    pub seed: u64,
}

impl Default for KScaledOptions {
    fn default() -> Self {
        Self {
            k: DEFAULT_K,
            bits: 8,
            rule: ClusterScaleRule::Search(SimilarityMetric::Cosine),
            iters: DEFAULT_KMEANS_ITERS,
            seed: 0,
        }
    }
}

/// group_stats -> kmeans_1d -> per-cluster scale -> redefine_scales.
pub fn calibrate_kscaled(
    y: &Tensor,
    axis: KAxis,
    opts: &KScaledOptions,
) -> Result<KScaledParams, KScaledError> {
    calibrate_kscaled_samples(core::slice::from_ref(y), axis, opts)
}

/// Calibrates over several samples of the same shape. Group features use the
/// peak magnitude across all samples; each cluster's scale is fit on the
/// concatenation of its members' values from every sample.
pub fn calibrate_kscaled_samples(
    samples: &[Tensor],
    axis: KAxis,
    opts: &KScaledOptions,
) -> Result<KScaledParams, KScaledError> {
    let first = samples.first().ok_or(KScaledError::NoSamples)?;
    let (c, l) = check_rank2(first)?;
    let groups = if axis == KAxis::Channel { c } else { l };
    let mut maxima = vec![0.0f32; groups];
    for s in samples {
        if s.dims() != first.dims() {
            return Err(TensorError::ShapeMismatch {
                left: first.shape(),
                right: s.shape(),
            }
            .into());
        }
        group_max_abs(s, axis, &mut maxima)?;
    }
    let features = log2_features(&maxima);
    let assignment = kmeans_1d(&features, opts.k, opts.iters, opts.seed)?;
    let k = assignment.iter().copied().max().unwrap_or(0) + 1;

    let mut members: Vec<Vec<f32>> = vec![Vec::new(); k];
    for s in samples {
        for (i, &v) in s.as_f32()?.iter().enumerate() {
            members[assignment[group_of(axis, i, l)]].push(v);
        }
    }
    let mut scales: Vec<Option<f32>> = Vec::with_capacity(k);
    for data in &members {
        let s = match quantizer::minmax_scale_slice(data, opts.bits) {
            Err(QuantError::AllZeroInput) => None,
            Err(e) => return Err(e.into()),
            Ok(mm) => Some(match opts.rule {
                ClusterScaleRule::MinMax => mm,
                ClusterScaleRule::Search(metric) => {
                    quantizer::calibrate_similarity(data, opts.bits, metric)?.0
                }
            }),
        };
        scales.push(s);
    }
    // all-zero clusters ride on the largest scale (shift 0)
    let fallback = scales.iter().flatten().copied().fold(None, |m: Option<f32>, s| {
        Some(m.map_or(s, |m| m.max(s)))
    });
    let fallback = fallback.unwrap_or_else(|| {
        log::warn!("all-zero k-scaled calibration data; using scale 1.0");
        1.0
    });
    let searched = scales.into_iter().map(|s| s.unwrap_or(fallback)).collect();
    KScaledParams::from_cluster_scales(axis, opts.bits, assignment, searched)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn group_stats_token_maxima() {
        // tokens: col 0 peaks at 8, col 1 at 1
        let y = Tensor::from_f32(&[2, 2], vec![8.0, 0.5, -3.0, -1.0]).unwrap();
        assert_eq!(group_stats(&y, KAxis::Token).unwrap(), vec![3.0, 0.0]);
        assert_eq!(group_stats(&y, KAxis::Channel).unwrap(), vec![3.0, libm::log2f(3.0)]);
    }

    #[test]
    fn group_stats_constant_and_zero() {
        let y = Tensor::full(&[3, 5], -2.0).unwrap();
        let f = group_stats(&y, KAxis::Token).unwrap();
        assert_eq!(f.len(), 5);
        assert!(f.iter().all(|&v| v == 1.0));
        let z = Tensor::zeros(&[2, 2]).unwrap();
        assert_eq!(group_stats(&z, KAxis::Channel).unwrap(), vec![ZERO_GROUP_FEATURE; 2]);
    }

    #[test]
    fn kmeans_separates_two_blobs() {
        let f = [3.32, 3.33, 3.31, -3.3, -3.2, -3.5];
        let a = kmeans_1d(&f, 2, 50, 0).unwrap();
        assert_eq!(a, vec![0, 0, 0, 1, 1, 1]);
    }

    #[test]
    fn kmeans_degenerate_k() {
        let f = [1.0, 5.0, 2.0, 9.0];
        assert_eq!(kmeans_1d(&f, 1, 50, 0).unwrap(), vec![0; 4]);
        let a = kmeans_1d(&f, 4, 50, 0).unwrap();
        assert_eq!(a, vec![3, 1, 2, 0]);
        // k reduced to the number of distinct values
        let a = kmeans_1d(&[2.0, 2.0, 7.0], 3, 50, 0).unwrap();
        assert_eq!(a, vec![1, 1, 0]);
        assert_eq!(kmeans_1d(&[], 2, 50, 0), Err(KScaledError::EmptyFeatures));
    }

    #[test]
    fn redefine_examples() {
        let (s1, m) = redefine_scales(&[0.8, 0.19]).unwrap();
        assert_eq!((s1, m.clone()), (0.8, vec![0, 2]));
        assert_relative_eq!(shifted_scale(s1, m[1]), 0.2, max_relative = 1e-6);
        assert_eq!(redefine_scales(&[0.8, 0.8]).unwrap().1, vec![0, 0]);
        assert_eq!(redefine_scales(&[1.0, 0.5, 0.25]).unwrap(), (1.0, vec![0, 1, 2]));
        assert!(redefine_scales(&[1.0, 0.0]).is_err());
        assert!(redefine_scales(&[1.0, -2.0]).is_err());
    }

    #[test]
    fn shift_clamped_at_31() {
        let (_, m) = redefine_scales(&[1.0, 1e-20]).unwrap();
        assert_eq!(m, vec![0, 31]);
    }

    fn middle_token_tensor(c: usize, l: usize) -> Tensor {
        let mut v = vec![0.0f32; c * l];
        for ch in 0..c {
            for t in 0..l {
                let base = (((ch * 7 + t * 13) % 17) as f32 / 8.5) - 1.0;
                let gain = if t >= l / 3 && t < 2 * l / 3 { 32.0 } else { 1.0 };
                v[ch * l + t] = base * gain;
            }
        }
        Tensor::from_f32(&[c, l], v).unwrap()
    }

    #[test]
    fn k1_matches_single_scale() {
        let y = middle_token_tensor(4, 12);
        let opts = KScaledOptions { k: 1, ..Default::default() };
        let p = calibrate_kscaled(&y, KAxis::Token, &opts).unwrap();
        assert_eq!(p.shifts, vec![0]);
        let (s, _) = quantizer::calibrate_similarity(y.as_f32().unwrap(), 8, SimilarityMetric::Cosine).unwrap();
        assert_eq!(p.s1, s);
        let q = quantize_kscaled(&y, &p).unwrap();
        assert_eq!(q, quantizer::quantize_at(&y, s, 8).unwrap());
    }

    #[test]
    fn kscaled_beats_minmax_on_middle_tokens() {
        let y = middle_token_tensor(6, 24);
        let v = y.as_f32().unwrap();
        let p = calibrate_kscaled(&y, KAxis::Token, &KScaledOptions::default()).unwrap();
        let deq = fake_quantize_kscaled(v, y.dims(), &p);
        let mm = quantizer::minmax_scale(&y, 8).unwrap();
        let base = quantizer::fake_quantize(v, mm, 8);
        let mse = |d: &[f32]| d.iter().zip(v).map(|(a, b)| (a - b) * (a - b)).sum::<f32>();
        assert!(mse(&deq) < mse(&base), "{} vs {}", mse(&deq), mse(&base));
    }

    #[test]
    fn dequantized_magnitude_bounded_by_group_scale() {
        let y = middle_token_tensor(5, 15);
        let p = calibrate_kscaled(&y, KAxis::Token, &KScaledOptions::default()).unwrap();
        let q = quantize_kscaled(&y, &p).unwrap();
        let d = dequantize_kscaled(&q, &p).unwrap();
        for (i, &x) in d.as_f32().unwrap().iter().enumerate() {
            let c = p.assignment[i % 15];
            let bound = shifted_scale(p.s1, p.shifts[c]) * qmax(8) as f32;
            assert!(libm::fabsf(x) <= bound);
        }
    }

    #[test]
    fn shift_dequant_equals_float_dequant() {
        let y = middle_token_tensor(5, 15);
        let p = calibrate_kscaled(&y, KAxis::Token, &KScaledOptions::default()).unwrap();
        let q = quantize_kscaled(&y, &p).unwrap();
        let d = dequantize_kscaled(&q, &p).unwrap();
        let f = fake_quantize_kscaled(y.as_f32().unwrap(), y.dims(), &p);
        let db: Vec<u32> = d.as_f32().unwrap().iter().map(|x| x.to_bits()).collect();
        let fb: Vec<u32> = f.iter().map(|x| x.to_bits()).collect();
        assert_eq!(db, fb);
    }

    #[test]
    fn constant_magnitude_gives_zero_shifts() {
        let y = Tensor::from_f32(&[2, 4], vec![1.0, -1.0, 1.0, -1.0, -1.0, 1.0, 1.0, 1.0]).unwrap();
        for k in 1..=4 {
            let opts = KScaledOptions { k, ..Default::default() };
            let p = calibrate_kscaled(&y, KAxis::Token, &opts).unwrap();
            assert!(p.shifts.iter().all(|&m| m == 0));
        }
    }

    #[test]
    fn outlier_token_isolated() {
        let (c, l) = (4, 10);
        let mut v = vec![0.0f32; c * l];
        for ch in 0..c {
            for t in 0..l {
                v[ch * l + t] = 0.3 + 0.07 * ((ch + 3 * t) % 10) as f32;
            }
        }
        v[2 * l + 6] = 50.0;
        let y = Tensor::from_f32(&[c, l], v).unwrap();
        let opts = KScaledOptions { k: 2, ..Default::default() };
        let p = calibrate_kscaled(&y, KAxis::Token, &opts).unwrap();
        let outlier_cluster = p.assignment[6];
        assert_eq!(p.assignment.iter().filter(|&&a| a == outlier_cluster).count(), 1);
        assert_eq!(p.shifts[outlier_cluster], 0);
        assert_eq!(p.effective[outlier_cluster], p.s1);
        let other = 1 - outlier_cluster;
        assert!(p.effective[other] < p.s1);
    }

    #[test]
    fn calibration_is_deterministic() {
        let y = middle_token_tensor(6, 24);
        let a = calibrate_kscaled(&y, KAxis::Channel, &KScaledOptions::default()).unwrap();
        let b = calibrate_kscaled(&y, KAxis::Channel, &KScaledOptions::default()).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn assignment_mismatch_rejected() {
        let y = middle_token_tensor(3, 6);
        let mut p = calibrate_kscaled(&y, KAxis::Token, &KScaledOptions::default()).unwrap();
        p.assignment.pop();
        assert!(matches!(
            quantize_kscaled(&y, &p),
            Err(KScaledError::AssignmentMismatch { assigned: 5, groups: 6 })
        ));
    }

    #[test]
    fn validate_catches_tampered_effective() {
        let y = middle_token_tensor(3, 6);
        let mut p = calibrate_kscaled(&y, KAxis::Token, &KScaledOptions::default()).unwrap();
        p.effective[0] *= 1.0001;
        assert!(p.validate().is_err());
    }
}
