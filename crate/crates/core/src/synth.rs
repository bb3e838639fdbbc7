//! Seeded synthetic data for the desk-scale experiments.

use alloc::vec;
use alloc::vec::Vec;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::model::middle_third;
use crate::ssm::SsmError;
use crate::tensor::Tensor;

/// Per-token maximum of middle tokens relative to edge tokens.
pub const MIDDLE_TOKEN_LEVEL: f32 = 32.0;
/// Half-width, in octaves, of the jitter on each token's maximum.
pub const TOKEN_MAX_JITTER: f32 = 0.2;

/// `[channels, tokens]` activation whose middle third is
/// [`MIDDLE_TOKEN_LEVEL`] times larger than the edges.
///
/// Every token holds its maximum `level * 2^U(-jitter, jitter)` in one
/// channel; the other entries are `N(0, 1/9)` clamped inside it.
pub fn middle_token_tensor(seed: u64, channels: usize, tokens: usize, jitter: f32) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (lo, hi) = middle_third(tokens);
    let mut v = vec![0.0f32; channels * tokens];
    for t in 0..tokens {
        let level = if (lo..hi).contains(&t) { MIDDLE_TOKEN_LEVEL } else { 1.0 };
        let j = if jitter > 0.0 { rng.random_range(-jitter..=jitter) } else { 0.0 };
        let max = level * libm::exp2f(j);
        let pin = rng.random_range(0..channels);
        for c in 0..channels {
            let z = (rng.sample::<f32, _>(StandardNormal) / 3.0).clamp(-1.0, 1.0);
            v[c * tokens + t] = if c == pin { libm::copysignf(max, z) } else { z * max };
        }
    }
    Tensor::from_f32(&[channels, tokens], v).expect("dims are positive")
}

/// Same layout with plain Gaussian tokens (`N(0, 1)` times the level), so
/// per-token maxima vary freely.
pub fn gaussian_middle_token_tensor(seed: u64, channels: usize, tokens: usize) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (lo, hi) = middle_third(tokens);
    let mut v = Vec::with_capacity(channels * tokens);
    for _ in 0..channels {
        for t in 0..tokens {
            let level = if (lo..hi).contains(&t) { MIDDLE_TOKEN_LEVEL } else { 1.0 };
            v.push(level * rng.sample::<f32, _>(StandardNormal));
        }
    }
    Tensor::from_f32(&[channels, tokens], v).expect("dims are positive")
}

/// Discretized scan operands whose FP hidden state is a given tensor.
#[derive(Clone, Debug)]
pub struct ScanCase {
    pub abar: Tensor,
    pub bbar: Tensor,
    pub c: Tensor,
    pub d_skip: Tensor,
    pub x: Tensor,
    /// Target hidden state `[C, L, D]`.
    pub h: Tensor,
}

/// Octave spreads of the rank-1 generators of [`rank1_case`].
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Rank1Spread {
    pub channel: f32,
    pub token: f32,
    pub state: f32,
    /// Relative elementwise noise `|δ| ≤ noise`.
    pub noise: f32,
}

impl Default for Rank1Spread {
    fn default() -> Self {
        Self {
            channel: 6.0,
            token: 3.0,
            state: 3.0,
            noise: 0.1,
        }
    }
}

fn octaves(rng: &mut ChaCha8Rng, n: usize, spread: f32) -> Vec<f32> {
    (0..n)
        .map(|_| libm::exp2f(rng.random_range(0.0..=spread)))
        .collect()
}

/// Rank-1-dominant hidden state `h = (r_C ⊗ r_L ⊗ r_D)(1 + δ)` together with
/// scan operands reproducing it: `Ā ∈ (0, 1)`, nonzero `x`, and
/// `B̄_t = (h_t - Ā_t h_{t-1}) / x_t`.
pub fn rank1_case(seed: u64, c: usize, l: usize, d: usize, spread: Rank1Spread) -> Result<ScanCase, SsmError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (rc, rl, rd) = (
        octaves(&mut rng, c, spread.channel),
        octaves(&mut rng, l, spread.token),
        octaves(&mut rng, d, spread.state),
    );
    let n = c * l * d;
    let mut h = Vec::with_capacity(n);
    for &a in &rc {
        for &b in &rl {
            for &e in &rd {
                let delta = if spread.noise > 0.0 {
                    rng.random_range(-spread.noise..=spread.noise)
                } else {
                    0.0
                };
                h.push(a * b * e * (1.0 + delta));
            }
        }
    }
    let abar: Vec<f32> = (0..n)
        .map(|_| libm::expf(-rng.random_range(0.05f32..0.5) * rng.random_range(0.5f32..2.0)))
        .collect();
    let x: Vec<f32> = (0..c * l)
        .map(|_| {
            let m = rng.random_range(0.5f32..1.5);
            if rng.random::<bool>() {
                m
            } else {
                -m
            }
        })
        .collect();
    let mut bbar = vec![0.0f32; n];
    for ci in 0..c {
        for t in 0..l {
            let xt = x[ci * l + t];
            for di in 0..d {
                let i = (ci * l + t) * d + di;
                let prev = if t == 0 { 0.0 } else { abar[i] * h[i - d] };
                bbar[i] = (h[i] - prev) / xt;
            }
        }
    }
    let scale = 1.0 / libm::sqrtf(d as f32);
    let cm: Vec<f32> = (0..l * d)
        .map(|_| scale * rng.sample::<f32, _>(StandardNormal))
        .collect();
    let dims = [c, l, d];
    Ok(ScanCase {
        abar: Tensor::from_f32(&dims, abar)?,
        bbar: Tensor::from_f32(&dims, bbar)?,
        c: Tensor::from_f32(&[l, d], cm)?,
        d_skip: Tensor::full(&[c], 1.0)?,
        x: Tensor::from_f32(&[c, l], x)?,
        h: Tensor::from_f32(&dims, h)?,
    })
}
