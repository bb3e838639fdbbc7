//! A single synthetic Mamba-style vision block, its quantization sites and the
//! calibration pipeline.
//!
//! Block layout, with `x` as `[C, L]` pre-embedded tokens and `E = 2C`:
//!
//! ```text
//! x ─ RMSNorm ─ in_proj ─┬─ xs ─ conv1d ─ SiLU ─ bidirectional SSM ─┐
//! │                      └─ z ─────────────────────────── SiLU ─── ⊙ ─ soft norm·gain ─ out_proj ─ + ─ out
//! └─────────────────────────────────────────────────────────────────────────────────────────────────┘
//! ```
//!
//! Patch embedding and the classifier head are not modelled.

use alloc::borrow::Cow;
use alloc::collections::BTreeMap;
use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;
use core::fmt;
use core::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::kscaled::{self, ClusterScaleRule, KAxis, KScaledError, KScaledOptions, KScaledParams};
use crate::quantizer::{self, QuantError, QuantParams, SimilarityMetric};
use crate::reparam::{self, DispFn, RepFn, ReparamError, ReparamFactors};
use crate::ssm::{self, Discretization, ProjectionSite, SsmError, SsmParams};
use crate::tensor::{self, Shape, Tensor, TensorError};

pub const CONV_WIDTH: usize = 4;
pub const EXPAND: usize = 2;
pub const NORM_EPS: f32 = 1e-5;
/// Offset of the gated-branch norm; tokens with `mean(v²) ≪ 1` pass nearly
/// unscaled while larger ones are capped at norm `sqrt(E)`.
pub const GATE_NORM_OFFSET: f32 = 1.0;
pub const DEFAULT_CALIBRATION_SAMPLES: usize = 256;
pub const DEFAULT_BITS: u8 = 8;
pub const CONFIG_VERSION: u32 = 1;

/// Gain applied to the middle third of the tokens under `MiddleTokens`.
pub const MIDDLE_TOKEN_GAIN: f32 = 24.0;
/// Row scale for the outlier channels under `HeavyChannels`.
pub const HEAVY_CHANNEL_GAIN: f32 = 8.0;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ModelError {
    #[error("model dimensions must be positive: {0:?}")]
    BadDims(VimDims),
    #[error("{what}: expected {expected}, got {actual}")]
    Shape {
        what: String,
        expected: Shape,
        actual: Shape,
    },
    #[error("quantization config has no entry for site {0:?}")]
    MissingSite(String),
    #[error("quantization config has an entry for unknown site {0:?}")]
    UnknownSite(String),
    #[error("site {site:?} cannot use {kind} parameters")]
    WrongKind { site: String, kind: &'static str },
    #[error("unsupported config version {0}")]
    UnsupportedVersion(u32),
    #[error("calibration set is empty")]
    EmptyCalibration,
    #[error("unknown {kind} {name:?}")]
    UnknownName { kind: &'static str, name: String },
    #[error("missing model tensor {0:?}")]
    MissingTensor(String),
    #[error(transparent)]
    Quant(#[from] QuantError),
    #[error(transparent)]
    KScaled(#[from] KScaledError),
    #[error(transparent)]
    Reparam(#[from] ReparamError),
    #[error(transparent)]
    Ssm(#[from] SsmError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

fn shape_err(what: &str, expected: &[usize], actual: &Tensor) -> ModelError {
    ModelError::Shape {
        what: what.to_string(),
        expected: Shape(expected.to_vec()),
        actual: actual.shape(),
    }
}

fn expect(what: &str, t: &Tensor, dims: &[usize]) -> Result<(), ModelError> {
    if t.dims() == dims {
        Ok(())
    } else {
        Err(shape_err(what, dims, t))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct VimDims {
    /// Model width `C`.
    pub channels: usize,
    /// Fixed token count `L`.
    pub tokens: usize,
    /// SSM state size `D`.
    pub state: usize,
}

impl Default for VimDims {
    fn default() -> Self {
        Self {
            channels: 8,
            tokens: 64,
            state: 8,
        }
    }
}

impl VimDims {
    pub fn new(channels: usize, tokens: usize, state: usize) -> Result<Self, ModelError> {
        let d = Self {
            channels,
            tokens,
            state,
        };
        if channels == 0 || tokens == 0 || state == 0 {
            return Err(ModelError::BadDims(d));
        }
        Ok(d)
    }

    /// SSM channel count `E`.
    pub fn inner(&self) -> usize {
        EXPAND * self.channels
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum OutlierProfile {
    #[default]
    None,
    /// Middle third of the tokens carries a large gain.
    MiddleTokens,
    /// A few conv1d and out_proj rows are scaled up.
    HeavyChannels,
}

impl OutlierProfile {
    pub const ALL: [OutlierProfile; 3] = [
        OutlierProfile::None,
        OutlierProfile::MiddleTokens,
        OutlierProfile::HeavyChannels,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            OutlierProfile::None => "none",
            OutlierProfile::MiddleTokens => "middle-tokens",
            OutlierProfile::HeavyChannels => "heavy-channels",
        }
    }
}

impl fmt::Display for OutlierProfile {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for OutlierProfile {
    type Err = ModelError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let norm = s.to_ascii_lowercase().replace('_', "-");
        Self::ALL
            .into_iter()
            .find(|p| p.as_str() == norm)
            .ok_or_else(|| ModelError::UnknownName {
                kind: "outlier profile",
                name: s.to_string(),
            })
    }
}

/// Scan direction of the bidirectional SSM.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Direction {
    Forward,
    Backward,
}

/// Site ids belonging to one scan direction.
#[derive(Debug)]
pub struct DirSites {
    pub dt: &'static str,
    pub b: &'static str,
    pub c: &'static str,
    pub h: &'static str,
    pub w_delta: &'static str,
    pub w_b: &'static str,
    pub w_c: &'static str,
}

const FWD_SITES: DirSites = DirSites {
    dt: "ssm.fwd.dt",
    b: "ssm.fwd.b",
    c: "ssm.fwd.c",
    h: "ssm.fwd.h",
    w_delta: "ssm.fwd.w_delta",
    w_b: "ssm.fwd.w_b",
    w_c: "ssm.fwd.w_c",
};

const BWD_SITES: DirSites = DirSites {
    dt: "ssm.bwd.dt",
    b: "ssm.bwd.b",
    c: "ssm.bwd.c",
    h: "ssm.bwd.h",
    w_delta: "ssm.bwd.w_delta",
    w_b: "ssm.bwd.w_b",
    w_c: "ssm.bwd.w_c",
};

impl Direction {
    pub const BOTH: [Direction; 2] = [Direction::Forward, Direction::Backward];

    pub fn as_str(self) -> &'static str {
        match self {
            Direction::Forward => "fwd",
            Direction::Backward => "bwd",
        }
    }

    pub fn sites(self) -> &'static DirSites {
        match self {
            Direction::Forward => &FWD_SITES,
            Direction::Backward => &BWD_SITES,
        }
    }
}

pub const SITE_IN_PROJ: &str = "in_proj.out";
pub const SITE_CONV1D: &str = "conv1d.out";
pub const SITE_SSM_Y: &str = "ssm.y";
pub const SITE_OUT_PROJ: &str = "out_proj.out";

/// Activation site ids in forward order.
pub const ACTIVATION_SITES: [&str; 12] = [
    SITE_IN_PROJ,
    SITE_CONV1D,
    FWD_SITES.dt,
    FWD_SITES.b,
    FWD_SITES.c,
    FWD_SITES.h,
    BWD_SITES.dt,
    BWD_SITES.b,
    BWD_SITES.c,
    BWD_SITES.h,
    SITE_SSM_Y,
    SITE_OUT_PROJ,
];

pub const WEIGHT_IN_PROJ: &str = "in_proj.weight";
pub const WEIGHT_CONV1D: &str = "conv1d.weight";
pub const WEIGHT_OUT_PROJ: &str = "out_proj.weight";

pub const WEIGHT_SITES: [&str; 9] = [
    WEIGHT_IN_PROJ,
    WEIGHT_CONV1D,
    FWD_SITES.w_delta,
    FWD_SITES.w_b,
    FWD_SITES.w_c,
    BWD_SITES.w_delta,
    BWD_SITES.w_b,
    BWD_SITES.w_c,
    WEIGHT_OUT_PROJ,
];

#[derive(Clone, Debug, PartialEq)]
pub struct VimBlock {
    pub dims: VimDims,
    pub seed: u64,
    pub profile: OutlierProfile,
    pub discretization: Discretization,
    /// RMSNorm gain, `[C]`.
    pub norm_weight: Tensor,
    /// Per-token gain on the gated branch, `[L]`.
    pub token_gain: Tensor,
    /// `[2E, C]`; rows `0..E` feed the SSM branch, `E..2E` the gate.
    pub in_proj: Tensor,
    /// Depthwise causal kernel, `[E, CONV_WIDTH]`.
    pub conv1d: Tensor,
    pub fwd: SsmParams,
    pub bwd: SsmParams,
    /// `[C, E]`.
    pub out_proj: Tensor,
}

fn normal_tensor(rng: &mut ChaCha8Rng, dims: &[usize], std: f32) -> Tensor {
    let n = dims.iter().product();
    let v = (0..n)
        .map(|_| rng.sample::<f32, _>(StandardNormal) * std)
        .collect();
    Tensor::from_f32(dims, v).expect("dims match generated length")
}

fn scale_row(t: &mut Tensor, row: usize, gain: f32) {
    let cols = t.dims()[1];
    let v = t.as_f32_mut().expect("model tensors are f32");
    v[row * cols..(row + 1) * cols].iter_mut().for_each(|x| *x *= gain);
}

fn synthetic_ssm(rng: &mut ChaCha8Rng, e: usize, d: usize) -> SsmParams {
    let inv = 1.0 / libm::sqrtf(e as f32);
    let a = (0..e * d).map(|i| -((i % d + 1) as f32)).collect();
    SsmParams {
        a: Tensor::from_f32(&[e, d], a).expect("dims"),
        w_delta: normal_tensor(rng, &[e, e], 0.5 * inv),
        w_b: normal_tensor(rng, &[d, e], 0.5 * inv),
        w_c: normal_tensor(rng, &[d, e], 0.5 * inv),
        d_skip: Tensor::full(&[e], 1.0).expect("dims"),
    }
}

/// Deterministic block weights from `seed`.
pub fn build_synthetic(seed: u64, dims: VimDims, profile: OutlierProfile) -> Result<VimBlock, ModelError> {
    let dims = VimDims::new(dims.channels, dims.tokens, dims.state)?;
    let (c, l, d, e) = (dims.channels, dims.tokens, dims.state, dims.inner());
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    let norm_weight = normal_tensor(&mut rng, &[c], 0.1).map(|g| 1.0 + g)?;
    let in_proj = normal_tensor(&mut rng, &[2 * e, c], 1.0 / libm::sqrtf(c as f32));
    let mut conv1d = normal_tensor(&mut rng, &[e, CONV_WIDTH], 0.5);
    let fwd = synthetic_ssm(&mut rng, e, d);
    let bwd = synthetic_ssm(&mut rng, e, d);
    let mut out_proj = normal_tensor(&mut rng, &[c, e], 1.0 / libm::sqrtf(e as f32));

    let mut gain = vec![1.0f32; l];
    match profile {
        OutlierProfile::None => {}
        OutlierProfile::MiddleTokens => {
            let (lo, hi) = middle_third(l);
            gain[lo..hi].iter_mut().for_each(|g| *g = MIDDLE_TOKEN_GAIN);
        }
        OutlierProfile::HeavyChannels => {
            let n_conv = (e / 8).max(1);
            for _ in 0..n_conv {
                let row = rng.random_range(0..e);
                scale_row(&mut conv1d, row, HEAVY_CHANNEL_GAIN);
            }
            let row = rng.random_range(0..c);
            scale_row(&mut out_proj, row, HEAVY_CHANNEL_GAIN);
        }
    }

    Ok(VimBlock {
        dims,
        seed,
        profile,
        discretization: Discretization::default(),
        norm_weight,
        token_gain: Tensor::from_f32(&[l], gain)?,
        in_proj,
        conv1d,
        fwd,
        bwd,
        out_proj,
    })
}

/// Token range `[lo, hi)` of the middle third.
pub fn middle_third(l: usize) -> (usize, usize) {
    (l / 3, l - l / 3)
}

/// Seeded unit-variance `[C, L]` token sequences.
pub fn synthetic_inputs(dims: VimDims, count: usize, seed: u64) -> Vec<Tensor> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..count)
        .map(|_| normal_tensor(&mut rng, &[dims.channels, dims.tokens], 1.0))
        .collect()
}

fn silu(x: f32) -> f32 {
    x / (1.0 + libm::expf(-x))
}

/// Activation traces keyed by site id.
pub type Taps = BTreeMap<String, Tensor>;

impl VimBlock {
    /// Named model tensors in a fixed order.
    pub fn tensors(&self) -> Vec<(&'static str, &Tensor)> {
        vec![
            ("norm.weight", &self.norm_weight),
            ("token_gain", &self.token_gain),
            (WEIGHT_IN_PROJ, &self.in_proj),
            (WEIGHT_CONV1D, &self.conv1d),
            ("ssm.fwd.a", &self.fwd.a),
            (FWD_SITES.w_delta, &self.fwd.w_delta),
            (FWD_SITES.w_b, &self.fwd.w_b),
            (FWD_SITES.w_c, &self.fwd.w_c),
            ("ssm.fwd.d", &self.fwd.d_skip),
            ("ssm.bwd.a", &self.bwd.a),
            (BWD_SITES.w_delta, &self.bwd.w_delta),
            (BWD_SITES.w_b, &self.bwd.w_b),
            (BWD_SITES.w_c, &self.bwd.w_c),
            ("ssm.bwd.d", &self.bwd.d_skip),
            (WEIGHT_OUT_PROJ, &self.out_proj),
        ]
    }

    /// Inverse of [`VimBlock::tensors`].
    pub fn from_tensors(
        dims: VimDims,
        seed: u64,
        profile: OutlierProfile,
        discretization: Discretization,
        mut get: impl FnMut(&str) -> Option<Tensor>,
    ) -> Result<Self, ModelError> {
        let mut take = |name: &str| get(name).ok_or_else(|| ModelError::MissingTensor(name.to_string()));
        let m = Self {
            dims,
            seed,
            profile,
            discretization,
            norm_weight: take("norm.weight")?,
            token_gain: take("token_gain")?,
            in_proj: take(WEIGHT_IN_PROJ)?,
            conv1d: take(WEIGHT_CONV1D)?,
            fwd: SsmParams {
                a: take("ssm.fwd.a")?,
                w_delta: take(FWD_SITES.w_delta)?,
                w_b: take(FWD_SITES.w_b)?,
                w_c: take(FWD_SITES.w_c)?,
                d_skip: take("ssm.fwd.d")?,
            },
            bwd: SsmParams {
                a: take("ssm.bwd.a")?,
                w_delta: take(BWD_SITES.w_delta)?,
                w_b: take(BWD_SITES.w_b)?,
                w_c: take(BWD_SITES.w_c)?,
                d_skip: take("ssm.bwd.d")?,
            },
            out_proj: take(WEIGHT_OUT_PROJ)?,
        };
        m.validate()?;
        Ok(m)
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let d = VimDims::new(self.dims.channels, self.dims.tokens, self.dims.state)?;
        let (c, l, s, e) = (d.channels, d.tokens, d.state, d.inner());
        expect("norm.weight", &self.norm_weight, &[c])?;
        expect("token_gain", &self.token_gain, &[l])?;
        expect(WEIGHT_IN_PROJ, &self.in_proj, &[2 * e, c])?;
        expect(WEIGHT_CONV1D, &self.conv1d, &[e, CONV_WIDTH])?;
        expect(WEIGHT_OUT_PROJ, &self.out_proj, &[c, e])?;
        for p in [&self.fwd, &self.bwd] {
            expect("ssm A", &p.a, &[e, s])?;
            p.validate()?;
        }
        Ok(())
    }

    pub fn ssm_params(&self, dir: Direction) -> &SsmParams {
        match dir {
            Direction::Forward => &self.fwd,
            Direction::Backward => &self.bwd,
        }
    }

    /// Weight tensor behind a weight site id.
    pub fn weight(&self, site: &str) -> Option<&Tensor> {
        Some(match site {
            WEIGHT_IN_PROJ => &self.in_proj,
            WEIGHT_CONV1D => &self.conv1d,
            WEIGHT_OUT_PROJ => &self.out_proj,
            _ => {
                return Direction::BOTH.into_iter().find_map(|dir| {
                    let (s, p) = (dir.sites(), self.ssm_params(dir));
                    match site {
                        x if x == s.w_delta => Some(&p.w_delta),
                        x if x == s.w_b => Some(&p.w_b),
                        x if x == s.w_c => Some(&p.w_c),
                        _ => None,
                    }
                })
            }
        })
    }

    /// Full-precision forward pass recording every activation site.
    pub fn forward_fp(&self, x: &Tensor) -> Result<(Tensor, Taps), ModelError> {
        let mut taps = Taps::new();
        let y = self.run(x, None, Some(&mut taps))?;
        Ok((y, taps))
    }

    /// Forward pass with fake quantization at every configured site.
    pub fn forward_quant(&self, qc: &QuantConfig, x: &Tensor) -> Result<Tensor, ModelError> {
        qc.check(self)?;
        self.run(x, Some(qc), None)
    }

    /// As [`VimBlock::forward_quant`], also recording the (quantized) taps.
    /// Hidden-state taps are in the original coordinates even when the scan
    /// ran reparameterized.
    pub fn forward_quant_taps(&self, qc: &QuantConfig, x: &Tensor) -> Result<(Tensor, Taps), ModelError> {
        qc.check(self)?;
        let mut taps = Taps::new();
        let y = self.run(x, Some(qc), Some(&mut taps))?;
        Ok((y, taps))
    }

    fn run(&self, x: &Tensor, qc: Option<&QuantConfig>, taps: Option<&mut Taps>) -> Result<Tensor, ModelError> {
        let (c, l, e) = (self.dims.channels, self.dims.tokens, self.dims.inner());
        expect("input", x, &[c, l])?;
        let mut pass = Pass { qc, taps };

        let xn = self.rms_norm(x)?;
        let w_in = pass.weight(WEIGHT_IN_PROJ, &self.in_proj)?;
        let mut u = tensor::matmul(&w_in, &xn)?;
        pass.act(SITE_IN_PROJ, &mut u)?;
        let uv = u.as_f32()?;
        let xs = Tensor::from_f32(&[e, l], uv[..e * l].to_vec())?;
        let z = &uv[e * l..];

        let w_conv = pass.weight(WEIGHT_CONV1D, &self.conv1d)?;
        let mut xc = causal_conv(&xs, &w_conv)?;
        pass.act(SITE_CONV1D, &mut xc)?;
        let xa = xc.map(silu)?;

        let y_f = self.direction(Direction::Forward, &xa, &mut pass)?;
        let y_b = self.direction(Direction::Backward, &ssm::reverse_tokens(&xa)?, &mut pass)?;
        let mut ys = tensor::add(&y_f, &ssm::reverse_tokens(&y_b)?)?;
        pass.act(SITE_SSM_Y, &mut ys)?;

        let gated = self.gated_norm(ys.as_f32()?, z)?;
        let w_out = pass.weight(WEIGHT_OUT_PROJ, &self.out_proj)?;
        let mut o = tensor::matmul(&w_out, &gated)?;
        pass.act(SITE_OUT_PROJ, &mut o)?;
        Ok(tensor::add(x, &o)?)
    }

    fn rms_norm(&self, x: &Tensor) -> Result<Tensor, ModelError> {
        let (c, l) = (self.dims.channels, self.dims.tokens);
        let (xv, g) = (x.as_f32()?, self.norm_weight.as_f32()?);
        let mut out = vec![0.0f32; c * l];
        for t in 0..l {
            let ms = (0..c).map(|ci| xv[ci * l + t] * xv[ci * l + t]).sum::<f32>() / c as f32;
            let inv = 1.0 / libm::sqrtf(ms + NORM_EPS);
            for ci in 0..c {
                out[ci * l + t] = xv[ci * l + t] * inv * g[ci];
            }
        }
        Ok(Tensor::from_f32(&[c, l], out)?)
    }

    /// `v / sqrt(mean(v²) + GATE_NORM_OFFSET)` per token with `v = y ⊙ SiLU(z)`,
    /// scaled by the token gain.
    fn gated_norm(&self, y: &[f32], z: &[f32]) -> Result<Tensor, ModelError> {
        let (e, l) = (self.dims.inner(), self.dims.tokens);
        let tg = self.token_gain.as_f32()?;
        let v: Vec<f32> = y.iter().zip(z).map(|(&a, &b)| a * silu(b)).collect();
        let mut out = vec![0.0f32; e * l];
        for t in 0..l {
            let ms = (0..e).map(|ch| v[ch * l + t] * v[ch * l + t]).sum::<f32>() / e as f32;
            let k = tg[t] / libm::sqrtf(ms + GATE_NORM_OFFSET);
            for ch in 0..e {
                out[ch * l + t] = v[ch * l + t] * k;
            }
        }
        Ok(Tensor::from_f32(&[e, l], out)?)
    }

    fn direction(&self, dir: Direction, x: &Tensor, pass: &mut Pass<'_>) -> Result<Tensor, ModelError> {
        let sites = dir.sites();
        let base = self.ssm_params(dir);
        let hidden = pass.hidden(sites.h)?;
        let factors = match hidden {
            Some(SiteParams::HiddenState {
                reparam: Some(f), ..
            }) => Some(f),
            _ => None,
        };
        let folded;
        let p_src = match factors {
            Some(f) => {
                folded = reparam::fold_params(base, &f.r_d)?;
                &folded
            }
            None => base,
        };
        let p = SsmParams {
            a: p_src.a.clone(),
            w_delta: pass.weight(sites.w_delta, &p_src.w_delta)?.into_owned(),
            w_b: pass.weight(sites.w_b, &p_src.w_b)?.into_owned(),
            w_c: pass.weight(sites.w_c, &p_src.w_c)?.into_owned(),
            d_skip: p_src.d_skip.clone(),
        };

        let mut hook_err = None;
        let proj = ssm::project_delta_b_c_with(x, &p, |site, t| {
            if hook_err.is_some() {
                return;
            }
            let id = match site {
                ProjectionSite::Delta => sites.dt,
                ProjectionSite::B => sites.b,
                ProjectionSite::C => sites.c,
            };
            if let Err(err) = pass.act(id, t) {
                hook_err = Some(err);
            }
        })?;
        if let Some(err) = hook_err {
            return Err(err);
        }

        let hq = match hidden {
            Some(SiteParams::HiddenState { scale, bits, .. }) => Some(QuantParams::new(*scale, *bits)?),
            _ => None,
        };
        let (h, y) = if let Some(f) = factors {
            let tr = reparam::reparam_scan_projected(x, &proj, &p, f, hq.as_ref(), self.discretization)?;
            let h = if pass.taps.is_some() { Some(tr.h(f)?) } else { None };
            (h, tr.y)
        } else {
            let (abar, bbar) = ssm::discretize(&proj.delta, &p.a, &proj.b, self.discretization)?;
            let tr = match &hq {
                Some(q) => reparam::naive_quantized_scan(&abar, &bbar, &proj.c, &p.d_skip, x, q)?,
                None => ssm::selective_scan(&abar, &bbar, &proj.c, &p.d_skip, x)?,
            };
            (Some(tr.h), tr.y)
        };
        if let Some(h) = h {
            pass.record(sites.h, h);
        }
        Ok(y)
    }
}

/// Depthwise causal convolution: `out[e,t] = Σ_k w[e,k] · x[e, t + k - (W-1)]`.
fn causal_conv(x: &Tensor, w: &Tensor) -> Result<Tensor, ModelError> {
    let (e, l) = (x.dims()[0], x.dims()[1]);
    expect(WEIGHT_CONV1D, w, &[e, CONV_WIDTH])?;
    let (xv, wv) = (x.as_f32()?, w.as_f32()?);
    let mut out = vec![0.0f32; e * l];
    for ch in 0..e {
        let wr = &wv[ch * CONV_WIDTH..(ch + 1) * CONV_WIDTH];
        for t in 0..l {
            let mut acc = 0.0f32;
            for (k, &wk) in wr.iter().enumerate() {
                let back = CONV_WIDTH - 1 - k;
                if t >= back {
                    acc += wk * xv[ch * l + t - back];
                }
            }
            out[ch * l + t] = acc;
        }
    }
    Ok(Tensor::from_f32(&[e, l], out)?)
}

struct Pass<'a> {
    qc: Option<&'a QuantConfig>,
    taps: Option<&'a mut Taps>,
}

impl<'a> Pass<'a> {
    fn weight<'w>(&self, site: &str, w: &'w Tensor) -> Result<Cow<'w, Tensor>, ModelError> {
        let Some(qc) = self.qc else {
            return Ok(Cow::Borrowed(w));
        };
        let params = qc
            .weights
            .get(site)
            .ok_or_else(|| ModelError::MissingSite(site.to_string()))?;
        if matches!(params, SiteParams::PassThrough) {
            return Ok(Cow::Borrowed(w));
        }
        let mut q = w.clone();
        params.apply(site, &mut q)?;
        Ok(Cow::Owned(q))
    }

    fn act(&mut self, site: &str, t: &mut Tensor) -> Result<(), ModelError> {
        if let Some(qc) = self.qc {
            qc.sites
                .get(site)
                .ok_or_else(|| ModelError::MissingSite(site.to_string()))?
                .apply(site, t)?;
        }
        if let Some(taps) = self.taps.as_deref_mut() {
            taps.insert(site.to_string(), t.clone());
        }
        Ok(())
    }

    fn record(&mut self, site: &str, t: Tensor) {
        if let Some(taps) = self.taps.as_deref_mut() {
            taps.insert(site.to_string(), t);
        }
    }

    fn hidden(&self, site: &str) -> Result<Option<&'a SiteParams>, ModelError> {
        match self.qc {
            None => Ok(None),
            Some(qc) => qc
                .sites
                .get(site)
                .map(Some)
                .ok_or_else(|| ModelError::MissingSite(site.to_string())),
        }
    }
}

/// Quantizer attached to one site.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum SiteParams {
    /// Identity; the infinite-bit sentinel.
    PassThrough,
    MinMax { scale: f32, bits: u8 },
    Similarity {
        scale: f32,
        bits: u8,
        metric: SimilarityMetric,
        score: f32,
    },
    KScaled(KScaledParams),
    /// Per-step hidden-state quantizer, optionally on the smoothed state.
    HiddenState {
        scale: f32,
        bits: u8,
        reparam: Option<ReparamFactors>,
    },
}

impl SiteParams {
    pub fn kind(&self) -> &'static str {
        match self {
            SiteParams::PassThrough => "pass_through",
            SiteParams::MinMax { .. } => "min_max",
            SiteParams::Similarity { .. } => "similarity",
            SiteParams::KScaled(_) => "k_scaled",
            SiteParams::HiddenState { .. } => "hidden_state",
        }
    }

    /// Fake-quantizes `t` in place.
    pub fn apply(&self, site: &str, t: &mut Tensor) -> Result<(), ModelError> {
        match self {
            SiteParams::PassThrough => Ok(()),
            SiteParams::MinMax { scale, bits } | SiteParams::Similarity { scale, bits, .. } => {
                quantizer::fake_quantize_in_place(t.as_f32_mut()?, *scale, *bits);
                Ok(())
            }
            SiteParams::KScaled(p) => {
                check_kscaled_dims(site, p, t.dims())?;
                let q = kscaled::fake_quantize_kscaled(t.as_f32()?, t.dims(), p);
                t.as_f32_mut()?.copy_from_slice(&q);
                Ok(())
            }
            SiteParams::HiddenState { .. } => Err(ModelError::WrongKind {
                site: site.to_string(),
                kind: self.kind(),
            }),
        }
    }
}

fn check_kscaled_dims(site: &str, p: &KScaledParams, dims: &[usize]) -> Result<(), ModelError> {
    let groups = match (p.axis, dims) {
        (KAxis::Channel, &[c, _]) => c,
        (KAxis::Token, &[_, l]) => l,
        _ => {
            return Err(ModelError::WrongKind {
                site: site.to_string(),
                kind: "k_scaled",
            })
        }
    };
    if p.assignment.len() != groups {
        return Err(KScaledError::AssignmentMismatch {
            assigned: p.assignment.len(),
            groups,
        }
        .into());
    }
    p.validate()?;
    Ok(())
}

/// Calibration recipe.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Policy {
    /// Every site left in full precision.
    PassThrough,
    /// Per-tensor MinMax everywhere.
    Baseline,
    /// Per-tensor similarity search at conv1d and out_proj.
    Similarity,
    /// k-scaled MinMax at conv1d (channel-wise) and out_proj (token-wise).
    #[serde(rename = "kscaled")]
    KScaled,
    /// k-scaled with similarity search plus hidden-state reparameterization.
    #[default]
    Ours,
    /// `Ours` with a plain MinMax hidden state.
    #[serde(rename = "ours-noreparam")]
    OursNoReparam,
}

impl Policy {
    pub const ALL: [Policy; 6] = [
        Policy::PassThrough,
        Policy::Baseline,
        Policy::Similarity,
        Policy::KScaled,
        Policy::Ours,
        Policy::OursNoReparam,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Policy::PassThrough => "pass-through",
            Policy::Baseline => "baseline",
            Policy::Similarity => "similarity",
            Policy::KScaled => "kscaled",
            Policy::Ours => "ours",
            Policy::OursNoReparam => "ours-noreparam",
        }
    }

    fn reparam(self) -> bool {
        self == Policy::Ours
    }
}

impl fmt::Display for Policy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Policy {
    type Err = ModelError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let norm = s.to_ascii_lowercase().replace('_', "-");
        Self::ALL
            .into_iter()
            .find(|p| p.as_str() == norm)
            .ok_or_else(|| ModelError::UnknownName {
                kind: "policy",
                name: s.to_string(),
            })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QuantConfig {
    pub version: u32,
    pub policy: Policy,
    pub weight_bits: u8,
    pub act_bits: u8,
    pub weights: BTreeMap<String, SiteParams>,
    pub sites: BTreeMap<String, SiteParams>,
}

impl QuantConfig {
    /// Identity quantizers at every site.
    pub fn pass_through() -> Self {
        let all = |ids: &[&str]| ids.iter().map(|s| (s.to_string(), SiteParams::PassThrough)).collect();
        Self {
            version: CONFIG_VERSION,
            policy: Policy::PassThrough,
            weight_bits: DEFAULT_BITS,
            act_bits: DEFAULT_BITS,
            weights: all(&WEIGHT_SITES),
            sites: all(&ACTIVATION_SITES),
        }
    }

    /// Checks that the site sets match the model exactly and that every
    /// entry fits its site.
    pub fn check(&self, m: &VimBlock) -> Result<(), ModelError> {
        if self.version != CONFIG_VERSION {
            return Err(ModelError::UnsupportedVersion(self.version));
        }
        check_keys(&self.weights, &WEIGHT_SITES)?;
        check_keys(&self.sites, &ACTIVATION_SITES)?;
        for (site, p) in &self.weights {
            match p {
                SiteParams::PassThrough | SiteParams::MinMax { .. } | SiteParams::Similarity { .. } => {
                    check_scalar(p)?
                }
                _ => {
                    return Err(ModelError::WrongKind {
                        site: site.clone(),
                        kind: p.kind(),
                    })
                }
            }
        }
        let (c, l, d, e) = (m.dims.channels, m.dims.tokens, m.dims.state, m.dims.inner());
        for (site, p) in &self.sites {
            let is_h = Direction::BOTH.iter().any(|dir| dir.sites().h == site);
            match p {
                SiteParams::HiddenState { scale, bits, reparam } if is_h => {
                    QuantParams::new(*scale, *bits)?;
                    if let Some(f) = reparam {
                        f.validate(e, l, d)?;
                    }
                }
                SiteParams::HiddenState { .. } => {
                    return Err(ModelError::WrongKind {
                        site: site.clone(),
                        kind: p.kind(),
                    })
                }
                SiteParams::PassThrough => {}
                _ if is_h => {
                    return Err(ModelError::WrongKind {
                        site: site.clone(),
                        kind: p.kind(),
                    })
                }
                SiteParams::KScaled(kp) => {
                    let dims = match site.as_str() {
                        SITE_CONV1D | SITE_SSM_Y => [e, l],
                        SITE_IN_PROJ => [2 * e, l],
                        SITE_OUT_PROJ => [c, l],
                        _ => {
                            return Err(ModelError::WrongKind {
                                site: site.clone(),
                                kind: p.kind(),
                            })
                        }
                    };
                    check_kscaled_dims(site, kp, &dims)?;
                }
                _ => check_scalar(p)?,
            }
        }
        Ok(())
    }

    /// Reparameterization factors configured for `dir`, if any.
    pub fn factors(&self, dir: Direction) -> Option<&ReparamFactors> {
        match self.sites.get(dir.sites().h) {
            Some(SiteParams::HiddenState { reparam, .. }) => reparam.as_ref(),
            _ => None,
        }
    }

    /// A full-precision weight or tap of `site` in the coordinates this
    /// config quantizes it in: `r_D`-folded for the B/C projections of a
    /// reparameterized direction, unchanged elsewhere.
    pub fn to_config_coords(&self, site: &str, t: &Tensor) -> Result<Tensor, ModelError> {
        for dir in Direction::BOTH {
            let s = dir.sites();
            if let Some(f) = self.factors(dir) {
                if site == s.b || site == s.w_b {
                    return fold_rows(t, &f.r_d, true);
                }
                if site == s.c || site == s.w_c {
                    return fold_rows(t, &f.r_d, false);
                }
            }
        }
        Ok(t.clone())
    }
}

fn check_scalar(p: &SiteParams) -> Result<(), ModelError> {
    if let SiteParams::MinMax { scale, bits } | SiteParams::Similarity { scale, bits, .. } = p {
        QuantParams::new(*scale, *bits)?;
    }
    Ok(())
}

fn check_keys(map: &BTreeMap<String, SiteParams>, expected: &[&str]) -> Result<(), ModelError> {
    if let Some(k) = map.keys().find(|k| !expected.contains(&k.as_str())) {
        return Err(ModelError::UnknownSite(k.clone()));
    }
    if let Some(k) = expected.iter().find(|k| !map.contains_key(**k)) {
        return Err(ModelError::MissingSite(k.to_string()));
    }
    Ok(())
}

/// Calibration inputs; all share one shape.
#[derive(Clone, Debug, PartialEq)]
pub struct CalibrationSet {
    pub samples: Vec<Tensor>,
    pub seed: u64,
}

impl CalibrationSet {
    pub fn new(samples: Vec<Tensor>, seed: u64) -> Result<Self, ModelError> {
        let first = samples.first().ok_or(ModelError::EmptyCalibration)?;
        if let Some(bad) = samples.iter().find(|s| s.dims() != first.dims()) {
            return Err(shape_err("calibration sample", first.dims(), bad));
        }
        Ok(Self { samples, seed })
    }

    /// `count` seeded unit-variance samples shaped for `dims`.
    pub fn synthetic(dims: VimDims, count: usize, seed: u64) -> Result<Self, ModelError> {
        Self::new(synthetic_inputs(dims, count, seed), seed)
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CalibrationOptions {
    pub policy: Policy,
    pub weight_bits: u8,
    pub act_bits: u8,
    pub k: usize,
    pub metric: SimilarityMetric,
    pub rep: RepFn,
    pub disp: DispFn,
    /// Seed for k-means reseeding.
    pub seed: u64,
}

impl Default for CalibrationOptions {
    fn default() -> Self {
        Self {
            policy: Policy::Ours,
            weight_bits: DEFAULT_BITS,
            act_bits: DEFAULT_BITS,
            k: kscaled::DEFAULT_K,
            metric: SimilarityMetric::Cosine,
            rep: RepFn::Mean,
            disp: DispFn::Std,
            seed: 0,
        }
    }
}

impl CalibrationOptions {
    pub fn with_policy(policy: Policy) -> Self {
        Self {
            policy,
            ..Self::default()
        }
    }
}

/// Full-precision taps of every calibration sample.
pub fn collect_taps(m: &VimBlock, cs: &CalibrationSet) -> Result<Vec<Taps>, ModelError> {
    if cs.is_empty() {
        return Err(ModelError::EmptyCalibration);
    }
    if cs.len() < 8 {
        log::warn!("calibrating on only {} sample(s)", cs.len());
    }
    cs.samples.iter().map(|x| Ok(m.forward_fp(x)?.1)).collect()
}

/// Runs the full-precision model over `cs` and assigns a quantizer to every
/// site according to `opts.policy`.
pub fn calibrate(m: &VimBlock, cs: &CalibrationSet, opts: &CalibrationOptions) -> Result<QuantConfig, ModelError> {
    let taps = collect_taps(m, cs)?;
    calibrate_from_taps(m, &taps, opts)
}

/// [`calibrate`] on precomputed taps.
pub fn calibrate_from_taps(
    m: &VimBlock,
    taps: &[Taps],
    opts: &CalibrationOptions,
) -> Result<QuantConfig, ModelError> {
    if opts.policy == Policy::PassThrough {
        return Ok(QuantConfig {
            weight_bits: opts.weight_bits,
            act_bits: opts.act_bits,
            ..QuantConfig::pass_through()
        });
    }
    if taps.is_empty() {
        return Err(ModelError::EmptyCalibration);
    }
    let (wb, ab) = (opts.weight_bits, opts.act_bits);
    QuantParams::new(1.0, wb)?;
    QuantParams::new(1.0, ab)?;

    let mut factors: BTreeMap<&str, ReparamFactors> = BTreeMap::new();
    if opts.policy.reparam() {
        for dir in Direction::BOTH {
            let h = site_samples(taps, dir.sites().h)?;
            factors.insert(dir.sites().h, reparam::factors_from_calibration(&h, opts.rep, opts.disp)?);
        }
    }

    let mut weights = BTreeMap::new();
    for site in WEIGHT_SITES {
        let w = m.weight(site).expect("weight sites resolve");
        let folded = Direction::BOTH.into_iter().find_map(|dir| {
            let s = dir.sites();
            let f = factors.get(s.h)?;
            if site == s.w_b {
                Some(fold_rows(w, &f.r_d, true))
            } else if site == s.w_c {
                Some(fold_rows(w, &f.r_d, false))
            } else {
                None
            }
        });
        let w = match folded {
            Some(t) => t?,
            None => w.clone(),
        };
        let scale = quantizer::minmax_scale_or_unit(w.as_f32()?, wb)?;
        weights.insert(site.to_string(), SiteParams::MinMax { scale, bits: wb });
    }

    let kopts = |rule| KScaledOptions {
        k: opts.k,
        bits: ab,
        rule,
        seed: opts.seed,
        ..KScaledOptions::default()
    };
    let mut sites = BTreeMap::new();
    for site in ACTIVATION_SITES {
        let mut samples = site_samples(taps, site)?;
        let h_dir = Direction::BOTH.into_iter().find(|d| d.sites().h == site);
        // projection outputs feeding a reparameterized scan come from folded weights
        for dir in Direction::BOTH {
            let s = dir.sites();
            if let Some(f) = factors.get(s.h) {
                if site == s.b || site == s.c {
                    for t in samples.iter_mut() {
                        *t = fold_rows(t, &f.r_d, site == s.b)?;
                    }
                }
            }
        }
        let params = if let Some(dir) = h_dir {
            match factors.get(dir.sites().h) {
                Some(f) => {
                    let smoothed = samples
                        .iter()
                        .map(|h| reparam::smooth_hidden(h, f))
                        .collect::<Result<Vec<_>, _>>()?;
                    let (scale, _) = quantizer::calibrate_similarity(&concat(&smoothed)?, ab, opts.metric)?;
                    SiteParams::HiddenState {
                        scale,
                        bits: ab,
                        reparam: Some(f.clone()),
                    }
                }
                None => SiteParams::HiddenState {
                    scale: envelope_scale(&samples, ab)?,
                    bits: ab,
                    reparam: None,
                },
            }
        } else {
            let axis = match site {
                SITE_CONV1D => Some(KAxis::Channel),
                SITE_OUT_PROJ => Some(KAxis::Token),
                _ => None,
            };
            match (opts.policy, axis) {
                (_, None) | (Policy::Baseline, _) => SiteParams::MinMax {
                    scale: envelope_scale(&samples, ab)?,
                    bits: ab,
                },
                (Policy::Similarity, Some(_)) => {
                    let data = concat(&samples)?;
                    match quantizer::calibrate_similarity(&data, ab, opts.metric) {
                        Ok((scale, score)) => SiteParams::Similarity {
                            scale,
                            bits: ab,
                            metric: opts.metric,
                            score,
                        },
                        Err(QuantError::AllZeroInput | QuantError::ZeroNorm) => SiteParams::MinMax {
                            scale: envelope_scale(&samples, ab)?,
                            bits: ab,
                        },
                        Err(e) => return Err(e.into()),
                    }
                }
                (Policy::KScaled, Some(axis)) => SiteParams::KScaled(kscaled::calibrate_kscaled_samples(
                    &samples,
                    axis,
                    &kopts(ClusterScaleRule::MinMax),
                )?),
                (_, Some(axis)) => SiteParams::KScaled(kscaled::calibrate_kscaled_samples(
                    &samples,
                    axis,
                    &kopts(ClusterScaleRule::Search(opts.metric)),
                )?),
            }
        };
        sites.insert(site.to_string(), params);
    }

    Ok(QuantConfig {
        version: CONFIG_VERSION,
        policy: opts.policy,
        weight_bits: wb,
        act_bits: ab,
        weights,
        sites,
    })
}

/// Replaces the reparameterization factors of a calibrated `ours` config,
/// refitting weight scales, projection scales and the `h*` scale.
pub fn recalibrate_factors(
    m: &VimBlock,
    taps: &[Taps],
    rep: RepFn,
    disp: DispFn,
    base: &CalibrationOptions,
) -> Result<QuantConfig, ModelError> {
    calibrate_from_taps(
        m,
        taps,
        &CalibrationOptions {
            policy: Policy::Ours,
            rep,
            disp,
            ..*base
        },
    )
}

/// Rows of a `[D, N]` tensor divided (`divide`) or multiplied by `r_d`.
fn fold_rows(t: &Tensor, r_d: &[f32], divide: bool) -> Result<Tensor, ModelError> {
    let cols = t.dims()[1];
    let v = t
        .as_f32()?
        .iter()
        .enumerate()
        .map(|(i, &x)| if divide { x / r_d[i / cols] } else { x * r_d[i / cols] })
        .collect();
    Ok(Tensor::from_f32(t.dims(), v)?)
}

fn site_samples(taps: &[Taps], site: &str) -> Result<Vec<Tensor>, ModelError> {
    taps.iter()
        .map(|t| t.get(site).cloned().ok_or_else(|| ModelError::MissingSite(site.to_string())))
        .collect()
}

fn concat(samples: &[Tensor]) -> Result<Vec<f32>, ModelError> {
    let mut out = Vec::with_capacity(samples.iter().map(Tensor::len).sum());
    for s in samples {
        out.extend_from_slice(s.as_f32()?);
    }
    Ok(out)
}

/// MinMax scale of the elementwise max-envelope across samples.
fn envelope_scale(samples: &[Tensor], bits: u8) -> Result<f32, ModelError> {
    let mut peak = 0.0f32;
    for s in samples {
        peak = peak.max(s.max_abs()?);
    }
    Ok(quantizer::minmax_scale_or_unit(&[peak], bits)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> VimDims {
        VimDims::new(4, 12, 3).unwrap()
    }

    #[test]
    fn deterministic_build() {
        for profile in OutlierProfile::ALL {
            let a = build_synthetic(3, small(), profile).unwrap();
            let b = build_synthetic(3, small(), profile).unwrap();
            assert_eq!(a, b);
            a.validate().unwrap();
        }
        assert_ne!(
            build_synthetic(3, small(), OutlierProfile::None).unwrap(),
            build_synthetic(4, small(), OutlierProfile::None).unwrap()
        );
        assert!(VimDims::new(0, 4, 4).is_err());
    }

    #[test]
    fn zero_input_gives_zero_taps() {
        let m = build_synthetic(1, small(), OutlierProfile::MiddleTokens).unwrap();
        let x = Tensor::zeros(&[4, 12]).unwrap();
        let (y, taps) = m.forward_fp(&x).unwrap();
        assert!(y.as_f32().unwrap().iter().all(|&v| v == 0.0));
        assert_eq!(taps.len(), ACTIVATION_SITES.len());
        for (site, t) in &taps {
            assert!(t.as_f32().unwrap().iter().all(|&v| v == 0.0), "{site}");
        }
    }

    #[test]
    fn tap_shapes() {
        let m = build_synthetic(1, small(), OutlierProfile::None).unwrap();
        let x = synthetic_inputs(small(), 1, 9).remove(0);
        let (_, taps) = m.forward_fp(&x).unwrap();
        let keys: Vec<&str> = taps.keys().map(String::as_str).collect();
        let mut expected = ACTIVATION_SITES.to_vec();
        expected.sort_unstable();
        assert_eq!(keys, expected);
        assert_eq!(taps["ssm.fwd.h"].dims(), &[8, 12, 3]);
        assert_eq!(taps["ssm.bwd.h"].dims(), &[8, 12, 3]);
        assert_eq!(taps[SITE_IN_PROJ].dims(), &[16, 12]);
        assert_eq!(taps[SITE_OUT_PROJ].dims(), &[4, 12]);
        assert_eq!(taps["ssm.fwd.b"].dims(), &[3, 12]);
    }

    #[test]
    fn pass_through_matches_fp_bitwise() {
        let m = build_synthetic(2, small(), OutlierProfile::HeavyChannels).unwrap();
        let x = synthetic_inputs(small(), 1, 5).remove(0);
        let (y, taps) = m.forward_fp(&x).unwrap();
        let qc = QuantConfig::pass_through();
        assert_eq!(m.forward_quant(&qc, &x).unwrap(), y);
        let (yq, tq) = m.forward_quant_taps(&qc, &x).unwrap();
        assert_eq!(yq, y);
        assert_eq!(tq, taps);
    }

    #[test]
    fn causal_conv_is_causal_and_depthwise() {
        let x = Tensor::from_f32(&[2, 3], vec![1.0, 0.0, 0.0, 0.0, 2.0, 0.0]).unwrap();
        let w = Tensor::from_f32(&[2, 4], vec![0.1, 0.2, 0.3, 0.4, 1.0, 1.0, 1.0, 5.0]).unwrap();
        let y = causal_conv(&x, &w).unwrap();
        assert_eq!(y.as_f32().unwrap(), &[0.4, 0.3, 0.2, 0.0, 10.0, 2.0]);
    }

    #[test]
    fn config_key_checks() {
        let m = build_synthetic(1, small(), OutlierProfile::None).unwrap();
        let mut qc = QuantConfig::pass_through();
        qc.check(&m).unwrap();
        qc.sites.remove(SITE_SSM_Y);
        assert_eq!(qc.check(&m), Err(ModelError::MissingSite(SITE_SSM_Y.into())));
        let mut qc = QuantConfig::pass_through();
        qc.sites.insert("norm.out".into(), SiteParams::PassThrough);
        assert_eq!(qc.check(&m), Err(ModelError::UnknownSite("norm.out".into())));
        let mut qc = QuantConfig::pass_through();
        qc.sites.insert(
            SITE_SSM_Y.into(),
            SiteParams::HiddenState {
                scale: 1.0,
                bits: 8,
                reparam: None,
            },
        );
        assert!(matches!(qc.check(&m), Err(ModelError::WrongKind { .. })));
    }

    #[test]
    fn policy_site_assignment() {
        let m = build_synthetic(5, small(), OutlierProfile::MiddleTokens).unwrap();
        let cs = CalibrationSet::synthetic(small(), 4, 11).unwrap();
        let taps = collect_taps(&m, &cs).unwrap();
        let base = calibrate_from_taps(&m, &taps, &CalibrationOptions::with_policy(Policy::Baseline)).unwrap();
        let ours = calibrate_from_taps(&m, &taps, &CalibrationOptions::default()).unwrap();
        base.check(&m).unwrap();
        ours.check(&m).unwrap();
        for (site, p) in &base.sites {
            match p {
                SiteParams::MinMax { .. } => {}
                SiteParams::HiddenState { reparam: None, .. } => {}
                other => panic!("{site}: {other:?}"),
            }
        }
        let kscaled: Vec<&str> = ours
            .sites
            .iter()
            .filter(|(_, p)| matches!(p, SiteParams::KScaled(_)))
            .map(|(s, _)| s.as_str())
            .collect();
        assert_eq!(kscaled, vec![SITE_CONV1D, SITE_OUT_PROJ]);
        assert!(ours.factors(Direction::Forward).is_some());
        assert!(ours.factors(Direction::Backward).is_some());
        let again = calibrate_from_taps(&m, &taps, &CalibrationOptions::default()).unwrap();
        assert_eq!(again, ours);
    }

    #[test]
    fn parse_names() {
        assert_eq!("middle_tokens".parse::<OutlierProfile>().unwrap(), OutlierProfile::MiddleTokens);
        assert!("spiky".parse::<OutlierProfile>().is_err());
        for p in Policy::ALL {
            assert_eq!(p.as_str().parse::<Policy>().unwrap(), p);
        }
    }

    #[test]
    fn weight_lookup() {
        let m = build_synthetic(1, small(), OutlierProfile::None).unwrap();
        for site in WEIGHT_SITES {
            assert!(m.weight(site).is_some(), "{site}");
        }
        assert_eq!(m.weight("ssm.bwd.w_c"), Some(&m.bwd.w_c));
        assert!(m.weight("ssm.fwd.a").is_none());
    }
}
