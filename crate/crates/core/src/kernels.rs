//! Temporal kernels over lag `h = |i − j|`.
//!
//! * exponential: `exp(−(α·h)^β)`
//! * periodic:    `exp(−2α²·sin²(π·h/β))`
//!
//! Both have unit variance (inputs are z-normalized), unit diagonal, and values
//! in `(0, 1]`. Kernel matrices are symmetric Toeplitz, so they are built from
//! a single lag table of length `T`.
//!
//! Learnable parameters live in unconstrained space and reach the kernels
//! through softplus; the periodic period gets an extra `+1` so it never drops
//! below one step.

use core::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::error::{contract, Error, Result};
use crate::graph::{softplus, softplus_inv, toeplitz, Graph, NodeId};
use crate::matrix::Matrix;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum KernelMode {
    None,
    Exp,
    Periodic,
    Both,
}

impl KernelMode {
    pub fn uses_exp(self) -> bool {
        matches!(self, KernelMode::Exp | KernelMode::Both)
    }

    pub fn uses_periodic(self) -> bool {
        matches!(self, KernelMode::Periodic | KernelMode::Both)
    }

    pub fn name(self) -> &'static str {
        match self {
            KernelMode::None => "none",
            KernelMode::Exp => "exp",
            KernelMode::Periodic => "periodic",
            KernelMode::Both => "both",
        }
    }
}

impl core::str::FromStr for KernelMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(Self::None),
            "exp" => Ok(Self::Exp),
            "periodic" => Ok(Self::Periodic),
            "both" => Ok(Self::Both),
            other => Err(Error::Config(alloc::format!(
                "kernel must be none|exp|periodic|both, got `{other}`"
            ))),
        }
    }
}

/// Where the kernels enter the attention computation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum KernelApply {
    /// `softmax((Cᵉ ⊙ Cᵖ ⊙ QKᵀ) / √d_k)`; any `d_k`.
    Score,
    /// `softmax((Cᵉ ⊙ Q)(Cᵖ ⊙ K)ᵀ / √d_k)`; requires `d_k = T`.
    Qk,
}

impl KernelApply {
    pub fn name(self) -> &'static str {
        match self {
            KernelApply::Score => "score",
            KernelApply::Qk => "qk",
        }
    }
}

impl core::str::FromStr for KernelApply {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "score" => Ok(Self::Score),
            "qk" => Ok(Self::Qk),
            other => Err(Error::Config(alloc::format!(
                "kernel_apply must be score|qk, got `{other}`"
            ))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct KernelSpec {
    pub mode: KernelMode,
    pub apply: KernelApply,
    pub adaptive: bool,
}

impl KernelSpec {
    pub const VANILLA: KernelSpec = KernelSpec {
        mode: KernelMode::None,
        apply: KernelApply::Score,
        adaptive: false,
    };

    pub fn new(mode: KernelMode) -> Self {
        Self {
            mode,
            apply: KernelApply::Score,
            adaptive: false,
        }
    }

    pub fn is_identity(&self) -> bool {
        self.mode == KernelMode::None
    }
}

// -- scalar kernels ---------------------------------------------------------

#[inline]
pub fn exp_lag_value(h: f64, alpha: f64, beta: f64) -> f64 {
    libm::exp(-libm::pow(alpha * h, beta))
}

/// `(∂/∂α, ∂/∂β)` of [`exp_lag_value`] for `h > 0`.
pub fn exp_lag_grad(h: f64, alpha: f64, beta: f64) -> (f64, f64) {
    let x = alpha * h;
    if h == 0.0 || x <= 0.0 {
        return (0.0, 0.0);
    }
    let u = libm::pow(x, beta);
    let c = libm::exp(-u);
    let d_alpha = -c * beta * h * libm::pow(x, beta - 1.0);
    let d_beta = -c * u * libm::log(x);
    (d_alpha, d_beta)
}

#[inline]
pub fn periodic_lag_value(h: f64, alpha: f64, beta: f64) -> f64 {
    let s = libm::sin(PI * h / beta);
    libm::exp(-2.0 * alpha * alpha * s * s)
}

/// `(∂/∂α, ∂/∂β)` of [`periodic_lag_value`].
pub fn periodic_lag_grad(h: f64, alpha: f64, beta: f64) -> (f64, f64) {
    let arg = PI * h / beta;
    let s = libm::sin(arg);
    let co = libm::cos(arg);
    let c = libm::exp(-2.0 * alpha * alpha * s * s);
    let d_alpha = -4.0 * alpha * s * s * c;
    let d_beta = 4.0 * alpha * alpha * s * co * PI * h / (beta * beta) * c;
    (d_alpha, d_beta)
}

fn check_positive(name: &str, v: f64) -> Result<()> {
    if !(v > 0.0 && v.is_finite()) {
        return Err(contract(alloc::format!(
            "{name} must be positive and finite, got {v}"
        )));
    }
    Ok(())
}

/// Kernel values at lags `0..t`.
pub fn exp_lags(t: usize, alpha: f64, beta: f64) -> Result<alloc::vec::Vec<f64>> {
    check_positive("exponential alpha", alpha)?;
    check_positive("exponential beta", beta)?;
    Ok((0..t).map(|h| exp_lag_value(h as f64, alpha, beta)).collect())
}

/// Kernel values at lags `0..t`. `alpha = 0` is allowed (flat kernel).
pub fn periodic_lags(t: usize, alpha: f64, beta: f64) -> Result<alloc::vec::Vec<f64>> {
    if !(alpha >= 0.0 && alpha.is_finite()) {
        return Err(contract(alloc::format!(
            "periodic alpha must be non-negative, got {alpha}"
        )));
    }
    check_positive("periodic beta (period)", beta)?;
    Ok((0..t).map(|h| periodic_lag_value(h as f64, alpha, beta)).collect())
}

/// `T×T` matrix with entry `(i, j) = exp(−(α|i−j|)^β)`.
pub fn exp_kernel_matrix(t: usize, alpha: f64, beta: f64) -> Result<Matrix> {
    if t == 0 {
        return Err(contract("kernel size T must be at least 1"));
    }
    Ok(toeplitz(&exp_lags(t, alpha, beta)?))
}

/// `T×T` matrix with entry `(i, j) = exp(−2α² sin²(π|i−j|/β))`.
pub fn periodic_kernel_matrix(t: usize, alpha: f64, beta: f64) -> Result<Matrix> {
    if t == 0 {
        return Err(contract("kernel size T must be at least 1"));
    }
    Ok(toeplitz(&periodic_lags(t, alpha, beta)?))
}

// -- parameters -------------------------------------------------------------

/// Positive kernel parameters of one head.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KernelParams {
    pub exp_alpha: f64,
    pub exp_beta: f64,
    pub per_alpha: f64,
    pub per_beta: f64,
}

impl KernelParams {
    /// Maps the four unconstrained values through the positivity transform.
    pub fn from_raw(raw: [f64; 4]) -> Self {
        Self {
            exp_alpha: softplus(raw[0]),
            exp_beta: softplus(raw[1]),
            per_alpha: softplus(raw[2]),
            per_beta: 1.0 + softplus(raw[3]),
        }
    }

    /// Inverse of [`KernelParams::from_raw`].
    pub fn to_raw(&self) -> Result<[f64; 4]> {
        check_positive("exp_alpha", self.exp_alpha)?;
        check_positive("exp_beta", self.exp_beta)?;
        check_positive("per_alpha", self.per_alpha)?;
        if !(self.per_beta > 1.0 && self.per_beta.is_finite()) {
            return Err(contract(alloc::format!(
                "per_beta must exceed 1, got {}",
                self.per_beta
            )));
        }
        Ok([
            softplus_inv(self.exp_alpha),
            softplus_inv(self.exp_beta),
            softplus_inv(self.per_alpha),
            softplus_inv(self.per_beta - 1.0),
        ])
    }

    /// Near-flat starting point: both kernels stay above 0.9 out to lag `T/2`,
    /// so training starts close to plain attention.
    pub fn near_flat(t: usize, period: f64) -> Self {
        Self {
            exp_alpha: 0.2 / t.max(1) as f64,
            exp_beta: 1.0,
            per_alpha: 0.2,
            per_beta: period.max(1.5),
        }
    }

    /// Lag tables `(exp, periodic)` for the kernels selected by `mode`; an
    /// unused kernel is reported as all ones.
    pub fn lag_tables(&self, mode: KernelMode, t: usize) -> Result<(alloc::vec::Vec<f64>, alloc::vec::Vec<f64>)> {
        let ones = alloc::vec![1.0; t];
        let e = if mode.uses_exp() {
            exp_lags(t, self.exp_alpha, self.exp_beta)?
        } else {
            ones.clone()
        };
        let p = if mode.uses_periodic() {
            periodic_lags(t, self.per_alpha, self.per_beta)?
        } else {
            ones
        };
        Ok((e, p))
    }
}

/// `(Cᵉ, Cᵖ)` for `spec.mode`; kernels not selected are all-ones.
pub fn kernel_product(spec: &KernelSpec, params: &KernelParams, t: usize) -> Result<(Matrix, Matrix)> {
    if t == 0 {
        return Err(contract("kernel size T must be at least 1"));
    }
    let (e, p) = params.lag_tables(spec.mode, t)?;
    Ok((toeplitz(&e), toeplitz(&p)))
}

/// Summary statistics of one window that drive adaptive kernels.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TemporalFeatures {
    pub mean: f64,
    /// Population standard deviation.
    pub std: f64,
    pub length: usize,
    /// `(t_last − t_first) / length`.
    pub avg_interval: f64,
}

impl TemporalFeatures {
    pub fn as_row(&self) -> Matrix {
        Matrix::from_rows(&[[self.mean, self.std, self.length as f64, self.avg_interval]])
    }
}

/// Features over the observed cells of a window (`mask = 1`), pooled across
/// channels. Only time steps with at least one observation count toward the
/// length and the time span.
pub fn temporal_features(values: &Matrix, mask: &Matrix, timestamps: &[f64]) -> Result<TemporalFeatures> {
    if values.shape() != mask.shape() {
        return Err(Error::Shape {
            op: "temporal_features",
            lhs: values.shape(),
            rhs: mask.shape(),
        });
    }
    if timestamps.len() != values.rows() {
        return Err(contract("one timestamp per time step is required"));
    }
    let (mut n, mut sum) = (0usize, 0.0);
    let (mut first, mut last, mut steps) = (None, 0.0, 0usize);
    for i in 0..values.rows() {
        let mut any = false;
        for (v, m) in values.row(i).iter().zip(mask.row(i)) {
            if *m != 0.0 {
                n += 1;
                sum += v;
                any = true;
            }
        }
        if any {
            steps += 1;
            first.get_or_insert(timestamps[i]);
            last = timestamps[i];
        }
    }
    let Some(first) = first else {
        return Err(contract("window has no observed values"));
    };
    let mean = sum / n as f64;
    let mut ss = 0.0;
    for i in 0..values.rows() {
        for (v, m) in values.row(i).iter().zip(mask.row(i)) {
            if *m != 0.0 {
                ss += (v - mean) * (v - mean);
            }
        }
    }
    Ok(TemporalFeatures {
        mean,
        std: libm::sqrt(ss / n as f64),
        length: steps,
        avg_interval: (last - first) / steps as f64,
    })
}

/// Linear map from the four temporal features to the four unconstrained
/// kernel parameters: `raw = f · W + b`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdaptiveMap {
    /// 4×4; row = feature, column = raw parameter.
    pub weight: Matrix,
    /// 1×4.
    pub bias: Matrix,
}

impl AdaptiveMap {
    pub fn raw(&self, f: &TemporalFeatures) -> Result<[f64; 4]> {
        let r = f.as_row().matmul(&self.weight)?.add(&self.bias)?;
        let s = r.as_slice();
        Ok([s[0], s[1], s[2], s[3]])
    }
}

pub fn adaptive_params(f: &TemporalFeatures, map: &AdaptiveMap) -> Result<KernelParams> {
    Ok(KernelParams::from_raw(map.raw(f)?))
}

/// Kernel matrices recorded on a graph. `None` means the kernel is the
/// all-ones matrix and its multiplication is skipped.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct KernelNodes {
    pub exp: Option<NodeId>,
    pub periodic: Option<NodeId>,
}

/// Records the kernel matrices for `mode` from a `1×4` node of unconstrained
/// parameters.
pub fn kernel_nodes(g: &mut Graph, mode: KernelMode, raw: NodeId, t: usize) -> Result<KernelNodes> {
    let mut out = KernelNodes {
        exp: None,
        periodic: None,
    };
    if mode.uses_exp() {
        let a = g.element(raw, 0, 0)?;
        let a = g.softplus(a);
        let b = g.element(raw, 0, 1)?;
        let b = g.softplus(b);
        out.exp = Some(g.exp_kernel(t, a, b)?);
    }
    if mode.uses_periodic() {
        let a = g.element(raw, 0, 2)?;
        let a = g.softplus(a);
        let b = g.element(raw, 0, 3)?;
        let b = g.softplus(b);
        let b = g.offset(b, 1.0);
        out.periodic = Some(g.periodic_kernel(t, a, b)?);
    }
    Ok(out)
}
