//! Kernel-modulated scaled dot-product attention for a single head.
//!
//! Two placements of the temporal kernels are supported:
//!
//! * [`KernelApply::Score`] multiplies the `T×T` score matrix:
//!   `Â = softmax((Cᵉ ⊙ Cᵖ ⊙ QKᵀ) / √d_k)`, valid for any head width.
//! * [`KernelApply::Qk`] multiplies the query and key matrices directly:
//!   `Â = softmax((Cᵉ ⊙ Q)(Cᵖ ⊙ K)ᵀ / √d_k)`. The kernels are `T×T`, so this
//!   only type-checks when `d_k = T`.
//!
//! With [`KernelMode::None`] no multiplication is recorded at all, which makes
//! the result bit-identical to plain attention.

use alloc::vec::Vec;

use crate::error::{config, Error, Result};
use crate::graph::{Graph, NodeId};
use crate::kernels::{
    exp_lag_value, periodic_lag_value, KernelApply, KernelMode, KernelNodes, KernelParams, KernelSpec,
};
use crate::matrix::Matrix;

/// Additive logit for masked (future) positions under causal attention.
pub const CAUSAL_MASK_LOGIT: f64 = -1e30;

/// Projections and kernel parameters of one head, as plain matrices.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionHeadParams {
    /// Query projection `W₁`, `d_i × d_k`.
    pub w_query: Matrix,
    /// Key projection `W₂`, `d_i × d_k`.
    pub w_key: Matrix,
    /// Value projection, `d_i × d_k`.
    pub w_value: Matrix,
    pub kernel: KernelParams,
}

impl AttentionHeadParams {
    pub fn d_k(&self) -> usize {
        self.w_query.cols()
    }
}

/// Attention weights together with the logits that produced them.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionScores {
    /// Row-stochastic `T×T`.
    pub attention: Matrix,
    /// Kernel-modulated, scaled pre-softmax scores.
    pub logits: Matrix,
}

pub(crate) fn check_qk_shape(apply: KernelApply, mode: KernelMode, t: usize, d_k: usize) -> Result<()> {
    if apply == KernelApply::Qk && mode != KernelMode::None && d_k != t {
        return Err(config(alloc::format!(
            "kernel_apply=qk multiplies T×T kernels into the T×d_k query/key matrices, \
             so it needs d_k = T (got d_k = {d_k}, T = {t})"
        )));
    }
    Ok(())
}

/// Nodes of one head's attention: the softmax input and output.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AttentionNodes {
    pub logits: NodeId,
    pub attention: NodeId,
}

/// Records `Â` for one head from query and key nodes.
pub fn attention_node(
    g: &mut Graph,
    q: NodeId,
    k: NodeId,
    kernels: KernelNodes,
    apply: KernelApply,
    causal: bool,
) -> Result<AttentionNodes> {
    let (t, d_k) = g.shape(q);
    let inv_sqrt = 1.0 / libm::sqrt(d_k as f64);
    let scores = match apply {
        KernelApply::Score => {
            let mut s = g.matmul_bt(q, k)?;
            if let Some(e) = kernels.exp {
                s = g.mul(s, e)?;
            }
            if let Some(p) = kernels.periodic {
                s = g.mul(s, p)?;
            }
            s
        }
        KernelApply::Qk => {
            let any = kernels.exp.is_some() || kernels.periodic.is_some();
            if any && d_k != t {
                return Err(config(alloc::format!(
                    "kernel_apply=qk needs d_k = T (got d_k = {d_k}, T = {t})"
                )));
            }
            let qh = match kernels.exp {
                Some(e) => g.mul(e, q)?,
                None => q,
            };
            let kh = match kernels.periodic {
                Some(p) => g.mul(p, k)?,
                None => k,
            };
            g.matmul_bt(qh, kh)?
        }
    };
    let mut logits = g.scale(scores, inv_sqrt);
    if causal {
        let (r, c) = g.shape(logits);
        let mask = g.constant(Matrix::from_fn(r, c, |i, j| {
            if j > i {
                CAUSAL_MASK_LOGIT
            } else {
                0.0
            }
        }));
        logits = g.add(logits, mask)?;
    }
    let attention = g.softmax_rows(logits);
    Ok(AttentionNodes { logits, attention })
}

fn constant_kernels(g: &mut Graph, spec: &KernelSpec, params: &KernelParams, t: usize) -> Result<KernelNodes> {
    let (e, p) = params.lag_tables(spec.mode, t)?;
    Ok(KernelNodes {
        exp: spec
            .mode
            .uses_exp()
            .then(|| g.constant(crate::graph::toeplitz(&e))),
        periodic: spec
            .mode
            .uses_periodic()
            .then(|| g.constant(crate::graph::toeplitz(&p))),
    })
}

/// Attention weights of one head on input `V` (`T × d_i`).
pub fn attention_scores(v: &Matrix, head: &AttentionHeadParams, spec: &KernelSpec) -> Result<AttentionScores> {
    attention_scores_with(v, head, spec, false)
}

pub fn attention_scores_with(
    v: &Matrix,
    head: &AttentionHeadParams,
    spec: &KernelSpec,
    causal: bool,
) -> Result<AttentionScores> {
    let t = v.rows();
    if t == 0 {
        return Err(crate::error::contract("sequence length T must be at least 1"));
    }
    check_qk_shape(spec.apply, spec.mode, t, head.d_k())?;
    let mut g = Graph::detached();
    let vn = g.constant(v.clone());
    let wq = g.constant(head.w_query.clone());
    let wk = g.constant(head.w_key.clone());
    let q = g.matmul(vn, wq)?;
    let k = g.matmul(vn, wk)?;
    let kernels = constant_kernels(&mut g, spec, &head.kernel, t)?;
    let nodes = attention_node(&mut g, q, k, kernels, spec.apply, causal)?;
    Ok(AttentionScores {
        attention: g.value(nodes.attention).clone(),
        logits: g.value(nodes.logits).clone(),
    })
}

/// Kernelizes every element of `Q` and `K` one scalar at a time:
/// `Q̂ᵢⱼ = Cₑ(|i−j|)·Qᵢⱼ`, `K̂ᵢⱼ = Cₚ(|i−j|)·Kᵢⱼ`. The column index is read as a
/// time index, so `d_k = T` is required.
pub fn elementwise_kernelization(
    q: &Matrix,
    k: &Matrix,
    params: &KernelParams,
    mode: KernelMode,
) -> Result<(Matrix, Matrix)> {
    if q.shape() != k.shape() {
        return Err(Error::Shape {
            op: "elementwise_kernelization",
            lhs: q.shape(),
            rhs: k.shape(),
        });
    }
    let (t, d_k) = q.shape();
    if d_k != t {
        return Err(config(alloc::format!(
            "element-wise kernelization indexes query/key columns by time and needs d_k = T \
             (got d_k = {d_k}, T = {t})"
        )));
    }
    let mut qh = q.clone();
    let mut kh = k.clone();
    for i in 0..t {
        for j in 0..t {
            let h = i.abs_diff(j) as f64;
            if mode.uses_exp() {
                qh[(i, j)] = exp_lag_value(h, params.exp_alpha, params.exp_beta) * q[(i, j)];
            }
            if mode.uses_periodic() {
                kh[(i, j)] = periodic_lag_value(h, params.per_alpha, params.per_beta) * k[(i, j)];
            }
        }
    }
    Ok((qh, kh))
}

/// Plain-matrix `softmax(Q̂K̂ᵀ/√d_k)` following the element-wise route.
pub fn elementwise_attention(q: &Matrix, k: &Matrix, params: &KernelParams, mode: KernelMode) -> Result<Matrix> {
    let (qh, kh) = elementwise_kernelization(q, k, params, mode)?;
    let s = qh.matmul_bt(&kh)?.scale(1.0 / libm::sqrt(q.cols() as f64));
    Ok(crate::matrix::softmax_rows(&s))
}

/// Plain-matrix vectorized route: kernel matrices built once, then
/// `softmax((Cᵉ⊙Q)(Cᵖ⊙K)ᵀ/√d_k)`.
pub fn vectorized_qk_attention(q: &Matrix, k: &Matrix, params: &KernelParams, mode: KernelMode) -> Result<Matrix> {
    let (t, d_k) = q.shape();
    check_qk_shape(KernelApply::Qk, KernelMode::Both, t, d_k)?;
    let mut g = Graph::detached();
    let qn = g.constant(q.clone());
    let kn = g.constant(k.clone());
    let spec = KernelSpec {
        mode,
        apply: KernelApply::Qk,
        adaptive: false,
    };
    let kernels = constant_kernels(&mut g, &spec, params, t)?;
    let a = attention_node(&mut g, qn, kn, kernels, KernelApply::Qk, false)?;
    Ok(g.value(a.attention).clone())
}

/// `Cᵉ ⊙ Cᵖ` at each lag `0..t` (the learned kernel shape of one head).
pub fn combined_lag_profile(params: &KernelParams, mode: KernelMode, t: usize) -> Result<Vec<f64>> {
    let (e, p) = params.lag_tables(mode, t)?;
    Ok(e.iter().zip(&p).map(|(a, b)| a * b).collect())
}
