//! Dynamic Change Focus Module.
//!
//! Attention math (softmax, linear, and two-stage agent attention) is
//! exposed as pure array functions with their stated contracts; the network
//! block applies the agent form with learned projections, fuses it with a
//! projected Sobel edge magnitude, and gates the input residually:
//! `out = x + sigmoid(combine(a, e)) * x`.

use crate::error::{DfpfError, Result};
use crate::nn::{join_name, Conv2d, Init, Linear, Module, ParamKind};
use crate::tensor::{self, Tensor};
use ndarray::{Array2, Array4, ArrayView2, Axis, Ix4};
use serde::{Deserialize, Serialize};

/// Positive-valued kernel for linear attention.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum KernelPhi {
    Softplus,
    /// `max(x, 0) + 1`: rectifier shifted to stay strictly positive.
    ShiftedRectifier,
}

impl KernelPhi {
    fn apply(self, v: f64) -> f64 {
        match self {
            KernelPhi::Softplus => v.max(0.0) + (-v.abs()).exp().ln_1p(),
            KernelPhi::ShiftedRectifier => v.max(0.0) + 1.0,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AgentAttentionConfig {
    pub heads: usize,
    pub num_agents: usize,
    pub kernel_phi: KernelPhi,
    pub include_bias: bool,
}

impl Default for AgentAttentionConfig {
    fn default() -> Self {
        AgentAttentionConfig {
            heads: 1,
            num_agents: 16,
            kernel_phi: KernelPhi::Softplus,
            include_bias: true,
        }
    }
}

/// Which branches of the block are active.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DcfmVariant {
    Full,
    /// Attention branch removed.
    Alpha,
    /// Edge branch removed.
    Beta,
}

impl std::fmt::Display for DcfmVariant {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            DcfmVariant::Full => write!(f, "full"),
            DcfmVariant::Alpha => write!(f, "alpha"),
            DcfmVariant::Beta => write!(f, "beta"),
        }
    }
}

fn check_finite(name: &str, a: &ArrayView2<'_, f64>) -> Result<()> {
    if a.iter().any(|v| !v.is_finite()) {
        return Err(DfpfError::Input(format!("{name} contains NaN/Inf")));
    }
    Ok(())
}

fn check_qkv(q: &ArrayView2<'_, f64>, k: &ArrayView2<'_, f64>, v: &ArrayView2<'_, f64>) -> Result<()> {
    if q.ncols() != k.ncols() || k.dim() != v.dim() {
        return Err(DfpfError::Shape(format!(
            "attention shapes do not conform: Q {:?}, K {:?}, V {:?}",
            q.dim(),
            k.dim(),
            v.dim()
        )));
    }
    if q.ncols() == 0 {
        return Err(DfpfError::Shape("attention requires d >= 1".into()));
    }
    check_finite("Q", q)?;
    check_finite("K", k)?;
    check_finite("V", v)
}

/// Softmax attention `O_i = sum_j softmax_j(q_i . k_j / sqrt(d)) v_j` with
/// row-stochastic weights.
pub fn softmax_attention(
    q: &ArrayView2<'_, f64>,
    k: &ArrayView2<'_, f64>,
    v: &ArrayView2<'_, f64>,
) -> Result<Array2<f64>> {
    check_qkv(q, k, v)?;
    let (n, d) = q.dim();
    let m = k.nrows();
    let scale = 1.0 / (d as f64).sqrt();
    let mut out = Array2::<f64>::zeros((n, d));
    let mut weights = vec![0.0f64; m];
    for i in 0..n {
        let qi = q.row(i);
        let mut mx = f64::NEG_INFINITY;
        for j in 0..m {
            let logit = qi.dot(&k.row(j)) * scale;
            weights[j] = logit;
            mx = mx.max(logit);
        }
        let mut denom = 0.0;
        for w in weights.iter_mut() {
            *w = (*w - mx).exp();
            denom += *w;
        }
        let mut row = out.row_mut(i);
        for j in 0..m {
            let wn = weights[j] / denom;
            row.scaled_add(wn, &v.row(j));
        }
    }
    Ok(out)
}

/// Linear attention with a strictly positive feature map, computed in
/// O(N d^2) without materializing the N x N weight matrix.
pub fn linear_attention(
    q: &ArrayView2<'_, f64>,
    k: &ArrayView2<'_, f64>,
    v: &ArrayView2<'_, f64>,
    phi: KernelPhi,
) -> Result<Array2<f64>> {
    check_qkv(q, k, v)?;
    let (n, d) = q.dim();
    let m = k.nrows();
    let phk = k.mapv(|x| phi.apply(x));
    // S_kv[d, d] = sum_j phi(k_j)^T v_j ; s_k[d] = sum_j phi(k_j)
    let mut s_kv = Array2::<f64>::zeros((d, d));
    let mut s_k = ndarray::Array1::<f64>::zeros(d);
    for j in 0..m {
        let pk = phk.row(j);
        s_k += &pk;
        for a in 0..d {
            let pka = pk[a];
            if pka != 0.0 {
                s_kv.row_mut(a).scaled_add(pka, &v.row(j));
            }
        }
    }
    let mut out = Array2::<f64>::zeros((n, d));
    for i in 0..n {
        let pq = q.row(i).mapv(|x| phi.apply(x));
        let denom = pq.dot(&s_k);
        if denom <= 0.0 {
            return Err(DfpfError::Input(
                "linear attention denominator vanished; phi must be strictly positive".into(),
            ));
        }
        let num = pq.dot(&s_kv);
        out.row_mut(i).assign(&num.mapv(|x| x / denom));
    }
    Ok(out)
}

/// Agent tokens by adaptive average pooling over the token axis
/// (contiguous bins; bin i covers `[floor(iN/n), ceil((i+1)N/n))`).
pub fn pool_agents(q: &ArrayView2<'_, f64>, n_agents: usize) -> Result<Array2<f64>> {
    let (n, d) = q.dim();
    if n_agents == 0 || n_agents > n {
        return Err(DfpfError::Input(format!(
            "pool_agents requires 1 <= n ({n_agents}) <= N ({n})"
        )));
    }
    let mut out = Array2::<f64>::zeros((n_agents, d));
    for i in 0..n_agents {
        let start = i * n / n_agents;
        let end = ((i + 1) * n).div_ceil(n_agents);
        let len = (end - start) as f64;
        let mut row = out.row_mut(i);
        for j in start..end {
            row.scaled_add(1.0 / len, &q.row(j));
        }
    }
    Ok(out)
}

/// Two-stage agent attention: agents (pooled from Q) act first as queries
/// against K/V, then as keys with the aggregated values, per head.
pub fn agent_attention(
    q: &ArrayView2<'_, f64>,
    k: &ArrayView2<'_, f64>,
    v: &ArrayView2<'_, f64>,
    cfg: &AgentAttentionConfig,
) -> Result<Array2<f64>> {
    check_qkv(q, k, v)?;
    let (n, d) = q.dim();
    if d % cfg.heads != 0 {
        return Err(DfpfError::Config(format!(
            "agent attention: d {d} not divisible by heads {}",
            cfg.heads
        )));
    }
    if cfg.num_agents > n {
        return Err(DfpfError::Input(format!(
            "agent attention: num_agents {} exceeds token count {n}",
            cfg.num_agents
        )));
    }
    let dh = d / cfg.heads;
    let mut out = Array2::<f64>::zeros((n, d));
    for hd in 0..cfg.heads {
        let cols = ndarray::s![.., hd * dh..(hd + 1) * dh];
        let qh = q.slice(cols);
        let kh = k.slice(cols);
        let vh = v.slice(cols);
        let agents = pool_agents(&qh, cfg.num_agents)?;
        let aggregated = softmax_attention(&agents.view(), &kh, &vh)?;
        let oh = softmax_attention(&qh, &agents.view(), &aggregated.view())?;
        out.slice_mut(cols).assign(&oh);
    }
    Ok(out)
}

/// Per-channel Sobel gradient magnitude with replicate padding on a
/// `[B, C, H, W]` map. `G = sqrt(Gx^2 + Gy^2) >= 0`.
pub fn sobel_magnitude(x: &ndarray::ArrayD<f64>) -> Result<ndarray::ArrayD<f64>> {
    let x4 = x
        .view()
        .into_dimensionality::<Ix4>()
        .map_err(|_| DfpfError::Shape(format!("sobel expects [B, C, H, W], got {:?}", x.shape())))?;
    let (b, c, h, w) = x4.dim();
    if h < 3 || w < 3 {
        return Err(DfpfError::Input(format!(
            "sobel requires spatial size >= 3, got {h}x{w}"
        )));
    }
    let mut out = Array4::<f64>::zeros((b, c, h, w));
    for bi in 0..b {
        for ci in 0..c {
            let img = x4.index_axis(Axis(0), bi);
            let img = img.index_axis(Axis(0), ci);
            let gx = crate::tensor::correlate3x3_replicate_pub(&img, SobelKernel::X);
            let gy = crate::tensor::correlate3x3_replicate_pub(&img, SobelKernel::Y);
            let mut o = out.index_axis_mut(Axis(0), bi);
            let mut o = o.index_axis_mut(Axis(0), ci);
            ndarray::Zip::from(&mut o).and(&gx).and(&gy).for_each(|m, &a, &b| {
                *m = (a * a + b * b).sqrt();
            });
        }
    }
    Ok(out.into_dyn())
}

pub use crate::tensor::SobelKernel;

/// One change-focus block over a fused feature map of width `c`.
pub struct DcfmBlock {
    pub variant: DcfmVariant,
    pub heads: usize,
    pub num_agents: usize,
    attn: Option<AgentAttnProj>,
    edge_proj: Option<Conv2d>,
    combine: Conv2d,
}

struct AgentAttnProj {
    q: Linear,
    k: Linear,
    v: Linear,
    proj: Linear,
}

impl Module for AgentAttnProj {
    fn visit_params(&self, prefix: &str, f: &mut dyn FnMut(String, &Tensor, ParamKind)) {
        self.q.visit_params(&join_name(prefix, "q"), f);
        self.k.visit_params(&join_name(prefix, "k"), f);
        self.v.visit_params(&join_name(prefix, "v"), f);
        self.proj.visit_params(&join_name(prefix, "proj"), f);
    }
}

impl DcfmBlock {
    pub fn new(
        init: &mut Init,
        c: usize,
        heads: usize,
        num_agents: usize,
        variant: DcfmVariant,
    ) -> Result<Self> {
        if c % heads != 0 {
            return Err(DfpfError::Config(format!(
                "dcfm: channels {c} not divisible by heads {heads}"
            )));
        }
        if num_agents == 0 {
            return Err(DfpfError::Config("dcfm: num_agents must be positive".into()));
        }
        let has_attn = variant != DcfmVariant::Alpha;
        let has_edge = variant != DcfmVariant::Beta;
        let combine_in = match variant {
            DcfmVariant::Full => 2 * c,
            DcfmVariant::Alpha | DcfmVariant::Beta => c,
        };
        Ok(DcfmBlock {
            variant,
            heads,
            num_agents,
            attn: has_attn.then(|| AgentAttnProj {
                q: Linear::new(init, c, c, true),
                k: Linear::new(init, c, c, true),
                v: Linear::new(init, c, c, true),
                proj: Linear::new(init, c, c, true),
            }),
            edge_proj: has_edge.then(|| Conv2d::new(init, c, c, 1, 1, 0, true)),
            combine: Conv2d::new(init, combine_in, c, 1, 1, 0, true),
        })
    }

    /// Tape-side agent attention over flattened tokens.
    fn attention_branch(&self, x: &Tensor, h: usize, w: usize) -> Tensor {
        let attn = self.attn.as_ref().expect("attention branch present");
        let tokens = tensor::nchw_to_tokens(x);
        let n = h * w;
        // keep the configured agent count within the available tokens
        let agents = self.num_agents.min(n);
        let q = attn.q.forward(&tokens);
        let k = attn.k.forward(&tokens);
        let v = attn.v.forward(&tokens);
        let qh = tensor::split_heads(&q, self.heads);
        let kh = tensor::split_heads(&k, self.heads);
        let vh = tensor::split_heads(&v, self.heads);
        let c = x.shape()[1];
        let dh = c / self.heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let a = tensor::pool_tokens_adaptive(&qh, agents);
        // stage 1: agents query the full key/value set
        let s1 = tensor::softmax_lastdim(&tensor::scale(&tensor::bmm_nt(&a, &kh), scale));
        let va = tensor::bmm(&s1, &vh);
        // stage 2: agents act as keys, aggregated values as values
        let s2 = tensor::softmax_lastdim(&tensor::scale(&tensor::bmm_nt(&qh, &a), scale));
        let oh = tensor::bmm(&s2, &va);
        let merged = tensor::merge_heads(&oh);
        tensor::tokens_to_nchw(&attn.proj.forward(&merged), h, w)
    }

    /// Residual gated reweighting; shape is preserved in every variant.
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let s = x.shape();
        if s.len() != 4 {
            return Err(DfpfError::Shape(format!(
                "dcfm expects [B, C, H, W], got {s:?}"
            )));
        }
        let (h, w) = (s[2], s[3]);
        if h < 3 || w < 3 {
            return Err(DfpfError::Input(format!(
                "dcfm requires spatial size >= 3, got {h}x{w}"
            )));
        }
        let gate_input = match self.variant {
            DcfmVariant::Full => {
                let a = self.attention_branch(x, h, w);
                let e = self
                    .edge_proj
                    .as_ref()
                    .unwrap()
                    .forward(&tensor::sobel_magnitude_op(x));
                tensor::concat_channels(&[&a, &e])
            }
            DcfmVariant::Alpha => self
                .edge_proj
                .as_ref()
                .unwrap()
                .forward(&tensor::sobel_magnitude_op(x)),
            DcfmVariant::Beta => self.attention_branch(x, h, w),
        };
        let gate = tensor::sigmoid(&self.combine.forward(&gate_input));
        Ok(tensor::add(x, &tensor::mul(&gate, x)))
    }
}

impl Module for DcfmBlock {
    fn visit_params(&self, prefix: &str, f: &mut dyn FnMut(String, &Tensor, ParamKind)) {
        if let Some(a) = &self.attn {
            a.visit_params(&join_name(prefix, "attn"), f);
        }
        if let Some(e) = &self.edge_proj {
            e.visit_params(&join_name(prefix, "edge_proj"), f);
        }
        self.combine.visit_params(&join_name(prefix, "combine"), f);
    }
}
