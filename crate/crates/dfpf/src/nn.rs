//! Parameter-owning building blocks composed from tape ops.
//!
//! Layers own their parameters as trainable leaves; `visit_params` walks
//! them with hierarchical names for optimizers, checkpoints, and counting.

use crate::tensor::{self, Arr, Tensor};
use ndarray::IxDyn;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

/// How a parameter behaves under weight decay.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamKind {
    Weight,
    Bias,
    Norm,
}

pub trait Module {
    fn visit_params(&self, prefix: &str, f: &mut dyn FnMut(String, &Tensor, ParamKind));
}

/// Snapshot of all parameters of a module, in visit order.
pub fn collect_params(m: &dyn Module) -> Vec<(String, Tensor, ParamKind)> {
    let mut out = Vec::new();
    m.visit_params("", &mut |name, t, kind| out.push((name, t.clone(), kind)));
    out
}

/// Total element count over all parameter arrays (brute-force enumeration).
pub fn param_count(m: &dyn Module) -> u64 {
    let mut n = 0u64;
    m.visit_params("", &mut |_, t, _| n += t.len() as u64);
    n
}

pub fn zero_grads(m: &dyn Module) {
    m.visit_params("", &mut |_, t, _| t.zero_grad());
}

pub(crate) fn join_name(prefix: &str, name: &str) -> String {
    join(prefix, name)
}

fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}

/// Parameter initializer: truncated normal (resampled beyond two standard
/// deviations) for weights, constants for biases and norm gains.
pub struct Init {
    rng: ChaCha8Rng,
    pub std: f64,
}

impl Init {
    pub fn new(rng: ChaCha8Rng) -> Self {
        Init { rng, std: 0.02 }
    }

    pub fn trunc_normal(&mut self, shape: &[usize]) -> Arr {
        let n: usize = shape.iter().product();
        let data: Vec<f64> = (0..n).map(|_| self.sample()).collect();
        Arr::from_shape_vec(IxDyn(shape), data).unwrap()
    }

    fn sample(&mut self) -> f64 {
        loop {
            // Box-Muller
            let u1: f64 = self.rng.gen_range(f64::EPSILON..1.0);
            let u2: f64 = self.rng.gen_range(0.0..1.0);
            let z = (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos();
            if z.abs() <= 2.0 {
                return z * self.std;
            }
        }
    }

    pub fn zeros(&mut self, shape: &[usize]) -> Arr {
        Arr::zeros(IxDyn(shape))
    }

    pub fn ones(&mut self, shape: &[usize]) -> Arr {
        Arr::ones(IxDyn(shape))
    }
}

/// Fully connected layer, `x [..., in] -> [..., out]`.
pub struct Linear {
    pub w: Tensor,
    pub b: Option<Tensor>,
}

impl Linear {
    pub fn new(init: &mut Init, c_in: usize, c_out: usize, bias: bool) -> Self {
        Linear {
            w: Tensor::param(init.trunc_normal(&[c_in, c_out])),
            b: bias.then(|| Tensor::param(init.zeros(&[c_out]))),
        }
    }

    pub fn forward(&self, x: &Tensor) -> Tensor {
        tensor::linear(x, &self.w, self.b.as_ref())
    }
}

impl Module for Linear {
    fn visit_params(&self, prefix: &str, f: &mut dyn FnMut(String, &Tensor, ParamKind)) {
        f(join(prefix, "w"), &self.w, ParamKind::Weight);
        if let Some(b) = &self.b {
            f(join(prefix, "b"), b, ParamKind::Bias);
        }
    }
}

pub struct Conv2d {
    pub w: Tensor,
    pub b: Option<Tensor>,
    pub stride: usize,
    pub pad: usize,
}

impl Conv2d {
    pub fn new(
        init: &mut Init,
        c_in: usize,
        c_out: usize,
        k: usize,
        stride: usize,
        pad: usize,
        bias: bool,
    ) -> Self {
        Conv2d {
            w: Tensor::param(init.trunc_normal(&[c_out, c_in, k, k])),
            b: bias.then(|| Tensor::param(init.zeros(&[c_out]))),
            stride,
            pad,
        }
    }

    pub fn forward(&self, x: &Tensor) -> Tensor {
        tensor::conv2d(x, &self.w, self.b.as_ref(), self.stride, self.pad)
    }

    pub fn out_channels(&self) -> usize {
        self.w.shape()[0]
    }
}

impl Module for Conv2d {
    fn visit_params(&self, prefix: &str, f: &mut dyn FnMut(String, &Tensor, ParamKind)) {
        f(join(prefix, "w"), &self.w, ParamKind::Weight);
        if let Some(b) = &self.b {
            f(join(prefix, "b"), b, ParamKind::Bias);
        }
    }
}

/// Layer normalization over the channel (last) axis of token tensors.
pub struct LayerNorm {
    pub gamma: Tensor,
    pub beta: Tensor,
    pub eps: f64,
}

impl LayerNorm {
    pub fn new(init: &mut Init, c: usize) -> Self {
        LayerNorm {
            gamma: Tensor::param(init.ones(&[c])),
            beta: Tensor::param(init.zeros(&[c])),
            eps: 1e-5,
        }
    }

    pub fn forward(&self, x: &Tensor) -> Tensor {
        tensor::layer_norm(x, &self.gamma, &self.beta, self.eps)
    }
}

impl Module for LayerNorm {
    fn visit_params(&self, prefix: &str, f: &mut dyn FnMut(String, &Tensor, ParamKind)) {
        f(join(prefix, "gamma"), &self.gamma, ParamKind::Norm);
        f(join(prefix, "beta"), &self.beta, ParamKind::Norm);
    }
}

/// Per-sample normalization of feature maps with per-channel affine, used
/// after convolutions. Stateless, so training and inference behave alike.
pub struct Norm2d {
    pub gamma: Tensor,
    pub beta: Tensor,
    pub eps: f64,
}

impl Norm2d {
    pub fn new(init: &mut Init, c: usize) -> Self {
        Norm2d {
            gamma: Tensor::param(init.ones(&[c])),
            beta: Tensor::param(init.zeros(&[c])),
            eps: 1e-5,
        }
    }

    pub fn forward(&self, x: &Tensor) -> Tensor {
        tensor::norm2d(x, &self.gamma, &self.beta, self.eps)
    }
}

impl Module for Norm2d {
    fn visit_params(&self, prefix: &str, f: &mut dyn FnMut(String, &Tensor, ParamKind)) {
        f(join(prefix, "gamma"), &self.gamma, ParamKind::Norm);
        f(join(prefix, "beta"), &self.beta, ParamKind::Norm);
    }
}

/// 3x3 convolution + normalization + rectifier, spatial size preserved.
pub struct ConvNormAct {
    pub conv: Conv2d,
    pub norm: Norm2d,
}

impl ConvNormAct {
    pub fn new(init: &mut Init, c_in: usize, c_out: usize) -> Self {
        ConvNormAct {
            conv: Conv2d::new(init, c_in, c_out, 3, 1, 1, true),
            norm: Norm2d::new(init, c_out),
        }
    }

    pub fn forward(&self, x: &Tensor) -> Tensor {
        tensor::relu(&self.norm.forward(&self.conv.forward(x)))
    }
}

impl Module for ConvNormAct {
    fn visit_params(&self, prefix: &str, f: &mut dyn FnMut(String, &Tensor, ParamKind)) {
        self.conv.visit_params(&join(prefix, "conv"), f);
        self.norm.visit_params(&join(prefix, "norm"), f);
    }
}

/// Residual unit: two 3x3 conv/norm/rectifier stages with a skip that is a
/// 1x1 projection when the channel width changes and identity otherwise.
pub struct ResidualBlock {
    pub conv1: Conv2d,
    pub norm1: Norm2d,
    pub conv2: Conv2d,
    pub norm2: Norm2d,
    pub skip: Option<Conv2d>,
}

impl ResidualBlock {
    pub fn new(init: &mut Init, c_in: usize, c_out: usize) -> Self {
        ResidualBlock {
            conv1: Conv2d::new(init, c_in, c_out, 3, 1, 1, true),
            norm1: Norm2d::new(init, c_out),
            conv2: Conv2d::new(init, c_out, c_out, 3, 1, 1, true),
            norm2: Norm2d::new(init, c_out),
            skip: (c_in != c_out).then(|| Conv2d::new(init, c_in, c_out, 1, 1, 0, true)),
        }
    }

    pub fn forward(&self, x: &Tensor) -> Tensor {
        let main = tensor::relu(&self.norm1.forward(&self.conv1.forward(x)));
        let main = self.norm2.forward(&self.conv2.forward(&main));
        let skip = match &self.skip {
            Some(p) => p.forward(x),
            None => x.clone(),
        };
        tensor::relu(&tensor::add(&main, &skip))
    }
}

impl Module for ResidualBlock {
    fn visit_params(&self, prefix: &str, f: &mut dyn FnMut(String, &Tensor, ParamKind)) {
        self.conv1.visit_params(&join(prefix, "conv1"), f);
        self.norm1.visit_params(&join(prefix, "norm1"), f);
        self.conv2.visit_params(&join(prefix, "conv2"), f);
        self.norm2.visit_params(&join(prefix, "norm2"), f);
        if let Some(s) = &self.skip {
            s.visit_params(&join(prefix, "skip"), f);
        }
    }
}

/// Transformer feed-forward block with smooth gating.
pub struct Mlp {
    pub fc1: Linear,
    pub fc2: Linear,
}

impl Mlp {
    pub fn new(init: &mut Init, c: usize, hidden: usize) -> Self {
        Mlp {
            fc1: Linear::new(init, c, hidden, true),
            fc2: Linear::new(init, hidden, c, true),
        }
    }

    pub fn forward(&self, x: &Tensor) -> Tensor {
        self.fc2.forward(&tensor::gelu(&self.fc1.forward(x)))
    }
}

impl Module for Mlp {
    fn visit_params(&self, prefix: &str, f: &mut dyn FnMut(String, &Tensor, ParamKind)) {
        self.fc1.visit_params(&join(prefix, "fc1"), f);
        self.fc2.visit_params(&join(prefix, "fc2"), f);
    }
}
