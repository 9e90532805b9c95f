//! Weight-sharing siamese pyramid-transformer encoder.
//!
//! Four stages of strided overlapping patch embedding followed by pre-norm
//! transformer blocks with spatial-reduction attention produce feature maps
//! at strides 4/8/16/32. The same encoder instance processes both temporal
//! images, which is what makes the branches weight-shared.

use crate::error::{DfpfError, Result};
use crate::nn::{join_name, Init, LayerNorm, Linear, Mlp, Module, ParamKind};
use crate::tensor::{self, Tensor};
use serde::{Deserialize, Serialize};

pub const PYRAMID_STRIDES: [usize; 4] = [4, 8, 16, 32];
pub const PATCH_STRIDES: [usize; 4] = [4, 2, 2, 2];

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct EncoderConfig {
    pub channels: [usize; 4],
    pub depths: [usize; 4],
    pub heads: [usize; 4],
    pub sr_ratios: [usize; 4],
    pub mlp_ratio: f64,
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        for j in 0..4 {
            if self.channels[j] == 0 || self.depths[j] == 0 || self.heads[j] == 0 {
                return Err(DfpfError::Config(format!(
                    "encoder stage {j}: channels, depths and heads must be positive"
                )));
            }
            if self.channels[j] % self.heads[j] != 0 {
                return Err(DfpfError::Config(format!(
                    "encoder stage {j}: channels {} not divisible by heads {}",
                    self.channels[j], self.heads[j]
                )));
            }
            if self.sr_ratios[j] == 0 {
                return Err(DfpfError::Config(format!(
                    "encoder stage {j}: sr_ratio must be positive"
                )));
            }
            if j > 0 && self.sr_ratios[j] > self.sr_ratios[j - 1] {
                return Err(DfpfError::Config(
                    "encoder sr_ratios must be nonincreasing across stages".into(),
                ));
            }
        }
        if self.mlp_ratio <= 0.0 {
            return Err(DfpfError::Config("mlp_ratio must be positive".into()));
        }
        Ok(())
    }
}

/// Checks the input-image contract: `[B, 3, H, W]`, sizes multiples of 32,
/// finite values in [0, 1].
pub fn validate_image_batch(x: &tensor::Arr) -> Result<()> {
    let s = x.shape();
    if s.len() != 4 || s[1] != 3 {
        return Err(DfpfError::Shape(format!(
            "image batch must be [B, 3, H, W], got {s:?}"
        )));
    }
    let (h, w) = (s[2], s[3]);
    if h < 32 || w < 32 || h % 32 != 0 || w % 32 != 0 {
        return Err(DfpfError::Input(format!(
            "image size {h}x{w} must be a multiple of 32 and at least 32"
        )));
    }
    for &v in x.iter() {
        if !v.is_finite() || !(0.0..=1.0).contains(&v) {
            return Err(DfpfError::Input(format!(
                "image values must be finite and within [0, 1]; found {v}"
            )));
        }
    }
    Ok(())
}

/// Overlapping strided patch embedding: conv then token layer norm.
pub struct PatchEmbed {
    conv: crate::nn::Conv2d,
    norm: LayerNorm,
}

impl PatchEmbed {
    fn new(init: &mut Init, c_in: usize, c_out: usize, k: usize, stride: usize) -> Self {
        PatchEmbed {
            conv: crate::nn::Conv2d::new(init, c_in, c_out, k, stride, k / 2, true),
            norm: LayerNorm::new(init, c_out),
        }
    }

    /// Returns normalized tokens `[B, N, C]` and the token grid size.
    fn forward(&self, x: &Tensor) -> (Tensor, usize, usize) {
        let fm = self.conv.forward(x);
        let s = fm.shape();
        let (h, w) = (s[2], s[3]);
        let tokens = tensor::nchw_to_tokens(&fm);
        (self.norm.forward(&tokens), h, w)
    }
}

impl Module for PatchEmbed {
    fn visit_params(&self, prefix: &str, f: &mut dyn FnMut(String, &Tensor, ParamKind)) {
        self.conv.visit_params(&join_name(prefix, "conv"), f);
        self.norm.visit_params(&join_name(prefix, "norm"), f);
    }
}

/// Multi-head softmax attention whose keys/values come from a spatially
/// reduced copy of the tokens (strided sr x sr convolution plus layer norm)
/// when `sr_ratio > 1`. Logits are scaled by `1/sqrt(C/heads)`.
pub struct SraAttention {
    pub heads: usize,
    pub sr_ratio: usize,
    q: Linear,
    k: Linear,
    v: Linear,
    proj: Linear,
    sr_conv: Option<crate::nn::Conv2d>,
    sr_norm: Option<LayerNorm>,
}

impl SraAttention {
    pub fn new(init: &mut Init, c: usize, heads: usize, sr_ratio: usize) -> Self {
        SraAttention {
            heads,
            sr_ratio,
            q: Linear::new(init, c, c, true),
            k: Linear::new(init, c, c, true),
            v: Linear::new(init, c, c, true),
            proj: Linear::new(init, c, c, true),
            sr_conv: (sr_ratio > 1)
                .then(|| crate::nn::Conv2d::new(init, c, c, sr_ratio, sr_ratio, 0, true)),
            sr_norm: (sr_ratio > 1).then(|| LayerNorm::new(init, c)),
        }
    }

    /// Attention over tokens `[B, N, C]` laid out on an `h x w` grid.
    pub fn forward(&self, tokens: &Tensor, h: usize, w: usize) -> Result<Tensor> {
        let s = tokens.shape();
        if s.len() != 3 {
            return Err(DfpfError::Shape(format!(
                "attention expects [B, N, C] tokens, got {s:?}"
            )));
        }
        let (n, c) = (s[1], s[2]);
        if n != h * w {
            return Err(DfpfError::Shape(format!(
                "token count {n} does not match grid {h}x{w}"
            )));
        }
        if c % self.heads != 0 {
            return Err(DfpfError::Shape(format!(
                "channels {c} not divisible by heads {}",
                self.heads
            )));
        }
        if h % self.sr_ratio != 0 || w % self.sr_ratio != 0 {
            return Err(DfpfError::Config(format!(
                "sr_ratio {} does not divide token grid {h}x{w}",
                self.sr_ratio
            )));
        }

        let q = self.q.forward(tokens);
        let kv_src = match (&self.sr_conv, &self.sr_norm) {
            (Some(conv), Some(norm)) => {
                let grid = tensor::tokens_to_nchw(tokens, h, w);
                let reduced = conv.forward(&grid);
                norm.forward(&tensor::nchw_to_tokens(&reduced))
            }
            _ => tokens.clone(),
        };
        let k = self.k.forward(&kv_src);
        let v = self.v.forward(&kv_src);

        let dh = c / self.heads;
        let qh = tensor::split_heads(&q, self.heads);
        let kh = tensor::split_heads(&k, self.heads);
        let vh = tensor::split_heads(&v, self.heads);
        let scores = tensor::scale(&tensor::bmm_nt(&qh, &kh), 1.0 / (dh as f64).sqrt());
        let attn = tensor::softmax_lastdim(&scores);
        let out = tensor::merge_heads(&tensor::bmm(&attn, &vh));
        Ok(self.proj.forward(&out))
    }
}

impl Module for SraAttention {
    fn visit_params(&self, prefix: &str, f: &mut dyn FnMut(String, &Tensor, ParamKind)) {
        self.q.visit_params(&join_name(prefix, "q"), f);
        self.k.visit_params(&join_name(prefix, "k"), f);
        self.v.visit_params(&join_name(prefix, "v"), f);
        self.proj.visit_params(&join_name(prefix, "proj"), f);
        if let Some(c) = &self.sr_conv {
            c.visit_params(&join_name(prefix, "sr_conv"), f);
        }
        if let Some(n) = &self.sr_norm {
            n.visit_params(&join_name(prefix, "sr_norm"), f);
        }
    }
}

/// Pre-norm transformer block: `x + Attn(LN(x))`, then `x + Mlp(LN(x))`.
pub struct PvtBlock {
    norm1: LayerNorm,
    pub attn: SraAttention,
    norm2: LayerNorm,
    mlp: Mlp,
}

impl PvtBlock {
    pub fn new(init: &mut Init, c: usize, heads: usize, sr_ratio: usize, mlp_ratio: f64) -> Self {
        let hidden = ((c as f64) * mlp_ratio).round().max(1.0) as usize;
        PvtBlock {
            norm1: LayerNorm::new(init, c),
            attn: SraAttention::new(init, c, heads, sr_ratio),
            norm2: LayerNorm::new(init, c),
            mlp: Mlp::new(init, c, hidden),
        }
    }

    pub fn forward(&self, tokens: &Tensor, h: usize, w: usize) -> Result<Tensor> {
        let attended = self.attn.forward(&self.norm1.forward(tokens), h, w)?;
        let x = tensor::add(tokens, &attended);
        let fed = self.mlp.forward(&self.norm2.forward(&x));
        Ok(tensor::add(&x, &fed))
    }
}

impl Module for PvtBlock {
    fn visit_params(&self, prefix: &str, f: &mut dyn FnMut(String, &Tensor, ParamKind)) {
        self.norm1.visit_params(&join_name(prefix, "norm1"), f);
        self.attn.visit_params(&join_name(prefix, "attn"), f);
        self.norm2.visit_params(&join_name(prefix, "norm2"), f);
        self.mlp.visit_params(&join_name(prefix, "mlp"), f);
    }
}

struct PvtStage {
    embed: PatchEmbed,
    blocks: Vec<PvtBlock>,
    out_norm: LayerNorm,
}

impl Module for PvtStage {
    fn visit_params(&self, prefix: &str, f: &mut dyn FnMut(String, &Tensor, ParamKind)) {
        self.embed.visit_params(&join_name(prefix, "embed"), f);
        for (i, b) in self.blocks.iter().enumerate() {
            b.visit_params(&join_name(prefix, &format!("block{i}")), f);
        }
        self.out_norm.visit_params(&join_name(prefix, "out_norm"), f);
    }
}

pub struct PvtEncoder {
    stages: Vec<PvtStage>,
    pub cfg: EncoderConfig,
}

impl PvtEncoder {
    pub fn new(init: &mut Init, cfg: &EncoderConfig) -> Result<Self> {
        cfg.validate()?;
        let mut stages = Vec::with_capacity(4);
        let mut c_in = 3;
        for j in 0..4 {
            let c = cfg.channels[j];
            let (k, stride) = if j == 0 { (7, 4) } else { (3, 2) };
            let mut init_stage = || -> PvtStage {
                let embed = PatchEmbed::new(init, c_in, c, k, stride);
                let blocks = (0..cfg.depths[j])
                    .map(|_| PvtBlock::new(init, c, cfg.heads[j], cfg.sr_ratios[j], cfg.mlp_ratio))
                    .collect();
                PvtStage {
                    embed,
                    blocks,
                    out_norm: LayerNorm::new(init, c),
                }
            };
            stages.push(init_stage());
            c_in = c;
        }
        Ok(PvtEncoder {
            stages,
            cfg: cfg.clone(),
        })
    }

    /// Produces the 4-level feature pyramid (strides 4/8/16/32) for one
    /// image batch already validated by the caller.
    pub fn forward(&self, image: &Tensor) -> Result<Vec<Tensor>> {
        let mut levels = Vec::with_capacity(4);
        let mut x = image.clone();
        for stage in &self.stages {
            let (tokens, h, w) = stage.embed.forward(&x);
            let mut t = tokens;
            for block in &stage.blocks {
                t = block.forward(&t, h, w)?;
            }
            let t = stage.out_norm.forward(&t);
            let fm = tensor::tokens_to_nchw(&t, h, w);
            levels.push(fm.clone());
            x = fm;
        }
        Ok(levels)
    }

    /// Encodes both temporal images with the same parameters.
    pub fn siamese_forward(&self, a: &Tensor, b: &Tensor) -> Result<(Vec<Tensor>, Vec<Tensor>)> {
        if a.shape() != b.shape() {
            return Err(DfpfError::Shape(format!(
                "bi-temporal images must share shape, got {:?} vs {:?}",
                a.shape(),
                b.shape()
            )));
        }
        Ok((self.forward(a)?, self.forward(b)?))
    }
}

impl Module for PvtEncoder {
    fn visit_params(&self, prefix: &str, f: &mut dyn FnMut(String, &Tensor, ParamKind)) {
        for (j, s) in self.stages.iter().enumerate() {
            s.visit_params(&join_name(prefix, &format!("stage{j}")), f);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::{check_gradients, fixture_array};
    use crate::nn::param_count;
    use ndarray::IxDyn;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn init() -> Init {
        Init::new(ChaCha8Rng::seed_from_u64(11))
    }

    fn tiny_cfg() -> EncoderConfig {
        EncoderConfig {
            channels: [8, 16, 32, 64],
            depths: [1, 1, 1, 1],
            heads: [1, 2, 4, 8],
            sr_ratios: [8, 4, 2, 1],
            mlp_ratio: 4.0,
        }
    }

    /// Brute-force multi-head attention: exp(q.k/sqrt(dh)) softmax by loops.
    fn attention_oracle(
        q: &ndarray::Array2<f64>,
        k: &ndarray::Array2<f64>,
        v: &ndarray::Array2<f64>,
        heads: usize,
    ) -> ndarray::Array2<f64> {
        let (n, c) = q.dim();
        let m = k.nrows();
        let dh = c / heads;
        let mut out = ndarray::Array2::<f64>::zeros((n, c));
        for hd in 0..heads {
            let cols = hd * dh..(hd + 1) * dh;
            for i in 0..n {
                let mut weights = vec![0.0; m];
                let mut denom = 0.0;
                for j in 0..m {
                    let mut dot = 0.0;
                    for d in cols.clone() {
                        dot += q[[i, d]] * k[[j, d]];
                    }
                    let wgt = (dot / (dh as f64).sqrt()).exp();
                    weights[j] = wgt;
                    denom += wgt;
                }
                for d in cols.clone() {
                    let mut acc = 0.0;
                    for j in 0..m {
                        acc += weights[j] / denom * v[[j, d]];
                    }
                    out[[i, d]] = acc;
                }
            }
        }
        out
    }

    /// Applies the layer's own projections on a plain array, then compares
    /// the attention core against the double-loop oracle.
    #[test]
    fn sra_matches_bruteforce_oracle_when_unreduced() {
        let mut i = init();
        let attn = SraAttention::new(&mut i, 8, 2, 1);
        let tokens = fixture_array(&[1, 8, 8], 3); // 2x4 grid, N=8
        let out = attn
            .forward(&Tensor::constant(tokens.clone()), 2, 4)
            .unwrap()
            .to_array();

        // oracle path: q/k/v projections by hand, loops for attention
        let t2 = tokens.to_shape((8, 8)).unwrap().to_owned();
        let lin = |l: &Linear, x: &ndarray::Array2<f64>| -> ndarray::Array2<f64> {
            let w = l.w.to_array();
            let w2 = w.view().into_dimensionality::<ndarray::Ix2>().unwrap().to_owned();
            let mut y = x.dot(&w2);
            if let Some(b) = &l.b {
                let bv = b.to_array();
                let b1 = bv.view().into_dimensionality::<ndarray::Ix1>().unwrap().to_owned();
                y += &b1;
            }
            y
        };
        let q = lin(&attn.q, &t2);
        let k = lin(&attn.k, &t2);
        let v = lin(&attn.v, &t2);
        let core = attention_oracle(&q, &k, &v, 2);
        let expected = lin(&attn.proj, &core);
        let got = out.to_shape((8, 8)).unwrap().to_owned();
        for (a, b) in got.iter().zip(expected.iter()) {
            assert!((a - b).abs() < 1e-6, "{a} vs {b}");
        }
    }

    #[test]
    fn sra_reduces_key_count_and_keeps_shape() {
        let mut i = init();
        let attn = SraAttention::new(&mut i, 8, 2, 2);
        // 8x8 grid -> reduction to 4x4 = 16 keys
        let reduced = attn
            .sr_conv
            .as_ref()
            .unwrap()
            .forward(&Tensor::constant(fixture_array(&[1, 8, 8, 8], 4)));
        assert_eq!(reduced.shape(), vec![1, 8, 4, 4]);
        let tokens = fixture_array(&[2, 64, 8], 5);
        let out = attn.forward(&Tensor::constant(tokens), 8, 8).unwrap();
        assert_eq!(out.shape(), vec![2, 64, 8]);
    }

    #[test]
    fn sra_rejects_nondividing_ratio() {
        let mut i = init();
        let attn = SraAttention::new(&mut i, 8, 1, 4);
        let tokens = fixture_array(&[1, 6, 8], 6); // 2x3 grid, 4 divides neither
        let err = attn.forward(&Tensor::constant(tokens), 2, 3).unwrap_err();
        assert!(matches!(err, DfpfError::Config(_)));
    }

    #[test]
    fn sra_rejects_bad_token_count() {
        let mut i = init();
        let attn = SraAttention::new(&mut i, 8, 1, 1);
        let tokens = fixture_array(&[1, 6, 8], 16);
        let err = attn.forward(&Tensor::constant(tokens), 2, 4).unwrap_err();
        assert!(matches!(err, DfpfError::Shape(_)));
    }

    #[test]
    fn pyramid_shapes_for_256_and_128() {
        let enc = PvtEncoder::new(&mut init(), &tiny_cfg()).unwrap();
        let img = Tensor::constant(ndarray::ArrayD::from_elem(IxDyn(&[2, 3, 256, 256]), 0.5));
        let levels = crate::tensor::no_grad(|| enc.forward(&img)).unwrap();
        let sizes: Vec<Vec<usize>> = levels.iter().map(|l| l.shape()).collect();
        assert_eq!(
            sizes,
            vec![
                vec![2, 8, 64, 64],
                vec![2, 16, 32, 32],
                vec![2, 32, 16, 16],
                vec![2, 64, 8, 8],
            ]
        );
        let img = Tensor::constant(ndarray::ArrayD::from_elem(IxDyn(&[1, 3, 128, 128]), 0.1));
        let levels = crate::tensor::no_grad(|| enc.forward(&img)).unwrap();
        assert_eq!(levels[0].shape(), vec![1, 8, 32, 32]);
        assert_eq!(levels[3].shape(), vec![1, 64, 4, 4]);
    }

    #[test]
    fn encoder_deterministic_and_weight_shared() {
        let enc = PvtEncoder::new(&mut init(), &tiny_cfg()).unwrap();
        let a = fixture_array(&[1, 3, 32, 32], 8).mapv(|v| v.abs());
        let ta = Tensor::constant(a.clone());
        let (p1, p2) = crate::tensor::no_grad(|| enc.siamese_forward(&ta, &ta)).unwrap();
        for (l1, l2) in p1.iter().zip(p2.iter()) {
            assert_eq!(l1.to_array(), l2.to_array());
        }
        // two calls, bitwise identical
        let again = crate::tensor::no_grad(|| enc.forward(&ta)).unwrap();
        for (l1, l2) in p1.iter().zip(again.iter()) {
            assert_eq!(l1.to_array(), l2.to_array());
        }
        // swapping inputs swaps outputs exactly
        let b = fixture_array(&[1, 3, 32, 32], 9).mapv(|v| v.abs());
        let tb = Tensor::constant(b);
        let (x1, x2) = crate::tensor::no_grad(|| enc.siamese_forward(&ta, &tb)).unwrap();
        let (y1, y2) = crate::tensor::no_grad(|| enc.siamese_forward(&tb, &ta)).unwrap();
        for j in 0..4 {
            assert_eq!(x1[j].to_array(), y2[j].to_array());
            assert_eq!(x2[j].to_array(), y1[j].to_array());
        }
    }

    #[test]
    fn siamese_param_count_equals_single_encoder() {
        let enc = PvtEncoder::new(&mut init(), &tiny_cfg()).unwrap();
        // weight sharing: one parameter set regardless of how many branches
        let single = param_count(&enc);
        let collected = crate::nn::collect_params(&enc);
        assert_eq!(
            collected.iter().map(|(_, t, _)| t.len() as u64).sum::<u64>(),
            single
        );
    }

    #[test]
    fn siamese_rejects_shape_mismatch() {
        let enc = PvtEncoder::new(&mut init(), &tiny_cfg()).unwrap();
        let a = Tensor::constant(ndarray::ArrayD::zeros(IxDyn(&[1, 3, 32, 32])));
        let b = Tensor::constant(ndarray::ArrayD::zeros(IxDyn(&[1, 3, 64, 64])));
        assert!(enc.siamese_forward(&a, &b).is_err());
    }

    #[test]
    fn image_batch_validation() {
        let ok = ndarray::ArrayD::from_elem(IxDyn(&[1, 3, 32, 64]), 0.5);
        assert!(validate_image_batch(&ok).is_ok());
        let bad_size = ndarray::ArrayD::from_elem(IxDyn(&[1, 3, 33, 64]), 0.5);
        assert!(validate_image_batch(&bad_size).is_err());
        let mut bad_range = ok.clone();
        bad_range[[0, 0, 0, 0]] = 1.5;
        assert!(validate_image_batch(&bad_range).is_err());
        let mut bad_nan = ok;
        bad_nan[[0, 1, 2, 3]] = f64::NAN;
        assert!(validate_image_batch(&bad_nan).is_err());
    }

    /// Single transformer block at C=8, depth 1, N=16: double-precision
    /// finite differences against the analytic backward.
    #[test]
    fn grad_pvt_block_tiny() {
        let mut i = init();
        let block = PvtBlock::new(&mut i, 8, 2, 1, 2.0);
        let tokens = fixture_array(&[1, 16, 8], 10);
        check_gradients(
            |t| {
                crate::tensor::sum_all(&crate::tensor::square(
                    &block.forward(&t[0], 4, 4).unwrap(),
                ))
            },
            &[tokens],
            1e-5,
            1e-4,
        );
    }

    #[test]
    fn attention_rows_sum_to_one_across_stages() {
        // exercised structurally: softmax_lastdim guarantees normalization;
        // here we check through the public path with sr reduction active.
        let mut i = init();
        let attn = SraAttention::new(&mut i, 8, 2, 2);
        let tokens = fixture_array(&[1, 16, 8], 12);
        let out = attn.forward(&Tensor::constant(tokens.clone()), 4, 4).unwrap();
        assert_eq!(out.shape(), vec![1, 16, 8]);
        // constant-value property: if V rows were constant the output would
        // be that constant; emulate by zeroing v weights and bias to c
        attn.v.w.update_value(|w| w.fill(0.0));
        if let Some(b) = &attn.v.b {
            b.update_value(|bv| bv.fill(0.7));
        }
        let zeroed = attn.forward(&Tensor::constant(tokens), 4, 4).unwrap();
        // before final projection every row is 0.7; after projection all rows equal
        let arr = zeroed.to_array();
        let rows = arr.to_shape((16, 8)).unwrap().to_owned();
        for r in 1..16 {
            for c in 0..8 {
                assert!((rows[[r, c]] - rows[[0, c]]).abs() < 1e-9);
            }
        }
    }
}
