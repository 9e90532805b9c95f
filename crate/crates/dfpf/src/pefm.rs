//! Progressive Enhanced Fusion Module.
//!
//! Per pyramid level: preprocess each temporal feature map with a 3x3
//! conv/norm/rectifier, fuse the raw pair and their absolute difference
//! through a first residual layer (shallow features), cross-multiply the
//! preprocessed maps with the opposite raw maps, and fuse the crossed maps
//! with the shallow features through a second residual layer (deep
//! features). The deep map is the module output for that level.

use crate::error::{DfpfError, Result};
use crate::nn::{join_name, Conv2d, ConvNormAct, Init, Module, ParamKind, ResidualBlock};
use crate::tensor::{self, Tensor};

fn ensure_same_shape(a: &Tensor, b: &Tensor, what: &str) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(DfpfError::Shape(format!(
            "{what}: shapes differ ({:?} vs {:?})",
            a.shape(),
            b.shape()
        )));
    }
    Ok(())
}

/// Elementwise `|x2 - x1|`. Symmetric, nonnegative, zero iff equal.
pub fn abs_difference(x1: &Tensor, x2: &Tensor) -> Result<Tensor> {
    ensure_same_shape(x1, x2, "abs_difference")?;
    Ok(tensor::abs(&tensor::sub(x2, x1)))
}

/// Cross interaction: `(x1p * x2, x2p * x1)` elementwise, where `x1p`/`x2p`
/// are the preprocessed maps supplied by the caller.
pub fn cross_interact(
    x1p: &Tensor,
    x2p: &Tensor,
    x1: &Tensor,
    x2: &Tensor,
) -> Result<(Tensor, Tensor)> {
    ensure_same_shape(x1p, x2, "cross_interact")?;
    ensure_same_shape(x2p, x1, "cross_interact")?;
    ensure_same_shape(x1, x2, "cross_interact")?;
    Ok((tensor::mul(x1p, x2), tensor::mul(x2p, x1)))
}

/// Resizes `x` to the spatial size of `like` when they differ (bilinear);
/// levels produced by the encoder are already aligned, so this is normally
/// the identity.
pub fn align_spatial(x: &Tensor, like: &Tensor) -> Tensor {
    let (sx, sl) = (x.shape(), like.shape());
    if sx[2] == sl[2] && sx[3] == sl[3] {
        x.clone()
    } else {
        tensor::bilinear_resize(x, sl[2], sl[3])
    }
}

/// Per-level shallow and deep fusion outputs.
pub struct FusedLevel {
    pub shallow: Tensor,
    pub deep: Tensor,
}

/// One fusion level: separate preprocessing per temporal branch, dual
/// residual layers R1 (3C -> C) and R2 (3C -> C).
pub struct PefmLevel {
    pre1: ConvNormAct,
    pre2: ConvNormAct,
    r1: ResidualBlock,
    r2: ResidualBlock,
}

impl PefmLevel {
    pub fn new(init: &mut Init, c: usize) -> Self {
        PefmLevel {
            pre1: ConvNormAct::new(init, c, c),
            pre2: ConvNormAct::new(init, c, c),
            r1: ResidualBlock::new(init, 3 * c, c),
            r2: ResidualBlock::new(init, 3 * c, c),
        }
    }

    /// Preprocessing convolution for one branch (shape preserved).
    pub fn preprocess(&self, x: &Tensor, branch: usize) -> Tensor {
        match branch {
            0 => self.pre1.forward(x),
            _ => self.pre2.forward(x),
        }
    }

    /// Shallow fusion: residual layer over `cat(x1, x2, diff)`.
    pub fn shallow_fuse(&self, x1: &Tensor, x2: &Tensor, diff: &Tensor) -> Result<Tensor> {
        ensure_same_shape(x1, x2, "shallow_fuse")?;
        ensure_same_shape(x1, diff, "shallow_fuse")?;
        Ok(self.r1.forward(&tensor::concat_channels(&[x1, x2, diff])))
    }

    /// Deep fusion: residual layer over `cat(cross1, cross2, shallow)`.
    pub fn deep_fuse(&self, cross1: &Tensor, cross2: &Tensor, shallow: &Tensor) -> Result<Tensor> {
        ensure_same_shape(cross1, cross2, "deep_fuse")?;
        if cross1.shape()[0] != shallow.shape()[0]
            || cross1.shape()[2..] != shallow.shape()[2..]
        {
            return Err(DfpfError::Shape(
                "deep_fuse: spatial/batch dims must match".into(),
            ));
        }
        Ok(self
            .r2
            .forward(&tensor::concat_channels(&[cross1, cross2, shallow])))
    }

    pub fn forward(&self, x1: &Tensor, x2: &Tensor) -> Result<FusedLevel> {
        ensure_same_shape(x1, x2, "pefm level")?;
        let x2_aligned = align_spatial(x2, x1);
        let diff = abs_difference(x1, &x2_aligned)?;
        let shallow = self.shallow_fuse(x1, &x2_aligned, &diff)?;
        let x1p = self.preprocess(x1, 0);
        let x2p = self.preprocess(&x2_aligned, 1);
        let (cross1, cross2) = cross_interact(&x1p, &x2p, x1, &x2_aligned)?;
        let deep = self.deep_fuse(&cross1, &cross2, &shallow)?;
        Ok(FusedLevel { shallow, deep })
    }
}

impl Module for PefmLevel {
    fn visit_params(&self, prefix: &str, f: &mut dyn FnMut(String, &Tensor, ParamKind)) {
        self.pre1.visit_params(&join_name(prefix, "pre1"), f);
        self.pre2.visit_params(&join_name(prefix, "pre2"), f);
        self.r1.visit_params(&join_name(prefix, "r1"), f);
        self.r2.visit_params(&join_name(prefix, "r2"), f);
    }
}

/// Full module: one fusion level per pyramid level.
pub struct Pefm {
    pub levels: Vec<PefmLevel>,
}

impl Pefm {
    pub fn new(init: &mut Init, channels: &[usize; 4]) -> Self {
        Pefm {
            levels: channels.iter().map(|&c| PefmLevel::new(init, c)).collect(),
        }
    }

    pub fn forward(&self, pyr1: &[Tensor], pyr2: &[Tensor]) -> Result<Vec<FusedLevel>> {
        if pyr1.len() != self.levels.len() || pyr2.len() != self.levels.len() {
            return Err(DfpfError::Shape(format!(
                "pefm expects {} pyramid levels, got {}/{}",
                self.levels.len(),
                pyr1.len(),
                pyr2.len()
            )));
        }
        self.levels
            .iter()
            .zip(pyr1.iter().zip(pyr2.iter()))
            .map(|(level, (a, b))| level.forward(a, b))
            .collect()
    }
}

impl Module for Pefm {
    fn visit_params(&self, prefix: &str, f: &mut dyn FnMut(String, &Tensor, ParamKind)) {
        for (j, l) in self.levels.iter().enumerate() {
            l.visit_params(&join_name(prefix, &format!("level{j}")), f);
        }
    }
}

/// Ablation replacement: plain concatenation of the two temporal maps
/// followed by a 1x1 projection back to the level width.
pub struct ConcatFusion {
    pub projs: Vec<Conv2d>,
}

impl ConcatFusion {
    pub fn new(init: &mut Init, channels: &[usize; 4]) -> Self {
        ConcatFusion {
            projs: channels
                .iter()
                .map(|&c| Conv2d::new(init, 2 * c, c, 1, 1, 0, true))
                .collect(),
        }
    }

    pub fn forward(&self, pyr1: &[Tensor], pyr2: &[Tensor]) -> Result<Vec<FusedLevel>> {
        if pyr1.len() != self.projs.len() || pyr2.len() != self.projs.len() {
            return Err(DfpfError::Shape("concat fusion: level count".into()));
        }
        self.projs
            .iter()
            .zip(pyr1.iter().zip(pyr2.iter()))
            .map(|(proj, (a, b))| {
                ensure_same_shape(a, b, "concat fusion")?;
                let fused = proj.forward(&tensor::concat_channels(&[a, b]));
                Ok(FusedLevel {
                    shallow: fused.clone(),
                    deep: fused,
                })
            })
            .collect()
    }
}

impl Module for ConcatFusion {
    fn visit_params(&self, prefix: &str, f: &mut dyn FnMut(String, &Tensor, ParamKind)) {
        for (j, p) in self.projs.iter().enumerate() {
            p.visit_params(&join_name(prefix, &format!("proj{j}")), f);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::{check_gradients, fixture_array};
    use crate::tensor::{no_grad, sum_all};
    use ndarray::IxDyn;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn init() -> Init {
        Init::new(ChaCha8Rng::seed_from_u64(21))
    }

    type Arr = ndarray::ArrayD<f64>;

    #[test]
    fn abs_difference_identity_and_constant() {
        let a = Tensor::constant(fixture_array(&[1, 4, 6, 6], 1));
        let zero = abs_difference(&a, &a).unwrap().to_array();
        assert!(zero.iter().all(|&v| v == 0.0));

        let x1 = Tensor::constant(Arr::zeros(IxDyn(&[1, 2, 3, 3])));
        let x2 = Tensor::constant(Arr::from_elem(IxDyn(&[1, 2, 3, 3]), 5.0));
        let d = abs_difference(&x1, &x2).unwrap().to_array();
        assert!(d.iter().all(|&v| v == 5.0));
    }

    #[test]
    fn abs_difference_symmetric_nonnegative() {
        let a = fixture_array(&[2, 3, 4, 4], 2);
        let b = fixture_array(&[2, 3, 4, 4], 3);
        let ta = Tensor::constant(a);
        let tb = Tensor::constant(b);
        let d1 = abs_difference(&ta, &tb).unwrap().to_array();
        let d2 = abs_difference(&tb, &ta).unwrap().to_array();
        assert_eq!(d1, d2);
        assert!(d1.iter().all(|&v| v >= 0.0));
    }

    #[test]
    fn abs_difference_rejects_mismatch() {
        let a = Tensor::constant(Arr::zeros(IxDyn(&[1, 2, 3, 3])));
        let b = Tensor::constant(Arr::zeros(IxDyn(&[1, 2, 4, 4])));
        assert!(abs_difference(&a, &b).is_err());
    }

    #[test]
    fn cross_interact_identity_annihilator_oracle() {
        let ones = Tensor::constant(Arr::ones(IxDyn(&[1, 2, 3, 3])));
        let zeros = Tensor::constant(Arr::zeros(IxDyn(&[1, 2, 3, 3])));
        let x1 = Tensor::constant(fixture_array(&[1, 2, 3, 3], 4));
        let x2 = Tensor::constant(fixture_array(&[1, 2, 3, 3], 5));
        // all-ones x1p passes x2 through; all-zeros x2p annihilates
        let (c1, c2) = cross_interact(&ones, &zeros, &x1, &x2).unwrap();
        assert_eq!(c1.to_array(), x2.to_array());
        assert!(c2.to_array().iter().all(|&v| v == 0.0));

        // random inputs match an independent elementwise-product loop
        let x1p = Tensor::constant(fixture_array(&[1, 2, 3, 3], 6));
        let x2p = Tensor::constant(fixture_array(&[1, 2, 3, 3], 7));
        let (c1, c2) = cross_interact(&x1p, &x2p, &x1, &x2).unwrap();
        let (a1, a2) = (c1.to_array(), c2.to_array());
        for idx in 0..a1.len() {
            let e1 = x1p.to_array().as_slice().unwrap()[idx] * x2.to_array().as_slice().unwrap()[idx];
            let e2 = x2p.to_array().as_slice().unwrap()[idx] * x1.to_array().as_slice().unwrap()[idx];
            assert_eq!(a1.as_slice().unwrap()[idx], e1);
            assert_eq!(a2.as_slice().unwrap()[idx], e2);
        }
    }

    #[test]
    fn preprocess_preserves_shape_and_is_deterministic() {
        let level = PefmLevel::new(&mut init(), 16);
        let x = Tensor::constant(fixture_array(&[1, 16, 8, 8], 8));
        let y1 = no_grad(|| level.preprocess(&x, 0));
        assert_eq!(y1.shape(), vec![1, 16, 8, 8]);
        let y2 = no_grad(|| level.preprocess(&x, 0));
        assert_eq!(y1.to_array(), y2.to_array());
    }

    #[test]
    fn shallow_fuse_width_arithmetic() {
        let level = PefmLevel::new(&mut init(), 16);
        let m = || Tensor::constant(fixture_array(&[1, 16, 8, 8], 9));
        let out = level.shallow_fuse(&m(), &m(), &m()).unwrap();
        assert_eq!(out.shape(), vec![1, 16, 8, 8]);
    }

    #[test]
    fn deep_fuse_width_arithmetic() {
        // widths (16, 16, C_fuse=16) -> concat 48 -> output 16
        let level = PefmLevel::new(&mut init(), 16);
        let m = |s| Tensor::constant(fixture_array(&[1, 16, 8, 8], s));
        let out = level.deep_fuse(&m(10), &m(11), &m(12)).unwrap();
        assert_eq!(out.shape(), vec![1, 16, 8, 8]);
    }

    #[test]
    fn identical_inputs_zero_diff_branch() {
        let level = PefmLevel::new(&mut init(), 4);
        let x = Tensor::constant(fixture_array(&[1, 4, 6, 6], 13));
        let diff = abs_difference(&x, &x).unwrap();
        assert!(diff.to_array().iter().all(|&v| v == 0.0));
        let fused = level.forward(&x, &x).unwrap();
        assert_eq!(fused.deep.shape(), vec![1, 4, 6, 6]);
    }

    #[test]
    fn forward_pyramid_shapes() {
        let pefm = Pefm::new(&mut init(), &[4, 8, 16, 32]);
        let mk = |c, s| Tensor::constant(fixture_array(&[2, c, s, s], c as u64));
        let pyr1 = vec![mk(4, 64), mk(8, 32), mk(16, 16), mk(32, 8)];
        let pyr2 = vec![mk(4, 64), mk(8, 32), mk(16, 16), mk(32, 8)];
        let out = no_grad(|| pefm.forward(&pyr1, &pyr2)).unwrap();
        let sizes: Vec<usize> = out.iter().map(|f| f.deep.shape()[2]).collect();
        assert_eq!(sizes, vec![64, 32, 16, 8]);
        for (f, p) in out.iter().zip(pyr1.iter()) {
            assert_eq!(f.deep.shape(), p.shape());
            assert_eq!(f.shallow.shape(), p.shape());
        }
    }

    #[test]
    fn forward_rejects_level_mismatch() {
        let pefm = Pefm::new(&mut init(), &[4, 8, 16, 32]);
        let mk = |c, s| Tensor::constant(fixture_array(&[1, c, s, s], 1));
        let pyr = vec![mk(4, 8), mk(8, 4)];
        assert!(pefm.forward(&pyr, &pyr).is_err());
    }

    #[test]
    fn concat_fusion_composes() {
        let alt = ConcatFusion::new(&mut init(), &[4, 8, 16, 32]);
        let mk = |c, s| Tensor::constant(fixture_array(&[1, c, s, s], c as u64));
        let pyr1 = vec![mk(4, 16), mk(8, 8), mk(16, 4), mk(32, 2)];
        let pyr2 = vec![mk(4, 16), mk(8, 8), mk(16, 4), mk(32, 2)];
        let out = no_grad(|| alt.forward(&pyr1, &pyr2)).unwrap();
        assert_eq!(out.len(), 4);
        assert_eq!(out[0].deep.shape(), vec![1, 4, 16, 16]);
    }

    #[test]
    fn grad_preprocess_conv() {
        let level = PefmLevel::new(&mut init(), 3);
        let x = fixture_array(&[1, 3, 4, 4], 14);
        check_gradients(
            |t| sum_all(&crate::tensor::square(&level.preprocess(&t[0], 0))),
            &[x],
            1e-5,
            1e-4,
        );
    }

    #[test]
    fn grad_shallow_and_deep_fuse() {
        let level = PefmLevel::new(&mut init(), 3);
        let mk = |s| fixture_array(&[1, 3, 4, 4], s);
        check_gradients(
            |t| {
                sum_all(&crate::tensor::square(
                    &level.shallow_fuse(&t[0], &t[1], &t[2]).unwrap(),
                ))
            },
            &[mk(15), mk(16), mk(17)],
            1e-5,
            1e-4,
        );
        check_gradients(
            |t| {
                sum_all(&crate::tensor::square(
                    &level.deep_fuse(&t[0], &t[1], &t[2]).unwrap(),
                ))
            },
            &[mk(18), mk(19), mk(20)],
            1e-5,
            1e-4,
        );
    }

    #[test]
    fn grad_full_level() {
        let level = PefmLevel::new(&mut init(), 3);
        let x1 = fixture_array(&[1, 3, 4, 4], 21);
        let x2 = fixture_array(&[1, 3, 4, 4], 22);
        check_gradients(
            |t| {
                let fused = level.forward(&t[0], &t[1]).unwrap();
                sum_all(&crate::tensor::square(&fused.deep))
            },
            &[x1, x2],
            1e-5,
            1e-4,
        );
    }
}
