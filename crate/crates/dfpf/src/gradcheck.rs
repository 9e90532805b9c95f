//! Finite-difference verification of analytic gradients.
//!
//! The numeric side is a central difference of the scalar forward map and
//! never touches the backward pass it checks.

use crate::tensor::{Arr, Tensor};

/// Outcome of a finite-difference sweep.
#[derive(Debug, Clone)]
pub struct GradCheckReport {
    /// Largest relative error over all checked elements.
    pub max_rel_err: f64,
    /// Largest absolute error over all checked elements.
    pub max_abs_err: f64,
    pub elements: usize,
}

/// Central-difference check of `f` (a scalar-valued forward map) against the
/// analytic gradients accumulated by `backward`.
///
/// `inputs` are wrapped as trainable leaves and handed to `f` on every
/// evaluation; perturbation step `h` and relative tolerance `tol` are the
/// caller's. Elements where both gradients are below `h` are compared
/// absolutely to avoid 0/0 noise.
pub fn check_gradients(
    f: impl Fn(&[Tensor]) -> Tensor,
    inputs: &[Arr],
    h: f64,
    tol: f64,
) -> GradCheckReport {
    let leaves: Vec<Tensor> = inputs.iter().map(|a| Tensor::param(a.clone())).collect();
    let out = f(&leaves);
    assert_eq!(out.len(), 1, "gradient check requires a scalar output");
    out.backward();
    let analytic: Vec<Arr> = leaves
        .iter()
        .map(|l| l.grad().unwrap_or_else(|| Arr::zeros(l.value().raw_dim())))
        .collect();

    let eval = |arrays: &[Arr]| -> f64 {
        let leaves: Vec<Tensor> = arrays.iter().map(|a| Tensor::param(a.clone())).collect();
        f(&leaves).scalar()
    };

    let mut max_rel: f64 = 0.0;
    let mut max_abs: f64 = 0.0;
    let mut elements = 0usize;
    let mut work: Vec<Arr> = inputs.to_vec();
    for (idx, base) in inputs.iter().enumerate() {
        let n = base.len();
        for elt in 0..n {
            let orig = base.as_slice().unwrap()[elt];
            work[idx].as_slice_mut().unwrap()[elt] = orig + h;
            let fp = eval(&work);
            work[idx].as_slice_mut().unwrap()[elt] = orig - h;
            let fm = eval(&work);
            work[idx].as_slice_mut().unwrap()[elt] = orig;
            let numeric = (fp - fm) / (2.0 * h);
            let a = analytic[idx].as_slice().unwrap()[elt];
            let abs_err = (a - numeric).abs();
            max_abs = max_abs.max(abs_err);
            let denom = a.abs().max(numeric.abs());
            if denom > h {
                max_rel = max_rel.max(abs_err / denom);
            } else {
                // both near zero: require absolute agreement at FD noise level
                max_rel = max_rel.max(if abs_err > 10.0 * h { abs_err / h } else { 0.0 });
            }
            elements += 1;
        }
    }
    let report = GradCheckReport {
        max_rel_err: max_rel,
        max_abs_err: max_abs,
        elements,
    };
    assert!(
        max_rel <= tol,
        "gradient check failed: max relative error {max_rel:.3e} > {tol:.1e} \
         (abs {max_abs:.3e}, {elements} elements)"
    );
    report
}

/// Deterministic pseudo-random array for gradient-check fixtures; values are
/// kept away from activation kinks by construction.
pub fn fixture_array(shape: &[usize], seed: u64) -> Arr {
    use rand::{Rng, SeedableRng};
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let n: usize = shape.iter().product();
    let data: Vec<f64> = (0..n)
        .map(|_| {
            let v: f64 = rng.gen_range(0.05..0.95);
            if rng.gen_bool(0.5) {
                v
            } else {
                -v
            }
        })
        .collect();
    Arr::from_shape_vec(ndarray::IxDyn(shape), data).unwrap()
}
