//! Shared test support: central finite differences against arbitrary
//! parameterized scalar functions. Used by unit and integration tests only.

use crate::tensor::{ParamSet, Tensor};

pub const FD_EPSILON: f64 = 1e-4;

/// Central finite-difference gradient of `f` w.r.t. parameter `(idx, elem)`.
pub fn finite_difference(
    params: &ParamSet,
    idx: usize,
    elem: usize,
    f: &dyn Fn(&ParamSet) -> f64,
) -> f64 {
    let mut plus = params.clone();
    plus.get_mut(idx).data[elem] += FD_EPSILON;
    let mut minus = params.clone();
    minus.get_mut(idx).data[elem] -= FD_EPSILON;
    (f(&plus) - f(&minus)) / (2.0 * FD_EPSILON)
}

/// Checks analytic gradients against central differences at relative error
/// `tol` (absolute when both are tiny). `coords` selects (param, element)
/// pairs; panics with a description on the first failure.
pub fn assert_grads_match(
    params: &ParamSet,
    grads: &[Tensor],
    coords: &[(usize, usize)],
    f: &dyn Fn(&ParamSet) -> f64,
    tol: f64,
) {
    for &(idx, elem) in coords {
        let fd = finite_difference(params, idx, elem, f);
        let an = grads[idx].data[elem];
        let denom = fd.abs().max(an.abs());
        let err = if denom < 1e-6 {
            (fd - an).abs()
        } else {
            (fd - an).abs() / denom
        };
        assert!(
            err < tol,
            "gradient mismatch for {}[{}]: analytic {an}, finite-diff {fd}, err {err}",
            params.name(idx),
            elem
        );
    }
}

/// Deterministic pseudorandom f64 stream for test fixtures (splitmix64).
pub struct TestRng(u64);

impl TestRng {
    pub fn new(seed: u64) -> Self {
        TestRng(seed)
    }

    pub fn next_u64(&mut self) -> u64 {
        self.0 = self.0.wrapping_add(0x9E3779B97F4A7C15);
        let mut z = self.0;
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58476D1CE4E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D049BB133111EB);
        z ^ (z >> 31)
    }

    /// Uniform in [-1, 1).
    pub fn unit(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 / (1u64 << 53) as f64 * 2.0 - 1.0
    }
}
