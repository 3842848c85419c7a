//! Comparison functions of class 𝒦/𝒦∞ and the gain pairs built from them.
//!
//! A class-𝒦 function is continuous, strictly increasing, and vanishes at the
//! origin; class 𝒦∞ additionally grows without bound. Stability statements
//! here are phrased through such functions: a system is uniformly globally
//! stable when `‖x(t)‖ ≤ σ(‖x₀‖) + γ(‖u‖_{L²})` for gains σ, γ of class 𝒦∞.
//! Given storage-function envelopes ψ̲ ≤ V ≤ ψ̄ and a supply coefficient α,
//! the gains are `σ = ψ̲⁻¹ ∘ 2ψ̄` and `γ(r) = ψ̲⁻¹(2αr²)`; inverses are
//! evaluated numerically by bracketing bisection.

use std::sync::Arc;

use thiserror::Error;

/// Number of samples used by [`ComparisonFn::validate`] to screen for
/// monotonicity violations.
const VALIDATION_SAMPLES: usize = 256;

/// Relative tolerance of the bisection in [`ComparisonFn::invert`].
const INVERT_REL_TOL: f64 = 1e-12;

#[derive(Debug, Error)]
pub enum ComparisonError {
    #[error("comparison function must vanish at the origin, got f(0) = {0:e}")]
    NonzeroAtOrigin(f64),
    #[error("comparison function is not strictly increasing near r = {0:e}")]
    NotIncreasing(f64),
    #[error("value {value:e} is outside the invertible range [{lo:e}, {hi:e}]")]
    OutOfRange { value: f64, lo: f64, hi: f64 },
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
    #[error("envelope order violated: psi_lower({r:e}) = {lower:e} > psi_upper({r:e}) = {upper:e}")]
    EnvelopeOrder { r: f64, lower: f64, upper: f64 },
}

/// A candidate class-𝒦 function `r ↦ f(r)` on `[0, domain_hint]`.
///
/// The wrapper does not prove class membership; [`validate`](Self::validate)
/// screens it on a sample grid, and [`invert`](Self::invert) reports
/// violations it stumbles over. `domain_hint` bounds the region where the
/// function is trusted (and bracketed during inversion).
#[derive(Clone)]
pub struct ComparisonFn {
    f: Arc<dyn Fn(f64) -> f64 + Send + Sync>,
    domain_hint: f64,
    unbounded: bool,
}

impl std::fmt::Debug for ComparisonFn {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("ComparisonFn")
            .field("domain_hint", &self.domain_hint)
            .field("unbounded", &self.unbounded)
            .finish()
    }
}

impl ComparisonFn {
    /// Wraps a closure. Set `unbounded` when the function is claimed to be of
    /// class 𝒦∞ rather than merely class 𝒦.
    pub fn new(
        f: impl Fn(f64) -> f64 + Send + Sync + 'static,
        domain_hint: f64,
        unbounded: bool,
    ) -> Self {
        assert!(domain_hint > 0.0, "domain_hint must be positive");
        Self { f: Arc::new(f), domain_hint, unbounded }
    }

    /// The power function `r ↦ coefficient · r^exponent`, class 𝒦∞ for
    /// positive parameters.
    pub fn power(coefficient: f64, exponent: f64) -> Result<Self, ComparisonError> {
        if !(coefficient > 0.0) || !(exponent > 0.0) {
            return Err(ComparisonError::InvalidParameter(format!(
                "power function needs positive coefficient and exponent, got {coefficient} and {exponent}"
            )));
        }
        Ok(Self::new(move |r| coefficient * r.powf(exponent), 1e8, true))
    }

    pub fn eval(&self, r: f64) -> f64 {
        (self.f)(r)
    }

    pub fn domain_hint(&self) -> f64 {
        self.domain_hint
    }

    pub fn is_unbounded(&self) -> bool {
        self.unbounded
    }

    /// Screens for class-𝒦 membership on a sample grid: `f(0) = 0` (within
    /// 1e-12) and strict increase between consecutive samples.
    pub fn validate(&self) -> Result<(), ComparisonError> {
        let at_zero = self.eval(0.0);
        if at_zero.abs() > 1e-12 {
            return Err(ComparisonError::NonzeroAtOrigin(at_zero));
        }
        // Log-spaced samples catch misbehaviour near the origin that a
        // uniform grid over a large domain_hint would skip entirely.
        let mut prev_r = 0.0;
        let mut prev_v = at_zero;
        for i in 0..VALIDATION_SAMPLES {
            let r = self.domain_hint
                * 10f64.powf(-12.0 + 12.0 * (i as f64 + 1.0) / VALIDATION_SAMPLES as f64);
            let v = self.eval(r);
            if !(v > prev_v) {
                return Err(ComparisonError::NotIncreasing(prev_r));
            }
            prev_r = r;
            prev_v = v;
        }
        Ok(())
    }

    /// Solves `f(r) = y` for `r ∈ [0, domain_hint]` by bisection to relative
    /// tolerance 1e-12.
    pub fn invert(&self, y: f64) -> Result<f64, ComparisonError> {
        let lo_val = self.eval(0.0);
        let hi_val = self.eval(self.domain_hint);
        if hi_val < lo_val {
            return Err(ComparisonError::NotIncreasing(0.0));
        }
        if y < lo_val - 1e-12 || y > hi_val * (1.0 + 1e-12) + 1e-12 {
            return Err(ComparisonError::OutOfRange { value: y, lo: lo_val, hi: hi_val });
        }
        let (mut lo, mut hi) = (0.0f64, self.domain_hint);
        while hi - lo > INVERT_REL_TOL * hi.max(1.0) {
            let mid = 0.5 * (lo + hi);
            if self.eval(mid) < y {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        Ok(0.5 * (lo + hi))
    }
}

/// Gain pair certifying a uniform-global-stability bound
/// `‖x(t)‖ ≤ σ(‖x₀‖) + γ(‖u‖_{[0,t],L²})`, together with the supply
/// coefficient α the γ-gain was derived from.
#[derive(Clone, Debug)]
pub struct UgsGains {
    pub sigma: ComparisonFn,
    pub gamma: ComparisonFn,
    pub alpha: f64,
}

impl UgsGains {
    /// The right-hand side `σ(x0_norm) + γ(u_l2)` of the UGS estimate.
    pub fn bound(&self, x0_norm: f64, u_l2: f64) -> f64 {
        self.sigma.eval(x0_norm) + self.gamma.eval(u_l2)
    }
}

/// Builds UGS gains `σ = ψ̲⁻¹ ∘ 2ψ̄` and `γ(r) = ψ̲⁻¹(2αr²)` from storage
/// envelopes `ψ̲ ≤ V ≤ ψ̄` (both class 𝒦∞) and the supply coefficient α > 0.
///
/// The envelope order `ψ̲ ≤ ψ̄` is screened on a sample grid; inversions are
/// performed lazily when the gains are evaluated.
pub fn build_ugs_gains(
    psi_lower: &ComparisonFn,
    psi_upper: &ComparisonFn,
    alpha: f64,
) -> Result<UgsGains, ComparisonError> {
    if !(alpha > 0.0) {
        return Err(ComparisonError::InvalidParameter(format!(
            "supply coefficient alpha must be positive, got {alpha}"
        )));
    }
    if !psi_lower.is_unbounded() || !psi_upper.is_unbounded() {
        return Err(ComparisonError::InvalidParameter(
            "storage envelopes must be class K-infinity (unbounded)".into(),
        ));
    }
    psi_lower.validate()?;
    psi_upper.validate()?;
    for i in 1..=64 {
        let r = psi_lower.domain_hint().min(psi_upper.domain_hint()) * i as f64 / 64.0;
        let (lower, upper) = (psi_lower.eval(r), psi_upper.eval(r));
        if lower > upper * (1.0 + 1e-12) {
            return Err(ComparisonError::EnvelopeOrder { r, lower, upper });
        }
    }

    // σ's trusted domain: the largest r with 2ψ̄(r) still inside ψ̲'s
    // invertible range; same construction for γ.
    let lower_top = psi_lower.eval(psi_lower.domain_hint());
    let sigma_hint = psi_upper.invert(0.5 * lower_top)?;
    let gamma_hint = (0.5 * lower_top / alpha).sqrt();

    let (pl, pu) = (psi_lower.clone(), psi_upper.clone());
    let sigma = ComparisonFn::new(
        move |r| {
            pl.invert(2.0 * pu.eval(r))
                .expect("sigma evaluated outside its trusted domain")
        },
        sigma_hint,
        true,
    );
    let pl = psi_lower.clone();
    let gamma = ComparisonFn::new(
        move |r| {
            pl.invert(2.0 * alpha * r * r)
                .expect("gamma evaluated outside its trusted domain")
        },
        gamma_hint,
        true,
    );
    Ok(UgsGains { sigma, gamma, alpha })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::{assert_abs_diff_eq, assert_relative_eq};
    use proptest::prelude::*;

    #[test]
    fn inverts_a_quadratic() {
        // Oracle: 0.5 r² = 8 at r = 4.
        let f = ComparisonFn::power(0.5, 2.0).unwrap();
        let r = f.invert(8.0).unwrap();
        assert_relative_eq!(r, 4.0, max_relative = 1e-10);
        assert_abs_diff_eq!(f.eval(r), 8.0, epsilon = 1e-10 * 9.0);
    }

    #[test]
    fn invert_rejects_out_of_range() {
        let f = ComparisonFn::new(|r| r / (1.0 + r), 1e6, false);
        // Saturating at 1, so 2 is unreachable.
        assert!(matches!(f.invert(2.0), Err(ComparisonError::OutOfRange { .. })));
    }

    #[test]
    fn validate_flags_non_monotone() {
        // Increasing up to 5, flat afterwards.
        let f = ComparisonFn::new(|r| r.min(5.0), 10.0, false);
        assert!(matches!(f.validate(), Err(ComparisonError::NotIncreasing(_))));
    }

    #[test]
    fn validate_flags_offset_origin() {
        let f = ComparisonFn::new(|r| r + 0.5, 10.0, false);
        assert!(matches!(f.validate(), Err(ComparisonError::NonzeroAtOrigin(_))));
    }

    #[test]
    fn ugs_gains_quadratic_oracle() {
        // ψ̲ = 0.5 r², ψ̄ = r², α = 1:
        //   σ(r) = sqrt(2·2r²)  = 2r      → σ(3) = 6
        //   γ(r) = sqrt(2·2r²)… here: ψ̲⁻¹(2r²) = sqrt(4r²) = 2r → γ(2) = 4
        let pl = ComparisonFn::power(0.5, 2.0).unwrap();
        let pu = ComparisonFn::power(1.0, 2.0).unwrap();
        let gains = build_ugs_gains(&pl, &pu, 1.0).unwrap();
        assert_relative_eq!(gains.sigma.eval(3.0), 6.0, max_relative = 1e-9);
        assert_relative_eq!(gains.gamma.eval(2.0), 4.0, max_relative = 1e-9);
        assert_relative_eq!(gains.bound(3.0, 2.0), 10.0, max_relative = 1e-9);
    }

    #[test]
    fn ugs_gains_equal_envelopes() {
        // ψ̲ = ψ̄ = r² gives σ(r) = √2·r.
        let p = ComparisonFn::power(1.0, 2.0).unwrap();
        let gains = build_ugs_gains(&p, &p, 1.0).unwrap();
        for r in [0.1, 1.0, 7.5] {
            assert_relative_eq!(gains.sigma.eval(r), 2f64.sqrt() * r, max_relative = 1e-9);
        }
    }

    #[test]
    fn ugs_gains_reject_crossed_envelopes() {
        let pl = ComparisonFn::power(2.0, 2.0).unwrap();
        let pu = ComparisonFn::power(1.0, 2.0).unwrap();
        assert!(matches!(
            build_ugs_gains(&pl, &pu, 1.0),
            Err(ComparisonError::EnvelopeOrder { .. })
        ));
    }

    proptest! {
        /// invert ∘ eval is the identity on random power functions.
        #[test]
        fn invert_roundtrip(c in 0.1f64..10.0, p in 0.5f64..3.0, r in 0.0f64..100.0) {
            let f = ComparisonFn::power(c, p).unwrap();
            let back = f.invert(f.eval(r)).unwrap();
            prop_assert!((back - r).abs() <= 1e-9 * r.max(1.0));
        }

        /// UGS gains are increasing and vanish at the origin.
        #[test]
        fn gains_are_class_k(cl in 0.2f64..2.0, cu_extra in 0.0f64..3.0, alpha in 0.1f64..4.0) {
            let pl = ComparisonFn::power(cl, 2.0).unwrap();
            let pu = ComparisonFn::power(cl + cu_extra + 1e-6, 2.0).unwrap();
            let gains = build_ugs_gains(&pl, &pu, alpha).unwrap();
            prop_assert!(gains.sigma.eval(0.0).abs() < 1e-9);
            prop_assert!(gains.gamma.eval(0.0).abs() < 1e-9);
            let mut prev_s = 0.0;
            let mut prev_g = 0.0;
            for i in 1..=20 {
                let r = i as f64;
                let s = gains.sigma.eval(r);
                let g = gains.gamma.eval(r);
                prop_assert!(s > prev_s && g > prev_g);
                prev_s = s;
                prev_g = g;
            }
        }
    }
}
