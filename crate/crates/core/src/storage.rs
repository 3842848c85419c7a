//! Storage functions: scalar energy-like functionals with class-𝒦∞
//! envelopes, time slopes, and Gram gradients.
//!
//! A storage function `V(t, x)` certifies passivity when its derivative
//! along trajectories is dominated by the supply rate, and certifies uniform
//! global stability when it is squeezed between comparison functions
//! `ψ̲(‖x‖) ≤ V(t,x) ≤ ψ̄(‖x‖)`. The [`StorageFunction`] bundle carries the
//! pieces the verification routines consume: the value, the partial
//! derivative in `t`, the gradient with respect to the state Gram (so that
//! `V(t, x+h) − V(t, x) ≈ ⟨∇V, h⟩_G`), and the two envelopes.

use std::sync::Arc;

use nalgebra::DVector;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::comparison::ComparisonFn;
use crate::controller::ClosedLoop;
use crate::operators::{CheckResult, Gram, OperatorFamily};

/// Central-difference step for numerical time slopes.
const SLOPE_STEP: f64 = 1e-5;

/// Energy-like functional with the derivative data and envelopes used by the
/// verification routines. All fields are plain `Arc` closures so storages
/// can be assembled ad hoc; the constructors below cover the common cases.
#[derive(Clone)]
pub struct StorageFunction {
    pub value: Arc<dyn Fn(f64, &DVector<f64>) -> f64 + Send + Sync>,
    /// `∂V/∂t` at frozen state.
    pub time_slope: Arc<dyn Fn(f64, &DVector<f64>) -> f64 + Send + Sync>,
    /// Gram gradient: `V(t, x+h) − V(t, x) ≈ ⟨gradient(t,x), h⟩_G`.
    pub gradient: Arc<dyn Fn(f64, &DVector<f64>) -> DVector<f64> + Send + Sync>,
    /// Class-𝒦∞ lower envelope `ψ̲(‖x‖_G) ≤ V(t, x)`.
    pub psi_lower: ComparisonFn,
    /// Class-𝒦∞ upper envelope `V(t, x) ≤ ψ̄(‖x‖_G)`.
    pub psi_upper: ComparisonFn,
}

impl StorageFunction {
    pub fn value(&self, t: f64, x: &DVector<f64>) -> f64 {
        (self.value)(t, x)
    }

    pub fn time_slope(&self, t: f64, x: &DVector<f64>) -> f64 {
        (self.time_slope)(t, x)
    }

    pub fn gradient(&self, t: f64, x: &DVector<f64>) -> DVector<f64> {
        (self.gradient)(t, x)
    }
}

/// The canonical storage `V(t,x) = ½⟨M(t)x, x⟩_G` of a factorized family,
/// with envelopes `(m̲/2)r² ≤ V ≤ (m̄/2)r²` inherited from the weight
/// bounds. The time slope is a central difference of `t ↦ V(t,x)`; the
/// gradient is `M(t)x` exactly (Gram symmetry of `M`).
pub fn quadratic_storage(family: &OperatorFamily) -> StorageFunction {
    let (m_lo, m_hi) = family.m_bounds();
    let fam_v = family.clone();
    let value = Arc::new(move |t: f64, x: &DVector<f64>| {
        0.5 * fam_v.gram().inner(&fam_v.m().apply(t, x), x)
    });
    let val_s = value.clone();
    let time_slope = Arc::new(move |t: f64, x: &DVector<f64>| {
        (val_s(t + SLOPE_STEP, x) - val_s(t - SLOPE_STEP, x)) / (2.0 * SLOPE_STEP)
    });
    let fam_g = family.clone();
    StorageFunction {
        value,
        time_slope,
        gradient: Arc::new(move |t, x| fam_g.m().apply(t, x)),
        psi_lower: ComparisonFn::power(0.5 * m_lo, 2.0).expect("weight bounds are positive"),
        psi_upper: ComparisonFn::power(0.5 * m_hi, 2.0).expect("weight bounds are positive"),
    }
}

/// The physical storage of a plant–controller interconnection: plant energy
/// plus controller potential and kinetic energy,
///
/// `V(t,x) = ½⟨M_p(t)x̲, x̲⟩_{G_p} + 𝒫_c(v₁) + ½v₂ᵀK_cv₂`.
///
/// In the closed loop's own geometry (`G = diag(G_p, I, K_c)`,
/// `M = diag(M_p, 1, 1)`) this is the quadratic storage with `½|v₁|²`
/// replaced by the controller potential, so the gradient is
/// `M(t)x + e_{v₁}(∇𝒫_c(v₁) − v₁)`. Envelopes combine the weight bounds
/// with the potential's envelopes: block norms satisfy
/// `max(‖x̲‖, |v₁|, ‖v₂‖_{K_c}) ≥ ‖x‖/√3`, giving
/// `ψ̲(r) = min(½m̲s², ψ̲_P(s), ½s²)` at `s = r/√3`, and each block is
/// bounded above by its envelope at the full norm, giving
/// `ψ̄(r) = ½m̄r² + ψ̄_P(r) + ½r²`.
pub fn closed_loop_ph_storage(cl: &ClosedLoop) -> StorageFunction {
    let family = cl.system.family().clone();
    let (m_lo, m_hi) = family.m_bounds();
    let d_p = cl.plant_dim;
    let m_c = cl.controller.state_dim;
    let potential = cl.controller.potential.clone();
    let fam_v = family.clone();
    let value = Arc::new(move |t: f64, x: &DVector<f64>| {
        let v1 = x.rows(d_p, m_c).into_owned();
        0.5 * fam_v.gram().inner(&fam_v.m().apply(t, x), x) - 0.5 * v1.norm_squared()
            + potential(&v1)
    });
    let val_s = value.clone();
    let time_slope = Arc::new(move |t: f64, x: &DVector<f64>| {
        (val_s(t + SLOPE_STEP, x) - val_s(t - SLOPE_STEP, x)) / (2.0 * SLOPE_STEP)
    });
    let grad_p = cl.controller.potential_grad.clone();
    let fam_g = family.clone();
    let gradient = Arc::new(move |t: f64, x: &DVector<f64>| {
        let mut g = fam_g.m().apply(t, x);
        let v1 = x.rows(d_p, m_c).into_owned();
        let correction = grad_p(&v1) - &v1;
        for i in 0..m_c {
            g[d_p + i] += correction[i];
        }
        g
    });
    let (pot_lo, pot_hi) = cl.controller.potential_envelopes.clone();
    let lo_hint = pot_lo.domain_hint().min(1e8);
    let psi_lower = ComparisonFn::new(
        move |r: f64| {
            let s = r / 3f64.sqrt();
            (0.5 * m_lo * s * s).min(pot_lo.eval(s)).min(0.5 * s * s)
        },
        lo_hint,
        true,
    );
    let hi_hint = pot_hi.domain_hint().min(1e8);
    let psi_upper = ComparisonFn::new(
        move |r: f64| 0.5 * m_hi * r * r + pot_hi.eval(r) + 0.5 * r * r,
        hi_hint,
        true,
    );
    StorageFunction { value, time_slope, gradient, psi_lower, psi_upper }
}

/// Samples random `(t, x)` with `t + ‖x‖_G ≤ rho` and returns
/// `K_ρ = max(|∂_tV| + ‖∇V‖_G)`, a Lipschitz bound for `V` on that set:
/// `|V(t,x) − V(s,y)| ≲ K_ρ(|t−s| + ‖x−y‖_G)`.
pub fn estimate_storage_sensitivity(
    storage: &StorageFunction,
    gram: &Gram,
    dim: usize,
    rho: f64,
    trials: usize,
    seed: u64,
) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = 0.0f64;
    for i in 0..trials.max(8) {
        // Bias a few samples to the extremes of the admissible wedge where
        // the gradient is typically largest.
        let (t, radius) = if i % 4 == 0 {
            (0.0, rho)
        } else {
            let t = rng.gen_range(0.0..rho);
            (t, rng.gen_range(0.0..(rho - t)))
        };
        let mut x = DVector::from_fn(dim, |_, _| rng.gen_range(-1.0..1.0f64));
        let n = gram.norm(&x);
        if n < 1e-12 {
            continue;
        }
        x *= radius / n;
        let sensitivity = storage.time_slope(t, &x).abs() + gram.norm(&storage.gradient(t, &x));
        worst = worst.max(sensitivity);
    }
    worst
}

/// Screens the envelope inequalities `ψ̲(‖x‖_G) ≤ V(t,x) ≤ ψ̄(‖x‖_G)` at
/// random states over log-spaced radii and times in `[0, horizon]`.
pub fn validate_envelopes(
    storage: &StorageFunction,
    gram: &Gram,
    dim: usize,
    horizon: f64,
    trials: usize,
    seed: u64,
) -> CheckResult {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = 0.0f64;
    for _ in 0..trials.max(8) {
        let t = rng.gen_range(0.0..horizon.max(1e-9));
        let radius = 10f64.powf(rng.gen_range(-2.0..2.0));
        let mut x = DVector::from_fn(dim, |_, _| rng.gen_range(-1.0..1.0f64));
        let n = gram.norm(&x);
        if n < 1e-12 {
            continue;
        }
        x *= radius / n;
        let v = storage.value(t, &x);
        let scale = v.abs().max(1.0);
        worst = worst
            .max((storage.psi_lower.eval(radius) - v) / scale)
            .max((v - storage.psi_upper.eval(radius)) / scale);
    }
    CheckResult {
        name: "storage_envelopes".into(),
        passed: worst <= 1e-9,
        worst_violation: worst.max(0.0),
        detail: format!("worst relative envelope violation {worst:.3e}"),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::boundary::discretize_ph;
    use crate::controller::{build_closed_loop_ph, DynamicController};
    use crate::models::{make_vibrating_string, CoefficientProfile};
    use crate::operators::{Gram, MatrixFamily};
    use approx::{assert_abs_diff_eq, assert_relative_eq};
    use nalgebra::DMatrix;

    fn decaying_family() -> OperatorFamily {
        // M(t) = (1 + e^{−t})·I on ℝ², G = I, A₀ skew.
        let a0 = DMatrix::from_row_slice(2, 2, &[0.0, 1.0, -1.0, 0.0]);
        OperatorFamily::new(
            MatrixFamily::constant(a0),
            MatrixFamily::DiagFn(
                2,
                Arc::new(|t: f64| DVector::from_element(2, 1.0 + (-t).exp())),
            ),
            1.0,
            2.0,
            Gram::euclidean(2),
            true,
        )
        .unwrap()
    }

    #[test]
    fn quadratic_storage_matches_hand_computation() {
        let storage = quadratic_storage(&decaying_family());
        let x = DVector::from_vec(vec![3.0, -4.0]);
        // V(0, x) = ½·(1+e⁰)·|x|² = 25.
        assert_relative_eq!(storage.value(0.0, &x), 25.0, max_relative = 1e-12);
        // ∂_tV(0, x) = −½e⁰·|x|² = −12.5, via central difference.
        assert_relative_eq!(storage.time_slope(0.0, &x), -12.5, max_relative = 1e-8);
        // ∇V(0, x) = 2x.
        assert_relative_eq!(storage.gradient(0.0, &x)[0], 6.0, max_relative = 1e-12);
        assert_relative_eq!(storage.gradient(0.0, &x)[1], -8.0, max_relative = 1e-12);
    }

    #[test]
    fn quadratic_envelopes_hold() {
        let family = decaying_family();
        let storage = quadratic_storage(&family);
        let report = validate_envelopes(&storage, family.gram(), 2, 5.0, 400, 11);
        assert!(report.passed, "{report:?}");
    }

    #[test]
    fn sensitivity_oracle_identity_storage() {
        // V = ½|x|²: |∂_tV| = 0, ‖∇V‖ = ‖x‖ ≤ ρ, so K_ρ ≈ ρ.
        let family = OperatorFamily::autonomous(DMatrix::zeros(3, 3)).unwrap();
        let storage = quadratic_storage(&family);
        let k = estimate_storage_sensitivity(&storage, family.gram(), 3, 2.0, 200, 7);
        assert!(k <= 2.0 + 1e-9, "K_ρ = {k} overshoots the radius");
        assert!(k >= 1.8, "K_ρ = {k} misses the extreme sample");
    }

    #[test]
    fn closed_loop_storage_matches_blocks_and_decays() {
        let shape = |z: f64| (std::f64::consts::PI * (1.0 - z) / 2.0).sin().powi(2);
        let rho = CoefficientProfile::ramp_shaped(1.0, 0.3, 1.0, shape).unwrap();
        let tension = CoefficientProfile::ramp_shaped(1.0, -0.25, 1.0, shape).unwrap();
        let spec = make_vibrating_string(&rho, &tension, (0.0, 1.0)).unwrap();
        let plant = discretize_ph(&spec, 12).unwrap();
        let ctrl = DynamicController::quadratic(
            DVector::from_element(1, 2.0),
            DMatrix::from_element(1, 1, 0.5),
            DMatrix::from_element(1, 1, 1.0),
            DVector::from_element(1, 1.7),
            DVector::from_element(1, 0.2),
        )
        .unwrap();
        let cl = build_closed_loop_ph(&plant, &ctrl, &[0.0, 1.0], 23).unwrap();
        let storage = closed_loop_ph_storage(&cl);

        // Hand-build V at a controller-only state: x̲ = 0, v₁ = 2, v₂ = −1
        // gives V = 𝒫_c(2) + ½·K_c·1 = ½·1.7·4 + ½·2 = 4.4.
        let dim = cl.system.dim();
        let mut x = DVector::zeros(dim);
        x[dim - 2] = 2.0;
        x[dim - 1] = -1.0;
        assert_relative_eq!(storage.value(0.7, &x), 4.4, max_relative = 1e-12);
        // Gradient v₁-slot: ∇𝒫_c(2) = 3.4; v₂-slot: v₂ = −1.
        let g = storage.gradient(0.7, &x);
        assert_relative_eq!(g[dim - 2], 3.4, max_relative = 1e-12);
        assert_relative_eq!(g[dim - 1], -1.0, max_relative = 1e-12);

        let report =
            validate_envelopes(&storage, cl.system.family().gram(), dim, 3.0, 300, 29);
        assert!(report.passed, "{report:?}");

        // Along a free closed-loop trajectory the storage must not increase.
        let mut seedling = DVector::zeros(dim);
        for j in 0..=12usize {
            seedling[2 * j] = (std::f64::consts::PI * j as f64 / 12.0).sin();
        }
        seedling[dim - 2] = 0.5;
        let x0 = cl.system.project_classical_datum(0.0, &seedling, &DVector::zeros(1));
        let traj = cl
            .system
            .simulate_boundary(
                &x0,
                &crate::signal::Signal::zero(1),
                2.0,
                1e-3,
                &crate::semilinear::SolveOptions::default(),
            )
            .unwrap();
        let mut prev = storage.value(0.0, &traj.states[0]);
        for (t, state) in traj.times.iter().zip(&traj.states).skip(1) {
            let v = storage.value(*t, state);
            assert!(v <= prev + 1e-10, "storage increased at t = {t}");
            prev = v;
        }
    }

    #[test]
    fn time_slope_vanishes_for_autonomous_families() {
        let family = OperatorFamily::autonomous(DMatrix::from_row_slice(
            2,
            2,
            &[0.0, 1.0, -1.0, 0.0],
        ))
        .unwrap();
        let storage = quadratic_storage(&family);
        let x = DVector::from_vec(vec![1.0, 2.0]);
        assert_abs_diff_eq!(storage.time_slope(1.0, &x), 0.0, epsilon = 1e-9);
    }
}
