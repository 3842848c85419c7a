//! Ready-made example systems with time-varying coefficients.
//!
//! Boundary-controlled models (force/torque actuation through one end):
//! * vibrating string — velocity clamped at `ζ = a`, force input and
//!   velocity output at `ζ = b`;
//! * Timoshenko beam — both velocities clamped at `ζ = a`, shear force and
//!   bending moment inputs, translational and angular velocity outputs at
//!   `ζ = b`.
//!
//! Distributed model:
//! * Euler–Bernoulli cantilever with tip mass and rotary tip inertia,
//!   actuated by a torque on the tip angle; written in nodal
//!   displacement/momentum coordinates so that the skew structure, the
//!   energy Gram, and the collocation identity `C(t) = B(t)ᵀGM(t)` all hold
//!   exactly at the discrete level.
//!
//! Coefficients are supplied as [`CoefficientProfile`]s carrying uniform
//! bounds and a declared time monotonicity; the builders reject combinations
//! that would break the required non-increase of the Hamiltonian weight.

use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use thiserror::Error;

use crate::boundary::{BoundaryError, PortHamiltonianSpec};
use crate::distributed::{DistributedIoSystem, IoSystemError};
use crate::operators::{Gram, MatrixFamily, OperatorError, OperatorFamily};
use crate::semilinear::Nonlinearity;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("invalid coefficient profile: {0}")]
    Profile(String),
    #[error(transparent)]
    Spec(#[from] BoundaryError),
    #[error(transparent)]
    System(#[from] IoSystemError),
    #[error(transparent)]
    Operator(#[from] OperatorError),
}

/// Declared behaviour of `t ↦ coefficient(t, ζ)` for every fixed `ζ`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TimeMonotonicity {
    Constant,
    Decreasing,
    Increasing,
}

/// A strictly positive coefficient `(t, ζ) ↦ c(t, ζ)` with uniform bounds
/// and known time monotonicity.
#[derive(Clone)]
pub struct CoefficientProfile {
    value: Arc<dyn Fn(f64, f64) -> f64 + Send + Sync>,
    bounds: (f64, f64),
    monotonicity: TimeMonotonicity,
}

impl CoefficientProfile {
    pub fn constant(c: f64) -> Result<Self, ModelError> {
        if !(c > 0.0) {
            return Err(ModelError::Profile(format!("constant must be positive, got {c}")));
        }
        Ok(Self {
            value: Arc::new(move |_, _| c),
            bounds: (c, c),
            monotonicity: TimeMonotonicity::Constant,
        })
    }

    /// Saturating drift `base + delta·t/(rate + t)`: monotone in `t`,
    /// bounded between `base` and `base + delta`, with rate `|delta|/rate`
    /// at `t = 0`.
    pub fn ramp(base: f64, delta: f64, rate: f64) -> Result<Self, ModelError> {
        Self::ramp_shaped(base, delta, rate, |_| 1.0)
    }

    /// Like [`Self::ramp`] with the drift modulated by a spatial shape
    /// `s : [0,1]-valued`; `shape ≡ 0` near a boundary point keeps the
    /// coefficient stationary there.
    pub fn ramp_shaped(
        base: f64,
        delta: f64,
        rate: f64,
        shape: impl Fn(f64) -> f64 + Send + Sync + 'static,
    ) -> Result<Self, ModelError> {
        if !(rate > 0.0) {
            return Err(ModelError::Profile(format!("ramp rate must be positive, got {rate}")));
        }
        if !(base > 0.0) || !(base + delta > 0.0) {
            return Err(ModelError::Profile(format!(
                "ramp must stay positive: base = {base}, base + delta = {}",
                base + delta
            )));
        }
        let monotonicity = if delta == 0.0 {
            TimeMonotonicity::Constant
        } else if delta > 0.0 {
            TimeMonotonicity::Increasing
        } else {
            TimeMonotonicity::Decreasing
        };
        let bounds = if delta >= 0.0 { (base, base + delta) } else { (base + delta, base) };
        Ok(Self {
            value: Arc::new(move |t: f64, zeta: f64| {
                let s = shape(zeta).clamp(0.0, 1.0);
                base + delta * s * (t.max(0.0) / (rate + t.max(0.0)))
            }),
            bounds,
            monotonicity,
        })
    }

    pub fn at(&self, t: f64, zeta: f64) -> f64 {
        (self.value)(t, zeta)
    }

    pub fn bounds(&self) -> (f64, f64) {
        self.bounds
    }

    pub fn monotonicity(&self) -> TimeMonotonicity {
        self.monotonicity
    }
}

fn require(
    profile: &CoefficientProfile,
    name: &str,
    forbidden: TimeMonotonicity,
    reason: &str,
) -> Result<(), ModelError> {
    if profile.monotonicity() == forbidden {
        return Err(ModelError::Profile(format!(
            "{name} must not be {forbidden:?} in time: {reason}"
        )));
    }
    Ok(())
}

/// Vibrating string `ρ(t,ζ)∂_t²w = ∂_ζ(T(t,ζ)∂_ζw)` in port-Hamiltonian
/// form with state `x = (ρ∂_tw, ∂_ζw)` and `H = diag(1/ρ, T)`.
pub fn make_vibrating_string(
    rho: &CoefficientProfile,
    tension: &CoefficientProfile,
    interval: (f64, f64),
) -> Result<PortHamiltonianSpec, ModelError> {
    require(rho, "density", TimeMonotonicity::Decreasing, "1/ρ must be non-increasing")?;
    require(tension, "tension", TimeMonotonicity::Increasing, "T must be non-increasing")?;
    let (rho_v, ten_v) = (rho.clone(), tension.clone());
    let (rho_lo, rho_hi) = rho.bounds();
    let (t_lo, t_hi) = tension.bounds();
    let spec = PortHamiltonianSpec {
        field_dim: 2,
        p1: DMatrix::from_row_slice(2, 2, &[0.0, 1.0, 1.0, 0.0]),
        p0: DMatrix::zeros(2, 2),
        hamiltonian: Arc::new(move |t, z| {
            DVector::from_column_slice(&[1.0 / rho_v.at(t, z), ten_v.at(t, z)])
        }),
        h_bounds: ((1.0 / rho_hi).min(t_lo), (1.0 / rho_lo).max(t_hi)),
        h_monotone_decreasing: true,
        interval,
        // Trace order ((Hx)(b), (Hx)(a)) = (vel_b, force_b, vel_a, force_a).
        w_b1: DMatrix::from_row_slice(1, 4, &[0.0, 0.0, 1.0, 0.0]),
        w_b2: DMatrix::from_row_slice(1, 4, &[0.0, 1.0, 0.0, 0.0]),
        w_c: DMatrix::from_row_slice(1, 4, &[1.0, 0.0, 0.0, 0.0]),
    };
    spec.validate()?;
    Ok(spec)
}

/// Timoshenko beam with state `x = (∂_ζw − φ, ρ∂_tw, ∂_ζφ, I_ρ∂_tφ)` and
/// `H = diag(K, 1/ρ, EI, 1/I_ρ)`: clamped at `ζ = a`, shear force and
/// bending moment actuation at `ζ = b`, collocated velocity outputs.
pub fn make_timoshenko_beam(
    shear: &CoefficientProfile,
    rho: &CoefficientProfile,
    flexural: &CoefficientProfile,
    rot_inertia: &CoefficientProfile,
    interval: (f64, f64),
) -> Result<PortHamiltonianSpec, ModelError> {
    require(shear, "shear stiffness", TimeMonotonicity::Increasing, "K must be non-increasing")?;
    require(rho, "density", TimeMonotonicity::Decreasing, "1/ρ must be non-increasing")?;
    require(flexural, "flexural stiffness", TimeMonotonicity::Increasing, "EI must be non-increasing")?;
    require(
        rot_inertia,
        "rotary inertia",
        TimeMonotonicity::Decreasing,
        "1/I_ρ must be non-increasing",
    )?;
    let (k_v, r_v, e_v, i_v) = (shear.clone(), rho.clone(), flexural.clone(), rot_inertia.clone());
    let lows = [shear.bounds().0, 1.0 / rho.bounds().1, flexural.bounds().0, 1.0 / rot_inertia.bounds().1];
    let highs = [shear.bounds().1, 1.0 / rho.bounds().0, flexural.bounds().1, 1.0 / rot_inertia.bounds().0];
    let e = |r: usize| {
        let mut row = DMatrix::zeros(1, 8);
        row[(0, r)] = 1.0;
        row
    };
    let stack2 = |a: DMatrix<f64>, b: DMatrix<f64>| -> DMatrix<f64> {
        let mut out = DMatrix::zeros(2, 8);
        out.rows_mut(0, 1).copy_from(&a);
        out.rows_mut(1, 1).copy_from(&b);
        out
    };
    let w_b1 = stack2(e(5), e(7));
    let w_b2 = stack2(e(0), e(2));
    let w_c = stack2(e(1), e(3));
    let spec = PortHamiltonianSpec {
        field_dim: 4,
        p1: DMatrix::from_row_slice(
            4,
            4,
            &[
                0.0, 1.0, 0.0, 0.0, //
                1.0, 0.0, 0.0, 0.0, //
                0.0, 0.0, 0.0, 1.0, //
                0.0, 0.0, 1.0, 0.0,
            ],
        ),
        p0: DMatrix::from_row_slice(
            4,
            4,
            &[
                0.0, 0.0, 0.0, -1.0, //
                0.0, 0.0, 0.0, 0.0, //
                0.0, 0.0, 0.0, 0.0, //
                1.0, 0.0, 0.0, 0.0,
            ],
        ),
        hamiltonian: Arc::new(move |t, z| {
            DVector::from_column_slice(&[
                k_v.at(t, z),
                1.0 / r_v.at(t, z),
                e_v.at(t, z),
                1.0 / i_v.at(t, z),
            ])
        }),
        h_bounds: (
            lows.iter().cloned().fold(f64::INFINITY, f64::min),
            highs.iter().cloned().fold(f64::NEG_INFINITY, f64::max),
        ),
        h_monotone_decreasing: true,
        interval,
        w_b1,
        w_b2,
        w_c,
    };
    spec.validate()?;
    Ok(spec)
}

/// Euler–Bernoulli cantilever `ρ∂_t²w = −λ(t)∂_ζ⁴w` on `[0, length]`,
/// clamped at `0`, carrying a tip body (mass `tip_mass`, rotary inertia
/// `tip_inertia`) actuated by a torque `κ(t)u` on the tip angle; the output
/// is the collocated angular tip velocity `κ(t)·θ̇`.
///
/// Discrete coordinates: nodal deflections `q ∈ ℝⁿ` at `ζ_1..ζ_n` and
/// momenta `p = M_v q̇` with the mass matrix `M_v = ρQ_v + m e_ne_nᵀ + J ddᵀ`
/// (lumped quadrature plus tip contributions, `d` the one-sided tip-angle
/// stencil). With the curvature map `S` and elastic form `E₁ = SᵀQ₂S`,
///
/// `A₀ = [[0, M_v⁻¹], [−E₁, 0]]`, `M(t) = diag(λ(t)I, I)`, `G = diag(E₁, M_v⁻¹)`,
///
/// which makes `GA₀` skew and `C(t) = B(t)ᵀGM(t)` exact.
pub fn make_euler_bernoulli_tip_mass(
    n_cells: usize,
    stiffness: &CoefficientProfile,
    gain: &CoefficientProfile,
    rho: f64,
    tip_mass: f64,
    tip_inertia: f64,
    length: f64,
) -> Result<DistributedIoSystem, ModelError> {
    if n_cells < 4 {
        return Err(ModelError::Profile(format!("need at least 4 cells, got {n_cells}")));
    }
    if !(rho > 0.0 && tip_mass >= 0.0 && tip_inertia > 0.0 && length > 0.0) {
        return Err(ModelError::Profile(
            "density, tip inertia, and length must be positive; tip mass non-negative".into(),
        ));
    }
    require(
        stiffness,
        "bending stiffness",
        TimeMonotonicity::Increasing,
        "λ must be non-increasing for the weight family",
    )?;
    let n = n_cells;
    let h = length / n as f64;

    // Curvature map S: (n+1)×n acting on (w_1..w_n); clamp w_0 = 0 with the
    // mirror ghost w_{-1} = w_1, one-sided (shifted) row at the tip.
    let mut s = DMatrix::zeros(n + 1, n);
    let ih2 = 1.0 / (h * h);
    s[(0, 0)] = 2.0 * ih2;
    for j in 1..n {
        if j >= 2 {
            s[(j, j - 2)] = ih2;
        }
        s[(j, j - 1)] = -2.0 * ih2;
        s[(j, j)] = ih2;
    }
    s[(n, n - 3)] = ih2;
    s[(n, n - 2)] = -2.0 * ih2;
    s[(n, n - 1)] = ih2;
    let q2 = DVector::from_fn(n + 1, |j, _| if j == 0 || j == n { 0.5 * h } else { h });
    let mut e1 = DMatrix::zeros(n, n);
    for j in 0..=n {
        let row = s.row(j);
        for a in 0..n {
            let ra = row[a];
            if ra == 0.0 {
                continue;
            }
            for b in 0..n {
                let rb = row[b];
                if rb != 0.0 {
                    e1[(a, b)] += q2[j] * ra * rb;
                }
            }
        }
    }

    // Tip angle stencil θ ≈ dᵀq (second-order one-sided difference).
    let mut d = DVector::zeros(n);
    d[n - 1] = 1.5 / h;
    d[n - 2] = -2.0 / h;
    d[n - 3] = 0.5 / h;

    let q_v = DVector::from_fn(n, |j, _| if j == n - 1 { 0.5 * h } else { h });
    let mut m_v = DMatrix::from_diagonal(&(q_v * rho));
    m_v[(n - 1, n - 1)] += tip_mass;
    m_v += tip_inertia * &d * d.transpose();
    let m_v_inv = m_v
        .clone()
        .try_inverse()
        .ok_or_else(|| ModelError::Profile("mass matrix is singular".into()))?;

    let dim = 2 * n;
    let mut a0 = DMatrix::zeros(dim, dim);
    a0.view_mut((0, n), (n, n)).copy_from(&m_v_inv);
    a0.view_mut((n, 0), (n, n)).copy_from(&(-&e1));

    let mut gram = DMatrix::zeros(dim, dim);
    gram.view_mut((0, 0), (n, n)).copy_from(&e1);
    gram.view_mut((n, n), (n, n)).copy_from(&m_v_inv);

    let lam = stiffness.clone();
    let (lam_lo, lam_hi) = stiffness.bounds();
    let m_fn = move |t: f64| {
        let l = lam.at(t, 0.0);
        DVector::from_fn(dim, |i, _| if i < n { l } else { 1.0 })
    };
    let family = OperatorFamily::new(
        MatrixFamily::constant(a0),
        MatrixFamily::diagonal_fn(dim, m_fn),
        lam_lo.min(1.0),
        lam_hi.max(1.0),
        Gram::dense(gram)?,
        true,
    )?;

    let kap_b = gain.clone();
    let kap_c = gain.clone();
    let d_b = d.clone();
    let w_c = &m_v_inv * &d;
    let b = MatrixFamily::dense_fn(dim, 1, move |t| {
        let mut col = DMatrix::zeros(dim, 1);
        let k = kap_b.at(t, 0.0);
        for i in 0..n {
            col[(n + i, 0)] = k * d_b[i];
        }
        col
    });
    let c = MatrixFamily::dense_fn(1, dim, move |t| {
        let mut row = DMatrix::zeros(1, dim);
        let k = kap_c.at(t, 0.0);
        for i in 0..n {
            row[(0, n + i)] = k * w_c[i];
        }
        row
    });
    Ok(DistributedIoSystem::new(family, b, c, Nonlinearity::zero())?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::boundary::{check_impedance_passivity_h1, discretize_ph};
    use crate::distributed::CollocatedSpec;
    use crate::operators::validate_family;
    use crate::semilinear::SolveOptions;
    use crate::signal::Signal;

    fn aging_string() -> PortHamiltonianSpec {
        let rho = CoefficientProfile::ramp(1.0, 0.3, 1.0).unwrap();
        let tension = CoefficientProfile::ramp(1.2, -0.25, 1.0).unwrap();
        make_vibrating_string(&rho, &tension, (0.0, 1.0)).unwrap()
    }

    fn aging_timoshenko() -> PortHamiltonianSpec {
        let shear = CoefficientProfile::ramp(1.0, -0.2, 1.0).unwrap();
        let rho = CoefficientProfile::ramp(1.0, 0.25, 1.0).unwrap();
        let flexural = CoefficientProfile::ramp(1.1, -0.15, 2.0).unwrap();
        let rot = CoefficientProfile::ramp(0.9, 0.2, 1.5).unwrap();
        make_timoshenko_beam(&shear, &rho, &flexural, &rot, (0.0, 1.0)).unwrap()
    }

    #[test]
    fn string_and_timoshenko_are_impedance_passive_discretely() {
        for (spec, label) in [(aging_string(), "string"), (aging_timoshenko(), "timoshenko")] {
            let report = check_impedance_passivity_h1(&spec, 20, 150, 3).unwrap();
            assert!(
                report.max_violation <= 1e-12,
                "{label}: violation {:.3e}",
                report.max_violation
            );
        }
    }

    #[test]
    fn timoshenko_discretization_joins_the_class() {
        let sys = discretize_ph(&aging_timoshenko(), 12).unwrap();
        let validation = validate_family(sys.family(), &[0.0, 0.5, 1.5]);
        assert!(validation.passed, "{:#?}", validation.checks);
        assert_eq!(sys.input_dim(), 2);
        assert_eq!(sys.dim(), 4 * 13);
    }

    #[test]
    fn beam_collocation_and_skewness_are_exact() {
        let lam = CoefficientProfile::ramp(1.0, -0.3, 1.0).unwrap();
        let kap = CoefficientProfile::ramp(1.0, 0.4, 2.0).unwrap();
        let sys = make_euler_bernoulli_tip_mass(12, &lam, &kap, 1.0, 0.5, 0.2, 1.0).unwrap();
        let spec = CollocatedSpec {
            system: sys,
            g: std::sync::Arc::new(|y: &DVector<f64>| y.clone()),
            sigma: 1.0,
        };
        let report = spec.validate(&[0.0, 0.4, 1.3], 40, 5).unwrap();
        assert!(report.passed, "{report:?}");
        assert!(report.max_collocation_defect <= 1e-12);
        let validation = validate_family(spec.system.family(), &[0.0, 0.7, 2.0]);
        assert!(validation.passed, "{:#?}", validation.checks);
    }

    #[test]
    fn free_beam_conserves_energy_with_constant_stiffness() {
        let lam = CoefficientProfile::constant(1.0).unwrap();
        let kap = CoefficientProfile::constant(1.0).unwrap();
        let sys = make_euler_bernoulli_tip_mass(8, &lam, &kap, 1.0, 0.3, 0.1, 1.0).unwrap();
        let gram = sys.family().gram();
        let x0 = DVector::from_fn(sys.dim(), |i, _| if i < 8 { (i as f64 / 8.0).powi(2) } else { 0.0 });
        let traj = sys
            .simulate(&x0, &Signal::zero(1), 1.0, 1e-3, &SolveOptions::default())
            .unwrap();
        let e0 = gram.norm(&traj.states[0]);
        let e1 = gram.norm(traj.final_state());
        assert!((e1 - e0).abs() <= 1e-8 * e0, "energy drifted {e0} → {e1}");
    }

    #[test]
    fn cubic_tip_feedback_dissipates() {
        use crate::distributed::build_collocated_closed_loop;
        let lam = CoefficientProfile::constant(1.0).unwrap();
        let kap = CoefficientProfile::constant(1.0).unwrap();
        let sys = make_euler_bernoulli_tip_mass(8, &lam, &kap, 1.0, 0.3, 0.1, 1.0).unwrap();
        let spec = CollocatedSpec {
            system: sys,
            g: std::sync::Arc::new(|y: &DVector<f64>| y.map(|v| v + v.powi(3))),
            sigma: 1.0,
        };
        let closed = build_collocated_closed_loop(&spec, (0.0, 6.0), &[0.5, 2.0], 80, 9).unwrap();
        let gram = closed.family().gram();
        let x0 = DVector::from_fn(closed.dim(), |i, _| if i < 8 { (i as f64 / 8.0).powi(2) } else { 0.0 });
        let traj = closed
            .simulate(&x0, &Signal::zero(1), 6.0, 1e-3, &SolveOptions::default())
            .unwrap();
        let e0 = gram.norm(&traj.states[0]);
        let e1 = gram.norm(traj.final_state());
        assert!(e1 < 0.9 * e0, "tip feedback failed to dissipate: {e0} → {e1}");
    }

    #[test]
    fn profile_monotonicity_is_enforced() {
        let growing_tension = CoefficientProfile::ramp(1.0, 0.5, 1.0).unwrap();
        let rho = CoefficientProfile::constant(1.0).unwrap();
        assert!(matches!(
            make_vibrating_string(&rho, &growing_tension, (0.0, 1.0)),
            Err(ModelError::Profile(_))
        ));
        let shrinking_rho = CoefficientProfile::ramp(1.0, -0.5, 1.0).unwrap();
        let tension = CoefficientProfile::constant(1.0).unwrap();
        assert!(matches!(
            make_vibrating_string(&shrinking_rho, &tension, (0.0, 1.0)),
            Err(ModelError::Profile(_))
        ));
    }

    #[test]
    fn ramp_profiles_report_their_envelope() {
        let p = CoefficientProfile::ramp(2.0, -0.5, 1.0).unwrap();
        assert_eq!(p.bounds(), (1.5, 2.0));
        assert_eq!(p.monotonicity(), TimeMonotonicity::Decreasing);
        assert!((p.at(0.0, 0.3) - 2.0).abs() < 1e-15);
        assert!(p.at(1e9, 0.3) > 1.5 - 1e-6);
        assert!(matches!(CoefficientProfile::ramp(1.0, -1.5, 1.0), Err(ModelError::Profile(_))));
    }
}
