//! Nonlinear dynamic boundary controllers and the power-preserving closed
//! loop.
//!
//! The controller is a port-Hamiltonian mass-spring system
//!
//! `v̇₁ = K_c v₂`, `v̇₂ = −∇𝒫_c(v₁) − ℛ_c(t, K_c v₂) + B_c u_c`,
//! `y_c = B_cᵀK_c v₂ + S_c u_c`,
//!
//! interconnected with a boundary plant by `u = −y_c + u_cl`, `u_c = y`.
//! [`build_closed_loop_ph`] realizes the interconnection as a single
//! augmented [`BoundaryIoSystem`]: the feedback law becomes an extra
//! constraint row (`B_cl(t)x = u_cl`), the linear controller blocks join the
//! raw generator, and the nonlinear spring/damper remainder
//! `(0, 0, v₁ − ∇𝒫_c(v₁) − ℛ_c(t, K_cv₂))` rides along as the system
//! nonlinearity. The closed loop is impedance-passive with
//! `ς = λ_min(sym S_c)` for the true storage (plant energy + `𝒫_c(v₁)` +
//! controller kinetic energy).

use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use serde::Serialize;
use thiserror::Error;

use crate::boundary::{project_operator, BoundaryError, BoundaryIoSystem, ConstraintSolver};
use crate::comparison::ComparisonFn;
use crate::operators::{CheckResult, Gram, MatrixFamily, OperatorError, OperatorFamily};
use crate::semilinear::{make_ledger_from_samples, Nonlinearity};
use crate::sparse::CsrMatrix;

#[derive(Debug, Error)]
pub enum ControllerError {
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("invalid controller: {0}")]
    Invalid(String),
    #[error(transparent)]
    Operator(#[from] OperatorError),
    #[error(transparent)]
    Boundary(#[from] BoundaryError),
}

/// Port-Hamiltonian dynamic output-feedback controller.
#[derive(Clone)]
pub struct DynamicController {
    /// Controller state dimension `m_c` (each of `v₁`, `v₂`).
    pub state_dim: usize,
    /// Symmetric positive definite inverse-mass matrix `K_c`.
    pub k_c: DMatrix<f64>,
    /// Feedthrough `S_c` with `sym S_c > 0`.
    pub s_c: DMatrix<f64>,
    /// Input coupling `B_c` (`m_c × k`).
    pub b_c: DMatrix<f64>,
    /// Spring potential `𝒫_c` with `𝒫_c(0) = 0`, `∇𝒫_c(0) = 0`.
    pub potential: Arc<dyn Fn(&DVector<f64>) -> f64 + Send + Sync>,
    pub potential_grad: Arc<dyn Fn(&DVector<f64>) -> DVector<f64> + Send + Sync>,
    /// Damping `ℛ_c(t, w)` with `wᵀℛ_c(t,w) ≥ 0` and `ℛ_c(t,0) = 0`.
    pub damping: Arc<dyn Fn(f64, &DVector<f64>) -> DVector<f64> + Send + Sync>,
    /// Class-K∞ envelopes `ψ̲_P(|v|) ≤ 𝒫_c(v) ≤ ψ̄_P(|v|)`.
    pub potential_envelopes: (ComparisonFn, ComparisonFn),
}

impl DynamicController {
    /// Quadratic spring `𝒫_c = ½Σλᵢv₁ᵢ²` and linear damping
    /// `ℛ_c(t,w) = ρ_d ∘ w`, with diagonal `K_c`.
    pub fn quadratic(
        k_c_diag: DVector<f64>,
        s_c: DMatrix<f64>,
        b_c: DMatrix<f64>,
        stiffness: DVector<f64>,
        damping_coeff: DVector<f64>,
    ) -> Result<Self, ControllerError> {
        let m_c = k_c_diag.len();
        if stiffness.len() != m_c || damping_coeff.len() != m_c || b_c.nrows() != m_c {
            return Err(ControllerError::Shape(format!(
                "controller blocks disagree on the state dimension {m_c}"
            )));
        }
        if stiffness.iter().any(|&l| !(l > 0.0)) {
            return Err(ControllerError::Invalid("spring stiffness must be positive".into()));
        }
        if damping_coeff.iter().any(|&r| r < 0.0) {
            return Err(ControllerError::Invalid("damping coefficients must be non-negative".into()));
        }
        let lam = stiffness.clone();
        let lam_grad = stiffness.clone();
        let envelope = |c: f64| {
            ComparisonFn::power(c, 2.0).map_err(|e| ControllerError::Invalid(e.to_string()))
        };
        let envelopes = (envelope(0.5 * stiffness.min())?, envelope(0.5 * stiffness.max())?);
        Ok(Self {
            state_dim: m_c,
            k_c: DMatrix::from_diagonal(&k_c_diag),
            s_c,
            b_c,
            potential: Arc::new(move |v| 0.5 * lam.component_mul(&v.component_mul(v)).sum()),
            potential_grad: Arc::new(move |v| lam_grad.component_mul(v)),
            damping: Arc::new(move |_, w| damping_coeff.component_mul(w)),
            potential_envelopes: envelopes,
        })
    }

    pub fn input_dim(&self) -> usize {
        self.b_c.ncols()
    }

    /// Passivity margin `ς = λ_min(sym S_c)`.
    pub fn sigma(&self) -> f64 {
        let sym = (&self.s_c + self.s_c.transpose()) * 0.5;
        sym.symmetric_eigen().eigenvalues.min()
    }

    /// Controller vector field for the state `v = (v₁, v₂)`.
    pub fn rhs(&self, t: f64, v: &DVector<f64>, u_c: &DVector<f64>) -> DVector<f64> {
        let m_c = self.state_dim;
        let v1 = v.rows(0, m_c).into_owned();
        let v2 = v.rows(m_c, m_c).into_owned();
        let w = &self.k_c * &v2;
        let mut out = DVector::zeros(2 * m_c);
        out.rows_mut(0, m_c).copy_from(&w);
        out.rows_mut(m_c, m_c).copy_from(
            &(-(self.potential_grad)(&v1) - (self.damping)(t, &w) + &self.b_c * u_c),
        );
        out
    }

    /// Controller output `y_c = B_cᵀK_cv₂ + S_c u_c`.
    pub fn output(&self, v: &DVector<f64>, u_c: &DVector<f64>) -> DVector<f64> {
        let m_c = self.state_dim;
        let v2 = v.rows(m_c, m_c).into_owned();
        self.b_c.transpose() * (&self.k_c * v2) + &self.s_c * u_c
    }

    /// Structural checks: positive definite `K_c` and `sym S_c`, the
    /// potential's normalization, envelopes, and gradient consistency, and
    /// passivity of the damping — each sampled at random points.
    pub fn validate(&self, trials: usize, seed: u64) -> ControllerValidation {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let m_c = self.state_dim;
        let mut checks = Vec::new();

        let kc_sym = (&self.k_c - self.k_c.transpose()).abs().max();
        let kc_min = self.k_c.clone().symmetric_eigen().eigenvalues.min();
        checks.push(CheckResult {
            name: "kc_positive_definite".into(),
            passed: kc_sym <= 1e-12 && kc_min > 0.0,
            worst_violation: kc_sym.max((-kc_min).max(0.0)),
            detail: format!("asymmetry {kc_sym:.2e}, smallest eigenvalue {kc_min:.3e}"),
        });

        let sigma = self.sigma();
        checks.push(CheckResult {
            name: "feedthrough_positive".into(),
            passed: sigma > 0.0,
            worst_violation: (-sigma).max(0.0),
            detail: format!("ς = λ_min(sym S_c) = {sigma:.3e}"),
        });

        let zero = DVector::zeros(m_c);
        let p0 = (self.potential)(&zero).abs();
        let g0 = (self.potential_grad)(&zero).norm();
        checks.push(CheckResult {
            name: "potential_normalized".into(),
            passed: p0 <= 1e-12 && g0 <= 1e-12,
            worst_violation: p0.max(g0),
            detail: format!("𝒫_c(0) = {p0:.2e}, |∇𝒫_c(0)| = {g0:.2e}"),
        });

        let mut env_violation = 0.0f64;
        let mut grad_violation = 0.0f64;
        let mut damp_violation = 0.0f64;
        for _ in 0..trials.max(1) {
            let rho = 10f64.powf(rng.gen_range(-1.0..1.5));
            let mut v = DVector::from_fn(m_c, |_, _| rng.gen_range(-1.0..1.0f64));
            let n = v.norm();
            if n < 1e-12 {
                continue;
            }
            v *= rho / n;
            let p = (self.potential)(&v);
            let (lo_env, hi_env) = &self.potential_envelopes;
            env_violation = env_violation.max(lo_env.eval(rho) - p).max(p - hi_env.eval(rho));

            let grad = (self.potential_grad)(&v);
            let mut fd = DVector::zeros(m_c);
            let step = 1e-6 * rho.max(1.0);
            for i in 0..m_c {
                let mut vp = v.clone();
                let mut vm = v.clone();
                vp[i] += step;
                vm[i] -= step;
                fd[i] = ((self.potential)(&vp) - (self.potential)(&vm)) / (2.0 * step);
            }
            grad_violation =
                grad_violation.max((grad - fd).norm() / (1.0 + (self.potential_grad)(&v).norm()));

            let t = rng.gen_range(0.0..5.0);
            let w = DVector::from_fn(m_c, |_, _| rng.gen_range(-1.0..1.0f64)) * rho;
            damp_violation = damp_violation.max(-w.dot(&(self.damping)(t, &w)));
        }
        let rc0 = (self.damping)(1.0, &zero).norm();
        checks.push(CheckResult {
            name: "potential_envelopes".into(),
            passed: env_violation <= 1e-9,
            worst_violation: env_violation.max(0.0),
            detail: format!("worst envelope violation {env_violation:.3e}"),
        });
        checks.push(CheckResult {
            name: "potential_gradient_consistent".into(),
            passed: grad_violation <= 1e-4,
            worst_violation: grad_violation,
            detail: format!("worst relative finite-difference defect {grad_violation:.3e}"),
        });
        checks.push(CheckResult {
            name: "damping_passive".into(),
            passed: damp_violation <= 1e-12 && rc0 <= 1e-12,
            worst_violation: damp_violation.max(rc0),
            detail: format!("min wᵀℛ_c = {:.3e}, |ℛ_c(t,0)| = {rc0:.2e}", -damp_violation),
        });
        let passed = checks.iter().all(|c| c.passed);
        ControllerValidation { checks, passed }
    }
}

#[derive(Debug, Serialize)]
pub struct ControllerValidation {
    pub checks: Vec<CheckResult>,
    pub passed: bool,
}

/// The interconnected plant–controller system as one boundary system, with
/// the bookkeeping needed to form its storage function.
pub struct ClosedLoop {
    pub system: BoundaryIoSystem,
    pub controller: DynamicController,
    pub plant_dim: usize,
    /// Impedance passivity margin `ς` of the loop.
    pub sigma: f64,
    /// Largest deviation of the weight `M_cl(t)` from 1 on the support of
    /// constraint rows coupling several slots. Zero means the discrete flow
    /// stays on the feedback constraint exactly; a positive value bounds the
    /// constraint drift rate of closed-loop runs.
    pub weight_uniformity_defect: f64,
}

/// Builds the augmented boundary system for the standard interconnection
/// `u = −y_c + u_cl`, `u_c = y`. State layout: plant `x̲`, then `v₁`, `v₂`.
///
/// Requires a diagonal `K_c` so the augmented Gram `diag(Q, I, K_c)` stays
/// diagonal (the boundary machinery assumes diagonal Grams).
pub fn build_closed_loop_ph(
    plant: &BoundaryIoSystem,
    ctrl: &DynamicController,
    sample_times: &[f64],
    seed: u64,
) -> Result<ClosedLoop, ControllerError> {
    let k = plant.input_dim();
    let m_c = ctrl.state_dim;
    if ctrl.input_dim() != k {
        return Err(ControllerError::Shape(format!(
            "controller couples {} ports, plant has {k}",
            ctrl.input_dim()
        )));
    }
    if ctrl.s_c.nrows() != k || ctrl.s_c.ncols() != k {
        return Err(ControllerError::Shape("feedthrough S_c must be k×k".into()));
    }
    for r in 0..m_c {
        for c in 0..m_c {
            if r != c && ctrl.k_c[(r, c)] != 0.0 {
                return Err(ControllerError::Invalid(
                    "the closed-loop builder requires a diagonal K_c".into(),
                ));
            }
        }
    }
    let validation = ctrl.validate(200, seed ^ 0xc0de);
    if !validation.passed {
        return Err(ControllerError::Invalid(format!(
            "controller failed validation: {:?}",
            validation.checks.iter().filter(|c| !c.passed).map(|c| &c.name).collect::<Vec<_>>()
        )));
    }

    let d_p = plant.dim();
    let dim = d_p + 2 * m_c;

    // Raw generator in z-coordinates: plant stencil, v̇₁ = K_cw₂, and the
    // linear part −w₁ + B_c𝒞̲₀z̲ of v̇₂.
    let mut trips: Vec<(usize, usize, f64)> = plant.raw_action().triplets().collect();
    for i in 0..m_c {
        trips.push((d_p + m_c + i, d_p + i, -1.0));
        let kci = ctrl.k_c[(i, i)];
        if kci != 0.0 {
            trips.push((d_p + i, d_p + m_c + i, kci));
        }
    }
    let bc_c0 = &ctrl.b_c * &**plant.output_rows();
    for r in 0..m_c {
        for c in 0..d_p {
            let v = bc_c0[(r, c)];
            if v != 0.0 {
                trips.push((d_p + m_c + r, c, v));
            }
        }
    }
    let a_raw = CsrMatrix::from_triplets(dim, dim, trips);

    let pad = |m: &DMatrix<f64>| -> DMatrix<f64> {
        let mut out = DMatrix::zeros(m.nrows(), dim);
        out.view_mut((0, 0), (m.nrows(), d_p)).copy_from(m);
        out
    };
    let n_dom = pad(plant.domain_rows());
    let mut b0 = pad(&(&**plant.input_rows() + &ctrl.s_c * &**plant.output_rows()));
    let bck = ctrl.b_c.transpose() * &ctrl.k_c;
    for r in 0..k {
        for i in 0..m_c {
            b0[(r, d_p + m_c + i)] = bck[(r, i)];
        }
    }
    let c0 = pad(plant.output_rows());

    let plant_gram = match plant.family().gram() {
        Gram::Diag(w) => w.clone(),
        Gram::Dense { .. } => {
            return Err(ControllerError::Invalid("plant Gram must be diagonal".into()))
        }
    };
    let mut gram_diag = DVector::from_element(dim, 1.0);
    gram_diag.rows_mut(0, d_p).copy_from(&plant_gram);
    for i in 0..m_c {
        gram_diag[d_p + m_c + i] = ctrl.k_c[(i, i)];
    }

    let plant_m = plant.weight_diag().clone();
    let m_diag: Arc<dyn Fn(f64) -> DVector<f64> + Send + Sync> = Arc::new(move |t: f64| {
        let mut out = DVector::from_element(dim, 1.0);
        out.rows_mut(0, d_p).copy_from(&plant_m(t));
        out
    });

    let mut stacked = DMatrix::zeros(n_dom.nrows() + k, dim);
    stacked.rows_mut(0, n_dom.nrows()).copy_from(&n_dom);
    stacked.rows_mut(n_dom.nrows(), k).copy_from(&b0);
    let solver = ConstraintSolver::new(&stacked, &gram_diag);
    let a0 = project_operator(&a_raw, &solver);

    // Drift indicator: weight deviation from 1 on multi-slot constraint rows.
    let mut defect = 0.0f64;
    for r in 0..stacked.nrows() {
        let support: Vec<usize> = (0..dim).filter(|&c| stacked[(r, c)] != 0.0).collect();
        if support.len() < 2 {
            continue;
        }
        for &t in sample_times {
            let m_t = m_diag(t);
            for &c in &support {
                defect = defect.max((m_t[c] - 1.0).abs());
            }
        }
    }

    let (lo, hi) = plant.family().m_bounds();
    let gram = Gram::diagonal(gram_diag)?;
    let family = OperatorFamily::new(
        MatrixFamily::constant_sparse(a0),
        MatrixFamily::DiagFn(dim, m_diag.clone()),
        lo.min(1.0),
        hi.max(1.0),
        gram.clone(),
        plant.family().m_monotone_decreasing(),
    )?;

    let grad = ctrl.potential_grad.clone();
    let damp = ctrl.damping.clone();
    let kc_diag = ctrl.k_c.diagonal();
    let apply = move |t: f64, x: &DVector<f64>| -> DVector<f64> {
        let v1 = x.rows(d_p, m_c).into_owned();
        let w = kc_diag.component_mul(&x.rows(d_p + m_c, m_c));
        let mut out = DVector::zeros(dim);
        out.rows_mut(d_p + m_c, m_c).copy_from(&(&v1 - grad(&v1) - damp(t, &w)));
        out
    };
    let horizon = sample_times.iter().cloned().fold(1.0f64, f64::max);
    let ledger = make_ledger_from_samples(
        &apply,
        dim,
        &gram,
        (0.0, horizon),
        &[0.25, 0.5, 1.0, 2.0, 4.0, 8.0],
        150,
        seed,
    );
    let f_cl = Nonlinearity::new(apply, ledger, true);

    let system = BoundaryIoSystem::from_parts(
        family,
        Arc::new(a_raw),
        Arc::new(n_dom),
        Arc::new(b0),
        Arc::new(c0),
        m_diag,
        Some(f_cl),
        plant.n_cells(),
        plant.interval(),
    )?;
    Ok(ClosedLoop {
        system,
        controller: ctrl.clone(),
        plant_dim: d_p,
        sigma: ctrl.sigma(),
        weight_uniformity_defect: defect,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::boundary::discretize_ph;
    use crate::models::{make_vibrating_string, CoefficientProfile};
    use crate::operators::validate_family;
    use crate::semilinear::SolveOptions;
    use crate::signal::Signal;

    fn test_controller(damping: f64, stiffness: f64) -> DynamicController {
        DynamicController::quadratic(
            DVector::from_element(1, 2.0),
            DMatrix::from_element(1, 1, 0.5),
            DMatrix::from_element(1, 1, 1.0),
            DVector::from_element(1, stiffness),
            DVector::from_element(1, damping),
        )
        .unwrap()
    }

    /// String whose coefficients drift in the interior but stay at 1 near
    /// the actuated end, so the feedback constraint row keeps unit weight.
    fn boundary_stationary_string() -> crate::boundary::PortHamiltonianSpec {
        let shape = |z: f64| (std::f64::consts::PI * (1.0 - z) / 2.0).sin().powi(2);
        let rho = CoefficientProfile::ramp_shaped(1.0, 0.3, 1.0, shape).unwrap();
        let tension = CoefficientProfile::ramp_shaped(1.0, -0.25, 1.0, shape).unwrap();
        make_vibrating_string(&rho, &tension, (0.0, 1.0)).unwrap()
    }

    #[test]
    fn quadratic_controller_validates() {
        let ctrl = test_controller(0.3, 1.5);
        let report = ctrl.validate(200, 17);
        assert!(report.passed, "{:#?}", report.checks);
        assert!((ctrl.sigma() - 0.5).abs() < 1e-14);
    }

    #[test]
    fn active_damping_is_rejected() {
        let mut ctrl = test_controller(0.3, 1.0);
        ctrl.damping = Arc::new(|_, w: &DVector<f64>| -w.clone());
        let report = ctrl.validate(100, 3);
        assert!(!report.passed);
        assert!(report.checks.iter().any(|c| c.name == "damping_passive" && !c.passed));
    }

    #[test]
    fn closed_loop_joins_the_class_and_stays_on_the_constraint() {
        let plant = discretize_ph(&boundary_stationary_string(), 16).unwrap();
        let ctrl = test_controller(0.2, 1.3);
        let cl = build_closed_loop_ph(&plant, &ctrl, &[0.0, 0.5, 1.0, 2.0], 5).unwrap();
        assert!(cl.weight_uniformity_defect <= 1e-12, "defect {:.3e}", cl.weight_uniformity_defect);
        let validation = validate_family(cl.system.family(), &[0.0, 0.5, 1.5]);
        assert!(validation.passed, "{:#?}", validation.checks);

        // Free closed-loop run: start from a plant bump + controller offset,
        // check the feedback constraint row holds along the flow.
        let dim = cl.system.dim();
        let mut seedling = DVector::zeros(dim);
        for j in 0..=16usize {
            let node = j as f64 / 16.0;
            seedling[2 * j] = (std::f64::consts::PI * node).sin();
        }
        seedling[dim - 2] = 0.4; // v₁
        let x0 = cl.system.project_classical_datum(0.0, &seedling, &DVector::zeros(1));
        let traj = cl
            .system
            .simulate_boundary(&x0, &Signal::zero(1), 2.0, 1e-3, &SolveOptions::default())
            .unwrap();
        let mut worst = 0.0f64;
        for (t, x) in traj.times.iter().zip(&traj.states) {
            worst = worst.max(cl.system.input_trace(*t, x).norm());
        }
        assert!(worst <= 1e-9, "feedback constraint drifted by {worst:.3e}");
    }

    #[test]
    fn closed_loop_dissipates_true_storage() {
        let plant = discretize_ph(&boundary_stationary_string(), 16).unwrap();
        let ctrl = test_controller(0.25, 2.0);
        let cl = build_closed_loop_ph(&plant, &ctrl, &[0.0, 1.0, 2.0], 5).unwrap();
        let dim = cl.system.dim();
        let mut seedling = DVector::zeros(dim);
        for j in 0..=16usize {
            seedling[2 * j + 1] = 0.8 * (j as f64 / 16.0);
        }
        seedling[dim - 1] = -0.3; // v₂
        let x0 = cl.system.project_classical_datum(0.0, &seedling, &DVector::zeros(1));
        let traj = cl
            .system
            .simulate_boundary(&x0, &Signal::zero(1), 3.0, 1e-3, &SolveOptions::default())
            .unwrap();
        let gram = cl.system.family().gram();
        let storage = |t: f64, x: &DVector<f64>| -> f64 {
            let m = (cl.system.weight_diag())(t);
            let x_p = x.rows(0, cl.plant_dim).into_owned();
            let m_p = m.rows(0, cl.plant_dim).component_mul(&x_p);
            let v1 = x.rows(cl.plant_dim, 1).into_owned();
            let v2 = x.rows(cl.plant_dim + 1, 1).into_owned();
            let plant_energy = 0.5
                * gram
                    .inner(
                        &{
                            let mut full = DVector::zeros(x.len());
                            full.rows_mut(0, cl.plant_dim).copy_from(&m_p);
                            full
                        },
                        &{
                            let mut full = DVector::zeros(x.len());
                            full.rows_mut(0, cl.plant_dim).copy_from(&x_p);
                            full
                        },
                    );
            plant_energy + (cl.controller.potential)(&v1) + 0.5 * cl.controller.k_c[(0, 0)] * v2[0] * v2[0]
        };
        let mut prev = storage(0.0, &traj.states[0]);
        for (t, x) in traj.times.iter().zip(&traj.states).skip(1) {
            let v = storage(*t, x);
            assert!(v <= prev + 1e-10, "storage increased at t = {t}: {prev} → {v}");
            prev = v;
        }
        let first = storage(0.0, &traj.states[0]);
        assert!(prev < 0.8 * first, "loop failed to dissipate: {first} → {prev}");
    }

    #[test]
    fn mismatched_ports_are_rejected() {
        let plant = discretize_ph(&boundary_stationary_string(), 8).unwrap();
        let ctrl = DynamicController::quadratic(
            DVector::from_element(2, 1.0),
            DMatrix::from_element(2, 2, 0.5) + DMatrix::identity(2, 2),
            DMatrix::from_element(2, 2, 1.0),
            DVector::from_element(2, 1.0),
            DVector::from_element(2, 0.1),
        )
        .unwrap();
        assert!(matches!(
            build_closed_loop_ph(&plant, &ctrl, &[0.0], 1),
            Err(ControllerError::Shape(_))
        ));
    }
}
