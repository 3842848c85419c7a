//! Systems with in-domain (distributed) inputs and outputs:
//! `ẋ = A(t)x + f(t,x) + B(t)u`, `y = C(t)x`.
//!
//! Beyond simulation this module provides the input-to-state map
//! `Φ_t(u) = ∫₀ᵗ T(t,s)B(s)u(s) ds` — both as a quadrature (for
//! cross-checks) and as a sampled operator-norm estimate `‖Φ_t‖ ≤ C`,
//! the constant entering well-posedness gap predictions — and collocated
//! output feedback `u = −g(y)`, whose closed loop is again a plain
//! distributed system with `f(t,x) := f(t,x) − B(t)g(C(t)x)`.

use std::sync::Arc;

use nalgebra::DVector;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use thiserror::Error;

use crate::operators::{
    substeps, CheckResult, MatrixFamily, OperatorError, OperatorFamily, StepMethod, Stepper,
};
use crate::semilinear::{
    make_ledger_from_samples, solve_mild, Nonlinearity, SolveError, SolveOptions, Trajectory,
};
use crate::signal::Signal;

#[derive(Debug, Error)]
pub enum IoSystemError {
    #[error(transparent)]
    Operator(#[from] OperatorError),
    #[error(transparent)]
    Solve(#[from] SolveError),
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("validation failed: {0}")]
    Validation(String),
}

/// `ẋ = A(t)x + f(t,x) + B(t)u`, `y = C(t)x` with `A(t) = A₀·M(t)` carried
/// by an [`OperatorFamily`].
pub struct DistributedIoSystem {
    family: OperatorFamily,
    b: MatrixFamily,
    c: MatrixFamily,
    f: Nonlinearity,
}

impl DistributedIoSystem {
    pub fn new(
        family: OperatorFamily,
        b: MatrixFamily,
        c: MatrixFamily,
        f: Nonlinearity,
    ) -> Result<Self, IoSystemError> {
        let n = family.dim();
        if b.nrows() != n {
            return Err(IoSystemError::Shape(format!(
                "input matrix has {} rows, state dimension is {n}",
                b.nrows()
            )));
        }
        if c.ncols() != n {
            return Err(IoSystemError::Shape(format!(
                "output matrix has {} columns, state dimension is {n}",
                c.ncols()
            )));
        }
        if b.ncols() != c.nrows() {
            return Err(IoSystemError::Shape(format!(
                "input dimension {} differs from output dimension {}; \
                 input/output pairs must be conjugate",
                b.ncols(),
                c.nrows()
            )));
        }
        Ok(Self { family, b, c, f })
    }

    pub fn family(&self) -> &OperatorFamily {
        &self.family
    }

    pub fn input_matrix(&self) -> &MatrixFamily {
        &self.b
    }

    pub fn output_matrix(&self) -> &MatrixFamily {
        &self.c
    }

    pub fn nonlinearity(&self) -> &Nonlinearity {
        &self.f
    }

    pub fn dim(&self) -> usize {
        self.family.dim()
    }

    pub fn input_dim(&self) -> usize {
        self.b.ncols()
    }

    pub fn output_dim(&self) -> usize {
        self.c.nrows()
    }

    pub fn output_at(&self, t: f64, x: &DVector<f64>) -> DVector<f64> {
        self.c.apply(t, x)
    }

    /// Integrates the forced system from `x0` on `[0, t_end]` and attaches
    /// the output samples `y_k = C(t_k)x_k`.
    pub fn simulate(
        &self,
        x0: &DVector<f64>,
        u: &Signal,
        t_end: f64,
        dt: f64,
        opts: &SolveOptions,
    ) -> Result<Trajectory, IoSystemError> {
        if u.dim() != self.input_dim() {
            return Err(IoSystemError::Shape(format!(
                "input signal has dimension {}, system expects {}",
                u.dim(),
                self.input_dim()
            )));
        }
        let forcing = |t: f64| self.b.apply(t, &u.value(t));
        let mut traj = solve_mild(&self.family, &self.f, Some(&forcing), 0.0, x0, t_end, dt, opts)?;
        traj.outputs =
            traj.times.iter().zip(&traj.states).map(|(&t, x)| self.c.apply(t, x)).collect();
        Ok(traj)
    }

    /// The input-to-state map `Φ_t(u) = ∫₀ᵗ T(t,s)B(s)u(s) ds` by trapezoid
    /// quadrature on the step grid. The running integral is propagated
    /// incrementally (`I_{k+1} = T(t_{k+1},t_k)(I_k + ½h g_k) + ½h g_{k+1}`),
    /// so the cost is one sweep of the grid.
    pub fn input_map_phi(
        &self,
        u: &Signal,
        t: f64,
        dt: f64,
        method: StepMethod,
    ) -> Result<DVector<f64>, IoSystemError> {
        if !(t > 0.0) {
            return Err(OperatorError::InvalidInterval { s: 0.0, t }.into());
        }
        if !(dt > 0.0) {
            return Err(OperatorError::InvalidStep(dt).into());
        }
        let stepper = Stepper::new(&self.family, method, (0.0, t));
        let g = |s: f64| self.b.apply(s, &u.value(s));
        let mut integral = DVector::zeros(self.dim());
        let mut g_prev = g(0.0);
        for (t_k, h) in substeps(0.0, t, dt) {
            let tau = t_k + 0.5 * h;
            integral += &g_prev * (0.5 * h);
            integral = stepper.propagate(tau, h, &integral);
            g_prev = g(t_k + h);
            integral += &g_prev * (0.5 * h);
        }
        Ok(integral)
    }

    /// Sampled bound `C ≥ ‖Φ_t‖` over `t ≤ t0`: evaluates the zero-state
    /// response of the *linear* part (`f` dropped) for a battery of inputs
    /// and takes the worst ratio `‖x(t)‖_G / ‖u‖_{L²(0,t)}`. The battery
    /// always contains the constant unit inputs held for the full horizon;
    /// random trials mix constants and sinusoids over random sub-horizons.
    pub fn estimate_phi_bound(
        &self,
        t0: f64,
        trials: usize,
        dt: f64,
        seed: u64,
    ) -> Result<f64, IoSystemError> {
        if !(t0 > 0.0) {
            return Err(OperatorError::InvalidInterval { s: 0.0, t: t0 }.into());
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let k = self.input_dim();
        let zero_f = Nonlinearity::zero();
        let opts = SolveOptions::default();
        let x0 = DVector::zeros(self.dim());
        let mut bound = 0.0f64;
        let mut probe = |t: f64, u: &Signal| -> Result<(), IoSystemError> {
            let forcing = |s: f64| self.b.apply(s, &u.value(s));
            let traj = solve_mild(&self.family, &zero_f, Some(&forcing), 0.0, &x0, t, dt, &opts)?;
            let steps = traj.len().saturating_sub(1).max(1);
            let un = u.l2_norm(0.0, t, steps);
            if un > 1e-12 {
                bound = bound.max(self.family.gram().norm(traj.final_state()) / un);
            }
            Ok(())
        };
        for j in 0..k {
            let mut e = DVector::zeros(k);
            e[j] = 1.0;
            probe(t0, &Signal::constant(e))?;
        }
        let min_span = (5.0 * dt).min(0.5 * t0);
        for trial in 0..trials {
            let t = if trial % 2 == 0 { t0 } else { rng.gen_range(min_span..=t0) };
            let base = DVector::from_fn(k, |_, _| rng.gen_range(-1.0..1.0f64));
            let amp = DVector::from_fn(k, |_, _| rng.gen_range(-1.0..1.0f64));
            let omega: f64 = rng.gen_range(0.5..6.0);
            let phase: f64 = rng.gen_range(0.0..std::f64::consts::TAU);
            let u = Signal::custom(k, move |s| &base + &amp * (omega * s + phase).sin());
            probe(t, &u)?;
        }
        Ok(bound)
    }
}

/// Report of [`CollocatedSpec::validate`].
#[derive(Debug, Serialize)]
pub struct CollocationReport {
    pub checks: Vec<CheckResult>,
    pub max_collocation_defect: f64,
    pub min_damping_margin: f64,
    pub passed: bool,
}

/// A distributed system together with a static output feedback `u = −g(y)`
/// claimed to be collocated (`C(t) = B(t)* = B(t)ᵀ G M(t)`) and damping
/// (`⟨y, g(y)⟩ ≥ ς|y|²`, `g(0) = 0`).
pub struct CollocatedSpec {
    pub system: DistributedIoSystem,
    pub g: Arc<dyn Fn(&DVector<f64>) -> DVector<f64> + Send + Sync>,
    /// Claimed damping constant `ς > 0`.
    pub sigma: f64,
}

impl CollocatedSpec {
    /// Checks the collocation identity at the given times and the damping
    /// inequality at random outputs across several radii.
    pub fn validate(
        &self,
        times: &[f64],
        trials: usize,
        seed: u64,
    ) -> Result<CollocationReport, IoSystemError> {
        if !(self.sigma > 0.0) {
            return Err(IoSystemError::Validation(format!(
                "damping constant must be positive, got {}",
                self.sigma
            )));
        }
        let sys = &self.system;
        let gram = sys.family().gram().to_dense();
        let mut defect = 0.0f64;
        for &t in times {
            let conjugate = sys.input_matrix().at(t).transpose() * &gram * sys.family().m().at(t);
            defect = defect.max((sys.output_matrix().at(t) - conjugate).abs().max());
        }
        let collocated = CheckResult {
            name: "collocation_identity".into(),
            passed: defect <= 1e-12,
            worst_violation: defect,
            detail: format!("max |C(t) − B(t)ᵀGM(t)| = {defect:.3e} over {} times", times.len()),
        };

        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let k = sys.output_dim();
        let g0 = (self.g)(&DVector::zeros(k)).norm();
        let vanishes = CheckResult {
            name: "feedback_vanishes_at_zero".into(),
            passed: g0 <= 1e-12,
            worst_violation: g0,
            detail: format!("|g(0)| = {g0:.3e}"),
        };
        let mut margin = f64::INFINITY;
        for &rho in &[0.1, 1.0, 10.0] {
            for _ in 0..trials {
                let mut y = DVector::from_fn(k, |_, _| rng.gen_range(-1.0..1.0f64));
                let n = y.norm();
                if n < 1e-12 {
                    continue;
                }
                y *= rho * rng.gen_range(0.1..1.0f64) / n;
                let supply = y.dot(&(self.g)(&y)) - self.sigma * y.norm_squared();
                margin = margin.min(supply / y.norm_squared());
            }
        }
        let damping = CheckResult {
            name: "damping_lower_bound".into(),
            passed: margin >= -1e-10,
            worst_violation: (-margin).max(0.0),
            detail: format!("min (⟨y,g(y)⟩ − ς|y|²)/|y|² = {margin:.3e}"),
        };
        let passed = collocated.passed && vanishes.passed && damping.passed;
        Ok(CollocationReport {
            checks: vec![collocated, vanishes, damping],
            max_collocation_defect: defect,
            min_damping_margin: margin,
            passed,
        })
    }
}

/// Closes the loop `u = −g(y)`: returns the autonomous-input system with
/// `f(t,x) := f(t,x) − B(t)g(C(t)x)` and a freshly sampled Lipschitz ledger.
/// The returned system keeps `B`, `C` so the closed loop can still be probed
/// through an exogenous input channel.
pub fn build_collocated_closed_loop(
    spec: &CollocatedSpec,
    time_span: (f64, f64),
    ledger_radii: &[f64],
    trials: usize,
    seed: u64,
) -> Result<DistributedIoSystem, IoSystemError> {
    let sys = &spec.system;
    let (b, c, g) = (sys.input_matrix().clone(), sys.output_matrix().clone(), spec.g.clone());
    let open_f = sys.nonlinearity().clone();
    let apply = move |t: f64, x: &DVector<f64>| -> DVector<f64> {
        open_f.eval(t, x) - b.apply(t, &g(&c.apply(t, x)))
    };
    let ledger = make_ledger_from_samples(
        &apply,
        sys.dim(),
        sys.family().gram(),
        time_span,
        ledger_radii,
        trials,
        seed,
    );
    let vanishes = sys.nonlinearity().vanishes_at_zero();
    let f = Nonlinearity::new(apply, ledger, vanishes);
    DistributedIoSystem::new(
        sys.family().clone(),
        sys.input_matrix().clone(),
        sys.output_matrix().clone(),
        f,
    )
}
