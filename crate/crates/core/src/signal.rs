//! Input signals `t ↦ u(t) ∈ ℝᵏ` with derivatives and L² norms.
//!
//! Boundary-control runs differentiate the input (the forcing term carries
//! `u̇`), so signals expose an analytic derivative where one exists and a
//! central finite difference otherwise. Norms `‖u‖_{[a,b],L²}` are computed
//! by trapezoidal quadrature on a caller-chosen grid.

use std::sync::Arc;

use nalgebra::DVector;

/// Step used by the finite-difference fallback of [`Signal::deriv`].
const FD_STEP: f64 = 1e-6;

/// A time signal with dimension, value map, and optional analytic derivative.
///
/// `breakpoints` lists times where the signal (or a derivative) jumps;
/// quadrature routines split their integration intervals there so that
/// piecewise-smooth signals are integrated at full order.
#[derive(Clone)]
pub struct Signal {
    dim: usize,
    value: Arc<dyn Fn(f64) -> DVector<f64> + Send + Sync>,
    deriv: Option<Arc<dyn Fn(f64) -> DVector<f64> + Send + Sync>>,
    breakpoints: Vec<f64>,
}

impl std::fmt::Debug for Signal {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Signal")
            .field("dim", &self.dim)
            .field("analytic_deriv", &self.deriv.is_some())
            .finish()
    }
}

impl Signal {
    pub fn custom(dim: usize, value: impl Fn(f64) -> DVector<f64> + Send + Sync + 'static) -> Self {
        Self { dim, value: Arc::new(value), deriv: None, breakpoints: Vec::new() }
    }

    /// A signal with an analytic derivative (required to be C¹; boundary
    /// simulations additionally assume C²).
    pub fn custom_c2(
        dim: usize,
        value: impl Fn(f64) -> DVector<f64> + Send + Sync + 'static,
        deriv: impl Fn(f64) -> DVector<f64> + Send + Sync + 'static,
    ) -> Self {
        Self {
            dim,
            value: Arc::new(value),
            deriv: Some(Arc::new(deriv)),
            breakpoints: Vec::new(),
        }
    }

    pub fn zero(dim: usize) -> Self {
        Self::custom_c2(dim, move |_| DVector::zeros(dim), move |_| DVector::zeros(dim))
    }

    pub fn constant(value: DVector<f64>) -> Self {
        let dim = value.len();
        let v = value.clone();
        Self::custom_c2(dim, move |_| v.clone(), move |_| DVector::zeros(dim))
    }

    /// `amplitude·sin(omega·t + phase)` componentwise.
    pub fn sinusoid(amplitude: DVector<f64>, omega: f64, phase: f64) -> Self {
        let dim = amplitude.len();
        let a = amplitude.clone();
        let a2 = amplitude;
        Self::custom_c2(
            dim,
            move |t| &a * (omega * t + phase).sin(),
            move |t| &a2 * (omega * (omega * t + phase).cos()),
        )
    }

    /// `amplitude·sin²(omega·t)`: smooth, vanishing with its derivative at
    /// `t = 0`, hence compatible with a zero initial state.
    pub fn sin_squared(amplitude: DVector<f64>, omega: f64) -> Self {
        let dim = amplitude.len();
        let a = amplitude.clone();
        let a2 = amplitude;
        Self::custom_c2(
            dim,
            move |t| &a * (omega * t).sin().powi(2),
            move |t| &a2 * (omega * (2.0 * omega * t).sin()),
        )
    }

    /// Heaviside step to `value` at `time` (zero before). The reported
    /// derivative ignores the jump; mollify before feeding this to a
    /// boundary simulation.
    pub fn step(time: f64, value: DVector<f64>) -> Self {
        let dim = value.len();
        let v = value.clone();
        Self::custom_c2(
            dim,
            move |t| if t >= time { v.clone() } else { DVector::zeros(dim) },
            move |_| DVector::zeros(dim),
        )
        .with_breakpoints(vec![time])
    }

    /// Registers jump times for quadrature splitting.
    pub fn with_breakpoints(mut self, mut points: Vec<f64>) -> Self {
        points.sort_by(f64::total_cmp);
        points.dedup();
        self.breakpoints = points;
        self
    }

    /// Times where the signal is not smooth, sorted ascending.
    pub fn breakpoints(&self) -> &[f64] {
        &self.breakpoints
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn value(&self, t: f64) -> DVector<f64> {
        (self.value)(t)
    }

    /// `u̇(t)`: analytic when available, otherwise a central difference.
    pub fn deriv(&self, t: f64) -> DVector<f64> {
        match &self.deriv {
            Some(d) => d(t),
            None => (self.value(t + FD_STEP) - self.value(t - FD_STEP)) / (2.0 * FD_STEP),
        }
    }

    pub fn has_analytic_deriv(&self) -> bool {
        self.deriv.is_some()
    }

    /// Pointwise difference `self − other` (derivatives combined when both
    /// sides have analytic ones).
    pub fn difference(&self, other: &Signal) -> Signal {
        assert_eq!(self.dim, other.dim, "signal dimensions differ");
        let (a, b) = (self.value.clone(), other.value.clone());
        let value = move |t: f64| a(t) - b(t);
        let mut points = self.breakpoints.clone();
        points.extend_from_slice(&other.breakpoints);
        let combined = match (&self.deriv, &other.deriv) {
            (Some(da), Some(db)) => {
                let (da, db) = (da.clone(), db.clone());
                Signal::custom_c2(self.dim, value, move |t| da(t) - db(t))
            }
            _ => Signal::custom(self.dim, value),
        };
        combined.with_breakpoints(points)
    }

    /// Trapezoidal `‖u‖_{[a,b],L²}` on a grid of roughly `steps` intervals,
    /// split at interior breakpoints so jumps do not degrade the order.
    pub fn l2_norm(&self, a: f64, b: f64, steps: usize) -> f64 {
        if !(b > a) || steps == 0 {
            return 0.0;
        }
        let mut splits = vec![a];
        splits.extend(self.breakpoints.iter().copied().filter(|&p| p > a && p < b));
        splits.push(b);
        let mut acc = 0.0;
        for pair in splits.windows(2) {
            let (lo, hi) = (pair[0], pair[1]);
            let n = ((steps as f64 * (hi - lo) / (b - a)).ceil() as usize).max(8);
            let h = (hi - lo) / n as f64;
            for k in 0..=n {
                // Evaluate one-sidedly inside the piece so a jump exactly at
                // a split contributes only to the side it belongs to.
                let t = (lo + k as f64 * h).clamp(lo + 1e-12 * h, hi - 1e-12 * h);
                let w = if k == 0 || k == n { 0.5 } else { 1.0 };
                acc += w * h * self.value(t).norm_squared();
            }
        }
        acc.sqrt()
    }
}
