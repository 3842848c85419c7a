//! Declarative scenario runs: a TOML file names a system, controller,
//! input, and a list of checks; running it produces a `timeseries.csv` and
//! a deterministic `report.json`.
//!
//! Scenarios exist so that verification runs are reproducible artifacts:
//! the same file and seed always produce byte-identical reports (no
//! timestamps, no map iteration, fixed float formatting).

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::boundary::{discretize_ph, BoundaryIoSystem};
use crate::comparison::build_ugs_gains;
use crate::controller::{build_closed_loop_ph, ClosedLoop, DynamicController};
use crate::distributed::{
    build_collocated_closed_loop, CollocatedSpec, DistributedIoSystem,
};
use crate::models::{
    make_euler_bernoulli_tip_mass, make_timoshenko_beam, make_vibrating_string,
    CoefficientProfile,
};
use crate::operators::StepMethod;
use crate::semilinear::{SolveOptions, Trajectory};
use crate::signal::Signal;
use crate::storage::{closed_loop_ph_storage, quadratic_storage, StorageFunction};
use crate::verify::{
    check_equilibrium, check_impedance_passivity, check_scattering_passivity, check_ugs,
    mollify_input, scattering_from_impedance, SystemHandle,
};

#[derive(Debug, Error)]
pub enum ScenarioError {
    #[error("cannot read scenario: {0}")]
    Io(#[from] std::io::Error),
    #[error("cannot parse scenario: {0}")]
    Parse(#[from] toml::de::Error),
    #[error("invalid scenario: {0}")]
    Invalid(String),
    #[error("run failed: {0}")]
    Run(String),
}

impl ScenarioError {
    /// `true` for errors in the scenario description itself (as opposed to
    /// failures of the described run) — these map to CLI exit code 2.
    pub fn is_config_error(&self) -> bool {
        matches!(self, Self::Io(_) | Self::Parse(_) | Self::Invalid(_))
    }
}

fn invalid(msg: impl Into<String>) -> ScenarioError {
    ScenarioError::Invalid(msg.into())
}

// ---------------------------------------------------------------------------
// Configuration schema
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Scenario {
    /// Display name; defaults to the file stem when loaded from disk.
    #[serde(default)]
    pub name: Option<String>,
    #[serde(default = "default_seed")]
    pub seed: u64,
    pub system: SystemConfig,
    #[serde(default)]
    pub controller: ControllerConfig,
    #[serde(default)]
    pub input: InputConfig,
    #[serde(default)]
    pub initial_state: InitialStateConfig,
    #[serde(default)]
    pub numerics: NumericsConfig,
    #[serde(default)]
    pub checks: Vec<CheckConfig>,
}

fn default_seed() -> u64 {
    0
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SystemConfig {
    pub kind: SystemKind,
    #[serde(default = "default_n_cells")]
    pub n_cells: usize,
    #[serde(default = "default_interval")]
    pub interval: [f64; 2],
    /// Time-varying coefficient profiles by name. Expected names: string
    /// `rho`, `tension`; timoshenko `shear`, `rho`, `flexural`,
    /// `rot_inertia`; euler_bernoulli `stiffness`, `gain`. Missing entries
    /// default to the constant 1.
    #[serde(default)]
    pub coefficients: BTreeMap<String, ProfileConfig>,
    /// Scalar parameters of the Euler–Bernoulli model.
    #[serde(default = "one")]
    pub rho: f64,
    #[serde(default = "default_tip_mass")]
    pub tip_mass: f64,
    #[serde(default = "default_tip_inertia")]
    pub tip_inertia: f64,
}

fn default_n_cells() -> usize {
    32
}
fn default_interval() -> [f64; 2] {
    [0.0, 1.0]
}
fn one() -> f64 {
    1.0
}
fn default_tip_mass() -> f64 {
    0.5
}
fn default_tip_inertia() -> f64 {
    0.1
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SystemKind {
    String,
    Timoshenko,
    EulerBernoulli,
}

impl SystemKind {
    fn label(self) -> &'static str {
        match self {
            Self::String => "string",
            Self::Timoshenko => "timoshenko",
            Self::EulerBernoulli => "euler_bernoulli",
        }
    }
}

/// A coefficient ramp `base + delta·t/(rate + t)`, optionally shaped to
/// stay constant at the actuated end of the interval (required when the
/// profile multiplies a constraint row of a closed loop).
#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProfileConfig {
    pub base: f64,
    #[serde(default)]
    pub delta: f64,
    #[serde(default = "one")]
    pub rate: f64,
    #[serde(default)]
    pub boundary_stationary: bool,
}

impl ProfileConfig {
    fn build(&self, interval: [f64; 2]) -> Result<CoefficientProfile, ScenarioError> {
        let mk = |r: Result<CoefficientProfile, crate::models::ModelError>| {
            r.map_err(|e| invalid(e.to_string()))
        };
        if self.delta == 0.0 {
            return mk(CoefficientProfile::constant(self.base));
        }
        if self.boundary_stationary {
            let [a, b] = interval;
            let shape = move |z: f64| {
                let s = ((b - z) / (b - a)).clamp(0.0, 1.0);
                (std::f64::consts::FRAC_PI_2 * s).sin().powi(2)
            };
            return mk(CoefficientProfile::ramp_shaped(self.base, self.delta, self.rate, shape));
        }
        mk(CoefficientProfile::ramp(self.base, self.delta, self.rate))
    }
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields, rename_all = "snake_case", tag = "kind")]
pub enum ControllerConfig {
    #[default]
    None,
    /// Static collocated feedback `g(y) = sigma·y + cubic·y³` folded into
    /// the distributed dynamics (Euler–Bernoulli only).
    Static {
        sigma: f64,
        #[serde(default)]
        cubic: f64,
    },
    /// Scalar port-Hamiltonian controller on the boundary port (string
    /// only): inverse mass `k_c`, feedthrough `s_c`, spring `stiffness`,
    /// linear damping `damping`.
    Dynamic {
        k_c: f64,
        s_c: f64,
        stiffness: f64,
        #[serde(default)]
        damping: f64,
    },
}

impl ControllerConfig {
    fn label(&self) -> &'static str {
        match self {
            Self::None => "none",
            Self::Static { .. } => "static",
            Self::Dynamic { .. } => "dynamic",
        }
    }
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields, rename_all = "snake_case", tag = "kind")]
pub enum InputConfig {
    #[default]
    Zero,
    Constant {
        value: Vec<f64>,
    },
    Sinusoid {
        amplitude: Vec<f64>,
        omega: f64,
        #[serde(default)]
        phase: f64,
    },
    SinSquared {
        amplitude: Vec<f64>,
        omega: f64,
    },
    Step {
        time: f64,
        value: Vec<f64>,
        /// When set, the step is smoothed by `mollify_input` at this level
        /// before the run (required for boundary systems, whose inputs must
        /// be differentiable).
        #[serde(default)]
        mollify_level: Option<usize>,
    },
}

impl InputConfig {
    fn build(&self, input_dim: usize) -> Result<Signal, ScenarioError> {
        let vec_of = |v: &[f64]| -> Result<DVector<f64>, ScenarioError> {
            if v.len() != input_dim {
                return Err(invalid(format!(
                    "input has {} components, system expects {input_dim}",
                    v.len()
                )));
            }
            Ok(DVector::from_row_slice(v))
        };
        Ok(match self {
            Self::Zero => Signal::zero(input_dim),
            Self::Constant { value } => Signal::constant(vec_of(value)?),
            Self::Sinusoid { amplitude, omega, phase } => {
                Signal::sinusoid(vec_of(amplitude)?, *omega, *phase)
            }
            Self::SinSquared { amplitude, omega } => {
                Signal::sin_squared(vec_of(amplitude)?, *omega)
            }
            Self::Step { time, value, mollify_level } => {
                let raw = Signal::step(*time, vec_of(value)?);
                match mollify_level {
                    Some(n) if *n >= 1 => mollify_input(&raw, *n),
                    Some(_) => return Err(invalid("mollify_level must be at least 1")),
                    None => raw,
                }
            }
        })
    }
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields, rename_all = "snake_case", tag = "kind")]
pub enum InitialStateConfig {
    #[default]
    Zero,
    /// A sine bump `amplitude·sin(mode·π·ζ)` written into one state
    /// component per node (projected onto the admissible set for boundary
    /// systems).
    Bump {
        #[serde(default = "one")]
        amplitude: f64,
        #[serde(default)]
        component: usize,
        #[serde(default = "default_mode")]
        mode: usize,
    },
}

fn default_mode() -> usize {
    1
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NumericsConfig {
    #[serde(default = "default_dt")]
    pub dt: f64,
    #[serde(default = "default_t_end")]
    pub t_end: f64,
    #[serde(default)]
    pub method: MethodConfig,
}

impl Default for NumericsConfig {
    fn default() -> Self {
        Self { dt: default_dt(), t_end: default_t_end(), method: MethodConfig::default() }
    }
}

fn default_dt() -> f64 {
    1e-3
}
fn default_t_end() -> f64 {
    2.0
}

#[derive(Debug, Clone, Copy, Default, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MethodConfig {
    #[default]
    ExpTaylor,
    ExpPade,
    ImplicitMidpoint,
}

impl From<MethodConfig> for StepMethod {
    fn from(m: MethodConfig) -> Self {
        match m {
            MethodConfig::ExpTaylor => StepMethod::ExpTaylor,
            MethodConfig::ExpPade => StepMethod::ExpPade,
            MethodConfig::ImplicitMidpoint => StepMethod::ImplicitMidpoint,
        }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields, rename_all = "snake_case", tag = "kind")]
pub enum CheckConfig {
    /// `V(t) − V(0) ≤ ∫ uᵀy` along the run, cumulative residual ≤ tolerance.
    Impedance {
        #[serde(default = "default_check_tol")]
        tolerance: f64,
    },
    /// `V(t) − V(0) ≤ ∫ α|u|² − β|y|²` with `(α, β)` from the controller
    /// margin.
    Scattering {
        #[serde(default = "default_check_tol")]
        tolerance: f64,
    },
    /// `‖x(t)‖ ≤ σ(‖x₀‖) + γ(‖u‖_{L²})` over random data.
    Ugs {
        #[serde(default = "default_ugs_trials")]
        trials: usize,
        #[serde(default = "default_ugs_slack")]
        slack: f64,
    },
    /// Zero data stays at zero.
    Equilibrium {
        #[serde(default = "default_eq_tol")]
        tolerance: f64,
    },
}

fn default_check_tol() -> f64 {
    1e-3
}
fn default_ugs_trials() -> usize {
    20
}
fn default_ugs_slack() -> f64 {
    0.05
}
fn default_eq_tol() -> f64 {
    1e-12
}

// ---------------------------------------------------------------------------
// Overrides and loading
// ---------------------------------------------------------------------------

/// Command-line parameter overrides applied after parsing.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub dt: Option<f64>,
    pub n_cells: Option<usize>,
    pub t_end: Option<f64>,
    pub seed: Option<u64>,
}

impl Scenario {
    pub fn from_toml(text: &str) -> Result<Self, ScenarioError> {
        Ok(toml::from_str(text)?)
    }

    pub fn load(path: &Path) -> Result<Self, ScenarioError> {
        let text = std::fs::read_to_string(path)?;
        let mut scenario = Self::from_toml(&text)?;
        if scenario.name.is_none() {
            scenario.name =
                path.file_stem().map(|s| s.to_string_lossy().into_owned());
        }
        Ok(scenario)
    }

    pub fn apply_overrides(&mut self, o: &Overrides) {
        if let Some(dt) = o.dt {
            self.numerics.dt = dt;
        }
        if let Some(n) = o.n_cells {
            self.system.n_cells = n;
        }
        if let Some(t_end) = o.t_end {
            self.numerics.t_end = t_end;
        }
        if let Some(seed) = o.seed {
            self.seed = seed;
        }
    }
}

// ---------------------------------------------------------------------------
// Building the described system
// ---------------------------------------------------------------------------

enum BuiltSystem {
    Distributed(DistributedIoSystem),
    Boundary(BoundaryIoSystem),
    Loop(ClosedLoop),
}

impl BuiltSystem {
    fn handle(&self) -> SystemHandle<'_> {
        match self {
            Self::Distributed(s) => SystemHandle::Distributed(s),
            Self::Boundary(s) => SystemHandle::Boundary(s),
            Self::Loop(cl) => SystemHandle::Boundary(&cl.system),
        }
    }

    fn storage(&self) -> StorageFunction {
        match self {
            Self::Distributed(s) => quadratic_storage(s.family()),
            Self::Boundary(s) => quadratic_storage(s.family()),
            Self::Loop(cl) => closed_loop_ph_storage(cl),
        }
    }

    /// Field dimension per node of the underlying plant, used to place
    /// initial-state bumps.
    fn node_layout(&self) -> (usize, usize) {
        match self {
            // Euler–Bernoulli stores (q, p) blocks of n entries each.
            Self::Distributed(s) => (2, s.dim() / 2),
            Self::Boundary(s) => (s.dim() / (s.n_cells() + 1), s.n_cells() + 1),
            Self::Loop(cl) => (cl.plant_dim / (cl.system.n_cells() + 1), cl.system.n_cells() + 1),
        }
    }
}

fn build_system(sc: &Scenario) -> Result<(BuiltSystem, Option<f64>), ScenarioError> {
    let interval = (sc.system.interval[0], sc.system.interval[1]);
    let span = (0.0, sc.numerics.t_end.max(1.0));
    let ledger_radii = [0.25, 0.5, 1.0, 2.0, 4.0, 8.0];
    let profile = |name: &str| -> Result<CoefficientProfile, ScenarioError> {
        match sc.system.coefficients.get(name) {
            Some(p) => p.build(sc.system.interval),
            None => CoefficientProfile::constant(1.0).map_err(|e| invalid(e.to_string())),
        }
    };
    let model_err = |e: crate::models::ModelError| invalid(e.to_string());

    match sc.system.kind {
        SystemKind::String => {
            let spec = make_vibrating_string(&profile("rho")?, &profile("tension")?, interval)
                .map_err(model_err)?;
            let plant =
                discretize_ph(&spec, sc.system.n_cells).map_err(|e| invalid(e.to_string()))?;
            match &sc.controller {
                ControllerConfig::None => Ok((BuiltSystem::Boundary(plant), None)),
                ControllerConfig::Dynamic { k_c, s_c, stiffness, damping } => {
                    let ctrl = DynamicController::quadratic(
                        DVector::from_element(1, *k_c),
                        DMatrix::from_element(1, 1, *s_c),
                        DMatrix::from_element(1, 1, 1.0),
                        DVector::from_element(1, *stiffness),
                        DVector::from_element(1, *damping),
                    )
                    .map_err(|e| invalid(e.to_string()))?;
                    let sample_times = [0.0, 0.5 * span.1, span.1];
                    let cl = build_closed_loop_ph(&plant, &ctrl, &sample_times, sc.seed)
                        .map_err(|e| invalid(e.to_string()))?;
                    let sigma = cl.sigma;
                    Ok((BuiltSystem::Loop(cl), Some(sigma)))
                }
                ControllerConfig::Static { .. } => Err(invalid(
                    "static collocated feedback applies to the euler_bernoulli system",
                )),
            }
        }
        SystemKind::Timoshenko => {
            if !matches!(sc.controller, ControllerConfig::None) {
                return Err(invalid("the timoshenko scenario only supports controller = none"));
            }
            let spec = make_timoshenko_beam(
                &profile("shear")?,
                &profile("rho")?,
                &profile("flexural")?,
                &profile("rot_inertia")?,
                interval,
            )
            .map_err(model_err)?;
            let plant =
                discretize_ph(&spec, sc.system.n_cells).map_err(|e| invalid(e.to_string()))?;
            Ok((BuiltSystem::Boundary(plant), None))
        }
        SystemKind::EulerBernoulli => {
            let length = sc.system.interval[1] - sc.system.interval[0];
            let open = make_euler_bernoulli_tip_mass(
                sc.system.n_cells,
                &profile("stiffness")?,
                &profile("gain")?,
                sc.system.rho,
                sc.system.tip_mass,
                sc.system.tip_inertia,
                length,
            )
            .map_err(model_err)?;
            match &sc.controller {
                ControllerConfig::None => Ok((BuiltSystem::Distributed(open), None)),
                ControllerConfig::Static { sigma, cubic } => {
                    if !(*sigma > 0.0) || *cubic < 0.0 {
                        return Err(invalid(
                            "static feedback needs sigma > 0 and cubic >= 0",
                        ));
                    }
                    let (s, c) = (*sigma, *cubic);
                    let spec = CollocatedSpec {
                        system: open,
                        g: Arc::new(move |y: &DVector<f64>| {
                            y.map(|v| s * v + c * v * v * v)
                        }),
                        sigma: s,
                    };
                    let closed = build_collocated_closed_loop(
                        &spec,
                        span,
                        &ledger_radii,
                        120,
                        sc.seed,
                    )
                    .map_err(|e| invalid(e.to_string()))?;
                    Ok((BuiltSystem::Distributed(closed), Some(s)))
                }
                ControllerConfig::Dynamic { .. } => Err(invalid(
                    "the dynamic boundary controller applies to the string system",
                )),
            }
        }
    }
}

fn build_initial_state(
    sc: &Scenario,
    system: &BuiltSystem,
    u0: &DVector<f64>,
) -> DVector<f64> {
    let handle = system.handle();
    let dim = handle.dim();
    let sketch = match &sc.initial_state {
        InitialStateConfig::Zero => DVector::zeros(dim),
        InitialStateConfig::Bump { amplitude, component, mode } => {
            let (m, nodes) = system.node_layout();
            let comp = component % m;
            let mut x = DVector::zeros(dim);
            for j in 0..nodes {
                let z = j as f64 / (nodes.max(2) - 1) as f64;
                let v = amplitude * (*mode as f64 * std::f64::consts::PI * z).sin();
                match system {
                    BuiltSystem::Distributed(_) => x[comp * nodes + j] = v,
                    _ => x[j * m + comp] = v,
                }
            }
            x
        }
    };
    handle.compatible_state(0.0, &sketch, u0)
}

// ---------------------------------------------------------------------------
// Running and reporting
// ---------------------------------------------------------------------------

#[derive(Debug, Serialize)]
pub struct CheckOutcome {
    pub kind: String,
    pub passed: bool,
    pub tolerance: f64,
    /// The quantity compared against the tolerance (residual, worst ratio,
    /// or norm, depending on the check).
    pub observed: f64,
    pub detail: String,
}

#[derive(Debug, Serialize)]
pub struct RunReport {
    pub scenario: String,
    pub system: String,
    pub controller: String,
    pub n_cells: usize,
    pub state_dim: usize,
    pub dt: f64,
    pub t_end: f64,
    pub seed: u64,
    pub steps: usize,
    pub final_state_norm: f64,
    pub max_state_norm: f64,
    pub initial_storage: f64,
    pub final_storage: f64,
    /// Running impedance-balance residual of the main run (also the last
    /// CSV column).
    pub max_cumulative_residual: f64,
    pub checks: Vec<CheckOutcome>,
    pub all_passed: bool,
}

#[derive(Debug)]
pub struct RunOutcome {
    pub report: RunReport,
    /// CSV text: `t, x_norm, V, u_*, y_*, residual` at full precision.
    pub timeseries: String,
}

impl RunOutcome {
    pub fn report_json(&self) -> String {
        let mut text = serde_json::to_string_pretty(&self.report)
            .expect("report serialization cannot fail");
        text.push('\n');
        text
    }

    /// Writes `report.json` and `timeseries.csv` into `dir` (created if
    /// missing).
    pub fn write_to(&self, dir: &Path) -> std::io::Result<()> {
        std::fs::create_dir_all(dir)?;
        std::fs::write(dir.join("report.json"), self.report_json())?;
        std::fs::write(dir.join("timeseries.csv"), &self.timeseries)?;
        Ok(())
    }
}

fn render_timeseries(
    traj: &Trajectory,
    storage: &StorageFunction,
    u: &Signal,
    gram: &crate::operators::Gram,
) -> (String, f64) {
    let k = u.dim();
    let p = traj.outputs.first().map_or(0, |y| y.len());
    let mut csv = String::from("t,x_norm,V");
    for i in 0..k {
        let _ = write!(csv, ",u_{i}");
    }
    for i in 0..p {
        let _ = write!(csv, ",y_{i}");
    }
    csv.push_str(",residual\n");

    let v0 = storage.value(traj.times[0], &traj.states[0]);
    let mut integral = 0.0;
    let mut prev_supply = u.value(traj.times[0]).dot(&traj.outputs[0]);
    let mut worst_residual = 0.0f64;
    for idx in 0..traj.len() {
        let t = traj.times[idx];
        let u_val = u.value(t);
        let supply = u_val.dot(&traj.outputs[idx]);
        if idx > 0 {
            let h = t - traj.times[idx - 1];
            integral += 0.5 * h * (prev_supply + supply);
        }
        prev_supply = supply;
        let v = storage.value(t, &traj.states[idx]);
        let residual = v - v0 - integral;
        worst_residual = worst_residual.max(residual);
        let _ = write!(csv, "{:.16e},{:.16e},{:.16e}", t, gram.norm(&traj.states[idx]), v);
        for i in 0..k {
            let _ = write!(csv, ",{:.16e}", u_val[i]);
        }
        for i in 0..p {
            let _ = write!(csv, ",{:.16e}", traj.outputs[idx][i]);
        }
        let _ = writeln!(csv, ",{residual:.16e}");
    }
    (csv, worst_residual)
}

/// Runs a scenario end to end: build, simulate, evaluate checks, and render
/// the artifacts. Pure function of the scenario (given its seed).
pub fn run_scenario(sc: &Scenario) -> Result<RunOutcome, ScenarioError> {
    if !(sc.numerics.dt > 0.0 && sc.numerics.t_end > sc.numerics.dt) {
        return Err(invalid(format!(
            "numerics need 0 < dt < t_end, got dt = {}, t_end = {}",
            sc.numerics.dt, sc.numerics.t_end
        )));
    }
    if sc.system.interval[1] <= sc.system.interval[0] {
        return Err(invalid("spatial interval must be increasing"));
    }
    let (system, margin) = build_system(sc)?;
    let handle = system.handle();
    let storage = system.storage();
    let u = sc.input.build(handle.input_dim())?;
    let x0 = build_initial_state(sc, &system, &u.value(0.0));
    let opts = SolveOptions { method: sc.numerics.method.into(), ..SolveOptions::default() };

    let traj = handle
        .simulate(&x0, &u, sc.numerics.t_end, sc.numerics.dt, &opts)
        .map_err(|e| ScenarioError::Run(e.to_string()))?;
    if traj.blew_up {
        return Err(ScenarioError::Run(format!(
            "state norm exceeded the blow-up threshold at t = {:.6}",
            traj.max_time
        )));
    }
    let gram = handle.gram();
    let (timeseries, worst_residual) = render_timeseries(&traj, &storage, &u, gram);

    let mut checks = Vec::new();
    for check in &sc.checks {
        let outcome = match check {
            CheckConfig::Impedance { tolerance } => {
                let r = check_impedance_passivity(&storage, &traj, &u, *tolerance);
                CheckOutcome {
                    kind: "impedance".into(),
                    passed: r.passed,
                    tolerance: *tolerance,
                    observed: r.max_cumulative_residual,
                    detail: format!(
                        "cumulative residual {:.3e} over {} steps",
                        r.max_cumulative_residual, r.steps
                    ),
                }
            }
            CheckConfig::Scattering { tolerance } => {
                let sigma = margin.ok_or_else(|| {
                    invalid("the scattering check needs a controller with a damping margin")
                })?;
                let (alpha, beta) =
                    scattering_from_impedance(sigma).map_err(|e| invalid(e.to_string()))?;
                let r =
                    check_scattering_passivity(&storage, &traj, &u, alpha, beta, *tolerance);
                CheckOutcome {
                    kind: "scattering".into(),
                    passed: r.passed,
                    tolerance: *tolerance,
                    observed: r.max_cumulative_residual,
                    detail: format!(
                        "cumulative residual {:.3e} with alpha = {alpha:.4}, beta = {beta:.4}",
                        r.max_cumulative_residual
                    ),
                }
            }
            CheckConfig::Ugs { trials, slack } => {
                let sigma = margin.ok_or_else(|| {
                    invalid("the UGS check needs a controller with a damping margin")
                })?;
                let (alpha, _) =
                    scattering_from_impedance(sigma).map_err(|e| invalid(e.to_string()))?;
                let gains = build_ugs_gains(&storage.psi_lower, &storage.psi_upper, alpha)
                    .map_err(|e| invalid(e.to_string()))?;
                let r = check_ugs(
                    &handle,
                    &gains,
                    *trials,
                    sc.numerics.t_end,
                    sc.numerics.dt,
                    *slack,
                    sc.seed,
                )
                .map_err(|e| ScenarioError::Run(e.to_string()))?;
                CheckOutcome {
                    kind: "ugs".into(),
                    passed: r.passed,
                    tolerance: 1.0 + slack,
                    observed: r.worst_ratio,
                    detail: format!(
                        "{}/{} trials within the bound, worst ratio {:.4}",
                        r.passed_trials, r.trials, r.worst_ratio
                    ),
                }
            }
            CheckConfig::Equilibrium { tolerance } => {
                let r = check_equilibrium(&handle, sc.numerics.t_end, sc.numerics.dt, *tolerance)
                    .map_err(|e| ScenarioError::Run(e.to_string()))?;
                CheckOutcome {
                    kind: "equilibrium".into(),
                    passed: r.passed,
                    tolerance: *tolerance,
                    observed: r.worst_violation,
                    detail: r.detail,
                }
            }
        };
        checks.push(outcome);
    }

    let all_passed = checks.iter().all(|c| c.passed);
    let report = RunReport {
        scenario: sc.name.clone().unwrap_or_else(|| "unnamed".into()),
        system: sc.system.kind.label().into(),
        controller: sc.controller.label().into(),
        n_cells: sc.system.n_cells,
        state_dim: handle.dim(),
        dt: sc.numerics.dt,
        t_end: sc.numerics.t_end,
        seed: sc.seed,
        steps: traj.len().saturating_sub(1),
        final_state_norm: gram.norm(traj.final_state()),
        max_state_norm: traj.max_norm(gram),
        initial_storage: storage.value(traj.times[0], &traj.states[0]),
        final_storage: storage.value(*traj.times.last().unwrap(), traj.final_state()),
        max_cumulative_residual: worst_residual,
        checks,
        all_passed,
    };
    Ok(RunOutcome { report, timeseries })
}

#[cfg(test)]
mod tests {
    use super::*;

    const STRING_LOOP: &str = r#"
seed = 11

[system]
kind = "string"
n_cells = 12

[system.coefficients.rho]
base = 1.0
delta = 0.25
boundary_stationary = true

[system.coefficients.tension]
base = 1.0
delta = -0.2
boundary_stationary = true

[controller]
kind = "dynamic"
k_c = 2.0
s_c = 0.5
stiffness = 1.3
damping = 0.2

[input]
kind = "sin_squared"
amplitude = [0.3]
omega = 2.0

[numerics]
dt = 1e-3
t_end = 0.5

[[checks]]
kind = "impedance"
tolerance = 1e-3
"#;

    #[test]
    fn parses_with_defaults() {
        let sc = Scenario::from_toml(STRING_LOOP).unwrap();
        assert_eq!(sc.seed, 11);
        assert_eq!(sc.system.n_cells, 12);
        assert!(matches!(sc.controller, ControllerConfig::Dynamic { .. }));
        assert!(matches!(sc.initial_state, InitialStateConfig::Zero));
        assert_eq!(sc.checks.len(), 1);
    }

    #[test]
    fn rejects_unknown_fields() {
        let text = STRING_LOOP.replace("t_end = 0.5", "t_end = 0.5\ntypo_field = 3");
        assert!(matches!(Scenario::from_toml(&text), Err(ScenarioError::Parse(_))));
    }

    #[test]
    fn runs_the_string_loop_and_passes_checks() {
        let sc = Scenario::from_toml(STRING_LOOP).unwrap();
        let outcome = run_scenario(&sc).unwrap();
        assert!(outcome.report.all_passed, "{}", outcome.report_json());
        assert_eq!(outcome.report.steps, 500);
        assert_eq!(outcome.report.state_dim, 13 * 2 + 2);
        let header = outcome.timeseries.lines().next().unwrap();
        assert_eq!(header, "t,x_norm,V,u_0,y_0,residual");
        assert_eq!(outcome.timeseries.lines().count(), 502);
    }

    #[test]
    fn reports_are_deterministic() {
        let sc = Scenario::from_toml(STRING_LOOP).unwrap();
        let a = run_scenario(&sc).unwrap();
        let b = run_scenario(&sc).unwrap();
        assert_eq!(a.report_json(), b.report_json());
        assert_eq!(a.timeseries, b.timeseries);
    }

    #[test]
    fn scattering_without_margin_is_a_config_error() {
        let text = STRING_LOOP
            .replace(
                "[controller]\nkind = \"dynamic\"\nk_c = 2.0\ns_c = 0.5\nstiffness = 1.3\ndamping = 0.2\n",
                "",
            )
            .replace("kind = \"impedance\"", "kind = \"scattering\"");
        let sc = Scenario::from_toml(&text).unwrap();
        let err = run_scenario(&sc).unwrap_err();
        assert!(err.is_config_error(), "{err}");
    }

    #[test]
    fn overrides_take_effect() {
        let mut sc = Scenario::from_toml(STRING_LOOP).unwrap();
        sc.apply_overrides(&Overrides {
            dt: Some(2e-3),
            n_cells: Some(8),
            t_end: Some(0.4),
            seed: Some(99),
        });
        assert_eq!(sc.numerics.dt, 2e-3);
        assert_eq!(sc.system.n_cells, 8);
        assert_eq!(sc.numerics.t_end, 0.4);
        assert_eq!(sc.seed, 99);
    }

    #[test]
    fn bump_initial_state_is_compatible() {
        let text = STRING_LOOP.replace(
            "[numerics]",
            "[initial_state]\nkind = \"bump\"\namplitude = 0.4\ncomponent = 1\n\n[numerics]",
        );
        let sc = Scenario::from_toml(&text).unwrap();
        let outcome = run_scenario(&sc).unwrap();
        assert!(outcome.report.max_state_norm > 0.1);
        assert!(outcome.report.all_passed, "{}", outcome.report_json());
    }

    #[test]
    fn euler_bernoulli_static_loop_runs() {
        let text = r#"
[system]
kind = "euler_bernoulli"
n_cells = 10

[controller]
kind = "static"
sigma = 0.5
cubic = 1.0

[input]
kind = "sin_squared"
amplitude = [0.3]
omega = 3.0

[numerics]
dt = 1e-3
t_end = 0.4

[[checks]]
kind = "impedance"

[[checks]]
kind = "scattering"
"#;
        let sc = Scenario::from_toml(text).unwrap();
        let outcome = run_scenario(&sc).unwrap();
        assert!(outcome.report.all_passed, "{}", outcome.report_json());
    }

    #[test]
    fn timoshenko_zero_input_keeps_equilibrium() {
        let text = r#"
[system]
kind = "timoshenko"
n_cells = 8

[system.coefficients.shear]
base = 1.0
delta = -0.2

[numerics]
dt = 1e-3
t_end = 0.3

[[checks]]
kind = "equilibrium"
"#;
        let sc = Scenario::from_toml(text).unwrap();
        let outcome = run_scenario(&sc).unwrap();
        assert!(outcome.report.all_passed, "{}", outcome.report_json());
    }
}
