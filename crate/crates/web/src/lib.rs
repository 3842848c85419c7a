//! Browser bindings for the toolkit: three demo operations exported through
//! wasm-bindgen, each returning a JSON string so the page needs no typed
//! glue. Parameters are clamped to ranges that stay responsive in a browser
//! tab; errors come back as `{"error": "..."}` instead of panicking across
//! the wasm boundary.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use wasm_bindgen::prelude::*;

use passlab::boundary::discretize_ph;
use passlab::comparison::build_ugs_gains;
use passlab::controller::{build_closed_loop_ph, ClosedLoop, DynamicController};
use passlab::models::{make_vibrating_string, CoefficientProfile};
use passlab::semilinear::SolveOptions;
use passlab::signal::Signal;
use passlab::storage::closed_loop_ph_storage;
use passlab::verify::{mollify_input, scattering_from_impedance, SystemHandle};

fn error_json(msg: impl std::fmt::Display) -> String {
    serde_json::json!({ "error": msg.to_string() }).to_string()
}

fn to_json<T: Serialize>(value: &T) -> String {
    serde_json::to_string(value).unwrap_or_else(|e| error_json(e))
}

/// Coefficient shape fixed to 1 at the clamped end and 0 at the actuated
/// end, so the feedback constraint row keeps unit weights.
fn edge_shape(z: f64) -> f64 {
    (std::f64::consts::FRAC_PI_2 * (1.0 - z)).sin().powi(2)
}

fn build_loop(
    n_cells: usize,
    k_c: f64,
    s_c: f64,
    stiffness: f64,
    damping: f64,
) -> Result<ClosedLoop, String> {
    let rho = CoefficientProfile::ramp_shaped(1.0, 0.3, 1.0, edge_shape)
        .map_err(|e| e.to_string())?;
    let tension = CoefficientProfile::ramp_shaped(1.0, -0.25, 1.0, edge_shape)
        .map_err(|e| e.to_string())?;
    let spec = make_vibrating_string(&rho, &tension, (0.0, 1.0)).map_err(|e| e.to_string())?;
    let plant = discretize_ph(&spec, n_cells).map_err(|e| e.to_string())?;
    let ctrl = DynamicController::quadratic(
        DVector::from_element(1, k_c),
        DMatrix::from_element(1, 1, s_c),
        DMatrix::from_element(1, 1, 1.0),
        DVector::from_element(1, stiffness),
        DVector::from_element(1, damping),
    )
    .map_err(|e| e.to_string())?;
    build_closed_loop_ph(&plant, &ctrl, &[0.0, 1.0, 2.0, 5.0], 0xdeb0).map_err(|e| e.to_string())
}

#[derive(Serialize)]
struct LoopRun {
    sigma: f64,
    n_cells: usize,
    dt: f64,
    times: Vec<f64>,
    /// Velocity effort profile per frame (one value per mesh node).
    frames: Vec<Vec<f64>>,
    /// Controller state (spring deflection, flywheel momentum) per frame.
    controller: Vec<[f64; 2]>,
    energy: Vec<f64>,
    input: Vec<f64>,
    output: Vec<f64>,
    /// Running impedance residual `V(t) − V(0) − ∫ uᵀy`.
    residual: Vec<f64>,
}

/// Simulates the vibrating string in feedback with the scalar
/// port-Hamiltonian boundary controller, driven by `a·sin²(ωt)` at the
/// controller port, and returns animation frames plus the energy balance.
#[wasm_bindgen]
pub fn simulate_string_loop(
    n_cells: u32,
    k_c: f64,
    s_c: f64,
    stiffness: f64,
    damping: f64,
    amplitude: f64,
    omega: f64,
    t_end: f64,
    frames: u32,
) -> String {
    let n_cells = (n_cells as usize).clamp(4, 96);
    let frames = (frames as usize).clamp(16, 400);
    let t_end = if t_end.is_finite() { t_end.clamp(0.5, 12.0) } else { 4.0 };
    if ![k_c, s_c, stiffness, damping, amplitude, omega].iter().all(|v| v.is_finite()) {
        return error_json("parameters must be finite");
    }
    let cl = match build_loop(n_cells, k_c, s_c, stiffness, damping.max(0.0)) {
        Ok(cl) => cl,
        Err(e) => return error_json(e),
    };
    let storage = closed_loop_ph_storage(&cl);
    let dt = 2e-3;
    let u = Signal::sin_squared(DVector::from_element(1, amplitude.clamp(-2.0, 2.0)), omega);
    let handle = SystemHandle::Boundary(&cl.system);
    let traj = match handle.simulate(
        &DVector::zeros(cl.system.dim()),
        &u,
        t_end,
        dt,
        &SolveOptions::default(),
    ) {
        Ok(t) => t,
        Err(e) => return error_json(e),
    };

    let weight = cl.system.weight_diag();
    let nodes = n_cells + 1;
    let stride = (traj.len() / frames).max(1);
    let v0 = storage.value(traj.times[0], &traj.states[0]);
    let mut run = LoopRun {
        sigma: cl.sigma,
        n_cells,
        dt,
        times: Vec::new(),
        frames: Vec::new(),
        controller: Vec::new(),
        energy: Vec::new(),
        input: Vec::new(),
        output: Vec::new(),
        residual: Vec::new(),
    };
    let mut integral = 0.0;
    let mut prev_supply = 0.0;
    for k in 0..traj.len() {
        let t = traj.times[k];
        let supply = u.value(t).dot(&traj.outputs[k]);
        if k > 0 {
            integral += 0.5 * (traj.times[k] - traj.times[k - 1]) * (prev_supply + supply);
        }
        prev_supply = supply;
        if k % stride != 0 && k != traj.len() - 1 {
            continue;
        }
        let x = &traj.states[k];
        let m = (**weight)(t);
        // Velocity effort: weight times momentum component at every node.
        let profile: Vec<f64> =
            (0..nodes).map(|j| m[2 * j + 1] * x[2 * j + 1]).collect();
        run.times.push(t);
        run.frames.push(profile);
        run.controller.push([x[cl.plant_dim], x[cl.plant_dim + 1]]);
        run.energy.push(storage.value(t, x));
        run.input.push(u.value(t)[0]);
        run.output.push(traj.outputs[k][0]);
        run.residual.push(storage.value(t, x) - v0 - integral);
    }
    to_json(&run)
}

#[derive(Serialize)]
struct EnvelopeTrial {
    x0_norm: f64,
    norms: Vec<f64>,
    bound: Vec<f64>,
    within: bool,
}

#[derive(Serialize)]
struct EnvelopeRun {
    sigma: f64,
    times: Vec<f64>,
    trials: Vec<EnvelopeTrial>,
    all_within: bool,
}

/// Draws random initial data and inputs for the string closed loop and
/// compares each trajectory's norm against the stability envelope
/// `σ(‖x₀‖) + γ(‖u‖_{[0,t],L²})` built from the storage envelopes.
#[wasm_bindgen]
pub fn stability_envelope(seed: u32, trials: u32, amplitude_scale: f64, t_end: f64) -> String {
    let trials = (trials as usize).clamp(1, 12);
    let t_end = if t_end.is_finite() { t_end.clamp(0.5, 8.0) } else { 3.0 };
    let scale = if amplitude_scale.is_finite() { amplitude_scale.clamp(0.0, 2.0) } else { 0.5 };
    let cl = match build_loop(16, 1.5, 0.6, 1.2, 0.15) {
        Ok(cl) => cl,
        Err(e) => return error_json(e),
    };
    let storage = closed_loop_ph_storage(&cl);
    let (alpha, _) = match scattering_from_impedance(cl.sigma) {
        Ok(pair) => pair,
        Err(e) => return error_json(e),
    };
    let gains = match build_ugs_gains(&storage.psi_lower, &storage.psi_upper, alpha) {
        Ok(g) => g,
        Err(e) => return error_json(e),
    };
    let handle = SystemHandle::Boundary(&cl.system);
    let gram = handle.gram();
    let dim = handle.dim();
    let dt = 2e-3;
    let mut rng = ChaCha8Rng::seed_from_u64(seed as u64);
    let mut run = EnvelopeRun {
        sigma: cl.sigma,
        times: Vec::new(),
        trials: Vec::new(),
        all_within: true,
    };
    for _ in 0..trials {
        let amp = scale * rng.gen_range(0.2..1.0f64);
        let omega = rng.gen_range(0.5..3.0f64);
        let u = Signal::sin_squared(DVector::from_element(1, amp), omega);
        let mode = rng.gen_range(1..4usize);
        let x0_scale = rng.gen_range(0.1..0.8f64);
        let sketch = DVector::from_fn(dim, |i, _| {
            if i < cl.plant_dim && i % 2 == 1 {
                let node = (i / 2) as f64 / (cl.plant_dim / 2 - 1) as f64;
                x0_scale * (mode as f64 * std::f64::consts::PI * node).sin()
            } else {
                0.0
            }
        });
        let x0 = handle.compatible_state(0.0, &sketch, &u.value(0.0));
        let traj = match handle.simulate(&x0, &u, t_end, dt, &SolveOptions::default()) {
            Ok(t) => t,
            Err(e) => return error_json(e),
        };
        let x0_norm = gram.norm(&x0);
        let stride = (traj.len() / 240).max(1);
        let mut norms = Vec::new();
        let mut bound = Vec::new();
        let mut times = Vec::new();
        let mut within = true;
        let mut u_sq = 0.0;
        let mut prev = u.value(0.0).norm_squared();
        for k in 0..traj.len() {
            let t = traj.times[k];
            let now = u.value(t).norm_squared();
            if k > 0 {
                u_sq += 0.5 * (traj.times[k] - traj.times[k - 1]) * (prev + now);
            }
            prev = now;
            let norm = gram.norm(&traj.states[k]);
            let b = gains.bound(x0_norm, u_sq.max(0.0).sqrt());
            if norm > b * 1.05 {
                within = false;
            }
            if k % stride == 0 || k == traj.len() - 1 {
                times.push(t);
                norms.push(norm);
                bound.push(b);
            }
        }
        if run.times.is_empty() {
            run.times = times;
        }
        run.all_within &= within;
        run.trials.push(EnvelopeTrial { x0_norm, norms, bound, within });
    }
    to_json(&run)
}

#[derive(Serialize)]
struct MollifiedLevel {
    level: usize,
    values: Vec<f64>,
    derivative: Vec<f64>,
}

#[derive(Serialize)]
struct MollifyRun {
    times: Vec<f64>,
    raw: Vec<f64>,
    levels: Vec<MollifiedLevel>,
}

/// Samples a step input and its mollifications at doubling levels up to
/// `max_level`, showing how the admissible smooth inputs approach the
/// discontinuous one.
#[wasm_bindgen]
pub fn mollify_step_demo(step_time: f64, value: f64, max_level: u32, samples: u32) -> String {
    let samples = (samples as usize).clamp(64, 2000);
    let max_level = (max_level as usize).clamp(2, 64);
    if !(step_time.is_finite() && value.is_finite()) {
        return error_json("parameters must be finite");
    }
    let step_time = step_time.clamp(0.1, 3.0);
    let t_end = step_time + 1.5;
    let raw = Signal::step(step_time, DVector::from_element(1, value.clamp(-3.0, 3.0)));
    let times: Vec<f64> =
        (0..=samples).map(|i| t_end * i as f64 / samples as f64).collect();
    let mut run = MollifyRun {
        times: times.clone(),
        raw: times.iter().map(|&t| raw.value(t)[0]).collect(),
        levels: Vec::new(),
    };
    let mut level = 4usize;
    while level <= max_level {
        let smooth = mollify_input(&raw, level);
        run.levels.push(MollifiedLevel {
            level,
            values: times.iter().map(|&t| smooth.value(t)[0]).collect(),
            derivative: times.iter().map(|&t| smooth.deriv(t)[0]).collect(),
        });
        level *= 2;
    }
    to_json(&run)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn loop_run_reports_energy_balance() {
        let text = simulate_string_loop(16, 1.5, 0.6, 1.2, 0.15, 0.4, 2.0, 2.0, 80);
        let v: serde_json::Value = serde_json::from_str(&text).unwrap();
        assert!(v.get("error").is_none(), "{text}");
        let frames = v["frames"].as_array().unwrap();
        assert!(frames.len() >= 80);
        assert_eq!(frames[0].as_array().unwrap().len(), 17);
        let residual = v["residual"].as_array().unwrap();
        let worst = residual.iter().map(|r| r.as_f64().unwrap()).fold(0.0f64, f64::max);
        assert!(worst <= 1e-6, "impedance residual {worst}");
        assert!(v["sigma"].as_f64().unwrap() > 0.0);
    }

    #[test]
    fn envelope_trials_stay_within_bound() {
        let text = stability_envelope(5, 4, 0.5, 2.0);
        let v: serde_json::Value = serde_json::from_str(&text).unwrap();
        assert!(v.get("error").is_none(), "{text}");
        assert!(v["all_within"].as_bool().unwrap());
        assert_eq!(v["trials"].as_array().unwrap().len(), 4);
        let trial = &v["trials"][0];
        let norms = trial["norms"].as_array().unwrap();
        let bound = trial["bound"].as_array().unwrap();
        assert_eq!(norms.len(), bound.len());
    }

    #[test]
    fn mollified_levels_approach_the_step() {
        let text = mollify_step_demo(0.8, 1.0, 16, 400);
        let v: serde_json::Value = serde_json::from_str(&text).unwrap();
        assert!(v.get("error").is_none(), "{text}");
        let levels = v["levels"].as_array().unwrap();
        assert_eq!(levels.len(), 3); // 4, 8, 16
        let gap = |idx: usize| -> f64 {
            let vals = levels[idx]["values"].as_array().unwrap();
            let raw = v["raw"].as_array().unwrap();
            vals.iter()
                .zip(raw)
                .map(|(a, b)| (a.as_f64().unwrap() - b.as_f64().unwrap()).abs())
                .sum::<f64>()
        };
        assert!(gap(2) < gap(1) && gap(1) < gap(0));
    }

    #[test]
    fn invalid_parameters_come_back_as_error_json() {
        let text = simulate_string_loop(16, f64::NAN, 0.6, 1.2, 0.15, 0.4, 2.0, 2.0, 80);
        let v: serde_json::Value = serde_json::from_str(&text).unwrap();
        assert!(v.get("error").is_some());
        // A controller without a positive feedthrough margin is rejected by
        // the builder, not a panic.
        let text = simulate_string_loop(16, 1.5, -0.2, 1.2, 0.15, 0.4, 2.0, 2.0, 80);
        let v: serde_json::Value = serde_json::from_str(&text).unwrap();
        assert!(v.get("error").is_some(), "{text}");
    }
}
