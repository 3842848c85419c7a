//! Simulation and verification toolkit for non-autonomous semilinear
//! input-output systems.
//!
//! The library builds finite-dimensional surrogates of two system shapes —
//! distributed control `ẋ = 𝒜(t)x + f(t,x) + ℬ(t)u, y = 𝒞(t)x` and boundary
//! control `ẋ = 𝒜(t)x + f(t,x), u = ℬ(t)x, y = 𝒞(t)x` — and checks the
//! estimates that make them well behaved: passivity balances, uniform global
//! stability envelopes, Gronwall-type continuity bounds, and mollified-input
//! limits.
//!
//! Module map:
//! - [`comparison`]: class-𝒦 comparison functions and UGS gain construction
//! - [`operators`]: factorized operator families `A(t) = A₀(t)M(t)`,
//!   product-formula evolution, growth-bound estimation
//! - [`semilinear`]: mild solutions by exponential stepping, Picard
//!   refinement, Lipschitz ledgers, blow-up detection
//! - [`signal`]: input signals with derivatives and L² norms
//! - [`distributed`]: distributed-input systems, input maps Φ_t, collocated
//!   static feedback
//! - [`boundary`]: port-Hamiltonian boundary systems, SBP discretization,
//!   flattening of boundary inputs into forcing terms
//! - [`controller`]: dynamic passive controllers and closed-loop assembly
//! - [`models`]: ready-made systems (vibrating string, Timoshenko beam,
//!   Euler–Bernoulli beam with tip mass)
//! - [`storage`]: storage functions with comparison-function envelopes
//! - [`verify`]: passivity/UGS/continuity/convergence report generators
//! - [`scenario`]: TOML scenario configs, deterministic runs, CSV/JSON output

pub mod boundary;
pub mod comparison;
pub mod controller;
pub mod distributed;
pub mod models;
pub mod operators;
pub mod scenario;
pub mod semilinear;
pub mod signal;
pub mod sparse;
pub mod storage;
pub mod verify;

pub use comparison::{ComparisonFn, UgsGains};
pub use operators::{Gram, OperatorFamily, StepMethod};
pub use semilinear::{Nonlinearity, Trajectory};
pub use signal::Signal;
