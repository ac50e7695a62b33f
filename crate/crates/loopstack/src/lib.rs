//! Nested-loop simulation for supervised machines: every inner control loop
//! (controller, plant, sensor, filter) can be wrapped by an outer supervisory
//! loop (a guarded state machine with mode, override, and parameter registers),
//! and the supervisors talk over a typed crosstalk channel routed through an
//! explicit relationship graph derived from a system decomposition tree.
//!
//! The crate ships a spacecraft power-subsystem reference mission (circuit
//! breaker, solar array drive, generation/storage/distribution assemblies),
//! a deterministic fixed-step engine with seeded noise and fault injection,
//! and a scenario-runner CLI. Runs are reproducible: the same scenario and
//! seed always produce byte-identical traces.
//!
//! Start with the runnable programs under `examples/`; each one exercises a
//! single capability (step response, breaker reflex, message routing,
//! decomposition lint, a full orbit run, the sacrifice trade-off).

pub mod autonomy;
pub mod bus;
pub mod cli;
pub mod control;
pub mod engine;
pub mod error;
pub mod mission;
pub mod model;
pub mod report;
pub mod rng;
pub mod scenario;
pub mod taxonomy;
pub mod trace;

pub use error::{Error, Result};
