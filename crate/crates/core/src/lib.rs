//! Patience-aware scheduling simulator.
//!
//! A deterministic discrete-event engine with FIFO, PAS and EAS dispatch, a
//! closed-loop user model, daily workloads, exact verification of the periodic
//! two-group scenarios, and post-processing of the resulting traces.

pub mod analytics;
pub mod behavior;
pub mod config;
pub mod engine;
pub mod experiment;
pub mod model;
pub mod population;
pub mod schedulers;
pub mod time;
pub mod verifier;
pub mod workloads;

pub use engine::{run_simulation, run_simulation_observed, EngineConfig, SimTrace};
pub use model::{CompletionRecord, HappinessState, TaskId, TaskRequest, UserId};
pub use schedulers::StrategyId;
pub use time::{Exact, SimTime};
