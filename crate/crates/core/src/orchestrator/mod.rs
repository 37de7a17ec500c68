//! Server and client agents and the three execution drivers.

pub mod artifact;
pub mod client;
pub mod cost;
pub mod deployment;
pub mod server;
pub mod simulation;

pub use artifact::{read_model, write_model};
pub use client::ClientAgent;
pub use cost::{SimClock, Termination};
pub use deployment::{run_client, run_client_at, run_server, ClientOutcome, Server, ServerOutcome};
pub use server::{ClockKind, ServerAgent};
pub use simulation::{run_simulation, run_simulation_with, LocalModelRecord, SimOptions, SimulationOutcome};

/// Seconds since the Unix epoch.
pub fn wall_now() -> f64 {
    std::time::SystemTime::now()
        .duration_since(std::time::UNIX_EPOCH)
        .map(|d| d.as_secs_f64())
        .unwrap_or(0.0)
}
