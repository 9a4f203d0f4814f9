//! Deterministic discrete-event simulator of an agent serving stack.
//!
//! Agent sessions alternate think steps with tool calls. Think steps and
//! document QA run as requests on a large and a small model engine with
//! continuous batching, a prefix-cached KV block pool, pluggable admission
//! policy and optional speculative decoding. All randomness is keyed by the
//! run seed, so a (config, seed) pair always yields the same report.

pub mod clock;
pub mod config;
pub mod engine;
pub mod hashing;
pub mod oracle;
pub mod presets;
pub mod report;
pub mod scenarios;
pub mod workload;

pub use config::ScenarioConfig;
pub use engine::{SimError, Simulation};
pub use report::MetricsReport;
pub use scenarios::run_scenario;
