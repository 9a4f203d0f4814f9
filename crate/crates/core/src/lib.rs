//! Acceleration mechanisms for agent-serving LLM stacks.
//!
//! - [`sam`]: online suffix automaton and composite draft source.
//! - [`specdec`]: lossless speculative decoding, retrieval and background builds.
//! - [`kvcache`]: paged KV block pool with prefix caching.
//! - [`sched`]: cache-pressure-aware request scheduling and baselines.
//! - [`collab`]: large/small model escalation controller.
//! - [`compress`]: partitioned agent memory with asynchronous distillation.

pub mod collab;
pub mod compress;
pub mod kvcache;
pub mod sam;
pub mod sched;
pub mod specdec;

pub use sam::TokenId;
