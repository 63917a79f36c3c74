//! Planning and simulation library for fault-tolerant tensor-parallel LLM
//! serving on a single scale-up domain.
//!
//! The crate covers KV-head and FFN-shard placement for arbitrary world
//! sizes, load-aware request routing with DP-aware chunked prefill, recovery
//! planning after GPU loss, a discrete-event serving simulator, and a small
//! double-precision reference executor that checks the placement schemes
//! compute the same function as a single device.
//!
//! See `examples/` for one runnable program per capability.

pub mod cost;
pub mod error;
pub mod metrics;
pub mod placement;
pub mod recipe;
pub mod recovery;
pub mod reference;
pub mod request;
pub mod scheduler;
pub mod sim;
pub mod spec;
pub mod trace;

pub use error::{Error, Result};
pub use spec::{ClusterSpec, GpuId, HardwareSpec, ModelSpec};
