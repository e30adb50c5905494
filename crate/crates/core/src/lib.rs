//! Analytical and event-driven models of asynchronous global-to-shared copies
//! on throughput processors.
//!
//! The crate bundles a GPU spec database with derived balance metrics, a
//! roofline model, three copy patterns plus a synchronous baseline, an
//! event-driven SM simulator, a parameter-sweep harness and an aggregator
//! for externally measured timings.

pub mod bench_ingest;
pub mod error;
pub mod machine_model;
pub mod microbench;
pub mod patterns;
pub mod plot;
pub mod roofline;
pub mod sim;

pub use error::{Error, Result};
pub use machine_model::{GpuSpec, Precision, SpecDatabase};
pub use patterns::{PatternKind, Step, WaitKind, Workload};
pub use roofline::{Bound, Roofline, RooflinePoint};
pub use sim::{occupancy, simulate, Grid, MachineParams, SimResult};
